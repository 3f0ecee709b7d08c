"""Checking the decrease condition on a sublevel set.

Two routes share one formula

    |x|^2 >= zeta^2  and  V(x) <= c  and  Vdot_hat(x) + kappa |x|^2 >= 0

whose satisfying points are counterexamples: :func:`falsify_grid` evaluates
it on a dense grid, and :func:`export_smt2` writes it as an SMT-LIB2 script
for an external delta-complete solver.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import smtlib
from .dynamics import SystemSpec
from .lyapnet import ControllerNet, LyapunovNet, ResidualDynamics, closed_loop_hat, lyapunov_value_and_grad
from .netcore import DenseNetSpec, layer_weight
from .smtlib import Expr, Script, add, conj, ge, gt, le, lt

ZETA = 0.3
PRECISION = 1e-3
KAPPA = 0.1
MAX_EXPORT_WIDTH = 16
GRID_CHUNK = 16384


class ExportTooLarge(ValueError):
    """The network is above the export size cap; the message carries a size report."""


# ---------------------------------------------------------------------------
# direct evaluation

def formula_terms(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                  x, kappa: float = KAPPA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(|x|^2, V(x), Vdot_hat(x) + kappa |x|^2)`` on a batch."""
    xt = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)))
    v, gv = lyapunov_value_and_grad(net, xt)
    with torch.no_grad():
        vd = (gv * closed_loop_hat(ctrl, res, spec, xt)).sum(-1)
        sq = (xt * xt).sum(-1)
        lie = vd + kappa * sq
    return sq.numpy(), v.numpy(), lie.numpy()


def formula_holds(sq, v, lie, c: float, zeta: float) -> np.ndarray:
    return (sq >= zeta * zeta) & (v <= c) & (lie >= 0)


# ---------------------------------------------------------------------------
# grid falsification

@dataclass
class FalsificationResult:
    counterexample: np.ndarray | None
    checked_points: int
    resolution: float
    zeta: float
    level_c: float
    margin_min: float
    grid_points: int = 0

    @property
    def found(self) -> bool:
        return self.counterexample is not None

    def to_dict(self) -> dict:
        def num(v):
            return float(v) if math.isfinite(v) else None
        return {
            "found": self.found,
            "counterexample": None if self.counterexample is None else [float(a) for a in self.counterexample],
            "checked_points": int(self.checked_points),
            "grid_points": int(self.grid_points),
            "resolution": float(self.resolution),
            "zeta": float(self.zeta),
            "level_c": float(self.level_c),
            "margin_min": num(self.margin_min),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def grid_axes(lo, hi, resolution: float) -> list[np.ndarray]:
    """Inclusive axes whose spacing is at most ``resolution``."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    return [np.linspace(l, h, int(math.ceil((h - l) / resolution - 1e-12)) + 1)
            for l, h in zip(np.asarray(lo, float), np.asarray(hi, float))]


def _grid_chunks(axes, chunk: int):
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    for s in range(0, total, chunk):
        idx = np.unravel_index(np.arange(s, min(s + chunk, total)), shape)
        yield np.stack([a[i] for a, i in zip(axes, idx)], axis=1)


def falsify_grid(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                 c: float, zeta: float = ZETA, resolution: float | None = None,
                 kappa: float = KAPPA, chunk: int = GRID_CHUNK) -> FalsificationResult:
    """Search a uniform grid over the state box for points satisfying the violation formula.

    The first counterexample in lexicographic grid order is returned after a
    single-point re-evaluation confirms it.  ``margin_min`` is the smallest
    ``-(Vdot_hat + kappa |x|^2)`` over the checked region ``|x| >= zeta, V <= c``.
    """
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    if resolution is None:
        resolution = 0.05 * float(np.max(spec.state_hi - spec.state_lo))
    axes = grid_axes(spec.state_lo, spec.state_hi, resolution)
    grid_points = int(np.prod([len(a) for a in axes]))
    if not c > 0:
        return FalsificationResult(None, 0, resolution, zeta, float(c), math.inf, grid_points)
    checked = 0
    margin = math.inf
    cex = None
    for pts in _grid_chunks(axes, chunk):
        sq, v, lie = formula_terms(net, ctrl, res, spec, pts, kappa)
        region = (sq >= zeta * zeta) & (v <= c)
        checked += int(np.count_nonzero(region))
        if np.any(region):
            margin = min(margin, float(np.min(-lie[region])))
        if cex is None:
            for j in np.flatnonzero(region & (lie >= 0)):
                s1, v1, l1 = formula_terms(net, ctrl, res, spec, pts[j:j + 1], kappa)
                if formula_holds(s1, v1, l1, c, zeta)[0]:
                    cex = pts[j].copy()
                    break
    return FalsificationResult(cex, checked, resolution, zeta, float(c), margin, grid_points)


# ---------------------------------------------------------------------------
# SMT-LIB2 export

def _net_size(spec: DenseNetSpec) -> dict:
    return {"layers": list(spec.layer_dims), "max_width": max(spec.layer_dims[1:]),
            "neurons": int(sum(spec.layer_dims[1:]))}


def size_report(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics) -> dict:
    rep = {"phi": _net_size(net.phi), "psi": _net_size(ctrl.psi), "f_residual": _net_size(res.f_net)}
    if res.g_net is not None:
        rep["g_residual"] = _net_size(res.g_net)
    return rep


def _check_activations(spec: DenseNetSpec) -> None:
    for act in spec.activations:
        if act not in ("tanh", "identity"):
            raise ValueError(f"unsupported activation {act!r} for export")


def _sym_dense(script: Script, spec: DenseNetSpec, params, inputs: list, prefix: str, tag: str):
    """Emit one ``define-fun`` per neuron; returns the per-layer outputs (symbols)."""
    _check_activations(spec)
    h = list(inputs)
    layers = [h]
    for i in range(spec.n_layers):
        W = layer_weight(spec, params, i, prefix).detach().numpy()
        b = params[f"{prefix}b{i}"].detach().numpy() if spec.bias[i] else None
        out = []
        for r in range(W.shape[0]):
            z = add(*[W[r, j] * h[j] for j in range(len(h))], 0.0 if b is None else b[r])
            if spec.activations[i] == "tanh":
                zs = script.define(f"{tag}_z{i}_{r}", z)
                z = Expr.ops.tanh(zs)
            out.append(script.define(f"{tag}_h{i}_{r}", z))
        h = out
        layers.append(h)
    return layers


def _sym_lyapunov(script: Script, net: LyapunovNet, xs: list):
    """Symbolic ``V`` and ``grad V`` (reverse pass unrolled with numeric weights)."""
    p = net.params
    P = net.quad_matrix(p).detach().numpy()
    n = net.n
    layers = _sym_dense(script, net.phi, p, xs, "V.phi.", "phi")
    phi = layers[-1]
    quad = add(*[P[i, j] * xs[i] * xs[j] for i in range(n) for j in range(n)])
    v = script.define("V", add(quad, *[q * q for q in phi]))
    # backward through the tanh layers: delta is dV/dh at the current layer
    delta = [script.define(f"phi_d{net.phi.n_layers}_{k}", 2.0 * q) for k, q in enumerate(phi)]
    for i in reversed(range(net.phi.n_layers)):
        W = layer_weight(net.phi, p, i, "V.phi.").detach().numpy()
        h = layers[i + 1]
        # tanh' = 1 - tanh^2
        pre = [script.define(f"phi_g{i}_{r}", delta[r] * (1.0 - h[r] * h[r])) for r in range(len(h))]
        delta = [script.define(f"phi_d{i}_{j}", add(*[W[r, j] * pre[r] for r in range(W.shape[0])]))
                 for j in range(W.shape[1])]
    grad = [script.define(f"dV_{i + 1}", add(*[2.0 * P[i, j] * xs[j] for j in range(n)], delta[i]))
            for i in range(n)]
    return v, grad


def _sym_controller(script: Script, ctrl: ControllerNet, xs: list) -> list:
    p = ctrl.params
    psi = _sym_dense(script, ctrl.psi, p, xs, "u.psi.", "psi")[-1]
    m_a = float(p["u.m_a"])
    m_b = float(p["u.m_b"])
    us = []
    for k in range(ctrl.m):
        y = add(ctrl.u_eq[k], *[-ctrl.K[k, j] * xs[j] for j in range(len(xs))], psi[k])
        y = script.define(f"u_pre_{k + 1}", y)
        lo = add(ctrl.a, m_a * add(y, -ctrl.a))
        hi = add(ctrl.b, m_b * add(y, -ctrl.b))
        us.append(script.define(f"u_{k + 1}", Expr.ops.ite(lt(y, ctrl.a), lo, Expr.ops.ite(gt(y, ctrl.b), hi, y))))
    return us


def _sym_model(script: Script, res: ResidualDynamics, spec: SystemSpec, xs: list, us: list) -> list:
    f0, g0 = spec.components(xs, "nominal", ops=smtlib.SYM_OPS)
    f = [Expr.lift(t) for t in f0]
    g = [[Expr.lift(t) for t in row] for row in g0]
    rp = res.params
    fr = _sym_dense(script, res.f_net, rp, xs, "res.f.", "fres")[-1]
    for k, i in enumerate(res.f_mask):
        f[i] = f[i] + fr[k]
    if res.g_shape == "scalar":
        s = float(rp["res.g_scalar"])
        for j in range(res.m):
            g[res.g_row][j] = g[res.g_row][j] + s
    else:
        gr = _sym_dense(script, res.g_net, rp, xs, "res.g.", "gres")[-1]
        for k, i in enumerate(res.g_shape):
            for j in range(res.m):
                g[i][j] = g[i][j] + gr[k * res.m + j]
    return [script.define(f"F_{i + 1}", add(f[i], *[g[i][j] * us[j] for j in range(len(us))]))
            for i in range(spec.n)]


def build_smt2(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
               c: float, zeta: float = ZETA, kappa: float = KAPPA, precision: float = PRECISION,
               max_width: int = MAX_EXPORT_WIDTH) -> Script:
    rep = size_report(net, ctrl, res)
    widest = max(v["max_width"] for v in rep.values())
    if net.phi.out_dim > max_width or widest > max_width:
        raise ExportTooLarge(f"network wider than the export cap of {max_width}: {json.dumps(rep)}")
    for s in (net.phi, ctrl.psi, res.f_net) + ((res.g_net,) if res.g_net is not None else ()):
        _check_activations(s)
    script = Script()
    script.comment(f"system: {spec.name}\nzeta: {fmt(zeta)}\nprecision: {fmt(precision)}\n"
                   f"kappa: {fmt(kappa)}\nlevel c: {fmt(c)}\nsizes: {json.dumps(rep)}")
    script.option("precision", smtlib.fmt_real(precision))
    xs = [script.declare(f"x{i + 1}") for i in range(spec.n)]
    for x, lo, hi in zip(xs, spec.state_lo, spec.state_hi):
        script.assert_(conj(le(float(lo), x), le(x, float(hi))))
    v, grad = _sym_lyapunov(script, net, xs)
    us = _sym_controller(script, ctrl, xs)
    F = _sym_model(script, res, spec, xs, us)
    sq = script.define("sqnorm", add(*[x * x for x in xs]))
    lie = script.define("lie", add(*[grad[i] * F[i] for i in range(spec.n)], kappa * sq))
    script.assert_(conj(ge(sq, zeta * zeta), le(v, float(c)), ge(lie, 0.0)))
    return script


def fmt(v: float) -> str:
    return repr(float(v))


def export_smt2(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                c: float, zeta: float, kappa: float, precision: float, path: str | os.PathLike,
                max_width: int = MAX_EXPORT_WIDTH) -> smtlib.Model:
    """Write the violation formula to ``path`` and return it re-read by :mod:`smtlib`."""
    text = build_smt2(net, ctrl, res, spec, c, zeta, kappa, precision, max_width).text()
    model = smtlib.Model(text)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return model


def evaluate_exported(model: smtlib.Model, x: np.ndarray) -> dict[str, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return model.evaluate({f"x{i + 1}": x[:, i] for i in range(x.shape[1])})
