"""Mesh, sublevel-set search and robustness checks for the estimated RoA."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .dynamics import Label, SystemSpec
from .lyapnet import (ControllerNet, LyapunovNet, ResidualDynamics, closed_loop_hat,
                      disturbance, lyapunov_value_and_grad)

EVAL_CHUNK = 8192


@dataclass
class Mesh:
    """Uniform inclusive grid over a box, in lexicographic (C) order."""

    points: np.ndarray
    shape: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    tau: float
    labels: np.ndarray
    v_values: np.ndarray | None = None
    vdot_values: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(len(self.shape), -1).T
        return np.any((idx == 0) | (idx == np.array(self.shape) - 1), axis=1)

    @property
    def stable_mask(self) -> np.ndarray:
        return self.labels >= Label.STABLE

    @property
    def fi_mask(self) -> np.ndarray:
        return self.labels == Label.FI_STABLE

    @property
    def sq_norms(self) -> np.ndarray:
        return np.sum(self.points ** 2, axis=1)

    def to_csv(self, path: str | os.PathLike) -> None:
        """Columns ``x1..xn, V, Vdot_hat, label``."""
        n = self.points.shape[1]
        v = self.v_values if self.v_values is not None else np.full(len(self), np.nan)
        vd = self.vdot_values if self.vdot_values is not None else np.full(len(self), np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i + 1}" for i in range(n)] + ["V", "Vdot_hat", "label"])
            for p, a, b, lab in zip(self.points, v, vd, self.labels):
                w.writerow([repr(float(q)) for q in p] + [repr(float(a)), repr(float(b)),
                                                          Label(int(lab)).name.lower()])


def grid_mesh(lo, hi, points_per_dim: Sequence[int]) -> Mesh:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dims = tuple(int(d) for d in points_per_dim)
    if len(dims) != len(lo):
        raise ValueError("need one point count per dimension")
    if any(d < 2 for d in dims):
        raise ValueError("need at least 2 points per dimension")
    if np.any(hi <= lo):
        raise ValueError("degenerate box")
    axes = [np.linspace(l, h, d) for l, h, d in zip(lo, hi, dims)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(dims))
    tau = float(max((h - l) / (d - 1) for l, h, d in zip(lo, hi, dims)))
    return Mesh(pts, dims, lo, hi, tau, np.full(len(pts), Label.UNKNOWN, dtype=np.int8))


def build_mesh(spec: SystemSpec, points_per_dim: Sequence[int]) -> Mesh:
    return grid_mesh(spec.state_lo, spec.state_hi, points_per_dim)


def evaluate_values(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                    x: np.ndarray, chunk: int = EVAL_CHUNK):
    """``V`` and ``Vdot_hat`` on many points, chunked."""
    vs, vds = [], []
    for s in range(0, len(x), chunk):
        xc = torch.from_numpy(np.ascontiguousarray(x[s:s + chunk], dtype=float))
        v, gv = lyapunov_value_and_grad(net, xc)
        with torch.no_grad():
            vd = (gv * closed_loop_hat(ctrl, res, spec, xc)).sum(-1)
        vs.append(v.numpy())
        vds.append(vd.detach().numpy())
    if not vs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(vs), np.concatenate(vds)


def evaluate_mesh(mesh: Mesh, net, ctrl, res, spec) -> Mesh:
    v, vd = evaluate_values(net, ctrl, res, spec, mesh.points)
    return replace(mesh, v_values=v, vdot_values=vd)


# ---------------------------------------------------------------------------
# level search

@dataclass
class RoaReport:
    c: float
    ratio_true: float
    ratio_fi: float
    ratio_estimated: float
    iteration: int = 0
    certified: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def max_level(v: np.ndarray, decrease_ok: np.ndarray, stable: np.ndarray,
              boundary: np.ndarray) -> float:
    """Largest level ``c`` whose mesh sublevel set is admissible.

    A point blocks the sublevel set if it is unstable, violates the decrease
    condition, or lies on the box boundary.  ``c`` is the largest float
    strictly below the smallest blocking ``V`` value, or 0 if that value is
    not positive.
    """
    blocking = ~(stable & decrease_ok) | boundary
    if not np.any(blocking):
        raise ValueError("no blocking point; the mesh has no boundary")
    v_block = float(np.min(v[blocking]))
    if v_block <= 0.0:
        return 0.0
    c = float(np.nextafter(v_block, -np.inf))
    return c if c > 0 else 0.0


def roa_ratios(mesh: Mesh, c: float, iteration: int = 0) -> RoaReport:
    N = len(mesh)
    est = 0.0
    if c > 0 and mesh.v_values is not None:
        est = 100.0 * np.count_nonzero(mesh.v_values <= c) / N
    return RoaReport(
        c=float(c),
        ratio_true=100.0 * np.count_nonzero(mesh.stable_mask) / N,
        ratio_fi=100.0 * np.count_nonzero(mesh.fi_mask) / N,
        ratio_estimated=est,
        iteration=iteration,
        certified=bool(c > 0),
    )


def level_search_values(mesh: Mesh, kappa: float, iteration: int = 0):
    """Sublevel sweep using ``mesh.v_values`` / ``mesh.vdot_values``."""
    if mesh.v_values is None or mesh.vdot_values is None:
        raise ValueError("mesh values not populated")
    if np.any(mesh.labels == Label.UNKNOWN):
        raise ValueError("mesh not labelled; run classify_stable first")
    ok = mesh.vdot_values <= -kappa * mesh.sq_norms
    c = max_level(mesh.v_values, ok, mesh.stable_mask, mesh.boundary_mask)
    return c, roa_ratios(mesh, c, iteration)


def level_search(mesh: Mesh, net, ctrl, res, spec, kappa: float, iteration: int = 0):
    """Largest certified sublevel set of ``V`` on a labelled mesh.

    Returns ``(c, report, mesh)`` where ``mesh`` carries the evaluated
    ``V``/``Vdot_hat`` values.
    """
    mesh = evaluate_mesh(mesh, net, ctrl, res, spec)
    c, report = level_search_values(mesh, kappa, iteration)
    return c, report, mesh


# ---------------------------------------------------------------------------
# sampling of the sublevel set and its boundary

def sample_sublevel(value_fn: Callable, spec: SystemSpec, c: float, count: int,
                    rng: np.random.Generator, max_draws: int = 200) -> np.ndarray:
    """Rejection-sample up to ``count`` points of ``{V <= c}`` inside the box."""
    got = []
    total = 0
    for _ in range(max_draws):
        x = rng.uniform(spec.state_lo, spec.state_hi, size=(max(count, 1024), spec.n))
        keep = x[value_fn(x) <= c]
        got.append(keep)
        total += len(keep)
        if total >= count:
            break
    out = np.concatenate(got) if got else np.zeros((0, spec.n))
    return out[:count]


def sample_level_boundary(value_fn: Callable, spec: SystemSpec, c: float, count: int,
                          rng: np.random.Generator, tol: float = 1e-6,
                          scan_steps: int = 256, max_rounds: int = 50) -> np.ndarray:
    """Points on ``{V = c}`` found along random rays from the origin.

    For each ray the first crossing inside the box is bracketed by a scan and
    refined by bisection until ``|V - c| <= tol``; the returned point is the
    inner end of the bracket, so ``V(x) <= c`` holds exactly.
    """
    n = spec.n
    found = []
    total = 0
    for _ in range(max_rounds):
        if total >= count or c <= 0:
            break
        d = rng.standard_normal((count, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            t_hi_dim = np.where(d > 0, spec.state_hi / d, np.where(d < 0, spec.state_lo / d, np.inf))
        t_box = np.min(t_hi_dim, axis=1)
        ts = np.linspace(0.0, 1.0, scan_steps + 1)[None, :] * t_box[:, None]
        vals = value_fn((ts[:, :, None] * d[:, None, :]).reshape(-1, n)).reshape(ts.shape)
        above = vals > c
        has = np.any(above, axis=1)
        first = np.argmax(above, axis=1)
        rows = np.flatnonzero(has)
        if rows.size == 0:
            continue
        lo = ts[rows, first[rows] - 1]
        hi = ts[rows, first[rows]]
        dr = d[rows]
        v_lo = vals[rows, first[rows] - 1]
        for _ in range(200):
            done = (c - v_lo) <= tol
            if np.all(done):
                break
            mid = 0.5 * (lo + hi)
            vm = value_fn(mid[:, None] * dr)
            inside = vm <= c
            lo = np.where(inside & ~done, mid, lo)
            v_lo = np.where(inside & ~done, vm, v_lo)
            hi = np.where(~inside & ~done, mid, hi)
        pts = lo[:, None] * dr
        found.append(pts)
        total += len(pts)
    out = np.concatenate(found) if found else np.zeros((0, n))
    return out[:count]


def value_fn_for(net: LyapunovNet) -> Callable[[np.ndarray], np.ndarray]:
    def fn(x):
        with torch.no_grad():
            return net.value(torch.from_numpy(np.asarray(x, dtype=float))).numpy()
    return fn


# ---------------------------------------------------------------------------
# ISS margin and bounded-violation analysis

@dataclass
class IssCertificate:
    L_V: float
    d_max: float
    boundary_min_norm: float
    alpha_q_gain: float
    margin: float
    holds: bool
    interior_samples: int = 0
    boundary_samples: int = 0
    requested_samples: int = 0

    @property
    def delta(self) -> float:
        return self.L_V * self.d_max

    def to_dict(self) -> dict:
        return asdict(self)


def iss_margin_from_bounds(L_V: float, d_max: float, boundary_min_norm: float,
                           kappa: float) -> tuple[float, float]:
    """With ``alpha_q(r) = (kappa/2) r^2``: margin = min|x| - alpha_q^-1(L_V d_max)."""
    gain = kappa / 2.0
    threshold = math.sqrt(L_V * d_max / gain)
    return boundary_min_norm - threshold, gain


def iss_margin(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
               c: float, samples: int = 10_000, kappa: float = 0.1, seed: int = 0) -> IssCertificate:
    """Sampled version of the ISS boundary condition on ``Omega = {V <= c}``.

    ``L_V`` and ``d_max`` are maxima over samples (interior and boundary), not
    verified global bounds; the sample counts are recorded.
    """
    if not c > 0:
        raise ValueError("iss_margin needs c > 0")
    rng = np.random.default_rng(seed)
    vf = value_fn_for(net)
    inner = sample_sublevel(vf, spec, c, samples, rng)
    bnd = sample_level_boundary(vf, spec, c, max(samples // 10, 1), rng)
    pts = np.concatenate([inner, bnd]) if len(bnd) else inner
    if len(pts) == 0:
        raise ValueError("no samples found in the sublevel set")
    L_V, d_max = 0.0, 0.0
    for s in range(0, len(pts), EVAL_CHUNK):
        xc = torch.from_numpy(pts[s:s + EVAL_CHUNK])
        _, gv = lyapunov_value_and_grad(net, xc)
        with torch.no_grad():
            d = disturbance(ctrl, res, spec, xc)
        L_V = max(L_V, float(torch.linalg.vector_norm(gv, dim=-1).max()))
        d_max = max(d_max, float(torch.linalg.vector_norm(d, dim=-1).max()))
    bmin = float(np.min(np.linalg.norm(bnd, axis=1))) if len(bnd) else 0.0
    margin, gain = iss_margin_from_bounds(L_V, d_max, bmin, kappa)
    return IssCertificate(L_V=L_V, d_max=d_max, boundary_min_norm=bmin, alpha_q_gain=gain,
                          margin=margin, holds=bool(margin >= 0 and len(bnd) > 0),
                          interior_samples=len(inner), boundary_samples=len(bnd),
                          requested_samples=samples)


def violation_bound(mesh: Mesh, c: float, kappa: float, cert: IssCertificate) -> tuple[float, bool]:
    """Worst decrease violation ``delta'`` on mesh points of ``{V <= c}``.

    ``bounded`` is the boundary condition ``min |x| >= sqrt(2 (delta + delta') / kappa)``
    with ``delta = L_V d_max`` from the certificate.
    """
    if mesh.v_values is None or mesh.vdot_values is None:
        raise ValueError("mesh values not populated")
    inside = mesh.v_values <= c
    if np.any(inside):
        worst = float(np.max(mesh.vdot_values[inside] + kappa * mesh.sq_norms[inside]))
    else:
        worst = 0.0
    delta_p = max(worst, 0.0)
    need = math.sqrt(2.0 * (cert.delta + delta_p) / kappa)
    return delta_p, bool(cert.boundary_min_norm >= need)
