"""Benchmark plants, RK4 rollouts and stable-initial-state labelling.

Each plant is written once, component-wise, as ``(f, g)`` where ``f`` is a
list of ``n`` drift components and ``g`` an ``n x m`` nested list.  The same
definition is evaluated on numpy arrays, torch tensors (for autograd) and on
symbolic SMT-LIB expressions, which is why the component functions only use
arithmetic operators plus ``ops.sin``/``ops.cos``.
"""
from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

GRAVITY = 9.81

R_CONV = 0.1
SETTLE_WINDOW = 50
DT = 0.01
HORIZON = 20.0
ESCAPE_SCALE = 1.5

Controller = Callable[[np.ndarray], np.ndarray]


class Label(enum.IntEnum):
    UNKNOWN = -1
    UNSTABLE = 0
    STABLE = 1      # converged, but left the state box on the way
    FI_STABLE = 2   # converged without ever leaving the state box


def _ops_for(x):
    if isinstance(x, torch.Tensor):
        return torch
    if isinstance(x, (np.ndarray, np.generic, float, int)):
        return np
    return getattr(x, "ops")  # symbolic expressions carry their own namespace


# ---------------------------------------------------------------------------
# plant definitions

def _pendulum(x, p, ops):
    th, om = x
    ml2 = p["m"] * p["l"] ** 2
    f = [om, (p["g"] / p["l"]) * ops.sin(th)]
    g = [[0.0], [1.0 / ml2]]
    return f, g


def _strict_feedback(x, p, ops):
    x1, x2, x3 = x
    f = [p["e1"] * x2, p["e2"] * x3, p["e3"] * (x1 * x1)]
    g = [[0.0], [0.0], [p["e4"]]]
    return f, g


def _cartpole(x, p, ops):
    th, om, _pos, v = x
    M, m, l, b, grav = p["M"], p["m"], p["l"], p["b_c"], p["g"]
    s = ops.sin(th)
    c = ops.cos(th)
    # mass-matrix determinant divided by m l^2; positive for M, m > 0
    den = M + m * (s * s)
    rhs = -(m * l) * (om * om) * s - b * v
    a_th = (c * rhs + (M + m) * grav * s) / (l * den)
    a_x = (rhs + m * grav * (s * c)) / den
    f = [om, a_th, v, a_x]
    g = [[0.0], [c / (l * den)], [0.0], [1.0 / den]]
    return f, g


def _cartpole_guard(x, p):
    s = np.sin(np.asarray(x[..., 0], dtype=float))
    if np.any(p["M"] + p["m"] * s * s <= 0):
        raise ZeroDivisionError("cart-pole mass matrix is singular")


_PLANTS = {
    "pendulum": dict(
        n=2, m=1, fn=_pendulum,
        defaults={"m": 1.0, "l": 0.5, "m_nom": 0.8, "l_nom": 0.4, "g": GRAVITY},
        keys=("m", "l"),
        positive=("m", "l", "m_nom", "l_nom", "g"),
        box=[(-math.pi, math.pi), (-math.pi, math.pi)],
        f_mask=(1,), g_shape="scalar", g_row=1,
        names=("theta", "omega"),
    ),
    "strict_feedback": dict(
        n=3, m=1, fn=_strict_feedback,
        defaults={"e1": 1.0, "e2": 1.0, "e3": 1.0, "e4": 1.0,
                  "e1_nom": 0.9, "e2_nom": 0.8, "e3_nom": 0.9, "e4_nom": 0.8},
        keys=("e1", "e2", "e3", "e4"),
        positive=(),
        box=[(-1.5, 1.5), (-1.5, 1.5), (-2.0, 2.0)],
        f_mask=(0, 1, 2), g_shape="scalar", g_row=2,
        names=("x1", "x2", "x3"),
    ),
    "cartpole": dict(
        n=4, m=1, fn=_cartpole,
        defaults={"M": 1.0, "m": 0.3, "l": 1.0, "b_c": 0.0,
                  "M_nom": 0.8, "m_nom": 0.27, "l_nom": 0.8, "b_c_nom": 0.0, "g": GRAVITY},
        keys=("M", "m", "l", "b_c"),
        positive=("M", "m", "l", "M_nom", "m_nom", "l_nom", "g"),
        non_negative=("b_c", "b_c_nom"),
        box=[(-math.pi / 6, math.pi / 6), (-1.0, 1.0), (-1.0, 1.0), (-1.5, 1.5)],
        f_mask=(1, 3), g_shape=(1, 3), g_row=None,
        names=("theta", "omega", "x", "v"),
    ),
}

SYSTEM_NAMES = tuple(_PLANTS)


@dataclass(frozen=True)
class SystemSpec:
    """A benchmark plant: true and nominal control-affine fields plus metadata."""

    name: str
    n: int
    m: int
    params: Mapping[str, float]
    true_params: Mapping[str, float]
    nominal_params: Mapping[str, float]
    state_lo: np.ndarray
    state_hi: np.ndarray
    residual_f_mask: tuple[int, ...]
    residual_g_shape: str | tuple[int, ...]
    scalar_g_row: int | None
    equilibrium_input: np.ndarray
    state_names: tuple[str, ...]
    _fn: Callable = field(repr=False, compare=False, default=None)

    def components(self, comps: Sequence, which: str = "true", ops=None):
        """Raw ``(f, g)`` component lists for per-coordinate inputs ``comps``."""
        p = self._which(which)
        ops = ops if ops is not None else _ops_for(comps[0])
        return self._fn(list(comps), p, ops)

    def _which(self, which: str) -> Mapping[str, float]:
        if which == "true":
            return self.true_params
        if which == "nominal":
            return self.nominal_params
        raise ValueError(f"which must be 'true' or 'nominal', not {which!r}")

    def fields(self, x, which: str = "true"):
        """Evaluate ``f(x)`` with shape ``(..., n)`` and ``g(x)`` with shape ``(..., n, m)``."""
        if x.shape[-1] != self.n:
            raise ValueError(f"{self.name}: expected state dim {self.n}, got {x.shape[-1]}")
        if self.name == "cartpole":
            _cartpole_guard(x.detach().numpy() if isinstance(x, torch.Tensor) else np.asarray(x),
                            self._which(which))
        xp = torch if isinstance(x, torch.Tensor) else np
        comps = [x[..., i] for i in range(self.n)]
        f, g = self.components(comps, which, xp)
        zero = comps[0] * 0.0
        f = xp.stack([fi + zero for fi in f], -1)
        g = xp.stack([xp.stack([gij + zero for gij in row], -1) for row in g], -2)
        return f, g

    def true_f(self, x):
        return self.fields(x, "true")[0]

    def true_g(self, x):
        return self.fields(x, "true")[1]

    def nominal_f0(self, x):
        return self.fields(x, "nominal")[0]

    def nominal_g0(self, x):
        return self.fields(x, "nominal")[1]

    def in_box(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= self.state_lo) & (x <= self.state_hi), axis=-1)

    def with_params(self, **overrides: float) -> "SystemSpec":
        merged = dict(self.params)
        merged.update(overrides)
        return make_system(self.name, merged)


def make_system(name: str, params: Mapping[str, float] | None = None) -> SystemSpec:
    """Build one of the benchmark plants.

    ``params`` may override any plant constant; nominal values use the
    ``_nom`` suffix (``m_nom``, ``e3_nom``, ``b_c_nom`` ...).  Missing entries
    take the published defaults.
    """
    if name not in _PLANTS:
        raise ValueError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
    desc = _PLANTS[name]
    p = dict(desc["defaults"])
    for k, v in (params or {}).items():
        if k not in p:
            raise ValueError(f"{name}: unknown parameter {k!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"{name}: parameter {k} is not finite")
        p[k] = v
    for k in desc["positive"]:
        if p[k] <= 0:
            raise ValueError(f"{name}: parameter {k} must be positive")
    for k in desc.get("non_negative", ()):
        if p[k] < 0:
            raise ValueError(f"{name}: parameter {k} must be non-negative")
    true_p = {k: p[k] for k in desc["keys"]}
    nom_p = {k: p[f"{k}_nom"] for k in desc["keys"]}
    if "g" in p:
        true_p["g"] = nom_p["g"] = p["g"]
    lo = np.array([b[0] for b in desc["box"]], dtype=float)
    hi = np.array([b[1] for b in desc["box"]], dtype=float)
    spec = SystemSpec(
        name=name, n=desc["n"], m=desc["m"], params=p,
        true_params=true_p, nominal_params=nom_p,
        state_lo=lo, state_hi=hi,
        residual_f_mask=tuple(desc["f_mask"]),
        residual_g_shape=desc["g_shape"],
        scalar_g_row=desc["g_row"],
        equilibrium_input=np.zeros(desc["m"]),
        state_names=desc["names"],
        _fn=desc["fn"],
    )
    return spec


def eval_field(spec: SystemSpec, which: str, x, u):
    """Closed-form ``f(x) + g(x) u`` (or the nominal counterpart)."""
    f, g = spec.fields(x, which)
    xp = torch if isinstance(x, torch.Tensor) else np
    u = xp.asarray(u) if xp is np else torch.as_tensor(u, dtype=x.dtype)
    if u.shape[-1] != spec.m:
        raise ValueError(f"{spec.name}: expected input dim {spec.m}, got {u.shape[-1]}")
    return f + (g @ u[..., None])[..., 0]


# ---------------------------------------------------------------------------
# integration

@dataclass
class Trajectory:
    t0: float
    dt: float
    states: np.ndarray   # (K+1, n)
    inputs: np.ndarray   # (K, m)
    left_box: bool
    converged: bool
    diverged: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))

    def to_csv(self, path: str | os.PathLike) -> None:
        """Columns ``t, x1..xn, u1..um``; the last row repeats the final input."""
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
            for k, (t, x) in enumerate(zip(self.times, self.states)):
                u = self.inputs[min(k, len(self.inputs) - 1)] if len(self.inputs) else np.zeros(m)
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


def _closed_loop(spec: SystemSpec, which: str, controller: Controller):
    def rhs(x):
        u = np.asarray(controller(x), dtype=float).reshape(x.shape[:-1] + (spec.m,))
        return eval_field(spec, which, x, u), u
    return rhs


def rk4_step(rhs, x: np.ndarray, dt: float):
    """One RK4 step; returns the new state and the control applied at ``x``."""
    k1, u = rhs(x)
    k2, _ = rhs(x + 0.5 * dt * k1)
    k3, _ = rhs(x + 0.5 * dt * k2)
    k4, _ = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), u


def rk4_rollout(spec: SystemSpec, which: str, controller: Controller, x0, dt: float = DT,
                horizon: float = HORIZON, r_conv: float = R_CONV,
                settle_window: int = SETTLE_WINDOW, stop_on_exit: bool = True,
                escape_scale: float | None = None) -> Trajectory:
    """Fixed-step RK4 closed-loop rollout from a single initial state.

    The rollout stops early once ``||x|| <= r_conv`` has held for
    ``settle_window`` consecutive steps (converged), when the state leaves
    the state box (only if ``stop_on_exit``), when it leaves the box scaled
    by ``escape_scale`` (diverged), or on a non-finite state (diverged).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    rhs = _closed_loop(spec, which, controller)
    x = np.asarray(x0, dtype=float).reshape(spec.n)
    esc_lo = spec.state_lo * escape_scale if escape_scale else None
    esc_hi = spec.state_hi * escape_scale if escape_scale else None
    states = [x.copy()]
    inputs = []
    left = not bool(spec.in_box(x))
    converged = diverged = False
    settle = 1 if np.linalg.norm(x) <= r_conv else 0
    n_steps = int(round(horizon / dt))
    with np.errstate(all="ignore"):
        for _ in range(n_steps):
            if settle >= settle_window:
                converged = True
                break
            if left and stop_on_exit:
                break
            x, u = rk4_step(rhs, x, dt)
            states.append(x.copy())
            inputs.append(np.asarray(u, dtype=float).reshape(spec.m))
            if not np.all(np.isfinite(x)):
                diverged = left = True
                break
            if not spec.in_box(x):
                left = True
            if esc_lo is not None and np.any((x < esc_lo) | (x > esc_hi)):
                diverged = True
                break
            settle = settle + 1 if np.linalg.norm(x) <= r_conv else 0
        else:
            converged = settle >= settle_window
    return Trajectory(0.0, dt, np.array(states), np.array(inputs).reshape(-1, spec.m),
                      left_box=bool(left), converged=bool(converged), diverged=bool(diverged))


@dataclass
class SweepResult:
    """Outcome of a batched rollout sweep over many initial states."""

    converged: np.ndarray
    left_box: np.ndarray
    diverged: np.ndarray
    # forward-difference supervision pairs: (source index, x_k, x_{k+1})
    pair_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pair_next: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def labels(self) -> np.ndarray:
        lab = np.full(self.converged.shape, Label.UNSTABLE, dtype=np.int8)
        lab[self.converged] = Label.STABLE
        lab[self.converged & ~self.left_box] = Label.FI_STABLE
        return lab


def sweep(spec: SystemSpec, which: str, controller: Controller, x0: np.ndarray,
          dt: float = DT, horizon: float = HORIZON, r_conv: float = R_CONV,
          settle_window: int = SETTLE_WINDOW, escape_scale: float = ESCAPE_SCALE,
          record_stride: int = 0, record_steps: int = 0) -> SweepResult:
    """Vectorised RK4 rollouts of every row of ``x0``.

    Rollouts are not stopped at the state box; they continue until they
    settle, leave the ``escape_scale``-enlarged box, or hit the horizon.
    When ``record_stride > 0``, the pair ``(x_k, x_{k+1})`` is recorded every
    ``record_stride`` steps for ``k < record_steps`` while the trajectory is
    active and inside the state box.
    """
    rhs = _closed_loop(spec, which, controller)
    x = np.array(x0, dtype=float, copy=True)
    N = x.shape[0]
    active = np.ones(N, dtype=bool)
    left = ~spec.in_box(x)
    diverged = np.zeros(N, dtype=bool)
    settle = (np.linalg.norm(x, axis=1) <= r_conv).astype(np.int64)
    converged = settle >= settle_window
    active &= ~converged
    esc_lo, esc_hi = spec.state_lo * escape_scale, spec.state_hi * escape_scale
    pairs_i, pairs_x, pairs_n = [], [], []
    n_steps = int(round(horizon / dt))
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            xa = x[idx]
            xn, _ = rk4_step(rhs, xa, dt)
            if record_stride and k < record_steps and k % record_stride == 0:
                keep = spec.in_box(xa) & spec.in_box(xn) & np.all(np.isfinite(xn), axis=1)
                pairs_i.append(idx[keep])
                pairs_x.append(xa[keep])
                pairs_n.append(xn[keep])
            x[idx] = xn
            finite = np.all(np.isfinite(xn), axis=1)
            left[idx] |= ~spec.in_box(xn) | ~finite
            esc = ~finite | np.any((xn < esc_lo) | (xn > esc_hi), axis=1)
            diverged[idx] |= esc
            near = np.linalg.norm(np.where(finite[:, None], xn, np.inf), axis=1) <= r_conv
            settle[idx] = np.where(near, settle[idx] + 1, 0)
            done = settle[idx] >= settle_window
            converged[idx] |= done & ~esc
            active[idx] &= ~(done | esc)
    res = SweepResult(converged=converged, left_box=left, diverged=diverged)
    if record_stride:
        n = spec.n
        res.pair_index = np.concatenate(pairs_i) if pairs_i else np.zeros(0, dtype=np.int64)
        res.pair_x = np.concatenate(pairs_x) if pairs_x else np.zeros((0, n))
        res.pair_next = np.concatenate(pairs_n) if pairs_n else np.zeros((0, n))
    return res


def classify_stable(spec: SystemSpec, controller: Controller, mesh, dt: float = DT,
                    horizon: float = HORIZON, **kw):
    """Label every mesh point by rolling out the true plant from it.

    Returns a copy of ``mesh`` with ``labels`` filled in
    (:class:`Label` values).
    """
    res = sweep(spec, "true", controller, mesh.points, dt=dt, horizon=horizon, **kw)
    return replace(mesh, labels=res.labels)


def linear_controller(K: np.ndarray, u0: np.ndarray | None = None) -> Controller:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    u0 = np.zeros(K.shape[0]) if u0 is None else np.asarray(u0, dtype=float)

    def ctrl(x):
        return u0 - x @ K.T
    return ctrl


def zero_controller(m: int = 1) -> Controller:
    def ctrl(x):
        return np.zeros(np.shape(x)[:-1] + (m,))
    return ctrl


def cartpole_energy(spec: SystemSpec, x: np.ndarray, which: str = "true") -> np.ndarray:
    p = spec._which(which)
    M, m, l, grav = p["M"], p["m"], p["l"], p["g"]
    th, om, v = x[..., 0], x[..., 1], x[..., 3]
    return (0.5 * (M + m) * v ** 2 - m * l * v * om * np.cos(th)
            + 0.5 * m * l ** 2 * om ** 2 + m * grav * l * np.cos(th))
