"""Learned objects: Lyapunov candidate, saturated controller, residual model.

All three hold an immutable :class:`~roaforge.netcore.ParamStore` snapshot.
Every evaluation accepts an optional ``params`` mapping; any mapping that
contains the object's (prefixed) keys works, which lets the trainer pass one
merged store with ``requires_grad`` tensors for all of them.

Parameter prefixes: ``V.`` (Lyapunov candidate), ``u.`` (controller),
``res.`` (residual dynamics).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from . import netcore
from .dynamics import SystemSpec, Trajectory
from .netcore import DTYPE, DenseNetSpec, ParamStore

GAMMA = 1e-6


def _t(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Lyapunov candidate  V(x) = x^T (M M^T + gamma I) x + phi(x)^T phi(x)

@dataclass
class LyapunovNet:
    n: int
    gamma: float
    phi: DenseNetSpec
    params: ParamStore

    @classmethod
    def create(cls, n: int, phi_dims: Sequence[int] = (64, 64, 64), gamma: float = GAMMA,
               seed: int | np.random.Generator = 0) -> "LyapunovNet":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        phi = DenseNetSpec.simple((n, *phi_dims), ("tanh",) * len(phi_dims), constrained=True)
        n_tri = n * (n + 1) // 2
        m_entries = rng.uniform(-1.0 / np.sqrt(n), 1.0 / np.sqrt(n), size=n_tri)
        params = ParamStore([("V.M", torch.from_numpy(m_entries))]).merged(
            netcore.init_params(phi, rng, prefix="V.phi."))
        return cls(n, gamma, phi, params)

    def M(self, params: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
        p = self.params if params is None else params
        rows, cols = torch.tril_indices(self.n, self.n)
        entries = p["V.M"]
        return torch.zeros(self.n, self.n, dtype=DTYPE).index_put((rows, cols), entries)

    def quad_matrix(self, params=None) -> torch.Tensor:
        M = self.M(params)
        return M @ M.T + self.gamma * torch.eye(self.n, dtype=DTYPE)

    def phi_out(self, x, params=None) -> torch.Tensor:
        p = self.params if params is None else params
        return netcore.forward(self.phi, p, _t(x), prefix="V.phi.")

    def value(self, x, params=None) -> torch.Tensor:
        x = _t(x)
        P = self.quad_matrix(params)
        ph = self.phi_out(x, params)
        return torch.einsum("...i,ij,...j->...", x, P, x) + (ph * ph).sum(-1)


def lyapunov_value(net: LyapunovNet, x, params=None) -> torch.Tensor:
    return net.value(x, params)


def lyapunov_value_and_grad(net: LyapunovNet, x, params=None, create_graph: bool = False):
    """``V(x)`` and ``dV/dx`` for a batch ``x`` of shape ``(..., n)``."""
    x = _t(x).detach().requires_grad_(True)
    with torch.enable_grad():
        v = net.value(x, params)
        (gx,) = torch.autograd.grad(v.sum(), x, create_graph=create_graph)
    if not create_graph:
        v = v.detach()
    return v, gx


def lyapunov_grad(net: LyapunovNet, x, params=None, create_graph: bool = False) -> torch.Tensor:
    return lyapunov_value_and_grad(net, x, params, create_graph)[1]


# ---------------------------------------------------------------------------
# controller  u(x) = LS(u0(x) + psi(x))

def loose_saturation(y, a: float, b: float, m_a, m_b):
    """Identity on ``[a, b]``, slope ``m_a`` below ``a`` and ``m_b`` above ``b``."""
    if isinstance(y, torch.Tensor):
        return torch.where(y < a, a + m_a * (y - a), torch.where(y > b, b + m_b * (y - b), y))
    y = np.asarray(y, dtype=float)
    return np.where(y < a, a + m_a * (y - a), np.where(y > b, b + m_b * (y - b), y))


@dataclass
class ControllerNet:
    K: np.ndarray          # fixed LQR gain, u0(x) = u_eq - K x
    u_eq: np.ndarray
    psi: DenseNetSpec
    a: float
    b: float
    params: ParamStore     # psi weights, slopes m_a / m_b

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("saturation thresholds need a < b")

    @classmethod
    def create(cls, K, a: float, b: float, psi_hidden: Sequence[int] = (16, 16, 16),
               u_eq=None, seed: int | np.random.Generator = 0) -> "ControllerNet":
        K = np.atleast_2d(np.asarray(K, dtype=float))
        m, n = K.shape
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        # bias-free so that psi(0) = 0 and the origin stays an equilibrium
        psi = DenseNetSpec.simple((n, *psi_hidden, m), ("tanh",) * len(psi_hidden) + ("identity",))
        p = netcore.init_params(psi, rng, prefix="u.psi.")
        # zero output layer: the untrained controller is exactly LS(u0)
        last = f"u.psi.W{psi.n_layers - 1}"
        p = p.replace({last: torch.zeros_like(p[last])})
        p = p.merged(ParamStore([("u.m_a", torch.zeros(())), ("u.m_b", torch.zeros(()))]))
        u_eq = np.zeros(m) if u_eq is None else np.asarray(u_eq, dtype=float)
        return cls(K, u_eq, psi, float(a), float(b), p)

    @property
    def m(self) -> int:
        return self.K.shape[0]

    def pre_saturation(self, x, params=None) -> torch.Tensor:
        p = self.params if params is None else params
        x = _t(x)
        u0 = _t(self.u_eq) - x @ _t(self.K).T
        return u0 + netcore.forward(self.psi, p, x, prefix="u.psi.")

    def evaluate(self, x, params=None) -> torch.Tensor:
        p = self.params if params is None else params
        return loose_saturation(self.pre_saturation(x, p), self.a, self.b, p["u.m_a"], p["u.m_b"])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.evaluate(torch.from_numpy(np.asarray(x, dtype=float))).numpy()


def controller_eval(ctrl: ControllerNet, x, params=None) -> torch.Tensor:
    return ctrl.evaluate(x, params)


# ---------------------------------------------------------------------------
# residual dynamics  f_hat = f0 + f_res,  g_hat = g0 + g_res

@dataclass
class ResidualDynamics:
    n: int
    m: int
    f_net: DenseNetSpec
    f_mask: tuple[int, ...]
    g_shape: str | tuple[int, ...]
    g_row: int | None
    g_net: DenseNetSpec | None
    params: ParamStore

    @classmethod
    def create(cls, spec: SystemSpec, hidden: Sequence[int] = (16, 16, 16),
               seed: int | np.random.Generator = 0) -> "ResidualDynamics":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n, m = spec.n, spec.m
        f_mask = tuple(spec.residual_f_mask)
        acts = ("tanh",) * len(hidden) + ("identity",)
        # bias-free so that f_res(0) = 0
        f_net = DenseNetSpec.simple((n, *hidden, len(f_mask)), acts)
        p = netcore.init_params(f_net, rng, prefix="res.f.")
        last = f"res.f.W{f_net.n_layers - 1}"
        p = p.replace({last: torch.zeros_like(p[last])})
        g_net = None
        if spec.residual_g_shape == "scalar":
            if spec.scalar_g_row is None:
                raise ValueError("scalar g residual needs an actuated row")
            p = p.merged(ParamStore([("res.g_scalar", torch.zeros(()))]))
            g_shape, g_row = "scalar", spec.scalar_g_row
        else:
            g_shape, g_row = tuple(spec.residual_g_shape), None
            g_net = DenseNetSpec.simple((n, *hidden, len(g_shape) * m), acts, bias=True)
            pg = netcore.init_params(g_net, rng, prefix="res.g.")
            last = f"res.g.W{g_net.n_layers - 1}"
            lb = f"res.g.b{g_net.n_layers - 1}"
            pg = pg.replace({last: torch.zeros_like(pg[last]), lb: torch.zeros_like(pg[lb])})
            p = p.merged(pg)
        for i in f_mask + (g_shape if isinstance(g_shape, tuple) else (g_row,)):
            if not 0 <= i < n:
                raise ValueError(f"residual mask index {i} out of range for n={n}")
        return cls(n, m, f_net, f_mask, g_shape, g_row, g_net, p)

    def f_residual(self, x, params=None) -> torch.Tensor:
        p = self.params if params is None else params
        x = _t(x)
        out = netcore.forward(self.f_net, p, x, prefix="res.f.")
        full = torch.zeros(x.shape[:-1] + (self.n,), dtype=DTYPE)
        return full.index_add(-1, torch.tensor(self.f_mask), out)

    def g_residual(self, x, params=None) -> torch.Tensor:
        p = self.params if params is None else params
        x = _t(x)
        batch = x.shape[:-1]
        if self.g_shape == "scalar":
            e = torch.zeros(self.n, self.m, dtype=DTYPE)
            e[self.g_row, :] = 1.0
            return (p["res.g_scalar"] * e).expand(batch + (self.n, self.m))
        out = netcore.forward(self.g_net, p, x, prefix="res.g.").reshape(batch + (len(self.g_shape), self.m))
        full = torch.zeros(batch + (self.n, self.m), dtype=DTYPE)
        return full.index_add(-2, torch.tensor(self.g_shape), out)

    def fields(self, spec: SystemSpec, x, params=None):
        """Learned nominal model ``(f_hat(x), g_hat(x))``."""
        x = _t(x)
        f0, g0 = spec.fields(x, "nominal")
        return f0 + self.f_residual(x, params), g0 + self.g_residual(x, params)


def closed_loop_hat(ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec, x, params=None):
    """``f_hat(x) + g_hat(x) u(x)`` on the learned nominal model."""
    f, g = res.fields(spec, x, params)
    u = ctrl.evaluate(x, params)
    return f + (g @ u[..., None])[..., 0]


def disturbance(ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec, x, params=None):
    """``d = (f - f_hat) + (g - g_hat) u`` against the true plant."""
    x = _t(x)
    f, g = spec.fields(x, "true")
    fh, gh = res.fields(spec, x, params)
    u = ctrl.evaluate(x, params)
    return (f - fh) + ((g - gh) @ u[..., None])[..., 0]


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    # Euclidean norm with a zero (not NaN) gradient at v = 0
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def vdot_hat(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec, x,
             params=None, create_graph: bool = False) -> torch.Tensor:
    """Estimated Lyapunov derivative ``grad V(x)^T (f_hat + g_hat u)``."""
    _, gv = lyapunov_value_and_grad(net, x, params, create_graph=create_graph)
    x = _t(x)
    return (gv * closed_loop_hat(ctrl, res, spec, x, params)).sum(-1)


def lyapunov_loss(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                  batch, lambda_roa: float, lambda_lip: float, kappa: float, eps: float,
                  params=None) -> torch.Tensor:
    """Hinge on the decrease condition plus a gradient-norm penalty.

    ``lambda_roa * mean(relu(Vdot_hat + kappa |x|^2 + eps)) + lambda_lip * mean(|grad V|)``
    """
    x = _t(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    _, gv = lyapunov_value_and_grad(net, x, params, create_graph=True)
    vd = (gv * closed_loop_hat(ctrl, res, spec, x, params)).sum(-1)
    sq = (x * x).sum(-1)
    roa = torch.relu(vd + kappa * sq + eps).mean()
    lip = _safe_norm(gv).mean()
    return lambda_roa * roa + lambda_lip * lip


def vdot_tilde(net: LyapunovNet, traj: Trajectory, index: int, params=None) -> float:
    """Forward difference ``(V(x_{k+1}) - V(x_k)) / dt`` along a recorded trajectory."""
    if not 0 <= index < len(traj.states) - 1:
        raise IndexError(f"index {index} outside trajectory of {len(traj.states)} states")
    with torch.no_grad():
        v = net.value(_t(traj.states[index:index + 2]), params)
    return float((v[1] - v[0]) / traj.dt)


def vdot_tilde_pairs(net: LyapunovNet, x, x_next, dt: float, params=None) -> torch.Tensor:
    with torch.no_grad():
        return (net.value(_t(x_next), params) - net.value(_t(x), params)) / dt


def dynamics_fit_loss(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics, spec: SystemSpec,
                      x, targets, params=None) -> torch.Tensor:
    """MSE between ``vdot_hat(x)`` and recorded finite-difference targets.

    ``grad V`` and the controller output are detached, so only the residual
    parameters receive gradients.
    """
    x = _t(x)
    targets = _t(targets)
    if x.shape[0] == 0:
        raise ValueError("empty pair set")
    gv = lyapunov_grad(net, x, params).detach()
    with torch.no_grad():
        u = ctrl.evaluate(x, params)
    f, g = res.fields(spec, x, params)
    vd = (gv * (f + (g @ u[..., None])[..., 0])).sum(-1)
    return ((vd - targets) ** 2).mean()


# ---------------------------------------------------------------------------
# bundling for checkpoints

def bundle(net: LyapunovNet, ctrl: ControllerNet, res: ResidualDynamics) -> ParamStore:
    return net.params.merged(ctrl.params).merged(res.params)


def unbundle(store: Mapping[str, torch.Tensor], net: LyapunovNet, ctrl: ControllerNet,
             res: ResidualDynamics) -> None:
    """Write the matching entries of ``store`` back into the three objects."""
    for obj in (net, ctrl, res):
        obj.params = ParamStore((k, store[k].detach().clone()) for k in obj.params)
