"""Training loop: pretraining, then alternating model fitting and RoA growth."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import netcore
from .dynamics import DT, ESCAPE_SCALE, HORIZON, R_CONV, SETTLE_WINDOW, SystemSpec, sweep
from .lqr import LqrSolution, lqr_for
from .lyapnet import (GAMMA, ControllerNet, LyapunovNet, ResidualDynamics, bundle,
                      dynamics_fit_loss, lyapunov_loss, unbundle, vdot_tilde_pairs)
from .netcore import NonFiniteGradient, ParamStore
from .roa import Mesh, RoaReport, build_mesh, level_search

log = logging.getLogger(__name__)

# per-plant defaults: lambda_roa, lambda_lip, eta0, k_eta, a, b, mesh points per dim
_TABLE = {
    "pendulum": dict(lambda_roa=1000.0, lambda_lip=0.1, eta0=5.0, k_eta=15, a=-2.0, b=2.0,
                     mesh_dims=(64, 64)),
    "strict_feedback": dict(lambda_roa=500.0, lambda_lip=0.01, eta0=2.0, k_eta=None, a=-1.0, b=1.0,
                            mesh_dims=(25, 25, 25)),
    "cartpole": dict(lambda_roa=500.0, lambda_lip=0.01, eta0=9.0, k_eta=None, a=-5.0, b=5.0,
                     mesh_dims=(10, 10, 10, 10)),
}

METRIC_COLUMNS = ("iter", "c", "eta", "ratio_true", "ratio_fi", "ratio_est",
                  "loss_lyap", "loss_dyn", "lr")


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``store`` holds the last good parameters."""

    def __init__(self, message: str, store: ParamStore, logs: list):
        super().__init__(message)
        self.store = store
        self.logs = logs


@dataclass
class TrainConfig:
    system: str
    lambda_roa: float
    lambda_lip: float
    eta0: float
    k_eta: int | None
    a: float
    b: float
    mesh_dims: tuple[int, ...]
    gamma: float = GAMMA
    kappa: float = 0.1
    eps: float = 0.01
    iterations: int = 100
    seed: int = 0
    # rollouts
    dt: float = DT
    horizon: float = HORIZON
    r_conv: float = R_CONV
    settle_window: int = SETTLE_WINDOW
    escape_scale: float = ESCAPE_SCALE
    record_stride: int = 5
    record_steps: int = 200
    max_pairs: int = 4096
    # SGD
    batch_size: int = 256
    lr_lyap: float = 1e-3
    lr_dyn: float = 1e-3
    lr_step: int = 40
    lr_decay: float = 0.5
    epochs_lyap: int = 10
    epochs_dyn: int = 10
    grad_clip: float = 100.0        # global-norm cap per step; 0 disables
    # pretraining
    pretrain_lr: float = 0.05
    pretrain_epochs: int = 1500
    pretrain_tol: float = 1e-5
    pretrain_clip: float = 1.0      # tight cap keeps early steps from saturating tanh units
    pretrain_scale: float = 0.1
    pretrain_dyn_epochs: int = 10
    # architecture
    phi_dims: tuple[int, ...] = (64, 64, 64)
    psi_hidden: tuple[int, ...] = (16, 16, 16)
    res_hidden: tuple[int, ...] = (16, 16, 16)

    def __post_init__(self):
        self.mesh_dims = tuple(int(d) for d in self.mesh_dims)
        self.phi_dims = tuple(int(d) for d in self.phi_dims)
        self.psi_hidden = tuple(int(d) for d in self.psi_hidden)
        self.res_hidden = tuple(int(d) for d in self.res_hidden)
        self.validate()

    @classmethod
    def for_system(cls, system: str, **overrides) -> "TrainConfig":
        if system not in _TABLE:
            raise ValueError(f"unknown system {system!r}")
        kw = dict(_TABLE[system])
        kw.update(overrides)
        return cls(system=system, **kw)

    def validate(self) -> None:
        positive = ("lambda_roa", "gamma", "kappa", "eps", "dt", "horizon", "r_conv",
                    "batch_size", "lr_lyap", "lr_dyn", "lr_step", "pretrain_lr",
                    "pretrain_tol", "pretrain_scale", "settle_window", "max_pairs")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        nonneg = ("lambda_lip", "eta0", "iterations", "epochs_lyap", "epochs_dyn",
                  "pretrain_epochs", "pretrain_dyn_epochs", "record_steps", "record_stride",
                  "grad_clip", "pretrain_clip")
        for name in nonneg:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be non-negative, got {v!r}")
        if not self.a < self.b:
            raise ValueError("need a < b")
        if self.k_eta is not None and int(self.k_eta) < 1:
            raise ValueError("k_eta must be >= 1 when given")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.escape_scale < 1:
            raise ValueError("escape_scale must be >= 1")
        if any(d < 2 for d in self.mesh_dims):
            raise ValueError("mesh needs at least 2 points per dimension")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class IterationLog:
    iteration: int
    c: float
    eta: float
    ratio_true: float
    ratio_fi: float
    ratio_est: float
    loss_lyap: float
    loss_dyn: float
    lr: float
    lr_dyn: float = 0.0
    train_points: int = 0
    fallback: bool = False
    wall_time: float = 0.0

    def row(self) -> list[str]:
        vals = [self.iteration, self.c, self.eta, self.ratio_true, self.ratio_fi, self.ratio_est,
                self.loss_lyap, self.loss_dyn, self.lr]
        return [str(v) if isinstance(v, int) else repr(float(v)) for v in vals]


def write_metrics(logs: list[IterationLog], path: str | os.PathLike) -> None:
    # wall time is deliberately left out so that reruns are byte-identical
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in logs:
            w.writerow(rec.row())


def eta_schedule(i: int, eta0: float, k_eta: int | None = None) -> float:
    """Level multiplier ``1 + eta0 / (1 + floor(i / k_eta))``; fixed when ``k_eta`` is None."""
    if i < 1:
        raise ValueError("iterations are counted from 1")
    if k_eta is None:
        return 1.0 + eta0
    return 1.0 + eta0 / (1 + i // k_eta)


# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    spec: SystemSpec
    net: LyapunovNet
    ctrl: ControllerNet
    res: ResidualDynamics
    lqr: LqrSolution
    mesh: Mesh
    x0_mask: np.ndarray
    initial_report: RoaReport | None = None
    pretrain_mse: float = float("nan")
    pretrain_dyn_loss: float = float("nan")
    logs: list[IterationLog] = field(default_factory=list)
    final_report: RoaReport | None = None
    final_mesh: Mesh | None = None
    rng: np.random.Generator | None = None


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def _sgd_epochs(store: ParamStore, names: list[str], loss_fn: Callable, x: np.ndarray,
                extra: np.ndarray | None, epochs: int, batch_size: int, lr: float,
                rng: np.random.Generator, clip: float = 0.0) -> tuple[ParamStore, float]:
    """Mini-batch SGD on ``names``; returns the new store and the mean epoch loss of the last epoch."""
    last = float("nan")
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), batch_size, rng):
            live = store.detached()
            leaves = {k: live[k].requires_grad_(True) for k in names}
            xb = torch.from_numpy(x[idx])
            loss = loss_fn(live, xb, None if extra is None else torch.from_numpy(extra[idx]))
            if not torch.isfinite(loss):
                raise NonFiniteGradient(f"non-finite loss {float(loss.detach())}")
            gs = dict(zip(names, netcore.grad(loss, [leaves[k] for k in names])))
            if clip > 0:
                gs = netcore.clip_grad_norm(gs, clip)
            store = netcore.sgd_step(store, gs, lr)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        last = total / max(count, 1)
    return store, last


def classify_mesh(cfg: TrainConfig, spec: SystemSpec, ctrl: ControllerNet, mesh: Mesh):
    res = sweep(spec, "true", ctrl, mesh.points, dt=cfg.dt, horizon=cfg.horizon,
                r_conv=cfg.r_conv, settle_window=cfg.settle_window,
                escape_scale=cfg.escape_scale, record_stride=cfg.record_stride,
                record_steps=cfg.record_steps)
    return dataclasses.replace(mesh, labels=res.labels), res


def _pairs_for(sw, mask: np.ndarray, cap: int, rng: np.random.Generator):
    sel = np.flatnonzero(mask[sw.pair_index]) if len(sw.pair_index) else np.zeros(0, dtype=np.int64)
    if len(sel) > cap:
        sel = np.sort(rng.choice(sel, size=cap, replace=False))
    return sw.pair_x[sel], sw.pair_next[sel]


def _fit_dynamics(cfg, state: TrainState, store: ParamStore, px, pn, lr, epochs, rng):
    """Fit residual parameters to forward-difference targets under the current V."""
    net, ctrl, res, spec = state.net, state.ctrl, state.res, state.spec
    if len(px) == 0 or epochs == 0:
        return store, float("nan")
    targets = vdot_tilde_pairs(net, px, pn, cfg.dt, store).numpy()
    names = [k for k in store if k.startswith("res.")]

    def loss_fn(p, xb, tb):
        return dynamics_fit_loss(net, ctrl, res, spec, xb, tb, p)
    return _sgd_epochs(store, names, loss_fn, px, targets, epochs, cfg.batch_size, lr, rng,
                       cfg.grad_clip)


def pretrain_value(cfg: TrainConfig, net: LyapunovNet, mesh: Mesh,
                   rng: np.random.Generator) -> tuple[LyapunovNet, float]:
    """Fit ``V`` to ``scale * |x|^2`` over the mesh by SGD."""
    x = mesh.points
    target = cfg.pretrain_scale * np.sum(x * x, axis=1)
    store = net.params
    names = list(store)

    def loss_fn(p, xb, tb):
        return ((net.value(xb, p) - tb) ** 2).mean()

    mse = float("nan")
    for _ in range(cfg.pretrain_epochs):
        store, _ = _sgd_epochs(store, names, loss_fn, x, target, 1, cfg.batch_size,
                               cfg.pretrain_lr, rng, cfg.pretrain_clip)
        with torch.no_grad():
            mse = float(((net.value(torch.from_numpy(x), store) - torch.from_numpy(target)) ** 2).mean())
        if mse <= cfg.pretrain_tol:
            break
    else:
        if cfg.pretrain_epochs:
            log.warning("value pretraining stopped at MSE %.3g (target %.3g)", mse, cfg.pretrain_tol)
    net = dataclasses.replace(net, params=store)
    return net, mse


def initialise(cfg: TrainConfig, spec: SystemSpec) -> TrainState:
    """Build the LQR seed, classify it, and pretrain ``V`` and the residual model."""
    rng = np.random.default_rng(cfg.seed)
    sol = lqr_for(spec)
    ctrl = ControllerNet.create(sol.K, cfg.a, cfg.b, cfg.psi_hidden, spec.equilibrium_input, seed=rng)
    res = ResidualDynamics.create(spec, cfg.res_hidden, seed=rng)
    net = LyapunovNet.create(spec.n, cfg.phi_dims, cfg.gamma, seed=rng)
    mesh = build_mesh(spec, cfg.mesh_dims)
    mesh, sw = classify_mesh(cfg, spec, ctrl, mesh)
    x0_mask = mesh.stable_mask.copy()
    net, mse = pretrain_value(cfg, net, mesh, rng)
    state = TrainState(spec, net, ctrl, res, sol, mesh, x0_mask, pretrain_mse=mse)
    store = bundle(net, ctrl, res)
    px, pn = _pairs_for(sw, x0_mask, cfg.max_pairs, rng)
    store, dyn = _fit_dynamics(cfg, state, store, px, pn, cfg.lr_dyn, cfg.pretrain_dyn_epochs, rng)
    unbundle(store, net, ctrl, res)
    state.pretrain_dyn_loss = dyn
    _, state.initial_report, _ = level_search(mesh, net, ctrl, res, spec, cfg.kappa, 0)
    state.rng = rng
    return state


def train(cfg: TrainConfig, spec: SystemSpec, state: TrainState | None = None,
          on_iteration: Callable[[IterationLog, TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.iterations`` rounds of the alternating scheme.

    Each round: label the mesh under the current controller, find the
    certified level ``c``, build the training set ``{V <= eta * c}``, fit the
    residual model on rollout pairs starting there, then update ``V`` and the
    controller on the Lyapunov loss.
    """
    if state is None:
        state = initialise(cfg, spec)
    rng = state.rng
    net, ctrl, res = state.net, state.ctrl, state.res
    mesh = state.mesh
    v_keys = [k for k in bundle(net, ctrl, res) if k.startswith(("V.", "u."))]
    for i in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        good = bundle(net, ctrl, res)
        try:
            # (1) labels + supervision pairs from true-plant rollouts
            mesh, sw = classify_mesh(cfg, spec, ctrl, mesh)
            # (2) certified level
            c, report, mesh = level_search(mesh, net, ctrl, res, spec, cfg.kappa, i)
            # (3)-(4) training set
            eta = eta_schedule(i, cfg.eta0, cfg.k_eta)
            in_set = mesh.v_values <= eta * c if c > 0 else np.zeros(len(mesh), dtype=bool)
            fallback = not np.any(in_set)
            if fallback:
                log.warning("iteration %d: empty training set, using the initial stable set", i)
                in_set = state.x0_mask
            # (5) residual model on pairs starting in the training set
            lr_dyn = netcore.step_lr(cfg.lr_dyn, i - 1, cfg.lr_step, cfg.lr_decay)
            store = good
            before = store.subset("V.").digest() + store.subset("u.").digest()
            px, pn = _pairs_for(sw, in_set, cfg.max_pairs, rng)
            store, loss_dyn = _fit_dynamics(cfg, state, store, px, pn, lr_dyn, cfg.epochs_dyn, rng)
            assert store.subset("V.").digest() + store.subset("u.").digest() == before
            # (6) learning rate
            lr = netcore.step_lr(cfg.lr_lyap, i - 1, cfg.lr_step, cfg.lr_decay)
            # (7) V and controller on the Lyapunov loss
            frozen = store.subset("res.").digest()

            def loss_fn(p, xb, _):
                return lyapunov_loss(net, ctrl, res, spec, xb, cfg.lambda_roa, cfg.lambda_lip,
                                     cfg.kappa, cfg.eps, p)
            store, loss_lyap = _sgd_epochs(store, v_keys, loss_fn, mesh.points[in_set], None,
                                           cfg.epochs_lyap, cfg.batch_size, lr, rng,
                                           cfg.grad_clip)
            assert store.subset("res.").digest() == frozen
            if not all(bool(torch.all(torch.isfinite(store[k]))) for k in store):
                raise NonFiniteGradient("parameters became non-finite")
        except NonFiniteGradient as exc:
            unbundle(good, net, ctrl, res)
            raise TrainingAborted(f"iteration {i}: {exc}", good, state.logs) from exc
        unbundle(store, net, ctrl, res)
        rec = IterationLog(i, c, eta, report.ratio_true, report.ratio_fi, report.ratio_estimated,
                           loss_lyap, loss_dyn, lr, lr_dyn, int(np.count_nonzero(in_set)), fallback,
                           time.perf_counter() - t0)
        state.logs.append(rec)
        log.info("iter %d c=%.4g eta=%.3g true=%.2f fi=%.2f est=%.2f Ll=%.4g Ld=%.4g n=%d",
                 i, c, eta, rec.ratio_true, rec.ratio_fi, rec.ratio_est, loss_lyap, loss_dyn,
                 rec.train_points)
        if on_iteration is not None:
            on_iteration(rec, state)
    mesh, _ = classify_mesh(cfg, spec, ctrl, mesh)
    _, state.final_report, state.final_mesh = level_search(mesh, net, ctrl, res, spec, cfg.kappa,
                                                           cfg.iterations)
    state.mesh = mesh
    return state
