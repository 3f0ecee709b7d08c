"""Shared constructors for hand-built fixtures."""
import math

import numpy as np
import torch

from roaforge.dynamics import make_system
from roaforge.lqr import lqr_for
from roaforge.lyapnet import ControllerNet, LyapunovNet, ResidualDynamics
from roaforge.netcore import ParamStore
from roaforge.verify import formula_holds, formula_terms


def quadratic_net(P, phi_dims=(4,)) -> LyapunovNet:
    """Candidate with ``V(x) = x^T P x`` up to the vanishing ``phi`` contribution.

    All ``G`` blocks are zero, so every constrained layer is ``eps_W * I`` on
    top of zeros and ``|phi(x)|^2`` is of order ``eps_W^(2 L) |x|^2``.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    net = LyapunovNet.create(n, phi_dims, seed=0)
    L = np.linalg.cholesky(P - net.gamma * np.eye(n))
    rows, cols = np.tril_indices(n)
    store = net.params.replace({"V.M": torch.from_numpy(L[rows, cols].copy())})
    store = store.replace({k: torch.zeros_like(v) for k, v in store.items() if k.startswith("V.phi.")})
    net.params = store
    return net


def linear_controller_net(K, a=-1e9, b=1e9, m_ab=0.0) -> ControllerNet:
    ctrl = ControllerNet.create(np.atleast_2d(K), a, b, (4,), seed=0)
    ctrl.params = ctrl.params.replace({"u.m_a": torch.tensor(m_ab), "u.m_b": torch.tensor(m_ab)})
    return ctrl


def random_models(spec, seed=0, phi_dims=(8, 8), psi=(6, 6), res_hidden=(5,), scale=0.4,
                  a=-2.0, b=2.0):
    """Small nets with every parameter perturbed away from its structured init."""
    rng = np.random.default_rng(seed)
    K = lqr_for(spec).K
    net = LyapunovNet.create(spec.n, phi_dims, seed=rng)
    ctrl = ControllerNet.create(K, a, b, psi, seed=rng)
    res = ResidualDynamics.create(spec, res_hidden, seed=rng)
    for obj in (net, ctrl, res):
        obj.params = ParamStore(
            (k, v + scale * torch.from_numpy(rng.standard_normal(tuple(v.shape))))
            for k, v in obj.params.items())
    return net, ctrl, res


def exact_model_system(name):
    """Plant whose nominal parameters equal the true ones."""
    spec = make_system(name)
    overrides = {f"{k}_nom": v for k, v in spec.true_params.items() if k != "g"}
    return make_system(name, overrides)


def rel_close(a, b, rtol=1e-5, atol=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b)) + atol))


def violation_radius(spec, net, ctrl, res, c, zeta, kappa, count=200_000, seed=0):
    """Largest sampled radius around a violating point inside which the formula stays true.

    Lipschitz constants of ``lie`` and ``V`` are sampled near the sublevel set;
    a ball of radius ``rho`` around the returned point keeps all three conjuncts.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(spec.state_lo, spec.state_hi, size=(count, spec.n))
    sq, v, lie = formula_terms(net, ctrl, res, spec, x, kappa)
    near = v <= 2 * c
    y = x + rng.normal(scale=1e-3, size=x.shape)
    _, v_y, lie_y = formula_terms(net, ctrl, res, spec, y, kappa)
    step = np.linalg.norm(y - x, axis=1)
    lip_lie = float(np.max(np.abs(lie_y - lie)[near] / step[near]))
    lip_v = float(np.max(np.abs(v_y - v)[near] / step[near]))
    bad = formula_holds(sq, v, lie, c, zeta)
    rho = np.minimum.reduce([lie[bad] / lip_lie, (c - v[bad]) / lip_v, np.sqrt(sq[bad]) - zeta])
    k = int(np.argmax(rho))
    return float(rho[k]), x[bad][k]


PI = math.pi
