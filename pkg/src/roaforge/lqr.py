"""Continuous-time LQR baseline on the linearised nominal plant."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .dynamics import SystemSpec, eval_field
from .lyapnet import ControllerNet, ResidualDynamics, closed_loop_hat
from .roa import EVAL_CHUNK, Mesh, RoaReport, level_search_values


class StabilizabilityError(RuntimeError):
    pass


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray


@dataclass
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    riccati_residual: float
    iterations: int = 0

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * x @ self.P


def linearize(spec: SystemSpec, h: float = 1e-6) -> LinearModel:
    """Central-difference Jacobians of the nominal field at ``(0, u_eq)``."""
    n, m = spec.n, spec.m
    x0 = np.zeros(n)
    u0 = np.asarray(spec.equilibrium_input, dtype=float)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        A[:, j] = (eval_field(spec, "nominal", x0 + e, u0) - eval_field(spec, "nominal", x0 - e, u0)) / (2 * h)
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        B[:, j] = (eval_field(spec, "nominal", x0, u0 + e) - eval_field(spec, "nominal", x0, u0 - e)) / (2 * h)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite Jacobian")
    return LinearModel(A, B)


# ---------------------------------------------------------------------------
# small dense helpers

def char_poly(A: np.ndarray) -> np.ndarray:
    """Characteristic polynomial coefficients (leading 1) by Faddeev-LeVerrier."""
    n = A.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(A)
    I = np.eye(n)
    c = 1.0
    for k in range(1, n + 1):
        Mk = A @ Mk + c * I
        c = -np.trace(A @ Mk) / k
        coeffs.append(c)
    return np.array(coeffs)


def routh_hurwitz(coeffs: np.ndarray) -> bool:
    """True iff every root of the polynomial has negative real part."""
    a = np.asarray(coeffs, dtype=float)
    if a[0] < 0:
        a = -a
    if np.any(a <= 0):
        return False
    n = len(a) - 1
    rows = [a[0::2].copy(), a[1::2].copy()]
    width = len(rows[0])
    rows = [np.pad(r, (0, width - len(r))) for r in rows]
    for _ in range(n - 1):
        r0, r1 = rows[-2], rows[-1]
        if r1[0] == 0:
            return False
        nxt = np.zeros(width)
        for j in range(width - 1):
            nxt[j] = (r1[0] * r0[j + 1] - r0[0] * r1[j + 1]) / r1[0]
        rows.append(nxt)
    return all(r[0] > 0 for r in rows[: n + 1])


def is_hurwitz(A: np.ndarray) -> bool:
    return routh_hurwitz(char_poly(A))


def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A^T X + X A + Q = 0`` via the Kronecker form (small n only)."""
    n = A.shape[0]
    I = np.eye(n)
    L = np.kron(I, A.T) + np.kron(A.T, I)
    x = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    X = x.reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def care_residual(A, B, Q, R, P) -> float:
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.max(np.abs(res)))


def _initial_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Bass: with beta above the spectral radius, solving
    # (A + beta I) Z + Z (A + beta I)^T = 2 B B^T gives K = B^T Z^-1 stabilising.
    n = A.shape[0]
    beta = np.linalg.norm(A, "fro") + 1.0
    Ab = A + beta * np.eye(n)
    # solve_lyapunov solves F^T X + X F + Q = 0; pass F = -Ab^T
    Z = solve_lyapunov(-Ab.T, 2.0 * B @ B.T)
    try:
        return B.T @ np.linalg.inv(Z)
    except np.linalg.LinAlgError as exc:
        # singular Gramian: some mode is not reachable
        raise StabilizabilityError("pair (A, B) is not controllable") from exc


def solve_care(model: LinearModel, Q=None, R=None, max_iter: int = 100,
               tol: float = 1e-13) -> LqrSolution:
    """Newton-Kleinman iteration for ``A^T P + P A - P B R^-1 B^T P + Q = 0``."""
    A, B = np.asarray(model.A, float), np.asarray(model.B, float)
    n, m = B.shape
    Q = np.eye(n) if Q is None else np.asarray(Q, float)
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, float))
    if is_hurwitz(A):
        K = np.zeros((m, n))
    else:
        K = _initial_gain(A, B)
    if not is_hurwitz(A - B @ K):
        raise StabilizabilityError("could not find a stabilising initial gain")
    P_prev = None
    for it in range(1, max_iter + 1):
        Acl = A - B @ K
        P = solve_lyapunov(Acl, Q + K.T @ R @ K)
        K = np.linalg.solve(R, B.T @ P)
        if P_prev is not None and np.max(np.abs(P - P_prev)) <= tol * max(1.0, np.max(np.abs(P))):
            break
        P_prev = P
    else:
        raise StabilizabilityError("Newton-Kleinman did not converge")
    resid = care_residual(A, B, Q, R, P)
    if not is_hurwitz(A - B @ K):
        raise StabilizabilityError("closed loop is not Hurwitz")
    return LqrSolution(P=P, K=K, riccati_residual=resid, iterations=it)


def lqr_for(spec: SystemSpec, Q=None, R=None) -> LqrSolution:
    return solve_care(linearize(spec), Q, R)


def lqr_roa_estimate(sol: LqrSolution, mesh: Mesh, ctrl: ControllerNet, res: ResidualDynamics,
                     spec: SystemSpec, kappa: float, iteration: int = 0) -> tuple[RoaReport, Mesh]:
    """Sublevel sweep with ``V = x^T P x`` on a mesh labelled under ``ctrl``."""
    x = mesh.points
    v = sol.value(x)
    vd = np.empty(len(x))
    for s in range(0, len(x), EVAL_CHUNK):
        xc = torch.from_numpy(np.ascontiguousarray(x[s:s + EVAL_CHUNK]))
        with torch.no_grad():
            F = closed_loop_hat(ctrl, res, spec, xc).numpy()
        vd[s:s + EVAL_CHUNK] = np.sum(sol.grad(x[s:s + EVAL_CHUNK]) * F, axis=1)
    m2 = replace(mesh, v_values=v, vdot_values=vd)
    _, report = level_search_values(m2, kappa, iteration)
    return report, m2
