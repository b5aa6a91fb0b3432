"""Optimal-transport training loss for mixture segmentation.

Prediction atoms ``s_i`` (weights ``alpha_i``) are matched to annotations
``y_j`` (weights ``beta_j``) through a coupling ``T`` that must deliver every
annotation's full mass while no atom receives more than ``gamma``::

    T >= 0,   T.sum(0) == beta,   T.sum(1) <= gamma

The plan is solved on detached costs; the training loss then combines the
transport term ``sum(T * C)`` (differentiable in the atoms) with
``lambda * KL(T.sum(1) || alpha)`` (differentiable in the routing weights).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .diffcore import Tensor
from .diffcore import functional as F
from .errors import ContractError, DimensionError, InfeasibleError

KL_FLOOR = 1e-12


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


# ---------------------------------------------------------------------------
# pairwise cost
# ---------------------------------------------------------------------------

def mask_cost(a: np.ndarray, b: np.ndarray, num_classes: int | None = None) -> float:
    """``1 - mean IoU`` over the classes present in either hard label map."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ContractError("empty masks have no classes")
    if num_classes is None:
        num_classes = int(max(a.max(), b.max())) + 1
    ious = []
    for c in range(num_classes):
        in_a = a == c
        in_b = b == c
        union = np.count_nonzero(in_a | in_b)
        if union:
            ious.append(np.count_nonzero(in_a & in_b) / union)
    return 1.0 - float(np.mean(ious))


def pair_cost(scores: np.ndarray, labels: np.ndarray) -> float:
    """Cost between a score map ``(C, H, W)`` and a label map ``(H, W)``."""
    scores = np.asarray(getattr(scores, "data", scores))
    if scores.shape[1:] != np.shape(labels):
        raise DimensionError(f"score map {scores.shape} does not match labels {np.shape(labels)}")
    return mask_cost(scores.argmax(axis=0), labels, scores.shape[0])


def cost_matrix(atoms: np.ndarray, annotations: np.ndarray) -> np.ndarray:
    """Hard ``(N, M)`` cost matrix from score maps ``(N, C, H, W)`` and label maps ``(M, H, W)``."""
    atoms = np.asarray(getattr(atoms, "data", atoms))
    c = atoms.shape[1]
    hard = atoms.argmax(axis=1)
    return np.array([[mask_cost(h, y, c) for y in annotations] for h in hard])


def soft_cost_matrix(atoms: Tensor, annotations: np.ndarray) -> Tensor:
    """Differentiable surrogate of :func:`cost_matrix`.

    Class probabilities ``p = softmax(s)`` replace the argmax mask and the
    per-class IoU becomes ``sum(min(p, q)) / sum(max(p, q))`` against the
    one-hot annotation ``q``.  The set of classes averaged over is the same
    as for the hard cost, so the two agree whenever ``p`` is one-hot.
    """
    n, c, h, w = atoms.shape
    ann = np.asarray(annotations)
    m = ann.shape[0]
    if ann.shape[1:] != (h, w):
        raise DimensionError(f"annotations {ann.shape} do not match atoms {atoms.shape}")
    p = F.softmax(atoms, axis=1).reshape(n, c, h * w).transpose(1, 0, 2)  # (C, N, P)
    onehot = (ann.reshape(m, 1, h * w) == np.arange(c).reshape(1, c, 1)).astype(np.float64)
    q = onehot.transpose(1, 2, 0)  # (C, P, M)
    inter = F.matmul(p, Tensor(q))  # (C, N, M)
    psum = p.sum(axis=2, keepdims=True)  # (C, N, 1)
    qsum = Tensor(q.sum(axis=1, keepdims=True))  # (C, 1, M)
    iou = inter / (psum + qsum - inter)

    hard = atoms.data.argmax(axis=1).reshape(n, h * w)
    in_pred = (hard[None, :, :] == np.arange(c)[:, None, None]).any(axis=2)  # (C, N)
    in_ann = onehot.any(axis=2).T  # (C, M)
    present = (in_pred[:, :, None] | in_ann[:, None, :]).astype(np.float64)
    mean_iou = (iou * Tensor(present)).sum(axis=0) / Tensor(present.sum(axis=0))
    return 1.0 - mean_iou


# ---------------------------------------------------------------------------
# coupling plans
# ---------------------------------------------------------------------------

@dataclass
class CouplingPlan:
    T: np.ndarray
    cost: np.ndarray
    beta: np.ndarray
    gamma: float
    epsilon: float = 0.0
    alpha: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0

    @property
    def transport_cost(self) -> float:
        return float(np.sum(self.T * self.cost))

    @property
    def row_sums(self) -> np.ndarray:
        return self.T.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.T.sum(axis=0)

    def to_dict(self) -> dict:
        return {
            "T": self.T.tolist(),
            "cost": self.cost.tolist(),
            "alpha": None if self.alpha is None else np.asarray(self.alpha).tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "residual": self.residual,
            "transport_cost": self.transport_cost,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _check_problem(C, beta, gamma):
    C = np.asarray(C, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != beta.shape[0]:
        raise DimensionError(f"cost {C.shape} incompatible with beta {beta.shape}")
    if np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
        raise ContractError(f"beta must be a probability vector, sums to {beta.sum()!r}")
    n = C.shape[0]
    if gamma < 1.0 / n - 1e-12:
        raise InfeasibleError(f"gamma={gamma} < 1/N={1.0 / n}: row caps cannot hold the total mass")
    return C, beta


def _semidual_refine(C, beta, gamma, epsilon, g0, tol):
    """Maximise the dual over column potentials, rows eliminated in closed form.

    For fixed column potentials the best capped row potential is explicit, which
    leaves a smooth concave function of at most ``M`` variables.  Used when the
    alternating sweeps stall: their contraction factor equals the mass held by
    capped rows and approaches one when caps hold nearly all the mass.
    """
    keep = beta > 0
    ck = C[:, keep] / epsilon
    bk = beta[keep]
    lg = np.log(gamma)

    def parts(b):
        L = b[None, :] - ck
        lse = logsumexp(L, axis=1)
        capped = lse > lg
        mass = np.where(capped, gamma, np.exp(np.minimum(lse, lg)))
        T = np.exp(L - lse[:, None]) * mass[:, None]
        val = b @ bk + np.sum(np.where(capped, gamma * (lg - lse) - gamma, -mass))
        return val, T

    def negdual(b):
        val, T = parts(b)
        return -val, T.sum(axis=0) - bk

    res = minimize(negdual, g0[keep] / epsilon, jac=True, method="BFGS",
                   options={"gtol": tol, "maxiter": 1000})
    g = np.full(C.shape[1], -np.inf)
    g[keep] = res.x * epsilon
    return g


def solve_relaxed(C, beta, gamma: float, epsilon: float = 0.01, iters: int = 200,
                  alpha=None, tol: float = 1e-9) -> CouplingPlan:
    """Entropic plan with exact column marginals and capped row sums.

    Alternates the two dual block updates in the log domain::

        g_j = eps*log(beta_j) - eps*LSE_i((f_i - C_ij)/eps)          columns match beta
        f_i = min(0, eps*log(gamma) - eps*LSE_j((g_j - C_ij)/eps))   rows clipped to gamma

    so ``T_ij = exp((f_i + g_j - C_ij)/eps)``; the row update rescales each
    row by ``min(1, gamma/rowsum)``.  Sweeps stop once rows meet their cap
    (and capped rows sit on it) to within ``tol``.  If ``iters`` sweeps are
    not enough, the column potentials are refined on the semi-dual.  The
    plan ends on a column step, so columns are exact.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    C, beta = _check_problem(C, beta, gamma)
    n, m = C.shape
    with np.errstate(divide="ignore"):
        log_beta = np.log(beta)
    log_gamma = np.log(gamma)

    def col_step(f):
        return epsilon * (log_beta - logsumexp((f[:, None] - C) / epsilon, axis=0))

    def row_step(g):
        row_log = epsilon * logsumexp((g[None, :] - C) / epsilon, axis=1)
        return np.minimum(0.0, epsilon * log_gamma - row_log), row_log

    def row_residual(f, g, row_log):
        rows = np.exp((row_log + f) / epsilon)
        return float(np.max(np.where(f < 0, np.abs(rows - gamma), np.maximum(rows - gamma, 0.0))))

    f = np.zeros(n)
    residual = np.inf
    it = 0
    for it in range(1, iters + 1):
        g = col_step(f)
        f_next, row_log = row_step(g)
        residual = row_residual(f, g, row_log)
        if residual < tol:
            break
        f = f_next
    else:
        g = _semidual_refine(C, beta, gamma, epsilon, col_step(f), tol)
        f, row_log = row_step(g)
        g = col_step(f)
        _, row_log = row_step(g)
        residual = row_residual(f, g, row_log)
    g = col_step(f)
    T = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    return CouplingPlan(T=T, cost=C, beta=beta, gamma=float(gamma), epsilon=float(epsilon),
                        alpha=None if alpha is None else np.asarray(alpha, dtype=np.float64),
                        iterations=it, residual=residual)


def _vertex_plans(C, beta, gamma):
    n, m = C.shape
    nv = n * m
    a_eq = np.zeros((m, nv))
    for j in range(m):
        a_eq[j, j::m] = 1.0
    ineq = np.zeros((n + nv, nv))
    rhs = np.zeros(n + nv)
    for i in range(n):
        ineq[i, i * m:(i + 1) * m] = 1.0
        rhs[i] = gamma
    ineq[n:] = -np.eye(nv)
    for active in itertools.combinations(range(n + nv), nv - m):
        A = np.vstack([a_eq, ineq[list(active)]])
        b = np.concatenate([beta, rhs[list(active)]])
        if np.linalg.matrix_rank(A) < nv:
            continue
        x = np.linalg.solve(A, b)
        if np.all(ineq @ x <= rhs + 1e-12):
            yield np.maximum(x, 0.0).reshape(n, m)


def brute_force_coupling(C, beta, gamma: float) -> CouplingPlan:
    """Exact minimum-cost plan by exhaustive enumeration of polytope vertices.

    A linear objective over a bounded polytope is minimised at a vertex, and
    every vertex is the unique solution of the column equalities plus
    ``N*M - M`` active inequalities.  Tiny instances only (``N*M <= 6``).
    """
    C, beta = _check_problem(C, beta, gamma)
    n, m = C.shape
    if n * m > 6:
        raise ContractError(f"brute force limited to N*M <= 6, got {n}x{m}")
    best, best_cost = None, np.inf
    for T in _vertex_plans(C, beta, gamma):
        cost = float(np.sum(T * C))
        if cost < best_cost - 1e-15:
            best, best_cost = T, cost
    if best is None:
        raise InfeasibleError("no feasible coupling")
    return CouplingPlan(T=best, cost=C, beta=beta, gamma=float(gamma))


def grid_search_coupling(C, beta, gamma: float, step: float = 1e-3) -> CouplingPlan:
    """Grid search over the free coordinates left after the column equalities.

    Each column has ``N - 1`` free entries (the last row absorbs the rest of
    ``beta_j``).  Only practical with at most two free coordinates.  Row caps
    are checked with a slack of ``step`` because a tight cap rarely falls
    exactly on the grid.
    """
    C, beta = _check_problem(C, beta, gamma)
    n, m = C.shape
    free = (n - 1) * m
    if free > 2:
        raise ContractError(f"grid search limited to 2 free coordinates, got {free}")
    axes = []
    for j in range(m):
        for _ in range(n - 1):
            k = int(round(beta[j] / step))
            axes.append(np.linspace(0.0, beta[j], k + 1))
    grids = np.meshgrid(*axes, indexing="ij") if axes else []
    pts = np.stack([g.ravel() for g in grids], axis=1) if axes else np.zeros((1, 0))
    plans = np.zeros((pts.shape[0], n, m))
    col = 0
    for j in range(m):
        top = pts[:, col:col + n - 1]
        plans[:, :n - 1, j] = top
        plans[:, n - 1, j] = beta[j] - top.sum(axis=1)
        col += n - 1
    ok = np.all(plans >= -1e-12, axis=(1, 2)) & np.all(plans.sum(axis=2) <= gamma + step, axis=1)
    if not ok.any():
        raise InfeasibleError("no feasible grid point")
    costs = np.where(ok, np.sum(plans * C, axis=(1, 2)), np.inf)
    return CouplingPlan(T=plans[int(np.argmin(costs))], cost=C, beta=beta, gamma=float(gamma))


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    transport_term: Tensor
    kl_term: Tensor
    lam: float
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "transport_term": self.transport_term.item(),
            "kl_term": self.kl_term.item(),
            "lambda": self.lam,
            "total": self.total.item(),
        }


def assemble_loss(plan: CouplingPlan, cost: Tensor, alpha: Tensor, lam: float = 1.0) -> LossBreakdown:
    """``sum(T * C) + lam * KL(T.sum(1) || alpha)`` with ``T`` held constant."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    T = np.asarray(plan.T, dtype=np.float64)
    if cost.shape != T.shape or alpha.shape != (T.shape[0],):
        raise DimensionError(f"plan {T.shape} vs cost {cost.shape} / alpha {alpha.shape}")
    transport = (cost * Tensor(T)).sum()
    r = T.sum(axis=1)
    entropy_part = float(np.sum(r * np.log(np.maximum(r, KL_FLOOR))))
    cross = (F.log(F.clamp(alpha, KL_FLOOR, None)) * Tensor(r)).sum()
    kl = entropy_part - cross
    return LossBreakdown(transport_term=transport, kl_term=kl, lam=float(lam), total=transport + lam * kl)


def anneal_gamma(step: int, total_steps: int, gamma0: float) -> float:
    """Linear ramp from ``gamma0`` at step 0 to 1 at ``total_steps`` (held at 1 after)."""
    if not 0.0 < gamma0 <= 1.0:
        raise ContractError("gamma0 must lie in (0, 1]")
    if step < 0:
        raise ContractError("step must be non-negative")
    if total_steps <= 0 or step >= total_steps:
        return 1.0
    return gamma0 + (1.0 - gamma0) * step / total_steps


# ---------------------------------------------------------------------------
# evaluation distance
# ---------------------------------------------------------------------------

def _check_weights(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractError("sample weights must be a non-empty probability vector")
    return w


def ged_squared(p_samples, p_weights, q_samples, q_weights, num_classes: int | None = None) -> float:
    """``2 E[d(s, y)] - E[d(s, s')] - E[d(y, y')]`` for weighted sets of hard label maps."""
    pw = _check_weights(p_weights)
    qw = _check_weights(q_weights)
    if len(p_samples) != pw.size or len(q_samples) != qw.size:
        raise DimensionError("sample and weight counts differ")

    def pairwise(a, b):
        return np.array([[mask_cost(x, y, num_classes) for y in b] for x in a])

    cross = pw @ pairwise(p_samples, q_samples) @ qw
    within_p = pw @ pairwise(p_samples, p_samples) @ pw
    within_q = qw @ pairwise(q_samples, q_samples) @ qw
    return float(2.0 * cross - within_p - within_q)


def ged_distance(p_samples, p_weights, q_samples, q_weights, num_classes: int | None = None) -> float:
    return float(np.sqrt(max(ged_squared(p_samples, p_weights, q_samples, q_weights, num_classes), 0.0)))
