"""Entropic optimal transport solvers.

Balanced Sinkhorn scaling, the relaxed-row (capacity-capped) scaling solver,
and an exact small-instance LP oracle used for verification.  All solvers are
pure functions of their inputs and operate on plain numpy arrays.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

MASS_TOL = 1e-9

# caps for the exact LP oracle; beyond this we refuse rather than risk slow solves
ORACLE_MAX_ROWS = 8
ORACLE_MAX_COLS = 3


class DimensionMismatch(ValueError):
    """Array shapes are inconsistent."""


class InfeasibleMarginals(ValueError):
    """Marginal masses violate the feasibility requirements."""


class InstanceTooLarge(ValueError):
    """Problem exceeds the exact-oracle size cap."""


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budget and stopping rule for the scaling solvers.

    ``epsilon`` is the max-norm threshold on the column-scaling update; the
    loop stops as soon as ``max|v_new - v_old| < epsilon``.  Denominators are
    floored at ``denom_floor`` before dividing.
    """

    max_iter: int = 100
    epsilon: float = 1e-3
    denom_floor: float = 1e-30

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.denom_floor <= 0:
            raise ValueError(f"denom_floor must be > 0, got {self.denom_floor}")


@dataclass
class TransportProblem:
    """A cost matrix with its marginal capacities.

    ``alpha`` caps the row sums, ``beta`` fixes the column sums, and ``gamma``
    is the total transported mass (must equal ``sum(beta)``; defaults to it).
    Feasibility requires ``sum(alpha) >= gamma``.
    """

    cost: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lam: float
    gamma: float = None

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.cost.ndim != 2:
            raise DimensionMismatch(f"cost must be 2-D, got shape {self.cost.shape}")
        v, p = self.cost.shape
        if self.alpha.shape != (v,) or self.beta.shape != (p,):
            raise DimensionMismatch(
                f"marginal shapes {self.alpha.shape}/{self.beta.shape} do not "
                f"match cost shape {self.cost.shape}"
            )
        if not np.all(np.isfinite(self.cost)) or np.any(self.cost < 0):
            raise ValueError("cost entries must be finite and >= 0")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("marginal entries must be > 0")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.gamma is None:
            self.gamma = float(self.beta.sum())
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if abs(self.gamma - self.beta.sum()) > MASS_TOL:
            raise InfeasibleMarginals(
                f"gamma={self.gamma} does not match sum(beta)={self.beta.sum()}"
            )
        if self.alpha.sum() < self.gamma - MASS_TOL:
            raise InfeasibleMarginals(
                f"sum(alpha)={self.alpha.sum()} is below the transported mass "
                f"gamma={self.gamma}"
            )


@dataclass
class TransportPlan:
    """A solved coupling plus solver diagnostics."""

    plan: np.ndarray
    objective: float
    iterations: int
    converged: bool
    underflow: bool = False


@dataclass
class BatchSolveResult:
    """Vectorized solve over a stack of cost matrices sharing marginals."""

    plans: np.ndarray        # (n, V, P)
    objectives: np.ndarray   # (n,)
    iterations: np.ndarray   # (n,)
    converged: np.ndarray    # (n,) bool
    underflow: np.ndarray    # (n,) bool


def _scaling_loop(Q, alpha, beta, config, row_cap):
    """Alternating scaling updates on a batch of kernels Q (n, V, P).

    With ``row_cap`` the row update is clamped at 1, which enforces the
    row-sum inequality against alpha; without it the update is plain Sinkhorn
    and drives row sums to equality.  Instances are frozen the moment their
    column update moves by less than epsilon in max-norm, so batched results
    match one-at-a-time solves exactly.
    """
    n, nrow, ncol = Q.shape
    u = np.ones((n, nrow))
    v = np.ones((n, ncol))
    active = np.ones(n, dtype=bool)
    iterations = np.full(n, config.max_iter, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    underflow = np.zeros(n, dtype=bool)
    floor = config.denom_floor
    for it in range(1, config.max_iter + 1):
        den_u = np.einsum("nvp,np->nv", Q, v)
        under_u = (den_u < floor).any(axis=1)
        den_u = np.maximum(den_u, floor)
        u_new = alpha[None, :] / den_u
        if row_cap:
            u_new = np.minimum(u_new, 1.0)
        den_v = np.einsum("nvp,nv->np", Q, u_new)
        under_v = (den_v < floor).any(axis=1)
        den_v = np.maximum(den_v, floor)
        v_new = beta[None, :] / den_v

        underflow |= (under_u | under_v) & active
        delta = np.abs(v_new - v).max(axis=1)
        u = np.where(active[:, None], u_new, u)
        v = np.where(active[:, None], v_new, v)
        hit = active & (delta < config.epsilon)
        iterations[hit] = it
        converged[hit] = True
        active &= ~hit
        if not active.any():
            break
    if underflow.any():
        logger.debug(
            "scaling solver floored %d/%d instances at denom_floor=%g",
            int(underflow.sum()), n, floor,
        )
    return u, v, iterations, converged, underflow


def batch_solve(costs, alpha, beta, lam, config=None, relaxed_rows=True):
    """Solve a stack of transport problems that share marginals.

    Parameters
    ----------
    costs : (n, V, P) array
        Cost matrices, entries finite and >= 0.
    alpha, beta : (V,), (P,) arrays
        Row capacities and column targets, shared across the stack.
    lam : float
        Entropic regularization weight.
    config : SolverConfig, optional
    relaxed_rows : bool
        True for the capacity-capped solver (row sums <= alpha), False for
        balanced Sinkhorn (row sums = alpha).

    Returns
    -------
    BatchSolveResult
    """
    config = config if config is not None else SolverConfig()
    costs = np.asarray(costs, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    # subtracting the per-column cost minimum is absorbed exactly into the
    # column scaling, leaves the plan invariant, and keeps exp() and the
    # v iterates in float range even for small lam
    shift = costs.min(axis=1, keepdims=True)
    Q = np.exp(-(costs - shift) / lam)
    u, v, iterations, converged, underflow = _scaling_loop(
        Q, alpha, beta, config, row_cap=relaxed_rows
    )
    plans = u[:, :, None] * Q * v[:, None, :]
    objectives = np.einsum("nvp,nvp->n", plans, costs)
    return BatchSolveResult(plans, objectives, iterations, converged, underflow)


def solve_sinkhorn(problem, config=None):
    """Balanced entropic OT: row sums = alpha and column sums = beta.

    Requires ``sum(alpha) == sum(beta)`` within 1e-9.  Non-convergence within
    the iteration budget returns the last iterate flagged ``converged=False``.
    """
    if abs(problem.alpha.sum() - problem.beta.sum()) > MASS_TOL:
        raise InfeasibleMarginals(
            f"balanced solve needs sum(alpha)=sum(beta); got "
            f"{problem.alpha.sum()} vs {problem.beta.sum()}"
        )
    result = batch_solve(
        problem.cost[None], problem.alpha, problem.beta, problem.lam,
        config, relaxed_rows=False,
    )
    return _first(result)


def solve_dykstra_unbalanced(problem, config=None):
    """Relaxed-row entropic OT via capped alternating scaling.

    Column sums match beta exactly at every iterate; row sums respect the
    alpha capacities at the fixed point.  ``converged`` is set iff the
    column-scaling update dropped below ``config.epsilon`` in max-norm before
    the iteration cap.
    """
    result = batch_solve(
        problem.cost[None], problem.alpha, problem.beta, problem.lam,
        config, relaxed_rows=True,
    )
    return _first(result)


def _first(result):
    return TransportPlan(
        plan=result.plans[0],
        objective=float(result.objectives[0]),
        iterations=int(result.iterations[0]),
        converged=bool(result.converged[0]),
        underflow=bool(result.underflow[0]),
    )


def brute_force_ot_oracle(problem):
    """Exact LP minimizer of <C, T> over the relaxed polytope, no entropy.

    Only for tiny instances (V <= 8, P <= 3); used to verify the iterative
    solvers.  Column sums are equality constraints, row sums are upper bounds.
    """
    nrow, ncol = problem.cost.shape
    if nrow > ORACLE_MAX_ROWS or ncol > ORACLE_MAX_COLS:
        raise InstanceTooLarge(
            f"oracle handles at most {ORACLE_MAX_ROWS}x{ORACLE_MAX_COLS}, "
            f"got {nrow}x{ncol}"
        )
    # variables are vec(T) in row-major order
    a_eq = np.zeros((ncol, nrow * ncol))
    for j in range(ncol):
        a_eq[j, j::ncol] = 1.0
    a_ub = np.zeros((nrow, nrow * ncol))
    for i in range(nrow):
        a_ub[i, i * ncol:(i + 1) * ncol] = 1.0
    res = linprog(
        problem.cost.ravel(),
        A_ub=a_ub, b_ub=problem.alpha,
        A_eq=a_eq, b_eq=problem.beta,
        bounds=(0, None), method="highs",
    )
    if not res.success:
        raise RuntimeError(f"LP oracle failed: {res.message}")
    return TransportPlan(
        plan=res.x.reshape(nrow, ncol),
        objective=float(res.fun),
        iterations=int(res.nit),
        converged=True,
    )


def wasserstein_distance(plan, cost):
    """Frobenius inner product <T, C> of a solved plan with a cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if plan.plan.shape != cost.shape:
        raise DimensionMismatch(
            f"plan shape {plan.plan.shape} does not match cost shape {cost.shape}"
        )
    return float((plan.plan * cost).sum())
