"""Patch-to-prompt matching: costs, distances, probabilities, gradients.

The forward pass builds a V x 2 cost matrix per (sample, class) from patch
features and the two text features (global prompt column, local prompt
column), reduces it to a per-class distance under the selected matching
mode, and turns distances into class probabilities.  The backward pass
treats the transport plan as a constant (fixed-plan envelope) so gradients
flow only through the cost entries.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .encoders import encode_text, text_prompt_pullback
from .ot_core import (
    TransportPlan,
    TransportProblem,
    batch_solve,
    solve_dykstra_unbalanced,
    solve_sinkhorn,
)

PROB_FLOOR = 1e-300


class LabelOutOfRange(ValueError):
    """Label index not covered by the probability vector."""


class DimensionMismatch(ValueError):
    """Feature dimensions disagree."""


class Variant(enum.Enum):
    SIMILARITY_AVG = "similarity_avg"
    CLASSICAL_OT = "classical_ot"
    UNBALANCED_OT = "unbalanced_ot"


@dataclass(frozen=True)
class MatchingMode:
    """Distance reduction selector plus its scalar knobs."""

    variant: Variant = Variant.UNBALANCED_OT
    gamma: float = 0.8
    lam: float = 0.1
    tau: float = 0.07

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass
class ClassScore:
    """Per-sample scoring record: distances, plans (OT modes), probabilities."""

    distances: np.ndarray        # (K,)
    plans: list                  # K entries, TransportPlan or None
    probabilities: np.ndarray    # (K,)


@dataclass
class BatchDiagnostics:
    """Solver health counters accumulated over one forward pass."""

    solves: int = 0
    converged: int = 0
    underflow: int = 0
    total_iterations: int = 0

    def merge(self, other):
        self.solves += other.solves
        self.converged += other.converged
        self.underflow += other.underflow
        self.total_iterations += other.total_iterations

    @property
    def mean_iterations(self):
        return self.total_iterations / self.solves if self.solves else 0.0


@dataclass
class ForwardResult:
    """Everything one scored batch produces."""

    loss: float
    probs: np.ndarray      # (B, K)
    dists: np.ndarray      # (B, K)
    costs: np.ndarray      # (B, K, V, 2)
    plans: object          # BatchSolveResult for OT modes, None otherwise
    diag: BatchDiagnostics


def cost_matrix(features, h_global, h_local):
    """C[v, j] = 1 - <patch_v, h_j>; column 0 global, column 1 local."""
    h_global = np.asarray(h_global, dtype=np.float64)
    h_local = np.asarray(h_local, dtype=np.float64)
    patches = features.patches
    if h_global.shape != (patches.shape[1],) or h_local.shape != (patches.shape[1],):
        raise DimensionMismatch(
            f"text features {h_global.shape}/{h_local.shape} do not match "
            f"patch width {patches.shape[1]}"
        )
    return 1.0 - patches @ np.stack([h_global, h_local], axis=1)


def _marginals(mode, v):
    alpha = np.full(v, 1.0 / v)
    if mode.variant is Variant.CLASSICAL_OT:
        beta = np.full(2, 0.5)
        gamma = 1.0
    else:
        beta = np.full(2, mode.gamma / 2)
        gamma = mode.gamma
    return alpha, beta, gamma


def class_distance(cost, mode, config=None):
    """Reduce one cost matrix to a scalar distance under the matching mode.

    Returns (distance, plan); the plan is None for SIMILARITY_AVG.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if mode.variant is Variant.SIMILARITY_AVG:
        return float(cost.mean()), None
    alpha, beta, gamma = _marginals(mode, cost.shape[0])
    problem = TransportProblem(cost, alpha, beta, lam=mode.lam, gamma=gamma)
    if mode.variant is Variant.CLASSICAL_OT:
        plan = solve_sinkhorn(problem, config)
    else:
        plan = solve_dykstra_unbalanced(problem, config)
    return plan.objective, plan


def predict_proba(scores, tau):
    """Softmax over (1 - d)/tau with subtract-max stabilization."""
    scores = np.asarray(scores, dtype=np.float64)
    logits = (1.0 - scores) / tau
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def ce_loss(probabilities, label):
    """Negative log likelihood of the labeled class."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < probabilities.shape[0]:
        raise LabelOutOfRange(
            f"label {label} outside [0, {probabilities.shape[0]})"
        )
    return float(-np.log(max(probabilities[label], PROB_FLOOR)))


def text_features(text_encoder, prompts):
    """Stack per-class text features for both prompt blocks: (K, d_f) each."""
    k = text_encoder.num_classes
    h_g = np.stack([encode_text(text_encoder, prompts.global_prompt, c)
                    for c in range(k)])
    h_l = np.stack([encode_text(text_encoder, prompts.local_prompt, c)
                    for c in range(k)])
    return h_g, h_l


def forward_batch(batch, prompts, mode, text_encoder, config=None):
    """Score a batch of (FeatureMap, label) pairs.

    All per-sample transport problems are solved in one vectorized call;
    instance order is (sample major, class minor) so reductions are
    deterministic regardless of batch size.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    feats = np.stack([fm.patches for fm, _ in batch])   # (B, V, d_f)
    labels = np.array([label for _, label in batch])
    b, v, _ = feats.shape
    k = text_encoder.num_classes
    h_g, h_l = text_features(text_encoder, prompts)
    h = np.stack([h_g, h_l], axis=2)                    # (K, d_f, 2)
    costs = 1.0 - np.einsum("bvd,kdj->bkvj", feats, h)  # (B, K, V, 2)

    diag = BatchDiagnostics()
    if mode.variant is Variant.SIMILARITY_AVG:
        dists = costs.mean(axis=(2, 3))
        plans = None
    else:
        alpha, beta, _ = _marginals(mode, v)
        flat = costs.reshape(b * k, v, 2)
        res = batch_solve(flat, alpha, beta, mode.lam, config,
                          relaxed_rows=(mode.variant is Variant.UNBALANCED_OT))
        dists = res.objectives.reshape(b, k)
        plans = res
        diag.solves = b * k
        diag.converged = int(res.converged.sum())
        diag.underflow = int(res.underflow.sum())
        diag.total_iterations = int(res.iterations.sum())

    logits = (1.0 - dists) / mode.tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    picked = np.maximum(probs[np.arange(b), labels], PROB_FLOOR)
    loss = float(-np.log(picked).mean())
    return ForwardResult(loss=loss, probs=probs, dists=dists, costs=costs,
                         plans=plans, diag=diag)


def score_sample(features, prompts, mode, text_encoder, config=None):
    """Single-sample ClassScore, built on the batched forward."""
    out = forward_batch([(features, 0)], prompts, mode, text_encoder, config)
    k = out.probs.shape[1]
    if out.plans is None:
        plan_list = [None] * k
    else:
        plan_list = [
            TransportPlan(plan=out.plans.plans[i],
                          objective=float(out.plans.objectives[i]),
                          iterations=int(out.plans.iterations[i]),
                          converged=bool(out.plans.converged[i]),
                          underflow=bool(out.plans.underflow[i]))
            for i in range(k)
        ]
    return ClassScore(distances=out.dists[0].copy(), plans=plan_list,
                      probabilities=out.probs[0].copy())


def grad_prompts(batch, prompts, mode, text_encoder, config=None):
    """Mean-loss gradients (dL/dP_global, dL/dP_local), plan held fixed.

    Chain: loss -> probabilities -> distances -> cost entries (transport plan
    constant) -> text features -> prompt entries through the encoder's
    closed-form pullback.
    """
    out = forward_batch(batch, prompts, mode, text_encoder, config)
    return grad_from_forward(out, batch, prompts, mode, text_encoder)


def grad_from_forward(out, batch, prompts, mode, text_encoder):
    """Gradients from an already-computed ForwardResult for the same batch.

    Lets a training step reuse one forward pass for both the loss value and
    the parameter update.
    """
    b, k = out.probs.shape
    v = out.costs.shape[2]
    labels = np.array([label for _, label in batch])
    feats = np.stack([fm.patches for fm, _ in batch])

    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    # d(mean CE)/d(logit) = (p - y)/B and logit = (1 - d)/tau
    g_dist = -(out.probs - onehot) / (b * mode.tau)      # (B, K)

    if mode.variant is Variant.SIMILARITY_AVG:
        g_cost = g_dist[:, :, None, None] * np.full((v, 2), 1.0 / (2 * v))
    else:
        g_cost = g_dist[:, :, None, None] * out.plans.plans.reshape(b, k, v, 2)

    # C = 1 - feats @ h, so dC/dh[k, :, j] pulls in -feats
    g_h = -np.einsum("bkvj,bvd->kdj", g_cost, feats)     # (K, d_f, 2)

    g_global = np.zeros_like(prompts.global_prompt)
    g_local = np.zeros_like(prompts.local_prompt)
    for c in range(k):
        g_global += text_prompt_pullback(
            text_encoder, prompts.global_prompt, c, g_h[c, :, 0])
        g_local += text_prompt_pullback(
            text_encoder, prompts.local_prompt, c, g_h[c, :, 1])
    return g_global, g_local
