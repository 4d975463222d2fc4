"""Top-level acceptance gates for the whole package.

Each test exercises one shipping criterion end to end at its stated
tolerance and prints a single pass/fail line through the ``gate`` fixture.
The heavy federated gates share one result cache keyed by (mode, seed).
"""

import dataclasses
import time

import numpy as np

from _gradgeom import (
    gradcheck_config,
    gradcheck_ladder,
    gradcheck_worst_rel,
    mode_for,
    noisy_prompts,
    random_batch,
    tier_batch,
)
from fedotp.alignment import MatchingMode, Variant, forward_batch
from fedotp.cli_report import ExperimentConfig, export_curves, plan_support_size
from fedotp.encoders import make_image_encoder, make_text_encoder
from fedotp.fed_runtime import (
    aggregate_global,
    build_experiment,
    run_experiment,
    run_round,
    serialize_update,
)
from fedotp.ot_core import (
    SolverConfig,
    TransportProblem,
    batch_solve,
    brute_force_ot_oracle,
    solve_dykstra_unbalanced,
    solve_sinkhorn,
    wasserstein_distance,
)

DEFAULT = ExperimentConfig()
SEEDS = (0, 1, 2)

_MEANS = {}


def final_mean(mode, seed):
    if (mode, seed) not in _MEANS:
        cfg = dataclasses.replace(DEFAULT, mode=mode, seed=seed)
        _MEANS[(mode, seed)] = run_experiment(cfg).summary.mean_accuracy
    return _MEANS[(mode, seed)]


def mean_over_seeds(mode):
    return float(np.mean([final_mean(mode, s) for s in SEEDS]))


def test_criterion_1_solver_matches_lp_oracle(gate):
    start = time.perf_counter()
    rng = np.random.default_rng(20260822)
    solver_cfg = SolverConfig(max_iter=150000, epsilon=1e-9,
                              denom_floor=1e-300)
    worst_ratio = 0.0
    worst_marginal = 0.0
    for i in range(200):
        v = int(rng.integers(2, 7))
        gamma = (0.5, 0.8, 1.0)[i % 3]
        cost = rng.uniform(0.0, 1.0, size=(v, 2))
        alpha = rng.uniform(0.5, 1.5, size=v)
        alpha = alpha / alpha.sum()
        beta = np.full(2, gamma / 2)
        prob = TransportProblem(cost, alpha, beta, lam=0.01, gamma=gamma)
        got = solve_dykstra_unbalanced(prob, solver_cfg)
        want = brute_force_ot_oracle(prob)
        gap = abs(wasserstein_distance(got, cost) - want.objective)
        bound = 0.02 * gamma * cost.max()
        worst_ratio = max(worst_ratio, gap / bound)
        col_err = np.abs(got.plan.sum(axis=0) - beta).max()
        row_err = np.maximum(got.plan.sum(axis=1) - alpha, 0.0).max()
        worst_marginal = max(worst_marginal, col_err, row_err)
    elapsed = time.perf_counter() - start
    ok = worst_ratio <= 1.0 and worst_marginal <= 1e-6 and elapsed < 10.0
    gate(1, "solver-oracle equivalence",
         ok, f"200 problems, worst gap {worst_ratio:.3f} of bound, "
             f"worst marginal {worst_marginal:.1e}, {elapsed:.1f}s")


def test_criterion_2_balanced_reduction(gate):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    solver_cfg = SolverConfig(max_iter=5000, epsilon=1e-10,
                              denom_floor=1e-300)
    worst = 0.0
    for _ in range(100):
        v = int(rng.integers(3, 9))
        cost = rng.uniform(0.0, 1.0, size=(v, 2))
        alpha = rng.uniform(0.5, 1.5, size=v)
        alpha = 0.9 * alpha / alpha.sum()
        gamma = float(alpha.sum())
        beta = rng.uniform(0.5, 1.5, size=2)
        beta = gamma * beta / beta.sum()
        prob = TransportProblem(cost, alpha, beta, lam=0.1, gamma=gamma)
        relaxed = solve_dykstra_unbalanced(prob, solver_cfg)
        balanced = solve_sinkhorn(prob, solver_cfg)
        worst = max(worst, np.abs(relaxed.plan - balanced.plan).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 5.0
    gate(2, "balanced reduction",
         ok, f"100 instances, worst elementwise {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_convergence_envelope(gate):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    v, gamma = 196, 0.8
    alpha = np.full(v, 1.0 / v)
    beta = np.full(2, gamma / 2)
    converged = 0
    for _ in range(10):
        patches = rng.normal(size=(100, v, 24))
        patches /= np.linalg.norm(patches, axis=2, keepdims=True)
        feats = rng.normal(size=(100, 2, 24))
        feats /= np.linalg.norm(feats, axis=2, keepdims=True)
        costs = 1.0 - np.einsum("nvd,npd->nvp", patches, feats)
        res = batch_solve(costs, alpha, beta, lam=0.1)
        converged += int(res.converged.sum())
    elapsed = time.perf_counter() - start
    ok = converged >= 990 and elapsed < 30.0
    gate(3, "convergence envelope",
         ok, f"{converged}/1000 converged at default budget, {elapsed:.1f}s")


def test_criterion_4_gradient_fidelity(gate):
    start = time.perf_counter()
    cases = [
        (Variant.SIMILARITY_AVG, 1e-5),
        (Variant.UNBALANCED_OT, 1e-3),
        (Variant.CLASSICAL_OT, 1e-3),
    ]
    details = []
    ok = True
    for variant, tol in cases:
        mode = mode_for(variant)
        config = gradcheck_config(variant)
        worst = 0.0
        for seed in range(10):
            tenc = make_text_encoder(seed, num_classes=2)
            prompts = noisy_prompts(seed)
            if variant is Variant.SIMILARITY_AVG:
                ienc = make_image_encoder(seed, v_patches=5)
                batch = random_batch(seed, ienc, 2, 2, 5)
            else:
                ladder = gradcheck_ladder(variant)
                ienc = make_image_encoder(seed, v_patches=ladder.shape[0])
                batch = tier_batch(seed, tenc, ienc, prompts, ladder,
                                   batch_size=2)
            worst = max(worst, gradcheck_worst_rel(
                batch, prompts, mode, tenc, config, seed, coords=50))
        ok = ok and worst <= tol
        details.append(f"{variant.name.lower()} {worst:.1e}")
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 60.0
    gate(4, "gradient fidelity",
         ok, f"10 seeds x 50 coords, worst rel {', '.join(details)}, "
             f"{elapsed:.1f}s")


def test_criterion_5_personalization_beats_ablations(gate):
    start = time.perf_counter()
    full = mean_over_seeds("fedotp")
    shared = mean_over_seeds("shared_only")
    local = mean_over_seeds("local_only")
    elapsed = time.perf_counter() - start
    ok = (full >= shared + 0.05) and (full >= local) and elapsed < 300.0
    gate(5, "heterogeneity benefit",
         ok, f"3-seed means: full {full:.4f}, shared-only {shared:.4f}, "
             f"local-only {local:.4f}, {elapsed:.1f}s")


def test_criterion_6_transport_head_ordering(gate):
    start = time.perf_counter()
    unbalanced = mean_over_seeds("fedotp")
    classical = mean_over_seeds("classical_ot")
    similarity = mean_over_seeds("similarity_avg")
    elapsed = time.perf_counter() - start
    ok = (unbalanced >= classical - 0.005
          and classical >= similarity - 0.005
          and elapsed < 600.0)
    gate(6, "matching-head ordering",
         ok, f"3-seed means: unbalanced {unbalanced:.4f} >= classical "
             f"{classical:.4f} >= similarity {similarity:.4f}, {elapsed:.1f}s")


def test_criterion_7_partial_mass_concentrates_plans(gate):
    start = time.perf_counter()
    cfg = DEFAULT
    server, clients, tenc = build_experiment(cfg)
    solver = SolverConfig(max_iter=cfg.max_iter, epsilon=cfg.epsilon)
    for _ in range(cfg.rounds):
        server, _ = run_round(server, clients, cfg.mode, cfg,
                              text_encoder=tenc, solver=solver)
    pool = [(cl, fm) for cl in clients for fm, _ in cl.test_batch]
    rng = np.random.default_rng([0, 77])
    picks = rng.choice(len(pool), size=50, replace=False)
    supports = {0.5: [], 1.0: []}
    for idx in picks:
        client, fm = pool[idx]
        for gamma in (0.5, 1.0):
            mode = MatchingMode(variant=Variant.UNBALANCED_OT, gamma=gamma,
                                lam=cfg.lam, tau=cfg.tau)
            out = forward_batch([(fm, 0)], client.prompts, mode, tenc, solver)
            pred = int(np.argmax(out.probs[0]))
            supports[gamma].append(plan_support_size(out.plans.plans[pred]))
    low, high = np.mean(supports[0.5]), np.mean(supports[1.0])
    elapsed = time.perf_counter() - start
    ok = low < high and elapsed < 60.0
    gate(7, "partial mass concentrates plans",
         ok, f"mean support {low:.2f} at gamma=0.5 vs {high:.2f} at "
             f"gamma=1.0 over 50 trained samples, {elapsed:.1f}s")


def test_criterion_8_privacy_and_determinism(gate, tmp_path):
    start = time.perf_counter()
    # local prompts must never reach the wire, checked after a round of
    # aggregation has untied the two blocks
    cfg = dataclasses.replace(DEFAULT, rounds=2)
    server, clients, tenc = build_experiment(cfg)
    solver = SolverConfig(max_iter=cfg.max_iter, epsilon=cfg.epsilon)
    for _ in range(cfg.rounds):
        server, _ = run_round(server, clients, cfg.mode, cfg,
                              text_encoder=tenc, solver=solver)
    leaked = False
    for cl in clients:
        msg = serialize_update(cl.client_id, cl.prompts.global_prompt, cl.m_i)
        local = np.ascontiguousarray(cl.prompts.local_prompt)
        if msg.find(local.tobytes()) != -1:
            leaked = True
        for row in local:
            if msg.find(np.ascontiguousarray(row).tobytes()) != -1:
                leaked = True
    # identical configs must reproduce the exported curves byte for byte
    paths = []
    for name in ("a", "b"):
        result = run_experiment(DEFAULT)
        path = tmp_path / f"curves_{name}.csv"
        export_curves(result.reports, path)
        paths.append(path)
    identical = paths[0].read_bytes() == paths[1].read_bytes()
    elapsed = time.perf_counter() - start
    ok = (not leaked) and identical and elapsed < 120.0
    gate(8, "privacy and determinism",
         ok, f"no local-prompt bytes on the wire, reruns byte-identical, "
             f"{elapsed:.1f}s")


def test_criterion_9_aggregation_law(gate):
    start = time.perf_counter()
    p = np.arange(20.0).reshape(4, 5)
    single = np.array_equal(aggregate_global([(0, p, 3)]), p)
    cancel = np.array_equal(aggregate_global([(0, p, 2), (1, -p, 2)]),
                            np.zeros_like(p))
    ones = np.ones((2, 2))
    weighted = np.array_equal(
        aggregate_global([(0, 1.0 * ones, 1), (1, 2.0 * ones, 2),
                          (2, -0.5 * ones, 3)]),
        ones * ((1.0 + 4.0 - 1.5) / 6.0))
    elapsed = time.perf_counter() - start
    ok = single and cancel and weighted and elapsed < 1.0
    gate(9, "aggregation law",
         ok, f"identity, cancellation, weighted mean all exact, "
             f"{elapsed:.2f}s")
