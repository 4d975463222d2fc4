"""Federated round loop over prompt pairs.

Clients run SGD on both prompt blocks against their private shards; only the
shared (global) block is serialized back to the server, which mass-weights
and averages it.  The private block never leaves the client, which is the
whole point of the split.  Everything is seeded: cohort sampling, batch
order, data, and init, so a full experiment is a pure function of its config.
"""

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .alignment import (
    BatchDiagnostics,
    MatchingMode,
    Variant,
    forward_batch,
    grad_from_forward,
)
from .data_synth import PartitionSpec, Scheme, SynthSpec, gen_dataset, make_partition
from .encoders import (
    PromptPair,
    ShapeMismatch,
    encode_image,
    init_prompts,
    make_image_encoder,
    make_text_encoder,
)
from .ot_core import SolverConfig

# cohort sampling runs on its own stream keyed by (experiment seed, round)
# so changing the round count never perturbs data or init draws
SAMPLE_TAG = 301

UPDATE_MAGIC = b"GBLK"


class EmptyCohort(ValueError):
    """Aggregation asked for with no participating clients."""


class ConfigInvalid(ValueError):
    """Experiment config failed validation; message names the field."""


@dataclass(frozen=True)
class ProtocolMode:
    """What a federation mode means operationally."""

    variant: Variant
    train_local: bool   # False freezes the private block at its init
    aggregate: bool     # False skips server averaging entirely


# fedotp is the full method; shared_only freezes the private block (a
# FedAvg-of-prompts baseline); local_only trains both blocks but never
# communicates; the last two swap the matching head, protocol unchanged.
MODES = {
    "fedotp": ProtocolMode(Variant.UNBALANCED_OT, True, True),
    "shared_only": ProtocolMode(Variant.UNBALANCED_OT, False, True),
    "local_only": ProtocolMode(Variant.UNBALANCED_OT, True, False),
    "similarity_avg": ProtocolMode(Variant.SIMILARITY_AVG, True, True),
    "classical_ot": ProtocolMode(Variant.CLASSICAL_OT, True, True),
}


@dataclass
class ClientState:
    """One client: its prompt pair, shard, and cached encoded features.

    ``train_batch`` / ``test_batch`` are lists of (FeatureMap, label) built
    once at client construction; the image tower is frozen so re-encoding
    every round would be pure waste.
    """

    client_id: int
    prompts: PromptPair
    dataset: object
    lr: float = 0.001
    train_batch: list = None
    test_batch: list = None

    @property
    def m_i(self):
        return len(self.train_batch)


@dataclass(frozen=True)
class ServerState:
    global_prompt: np.ndarray
    round_index: int = 0
    participation_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigInvalid(
                f"participation_fraction must be in (0, 1], got "
                f"{self.participation_fraction}"
            )


@dataclass(frozen=True)
class RoundReport:
    """Everything one round produced, merged in client-id order."""

    round_index: int
    sampled_ids: tuple
    accuracies: tuple          # per client, all N clients
    losses: tuple
    mean_accuracy: float
    std_accuracy: float
    mean_loss: float
    solver_mean_iters: float
    solver_nonconverged: int
    wall_time: float

    def __post_init__(self):
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")


@dataclass(frozen=True)
class ExperimentSummary:
    mode: str
    rounds_completed: int
    mean_accuracy: float
    std_accuracy: float
    mean_loss: float
    per_client_accuracy: tuple
    evaluated_all_clients: bool = True


@dataclass(frozen=True)
class ExperimentResult:
    reports: tuple             # one RoundReport per round
    summary: ExperimentSummary


def make_client(dataset, image_encoder, prompts, lr=0.001):
    """Encode a shard once and wrap it with a fresh copy of the init pair."""
    train = [(encode_image(image_encoder, s.raw_patches), s.label)
             for s in dataset.train]
    test = [(encode_image(image_encoder, s.raw_patches), s.label)
            for s in dataset.test]
    return ClientState(client_id=dataset.client_id, prompts=prompts.copy(),
                       dataset=dataset, lr=lr, train_batch=train,
                       test_batch=test)


def serialize_update(client_id, global_prompt, mass):
    """Client-to-server message: id, mass, and the shared block only."""
    arr = np.ascontiguousarray(global_prompt, dtype=np.float64)
    header = struct.pack("<4sqqqq", UPDATE_MAGIC, client_id, mass,
                         arr.shape[0], arr.shape[1])
    return header + arr.tobytes()


def parse_update(message):
    head = struct.calcsize("<4sqqqq")
    magic, client_id, mass, rows, cols = struct.unpack_from("<4sqqqq", message)
    if magic != UPDATE_MAGIC:
        raise ValueError("not a prompt update message")
    body = np.frombuffer(message, dtype=np.float64, offset=head)
    return client_id, body.reshape(rows, cols).copy(), mass


def local_train(state, global_prompt, epochs, mode, batch_size, text_encoder,
                round_index=0, train_global=True, train_local=True,
                solver=None):
    """R epochs of SGD from [incoming global, retained local]; new state."""
    new_state, _, _ = local_train_with_stats(
        state, global_prompt, epochs, mode, batch_size, text_encoder,
        round_index=round_index, train_global=train_global,
        train_local=train_local, solver=solver)
    return new_state


def local_train_with_stats(state, global_prompt, epochs, mode, batch_size,
                           text_encoder, round_index=0, train_global=True,
                           train_local=True, solver=None):
    """local_train plus solver diagnostics and the per-step loss trace."""
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not state.train_batch:
        raise ValueError(f"client {state.client_id} has an empty train shard")
    # the incoming global overwrites the slot before any step runs
    prompts = PromptPair(np.array(global_prompt, dtype=np.float64, copy=True),
                         state.prompts.local_prompt.copy())
    diag = BatchDiagnostics()
    losses = []
    m = len(state.train_batch)
    rng = np.random.default_rng([state.client_id, round_index])
    for _ in range(epochs):
        order = rng.permutation(m)
        for start in range(0, m, batch_size):
            batch = [state.train_batch[i] for i in order[start:start + batch_size]]
            out = forward_batch(batch, prompts, mode, text_encoder, solver)
            g_global, g_local = grad_from_forward(out, batch, prompts, mode,
                                                  text_encoder)
            diag.merge(out.diag)
            losses.append(out.loss)
            new_g = prompts.global_prompt
            new_l = prompts.local_prompt
            if train_global:
                new_g = new_g - state.lr * g_global
            if train_local:
                new_l = new_l - state.lr * g_local
            prompts = PromptPair(new_g, new_l)
    new_state = ClientState(client_id=state.client_id, prompts=prompts,
                            dataset=state.dataset, lr=state.lr,
                            train_batch=state.train_batch,
                            test_batch=state.test_batch)
    return new_state, diag, losses


def aggregate_global(updates):
    """Mass-weighted average of the shared blocks: sum(m_i P_i) / sum(m_i)."""
    if not updates:
        raise EmptyCohort("no client updates to aggregate")
    shapes = {np.shape(p) for _, p, _ in updates}
    if len(shapes) != 1:
        raise ShapeMismatch(f"update shapes disagree: {sorted(shapes)}")
    masses = np.array([float(m) for _, _, m in updates])
    if np.any(masses < 0):
        raise ValueError("negative client mass")
    total = masses.sum()
    if total <= 0:
        raise EmptyCohort("total client mass is zero")
    weights = masses / total
    assert abs(weights.sum() - 1.0) <= 1e-12
    acc = np.zeros(next(iter(shapes)))
    for (_, prompt, _), m in zip(updates, masses):
        acc = acc + m * np.asarray(prompt, dtype=np.float64)
    return acc / total


def evaluate_personalized(client, mode, text_encoder, solver=None,
                          eval_batch=100):
    """(accuracy, mean loss) on the client's own test shard."""
    acc, loss, _ = _evaluate_with_stats(client, mode, text_encoder, solver,
                                        eval_batch)
    return acc, loss


def _evaluate_with_stats(client, mode, text_encoder, solver, eval_batch):
    if not client.test_batch:
        raise ValueError(f"client {client.client_id} has an empty test shard")
    diag = BatchDiagnostics()
    correct = 0
    nll_sum = 0.0
    n = len(client.test_batch)
    for start in range(0, n, eval_batch):
        chunk = client.test_batch[start:start + eval_batch]
        out = forward_batch(chunk, client.prompts, mode, text_encoder, solver)
        diag.merge(out.diag)
        labels = np.array([label for _, label in chunk])
        preds = np.argmax(out.probs, axis=1)  # first max: lowest-index ties
        correct += int((preds == labels).sum())
        nll_sum += out.loss * len(chunk)
    return correct / n, nll_sum / n, diag


def sample_cohort(num_clients, fraction, experiment_seed, round_index):
    """ceil(fraction*N) distinct client indices, ascending, own RNG stream."""
    count = math.ceil(fraction * num_clients)
    count = min(max(count, 1), num_clients)
    rng = np.random.default_rng([SAMPLE_TAG, experiment_seed, round_index])
    picked = rng.choice(num_clients, size=count, replace=False)
    return sorted(int(i) for i in picked)


def run_round(server, clients, mode, config, text_encoder=None, solver=None):
    """One communication round; trains sampled clients in place.

    Returns (new ServerState, RoundReport).  ``clients`` entries for sampled
    ids are replaced with their trained states; the rest are untouched and
    keep their last-received global slot, which is exactly what they would
    hold in a real deployment.
    """
    if not clients:
        raise EmptyCohort("no clients")
    if mode not in MODES:
        raise ConfigInvalid(f"unknown mode {mode!r}")
    proto = MODES[mode]
    matching = MatchingMode(variant=proto.variant, gamma=config.gamma,
                            lam=config.lam, tau=config.tau)
    if text_encoder is None:
        text_encoder = make_text_encoder(
            config.seed, num_classes=config.num_classes, s=config.prompt_len,
            d_l=config.prompt_dim, d_f=config.feature_dim)
    if solver is None:
        solver = SolverConfig(max_iter=config.max_iter, epsilon=config.epsilon)

    start = time.perf_counter()
    diag = BatchDiagnostics()
    sampled = sample_cohort(len(clients), server.participation_fraction,
                            config.seed, server.round_index)
    messages = []
    for i in sampled:
        trained, d, _ = local_train_with_stats(
            clients[i], server.global_prompt, config.local_epochs, matching,
            config.batch_size, text_encoder, round_index=server.round_index,
            train_global=True, train_local=proto.train_local, solver=solver)
        diag.merge(d)
        clients[i] = trained
        messages.append(serialize_update(
            trained.client_id, trained.prompts.global_prompt, trained.m_i))

    if proto.aggregate:
        new_global = aggregate_global([parse_update(m) for m in messages])
    else:
        new_global = server.global_prompt

    accs, losses = [], []
    for st in clients:
        acc, loss, d = _evaluate_with_stats(st, matching, text_encoder,
                                            solver, config.eval_batch)
        diag.merge(d)
        accs.append(acc)
        losses.append(loss)

    report = RoundReport(
        round_index=server.round_index,
        sampled_ids=tuple(sampled),
        accuracies=tuple(accs),
        losses=tuple(losses),
        mean_accuracy=float(np.mean(accs)),
        std_accuracy=float(np.std(accs)),
        mean_loss=float(np.mean(losses)),
        solver_mean_iters=diag.mean_iterations,
        solver_nonconverged=diag.solves - diag.converged,
        wall_time=time.perf_counter() - start,
    )
    new_server = ServerState(global_prompt=new_global,
                             round_index=server.round_index + 1,
                             participation_fraction=server.participation_fraction)
    return new_server, report


_CONFIG_FIELDS = (
    "seed", "mode", "rounds", "local_epochs", "lr", "batch_size",
    "eval_batch", "fraction", "gamma", "lam", "tau", "max_iter", "epsilon",
    "num_classes", "patches_per_sample", "raw_dim", "core_fraction",
    "noise_std", "num_domains", "shots_per_class", "samples_per_class",
    "scheme", "num_clients", "classes_per_client", "dirichlet_alpha",
    "dirichlet_alpha_domain", "prompt_len", "prompt_dim", "feature_dim",
)


def _require(config):
    for name in _CONFIG_FIELDS:
        if not hasattr(config, name):
            raise ConfigInvalid(f"config missing field {name!r}")
    if config.mode not in MODES:
        raise ConfigInvalid(f"unknown mode {config.mode!r}")
    if config.rounds < 0:
        raise ConfigInvalid(f"rounds must be >= 0, got {config.rounds}")
    if config.local_epochs < 0:
        raise ConfigInvalid(
            f"local_epochs must be >= 0, got {config.local_epochs}")
    if config.lr < 0:
        raise ConfigInvalid(f"lr must be >= 0, got {config.lr}")
    if config.batch_size < 1 or config.eval_batch < 1:
        raise ConfigInvalid("batch sizes must be >= 1")
    if not 0.0 < config.fraction <= 1.0:
        raise ConfigInvalid(f"fraction must be in (0, 1], got {config.fraction}")


def build_experiment(config):
    """Data, partition, encoders, clients, server: everything before round 0."""
    _require(config)
    try:
        synth = SynthSpec(
            num_classes=config.num_classes,
            patches_per_sample=config.patches_per_sample,
            raw_dim=config.raw_dim, core_fraction=config.core_fraction,
            noise_std=config.noise_std, num_domains=config.num_domains,
            shots_per_class=config.shots_per_class,
            samples_per_class=config.samples_per_class, seed=config.seed)
        part = PartitionSpec(
            scheme=Scheme(config.scheme), num_clients=config.num_clients,
            classes_per_client=config.classes_per_client,
            dirichlet_alpha=config.dirichlet_alpha,
            dirichlet_alpha_domain=config.dirichlet_alpha_domain,
            seed=config.seed)
    except ValueError as err:
        raise ConfigInvalid(str(err)) from err
    pool = gen_dataset(synth)
    shards = make_partition(pool, part)
    text_encoder = make_text_encoder(
        config.seed, num_classes=config.num_classes, s=config.prompt_len,
        d_l=config.prompt_dim, d_f=config.feature_dim)
    image_encoder = make_image_encoder(
        config.seed, v_patches=config.patches_per_sample,
        d_raw=config.raw_dim, d_f=config.feature_dim)
    init = init_prompts(config.seed, s=config.prompt_len, d_l=config.prompt_dim)
    clients = [make_client(ds, image_encoder, init, lr=config.lr)
               for ds in shards]
    server = ServerState(global_prompt=init.global_prompt.copy(),
                         round_index=0,
                         participation_fraction=config.fraction)
    return server, clients, text_encoder


def run_experiment(config):
    """T rounds from a validated config; returns reports plus a summary."""
    server, clients, text_encoder = build_experiment(config)
    solver = SolverConfig(max_iter=config.max_iter, epsilon=config.epsilon)
    reports = []
    for _ in range(config.rounds):
        server, report = run_round(server, clients, config.mode, config,
                                   text_encoder=text_encoder, solver=solver)
        reports.append(report)

    if reports:
        last = reports[-1]
        summary = ExperimentSummary(
            mode=config.mode, rounds_completed=len(reports),
            mean_accuracy=last.mean_accuracy, std_accuracy=last.std_accuracy,
            mean_loss=last.mean_loss, per_client_accuracy=last.accuracies)
    else:
        # T=0: report the untrained initial state
        matching = MatchingMode(variant=MODES[config.mode].variant,
                                gamma=config.gamma, lam=config.lam,
                                tau=config.tau)
        accs, losses = [], []
        for st in clients:
            acc, loss, _ = _evaluate_with_stats(st, matching, text_encoder,
                                                solver, config.eval_batch)
            accs.append(acc)
            losses.append(loss)
        summary = ExperimentSummary(
            mode=config.mode, rounds_completed=0,
            mean_accuracy=float(np.mean(accs)),
            std_accuracy=float(np.std(accs)),
            mean_loss=float(np.mean(losses)),
            per_client_accuracy=tuple(accs))
    return ExperimentResult(reports=tuple(reports), summary=summary)
