"""Synthetic patch-feature datasets and federated partitioning schemes.

Samples are raw patch matrices drawn around per-class prototypes, optionally
pushed through per-domain orthogonal transforms (feature shift).  Partitions
split a generated pool across clients with label shift (pathological or
Dirichlet), feature shift (one domain per client), or both.
"""

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

POOL_TAG = 201
PARTITION_TAG = 202
DOMAIN_TAG = 203
NOISE_TAG = 204


class InsufficientClasses(ValueError):
    """More distinct classes requested per client than exist."""


class InsufficientSamples(ValueError):
    """The pool cannot cover the requested train/test draws."""


class Sample(NamedTuple):
    raw_patches: np.ndarray   # (V, d_raw)
    label: int
    domain_id: int


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    patches_per_sample: int = 16
    raw_dim: int = 16
    core_fraction: float = 0.5
    noise_std: float = 0.1
    num_domains: int = 1
    shots_per_class: int = 8
    samples_per_class: int = 40   # per (class, domain); sizes the pool
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "patches_per_sample", "raw_dim",
                     "num_domains", "shots_per_class", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.core_fraction <= 1:
            raise ValueError(
                f"core_fraction must lie in (0, 1], got {self.core_fraction}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def core_patches(self):
        return int(np.ceil(self.core_fraction * self.patches_per_sample))


class Scheme(enum.Enum):
    PATHOLOGICAL = "pathological"
    DIRICHLET = "dirichlet"
    DOMAIN = "domain"
    DOMAIN_DIRICHLET = "domain_dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme = Scheme.PATHOLOGICAL
    num_clients: int = 10
    classes_per_client: int = 2
    dirichlet_alpha: float = 0.3
    dirichlet_alpha_domain: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.classes_per_client < 1:
            raise ValueError(
                f"classes_per_client must be >= 1, got {self.classes_per_client}")
        if self.dirichlet_alpha <= 0 or self.dirichlet_alpha_domain <= 0:
            raise ValueError("dirichlet alphas must be > 0")


@dataclass
class ClientDataset:
    client_id: int
    train: list = field(default_factory=list)   # Sample entries
    test: list = field(default_factory=list)

    @property
    def m_i(self):
        return len(self.train)

    @property
    def classes(self):
        return sorted({s.label for s in self.train})


@dataclass(frozen=True)
class Pool:
    """Generated samples plus the spec that produced them."""

    samples: tuple
    spec: SynthSpec

    def __len__(self):
        return len(self.samples)


def _domain_transforms(spec):
    """Per-domain (A, b); domain 0 is the identity with zero bias."""
    rng = np.random.default_rng([spec.seed, DOMAIN_TAG])
    d = spec.raw_dim
    out = [(np.eye(d), np.zeros(d))]
    for _ in range(1, spec.num_domains):
        m = rng.normal(size=(d, d))
        q, r = np.linalg.qr(m)
        q = q * np.sign(np.diag(r))   # fix QR sign convention for determinism
        b = 0.3 * rng.normal(size=d)
        out.append((q, b))
    return out


def prototypes(spec):
    """(mu[k, d] class prototypes, background[d]) after domain transforms."""
    rng = np.random.default_rng([spec.seed, POOL_TAG])
    base = rng.normal(size=(spec.num_classes, spec.raw_dim))
    background = rng.normal(size=spec.raw_dim)
    transforms = _domain_transforms(spec)
    mu = np.empty((spec.num_classes, spec.num_domains, spec.raw_dim))
    bg = np.empty((spec.num_domains, spec.raw_dim))
    for d, (a, b) in enumerate(transforms):
        mu[:, d] = base @ a.T + b
        bg[d] = a @ background + b
    return mu, bg


def gen_dataset(spec):
    """Seed-deterministic pool: samples_per_class per (class, domain).

    Each sample's first core_patches rows sit near the class prototype and
    the rest near the shared background prototype.
    """
    rng = np.random.default_rng([spec.seed, NOISE_TAG])
    mu, bg = prototypes(spec)
    n_core = spec.core_patches
    v = spec.patches_per_sample
    samples = []
    for d in range(spec.num_domains):
        for k in range(spec.num_classes):
            for _ in range(spec.samples_per_class):
                patches = np.empty((v, spec.raw_dim))
                patches[:n_core] = mu[k, d] + spec.noise_std * rng.normal(
                    size=(n_core, spec.raw_dim))
                patches[n_core:] = bg[d] + spec.noise_std * rng.normal(
                    size=(v - n_core, spec.raw_dim))
                samples.append(Sample(patches, k, d))
    return Pool(samples=tuple(samples), spec=spec)


def nearest_prototype_accuracy(pool, domain_id=0):
    """Classify sample means against each class's expected sample mean."""
    spec = pool.spec
    mu, bg = prototypes(spec)
    cf = spec.core_patches / spec.patches_per_sample
    centers = cf * mu[:, domain_id] + (1 - cf) * bg[domain_id]   # (K, d_raw)
    hits = total = 0
    for s in pool.samples:
        if s.domain_id != domain_id:
            continue
        mean = s.raw_patches.mean(axis=0)
        pred = int(np.argmin(np.linalg.norm(centers - mean, axis=1)))
        hits += pred == s.label
        total += 1
    return hits / total if total else 0.0


def _class_index(samples):
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    return by_class


def _deal_class_slots(num_classes, pspec, rng):
    """Class sets per client: disjoint when slots fit, equal-coverage otherwise."""
    n, cpc = pspec.num_clients, pspec.classes_per_client
    if cpc > num_classes:
        raise InsufficientClasses(
            f"{cpc} distinct classes per client exceeds {num_classes} classes")
    perm = rng.permutation(num_classes)
    return [[int(perm[(i * cpc + j) % num_classes]) for j in range(cpc)]
            for i in range(n)]


def partition_pathological(pool, pspec):
    """Disjoint (or equal-coverage overlapping) class sets per client.

    Each holder of a class draws shots_per_class train samples from the
    class pool; the remainder is split evenly among holders as test data.
    """
    spec = pool.spec
    rng = np.random.default_rng([pspec.seed, PARTITION_TAG])
    class_sets = _deal_class_slots(spec.num_classes, pspec, rng)
    holders = {}
    for cid, classes in enumerate(class_sets):
        for c in classes:
            holders.setdefault(c, []).append(cid)

    clients = [ClientDataset(client_id=i) for i in range(pspec.num_clients)]
    by_class = _class_index(pool.samples)
    shots = spec.shots_per_class
    for c, cids in sorted(holders.items()):
        idx = by_class.get(c, [])
        need = len(cids) * (shots + 1)
        if len(idx) < need:
            raise InsufficientSamples(
                f"class {c} has {len(idx)} samples; {need} needed for "
                f"{len(cids)} holders at {shots} shots plus test")
        order = rng.permutation(len(idx))
        cursor = 0
        for cid in cids:
            for _ in range(shots):
                clients[cid].train.append(pool.samples[idx[order[cursor]]])
                cursor += 1
        rest = [idx[order[p]] for p in range(cursor, len(idx))]
        for p, sample_idx in enumerate(rest):
            clients[cids[p % len(cids)]].test.append(pool.samples[sample_idx])
    return clients


def _split_train_test(allocation):
    """3:1 train:test split of one client-class allocation; test >= 1 when >= 2."""
    test = max(len(allocation) // 4, 1) if len(allocation) >= 2 else 0
    return allocation[:len(allocation) - test], allocation[len(allocation) - test:]


def _dirichlet_counts(total, alpha, n, rng):
    """Integer allocation of `total` items by Dirichlet proportions."""
    p = rng.dirichlet(np.full(n, alpha))
    raw = p * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    # largest-remainder rounding keeps the per-class totals exact
    for i in np.argsort(-(raw - counts))[:short]:
        counts[i] += 1
    return counts


def _dirichlet_assign(samples, indices_by_class, cids, alpha, rng):
    """Allocate each class's samples across cids; returns train/test lists."""
    for _ in range(100):
        per_class = {c: _dirichlet_counts(len(idx), alpha, len(cids), rng)
                     for c, idx in sorted(indices_by_class.items())}
        totals = np.zeros(len(cids), dtype=int)
        for counts in per_class.values():
            totals += counts
        if totals.min() > 0:
            break
    else:
        raise InsufficientSamples(
            "could not draw Dirichlet proportions leaving every client nonempty")
    out = {cid: ([], []) for cid in cids}
    for c, idx in sorted(indices_by_class.items()):
        order = rng.permutation(len(idx))
        cursor = 0
        for pos, cid in enumerate(cids):
            take = [idx[order[p]] for p in range(cursor, cursor + per_class[c][pos])]
            cursor += per_class[c][pos]
            tr, te = _split_train_test(take)
            out[cid][0].extend(samples[i] for i in tr)
            out[cid][1].extend(samples[i] for i in te)
    return out


def partition_dirichlet(pool, pspec):
    """Per-class client proportions from a symmetric Dirichlet draw."""
    rng = np.random.default_rng([pspec.seed, PARTITION_TAG])
    by_class = _class_index(pool.samples)
    cids = list(range(pspec.num_clients))
    assigned = _dirichlet_assign(pool.samples, by_class, cids,
                                 pspec.dirichlet_alpha, rng)
    clients = []
    for cid in cids:
        tr, te = assigned[cid]
        clients.append(ClientDataset(client_id=cid, train=tr, test=te))
    return clients


def assign_domains(pool, pspec):
    """Feature-shift partitions: one domain per client (round-robin).

    DOMAIN gives each client a uniform label split of its domain pool;
    DOMAIN_DIRICHLET composes the domain assignment with a Dirichlet label
    split (alpha = dirichlet_alpha_domain) inside each domain.
    """
    spec = pool.spec
    rng = np.random.default_rng([pspec.seed, PARTITION_TAG])
    n, d = pspec.num_clients, spec.num_domains
    domain_of = {cid: cid % d for cid in range(n)}
    clients_in = {}
    for cid in range(n):
        clients_in.setdefault(domain_of[cid], []).append(cid)

    clients = {cid: ClientDataset(client_id=cid) for cid in range(n)}
    for dom in sorted(clients_in):
        members = clients_in[dom]
        dom_samples = [s for s in pool.samples if s.domain_id == dom]
        by_class = _class_index(dom_samples)
        if pspec.scheme is Scheme.DOMAIN_DIRICHLET:
            assigned = _dirichlet_assign(dom_samples, by_class, members,
                                         pspec.dirichlet_alpha_domain, rng)
            for cid in members:
                tr, te = assigned[cid]
                clients[cid].train.extend(tr)
                clients[cid].test.extend(te)
        else:
            shots = spec.shots_per_class
            for c, idx in sorted(by_class.items()):
                share = len(idx) // len(members)
                if share < shots + 1:
                    raise InsufficientSamples(
                        f"domain {dom} class {c}: share {share} cannot cover "
                        f"{shots} shots plus test")
                order = rng.permutation(len(idx))
                for pos, cid in enumerate(members):
                    take = [idx[order[p]]
                            for p in range(pos * share, (pos + 1) * share)]
                    clients[cid].train.extend(dom_samples[i] for i in take[:shots])
                    clients[cid].test.extend(dom_samples[i] for i in take[shots:])
                # leftovers (share rounding) go to the first member's test set
                for p in range(len(members) * share, len(idx)):
                    clients[members[0]].test.append(dom_samples[idx[order[p]]])
    return [clients[cid] for cid in range(n)]


def make_partition(pool, pspec):
    if pspec.scheme is Scheme.PATHOLOGICAL:
        return partition_pathological(pool, pspec)
    if pspec.scheme is Scheme.DIRICHLET:
        return partition_dirichlet(pool, pspec)
    return assign_domains(pool, pspec)


def write_records(clients, path):
    """One line per sample: client_id,domain_id,label,flat patch values."""
    with open(path, "w") as fh:
        for client in clients:
            for sample in list(client.train) + list(client.test):
                flat = ",".join(repr(float(x)) for x in sample.raw_patches.ravel())
                fh.write(f"{client.client_id},{sample.domain_id},"
                         f"{sample.label},{flat}\n")


def read_records(path, v, d_raw):
    """Inverse of write_records: {client_id: [Sample, ...]} in file order."""
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split(",")
            cid, dom, label = int(parts[0]), int(parts[1]), int(parts[2])
            patches = np.array([float(x) for x in parts[3:]]).reshape(v, d_raw)
            out.setdefault(cid, []).append(Sample(patches, label, dom))
    return out
