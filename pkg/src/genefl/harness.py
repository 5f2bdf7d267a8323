"""Experiment orchestration: world setup, the round loop over known clients,
the agnostic admission phase, exchange-mode baselines, communication
accounting, metrics, and report files.

Everything downstream of the config seed is deterministic: named child seeds
are derived once from the master seed, and every stochastic step (data,
partitions, splits, inits, sampling, batching, signatures, admissions) draws
from its own stream keyed by purpose and entity ids. Modes share every one
of those streams, so switching mode changes only what is exchanged and how
it is aggregated.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .client import ClientState, LocalConfig, local_update, plain_local_train
from .data import (
    Dataset,
    Dirichlet,
    PartitionSpec,
    Shard,
    Sharding,
    export_partition_manifest,
    make_synthetic,
    partition,
    split_known_agnostic,
    subset_by_classes,
)
from .genecraft import LearnGene, gamma_schedule, save_gene
from .nn import OptState, accuracy
from .params import Architecture, LayeredParams, init_params
from .server import (
    ClusterState,
    RoutingTable,
    Signature,
    admit_agnostic,
    aggregate_learngene,
    cluster_known,
    init_agnostic,
    signature_subsample,
    svd_signature,
)

MODES = ("genefl", "fedavg_full", "partial_fixed")

# Fixed indices into the derived child-seed table; append only.
_SEED_PURPOSES = (
    "data",
    "class_split",
    "partition_known",
    "partition_agnostic",
    "test_split",
    "client_init",
    "clustering",
    "round_sampling",
    "batching",
    "admission_order",
    "signature",
    "baseline_init",
    "baseline_batching",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; the JSON config mirrors these names."""

    n_known: int = 12
    m_agnostic: int = 4
    k_clusters: int = 2
    rounds_known: int = 30
    rounds_agnostic: int = 10
    clients_per_round: int = 12
    num_classes: int = 8
    per_class: int = 400
    input_dim: int = 16
    hidden: tuple[int, ...] = (32, 16)
    fraction_known: float = 0.5
    partition: str = "sharding"
    shards_per_client: int = 4
    agnostic_shards_per_client: int | None = None
    dirichlet_beta: float = 0.5
    epochs_local: int = 10
    batch_size: int = 64
    lambda1: float = 0.5
    lambda2: float = 0.05
    epsilon: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    gamma_min: int = 2
    warmup: int = 8
    gamma_hold_delta: float | None = None
    bitwidth: int = 32
    seed: int = 7
    mode: str = "genefl"
    signature_samples: int = 32
    signature_rank: int = 5
    admit_per_round: int = 10
    agnostic_joins_training: bool = True
    invert_scores: bool = False
    save_round_checkpoints: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        positive = {
            "n_known": self.n_known,
            "k_clusters": self.k_clusters,
            "clients_per_round": self.clients_per_round,
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "input_dim": self.input_dim,
            "batch_size": self.batch_size,
            "gamma_min": self.gamma_min,
            "warmup": self.warmup,
            "bitwidth": self.bitwidth,
            "signature_samples": self.signature_samples,
            "signature_rank": self.signature_rank,
            "admit_per_round": self.admit_per_round,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        for name, value in (
            ("m_agnostic", self.m_agnostic),
            ("rounds_known", self.rounds_known),
            ("rounds_agnostic", self.rounds_agnostic),
            ("epochs_local", self.epochs_local),
        ):
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if self.clients_per_round > self.n_known:
            raise ValueError("clients_per_round must not exceed n_known")
        if self.k_clusters > self.n_known:
            raise ValueError("k_clusters must not exceed n_known")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.partition not in ("sharding", "dirichlet"):
            raise ValueError(f"unknown partition strategy {self.partition!r}")
        if not 0.0 < self.fraction_known < 1.0:
            raise ValueError("fraction_known must be in (0,1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0,1]")
        arch = self.architecture()
        if not 1 <= self.gamma_min <= arch.num_units:
            raise ValueError(
                f"gamma_min must be in [1, {arch.num_units}], got {self.gamma_min}"
            )
        if self.signature_rank > min(self.signature_samples, self.input_dim):
            raise ValueError("signature_rank exceeds min(signature_samples, input_dim)")

    def architecture(self) -> Architecture:
        return Architecture((self.input_dim, *self.hidden, self.num_classes))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "hidden" in raw:
            raw["hidden"] = tuple(raw["hidden"])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client_id: int
    direction: str  # "up" | "down"
    param_count: int
    bytes: int


class CommLedger:
    """Append-only per-exchange byte accounting (bytes = params * B/8)."""

    def __init__(self, bitwidth: int = 32):
        if bitwidth < 1 or bitwidth % 8 != 0:
            raise ValueError("bitwidth must be a positive multiple of 8")
        self.bitwidth = bitwidth
        self.entries: list[LedgerEntry] = []

    def add(self, round_index: int, client_id: int, direction: str, param_count: int) -> None:
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        if param_count < 0:
            raise ValueError("param_count must be >= 0")
        self.entries.append(
            LedgerEntry(
                round=round_index,
                client_id=client_id,
                direction=direction,
                param_count=param_count,
                bytes=param_count * self.bitwidth // 8,
            )
        )

    def uplink_total(self) -> int:
        return sum(e.bytes for e in self.entries if e.direction == "up")

    def downlink_total(self) -> int:
        return sum(e.bytes for e in self.entries if e.direction == "down")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("round,client_id,direction,param_count,bytes\n")
            for e in self.entries:
                f.write(f"{e.round},{e.client_id},{e.direction},{e.param_count},{e.bytes}\n")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    mode: str
    mean_test_accuracy: float
    cluster_accuracy: tuple[float, ...]
    cumulative_uplink_bytes: int
    mean_gamma: float


def write_metrics_csv(rows: list[MetricsRow], k_clusters: int, path) -> None:
    header = ["round", "mode", "mean_test_accuracy"]
    header += [f"acc_cluster_{k}" for k in range(k_clusters)]
    header += ["cumulative_uplink_bytes", "mean_gamma"]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            cells = [str(r.round), r.mode, repr(r.mean_test_accuracy)]
            cells += [repr(a) for a in r.cluster_accuracy]
            cells += [str(r.cumulative_uplink_bytes), repr(r.mean_gamma)]
            f.write(",".join(cells) + "\n")


def comm_cost(ledger: CommLedger, rounds: int, bitwidth: int, param_count: int) -> tuple[int, int]:
    """Measured uplink bytes plus the headline formula R*B*|W|*2 in bits."""
    return ledger.uplink_total(), rounds * bitwidth * param_count * 2


def fedavg_aggregate(models: list[LayeredParams]) -> LayeredParams:
    """Unweighted elementwise mean, summed in the given order (float32 wire)."""
    if not models:
        raise ValueError("cannot aggregate zero models")
    for m in models[1:]:
        models[0].require_congruent(m, "aggregation")
    layers = []
    for lid in models[0].layer_ids:
        acc = models[0].get(lid).astype(np.float32, copy=True)
        for m in models[1:]:
            acc = acc + m.get(lid).astype(np.float32)
        layers.append((lid, acc / len(models)))
    return LayeredParams(layers)


@dataclass
class World:
    cfg: ExperimentConfig
    arch: Architecture
    dataset: Dataset
    known_classes: tuple[int, ...]
    agnostic_classes: tuple[int, ...]
    known_pool: Dataset
    known_pool_rows: np.ndarray
    agnostic_pool: Dataset
    agnostic_pool_rows: np.ndarray
    clients: dict[int, ClientState]
    splits: dict[int, tuple[np.ndarray, np.ndarray]]  # client -> (train, test) pool rows
    pools: dict[int, str]  # client -> "known" | "agnostic"
    clusters: list[ClusterState]
    routing: RoutingTable
    ledger: CommLedger
    seeds: np.ndarray
    metrics: list[MetricsRow] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    round0_records: list[dict] = field(default_factory=list)
    active_ids: list[int] = field(default_factory=list)
    pending_agnostic: list[int] = field(default_factory=list)
    gamma_current: int | None = None
    last_accuracy: float | None = None


def _child_seeds(master: int) -> np.ndarray:
    return np.random.SeedSequence(master).generate_state(len(_SEED_PURPOSES), np.uint64)


def _seed(world_seeds: np.ndarray, purpose: str, *extra: int) -> list[int]:
    idx = _SEED_PURPOSES.index(purpose)
    return [int(world_seeds[idx]), *[int(e) for e in extra]]


def dataset_for_config(cfg: ExperimentConfig) -> Dataset:
    """The exact synthetic dataset a run with this config generates."""
    return make_synthetic(
        cfg.num_classes, cfg.per_class, cfg.input_dim, _seed(_child_seeds(cfg.seed), "data")
    )


def _stratified_split(
    shard: Shard, labels: np.ndarray, rng: np.random.Generator, holdout: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class 20% holdout; every class keeps at least one training sample."""
    train, test = [], []
    for c in sorted(shard.present_classes):
        idx = shard.indices[labels[shard.indices] == c]
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(holdout * len(idx)))
        n_test = min(max(n_test, 1 if len(idx) > 1 else 0), len(idx) - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return (
        np.sort(np.concatenate(train)),
        np.sort(np.concatenate(test)) if test else np.empty(0, np.int64),
    )


def _client_data(world: World, client_id: int, which: str) -> tuple[np.ndarray, np.ndarray]:
    pool = world.known_pool if world.pools[client_id] == "known" else world.agnostic_pool
    rows = world.splits[client_id][0 if which == "train" else 1]
    return pool.inputs[rows], pool.labels[rows]


def _shard_inputs(world: World, client_id: int) -> np.ndarray:
    pool = world.known_pool if world.pools[client_id] == "known" else world.agnostic_pool
    shard = world.clients[client_id].shard
    return pool.inputs[shard.indices]


def _client_signature(world: World, client_id: int) -> Signature:
    cfg = world.cfg
    rng = np.random.default_rng(_seed(world.seeds, "signature", client_id))
    sample = signature_subsample(_shard_inputs(world, client_id), cfg.signature_samples, rng)
    return svd_signature(sample, cfg.signature_rank)


def setup_world(cfg: ExperimentConfig) -> World:
    """Build data, shards, clients, signatures, and the one-shot clustering."""
    cfg.validate()
    seeds = _child_seeds(cfg.seed)
    arch = cfg.architecture()
    dataset = make_synthetic(
        cfg.num_classes, cfg.per_class, cfg.input_dim, _seed(seeds, "data")
    )
    known_set, agnostic_set = split_known_agnostic(
        dataset.class_ids, cfg.fraction_known, _seed(seeds, "class_split")
    )
    known_pool, known_rows = subset_by_classes(dataset, known_set)
    agnostic_pool, agnostic_rows = subset_by_classes(dataset, agnostic_set)

    known_spec = PartitionSpec(
        strategy=Sharding(cfg.shards_per_client)
        if cfg.partition == "sharding"
        else Dirichlet(cfg.dirichlet_beta),
        num_clients=cfg.n_known,
        seed=int(np.random.default_rng(_seed(seeds, "partition_known")).integers(2**63)),
    )
    known_shards = partition(known_pool, known_spec)

    agn_s = (
        cfg.agnostic_shards_per_client
        if cfg.agnostic_shards_per_client is not None
        else cfg.shards_per_client
    )
    agnostic_shards = []
    if cfg.m_agnostic:
        agnostic_spec = PartitionSpec(
            strategy=Sharding(min(agn_s, len(agnostic_set)))
            if cfg.partition == "sharding"
            else Dirichlet(cfg.dirichlet_beta),
            num_clients=cfg.m_agnostic,
            seed=int(np.random.default_rng(_seed(seeds, "partition_agnostic")).integers(2**63)),
        )
        agnostic_shards = partition(agnostic_pool, agnostic_spec)

    clients: dict[int, ClientState] = {}
    splits: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    pools: dict[int, str] = {}
    labels_by_pool = {"known": known_pool.labels, "agnostic": agnostic_pool.labels}
    # All known clients start from one shared model, the usual federated
    # setup that makes cross-client averaging and proximal pulls meaningful.
    common_init = init_params(arch, _seed(seeds, "client_init", 0))
    for shard in known_shards:
        cid = shard.owner_id
        pools[cid] = "known"
        splits[cid] = _stratified_split(
            shard, labels_by_pool["known"], np.random.default_rng(_seed(seeds, "test_split", cid))
        )
        model = common_init.copy()
        clients[cid] = ClientState(
            client_id=cid,
            model=model,
            previous_model=model.copy(),
            opt_state=OptState.init(model, cfg.lr, cfg.momentum),
            shard=shard,
            is_agnostic=False,
        )
    for shard in agnostic_shards:
        cid = cfg.n_known + shard.owner_id
        shard = replace(shard, owner_id=cid)
        pools[cid] = "agnostic"
        splits[cid] = _stratified_split(
            shard,
            labels_by_pool["agnostic"],
            np.random.default_rng(_seed(seeds, "test_split", cid)),
        )
        # Placeholder until admission initializes from the routed gene.
        model = common_init.copy()
        clients[cid] = ClientState(
            client_id=cid,
            model=model,
            previous_model=model.copy(),
            opt_state=OptState.init(model, cfg.lr, cfg.momentum),
            shard=shard,
            is_agnostic=True,
        )

    world = World(
        cfg=cfg,
        arch=arch,
        dataset=dataset,
        known_classes=tuple(sorted(known_set)),
        agnostic_classes=tuple(sorted(agnostic_set)),
        known_pool=known_pool,
        known_pool_rows=known_rows,
        agnostic_pool=agnostic_pool,
        agnostic_pool_rows=agnostic_rows,
        clients=clients,
        splits=splits,
        pools=pools,
        clusters=[],
        routing=RoutingTable(assignments={}, means=[]),
        ledger=CommLedger(cfg.bitwidth),
        seeds=seeds,
        active_ids=sorted(c for c in clients if not clients[c].is_agnostic),
        pending_agnostic=sorted(c for c in clients if clients[c].is_agnostic),
    )

    # One-shot clustering of known clients from their data signatures; each
    # signature upload is ledgered at round 0.
    known_ids = list(world.active_ids)
    signatures = [_client_signature(world, cid) for cid in known_ids]
    for cid in known_ids:
        world.ledger.add(0, cid, "up", cfg.signature_samples * cfg.signature_rank)
    routing = cluster_known(
        signatures, cfg.k_clusters, _seed(seeds, "clustering"), client_ids=known_ids
    )
    world.routing = routing
    sig_by_id = dict(zip(known_ids, signatures))
    clusters = []
    for k in range(cfg.k_clusters):
        members = sorted(cid for cid, kk in routing.assignments.items() if kk == k)
        model = (
            fedavg_aggregate([world.clients[cid].model for cid in members])
            if members
            else init_params(arch, _seed(seeds, "client_init", 10**6 + k))
        )
        mean_sig = (
            np.mean([sig_by_id[cid].vector for cid in members], axis=0)
            if members
            else np.zeros(cfg.signature_samples * cfg.signature_rank)
        )
        clusters.append(
            ClusterState(
                cluster_id=k,
                model=model,
                gene=None,
                mean_signature=mean_sig,
                member_count=len(members),
            )
        )
    world.clusters = clusters
    for cid in known_ids:
        world.clients[cid] = replace(world.clients[cid], cluster_id=routing.assignments[cid])
    return world


def _evaluate(world: World) -> tuple[float, tuple[float, ...]]:
    accs: dict[int, float] = {}
    for cid in world.active_ids:
        x, y = _client_data(world, cid, "test")
        accs[cid] = accuracy(world.clients[cid].model, x, y)
    mean_acc = float(np.mean(list(accs.values()))) if accs else 0.0
    per_cluster = []
    for k in range(world.cfg.k_clusters):
        members = [cid for cid in world.active_ids if world.clients[cid].cluster_id == k]
        per_cluster.append(float(np.mean([accs[c] for c in members])) if members else 0.0)
    return mean_acc, tuple(per_cluster)


def _round_gamma(world: World, round_index: int) -> int:
    """Schedule value for a 1-based training round, with the optional hold
    that freezes gamma after an accuracy drop larger than gamma_hold_delta."""
    cfg = world.cfg
    scheduled = gamma_schedule(round_index - 1, world.arch.num_units, cfg.gamma_min, cfg.warmup)
    if cfg.gamma_hold_delta is None or world.gamma_current is None:
        return scheduled
    if world.metrics and world.last_accuracy is not None:
        latest = world.metrics[-1].mean_test_accuracy
        if world.last_accuracy - latest > cfg.gamma_hold_delta:
            return world.gamma_current
    return min(scheduled, world.gamma_current)


def run_round(world: World, round_index: int) -> MetricsRow:
    """One synchronous training round over sampled active clients."""
    cfg = world.cfg
    eligible = sorted(world.active_ids)
    take = min(cfg.clients_per_round, len(eligible))
    rng = np.random.default_rng(_seed(world.seeds, "round_sampling", round_index))
    participants = sorted(int(c) for c in rng.choice(eligible, size=take, replace=False))

    snapshot = {c.cluster_id: c.model for c in world.clusters}
    prev_acc = world.metrics[-1].mean_test_accuracy if world.metrics else None
    gamma = _round_gamma(world, round_index)
    full_count = world.arch.param_count
    fixed_ids = world.arch.layer_ids[: cfg.gamma_min]
    fixed_count = sum(
        int(np.prod(world.arch.shape_of(lid))) for lid in fixed_ids
    )

    genes_by_cluster: dict[int, list[LearnGene]] = {k: [] for k in range(cfg.k_clusters)}
    models_by_cluster: dict[int, list[LayeredParams]] = {k: [] for k in range(cfg.k_clusters)}

    for cid in participants:
        state = world.clients[cid]
        k = state.cluster_id
        cluster_model = snapshot[k]
        rng_b = np.random.default_rng(_seed(world.seeds, "batching", round_index, cid))
        x, y = _client_data(world, cid, "train")

        if cfg.mode == "genefl":
            local_cfg = LocalConfig(
                epochs=cfg.epochs_local,
                batch_size=cfg.batch_size,
                lambda1=cfg.lambda1,
                lambda2=cfg.lambda2,
                epsilon=cfg.epsilon,
                gamma=gamma,
                lr=cfg.lr,
                momentum=cfg.momentum,
                invert_scores=cfg.invert_scores,
            )

            def hook(rec: dict, cid=cid) -> None:
                rec.update({"round": round_index, "client_id": cid})
                world.trace.append(rec)

            new_state, gene = local_update(
                state, cluster_model, local_cfg, x, y, rng_b,
                round_index=round_index, trace_hook=hook,
            )
            world.clients[cid] = new_state
            genes_by_cluster[k].append(gene)
            world.trace[-1]["uplink_bytes"] = gene.param_count * cfg.bitwidth // 8
            world.ledger.add(round_index, cid, "up", gene.param_count)
        else:
            plain_cfg = LocalConfig(
                epochs=cfg.epochs_local,
                batch_size=cfg.batch_size,
                lambda1=0.0,
                lambda2=0.0,
                epsilon=cfg.epsilon,
                gamma=max(cfg.gamma_min, 1),
                lr=cfg.lr,
                momentum=cfg.momentum,
            )
            if cfg.mode == "fedavg_full":
                state = replace(state, model=cluster_model.copy())
            else:  # partial_fixed: overwrite only the fixed exchange layers
                merged = LayeredParams(
                    (
                        (lid, cluster_model.get(lid) if lid in fixed_ids else t)
                        for lid, t in state.model.items()
                    )
                )
                state = replace(state, model=merged)
            state = replace(state, opt_state=OptState.init(state.model, cfg.lr, cfg.momentum))
            new_state = plain_local_train(state, plain_cfg, x, y, rng_b)
            world.clients[cid] = new_state
            models_by_cluster[k].append(new_state.model)
            world.ledger.add(
                round_index, cid, "up",
                full_count if cfg.mode == "fedavg_full" else fixed_count,
            )

    for k in range(cfg.k_clusters):
        cluster = world.clusters[k]
        if cfg.mode == "genefl":
            world.clusters[k] = aggregate_learngene(genes_by_cluster[k], cluster)
        elif models_by_cluster[k]:
            if cfg.mode == "fedavg_full":
                world.clusters[k] = replace(
                    cluster, model=fedavg_aggregate(models_by_cluster[k])
                )
            else:
                mean_fixed = fedavg_aggregate(models_by_cluster[k])
                merged = LayeredParams(
                    (
                        (lid, mean_fixed.get(lid) if lid in fixed_ids else t)
                        for lid, t in cluster.model.items()
                    )
                )
                world.clusters[k] = replace(cluster, model=merged)

    down_count = full_count if cfg.mode in ("genefl", "fedavg_full") else fixed_count
    for cid in participants:
        world.ledger.add(round_index, cid, "down", down_count)

    mean_acc, per_cluster = _evaluate(world)
    mean_gamma = {
        "genefl": float(gamma),
        "fedavg_full": float(world.arch.num_units),
        "partial_fixed": float(cfg.gamma_min),
    }[cfg.mode]
    row = MetricsRow(
        round=round_index,
        mode=cfg.mode,
        mean_test_accuracy=mean_acc,
        cluster_accuracy=per_cluster,
        cumulative_uplink_bytes=world.ledger.uplink_total(),
        mean_gamma=mean_gamma,
    )
    world.metrics.append(row)
    world.last_accuracy = prev_acc
    world.gamma_current = gamma
    return row


def admit_pending(world: World, round_index: int) -> list[dict]:
    """Admit the next seeded batch of agnostic clients before a phase-2 round.

    Each admission uploads a signature and downloads the routed cluster's
    gene; the client initializes from the gene and fine-tunes locally on
    plain cross-entropy (no cluster contact yet; collaboration starts the
    following round). A shadow client with the same data and training but a
    fully random init provides the round-0 comparison baseline, so the two
    runs differ only in initialization.
    """
    cfg = world.cfg
    if not world.pending_agnostic:
        return []
    order_rng = np.random.default_rng(_seed(world.seeds, "admission_order"))
    # One global admission order, consumed in seeded batches.
    full_order = [int(c) for c in order_rng.permutation(sorted(
        c for c in world.clients if world.clients[c].is_agnostic
    ))]
    remaining = [c for c in full_order if c in world.pending_agnostic]
    batch = remaining[: cfg.admit_per_round]
    local_cfg = LocalConfig(
        epochs=cfg.epochs_local,
        batch_size=cfg.batch_size,
        lambda1=0.0,
        lambda2=0.0,
        epsilon=cfg.epsilon,
        gamma=max(cfg.gamma_min, 1),
        lr=cfg.lr,
        momentum=cfg.momentum,
    )
    records = []
    for cid in batch:
        world.pending_agnostic.remove(cid)
        sig = _client_signature(world, cid)
        world.ledger.add(round_index, cid, "up", cfg.signature_samples * cfg.signature_rank)
        gene, updated = admit_agnostic(sig, world.clusters)
        world.clusters[updated.cluster_id] = updated
        k = updated.cluster_id
        gene_params = gene.param_count if gene is not None else 0
        world.ledger.add(round_index, cid, "down", gene_params)

        model = init_agnostic(gene, world.arch, _seed(world.seeds, "client_init", cid))
        state = replace(
            world.clients[cid],
            model=model,
            previous_model=model.copy(),
            opt_state=OptState.init(model, cfg.lr, cfg.momentum),
            cluster_id=k,
        )
        x, y = _client_data(world, cid, "train")
        rng_b = np.random.default_rng(_seed(world.seeds, "batching", round_index, cid))
        state = plain_local_train(state, local_cfg, x, y, rng_b)
        world.clients[cid] = state
        tx, ty = _client_data(world, cid, "test")
        acc_gene = accuracy(state.model, tx, ty)

        # Shadow baseline, identical in everything but the initialization.
        base_model = init_params(world.arch, _seed(world.seeds, "baseline_init", cid))
        base_state = ClientState(
            client_id=cid,
            model=base_model,
            previous_model=base_model.copy(),
            opt_state=OptState.init(base_model, cfg.lr, cfg.momentum),
            is_agnostic=True,
        )
        rng_base = np.random.default_rng(_seed(world.seeds, "batching", round_index, cid))
        base_state = plain_local_train(base_state, local_cfg, x, y, rng_base)
        acc_random = accuracy(base_state.model, tx, ty)

        record = {
            "client_id": cid,
            "round": round_index,
            "cluster_id": k,
            "acc_gene_init": acc_gene,
            "acc_random_init": acc_random,
            "gene_param_count": gene_params,
            "gene_bytes": gene_params * cfg.bitwidth // 8,
        }
        records.append(record)
        world.round0_records.append(record)
        if cfg.agnostic_joins_training:
            world.active_ids.append(cid)
            world.active_ids.sort()
    return records


def _save_cluster_checkpoints(world: World, directory: Path, round_index: int | None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for cluster in world.clusters:
        meta = {
            "kind": "cluster",
            "cluster_id": cluster.cluster_id,
            "round": round_index,
            "member_count": cluster.member_count,
            "mean_signature": [float(v) for v in cluster.mean_signature],
        }
        checkpoint.save_params(
            directory / f"cluster_{cluster.cluster_id}.ckpt", cluster.model, meta=meta
        )
        if cluster.gene is not None:
            save_gene(directory / f"cluster_{cluster.cluster_id}_gene.ckpt", cluster.gene)


def run_experiment(cfg: ExperimentConfig, out_dir) -> World:
    """Full protocol: clustering, known-client rounds, admission rounds, and
    all report files (metrics.csv, ledger.csv, traces, manifests, checkpoints)."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = setup_world(cfg)

    export_partition_manifest(
        [world.clients[c].shard for c in sorted(world.clients) if not world.clients[c].is_agnostic],
        out / "partition_known.json",
        source_indices=world.known_pool_rows,
    )
    if cfg.m_agnostic:
        export_partition_manifest(
            [world.clients[c].shard for c in sorted(world.clients) if world.clients[c].is_agnostic],
            out / "partition_agnostic.json",
            source_indices=world.agnostic_pool_rows,
        )
    with open(out / "routing.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(
            {
                "assignments": {str(c): int(k) for c, k in world.routing.assignments.items()},
                "means": [[float(v) for v in m] for m in world.routing.means],
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    with open(out / "config_echo.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    mean_acc, per_cluster = _evaluate(world)
    world.metrics.append(
        MetricsRow(
            round=0,
            mode=cfg.mode,
            mean_test_accuracy=mean_acc,
            cluster_accuracy=per_cluster,
            cumulative_uplink_bytes=world.ledger.uplink_total(),
            mean_gamma=float(world.arch.num_units),
        )
    )

    checkpoints = out / "checkpoints"
    total_rounds = cfg.rounds_known + cfg.rounds_agnostic
    for round_index in range(1, cfg.rounds_known + 1):
        run_round(world, round_index)
        if cfg.save_round_checkpoints:
            _save_cluster_checkpoints(world, checkpoints / f"round_{round_index:04d}", round_index)
    for round_index in range(cfg.rounds_known + 1, total_rounds + 1):
        admit_pending(world, round_index)
        run_round(world, round_index)
        if cfg.save_round_checkpoints:
            _save_cluster_checkpoints(world, checkpoints / f"round_{round_index:04d}", round_index)

    write_metrics_csv(world.metrics, cfg.k_clusters, out / "metrics.csv")
    world.ledger.to_csv(out / "ledger.csv")
    with open(out / "trace.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for rec in world.trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "agnostic_round0.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(
            "client_id,round,cluster_id,acc_gene_init,acc_random_init,"
            "gene_param_count,gene_bytes\n"
        )
        for r in world.round0_records:
            f.write(
                f"{r['client_id']},{r['round']},{r['cluster_id']},"
                f"{r['acc_gene_init']!r},{r['acc_random_init']!r},"
                f"{r['gene_param_count']},{r['gene_bytes']}\n"
            )

    final_dir = checkpoints / "final"
    _save_cluster_checkpoints(world, final_dir, None)
    for cid in sorted(world.clients):
        state = world.clients[cid]
        checkpoint.save_params(
            final_dir / f"client_{cid}.ckpt",
            state.model,
            meta={"kind": "client", "client_id": cid, "cluster_id": state.cluster_id},
        )
    return world
