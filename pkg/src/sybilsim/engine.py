"""Synchronous round engine: receive, aggregate, train, gossip, repeat.

Messages composed in round T are delivered at T+1, losslessly unless a
downtime schedule takes a node offline.  All randomness is drawn from
streams derived only from (run seed, node id, round, purpose), so results
are identical for any worker count.

Trained models are rounded to multiples of 2^-30 before entering a
history.  On that grid every history sum and difference is exact in IEEE
double precision, which makes remote model reconstruction bit-identical
to the sender's record; the rounding is about 1e-9 per coordinate, far
below any learning-rate step.
"""

from __future__ import annotations

import json
import math
import os
import struct
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .aggregation import (
    ContributionSet,
    apply_weights,
    coordinate_median,
    fedavg,
    foolsgold_scores,
    krum_select,
    multi_krum,
    sybilwall_weights,
    weighted_average,
)
from .config import SimulationConfig
from .data import (
    Backdoor,
    LabeledDataset,
    LabelFlip,
    PartitionSpec,
    attack_score,
    corner_block_pattern,
    dirichlet_partition,
    load_idx,
    poison_dataset,
    synth_blobs,
)
from .gossip import (
    HistoryDB,
    RoundMessage,
    Signer,
    Verifier,
    compose_message,
    filter_db,
    get_scheme,
    receive_message,
    select_gossip,
)
from .numerics import Architecture, Model, TrainConfig, evaluate_accuracy, init_model, train_sgd
from .topology import SSPPlan, Topology, build_attack_network

HISTORY_GRID = 2.0 ** 30

# seed-stream domains
_INIT, _TRAIN, _GOSSIP, _PARTITION, _DATA = 0, 1, 2, 3, 4

CSV_HEADER = "round,mean_accuracy,mean_attack_score"


def _quantize(vec: np.ndarray) -> np.ndarray:
    return np.round(vec * HISTORY_GRID) / HISTORY_GRID


def _stream(seed: int, domain: int, a: int = 0, b: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, domain, a, b]))


def _train_seed(seed: int, domain: int, a: int, b: int) -> int:
    return int(
        np.random.SeedSequence([seed, domain, a, b]).generate_state(1, np.uint64)[0]
    )


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return f"{x:.12g}"


@dataclass
class RoundMetrics:
    """Per-round summary over honest nodes, measured right after aggregation."""

    round: int
    mean_accuracy: float
    mean_attack_score: float
    degenerate_nodes: int = 0

    def csv_line(self) -> str:
        return f"{self.round},{_fmt(self.mean_accuracy)},{_fmt(self.mean_attack_score)}"


@dataclass
class RunResult:
    metrics: List[RoundMetrics]
    config: SimulationConfig
    topology: Topology
    plan: Optional[SSPPlan]
    final_models: Dict[int, np.ndarray]
    final_histories: Dict[int, np.ndarray]
    activity: Dict[int, Dict[int, str]]
    message_counts: List[int] = field(default_factory=list)
    trained_trace: Optional[Dict[Tuple[int, int], np.ndarray]] = None
    inferred_trace: Optional[List[Tuple[int, int, int, np.ndarray]]] = None
    direct_counts: Optional[Dict[Tuple[int, int], int]] = None

    def metrics_csv(self) -> str:
        lines = [CSV_HEADER] + [m.csv_line() for m in self.metrics]
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "package_version": __version__,
            "git_describe": _git_describe(),
            "sybil_count": len(self.topology.sybils),
            "scenario": None if self.plan is None else self.plan.scenario,
        }

    def write_outputs(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            fh.write(self.metrics_csv())
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


@dataclass
class _NodeState:
    id: int
    model: np.ndarray
    history: np.ndarray
    db: HistoryDB
    prev_known: Dict[int, Tuple[int, np.ndarray]]
    dataset: LabeledDataset
    signer: Signer
    neighbors: List[int]


@dataclass
class _AdversaryState:
    sybil_ids: List[int]
    designated: int
    model: np.ndarray
    history: np.ndarray
    dataset: LabeledDataset  # poisoned
    per_sybil: Dict[int, _NodeState] = field(default_factory=dict)


@dataclass
class _StepResult:
    node: int
    model: np.ndarray
    history: np.ndarray
    outbox: Dict[int, RoundMessage]
    inferred: Dict[int, np.ndarray]
    accuracy: Optional[float]
    attack: Optional[float]
    degenerate: bool
    direct_count: int


def _build_datasets(cfg: SimulationConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.kind == "blobs":
        # one draw for both splits so they share the same class means;
        # synth_blobs lays samples out class by class
        block = d.per_class + d.test_per_class
        full = synth_blobs(
            classes=d.classes,
            per_class=block,
            dim=d.dim,
            spread=d.spread,
            seed=_train_seed(cfg.seed, _DATA, 0, 0),
        )
        train_idx, test_idx = [], []
        for c in range(d.classes):
            start = c * block
            train_idx.extend(range(start, start + d.per_class))
            test_idx.extend(range(start + d.per_class, start + block))
        return full.subset(train_idx), full.subset(test_idx)
    train = load_idx(d.images_path, d.labels_path)
    test = load_idx(d.test_images_path, d.test_labels_path)
    return train, test


def _build_attack_spec(cfg: SimulationConfig, dim: int):
    a = cfg.attack
    if a is None:
        return None
    if a.kind == "label_flip":
        return LabelFlip(a.source, a.target)
    if cfg.data.kind == "idx":
        width = int(round(math.sqrt(dim)))
        pattern = corner_block_pattern(width, size=a.pattern_size, value=a.pattern_value)
    else:
        pattern = tuple(
            (i, a.pattern_value) for i in range(min(a.pattern_size, dim))
        )
    return Backdoor(pattern, a.target)


def _adversary_draw(
    train_set: LabeledDataset, spec, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Pick the adversary's sample indices from the global training pool.

    For label flips, up to half the draw comes from the two swapped
    classes; the remainder (and the whole draw for backdoors) is uniform
    over what is left.
    """
    n = len(train_set)
    chosen = np.empty(0, dtype=np.intp)
    if isinstance(spec, LabelFlip):
        segment = np.flatnonzero(
            (train_set.labels == spec.t1) | (train_set.labels == spec.t2)
        )
        want = min(len(segment), size - size // 2)
        if want > 0:
            chosen = np.sort(rng.choice(segment, size=want, replace=False))
    rest = np.setdiff1d(np.arange(n), chosen, assume_unique=False)
    fill = min(len(rest), size - len(chosen))
    if fill > 0:
        extra = rng.choice(rest, size=fill, replace=False)
        chosen = np.sort(np.concatenate([chosen, extra]))
    return chosen


def _receive_all(
    state: _NodeState,
    inbox: List[RoundMessage],
    verifier: Verifier,
) -> Dict[int, np.ndarray]:
    """Process a full inbox in sender order; returns inferred trained models."""
    inferred: Dict[int, np.ndarray] = {}
    for msg in sorted(inbox, key=lambda m: m.own.origin):
        sender = msg.own.origin
        res = receive_message(
            msg, state.db, state.prev_known.get(sender), verifier, self_id=state.id
        )
        if res.trained_model is not None:
            inferred[sender] = res.trained_model
        state.prev_known[sender] = (res.round, res.history)
    return inferred


def _aggregate(
    cfg: SimulationConfig,
    state: _NodeState,
    inferred: Dict[int, np.ndarray],
    sizes: Dict[int, int],
) -> Tuple[np.ndarray, bool]:
    """One node's aggregation under the configured rule.

    With no neighbor model available yet (bootstrap rounds, isolation) every
    rule degrades to keeping the own model.  Returns (vector, degenerate
    flag) where the flag marks a similarity score computed without a
    baseline (single foreign history)."""
    direct_ids = sorted(inferred)
    if not direct_ids:
        return state.model.copy(), False
    name = cfg.aggregator
    own_models = [state.model] + [inferred[j] for j in direct_ids]
    if name == "fedavg":
        counts = [max(1, sizes[state.id])] + [max(1, sizes[j]) for j in direct_ids]
        return fedavg(list(zip(own_models, counts))), False
    if name == "median":
        return coordinate_median(own_models), False
    if name in ("krum", "multikrum"):
        n = len(own_models)
        f = cfg.rule_params.krum_f
        if f is None:
            f = max(0, (n - 3) // 2)
        if n < f + 3:
            return np.stack(own_models).mean(axis=0), False
        if name == "krum":
            return krum_select(own_models, f), False
        m = cfg.rule_params.multikrum_m
        if m is None:
            m = math.ceil(n / 2)
        m = min(max(1, m), n)
        return multi_krum(own_models, f, m), False
    if name == "foolsgold":
        histories = [(state.id, state.history)] + [
            (j, state.db.records[j].history) for j in direct_ids
        ]
        scores = foolsgold_scores(
            histories,
            kappa=cfg.rule_params.kappa,
            logit_eps=cfg.rule_params.logit_eps,
        )
        total = sum(scores.values())
        if total <= 0:
            return state.model.copy(), False
        weights = {i: s / total for i, s in scores.items()}
        c = ContributionSet(
            own=(state.id, state.model, state.history),
            direct=tuple(
                (j, inferred[j], state.db.records[j].history) for j in direct_ids
            ),
        )
        return weighted_average(c, weights), False
    # the sybilwall family
    enhancement = None
    if "+" in name:
        enhancement = name.split("+", 1)[1]
    direct = tuple(
        (j, inferred[j], state.db.records[j].history) for j in direct_ids
    )
    indirect = tuple(
        (p, rec.history)
        for p, rec in sorted(state.db.records.items())
        if p != state.id and p not in inferred
    )
    c = ContributionSet(
        own=(state.id, state.model, state.history), direct=direct, indirect=indirect
    )
    weights, degenerate = sybilwall_weights(
        c, kappa=cfg.rule_params.kappa, logit_eps=cfg.rule_params.logit_eps
    )
    return apply_weights(c, weights, enhancement), degenerate


def _compose_outbox(
    state: _NodeState, history: np.ndarray, rnd: int, lam: float, seed: int
) -> Dict[int, RoundMessage]:
    rng = _stream(seed, _GOSSIP, state.id, rnd)
    outbox = {}
    for j in state.neighbors:
        selected = select_gossip(filter_db(state.db, state.id, j), lam, rng)
        outbox[j] = compose_message(history, rnd, selected, state.signer)
    return outbox


def run_simulation(
    cfg: SimulationConfig, workers: int = 1, trace: bool = False
) -> RunResult:
    """Execute a full configured run; deterministic for any ``workers``."""
    cfg.validate()
    seed = cfg.seed
    phi = cfg.attack.phi if cfg.attack is not None else None
    topo_seed = cfg.topology.seed if cfg.topology.seed is not None else seed
    honest_g, plan, full_g = build_attack_network(
        cfg.honest_nodes, cfg.topology.radius, cfg.degree_bound, phi, topo_seed
    )
    train_set, test_set = _build_datasets(cfg)
    arch = Architecture(input_dim=train_set.dim, n_classes=train_set.n_classes)
    spec = _build_attack_spec(cfg, train_set.dim)

    parts = dirichlet_partition(
        train_set,
        PartitionSpec(
            cfg.honest_nodes, cfg.data.alpha, _train_seed(seed, _PARTITION, 0, 0)
        ),
    )
    poisoned = None
    if spec is not None:
        # The adversary owns an average-node-sized sample of the training
        # distribution, drawn independently of the honest partition so that
        # attack strength does not swing with one Dirichlet share.  A
        # label-flip attacker curates half of it from the two swapped
        # classes: that is where its poison has to out-vote honest data.
        adv_rng = _stream(seed, _PARTITION, 0, 1)
        adv_size = max(1, round(len(train_set) / cfg.honest_nodes))
        picked = _adversary_draw(train_set, spec, adv_size, adv_rng)
        poisoned = poison_dataset(train_set.subset(picked), spec)

    scheme = get_scheme(cfg.gossip.scheme)
    all_ids = sorted(full_g.nodes)
    keypairs = {
        i: scheme.keypair(struct.pack("<qq", seed, i)) for i in all_ids
    }
    verifier = Verifier(scheme, {i: keypairs[i][1] for i in all_ids})

    init = init_model(arch, _train_seed(seed, _INIT, 0, 0))
    adjacency = full_g.adjacency()
    dim = init.params.size

    def fresh_state(i: int, dataset: LabeledDataset) -> _NodeState:
        return _NodeState(
            id=i,
            model=init.params.copy(),
            history=np.zeros(dim),
            db=HistoryDB(capacity=cfg.gossip.capacity),
            prev_known={},
            dataset=dataset,
            signer=Signer(scheme, i, keypairs[i][0]),
            neighbors=adjacency[i],
        )

    honest_ids = sorted(full_g.honest)
    nodes = {i: fresh_state(i, parts[i]) for i in honest_ids}
    sizes = {i: len(parts[i]) for i in honest_ids}

    adversary = None
    if plan is not None:
        sybil_ids = sorted(full_g.sybils)
        adversary = _AdversaryState(
            sybil_ids=sybil_ids,
            designated=sybil_ids[0],
            model=init.params.copy(),
            history=np.zeros(dim),
            dataset=poisoned,
            per_sybil={s: fresh_state(s, poisoned) for s in sybil_ids},
        )
        for s in sybil_ids:
            sizes[s] = len(poisoned)

    offline: Dict[int, set] = {i: set() for i in honest_ids}
    for entry in cfg.downtime:
        offline[entry.node].update(range(entry.start, entry.start + entry.length))

    activity: Dict[int, Dict[int, str]] = {i: {} for i in honest_ids}
    trained_trace: Dict[Tuple[int, int], np.ndarray] = {}
    inferred_trace: List[Tuple[int, int, int, np.ndarray]] = []
    direct_counts: Dict[Tuple[int, int], int] = {}

    inboxes: Dict[int, List[RoundMessage]] = {i: [] for i in all_ids}
    metrics: List[RoundMetrics] = []
    message_counts: List[int] = []

    adversary_epochs = (
        cfg.adversary_epochs
        if cfg.adversary_epochs is not None
        else cfg.train.local_epochs
    )

    def honest_step(i: int, rnd: int) -> Optional[_StepResult]:
        state = nodes[i]
        if rnd in offline[i]:
            return None
        inferred = _receive_all(state, inboxes[i], verifier)
        if rnd - 1 in offline[i]:
            # recovery round: collect only, resume fully next round
            return _StepResult(
                node=i,
                model=state.model,
                history=state.history,
                outbox={},
                inferred=inferred,
                accuracy=None,
                attack=None,
                degenerate=False,
                direct_count=-1,
            )
        aggregated, degenerate = _aggregate(cfg, state, inferred, sizes)
        agg_model = Model(aggregated, arch)
        accuracy = evaluate_accuracy(agg_model, test_set)
        attack = attack_score(agg_model, test_set, spec) if spec is not None else None
        if len(state.dataset) > 0:
            tcfg = TrainConfig(
                learning_rate=cfg.train.learning_rate,
                local_epochs=cfg.train.local_epochs,
                batch_size=cfg.train.batch_size,
                seed=_train_seed(seed, _TRAIN, i, rnd),
            )
            trained = train_sgd(agg_model, state.dataset, tcfg).params
        else:
            trained = aggregated
        w = _quantize(trained)
        history = state.history + w
        outbox = _compose_outbox(state, history, rnd, cfg.gossip.lam, seed)
        return _StepResult(
            node=i,
            model=w,
            history=history,
            outbox=outbox,
            inferred=inferred,
            accuracy=accuracy,
            attack=attack,
            degenerate=degenerate,
            direct_count=len(inferred),
        )

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(cfg.rounds):
            if pool is None:
                honest_results = [honest_step(i, rnd) for i in honest_ids]
            else:
                honest_results = list(
                    pool.map(lambda i: honest_step(i, rnd), honest_ids)
                )

            sybil_inferred: Dict[int, Dict[int, np.ndarray]] = {}
            if adversary is not None:
                for s in adversary.sybil_ids:
                    sybil_inferred[s] = _receive_all(
                        adversary.per_sybil[s], inboxes[s], verifier
                    )

            # apply honest results in id order
            accs, atks, degenerates = [], [], 0
            for i, result in zip(honest_ids, honest_results):
                if result is None:
                    activity[i][rnd] = "offline"
                    accs.append(evaluate_accuracy(Model(nodes[i].model, arch), test_set))
                    if spec is not None:
                        atks.append(
                            attack_score(Model(nodes[i].model, arch), test_set, spec)
                        )
                    continue
                state = nodes[i]
                if result.direct_count < 0:
                    activity[i][rnd] = "recovery"
                    accs.append(evaluate_accuracy(Model(state.model, arch), test_set))
                    if spec is not None:
                        atks.append(
                            attack_score(Model(state.model, arch), test_set, spec)
                        )
                else:
                    activity[i][rnd] = "active"
                    state.model = result.model
                    state.history = result.history
                    accs.append(result.accuracy)
                    if result.attack is not None:
                        atks.append(result.attack)
                    degenerates += result.degenerate
                    if trace:
                        trained_trace[(i, rnd)] = result.model.copy()
                        direct_counts[(i, rnd)] = result.direct_count
                if trace:
                    for sender, vec in sorted(result.inferred.items()):
                        inferred_trace.append(
                            (i, sender, state.prev_known[sender][0], vec.copy())
                        )

            # adversary: aggregate at one designated Sybil, train once, share
            sybil_outboxes: Dict[int, Dict[int, RoundMessage]] = {}
            if adversary is not None:
                des = adversary.designated
                inferred = sybil_inferred[des]
                pairs = [(adversary.model, max(1, sizes[des]))]
                pairs += [
                    (inferred[j], max(1, sizes[j])) for j in sorted(inferred)
                ]
                intermediary = fedavg(pairs)
                if len(adversary.dataset) > 0:
                    tcfg = TrainConfig(
                        learning_rate=cfg.train.learning_rate,
                        local_epochs=adversary_epochs,
                        batch_size=cfg.train.batch_size,
                        seed=_train_seed(seed, _TRAIN, des, rnd),
                    )
                    trained = train_sgd(
                        Model(intermediary, arch), adversary.dataset, tcfg
                    ).params
                else:
                    trained = intermediary
                w = _quantize(trained)
                adversary.model = w
                adversary.history = adversary.history + w
                for s in adversary.sybil_ids:
                    state = adversary.per_sybil[s]
                    state.model = w
                    state.history = adversary.history
                    if trace:
                        trained_trace[(s, rnd)] = w.copy()
                        for sender, vec in sorted(sybil_inferred[s].items()):
                            inferred_trace.append(
                                (s, sender, state.prev_known[sender][0], vec.copy())
                            )
                    if cfg.gossip.sybils_gossip:
                        sybil_outboxes[s] = _compose_outbox(
                            state, adversary.history, rnd, cfg.gossip.lam, seed
                        )
                    else:
                        sybil_outboxes[s] = {
                            j: compose_message(
                                adversary.history, rnd, None, state.signer
                            )
                            for j in state.neighbors
                        }

            # deliver for next round, dropping mail to offline nodes
            composed = sum(
                len(r.outbox) for r in honest_results if r is not None
            ) + sum(len(o) for o in sybil_outboxes.values())
            message_counts.append(composed)
            new_inboxes: Dict[int, List[RoundMessage]] = {i: [] for i in all_ids}
            for i, result in zip(honest_ids, honest_results):
                if result is None:
                    continue
                for j, msg in result.outbox.items():
                    if j in offline and rnd + 1 in offline[j]:
                        continue
                    new_inboxes[j].append(msg)
            for s, outbox in sybil_outboxes.items():
                for j, msg in outbox.items():
                    if j in offline and rnd + 1 in offline[j]:
                        continue
                    new_inboxes[j].append(msg)
            inboxes = new_inboxes

            mean_attack = float(np.mean(atks)) if atks else float("nan")
            metrics.append(
                RoundMetrics(
                    round=rnd,
                    mean_accuracy=float(np.mean(accs)),
                    mean_attack_score=mean_attack,
                    degenerate_nodes=degenerates,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    final_models = {i: nodes[i].model.copy() for i in honest_ids}
    final_histories = {i: nodes[i].history.copy() for i in honest_ids}
    return RunResult(
        metrics=metrics,
        config=cfg,
        topology=full_g,
        plan=plan,
        final_models=final_models,
        final_histories=final_histories,
        activity=activity,
        message_counts=message_counts,
        trained_trace=trained_trace if trace else None,
        inferred_trace=inferred_trace if trace else None,
        direct_counts=direct_counts if trace else None,
    )
