"""Round orchestration.

Builds the dataset and client shards, runs the per-round loop (benign
clients train on the combined loss, malicious clients run the configured
attack), aggregates prototype uploads at a strict barrier, and evaluates
clean accuracy and attack success on benign clients.

Determinism contract: every client owns a derived PRNG stream, malicious
clients execute serially in client_id order (they share trigger state),
and aggregation consumes uploads in client_id order, so metrics are a pure
function of the config regardless of worker count.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attack, data, diffnet, proto
from .config import ExperimentConfig
from .errors import DivergenceError, ProtofedError
from .rng import Rng, derive_seed

# stream tags keep setup, partitioning, and per-client draws independent
TAG_DATA = 0x44415441
TAG_PARTITION = 0x50415254
TAG_INIT = 0x494E4954
TAG_CLIENT_BASE = 0x434C4E5400


@dataclass
class ClientState:
    client_id: int
    role: str  # benign | malicious
    model: diffnet.Model
    data: data.ClientData
    rng: Rng
    pretrained: bool = False  # malicious only: trigger warmup done


@dataclass
class AdversaryState:
    triggers: dict  # target label -> Trigger, shared by all malicious clients


@dataclass
class RoundMetrics:
    round: int
    acc_mean: float
    asr_mean: float | None
    proto_drift: float | None
    per_client: list  # (client_id, acc, asr or None), benign clients only
    wall_time: float


@dataclass
class RunResult:
    metrics: list
    final_bank: proto.PrototypeBank
    triggers: dict | None
    bank_snapshots: list = field(default_factory=list)  # (round, bank) per eval


@dataclass
class _Runtime:
    cfg: ExperimentConfig
    adversary: AdversaryState | None
    target_map: object
    num_classes: int
    input_dim: int
    image_shape: tuple | None
    num_malicious: int
    executor: object = None


def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.dataset
    if d.kind == "blobs":
        rng = Rng(derive_seed(cfg.seed, TAG_DATA))
        return data.make_blobs(d.num_classes, d.per_class, d.dim, rng,
                               d.separation, d.spread)
    if d.kind == "digits":
        return data.load_digits_dataset(d.cache_dir)
    return data.load_idx(d.images_path, d.labels_path)


def num_malicious_clients(cfg: ExperimentConfig) -> int:
    if cfg.attack.kind == "none":
        return 0
    m = data.round_half_up(cfg.attack.attack_rate * cfg.partition.num_clients)
    return min(m, cfg.partition.num_clients)


def setup_clients(cfg: ExperimentConfig, dataset: data.Dataset) -> list:
    """Partition the data and hand every client a copy of one shared model."""
    part_rng = Rng(derive_seed(cfg.seed, TAG_PARTITION))
    shards = data.partition_pq(dataset, cfg.partition.num_clients, cfg.partition.p,
                               cfg.partition.q, cfg.partition.std, part_rng,
                               cfg.partition.test_fraction)
    init_rng = Rng(derive_seed(cfg.seed, TAG_INIT))
    base = diffnet.init_model(dataset.x.shape[1], cfg.model.hidden_sizes,
                              dataset.num_classes, init_rng)
    num_mal = num_malicious_clients(cfg)
    states = []
    for shard in shards:
        role = "malicious" if shard.client_id < num_mal else "benign"
        states.append(ClientState(
            client_id=shard.client_id,
            role=role,
            model=diffnet.clone_model(base),
            data=shard,
            rng=Rng(derive_seed(cfg.seed, TAG_CLIENT_BASE + shard.client_id)),
        ))
    return states


def _make_runtime(cfg: ExperimentConfig, dataset: data.Dataset, states: list) -> _Runtime:
    num_mal = sum(1 for s in states if s.role == "malicious")
    adversary = None
    if cfg.attack.kind == "bapfl" and num_mal > 0:
        spaces = [set(s.data.label_space) for s in states if s.role == "benign"]
        targets = attack.build_target_set(spaces)
        adversary = AdversaryState(triggers={
            t: attack.new_trigger(t, dataset.x.shape[1]) for t in targets
        })
    target_map = attack.make_target_map(cfg.attack.target_map, dataset.num_classes,
                                        cfg.attack.fixed_target)
    return _Runtime(
        cfg=cfg,
        adversary=adversary,
        target_map=target_map,
        num_classes=dataset.num_classes,
        input_dim=dataset.x.shape[1],
        image_shape=dataset.image_shape,
        num_malicious=num_mal,
    )


def resolve_eval_triggers(rt: _Runtime) -> dict:
    """Triggers the metric pass applies: the attack's own when one is active,
    otherwise a fixed probe patch per possible target."""
    ac = rt.cfg.attack
    if rt.adversary is not None:
        return rt.adversary.triggers
    if ac.kind in ("static_trigger", "dba_fragments", "proto_scale") and rt.num_malicious > 0:
        return {ac.fixed_target: attack.patch_trigger(
            ac.fixed_target, rt.input_dim, rt.image_shape, ac.patch_size,
            ac.patch_placement)}
    return {t: attack.patch_trigger(t, rt.input_dim, rt.image_shape, ac.patch_size,
                                    ac.patch_placement)
            for t in range(rt.num_classes)}


def _train_benign(state: ClientState, bank: proto.PrototypeBank,
                  cfg: ExperimentConfig) -> list:
    x, y = state.data.train_x, state.data.train_y
    n = len(y)
    ids = list(range(n))
    for _ in range(cfg.local_epochs):
        state.rng.shuffle(ids)
        for start in range(0, n, cfg.batch_size):
            b = np.array(ids[start:start + cfg.batch_size], dtype=np.int64)
            loss, grads = proto.combined_loss_and_grads(
                state.model, x[b], y[b], bank, cfg.lam)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss")
            diffnet.sgd_step(state.model, grads, cfg.lr)
    return proto.local_prototypes(state.model, x, y)


def _resolve_k(ac, n_eligible: int) -> int:
    if ac.k_count is not None:
        return min(ac.k_count, n_eligible)
    fraction = ac.k_fraction if ac.k_fraction is not None else ac.alpha
    return max(1, min(n_eligible, math.ceil(fraction * n_eligible)))


def _client_triggers(state: ClientState, rt: _Runtime) -> dict:
    ac = rt.cfg.attack
    if ac.kind == "bapfl":
        return rt.adversary.triggers
    if ac.kind == "dba_fragments":
        return {ac.fixed_target: attack.fragment_patch_trigger(
            ac.fixed_target, rt.input_dim, rt.image_shape,
            fragment=state.client_id, num_fragments=rt.num_malicious,
            patch_size=ac.patch_size, placement=ac.patch_placement)}
    return {ac.fixed_target: attack.patch_trigger(
        ac.fixed_target, rt.input_dim, rt.image_shape, ac.patch_size,
        ac.patch_placement)}


def _train_malicious(state: ClientState, bank: proto.PrototypeBank,
                     rt: _Runtime) -> list:
    cfg = rt.cfg
    ac = cfg.attack
    x, y = state.data.train_x, state.data.train_y
    n = len(y)
    triggers = _client_triggers(state, rt)
    tm = rt.target_map
    if ac.kind == "bapfl":
        trigs = list(triggers.values())
        if not state.pretrained and ac.trigger_pretrain_steps > 0:
            attack.train_triggers(state.model, bank, trigs, x,
                                  ac.trigger_pretrain_steps, ac.lr_trigger,
                                  cfg.batch_size, state.rng,
                                  ac.lam1, ac.lam2, ac.lam3)
        state.pretrained = True
        steps = ac.trigger_steps_per_round or math.ceil(n / cfg.batch_size)
        attack.train_triggers(state.model, bank, trigs, x, steps, ac.lr_trigger,
                              cfg.batch_size, state.rng, ac.lam1, ac.lam2, ac.lam3)
    eligible = [i for i in range(n)
                if tm(int(y[i])) != int(y[i]) and tm(int(y[i])) in triggers]
    selected = []
    if eligible and ac.alpha > 0:
        k = _resolve_k(ac, len(eligible))
        if ac.kind == "bapfl" or ac.use_pps:
            xt = np.array([attack.apply_trigger(triggers[tm(int(y[i]))], x[i])
                           for i in eligible])
            values = attack.attack_values_batch(state.model, xt, y[eligible], bank)
            selected = sorted(attack.select_top_k(list(zip(eligible, values)), k))
        else:
            selected = sorted(state.rng.choose(eligible, k))
    alpha = ac.alpha if selected else 0.0
    ids = list(range(n))
    for _ in range(cfg.local_epochs):
        state.rng.shuffle(ids)
        for start in range(0, n, cfg.batch_size):
            b = ids[start:start + cfg.batch_size]
            if alpha > 0.0:
                pb = state.rng.choose(selected, min(cfg.batch_size, len(selected)))
                rows = np.array(b + pb, dtype=np.int64)
                sel_pos = list(range(len(b), len(rows)))
            else:
                rows = np.array(b, dtype=np.int64)
                sel_pos = []
            loss, grads = attack.backdoor_loss_and_grads(
                state.model, x[rows], y[rows], triggers, alpha, tm, sel_pos)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss")
            diffnet.sgd_step(state.model, grads, cfg.lr)
    if ac.kind == "proto_scale":
        return attack.scale_prototypes(
            proto.local_prototypes(state.model, x, y), ac.scale_factor)
    honest = proto.local_prototypes(state.model, x, y)
    if selected and (ac.kind == "bapfl" or ac.use_pps):
        flipped = attack.poisoned_prototypes(state.model, x, y, selected, triggers,
                                             tm, bank, ac.flip_strategy)
        if ac.count_scale != 1.0:
            flipped = [proto.ClassPrototype(
                p.class_id, p.vector,
                max(1, data.round_half_up(p.count * ac.count_scale)))
                for p in flipped]
        covered = {p.class_id for p in flipped}
        return flipped + [p for p in honest if p.class_id not in covered]
    return honest


def _with_client(exc: ProtofedError, client_id: int) -> ProtofedError:
    return type(exc)("client %d: %s" % (client_id, exc))


def run_round(states: list, bank: proto.PrototypeBank, rt: _Runtime) -> tuple:
    """One federated round; returns (states, uploads in client_id order)."""
    benign = [s for s in states if s.role == "benign"]
    malicious = [s for s in states if s.role == "malicious"]
    uploads = []
    if rt.executor is not None and len(benign) > 1:
        futures = [(s.client_id, rt.executor.submit(_train_benign, s, bank, rt.cfg))
                   for s in benign]
        for client_id, fut in futures:
            try:
                uploads.append((client_id, fut.result()))
            except ProtofedError as exc:
                raise _with_client(exc, client_id) from exc
    else:
        for s in benign:
            try:
                uploads.append((s.client_id, _train_benign(s, bank, rt.cfg)))
            except ProtofedError as exc:
                raise _with_client(exc, s.client_id) from exc
    for s in sorted(malicious, key=lambda s: s.client_id):
        try:
            uploads.append((s.client_id, _train_malicious(s, bank, rt)))
        except ProtofedError as exc:
            raise _with_client(exc, s.client_id) from exc
    uploads.sort(key=lambda u: u[0])
    return states, uploads


def eval_client(state: ClientState, bank: proto.PrototypeBank, eval_triggers: dict,
                target_map, rule: str = "head") -> tuple:
    """(acc, asr) percentages on the client's test set.

    asr covers samples whose mapped target differs from their label and has
    a trigger; returns None for asr when no sample qualifies.
    """
    tx, ty = state.data.test_x, state.data.test_y

    def classify(batch_x):
        if rule == "prototype":
            emb = diffnet.forward_batch(state.model, batch_x).embedding
            return np.array([proto.nearest_prototype_classify(emb[i], bank)
                             for i in range(batch_x.shape[0])], dtype=np.int64)
        return diffnet.predict_batch(state.model, batch_x)

    preds = classify(tx)
    acc = 100.0 * float((preds == ty).mean())
    groups = {}
    for i, label in enumerate(ty):
        t = target_map(int(label))
        if t != int(label) and t in eval_triggers:
            groups.setdefault(t, []).append(i)
    hits = 0
    total = 0
    for t in sorted(groups):
        idx = np.array(groups[t], dtype=np.int64)
        xt = attack.apply_trigger(eval_triggers[t], tx[idx])
        hits += int((classify(xt) == t).sum())
        total += len(idx)
    asr = 100.0 * hits / total if total else None
    return acc, asr


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Full training run; raises DivergenceError on non-finite values."""
    dataset = build_dataset(cfg)
    states = setup_clients(cfg, dataset)
    rt = _make_runtime(cfg, dataset, states)
    eval_triggers = resolve_eval_triggers(rt)
    bank = proto.PrototypeBank()
    metrics = []
    snapshots = []
    executor = None
    try:
        if cfg.workers > 1:
            executor = ThreadPoolExecutor(max_workers=cfg.workers)
            rt.executor = executor
        for round_idx in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            try:
                states, uploads = run_round(states, bank, rt)
            except ProtofedError as exc:
                raise type(exc)("round %d: %s" % (round_idx, exc)) from exc
            new_bank = proto.merge_banks(bank, proto.aggregate(uploads))
            drift = proto.proto_drift(bank.as_list(), new_bank.as_list())
            bank = new_bank
            if round_idx % cfg.eval_every == 0 or round_idx == cfg.rounds:
                per_client = []
                for s in states:
                    if s.role != "benign":
                        continue
                    acc, asr = eval_client(s, bank, eval_triggers, rt.target_map,
                                           cfg.eval_rule)
                    per_client.append((s.client_id, acc, asr))
                accs = [a for _, a, _ in per_client]
                asrs = [r for _, _, r in per_client if r is not None]
                metrics.append(RoundMetrics(
                    round=round_idx,
                    acc_mean=sum(accs) / len(accs) if accs else 0.0,
                    asr_mean=sum(asrs) / len(asrs) if asrs else None,
                    proto_drift=drift,
                    per_client=per_client,
                    wall_time=time.perf_counter() - started,
                ))
                snapshots.append((round_idx, bank))
    finally:
        if executor is not None:
            executor.shutdown()
    triggers = rt.adversary.triggers if rt.adversary is not None else None
    return RunResult(metrics, bank, triggers, snapshots)
