"""Adversarial machinery.

Triggers are additive patches in logistic parameterization: realized
pattern delta = sigmoid(delta_params) and mask M = sigmoid(mask_logits),
applied as T(x) = (1 - M) * x + M * delta. The module covers trigger
optimization, attack-value sample selection, prototype flipping, the
mixed clean/backdoor training loss, and the fixed-patch baselines.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffnet
from .errors import AttackConfigError, DivergenceError, InputError
from .proto import ZERO_NORM_EPS, ClassPrototype, PrototypeBank
from .rng import Rng

log = logging.getLogger("protofed.attack")

PATCH_LOGIT = 40.0  # sigmoid(40) is 1 within 4e-18, so patches act as hard masks


@dataclass
class Trigger:
    target_label: int
    delta_params: np.ndarray  # unconstrained; realized pattern is sigmoid
    mask_logits: np.ndarray  # unconstrained; realized mask is sigmoid

    def realized(self) -> tuple:
        """(delta, mask) in value space."""
        return sigmoid(self.delta_params), sigmoid(self.mask_logits)

    def to_json(self) -> str:
        return json.dumps({
            "target_label": int(self.target_label),
            "delta_params": [float(v) for v in self.delta_params],
            "mask_logits": [float(v) for v in self.mask_logits],
        }, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "Trigger":
        rec = json.loads(text)
        return Trigger(
            int(rec["target_label"]),
            np.array(rec["delta_params"], dtype=np.float64),
            np.array(rec["mask_logits"], dtype=np.float64),
        )


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def new_trigger(target_label: int, input_dim: int, mask_init: float = -2.0,
                delta_init: float = 0.0) -> Trigger:
    """Fresh optimizable trigger: faint mask, mid-gray pattern."""
    return Trigger(
        target_label,
        np.full(input_dim, delta_init, dtype=np.float64),
        np.full(input_dim, mask_init, dtype=np.float64),
    )


def patch_indices(input_dim: int, image_shape, patch_size: int = 3,
                  placement: str = "corner") -> list:
    """Flat indices of a patch_size x patch_size block, top-left or centered."""
    if placement not in ("corner", "center"):
        raise InputError("placement must be 'corner' or 'center', got %r" % placement)
    if image_shape is not None:
        rows, cols = image_shape
        size_r = min(patch_size, rows)
        size_c = min(patch_size, cols)
        r0 = (rows - size_r) // 2 if placement == "center" else 0
        c0 = (cols - size_c) // 2 if placement == "center" else 0
        return [(r0 + r) * cols + (c0 + c)
                for r in range(size_r) for c in range(size_c)]
    count = min(patch_size * patch_size, input_dim)
    start = (input_dim - count) // 2 if placement == "center" else 0
    return list(range(start, start + count))


def patch_trigger(target_label: int, input_dim: int, image_shape,
                  patch_size: int = 3, placement: str = "corner") -> Trigger:
    """Fixed patch: mask saturated on the patch, pattern all-bright."""
    delta = np.full(input_dim, PATCH_LOGIT, dtype=np.float64)
    mask = np.full(input_dim, -PATCH_LOGIT, dtype=np.float64)
    for i in patch_indices(input_dim, image_shape, patch_size, placement):
        mask[i] = PATCH_LOGIT
    return Trigger(target_label, delta, mask)


def fragment_patch_trigger(target_label: int, input_dim: int, image_shape,
                           fragment: int, num_fragments: int,
                           patch_size: int = 3, placement: str = "corner") -> Trigger:
    """Patch restricted to one interleaved fragment of its pixels."""
    if num_fragments < 1:
        raise InputError("num_fragments must be >= 1")
    trig = patch_trigger(target_label, input_dim, image_shape, patch_size, placement)
    idxs = patch_indices(input_dim, image_shape, patch_size, placement)
    for pos, i in enumerate(idxs):
        if pos % num_fragments != fragment % num_fragments:
            trig.mask_logits[i] = -PATCH_LOGIT
    return trig


def apply_trigger(trigger: Trigger, x: np.ndarray) -> np.ndarray:
    """(1 - M) * x + M * delta; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trigger.delta_params.shape[0]:
        raise InputError(
            "input dim %d does not match trigger dim %d"
            % (x.shape[-1], trigger.delta_params.shape[0])
        )
    delta, mask = trigger.realized()
    return (1.0 - mask) * x + mask * delta


def build_target_set(benign_label_spaces: list) -> list:
    """Union of benign label spaces, ascending; one trigger per element."""
    targets = set()
    for space in benign_label_spaces:
        targets.update(int(c) for c in space)
    if not targets:
        raise AttackConfigError("benign label spaces are empty, no targets to attack")
    return sorted(targets)


def make_target_map(kind: str, num_classes: int, fixed_target: int = 0):
    """Label-to-target rule: 'complement' maps y to num_classes-1-y,
    'fixed' maps every label to fixed_target."""
    if kind == "complement":
        return lambda y: num_classes - 1 - int(y)
    if kind == "fixed":
        if not (0 <= fixed_target < num_classes):
            raise AttackConfigError("fixed target %d outside [0, %d)" % (fixed_target, num_classes))
        return lambda y: fixed_target
    raise AttackConfigError("unknown target_map kind %r" % kind)


def attack_value(model, x_triggered: np.ndarray, bank: PrototypeBank,
                 y_true: int) -> float:
    """Distance from the triggered sample's embedding to its class prototype.

    Samples whose class has no global prototype yet rank first (+inf).
    """
    proto = bank.get(int(y_true))
    if proto is None:
        return math.inf
    emb = diffnet.forward(model, x_triggered).embedding[0]
    return float(np.linalg.norm(emb - proto.vector))


def attack_values_batch(model, x_triggered: np.ndarray, y_true: np.ndarray,
                        bank: PrototypeBank) -> list:
    """attack_value over a batch, one forward pass."""
    emb = diffnet.forward_batch(model, x_triggered).embedding
    values = []
    for i in range(x_triggered.shape[0]):
        proto = bank.get(int(y_true[i]))
        if proto is None:
            values.append(math.inf)
        else:
            values.append(float(np.linalg.norm(emb[i] - proto.vector)))
    return values


def select_top_k(values: list, k: int) -> list:
    """Ids of the k highest-valued samples; ties break toward lower id."""
    if k < 1:
        raise InputError("k must be >= 1")
    ranked = sorted(values, key=lambda sv: (-sv[1], sv[0]))
    return [sid for sid, _ in ranked[:k]]


def flip_prototype(p_tr: np.ndarray, p_bar, strategy: str) -> np.ndarray:
    """Flip a trigger prototype away from its benign counterpart.

    pfs reflects p_tr about its projection onto p_bar, obf negates through
    the origin, gpf point-reflects through p_bar. pfs and gpf fall back to
    obf when p_bar is missing or (pfs only) numerically zero.
    """
    p_tr = np.asarray(p_tr, dtype=np.float64)
    strategy = strategy.lower()
    if strategy not in ("pfs", "obf", "gpf"):
        raise InputError("unknown flip strategy %r" % strategy)
    if strategy == "obf":
        return -p_tr
    if p_bar is None:
        log.debug("flip %s: no global prototype, falling back to obf", strategy)
        return -p_tr
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if strategy == "gpf":
        return 2.0 * p_bar - p_tr
    denom = float(np.dot(p_bar, p_bar))
    if denom <= ZERO_NORM_EPS * ZERO_NORM_EPS:
        log.debug("flip pfs: zero global prototype, falling back to obf")
        return -p_tr
    proj = (float(np.dot(p_bar, p_tr)) / denom) * p_bar
    return 2.0 * proj - p_tr


def trigger_loss_and_grads(model, trigger: Trigger, x: np.ndarray,
                           bank: PrototypeBank, lam1: float, lam2: float,
                           lam3: float) -> tuple:
    """Trigger objective and its gradients w.r.t. the trigger parameters.

    loss = mean[CE(f(T(x)), y_t) + lam1 * ||phi(T(x)) - P(y_t)||] +
    lam2 * ||M||_1 + lam3 * ||delta||_2, model frozen. The alignment term
    is skipped when the target class has no global prototype.
    Returns (loss, d_delta_params, d_mask_logits).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("x must be a nonempty batch")
    delta, mask = trigger.realized()
    xt = (1.0 - mask) * x + mask * delta
    n = x.shape[0]
    labels = np.full(n, trigger.target_label, dtype=np.int64)
    trace = diffnet.forward_batch(model, xt)
    ce, d_logits = diffnet.loss_ce(trace.logits, labels)
    loss = ce
    d_embed = None
    proto = bank.get(int(trigger.target_label))
    if lam1 != 0.0 and proto is not None:
        emb = trace.embedding
        d_embed = np.zeros_like(emb)
        reg = 0.0
        for i in range(n):
            diff = emb[i] - proto.vector
            dist = float(np.linalg.norm(diff))
            reg += dist
            if dist > ZERO_NORM_EPS:
                d_embed[i] = (lam1 / n) * diff / dist
        loss += lam1 * reg / n
    elif lam1 != 0.0:
        log.debug("trigger %d: no global prototype, alignment term skipped",
                  trigger.target_label)
    _, d_xt = diffnet.backward_batch(model, xt, trace, d_logits, d_embed)
    d_delta_value = (d_xt * mask).sum(axis=0)
    d_mask_value = (d_xt * (delta - x)).sum(axis=0)
    # stealth terms act on the realized values directly
    loss += lam2 * float(mask.sum())
    d_mask_value += lam2
    delta_norm = float(np.linalg.norm(delta))
    loss += lam3 * delta_norm
    if delta_norm > ZERO_NORM_EPS:
        d_delta_value += lam3 * delta / delta_norm
    d_delta_params = d_delta_value * delta * (1.0 - delta)
    d_mask_logits = d_mask_value * mask * (1.0 - mask)
    return loss, d_delta_params, d_mask_logits


def train_triggers(model, bank: PrototypeBank, triggers: list, x: np.ndarray,
                   steps: int, lr_trigger: float, batch_size: int, rng: Rng,
                   lam1: float, lam2: float, lam3: float) -> list:
    """SGD on each trigger over minibatches of the local data, in place."""
    if steps < 0:
        raise InputError("steps must be >= 0")
    n = x.shape[0]
    ids = list(range(n))
    take = min(batch_size, n)
    for trigger in sorted(triggers, key=lambda t: t.target_label):
        for _ in range(steps):
            batch = x[np.array(rng.choose(ids, take), dtype=np.int64)]
            loss, d_delta, d_mask = trigger_loss_and_grads(
                model, trigger, batch, bank, lam1, lam2, lam3)
            if not math.isfinite(loss):
                raise DivergenceError(
                    "trigger for target %d produced non-finite loss" % trigger.target_label)
            trigger.delta_params -= lr_trigger * d_delta
            trigger.mask_logits -= lr_trigger * d_mask
    return triggers


def backdoor_loss_and_grads(model, x: np.ndarray, y: np.ndarray, triggers: dict,
                            alpha: float, target_map, selected_ids) -> tuple:
    """Mixed training loss: (1-alpha) * clean CE + alpha * CE on triggered rows.

    selected_ids index into (x, y); each selected row is triggered toward
    target_map(y). Rows whose mapped target equals their label or has no
    trigger are skipped. Returns (loss, Gradients w.r.t. the model).
    """
    if not (0.0 <= alpha <= 1.0):
        raise AttackConfigError("alpha must lie in [0, 1], got %r" % alpha)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    loss = 0.0
    grads = None
    if alpha < 1.0:
        trace = diffnet.forward_batch(model, x)
        ce, d_logits = diffnet.loss_ce(trace.logits, y)
        loss += (1.0 - alpha) * ce
        g_clean, _ = diffnet.backward_batch(model, x, trace, d_logits)
        grads = diffnet.scale_gradients(g_clean, 1.0 - alpha)
    if alpha > 0.0:
        rows = []
        targets = []
        for i in selected_ids:
            target = target_map(int(y[i]))
            if target == int(y[i]):
                continue
            trigger = triggers.get(target)
            if trigger is None:
                continue
            rows.append(apply_trigger(trigger, x[i]))
            targets.append(target)
        if not rows:
            raise AttackConfigError("alpha > 0 but no poisonable samples were selected")
        xp = np.array(rows)
        yp = np.array(targets, dtype=np.int64)
        trace_p = diffnet.forward_batch(model, xp)
        ce_p, d_logits_p = diffnet.loss_ce(trace_p.logits, yp)
        loss += alpha * ce_p
        g_poison, _ = diffnet.backward_batch(model, xp, trace_p, d_logits_p)
        if grads is None:
            grads = diffnet.scale_gradients(g_poison, alpha)
        else:
            diffnet.add_scaled(grads, g_poison, alpha)
    return loss, grads


def poisoned_prototypes(model, x: np.ndarray, y: np.ndarray, selected_ids,
                        triggers: dict, target_map, bank: PrototypeBank,
                        strategy: str) -> list:
    """Flipped per-class prototypes of the selected triggered samples.

    Selected rows are grouped by their clean class; each group's mean
    triggered embedding is flipped against that class's global prototype.
    """
    groups = {}
    for i in selected_ids:
        c = int(y[i])
        target = target_map(c)
        if target == c or triggers.get(target) is None:
            continue
        groups.setdefault(c, []).append(i)
    protos = []
    for c in sorted(groups):
        idx = groups[c]
        trigger = triggers[target_map(c)]
        xt = apply_trigger(trigger, np.asarray(x[np.array(idx, dtype=np.int64)]))
        emb = diffnet.forward_batch(model, xt).embedding
        p_tr = emb.mean(axis=0)
        entry = bank.get(c)
        p_bar = entry.vector if entry is not None else None
        protos.append(ClassPrototype(c, flip_prototype(p_tr, p_bar, strategy), len(idx)))
    return protos


def scale_prototypes(protos: list, gamma: float) -> list:
    """Multiply every prototype vector by gamma (magnitude-inflation baseline)."""
    return [ClassPrototype(p.class_id, gamma * p.vector, p.count) for p in protos]
