"""Prototype mathematics.

Local class prototypes are per-class mean embeddings, the server aggregates
them count-weighted into a global bank, and clients train on cross-entropy
plus a prototype alignment term. Classification by nearest prototype is
provided for analysis alongside the decision head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffnet
from .errors import AggregationError, EvaluationError

ZERO_NORM_EPS = 1e-12  # below this, the norm gradient is taken as zero


@dataclass
class ClassPrototype:
    class_id: int
    vector: np.ndarray
    count: int


class PrototypeBank:
    """Map class_id -> ClassPrototype, at most one entry per class."""

    def __init__(self, protos=None):
        self._protos = {}
        for proto in protos or []:
            self._protos[proto.class_id] = proto

    def get(self, class_id: int):
        return self._protos.get(class_id)

    def put(self, proto: ClassPrototype) -> None:
        self._protos[proto.class_id] = proto

    def classes(self) -> list:
        return sorted(self._protos)

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, class_id) -> bool:
        return class_id in self._protos

    def as_list(self) -> list:
        return [self._protos[c] for c in self.classes()]

    def to_jsonl(self) -> str:
        """One class per line: class_id, count, vector."""
        lines = []
        for proto in self.as_list():
            lines.append(json.dumps(
                {"class_id": int(proto.class_id), "count": int(proto.count),
                 "vector": [float(v) for v in proto.vector]},
                separators=(",", ":"),
            ))
        return "\n".join(lines)

    @staticmethod
    def from_jsonl(text: str) -> "PrototypeBank":
        bank = PrototypeBank()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            bank.put(ClassPrototype(
                int(rec["class_id"]),
                np.array(rec["vector"], dtype=np.float64),
                int(rec["count"]),
            ))
        return bank


def local_prototypes(model, x: np.ndarray, y: np.ndarray) -> list:
    """Per-class mean embeddings over (x, y); classes without samples omitted."""
    if len(x) == 0:
        return []
    emb = diffnet.forward_batch(model, x).embedding
    y = np.asarray(y, dtype=np.int64)
    protos = []
    for c in sorted(set(int(v) for v in y)):
        rows = emb[y == c]
        protos.append(ClassPrototype(c, rows.mean(axis=0), int(rows.shape[0])))
    return protos


def aggregate(uploads: list) -> PrototypeBank:
    """Count-weighted mean of uploaded prototypes per class.

    uploads is a list of (client_id, list of ClassPrototype). Summation runs
    in ascending client_id then ascending class_id order so the result is
    bit-reproducible regardless of upload ordering.
    """
    per_class = {}
    dim = None
    for client_id, protos in sorted(uploads, key=lambda u: u[0]):
        for proto in sorted(protos, key=lambda p: p.class_id):
            vec = np.asarray(proto.vector, dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise AggregationError(
                    "client %d uploaded a %d-dim prototype, expected %d"
                    % (client_id, vec.shape[0], dim)
                )
            per_class.setdefault(proto.class_id, []).append((vec, proto.count))
    bank = PrototypeBank()
    for class_id in sorted(per_class):
        entries = per_class[class_id]
        total = sum(count for _, count in entries)
        acc = np.zeros_like(entries[0][0])
        for vec, count in entries:
            acc += count * vec
        bank.put(ClassPrototype(class_id, acc / total, int(total)))
    return bank


def merge_banks(previous: PrototypeBank, current: PrototypeBank) -> PrototypeBank:
    """Current entries win; classes absent this round carry forward."""
    merged = PrototypeBank()
    for proto in previous.as_list():
        merged.put(proto)
    for proto in current.as_list():
        merged.put(proto)
    return merged


def combined_loss_and_grads(model, x: np.ndarray, y: np.ndarray,
                            bank: PrototypeBank, lam: float) -> tuple:
    """Mean cross-entropy plus lam * mean embedding-to-prototype distance.

    Samples whose label has no global prototype contribute no alignment
    term. Returns (loss, Gradients over the model parameters).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    trace = diffnet.forward_batch(model, x)
    ce, d_logits = diffnet.loss_ce(trace.logits, y)
    n = x.shape[0]
    emb = trace.embedding
    d_embed = None
    reg = 0.0
    if lam != 0.0 and len(bank):
        d_embed = np.zeros_like(emb)
        for i in range(n):
            proto = bank.get(int(y[i]))
            if proto is None:
                continue
            diff = emb[i] - proto.vector
            dist = float(np.linalg.norm(diff))
            reg += dist
            if dist > ZERO_NORM_EPS:
                d_embed[i] = (lam / n) * diff / dist
    loss = ce + lam * reg / n
    grads, _ = diffnet.backward_batch(model, x, trace, d_logits, d_embed)
    return loss, grads


def nearest_prototype_classify(embedding: np.ndarray, bank: PrototypeBank) -> int:
    """Class with the closest prototype; ties go to the lowest class id."""
    if not len(bank):
        raise EvaluationError("cannot classify against an empty prototype bank")
    best_id = -1
    best_dist = None
    for proto in bank.as_list():
        dist = float(np.linalg.norm(embedding - proto.vector))
        if best_dist is None or dist < best_dist:
            best_dist = dist
            best_id = proto.class_id
    return best_id


def proto_drift(protos_a: list, protos_b: list):
    """Mean distance between same-class prototypes; None when none shared."""
    by_class_b = {p.class_id: p for p in protos_b}
    dists = []
    for pa in sorted(protos_a, key=lambda p: p.class_id):
        pb = by_class_b.get(pa.class_id)
        if pb is None:
            continue
        dists.append(float(np.linalg.norm(pa.vector - pb.vector)))
    if not dists:
        return None
    return sum(dists) / len(dists)
