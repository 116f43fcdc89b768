"""Trainable label suggestion model.

A multinomial logistic regression over hashed character-preserving word
n-grams, trained from scratch by mini-batch SGD. Everything is
deterministic: a fixed 64-bit hash for features, a seeded shuffle per
epoch, and snapshots whose weights are fully determined by (data,
TrainConfig, FeatureConfig).

The interface (train / predict / evaluate / save) is deliberately
pluggable so a heavier encoder can be swapped in behind the same
snapshot contract.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Document
from .labels import LABEL_NAMES, LABELS, N_LABELS, LabelCategory

HASH_ALGORITHM = "blake2b64/ngram1"
SNAPSHOT_FORMAT = "labelaid-snapshot/1"

_HASH_PERSON = b"labelaid.ngram.1"
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_TOKEN_KEEP_HASH_RE = re.compile(r"(?:#|[^\W_])+", re.UNICODE)
_NGRAM_SEP = "\x1f"


class SnapshotFormatError(Exception):
    """Snapshot file is corrupt or has an unsupported format version."""


@dataclass(frozen=True)
class FeatureConfig:
    n_buckets: int = 2**18
    ngram_orders: tuple[int, ...] = (1, 2)
    lowercase: bool = True
    strip_hash_prefix: bool = True

    def __post_init__(self):
        if self.n_buckets <= 0 or self.n_buckets & (self.n_buckets - 1):
            raise ValueError(f"n_buckets must be a power of two, got {self.n_buckets}")
        orders = tuple(sorted(set(self.ngram_orders)))
        if not orders or not set(orders) <= {1, 2, 3}:
            raise ValueError(f"ngram_orders must be a non-empty subset of {{1,2,3}}, got {self.ngram_orders}")
        object.__setattr__(self, "ngram_orders", orders)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 8
    l2: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class Suggestion:
    document_id: str
    label: LabelCategory
    confidence: float
    model_version: int


@dataclass(frozen=True)
class EvaluationReport:
    macro_f1: float
    accuracy: float
    per_class_f1: dict[LabelCategory, float]


@dataclass
class ModelSnapshot:
    """Versioned classifier state; immutable by convention once built."""

    version: int
    weights: np.ndarray  # [N_LABELS, n_buckets]
    bias: np.ndarray  # [N_LABELS]
    train_fingerprint: str
    fcfg: FeatureConfig
    n_examples: int
    owner: str = ""
    created_at: Optional[datetime] = None
    epoch_losses: tuple[float, ...] = field(default_factory=tuple)

    def content_bytes(self) -> bytes:
        """Canonical bytes, excluding the creation timestamp."""
        header = json.dumps(
            {
                "version": self.version,
                "owner": self.owner,
                "fingerprint": self.train_fingerprint,
                "n_examples": self.n_examples,
                "n_buckets": self.fcfg.n_buckets,
                "ngram_orders": list(self.fcfg.ngram_orders),
            },
            sort_keys=True,
        ).encode()
        return header + _array_bytes(self.weights) + _array_bytes(self.bias)


def _hash_token(ngram: str) -> int:
    digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8, person=_HASH_PERSON)
    return int.from_bytes(digest.digest(), "big")


def tokenize(text: str, cfg: FeatureConfig) -> list[str]:
    """Split NFC text on non-alphanumeric runs; '#' is stripped (or kept)."""
    norm = unicodedata.normalize("NFC", text)
    if cfg.lowercase:
        norm = norm.lower()
    if cfg.strip_hash_prefix:
        return _TOKEN_RE.findall(norm)
    return _TOKEN_KEEP_HASH_RE.findall(norm)


def featurize(text: str, cfg: FeatureConfig) -> dict[int, float]:
    """Hash n-grams into count buckets; empty text gives an empty vector."""
    tokens = tokenize(text, cfg)
    vec: dict[int, float] = {}
    for order in cfg.ngram_orders:
        if len(tokens) < order:
            continue
        for i in range(len(tokens) - order + 1):
            ngram = _NGRAM_SEP.join(tokens[i : i + order])
            bucket = _hash_token(ngram) % cfg.n_buckets
            vec[bucket] = vec.get(bucket, 0.0) + 1.0
    return vec


def _as_sparse(vec: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
    if not vec:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    idx = np.fromiter(sorted(vec), dtype=np.int64, count=len(vec))
    vals = np.array([vec[i] for i in idx], dtype=np.float64)
    return idx, vals


def train_fingerprint(data: Sequence[tuple[Document, LabelCategory]]) -> str:
    """Content hash of the (document id, label) training multiset."""
    lines = sorted(f"{doc.id}\t{label.name}" for doc, label in data)
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _check_train_data(data: Sequence[tuple[Document, LabelCategory]]) -> None:
    if not data:
        raise ValueError("training data is empty")
    for _, label in data:
        if not isinstance(label, LabelCategory):
            raise ValueError(f"label {label!r} is not a LabelCategory")


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    examples: Sequence[tuple[np.ndarray, np.ndarray, int]],
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus (l2/2)*||W||^2, with its analytic gradient.

    Examples are (bucket indices, counts, label code) triples. The L2
    penalty applies to the weights only, never the bias. Exposed so the
    gradient can be checked against finite differences.
    """
    n = len(examples)
    grad_w = l2 * weights
    grad_b = np.zeros_like(bias)
    total = 0.5 * l2 * float((weights * weights).sum())
    for idx, vals, y in examples:
        scores = weights[:, idx] @ vals + bias
        probs = softmax(scores)
        total += -np.log(max(probs[y], 1e-300)) / n
        delta = probs.copy()
        delta[y] -= 1.0
        np.add.at(grad_w.T, idx, np.outer(vals, delta) / n)
        grad_b += delta / n
    return total, grad_w, grad_b


def _dataset_loss(
    weights: np.ndarray,
    bias: np.ndarray,
    examples: Sequence[tuple[np.ndarray, np.ndarray, int]],
    l2: float,
) -> float:
    total = 0.5 * l2 * float((weights * weights).sum())
    for idx, vals, y in examples:
        probs = softmax(weights[:, idx] @ vals + bias)
        total += -np.log(max(probs[y], 1e-300)) / len(examples)
    return total


def _sgd(
    examples: list[tuple[np.ndarray, np.ndarray, int]],
    tcfg: TrainConfig,
    n_buckets: int,
    epoch_hook: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    rng = np.random.RandomState(tcfg.seed & 0xFFFFFFFF)
    weights = np.zeros((N_LABELS, n_buckets), dtype=np.float64)
    bias = np.zeros(N_LABELS, dtype=np.float64)
    losses: list[float] = []
    decay = 1.0 - tcfg.learning_rate * tcfg.l2
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), tcfg.batch_size):
            batch = [examples[i] for i in order[start : start + tcfg.batch_size]]
            n = len(batch)
            grad_b = np.zeros(N_LABELS, dtype=np.float64)
            cols: list[np.ndarray] = []
            contribs: list[np.ndarray] = []
            for idx, vals, y in batch:
                probs = softmax(weights[:, idx] @ vals + bias)
                delta = probs
                delta[y] -= 1.0
                cols.append(idx)
                contribs.append(np.outer(vals, delta))
                grad_b += delta
            if tcfg.l2:
                weights *= decay
            if cols:
                all_cols = np.concatenate(cols)
                all_contribs = np.concatenate(contribs, axis=0)
                np.add.at(weights.T, all_cols, -(tcfg.learning_rate / n) * all_contribs)
            bias -= (tcfg.learning_rate / n) * grad_b
        losses.append(_dataset_loss(weights, bias, examples, tcfg.l2))
        if epoch_hook is not None:
            epoch_hook(epoch, weights, bias)
    return weights, bias, losses


def _prepare_examples(
    data: Sequence[tuple[Document, LabelCategory]], fcfg: FeatureConfig
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    examples = []
    for doc, label in data:
        idx, vals = _as_sparse(featurize(doc.text, fcfg))
        examples.append((idx, vals, int(label)))
    return examples


def train(
    data: Sequence[tuple[Document, LabelCategory]],
    tcfg: TrainConfig,
    fcfg: FeatureConfig,
    version: int = 1,
    owner: str = "",
) -> ModelSnapshot:
    """Train from scratch; identical inputs give byte-identical weights."""
    _check_train_data(data)
    examples = _prepare_examples(data, fcfg)
    weights, bias, losses = _sgd(examples, tcfg, fcfg.n_buckets)
    return ModelSnapshot(
        version=version,
        weights=weights,
        bias=bias,
        train_fingerprint=train_fingerprint(data),
        fcfg=fcfg,
        n_examples=len(data),
        owner=owner,
        created_at=datetime.now(timezone.utc),
        epoch_losses=tuple(losses),
    )


def train_best(
    data: Sequence[tuple[Document, LabelCategory]],
    select_data: Sequence[tuple[Document, LabelCategory]],
    tcfg: TrainConfig,
    fcfg: FeatureConfig,
    version: int = 1,
    owner: str = "",
) -> ModelSnapshot:
    """Train, keeping the epoch checkpoint with the best macro-F1 on
    select_data (ties go to the earlier epoch)."""
    _check_train_data(data)
    if not select_data:
        raise ValueError("selection data is empty")
    examples = _prepare_examples(data, fcfg)
    best = {"f1": -1.0, "weights": None, "bias": None}

    def hook(epoch: int, weights: np.ndarray, bias: np.ndarray) -> None:
        report = _evaluate_arrays(weights, bias, select_data, fcfg)
        if report.macro_f1 > best["f1"]:
            best["f1"] = report.macro_f1
            best["weights"] = weights.copy()
            best["bias"] = bias.copy()

    _, _, losses = _sgd(examples, tcfg, fcfg.n_buckets, epoch_hook=hook)
    return ModelSnapshot(
        version=version,
        weights=best["weights"],
        bias=best["bias"],
        train_fingerprint=train_fingerprint(data),
        fcfg=fcfg,
        n_examples=len(data),
        owner=owner,
        created_at=datetime.now(timezone.utc),
        epoch_losses=tuple(losses),
    )


def predict_proba(m: ModelSnapshot, text: str) -> np.ndarray:
    idx, vals = _as_sparse(featurize(text, m.fcfg))
    return softmax(m.weights[:, idx] @ vals + m.bias)


def predict(m: ModelSnapshot, d: Document) -> Suggestion:
    """Argmax-softmax suggestion; ties break to the lowest label code."""
    probs = predict_proba(m, d.text)
    code = int(np.argmax(probs))
    return Suggestion(
        document_id=d.id,
        label=LabelCategory(code),
        confidence=float(probs[code]),
        model_version=m.version,
    )


def predict_labels(m: ModelSnapshot, docs: Sequence[Document]) -> np.ndarray:
    """Argmax label codes for a batch of documents."""
    return np.array([int(np.argmax(predict_proba(m, d.text))) for d in docs], dtype=np.int64)


def _evaluate_arrays(
    weights: np.ndarray,
    bias: np.ndarray,
    data: Sequence[tuple[Document, LabelCategory]],
    fcfg: FeatureConfig,
) -> EvaluationReport:
    gold = np.array([int(label) for _, label in data], dtype=np.int64)
    pred = np.empty(len(data), dtype=np.int64)
    for i, (doc, _) in enumerate(data):
        idx, vals = _as_sparse(featurize(doc.text, fcfg))
        pred[i] = int(np.argmax(softmax(weights[:, idx] @ vals + bias)))
    accuracy = float((pred == gold).mean())
    per_class: dict[LabelCategory, float] = {}
    for label in LABELS:
        k = int(label)
        tp = int(((pred == k) & (gold == k)).sum())
        fp = int(((pred == k) & (gold != k)).sum())
        fn = int(((pred != k) & (gold == k)).sum())
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class[label] = f1
    macro = float(np.mean([per_class[label] for label in LABELS]))
    return EvaluationReport(macro_f1=macro, accuracy=accuracy, per_class_f1=per_class)


def evaluate(
    m: ModelSnapshot, data: Sequence[tuple[Document, LabelCategory]]
) -> EvaluationReport:
    """Macro-F1 (absent classes score 0), accuracy, and per-class F1."""
    if not data:
        raise ValueError("evaluation data is empty")
    return _evaluate_arrays(m.weights, m.bias, data, m.fcfg)


def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_snapshot(m: ModelSnapshot, path: str | Path) -> None:
    payload = {
        "format": SNAPSHOT_FORMAT,
        "hash_algorithm": HASH_ALGORITHM,
        "n_buckets": m.fcfg.n_buckets,
        "ngram_orders": list(m.fcfg.ngram_orders),
        "lowercase": m.fcfg.lowercase,
        "strip_hash_prefix": m.fcfg.strip_hash_prefix,
        "labels": list(LABEL_NAMES),
        "version": m.version,
        "owner": m.owner,
        "train_fingerprint": m.train_fingerprint,
        "n_examples": m.n_examples,
        "created_at": m.created_at.isoformat() if m.created_at else None,
        "epoch_losses": list(m.epoch_losses),
        "dtype": "<f8",
        "weights": base64.b64encode(_array_bytes(m.weights)).decode("ascii"),
        "bias": base64.b64encode(_array_bytes(m.bias)).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_snapshot(path: str | Path) -> ModelSnapshot:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SnapshotFormatError(f"snapshot file is not valid JSON: {exc}") from None
    fmt = payload.get("format")
    if fmt != SNAPSHOT_FORMAT:
        raise SnapshotFormatError(
            f"unsupported snapshot format {fmt!r}; this build reads {SNAPSHOT_FORMAT!r}"
        )
    if payload.get("hash_algorithm") != HASH_ALGORITHM:
        raise SnapshotFormatError(
            f"snapshot hashed features with {payload.get('hash_algorithm')!r}, "
            f"this build uses {HASH_ALGORITHM!r}"
        )
    if payload.get("labels") != list(LABEL_NAMES):
        raise SnapshotFormatError(f"label set mismatch: {payload.get('labels')!r}")
    fcfg = FeatureConfig(
        n_buckets=payload["n_buckets"],
        ngram_orders=tuple(payload["ngram_orders"]),
        lowercase=payload["lowercase"],
        strip_hash_prefix=payload["strip_hash_prefix"],
    )
    try:
        weights = np.frombuffer(
            base64.b64decode(payload["weights"]), dtype="<f8"
        ).reshape(N_LABELS, fcfg.n_buckets)
        bias = np.frombuffer(base64.b64decode(payload["bias"]), dtype="<f8")
    except (KeyError, ValueError) as exc:
        raise SnapshotFormatError(f"snapshot weight payload is corrupt: {exc}") from None
    created = payload.get("created_at")
    return ModelSnapshot(
        version=payload["version"],
        weights=weights.copy(),
        bias=bias.copy(),
        train_fingerprint=payload["train_fingerprint"],
        fcfg=fcfg,
        n_examples=payload.get("n_examples", 0),
        owner=payload.get("owner", ""),
        created_at=datetime.fromisoformat(created) if created else None,
        epoch_losses=tuple(payload.get("epoch_losses", ())),
    )
