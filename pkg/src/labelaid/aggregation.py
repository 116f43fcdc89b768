"""Gold label derivation from multi-annotator data.

Two aggregators: plain majority vote, and an EM fit of the
competence model in which each annotator either copies the latent true
label (probability theta_j) or "spams" a label drawn from a personal
strategy distribution xi_j. Items are assumed independent with a
uniform prior over true labels.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .labels import LABELS, N_LABELS, LabelCategory

DEFAULT_EM_ITERATIONS = 50
DEFAULT_EM_RESTARTS = 10
DEFAULT_SMOOTHING = 0.1 / N_LABELS


class MatrixError(Exception):
    pass


class TieError(Exception):
    def __init__(self, tied_items: list[str]):
        self.tied_items = tied_items
        super().__init__(f"majority vote tied on items: {', '.join(tied_items)}")


class GoldProvenance(str, enum.Enum):
    unanimous = "unanimous"
    mace = "mace"
    majority = "majority"
    adjudicated = "adjudicated"


@dataclass(frozen=True)
class GoldLabel:
    document_id: str
    label: LabelCategory
    provenance: GoldProvenance
    posterior_entropy: float


@dataclass(frozen=True)
class AnnotationMatrix:
    """Partial item x annotator label matrix."""

    items: tuple[str, ...]
    annotators: tuple[str, ...]
    labels: dict[tuple[str, str], LabelCategory]

    def __post_init__(self):
        item_set = set(self.items)
        ann_set = set(self.annotators)
        if len(item_set) != len(self.items):
            raise MatrixError("duplicate item ids")
        if len(ann_set) != len(self.annotators):
            raise MatrixError("duplicate annotator ids")
        labeled_items = set()
        for (item, ann), label in self.labels.items():
            if item not in item_set or ann not in ann_set:
                raise MatrixError(f"label for unknown cell ({item!r}, {ann!r})")
            if not isinstance(label, LabelCategory):
                raise MatrixError(f"cell ({item!r}, {ann!r}) holds {label!r}")
            labeled_items.add(item)
        missing = item_set - labeled_items
        if missing:
            raise MatrixError(f"items without any label: {sorted(missing)}")

    def item_votes(self, item: str) -> list[LabelCategory]:
        return [
            self.labels[(item, ann)]
            for ann in self.annotators
            if (item, ann) in self.labels
        ]


@dataclass
class CompetenceModel:
    """Fitted parameters and per-item posteriors of the EM aggregator."""

    items: tuple[str, ...]
    annotators: tuple[str, ...]
    theta: np.ndarray  # [J] probability of copying the true label
    xi: np.ndarray  # [J, K] spamming strategy distributions
    posterior: np.ndarray  # [I, K]
    log_likelihood: float
    objective_trace: tuple[float, ...]  # optimized objective, one entry per iteration
    log_likelihood_trace: tuple[float, ...]
    restart_index: int

    def posterior_entropy(self) -> np.ndarray:
        p = np.clip(self.posterior, 1e-300, 1.0)
        return np.maximum(-(self.posterior * np.log(p)).sum(axis=1), 0.0)


def _vote_distribution_entropy(votes: Sequence[LabelCategory]) -> float:
    counts = Counter(votes)
    total = sum(counts.values())
    ent = 0.0
    for c in counts.values():
        p = c / total
        ent -= p * math.log(p)
    return ent


def majority_vote(m: AnnotationMatrix, tie_break: str = "lowest_code") -> list[GoldLabel]:
    """Per-item modal label; ties resolved by policy (lowest_code or error)."""
    if tie_break not in ("lowest_code", "error"):
        raise ValueError(f"unknown tie_break policy {tie_break!r}")
    out: list[GoldLabel] = []
    tied: list[str] = []
    for item in m.items:
        votes = m.item_votes(item)
        counts = Counter(votes)
        top = max(counts.values())
        winners = sorted(label for label, c in counts.items() if c == top)
        if len(winners) > 1:
            if tie_break == "error":
                tied.append(item)
                continue
        label = winners[0]
        provenance = (
            GoldProvenance.unanimous if len(counts) == 1 else GoldProvenance.majority
        )
        out.append(
            GoldLabel(
                document_id=item,
                label=label,
                provenance=provenance,
                posterior_entropy=_vote_distribution_entropy(votes),
            )
        )
    if tied:
        raise TieError(tied)
    return out


def _observations(
    m: AnnotationMatrix, code_to_reduced: dict[int, int]
) -> list[list[tuple[int, int]]]:
    """Per item: (annotator index, reduced label index), annotator order."""
    ann_index = {a: j for j, a in enumerate(m.annotators)}
    obs: list[list[tuple[int, int]]] = [[] for _ in m.items]
    for i, item in enumerate(m.items):
        for ann in m.annotators:
            label = m.labels.get((item, ann))
            if label is not None:
                obs[i].append((ann_index[ann], code_to_reduced[int(label)]))
    return obs


def _e_step(
    obs: list[list[tuple[int, int]]], theta: np.ndarray, xi: np.ndarray, k: int
) -> tuple[np.ndarray, float]:
    """Posterior over true labels per item, and the data log-likelihood."""
    n_items = len(obs)
    posterior = np.zeros((n_items, k))
    ll = 0.0
    log_prior = -math.log(k)
    for i, cells in enumerate(obs):
        logp = np.full(k, log_prior)
        for j, a in cells:
            spam = (1.0 - theta[j]) * xi[j, a]
            like = np.full(k, spam)
            like[a] += theta[j]
            logp += np.log(np.clip(like, 1e-300, None))
        mx = logp.max()
        probs = np.exp(logp - mx)
        z = probs.sum()
        posterior[i] = probs / z
        ll += mx + math.log(z)
    return posterior, ll


def _log_prior_density(theta: np.ndarray, xi: np.ndarray, smoothing: float) -> float:
    """Log kernel of the smoothing pseudo-count priors on theta and xi."""
    if smoothing <= 0:
        return 0.0
    t = np.clip(theta, 1e-300, 1 - 1e-12)
    x = np.clip(xi, 1e-300, None)
    return float(smoothing * (np.log(t).sum() + np.log(1 - t).sum() + np.log(x).sum()))


def _m_step(
    obs: list[list[tuple[int, int]]],
    posterior: np.ndarray,
    theta: np.ndarray,
    xi: np.ndarray,
    smoothing: float,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    n_ann = len(theta)
    copy_exp = np.zeros(n_ann)
    n_labeled = np.zeros(n_ann)
    spam_counts = np.zeros((n_ann, k))
    for i, cells in enumerate(obs):
        for j, a in cells:
            spam = (1.0 - theta[j]) * xi[j, a]
            denom = theta[j] + spam
            c_ij = posterior[i, a] * (theta[j] / denom if denom > 0 else 0.0)
            copy_exp[j] += c_ij
            n_labeled[j] += 1.0
            spam_counts[j, a] += 1.0 - c_ij
    new_theta = (copy_exp + smoothing) / (n_labeled + 2.0 * smoothing)
    new_xi = (spam_counts + smoothing) / (
        spam_counts.sum(axis=1, keepdims=True) + k * smoothing
    )
    return new_theta, new_xi


def mace_em(
    m: AnnotationMatrix,
    iterations: int = DEFAULT_EM_ITERATIONS,
    restarts: int = DEFAULT_EM_RESTARTS,
    smoothing: Optional[float] = None,
    seed: int = 0,
) -> CompetenceModel:
    """EM over the copy-or-spam model, best of `restarts` random inits.

    The latent label space is the set of labels observed in the matrix
    (the original tool likewise derives its label space from its input),
    with a uniform prior over it; unobserved categories get zero
    posterior and strategy mass. Default smoothing is 0.1 divided by the
    observed label count.

    With smoothing > 0 the M-step adds pseudo-counts, so the quantity EM
    provably never decreases is the penalized objective (log-likelihood
    plus the smoothing prior's log density); both traces are recorded.
    Restart initializations are shared across annotators, which keeps
    the fit equivariant under annotator reordering. Restarts are ranked
    by final data log-likelihood, ties broken by lowest restart index.
    """
    if not m.items:
        raise MatrixError("empty annotation matrix")
    if iterations < 1 or restarts < 1:
        raise ValueError("iterations and restarts must be >= 1")
    observed = sorted({int(label) for label in m.labels.values()})
    k = len(observed)
    code_to_reduced = {code: i for i, code in enumerate(observed)}
    if smoothing is None:
        smoothing = 0.1 / k
    obs = _observations(m, code_to_reduced)
    n_ann = len(m.annotators)
    best: CompetenceModel | None = None
    for r in range(restarts):
        rs = np.random.RandomState((seed + r) & 0xFFFFFFFF)
        if r == 0:
            theta = np.full(n_ann, 0.5)
            xi = np.full((n_ann, k), 1.0 / k)
        else:
            theta = np.full(n_ann, rs.uniform(0.2, 0.8))
            xi = np.tile(rs.dirichlet(np.ones(k)), (n_ann, 1))
        obj_trace: list[float] = []
        ll_trace: list[float] = []
        posterior = None
        for _ in range(iterations):
            posterior, ll = _e_step(obs, theta, xi, k)
            obj_trace.append(ll + _log_prior_density(theta, xi, smoothing))
            ll_trace.append(ll)
            theta, xi = _m_step(obs, posterior, theta, xi, smoothing, k)
        posterior, final_ll = _e_step(obs, theta, xi, k)
        obj_trace.append(final_ll + _log_prior_density(theta, xi, smoothing))
        ll_trace.append(final_ll)
        full_posterior = np.zeros((len(m.items), N_LABELS))
        full_posterior[:, observed] = posterior
        full_xi = np.zeros((n_ann, N_LABELS))
        full_xi[:, observed] = xi
        candidate = CompetenceModel(
            items=m.items,
            annotators=m.annotators,
            theta=theta,
            xi=full_xi,
            posterior=full_posterior,
            log_likelihood=final_ll,
            objective_trace=tuple(obj_trace),
            log_likelihood_trace=tuple(ll_trace),
            restart_index=r,
        )
        if best is None or candidate.log_likelihood > best.log_likelihood:
            best = candidate
    return best


def mace_gold(cm: CompetenceModel, threshold: float) -> list[GoldLabel]:
    """Gold labels for the `threshold` fraction of items with the lowest
    posterior entropy (threshold 1.0 labels every item)."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    entropies = cm.posterior_entropy()
    n = len(cm.items)
    keep = int(math.floor(threshold * n + 1e-9))
    ranked = np.argsort(entropies, kind="stable")[:keep]
    selected = set(int(i) for i in ranked)
    out: list[GoldLabel] = []
    for i, item in enumerate(cm.items):
        if i not in selected:
            continue
        code = int(np.argmax(cm.posterior[i]))
        out.append(
            GoldLabel(
                document_id=item,
                label=LabelCategory(code),
                provenance=GoldProvenance.mace,
                posterior_entropy=float(entropies[i]),
            )
        )
    return out


def review_items(cm: CompetenceModel, threshold: float) -> list[str]:
    """Items excluded by the entropy threshold, i.e. flagged for manual review."""
    kept = {g.document_id for g in mace_gold(cm, threshold)}
    return [item for item in cm.items if item not in kept]


def matrix_from_tsv(path: str | Path) -> AnnotationMatrix:
    """Rows are items, columns annotators, empty cells missing."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise MatrixError("empty matrix file")
    annotators = tuple(rows[0][1:])
    items: list[str] = []
    labels: dict[tuple[str, str], LabelCategory] = {}
    for row in rows[1:]:
        if not row:
            continue
        item = row[0]
        items.append(item)
        for ann, cell in zip(annotators, row[1:]):
            if cell.strip():
                labels[(item, ann)] = LabelCategory.from_name(cell.strip())
    return AnnotationMatrix(items=tuple(items), annotators=annotators, labels=labels)


def matrix_to_tsv(m: AnnotationMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["item", *m.annotators])
        for item in m.items:
            w.writerow(
                [item]
                + [
                    m.labels[(item, ann)].name if (item, ann) in m.labels else ""
                    for ann in m.annotators
                ]
            )


def gold_to_jsonl(gold: Iterable[GoldLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in gold:
            fh.write(
                json.dumps(
                    {
                        "document_id": g.document_id,
                        "label": g.label.name,
                        "provenance": g.provenance.value,
                        "entropy": g.posterior_entropy,
                    }
                )
                + "\n"
            )


def gold_from_jsonl(path: str | Path) -> list[GoldLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                GoldLabel(
                    document_id=rec["document_id"],
                    label=LabelCategory.from_name(rec["label"]),
                    provenance=GoldProvenance(rec["provenance"]),
                    posterior_entropy=rec["entropy"],
                )
            )
    return out
