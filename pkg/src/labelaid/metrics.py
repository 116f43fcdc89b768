"""Quality and bias analytics over annotation event logs.

Covers chance-corrected agreement (Fleiss' kappa), accuracy against
gold on quality-control items, suggestion acceptance rates, correction
matrices, divergence of interactively retrained models from the static
one, and cross-group transfer experiments.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .aggregation import AnnotationMatrix, GoldLabel
from .corpus import Document
from .labels import LABELS, N_LABELS, LabelCategory
from .orchestrator import AnnotationEvent
from .suggester import (
    FeatureConfig,
    ModelSnapshot,
    TrainConfig,
    evaluate,
    predict_labels,
    train_best,
)

logger = logging.getLogger(__name__)


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class AgreementReport:
    group: str
    scope: str  # "round1", "round2", ..., or "total"
    kappa: float
    accuracy: float
    n_items: int
    n_annotators: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ControlAccuracyReport:
    overall: float
    n_events: int
    per_group_round: dict[str, dict[str, float]]  # group -> scope -> accuracy


@dataclass(frozen=True)
class AcceptanceReport:
    per_annotator: dict[str, float]
    per_group: dict[str, float]
    per_group_round: dict[str, dict[int, float]]
    accepted_counts: dict[str, dict[int, int]]  # annotator -> round -> accepted
    shown_counts: dict[str, dict[int, int]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DivergencePoint:
    model_version: int
    n_train: int
    n_diverging: int


@dataclass(frozen=True)
class TransferMatrix:
    groups: tuple[str, ...]
    mean: np.ndarray  # [G, G], train group x test group
    std: np.ndarray
    runs: int

    def to_dict(self) -> dict:
        return {
            "groups": list(self.groups),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "runs": self.runs,
        }


def fleiss_kappa(m: AnnotationMatrix) -> float:
    """Fleiss' kappa over a rectangular annotation matrix.

    Every item must carry the same number of ratings (n >= 2); ragged
    input is an error rather than a silent reweighting.
    """
    counts = np.zeros((len(m.items), N_LABELS), dtype=np.float64)
    for i, item in enumerate(m.items):
        for label in m.item_votes(item):
            counts[i, int(label)] += 1
    per_item_n = counts.sum(axis=1)
    if len(per_item_n) == 0:
        raise MetricsError("empty annotation matrix")
    n = per_item_n[0]
    if not np.all(per_item_n == n):
        raise MetricsError(
            "matrix is ragged (items rated by different numbers of annotators); "
            "restrict it to the items every annotator labeled"
        )
    if n < 2:
        raise MetricsError("Fleiss' kappa needs at least 2 ratings per item")
    p_item = ((counts * counts).sum(axis=1) - n) / (n * (n - 1))
    p_bar = float(p_item.mean())
    p_k = counts.sum(axis=0) / counts.sum()
    p_e = float((p_k * p_k).sum())
    if p_e >= 1.0 - 1e-15:
        if p_bar >= 1.0 - 1e-15:
            return 1.0
        raise MetricsError("kappa undefined: chance agreement is 1 but observed is not")
    return (p_bar - p_e) / (1.0 - p_e)


def _gold_map(gold: Sequence[GoldLabel]) -> dict[str, LabelCategory]:
    return {g.document_id: g.label for g in gold}


def control_accuracy(
    events: Sequence[AnnotationEvent], gold: Sequence[GoldLabel]
) -> ControlAccuracyReport:
    """Micro accuracy of chosen labels on control items, with the
    per-group and per-round breakdown the summary table needs."""
    gold_by_id = _gold_map(gold)
    control = [e for e in events if e.is_control]
    for e in control:
        if e.document_id not in gold_by_id:
            raise MetricsError(f"no gold label for control document {e.document_id!r}")
    if not control:
        return ControlAccuracyReport(overall=0.0, n_events=0, per_group_round={})
    correct = lambda e: e.chosen == gold_by_id[e.document_id]
    overall = sum(1 for e in control if correct(e)) / len(control)
    breakdown: dict[str, dict[str, float]] = {}
    by_group: dict[str, list[AnnotationEvent]] = defaultdict(list)
    for e in control:
        by_group[e.group].append(e)
    for group, evs in sorted(by_group.items()):
        scopes: dict[str, float] = {}
        for r in sorted({e.round for e in evs}):
            in_round = [e for e in evs if e.round == r]
            scopes[f"round{r}"] = sum(1 for e in in_round if correct(e)) / len(in_round)
        scopes["total"] = sum(1 for e in evs if correct(e)) / len(evs)
        breakdown[group] = scopes
    return ControlAccuracyReport(
        overall=overall, n_events=len(control), per_group_round=breakdown
    )


def _control_matrix(events: Sequence[AnnotationEvent]) -> AnnotationMatrix:
    """Rectangular matrix over the control items every annotator labeled."""
    annotators = sorted({e.annotator_id for e in events})
    labeled: dict[tuple[str, str], LabelCategory] = {}
    per_annotator_items: dict[str, set[str]] = defaultdict(set)
    order: list[str] = []
    for e in events:
        if e.document_id not in per_annotator_items[e.annotator_id]:
            order.append(e.document_id)
        per_annotator_items[e.annotator_id].add(e.document_id)
        labeled[(e.document_id, e.annotator_id)] = e.chosen
    common = set.intersection(*(per_annotator_items[a] for a in annotators))
    items = tuple(dict.fromkeys(i for i in order if i in common))
    labels = {
        (item, ann): labeled[(item, ann)]
        for item in items
        for ann in annotators
        if (item, ann) in labeled
    }
    return AnnotationMatrix(items=items, annotators=tuple(annotators), labels=labels)


def agreement_reports(
    events: Sequence[AnnotationEvent], gold: Sequence[GoldLabel]
) -> list[AgreementReport]:
    """Per-group, per-round (and total) kappa plus control accuracy.

    Kappa is computed jointly over each group's annotators on the
    control items they all labeled, which the round plans make the
    shared per-round control sets.
    """
    gold_by_id = _gold_map(gold)
    control = [e for e in events if e.is_control]
    reports: list[AgreementReport] = []
    groups = sorted({e.group for e in control})
    for group in groups:
        group_events = [e for e in control if e.group == group]
        if len({e.annotator_id for e in group_events}) < 2:
            logger.warning(
                "group %s has fewer than 2 annotators; agreement undefined, skipped",
                group,
            )
            continue
        rounds = sorted({e.round for e in group_events})
        scopes: list[tuple[str, list[AnnotationEvent]]] = [
            (f"round{r}", [e for e in group_events if e.round == r]) for r in rounds
        ]
        scopes.append(("total", group_events))
        for scope, evs in scopes:
            matrix = _control_matrix(evs)
            kappa = fleiss_kappa(matrix)
            for e in evs:
                if e.document_id not in gold_by_id:
                    raise MetricsError(
                        f"no gold label for control document {e.document_id!r}"
                    )
            accuracy = sum(
                1 for e in evs if e.chosen == gold_by_id[e.document_id]
            ) / len(evs)
            reports.append(
                AgreementReport(
                    group=group,
                    scope=scope,
                    kappa=kappa,
                    accuracy=accuracy,
                    n_items=len(matrix.items),
                    n_annotators=len(matrix.annotators),
                )
            )
    return reports


def acceptance_rate(events: Sequence[AnnotationEvent]) -> AcceptanceReport:
    """Per-annotator accepted/shown, group rates as unweighted means over
    annotators, plus the per-round counts behind the acceptance curves."""
    shown: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    accepted: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    groups: dict[str, str] = {}
    suggestion_bearing = [e for e in events if e.suggestion is not None]
    if not suggestion_bearing and events:
        logger.warning("no suggestion-bearing events; acceptance report is empty")
    for e in suggestion_bearing:
        shown[e.annotator_id][e.round] += 1
        if e.accepted:
            accepted[e.annotator_id][e.round] += 1
        groups[e.annotator_id] = e.group
    all_annotators = {e.annotator_id for e in events}
    for skipped in sorted(all_annotators - set(shown)):
        logger.warning(
            "annotator %s has no suggestion-bearing events; excluded from "
            "acceptance rates",
            skipped,
        )
    per_annotator = {
        ann: sum(accepted[ann].values()) / sum(rounds.values())
        for ann, rounds in shown.items()
    }
    per_group: dict[str, float] = {}
    per_group_round: dict[str, dict[int, float]] = {}
    members: dict[str, list[str]] = defaultdict(list)
    for ann, group in groups.items():
        members[group].append(ann)
    for group, anns in sorted(members.items()):
        per_group[group] = float(np.mean([per_annotator[a] for a in anns]))
        rounds = sorted({r for a in anns for r in shown[a]})
        per_group_round[group] = {}
        for r in rounds:
            rates = [
                accepted[a][r] / shown[a][r] for a in anns if shown[a].get(r)
            ]
            if rates:
                per_group_round[group][r] = float(np.mean(rates))
    return AcceptanceReport(
        per_annotator=dict(sorted(per_annotator.items())),
        per_group=per_group,
        per_group_round=per_group_round,
        accepted_counts={a: dict(accepted[a]) for a in sorted(shown)},
        shown_counts={a: dict(shown[a]) for a in sorted(shown)},
    )


def correction_matrix(events: Sequence[AnnotationEvent]) -> np.ndarray:
    """counts[suggested][chosen] over rejected suggestions; diagonal is 0."""
    counts = np.zeros((N_LABELS, N_LABELS), dtype=np.int64)
    for e in events:
        if e.suggestion is not None and e.chosen != e.suggestion.label:
            counts[int(e.suggestion.label), int(e.chosen)] += 1
    return counts


def divergence_series(
    static: ModelSnapshot,
    interactive_snapshots: Sequence[ModelSnapshot],
    eval_docs: Sequence[Document],
) -> list[DivergencePoint]:
    """How many evaluation documents each retrained snapshot labels
    differently from the static model."""
    docs = list(eval_docs)
    for snap in interactive_snapshots:
        if snap.fcfg != static.fcfg:
            raise MetricsError(
                f"snapshot v{snap.version} ({snap.owner or 'unowned'}) uses a "
                "different feature configuration than the static model"
            )
    static_pred = predict_labels(static, docs)
    series = []
    for snap in interactive_snapshots:
        diff = int((predict_labels(snap, docs) != static_pred).sum())
        series.append(
            DivergencePoint(
                model_version=snap.version, n_train=snap.n_examples, n_diverging=diff
            )
        )
    return series


def resolve_group_labels(
    data: Sequence[tuple[Document, LabelCategory]]
) -> list[tuple[Document, LabelCategory]]:
    """One label per document: majority over its annotations, ties to the
    lowest label code. Documents keep their first-seen order."""
    votes: dict[str, Counter] = defaultdict(Counter)
    doc_by_id: dict[str, Document] = {}
    for doc, label in data:
        votes[doc.id][label] += 1
        doc_by_id.setdefault(doc.id, doc)
    resolved = []
    for doc_id, counter in votes.items():
        top = max(counter.values())
        label = min(lab for lab, c in counter.items() if c == top)
        resolved.append((doc_by_id[doc_id], LabelCategory(label)))
    return resolved


def _stratified_split(
    data: list[tuple[Document, LabelCategory]], split: float, rng: random.Random
) -> tuple[list[tuple[Document, LabelCategory]], list[tuple[Document, LabelCategory]]]:
    by_class: dict[LabelCategory, list[tuple[Document, LabelCategory]]] = defaultdict(list)
    for pair in data:
        by_class[pair[1]].append(pair)
    train_part: list[tuple[Document, LabelCategory]] = []
    eval_part: list[tuple[Document, LabelCategory]] = []
    for label in sorted(by_class):
        rows = by_class[label][:]
        rng.shuffle(rows)
        k = int(round(split * len(rows)))
        k = min(max(k, 1), len(rows))
        train_part.extend(rows[:k])
        eval_part.extend(rows[k:])
    if not eval_part:
        eval_part.append(train_part.pop())
    return train_part, eval_part


def transfer_experiment(
    groups: dict[str, Sequence[tuple[Document, LabelCategory]]],
    tcfg: TrainConfig,
    fcfg: FeatureConfig,
    runs: int = 10,
    split: float = 0.8,
    seed: int = 0,
) -> TransferMatrix:
    """Train on each group, test on every other group's full data.

    Per run: stratified split of the training group, model selection by
    macro-F1 on the held-out fraction (diagonal entries score that same
    held-out fraction), then evaluation across groups. Quality-control
    items are expected to be removed by the caller beforehand.
    """
    if len(groups) < 2:
        raise MetricsError("transfer experiment needs at least 2 groups")
    if not 0.0 < split < 1.0:
        raise MetricsError(f"split must be in (0, 1), got {split}")
    resolved = {g: resolve_group_labels(list(d)) for g, d in groups.items()}
    for g, rows in resolved.items():
        if len(rows) < 10:
            raise MetricsError(
                f"group {g!r} has only {len(rows)} documents after label resolution"
            )
    names = tuple(sorted(resolved))
    mean = np.zeros((len(names), len(names)))
    std = np.zeros_like(mean)
    scores: dict[tuple[int, int], list[float]] = defaultdict(list)
    for run in range(runs):
        rng = random.Random(seed + run)
        run_tcfg = TrainConfig(
            epochs=tcfg.epochs,
            learning_rate=tcfg.learning_rate,
            batch_size=tcfg.batch_size,
            l2=tcfg.l2,
            seed=seed + run,
        )
        for gi, g in enumerate(names):
            train_part, eval_part = _stratified_split(resolved[g][:], split, rng)
            train_ids = {doc.id for doc, _ in train_part}
            eval_ids = {doc.id for doc, _ in eval_part}
            if train_ids & eval_ids:
                raise MetricsError("train/eval split leaked document ids")
            snapshot = train_best(train_part, eval_part, run_tcfg, fcfg)
            for hi, h in enumerate(names):
                if hi == gi:
                    scores[(gi, hi)].append(evaluate(snapshot, eval_part).macro_f1)
                else:
                    scores[(gi, hi)].append(evaluate(snapshot, resolved[h]).macro_f1)
    for (gi, hi), vals in scores.items():
        mean[gi, hi] = float(np.mean(vals))
        std[gi, hi] = float(np.std(vals))
    return TransferMatrix(groups=names, mean=mean, std=std, runs=runs)


def render_agreement_table(reports: Sequence[AgreementReport]) -> str:
    """Text table: one column pair (Acc, IAA) per group, rows per round."""
    groups = sorted({r.group for r in reports})
    scopes = sorted(
        {r.scope for r in reports}, key=lambda s: (s == "total", s)
    )
    by_key = {(r.group, r.scope): r for r in reports}
    header1 = f"{'':10}" + "".join(f"{g:>14}" for g in groups)
    header2 = f"{'':10}" + "".join(f"{'Acc':>7}{'IAA':>7}" for _ in groups)
    lines = [header1, header2]
    for scope in scopes:
        label = "Total" if scope == "total" else scope.replace("round", "Round ")
        row = f"{label:10}"
        for g in groups:
            r = by_key.get((g, scope))
            row += f"{r.accuracy:7.2f}{r.kappa:7.2f}" if r else f"{'-':>7}{'-':>7}"
        lines.append(row)
    return "\n".join(lines)


def correction_matrix_to_csv(matrix: np.ndarray) -> str:
    lines = ["suggested\\chosen," + ",".join(label.name for label in LABELS)]
    for label in LABELS:
        row = matrix[int(label)]
        lines.append(label.name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def divergence_to_csv(series_by_annotator: dict[str, list[DivergencePoint]]) -> str:
    lines = ["annotator,model_version,n_train,n_diverging"]
    for annotator in sorted(series_by_annotator):
        for p in series_by_annotator[annotator]:
            lines.append(f"{annotator},{p.model_version},{p.n_train},{p.n_diverging}")
    return "\n".join(lines) + "\n"


def reports_to_json(
    agreement: Sequence[AgreementReport],
    acceptance: Optional[AcceptanceReport] = None,
    correction: Optional[np.ndarray] = None,
    divergence: Optional[dict[str, list[DivergencePoint]]] = None,
    transfer: Optional[TransferMatrix] = None,
) -> str:
    payload: dict = {"agreement": [r.to_dict() for r in agreement]}
    if acceptance is not None:
        payload["acceptance"] = acceptance.to_dict()
    if correction is not None:
        payload["correction_matrix"] = {
            "labels": [label.name for label in LABELS],
            "counts": correction.tolist(),
        }
    if divergence is not None:
        payload["divergence"] = {
            ann: [dataclasses.asdict(p) for p in series]
            for ann, series in divergence.items()
        }
    if transfer is not None:
        payload["transfer"] = transfer.to_dict()
    return json.dumps(payload, indent=2, sort_keys=True)
