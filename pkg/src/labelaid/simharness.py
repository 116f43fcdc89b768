"""Simulated annotators and end-to-end study simulation.

The behavioral model is anchor-then-judge: with a configurable
probability the annotator adopts a shown suggestion outright, otherwise
they judge independently and hit the true label with a per-class
accuracy. This is an explicit, parameterized assumption used to test
the pipeline and reproduce directional findings without humans.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional, Sequence, Union

import numpy as np

from .aggregation import GoldLabel, GoldProvenance
from .corpus import Corpus, Document
from .labels import LABELS, LabelCategory
from .metrics import (
    AcceptanceReport,
    AgreementReport,
    DivergencePoint,
    acceptance_rate,
    agreement_reports,
    correction_matrix,
    divergence_series,
)
from .orchestrator import (
    AnnotationEvent,
    LogRecord,
    ModelSnapshot,
    RoundComplete,
    Study,
    StudyConfig,
    SuggestionMode,
    build_study,
    derive_seed,
    exclude_annotators,
    finish_round,
    flag_outliers,
    next_item,
    submit,
)
from .suggester import Suggestion

SIM_EPOCH = datetime(2021, 3, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SimAnnotatorConfig:
    per_class_accuracy: dict[LabelCategory, float] = field(
        default_factory=lambda: {label: 0.7 for label in LABELS}
    )
    anchoring_prob: float = 0.0
    latency_mean: float = 8.0
    latency_sd: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for label, p in self.per_class_accuracy.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"accuracy for {label} out of [0,1]: {p}")
        if not 0.0 <= self.anchoring_prob <= 1.0:
            raise ValueError(f"anchoring_prob out of [0,1]: {self.anchoring_prob}")
        if self.latency_mean <= 0:
            raise ValueError("latency_mean must be > 0")
        if self.latency_sd < 0:
            raise ValueError("latency_sd must be >= 0")


def uniform_accuracy(p: float) -> dict[LabelCategory, float]:
    return {label: p for label in LABELS}


class SimAnnotator:
    """Stateful simulated annotator; one seeded RNG drives all decisions."""

    def __init__(self, cfg: SimAnnotatorConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed if seed is None else seed)

    def annotate(
        self, true_label: LabelCategory, suggestion: Optional[Suggestion]
    ) -> tuple[LabelCategory, float]:
        if suggestion is not None and self.rng.random() < self.cfg.anchoring_prob:
            chosen = suggestion.label
        else:
            chosen = self._judge(true_label)
        return chosen, self._latency()

    def _judge(self, true_label: LabelCategory) -> LabelCategory:
        if self.rng.random() < self.cfg.per_class_accuracy[true_label]:
            return true_label
        others = [label for label in LABELS if label != true_label]
        return self.rng.choice(others)

    def _latency(self) -> float:
        while True:
            draw = self.rng.normalvariate(self.cfg.latency_mean, self.cfg.latency_sd)
            if draw >= 0.1:
                return draw


def simulate_annotator(
    cfg: SimAnnotatorConfig,
    true_label: LabelCategory,
    suggestion: Optional[Suggestion] = None,
    rng: Optional[random.Random] = None,
) -> tuple[LabelCategory, float]:
    """One labeling decision. Pass a persistent rng to draw sequences; a
    fresh rng is seeded from the config otherwise."""
    annotator = SimAnnotator(cfg)
    if rng is not None:
        annotator.rng = rng
    return annotator.annotate(true_label, suggestion)


class MemorySnapshotStore:
    """Keeps every published snapshot so divergence can be tracked."""

    def __init__(self):
        self.snapshots: dict[tuple[str, int], ModelSnapshot] = {}

    def get(self, owner: str, version: int) -> Optional[ModelSnapshot]:
        return self.snapshots.get((owner, version))

    def put(self, snapshot: ModelSnapshot) -> None:
        self.snapshots[(snapshot.owner, snapshot.version)] = snapshot

    def versions(self, owner: str) -> list[ModelSnapshot]:
        return [
            snap
            for (own, _), snap in sorted(
                self.snapshots.items(), key=lambda kv: kv[0][1]
            )
            if own == owner
        ]


@dataclass
class SimStudyResult:
    study: Study
    log: list[LogRecord]
    events: list[AnnotationEvent]
    control_gold: list[GoldLabel]
    agreement: list[AgreementReport]
    acceptance: AcceptanceReport
    correction: np.ndarray
    divergence: dict[str, list[DivergencePoint]]
    outliers: list[str]
    group_summary: dict[str, dict[str, float]]


def run_simulated_study(
    cfg: StudyConfig,
    pool: Corpus,
    expert_gold: Sequence[tuple[Document, LabelCategory]],
    oracle: dict[str, LabelCategory],
    sim_cfg: Union[SimAnnotatorConfig, dict[str, SimAnnotatorConfig]],
    seed: int = 0,
) -> SimStudyResult:
    """Drive the orchestrator end to end with simulated annotators.

    Every pool and control document needs an oracle label. Annotators
    run one after another within each round, each on an RNG derived
    from (seed, annotator id), so runs are fully reproducible.
    """
    for doc in pool:
        if doc.id not in oracle:
            raise ValueError(f"pool document {doc.id!r} has no oracle label")
    for doc, _ in expert_gold:
        if doc.id not in oracle:
            raise ValueError(f"expert document {doc.id!r} has no oracle label")

    store = MemorySnapshotStore()
    study = build_study(cfg, pool, expert_gold, snapshot_store=store)
    annotators: dict[str, SimAnnotator] = {}
    clocks: dict[str, datetime] = {}
    for annotator_id in study.profiles:
        if isinstance(sim_cfg, dict):
            a_cfg = sim_cfg[annotator_id]
            a_seed = a_cfg.seed
        else:
            a_cfg = sim_cfg
            a_seed = derive_seed(seed, sim_cfg.seed, annotator_id)
        annotators[annotator_id] = SimAnnotator(a_cfg, seed=a_seed)
        clocks[annotator_id] = SIM_EPOCH

    for _ in range(cfg.rounds):
        for annotator_id in sorted(study.profiles):
            sim = annotators[annotator_id]
            while True:
                try:
                    item = next_item(study, annotator_id)
                except RoundComplete:
                    finish_round(study, annotator_id, at=clocks[annotator_id])
                    break
                true_label = oracle[item.document.id]
                chosen, latency = sim.annotate(true_label, item.suggestion)
                started = clocks[annotator_id]
                submitted = started + timedelta(seconds=latency)
                clocks[annotator_id] = submitted
                submit(
                    study,
                    annotator_id,
                    item.document.id,
                    chosen,
                    started_at=started,
                    submitted_at=submitted,
                )

    control_ids = {
        entry.document.id
        for plans in study.plans.values()
        for plan in plans.values()
        for entry in plan.entries
        if entry.is_control
    }
    control_gold = [
        GoldLabel(
            document_id=doc_id,
            label=oracle[doc_id],
            provenance=GoldProvenance.adjudicated,
            posterior_entropy=0.0,
        )
        for doc_id in sorted(control_ids)
    ]
    return summarize_study(study, store, control_gold)


def summarize_study(
    study: Study, store: MemorySnapshotStore, control_gold: list[GoldLabel]
) -> SimStudyResult:
    """Compute the full report bundle from a finished (or partial) study."""
    all_events = study.events
    outliers = flag_outliers(all_events)
    events = exclude_annotators(all_events, outliers)
    agreement = agreement_reports(events, control_gold)
    acceptance = acceptance_rate(events)
    correction = correction_matrix(events)

    control_doc_ids = {g.document_id for g in control_gold}
    eval_docs = [doc for doc, _ in study.expert_gold if doc.id in control_doc_ids]
    divergence: dict[str, list[DivergencePoint]] = {}
    for annotator_id, profile in sorted(study.profiles.items()):
        if profile.mode is not SuggestionMode.interactive:
            continue
        snaps = store.versions(annotator_id)
        if snaps and eval_docs:
            divergence[annotator_id] = divergence_series(
                study.expert_snapshot, snaps, eval_docs
            )

    group_summary: dict[str, dict[str, float]] = {}
    for report in agreement:
        if report.scope != "total":
            continue
        group_summary[report.group] = {
            "kappa": report.kappa,
            "accuracy": report.accuracy,
        }
    for group, rate in acceptance.per_group.items():
        group_summary.setdefault(group, {})["acceptance_rate"] = rate
    return SimStudyResult(
        study=study,
        log=list(study.log),
        events=events,
        control_gold=control_gold,
        agreement=agreement,
        acceptance=acceptance,
        correction=correction,
        divergence=divergence,
        outliers=outliers,
        group_summary=group_summary,
    )


# Synthetic corpus generation: each class owns a disjoint keyword set and
# the oracle label is the planted class, so suggester quality is
# controlled by the purity knob.

CLASS_KEYWORDS: dict[LabelCategory, tuple[str, ...]] = {
    LabelCategory.Unrelated: ("zebrine", "quorvat"),
    LabelCategory.Comment: ("merlow", "tandric"),
    LabelCategory.Support: ("favrel", "goltine"),
    LabelCategory.Refute: ("nixbar", "dreylock"),
}

# 132 two-syllable pseudo-words; a wide filler vocabulary keeps any one
# filler rare, so class signal stays on the planted keywords
_FILLER = tuple(
    c1 + v1 + c2 + v2
    for c1 in "bdfglmnprst"
    for v1 in "ao"
    for c2 in "krt"
    for v2 in "ei"
)


def generate_corpus(
    n: int,
    seed: int,
    purity: float = 1.0,
    id_prefix: str = "doc",
    min_filler: int = 4,
    max_filler: int = 9,
) -> tuple[Corpus, dict[str, LabelCategory]]:
    """Balanced synthetic corpus with keyword-planted classes.

    With probability 1-purity the planted keyword comes from a different
    class while the oracle label stays true, capping the accuracy a
    keyword model can reach near `purity`.
    """
    rng = random.Random(seed)
    docs = []
    oracle: dict[str, LabelCategory] = {}
    for i in range(n):
        label = LABELS[i % len(LABELS)]
        if rng.random() < purity:
            planted = label
        else:
            planted = rng.choice([l for l in LABELS if l != label])
        keyword = rng.choice(CLASS_KEYWORDS[planted])
        words = [rng.choice(_FILLER) for _ in range(rng.randint(min_filler, max_filler))]
        words.insert(rng.randrange(len(words) + 1), keyword)
        doc_id = f"{id_prefix}-{i:06d}"
        docs.append(Document(id=doc_id, text=" ".join(words)))
        oracle[doc_id] = label
    return Corpus(docs), oracle


def generate_study_inputs(
    cfg: StudyConfig,
    expert_size: int,
    seed: int,
    purity: float = 1.0,
    pool_margin: int = 0,
) -> tuple[Corpus, list[tuple[Document, LabelCategory]], dict[str, LabelCategory]]:
    """Pool, expert gold and oracle sized for a study configuration."""
    pool_size = cfg.total_annotators * cfg.rounds * cfg.new_per_round + pool_margin
    pool, pool_oracle = generate_corpus(
        pool_size, derive_seed(seed, "pool"), purity=purity, id_prefix="pool"
    )
    expert_docs, expert_oracle = generate_corpus(
        expert_size, derive_seed(seed, "expert"), purity=purity, id_prefix="expert"
    )
    expert_gold = [(doc, expert_oracle[doc.id]) for doc in expert_docs]
    oracle = {**pool_oracle, **expert_oracle}
    return pool, expert_gold, oracle
