"""Controlled annotation study orchestration.

Builds per-annotator round plans (new items plus shared quality-control
items at random positions), routes label suggestions per group policy,
fires per-annotator retraining for the interactive group, and keeps an
append-only log from which the whole study state can be replayed.

The Study object is a single-writer state machine; callers that handle
concurrent annotators (the HTTP service) serialize writes around it.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Iterator, Optional, Protocol, Sequence, Union

from .corpus import Corpus, Document
from .labels import LabelCategory
from .suggester import (
    FeatureConfig,
    ModelSnapshot,
    Suggestion,
    TrainConfig,
    predict,
    train,
)

EXPERT_OWNER = "expert"
EXPERT_VERSION = 0


class StudyError(Exception):
    pass


class OutOfOrderError(StudyError):
    pass


class DuplicateSubmitError(StudyError):
    def __init__(self, annotator_id: str, document_id: str):
        self.annotator_id = annotator_id
        self.document_id = document_id
        super().__init__(f"{annotator_id} already submitted {document_id}")


class RoundComplete(Exception):
    """All items of the current round are done; the round awaits its lock."""

    def __init__(self, annotator_id: str, round_index: int):
        self.annotator_id = annotator_id
        self.round_index = round_index
        super().__init__(f"{annotator_id} completed round {round_index}")


class StudyComplete(Exception):
    def __init__(self, annotator_id: str):
        self.annotator_id = annotator_id
        super().__init__(f"{annotator_id} completed the study")


class SuggestionMode(str, enum.Enum):
    none = "none"
    static = "static"
    interactive = "interactive"


DEFAULT_GROUPS: dict[str, SuggestionMode] = {
    "G1": SuggestionMode.none,
    "G2": SuggestionMode.static,
    "G3": SuggestionMode.interactive,
}


@dataclass(frozen=True)
class StudyConfig:
    groups: dict[str, SuggestionMode] = field(
        default_factory=lambda: dict(DEFAULT_GROUPS)
    )
    annotators_per_group: int = 7
    rounds: int = 2
    new_per_round: int = 70
    control_per_round: int = 30
    retrain_batch: int = 10
    interactive_start_round: int = 2
    freeze_after_round_1: bool = False
    seed: int = 0
    tcfg: TrainConfig = field(default_factory=TrainConfig)
    fcfg: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.retrain_batch < 1:
            raise ValueError("retrain_batch must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.new_per_round < 0 or self.control_per_round < 0:
            raise ValueError("per-round item counts must be >= 0")

    @property
    def items_per_round(self) -> int:
        return self.new_per_round + self.control_per_round

    @property
    def total_annotators(self) -> int:
        return self.annotators_per_group * len(self.groups)


@dataclass(frozen=True)
class PlanEntry:
    document: Document
    is_control: bool


@dataclass(frozen=True)
class RoundPlan:
    annotator_id: str
    round_index: int
    entries: tuple[PlanEntry, ...]


@dataclass(frozen=True)
class AnnotationEvent:
    annotator_id: str
    group: str
    document_id: str
    round: int
    position: int
    is_control: bool
    suggestion: Optional[Suggestion]
    chosen: LabelCategory
    accepted: Optional[bool]
    started_at: datetime
    submitted_at: datetime

    @property
    def latency(self) -> float:
        return (self.submitted_at - self.started_at).total_seconds()


@dataclass(frozen=True)
class RoundFinish:
    """The explicit end-of-round lock; durable so replay restores the cursor."""

    annotator_id: str
    round_index: int
    at: datetime


LogRecord = Union[AnnotationEvent, RoundFinish]


@dataclass
class AnnotatorProfile:
    id: str
    group: str
    mode: SuggestionMode
    current_round: int = 1
    position: int = 0
    completed: bool = False
    non_control_count: int = 0
    since_last_retrain: int = 0
    completed_retrains: int = 0
    flagged_outlier: bool = False
    pending: Optional["NextItem"] = None
    history: list[tuple[Document, LabelCategory]] = field(default_factory=list)

    @property
    def current_model_version(self) -> Optional[int]:
        if self.mode is not SuggestionMode.interactive:
            return None
        return self.completed_retrains


@dataclass(frozen=True)
class NextItem:
    document: Document
    suggestion: Optional[Suggestion]
    round_index: int
    position: int
    total: int


@dataclass(frozen=True)
class Ack:
    retrain_scheduled: bool
    event: AnnotationEvent


@dataclass(frozen=True)
class RoundSummary:
    annotator_id: str
    round_index: int
    n_items: int
    n_suggested: int
    n_accepted: int
    mean_latency: float
    study_complete: bool


@dataclass(frozen=True)
class RetrainRequest:
    annotator_id: str
    version: int
    data: tuple[tuple[Document, LabelCategory], ...]
    seed: int


class SnapshotStore(Protocol):
    def get(self, owner: str, version: int) -> Optional[ModelSnapshot]: ...

    def put(self, snapshot: ModelSnapshot) -> None: ...


def derive_seed(*parts) -> int:
    """Stable 31-bit child seed from heterogeneous parts (no salted
    hashing, and small enough for every RNG in use)."""
    digest = hashlib.blake2b(
        ":".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") >> 33


def study_config_to_dict(cfg: StudyConfig) -> dict:
    return {
        "groups": {name: mode.value for name, mode in cfg.groups.items()},
        "annotators_per_group": cfg.annotators_per_group,
        "rounds": cfg.rounds,
        "new_per_round": cfg.new_per_round,
        "control_per_round": cfg.control_per_round,
        "retrain_batch": cfg.retrain_batch,
        "interactive_start_round": cfg.interactive_start_round,
        "freeze_after_round_1": cfg.freeze_after_round_1,
        "seed": cfg.seed,
        "train": {
            "epochs": cfg.tcfg.epochs,
            "learning_rate": cfg.tcfg.learning_rate,
            "batch_size": cfg.tcfg.batch_size,
            "l2": cfg.tcfg.l2,
            "seed": cfg.tcfg.seed,
        },
        "features": {
            "n_buckets": cfg.fcfg.n_buckets,
            "ngram_orders": list(cfg.fcfg.ngram_orders),
            "lowercase": cfg.fcfg.lowercase,
            "strip_hash_prefix": cfg.fcfg.strip_hash_prefix,
        },
    }


def study_config_from_dict(d: dict) -> StudyConfig:
    base = StudyConfig()
    groups = {
        name: SuggestionMode(mode)
        for name, mode in d.get("groups", study_config_to_dict(base)["groups"]).items()
    }
    train_d = d.get("train", {})
    feat_d = d.get("features", {})
    return StudyConfig(
        groups=groups,
        annotators_per_group=d.get("annotators_per_group", base.annotators_per_group),
        rounds=d.get("rounds", base.rounds),
        new_per_round=d.get("new_per_round", base.new_per_round),
        control_per_round=d.get("control_per_round", base.control_per_round),
        retrain_batch=d.get("retrain_batch", base.retrain_batch),
        interactive_start_round=d.get(
            "interactive_start_round", base.interactive_start_round
        ),
        freeze_after_round_1=d.get("freeze_after_round_1", base.freeze_after_round_1),
        seed=d.get("seed", base.seed),
        tcfg=TrainConfig(
            epochs=train_d.get("epochs", base.tcfg.epochs),
            learning_rate=train_d.get("learning_rate", base.tcfg.learning_rate),
            batch_size=train_d.get("batch_size", base.tcfg.batch_size),
            l2=train_d.get("l2", base.tcfg.l2),
            seed=train_d.get("seed", base.tcfg.seed),
        ),
        fcfg=FeatureConfig(
            n_buckets=feat_d.get("n_buckets", base.fcfg.n_buckets),
            ngram_orders=tuple(feat_d.get("ngram_orders", base.fcfg.ngram_orders)),
            lowercase=feat_d.get("lowercase", base.fcfg.lowercase),
            strip_hash_prefix=feat_d.get(
                "strip_hash_prefix", base.fcfg.strip_hash_prefix
            ),
        ),
    )


class Study:
    def __init__(
        self,
        cfg: StudyConfig,
        plans: dict[str, dict[int, RoundPlan]],
        profiles: dict[str, AnnotatorProfile],
        expert_snapshot: ModelSnapshot,
        expert_gold: Sequence[tuple[Document, LabelCategory]],
        snapshot_store: Optional[SnapshotStore] = None,
        retrain_runner: Optional[Callable[["Study", RetrainRequest], None]] = None,
    ):
        self.cfg = cfg
        self.plans = plans
        self.profiles = profiles
        self.expert_snapshot = expert_snapshot
        self.expert_gold = list(expert_gold)
        self.snapshot_store = snapshot_store
        self.retrain_runner = retrain_runner or run_retrain_inline
        self.personal: dict[str, ModelSnapshot] = {}
        self.log: list[LogRecord] = []
        self._submitted: dict[tuple[str, str], AnnotationEvent] = {}
        if snapshot_store is not None:
            snapshot_store.put(expert_snapshot)

    @property
    def events(self) -> list[AnnotationEvent]:
        return [r for r in self.log if isinstance(r, AnnotationEvent)]

    def profile(self, annotator_id: str) -> AnnotatorProfile:
        try:
            return self.profiles[annotator_id]
        except KeyError:
            raise StudyError(f"unknown annotator {annotator_id!r}") from None

    def submitted_event(
        self, annotator_id: str, document_id: str
    ) -> Optional[AnnotationEvent]:
        return self._submitted.get((annotator_id, document_id))

    def publish_snapshot(self, annotator_id: str, snapshot: ModelSnapshot) -> None:
        """Atomically swap in a freshly trained personal snapshot."""
        profile = self.profile(annotator_id)
        self.personal[annotator_id] = snapshot
        if snapshot.version > profile.completed_retrains:
            profile.completed_retrains = snapshot.version
        if self.snapshot_store is not None:
            self.snapshot_store.put(snapshot)


def materialize_snapshot(study: Study, request: RetrainRequest) -> ModelSnapshot:
    """Reload the requested version from the store, or retrain it; both
    paths land on identical bytes because training is deterministic."""
    if study.snapshot_store is not None:
        stored = study.snapshot_store.get(request.annotator_id, request.version)
        if stored is not None:
            return stored
    tcfg = TrainConfig(
        epochs=study.cfg.tcfg.epochs,
        learning_rate=study.cfg.tcfg.learning_rate,
        batch_size=study.cfg.tcfg.batch_size,
        l2=study.cfg.tcfg.l2,
        seed=request.seed,
    )
    return train(
        list(request.data),
        tcfg,
        study.cfg.fcfg,
        version=request.version,
        owner=request.annotator_id,
    )


def run_retrain_inline(study: Study, request: RetrainRequest) -> None:
    """Default retrain runner: train (or reload) synchronously."""
    study.publish_snapshot(request.annotator_id, materialize_snapshot(study, request))


def build_study(
    cfg: StudyConfig,
    pool: Corpus,
    expert_gold: Sequence[tuple[Document, LabelCategory]],
    control_pool_ids: Optional[Sequence[str]] = None,
    snapshot_store: Optional[SnapshotStore] = None,
    retrain_runner: Optional[Callable[[Study, RetrainRequest], None]] = None,
) -> Study:
    """Assemble round plans for every annotator and train the expert model.

    Control items come from the expert gold set, are identical for all
    annotators within a round, never repeat across rounds, and sit at
    uniformly random positions. New items are disjoint between
    annotators and rounds.
    """
    if not expert_gold:
        raise StudyError("expert gold data is empty")
    gold_docs = {doc.id: doc for doc, _ in expert_gold}
    if control_pool_ids is None:
        control_pool_ids = list(gold_docs)
    else:
        unknown = [i for i in control_pool_ids if i not in gold_docs]
        if unknown:
            raise StudyError(f"control pool ids missing from expert gold: {unknown}")
    needed_controls = cfg.rounds * cfg.control_per_round
    if len(control_pool_ids) < needed_controls:
        raise StudyError(
            f"control pool holds {len(control_pool_ids)} documents, "
            f"need {needed_controls}"
        )
    overlap = [i for i in control_pool_ids if i in pool]
    if overlap:
        raise StudyError(f"pool overlaps control pool: {overlap[:5]}")
    needed_new = cfg.total_annotators * cfg.rounds * cfg.new_per_round
    if len(pool) < needed_new:
        raise StudyError(f"pool holds {len(pool)} documents, need {needed_new}")

    control_rng = random.Random(derive_seed(cfg.seed, "controls"))
    control_order = list(control_pool_ids)
    control_rng.shuffle(control_order)
    round_controls = {
        r: control_order[(r - 1) * cfg.control_per_round : r * cfg.control_per_round]
        for r in range(1, cfg.rounds + 1)
    }

    pool_rng = random.Random(derive_seed(cfg.seed, "pool"))
    pool_order = list(pool.ids)
    pool_rng.shuffle(pool_order)

    annotator_ids = [
        (group, f"{group}-{i:02d}")
        for group in cfg.groups
        for i in range(1, cfg.annotators_per_group + 1)
    ]

    plans: dict[str, dict[int, RoundPlan]] = {}
    profiles: dict[str, AnnotatorProfile] = {}
    cursor = 0
    for group, annotator_id in annotator_ids:
        profiles[annotator_id] = AnnotatorProfile(
            id=annotator_id, group=group, mode=cfg.groups[group]
        )
        plans[annotator_id] = {}
        for r in range(1, cfg.rounds + 1):
            new_ids = pool_order[cursor : cursor + cfg.new_per_round]
            cursor += cfg.new_per_round
            pos_rng = random.Random(derive_seed(cfg.seed, "positions", annotator_id, r))
            control_positions = set(
                pos_rng.sample(range(cfg.items_per_round), cfg.control_per_round)
            )
            entries: list[PlanEntry] = []
            new_iter = iter(new_ids)
            control_iter = iter(round_controls[r])
            for pos in range(cfg.items_per_round):
                if pos in control_positions:
                    entries.append(PlanEntry(gold_docs[next(control_iter)], True))
                else:
                    entries.append(PlanEntry(pool.get(next(new_iter)), False))
            plans[annotator_id][r] = RoundPlan(
                annotator_id=annotator_id, round_index=r, entries=tuple(entries)
            )

    expert_snapshot = train(
        list(expert_gold),
        cfg.tcfg,
        cfg.fcfg,
        version=EXPERT_VERSION,
        owner=EXPERT_OWNER,
    )
    return Study(
        cfg=cfg,
        plans=plans,
        profiles=profiles,
        expert_snapshot=expert_snapshot,
        expert_gold=expert_gold,
        snapshot_store=snapshot_store,
        retrain_runner=retrain_runner,
    )


def _suggestion_for(study: Study, profile: AnnotatorProfile, doc: Document) -> Optional[Suggestion]:
    if profile.mode is SuggestionMode.none:
        return None
    if profile.mode is SuggestionMode.static:
        return predict(study.expert_snapshot, doc)
    personal = study.personal.get(profile.id)
    if profile.current_round < study.cfg.interactive_start_round or personal is None:
        return predict(study.expert_snapshot, doc)
    return predict(personal, doc)


def next_item(study: Study, annotator_id: str) -> NextItem:
    """Serve the annotator's current item with a group-policy suggestion.

    Suggestions are computed on demand against the current model, so a
    retrain that lands between calls takes effect on the next call.
    """
    profile = study.profile(annotator_id)
    if profile.completed:
        raise StudyComplete(annotator_id)
    plan = study.plans[annotator_id][profile.current_round]
    if profile.position >= len(plan.entries):
        raise RoundComplete(annotator_id, profile.current_round)
    entry = plan.entries[profile.position]
    item = NextItem(
        document=entry.document,
        suggestion=_suggestion_for(study, profile, entry.document),
        round_index=profile.current_round,
        position=profile.position,
        total=len(plan.entries),
    )
    profile.pending = item
    return item


def submit(
    study: Study,
    annotator_id: str,
    document_id: str,
    chosen: LabelCategory,
    started_at: datetime,
    submitted_at: datetime,
) -> Ack:
    """Record one labeling act; may schedule a retrain for interactive
    annotators at every full batch of new (non-control) items."""
    profile = study.profile(annotator_id)
    if not isinstance(chosen, LabelCategory):
        raise StudyError(f"chosen label {chosen!r} is not a LabelCategory")
    if (annotator_id, document_id) in study._submitted:
        raise DuplicateSubmitError(annotator_id, document_id)
    if profile.pending is None:
        raise OutOfOrderError(
            f"{annotator_id} has no pending item; call next_item first"
        )
    if profile.pending.document.id != document_id:
        raise OutOfOrderError(
            f"expected submit for {profile.pending.document.id!r}, got {document_id!r}"
        )
    latency = (submitted_at - started_at).total_seconds()
    if latency < 0:
        raise StudyError("submitted_at precedes started_at")

    plan = study.plans[annotator_id][profile.current_round]
    entry = plan.entries[profile.position]
    suggestion = profile.pending.suggestion
    event = AnnotationEvent(
        annotator_id=annotator_id,
        group=profile.group,
        document_id=document_id,
        round=profile.current_round,
        position=profile.position,
        is_control=entry.is_control,
        suggestion=suggestion,
        chosen=chosen,
        accepted=(chosen == suggestion.label) if suggestion is not None else None,
        started_at=started_at,
        submitted_at=submitted_at,
    )
    retrain = _apply_event(study, event)
    return Ack(retrain_scheduled=retrain, event=event)


def _apply_event(study: Study, event: AnnotationEvent) -> bool:
    """Advance state for one event; shared by live submits and replay."""
    profile = study.profile(event.annotator_id)
    entry = study.plans[event.annotator_id][event.round].entries[event.position]
    study.log.append(event)
    study._submitted[(event.annotator_id, event.document_id)] = event
    profile.position += 1
    profile.pending = None
    retrain = False
    if not event.is_control:
        profile.non_control_count += 1
        profile.since_last_retrain += 1
        profile.history.append((entry.document, event.chosen))
        if profile.mode is SuggestionMode.interactive:
            frozen = (
                study.cfg.freeze_after_round_1
                and event.round >= study.cfg.interactive_start_round
            )
            if not frozen and profile.since_last_retrain >= study.cfg.retrain_batch:
                profile.since_last_retrain = 0
                version = profile.non_control_count // study.cfg.retrain_batch
                request = RetrainRequest(
                    annotator_id=profile.id,
                    version=version,
                    data=tuple(study.expert_gold) + tuple(profile.history),
                    seed=derive_seed(study.cfg.seed, "retrain", profile.id, version),
                )
                study.retrain_runner(study, request)
                retrain = True
    return retrain


def finish_round(
    study: Study, annotator_id: str, at: Optional[datetime] = None
) -> RoundSummary:
    """The end-of-round lock; only valid once every item is submitted."""
    profile = study.profile(annotator_id)
    if profile.completed:
        raise StudyComplete(annotator_id)
    plan = study.plans[annotator_id][profile.current_round]
    if profile.position < len(plan.entries):
        raise StudyError(
            f"{annotator_id} has {len(plan.entries) - profile.position} items left "
            f"in round {profile.current_round}"
        )
    finished_round = profile.current_round
    record = RoundFinish(
        annotator_id=annotator_id,
        round_index=finished_round,
        at=at or datetime.now(timezone.utc),
    )
    study.log.append(record)
    round_events = [
        e
        for e in study.events
        if e.annotator_id == annotator_id and e.round == finished_round
    ]
    if profile.current_round >= study.cfg.rounds:
        profile.completed = True
    else:
        profile.current_round += 1
        profile.position = 0
    suggested = [e for e in round_events if e.suggestion is not None]
    return RoundSummary(
        annotator_id=annotator_id,
        round_index=finished_round,
        n_items=len(round_events),
        n_suggested=len(suggested),
        n_accepted=sum(1 for e in suggested if e.accepted),
        mean_latency=(
            sum(e.latency for e in round_events) / len(round_events)
            if round_events
            else 0.0
        ),
        study_complete=profile.completed,
    )


def flag_outliers(
    events: Sequence[AnnotationEvent],
    min_mean_latency: float = 1.0,
    max_acceptance: float = 0.95,
) -> list[str]:
    """Annotators who raced through items while accepting nearly all
    suggestions; excluded from exported datasets, kept in the raw log."""
    by_annotator: dict[str, list[AnnotationEvent]] = {}
    for e in events:
        by_annotator.setdefault(e.annotator_id, []).append(e)
    flagged = []
    for annotator_id, evs in by_annotator.items():
        mean_latency = sum(e.latency for e in evs) / len(evs)
        suggested = [e for e in evs if e.suggestion is not None]
        if not suggested:
            continue
        acceptance = sum(1 for e in suggested if e.accepted) / len(suggested)
        if mean_latency < min_mean_latency and acceptance > max_acceptance:
            flagged.append(annotator_id)
    return sorted(flagged)


def exclude_annotators(
    events: Sequence[AnnotationEvent], annotator_ids: Iterable[str]
) -> list[AnnotationEvent]:
    drop = set(annotator_ids)
    return [e for e in events if e.annotator_id not in drop]


def _ts(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat()


def event_to_json_line(e: AnnotationEvent) -> str:
    return json.dumps(
        {
            "annotator": e.annotator_id,
            "group": e.group,
            "round": e.round,
            "position": e.position,
            "doc_id": e.document_id,
            "suggestion_label": e.suggestion.label.name if e.suggestion else None,
            "suggestion_confidence": e.suggestion.confidence if e.suggestion else None,
            "model_version": e.suggestion.model_version if e.suggestion else None,
            "chosen": e.chosen.name,
            "accepted": e.accepted,
            "started_at": _ts(e.started_at),
            "submitted_at": _ts(e.submitted_at),
        },
        ensure_ascii=False,
    )


def export_events(events: Sequence[AnnotationEvent]) -> Iterator[str]:
    for e in events:
        yield event_to_json_line(e)


def _parse_ts(raw: str) -> datetime:
    return datetime.fromisoformat(raw.replace("Z", "+00:00"))


def event_from_json_line(
    line: str, control_ids: Optional[set[str]] = None
) -> AnnotationEvent:
    """Rebuild an event from an export line; control membership is not
    part of the export schema, so it comes from the gold set when needed."""
    rec = json.loads(line)
    suggestion = None
    if rec.get("suggestion_label") is not None:
        suggestion = Suggestion(
            document_id=rec["doc_id"],
            label=LabelCategory.from_name(rec["suggestion_label"]),
            confidence=rec["suggestion_confidence"],
            model_version=rec["model_version"],
        )
    return AnnotationEvent(
        annotator_id=rec["annotator"],
        group=rec["group"],
        document_id=rec["doc_id"],
        round=rec["round"],
        position=rec["position"],
        is_control=rec["doc_id"] in control_ids if control_ids is not None else False,
        suggestion=suggestion,
        chosen=LabelCategory.from_name(rec["chosen"]),
        accepted=rec["accepted"],
        started_at=_parse_ts(rec["started_at"]),
        submitted_at=_parse_ts(rec["submitted_at"]),
    )


def replay_study(
    cfg: StudyConfig,
    pool: Corpus,
    expert_gold: Sequence[tuple[Document, LabelCategory]],
    log: Sequence[LogRecord],
    control_pool_ids: Optional[Sequence[str]] = None,
    snapshot_store: Optional[SnapshotStore] = None,
) -> Study:
    """Rebuild a study from its inputs plus the append-only log.

    Events are applied as recorded facts; retrains re-fire at the same
    triggers and either reload the stored snapshot for that version or
    retrain deterministically, giving identical state either way.
    """
    study = build_study(
        cfg,
        pool,
        expert_gold,
        control_pool_ids=control_pool_ids,
        snapshot_store=snapshot_store,
    )
    for record in log:
        if isinstance(record, RoundFinish):
            finish_round(study, record.annotator_id, at=record.at)
            continue
        profile = study.profile(record.annotator_id)
        if record.round != profile.current_round:
            raise StudyError(
                f"log out of order: {record.annotator_id} event for round "
                f"{record.round} while in round {profile.current_round}"
            )
        if record.position != profile.position:
            raise StudyError(
                f"log out of order: {record.annotator_id} event at position "
                f"{record.position}, expected {profile.position}"
            )
        expected = study.plans[record.annotator_id][record.round].entries[
            record.position
        ]
        if expected.document.id != record.document_id:
            raise StudyError(
                f"log document {record.document_id!r} does not match plan "
                f"({expected.document.id!r}); wrong seed or inputs?"
            )
        _apply_event(study, record)
    return study
