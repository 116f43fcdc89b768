"""HTTP face of the annotation service (JSON over HTTP, /v1).

Each study is one single-writer state machine guarded by a lock; log
appends are durable (flushed and fsynced) before a submit is
acknowledged. Retraining runs on a background queue per study with at
most one job active and newer triggers replacing queued ones, and the
finished snapshot swaps in atomically for subsequent next-item calls.
"""

from __future__ import annotations

import logging
import secrets
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse

from ..aggregation import GoldLabel, GoldProvenance
from ..labels import LabelCategory
from ..metrics import (
    acceptance_rate,
    agreement_reports,
    control_accuracy,
    correction_matrix,
    divergence_series,
    render_agreement_table,
    resolve_group_labels,
    transfer_experiment,
)
from ..orchestrator import (
    AnnotationEvent,
    DuplicateSubmitError,
    OutOfOrderError,
    RetrainRequest,
    RoundComplete,
    Study,
    StudyComplete,
    StudyError,
    SuggestionMode,
    build_study,
    event_to_json_line,
    exclude_annotators,
    finish_round,
    flag_outliers,
    materialize_snapshot,
    next_item,
    study_config_from_dict,
    submit,
)
from .config import ServiceConfig, load_service_config
from .schemas import (
    CreateStudyRequest,
    CreateStudyResponse,
    FinishRoundResponse,
    NextResponse,
    RegisterRequest,
    RegisterResponse,
    SubmitRequest,
    SubmitResponse,
    SuggestionPayload,
)
from .store import (
    EventLog,
    SnapshotDirStore,
    StudyDir,
    StudyMeta,
    load_study_inputs,
    recover_study,
)

logger = logging.getLogger(__name__)


class AsyncRetrainRunner:
    """Background retrain queue: one worker per study, newest request per
    annotator wins, snapshot published under the study lock."""

    def __init__(self, study_lock: threading.RLock):
        self._study_lock = study_lock
        self._cv = threading.Condition()
        self._pending: dict[str, RetrainRequest] = {}
        self._active: set[str] = set()
        self._thread: Optional[threading.Thread] = None
        self.study: Optional[Study] = None

    def __call__(self, study: Study, request: RetrainRequest) -> None:
        self.study = study
        with self._cv:
            self._pending[request.annotator_id] = request
            if self._thread is None:
                self._thread = threading.Thread(target=self._run, daemon=True)
                self._thread.start()
            self._cv.notify()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._pending:
                    self._cv.wait()
                annotator_id = next(iter(self._pending))
                request = self._pending.pop(annotator_id)
                self._active.add(annotator_id)
            try:
                snapshot = materialize_snapshot(self.study, request)
                with self._study_lock:
                    self.study.publish_snapshot(request.annotator_id, snapshot)
            except Exception:
                logger.exception("retrain failed for %s", request.annotator_id)
            finally:
                with self._cv:
                    self._active.discard(annotator_id)
                    self._cv.notify_all()

    def drain(self, timeout: float = 120.0) -> None:
        deadline = time.monotonic() + timeout
        with self._cv:
            while self._pending or self._active:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("retrain queue did not drain in time")
                self._cv.wait(remaining)


class StudyRuntime:
    def __init__(self, meta: StudyMeta, study: Study, study_dir: StudyDir):
        self.meta = meta
        self.study = study
        self.dir = study_dir
        self.lock = threading.RLock()
        self.event_log = EventLog(study_dir.log_path)
        self.snapshot_store = SnapshotDirStore(study_dir.snapshots_dir)
        self.tokens: dict[str, str] = {}
        self.claimed: set[str] = set()
        for rec in study_dir.read_annotators():
            self.tokens[rec["token"]] = rec["annotator_id"]
            self.claimed.add(rec["annotator_id"])
        self.retrainer = AsyncRetrainRunner(self.lock)
        study.retrain_runner = self.retrainer

    def register(self, group: Optional[str]) -> RegisterResponse:
        with self.lock:
            groups = list(self.study.cfg.groups)
            if group is None:
                claimed_per_group = {
                    g: sum(1 for a in self.claimed if self.study.profiles[a].group == g)
                    for g in groups
                }
                candidates = [
                    g
                    for g in groups
                    if claimed_per_group[g] < self.study.cfg.annotators_per_group
                ]
                if not candidates:
                    raise HTTPException(409, "all annotator slots are claimed")
                group = min(candidates, key=lambda g: (claimed_per_group[g], g))
            elif group not in groups:
                raise HTTPException(400, f"unknown group {group!r}")
            free = sorted(
                a
                for a, p in self.study.profiles.items()
                if p.group == group and a not in self.claimed
            )
            if not free:
                raise HTTPException(409, f"group {group} has no unclaimed slots")
            annotator_id = free[0]
            token = secrets.token_hex(16)
            self.claimed.add(annotator_id)
            self.tokens[token] = annotator_id
            self.dir.append_annotator(annotator_id, group, token)
            return RegisterResponse(annotator_id=annotator_id, token=token, group=group)

    def control_gold(self) -> list[GoldLabel]:
        labels = {doc.id: label for doc, label in self.study.expert_gold}
        control_ids = sorted(
            {
                entry.document.id
                for plans in self.study.plans.values()
                for plan in plans.values()
                for entry in plan.entries
                if entry.is_control
            }
        )
        return [
            GoldLabel(
                document_id=doc_id,
                label=labels[doc_id],
                provenance=GoldProvenance.adjudicated,
                posterior_entropy=0.0,
            )
            for doc_id in control_ids
        ]


def _bearer(authorization: Optional[str]) -> str:
    if not authorization or not authorization.startswith("Bearer "):
        raise HTTPException(401, "missing bearer token")
    return authorization.removeprefix("Bearer ").strip()


def _parse_ts(raw: str) -> datetime:
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError:
        raise HTTPException(400, f"invalid RFC 3339 timestamp {raw!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def _retrain_was_scheduled(study: Study, event: AnnotationEvent) -> bool:
    """Recompute the original ack's retrain flag for idempotent repeats."""
    if event.is_control:
        return False
    profile = study.profiles[event.annotator_id]
    if profile.mode is not SuggestionMode.interactive:
        return False
    if (
        study.cfg.freeze_after_round_1
        and event.round >= study.cfg.interactive_start_round
    ):
        return False
    count = 0
    for e in study.events:
        if e.annotator_id != event.annotator_id or e.is_control:
            continue
        count += 1
        if e.document_id == event.document_id:
            break
    return count % study.cfg.retrain_batch == 0


def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or load_service_config()
    config.data_dir.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="labelaid annotation service", version="0.1.0")
    # the browser client may be hosted separately; a reverse proxy is
    # assumed for anything stricter
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    registry: dict[str, StudyRuntime] = {}
    app.state.config = config
    app.state.registry = registry

    for meta_path in sorted(config.data_dir.glob("*/study.json")):
        study_id = meta_path.parent.name
        study_dir = StudyDir(config.data_dir, study_id)
        meta, study, _ = recover_study(study_dir)
        registry[study_id] = StudyRuntime(meta, study, study_dir)
        logger.info("recovered study %s (%d events)", study_id, len(study.events))

    def runtime_of(study_id: str) -> StudyRuntime:
        runtime = registry.get(study_id)
        if runtime is None:
            raise HTTPException(404, f"unknown study {study_id!r}")
        return runtime

    def annotator_of(runtime: StudyRuntime, authorization: Optional[str]) -> str:
        token = _bearer(authorization)
        annotator_id = runtime.tokens.get(token)
        if annotator_id is None:
            raise HTTPException(401, "invalid session token")
        return annotator_id

    def require_admin(runtime: StudyRuntime, authorization: Optional[str]) -> None:
        if _bearer(authorization) != runtime.meta.admin_token:
            raise HTTPException(401, "admin token required")

    @app.post("/v1/studies", response_model=CreateStudyResponse)
    def create_study(req: CreateStudyRequest) -> CreateStudyResponse:
        cfg_dict = dict(req.config or {})
        cfg_dict.setdefault("seed", config.study_seed)
        try:
            study_cfg = study_config_from_dict(cfg_dict)
        except (ValueError, KeyError) as exc:
            raise HTTPException(400, f"bad study config: {exc}") from None
        study_id = secrets.token_hex(4)
        study_dir = StudyDir(config.data_dir, study_id)
        meta = StudyMeta(
            study_id=study_id,
            admin_token=secrets.token_hex(16),
            corpus_path=req.corpus_path,
            expert_gold_path=req.expert_gold_path,
            config=study_cfg,
            control_pool_ids=req.control_pool_ids,
        )
        try:
            pool, expert_gold = load_study_inputs(meta)
        except FileNotFoundError as exc:
            raise HTTPException(400, f"input file not found: {exc}") from None
        store = SnapshotDirStore(study_dir.snapshots_dir)
        try:
            study = build_study(
                study_cfg,
                pool,
                expert_gold,
                control_pool_ids=req.control_pool_ids,
                snapshot_store=store,
            )
        except StudyError as exc:
            raise HTTPException(400, str(exc)) from None
        study_dir.write_meta(meta)
        registry[study_id] = StudyRuntime(meta, study, study_dir)
        return CreateStudyResponse(study_id=study_id, admin_token=meta.admin_token)

    @app.post("/v1/studies/{study_id}/annotators", response_model=RegisterResponse)
    def register_annotator(study_id: str, req: RegisterRequest) -> RegisterResponse:
        return runtime_of(study_id).register(req.group)

    @app.get("/v1/studies/{study_id}/next", response_model=NextResponse)
    def get_next(
        study_id: str, authorization: Optional[str] = Header(default=None)
    ) -> NextResponse:
        runtime = runtime_of(study_id)
        annotator_id = annotator_of(runtime, authorization)
        with runtime.lock:
            try:
                item = next_item(runtime.study, annotator_id)
            except RoundComplete:
                return NextResponse(done=True, round_complete=True)
            except StudyComplete:
                return NextResponse(done=True, study_complete=True)
            suggestion = None
            if item.suggestion is not None:
                suggestion = SuggestionPayload(
                    label=item.suggestion.label.name,
                    confidence=item.suggestion.confidence,
                )
            return NextResponse(
                doc_id=item.document.id,
                text=item.document.text,
                round=item.round_index,
                position=item.position + 1,
                total=item.total,
                suggestion=suggestion,
            )

    @app.post("/v1/studies/{study_id}/annotations", response_model=SubmitResponse)
    def post_annotation(
        study_id: str,
        req: SubmitRequest,
        authorization: Optional[str] = Header(default=None),
    ) -> SubmitResponse:
        runtime = runtime_of(study_id)
        annotator_id = annotator_of(runtime, authorization)
        try:
            chosen = LabelCategory.from_name(req.chosen)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from None
        started_at = _parse_ts(req.started_at)
        with runtime.lock:
            study = runtime.study
            prior = study.submitted_event(annotator_id, req.doc_id)
            if prior is not None:
                if prior.chosen == chosen:
                    return SubmitResponse(
                        accepted_recorded=prior.accepted,
                        retrain_scheduled=_retrain_was_scheduled(study, prior),
                    )
                raise HTTPException(
                    409,
                    f"{req.doc_id} already submitted with label {prior.chosen.name}",
                )
            try:
                ack = submit(
                    study,
                    annotator_id,
                    req.doc_id,
                    chosen,
                    started_at=started_at,
                    submitted_at=datetime.now(timezone.utc),
                )
            except DuplicateSubmitError as exc:
                raise HTTPException(409, str(exc)) from None
            except OutOfOrderError as exc:
                raise HTTPException(409, str(exc)) from None
            except StudyError as exc:
                raise HTTPException(400, str(exc)) from None
            runtime.event_log.append(ack.event)
            return SubmitResponse(
                accepted_recorded=ack.event.accepted,
                retrain_scheduled=ack.retrain_scheduled,
            )

    @app.post("/v1/studies/{study_id}/finish-round", response_model=FinishRoundResponse)
    def post_finish_round(
        study_id: str, authorization: Optional[str] = Header(default=None)
    ) -> FinishRoundResponse:
        runtime = runtime_of(study_id)
        annotator_id = annotator_of(runtime, authorization)
        with runtime.lock:
            try:
                summary = finish_round(runtime.study, annotator_id)
            except StudyComplete:
                raise HTTPException(409, "study already complete") from None
            except StudyError as exc:
                raise HTTPException(409, str(exc)) from None
            record = runtime.study.log[-1]
            runtime.event_log.append(record)
            return FinishRoundResponse(
                annotator_id=summary.annotator_id,
                round=summary.round_index,
                n_items=summary.n_items,
                n_suggested=summary.n_suggested,
                n_accepted=summary.n_accepted,
                mean_latency=summary.mean_latency,
                study_complete=summary.study_complete,
            )

    @app.get("/v1/studies/{study_id}/metrics")
    def get_metrics(
        study_id: str,
        report: str = Query(default="agreement"),
        runs: int = Query(default=10),
        authorization: Optional[str] = Header(default=None),
    ) -> dict:
        runtime = runtime_of(study_id)
        require_admin(runtime, authorization)
        with runtime.lock:
            study = runtime.study
            events = study.events
            outliers = flag_outliers(events)
            kept = exclude_annotators(events, outliers)
            gold = runtime.control_gold()
            if report == "agreement":
                reports = agreement_reports(kept, gold)
                accuracy = control_accuracy(kept, gold)
                return {
                    "agreement": [r.to_dict() for r in reports],
                    "control_accuracy": accuracy.per_group_round,
                    "outliers": outliers,
                    "rendered": render_agreement_table(reports),
                }
            if report == "bias":
                acceptance = acceptance_rate(kept)
                correction = correction_matrix(kept)
                divergence = {}
                control_doc_ids = {g.document_id for g in gold}
                eval_docs = [
                    doc for doc, _ in study.expert_gold if doc.id in control_doc_ids
                ]
                for annotator_id, profile in sorted(study.profiles.items()):
                    if profile.mode is not SuggestionMode.interactive:
                        continue
                    snaps = runtime.snapshot_store.versions(annotator_id)
                    snaps = [s for s in snaps if s.owner == annotator_id]
                    if snaps and eval_docs:
                        divergence[annotator_id] = [
                            {
                                "model_version": p.model_version,
                                "n_train": p.n_train,
                                "n_diverging": p.n_diverging,
                            }
                            for p in divergence_series(
                                study.expert_snapshot, snaps, eval_docs
                            )
                        ]
                return {
                    "acceptance": acceptance.to_dict(),
                    "correction_matrix": {
                        "labels": [label.name for label in LabelCategory],
                        "counts": correction.tolist(),
                    },
                    "divergence": divergence,
                    "outliers": outliers,
                }
            if report == "transfer":
                groups: dict[str, list] = {}
                doc_index = {
                    entry.document.id: entry.document
                    for plans in study.plans.values()
                    for plan in plans.values()
                    for entry in plan.entries
                }
                for e in kept:
                    if e.is_control:
                        continue
                    groups.setdefault(e.group, []).append(
                        (doc_index[e.document_id], e.chosen)
                    )
                matrix = transfer_experiment(
                    groups,
                    study.cfg.tcfg,
                    study.cfg.fcfg,
                    runs=runs,
                    seed=study.cfg.seed,
                )
                return matrix.to_dict()
            raise HTTPException(400, f"unknown report {report!r}")

    @app.get("/v1/studies/{study_id}/export")
    def get_export(
        study_id: str, authorization: Optional[str] = Header(default=None)
    ) -> StreamingResponse:
        runtime = runtime_of(study_id)
        require_admin(runtime, authorization)
        with runtime.lock:
            events = list(runtime.study.events)

        def stream() -> Iterator[bytes]:
            for e in events:
                yield (event_to_json_line(e) + "\n").encode("utf-8")

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app
