"""Durable study state: checksummed append-only log plus snapshot files.

Log lines are ``{crc32c-hex}\\t{json}``; the checksum covers the JSON
bytes. A corrupt line mid-file refuses recovery, naming the line; a
corrupt or truncated final line is dropped with a warning (interrupted
last write) and the file is truncated back to the last good line.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional

from ..corpus import Corpus, load_corpus, load_labeled
from ..labels import LabelCategory
from ..orchestrator import (
    AnnotationEvent,
    LogRecord,
    RoundFinish,
    Study,
    StudyConfig,
    replay_study,
    study_config_from_dict,
    study_config_to_dict,
)
from ..suggester import (
    ModelSnapshot,
    Suggestion,
    load_snapshot,
    save_snapshot,
)

logger = logging.getLogger(__name__)

_CRC32C_POLY = 0x82F63B78
_CRC32C_TABLE = []
for _i in range(256):
    _crc = _i
    for _ in range(8):
        _crc = (_crc >> 1) ^ (_CRC32C_POLY if _crc & 1 else 0)
    _CRC32C_TABLE.append(_crc)


def crc32c(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _CRC32C_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


class LogCorruptError(Exception):
    def __init__(self, path: Path, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}, line {line}: {reason}")


def _ts(dt: datetime) -> str:
    return dt.isoformat()


def _parse_ts(raw: str) -> datetime:
    return datetime.fromisoformat(raw.replace("Z", "+00:00"))


def record_to_dict(record: LogRecord) -> dict:
    if isinstance(record, RoundFinish):
        return {
            "type": "finish_round",
            "annotator": record.annotator_id,
            "round": record.round_index,
            "at": _ts(record.at),
        }
    e = record
    return {
        "type": "annotation",
        "annotator": e.annotator_id,
        "group": e.group,
        "round": e.round,
        "position": e.position,
        "doc_id": e.document_id,
        "is_control": e.is_control,
        "suggestion_label": e.suggestion.label.name if e.suggestion else None,
        "suggestion_confidence": e.suggestion.confidence if e.suggestion else None,
        "model_version": e.suggestion.model_version if e.suggestion else None,
        "chosen": e.chosen.name,
        "accepted": e.accepted,
        "started_at": _ts(e.started_at),
        "submitted_at": _ts(e.submitted_at),
    }


def record_from_dict(rec: dict) -> LogRecord:
    if rec["type"] == "finish_round":
        return RoundFinish(
            annotator_id=rec["annotator"],
            round_index=rec["round"],
            at=_parse_ts(rec["at"]),
        )
    if rec["type"] != "annotation":
        raise ValueError(f"unknown log record type {rec['type']!r}")
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
        is_control=rec["is_control"],
        suggestion=suggestion,
        chosen=LabelCategory.from_name(rec["chosen"]),
        accepted=rec["accepted"],
        started_at=_parse_ts(rec["started_at"]),
        submitted_at=_parse_ts(rec["submitted_at"]),
    )


class EventLog:
    """Append-only JSONL with per-line CRC32C, fsynced per append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: LogRecord) -> None:
        payload = json.dumps(record_to_dict(record), ensure_ascii=False)
        checksum = f"{crc32c(payload.encode('utf-8')):08x}"
        self._fh.write(f"{checksum}\t{payload}\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


def read_log(path: str | Path) -> list[LogRecord]:
    """Validate checksums and decode; truncate a broken final line."""
    path = Path(path)
    if not path.exists():
        return []
    records: list[LogRecord] = []
    good_bytes = 0
    with open(path, "rb") as fh:
        raw_lines = fh.read().split(b"\n")
    # a well-formed file ends with a newline, so the final split chunk is empty
    chunks = raw_lines[:-1] if raw_lines and raw_lines[-1] == b"" else raw_lines
    for line_no, raw in enumerate(chunks, start=1):
        is_last = line_no == len(chunks)
        try:
            checksum_hex, payload = raw.split(b"\t", 1)
            expected = int(checksum_hex, 16)
        except ValueError:
            if is_last:
                logger.warning(
                    "dropping malformed final log line %d in %s", line_no, path
                )
                break
            raise LogCorruptError(path, line_no, "malformed checksum prefix") from None
        if crc32c(payload) != expected:
            if is_last:
                logger.warning(
                    "dropping final log line %d in %s (checksum mismatch, likely "
                    "an interrupted write)",
                    line_no,
                    path,
                )
                break
            raise LogCorruptError(path, line_no, "checksum mismatch")
        records.append(record_from_dict(json.loads(payload.decode("utf-8"))))
        good_bytes += len(raw) + 1
    actual = path.stat().st_size
    if actual > good_bytes:
        with open(path, "r+b") as fh:
            fh.truncate(good_bytes)
    return records


class SnapshotDirStore:
    """One snapshot file per (owner, version) under a study directory."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, owner: str, version: int) -> Path:
        safe = owner.replace("/", "_")
        return self.directory / f"{safe}__v{version}.json"

    def get(self, owner: str, version: int) -> Optional[ModelSnapshot]:
        path = self._path(owner, version)
        if not path.exists():
            return None
        return load_snapshot(path)

    def put(self, snapshot: ModelSnapshot) -> None:
        path = self._path(snapshot.owner, snapshot.version)
        if not path.exists():
            save_snapshot(snapshot, path)

    def versions(self, owner: str) -> list[ModelSnapshot]:
        safe = owner.replace("/", "_")
        found = []
        for path in self.directory.glob(f"{safe}__v*.json"):
            found.append(load_snapshot(path))
        return sorted(found, key=lambda s: s.version)


@dataclass
class StudyMeta:
    study_id: str
    admin_token: str
    corpus_path: str
    expert_gold_path: str
    config: StudyConfig
    control_pool_ids: Optional[list[str]] = None


class StudyDir:
    """Filesystem layout for one study's durable state."""

    def __init__(self, root: str | Path, study_id: str):
        self.root = Path(root) / study_id
        self.study_id = study_id

    @property
    def meta_path(self) -> Path:
        return self.root / "study.json"

    @property
    def log_path(self) -> Path:
        return self.root / "events.log"

    @property
    def annotators_path(self) -> Path:
        return self.root / "annotators.jsonl"

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    def exists(self) -> bool:
        return self.meta_path.exists()

    def write_meta(self, meta: StudyMeta) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {
            "study_id": meta.study_id,
            "admin_token": meta.admin_token,
            "corpus_path": meta.corpus_path,
            "expert_gold_path": meta.expert_gold_path,
            "config": study_config_to_dict(meta.config),
            "control_pool_ids": meta.control_pool_ids,
        }
        with open(self.meta_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    def read_meta(self) -> StudyMeta:
        with open(self.meta_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return StudyMeta(
            study_id=payload["study_id"],
            admin_token=payload["admin_token"],
            corpus_path=payload["corpus_path"],
            expert_gold_path=payload["expert_gold_path"],
            config=study_config_from_dict(payload["config"]),
            control_pool_ids=payload.get("control_pool_ids"),
        )

    def append_annotator(self, annotator_id: str, group: str, token: str) -> None:
        with open(self.annotators_path, "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"annotator_id": annotator_id, "group": group, "token": token}
                )
                + "\n"
            )
            fh.flush()
            os.fsync(fh.fileno())

    def read_annotators(self) -> list[dict]:
        if not self.annotators_path.exists():
            return []
        out = []
        with open(self.annotators_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(json.loads(line))
        return out


def load_study_inputs(meta: StudyMeta) -> tuple[Corpus, list]:
    pool = load_corpus(meta.corpus_path, format=_guess_format(meta.corpus_path))
    expert_gold = load_labeled(meta.expert_gold_path)
    return pool, expert_gold


def _guess_format(path: str) -> str:
    return "tsv" if str(path).endswith(".tsv") else "jsonl"


def recover_study(study_dir: StudyDir) -> tuple[StudyMeta, Study, list[LogRecord]]:
    """Crash recovery: rebuild the study by replaying the event log.

    Snapshots are reloaded from the snapshot store by version when
    present; missing ones are retrained, which lands on identical bytes
    because training is deterministic.
    """
    meta = study_dir.read_meta()
    pool, expert_gold = load_study_inputs(meta)
    records = read_log(study_dir.log_path)
    store = SnapshotDirStore(study_dir.snapshots_dir)
    study = replay_study(
        meta.config,
        pool,
        expert_gold,
        records,
        control_pool_ids=meta.control_pool_ids,
        snapshot_store=store,
    )
    return meta, study, records
