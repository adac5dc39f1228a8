"""Event-log ingestion: canonical CSV parsing and preprocessing.

The canonical interchange format is one UTF-8 CSV per dataset with a
fixed header; converters from raw platform exports are expected to
produce this format plus a JSON manifest of capability flags (and an
optional prerequisite graph).  Preprocessing squashes multi-KC sets to
artificial single KCs, drops students with too few responses, assigns
student-level cross-validation folds, and derives lag times.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from ktrace.core import (
    ConfigError,
    DatasetManifest,
    EventKind,
    FoldAssignment,
    InteractionEvent,
    KCGraph,
    ParseError,
    SchemaError,
    canonical_json,
)

CANONICAL_COLUMNS: tuple[str, ...] = (
    "student_id",
    "timestamp",
    "event_kind",
    "question_id",
    "kc_ids",
    "correct",
    "elapsed_time_s",
    "study_module",
    "teacher_group",
    "school",
    "course",
    "topic",
    "bundle",
    "part_area",
    "platform",
    "difficulty",
    "hint_count",
    "consumption_minutes",
    "age",
    "gender",
    "social_support",
)

# Optional CSV columns and the manifest flag each one requires.
_FIELD_FLAGS = {
    "elapsed_time_s": "elapsed_lag_time",
    "study_module": "study_module",
    "teacher_group": "teacher_group",
    "school": "school",
    "course": "course",
    "topic": "topic",
    "bundle": "bundle",
    "part_area": "part_area",
    "platform": "platform",
    "difficulty": "difficulty",
    "hint_count": "hints",
    "age": "age_gender",
    "gender": "age_gender",
    "social_support": "social_support",
}

_KIND_FLAGS = {
    EventKind.VIDEO_WATCH: "videos",
    EventKind.VIDEO_SKIP: "videos",
    EventKind.READING: "reading",
    EventKind.HINT_USE: "hints",
}


@dataclass
class Dataset:
    """A manifest plus per-student, time-ordered event sequences."""

    manifest: DatasetManifest
    students: dict[str, list[InteractionEvent]]
    kc_graph: KCGraph | None = None
    squash_map: dict[str, tuple[str, ...]] | None = None
    quality: dict[str, int] = field(default_factory=dict)
    lags_derived: bool = False

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def n_responses(self) -> int:
        return sum(
            1 for evs in self.students.values() for e in evs if e.is_response()
        )

    def subset(self, student_ids: Iterable[str]) -> "Dataset":
        keep = {s: self.students[s] for s in sorted(student_ids)}
        return replace(self, students=keep)

    def all_events(self) -> Iterator[InteractionEvent]:
        for sid in self.students:
            yield from self.students[sid]


def _parse_bool(cell: str, line: int) -> bool:
    low = cell.lower()
    if low in ("1", "true"):
        return True
    if low in ("0", "false"):
        return False
    raise ParseError(f"bad correct flag {cell!r}", line)


def _parse_row(row: Mapping[str, str], line: int, manifest: DatasetManifest) -> InteractionEvent:
    sid = row["student_id"]
    if not sid:
        raise ParseError("empty student_id", line)
    try:
        ts = int(math.floor(float(row["timestamp"])))
    except ValueError:
        raise ParseError(f"bad timestamp {row['timestamp']!r}", line) from None
    try:
        kind = EventKind(row["event_kind"])
    except ValueError:
        raise ParseError(f"unknown event_kind {row['event_kind']!r}", line) from None

    for col, flag in _FIELD_FLAGS.items():
        if row[col] and not manifest.allows(flag):
            raise SchemaError(
                f"line {line}: column {col!r} populated but manifest "
                f"{manifest.name!r} does not declare {flag!r}"
            )
    kind_flag = _KIND_FLAGS.get(kind)
    if kind_flag and not manifest.allows(kind_flag):
        raise SchemaError(
            f"line {line}: event kind {kind.value!r} requires manifest flag {kind_flag!r}"
        )
    if row["consumption_minutes"] and kind is EventKind.QUESTION_RESPONSE:
        raise ParseError("consumption_minutes on a question response", line)

    kcs = tuple(sorted({k for k in row["kc_ids"].split(";") if k}))

    def fnum(col: str) -> float | None:
        cell = row[col]
        if not cell:
            return None
        try:
            return float(cell)
        except ValueError:
            raise ParseError(f"bad number {cell!r} in column {col!r}", line) from None

    def inum(col: str) -> int | None:
        cell = row[col]
        if not cell:
            return None
        try:
            return int(cell)
        except ValueError:
            raise ParseError(f"bad integer {cell!r} in column {col!r}", line) from None

    def text(col: str) -> str | None:
        return row[col] or None

    event = InteractionEvent(
        student_id=sid,
        timestamp=ts,
        kind=kind,
        question_id=text("question_id"),
        kc_ids=kcs,
        correct=_parse_bool(row["correct"], line) if row["correct"] else None,
        elapsed_time_s=fnum("elapsed_time_s"),
        study_module=text("study_module"),
        teacher_group=text("teacher_group"),
        school=text("school"),
        course=text("course"),
        topic=text("topic"),
        bundle=text("bundle"),
        part_area=text("part_area"),
        platform=text("platform"),
        difficulty=text("difficulty"),
        hint_count=inum("hint_count"),
        consumption_minutes=fnum("consumption_minutes"),
        age=text("age"),
        gender=text("gender"),
        social_support=text("social_support"),
    )
    try:
        event.validate()
    except SchemaError as err:
        raise ParseError(str(err), line) from None
    return event


def load_events(path: str | Path, manifest: DatasetManifest) -> Dataset:
    """Parse a canonical CSV into per-student, time-sorted sequences.

    Within one student, ties on timestamp keep file order (stable sort).
    """
    path = Path(path)
    by_student: dict[str, list[InteractionEvent]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file: missing header", 1) from None
        if tuple(header) != CANONICAL_COLUMNS:
            raise ParseError(
                f"header mismatch: expected {','.join(CANONICAL_COLUMNS)}", 1
            )
        for line, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(CANONICAL_COLUMNS):
                raise ParseError(
                    f"expected {len(CANONICAL_COLUMNS)} columns, got {len(raw)}", line
                )
            row = dict(zip(CANONICAL_COLUMNS, raw))
            event = _parse_row(row, line, manifest)
            by_student.setdefault(event.student_id, []).append(event)
    students = {
        sid: sorted(events, key=lambda e: e.timestamp)
        for sid, events in sorted(by_student.items())
    }
    return Dataset(manifest=manifest, students=students)


def filter_students(dataset: Dataset, min_responses: int = 10) -> Dataset:
    """Drop students with fewer than min_responses question responses.

    Only question responses count toward the threshold; all events of a
    dropped student (including material events) are removed.
    """
    if min_responses < 0:
        raise ConfigError("min_responses must be >= 0")
    kept = {
        sid: events
        for sid, events in dataset.students.items()
        if sum(1 for e in events if e.is_response()) >= min_responses
    }
    quality = dict(dataset.quality)
    quality["students_filtered"] = quality.get("students_filtered", 0) + (
        dataset.n_students - len(kept)
    )
    return replace(dataset, students=kept, quality=quality)


def squash_multi_kc(dataset: Dataset) -> Dataset:
    """Replace each distinct KC set with a single artificial KC id.

    The mapping is order-insensitive over the member ids; artificial ids
    are assigned in sorted order of the member tuples, so the result is
    independent of event order.  Every event carrying KCs is rewritten,
    and the artificial-to-original mapping is retained on the dataset so
    that graph-based features can still resolve original ids.
    """
    if dataset.squash_map is not None:
        raise ConfigError("dataset KCs are already squashed")
    distinct: set[tuple[str, ...]] = set()
    for events in dataset.students.values():
        for e in events:
            if e.kc_ids:
                distinct.add(e.kc_ids)
    ordered = sorted(distinct)
    width = max(5, len(str(max(len(ordered) - 1, 0))))
    by_set = {kcs: f"akc{i:0{width}d}" for i, kcs in enumerate(ordered)}
    squash_map = {aid: kcs for kcs, aid in by_set.items()}
    students = {
        sid: [
            replace(e, kc_ids=(by_set[e.kc_ids],)) if e.kc_ids else e
            for e in events
        ]
        for sid, events in dataset.students.items()
    }
    return replace(dataset, students=students, squash_map=squash_map)


def split_folds(dataset: Dataset, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Student-level fold assignment: seeded shuffle of the sorted ids,
    then round-robin, so fold sizes differ by at most one student."""
    ids = sorted(dataset.students)
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if len(ids) < k:
        raise ConfigError(f"cannot split {len(ids)} students into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds = {ids[int(j)]: int(pos % k) for pos, j in enumerate(order)}
    return FoldAssignment(k=k, seed=seed, folds=folds)


def derive_lag_times(dataset: Dataset) -> Dataset:
    """Annotate each response with the lag since the previous question.

    Lag is the gap between the moment the previous question was
    completed (its receipt timestamp plus elapsed time, when elapsed
    time is available) and the moment the current question is received.
    A student's first response gets the no-lag flag instead.  Negative
    raw lags clamp to zero and are tallied under
    quality["negative_lag_clamped"].
    """
    negative = 0
    students: dict[str, list[InteractionEvent]] = {}
    for sid, events in dataset.students.items():
        out: list[InteractionEvent] = []
        prev_end: float | None = None
        for e in events:
            if e.is_response():
                if prev_end is None:
                    e = replace(e, no_lag=True, lag_s=None)
                else:
                    raw = e.timestamp - prev_end
                    if raw < 0:
                        negative += 1
                        raw = 0.0
                    e = replace(e, lag_s=float(raw), no_lag=False)
                prev_end = e.timestamp + (e.elapsed_time_s or 0.0)
            out.append(e)
        students[sid] = out
    quality = dict(dataset.quality)
    quality["negative_lag_clamped"] = quality.get("negative_lag_clamped", 0) + negative
    return replace(dataset, students=students, quality=quality, lags_derived=True)


def ensure_lags(dataset: Dataset) -> Dataset:
    return dataset if dataset.lags_derived else derive_lag_times(dataset)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_events(dataset: Dataset, path: str | Path) -> None:
    """Write the canonical CSV (students in sorted-id order)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANONICAL_COLUMNS)
        for sid in sorted(dataset.students):
            for e in dataset.students[sid]:
                writer.writerow(
                    [
                        e.student_id,
                        e.timestamp,
                        e.kind.value,
                        _fmt(e.question_id),
                        ";".join(e.kc_ids),
                        _fmt(e.correct),
                        _fmt(e.elapsed_time_s),
                        _fmt(e.study_module),
                        _fmt(e.teacher_group),
                        _fmt(e.school),
                        _fmt(e.course),
                        _fmt(e.topic),
                        _fmt(e.bundle),
                        _fmt(e.part_area),
                        _fmt(e.platform),
                        _fmt(e.difficulty),
                        _fmt(e.hint_count),
                        _fmt(e.consumption_minutes),
                        _fmt(e.age),
                        _fmt(e.gender),
                        _fmt(e.social_support),
                    ]
                )


def read_manifest(path: str | Path) -> tuple[DatasetManifest, KCGraph | None]:
    """Load a manifest JSON; it may embed a prerequisite graph under
    the "kc_graph" key."""
    with Path(path).open(encoding="utf-8") as fh:
        obj = json.load(fh)
    manifest = DatasetManifest.from_json(obj)
    graph = None
    if obj.get("kc_graph") is not None:
        graph = KCGraph.from_json(obj["kc_graph"])
        flag_ok = manifest.allows("prereq_graph") or manifest.allows("kc_hierarchy")
        if not flag_ok:
            raise SchemaError(
                "manifest embeds a kc_graph but declares neither "
                "'prereq_graph' nor 'kc_hierarchy'"
            )
    return manifest, graph


def write_manifest(manifest: DatasetManifest, path: str | Path, kc_graph: KCGraph | None = None) -> None:
    obj = manifest.to_json()
    if kc_graph is not None:
        obj["kc_graph"] = kc_graph.to_json()
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def write_prepared(dataset: Dataset, assignment: FoldAssignment, out_dir: str | Path) -> dict[str, str]:
    """Write a prepared dataset directory; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(dataset, out / "events.csv")
    write_manifest(dataset.manifest, out / "manifest.json", dataset.kc_graph)
    (out / "folds.json").write_text(canonical_json(assignment.to_json()), encoding="utf-8")
    meta = {
        "version": 1,
        "squash_map": {k: list(v) for k, v in sorted((dataset.squash_map or {}).items())},
        "quality": dict(sorted(dataset.quality.items())),
        "n_students": dataset.n_students,
        "n_responses": dataset.n_responses,
    }
    (out / "prepare_meta.json").write_text(canonical_json(meta), encoding="utf-8")
    return {
        "events": str(out / "events.csv"),
        "manifest": str(out / "manifest.json"),
        "folds": str(out / "folds.json"),
        "prepare_meta": str(out / "prepare_meta.json"),
    }


def load_prepared(dir_path: str | Path) -> tuple[Dataset, FoldAssignment]:
    """Load a directory produced by write_prepared."""
    d = Path(dir_path)
    manifest, graph = read_manifest(d / "manifest.json")
    dataset = load_events(d / "events.csv", manifest)
    dataset.kc_graph = graph
    meta_path = d / "prepare_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        squash = meta.get("squash_map") or None
        if squash:
            dataset.squash_map = {k: tuple(v) for k, v in squash.items()}
        dataset.quality = {k: int(v) for k, v in meta.get("quality", {}).items()}
    assignment = FoldAssignment.from_json(
        json.loads((d / "folds.json").read_text(encoding="utf-8"))
    )
    return dataset, assignment
