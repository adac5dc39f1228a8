"""Shared domain types for event-log knowledge tracing.

An interaction log is a per-student sequence of timestamped events
(question responses plus optional study-material events).  Feature
extraction turns the history before each response into a SparseVector;
models are dense weight vectors over an encoder's index space.  The
types here carry no model logic: they define the data contracts that
ingestion, feature extraction, and training build on.

All types are immutable after construction except StudentState, which
is a per-student mutable accumulator and must not be shared across
threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class SchemaError(ValueError):
    """Input data violates the declared schema or manifest capabilities."""


class ParseError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


class SequencingError(ValueError):
    """Events applied to a student state out of timestamp order."""


class EventKind(str, Enum):
    QUESTION_RESPONSE = "QuestionResponse"
    VIDEO_WATCH = "VideoWatch"
    VIDEO_SKIP = "VideoSkip"
    READING = "Reading"
    HINT_USE = "HintUse"


@dataclass(frozen=True, slots=True)
class InteractionEvent:
    """One logged interaction.

    Only ``student_id``, ``timestamp`` and ``kind`` are always present.
    Question responses additionally carry ``question_id``, ``kc_ids``
    and ``correct``; every other field is dataset-dependent and must be
    declared by the dataset manifest before it may be populated.

    ``lag_s``/``no_lag`` are not read from input files: they are filled
    in by lag derivation after ingestion (``no_lag`` marks a student's
    first response, for which no lag can be computed).
    """

    student_id: str
    timestamp: int
    kind: EventKind
    question_id: str | None = None
    kc_ids: tuple[str, ...] = ()
    correct: bool | None = None
    elapsed_time_s: float | None = None
    study_module: str | None = None
    teacher_group: str | None = None
    school: str | None = None
    course: str | None = None
    topic: str | None = None
    bundle: str | None = None
    part_area: str | None = None
    platform: str | None = None
    difficulty: str | None = None
    hint_count: int | None = None
    consumption_minutes: float | None = None
    age: str | None = None
    gender: str | None = None
    social_support: str | None = None
    lag_s: float | None = None
    no_lag: bool = False

    def is_response(self) -> bool:
        return self.kind is EventKind.QUESTION_RESPONSE

    def validate(self) -> None:
        if self.timestamp < 0:
            raise SchemaError(f"negative timestamp {self.timestamp}")
        if self.is_response():
            if self.question_id is None:
                raise SchemaError("question response without question_id")
            if not self.kc_ids:
                raise SchemaError(
                    f"question response {self.question_id!r} without kc_ids"
                )
            if self.correct is None:
                raise SchemaError(
                    f"question response {self.question_id!r} without correct flag"
                )
        if self.elapsed_time_s is not None and self.elapsed_time_s < 0:
            raise SchemaError("negative elapsed_time_s")
        if self.hint_count is not None and self.hint_count < 0:
            raise SchemaError("negative hint_count")
        if self.consumption_minutes is not None and self.consumption_minutes < 0:
            raise SchemaError("negative consumption_minutes")


# Capability flags a dataset manifest may declare.  A column (or event
# kind) tied to a flag may only be populated when the flag is set, and
# feature families are gated on the same flags.
CAPABILITY_FLAGS: tuple[str, ...] = (
    "elapsed_lag_time",
    "study_module",
    "prereq_graph",
    "kc_hierarchy",
    "bundle",
    "videos",
    "reading",
    "hints",
    "age_gender",
    "social_support",
    "platform",
    "difficulty",
    "teacher_group",
    "school",
    "course",
    "topic",
    "part_area",
)


@dataclass(frozen=True)
class DatasetManifest:
    """Declares which optional log attributes a dataset provides."""

    name: str
    capabilities: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        unknown = set(self.capabilities) - set(CAPABILITY_FLAGS)
        if unknown:
            raise ConfigError(f"unknown capability flags: {sorted(unknown)}")

    def allows(self, flag: str) -> bool:
        if flag not in CAPABILITY_FLAGS:
            raise ConfigError(f"unknown capability flag {flag!r}")
        return flag in self.capabilities

    @classmethod
    def full(cls, name: str = "synthetic") -> "DatasetManifest":
        return cls(name=name, capabilities=frozenset(CAPABILITY_FLAGS))

    @classmethod
    def minimal(cls, name: str = "minimal") -> "DatasetManifest":
        return cls(name=name)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "name": self.name,
            "capabilities": {f: (f in self.capabilities) for f in CAPABILITY_FLAGS},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetManifest":
        caps = obj.get("capabilities", {})
        if not isinstance(caps, Mapping):
            raise SchemaError("manifest capabilities must be an object")
        enabled = frozenset(k for k, v in caps.items() if v)
        return cls(name=str(obj.get("name", "dataset")), capabilities=enabled)


class KCGraph:
    """Directed prerequisite relation over KC ids or question ids.

    Edges run prerequisite -> dependent.  ``members_of`` maps each graph
    node to the event-level ids whose responses count toward that node;
    for plain graphs every node aggregates only itself, while
    pseudo-graphs derived from a topic ontology let a parent node
    aggregate all of its leaf children.  The postrequisite relation is
    the exact edge reversal.
    """

    def __init__(
        self,
        node_kind: str,
        edges: Iterable[tuple[str, str]],
        members_of: Mapping[str, Sequence[str]] | None = None,
    ):
        if node_kind not in ("kc", "question"):
            raise ConfigError(f"node_kind must be 'kc' or 'question', got {node_kind!r}")
        self.node_kind = node_kind
        prereqs: dict[str, set[str]] = {}
        postreqs: dict[str, set[str]] = {}
        nodes: set[str] = set()
        edge_list: list[tuple[str, str]] = []
        for pre, dep in edges:
            if pre == dep:
                raise SchemaError(f"self-edge on node {pre!r}")
            nodes.add(pre)
            nodes.add(dep)
            prereqs.setdefault(dep, set()).add(pre)
            postreqs.setdefault(pre, set()).add(dep)
            edge_list.append((pre, dep))
        if members_of is not None:
            nodes.update(members_of)
        self.edges = tuple(sorted(set(edge_list)))
        self.nodes: tuple[str, ...] = tuple(sorted(nodes))
        self._prereqs = {n: tuple(sorted(v)) for n, v in prereqs.items()}
        self._postreqs = {n: tuple(sorted(v)) for n, v in postreqs.items()}
        if members_of is None:
            self.members_of = {n: (n,) for n in self.nodes}
        else:
            self.members_of = {n: tuple(sorted(set(members_of.get(n, (n,))))) for n in self.nodes}
        # reverse index: event-level id -> nodes it counts toward
        rev: dict[str, set[str]] = {}
        for node, members in self.members_of.items():
            for m in members:
                rev.setdefault(m, set()).add(node)
        self.nodes_counting = {m: tuple(sorted(v)) for m, v in rev.items()}

    def prereqs_of(self, node: str) -> tuple[str, ...]:
        return self._prereqs.get(node, ())

    def postreqs_of(self, node: str) -> tuple[str, ...]:
        return self._postreqs.get(node, ())

    def nodes_for_event(self, question_id: str | None, kc_ids: Sequence[str]) -> tuple[str, ...]:
        """Graph nodes directly representing the given question."""
        if self.node_kind == "question":
            if question_id is not None and question_id in self.members_of:
                return (question_id,)
            return ()
        return tuple(sorted(k for k in kc_ids if k in self.members_of))

    @classmethod
    def from_ontology(cls, parent_of: Mapping[str, str]) -> "KCGraph":
        """Pseudo-prerequisite graph from the two lowest ontology layers.

        Each leaf KC gets its direct parent as a prerequisite; a parent
        node aggregates responses on all of its leaf children.
        """
        edges = [(parent, leaf) for leaf, parent in parent_of.items()]
        members: dict[str, list[str]] = {}
        for leaf, parent in parent_of.items():
            members.setdefault(parent, []).append(leaf)
            members.setdefault(leaf, []).append(leaf)
        return cls("kc", edges, members_of=members)

    def to_json(self) -> dict:
        obj: dict = {
            "version": 1,
            "node_kind": self.node_kind,
            "edges": [list(e) for e in self.edges],
        }
        if any(self.members_of[n] != (n,) for n in self.nodes):
            obj["members_of"] = {n: list(v) for n, v in sorted(self.members_of.items())}
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "KCGraph":
        if "ontology_parent_of" in obj:
            return cls.from_ontology(dict(obj["ontology_parent_of"]))
        members = obj.get("members_of")
        return cls(
            obj.get("node_kind", "kc"),
            [tuple(e) for e in obj.get("edges", [])],
            members_of=members,
        )


def scale(x: float) -> float:
    """Count/time scaling ln(1 + x); rejects negative input."""
    if x < 0:
        raise ValueError(f"scale() requires x >= 0, got {x}")
    return math.log1p(x)


class SparseVector:
    """Sorted sparse feature vector: strictly increasing indices, no zeros."""

    __slots__ = ("indices", "values")

    def __init__(self, indices: np.ndarray, values: np.ndarray, *, _checked: bool = False):
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not _checked:
            if indices.ndim != 1 or values.ndim != 1 or len(indices) != len(values):
                raise ValueError("indices and values must be 1-d arrays of equal length")
            if len(indices) and indices[0] < 0:
                raise ValueError("negative feature index")
            if len(indices) > 1 and not np.all(np.diff(indices) > 0):
                raise ValueError("indices must be strictly increasing")
            if np.any(values == 0.0):
                raise ValueError("explicit zero entries are not allowed")
        self.indices = indices
        self.values = values

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "SparseVector":
        """Build from (index, value) pairs; sorts and drops exact zeros."""
        kept = [(int(i), float(v)) for i, v in pairs if v != 0.0]
        kept.sort(key=lambda p: p[0])
        idx = np.fromiter((p[0] for p in kept), dtype=np.int64, count=len(kept))
        val = np.fromiter((p[1] for p in kept), dtype=np.float64, count=len(kept))
        if len(idx) and idx[0] < 0:
            raise ValueError("negative feature index")
        if len(idx) > 1 and not np.all(np.diff(idx) > 0):
            raise ValueError("duplicate feature index")
        return cls(idx, val, _checked=True)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def dense(self, dim: int) -> np.ndarray:
        if self.nnz and self.indices[-1] >= dim:
            raise IndexError(
                f"index {int(self.indices[-1])} out of range for dimension {dim}"
            )
        out = np.zeros(dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def slice_block(self, offset: int, size: int) -> list[tuple[int, float]]:
        """Entries inside [offset, offset+size), re-based to the block."""
        lo = np.searchsorted(self.indices, offset)
        hi = np.searchsorted(self.indices, offset + size)
        return [
            (int(i) - offset, float(v))
            for i, v in zip(self.indices[lo:hi], self.values[lo:hi])
        ]

    def to_json(self) -> dict:
        return {"version": 1, "entries": [[int(i), float(v)] for i, v in zip(self.indices, self.values)]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SparseVector":
        entries = obj["entries"]
        idx = np.array([e[0] for e in entries], dtype=np.int64)
        val = np.array([e[1] for e in entries], dtype=np.float64)
        return cls(idx, val)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.values, other.values
        )

    def __repr__(self) -> str:
        return f"SparseVector({self.to_pairs()!r})"


def dot(v: SparseVector, w: np.ndarray) -> float:
    """Inner product of a sparse vector with a dense weight vector."""
    if v.nnz == 0:
        return 0.0
    if v.indices[-1] >= len(w):
        raise IndexError(
            f"feature index {int(v.indices[-1])} out of range for weights of length {len(w)}"
        )
    return float(np.dot(w[v.indices], v.values))


class ResponseLog:
    """Append-only correctness log for one scope (student / KC / question).

    Keeps timestamps with a running prefix sum of corrects, plus one
    advancing start pointer per finite time window, so that window
    counts at a query time cost amortized O(#windows) per response.
    Query times must be non-decreasing.
    """

    __slots__ = ("window_seconds", "ts", "cumc", "widx")

    def __init__(self, window_seconds: Sequence[float] = ()):
        self.window_seconds = tuple(window_seconds)
        self.ts: list[int] = []
        self.cumc: list[int] = []
        self.widx = [0] * len(self.window_seconds)

    def add(self, timestamp: int, correct: bool) -> None:
        prev = self.cumc[-1] if self.cumc else 0
        self.ts.append(timestamp)
        self.cumc.append(prev + (1 if correct else 0))

    @property
    def attempts(self) -> int:
        return len(self.ts)

    @property
    def corrects(self) -> int:
        return self.cumc[-1] if self.cumc else 0

    def window_counts(self, now: int) -> list[tuple[int, int]]:
        """(corrects, attempts) per finite window; a response is inside a
        window when now - ts < window length."""
        out = []
        ts = self.ts
        cumc = self.cumc
        n = len(ts)
        for j, wsec in enumerate(self.window_seconds):
            i = self.widx[j]
            cutoff = now - wsec
            while i < n and ts[i] <= cutoff:
                i += 1
            self.widx[j] = i
            attempts = n - i
            corrects = (cumc[-1] - (cumc[i - 1] if i else 0)) if attempts else 0
            out.append((corrects, attempts))
        return out


class Tally:
    """Total plus per-KC accumulator for material interactions."""

    __slots__ = ("total", "by_kc")

    def __init__(self):
        self.total: float = 0.0
        self.by_kc: dict[str, float] = {}

    def add(self, kc_ids: Sequence[str], amount: float = 1.0) -> None:
        self.total += amount
        for k in kc_ids:
            self.by_kc[k] = self.by_kc.get(k, 0.0) + amount

    def for_kcs(self, kc_ids: Sequence[str]) -> float:
        return sum(self.by_kc.get(k, 0.0) for k in kc_ids)


class StudentState:
    """Running per-student aggregates over the events seen so far.

    Construction binds the time-window lengths, an optional KC graph
    (for prerequisite tallies) and an optional KC squash map so that
    graph nodes defined over original KC ids keep accumulating after
    multi-KC sets were squashed to artificial ids.
    """

    def __init__(
        self,
        window_seconds: Sequence[float] = (),
        kc_graph: KCGraph | None = None,
        squash_map: Mapping[str, tuple[str, ...]] | None = None,
    ):
        self.window_seconds = tuple(window_seconds)
        self.total = ResponseLog(self.window_seconds)
        self.by_kc: dict[str, ResponseLog] = {}
        self.by_question: dict[str, ResponseLog] = {}
        self.by_module: dict[str, list[int]] = {}
        self.by_part: dict[str, list[int]] = {}
        self.recent_bits: list[int] = []
        self.graph_nodes: dict[str, list[int]] = {}
        self.kc_graph = kc_graph
        self.squash_map = dict(squash_map) if squash_map else None
        self.videos_watched = Tally()
        self.videos_skipped = Tally()
        self.video_minutes = Tally()
        self.readings = Tally()
        self.reading_minutes = Tally()
        self.hints = Tally()
        self.hint_minutes = Tally()
        self.prior_elapsed_s: float | None = None
        self.prior_lag_s: float | None = None
        self.prior_no_lag: bool = False
        self.has_prior_response: bool = False
        self.last_timestamp: int | None = None

    def kc_log(self, kc: str) -> ResponseLog:
        log = self.by_kc.get(kc)
        if log is None:
            log = self.by_kc[kc] = ResponseLog(self.window_seconds)
        return log

    def question_log(self, qid: str) -> ResponseLog:
        log = self.by_question.get(qid)
        if log is None:
            log = self.by_question[qid] = ResponseLog(self.window_seconds)
        return log

    def original_kcs(self, kc_ids: Sequence[str]) -> tuple[str, ...]:
        """Pre-squash KC ids for graph-node resolution."""
        if self.squash_map is None:
            return tuple(kc_ids)
        out: list[str] = []
        for k in kc_ids:
            out.extend(self.squash_map.get(k, (k,)))
        return tuple(dict.fromkeys(out))

    def check_order(self, timestamp: int) -> None:
        if self.last_timestamp is not None and timestamp < self.last_timestamp:
            raise SequencingError(
                f"event at {timestamp} arrived after state reached {self.last_timestamp}"
            )
        self.last_timestamp = timestamp


@dataclass(frozen=True)
class FoldAssignment:
    """Student-level fold map for cross-validation."""

    k: int
    seed: int
    folds: Mapping[str, int]

    def __post_init__(self) -> None:
        bad = [s for s, f in self.folds.items() if not 0 <= f < self.k]
        if bad:
            raise ConfigError(f"fold index out of range for students {bad[:3]}")

    def students_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.folds.items() if f == fold)

    def train_students(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.folds.items() if f != fold)

    def sizes(self) -> list[int]:
        out = [0] * self.k
        for f in self.folds.values():
            out[f] += 1
        return out

    def to_json(self) -> dict:
        return {"version": 1, "k": self.k, "seed": self.seed, "folds": dict(sorted(self.folds.items()))}

    @classmethod
    def from_json(cls, obj: Mapping) -> "FoldAssignment":
        return cls(k=int(obj["k"]), seed=int(obj["seed"]), folds={str(s): int(f) for s, f in obj["folds"].items()})


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, tight separators, newline end."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
