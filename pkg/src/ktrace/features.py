"""Feature extraction: recipes, encoders, state updates and emission.

A Recipe is an ordered list of feature families plus extraction
parameters.  An Encoder binds a recipe to a training fold: it fixes the
categorical vocabularies, the per-family block offsets, the total
dimension, and the training-fold mean correctness used by the smoothed
average.  Emission maps (student state, upcoming question) to a
SparseVector using only events strictly before the question.

Counts and time values pass through scale() = ln(1+x).  Time-window
counts use ascending windows whose last entry is infinite; a prior
response falls into a finite window when its age is strictly less than
the window length.
"""

from __future__ import annotations

import hashlib
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from ktrace.core import (
    ConfigError,
    DatasetManifest,
    EventKind,
    InteractionEvent,
    KCGraph,
    SchemaError,
    SparseVector,
    StudentState,
    canonical_json,
    scale,
)

# ---------------------------------------------------------------------------
# Families and recipes

_CONTEXT_FIELDS = {
    "teacher_group": "teacher_group",
    "school": "school",
    "course": "course",
    "topic": "topic",
    "difficulty": "difficulty",
    "bundle": "bundle",
    "part_area": "part_area",
    "platform": "platform",
    "age": "age_gender",
    "gender": "age_gender",
    "social_support": "social_support",
}

# kind -> (allowed variants or None, required manifest flag or special key)
_FAMILY_TABLE: dict[str, tuple[tuple[str, ...] | None, str | None]] = {
    "bias": (None, None),
    "student": (None, None),
    "question": (None, None),
    "kc": (None, None),
    "counts": (("total", "kc", "question"), None),
    "tw_counts": (("total", "kc", "question"), None),
    "elapsed_time": (("current", "prior"), "elapsed_lag_time"),
    "lag_time": (("current", "prior"), "elapsed_lag_time"),
    "datetime": (("month", "week", "day", "hour"), None),
    "study_module": (None, "study_module"),
    "study_module_counts": (None, "study_module"),
    "context": (tuple(_CONTEXT_FIELDS), "context"),
    "part_area_counts": (None, "part_area"),
    "prereq_ids": (None, "graph"),
    "prereq_counts": (None, "graph"),
    "postreq_ids": (None, "graph"),
    "postreq_counts": (None, "graph"),
    "video_watched_counts": (None, "videos"),
    "video_skipped_counts": (None, "videos"),
    "video_watched_time": (None, "videos"),
    "reading_counts": (None, "reading"),
    "reading_time": (None, "reading"),
    "hint_counts": (None, "hints"),
    "hint_time": (None, "hints"),
    "smoothed_avg_correct": (None, None),
    "response_pattern": (None, None),
}


@dataclass(frozen=True, slots=True)
class FeatureFamily:
    """One feature block: a kind plus an optional variant qualifier."""

    kind: str
    variant: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in _FAMILY_TABLE:
            raise ConfigError(f"unknown feature family kind {self.kind!r}")
        variants, _ = _FAMILY_TABLE[self.kind]
        if variants is None:
            if self.variant is not None:
                raise ConfigError(f"family {self.kind!r} takes no variant")
        elif self.variant not in variants:
            raise ConfigError(
                f"family {self.kind!r} needs a variant in {variants}, got {self.variant!r}"
            )

    @property
    def name(self) -> str:
        return self.kind if self.variant is None else f"{self.kind}:{self.variant}"

    @classmethod
    def parse(cls, name: str) -> "FeatureFamily":
        kind, _, variant = name.partition(":")
        return cls(kind, variant or None)

    def required_flag(self, manifest: DatasetManifest) -> str | None:
        """Manifest flag this family needs on the given dataset, or None."""
        _, req = _FAMILY_TABLE[self.kind]
        if req == "context":
            return _CONTEXT_FIELDS[self.variant]  # type: ignore[index]
        if req == "graph":
            # satisfied by either an explicit graph or an ontology-derived one
            if manifest.allows("prereq_graph") or manifest.allows("kc_hierarchy"):
                return None
            return "prereq_graph|kc_hierarchy"
        return req

    def allowed_by(self, manifest: DatasetManifest) -> bool:
        flag = self.required_flag(manifest)
        if flag is None:
            return True
        if flag == "prereq_graph|kc_hierarchy":
            return False
        return manifest.allows(flag)


def F(kind: str, variant: str | None = None) -> FeatureFamily:
    return FeatureFamily(kind, variant)


DEFAULT_WINDOWS_DAYS: tuple[float, ...] = (1.0 / 24.0, 1.0, 7.0, 30.0, math.inf)


@dataclass(frozen=True)
class TWConfig:
    """Ascending time windows in days; the last window must be infinite."""

    days: tuple[float, ...] = DEFAULT_WINDOWS_DAYS

    def __post_init__(self) -> None:
        if not self.days:
            raise ConfigError("at least one time window required")
        if not math.isinf(self.days[-1]):
            raise ConfigError("last time window must be infinite")
        for a, b in zip(self.days, self.days[1:]):
            if not a < b:
                raise ConfigError("time windows must be strictly ascending")
        if self.days[0] <= 0:
            raise ConfigError("time windows must be positive")

    @property
    def finite_seconds(self) -> tuple[float, ...]:
        return tuple(d * 86400.0 for d in self.days if not math.isinf(d))

    @property
    def count(self) -> int:
        return len(self.days)


@dataclass(frozen=True)
class Recipe:
    """Ordered feature families with extraction parameters."""

    families: tuple[FeatureFamily, ...]
    n_recent: int = 10
    eta: float = 5.0
    tw: TWConfig = TWConfig()

    def __post_init__(self) -> None:
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature families in recipe")
        if not self.families:
            raise ConfigError("recipe needs at least one family")
        if self.n_recent < 1 or self.n_recent > 16:
            raise ConfigError("n_recent must be in 1..16")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")

    def has(self, kind: str, variant: str | None = None) -> bool:
        return any(f.kind == kind and (variant is None or f.variant == variant) for f in self.families)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "families": [f.name for f in self.families],
            "n_recent": self.n_recent,
            "eta": self.eta,
            "windows_days": ["inf" if math.isinf(d) else d for d in self.tw.days],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Recipe":
        days = tuple(math.inf if d == "inf" else float(d) for d in obj["windows_days"])
        return cls(
            families=tuple(FeatureFamily.parse(n) for n in obj["families"]),
            n_recent=int(obj["n_recent"]),
            eta=float(obj["eta"]),
            tw=TWConfig(days),
        )


# ---------------------------------------------------------------------------
# Binning and scalar helpers

ELAPSED_MAX_S = 300
LAG_CATEGORIES_MIN: tuple[int, ...] = tuple(range(6)) + tuple(range(10, 1441, 10))


def elapsed_bins(seconds: float) -> tuple[int, float]:
    """Elapsed-time category (whole seconds, capped at 300) and scaled value."""
    if seconds < 0:
        raise ValueError("elapsed time must be >= 0")
    return min(int(math.floor(seconds)), ELAPSED_MAX_S), scale(seconds)


def lag_bins(minutes: float) -> tuple[int, float]:
    """Lag-time category index and scaled value.

    Minutes are rounded half-up to an integer, then mapped to the
    largest listed category value not exceeding them; values above 1440
    fall into the final category.
    """
    if minutes < 0:
        raise ValueError("lag time must be >= 0")
    whole = int(math.floor(minutes + 0.5))
    pos = bisect_right(LAG_CATEGORIES_MIN, whole) - 1
    return min(pos, len(LAG_CATEGORIES_MIN) - 1), scale(minutes)


def smoothed_avg_correct(corrects: int, attempts: int, rbar: float, eta: float) -> float:
    """Average correctness shrunk toward the training mean rbar."""
    if corrects < 0 or attempts < corrects:
        raise ValueError("need 0 <= corrects <= attempts")
    if not 0.0 <= rbar <= 1.0:
        raise ValueError("rbar must be in [0, 1]")
    denom = attempts + eta
    if denom <= 0:
        raise ValueError("attempts + eta must be positive")
    return (corrects + eta * rbar) / denom


def pattern_block(bits: Sequence[int], n: int) -> int | None:
    """One-hot index of the last n responses (most recent = low bit).

    Returns None when fewer than n prior responses exist.
    """
    if len(bits) < n:
        return None
    idx = 0
    for i in range(1, n + 1):
        if bits[-i]:
            idx |= 1 << (i - 1)
    return idx


# ---------------------------------------------------------------------------
# Encoder

_VOCAB_DOMAINS = ("student", "question", "kc", "study_module", "graph_node")


def _family_domain(fam: FeatureFamily) -> str | None:
    """Vocabulary domain a family indexes into, if any."""
    if fam.kind == "student":
        return "student"
    if fam.kind == "question":
        return "question"
    if fam.kind == "kc" or (fam.kind in ("counts", "tw_counts") and fam.variant == "kc"):
        return "kc"
    if fam.kind in ("study_module", "study_module_counts"):
        return "study_module"
    if fam.kind in ("prereq_ids", "prereq_counts", "postreq_ids", "postreq_counts"):
        return "graph_node"
    if fam.kind == "context":
        return fam.variant
    return None


def _block_size(fam: FeatureFamily, vocabs: Mapping[str, Mapping[str, int]], recipe: Recipe) -> int:
    nw = recipe.tw.count
    k = fam.kind
    if k == "bias":
        return 1
    if k in ("student", "question", "kc", "study_module", "context"):
        return len(vocabs[_family_domain(fam)])
    if k == "counts":
        return 2 * len(vocabs["kc"]) if fam.variant == "kc" else 2
    if k == "tw_counts":
        per = 2 * nw
        return per * len(vocabs["kc"]) if fam.variant == "kc" else per
    if k == "elapsed_time":
        return ELAPSED_MAX_S + 1 + 1
    if k == "lag_time":
        return len(LAG_CATEGORIES_MIN) + 2
    if k == "datetime":
        return {"month": 12, "week": 53, "day": 7, "hour": 24}[fam.variant]
    if k == "study_module_counts":
        return 2 * len(vocabs["study_module"])
    if k in ("prereq_ids", "postreq_ids"):
        return len(vocabs["graph_node"])
    if k in ("prereq_counts", "postreq_counts"):
        return 2 * len(vocabs["graph_node"])
    if k == "response_pattern":
        return 1 << recipe.n_recent
    if k == "smoothed_avg_correct":
        return 1
    # fixed two-slot blocks: (total, related-to-current-KCs) or (corrects, attempts)
    return 2


@dataclass(frozen=True)
class Encoder:
    """A recipe bound to training-fold vocabularies and offsets."""

    recipe: Recipe
    vocabs: dict[str, dict[str, int]]
    blocks: tuple[tuple[FeatureFamily, int, int], ...]
    dim: int
    rbar: float

    def offset_of(self, name: str) -> tuple[int, int]:
        for fam, off, size in self.blocks:
            if fam.name == name:
                return off, size
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "recipe": self.recipe.to_json(),
            "vocabs": {d: dict(sorted(v.items())) for d, v in sorted(self.vocabs.items())},
            "blocks": [[fam.name, off, size] for fam, off, size in self.blocks],
            "dim": self.dim,
            "rbar": self.rbar,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Encoder":
        recipe = Recipe.from_json(obj["recipe"])
        vocabs = {d: {k: int(i) for k, i in v.items()} for d, v in obj["vocabs"].items()}
        blocks = tuple(
            (FeatureFamily.parse(name), int(off), int(size))
            for name, off, size in obj["blocks"]
        )
        return cls(recipe=recipe, vocabs=vocabs, blocks=blocks, dim=int(obj["dim"]), rbar=float(obj["rbar"]))

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


def check_recipe_supported(recipe: Recipe, manifest: DatasetManifest, kc_graph: KCGraph | None) -> None:
    gaps = [f.name for f in recipe.families if not f.allowed_by(manifest)]
    if gaps:
        raise ConfigError(
            f"dataset {manifest.name!r} does not support feature families: {', '.join(gaps)}"
        )
    needs_graph = [
        f.name
        for f in recipe.families
        if f.kind in ("prereq_ids", "prereq_counts", "postreq_ids", "postreq_counts")
    ]
    if needs_graph and kc_graph is None:
        raise ConfigError(
            f"families {', '.join(needs_graph)} need a prerequisite graph, none was provided"
        )


def fit_encoders(
    train_students: Mapping[str, Sequence[InteractionEvent]],
    recipe: Recipe,
    manifest: DatasetManifest,
    kc_graph: KCGraph | None = None,
) -> Encoder:
    """Build the encoder for a recipe from training-fold events only.

    Vocabularies are collected from question responses and indexed in
    sorted order, so the result is independent of event iteration order.
    """
    check_recipe_supported(recipe, manifest, kc_graph)

    needed = {d for d in (_family_domain(f) for f in recipe.families) if d is not None}
    seen: dict[str, set[str]] = {d: set() for d in needed if d != "graph_node"}
    corrects = 0
    attempts = 0
    for events in train_students.values():
        for e in events:
            if not e.is_response():
                continue
            attempts += 1
            if e.correct:
                corrects += 1
            if "student" in seen:
                seen["student"].add(e.student_id)
            if "question" in seen:
                seen["question"].add(e.question_id)  # type: ignore[arg-type]
            if "kc" in seen:
                seen["kc"].update(e.kc_ids)
            if "study_module" in seen and e.study_module is not None:
                seen["study_module"].add(e.study_module)
            for ctx in _CONTEXT_FIELDS:
                if ctx in seen:
                    value = getattr(e, ctx)
                    if value is not None:
                        seen[ctx].add(value)
    if attempts == 0:
        raise ConfigError("cannot fit encoders: no question responses in training data")

    vocabs: dict[str, dict[str, int]] = {
        d: {v: i for i, v in enumerate(sorted(values))} for d, values in seen.items()
    }
    if "graph_node" in needed:
        assert kc_graph is not None
        vocabs["graph_node"] = {n: i for i, n in enumerate(kc_graph.nodes)}

    blocks: list[tuple[FeatureFamily, int, int]] = []
    offset = 0
    for fam in recipe.families:
        size = _block_size(fam, vocabs, recipe)
        blocks.append((fam, offset, size))
        offset += size
    return Encoder(
        recipe=recipe,
        vocabs=vocabs,
        blocks=tuple(blocks),
        dim=offset,
        rbar=corrects / attempts,
    )


# ---------------------------------------------------------------------------
# State updates

def update_state(state: StudentState, event: InteractionEvent) -> None:
    """Fold one event into the student's running aggregates.

    Events must arrive in non-decreasing timestamp order.  Question
    responses update correctness logs (total, per KC, per question),
    module/part counters, graph-node tallies, the recent-response bits
    and the prior elapsed/lag snapshot.  Material events update the
    corresponding tallies; hint counts attached to responses count
    toward the hint tally as well.
    """
    state.check_order(event.timestamp)
    kcs = event.kc_ids
    if event.is_response():
        correct = bool(event.correct)
        ts = event.timestamp
        state.total.add(ts, correct)
        for k in kcs:
            state.kc_log(k).add(ts, correct)
        state.question_log(event.question_id).add(ts, correct)  # type: ignore[arg-type]
        inc = 1 if correct else 0
        if event.study_module is not None:
            cell = state.by_module.setdefault(event.study_module, [0, 0])
            cell[0] += inc
            cell[1] += 1
        if event.part_area is not None:
            cell = state.by_part.setdefault(event.part_area, [0, 0])
            cell[0] += inc
            cell[1] += 1
        if state.kc_graph is not None:
            graph = state.kc_graph
            if graph.node_kind == "question":
                keys: tuple[str, ...] = (event.question_id,)  # type: ignore[assignment]
            else:
                keys = state.original_kcs(kcs)
            touched: set[str] = set()
            for key in keys:
                touched.update(graph.nodes_counting.get(key, ()))
            for node in touched:  # once per response, even with several matching KCs
                cell = state.graph_nodes.setdefault(node, [0, 0])
                cell[0] += inc
                cell[1] += 1
        state.recent_bits.append(inc)
        if event.hint_count:
            state.hints.add(kcs, float(event.hint_count))
        state.prior_elapsed_s = event.elapsed_time_s
        state.prior_lag_s = event.lag_s
        state.prior_no_lag = event.no_lag
        state.has_prior_response = True
        return
    minutes = event.consumption_minutes or 0.0
    if event.kind is EventKind.VIDEO_WATCH:
        state.videos_watched.add(kcs, 1.0)
        if minutes:
            state.video_minutes.add(kcs, minutes)
    elif event.kind is EventKind.VIDEO_SKIP:
        state.videos_skipped.add(kcs, 1.0)
    elif event.kind is EventKind.READING:
        state.readings.add(kcs, 1.0)
        if minutes:
            state.reading_minutes.add(kcs, minutes)
    elif event.kind is EventKind.HINT_USE:
        state.hints.add(kcs, float(event.hint_count if event.hint_count else 1))
        if minutes:
            state.hint_minutes.add(kcs, minutes)


# ---------------------------------------------------------------------------
# Emission

def _push_pair(entries: list, off: int, corrects: float, attempts: float) -> None:
    if corrects:
        entries.append((off, scale(corrects)))
    if attempts:
        entries.append((off + 1, scale(attempts)))


def _push_tally_pair(entries: list, off: int, tally, kcs: Sequence[str]) -> None:
    if tally.total:
        entries.append((off, scale(tally.total)))
    related = tally.for_kcs(kcs)
    if related:
        entries.append((off + 1, scale(related)))


def emit(encoder: Encoder, state: StudentState, event: InteractionEvent) -> SparseVector:
    """Feature vector for predicting the response to `event`.

    Uses only the history already folded into `state`; the event itself
    supplies the question context (ids, receipt time, current lag and
    metadata).  Unseen categorical values emit nothing in their block.
    """
    if not event.is_response():
        raise ConfigError("can only emit features for question responses")
    recipe = encoder.recipe
    vocabs = encoder.vocabs
    now = event.timestamp
    kcs = event.kc_ids
    nw = recipe.tw.count
    entries: list[tuple[int, float]] = []

    for fam, off, size in encoder.blocks:
        kind = fam.kind
        if kind == "bias":
            entries.append((off, 1.0))
        elif kind == "student":
            idx = vocabs["student"].get(event.student_id)
            if idx is not None:
                entries.append((off + idx, 1.0))
        elif kind == "question":
            idx = vocabs["question"].get(event.question_id)
            if idx is not None:
                entries.append((off + idx, 1.0))
        elif kind == "kc":
            kvoc = vocabs["kc"]
            for k in kcs:
                idx = kvoc.get(k)
                if idx is not None:
                    entries.append((off + idx, 1.0))
        elif kind == "counts":
            if fam.variant == "total":
                _push_pair(entries, off, state.total.corrects, state.total.attempts)
            elif fam.variant == "question":
                log = state.by_question.get(event.question_id)
                if log is not None:
                    _push_pair(entries, off, log.corrects, log.attempts)
            else:
                kvoc = vocabs["kc"]
                for k in kcs:
                    idx = kvoc.get(k)
                    if idx is None:
                        continue
                    log = state.by_kc.get(k)
                    if log is not None:
                        _push_pair(entries, off + 2 * idx, log.corrects, log.attempts)
        elif kind == "tw_counts":
            def tw_entries(log, base: int) -> None:
                if log is None or not log.ts:
                    return
                win = log.window_counts(now)
                win.append((log.corrects, log.attempts))
                for j, (c, a) in enumerate(win):
                    _push_pair(entries, base + 2 * j, c, a)

            if fam.variant == "total":
                tw_entries(state.total, off)
            elif fam.variant == "question":
                tw_entries(state.by_question.get(event.question_id), off)
            else:
                kvoc = vocabs["kc"]
                for k in kcs:
                    idx = kvoc.get(k)
                    if idx is not None:
                        tw_entries(state.by_kc.get(k), off + idx * 2 * nw)
        elif kind == "elapsed_time":
            secs = event.elapsed_time_s if fam.variant == "current" else state.prior_elapsed_s
            if secs is not None:
                cat, scaled = elapsed_bins(secs)
                entries.append((off + cat, 1.0))
                if scaled:
                    entries.append((off + ELAPSED_MAX_S + 1, scaled))
        elif kind == "lag_time":
            if fam.variant == "current":
                lag_s, flag = event.lag_s, event.no_lag
            else:
                lag_s, flag = state.prior_lag_s, state.prior_no_lag
            n_cat = len(LAG_CATEGORIES_MIN)
            if flag:
                entries.append((off + n_cat + 1, 1.0))
            elif lag_s is not None:
                cat, scaled = lag_bins(lag_s / 60.0)
                entries.append((off + cat, 1.0))
                if scaled:
                    entries.append((off + n_cat, scaled))
        elif kind == "datetime":
            dt = datetime.fromtimestamp(now, tz=timezone.utc)
            if fam.variant == "month":
                entries.append((off + dt.month - 1, 1.0))
            elif fam.variant == "week":
                entries.append((off + dt.isocalendar().week - 1, 1.0))
            elif fam.variant == "day":
                entries.append((off + dt.weekday(), 1.0))
            else:
                entries.append((off + dt.hour, 1.0))
        elif kind == "study_module":
            if event.study_module is not None:
                idx = vocabs["study_module"].get(event.study_module)
                if idx is not None:
                    entries.append((off + idx, 1.0))
        elif kind == "study_module_counts":
            if event.study_module is not None:
                idx = vocabs["study_module"].get(event.study_module)
                cell = state.by_module.get(event.study_module)
                if idx is not None and cell is not None:
                    _push_pair(entries, off + 2 * idx, cell[0], cell[1])
        elif kind == "context":
            value = getattr(event, fam.variant)  # type: ignore[arg-type]
            if value is not None:
                idx = vocabs[fam.variant].get(value)  # type: ignore[index]
                if idx is not None:
                    entries.append((off + idx, 1.0))
        elif kind == "part_area_counts":
            if event.part_area is not None:
                cell = state.by_part.get(event.part_area)
                if cell is not None:
                    _push_pair(entries, off, cell[0], cell[1])
        elif kind in ("prereq_ids", "prereq_counts", "postreq_ids", "postreq_counts"):
            graph = state.kc_graph
            if graph is None:
                raise ConfigError(f"family {fam.name} requires a prerequisite graph")
            nodes = graph.nodes_for_event(event.question_id, state.original_kcs(kcs))
            related: set[str] = set()
            step = graph.prereqs_of if kind.startswith("prereq") else graph.postreqs_of
            for node in nodes:
                related.update(step(node))
            nvoc = vocabs["graph_node"]
            if kind.endswith("_ids"):
                for p in sorted(related):
                    idx = nvoc.get(p)
                    if idx is not None:
                        entries.append((off + idx, 1.0))
            else:
                for p in sorted(related):
                    idx = nvoc.get(p)
                    cell = state.graph_nodes.get(p)
                    if idx is not None and cell is not None:
                        _push_pair(entries, off + 2 * idx, cell[0], cell[1])
        elif kind == "video_watched_counts":
            _push_tally_pair(entries, off, state.videos_watched, kcs)
        elif kind == "video_skipped_counts":
            _push_tally_pair(entries, off, state.videos_skipped, kcs)
        elif kind == "video_watched_time":
            _push_tally_pair(entries, off, state.video_minutes, kcs)
        elif kind == "reading_counts":
            _push_tally_pair(entries, off, state.readings, kcs)
        elif kind == "reading_time":
            _push_tally_pair(entries, off, state.reading_minutes, kcs)
        elif kind == "hint_counts":
            _push_tally_pair(entries, off, state.hints, kcs)
        elif kind == "hint_time":
            _push_tally_pair(entries, off, state.hint_minutes, kcs)
        elif kind == "smoothed_avg_correct":
            value = smoothed_avg_correct(
                state.total.corrects, state.total.attempts, encoder.rbar, recipe.eta
            )
            if value:
                entries.append((off, value))
        elif kind == "response_pattern":
            idx = pattern_block(state.recent_bits, recipe.n_recent)
            if idx is not None:
                entries.append((off + idx, 1.0))
        else:  # pragma: no cover - table and dispatch kept in sync
            raise ConfigError(f"unhandled family {fam.name}")

    vec = SparseVector.from_pairs(entries)
    if vec.nnz and vec.indices[-1] >= encoder.dim:
        raise RuntimeError("emitted index outside encoder dimension")
    return vec


# ---------------------------------------------------------------------------
# Extraction driver

def iter_contexts(
    events: Sequence[InteractionEvent],
    tw: TWConfig = TWConfig(),
    kc_graph: KCGraph | None = None,
    squash_map: Mapping[str, tuple[str, ...]] | None = None,
) -> Iterator[tuple[InteractionEvent, StudentState, int]]:
    """Walk one student's events, yielding (response, state-before, index).

    The yielded index is the number of prior responses; the state has
    absorbed only events strictly before the yielded response.
    """
    state = StudentState(tw.finite_seconds, kc_graph=kc_graph, squash_map=squash_map)
    t = 0
    for e in events:
        if e.is_response():
            yield e, state, t
            t += 1
        update_state(state, e)


@dataclass
class ExtractResult:
    """Stacked training examples for one encoder."""

    X: sp.csr_matrix
    y: np.ndarray
    t: np.ndarray
    events: list[InteractionEvent]


def stack_vectors(vectors: Sequence[SparseVector], dim: int) -> sp.csr_matrix:
    n = len(vectors)
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + v.nnz
    if n:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.values for v in vectors])
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0, dtype=np.float64)
    return sp.csr_matrix((data, indices, indptr), shape=(n, dim))


def build_matrix(
    students: Mapping[str, Sequence[InteractionEvent]],
    encoder: Encoder,
    kc_graph: KCGraph | None = None,
    squash_map: Mapping[str, tuple[str, ...]] | None = None,
) -> ExtractResult:
    """Extract features for every response of every given student."""
    vectors: list[SparseVector] = []
    labels: list[int] = []
    t_idx: list[int] = []
    kept: list[InteractionEvent] = []
    for sid in sorted(students):
        for event, state, t in iter_contexts(
            students[sid], encoder.recipe.tw, kc_graph=kc_graph, squash_map=squash_map
        ):
            vectors.append(emit(encoder, state, event))
            labels.append(1 if event.correct else 0)
            t_idx.append(t)
            kept.append(event)
    return ExtractResult(
        X=stack_vectors(vectors, encoder.dim),
        y=np.asarray(labels, dtype=np.float64),
        t=np.asarray(t_idx, dtype=np.int64),
        events=kept,
    )
