"""Stacked models: a meta logistic regression over base-model probabilities.

The meta model must never see predictions a base made on its own
training data, so fitting splits the training students 90/10 by a
seeded shuffle: bases train on the 90 percent, the meta model trains on
their predictions over the held-out 10 percent (plus a bias input), and
the bases are then refit on the full training set for deployment.
Subset selection evaluates every non-empty candidate subset on the
first fold only, keeping later folds untouched by the choice.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from ktrace import regression, specialize
from ktrace.core import ConfigError, FoldAssignment, canonical_json
from ktrace.evaluate import FoldPrediction, PlainSpec, auc
from ktrace.features import Encoder, FeatureFamily
from ktrace.ingest import Dataset
from ktrace.regression import Model, TrainConfig


class CombinationError(RuntimeError):
    """A base model failed while fitting a combination."""


def _split_meta_students(students: Mapping[str, list], seed: int) -> tuple[list[str], list[str]]:
    """Seeded 90/10 student split; the held-out 10% feeds the meta model."""
    ids = sorted(students)
    if len(ids) < 2:
        raise ConfigError("combining needs at least 2 training students")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_meta = max(1, len(ids) // 10)
    meta = sorted(ids[i] for i in perm[:n_meta])
    base = sorted(ids[i] for i in perm[n_meta:])
    return base, meta


def _meta_inputs(columns: Sequence[np.ndarray], logit_inputs: bool) -> sp.csr_matrix:
    cols = [np.ones_like(columns[0])]
    for c in columns:
        if logit_inputs:
            clipped = np.clip(c, 1e-12, 1.0 - 1e-12)
            cols.append(np.log(clipped / (1.0 - clipped)))
        else:
            cols.append(c)
    return sp.csr_matrix(np.column_stack(cols))


@dataclass
class CombinedModel:
    """Fitted base predictors plus the meta model over their probabilities."""

    specs: tuple
    fitted_bases: list
    meta: Model
    logit_inputs: bool = False
    info: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "combined(" + "+".join(s.label for s in self.specs) + ")"


def fit_combined(
    train_students: Mapping[str, list],
    specs: Sequence,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    logit_inputs: bool = False,
) -> CombinedModel:
    """Fit bases and the meta model; bases are refit on all of train."""
    if len(specs) < 2:
        raise ConfigError("a combination needs at least 2 base specs")
    base_ids, meta_ids = _split_meta_students(train_students, seed)
    base_students = {s: train_students[s] for s in base_ids}
    meta_students = {s: train_students[s] for s in meta_ids}

    columns: list[np.ndarray] = []
    labels: np.ndarray | None = None
    for spec in specs:
        try:
            fitted = spec.fit_on(base_students, dataset, config)
            pred = spec.predict_on(fitted, meta_students, dataset)
        except Exception as exc:
            raise CombinationError(f"base {spec.label!r} failed to train: {exc}") from exc
        columns.append(pred.probs)
        if labels is None:
            labels = pred.labels
        elif not np.array_equal(labels, pred.labels):
            raise CombinationError("base predictions disagree on example order")

    meta = regression.fit(
        _meta_inputs(columns, logit_inputs),
        labels,
        config,
        reg_mask=np.array([0.0] + [1.0] * len(specs)),
    )

    fitted_bases = []
    for spec in specs:
        try:
            fitted_bases.append(spec.fit_on(train_students, dataset, config))
        except Exception as exc:
            raise CombinationError(f"base {spec.label!r} failed to train: {exc}") from exc
    return CombinedModel(
        specs=tuple(specs),
        fitted_bases=fitted_bases,
        meta=meta,
        logit_inputs=logit_inputs,
        info={
            "seed": seed,
            "n_base_students": len(base_ids),
            "n_meta_students": len(meta_ids),
            "meta_nll": meta.info["final_nll"],
        },
    )


def predict_combined(cm: CombinedModel, students: Mapping[str, list], dataset: Dataset) -> FoldPrediction:
    """Meta prediction over the base probability columns."""
    columns = []
    labels = t = None
    for spec, fitted in zip(cm.specs, cm.fitted_bases):
        pred = spec.predict_on(fitted, students, dataset)
        columns.append(pred.probs)
        if labels is None:
            labels, t = pred.labels, pred.t
    probs = regression.predict_proba_batch(cm.meta, _meta_inputs(columns, cm.logit_inputs))
    return FoldPrediction(probs=probs, labels=labels, t=t)


@dataclass(frozen=True)
class CombinedSpec:
    """Cross-validation spec for a stacked model."""

    bases: tuple
    seed: int = 0
    logit_inputs: bool = False

    def __post_init__(self) -> None:
        if len(self.bases) < 2:
            raise ConfigError("a combination needs at least 2 base specs")

    @property
    def label(self) -> str:
        return "combined(" + "+".join(s.label for s in self.bases) + ")"

    def fit_on(self, students: Mapping[str, list], dataset: Dataset, config: TrainConfig) -> CombinedModel:
        return fit_combined(
            students, self.bases, dataset, config, seed=self.seed, logit_inputs=self.logit_inputs
        )

    def predict_on(self, fitted: CombinedModel, students: Mapping[str, list], dataset: Dataset) -> FoldPrediction:
        return predict_combined(fitted, students, dataset)


@dataclass
class SelectionResult:
    chosen: tuple[int, ...]
    best_auc: float
    table: list[dict]

    def chosen_specs(self, candidates: Sequence) -> tuple:
        return tuple(candidates[i] for i in self.chosen)


def select_bases(
    candidates: Sequence,
    dataset: Dataset,
    folds: FoldAssignment,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> SelectionResult:
    """Exhaustively score every non-empty candidate subset on fold 1.

    Subsets are enumerated smallest-first in index order and a new
    winner must be strictly better, so ties resolve toward fewer bases.
    Returns candidate indices, the winning fold-1 AUC and the full table.
    """
    if not candidates:
        raise ConfigError("no candidate base specs given")
    if len(candidates) > 12:
        raise ConfigError(f"exhaustive selection caps at 12 candidates, got {len(candidates)}")
    train = {s: dataset.students[s] for s in folds.train_students(0)}
    test = {s: dataset.students[s] for s in folds.students_in(0)}

    table: list[dict] = []
    best: tuple[int, ...] | None = None
    best_auc = -1.0
    for size in range(1, len(candidates) + 1):
        for subset in itertools.combinations(range(len(candidates)), size):
            specs = [candidates[i] for i in subset]
            if len(specs) == 1:
                spec = specs[0]
                pred = spec.predict_on(spec.fit_on(train, dataset, config), test, dataset)
            else:
                cm = fit_combined(train, specs, dataset, config, seed=seed)
                pred = predict_combined(cm, test, dataset)
            score = auc(pred.probs, pred.labels)
            table.append(
                {"subset": list(subset), "labels": [s.label for s in specs], "auc": score}
            )
            if score > best_auc:
                best = subset
                best_auc = score
    return SelectionResult(chosen=best, best_auc=best_auc, table=table)


# ---------------------------------------------------------------------------
# Serialization

def save_combined(cm: CombinedModel, out_dir: str | Path) -> Path:
    """Write the meta model and each base to its own subdirectory.

    Bases are stored through their spec's own format: plain specs as
    encoder + model files, partitioned specs as a partitioned-model
    directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regression.save_model(cm.meta, out / "meta.json")
    entries = []
    for i, (spec, fitted) in enumerate(zip(cm.specs, cm.fitted_bases)):
        sub = out / f"base-{i}"
        sub.mkdir(exist_ok=True)
        if isinstance(fitted, specialize.PartitionedModel):
            specialize.save_partitioned(fitted, sub)
            entries.append({"kind": "partitioned", "dir": sub.name, "label": spec.label,
                            "spec": _spec_json(spec)})
        else:
            encoder, model = fitted
            (sub / "encoder.json").write_text(canonical_json(encoder.to_json()), encoding="utf-8")
            regression.save_model(model, sub / "model.json")
            entries.append({"kind": "plain", "dir": sub.name, "label": spec.label,
                            "spec": _spec_json(spec)})
    manifest = {
        "kind": "combined_model",
        "logit_inputs": cm.logit_inputs,
        "info": {k: cm.info[k] for k in sorted(cm.info)},
        "meta": "meta.json",
        "bases": entries,
    }
    path = out / "combined.json"
    path.write_text(canonical_json(manifest), encoding="utf-8")
    return path


def _spec_json(spec) -> dict:
    if isinstance(spec, specialize.PartitionedSpec):
        return {
            "kind": "partitioned",
            "recipe": spec.recipe,
            "extras": [f.name for f in spec.extras],
            "scheme": spec.scheme.to_json(),
            "min_partition": spec.min_partition,
        }
    return {"kind": "plain", "recipe": spec.recipe, "extras": [f.name for f in spec.extras]}


def _spec_from_json(obj: Mapping):
    extras = tuple(FeatureFamily.parse(n) for n in obj.get("extras", []))
    if obj["kind"] == "partitioned":
        return specialize.PartitionedSpec(
            recipe=obj["recipe"],
            extras=extras,
            scheme=specialize.PartitionScheme.from_json(obj["scheme"]),
            min_partition=int(obj["min_partition"]),
        )
    return PlainSpec(recipe=obj["recipe"], extras=extras)


def load_combined(out_dir: str | Path) -> CombinedModel:
    out = Path(out_dir)
    manifest = json.loads((out / "combined.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "combined_model":
        raise ConfigError(f"{out} does not hold a combined model")
    meta = regression.load_model(out / manifest["meta"])
    specs = []
    fitted = []
    for entry in manifest["bases"]:
        spec = _spec_from_json(entry["spec"])
        specs.append(spec)
        sub = out / entry["dir"]
        if entry["kind"] == "partitioned":
            fitted.append(specialize.load_partitioned(sub))
        else:
            encoder = Encoder.from_json(json.loads((sub / "encoder.json").read_text(encoding="utf-8")))
            fitted.append((encoder, regression.load_model(sub / "model.json", encoder=encoder)))
    return CombinedModel(
        specs=tuple(specs),
        fitted_bases=fitted,
        meta=meta,
        logit_inputs=bool(manifest["logit_inputs"]),
        info=dict(manifest.get("info", {})),
    )
