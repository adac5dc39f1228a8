import math

import numpy as np
import pytest

from ktrace.combine import (
    CombinationError,
    CombinedSpec,
    fit_combined,
    load_combined,
    predict_combined,
    save_combined,
    select_bases,
)
from ktrace.core import ConfigError, FoldAssignment
from ktrace.evaluate import PlainSpec, auc, cross_validate
from ktrace.features import F
from ktrace.ingest import split_folds
from ktrace.regression import TrainConfig
from ktrace.specialize import PartitionScheme, PartitionedSpec
from ktrace.synth import GeneratorConfig, generate

CFG = TrainConfig(l2=1e-4)


def _irt_data(seed=41, n_students=60, per=25):
    ds, _ = generate(GeneratorConfig(seed=seed, n_students=n_students,
                                     responses_per_student=per, n_questions=15))
    folds = split_folds(ds, k=4, seed=seed)
    train = {s: ds.students[s] for s in folds.train_students(0)}
    test = {s: ds.students[s] for s in folds.students_in(0)}
    return ds, folds, train, test


def test_needs_two_bases():
    ds, _, train, _ = _irt_data()
    with pytest.raises(ConfigError):
        fit_combined(train, [PlainSpec("irt")], ds, CFG)
    with pytest.raises(ConfigError):
        CombinedSpec(bases=(PlainSpec("irt"),))


def test_identical_bases_match_single_base():
    ds, _, train, test = _irt_data()
    single = PlainSpec("irt")
    pred_single = single.predict_on(single.fit_on(train, ds, CFG), test, ds)
    cm = fit_combined(train, [PlainSpec("irt"), PlainSpec("irt")], ds, CFG, seed=3)
    pred_comb = predict_combined(cm, test, ds)
    assert abs(auc(pred_comb.probs, pred_comb.labels) - auc(pred_single.probs, pred_single.labels)) < 1e-6


class ComplementSpec:
    """Wraps a spec and emits 1 - p, for the monotone-invariance check."""

    def __init__(self, inner):
        self.inner = inner
        self.label = f"complement({inner.label})"

    def fit_on(self, students, dataset, config):
        return self.inner.fit_on(students, dataset, config)

    def predict_on(self, fitted, students, dataset):
        pred = self.inner.predict_on(fitted, students, dataset)
        return type(pred)(probs=1.0 - pred.probs, labels=pred.labels, t=pred.t)


def test_base_plus_complement_keeps_auc():
    ds, _, train, test = _irt_data()
    base = PlainSpec("irt")
    pred_single = base.predict_on(base.fit_on(train, ds, CFG), test, ds)
    cm = fit_combined(train, [base, ComplementSpec(PlainSpec("irt"))], ds, CFG, seed=5)
    pred = predict_combined(cm, test, ds)
    assert abs(auc(pred.probs, pred.labels) - auc(pred_single.probs, pred_single.labels)) < 1e-6


def test_complementary_signals_not_worse_than_best_base():
    ds, _, train, test = _irt_data(seed=43)
    dm, _ = generate(GeneratorConfig(seed=43, momentum=1.5, n_students=80,
                                     responses_per_student=30, n_questions=15))
    folds = split_folds(dm, k=4, seed=43)
    train = {s: dm.students[s] for s in folds.train_students(0)}
    test = {s: dm.students[s] for s in folds.students_in(0)}
    sees_difficulty = PlainSpec("irt")
    sees_recency = PlainSpec("pfa", extras=(F("response_pattern"),))
    base_aucs = []
    for spec in (sees_difficulty, sees_recency):
        pred = spec.predict_on(spec.fit_on(train, dm, CFG), test, dm)
        base_aucs.append(auc(pred.probs, pred.labels))
    cm = fit_combined(train, [sees_difficulty, sees_recency], dm, CFG, seed=7)
    pred = predict_combined(cm, test, dm)
    assert auc(pred.probs, pred.labels) >= max(base_aucs) - 0.002


def test_failing_base_named():
    ds, _, train, _ = _irt_data()

    class Boom:
        label = "boom"

        def fit_on(self, *a, **kw):
            raise RuntimeError("nope")

        def predict_on(self, *a, **kw):
            raise RuntimeError("nope")

    with pytest.raises(CombinationError, match="boom"):
        fit_combined(train, [PlainSpec("irt"), Boom()], ds, CFG)


def test_combined_spec_cross_validates():
    ds, _ = generate(GeneratorConfig(seed=47, n_students=40, responses_per_student=20, n_questions=10))
    spec = CombinedSpec(bases=(PlainSpec("irt"), PlainSpec("pfa")), seed=11)
    report = cross_validate(ds, spec, k=4, seed=47, config=CFG)
    assert report.spec == "combined(irt+pfa)"
    assert len(report.per_fold) == 4
    assert 0.4 < report.auc_mean <= 1.0


class NoiseSpec:
    """Predictions unrelated to the data."""

    label = "noise"

    def __init__(self, seed=99):
        self.seed = seed

    def fit_on(self, students, dataset, config):
        return None

    def predict_on(self, fitted, students, dataset):
        # reuse extraction only for labels and ordering
        from ktrace import features
        from ktrace.evaluate import FoldPrediction
        from ktrace.recipes import resolve

        enc = features.fit_encoders(students, resolve("irt", dataset.manifest).recipe, dataset.manifest)
        ext = features.build_matrix(students, enc)
        rng = np.random.default_rng(self.seed)
        return FoldPrediction(probs=rng.random(ext.y.size), labels=ext.y, t=ext.t)


def test_select_bases_examples():
    ds, folds, _, _ = _irt_data(seed=53, n_students=50, per=20)
    # one candidate -> that singleton
    res = select_bases([PlainSpec("irt")], ds, folds, CFG)
    assert res.chosen == (0,)
    assert len(res.table) == 1

    # noise candidate is not selected
    res2 = select_bases([PlainSpec("irt"), NoiseSpec()], ds, folds, CFG, seed=1)
    assert res2.chosen == (0,)
    assert len(res2.table) == 3

    with pytest.raises(ConfigError):
        select_bases([PlainSpec("irt")] * 13, ds, folds, CFG)


def test_select_bases_subset_count():
    ds, folds, _, _ = _irt_data(seed=59, n_students=40, per=15)
    cands = [PlainSpec("irt"), PlainSpec("pfa"), NoiseSpec(1), NoiseSpec(2)]
    res = select_bases(cands, ds, folds, CFG, seed=2)
    assert len(res.table) == 15  # 2^4 - 1
    assert set(res.chosen) <= {0, 1, 2, 3}


class TrackingFolds(FoldAssignment):
    """Records which folds are touched."""

    def __init__(self, inner: FoldAssignment):
        super().__init__(k=inner.k, seed=inner.seed, folds=dict(inner.folds))
        object.__setattr__(self, "touched", [])

    def students_in(self, fold):
        self.touched.append(fold)
        return super().students_in(fold)

    def train_students(self, fold):
        self.touched.append(fold)
        return super().train_students(fold)


def test_select_bases_touches_only_first_fold():
    ds, folds, _, _ = _irt_data(seed=61, n_students=30, per=12)
    tracking = TrackingFolds(folds)
    select_bases([PlainSpec("irt"), PlainSpec("pfa")], ds, tracking, CFG)
    assert set(tracking.touched) == {0}


def test_save_load_roundtrip(tmp_path):
    ds, folds, train, test = _irt_data(seed=67, n_students=40, per=20)
    bases = [
        PlainSpec("irt"),
        PartitionedSpec("pfa", scheme=PartitionScheme.response_index((0, 10, math.inf)),
                        min_partition=10),
    ]
    cm = fit_combined(train, bases, ds, CFG, seed=13)
    save_combined(cm, tmp_path)
    again = load_combined(tmp_path)
    a = predict_combined(cm, test, ds)
    b = predict_combined(again, test, ds)
    assert a.probs.tobytes() == b.probs.tobytes()
    assert again.label == cm.label
    assert [s.label for s in again.specs] == [s.label for s in cm.specs]
