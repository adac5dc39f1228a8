"""Command-line entry point for reproducible runs.

Subcommands: generate (synthetic data), prepare (validate, filter,
squash, fold split), train-eval (cross-validated training with optional
partitioning, combination and base selection) and stats.

Option precedence is flags > KTRACE_JOBS environment variable (--jobs
only) > --config JSON file > built-in defaults.  All randomness flows
from --seed; outputs other than the run manifest (which records
wall-clock times) are byte-identical across reruns and across --jobs
values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from ktrace import __version__, combine, evaluate, ingest, regression, specialize, synth
from ktrace.core import ConfigError, canonical_json
from ktrace.features import FeatureFamily
from ktrace.recipes import RECIPE_NAMES

JOBS_ENV = "KTRACE_JOBS"


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Records what a command read, wrote and decided."""

    def __init__(self, argv: list[str], subcommand: str, effective: dict, seed: int | None):
        self.argv = argv
        self.subcommand = subcommand
        self.effective = effective
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self._t0 = time.monotonic()
        self._started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = _sha256_file(path)

    def add_output(self, path: Path) -> None:
        self.outputs.append(str(path))

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run_manifest.json"
        payload = {
            "command": self.argv,
            "subcommand": self.subcommand,
            "effective_config": self.effective,
            "config_digest": hashlib.sha256(
                canonical_json(self.effective).encode()
            ).hexdigest(),
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
            "started_utc": self._started,
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "duration_s": round(time.monotonic() - self._t0, 3),
            "versions": {
                "ktrace": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        }
        path.write_text(canonical_json(payload), encoding="utf-8")
        return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ConfigError("--config file must hold a JSON object")
    return obj


def _effective(args: argparse.Namespace, cfg: dict, name: str, default, env: str | None = None):
    """flags > environment > config file > default."""
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    if env is not None and os.environ.get(env):
        return type(default)(os.environ[env]) if default is not None else os.environ[env]
    if name in cfg:
        return cfg[name]
    return default


def _parse_extras(text: str | None) -> tuple[FeatureFamily, ...]:
    if not text:
        return ()
    return tuple(FeatureFamily.parse(tok.strip()) for tok in text.split(",") if tok.strip())


def _parse_partition(text: str) -> specialize.PartitionScheme | None:
    if text == "none":
        return None
    if text in ("response-index", "ri"):
        return specialize.PartitionScheme.response_index()
    if text.startswith("by-feature:"):
        return specialize.PartitionScheme.by_feature(text.split(":", 1)[1])
    raise ConfigError(
        f"--partition must be none, response-index or by-feature:FIELD, got {text!r}"
    )


def _parse_base_token(token: str, min_partition: int):
    """A base spec: RECIPE, RECIPE@ri, or RECIPE@f:FIELD."""
    name, _, suffix = token.partition("@")
    extras_split = name.split("+")
    recipe, extras = extras_split[0], _parse_extras(",".join(extras_split[1:]))
    if not suffix:
        return evaluate.PlainSpec(recipe, extras=extras)
    if suffix == "ri":
        scheme = specialize.PartitionScheme.response_index()
    elif suffix.startswith("f:"):
        scheme = specialize.PartitionScheme.by_feature(suffix[2:])
    else:
        raise ConfigError(f"unknown base suffix {suffix!r} in {token!r}")
    return specialize.PartitionedSpec(recipe, extras=extras, scheme=scheme,
                                      min_partition=min_partition)


def save_fitted(fitted, out_dir: Path) -> None:
    """Persist whatever a spec's fit_on returned."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(fitted, specialize.PartitionedModel):
        specialize.save_partitioned(fitted, out_dir)
    elif isinstance(fitted, combine.CombinedModel):
        combine.save_combined(fitted, out_dir)
    else:
        encoder, model = fitted
        (out_dir / "encoder.json").write_text(
            canonical_json(encoder.to_json()), encoding="utf-8"
        )
        regression.save_model(model, out_dir / "model.json")


def cmd_generate(args: argparse.Namespace, argv: list[str]) -> int:
    cfg_file = _load_config_file(args.config)
    fields = {}
    for name, default in (
        ("seed", 0), ("students", 500), ("questions", 50), ("kcs", 5),
        ("responses", 50), ("momentum", 0.0), ("prereq_transfer", 0.0),
        ("module_scale", 1.0), ("mean_gap_s", 6 * 3600.0), ("mean_elapsed_s", 60.0),
        ("name", "synth"),
    ):
        fields[name] = _effective(args, cfg_file, name, default)
    regime = _effective(args, cfg_file, "regime_step", None)
    modules = _effective(args, cfg_file, "modules", None)
    config = synth.GeneratorConfig(
        seed=int(fields["seed"]),
        n_students=int(fields["students"]),
        n_questions=int(fields["questions"]),
        n_kcs=int(fields["kcs"]),
        responses_per_student=int(fields["responses"]),
        momentum=float(fields["momentum"]),
        regime_step=int(regime) if regime is not None else None,
        prereq_transfer=float(fields["prereq_transfer"]),
        modules=tuple(m for m in (modules.split(",") if isinstance(modules, str) else modules or []) if m),
        module_scale=float(fields["module_scale"]),
        mean_gap_s=float(fields["mean_gap_s"]),
        mean_elapsed_s=float(fields["mean_elapsed_s"]),
        name=str(fields["name"]),
    )
    out = Path(args.out)
    run = RunManifest(argv, "generate", config.to_json(), config.seed)
    dataset, truth = synth.generate(config)
    for path in synth.write_synth(dataset, truth, out).values():
        run.add_output(path)
    run.add_output(run.write(out))
    print(f"wrote {dataset.n_students} students, {dataset.n_responses} responses to {out}")
    return 0


def cmd_prepare(args: argparse.Namespace, argv: list[str]) -> int:
    cfg_file = _load_config_file(args.config)
    min_responses = int(_effective(args, cfg_file, "min-responses", 10))
    k = int(_effective(args, cfg_file, "folds", 5))
    seed = int(_effective(args, cfg_file, "seed", 0))
    squash = bool(_effective(args, cfg_file, "squash-kcs", False))

    run = RunManifest(
        argv, "prepare",
        {"min_responses": min_responses, "folds": k, "seed": seed, "squash_kcs": squash},
        seed,
    )
    in_csv = Path(args.input)
    in_manifest = Path(args.manifest)
    run.add_input(in_csv)
    run.add_input(in_manifest)

    manifest, graph = ingest.read_manifest(in_manifest)
    dataset = ingest.load_events(in_csv, manifest)
    dataset.kc_graph = graph
    dataset = ingest.filter_students(dataset, min_responses=min_responses)
    if squash:
        dataset = ingest.squash_multi_kc(dataset)
    dataset = ingest.derive_lag_times(dataset)
    folds = ingest.split_folds(dataset, k=k, seed=seed)

    out = Path(args.out)
    for written in ingest.write_prepared(dataset, folds, out).values():
        run.add_output(Path(written))
    run.add_output(run.write(out))
    print(
        f"prepared {dataset.n_students} students, {dataset.n_responses} responses, "
        f"{k} folds at {out}"
    )
    return 0


def _build_spec(args: argparse.Namespace, cfg_file: dict):
    min_partition = int(_effective(args, cfg_file, "min-partition", 50))
    extras = _parse_extras(_effective(args, cfg_file, "extras", None))
    combo = _effective(args, cfg_file, "combine", "none")
    partition = _effective(args, cfg_file, "partition", "none")
    if combo != "none":
        if partition != "none":
            raise ConfigError("--partition applies to bases via @ suffixes when --combine is used")
        bases = tuple(_parse_base_token(tok, min_partition) for tok in combo.split("+") if tok)
        return bases, None, min_partition
    scheme = _parse_partition(partition)
    if scheme is None:
        return None, evaluate.PlainSpec(args.recipe, extras=extras), min_partition
    return None, specialize.PartitionedSpec(
        args.recipe, extras=extras, scheme=scheme, min_partition=min_partition
    ), min_partition


def cmd_train_eval(args: argparse.Namespace, argv: list[str]) -> int:
    cfg_file = _load_config_file(args.config)
    seed = int(_effective(args, cfg_file, "seed", 0))
    k = int(_effective(args, cfg_file, "folds", 5))
    jobs = int(_effective(args, cfg_file, "jobs", 1, env=JOBS_ENV))
    l2 = float(_effective(args, cfg_file, "l2", 1e-6))
    if args.recipe not in RECIPE_NAMES:
        raise ConfigError(f"--recipe must be one of {', '.join(RECIPE_NAMES)}")

    data_dir = Path(args.data)
    dataset, stored_folds = ingest.load_prepared(data_dir)
    folds = stored_folds
    if args.folds is not None or args.seed is not None or stored_folds is None:
        folds = ingest.split_folds(dataset, k=k, seed=seed)

    config = regression.TrainConfig(l2=l2)
    bases, spec, min_partition = _build_spec(args, cfg_file)
    extra: dict = {}
    if bases is not None:
        if args.select_bases:
            selection = combine.select_bases(list(bases), dataset, folds, config, seed=seed)
            chosen = selection.chosen_specs(list(bases))
            extra["selection"] = {
                "chosen": [s.label for s in chosen],
                "fold1_auc": selection.best_auc,
                "table": selection.table,
            }
            print("selected bases:", " + ".join(s.label for s in chosen))
        else:
            chosen = bases
        if len(chosen) == 1:
            spec = chosen[0]
        else:
            spec = combine.CombinedSpec(bases=tuple(chosen), seed=seed)

    run = RunManifest(
        argv, "train-eval",
        {
            "recipe": args.recipe, "spec": spec.label, "folds": folds.k,
            "seed": folds.seed, "jobs": jobs, "l2": l2, "min_partition": min_partition,
        },
        seed,
    )
    for name in ("events.csv", "manifest.json", "folds.json"):
        if (data_dir / name).exists():
            run.add_input(data_dir / name)

    out = Path(args.out) if args.out else None
    on_fitted = None
    if out is not None:
        models_dir = out / "models"

        def on_fitted(fold: int, fitted) -> None:
            save_fitted(fitted, models_dir / f"fold-{fold}")

    report = evaluate.cross_validate(
        dataset, spec, folds=folds, config=config, jobs=jobs,
        include_roc=args.roc_csv is not None, on_fitted=on_fitted,
    )
    report.extra.update(extra)

    text = report.to_canonical_json()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text, encoding="utf-8")
        run.add_output(Path(args.report))
    if args.roc_csv:
        roc_path = Path(args.roc_csv)
        lines = ["fpr,tpr"] + [f"{x!r},{y!r}" for x, y in report.roc]
        roc_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.add_output(roc_path)
        report.roc = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text, encoding="utf-8")
        run.add_output(out / "report.json")
        for fold in range(folds.k):
            run.add_output(out / "models" / f"fold-{fold}")
        run.add_output(run.write(out))
    print(
        f"{spec.label}: acc {report.acc_mean:.4f} (var {report.acc_var:.2e}), "
        f"auc {report.auc_mean:.4f} (var {report.auc_var:.2e})"
    )
    return 0


def cmd_stats(args: argparse.Namespace, argv: list[str]) -> int:
    if args.data:
        dataset, _ = ingest.load_prepared(Path(args.data))
    else:
        if not (args.input and args.manifest):
            raise ConfigError("stats needs either --data or both --input and --manifest")
        manifest, graph = ingest.read_manifest(Path(args.manifest))
        dataset = ingest.load_events(Path(args.input), manifest)
        dataset.kc_graph = graph
    stats = evaluate.dataset_stats(dataset)
    text = canonical_json(stats)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ktrace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset with ground truth")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", help="JSON file with default option values")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--students", type=int)
    gen.add_argument("--questions", type=int)
    gen.add_argument("--kcs", type=int)
    gen.add_argument("--responses", type=int)
    gen.add_argument("--momentum", type=float)
    gen.add_argument("--regime-step", type=int)
    gen.add_argument("--prereq-transfer", type=float)
    gen.add_argument("--modules", help="comma-separated study module labels")
    gen.add_argument("--module-scale", type=float)
    gen.add_argument("--mean-gap-s", type=float)
    gen.add_argument("--mean-elapsed-s", type=float)
    gen.add_argument("--name")

    prep = sub.add_parser("prepare", help="validate, filter and split an event log")
    prep.add_argument("--input", required=True, help="canonical events CSV")
    prep.add_argument("--manifest", required=True, help="dataset manifest JSON")
    prep.add_argument("--out", required=True)
    prep.add_argument("--config")
    prep.add_argument("--min-responses", type=int)
    prep.add_argument("--folds", type=int)
    prep.add_argument("--seed", type=int)
    prep.add_argument("--squash-kcs", action="store_const", const=True)

    te = sub.add_parser("train-eval", help="cross-validated training and evaluation")
    te.add_argument("--data", required=True, help="prepared dataset directory")
    te.add_argument("--recipe", default="best-lr", help=f"one of {', '.join(RECIPE_NAMES)}")
    te.add_argument("--extras", help="comma-separated extra feature families")
    te.add_argument("--config")
    te.add_argument("--folds", type=int)
    te.add_argument("--seed", type=int)
    te.add_argument("--jobs", type=int)
    te.add_argument("--l2", type=float)
    te.add_argument("--partition", help="none | response-index | by-feature:FIELD")
    te.add_argument("--min-partition", type=int)
    te.add_argument("--combine", help="base specs joined by +, e.g. irt+best-lr@ri")
    te.add_argument("--select-bases", action="store_true",
                    help="pick the best --combine subset on fold 1")
    te.add_argument("--report", help="write the metrics report JSON here")
    te.add_argument("--roc-csv", help="write pooled ROC points as CSV")
    te.add_argument("--out", help="directory for models, report and run manifest")

    st = sub.add_parser("stats", help="dataset statistics")
    st.add_argument("--data", help="prepared dataset directory")
    st.add_argument("--input", help="canonical events CSV")
    st.add_argument("--manifest", help="dataset manifest JSON")
    st.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "prepare": cmd_prepare,
        "train-eval": cmd_train_eval,
        "stats": cmd_stats,
    }
    try:
        return handlers[args.subcommand](args, argv)
    except (ValueError, OSError, regression.TrainingDivergenceError, combine.CombinationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
