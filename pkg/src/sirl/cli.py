"""Command line: synthesize cohorts, run the comparison protocol, dump latents.

``run`` executes pretrain -> finetune -> evaluate for each requested model
variant, then writes a report directory: human summary, structured report,
line-delimited metrics, the effective config echo, one checkpoint per
generic variant, and rendered figures. Feeding the echoed config back via
``--config`` reproduces the identical report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .analysis import (
    UnsupportedRangeError,
    anova_oneway,
    latent_rows,
    subject_dispersion,
    tukey_hsd,
)
from .data import (
    Dataset,
    DatasetFormatError,
    SynthConfig,
    load_dataset,
    save_dataset,
    split_by_subject,
    synth_generate,
)
from .models import (
    ShapeMismatchError,
    SpecValidationError,
    auto_spec,
    load_checkpoint,
    preset_spec,
    save_checkpoint,
)
from .plots import save_accuracy_bars, save_latent_scatter, save_loss_curves
from .training import (
    VARIANTS,
    TrainingConfig,
    TrainingDivergedError,
    config_for_variant,
    metrics_records,
    person_specific_trials,
    run_trials,
)

PRESETS = ("auto", "clas", "apnea")
ALPHAS = (0.05, 0.01)
DEFAULT_VARIANTS = ("baseline", "dann", "mmd", "triplet", "mmd+triplet", "person-specific")


@dataclass(frozen=True)
class RunConfig:
    """Effective settings for one ``run`` invocation.

    Sourced from built-in defaults, then an optional JSON config file, then
    command-line flags — later layers override earlier ones. The resolved
    value is echoed verbatim to ``<outdir>/config.json``.
    """

    data: str = ""
    outdir: str = ""
    variants: tuple[str, ...] = DEFAULT_VARIANTS
    preset: str = "auto"
    latent_dim: int = 8
    epochs: int = 100
    person_epochs: int | None = None  # None -> 3 * epochs
    batch_size: int | None = None  # None -> 256 for apnea preset, else 32
    learning_rate: float = 0.001
    lambda_mmd: float = 0.2
    lambda_triplet: float = 0.2
    triplet_margin: float = 1.0
    optimizer: str = "adam"
    freeze_encoder: bool = False
    trials: int = 10
    seed: int = 0
    train_subjects: tuple[str, ...] | None = None
    train_count: int | None = None
    normalize: bool = False
    alpha: float = 0.05
    parallel_trials: int = 1

    def effective_batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 256 if self.preset == "apnea" else 32

    def effective_person_epochs(self) -> int:
        return self.person_epochs if self.person_epochs is not None else 3 * self.epochs

    def validate(self) -> None:
        if not self.data:
            raise ValueError("a dataset path is required (--data)")
        if not self.outdir:
            raise ValueError("an output directory is required (--outdir)")
        if not self.variants:
            raise ValueError("at least one variant is required")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(
                    f"unknown variant {v!r}; valid: {', '.join(DEFAULT_VARIANTS)}"
                )
        if len(set(self.variants)) != len(self.variants):
            raise ValueError(f"duplicate variants in {self.variants}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; valid: {', '.join(PRESETS)}")
        if self.alpha not in ALPHAS:
            raise ValueError(f"alpha must be one of {ALPHAS}, got {self.alpha}")
        if self.parallel_trials < 1:
            raise ValueError(f"--parallel-trials must be >= 1, got {self.parallel_trials}")
        if self.person_epochs is not None and self.person_epochs < 1:
            raise ValueError(f"--person-epochs must be >= 1, got {self.person_epochs}")
        if self.latent_dim < 1:
            raise ValueError(f"--latent-dim must be >= 1, got {self.latent_dim}")
        if self.train_subjects is not None and self.train_count is not None:
            raise ValueError("--train-subjects and --train-count are mutually exclusive")
        if self.train_count is not None and self.train_count < 1:
            raise ValueError(f"--train-count must be >= 1, got {self.train_count}")
        # Delegate the numeric training knobs to TrainingConfig's own checks.
        self.training_config()

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            batch_size=self.effective_batch(),
            learning_rate=self.learning_rate,
            lambda_mmd=self.lambda_mmd,
            lambda_triplet=self.lambda_triplet,
            trials=self.trials,
            seed=self.seed,
            triplet_margin=self.triplet_margin,
            optimizer=self.optimizer,
            freeze_encoder=self.freeze_encoder,
        )

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


_LIST_FIELDS = ("variants", "train_subjects")


def resolve_run_config(config_path: str | None, flag_values: dict) -> RunConfig:
    """Defaults <- config file <- flags, with strict key checking."""
    merged: dict = {}
    if config_path:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError(f"config file {config_path} must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; valid: {sorted(known)}")
        merged.update(raw)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    for key in _LIST_FIELDS:
        value = merged.get(key)
        if isinstance(value, str):
            merged[key] = tuple(part.strip() for part in value.split(",") if part.strip())
        elif isinstance(value, list):
            merged[key] = tuple(value)
    config = RunConfig(**merged)
    config.validate()
    return config


# -- run command ----------------------------------------------------------------


def _resolve_train_ids(config: RunConfig, subject_ids: list[str]) -> list[str]:
    if config.train_subjects is not None:
        missing = sorted(set(config.train_subjects) - set(subject_ids))
        if missing:
            raise ValueError(
                f"train subjects {missing} not present in {config.data}; "
                f"available: {subject_ids}"
            )
        return [s for s in subject_ids if s in set(config.train_subjects)]
    if config.train_count is not None:
        count = config.train_count
    else:
        count = -(-2 * len(subject_ids) // 3)  # ceil(2n/3)
    if count >= len(subject_ids):
        raise ValueError(
            f"train split of {count} subjects leaves no test subjects "
            f"(dataset has {len(subject_ids)})"
        )
    return subject_ids[:count]


def _make_spec(config: RunConfig, input_length: int, n_subjects: int):
    if config.preset == "auto":
        return auto_spec(input_length, latent_dim=config.latent_dim, n_subjects=n_subjects)
    spec = preset_spec(config.preset, n_subjects=n_subjects, latent_dim=config.latent_dim)
    if spec.input_length != input_length:
        raise ValueError(
            f"preset {config.preset!r} expects windows of length {spec.input_length}, "
            f"dataset has length {input_length}"
        )
    return spec


def _comparison(aggregates: dict, alpha: float):
    """ANOVA over all variants plus Tukey pairs involving the baseline."""
    names = list(aggregates)
    notes = []
    if len(names) < 2:
        return None, None, ["statistical comparison needs at least 2 variants"]
    groups = [[r.accuracy for r in aggregates[n].trials] for n in names]
    if min(len(g) for g in groups) < 2:
        return None, None, ["statistical comparison needs at least 2 trials per variant"]
    anova = anova_oneway(groups)
    if "baseline" not in names:
        return anova, None, ["Tukey comparison skipped: no baseline variant requested"]
    try:
        tukey = tukey_hsd(groups, alpha=alpha, labels=names)
    except UnsupportedRangeError as exc:
        return anova, None, [f"Tukey comparison unavailable: {exc}"]
    pairs = [p for p in tukey.pairwise if "baseline" in (p.group_a, p.group_b)]
    return anova, (tukey, pairs), notes


def _format_report(
    config: RunConfig,
    dataset_info: dict,
    aggregates: dict,
    anova,
    tukey_block,
    notes: list[str],
    figure_names: list[str],
    checkpoint_names: list[str],
) -> str:
    lines = ["participant-invariance protocol report", "=" * 39, ""]
    lines.append(
        f"data: {config.data}  ({dataset_info['samples']} samples, "
        f"{len(dataset_info['subjects'])} subjects, window {dataset_info['length']})"
    )
    train, test = dataset_info["train_subjects"], dataset_info["test_subjects"]
    lines.append(f"train subjects ({len(train)}): {' '.join(train)}")
    lines.append(f"test subjects ({len(test)}): {' '.join(test)}")
    lines.append(
        f"model: preset={config.preset} input={dataset_info['length']} "
        f"latent={config.latent_dim}"
    )
    lines.append(
        f"training: epochs={config.epochs} batch={config.effective_batch()} "
        f"lr={config.learning_rate} lambda_mmd={config.lambda_mmd} "
        f"lambda_triplet={config.lambda_triplet} optimizer={config.optimizer} "
        f"trials={config.trials} seed={config.seed}"
    )
    if "person-specific" in aggregates:
        lines.append(
            f"person-specific: epochs={config.effective_person_epochs()} "
            f"(per-subject 70/30 split over all subjects)"
        )
    lines.append("")
    width = max(len(n) for n in aggregates)
    lines.append(f"{'variant'.ljust(width)}  mean accuracy      sd")
    for name, agg in aggregates.items():
        lines.append(f"{name.ljust(width)}         {agg.mean_accuracy:.4f}  {agg.sd:.4f}")
    lines.append("")
    if anova is not None:
        lines.append(
            f"one-way ANOVA over variants: F={anova.f_statistic:.4f} "
            f"df=({anova.df_between}, {anova.df_within})"
        )
    if tukey_block is not None:
        tukey, pairs = tukey_block
        lines.append(
            f"Tukey HSD vs baseline at alpha={tukey.alpha} (q_crit={tukey.q_critical:.4f}):"
        )
        for p in pairs:
            other = p.group_b if p.group_a == "baseline" else p.group_a
            diff = p.mean_diff if p.group_a == "baseline" else -p.mean_diff
            verdict = "significant" if p.significant else "not significant"
            lines.append(
                f"  {other.ljust(width)}  diff={diff:+.4f}  q={p.q_statistic:.4f}  {verdict}"
            )
    for note in notes:
        lines.append(f"note: {note}")
    if figure_names:
        lines.append("")
        lines.append("figures: " + ", ".join(figure_names))
    if checkpoint_names:
        lines.append("checkpoints: " + ", ".join(checkpoint_names))
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    flag_values = {
        name: getattr(args, name)
        for name in (f.name for f in fields(RunConfig))
    }
    try:
        config = resolve_run_config(args.config, flag_values)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        args.parser.error(str(exc))

    try:
        dataset = load_dataset(config.data)
    except (OSError, DatasetFormatError) as exc:
        return _fail(f"cannot load dataset {config.data}: {exc}")
    if config.normalize:
        dataset = dataset.normalized()

    try:
        train_ids = _resolve_train_ids(config, dataset.subject_ids())
        train, test = split_by_subject(dataset, train_ids)
        spec = _make_spec(config, dataset.length, n_subjects=len(train_ids))
    except (ValueError, SpecValidationError) as exc:
        return _fail(str(exc))

    full = Dataset(list(train) + list(test))
    base = config.training_config()
    aggregates: dict = {}
    trial_models: dict = {}
    try:
        for name in config.variants:
            if name == "person-specific":
                person_cfg = replace(
                    base,
                    epochs=config.effective_person_epochs(),
                    pretrain_mode="none",
                    finetune_triplet=False,
                )
                aggregates[name] = person_specific_trials(full, spec, person_cfg)
            else:
                agg, models = run_trials(
                    train,
                    test,
                    spec,
                    config_for_variant(name, base),
                    n_workers=config.parallel_trials,
                )
                aggregates[name] = agg
                trial_models[name] = models[0]
    except (TrainingDivergedError, ValueError) as exc:
        return _fail(str(exc))

    anova, tukey_block, notes = _comparison(aggregates, config.alpha)

    outdir = Path(config.outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "checkpoints").mkdir(exist_ok=True)
        (outdir / "figures").mkdir(exist_ok=True)

        (outdir / "config.json").write_text(
            json.dumps(config.as_dict(), indent=2) + "\n", encoding="utf-8"
        )

        checkpoint_names = []
        for name, model in trial_models.items():
            rel = f"checkpoints/{name}.json"
            save_checkpoint(model, outdir / rel)
            checkpoint_names.append(rel)

        figure_names = [
            "figures/" + save_accuracy_bars(aggregates, outdir / "figures" / "accuracy.png").name,
            "figures/" + save_loss_curves(aggregates, outdir / "figures" / "loss-curves.png").name,
        ]
        for name, model in trial_models.items():
            try:
                rows, _ = latent_rows(model, full)
            except ValueError as exc:
                notes.append(f"latent figure skipped for {name}: {exc}")
                continue
            path = save_latent_scatter(
                rows, outdir / "figures" / f"latent-{name}.png", title=name
            )
            figure_names.append("figures/" + path.name)

        dataset_info = {
            "samples": len(full),
            "subjects": dataset.subject_ids(),
            "length": dataset.length,
            "train_subjects": train_ids,
            "test_subjects": [s for s in dataset.subject_ids() if s not in set(train_ids)],
        }
        report_text = _format_report(
            config, dataset_info, aggregates, anova, tukey_block, notes,
            figure_names, checkpoint_names,
        )
        (outdir / "report.txt").write_text(report_text, encoding="utf-8")

        # The structured report omits the plumbing fields that cannot affect
        # results (`outdir` — where the report itself lives — and
        # `parallel_trials` — pure scheduling), so reruns into another
        # directory or at a different worker count stay byte-identical.
        structured = {
            "dataset": {"path": config.data, **dataset_info},
            "config": {
                k: v
                for k, v in config.as_dict().items()
                if k not in ("outdir", "parallel_trials")
            },
            "variants": {
                name: {
                    "mean_accuracy": agg.mean_accuracy,
                    "sd": agg.sd,
                    "accuracies": [r.accuracy for r in agg.trials],
                    "seeds": [r.seed for r in agg.trials],
                }
                for name, agg in aggregates.items()
            },
            "anova": None
            if anova is None
            else {
                "f_statistic": anova.f_statistic,
                "df_between": anova.df_between,
                "df_within": anova.df_within,
            },
            "tukey": None
            if tukey_block is None
            else {
                "alpha": tukey_block[0].alpha,
                "q_critical": tukey_block[0].q_critical,
                "pairs": [
                    {
                        "a": p.group_a,
                        "b": p.group_b,
                        "mean_diff": p.mean_diff,
                        "q_statistic": p.q_statistic,
                        "significant": p.significant,
                    }
                    for p in tukey_block[1]
                ],
            },
            "notes": notes,
        }
        (outdir / "report.json").write_text(
            json.dumps(structured, indent=2) + "\n", encoding="utf-8"
        )

        with (outdir / "metrics.ndjson").open("w", encoding="utf-8") as handle:
            for name, agg in aggregates.items():
                for record in metrics_records(agg.trials):
                    handle.write(json.dumps({"variant": name, **record}) + "\n")
    except OSError as exc:
        return _fail(f"cannot write output directory {config.outdir}: {exc}")

    print(report_text, end="")
    return 0


# -- synth command ----------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        config = SynthConfig(
            n_subjects=args.subjects,
            samples_per_subject=args.per_subject,
            length=args.length,
            class_signal=(args.freq0, args.freq1),
            subject_shift_scale=args.shift,
            noise_sd=args.noise,
            positive_fraction=args.positive_fraction,
            seed=args.seed,
        )
    except ValueError as exc:
        args.parser.error(str(exc))
    dataset = synth_generate(config)
    try:
        save_dataset(dataset, args.out)
    except OSError as exc:
        return _fail(f"cannot write {args.out}: {exc}")
    labels = [s.label for s in dataset]
    print(
        f"wrote {args.out}: {len(dataset)} samples, {len(dataset.subject_ids())} subjects, "
        f"length {dataset.length}"
    )
    print(f"labels: {labels.count(0)} x 0, {labels.count(1)} x 1")
    return 0


# -- export-latents command ---------------------------------------------------------


def cmd_export_latents(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, ShapeMismatchError) as exc:
        return _fail(f"cannot load checkpoint {args.checkpoint}: {exc}")
    try:
        dataset = load_dataset(args.data)
    except (OSError, DatasetFormatError) as exc:
        return _fail(f"cannot load dataset {args.data}: {exc}")
    if args.normalize:
        dataset = dataset.normalized()
    if dataset.length != model.spec.input_length:
        return _fail(
            f"checkpoint {args.checkpoint} expects windows of length "
            f"{model.spec.input_length}, dataset {args.data} has length {dataset.length}"
        )

    stub = RunConfig(
        data=args.data,
        outdir=".",
        train_subjects=tuple(args.train_subjects.split(",")) if args.train_subjects else None,
        train_count=args.train_count,
    )
    try:
        train_ids = _resolve_train_ids(stub, dataset.subject_ids())
        train, test = split_by_subject(dataset, train_ids)
        merged = Dataset(list(train) + list(test))
        from .analysis import export_latents as _export

        rows, _ = _export(model, merged, args.out)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))

    latents = [r["latent"] for r in rows]
    score = subject_dispersion(latents, [r["subject_id"] for r in rows]).score
    print(f"wrote {args.out}: {len(rows)} rows, latent width {model.spec.latent_dim}")
    print(f"heterogeneity score: {score:.4f}")
    return 0


# -- parser ---------------------------------------------------------------------


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirl",
        description="Subject-invariant representation learning for labeled time-series windows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic multi-subject cohort CSV")
    synth.add_argument("--subjects", type=int, default=6, help="number of subjects (default: 6)")
    synth.add_argument(
        "--per-subject", type=int, default=40, help="samples per subject (default: 40)"
    )
    synth.add_argument("--length", type=int, default=64, help="window length (default: 64)")
    synth.add_argument(
        "--shift",
        type=float,
        default=2.0,
        help="subject shift scale; offsets spread over +-shift (default: 2.0)",
    )
    synth.add_argument("--noise", type=float, default=0.05, help="noise SD (default: 0.05)")
    synth.add_argument(
        "--freq0", type=float, default=2.0, help="class-0 frequency, cycles/window (default: 2)"
    )
    synth.add_argument(
        "--freq1", type=float, default=4.0, help="class-1 frequency, cycles/window (default: 4)"
    )
    synth.add_argument(
        "--positive-fraction",
        type=float,
        default=0.5,
        help="fraction of class-1 samples (default: 0.5)",
    )
    synth.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    synth.add_argument("--out", required=True, help="output CSV path")
    synth.set_defaults(handler=cmd_synth, parser=synth)

    run = sub.add_parser(
        "run", help="train and compare model variants, writing a report directory"
    )
    run.add_argument("--config", default=None, help="JSON config file; flags override it")
    run.add_argument("--data", default=None, help="dataset CSV path (required)")
    run.add_argument("--outdir", default=None, help="report directory (required)")
    run.add_argument(
        "--variants",
        default=None,
        help="comma list from baseline,dann,mmd,triplet,mmd+triplet,person-specific "
        "(default: all)",
    )
    run.add_argument(
        "--preset", default=None, help="model preset: auto, clas or apnea (default: auto)"
    )
    run.add_argument("--latent-dim", type=int, default=None, help="latent width (default: 8)")
    run.add_argument("--epochs", type=int, default=None, help="epochs per phase (default: 100)")
    run.add_argument(
        "--person-epochs",
        type=int,
        default=None,
        help="epochs for person-specific fine-tuning (default: 3x epochs)",
    )
    run.add_argument(
        "--batch-size",
        type=int,
        default=None,
        help="minibatch size (default: 32; 256 for the apnea preset)",
    )
    run.add_argument(
        "--learning-rate", type=float, default=None, help="optimizer step size (default: 0.001)"
    )
    run.add_argument(
        "--lambda-mmd", type=float, default=None, help="MMD penalty weight (default: 0.2)"
    )
    run.add_argument(
        "--lambda-triplet", type=float, default=None, help="triplet weight (default: 0.2)"
    )
    run.add_argument(
        "--triplet-margin", type=float, default=None, help="triplet margin (default: 1.0)"
    )
    run.add_argument("--optimizer", default=None, help="adam or sgd (default: adam)")
    run.add_argument(
        "--freeze-encoder",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="freeze encoder weights during fine-tuning (default: off)",
    )
    run.add_argument("--trials", type=int, default=None, help="repeat count (default: 10)")
    run.add_argument("--seed", type=int, default=None, help="base seed (default: 0)")
    run.add_argument(
        "--train-subjects",
        default=None,
        help="comma list of training subject ids (default: first ceil(2n/3) sorted)",
    )
    run.add_argument(
        "--train-count",
        type=int,
        default=None,
        help="number of leading sorted subjects to train on (default: ceil(2n/3))",
    )
    run.add_argument(
        "--normalize",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="min-max normalize each window before training (default: off)",
    )
    run.add_argument(
        "--alpha", type=float, default=None, help="Tukey significance level: 0.05 or 0.01"
    )
    run.add_argument(
        "--parallel-trials",
        type=int,
        default=None,
        help="worker threads for independent trials (default: 1)",
    )
    run.set_defaults(handler=cmd_run, parser=run)

    export = sub.add_parser(
        "export-latents", help="dump per-sample latents plus a 2-D projection to CSV"
    )
    export.add_argument("--checkpoint", required=True, help="model checkpoint JSON")
    export.add_argument("--data", required=True, help="dataset CSV path")
    export.add_argument("--out", required=True, help="output CSV path")
    export.add_argument(
        "--normalize",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="min-max normalize each window before encoding (default: off)",
    )
    export.add_argument(
        "--train-subjects",
        default=None,
        help="comma list of subjects whose rows fit the projection "
        "(default: first ceil(2n/3) sorted)",
    )
    export.add_argument(
        "--train-count",
        type=int,
        default=None,
        help="number of leading sorted subjects to fit the projection on",
    )
    export.set_defaults(handler=cmd_export_latents, parser=export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit as exc:  # argparse --help (0) and usage errors (2)
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
