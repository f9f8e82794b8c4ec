"""Experiment runner: binds config files to trainers, evaluators, and
report/figure emission.

Subcommands: train | evaluate | margins | theory-check. Every output path
lands under the --out directory; a completed run leaves a marker and a
rerun against the same directory refuses rather than silently overwriting.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import nn, report, theory
from .config import ExperimentConfig, ModelEntry, parse_config
from .data import Dataset
from .errors import ConfigError
from .evaluation import combined_eval
from .losses import LossKind
from .margin import measure_margins
from .rng import derive_seed
from .training import TrainResult, train


def _marker(out_dir: Path, command: str) -> Path:
    return out_dir / f".completed-{command}"


def _claim_run(out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if _marker(out_dir, command).exists():
        raise RuntimeError(
            f"{out_dir} already holds a completed '{command}' run; "
            "pick a fresh --out directory"
        )


def _model_dir(out_dir: Path, name: str) -> Path:
    d = out_dir / "models" / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _train_one(entry: ModelEntry, ds: Dataset, out_dir: Path) -> TrainResult:
    result = train(ds, entry.train)
    mdir = _model_dir(out_dir, entry.name)
    nn.save_model(result.model, mdir / "checkpoint.bin")
    report.write_metrics_csv(mdir / "metrics.csv", result.metrics)
    if result.store is not None:
        report.write_epsilon_store_csv(mdir / "epsilon_store.csv", result.store.values)
    if result.store_history:
        report.write_margin_trace_csv(mdir / "margin_trace.csv", result.store_history)
        report.plot_margin_hist(mdir / "margin_trace.png", result.store_history,
                                d_max=entry.train.d_max)
    return result


def _ensure_models(cfg: ExperimentConfig, ds: Dataset, out_dir: Path) -> list[nn.DenseModel]:
    models = []
    for entry in cfg.models:
        ckpt = out_dir / "models" / entry.name / "checkpoint.bin"
        if ckpt.exists():
            models.append(nn.load_model(ckpt))
        else:
            models.append(_train_one(entry, ds, out_dir).model)
    return models


def run_training(cfg: ExperimentConfig, out_dir: Path) -> int:
    _claim_run(out_dir, "train")
    ds = cfg.dataset.load(derive_seed(cfg.seed, "dataset"), cfg.data_dir)
    for entry in cfg.models:
        _train_one(entry, ds, out_dir)
    _marker(out_dir, "train").touch()
    return 0


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Train (or load) the zoo, run the combined protocol, emit reports."""
    _claim_run(out_dir, "evaluate")
    ds = cfg.dataset.load(derive_seed(cfg.seed, "dataset"), cfg.data_dir)
    models = _ensure_models(cfg, ds, out_dir)
    norm = cfg.models[0].train.norm
    transcript: list[dict] = []
    reports = combined_eval(
        models, ds, list(cfg.evaluation.eps_grid), cfg.evaluation.suite,
        cfg.seed, norm=norm, names=[e.name for e in cfg.models],
        jobs=cfg.jobs, transcript=transcript,
    )
    report.write_eval_csv(out_dir / "eval_report.csv", reports)
    report.write_eval_json(out_dir / "eval_report.json", reports)
    report.plot_eval(out_dir / "robust_accuracy.png", reports)
    report.write_transcript_csv(out_dir / "attack_transcript.csv", transcript)
    _marker(out_dir, "evaluate").touch()
    return 0


def run_margins(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Measure margins of every model over the dataset; CSV plus figure."""
    _claim_run(out_dir, "margins")
    ds = cfg.dataset.load(derive_seed(cfg.seed, "dataset"), cfg.data_dir)
    eps_max = max(cfg.evaluation.eps_grid) * 2.0
    for entry, model in zip(cfg.models, _ensure_models(cfg, ds, out_dir)):
        if entry.train.d_max is not None:
            eps_max = max(eps_max, 1.05 * entry.train.d_max)
        values, successful = measure_margins(
            model, ds.inputs, ds.labels, eps_max / 4.0, eps_max,
            entry.train.attack, norm=entry.train.norm, box=ds.box,
            bisect_loss=LossKind.LM, seed=derive_seed(cfg.seed, "margins", entry.name),
        )
        mdir = _model_dir(out_dir, entry.name)
        report.write_margin_trace_csv(mdir / "margins.csv", [values], [successful])
        report.plot_margin_hist(mdir / "margins.png", [values], d_max=entry.train.d_max)
    _marker(out_dir, "margins").touch()
    return 0


def run_theory_check(cfg: ExperimentConfig | None, seed: int,
                     out_dir: Path | None = None) -> int:
    spec = cfg.theory if cfg is not None else None
    results = theory.run_all(
        instances=spec.instances if spec else 20,
        grid_n=spec.grid_n if spec else 256,
        logit_samples=spec.logit_samples if spec else 1000,
        seed=seed,
    )
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [r.line() for r in results]
        (out_dir / "theory_report.txt").write_text("\n".join(lines) + "\n")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxmargin",
        description="Margin-maximizing adversarial training and robustness evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("train", "train every configured model"),
        ("evaluate", "train or load the zoo and run the combined attack protocol"),
        ("margins", "measure per-example margins for every model"),
        ("theory-check", "run the numbered verification checks"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=Path, required=(name != "theory-check"),
                       help="YAML experiment config")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=None, help="parallel attack workers")
        p.add_argument("--data-dir", type=Path, default=None,
                       help="directory against which dataset file paths resolve")
    return parser


def _load(args) -> ExperimentConfig | None:
    if args.config is None:
        return None
    text = Path(args.config).read_text(encoding="utf-8")
    if args.seed is not None:
        raw = yaml.safe_load(text) or {}
        raw["seed"] = args.seed  # every derived seed follows the override
        text = yaml.safe_dump(raw)
    return parse_config(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.jobs is not None and cfg is not None:
            object.__setattr__(cfg, "jobs", args.jobs)
        if args.data_dir is not None and cfg is not None:
            object.__setattr__(cfg, "data_dir", str(args.data_dir))
        if args.command == "theory-check":
            seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
            return run_theory_check(cfg, seed, args.out)
        assert cfg is not None
        out_dir = args.out or (Path(cfg.output_dir) if cfg.output_dir else None)
        if out_dir is None:
            print("error: an output directory is required (--out or output_dir)",
                  file=sys.stderr)
            return 2
        out_dir = Path(out_dir)
        if args.command == "train":
            return run_training(cfg, out_dir)
        if args.command == "evaluate":
            return run_experiment(cfg, out_dir)
        if args.command == "margins":
            return run_margins(cfg, out_dir)
        raise AssertionError(args.command)
    except (ConfigError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
