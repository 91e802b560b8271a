"""Command-line pipeline: train, metrics, fuse, condense, lab, report.

Exit codes: 0 success, 2 validation failure, 3 numeric divergence, 4 I/O.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .charts import write_line_chart
from .fusion import (
    FusionPlan,
    accuracy_of,
    best_epoch,
    epoch_accuracies,
    fit_plan,
    fixed_jumps_ensemble,
    fuse,
    fused_checkpoint_count,
    horizontal_ensemble,
)
from .linearlab import (
    forget_analysis,
    gd_trajectory,
    max_relative_deviation,
    random_problem,
    write_forget_csv,
    write_trajectory_csv,
)
from .metrics import forget_report, noise_loss_counts, write_curves_csv, write_forget_times_csv
from .models import load_weights, save_weights
from .predlog import FormatError, LogValidationError, read_log, write_log
from .trainer import (
    DivergenceError,
    ExperimentConfig,
    average_weights,
    distill,
    make_gaussian_mixture,
    predict_probs,
    run,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


@dataclass(frozen=True)
class Manifest:
    """Index of one training run's artifacts; paths are relative to the manifest file."""

    base: Path
    run_id: str
    tool_version: str
    config_hash: str
    config_path: Path
    logs: dict[str, Path]
    weights: tuple[Path, ...]
    plans: tuple[Path, ...]
    reports: tuple[Path, ...]

    def save(self, path: str | Path) -> None:
        base = Path(path).parent

        def rel(p: Path) -> str:
            return os.path.relpath(p, base)

        doc = {
            "run_id": self.run_id,
            "tool_version": self.tool_version,
            "config_hash": self.config_hash,
            "config": rel(self.config_path),
            "logs": {split: rel(p) for split, p in self.logs.items()},
            "weights": [rel(p) for p in self.weights],
            "plans": [rel(p) for p in self.plans],
            "reports": [rel(p) for p in self.reports],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path, check: bool = True) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent
        manifest = cls(
            base=base,
            run_id=doc["run_id"],
            tool_version=doc["tool_version"],
            config_hash=doc["config_hash"],
            config_path=base / doc["config"],
            logs={split: base / p for split, p in doc["logs"].items()},
            weights=tuple(base / p for p in doc["weights"]),
            plans=tuple(base / p for p in doc.get("plans", [])),
            reports=tuple(base / p for p in doc.get("reports", [])),
        )
        if check:
            manifest.validate()
        return manifest

    def validate(self) -> None:
        """Every referenced artifact must exist and parse."""
        ExperimentConfig.from_file(self.config_path)
        for log_path in self.logs.values():
            read_log(log_path)
        for weight_path in self.weights:
            load_weights(weight_path)
        for plan_path in self.plans:
            FusionPlan.load(plan_path)
        for report_path in self.reports:
            if not report_path.exists():
                raise FileNotFoundError(f"report file missing: {report_path}")


def _config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canon.encode()).hexdigest()


def _train_one(cfg_doc: dict, out_dir: str) -> dict:
    """Worker for one seeded run; module-level so process pools can pickle it."""
    cfg = ExperimentConfig.from_dict(cfg_doc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = run(cfg)
    config_path = out / "config.json"
    cfg.save(config_path)
    logs = {}
    for split, log in (("train", artifacts.train_log),
                       ("validation", artifacts.val_log),
                       ("test", artifacts.test_log)):
        log_path = out / f"{split}.kfpl"
        write_log(log, log_path)
        logs[split] = log_path
    weights_dir = out / "weights"
    weights_dir.mkdir(exist_ok=True)
    weight_paths = []
    for epoch, w in enumerate(artifacts.snapshots):
        wp = weights_dir / f"epoch_{epoch:03d}.weights"
        save_weights(w, wp)
        weight_paths.append(wp)
    manifest = Manifest(
        base=out,
        run_id=f"run-seed{cfg.seed}",
        tool_version=__version__,
        config_hash=_config_hash(cfg),
        config_path=config_path,
        logs=logs,
        weights=tuple(weight_paths),
        plans=(),
        reports=(),
    )
    manifest.save(out / "manifest.json")
    val_acc = epoch_accuracies(artifacts.val_log)
    return {
        "seed": cfg.seed,
        "manifest": str(out / "manifest.json"),
        "final_val_acc": float(val_acc[-1]),
        "best_val_acc": float(val_acc.max()),
        "best_val_epoch": int(val_acc.argmax()),
    }


def cmd_train(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = [args.seed if args.seed is not None else cfg.seed]
    out = Path(args.out)
    jobs = [(replace(cfg, seed=seed).to_dict(),
             str(out if len(seeds) == 1 else out / f"run-seed{seed}"))
            for seed in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(doc, path) for doc, path in jobs]
    for res in results:
        print(f"seed {res['seed']}: final val acc {res['final_val_acc']:.4f}, "
              f"best val acc {res['best_val_acc']:.4f} at epoch {res['best_val_epoch']}; "
              f"manifest {res['manifest']}")
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    log = read_log(args.log)
    report = forget_report(log, args.reference_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(report, out / "curves.csv")
    write_forget_times_csv(report, out / "forget_times.csv")
    if log.noise_mask is not None:
        noise = noise_loss_counts(log)
        with open(out / "noise_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "clean_high_loss", "noisy_high_loss", "diff"])
            for e in range(log.epochs):
                writer.writerow([e, noise.clean_counts[e], noise.noisy_counts[e],
                                 noise.diff[e]])
    acc = report.acc_curve
    print(f"epochs {log.epochs}, examples {log.examples}, classes {log.classes}, "
          f"split {log.split_tag}")
    print(f"reference epoch {report.reference_epoch}: accuracy {acc[report.reference_epoch]:.4f}")
    print(f"best accuracy {acc.max():.4f} at epoch {int(acc.argmax())}")
    print(f"peak forget fraction {report.f_curve.max():.4f} "
          f"at epoch {report.argmax_forget_epoch}")
    print(f"wrote {out / 'curves.csv'}")
    return EXIT_OK


def cmd_fuse_fit(args: argparse.Namespace) -> int:
    val_log = read_log(args.val_log)
    plan = fit_plan(val_log, window=args.window, eps_grid_step=args.eps_step,
                    max_rounds=args.max_rounds)
    plan.save(args.out)
    fused_acc = accuracy_of(fuse(plan, val_log).probs, val_log.labels)
    ref_acc = float(epoch_accuracies(val_log)[plan.reference_epoch])
    pairs = ", ".join(f"(epoch {a}, eps {e:.2f})"
                      for a, e in zip(plan.alternative_epochs, plan.epsilons)) or "none"
    print(f"reference epoch {plan.reference_epoch} (val acc {ref_acc:.4f})")
    print(f"selected: {pairs}")
    print(f"fused val acc {fused_acc:.4f} "
          f"({fused_checkpoint_count(plan, val_log.epochs)} checkpoints)")
    print(f"wrote {args.out}")
    if args.register:
        manifest = Manifest.load(args.register, check=False)
        manifest = replace(manifest, plans=manifest.plans + (Path(args.out).resolve(),))
        manifest.save(args.register)
    return EXIT_OK


def cmd_fuse_apply(args: argparse.Namespace) -> int:
    plan = FusionPlan.load(args.plan)
    log = read_log(args.log)
    fused = fuse(plan, log)
    ref_epoch = min(max(plan.reference_epoch, 0), log.epochs - 1)
    ref_acc = accuracy_of(log.probs[ref_epoch].astype(np.float64), log.labels)
    fused_acc = accuracy_of(fused.probs, log.labels)
    print(f"reference accuracy: {ref_acc:.4f}")
    print(f"fused accuracy: {fused_acc:.4f}")
    print(f"difference: {fused_acc - ref_acc:+.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example", "class", "prob"])
            for i in range(fused.probs.shape[0]):
                for c in range(fused.probs.shape[1]):
                    writer.writerow([i, c, repr(float(fused.probs[i, c]))])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_fuse_baseline(args: argparse.Namespace) -> int:
    log = read_log(args.log)
    if args.kind == "horizontal":
        fused = horizontal_ensemble(log, args.k)
    else:
        fused = fixed_jumps_ensemble(log, args.k)
    acc = accuracy_of(fused.probs, log.labels)
    print(f"{args.kind} ensemble of {args.k} checkpoints: accuracy {acc:.4f}")
    return EXIT_OK


def cmd_condense(args: argparse.Namespace) -> int:
    manifest = Manifest.load(args.manifest)
    cfg = ExperimentConfig.from_file(manifest.config_path)
    plan = FusionPlan.load(args.plan) if args.plan else None
    if args.mode == "average":
        if plan is None:
            raise ValueError("--mode average requires --plan")
        snapshots = [load_weights(p) for p in manifest.weights]
        student = average_weights(snapshots, plan)
    else:
        if plan is None and args.teacher_epoch is None:
            raise ValueError("--mode distill requires --plan or --teacher-epoch")
        train_log = read_log(manifest.logs["train"])
        if plan is not None:
            teacher = fuse(plan, train_log).probs
        else:
            if not 0 <= args.teacher_epoch < train_log.epochs:
                raise ValueError(
                    f"--teacher-epoch {args.teacher_epoch} out of range for "
                    f"{train_log.epochs} epochs")
            teacher = train_log.probs[args.teacher_epoch].astype(np.float64)
        # the run is deterministic in its seed, so the training inputs can be
        # regenerated instead of stored
        root = np.random.SeedSequence(cfg.seed)
        data_seq, _, _ = root.spawn(3)
        data_rng = np.random.default_rng(data_seq)
        train_x, _ = make_gaussian_mixture(cfg.dataset, data_rng, cfg.dataset.train_size)
        arch = cfg.model.architecture(cfg.dataset.dimension, cfg.dataset.classes)
        student = distill(
            train_x, train_log.labels.astype(np.int64), teacher, arch,
            epochs=args.epochs if args.epochs is not None else cfg.epochs,
            lr=args.lr if args.lr is not None else cfg.lr,
            batch_size=args.batch_size if args.batch_size is not None else cfg.batch_size,
            temperature=args.temperature, alpha=args.alpha,
            seed=args.seed if args.seed is not None else cfg.seed)
    save_weights(student, args.out)
    # evaluate on the regenerated test split
    root = np.random.SeedSequence(cfg.seed)
    data_seq, _, _ = root.spawn(3)
    data_rng = np.random.default_rng(data_seq)
    make_gaussian_mixture(cfg.dataset, data_rng, cfg.dataset.train_size)
    make_gaussian_mixture(cfg.dataset, data_rng, cfg.dataset.val_size)
    test_x, test_y = make_gaussian_mixture(cfg.dataset, data_rng, cfg.dataset.test_size)
    student_acc = accuracy_of(predict_probs(student, test_x), test_y)
    test_log = read_log(manifest.logs["test"])
    val_log = read_log(manifest.logs["validation"])
    stop = best_epoch(val_log)
    baseline_acc = float(epoch_accuracies(test_log)[stop])
    print(f"{args.mode} student test accuracy: {student_acc:.4f}")
    print(f"early-stopped baseline (epoch {stop}) test accuracy: {baseline_acc:.4f}")
    print(f"difference: {student_acc - baseline_acc:+.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_lab(args: argparse.Namespace) -> int:
    params = {"n": 200, "d": 12, "depth": 1, "lr": 1e-3, "steps": 200,
              "seed": 0, "flip_fraction": 0.1}
    if args.config:
        path = Path(args.config)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                params.update(tomllib.load(fh))
        else:
            params.update(json.loads(path.read_text()))
    for name in params:
        value = getattr(args, name, None)
        if value is not None:
            params[name] = value
    data, y = random_problem(params["n"], params["d"], params["seed"],
                             flip_fraction=params["flip_fraction"])
    lab_run = gd_trajectory(data, y, depth=params["depth"], lr=params["lr"],
                            steps=params["steps"], seed=params["seed"])
    predictions = forget_analysis(lab_run, lab_run.data, lab_run.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(lab_run, out / "trajectory.csv")
    write_forget_csv(predictions, out / "forget_times.csv")
    forgotten = sum(p.is_forgotten for p in predictions)
    print(f"depth {params['depth']}, {params['steps']} steps, lr {params['lr']}")
    print(f"max relative deviation from closed form: {max_relative_deviation(lab_run):.3e}")
    print(f"forgotten points: {forgotten} / {len(predictions)}")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'forget_times.csv'}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    manifest = Manifest.load(args.manifest)
    out = Path(args.out) if args.out else manifest.base / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for split, log_path in sorted(manifest.logs.items()):
        log = read_log(log_path)
        report = forget_report(log)
        csv_path = out / f"{split}_curves.csv"
        write_curves_csv(report, csv_path)
        svg_path = out / f"{split}_curves.svg"
        write_line_chart(
            svg_path, f"{split}: accuracy and forget/learn fractions",
            [("accuracy", report.acc_curve.tolist()),
             ("forget fraction", report.f_curve.tolist()),
             ("learn fraction", report.l_curve.tolist())],
            x_label="epoch")
        written.extend([csv_path, svg_path])
    manifest = replace(manifest, reports=tuple(written))
    manifest.save(manifest.base / "manifest.json")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfuse",
        description="Train desk-scale models, measure forgetting, fuse checkpoints, "
                    "condense the ensemble, and check the linear theory.")
    parser.add_argument("--version", action="version", version=f"kfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a config end to end, emit logs and weights")
    p_train.add_argument("config", help="TOML or JSON experiment config")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--seeds", default=None,
                         help="comma-separated seeds; each run lands in run-seed<N>/")
    p_train.add_argument("--jobs", type=int, default=1,
                         help="parallel workers across seeds")
    p_train.set_defaults(func=cmd_train)

    p_metrics = sub.add_parser("metrics", help="forgetting curves for one prediction log")
    p_metrics.add_argument("log", help="KFPL file")
    p_metrics.add_argument("--out", default=".", help="directory for CSV outputs")
    p_metrics.add_argument("--reference-epoch", type=int, default=None)
    p_metrics.set_defaults(func=cmd_metrics)

    p_fuse = sub.add_parser("fuse", help="fit or apply fusion plans, run baselines")
    fuse_sub = p_fuse.add_subparsers(dest="fuse_command", required=True)

    p_fit = fuse_sub.add_parser("fit", help="select checkpoints on a validation log")
    p_fit.add_argument("val_log", help="validation KFPL file")
    p_fit.add_argument("--out", required=True, help="plan JSON path")
    p_fit.add_argument("--window", type=int, default=1)
    p_fit.add_argument("--eps-step", type=float, default=0.01)
    p_fit.add_argument("--max-rounds", type=int, default=20)
    p_fit.add_argument("--register", default=None,
                       help="manifest to record the plan in")
    p_fit.set_defaults(func=cmd_fuse_fit)

    p_apply = fuse_sub.add_parser("apply", help="apply a plan to a log")
    p_apply.add_argument("plan", help="plan JSON")
    p_apply.add_argument("log", help="KFPL file")
    p_apply.add_argument("--out", default=None, help="optional fused-probability CSV")
    p_apply.set_defaults(func=cmd_fuse_apply)

    p_base = fuse_sub.add_parser("baseline", help="horizontal or fixed-jumps ensemble")
    p_base.add_argument("log", help="KFPL file")
    p_base.add_argument("--kind", choices=("horizontal", "jumps"), required=True)
    p_base.add_argument("--k", type=int, required=True, help="checkpoint count")
    p_base.set_defaults(func=cmd_fuse_baseline)

    p_cond = sub.add_parser("condense", help="collapse an ensemble into one model")
    p_cond.add_argument("manifest", help="manifest JSON from `train`")
    p_cond.add_argument("--mode", choices=("distill", "average"), required=True)
    p_cond.add_argument("--plan", default=None, help="fusion plan JSON")
    p_cond.add_argument("--teacher-epoch", type=int, default=None,
                        help="distill from a single epoch instead of a plan")
    p_cond.add_argument("--out", required=True, help="student weights path")
    p_cond.add_argument("--temperature", type=float, default=2.5)
    p_cond.add_argument("--alpha", type=float, default=0.9)
    p_cond.add_argument("--epochs", type=int, default=None)
    p_cond.add_argument("--lr", type=float, default=None)
    p_cond.add_argument("--batch-size", type=int, default=None)
    p_cond.add_argument("--seed", type=int, default=None)
    p_cond.set_defaults(func=cmd_condense)

    p_lab = sub.add_parser("lab", help="deep-linear GD vs closed form")
    p_lab.add_argument("--config", default=None, help="TOML or JSON parameter file")
    p_lab.add_argument("--out", required=True, help="output directory")
    p_lab.add_argument("--n", type=int, default=None)
    p_lab.add_argument("--d", type=int, default=None)
    p_lab.add_argument("--depth", type=int, default=None)
    p_lab.add_argument("--lr", type=float, default=None)
    p_lab.add_argument("--steps", type=int, default=None)
    p_lab.add_argument("--seed", type=int, default=None)
    p_lab.add_argument("--flip-fraction", dest="flip_fraction", type=float, default=None)
    p_lab.set_defaults(func=cmd_lab)

    p_report = sub.add_parser("report", help="CSV + SVG curve bundle for a run")
    p_report.add_argument("manifest", help="manifest JSON from `train`")
    p_report.add_argument("--out", default=None, help="output directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (LogValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
