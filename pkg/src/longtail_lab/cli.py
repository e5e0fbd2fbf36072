"""Command-line front end: gen-data, train, eval, compare, trace.

Outputs are laid out under ``--out`` (default ``runs``)::

    <out>/data/{train.csv,test.csv,dataset.json}          gen-data
    <out>/runs/<run>/seed_<n>/{checkpoint.json,trace.csv,
                               metrics.json,metrics.md}    train
    <out>/compare.{md,json}                               compare
    <out>/runs/<run>/seed_<n>/{trace.svg,prob_curves.*}    trace

Every file records the hash of the configuration that produced it.

Exit codes: 0 success, 2 config error, 3 divergence, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import InvalidSpecError, LongTailSpec, partition_by_count
from .losses import CLI_NAMES, LossSpec, ldam_adjust, quantity_factor
from .metrics import GROUPS, MetricsReport, markdown_table, report
from .model import DegenerateNormError, init_classifier, load_checkpoint, save_checkpoint
from .train import ConfigError, DivergenceError, TraceLog, TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MISSING = 0, 2, 3, 4
THREADS_ENV = "LONGTAIL_LAB_THREADS"


class MissingArtifactError(FileNotFoundError):
    pass


def default_config() -> dict:
    """The reference desk-scale experiment (also shipped as configs/reference.json)."""
    return {
        "dataset": {
            "num_classes": 20,
            "n_max": 500,
            "n_min": 5,
            "feature_dim": 16,
            "intra_class_sigma": 0.18,
            "confuser_pairs": [[0, 1, 0.2], [2, 3, 0.2]],
            "test_per_class": 50,
            "seed": 0,
        },
        "model": {"hidden_dim": None},
        "train": {
            "epochs": 10,
            "batch_size": 64,
            "lr": 0.01,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "loss": {"kind": "ALA", "scale_s": 30.0},
            "seed": 0,
            "lr_decay_epochs": [],
            "lr_decay_factor": 0.1,
            "many_threshold": 100,
            "few_threshold": 20,
        },
        "losses": [{"kind": k} for k in ("CE", "LDAM", "DF_ONLY", "QF_ONLY", "DF_TIMES_LDAM", "ALA")],
        "repeats": 5,
        "output_dir": "runs",
    }


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    dataset: LongTailSpec | Path
    train: TrainConfig
    losses_to_compare: list[LossSpec] = field(default_factory=list)
    output_dir: Path = Path("runs")
    repeats: int = 1
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            ds = d["dataset"]
            dataset = Path(ds) if isinstance(ds, str) else LongTailSpec.from_dict(ds)
            train_cfg = TrainConfig.from_dict(d.get("train", {}))
            base_loss = train_cfg.loss.to_dict()
            losses = [LossSpec.from_dict({**base_loss, **entry}) for entry in d.get("losses", [])]
            return cls(
                dataset=dataset,
                train=train_cfg,
                losses_to_compare=losses,
                output_dir=Path(d.get("output_dir", "runs")),
                repeats=int(d.get("repeats", 1)),
                hidden_dim=(d.get("model") or {}).get("hidden_dim"),
            )
        except KeyError as e:
            raise ConfigError(f"missing config key {e}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    def dataset_dict(self):
        return str(self.dataset) if isinstance(self.dataset, Path) else self.dataset.to_dict()


# ---------------------------------------------------------------------------
# config loading with --set overrides

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(value)


def load_config(args) -> dict:
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from None
    else:
        cfg = default_config()
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.out is not None:
        cfg["output_dir"] = args.out
    if getattr(args, "repeats", None) is not None:
        cfg["repeats"] = args.repeats
    loss = cfg.setdefault("train", {}).setdefault("loss", {})
    if getattr(args, "loss", None):
        loss["kind"] = CLI_NAMES[args.loss].value
    if getattr(args, "scale", None) is not None:
        loss["scale_s"] = args.scale
        for entry in cfg.get("losses", []):
            entry["scale_s"] = args.scale
    return cfg


# ---------------------------------------------------------------------------
# shared helpers

def _load_data(exp: ExperimentConfig):
    if isinstance(exp.dataset, Path):
        if not (exp.dataset / data_mod.SIDECAR).exists():
            raise MissingArtifactError(f"dataset not found at {exp.dataset}")
        train_set, test_set, _ = data_mod.load_dataset(exp.dataset)
        return train_set, test_set
    return data_mod.generate(exp.dataset)


def run_id(loss: LossSpec) -> str:
    return f"{loss.name}-{config_hash(loss.to_dict())[:8]}"


def run_dir(exp: ExperimentConfig, loss: LossSpec, seed: int) -> Path:
    return exp.output_dir / "runs" / run_id(loss) / f"seed_{seed}"


def _run_record(exp: ExperimentConfig, loss: LossSpec, seed: int) -> dict:
    tc = TrainConfig.from_dict({**exp.train.to_dict(), "loss": loss.to_dict(), "seed": seed})
    return {
        "dataset": exp.dataset_dict(),
        "model": {"hidden_dim": exp.hidden_dim},
        "train": tc.to_dict(),
    }


def run_one(exp: ExperimentConfig, loss: LossSpec, seed: int, train_set, test_set) -> Path:
    """Train/evaluate one (loss, seed) pair and write its artifacts."""
    record = _run_record(exp, loss, seed)
    chash = config_hash(record)
    dhash = train_set.fingerprint()[:16] + test_set.fingerprint()[:16]
    tc = TrainConfig.from_dict(record["train"])
    part = partition_by_count(train_set.counts, tc.many_threshold, tc.few_threshold)
    model = init_classifier(train_set.feature_dim, train_set.num_classes, exp.hidden_dim, seed=seed)
    try:
        model, log = train(train_set, model, tc, part)
    except DivergenceError as e:
        e.args = (f"run {run_id(loss)}/seed_{seed}: {e}",)
        raise
    ev = evaluate(model, test_set, loss)
    rep = report(ev.predictions, ev.target_probability, test_set.labels, part)

    out = run_dir(exp, loss, seed)
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": chash, "seed": seed, "dataset_hash": dhash}
    save_checkpoint(out / "checkpoint.json", model, **stamp)
    (out / "trace.csv").write_text(
        log.to_csv(f"config_hash={chash} seed={seed} dataset_hash={dhash}"))
    (out / "metrics.json").write_text(
        rep.to_json(**stamp, run=run_id(loss), loss=loss.to_dict(), config=record,
                    partition=part.to_dict()))
    (out / "metrics.md").write_text(
        f"<!-- config_hash={chash} seed={seed} -->\n" + rep.to_markdown(loss.name))
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def run_repeats(exp: ExperimentConfig, loss: LossSpec, train_set, test_set) -> list[Path]:
    seeds = [exp.train.seed + r for r in range(exp.repeats)]
    workers = min(_threads(), len(seeds))
    if workers == 1:
        return [run_one(exp, loss, s, train_set, test_set) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_one, exp, loss, s, train_set, test_set) for s in seeds]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict, seed: int | None = None) -> Path:
    if seed is not None:
        cfg["dataset"]["seed"] = seed
    exp = ExperimentConfig.from_dict(cfg)
    if isinstance(exp.dataset, Path):
        raise ConfigError("gen-data needs a dataset spec, not a path")
    spec = exp.dataset
    train_set, test_set = data_mod.generate(spec)
    part = partition_by_count(train_set.counts, exp.train.many_threshold, exp.train.few_threshold)
    out = data_mod.save_dataset(exp.output_dir / "data", train_set, test_set, spec, part)
    sidecar = json.loads((out / data_mod.SIDECAR).read_text())
    sidecar["config_hash"] = config_hash(spec.to_dict())
    (out / data_mod.SIDECAR).write_text(json.dumps(sidecar, indent=2) + "\n")
    c = train_set.counts
    print(f"wrote {out}: C={spec.num_classes} counts {int(c.max())}..{int(c.min())} "
          f"train={len(train_set)} test={len(test_set)} "
          f"many/medium/few={len(part.many)}/{len(part.medium)}/{len(part.few)}")
    return out


def cmd_train(cfg: dict, seed: int | None = None) -> list[Path]:
    if seed is not None:
        cfg["train"]["seed"] = seed
    exp = ExperimentConfig.from_dict(cfg)
    train_set, test_set = _load_data(exp)
    paths = run_repeats(exp, exp.train.loss, train_set, test_set)
    for p in paths:
        m = json.loads((p / "metrics.json").read_text())
        acc = m["subset_accuracy"]
        print(f"{p}: " + " ".join(
            f"{g}={'n/a' if acc[g] is None else f'{100 * acc[g]:.1f}'}" for g in GROUPS))
    return paths


def cmd_eval(cfg: dict, checkpoint: str) -> MetricsReport:
    exp = ExperimentConfig.from_dict(cfg)
    if not Path(checkpoint).exists():
        raise MissingArtifactError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    train_set, test_set = _load_data(exp)
    part = partition_by_count(train_set.counts, exp.train.many_threshold, exp.train.few_threshold)
    ev = evaluate(model, test_set, exp.train.loss)
    rep = report(ev.predictions, ev.target_probability, test_set.labels, part)
    where = Path(checkpoint).resolve().parent
    sys.stdout.write(rep.to_markdown(f"{where.parent.name}/{where.name}"))
    return rep


def _aggregate(metric_files: list[Path]):
    per_group = {g: [] for g in GROUPS}
    for f in metric_files:
        acc = json.loads(f.read_text())["subset_accuracy"]
        for g in GROUPS:
            per_group[g].append(acc[g])
    mean, std = {}, {}
    for g, vals in per_group.items():
        if any(v is None for v in vals):
            mean[g] = std[g] = None
        else:
            mean[g] = float(np.mean(vals))
            std[g] = float(np.std(vals))  # population std: zero for a single repeat
    return mean, std


def _is_current(metrics_file: Path, exp: ExperimentConfig, loss: LossSpec, seed: int) -> bool:
    """True if the run exists and was produced by this exact configuration."""
    if not metrics_file.exists():
        return False
    recorded = json.loads(metrics_file.read_text()).get("config_hash")
    return recorded == config_hash(_run_record(exp, loss, seed))


def cmd_compare(cfg: dict, seed: int | None = None, run_missing: bool = True) -> dict:
    if seed is not None:
        cfg["train"]["seed"] = seed
    exp = ExperimentConfig.from_dict(cfg)
    if not exp.losses_to_compare:
        raise ConfigError("compare needs a non-empty 'losses' list")
    seeds = [exp.train.seed + r for r in range(exp.repeats)]
    data_cache = None
    rows = []
    for loss in exp.losses_to_compare:
        files = [run_dir(exp, loss, s) / "metrics.json" for s in seeds]
        missing = [f for f, s in zip(files, seeds) if not _is_current(f, exp, loss, s)]
        if missing:
            if not run_missing:
                ids = ", ".join(f"{run_id(loss)}/{f.parent.name}" for f in missing)
                raise MissingArtifactError(f"missing or stale runs: {ids}")
            if data_cache is None:
                data_cache = _load_data(exp)
            for f in missing:
                run_one(exp, loss, int(f.parent.name.split("_")[1]), *data_cache)
        mean, std = _aggregate(files)
        rows.append({"run": run_id(loss), "loss": loss.to_dict(), "name": loss.name,
                     "seeds": seeds, "mean": mean, "std": std})

    chash = config_hash({"dataset": exp.dataset_dict(), "train": exp.train.to_dict(),
                         "model": {"hidden_dim": exp.hidden_dim},
                         "losses": [l.to_dict() for l in exp.losses_to_compare],
                         "seeds": seeds})
    table = {"config_hash": chash, "seeds": seeds, "rows": rows}
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    (exp.output_dir / "compare.json").write_text(json.dumps(table, indent=2) + "\n")
    md = markdown_table([(r["name"], r["mean"]) for r in rows], std=[r["std"] for r in rows])
    (exp.output_dir / "compare.md").write_text(
        f"<!-- config_hash={chash} seeds={seeds} -->\n" + md)
    sys.stdout.write(md)
    return table


def _line_svg(path: Path, series: dict[str, list[float]], xlabel: str, ylabel: str, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "longtail-lab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, ys in series.items():
            if ys:
                ax.plot(range(len(ys)), ys, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def export_run_traces(run: Path, svg: bool = True) -> list[Path]:
    trace_file, metrics_file = run / "trace.csv", run / "metrics.json"
    for f in (trace_file, metrics_file):
        if not f.exists():
            raise MissingArtifactError(f"missing artifact {f}")
    log = TraceLog.from_csv(trace_file.read_text())
    metrics = json.loads(metrics_file.read_text())
    curves = metrics["probability_curve"]
    written = []

    lines = ["subset,rank,probability"]
    for g in GROUPS:
        lines += [f"{g},{i},{p!r}" for i, p in enumerate(curves[g])]
    (run / "prob_curves.csv").write_text(
        f"# config_hash={metrics['config_hash']} seed={metrics['seed']}\n" + "\n".join(lines) + "\n")
    written.append(run / "prob_curves.csv")
    if svg:
        _line_svg(run / "trace.svg",
                  {g: log.adj[g] for g in ("many", "medium", "few")},
                  "epoch", "mean adjusting term", metrics["run"])
        _line_svg(run / "prob_curves.svg",
                  {g: curves[g] for g in ("many", "medium", "few")},
                  "sample (sorted)", "target probability", metrics["run"])
        written += [run / "trace.svg", run / "prob_curves.svg"]
    return written


def export_adjusting_curves(path: Path, counts, max_margin: float) -> Path:
    """QF next to the quarter-power margin calibrated to agree at the head class."""
    counts = np.asarray(counts)
    qf = quantity_factor(counts)
    ldam = ldam_adjust(counts, max_margin)
    head = int(np.argmax(counts))
    ldam_matched = ldam * (qf[head] / ldam[head])
    lines = ["class,count,qf,ldam,ldam_head_matched"]
    for j, c in enumerate(counts):
        lines.append(f"{j},{int(c)},{qf[j]!r},{ldam[j]!r},{ldam_matched[j]!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_trace(cfg: dict, run: str | None = None, svg: bool = True) -> list[Path]:
    exp = ExperimentConfig.from_dict(cfg)
    if run is not None:
        runs = [Path(run)]
    else:
        runs = sorted(p.parent for p in (exp.output_dir / "runs").glob("*/seed_*/trace.csv"))
        if not runs:
            raise MissingArtifactError(f"no runs under {exp.output_dir / 'runs'}")
    written = []
    for r in runs:
        written += export_run_traces(r, svg)
    train_set, _ = _load_data(exp)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    written.append(export_adjusting_curves(exp.output_dir / "adjusting_curves.csv",
                                           train_set.counts, exp.train.loss.ldam_max_margin))
    for p in written:
        print(p)
    return written


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longtail-lab", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: built-in reference)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, dotted keys, JSON values")
    common.add_argument("--seed", type=int, help="dataset seed for gen-data, base training seed otherwise")
    common.add_argument("--loss", choices=sorted(CLI_NAMES))
    common.add_argument("--scale", type=float, help="scale factor s")
    common.add_argument("--repeats", type=int)
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one loss for each repeat")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("compare", parents=[common], help="ablation table over the configured losses")
    p.add_argument("--no-run", action="store_true", help="fail instead of running missing runs")
    p = sub.add_parser("trace", parents=[common], help="export trace / probability curves")
    p.add_argument("--run", help="a single run directory (default: every run under --out)")
    p.add_argument("--no-svg", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.seed)
        elif args.command == "train":
            cmd_train(cfg, args.seed)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "compare":
            cmd_compare(cfg, args.seed, run_missing=not args.no_run)
        elif args.command == "trace":
            cmd_trace(cfg, args.run, svg=not args.no_svg)
    except (DivergenceError, DegenerateNormError) as e:
        print(f"error: divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, InvalidSpecError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
