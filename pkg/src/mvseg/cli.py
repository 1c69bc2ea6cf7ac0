"""``mvseg`` command line: gen, train, eval, sweep, stats and replay.

Each command resolves its settings from built-in defaults, then an
optional JSON config file (``"schema_version": 1``), then explicit flags.
Commands that write an artifact directory also write ``manifest.json``
there with the resolved settings and absolute input paths;
``mvseg replay <manifest>`` re-executes it and reproduces every other file
byte for byte on the same platform.

``MVSEG_THREADS`` caps the number of threads used for per-patient metric
computation (default 1).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import platform
import shutil
import subprocess
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .data import PhantomSpec, generate_cohort, load_dataset, save_dataset, split_patients
from .errors import ConfigError, DataError, FormatError, MVSegError
from .metrics import METRICS, MetricReport
from .model import ModelConfig, load_checkpoint, load_provenance, save_checkpoint
from .stats import mann_whitney_u, welch_t
from .trainer import VIEW_FLAGS, TrainConfig, evaluate, fit

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
CHECKPOINT = "model.tun"
SWEEP_COLUMNS = (
    "alpha", "temperature", "views", "seed", "status",
    "wg_dsc", "wg_rvd", "wg_hd95_mm", "wg_abd_mm", "selected_epoch", "note",
)
METRIC_ALIASES = {"dsc": "dsc", "rvd": "rvd", "hd95": "hd95_mm", "hd95_mm": "hd95_mm", "abd": "abd_mm", "abd_mm": "abd_mm"}

DEFAULT_SPLIT = {"train_fraction": 0.8, "seed": 0}
DEFAULT_EVAL = {"threshold": 0.5, "bootstrap_replicates": 100, "bootstrap_seed": 0}
DEFAULT_GRID = {
    "alpha": [0.0, 0.25, 0.5, 0.75, 1.0],
    "temperature": [0.05, 0.07, 0.1, 0.5],
    "views": [1, 2, 3],
    "seeds": [0],
}


# -- small helpers -------------------------------------------------------------

def threads() -> int:
    raw = os.environ.get("MVSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MVSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MVSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def read_config(path, allowed: set[str] | None = None) -> dict:
    """Load a JSON config file and check its schema version and keys."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path.name}: top level must be a JSON object")
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path.name}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if allowed is not None:
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"{path.name}: unknown field(s) {sorted(unknown)}")
    return doc


def _merge(base: dict, override: dict | None, section: str) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if k not in base:
            raise ConfigError(f"{section}: unknown field {k!r}")
        out[k] = v
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def prepare_out(out, force: bool, inputs=()) -> Path:
    """Create ``out``; an existing non-empty directory needs ``force`` and
    is then emptied, unless it holds one of the inputs."""
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite it")
        root = out.resolve()
        for item in inputs:
            p = Path(item).resolve()
            if p == root or root in p.parents:
                raise ConfigError(f"refusing to clear {out}: it contains the input {item}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _git_rev() -> str | None:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5, check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def version_stamp() -> dict:
    return {"mvseg": __version__, "git": _git_rev(), "python": platform.python_version(), "numpy": np.__version__}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seeds(command: str, cfg: dict) -> dict:
    if command == "gen":
        return {"cohort": cfg["seed"]}
    if command == "train":
        t = cfg["train"]
        return {"data": t["data_seed"], "init": t["init_seed"], "aug": t["aug_seed"], "split": cfg["split"]["seed"]}
    if command == "eval":
        return {"bootstrap": cfg["bootstrap_seed"]}
    if command == "sweep":
        return {"runs": list(cfg["seeds"]), "split": cfg["base"]["split"]["seed"]}
    return {}


def _svg(fig, path) -> Path:
    """Save without timestamps and with fixed element ids."""
    import matplotlib.pyplot as plt

    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mvseg"
    return plt


def _load_patients(dataset, ids=None):
    patients, meta = load_dataset(dataset, with_oracle=False)
    if ids is None:
        return patients, meta
    by_id = {p.patient_id: p for p in patients}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"dataset {dataset} lacks patients {missing}")
    return [by_id[i] for i in ids], meta


def _split(patients, split: dict) -> tuple[list[str], list[str]]:
    return split_patients([p.patient_id for p in patients], split["train_fraction"], split["seed"])


def _views_flag(cfg: TrainConfig) -> str:
    if cfg.views == 1:
        return "1"
    if cfg.views == 3:
        return "3"
    return "2s" if cfg.second_view == "sagittal" else "2a"


# -- command bodies --------------------------------------------------------------
# Each takes the resolved config, the input paths and the output directory
# and returns extra manifest fields.

def run_gen(cfg: dict, inputs: dict, out: Path) -> dict:
    spec = PhantomSpec.from_dict({**cfg["phantom"], "seed": cfg["seed"]})
    n = cfg["n_patients"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"n_patients must be a positive integer, got {n!r}")
    cohort = generate_cohort(spec, n)
    save_dataset(out, cohort, spec=spec.to_dict(), seed=cfg["seed"])
    vols = np.array([p.axial_mask.data.sum() * np.prod(p.axial_mask.spacing) / 1000.0 for p in cohort])
    ax = cohort[0].axial
    print(f"generated {n} patients in {out}")
    print(f"  axial grid {ax.extents} at {ax.spacing} mm")
    print(f"  gland volume mL: mean {vols.mean():.1f}  min {vols.min():.1f}  max {vols.max():.1f}")
    return {}


def train_and_save(patients, split: dict, model_cfg: ModelConfig, train_cfg: TrainConfig, out: Path, verbose: bool = False) -> dict:
    """Fit on the training side of ``split`` and write the checkpoint,
    its sidecar and the training log into ``out``."""
    train_ids, test_ids = _split(patients, split)
    held = set(test_ids)
    model, log = fit(model_cfg, train_cfg, [p for p in patients if p.patient_id not in held], verbose=verbose)
    provenance = {
        "train_config": train_cfg.to_dict(),
        "split": dict(split),
        "train_ids": train_ids,
        "test_ids": test_ids,
        "selected_epoch": log.selected_epoch,
        "initial_val": log.initial_val,
    }
    save_checkpoint(out / CHECKPOINT, model, _jsonable(provenance))
    log.write_csv(out / "train_log.csv")
    log.write_json(out / "train_log.json")
    return {"model": model, "log": log, "train_ids": train_ids, "test_ids": test_ids}


def run_train(cfg: dict, inputs: dict, out: Path) -> dict:
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    patients, _ = _load_patients(inputs["dataset"])
    res = train_and_save(patients, cfg["split"], model_cfg, train_cfg, out, verbose=cfg.get("verbose", False))
    print(f"trained on {len(res['train_ids'])} patients; selected epoch {res['log'].selected_epoch}; checkpoint {out / CHECKPOINT}")
    return {}


def _select_subset(prov: dict, subset: str, patients):
    if subset == "all":
        return [p.patient_id for p in patients]
    key = f"{subset}_ids"
    if key not in prov:
        raise ConfigError(f"checkpoint provenance has no {subset} split; use subset 'all'")
    return list(prov[key])


def _regime_plot(reports: dict[str, MetricReport], path: Path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    flags = list(reports)
    for ax, metric, label in zip(axes, ("dsc", "rvd"), ("WG DSC (%)", "WG RVD (%)")):
        data = [r.values(metric, "WG") for r in reports.values()]
        data = [d[np.isfinite(d)] for d in data]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(flags) + 1), [f"views {f}" for f in flags])
        ax.set_ylabel(label)
    fig.tight_layout()
    return _svg(fig, path)


def run_eval(cfg: dict, inputs: dict, out: Path) -> dict:
    for flag in cfg["views"]:
        if str(flag) not in VIEW_FLAGS:
            raise ConfigError(f"unknown views flag {flag!r}; choose from {sorted(VIEW_FLAGS)}")
    model = load_checkpoint(inputs["checkpoint"])
    prov = load_provenance(inputs["checkpoint"])
    patients, _ = _load_patients(inputs["dataset"])
    ids = _select_subset(prov, cfg["subset"], patients)
    patients, _ = _load_patients(inputs["dataset"], ids)
    reports = {}
    workers = threads()
    for flag in map(str, cfg["views"]):
        rep = evaluate(model, patients, flag, threshold=cfg["threshold"], workers=workers)
        rep.write_csv(out / f"metrics_{flag}.csv")
        rep.write_json(
            out / f"summary_{flag}.json", cfg["bootstrap_replicates"], cfg["bootstrap_seed"],
            extra={"views": flag, "subset": cfg["subset"], "threshold": cfg["threshold"], "patients": ids},
        )
        reports[flag] = rep
        wg = rep.values("dsc", "WG")
        print(f"views {flag:>2}: WG DSC {np.mean(wg):.2f} +/- {np.std(wg, ddof=1) if wg.size > 1 else 0.0:.2f} over {len(ids)} patients")
    if cfg["plots"]:
        _regime_plot(reports, out / "regimes.svg")
    return {}


def _cell_name(alpha, temperature, views, seed) -> str:
    return f"a{alpha:g}_t{temperature:g}_v{views}_s{seed}"


def _wg_mean(rep: MetricReport, metric: str) -> float:
    v = rep.values(metric, "WG")
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def plot_sweep(csv_path, out) -> list[Path]:
    """Render the alpha curves (one panel per tau, one line per views
    setting, seeds averaged) of a sweep CSV as ``sweep_wg_dsc.svg`` and
    ``sweep_wg_rvd.svg`` in ``out``.  Only the CSV is read, so the figures
    can be regenerated from it at any time."""
    plt = _pyplot()
    rows = read_sweep_csv(csv_path)
    done = [r for r in rows if r["status"] == "ok"]
    out = Path(out)
    paths = []
    temps = sorted({r["temperature"] for r in rows})
    for metric, label in (("wg_dsc", "WG DSC (%)"), ("wg_rvd", "WG RVD (%)")):
        fig, axes = plt.subplots(1, len(temps), figsize=(3.5 * len(temps), 3.2), squeeze=False)
        for ax, tau in zip(axes[0], temps):
            for views in sorted({r["views"] for r in rows}):
                pts = {}
                for r in done:
                    if r["temperature"] == tau and r["views"] == views:
                        pts.setdefault(r["alpha"], []).append(r[metric])
                if pts:
                    xs = sorted(pts)
                    ax.plot(xs, [float(np.mean(pts[x])) for x in xs], marker="o", label=f"views={views}")
            ax.set_title(f"tau = {tau:g}")
            ax.set_xlabel("alpha")
            ax.set_ylabel(label)
            if ax.lines:
                ax.legend(fontsize="small")
        fig.tight_layout()
        paths.append(_svg(fig, out / f"sweep_{metric}.svg"))
    return paths


def write_sweep_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return path


def read_sweep_csv(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SWEEP_COLUMNS:
            raise FormatError(f"{path.name}: header must be {','.join(SWEEP_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(SWEEP_COLUMNS):
                raise FormatError(f"{path.name}: row {lineno} has {len(rec)} fields, expected {len(SWEEP_COLUMNS)}")
            r = dict(zip(SWEEP_COLUMNS, rec))
            try:
                for key in ("alpha", "temperature", "wg_dsc", "wg_rvd", "wg_hd95_mm", "wg_abd_mm"):
                    r[key] = float(r[key])
                r["views"], r["seed"] = int(r["views"]), int(r["seed"])
                r["selected_epoch"] = int(r["selected_epoch"]) if r["selected_epoch"] else None
            except ValueError:
                raise FormatError(f"{path.name}: row {lineno} has a malformed value: {rec}") from None
            rows.append(r)
        return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if not math.isfinite(x) else repr(x)
    return str(x)


def run_sweep(cfg: dict, inputs: dict, out: Path) -> dict:
    for key in ("alpha", "temperature", "views", "seeds"):
        if not cfg[key]:
            raise ConfigError(f"sweep grid field {key!r} is empty")
    base = cfg["base"]
    model_cfg = ModelConfig.from_dict(base["model"])
    patients, _ = _load_patients(inputs["dataset"])
    _, test_ids = _split(patients, base["split"])
    test, _ = _load_patients(inputs["dataset"], test_ids)
    ev = cfg["eval"]
    rows, skipped = [], []
    workers = threads()
    cells = out / "cells"
    for alpha, tau, views, seed in itertools.product(cfg["alpha"], cfg["temperature"], cfg["views"], cfg["seeds"]):
        row = {"alpha": float(alpha), "temperature": float(tau), "views": int(views), "seed": int(seed),
               "status": "ok", "wg_dsc": math.nan, "wg_rvd": math.nan, "wg_hd95_mm": math.nan, "wg_abd_mm": math.nan,
               "selected_epoch": "", "note": ""}
        name = _cell_name(alpha, tau, views, seed)
        try:
            train_cfg = TrainConfig.from_dict({
                **base["train"], "alpha": alpha, "temperature": tau, "views": views,
                "data_seed": seed, "init_seed": seed, "aug_seed": seed,
            })
        except ConfigError as exc:
            warnings.warn(f"sweep point {name} skipped: {exc}", stacklevel=2)
            row.update(status="skipped", note=str(exc))
            skipped.append({"cell": name, "reason": str(exc)})
            rows.append(row)
            continue
        cell_dir = cells / name
        cell_dir.mkdir(parents=True)
        res = train_and_save(patients, base["split"], model_cfg, train_cfg, cell_dir)
        rep = evaluate(res["model"], test, _views_flag(train_cfg), threshold=ev["threshold"], workers=workers)
        rep.write_csv(cell_dir / "metrics.csv")
        row.update(
            wg_dsc=_wg_mean(rep, "dsc"), wg_rvd=_wg_mean(rep, "rvd"),
            wg_hd95_mm=_wg_mean(rep, "hd95_mm"), wg_abd_mm=_wg_mean(rep, "abd_mm"),
            selected_epoch=res["log"].selected_epoch,
        )
        rows.append(row)
        print(f"{name}: WG DSC {row['wg_dsc']:.2f}", flush=True)
    plot_sweep(write_sweep_csv(out / "sweep.csv", rows), out)
    return {"skipped": skipped}


def stats_table(cfg: dict, inputs: dict) -> dict:
    metric = METRIC_ALIASES.get(cfg["metric"])
    if metric is None:
        raise ConfigError(f"unknown metric {cfg['metric']!r}; choose from {sorted(METRIC_ALIASES)}")
    region = cfg["region"]
    samples = []
    for key in ("report_a", "report_b"):
        v = MetricReport.read_csv(inputs[key]).values(metric, region)
        samples.append(v[np.isfinite(v)])
    a, b = samples
    t = welch_t(a, b)
    u = mann_whitney_u(a, b)
    return {
        "metric": metric, "region": region,
        "n_a": int(a.size), "n_b": int(b.size), "mean_a": float(a.mean()), "mean_b": float(b.mean()),
        "welch_t": {"statistic": t.statistic, "p_value": t.p_value, "df": t.df, "significant": t.significant},
        "mann_whitney_u": {"statistic": u.statistic, "p_value": u.p_value, "significant": u.significant},
    }


def print_stats(res: dict) -> None:
    print(f"{res['region']} {res['metric']}: A n={res['n_a']} mean={res['mean_a']:.4f}  B n={res['n_b']} mean={res['mean_b']:.4f}")
    for name, label in (("welch_t", "Welch t"), ("mann_whitney_u", "Mann-Whitney U")):
        r = res[name]
        sig = "significant" if r["significant"] else "not significant"
        print(f"  {label:<15} {r['statistic']:>10.4f}  p = {r['p_value']:.4g}  ({sig} at P < .05)")


def run_stats(cfg: dict, inputs: dict, out: Path | None) -> dict:
    res = stats_table(cfg, inputs)
    print_stats(res)
    if out is not None:
        write_json(out / "stats.json", res)
    return {}


RUNNERS: dict[str, Callable] = {
    "gen": run_gen, "train": run_train, "eval": run_eval, "sweep": run_sweep, "stats": run_stats,
}


def execute(command: str, cfg: dict, inputs: dict, out, force: bool = False, argv=None) -> Path | None:
    """Run ``command`` with a fully resolved config and record a manifest."""
    for key, path in inputs.items():
        if not Path(path).exists():
            raise DataError(f"{key} path {path} does not exist")
    if out is None:
        if command != "stats":
            raise ConfigError(f"{command} needs an output directory")
        RUNNERS[command](cfg, inputs, None)
        return None
    started = _now()
    out = prepare_out(out, force, inputs.values())
    extra = RUNNERS[command](cfg, inputs, out)
    outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": cfg,
        "seeds": _seeds(command, cfg),
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items()},
        "outputs": outputs,
        "version": version_stamp(),
        "started": started,
        "finished": _now(),
        **extra,
    }
    write_json(out / MANIFEST, manifest)
    return out


# -- config resolution -------------------------------------------------------

def _train_defaults() -> dict:
    return {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(), "split": dict(DEFAULT_SPLIT), "verbose": False}


def resolve_train_config(doc: dict | None) -> dict:
    base = _train_defaults()
    doc = doc or {}
    unknown = set(doc) - set(base)
    if unknown:
        raise ConfigError(f"train config: unknown section(s) {sorted(unknown)}")
    cfg = {
        "model": _merge(base["model"], doc.get("model"), "model"),
        "train": _merge(base["train"], doc.get("train"), "train"),
        "split": _merge(base["split"], doc.get("split"), "split"),
        "verbose": bool(doc.get("verbose", False)),
    }
    # validate early so bad settings fail before any data is touched
    ModelConfig.from_dict(cfg["model"])
    TrainConfig.from_dict(cfg["train"])
    if not 0.0 < cfg["split"]["train_fraction"] < 1.0:
        raise ConfigError(f"split.train_fraction must lie in (0, 1), got {cfg['split']['train_fraction']}")
    return _jsonable(cfg)


def _flag_overrides(args, mapping: dict[str, tuple[str, str]], cfg: dict) -> dict:
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.setdefault(section, {})[key] = value
    return cfg


TRAIN_FLAGS = {
    "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"), "lr": ("train", "lr"),
    "alpha": ("train", "alpha"), "temperature": ("train", "temperature"), "views": ("train", "views"),
    "base_channels": ("model", "base_channels"), "train_fraction": ("split", "train_fraction"),
    "split_seed": ("split", "seed"),
}


def _resolve_gen(args) -> tuple[dict, dict]:
    doc = read_config(args.config, {"phantom", "n_patients", "seed"}) if args.config else {}
    phantom = doc.get("phantom", {})
    if args.spec:
        phantom = read_config(args.spec)
    cfg = {"phantom": phantom, "n_patients": doc.get("n_patients", 50), "seed": doc.get("seed", 0)}
    if args.n_patients is not None:
        cfg["n_patients"] = args.n_patients
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = PhantomSpec.from_dict({**cfg["phantom"], "seed": cfg["seed"]})
    cfg["phantom"] = _jsonable(spec.to_dict())
    return cfg, {}


def _resolve_train(args) -> tuple[dict, dict]:
    doc = read_config(args.config, {"model", "train", "split", "verbose"}) if args.config else {}
    doc = _flag_overrides(args, TRAIN_FLAGS, {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()})
    if args.seed is not None:
        doc.setdefault("train", {}).update(data_seed=args.seed, init_seed=args.seed, aug_seed=args.seed)
    if args.verbose:
        doc["verbose"] = True
    return resolve_train_config(doc), {"dataset": args.dataset}


def _resolve_eval(args) -> tuple[dict, dict]:
    doc = read_config(args.config, {"views", "subset", "threshold", "bootstrap_replicates", "bootstrap_seed", "plots"}) if args.config else {}
    cfg = {"views": ["3"], "subset": "test", "plots": True, **DEFAULT_EVAL, **doc}
    if args.views:
        cfg["views"] = args.views
    for attr in ("subset", "threshold", "bootstrap_replicates", "bootstrap_seed"):
        if getattr(args, attr) is not None:
            cfg[attr] = getattr(args, attr)
    if args.no_plots:
        cfg["plots"] = False
    cfg["views"] = [str(v) for v in cfg["views"]]
    if cfg["subset"] not in ("test", "train", "all"):
        raise ConfigError(f"subset must be test, train or all, got {cfg['subset']!r}")
    return cfg, {"checkpoint": args.checkpoint, "dataset": args.dataset}


def resolve_grid(doc: dict) -> dict:
    cfg = {**{k: list(v) for k, v in DEFAULT_GRID.items()}, "base": {}, "eval": dict(DEFAULT_EVAL)}
    unknown = set(doc) - set(cfg)
    if unknown:
        raise ConfigError(f"grid: unknown field(s) {sorted(unknown)}")
    for key in DEFAULT_GRID:
        if key in doc:
            cfg[key] = list(doc[key])
    cfg["base"] = resolve_train_config(doc.get("base"))
    cfg["eval"] = _merge(DEFAULT_EVAL, doc.get("eval"), "eval")
    return _jsonable(cfg)


def _resolve_sweep(args) -> tuple[dict, dict]:
    doc = read_config(args.grid, {"alpha", "temperature", "views", "seeds", "base", "eval"}) if args.grid else {}
    return resolve_grid(doc), {"dataset": args.dataset}


def _resolve_stats(args) -> tuple[dict, dict]:
    doc = read_config(args.config, {"metric", "region"}) if args.config else {}
    cfg = {"metric": "dsc", "region": "WG", **doc}
    if args.metric is not None:
        cfg["metric"] = args.metric
    if args.region is not None:
        cfg["region"] = args.region
    return cfg, {"report_a": args.report_a, "report_b": args.report_b}


RESOLVERS = {"gen": _resolve_gen, "train": _resolve_train, "eval": _resolve_eval, "sweep": _resolve_sweep, "stats": _resolve_stats}


def replay(manifest_path, out=None, force: bool = False) -> Path | None:
    """Re-run the command recorded in a manifest; ``out`` defaults to the
    manifest's own directory (which then needs ``force``)."""
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path.name}: not valid JSON ({exc})") from None
    if m.get("schema_version") != SCHEMA_VERSION or m.get("command") not in RUNNERS:
        raise FormatError(f"{manifest_path.name}: not an mvseg manifest")
    target = Path(out) if out is not None else manifest_path.parent
    return execute(m["command"], m["config"], m["inputs"], target, force=force, argv=m.get("argv"))


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvseg", description="Multi-view contrastive segmentation on synthetic prostate phantoms.")
    p.add_argument("--version", action="version", version=f"mvseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a phantom cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="phantom spec JSON (PhantomSpec fields)")
    g.add_argument("--config", help="JSON with phantom, n_patients, seed")
    g.add_argument("--n-patients", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one model on the training split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON with model, train and split sections")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--temperature", type=float)
    t.add_argument("--views", type=int, choices=(1, 2, 3))
    t.add_argument("--base-channels", type=int)
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--seed", type=int, help="sets the data, init and augmentation seeds")
    t.add_argument("--verbose", action="store_true")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint under one or more view regimes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--views", nargs="+", choices=sorted(VIEW_FLAGS))
    e.add_argument("--subset", choices=("test", "train", "all"))
    e.add_argument("--threshold", type=float)
    e.add_argument("--bootstrap-replicates", type=int)
    e.add_argument("--bootstrap-seed", type=int)
    e.add_argument("--no-plots", action="store_true")
    e.add_argument("--force", action="store_true")

    s = sub.add_parser("sweep", help="train and evaluate over an alpha x tau x views x seed grid")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", help="grid JSON (alpha, temperature, views, seeds, base, eval)")
    s.add_argument("--force", action="store_true")

    st = sub.add_parser("stats", help="Welch t and Mann-Whitney U between two metric reports")
    st.add_argument("report_a")
    st.add_argument("report_b")
    st.add_argument("--metric", choices=sorted(METRIC_ALIASES))
    st.add_argument("--region", choices=("WG", "apex", "mid", "base"))
    st.add_argument("--config")
    st.add_argument("--out")
    st.add_argument("--force", action="store_true")

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        threads()
        if args.command == "replay":
            replay(args.manifest, args.out, args.force)
        else:
            cfg, inputs = RESOLVERS[args.command](args)
            execute(args.command, cfg, inputs, getattr(args, "out", None), force=args.force, argv=argv)
    except MVSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
