"""Experiment driver behind the CLI: seed sweeps, metric export, ablations, run comparison.

Every output is a pure function of the config and seeds. Seeds may run in
worker processes, but files are written by the parent in seed order.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nam
from .config import ExperimentConfig, TrustConfig
from .data import generate_dataset, save_split
from .federation import run_simulation

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "# fedmmx-metrics v1"
ABLATION_SCHEMA = "# fedmmx-ablation v1"
SUMMARY_SCHEMA = "# fedmmx-ablation-summary v1"
TRUST_CURVE_SCHEMA = "# fedmmx-trust-curve v1"
ACCURACY_CURVE_SCHEMA = "# fedmmx-accuracy-curve v1"

METRICS_COLUMNS = ("seed", "round", "accuracy", "ec", "fs", "ece", "mean_trust_honest", "mean_trust_adversarial")
ABLATION_COLUMNS = ("variant", "seed", "accuracy", "ec", "fs", "ece", "clean_accuracy", "retained")
SUMMARY_COLUMNS = ("variant", "n_seeds", "accuracy_mean", "accuracy_std", "ec_mean", "ec_std",
                   "fs_mean", "fs_std", "ece_mean", "ece_std", "retained_mean", "retained_std")
VARIANTS = ("full", "no-trust", "no-consistency", "no-interp")


class SeedFailure(RuntimeError):
    pass


def fmt(value) -> str:
    """CSV cell: empty for missing values, shortest round-trip repr for floats."""
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def write_csv(path: Path, schema: str, columns: Sequence[str], rows) -> None:
    buf = io.StringIO()
    buf.write(schema + "\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_csv(path) -> Tuple[str, List[Dict[str, str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing schema header")
    cols = lines[1].split(",")
    return lines[0], [dict(zip(cols, line.split(","))) for line in lines[2:]]


# -- per-seed work (runs in worker processes) --------------------------------

@dataclass
class SeedOutput:
    seed: int
    rows: List[tuple]
    ndjson: str
    params: bytes
    final: Optional[dict]
    error: Optional[str] = None


def _train_seed(config: ExperimentConfig, seed: int) -> SeedOutput:
    try:
        res = run_simulation(config, seed)
    except Exception as exc:  # reported by the parent, the other seeds carry on
        return SeedOutput(seed, [], "", b"", None, error=str(exc))
    rows, lines = [], []
    for log in res.logs:
        m = log.metrics
        rows.append((seed, log.round, m.accuracy, m.ec, m.fs, m.ece,
                     log.mean_trust(False), log.mean_trust(True)))
        lines.append(log.to_json() + "\n")
    final = None
    if res.logs:
        m = res.logs[-1].metrics
        final = {"accuracy": m.accuracy, "ec": m.ec, "fs": m.fs, "ece": m.ece}
    return SeedOutput(seed, rows, "".join(lines), nam.params_to_bytes(res.params), final)


def _map_seeds(fn, jobs: Sequence[tuple], parallel: int) -> list:
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(parallel, len(jobs))) as pool:
            return list(pool.map(fn, *zip(*jobs)))
    return [fn(*job) for job in jobs]


def _resolve(config: ExperimentConfig, seeds, out) -> Tuple[ExperimentConfig, Tuple[int, ...], Path]:
    if seeds is not None:
        config = dataclasses.replace(config, seeds=tuple(seeds))
    config.validate()
    out = Path(out if out is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, config.seeds, out


def _raise_failures(outputs: Sequence[SeedOutput]) -> None:
    failed = [o for o in outputs if o.error is not None]
    if failed:
        raise SeedFailure("; ".join(o.error for o in failed))


# -- commands ----------------------------------------------------------------

def generate(config: ExperimentConfig, out=None, seeds=None) -> List[Path]:
    config, seeds, out = _resolve(config, seeds, out)
    paths = []
    for seed in seeds:
        split = generate_dataset(config.with_seed(seed).data)
        path = out / f"dataset_seed{seed}.json"
        save_split(split, path)
        paths.append(path)
        C = config.data.num_classes
        print(f"seed {seed}: {path}")
        for c in split.clients:
            hist = np.bincount(c.data.labels, minlength=C).tolist()
            print(f"  client {c.client_id}: n={c.n} modalities={'+'.join(c.modalities)} labels={hist}")
        for r in split.repairs:
            print(f"  repair: {r}")
    return paths


def train(config: ExperimentConfig, out=None, seeds=None, parallel: int = 1) -> Path:
    """Run one simulation per seed; returns the metrics CSV path.

    Writes ``metrics.csv`` plus ``seed_<s>/rounds.ndjson`` and ``seed_<s>/params.bin``.
    Raises SeedFailure after writing the outputs of the seeds that did finish.
    """
    config, seeds, out = _resolve(config, seeds, out)
    outputs = _map_seeds(_train_seed, [(config, s) for s in seeds], parallel)
    rows = []
    for o in outputs:
        if o.error is not None:
            logger.error("seed %d failed: %s", o.seed, o.error)
            continue
        d = out / f"seed_{o.seed}"
        d.mkdir(exist_ok=True)
        (d / "rounds.ndjson").write_text(o.ndjson, encoding="utf-8", newline="\n")
        (d / "params.bin").write_bytes(o.params)
        rows.extend(o.rows)
        if o.final:
            logger.info("seed %d: final accuracy %.4f", o.seed, o.final["accuracy"])
    path = out / "metrics.csv"
    write_csv(path, METRICS_SCHEMA, METRICS_COLUMNS, rows)
    _raise_failures(outputs)
    return path


def variant_config(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "full":
        return config
    if variant == "no-trust":
        return dataclasses.replace(config, trust=dataclasses.replace(config.trust, mode="off"))
    if variant == "no-consistency":
        return dataclasses.replace(config, hyper=dataclasses.replace(config.hyper, lambda_consistency=0.0))
    if variant == "no-interp":
        return dataclasses.replace(config, hyper=dataclasses.replace(config.hyper, lambda_interp=0.0))
    raise ValueError(f"unknown ablation variant {variant!r}")


@dataclass
class RunSummary:
    variant: str
    seeds: Tuple[int, ...]
    accuracy: List[float]
    ec: List[Optional[float]]
    fs: List[float]
    ece: List[float]
    clean_accuracy: List[Optional[float]]

    @property
    def retained(self) -> List[Optional[float]]:
        out = []
        for a, c in zip(self.accuracy, self.clean_accuracy):
            if c is None:
                out.append(None)
            else:
                out.append(a / c if c > 0 else math.inf)
        return out

    def row(self) -> tuple:
        cells = [self.variant, len(self.seeds)]
        for vals in (self.accuracy, self.ec, self.fs, self.ece, self.retained):
            cells.extend(mean_std(vals))
        return tuple(cells)


def mean_std(values) -> Tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(statistics.fmean(vals))
    std = float(statistics.stdev(vals)) if len(vals) > 1 else 0.0
    return mean, std


def _final_metrics(config: ExperimentConfig, seed: int) -> dict:
    o = _train_seed(config, seed)
    if o.error is not None:
        raise SeedFailure(o.error)
    return o.final or {"accuracy": None, "ec": None, "fs": None, "ece": None}


def _ablation_job(config: ExperimentConfig, variant: str, seed: int):
    cfg = variant_config(config, variant)
    attacked = _final_metrics(cfg, seed)
    clean = _final_metrics(cfg.clean(), seed)["accuracy"] if cfg.attack is not None else None
    return attacked, clean


def ablate(config: ExperimentConfig, out=None, seeds=None, parallel: int = 1) -> Dict[str, RunSummary]:
    """Run every ablation variant over the same seeds.

    With an attack configured, each (variant, seed) also gets a paired clean
    run and the retained-accuracy ratio. Writes ``ablation.csv`` (one row per
    variant and seed), ``ablation_summary.csv`` and ``directions.csv``.
    """
    config, seeds, out = _resolve(config, seeds, out)
    jobs = [(config, v, s) for v in VARIANTS for s in seeds]
    results = _map_seeds(_ablation_job, jobs, parallel)
    summaries: Dict[str, RunSummary] = {}
    rows = []
    for (_, variant, seed), (m, clean) in zip(jobs, results):
        s = summaries.setdefault(variant, RunSummary(variant, seeds, [], [], [], [], []))
        s.accuracy.append(m["accuracy"])
        s.ec.append(m["ec"])
        s.fs.append(m["fs"])
        s.ece.append(m["ece"])
        s.clean_accuracy.append(clean)
        rows.append((variant, seed, m["accuracy"], m["ec"], m["fs"], m["ece"], clean, s.retained[-1]))
    write_csv(out / "ablation.csv", ABLATION_SCHEMA, ABLATION_COLUMNS, rows)
    write_csv(out / "ablation_summary.csv", SUMMARY_SCHEMA, SUMMARY_COLUMNS,
              [summaries[v].row() for v in VARIANTS])
    checks = direction_checks(summaries)
    write_csv(out / "directions.csv", "# fedmmx-directions v1", ("check", "left", "right", "holds"),
              [(name, a, b, "" if ok is None else str(ok).lower()) for name, a, b, ok in checks])
    for name, a, b, ok in checks:
        verdict = "n/a" if ok is None else ("as expected" if ok else "NOT as expected")
        print(f"{name}: {fmt(a)} vs {fmt(b)} -> {verdict}")
    return summaries


def direction_checks(summaries: Dict[str, RunSummary]):
    """(name, left mean, right mean, left > right or None when undefined)."""
    def check(name, metric, left, right):
        a = mean_std(getattr(summaries[left], metric))[0]
        b = mean_std(getattr(summaries[right], metric))[0]
        ok = None if a is None or b is None else a > b
        return name, a, b, ok

    return [
        check("ec full > no-consistency", "ec", "full", "no-consistency"),
        check("retained full > no-trust", "retained", "full", "no-trust"),
    ]


# -- compare -----------------------------------------------------------------

@dataclass
class RunCurves:
    name: str
    seeds: Tuple[int, ...]
    accuracy: List[float]
    trust_honest: List[Optional[float]]
    trust_adversarial: List[Optional[float]]
    final: Dict[str, Optional[float]]


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(statistics.fmean(vals)) if vals else None


def load_run(run_dir) -> RunCurves:
    run_dir = Path(run_dir)
    seed_dirs = sorted(run_dir.glob("seed_*/rounds.ndjson"), key=lambda p: int(p.parent.name[5:]))
    if not seed_dirs:
        raise FileNotFoundError(f"{run_dir}: no seed_*/rounds.ndjson logs")
    per_seed = []
    for path in seed_dirs:
        logs = []
        for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            try:
                logs.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: corrupt log line ({exc})") from None
        per_seed.append(logs)
    R = {len(l) for l in per_seed}
    if len(R) != 1:
        raise ValueError(f"{run_dir}: seeds have different round counts {sorted(R)}")
    rounds = R.pop()
    acc, honest, adv = [], [], []
    for r in range(rounds):
        entries = [logs[r] for logs in per_seed]
        acc.append(_mean_or_none(e["global"]["accuracy"] for e in entries))
        honest.append(_mean_or_none(_mean_or_none(c["trust"] for c in e["clients"] if not c["adversarial"])
                                    for e in entries))
        adv.append(_mean_or_none(_mean_or_none(c["trust"] for c in e["clients"] if c["adversarial"])
                                 for e in entries))
    final = {k: (_mean_or_none(logs[-1]["global"][k] for logs in per_seed) if rounds else None)
             for k in ("accuracy", "ec", "fs", "ece")}
    seeds = tuple(int(p.parent.name[5:]) for p in seed_dirs)
    return RunCurves(run_dir.name or str(run_dir), seeds, acc, honest, adv, final)


def compare(run_dirs: Sequence, out) -> str:
    """Write trust_curve.csv and accuracy_curve.csv (seed-averaged, one row per run and round)
    and return a plain-text table; differences are taken against the first run."""
    if not run_dirs:
        raise ValueError("compare needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trust_rows, acc_rows = [], []
    for run in runs:
        for r, (h, a) in enumerate(zip(run.trust_honest, run.trust_adversarial), 1):
            trust_rows.append((run.name, r, h, a))
        for r, acc in enumerate(run.accuracy, 1):
            acc_rows.append((run.name, r, acc))
    write_csv(out / "trust_curve.csv", TRUST_CURVE_SCHEMA,
              ("run", "round", "mean_trust_honest", "mean_trust_adversarial"), trust_rows)
    write_csv(out / "accuracy_curve.csv", ACCURACY_CURVE_SCHEMA, ("run", "round", "accuracy"), acc_rows)

    base = runs[0]
    header = ("run", "seeds", "rounds", "accuracy", "ec", "fs", "ece", "d_accuracy", "d_ec", "d_fs", "d_ece")
    table = [header]
    for run in runs:
        cells = [run.name, str(len(run.seeds)), str(len(run.accuracy))]
        cells += [_num(run.final[k]) for k in ("accuracy", "ec", "fs", "ece")]
        for k in ("accuracy", "ec", "fs", "ece"):
            a, b = run.final[k], base.final[k]
            cells.append(_num(None if a is None or b is None else a - b))
        table.append(tuple(cells))
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8", newline="\n")
    return text


def _num(v) -> str:
    return "-" if v is None else f"{v:.4f}"
