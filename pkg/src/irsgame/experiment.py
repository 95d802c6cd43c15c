"""Monte-Carlo sweeps over transmit power or module count, CSV and SVG output."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .follower import FollowerError
from .game import (DIRECT_LINK, RANDOM_PRICING, SCHEMES, STACKELBERG, GameOutcome,
                   run_direct_link, run_random_pricing, run_stackelberg)
from .scenario import ScenarioConfig, channel_rng, dbm_to_watt, generate_channels

log = logging.getLogger(__name__)

SWEEP_VARIABLES = ("p_max_dbm", "num_modules")
CSV_COLUMNS = ("sweep_name", "sweep_value", "scheme", "trials", "mean_U", "ci95_U", "mean_V",
               "ci95_V", "mean_sum_rate", "ci95_sum_rate", "mean_triggered", "failure_count")
METRICS = ("U", "V", "sum_rate", "triggered")
MAX_FAILURE_FRACTION = 0.05
# stream tag separating the random-pricing draws from the channel draws
PRICE_STREAM = 1

# numerical failures of a single trial; anything else is a bug and propagates
SOLVER_FAILURES = (FollowerError, np.linalg.LinAlgError, FloatingPointError)


class SweepAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: Tuple[float, ...]
    trials: int = 200
    schemes: Tuple[str, ...] = SCHEMES
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    seed: int = 2020
    name: Optional[str] = None

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"sweep variable must be one of {SWEEP_VARIABLES}, got {self.variable!r}")
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("sweep values must be non-empty")
        if self.variable == "num_modules" and any(v != int(v) or v < 0 for v in values):
            raise ValueError("num_modules values must be non-negative integers")
        object.__setattr__(self, "values", values)
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        schemes = tuple(self.schemes)
        unknown = set(schemes) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}; choose from {SCHEMES}")
        object.__setattr__(self, "schemes", schemes)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def sweep_name(self) -> str:
        return self.name or self.variable

    def config_at(self, value: float) -> ScenarioConfig:
        if self.variable == "p_max_dbm":
            return self.base.replace(max_power=dbm_to_watt(value))
        return self.base.replace(num_modules=int(value))


@dataclass(frozen=True)
class SweepRow:
    sweep_name: str
    sweep_value: float
    scheme: str
    trials: int
    mean_U: float
    ci95_U: float
    mean_V: float
    ci95_V: float
    mean_sum_rate: float
    ci95_sum_rate: float
    mean_triggered: float
    failure_count: int


@dataclass
class SweepResult:
    rows: List[SweepRow]
    # (sweep value, scheme) -> metric -> per-trial values in trial order, NaN where failed
    samples: Dict[Tuple[float, str], Dict[str, np.ndarray]]


def _sig9(x: float) -> float:
    return float(format(x, ".9g"))


def mean_ci95(x) -> Tuple[float, float]:
    """Sample mean and half-width of the two-sided 95% Student-t interval (NaN for n < 2)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return math.nan, math.nan
    mean = float(np.sum(x) / n)
    if n < 2:
        return mean, math.nan
    sd = float(np.sqrt(np.sum((x - mean) ** 2) / (n - 1)))
    return mean, float(stats.t.ppf(0.975, n - 1) * sd / np.sqrt(n))


def _metrics(out: GameOutcome) -> Tuple[float, float, float, float]:
    return out.U, out.V, out.sum_rate, float(out.num_triggered)


def run_trial(cfg: ScenarioConfig, schemes: Sequence[str], seed: int, trial: int) -> Dict[str, Optional[tuple]]:
    """All requested schemes on one channel realization; ``None`` marks a failed scheme.

    The realization depends only on ``(seed, trial)``, so every scheme (and
    every sweep value) sees the same draws.
    """
    results: Dict[str, Optional[tuple]] = {}
    if not schemes:
        return results
    with threadpool_limits(limits=1):
        ch = generate_channels(cfg, channel_rng(seed, trial))
        try:
            direct = run_direct_link(ch, cfg)
        except SOLVER_FAILURES as exc:
            log.warning("trial %d: direct-link solve failed: %s", trial, exc)
            return {s: None for s in schemes}
        for scheme in schemes:
            try:
                if scheme == DIRECT_LINK:
                    out = direct
                elif scheme == STACKELBERG:
                    out = run_stackelberg(ch, cfg, direct_W=direct.W)
                else:
                    rng = np.random.default_rng([seed, trial, PRICE_STREAM])
                    out = run_random_pricing(ch, cfg, rng, direct_W=direct.W)
                results[scheme] = _metrics(out)
            except SOLVER_FAILURES as exc:
                log.warning("trial %d: %s failed: %s", trial, scheme, exc)
                results[scheme] = None
    return results


def _trial_job(args):
    return run_trial(*args)


def run_sweep(spec: SweepSpec, threads: int = 1) -> SweepResult:
    """Run every (sweep value, trial) and aggregate per scheme.

    Trials are farmed out to ``threads`` worker processes; results are
    collected in (value, trial) order so the table does not depend on the
    worker count.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    jobs = [(spec.config_at(v), spec.schemes, spec.seed, t)
            for v in spec.values for t in range(spec.trials)]
    if threads == 1 or len(jobs) == 1:
        results = [_trial_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * threads))))

    rows: List[SweepRow] = []
    samples: Dict[Tuple[float, str], Dict[str, np.ndarray]] = {}
    for i, value in enumerate(spec.values):
        block = results[i * spec.trials:(i + 1) * spec.trials]
        for scheme in spec.schemes:
            data = np.array([r[scheme] if r[scheme] is not None else (math.nan,) * 4 for r in block],
                            dtype=float).reshape(spec.trials, 4)
            ok = ~np.isnan(data[:, 0])
            failures = int(spec.trials - ok.sum())
            if failures > MAX_FAILURE_FRACTION * spec.trials:
                raise SweepAborted(f"{failures}/{spec.trials} trials failed for {scheme} at "
                                   f"{spec.variable}={value:g}")
            samples[(value, scheme)] = {m: data[:, j] for j, m in enumerate(METRICS)}
            (mU, cU), (mV, cV), (mS, cS) = (mean_ci95(data[ok, j]) for j in range(3))
            mT = mean_ci95(data[ok, 3])[0]
            rows.append(SweepRow(spec.sweep_name, _sig9(value), scheme, int(ok.sum()),
                                 *(_sig9(x) for x in (mU, cU, mV, cV, mS, cS, mT)), failures))
        log.info("%s=%g done", spec.variable, value)
    return SweepResult(rows, samples)


# ---------------------------------------------------------------------------
# output

def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def table_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_csv(path) -> List[SweepRow]:
    kinds = {f.name: f.type for f in fields(SweepRow)}
    convert = {"str": str, "int": int, "float": float}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [SweepRow(**{k: convert[kinds[k]](v) for k, v in rec.items()}) for rec in reader]


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def plot_metric(rows: Sequence[SweepRow], metric: str, path: str, xlabel: str = "") -> None:
    """Mean with 95% error bars against the sweep value, one series per scheme (SVG)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mean_key = f"mean_{metric}"
    ci_key = f"ci95_{metric}" if metric != "triggered" else None
    with matplotlib.rc_context({"svg.hashsalt": "irsgame", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for scheme in dict.fromkeys(r.scheme for r in rows):
            sel = [r for r in rows if r.scheme == scheme]
            x = [r.sweep_value for r in sel]
            y = [getattr(r, mean_key) for r in sel]
            err = [0.0 if ci_key is None or math.isnan(getattr(r, ci_key)) else getattr(r, ci_key)
                   for r in sel]
            ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=scheme)
        ax.set_xlabel(xlabel or (rows[0].sweep_name if rows else ""))
        ax.set_ylabel(mean_key)
        ax.grid(alpha=0.3)
        if rows:
            ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    _atomic_write(path, buf.getvalue())


def emit_outputs(rows: Sequence[SweepRow], out_dir: str, name: str = "sweep",
                 plots: bool = False) -> List[str]:
    """Write ``<name>.csv`` (and ``<name>_<metric>.svg`` with ``plots``) into ``out_dir``.

    Files are written to a temporary name and renamed, so a failure never
    leaves a partial CSV behind.  Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    _atomic_write(csv_path, table_to_csv(rows).encode())
    written = [csv_path]
    if plots:
        for metric in METRICS:
            path = os.path.join(out_dir, f"{name}_{metric}.svg")
            plot_metric(rows, metric, path)
            written.append(path)
    return written
