"""Run configurations, solve-count reports and plots for the Burgers study."""

from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .bvp import BVPConvergenceError
from .model import NonsmoothSetup, SmoothSetup, burgers_problem, heat_problem
from .precond import INNER_METHODS
from .shooting import NewtonOptions, NewtonResult, newton_solve

CSV_VERSION = "paraopt-report v1"
COLUMNS = (
    "newton_index",
    "residual_inf_norm",
    "gmres_iters_cum",
    "coarse_linear_solves_per_subinterval_cum",
    "coarse_nonlinear_solves_cum",
    "fine_solves_cum",
)
SMALL_PRESET = {"N": 12, "L": 4}


class ConfigError(ValueError):
    """Invalid run configuration (a usage error)."""


@dataclass
class RunConfig:
    problem: str = "burgers"
    objective: str = "final_value"
    setup: str = "smooth"
    N: int = 32
    L: int = 20
    fine_steps: int = 64
    coarse_steps: int = 2
    gamma: Optional[float] = None
    nu: float = 0.01
    T: float = 1.0
    alpha: complex = 1.0
    precond: str = "none"
    inner_method: str = "adjusted_bc"
    combined_derivatives: bool = True
    newton_tol: float = 1e-8
    gmres_tol: float = 1e-8
    inner_tol: float = 1e-10
    max_newton: int = 50
    max_gmres: int = 200
    max_inner: int = 200
    label: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {
            "problem": ("linear", "burgers"),
            "objective": ("final_value", "tracking"),
            "setup": ("smooth", "nonsmooth"),
            "precond": ("none", "diag"),
            "inner_method": INNER_METHODS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        for key in ("N", "L", "fine_steps", "coarse_steps", "max_newton", "max_gmres", "max_inner"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.problem == "burgers" and self.N < 2:
            raise ConfigError("burgers needs N >= 2")
        for key in ("nu", "T", "newton_tol", "gmres_tol", "inner_tol"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.fine_steps < self.coarse_steps:
            raise ConfigError("fine_steps must be at least coarse_steps")
        if abs(abs(complex(self.alpha)) - 1.0) > 1e-12:
            raise ConfigError("alpha must have unit modulus")

    @property
    def problem_key(self):
        """Settings that must agree between runs that are compared."""
        return (self.problem, self.objective, self.setup, self.N, self.L, self.resolved_gamma, self.nu, self.T,
                self.fine_steps, self.coarse_steps)

    @property
    def resolved_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return SmoothSetup().gamma if self.setup == "smooth" else NonsmoothSetup().gamma

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    default = fields[key].default
    raw = raw.strip()
    try:
        if key == "gamma":
            return None if raw.lower() in ("", "none", "default") else float(raw)
        if key == "alpha":
            return complex(raw.replace(" ", "").replace("i", "j"))
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_overrides(pairs: Sequence[str]) -> Dict[str, object]:
    """``key=value`` strings to typed config values."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def parse_config_text(text: str) -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    return values


def load_config(path, overrides: Optional[Mapping[str, object]] = None, small: bool = False) -> RunConfig:
    """Read a flat ``key = value`` file; the preset and overrides apply on top."""
    path = Path(path)
    values = parse_config_text(path.read_text())
    if small:
        values.update(SMALL_PRESET)
    if overrides:
        values.update(overrides)
    values.setdefault("label", path.stem)
    return RunConfig(**values)


def build_problem(config: RunConfig):
    setup = SmoothSetup() if config.setup == "smooth" else NonsmoothSetup()
    if config.problem == "burgers":
        return burgers_problem(config.N, setup, config.objective, config.resolved_gamma, config.nu, config.T)
    return heat_problem(config.N, setup, config.objective, config.resolved_gamma, config.T)


def newton_options(config: RunConfig, workers: Optional[int] = None) -> NewtonOptions:
    return NewtonOptions(
        fine_steps=config.fine_steps,
        coarse_steps=config.coarse_steps,
        newton_tol=config.newton_tol,
        max_newton=config.max_newton,
        gmres_tol=config.gmres_tol,
        max_gmres=config.max_gmres,
        precond=config.precond,
        inner_method=config.inner_method,
        alpha=config.alpha,
        inner_tol=config.inner_tol,
        max_inner=config.max_inner,
        combined_derivatives=config.combined_derivatives,
        workers=workers,
    )


@dataclass(frozen=True)
class ReportRow:
    newton_index: int
    residual_inf_norm: float
    gmres_iters_cum: int
    coarse_linear_solves_per_subinterval_cum: int
    coarse_nonlinear_solves_cum: int
    fine_solves_cum: int


@dataclass
class RunReport:
    """Per-Newton-step cumulative counts.

    Per-subinterval counters report the maximum over subintervals, i.e. the
    work done by the busiest processor.
    """

    rows: List[ReportRow] = field(default_factory=list)
    status: str = "not_converged"
    label: str = ""
    error: Optional[str] = None
    result: Optional[NewtonResult] = field(default=None, repr=False, compare=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @classmethod
    def from_result(cls, result: NewtonResult, label: str = "") -> "RunReport":
        rows = [
            ReportRow(
                step.k,
                step.residual_inf,
                int(step.ledger["gmres_outer_iters"]),
                int(step.ledger["coarse_linear"].max()),
                int(step.ledger["coarse_nonlinear"].max()),
                int(step.ledger["fine"].max()),
            )
            for step in result.history
        ]
        if result.converged:
            status = "converged"
        elif result.error:
            status = "failed"
        else:
            status = "not_converged"
        return cls(rows, status, label, result.error, result)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CSV_VERSION} status={self.status}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.newton_index, repr(float(r.residual_inf_norm)), r.gmres_iters_cum,
                 r.coarse_linear_solves_per_subinterval_cum, r.coarse_nonlinear_solves_cum, r.fine_solves_cum]
            )
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "RunReport":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(f"# {CSV_VERSION}"):
            raise ValueError(f"{path}: not a {CSV_VERSION} file")
        status = lines[0].split("status=", 1)[1].strip() if "status=" in lines[0] else "not_converged"
        reader = csv.DictReader(lines[1:])
        rows = [
            ReportRow(int(d["newton_index"]), float(d["residual_inf_norm"]), int(d["gmres_iters_cum"]),
                      int(d["coarse_linear_solves_per_subinterval_cum"]), int(d["coarse_nonlinear_solves_cum"]),
                      int(d["fine_solves_cum"]))
            for d in reader
        ]
        return cls(rows, status, Path(path).stem)


def run(config: RunConfig, out: Optional[os.PathLike] = None, workers: Optional[int] = None) -> RunReport:
    """Run ParaOpt for ``config``; writes the CSV report to ``out`` if given.

    Solver failures do not raise: the report carries ``status='failed'`` and
    whatever rows were completed.
    """
    problem = build_problem(config)
    try:
        result = newton_solve(problem, config.L, newton_options(config, workers))
        report = RunReport.from_result(result, config.label)
    except BVPConvergenceError as exc:
        # the initial forward sweep itself broke down
        report = RunReport([], "failed", config.label, str(exc))
    if out is not None:
        report.write_csv(out)
    return report


METRIC_LABELS = {
    "gmres_iters_cum": "GMRES iterations",
    "coarse_linear_solves_per_subinterval_cum": "coarse BVP solves per subinterval",
    "coarse_nonlinear_solves_cum": "coarse nonlinear solves",
    "fine_solves_cum": "fine solves",
    "residual_inf_norm": "residual (inf-norm)",
}


def emit_plot(
    reports: Union[RunReport, Mapping[str, RunReport]],
    path,
    metrics: Sequence[str] = ("gmres_iters_cum", "coarse_linear_solves_per_subinterval_cum"),
):
    """Write a static SVG line chart against the Newton iteration.

    A single report gives one axes with a series per metric; a mapping of
    labelled reports gives one axes per metric with a series per run.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    single = isinstance(reports, RunReport)
    runs = {reports.label or "run": reports} if single else dict(reports)
    if not runs or any(len(r.rows) == 0 for r in runs.values()):
        raise ValueError("cannot plot a report without Newton steps")
    for m in metrics:
        if m not in METRIC_LABELS:
            raise ValueError(f"unknown metric {m!r}")

    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "paraopt"}):
        if single:
            fig, ax = plt.subplots(figsize=(6, 4))
            rep = next(iter(runs.values()))
            for m in metrics:
                ax.plot(rep.column("newton_index"), rep.column(m), marker="o", label=METRIC_LABELS[m])
            ax.set_xlabel("Newton iteration")
            ax.set_ylabel("cumulative count")
            ax.legend()
        else:
            fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4), squeeze=False)
            for ax, m in zip(axes[0], metrics):
                for label, rep in runs.items():
                    ax.plot(rep.column("newton_index"), rep.column(m), marker="o", label=label)
                ax.set_title(METRIC_LABELS[m])
                ax.set_xlabel("Newton iteration")
                ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)


def _unique_labels(configs: Sequence[RunConfig]) -> List[str]:
    labels, seen = [], {}
    for i, c in enumerate(configs):
        base = c.label or f"run{i + 1}"
        n = seen.get(base, 0)
        seen[base] = n + 1
        labels.append(base if n == 0 else f"{base}_{n + 1}")
    return labels


def compare(configs: Sequence[RunConfig], out_dir, workers: Optional[int] = None) -> Dict[str, RunReport]:
    """Run several variants of one problem and join their reports.

    Writes ``<label>.csv`` per run and ``summary.csv`` keyed by Newton index.
    Runs are sequential so that each run's ledger is independent.
    """
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations")
    keys = {c.problem_key for c in configs}
    if len(keys) != 1:
        raise ConfigError("compared configurations must share problem, objective, setup and discretization")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for label, cfg in zip(_unique_labels(configs), configs):
        report = run(cfg.replace(label=label), out_dir / f"{label}.csv", workers)
        reports[label] = report
    (out_dir / "summary.csv").write_text(summary_csv(reports))
    return reports


def summary_csv(reports: Mapping[str, RunReport]) -> str:
    metrics = COLUMNS[1:]
    depth = max((len(r.rows) for r in reports.values()), default=0)
    buf = io.StringIO()
    buf.write(f"# {CSV_VERSION} summary\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["newton_index"] + [f"{label}:{m}" for label in reports for m in metrics])
    for k in range(depth):
        row = [k]
        for rep in reports.values():
            if k < len(rep.rows):
                r = rep.rows[k]
                vals = [getattr(r, m) for m in metrics]
                row += [repr(float(v)) if isinstance(v, float) else v for v in vals]
            else:
                row += [""] * len(metrics)
        writer.writerow(row)
    return buf.getvalue()
