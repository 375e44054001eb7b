"""
id: harness
tag: experiments

Monte Carlo runner, RMSE metrics and the tracking experiments.

RMSE averaging order, fixed for every output: squared position error is
averaged over tracks and rooted per step; the per-step series is averaged
over steps for a trial scalar; trial scalars are averaged over trials.
Standard errors are sample standard deviation / sqrt(N) over trial scalars
(per-step standard errors likewise over trials).
"""

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import (
    DEFAULT_TOLERANCES,
    OUT_DIR,
    ConfigError,
    IdtrackError,
    Tolerances,
    dataclass_from_mapping,
    load_config,
    tolerances_from_mapping,
)
from .filters import (
    ColoredNoiseSpec,
    IllConditionedError,
    LinearGaussianModel,
    colored_model,
    white_equivalent_model,
)
from .jpdaf import AssociationConfig, Backend, init_track, jpdaf_step
from .scenario import (
    GroundTruth,
    MeasurementSet,
    ScenarioConfig,
    Variant,
    colored_noise_scenario,
    derive_seed,
    export_csv,
    generate_scenario,
    scenario_from_mapping,
    white_noise_scenario,
)

logger = logging.getLogger(__name__)

RMSE_AVERAGING = "per step: sqrt(mean over tracks of squared position error); scalar: mean over steps, then over trials"

WHITE_PRIOR_DIAG = (0.01, 0.01, 0.01, 0.01)
COLORED_PRIOR_DIAG = (100.0, 10.0, 100.0, 10.0, 25.0, 25.0)

RHO_GRID = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9)
SIGMA_GRID = tuple(float(s) for s in np.geomspace(0.5, 200.0, 9))
SIGMA_SWEEP_RHO = 0.8

# (true (rho, sigma), filter-assumed (rho, sigma))
MISMATCH_CASES = {
    1: (ColoredNoiseSpec(0.95, 1.5), ColoredNoiseSpec(0.9, 0.5)),
    2: (ColoredNoiseSpec(0.9, 0.5), ColoredNoiseSpec(0.95, 1.5)),
}

DESK_SCALE = {"equivalence": (50, 100), "colored": (20, 2000)}
PAPER_SCALE = {"equivalence": (1000, 500), "colored": (200, 2000)}

ALL_BACKENDS = (Backend.JPDAF, Backend.ID_JPDAF)


class ExperimentError(IdtrackError):
    """An experiment spec is invalid or its inputs are inconsistent."""


class ExperimentKind(str, Enum):
    EQUIVALENCE = "equivalence"
    RHO_SWEEP = "rho_sweep"
    MISMATCH = "mismatch"
    SIGMA_SWEEP = "sigma_sweep"
    SINGLE_RUN = "single_run"


class ClassicalModel(str, Enum):
    """What the classical backend filters in a colored scenario."""

    # kinematic state only, AR(1) noise taken as white at its stationary variance
    WHITE = "white"
    # the ID backend's augmented model; the two backends then differ only in algebra
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class ExperimentSpec:
    """
    Declarative description of a Monte Carlo experiment.

    Fields:
        noise_true / noise_filter: AR(1) noise generating the measurements and
            the noise the filters assume; noise_filter defaults to noise_true
        grid: rho values (rho_sweep) or sigma values (sigma_sweep), sorted
        tolerance: equivalence threshold on per-step RMSE and covariance deviation
        perturb_q: relative perturbation of the ID backend's Q (equivalence sanity check)
        prior_diag: diagonal of every track's initial covariance
        classical_model: the classical backend's model in colored scenarios
    """

    kind: ExperimentKind
    scenario: ScenarioConfig
    association: Optional[AssociationConfig] = None
    noise_true: Optional[ColoredNoiseSpec] = None
    noise_filter: Optional[ColoredNoiseSpec] = None
    grid: Tuple[float, ...] = ()
    trials: int = 20
    base_seed: int = 0
    threads: int = 1
    tolerance: float = 1e-6
    perturb_q: float = 0.0
    prior_diag: Optional[Tuple[float, ...]] = None
    backends: Tuple[Backend, ...] = ALL_BACKENDS
    tolerances: Tolerances = DEFAULT_TOLERANCES
    classical_model: ClassicalModel = ClassicalModel.WHITE
    progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        object.__setattr__(self, "classical_model", ClassicalModel(self.classical_model))
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "backends", tuple(Backend(b) for b in self.backends))
        if self.prior_diag is not None:
            object.__setattr__(self, "prior_diag", tuple(float(p) for p in self.prior_diag))
        self.validate()

    def validate(self) -> None:
        if self.trials < 1:
            raise ExperimentError(f"trials must be >= 1, got {self.trials}")
        if self.threads < 1:
            raise ExperimentError(f"threads must be >= 1, got {self.threads}")
        if not self.backends:
            raise ExperimentError("At least one backend is required")
        if self.kind in (ExperimentKind.RHO_SWEEP, ExperimentKind.SIGMA_SWEEP):
            if not self.grid:
                raise ExperimentError(f"{self.kind.value} needs a non-empty grid")
            if list(self.grid) != sorted(self.grid):
                raise ExperimentError(f"{self.kind.value} grid must be sorted")
        if self.kind is ExperimentKind.MISMATCH and (self.noise_true is None or self.noise_filter is None):
            raise ExperimentError("mismatch needs both true and filter-assumed noise specs")
        if self.kind is ExperimentKind.EQUIVALENCE and set(self.backends) != set(ALL_BACKENDS):
            raise ExperimentError("equivalence compares both backends")
        if self.prior_diag is not None and len(self.prior_diag) != self.scenario.truth_model().n:
            raise ExperimentError("prior_diag does not match the state dimension")

    @property
    def steps(self) -> int:
        return self.scenario.steps

    def effective_scenario(self) -> ScenarioConfig:
        """Scenario with the true noise applied."""
        if self.scenario.variant is Variant.COLORED and self.noise_true is not None:
            return replace(self.scenario, noise=self.noise_true)
        return self.scenario

    def filter_model(self, backend: Backend = Backend.ID_JPDAF) -> LinearGaussianModel:
        """The model `backend` filters with; only colored scenarios differ per backend."""
        scenario = self.effective_scenario()
        if scenario.variant is Variant.WHITE:
            return scenario.truth_model()
        noise = self.noise_filter or scenario.noise
        if Backend(backend) is Backend.JPDAF and self.classical_model is ClassicalModel.WHITE:
            return white_equivalent_model(scenario.tau, scenario.q_p, scenario.q_v, noise)
        return colored_model(scenario.tau, scenario.q_p, scenario.q_v, noise)

    def association_config(self) -> AssociationConfig:
        if self.association is not None:
            return self.association
        scenario = self.effective_scenario()
        return AssociationConfig(p_d=scenario.p_d, clutter_density=scenario.clutter_density)

    def initial_cov(self) -> np.ndarray:
        if self.prior_diag is not None:
            return np.diag(self.prior_diag)
        default = WHITE_PRIOR_DIAG if self.scenario.variant is Variant.WHITE else COLORED_PRIOR_DIAG
        return np.diag(default)


@dataclass(frozen=True, eq=False)
class BackendTrace:
    """One backend's outcome on one trial; rmse is None when the run diverged."""

    rmse: Optional[np.ndarray]
    diverged: bool = False
    divergence_step: Optional[int] = None
    underflows: int = 0
    covariances: Optional[np.ndarray] = field(default=None, repr=False)
    message: str = ""


@dataclass(frozen=True, eq=False)
class TrialResult:
    trial: int
    seed: int
    traces: Dict[Backend, BackendTrace]


@dataclass(frozen=True, eq=False)
class BackendSummary:
    """
    Per-backend aggregate over the trials no backend diverged in.

    divergences counts this backend's own aborts; trials_used is shared by
    every backend of a run.
    """

    series: np.ndarray
    series_stderr: np.ndarray
    mean_rmse: float
    stderr: float
    trials_used: int
    divergences: int
    underflows: int


@dataclass(frozen=True, eq=False)
class RunResult:
    summaries: Dict[Backend, BackendSummary]
    trials: Tuple[TrialResult, ...]
    wall_time: float
    base_seed: int
    config_hash: str
    excluded: Tuple[int, ...] = ()


def rmse(
    estimates,
    truth: GroundTruth,
    assignment: Sequence[int],
    position_index: Tuple[int, int] = (0, 1),
) -> Tuple[np.ndarray, float]:
    """
    Position RMSE of track estimates against their assigned targets.

    Args:
        estimates: (tracks, steps, n) posterior means for steps 1..steps
        truth: Ground truth with states for steps 0..steps
        assignment: target index of each track

    Returns:
        tuple: (per-step RMSE over tracks, mean over steps)

    Raises:
        ExperimentError: On mismatched lengths
    """
    est = np.asarray(estimates, dtype=float)
    assignment = list(assignment)
    if est.ndim != 3 or est.shape[0] != len(assignment) or est.shape[1] != truth.steps:
        raise ExperimentError(
            f"Estimates of shape {est.shape} do not match {len(assignment)} tracks over {truth.steps} steps"
        )
    idx = list(position_index)
    true_positions = truth.states[assignment][:, 1:, :][:, :, idx]
    squared = np.sum((est[:, :, idx] - true_positions) ** 2, axis=2)
    series = np.sqrt(np.mean(squared, axis=0))
    return series, float(np.mean(series))


def _stderr(values: np.ndarray, axis: int = 0):
    n = values.shape[axis]
    if n < 2:
        return np.zeros(values.shape[1:]) if values.ndim > 1 else 0.0
    return np.std(values, axis=axis, ddof=1) / np.sqrt(n)


def run_filter(
    spec: ExperimentSpec,
    truth: GroundTruth,
    measurements: Sequence[MeasurementSet],
    backend: Backend,
    record_covariances: bool = False,
) -> BackendTrace:
    """
    Track every target through the measurement sequence with one backend.

    Tracks start at the true initial states. A backend whose model leaves out
    the noise states starts from the leading block of state and prior.
    """
    model = spec.filter_model(backend)
    if backend is Backend.ID_JPDAF and spec.perturb_q:
        model = model.with_noise(Q=model.Q * (1.0 + spec.perturb_q))
    cfg = spec.association_config()
    tol = spec.tolerances
    n = model.n
    cov0 = spec.initial_cov()[:n, :n]
    tracks = [init_track(t, truth.states[t, 0, :n], cov0, model, backend, tol) for t in range(truth.targets)]

    covariances = []
    for mset in measurements:
        try:
            tracks = jpdaf_step(tracks, mset, cfg, backend, tol)
        except IllConditionedError as e:
            logger.warning("%s diverged at step %d: %s", backend.value, mset.step, e)
            return BackendTrace(
                None,
                diverged=True,
                divergence_step=mset.step,
                underflows=sum(t.underflows for t in tracks),
                message=str(e),
            )
        if record_covariances:
            covariances.append([t.estimate.moment().cov for t in tracks])

    estimates = np.array([np.array(t.history) for t in tracks])
    series, _ = rmse(estimates, truth, range(truth.targets), spec.effective_scenario().position_index)
    return BackendTrace(
        series,
        underflows=sum(t.underflows for t in tracks),
        covariances=np.array(covariances) if record_covariances else None,
    )


def run_trial(spec: ExperimentSpec, trial_index: int) -> TrialResult:
    """One seed: generate the scenario once and run every backend on it."""
    seed = derive_seed(spec.base_seed, trial_index)
    logger.debug("Trial %d starting (seed %d)", trial_index, seed)
    truth, measurements = generate_scenario(spec.effective_scenario(), seed)
    record = spec.kind is ExperimentKind.EQUIVALENCE
    traces = {backend: run_filter(spec, truth, measurements, backend, record) for backend in spec.backends}
    logger.debug("Trial %d finished", trial_index)
    return TrialResult(trial_index, seed, traces)


def _trial_worker(args) -> TrialResult:
    spec, index = args
    return run_trial(spec, index)


def diverged_trials(results: Sequence[TrialResult]) -> Tuple[int, ...]:
    """Trials where any backend aborted; they are left out of every backend's means."""
    return tuple(r.trial for r in results if any(t.diverged for t in r.traces.values()))


def _summarize(results: Sequence[TrialResult], backend: Backend, steps: int) -> BackendSummary:
    excluded = set(diverged_trials(results))
    traces = [r.traces[backend] for r in results]
    valid = [r.traces[backend].rmse for r in results if r.trial not in excluded]
    divergences = sum(t.diverged for t in traces)
    underflows = sum(t.underflows for t in traces)
    if not valid:
        nan = np.full(steps, np.nan)
        return BackendSummary(nan, nan, float("nan"), float("nan"), 0, divergences, underflows)
    stacked = np.array(valid)
    scalars = stacked.mean(axis=1)
    return BackendSummary(
        series=stacked.mean(axis=0),
        series_stderr=_stderr(stacked),
        mean_rmse=float(scalars.mean()),
        stderr=float(_stderr(scalars)),
        trials_used=len(valid),
        divergences=divergences,
        underflows=underflows,
    )


def run_monte_carlo(spec: ExperimentSpec) -> RunResult:
    """
    Run trials base_seed ^ 0 .. base_seed ^ (trials - 1) and aggregate.

    Trials run in a process pool when spec.threads > 1; results are merged by
    trial index, so the aggregate does not depend on completion order.
    """
    start = time.perf_counter()
    jobs = [(spec, i) for i in range(spec.trials)]
    progress = dict(total=spec.trials, desc=spec.kind.value, disable=not spec.progress, leave=False)
    if spec.threads > 1 and spec.trials > 1:
        with ProcessPoolExecutor(max_workers=spec.threads) as pool:
            results = list(tqdm(pool.map(_trial_worker, jobs), **progress))
    else:
        results = [_trial_worker(job) for job in tqdm(jobs, **progress)]
    results.sort(key=lambda r: r.trial)

    summaries = {backend: _summarize(results, backend, spec.steps) for backend in spec.backends}
    for backend, summary in summaries.items():
        if summary.divergences:
            logger.warning("%s diverged in %d of %d trials", backend.value, summary.divergences, spec.trials)
    excluded = diverged_trials(results)
    if excluded:
        logger.warning("%d of %d trials left out of the RMSE means", len(excluded), spec.trials)
    return RunResult(
        summaries, tuple(results), time.perf_counter() - start, spec.base_seed, config_hash(spec), excluded
    )


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def to_jsonable(value):
    """Enums, numpy scalars and arrays, Paths and nested containers as plain JSON values."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, dict):
        return {str(to_jsonable(k)): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def config_hash(spec: ExperimentSpec) -> str:
    """sha256 of the spec's canonical JSON, first 16 hex chars; execution settings excluded."""
    data = to_jsonable(asdict(spec))
    for key in ("threads", "progress"):
        data.pop(key, None)
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence[Any]], metadata: Mapping[str, Any]) -> Tuple[Path, Path]:
    """
    Write a CSV (header row, 17 significant digits) and a JSON sidecar next to it.

    Returns:
        tuple: (csv path, sidecar path)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])

    meta_path = path.with_suffix(".meta.json")
    with open(meta_path, "w") as f:
        json.dump({"rmse_averaging": RMSE_AVERAGING, **to_jsonable(dict(metadata))}, f, indent=2, sort_keys=True)
    return path, meta_path


def _metadata(spec: ExperimentSpec, wall_time: float, **extra) -> Dict[str, Any]:
    return {
        "kind": spec.kind.value,
        "config_hash": config_hash(spec),
        "base_seed": spec.base_seed,
        "trials": spec.trials,
        "steps": spec.steps,
        "backends": [b.value for b in spec.backends],
        "wall_time": round(wall_time, 3),
        **extra,
    }


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EquivalenceReport:
    """Deviation between the two backends; steps are 1-based."""

    max_rmse_deviation: float
    max_cov_deviation: float
    mean_cov_deviation: float
    first_failing_step: Optional[int]
    passed: bool
    tolerance: float
    step_rmse_deviation: np.ndarray = field(repr=False)
    step_cov_deviation: np.ndarray = field(repr=False)
    divergences: int = 0


@dataclass(frozen=True, eq=False)
class ExperimentOutcome:
    kind: ExperimentKind
    header: Tuple[str, ...]
    rows: List[Tuple[Any, ...]]
    summary: Dict[str, Any]
    csv_path: Optional[Path] = None
    meta_path: Optional[Path] = None
    failures: List[str] = field(default_factory=list)


COLUMN_NAMES = {Backend.JPDAF: "jpdaf", Backend.ID_JPDAF: "id"}


def _backend_columns(spec: ExperimentSpec, suffixes=("rmse", "stderr")) -> List[str]:
    return [f"{suffix}_{COLUMN_NAMES[b]}" for b in spec.backends for suffix in suffixes]


def equivalence_report(spec: ExperimentSpec, result: RunResult) -> EquivalenceReport:
    """Per-step RMSE and covariance deviation between the backends, maximized over trials."""
    steps = spec.steps
    rmse_dev = np.zeros(steps)
    cov_dev = np.zeros(steps)
    cov_sum, cov_count, divergences = 0.0, 0, 0
    for trial in result.trials:
        a, b = trial.traces[Backend.JPDAF], trial.traces[Backend.ID_JPDAF]
        if a.diverged or b.diverged:
            divergences += 1
            continue
        rmse_dev = np.maximum(rmse_dev, np.abs(a.rmse - b.rmse))
        diff = np.abs(a.covariances - b.covariances).reshape(steps, -1)
        cov_dev = np.maximum(cov_dev, diff.max(axis=1))
        cov_sum += float(diff.sum())
        cov_count += diff.size

    failing = np.flatnonzero((rmse_dev > spec.tolerance) | (cov_dev > spec.tolerance))
    first = int(failing[0]) + 1 if failing.size else None
    return EquivalenceReport(
        max_rmse_deviation=float(rmse_dev.max(initial=0.0)),
        max_cov_deviation=float(cov_dev.max(initial=0.0)),
        mean_cov_deviation=cov_sum / cov_count if cov_count else 0.0,
        first_failing_step=first,
        passed=first is None and divergences == 0,
        tolerance=spec.tolerance,
        step_rmse_deviation=rmse_dev,
        step_cov_deviation=cov_dev,
        divergences=divergences,
    )


def experiment_equivalence(spec: ExperimentSpec) -> Tuple[ExperimentOutcome, EquivalenceReport]:
    """White-noise scenario through both backends; reports deviations and pass/fail."""
    if spec.kind is not ExperimentKind.EQUIVALENCE:
        raise ExperimentError(f"Expected an equivalence spec, got {spec.kind.value}")
    result = run_monte_carlo(spec)
    report = equivalence_report(spec, result)
    j, i = result.summaries[Backend.JPDAF], result.summaries[Backend.ID_JPDAF]
    rows = [
        (k + 1, j.series[k], i.series[k], report.step_rmse_deviation[k], report.step_cov_deviation[k])
        for k in range(spec.steps)
    ]
    header = ("step", "rmse_jpdaf", "rmse_id", "rmse_deviation", "cov_deviation")
    summary = {
        "max_rmse_deviation": report.max_rmse_deviation,
        "max_cov_deviation": report.max_cov_deviation,
        "mean_cov_deviation": report.mean_cov_deviation,
        "first_failing_step": report.first_failing_step,
        "passed": report.passed,
        "tolerance": report.tolerance,
        "divergences": report.divergences,
        "excluded_trials": len(result.excluded),
        "wall_time": result.wall_time,
    }
    return ExperimentOutcome(spec.kind, header, rows, summary), report


def _sweep(spec: ExperimentSpec, make_noise) -> Tuple[List[Tuple[Any, ...]], float, List[int]]:
    """Rows per grid value, total wall time and the number of trials left out at each value."""
    rows, wall, excluded = [], 0.0, []
    for value in spec.grid:
        noise = make_noise(value)
        result = run_monte_carlo(replace(spec, noise_true=noise, noise_filter=noise))
        wall += result.wall_time
        excluded.append(len(result.excluded))
        row = [value]
        for backend in spec.backends:
            s = result.summaries[backend]
            row.extend([s.mean_rmse, s.stderr])
        row.extend(result.summaries[b].divergences for b in spec.backends)
        rows.append(tuple(row))
        logger.info("%s point %g done in %.1fs", spec.kind.value, value, result.wall_time)
    return rows, wall, excluded


def _base_noise(spec: ExperimentSpec) -> ColoredNoiseSpec:
    if spec.noise_true is not None:
        return spec.noise_true
    if spec.scenario.noise is not None:
        return spec.scenario.noise
    raise ExperimentError(f"{spec.kind.value} needs a colored scenario")


def experiment_rho_sweep(spec: ExperimentSpec) -> ExperimentOutcome:
    """Sweep rho over the grid; both filters assume the true (rho, sigma)."""
    sigma = _base_noise(spec).sigma
    rows, wall, excluded = _sweep(spec, lambda rho: ColoredNoiseSpec(rho, sigma))
    header = ("rho", *_backend_columns(spec), *_backend_columns(spec, ("divergences",)))
    return ExperimentOutcome(spec.kind, header, rows, {"sigma": sigma, "excluded_trials": excluded, "wall_time": wall})


def experiment_sigma_sweep(spec: ExperimentSpec) -> ExperimentOutcome:
    """Sweep sigma over the grid at fixed rho."""
    rho = _base_noise(spec).rho
    rows, wall, excluded = _sweep(spec, lambda sigma: ColoredNoiseSpec(rho, sigma))
    header = ("sigma", *_backend_columns(spec), *_backend_columns(spec, ("divergences",)))
    return ExperimentOutcome(spec.kind, header, rows, {"rho": rho, "excluded_trials": excluded, "wall_time": wall})


def _series_outcome(spec: ExperimentSpec, result: RunResult, summary: Dict[str, Any]) -> ExperimentOutcome:
    rows = []
    for k in range(spec.steps):
        row = [k + 1]
        for backend in spec.backends:
            s = result.summaries[backend]
            row.extend([s.series[k], s.series_stderr[k]])
        rows.append(tuple(row))
    summary = {
        **summary,
        **{f"mean_rmse_{b.value}": result.summaries[b].mean_rmse for b in spec.backends},
        **{f"divergences_{b.value}": result.summaries[b].divergences for b in spec.backends},
        "excluded_trials": len(result.excluded),
        "wall_time": result.wall_time,
    }
    return ExperimentOutcome(spec.kind, ("step", *_backend_columns(spec)), rows, summary)


def experiment_mismatch(spec: ExperimentSpec) -> ExperimentOutcome:
    """Per-step RMSE when the filters assume (rho, sigma) different from the truth."""
    if spec.kind is not ExperimentKind.MISMATCH:
        raise ExperimentError(f"Expected a mismatch spec, got {spec.kind.value}")
    result = run_monte_carlo(spec)
    summary = {
        "rho_true": spec.noise_true.rho,
        "sigma_true": spec.noise_true.sigma,
        "rho_filter": spec.noise_filter.rho,
        "sigma_filter": spec.noise_filter.sigma,
    }
    return _series_outcome(spec, result, summary)


def single_run(spec: ExperimentSpec, out_dir=None) -> ExperimentOutcome:
    """
    One trial's per-step RMSE for each backend.

    When out_dir is given the scenario's truth and measurements are exported
    next to the series.
    """
    one = replace(spec, trials=1, threads=1)
    result = run_monte_carlo(one)
    if out_dir is not None:
        export_csv(*generate_scenario(one.effective_scenario(), derive_seed(one.base_seed, 0)), out_dir)
    return _series_outcome(one, result, {"seed": derive_seed(one.base_seed, 0)})


# ---------------------------------------------------------------------------
# Acceptance checks: each returns a list of failure descriptions
# ---------------------------------------------------------------------------


def check_equivalence(report: EquivalenceReport) -> List[str]:
    if report.passed:
        return []
    if report.divergences:
        return [f"{report.divergences} trials diverged"]
    return [
        f"backends deviate from step {report.first_failing_step}: "
        f"rmse {report.max_rmse_deviation:.3e}, cov {report.max_cov_deviation:.3e} > {report.tolerance:.1e}"
    ]


def _columns(outcome: ExperimentOutcome) -> Dict[str, np.ndarray]:
    return {name: np.array([row[i] for row in outcome.rows], dtype=float) for i, name in enumerate(outcome.header)}


def _separated(cols, i: int) -> bool:
    return cols["rmse_id"][i] + 2 * cols["stderr_id"][i] < cols["rmse_jpdaf"][i] - 2 * cols["stderr_jpdaf"][i]


def check_rho_sweep(outcome: ExperimentOutcome) -> List[str]:
    """ID below JPDAF with separated 2-stderr intervals at rho 0.5, 0.8, 0.9; ratio <= 0.7 at 0.9."""
    cols = _columns(outcome)
    failures = []
    for i, rho in enumerate(cols["rho"]):
        if not any(np.isclose(rho, r) for r in (0.5, 0.8, 0.9)):
            continue
        if not _separated(cols, i):
            failures.append(f"rho={rho:g}: ID-JPDAF not below JPDAF with separated intervals")
        if np.isclose(rho, 0.9) and not cols["rmse_id"][i] <= 0.7 * cols["rmse_jpdaf"][i]:
            failures.append(f"rho=0.9: ratio {cols['rmse_id'][i] / cols['rmse_jpdaf'][i]:.3f} > 0.7")
    return failures


def check_mismatch(outcome: ExperimentOutcome, min_ratio: float = 1.5) -> List[str]:
    cols = _columns(outcome)
    ratio = cols["rmse_jpdaf"][-1] / cols["rmse_id"][-1]
    if not ratio >= min_ratio:
        return [f"final-step RMSE ratio JPDAF/ID-JPDAF {ratio:.3f} < {min_ratio}"]
    return []


def check_sigma_sweep(outcome: ExperimentOutcome) -> List[str]:
    """ID <= JPDAF for sigma >= 30 and separated intervals at the largest sigma."""
    cols = _columns(outcome)
    failures = [
        f"sigma={s:g}: ID-JPDAF above JPDAF"
        for i, s in enumerate(cols["sigma"])
        if s >= 30.0 and not cols["rmse_id"][i] <= cols["rmse_jpdaf"][i]
    ]
    if not _separated(cols, len(cols["sigma"]) - 1):
        failures.append(f"sigma={cols['sigma'][-1]:g}: intervals not separated")
    return failures


CHECKS = {
    ExperimentKind.RHO_SWEEP: check_rho_sweep,
    ExperimentKind.MISMATCH: check_mismatch,
    ExperimentKind.SIGMA_SWEEP: check_sigma_sweep,
}


# ---------------------------------------------------------------------------
# Specs and dispatch
# ---------------------------------------------------------------------------


def default_spec(kind, paper_scale: bool = False, case: int = 1, **overrides) -> ExperimentSpec:
    """
    Preset spec for an experiment kind at desk or published scale.

    Keyword overrides apply to ExperimentSpec fields; `steps` applies to the scenario.
    """
    kind = ExperimentKind(kind)
    scale = PAPER_SCALE if paper_scale else DESK_SCALE
    steps = overrides.pop("steps", None)
    if kind is ExperimentKind.EQUIVALENCE:
        trials, default_steps = scale["equivalence"]
        scenario = white_noise_scenario(steps=steps or default_steps)
        values = dict(kind=kind, scenario=scenario, trials=trials)
    else:
        trials, default_steps = scale["colored"]
        values = dict(kind=kind, trials=trials)
        if kind is ExperimentKind.MISMATCH:
            if case not in MISMATCH_CASES:
                raise ExperimentError(f"Unknown mismatch case {case}")
            noise_true, noise_filter = MISMATCH_CASES[case]
            values.update(noise_true=noise_true, noise_filter=noise_filter)
        elif kind is ExperimentKind.SIGMA_SWEEP:
            values.update(grid=SIGMA_GRID, noise_true=ColoredNoiseSpec(SIGMA_SWEEP_RHO, 3.0))
        elif kind is ExperimentKind.RHO_SWEEP:
            values.update(grid=RHO_GRID)
        noise = values.get("noise_true") or ColoredNoiseSpec(0.9, 3.0)
        values["scenario"] = colored_noise_scenario(noise.rho, noise.sigma, steps=steps or default_steps)
        if kind is ExperimentKind.SINGLE_RUN:
            values["trials"] = 1
    values.update(overrides)
    return ExperimentSpec(**values)


def _noise_table(raw: Mapping[str, Any], name: str) -> ColoredNoiseSpec:
    unknown = set(raw) - {"rho", "sigma"}
    if unknown:
        raise ConfigError(f"Unknown keys for noise.{name}: {', '.join(sorted(unknown))}")
    try:
        return ColoredNoiseSpec(float(raw["rho"]), float(raw["sigma"]))
    except KeyError as e:
        raise ConfigError(f"noise.{name} needs {e}") from e


EXPERIMENT_KEYS = {
    "kind",
    "trials",
    "steps",
    "base_seed",
    "grid",
    "threads",
    "tolerance",
    "perturb_q",
    "prior_diag",
    "case",
    "classical_model",
}


def spec_from_config(
    kind, config: Mapping[str, Any], paper_scale: bool = False, case: Optional[int] = None
) -> ExperimentSpec:
    """
    Build a spec from a parsed config file layered on the preset for `kind`.

    Tables: [scenario], [association], [experiment], [noise.true],
    [noise.filter], [tolerances]. Unknown tables or keys raise ConfigError.
    """
    unknown_tables = set(config) - {"scenario", "association", "experiment", "noise", "tolerances"}
    if unknown_tables:
        raise ConfigError(f"Unknown config tables: {', '.join(sorted(unknown_tables))}")
    experiment = dict(config.get("experiment", {}))
    unknown = set(experiment) - EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"Unknown keys for experiment: {', '.join(sorted(unknown))}")

    kind = parse_kind(kind)
    if "kind" in experiment:
        try:
            file_kind = parse_kind(experiment.pop("kind"))
        except ExperimentError as e:
            raise ConfigError(str(e)) from e
        if file_kind is not kind:
            raise ConfigError(f"Config is for {file_kind.value}, not {kind.value}")

    file_case = int(experiment.pop("case", 1))
    spec = default_spec(kind, paper_scale=paper_scale, case=file_case if case is None else case)
    scenario = spec.scenario
    if "steps" in experiment:
        scenario = replace(scenario, steps=int(experiment.pop("steps")))
    if "scenario" in config:
        scenario = scenario_from_mapping(config["scenario"], base=scenario)

    updates: Dict[str, Any] = {"scenario": scenario}
    converters = {
        "trials": int,
        "base_seed": int,
        "threads": int,
        "tolerance": float,
        "perturb_q": float,
        "classical_model": ClassicalModel,
    }
    for key, value in experiment.items():
        try:
            updates[key] = converters[key](value) if key in converters else tuple(float(v) for v in value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad value for experiment.{key}: {value!r} ({e})") from e

    noise = config.get("noise", {})
    unknown = set(noise) - {"true", "filter"}
    if unknown:
        raise ConfigError(f"Unknown noise tables: {', '.join(sorted(unknown))}")
    if "true" in noise:
        updates["noise_true"] = _noise_table(noise["true"], "true")
    if "filter" in noise:
        updates["noise_filter"] = _noise_table(noise["filter"], "filter")
    if "association" in config:
        converters = {"p_d": float, "p_g": float, "clutter_density": float, "gate_gamma": float}
        updates["association"] = dataclass_from_mapping(AssociationConfig, config["association"], converters=converters)
    if "tolerances" in config:
        updates["tolerances"] = tolerances_from_mapping(config["tolerances"])

    try:
        return replace(spec, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e


def load_spec(kind, path=None, paper_scale: bool = False, case: Optional[int] = None) -> ExperimentSpec:
    config = load_config(path) if path is not None else {}
    return spec_from_config(kind, config, paper_scale=paper_scale, case=case)


def parse_kind(kind) -> ExperimentKind:
    """Accept command spellings ("rho-sweep") as well as kind values ("rho_sweep")."""
    try:
        return ExperimentKind(str(getattr(kind, "value", kind)).replace("-", "_"))
    except ValueError:
        choices = ", ".join(k.value.replace("_", "-") for k in ExperimentKind)
        raise ExperimentError(f"Unknown experiment '{kind}' (choose from {choices})") from None


def configure_spec(
    kind,
    config_path=None,
    paper_scale: bool = False,
    case: Optional[int] = None,
    trials: Optional[int] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    backend: str = "both",
    threads: Optional[int] = None,
    perturb_q: Optional[float] = None,
    classical_model: Optional[str] = None,
    progress: bool = False,
) -> ExperimentSpec:
    """
    Spec for a run: preset, then config file, then explicit overrides.

    Args:
        backend: "jpdaf", "id-jpdaf" or "both"
        classical_model: "white" or "augmented"
    """
    spec = load_spec(parse_kind(kind), config_path, paper_scale=paper_scale, case=case)
    updates: Dict[str, Any] = {"progress": progress}
    if trials is not None:
        updates["trials"] = int(trials)
    if steps is not None:
        updates["scenario"] = replace(spec.scenario, steps=int(steps))
    if seed is not None:
        updates["base_seed"] = int(seed)
    if threads is not None:
        updates["threads"] = int(threads)
    if perturb_q is not None:
        updates["perturb_q"] = float(perturb_q)
    if classical_model is not None:
        try:
            updates["classical_model"] = ClassicalModel(classical_model)
        except ValueError:
            raise ExperimentError(f"Unknown classical model '{classical_model}'") from None
    if backend != "both":
        try:
            updates["backends"] = (Backend(backend),)
        except ValueError:
            raise ExperimentError(f"Unknown backend '{backend}'") from None
    return replace(spec, **updates)


def run_experiment(spec: ExperimentSpec, out_dir=None, check: bool = False, name: Optional[str] = None) -> ExperimentOutcome:
    """
    Run an experiment, write its CSV and sidecar, and apply acceptance checks.

    The equivalence experiment is always checked; the sweeps and mismatch only
    when `check` is set.
    """
    out_dir = Path(out_dir) if out_dir is not None else OUT_DIR
    logger.info("Running %s: %d trials x %d steps", spec.kind.value, spec.trials, spec.steps)
    start = time.perf_counter()

    failures: List[str] = []
    if spec.kind is ExperimentKind.EQUIVALENCE:
        outcome, report = experiment_equivalence(spec)
        failures = check_equivalence(report)
    elif spec.kind is ExperimentKind.RHO_SWEEP:
        outcome = experiment_rho_sweep(spec)
    elif spec.kind is ExperimentKind.SIGMA_SWEEP:
        outcome = experiment_sigma_sweep(spec)
    elif spec.kind is ExperimentKind.MISMATCH:
        outcome = experiment_mismatch(spec)
    else:
        outcome = single_run(spec, out_dir / "scenario")
    if check and spec.kind in CHECKS and set(spec.backends) == set(ALL_BACKENDS):
        failures = CHECKS[spec.kind](outcome)

    wall = time.perf_counter() - start
    csv_path, meta_path = write_csv(
        out_dir / f"{name or spec.kind.value}.csv",
        outcome.header,
        outcome.rows,
        _metadata(spec, wall, summary=outcome.summary, failures=failures),
    )
    logger.info("%s finished in %.1fs: %s", spec.kind.value, wall, csv_path)
    for failure in failures:
        logger.warning("Acceptance: %s", failure)
    return replace(outcome, csv_path=csv_path, meta_path=meta_path, failures=failures)
