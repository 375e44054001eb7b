"""
id: scenario
tag: simulation

Ground truth and measurement generation.

Targets follow the variant's linear-Gaussian model. White scenarios add
independent N(0, sigma_v^2 I) noise to each detection; colored scenarios carry
AR(1) noise states in the truth and report position plus noise state.
Clutter is Poisson in count and uniform over the region of interest.
Every random draw comes from the trial's Philox generator, in a fixed order.
"""

import csv
import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, dataclass_from_mapping
from .filters import ColoredNoiseSpec, LinearGaussianModel, colored_model, ncvm_model

logger = logging.getLogger(__name__)

# Provenance label for clutter points in MeasurementSet.sources
CLUTTER = -1

WHITE_INITIAL_STATES = ((-400.0, -300.0, 1.0, 0.5), (400.0, 300.0, -1.0, -0.5))
# Two colored-scenario targets 22 m apart. With q_p = 100 per step both sit in
# one gate, and per-track association pulls both tracks onto one target.
CLOSE_COLORED_STATES = ((0.0, 1.0, 0.0, 1.0, 0.0, 0.0), (20.0, -1.0, 10.0, -1.0, 0.0, 0.0))

# x offset of the second colored target in the preset. The targets random-walk
# over kilometers; from this spacing their gates rarely meet within 2000 steps.
COLORED_TARGET_SPACING = 20_000.0
COLORED_INITIAL_STATES = (
    CLOSE_COLORED_STATES[0],
    (CLOSE_COLORED_STATES[1][0] + COLORED_TARGET_SPACING, *CLOSE_COLORED_STATES[1][1:]),
)


class Variant(str, Enum):
    WHITE = "white"
    COLORED = "colored"


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Scenario parameters.

    White variant: NCVM with step tau, acceleration noise sigma_u2 (m^2/s^4) and
    measurement noise sigma_v (m). Colored variant: per-axis kinematics with
    Q = diag(q_p, q_v, q_p, q_v) and AR(1) noise `noise`.
    roi is (x_min, x_max, y_min, y_max) in meters.
    """

    variant: Variant = Variant.WHITE
    initial_states: Tuple[Tuple[float, ...], ...] = WHITE_INITIAL_STATES
    steps: int = 100
    tau: float = 1.0
    sigma_u2: float = 0.01
    sigma_v: float = 10.0
    q_p: float = 100.0
    q_v: float = 10.0
    noise: Optional[ColoredNoiseSpec] = None
    roi: Tuple[float, float, float, float] = (-1000.0, 1000.0, -1000.0, 1000.0)
    p_d: float = 0.5
    p_s: float = 0.995
    clutter_mean: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "initial_states", tuple(tuple(map(float, s)) for s in self.initial_states))
        object.__setattr__(self, "roi", tuple(map(float, self.roi)))
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if len(self.roi) != 4 or not (self.roi[0] < self.roi[1] and self.roi[2] < self.roi[3]):
            raise ConfigError(f"Degenerate ROI {self.roi}")
        for name in ("p_d", "p_s"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if self.clutter_mean < 0.0:
            raise ConfigError(f"clutter_mean must be >= 0, got {self.clutter_mean}")
        if self.variant is Variant.COLORED and self.noise is None:
            raise ConfigError("Colored scenarios need a noise spec")
        if not self.initial_states:
            raise ConfigError("At least one target is required")
        n = self.truth_model().n
        if any(len(s) != n for s in self.initial_states):
            raise ConfigError(f"Initial states must have {n} components")

    @property
    def position_index(self) -> Tuple[int, int]:
        return (0, 1) if self.variant is Variant.WHITE else (0, 2)

    @property
    def roi_area(self) -> float:
        x0, x1, y0, y1 = self.roi
        return (x1 - x0) * (y1 - y0)

    @property
    def clutter_density(self) -> float:
        return self.clutter_mean / self.roi_area

    def truth_model(self) -> LinearGaussianModel:
        if self.variant is Variant.WHITE:
            return ncvm_model(self.tau, self.sigma_u2, self.sigma_v)
        return colored_model(self.tau, self.q_p, self.q_v, self.noise)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """
    states: (targets, steps + 1, n) true states for k = 0..steps
    alive: (targets, steps + 1) alive flags; each row is a prefix of True
    """

    states: np.ndarray
    alive: np.ndarray
    labels: Tuple[str, ...] = ()

    @property
    def targets(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.states.shape[1] - 1


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """
    Detections at one step.

    `sources` holds the emitting target id or CLUTTER per row. It is kept for
    diagnostics and export; filters read `positions` only.
    """

    step: int
    positions: np.ndarray
    sources: Tuple[int, ...] = field(default=(), repr=False)

    def __len__(self) -> int:
        return self.positions.shape[0]


def derive_seed(base: int, trial: int) -> int:
    """Seed of trial i: base XOR i."""
    return int(base) ^ int(trial)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _noise_factor(Q: np.ndarray) -> np.ndarray:
    # A with A A^T = Q, valid for PSD Q with zero blocks
    w, U = np.linalg.eigh(Q)
    return U * np.sqrt(np.clip(w, 0.0, None))


def generate_truth(cfg: ScenarioConfig, rng: np.random.Generator) -> GroundTruth:
    """
    Propagate every target for cfg.steps steps.

    Targets that die keep moving; only their detections stop. Draw order:
    process noise for all targets and steps, then survival.
    """
    model = cfg.truth_model()
    targets, n = len(cfg.initial_states), model.n
    noise = rng.standard_normal((targets, cfg.steps, n)) @ _noise_factor(model.Q).T

    states = np.empty((targets, cfg.steps + 1, n))
    states[:, 0, :] = np.array(cfg.initial_states)
    F_t = model.F.T
    for k in range(1, cfg.steps + 1):
        states[:, k, :] = states[:, k - 1, :] @ F_t + noise[:, k - 1, :]

    survives = rng.random((targets, cfg.steps)) < cfg.p_s
    alive = np.ones((targets, cfg.steps + 1), dtype=bool)
    alive[:, 1:] = np.cumprod(survives, axis=1).astype(bool)
    return GroundTruth(states, alive, model.state_labels)


def generate_measurements(
    truth: GroundTruth,
    cfg: ScenarioConfig,
    rng: np.random.Generator,
) -> List[MeasurementSet]:
    """
    Detections and clutter for steps 1..steps, shuffled per step.

    Returns:
        list: One MeasurementSet per step, index 0 holding step 1
    """
    ix, iy = cfg.position_index
    x0, x1, y0, y1 = cfg.roi
    sets: List[MeasurementSet] = []
    for k in range(1, truth.steps + 1):
        rows: List[np.ndarray] = []
        sources: List[int] = []
        for t in range(truth.targets):
            if not truth.alive[t, k] or rng.random() >= cfg.p_d:
                continue
            state = truth.states[t, k]
            position = np.array([state[ix], state[iy]])
            if cfg.variant is Variant.WHITE:
                position = position + cfg.sigma_v * rng.standard_normal(2)
            else:
                position = position + state[4:6]
            rows.append(position)
            sources.append(t)

        count = int(rng.poisson(cfg.clutter_mean))
        if count:
            clutter = np.column_stack([rng.uniform(x0, x1, count), rng.uniform(y0, y1, count)])
            rows.extend(clutter)
            sources.extend([CLUTTER] * count)

        positions = np.array(rows, dtype=float).reshape(len(rows), 2)
        order = rng.permutation(len(rows))
        sets.append(MeasurementSet(k, positions[order], tuple(sources[i] for i in order)))
    return sets


def generate_scenario(cfg: ScenarioConfig, seed: Optional[int] = None):
    """Truth and measurements for one seed (cfg.seed when not given)."""
    rng = make_rng(cfg.seed if seed is None else seed)
    truth = generate_truth(cfg, rng)
    return truth, generate_measurements(truth, cfg, rng)


def export_csv(truth: GroundTruth, measurements: Sequence[MeasurementSet], out_dir) -> Tuple[Path, Path]:
    """
    Write truth.csv (step, target_id, state columns) and measurements.csv
    (step, source, x, y) where source is a target id or "clutter".
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_path = out_dir / "truth.csv"
    meas_path = out_dir / "measurements.csv"

    with open(truth_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "target_id", "alive", *truth.labels])
        for k in range(truth.steps + 1):
            for t in range(truth.targets):
                writer.writerow([k, t, int(truth.alive[t, k]), *(f"{v:.17g}" for v in truth.states[t, k])])

    with open(meas_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "source", "x", "y"])
        for mset in measurements:
            for source, (x, y) in zip(mset.sources, mset.positions):
                label = "clutter" if source == CLUTTER else source
                writer.writerow([mset.step, label, f"{x:.17g}", f"{y:.17g}"])

    logger.info("Exported scenario to %s and %s", truth_path, meas_path)
    return truth_path, meas_path


def white_noise_scenario(**overrides) -> ScenarioConfig:
    """Two NCVM targets with white measurement noise and clutter."""
    return ScenarioConfig(**overrides)


def colored_noise_scenario(rho: float = 0.9, sigma: float = 3.0, **overrides) -> ScenarioConfig:
    """Two targets with AR(1) measurement noise, clean association by default."""
    values = dict(
        variant=Variant.COLORED,
        initial_states=COLORED_INITIAL_STATES,
        steps=2000,
        tau=0.05,
        noise=ColoredNoiseSpec(rho, sigma),
        p_d=1.0,
        p_s=1.0,
        clutter_mean=0.0,
    )
    values.update(overrides)
    return ScenarioConfig(**values)


def _states(raw) -> Tuple[Tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in state) for state in raw)


def _noise(raw) -> ColoredNoiseSpec:
    if isinstance(raw, ColoredNoiseSpec):
        return raw
    unknown = set(raw) - {"rho", "sigma"}
    if unknown:
        raise ConfigError(f"Unknown keys for noise: {', '.join(sorted(unknown))}")
    return ColoredNoiseSpec(float(raw["rho"]), float(raw["sigma"]))


SCENARIO_CONVERTERS = {
    "variant": Variant,
    "initial_states": _states,
    "steps": int,
    "noise": _noise,
    "roi": lambda raw: tuple(float(v) for v in raw),
    "seed": int,
    **{
        f.name: float
        for f in fields(ScenarioConfig)
        if f.name in ("tau", "sigma_u2", "sigma_v", "q_p", "q_v", "p_d", "p_s", "clutter_mean")
    },
}


def scenario_from_mapping(mapping: Mapping[str, Any], base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Apply a [scenario] config table on top of `base` (a white scenario by default)."""
    return dataclass_from_mapping(ScenarioConfig, mapping, base=base, converters=SCENARIO_CONVERTERS)
