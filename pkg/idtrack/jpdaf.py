"""
id: jpdaf
tag: association

Probabilistic data association and the mixture track update.

Each step runs predict -> gate -> associate -> update per track. Association
weights are normalized per track over the miss hypothesis and the gated
measurements. The classical backend does the algebra in moment form; the
influence-diagram backend gates, weighs and conditions in (B, V) form and
only forms the mixture covariance in moment form.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .config import LOG_UNDERFLOW, ConfigError, Tolerances, resolve_tolerances
from .filters import (
    Innovation,
    LinearGaussianModel,
    PreparedUpdate,
    StateEstimate,
    id_predict,
    initial_estimate,
    innovation,
    kf_predict,
    prepare_id_update,
    regularized,
    symmetrize,
)
from .gaussian_id import DeterministicDirectionError, GaussianID, MomentGaussian, cov_to_id, log_det, quad_form_inverse

logger = logging.getLogger(__name__)

# chi-squared threshold on d^2 for a 99% gate with 2 measurement dimensions
DEFAULT_GATE_GAMMA = float(chi2.ppf(0.99, 2))

LOG_2PI = math.log(2.0 * math.pi)


class Backend(str, Enum):
    """Which algebra a track is filtered with."""

    JPDAF = "jpdaf"
    ID_JPDAF = "id-jpdaf"


@dataclass(frozen=True)
class AssociationConfig:
    """
    Association priors.

    Fields:
        p_d: detection probability
        p_g: gate probability; None derives it from gate_gamma via the chi-squared CDF
        clutter_density: clutter spatial density lambda per m^2
        gate_gamma: chi-squared gate threshold on d^2
    """

    p_d: float = 0.5
    p_g: Optional[float] = None
    clutter_density: float = 0.0
    gate_gamma: float = DEFAULT_GATE_GAMMA

    def __post_init__(self):
        if not 0.0 < self.p_d <= 1.0:
            raise ConfigError(f"p_d must be in (0, 1], got {self.p_d}")
        if self.p_g is not None and not 0.0 < self.p_g <= 1.0:
            raise ConfigError(f"p_g must be in (0, 1], got {self.p_g}")
        if self.clutter_density < 0.0:
            raise ConfigError(f"clutter_density must be >= 0, got {self.clutter_density}")
        if not self.gate_gamma > 0.0:
            raise ConfigError(f"gate_gamma must be > 0, got {self.gate_gamma}")

    def gate_probability(self, m: int) -> float:
        if self.p_g is not None:
            return self.p_g
        return float(chi2.cdf(self.gate_gamma, m))


class GatedMeasurement(NamedTuple):
    index: int
    z: np.ndarray
    d2: float


@dataclass(frozen=True, eq=False)
class AssociationWeights:
    """Miss weight beta_0 and one weight per gated measurement, summing to 1."""

    miss: float
    weights: np.ndarray
    indices: Tuple[int, ...] = ()
    underflow: bool = False

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.miss], self.weights])


@dataclass(frozen=True, eq=False)
class Prediction:
    """
    A track predicted to the current step.

    The classical backend carries the moment-form Innovation; the ID backend
    carries the PreparedUpdate with the gate form of S.
    """

    estimate: StateEstimate
    predicted_measurement: np.ndarray
    innovation: Optional[Innovation] = None
    update: Optional[PreparedUpdate] = None


@dataclass(frozen=True, eq=False)
class Track:
    """
    One target's track.

    Fields:
        track_id: index of the target the track was initialized on
        estimate: latest posterior (moment form or ID form per backend)
        model: the exact model; the classical backend regularizes it at use
        alive: existence flag; tracks are never deleted and coast when unobserved
        history: posterior means, one per step filtered
        underflows: steps where every association likelihood underflowed
        prediction: set between predict_track and jpdaf_track_update
    """

    track_id: int
    estimate: StateEstimate
    model: LinearGaussianModel
    alive: bool = True
    history: Tuple[np.ndarray, ...] = ()
    underflows: int = 0
    prediction: Optional[Prediction] = field(default=None, repr=False)


def init_track(
    track_id: int,
    mean,
    cov,
    model: LinearGaussianModel,
    backend: Backend,
    tol: Optional[Tolerances] = None,
) -> Track:
    est = initial_estimate(mean, cov, model, as_id=Backend(backend) is Backend.ID_JPDAF, tol=tol)
    return Track(track_id, est, model)


def _positions(measurements) -> np.ndarray:
    # A MeasurementSet or a bare (M, m) array of positions.
    return np.asarray(getattr(measurements, "positions", measurements), dtype=float)


def predict_track(track: Track, backend: Backend, tol: Optional[Tolerances] = None) -> Track:
    """
    Stage one of the pipeline: time update plus the innovation quantities.

    Raises:
        IllConditionedError: Classical backend only
    """
    tol = resolve_tolerances(tol)
    if Backend(backend) is Backend.JPDAF:
        model = regularized(track.model, tol.epsilon_r)
        est = kf_predict(track.estimate, model)
        inn = innovation(est, model, tol)
        prediction = Prediction(est, inn.predicted, innovation=inn)
    else:
        est = id_predict(track.estimate, track.model, tol)
        update = prepare_id_update(est, track.model, tol)
        prediction = Prediction(est, update.predicted, update=update)
    return replace(track, prediction=prediction)


def _require_prediction(track: Track) -> Prediction:
    if track.prediction is None:
        raise ValueError(f"Track {track.track_id} has not been predicted")
    return track.prediction


def gate(
    track: Track,
    measurements,
    cfg: AssociationConfig,
    backend: Backend,
    tol: Optional[Tolerances] = None,
) -> List[GatedMeasurement]:
    """
    Measurements with d^2 <= gate_gamma, in measurement-list order.

    The ID backend computes d^2 with quad_form_inverse on the gate form of S;
    a residual off the support of a degenerate S is never gated.
    """
    prediction = _require_prediction(track)
    gated: List[GatedMeasurement] = []
    for j, z in enumerate(_positions(measurements)):
        if Backend(backend) is Backend.JPDAF:
            d2 = prediction.innovation.mahalanobis(z)
        else:
            update = prediction.update
            try:
                d2 = quad_form_inverse(update.gate_form, update.residual(z), tol)
            except DeterministicDirectionError:
                logger.debug("Measurement %d is off the support of track %d's gate", j, track.track_id)
                continue
        if d2 <= cfg.gate_gamma:
            gated.append(GatedMeasurement(j, np.asarray(z, dtype=float), d2))
    return gated


def _gate_log_det(gate_form: GaussianID, tol: Tolerances) -> float:
    # A deterministic measurement direction counts as variance epsilon_r, the
    # floor the classical backend puts under an exact measurement.
    v = gate_form.cond_vars
    if np.all(v > 0.0):
        return log_det(gate_form)
    return float(np.sum(np.log(np.where(v > 0.0, v, tol.epsilon_r))))


def association_probabilities(
    track: Track,
    gated: Sequence[GatedMeasurement],
    cfg: AssociationConfig,
    backend: Backend,
    tol: Optional[Tolerances] = None,
) -> AssociationWeights:
    """
    Per-track association weights.

    beta_j is proportional to N(z_j; H x, S) P_D P_G for gated measurements and
    beta_0 to (1 - P_D P_G) lambda, normalized in the log domain. log det S is
    sum log V_j in the ID backend.
    """
    if not gated:
        return AssociationWeights(1.0, np.zeros(0))

    prediction = _require_prediction(track)
    m = prediction.predicted_measurement.size
    if Backend(backend) is Backend.JPDAF:
        logdet = prediction.innovation.log_det
    else:
        logdet = _gate_log_det(prediction.update.gate_form, resolve_tolerances(tol))

    d2 = np.array([g.d2 for g in gated])
    log_likelihood = -0.5 * (d2 + logdet + m * LOG_2PI)
    indices = tuple(g.index for g in gated)
    if np.all(log_likelihood < LOG_UNDERFLOW):
        logger.warning(
            "All %d association likelihoods underflowed for track %d; treating as a miss",
            len(gated),
            track.track_id,
        )
        return AssociationWeights(1.0, np.zeros(len(gated)), indices, underflow=True)

    p_dg = cfg.p_d * cfg.gate_probability(m)
    with np.errstate(divide="ignore"):
        log_detect = np.log(p_dg)
        log_miss = np.log(1.0 - p_dg) + np.log(cfg.clutter_density)
    log_terms = np.concatenate([[log_miss], log_likelihood + log_detect])
    beta = np.exp(log_terms - logsumexp(log_terms))
    beta /= beta.sum()
    return AssociationWeights(float(beta[0]), beta[1:], indices)


def jpdaf_track_update(
    track: Track,
    gated: Sequence[GatedMeasurement],
    beta: AssociationWeights,
    backend: Backend,
    tol: Optional[Tolerances] = None,
) -> Track:
    """
    Mixture update.

    mean = x + sum_j beta_j e_j
    cov  = beta_0 P + (1 - beta_0) P~ + sum_j beta_j e_j e_j^T - e e^T
    with e_j the shift measurement j alone would apply and e = sum_j beta_j e_j.
    """
    prediction = _require_prediction(track)
    predicted = prediction.estimate
    underflows = track.underflows + int(beta.underflow)

    if not gated or beta.miss == 1.0:
        return replace(
            track,
            estimate=predicted,
            history=track.history + (predicted.mean,),
            underflows=underflows,
            prediction=None,
        )

    prior = predicted.moment()
    if Backend(backend) is Backend.JPDAF:
        inn = prediction.innovation
        model = regularized(track.model, resolve_tolerances(tol).epsilon_r)
        shifts = np.array([inn.K @ (g.z - inn.predicted) for g in gated])
        posterior_cov = symmetrize((np.eye(model.n) - inn.K @ model.H) @ prior.cov)
    else:
        update = prediction.update
        shifts = np.array([update.absorb(g.z).mean - prior.mean for g in gated])
        posterior_cov = update.posterior_moment().cov

    weights = beta.weights
    combined = weights @ shifts
    spread = (shifts.T * weights) @ shifts - np.outer(combined, combined)
    mean = prior.mean + combined
    cov = symmetrize(beta.miss * prior.cov + (1.0 - beta.miss) * posterior_cov + spread)

    belief = MomentGaussian(mean, cov)
    if Backend(backend) is Backend.ID_JPDAF:
        belief = cov_to_id(belief, labels=predicted.labels, tol=tol)
    estimate = StateEstimate(belief, predicted.labels, predicted.k)
    return replace(
        track,
        estimate=estimate,
        history=track.history + (mean,),
        underflows=underflows,
        prediction=None,
    )


def jpdaf_step(
    tracks: Sequence[Track],
    measurements,
    cfg: AssociationConfig,
    backend: Backend,
    tol: Optional[Tolerances] = None,
) -> List[Track]:
    """
    Advance every track one step against a shared measurement set.

    Raises:
        IllConditionedError: Classical backend could not factor S for some track
    """
    advanced = []
    for track in tracks:
        predicted = predict_track(track, backend, tol)
        gated = gate(predicted, measurements, cfg, backend, tol)
        beta = association_probabilities(predicted, gated, cfg, backend, tol)
        advanced.append(jpdaf_track_update(predicted, gated, beta, backend, tol))
    return advanced
