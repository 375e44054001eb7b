"""
id: filters
tag: filtering

Single-track filtering.

Classical Kalman predict/update on MomentGaussian beliefs, the same recursion
carried out in influence-diagram form on GaussianID beliefs, and AR(1)
colored-noise state augmentation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cho_factor, cho_solve

from .config import EPSILON_R, ConfigError, IdtrackError, Tolerances, resolve_tolerances
from .gaussian_id import (
    DimensionError,
    GaussianID,
    MomentGaussian,
    absorb_evidence,
    cov_to_id,
    marginal,
    prepare_evidence,
    remove_node,
    stack,
)

logger = logging.getLogger(__name__)

# White-noise equivalence model
NCVM_LABELS = ("x1", "x2", "vx1", "vx2")

# Colored-noise model: kinematic block then the two noise states
COLORED_LABELS = ("x", "vx", "y", "vy", "nx", "ny")


class IllConditionedError(IdtrackError):
    """The classical update could not factor the innovation covariance."""


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def _matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """
    Linear-Gaussian system x_k = F x_{k-1} + w, z_k = H x_k + v.

    Fields:
        F, Q: n x n transition and process-noise covariance (per step of length tau)
        H, R: m x n measurement matrix and m x m measurement-noise covariance
        tau: step length in seconds
        state_labels: names of the state components, used as ID node labels
    """

    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    tau: float = 1.0
    state_labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        for name in ("F", "Q", "H", "R"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        n, m = self.F.shape[0], self.H.shape[0]
        if self.F.shape != (n, n) or self.Q.shape != (n, n):
            raise DimensionError(f"F {self.F.shape} and Q {self.Q.shape} must be {n}x{n}")
        if self.H.shape != (m, n) or self.R.shape != (m, m):
            raise DimensionError(f"H {self.H.shape} must be {m}x{n} and R {self.R.shape} {m}x{m}")
        for name in ("Q", "R"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(mat).max(initial=0.0))):
                raise DimensionError(f"{name} must be symmetric")
        labels = tuple(f"s{i}" for i in range(n)) if self.state_labels is None else tuple(self.state_labels)
        if len(labels) != n:
            raise DimensionError(f"{len(labels)} state labels for {n} states")
        object.__setattr__(self, "state_labels", labels)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def with_noise(self, Q=None, R=None) -> "LinearGaussianModel":
        return LinearGaussianModel(
            self.F,
            self.Q if Q is None else Q,
            self.H,
            self.R if R is None else R,
            self.tau,
            self.state_labels,
        )


@dataclass(frozen=True)
class ColoredNoiseSpec:
    """AR(1) measurement noise n_{k+1} = rho n_k + xi_k, xi_k ~ N(0, sigma^2)."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ConfigError(f"|rho| must be < 1, got {self.rho}")
        if self.sigma < 0.0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def stationary_variance(self) -> float:
        return self.sigma**2 / (1.0 - self.rho**2)


@dataclass(frozen=True, eq=False)
class StateEstimate:
    """
    A track's belief at step k, either in moment form or in ID form.

    `labels` names the state components in model order. An ID belief may hold
    them in a different node order after evidence entry; `moment()` and
    `mean` always answer in model order.
    """

    belief: Union[MomentGaussian, GaussianID]
    labels: Tuple[str, ...]
    k: int = 0

    @property
    def is_id(self) -> bool:
        return isinstance(self.belief, GaussianID)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def mean(self) -> np.ndarray:
        if self.is_id:
            return self.belief.mean_of(self.labels)
        return self.belief.mean

    def moment(self) -> MomentGaussian:
        if self.is_id:
            return self.belief.moment(order=self.labels)
        return self.belief

    def as_moment(self) -> "StateEstimate":
        return StateEstimate(self.moment(), self.labels, self.k)

    def as_id(self, tol: Optional[Tolerances] = None) -> "StateEstimate":
        if self.is_id:
            return self
        return StateEstimate(cov_to_id(self.belief, labels=self.labels, tol=tol), self.labels, self.k)


def initial_estimate(mean, cov, model: LinearGaussianModel, as_id: bool = False, tol=None) -> StateEstimate:
    belief = MomentGaussian(mean, cov)
    if belief.n != model.n:
        raise DimensionError(f"Initial state of size {belief.n} for a model of size {model.n}")
    est = StateEstimate(belief, model.state_labels, 0)
    return est.as_id(tol) if as_id else est


def _check_dims(est: StateEstimate, model: LinearGaussianModel) -> None:
    if est.n != model.n:
        raise DimensionError(f"Estimate has {est.n} states, model has {model.n}")


# ---------------------------------------------------------------------------
# Classical moment form
# ---------------------------------------------------------------------------


def kf_predict(est: StateEstimate, model: LinearGaussianModel) -> StateEstimate:
    """mean <- F mean, cov <- F cov F^T + Q."""
    _check_dims(est, model)
    g = est.moment()
    F = model.F
    cov = symmetrize(F @ g.cov @ F.T + model.Q)
    return StateEstimate(MomentGaussian(F @ g.mean, cov), est.labels, est.k + 1)


@dataclass(frozen=True, eq=False)
class Innovation:
    """Predicted measurement, innovation covariance S, gain K and the Cholesky factor of S."""

    predicted: np.ndarray
    S: np.ndarray
    K: np.ndarray
    factor: Tuple[np.ndarray, bool] = field(repr=False)

    def mahalanobis(self, z) -> float:
        y = np.asarray(z, dtype=float) - self.predicted
        return float(y @ cho_solve(self.factor, y))

    @property
    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.factor[0]))))


def factor_innovation(S: np.ndarray, tol: Optional[Tolerances] = None) -> Tuple[np.ndarray, bool]:
    """
    Cholesky-factor S, estimating its condition number from the pivot ratio.

    Raises:
        IllConditionedError: Factorization fails or (max/min pivot)^2 exceeds condition_limit
    """
    tol = resolve_tolerances(tol)
    try:
        factor = cho_factor(S, lower=True)
    except (LinAlgError, ValueError) as e:
        raise IllConditionedError(f"Innovation covariance is not positive definite: {e}") from e
    pivots = np.abs(np.diag(factor[0]))
    smallest = pivots.min()
    condition = np.inf if smallest == 0.0 else (pivots.max() / smallest) ** 2
    if not condition <= tol.condition_limit:
        logger.debug("Pivot ratios of S: %s", pivots)
        raise IllConditionedError(f"Innovation covariance condition estimate {condition:.3e} exceeds limit")
    return factor


def innovation(est: StateEstimate, model: LinearGaussianModel, tol: Optional[Tolerances] = None) -> Innovation:
    """
    Moment-form innovation quantities for a predicted estimate.

    S = H P H^T + R and K = P H^T S^-1, the latter by Cholesky solve.
    """
    _check_dims(est, model)
    g = est.moment()
    H = model.H
    S = symmetrize(H @ g.cov @ H.T + model.R)
    factor = factor_innovation(S, tol)
    K = cho_solve(factor, H @ g.cov).T
    return Innovation(H @ g.mean, S, K, factor)


def kf_update(
    est: StateEstimate,
    z,
    model: LinearGaussianModel,
    tol: Optional[Tolerances] = None,
) -> Tuple[StateEstimate, np.ndarray, np.ndarray, np.ndarray]:
    """
    Kalman measurement update.

    Returns:
        tuple: (posterior estimate, innovation y, innovation covariance S, gain K)

    Raises:
        IllConditionedError: S cannot be factored within the condition limit
    """
    inn = innovation(est, model, tol)
    g = est.moment()
    z = np.asarray(z, dtype=float)
    if z.shape != (model.m,):
        raise DimensionError(f"Measurement of shape {z.shape} for m={model.m}")
    y = z - inn.predicted
    mean = g.mean + inn.K @ y
    cov = symmetrize((np.eye(model.n) - inn.K @ model.H) @ g.cov)
    return StateEstimate(MomentGaussian(mean, cov), est.labels, est.k), y, inn.S, inn.K


# ---------------------------------------------------------------------------
# Influence-diagram form
# ---------------------------------------------------------------------------


def _tagged(labels: Sequence[str], tag: str) -> Tuple[str, ...]:
    return tuple(f"{label}@{tag}" for label in labels)


def id_predict(est: StateEstimate, model: LinearGaussianModel, tol: Optional[Tolerances] = None) -> StateEstimate:
    """
    Time update in influence-diagram form.

    The process noise Q is converted to (B_q, V_q) and stacked ahead of the
    prior state; the new state nodes are deterministic children with arcs
    w_i -> x_i' (weight 1) and x_k -> x_i' (weight F[i, k]). Removing the
    noise and prior-state nodes leaves the predicted state with mean F mean.
    """
    _check_dims(est, model)
    prior = est.as_id(tol).belief
    labels = est.labels
    n = model.n

    noise = cov_to_id(MomentGaussian(np.zeros(n), model.Q), labels=_tagged(labels, "noise"), tol=tol)
    old_labels = tuple(f"{label}@prior" for label in prior.labels)
    old = GaussianID(prior.mean, prior.arcs, prior.cond_vars, old_labels)
    sources = stack(noise, old)

    state_index = {label: i for i, label in enumerate(labels)}
    F = model.F
    cross = np.zeros((2 * n, n))
    cross[:n, :] = np.eye(n)
    for pos, label in enumerate(prior.labels):
        cross[n + pos, :] = F[:, state_index[label]]

    mean_new = F @ est.mean
    new = GaussianID(mean_new, np.zeros((n, n)), np.zeros(n), labels)
    augmented = stack(sources, new, cross)

    # Prior-state nodes first, last to first, then the noise nodes.
    current = augmented
    for label in reversed(old_labels):
        current = remove_node(current, label, tol)
    for label in reversed(noise.labels):
        current = remove_node(current, label, tol)
    return StateEstimate(current, labels, est.k + 1)


@dataclass(frozen=True, eq=False)
class PreparedUpdate:
    """
    A track's measurement update with the evidence structure already in place.

    Fields:
        prepared: state + measurement diagram after the evidence reversals
        gate_form: innovation covariance S as a GaussianID over the measurement nodes
        predicted: predicted measurement H mean (measurement order)
        measurement_labels: labels of the measurement nodes (measurement order)
    """

    prepared: GaussianID
    gate_form: GaussianID
    predicted: np.ndarray
    measurement_labels: Tuple[str, ...]
    state_labels: Tuple[str, ...]
    k: int
    tol: Optional[Tolerances] = None

    def absorb(self, z) -> StateEstimate:
        """Condition on measurement z; the prepared structure is reused."""
        z = np.asarray(z, dtype=float)
        if z.shape != (len(self.measurement_labels),):
            raise DimensionError(f"Measurement of shape {z.shape} for m={len(self.measurement_labels)}")
        values: Dict[str, float] = dict(zip(self.measurement_labels, z))
        posterior = absorb_evidence(self.prepared, values, self.tol)
        return StateEstimate(posterior, self.state_labels, self.k)

    def residual(self, z) -> np.ndarray:
        """Innovation reordered to the gate form's node order."""
        y = np.asarray(z, dtype=float) - self.predicted
        position = {label: i for i, label in enumerate(self.measurement_labels)}
        return y[[position[label] for label in self.gate_form.labels]]

    def posterior_moment(self) -> MomentGaussian:
        """Posterior covariance (I - KH) P, which does not depend on the measurement value."""
        return self.absorb(self.predicted).moment()


def prepare_id_update(
    est: StateEstimate,
    model: LinearGaussianModel,
    tol: Optional[Tolerances] = None,
) -> PreparedUpdate:
    """
    Build the state + measurement diagram and reverse arcs for evidence entry.

    Measurement nodes follow the state nodes. R is converted to (B_R, V_R);
    the cross block H^T (I - B_R) expresses z_j = (H x)_j + v_j in regression
    form, which is H^T with diag(R) variances when R is diagonal.
    """
    _check_dims(est, model)
    prior = est.as_id(tol).belief
    m = model.m
    measurement_labels = tuple(f"z{i}@{est.k}" for i in range(m))

    predicted = model.H @ est.mean
    noise = cov_to_id(MomentGaussian(predicted, model.R), labels=measurement_labels, tol=tol)

    state_index = {label: i for i, label in enumerate(est.labels)}
    h_rows = model.H.T[[state_index[label] for label in prior.labels], :]
    cross = h_rows @ (np.eye(m) - noise.arcs)
    augmented = stack(prior, noise, cross)

    gate_form = marginal(augmented, measurement_labels, tol)
    prepared = prepare_evidence(augmented, measurement_labels, tol)
    return PreparedUpdate(prepared, gate_form, predicted, measurement_labels, est.labels, est.k, tol)


def id_update(
    est: StateEstimate,
    z,
    model: LinearGaussianModel,
    tol: Optional[Tolerances] = None,
) -> Tuple[StateEstimate, GaussianID, np.ndarray]:
    """
    Measurement update in influence-diagram form.

    Returns:
        tuple: (posterior estimate, gate form of S, predicted measurement)
    """
    update = prepare_id_update(est, model, tol)
    return update.absorb(z), update.gate_form, update.predicted


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def augment_colored(
    base: LinearGaussianModel,
    spec: ColoredNoiseSpec,
    noise_labels: Optional[Sequence[str]] = None,
) -> LinearGaussianModel:
    """
    Append the AR(1) measurement-noise states to the state vector.

    F~ = blockdiag(F, rho I), Q~ = blockdiag(Q, sigma^2 I), H~ = [H, I], R~ = 0.
    """
    m = base.m
    labels = tuple(noise_labels) if noise_labels is not None else tuple(f"n{i}" for i in range(m))
    return LinearGaussianModel(
        block_diag(base.F, spec.rho * np.eye(m)),
        block_diag(base.Q, spec.sigma**2 * np.eye(m)),
        np.hstack([base.H, np.eye(m)]),
        np.zeros((m, m)),
        base.tau,
        base.state_labels + labels,
    )


def regularized(model: LinearGaussianModel, eps: float = EPSILON_R) -> LinearGaussianModel:
    """Replace an exactly-zero R by eps I so the classical S stays invertible."""
    if np.any(model.R != 0.0):
        return model
    return model.with_noise(R=eps * np.eye(model.m))


def ncvm_model(T: float = 1.0, sigma_u2: float = 0.01, sigma_v: float = 10.0) -> LinearGaussianModel:
    """
    Nearly-constant-velocity model with state [x1, x2, vx1, vx2].

    Q is the discretized white-acceleration block scaled by sigma_u2 and the
    position measurements carry white noise of standard deviation sigma_v.
    """
    eye = np.eye(2)
    F = np.block([[eye, T * eye], [np.zeros((2, 2)), eye]])
    Q = sigma_u2 * np.block([[T**3 / 3 * eye, T**2 / 2 * eye], [T**2 / 2 * eye, T * eye]])
    H = np.hstack([eye, np.zeros((2, 2))])
    R = sigma_v**2 * eye
    return LinearGaussianModel(F, Q, H, R, T, NCVM_LABELS)


def kinematic_model(tau: float, q_p: float, q_v: float) -> LinearGaussianModel:
    """Per-axis [position, velocity] model with diagonal Q = diag(q_p, q_v, q_p, q_v)."""
    axis = np.array([[1.0, tau], [0.0, 1.0]])
    F = block_diag(axis, axis)
    Q = np.diag([q_p, q_v, q_p, q_v])
    H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return LinearGaussianModel(F, Q, H, np.zeros((2, 2)), tau, COLORED_LABELS[:4])


def colored_model(
    tau: float,
    q_p: float,
    q_v: float,
    noise: ColoredNoiseSpec,
    q_n: Optional[float] = None,
) -> LinearGaussianModel:
    """
    Kinematic model augmented with AR(1) position-noise states.

    Args:
        q_n: When given, replaces sigma^2 as the process noise of the noise states
    """
    model = augment_colored(kinematic_model(tau, q_p, q_v), noise, COLORED_LABELS[4:])
    if q_n is not None:
        Q = model.Q.copy()
        Q[4:, 4:] = q_n * np.eye(2)
        model = model.with_noise(Q=Q)
    return model


def white_equivalent_model(tau: float, q_p: float, q_v: float, noise: ColoredNoiseSpec) -> LinearGaussianModel:
    """
    Kinematic model that treats AR(1) noise as white.

    R is the noise's stationary variance sigma^2 / (1 - rho^2) per axis; the
    correlation between steps is ignored.
    """
    return kinematic_model(tau, q_p, q_v).with_noise(R=noise.stationary_variance * np.eye(2))
