"""
id: gaussian_id
tag: algebra

Gaussian influence-diagram algebra.

A joint Gaussian is held as (mean, B, V): node j satisfies
    x_j - mu_j = sum_{k<j} B[k, j] (x_k - mu_k) + eps_j,   eps_j ~ N(0, V[j])
with B strictly upper triangular in node order. The mean is the unconditional
mean, so arc reversal and node removal never touch it; only evidence does.

Operations here are pure: every function returns a new GaussianID.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular

from .config import IdtrackError, Tolerances, resolve_tolerances

logger = logging.getLogger(__name__)

Node = Union[int, str]


class InfluenceDiagramError(IdtrackError):
    """Base class for influence-diagram algebra failures."""


class DimensionError(InfluenceDiagramError, ValueError):
    """Array shapes do not agree."""


class NodeIndexError(InfluenceDiagramError, IndexError):
    """A node index or label does not exist."""


class NotSymmetricError(InfluenceDiagramError, ValueError):
    """Covariance is not symmetric within tolerance."""


class NotPositiveSemidefiniteError(InfluenceDiagramError, ValueError):
    """Covariance has an eigenvalue below the negative tolerance."""


class ArcError(InfluenceDiagramError):
    """Arc reversal was asked for an absent arc or would create a cycle."""


class InconsistentEvidenceError(InfluenceDiagramError):
    """Evidence contradicts a deterministic node."""


class DeterministicDirectionError(InfluenceDiagramError):
    """A quantity is undefined off the support of a degenerate Gaussian."""


def _frozen(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if ndim == 2 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MomentGaussian:
    """Gaussian belief in (mean, covariance) form."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean, 1, "mean")
        cov = _frozen(self.cov, 2, "cov")
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.size

    def validate(self, tol: Optional[Tolerances] = None) -> None:
        """Raise unless cov is symmetric PSD within tolerance."""
        tol = resolve_tolerances(tol)
        cov = self.cov
        if cov.size == 0:
            return
        scale = np.linalg.norm(cov)
        if np.linalg.norm(cov - cov.T) > tol.symmetry * max(scale, np.finfo(float).tiny):
            raise NotSymmetricError("Covariance is not symmetric")
        lowest = np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]
        if lowest < -tol.eigen * np.linalg.norm(cov, 2):
            raise NotPositiveSemidefiniteError(f"Covariance is indefinite (eigenvalue {lowest:.3e})")


@dataclass(frozen=True, eq=False)
class GaussianID:
    """
    Gaussian belief in influence-diagram form.

    Fields:
        mean: unconditional mean, length n
        arcs: strictly upper-triangular n x n matrix B; B[k, j] weights arc k -> j
        cond_vars: conditional variances V, length n; zero marks a deterministic node
        labels: stable names of the semantic variable held at each index
    """

    mean: np.ndarray
    arcs: np.ndarray
    cond_vars: np.ndarray
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        mean = _frozen(self.mean, 1, "mean")
        arcs = _frozen(self.arcs, 2, "arcs")
        cond_vars = _frozen(self.cond_vars, 1, "cond_vars")
        n = mean.size
        if arcs.shape != (n, n) or cond_vars.size != n:
            raise DimensionError(
                f"Inconsistent sizes: mean {n}, arcs {arcs.shape}, cond_vars {cond_vars.size}"
            )
        if np.any(np.tril(arcs) != 0.0):
            raise InfluenceDiagramError("arcs must be strictly upper triangular")
        if np.any(cond_vars < 0.0):
            raise InfluenceDiagramError("cond_vars must be non-negative")
        if not (np.all(np.isfinite(arcs)) and np.all(np.isfinite(cond_vars))):
            raise InfluenceDiagramError("arcs and cond_vars must be finite")

        labels = tuple(f"n{i}" for i in range(n)) if self.labels is None else tuple(map(str, self.labels))
        if len(labels) != n or len(set(labels)) != n:
            raise DimensionError("labels must be unique and one per node")

        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "arcs", arcs)
        object.__setattr__(self, "cond_vars", cond_vars)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def _trusted(cls, mean, arcs, cond_vars, labels) -> "GaussianID":
        # Skips validation for arrays produced inside this module.
        obj = object.__new__(cls)
        for name, arr in (("mean", mean), ("arcs", arcs), ("cond_vars", cond_vars)):
            arr = np.asarray(arr, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(obj, name, arr)
        object.__setattr__(obj, "labels", tuple(labels))
        return obj

    @property
    def n(self) -> int:
        return self.mean.size

    def index(self, node: Node) -> int:
        """Resolve a node label or index to its current index."""
        if isinstance(node, (int, np.integer)):
            idx = int(node)
            if not 0 <= idx < self.n:
                raise NodeIndexError(f"Node index {idx} out of range for {self.n} nodes")
            return idx
        try:
            return self.labels.index(str(node))
        except ValueError:
            raise NodeIndexError(f"Unknown node label '{node}'") from None

    def parents(self, node: Node) -> np.ndarray:
        return np.flatnonzero(self.arcs[:, self.index(node)])

    def children(self, node: Node) -> np.ndarray:
        return np.flatnonzero(self.arcs[self.index(node), :])

    def moment(self, order: Optional[Sequence[str]] = None) -> MomentGaussian:
        """Moment form, optionally permuted to the given label order."""
        g = id_to_cov(self)
        if order is None:
            return g
        idx = [self.index(label) for label in order]
        return MomentGaussian(g.mean[idx], g.cov[np.ix_(idx, idx)])

    def mean_of(self, order: Sequence[str]) -> np.ndarray:
        return self.mean[[self.index(label) for label in order]]


def cov_to_id(
    g: MomentGaussian,
    labels: Optional[Sequence[str]] = None,
    tol: Optional[Tolerances] = None,
) -> GaussianID:
    """
    Convert a moment-form Gaussian to influence-diagram form.

    Forward sweep over leading principal blocks: the regression of node j on
    nodes 0..j-1 is solved through the (B, V) already built for those nodes,
    using (I - B) diag(V)^+ (I - B)^T as the generalized inverse. No full
    inverse is formed. Variances below variance_clamp * trace / n become
    exactly zero (deterministic nodes).

    Raises:
        NotSymmetricError, NotPositiveSemidefiniteError
    """
    tol = resolve_tolerances(tol)
    g.validate(tol)
    n = g.n
    cov = 0.5 * (g.cov + g.cov.T)
    arcs = np.zeros((n, n))
    v = np.zeros(n)
    if n == 0:
        return GaussianID._trusted(g.mean.copy(), arcs, v, labels or ())

    trace = float(np.trace(cov))
    floor = tol.variance_clamp * trace / n if trace > 0 else 0.0
    negative_limit = -tol.eigen * max(np.linalg.norm(cov, 2), np.finfo(float).tiny)

    for j in range(n):
        if j == 0:
            vj = cov[0, 0]
        else:
            lead = arcs[:j, :j]
            c = cov[:j, j]
            w = c - lead.T @ c
            w = np.divide(w, v[:j], out=np.zeros(j), where=v[:j] > 0.0)
            b = w - lead @ w
            arcs[:j, j] = b
            vj = cov[j, j] - c @ b
        if vj < floor:
            if vj < negative_limit:
                raise NotPositiveSemidefiniteError(f"Negative conditional variance {vj:.3e} at node {j}")
            if vj > 0.0:
                logger.warning("Clamped conditional variance %.3e at node %d to zero", vj, j)
            vj = 0.0
        v[j] = vj

    if labels is None:
        labels = tuple(f"n{i}" for i in range(n))
    return GaussianID(g.mean.copy(), arcs, v, tuple(labels))


def id_to_cov(id_: GaussianID) -> MomentGaussian:
    """
    Convert to moment form: cov = (I - B)^-T diag(V) (I - B)^-1.

    (I - B) is unit upper triangular, so a triangular solve suffices.
    """
    n = id_.n
    if n == 0:
        return MomentGaussian(np.zeros(0), np.zeros((0, 0)))
    eye = np.eye(n)
    u = solve_triangular(eye - id_.arcs, eye, lower=False, unit_diagonal=True)
    cov = u.T @ (id_.cond_vars[:, None] * u)
    return MomentGaussian(id_.mean.copy(), 0.5 * (cov + cov.T))


def stack(id_a: GaussianID, id_b: GaussianID, cross_arcs=None) -> GaussianID:
    """
    Stack two diagrams, id_a first, with arcs from id_a nodes into id_b nodes.

    Args:
        cross_arcs: n_a x n_b coefficient block, C[k, j] weights id_a[k] -> id_b[j];
            None means independent blocks

    Raises:
        DimensionError: On a cross block of the wrong shape or clashing labels
    """
    na, nb = id_a.n, id_b.n
    cross = np.zeros((na, nb)) if cross_arcs is None else np.asarray(cross_arcs, dtype=float)
    if cross.shape != (na, nb):
        raise DimensionError(f"cross_arcs must be {na}x{nb}, got {cross.shape}")
    labels = id_a.labels + id_b.labels
    if len(set(labels)) != len(labels):
        raise DimensionError("Stacked diagrams share node labels")

    arcs = np.zeros((na + nb, na + nb))
    arcs[:na, :na] = id_a.arcs
    arcs[:na, na:] = cross
    arcs[na:, na:] = id_b.arcs
    return GaussianID(
        np.concatenate([id_a.mean, id_b.mean]),
        arcs,
        np.concatenate([id_a.cond_vars, id_b.cond_vars]),
        labels,
    )


def _permuted(id_: GaussianID, order: Sequence[int]) -> GaussianID:
    order = np.asarray(order, dtype=int)
    return GaussianID._trusted(
        id_.mean[order],
        id_.arcs[np.ix_(order, order)],
        id_.cond_vars[order],
        [id_.labels[i] for i in order],
    )


def _deleted(id_: GaussianID, drop: Iterable[int], mean=None) -> GaussianID:
    drop = set(drop)
    keep = np.array([i for i in range(id_.n) if i not in drop], dtype=int)
    mean = id_.mean if mean is None else mean
    return GaussianID._trusted(
        mean[keep],
        id_.arcs[np.ix_(keep, keep)],
        id_.cond_vars[keep],
        [id_.labels[i] for i in keep],
    )


def _descendants_between(arcs: np.ndarray, i: int, j: int) -> List[int]:
    """Descendants of i among the nodes strictly between i and j."""
    found: List[int] = []
    for t in range(i + 1, j):
        if arcs[i, t] != 0.0 or (found and np.any(arcs[found, t] != 0.0)):
            found.append(t)
    return found


def reverse_arc(id_: GaussianID, i: Node, j: Node, tol: Optional[Tolerances] = None) -> GaussianID:
    """
    Reverse the arc i -> j, preserving the joint distribution.

    With b = B[i, j]:
        V_j' = V_j + b^2 V_i
        B_ji' = b V_i / V_j',  V_i' = V_i V_j / V_j'    when V_j' > 0
        B_ji' = 1 / b,         V_i' = 0                  when V_j' = 0
    j inherits the parents of i, and i inherits the parents of j. Nodes are
    then reordered (non-descendants of i, j, i, descendants of i) so B stays
    strictly upper triangular.

    Raises:
        ArcError: No arc i -> j, or another directed path i -> ... -> j exists
    """
    i, j = id_.index(i), id_.index(j)
    arcs = id_.arcs
    if i >= j or arcs[i, j] == 0.0:
        raise ArcError(f"No arc {id_.labels[i]} -> {id_.labels[j]}")

    between = _descendants_between(arcs, i, j)
    if between and np.any(arcs[between, j] != 0.0):
        raise ArcError(f"Reversing {id_.labels[i]} -> {id_.labels[j]} would create a cycle")

    b = arcs[i, j]
    v = id_.cond_vars.copy()
    vi, vj = v[i], v[j]
    vj_new = vj + b * b * vi
    if vj_new > 0.0:
        b_ji = b * vi / vj_new
        vi_new = vi * vj / vj_new
    else:
        b_ji = 1.0 / b
        vi_new = 0.0
        if not np.isfinite(b_ji):
            raise ArcError("Degenerate deterministic reversal")

    new = arcs.copy()
    into_i = new[:, i].copy()
    into_j = new[:, j].copy()
    into_j[i] = 0.0
    col_j = into_j + b * into_i
    col_i = into_i - b_ji * col_j
    new[:, j] = col_j
    new[:, i] = col_i
    new[i, j] = 0.0
    new[j, i] = b_ji
    v[i], v[j] = vi_new, vj_new

    descendants = set(between)
    others = [t for t in range(i + 1, j) if t not in descendants]
    order = list(range(i)) + others + [j, i] + between + list(range(j + 1, id_.n))
    swapped = GaussianID._trusted(id_.mean, new, v, id_.labels)
    return _permuted(swapped, order)


def _absorb_into_children(id_: GaussianID, j: int) -> GaussianID:
    # Node removal for a node that is deterministic or has one child:
    #   V_s += B_js^2 V_j,  B_ks += B_kj B_js
    arcs = id_.arcs.copy()
    v = id_.cond_vars.copy()
    out_row = arcs[j, :].copy()
    in_col = arcs[:, j].copy()
    arcs += np.outer(in_col, out_row)
    v += out_row**2 * v[j]
    arcs[j, :] = 0.0
    arcs[:, j] = 0.0
    return GaussianID._trusted(id_.mean, arcs, v, id_.labels)


def remove_node(id_: GaussianID, j: Node, tol: Optional[Tolerances] = None) -> GaussianID:
    """
    Marginalize node j out of the diagram.

    Arcs from j to its successors are reversed in order until j has at most one
    successor (or is deterministic); its influence is then folded into the
    remaining successors and the barren node deleted. The relative order of
    the remaining nodes is preserved.
    """
    label = id_.labels[id_.index(j)]
    current = id_
    while True:
        idx = current.index(label)
        kids = current.children(idx)
        if kids.size == 0:
            break
        if kids.size == 1 or current.cond_vars[idx] == 0.0:
            current = _absorb_into_children(current, idx)
            break
        current = reverse_arc(current, idx, int(kids[0]), tol)
    return _deleted(current, [current.index(label)])


def marginal(id_: GaussianID, keep: Sequence[Node], tol: Optional[Tolerances] = None) -> GaussianID:
    """
    Remove every node not in `keep`, last node first.

    When no kept node has a dropped parent, the kept nodes' factors do not
    involve the dropped ones and the sub-diagram is returned directly.
    """
    keep_labels = {id_.labels[id_.index(k)] for k in keep}
    drop = [i for i, label in enumerate(id_.labels) if label not in keep_labels]
    kept = [i for i, label in enumerate(id_.labels) if label in keep_labels]
    if not drop or not np.any(id_.arcs[np.ix_(drop, kept)] != 0.0):
        return _deleted(id_, drop)
    current = id_
    for label in reversed(id_.labels):
        if label not in keep_labels:
            current = remove_node(current, label, tol)
    return current


def prepare_evidence(id_: GaussianID, observed: Sequence[Node], tol: Optional[Tolerances] = None) -> GaussianID:
    """
    Reverse arcs until every observed node has only observed parents.

    The result depends only on which nodes are observed, never on the values,
    so one prepared diagram serves any number of absorb_evidence calls.
    """
    evidence = [id_.labels[id_.index(node)] for node in observed]
    if len(set(evidence)) != len(evidence):
        raise NodeIndexError("Observed nodes must be distinct")
    evidence_set = set(evidence)

    current = id_
    for label in sorted(evidence, key=id_.labels.index):
        while True:
            idx = current.index(label)
            hidden = [p for p in current.parents(idx) if current.labels[p] not in evidence_set]
            if not hidden:
                break
            current = reverse_arc(current, int(hidden[-1]), idx, tol)
    return current


def absorb_evidence(
    prepared: GaussianID,
    values: Mapping[Node, float],
    tol: Optional[Tolerances] = None,
) -> GaussianID:
    """
    Condition a prepared diagram on observed values and delete the observed nodes.

    Means of the unobserved nodes shift by the propagated evidence residuals
    in topological order; B and V of the remaining nodes are unchanged.

    Raises:
        InconsistentEvidenceError: A deterministic observed node disagrees with
            the value implied by its observed parents
    """
    tol = resolve_tolerances(tol)
    observed = {prepared.index(node): float(value) for node, value in values.items()}
    arcs, v, mean = prepared.arcs, prepared.cond_vars, prepared.mean
    delta = np.zeros(prepared.n)

    for idx in range(prepared.n):
        shift = arcs[:, idx] @ delta
        if idx in observed:
            if np.any(arcs[[k for k in range(idx) if k not in observed], idx] != 0.0):
                raise InfluenceDiagramError(f"Node {prepared.labels[idx]} was not prepared for evidence")
            value = observed[idx]
            expected = mean[idx] + shift
            if v[idx] == 0.0 and abs(value - expected) > tol.support * max(1.0, abs(expected)):
                raise InconsistentEvidenceError(
                    f"Evidence {value!r} on deterministic node {prepared.labels[idx]} contradicts {expected!r}"
                )
            delta[idx] = value - mean[idx]
        else:
            delta[idx] = shift

    return _deleted(prepared, observed.keys(), mean=mean + delta)


def enter_evidence(
    id_: GaussianID,
    observed: Sequence[Tuple[Node, float]],
    tol: Optional[Tolerances] = None,
) -> GaussianID:
    """
    Condition on observed node values; returns the diagram of the unobserved nodes.

    Args:
        observed: (node index or label, value) pairs with distinct nodes
    """
    nodes = [node for node, _ in observed]
    prepared = prepare_evidence(id_, nodes, tol)
    values = {id_.labels[id_.index(node)]: value for node, value in observed}
    return absorb_evidence(prepared, values, tol)


def quad_form_inverse(
    id_of_residual_cov: GaussianID,
    residual,
    tol: Optional[Tolerances] = None,
) -> float:
    """
    Inversion-free r^T S^-1 r for S held in (B, V) form.

    With e = (I - B)^T r (each node's regression residual), d^2 = sum e_j^2 / V_j.
    A component with V_j = 0 contributes nothing if |e_j| <= support tolerance.

    Raises:
        DeterministicDirectionError: Residual leaves the support of S
    """
    tol = resolve_tolerances(tol)
    s = id_of_residual_cov
    r = np.asarray(residual, dtype=float)
    if r.shape != (s.n,):
        raise DimensionError(f"Residual of shape {r.shape} for {s.n} nodes")
    e = r - s.arcs.T @ r
    stochastic = s.cond_vars > 0.0
    if np.any(np.abs(e[~stochastic]) > tol.support):
        raise DeterministicDirectionError("Residual has a component off the support of S")
    return float(np.sum(e[stochastic] ** 2 / s.cond_vars[stochastic]))


def log_det(id_: GaussianID) -> float:
    """log det of the implied covariance, sum of log V_j."""
    if np.any(id_.cond_vars <= 0.0):
        raise DeterministicDirectionError("Covariance is singular; log-determinant undefined")
    return float(np.sum(np.log(id_.cond_vars)))


def dump_text(id_: GaussianID) -> str:
    """Plain-text dump of (labels, mean, B, V) for test fixtures."""
    fmt = lambda values: " ".join(f"{x:.17g}" for x in values)  # noqa: E731
    lines = [
        "labels " + " ".join(id_.labels),
        "mean " + fmt(id_.mean),
        "cond_vars " + fmt(id_.cond_vars),
        "arcs",
    ]
    lines.extend(fmt(row) for row in id_.arcs)
    return "\n".join(lines) + "\n"


def load_text(text: str) -> GaussianID:
    """Inverse of dump_text."""
    lines = [line.strip() for line in text.strip().splitlines()]
    if len(lines) < 4 or not lines[0].startswith("labels") or lines[3] != "arcs":
        raise InfluenceDiagramError("Malformed influence-diagram dump")
    labels = tuple(lines[0].split()[1:])
    mean = [float(x) for x in lines[1].split()[1:]]
    cond_vars = [float(x) for x in lines[2].split()[1:]]
    arcs = [[float(x) for x in row.split()] for row in lines[4:]]
    return GaussianID(mean, np.array(arcs).reshape(len(mean), len(mean)), cond_vars, labels)
