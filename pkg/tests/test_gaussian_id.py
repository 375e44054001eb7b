"""
Tests for the Gaussian influence-diagram algebra

Examples are checked exactly; the randomized cases compare against dense
moment-form algebra on seeded matrices.
"""

import numpy as np
import pytest

from idtrack.config import Tolerances
from idtrack.gaussian_id import (
    ArcError,
    DeterministicDirectionError,
    DimensionError,
    GaussianID,
    InconsistentEvidenceError,
    InfluenceDiagramError,
    MomentGaussian,
    NodeIndexError,
    NotPositiveSemidefiniteError,
    NotSymmetricError,
    absorb_evidence,
    cov_to_id,
    dump_text,
    enter_evidence,
    id_to_cov,
    load_text,
    log_det,
    marginal,
    prepare_evidence,
    quad_form_inverse,
    remove_node,
    reverse_arc,
    stack,
)
from idtrack.filters import IllConditionedError, factor_innovation

from .helpers import random_sparse_id, random_spd, rel_fro, sample_joint

RANDOM_CASES = 1000


def _two_node(b, v1, v2, labels=("x1", "x2")):
    return GaussianID([0.0, 0.0], [[0.0, b], [0.0, 0.0]], [v1, v2], labels)


@pytest.mark.unit
class TestConversion:
    """cov_to_id / id_to_cov"""

    def test_independent_nodes_have_no_arcs(self):
        id_ = cov_to_id(MomentGaussian([0.0, 0.0], np.diag([4.0, 9.0])))
        np.testing.assert_array_equal(id_.arcs, np.zeros((2, 2)))
        np.testing.assert_allclose(id_.cond_vars, [4.0, 9.0])

    def test_two_node_regression(self):
        id_ = cov_to_id(MomentGaussian([1.0, -1.0], [[4.0, 2.0], [2.0, 3.0]]))
        assert id_.arcs[0, 1] == pytest.approx(0.5)
        np.testing.assert_allclose(id_.cond_vars, [4.0, 2.0])
        np.testing.assert_allclose(id_.mean, [1.0, -1.0])

    def test_single_node(self):
        id_ = cov_to_id(MomentGaussian([3.0], [[7.0]]))
        assert id_.arcs.shape == (1, 1)
        np.testing.assert_allclose(id_.cond_vars, [7.0])

    def test_id_to_cov_examples(self):
        np.testing.assert_allclose(id_to_cov(GaussianID([0, 0], np.zeros((2, 2)), [4, 9])).cov, np.diag([4.0, 9.0]))
        np.testing.assert_allclose(id_to_cov(_two_node(0.5, 4.0, 2.0)).cov, [[4.0, 2.0], [2.0, 3.0]])

    def test_deterministic_chain_is_all_ones(self):
        arcs = np.zeros((3, 3))
        arcs[0, 1] = arcs[1, 2] = 1.0
        cov = id_to_cov(GaussianID(np.zeros(3), arcs, [1.0, 0.0, 0.0])).cov
        np.testing.assert_allclose(cov, np.ones((3, 3)))

    def test_singular_psd_gives_deterministic_node(self):
        id_ = cov_to_id(MomentGaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]))
        assert id_.cond_vars[1] == 0.0
        assert id_.arcs[0, 1] == pytest.approx(1.0)
        np.testing.assert_allclose(id_to_cov(id_).cov, np.ones((2, 2)), atol=1e-12)

    def test_clamped_variance_is_logged_as_warning(self, caplog):
        cov = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]])
        with caplog.at_level("WARNING", logger="idtrack.gaussian_id"):
            id_ = cov_to_id(MomentGaussian([0.0, 0.0], cov))
        assert id_.cond_vars[1] == 0.0
        assert any(r.levelname == "WARNING" and "Clamped" in r.getMessage() for r in caplog.records)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(NotSymmetricError):
            cov_to_id(MomentGaussian([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveSemidefiniteError):
            cov_to_id(MomentGaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]))

    def test_round_trip_randomized(self, rng):
        worst = 0.0
        for _ in range(RANDOM_CASES):
            n = int(rng.integers(1, 9))
            cov = random_spd(rng, n, cond=10 ** rng.uniform(0, 6), scale=10 ** rng.uniform(-2, 3))
            mean = rng.normal(size=n)
            back = id_to_cov(cov_to_id(MomentGaussian(mean, cov)))
            worst = max(worst, rel_fro(back.cov, cov))
            np.testing.assert_array_equal(back.mean, mean)
        assert worst <= 1e-10

    def test_node_order_does_not_change_joint(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 8))
            cov = random_spd(rng, n, cond=1e3)
            labels = [f"v{i}" for i in range(n)]
            perm = rng.permutation(n)
            id_ = cov_to_id(
                MomentGaussian(np.zeros(n), cov[np.ix_(perm, perm)]),
                labels=[labels[p] for p in perm],
            )
            assert rel_fro(id_.moment(order=labels).cov, cov) <= 1e-10


@pytest.mark.unit
class TestGaussianIDValidation:
    """Construction-time checks"""

    def test_lower_triangular_arc_rejected(self):
        with pytest.raises(InfluenceDiagramError):
            GaussianID([0.0, 0.0], [[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0])

    def test_negative_variance_rejected(self):
        with pytest.raises(InfluenceDiagramError):
            GaussianID([0.0], [[0.0]], [-1.0])

    def test_size_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            GaussianID([0.0, 0.0], np.zeros((3, 3)), [1.0, 1.0])

    def test_duplicate_labels_rejected(self):
        with pytest.raises(DimensionError):
            GaussianID([0.0, 0.0], np.zeros((2, 2)), [1.0, 1.0], labels=("a", "a"))

    def test_label_lookup(self):
        id_ = _two_node(2.0, 1.0, 1.0, labels=("pos", "vel"))
        assert id_.index("vel") == 1
        assert list(id_.parents("vel")) == [0]
        assert list(id_.children("pos")) == [1]
        with pytest.raises(NodeIndexError):
            id_.index("acc")
        with pytest.raises(NodeIndexError):
            id_.index(5)

    def test_arrays_are_read_only(self):
        id_ = _two_node(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            id_.mean[0] = 3.0


@pytest.mark.unit
class TestRemoveNode:
    """Marginalization by node removal"""

    def test_two_node_chain(self):
        out = remove_node(_two_node(3.0, 2.0, 5.0), 0)
        assert out.labels == ("x2",)
        np.testing.assert_allclose(out.cond_vars, [5.0 + 9.0 * 2.0])

    def test_barren_node_leaves_rest_untouched(self, rng):
        id_ = random_sparse_id(rng, 4, density=1.0)
        out = remove_node(id_, 3)
        np.testing.assert_array_equal(out.arcs, id_.arcs[:3, :3])
        np.testing.assert_array_equal(out.cond_vars, id_.cond_vars[:3])
        np.testing.assert_array_equal(out.mean, id_.mean[:3])

    def test_five_node_example(self, rng):
        cov = random_spd(rng, 5, cond=100.0)
        out = remove_node(cov_to_id(MomentGaussian(np.zeros(5), cov)), 2)
        keep = [0, 1, 3, 4]
        assert rel_fro(id_to_cov(out).cov, cov[np.ix_(keep, keep)]) <= 1e-10

    def test_randomized_against_deletion(self, rng):
        for case in range(RANDOM_CASES):
            n = int(rng.integers(2, 9))
            if case % 2:
                id_ = random_sparse_id(rng, n, density=rng.uniform(0.2, 1.0))
            else:
                id_ = cov_to_id(MomentGaussian(rng.normal(size=n), random_spd(rng, n, cond=10 ** rng.uniform(0, 4))))
            j = int(rng.integers(n))
            cov = id_to_cov(id_).cov
            keep = [label for t, label in enumerate(id_.labels) if t != j]
            out = remove_node(id_, j)
            assert out.labels == tuple(keep)
            idx = [t for t in range(n) if t != j]
            assert rel_fro(id_to_cov(out).cov, cov[np.ix_(idx, idx)]) <= 1e-10

    def test_marginal_keeps_requested_nodes(self, rng):
        id_ = cov_to_id(MomentGaussian(rng.normal(size=6), random_spd(rng, 6, cond=1e3)))
        cov = id_to_cov(id_).cov
        out = marginal(id_, ["n1", "n4"])
        assert out.labels == ("n1", "n4")
        assert rel_fro(out.moment().cov, cov[np.ix_([1, 4], [1, 4])]) <= 1e-10

    def test_marginal_of_roots_is_sub_diagram(self):
        id_ = _two_node(2.0, 1.0, 3.0)
        out = marginal(id_, ["x1"])
        np.testing.assert_allclose(out.cond_vars, [1.0])


@pytest.mark.unit
class TestReverseArc:
    """Arc reversal"""

    def test_unit_coefficient_example(self):
        out = reverse_arc(_two_node(1.0, 1.0, 1.0), 0, 1)
        assert out.labels == ("x2", "x1")
        assert out.arcs[0, 1] == pytest.approx(0.5)
        np.testing.assert_allclose(out.cond_vars, [2.0, 0.5])

    def test_deterministic_copy(self):
        out = reverse_arc(_two_node(2.0, 1.0, 0.0), "x1", "x2")
        assert out.arcs[0, 1] == pytest.approx(0.5)
        np.testing.assert_allclose(out.cond_vars, [4.0, 0.0])
        np.testing.assert_allclose(out.moment(order=("x1", "x2")).cov, [[1.0, 2.0], [2.0, 4.0]])

    def test_constant_parent_of_deterministic_child(self):
        out = reverse_arc(_two_node(2.0, 0.0, 0.0), 0, 1)
        assert out.arcs[0, 1] == pytest.approx(0.5)
        np.testing.assert_array_equal(out.cond_vars, [0.0, 0.0])

    def test_absent_arc_rejected(self):
        with pytest.raises(ArcError):
            reverse_arc(_two_node(0.0, 1.0, 1.0), 0, 1)
        with pytest.raises(ArcError):
            reverse_arc(_two_node(1.0, 1.0, 1.0), 1, 0)

    def test_cycle_rejected(self):
        arcs = np.zeros((3, 3))
        arcs[0, 1] = arcs[1, 2] = arcs[0, 2] = 1.0
        with pytest.raises(ArcError):
            reverse_arc(GaussianID(np.zeros(3), arcs, np.ones(3)), 0, 2)

    def test_randomized_joint_preserved(self, rng):
        reversed_count = 0
        for _ in range(RANDOM_CASES):
            n = int(rng.integers(2, 9))
            id_ = random_sparse_id(rng, n, density=rng.uniform(0.3, 0.9))
            arcs = np.argwhere(id_.arcs != 0.0)
            if arcs.size == 0:
                continue
            i, j = arcs[rng.integers(len(arcs))]
            try:
                out = reverse_arc(id_, int(i), int(j))
            except ArcError:
                continue
            reversed_count += 1
            before = id_to_cov(id_).cov
            assert rel_fro(out.moment(order=id_.labels).cov, before) <= 1e-10
            assert out.arcs[out.index(id_.labels[j]), out.index(id_.labels[i])] != 0.0
            assert np.all(np.tril(out.arcs) == 0.0)
            np.testing.assert_array_equal(out.mean_of(id_.labels), id_.mean)
        assert reversed_count > RANDOM_CASES // 10

    def test_double_reversal_restores_joint(self, rng):
        id_ = _two_node(0.7, 2.0, 0.3)
        back = reverse_arc(reverse_arc(id_, "x1", "x2"), "x2", "x1")
        assert back.labels == id_.labels
        np.testing.assert_allclose(back.arcs, id_.arcs, atol=1e-12)
        np.testing.assert_allclose(back.cond_vars, id_.cond_vars, atol=1e-12)


@pytest.mark.unit
class TestEvidence:
    """Evidence entry and conditioning"""

    def _prior_and_measurement(self, mu0=1.0, p=4.0, r=1.0):
        return GaussianID([mu0, mu0], [[0.0, 1.0], [0.0, 0.0]], [p, r], labels=("x", "z"))

    def test_scalar_kalman_update(self):
        mu0, p, r, z0 = 1.0, 4.0, 1.0, 3.0
        post = enter_evidence(self._prior_and_measurement(mu0, p, r), [("z", z0)])
        assert post.labels == ("x",)
        assert post.mean[0] == pytest.approx(mu0 + p / (p + r) * (z0 - mu0))
        assert post.cond_vars[0] == pytest.approx(p * r / (p + r))

    def test_evidence_at_mean_of_independent_node(self):
        id_ = GaussianID([1.0, 2.0, 3.0], np.zeros((3, 3)), [1.0, 2.0, 3.0])
        post = enter_evidence(id_, [(1, 2.0)])
        np.testing.assert_array_equal(post.mean, [1.0, 3.0])
        np.testing.assert_array_equal(post.cond_vars, [1.0, 3.0])

    def test_inconsistent_deterministic_evidence(self):
        id_ = GaussianID([0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]], [1.0, 0.0])
        with pytest.raises(InconsistentEvidenceError):
            enter_evidence(id_, [(0, 1.0), (1, 2.0)])
        assert enter_evidence(id_, [(0, 1.0), (1, 1.0)]).n == 0

    def test_evidence_on_deterministic_child_pins_parent(self):
        id_ = GaussianID([0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]], [1.0, 0.0])
        post = enter_evidence(id_, [(1, 3.0)])
        assert post.mean[0] == pytest.approx(3.0)
        assert post.cond_vars[0] == pytest.approx(0.0, abs=1e-12)

    def test_duplicate_observed_nodes_rejected(self):
        with pytest.raises(NodeIndexError):
            prepare_evidence(self._prior_and_measurement(), ["z", 1])

    def test_prepared_diagram_is_reusable(self):
        prepared = prepare_evidence(self._prior_and_measurement(), ["z"])
        a = absorb_evidence(prepared, {"z": 3.0})
        b = absorb_evidence(prepared, {"z": -1.0})
        assert a.mean[0] == pytest.approx(enter_evidence(self._prior_and_measurement(), [("z", 3.0)]).mean[0])
        assert b.mean[0] == pytest.approx(1.0 + 0.8 * (-2.0))
        assert a.cond_vars[0] == b.cond_vars[0]

    def test_randomized_against_schur_complement(self, rng):
        for _ in range(RANDOM_CASES):
            n = int(rng.integers(3, 9))
            mean = rng.normal(size=n)
            cov = random_spd(rng, n, cond=10 ** rng.uniform(0, 6))
            id_ = cov_to_id(MomentGaussian(mean, cov))
            k = int(rng.integers(1, n))
            obs = np.sort(rng.choice(n, size=k, replace=False))
            hid = np.array([t for t in range(n) if t not in set(obs)])
            x = sample_joint(rng, mean, cov)

            post = enter_evidence(id_, [(int(t), x[t]) for t in obs])
            got = post.moment(order=[id_.labels[t] for t in hid])

            gain = np.linalg.solve(cov[np.ix_(obs, obs)], cov[np.ix_(obs, hid)]).T
            want_mean = mean[hid] + gain @ (x[obs] - mean[obs])
            want_cov = cov[np.ix_(hid, hid)] - gain @ cov[np.ix_(obs, hid)]
            np.testing.assert_allclose(got.mean, want_mean, atol=1e-9)
            assert np.linalg.norm(got.cov - want_cov) <= 1e-9 * np.linalg.norm(cov)


@pytest.mark.unit
class TestQuadFormInverse:
    """Inversion-free Mahalanobis distance"""

    def test_diagonal(self):
        s = GaussianID([0.0, 0.0], np.zeros((2, 2)), [4.0, 9.0])
        assert quad_form_inverse(s, [2.0, 3.0]) == pytest.approx(4.0 / 4.0 + 9.0 / 9.0)

    def test_zero_residual(self):
        s = cov_to_id(MomentGaussian([0.0, 0.0], [[4.0, 2.0], [2.0, 3.0]]))
        assert quad_form_inverse(s, [0.0, 0.0]) == 0.0

    def test_two_by_two_example(self):
        s = cov_to_id(MomentGaussian([0.0, 0.0], [[4.0, 2.0], [2.0, 3.0]]))
        assert quad_form_inverse(s, [1.0, 1.0]) == pytest.approx(0.375, rel=1e-12)

    def test_on_support_deterministic_component(self):
        s = cov_to_id(MomentGaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]))
        assert quad_form_inverse(s, [2.0, 2.0]) == pytest.approx(4.0)

    def test_off_support_rejected(self):
        s = cov_to_id(MomentGaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(DeterministicDirectionError):
            quad_form_inverse(s, [2.0, 3.0])

    def test_wrong_length_rejected(self):
        with pytest.raises(DimensionError):
            quad_form_inverse(GaussianID([0.0], [[0.0]], [1.0]), [1.0, 2.0])

    def test_randomized_against_solve(self, rng):
        for _ in range(RANDOM_CASES):
            n = int(rng.integers(1, 7))
            cov = random_spd(rng, n, cond=10 ** rng.uniform(0, 8))
            r = rng.normal(size=n)
            want = float(r @ np.linalg.solve(cov, r))
            got = quad_form_inverse(cov_to_id(MomentGaussian(np.zeros(n), cov)), r)
            assert got == pytest.approx(want, rel=1e-8)

    @pytest.mark.parametrize("delta", [2e-5, 2e-6, 2e-7])
    def test_stays_accurate_near_singular(self, delta):
        # S = [[1, 1], [1, 1 + delta^2]], condition number about 4 / delta^2
        s = GaussianID([0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]], [1.0, delta**2])
        a, c = 1.0, 2.0
        got = quad_form_inverse(s, [a, a + delta * c])
        assert np.isfinite(got)
        assert got == pytest.approx(a * a + c * c, rel=1e-6)

    def test_classical_factorization_gives_up_where_id_does_not(self):
        delta = 1e-8
        cov = np.array([[1.0, 1.0], [1.0, 1.0 + delta**2]])
        with pytest.raises(IllConditionedError):
            factor_innovation(cov, Tolerances())
        s = GaussianID([0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]], [1.0, delta**2])
        assert quad_form_inverse(s, [1.0, 1.0 + delta]) == pytest.approx(2.0, rel=1e-6)

    @pytest.mark.parametrize("cond,aborts", [(1e12, False), (1e13, False), (1e15, True), (1e16, True)])
    def test_classical_condition_limit(self, cond, aborts):
        """Pivot-ratio estimate against the 1e14 limit; the ID form answers either way"""
        S = np.diag([1.0, 1.0 / cond])
        if aborts:
            with pytest.raises(IllConditionedError):
                factor_innovation(S, Tolerances())
        else:
            factor_innovation(S, Tolerances())
        s = GaussianID([0.0, 0.0], np.zeros((2, 2)), [1.0, 1.0 / cond])
        got = quad_form_inverse(s, [1.0, 1.0 / cond])
        assert got == pytest.approx(1.0 + 1.0 / cond, rel=1e-12)

    def test_log_det(self):
        assert log_det(GaussianID([0.0, 0.0], [[0.0, 3.0], [0.0, 0.0]], [4.0, 2.0])) == pytest.approx(np.log(8.0))
        with pytest.raises(DeterministicDirectionError):
            log_det(GaussianID([0.0], [[0.0]], [0.0]))


@pytest.mark.unit
class TestStack:
    """Block stacking"""

    def test_independent_blocks(self):
        a = cov_to_id(MomentGaussian([1.0, 2.0], [[4.0, 2.0], [2.0, 3.0]]), labels=("a0", "a1"))
        b = GaussianID([5.0], [[0.0]], [7.0], labels=("b0",))
        cov = id_to_cov(stack(a, b)).cov
        np.testing.assert_allclose(cov, [[4.0, 2.0, 0.0], [2.0, 3.0, 0.0], [0.0, 0.0, 7.0]])

    def test_cross_block_against_dense_algebra(self, rng):
        for _ in range(50):
            na, nb = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            a = cov_to_id(MomentGaussian(np.zeros(na), random_spd(rng, na)), labels=[f"a{i}" for i in range(na)])
            b = random_sparse_id(rng, nb)
            c = rng.normal(size=(na, nb))
            pa, pb = id_to_cov(a).cov, id_to_cov(b).cov
            ub = np.linalg.inv(np.eye(nb) - b.arcs)
            cross = pa @ c @ ub
            want = np.block([[pa, cross], [cross.T, pb + ub.T @ c.T @ pa @ c @ ub]])
            assert rel_fro(id_to_cov(stack(a, b, c)).cov, want) <= 1e-10

    def test_shape_and_label_errors(self):
        a = GaussianID([0.0], [[0.0]], [1.0], labels=("x",))
        with pytest.raises(DimensionError):
            stack(a, GaussianID([0.0], [[0.0]], [1.0], labels=("y",)), np.zeros((2, 1)))
        with pytest.raises(DimensionError):
            stack(a, a)


@pytest.mark.unit
class TestTextDump:
    def test_dump_and_load(self, rng):
        id_ = random_sparse_id(rng, 5)
        back = load_text(dump_text(id_))
        assert back.labels == id_.labels
        np.testing.assert_array_equal(back.arcs, id_.arcs)
        np.testing.assert_array_equal(back.cond_vars, id_.cond_vars)
        np.testing.assert_array_equal(back.mean, id_.mean)

    def test_malformed_dump(self):
        with pytest.raises(InfluenceDiagramError):
            load_text("mean 1 2\n")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
