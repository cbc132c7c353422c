import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, normalize, rel_err, unit_rows
from protoseg.clustering import Assignment, cluster_batch_by_class
from protoseg.embedding import DistanceMeasure, pixel_class_distances
from protoseg.errors import ClassMismatch, MissingAssignment
from protoseg.losses import LossWeights, loss_ce, loss_ppc, loss_ppd, loss_total
from protoseg.prototypes import PrototypeBank

COS = DistanceMeasure("cosine")
MEASURES = [COS, DistanceMeasure("standard"), DistanceMeasure("huberized", 0.1)]


def instance(seed, N=4, C=3, K=2, D=6):
    rng = np.random.default_rng(seed)
    e = unit_rows(rng, N, D)
    protos = unit_rows(rng, C, K, D)
    labels = rng.integers(0, C, N)
    assign = Assignment(cls=labels.copy(), k=rng.integers(0, K, N))
    return e, labels, assign, protos


def fd_through_normalization(f, e, measure):
    """FD gradient of ``f(normalize(z))`` at z = e (cosine) or of ``f(z)`` otherwise."""
    wrap = (lambda z: f(normalize(z))) if measure.normalized else f
    return central_diff(wrap, e, h=1e-6)


class TestCrossEntropy:
    def test_single_class_is_zero(self, rng):
        e = unit_rows(rng, 5, 4)
        value, grad = loss_ce(e, np.zeros(5, int), unit_rows(rng, 1, 3, 4))
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_equal_distances_give_log_c(self, rng):
        p = unit_rows(rng, 4)
        protos = np.broadcast_to(p, (5, 2, 4))
        value, _ = loss_ce(unit_rows(rng, 3, 4), [0, 3, 4], protos)
        assert value == pytest.approx(math.log(5), abs=1e-14)

    @pytest.mark.parametrize("measure", MEASURES, ids=lambda m: m.variant)
    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_fd(self, seed, measure):
        e, y, _, protos = instance(seed)
        _, grad = loss_ce(e, y, protos, measure)
        fd = fd_through_normalization(lambda z: loss_ce(z, y, protos, measure)[0], e, measure)
        assert rel_err(grad, fd) < 1e-4


class TestContrastive:
    def test_no_negatives_is_zero(self, rng):
        e = unit_rows(rng, 3, 4)
        value, grad = loss_ppc(e, Assignment(np.zeros(3, int), np.zeros(3, int)), unit_rows(rng, 1, 1, 4))
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_orthogonal_negatives_high_precision(self):
        D = 6
        protos = np.eye(D)[:6].reshape(2, 3, D)  # six mutually orthogonal prototypes
        e = protos[1, 2][None]
        value, _ = loss_ppc(e, Assignment(np.array([1]), np.array([2])), protos, tau=0.1)
        mpmath.mp.dps = 50
        e10 = mpmath.exp(10)
        expected = float(-mpmath.log(e10 / (e10 + 5 * mpmath.exp(0))))
        assert value == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("measure", MEASURES, ids=lambda m: m.variant)
    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_fd(self, seed, measure):
        e, _, a, protos = instance(seed)
        _, grad = loss_ppc(e, a, protos, 0.1, measure)
        fd = fd_through_normalization(lambda z: loss_ppc(z, a, protos, 0.1, measure)[0], e, measure)
        assert rel_err(grad, fd) < 1e-4

    def test_missing_assignment(self, rng):
        e = unit_rows(rng, 2, 4)
        with pytest.raises(MissingAssignment):
            loss_ppc(e, Assignment(np.array([0, 0]), np.array([0, -1])), unit_rows(rng, 1, 2, 4))


class TestCompactness:
    def setup_method(self):
        self.p = np.array([[[1.0, 0.0, 0.0]]])
        self.a = Assignment(np.array([0]), np.array([0]))

    def test_aligned(self):
        value, grad = loss_ppd(np.array([[1.0, 0.0, 0.0]]), self.a, self.p)
        assert value == 0.0
        assert np.linalg.norm(grad) < 1e-8

    def test_orthogonal(self):
        assert loss_ppd(np.array([[0.0, 1.0, 0.0]]), self.a, self.p)[0] == 1.0

    def test_antipodal(self):
        assert loss_ppd(np.array([[-1.0, 0.0, 0.0]]), self.a, self.p)[0] == 4.0

    @pytest.mark.parametrize("measure", MEASURES, ids=lambda m: m.variant)
    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_fd(self, seed, measure):
        e, _, a, protos = instance(seed)
        _, grad = loss_ppd(e, a, protos, measure)
        fd = fd_through_normalization(lambda z: loss_ppd(z, a, protos, measure)[0], e, measure)
        assert rel_err(grad, fd) < 1e-4


class TestTotal:
    def test_zero_weights_reduce_to_ce(self):
        e, y, a, protos = instance(0)
        lb = loss_total(e, y, a, protos, COS, LossWeights(0.0, 0.0, 0.1))
        ce, g = loss_ce(e, y, protos, COS)
        assert lb.total == ce
        assert np.array_equal(lb.grad, g)

    def test_perfect_single_prototype(self):
        p = np.array([[[0.0, 1.0]]])
        lb = loss_total(np.array([[0.0, 1.0]]), [0], Assignment(np.array([0]), np.array([0])), p)
        assert lb.total == 0.0
        assert (lb.ce, lb.ppc, lb.ppd) == (0.0, 0.0, 0.0)

    def test_combination(self):
        e, y, a, protos = instance(1)
        w = LossWeights(0.3, 0.7, 0.2)
        lb = loss_total(e, y, a, protos, COS, w)
        assert abs(lb.total - (lb.ce + 0.3 * lb.ppc + 0.7 * lb.ppd)) <= 1e-12

    @pytest.mark.parametrize("measure", MEASURES, ids=lambda m: m.variant)
    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_fd(self, seed, measure):
        e, y, a, protos = instance(seed, N=5, C=3, K=3, D=7)
        w = LossWeights(0.5, 0.5, 0.1)  # heavier weights so every term matters
        lb = loss_total(e, y, a, protos, measure, w)
        fd = fd_through_normalization(lambda z: loss_total(z, y, a, protos, measure, w).total, e, measure)
        assert rel_err(lb.grad, fd) < 1e-4

    def test_class_mismatch(self):
        e, y, a, protos = instance(2)
        bad = Assignment((y + 1) % 3, a.k)
        with pytest.raises(ClassMismatch):
            loss_total(e, y, bad, protos)

    def test_prototypes_untouched(self):
        e, y, a, protos = instance(3)
        bank = PrototypeBank(protos)
        before = bank.protos.copy()
        loss_total(e, y, a, bank)
        assert np.array_equal(bank.protos, before)
        assert not bank.protos.flags.writeable


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        e, y, a, protos = instance(seed, N=8, C=4, K=3, D=5)
        lb = loss_total(e, y, a, protos)
        assert lb.ce >= 0 and lb.ppc >= 0 and lb.ppd >= 0
        assert 0 <= lb.ppd <= 4

    def test_ppd_gradient_vanishes_at_coincidence(self, rng):
        protos = unit_rows(rng, 2, 3, 5)
        e = np.stack([protos[0, 1], protos[1, 2]])
        a = Assignment(np.array([0, 1]), np.array([1, 2]))
        assert np.linalg.norm(loss_ppd(e, a, protos)[1]) < 1e-8

    def test_gradients_vanish_at_ideal_configuration(self):
        # one class, one prototype matching the pixel, one antipodal class prototype
        p = np.array([1.0, 0.0, 0.0])
        protos = np.stack([p[None], -p[None]])
        a = Assignment(np.array([0]), np.array([0]))
        for f in (lambda: loss_ce(p[None], [0], protos),
                  lambda: loss_ppc(p[None], a, protos),
                  lambda: loss_ppd(p[None], a, protos)):
            assert np.linalg.norm(f()[1]) < 1e-8

    def test_ce_decreases_toward_nearest_own_prototype(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            protos = unit_rows(rng, 3, 2, 6)
            e = unit_rows(rng, 1, 6)
            y = [int(rng.integers(0, 3))]
            _, k = pixel_class_distances(e, protos)
            target = protos[y[0], k[0, y[0]]]
            step = normalize(e[0] + 1e-3 * (target - e[0]))[None]
            assert loss_ce(step, y, protos)[0] < loss_ce(e, y, protos)[0]

    def test_on_real_assignments(self):
        rng = np.random.default_rng(9)
        protos = unit_rows(rng, 3, 4, 8)
        e = unit_rows(rng, 60, 8)
        y = rng.integers(0, 3, 60)
        a = cluster_batch_by_class(e, y, protos)
        lb = loss_total(e, y, a, protos)
        assert all(np.isfinite([lb.ce, lb.ppc, lb.ppd, lb.total]))
