import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from seqsearch.bloch import simulate
from seqsearch.losses import (
    EXPERIMENT_WEIGHTS, LossWeights, composite, default_weights, evaluate_sequence, expected_rf_energy,
    expected_rf_number, loss_cont, loss_null, loss_sig, relative_rf_energy, rf_energy,
)
from seqsearch.population import nominal_voxels
from seqsearch.scheduler import N_RF, init_search_space
from seqsearch.sequence import RfOp, Sequence, hahn_echo, inversion_recovery

mags = arrays(float, st.integers(1, 30), elements=st.floats(0.0, 1.2))


def test_signal_term_examples():
    assert loss_sig(np.full(4, 0.8), np.full(4, 0.8)) == 0.0
    assert loss_sig(np.zeros(2), np.full(2, 0.8)) == pytest.approx(0.64)
    with pytest.raises(ValueError):
        loss_sig(np.array([]), np.array([]))


def test_hahn_echo_gm_signal_term():
    gm = nominal_voxels(["GM"])
    mag = simulate(hahn_echo(), gm).magnitude
    assert loss_sig(mag, gm.m0) == pytest.approx((0.8 - 0.71) ** 2, abs=2e-3)


def test_null_term():
    assert loss_null(np.zeros(3)) == 0.0
    assert loss_null(np.ones(3)) == 1.0
    csf = nominal_voxels(["CSF"])
    assert loss_null(simulate(inversion_recovery(4000 * math.log(2)), csf).magnitude) < 1e-3


def test_contrast_term():
    assert loss_cont(np.full(5, 0.3), np.full(5, 0.3)) == 0.0
    assert loss_cont(np.full(5, 0.57), np.full(5, 0.44)) == pytest.approx(-0.0169)
    a, b = np.array([0.1, 0.9]), np.array([0.5, 0.2])
    assert loss_cont(a, b) == loss_cont(b, a)
    with pytest.raises(ValueError):
        loss_cont(np.ones(2), np.ones(3))


@given(mags)
def test_term_signs(mag):
    m0 = np.full(mag.shape, 0.8)
    assert loss_sig(mag, m0) >= 0
    assert loss_null(mag) >= 0
    assert loss_cont(mag, mag[::-1]) <= 0


@given(mags)
def test_duplicating_batch_is_invariant(mag):
    m0 = np.linspace(0.5, 1.0, mag.size)
    twice = np.concatenate([mag, mag])
    assert loss_sig(twice, np.concatenate([m0, m0])) == pytest.approx(loss_sig(mag, m0), rel=1e-12)
    assert loss_null(twice) == pytest.approx(loss_null(mag), rel=1e-12)
    other = mag[::-1] * 0.5
    assert loss_cont(twice, np.concatenate([other, other])) == pytest.approx(loss_cont(mag, other), rel=1e-12)


@given(arrays(float, 6, elements=st.floats(0.01, 1.0)), st.sampled_from(["E1", "E2-diffT1", "E3"]))
def test_signal_gradients_finite_difference(mag, exp):
    tissue = np.array([0, 1, 2, 0, 1, 2])
    m0 = np.array([0.8, 0.7, 1.0, 0.82, 0.69, 1.0])
    br = composite(exp, mag, tissue, m0, 2.0, 3.0)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        num = (composite(exp, mag + e, tissue, m0, 2.0, 3.0).total
               - composite(exp, mag - e, tissue, m0, 2.0, 3.0).total) / (2 * h)
        assert abs(num - br.dl_dmag[i]) <= 1e-5 * max(abs(num), 1e-3)


# -- RF penalties ------------------------------------------------------------------


def test_expected_rf_number():
    sp = init_search_space(0)
    sp.alpha[:] = 0.0
    assert expected_rf_number(sp)[0] == pytest.approx(1 + 4 * 5 / 8)
    sp.alpha[:] = -50.0
    sp.alpha[[0, 2], 1] = 50.0
    sp.alpha[[1, 3, 4], 6] = 50.0
    assert expected_rf_number(sp)[0] == pytest.approx(2.0)


def test_rf_number_gradient_pushes_away_from_rf():
    sp = init_search_space(1)
    val, grad = expected_rf_number(sp)
    h = 1e-6
    for layer, cand in ((1, 0), (2, 6), (0, 3)):
        sp2 = sp.copy()
        sp2.alpha[layer, cand] += h
        up = expected_rf_number(sp2)[0]
        sp2.alpha[layer, cand] -= 2 * h
        down = expected_rf_number(sp2)[0]
        assert (up - down) / (2 * h) == pytest.approx(grad[layer, cand], rel=1e-6, abs=1e-9)
    assert np.all(grad[1:, :N_RF] > 0) and np.all(grad[1:, N_RF:] < 0)


def test_expected_rf_energy_gradients():
    sp = init_search_space(2)
    val, d_alpha, d_flip = expected_rf_energy(sp)
    h = 1e-6
    for name, grad, idx in (("alpha", d_alpha, (3, 2)), ("flip", d_flip, (4, 4)), ("flip", d_flip, (0, 1))):
        sp2 = sp.copy()
        getattr(sp2, name)[idx] += h
        up = expected_rf_energy(sp2)[0]
        getattr(sp2, name)[idx] -= 2 * h
        down = expected_rf_energy(sp2)[0]
        assert (up - down) / (2 * h) == pytest.approx(grad[idx], rel=1e-6)


@pytest.mark.parametrize("flips, expected", [
    ((90, 180), 100.0),
    ((88, 177), 96.4765),
    ((6.1, 87.4, 170.1), 90.395),
])
def test_relative_energy(flips, expected):
    seq = Sequence(tuple(RfOp.deg(f) for f in flips))
    assert relative_rf_energy(seq) == pytest.approx(expected, abs=1e-3)


@given(st.lists(st.floats(1.0, 180.0), min_size=1, max_size=5))
def test_energy_ratio_unit_free(flips):
    seq = Sequence(tuple(RfOp.deg(f) for f in flips))
    deg_ratio = 100 * sum(f * f for f in flips) / (90 ** 2 + 180 ** 2)
    assert relative_rf_energy(seq) == pytest.approx(deg_ratio, rel=1e-12)
    assert rf_energy(seq) == pytest.approx(sum(math.radians(f) ** 2 for f in flips))


# -- composite ------------------------------------------------------------------------


def test_default_weights():
    w = default_weights("E3")
    assert (w.sig, w.null, w.rf_energy, w.rf_number) == (0.75, 0.25, 1e-4, 1e-3)
    assert default_weights("E2-sameT1").cont == 30.0
    assert default_weights("E2-diffT1", cont=50.0).cont == 50.0
    assert EXPERIMENT_WEIGHTS["E1"] == LossWeights()
    with pytest.raises(ValueError):
        LossWeights(sig=-1.0)
    with pytest.raises(ValueError):
        default_weights("E4")


def test_zero_signal_e1():
    m0 = np.array([0.8, 0.7, 1.0])
    br = composite("E1", np.zeros(3), np.array([0, 1, 2]), m0, 0.0, 0.0)
    assert br.total == pytest.approx(np.mean(m0 ** 2))


@given(arrays(float, 9, elements=st.floats(0.0, 1.0)), st.sampled_from(["E1", "E2-sameT1", "E2-diffT1", "E3"]),
       st.floats(0, 5), st.floats(0, 20))
def test_total_is_sum_of_weighted_terms(mag, exp, n, e):
    tissue = np.arange(9) % 3
    br = composite(exp, mag, tissue, np.full(9, 0.8), n, e)
    assert br.total == pytest.approx(sum(br.weighted.values()), abs=1e-12)
    w = default_weights(exp)
    assert br.weighted["rf_number"] == w.rf_number * n
    assert br.weighted["rf_energy"] == w.rf_energy * e


def test_e3_structure():
    mag = np.array([0.5, 0.4, 0.2])
    tissue = np.array([0, 1, 2])
    m0 = np.array([0.8, 0.7, 1.0])
    br = composite("E3", mag, tissue, m0, 2.0, 1.0)
    sig = (0.8 - 0.5) ** 2 + (0.7 - 0.4) ** 2
    assert br.terms["sig"] == pytest.approx(sig)
    assert br.total == pytest.approx(0.75 * sig + 0.25 * 0.04 + 2e-3 + 1e-4)


def test_missing_tissue_is_error():
    with pytest.raises(ValueError, match="WM"):
        composite("E2-diffT1", np.ones(2), np.array([0, 0]), np.ones(2), 0, 0)
    with pytest.raises(ValueError, match="CSF"):
        composite("E3", np.ones(2), np.array([0, 1]), np.ones(2), 0, 0)


def test_grid_of_candidates_broadcasts():
    tissue = np.arange(6) % 3
    m0 = np.full(6, 0.8)
    mags = np.random.default_rng(0).random((4, 3, 6))
    br = composite("E2-diffT1", mags, tissue, m0, 2.0, 1.0)
    assert br.total.shape == (4, 3)
    single = composite("E2-diffT1", mags[2, 1], tissue, m0, 2.0, 1.0)
    assert br.total[2, 1] == pytest.approx(single.total, rel=1e-14)


def test_evaluate_sequence_uses_actual_penalties(nominal):
    seq = hahn_echo()
    mag = simulate(seq, nominal).magnitude
    br = evaluate_sequence("E1", seq, mag, nominal)
    assert br.terms["rf_number"] == 2
    assert br.terms["rf_energy"] == pytest.approx((math.pi / 2) ** 2 + math.pi ** 2)
