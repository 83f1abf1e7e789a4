import functools

import numpy as np
import pytest
import scipy.linalg

from conftest import BUNDLED, bundled_derived, pipeline
from diracsim.blockmat import build_q
from diracsim.evolution import (GroupEvaluator, equiconvergence_scan, exp_block2, exp_series, ode_reference,
                                smooth_state, spectral_gamma, trace_csv)
from diracsim.freebasis import tilde_free_diagonal
from diracsim.potential import PotentialSpec, derive
from diracsim.simop import run_similarity
from diracsim.spectrum import eig2

OMEGA = 2 * np.pi


def evaluator_for(spec, window):
    d = derive(spec)
    a0 = tilde_free_diagonal(d, window)
    res = run_similarity(a0, build_q(d, a0.layout), delta_p=d.delta_p)
    return GroupEvaluator.build(d, res)


@functools.lru_cache(maxsize=None)
def bundled_evaluator(name, window):
    d, res = pipeline(name, window)
    return GroupEvaluator.build(d, res)


@pytest.mark.parametrize("block", [
    [[1.0, 0.3], [0.2, -0.5]],
    [[0.0, 1.0], [0.0, 0.0]],
    [[0.2j, 2.0], [-1.0, 0.1]],
    [[1.0, 1e-6], [1e-6, 1.0 + 1e-7]],
])
@pytest.mark.parametrize("t", [0.0, 0.3, -2.0, 7.5])
def test_exp_block2_matches_expm(block, t):
    blk = np.array(block, dtype=complex)
    want = scipy.linalg.expm(1j * t * blk)
    assert np.max(np.abs(exp_block2(blk, t) - want)) < 1e-13 * max(1.0, np.max(np.abs(want)))


def test_exp_block2_matches_series_for_small_times():
    blk = np.array([[0.4, 0.1], [0.3, -0.2]], dtype=complex)
    for t in (1e-3, 0.1, 0.5):
        assert np.max(np.abs(exp_block2(blk, t) - exp_series(blk, t))) < 1e-15


def test_nilpotent_block_closed_form():
    blk = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    assert np.allclose(exp_block2(blk, 2.0), [[1, 2j], [0, 1]], atol=1e-16)


def test_zero_potential_group_is_free():
    ev = evaluator_for(PotentialSpec.from_maps(OMEGA, "per"), 4)
    lay = ev.result.layout
    x = smooth_state(lay)
    for t in (0.0, 0.4, 3.0):
        assert np.allclose(ev.full_group(t, x), np.exp(1j * t * lay.diag) * x, atol=1e-15)


@pytest.mark.parametrize("name", BUNDLED)
def test_tilde_group_identity_and_group_law(name):
    ev = bundled_evaluator(name, 16)
    eye = np.eye(ev.dim)
    assert np.max(np.abs(ev.tilde_matrix(0.0) - eye)) < 1e-15
    s, t = 0.35, 0.8
    lhs = ev.tilde_matrix(s + t)
    rhs = ev.tilde_matrix(s) @ ev.tilde_matrix(t)
    assert np.max(np.abs(lhs - rhs)) < 1e-13
    x = smooth_state(ev.result.layout)
    assert np.linalg.norm(ev.full_group(0.0, x) - x) < 1e-13
    law = ev.full_group(s, ev.full_group(t, x)) - ev.full_group(s + t, x)
    assert np.linalg.norm(law) < 1e-12


@pytest.mark.parametrize("name", BUNDLED)
def test_generator_by_richardson(name):
    # the similarity group of A0 - Q differentiates to i (A0 - Q) at t = 0
    ev = bundled_evaluator(name, 16)
    res = ev.result
    x = smooth_state(res.layout)

    def central_difference(h):
        return (ev.similarity_group(h, x) - ev.similarity_group(-h, x)) / (2j * h)

    h = 1e-2
    rich = (4 * central_difference(h / 2) - central_difference(h)) / 3
    want = (res.a0.data - res.q.data) @ x
    assert np.linalg.norm(rich - want) < 1e-7 * np.linalg.norm(want)


@pytest.mark.parametrize("name", BUNDLED)
def test_full_group_matches_ode(name):
    ev = bundled_evaluator(name, 16)
    x = smooth_state(ev.result.layout)
    times = [0.25, 1.0]
    ref = ode_reference(ev.generator(), x, times)
    for t, y in zip(times, ref):
        assert np.linalg.norm(ev.full_group(t, x) - y) < 1e-9


@pytest.mark.parametrize("name", BUNDLED)
def test_truncation_bound_holds(name):
    ev = bundled_evaluator(name, 16)
    x = smooth_state(ev.result.layout, width=8)
    for n in range(ev.result.m, 17, 3):
        actual, bound = ev.truncation_bound(x, 0.7, n)
        assert actual <= bound * (1 + 1e-9) + 1e-13
    with pytest.raises(ValueError):
        ev.truncation_bound(x, 0.7, ev.result.m - 1)


@pytest.mark.parametrize("spec", [
    PotentialSpec.from_maps(OMEGA, "per"),
    PotentialSpec.from_maps(OMEGA, "ap", p1={0: 0.3}, p4={0: -0.2j}),
])
def test_equiconvergence_vanishes_without_coupling(spec):
    ev = evaluator_for(spec, 6)
    scan = equiconvergence_scan(ev)
    assert max(scan.norms) < 1e-14
    assert scan.nonincreasing()
    assert scan.cross_max < 1e-14 and scan.sum_defect < 1e-14


@pytest.mark.parametrize("name", BUNDLED)
def test_equiconvergence_scan_and_resolution(name):
    ev = bundled_evaluator(name, 24)
    scan = equiconvergence_scan(ev)
    assert scan.ells[0] == ev.result.m and scan.ells[-1] == 24
    assert scan.nonincreasing()
    assert scan.norms[-1] < 1e-13
    assert scan.cross_max < 1e-12 and scan.sum_defect < 1e-12
    assert scan.to_csv().splitlines()[0] == "ell,hs_norm"


@pytest.mark.parametrize("name", BUNDLED)
def test_tail_eigenvectors_push_forward(name):
    ev = bundled_evaluator(name, 16)
    res = ev.result
    gen = res.a0.data - res.q.data
    ipu = res.i_plus_u()
    for lab, (idx, blk) in ev.tail_gens.items():
        vals, vecs = np.linalg.eig(blk)
        for mu, vec in zip(vals, vecs.T):
            e = np.zeros(ev.dim, dtype=complex)
            e[idx] = vec
            y = ipu @ e
            assert np.linalg.norm(gen @ y - mu * y) < 1e-12 * np.linalg.norm(y)


def test_helpers():
    lay = tilde_free_diagonal(bundled_derived("per_generic"), 5).layout
    x = smooth_state(lay, seed=3)
    assert np.linalg.norm(x) == pytest.approx(1.0)
    assert np.array_equal(x, smooth_state(lay, seed=3))
    text = trace_csv([0.0, 1.0], [x, x])
    assert text.splitlines()[0] == "t,index,re,im"
    assert len(text.splitlines()) == 1 + 2 * lay.dim
    assert spectral_gamma(derive(PotentialSpec.from_maps(OMEGA, "per", p1={0: 0.1 + 0.2j}, p4={0: -0.3j}))) \
        == pytest.approx(0.3)
    mu1, mu2, _ = eig2(np.diag([1.0, 2.0]).astype(complex))
    assert (mu1, mu2) == (1.0, 2.0)
