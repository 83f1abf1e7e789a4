import json

import numpy as np
import pytest

from conftest import BUNDLED, GENERIC_BUNDLED, bundled_derived, oracle, pipeline
from diracsim.blockmat import build_q
from diracsim.freebasis import tilde_free_diagonal
from diracsim.potential import PotentialSpec, derive
from diracsim.simop import run_similarity
from diracsim.spectrum import (asymptotic_prediction, balanced_check, build_report, eig2, first_order,
                               fit_decay, match_multisets, oracle_spectrum, reduced_spectrum,
                               refined_eigenvalues, set_distance)

OMEGA = 2 * np.pi


@pytest.mark.parametrize("block", [
    [[1.0, 0.2], [0.3, -1.0]],
    [[0.5 + 0.1j, 2.0], [3.0, 0.4]],
    [[0.0, 1e-8], [1e-8, 1e-9]],
    [[2.0, 0.0], [0.0, 2.0]],
])
def test_eig2_against_quadratic_formula(block):
    blk = np.array(block, dtype=complex)
    mu1, mu2, _ = eig2(blk)
    tr, det = np.trace(blk), np.linalg.det(blk)
    disc = np.sqrt(tr * tr - 4 * det)
    assert set_distance((mu1, mu2), ((tr + disc) / 2, (tr - disc) / 2)) < 1e-12
    assert mu1 + mu2 == pytest.approx(tr, abs=1e-15)


def test_eig2_continues_first_entry_and_balances():
    mu1, mu2, route = eig2(np.array([[3.0, 0.01], [0.02, -1.0]], dtype=complex))
    assert route == "direct"
    assert abs(mu1 - 3.0) < abs(mu2 - 3.0)
    _, _, route = eig2(np.array([[0.0, 4.0], [1.0, 0.1]], dtype=complex))
    assert route == "balanced"


def test_refined_eigenvalues_match_dense_solver():
    rng = np.random.default_rng(5)
    mat = np.diag(np.arange(20.0)) + 0.1 * rng.standard_normal((20, 20))
    assert match_multisets(refined_eigenvalues(mat), np.linalg.eigvals(mat)) < 1e-12


def test_match_multisets_sizes():
    assert match_multisets([1, 2, 3], [3.0, 1.0, 2.0]) == 0
    with pytest.raises(ValueError):
        match_multisets([1], [1, 2])


@pytest.mark.parametrize("bc", ["per", "ap"])
def test_diagonal_potential_spectrum_closed_form(bc):
    spec = PotentialSpec.from_maps(OMEGA, bc, p1={0: 0.3}, p4={0: -0.1 + 0.05j})
    d = derive(spec)
    orc = oracle_spectrum(d, 8)
    eps = 0.5 if bc == "ap" else 0.0
    for n in range(-8, 9):
        want = (n + eps - 0.3, n + eps + 0.1 - 0.05j)
        assert set_distance(orc.components[n], want) < 1e-14
        assert set_distance(first_order(d, n), want) < 1e-15
        assert set_distance(asymptotic_prediction(d, n).points, want) < 1e-15


def test_dirichlet_diagonal_spectrum_closed_form():
    d = derive(PotentialSpec.from_maps(OMEGA, "dir", p1={0: 0.2}, p4={0: 0.4}))
    orc = oracle_spectrum(d, 6)
    for n in range(-6, 7):
        assert orc.components[n][0] == pytest.approx(n / 2 - 0.3, abs=1e-14)


def test_zero_potential_is_free_spectrum():
    d = derive(PotentialSpec.from_maps(OMEGA, "per"))
    orc = oracle_spectrum(d, 5)
    for n in range(-5, 6):
        assert orc.components[n] == pytest.approx((n, n))


def test_single_term_generic_prediction():
    # beta = 0.5, q2(1) = q3(-1) = 0.2; only l = -1 contributes
    d = derive(PotentialSpec.from_maps(OMEGA, "per", p1={0: 0.5}, p2={1: 0.2}, p3={-1: 0.2}))
    assert d.q2(1) == pytest.approx(0.2) and d.q3(-1) == pytest.approx(0.2)
    for n in (3, -4, 10):
        pred = asymptotic_prediction(d, n)
        want1 = n - 0.5 - 2 * np.pi * 0.04 / (2 * np.pi * (-1 - 2 * n) + np.pi)
        want2 = n - 2 * np.pi * 0.04 / (2 * np.pi * (-1 - 2 * n) - np.pi)
        assert pred.points[0] == pytest.approx(want1, abs=1e-15)
        assert pred.points[1] == pytest.approx(want2, abs=1e-15)
    orc = oracle_spectrum(d, 32)
    for n in (8, -8, 12):
        pred = asymptotic_prediction(d, n)
        second = set_distance(pred.points, orc.components[n])
        first = set_distance(first_order(d, n), orc.components[n])
        assert second < 1e-2 * first


def test_balanced_check_examples():
    p2 = {1: 0.1, -1: 0.1, 3: 0.05}
    mirror = {-k: v for k, v in p2.items()}
    d = derive(PotentialSpec.from_maps(OMEGA, "per", p1={0: 1.0}, p2=p2, p3=mirror))
    res = balanced_check(d, 0, 4)
    assert res.balanced and res.c == pytest.approx(1.0) and res.C == pytest.approx(1.0)
    d2 = derive(PotentialSpec.from_maps(OMEGA, "per", p1={0: 1.0}, p2=p2, p3={k: 2 * v for k, v in mirror.items()}))
    res2 = balanced_check(d2, 0, 4)
    assert res2.c == pytest.approx(2.0) and res2.C == pytest.approx(2.0)
    d3 = derive(PotentialSpec.from_maps(OMEGA, "per", p1={0: 1.0}, p2={1: 0.1}, p3={-1: 0.1, 1: 0.1}))
    assert not balanced_check(d3, 0, 4).balanced
    with pytest.raises(ValueError):
        balanced_check(derive(PotentialSpec.from_maps(OMEGA, "per")), 0, 4)


def test_fit_decay():
    ns = np.arange(2, 20)
    fit = fit_decay(ns, 3.0 * ns ** -2.5)
    assert fit.exponent == pytest.approx(2.5, abs=1e-12)
    assert fit.classes == {"l2": True, "l4/3": True, "l1": True}
    assert not fit_decay(ns[:4], ns[:4] ** -1.0).conclusive
    assert not fit_decay(ns, np.full(ns.shape, 1e-15)).conclusive
    assert fit_decay(ns, ns ** -0.6).classes == {"l2": True, "l4/3": False, "l1": False}


@pytest.mark.parametrize("name", BUNDLED)
def test_reduced_spectrum_matches_oracle(name):
    d, res = pipeline(name, 24)
    orc = oracle(name, 24)
    assert match_multisets(reduced_spectrum(res), orc.values) < 1e-12 * max(1.0, np.max(np.abs(orc.values)))


@pytest.mark.parametrize("name", BUNDLED)
def test_second_order_beats_first_order(name):
    d, res = pipeline(name, 48)
    report = build_report(d, res, oracle=oracle(name, 48))
    assert report.preferred_variant == "main"
    assert report.fits["second"].exponent > report.fits["first"].exponent
    for n in (10, -10, 20):
        assert report.second_residuals[n] < report.first_residuals[n]
    for name_v, vals in report.variant_residuals.items():
        assert np.median([vals[n] for n in (10, 15, 20)]) > 3 * np.median(
            [report.second_residuals[n] for n in (10, 15, 20)]), name_v


@pytest.mark.parametrize("name", GENERIC_BUNDLED)
def test_first_order_residual_decays(name):
    d, res = pipeline(name, 48)
    report = build_report(d, res, oracle=oracle(name, 48))
    assert report.fits["first"].exponent > 0.5


def test_oracle_stable_under_window_growth():
    a, b = oracle("per_generic", 32), oracle("per_generic", 48)
    for n in range(-16, 17):
        assert set_distance(a.components[n], b.components[n]) < 1e-12


def test_report_serialisation():
    d, res = pipeline("per_generic", 24)
    report = build_report(d, res, n_range=(0, 6))
    lines = report.to_csv().splitlines()
    assert lines[0].split(",")[:3] == ["n", "predicted1_re", "predicted1_im"]
    assert len(lines) == 1 + 13
    summary = json.loads(report.to_json())
    assert summary["branch"] == "generic" and summary["m"] == res.m


def test_resonant_prediction_splits_around_common_shift():
    d = bundled_derived("per_resonant")
    assert d.branch == "resonantInteger"
    for n in (5, -7):
        p = asymptotic_prediction(d, n).points
        shift = 0.5 * (p[0] + p[1])
        assert shift.real == pytest.approx(first_order(d, n)[0].real, abs=0.05)


def test_pipeline_from_scratch_matches_cache():
    d = bundled_derived("ap_generic")
    a0 = tilde_free_diagonal(d, 12)
    res = run_similarity(a0, build_q(d, a0.layout), delta_p=d.delta_p)
    assert match_multisets(reduced_spectrum(res), oracle_spectrum(d, 12).values) < 1e-12


def test_equal_means_use_coinciding_point_prediction():
    d = derive(PotentialSpec.from_maps(OMEGA, "per", p2={1: 0.1, -1: 0.05}, p3={-1: 0.1, 2: 0.05}))
    assert d.branch == "generic" and d.r == 0
    orc = oracle_spectrum(d, 32)
    for n in (6, -9, 12):
        pred = asymptotic_prediction(d, n).points
        assert all(np.isfinite(pred))
        assert set_distance(pred, orc.components[n]) < 0.1 * set_distance(first_order(d, n), orc.components[n])
