import dataclasses
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from oracles import spreadsheet_cost
from parapod import (AdaptiveParareal, CostModel, DiagnosticsUnavailableError, ErrorCurve,
                     MetricError, PararealRun, PODBasis, ProblemSpec, TimePartition,
                     build_grid, coarse_accuracy_diagnostics, fine_propagate,
                     iterate_zero, plain_iteration, reference_trajectory, relative_error,
                     speedup_model)
from parapod.analysis import _cost_par_collapsed, _cost_par_sum


def kolmogorov_1d(res=32, eps=0.5, **kw):
    return build_grid(ProblemSpec(diffusion=eps, dim=1, final_time=4.0, warmup_time=1.0, **kw),
                      res)


def partition(N=4, coarse=0.1):
    return TimePartition(1.0, 1.0 + 0.5 * N, N, 0.01, coarse, 5)


# -- relative_error --------------------------------------------------------------

def test_relative_error_examples():
    M = sp.identity(5, format="csr")
    ref = np.array([6.0, 8.0, 0.0, 0.0, 0.0])
    assert relative_error(ref, ref, M) == 0.0
    assert relative_error(2 * ref, ref, M) == pytest.approx(1.0, rel=1e-15)
    assert relative_error(ref + np.array([3.0, 4.0, 0, 0, 0]), ref, M) == pytest.approx(0.5)


def test_relative_error_uses_mass_weighting():
    M = sp.diags([4.0, 1.0]).tocsr()
    assert relative_error(np.array([2.0, 0.0]), np.array([1.0, 0.0]), M) == pytest.approx(1.0)
    assert relative_error(np.array([1.0, 1.0]), np.array([1.0, 0.0]), M) == pytest.approx(0.5)


def test_relative_error_zero_reference():
    with pytest.raises(MetricError):
        relative_error(np.ones(3), np.zeros(3), sp.identity(3, format="csr"))


# |s| is kept away from zero: forming Uref + s*e and subtracting Uref again
# loses about eps*|Uref|/|s*e| in relative terms before the metric is applied
@given(st.integers(0, 2 ** 32 - 1),
       st.one_of(st.just(0.0), st.floats(1e-2, 1e3), st.floats(-1e3, -1e-2)))
def test_relative_error_is_homogeneous(seed, s):
    rng = np.random.default_rng(seed)
    M = sp.diags(rng.uniform(0.5, 2.0, 8)).tocsr()
    ref, e = rng.standard_normal(8), rng.standard_normal(8)
    lhs = relative_error(ref + s * e, ref, M)
    rhs = abs(s) * relative_error(ref + e, ref, M)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


# -- reference_trajectory --------------------------------------------------------

def test_reference_with_zero_operator_is_constant():
    s = kolmogorov_1d(16, initial_condition=lambda x: np.cos(x[:, 0]))
    s = dataclasses.replace(s, operator_terms=(), load_terms=())
    ref = reference_trajectory(s, partition(N=3))
    h = s.initial_state()
    for n in range(4):
        np.testing.assert_allclose(ref[n], h, rtol=0, atol=1e-12)


def test_reference_matches_chained_fine_solves_bitwise():
    s = kolmogorov_1d(16)
    p = partition(N=3)
    ref = reference_trajectory(s, p)
    u, _ = fine_propagate(s, 0.0, p.warmup_time, s.initial_state(), p.fine_step)
    assert np.array_equal(ref[0], u)
    for n in range(3):
        u, _ = fine_propagate(s, p.t(n), p.t(n + 1), u, p.fine_step)
        assert np.array_equal(ref[n + 1], u)


def test_reference_cache_round_trip(tmp_path, monkeypatch):
    s = kolmogorov_1d(16)
    p = partition(N=2)
    monkeypatch.setenv("PARAPOD_CACHE_DIR", str(tmp_path))
    first = reference_trajectory(s, p)
    files = list(tmp_path.glob("reference_*.npy"))
    assert len(files) == 1
    stamp = files[0].stat().st_mtime_ns
    second = reference_trajectory(s, p)
    assert first.tobytes() == second.tobytes()
    assert files[0].stat().st_mtime_ns == stamp
    reference_trajectory(kolmogorov_1d(16, eps=0.25), p)
    assert len(list(tmp_path.glob("reference_*.npy"))) == 2


def test_reference_is_hash_stable_across_processes_of_same_config(tmp_path):
    s = kolmogorov_1d(16)
    p = partition(N=2)
    reference_trajectory(s, p, cache_dir=tmp_path)
    reference_trajectory(kolmogorov_1d(16), partition(N=2), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("reference_*.npy"))) == 1


def test_callable_inputs_are_not_cached(tmp_path):
    s = kolmogorov_1d(16, initial_condition=lambda x: np.sin(x[:, 0]))
    reference_trajectory(s, partition(N=2), cache_dir=tmp_path)
    assert not list(tmp_path.iterdir())


# -- error curves and diagnostics ------------------------------------------------

def test_error_curve_helpers():
    errors = np.array([[0.0, 0.5, 0.9], [0.0, 0.0, 2e-3], [0.0, 0.0, 5e-4]])
    nan = np.full((3, 3), np.nan)
    curve = ErrorCurve(np.array([1.0, 2.0, 3.0]), errors, nan, nan.copy())
    assert curve.max_error(0) == 0.9
    assert curve.iterations_to(1e-3) == 2
    assert curve.iterations_to(1e-5) is None
    rows = list(curve.rows())
    assert len(rows) == 9 and rows[5] == (1, 2, 3.0, 2e-3)
    assert list(curve.diagnostic_rows()) == []


@pytest.fixture(scope="module")
def small_run():
    s = kolmogorov_1d()
    p = partition()
    est = AdaptiveParareal(tol=0.0, max_iter=3).fit(s, p)
    return s, p, est.run_, reference_trajectory(s, p)


def test_diagnostics_cover_every_computed_pair(small_run):
    s, p, run_, ref = small_run
    curve = coarse_accuracy_diagnostics(run_, ref, s.mass)
    assert curve.errors.shape == (4, p.n_subintervals + 1)
    assert np.all(curve.errors >= 0)
    for k in range(1, 4):
        for n in range(p.n_subintervals + 1):
            computed = n >= k + 1
            assert np.isnan(curve.fg_gap[k, n]) != computed
            if computed:
                assert curve.fg_gap[k, n] >= 0 and curve.coarse_err[k, n] >= 0
    assert np.all(np.isnan(curve.fg_gap[0]))
    rows = list(curve.diagnostic_rows())
    assert len(rows) == sum(p.n_subintervals - k for k in range(1, 4))


def test_diagnostics_missing_terms(small_run):
    s, _, run_, ref = small_run
    broken = dataclasses.replace(run_, coarse_old=[{}] * len(run_.coarse_old))
    with pytest.raises(DiagnosticsUnavailableError):
        coarse_accuracy_diagnostics(broken, ref, s.mass)


def test_full_basis_coarse_has_vanishing_diagnostics():
    s = kolmogorov_1d(16)
    p = partition(N=4, coarse=0.01)
    ref = reference_trajectory(s, p)
    L = np.linalg.cholesky(s.mass.toarray())
    basis = PODBasis.from_modes(np.linalg.inv(L).T, mass=s.mass)
    run_ = PararealRun(partition=p, mode="plain", u0=ref[0], basis0=basis)
    U0, coarse = iterate_zero(s, p, ref[0], basis)
    run_.iterates.append(U0)
    run_.fine.append({})
    run_.coarse_new.append(coarse)
    run_.coarse_old.append({})
    for _ in range(2):
        plain_iteration(run_, s)
    curve = coarse_accuracy_diagnostics(run_, ref, s.mass)
    assert np.nanmax(curve.fg_gap) <= 1e-8
    assert np.nanmax(curve.coarse_err) <= 1e-8


def _scaled_curves(scale):
    p = partition(N=4, coarse=0.01)
    s = kolmogorov_1d(forcing_scale=scale,
                      initial_condition=lambda x: scale * np.sin(2 * x[:, 0]))
    run_ = AdaptiveParareal(tol=0.0, max_iter=3).fit(s, p).run_
    return coarse_accuracy_diagnostics(run_, reference_trajectory(s, p), s.mass)


@pytest.fixture(scope="module")
def unscaled_curves():
    return _scaled_curves(1.0)


def test_curves_are_scale_invariant_for_exact_scaling(unscaled_curves):
    # a power of two scales every floating-point operation exactly
    a, b = unscaled_curves, _scaled_curves(8.0)
    for name in ("errors", "fg_gap", "coarse_err"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-12)


@pytest.mark.xfail(strict=True, reason="rounding of the scaled inputs is amplified by the "
                   "squared conditioning of the snapshot Gram matrix in the trailing modes")
def test_curves_are_scale_invariant_by_ten(unscaled_curves):
    a, b = unscaled_curves, _scaled_curves(10.0)
    for name in ("fg_gap", "coarse_err"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-12)


def test_curves_scaled_by_ten_agree_to_rounding_amplification(unscaled_curves):
    a, b = unscaled_curves, _scaled_curves(10.0)
    for name in ("errors", "fg_gap", "coarse_err"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-7)
    for name in ("fg_gap", "coarse_err"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-10)


# -- cost model ------------------------------------------------------------------

SAMPLE = dict(C_f=1000.0, C_p1=0.5, C_p2=20.0, C_p3=20.0, N_g=2_097_152, N=200, k_max=10,
              m_max=50, n_s=101, n_max=150, interval=5.0, fine_step=0.01, coarse_step=0.5,
              warmup_time=5.0)


def test_sample_constants_match_spreadsheet():
    sp_ = speedup_model(CostModel(**SAMPLE))
    seq, par = spreadsheet_cost(**SAMPLE)
    assert sp_.cost_par == pytest.approx(par, rel=1e-12)
    assert sp_.cost_seq == pytest.approx(seq, rel=1e-12)
    assert sp_.cost_par_collapsed == pytest.approx(par, rel=1e-12)
    assert sp_.speedup_exact == pytest.approx(seq / par, rel=1e-12)


def test_sample_constants_closed_form():
    sp_ = speedup_model(CostModel(**SAMPLE))
    assert sp_.speedup_approx == min(200 / 10, 500 * 1000 / (20 * 50))


def test_trivial_model_gives_N():
    cm = CostModel(C_f=3.0, C_p1=0.0, C_p2=0.0, C_p3=0.0, N_g=1000, N=16, k_max=1, m_max=5,
                   n_s=11, n_max=20, interval=1.0, fine_step=0.01, coarse_step=0.1,
                   warmup_time=0.0)
    assert speedup_model(cm).speedup_exact == pytest.approx(16.0, rel=1e-14)


def test_dominant_cost_keeps_fine_and_augmentation_terms():
    cm = CostModel(**SAMPLE)
    sp_ = speedup_model(cm)
    K, N = cm.k_max, cm.N
    expected = (cm.warmup_time / cm.fine_step * cm.tau_F
                + K * (cm.interval / cm.fine_step * cm.tau_F + (N - (K + 1) / 2) * cm.T_A))
    assert sp_.cost_par_dominant == pytest.approx(expected, rel=1e-14)
    assert sp_.cost_par_dominant <= sp_.cost_par


cost_models = st.builds(
    lambda cf, c1, c2, c3, ng, N, kfrac, m, ns, nmax, S, Sc, w: CostModel(
        C_f=cf, C_p1=c1, C_p2=c2, C_p3=c3, N_g=ng, N=N, k_max=max(1, round(kfrac * N)),
        m_max=m, n_s=ns, n_max=nmax, interval=S * Sc * 0.001, fine_step=0.001,
        coarse_step=S * 0.001, warmup_time=w * S * Sc * 0.001),
    st.floats(0.1, 1e4), st.floats(0.0, 10.0), st.floats(0.0, 100.0), st.floats(0.0, 100.0),
    st.integers(10, 10 ** 7), st.integers(1, 500), st.floats(0.0, 1.0), st.integers(1, 200),
    st.integers(1, 500), st.integers(1, 500), st.integers(1, 100), st.integers(1, 50),
    st.integers(0, 3))


@given(cost_models)
def test_sum_and_collapsed_forms_agree(cm):
    assert _cost_par_collapsed(cm) == pytest.approx(_cost_par_sum(cm), rel=1e-12)


@given(cost_models)
def test_fine_sweeps_bound_the_speedup(cm):
    sp_ = speedup_model(cm)
    bound = sp_.cost_seq / (cm.k_max * (cm.interval / cm.fine_step) * cm.tau_F)
    assert sp_.speedup_exact <= bound * (1 + 1e-12)


@pytest.mark.parametrize("field, value", [("C_f", 0.0), ("N", -1), ("C_p2", -1.0),
                                          ("N_g", math.inf), ("coarse_step", 10.0)])
def test_cost_model_validation(field, value):
    with pytest.raises(ValueError):
        CostModel(**{**SAMPLE, field: value})


def test_pure_functions_leave_model_untouched():
    cm = CostModel(**SAMPLE)
    before = dataclasses.asdict(cm)
    speedup_model(cm)
    assert dataclasses.asdict(cm) == before


def test_coarse_gap_medians_do_not_grow(small_run):
    s, p, run_, ref = small_run
    curve = coarse_accuracy_diagnostics(run_, ref, s.mass)
    medians = [np.nanmedian(curve.fg_gap[k]) for k in range(1, 4)]
    assert all(b <= a for a, b in zip(medians, medians[1:]))
