import dataclasses

import numpy as np
import pytest
from sklearn.base import clone

from oracles import pod_oracle
from parapod import (AdaptiveParareal, ConfigurationError, PararealRun, PODBasis,
                     ProblemSpec, SolverError, TimePartition, adaptive_iteration, build_grid,
                     error_curve, iterate_zero, plain_iteration, reference_trajectory,
                     relative_error, start_run, stopping, warmup)
from parapod.parareal import DRIVER_RANK_TOL


def kolmogorov_1d(res=32, eps=0.5):
    return build_grid(ProblemSpec(diffusion=eps, dim=1, final_time=4.0, warmup_time=1.0), res)


def partition(N=6, interval=0.5, warmup_time=1.0, fine=0.01, coarse=0.1, stride=5):
    return TimePartition(warmup_time, warmup_time + N * interval, N, fine, coarse, stride)


def full_basis(system):
    L = np.linalg.cholesky(system.mass.toarray())
    return PODBasis.from_modes(np.linalg.inv(L).T, mass=system.mass)


def zero_system(res=16):
    s = kolmogorov_1d(res)
    spec = dataclasses.replace(s.spec, initial_condition=lambda x: np.sin(x[:, 0]) + 0.3)
    s = dataclasses.replace(s, spec=spec)
    return dataclasses.replace(s, operator_terms=(), load_terms=())


@pytest.fixture(scope="module")
def system():
    return kolmogorov_1d()


@pytest.fixture(scope="module")
def part():
    return partition()


@pytest.fixture(scope="module")
def reference(system, part):
    return reference_trajectory(system, part)


# -- TimePartition ---------------------------------------------------------------

def test_partition_times():
    p = partition(N=4, interval=0.5, warmup_time=1.0)
    np.testing.assert_allclose(p.times, [1.0, 1.5, 2.0, 2.5, 3.0])
    assert p.fine_steps_per_interval == 50 and p.coarse_steps_per_interval == 5


@pytest.mark.parametrize("kwargs, field", [
    (dict(N=0), "n_subintervals"),
    (dict(coarse=0.3), "coarse_step"),
    (dict(fine=0.03), "fine_step"),
    (dict(warmup_time=1.005, fine=0.01), "warmup_time"),
    (dict(stride=0), "snapshot_stride"),
])
def test_partition_validation(kwargs, field):
    with pytest.raises(ConfigurationError) as info:
        partition(**kwargs)
    assert info.value.field == field


def test_partition_requires_final_after_warmup():
    with pytest.raises(ConfigurationError):
        TimePartition(2.0, 1.0, 2, 0.01, 0.1)


# -- warmup ----------------------------------------------------------------------

def test_warmup_snapshot_count(system):
    p = TimePartition(0.1, 0.6, 1, 0.01, 0.1, 5)
    _, _, snaps = warmup(system, p, 1.0 - 5e-6)
    assert snaps.n_snapshots == 3


def test_warmup_with_zero_operator():
    s = zero_system()
    p = partition(N=2)
    u0, basis, _ = warmup(s, p, 1.0 - 5e-6)
    h = s.initial_state()
    np.testing.assert_allclose(u0, h, rtol=0, atol=1e-13)
    assert basis.n_components_ == 1
    mode = basis.modes_[:, 0] * np.sign(basis.modes_[:, 0] @ h)
    np.testing.assert_allclose(mode, h / np.sqrt(h @ (s.mass @ h)), atol=1e-12)


def test_warmup_dimension_matches_jacobi_oracle():
    s = kolmogorov_1d(res=64)
    p = TimePartition(5.0, 6.0, 1, 0.01, 0.1, 5)
    gamma1 = 1.0 - 5.0e-6
    _, basis, snaps = warmup(s, p, gamma1)
    _, sq, m = pod_oracle(snaps.columns, s.mass, gamma1, rank_tol=DRIVER_RANK_TOL)
    assert basis.n_components_ == m
    # eigenvalues carry an absolute error of order eps * lambda_1
    np.testing.assert_allclose(basis.singular_values_ ** 2, sq ** 2, rtol=0,
                               atol=1e-12 * sq[0] ** 2)


def test_zero_warmup_is_rejected(system):
    p = TimePartition(0.0, 1.0, 2, 0.01, 0.1)
    with pytest.raises(ConfigurationError, match="warmup span required"):
        warmup(system, p, 0.9)


# -- iterate_zero ----------------------------------------------------------------

def test_iterate_zero_single_subinterval(system):
    p = partition(N=1)
    u0, basis, _ = warmup(system, p, 1.0 - 5e-6)
    U, coarse = iterate_zero(system, p, u0, basis)
    assert U.shape == (2, system.n_dof)
    np.testing.assert_array_equal(U[0], u0)
    np.testing.assert_array_equal(U[1], coarse[0])


def test_iterate_zero_full_basis_matches_fine(system):
    p = partition(N=4, coarse=0.01)
    ref = reference_trajectory(system, p)
    U, _ = iterate_zero(system, p, ref[0], full_basis(system))
    for n in range(5):
        assert relative_error(U[n], ref[n], system.mass) <= 1e-8


def test_iterate_zero_zero_operator_keeps_state():
    s = zero_system()
    p = partition(N=3)
    u0, basis, _ = warmup(s, p, 1.0 - 5e-6)
    U, _ = iterate_zero(s, p, u0, basis)
    for n in range(4):
        assert relative_error(U[n], u0, s.mass) <= 1e-12


# -- exactness and convergence ---------------------------------------------------

@pytest.mark.parametrize("mode", ["adaptive", "plain"])
def test_parareal_exactness(mode, system, part, reference):
    est = AdaptiveParareal(mode=mode, tol=0.0).fit(system, part)
    tol_lin = est.tol_lin
    assert est.n_iter_ == part.n_subintervals
    for k, U in enumerate(est.run_.iterates):
        np.testing.assert_array_equal(U[0], est.run_.u0)
        for n in range(min(k, part.n_subintervals) + 1):
            assert relative_error(U[n], reference[n], system.mass) <= 10 * tol_lin


def test_exact_coarse_converges_after_one_iteration(system):
    p = partition(N=4, coarse=0.01)
    ref = reference_trajectory(system, p)
    basis = full_basis(system)
    run_ = PararealRun(partition=p, mode="plain", u0=ref[0], basis0=basis)
    U0, coarse = iterate_zero(system, p, ref[0], basis)
    run_.iterates.append(U0)
    run_.coarse_new.append(coarse)
    plain_iteration(run_, system)
    for n in range(5):
        assert relative_error(run_.current[n], ref[n], system.mass) <= 1e-8


def test_window_size_speeds_up_convergence(system, part, reference):
    its = {}
    for m_l, p in [(0, 0), (1, 1)]:
        est = AdaptiveParareal(m_l=m_l, p=p, tol=0.0).fit(system, part)
        its[(m_l, p)] = error_curve(est.run_, reference, system.mass).iterations_to(1e-3)
    assert None not in its.values()
    assert its[(1, 1)] <= its[(0, 0)]


def test_plain_mode_plateaus_above_adaptive(system, reference, part):
    curves = {}
    for mode in ("plain", "adaptive"):
        est = AdaptiveParareal(mode=mode, tol=0.0, max_iter=3).fit(system, part)
        curves[mode] = error_curve(est.run_, reference, system.mass)
    assert curves["plain"].max_error(3) > curves["adaptive"].max_error(3)


def test_iterate_shapes_and_bookkeeping(system, part):
    est = AdaptiveParareal(tol=0.0, max_iter=2).fit(system, part)
    run_ = est.run_
    N = part.n_subintervals
    assert len(run_.iterates) == 3 and run_.iterates[0].shape == (N + 1, system.n_dof)
    assert sorted(run_.fine[1]) == list(range(N))
    assert sorted(run_.coarse_new[2]) == list(range(2, N))
    assert set(run_.pod_dims[(1, 3)]) == {"pre", "window_inputs", "window", "final"}
    assert run_.pod_dims[(1, 3)]["final"] <= run_.pod_dims[(1, 3)]["window"] + 1
    assert {"warmup", "iteration0", "fine", "update", "sweep"} <= set(run_.timings)
    assert run_.stop_reason == "k_max"
    assert len(run_.changes) == 2


# -- stopping --------------------------------------------------------------------

def _stub_run(changes, N=5):
    run_ = PararealRun(partition=partition(N=N), mode="plain", u0=None, basis0=None)
    run_.iterates = [None] * (len(changes) + 1)
    run_.changes = list(changes)
    return run_


def test_stopping_identical_iterates():
    run_ = _stub_run([0.5, 0.0])
    assert stopping(run_) and run_.stop_reason == "converged"


def test_stopping_at_k_max():
    run_ = _stub_run([0.5, 0.4])
    assert stopping(run_, k_max=2) and run_.stop_reason == "k_max"


def test_stopping_default_cap_is_N():
    assert stopping(_stub_run([0.1] * 5, N=5))
    assert not stopping(_stub_run([0.1] * 4, N=5))


def test_early_iterations_are_not_converged(system, part):
    seen = []
    AdaptiveParareal(tol=1e-8, max_iter=2).fit(
        system, part, callback=lambda r: seen.append(r.k >= 1 and stopping(r, 1e-8, 99)))
    assert seen[1] is False


# -- concurrency, failures, eviction ---------------------------------------------

@pytest.mark.parametrize("mode", ["adaptive", "plain"])
def test_worker_count_does_not_change_results(mode, system, part):
    a = AdaptiveParareal(mode=mode, tol=0.0, max_iter=3, n_workers=1).fit(system, part)
    b = AdaptiveParareal(mode=mode, tol=0.0, max_iter=3, n_workers=3).fit(system, part)
    for Ua, Ub in zip(a.run_.iterates, b.run_.iterates):
        assert np.array_equal(Ua, Ub)


def test_solver_failure_carries_iteration_context(system, part):
    run_ = start_run(system, part, "adaptive", 1.0 - 5e-6)
    with pytest.raises(SolverError) as info:
        adaptive_iteration(run_, system, 1.0 - 5e-6, 1.0 - 2e-8, 1, 1, tol_lin=1e-30)
    ctx = info.value.context
    assert ctx["k"] == 1 and ctx["phase"] == "fine" and 0 <= ctx["n"] < part.n_subintervals


@pytest.mark.parametrize("p", [0, 1, 2])
def test_store_keeps_only_needed_iterations(p, system, part):
    est = AdaptiveParareal(p=p, tol=0.0, max_iter=4).fit(system, part)
    iters = {k for k, _ in est.run_.store.keys()}
    assert all(k >= est.n_iter_ + 1 - p for k in iters)


# -- estimator API ---------------------------------------------------------------

def test_estimator_params_and_predict(system, part):
    est = AdaptiveParareal(m_l=0, p=2, max_iter=2)
    assert clone(est).get_params() == est.get_params()
    est.fit(system, part)
    assert est.predict().shape == (part.n_subintervals + 1, system.n_dof)
    np.testing.assert_array_equal(est.predict(3), est.solution_[3])
    np.testing.assert_allclose(est.times_, part.times)


@pytest.mark.parametrize("params, field", [
    (dict(mode="fast"), "mode"),
    (dict(gamma3=1.5), "gamma3"),
    (dict(gamma1=0.0), "gamma1"),
    (dict(m_l=-1), "m_l"),
    (dict(p=0.5), "p"),
    (dict(n_workers=0), "n_workers"),
])
def test_estimator_validation(params, field, system, part):
    with pytest.raises(ConfigurationError) as info:
        AdaptiveParareal(**params).fit(system, part)
    assert info.value.field == field


def test_warmup_failure_carries_phase(system, part):
    with pytest.raises(SolverError) as info:
        warmup(system, part, 0.9, tol_lin=1e-30)
    assert info.value.context["phase"] == "warmup" and info.value.context["k"] == 0
