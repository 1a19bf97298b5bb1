import math

import numpy as np
import pytest

import vgpssm.training as training
from vgpssm.exceptions import ConfigurationError, DegenerateWeightsError, InvalidArgumentError
from vgpssm.kernels import KernelSpec
from vgpssm.model import GpssmModel, LikelihoodSpec
from vgpssm.smoothing import (
    GridSpec,
    ParticleTrajectories,
    bootstrap_fixed_lag_smoother,
    build_auxiliary,
    grid_smoother,
)
from vgpssm.sparse import (
    InducingPosterior,
    accumulate_stats,
    kl_qu_pu,
    optimal_qu,
    predict_transition,
)
from vgpssm.training import (
    PowerSchedule,
    TrainingConfig,
    TrainingState,
    adam_direction,
    apply_gradient,
    elbo_estimate,
    initialize_model,
    online_update,
    pack_theta,
    segment_coverage,
    svi_edge_multipliers,
    svi_stats,
    theta_gradient,
    train,
    unpack_theta,
)

from oracles import constant_drift_evidence


def gauss_model(M=4, D=1, family="matern32", Q=0.3, R=0.5, sv=1.2, ell=0.9, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-2, 2, size=(M, D))
    return GpssmModel(KernelSpec(family, np.full(D, ell), sv), np.full(D, Q),
                      LikelihoodSpec.gaussian(np.full(D, R)), Z)


def poisson_model(M=5, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-1.5, 1.5, size=(M, 2))
    return GpssmModel(KernelSpec("se", [1.1, 0.8], 0.9), [0.2],
                      LikelihoodSpec.poisson(alpha=[0.7], beta=0.3, observed_state_index=1), Z,
                      structure="second_order", dt=0.5)


def random_posterior(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    M, n = model.n_inducing, model.n_outputs
    sig = []
    for _ in range(n):
        a = scale * rng.normal(size=(M, M))
        sig.append(a @ a.T + 0.05 * np.eye(M))
    return InducingPosterior.from_moments(rng.normal(size=(M, n)), np.stack(sig))


def random_trajectories(D, S, L, E, seed, counts=False):
    rng = np.random.default_rng(seed)
    logw = rng.normal(size=(S + 1, L))
    logw -= np.log(np.sum(np.exp(logw), axis=1, keepdims=True))
    obs = rng.poisson(2.0, size=(S, E)).astype(float) if counts else rng.normal(size=(S, E))
    return ParticleTrajectories(rng.normal(size=(S + 1, L, D)), rng.normal(size=(S, L, D)), logw,
                                obs, np.full(S + 1, float(L)), entropy=1.7)


def grid_linear_setup(T=10, seed=0, M=4):
    rng = np.random.default_rng(seed)
    m = GpssmModel(KernelSpec("se", [1.0], 1.0), [0.3], LikelihoodSpec.gaussian([0.4]),
                   np.linspace(-2, 2, M)[:, None])
    y = np.sin(0.8 * np.arange(T))[:, None] + 0.3 * rng.normal(size=(T, 1))
    return m, y, GridSpec((-5.0,), (5.0,), 201)


def grid_traj(model, q_u, y, grid):
    return grid_smoother(build_auxiliary(model, q_u), y, grid).to_trajectories()


# -- gradients ---------------------------------------------------------------------------


def fd_gradient(model, q_u, traj, h=1e-6):
    theta = pack_theta(model)
    out = {}
    for name, value in theta.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in theta.items()}
            minus = {k: v.copy() for k, v in theta.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (elbo_estimate(unpack_theta(model, plus), q_u, traj)
                      - elbo_estimate(unpack_theta(model, minus), q_u, traj)) / (2 * h)
        out[name] = g
    return out


def assert_gradients_close(analytic, numeric, rtol=1e-5):
    for name in numeric:
        a, n = np.ravel(analytic[name]), np.ravel(numeric[name])
        scale = max(np.max(np.abs(n)), 1e-3)
        err = np.max(np.abs(a - n)) / scale
        assert err <= rtol, f"{name}: relative error {err:.2e}"


@pytest.mark.parametrize("family", ["se", "matern32", "matern52"])
def test_gradient_matches_finite_differences_1d(family):
    m = gauss_model(family=family, seed=1)
    q = random_posterior(m, 2)
    traj = random_trajectories(1, 6, 5, 1, 3)
    assert_gradients_close(theta_gradient(m, q, traj), fd_gradient(m, q, traj))


def test_gradient_matches_finite_differences_2d():
    m = gauss_model(D=2, M=3, seed=4)
    q = random_posterior(m, 5)
    traj = random_trajectories(2, 5, 4, 2, 6)
    assert_gradients_close(theta_gradient(m, q, traj), fd_gradient(m, q, traj))


def test_gradient_matches_finite_differences_poisson_second_order():
    m = poisson_model(seed=7)
    q = random_posterior(m, 8)
    traj = random_trajectories(2, 5, 4, 1, 9, counts=True)
    assert_gradients_close(theta_gradient(m, q, traj), fd_gradient(m, q, traj))


def test_gaussian_noise_gradient_is_per_particle_sum():
    m = gauss_model(R=0.7)
    q = random_posterior(m, 1)
    traj = random_trajectories(1, 6, 5, 1, 2)
    W = np.exp(traj.log_weights[1:])
    resid2 = (traj.observations[:, None, 0] - traj.states[1:, :, 0]) ** 2
    expected = np.sum(W * (-0.5 + 0.5 * resid2 / 0.7))
    g = theta_gradient(m, q, traj)["log_noise_variance"][0]
    assert g == pytest.approx(expected, rel=1e-10)


def test_process_noise_stationary_at_residual_variance():
    """States on inducing inputs with collapsed q(u): B = 0, A selects one entry."""
    Z = np.array([[-1.0], [0.0], [1.0]])
    mu = np.array([[0.8], [-0.9], [0.1]])
    q = InducingPosterior.from_moments(mu, 1e-14 * np.eye(3)[None])
    path = np.array([0, 1, 2, 0, 2, 1, 1, 0, 2])
    X = Z[path]
    resid = X[1:, 0] - mu[path[:-1], 0]
    q_star = float(np.mean(resid**2))
    traj = ParticleTrajectories.from_states(X, observations=np.zeros((len(path) - 1, 1)))
    m = GpssmModel(KernelSpec("se", [0.7], 1.0), [q_star], LikelihoodSpec.gaussian([1.0]), Z)
    g = theta_gradient(m, q, traj)["log_process_noise"][0]
    assert abs(g) < 1e-6
    g2 = theta_gradient(m.with_params(process_noise=[2 * q_star]), q, traj)["log_process_noise"][0]
    assert g2 < -0.1


# -- ELBO -------------------------------------------------------------------------------------


def test_elbo_without_data_is_zero():
    m = gauss_model()
    q = InducingPosterior.prior(m)
    traj = bootstrap_fixed_lag_smoother(build_auxiliary(m, q), np.zeros((0, 1)), 200, 3, seed=0)
    assert elbo_estimate(m, q, traj) == pytest.approx(0.0, abs=1e-12)
    res = grid_smoother(build_auxiliary(m, q), np.zeros((0, 1)), GridSpec((-9.0,), (9.0,), 801))
    assert elbo_estimate(m, q, res.to_trajectories()) == pytest.approx(0.0, abs=1e-8)


def test_elbo_at_optimal_qx_is_aux_normalizer_minus_kl():
    m, y, grid = grid_linear_setup()
    q = random_posterior(m, 3)
    res = grid_smoother(build_auxiliary(m, q), y, grid)
    elbo = elbo_estimate(m, q, res.to_trajectories())
    assert elbo == pytest.approx(res.log_normalizer - kl_qu_pu(q, m), abs=1e-8)


def constant_function_model(q, r, sv):
    """SE kernel with a huge lengthscale and one inducing input: f(x) = u for all x."""
    return GpssmModel(KernelSpec("se", [1e6], sv), [q], LikelihoodSpec.gaussian([r]),
                      np.zeros((1, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_elbo_bounded_by_exact_evidence(seed):
    rng = np.random.default_rng(seed)
    qv, r, sv = rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.5, 2.0)
    ys = rng.normal(size=5)
    m = constant_function_model(qv, r, sv)
    grid = GridSpec((-10.0,), (10.0,), 801)
    q = InducingPosterior.prior(m)
    for _ in range(8):
        traj = grid_traj(m, q, ys[:, None], grid)
        q = optimal_qu(accumulate_stats(m, traj), m)
    traj = grid_traj(m, q, ys[:, None], grid)
    elbo = elbo_estimate(m, q, traj)
    evidence = constant_drift_evidence(qv, r, sv, ys)
    assert elbo <= evidence + 1e-6
    assert elbo > evidence - 3.0


def test_coordinate_ascent_never_decreases_elbo():
    m, y, grid = grid_linear_setup(T=10)
    q = InducingPosterior.prior(m)
    traj = grid_traj(m, q, y, grid)
    trace = [elbo_estimate(m, q, traj)]
    for _ in range(10):
        q = optimal_qu(accumulate_stats(m, traj), m)
        trace.append(elbo_estimate(m, q, traj))
        traj = grid_traj(m, q, y, grid)
        trace.append(elbo_estimate(m, q, traj))
    assert np.all(np.diff(trace) >= -1e-9)
    assert trace[-1] > trace[0]


def test_more_inducing_inputs_tighten_elbo():
    m8, y, grid = grid_linear_setup(M=8)
    Z = np.random.default_rng(0).permutation(np.linspace(-2.5, 2.5, 8))[:, None]
    traj = grid_traj(m8, random_posterior(m8.with_params(inducing_inputs=Z), 0), y, grid)
    values = []
    for M in range(2, 9):
        m = m8.with_params(inducing_inputs=Z[:M])
        values.append(elbo_estimate(m, optimal_qu(accumulate_stats(m, traj), m), traj))
    assert np.all(np.diff(values) >= -1e-9)
    assert values[-1] > values[0]


# -- hyperparameter steps -----------------------------------------------------------------


def test_apply_gradient_respects_learn_and_clipping():
    m = gauss_model()
    grads = {k: np.ones_like(v) for k, v in pack_theta(m).items()}
    new = apply_gradient(m, grads, 10.0, learn=("process_noise",), max_step=0.5)
    assert new.process_noise[0] == pytest.approx(m.process_noise[0] * math.exp(0.5), rel=1e-12)
    np.testing.assert_array_equal(new.kernel.lengthscales, m.kernel.lengthscales)
    np.testing.assert_array_equal(new.inducing_inputs, m.inducing_inputs)


def test_adam_first_step_is_sign_of_gradient():
    grads = {"a": np.array([3.0, -0.01]), "b": np.array([1e3])}
    direction, st = adam_direction(grads, None)
    np.testing.assert_allclose(direction["a"], [1.0, -1.0], rtol=1e-5)
    np.testing.assert_allclose(direction["b"], [1.0], rtol=1e-5)
    assert st["t"] == 1


def test_pack_unpack_round_trip():
    for m in (gauss_model(D=2, M=3), poisson_model()):
        back = unpack_theta(m, pack_theta(m))
        for k, v in pack_theta(back).items():
            np.testing.assert_allclose(v, pack_theta(m)[k], rtol=1e-14)


# -- training loop ------------------------------------------------------------------------


def test_full_damping_lands_on_optimum():
    m, y, grid = grid_linear_setup()
    cfg = TrainingConfig(rho=PowerSchedule(1.0, 1.0, 0.0), smoother="grid", grid=grid, learn=(),
                         max_iters=1)
    state = train(y, cfg, init=m)
    expected = optimal_qu(accumulate_stats(m, grid_traj(m, InducingPosterior.prior(m), y, grid)), m)
    np.testing.assert_array_equal(state.q_u.eta1, expected.eta1)
    np.testing.assert_array_equal(state.q_u.eta2, expected.eta2)


def test_same_seed_same_trace():
    rng = np.random.default_rng(0)
    y = np.cumsum(rng.normal(size=40))[:, None] * 0.2
    cfg = TrainingConfig(n_particles=50, lag=4, max_iters=4, min_iters=1, seed=3)
    a, b = train(y, cfg), train(y, cfg)
    assert a.elbo_trace == b.elbo_trace
    np.testing.assert_array_equal(a.q_u.eta2, b.q_u.eta2)
    c = train(y, TrainingConfig(n_particles=50, lag=4, max_iters=4, min_iters=1, seed=4))
    assert c.elbo_trace != a.elbo_trace


def test_resume_continues_identically():
    y = np.sin(0.5 * np.arange(40))[:, None]
    cfg = TrainingConfig(n_particles=50, lag=4, max_iters=6, min_iters=10, seed=1)
    full = train(y, cfg)
    half = train(y, TrainingConfig(n_particles=50, lag=4, max_iters=3, min_iters=10, seed=1))
    resumed = train(y, cfg, state=half)
    assert resumed.elbo_trace == full.elbo_trace


def test_svi_training_runs_and_scales():
    y = np.sin(0.3 * np.arange(60))[:, None]
    cfg = TrainingConfig(mode="svi", segment_length=15, n_particles=50, lag=4, max_iters=3,
                         min_iters=1, seed=0)
    state = train(y, cfg)
    assert len(state.elbo_trace) == 3 and np.all(np.isfinite(state.elbo_trace))


def test_callback_records():
    records = []
    y = np.sin(0.5 * np.arange(20))[:, None]
    train(y, TrainingConfig(n_particles=30, lag=3, max_iters=2, min_iters=5), callback=records.append)
    assert [r["iter"] for r in records] == [1, 2]
    assert set(records[0]) == {"iter", "elbo", "ess_min", "theta_digest"}


def test_degenerate_weights_retry_with_more_particles(monkeypatch):
    calls = []
    real = training.bootstrap_fixed_lag_smoother

    def flaky(aux, y, n, *args):
        calls.append(n)
        if len(calls) == 1:
            raise DegenerateWeightsError("boom", time_index=1)
        return real(aux, y, n, *args)

    monkeypatch.setattr(training, "bootstrap_fixed_lag_smoother", flaky)
    m, y, _ = grid_linear_setup()
    train(y, TrainingConfig(n_particles=20, lag=3, max_iters=1), init=m)
    assert calls == [20, 80]


@pytest.mark.parametrize("kwargs", [
    {"mode": "svi"},
    {"mode": "weird"},
    {"optimizer": "lbfgs"},
    {"smoother": "grid"},
    {"learn": ("everything",)},
    {"n_particles": 1},
    {"mode": "svi", "segment_length": 5, "rho": PowerSchedule(1.0, 1.0, 0.3)},
])
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        TrainingConfig(**kwargs)


def test_train_input_validation():
    with pytest.raises(InvalidArgumentError):
        train(np.zeros((1, 1)))
    with pytest.raises(InvalidArgumentError):
        train(np.array([[0.0], [np.nan], [1.0]]))
    with pytest.raises(ConfigurationError):
        train(np.zeros((5, 1)), TrainingConfig(mode="online"))
    with pytest.raises(InvalidArgumentError):
        train(np.zeros((5, 1)), TrainingConfig(mode="svi", segment_length=9))


def test_initialize_model_scale_matching():
    rng = np.random.default_rng(0)
    y = 3.0 * rng.normal(size=(500, 1))
    m = initialize_model(y, n_inducing=7)
    assert m.kernel.lengthscales[0] == pytest.approx(np.std(y), rel=1e-12)
    assert m.kernel.signal_variance == pytest.approx(np.var(np.diff(y[:, 0])), rel=1e-12)
    assert m.process_noise[0] == pytest.approx(0.1 * np.var(y), rel=1e-12)
    assert m.likelihood.noise_variance[0] == pytest.approx(np.var(y), rel=1e-12)
    assert m.n_inducing == 7


# -- SVI statistics --------------------------------------------------------------------------


def window(traj, a, b):
    return ParticleTrajectories(traj.states[a:b + 1], traj.prev_states[a:b],
                                traj.log_weights[a:b + 1], traj.observations[a:b],
                                traj.ess[a:b + 1])


def test_svi_full_segment_is_batch():
    m = gauss_model()
    traj = random_trajectories(1, 12, 6, 1, 0)
    a, b = svi_stats(m, traj, 12, 12), accumulate_stats(m, traj)
    np.testing.assert_array_equal(a.psi1, b.psi1)
    np.testing.assert_array_equal(a.psi2, b.psi2)


def test_svi_halving_segment_doubles_scale():
    m = gauss_model()
    seg = window(random_trajectories(1, 12, 6, 1, 0), 0, 3)
    a, b = svi_stats(m, seg, 12, 6), svi_stats(m, seg, 12, 3)
    np.testing.assert_allclose(b.psi1, 2 * a.psi1, rtol=1e-14)


def test_svi_rejects_bad_segment_length():
    m = gauss_model()
    traj = random_trajectories(1, 4, 3, 1, 0)
    with pytest.raises(InvalidArgumentError):
        svi_stats(m, traj, 4, 5)
    with pytest.raises(InvalidArgumentError):
        svi_stats(m, traj, 4, 0)


@pytest.mark.parametrize("T,S", [(12, 4), (10, 1), (9, 9), (15, 7)])
def test_svi_exhaustive_average_identity(T, S):
    m = gauss_model()
    traj = random_trajectories(1, T, 5, 1, T + S)
    segments = [svi_stats(m, window(traj, tau - 1, tau - 1 + S), T, S) for tau in range(1, T - S + 2)]
    avg1 = sum(s.psi1 for s in segments) / len(segments)
    avg2 = sum(s.psi2 for s in segments) / len(segments)
    per_t = [accumulate_stats(m, window(traj, t - 1, t)) for t in range(1, T + 1)]
    mult = svi_edge_multipliers(T, S)
    np.testing.assert_allclose(avg1, sum(c * s.psi1 for c, s in zip(mult, per_t)), atol=1e-10)
    np.testing.assert_allclose(avg2, sum(c * s.psi2 for c, s in zip(mult, per_t)), atol=1e-10)
    batch = accumulate_stats(m, traj)
    bound = sum(abs(c - 1) * np.abs(s.psi1) for c, s in zip(mult, per_t))
    assert np.all(np.abs(avg1 - batch.psi1) <= bound + 1e-10)
    assert mult.sum() == pytest.approx(T, rel=1e-12)


def test_segment_coverage_counts_by_enumeration():
    T, S = 11, 4
    counts = np.zeros(T, dtype=int)
    for tau in range(1, T - S + 2):
        counts[tau - 1: tau - 1 + S] += 1
    np.testing.assert_array_equal(segment_coverage(T, S), counts)


# -- online updates ------------------------------------------------------------------------------


def test_online_halves_equal_batch():
    m = gauss_model()
    traj = random_trajectories(1, 10, 6, 1, 11)
    state = TrainingState(model=m, q_u=InducingPosterior.prior(m))
    cfg = TrainingConfig(mode="online", n_particles=6)
    first, second = window(traj, 0, 4), window(traj, 4, 10)
    state = online_update(state, first.observations, cfg, trajectories=first)
    state = online_update(state, second.observations, cfg, trajectories=second)
    batch = optimal_qu(accumulate_stats(m, traj), m)
    np.testing.assert_allclose(state.q_u.eta1, batch.eta1, atol=1e-10)
    np.testing.assert_allclose(state.q_u.eta2, batch.eta2, atol=1e-10)


def test_online_empty_segment_is_noop():
    m = gauss_model()
    state = TrainingState(model=m, q_u=random_posterior(m, 0))
    assert online_update(state, np.zeros((0, 1))) is state


def test_online_update_does_not_increase_variance():
    m = gauss_model()
    state = TrainingState(model=m, q_u=InducingPosterior.prior(m), rng_state=None)
    y = np.sin(0.4 * np.arange(25))[:, None]
    new = online_update(state, y, TrainingConfig(mode="online", n_particles=100, lag=5))
    _, before = predict_transition(state.q_u, m, m.inducing_inputs)
    _, after = predict_transition(new.q_u, m, m.inducing_inputs)
    assert np.all(after <= before + 1e-12)
    assert np.all(np.linalg.eigvalsh(state.q_u.sigma[0] - new.q_u.sigma[0]) >= -1e-10)
    assert new.filter_particles.shape == (100, 1)


def test_online_dimension_mismatch():
    m = gauss_model()
    state = TrainingState(model=m, q_u=InducingPosterior.prior(m))
    with pytest.raises(InvalidArgumentError):
        online_update(state, np.zeros((3, 2)))
