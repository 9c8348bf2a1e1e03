from __future__ import annotations

import math

import numpy as np
import pytest

from multimix import ParseError, SampleSet, empirical_tv_continuous
from multimix.langevin import (
    GaussianComponent,
    LmcConfig,
    MixtureModel,
    ScoreField,
    SinusoidalNoise,
    SoftplusComponent,
    dump_mixture,
    dump_terminal_samples,
    exact_score,
    lmc_run,
    load_mixture,
    load_terminal_samples,
    mixture_score,
    perturb_score,
    sample_mixture,
    submixture,
    submixture_score,
    submixture_score_error,
    warm_start_diagnostic,
)
from multimix.rng import make_rng


def three_component_model() -> MixtureModel:
    return MixtureModel(
        [0.5, 0.3, 0.2],
        [
            GaussianComponent([0.0, 0.0], np.eye(2)),
            GaussianComponent([3.0, -1.0], [[1.5, 0.4], [0.4, 0.9]]),
            SoftplusComponent([-2.0, 2.5], [[0.8, -0.2], [-0.2, 1.2]], [1.0, 0.5], 2.0),
        ],
    )


def test_component_validation():
    with pytest.raises(ValueError, match="symmetric"):
        GaussianComponent([0.0, 0.0], [[1.0, 0.5], [0.2, 1.0]])
    with pytest.raises(ValueError, match="positive definite"):
        GaussianComponent([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError, match="nonzero"):
        SoftplusComponent([0.0], [[1.0]], [0.0], 1.0)
    with pytest.raises(ValueError, match="nonnegative"):
        SoftplusComponent([0.0], [[1.0]], [1.0], -1.0)


def test_mixture_validation():
    g = GaussianComponent([0.0], [[1.0]])
    with pytest.raises(ValueError, match="sum to one"):
        MixtureModel([0.5, 0.4], [g, g])
    with pytest.raises(ValueError, match="positive"):
        MixtureModel([1.2, -0.2], [g, g])
    far = GaussianComponent([4.0], [[1.0]])
    with pytest.raises(ValueError, match="separation"):
        MixtureModel([0.5, 0.5], [g, far], separation=3.0)
    m = MixtureModel([0.5, 0.5], [g, far], separation=5.0)
    assert m.separation == 5.0


def test_gaussian_regularity_numbers():
    c = GaussianComponent([0.0, 0.0], [[2.0, 0.0], [0.0, 0.5]])
    assert c.beta == pytest.approx(2.0, rel=1e-12)
    assert c.alpha == pytest.approx(0.5, rel=1e-12)
    m = MixtureModel([1.0], [c])
    assert m.kappa == pytest.approx(4.0, rel=1e-12)
    assert m.gradient_bound == pytest.approx(math.sqrt(2.0 * 4.0 * 2.0), rel=1e-12)


def test_softplus_component_is_a_normalized_density():
    c = SoftplusComponent([0.5], [[2.0]], [1.3], 2.0)
    xs = np.linspace(-14.0, 14.0, 200_001)
    dens = np.exp(-c.potential(xs[:, None]))
    assert np.trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-9)
    assert np.trapezoid(xs * dens, xs) == pytest.approx(c.mean[0], abs=1e-10)
    assert np.abs(c.grad(c.mode[None, :])).max() <= 1e-12
    # convex ramp: convexity floor unchanged, smoothness up by at most a/4*|w|^2
    assert c.alpha == pytest.approx(0.5, rel=1e-12)
    assert c.beta == pytest.approx(0.5 + 0.25 * 2.0 * 1.3**2, rel=1e-12)


def test_softplus_sampler_matches_quadrature_mean():
    c = SoftplusComponent([0.2, -0.4], [[1.0, 0.3], [0.3, 0.8]], [0.7, -1.1], 1.5)
    X = c.sample(make_rng(11), 200_000)
    err = np.linalg.norm(X.mean(axis=0) - c.mean)
    assert err <= 4.0 * math.sqrt(X.var(axis=0).sum() / X.shape[0])


def test_score_single_gaussian_is_minus_x():
    m = MixtureModel([1.0], [GaussianComponent([0.0, 0.0], np.eye(2))])
    x = np.array([0.7, -1.9])
    assert np.array_equal(mixture_score(m, x), -x)


def test_score_vanishes_at_symmetry_point():
    m = MixtureModel(
        [0.5, 0.5],
        [GaussianComponent([-2.0, 1.0], np.eye(2)), GaussianComponent([2.0, -1.0], np.eye(2))],
    )
    assert np.abs(mixture_score(m, np.zeros(2))).max() <= 1e-14


def test_score_matches_finite_differences():
    m = three_component_model()
    rng = make_rng(21)
    h = 1e-5
    for _ in range(100):
        x = rng.normal(0.0, 2.0, 2)
        s = mixture_score(m, x)
        fd = np.empty(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[j] = (m.log_density(x + e) - m.log_density(x - e)) / (2.0 * h)
        assert np.abs(fd - s).max() <= 1e-5 * max(1.0, np.abs(s).max())


def test_score_rejects_non_finite_points():
    m = three_component_model()
    with pytest.raises(ValueError, match="finite"):
        mixture_score(m, np.array([np.nan, 0.0]))


def test_stationary_gradient_second_moment_bound():
    m = MixtureModel(
        [0.6, 0.4],
        [GaussianComponent([0.0, 0.0], np.eye(2)), GaussianComponent([4.0, 0.0], 0.5 * np.eye(2))],
    )
    X = sample_mixture(m, 100_000, seed=71).data
    sq = np.einsum("nd,nd->n", m.score(X), m.score(X))
    rel_sigma = sq.std() / math.sqrt(sq.size) / (m.beta * m.d)
    assert sq.mean() <= m.beta * m.d * (1.0 + 3.0 * rel_sigma)


def test_componentwise_concentration():
    comps = [
        GaussianComponent([1.0, -2.0], [[1.4, 0.3], [0.3, 0.9]]),
        SoftplusComponent([0.0, 0.0], np.eye(2), [1.0, 0.0], 2.0),
    ]
    rng = make_rng(72)
    for c in comps:
        X = c.sample(rng, 100_000)
        dist = np.linalg.norm(X - c.mean, axis=1)
        for u in (1.0, 2.0, 4.0):
            radius = (math.sqrt(2.0) + u) / math.sqrt(c.alpha)
            frac = (dist >= radius).mean()
            bound = 3.0 * math.exp(-u)
            assert frac <= bound + 3.0 * math.sqrt(frac * (1.0 - frac) / X.shape[0]) + 1e-9


def test_hessian_sandwich():
    m = three_component_model()
    rng = make_rng(73)
    h = 1e-4
    for _ in range(20):
        x = rng.normal(0.0, 2.0, 2)
        jac = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            jac[:, j] = (m.score(x + e) - m.score(x - e)) / (2.0 * h)
        hess = -0.5 * (jac + jac.T)
        w = np.linalg.eigvalsh(hess)
        envelope = m.max_gradient(x)
        assert w[-1] <= m.beta + 1e-3
        assert w[0] >= -(m.beta + envelope**2) - 1e-3


def test_perturb_score_zero_is_exact():
    m = three_component_model()
    field = perturb_score(m, 0.0, seed=2)
    assert field.kind == "exact"
    x = np.array([0.4, -0.2])
    assert np.array_equal(field.evaluate(x), m.score(x))


def test_perturb_score_measured_error():
    m = MixtureModel([1.0], [GaussianComponent([0.0], [[1.0]])])
    field = perturb_score(m, 0.3, seed=3)
    assert field.kind == "perturbed"
    assert 0.285 <= field.measured_error <= 0.315
    # same seed, same field: the measured error is exactly linear in epsilon
    ratios = [perturb_score(m, e, seed=3).measured_error / e for e in (0.1, 0.2, 0.4)]
    assert max(ratios) - min(ratios) <= 1e-10


def test_perturb_score_rejects_degenerate_noise():
    m = MixtureModel([1.0], [GaussianComponent([0.0], [[1.0]])])
    with pytest.raises(ValueError, match="degenerate"):
        perturb_score(m, 0.2, noise=SinusoidalNoise(waves=0), seed=4)
    with pytest.raises(ValueError, match="nonnegative"):
        perturb_score(m, -0.1, seed=4)


def test_lmc_config_validation():
    with pytest.raises(ValueError, match="positive"):
        LmcConfig(step=0.0, horizon=1.0, seed=0)
    with pytest.raises(ValueError, match="nonnegative"):
        LmcConfig(step=0.1, horizon=-1.0, seed=0)
    with pytest.raises(ValueError, match="integer number"):
        LmcConfig(step=0.3, horizon=1.0, seed=0)
    with pytest.raises(ValueError, match="chain"):
        LmcConfig(step=0.1, horizon=1.0, seed=0, chains=0)
    assert LmcConfig(step=0.25, horizon=1.0, seed=0).steps == 4
    assert LmcConfig(step=0.1, horizon=0.0, seed=0).steps == 0


def test_lmc_zero_horizon_returns_initialization():
    m = MixtureModel([1.0], [GaussianComponent([0.0, 0.0], np.eye(2))])
    point = np.array([1.5, -0.5])
    res = lmc_run(point, exact_score(m), LmcConfig(step=0.1, horizon=0.0, seed=5, chains=7))
    assert np.array_equal(res.samples.data, np.tile(point, (7, 1)))
    assert not res.flagged.any()
    pool = SampleSet(np.arange(10.0)[:, None])
    res = lmc_run(pool, exact_score(m), LmcConfig(step=0.1, horizon=0.0, seed=5, chains=64))
    assert set(res.samples.data[:, 0]) <= set(pool.data[:, 0])


def test_lmc_standard_gaussian_moments():
    m = MixtureModel([1.0], [GaussianComponent([0.0, 0.0], np.eye(2))])
    cfg = LmcConfig(step=1e-3, horizon=10.0, seed=17, chains=10_000)
    res = lmc_run(np.zeros(2), exact_score(m), cfg)
    X = res.samples.data
    assert not res.flagged.any()
    assert np.linalg.norm(X.mean(axis=0)) <= 0.05
    assert np.all(X.var(axis=0) >= 0.9) and np.all(X.var(axis=0) <= 1.1)


def test_lmc_bimodal_data_init_vs_single_mode():
    m = MixtureModel(
        [0.5, 0.5],
        [GaussianComponent([-5.0], [[1.0]]), GaussianComponent([5.0], [[1.0]])],
    )
    cfg = LmcConfig(step=5e-3, horizon=5.0, seed=29, chains=2000)
    init = sample_mixture(m, 500, seed=23)
    balanced = lmc_run(init, exact_score(m), cfg)
    frac = (balanced.samples.data[:, 0] > 0).mean()
    assert 0.45 <= frac <= 0.55
    stuck = lmc_run(np.array([5.0]), exact_score(m), cfg)
    assert (stuck.samples.data[:, 0] > 0).mean() >= 0.95


def test_lmc_step_halving_consistency():
    # terminal-law drift shrinks with the step size, monotone over halvings
    m = MixtureModel([1.0], [GaussianComponent([0.0], [[1.0]])])
    runs = {}
    for i, h in enumerate([0.8, 0.4, 0.2, 0.1]):
        cfg = LmcConfig(step=h, horizon=4.0, seed=31 + i, chains=10_000)
        runs[h] = lmc_run(np.zeros(1), exact_score(m), cfg).samples
    tvs = [
        empirical_tv_continuous(runs[h], runs[h / 2], bins=30)
        for h in (0.8, 0.4, 0.2)
    ]
    assert tvs[0] > tvs[1] > tvs[2]


def test_divergence_guard_flags_and_freezes():
    boom = ScoreField(fn=lambda X: 40.0 * X, kind="exact")
    short = lmc_run(np.array([1000.0]), boom, LmcConfig(step=1.0, horizon=5.0, seed=3, chains=8))
    longer = lmc_run(np.array([1000.0]), boom, LmcConfig(step=1.0, horizon=9.0, seed=3, chains=8))
    assert short.flagged.all() and longer.flagged.all()
    # a flagged chain keeps the state it blew up at
    assert np.array_equal(short.samples.data, longer.samples.data)
    assert np.isfinite(short.samples.data).all()


def test_submixture_weights_and_errors():
    m = three_component_model()
    sub = submixture(m, [0, 2])
    assert sub.k == 2
    assert sub.weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert sub.weights[0] == pytest.approx(0.5 / 0.7, rel=1e-12)
    with pytest.raises(ValueError, match="nonempty"):
        submixture(m, [])
    with pytest.raises(ValueError, match="range"):
        submixture(m, [3])
    field = submixture_score(m, [1, 0])
    assert field.kind == "submixture" and field.subset == (0, 1)


def test_submixture_score_error_rate():
    m = MixtureModel(
        [0.599, 0.4, 1e-3],
        [
            GaussianComponent([0.0], [[1.0]]),
            GaussianComponent([3.0], [[1.0]]),
            GaussianComponent([20.0], [[1.0]]),
        ],
    )
    samples = sample_mixture(m, 100_000, seed=77)
    assert submixture_score_error(m, [0, 1, 2], samples) == 0.0
    dropped = submixture_score_error(m, [0, 1], samples)
    rate = m.beta * m.kappa * m.d + m.beta**2 * m.separation**2
    # measured constant is ~0.8, far inside the allowed 20
    assert dropped <= 1e-3 * 20.0 * rate
    nested = submixture_score_error(m, [0], samples)
    assert 0.0 < dropped < nested


def test_data_init_balance_transfer():
    m = MixtureModel(
        [0.5, 0.3, 0.2],
        [
            GaussianComponent([-10.0], [[1.0]]),
            GaussianComponent([0.0], [[1.0]]),
            GaussianComponent([10.0], [[1.0]]),
        ],
    )
    p = np.array([0.5, 0.3, 0.2])
    n = 600
    hits = 0
    for trial in range(100):
        X = sample_mixture(m, n, seed=1000 + trial).data[:, 0]
        frac = np.array([(X < -5).mean(), ((X >= -5) & (X < 5)).mean(), (X >= 5).mean()])
        if np.all(np.abs(frac - p) <= 4.0 * np.sqrt(p / n)):
            hits += 1
    assert hits >= 95


def test_warm_start_diagnostic():
    g = MixtureModel([1.0], [GaussianComponent([0.0, 0.0], np.eye(2))])
    report = warm_start_diagnostic(g, np.zeros(2), 1.0 / 50)
    assert report.surrogate == pytest.approx(2.0 * (1.0 + math.log(50.0)), rel=1e-12)
    assert not report.outside
    far = warm_start_diagnostic(g, 10.0 * math.sqrt(2.0) * np.array([1.0, 0.0]), 1.0 / 50)
    assert far.outside
    with pytest.raises(ValueError, match="50"):
        warm_start_diagnostic(g, np.zeros(2), 0.1)
    two = MixtureModel(
        [0.5, 0.5],
        [GaussianComponent([-2.0, 0.0], np.eye(2)), GaussianComponent([2.0, 0.0], np.eye(2))],
    )
    ray = [
        warm_start_diagnostic(two, np.array([2.0 + t, 0.0]), 1.0 / 50).surrogate
        for t in np.linspace(0.0, 8.0, 17)
    ]
    assert all(a < b for a, b in zip(ray, ray[1:]))


def test_score_field_validation():
    with pytest.raises(ValueError, match="kind"):
        ScoreField(fn=lambda x: x, kind="mystery")
    with pytest.raises(ValueError, match="error"):
        ScoreField(fn=lambda x: x, kind="perturbed")


def test_mixture_file_round_trip():
    m = three_component_model()
    text = dump_mixture(m)
    back = load_mixture(text)
    assert back.k == 3 and back.d == 2
    assert np.abs(back.weights - m.weights).max() <= 1e-15
    X = make_rng(74).normal(0.0, 2.0, (50, 2))
    assert np.abs(back.score(X) - m.score(X)).max() <= 1e-10
    assert np.abs(np.asarray(back.log_density(X)) - m.log_density(X)).max() <= 1e-10


def test_mixture_file_parse_errors():
    with pytest.raises(ParseError):
        load_mixture("")
    with pytest.raises(ParseError):
        load_mixture("mixture v2 1 1\ngaussian 1.0\n0.0\n1.0\n")
    with pytest.raises(ParseError):
        load_mixture("mixture v1 1 1\ngaussian 1.0\n0.0\n")  # missing factor row
    with pytest.raises(ParseError):
        load_mixture("mixture v1 1 1\nlaplace 1.0\n0.0\n1.0\n")
    with pytest.raises(ParseError):
        load_mixture("mixture v1 1 1\ngaussian 1.0\n0.0\n1.0\nextra\n")


def test_terminal_sample_csv_round_trip():
    m = MixtureModel([1.0], [GaussianComponent([0.0, 0.0], np.eye(2))])
    res = lmc_run(np.zeros(2), exact_score(m), LmcConfig(step=0.1, horizon=1.0, seed=6, chains=5))
    text = dump_terminal_samples(res)
    assert text.splitlines()[0] == "chain_index,x_1,x_2,flagged"
    back = load_terminal_samples(text)
    assert np.array_equal(back.samples.data, res.samples.data)
    assert np.array_equal(back.flagged, res.flagged)
    with pytest.raises(ParseError):
        load_terminal_samples("x_1,flagged\n0.0,0\n")
    with pytest.raises(ParseError):
        load_terminal_samples("chain_index,x_1,flagged\n1,0.0,0\n")  # bad index
    with pytest.raises(ParseError):
        load_terminal_samples("chain_index,x_1,flagged\n0,0.0,2\n")
