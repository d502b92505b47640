import numpy as np
import pytest

from fpflow.jets import JetSpec
from fpflow.problems import Box, FokkerPlanckProblem, builtin

# initial-density location/scale per problem, used to build the importance
# proposal for the normalization check
P0_MOMENTS = {
    "toy2d": ([4.0, 4.0], 1.0),
    "linear_osc": ([1.0, 1.0], 1.0 / 9.0),
    "nonlinear_osc": ([0.0, 5.0], 1.0),
    "advdiff_4d": ([0.0] * 4, 1.0),
    "advdiff_8d": ([0.0] * 8, 1.0),
}


def all_problems():
    return [
        builtin("toy2d"),
        builtin("linear_osc"),
        builtin("nonlinear_osc"),
        builtin("advdiff_nd", dim=4),
        builtin("advdiff_nd", dim=8),
    ]


def test_box_sampling_and_validation():
    box = Box.cube(3, -2.0, 5.0)
    pts = box.sample(500, np.random.default_rng(0))
    assert pts.shape == (500, 3)
    assert np.all(pts >= -2.0) and np.all(pts <= 5.0)
    with pytest.raises(ValueError):
        Box([0.0, 0.0], [1.0, 0.0])


def test_registry_lookup():
    assert builtin("toy2d").d == 2
    assert builtin("advdiff_nd", dim=8).d == 8
    with pytest.raises(ValueError):
        builtin("advdiff_nd")
    with pytest.raises(ValueError):
        builtin("no_such_problem")


def test_toy2d_exact_hand_values():
    prob = builtin("toy2d")
    x = np.array([[4.0, 4.0]])
    # peak of the isotropic Gaussian: 1/(2 pi var) with var = t + 1
    assert np.allclose(prob.exact(x, 0.0), 1.0 / (2.0 * np.pi), rtol=1e-14)
    assert np.allclose(prob.exact(x, 1.0), 1.0 / (4.0 * np.pi), rtol=1e-14)
    assert np.allclose(prob.p0(x), 1.0 / (2.0 * np.pi), rtol=1e-14)


def test_advdiff_exact_hand_values():
    prob = builtin("advdiff_nd", dim=4)
    t = 1.0
    center = np.full((1, 4), 2.0 * t)
    assert np.allclose(prob.exact(center, t), (4.0 * np.pi) ** -2, rtol=1e-14)

    prob8 = builtin("advdiff_nd", dim=8)
    origin = np.zeros((1, 8))
    assert np.allclose(prob8.p0(origin), (2.0 * np.pi) ** -4, rtol=1e-14)
    far = np.zeros((1, 8))
    far[0, 0] = 10.0
    assert np.allclose(
        prob8.exact(far, 0.0), (2.0 * np.pi) ** -4 * np.exp(-50.0), rtol=1e-12
    )


def test_drift_hand_values():
    lin = builtin("linear_osc")
    x = np.array([[1.0, 2.0]])
    assert np.allclose(lin.drift(x, 0.0), [[2.0, -1.4]])
    non = builtin("nonlinear_osc")
    x = np.array([[2.0, 1.0]])
    assert np.allclose(non.drift(x, 0.0), [[1.0, 2.0 - 0.4 - 0.8]])
    adv = builtin("advdiff_nd", dim=4)
    assert np.allclose(adv.drift(np.zeros((3, 4)), 0.0), 2.0)


def test_drift_divergence_values():
    rng = np.random.default_rng(1)
    for prob, val in [
        (builtin("toy2d"), 0.0),
        (builtin("linear_osc"), -0.2),
        (builtin("nonlinear_osc"), -0.4),
        (builtin("advdiff_nd", dim=4), 0.0),
    ]:
        x = rng.normal(size=(50, prob.d))
        assert np.allclose(prob.drift_div(x, 0.5), val)


def test_drift_divergence_matches_fd():
    # analytic divergence against central differences of the drift field
    h = 1e-6
    rng = np.random.default_rng(2)
    for prob in [builtin("linear_osc"), builtin("nonlinear_osc")]:
        x = rng.normal(size=(20, prob.d))
        div = np.zeros(20)
        for i in range(prob.d):
            e = np.zeros(prob.d)
            e[i] = h
            div += (prob.drift(x + e, 0.3)[:, i] - prob.drift(x - e, 0.3)[:, i]) / (2 * h)
        assert np.allclose(div, prob.drift_div(x, 0.3), atol=1e-7)


def test_diffusion_matrices():
    assert np.array_equal(builtin("toy2d").diffusion, 0.5 * np.eye(2))
    assert np.array_equal(builtin("linear_osc").diffusion, np.diag([0.0, 0.2]))
    assert np.array_equal(builtin("nonlinear_osc").diffusion, np.diag([0.0, 0.4]))
    assert np.array_equal(builtin("advdiff_nd", dim=8).diffusion, 0.5 * np.eye(8))


def test_asymmetric_diffusion_rejected():
    bad = np.array([[1.0, 0.5], [0.0, 1.0]])
    prob = builtin("toy2d")
    with pytest.raises(ValueError):
        FokkerPlanckProblem(
            name="bad",
            d=2,
            drift=prob.drift,
            drift_div=prob.drift_div,
            diffusion=bad,
            p0=prob.p0,
            p0_sampler=prob.p0_sampler,
            horizon=1.0,
            init_box=prob.init_box,
            ref_box=prob.ref_box,
        )


def test_p0_normalization_by_importance_sampling():
    # E_q[p0/q] = 1 when p0 is normalized; q is a wider Gaussian so the
    # ratio has finite variance
    rng = np.random.default_rng(3)
    n = 200_000
    for prob in all_problems():
        mean, var = P0_MOMENTS[prob.name]
        mean = np.asarray(mean)
        qvar = 4.0 * var
        x = mean + np.sqrt(qvar) * rng.standard_normal((n, prob.d))
        logq = (
            -0.5 * prob.d * np.log(2.0 * np.pi * qvar)
            - ((x - mean) ** 2).sum(axis=1) / (2.0 * qvar)
        )
        ratio = prob.p0(x) / np.exp(logq)
        mass = ratio.mean()
        se = ratio.std(ddof=1) / np.sqrt(n)
        assert abs(mass - 1.0) <= 3.0 * se + 1e-12, (prob.name, mass, se)


def test_p0_sampler_moments():
    rng = np.random.default_rng(4)
    for prob in all_problems():
        mean, var = P0_MOMENTS[prob.name]
        x = prob.p0_sampler(100_000, rng)
        assert np.allclose(x.mean(axis=0), mean, atol=5e-2)
        assert np.allclose(x.var(axis=0), var, rtol=5e-2)


def test_exact_sampler_matches_exact_moments():
    rng = np.random.default_rng(5)
    toy = builtin("toy2d")
    x = toy.exact_sampler(1.0, 200_000, rng)
    assert np.allclose(x.mean(axis=0), [4.0, 4.0], atol=2e-2)
    assert np.allclose(x.var(axis=0), 2.0, rtol=3e-2)

    adv = builtin("advdiff_nd", dim=4)
    x = adv.exact_sampler(0.5, 200_000, rng)
    assert np.allclose(x.mean(axis=0), 1.0, atol=2e-2)
    assert np.allclose(x.var(axis=0), 1.5, rtol=3e-2)


def test_exact_jet_value_matches_plain_exact():
    rng = np.random.default_rng(6)
    for prob in [builtin("toy2d"), builtin("advdiff_nd", dim=4)]:
        x = rng.uniform(-1.0, 5.0, size=(40, prob.d))
        t = rng.uniform(0.0, prob.horizon, size=40)
        spec = JetSpec.full(prob.d)
        jet = prob.exact_jet(x, t, spec)
        assert np.allclose(jet.value, prob.exact(x, t), rtol=1e-13)


def test_exact_jet_derivatives_match_fd():
    prob = builtin("toy2d")
    rng = np.random.default_rng(7)
    x = rng.uniform(1.0, 6.0, size=(15, 2))
    t = rng.uniform(0.1, 0.9, size=15)
    spec = JetSpec.full(2)
    jet = prob.exact_jet(x, t, spec)

    h1, h2 = 1e-6, 1e-4
    for i in range(2):
        e = np.zeros(2)
        e[i] = h1
        fd = (prob.exact(x + e, t) - prob.exact(x - e, t)) / (2 * h1)
        assert np.allclose(jet.g[:, i], fd, rtol=1e-5, atol=1e-9)
    fd_t = (prob.exact(x, t + h1) - prob.exact(x, t - h1)) / (2 * h1)
    assert np.allclose(jet.g[:, 2], fd_t, rtol=1e-5, atol=1e-9)

    e0 = np.array([h2, 0.0])
    fd_xx = (prob.exact(x + e0, t) - 2 * prob.exact(x, t) + prob.exact(x - e0, t)) / h2**2
    k = spec.pairs.index((0, 0))
    assert np.allclose(jet.h[:, k], fd_xx, rtol=1e-4, atol=1e-8)
    e1 = np.array([0.0, h2])
    fd_xy = (
        prob.exact(x + e0 + e1, t)
        - prob.exact(x + e0 - e1, t)
        - prob.exact(x - e0 + e1, t)
        + prob.exact(x - e0 - e1, t)
    ) / (4 * h2**2)
    k = spec.pairs.index((0, 1))
    assert np.allclose(jet.h[:, k], fd_xy, rtol=1e-4, atol=1e-8)
