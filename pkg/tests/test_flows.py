"""Flow layer tests: exact identity at init, inverses, log-det and density
derivatives against finite-difference oracles, normalization by MC."""

import json

import numpy as np
import pytest

from fpflow import tape as T
from fpflow.flows import (
    ActnormLayer,
    CouplingLayer,
    FlowEvalError,
    TemporalFlow,
    build_flow,
)
from fpflow.jets import JetSpec, component

LOG_2PI = np.log(2 * np.pi)


def _randomize(flow, rng, scale=0.3):
    """Nudge every parameter so the flow is no longer the identity."""
    for p in flow.params():
        p.value = p.value + rng.normal(size=p.value.shape) * scale
    flow.clamp_parameters()
    return flow


def test_identity_at_init_exact():
    for d in (1, 2, 5):
        flow = build_flow(d, depth=3, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, d)) * 3
        t = rng.uniform(0, 2, size=20)
        zj, ld = flow.forward_jet(x, t)
        np.testing.assert_array_equal(zj.value, x)
        np.testing.assert_array_equal(T.raw(ld.value), np.zeros(20))
        expect = -0.5 * (x**2).sum(axis=1) - 0.5 * d * LOG_2PI
        np.testing.assert_array_equal(flow.log_density(x, t), expect)


def test_log_density_reference_points():
    flow = build_flow(2, depth=2, rng=np.random.default_rng(0))
    got = flow.log_density(np.array([[0.0, 0.0]]), np.array([0.3]))
    np.testing.assert_allclose(got, [np.log(1 / (2 * np.pi))], rtol=1e-14)
    flow1 = build_flow(1, depth=2, rng=np.random.default_rng(0))
    got1 = flow1.log_density(np.array([[3.0]]), np.array([0.0]))
    np.testing.assert_allclose(got1, [-0.5 * LOG_2PI - 4.5], rtol=1e-14)


def test_actnorm_init_statistics():
    layer = ActnormLayer(2)
    layer.init_from(np.array([[2.0, 2.0], [4.0, 4.0]]))
    np.testing.assert_allclose(layer.scale.value, [1.0, 1.0])
    np.testing.assert_allclose(layer.bias.value, [-3.0, -3.0])
    out = np.array([[2.0, 2.0], [4.0, 4.0]]) * layer.scale.value + layer.bias.value
    np.testing.assert_allclose(out, [[-1, -1], [1, 1]])


def test_actnorm_zero_variance_warns():
    layer = ActnormLayer(2)
    with pytest.warns(UserWarning, match="zero-variance"):
        layer.init_from(np.array([[1.0, 5.0], [1.0, 7.0], [1.0, 9.0]]))
    assert layer.scale.value[0] == 1.0
    assert layer.scale.value[1] != 1.0


def test_actnorm_logdet_and_inverse():
    layer = ActnormLayer(2)
    layer.scale.value = np.array([2.0, 2.0])
    flow = TemporalFlow(2, [layer])
    x = np.random.default_rng(0).normal(size=(7, 2))
    t = np.zeros(7)
    _, ld = flow.forward_jet(x, t)
    np.testing.assert_allclose(T.raw(ld.value), 2 * np.log(2.0))
    y = x * 2.0
    np.testing.assert_allclose(layer.inverse(y, t), x, atol=1e-12)


def test_actnorm_clamp_floor():
    layer = ActnormLayer(2)
    layer.scale.value = np.array([1e-12, -1e-12])
    layer.clamp()
    np.testing.assert_allclose(layer.scale.value, [1e-8, -1e-8])


def test_init_actnorm_standardizes_through_stack():
    flow = build_flow(2, depth=2, rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x = rng.normal(size=(500, 2)) * np.array([2.0, 0.5]) + np.array([5.0, -1.0])
    t = rng.uniform(0, 1, size=500)
    flow.init_actnorm(x, t)
    zj, _ = flow.forward_jet(x, t)
    z = T.raw(zj.value)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)


def test_roundtrip_random_flow():
    rng = np.random.default_rng(5)
    for d in (1, 2, 3, 5):
        flow = _randomize(build_flow(d, depth=3, rng=rng), rng)
        x = rng.normal(size=(50, d)) * 4
        t = rng.uniform(0, 3, size=50)
        zj, _ = flow.forward_jet(x, t)
        back = flow.inverse(T.raw(zj.value), t)
        assert np.max(np.abs(back - x)) <= 1e-9


def test_roundtrip_with_spline():
    rng = np.random.default_rng(6)
    flow = build_flow(2, depth=2, spline=True, spline_range=4.0, bins=8, rng=rng)
    _randomize(flow, rng, scale=0.4)
    x = np.concatenate(
        [
            rng.normal(size=(50, 2)) * 3,
            np.array([[4.0, -4.0], [3.999, 4.001], [8.0, -8.0], [0.5, -0.5]]),
        ]
    )
    t = rng.uniform(0, 1, size=len(x))
    zj, _ = flow.forward_jet(x, t)
    back = flow.inverse(T.raw(zj.value), t)
    assert np.max(np.abs(back - x)) <= 1e-9


def test_coupling_inverse_tight():
    rng = np.random.default_rng(7)
    layer = CouplingLayer(4, parity=1, rng=rng)
    for p in layer.params():
        p.value = p.value + rng.normal(size=p.value.shape) * 0.5
    flow = TemporalFlow(4, [layer])
    x = rng.normal(size=(40, 4)) * 5
    t = rng.uniform(0, 2, size=40)
    zj, _ = flow.forward_jet(x, t)
    back = layer.inverse(T.raw(zj.value), t)
    assert np.max(np.abs(back - x)) <= 1e-10


def test_logdet_matches_fd_jacobian():
    rng = np.random.default_rng(8)
    for spline in (False, True):
        flow = build_flow(2, depth=2, spline=spline, spline_range=5.0, bins=6, rng=rng)
        _randomize(flow, rng)
        x = rng.uniform(-2, 2, size=(20, 2))
        t = rng.uniform(0, 1, size=20)
        _, ld = flow.forward_jet(x, t)
        h = 1e-5
        dets = np.empty(20)
        for n in range(20):
            J = np.empty((2, 2))
            for j in range(2):
                xp, xm = x[n].copy(), x[n].copy()
                xp[j] += h
                xm[j] -= h
                zp, _ = flow.forward_jet(xp[None], t[n : n + 1])
                zm, _ = flow.forward_jet(xm[None], t[n : n + 1])
                J[:, j] = (T.raw(zp.value)[0] - T.raw(zm.value)[0]) / (2 * h)
            dets[n] = np.linalg.det(J)
        np.testing.assert_allclose(np.exp(T.raw(ld.value)), np.abs(dets), rtol=1e-5)


def test_density_jet_identity_flow_reference():
    flow = build_flow(1, depth=2, rng=np.random.default_rng(0))
    spec = JetSpec.full(1)
    jet = flow.density_jet(np.array([[0.0]]), np.array([0.5]), spec=spec)
    v = 1 / np.sqrt(2 * np.pi)
    np.testing.assert_allclose(T.raw(jet.value), [v], rtol=1e-14)
    np.testing.assert_allclose(T.raw(component(jet.g, 0)), [0.0], atol=1e-15)
    np.testing.assert_allclose(T.raw(component(jet.h, 0)), [-v], rtol=1e-14)


def test_density_jet_matches_fd():
    rng = np.random.default_rng(9)
    flow = _randomize(build_flow(2, depth=2, rng=rng), rng)
    x = rng.uniform(-1.5, 1.5, size=(12, 2))
    t = rng.uniform(0.1, 1.0, size=12)
    spec = JetSpec.full(2)
    jet = flow.density_jet(x, t, spec=spec)

    def dens(xa, ta):
        return np.exp(flow.log_density(xa, ta))

    h1, h2 = 1e-6, 1e-4
    for k in range(3):  # two spatial slots and time
        if k < 2:
            e = np.zeros_like(x)
            e[:, k] = h1
            ref = (dens(x + e, t) - dens(x - e, t)) / (2 * h1)
        else:
            ref = (dens(x, t + h1) - dens(x, t - h1)) / (2 * h1)
        np.testing.assert_allclose(T.raw(component(jet.g, k)), ref, rtol=1e-5, atol=1e-8)
    for p, (i, j) in enumerate(spec.pairs):
        ei = np.zeros_like(x)
        ei[:, i] = h2
        if i == j:
            ref = (dens(x + ei, t) - 2 * dens(x, t) + dens(x - ei, t)) / h2**2
        else:
            ej = np.zeros_like(x)
            ej[:, j] = h2
            ref = (
                dens(x + ei + ej, t) - dens(x + ei - ej, t)
                - dens(x - ei + ej, t) + dens(x - ei - ej, t)
            ) / (4 * h2**2)
        np.testing.assert_allclose(T.raw(component(jet.h, p)), ref, rtol=1e-4, atol=1e-7)


def test_time_derivative_zero_when_conditioners_ignore_t():
    rng = np.random.default_rng(10)
    flow = _randomize(build_flow(2, depth=2, rng=rng), rng)
    for layer in flow.layers:
        if isinstance(layer, CouplingLayer):
            w = layer.net.w1.value.copy()
            w[:, -1] = 0.0  # t is the last conditioner input
            layer.net.w1.value = w
    spec = JetSpec.full(2)
    jet = flow.density_jet(rng.normal(size=(10, 2)), rng.uniform(0, 1, 10), spec=spec)
    np.testing.assert_array_equal(T.raw(component(jet.g, 2)), np.zeros(10))


def test_density_positive_and_normalized():
    rng = np.random.default_rng(11)
    flow = _randomize(build_flow(2, depth=2, rng=rng), rng, scale=0.2)
    sigma = 3.0
    n = 40000
    zs = rng.normal(size=(n, 2)) * sigma
    logq = -0.5 * (zs**2).sum(axis=1) / sigma**2 - np.log(2 * np.pi * sigma**2)
    for t in rng.uniform(0, 2, size=5):
        logp = flow.log_density(zs, np.full(n, t))
        w = np.exp(logp - logq)
        est = w.mean()
        se = w.std() / np.sqrt(n)
        assert abs(est - 1.0) <= 3 * se, (t, est, se)
        assert np.all(np.exp(logp) > 0)


def test_sample_deterministic_and_centered():
    flow = build_flow(2, depth=2, rng=np.random.default_rng(12))
    a = flow.sample(0.5, 4000, np.random.default_rng(99))
    b = flow.sample(0.5, 4000, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a.mean(axis=0)) < 4 / np.sqrt(4000))


def test_nonfinite_layer_reported():
    rng = np.random.default_rng(13)
    flow = build_flow(2, depth=2, rng=rng)
    flow.layers[1].shift_log_amp.value = np.array([1e4])
    flow.layers[1].net.w3.value = np.full_like(flow.layers[1].net.w3.value, 0.1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(FlowEvalError, match=r"layer 1 \(coupling\)"):
            flow.forward_jet(np.zeros((3, 2)), np.zeros(3))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    flow = build_flow(3, depth=2, spline=True, bins=5, rng=rng)
    _randomize(flow, rng)
    path = tmp_path / "ckpt.json"
    flow.save(str(path), extra={"round": 3})
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1 and doc["round"] == 3
    again = TemporalFlow.load(str(path))
    for p, q in zip(flow.params(), again.params()):
        np.testing.assert_array_equal(p.value, q.value)
    x = rng.normal(size=(10, 3))
    t = rng.uniform(0, 1, 10)
    np.testing.assert_array_equal(flow.log_density(x, t), again.log_density(x, t))


def test_checkpoint_rejects_unknown_version():
    with pytest.raises(ValueError, match="format"):
        TemporalFlow.from_dict({"format_version": 2})


def test_gradients_flow_through_full_model():
    """Loss built from a flow's density jet differentiates w.r.t. every param."""
    rng = np.random.default_rng(15)
    flow = _randomize(build_flow(2, depth=1, rng=rng), rng, scale=0.2)
    x = rng.normal(size=(6, 2))
    t = rng.uniform(0, 1, size=6)
    spec = JetSpec.full(2)

    def loss_scalar():
        tp = T.Tape()
        jet = flow.density_jet(x, t, tape=tp, spec=spec)
        out = T.mean(T.square(component(jet.h, 1)) + T.square(jet.value))
        return tp, out

    tp, out = loss_scalar()
    grads = tp.backward(out)
    h = 1e-6
    checked = 0
    for p in flow.params():
        g = grads.get(p)
        if g is None:
            continue
        flat = p.value.ravel()
        for idx in range(0, flat.size, max(1, flat.size // 3)):
            orig = p.value
            plus = orig.copy().ravel()
            plus[idx] += h
            p.value = plus.reshape(orig.shape)
            _, op = loss_scalar()
            fp = float(op.value)
            minus = orig.copy().ravel()
            minus[idx] -= h
            p.value = minus.reshape(orig.shape)
            _, om = loss_scalar()
            fm = float(om.value)
            p.value = orig
            ref = (fp - fm) / (2 * h)
            np.testing.assert_allclose(g.ravel()[idx], ref, rtol=2e-4, atol=1e-8)
            checked += 1
    assert checked >= 10
