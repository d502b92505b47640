"""Runtime sanity suite behind the `validate` subcommand.

Each check builds what it needs from the experiment config, compares the
analytic machinery against an independent oracle (finite differences,
closed forms, Monte Carlo), and reports pass/fail with a short message.
A check that raises is a failure, not a crash.
"""

from dataclasses import dataclass

import numpy as np

from .flows import SplineLayer, build_flow
from .jets import JetSpec
from .problems import builtin
from .residual import diffusion_jet_spec, exact_density_provider, pde_loss, residual_values
from . import tape as T

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _perturbed_flow(spec, d, rng, scale=0.1):
    flow = spec.build(d, rng)
    flow.init_actnorm(rng.normal(size=(256, d)), rng.uniform(0, 1, size=256))
    for p in flow.params():
        p.value = p.value + rng.normal(scale=scale, size=p.value.shape)
    flow.clamp_parameters()
    return flow


def check_jet_derivatives(config, rng):
    """Jet gradient/Hessian of the spreading-Gaussian density vs central FD."""
    prob = builtin("toy2d")
    spec = JetSpec.full(prob.d)
    n = 40
    x = rng.uniform(-1, 6, size=(n, prob.d))
    t = rng.uniform(0.05, 1.0, size=n)
    jet = prob.exact_jet(x, t, spec)
    val = np.asarray(jet.value)
    g = np.asarray(jet.g)
    h = np.asarray(jet.h)
    scale = np.abs(val).max()

    def fd_grad(i, hstep):
        lo, hi = x.copy(), x.copy()
        lo[:, i] -= hstep
        hi[:, i] += hstep
        return (prob.exact(hi, t) - prob.exact(lo, t)) / (2 * hstep)

    worst = 0.0
    for i in range(prob.d):
        worst = max(worst, np.abs(g[:, i] - fd_grad(i, 1e-5)).max() / scale)
    ft = (prob.exact(x, t + 1e-5) - prob.exact(x, t - 1e-5)) / 2e-5
    worst = max(worst, np.abs(g[:, prob.d] - ft).max() / scale)
    if worst > 1e-5:
        return CheckResult("jet derivatives vs finite differences", False,
                           f"gradient mismatch {worst:.2e} > 1e-5")

    worst2 = 0.0
    h2 = 1e-4
    for k, (i, j) in enumerate(spec.pairs):
        pp, pm, mp, mm = x.copy(), x.copy(), x.copy(), x.copy()
        pp[:, i] += h2; pp[:, j] += h2
        pm[:, i] += h2; pm[:, j] -= h2
        mp[:, i] -= h2; mp[:, j] += h2
        mm[:, i] -= h2; mm[:, j] -= h2
        fd = (prob.exact(pp, t) - prob.exact(pm, t) - prob.exact(mp, t) + prob.exact(mm, t)) / (4 * h2 * h2)
        worst2 = max(worst2, np.abs(h[:, k] - fd).max() / scale)
    ok = worst2 <= 1e-4
    return CheckResult("jet derivatives vs finite differences", ok,
                       f"max relative error: gradient {worst:.2e}, Hessian {worst2:.2e}")


def check_tape_gradients(config, rng):
    """Loss gradients from the reverse tape vs central finite differences."""
    prob = config.make_problem()
    flow = _perturbed_flow(config.flow, prob.d, rng, scale=0.05)
    x_res = prob.init_box.sample(64, rng)
    t_res = rng.uniform(0, prob.horizon, size=64)
    x_ic = prob.p0_sampler(64, rng)

    def loss_value():
        _, loss, _ = pde_loss(flow, prob, (x_res, t_res), x_ic)
        return float(T.raw(loss.value))

    tape, loss, _ = pde_loss(flow, prob, (x_res, t_res), x_ic)
    grads = tape.backward(loss)
    params = flow.params()
    worst = 0.0
    checked = 0
    hstep = 1e-6
    for p in rng.permutation(len(params))[:6]:
        param = params[p]
        g = grads.get(param)
        if g is None:
            continue
        flat = param.value.reshape(-1)
        idx = int(rng.integers(len(flat)))
        keep = flat[idx]
        flat[idx] = keep + hstep
        up = loss_value()
        flat[idx] = keep - hstep
        dn = loss_value()
        flat[idx] = keep
        fd = (up - dn) / (2 * hstep)
        gi = g.reshape(-1)[idx]
        denom = max(abs(fd), abs(gi), 1e-8)
        worst = max(worst, abs(fd - gi) / denom)
        checked += 1
    ok = checked > 0 and worst <= 1e-4
    return CheckResult("tape gradients vs finite differences", ok,
                       f"{checked} parameter entries, max relative error {worst:.2e}")


def check_flow_roundtrip(config, rng):
    prob = config.make_problem()
    flow = _perturbed_flow(config.flow, prob.d, rng)
    x = rng.normal(size=(200, prob.d)) * 3
    t = rng.uniform(0, prob.horizon, size=200)
    zj, _ = flow.forward_jet(x, t)
    back = flow.inverse(T.raw(zj.value), t)
    err = float(np.max(np.abs(back - x)))
    return CheckResult("flow inverse round trip", err <= 1e-9, f"max |x - f_inv(f(x))| = {err:.2e}")


def check_logdet(config, rng):
    """Log-determinant from the flow vs a finite-difference Jacobian (d <= 3)."""
    prob = config.make_problem()
    d = prob.d
    if d > 3:
        return CheckResult("log-determinant vs numerical Jacobian", True,
                           f"skipped for d={d} (determinant check limited to d<=3)")
    flow = _perturbed_flow(config.flow, d, rng)
    x = rng.normal(size=(20, d)) * 2
    t = rng.uniform(0, prob.horizon, size=20)
    _, ld = flow.forward_jet(x, t)
    ld = T.raw(ld.value)
    hstep = 1e-6
    worst = 0.0
    for r in range(len(x)):
        jac = np.empty((d, d))
        for j in range(d):
            hi, lo = x[r].copy(), x[r].copy()
            hi[j] += hstep
            lo[j] -= hstep
            zh, _ = flow.forward_jet(hi[None, :], t[r : r + 1])
            zl, _ = flow.forward_jet(lo[None, :], t[r : r + 1])
            jac[:, j] = (T.raw(zh.value)[0] - T.raw(zl.value)[0]) / (2 * hstep)
        ref = np.log(abs(np.linalg.det(jac)))
        worst = max(worst, abs(ld[r] - ref) / max(abs(ref), 1.0))
    return CheckResult("log-determinant vs numerical Jacobian", worst <= 1e-5,
                       f"max relative error {worst:.2e}")


def check_identity_density(config, rng):
    prob = config.make_problem()
    flow = config.flow.build(prob.d, np.random.default_rng(0))
    x = rng.normal(size=(100, prob.d)) * 2
    t = rng.uniform(0, prob.horizon, size=100)
    got = flow.log_density(x, t)
    want = -0.5 * (x ** 2).sum(axis=1) - 0.5 * prob.d * LOG_2PI
    err = float(np.max(np.abs(got - want)))
    return CheckResult("identity-initialized flow is standard normal", err == 0.0,
                       f"max |log p - log N(0,I)| = {err:.2e}")


def check_residual_zero(config, rng, negative_control=False):
    """Analytic solutions must annihilate the residual operator.

    With negative_control=True the diffusion term's sign is flipped before
    the comparison; the check must then FAIL, demonstrating that a wrong
    operator cannot slip through. Used for documentation and testing only.
    """
    worst = 0.0
    for prob in (builtin("toy2d"), builtin("advdiff_nd", dim=4)):
        n = 200
        x = prob.exact_sampler(0.5, n, rng)
        t = rng.uniform(0.05, prob.horizon, size=n)
        provider = exact_density_provider(prob)
        if negative_control:
            spec, coefs = diffusion_jet_spec(prob)
            r = residual_values(provider, prob, x, t)
            jet = provider(x, t, None, spec)
            r = np.asarray(r) + 2.0 * (np.asarray(jet.h) * coefs).sum(axis=1)
        else:
            r = np.asarray(residual_values(provider, prob, x, t))
        worst = max(worst, float(np.abs(r).max()))
    label = "exact solutions annihilate the residual"
    if negative_control:
        label += " (sign-flipped diffusion control)"
    return CheckResult(label, worst <= 1e-8, f"max |r| = {worst:.2e}")


def check_spline_tails(config, rng):
    """The elementwise spline must invert, including beyond its core range."""
    fs = config.flow
    try:
        layer = SplineLayer(2, bins=fs.bins, tail_slope=fs.tail_slope, half_range=fs.spline_range)
    except ValueError as exc:
        return CheckResult("spline tail invertibility", False, str(exc))
    for p in layer.params():
        p.value = p.value + rng.normal(scale=0.3, size=p.value.shape)
    c = fs.spline_range
    x = np.concatenate([
        rng.uniform(-c, c, size=(100, 2)),
        rng.uniform(c, 2 * c, size=(10, 2)),
        rng.uniform(-2 * c, -c, size=(10, 2)),
    ])
    t = np.zeros(len(x))
    from .jets import seed_spatial, seed_time

    spec = JetSpec.values_only(2)
    yj, _ = layer.forward_jet(seed_spatial(x, spec), seed_time(t, spec), None)
    back = layer.inverse(T.raw(yj.value), t)
    err = float(np.max(np.abs(back - x)))
    return CheckResult("spline tail invertibility", err <= 1e-9, f"max round-trip error {err:.2e}")


def check_normalization(config, rng):
    """Model density integrates to one (importance-sampled Monte Carlo)."""
    prob = config.make_problem()
    flow = _perturbed_flow(config.flow, prob.d, rng, scale=0.05)
    t = float(rng.uniform(0, prob.horizon))
    draws = flow.sample(t, 2000, rng)
    mu = draws.mean(axis=0)
    var = draws.var(axis=0) * 2.0 + 0.5
    n = 20_000
    xs = mu + np.sqrt(var) * rng.standard_normal((n, prob.d))
    logq = -0.5 * ((xs - mu) ** 2 / var).sum(axis=1) - 0.5 * (np.log(2 * np.pi * var)).sum()
    logp = flow.log_density(xs, np.full(n, t))
    if not np.all(np.isfinite(logp)):
        return CheckResult("density normalization (Monte Carlo)", False, "non-finite log density")
    w = np.exp(logp - logq)
    mass = float(w.mean())
    se = float(w.std(ddof=1) / np.sqrt(n))
    ok = abs(mass - 1.0) <= 3.0 * se and se < 0.05
    return CheckResult("density normalization (Monte Carlo)", ok,
                       f"mass = {mass:.4f} (3 SE = {3 * se:.4f}) at t = {t:.3f}")


ALL_CHECKS = (
    check_jet_derivatives,
    check_tape_gradients,
    check_flow_roundtrip,
    check_logdet,
    check_identity_density,
    check_residual_zero,
    check_spline_tails,
    check_normalization,
)


def run_checks(config, seed=0, negative_control=False):
    results = []
    for pos, fn in enumerate(ALL_CHECKS):
        rng = np.random.default_rng([seed, 7000 + pos])
        kwargs = {}
        if fn is check_residual_zero:
            kwargs["negative_control"] = negative_control
        try:
            results.append(fn(config, rng, **kwargs))
        except Exception as exc:  # a crashed check is a failed check
            name = fn.__name__.replace("check_", "").replace("_", " ")
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return results
