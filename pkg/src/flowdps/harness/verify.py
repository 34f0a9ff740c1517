"""Executable invariant suites behind ``flowdps verify``.

Each suite returns a list of checks ``(name, observed, tolerance)``; a
check passes when ``observed <= tolerance``. ``fast`` uses reduced case
counts; ``full`` adds the Monte-Carlo transport, posterior and training
suites.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import _core, gmm, schedule, solvers, tweedie
from .._core import _kernels_py
from ..operators import (
    AvgPoolOperator,
    BlurOperator,
    ConjugateGradient,
    DenseOperator,
    MaskOperator,
    Measurement,
    data_consistency_solve,
    gaussian_blur_kernel,
    make_measurement,
)
from ..velocity import AnalyticVelocity, MlpVelocity, TrainConfig, eval_velocity, guided_velocity, train_flow
from .config import ExperimentConfig, parse_config, to_text
from .io import read_pgm, write_pgm
from .metrics import psnr, sliced_wasserstein

__all__ = ["Check", "SuiteResult", "SUITES", "FULL_SUITES", "run_suite", "verify", "format_results",
           "random_mixture", "gradient_check"]


@dataclass(frozen=True)
class Check:
    name: str
    observed: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.observed <= self.tolerance)


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and all(c.passed for c in self.checks)

    @property
    def worst(self) -> Check | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: (not c.passed, c.observed / c.tolerance if c.tolerance else c.observed))


def random_mixture(rng, dim=None, k=None) -> gmm.GaussianMixture:
    """Random well-conditioned mixture for property checks."""
    d = int(rng.integers(1, 5)) if dim is None else dim
    k = int(rng.integers(1, 4)) if k is None else k
    w = rng.uniform(0.2, 1.0, k)
    means = rng.normal(0.0, 2.0, (k, d))
    covs = []
    for _ in range(k):
        q = rng.standard_normal((d, d))
        covs.append(q @ q.T / d + 0.1 * np.eye(d))
    return gmm.GaussianMixture(w / w.sum(), means, np.asarray(covs))


def gradient_check(net: MlpVelocity, t, x, target, labels=None, h: float = 1e-6) -> float:
    """Max relative error between backprop and centred differences.

    Each entry is compared relative to ``max(|g_i|, 1e-3 ||g||_inf)`` so
    that near-zero components do not dominate through cancellation noise.
    """
    _, g = net.loss_and_grad(t, x, target, labels)
    fd = np.empty_like(g)
    for i in range(g.size):
        old = net.params[i]
        net.params[i] = old + h
        lp, _ = net.loss_and_grad(t, x, target, labels)
        net.params[i] = old - h
        lm, _ = net.loss_and_grad(t, x, target, labels)
        net.params[i] = old
        fd[i] = (lp - lm) / (2.0 * h)
    floor = 1e-3 * np.max(np.abs(g))
    return float(np.max(np.abs(fd - g) / np.maximum(np.abs(g), floor)))


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# -- suites -------------------------------------------------------------


def suite_schedule(n, rng, **_):
    checks = []
    bnd = 0.0
    scheds = [schedule.get_schedule(name) for name in schedule.SCHEDULES]
    for sched in scheds:
        got = schedule.eval_schedule(sched, 0.0)[:2] + schedule.eval_schedule(sched, 1.0)[:2]
        bnd = max(bnd, float(np.max(np.abs(np.subtract(got, (1.0, 0.0, 0.0, 1.0))))))
    checks.append(Check("boundary values", bnd, 0.0))
    h, worst = 1e-5, 0.0
    for sched in scheds:
        for t in rng.uniform(2e-5, 1.0 - 2e-5, n):
            a, b, ad, bd = schedule.eval_schedule(sched, t)
            ap, bp = schedule.eval_schedule(sched, t + h)[:2]
            am, bm = schedule.eval_schedule(sched, t - h)[:2]
            worst = max(worst, abs(ad - (ap - am) / (2 * h)), abs(bd - (bp - bm) / (2 * h)))
    checks.append(Check("derivative consistency", worst, 1e-6))
    lin = schedule.AffineSchedule.linear()
    worst = 0.0
    for t in rng.uniform(0.0, 1.0, n):
        dt = -rng.uniform(0.0, t)
        c1, c2 = schedule.step_coefficients(lin, t, dt)
        a, b = schedule.eval_schedule(lin, t + dt)[:2]
        worst = max(worst, abs(c1 - a), abs(c2 - b))
    checks.append(Check("linear step coefficients", worst, 0.0))
    return checks


def suite_beta(n, rng, zeta_fn=None, **_):
    """beta_t from zeta against the closed form; sign structure on the shift-4 grid."""
    lin = schedule.AffineSchedule.linear()
    zf = schedule.zeta if zeta_fn is None else zeta_fn
    worst = 0.0
    for t in rng.uniform(1e-3, 1.0 - 1e-3, n):
        a, b, ad, _ = schedule.eval_schedule(lin, t)
        ref = ad * (b / a) * (1 - b / a)
        worst = max(worst, abs(zf(lin, t, "a_dot") / a - ref) / max(1.0, abs(ref)))
    checks = [Check("zeta identity", worst, 1e-12)]
    grid = schedule.make_time_grid(28, 4.0)
    worst = 0.0
    for k, t, tn in grid.steps():
        if k == 0:
            continue
        ref = schedule.beta_closed_form(t, tn)
        got = schedule.beta_from_zeta(lin, t, tn - t, "a_dot", zeta_fn=zeta_fn)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    checks.append(Check("beta from zeta vs closed form", worst, 1e-9))
    ex = max(
        abs(schedule.beta_closed_form(0.5, 0.3)),
        abs(schedule.beta_closed_form(0.8, 0.7) + 4.0),
        abs(schedule.beta_closed_form(0.9, 0.8) + 36.0),
    )
    checks.append(Check("closed-form examples", ex, 1e-12))
    neg = [-schedule.beta_t(grid, k) for k, t, _ in grid.steps() if 0.5 < t < 1.0]
    bad = sum(v <= 0 for v in neg) + sum(b >= a for a, b in zip(neg, neg[1:]))
    checks.append(Check("-beta positive and decreasing (sigma > 0.5)", float(bad), 0.0))
    return checks


def suite_gmm(n, rng, **_):
    lin = schedule.AffineSchedule.linear()
    w_tw = w_sc = w_fd = 0.0
    for _ in range(n):
        prior = random_mixture(rng)
        t = rng.uniform(0.02, 0.98)
        x = rng.normal(0.0, 2.0, prior.dim)
        v = gmm.marginal_velocity(prior, lin, t, x)
        pair = tweedie.tweedie_split(lin, t, x, v)
        w_tw = max(w_tw, _rel(pair.x0_hat, gmm.denoiser_mean(prior, lin, t, x)))
        s = gmm.score(prior, lin, t, x)
        w_sc = max(w_sc, float(np.max(np.abs(s + pair.x1_hat / t))) / max(1.0, np.max(np.abs(s))))
        h = 1e-5
        e = np.eye(prior.dim) * h
        fd = (gmm.log_density(prior, lin, t, x + e) - gmm.log_density(prior, lin, t, x - e)) / (2 * h)
        w_fd = max(w_fd, float(np.max(np.abs(fd - s))))
    checks = [
        Check("tweedie split vs conditional mean", w_tw, 1e-9),
        Check("score relation", w_sc, 1e-9),
        Check("score vs finite difference", w_fd, 1e-5),
    ]
    # conjugate posterior against brute-force grid integration in 1D
    grid = np.linspace(-10.0, 10.0, 4001)
    worst = 0.0
    for _ in range(3):
        mu, var, a, sn, y = rng.normal(), rng.uniform(0.3, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.0), rng.normal()
        prior = gmm.GaussianMixture([1.0], [[mu]], [[[var]]])
        post = gmm.linear_gaussian_posterior(prior, np.array([[a]]), np.array([y]), sn)
        logp = -0.5 * (grid - mu) ** 2 / var - 0.5 * (y - a * grid) ** 2 / sn**2
        p = np.exp(logp - logp.max())
        worst = max(worst, abs(np.sum(grid * p) / np.sum(p) - post.mean()[0]))
    checks.append(Check("posterior mean vs grid", worst, 1e-3))
    # projection limit of the denoiser Jacobian on a rank-2 subspace in R^4
    basis = np.linalg.qr(np.random.default_rng(3).standard_normal((4, 2)))[0]
    x = np.random.default_rng(4).standard_normal(4)
    errs = {}
    for spread in (1e2, 1e4):
        prior = gmm.SubspacePrior(basis, np.zeros(4), spread).to_mixture()
        for t in (0.3, 0.5, 0.7):
            J = gmm.denoiser_jacobian_fd(prior, lin, t, x, h=1e-3)
            errs[spread, t] = float(np.linalg.norm(J - basis @ basis.T / (1 - t), 2))
    checks.append(Check("jacobian limit at spread 1e4", max(errs[1e4, t] for t in (0.3, 0.5, 0.7)), 1e-2))
    bad = sum(errs[1e4, t] >= errs[1e2, t] for t in (0.3, 0.5, 0.7))
    checks.append(Check("jacobian error decreases with spread", float(bad), 0.0))
    return checks


def suite_tweedie(n, rng, **_):
    checks = []
    worst_r = worst_v = 0.0
    for name in ("linear", "cosine", "quadratic"):
        sched = schedule.get_schedule(name)
        for _ in range(n):
            t = rng.uniform(0.05, 0.95)
            x, v = rng.standard_normal((2, 3))
            p = tweedie.tweedie_split(sched, t, x, v)
            a, b, ad, bd = schedule.eval_schedule(sched, t)
            worst_r = max(worst_r, _rel(a * p.x0_hat + b * p.x1_hat, x))
            worst_v = max(worst_v, _rel(ad * p.x0_hat + bd * p.x1_hat, v))
    checks.append(Check("reconstruction", worst_r, 1e-9))
    checks.append(Check("velocity recovery", worst_v, 1e-9))
    lin = schedule.AffineSchedule.linear()
    w_ddim = w_euler = 0.0
    for _ in range(n):
        t = rng.uniform(0.01, 1.0)
        dt = -rng.uniform(0.0, t)
        eta = rng.uniform()
        x, v, eps = rng.standard_normal((3, 4))
        p = tweedie.tweedie_split(lin, t, x, v)
        mixed = tweedie.mix_noise(p.x1_hat, eta, epsilon=eps)
        ref = tweedie.decomposed_step(lin, t, dt, tweedie.TweediePair(p.x0_hat, mixed, t, x))
        w_ddim = max(w_ddim, float(np.max(np.abs(tweedie.ddim_step(lin, t, dt, p, eta, eps) - ref))))
        w_euler = max(w_euler, float(np.max(np.abs(
            tweedie.decomposed_step(lin, t, dt, p) - tweedie.euler_step(lin, t, dt, x, v)))))
    checks.append(Check("ddim form identity", w_ddim, 1e-12))
    checks.append(Check("euler decomposition identity", w_euler, 1e-12))
    return checks


def suite_velocity(n, rng, **_):
    lin = schedule.AffineSchedule.linear()
    worst = 0.0
    for _ in range(n):
        prior = random_mixture(rng)
        t, x = rng.uniform(0.01, 0.99), rng.standard_normal(prior.dim)
        got = eval_velocity(AnalyticVelocity(prior, lin), t, x)
        worst = max(worst, float(np.max(np.abs(got - gmm.marginal_velocity(prior, lin, t, x)))))
    checks = [Check("analytic field fidelity", worst, 0.0)]
    toy = MlpVelocity(2, hidden=(2,), n_freq=1, seed=1)
    assert toy.n_params == 16
    r = np.random.default_rng(5)
    x = r.standard_normal((8, 2))
    checks.append(Check("gradient check (16 params)",
                        gradient_check(toy, r.uniform(size=8), x, r.standard_normal((8, 2))), 1e-4))
    worst = 0.0
    for _ in range(n):
        vu, vc = rng.standard_normal((2, 3))
        l1, l2 = rng.normal(size=2)
        lhs = guided_velocity(vu, vc, l1) + guided_velocity(vu, vc, l2) - guided_velocity(vu, vc, 0.0)
        worst = max(worst, float(np.max(np.abs(lhs - guided_velocity(vu, vc, l1 + l2)))))
    checks.append(Check("guidance linear in lambda", worst, 1e-12))
    net = MlpVelocity(2, seed=0)
    xs = rng.standard_normal((n, 2))
    xs /= np.maximum(1.0, np.linalg.norm(xs, axis=1, keepdims=True))
    ratio = np.linalg.norm(net(rng.uniform(size=n), xs), axis=1) / (10.0 * (1.0 + np.linalg.norm(xs, axis=1)))
    checks.append(Check("initial output bound", float(ratio.max()), 1.0))
    return checks


def suite_operators(n, rng, **_):
    ops = [
        DenseOperator(rng.standard_normal((5, 12))),
        AvgPoolOperator(6, 8, 2),
        BlurOperator(7, 9, gaussian_blur_kernel(5, 1.0)),
        BlurOperator(6, 6, np.arange(1, 10.0).reshape(3, 3) / 45.0),
        MaskOperator(10, [0, 3, 4, 9]),
    ]
    worst = 0.0
    for op in ops:
        for _ in range(max(1, n // 10)):
            x, y = rng.standard_normal(op.input_dim), rng.standard_normal(op.output_dim)
            lhs, rhs = float(op(x) @ y), float(x @ op.adjoint(y))
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    checks = [Check("adjoint dot test", worst, 1e-10)]
    op = BlurOperator(8, 8, gaussian_blur_kernel(5, 1.0))
    y = rng.standard_normal(64)
    objs = [float(np.sum((y - op(np.zeros(64))) ** 2))]
    for k in range(1, 6):
        xk = data_consistency_solve(op, y, np.zeros(64), ConjugateGradient(k))
        objs.append(float(np.sum((y - op(xk)) ** 2)))
    rise = max(0.0, max(b - a for a, b in zip(objs, objs[1:])))
    checks.append(Check("cg objective non-increasing", rise, 1e-10))
    img = rng.standard_normal((3, 8, 8))
    k = gaussian_blur_kernel(5, 1.0)
    diff = max(
        float(np.max(np.abs(_core.correlate2d(img, k) - _kernels_py.correlate2d(img, k)))),
        float(np.max(np.abs(_core.avgpool2d(img, 2) - _kernels_py.avgpool2d(img, 2)))),
        float(np.max(np.abs(_core.avgpool2d_adjoint(img, 2) - _kernels_py.avgpool2d_adjoint(img, 2)))),
    )
    checks.append(Check(f"{_core.BACKEND} kernels vs numpy", diff, 1e-12))
    return checks


def suite_harness(n, rng, **_):
    checks = [Check("psnr examples", max(
        abs(psnr(np.ones(4), np.ones(4)) - 99.0),
        abs(psnr([0.1], [0.0]) - 20.0),
        abs(psnr(np.full(9, 0.5), np.zeros(9)) - 10 * math.log10(4.0)),
    ), 1e-12)]
    checks.append(Check("sliced W point masses", abs(sliced_wasserstein([[0.0]], [[2.5]], 4, 0) - 2.5), 1e-12))
    img = rng.integers(0, 65536, (5, 7)) / 65535
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.pgm"
        write_pgm(p, img)
        checks.append(Check("pgm round trip", float(np.max(np.abs(read_pgm(p) - img))), 0.0))
    cfg = ExperimentConfig()
    checks.append(Check("config round trip", float(parse_config(to_text(cfg)) != cfg), 0.0))
    return checks


def suite_transport(n, rng, **_):
    mu = np.array([1.5, -0.5])
    prior = gmm.GaussianMixture([1.0], [mu], [np.eye(2)])
    cfg = solvers.SolverConfig(grid=schedule.make_time_grid(500, 1.0), eta="zero", dc=None, n_samples=10_000)
    xs = solvers.sample_flow(AnalyticVelocity(prior, schedule.AffineSchedule.linear()), cfg, 11, False).final
    se = xs.std(axis=0, ddof=1) / math.sqrt(len(xs))
    return [
        Check("terminal mean (standard errors)", float(np.max(np.abs(xs.mean(0) - mu) / se)), 3.0),
        Check("covariance diagonal (relative)", float(np.max(np.abs(np.var(xs, 0, ddof=1) - 1.0))), 0.05),
    ]


def suite_oracle(n, rng, **_):
    r = np.random.default_rng(21)
    q = r.standard_normal((8, 8))
    prior = gmm.GaussianMixture([1.0], [r.normal(size=8)], [q @ q.T / 8 + 0.5 * np.eye(8)])
    A = r.standard_normal((4, 8))
    meas = make_measurement(DenseOperator(A), gmm.sample(prior, r, 1)[0], 0.1, r)
    post = gmm.linear_gaussian_posterior(prior, A, meas.y, 0.1)
    cfg = solvers.SolverConfig(grid=schedule.make_time_grid(500, 1.0), eta="zero", dc=None, n_samples=10_000)
    xs = solvers.posterior_oracle_solve(prior, meas, cfg, 12, False).final
    se = xs.std(axis=0, ddof=1) / math.sqrt(len(xs))
    cov = post.covariance()
    checks = [
        Check("posterior mean (standard errors)", float(np.max(np.abs(xs.mean(0) - post.mean()) / se)), 3.0),
        Check("posterior covariance (Frobenius)",
              float(np.linalg.norm(np.cov(xs, rowvar=False) - cov) / np.linalg.norm(cov)), 0.10),
    ]
    bi = gmm.GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [[[0.25]], [[0.25]]])
    # y between the modes, so both stay plausible
    m = Measurement(np.array([0.3]), DenseOperator([[1.0]]), 1.0)
    post = gmm.linear_gaussian_posterior(bi, np.array([[1.0]]), m.y, 1.0)
    xs = solvers.posterior_oracle_solve(bi, m, cfg, 13, False).final[:, 0]
    frac = float(np.mean(xs > 0))
    w = post.weights[int(np.argmax(post.means[:, 0]))]
    checks.append(Check("bimodal weights (standard errors)",
                        abs(frac - w) / math.sqrt(w * (1 - w) / len(xs)), 3.0))
    return checks


def suite_cfm(n, rng, **_):
    prior = gmm.GaussianMixture([1.0], [[1.0, -0.5]], [np.diag([0.5, 1.5])])
    net = MlpVelocity(2, seed=0)
    train_flow(net, prior, TrainConfig(steps=3000, batch_size=256, seed=0))
    lin = schedule.AffineSchedule.linear()
    r = np.random.default_rng(7)
    worst = 0.0
    for t in np.linspace(0.05, 0.95, 10):
        # marginal samples, truncated to the ball |x| <= 3
        x = gmm.sample(gmm.marginal_at(prior, lin, t), r, 2000)
        x = x[np.linalg.norm(x, axis=1) <= 3.0]
        diff = net(t, x) - gmm.marginal_velocity(prior, lin, t, x)
        worst = max(worst, float(np.mean(np.sum(diff**2, axis=1))))
    return [Check("trained vs analytic velocity (mse)", worst, 0.05)]


SUITES = {
    "schedule": suite_schedule,
    "beta_t": suite_beta,
    "gmm_prior": suite_gmm,
    "tweedie": suite_tweedie,
    "velocity": suite_velocity,
    "forward_ops": suite_operators,
    "harness": suite_harness,
}
FULL_SUITES = {
    "transport": suite_transport,
    "posterior_oracle": suite_oracle,
    "cfm_consistency": suite_cfm,
}


def run_suite(name, fn, n, seed=0, **opts) -> SuiteResult:
    res = SuiteResult(name)
    t0 = time.perf_counter()
    try:
        res.checks = fn(n, np.random.default_rng(seed), **opts)
    except Exception as exc:  # a crashing suite is a failing suite
        res.error = f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - t0
    return res


def verify(level: str = "fast", zeta_fn=None, seed: int = 0) -> list[SuiteResult]:
    """Run the suites; ``zeta_fn`` replaces the zeta used by the beta_t suite."""
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    n = 100 if level == "fast" else 1000
    suites = dict(SUITES)
    if level == "full":
        suites.update(FULL_SUITES)
    return [run_suite(name, fn, n, seed, zeta_fn=zeta_fn) for name, fn in suites.items()]


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        if r.error:
            detail = r.error
        else:
            w = r.worst
            detail = f"max_err={w.observed:.3g} (tol {w.tolerance:.3g}, {w.name})" if w else ""
        lines.append(f"{r.name:<18} {status}  {detail}  [{r.seconds:.1f}s]")
        lines += [f"    FAIL {c.name}: {c.observed:.3g} > {c.tolerance:.3g}" for c in r.checks if not c.passed]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} suites passed")
    return "\n".join(lines)
