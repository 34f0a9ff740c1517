import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowdps import gmm
from flowdps.harness.verify import random_mixture
from flowdps.schedule import AffineSchedule, ScheduleError, get_schedule
from flowdps.tweedie import tweedie_split

LIN = AffineSchedule.linear()
STD2 = gmm.GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
seeds = st.integers(0, 2**32 - 1)
times = st.floats(0.02, 0.98)


def _case(seed):
    r = np.random.default_rng(seed)
    prior = random_mixture(r)
    return prior, r.normal(0.0, 2.0, prior.dim)


class TestConstruction:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            gmm.GaussianMixture([0.5, 0.4], np.zeros((2, 1)), np.ones((2, 1, 1)))
        with pytest.raises(ValueError):
            gmm.GaussianMixture([1.5, -0.5], np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_rejects_asymmetric_or_indefinite(self):
        with pytest.raises(ValueError):
            gmm.GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.2], [0.0, 1.0]]])
        with pytest.raises(ValueError):
            gmm.GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.0], [0.0, -1.0]]])

    def test_arrays_read_only(self):
        with pytest.raises(ValueError):
            STD2.means[0, 0] = 1.0

    def test_moments(self):
        p = gmm.GaussianMixture.isotropic([0.5, 0.5], [[-1.0], [1.0]], 0.25)
        assert p.mean() == pytest.approx([0.0])
        assert p.covariance() == pytest.approx(np.array([[1.25]]))

    def test_subspace_prior(self):
        basis = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 2)))[0]
        sp = gmm.SubspacePrior(basis, np.zeros(4), 1e4)
        assert np.allclose(sp.projector, basis @ basis.T)
        cov = sp.to_mixture().covs[0]
        assert np.linalg.eigvalsh(cov).min() == pytest.approx(1e-8)
        with pytest.raises(ValueError):
            sp.to_mixture(eps=1e-6)
        with pytest.raises(ValueError):
            gmm.SubspacePrior(2 * basis, np.zeros(4), 1.0)


class TestMarginal:
    def test_t0_is_prior(self, rng):
        p = random_mixture(rng, 3, 2)
        m = gmm.marginal_at(p, LIN, 0.0)
        assert np.array_equal(m.means, p.means) and np.array_equal(m.covs, p.covs)

    def test_standard_normal_half(self):
        m = gmm.marginal_at(STD2, LIN, 0.5)
        assert np.allclose(m.covs[0], 0.5 * np.eye(2)) and np.allclose(m.means, 0.0)

    def test_monte_carlo_density_1d(self):
        p = gmm.GaussianMixture([0.3, 0.7], [[-1.0], [2.0]], [[[0.5]], [[0.2]]])
        r = np.random.default_rng(4)
        n, t = 200_000, 0.4
        xt = 0.6 * gmm.sample(p, r, n)[:, 0] + 0.4 * r.standard_normal(n)
        for x, h in ((-0.5, 0.05), (1.2, 0.05)):
            frac = np.mean(np.abs(xt - x) < h)
            se = np.sqrt(frac * (1 - frac) / n) / (2 * h)
            dens = np.exp(gmm.log_density(p, LIN, t, [x]))
            # window average differs from the point value by O(h^2)
            assert abs(frac / (2 * h) - dens) < 3 * se + 1e-3


class TestDenoiser:
    def test_standard_normal_example(self):
        assert gmm.denoiser_mean(STD2, LIN, 0.5, [1.0, 0.0]) == pytest.approx([1.0, 0.0], abs=1e-15)

    def test_t0_identity(self, rng):
        p, x = random_mixture(rng), None
        x = rng.standard_normal(p.dim)
        assert np.array_equal(gmm.denoiser_mean(p, LIN, 0.0, x), x)

    def test_t1_limit_is_responsibility_weighted_mean(self):
        p = gmm.GaussianMixture([0.25, 0.75], [[-2.0], [2.0]], [[[1.0]], [[1.0]]])
        assert gmm.denoiser_mean(p, LIN, 1.0, [0.3]) == pytest.approx([1.0])

    def test_bimodal_against_grid_integration(self):
        # oracle: adaptive quadrature of E[x0 | x_t] (mpmath), frozen
        p = gmm.GaussianMixture([0.5, 0.5], [[-3.0], [3.0]], [[[0.1]], [[0.1]]])
        assert gmm.denoiser_mean(p, LIN, 0.1, [2.7])[0] == pytest.approx(3.0, abs=1e-12)
        assert gmm.denoiser_mean(p, LIN, 0.9, [2.7])[0] == pytest.approx(2.313704373993062, abs=1e-12)

    def test_batched_matches_rows(self, rng):
        p = random_mixture(rng, 3, 3)
        xs = rng.standard_normal((5, 3))
        batch = gmm.denoiser_mean(p, LIN, 0.4, xs)
        rows = np.stack([gmm.denoiser_mean(p, LIN, 0.4, x) for x in xs])
        assert np.allclose(batch, rows, rtol=0, atol=1e-14)

    @given(seed=seeds, t=times)
    def test_tweedie_cross_check(self, seed, t):
        p, x = _case(seed)
        pair = tweedie_split(LIN, t, x, gmm.marginal_velocity(p, LIN, t, x))
        ref = gmm.denoiser_mean(p, LIN, t, x)
        assert np.max(np.abs(pair.x0_hat - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))

    @pytest.mark.parametrize("name", ["cosine", "quadratic"])
    def test_tweedie_cross_check_generic(self, name, rng):
        sched = get_schedule(name)
        for _ in range(20):
            p = random_mixture(rng)
            t, x = rng.uniform(0.05, 0.95), rng.standard_normal(p.dim)
            pair = tweedie_split(sched, t, x, gmm.marginal_velocity(p, sched, t, x))
            assert np.allclose(pair.x0_hat, gmm.denoiser_mean(p, sched, t, x), rtol=1e-9, atol=1e-9)


class TestScore:
    def test_standard_normal_examples(self):
        assert gmm.score(STD2, LIN, 0.5, [2.0, 0.0]) == pytest.approx([-4.0, 0.0])
        x = np.array([0.3, -1.2])
        assert gmm.score(STD2, LIN, 1.0, x) == pytest.approx(-x)

    def test_t0_raises(self):
        with pytest.raises(ScheduleError):
            gmm.score(STD2, LIN, 0.0, [0.0, 0.0])

    @given(seed=seeds, t=times)
    def test_finite_difference(self, seed, t):
        p, x = _case(seed)
        h = 1e-5
        e = h * np.eye(p.dim)
        fd = (gmm.log_density(p, LIN, t, x + e) - gmm.log_density(p, LIN, t, x - e)) / (2 * h)
        assert np.max(np.abs(fd - gmm.score(p, LIN, t, x))) < 1e-5

    @given(seed=seeds, t=times)
    def test_score_noise_relation(self, seed, t):
        p, x = _case(seed)
        s = gmm.score(p, LIN, t, x)
        pair = tweedie_split(LIN, t, x, gmm.marginal_velocity(p, LIN, t, x))
        assert np.max(np.abs(s + pair.x1_hat / t)) <= 1e-9 * max(1.0, np.max(np.abs(s)))


class TestVelocity:
    def test_standard_normal_closed_form(self, rng):
        x = rng.standard_normal(2)
        assert np.allclose(gmm.marginal_velocity(STD2, LIN, 0.5, x), 0.0, atol=1e-15)
        for t in (0.2, 0.7):
            ref = (2 * t - 1) / ((1 - t) ** 2 + t**2) * x
            assert np.allclose(gmm.marginal_velocity(STD2, LIN, t, x), ref, rtol=1e-13)

    def test_1d_example(self):
        p = gmm.GaussianMixture([1.0], [[0.0]], [[[1.0]]])
        assert gmm.marginal_velocity(p, LIN, 0.75, [1.0])[0] == pytest.approx(0.8, rel=1e-14)

    @pytest.mark.parametrize("t", [0.0, 1.0])
    def test_endpoints_rejected(self, t):
        with pytest.raises(ScheduleError):
            gmm.marginal_velocity(STD2, LIN, t, [0.0, 0.0])


class TestPosterior:
    def test_1d_conjugate(self):
        post = gmm.linear_gaussian_posterior(
            gmm.GaussianMixture([1.0], [[0.0]], [[[1.0]]]), np.array([[1.0]]), np.array([2.0]), 1.0
        )
        assert post.means[0] == pytest.approx([1.0]) and post.covs[0] == pytest.approx(np.array([[0.5]]))

    def test_masked_coordinate(self):
        post = gmm.linear_gaussian_posterior(STD2, np.array([[1.0, 0.0]]), np.array([2.0]), 1.0)
        assert post.means[0] == pytest.approx([1.0, 0.0])
        assert post.covs[0] == pytest.approx(np.diag([0.5, 1.0]))

    def test_accepts_operator(self):
        from flowdps.operators import MaskOperator

        post = gmm.linear_gaussian_posterior(STD2, MaskOperator(2, [0]), np.array([2.0]), 1.0)
        assert post.means[0] == pytest.approx([1.0, 0.0])

    def test_grid_oracle_1d(self, rng):
        grid = np.linspace(-10.0, 10.0, 4001)
        for _ in range(5):
            mu, var, a, sn, y = rng.normal(), rng.uniform(0.3, 2), rng.uniform(0.5, 2), rng.uniform(0.3, 1), rng.normal()
            post = gmm.linear_gaussian_posterior(
                gmm.GaussianMixture([1.0], [[mu]], [[[var]]]), np.array([[a]]), np.array([y]), sn
            )
            logp = -0.5 * (grid - mu) ** 2 / var - 0.5 * (y - a * grid) ** 2 / sn**2
            w = np.exp(logp - logp.max())
            assert abs(np.sum(grid * w) / w.sum() - post.means[0, 0]) < 1e-3

    def test_grid_oracle_2d(self, rng):
        g = np.linspace(-10.0, 10.0, 801)
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], 1)
        cov = np.array([[1.0, 0.4], [0.4, 0.8]])
        prior = gmm.GaussianMixture([1.0], [[0.5, -0.3]], [cov])
        A, y, sn = np.array([[1.0, 1.0]]), np.array([0.7]), 0.5
        post = gmm.linear_gaussian_posterior(prior, A, y, sn)
        d = pts - prior.means[0]
        logp = -0.5 * np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d) - 0.5 * ((y[0] - pts.sum(1)) / sn) ** 2
        w = np.exp(logp - logp.max())
        assert np.allclose(w @ pts / w.sum(), post.means[0], atol=1e-3)

    def test_mixture_weights_follow_evidence(self):
        prior = gmm.GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [[[0.25]], [[0.25]]])
        post = gmm.linear_gaussian_posterior(prior, np.array([[1.0]]), np.array([1.5]), 0.5)
        assert post.weights[1] > 0.99


class TestSampling:
    def test_standard_normal_mean(self):
        x = gmm.sample(gmm.GaussianMixture([1.0], [np.zeros(3)], [np.eye(3)]), 0, 100_000)
        assert np.all(np.abs(x.mean(0)) < 3 / np.sqrt(100_000))

    def test_labels_and_determinism(self):
        p = gmm.GaussianMixture.isotropic([0.2, 0.8], [[-5.0], [5.0]], 0.01)
        x, lab = gmm.sample(p, 3, 1000, return_labels=True)
        assert np.array_equal(x, gmm.sample(p, 3, 1000))
        assert np.all((x[:, 0] > 0) == (lab == 1))
        assert abs(lab.mean() - 0.8) < 0.05

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            gmm.sample(STD2, 0, 0)


class TestJacobian:
    basis = np.linalg.qr(np.random.default_rng(3).standard_normal((4, 2)))[0]

    @pytest.mark.parametrize("t", [0.3, 0.5, 0.7])
    def test_projection_limit(self, t):
        prior = gmm.SubspacePrior(self.basis, np.zeros(4), 1e4).to_mixture()
        J = gmm.denoiser_jacobian_fd(prior, LIN, t, np.ones(4), h=1e-3)
        assert np.linalg.norm(J - self.basis @ self.basis.T / (1 - t), 2) < 1e-2

    @pytest.mark.parametrize("t", [0.3, 0.5])
    def test_moderate_spread_is_looser(self, t):
        prior = gmm.SubspacePrior(self.basis, np.zeros(4), 1e2).to_mixture()
        J = gmm.denoiser_jacobian_fd(prior, LIN, t, np.ones(4), h=1e-3)
        assert np.linalg.norm(J - self.basis @ self.basis.T / (1 - t), 2) < 1e-1

    def test_error_on_subspace_matches_closed_form(self):
        # on M the denoiser gain is a*s2/(a^2 s2 + b^2); its gap to 1/a is b^2/(a(a^2 s2 + b^2))
        prior = gmm.SubspacePrior(self.basis, np.zeros(4), 1e2).to_mixture()
        J = gmm.denoiser_jacobian_fd(prior, LIN, 0.5, np.zeros(4), h=1e-3)
        gain = self.basis.T @ J @ self.basis
        a = b = 0.5
        assert np.allclose(gain, np.eye(2) * (1 / a - b * b / (a * (a * a * 1e2 + b * b))), atol=1e-8)

    def test_full_rank_limit(self):
        prior = gmm.GaussianMixture([1.0], [np.zeros(3)], [1e4 * np.eye(3)])
        J = gmm.denoiser_jacobian_fd(prior, LIN, 0.5, np.ones(3))
        assert np.linalg.norm(J - 2.0 * np.eye(3), 2) < 1e-2

    def test_t0_projection(self):
        prior = gmm.SubspacePrior(self.basis, np.zeros(4), 1.0).to_mixture()
        J = gmm.denoiser_jacobian_fd(prior, LIN, 0.0, self.basis @ [0.3, -0.2])
        assert np.allclose(J, np.eye(4))
