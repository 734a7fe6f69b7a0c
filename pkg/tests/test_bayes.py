import math

import numpy as np
import pytest

from jointinr.bayes import (
    BayesConfig,
    LatentPrior,
    VariationalNode,
    adapt_with_frozen_prior,
    e_step,
    inverse_softplus,
    kl_diag_gauss,
    load_prior,
    m_step,
    ordered_mean,
    posterior_uncertainty,
    sample_weights,
    save_prior,
    softplus,
    train_inr_bayes,
)
from jointinr.geometry import GridSpec, ProjectionGeometry, Sinogram, forward_project
from jointinr.phantoms import PhantomFamilySpec, make_phantom_family
from jointinr.single import DataTerm, NetSpec, TrainConfig, build_network, train_single_inr

SMALL = NetSpec(width=12, depth=3, num_frequencies=6)


def _node(rng, P, var_range=(0.1, 2.0), node_id=0):
    node = VariationalNode.create(rng.standard_normal(P), 1.0, node_id)
    node.pi[:] = np.log(np.expm1(rng.uniform(*var_range, P)))
    return node


def _mstep_objective(nodes, omega, sigma):
    # sum_j E_q[log N(w_j; omega, sigma)] up to a constant
    total = 0.0
    for n in nodes:
        rho = softplus(n.pi)
        total += np.sum(-0.5 * np.log(sigma) - 0.5 * (rho + (n.mu - omega) ** 2) / sigma)
    return total


def _problem(count=2, side=16, n_angles=6, seed=0):
    g = GridSpec(side)
    fam = make_phantom_family(PhantomFamilySpec(side=side, count=count, seed=seed))
    geom = ProjectionGeometry.parallel(n_angles, g)
    return g, geom, fam, [forward_project(f, geom) for f in fam]


class TestSoftplus:
    def test_zero(self):
        assert softplus(0.0) == pytest.approx(math.log(2.0), abs=1e-15)
        assert softplus(0.0) == pytest.approx(0.693147, abs=1e-6)

    def test_inverse(self):
        for y in (1e-12, 1e-6, 0.5, 3.0, 40.0):
            assert softplus(inverse_softplus(y)) == pytest.approx(y, rel=1e-10)

    def test_positive(self):
        assert np.all(softplus(np.array([-40.0, -700.0, 0.0, 50.0])) > 0)


class TestKl:
    def test_identity_exact(self):
        rng = np.random.default_rng(0)
        m, v = rng.standard_normal(50), rng.uniform(0.1, 2, 50)
        assert kl_diag_gauss(m, v, m, v)[0] == 0.0

    def test_unit_variance_shift(self):
        assert kl_diag_gauss([1.0], [1.0], [0.0], [1.0])[0] == pytest.approx(0.5, abs=1e-15)

    def test_non_negative_and_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m, v = rng.standard_normal(10), rng.uniform(0.1, 2, 10)
            m2, v2 = m.copy(), v.copy()
            k = rng.integers(10)
            if rng.random() < 0.5:
                m2[k] += rng.uniform(0.01, 1)
            else:
                v2[k] *= rng.uniform(1.1, 2)
            assert kl_diag_gauss(m, v, m2, v2)[0] > 0
            assert kl_diag_gauss(m, v, m, v)[0] == 0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        mq, vq = rng.standard_normal(8), rng.uniform(0.2, 2, 8)
        mp, vp = rng.standard_normal(8), rng.uniform(0.2, 2, 8)
        _, gm, gv = kl_diag_gauss(mq, vq, mp, vp)
        h = 1e-6
        for k in range(8):
            e = np.zeros(8)
            e[k] = h
            fd_m = (kl_diag_gauss(mq + e, vq, mp, vp)[0] - kl_diag_gauss(mq - e, vq, mp, vp)[0]) / (2 * h)
            fd_v = (kl_diag_gauss(mq, vq + e, mp, vp)[0] - kl_diag_gauss(mq, vq - e, mp, vp)[0]) / (2 * h)
            assert gm[k] == pytest.approx(fd_m, rel=1e-6, abs=1e-9)
            assert gv[k] == pytest.approx(fd_v, rel=1e-6, abs=1e-9)

    def test_doubling_sigma_halves_mean_gradient(self):
        rng = np.random.default_rng(3)
        mq, vq, mp, vp = rng.standard_normal(6), rng.uniform(0.1, 1, 6), rng.standard_normal(6), rng.uniform(0.1, 1, 6)
        _, g1, _ = kl_diag_gauss(mq, vq, mp, vp)
        _, g2, _ = kl_diag_gauss(mq, vq, mp, 2 * vp)
        np.testing.assert_array_equal(g2, 0.5 * g1)

    def test_rejects_non_positive_variance(self):
        with pytest.raises(ValueError):
            kl_diag_gauss([0.0], [0.0], [0.0], [1.0])
        with pytest.raises(ValueError):
            kl_diag_gauss([0.0], [1.0], [0.0], [-1.0])


class TestSampling:
    def test_vanishing_variance(self):
        mu = np.random.default_rng(0).standard_normal(100)
        node = VariationalNode.create(mu, 1.0)
        node.pi[:] = -40.0
        w, _ = sample_weights(node, np.random.default_rng(1))
        np.testing.assert_allclose(w, mu, atol=1e-8, rtol=0)

    def test_empirical_variance(self):
        node = VariationalNode.create(np.zeros(4), 1.0)
        node.pi[:] = np.array([-2.0, 0.0, 1.0, 3.0])
        rng = np.random.default_rng(2)
        draws = np.stack([sample_weights(node, rng)[0] for _ in range(100_000)])
        np.testing.assert_allclose(draws.var(axis=0), softplus(node.pi), rtol=0.03)

    def test_reparameterization(self):
        node = VariationalNode.create(np.arange(3.0), 0.25)
        w, eps = sample_weights(node, np.random.default_rng(3))
        np.testing.assert_allclose(w, node.mu + 0.5 * eps, rtol=1e-12)


class TestMStep:
    def test_single_node_exact(self):
        rng = np.random.default_rng(0)
        n = _node(rng, 20)
        prior = m_step([n])
        np.testing.assert_array_equal(prior.omega, n.mu)
        np.testing.assert_array_equal(prior.sigma, softplus(n.pi))

    def test_two_node_example(self):
        a = VariationalNode.create(np.array([0.0]), 1.0)
        b = VariationalNode.create(np.array([2.0]), 1.0)
        prior = m_step([a, b])
        assert prior.omega[0] == pytest.approx(1.0, abs=1e-12)
        assert prior.sigma[0] == pytest.approx(2.0, abs=1e-12)
        best = _mstep_objective([a, b], prior.omega, prior.sigma)
        for om in np.linspace(0.5, 1.5, 21):
            for sg in np.linspace(1.0, 3.0, 21):
                assert _mstep_objective([a, b], np.array([om]), np.array([sg])) <= best + 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        nodes = [_node(rng, 30, node_id=j) for j in range(7)]
        p1 = m_step(nodes)
        for perm in (nodes[::-1], [nodes[k] for k in rng.permutation(7)]):
            p2 = m_step(perm)
            np.testing.assert_array_equal(p1.omega, p2.omega)
            np.testing.assert_array_equal(p1.sigma, p2.sigma)

    def test_sigma_dominates_mean_rho(self):
        rng = np.random.default_rng(2)
        nodes = [_node(rng, 40) for _ in range(5)]
        prior = m_step(nodes)
        mean_rho = np.mean([softplus(n.pi) for n in nodes], axis=0)
        assert np.all(prior.sigma >= mean_rho * (1 - 1e-12))

    def test_floor(self):
        mu = np.ones(3)
        n = VariationalNode.create(mu, 1.0)
        n.pi[:] = -800.0  # softplus underflows to 0
        prior = m_step([n, VariationalNode(mu.copy(), n.pi.copy(), n.adam_mu, n.adam_pi, 1)],
                       sigma_floor=1e-12)
        np.testing.assert_array_equal(prior.sigma, 1e-12)

    def test_ordered_mean(self):
        arrs = [np.array([1e16, 1.0]), np.array([1.0, -1e16]), np.array([-1e16, 1e16])]
        a = ordered_mean(arrs)
        b = ordered_mean(arrs[::-1])
        np.testing.assert_array_equal(a, b)

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            LatentPrior(np.zeros(3), np.array([1.0, 0.0, 1.0]))


class TestEStep:
    def _term(self, dtype=np.float64):
        g, geom, fam, sinos = _problem(count=1)
        emb, arch, w = build_network(SMALL, 0)
        return DataTerm(arch, emb, geom, sinos[0], g, dtype), w, fam[0]

    def test_pi_gradient_finite_differences(self):
        # fixed noise: d/dpi of data(mu + sqrt(softplus(pi)) eps) + beta KL
        from jointinr.bayes import _node_gradients

        term, w, _ = self._term()
        rng = np.random.default_rng(0)
        P = w.size
        assert 150 < P < 700
        node = VariationalNode.create(w.astype(np.float64), 1e-3)
        node.pi[:] += rng.uniform(-1, 1, P)
        prior = LatentPrior(w + 0.01 * rng.standard_normal(P), rng.uniform(0.01, 0.1, P))
        beta = 0.3
        eps = np.random.default_rng(5).standard_normal(P)

        def total(pi):
            wv = node.mu + np.sqrt(softplus(pi)) * eps
            return term.loss(wv) + beta * kl_diag_gauss(node.mu, softplus(pi), prior.omega, prior.sigma)[0]

        _, _, _, g_pi = _node_gradients(node, prior, term, beta, np.random.default_rng(5))
        h = 1e-6
        for k in rng.choice(P, 40, replace=False):
            pp, pm = node.pi.copy(), node.pi.copy()
            pp[k] += h
            pm[k] -= h
            fd = (total(pp) - total(pm)) / (2 * h)
            assert g_pi[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_stationary_point(self):
        # prior equal to the posterior and data rendered by mu itself; at
        # pi = -80 the sampling jitter is below double precision
        from jointinr.bayes import _node_gradients

        g, geom, _, _ = _problem(count=1)
        emb, arch, w = build_network(SMALL, 0)
        base = DataTerm(arch, emb, geom, Sinogram(np.zeros((geom.n_angles, geom.detector_count)), geom),
                        g, np.float64)
        mu = w.astype(np.float64)
        y = Sinogram(base.A @ base.render(mu).ravel(), geom)
        term = DataTerm(arch, emb, geom, y, g, np.float64)
        node = VariationalNode.create(mu, 1e-6)
        node.pi[:] = -80.0
        prior = LatentPrior(mu.copy(), softplus(node.pi))
        _, _, g_mu, _ = _node_gradients(node, prior, term, 1.0, np.random.default_rng(0))
        _, g_off, _ = term.evaluate(mu + 1e-3)
        assert np.abs(g_mu).max() < 1e-6 * np.abs(g_off).max()

    def test_beta_zero_matches_single(self):
        g, geom, fam, sinos = _problem(count=1)
        cfg = TrainConfig(iterations=40, lr=1e-3, log_every=0, net=SMALL)
        single_w = []
        train_single_inr(sinos[0], geom, cfg, g, on_step=lambda it, w: single_w.append(w.copy()))
        emb, arch, w0 = build_network(SMALL, 0)
        term = DataTerm(arch, emb, geom, sinos[0], g, np.float32)
        node = VariationalNode.create(w0.astype(np.float32), 1e-6)
        node.pi[:] = -40.0
        prior = LatentPrior(np.zeros(arch.size), np.ones(arch.size))
        mus = []
        e_step(node, prior, term, 0.0, 40, 1e-3, np.random.default_rng(0), freeze_pi=True,
               log_every=0, on_step=lambda it, mu, pi: mus.append(mu.copy()))
        for a, b in zip(single_w, mus):
            np.testing.assert_allclose(b, a, atol=1e-6, rtol=0)

    def test_huge_prior_variance_is_unregularized(self):
        term, w, _ = self._term()
        P = w.size
        prior = LatentPrior(np.zeros(P), np.full(P, 1e6))
        node = VariationalNode.create(w.astype(np.float64), 1e-6)
        node, _ = e_step(node, prior, term, 1.0, 10, 1e-3, np.random.default_rng(0), log_every=0)
        _, g_data, _ = term.evaluate(node.mu)
        _, g_kl, _ = kl_diag_gauss(node.mu, softplus(node.pi), prior.omega, prior.sigma)
        assert np.linalg.norm(g_kl) < 1e-6 * np.linalg.norm(g_data)

    def test_frozen_pi_untouched(self):
        term, w, _ = self._term()
        node = VariationalNode.create(w.astype(np.float64), 1e-6)
        prior = LatentPrior(np.zeros(w.size), np.ones(w.size))
        out, _ = e_step(node, prior, term, 1e-3, 5, 1e-3, np.random.default_rng(0), freeze_pi=True)
        np.testing.assert_array_equal(out.pi, node.pi)
        assert not np.array_equal(out.mu, node.mu)

    def test_losses_recorded(self):
        term, w, _ = self._term()
        node = VariationalNode.create(w.astype(np.float64), 1e-6)
        prior = LatentPrior(w.astype(np.float64), np.full(w.size, 1e-6))
        losses = []
        e_step(node, prior, term, 1e-3, 7, 1e-3, np.random.default_rng(0), losses=losses)
        assert len(losses) == 7
        assert losses[0][1] == pytest.approx(0.0, abs=1e-12)  # q starts at the prior
        assert all(d >= 0 and k >= 0 for d, k in losses)


class TestTraining:
    def test_deterministic_and_elbo(self):
        g, geom, fam, sinos = _problem(count=3)
        cfg = BayesConfig(em_rounds=4, e_steps=10, kl_weight=1e-4, seed=0, log_every=5)
        a = train_inr_bayes(sinos, [geom] * 3, cfg, g, SMALL, truths=fam)
        b = train_inr_bayes(sinos, [geom] * 3, cfg, g, SMALL, truths=fam)
        assert a.elbo_trace == b.elbo_trace
        for ra, rb in zip(a.results, b.results):
            assert ra.trace == rb.trace
        assert len(a.elbo_trace) == 4
        assert all(r.kl >= 0 for r in a.elbo_trace)
        for r in a.elbo_trace:
            assert r.elbo == -(r.data + cfg.kl_weight * r.kl)
        its = [r.iteration for r in a.results[0].trace]
        assert its == sorted(set(its)) and its[-1] == 40

    def test_single_node_beta_zero_close_to_single(self):
        g, geom, fam, sinos = _problem(count=1, n_angles=10)
        cfg = BayesConfig(em_rounds=3, e_steps=50, kl_weight=0.0, seed=0, log_every=0)
        r = train_inr_bayes(sinos, [geom], cfg, g, SMALL, truths=fam).results[0]
        s = train_single_inr(sinos[0], geom, TrainConfig(iterations=150, log_every=0, net=SMALL),
                             g, truth=fam[0])
        assert abs(r.trace[-1].psnr - s.trace[-1].psnr) < 0.5

    def test_divergent_node_flagged(self):
        g, geom, fam, sinos = _problem(count=3)
        bad = Sinogram(np.full(sinos[0].values.shape, 1e200), geom)  # loss overflows
        cfg = BayesConfig(em_rounds=2, e_steps=3, kl_weight=1e-4, lr=1e-3, log_every=0)
        res = train_inr_bayes([sinos[0], bad, sinos[2]], [geom] * 3, cfg, g, SMALL,
                              dtype="float64")
        assert res.diverged == [1]
        assert res.results[1].diverged and not res.results[0].diverged

    def test_adaptation_and_prior_round_trip(self, tmp_path):
        g, geom, fam, sinos = _problem(count=3)
        cfg = BayesConfig(em_rounds=2, e_steps=10, kl_weight=1e-4, log_every=5)
        res = train_inr_bayes(sinos[:2], [geom] * 2, cfg, g, SMALL)
        save_prior(res.prior, tmp_path / "prior")
        loaded = load_prior(tmp_path / "prior")
        assert loaded.arch == res.prior.arch and loaded.embedding == res.prior.embedding
        np.testing.assert_allclose(loaded.omega, res.prior.omega, rtol=1e-6)
        first = []
        out = adapt_with_frozen_prior(sinos[2], geom, loaded, cfg, g, iterations=15, truth=fam[2],
                                      on_step=lambda it, mu, pi: first.append(mu.copy()))
        assert out.trace[-1].iteration == 15
        assert len(first) == 15
        with pytest.raises(ValueError):
            adapt_with_frozen_prior(sinos[2], geom, LatentPrior(loaded.omega, loaded.sigma), cfg, g)


class TestUncertainty:
    def _node(self):
        emb, arch, w = build_network(SMALL, 0)
        return emb, arch, VariationalNode.create(w.astype(np.float64), 1e-4)

    def test_deterministic_weights(self):
        emb, arch, node = self._node()
        node.pi[:] = -40.0
        _, var = posterior_uncertainty(node, arch, emb, GridSpec(16))
        assert var.values.max() < 1e-10

    def test_mean_converges(self):
        from jointinr.single import inr_render
        from jointinr.inr import SirenParams

        emb, arch, node = self._node()
        g = GridSpec(16)
        ref = inr_render(SirenParams(arch, node.mu), emb, g).values
        devs = []
        for n in (16, 256):
            mean, var = posterior_uncertainty(node, arch, emb, g, n, np.random.default_rng(0))
            devs.append(np.abs(mean.values - ref).mean())
            assert var.values.min() >= 0
        assert devs[1] < devs[0]

    def test_needs_two_samples(self):
        emb, arch, node = self._node()
        with pytest.raises(ValueError):
            posterior_uncertainty(node, arch, emb, GridSpec(8), 1)
