"""Background model training, alignment, and statistics accumulation."""

import numpy as np
import pytest
from scipy.special import logsumexp

from tvkit.gmm import (
    BaumWelchStats,
    GmmDiag,
    GmmFull,
    SparseAlignment,
    accumulate_bw_stats,
    align_frames,
    select_top_k,
    train_gmm_diag,
    train_gmm_full,
)


def _two_cluster_1d(rng, n=2000):
    a = rng.normal(-4.0, 0.5, (n // 2, 1))
    b = rng.normal(4.0, 0.5, (n // 2, 1))
    return np.concatenate([a, b])


def _full_cov_gmm_sample(rng, n):
    means = np.array([[0.0, 0.0], [6.0, 6.0]])
    covs = np.array([
        [[1.0, 0.6], [0.6, 1.0]],
        [[2.0, -0.8], [-0.8, 1.0]],
    ])
    weights = np.array([0.4, 0.6])
    comps = rng.choice(2, p=weights, size=n)
    chols = np.linalg.cholesky(covs)
    x = means[comps] + np.einsum(
        "tij,tj->ti", chols[comps], rng.standard_normal((n, 2))
    )
    return x, weights, means, covs


class TestTrainDiag:
    def test_two_separated_clusters(self):
        rng = np.random.default_rng(0)
        x = _two_cluster_1d(rng)
        model = train_gmm_diag(x, 2, n_iters=15, seed=0)
        centers = np.sort(model.means[:, 0])
        assert abs(centers[0] + 4.0) < 0.1
        assert abs(centers[1] - 4.0) < 0.1

    def test_single_component_closed_form(self):
        rng = np.random.default_rng(1)
        x = rng.normal(2.0, 3.0, (500, 4))
        model = train_gmm_diag(x, 1, n_iters=1, seed=0)
        np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(model.variances[0], x.var(axis=0), atol=1e-10)
        assert model.weights[0] == 1.0

    def test_loglik_non_decreasing(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (400, 3)) + rng.choice(
            [-3.0, 3.0], size=(400, 1)
        )
        model = train_gmm_diag(x, 4, n_iters=12, seed=3)
        lls = np.asarray(model.training_loglik)
        rel = np.diff(lls) / np.abs(lls[:-1])
        assert np.all(rel > -1e-8)

    def test_utterance_collection_input(self):
        rng = np.random.default_rng(3)
        utts = [rng.normal(0, 1, (50, 2)) for _ in range(5)]
        model = train_gmm_diag(utts, 2, n_iters=2, seed=0)
        model.validate()

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError, match="frames"):
            train_gmm_diag(np.zeros((15, 2)), 2, n_iters=1, seed=0)

    def test_bad_component_count_rejected(self):
        with pytest.raises(ValueError):
            train_gmm_diag(np.zeros((100, 2)), 0, n_iters=1, seed=0)

    def test_starved_component_reseeded_with_warning(self, monkeypatch):
        import tvkit.gmm as gmm_mod

        rng = np.random.default_rng(4)
        x = rng.normal(0, 1.0, (600, 1))

        def bad_seeding(frames, n_components, seeding_rng):
            means = frames[:n_components].copy()
            means[-1] = 1e6  # off-data component gets exactly zero occupancy
            return means

        monkeypatch.setattr(gmm_mod, "_seed_means", bad_seeding)
        with pytest.warns(RuntimeWarning, match="starved"):
            model = train_gmm_diag(x, 2, n_iters=3, seed=0)
        model.validate()
        # the re-seeded component is back on the data
        assert np.all(np.abs(model.means) < 100)

    def test_large_component_count_supported(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 1, (2048 * 10, 2))
        model = train_gmm_diag(x, 2048, n_iters=0, seed=0)
        assert model.n_components == 2048


class TestTrainFull:
    def test_recovers_generator_covariances(self):
        rng = np.random.default_rng(10)
        x, weights, means, covs = _full_cov_gmm_sample(rng, 10_000)
        diag = train_gmm_diag(x, 2, n_iters=10, seed=0)
        full = train_gmm_full(x, diag, n_iters=10)
        # match learned components to generator components by mean distance
        order = np.argsort(full.means[:, 0])
        truth_order = np.argsort(means[:, 0])
        for got, want in zip(order, truth_order):
            err = np.linalg.norm(full.covariances[got] - covs[want])
            assert err < 0.1
            assert np.linalg.norm(full.means[got] - means[want]) < 0.1

    def test_zero_iterations_returns_expanded_init(self):
        rng = np.random.default_rng(11)
        x = rng.normal(0, 1, (300, 2))
        diag = train_gmm_diag(x, 2, n_iters=3, seed=0)
        full = train_gmm_full(x, diag, n_iters=0)
        np.testing.assert_array_equal(full.means, diag.means)
        for c in range(2):
            np.testing.assert_array_equal(
                np.diag(full.covariances[c]), diag.variances[c]
            )
            assert np.all(full.covariances[c][~np.eye(2, dtype=bool)] == 0)

    def test_isotropic_data_small_off_diagonals(self):
        rng = np.random.default_rng(12)
        x = rng.normal(0, 1, (8000, 3))
        diag = train_gmm_diag(x, 1, n_iters=3, seed=0)
        full = train_gmm_full(x, diag, n_iters=3)
        off = full.covariances[0][~np.eye(3, dtype=bool)]
        assert np.max(np.abs(off)) < 0.05
        # single component: the learned covariance is the sample covariance
        sample_cov = np.cov(x.T, bias=True)
        np.testing.assert_allclose(full.covariances[0], sample_cov, atol=1e-8)

    def test_loglik_non_decreasing(self):
        rng = np.random.default_rng(13)
        x, *_ = _full_cov_gmm_sample(rng, 3000)
        diag = train_gmm_diag(x, 2, n_iters=5, seed=0)
        full = train_gmm_full(x, diag, n_iters=8)
        lls = np.asarray(full.training_loglik)
        rel = np.diff(lls) / np.abs(lls[:-1])
        assert np.all(rel > -1e-8)


class TestSelectTopK:
    def test_frame_at_component_mean(self):
        rng = np.random.default_rng(20)
        model = GmmDiag(
            weights=np.array([1 / 3, 1 / 3, 1 / 3]),
            means=np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]]),
            variances=np.ones((3, 2)),
        )
        assert select_top_k(model, model.means[0], 1).tolist() == [0]

    def test_matches_dense_posterior_oracle(self):
        rng = np.random.default_rng(21)
        c, f = 16, 4
        model = GmmDiag(
            weights=rng.dirichlet(np.full(c, 2.0)),
            means=rng.normal(0, 2, (c, f)),
            variances=rng.uniform(0.5, 2.0, (c, f)),
        )
        for _ in range(20):
            frame = rng.normal(0, 2, f)
            got = select_top_k(model, frame, 5)
            # dense oracle: full posterior per component, top 5 by sort
            log_post = model.log_posteriors(frame[None, :])[0]
            want = np.argsort(-log_post, kind="stable")[:5]
            np.testing.assert_array_equal(np.sort(got), np.sort(want))

    def test_k_equals_c_returns_everything(self):
        model = GmmDiag(
            weights=np.full(4, 0.25),
            means=np.zeros((4, 2)),
            variances=np.ones((4, 2)),
        )
        got = select_top_k(model, np.zeros(2), 4)
        assert sorted(got.tolist()) == [0, 1, 2, 3]

    def test_tie_breaks_toward_lower_index(self):
        model = GmmDiag(
            weights=np.full(3, 1 / 3),
            means=np.zeros((3, 2)),
            variances=np.ones((3, 2)),
        )
        got = select_top_k(model, np.ones(2), 2)
        assert got.tolist() == [0, 1]

    def test_k_too_large_rejected(self):
        model = GmmDiag(
            weights=np.full(2, 0.5), means=np.zeros((2, 2)),
            variances=np.ones((2, 2)),
        )
        with pytest.raises(ValueError):
            select_top_k(model, np.zeros(2), 3)


def _random_model_pair(rng, c=8, f=3):
    weights = rng.dirichlet(np.full(c, 5.0))
    means = rng.normal(0, 3, (c, f))
    variances = rng.uniform(0.5, 1.5, (c, f))
    covs = np.zeros((c, f, f))
    for i in range(c):
        a = rng.normal(0, 0.3, (f, f))
        covs[i] = np.diag(variances[i]) + a @ a.T
    return (GmmDiag(weights, means, variances), GmmFull(weights, means, covs))


class TestAlignFrames:
    def test_invariants_on_random_frames(self):
        rng = np.random.default_rng(30)
        diag, full = _random_model_pair(rng)
        frames = rng.normal(0, 3, (1000, 3))
        alignment = align_frames(diag, full, frames, top_k=5, prune=0.025)
        alignment.validate(top_k=5, prune=0.025)
        sums = np.add.reduceat(
            alignment.weights.astype(np.float64), alignment.offsets[:-1]
        )
        assert np.max(np.abs(sums - 1.0)) < 1e-5
        assert alignment.weights.min() >= 0.025 - 1e-7
        assert alignment.entry_counts().max() <= 5

    def test_symmetric_frame_splits_evenly(self):
        weights = np.array([0.5, 0.5])
        means = np.array([[-1.0, 0.0], [1.0, 0.0]])
        variances = np.ones((2, 2))
        covs = np.stack([np.eye(2), np.eye(2)])
        diag = GmmDiag(weights, means, variances)
        full = GmmFull(weights, means, covs)
        alignment = align_frames(diag, full, np.zeros((1, 2)), top_k=2, prune=0.025)
        comps, wts = alignment.frame(0)
        np.testing.assert_array_equal(comps, [0, 1])
        np.testing.assert_allclose(wts, [0.5, 0.5], atol=1e-6)

    def test_posteriors_renormalized_over_selection_only(self):
        rng = np.random.default_rng(31)
        diag, full = _random_model_pair(rng, c=6)
        frames = rng.normal(0, 3, (50, 3))
        k = 3
        alignment = align_frames(diag, full, frames, top_k=k, prune=0.0)
        full_ll = full.log_likelihoods(frames)
        diag_ll = diag.log_likelihoods(frames)
        for t in range(50):
            sel = np.argsort(-diag_ll[t], kind="stable")[:k]
            expect = np.exp(full_ll[t, sel] - logsumexp(full_ll[t, sel]))
            comps, wts = alignment.frame(t)
            order = np.argsort(sel, kind="stable")
            np.testing.assert_array_equal(comps, np.sort(sel))
            np.testing.assert_allclose(wts, expect[order], atol=1e-6)

    def test_degenerate_frame_keeps_argmax(self):
        rng = np.random.default_rng(32)
        diag, full = _random_model_pair(rng, c=4)
        frames = rng.normal(0, 3, (200, 3))
        # absurd prune threshold forces the degenerate path on every frame
        alignment = align_frames(diag, full, frames, top_k=4, prune=0.9999)
        counts = alignment.entry_counts()
        assert np.all(counts == 1)
        np.testing.assert_allclose(alignment.weights, 1.0)

    def test_model_mismatch_rejected(self):
        rng = np.random.default_rng(33)
        diag, _ = _random_model_pair(rng, c=4)
        _, full = _random_model_pair(rng, c=5)
        with pytest.raises(ValueError, match="share"):
            align_frames(diag, full, np.zeros((1, 3)))

    def test_empty_utterance(self):
        rng = np.random.default_rng(34)
        diag, full = _random_model_pair(rng)
        alignment = align_frames(diag, full, np.zeros((0, 3)))
        assert alignment.n_frames == 0


class TestBaumWelchStats:
    def test_empty_utterance_zeros(self):
        alignment = SparseAlignment.from_frames([])
        stats = accumulate_bw_stats(np.zeros((0, 2)), alignment, 3)
        assert stats.n.sum() == 0
        assert np.all(stats.f == 0) and np.all(stats.S == 0)
        assert not stats.centered

    def test_single_frame_centered_at_mean(self):
        x = np.array([[1.5, -2.0]])
        alignment = SparseAlignment.from_frames(
            [(np.array([0]), np.array([1.0], dtype=np.float32))]
        )
        means = np.array([[1.5, -2.0], [0.0, 0.0]])
        stats = accumulate_bw_stats(x, alignment, 2, center_with=means)
        assert stats.centered
        np.testing.assert_allclose(stats.n, [1.0, 0.0])
        np.testing.assert_allclose(stats.f, 0.0, atol=1e-12)
        np.testing.assert_allclose(stats.S, 0.0, atol=1e-12)

    def test_matches_dense_brute_force(self):
        rng = np.random.default_rng(40)
        c, f, t = 6, 3, 5
        x = rng.normal(0, 2, (t, f))
        diag, full = _random_model_pair(rng, c=c, f=f)
        alignment = align_frames(diag, full, x, top_k=4, prune=0.0)
        stats = accumulate_bw_stats(x, alignment, c)

        # brute force: expand the sparse alignment to a dense (T, C) matrix
        gamma = np.zeros((t, c))
        for i in range(t):
            comps, wts = alignment.frame(i)
            gamma[i, comps] = wts.astype(np.float64)
        np.testing.assert_allclose(stats.n, gamma.sum(axis=0), atol=1e-9)
        np.testing.assert_allclose(stats.f, gamma.T @ x, atol=1e-9)
        for ci in range(c):
            want = (x * gamma[:, ci, None]).T @ x
            np.testing.assert_allclose(stats.S[ci], want, atol=1e-9)

    def test_occupancy_sums_to_frame_count(self):
        rng = np.random.default_rng(41)
        diag, full = _random_model_pair(rng)
        x = rng.normal(0, 3, (321, 3))
        alignment = align_frames(diag, full, x, top_k=5, prune=0.025)
        stats = accumulate_bw_stats(x, alignment, 8)
        assert abs(stats.n.sum() - 321) < 1e-6
        stats.validate(frame_count=321)

    def test_centering_identity(self):
        # uncentered and centered statistics relate exactly through the means
        rng = np.random.default_rng(42)
        c = 8
        diag, full = _random_model_pair(rng, c=c)
        x = rng.normal(0, 3, (64, 3))
        alignment = align_frames(diag, full, x, top_k=4, prune=0.025)
        means = rng.normal(0, 1, (c, 3))
        raw = accumulate_bw_stats(x, alignment, c)
        cen = accumulate_bw_stats(x, alignment, c, center_with=means)
        np.testing.assert_allclose(cen.n, raw.n, atol=1e-12)
        np.testing.assert_allclose(
            cen.f, raw.f - raw.n[:, None] * means, atol=1e-9
        )
        for ci in range(c):
            want = (
                raw.S[ci]
                - np.outer(raw.f[ci], means[ci])
                - np.outer(means[ci], raw.f[ci])
                + raw.n[ci] * np.outer(means[ci], means[ci])
            )
            np.testing.assert_allclose(cen.S[ci], want, atol=1e-9)

    def test_out_of_range_component_rejected(self):
        alignment = SparseAlignment.from_frames(
            [(np.array([5]), np.array([1.0], dtype=np.float32))]
        )
        with pytest.raises(ValueError, match="out of range"):
            accumulate_bw_stats(np.zeros((1, 2)), alignment, 3)

    def test_frame_count_mismatch_rejected(self):
        alignment = SparseAlignment.from_frames(
            [(np.array([0]), np.array([1.0], dtype=np.float32))]
        )
        with pytest.raises(ValueError, match="frame count"):
            accumulate_bw_stats(np.zeros((2, 2)), alignment, 3)
