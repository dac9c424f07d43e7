"""Background GMMs, sparse frame alignment, and Baum-Welch statistics.

The alignment strategy is two-stage: a diagonal-covariance model preselects
the top-K components per frame, then posteriors are computed over the
selected components only with a full-covariance model, pruned at a fixed
threshold and linearly rescaled to sum to one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from ._linalg import NumericError, floor_eigenvalues, symmetrize

LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_TOP_K = 20
DEFAULT_PRUNE = 0.025

# Relative floor applied to variances (diagonal) / eigenvalues (full).
VARIANCE_FLOOR_SCALE = 1e-5


@dataclass
class GmmDiag:
    """Diagonal-covariance GMM: weights (C,), means (C, F), variances (C, F)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    training_loglik: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def validate(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.means.shape != (self.n_components, self.dim):
            raise ValueError("means shape mismatch")
        if self.variances.shape != self.means.shape:
            raise ValueError("variances shape mismatch")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    def log_likelihoods(self, frames):
        """Per-frame, per-component log w_c + log N(x | mean_c, var_c), shape (T, C)."""
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        inv_var = 1.0 / self.variances
        # (T, C) via expansion of the squared Mahalanobis distance
        quad = (
            (frames**2) @ inv_var.T
            - 2.0 * frames @ (self.means * inv_var).T
            + np.sum(self.means**2 * inv_var, axis=1)
        )
        log_norm = -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1))
        return np.log(self.weights) + log_norm - 0.5 * quad

    def log_posteriors(self, frames):
        ll = self.log_likelihoods(frames)
        return ll - logsumexp(ll, axis=1, keepdims=True)

    def copy(self):
        return GmmDiag(self.weights.copy(), self.means.copy(), self.variances.copy())


@dataclass
class GmmFull:
    """Full-covariance GMM: weights (C,), means (C, F), covariances (C, F, F)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    training_loglik: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def validate(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to 1")
        asym = np.max(np.abs(self.covariances - np.swapaxes(self.covariances, 1, 2)))
        if asym >= 1e-10:
            raise ValueError(f"covariances not symmetric (max asymmetry {asym:g})")
        for c in range(self.n_components):
            try:
                scipy.linalg.cholesky(self.covariances[c], lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError(f"covariance of component {c} is not SPD") from exc

    def log_likelihoods(self, frames):
        """Per-frame, per-component log w_c + log N(x | mean_c, Sigma_c), shape (T, C)."""
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        n_frames = frames.shape[0]
        out = np.empty((n_frames, self.n_components))
        for c in range(self.n_components):
            chol = scipy.linalg.cholesky(self.covariances[c], lower=True)
            diff = (frames - self.means[c]).T
            sol = scipy.linalg.solve_triangular(chol, diff, lower=True)
            out[:, c] = (
                -0.5 * (self.dim * LOG_2PI + np.sum(sol**2, axis=0))
                - np.sum(np.log(np.diag(chol)))
            )
        return out + np.log(self.weights)

    def copy(self):
        return GmmFull(self.weights.copy(), self.means.copy(), self.covariances.copy())


@dataclass
class SparseAlignment:
    """Pruned per-frame component posteriors in CSR-like layout.

    Frame t owns entries ``offsets[t]:offsets[t+1]`` of ``components`` /
    ``weights``. Weights are stored as float32, matching the on-disk format.
    """

    offsets: np.ndarray  # (T + 1,) int64
    components: np.ndarray  # (E,) int32
    weights: np.ndarray  # (E,) float32

    @property
    def n_frames(self):
        return self.offsets.shape[0] - 1

    def frame(self, t):
        lo, hi = self.offsets[t], self.offsets[t + 1]
        return self.components[lo:hi], self.weights[lo:hi]

    def entry_counts(self):
        return np.diff(self.offsets)

    @classmethod
    def from_frames(cls, frames):
        """Build from an iterable of (component_indices, weights) pairs."""
        counts = [0]
        comps = []
        wts = []
        for c, w in frames:
            c = np.asarray(c, dtype=np.int32)
            w = np.asarray(w, dtype=np.float32)
            if c.shape != w.shape:
                raise ValueError("component/weight length mismatch")
            counts.append(c.shape[0])
            comps.append(c)
            wts.append(w)
        offsets = np.cumsum(np.asarray(counts, dtype=np.int64))
        if comps:
            components = np.concatenate(comps)
            weights = np.concatenate(wts)
        else:
            components = np.zeros(0, dtype=np.int32)
            weights = np.zeros(0, dtype=np.float32)
        return cls(offsets, components, weights)

    def validate(self, top_k=None, prune=None, atol=1e-5):
        counts = self.entry_counts()
        if self.n_frames and counts.min() < 1:
            raise ValueError("every frame needs at least one entry")
        if top_k is not None and self.n_frames and counts.max() > top_k:
            raise ValueError(f"frame with {counts.max()} entries exceeds top-K {top_k}")
        if self.weights.size:
            if self.weights.min() < 0.0 or self.weights.max() > 1.0 + atol:
                raise ValueError("weights outside [0, 1]")
            sums = np.add.reduceat(self.weights.astype(np.float64), self.offsets[:-1])
            sums = sums[counts > 0]
            if np.max(np.abs(sums - 1.0)) > atol:
                raise ValueError("per-frame weights do not sum to 1")
            if prune is not None and self.weights.min() < prune - 1e-7:
                raise ValueError("stored weight below prune threshold")


@dataclass
class BaumWelchStats:
    """Zeroth/first/second order statistics of a soft frame alignment.

    ``centered`` records whether first/second order values were shifted by
    per-component means before accumulation.
    """

    n: np.ndarray  # (C,)
    f: np.ndarray  # (C, F)
    S: np.ndarray  # (C, F, F)
    centered: bool = False

    @property
    def n_components(self):
        return self.n.shape[0]

    @property
    def dim(self):
        return self.f.shape[1]

    def validate(self, frame_count=None):
        if np.any(self.n < -1e-12):
            raise ValueError("occupancies must be nonnegative")
        if frame_count is not None and self.n.sum() > frame_count + 1e-6:
            raise ValueError("occupancies exceed frame count")
        asym = np.max(np.abs(self.S - np.swapaxes(self.S, 1, 2))) if self.S.size else 0.0
        if asym >= 1e-10:
            raise ValueError("second-order statistics not symmetric")


def _stack_features(features):
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    mats = [np.asarray(m, dtype=np.float64) for m in features]
    if not mats:
        raise ValueError("empty feature collection")
    return np.concatenate(mats, axis=0)


def _seed_means(frames, n_components, rng):
    """Sample initial means from frames, weighting by squared distance to
    the means already chosen so separated clusters each get one."""
    n_frames = frames.shape[0]
    chosen = np.empty((n_components, frames.shape[1]))
    chosen[0] = frames[rng.integers(n_frames)]
    dist2 = np.sum((frames - chosen[0]) ** 2, axis=1)
    for c in range(1, n_components):
        total = dist2.sum()
        if total <= 0:
            chosen[c] = frames[rng.integers(n_frames)]
            continue
        idx = rng.choice(n_frames, p=dist2 / total)
        chosen[c] = frames[idx]
        dist2 = np.minimum(dist2, np.sum((frames - chosen[c]) ** 2, axis=1))
    return chosen


def train_gmm_diag(features, n_components, n_iters=10, seed=0,
                   floor_scale=VARIANCE_FLOOR_SCALE):
    """Train a diagonal-covariance GMM with EM.

    Means are initialized from a seeded, distance-weighted random sample of
    frames and variances from the global per-dimension variance. Components
    whose occupancy drops below one frame are re-seeded with a warning.

    Args:
      features: (T, F) array or sequence of per-utterance (T_i, F) arrays.
      n_components: number of mixture components.
      n_iters: EM iterations (0 returns the initial model).
      seed: RNG seed for initialization and re-seeding.

    Returns:
      GmmDiag with ``training_loglik`` holding the per-iteration total
      log-likelihood (evaluated before each M-step).
    """
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    frames = _stack_features(features)
    n_frames = frames.shape[0]
    if n_frames < 10 * n_components:
        raise ValueError(
            f"need at least {10 * n_components} frames for C={n_components}, got {n_frames}"
        )
    rng = np.random.default_rng(seed)
    global_var = frames.var(axis=0)
    global_var = np.maximum(global_var, 1e-12)

    means = _seed_means(frames, n_components, rng)
    variances = np.tile(global_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    model = GmmDiag(weights, means, variances)

    for _ in range(n_iters):
        ll = model.log_likelihoods(frames)
        norm = logsumexp(ll, axis=1)
        model.training_loglik.append(float(norm.sum()))
        resp = np.exp(ll - norm[:, None])

        occ = resp.sum(axis=0)
        starved = occ < 1.0
        safe_occ = np.where(starved, 1.0, occ)
        new_means = (resp.T @ frames) / safe_occ[:, None]
        new_vars = (resp.T @ (frames**2)) / safe_occ[:, None] - new_means**2
        new_weights = occ / n_frames

        floor = floor_scale * float(new_vars[~starved].mean()) if np.any(~starved) else 1e-12
        new_vars = np.maximum(new_vars, max(floor, 1e-12))

        for c in np.flatnonzero(starved):
            warnings.warn(
                f"diag GMM component {c} starved (occupancy {occ[c]:.3g}), re-seeding",
                RuntimeWarning,
            )
            new_means[c] = frames[rng.integers(n_frames)]
            new_vars[c] = global_var
            new_weights[c] = 1.0 / n_components
        new_weights /= new_weights.sum()

        model = GmmDiag(new_weights, new_means, new_vars, model.training_loglik)

    model.validate()
    return model


def train_gmm_full(features, init, n_iters=5, floor_scale=VARIANCE_FLOOR_SCALE):
    """Refine a diagonal model into a full-covariance GMM with EM.

    Args:
      features: (T, F) array or sequence of per-utterance arrays.
      init: GmmDiag starting point (its variances seed the diagonals).
      n_iters: EM iterations (0 returns the expanded initial model).

    Returns:
      GmmFull with per-iteration log-likelihood in ``training_loglik``.
    """
    init.validate()
    frames = _stack_features(features)
    n_frames = frames.shape[0]
    n_comp, dim = init.means.shape

    covs = np.zeros((n_comp, dim, dim))
    for c in range(n_comp):
        covs[c] = np.diag(init.variances[c])
    model = GmmFull(init.weights.copy(), init.means.copy(), covs)

    for _ in range(n_iters):
        ll = model.log_likelihoods(frames)
        norm = logsumexp(ll, axis=1)
        model.training_loglik.append(float(norm.sum()))
        resp = np.exp(ll - norm[:, None])

        occ = resp.sum(axis=0)
        new_weights = occ / n_frames
        new_means = model.means.copy()
        new_covs = model.covariances.copy()
        for c in range(n_comp):
            if occ[c] < 1.0:
                warnings.warn(
                    f"full GMM component {c} starved (occupancy {occ[c]:.3g}), "
                    "keeping previous parameters",
                    RuntimeWarning,
                )
                new_weights[c] = model.weights[c]
                continue
            mean = resp[:, c] @ frames / occ[c]
            diff = frames - mean
            cov = (diff * resp[:, c, None]).T @ diff / occ[c]
            cov = symmetrize(cov)
            floor = floor_scale * float(np.trace(cov)) / dim
            if floor <= 0:
                raise NumericError(f"component {c} covariance collapsed")
            cov, _ = floor_eigenvalues(cov, floor)
            try:
                scipy.linalg.cholesky(cov, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError(
                    f"component {c} covariance singular after flooring"
                ) from exc
            new_means[c] = mean
            new_covs[c] = cov
        new_weights = new_weights / new_weights.sum()
        model = GmmFull(new_weights, new_means, new_covs, model.training_loglik)

    model.validate()
    return model


def select_top_k(ubm_diag, frame, k):
    """Indices of the K components with the highest diagonal-model posteriors.

    Ties break deterministically toward the lower index. Returned in
    decreasing posterior order.
    """
    if k > ubm_diag.n_components:
        raise ValueError("k exceeds component count")
    ll = ubm_diag.log_likelihoods(np.asarray(frame, dtype=np.float64)[None, :])[0]
    order = np.argsort(-ll, kind="stable")
    return order[:k]


def align_frames(ubm_diag, ubm_full, features, top_k=DEFAULT_TOP_K,
                 prune=DEFAULT_PRUNE):
    """Sparse frame alignment: diagonal preselection, full-covariance posteriors.

    Per frame, the ``top_k`` components under the diagonal model are kept,
    posteriors are recomputed over those components with the full model,
    entries below ``prune`` are discarded and the remainder rescaled to sum
    to one. If pruning removes everything, the single largest posterior is
    kept with weight one.
    """
    if ubm_diag.n_components != ubm_full.n_components or ubm_diag.dim != ubm_full.dim:
        raise ValueError("diagonal and full models must share C and F")
    if not 0.0 <= prune < 1.0:
        raise ValueError("prune threshold must be in [0, 1)")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n_frames = features.shape[0]
    if n_frames == 0:
        return SparseAlignment.from_frames([])
    top_k = min(top_k, ubm_diag.n_components)

    diag_ll = ubm_diag.log_likelihoods(features)
    selected = np.argsort(-diag_ll, axis=1, kind="stable")[:, :top_k]

    full_ll = ubm_full.log_likelihoods(features)
    sel_ll = np.take_along_axis(full_ll, selected, axis=1)
    post = np.exp(sel_ll - logsumexp(sel_ll, axis=1, keepdims=True))

    kept = post >= prune
    degenerate = ~kept.any(axis=1)
    if np.any(degenerate):
        best = post[degenerate].argmax(axis=1)
        rows = np.flatnonzero(degenerate)
        kept[rows, :] = False
        kept[rows, best] = True
    weights = np.where(kept, post, 0.0)
    weights /= weights.sum(axis=1, keepdims=True)

    # flatten the kept entries frame-major, components sorted within a frame
    frame_idx, col_idx = np.nonzero(kept)
    comps = selected[frame_idx, col_idx]
    wts = weights[frame_idx, col_idx]
    order = np.argsort(
        frame_idx.astype(np.int64) * ubm_diag.n_components + comps, kind="stable"
    )
    counts = np.bincount(frame_idx, minlength=n_frames)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return SparseAlignment(
        offsets,
        comps[order].astype(np.int32),
        wts[order].astype(np.float32),
    )


def accumulate_bw_stats(features, alignment, n_components, center_with=None):
    """Accumulate Baum-Welch statistics from a sparse alignment.

    n_c = sum_t gamma_c(t); f_c = sum_t gamma_c(t) x_t; S_c = sum_t
    gamma_c(t) x_t x_t^T, with x_t shifted by ``center_with[c]`` when
    centering means are given.

    Args:
      features: (T, F) frame matrix.
      alignment: SparseAlignment with T frames.
      n_components: C, the component count of the aligning model.
      center_with: optional (C, F) means; their presence sets ``centered``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n_frames, dim = features.shape
    if alignment.n_frames != n_frames:
        raise ValueError("alignment frame count does not match features")
    if center_with is not None:
        center_with = np.asarray(center_with, dtype=np.float64)
        if center_with.shape != (n_components, dim):
            raise ValueError("centering means have wrong shape")

    n = np.zeros(n_components)
    f = np.zeros((n_components, dim))
    S = np.zeros((n_components, dim, dim))
    if alignment.components.size == 0:
        return BaumWelchStats(n, f, S, centered=center_with is not None)

    comps = alignment.components.astype(np.int64)
    if comps.min() < 0 or comps.max() >= n_components:
        raise ValueError("alignment component index out of range")
    wts = alignment.weights.astype(np.float64)
    counts = alignment.entry_counts()
    frame_of_entry = np.repeat(np.arange(n_frames), counts)

    n = np.bincount(comps, weights=wts, minlength=n_components).astype(np.float64)

    order = np.argsort(comps, kind="stable")
    sorted_comps = comps[order]
    present, starts = np.unique(sorted_comps, return_index=True)
    bounds = np.append(starts, comps.shape[0])
    for i, c in enumerate(present):
        idx = order[bounds[i]:bounds[i + 1]]
        x = features[frame_of_entry[idx]]
        if center_with is not None:
            x = x - center_with[c]
        w = wts[idx]
        f[c] = w @ x
        S[c] = (x * w[:, None]).T @ x
    S = symmetrize(S)
    return BaumWelchStats(n, f, S, centered=center_with is not None)
