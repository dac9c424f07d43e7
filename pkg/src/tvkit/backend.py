"""Embedding post-processing and verification scoring.

The processing chain is center -> optional whiten -> length-normalize,
followed by optional LDA and either cosine or two-covariance PLDA scoring.
Whitening is meant for embeddings trained without minimum-divergence
re-estimation; with it, the extractor already whitens the latent space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import NumericError, symmetrize

LOG_2PI = float(np.log(2.0 * np.pi))


def length_normalize(x):
    """Scale a vector to unit Euclidean norm."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ValueError("cannot length-normalize the zero vector")
    return x / norm


def _length_normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot length-normalize a zero row")
    return x / norms


@dataclass
class GaussianizerChain:
    """Centering mean, optional whitening transform, then length normalization."""

    mean: np.ndarray
    whitener: np.ndarray | None = None

    def transform(self, x):
        """Apply the chain to a vector or a matrix of row embeddings."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x) - self.mean
        if self.whitener is not None:
            x = x @ self.whitener.T
        x = _length_normalize_rows(x)
        return x[0] if single else x


def fit_chain(embeddings, whiten=False):
    """Fit the centering mean and, when requested, a whitening transform.

    The whitener comes from an eigendecomposition of the sample covariance
    with eigenvalue flooring; a rank-deficient covariance is floored with a
    warning rather than rejected.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    mean = x.mean(axis=0)
    whitener = None
    if whiten:
        centered = x - mean
        cov = symmetrize(centered.T @ centered / x.shape[0])
        vals, vecs = np.linalg.eigh(cov)
        floor = 1e-10 * max(float(vals[-1]), 1e-30)
        if np.any(vals < floor):
            warnings.warn(
                "embedding covariance is rank deficient, flooring eigenvalues",
                RuntimeWarning,
            )
            vals = np.maximum(vals, floor)
        whitener = (vecs / np.sqrt(vals)).T
    return GaussianizerChain(mean=mean, whitener=whitener)


@dataclass
class LdaModel:
    """Linear discriminant projection to ``out_dim`` columns."""

    projection: np.ndarray  # (D, d)

    @property
    def out_dim(self):
        return self.projection.shape[1]

    def transform(self, x):
        return np.asarray(x, dtype=np.float64) @ self.projection


def fit_lda(embeddings, labels, out_dim):
    """Fit LDA by solving the generalized eigenproblem Sb v = lambda Sw v.

    The within-class scatter is eigenvalue-floored so degenerate classes
    (singletons) do not break the solve.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inverse = np.unique(labels, return_inverse=True)
    n_classes = classes.shape[0]
    dim = x.shape[1]
    if n_classes < 2:
        raise ValueError("LDA needs at least two classes")
    if out_dim > min(dim, n_classes - 1):
        raise ValueError(
            f"out_dim {out_dim} exceeds min(dim, classes - 1) = {min(dim, n_classes - 1)}"
        )

    mean = x.mean(axis=0)
    sw = np.zeros((dim, dim))
    sb = np.zeros((dim, dim))
    for k in range(n_classes):
        xk = x[inverse == k]
        mk = xk.mean(axis=0)
        diff = xk - mk
        sw += diff.T @ diff
        delta = (mk - mean)[:, None]
        sb += xk.shape[0] * (delta @ delta.T)
    sw /= x.shape[0]
    sb /= x.shape[0]
    sw = symmetrize(sw)
    sb = symmetrize(sb)

    vals = np.linalg.eigvalsh(sw)
    floor = 1e-8 * max(float(vals[-1]), float(np.trace(sb)) / dim, 1e-12)
    if vals[0] < floor:
        warnings.warn("within-class scatter floored", RuntimeWarning)
        evals, evecs = np.linalg.eigh(sw)
        sw = symmetrize((evecs * np.maximum(evals, floor)) @ evecs.T)

    eigvals, eigvecs = scipy.linalg.eigh(sb, sw)
    order = np.argsort(eigvals)[::-1][:out_dim]
    return LdaModel(projection=np.ascontiguousarray(eigvecs[:, order]))


class PldaModel:
    """Two-covariance PLDA: class centers y ~ N(mean, between), samples
    x ~ N(y, within)."""

    def __init__(self, mean, between, within):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.between = symmetrize(np.asarray(between, dtype=np.float64))
        self.within = symmetrize(np.asarray(within, dtype=np.float64))
        self.training_objective = []
        self._scoring = None

    @property
    def dim(self):
        return self.mean.shape[0]

    def _scoring_factors(self):
        """Cholesky factors for the marginal, sum, and difference covariances."""
        if self._scoring is None:
            marginal = self.between + self.within
            summed = self.within + 2.0 * self.between
            try:
                cho_m = scipy.linalg.cho_factor(marginal, lower=True)
                cho_s = scipy.linalg.cho_factor(summed, lower=True)
                cho_w = scipy.linalg.cho_factor(self.within, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError("PLDA covariances are not SPD") from exc
            logdets = tuple(
                2.0 * float(np.sum(np.log(np.diag(cho[0]))))
                for cho in (cho_m, cho_s, cho_w)
            )
            self._scoring = (cho_m, cho_s, cho_w, logdets)
        return self._scoring


def _class_partition(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inverse = np.unique(labels, return_inverse=True)
    groups = [x[inverse == k] for k in range(classes.shape[0])]
    return x, groups


def _plda_marginal_loglik(mean, between, within, groups):
    """Observed-data log-likelihood of the two-covariance model."""
    dim = mean.shape[0]
    cho_w = scipy.linalg.cho_factor(within, lower=True)
    logdet_w = 2.0 * float(np.sum(np.log(np.diag(cho_w[0]))))
    total = 0.0
    for xk in groups:
        n = xk.shape[0]
        xbar = xk.mean(axis=0)
        resid = xk - xbar
        quad_w = float(np.sum(resid * scipy.linalg.cho_solve(cho_w, resid.T).T))
        cov_bar = between + within / n
        cho_b = scipy.linalg.cho_factor(cov_bar, lower=True)
        logdet_b = 2.0 * float(np.sum(np.log(np.diag(cho_b[0]))))
        diff = xbar - mean
        quad_b = float(diff @ scipy.linalg.cho_solve(cho_b, diff))
        total += (
            -0.5 * (n - 1) * (dim * LOG_2PI + logdet_w)
            - 0.5 * dim * np.log(n)
            - 0.5 * quad_w
            - 0.5 * (dim * LOG_2PI + logdet_b + quad_b)
        )
    return total


def fit_plda(embeddings, labels, n_iters=10):
    """EM for the two-covariance model.

    Initialization uses the empirical between/within scatters; each
    iteration's observed-data log-likelihood is recorded in
    ``training_objective`` and must not decrease.
    """
    x, groups = _class_partition(embeddings, labels)
    n_classes = len(groups)
    dim = x.shape[1]
    if n_classes < 2:
        raise ValueError("PLDA needs at least two classes")
    if max(g.shape[0] for g in groups) < 2:
        raise ValueError("PLDA needs at least one class with two samples")

    mean = x.mean(axis=0)
    class_means = np.stack([g.mean(axis=0) for g in groups])
    between = symmetrize(np.cov(class_means.T, bias=True)) + 1e-6 * np.eye(dim)
    within = np.zeros((dim, dim))
    for g in groups:
        resid = g - g.mean(axis=0)
        within += resid.T @ resid
    within = symmetrize(within / x.shape[0])
    within = _floor_cov(within, "within-class covariance")

    counts = np.array([g.shape[0] for g in groups], dtype=np.float64)
    sums = np.stack([g.sum(axis=0) for g in groups])
    scatters = np.stack([g.T @ g for g in groups])
    n_total = float(counts.sum())

    objective = []
    for _ in range(n_iters):
        objective.append(_plda_marginal_loglik(mean, between, within, groups))
        try:
            b_inv = np.linalg.inv(between)
            w_inv = np.linalg.inv(within)
        except np.linalg.LinAlgError as exc:
            raise NumericError("PLDA covariance became singular") from exc
        y_hat = np.empty((n_classes, dim))
        y_cov = np.empty((n_classes, dim, dim))
        for k in range(n_classes):
            prec = b_inv + counts[k] * w_inv
            cov = np.linalg.inv(prec)
            y_cov[k] = symmetrize(cov)
            y_hat[k] = cov @ (b_inv @ mean + w_inv @ sums[k])
        new_mean = y_hat.mean(axis=0)
        centered = y_hat - new_mean
        between = symmetrize(
            (y_cov.sum(axis=0) + centered.T @ centered) / n_classes
        )
        within_acc = np.zeros((dim, dim))
        for k in range(n_classes):
            cross = np.outer(y_hat[k], sums[k])
            within_acc += (
                scatters[k]
                - cross
                - cross.T
                + counts[k] * (y_cov[k] + np.outer(y_hat[k], y_hat[k]))
            )
        within = symmetrize(within_acc / n_total)
        within = _floor_cov(within, "within-class covariance")
        between = _floor_cov(between, "between-class covariance", allow_tiny=True)
        mean = new_mean

    model = PldaModel(mean, between, within)
    model.training_objective = objective
    return model


def _floor_cov(cov, what, allow_tiny=False):
    vals, vecs = np.linalg.eigh(cov)
    floor = 1e-10 * max(float(vals[-1]), 1e-30)
    if not allow_tiny:
        floor = max(floor, 1e-12 * max(float(np.trace(cov)) / cov.shape[0], 1e-30))
    if vals[0] < floor:
        warnings.warn(f"{what} floored to stay positive definite", RuntimeWarning)
        return symmetrize((vecs * np.maximum(vals, floor)) @ vecs.T)
    return cov


def score_plda_trials(model, enrol, test):
    """Vectorized log-likelihood ratios for row-aligned enrol/test embeddings.

    The same/different hypothesis covariances decouple into sum and
    difference coordinates, so each trial costs three triangular solves.
    """
    enrol = np.atleast_2d(np.asarray(enrol, dtype=np.float64)) - model.mean
    test = np.atleast_2d(np.asarray(test, dtype=np.float64)) - model.mean
    if enrol.shape != test.shape or enrol.shape[1] != model.dim:
        raise ValueError("enrol/test embedding shapes do not match the model")
    cho_m, cho_s, cho_w, (logdet_m, logdet_s, logdet_w) = model._scoring_factors()

    def quad(cho, rows):
        return np.sum(rows * scipy.linalg.cho_solve(cho, rows.T).T, axis=1)

    u = (enrol + test) / np.sqrt(2.0)
    v = (enrol - test) / np.sqrt(2.0)
    return 0.5 * (
        quad(cho_m, enrol)
        + quad(cho_m, test)
        - quad(cho_s, u)
        - quad(cho_w, v)
        + 2.0 * logdet_m
        - logdet_s
        - logdet_w
    )


def score_plda(model, enrol, test):
    """Log p(same class) / p(different class) for one trial; symmetric."""
    return float(score_plda_trials(model, enrol[None, :], test[None, :])[0])


def score_cosine(a, b):
    """Cosine similarity in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _operating_points(scores, is_target):
    """FAR/FRR over thresholds (ascending), with acceptance at score >= threshold.

    Thresholds sit at midpoints between adjacent distinct scores plus one
    sentinel on each side, so no threshold coincides with a score and the
    operating-point set of negated scores is the exact mirror image.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape[0] != is_target.shape[0]:
        raise ValueError("scores and labels differ in length")
    n_tar = int(is_target.sum())
    n_non = int((~is_target).sum())
    if n_tar == 0 or n_non == 0:
        raise ValueError("need both target and nontarget trials")
    unique = np.unique(scores)
    thresholds = np.concatenate(
        ([unique[0] - 1.0], 0.5 * (unique[:-1] + unique[1:]), [unique[-1] + 1.0])
    )
    tar = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / n_non
    frr = np.searchsorted(tar, thresholds, side="left") / n_tar
    return thresholds, far, frr


def compute_eer(scores, is_target):
    """Equal error rate (percent) and its threshold.

    The rate is found by linear interpolation between the adjacent
    operating points where the false-accept and false-reject curves cross;
    exact ties resolve toward the higher threshold.
    """
    thresholds, far, frr = _operating_points(scores, is_target)
    diff = far - frr
    idx = int(np.argmax(diff <= 0.0))
    if diff[idx] == 0.0:
        while idx + 1 < diff.shape[0] and diff[idx + 1] == 0.0:
            idx += 1
        return float(100.0 * far[idx]), float(thresholds[idx])
    lo = idx - 1
    denom = (frr[idx] - frr[lo]) - (far[idx] - far[lo])
    t = (far[lo] - frr[lo]) / denom
    eer = far[lo] + t * (far[idx] - far[lo])
    threshold = float(thresholds[lo] + t * (thresholds[idx] - thresholds[lo]))
    return float(100.0 * eer), threshold


def det_points(scores, is_target):
    """(threshold, far, frr) rows over all operating points."""
    thresholds, far, frr = _operating_points(scores, is_target)
    return np.column_stack([thresholds, far, frr])


def write_det_csv(path, points):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,far,frr\n")
        for threshold, far, frr in points:
            fh.write(f"{float(threshold)!r},{float(far)!r},{float(frr)!r}\n")
