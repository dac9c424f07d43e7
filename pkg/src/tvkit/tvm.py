"""Total variability model: posteriors, EM updates, minimum-divergence step.

Two formulations are supported. In the standard one the per-component mean
is m_c + T_c w with a standard-normal prior on w and centered statistics.
In the augmented one the bias lives in the first column of T_c, the prior
mean is p*e1 (p > 0), and statistics are left uncentered. Posterior
formulas are shared:

    Phi(u) = (I + sum_c n_c(u) T_c^T Sigma_c^-1 T_c)^-1
    phi(u) = Phi(u) (p*e1 + sum_c T_c^T Sigma_c^-1 f_c(u))

The minimum-divergence step whitens the empirical latent distribution via
an eigendecomposition of its covariance and, for the augmented formulation,
rotates the whitened mean onto the first axis with a Householder
reflection before refreshing the prior offset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import NumericError, chol_logdet, floor_eigenvalues, symmetrize
from .gmm import LOG_2PI, GmmDiag, GmmFull

STANDARD = "standard"
AUGMENTED = "augmented"
FORMULATIONS = (STANDARD, AUGMENTED)

DEFAULT_PRIOR_OFFSET = 100.0

# Relative eigenvalue floors: residual covariances against their mean
# eigenvalue, the latent covariance against its largest one.
SIGMA_FLOOR_SCALE = 1e-5
LATENT_FLOOR_SCALE = 1e-10


@dataclass
class TvModel:
    """Projection matrices T (C, F, D), residual covariances Sigma (C, F, F),
    and the background model they sit on.

    ``bias`` is the explicit per-component offset of the standard
    formulation; the augmented formulation keeps its offset in the first
    column of T scaled by ``prior_offset``.
    """

    formulation: str
    T: np.ndarray
    Sigma: np.ndarray
    ubm_weights: np.ndarray
    ubm_means: np.ndarray
    bias: np.ndarray | None = None
    prior_offset: float = 0.0

    @property
    def n_components(self):
        return self.T.shape[0]

    @property
    def feat_dim(self):
        return self.T.shape[1]

    @property
    def latent_dim(self):
        return self.T.shape[2]

    @property
    def prior_mean(self):
        mean = np.zeros(self.latent_dim)
        if self.formulation == AUGMENTED:
            mean[0] = self.prior_offset
        return mean

    def predictive_covariances(self):
        """Marginal per-component frame covariances T_c T_c^T + Sigma_c.

        This is the model's own estimate of the frame distribution around
        the embedded means, so it is the right covariance for aligning new
        data; the residual Sigma_c alone describes frames only after
        conditioning on an utterance's latent vector.
        """
        return self.Sigma + np.einsum("cfd,cgd->cfg", self.T, self.T)

    def alignment_ubm_full(self):
        """Full-covariance model used to align frames against this extractor."""
        return GmmFull(self.ubm_weights, self.ubm_means, self.predictive_covariances())

    def alignment_ubm_diag(self):
        """Diagonal preselection model derived from the embedded background model."""
        variances = np.ascontiguousarray(
            np.diagonal(self.predictive_covariances(), axis1=1, axis2=2)
        )
        return GmmDiag(self.ubm_weights, self.ubm_means, variances)

    def validate(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        c, f, d = self.T.shape
        if self.Sigma.shape != (c, f, f):
            raise ValueError("Sigma shape mismatch")
        if self.ubm_weights.shape != (c,) or self.ubm_means.shape != (c, f):
            raise ValueError("background model shape mismatch")
        if self.formulation == STANDARD:
            if self.prior_offset != 0.0:
                raise ValueError("standard formulation requires prior offset 0")
            if self.bias is None or self.bias.shape != (c, f):
                raise ValueError("standard formulation requires a (C, F) bias")
        else:
            if self.bias is not None:
                raise ValueError("augmented formulation carries no separate bias")
            if d < 2:
                raise ValueError("augmented formulation needs latent_dim >= 2")
        asym = np.max(np.abs(self.Sigma - np.swapaxes(self.Sigma, 1, 2)))
        if asym >= 1e-10:
            raise ValueError("residual covariances not symmetric")
        for c_ in range(c):
            try:
                scipy.linalg.cholesky(self.Sigma[c_], lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError(f"Sigma[{c_}] is not SPD") from exc

    def copy(self):
        return TvModel(
            self.formulation,
            self.T.copy(),
            self.Sigma.copy(),
            self.ubm_weights.copy(),
            self.ubm_means.copy(),
            None if self.bias is None else self.bias.copy(),
            self.prior_offset,
        )


@dataclass
class LatentPosterior:
    """Posterior covariance Phi (D, D) and mean phi (D,) for one utterance."""

    Phi: np.ndarray
    phi: np.ndarray


class PosteriorWorkspace:
    """Per-model cache of the solved factors used by every E-step formula.

    Holds Cholesky factors of each Sigma_c, Sigma_c^-1 T_c (solved, not
    formed from an explicit inverse), T_c^T Sigma_c^-1 T_c, log|Sigma_c|,
    and Sigma_c^-1 for trace terms of the objective. Rebuild after any
    parameter update.
    """

    def __init__(self, model):
        self.model = model
        c, f, d = model.T.shape
        self.sinv_T = np.empty((c, f, d))
        self.T_sinv_T = np.empty((c, d, d))
        self.sigma_inv = np.empty((c, f, f))
        self.logdet = np.empty(c)
        eye = np.eye(f)
        for i in range(c):
            try:
                chol = scipy.linalg.cho_factor(model.Sigma[i], lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError(f"Sigma[{i}] is not SPD") from exc
            self.sinv_T[i] = scipy.linalg.cho_solve(chol, model.T[i])
            self.T_sinv_T[i] = symmetrize(model.T[i].T @ self.sinv_T[i])
            self.sigma_inv[i] = scipy.linalg.cho_solve(chol, eye)
            self.logdet[i] = chol_logdet(chol[0])


def _check_centering(model, stats):
    expect = model.formulation == STANDARD
    if stats.centered != expect:
        raise ValueError(
            f"stats centering flag {stats.centered} does not match "
            f"{model.formulation} formulation"
        )


def _posterior_terms(model, stats, workspace):
    """Posterior (Phi, phi) plus the utterance's marginal log-likelihood."""
    d = model.latent_dim
    active = np.flatnonzero(stats.n > 0)
    prec = np.eye(d)
    rhs = model.prior_mean
    if active.size:
        prec = prec + np.einsum(
            "c,cij->ij", stats.n[active], workspace.T_sinv_T[active]
        )
        rhs = rhs + np.einsum("cfd,cf->d", workspace.sinv_T[active], stats.f[active])
    prec = symmetrize(prec)
    try:
        chol = scipy.linalg.cho_factor(prec, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError("posterior precision not SPD (corrupted Sigma?)") from exc
    Phi = symmetrize(scipy.linalg.cho_solve(chol, np.eye(d)))
    phi = scipy.linalg.cho_solve(chol, rhs)

    data_term = 0.0
    if active.size:
        data_term = -0.5 * (
            float(stats.n[active] @ (model.feat_dim * LOG_2PI + workspace.logdet[active]))
            + float(np.einsum("cij,cij->", workspace.sigma_inv[active], stats.S[active]))
        )
    prior_mean = model.prior_mean
    loglik = (
        data_term
        + 0.5 * float(rhs @ phi)
        - 0.5 * chol_logdet(chol[0])
        - 0.5 * float(prior_mean @ prior_mean)
    )
    return LatentPosterior(Phi, phi), loglik


def latent_posterior(model, stats, workspace=None):
    """Gaussian posterior of the latent vector given one utterance's statistics."""
    _check_centering(model, stats)
    if workspace is None:
        workspace = PosteriorWorkspace(model)
    posterior, _ = _posterior_terms(model, stats, workspace)
    return posterior


def extract_ivector(model, stats, workspace=None):
    """The embedding: the posterior mean, prior offset included."""
    return latent_posterior(model, stats, workspace).phi


@dataclass
class EmAccumulators:
    """Mergeable E-step sufficient statistics over a set of utterances.

    A_c = sum_u n_c(u) (Phi + phi phi^T), B_c = sum_u f_c(u) phi(u)^T,
    N/Ssum are summed occupancies and second-order statistics, and
    phi_sum / moment_sum divide by the utterance count U to give the
    empirical latent mean h and second moment H. ``aux`` carries the
    summed marginal log-likelihood of the accumulated utterances.
    """

    A: np.ndarray
    B: np.ndarray
    N: np.ndarray
    Ssum: np.ndarray
    phi_sum: np.ndarray
    moment_sum: np.ndarray
    U: int = 0
    aux: float = 0.0

    @classmethod
    def zeros(cls, n_components, feat_dim, latent_dim):
        return cls(
            A=np.zeros((n_components, latent_dim, latent_dim)),
            B=np.zeros((n_components, feat_dim, latent_dim)),
            N=np.zeros(n_components),
            Ssum=np.zeros((n_components, feat_dim, feat_dim)),
            phi_sum=np.zeros(latent_dim),
            moment_sum=np.zeros((latent_dim, latent_dim)),
        )

    @property
    def h(self):
        return self.phi_sum / self.U

    @property
    def H(self):
        return self.moment_sum / self.U

    def merge(self, other):
        """Fold another partial accumulator into this one (elementwise addition)."""
        self.A += other.A
        self.B += other.B
        self.N += other.N
        self.Ssum += other.Ssum
        self.phi_sum += other.phi_sum
        self.moment_sum += other.moment_sum
        self.U += other.U
        self.aux += other.aux


def em_accumulate(model, stats_batch, workspace=None):
    """Run the E-step over a batch of per-utterance statistics.

    Partial accumulators over disjoint batches merge by addition to the
    full-corpus accumulator.
    """
    if workspace is None:
        workspace = PosteriorWorkspace(model)
    acc = EmAccumulators.zeros(model.n_components, model.feat_dim, model.latent_dim)
    for stats in stats_batch:
        _check_centering(model, stats)
        if stats.n_components != model.n_components or stats.dim != model.feat_dim:
            raise ValueError("statistics dimensions do not match the model")
        posterior, loglik = _posterior_terms(model, stats, workspace)
        phi = posterior.phi
        moment = posterior.Phi + np.outer(phi, phi)
        active = np.flatnonzero(stats.n > 0)
        if active.size:
            acc.A[active] += stats.n[active, None, None] * moment
            acc.B[active] += stats.f[active, :, None] * phi[None, None, :]
        acc.N += stats.n
        acc.Ssum += stats.S
        acc.phi_sum += phi
        acc.moment_sum += moment
        acc.U += 1
        acc.aux += loglik
    return acc


def aux_objective(model, stats_corpus):
    """Observed-data log-likelihood of the corpus, marginalized over the latent."""
    return em_accumulate(model, stats_corpus).aux


def update_T(model, acc):
    """Solve T_c A_c = B_c per component; starved components keep their T."""
    if acc.U < 1:
        raise ValueError("accumulator is empty")
    new_T = model.T.copy()
    for c in range(model.n_components):
        if acc.N[c] <= 0:
            continue
        try:
            chol = scipy.linalg.cho_factor(acc.A[c], lower=True)
        except scipy.linalg.LinAlgError:
            warnings.warn(
                f"component {c} has a singular E-step accumulator, leaving T unchanged",
                RuntimeWarning,
            )
            continue
        new_T[c] = scipy.linalg.cho_solve(chol, acc.B[c].T).T
    return new_T


def update_sigma(model, acc, new_T, floor_scale=SIGMA_FLOOR_SCALE):
    """Residual covariance update Sigma_c = (Ssum_c - T_c B_c^T) / N_c.

    The result is symmetrized and eigenvalue-floored; components without
    occupancy keep their previous covariance.
    """
    new_sigma = model.Sigma.copy()
    for c in range(model.n_components):
        if acc.N[c] <= 0:
            continue
        resid = (acc.Ssum[c] - new_T[c] @ acc.B[c].T) / acc.N[c]
        resid = symmetrize(resid)
        scale = float(np.trace(resid)) / model.feat_dim
        if scale <= 0:
            # perfect fit: fall back to the previous covariance's scale
            scale = float(np.trace(model.Sigma[c])) / model.feat_dim
        floor = floor_scale * scale
        if floor <= 0:
            raise NumericError(f"residual covariance of component {c} collapsed")
        resid, _ = floor_eigenvalues(resid, floor)
        new_sigma[c] = resid
    return new_sigma


def householder_to_e1(v):
    """Reflection P2 = I - 2 a a^T sending v to ||v|| e1.

    The unit normal is a = alpha*(v/||v||) - alpha*e1 with
    alpha = 1/sqrt(2 (1 - v_hat[0])). When v already lies along e1 the
    formula degenerates (division by zero) and the identity is returned.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cannot reflect the zero vector")
    unit = v / norm
    d = v.shape[0]
    if 1.0 - unit[0] < 1e-12:
        return np.eye(d)
    alpha = 1.0 / np.sqrt(2.0 * (1.0 - unit[0]))
    a = alpha * unit
    a[0] -= alpha
    return np.eye(d) - 2.0 * np.outer(a, a)


@dataclass
class MinDivTransforms:
    """Whitening transform P1, reflection P2, and the latent covariance G.

    P1 G P1^T = I; P2 is orthogonal, symmetric and involutory (identity for
    the standard formulation). ``eigvals``/``eigvecs`` keep the
    decomposition of G so that P1^-1 is available without a solve.
    """

    P1: np.ndarray
    P2: np.ndarray
    G: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def P1_inv(self):
        return self.eigvecs * np.sqrt(self.eigvals)


def compute_min_div(acc, formulation):
    """Minimum-divergence transforms from the accumulated latent moments."""
    if acc.U < 1:
        raise ValueError("accumulator is empty")
    h = acc.h
    G = symmetrize(acc.H - np.outer(h, h))
    vals, vecs = np.linalg.eigh(G)
    floor = LATENT_FLOOR_SCALE * float(vals[-1])
    if floor <= 0:
        raise NumericError("latent covariance is not positive")
    if np.any(vals < floor):
        warnings.warn(
            "latent covariance has a collapsed dimension, flooring eigenvalues",
            RuntimeWarning,
        )
        vals = np.maximum(vals, floor)
        G = symmetrize((vecs * vals) @ vecs.T)
    P1 = (vecs / np.sqrt(vals)).T
    if formulation == AUGMENTED:
        P2 = householder_to_e1(P1 @ h)
    else:
        P2 = np.eye(h.shape[0])
    return MinDivTransforms(P1=P1, P2=P2, G=G, eigvals=vals, eigvecs=vecs)


def apply_min_div(model, transforms, h):
    """Re-express the model so the empirical latent distribution matches the prior.

    T_c is right-multiplied by P1^-1 (and P2^-1 = P2 for the augmented
    formulation); the augmented prior offset becomes the first element of
    P2 P1 h, whose remaining elements vanish by construction.
    """
    h = np.asarray(h, dtype=np.float64)
    if model.formulation == AUGMENTED:
        right = transforms.P1_inv @ transforms.P2
        model.T = model.T @ right
        projected = transforms.P2 @ (transforms.P1 @ h)
        tail = np.max(np.abs(projected[1:])) if projected.shape[0] > 1 else 0.0
        if tail > 1e-8 * max(1.0, abs(projected[0])):
            raise NumericError("projected prior mean not aligned with the first axis")
        model.prior_offset = float(projected[0])
    else:
        model.T = model.T @ transforms.P1_inv


def update_ubm_means_augmented(model):
    """Refresh the background means from the learned bias columns (times p)."""
    if model.formulation != AUGMENTED:
        raise ValueError("background mean refresh requires the augmented formulation")
    model.ubm_means = model.prior_offset * model.T[:, :, 0].copy()


def update_mean_standard(model, h):
    """Optional standard-formulation bias update m_c <- m_c + T_c h.

    Statistics accumulated afterwards must be re-centered with the new
    bias. Known to interact badly with residual covariance updates.
    """
    if model.formulation != STANDARD:
        raise ValueError("bias update applies to the standard formulation only")
    h = np.asarray(h, dtype=np.float64)
    model.bias = model.bias + model.T @ h


def model_covariance(model, posterior, c):
    """Per-component marginal covariance T_c Phi T_c^T + Sigma_c (diagnostic)."""
    t = model.T[c]
    return symmetrize(t @ posterior.Phi @ t.T + model.Sigma[c])


def init_model(ubm, latent_dim, formulation, seed,
               prior_offset=DEFAULT_PRIOR_OFFSET):
    """Initialize an extractor on top of a trained full-covariance background model.

    Standard: T entries are standard-normal draws, bias and residual
    covariances copy the background model. Augmented: the first column of
    each T_c holds the background mean divided by the prior offset, the
    remaining columns are standard-normal draws.
    """
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    rng = np.random.default_rng(seed)
    c, f = ubm.means.shape
    T = rng.standard_normal((c, f, latent_dim))
    if formulation == STANDARD:
        model = TvModel(
            formulation=STANDARD,
            T=T,
            Sigma=ubm.covariances.copy(),
            ubm_weights=ubm.weights.copy(),
            ubm_means=ubm.means.copy(),
            bias=ubm.means.copy(),
            prior_offset=0.0,
        )
    else:
        if latent_dim < 2:
            raise ValueError("augmented formulation needs latent_dim >= 2")
        if prior_offset <= 0:
            raise ValueError("prior offset must be positive")
        T[:, :, 0] = ubm.means / prior_offset
        model = TvModel(
            formulation=AUGMENTED,
            T=T,
            Sigma=ubm.covariances.copy(),
            ubm_weights=ubm.weights.copy(),
            ubm_means=ubm.means.copy(),
            bias=None,
            prior_offset=float(prior_offset),
        )
    model.validate()
    return model
