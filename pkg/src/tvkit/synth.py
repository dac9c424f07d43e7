"""Synthetic corpora drawn from a known generator model.

Sampling runs the generative model forward: a latent vector per speaker,
per-utterance latents jittered by within-speaker noise, frames drawn from
the component mixture around the latent-shifted means. Because the
generator parameters are known, training runs can be scored against truth
(subspace angles, held-out likelihoods, verification protocols).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .io_formats import TrialList, save_model, write_matrix
from .tvm import AUGMENTED, DEFAULT_PRIOR_OFFSET, FORMULATIONS, STANDARD, TvModel


@dataclass
class SynthSpec:
    """Shape and difficulty of a synthetic corpus."""

    n_components: int
    feat_dim: int
    latent_dim: int
    n_speakers: int
    utts_per_speaker: int
    frames_range: tuple = (80, 120)
    seed: int = 0
    formulation: str = AUGMENTED
    within_noise: float = 0.3
    mean_scale: float = 8.0
    prior_offset: float = DEFAULT_PRIOR_OFFSET

    def validate(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        for name in ("n_components", "feat_dim", "n_speakers", "utts_per_speaker"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        if self.formulation == AUGMENTED and self.latent_dim < 2:
            raise ValueError("augmented generator needs latent_dim >= 2")
        lo, hi = self.frames_range
        if not 1 <= lo <= hi:
            raise ValueError("frames_range must satisfy 1 <= lo <= hi")
        if self.within_noise < 0:
            raise ValueError("within_noise must be >= 0")


@dataclass
class SynthCorpus:
    """Sampled corpus: features per utterance, speaker labels, generator truth."""

    ids: list
    features: dict  # utterance id -> (T, F) float32
    speakers: dict  # utterance id -> speaker id
    model: TvModel

    def save(self, outdir):
        """Write features (f32 matrix files), labels text, and the truth model."""
        feat_dir = os.path.join(outdir, "features")
        os.makedirs(feat_dir, exist_ok=True)
        for utt_id in self.ids:
            write_matrix(self.features[utt_id], "f32",
                         os.path.join(feat_dir, f"{utt_id}.fmx"))
        with open(os.path.join(outdir, "labels.txt"), "w", encoding="utf-8") as fh:
            for utt_id in self.ids:
                fh.write(f"{utt_id} {self.speakers[utt_id]}\n")
        save_model(self.model, os.path.join(outdir, "truth.tvm"))


def read_labels(path):
    """Read a labels file back as {utterance id: speaker id}."""
    speakers = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            utt_id, spk = line.split()
            speakers[utt_id] = spk
    return speakers


def _random_generator_model(spec, rng):
    c, f, d = spec.n_components, spec.feat_dim, spec.latent_dim
    weights = rng.dirichlet(np.full(c, 10.0))
    means = rng.normal(0.0, spec.mean_scale, (c, f))
    covs = np.zeros((c, f, f))
    for i in range(c):
        a = rng.normal(0.0, 1.0, (f, 2 * f))
        covs[i] = a @ a.T / (2 * f) + 0.5 * np.eye(f)
    T = rng.normal(0.0, 1.0, (c, f, d))
    if spec.formulation == AUGMENTED:
        T[:, :, 0] = means / spec.prior_offset
        return TvModel(AUGMENTED, T, covs, weights, means,
                       bias=None, prior_offset=spec.prior_offset)
    return TvModel(STANDARD, T, covs, weights, means,
                   bias=means.copy(), prior_offset=0.0)


def sample_corpus(spec, model=None):
    """Sample features and speaker labels; returns the generator with them.

    Passing ``model`` samples fresh speakers from an existing generator
    (e.g. a held-out evaluation population for the model a training corpus
    came from).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if model is None:
        model = _random_generator_model(spec, rng)

    c, f, d = model.T.shape
    chols = np.linalg.cholesky(model.Sigma)
    prior_mean = model.prior_mean

    ids = []
    features = {}
    speakers = {}
    for s in range(spec.n_speakers):
        spk = f"s{s:04d}"
        speaker_latent = prior_mean + rng.standard_normal(d) if d else np.zeros(0)
        for j in range(spec.utts_per_speaker):
            utt_id = f"{spk}_u{j:03d}"
            latent = speaker_latent
            if d and spec.within_noise > 0:
                latent = speaker_latent + spec.within_noise * rng.standard_normal(d)
            n_frames = int(rng.integers(spec.frames_range[0], spec.frames_range[1] + 1))
            comp = rng.choice(c, p=model.ubm_weights, size=n_frames)
            if model.formulation == AUGMENTED:
                mu = np.einsum("tfd,d->tf", model.T[comp], latent)
            else:
                mu = model.bias[comp]
                if d:
                    mu = mu + np.einsum("tfd,d->tf", model.T[comp], latent)
            noise = rng.standard_normal((n_frames, f))
            x = mu + np.einsum("tij,tj->ti", chols[comp], noise)
            ids.append(utt_id)
            features[utt_id] = x.astype(np.float32)
            speakers[utt_id] = spk
    return SynthCorpus(ids=ids, features=features, speakers=speakers, model=model)


def subspace_angles(T_ref, T_other):
    """Principal angles (degrees) between the column spans of two stacked T tensors.

    Both tensors are stacked to (C*F, D) supervector-space matrices and
    compared via orthonormalization and singular values, so any invertible
    right-multiplication of either leaves the angles unchanged.
    """
    T_ref = np.asarray(T_ref, dtype=np.float64)
    T_other = np.asarray(T_other, dtype=np.float64)
    if T_ref.shape != T_other.shape:
        raise ValueError("tensors must share (C, F, D) shape")
    c, f, d = T_ref.shape
    a = T_ref.reshape(c * f, d)
    b = T_other.reshape(c * f, d)
    if np.linalg.matrix_rank(a) < d or np.linalg.matrix_rank(b) < d:
        raise ValueError("rank-deficient subspace")
    return np.degrees(scipy.linalg.subspace_angles(a, b))


def make_trials(speakers, seed=0, enrol_frac=0.5):
    """Build a balanced trial list from utterance -> speaker labels.

    Each speaker's utterances are split into enrol/test halves; every
    enrol-test pair of the same speaker becomes a target trial and an equal
    number of cross-speaker pairs is sampled as nontargets.
    """
    rng = np.random.default_rng(seed)
    by_speaker = {}
    for utt_id in sorted(speakers):
        by_speaker.setdefault(speakers[utt_id], []).append(utt_id)

    enrol, test = {}, {}
    for spk, utts in sorted(by_speaker.items()):
        cut = max(1, int(round(len(utts) * enrol_frac)))
        cut = min(cut, len(utts) - 1) if len(utts) > 1 else 1
        enrol[spk] = utts[:cut]
        test[spk] = utts[cut:] if len(utts) > 1 else utts

    enrol_ids, test_ids, flags = [], [], []
    for spk in sorted(by_speaker):
        for e in enrol[spk]:
            for t in test[spk]:
                enrol_ids.append(e)
                test_ids.append(t)
                flags.append(True)
    n_target = len(enrol_ids)

    spk_list = sorted(by_speaker)
    if len(spk_list) < 2:
        raise ValueError("nontarget trials need at least two speakers")
    n_non = 0
    seen = set()
    while n_non < n_target:
        se, st = rng.choice(len(spk_list), size=2, replace=False)
        e = enrol[spk_list[se]][int(rng.integers(len(enrol[spk_list[se]])))]
        t = test[spk_list[st]][int(rng.integers(len(test[spk_list[st]])))]
        if (e, t) in seen and len(seen) < n_target * 20:
            continue
        seen.add((e, t))
        enrol_ids.append(e)
        test_ids.append(t)
        flags.append(False)
        n_non += 1
    return TrialList(enrol_ids, test_ids, np.asarray(flags, dtype=bool))
