"""Training orchestration: the per-iteration loop, parallel dataflow,
checkpointing, and multi-seed ensemble runs.

Each training iteration (1) aligns frames and accumulates Baum-Welch
statistics against the current background model, recomputing statistics
from features every time, (2) runs the E-step, (3) updates the projection
matrices and optionally the residual covariances, (4) optionally applies
minimum-divergence re-estimation, and (5) on the realignment schedule
(never on the last iteration) refreshes the background means from the
learned bias terms, which invalidates the cached alignments.

Feature loading, alignment and statistics accumulation run on a pool of
loader threads feeding a bounded queue; a single consumer folds partial
accumulators, in batch order when determinism is requested.
"""

from __future__ import annotations

import hashlib
import logging
import os
import queue
import threading
import time
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import backend as backend_mod
from .gmm import GmmDiag, GmmFull, accumulate_bw_stats, align_frames
from .io_formats import load_model, read_alignment, read_matrix, save_model, write_alignment, write_matrix
from .tvm import (
    AUGMENTED,
    DEFAULT_PRIOR_OFFSET,
    PosteriorWorkspace,
    STANDARD,
    apply_min_div,
    compute_min_div,
    em_accumulate,
    extract_ivector,
    init_model,
    update_mean_standard,
    update_sigma,
    update_T,
    update_ubm_means_augmented,
)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A training or extraction run could not complete."""


# ---------------------------------------------------------------------------
# feature stores


class DirectoryFeatureStore:
    """Features as one ``<utterance id>.fmx`` matrix file per utterance."""

    def __init__(self, root):
        self.root = root
        self._ids = sorted(
            name[:-4] for name in os.listdir(root) if name.endswith(".fmx")
        )
        if not self._ids:
            raise PipelineError(f"no .fmx feature files under {root}")

    def ids(self):
        return list(self._ids)

    def load(self, utt_id):
        path = os.path.join(self.root, f"{utt_id}.fmx")
        if not os.path.exists(path):
            raise KeyError(f"missing features for utterance {utt_id!r}")
        return read_matrix(path)


class InMemoryFeatureStore:
    """Features from a {utterance id: (T, F) array} mapping."""

    def __init__(self, mapping):
        self._mapping = dict(mapping)

    def ids(self):
        return sorted(self._mapping)

    def load(self, utt_id):
        try:
            return self._mapping[utt_id]
        except KeyError:
            raise KeyError(f"missing features for utterance {utt_id!r}") from None


# ---------------------------------------------------------------------------
# configuration


_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


@dataclass
class TrainConfig:
    """Knobs of one extractor training run (flat key = value config file)."""

    formulation: str = AUGMENTED
    latent_dim: int = 400
    iterations: int = 22
    min_div: bool = True
    sigma_update: bool = True
    update_mean: bool = False
    realign_interval: int = 0
    top_k: int = 20
    prune: float = 0.025
    prior_offset: float = DEFAULT_PRIOR_OFFSET
    seeds: tuple = (0, 1, 2, 3, 4)
    batch_size_utts: int = 8
    workers: int = 1
    deterministic: bool = True

    def validate(self):
        if self.formulation not in (STANDARD, AUGMENTED):
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.realign_interval < 0:
            raise ValueError("realign_interval must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.latent_dim < 1 or (self.formulation == AUGMENTED and self.latent_dim < 2):
            raise ValueError("latent_dim too small for the formulation")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 <= self.prune < 1.0:
            raise ValueError("prune must be in [0, 1)")
        if self.batch_size_utts < 1 or self.workers < 1:
            raise ValueError("batch_size_utts and workers must be >= 1")
        if self.update_mean and self.formulation != STANDARD:
            raise ValueError("update_mean applies to the standard formulation only")
        if self.update_mean and not self.min_div:
            raise ValueError("update_mean requires min_div")
        if self.update_mean and self.sigma_update:
            warnings.warn(
                "bias updates combined with residual covariance updates are "
                "known to train poorly",
                RuntimeWarning,
            )

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seeds":
                value = ",".join(str(s) for s in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_text(cls, text):
        known = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kwargs[key] = _parse_config_value(known[key], value, key)
        return cls(**kwargs)

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed):
        return replace(self, seeds=(seed,))


def _parse_config_value(field_type, value, key):
    if field_type is tuple:
        return tuple(int(part) for part in value.split(",") if part.strip())
    if field_type is bool:
        lowered = value.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if field_type is float:
        return float(value)
    if field_type is int:
        return int(value)
    return value


# ---------------------------------------------------------------------------
# run metrics


@dataclass
class IterationRecord:
    seed: int
    iteration: int
    aux: float
    eer: float = float("nan")
    wall_seconds: float = 0.0


@dataclass
class RunMetrics:
    """Per-iteration records across seeds plus the seed-averaged series."""

    records: list = field(default_factory=list)
    complete: bool = True

    def seeds(self):
        return sorted({r.seed for r in self.records})

    def series(self, seed):
        return sorted((r for r in self.records if r.seed == seed),
                      key=lambda r: r.iteration)

    def averaged(self):
        """Arithmetic mean of aux/eer/wall over seeds, per iteration.

        Drops the EER average for iterations where any seed lacks one.
        """
        by_iter = {}
        for r in self.records:
            by_iter.setdefault(r.iteration, []).append(r)
        out = []
        for iteration in sorted(by_iter):
            rows = by_iter[iteration]
            eers = [r.eer for r in rows]
            eer = float(np.mean(eers)) if not any(np.isnan(e) for e in eers) else float("nan")
            out.append(IterationRecord(
                seed=-1,
                iteration=iteration,
                aux=float(np.mean([r.aux for r in rows])),
                eer=eer,
                wall_seconds=float(np.mean([r.wall_seconds for r in rows])),
            ))
        return out

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("seed,iteration,aux,eer,wall_seconds\n")
            for seed in self.seeds():
                for r in self.series(seed):
                    fh.write(f"{seed},{r.iteration},{r.aux!r},{r.eer!r},{r.wall_seconds!r}\n")
            for r in self.averaged():
                fh.write(f"avg,{r.iteration},{r.aux!r},{r.eer!r},{r.wall_seconds!r}\n")


# ---------------------------------------------------------------------------
# bounded-queue parallel map over utterance batches


def _make_batches(ids, batch_size):
    return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]


def _map_batches(batches, fn, workers, deterministic):
    """Yield (index, fn(batch)); parallel workers feed a bounded queue.

    With ``deterministic`` the results come out in batch order; otherwise
    in completion order. The queue bound keeps at most O(workers) batches
    in flight.
    """
    n = len(batches)
    if workers <= 1 or n <= 1:
        for i in range(n):
            yield i, fn(batches[i])
        return

    out_q = queue.Queue(maxsize=2 * workers)
    index_iter = iter(range(n))
    index_lock = threading.Lock()
    stop = threading.Event()

    def producer():
        try:
            while not stop.is_set():
                with index_lock:
                    i = next(index_iter, None)
                if i is None:
                    break
                out_q.put((i, fn(batches[i]), None))
        except Exception as exc:  # propagated by the consumer
            out_q.put((-1, None, exc))
        finally:
            out_q.put((-1, None, _DONE))

    threads = [threading.Thread(target=producer, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()

    finished = 0
    pending = {}
    expect = 0
    error = None
    try:
        while finished < len(threads):
            i, payload, exc = out_q.get()
            if exc is _DONE:
                finished += 1
                continue
            if exc is not None:
                if error is None:
                    error = exc
                stop.set()
                continue
            if error is not None:
                continue
            if deterministic:
                pending[i] = payload
                while expect in pending:
                    yield expect, pending.pop(expect)
                    expect += 1
            else:
                yield i, payload
    finally:
        stop.set()
        while any(t.is_alive() for t in threads):
            try:
                out_q.get(timeout=0.05)
            except queue.Empty:
                pass
        for t in threads:
            t.join()
    if error is not None:
        raise PipelineError("a loader worker failed") from error
    for i in sorted(pending):
        yield i, pending.pop(i)


class _DoneSentinel:
    pass


_DONE = _DoneSentinel()


# ---------------------------------------------------------------------------
# corpus-level operations


def align_corpus(store, ubm_diag, ubm_full, top_k=20, prune=0.025,
                 workers=1, batch_size=8, ids=None):
    """Align every utterance of a store; returns {utterance id: SparseAlignment}."""
    if ids is None:
        ids = store.ids()

    def worker(batch):
        out = []
        for utt_id in batch:
            feats = np.asarray(store.load(utt_id), dtype=np.float64)
            out.append((utt_id, align_frames(ubm_diag, ubm_full, feats,
                                             top_k=top_k, prune=prune)))
        return out

    alignments = {}
    batches = _make_batches(ids, batch_size)
    for _, chunk in _map_batches(batches, worker, workers, deterministic=False):
        alignments.update(chunk)
    return alignments


def accumulate_corpus(model, store, alignments, config, ids=None, workspace=None):
    """Full-corpus E-step: statistics are recomputed from features, never cached.

    Returns the merged accumulators; merging is ordered by batch index in
    deterministic mode.
    """
    if ids is None:
        ids = store.ids()
    if workspace is None:
        workspace = PosteriorWorkspace(model)
    center_with = model.bias if model.formulation == STANDARD else None
    n_components = model.n_components

    def worker(batch):
        stats = []
        for utt_id in batch:
            feats = np.asarray(store.load(utt_id), dtype=np.float64)
            stats.append(accumulate_bw_stats(feats, alignments[utt_id],
                                             n_components, center_with=center_with))
        return em_accumulate(model, stats, workspace)

    total = None
    batches = _make_batches(ids, config.batch_size_utts)
    for _, acc in _map_batches(batches, worker, config.workers, config.deterministic):
        if total is None:
            total = acc
        else:
            total.merge(acc)
    if total is None:
        raise PipelineError("empty corpus")
    return total


def extract_corpus(model, store, top_k=20, prune=0.025, workers=1,
                   batch_size=8, ids=None, out_path=None):
    """Extract one embedding per utterance using the model's embedded
    background model for alignment.

    Returns (ids, (U, D) matrix); optionally writes the matrix file plus an
    ``.ids`` sidecar when ``out_path`` is given.
    """
    if ids is None:
        ids = store.ids()
    ubm_diag = model.alignment_ubm_diag()
    ubm_full = model.alignment_ubm_full()
    workspace = PosteriorWorkspace(model)
    center_with = model.bias if model.formulation == STANDARD else None
    n_components = model.n_components

    def worker(batch):
        rows = []
        for utt_id in batch:
            feats = np.asarray(store.load(utt_id), dtype=np.float64)
            alignment = align_frames(ubm_diag, ubm_full, feats,
                                     top_k=top_k, prune=prune)
            stats = accumulate_bw_stats(feats, alignment, n_components,
                                        center_with=center_with)
            rows.append(extract_ivector(model, stats, workspace))
        return rows

    embeddings = np.empty((len(ids), model.latent_dim))
    batches = _make_batches(list(range(len(ids))), batch_size)

    def indexed_worker(batch_indices):
        rows = worker([ids[i] for i in batch_indices])
        return batch_indices, rows

    for _, (batch_indices, rows) in _map_batches(
        batches, indexed_worker, workers, deterministic=False
    ):
        for i, row in zip(batch_indices, rows):
            embeddings[i] = row
    if out_path is not None:
        save_embeddings(out_path, ids, embeddings)
    return list(ids), embeddings


def save_embeddings(path, ids, embeddings):
    """Embedding store: f64 matrix file plus a ``<path>.ids`` text sidecar."""
    write_matrix(embeddings, "f64", path)
    with open(path + ".ids", "w", encoding="utf-8") as fh:
        fh.writelines(f"{utt_id}\n" for utt_id in ids)


def load_embeddings(path):
    embeddings = read_matrix(path)
    with open(path + ".ids", encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if len(ids) != embeddings.shape[0]:
        raise PipelineError("embedding ids do not match matrix rows")
    return ids, embeddings


# ---------------------------------------------------------------------------
# checkpointing

_STATE_FILE = "state.txt"
_ALIGN_CACHE = "alignments.aln"


def _checkpoint_model_path(ckpt_dir, iteration):
    return os.path.join(ckpt_dir, f"model_iter_{iteration:04d}.tvm")


def _save_ubm_aux(ckpt_dir, ubm_diag, ubm_full):
    write_matrix(ubm_diag.weights[None, :], "f64", os.path.join(ckpt_dir, "ubm_diag_weights.fmx"))
    write_matrix(ubm_diag.means, "f64", os.path.join(ckpt_dir, "ubm_diag_means.fmx"))
    write_matrix(ubm_diag.variances, "f64", os.path.join(ckpt_dir, "ubm_diag_vars.fmx"))
    c, f, _ = ubm_full.covariances.shape
    write_matrix(ubm_full.covariances.reshape(c * f, f), "f64",
                 os.path.join(ckpt_dir, "ubm_full_covs.fmx"))


def _load_ubm_aux(ckpt_dir, n_components):
    weights = read_matrix(os.path.join(ckpt_dir, "ubm_diag_weights.fmx"))[0]
    means = read_matrix(os.path.join(ckpt_dir, "ubm_diag_means.fmx"))
    variances = read_matrix(os.path.join(ckpt_dir, "ubm_diag_vars.fmx"))
    covs = read_matrix(os.path.join(ckpt_dir, "ubm_full_covs.fmx"))
    f = means.shape[1]
    return (GmmDiag(weights, means, variances),
            covs.reshape(n_components, f, f))


def _write_state(ckpt_dir, iteration, config_hash, seed):
    with open(os.path.join(ckpt_dir, _STATE_FILE), "w", encoding="utf-8") as fh:
        fh.write(f"iteration = {iteration}\n")
        fh.write(f"config_hash = {config_hash}\n")
        fh.write(f"seed = {seed}\n")


def _read_state(ckpt_dir):
    state = {}
    with open(os.path.join(ckpt_dir, _STATE_FILE), encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                state[key] = value
    return int(state["iteration"]), state["config_hash"], int(state["seed"])


def _realign_points(config, upto_iteration):
    if config.realign_interval <= 0:
        return []
    return [
        it
        for it in range(1, upto_iteration + 1)
        if it % config.realign_interval == 0 and it != config.iterations
    ]


# ---------------------------------------------------------------------------
# training loop


def train_extractor(config, store, ubm_diag, ubm_full, seed=None,
                    checkpoint_dir=None, resume=False, iteration_hook=None):
    """Train one extractor; returns (model, RunMetrics for this seed).

    ``iteration_hook(model, iteration)`` may return an EER to record. With
    a checkpoint directory every iteration persists the model and a state
    file, and ``resume=True`` continues a matching interrupted run; the
    resumed run reproduces the uninterrupted one bit-exactly in
    deterministic mode.
    """
    config.validate()
    if seed is None:
        seed = config.seeds[0]
    ids = store.ids()
    if not ids:
        raise PipelineError("empty corpus")
    if ubm_diag.n_components != ubm_full.n_components or ubm_diag.dim != ubm_full.dim:
        raise PipelineError("diagonal and full background models disagree")
    config_hash = config.config_hash()

    start_iteration = 1
    model = None
    align_diag = None
    align_cov = ubm_full.covariances.copy()
    if resume:
        if checkpoint_dir is None:
            raise PipelineError("resume requires a checkpoint directory")
        state_path = os.path.join(checkpoint_dir, _STATE_FILE)
        if os.path.exists(state_path):
            done_iter, saved_hash, saved_seed = _read_state(checkpoint_dir)
            if saved_hash != config_hash:
                raise PipelineError("checkpoint config hash does not match")
            if saved_seed != seed:
                raise PipelineError("checkpoint seed does not match")
            model = load_model(_checkpoint_model_path(checkpoint_dir, done_iter))
            align_diag, align_cov = _load_ubm_aux(checkpoint_dir, model.n_components)
            if _realign_points(config, done_iter):
                align_diag.means = model.ubm_means.copy()
            start_iteration = done_iter + 1
            logger.info("resuming at iteration %d", start_iteration)
    if model is None:
        model = init_model(ubm_full, config.latent_dim, config.formulation,
                           seed=seed, prior_offset=config.prior_offset)
        align_diag = ubm_diag.copy()
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            config.save(os.path.join(checkpoint_dir, "config.cfg"))
            _save_ubm_aux(checkpoint_dir, ubm_diag, ubm_full)
            stale_cache = os.path.join(checkpoint_dir, _ALIGN_CACHE)
            if os.path.exists(stale_cache):
                os.remove(stale_cache)

    metrics = RunMetrics()
    alignments = None
    cache_path = (
        os.path.join(checkpoint_dir, _ALIGN_CACHE) if checkpoint_dir is not None else None
    )

    for iteration in range(start_iteration, config.iterations + 1):
        t_start = time.perf_counter()

        if alignments is None:
            if cache_path is not None and os.path.exists(cache_path):
                alignments = read_alignment(cache_path)
            else:
                align_full = GmmFull(model.ubm_weights, model.ubm_means, align_cov)
                alignments = align_corpus(
                    store, align_diag, align_full,
                    top_k=config.top_k, prune=config.prune,
                    workers=config.workers, batch_size=config.batch_size_utts,
                    ids=ids,
                )
                if cache_path is not None:
                    write_alignment(cache_path, [(u, alignments[u]) for u in ids],
                                    top_k=config.top_k)

        acc = accumulate_corpus(model, store, alignments, config, ids=ids)
        aux = acc.aux

        new_T = update_T(model, acc)
        new_sigma = update_sigma(model, acc, new_T) if config.sigma_update else model.Sigma
        model.T = new_T
        model.Sigma = new_sigma

        if config.min_div:
            transforms = compute_min_div(acc, model.formulation)
            if config.update_mean and model.formulation == STANDARD:
                update_mean_standard(model, acc.h)
            apply_min_div(model, transforms, acc.h)

        if config.realign_interval > 0 and iteration % config.realign_interval == 0 \
                and iteration != config.iterations:
            if model.formulation == AUGMENTED:
                update_ubm_means_augmented(model)
            else:
                model.ubm_means = model.bias.copy()
            align_diag.means = model.ubm_means.copy()
            alignments = None
            if cache_path is not None and os.path.exists(cache_path):
                os.remove(cache_path)

        eer = float("nan")
        if iteration_hook is not None:
            hook_result = iteration_hook(model, iteration)
            if hook_result is not None:
                eer = float(hook_result)

        wall = time.perf_counter() - t_start
        metrics.records.append(IterationRecord(seed, iteration, aux, eer, wall))
        logger.info("seed %d iteration %d: aux %.6f eer %s (%.2fs)",
                    seed, iteration, aux, eer, wall)

        if checkpoint_dir is not None:
            save_model(model, _checkpoint_model_path(checkpoint_dir, iteration))
            _write_state(checkpoint_dir, iteration, config_hash, seed)

    return model, metrics


# ---------------------------------------------------------------------------
# evaluation protocol and ensembles


@dataclass
class EvalProtocol:
    """What it takes to turn a model into an EER.

    The back-end (centering chain, optional LDA, scorer) is fit on
    embeddings of ``backend_store`` with ``backend_labels``; trials pair
    utterances of ``eval_store``.
    """

    eval_store: object
    backend_store: object
    backend_labels: dict
    trials: object  # TrialList
    scoring: str = "cosine"  # or "plda"
    lda_dim: int | None = None
    plda_iters: int = 10

    def validate(self):
        if self.scoring not in ("cosine", "plda"):
            raise ValueError(f"unknown scoring {self.scoring!r}")


def evaluate_model(model, protocol, config):
    """Extract, post-process, score the protocol's trials; returns EER percent.

    The whitening stage is enabled exactly when the extractor trained
    without minimum-divergence re-estimation.
    """
    protocol.validate()
    kwargs = dict(top_k=config.top_k, prune=config.prune,
                  workers=config.workers, batch_size=config.batch_size_utts)
    train_ids, train_emb = extract_corpus(model, protocol.backend_store, **kwargs)
    chain = backend_mod.fit_chain(train_emb, whiten=not config.min_div)
    train_proc = chain.transform(train_emb)

    eval_ids, eval_emb = extract_corpus(model, protocol.eval_store, **kwargs)
    eval_proc = chain.transform(eval_emb)

    labels = [protocol.backend_labels[utt_id] for utt_id in train_ids]
    if protocol.lda_dim is not None:
        lda = backend_mod.fit_lda(train_proc, labels, protocol.lda_dim)
        train_proc = lda.transform(train_proc)
        eval_proc = lda.transform(eval_proc)

    row_of = {utt_id: i for i, utt_id in enumerate(eval_ids)}
    try:
        enrol_rows = [row_of[utt_id] for utt_id in protocol.trials.enrol_ids]
        test_rows = [row_of[utt_id] for utt_id in protocol.trials.test_ids]
    except KeyError as exc:
        raise PipelineError(f"trial id {exc} missing from the embedding store") from exc
    enrol = eval_proc[enrol_rows]
    test = eval_proc[test_rows]

    if protocol.scoring == "plda":
        plda = backend_mod.fit_plda(train_proc, labels, n_iters=protocol.plda_iters)
        scores = backend_mod.score_plda_trials(plda, enrol, test)
    else:
        scores = np.sum(enrol * test, axis=1) / (
            np.linalg.norm(enrol, axis=1) * np.linalg.norm(test, axis=1)
        )
    eer, _ = backend_mod.compute_eer(scores, protocol.trials.is_target)
    return eer


def ensemble_run(config, store, ubm_diag, ubm_full, protocol,
                 csv_path=None, checkpoint_root=None):
    """Train one extractor per seed, scoring every iteration via the back-end.

    Returns RunMetrics over all seeds (averaged block included in the CSV).
    A failed seed marks the ensemble incomplete; the partial CSV is still
    written.
    """
    config.validate()
    metrics = RunMetrics()
    for seed in config.seeds:
        ckpt = (
            os.path.join(checkpoint_root, f"seed_{seed}")
            if checkpoint_root is not None else None
        )
        hook = (
            (lambda model, iteration: evaluate_model(model, protocol, config))
            if protocol is not None else None
        )
        try:
            _, seed_metrics = train_extractor(
                config, store, ubm_diag, ubm_full, seed=seed,
                checkpoint_dir=ckpt, iteration_hook=hook,
            )
        except Exception:
            logger.exception("seed %d failed; ensemble marked incomplete", seed)
            metrics.complete = False
            continue
        metrics.records.extend(seed_metrics.records)
    if csv_path is not None:
        metrics.write_csv(csv_path)
    return metrics
