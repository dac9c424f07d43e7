"""Bit-exact binary and text containers.

Four formats, all little-endian IEEE-754:

* matrix files (magic ``FMX1``): dtype byte (0 = f32, 1 = f64), u64 rows,
  u64 cols, row-major payload;
* alignment files (``ALN1``): one file per corpus holding sparse per-frame
  posterior records plus a trailing index of utterance offsets;
* model files (``TVM1``): extractor header and f64 parameter tensors in a
  fixed order;
* trial lists: UTF-8 text lines ``enrol_id test_id label``.

Bulk per-frame data (features, alignment weights) is stored in f32, model
parameters and statistics in f64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .gmm import SparseAlignment
from .tvm import AUGMENTED, STANDARD, TvModel

MATRIX_MAGIC = b"FMX1"
ALIGNMENT_MAGIC = b"ALN1"
MODEL_MAGIC = b"TVM1"

_DTYPE_CODES = {"f32": 0, "f64": 1}
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not conform to its declared container layout."""


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _check_declared_size(fh, needed, what):
    """Reject declared payload sizes beyond the file's actual length before
    attempting to allocate them."""
    pos = fh.tell()
    remaining = os.fstat(fh.fileno()).st_size - pos
    if needed > remaining:
        raise FormatError(
            f"declared {what} size {needed} exceeds remaining {remaining} bytes"
        )


# ---------------------------------------------------------------------------
# matrix files


def write_matrix(matrix, dtype, path):
    """Write a 2-D array as a matrix file.

    ``dtype`` is "f32" or "f64" and fixes the stored precision.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    rows, cols = matrix.shape
    if rows < 1 or cols < 1:
        raise ValueError("matrix must have at least one row and column")
    try:
        code = _DTYPE_CODES[dtype]
    except KeyError:
        raise ValueError(f"unknown dtype {dtype!r}, expected 'f32' or 'f64'") from None
    payload = np.ascontiguousarray(matrix, dtype=_DTYPE_BY_CODE[code])
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<BQQ", code, rows, cols))
        fh.write(payload.tobytes())


def read_matrix(path):
    """Read a matrix file back as an ndarray of its stored dtype."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MATRIX_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
        code, rows, cols = struct.unpack("<BQQ", _read_exact(fh, 17, "header"))
        if code not in _DTYPE_BY_CODE:
            raise FormatError(f"unknown dtype code {code}")
        dt = _DTYPE_BY_CODE[code]
        _check_declared_size(fh, rows * cols * dt.itemsize, "matrix payload")
        payload = _read_exact(fh, rows * cols * dt.itemsize, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after matrix payload")
    return np.frombuffer(payload, dtype=dt).reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# alignment files


def write_alignment(path, alignments, top_k):
    """Write per-utterance sparse alignments to one corpus file.

    Args:
      path: output file.
      alignments: mapping utterance id -> SparseAlignment, or an iterable
        of (id, SparseAlignment) pairs; written in the given order.
      top_k: per-frame entry budget recorded in the header; every frame
        must respect it.
    """
    if hasattr(alignments, "items"):
        items = list(alignments.items())
    else:
        items = list(alignments)
    offsets = []
    with open(path, "wb") as fh:
        fh.write(ALIGNMENT_MAGIC)
        fh.write(struct.pack("<IQQ", top_k, len(items), 0))
        for utt_id, alignment in items:
            alignment.validate(top_k=top_k)
            offsets.append((utt_id, fh.tell()))
            encoded = utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", alignment.n_frames))
            counts = alignment.entry_counts().astype("<u4")
            comps = alignment.components.astype("<u4")
            weights = alignment.weights.astype("<f4")
            pos = 0
            for count in counts:
                fh.write(struct.pack("<I", int(count)))
                chunk = np.empty(2 * count, dtype="<u4")
                chunk[0::2] = comps[pos:pos + count]
                chunk[1::2] = weights[pos:pos + count].view("<u4")
                fh.write(chunk.tobytes())
                pos += count
        index_offset = fh.tell()
        for utt_id, record_offset in offsets:
            encoded = utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", record_offset))
        fh.seek(4 + 4 + 8)
        fh.write(struct.pack("<Q", index_offset))


class AlignmentReader:
    """Random access to a corpus alignment file through its index.

    Each reader owns one file handle; concurrent readers of the same file
    need one instance per thread.
    """

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        try:
            magic = _read_exact(self._fh, 4, "magic")
            if magic != ALIGNMENT_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {ALIGNMENT_MAGIC!r}")
            self.top_k, n_utts, index_offset = struct.unpack(
                "<IQQ", _read_exact(self._fh, 20, "header")
            )
            if index_offset > os.fstat(self._fh.fileno()).st_size:
                raise FormatError("index offset beyond end of file")
            self._index_offset = index_offset
            self._fh.seek(index_offset)
            self._index = {}
            self._order = []
            for _ in range(n_utts):
                (id_len,) = struct.unpack("<I", _read_exact(self._fh, 4, "index"))
                _check_declared_size(self._fh, id_len, "index id")
                utt_id = _read_exact(self._fh, id_len, "index id").decode("utf-8")
                (offset,) = struct.unpack("<Q", _read_exact(self._fh, 8, "index offset"))
                self._index[utt_id] = offset
                self._order.append(utt_id)
        except Exception:
            self._fh.close()
            raise

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._fh.close()

    def ids(self):
        return list(self._order)

    def read(self, utt_id):
        try:
            offset = self._index[utt_id]
        except KeyError:
            raise KeyError(f"utterance {utt_id!r} not in alignment file") from None
        fh = self._fh
        fh.seek(offset)

        def bounded_read(count, what):
            if fh.tell() + count > self._index_offset:
                raise FormatError(f"frame record shorter than declared ({what})")
            return _read_exact(fh, count, what)

        (id_len,) = struct.unpack("<I", bounded_read(4, "utterance id"))
        stored = bounded_read(id_len, "utterance id").decode("utf-8")
        if stored != utt_id:
            raise FormatError("alignment index does not match record")
        (n_frames,) = struct.unpack("<Q", bounded_read(8, "frame count"))
        counts = np.empty(n_frames, dtype=np.int64)
        comps = []
        weights = []
        for t in range(n_frames):
            (count,) = struct.unpack("<I", bounded_read(4, "entry count"))
            counts[t] = count
            raw = np.frombuffer(bounded_read(8 * count, "frame entries"), dtype="<u4")
            comps.append(raw[0::2].astype(np.int32))
            weights.append(raw[1::2].view("<f4").astype(np.float32))
        offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        components = np.concatenate(comps) if comps else np.zeros(0, np.int32)
        wts = np.concatenate(weights) if weights else np.zeros(0, np.float32)
        return SparseAlignment(offsets, components, wts)


def read_alignment(path):
    """Read a whole alignment file as {utterance id: SparseAlignment}."""
    with AlignmentReader(path) as reader:
        return {utt_id: reader.read(utt_id) for utt_id in reader.ids()}


# ---------------------------------------------------------------------------
# model files


def save_model(model, path):
    """Persist an extractor (with its embedded background model) bit-exactly."""
    model.validate()
    c, f, d = model.T.shape
    tag = 0 if model.formulation == STANDARD else 1
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<BQQQd", tag, c, f, d, model.prior_offset))
        for tensor in _model_tensors(model):
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def _model_tensors(model):
    tensors = [model.ubm_weights, model.ubm_means, model.T, model.Sigma]
    if model.formulation == STANDARD:
        tensors.append(model.bias)
    return tensors


def load_model(path):
    """Load an extractor saved by save_model."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        tag, c, f, d, prior_offset = struct.unpack(
            "<BQQQd", _read_exact(fh, 33, "header")
        )
        if tag not in (0, 1):
            raise FormatError(f"unknown formulation tag {tag}")
        formulation = STANDARD if tag == 0 else AUGMENTED

        def read_tensor(shape, what):
            count = int(np.prod(shape))
            _check_declared_size(fh, 8 * count, what)
            raw = _read_exact(fh, 8 * count, what)
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        weights = read_tensor((c,), "weights").reshape(c)
        means = read_tensor((c, f), "means")
        T = read_tensor((c, f, d), "T")
        sigma = read_tensor((c, f, f), "Sigma")
        bias = read_tensor((c, f), "bias") if formulation == STANDARD else None
        if fh.read(1):
            raise FormatError("trailing bytes after model tensors")
    model = TvModel(
        formulation=formulation,
        T=T,
        Sigma=sigma,
        ubm_weights=weights,
        ubm_means=means,
        bias=bias,
        prior_offset=prior_offset,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# trial lists and score files

TARGET = "target"
NONTARGET = "nontarget"


@dataclass
class TrialList:
    """Verification trials: enrol/test id pairs with target flags."""

    enrol_ids: list
    test_ids: list
    is_target: np.ndarray

    def __len__(self):
        return len(self.enrol_ids)

    def validate(self):
        if not (len(self.enrol_ids) == len(self.test_ids) == self.is_target.shape[0]):
            raise ValueError("trial field lengths differ")


def write_trials(path, trials):
    trials.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for enrol, test, tar in zip(trials.enrol_ids, trials.test_ids, trials.is_target):
            label = TARGET if tar else NONTARGET
            fh.write(f"{enrol} {test} {label}\n")


def read_trials(path):
    enrol_ids, test_ids, flags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'enrol test label'")
            if parts[2] not in (TARGET, NONTARGET):
                raise FormatError(f"{path}:{lineno}: unknown label {parts[2]!r}")
            enrol_ids.append(parts[0])
            test_ids.append(parts[1])
            flags.append(parts[2] == TARGET)
    return TrialList(enrol_ids, test_ids, np.asarray(flags, dtype=bool))


def write_scores(path, enrol_ids, test_ids, scores):
    with open(path, "w", encoding="utf-8") as fh:
        for enrol, test, score in zip(enrol_ids, test_ids, scores):
            fh.write(f"{enrol} {test} {float(score)!r}\n")


def read_scores(path):
    enrol_ids, test_ids, scores = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'enrol test score'")
            enrol_ids.append(parts[0])
            test_ids.append(parts[1])
            scores.append(float(parts[2]))
    return enrol_ids, test_ids, np.asarray(scores)
