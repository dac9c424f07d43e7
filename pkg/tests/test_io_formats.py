"""Container round trips and malformed-input rejection."""

import numpy as np
import pytest

from tvkit.gmm import SparseAlignment
from tvkit.io_formats import (
    AlignmentReader,
    FormatError,
    TrialList,
    load_model,
    read_alignment,
    read_matrix,
    read_scores,
    read_trials,
    save_model,
    write_alignment,
    write_matrix,
    write_scores,
    write_trials,
)
from tvkit.tvm import AUGMENTED, STANDARD, init_model
from tvkit.gmm import GmmFull


def _random_full_ubm(rng, c, f):
    weights = rng.dirichlet(np.full(c, 5.0))
    means = rng.normal(0, 3, (c, f))
    covs = np.zeros((c, f, f))
    for i in range(c):
        a = rng.normal(0, 1, (f, 2 * f))
        covs[i] = a @ a.T / (2 * f) + 0.5 * np.eye(f)
    return GmmFull(weights, means, covs)


class TestMatrixFile:
    def test_identity_f64_header_and_payload(self, tmp_path):
        path = tmp_path / "eye.fmx"
        write_matrix(np.eye(2), "f64", path)
        raw = path.read_bytes()
        assert raw[:4] == b"FMX1"
        assert raw[4] == 1  # f64 code
        assert int.from_bytes(raw[5:13], "little") == 2
        assert int.from_bytes(raw[13:21], "little") == 2
        # payload length = rows * cols * dtype size
        assert len(raw) - 21 == 2 * 2 * 8
        np.testing.assert_array_equal(read_matrix(path), np.eye(2))

    def test_72_column_feature_matrix(self, tmp_path):
        path = tmp_path / "mfcc.fmx"
        write_matrix(np.zeros((5, 72), dtype=np.float32), "f32", path)
        raw = path.read_bytes()
        assert int.from_bytes(raw[13:21], "little") == 72

    def test_f32_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        m = rng.normal(0, 1, (5, 3)).astype(np.float32)
        p1, p2 = tmp_path / "a.fmx", tmp_path / "b.fmx"
        write_matrix(m, "f32", p1)
        back = read_matrix(p1)
        assert back.dtype == np.float32
        assert m.tobytes() == back.tobytes()
        write_matrix(back, "f32", p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_f64_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        m = rng.normal(0, 1, (7, 4))
        path = tmp_path / "m.fmx"
        write_matrix(m, "f64", path)
        assert read_matrix(path).tobytes() == m.tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "t.fmx"
        write_matrix(np.eye(3), "f64", path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated|exceeds remaining"):
            read_matrix(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.fmx"
        write_matrix(np.eye(2), "f64", path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_matrix(path)

    def test_unknown_dtype_code_rejected(self, tmp_path):
        path = tmp_path / "d.fmx"
        write_matrix(np.eye(2), "f64", path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="dtype"):
            read_matrix(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.fmx"
        write_matrix(np.eye(2), "f64", path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_matrix(path)

    def test_empty_matrix_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_matrix(np.zeros((0, 3)), "f64", tmp_path / "e.fmx")

    def test_absurd_declared_dims_rejected_cheaply(self, tmp_path):
        # a tampered header must fail the size check, not attempt a huge read
        path = tmp_path / "h.fmx"
        write_matrix(np.eye(2), "f64", path)
        raw = bytearray(path.read_bytes())
        raw[5:13] = (2**60).to_bytes(8, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="exceeds remaining"):
            read_matrix(path)

    def test_unknown_dtype_name_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_matrix(np.eye(2), "f16", tmp_path / "e.fmx")


class TestAlignmentFile:
    def test_round_trip_single_frame(self, tmp_path):
        alignment = SparseAlignment.from_frames(
            [(np.array([3, 7]), np.array([0.6, 0.4], dtype=np.float32))]
        )
        path = tmp_path / "a.aln"
        write_alignment(path, {"utt1": alignment}, top_k=20)
        back = read_alignment(path)["utt1"]
        np.testing.assert_array_equal(back.components, alignment.components)
        assert back.weights.tobytes() == alignment.weights.tobytes()
        np.testing.assert_array_equal(back.offsets, alignment.offsets)

    def test_frame_at_top_k_budget_accepted(self, tmp_path):
        k = 20
        weights = np.full(k, 1.0 / k, dtype=np.float32)
        alignment = SparseAlignment.from_frames([(np.arange(k), weights)])
        path = tmp_path / "k.aln"
        write_alignment(path, {"u": alignment}, top_k=k)
        assert read_alignment(path)["u"].entry_counts()[0] == k

    def test_over_budget_rejected(self, tmp_path):
        weights = np.full(5, 0.2, dtype=np.float32)
        alignment = SparseAlignment.from_frames([(np.arange(5), weights)])
        with pytest.raises(ValueError, match="top-K"):
            write_alignment(tmp_path / "o.aln", {"u": alignment}, top_k=4)

    def test_bad_weight_sum_rejected_on_write(self, tmp_path):
        alignment = SparseAlignment.from_frames(
            [(np.array([0, 1]), np.array([0.5, 0.4], dtype=np.float32))]
        )
        with pytest.raises(ValueError, match="sum"):
            write_alignment(tmp_path / "b.aln", {"u": alignment}, top_k=4)

    def test_multi_utterance_random_access(self, tmp_path):
        rng = np.random.default_rng(3)
        alignments = {}
        for i in range(5):
            frames = []
            for _ in range(int(rng.integers(1, 6))):
                n = int(rng.integers(1, 4))
                comps = rng.choice(32, size=n, replace=False)
                w = rng.random(n) + 0.1
                w = (w / w.sum()).astype(np.float32)
                frames.append((np.sort(comps), w))
            alignments[f"utt{i:02d}"] = SparseAlignment.from_frames(frames)
        path = tmp_path / "c.aln"
        write_alignment(path, alignments, top_k=4)
        with AlignmentReader(path) as reader:
            assert reader.ids() == sorted(alignments)
            assert reader.top_k == 4
            back = reader.read("utt03")
        ref = alignments["utt03"]
        assert back.weights.tobytes() == ref.weights.tobytes()
        np.testing.assert_array_equal(back.components, ref.components)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.aln"
        alignment = SparseAlignment.from_frames(
            [(np.array([0]), np.array([1.0], dtype=np.float32))]
        )
        write_alignment(path, {"u": alignment}, top_k=4)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_alignment(path)

    def test_truncated_index_rejected(self, tmp_path):
        path = tmp_path / "t.aln"
        alignment = SparseAlignment.from_frames(
            [(np.array([0, 1]), np.array([0.5, 0.5], dtype=np.float32))]
        )
        write_alignment(path, {"u": alignment}, top_k=4)
        path.write_bytes(path.read_bytes()[:-6])
        with pytest.raises(FormatError, match="truncated"):
            read_alignment(path)

    def test_record_shorter_than_declared_rejected(self, tmp_path):
        path = tmp_path / "s.aln"
        alignment = SparseAlignment.from_frames(
            [(np.array([0, 1]), np.array([0.5, 0.5], dtype=np.float32))]
        )
        write_alignment(path, {"u": alignment}, top_k=4)
        raw = bytearray(path.read_bytes())
        # the per-frame entry count sits right after the header, the id
        # record, and the 8-byte frame count; bump 2 -> 3
        count_pos = 24 + 4 + 1 + 8
        assert raw[count_pos] == 2
        raw[count_pos] = 3
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="shorter than declared"):
            read_alignment(path)

    def test_empty_utterance_round_trip(self, tmp_path):
        alignment = SparseAlignment.from_frames([])
        path = tmp_path / "e.aln"
        write_alignment(path, {"empty": alignment}, top_k=4)
        back = read_alignment(path)["empty"]
        assert back.n_frames == 0

    def test_non_ascii_utterance_id(self, tmp_path):
        alignment = SparseAlignment.from_frames(
            [(np.array([1]), np.array([1.0], dtype=np.float32))]
        )
        utt_id = "sprecher_äöü_01"
        path = tmp_path / "u.aln"
        write_alignment(path, {utt_id: alignment}, top_k=4)
        with AlignmentReader(path) as reader:
            assert reader.ids() == [utt_id]
            assert reader.read(utt_id).n_frames == 1


class TestModelFile:
    def test_augmented_header_prior_offset(self, tmp_path):
        rng = np.random.default_rng(5)
        ubm = _random_full_ubm(rng, 2, 2)
        model = init_model(ubm, 2, AUGMENTED, seed=0, prior_offset=100.0)
        path = tmp_path / "m.tvm"
        save_model(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"TVM1"
        assert raw[4] == 1
        assert np.frombuffer(raw[29:37], dtype="<f8")[0] == 100.0
        back = load_model(path)
        assert back.formulation == AUGMENTED
        assert back.prior_offset == 100.0
        assert back.bias is None

    def test_standard_has_bias_and_zero_offset(self, tmp_path):
        rng = np.random.default_rng(6)
        ubm = _random_full_ubm(rng, 3, 2)
        model = init_model(ubm, 2, STANDARD, seed=0)
        path = tmp_path / "s.tvm"
        save_model(model, path)
        back = load_model(path)
        assert back.prior_offset == 0.0
        assert back.bias is not None
        np.testing.assert_array_equal(back.bias, model.bias)

    def test_save_load_save_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(7)
        ubm = _random_full_ubm(rng, 2, 3)
        model = init_model(ubm, 3, AUGMENTED, seed=1)
        p1, p2 = tmp_path / "a.tvm", tmp_path / "b.tvm"
        save_model(model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_all_tensors_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        ubm = _random_full_ubm(rng, 2, 3)
        model = init_model(ubm, 2, STANDARD, seed=2)
        path = tmp_path / "m.tvm"
        save_model(model, path)
        back = load_model(path)
        for a, b in [
            (model.T, back.T),
            (model.Sigma, back.Sigma),
            (model.ubm_weights, back.ubm_weights),
            (model.ubm_means, back.ubm_means),
            (model.bias, back.bias),
        ]:
            assert a.tobytes() == b.tobytes()

    def test_truncated_model_rejected(self, tmp_path):
        rng = np.random.default_rng(9)
        ubm = _random_full_ubm(rng, 2, 2)
        model = init_model(ubm, 2, AUGMENTED, seed=0)
        path = tmp_path / "m.tvm"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError, match="truncated|exceeds remaining"):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.tvm"
        path.write_bytes(b"XYZ1" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_absurd_declared_dims_rejected_cheaply(self, tmp_path):
        rng = np.random.default_rng(10)
        ubm = _random_full_ubm(rng, 2, 2)
        model = init_model(ubm, 2, AUGMENTED, seed=0)
        path = tmp_path / "m.tvm"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[5:13] = (2**59).to_bytes(8, "little")  # C field
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="exceeds remaining"):
            load_model(path)


class TestTrialsAndScores:
    def test_trials_round_trip(self, tmp_path):
        trials = TrialList(
            ["e1", "e2"], ["t1", "t2"], np.array([True, False])
        )
        path = tmp_path / "trials.txt"
        write_trials(path, trials)
        assert path.read_text().splitlines() == [
            "e1 t1 target",
            "e2 t2 nontarget",
        ]
        back = read_trials(path)
        assert back.enrol_ids == trials.enrol_ids
        assert back.test_ids == trials.test_ids
        np.testing.assert_array_equal(back.is_target, trials.is_target)

    def test_unknown_label_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a b maybe\n")
        with pytest.raises(FormatError, match="label"):
            read_trials(path)

    def test_scores_round_trip(self, tmp_path):
        path = tmp_path / "scores.txt"
        write_scores(path, ["a"], ["b"], [1.2345678901234567])
        enrol, test, scores = read_scores(path)
        assert enrol == ["a"] and test == ["b"]
        assert scores[0] == 1.2345678901234567
