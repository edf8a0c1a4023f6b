import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dense_cov, random_params
from vmfa.data import (
    SyntheticSpec,
    count_trainable_parameters,
    gen_synthetic,
    gen_synthetic_split,
    load_checkpoint,
    load_csv,
    load_dataset,
    sample_mfa,
    save_checkpoint,
    save_dataset,
    stored_scalar_count,
    synthetic_truth,
)
from vmfa.errors import BadMagic, FormatError, TruncatedFile, UnsupportedVersion
from vmfa.model import exact_log_likelihood


class TestDatasetFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        X = np.random.default_rng(0).normal(size=(10, 3)).astype(dtype)
        path = tmp_path / "x.mfad"
        save_dataset(X, path)
        ds = load_dataset(path)
        assert ds.X.dtype == dtype and ds.N == 10 and ds.D == 3
        assert ds.X.tobytes() == X.tobytes()
        save_dataset(ds, tmp_path / "y.mfad")
        assert (tmp_path / "y.mfad").read_bytes() == path.read_bytes()

    @settings(max_examples=40, deadline=None)
    @given(
        X=st.sampled_from([np.float32, np.float64]).flatmap(
            lambda dt: arrays(dt, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32))
        )
    )
    def test_round_trip_property(self, tmp_path_factory, X):
        path = tmp_path_factory.mktemp("rt") / "x.mfad"
        save_dataset(X, path)
        assert load_dataset(path).X.tobytes() == X.tobytes()

    def test_empty_file_rejected(self, tmp_path):
        save_dataset(np.zeros((0, 3), dtype=np.float32), tmp_path / "x.mfad")
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x.mfad")

    def test_header_layout(self, tmp_path):
        save_dataset(np.zeros((2, 5), dtype=np.float32), tmp_path / "x.mfad")
        raw = (tmp_path / "x.mfad").read_bytes()
        assert raw[:4] == b"MFAD"
        assert struct.unpack_from("<IQIB", raw, 4) == (1, 2, 5, 0)
        assert raw[21:28] == bytes(7)
        assert len(raw) == 28 + 2 * 5 * 4

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(BadMagic):
            load_dataset(tmp_path / "x")

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.mfad"
        save_dataset(np.ones((4, 2), dtype=np.float32), path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<Q", raw, 8, 5)
        path.write_bytes(bytes(raw))
        with pytest.raises(TruncatedFile):
            load_dataset(path)

    def test_truncated_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"MFAD\x01\x00")
        with pytest.raises(TruncatedFile):
            load_dataset(tmp_path / "x")

    def test_version(self, tmp_path):
        path = tmp_path / "x.mfad"
        save_dataset(np.ones((1, 1), dtype=np.float32), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 2
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersion):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.mfad"
        save_dataset(np.ones((1, 1), dtype=np.float32), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            load_dataset(path)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        p = random_params(rng, 4, 5, 2)
        X = rng.normal(size=(30, 5))
        save_checkpoint(p, tmp_path / "m.mfam")
        q = load_checkpoint(tmp_path / "m.mfam")
        q.validate()
        assert q.equal(p)
        assert exact_log_likelihood(q, X, counter=None) == exact_log_likelihood(p, X, counter=None)

    def test_size_matches_scalar_count(self, tmp_path):
        p = random_params(np.random.default_rng(2), 3, 4, 2)
        save_checkpoint(p, tmp_path / "m.mfam")
        assert (tmp_path / "m.mfam").stat().st_size == 20 + 8 * stored_scalar_count(3, 4, 2)

    def test_version(self, tmp_path):
        p = random_params(np.random.default_rng(3), 1, 2, 1)
        path = tmp_path / "m.mfam"
        save_checkpoint(p, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersion):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        p = random_params(np.random.default_rng(3), 2, 2, 1)
        path = tmp_path / "m.mfam"
        save_checkpoint(p, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedFile):
            load_checkpoint(path)

    def test_dataset_magic_rejected(self, tmp_path):
        save_dataset(np.ones((1, 1), dtype=np.float32), tmp_path / "x")
        with pytest.raises(BadMagic):
            load_checkpoint(tmp_path / "x")


class TestParameterCount:
    def test_large_model(self):
        n = count_trainable_parameters(500_000, 3072, 5)
        assert n == 10_752_499_999 and isinstance(n, int)
        assert n > 10**10

    def test_small_by_enumeration(self):
        p = random_params(np.random.default_rng(0), 3, 4, 2)
        stored = p.pi.size + p.mu.size + p.Lambda.size + p.Dnoise.size
        assert stored == stored_scalar_count(3, 4, 2) == count_trainable_parameters(3, 4, 2) + 1


class TestCsv:
    def test_header_detection(self, tmp_path):
        (tmp_path / "a.csv").write_text("x,y\n1,2\n3,4\n")
        (tmp_path / "b.csv").write_text("1,2\n3,4\n")
        np.testing.assert_array_equal(load_csv(tmp_path / "a.csv").X, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(load_csv(tmp_path / "b.csv").X, [[1, 2], [3, 4]])

    def test_too_large(self, tmp_path):
        (tmp_path / "a.csv").write_text("\n".join(["1,2"] * 500_001))
        with pytest.raises(FormatError):
            load_csv(tmp_path / "a.csv")

    def test_empty(self, tmp_path):
        (tmp_path / "a.csv").write_text("\n")
        with pytest.raises(FormatError):
            load_csv(tmp_path / "a.csv")


class TestSynthetic:
    def test_degenerate_limit(self):
        ds, truth, labels = gen_synthetic(
            SyntheticSpec(3, 4, 2, 50, loading_scale=0.0, noise_scale=0.0, seed=1), with_labels=True
        )
        np.testing.assert_allclose(ds.X, truth.mu[labels].astype(np.float32))

    def test_covariance_and_frequencies(self):
        spec = SyntheticSpec(3, 4, 2, 60_000, seed=2, pi=np.array([0.5, 0.3, 0.2]))
        ds, truth, labels = gen_synthetic(spec, with_labels=True)
        X = ds.X.astype(np.float64)
        counts = np.bincount(labels, minlength=3)
        for c in range(3):
            p = truth.pi[c]
            assert abs(counts[c] - spec.N * p) <= 3 * np.sqrt(spec.N * p * (1 - p))
            Xc = X[labels == c]
            S = dense_cov(truth, c)
            emp = np.cov(Xc.T, bias=True)
            assert np.abs(emp - S).max() <= 5 * np.abs(S).max() / np.sqrt(Xc.shape[0])
            np.testing.assert_allclose(Xc.mean(axis=0), truth.mu[c], atol=5 * np.sqrt(S.diagonal().max() / Xc.shape[0]))

    def test_reproducible_row_ranges(self):
        truth = synthetic_truth(SyntheticSpec(3, 2, 1, 10, seed=4))
        full, lab = sample_mfa(truth, 10_000, seed=4)
        part, plab = sample_mfa(truth, 3000, seed=4, first_row=5000)
        np.testing.assert_array_equal(part, full[5000:8000])
        np.testing.assert_array_equal(plab, lab[5000:8000])

    def test_split_is_disjoint_stream(self):
        spec = SyntheticSpec(2, 3, 1, 100, seed=5)
        tr, te, truth = gen_synthetic_split(spec, 40)
        full, _ = sample_mfa(truth, 140, seed=5)
        np.testing.assert_array_equal(tr.X, full[:100])
        np.testing.assert_array_equal(te.X, full[100:])

    @pytest.mark.parametrize("kw", [{"C_true": 0}, {"H_true": 5}, {"noise_scale": -1.0}])
    def test_invalid_spec(self, kw):
        base = dict(C_true=2, D=4, H_true=1, N=10)
        base.update(kw)
        with pytest.raises(ValueError):
            SyntheticSpec(**base).validate()
