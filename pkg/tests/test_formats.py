import numpy as np
import pytest

from cbmir.dictionary import Codebook
from cbmir.encoders import CodeMatrix, EncoderMethod
from cbmir.errors import ArtifactFormatError, LineageError
from cbmir.features import FeatureKind, FrameMatrix, PcaProjector, Standardizer
from cbmir.formats import (read_annotations, read_codebook, read_codes,
                           read_folds, read_frames, read_metric, read_pca,
                           read_qbe_splits, read_relevance_pairs,
                           read_standardizer, read_vectors, verify_lineage,
                           write_annotations, write_codebook, write_codes,
                           write_folds, write_frames, write_metric, write_pca,
                           write_qbe_splits, write_relevance_pairs,
                           write_standardizer, write_vectors,
                           export_vectors_csv)
from cbmir.pooling import PoolingKind, SongVector
from cbmir.retrieval import Metric, QbeSplit


class TestFrameContainer:
    def test_roundtrip(self, tmp_path, rng):
        frames = FrameMatrix(data=rng.standard_normal((39, 17)).astype(np.float32),
                             feature_kind=FeatureKind.MFCC_D, song_id="song_x")
        path = tmp_path / "a.cbmf"
        write_frames(path, frames, {"lineage": "abc"})
        loaded, meta = read_frames(path)
        np.testing.assert_array_equal(loaded.data, frames.data)
        assert loaded.feature_kind == FeatureKind.MFCC_D
        assert loaded.song_id == "song_x"
        assert meta["lineage"] == "abc"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cbmf"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ArtifactFormatError, match="expected magic"):
            read_frames(path)

    def test_truncated(self, tmp_path, rng):
        frames = FrameMatrix(data=rng.standard_normal((13, 5)),
                             feature_kind=FeatureKind.MFCC)
        path = tmp_path / "t.cbmf"
        write_frames(path, frames)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(ArtifactFormatError, match="truncated"):
            read_frames(path)

    def test_version_check(self, tmp_path, rng):
        frames = FrameMatrix(data=rng.standard_normal((13, 5)),
                             feature_kind=FeatureKind.MFCC)
        path = tmp_path / "v.cbmf"
        write_frames(path, frames)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ArtifactFormatError, match="version"):
            read_frames(path)


class TestCodebookContainer:
    def test_roundtrip_preserves_meta(self, tmp_path, rng):
        atoms = rng.standard_normal((12, 8))
        atoms /= np.linalg.norm(atoms, axis=0)
        cb = Codebook(atoms=atoms, train_meta={"algorithm": "x", "seed": 4})
        path = tmp_path / "d.cbdk"
        write_codebook(path, cb, {"lineage": "zz"})
        loaded, meta = read_codebook(path)
        assert loaded.train_meta["seed"] == 4
        assert meta["lineage"] == "zz"
        np.testing.assert_allclose(loaded.atoms, cb.atoms, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(loaded.atoms, axis=0), 1.0,
                                   atol=1e-9)


class TestCodesContainer:
    def test_sparse_roundtrip(self, tmp_path):
        data = np.zeros((64, 9))
        data[3, 0] = 0.5
        data[10, 4] = -1.25
        codes = CodeMatrix(data=data, method=EncoderMethod.VQ, param=2,
                           song_id="s1")
        path = tmp_path / "c.cbcm"
        write_codes(path, codes)
        loaded, meta = read_codes(path)
        np.testing.assert_array_equal(loaded.data, data)
        assert loaded.method == EncoderMethod.VQ
        assert loaded.song_id == "s1"

    def test_dense_roundtrip(self, tmp_path, rng):
        data = rng.standard_normal((6, 11)).astype(np.float32)
        codes = CodeMatrix(data=data, method=EncoderMethod.CS, param=0.3)
        path = tmp_path / "c.cbcm"
        write_codes(path, codes)
        loaded, _ = read_codes(path)
        np.testing.assert_array_equal(loaded.data, data)

    def test_sparse_chosen_for_sparse_codes(self, tmp_path):
        import struct

        data = np.zeros((100, 4))
        data[0] = 1.0
        codes = CodeMatrix(data=data, method=EncoderMethod.VQ, param=1)
        path = tmp_path / "c.cbcm"
        write_codes(path, codes)
        raw = path.read_bytes()
        assert struct.unpack_from("<I", raw, 16)[0] == 1  # storage flag

    def test_convergence_flag_persisted(self, tmp_path):
        codes = CodeMatrix(data=np.ones((3, 2)), method=EncoderMethod.LASSO,
                           param=1.0, converged=False)
        path = tmp_path / "c.cbcm"
        write_codes(path, codes)
        loaded, _ = read_codes(path)
        assert loaded.converged is False


class TestVectorTable:
    def test_roundtrip_and_order(self, tmp_path, rng):
        table = {
            f"song_{i}": SongVector(values=rng.standard_normal(16),
                                    pooling=PoolingKind.MEAN, song_id=f"song_{i}")
            for i in range(5)
        }
        path = tmp_path / "v.cbsv"
        write_vectors(path, table, PoolingKind.MEAN, ppk=False, meta={"lineage": "m"})
        loaded, meta = read_vectors(path)
        assert sorted(loaded) == sorted(table)
        for song_id in table:
            np.testing.assert_allclose(loaded[song_id].values,
                                       table[song_id].values, atol=1e-7)
        assert meta["pooling"] == "mean"

    def test_csv_export(self, tmp_path, rng):
        table = {"a": SongVector(values=np.array([1.0, 2.0]), pooling="mean")}
        path = tmp_path / "v.csv"
        export_vectors_csv(path, table)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "song_id,v_1,v_2"
        assert lines[1].startswith("a,1.0,2.0")

    def test_empty_table_rejected(self, tmp_path):
        with pytest.raises(ArtifactFormatError):
            write_vectors(tmp_path / "e.cbsv", {}, PoolingKind.MEAN, False)


class TestTransformContainers:
    def test_standardizer_roundtrip(self, tmp_path, rng):
        s = Standardizer(mean=rng.standard_normal(7),
                         std=np.abs(rng.standard_normal(7)) + 0.5)
        path = tmp_path / "s.cbst"
        write_standardizer(path, s)
        loaded, _ = read_standardizer(path)
        np.testing.assert_allclose(loaded.mean, s.mean, atol=1e-6)
        np.testing.assert_allclose(loaded.std, s.std, atol=1e-6)

    def test_pca_roundtrip(self, tmp_path, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        pca = PcaProjector(projection=Q[:3].copy())
        path = tmp_path / "p.cbpc"
        write_pca(path, pca)
        loaded, _ = read_pca(path)
        assert loaded.output_dim == 3 and loaded.input_dim == 6
        np.testing.assert_allclose(loaded.projection, pca.projection, atol=1e-6)

    def test_metric_roundtrip(self, tmp_path, rng):
        A = rng.standard_normal((4, 4))
        W = A @ A.T / 10.0
        metric = Metric(W=W, reducer=PcaProjector(projection=np.eye(4)))
        path = tmp_path / "m.cbmw"
        write_metric(path, metric)
        loaded, _ = read_metric(path)
        np.testing.assert_allclose(loaded.W, W, atol=1e-5)


class TestLineage:
    def test_mismatch_raises_with_diff(self):
        meta = {"lineage": "aaaa", "lineage_params": {"k": 128}}
        with pytest.raises(LineageError) as err:
            verify_lineage(meta, "bbbb", "f.cbmf")
        message = str(err.value)
        assert "aaaa" in message and "bbbb" in message and "128" in message

    def test_match_passes(self):
        verify_lineage({"lineage": "same"}, "same", "x")


class TestCsvInterchange:
    def test_annotations_roundtrip(self, tmp_path):
        annotations = {"rock": {"s1", "s2"}, "jazz": {"s2"}}
        path = tmp_path / "ann.csv"
        write_annotations(path, annotations)
        assert read_annotations(path) == annotations

    def test_relevance_roundtrip(self, tmp_path):
        relevant = {"a": frozenset({"b", "c"}), "b": frozenset({"a"}),
                    "c": frozenset({"a"})}
        path = tmp_path / "rel.csv"
        write_relevance_pairs(path, relevant)
        assert read_relevance_pairs(path) == relevant

    def test_relevance_bad_label(self, tmp_path):
        path = tmp_path / "rel.csv"
        path.write_text("song_id_a,song_id_b,relevant\na,b,2\n")
        with pytest.raises(ArtifactFormatError):
            read_relevance_pairs(path)

    def test_folds_roundtrip(self, tmp_path):
        folds = {"s1": 0, "s2": 3}
        path = tmp_path / "folds.csv"
        write_folds(path, folds)
        assert read_folds(path) == folds

    def test_qbe_splits_roundtrip(self, tmp_path):
        splits = [QbeSplit(train=("a", "b"), val=("c",), test=("d",)),
                  QbeSplit(train=("c", "d"), val=("a",), test=("b",))]
        path = tmp_path / "splits.csv"
        write_qbe_splits(path, splits)
        assert read_qbe_splits(path) == splits

    def test_qbe_bad_role(self, tmp_path):
        path = tmp_path / "splits.csv"
        path.write_text("song_id,split,role\na,0,banana\n")
        with pytest.raises(ArtifactFormatError):
            read_qbe_splits(path)
