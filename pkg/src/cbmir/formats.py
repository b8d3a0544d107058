"""On-disk artifact containers and CSV interchange.

Binary layout shared by all containers: 4-byte magic, u32 version, a
format-specific header and little-endian f32 payload (matrices stored
column-major), then a length-prefixed UTF-8 JSON metadata blob. The
metadata carries the lineage hash of the configuration that produced the
artifact; stages refuse mismatched inputs.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dictionary import Codebook
from .encoders import CodeMatrix, EncoderMethod
from .errors import ArtifactFormatError, LineageError
from .features import FeatureKind, FrameMatrix, PcaProjector, Standardizer
from .pooling import PoolingKind, SongVector
from .retrieval import Metric, QbeSplit

FORMAT_VERSION = 1

MAGIC_FRAMES = b"CBMF"
MAGIC_CODEBOOK = b"CBDK"
MAGIC_CODES = b"CBCM"
MAGIC_VECTORS = b"CBSV"
MAGIC_METRIC = b"CBMW"
MAGIC_STANDARDIZER = b"CBST"
MAGIC_PCA = b"CBPC"

_SPARSE_THRESHOLD = 0.25  # store codes sparse below this density


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ArtifactFormatError(f"{self.path}: truncated artifact")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_matrix(self, rows: int, cols: int) -> np.ndarray:
        body = self.take(4 * rows * cols)
        return (np.frombuffer(body, dtype="<f4")
                .reshape((rows, cols), order="F").astype(np.float64))


def _pack_matrix(mat: np.ndarray) -> bytes:
    return np.asarray(mat, dtype="<f4").tobytes(order="F")


def _pack_meta(meta: dict) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def _open(path, magic: bytes) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactFormatError(f"cannot read {path}: {exc}") from exc
    reader = _Reader(raw, path)
    found = reader.take(4)
    if found != magic:
        raise ArtifactFormatError(
            f"{path}: expected magic {magic.decode()} found {found!r}"
        )
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(
            f"{path}: expected version {FORMAT_VERSION} found {version}"
        )
    return reader


def _read_meta(reader: _Reader) -> dict:
    length = reader.u32()
    try:
        return json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactFormatError(f"{reader.path}: bad metadata blob: {exc}") from exc


def verify_lineage(meta: dict, expected_hash: str, path) -> None:
    found = meta.get("lineage", "<missing>")
    if found != expected_hash:
        expected_params = meta.get("lineage_params", {})
        raise LineageError(
            f"{path}: artifact lineage mismatch\n"
            f"  expected hash: {expected_hash}\n"
            f"  found hash:    {found}\n"
            f"  artifact was built with: {json.dumps(expected_params, sort_keys=True)}"
        )


# ---------------------------------------------------------------------------
# FrameMatrix (CBMF)


def write_frames(path, frames: FrameMatrix, meta: dict | None = None) -> None:
    header = MAGIC_FRAMES + struct.pack("<III", FORMAT_VERSION,
                                        frames.d, frames.n_frames)
    body = _pack_matrix(frames.data)
    meta = dict(meta or {})
    meta.update({"feature_kind": frames.feature_kind.value, "song_id": frames.song_id})
    atomic_write(path, header + body + _pack_meta(meta))


def read_frames(path) -> tuple[FrameMatrix, dict]:
    reader = _open(path, MAGIC_FRAMES)
    d, n_frames = reader.u32(), reader.u32()
    data = reader.f32_matrix(d, n_frames)
    meta = _read_meta(reader)
    frames = FrameMatrix(data=data, feature_kind=FeatureKind(meta["feature_kind"]),
                         song_id=meta.get("song_id", ""))
    return frames, meta


# ---------------------------------------------------------------------------
# Codebook (CBDK)


def write_codebook(path, codebook: Codebook, meta: dict | None = None) -> None:
    header = MAGIC_CODEBOOK + struct.pack("<III", FORMAT_VERSION,
                                          codebook.d, codebook.k)
    body = _pack_matrix(codebook.atoms)
    meta = dict(meta or {})
    meta["train_meta"] = codebook.train_meta
    atomic_write(path, header + body + _pack_meta(meta))


def read_codebook(path) -> tuple[Codebook, dict]:
    reader = _open(path, MAGIC_CODEBOOK)
    d, k = reader.u32(), reader.u32()
    atoms = reader.f32_matrix(d, k)
    # f32 round-tripping perturbs norms at the 1e-8 level; re-normalize.
    atoms /= np.linalg.norm(atoms, axis=0)
    meta = _read_meta(reader)
    return Codebook(atoms=atoms, train_meta=meta.get("train_meta", {})), meta


# ---------------------------------------------------------------------------
# CodeMatrix (CBCM)


def write_codes(path, codes: CodeMatrix, meta: dict | None = None) -> None:
    k, n_frames = codes.k, codes.n_frames
    density = codes.nnz_per_column().sum() / max(1, k * n_frames)
    sparse = density < _SPARSE_THRESHOLD
    header = MAGIC_CODES + struct.pack("<IIII", FORMAT_VERSION, k, n_frames,
                                       1 if sparse else 0)
    if sparse:
        parts = []
        data32 = np.asarray(codes.data, dtype="<f4")
        for t in range(n_frames):
            idx = np.flatnonzero(data32[:, t]).astype("<u4")
            vals = data32[idx.astype(int), t]
            parts.append(struct.pack("<I", idx.size))
            interleaved = np.empty(idx.size * 2, dtype="<u4")
            interleaved[0::2] = idx
            interleaved[1::2] = vals.view("<u4")
            parts.append(interleaved.tobytes())
        body = b"".join(parts)
    else:
        body = _pack_matrix(codes.data)
    meta = dict(meta or {})
    meta.update({"method": codes.method.value, "param": codes.param,
                 "song_id": codes.song_id, "converged": codes.converged})
    atomic_write(path, header + body + _pack_meta(meta))


def read_codes(path) -> tuple[CodeMatrix, dict]:
    reader = _open(path, MAGIC_CODES)
    k, n_frames, sparse = reader.u32(), reader.u32(), reader.u32()
    if sparse:
        data = np.zeros((k, n_frames))
        for t in range(n_frames):
            count = reader.u32()
            pairs = np.frombuffer(reader.take(8 * count), dtype="<u4")
            idx = pairs[0::2].astype(int)
            vals = pairs[1::2].copy().view("<f4")
            data[idx, t] = vals.astype(np.float64)
    else:
        data = reader.f32_matrix(k, n_frames)
    meta = _read_meta(reader)
    codes = CodeMatrix(data=data, method=EncoderMethod(meta["method"]),
                       param=meta["param"], song_id=meta.get("song_id", ""),
                       converged=meta.get("converged", True))
    return codes, meta


# ---------------------------------------------------------------------------
# SongVector table (CBSV)


def write_vectors(path, table: dict, pooling: PoolingKind, ppk: bool,
                  meta: dict | None = None) -> None:
    """table: song_id -> SongVector or raw k-vector; written in sorted id order."""
    ids = sorted(table)
    if not ids:
        raise ArtifactFormatError("refusing to write an empty vector table")
    first = table[ids[0]]
    k = getattr(first, "values", first).shape[0]
    parts = [MAGIC_VECTORS, struct.pack("<III", FORMAT_VERSION, k, len(ids))]
    for song_id in ids:
        values = np.asarray(getattr(table[song_id], "values", table[song_id]),
                            dtype="<f4")
        encoded = song_id.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded + values.tobytes())
    meta = dict(meta or {})
    meta.update({"pooling": PoolingKind(pooling).value, "ppk": bool(ppk)})
    parts.append(_pack_meta(meta))
    atomic_write(path, b"".join(parts))


def read_vectors(path) -> tuple[dict, dict]:
    reader = _open(path, MAGIC_VECTORS)
    k, count = reader.u32(), reader.u32()
    raw = {}
    for _ in range(count):
        name_len = reader.u32()
        song_id = reader.take(name_len).decode("utf-8")
        raw[song_id] = np.frombuffer(reader.take(4 * k), dtype="<f4").astype(np.float64)
    meta = _read_meta(reader)
    pooling = PoolingKind(meta["pooling"])
    ppk = bool(meta["ppk"])
    table = {
        song_id: SongVector(values=vals, pooling=pooling, ppk=ppk, song_id=song_id)
        for song_id, vals in raw.items()
    }
    return table, meta


def export_vectors_csv(path, table: dict) -> None:
    ids = sorted(table)
    k = table[ids[0]].values.shape[0] if ids else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["song_id"] + [f"v_{j + 1}" for j in range(k)])
        for song_id in ids:
            writer.writerow([song_id] + [repr(float(x)) for x in table[song_id].values])


# ---------------------------------------------------------------------------
# Standardizer / PCA / Metric


def write_standardizer(path, s: Standardizer, meta: dict | None = None) -> None:
    d = s.mean.shape[0]
    header = MAGIC_STANDARDIZER + struct.pack("<II", FORMAT_VERSION, d)
    body = _pack_matrix(s.mean.reshape(-1, 1)) + _pack_matrix(s.std.reshape(-1, 1))
    atomic_write(path, header + body + _pack_meta(dict(meta or {})))


def read_standardizer(path) -> tuple[Standardizer, dict]:
    reader = _open(path, MAGIC_STANDARDIZER)
    d = reader.u32()
    mean = reader.f32_matrix(d, 1)[:, 0]
    std = reader.f32_matrix(d, 1)[:, 0]
    return Standardizer(mean=mean, std=std), _read_meta(reader)


def write_pca(path, pca: PcaProjector, meta: dict | None = None) -> None:
    header = MAGIC_PCA + struct.pack("<III", FORMAT_VERSION,
                                     pca.output_dim, pca.input_dim)
    atomic_write(path, header + _pack_matrix(pca.projection) + _pack_meta(dict(meta or {})))


def read_pca(path) -> tuple[PcaProjector, dict]:
    reader = _open(path, MAGIC_PCA)
    p, d = reader.u32(), reader.u32()
    projection = reader.f32_matrix(p, d)
    return PcaProjector(projection=projection), _read_meta(reader)


def write_metric(path, metric: Metric, meta: dict | None = None) -> None:
    m = metric.dim
    d = metric.reducer.input_dim
    header = MAGIC_METRIC + struct.pack("<III", FORMAT_VERSION, m, d)
    body = _pack_matrix(metric.W) + _pack_matrix(metric.reducer.projection)
    atomic_write(path, header + body + _pack_meta(dict(meta or {})))


def read_metric(path) -> tuple[Metric, dict]:
    reader = _open(path, MAGIC_METRIC)
    m, d = reader.u32(), reader.u32()
    W = reader.f32_matrix(m, m)
    W = (W + W.T) / 2.0  # f32 storage breaks exact symmetry
    projection = reader.f32_matrix(m, d)
    meta = _read_meta(reader)
    return Metric(W=W, reducer=PcaProjector(projection=projection)), meta


# ---------------------------------------------------------------------------
# CSV interchange


def write_csv_rows(path, header: list, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_annotations(path) -> dict:
    """CSV (song_id, tag) -> {tag: set of song ids}."""
    out: dict[str, set] = {}
    with open(path, newline="") as fh:
        for row in _data_rows(csv.reader(fh), 2, path):
            out.setdefault(row[1], set()).add(row[0])
    return out


def write_annotations(path, annotations: dict) -> None:
    rows = sorted((song, tag) for tag, songs in annotations.items() for song in songs)
    write_csv_rows(path, ["song_id", "tag"], rows)


def read_relevance_pairs(path) -> dict:
    """CSV (song_id_a, song_id_b, {0,1}) -> symmetric {song: frozenset(relevant)}."""
    pairs: dict[str, set] = {}
    with open(path, newline="") as fh:
        for row in _data_rows(csv.reader(fh), 3, path):
            if row[2] not in ("0", "1"):
                raise ArtifactFormatError(f"{path}: relevance label {row[2]!r} not 0/1")
            if row[2] == "1":
                pairs.setdefault(row[0], set()).add(row[1])
                pairs.setdefault(row[1], set()).add(row[0])
    return {s: frozenset(v) for s, v in pairs.items()}


def write_relevance_pairs(path, relevant: dict) -> None:
    rows = sorted(
        (a, b, 1) for a, partners in relevant.items() for b in partners if a < b
    )
    write_csv_rows(path, ["song_id_a", "song_id_b", "relevant"], rows)


def read_folds(path) -> dict:
    with open(path, newline="") as fh:
        return {row[0]: int(row[1]) for row in _data_rows(csv.reader(fh), 2, path)}


def write_folds(path, folds: dict) -> None:
    write_csv_rows(path, ["song_id", "fold"], sorted(folds.items()))


def read_qbe_splits(path) -> list:
    """CSV (song_id, split, role) -> list of (train, val, test) id tuples."""
    roles: dict[int, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in _data_rows(csv.reader(fh), 3, path):
            song_id, split, role = row[0], int(row[1]), row[2]
            if role not in ("train", "val", "test"):
                raise ArtifactFormatError(f"{path}: unknown split role {role!r}")
            roles.setdefault(split, {"train": [], "val": [], "test": []})[role].append(song_id)
    return [
        QbeSplit(train=tuple(sorted(r["train"])), val=tuple(sorted(r["val"])),
                 test=tuple(sorted(r["test"])))
        for _, r in sorted(roles.items())
    ]


def write_qbe_splits(path, splits) -> None:
    rows = []
    for i, split in enumerate(splits):
        rows.extend((s, i, "train") for s in split.train)
        rows.extend((s, i, "val") for s in split.val)
        rows.extend((s, i, "test") for s in split.test)
    write_csv_rows(path, ["song_id", "split", "role"], sorted(rows))


def _data_rows(reader, width: int, path):
    header_skipped = False
    for row in reader:
        if not row:
            continue
        if not header_skipped:
            header_skipped = True
            continue
        if len(row) < width:
            raise ArtifactFormatError(f"{path}: short row {row!r}")
        yield row
