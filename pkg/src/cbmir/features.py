"""Low-level frame features: log mel spectra, MFCC, deltas, standardization, PCA.

Per-frame processing matches the pipeline constants: 2048-point DFT
magnitudes summarized into 34 mel bins (HTK mel scale, triangular
filters), optional orthonormal DCT keeping 13 coefficients, first and
second temporal derivatives, then per-dimension standardization and,
for the 102-dim mel-delta stack, PCA down to 39 dimensions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.fft import dct

from .errors import NumericalError
from .ingest import FRAME_LENGTH, PIPELINE_RATE, AudioClip, FrameWindow, frame_stream

logger = logging.getLogger(__name__)

N_MELS = 34
N_MFCC = 13
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


class FeatureKind(str, Enum):
    MFS = "MFS"
    MFCC = "MFCC"
    MFCC_D = "MFCC_D"
    MFS_D = "MFS_D"
    MFS_D_PC = "MFS_D_PC"


FEATURE_DIMS = {
    FeatureKind.MFS: N_MELS,
    FeatureKind.MFCC: N_MFCC,
    FeatureKind.MFCC_D: 3 * N_MFCC,
    FeatureKind.MFS_D: 3 * N_MELS,
    FeatureKind.MFS_D_PC: 3 * N_MFCC,
}


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters over the one-sided DFT bins."""

    weights: np.ndarray  # (n_mels, n_fft//2 + 1), non-negative
    center_frequencies: np.ndarray  # (n_mels,) Hz
    n_fft: int = FRAME_LENGTH
    sample_rate: int = PIPELINE_RATE

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def make_mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = FRAME_LENGTH,
    sample_rate: int = PIPELINE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    if f_max is None:
        f_max = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    weights = np.zeros((n_mels, n_fft // 2 + 1))
    for j in range(n_mels):
        lo, mid, hi = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        weights[j] = np.maximum(0.0, np.minimum(rising, falling))
        if weights[j].sum() <= 0.0:
            raise NumericalError(f"mel filter {j} has no DFT bin support")
    return MelFilterbank(
        weights=weights,
        center_frequencies=hz_points[1:-1],
        n_fft=n_fft,
        sample_rate=sample_rate,
    )


def mel_spectrum(frame: np.ndarray, bank: MelFilterbank) -> np.ndarray:
    """Log mel energies of one windowed frame: log(eps + W |DFT|)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != bank.n_fft:
        raise ValueError(f"frame length {frame.shape[-1]} != n_fft {bank.n_fft}")
    mag = np.abs(np.fft.rfft(frame, axis=-1))
    return np.log(LOG_FLOOR + mag @ bank.weights.T)


def mfcc(mfs: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of log mel energies, keeping the first 13 coefficients."""
    mfs = np.asarray(mfs, dtype=np.float64)
    if mfs.shape[-1] != N_MELS:
        raise ValueError(f"expected {N_MELS} mel bins, got {mfs.shape[-1]}")
    return dct(mfs, type=2, norm="ortho", axis=-1)[..., :N_MFCC]


def add_deltas(feats: np.ndarray) -> np.ndarray:
    """Stack [x; dx; ddx] where dx is a central difference with replicated edges."""
    feats = np.asarray(feats, dtype=np.float64)
    d0, n_frames = feats.shape
    if n_frames < 3:
        raise ValueError(f"need at least 3 frames for derivatives, got {n_frames}")

    def central(x):
        padded = np.concatenate([x[:, :1], x, x[:, -1:]], axis=1)
        return (padded[:, 2:] - padded[:, :-2]) / 2.0

    d1 = central(feats)
    d2 = central(d1)
    return np.concatenate([feats, d1, d2], axis=0)


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension mean/std estimated from a training pool."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("std entries must be strictly positive")


def fit_standardizer(pool: np.ndarray) -> Standardizer:
    """Estimate per-dimension mean and (population) std from a d x N pool."""
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[1] < 2:
        raise ValueError("pool must be d x N with N >= 2")
    mean = pool.mean(axis=1)
    std = pool.std(axis=1)
    low = std < STD_FLOOR
    if np.any(low):
        logger.warning("standardizer: %d near-constant dimensions floored at %g",
                       int(low.sum()), STD_FLOOR)
        std = np.where(low, STD_FLOOR, std)
    return Standardizer(mean=mean, std=std)


def apply_standardizer(s: Standardizer, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    return (feats - s.mean[:, None]) / s.std[:, None]


@dataclass(frozen=True)
class PcaProjector:
    """Rows are orthonormal principal directions, ordered by decreasing variance."""

    projection: np.ndarray  # (p, d)

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[0]


def fit_pca(pool: np.ndarray, p: int) -> PcaProjector:
    """Top-p eigenvectors of the pool covariance.

    Raises NumericalError when p exceeds the achievable covariance rank.
    Eigenvector signs are fixed by making each row's largest-magnitude
    entry positive.
    """
    pool = np.asarray(pool, dtype=np.float64)
    d, n = pool.shape
    if n < 2:
        raise ValueError("need at least 2 pool vectors")
    if not 1 <= p <= d:
        raise ValueError(f"output dim {p} out of range for input dim {d}")

    cov = np.cov(pool)
    cov = np.atleast_2d(cov)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    rank = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-10))
    if p > rank:
        raise NumericalError(
            f"PCA to {p} dims impossible: covariance rank is only {rank}"
        )

    rows = eigvecs[:, :p].T.copy()
    for i in range(p):
        pivot = np.argmax(np.abs(rows[i]))
        if rows[i, pivot] < 0:
            rows[i] = -rows[i]
    return PcaProjector(projection=rows)


def pca_project(pca: PcaProjector, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] != pca.input_dim:
        raise ValueError(f"feature dim {feats.shape[0]} != PCA input dim {pca.input_dim}")
    return pca.projection @ feats


@dataclass(frozen=True)
class FrameMatrix:
    """d x T matrix of per-frame features of one song."""

    data: np.ndarray
    feature_kind: FeatureKind
    song_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError("FrameMatrix needs a 2-D d x T array with T >= 1")
        expected = FEATURE_DIMS[FeatureKind(self.feature_kind)]
        if data.shape[0] != expected:
            raise ValueError(
                f"{self.feature_kind} expects d={expected}, got {data.shape[0]}"
            )
        object.__setattr__(self, "data", data)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureExtractor:
    """Fitted, shareable front end turning clips into FrameMatrix objects.

    The standardizer and PCA are estimated externally (from the dictionary
    training pool) and apply to the delta-augmented feature kinds only.
    """

    kind: FeatureKind
    window: FrameWindow = field(default_factory=FrameWindow)
    bank: MelFilterbank = field(default_factory=make_mel_filterbank)
    standardizer: Standardizer | None = None
    pca: PcaProjector | None = None

    def raw_frames(self, clip: AudioClip) -> np.ndarray:
        """Unstandardized features for `kind`'s base stack, shape (d0, T)."""
        frames = frame_stream(clip, self.window)
        mfs = mel_spectrum(frames, self.bank).T  # (34, T)
        if self.kind == FeatureKind.MFS:
            return mfs
        if self.kind == FeatureKind.MFCC:
            return mfcc(mfs.T).T
        if self.kind == FeatureKind.MFCC_D:
            return add_deltas(mfcc(mfs.T).T)
        return add_deltas(mfs)  # MFS_D and MFS_D_PC share the 102-dim stack

    def extract(self, clip: AudioClip) -> FrameMatrix:
        feats = self.raw_frames(clip)
        if self.kind in (FeatureKind.MFCC_D, FeatureKind.MFS_D, FeatureKind.MFS_D_PC):
            if self.standardizer is None:
                raise ValueError(f"{self.kind} extraction requires a fitted standardizer")
            feats = apply_standardizer(self.standardizer, feats)
        if self.kind == FeatureKind.MFS_D_PC:
            if self.pca is None:
                raise ValueError("MFS_D_PC extraction requires a fitted PCA")
            feats = pca_project(self.pca, feats)
        return FrameMatrix(data=feats, feature_kind=self.kind, song_id=clip.source_id)
