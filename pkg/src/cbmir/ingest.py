"""Audio ingestion: WAV reading, mono downmix, resampling, frame windowing.

Only RIFF/WAVE containers are supported (8/16/24-bit integer PCM and
32-bit float, mono or stereo). Everything downstream runs at 22050 Hz.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.signal import firwin, resample_poly

from .errors import EmptyAudioError, UnsupportedWavError, WavReadError

PIPELINE_RATE = 22050
FRAME_LENGTH = 2048
HOP_LENGTH = 1024

# Per-phase length of the polyphase resampling filter (Kaiser-windowed sinc).
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.6

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


class WindowKind(str, Enum):
    HANN = "hann"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class AudioClip:
    """Single-channel audio with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be single-channel (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class FrameWindow:
    """Analysis window: 2048-sample frames advancing by half a frame."""

    frame_length: int = FRAME_LENGTH
    hop: int = HOP_LENGTH
    window_kind: WindowKind = WindowKind.HANN

    def __post_init__(self):
        if self.hop * 2 != self.frame_length:
            raise ValueError("hop must be exactly half the frame length")

    def window(self) -> np.ndarray:
        # Symmetric Hann so that magnitude spectra are reversal-invariant.
        if self.window_kind == WindowKind.HANN:
            return np.hanning(self.frame_length)
        return np.ones(self.frame_length)


def _parse_riff_chunks(raw: bytes):
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavReadError("not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if cid not in chunks:  # keep the first occurrence of each chunk
            chunks[cid] = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def load_audio(path) -> AudioClip:
    """Read a PCM WAV file as a mono clip at its original rate.

    Stereo files are averaged sample-wise. Integer samples are scaled by
    2^(bits-1); 8-bit WAV is unsigned and centered at 128 before scaling.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise WavReadError(f"cannot read {path}: {exc}") from exc

    chunks = _parse_riff_chunks(raw)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise WavReadError(f"{path}: missing fmt or data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise WavReadError(f"{path}: truncated fmt chunk")
    tag, n_channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)

    if n_channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {n_channels} channels (mono/stereo only)")
    if tag == _WAVE_FORMAT_PCM and bits in (8, 16, 24):
        pass
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag} at {bits} bits unsupported")

    data = chunks[b"data"]
    bytes_per_sample = bits // 8
    n_frames = len(data) // (bytes_per_sample * n_channels)
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    data = data[: n_frames * bytes_per_sample * n_channels]

    if tag == _WAVE_FORMAT_IEEE_FLOAT:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif bits == 8:
        samples = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    else:  # 24-bit: assemble little-endian triplets into signed ints
        as_bytes = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = as_bytes[:, 0] | (as_bytes[:, 1] << 8) | (as_bytes[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / float(1 << 23)

    if n_channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples=samples, sample_rate=rate, source_id=str(path))


def resample(clip: AudioClip, target_rate: int = PIPELINE_RATE) -> AudioClip:
    """Polyphase resampling with a Kaiser-windowed sinc filter.

    Output length is round(len * target/original) (half-up). Returns the
    clip unchanged when the rate already matches.
    """
    if len(clip) == 0:
        raise EmptyAudioError("cannot resample an empty clip")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if clip.sample_rate == target_rate:
        return clip

    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    max_rate = max(up, down)
    half_len = (RESAMPLE_TAPS_PER_PHASE // 2) * max_rate
    taps = firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", RESAMPLE_KAISER_BETA))
    out = resample_poly(clip.samples, up, down, window=taps)

    n_out = int(math.floor(len(clip) * target_rate / clip.sample_rate + 0.5))
    out = out[:n_out]
    return AudioClip(samples=np.clip(out, -1.0, 1.0), sample_rate=target_rate,
                     source_id=clip.source_id)


def frame_stream(clip: AudioClip, win: FrameWindow = FrameWindow()) -> np.ndarray:
    """Slice a clip into half-overlapping windowed frames, shape (T, frame_length).

    The trailing partial frame is dropped: T = floor((len - frame)/hop) + 1.
    """
    n = len(clip)
    if n < win.frame_length:
        raise ValueError(
            f"clip of {n} samples is shorter than one frame ({win.frame_length})"
        )
    n_frames = (n - win.frame_length) // win.hop + 1
    strides = clip.samples.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        clip.samples,
        shape=(n_frames, win.frame_length),
        strides=(win.hop * strides, strides),
    )
    return frames * win.window()
