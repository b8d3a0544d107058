import struct

import numpy as np
import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_wav(path, channels, sample_rate=44100, bits=16, fmt_tag=None):
    """Minimal RIFF writer for tests; channels is a list of float arrays."""
    channels = [np.asarray(c, dtype=np.float64) for c in channels]
    n = len(channels[0])
    n_ch = len(channels)
    interleaved = np.empty(n * n_ch)
    for i, ch in enumerate(channels):
        interleaved[i::n_ch] = ch

    if fmt_tag is None:
        fmt_tag = 3 if bits == 32 else 1
    if fmt_tag == 3:
        body = interleaved.astype("<f4").tobytes()
    elif bits == 8:
        body = (np.clip(np.rint(interleaved * 128 + 128), 0, 255)
                .astype(np.uint8).tobytes())
    elif bits == 16:
        body = np.clip(np.rint(interleaved * 32768), -32768, 32767).astype("<i2").tobytes()
    elif bits == 24:
        ints = np.clip(np.rint(interleaved * (1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int64)
        raw = bytearray()
        for v in ints:
            raw += struct.pack("<i", int(v))[:3]
        body = bytes(raw)
    else:
        raise ValueError(bits)

    block_align = n_ch * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, n_ch, sample_rate,
                      sample_rate * block_align, block_align, bits)
    payload = (b"WAVE"
               + b"fmt " + struct.pack("<I", len(fmt)) + fmt
               + b"data" + struct.pack("<I", len(body)) + body)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(payload)) + payload)
    return path


def write_raw_int16_wav(path, ints, sample_rate=44100):
    """16-bit WAV from exact integer samples (no float rounding)."""
    body = np.asarray(ints, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate, sample_rate * 2, 2, 16)
    payload = (b"WAVE"
               + b"fmt " + struct.pack("<I", len(fmt)) + fmt
               + b"data" + struct.pack("<I", len(body)) + body)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(payload)) + payload)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
