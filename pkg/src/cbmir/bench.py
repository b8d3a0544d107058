"""Empirical encoder runtime measurement across codebook sizes.

Times encode_song per song on a fixed synthetic corpus, pinned to a
single execution lane (BLAS thread pools limited to 1), with a warm-up
run excluded and automatic repetition scaling when a measurement is too
short for the wall-clock resolution. The LASSO factorization is built
outside the timed region; the ADMM settings used are recorded in the
report's environment note.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .dictionary import Codebook, kmeans_init
from .encoders import AdmmSettings, EncoderConfig, EncoderMethod, LassoWorkspace, encode_song
from .errors import DataError
from .formats import atomic_write, write_csv_rows

MIN_TIMER_TICKS = 100
MAX_REPETITIONS = 4096


@dataclass(frozen=True)
class BenchRow:
    method: str
    k: int
    param: float
    mean_seconds: float
    std_seconds: float
    n_songs: int

    def __post_init__(self):
        if self.n_songs < 1:
            raise ValueError("benchmark rows need at least one song")
        if self.mean_seconds <= 0:
            raise ValueError("benchmark times must be positive")


@dataclass(frozen=True)
class BenchReport:
    rows: tuple
    environment: str

    def mean_seconds(self, method: str, k: int) -> float:
        for row in self.rows:
            if row.method == method and row.k == k:
                return row.mean_seconds
        raise KeyError(f"no row for {method} at k={k}")


def make_bench_corpus(n_songs: int, n_frames: int, d: int = 39,
                      seed: int = 0) -> list:
    """Synthetic standardized-feature stand-in corpus, one d x T matrix per song."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((d, n_frames)) for _ in range(n_songs)]


def train_bench_codebooks(corpus, k_grid, seed: int = 0,
                          max_vectors: int = 4096) -> dict:
    pool = np.concatenate(corpus, axis=1)
    if pool.shape[1] > max_vectors:
        rng = np.random.default_rng(seed)
        pool = pool[:, rng.choice(pool.shape[1], size=max_vectors, replace=False)]
    return {k: kmeans_init(pool, k, seed, n_passes=3) for k in k_grid}


def _time_song(run, repetitions: int, resolution: float) -> float:
    reps = repetitions
    while True:
        start = time.perf_counter()
        for _ in range(reps):
            run()
        elapsed = time.perf_counter() - start
        if elapsed >= MIN_TIMER_TICKS * resolution or reps >= MAX_REPETITIONS:
            return elapsed / reps
        reps *= 2


def bench_encoding(
    corpus,
    k_grid=(128, 256, 512, 1024),
    configs=(EncoderConfig(EncoderMethod.CS, 0.4),
             EncoderConfig(EncoderMethod.VQ, 4),
             EncoderConfig(EncoderMethod.LASSO, 1.0)),
    repetitions: int = 1,
    codebooks: dict | None = None,
    seed: int = 0,
    admm_settings: AdmmSettings = AdmmSettings(),
) -> BenchReport:
    """Wall-clock per-song encode time for every (method, k) grid cell.

    The same corpus is reused for every cell; the first song serves as an
    untimed warm-up.
    """
    corpus = [np.asarray(song, dtype=np.float64) for song in corpus]
    if not corpus:
        raise DataError("benchmark needs at least one song")
    if codebooks is None:
        codebooks = train_bench_codebooks(corpus, k_grid, seed)
    resolution = time.get_clock_info("perf_counter").resolution

    rows = []
    with threadpool_limits(limits=1):
        for k in sorted(k_grid):
            codebook: Codebook = codebooks[k]
            for cfg in configs:
                workspace = (LassoWorkspace(codebook, admm_settings.rho)
                             if cfg.method == EncoderMethod.LASSO else None)
                encode_song(codebook, corpus[0], cfg, admm_settings, workspace)  # warm-up
                times = [
                    _time_song(
                        lambda: encode_song(codebook, song, cfg, admm_settings, workspace),
                        repetitions, resolution,
                    )
                    for song in corpus
                ]
                rows.append(BenchRow(
                    method=cfg.method.value, k=k, param=cfg.param,
                    mean_seconds=float(np.mean(times)),
                    std_seconds=float(np.std(times)), n_songs=len(corpus),
                ))

    env = (f"single execution lane (blas threads=1); cpus={os.cpu_count()}; "
           f"timer resolution={resolution:g}s; admm rho={admm_settings.rho} "
           f"abs_tol={admm_settings.abs_tol} rel_tol={admm_settings.rel_tol} "
           f"max_iter={admm_settings.max_iter}")
    return BenchReport(rows=tuple(rows), environment=env)


def fit_scaling_exponent(ks, times) -> float:
    """Least-squares slope of log(time) against log(k)."""
    ks = np.asarray(ks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if ks.size < 2:
        raise ValueError("need at least two codebook sizes to fit an exponent")
    return float(np.polyfit(np.log(ks), np.log(times), 1)[0])


def report_exponent(report: BenchReport, method: str) -> float:
    rows = sorted((r.k, r.mean_seconds) for r in report.rows if r.method == method)
    return fit_scaling_exponent([k for k, _ in rows], [t for _, t in rows])


def write_report_csv(report: BenchReport, path) -> None:
    write_csv_rows(
        path,
        ["method", "k", "param", "mean_seconds", "std_seconds", "n_songs"],
        [(r.method, r.k, r.param, repr(r.mean_seconds), repr(r.std_seconds), r.n_songs)
         for r in report.rows],
    )


def write_report_gnuplot(report: BenchReport, path) -> None:
    """Whitespace-separated data file, one block per method."""
    lines = [f"# {report.environment}", "# k mean_seconds std_seconds"]
    for method in sorted({r.method for r in report.rows}):
        lines.append(f'# method "{method}"')
        for row in sorted((r for r in report.rows if r.method == method),
                          key=lambda r: r.k):
            lines.append(f"{row.k} {row.mean_seconds:.9g} {row.std_seconds:.9g}")
        lines.append("")
        lines.append("")
    atomic_write(path, "\n".join(lines).encode("utf-8"))
