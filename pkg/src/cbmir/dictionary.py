"""Codebook training: mini-batch k-means initialization followed by online
dictionary learning with unit-norm atoms.

The online stage alternates between encoding a mini-batch with the current
dictionary and a block-coordinate update of the atoms driven by the
accumulated sufficient statistics A = sum C C^T and B = sum X C^T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoders import (AdmmSettings, EncoderConfig, EncoderMethod, admm_lasso,
                       _squared_distances, _vq_codes_from_sqdist)
from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_BATCH = 256
DEFAULT_KMEANS_PASSES = 10
DEFAULT_EPOCHS = 5
DEAD_ATOM_DELTA = 1e-8


@dataclass(frozen=True)
class Codebook:
    """d x k dictionary of unit-L2-norm atoms plus training provenance."""

    atoms: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ValueError("atoms must be a d x k matrix")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("codebook atoms must have unit L2 norm")
        object.__setattr__(self, "atoms", atoms)

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]


@dataclass
class TrainerState:
    """Sufficient statistics for the online dictionary update."""

    A: np.ndarray  # k x k accumulated code covariance
    B: np.ndarray  # d x k accumulated data-code cross products
    n_seen: int = 0

    @classmethod
    def fresh(cls, d: int, k: int) -> "TrainerState":
        return cls(A=np.zeros((k, k)), B=np.zeros((d, k)))


def _as_pool(stream) -> np.ndarray:
    """Materialize a stream of d-vectors as a d x N array."""
    if isinstance(stream, np.ndarray):
        pool = np.asarray(stream, dtype=np.float64)
        if pool.ndim != 2:
            raise DataError("vector pool must be a d x N matrix")
        return pool
    cols = [np.asarray(v, dtype=np.float64).reshape(-1) for v in stream]
    if not cols:
        raise DataError("empty training stream")
    return np.stack(cols, axis=1)


def _normalize_columns(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=0)
    norms = np.where(norms < DEAD_ATOM_DELTA, 1.0, norms)
    return mat / norms


def kmeans_init(
    stream,
    k: int,
    seed: int,
    batch_size: int = DEFAULT_BATCH,
    n_passes: int = DEFAULT_KMEANS_PASSES,
) -> Codebook:
    """Mini-batch k-means over the stream, then L2-normalize each centroid.

    Uses per-centroid running-mean updates; empty centroids are re-seeded
    from random pool vectors. Deterministic for a fixed stream and seed.
    """
    pool = _as_pool(stream)
    d, n = pool.shape
    if n < k:
        raise DataError(f"need at least k={k} vectors, got {n}")

    rng = np.random.default_rng(seed)
    # k-means++ seeding; a zero total distance means the pool has run out
    # of distinct vectors.
    chosen = [int(rng.integers(n))]
    sq = _squared_distances(pool[:, chosen[-1:]], pool)[0]
    scale = max(1.0, float(np.max(sq, initial=0.0)))
    for _ in range(k - 1):
        sq = np.where(sq < 1e-12 * scale, 0.0, sq)  # snap duplicates to zero
        total = sq.sum()
        if total <= 0.0:
            raise DataError(
                f"only {len(chosen)} distinct vectors for k={k} centroids"
            )
        chosen.append(int(rng.choice(n, p=sq / total)))
        sq = np.minimum(sq, _squared_distances(pool[:, chosen[-1:]], pool)[0])
    centroids = pool[:, chosen].copy()
    counts = np.zeros(k)

    for _ in range(n_passes):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = pool[:, order[start : start + batch_size]]
            assign = np.argmin(_squared_distances(centroids, batch), axis=0)
            batch_counts = np.bincount(assign, minlength=k).astype(np.float64)
            sums = np.zeros((d, k))
            np.add.at(sums.T, assign, batch.T)
            hit = batch_counts > 0
            counts[hit] += batch_counts[hit]
            step = batch_counts[hit] / counts[hit]
            means = sums[:, hit] / batch_counts[hit]
            centroids[:, hit] += step * (means - centroids[:, hit])
        empty = counts == 0
        if np.any(empty):
            for j in np.flatnonzero(empty):
                centroids[:, j] = pool[:, rng.integers(n)]
                counts[j] = 1

    return Codebook(
        atoms=_normalize_columns(centroids),
        train_meta={"algorithm": "minibatch-kmeans", "k": k, "seed": seed,
                    "passes": n_passes, "batch_size": batch_size},
    )


def _draw_unit_vector(pool: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for _ in range(100):
        col = pool[:, rng.integers(pool.shape[1])]
        norm = np.linalg.norm(col)
        if norm >= DEAD_ATOM_DELTA:
            return col / norm
    raise NumericalError("could not draw a non-zero training vector for re-seeding")


def _encode_batch(atoms: np.ndarray, batch: np.ndarray, cfg: EncoderConfig,
                  settings: AdmmSettings, workspace: LassoWorkspace | None):
    if cfg.method == EncoderMethod.VQ:
        return _vq_codes_from_sqdist(_squared_distances(atoms, batch), int(cfg.param))
    if cfg.method == EncoderMethod.LASSO:
        codes, _, _ = admm_lasso(atoms, batch, cfg.param, settings, workspace)
        return codes
    raise ValueError(f"unsupported training encoder: {cfg.method}")


def _update_columns(atoms: np.ndarray, state: TrainerState) -> np.ndarray:
    """Sequential block-coordinate atom update with unit-norm projection."""
    atoms = atoms.copy()
    for j in range(atoms.shape[1]):
        denom = max(state.A[j, j], DEAD_ATOM_DELTA)
        candidate = atoms[:, j] + (state.B[:, j] - atoms @ state.A[:, j]) / denom
        norm = np.linalg.norm(candidate)
        if norm >= DEAD_ATOM_DELTA:
            atoms[:, j] = candidate / norm
    return atoms


def reconstruction_error(atoms: np.ndarray, batch: np.ndarray, cfg: EncoderConfig,
                         settings: AdmmSettings = AdmmSettings()) -> float:
    codes = _encode_batch(atoms, batch, cfg, settings, None)
    residual = batch - atoms @ codes
    return float(np.mean(np.sum(residual * residual, axis=0)))


def dict_train(
    stream,
    k: int,
    encoder_cfg: EncoderConfig,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    init: Codebook | None = None,
    heldout: np.ndarray | None = None,
    admm_settings: AdmmSettings = AdmmSettings(),
) -> Codebook:
    """Online dictionary learning over a finite, re-iterable vector stream.

    Each epoch shuffles the pool, encodes mini-batches with the current
    dictionary, accumulates A += C C^T and B += X C^T, and applies the
    block-coordinate column update. Atoms whose accumulated code energy
    stays below DEAD_ATOM_DELTA for a whole epoch are re-seeded from a
    random training vector. The returned atoms always have unit norm.
    """
    if encoder_cfg.method == EncoderMethod.CS:
        raise ValueError("codebooks are trained with vq or lasso encoders")
    pool = _as_pool(stream)
    d, n = pool.shape
    if n < k:
        raise DataError(f"need at least k={k} vectors, got {n}")

    rng = np.random.default_rng(seed)
    codebook = init if init is not None else kmeans_init(pool, k, seed,
                                                         batch_size=batch_size)
    atoms = codebook.atoms.copy()
    state = TrainerState.fresh(d, k)
    history = []
    reseed_log = []

    for epoch in range(epochs):
        energy_at_epoch_start = np.diag(state.A).copy()
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = pool[:, order[start : start + batch_size]]
            codes = _encode_batch(atoms, batch, encoder_cfg, admm_settings, None)
            state.A += codes @ codes.T
            state.B += batch @ codes.T
            state.n_seen += batch.shape[1]
            atoms = _update_columns(atoms, state)

        if not np.all(np.isfinite(atoms)):
            raise NumericalError("dictionary update produced non-finite atoms")

        dead = np.diag(state.A) - energy_at_epoch_start < DEAD_ATOM_DELTA
        for j in np.flatnonzero(dead):
            atoms[:, j] = _draw_unit_vector(pool, rng)
            reseed_log.append({"epoch": epoch, "atom": int(j)})
            logger.info("epoch %d: re-seeded dead atom %d", epoch, j)

        record = {
            "epoch": epoch,
            "max_norm_dev": float(np.max(np.abs(np.linalg.norm(atoms, axis=0) - 1.0))),
        }
        if heldout is not None:
            record["heldout_error"] = reconstruction_error(
                atoms, np.asarray(heldout, dtype=np.float64), encoder_cfg, admm_settings
            )
        history.append(record)

    return Codebook(
        atoms=_normalize_columns(atoms),
        train_meta={
            "algorithm": "online-dictionary-learning",
            "encoder": encoder_cfg.method.value,
            "param": encoder_cfg.param,
            "seed": seed,
            "epochs": epochs,
            "batch_size": batch_size,
            "n_vectors": n,
            "history": history,
            "reseeded": reseed_log,
        },
    )
