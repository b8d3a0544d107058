"""Frame encoders: LASSO via ADMM, top-tau vector quantization, cosine similarity.

All three map a d-dim frame vector to a k-dim code against a fixed
codebook of unit-norm atoms. They are pure functions of (atoms, frame,
parameters); the LASSO solver factorizes (D^T D + rho I) once per
codebook and reuses it across every frame of every song.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DataError

logger = logging.getLogger(__name__)

# Parameter grids used throughout the experiments.
LASSO_GRID = (0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0)
VQ_GRID = (1, 2, 4, 8, 16, 32)
CS_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class EncoderMethod(str, Enum):
    LASSO = "lasso"
    VQ = "vq"
    CS = "cs"


@dataclass(frozen=True)
class EncoderConfig:
    """Encoding method plus its sparsity/density parameter.

    lasso: param is lambda (> 0); vq: param is tau (integer >= 1, checked
    against k at encode time); cs: param is theta in [0, 1).
    """

    method: EncoderMethod
    param: float

    def __post_init__(self):
        method = EncoderMethod(self.method)
        object.__setattr__(self, "method", method)
        if method == EncoderMethod.LASSO and not self.param > 0:
            raise ValueError("lasso lambda must be positive")
        if method == EncoderMethod.VQ:
            if self.param < 1 or self.param != int(self.param):
                raise ValueError("vq tau must be a positive integer")
        if method == EncoderMethod.CS and not 0.0 <= self.param < 1.0:
            raise ValueError("cs theta must lie in [0, 1)")

    def label(self) -> str:
        names = {EncoderMethod.LASSO: "lambda", EncoderMethod.VQ: "tau",
                 EncoderMethod.CS: "theta"}
        value = int(self.param) if self.method == EncoderMethod.VQ else self.param
        return f"{self.method.value}({names[self.method]}={value})"


@dataclass(frozen=True)
class AdmmSettings:
    rho: float = 1.0
    abs_tol: float = 1e-4
    rel_tol: float = 1e-3
    max_iter: int = 500

    def __post_init__(self):
        if min(self.rho, self.abs_tol, self.rel_tol, self.max_iter) <= 0:
            raise ValueError("all ADMM settings must be positive")


@dataclass(frozen=True)
class CodeMatrix:
    """k x T encoded song; dense in memory, sparse-aware on disk."""

    data: np.ndarray
    method: EncoderMethod
    param: float
    song_id: str = ""
    converged: bool = True

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError("CodeMatrix needs a 2-D k x T array with T >= 1")
        object.__setattr__(self, "data", data)

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def nnz_per_column(self) -> np.ndarray:
        return np.count_nonzero(self.data, axis=0)


def _atoms(codebook) -> np.ndarray:
    """Accept either a Codebook or a raw d x k array."""
    atoms = getattr(codebook, "atoms", codebook)
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim != 2:
        raise ValueError("codebook atoms must be a d x k matrix")
    return atoms


def soft_threshold(x: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


class LassoWorkspace:
    """Cached Cholesky factorization of (D^T D + rho I) for one codebook."""

    def __init__(self, codebook, rho: float = 1.0):
        self.atoms = _atoms(codebook)
        self.rho = float(rho)
        k = self.atoms.shape[1]
        gram = self.atoms.T @ self.atoms + self.rho * np.eye(k)
        self.factor = cho_factor(gram)

    @property
    def k(self) -> int:
        return self.atoms.shape[1]


def admm_lasso(
    codebook,
    X: np.ndarray,
    lam: float,
    settings: AdmmSettings = AdmmSettings(),
    workspace: LassoWorkspace | None = None,
):
    """Solve min 0.5||x - Dc||^2 + lam||c||_1 for every column of X.

    Standard scaled-form ADMM with combined absolute/relative stopping.
    Columns are frozen the moment their own residuals pass the test, so
    batch results match per-frame solves. Returns (codes, converged mask,
    iteration counts).
    """
    if workspace is None or workspace.rho != settings.rho:
        workspace = LassoWorkspace(codebook, settings.rho)
    atoms, rho = workspace.atoms, settings.rho
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != atoms.shape[0]:
        raise DataError(f"frame dim {X.shape[0]} != codebook dim {atoms.shape[0]}")
    k, n_cols = atoms.shape[1], X.shape[1]

    DtX = atoms.T @ X
    C = np.zeros((k, n_cols))
    Z = np.zeros((k, n_cols))
    U = np.zeros((k, n_cols))
    out = np.zeros((k, n_cols))
    iterations = np.full(n_cols, settings.max_iter, dtype=int)
    converged = np.zeros(n_cols, dtype=bool)
    active = np.arange(n_cols)
    sqrt_k = math.sqrt(k)

    for it in range(1, settings.max_iter + 1):
        q = DtX[:, active] + rho * (Z[:, active] - U[:, active])
        c_new = cho_solve(workspace.factor, q)
        z_old = Z[:, active]
        z_new = soft_threshold(c_new + U[:, active], lam / rho)
        u_new = U[:, active] + c_new - z_new

        r_norm = np.linalg.norm(c_new - z_new, axis=0)
        s_norm = rho * np.linalg.norm(z_new - z_old, axis=0)
        eps_pri = sqrt_k * settings.abs_tol + settings.rel_tol * np.maximum(
            np.linalg.norm(c_new, axis=0), np.linalg.norm(z_new, axis=0)
        )
        eps_dual = sqrt_k * settings.abs_tol + settings.rel_tol * rho * np.linalg.norm(
            u_new, axis=0
        )

        C[:, active], Z[:, active], U[:, active] = c_new, z_new, u_new
        done = (r_norm <= eps_pri) & (s_norm <= eps_dual)
        if np.any(done):
            done_cols = active[done]
            out[:, done_cols] = z_new[:, done]
            iterations[done_cols] = it
            converged[done_cols] = True
            active = active[~done]
        if active.size == 0:
            break

    if active.size:  # best iterate for the stragglers
        out[:, active] = Z[:, active]
    return out, converged, iterations


def lasso_encode(
    codebook,
    x: np.ndarray,
    lam: float,
    settings: AdmmSettings = AdmmSettings(),
    workspace: LassoWorkspace | None = None,
) -> np.ndarray:
    """LASSO code of a single frame (see admm_lasso)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    codes, converged, _ = admm_lasso(codebook, x, lam, settings, workspace)
    if not converged[0]:
        logger.warning("lasso_encode: no convergence in %d iterations", settings.max_iter)
    return codes[:, 0]


def lasso_objective(codebook, x: np.ndarray, c: np.ndarray, lam: float) -> float:
    atoms = _atoms(codebook)
    residual = np.asarray(x, dtype=np.float64) - atoms @ np.asarray(c, dtype=np.float64)
    return 0.5 * float(residual @ residual) + lam * float(np.abs(c).sum())


def _vq_codes_from_sqdist(sq_dist: np.ndarray, tau: int) -> np.ndarray:
    """Select the tau nearest atoms per column, ties to the lowest index.

    Linear-time selection: partition for the tau-th smallest value, take
    everything strictly below it, and fill the remainder from the tied
    values in index order.
    """
    k, n_cols = sq_dist.shape
    codes = np.zeros_like(sq_dist)
    if tau == k:
        codes[:] = 1.0 / tau
        return codes
    boundary = np.partition(sq_dist, tau - 1, axis=0)[tau - 1]
    below = sq_dist < boundary
    tied = sq_dist == boundary
    n_below = below.sum(axis=0)
    # Among tied entries, the lowest indices win; cumulative count per
    # column turns that rule into a vectorized mask.
    tie_rank = np.cumsum(tied, axis=0)
    take_tied = tied & (tie_rank <= (tau - n_below))
    codes[below | take_tied] = 1.0 / tau
    return codes


def _squared_distances(atoms: np.ndarray, X: np.ndarray) -> np.ndarray:
    col_norms = np.sum(atoms * atoms, axis=0)
    return col_norms[:, None] - 2.0 * (atoms.T @ X) + np.sum(X * X, axis=0)


def vq_encode(codebook, x: np.ndarray, tau: int) -> np.ndarray:
    """Top-tau VQ code: 1/tau at the tau nearest atoms (Euclidean), 0 elsewhere.

    Distance ties are broken toward the lower atom index.
    """
    atoms = _atoms(codebook)
    k = atoms.shape[1]
    if not 1 <= tau <= k:
        raise ValueError(f"tau={tau} out of range 1..{k}")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return _vq_codes_from_sqdist(_squared_distances(atoms, x), int(tau))[:, 0]


def cs_encode(codebook, x: np.ndarray, theta: float) -> np.ndarray:
    """Shrunk cosine similarities: shrink(<x, D_j> / ||x||, theta).

    A zero frame encodes to the zero vector.
    """
    atoms = _atoms(codebook)
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return np.zeros(atoms.shape[1])
    return soft_threshold((x @ atoms) / norm, theta)


def encode_song(
    codebook,
    frames: np.ndarray,
    cfg: EncoderConfig,
    settings: AdmmSettings = AdmmSettings(),
    workspace: LassoWorkspace | None = None,
    song_id: str = "",
) -> CodeMatrix:
    """Encode every frame column of a song with the configured encoder."""
    X = getattr(frames, "data", frames)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    atoms = _atoms(codebook)
    if X.shape[0] != atoms.shape[0]:
        raise DataError(f"feature dim {X.shape[0]} != codebook dim {atoms.shape[0]}")
    song_id = song_id or getattr(frames, "song_id", "")
    converged = True

    if cfg.method == EncoderMethod.LASSO:
        codes, conv, _ = admm_lasso(codebook, X, cfg.param, settings, workspace)
        if not np.all(conv):
            bad = np.flatnonzero(~conv)
            logger.warning(
                "song %s: lasso did not converge on %d/%d frames (first frame %d)",
                song_id, bad.size, X.shape[1], bad[0],
            )
            converged = False
    elif cfg.method == EncoderMethod.VQ:
        tau = int(cfg.param)
        if tau > atoms.shape[1]:
            raise ValueError(f"tau={tau} exceeds codebook size {atoms.shape[1]}")
        codes = _vq_codes_from_sqdist(_squared_distances(atoms, X), tau)
    else:
        norms = np.linalg.norm(X, axis=0)
        zero_frames = norms == 0.0
        if np.any(zero_frames):
            logger.warning("song %s: %d zero frames encoded as zero codes",
                           song_id, int(zero_frames.sum()))
        safe = np.where(zero_frames, 1.0, norms)
        codes = soft_threshold((atoms.T @ X) / safe, cfg.param)
        codes[:, zero_frames] = 0.0

    return CodeMatrix(data=codes, method=cfg.method, param=cfg.param,
                      song_id=song_id, converged=converged)
