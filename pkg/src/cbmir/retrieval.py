"""Query-by-tag and query-by-example retrieval over pooled song vectors.

Query-by-tag trains one class-weighted L2-regularized logistic regression
per tag, normalizes per-song tag likelihoods into a semantic multinomial,
and scores tag rankings with AUC / P@10 / AP. Query-by-example ranks
repository songs by Mahalanobis distance under a learned PSD metric on
PCA-reduced vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .errors import DataError, NumericalError
from .features import PcaProjector, fit_pca, pca_project

logger = logging.getLogger(__name__)

HYPER_GRID = (0.1, 1.0, 10.0, 100.0)
SLACK_GRID = tuple(10.0 ** e for e in range(-2, 9))


# ---------------------------------------------------------------------------
# Tag models


@dataclass(frozen=True)
class TagHyper:
    reg_weight: float = 1.0
    fn_weight: float = 1.0
    fp_weight: float = 1.0


@dataclass(frozen=True)
class TagModel:
    tag: str
    weights: np.ndarray
    bias: float
    hyper: TagHyper = TagHyper()

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if not (np.all(np.isfinite(weights)) and np.isfinite(self.bias)):
            raise NumericalError(f"tag model {self.tag!r} has non-finite parameters")
        object.__setattr__(self, "weights", weights)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logistic_loss_grad(params, X, y, omega, reg):
    w, b = params[:-1], params[-1]
    z = X @ w + b
    yz = y * z
    loss = float(np.sum(omega * np.logaddexp(0.0, -yz)) + 0.5 * reg * (w @ w))
    coef = -omega * y * _sigmoid(-yz)
    grad_w = X.T @ coef + reg * w
    grad_b = float(np.sum(coef))
    return loss, np.concatenate([grad_w, [grad_b]])


def train_tag_model(positives, negatives, hyper: TagHyper = TagHyper(),
                    tag: str = "") -> TagModel:
    """Fit w, b minimizing sum_i omega_i log(1+exp(-y_i (w.x_i + b))) + reg/2 ||w||^2.

    omega is fn_weight on positives, fp_weight on negatives. L-BFGS followed
    by damped Newton polishing drives the gradient norm below 1e-5.
    """
    P = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    N = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if P.shape[0] == 0 or N.shape[0] == 0:
        raise DataError("need at least one example per class")
    X = np.vstack([P, N])
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values in tag training data")
    y = np.concatenate([np.ones(P.shape[0]), -np.ones(N.shape[0])])
    omega = np.where(y > 0, hyper.fn_weight, hyper.fp_weight)

    x0 = np.zeros(X.shape[1] + 1)
    res = minimize(
        _logistic_loss_grad, x0, args=(X, y, omega, hyper.reg_weight),
        method="L-BFGS-B", jac=True,
        options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-8},
    )
    params = res.x

    # Newton polish: the Hessian is cheap at song-vector dimensions.
    for _ in range(25):
        loss, grad = _logistic_loss_grad(params, X, y, omega, hyper.reg_weight)
        if np.linalg.norm(grad) <= 1e-6:
            break
        w, b = params[:-1], params[-1]
        z = X @ w + b
        s = _sigmoid(y * z)
        diag = omega * s * (1.0 - s)
        Xb = np.hstack([X, np.ones((X.shape[0], 1))])
        hess = (Xb * diag[:, None]).T @ Xb
        hess[:-1, :-1] += hyper.reg_weight * np.eye(X.shape[1])
        hess += 1e-12 * np.eye(hess.shape[0])
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(30):
            trial = params - scale * step
            new_loss, _ = _logistic_loss_grad(trial, X, y, omega, hyper.reg_weight)
            if new_loss <= loss:
                params = trial
                break
            scale *= 0.5
        else:
            break

    grad_norm = np.linalg.norm(_logistic_loss_grad(params, X, y, omega,
                                                   hyper.reg_weight)[1])
    if grad_norm > 1e-5:
        logger.warning("tag %r: optimizer stalled at gradient norm %.2e", tag, grad_norm)
    return TagModel(tag=tag, weights=params[:-1], bias=float(params[-1]), hyper=hyper)


def predict_tag(model: TagModel, v: np.ndarray) -> float:
    """P(tag | song vector), strictly inside (0, 1)."""
    v = np.asarray(v, dtype=np.float64)
    p = float(_sigmoid(np.atleast_1d(model.weights @ v + model.bias))[0])
    return float(np.clip(p, 1e-300, np.nextafter(1.0, 0.0)))


@dataclass(frozen=True)
class SemanticMultinomial:
    song_id: str
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if abs(probs.sum() - 1.0) > 1e-8:
            raise ValueError("SMN probabilities must sum to 1")
        object.__setattr__(self, "probs", probs)


def smn_normalize(likelihoods, song_id: str = "") -> SemanticMultinomial:
    """Normalize non-negative per-tag likelihoods into a categorical distribution."""
    lik = np.asarray(likelihoods, dtype=np.float64)
    if np.any(lik < 0):
        raise ValueError("likelihoods must be non-negative")
    total = lik.sum()
    if total <= 0:
        raise ValueError("cannot normalize an all-zero likelihood vector")
    return SemanticMultinomial(song_id=song_id, probs=lik / total)


# ---------------------------------------------------------------------------
# Ranking metrics


@dataclass(frozen=True)
class RankScores:
    auc: float | None
    p_at_10: float
    ap: float


def ranking_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Concordant-pair AUC; tied scores count one half (Mann-Whitney form)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rank_metrics(ranked_labels, scores=None) -> RankScores:
    """Ranking quality of a best-first binary relevance list.

    AUC is None for single-class lists; pass the underlying scores to give
    tied scores half credit in the AUC.
    """
    labels = np.asarray(ranked_labels, dtype=bool).ravel()
    if labels.size == 0:
        raise DataError("empty ranking")
    n_pos = int(labels.sum())

    top = labels[:10]
    p_at_10 = float(top.sum() / min(10, labels.size))

    if n_pos == 0:
        ap = 0.0
    else:
        hits = np.flatnonzero(labels)
        ap = float(np.mean((np.arange(n_pos) + 1) / (hits + 1)))

    if n_pos == 0 or n_pos == labels.size:
        return RankScores(auc=None, p_at_10=p_at_10, ap=ap)
    if scores is None:
        scores = -np.arange(labels.size, dtype=np.float64)
    return RankScores(auc=ranking_auc(labels, scores), p_at_10=p_at_10, ap=ap)


def rank_by_score(ids, scores) -> np.ndarray:
    """Indices ordering ids by descending score, ties broken by ascending id."""
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((ids, -scores))


# ---------------------------------------------------------------------------
# Query-by-tag harness


@dataclass(frozen=True)
class QbtConfig:
    reg_grid: tuple = HYPER_GRID
    fn_grid: tuple = (1.0,)
    fp_grid: tuple = (1.0,)
    inner_folds: int = 3
    seed: int = 0


@dataclass(frozen=True)
class QbtResult:
    rows: tuple  # (fold, tag, auc, p_at_10, ap)
    fold_means: tuple  # (fold, auc, p_at_10, ap)
    auc: float
    p_at_10: float
    map: float


def _hyper_combos(config: QbtConfig):
    return [TagHyper(r, fn, fp) for r in config.reg_grid
            for fn in config.fn_grid for fp in config.fp_grid]


def _select_hyper(X, y, combos, inner_folds, rng):
    """Internal cross-validation maximizing AUC; first grid entry wins ties."""
    if len(combos) == 1:
        return combos[0]
    n = X.shape[0]
    assignment = rng.permutation(n) % inner_folds
    best, best_auc = combos[0], -np.inf
    for hyper in combos:
        aucs = []
        for f in range(inner_folds):
            val = assignment == f
            if len(np.unique(y[~val])) < 2 or len(np.unique(y[val])) < 2:
                continue
            model = train_tag_model(X[~val][y[~val] > 0], X[~val][y[~val] < 0], hyper)
            scores = X[val] @ model.weights + model.bias
            aucs.append(ranking_auc(y[val] > 0, scores))
        mean_auc = float(np.mean(aucs)) if aucs else -np.inf
        if mean_auc > best_auc:
            best, best_auc = hyper, mean_auc
    return best


def verify_artist_disjoint(folds, artists):
    """Raise when any artist has songs on both sides of some fold."""
    by_fold: dict[int, set] = {}
    for song_id, fold in folds.items():
        by_fold.setdefault(fold, set()).add(artists[song_id])
    for fold, fold_artists in by_fold.items():
        others = set().union(*(a for f, a in by_fold.items() if f != fold)) if len(by_fold) > 1 else set()
        overlap = fold_artists & others
        if overlap:
            raise DataError(f"artists straddle fold {fold}: {sorted(overlap)[:5]}")


def qbt_evaluate(vectors, annotations, folds, config: QbtConfig = QbtConfig(),
                 artists=None) -> QbtResult:
    """Cross-validated query-by-tag evaluation.

    vectors: song_id -> k-vector; annotations: tag -> set of song ids;
    folds: song_id -> fold index. Tags without test positives (or without
    both classes in the training side) are excluded from that fold's
    average.
    """
    if artists is not None:
        verify_artist_disjoint(folds, artists)
    tag_names = sorted(annotations)
    fold_ids = sorted(set(folds.values()))
    combos = _hyper_combos(config)
    rows = []
    fold_means = []

    for fold in fold_ids:
        test_ids = sorted(s for s, f in folds.items() if f == fold)
        train_ids = sorted(s for s, f in folds.items() if f != fold)
        X_train = np.array([vectors[s] for s in train_ids])
        X_test = np.array([vectors[s] for s in test_ids])
        rng = np.random.default_rng(config.seed * 1009 + fold)

        likelihoods = np.zeros((len(tag_names), len(test_ids)))
        usable = []
        for ti, tag in enumerate(tag_names):
            members = annotations[tag]
            y = np.array([1.0 if s in members else -1.0 for s in train_ids])
            if not ((y > 0).any() and (y < 0).any()):
                logger.info("fold %s: tag %r skipped (single training class)", fold, tag)
                continue
            hyper = _select_hyper(X_train, y, combos, config.inner_folds, rng)
            model = train_tag_model(X_train[y > 0], X_train[y < 0], hyper, tag=tag)
            likelihoods[ti] = [predict_tag(model, v) for v in X_test]
            usable.append(ti)

        if not usable:
            logger.info("fold %s: no usable tags", fold)
            continue
        smn = likelihoods / likelihoods.sum(axis=0, keepdims=True)
        ids_arr = np.array(test_ids)
        fold_rows = []
        for ti in usable:
            tag = tag_names[ti]
            labels_by_id = np.array([s in annotations[tag] for s in test_ids])
            if not labels_by_id.any():
                logger.info("fold %s: tag %r has no test positives", fold, tag)
                continue
            order = rank_by_score(ids_arr, smn[ti])
            scores = rank_metrics(labels_by_id[order], smn[ti][order])
            if scores.auc is None:
                logger.info("fold %s: tag %r AUC undefined", fold, tag)
                continue
            fold_rows.append((fold, tag, scores.auc, scores.p_at_10, scores.ap))
        rows.extend(fold_rows)
        if fold_rows:
            arr = np.array([r[2:] for r in fold_rows], dtype=np.float64)
            fold_means.append((fold, *arr.mean(axis=0)))

    if not fold_means:
        raise DataError("no tag was evaluable in any fold")
    summary = np.array([m[1:] for m in fold_means], dtype=np.float64).mean(axis=0)
    return QbtResult(rows=tuple(rows), fold_means=tuple(fold_means),
                     auc=float(summary[0]), p_at_10=float(summary[1]),
                     map=float(summary[2]))


def scramble_song_labels(annotations, song_ids, seed: int, groups=None):
    """Permute which songs carry which labels (chance-level control).

    With `groups` (song_id -> group, e.g. the evaluation folds) the
    permutation stays within each group, so no accidental label/cluster
    alignment can be learned on one side of a split and cashed in on the
    other; the control then sits at AUC 0.5 by symmetry even on small
    corpora.
    """
    song_ids = sorted(song_ids)
    rng = np.random.default_rng(seed)
    mapping = {}
    if groups is None:
        blocks = [song_ids]
    else:
        by_group: dict = {}
        for s in song_ids:
            by_group.setdefault(groups[s], []).append(s)
        blocks = [by_group[g] for g in sorted(by_group)]
    for block in blocks:
        mapping.update(zip(block, (block[i] for i in rng.permutation(len(block)))))
    return {tag: {mapping[s] for s in members if s in mapping}
            for tag, members in annotations.items()}


# ---------------------------------------------------------------------------
# Query-by-example


@dataclass(frozen=True)
class Metric:
    """PSD matrix over PCA-reduced song vectors."""

    W: np.ndarray
    reducer: PcaProjector

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if not np.allclose(W, W.T, atol=1e-8):
            raise NumericalError("metric matrix is not symmetric")
        eigvals = np.linalg.eigvalsh(W)
        if eigvals.min() < -1e-8:
            raise NumericalError(f"metric matrix has negative eigenvalue {eigvals.min():.2e}")
        object.__setattr__(self, "W", W)

    @property
    def dim(self) -> int:
        return self.W.shape[0]


def mahalanobis_distance(W: np.ndarray, q: np.ndarray, r: np.ndarray) -> float:
    """sqrt((q-r)^T W (q-r)); raises if the quadratic form is negative."""
    delta = np.asarray(q, dtype=np.float64) - np.asarray(r, dtype=np.float64)
    val = float(delta @ (np.asarray(W, dtype=np.float64) @ delta))
    if val < -1e-8:
        raise NumericalError(f"PSD violation: quadratic form is {val:.2e}")
    return float(np.sqrt(max(val, 0.0)))


def _sq_distances_to(W: np.ndarray, query: np.ndarray, others: np.ndarray) -> np.ndarray:
    diffs = others - query
    return np.einsum("ij,jk,ik->i", diffs, W, diffs)


@dataclass(frozen=True)
class QbeSplit:
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class RelevanceData:
    """Symmetric binary song-song relevance plus train/val/test splits."""

    relevant: dict  # song_id -> frozenset of relevant song ids
    splits: tuple = ()


@dataclass(frozen=True)
class MetricTrainConfig:
    step_grid: tuple = (0.0,) + SLACK_GRID
    n_steps: int = 100
    triplets_per_step: int = 256
    margin: float = 1.0
    seed: int = 0


def _pgd_metric(reduced: np.ndarray, rel_sets: list, step: float,
                config: MetricTrainConfig, rng) -> np.ndarray:
    """Projected gradient descent on the pairwise hinge ranking loss."""
    n, m = reduced.shape
    W = np.eye(m)
    if step == 0.0 or config.n_steps == 0:
        return W
    rel_lists = [sorted(s) for s in rel_sets]
    irrel = [sorted(set(range(n)) - rel_sets[i] - {i}) for i in range(n)]
    queries = [i for i in range(n) if rel_lists[i] and irrel[i]]
    if not queries:
        raise DataError("no query has both relevant and irrelevant training songs")

    for _ in range(config.n_steps):
        qs = rng.choice(queries, size=config.triplets_per_step)
        pos = np.array([rel_lists[q][rng.integers(len(rel_lists[q]))] for q in qs])
        neg = np.array([irrel[q][rng.integers(len(irrel[q]))] for q in qs])
        dp = reduced[pos] - reduced[qs]
        dn = reduced[neg] - reduced[qs]
        viol = (config.margin
                + np.einsum("ij,jk,ik->i", dp, W, dp)
                - np.einsum("ij,jk,ik->i", dn, W, dn)) > 0
        if not viol.any():
            continue
        grad = (dp[viol].T @ dp[viol] - dn[viol].T @ dn[viol]) / viol.sum()
        W = W - step * grad
        eigvals, eigvecs = np.linalg.eigh((W + W.T) / 2.0)
        eigvals = np.clip(eigvals, 0.0, None)
        W = (eigvecs * eigvals) @ eigvecs.T

    # Rankings are scale-invariant; unit spectral norm keeps the PSD
    # projection dust absolutely tiny and f32 persistence lossless-enough.
    W = (W + W.T) / 2.0
    top = float(np.linalg.eigvalsh(W).max())
    if top > 0:
        W = W / top
    return W


def _mean_query_auc(W, queries: np.ndarray, repository: np.ndarray,
                    rel_labels) -> float:
    """Mean over queries of the AUC of the induced repository ranking."""
    aucs = []
    for qi in range(queries.shape[0]):
        labels = rel_labels[qi]
        if not labels.any() or labels.all():
            continue
        scores = -_sq_distances_to(W, queries[qi], repository)
        aucs.append(ranking_auc(labels, scores))
    if not aucs:
        raise DataError("no evaluable query (each lacks a relevant repository song)")
    return float(np.mean(aucs))


def train_metric(train_vectors, relevance: RelevanceData,
                 config: MetricTrainConfig = MetricTrainConfig(),
                 val_vectors=None, reducer: PcaProjector | None = None) -> Metric:
    """Learn a PSD metric on reduced vectors via pairwise-hinge PGD.

    train_vectors / val_vectors: song_id -> reduced vector. The step size is
    selected on validation AUC over config.step_grid (first entry wins
    ties, so the identity is kept unless training clearly helps).
    """
    train_ids = sorted(train_vectors)
    X = np.array([train_vectors[s] for s in train_ids])
    index = {s: i for i, s in enumerate(train_ids)}
    rel_sets = [
        {index[r] for r in relevance.relevant.get(s, ()) if r in index}
        for s in train_ids
    ]
    if not any(rel_sets):
        raise DataError("no relevant pair inside the training set")
    if reducer is None:
        reducer = PcaProjector(projection=np.eye(X.shape[1]))

    steps = config.step_grid if val_vectors else config.step_grid[:1]
    candidates = []
    for step in steps:
        rng = np.random.default_rng(config.seed * 7919 + 1)
        candidates.append(_pgd_metric(X, rel_sets, step, config, rng))

    best_W = candidates[0]
    if val_vectors:
        val_ids = sorted(val_vectors)
        Q = np.array([val_vectors[s] for s in val_ids])
        labels = [
            np.array([t in relevance.relevant.get(q, ()) for t in train_ids])
            for q in val_ids
        ]
        best_auc = -np.inf
        for W in candidates:
            auc = _mean_query_auc(W, Q, X, labels)
            if auc > best_auc:
                best_auc, best_W = auc, W
    return Metric(W=best_W, reducer=reducer)


@dataclass(frozen=True)
class QbeConfig:
    reduce_dim_for_k: tuple = ((128, 64), (256, 96), (512, 128), (1024, 128))
    metric: MetricTrainConfig = field(default_factory=MetricTrainConfig)

    def reduce_dim(self, k: int) -> int:
        table = dict(self.reduce_dim_for_k)
        return table.get(k, min(128, max(2, k // 2)))


@dataclass(frozen=True)
class QbeResult:
    split_aucs: tuple
    auc: float


def qbe_evaluate(vectors, relevance: RelevanceData,
                 config: QbeConfig = QbeConfig(),
                 identity_metric: bool = False) -> QbeResult:
    """Mean test AUC over splits: each test song queries the train repository.

    Vectors are PCA-reduced per split (fit on that split's train set) to
    the k-dependent fixed dimension before metric learning and ranking.
    """
    if not relevance.splits:
        raise DataError("relevance data carries no splits")
    some_vec = next(iter(vectors.values()))
    m = config.reduce_dim(some_vec.shape[0])
    split_aucs = []

    for split in relevance.splits:
        train_ids = sorted(split.train)
        pool = np.array([vectors[s] for s in train_ids]).T
        reducer = fit_pca(pool, m)

        def project(ids):
            return {s: pca_project(reducer, vectors[s]) for s in ids}

        train_red = project(train_ids)
        if identity_metric:
            metric = Metric(W=np.eye(m), reducer=reducer)
        else:
            metric = train_metric(train_red, relevance, config.metric,
                                  val_vectors=project(sorted(split.val)),
                                  reducer=reducer)

        X = np.array([train_red[s] for s in train_ids])
        test_ids = sorted(split.test)
        Q = np.array([project(test_ids)[s] for s in test_ids])
        labels = [
            np.array([t in relevance.relevant.get(q, ()) for t in train_ids])
            for q in test_ids
        ]
        n_skipped = sum(1 for lab in labels if not lab.any())
        if n_skipped:
            logger.info("split: %d queries skipped (no relevant train song)", n_skipped)
        split_aucs.append(_mean_query_auc(metric.W, Q, X, labels))

    return QbeResult(split_aucs=tuple(split_aucs), auc=float(np.mean(split_aucs)))


def scramble_relevance(relevance: RelevanceData, seed: int) -> RelevanceData:
    """Relabel songs by a random permutation (chance-level control)."""
    ids = sorted(set(relevance.relevant)
                 | {r for v in relevance.relevant.values() for r in v})
    rng = np.random.default_rng(seed)
    mapping = dict(zip(ids, (ids[i] for i in rng.permutation(len(ids)))))
    scrambled = {
        mapping[s]: frozenset(mapping[r] for r in rel)
        for s, rel in relevance.relevant.items()
    }
    return RelevanceData(relevant=scrambled, splits=relevance.splits)
