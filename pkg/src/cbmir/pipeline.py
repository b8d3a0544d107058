"""End-to-end pipeline stages driven by a PipelineConfig.

Each stage communicates with its neighbors only through the documented
on-disk artifacts and refuses inputs whose recorded lineage does not
match the active configuration.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from .bench import (BenchReport, bench_encoding, make_bench_corpus,
                    write_report_csv, write_report_gnuplot)
from .config import PipelineConfig
from .corpus import generate_corpus, load_manifest
from .dictionary import Codebook, dict_train
from .encoders import AdmmSettings, EncoderConfig, EncoderMethod, LassoWorkspace, encode_song
from .errors import ConfigError, DataError
from .features import (FeatureExtractor, FeatureKind, apply_standardizer,
                       fit_pca, fit_standardizer, N_MFCC)
from .formats import (read_annotations, read_codebook, read_codes, read_folds,
                      read_frames, read_pca, read_qbe_splits,
                      read_relevance_pairs, read_standardizer, read_vectors,
                      verify_lineage, write_codebook, write_codes,
                      write_csv_rows, write_frames, write_pca,
                      write_standardizer, write_vectors, export_vectors_csv)
from .ingest import AudioClip, load_audio, resample
from .pooling import pool_song
from .retrieval import (QbtResult, QbeResult, RelevanceData, qbe_evaluate,
                        qbt_evaluate, scramble_relevance, scramble_song_labels)

logger = logging.getLogger(__name__)

_FITTED_KINDS = (FeatureKind.MFCC_D, FeatureKind.MFS_D, FeatureKind.MFS_D_PC)


def _load_clip(path, song_id: str) -> AudioClip:
    clip = resample(load_audio(path))
    return AudioClip(samples=clip.samples, sample_rate=clip.sample_rate,
                     source_id=song_id)


def _standardizer_path(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "standardizer.cbst"


def _pca_path(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "pca.cbpc"


def stage_synth(cfg: PipelineConfig) -> dict:
    logger.info("synthesizing corpus into %s", cfg.corpus_dir)
    return generate_corpus(cfg.corpus, cfg.corpus_dir,
                           lineage=cfg.lineage("corpus"))


def _verified_manifest(cfg: PipelineConfig) -> dict:
    manifest = load_manifest(cfg.corpus_dir)
    verify_lineage(manifest, cfg.lineage("corpus"), cfg.corpus_dir)
    return manifest


def _dicttrain_raw_pool(cfg: PipelineConfig, manifest: dict,
                        extractor: FeatureExtractor) -> np.ndarray:
    parts = []
    for song_id in manifest["dicttrain_ids"]:
        clip = _load_clip(Path(cfg.corpus_dir) / "dicttrain" / f"{song_id}.wav",
                          song_id)
        parts.append(extractor.raw_frames(clip))
    return np.concatenate(parts, axis=1)


def _fit_extractor(cfg: PipelineConfig, manifest: dict,
                   persist: bool = True) -> FeatureExtractor:
    extractor = FeatureExtractor(kind=cfg.feature_kind)
    if cfg.feature_kind not in _FITTED_KINDS:
        return extractor
    pool = _dicttrain_raw_pool(cfg, manifest, extractor)
    standardizer = fit_standardizer(pool)
    pca = None
    if cfg.feature_kind == FeatureKind.MFS_D_PC:
        pca = fit_pca(apply_standardizer(standardizer, pool), 3 * N_MFCC)
    if persist:
        meta = cfg.lineage_meta("features")
        write_standardizer(_standardizer_path(cfg), standardizer, meta)
        if pca is not None:
            write_pca(_pca_path(cfg), pca, meta)
    return dataclasses.replace(extractor, standardizer=standardizer, pca=pca)


def _load_extractor(cfg: PipelineConfig) -> FeatureExtractor:
    extractor = FeatureExtractor(kind=cfg.feature_kind)
    if cfg.feature_kind not in _FITTED_KINDS:
        return extractor
    standardizer, meta = read_standardizer(_standardizer_path(cfg))
    verify_lineage(meta, cfg.lineage("features"), _standardizer_path(cfg))
    pca = None
    if cfg.feature_kind == FeatureKind.MFS_D_PC:
        pca, pca_meta = read_pca(_pca_path(cfg))
        verify_lineage(pca_meta, cfg.lineage("features"), _pca_path(cfg))
    return dataclasses.replace(extractor, standardizer=standardizer, pca=pca)


def stage_features(cfg: PipelineConfig) -> dict:
    manifest = _verified_manifest(cfg)
    extractor = _fit_extractor(cfg, manifest)
    meta = cfg.lineage_meta("features")
    out = {}
    for song_id in manifest["song_ids"]:
        clip = _load_clip(Path(cfg.corpus_dir) / "audio" / f"{song_id}.wav", song_id)
        frames = extractor.extract(clip)
        write_frames(cfg.features_dir() / f"{song_id}.cbmf", frames, meta)
        out[song_id] = frames
    logger.info("extracted %s features for %d songs", cfg.feature_kind.value, len(out))
    return out


def stage_train_dict(cfg: PipelineConfig) -> Codebook:
    manifest = _verified_manifest(cfg)
    extractor = _load_extractor(cfg)
    parts = []
    for song_id in manifest["dicttrain_ids"]:
        clip = _load_clip(Path(cfg.corpus_dir) / "dicttrain" / f"{song_id}.wav",
                          song_id)
        parts.append(extractor.extract(clip).data)
    pool = np.concatenate(parts, axis=1)

    seed = cfg.stage_seed("dictionary")
    rng = np.random.default_rng(seed)
    n_heldout = min(512, pool.shape[1] // 10)
    heldout_idx = rng.choice(pool.shape[1], size=n_heldout, replace=False)
    mask = np.zeros(pool.shape[1], dtype=bool)
    mask[heldout_idx] = True

    codebook = dict_train(
        pool[:, ~mask], cfg.k,
        EncoderConfig(cfg.dict_method, cfg.dict_param),
        epochs=cfg.dict_epochs, seed=seed, batch_size=cfg.dict_batch,
        heldout=pool[:, mask],
    )
    write_codebook(cfg.codebook_path(), codebook, cfg.lineage_meta("dictionary"))
    logger.info("trained %s codebook k=%d on %d vectors",
                cfg.dict_method.value, cfg.k, pool.shape[1] - n_heldout)
    return codebook


def stage_encode(cfg: PipelineConfig) -> dict:
    if cfg.no_encoding:
        raise ConfigError("encoding disabled (method none); pool reads features directly")
    manifest = _verified_manifest(cfg)
    codebook, cb_meta = read_codebook(cfg.codebook_path())
    verify_lineage(cb_meta, cfg.lineage("dictionary"), cfg.codebook_path())
    settings = AdmmSettings()
    workspace = (LassoWorkspace(codebook, settings.rho)
                 if cfg.encoder.method == EncoderMethod.LASSO else None)
    meta = cfg.lineage_meta("encode")
    feature_lineage = cfg.lineage("features")
    out = {}
    for song_id in manifest["song_ids"]:
        frames_path = cfg.features_dir() / f"{song_id}.cbmf"
        frames, fmeta = read_frames(frames_path)
        verify_lineage(fmeta, feature_lineage, frames_path)
        codes = encode_song(codebook, frames, cfg.encoder, settings, workspace)
        write_codes(cfg.codes_dir() / f"{song_id}.cbcm", codes, meta)
        out[song_id] = codes
    logger.info("encoded %d songs with %s", len(out), cfg.encoder.label())
    return out


def stage_pool(cfg: PipelineConfig) -> dict:
    manifest = _verified_manifest(cfg)
    meta = cfg.lineage_meta("pool")
    meta["representation_id"] = cfg.representation_id()
    table = {}
    if cfg.no_encoding:
        expected = cfg.lineage("features")
        for song_id in manifest["song_ids"]:
            path = cfg.features_dir() / f"{song_id}.cbmf"
            frames, fmeta = read_frames(path)
            verify_lineage(fmeta, expected, path)
            table[song_id] = pool_song(frames, cfg.pooling, ppk=False,
                                       song_id=song_id)
    else:
        expected = cfg.lineage("encode")
        for song_id in manifest["song_ids"]:
            path = cfg.codes_dir() / f"{song_id}.cbcm"
            codes, cmeta = read_codes(path)
            verify_lineage(cmeta, expected, path)
            table[song_id] = pool_song(codes, cfg.pooling, ppk=cfg.ppk,
                                       song_id=song_id)
    write_vectors(cfg.vectors_path(), table, cfg.pooling, cfg.ppk, meta)
    export_vectors_csv(cfg.work_dir / "vectors.csv", table)
    logger.info("pooled %d songs (%s)", len(table), cfg.representation_id())
    return table


def _load_vectors(cfg: PipelineConfig) -> dict:
    table, meta = read_vectors(cfg.vectors_path())
    verify_lineage(meta, cfg.lineage("pool"), cfg.vectors_path())
    return {song_id: sv.values for song_id, sv in table.items()}


def stage_qbt(cfg: PipelineConfig) -> QbtResult:
    manifest = _verified_manifest(cfg)
    vectors = _load_vectors(cfg)
    annotations = read_annotations(Path(cfg.corpus_dir) / "annotations.csv")
    folds = read_folds(Path(cfg.corpus_dir) / "folds.csv")
    if cfg.qbt_scramble_seed is not None:
        logger.info("scrambling tag labels (seed %d)", cfg.qbt_scramble_seed)
        annotations = scramble_song_labels(annotations, vectors.keys(),
                                           cfg.qbt_scramble_seed, groups=folds)
    result = qbt_evaluate(vectors, annotations, folds, cfg.qbt_config(),
                          artists=manifest["artists"])

    rep = cfg.representation_id()
    rows = []
    for fold, auc, p10, ap in result.fold_means:
        rows += [(rep, "auc", fold, repr(auc)), (rep, "p_at_10", fold, repr(p10)),
                 (rep, "ap", fold, repr(ap))]
    rows += [(rep, "auc", "all", repr(result.auc)),
             (rep, "p_at_10", "all", repr(result.p_at_10)),
             (rep, "map", "all", repr(result.map))]
    write_csv_rows(cfg.reports_dir() / "qbt.csv",
                   ["representation_id", "measure", "fold", "value"], rows)
    write_csv_rows(cfg.reports_dir() / "qbt_per_tag.csv",
                   ["fold", "tag", "auc", "p_at_10", "ap"],
                   [(f, t, repr(a), repr(p), repr(ap_)) for f, t, a, p, ap_ in result.rows])
    logger.info("qbt: auc=%.4f p@10=%.4f map=%.4f", result.auc, result.p_at_10,
                result.map)
    return result


def _load_relevance(cfg: PipelineConfig) -> RelevanceData:
    relevant = read_relevance_pairs(Path(cfg.corpus_dir) / "relevance.csv")
    splits = read_qbe_splits(Path(cfg.corpus_dir) / "qbe_splits.csv")
    return RelevanceData(relevant=relevant, splits=tuple(splits))


def stage_qbe(cfg: PipelineConfig) -> QbeResult:
    _verified_manifest(cfg)
    vectors = _load_vectors(cfg)
    relevance = _load_relevance(cfg)
    if cfg.qbe_scramble_seed is not None:
        logger.info("scrambling relevance labels (seed %d)", cfg.qbe_scramble_seed)
        relevance = scramble_relevance(relevance, cfg.qbe_scramble_seed)
    result = qbe_evaluate(vectors, relevance, cfg.qbe_config(),
                          identity_metric=cfg.qbe_identity_metric)

    rep = cfg.representation_id()
    rows = [(rep, "auc", i, repr(a)) for i, a in enumerate(result.split_aucs)]
    rows.append((rep, "auc", "all", repr(result.auc)))
    write_csv_rows(cfg.reports_dir() / "qbe.csv",
                   ["representation_id", "measure", "fold", "value"], rows)
    logger.info("qbe: auc=%.4f over %d splits", result.auc, len(result.split_aucs))
    return result


def stage_bench(cfg: PipelineConfig) -> BenchReport:
    seed = cfg.stage_seed("bench")
    corpus = make_bench_corpus(cfg.bench.n_songs, cfg.bench.n_frames,
                               d=3 * N_MFCC, seed=seed)
    configs = (EncoderConfig(EncoderMethod.CS, cfg.bench.cs_theta),
               EncoderConfig(EncoderMethod.VQ, cfg.bench.vq_tau),
               EncoderConfig(EncoderMethod.LASSO, cfg.bench.lasso_lambda))
    report = bench_encoding(corpus, k_grid=cfg.bench.k_grid, configs=configs,
                            repetitions=cfg.bench.repetitions, seed=seed)
    write_report_csv(report, cfg.reports_dir() / "bench.csv")
    write_report_gnuplot(report, cfg.reports_dir() / "bench.dat")
    for row in report.rows:
        logger.info("bench %s k=%d: %.4gs +- %.2gs", row.method, row.k,
                    row.mean_seconds, row.std_seconds)
    return report


def run_representation(cfg: PipelineConfig) -> dict:
    """features -> (train-dict -> encode) -> pool, returning the vector table.

    An existing codebook artifact is reused when its lineage matches the
    configuration, so several encoder settings can share one dictionary.
    """
    stage_features(cfg)
    if not cfg.no_encoding:
        retrain = True
        if cfg.codebook_path().exists():
            try:
                _, meta = read_codebook(cfg.codebook_path())
                verify_lineage(meta, cfg.lineage("dictionary"), cfg.codebook_path())
                retrain = False
            except DataError:
                retrain = True
        if retrain:
            stage_train_dict(cfg)
        stage_encode(cfg)
    return stage_pool(cfg)
