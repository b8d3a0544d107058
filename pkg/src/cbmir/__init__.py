"""Codebook-based audio representations for music retrieval.

Pipeline: short-time mel features -> codebook encoding (LASSO / top-tau
VQ / cosine similarity) -> temporal pooling, with query-by-tag and
query-by-example retrieval harnesses and an encoder runtime benchmark.
"""

from .dictionary import Codebook, dict_train, kmeans_init
from .encoders import (AdmmSettings, CodeMatrix, EncoderConfig, EncoderMethod,
                       cs_encode, encode_song, lasso_encode, vq_encode)
from .features import (FeatureExtractor, FeatureKind, FrameMatrix,
                       MelFilterbank, PcaProjector, Standardizer, add_deltas,
                       apply_standardizer, fit_pca, fit_standardizer,
                       make_mel_filterbank, mel_spectrum, mfcc, pca_project)
from .ingest import AudioClip, FrameWindow, WindowKind, frame_stream, load_audio, resample
from .pooling import PoolingKind, SongVector, max_abs_pool, mean_pool, pool_song, ppk_transform
from .retrieval import (Metric, QbeConfig, QbtConfig, RankScores, RelevanceData,
                        SemanticMultinomial, TagHyper, TagModel,
                        mahalanobis_distance, predict_tag, qbe_evaluate,
                        qbt_evaluate, rank_metrics, smn_normalize,
                        train_metric, train_tag_model)

__version__ = "0.1.0"
