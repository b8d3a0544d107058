"""Pipeline configuration: INI file + CLI overrides, lineage hashes, seeds.

Every stage's artifacts record a lineage hash chained from the root seed
through the parameters of every upstream stage, so stale artifacts are
refused instead of silently mixed. All randomness flows from one root
seed expanded per stage.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import CorpusConfig
from .encoders import EncoderConfig, EncoderMethod
from .errors import ConfigError
from .features import FEATURE_DIMS, FeatureKind
from .pooling import PoolingKind
from .retrieval import HYPER_GRID, SLACK_GRID, MetricTrainConfig, QbeConfig, QbtConfig

STAGE_IDS = {"corpus": 0, "features": 1, "dictionary": 2, "encode": 3,
             "pool": 4, "qbt": 5, "qbe": 6, "bench": 7}


@dataclass(frozen=True)
class BenchConfig:
    n_songs: int = 50
    n_frames: int = 3876
    k_grid: tuple = (128, 256, 512, 1024)
    repetitions: int = 1
    lasso_lambda: float = 1.0
    vq_tau: int = 4
    cs_theta: float = 0.4


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    feature_kind: FeatureKind = FeatureKind.MFS_D_PC
    k: int = 128
    dict_method: EncoderMethod = EncoderMethod.VQ
    dict_param: float = 1.0
    dict_epochs: int = 5
    dict_batch: int = 256
    encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(EncoderMethod.VQ, 8)
    )
    pooling: PoolingKind = PoolingKind.MEAN
    ppk: bool = False
    no_encoding: bool = False
    qbt_reg_grid: tuple = HYPER_GRID
    qbt_fn_grid: tuple = (1.0,)
    qbt_fp_grid: tuple = (1.0,)
    qbt_scramble_seed: int | None = None
    qbe_reduce_dims: tuple = ((128, 64), (256, 96), (512, 128), (1024, 128))
    qbe_step_grid: tuple = (0.0,) + SLACK_GRID
    qbe_steps: int = 100
    qbe_identity_metric: bool = False
    qbe_scramble_seed: int | None = None
    bench: BenchConfig = field(default_factory=BenchConfig)
    root_seed: int = 0
    corpus_dir: Path = Path("corpus")
    work_dir: Path = Path("work")

    def __post_init__(self):
        if self.encoder.method == EncoderMethod.VQ and self.encoder.param > self.k:
            raise ConfigError(f"tau={self.encoder.param:g} exceeds k={self.k}")
        if self.dict_method not in (EncoderMethod.VQ, EncoderMethod.LASSO):
            raise ConfigError("dictionary training encoder must be vq or lasso")
        if self.ppk and (self.pooling != PoolingKind.MEAN
                         or (not self.no_encoding
                             and self.encoder.method != EncoderMethod.VQ)):
            raise ConfigError("ppk applies to mean-pooled vq histograms only")

    # -- seeds ------------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        ss = np.random.SeedSequence(entropy=self.root_seed,
                                    spawn_key=(STAGE_IDS[stage],))
        return int(ss.generate_state(1)[0])

    # -- lineage ----------------------------------------------------------

    def _stage_params(self, stage: str) -> dict:
        if stage == "corpus":
            params = {k: v for k, v in self.corpus.__dict__.items()}
            params["seed"] = self.stage_seed("corpus")
            return params
        if stage == "features":
            return {"feature_kind": self.feature_kind.value}
        if stage == "dictionary":
            return {"k": self.k, "method": self.dict_method.value,
                    "param": self.dict_param, "epochs": self.dict_epochs,
                    "batch": self.dict_batch, "seed": self.stage_seed("dictionary")}
        if stage == "encode":
            if self.no_encoding:
                return {"method": "none"}
            return {"method": self.encoder.method.value, "param": self.encoder.param}
        if stage == "pool":
            return {"pooling": self.pooling.value, "ppk": self.ppk}
        raise ValueError(f"no lineage for stage {stage}")

    def lineage(self, stage: str) -> str:
        chains = {"corpus": None, "features": "corpus", "dictionary": "features",
                  "encode": "dictionary", "pool": "encode"}
        if stage == "encode" and self.no_encoding:
            chains["encode"] = "features"
        upstream = chains[stage]
        payload = {
            "stage": stage,
            "params": self._stage_params(stage),
            "upstream": self.lineage(upstream) if upstream else f"seed:{self.root_seed}",
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def lineage_meta(self, stage: str) -> dict:
        return {"lineage": self.lineage(stage),
                "lineage_params": self._stage_params(stage)}

    def representation_id(self) -> str:
        if self.no_encoding:
            middle = f"k={FEATURE_DIMS[self.feature_kind]}|none"
        else:
            middle = f"k={self.k}|{self.encoder.label()}"
        return (f"{self.feature_kind.value}|{middle}|{self.pooling.value}"
                f"|ppk={int(self.ppk)}")

    # -- derived paths ----------------------------------------------------

    def features_dir(self) -> Path:
        return self.work_dir / "features"

    def codebook_path(self) -> Path:
        return self.work_dir / f"codebook_k{self.k}.cbdk"

    def codes_dir(self) -> Path:
        return self.work_dir / "codes"

    def vectors_path(self) -> Path:
        return self.work_dir / "vectors.cbsv"

    def reports_dir(self) -> Path:
        return self.work_dir / "reports"

    def qbt_config(self) -> QbtConfig:
        return QbtConfig(reg_grid=self.qbt_reg_grid, fn_grid=self.qbt_fn_grid,
                         fp_grid=self.qbt_fp_grid, seed=self.stage_seed("qbt"))

    def qbe_config(self) -> QbeConfig:
        metric = MetricTrainConfig(step_grid=self.qbe_step_grid,
                                   n_steps=self.qbe_steps,
                                   seed=self.stage_seed("qbe"))
        return QbeConfig(reduce_dim_for_k=self.qbe_reduce_dims, metric=metric)


def _parse_value(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        if not raw:
            return ()
        element = like[0] if like else 1.0
        if isinstance(element, tuple):  # k:dim mapping pairs
            pairs = []
            for item in raw.split(","):
                k_str, dim_str = item.split(":")
                pairs.append((int(k_str), int(dim_str)))
            return tuple(pairs)
        caster = int if isinstance(element, int) else float
        return tuple(caster(item) for item in raw.split(","))
    return raw


_CORPUS_KEYS = set(CorpusConfig.__dataclass_fields__) - {"seed"}
_BENCH_KEYS = set(BenchConfig.__dataclass_fields__)

_TOP_LEVEL = {
    ("pipeline", "seed"): "root_seed",
    ("pipeline", "corpus_dir"): "corpus_dir",
    ("pipeline", "work_dir"): "work_dir",
    ("features", "kind"): "feature_kind",
    ("dictionary", "k"): "k",
    ("dictionary", "method"): "dict_method",
    ("dictionary", "param"): "dict_param",
    ("dictionary", "epochs"): "dict_epochs",
    ("dictionary", "batch_size"): "dict_batch",
    ("encoder", "method"): None,  # handled jointly with param
    ("encoder", "param"): None,
    ("pooling", "kind"): "pooling",
    ("pooling", "ppk"): "ppk",
    ("qbt", "reg_grid"): "qbt_reg_grid",
    ("qbt", "fn_grid"): "qbt_fn_grid",
    ("qbt", "fp_grid"): "qbt_fp_grid",
    ("qbt", "scramble_seed"): "qbt_scramble_seed",
    ("qbe", "reduce_dims"): "qbe_reduce_dims",
    ("qbe", "step_grid"): "qbe_step_grid",
    ("qbe", "steps"): "qbe_steps",
    ("qbe", "identity_metric"): "qbe_identity_metric",
    ("qbe", "scramble_seed"): "qbe_scramble_seed",
}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Build a PipelineConfig from an INI file plus CLI-style overrides.

    Unknown sections or keys raise ConfigError. Overrides use the CLI flag
    names (seed, k, method, param, pooling, ppk, out).
    """
    base = PipelineConfig()
    corpus_kwargs: dict = {}
    bench_kwargs: dict = {}
    top_kwargs: dict = {}
    encoder_method: str | None = None
    encoder_param: float | None = None

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser[section].items():
                try:
                    if section == "corpus" and key in _CORPUS_KEYS:
                        corpus_kwargs[key] = _parse_value(
                            raw, getattr(base.corpus, key))
                    elif section == "bench" and key in _BENCH_KEYS:
                        bench_kwargs[key] = _parse_value(raw, getattr(base.bench, key))
                    elif (section, key) == ("encoder", "method"):
                        encoder_method = raw.strip()
                    elif (section, key) == ("encoder", "param"):
                        encoder_param = float(raw)
                    elif (section, key) in _TOP_LEVEL:
                        name = _TOP_LEVEL[(section, key)]
                        if key == "scramble_seed":
                            top_kwargs[name] = int(raw) if raw.strip() else None
                        elif name in ("corpus_dir", "work_dir"):
                            top_kwargs[name] = Path(raw.strip())
                        elif name == "feature_kind":
                            top_kwargs[name] = FeatureKind(raw.strip())
                        elif name == "dict_method":
                            top_kwargs[name] = EncoderMethod(raw.strip())
                        elif name == "pooling":
                            top_kwargs[name] = PoolingKind(raw.strip())
                        else:
                            top_kwargs[name] = _parse_value(raw, getattr(base, name))
                    else:
                        raise ConfigError(f"unknown config key [{section}] {key}")
                except (ValueError, KeyError) as exc:
                    raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc

    overrides = overrides or {}
    if overrides.get("seed") is not None:
        top_kwargs["root_seed"] = int(overrides["seed"])
    if overrides.get("k") is not None:
        top_kwargs["k"] = int(overrides["k"])
    if overrides.get("method") is not None:
        encoder_method = overrides["method"]
    if overrides.get("param") is not None:
        encoder_param = float(overrides["param"])
    if overrides.get("pooling") is not None:
        top_kwargs["pooling"] = PoolingKind(overrides["pooling"])
    if overrides.get("ppk") is not None:
        top_kwargs["ppk"] = bool(overrides["ppk"])
    if overrides.get("out") is not None:
        top_kwargs["work_dir"] = Path(overrides["out"])
    if overrides.get("corpus_dir") is not None:
        top_kwargs["corpus_dir"] = Path(overrides["corpus_dir"])

    try:
        if encoder_method == "none":
            top_kwargs["no_encoding"] = True
        elif encoder_method is not None or encoder_param is not None:
            current = base.encoder
            method = EncoderMethod(encoder_method) if encoder_method else current.method
            param = encoder_param if encoder_param is not None else current.param
            top_kwargs["encoder"] = EncoderConfig(method, param)
        if corpus_kwargs:
            top_kwargs["corpus"] = replace(base.corpus, **corpus_kwargs)
        if bench_kwargs:
            top_kwargs["bench"] = BenchConfig(**bench_kwargs)
        cfg = replace(base, **top_kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    # The corpus seed is derived from the root seed, never set directly.
    return replace(cfg, corpus=replace(cfg.corpus, seed=cfg.stage_seed("corpus")))
