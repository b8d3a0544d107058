from pathlib import Path

import pytest

from cbmir.config import BenchConfig, load_config
from cbmir.encoders import EncoderConfig, EncoderMethod
from cbmir.errors import ConfigError
from cbmir.features import FeatureKind
from cbmir.pooling import PoolingKind

EXAMPLE_INI = """
[pipeline]
seed = 42
corpus_dir = mycorpus
work_dir = mywork

[corpus]
n_songs = 50
n_tags = 5

[features]
kind = MFCC_D

[dictionary]
k = 64
method = lasso
param = 1.0
epochs = 3

[encoder]
method = cs
param = 0.3

[pooling]
kind = max_abs
ppk = false

[qbt]
reg_grid = 0.1,1
scramble_seed = 9

[qbe]
reduce_dims = 64:32,128:64
steps = 50

[bench]
n_songs = 4
k_grid = 16,32
"""


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.k == 128
        assert cfg.encoder == EncoderConfig(EncoderMethod.VQ, 8)
        assert cfg.feature_kind == FeatureKind.MFS_D_PC
        assert cfg.pooling == PoolingKind.MEAN

    def test_ini_parsing(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text(EXAMPLE_INI)
        cfg = load_config(path)
        assert cfg.root_seed == 42
        assert cfg.corpus_dir == Path("mycorpus")
        assert cfg.corpus.n_songs == 50
        assert cfg.corpus.n_tags == 5
        assert cfg.feature_kind == FeatureKind.MFCC_D
        assert cfg.k == 64
        assert cfg.dict_method == EncoderMethod.LASSO
        assert cfg.encoder == EncoderConfig(EncoderMethod.CS, 0.3)
        assert cfg.pooling == PoolingKind.MAX_ABS
        assert cfg.qbt_reg_grid == (0.1, 1.0)
        assert cfg.qbt_scramble_seed == 9
        assert cfg.qbe_reduce_dims == ((64, 32), (128, 64))
        assert cfg.qbe_steps == 50
        assert cfg.bench == BenchConfig(n_songs=4, k_grid=(16, 32))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[pipeline]\nbanana = 1\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "cfg.ini"
        path.write_text("[dictionary]\nk = many\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_overrides(self):
        cfg = load_config(None, {"seed": 7, "k": 256, "method": "lasso",
                                 "param": 0.5, "pooling": "max_abs",
                                 "out": "elsewhere"})
        assert cfg.root_seed == 7
        assert cfg.k == 256
        assert cfg.encoder == EncoderConfig(EncoderMethod.LASSO, 0.5)
        assert cfg.pooling == PoolingKind.MAX_ABS
        assert cfg.work_dir == Path("elsewhere")

    def test_method_none_sets_no_encoding(self):
        cfg = load_config(None, {"method": "none"})
        assert cfg.no_encoding

    def test_tau_exceeding_k_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, {"k": 4, "method": "vq", "param": 8})

    def test_ppk_requires_mean_vq(self):
        with pytest.raises(ConfigError):
            load_config(None, {"ppk": True, "pooling": "max_abs"})
        with pytest.raises(ConfigError):
            load_config(None, {"ppk": True, "method": "cs", "param": 0.1})
        cfg = load_config(None, {"ppk": True})
        assert cfg.ppk


class TestSeedsAndLineage:
    def test_stage_seeds_stable_and_distinct(self):
        cfg = load_config(None, {"seed": 5})
        seeds = {stage: cfg.stage_seed(stage)
                 for stage in ("corpus", "features", "dictionary", "encode")}
        again = load_config(None, {"seed": 5})
        for stage, value in seeds.items():
            assert again.stage_seed(stage) == value
        assert len(set(seeds.values())) == len(seeds)

    def test_lineage_chains_upstream(self):
        base = load_config(None)
        other_seed = load_config(None, {"seed": 99})
        assert base.lineage("corpus") != other_seed.lineage("corpus")
        assert base.lineage("pool") != other_seed.lineage("pool")

        other_encoder = load_config(None, {"method": "cs", "param": 0.2})
        assert base.lineage("features") == other_encoder.lineage("features")
        assert base.lineage("dictionary") == other_encoder.lineage("dictionary")
        assert base.lineage("encode") != other_encoder.lineage("encode")
        assert base.lineage("pool") != other_encoder.lineage("pool")

    def test_representation_id(self):
        cfg = load_config(None, {"ppk": True})
        assert cfg.representation_id() == "MFS_D_PC|k=128|vq(tau=8)|mean|ppk=1"
        none_cfg = load_config(None, {"method": "none"})
        assert none_cfg.representation_id() == "MFS_D_PC|k=39|none|mean|ppk=0"

    def test_corpus_seed_derived_from_root(self):
        a = load_config(None, {"seed": 1})
        b = load_config(None, {"seed": 2})
        assert a.corpus.seed != b.corpus.seed
        assert a.corpus.seed == load_config(None, {"seed": 1}).corpus.seed
