"""测试公共夹具：小模型配置、固定种子的随机流、小数据集"""

import numpy as np
import pytest

from loralab.config import AdaptationMethod, DatasetSpec, LabConfig, ModelConfig, TrainConfig
from loralab.evaluation import TrialScore
from loralab.numerics import RngStream
from loralab.synthdata import generate_dataset


def make_tiny_lab(**overrides) -> LabConfig:
    """秒级完成一次预训练 + 适配的实验配置"""
    lab = LabConfig(
        model=ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq_len=16),
        train=TrainConfig(learning_rate=5e-3, batch_size=8, epochs=2),
        data=DatasetSpec(n_per_class=16, seq_len=16, feat_dim=16, artifact_amp=1.0),
        method=AdaptationMethod.with_lora(rank=2),
        pretrain_epochs=2,
        adapt_epochs=2,
    )
    for key, value in overrides.items():
        setattr(lab, key, value)
    return lab.validate()


@pytest.fixture
def default_cfg():
    return ModelConfig()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=4)


@pytest.fixture
def small_cfg():
    return ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, max_seq_len=8)


@pytest.fixture
def tiny_lab():
    return make_tiny_lab()


@pytest.fixture
def tiny_dataset():
    """100 个试次，形状与 tiny_cfg 一致；L=4 时 f_a 取 1 才不会落在零点上"""
    return generate_dataset(DatasetSpec(n_per_class=50, seq_len=4, feat_dim=8, artifact_amp=1.5,
                                        artifact_freq=1.0, seed=3))


@pytest.fixture
def small_dataset():
    return generate_dataset(DatasetSpec(n_per_class=32, seq_len=8, feat_dim=16, artifact_amp=2.0,
                                        artifact_freq=3.0, noise_sigma=0.5, seed=11))


@pytest.fixture
def six_trials():
    genuine = [0.8, 0.6, 0.4]
    spoof = [0.7, 0.5, 0.3]
    return ([TrialScore(f"g{i}", "genuine", s) for i, s in enumerate(genuine)]
            + [TrialScore(f"s{i}", "spoof", s) for i, s in enumerate(spoof)])


def random_batch(cfg: ModelConfig, batch: int, seed: int = 0) -> np.ndarray:
    return RngStream(seed).normal((batch, cfg.max_seq_len, cfg.d_model))
