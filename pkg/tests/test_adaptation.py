"""适配测试：LoRA 注入与合并、Adapter 瓶颈、可训练标志与参数统计"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from loralab.adaptation import (adapter_param_count, count_params, expected_total, expected_trainable, instrument,
                                lora_forward, lora_merge, lora_param_count, merge_adaptation)
from loralab.config import AdaptationMethod, LoRAConfig, ModelConfig
from loralab.errors import ConfigError, ShapeError
from loralab.model import forward, init_params
from loralab.numerics import RngStream

from .conftest import random_batch


class TestLoRAPrimitives:
    def test_forward_equals_merged_weight(self):
        rng = RngStream(0)
        W, A, B = rng.normal((6, 5)), rng.normal((2, 5)), rng.normal((6, 2))
        x = rng.normal((5,))
        assert_allclose(lora_forward(W, A, B, 4.0, x), lora_merge(W, A, B, 4.0) @ x, rtol=1e-12)

    def test_scale_is_alpha_over_rank(self):
        W = np.zeros((2, 2))
        A = np.array([[1.0, 0.0], [0.0, 1.0]])
        B = np.eye(2)
        assert_allclose(lora_merge(W, A, B, 1.0), 0.5 * np.eye(2))

    def test_zero_b_leaves_weight(self):
        rng = RngStream(1)
        W = rng.normal((4, 4))
        assert_array_equal(lora_merge(W, rng.normal((2, 4)), np.zeros((4, 2)), 2.0), W)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            lora_merge(np.zeros((4, 4)), np.zeros((2, 4)), np.zeros((3, 2)), 1.0)
        with pytest.raises(ShapeError):
            lora_merge(np.zeros((4, 4)), np.zeros((2, 3)), np.zeros((4, 2)), 1.0)
        with pytest.raises(ShapeError):
            lora_forward(np.zeros((4, 4)), np.zeros((2, 4)), np.zeros((4, 2)), 1.0, np.zeros(3))


class TestInstrument:
    def test_lora_initialization(self, default_cfg):
        params = init_params(default_cfg, RngStream(0))
        state = instrument(params, default_cfg, AdaptationMethod.with_lora(rank=16), RngStream(1))
        assert_array_equal(state.tensors["layer.0.lora.q.B"], np.zeros((64, 16)))
        A = np.concatenate([t.value.ravel() for t in state.tensors if t.name.endswith(".A")])
        assert abs(A.std() - 1 / math.sqrt(16)) < 0.01
        assert "layer.1.lora.k.A" not in state.tensors

    def test_lora_freezes_base_except_head(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        instrument(params, small_cfg, AdaptationMethod.with_lora(rank=2), RngStream(1))
        assert set(params.trainable_names()) == {"head.W_head", "head.b_head"}

    def test_finetune_trains_everything(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        state = instrument(params, small_cfg, AdaptationMethod.finetune(), RngStream(1))
        assert len(state.tensors) == 0
        assert params.trainable_size() == params.total_size()

    def test_adapter_tensors(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        state = instrument(params, small_cfg, AdaptationMethod.adapter(4), RngStream(1))
        assert state.tensors["layer.1.adapter.W_down"].shape == (4, 16)
        assert state.tensors["layer.1.adapter.W_up"].shape == (16, 4)
        assert_array_equal(state.tensors["layer.0.adapter.b_up"], np.zeros(16))

    def test_rank_above_width_rejected(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        with pytest.raises(ConfigError):
            instrument(params, small_cfg, AdaptationMethod.with_lora(rank=17), RngStream(1))

    def test_fresh_lora_matches_fixed_model_bit_for_bit(self, default_cfg):
        x = random_batch(default_cfg, 4, seed=3)
        fixed = init_params(default_cfg, RngStream(0))
        instrument(fixed, default_cfg, AdaptationMethod.fixed(), RngStream(1))
        lora = init_params(default_cfg, RngStream(0))
        state = instrument(lora, default_cfg, AdaptationMethod.with_lora(rank=4, targets="q,k,v"), RngStream(1))
        assert_array_equal(forward(default_cfg, lora, state, x), forward(default_cfg, fixed, None, x))


class TestMerge:
    def test_merged_logits_match_unmerged(self, default_cfg):
        params = init_params(default_cfg, RngStream(0))
        state = instrument(params, default_cfg, AdaptationMethod.with_lora(rank=4, alpha=8.0), RngStream(1))
        rng = RngStream(2)
        for t in state.tensors:
            if t.name.endswith(".B"):
                t.value = rng.normal(t.value.shape, 0.1)
        merged = merge_adaptation(default_cfg, params, state)
        x = random_batch(default_cfg, 100, seed=4)
        unmerged_logits = forward(default_cfg, params, state, x)
        merged_logits = forward(default_cfg, merged, None, x)
        scale = np.abs(unmerged_logits).max()
        assert np.abs(merged_logits - unmerged_logits).max() <= 1e-9 * scale

    def test_merge_does_not_touch_original(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        state = instrument(params, small_cfg, AdaptationMethod.with_lora(rank=2), RngStream(1))
        state.tensors.tensor("layer.0.lora.q.B").value[...] = 1.0
        before = params["layer.0.attn.W_q"].copy()
        merged = merge_adaptation(small_cfg, params, state)
        assert_array_equal(params["layer.0.attn.W_q"], before)
        assert not np.array_equal(merged["layer.0.attn.W_q"], before)
        assert_array_equal(merged["layer.0.attn.W_k"], params["layer.0.attn.W_k"])

    def test_adapter_cannot_be_merged(self, small_cfg):
        params = init_params(small_cfg, RngStream(0))
        state = instrument(params, small_cfg, AdaptationMethod.adapter(4), RngStream(1))
        with pytest.raises(ConfigError):
            merge_adaptation(small_cfg, params, state)


class TestParamCounts:
    @pytest.mark.parametrize("method, trainable", [
        (AdaptationMethod.with_lora(rank=4, targets="q,v"), 2178),
        (AdaptationMethod.with_lora(rank=2, targets="q,v"), 1154),
        (AdaptationMethod("adapter"), 8514),
        (AdaptationMethod.finetune(), 100098),
        (AdaptationMethod.fixed(), 130),
    ])
    def test_default_config_counts(self, default_cfg, method, trainable):
        params = init_params(default_cfg, RngStream(0))
        state = instrument(params, default_cfg, method, RngStream(1))
        counts = count_params(params, state)
        assert counts.trainable == trainable
        assert counts.trainable == expected_trainable(default_cfg, method)
        assert counts.total == expected_total(default_cfg, method)
        assert counts.frozen == counts.total - counts.trainable

    def test_lora_total_and_ratio(self, default_cfg):
        params = init_params(default_cfg, RngStream(0))
        state = instrument(params, default_cfg, AdaptationMethod.with_lora(rank=4), RngStream(1))
        counts = count_params(params, state)
        assert counts.total == 100098 + 2048
        assert counts.ratio == pytest.approx(100098 / 2178)

    @pytest.mark.parametrize("r", [2, 4, 8, 16])
    def test_trainable_linear_in_rank(self, default_cfg, r):
        # 逐个张量枚举，与公式 130 + c·r 独立对照
        params = init_params(default_cfg, RngStream(0))
        state = instrument(params, default_cfg, AdaptationMethod.with_lora(rank=r, targets="q,v"), RngStream(1))
        enumerated = sum(t.value.size for t in params if t.trainable) + sum(t.value.size for t in state.tensors)
        c = default_cfg.n_layers * 2 * 2 * default_cfg.d_model
        assert enumerated == 130 + c * r

    def test_lora_under_two_percent_of_finetune(self, default_cfg):
        method = AdaptationMethod.with_lora(rank=2)
        assert expected_trainable(default_cfg, method) <= 0.02 * expected_trainable(default_cfg,
                                                                                   AdaptationMethod.finetune())

    def test_formula_helpers(self, default_cfg):
        assert lora_param_count(default_cfg, LoRAConfig(rank=1, targets="q,k,v")) == 2 * 3 * 2 * 64
        assert adapter_param_count(default_cfg, 32) == 8384
        assert expected_trainable(ModelConfig(n_layers=1), AdaptationMethod.fixed()) == 130
