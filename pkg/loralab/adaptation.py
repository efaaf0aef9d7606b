"""适配模块

LoRA 低秩注入、Adapter 瓶颈、冻结/全量微调基线、权重合并与参数统计。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import AdaptationMethod, LoRAConfig, ModelConfig
from .errors import ConfigError, ShapeError
from .model import ModelParams, TensorSet, expected_shapes, is_head, layer_name
from .numerics import Matrix, RngStream

logger = logging.getLogger(__name__)

ADAPTER_INIT_STD = 0.02


def _check_lora_shapes(W: Matrix, A: Matrix, B: Matrix) -> None:
    if W.ndim != 2 or A.ndim != 2 or B.ndim != 2:
        raise ShapeError("LoRA 的 W、A、B 必须是二维矩阵", W.shape, A.shape)
    if B.shape[0] != W.shape[0]:
        raise ShapeError("B 的行数必须等于 W 的行数", B.shape, W.shape)
    if A.shape[1] != W.shape[1]:
        raise ShapeError("A 的列数必须等于 W 的列数", A.shape, W.shape)
    if B.shape[1] != A.shape[0]:
        raise ShapeError("B 的列数必须等于 A 的行数（秩 r）", B.shape, A.shape)


def lora_forward(W: Matrix, A: Matrix, B: Matrix, alpha: float, x) -> np.ndarray:
    """h = Wx + (alpha/r)·B(Ax)，只做两次小的矩阵-向量乘法，不显式构造 BA

    Args:
        W: d×k 冻结权重
        A: r×k 低秩矩阵
        B: d×r 低秩矩阵
        alpha: 缩放系数
        x: 长度为 k 的输入向量

    Returns:
        np.ndarray: 长度为 d 的输出
    """
    W, A, B = (np.asarray(m, dtype=np.float64) for m in (W, A, B))
    x = np.asarray(x, dtype=np.float64)
    _check_lora_shapes(W, A, B)
    if x.shape != (W.shape[1],):
        raise ShapeError("输入向量长度与 W 的列数不一致", x.shape, W.shape)
    scale = alpha / A.shape[0]
    return W @ x + scale * (B @ (A @ x))


def lora_merge(W: Matrix, A: Matrix, B: Matrix, alpha: float) -> Matrix:
    """W' = W + (alpha/r)·BA，合并后推理不再需要额外的低秩分支"""
    W, A, B = (np.asarray(m, dtype=np.float64) for m in (W, A, B))
    _check_lora_shapes(W, A, B)
    scale = alpha / A.shape[0]
    return W + scale * (B @ A)


@dataclass
class AdaptationState:
    """instrument 的结果：所选方法和它附加的张量

    张量命名为 layer.{l}.lora.{q|k|v}.{A|B} 或 layer.{l}.adapter.{W_down|b_down|W_up|b_up}。
    """

    method: AdaptationMethod
    tensors: TensorSet

    @property
    def lora_scale(self) -> float:
        return self.method.lora.scale if self.method.kind == "lora" else 0.0

    def lora_pair(self, layer: int, target: str) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.method.kind != "lora" or target not in self.method.lora.targets:
            return None
        return (self.tensors[layer_name(layer, f"lora.{target}.A")],
                self.tensors[layer_name(layer, f"lora.{target}.B")])

    def adapter(self, layer: int) -> Optional[Tuple[np.ndarray, ...]]:
        if self.method.kind != "adapter":
            return None
        return tuple(self.tensors[layer_name(layer, f"adapter.{leaf}")]
                     for leaf in ("W_down", "b_down", "W_up", "b_up"))

    def copy(self) -> "AdaptationState":
        return AdaptationState(self.method, self.tensors.copy())


def apply_trainability(params: TensorSet, method: AdaptationMethod) -> None:
    """按方法设置基础参数的可训练标志：全量微调全部可训练，其余只训练分类头"""
    for t in params:
        t.trainable = method.kind == "finetune" or is_head(t.name)


def instrument(params: ModelParams, cfg: ModelConfig, method: AdaptationMethod,
               rng: RngStream) -> AdaptationState:
    """为模型挂载适配方法并设置可训练标志

    LoRA：A ~ 高斯(std=1/√r)，B = 0，因此初始 ΔW = 0；
    Adapter：每个前馈块之后一个带残差和 ReLU 的瓶颈，权重高斯(std=0.02)，偏置为 0。

    Args:
        params: 基础模型参数（可训练标志会被原地修改）
        cfg: 模型配置
        method: 适配方法
        rng: 初始化用随机流

    Returns:
        AdaptationState: 适配状态
    """
    method.validate(cfg)
    apply_trainability(params, method)
    tensors = TensorSet()
    d = cfg.d_model
    if method.kind == "lora":
        lora = method.lora
        for l in range(cfg.n_layers):
            for target in lora.targets:
                tensors.add(layer_name(l, f"lora.{target}.A"),
                            rng.normal((lora.rank, d), 1.0 / math.sqrt(lora.rank)))
                tensors.add(layer_name(l, f"lora.{target}.B"), np.zeros((d, lora.rank)))
    elif method.kind == "adapter":
        m = method.resolved_bottleneck(cfg)
        for l in range(cfg.n_layers):
            tensors.add(layer_name(l, "adapter.W_down"), rng.normal((m, d), ADAPTER_INIT_STD))
            tensors.add(layer_name(l, "adapter.b_down"), np.zeros(m))
            tensors.add(layer_name(l, "adapter.W_up"), rng.normal((d, m), ADAPTER_INIT_STD))
            tensors.add(layer_name(l, "adapter.b_up"), np.zeros(d))
    state = AdaptationState(method, tensors)
    logger.info("挂载适配方法 %s: 新增 %d 个张量, 可训练标量 %d",
                method.descriptor(), len(tensors), params.trainable_size() + tensors.trainable_size())
    return state


def merge_adaptation(cfg: ModelConfig, params: ModelParams, state: Optional[AdaptationState]) -> ModelParams:
    """把 LoRA 的 (A, B) 合并进对应的 W，返回可独立推理的参数副本"""
    merged = params.copy()
    if state is None or state.method.kind in ("fixed", "finetune"):
        return merged
    if state.method.kind == "adapter":
        raise ConfigError("Adapter 瓶颈含非线性，无法合并进基础权重")
    alpha = state.lora_scale * state.method.lora.rank
    for l in range(cfg.n_layers):
        for target in state.method.lora.targets:
            A, B = state.lora_pair(l, target)
            name = layer_name(l, f"attn.W_{target}")
            merged.tensor(name).value = lora_merge(merged[name], A, B, alpha)
    return merged


@dataclass
class ParamReport:
    """参数统计：总量、可训练、冻结，以及相对全量微调的缩减倍数"""

    total: int
    trainable: int
    frozen: int
    ratio: float

    def to_dict(self) -> Dict[str, float]:
        return {"total": self.total, "trainable": self.trainable, "frozen": self.frozen, "ratio": self.ratio}


def count_params(params: TensorSet, state: Optional[AdaptationState] = None) -> ParamReport:
    """按可训练标志逐个张量累加

    ratio = trainable(全量微调) / trainable(当前方法)，全量微调的可训练量即全部基础参数。
    """
    extra = state.tensors if state is not None else TensorSet()
    total = params.total_size() + extra.total_size()
    trainable = params.trainable_size() + extra.trainable_size()
    full = params.total_size()
    ratio = full / trainable if trainable else math.inf
    return ParamReport(total=total, trainable=trainable, frozen=total - trainable, ratio=ratio)


def lora_param_count(cfg: ModelConfig, lora: LoRAConfig) -> int:
    """LoRA 新增参数（不含分类头）= n_layers × |targets| × 2·r·d_model"""
    return cfg.n_layers * len(lora.targets) * 2 * lora.rank * cfg.d_model


def head_param_count(cfg: ModelConfig) -> int:
    return cfg.n_classes * cfg.d_model + cfg.n_classes


def base_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in expected_shapes(cfg).values())


def adapter_param_count(cfg: ModelConfig, bottleneck: int) -> int:
    d, m = cfg.d_model, bottleneck
    return cfg.n_layers * (m * d + m + d * m + d)


def expected_trainable(cfg: ModelConfig, method: AdaptationMethod) -> int:
    """不构造参数，直接按公式求可训练标量数"""
    method.validate(cfg)
    head = head_param_count(cfg)
    if method.kind == "finetune":
        return base_param_count(cfg)
    if method.kind == "lora":
        return head + lora_param_count(cfg, method.lora)
    if method.kind == "adapter":
        return head + adapter_param_count(cfg, method.resolved_bottleneck(cfg))
    return head


def expected_total(cfg: ModelConfig, method: AdaptationMethod) -> int:
    method.validate(cfg)
    base = base_param_count(cfg)
    if method.kind == "lora":
        return base + lora_param_count(cfg, method.lora)
    if method.kind == "adapter":
        return base + adapter_param_count(cfg, method.resolved_bottleneck(cfg))
    return base
