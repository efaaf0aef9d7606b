"""训练模块

只针对可训练子集的 Adam 优化、按轮训练循环、基于开发集 EER 的模型选择，
以及中心差分梯度检查。
"""

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .adaptation import AdaptationState, instrument
from .config import AdaptationMethod, ModelConfig, TrainConfig
from .errors import ConfigError, ContractError
from .evaluation import TrialScore, compute_eer
from .model import (GENUINE, Tensor, TensorSet, cross_entropy, detection_scores, forward, init_params,
                    loss_and_grads, relu_pattern)
from .numerics import RngStream
from .synthdata import Dataset

logger = logging.getLogger(__name__)

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_INIT_STD = 0.3
GRAD_CHECK_MAX_WIDTH = 16
GRAD_CHECK_SAMPLE_ABOVE = 1000
GRAD_CHECK_SAMPLE_FRACTION = 0.25
# 解析梯度低于此值视为结构性为零（如 softmax 平移不变下的 b_k）
GRAD_CHECK_ZERO = 1e-12
GRAD_CHECK_ROUNDOFF = 1e-8


def trainable_tensors(params: TensorSet, state: Optional[AdaptationState] = None) -> Dict[str, Tensor]:
    """基础参数和适配张量中所有可训练张量，按名称索引"""
    tensors = {t.name: t for t in params if t.trainable}
    if state is not None:
        tensors.update({t.name: t for t in state.tensors if t.trainable})
    return tensors


class AdamState:
    """Adam 的一阶/二阶矩与步数，只为可训练张量分配"""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0
        for name, tensor in tensors.items():
            if tensor.trainable:
                self.m[name] = np.zeros_like(tensor.value)
                self.v[name] = np.zeros_like(tensor.value)

    def state_scalar_count(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def adam_step(state: AdamState, tensors: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              cfg: TrainConfig) -> None:
    """带偏差修正的 Adam 一步，原地更新张量

    梯度集合必须恰好覆盖可训练张量；为冻结张量或未知张量提供梯度、
    或缺少某个可训练张量的梯度，都视为违反约定。
    """
    for name in grads:
        tensor = tensors.get(name)
        if tensor is None or not tensor.trainable or name not in state.m:
            raise ContractError(f"为冻结或未知张量提供了梯度: {name}")
    missing = sorted(set(state.m) - set(grads))
    if missing:
        raise ContractError(f"缺少可训练张量的梯度: {', '.join(missing)}")

    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        tensor = tensors[name]
        if g.shape != tensor.value.shape:
            raise ContractError(f"梯度 {name} 形状 {g.shape} 与张量 {tensor.value.shape} 不一致")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    wall_time_ms: float
    steps: int
    dev_eer: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class FitResult:
    """多轮训练的结果：逐轮统计、最佳轮次及其开发集 EER"""

    history: List[EpochStats] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_dev_eer: Optional[float] = None

    @property
    def epoch_times_ms(self) -> List[float]:
        return [s.wall_time_ms for s in self.history]

    def median_epoch_ms(self) -> float:
        return statistics.median(self.epoch_times_ms) if self.history else 0.0


class Trainer:
    """持有模型、适配状态和优化器状态的训练器

    Adam 状态在构造时按当前可训练标志分配，之后跨轮保留。
    """

    def __init__(self, cfg: ModelConfig, params: TensorSet, state: Optional[AdaptationState],
                 train_cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self.state = state
        self.train_cfg = train_cfg.validate()
        self.tensors = trainable_tensors(params, state)
        self.adam = AdamState(self.tensors)
        self.epochs_run = 0

    def train_epoch(self, dataset: Dataset, rng: RngStream) -> EpochStats:
        """一轮训练：Fisher–Yates 洗牌后按批次更新，末尾不足一批的也参与训练"""
        n = len(dataset)
        if n == 0:
            raise ConfigError("训练集为空")
        order = rng.permutation(n)
        batch_size = self.train_cfg.batch_size
        labels = dataset.labels.astype(np.int64)
        total_loss = 0.0
        steps = 0
        start = time.perf_counter()
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, grads = loss_and_grads(self.cfg, self.params, self.state, dataset.features[idx], labels[idx])
            adam_step(self.adam, self.tensors, grads, self.train_cfg)
            total_loss += loss * idx.size
            steps += 1
        wall_ms = (time.perf_counter() - start) * 1000.0
        self.epochs_run += 1
        return EpochStats(epoch=self.epochs_run, mean_loss=total_loss / n, wall_time_ms=wall_ms, steps=steps)

    def _snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.tensors.items()}

    def _restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self.tensors[name].value[...] = value

    def fit(self, train: Dataset, dev: Optional[Dataset], rng: RngStream, epochs: Optional[int] = None,
            progress_callback: Optional[Callable[[float, str], None]] = None) -> FitResult:
        """训练若干轮，每轮后在开发集上评估，最后恢复开发集 EER 最低（并列取最早）的那一轮

        Args:
            train: 训练集
            dev: 开发集，None 时不做模型选择
            rng: 洗牌用随机流
            epochs: 轮数，默认取训练配置
            progress_callback: 进度回调 (进度, 消息)

        Returns:
            FitResult: 训练结果
        """
        epochs = self.train_cfg.epochs if epochs is None else epochs
        result = FitResult()
        best: Optional[Dict[str, np.ndarray]] = None
        for e in range(epochs):
            stats = self.train_epoch(train, rng)
            if dev is not None:
                stats.dev_eer = compute_eer(score_dataset(self.cfg, self.params, self.state, dev)).eer
                if result.best_dev_eer is None or stats.dev_eer < result.best_dev_eer:
                    result.best_dev_eer = stats.dev_eer
                    result.best_epoch = stats.epoch
                    best = self._snapshot()
            result.history.append(stats)
            self._log_epoch(stats)
            if progress_callback:
                progress_callback((e + 1) / epochs, f"第 {e + 1}/{epochs} 轮, loss={stats.mean_loss:.4f}")
        if best is not None:
            self._restore(best)
        elif result.history:
            result.best_epoch = result.history[-1].epoch
        return result

    def _log_epoch(self, stats: EpochStats) -> None:
        dev = "-" if stats.dev_eer is None else f"{stats.dev_eer:.4f}"
        logger.info("epoch %d: loss=%.6f, %d 步, %.1f ms, dev EER=%s",
                    stats.epoch, stats.mean_loss, stats.steps, stats.wall_time_ms, dev)
        if self.train_cfg.run_log:
            with open(self.train_cfg.run_log, "a", encoding="utf-8") as f:
                f.write(json.dumps(stats.to_dict(), sort_keys=True) + "\n")


def train_epoch(cfg: ModelConfig, params: TensorSet, state: Optional[AdaptationState], dataset: Dataset,
                train_cfg: TrainConfig, rng: RngStream) -> EpochStats:
    """用新的优化器状态训练一轮；需要跨轮保留优化器状态时请使用 Trainer"""
    return Trainer(cfg, params, state, train_cfg).train_epoch(dataset, rng)


def fit(cfg: ModelConfig, params: TensorSet, state: Optional[AdaptationState], train: Dataset,
        dev: Optional[Dataset], train_cfg: TrainConfig, rng: RngStream,
        progress_callback: Optional[Callable[[float, str], None]] = None) -> FitResult:
    return Trainer(cfg, params, state, train_cfg).fit(train, dev, rng, progress_callback=progress_callback)


def score_dataset(cfg: ModelConfig, params: TensorSet, state: Optional[AdaptationState], dataset: Dataset,
                  batch_size: int = 64) -> List[TrialScore]:
    """逐批前向，检测分数 = logit(genuine) − logit(spoof)"""
    scores: List[TrialScore] = []
    for lo in range(0, len(dataset), batch_size):
        logits = forward(cfg, params, state, dataset.features[lo:lo + batch_size])
        for offset, s in enumerate(detection_scores(logits)):
            i = lo + offset
            label = "genuine" if dataset.labels[i] == GENUINE else "spoof"
            scores.append(TrialScore(dataset.trial_ids[i], label, float(s)))
    return scores


# ---------------------------------------------------------------------------
# 梯度检查
# ---------------------------------------------------------------------------

@dataclass
class GradCheckRow:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    kinks: int = 0
    flat: int = 0


@dataclass
class GradCheckResult:
    method: str
    max_rel_error: float
    rows: List[GradCheckRow]

    def to_dict(self) -> Dict[str, object]:
        return {"method": self.method, "max_rel_error": self.max_rel_error,
                "tensors": [asdict(r) for r in self.rows]}


def tiny_config() -> ModelConfig:
    """梯度检查用的小模型"""
    return ModelConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=4, init_std=GRAD_CHECK_INIT_STD)


def grad_check(cfg: Optional[ModelConfig] = None, method: Optional[AdaptationMethod] = None,
               seed: int = 0, batch: int = 3, h: float = GRAD_CHECK_STEP) -> GradCheckResult:
    """用中心差分验证解析梯度

    对每个可训练标量计算 (f(θ+h) − f(θ−h)) / 2h，相对误差为
    |a − n| / max(|a|, |n|, 1e-8)。可训练标量超过 1000 个时每个张量随机抽查 25%。
    扰动使任一 ReLU 输入变号的标量落在折点上，差分无意义，只计数不计误差。
    解析梯度结构性为零、数值梯度也只剩舍入噪声的标量记为 flat，同样不计误差。

    Args:
        cfg: 模型配置（d_model ≤ 16），默认 tiny_config()
        method: 适配方法，默认 LoRA r=2 q,v
        seed: 随机种子
        batch: 批大小
        h: 差分步长

    Returns:
        GradCheckResult: 最大相对误差和逐张量统计
    """
    cfg = (cfg or tiny_config()).validate()
    if cfg.d_model > GRAD_CHECK_MAX_WIDTH:
        raise ConfigError(f"梯度检查只支持 d_model ≤ {GRAD_CHECK_MAX_WIDTH}，实际为 {cfg.d_model}")
    method = method or AdaptationMethod.with_lora(rank=2, targets=("q", "v"))
    rng = RngStream(seed)
    params = init_params(cfg, rng)
    state = instrument(params, cfg, method, rng)
    # B 初始为 0 时 A 的梯度恒为 0，先把 B 扰离 0
    for t in state.tensors:
        if t.name.endswith(".B"):
            t.value = rng.normal(t.value.shape, GRAD_CHECK_INIT_STD)
    x = rng.normal((batch, cfg.max_seq_len, cfg.d_model))
    labels = rng.randint(batch, cfg.n_classes)

    _, grads = loss_and_grads(cfg, params, state, x, labels)
    tensors = trainable_tensors(params, state)
    total = sum(t.size for t in tensors.values())
    sample = total > GRAD_CHECK_SAMPLE_ABOVE

    def loss_at() -> float:
        return cross_entropy(forward(cfg, params, state, x), labels)

    rows = []
    for name, tensor in tensors.items():
        flat = tensor.value.reshape(-1)
        indices = np.arange(flat.size)
        if sample:
            k = max(1, math.ceil(GRAD_CHECK_SAMPLE_FRACTION * flat.size))
            indices = np.sort(rng.permutation(flat.size)[:k])
        analytic = grads[name].reshape(-1)
        max_rel = max_abs = 0.0
        kinks = n_flat = 0
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            plus = loss_at()
            pattern_plus = relu_pattern(cfg, params, state, x)
            flat[i] = original - h
            minus = loss_at()
            pattern_minus = relu_pattern(cfg, params, state, x)
            flat[i] = original
            if not np.array_equal(pattern_plus, pattern_minus):
                kinks += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            a = float(analytic[i])
            if abs(a) < GRAD_CHECK_ZERO and abs(numeric) < GRAD_CHECK_ROUNDOFF:
                n_flat += 1
                continue
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, abs_err)
        rows.append(GradCheckRow(name, int(indices.size), max_rel, max_abs, kinks, n_flat))
    worst = max((r.max_rel_error for r in rows), default=0.0)
    logger.info("梯度检查 %s: %d 个张量, 最大相对误差 %.3e", method.descriptor(), len(rows), worst)
    return GradCheckResult(method=method.descriptor(), max_rel_error=worst, rows=rows)
