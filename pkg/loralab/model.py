"""模型模块

玩具 Transformer 编码器分类器：预归一化注意力与前馈残差块、均值池化、线性分类头。
前向传播保存缓存，反向传播按解析公式计算梯度；LoRA 与 Adapter 的贡献在
instrument 过的位置叠加。
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import DomainError, ShapeError
from .numerics import Matrix, RngStream, layer_norm, layer_norm_backward, log_softmax_rows, softmax_rows

if TYPE_CHECKING:  # pragma: no cover
    from .adaptation import AdaptationState

logger = logging.getLogger(__name__)

GENUINE = 0
SPOOF = 1
LN_EPS = 1e-5
PROJECTIONS = ("q", "k", "v")


@dataclass
class Tensor:
    """带稳定名称和可训练标志的参数张量"""

    name: str
    value: np.ndarray
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(self.value.size)


class TensorSet:
    """按插入顺序保存的具名张量集合"""

    def __init__(self, tensors: Optional[List[Tensor]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for t in tensors or []:
            self.add(t.name, t.value, t.trainable)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"张量名称重复: {name}")
        tensor = Tensor(name, np.array(value, dtype=np.float64, order="C"), trainable)
        self._tensors[name] = tensor
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensor(name).value

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def tensor(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"找不到张量: {name}") from None

    def get(self, name: str) -> Optional[np.ndarray]:
        t = self._tensors.get(name)
        return None if t is None else t.value

    def names(self) -> List[str]:
        return list(self._tensors)

    def trainable_names(self) -> List[str]:
        return [t.name for t in self._tensors.values() if t.trainable]

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def trainable_size(self) -> int:
        return sum(t.size for t in self._tensors.values() if t.trainable)

    def copy(self):
        clone = self.__class__()
        for t in self._tensors.values():
            clone.add(t.name, t.value.copy(), t.trainable)
        return clone


class ModelParams(TensorSet):
    """基础模型的全部权重"""


def layer_name(layer: int, part: str) -> str:
    return f"layer.{layer}.{part}"


def expected_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """按初始化顺序列出所有基础张量的名称和形状"""
    d, f = cfg.d_model, cfg.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {}
    for l in range(cfg.n_layers):
        for p in ("q", "k", "v", "o"):
            shapes[layer_name(l, f"attn.W_{p}")] = (d, d)
            shapes[layer_name(l, f"attn.b_{p}")] = (d,)
        shapes[layer_name(l, "ffn.W_1")] = (f, d)
        shapes[layer_name(l, "ffn.b_1")] = (f,)
        shapes[layer_name(l, "ffn.W_2")] = (d, f)
        shapes[layer_name(l, "ffn.b_2")] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[layer_name(l, f"{ln}.gamma")] = (d,)
            shapes[layer_name(l, f"{ln}.beta")] = (d,)
    shapes["head.W_head"] = (cfg.n_classes, d)
    shapes["head.b_head"] = (cfg.n_classes,)
    return shapes


def is_head(name: str) -> bool:
    return name.startswith("head.")


def init_params(cfg: ModelConfig, rng: RngStream) -> ModelParams:
    """初始化模型权重：投影矩阵为高斯(std=init_std)，偏置为 0，层归一化为 1/0"""
    cfg.validate()
    params = ModelParams()
    for name, shape in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W_"):
            value = rng.normal(shape, cfg.init_std)
        elif leaf == "gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params.add(name, value, trainable=True)
    logger.debug("初始化模型参数: %d 个张量, %d 个标量", len(params), params.total_size())
    return params


def check_params(cfg: ModelConfig, params: TensorSet) -> None:
    """校验参数集合与配置一致"""
    for name, shape in expected_shapes(cfg).items():
        value = params.get(name)
        if value is None:
            raise ShapeError(f"参数缺失: {name}")
        if value.shape != shape:
            raise ShapeError(f"参数 {name} 形状与配置不符", value.shape, shape)


def check_batch(cfg: ModelConfig, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    expected = (cfg.max_seq_len, cfg.d_model)
    if batch.ndim != 3 or batch.shape[1:] != expected:
        raise ShapeError("输入批次形状应为 (batch, max_seq_len, d_model)", batch.shape, (-1,) + expected)
    return batch


# ---------------------------------------------------------------------------
# 注意力
# ---------------------------------------------------------------------------

def attention(Q: Matrix, K: Matrix, V: Matrix) -> Matrix:
    """单头缩放点积注意力 softmax_rows(QKᵀ/√d_h)·V"""
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("注意力输入必须是二维矩阵", Q.shape, K.shape)
    if Q.shape[1] != K.shape[1]:
        raise ShapeError("Q 与 K 的列数（head 维度）不一致", Q.shape, K.shape)
    if K.shape[0] != V.shape[0]:
        raise ShapeError("K 与 V 的行数不一致", K.shape, V.shape)
    scores = Q @ K.T / math.sqrt(Q.shape[1])
    return softmax_rows(scores) @ V


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def multi_head_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, n_heads: int,
                         W_o: Matrix, b_o: Optional[np.ndarray] = None) -> np.ndarray:
    """多头注意力：把 d_model 切成 n_heads 段分别做注意力，拼接后乘 W_o"""
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    squeeze = Q.ndim == 2
    if squeeze:
        Q, K, V = Q[None], K[None], V[None]
    if Q.shape[-1] % n_heads != 0 or Q.shape[-1] != K.shape[-1] or K.shape[:2] != V.shape[:2]:
        raise ShapeError("多头注意力输入形状不匹配", Q.shape, K.shape)
    out, _ = _attention_forward(Q, K, V, n_heads)
    out = out @ np.asarray(W_o).T
    if b_o is not None:
        out = out + b_o
    return out[0] if squeeze else out


def _attention_forward(q, k, v, n_heads):
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    probs = softmax_rows(qh @ kh.transpose(0, 1, 3, 2) * scale)
    out = _merge_heads(probs @ vh)
    return out, (qh, kh, vh, probs, scale)


def _attention_backward(dout, cache, n_heads):
    qh, kh, vh, probs, scale = cache
    dout_h = _split_heads(dout, n_heads)
    dprobs = dout_h @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dout_h
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# ---------------------------------------------------------------------------
# 前向 / 反向
# ---------------------------------------------------------------------------

def _sum_rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _weight_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """线性层 y = x Wᵀ 的权重梯度 dyᵀ x（批次和帧合并成行）"""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


class _Forward:
    """一次前向传播的缓存"""

    def __init__(self):
        self.layers: List[Dict[str, object]] = []
        self.pooled: Optional[np.ndarray] = None
        self.seq_len = 0


def _run_forward(cfg: ModelConfig, params: TensorSet, state: Optional["AdaptationState"],
                 batch: np.ndarray, keep: bool) -> Tuple[np.ndarray, Optional[_Forward]]:
    check_params(cfg, params)
    x = check_batch(cfg, batch)
    cache = _Forward() if keep else None
    for l in range(cfg.n_layers):
        P = lambda part: params[layer_name(l, part)]  # noqa: E731
        c: Dict[str, object] = {}
        a, c["ln1"] = layer_norm(x, P("ln1.gamma"), P("ln1.beta"), LN_EPS)
        projected = {}
        for p in PROJECTIONS:
            h = a @ P(f"attn.W_{p}").T + P(f"attn.b_{p}")
            pair = state.lora_pair(l, p) if state is not None else None
            if pair is not None:
                A, B = pair
                ax = a @ A.T
                h = h + state.lora_scale * (ax @ B.T)
                c[f"lora_ax_{p}"] = ax
            projected[p] = h
        o, c["attn"] = _attention_forward(projected["q"], projected["k"], projected["v"], cfg.n_heads)
        x1 = x + (o @ P("attn.W_o").T + P("attn.b_o"))
        cn, c["ln2"] = layer_norm(x1, P("ln2.gamma"), P("ln2.beta"), LN_EPS)
        z = cn @ P("ffn.W_1").T + P("ffn.b_1")
        hidden = np.maximum(z, 0.0)
        x2 = x1 + (hidden @ P("ffn.W_2").T + P("ffn.b_2"))
        adapter = state.adapter(l) if state is not None else None
        if adapter is not None:
            W_down, b_down, W_up, b_up = adapter
            u = x2 @ W_down.T + b_down
            r = np.maximum(u, 0.0)
            out = x2 + (r @ W_up.T + b_up)
            c.update(adapter_in=x2, adapter_u=u, adapter_r=r)
        else:
            out = x2
        if keep:
            c.update(x=x, a=a, o=o, cn=cn, z=z, hidden=hidden)
            cache.layers.append(c)
        x = out
    pooled = x.mean(axis=1)
    logits = pooled @ params["head.W_head"].T + params["head.b_head"]
    if keep:
        cache.pooled = pooled
        cache.seq_len = x.shape[1]
    return logits, cache


def forward(cfg: ModelConfig, params: TensorSet, adaptation: Optional["AdaptationState"],
            batch: np.ndarray) -> Matrix:
    """前向传播，返回 (batch, n_classes) 的 logits

    Args:
        cfg: 模型配置
        params: 基础模型参数
        adaptation: instrument 得到的适配状态，None 表示不带适配
        batch: (batch, max_seq_len, d_model) 的特征序列

    Returns:
        Matrix: logits
    """
    logits, _ = _run_forward(cfg, params, adaptation, batch, keep=False)
    return logits


def cross_entropy(logits: Matrix, labels) -> float:
    """批次平均交叉熵（nats）"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits 行数与标签数量不一致", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"标签越界: 取值应在 [0, {logits.shape[1]}) 内")
    logp = log_softmax_rows(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def _cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = softmax_rows(logits)
    probs[np.arange(labels.size), labels] -= 1.0
    return probs / labels.size


def loss_and_grads(cfg: ModelConfig, params: TensorSet, adaptation: Optional["AdaptationState"],
                   batch: np.ndarray, labels) -> Tuple[float, Dict[str, np.ndarray]]:
    """一次前向 + 反向，返回损失和全部可训练张量的梯度

    冻结张量不会出现在梯度集合中；若某层以下再无可训练张量，反向传播在该层停止。
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logits, cache = _run_forward(cfg, params, adaptation, batch, keep=True)
    loss = cross_entropy(logits, labels)
    grads: Dict[str, np.ndarray] = {}

    def want(name: str) -> bool:
        return name in params and params.tensor(name).trainable

    def want_state(name: str) -> bool:
        return adaptation is not None and name in adaptation.tensors and adaptation.tensors.tensor(name).trainable

    # 第 l 层及以下是否还有可训练张量
    below = [False] * (cfg.n_layers + 1)
    for l in range(cfg.n_layers):
        prefix = f"layer.{l}."
        has = any(t.trainable for t in params if t.name.startswith(prefix))
        if adaptation is not None:
            has = has or any(t.trainable for t in adaptation.tensors if t.name.startswith(prefix))
        below[l + 1] = below[l] or has

    dlogits = _cross_entropy_grad(logits, labels)
    if want("head.W_head"):
        grads["head.W_head"] = dlogits.T @ cache.pooled
    if want("head.b_head"):
        grads["head.b_head"] = dlogits.sum(axis=0)
    if not below[cfg.n_layers]:
        return loss, grads

    dpooled = dlogits @ params["head.W_head"]
    dx = np.broadcast_to(dpooled[:, None, :] / cache.seq_len,
                         (dpooled.shape[0], cache.seq_len, dpooled.shape[1])).copy()

    for l in reversed(range(cfg.n_layers)):
        if not below[l + 1]:
            break
        c = cache.layers[l]
        name = lambda part: layer_name(l, part)  # noqa: E731
        P = lambda part: params[name(part)]  # noqa: E731

        # Adapter 瓶颈：out = x2 + relu(x2 W_downᵀ + b_down) W_upᵀ + b_up
        adapter = adaptation.adapter(l) if adaptation is not None else None
        if adapter is not None:
            W_down, _, W_up, _ = adapter
            if want_state(name("adapter.W_up")):
                grads[name("adapter.W_up")] = _weight_grad(dx, c["adapter_r"])
            if want_state(name("adapter.b_up")):
                grads[name("adapter.b_up")] = _sum_rows(dx)
            du = (dx @ W_up) * (c["adapter_u"] > 0)
            if want_state(name("adapter.W_down")):
                grads[name("adapter.W_down")] = _weight_grad(du, c["adapter_in"])
            if want_state(name("adapter.b_down")):
                grads[name("adapter.b_down")] = _sum_rows(du)
            dx = dx + du @ W_down

        # 前馈块
        if want(name("ffn.W_2")):
            grads[name("ffn.W_2")] = _weight_grad(dx, c["hidden"])
        if want(name("ffn.b_2")):
            grads[name("ffn.b_2")] = _sum_rows(dx)
        dz = (dx @ P("ffn.W_2")) * (c["z"] > 0)
        if want(name("ffn.W_1")):
            grads[name("ffn.W_1")] = _weight_grad(dz, c["cn"])
        if want(name("ffn.b_1")):
            grads[name("ffn.b_1")] = _sum_rows(dz)
        dcn = dz @ P("ffn.W_1")
        dx1_ln, dg2, db2 = layer_norm_backward(dcn, P("ln2.gamma"), c["ln2"])
        if want(name("ln2.gamma")):
            grads[name("ln2.gamma")] = dg2
        if want(name("ln2.beta")):
            grads[name("ln2.beta")] = db2
        dx1 = dx + dx1_ln

        # 注意力块
        if want(name("attn.W_o")):
            grads[name("attn.W_o")] = _weight_grad(dx1, c["o"])
        if want(name("attn.b_o")):
            grads[name("attn.b_o")] = _sum_rows(dx1)
        do = dx1 @ P("attn.W_o")
        dq, dk, dv = _attention_backward(do, c["attn"], cfg.n_heads)
        a = c["a"]
        da = np.zeros_like(a)
        for p, dp in zip(PROJECTIONS, (dq, dk, dv)):
            if want(name(f"attn.W_{p}")):
                grads[name(f"attn.W_{p}")] = _weight_grad(dp, a)
            if want(name(f"attn.b_{p}")):
                grads[name(f"attn.b_{p}")] = _sum_rows(dp)
            da += dp @ P(f"attn.W_{p}")
            pair = adaptation.lora_pair(l, p) if adaptation is not None else None
            if pair is not None:
                A, B = pair
                s = adaptation.lora_scale
                dax = dp @ B
                if want_state(name(f"lora.{p}.B")):
                    grads[name(f"lora.{p}.B")] = s * _weight_grad(dp, c[f"lora_ax_{p}"])
                if want_state(name(f"lora.{p}.A")):
                    grads[name(f"lora.{p}.A")] = s * _weight_grad(dax, a)
                da += s * (dax @ A)
        dx0_ln, dg1, db1 = layer_norm_backward(da, P("ln1.gamma"), c["ln1"])
        if want(name("ln1.gamma")):
            grads[name("ln1.gamma")] = dg1
        if want(name("ln1.beta")):
            grads[name("ln1.beta")] = db1
        dx = dx1 + dx0_ln

    return loss, grads


def backward(cfg: ModelConfig, params: TensorSet, adaptation: Optional["AdaptationState"],
             batch: np.ndarray, labels) -> Dict[str, np.ndarray]:
    """返回具名梯度集合，只包含可训练张量"""
    return loss_and_grads(cfg, params, adaptation, batch, labels)[1]


def relu_pattern(cfg: ModelConfig, params: TensorSet, adaptation: Optional["AdaptationState"],
                 batch: np.ndarray) -> np.ndarray:
    """所有 ReLU 输入的符号模式（前馈块与 Adapter 瓶颈），用于数值梯度检查时识别折点"""
    _, cache = _run_forward(cfg, params, adaptation, batch, keep=True)
    masks = []
    for c in cache.layers:
        masks.append((c["z"] > 0).ravel())
        if "adapter_u" in c:
            masks.append((c["adapter_u"] > 0).ravel())
    return np.concatenate(masks)


def detection_scores(logits: Matrix) -> np.ndarray:
    """检测分数 = logit(genuine) − logit(spoof)，越高越像真实语音"""
    logits = np.asarray(logits)
    return logits[:, GENUINE] - logits[:, SPOOF]
