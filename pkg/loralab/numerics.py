"""数值基础模块

稠密矩阵运算、层归一化和可复现的随机数流。
矩阵统一用 float64、行主序（C 连续）的 numpy 数组表示。
"""

import math
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1
_TWO_POW_NEG53 = 2.0 ** -53


def as_matrix(values) -> Matrix:
    """转换为 float64 行主序二维数组"""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError("矩阵必须是二维", m.shape, ())
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """标准矩阵乘法，形状 (a.rows, b.cols)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("矩阵乘法维度不匹配", a.shape, b.shape)
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    """沿最后一维做 softmax，先减去每行最大值保证数值稳定

    同样适用于批量张量 (..., n)。
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: Matrix) -> Matrix:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm_row(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """单行层归一化：(x − mean)/√(var + eps) ⊙ gamma + beta，var 为总体方差"""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.shape != gamma.shape or x.shape != beta.shape or x.ndim != 1:
        raise ShapeError("层归一化输入长度不一致", x.shape, gamma.shape if x.shape != gamma.shape else beta.shape)
    y, _ = layer_norm(x, gamma, beta, eps)
    return y


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """沿最后一维的层归一化，返回输出和反向传播所需缓存 (xhat, inv_std)"""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def layer_norm_backward(dy: np.ndarray, gamma: np.ndarray,
                        cache: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """层归一化反向传播，返回 (dx, dgamma, dbeta)"""
    xhat, inv_std = cache
    n = xhat.shape[-1]
    dxhat = dy * gamma
    sum_dxhat = dxhat.sum(axis=-1, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=-1, keepdims=True)
    dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    return dx, dgamma, dbeta


def splitmix64(value: int) -> int:
    """单次 SplitMix64 混合，用于从主种子派生子种子"""
    z = (int(value) + SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & _MASK64
    return z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    # uint64 数组乘法按 2^64 取模回绕
    z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """SplitMix64 均匀数 + Box–Muller 高斯数的确定性随机流

    相同种子在任何平台上都产生完全相同的序列。随机流只属于一个使用者，不要在线程间共享。
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64
        self.cached_gaussian: Optional[float] = None

    def next_u64(self, n: int) -> np.ndarray:
        """接下来的 n 个 64 位输出；与逐个调用的结果逐位一致"""
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(SPLITMIX_GAMMA)
        states = steps + np.uint64(self.state)
        self.state = (self.state + n * SPLITMIX_GAMMA) & _MASK64
        return _mix(states)

    def uniform_array(self, n: int) -> np.ndarray:
        """n 个 (0, 1] 区间的均匀数：((x >> 11) + 1) × 2^-53"""
        x = self.next_u64(n)
        return ((x >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO_POW_NEG53

    def uniform(self) -> float:
        return float(self.uniform_array(1)[0])

    def gaussian_array(self, n: int) -> np.ndarray:
        """n 个标准正态数，成对生成，奇数时缓存第二个值"""
        out = np.empty(n, dtype=np.float64)
        filled = 0
        if n > 0 and self.cached_gaussian is not None:
            out[0] = self.cached_gaussian
            self.cached_gaussian = None
            filled = 1
        remaining = n - filled
        if remaining > 0:
            pairs = (remaining + 1) // 2
            u = self.uniform_array(2 * pairs)
            radius = np.sqrt(-2.0 * np.log(u[0::2]))
            angle = 2.0 * math.pi * u[1::2]
            z = np.empty(2 * pairs, dtype=np.float64)
            z[0::2] = radius * np.cos(angle)
            z[1::2] = radius * np.sin(angle)
            out[filled:] = z[:remaining]
            if 2 * pairs > remaining:
                self.cached_gaussian = float(z[-1])
        return out

    def gaussian(self) -> float:
        return float(self.gaussian_array(1)[0])

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """按行主序填充的高斯张量"""
        size = int(np.prod(shape)) if len(shape) else 1
        return (self.gaussian_array(size) * std).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher–Yates 洗牌得到 0..n-1 的排列"""
        order = np.arange(n)
        if n < 2:
            return order
        u = self.uniform_array(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            order[i], order[j] = order[j], order[i]
        return order

    def randint(self, n: int, high: int) -> np.ndarray:
        """n 个 [0, high) 内的整数"""
        u = self.uniform_array(n)
        return np.minimum((u * high).astype(np.int64), high - 1)


def rng_uniform(s: RngStream) -> float:
    return s.uniform()


def rng_gaussian(s: RngStream) -> float:
    return s.gaussian()
