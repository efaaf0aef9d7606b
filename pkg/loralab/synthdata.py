"""合成数据模块

用可复现的合成特征序列代替真实的伪造语音数据：
真实语音是带相位的基础正弦加噪声，伪造语音在前 artifact_dims 维额外叠加
频率为 f_a 的伪影。源任务 f_a=4、目标任务 f_a=7，构成"预训练→适配"的迁移场景。
"""

import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from .config import SOURCE_ARTIFACT_FREQ, TARGET_ARTIFACT_FREQ, DatasetSpec
from .errors import ConfigError, ParseError, ShapeError
from .model import GENUINE, SPOOF
from .numerics import RngStream, splitmix64

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"LADS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

SPLITS = ("train", "dev", "eval")
TASKS = {"source": SOURCE_ARTIFACT_FREQ, "target": TARGET_ARTIFACT_FREQ}


@dataclass
class Dataset:
    """一组试次：编号、标签(0 真实 / 1 伪造)、(N, L, feat_dim) 特征"""

    trial_ids: List[str]
    labels: np.ndarray
    features: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ShapeError("特征必须是 (N, L, feat_dim) 三维数组", self.features.shape)
        n = len(self.trial_ids)
        if self.labels.shape != (n,) or self.features.shape[0] != n:
            raise ShapeError("试次编号、标签与特征的数量不一致", (n,), self.features.shape)

    def __len__(self) -> int:
        return len(self.trial_ids)

    @property
    def seq_len(self) -> int:
        return int(self.features.shape[1])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[2])

    def count(self, label: int) -> int:
        return int((self.labels == label).sum())

    def cropped(self, target_len: int) -> "Dataset":
        """所有序列裁剪/补零到 target_len 帧"""
        return Dataset(list(self.trial_ids), self.labels.copy(),
                       crop_or_pad(self.features, target_len), self.split)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """按规格生成数据集，真实/伪造交替排列，完全由种子决定

    genuine: x[t][j] = sin(2π·f_c·t/L + φ_j) + ε，φ_j = 2πj/feat_dim，ε ~ N(0, σ²)
    spoof:   在前 artifact_dims 维再加 a·sin(2π·f_a·t/L)

    特征先量化到 float32，保证内存中的数据集与写盘后读回的完全一致。

    Args:
        spec: 数据规格

    Returns:
        Dataset: 2 × n_per_class 个试次
    """
    spec.validate()
    L, d = spec.seq_len, spec.feat_dim
    t = np.arange(L, dtype=np.float64)[:, None]
    phase = 2.0 * math.pi * np.arange(d, dtype=np.float64)[None, :] / d
    base = np.sin(2.0 * math.pi * spec.base_freq * t / L + phase)
    artifact = np.zeros((L, d))
    artifact[:, :spec.affected_dims] = spec.artifact_amp * np.sin(2.0 * math.pi * spec.artifact_freq * t / L)

    rng = RngStream(spec.seed)
    n = 2 * spec.n_per_class
    features = np.empty((n, L, d), dtype=np.float64)
    labels = np.empty(n, dtype=np.uint8)
    trial_ids = []
    for i in range(n):
        label = GENUINE if i % 2 == 0 else SPOOF
        x = base + rng.normal((L, d), spec.noise_sigma)
        if label == SPOOF:
            x = x + artifact
        features[i] = x
        labels[i] = label
        trial_ids.append(f"{spec.split}_{i:05d}")
    features = features.astype(np.float32).astype(np.float64)
    logger.debug("生成数据集 split=%s seed=%d: %d 个试次, L=%d, d=%d, f_a=%g",
                 spec.split, spec.seed, n, L, d, spec.artifact_freq)
    return Dataset(trial_ids, labels, features, spec.split)


def crop_or_pad(seq: np.ndarray, target_len: int) -> np.ndarray:
    """沿帧轴（倒数第二维）处理长度：过长时从前面截掉，过短时在末尾补零"""
    if target_len < 1:
        raise ConfigError(f"目标长度必须 ≥ 1，实际为 {target_len}")
    seq = np.asarray(seq, dtype=np.float64)
    L = seq.shape[-2]
    if L == target_len:
        return seq.copy()
    if L > target_len:
        return seq[..., L - target_len:, :].copy()
    pad = [(0, 0)] * seq.ndim
    pad[-2] = (0, target_len - L)
    return np.pad(seq, pad)


# ---------------------------------------------------------------------------
# 任务与数据划分
# ---------------------------------------------------------------------------

def split_seed(master_seed: int, task: str, split: str) -> int:
    """由主种子派生 (任务, 划分) 的种子，各组合互不相同"""
    if task not in TASKS:
        raise ConfigError(f"未知任务 {task!r}（可选 {', '.join(TASKS)}）")
    if split not in SPLITS:
        raise ConfigError(f"未知划分 {split!r}（可选 {', '.join(SPLITS)}）")
    code = list(TASKS).index(task) * len(SPLITS) + SPLITS.index(split) + 1
    return splitmix64(splitmix64(master_seed) ^ code)


def split_sizes(n_per_class: int) -> Dict[str, int]:
    """train 与 eval 各 n_per_class，dev 为其一半"""
    return {"train": n_per_class, "dev": max(1, n_per_class // 2), "eval": n_per_class}


def task_spec(base: DatasetSpec, task: str, split: str, master_seed: int,
              n_per_class: Optional[int] = None) -> DatasetSpec:
    n = base.n_per_class if n_per_class is None else n_per_class
    return replace(base, artifact_freq=TASKS[task], split=split,
                   n_per_class=split_sizes(n)[split], seed=split_seed(master_seed, task, split))


def make_task_splits(base: DatasetSpec, task: str, master_seed: int,
                     splits=SPLITS) -> Dict[str, Dataset]:
    """生成某一任务的 train/dev/eval 数据集

    Args:
        base: 基础规格（几何、噪声、伪影幅度）
        task: source 或 target
        master_seed: 主种子
        splits: 需要的划分

    Returns:
        Dict[str, Dataset]: 划分名到数据集
    """
    return {split: generate_dataset(task_spec(base, task, split, master_seed)) for split in splits}


# ---------------------------------------------------------------------------
# 数据集文件
# ---------------------------------------------------------------------------

def dataset_to_bytes(dataset: Dataset) -> bytes:
    """序列化为 LADS 格式：头部之后逐个试次写 id、标签和 float32 特征"""
    out = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), dataset.seq_len, dataset.feat_dim)]
    for trial_id, label, feats in zip(dataset.trial_ids, dataset.labels, dataset.features):
        raw_id = trial_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ConfigError(f"试次编号过长: {trial_id[:32]}…")
        out.append(struct.pack("<H", len(raw_id)))
        out.append(raw_id)
        out.append(struct.pack("<B", int(label)))
        out.append(np.ascontiguousarray(feats, dtype="<f4").tobytes())
    return b"".join(out)


def dataset_from_bytes(data: bytes, path: Optional[str] = None, split: str = "train") -> Dataset:
    if len(data) < _HEADER.size:
        raise ParseError("文件过短，缺少数据集头部", path=path)
    magic, version, n, L, d = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ParseError(f"魔数错误: {magic!r}（应为 {DATASET_MAGIC!r}）", path=path)
    if version != DATASET_VERSION:
        raise ParseError(f"不支持的数据集版本 {version}", path=path)
    if L < 1 or d < 1:
        raise ParseError(f"头部的帧数或特征维数无效: L={L}, d={d}", path=path)
    frame_bytes = L * d * 4
    # 每个试次至少占 2 字节编号长度 + 1 字节标签 + 特征
    minimum = _HEADER.size + n * (3 + frame_bytes)
    if minimum > len(data):
        raise ParseError(f"头部声明 {n} 个试次 (L={L}, d={d})，至少需要 {minimum} 字节，文件只有 {len(data)} 字节",
                         path=path)
    offset = _HEADER.size
    trial_ids, labels = [], []
    features = np.empty((n, L, d), dtype=np.float64)
    for i in range(n):
        if offset + 2 > len(data):
            raise ParseError(f"第 {i} 个试次截断（偏移 {offset}）", path=path)
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + id_len + 1 + frame_bytes
        if end > len(data):
            raise ParseError(f"第 {i} 个试次截断（偏移 {offset}）", path=path)
        try:
            trial_ids.append(data[offset:offset + id_len].decode("utf-8"))
        except UnicodeDecodeError:
            raise ParseError(f"第 {i} 个试次编号不是有效的 UTF-8", path=path) from None
        offset += id_len
        label = data[offset]
        if label not in (GENUINE, SPOOF):
            raise ParseError(f"第 {i} 个试次标签无效: {label}", path=path)
        labels.append(label)
        offset += 1
        features[i] = np.frombuffer(data, dtype="<f4", count=L * d, offset=offset).reshape(L, d)
        offset += frame_bytes
    if offset != len(data):
        raise ParseError(f"文件末尾有 {len(data) - offset} 个多余字节", path=path)
    return Dataset(trial_ids, np.asarray(labels, dtype=np.uint8), features, split)


def write_dataset(path: str, dataset: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(dataset))


def read_dataset(path: str, split: str = "train") -> Dataset:
    """读取 LADS 数据集文件；文件不存在报配置错误，格式错误报解析错误"""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise ConfigError(f"数据集文件不存在: {path}") from e
    return dataset_from_bytes(data, path=path, split=split)
