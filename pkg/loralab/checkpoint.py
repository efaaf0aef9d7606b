"""检查点模块

基础模型、适配增量和合并模型的二进制存取。

文件布局：魔数 b"LACP"，u32 小端的头部长度，紧凑 JSON 头部（键排序），
随后按头部顺序依次存放各张量的 float64 小端数据。
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .adaptation import AdaptationState, instrument
from .config import AdaptationMethod, ModelConfig
from .errors import ConfigError, ParseError, ShapeError
from .model import ModelParams, TensorSet, check_params
from .numerics import RngStream

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LACP"
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ("base", "delta", "merged")


@dataclass
class Checkpoint:
    """一份检查点

    kind=base/merged 时 tensors 是完整的基础参数；
    kind=delta 时 tensors 是适配张量加上基础模型中可训练的张量（例如分类头）。
    """

    kind: str
    model: ModelConfig
    tensors: TensorSet
    method: Optional[AdaptationMethod] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CHECKPOINT_KINDS:
            raise ConfigError(f"未知的检查点类型: {self.kind!r}")
        if self.kind == "delta" and self.method is None:
            raise ConfigError("增量检查点必须记录适配方法")

    def header(self) -> Dict[str, Any]:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "model": self.model.to_dict(),
            "method": None if self.method is None else self.method.to_dict(),
            "meta": self.meta,
            "tensors": [{"name": t.name, "shape": list(t.value.shape), "trainable": t.trainable}
                        for t in self.tensors],
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(t.value, dtype="<f8").tobytes() for t in self.tensors)
        return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + payload

    @classmethod
    def from_bytes(cls, data: bytes, path: Optional[str] = None) -> "Checkpoint":
        if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
            raise ParseError("不是检查点文件（魔数错误）", path=path)
        (header_len,) = struct.unpack_from("<I", data, 4)
        if 8 + header_len > len(data):
            raise ParseError("检查点头部被截断", path=path)
        try:
            header = json.loads(data[8:8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParseError(f"检查点头部不是有效的 JSON: {e}", path=path) from e
        if not isinstance(header, dict):
            raise ParseError("检查点头部应为 JSON 对象", path=path)
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(f"不支持的检查点版本: {header.get('format_version')}", path=path)
        try:
            kind = header["kind"]
            model = ModelConfig.from_dict(header["model"])
            method = None if header["method"] is None else AdaptationMethod.from_dict(header["method"])
            meta = header.get("meta", {})
            if not isinstance(meta, dict):
                raise TypeError("meta 应为对象")
            entries = _tensor_index(header["tensors"])
        except KeyError as e:
            raise ParseError(f"检查点头部缺少字段 {e}", path=path) from e
        except (ConfigError, TypeError, ValueError) as e:
            raise ParseError(f"检查点头部无效: {e}", path=path) from e

        payload = 8 * sum(count for _, _, count, _ in entries)
        if 8 + header_len + payload != len(data):
            raise ParseError(f"检查点数据长度 {len(data) - 8 - header_len} 字节，头部声明 {payload} 字节", path=path)
        tensors = TensorSet() if kind == "delta" else ModelParams()
        offset = 8 + header_len
        for name, shape, count, trainable in entries:
            value = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            tensors.add(name, value, trainable)
            offset += 8 * count
        try:
            return cls(kind=kind, model=model, tensors=tensors, method=method, meta=meta)
        except ConfigError as e:
            raise ParseError(str(e), path=path) from e


def _tensor_index(entries) -> List[Tuple[str, Tuple[int, ...], int, bool]]:
    """校验头部的张量索引，返回 [(名称, 形状, 元素数, 可训练)]"""
    if not isinstance(entries, list):
        raise TypeError("tensors 应为列表")
    index, seen = [], set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise TypeError(f"第 {i} 个张量条目应为对象")
        name, shape, trainable = entry["name"], entry["shape"], entry["trainable"]
        if not isinstance(name, str) or not name or name in seen:
            raise ValueError(f"第 {i} 个张量名称无效或重复: {name!r}")
        if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                                  for s in shape):
            raise ValueError(f"张量 {name} 的形状无效: {shape!r}")
        if not isinstance(trainable, bool):
            raise TypeError(f"张量 {name} 的 trainable 应为布尔值")
        seen.add(name)
        count = 1
        for s in shape:
            count *= s
        index.append((name, tuple(shape), count, trainable))
    return index


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(ckpt.to_bytes())
    logger.info("已保存 %s 检查点: %s (%d 个张量)", ckpt.kind, path, len(ckpt.tensors))


def load_checkpoint(path: str, expect: Optional[str] = None) -> Checkpoint:
    """读取检查点；expect 指定期望的类型（base/delta/merged）"""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise ConfigError(f"检查点文件不存在: {path}") from e
    ckpt = Checkpoint.from_bytes(data, path=path)
    if expect is not None and ckpt.kind != expect and not (expect == "base" and ckpt.kind == "merged"):
        raise ConfigError(f"{path} 是 {ckpt.kind} 检查点，这里需要 {expect}")
    if ckpt.kind != "delta":
        try:
            check_params(ckpt.model, ckpt.tensors)
        except ShapeError as e:
            raise ParseError(f"张量与头部的模型配置不符: {e}", path=path) from e
    return ckpt


def base_checkpoint(cfg: ModelConfig, params: ModelParams, meta: Optional[Dict[str, Any]] = None,
                    kind: str = "base") -> Checkpoint:
    check_params(cfg, params)
    return Checkpoint(kind=kind, model=cfg, tensors=params.copy(), meta=dict(meta or {}))


def delta_checkpoint(cfg: ModelConfig, params: ModelParams, state: AdaptationState,
                     meta: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """只保存适配后发生变化的部分：适配张量与基础模型中的可训练张量"""
    tensors = TensorSet()
    for t in state.tensors:
        tensors.add(t.name, t.value.copy(), t.trainable)
    for t in params:
        if t.trainable:
            tensors.add(t.name, t.value.copy(), True)
    return Checkpoint(kind="delta", model=cfg, tensors=tensors, method=state.method, meta=dict(meta or {}))


def apply_delta(base: Checkpoint, delta: Checkpoint) -> Tuple[ModelParams, AdaptationState]:
    """把增量检查点套到基础参数上，重建可直接推理的 (params, state)"""
    if delta.kind != "delta":
        raise ConfigError(f"需要增量检查点，实际为 {delta.kind}")
    if base.model.to_dict() != delta.model.to_dict():
        raise ConfigError("增量检查点与基础检查点的模型配置不一致")
    params = base.tensors.copy()
    state = instrument(params, base.model, delta.method, RngStream(0))
    for t in delta.tensors:
        if t.name in state.tensors:
            target = state.tensors.tensor(t.name)
        elif t.name in params:
            target = params.tensor(t.name)
        else:
            raise ConfigError(f"增量检查点含未知张量: {t.name}")
        if target.value.shape != t.value.shape:
            raise ConfigError(f"张量 {t.name} 形状不一致: {t.value.shape} 与 {target.value.shape}")
        target.value = t.value.copy()
    return params, state
