"""报告模块

单次运行报告、扫描结果、效率基准结果的结构定义、JSON 读写、表格转换，
以及驻留浮点数（参数 + 梯度 + Adam 状态 + 激活）的解析估算。
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from .adaptation import expected_total, expected_trainable
from .config import AdaptationMethod, ModelConfig, normalize_targets
from .errors import ConfigError

SWEEP_AXES = ("rank", "targets", "length", "method")
METHOD_ORDER = ("fixed", "finetune", "adapter", "lora")
TARGET_SUBSETS = ("q", "k", "v", "q,v", "q,k", "k,v", "q,k,v")


def float_footprint(cfg: ModelConfig, method: AdaptationMethod, batch: int,
                    seq_len: Optional[int] = None) -> int:
    """训练一步时驻留的 64 位浮点数个数

    参数总量 + 可训练部分的梯度与两份 Adam 矩 + 反向传播需要保存的激活。
    冻结张量既没有梯度也没有优化器状态。

    Args:
        cfg: 模型配置
        method: 适配方法
        batch: 批大小
        seq_len: 序列长度，默认 cfg.max_seq_len

    Returns:
        int: 浮点数个数
    """
    L = cfg.max_seq_len if seq_len is None else seq_len
    d, f, H = cfg.d_model, cfg.d_ff, cfg.n_heads
    trainable = expected_trainable(cfg, method)
    total = expected_total(cfg, method)
    rows = batch * L
    # 每层：ln1 输出/归一化值、q、k、v、注意力输出、残差、ln2 两项、前馈输出各 d 维，z 与 hidden 各 d_ff 维
    per_layer = rows * (10 * d + 2 * f) + batch * H * L * L
    if method.kind == "lora":
        per_layer += rows * method.lora.rank * len(method.lora.targets)
    elif method.kind == "adapter":
        per_layer += rows * (2 * method.resolved_bottleneck(cfg) + d)
    activations = cfg.n_layers * per_layer + batch * d + batch * cfg.n_classes
    return total + 3 * trainable + activations


def _require_keys(data: Dict[str, Any], required: Dict[str, tuple], what: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{what} 必须是 JSON 对象")
    for key, types in required.items():
        if key not in data:
            raise ConfigError(f"{what} 缺少字段 {key}")
        if not isinstance(data[key], types) or isinstance(data[key], bool) and bool not in types:
            raise ConfigError(f"{what} 字段 {key} 类型错误: {type(data[key]).__name__}")


_NUMBER = (int, float)
_OPTIONAL_NUMBER = (int, float, type(None))


@dataclass
class RunReport:
    """一次适配 + 评估的结果"""

    method: str
    eer: float
    trainable_params: int
    total_params: int
    param_ratio: float
    epoch_time_ms: float
    float_footprint: int
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    source_eer: Optional[float] = None
    best_epoch: Optional[int] = None

    _SCHEMA = {
        "method": (str,), "eer": _NUMBER, "trainable_params": (int,), "total_params": (int,),
        "param_ratio": _NUMBER, "epoch_time_ms": _NUMBER, "float_footprint": (int,), "seed": (int,),
        "config": (dict,), "source_eer": _OPTIONAL_NUMBER, "best_epoch": (int, type(None)),
    }

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        _require_keys(data, cls._SCHEMA, "运行报告")
        unknown = sorted(set(data) - set(cls._SCHEMA))
        if unknown:
            raise ConfigError(f"运行报告含未知字段: {', '.join(unknown)}")
        if not 0.0 <= data["eer"] <= 1.0:
            raise ConfigError(f"运行报告 eer 超出 [0, 1]: {data['eer']}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


def _axis_key(axis: str, value) -> tuple:
    if axis == "method":
        return (METHOD_ORDER.index(value),)
    if axis == "targets":
        return (TARGET_SUBSETS.index(value),)
    return (value,)


def targets_label(targets) -> str:
    """q,v → W_q, W_v"""
    return ", ".join(f"W_{t}" for t in normalize_targets(targets))


@dataclass
class SweepPoint:
    value: Any
    report: RunReport
    rank: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"value": self.value, "rank": self.rank, "report": self.report.to_dict()}


@dataclass
class SweepResult:
    """沿一个轴的扫描结果；取值唯一且按轴的自然顺序排列

    targets 轴可以同时扫描多个秩，此时 (取值, 秩) 唯一。
    """

    axis: str
    points: List[SweepPoint] = field(default_factory=list)
    master_seed: int = 0

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"未知的扫描轴: {self.axis!r}（可选 {', '.join(SWEEP_AXES)}）")
        self.validate()

    def validate(self) -> "SweepResult":
        keys = [(_axis_key(self.axis, p.value), p.rank or 0) for p in self.points]
        if len(set(keys)) != len(keys):
            raise ConfigError(f"扫描 {self.axis} 的取值重复")
        if keys != sorted(keys):
            raise ConfigError(f"扫描 {self.axis} 的取值未按顺序排列")
        return self

    def ranks(self) -> List[int]:
        return sorted({p.rank for p in self.points if p.rank is not None})

    def to_dict(self) -> Dict[str, Any]:
        return {"axis": self.axis, "master_seed": self.master_seed,
                "points": [p.to_dict() for p in self.points]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepResult":
        _require_keys(data, {"axis": (str,), "master_seed": (int,), "points": (list,)}, "扫描结果")
        points = []
        for item in data["points"]:
            _require_keys(item, {"value": (str, int, float), "rank": (int, type(None)), "report": (dict,)},
                          "扫描点")
            points.append(SweepPoint(item["value"], RunReport.from_dict(item["report"]), item["rank"]))
        return cls(axis=data["axis"], points=points, master_seed=data["master_seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        return cls.from_dict(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        """按结果表格的列布局输出"""
        if self.axis == "rank":
            rows = [{"Rank r": p.value, "#Parameters": p.report.trainable_params,
                     "EER(%)": round(100 * p.report.eer, 2)} for p in self.points]
            return pd.DataFrame(rows, columns=["Rank r", "#Parameters", "EER(%)"])
        if self.axis == "targets":
            ranks = self.ranks()
            if len(ranks) <= 1:
                rows = [{"Weight Type": targets_label(p.value), "EER(%)": round(100 * p.report.eer, 2)}
                        for p in self.points]
                return pd.DataFrame(rows, columns=["Weight Type", "EER(%)"])
            frame = pd.DataFrame([{"Weight Type": targets_label(p.value), "rank": f"r={p.rank}",
                                   "EER(%)": round(100 * p.report.eer, 2)} for p in self.points])
            order = [targets_label(v) for v in TARGET_SUBSETS if any(p.value == v for p in self.points)]
            grid = frame.pivot(index="Weight Type", columns="rank", values="EER(%)")
            grid = grid.reindex(index=order, columns=[f"r={r}" for r in ranks])
            grid.columns.name = None
            return grid.reset_index()
        if self.axis == "length":
            rows = [{"Length(frames)": p.value, "Train Time(s)": round(p.report.epoch_time_ms / 1000.0, 4),
                     "EER(%)": round(100 * p.report.eer, 2)} for p in self.points]
            return pd.DataFrame(rows, columns=["Length(frames)", "Train Time(s)", "EER(%)"])
        columns = ["Method", "Train Time(s)", "#Parameters", "EER(%)", "Source EER(%)"]
        rows = []
        for p in self.points:
            source = p.report.source_eer
            rows.append({"Method": p.report.method if self.axis == "method" else p.value,
                         "Train Time(s)": round(p.report.epoch_time_ms / 1000.0, 4),
                         "#Parameters": p.report.trainable_params,
                         "EER(%)": round(100 * p.report.eer, 2),
                         "Source EER(%)": None if source is None else round(100 * source, 2)})
        return pd.DataFrame(rows, columns=columns)


@dataclass
class BenchCell:
    length: int
    batch: int
    method: str
    epoch_time_ms: float
    float_footprint: int
    epoch_times_ms: List[float] = field(default_factory=list)


@dataclass
class BenchResult:
    """效率基准：每个 (长度, 批大小) 格子里全量微调与 LoRA 的轮耗时和驻留浮点数"""

    lengths: List[int]
    batches: List[int]
    cells: List[BenchCell] = field(default_factory=list)
    seed: int = 0

    def cell(self, length: int, batch: int, method: str) -> BenchCell:
        for c in self.cells:
            if c.length == length and c.batch == batch and c.method == method:
                return c
        raise KeyError(f"没有 length={length}, batch={batch}, method={method} 的基准格子")

    def to_dict(self) -> Dict[str, Any]:
        return {"lengths": list(self.lengths), "batches": list(self.batches), "seed": self.seed,
                "cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BenchResult":
        _require_keys(data, {"lengths": (list,), "batches": (list,), "seed": (int,), "cells": (list,)}, "基准结果")
        cells = []
        for item in data["cells"]:
            _require_keys(item, {"length": (int,), "batch": (int,), "method": (str,),
                                 "epoch_time_ms": _NUMBER, "float_footprint": (int,),
                                 "epoch_times_ms": (list,)}, "基准格子")
            cells.append(BenchCell(**item))
        return cls(lengths=data["lengths"], batches=data["batches"], cells=cells, seed=data["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "BenchResult":
        return cls.from_dict(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        """长表：每个格子一行，两种方法并排"""
        rows = []
        for L in self.lengths:
            for b in self.batches:
                ft, lora = self.cell(L, b, "finetune"), self.cell(L, b, "lora")
                rows.append({"Length": L, "Batch": b,
                             "Finetune Time(s)": round(ft.epoch_time_ms / 1000.0, 4),
                             "LoRA Time(s)": round(lora.epoch_time_ms / 1000.0, 4),
                             "Finetune Footprint": ft.float_footprint,
                             "LoRA Footprint": lora.float_footprint})
        return pd.DataFrame(rows)

    def to_grid(self) -> pd.DataFrame:
        """宽表：行为长度，列为 批大小 × 方法 的轮耗时（秒）"""
        rows = []
        for L in self.lengths:
            row = {"Length": L}
            for b in self.batches:
                row[f"B={b} Finetune"] = round(self.cell(L, b, "finetune").epoch_time_ms / 1000.0, 4)
                row[f"B={b} LoRA"] = round(self.cell(L, b, "lora").epoch_time_ms / 1000.0, 4)
            rows.append(row)
        return pd.DataFrame(rows)


def param_ratio(finetune_trainable: int, trainable: int) -> float:
    return finetune_trainable / trainable if trainable else math.inf


def sorted_values(axis: str, values: Sequence) -> List:
    """按轴的自然顺序去重排序"""
    unique = list(dict.fromkeys(values))
    return sorted(unique, key=lambda v: _axis_key(axis, v))
