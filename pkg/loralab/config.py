"""配置模块

模型几何、训练超参数、合成数据规格、适配方法以及整体实验配置。
所有配置都是 dataclass，提供 validate / from_dict / to_dict，
JSON 配置文件由 load_config 读取。
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError, ParseError


# 全规模预训练模型上的训练设置；桌面规模实验使用 DESK_*
FULL_SCALE_LEARNING_RATE = 1e-5
FULL_SCALE_BATCH_SIZE = 16
FULL_SCALE_EPOCHS = 50
DESK_LEARNING_RATE = 1e-3
DESK_PRETRAIN_EPOCHS = 10
DESK_ADAPT_EPOCHS = 20

SOURCE_ARTIFACT_FREQ = 4.0
TARGET_ARTIFACT_FREQ = 7.0

LORA_TARGETS = ("q", "k", "v")
METHOD_KINDS = ("fixed", "finetune", "adapter", "lora")


def _from_dict(cls, data: Dict[str, Any], section: str):
    """按字段名构造 dataclass，未知键报错"""
    if not isinstance(data, dict):
        raise ConfigError(f"配置段 {section} 必须是对象，实际为 {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"配置段 {section} 含未知键: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"配置段 {section} 无效: {e}") from e


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class ModelConfig:
    """玩具 Transformer 编码器的几何参数"""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    n_classes: int = 2
    max_seq_len: int = 32
    init_std: float = 0.02

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            _require(isinstance(value, int) and value >= 1, f"model.{name} 必须是正整数，实际为 {value!r}")
        _require(self.d_model % self.n_heads == 0,
                 f"model.n_heads({self.n_heads}) 必须整除 model.d_model({self.d_model})")
        _require(self.n_classes == 2, f"model.n_classes 固定为 2，实际为 {self.n_classes}")
        _require(self.init_std > 0 and math.isfinite(self.init_std), f"model.init_std 必须为正，实际为 {self.init_std}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data, "model").validate()


@dataclass
class TrainConfig:
    """Adam 训练超参数

    learning_rate 默认取全规模设置 1e-5；桌面规模的合成实验使用 DESK_LEARNING_RATE。
    """

    learning_rate: float = FULL_SCALE_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = FULL_SCALE_BATCH_SIZE
    epochs: int = FULL_SCALE_EPOCHS
    seed: int = 0
    run_log: Optional[str] = None

    def validate(self) -> "TrainConfig":
        _require(self.learning_rate > 0, f"train.learning_rate 必须大于 0，实际为 {self.learning_rate}")
        _require(0 <= self.beta1 < 1, f"train.beta1 必须在 [0, 1) 内，实际为 {self.beta1}")
        _require(0 <= self.beta2 < 1, f"train.beta2 必须在 [0, 1) 内，实际为 {self.beta2}")
        _require(self.eps > 0, f"train.eps 必须大于 0，实际为 {self.eps}")
        _require(isinstance(self.batch_size, int) and self.batch_size >= 1,
                 f"train.batch_size 必须 ≥ 1，实际为 {self.batch_size!r}")
        _require(isinstance(self.epochs, int) and self.epochs >= 0, f"train.epochs 必须 ≥ 0，实际为 {self.epochs!r}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data, "train").validate()


@dataclass
class DatasetSpec:
    """合成检测数据的生成规格

    artifact_dims 为 None 时取 feat_dim // 4。
    """

    n_per_class: int = 100
    seq_len: int = 32
    feat_dim: int = 64
    noise_sigma: float = 1.0
    artifact_amp: float = 0.6
    artifact_freq: float = SOURCE_ARTIFACT_FREQ
    artifact_dims: Optional[int] = None
    base_freq: float = 1.0
    seed: int = 0
    split: str = "train"

    @property
    def affected_dims(self) -> int:
        return self.feat_dim // 4 if self.artifact_dims is None else self.artifact_dims

    def validate(self) -> "DatasetSpec":
        _require(isinstance(self.n_per_class, int) and self.n_per_class >= 1,
                 f"data.n_per_class 必须 ≥ 1，实际为 {self.n_per_class!r}")
        _require(isinstance(self.seq_len, int) and self.seq_len >= 2, f"data.seq_len 必须 ≥ 2，实际为 {self.seq_len!r}")
        _require(isinstance(self.feat_dim, int) and self.feat_dim >= 1, f"data.feat_dim 必须 ≥ 1，实际为 {self.feat_dim!r}")
        _require(self.noise_sigma >= 0, f"data.noise_sigma 不能为负，实际为 {self.noise_sigma}")
        _require(self.artifact_amp >= 0, f"data.artifact_amp 不能为负，实际为 {self.artifact_amp}")
        _require(0 <= self.affected_dims <= self.feat_dim,
                 f"data.artifact_dims({self.affected_dims}) 必须在 [0, feat_dim={self.feat_dim}] 内")
        _require(self.split in ("train", "dev", "eval"), f"data.split 必须是 train/dev/eval，实际为 {self.split!r}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        return _from_dict(cls, data, "data").validate()


def normalize_targets(targets) -> Tuple[str, ...]:
    """把 "q,v" / ["V","q"] 等写法规范为按 q,k,v 顺序的元组"""
    if isinstance(targets, str):
        targets = [t for t in targets.replace("W_", "").split(",")]
    items = {str(t).strip().lower().replace("w_", "") for t in targets if str(t).strip()}
    unknown = sorted(items - set(LORA_TARGETS))
    if unknown:
        raise ConfigError(f"未知的 LoRA 注入位置: {', '.join(unknown)}（可选 q, k, v）")
    if not items:
        raise ConfigError("LoRA 注入位置不能为空")
    return tuple(t for t in LORA_TARGETS if t in items)


@dataclass
class LoRAConfig:
    """LoRA 秩、缩放与注入位置；alpha 为 None 时等于 rank（缩放为 1）"""

    rank: int = 4
    alpha: Optional[float] = None
    targets: Tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        self.targets = normalize_targets(self.targets)

    @property
    def scale(self) -> float:
        alpha = float(self.rank) if self.alpha is None else float(self.alpha)
        return alpha / self.rank

    def validate(self, d_model: Optional[int] = None) -> "LoRAConfig":
        _require(isinstance(self.rank, int) and self.rank >= 1, f"LoRA rank 必须是正整数，实际为 {self.rank!r}")
        if d_model is not None:
            _require(self.rank <= d_model, f"LoRA rank({self.rank}) 不能超过 d_model({d_model})")
        _require(self.alpha is None or self.alpha > 0, f"LoRA alpha 必须为正，实际为 {self.alpha}")
        return self


@dataclass
class AdaptationMethod:
    """Fixed | FullFinetune | LoRA(LoRAConfig) | Adapter(m) 四选一"""

    kind: str = "lora"
    lora: Optional[LoRAConfig] = None
    bottleneck: Optional[int] = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"未知的适配方法: {self.kind!r}（可选 {', '.join(METHOD_KINDS)}）")
        if self.kind == "lora" and self.lora is None:
            self.lora = LoRAConfig()
        if self.kind != "lora":
            self.lora = None
        if self.kind != "adapter":
            self.bottleneck = None

    @classmethod
    def fixed(cls) -> "AdaptationMethod":
        return cls("fixed")

    @classmethod
    def finetune(cls) -> "AdaptationMethod":
        return cls("finetune")

    @classmethod
    def with_lora(cls, rank: int = 4, alpha: Optional[float] = None, targets=("q", "v")) -> "AdaptationMethod":
        return cls("lora", lora=LoRAConfig(rank=rank, alpha=alpha, targets=targets))

    @classmethod
    def adapter(cls, bottleneck: int) -> "AdaptationMethod":
        return cls("adapter", bottleneck=bottleneck)

    def resolved_bottleneck(self, cfg: ModelConfig) -> int:
        """未指定瓶颈宽度时取 d_ff / 8"""
        return max(1, cfg.d_ff // 8) if self.bottleneck is None else self.bottleneck

    def validate(self, cfg: ModelConfig) -> "AdaptationMethod":
        if self.kind == "lora":
            self.lora.validate(cfg.d_model)
        elif self.kind == "adapter":
            m = self.resolved_bottleneck(cfg)
            _require(isinstance(m, int) and 1 <= m <= cfg.d_ff,
                     f"Adapter 瓶颈宽度 m({m}) 必须在 [1, d_ff={cfg.d_ff}] 内")
        return self

    def descriptor(self) -> str:
        """简短的方法描述，如 lora(r=4,alpha=4,targets=q,v)"""
        if self.kind == "lora":
            alpha = self.lora.rank if self.lora.alpha is None else self.lora.alpha
            return f"lora(r={self.lora.rank},alpha={alpha:g},targets={','.join(self.lora.targets)})"
        if self.kind == "adapter":
            m = "auto" if self.bottleneck is None else self.bottleneck
            return f"adapter(m={m})"
        return self.kind

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "lora":
            data.update(rank=self.lora.rank, alpha=self.lora.alpha, targets=list(self.lora.targets))
        elif self.kind == "adapter":
            data["bottleneck"] = self.bottleneck
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdaptationMethod":
        if not isinstance(data, dict):
            raise ConfigError(f"配置段 method 必须是对象，实际为 {type(data).__name__}")
        data = dict(data)
        kind = data.pop("kind", "lora")
        allowed = {"lora": {"rank", "alpha", "targets"}, "adapter": {"bottleneck"}}.get(kind, set())
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"配置段 method({kind}) 含未知键: {', '.join(unknown)}")
        if kind == "lora":
            lora = LoRAConfig(rank=data.get("rank", 4), alpha=data.get("alpha"),
                              targets=data.get("targets", ("q", "v")))
            return cls("lora", lora=lora)
        return cls(kind, bottleneck=data.get("bottleneck"))


@dataclass
class LabConfig:
    """完整实验配置：模型、训练、数据、适配方法和预训练/适配轮数"""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=DESK_LEARNING_RATE))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    method: AdaptationMethod = field(default_factory=AdaptationMethod)
    pretrain_epochs: int = DESK_PRETRAIN_EPOCHS
    adapt_epochs: int = DESK_ADAPT_EPOCHS

    def validate(self) -> "LabConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.method.validate(self.model)
        _require(self.data.feat_dim == self.model.d_model,
                 f"data.feat_dim({self.data.feat_dim}) 必须等于 model.d_model({self.model.d_model})")
        _require(self.data.seq_len == self.model.max_seq_len,
                 f"data.seq_len({self.data.seq_len}) 必须等于 model.max_seq_len({self.model.max_seq_len})")
        _require(self.pretrain_epochs >= 0 and self.adapt_epochs >= 0, "pretrain_epochs / adapt_epochs 不能为负")
        return self

    def with_seed(self, seed: Optional[int]) -> "LabConfig":
        """seed 不为 None 时同时替换数据种子与训练种子"""
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed), data=replace(self.data, seed=seed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "method": self.method.to_dict(),
            "pretrain_epochs": self.pretrain_epochs,
            "adapt_epochs": self.adapt_epochs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabConfig":
        if not isinstance(data, dict):
            raise ConfigError("配置文件顶层必须是 JSON 对象")
        unknown = sorted(set(data) - {"model", "train", "data", "method", "pretrain_epochs", "adapt_epochs"})
        if unknown:
            raise ConfigError(f"配置文件含未知键: {', '.join(unknown)}")
        defaults = cls()
        lab = cls(
            model=ModelConfig.from_dict(data["model"]) if "model" in data else defaults.model,
            train=TrainConfig.from_dict(data["train"]) if "train" in data else defaults.train,
            data=DatasetSpec.from_dict(data["data"]) if "data" in data else defaults.data,
            method=AdaptationMethod.from_dict(data["method"]) if "method" in data else defaults.method,
            pretrain_epochs=data.get("pretrain_epochs", defaults.pretrain_epochs),
            adapt_epochs=data.get("adapt_epochs", defaults.adapt_epochs),
        )
        return lab.validate()


def load_config(path: str) -> LabConfig:
    """从 JSON 文件加载实验配置

    Args:
        path: 配置文件路径

    Returns:
        LabConfig: 校验过的配置
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError as e:
        raise ConfigError(f"配置文件不存在: {path}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 解析失败: {e.msg}", path=path, line=e.lineno) from e
    return LabConfig.from_dict(data)


def with_overrides(obj, **overrides):
    """返回替换了非 None 字段的副本"""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return replace(obj, **changes) if changes else obj
