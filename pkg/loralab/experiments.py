"""实验驱动模块

源任务预训练、目标任务适配与评估、沿 rank / targets / length / method 轴的扫描，
以及全量微调与 LoRA 的效率基准。
"""

import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

from .adaptation import AdaptationState, base_param_count, count_params, instrument
from .config import AdaptationMethod, LabConfig, LoRAConfig, ModelConfig, normalize_targets
from .errors import ConfigError
from .evaluation import compute_eer
from .model import ModelParams, init_params
from .numerics import RngStream, splitmix64
from .reports import (BenchCell, BenchResult, RunReport, SweepPoint, SweepResult, TARGET_SUBSETS,
                      float_footprint, param_ratio, sorted_values)
from .synthdata import Dataset, generate_dataset, make_task_splits, task_spec
from .training import FitResult, Trainer, score_dataset

logger = logging.getLogger(__name__)

SWEEP_DEFAULTS = {
    "rank": (2, 4, 8, 16),
    "targets": TARGET_SUBSETS,
    "length": (8, 16, 32, 64),
    "method": ("fixed", "finetune", "adapter", "lora"),
}
METHOD_SWEEP_LORA_RANK = 2
BENCH_LENGTHS = (8, 16, 32, 64)
BENCH_BATCHES = (2, 4, 8, 16, 32)
BENCH_TRIALS_PER_CLASS = 32
BENCH_REPEATS = 3

ProgressCallback = Optional[Callable[[float, str], None]]


def point_seed(master_seed: int, index: int) -> int:
    """扫描点的种子：splitmix64(master_seed XOR index)"""
    return splitmix64(master_seed ^ index)


def point_run_log(run_log: Optional[str], index: int) -> Optional[str]:
    """扫描点各自的逐轮日志：runs.jsonl -> runs.point03.jsonl"""
    if not run_log:
        return None
    root, ext = os.path.splitext(run_log)
    return f"{root}.point{index:02d}{ext or '.jsonl'}"


@dataclass
class BaseModel:
    """源任务上预训练得到的基础模型"""

    cfg: ModelConfig
    params: ModelParams
    fit: FitResult
    source: Dict[str, Dataset]


@dataclass
class AdaptOutcome:
    report: RunReport
    params: ModelParams
    state: AdaptationState
    fit: FitResult


def prepare_base(lab: LabConfig, master_seed: Optional[int] = None, epochs: Optional[int] = None,
                 progress_callback: ProgressCallback = None) -> BaseModel:
    """在源任务（f_a=4）上全量训练基础模型，按开发集 EER 选最佳轮次

    Args:
        lab: 实验配置
        master_seed: 主种子，给出时同时覆盖 data.seed 与 train.seed；
            数据划分由 data.seed 派生，初始化与洗牌由 train.seed 派生
        epochs: 预训练轮数，默认 lab.pretrain_epochs
        progress_callback: 进度回调

    Returns:
        BaseModel: 基础模型及源任务数据
    """
    lab = lab.with_seed(master_seed).validate()
    seed = lab.train.seed
    source = make_task_splits(lab.data, "source", lab.data.seed)
    rng = RngStream(seed)
    params = init_params(lab.model, rng)
    instrument(params, lab.model, AdaptationMethod.finetune(), rng)
    trainer = Trainer(lab.model, params, None, lab.train)
    epochs = lab.pretrain_epochs if epochs is None else epochs
    fit = trainer.fit(source["train"], source["dev"], RngStream(splitmix64(seed)), epochs=epochs,
                      progress_callback=progress_callback)
    logger.info("预训练完成: %d 轮, 最佳轮次 %s, 源任务开发集 EER=%s", epochs, fit.best_epoch, fit.best_dev_eer)
    return BaseModel(lab.model, params, fit, source)


def adapt_and_evaluate(lab: LabConfig, base: BaseModel, method: AdaptationMethod, target: Dict[str, Dataset],
                       seed: int, cfg: Optional[ModelConfig] = None, source_eval: Optional[Dataset] = None,
                       progress_callback: ProgressCallback = None) -> AdaptOutcome:
    """在基础模型副本上挂载方法，目标任务上训练 adapt_epochs 轮，再在评估集上计算 EER

    source_eval 给出时，另外记录适配后在源任务评估集上的 EER（遗忘程度）。
    """
    cfg = cfg or base.cfg
    params = base.params.copy()
    state = instrument(params, cfg, method, RngStream(seed))
    trainer = Trainer(cfg, params, state, lab.train)
    fit = trainer.fit(target["train"], target.get("dev"), RngStream(splitmix64(seed)), epochs=lab.adapt_epochs,
                      progress_callback=progress_callback)
    eer = compute_eer(score_dataset(cfg, params, state, target["eval"])).eer
    source_eer = None
    if source_eval is not None:
        source_eer = compute_eer(score_dataset(cfg, params, state, source_eval)).eer
    counts = count_params(params, state)
    config = lab.to_dict()
    config["model"] = cfg.to_dict()
    config["method"] = method.to_dict()
    report = RunReport(
        method=method.descriptor(),
        eer=eer,
        trainable_params=counts.trainable,
        total_params=counts.total,
        param_ratio=param_ratio(base_param_count(cfg), counts.trainable),
        epoch_time_ms=fit.median_epoch_ms(),
        float_footprint=float_footprint(cfg, method, lab.train.batch_size, cfg.max_seq_len),
        seed=seed,
        config=config,
        source_eer=source_eer,
        best_epoch=fit.best_epoch,
    )
    logger.info("%s: EER=%.4f, 可训练参数 %d", report.method, eer, counts.trainable)
    return AdaptOutcome(report, params, state, fit)


def method_for(name: str, lora_rank: int = METHOD_SWEEP_LORA_RANK) -> AdaptationMethod:
    """方法对比中使用的四种方法；Adapter 瓶颈取 d_ff/8，LoRA 注入 q,v"""
    if name == "fixed":
        return AdaptationMethod.fixed()
    if name == "finetune":
        return AdaptationMethod.finetune()
    if name == "adapter":
        return AdaptationMethod("adapter")
    if name == "lora":
        return AdaptationMethod.with_lora(rank=lora_rank, targets=("q", "v"))
    raise ConfigError(f"未知的适配方法: {name!r}")


@dataclass
class _Job:
    value: object
    rank: Optional[int]
    method: AdaptationMethod
    cfg: ModelConfig
    length: Optional[int] = None


def _lora_base(lab: LabConfig) -> LoRAConfig:
    return lab.method.lora if lab.method.kind == "lora" else LoRAConfig()


def _sweep_jobs(lab: LabConfig, axis: str, values: Sequence, ranks: Optional[Sequence[int]]) -> List[_Job]:
    lora = _lora_base(lab)
    jobs = []
    if axis == "rank":
        for r in values:
            jobs.append(_Job(int(r), None, AdaptationMethod.with_lora(int(r), lora.alpha, lora.targets), lab.model))
    elif axis == "targets":
        for t in values:
            for r in (sorted(set(int(r) for r in ranks)) if ranks else [lora.rank]):
                jobs.append(_Job(t, int(r), AdaptationMethod.with_lora(int(r), lora.alpha, t), lab.model))
    elif axis == "length":
        for L in values:
            jobs.append(_Job(int(L), None, lab.method, replace(lab.model, max_seq_len=int(L)), length=int(L)))
    else:
        rank = ranks[0] if ranks else METHOD_SWEEP_LORA_RANK
        for name in values:
            jobs.append(_Job(name, None, method_for(name, rank), lab.model))
    for job in jobs:
        job.method.validate(job.cfg)
    return jobs


def _normalize_values(axis: str, values: Optional[Sequence]) -> List:
    if axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"未知的扫描轴: {axis!r}（可选 {', '.join(SWEEP_DEFAULTS)}）")
    values = list(SWEEP_DEFAULTS[axis] if values is None else values)
    if not values:
        raise ConfigError(f"扫描轴 {axis} 没有取值")
    if axis == "targets":
        values = [",".join(normalize_targets(v)) for v in values]
    elif axis == "method":
        for v in values:
            method_for(v)
    else:
        try:
            values = [int(v) for v in values]
        except (TypeError, ValueError):
            raise ConfigError(f"扫描轴 {axis} 的取值必须是整数: {values}") from None
        if min(values) < (2 if axis == "length" else 1):
            raise ConfigError(f"扫描轴 {axis} 的取值过小: {min(values)}")
    return sorted_values(axis, values)


def run_sweep(lab: LabConfig, axis: str, values: Optional[Sequence] = None, master_seed: Optional[int] = None,
              ranks: Optional[Sequence[int]] = None, workers: int = 1, base: Optional[BaseModel] = None,
              progress_callback: ProgressCallback = None) -> SweepResult:
    """沿一个轴做多次"适配 + 评估"，共享同一个基础模型和数据种子

    length 轴：目标数据按最长长度生成，每个点从前面截断到该长度；
    基础模型没有位置编码，权重与序列长度无关，可以直接用于任意长度。
    method 轴额外记录源任务评估集 EER。
    train.run_log 给出时，每个扫描点的逐轮统计写到各自的文件，并发执行时互不交错。

    Args:
        lab: 实验配置
        axis: rank | targets | length | method
        values: 轴取值，默认取各轴的标准取值
        master_seed: 主种子，给出时同时覆盖 data.seed 与 train.seed；各点种子由 train.seed 派生
        ranks: targets 轴的秩网格；method 轴中 LoRA 使用其第一个值
        workers: 并发执行扫描点的线程数
        base: 已有的基础模型，None 时现场预训练
        progress_callback: 进度回调

    Returns:
        SweepResult: 扫描结果
    """
    lab = lab.with_seed(master_seed)
    master_seed = lab.train.seed
    values = _normalize_values(axis, values)
    jobs = _sweep_jobs(lab, axis, values, ranks)
    if progress_callback:
        progress_callback(0.0, "预训练基础模型...")
    base = base or prepare_base(lab)
    data_spec = lab.data
    if axis == "length":
        data_spec = replace(lab.data, seq_len=max(values))
    target = make_task_splits(data_spec, "target", lab.data.seed)
    source_eval = base.source["eval"] if axis == "method" else None

    def run(index: int) -> SweepPoint:
        job = jobs[index]
        splits = target
        if job.length is not None:
            splits = {name: ds.cropped(job.length) for name, ds in target.items()}
        point_lab = replace(lab, train=replace(lab.train, run_log=point_run_log(lab.train.run_log, index)))
        outcome = adapt_and_evaluate(point_lab, base, job.method, splits, point_seed(master_seed, index),
                                     cfg=job.cfg, source_eval=source_eval)
        return SweepPoint(job.value, outcome.report, job.rank)

    points: List[SweepPoint] = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, point in enumerate(pool.map(run, range(len(jobs)))):
                points.append(point)
                if progress_callback:
                    progress_callback((i + 1) / len(jobs), f"{axis}={point.value} 完成")
    else:
        for i in range(len(jobs)):
            points.append(run(i))
            if progress_callback:
                progress_callback((i + 1) / len(jobs), f"{axis}={points[-1].value} 完成")
    logger.info("扫描 %s 完成: %d 个点", axis, len(points))
    return SweepResult(axis, points, master_seed)


def run_bench(lab: LabConfig, lengths: Sequence[int] = BENCH_LENGTHS, batches: Sequence[int] = BENCH_BATCHES,
              n_per_class: int = BENCH_TRIALS_PER_CLASS, seed: Optional[int] = None,
              lora: Optional[LoRAConfig] = None,
              progress_callback: ProgressCallback = None) -> BenchResult:
    """全量微调与 LoRA 的效率基准，逐格串行执行

    每格先热身一轮，再取 3 轮的中位数耗时；驻留浮点数按解析公式计算。
    seed 给出时同时覆盖 data.seed 与 train.seed。
    """
    lab = lab.with_seed(seed)
    seed = lab.train.seed
    lengths = sorted(set(int(L) for L in lengths))
    batches = sorted(set(int(b) for b in batches))
    if not lengths or not batches or min(lengths) < 2 or min(batches) < 1:
        raise ConfigError(f"基准网格无效: lengths={lengths}, batches={batches}")
    lora = lora or LoRAConfig()
    methods = {"finetune": AdaptationMethod.finetune(), "lora": AdaptationMethod("lora", lora=lora)}
    result = BenchResult(lengths=lengths, batches=batches, seed=seed)
    total = len(lengths) * len(batches) * len(methods)
    done = 0
    for L in lengths:
        spec = task_spec(replace(lab.data, seq_len=L), "target", "train", lab.data.seed, n_per_class)
        data = generate_dataset(spec)
        cfg = replace(lab.model, max_seq_len=L)
        for b in batches:
            train_cfg = replace(lab.train, batch_size=b, run_log=None)
            for name, method in methods.items():
                rng = RngStream(seed)
                params = init_params(cfg, rng)
                state = instrument(params, cfg, method, rng)
                trainer = Trainer(cfg, params, state, train_cfg)
                shuffle = RngStream(splitmix64(seed))
                trainer.train_epoch(data, shuffle)
                times = [trainer.train_epoch(data, shuffle).wall_time_ms for _ in range(BENCH_REPEATS)]
                result.cells.append(BenchCell(L, b, name, statistics.median(times),
                                              float_footprint(cfg, method, b, L), times))
                done += 1
                if progress_callback:
                    progress_callback(done / total, f"L={L}, batch={b}, {name}")
            logger.info("基准 L=%d batch=%d: finetune %.1f ms, lora %.1f ms", L, b,
                        result.cell(L, b, "finetune").epoch_time_ms, result.cell(L, b, "lora").epoch_time_ms)
    return result
