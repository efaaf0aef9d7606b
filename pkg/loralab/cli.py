"""命令行模块

实验室的操作入口：生成数据、预训练、适配、评估、梯度检查、参数统计、
合并权重、扫描和效率基准。

退出码：0 成功，2 配置/输入错误，3 运行时错误。
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

from .adaptation import count_params, instrument, merge_adaptation
from .checkpoint import (apply_delta, base_checkpoint, delta_checkpoint, load_checkpoint, save_checkpoint)
from .config import METHOD_KINDS, AdaptationMethod, LabConfig, LoRAConfig, load_config, with_overrides
from .errors import ConfigError
from .evaluation import eer_report, read_scores, write_scores
from .experiments import (BENCH_BATCHES, BENCH_LENGTHS, BENCH_TRIALS_PER_CLASS, BaseModel, adapt_and_evaluate,
                          prepare_base, run_bench, run_sweep)
from .exporter import export_bench_chart, export_bench_to_excel, export_sweep_chart, export_sweep_to_excel
from .model import init_params
from .numerics import RngStream
from .reports import float_footprint
from .synthdata import SPLITS, TASKS, generate_dataset, make_task_splits, read_dataset, task_spec, write_dataset
from .training import FitResult, grad_check, score_dataset, tiny_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
GRAD_CHECK_TOLERANCE = 1e-4


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的整数: {text!r}") from None


def _emit(payload: Dict[str, Any], path: Optional[str]) -> None:
    """写 JSON 报告；未给路径时打印到标准输出"""
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        logger.info("报告已写入 %s", path)
    else:
        print(text)


def _load_lab(args) -> LabConfig:
    """读取配置文件（可选），再用命令行参数覆盖"""
    lab = load_config(args.config) if args.config else LabConfig()
    seq_len = getattr(args, "seq_len", None)
    lab = replace(
        lab,
        train=with_overrides(lab.train, learning_rate=args.lr, batch_size=args.batch_size, run_log=args.run_log,
                             seed=args.seed),
        data=with_overrides(lab.data, n_per_class=args.n_per_class, seq_len=seq_len, seed=args.seed,
                            artifact_amp=getattr(args, "artifact_amp", None)),
        model=with_overrides(lab.model, max_seq_len=seq_len),
        pretrain_epochs=args.pretrain_epochs if args.pretrain_epochs is not None else lab.pretrain_epochs,
        adapt_epochs=args.adapt_epochs if args.adapt_epochs is not None else lab.adapt_epochs,
    )
    return lab.validate()


def _method_from_args(args, lab: LabConfig) -> AdaptationMethod:
    if args.method is None:
        return lab.method
    if args.method == "lora":
        base = lab.method.lora if lab.method.kind == "lora" else LoRAConfig()
        lora = LoRAConfig(rank=args.rank if args.rank is not None else base.rank,
                          alpha=args.alpha if args.alpha is not None else base.alpha,
                          targets=args.targets if args.targets is not None else base.targets)
        return AdaptationMethod("lora", lora=lora)
    if args.method == "adapter":
        return AdaptationMethod("adapter", bottleneck=args.bottleneck)
    return AdaptationMethod(args.method)


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    lab = _load_lab(args)
    spec = task_spec(lab.data, args.task, args.split, lab.data.seed)
    dataset = generate_dataset(spec)
    write_dataset(args.out, dataset)
    _emit({"out": args.out, "task": args.task, "split": args.split, "seed": lab.data.seed,
           "n_trials": len(dataset), "seq_len": dataset.seq_len, "feat_dim": dataset.feat_dim,
           "artifact_freq": spec.artifact_freq}, args.report)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    lab = _load_lab(args)
    base = prepare_base(lab)
    meta = {"seed": lab.train.seed, "data_seed": lab.data.seed,
            "best_epoch": base.fit.best_epoch, "best_dev_eer": base.fit.best_dev_eer}
    save_checkpoint(args.out, base_checkpoint(lab.model, base.params, meta))
    _emit({"checkpoint": args.out, **meta, "history": [s.to_dict() for s in base.fit.history]}, args.report)
    return EXIT_OK


def _target_splits(args, lab: LabConfig):
    given = {"train": args.train, "dev": args.dev, "eval": args.eval}
    if any(given.values()):
        missing = [k for k in ("train", "eval") if not given[k]]
        if missing:
            raise ConfigError(f"指定数据集文件时必须同时给出 --train 和 --eval（缺少 {', '.join(missing)}）")
        return {k: read_dataset(path, split=k) for k, path in given.items() if path}
    return make_task_splits(lab.data, "target", lab.data.seed)


def cmd_adapt(args) -> int:
    lab = _load_lab(args)
    ckpt = load_checkpoint(args.base, expect="base")
    method = _method_from_args(args, lab)
    lab = replace(lab, model=ckpt.model, method=method).validate()
    base = BaseModel(ckpt.model, ckpt.tensors, FitResult(), {})
    outcome = adapt_and_evaluate(lab, base, method, _target_splits(args, lab), lab.train.seed)
    if args.out:
        save_checkpoint(args.out, delta_checkpoint(ckpt.model, outcome.params, outcome.state,
                                                   {"seed": lab.train.seed, "best_epoch": outcome.fit.best_epoch}))
    _emit(outcome.report.to_dict(), args.report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.scores and not args.data:
        _emit(eer_report(read_scores(args.scores)), args.report)
        return EXIT_OK
    if not (args.base and args.data):
        raise ConfigError("evaluate 需要 --scores，或 --base 与 --data（可选 --delta）")
    ckpt = load_checkpoint(args.base, expect="base")
    if args.delta:
        params, state = apply_delta(ckpt, load_checkpoint(args.delta, expect="delta"))
    else:
        params, state = ckpt.tensors, None
    dataset = read_dataset(args.data, split="eval")
    scores = score_dataset(ckpt.model, params, state, dataset)
    if args.scores:
        write_scores(args.scores, scores)
    _emit(eer_report(scores), args.report)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = tiny_config()
    lab = LabConfig(model=cfg, data=replace(LabConfig().data, feat_dim=cfg.d_model, seq_len=cfg.max_seq_len))
    method = _method_from_args(args, lab) if args.method else AdaptationMethod.with_lora(rank=2, targets="q,v")
    result = grad_check(cfg, method, seed=args.seed)
    _emit(result.to_dict(), args.report)
    if result.max_rel_error > GRAD_CHECK_TOLERANCE:
        print(f"错误: 梯度检查未通过，最大相对误差 {result.max_rel_error:.3e} > {GRAD_CHECK_TOLERANCE:g}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_count_params(args) -> int:
    lab = _load_lab(args)
    method = _method_from_args(args, lab)
    rng = RngStream(lab.train.seed)
    params = init_params(lab.model, rng)
    state = instrument(params, lab.model, method, rng)
    counts = count_params(params, state)
    batch = lab.train.batch_size
    _emit({"method": method.descriptor(), **counts.to_dict(),
           "trainable_percent": 100.0 * counts.trainable / params.total_size(),
           "float_footprint": float_footprint(lab.model, method, batch), "batch_size": batch}, args.report)
    return EXIT_OK


def cmd_merge(args) -> int:
    base = load_checkpoint(args.base, expect="base")
    params, state = apply_delta(base, load_checkpoint(args.delta, expect="delta"))
    merged = merge_adaptation(base.model, params, state)
    save_checkpoint(args.out, base_checkpoint(base.model, merged, {"method": state.method.descriptor()},
                                              kind="merged"))
    _emit({"checkpoint": args.out, "method": state.method.descriptor(), "total": merged.total_size()}, args.report)
    return EXIT_OK


def _write_outputs(prefix: str, payload_json: str, frame, excel: Optional[bytes], chart: Optional[bytes]) -> None:
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        f.write(payload_json + "\n")
    frame.to_csv(prefix + ".csv", index=False)
    if excel is not None:
        with open(prefix + ".xlsx", "wb") as f:
            f.write(excel)
    if chart is not None:
        with open(prefix + ".png", "wb") as f:
            f.write(chart)
    logger.info("结果已写入 %s.{json,csv}", prefix)


def cmd_sweep(args) -> int:
    lab = _load_lab(args)
    lab = replace(lab, method=_method_from_args(args, lab)).validate()
    values = None
    if args.values:
        values = [v for v in args.values.split(";")] if args.axis == "targets" else args.values.split(",")
    base = None
    if args.base:
        ckpt = load_checkpoint(args.base, expect="base")
        base = BaseModel(ckpt.model, ckpt.tensors, FitResult(), make_task_splits(lab.data, "source", lab.data.seed))
    result = run_sweep(lab, args.axis, values, ranks=args.ranks,
                       workers=args.workers, base=base)
    _write_outputs(args.out, result.to_json(), result.to_frame(),
                   export_sweep_to_excel(result) if args.excel else None,
                   export_sweep_chart(result) if args.plot else None)
    print(result.to_frame().to_string(index=False))
    return EXIT_OK


def cmd_bench(args) -> int:
    lab = _load_lab(args)
    lora = lab.method.lora if lab.method.kind == "lora" else None
    result = run_bench(lab, args.lengths, args.batches, n_per_class=args.bench_trials, lora=lora)
    _write_outputs(args.out, result.to_json(), result.to_grid(),
                   export_bench_to_excel(result) if args.excel else None,
                   export_bench_chart(result) if args.plot else None)
    result.to_frame().to_csv(args.out + "_cells.csv", index=False)
    print(result.to_grid().to_string(index=False))
    return EXIT_OK


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', '-c', help='JSON 配置文件')
    p.add_argument('--seed', '-s', type=int, help='主随机种子，同时覆盖 data.seed 与 train.seed (默认取配置值)')
    p.add_argument('--report', help='JSON 报告输出路径，默认打印到标准输出')
    p.add_argument('--lr', type=float, help='学习率')
    p.add_argument('--batch-size', type=int, help='批大小')
    p.add_argument('--n-per-class', type=int, help='每类试次数')
    p.add_argument('--pretrain-epochs', type=int, help='预训练轮数')
    p.add_argument('--adapt-epochs', type=int, help='适配轮数')
    p.add_argument('--run-log', help='逐轮统计的 JSON lines 文件')


def _add_method(p: argparse.ArgumentParser) -> None:
    p.add_argument('--method', choices=METHOD_KINDS, help='适配方法')
    p.add_argument('--rank', '-r', type=int, help='LoRA 秩')
    p.add_argument('--alpha', type=float, help='LoRA 缩放系数 alpha（默认等于秩）')
    p.add_argument('--targets', help='LoRA 注入位置，如 q,v')
    p.add_argument('--bottleneck', '-m', type=int, help='Adapter 瓶颈宽度（默认 d_ff/8）')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='loralab', description='LoRA 伪造语音检测桌面实验室')
    parser.add_argument('--verbose', '-v', action='store_true', help='输出 INFO 日志')
    parser.add_argument('--debug', action='store_true', help='输出 DEBUG 日志')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='生成合成数据集文件')
    _add_common(p)
    p.add_argument('--task', choices=list(TASKS), default='target', help='source 或 target 任务 (默认: target)')
    p.add_argument('--split', choices=SPLITS, default='train', help='数据划分 (默认: train)')
    p.add_argument('--seq-len', type=int, help='序列长度（帧）')
    p.add_argument('--artifact-amp', type=float, help='伪影幅度')
    p.add_argument('--out', '-o', required=True, help='输出 .lads 文件')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('pretrain', help='在源任务上预训练基础模型')
    _add_common(p)
    p.add_argument('--out', '-o', required=True, help='输出基础检查点')
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser('adapt', help='在目标任务上适配并评估')
    _add_common(p)
    _add_method(p)
    p.add_argument('--base', required=True, help='pretrain 生成的基础检查点')
    p.add_argument('--train', help='目标任务训练集 .lads（默认按种子生成）')
    p.add_argument('--dev', help='目标任务开发集 .lads')
    p.add_argument('--eval', help='目标任务评估集 .lads')
    p.add_argument('--out', '-o', help='输出增量检查点')
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser('evaluate', help='计算 EER')
    p.add_argument('--scores', help='分数文件；单独给出时直接计算 EER，与 --data 一起给出时写出分数')
    p.add_argument('--base', help='基础或合并检查点')
    p.add_argument('--delta', help='增量检查点')
    p.add_argument('--data', help='评估数据集 .lads')
    p.add_argument('--report', help='JSON 报告输出路径')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('grad-check', help='中心差分梯度检查')
    _add_method(p)
    p.add_argument('--seed', '-s', type=int, default=0, help='随机种子')
    p.add_argument('--report', help='JSON 报告输出路径')
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser('count-params', help='统计参数量与驻留浮点数')
    _add_common(p)
    _add_method(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser('merge', help='把 LoRA 增量合并进基础权重')
    p.add_argument('--base', required=True, help='基础检查点')
    p.add_argument('--delta', required=True, help='增量检查点')
    p.add_argument('--out', '-o', required=True, help='输出合并检查点')
    p.add_argument('--report', help='JSON 报告输出路径')
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser('sweep', help='沿一个轴扫描')
    _add_common(p)
    _add_method(p)
    p.add_argument('--axis', required=True, help='rank | targets | length | method')
    p.add_argument('--values', help='轴取值，逗号分隔；targets 轴用分号分隔，如 "q;q,v"')
    p.add_argument('--ranks', type=_int_list, help='targets 轴的秩网格，如 2,4,8,16')
    p.add_argument('--workers', type=int, default=1, help='并发线程数 (默认: 1)')
    p.add_argument('--base', help='复用已有的基础检查点')
    p.add_argument('--out', '-o', default='sweep', help='输出前缀 (默认: sweep)')
    p.add_argument('--excel', action='store_true', help='同时导出 .xlsx')
    p.add_argument('--plot', action='store_true', help='同时导出 .png')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('bench', help='全量微调与 LoRA 的效率基准')
    _add_common(p)
    p.add_argument('--lengths', type=_int_list, default=list(BENCH_LENGTHS), help='序列长度网格')
    p.add_argument('--batches', type=_int_list, default=list(BENCH_BATCHES), help='批大小网格')
    p.add_argument('--bench-trials', type=int, default=BENCH_TRIALS_PER_CLASS, help='每类试次数 (默认: 32)')
    p.add_argument('--out', '-o', default='bench', help='输出前缀 (默认: bench)')
    p.add_argument('--excel', action='store_true', help='同时导出 .xlsx')
    p.add_argument('--plot', action='store_true', help='同时导出 .png')
    p.set_defaults(func=cmd_bench)
    return parser


def configure_logging(verbose: bool = False, debug: bool = False) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    configure_logging(args.verbose, args.debug)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.debug("配置错误", exc_info=True)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        logger.debug("运行时错误", exc_info=True)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
