"""导出模块

包含扫描/基准结果的 Excel 表格和图片导出功能，返回字节数据，
既可直接写盘也可交给 Streamlit 下载按钮。
"""

import io
from typing import Dict, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import openpyxl  # noqa: E402
import pandas as pd  # noqa: E402
from openpyxl.styles import Alignment, Font, PatternFill  # noqa: E402
from openpyxl.utils import get_column_letter  # noqa: E402

from .reports import BenchResult, SweepResult, targets_label  # noqa: E402

# 设置matplotlib中文字体
plt.rcParams['font.sans-serif'] = ['SimHei', 'DejaVu Sans']
plt.rcParams['axes.unicode_minus'] = False

HEADER_FILL = PatternFill(start_color="E2EFDA", end_color="E2EFDA", fill_type="solid")

AXIS_TITLES = {
    "rank": "秩 r",
    "targets": "注入位置",
    "length": "序列长度（帧）",
    "method": "适配方法",
}


def _write_sheet(ws, frame: pd.DataFrame, title: Optional[str] = None) -> None:
    """把 DataFrame 写入工作表：可选标题行、带底色的表头、居中对齐"""
    row0 = 1
    n_cols = max(1, len(frame.columns))
    if title:
        ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=n_cols)
        ws.cell(1, 1).value = title
        ws.cell(1, 1).font = Font(bold=True)
        ws.cell(1, 1).alignment = Alignment(horizontal='center')
        row0 = 2
    for col, header in enumerate(frame.columns, 1):
        cell = ws.cell(row0, col)
        cell.value = str(header)
        cell.fill = HEADER_FILL
        cell.alignment = Alignment(horizontal='center')
    for r, values in enumerate(frame.itertuples(index=False), row0 + 1):
        for col, value in enumerate(values, 1):
            if pd.isna(value):
                value = None
            elif hasattr(value, "item"):
                value = value.item()
            ws.cell(r, col).value = value
            ws.cell(r, col).alignment = Alignment(horizontal='center')
    # 调整列宽
    for col in range(1, n_cols + 1):
        ws.column_dimensions[get_column_letter(col)].width = 18


def _workbook_bytes(sheets: Dict[str, Tuple[pd.DataFrame, Optional[str]]]) -> bytes:
    wb = openpyxl.Workbook()
    wb.remove(wb.active)
    for name, (frame, title) in sheets.items():
        _write_sheet(wb.create_sheet(name), frame, title)
    output = io.BytesIO()
    wb.save(output)
    output.seek(0)
    return output.getvalue()


def export_sweep_to_excel(result: SweepResult) -> bytes:
    """将扫描结果导出为Excel

    第一个工作表是按结果表格布局的汇总，第二个是每个点的完整报告字段。

    Args:
        result: 扫描结果

    Returns:
        bytes: Excel文件的字节数据
    """
    detail = pd.DataFrame([{
        "axis_value": p.value if result.axis != "targets" else targets_label(p.value),
        "rank": p.rank,
        "method": p.report.method,
        "eer": p.report.eer,
        "trainable_params": p.report.trainable_params,
        "total_params": p.report.total_params,
        "param_ratio": p.report.param_ratio,
        "epoch_time_ms": p.report.epoch_time_ms,
        "float_footprint": p.report.float_footprint,
        "source_eer": p.report.source_eer,
        "seed": p.report.seed,
    } for p in result.points])
    title = f"{AXIS_TITLES.get(result.axis, result.axis)}扫描（主种子 {result.master_seed}）"
    return _workbook_bytes({"汇总": (result.to_frame(), title), "明细": (detail, None)})


def export_bench_to_excel(result: BenchResult) -> bytes:
    """将效率基准导出为Excel：耗时网格 + 逐格明细"""
    return _workbook_bytes({
        "耗时网格": (result.to_grid(), "每轮训练耗时（秒）"),
        "明细": (result.to_frame(), None),
    })


def _figure_bytes(fig, dpi: int) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    buf.seek(0)
    return buf.getvalue()


def export_sweep_chart(result: SweepResult, figsize: Tuple[float, float] = (8, 5), dpi: int = 120) -> bytes:
    """绘制 EER 随轴取值变化的图

    Args:
        result: 扫描结果
        figsize: 图片尺寸
        dpi: 图片分辨率

    Returns:
        bytes: PNG图片的字节数据
    """
    fig, ax = plt.subplots(figsize=figsize, dpi=dpi)
    fig.patch.set_facecolor('#f8f9fa')
    ranks = result.ranks()
    if result.axis == "targets" and len(ranks) > 1:
        labels = list(dict.fromkeys(targets_label(p.value) for p in result.points))
        width = 0.8 / len(ranks)
        for k, r in enumerate(ranks):
            eers = [100 * p.report.eer for p in result.points if p.rank == r]
            ax.bar([i + k * width for i in range(len(eers))], eers, width=width, label=f"r={r}")
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))])
        ax.set_xticklabels(labels, rotation=20)
        ax.legend()
    elif result.axis in ("targets", "method"):
        labels = [targets_label(p.value) if result.axis == "targets" else str(p.value) for p in result.points]
        eers = [100 * p.report.eer for p in result.points]
        bars = ax.bar(range(len(eers)), eers, color='#4c72b0', alpha=0.8)
        for bar, e in zip(bars, eers):
            ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(), f"{e:.2f}",
                    ha='center', va='bottom', fontsize=8)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20)
    else:
        xs = [p.value for p in result.points]
        ax.plot(xs, [100 * p.report.eer for p in result.points], 'o-', color='#4c72b0')
        ax.set_xscale('log', base=2)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(AXIS_TITLES.get(result.axis, result.axis))
    ax.set_ylabel('EER (%)')
    ax.set_title(f"EER 随{AXIS_TITLES.get(result.axis, result.axis)}的变化")
    ax.grid(True, alpha=0.3)
    return _figure_bytes(fig, dpi)


def export_bench_chart(result: BenchResult, figsize: Optional[Tuple[float, float]] = None, dpi: int = 120) -> bytes:
    """按序列长度分组的耗时柱状图，每个批大小一个子图，全量微调与 LoRA 并排"""
    n = len(result.batches)
    if figsize is None:
        figsize = (max(6, 3.2 * n), 4)
    fig, axes = plt.subplots(1, n, figsize=figsize, dpi=dpi, squeeze=False, sharey=True)
    width = 0.38
    for ax, b in zip(axes[0], result.batches):
        xs = range(len(result.lengths))
        ft = [result.cell(L, b, "finetune").epoch_time_ms / 1000.0 for L in result.lengths]
        lora = [result.cell(L, b, "lora").epoch_time_ms / 1000.0 for L in result.lengths]
        ax.bar([x - width / 2 for x in xs], ft, width=width, label="全量微调", color='#dd8452')
        ax.bar([x + width / 2 for x in xs], lora, width=width, label="LoRA", color='#4c72b0')
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(L) for L in result.lengths])
        ax.set_title(f"batch={b}")
        ax.set_xlabel("序列长度（帧）")
        ax.grid(True, axis='y', alpha=0.3)
    axes[0][0].set_ylabel("每轮耗时（秒）")
    axes[0][0].legend()
    plt.tight_layout()
    return _figure_bytes(fig, dpi)
