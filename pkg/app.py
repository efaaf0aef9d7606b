import json
from dataclasses import replace

import matplotlib.pyplot as plt
import pandas as pd
import streamlit as st

# 导入自定义模块
from loralab import BenchResult, LabConfig, LabError, SweepResult, run_bench, run_sweep
from loralab.adaptation import count_params, instrument
from loralab.config import AdaptationMethod
from loralab.experiments import BENCH_BATCHES, BENCH_LENGTHS, SWEEP_DEFAULTS, method_for
from loralab.exporter import export_bench_chart, export_bench_to_excel, export_sweep_chart, export_sweep_to_excel
from loralab.model import init_params
from loralab.numerics import RngStream

# 设置matplotlib中文字体
plt.rcParams['font.sans-serif'] = ['SimHei', 'DejaVu Sans']
plt.rcParams['axes.unicode_minus'] = False

# 页面配置
st.set_page_config(page_title="LoRA 伪造语音检测实验室", layout="wide",
                   page_icon="🎙️", initial_sidebar_state="expanded")

st.markdown("""
<style>
    .main .block-container {
        padding-top: 2rem;
        padding-bottom: 2rem;
    }
    .title-container {
        display: flex;
        align-items: center;
        margin-bottom: 1rem;
    }
    .title-icon {
        font-size: 2rem;
        margin-right: 1rem;
    }
</style>
""", unsafe_allow_html=True)

# 页面标题和介绍
st.markdown("""
<div class="title-container">
    <div class="title-icon">🎙️</div>
    <div>
        <h1 style="margin:0;">LoRA 伪造语音检测实验室</h1>
        <p style="margin:0;color:#666;">低秩适配、Adapter 与全量微调的桌面规模对比</p>
    </div>
</div>
""", unsafe_allow_html=True)

st.markdown("""
<div style="background-color:#f0f7ff;padding:10px;border-radius:5px;margin-bottom:20px;">
    <p style="margin-bottom:5px;"><b>系统功能</b>：在源任务上预训练检测模型，再用不同方法适配到目标任务，比较 EER、参数量和训练开销。</p>
    <p style="margin:0;"><b>使用方法</b>：在左侧选择实验类型和参数，点击运行；结果可下载为 JSON / CSV / Excel / PNG。</p>
</div>
""", unsafe_allow_html=True)

AXIS_NAMES = {"rank": "秩 r", "targets": "注入位置", "length": "序列长度", "method": "适配方法"}


def _parse_values(axis: str, text: str):
    text = text.strip()
    if not text:
        return None
    if axis == "targets":
        return [v.strip() for v in text.split(";") if v.strip()]
    if axis == "method":
        return [v.strip() for v in text.split(",") if v.strip()]
    return [int(v) for v in text.split(",") if v.strip()]


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


# 侧边栏配置
with st.sidebar:
    st.header("📋 实验配置")

    mode = st.radio("实验类型", ["参数扫描", "效率基准", "加载已有结果"])

    st.subheader("1. 公共参数")
    seed = st.number_input("主随机种子", min_value=0, value=0, step=1)
    n_per_class = st.slider("每类试次数", min_value=20, max_value=500, value=100, step=10,
                            help="train/eval 各为该值，dev 为一半")
    learning_rate = st.select_slider("学习率", options=[1e-4, 3e-4, 1e-3, 3e-3], value=1e-3)

    if mode == "参数扫描":
        st.subheader("2. 扫描设置")
        axis = st.selectbox("扫描轴", list(SWEEP_DEFAULTS), format_func=lambda a: AXIS_NAMES[a])
        default_text = (";" if axis == "targets" else ",").join(str(v) for v in SWEEP_DEFAULTS[axis])
        values_text = st.text_input("轴取值", value=default_text,
                                    help="逗号分隔；注入位置用分号分隔，如 q;q,v")
        ranks_text = ""
        if axis in ("targets", "method"):
            ranks_text = st.text_input("秩网格", value="4" if axis == "targets" else "2",
                                       help="注入位置扫描可给多个秩，如 2,4,8,16；方法对比取第一个")
        pretrain_epochs = st.slider("预训练轮数", 1, 30, 10)
        adapt_epochs = st.slider("适配轮数", 1, 50, 20)
        workers = st.slider("并发线程数", 1, 8, 1)
    elif mode == "效率基准":
        st.subheader("2. 基准网格")
        lengths_text = st.text_input("序列长度", value=",".join(str(v) for v in BENCH_LENGTHS))
        batches_text = st.text_input("批大小", value=",".join(str(v) for v in BENCH_BATCHES))
        bench_trials = st.slider("每类试次数（基准）", 8, 128, 32, step=8)
    else:
        st.subheader("2. 结果文件")
        uploaded = st.file_uploader("上传 sweep/bench 生成的 JSON", type=['json'])

    # 参数量预览
    st.subheader("📊 参数量预览")
    lab_preview = LabConfig()
    rows = []
    for name in ("fixed", "finetune", "adapter", "lora"):
        method = method_for(name)
        rng = RngStream(0)
        params = init_params(lab_preview.model, rng)
        counts = count_params(params, instrument(params, lab_preview.model, method, rng))
        rows.append({"方法": method.descriptor(), "可训练参数": counts.trainable,
                     "占比(%)": round(100 * counts.trainable / params.total_size(), 2)})
    st.dataframe(pd.DataFrame(rows), hide_index=True, use_container_width=True)


def _lab_config() -> LabConfig:
    lab = LabConfig()
    return replace(lab,
                   train=replace(lab.train, learning_rate=float(learning_rate)),
                   data=replace(lab.data, n_per_class=int(n_per_class))).validate()


def _show_sweep(result: SweepResult):
    frame = result.to_frame()
    st.dataframe(frame, hide_index=True, use_container_width=True)
    best = min(result.points, key=lambda p: p.report.eer)
    col1, col2, col3 = st.columns(3)
    with col1:
        st.metric("最低 EER", f"{100 * best.report.eer:.2f}%")
    with col2:
        st.metric("对应取值", str(best.value))
    with col3:
        st.metric("可训练参数", best.report.trainable_params)
    chart = export_sweep_chart(result)
    st.image(chart, use_column_width=True)
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.download_button("📄 下载 JSON", result.to_json(), file_name=f"sweep_{result.axis}.json",
                           mime="application/json")
    with col2:
        st.download_button("📊 下载 CSV", frame.to_csv(index=False), file_name=f"sweep_{result.axis}.csv",
                           mime="text/csv")
    with col3:
        st.download_button("📗 下载 Excel", export_sweep_to_excel(result), file_name=f"sweep_{result.axis}.xlsx",
                           mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet")
    with col4:
        st.download_button("🖼️ 下载 PNG", chart, file_name=f"sweep_{result.axis}.png", mime="image/png")


def _show_bench(result: BenchResult):
    grid = result.to_grid()
    st.dataframe(grid, hide_index=True, use_container_width=True)
    with st.expander("📋 逐格明细（含驻留浮点数）", expanded=False):
        st.dataframe(result.to_frame(), hide_index=True, use_container_width=True)
    chart = export_bench_chart(result)
    st.image(chart, use_column_width=True)
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.download_button("📄 下载 JSON", result.to_json(), file_name="bench.json", mime="application/json")
    with col2:
        st.download_button("📊 下载 CSV", grid.to_csv(index=False), file_name="bench.csv", mime="text/csv")
    with col3:
        st.download_button("📗 下载 Excel", export_bench_to_excel(result), file_name="bench.xlsx",
                           mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet")
    with col4:
        st.download_button("🖼️ 下载 PNG", chart, file_name="bench.png", mime="image/png")


tab1, tab2, tab3 = st.tabs(["运行实验", "结果查看", "使用帮助"])

with tab1:
    st.header("🚀 运行实验")
    if mode == "加载已有结果":
        st.info("当前为加载模式，请在左侧上传结果文件，然后到“结果查看”页查看")
    elif st.button("🚀 开始运行", type="primary", use_container_width=True):
        progress_bar = st.progress(0)
        status_text = st.empty()

        def progress_callback(progress: float, message: str):
            progress_bar.progress(min(1.0, max(0.0, progress)))
            status_text.text(f"🔄 {message}")

        try:
            lab = _lab_config()
            if mode == "参数扫描":
                lab = replace(lab, pretrain_epochs=int(pretrain_epochs), adapt_epochs=int(adapt_epochs))
                ranks = _int_list(ranks_text) if ranks_text.strip() else None
                st.session_state.result = run_sweep(lab, axis, _parse_values(axis, values_text),
                                                    master_seed=int(seed), ranks=ranks, workers=int(workers),
                                                    progress_callback=progress_callback)
            else:
                lora = lab.method.lora if lab.method.kind == "lora" else AdaptationMethod.with_lora().lora
                st.session_state.result = run_bench(lab, _int_list(lengths_text), _int_list(batches_text),
                                                    n_per_class=int(bench_trials), seed=int(seed), lora=lora,
                                                    progress_callback=progress_callback)
            progress_bar.empty()
            status_text.empty()
            st.success("✅ 实验完成，请到“结果查看”页查看")
        except (LabError, ValueError) as e:
            progress_bar.empty()
            status_text.empty()
            st.error(f"❌ 实验运行出错：{str(e)}")

with tab2:
    st.header("🎯 实验结果")
    if mode == "加载已有结果" and uploaded is not None:
        try:
            data = json.loads(uploaded.getvalue().decode("utf-8"))
            if "axis" in data:
                st.session_state.result = SweepResult.from_dict(data)
            else:
                st.session_state.result = BenchResult.from_dict(data)
        except (LabError, ValueError) as e:
            st.error(f"❌ 结果文件无效：{str(e)}")

    result = st.session_state.get("result")
    if result is None:
        st.warning("⚠️ 还没有结果，请先运行实验或上传结果文件")
    elif isinstance(result, SweepResult):
        _show_sweep(result)
    else:
        _show_bench(result)

with tab3:
    st.header("📖 使用帮助")
    st.markdown("""
**实验流程**

1. 在源任务（伪影频率 4）上全量训练基础模型，按开发集 EER 选最佳轮次；
2. 用所选方法把基础模型适配到目标任务（伪影频率 7）；
3. 在目标任务评估集上计算等错误率（EER）。

**扫描轴**

- **秩 r**：LoRA 注入 q,v，可训练参数随 r 线性增长；
- **注入位置**：q、k、v 的 7 种组合，可同时扫描多个秩；
- **序列长度**：目标数据按最长长度生成，再从前面截断；
- **适配方法**：冻结、全量微调、Adapter（瓶颈 d_ff/8）、LoRA（r=2，q,v），同时记录源任务 EER。

**效率基准**

每个（长度, 批大小）格子里分别测全量微调与 LoRA 的每轮耗时（热身 1 轮后取 3 轮中位数），
驻留浮点数 = 参数 + 可训练部分的梯度与两份 Adam 矩 + 激活。

命令行用法见 README.md。
""")
