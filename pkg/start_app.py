#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
启动脚本 - 检查运行环境后打开实验控制台
"""

import argparse
import importlib
import os
import re
import subprocess
import sys

ROOT = os.path.dirname(os.path.abspath(__file__))
MIN_PYTHON = (3, 8)

# requirements.txt 中的发行包名 -> 导入名
IMPORT_NAMES = {'pytest': None}


def read_requirements(path=os.path.join(ROOT, 'requirements.txt')):
    """读取 requirements.txt，返回 [(发行包名, 版本约束)]"""
    entries = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            name = re.split(r'[<>=!~\s]', line, maxsplit=1)[0]
            entries.append((name, line[len(name):].strip()))
    return entries


def missing_packages(entries):
    """逐个尝试导入，返回缺失的依赖；只用于测试的包跳过"""
    missing = []
    for name, constraint in entries:
        module = IMPORT_NAMES.get(name, name)
        if module is None:
            continue
        try:
            mod = importlib.import_module(module)
        except ImportError:
            print(f"✗ {name} 未安装 {constraint}")
            missing.append(name + constraint)
            continue
        print(f"✓ {name} {getattr(mod, '__version__', '?')}")
    return missing


def self_test():
    """导入 loralab，核对默认 LoRA 配置的可训练参数量与 EER 的一个手算例子"""
    try:
        from loralab import LabConfig, TrialScore, compute_eer
        from loralab.adaptation import expected_trainable
    except ImportError as e:
        print(f"✗ loralab 导入失败: {e}")
        return False

    lab = LabConfig().validate()
    trainable = expected_trainable(lab.model, lab.method)
    if trainable != 2178:
        print(f"✗ 默认 LoRA 可训练参数量为 {trainable}，应为 2178")
        return False

    scores = [TrialScore(f"g{i}", "genuine", s) for i, s in enumerate((0.8, 0.6, 0.4))]
    scores += [TrialScore(f"s{i}", "spoof", s) for i, s in enumerate((0.7, 0.5, 0.3))]
    eer = compute_eer(scores).eer
    if abs(eer - 1 / 3) > 1e-12:
        print(f"✗ 六试次样例 EER 为 {eer}，应为 1/3")
        return False

    print("✓ loralab 自检通过（可训练参数 2178，样例 EER 1/3）")
    return True


def main():
    """主函数"""
    parser = argparse.ArgumentParser(description='检查环境并启动 LoRA 实验控制台')
    parser.add_argument('--port', type=int, default=8501, help='Streamlit 端口 (默认: 8501)')
    parser.add_argument('--check-only', action='store_true', help='只做检查，不启动控制台')
    parser.add_argument('--install', action='store_true', help='自动用 pip 安装缺失的依赖')
    args = parser.parse_args()

    print("=" * 50)
    print("LoRA 伪造语音检测实验室 - 启动检查")
    print("=" * 50)
    print(f"Python {sys.version.split()[0]}")
    if sys.version_info < MIN_PYTHON:
        print(f"✗ 需要 Python {'.'.join(map(str, MIN_PYTHON))} 或更高版本")
        return 1

    print("\n检查依赖包...")
    missing = missing_packages(read_requirements())
    if missing:
        if not args.install:
            print(f"\n缺少 {len(missing)} 个依赖，可加 --install 自动安装，或执行 pip install -r requirements.txt")
            return 1
        print(f"\n正在安装: {' '.join(missing)}")
        result = subprocess.run([sys.executable, '-m', 'pip', 'install', *missing])
        if result.returncode != 0:
            print("✗ 安装失败，请手动安装后重试")
            return 1

    print()
    if not self_test():
        return 1
    if args.check_only:
        return 0

    print(f"\n启动实验控制台: http://localhost:{args.port}")
    return subprocess.call([sys.executable, '-m', 'streamlit', 'run', os.path.join(ROOT, 'app.py'),
                            '--server.port', str(args.port)])


if __name__ == "__main__":
    sys.exit(main())
