"""评估模块

免阈值等错误率（EER）与分数文件读写。

P_fa(θ) = #{spoof: score > θ} / #spoof，P_miss(θ) = #{genuine: score < θ} / #genuine，
两处都是严格不等号，恰好等于 θ 的试次两种错误都不计。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainError, ParseError

logger = logging.getLogger(__name__)

LABELS = ("genuine", "spoof")


@dataclass(frozen=True)
class TrialScore:
    """单个试次：编号、标签、检测分数（越高越像真实语音）"""

    trial_id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise DomainError(f"未知标签 {self.label!r}（应为 genuine 或 spoof）")
        if not math.isfinite(self.score):
            raise DomainError(f"试次 {self.trial_id} 的分数不是有限值: {self.score}")


@dataclass
class EERResult:
    eer: float
    threshold: float
    far_at: float
    frr_at: float

    def to_dict(self) -> Dict[str, float]:
        return {"eer": self.eer, "threshold": self.threshold, "far_at": self.far_at, "frr_at": self.frr_at}


def split_scores(scores: Iterable[TrialScore]) -> Tuple[np.ndarray, np.ndarray]:
    """拆成 (genuine, spoof) 两组分数，缺少任一类别时报错"""
    genuine, spoof = [], []
    for s in scores:
        (genuine if s.label == "genuine" else spoof).append(s.score)
    if not genuine or not spoof:
        raise DomainError(f"需要同时包含 genuine 和 spoof 试次（genuine={len(genuine)}, spoof={len(spoof)}）")
    return np.asarray(genuine, dtype=np.float64), np.asarray(spoof, dtype=np.float64)


def _rates(genuine_sorted: np.ndarray, spoof_sorted: np.ndarray, thetas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p_fa = (spoof_sorted.size - np.searchsorted(spoof_sorted, thetas, side="right")) / spoof_sorted.size
    p_miss = np.searchsorted(genuine_sorted, thetas, side="left") / genuine_sorted.size
    return p_fa, p_miss


def far_frr_at(scores: Sequence[TrialScore], theta: float) -> Tuple[float, float]:
    """阈值 θ 处的 (P_fa, P_miss)"""
    genuine, spoof = split_scores(scores)
    p_fa, p_miss = _rates(np.sort(genuine), np.sort(spoof), np.asarray([theta], dtype=np.float64))
    return float(p_fa[0]), float(p_miss[0])


def candidate_thresholds(genuine: np.ndarray, spoof: np.ndarray) -> np.ndarray:
    """升序的候选阈值：最小分数之下一个哨兵、相邻不同分数的中点、最大分数之上一个哨兵

    候选点都不与任何分数重合，严格不等号下每个试次必然落入某一种错误或正确判决。
    """
    distinct = np.unique(np.concatenate([genuine, spoof]))
    lo, hi = distinct[0], distinct[-1]
    candidates = np.empty(distinct.size + 1, dtype=np.float64)
    candidates[0] = lo - 1.0 - abs(lo)
    candidates[1:-1] = (distinct[:-1] + distinct[1:]) / 2.0
    candidates[-1] = hi + 1.0 + abs(hi)
    return candidates


def compute_eer(scores: Sequence[TrialScore]) -> EERResult:
    """在候选阈值上扫描两条错误率曲线，找到交点并线性插值

    P_fa − P_miss 随 θ 单调不增：下哨兵处为 +1，上哨兵处为 −1。
    取第一个差值 ≤ 0 的候选点；差值恰为 0 时直接取该点，否则在它与前一候选点之间插值，
    因此相等区间上总是报告最小的 θ。
    """
    genuine, spoof = split_scores(scores)
    g_sorted, s_sorted = np.sort(genuine), np.sort(spoof)
    thetas = candidate_thresholds(genuine, spoof)
    p_fa, p_miss = _rates(g_sorted, s_sorted, thetas)
    diff = p_fa - p_miss
    idx = int(np.argmax(diff <= 0))
    if diff[idx] == 0:
        result = EERResult(eer=float(0.5 * (p_fa[idx] + p_miss[idx])), threshold=float(thetas[idx]),
                           far_at=float(p_fa[idx]), frr_at=float(p_miss[idx]))
    else:
        d0, d1 = diff[idx - 1], diff[idx]
        t = d0 / (d0 - d1)
        far = p_fa[idx - 1] + t * (p_fa[idx] - p_fa[idx - 1])
        frr = p_miss[idx - 1] + t * (p_miss[idx] - p_miss[idx - 1])
        theta = thetas[idx - 1] + t * (thetas[idx] - thetas[idx - 1])
        result = EERResult(eer=float(0.5 * (far + frr)), threshold=float(theta),
                           far_at=float(far), frr_at=float(frr))
    logger.debug("EER=%.6f @ θ=%.6g (genuine=%d, spoof=%d)", result.eer, result.threshold, genuine.size, spoof.size)
    return result


def eer_report(scores: Sequence[TrialScore]) -> Dict[str, float]:
    """EER 报告：{eer, threshold, n_genuine, n_spoof}"""
    genuine, spoof = split_scores(scores)
    result = compute_eer(scores)
    return {"eer": result.eer, "threshold": result.threshold,
            "n_genuine": int(genuine.size), "n_spoof": int(spoof.size)}


def format_score(score: float) -> str:
    return format(float(score), ".17g")


def write_scores(path: str, scores: Iterable[TrialScore]) -> None:
    """写分数文件：UTF-8 CSV，每行 trial_id,label,score，无表头"""
    lines = []
    for s in scores:
        if "," in s.trial_id or "\n" in s.trial_id or not s.trial_id:
            raise ConfigError(f"试次编号不能为空或包含逗号/换行: {s.trial_id!r}")
        lines.append(f"{s.trial_id},{s.label},{format_score(s.score)}\n")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.writelines(lines)


def read_scores(path: str) -> List[TrialScore]:
    """读分数文件，格式错误时报出行号"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError as e:
        raise ConfigError(f"分数文件不存在: {path}") from e
    except UnicodeDecodeError as e:
        raise ParseError("文件不是有效的 UTF-8", path=path) from e
    scores = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"应为 trial_id,label,score 三列，实际 {len(parts)} 列", path=path, line=lineno)
        trial_id, label, raw = (p.strip() for p in parts)
        if label not in LABELS:
            raise ParseError(f"未知标签 {label!r}（应为 genuine 或 spoof）", path=path, line=lineno)
        try:
            score = float(raw)
        except ValueError:
            raise ParseError(f"无法解析分数 {raw!r}", path=path, line=lineno) from None
        if not trial_id or not math.isfinite(score):
            raise ParseError("试次编号为空或分数不是有限值", path=path, line=lineno)
        scores.append(TrialScore(trial_id, label, score))
    return scores
