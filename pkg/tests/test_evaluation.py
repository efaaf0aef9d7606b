"""EER 与分数文件测试"""

import numpy as np
import pytest

from loralab.errors import ConfigError, DomainError, ParseError
from loralab.evaluation import (TrialScore, candidate_thresholds, compute_eer, eer_report, far_frr_at, read_scores,
                                write_scores)
from loralab.numerics import RngStream


def _trials(genuine, spoof):
    return ([TrialScore(f"g{i}", "genuine", float(s)) for i, s in enumerate(genuine)]
            + [TrialScore(f"s{i}", "spoof", float(s)) for i, s in enumerate(spoof)])


def _counted_rates(genuine, spoof, theta):
    far = sum(1 for s in spoof if s > theta) / len(spoof)
    frr = sum(1 for g in genuine if g < theta) / len(genuine)
    return far, frr


def _brute_force_eer(genuine, spoof):
    """纯计数求交点：取中点（加两端哨兵）上 |P_fa − P_miss| 最小的两侧点插值

    正差值中最小的一点与非正差值中绝对值最小的一点夹住交点；
    差值恰为 0 的点直接给出 EER。
    """
    distinct = sorted(set(float(x) for x in genuine) | set(float(x) for x in spoof))
    thetas = [distinct[0] - 1.0] + [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])] + [distinct[-1] + 1.0]
    points = [(theta,) + _counted_rates(genuine, spoof, theta) for theta in thetas]
    exact = [far for _, far, frr in points if far == frr]
    if exact:
        return exact[0]
    above = min((p for p in points if p[1] > p[2]), key=lambda p: p[1] - p[2])
    below = min((p for p in points if p[1] < p[2]), key=lambda p: p[2] - p[1])
    d0, d1 = above[1] - above[2], below[1] - below[2]
    t = d0 / (d0 - d1)
    return above[1] + t * (below[1] - above[1])


def _random_set(rng: RngStream):
    n_g = 2 + int(rng.randint(1, 199)[0])
    n_s = 2 + int(rng.randint(1, 199)[0])
    shift = 2.0 * rng.uniform()
    genuine = np.round(rng.normal((n_g,)) + shift, 1)
    spoof = np.round(rng.normal((n_s,)), 1)
    # 人为注入跨类别的重复分数
    spoof[: min(3, n_s)] = genuine[0]
    return genuine, spoof


class TestErrorRates:
    def test_strict_inequalities(self, six_trials):
        assert far_frr_at(six_trials, 0.5) == (pytest.approx(1 / 3), pytest.approx(1 / 3))
        assert far_frr_at(six_trials, 0.7) == (0.0, pytest.approx(2 / 3))

    def test_extremes(self, six_trials):
        assert far_frr_at(six_trials, -10.0) == (1.0, 0.0)
        assert far_frr_at(six_trials, 10.0) == (0.0, 1.0)

    def test_candidates_are_midpoints_between_sentinels(self):
        thetas = candidate_thresholds(np.array([0.1, 0.3]), np.array([0.3, 0.5]))
        assert thetas[1:-1].tolist() == pytest.approx([0.2, 0.4])
        assert thetas[0] < 0.1 and thetas[-1] > 0.5

    def test_candidates_never_touch_a_score(self):
        values = np.array([-3.0, 0.0, 0.0, 2.5, 1e6])
        assert not np.isin(candidate_thresholds(values, values[::-1]), values).any()


class TestHandCases:
    def test_perfect_separation(self):
        assert compute_eer(_trials([0.9, 0.8], [0.1, 0.2])).eer == 0.0

    def test_six_trials(self, six_trials):
        result = compute_eer(six_trials)
        assert result.eer == pytest.approx(1 / 3, abs=1e-15)
        assert 0.5 < result.threshold < 0.6
        assert result.threshold == pytest.approx(0.55)
        assert result.far_at == pytest.approx(result.frr_at, abs=1e-9)

    @pytest.mark.parametrize("values", [[0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3], [0.5], [0.5, 0.5, 0.7], [2.0, 2.0]])
    def test_identical_multisets(self, values):
        result = compute_eer(_trials(values, values))
        assert result.eer == pytest.approx(0.5, abs=1e-12)
        assert result.far_at == pytest.approx(result.frr_at, abs=1e-9)

    def test_inverted_separation(self):
        assert compute_eer(_trials([0.1, 0.2], [0.8, 0.9])).eer == 1.0

    def test_missing_class(self):
        with pytest.raises(DomainError):
            compute_eer(_trials([0.1, 0.2], []))
        with pytest.raises(DomainError):
            compute_eer([])

    def test_report_fields(self, six_trials):
        report = eer_report(six_trials)
        assert report["n_genuine"] == 3 and report["n_spoof"] == 3
        assert report["eer"] == pytest.approx(1 / 3)


class TestProperties:
    def test_matches_brute_force_with_ties(self):
        rng = RngStream(2024)
        for _ in range(200):
            genuine, spoof = _random_set(rng)
            result = compute_eer(_trials(genuine, spoof))
            assert result.eer == pytest.approx(_brute_force_eer(genuine, spoof), abs=1e-12)
            assert abs(result.far_at - result.frr_at) <= 1e-9
            assert 0.0 <= result.eer <= 1.0

    def test_strictly_increasing_transform(self):
        rng = RngStream(7)
        for _ in range(20):
            genuine, spoof = _random_set(rng)
            base = compute_eer(_trials(genuine, spoof))
            moved = compute_eer(_trials(3.0 * genuine + 1.0, 3.0 * spoof + 1.0))
            squashed = compute_eer(_trials(np.arctan(genuine), np.arctan(spoof)))
            assert moved.eer == pytest.approx(base.eer, abs=1e-12)
            assert squashed.eer == pytest.approx(base.eer, abs=1e-12)

    def test_label_swap_with_negation(self):
        rng = RngStream(8)
        for _ in range(20):
            genuine, spoof = _random_set(rng)
            swapped = compute_eer(_trials(-spoof, -genuine)).eer
            assert swapped == pytest.approx(compute_eer(_trials(genuine, spoof)).eer, abs=1e-12)


class TestTrialScore:
    def test_unknown_label(self):
        with pytest.raises(DomainError):
            TrialScore("t", "bonafide", 0.0)

    def test_non_finite_score(self):
        with pytest.raises(DomainError):
            TrialScore("t", "spoof", float("nan"))


class TestScoreFiles:
    def test_parse_single_line(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("trial_0001,spoof,-1.25\n", encoding="utf-8")
        assert read_scores(str(path)) == [TrialScore("trial_0001", "spoof", -1.25)]

    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = RngStream(3)
        values = rng.normal((1000,), 5.0)
        labels = rng.randint(1000, 2)
        scores = [TrialScore(f"trial_{i:04d}", ("genuine", "spoof")[labels[i]], float(v))
                  for i, v in enumerate(values)]
        path = tmp_path / "scores.csv"
        write_scores(str(path), scores)
        first = path.read_bytes()
        again = read_scores(str(path))
        assert again == scores
        write_scores(str(path), again)
        assert path.read_bytes() == first

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("a,genuine,1\n\nb,spoof,0\n", encoding="utf-8")
        assert len(read_scores(str(path))) == 2

    @pytest.mark.parametrize("bad_line", ["c,spoof", "c,fake,0.5", "c,spoof,abc", "c,spoof,inf", ",spoof,1"])
    def test_malformed_line_reports_location(self, tmp_path, bad_line):
        path = tmp_path / "bad.csv"
        path.write_text(f"a,genuine,1\nb,spoof,0\n{bad_line}\n", encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            read_scores(str(path))
        assert exc.value.line == 3
        assert f"{path}:3" in str(exc.value)

    def test_empty_file_fails_on_compute(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DomainError):
            compute_eer(read_scores(str(path)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_scores(str(tmp_path / "nope.csv"))

    def test_comma_in_trial_id(self, tmp_path):
        with pytest.raises(ConfigError):
            write_scores(str(tmp_path / "x.csv"), [TrialScore("a,b", "spoof", 0.0)])
