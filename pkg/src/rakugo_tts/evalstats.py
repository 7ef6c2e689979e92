"""Listening-test statistics: score normalization, rank tests, fits, reports.

Raw 1-5 opinion scores pass through two normalization stages: a per-listener
z-score over all of that listener's answers, then a per-story (and question)
affine map anchoring the copy-synthesis reference system at mean 0 and
standard deviation 1. Comparisons use the Brunner-Munzel rank test with
Bonferroni correction; relationships between measures use Pearson
correlation and ordinary least squares with a t-based mean-response band.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

QUESTIONS = ("Q1", "Q2", "Q3", "Q4")

QUESTION_TEXT = {
    "Q1": "naturalness",
    "Q2": "distinguishability of characters",
    "Q3": "understandability of content",
    "Q4": "entertainment",
}

ABS_SYSTEM = "AbS"

SCORE_HEADER = ("listener", "story", "system", "question", "score")


class ScoreRecord(NamedTuple):
    listener: str
    story: str
    system: str
    question: str
    score: float


def load_score_csv(path: str) -> List[ScoreRecord]:
    """Read a score table; header must be ``listener,story,system,question,score``."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SCORE_HEADER:
            raise ValueError(
                f"{path}: expected header {','.join(SCORE_HEADER)!r}, got {header}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            records.append(
                ScoreRecord(row[0], row[1], row[2], row[3], float(row[4]))
            )
    return records


def _check_unique_cells(records: Sequence[ScoreRecord]) -> None:
    seen = set()
    for r in records:
        key = (r.listener, r.story, r.system, r.question)
        if key in seen:
            raise ValueError(f"duplicate score record for {key}")
        seen.add(key)


def listener_zscores(records: Sequence[ScoreRecord]) -> List[ScoreRecord]:
    """Stage 1: z-score each listener's answers, pooled over all their records."""
    by_listener: Dict[str, List[float]] = {}
    for r in records:
        by_listener.setdefault(r.listener, []).append(r.score)
    stats: Dict[str, Tuple[float, float]] = {}
    for listener, values in by_listener.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.size < 2:
            raise ValueError(f"listener {listener!r} has fewer than 2 answers")
        std = arr.std(ddof=1)
        if std == 0.0:
            raise ValueError(
                f"listener {listener!r} gave identical scores; z-score undefined"
            )
        stats[listener] = (float(arr.mean()), float(std))
    out = []
    for r in records:
        mean, std = stats[r.listener]
        out.append(r._replace(score=(r.score - mean) / std))
    return out


def anchor_to_reference(
    records: Sequence[ScoreRecord], reference_system: str = ABS_SYSTEM
) -> List[ScoreRecord]:
    """Stage 2: per (story, question), map all scores so the reference system
    has mean 0 and standard deviation 1."""
    groups: Dict[Tuple[str, str], List[float]] = {}
    for r in records:
        if r.system == reference_system:
            groups.setdefault((r.story, r.question), []).append(r.score)
    stats: Dict[Tuple[str, str], Tuple[float, float]] = {}
    needed = {(r.story, r.question) for r in records}
    for key in needed:
        if key not in groups:
            raise ValueError(
                f"no {reference_system!r} scores for story {key[0]!r}, question {key[1]!r}"
            )
        arr = np.asarray(groups[key], dtype=np.float64)
        std = arr.std(ddof=1) if arr.size > 1 else 0.0
        if std == 0.0:
            raise ValueError(
                f"{reference_system!r} scores for story {key[0]!r}, question {key[1]!r}"
                " have zero variance"
            )
        stats[key] = (float(arr.mean()), float(std))
    out = []
    for r in records:
        mean, std = stats[(r.story, r.question)]
        out.append(r._replace(score=(r.score - mean) / std))
    return out


def normalize_scores(
    records: Sequence[ScoreRecord], reference_system: str = ABS_SYSTEM
) -> List[ScoreRecord]:
    """Both normalization stages: listener z-scores, then reference anchoring."""
    _check_unique_cells(records)
    return anchor_to_reference(listener_zscores(records), reference_system)


class BMResult(NamedTuple):
    statistic: float
    p_value: float
    relative_effect: float
    df: float


def brunner_munzel(x: Sequence[float], y: Sequence[float]) -> BMResult:
    """Brunner-Munzel rank test for the relative effect P(X < Y) + P(X = Y)/2.

    Uses midranks over the pooled sample and a t approximation with
    Welch-Satterthwaite degrees of freedom. The statistic is positive when y
    stochastically dominates x.

    Returns
    -------
    BMResult
        statistic, two-sided p-value, relative effect estimate, and degrees
        of freedom.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise ValueError("both samples need at least 2 elements")
    pooled = np.concatenate([x, y])
    ranks = sps.rankdata(pooled)
    rx, ry = ranks[:nx], ranks[nx:]
    rx_within = sps.rankdata(x)
    ry_within = sps.rankdata(y)
    rx_mean, ry_mean = rx.mean(), ry.mean()
    sx2 = np.var(rx - rx_within, ddof=1)
    sy2 = np.var(ry - ry_within, ddof=1)
    pooled_var = nx * sx2 + ny * sy2
    if pooled_var == 0.0:
        raise ValueError("degenerate rank variance; Brunner-Munzel test undefined")
    statistic = nx * ny * (ry_mean - rx_mean) / ((nx + ny) * np.sqrt(pooled_var))
    df = pooled_var**2 / ((nx * sx2) ** 2 / (nx - 1) + (ny * sy2) ** 2 / (ny - 1))
    p_value = 2.0 * sps.t.sf(abs(statistic), df)
    relative_effect = (ry_mean - (ny + 1) / 2.0) / nx
    return BMResult(float(statistic), float(p_value), float(relative_effect), float(df))


def bonferroni(p_values: Sequence[float], m: int) -> List[float]:
    """Correct p-values for m comparisons: min(1, m * p)."""
    if m < len(p_values):
        raise ValueError(f"m = {m} is smaller than the number of tests ({len(p_values)})")
    return [min(1.0, m * p) for p in p_values]


SIGNIFICANCE_LEVELS = (0.01, 0.005, 0.001)


@dataclass(frozen=True)
class TestResult:
    """One pairwise comparison on one question."""

    system_a: str
    system_b: str
    question: str
    statistic: float
    p_value: float
    corrected_p: float
    significant: Dict[float, bool] = field(default_factory=dict)


def pairwise_tests(
    records: Sequence[ScoreRecord],
    question: str,
    m: Optional[int] = None,
) -> List[TestResult]:
    """Brunner-Munzel tests over all system pairs for one question.

    ``m`` defaults to the number of pairs, making the Bonferroni family the
    full set of pairwise comparisons for the question.
    """
    by_system: Dict[str, List[float]] = {}
    for r in records:
        if r.question == question:
            by_system.setdefault(r.system, []).append(r.score)
    systems = sorted(by_system)
    if len(systems) < 2:
        raise ValueError(f"need at least 2 systems with scores for {question!r}")
    pairs = [
        (systems[i], systems[j])
        for i in range(len(systems))
        for j in range(i + 1, len(systems))
    ]
    if m is None:
        m = len(pairs)
    raw = [brunner_munzel(by_system[a], by_system[b]) for a, b in pairs]
    corrected = bonferroni([r.p_value for r in raw], m)
    results = []
    for (a, b), res, cp in zip(pairs, raw, corrected):
        results.append(
            TestResult(
                system_a=a,
                system_b=b,
                question=question,
                statistic=res.statistic,
                p_value=res.p_value,
                corrected_p=cp,
                significant={alpha: cp < alpha for alpha in SIGNIFICANCE_LEVELS},
            )
        )
    return results


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson product-moment correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance; correlation undefined")
    r = float((dx * dy).sum() / (sx * sy))
    return max(-1.0, min(1.0, r))


class OlsFit(NamedTuple):
    slope: float
    intercept: float
    residual_std: float
    df: int
    x_mean: float
    sxx: float
    n: int

    def predict(self, xs: Sequence[float]) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(xs, dtype=np.float64)

    def band(self, xs: Sequence[float], confidence: float = 0.95):
        """Mean-response confidence band: fitted value +/- t * s * leverage."""
        xs = np.asarray(xs, dtype=np.float64)
        fitted = self.predict(xs)
        if self.df > 0:
            t_crit = float(sps.t.ppf(0.5 + confidence / 2.0, self.df))
            half = t_crit * self.residual_std * np.sqrt(
                1.0 / self.n + (xs - self.x_mean) ** 2 / self.sxx
            )
        else:
            half = np.zeros_like(xs)
        return fitted - half, fitted, fitted + half


def ols_regression(x: Sequence[float], y: Sequence[float]) -> OlsFit:
    """Simple least-squares line fit with the statistics needed for its band."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    x_mean = x.mean()
    sxx = float(((x - x_mean) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("x has zero variance; regression undefined")
    slope = float(((x - x_mean) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x_mean)
    residuals = y - (intercept + slope * x)
    df = x.size - 2
    residual_std = float(np.sqrt((residuals**2).sum() / df)) if df > 0 else 0.0
    return OlsFit(
        slope=slope,
        intercept=intercept,
        residual_std=residual_std,
        df=df,
        x_mean=float(x_mean),
        sxx=sxx,
        n=int(x.size),
    )


@dataclass
class AcousticRow:
    system: str
    f0_cov: float
    rate_cov: float


@dataclass
class AcousticReport:
    """Per-system variability measures, optionally related to listening scores.

    Fits exclude the reference (copy-synthesis) system. When fewer than three
    non-reference systems have scores, the correlation is undefined and
    flagged in ``note`` instead of being computed.
    """

    rows: List[AcousticRow]
    f0_score_r: Optional[float] = None
    rate_score_r: Optional[float] = None
    f0_fit: Optional[OlsFit] = None
    rate_fit: Optional[OlsFit] = None
    note: str = ""


def acoustic_report(
    f0_tracks_by_system: Mapping[str, Sequence],
    rates_by_system: Mapping[str, Sequence[float]],
    scores_by_system: Optional[Mapping[str, float]] = None,
    reference_system: str = ABS_SYSTEM,
) -> AcousticReport:
    """Coefficient-of-variation table, plus score fits excluding the reference."""
    from rakugo_tts.dsp import corpus_rate_cov, f0_cov

    systems = sorted(f0_tracks_by_system)
    if not systems:
        raise ValueError("no systems to report on")
    if sorted(rates_by_system) != systems:
        raise ValueError("f0 and rate inputs cover different systems")
    rows = [
        AcousticRow(
            system=s,
            f0_cov=f0_cov(list(f0_tracks_by_system[s])),
            rate_cov=corpus_rate_cov(list(rates_by_system[s])),
        )
        for s in systems
    ]
    report = AcousticReport(rows=rows)
    if scores_by_system is None:
        return report
    fitted_rows = [r for r in rows if r.system != reference_system and r.system in scores_by_system]
    if len(fitted_rows) < 3:
        report.note = (
            "correlation undefined: fewer than 3 non-reference systems with scores"
        )
        return report
    scores = [scores_by_system[r.system] for r in fitted_rows]
    try:
        report.f0_score_r = pearson_r([r.f0_cov for r in fitted_rows], scores)
        report.f0_fit = ols_regression([r.f0_cov for r in fitted_rows], scores)
        report.rate_score_r = pearson_r([r.rate_cov for r in fitted_rows], scores)
        report.rate_fit = ols_regression([r.rate_cov for r in fitted_rows], scores)
    except ValueError as exc:
        report.note = f"correlation undefined: {exc}"
    return report


def mean_scores_by_system(
    records: Sequence[ScoreRecord], question: str
) -> Dict[str, float]:
    """Average normalized score per system for one question."""
    sums: Dict[str, List[float]] = {}
    for r in records:
        if r.question == question:
            sums.setdefault(r.system, []).append(r.score)
    return {s: float(np.mean(v)) for s, v in sums.items()}
