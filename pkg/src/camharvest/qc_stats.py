"""Quality-control statistics: sample-size planning, proportion estimates
with Wald confidence intervals, and relative-change comparison of a weak
vs a strong detector judged on the same test population.

All functions are pure and safe to call concurrently.
"""
from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence


class QcError(ValueError):
    """Invalid QC parameters or undefined estimate."""


# ---------------------------------------------------------------------------
# Normal quantile


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Rational approximation (Acklam) refined with one Halley step against
    the erfc-based CDF; absolute error is well below 1e-10 across (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise QcError(f"quantile argument must be in (0,1), got {p}")

    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)

    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)

    # One Halley refinement step.
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    x = x - u / (1.0 + x * u / 2.0)
    return x


def z_for_confidence(confidence: float) -> float:
    """Two-sided critical value: 0.95 -> 1.95996..."""
    if not 0.0 < confidence < 1.0:
        raise QcError(f"confidence must be in (0,1), got {confidence}")
    return normal_quantile((1.0 + confidence) / 2.0)


# ---------------------------------------------------------------------------
# Planning


@dataclass(frozen=True)
class QcPlan:
    """Sample-size plan for estimating detector precision on a random sample."""

    pilot_p_hat: float
    epsilon: float
    confidence: float
    z_value: float
    required_n: int

    @property
    def raw_n(self) -> float:
        """The formula value before the ceiling is applied."""
        return (self.z_value ** 2 * self.pilot_p_hat * (1.0 - self.pilot_p_hat)
                / self.epsilon ** 2)


def required_sample_size(pilot_p_hat: float, epsilon: float,
                         confidence: float) -> QcPlan:
    """Minimum sample size for a proportion CI of half-width ``epsilon``.

    n = ceil(z^2 * p(1-p) / eps^2); the ceiling is the conservative
    convention for minimum sample sizes.
    """
    if not 0.0 < pilot_p_hat < 1.0:
        raise QcError(f"pilot proportion must be in (0,1), got {pilot_p_hat}")
    if epsilon <= 0.0:
        raise QcError(f"margin of error must be positive, got {epsilon}")
    z = z_for_confidence(confidence)
    raw = z * z * pilot_p_hat * (1.0 - pilot_p_hat) / (epsilon * epsilon)
    return QcPlan(pilot_p_hat=pilot_p_hat, epsilon=epsilon,
                  confidence=confidence, z_value=z,
                  required_n=math.ceil(raw))


def draw_qc_sample(population: Sequence[str], n: int, seed: int) -> list[str]:
    """Uniform sample of ids without replacement, deterministic for ``seed``.

    The output is sorted so it carries no trace of the input order.
    """
    if n < 0:
        raise QcError(f"sample size must be non-negative, got {n}")
    if n > len(population):
        raise QcError(
            f"sample size {n} exceeds population size {len(population)}; "
            f"maximum achievable is {len(population)}")
    rng = random.Random(seed)
    return sorted(rng.sample(sorted(population), n))


# ---------------------------------------------------------------------------
# Estimation


@dataclass(frozen=True)
class QcCounts:
    """Verified TP/FP (and optionally FN) counts for one detector."""

    detector_id: str
    tp: int
    fp: int
    fn: Optional[int] = None

    def __post_init__(self):
        if self.tp < 0 or self.fp < 0 or (self.fn is not None and self.fn < 0):
            raise QcError(f"counts must be non-negative: {self}")

    @property
    def population(self) -> Optional[int]:
        return None if self.fn is None else self.tp + self.fn


@dataclass(frozen=True)
class ProportionEstimate:
    value: float
    ci_low: float
    ci_high: float
    n: int


def _wald(value: float, n: int, confidence: float) -> ProportionEstimate:
    z = z_for_confidence(confidence)
    half = z * math.sqrt(value * (1.0 - value) / n)
    return ProportionEstimate(value=value,
                              ci_low=max(0.0, value - half),
                              ci_high=min(1.0, value + half),
                              n=n)


def precision_estimate(counts: QcCounts, confidence: float = 0.95) -> ProportionEstimate:
    """TP/(TP+FP) with a Wald interval over n = TP+FP."""
    n = counts.tp + counts.fp
    if n == 0:
        raise QcError(f"precision undefined for {counts.detector_id}: tp+fp = 0")
    return _wald(counts.tp / n, n, confidence)


def recall_estimate(counts: QcCounts, confidence: float = 0.95) -> ProportionEstimate:
    """TP/(TP+FN) with a Wald interval over n = TP+FN.

    Requires the FN count; counting misses is an optional QC step, so the
    caller must handle the unavailable case.
    """
    if counts.fn is None:
        raise QcError(
            f"recall unavailable for {counts.detector_id}: no FN count recorded")
    n = counts.tp + counts.fn
    if n == 0:
        raise QcError(f"recall undefined for {counts.detector_id}: tp+fn = 0")
    return _wald(counts.tp / n, n, confidence)


def relative_change_recall(wc: QcCounts, sc: QcCounts) -> float:
    """(TP_sc - TP_wc) / TP_wc.

    Equals the relative recall change whenever both detectors were judged
    over the same population (TP+FN equal on both sides); the TP+FN terms
    then cancel, so no FN count is needed.
    """
    if wc.tp == 0:
        raise QcError("relative recall change undefined: weak detector TP = 0")
    if wc.population is not None and sc.population is not None:
        if wc.population != sc.population:
            warnings.warn(
                f"populations differ ({wc.population} vs {sc.population}); "
                "the TP-ratio shortcut assumes equal TP+FN on both sides",
                stacklevel=2)
    elif wc.population is None or sc.population is None:
        warnings.warn(
            "FN counts missing; equal-population assumption is unverified",
            stacklevel=2)
    return (sc.tp - wc.tp) / wc.tp


def relative_change_precision(wc_est: ProportionEstimate,
                              sc_est: ProportionEstimate) -> float:
    """(p_sc - p_wc) / p_wc."""
    if wc_est.value == 0.0:
        raise QcError("relative precision change undefined: weak precision = 0")
    return (sc_est.value - wc_est.value) / wc_est.value


# ---------------------------------------------------------------------------
# Combined report


@dataclass(frozen=True)
class QcReport:
    wc: QcCounts
    sc: QcCounts
    confidence: float
    precision_wc: ProportionEstimate
    precision_sc: ProportionEstimate
    recall_wc: Optional[ProportionEstimate]
    recall_sc: Optional[ProportionEstimate]
    rc_recall: float
    rc_precision: float
    population_mismatch: bool


def build_report(wc: QcCounts, sc: QcCounts, confidence: float = 0.95) -> QcReport:
    """Combine both detectors' QC counts into one comparative report."""
    p_wc = precision_estimate(wc, confidence)
    p_sc = precision_estimate(sc, confidence)
    r_wc = recall_estimate(wc, confidence) if wc.fn is not None and wc.tp + wc.fn > 0 else None
    r_sc = recall_estimate(sc, confidence) if sc.fn is not None and sc.tp + sc.fn > 0 else None
    mismatch = (wc.population is not None and sc.population is not None
                and wc.population != sc.population)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc_rec = relative_change_recall(wc, sc)
    rc_prec = relative_change_precision(p_wc, p_sc)
    return QcReport(wc=wc, sc=sc, confidence=confidence,
                    precision_wc=p_wc, precision_sc=p_sc,
                    recall_wc=r_wc, recall_sc=r_sc,
                    rc_recall=rc_rec, rc_precision=rc_prec,
                    population_mismatch=mismatch)


def render_report(report: QcReport) -> str:
    """Plain-text comparative table: counts, estimates, relative changes."""

    def pct(x: Optional[float]) -> str:
        return "-" if x is None else f"{100.0 * x:.1f}%"

    def ci(est: Optional[ProportionEstimate]) -> str:
        if est is None:
            return "-"
        return f"[{100.0 * est.ci_low:.1f}%, {100.0 * est.ci_high:.1f}%]"

    rows = []
    header = (f"{'detector':<16}{'TP':>8}{'FP':>8}{'FN':>8}"
              f"{'precision':>11}{'CI':>18}{'recall':>9}{'CI':>18}")
    rows.append(header)
    rows.append("-" * len(header))
    for counts, p, r in ((report.wc, report.precision_wc, report.recall_wc),
                         (report.sc, report.precision_sc, report.recall_sc)):
        fn = "-" if counts.fn is None else str(counts.fn)
        rows.append(f"{counts.detector_id:<16}{counts.tp:>8}{counts.fp:>8}{fn:>8}"
                    f"{pct(p.value):>11}{ci(p):>18}"
                    f"{pct(r.value if r else None):>9}{ci(r):>18}")
    rows.append("")
    rows.append(f"relative change, recall    : {pct(report.rc_recall):>8}"
                f"  ({report.rc_recall:+.4f})")
    rows.append(f"relative change, precision : {pct(report.rc_precision):>8}"
                f"  ({report.rc_precision:+.4f})")
    if report.wc.population is not None and report.sc.population is not None:
        status = ("MISMATCH - equal-population assumption violated"
                  if report.population_mismatch else "ok")
        rows.append(f"population check (TP+FN)   : "
                    f"{report.wc.population} vs {report.sc.population} [{status}]")
    else:
        rows.append("population check (TP+FN)   : unavailable (FN not counted)")
    rows.append(f"confidence level           : {report.confidence:.2f}")
    return "\n".join(rows) + "\n"
