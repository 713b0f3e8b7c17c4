"""Presentation-attack detection metrics and analysis of network outputs.

Scores follow the convention ``score >= threshold`` -> classified live.
Rates in :class:`ErrorReport` are percentages; ROC points are fractions.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ScoredSet:
    ids: list[str]
    labels: np.ndarray   # bool, True = live
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.ids) == len(self.labels) == len(self.scores)):
            raise MetricsError("ids, labels and scores must align")

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, str, float]]) -> "ScoredSet":
        return cls([e[0] for e in entries], np.array([e[1] == "live" for e in entries]),
                   np.array([e[2] for e in entries], dtype=np.float64))

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        live, spoof = self.scores[self.labels], self.scores[~self.labels]
        if live.size == 0 or spoof.size == 0:
            raise MetricsError("both live and spoof samples are required")
        return live, spoof


@dataclass
class ErrorReport:
    apcer: float
    bpcer: float
    acer: float
    hter: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def _rates(live: np.ndarray, spoof: np.ndarray, tau: float) -> tuple[float, float]:
    """(spoof accept fraction, live reject fraction)."""
    return float(np.mean(spoof >= tau)), float(np.mean(live < tau))


def rates_at_threshold(s: ScoredSet, tau: float) -> ErrorReport:
    if not np.isfinite(tau):
        raise MetricsError("threshold must be finite")
    live, spoof = s.split()
    far, frr = _rates(live, spoof, tau)
    apcer, bpcer = 100.0 * far, 100.0 * frr
    return ErrorReport(apcer, bpcer, (apcer + bpcer) / 2, (frr + far) / 2 * 100.0, tau)


def roc(s: ScoredSet) -> list[tuple[float, float]]:
    """(FDR, TDR) at every distinct score used as threshold, plus the reject-all point."""
    live, spoof = s.split()
    pts = [(0.0, 0.0)]
    for tau in np.unique(s.scores)[::-1]:
        pts.append(_rates(live, spoof, tau)[0:1] + (float(np.mean(live >= tau)),))
    return pts


def tdr_at_fdr(s: ScoredSet, fdr_target: float) -> float:
    """Best live-accept rate over thresholds whose spoof-accept rate is <= ``fdr_target``."""
    if not 0.0 <= fdr_target <= 1.0:
        raise MetricsError("fdr_target must lie in [0, 1]")
    return max(tdr for fdr, tdr in roc(s) if fdr <= fdr_target + 1e-12)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[1:] + u[:-1]) / 2
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def eer_threshold(s: ScoredSet) -> float:
    """Threshold where APCER and BPCER are closest (ties: lower ACER, then midpoint of the tied run)."""
    live, spoof = s.split()
    cands = candidate_thresholds(s.scores)
    keys = []
    for tau in cands:
        far, frr = _rates(live, spoof, tau)
        keys.append((round(abs(far - frr), 12), round(far + frr, 12)))
    best = min(keys)
    idx = [i for i, k in enumerate(keys) if k == best]
    return float(cands[idx[len(idx) // 2]])


def frontal_map_stats(maps: np.ndarray, labels: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-pixel mean and population std of frontal maps for each class."""
    maps = np.asarray(maps, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    out = {}
    for name, sel in (("live", labels), ("spoof", ~labels)):
        if not sel.any():
            raise MetricsError(f"no {name} maps")
        out[name] = (maps[sel].mean(axis=0), maps[sel].std(axis=0))
    return out


def estimation_mse(pred: np.ndarray, gt: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Mean squared error per element, separately for live and spoof samples."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    err = ((pred - gt) ** 2).reshape(len(pred), -1).mean(axis=1)
    return {name: float(err[sel].mean()) if sel.any() else float("nan")
            for name, sel in (("live", labels), ("spoof", ~labels))}


@dataclass
class FailureCounts:
    failed: int
    depth_fail: int
    rppg_fail: int
    both: int
    depth_only: int
    rppg_only: int
    both_pass: int
    depth_threshold: float
    rppg_threshold: float

    @property
    def attributed(self) -> int:
        return self.depth_fail + self.rppg_fail - self.both

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributed"] = self.attributed
        return d


def attribute_failures(depths: np.ndarray, rppgs: np.ndarray, labels: np.ndarray, lam: float,
                       tau: float) -> FailureCounts:
    """Explain clips misclassified by the fused score through its two sub-scores.

    Each sub-score (``lam * ||D||^2`` and ``||f||^2``) gets its own
    equal-error threshold on this set; a failed clip is charged to every
    sub-score that also misclassifies it.
    """
    labels = np.asarray(labels, dtype=bool)
    ids = [str(i) for i in range(len(labels))]
    d_sc = lam * np.sum(np.asarray(depths, dtype=np.float64).reshape(len(labels), -1) ** 2, axis=1)
    r_sc = np.sum(np.asarray(rppgs, dtype=np.float64).reshape(len(labels), -1) ** 2, axis=1)
    fused = d_sc + r_sc
    tau_d = eer_threshold(ScoredSet(ids, labels, d_sc))
    tau_r = eer_threshold(ScoredSet(ids, labels, r_sc))
    wrong = (fused >= tau) != labels
    d_wrong = (d_sc >= tau_d) != labels
    r_wrong = (r_sc >= tau_r) != labels
    f = wrong
    return FailureCounts(
        failed=int(f.sum()),
        depth_fail=int((f & d_wrong).sum()),
        rppg_fail=int((f & r_wrong).sum()),
        both=int((f & d_wrong & r_wrong).sum()),
        depth_only=int((f & d_wrong & ~r_wrong).sum()),
        rppg_only=int((f & r_wrong & ~d_wrong).sum()),
        both_pass=int((f & ~d_wrong & ~r_wrong).sum()),
        depth_threshold=tau_d, rppg_threshold=tau_r)
