"""Censoring-aware landmark metrics and the k-fold evaluation harness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .cox import BaselineHazardTable, SurvivalRecord, _arrays, dynamic_survival, landmark_cohort

__all__ = [
    "UndefinedScenario",
    "DegenerateWeightError",
    "CensoringSurvivor",
    "km_censoring_survivor",
    "time_dependent_auc",
    "time_dependent_cindex",
    "brier_score",
    "FittedModel",
    "EvaluationReport",
    "cross_validate",
    "fold_assignment",
    "MONTHS",
]

MONTHS = 120.0


class UndefinedScenario(ValueError):
    """A landmark window has no cases, no controls, or no usable pairs."""


class DegenerateWeightError(ValueError):
    """Censoring survivor is zero where an inverse weight is required."""


@dataclass
class CensoringSurvivor:
    """Kaplan-Meier estimate of the censoring survivor function ``G``."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate([[1.0], self.values])[idx]
        return float(out) if np.ndim(out) == 0 else out

    def left(self, t):
        """``G(t-)``, the value just before ``t``."""
        idx = np.searchsorted(self.times, t, side="left")
        out = np.concatenate([[1.0], self.values])[idx]
        return float(out) if np.ndim(out) == 0 else out


def km_censoring_survivor(records) -> CensoringSurvivor:
    """KM with the roles of events and censorings swapped; right-continuous."""
    times, events = _arrays(records)
    if times.size == 0:
        raise ValueError("need at least one record")
    cens_times = np.unique(times[events == 0])
    values = np.empty(len(cens_times))
    s = 1.0
    for k, t in enumerate(cens_times):
        at_risk = np.sum(times >= t)
        c = np.sum((times == t) & (events == 0))
        s *= 1.0 - c / at_risk
        values[k] = s
    return CensoringSurvivor(cens_times, values)


def _window(times, events, t_star, dt):
    at_risk = times >= t_star
    horizon = t_star + dt
    cases = at_risk & (times > t_star) & (times <= horizon) & (events == 1)
    controls = at_risk & (times > horizon)
    return at_risk, cases, controls


def time_dependent_auc(risks, records, t_star: float, dt: float,
                       censoring: CensoringSurvivor | None = None) -> float:
    """Cumulative/dynamic IPCW AUC over the window ``(t*, t* + dt]``.

    Cases are window events weighted by ``1/G(T_i-)``; controls are
    survivors past ``t* + dt`` (their common weight cancels). Tied risks
    count one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    _, cases, controls = _window(times, events, t_star, dt)
    if not cases.any() or not controls.any():
        raise UndefinedScenario(f"window ({t_star:g}, {t_star + dt:g}]: "
                                f"{cases.sum()} cases, {controls.sum()} controls")
    G = censoring or km_censoring_survivor(records)
    g_case = G.left(times[cases])
    if np.any(np.asarray(g_case) <= 0):
        raise DegenerateWeightError("censoring survivor is 0 at a case time")
    w = 1.0 / np.asarray(g_case)
    rc, rk = r[cases][:, None], r[controls][None, :]
    score = (rc > rk).sum(axis=1) + 0.5 * (rc == rk).sum(axis=1)
    return float(np.sum(w * score) / (np.sum(w) * controls.sum()))


def time_dependent_cindex(risks, records, t_star: float, dt: float) -> float:
    """Concordance over pairs with ``i`` a window event and ``T_i < T_j`` (both at risk at t*)."""
    r = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    at_risk, cases, _ = _window(times, events, t_star, dt)
    num = den = 0.0
    for i in np.flatnonzero(cases):
        js = at_risk & (times > times[i])
        n = js.sum()
        if n == 0:
            continue
        den += n
        num += np.sum(r[i] > r[js]) + 0.5 * np.sum(r[i] == r[js])
    if den == 0:
        raise UndefinedScenario(f"no usable pairs in window ({t_star:g}, {t_star + dt:g}]")
    return float(num / den)


def brier_score(predicted, records, t_star: float, dt: float,
                censoring: CensoringSurvivor | None = None) -> float:
    """IPCW Brier score of conditional survival predictions at ``t* + dt``.

    Weights are ``G(t*)/G(T_i-)`` for window events, ``G(t*)/G(t*+dt)`` for
    survivors and 0 for patients censored inside the window; the mean runs
    over everyone at risk at ``t*``.
    """
    s = np.asarray(predicted, dtype=np.float64)
    times, events = _arrays(records)
    at_risk, cases, controls = _window(times, events, t_star, dt)
    if not at_risk.any():
        raise UndefinedScenario(f"nobody at risk at t*={t_star:g}")
    if np.any((s < 0) | (s > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    G = censoring or km_censoring_survivor(records)
    g0 = G(t_star)
    w = np.zeros(len(times))
    if cases.any():
        gc = np.asarray(G.left(times[cases]))
        if np.any(gc <= 0):
            raise DegenerateWeightError("censoring survivor is 0 at a case time")
        w[cases] = g0 / gc
    if controls.any():
        gh = G(t_star + dt)
        if gh <= 0:
            raise DegenerateWeightError("censoring survivor is 0 at the horizon")
        w[controls] = g0 / gh
    outcome = (times > t_star + dt).astype(float)
    return float(np.sum((w * (outcome - s) ** 2)[at_risk]) / at_risk.sum())


# evaluation harness -----------------------------------------------------

class FittedModel(Protocol):
    """What a trainer hands back: risks for landmarked patients plus a Breslow table."""

    table: BaselineHazardTable

    def risks(self, sequences, counts) -> np.ndarray: ...


Trainer = Callable[[object, float], FittedModel]


@dataclass
class EvaluationReport:
    rows: list[dict] = field(default_factory=list)

    FOLD_COLUMNS = ("t_star_months", "dt_months", "method", "fold", "auc", "cindex", "brier")

    def add(self, **row) -> None:
        self.rows.append(row)

    def values(self, method: str, t_star_months: float, dt_months: float, key: str,
               run: int | None = None) -> np.ndarray:
        vals = [r[key] for r in self.rows
                if r["method"] == method and r["t_star_months"] == t_star_months
                and r["dt_months"] == dt_months and (run is None or r.get("run", 0) == run)]
        return np.array([v for v in vals if v is not None and not math.isnan(v)], dtype=float)

    def mean(self, method, t_star_months, dt_months, key, run=None) -> float:
        v = self.values(method, t_star_months, dt_months, key, run)
        return float(v.mean()) if v.size else math.nan

    def run_means(self, method, t_star_months, dt_months, key) -> np.ndarray:
        """Fold-averaged value per run (runs with no defined fold are dropped)."""
        runs = sorted({r.get("run", 0) for r in self.rows})
        out = [self.mean(method, t_star_months, dt_months, key, run) for run in runs]
        return np.array([x for x in out if not math.isnan(x)])

    def scenarios(self) -> list[tuple[float, float]]:
        seen = []
        for r in self.rows:
            key = (r["t_star_months"], r["dt_months"])
            if key not in seen:
                seen.append(key)
        return seen

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def summary(self) -> list[dict]:
        """Table-1 style rows: mean over runs of fold-averaged metrics, plus run SDs."""
        out = []
        for ts, dt in self.scenarios():
            true_auc = (float(np.mean(self.run_means("oracle", ts, dt, "auc")))
                        if "oracle" in self.methods() and self.run_means("oracle", ts, dt, "auc").size
                        else math.nan)
            for m in self.methods():
                row = {"t_star_months": ts, "dt_months": dt, "method": m, "true_auc": true_auc}
                for key in ("auc", "cindex", "brier"):
                    v = self.run_means(m, ts, dt, key)
                    row[key] = float(v.mean()) if v.size else math.nan
                    row[f"{key}_sd"] = float(v.std(ddof=1)) if v.size > 1 else math.nan
                out.append(row)
        return out

    def to_csv(self, path) -> None:
        has_run = any("run" in r for r in self.rows)
        cols = (("run",) if has_run else ()) + self.FOLD_COLUMNS
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, 0 if c == "run" else None)) for c in cols])

    def summary_to_csv(self, path) -> None:
        cols = ("t_star_months", "dt_months", "method", "true_auc", "auc", "cindex", "brier",
                "auc_sd", "cindex_sd", "brier_sd")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.summary():
                w.writerow([_fmt(r[c]) for c in cols])


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}" if not v.is_integer() else f"{v:g}"
    return str(v)


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded patient-level fold labels with sizes differing by at most one."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"{n} patients cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=int)
    labels[perm] = np.arange(n) % folds
    return labels


def cross_validate(dataset, folds: int, scenarios: Sequence[tuple[float, float]],
                   trainers: Mapping[str, Trainer] | Trainer, seed: int = 0,
                   report: EvaluationReport | None = None, run: int | None = None,
                   on_fold: Callable[[dict], None] | None = None) -> EvaluationReport:
    """k-fold landmark evaluation.

    ``scenarios`` are ``(t*, dt)`` pairs in months. Each trainer is fitted
    once per fold and landmark on the other folds and scored on the held-out
    fold; undefined metrics are recorded as NaN.
    """
    if not isinstance(trainers, Mapping):
        trainers = {"model": trainers}
    report = report or EvaluationReport()
    labels = fold_assignment(len(dataset), folds, seed)
    landmarks = sorted({ts for ts, _ in scenarios})
    for fold in range(folds):
        train_ds = dataset.subset(np.flatnonzero(labels != fold))
        test_ds = dataset.subset(np.flatnonzero(labels == fold))
        for ts_months in landmarks:
            t_star = ts_months / MONTHS
            seqs, recs, counts = landmark_cohort(test_ds.sequences, test_ds.records, t_star)
            G = km_censoring_survivor(test_ds.records)
            for name, trainer in trainers.items():
                fitted = trainer(train_ds, t_star)
                risks = fitted.risks(seqs, counts) if seqs else np.zeros(0)
                for ts_m, dt_m in scenarios:
                    if ts_m != ts_months:
                        continue
                    dt = dt_m / MONTHS
                    row = {"t_star_months": ts_m, "dt_months": dt_m, "method": name,
                           "fold": fold, "n_at_risk": len(seqs)}
                    if run is not None:
                        row["run"] = run
                    row["auc"] = _safe(lambda: time_dependent_auc(risks, recs, t_star, dt, G))
                    row["cindex"] = _safe(lambda: time_dependent_cindex(risks, recs, t_star, dt))
                    surv = [dynamic_survival(r, t_star, dt, fitted.table) for r in risks]
                    row["brier"] = _safe(lambda: brier_score(surv, recs, t_star, dt, G))
                    report.add(**row)
                    if on_fold is not None:
                        on_fold(row)
    return report


def _safe(fn) -> float:
    try:
        return fn()
    except (UndefinedScenario, DegenerateWeightError, ZeroDivisionError):
        return math.nan
