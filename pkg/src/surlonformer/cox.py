"""Cox partial likelihood, Breslow baseline hazard, survival prediction and training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ImageSequence, InputError, ModelConfig, ParameterStore, cohort_risks,
                    init_parameters, is_weight_matrix, patchify_batch)

__all__ = [
    "SurvivalRecord",
    "BaselineHazardTable",
    "TrainConfig",
    "TrainResult",
    "UndefinedLikelihoodError",
    "DataInsufficiencyError",
    "DivergenceError",
    "neg_log_partial_likelihood",
    "partial_likelihood_tensor",
    "elastic_net_penalty",
    "breslow_baseline",
    "survival_probability",
    "dynamic_survival",
    "landmark_cohort",
    "train",
    "predict_risks",
]

log = logging.getLogger(__name__)


class UndefinedLikelihoodError(ValueError):
    """No observed events, so the partial likelihood is undefined."""


class DataInsufficiencyError(ValueError):
    """Too few patients or events remain after landmark filtering."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, cause: Exception | None = None):
        super().__init__(f"non-finite loss at epoch {epoch}" + (f": {cause}" if cause else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: int

    def __post_init__(self):
        if not 0.0 < self.time <= 1.0:
            raise InputError(f"patient {self.patient_id}: time {self.time} outside (0, 1]")
        if self.event not in (0, 1):
            raise InputError(f"patient {self.patient_id}: event flag must be 0 or 1")


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(records, tuple) and len(records) == 2 and not isinstance(records[0], SurvivalRecord):
        times, events = records
        return np.asarray(times, dtype=np.float64), np.asarray(events, dtype=np.int64)
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    return times, events


# partial likelihood -----------------------------------------------------

def _risk_set_terms(risks: np.ndarray, times: np.ndarray, events: np.ndarray):
    """Per-event log-sum-exp over risk sets and the softmax weights within them."""
    ev = np.flatnonzero(events == 1)
    at_risk = times[None, :] >= times[ev, None]  # row: members of R_i for event i
    # shift each row by its own risk-set maximum so no row underflows to zero
    masked = np.where(at_risk, risks[None, :], -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    w = np.exp(masked - shift)
    denom = w.sum(axis=1)
    lse = np.log(denom) + shift[:, 0]
    return ev, lse, w / denom[:, None]


def neg_log_partial_likelihood(risks, records) -> float:
    """Mean over events of ``log sum_{k in R_i} exp(r_k) - r_i`` (Breslow ties)."""
    r = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    if events.sum() < 1:
        raise UndefinedLikelihoodError("partial likelihood needs at least one event")
    if not np.all(np.isfinite(r)):
        raise ad.NonFiniteError("non-finite risk score")
    ev, lse, _ = _risk_set_terms(r, times, events)
    return float(np.mean(lse - r[ev]))


def partial_likelihood_tensor(risks: Tensor, times: np.ndarray, events: np.ndarray) -> Tensor:
    """Differentiable version of :func:`neg_log_partial_likelihood`."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if events.sum() < 1:
        raise UndefinedLikelihoodError("partial likelihood needs at least one event")
    r = risks.data
    ev, lse, weights = _risk_set_terms(r, times, events)
    n_events = len(ev)
    value = np.mean(lse - r[ev])

    def fn(g):
        grad = weights.sum(axis=0)
        grad[ev] -= 1.0
        return (g * grad / n_events,)

    return ad.custom(np.asarray(value), (risks,), fn, "cox_nll")


def cox_gradient(risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> np.ndarray:
    """d(loss)/d(risk) for the mean negative log partial likelihood."""
    ev, _, weights = _risk_set_terms(risks, times, events)
    grad = weights.sum(axis=0)
    grad[ev] -= 1.0
    return grad / len(ev)


# penalty ----------------------------------------------------------------

def elastic_net_penalty(params, lam: float, alpha: float,
                        penalized: Callable[[str], bool] = is_weight_matrix):
    """``lam * (alpha * sum|w| + (1 - alpha) * sum w^2)`` over weight matrices.

    Returns a float for a mapping of arrays, or a Tensor when given Tensors.
    """
    if lam < 0 or not 0.0 <= alpha <= 1.0:
        raise ValueError("need lam >= 0 and alpha in [0, 1]")
    names = [k for k in params if penalized(k)]
    values = [params[k] for k in names]
    if values and isinstance(values[0], Tensor):
        total = ad.tensor(0.0)
        if lam == 0:
            return total
        for w in values:
            term = ad.mul(ad.sum_(ad.abs_(w)), alpha) + ad.mul(ad.sum_(ad.square(w)), 1.0 - alpha)
            total = total + term
        return ad.mul(total, lam)
    if lam == 0:
        return 0.0
    l1 = sum(float(np.abs(w).sum()) for w in values)
    l2 = sum(float((w * w).sum()) for w in values)
    return lam * (alpha * l1 + (1.0 - alpha) * l2)


def penalty_gradient(params: dict[str, np.ndarray], lam: float, alpha: float,
                     penalized: Callable[[str], bool] = is_weight_matrix) -> dict[str, np.ndarray]:
    out = {}
    for k, w in params.items():
        out[k] = lam * (alpha * np.sign(w) + 2.0 * (1.0 - alpha) * w) if penalized(k) \
            else np.zeros_like(w)
    return out


# Breslow ------------------------------------------------------------------

@dataclass
class BaselineHazardTable:
    times: np.ndarray
    event_counts: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray

    def cumulative_at(self, t) -> np.ndarray | float:
        """Right-continuous step function ``H0(t) = sum_{t_k <= t} h0(t_k)``."""
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative])
        out = padded[idx]
        return float(out) if np.ndim(out) == 0 else out

    def baseline_survival(self, t):
        return np.exp(-self.cumulative_at(t))

    def shifted(self, c: float) -> "BaselineHazardTable":
        """Table matching risks shifted by ``+c`` (hazard scaled by ``exp(-c)``)."""
        s = math.exp(-c)
        return BaselineHazardTable(self.times.copy(), self.event_counts.copy(),
                                   self.increments * s, self.cumulative * s)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "d_k", "h0_increment", "H0_cum"])
            for row in zip(self.times, self.event_counts, self.increments, self.cumulative):
                w.writerow([repr(float(row[0])), int(row[1]), repr(float(row[2])),
                            repr(float(row[3]))])

    @classmethod
    def from_csv(cls, path) -> "BaselineHazardTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["t"]) for r in rows]),
                   np.array([int(r["d_k"]) for r in rows]),
                   np.array([float(r["h0_increment"]) for r in rows]),
                   np.array([float(r["H0_cum"]) for r in rows]))


def breslow_baseline(risks, records) -> BaselineHazardTable:
    """Breslow increments ``d_k / sum_{j: T_j >= t_k} exp(r_j)`` at distinct event times."""
    r = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    if events.sum() < 1:
        raise UndefinedLikelihoodError("Breslow estimator needs at least one event")
    event_times, counts = np.unique(times[events == 1], return_counts=True)
    order = np.argsort(times, kind="stable")
    sorted_t = times[order]
    # suffix log-sum-exp of r over patients ordered by time gives each risk-set total
    log_tail = np.logaddexp.accumulate(r[order][::-1])[::-1]
    start = np.searchsorted(sorted_t, event_times, side="left")
    with np.errstate(over="ignore", under="ignore"):
        inc = counts * np.exp(-log_tail[start])
    return BaselineHazardTable(event_times, counts, inc, np.cumsum(inc))


def survival_probability(r: float, t: float, table: BaselineHazardTable) -> float:
    """``exp(-H0(t) * exp(r))``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    h = table.cumulative_at(t)
    with np.errstate(over="ignore"):
        return float(np.exp(-h * np.exp(r)))


def dynamic_survival(r: float, t_star: float, dt: float, table: BaselineHazardTable) -> float:
    """``P(U > t* + dt | U > t*) = (S0(t* + dt) / S0(t*)) ** exp(r)``."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0:
        return 1.0
    h_star = table.cumulative_at(t_star)
    if not np.isfinite(math.exp(-h_star)) or math.exp(-h_star) == 0.0:
        raise ZeroDivisionError("baseline survival is 0 at the landmark")
    diff = table.cumulative_at(t_star + dt) - h_star
    with np.errstate(over="ignore"):
        return float(np.exp(-diff * np.exp(r)))


# training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-4
    alpha: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 20
    landmark: float = 0.1
    seed: int = 0
    val_fraction: float = 0.1
    chunk: int = 25
    warmup: int = 5

    def __post_init__(self):
        if self.lam < 0 or not 0.0 <= self.alpha <= 1.0:
            raise ValueError("need lam >= 0 and alpha in [0, 1]")
        if self.epochs < 1 or self.chunk < 1:
            raise ValueError("epochs and chunk must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainResult:
    params: ParameterStore
    table: BaselineHazardTable
    trace: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def trace_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "penalty"])
            for row in self.trace:
                w.writerow([row["epoch"], repr(row["train_loss"]),
                            "" if row["val_loss"] is None else repr(row["val_loss"]),
                            repr(row["penalty"])])


def landmark_cohort(sequences: Sequence[ImageSequence], records: Sequence[SurvivalRecord],
                    t_star: float) -> tuple[list[ImageSequence], list[SurvivalRecord], list[int]]:
    """Patients with ``T >= t*`` and the number of their visits at or before ``t*``."""
    keep_s, keep_r, counts = [], [], []
    for seq, rec in zip(sequences, records):
        if rec.time < t_star:
            continue
        j = seq.visits_until(t_star)
        if j < 1:
            continue
        keep_s.append(seq)
        keep_r.append(rec)
        counts.append(j)
    return keep_s, keep_r, counts


class _Cohort:
    """Landmarked patients with cached patch stacks."""

    def __init__(self, sequences, counts, config: ModelConfig):
        self.sequences = list(sequences)
        self.counts = list(counts)
        self.patches = [patchify_batch(np.stack(s.images[:j]), config.P)
                        for s, j in zip(self.sequences, self.counts)]

    def __len__(self):
        return len(self.sequences)

    def chunks(self, size: int):
        for start in range(0, len(self), size):
            stop = min(start + size, len(self))
            yield start, stop, np.concatenate(self.patches[start:stop])


def predict_risks(params: ParameterStore, sequences, counts, config: ModelConfig | None = None,
                  chunk: int = 25) -> np.ndarray:
    """Inference-mode risks (no dropout) for landmarked patients."""
    config = config or params.config
    cohort = sequences if isinstance(sequences, _Cohort) else _Cohort(sequences, counts, config)
    consts = params.constants()
    out = np.empty(len(cohort))
    for start, stop, patches in cohort.chunks(chunk):
        r = cohort_risks(cohort.sequences[start:stop], cohort.counts[start:stop], consts,
                         config, patches=patches)
        out[start:stop] = r.data
    return out


def _epoch_gradient(params: ParameterStore, cohort: _Cohort, times, events, config: ModelConfig,
                    chunk: int, seed_seq: np.random.SeedSequence):
    """Exact full-batch loss gradient computed in memory-bounded chunks.

    Pass 1 evaluates every risk without a tape; the Cox loss gradient with
    respect to the risks is then pushed back through each chunk's graph.
    Each chunk reuses its own dropout stream in both passes.
    """
    chunk_seeds = seed_seq.spawn(math.ceil(len(cohort) / chunk))
    consts = params.constants()
    risks = np.empty(len(cohort))
    for k, (start, stop, patches) in enumerate(cohort.chunks(chunk)):
        rng = np.random.default_rng(chunk_seeds[k])
        risks[start:stop] = cohort_risks(cohort.sequences[start:stop], cohort.counts[start:stop],
                                         consts, config, rng=rng, patches=patches).data
    loss = neg_log_partial_likelihood(risks, (times, events))
    d_risk = cox_gradient(risks, times, events)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for k, (start, stop, patches) in enumerate(cohort.chunks(chunk)):
        rng = np.random.default_rng(chunk_seeds[k])
        leaves = params.tensors()
        r = cohort_risks(cohort.sequences[start:stop], cohort.counts[start:stop], leaves,
                         config, rng=rng, patches=patches)
        root = ad.sum_(ad.mul(r, d_risk[start:stop]))
        for name, g in ad.backward(root, leaves).items():
            grads[name] += g
    return loss, grads


def train(sequences: Sequence[ImageSequence], records: Sequence[SurvivalRecord],
          model_config: ModelConfig, train_config: TrainConfig,
          init: ParameterStore | None = None,
          on_epoch: Callable[[dict, ParameterStore], None] | None = None) -> TrainResult:
    """Full-batch Adam on the mean negative log partial likelihood plus elastic net.

    Patients are landmarked at ``train_config.landmark``; a seeded 10% split
    drives early stopping and the best-validation parameters are returned.
    The trace's ``train_loss`` is the dropout-free objective at the
    parameters each epoch starts from.
    """
    tc = train_config
    seqs, recs, counts = landmark_cohort(sequences, records, tc.landmark)
    times, events = _arrays(recs)
    if len(seqs) < 2 or events.sum() < 1:
        raise DataInsufficiencyError(
            f"landmark cohort at t*={tc.landmark:g} has {len(seqs)} patients, "
            f"{int(events.sum())} events")

    rng = np.random.default_rng(tc.seed)
    perm = rng.permutation(len(seqs))
    n_val = int(round(tc.val_fraction * len(seqs)))
    val_idx = np.sort(perm[:n_val])
    # validation needs an event; otherwise train on everything without early stopping
    if n_val and events[val_idx].sum() < 1:
        with_event = perm[events[perm] == 1]
        val_idx = np.sort(np.concatenate([perm[:n_val - 1], with_event[:1]]))
        val_idx = np.unique(val_idx)
    train_idx = np.setdiff1d(np.arange(len(seqs)), val_idx)
    if events[train_idx].sum() < 1 or len(train_idx) < 2:
        train_idx, val_idx = np.arange(len(seqs)), np.array([], dtype=int)

    def subset(idx):
        return _Cohort([seqs[i] for i in idx], [counts[i] for i in idx], model_config)

    train_set = subset(train_idx)
    val_set = subset(val_idx) if len(val_idx) and events[val_idx].sum() >= 1 else None
    t_tr, e_tr = times[train_idx], events[train_idx]
    t_va, e_va = times[val_idx], events[val_idx]

    params = (init.copy() if init is not None
              else init_parameters(model_config, model_config.seed))
    state = ad.AdamState()
    root_seed = np.random.SeedSequence(tc.seed)
    epoch_seeds = root_seed.spawn(tc.epochs)
    best = (math.inf, params.copy(), 0)
    trace: list[dict] = []
    stale = 0
    for epoch in range(tc.epochs):
        try:
            loss, grads = _epoch_gradient(params, train_set, t_tr, e_tr, model_config,
                                          tc.chunk, epoch_seeds[epoch])
            if model_config.dropout > 0:
                # report the dropout-free objective so the trace is not mask noise
                loss = neg_log_partial_likelihood(
                    predict_risks(params, train_set, None, model_config, tc.chunk), (t_tr, e_tr))
            pen = elastic_net_penalty(params, tc.lam, tc.alpha)
            for name, g in penalty_gradient(params, tc.lam, tc.alpha).items():
                grads[name] += g
            params = ParameterStore(model_config, adam_update(params, grads, state, tc.lr))
            val_loss = None
            if val_set is not None:
                val_loss = neg_log_partial_likelihood(
                    predict_risks(params, val_set, None, model_config, tc.chunk), (t_va, e_va))
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise DivergenceError(epoch, exc) from exc
        if not math.isfinite(loss):
            raise DivergenceError(epoch)
        row = {"epoch": epoch, "train_loss": loss + pen, "val_loss": val_loss, "penalty": pen}
        trace.append(row)
        if on_epoch is not None:
            on_epoch(row, params)
        log.debug("epoch %d loss %.6f val %s", epoch, loss + pen, val_loss)
        score = val_loss if val_loss is not None else loss + pen
        if score < best[0]:
            best = (score, params.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if val_set is not None and epoch >= tc.warmup and stale >= tc.patience:
                break

    final = best[1]
    risks = predict_risks(final, train_set, None, model_config, tc.chunk)
    table = breslow_baseline(risks, (t_tr, e_tr))
    return TrainResult(final, table, trace, best[2])


def adam_update(params: ParameterStore, grads, state: ad.AdamState, lr: float):
    return ad.adam_step(dict(params), grads, state, lr)
