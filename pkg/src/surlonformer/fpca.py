"""FPCA-Cox comparator: averaged images -> principal-component scores -> linear Cox."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cox import BaselineHazardTable, SurvivalRecord, _arrays, breslow_baseline, landmark_cohort
from .model import ImageSequence

__all__ = [
    "DegenerateDataError",
    "FpcaModel",
    "CoxFit",
    "average_images",
    "fit_fpca",
    "project_scores",
    "cox_loglik",
    "fit_linear_cox",
    "FpcaCox",
]


class DegenerateDataError(ValueError):
    """Signals carry no variance."""


@dataclass
class FpcaModel:
    mean: np.ndarray
    components: np.ndarray  # (N_k, N_p), orthonormal rows
    eigenvalues: np.ndarray
    pve_target: float
    pve: float

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def average_images(seq: ImageSequence, n_visits: int | None = None) -> np.ndarray:
    """Pixel-wise mean of the first ``n_visits`` images, flattened row-major."""
    n = len(seq) if n_visits is None else n_visits
    if n < 1:
        raise ValueError("need at least one image")
    return np.mean(np.stack(seq.images[:n]), axis=0).reshape(-1)


def fit_fpca(signals, pve_target: float = 0.95, rel_tol: float = 1e-12) -> FpcaModel:
    """Empirical FPCA via the ``n x n`` Gram matrix.

    Covariance uses the ``1/(n-1)`` normalization. Keeps the fewest
    components whose cumulative share of variance reaches ``pve_target``.
    """
    x = np.asarray(signals, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("FPCA needs at least two signals")
    mu = x.mean(axis=0)
    xc = x - mu
    gram = xc @ xc.T / (n - 1)
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals[0] <= 0 or vals[0] < rel_tol * max(1.0, np.abs(x).max() ** 2):
        raise DegenerateDataError("all signals are identical")
    keep = vals > rel_tol * vals[0]
    vals, vecs = vals[keep], vecs[:, keep]
    # map Gram eigenvectors back to pixel space: phi = Xc^T v / ||Xc^T v||
    comps = (xc.T @ vecs).T
    comps /= np.linalg.norm(comps, axis=1, keepdims=True)
    # fix sign so the largest-magnitude loading is positive
    pivots = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(len(comps)), pivots])[:, None]
    share = np.cumsum(vals) / vals.sum()
    k = int(np.searchsorted(share, pve_target - 1e-12) + 1)
    k = min(k, len(vals))
    return FpcaModel(mu, comps[:k], vals[:k], pve_target, float(share[k - 1]))


def project_scores(model: FpcaModel, signal) -> np.ndarray:
    """``xi_k = <signal - mu, phi_k>`` with unit pixel weight; accepts one or many signals."""
    s = np.asarray(signal, dtype=np.float64)
    if s.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"signal length {s.shape[-1]} != {model.mean.shape[0]}")
    return (s - model.mean) @ model.components.T


# linear Cox -------------------------------------------------------------

def cox_loglik(beta, x, times, events):
    """Breslow-tie log partial likelihood with gradient and Hessian."""
    beta = np.asarray(beta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    eta = x @ beta
    ll, grad = 0.0, np.zeros_like(beta)
    hess = np.zeros((beta.size, beta.size))
    for i in np.flatnonzero(events == 1):
        risk = times >= times[i]
        eta_r = eta[risk]
        shift = eta_r.max()
        wr = np.exp(eta_r - shift)
        s0 = wr.sum()
        xr = x[risk]
        xbar = wr @ xr / s0
        ll += eta[i] - (np.log(s0) + shift)
        grad += x[i] - xbar
        second = (xr * wr[:, None]).T @ xr / s0
        hess -= second - np.outer(xbar, xbar)
    return ll, grad, hess


@dataclass
class CoxFit:
    coef: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    separated: bool
    trace: list[float] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return not self.converged or self.separated


def fit_linear_cox(x, records, max_iter: int = 50, tol: float = 1e-8,
                   jitter: float = 1e-8, separation_norm: float = 50.0,
                   curvature_tol: float = 1e-6) -> CoxFit:
    """Newton-Raphson on the log partial likelihood with step halving.

    The fit is flagged as separated when the coefficient norm exceeds
    ``separation_norm`` or when the likelihood is flat (curvature below
    ``curvature_tol``) along a nonzero coefficient vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    times, events = _arrays(records)
    if events.sum() < 1:
        raise ValueError("linear Cox fit needs at least one event")
    if x.shape[1] < 1:
        raise ValueError("need at least one covariate")
    # constant columns cancel out of every risk set; pin their coefficients at 0
    active = np.ptp(x, axis=0) > 0
    if not active.all():
        fit = (fit_linear_cox(x[:, active], records, max_iter, tol, jitter, separation_norm,
                              curvature_tol) if active.any() else None)
        coef = np.zeros(x.shape[1])
        if fit is None:
            ll = cox_loglik(coef, x, times, events)[0]
            return CoxFit(coef, ll, 0, True, False, [ll])
        coef[active] = fit.coef
        return CoxFit(coef, fit.loglik, fit.iterations, fit.converged, fit.separated, fit.trace)
    beta = np.zeros(x.shape[1])
    ll, grad, hess = cox_loglik(beta, x, times, events)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            it -= 1
            break
        step = np.linalg.solve(-hess + jitter * np.eye(len(beta)), grad)
        scale = 1.0
        while True:
            cand = beta + scale * step
            ll_new, g_new, h_new = cox_loglik(cand, x, times, events)
            if ll_new >= ll - 1e-12 or scale < 1e-10:
                break
            scale *= 0.5
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        trace.append(ll)
        if np.linalg.norm(beta) > separation_norm:
            break
    else:
        converged = np.max(np.abs(grad)) < tol
    if not converged and np.max(np.abs(grad)) < tol:
        converged = True
    norm = float(np.linalg.norm(beta))
    separated = norm > separation_norm
    if not separated and norm > 1.0:
        # a "converged" fit can sit on the flat tail of a monotone likelihood:
        # the gradient has decayed below tol but so has the curvature along beta
        d = beta / norm
        separated = bool(-(d @ hess @ d) < curvature_tol)
    return CoxFit(beta, ll, it, converged, separated, trace)


class FpcaCox:
    """Landmarked FPCA-Cox pipeline sharing the Breslow/prediction code of the deep model."""

    def __init__(self, pve_target: float = 0.95):
        self.pve_target = pve_target
        self.fpca: FpcaModel | None = None
        self.score_mean: np.ndarray | None = None
        self.score_scale: np.ndarray | None = None
        self.fit_result: CoxFit | None = None
        self.table: BaselineHazardTable | None = None

    def _signals(self, sequences, counts):
        return np.stack([average_images(s, j) for s, j in zip(sequences, counts)])

    def _standardized(self, signals):
        z = project_scores(self.fpca, signals)
        return (z - self.score_mean) / self.score_scale

    def fit(self, sequences: Sequence[ImageSequence], records: Sequence[SurvivalRecord],
            landmark: float) -> "FpcaCox":
        seqs, recs, counts = landmark_cohort(sequences, records, landmark)
        signals = self._signals(seqs, counts)
        self.fpca = fit_fpca(signals, self.pve_target)
        raw = project_scores(self.fpca, signals)
        self.score_mean = raw.mean(axis=0)
        sd = raw.std(axis=0)
        self.score_scale = np.where(sd > 0, sd, 1.0)
        z = (raw - self.score_mean) / self.score_scale
        self.fit_result = fit_linear_cox(z, recs)
        self.table = breslow_baseline(z @ self.fit_result.coef, recs)
        return self

    def predict(self, sequences: Sequence[ImageSequence], counts: Sequence[int]) -> np.ndarray:
        return self._standardized(self._signals(sequences, counts)) @ self.fit_result.coef
