import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surlonformer.cox import SurvivalRecord, neg_log_partial_likelihood
from surlonformer.fpca import (DegenerateDataError, FpcaCox, average_images, cox_loglik,
                               fit_fpca, fit_linear_cox, project_scores)
from surlonformer.model import ImageSequence
from conftest import central_difference


def dense_fpca(x):
    """Reference: eigendecomposition of the full N_p x N_p sample covariance."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order].T


def test_gram_trick_matches_dense_covariance(rng):
    x = rng.normal(size=(6, 12))
    model = fit_fpca(x, pve_target=1.0)
    vals, vecs = dense_fpca(x)
    k = model.n_components
    assert k == 5  # rank n-1 after centering
    np.testing.assert_allclose(model.eigenvalues, vals[:k], rtol=1e-10)
    for a, b in zip(model.components, vecs[:k]):
        # eigenvectors agree up to sign
        assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8


def test_components_orthonormal_and_scores_uncorrelated(rng):
    x = rng.normal(size=(20, 30)) @ np.diag(np.linspace(3, 0.1, 30))
    model = fit_fpca(x, pve_target=0.99)
    c = model.components
    np.testing.assert_allclose(c @ c.T, np.eye(len(c)), atol=1e-10)
    scores = project_scores(model, x)
    cov = np.cov(scores.T)
    np.testing.assert_allclose(cov, np.diag(model.eigenvalues), atol=1e-9)


def test_pve_selects_fewest_components():
    rng = np.random.default_rng(1)
    # variances 100, 10, 1 along three axes
    x = rng.normal(size=(400, 3)) * np.array([10.0, np.sqrt(10), 1.0])
    model = fit_fpca(x, pve_target=0.95)
    share = np.cumsum(model.eigenvalues)
    assert model.pve >= 0.95
    assert model.n_components == 2
    assert fit_fpca(x, pve_target=0.5).n_components == 1


def test_identical_signals_are_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_fpca(np.ones((5, 4)))


def test_average_images():
    imgs = [np.full((2, 2), v) for v in (1.0, 3.0, 8.0)]
    seq = ImageSequence("a", [0, 0.1, 0.2], imgs)
    np.testing.assert_allclose(average_images(seq, 2), np.full(4, 2.0))
    np.testing.assert_allclose(average_images(seq), np.full(4, 4.0))


# linear Cox ------------------------------------------------------------------

def test_loglik_derivatives(rng):
    x = rng.normal(size=(15, 3))
    times = np.round(rng.uniform(0.05, 1, 15), 1)
    events = (rng.uniform(size=15) < 0.7).astype(int)
    beta = rng.normal(size=3) * 0.3
    ll, grad, hess = cox_loglik(beta, x, times, events)
    np.testing.assert_allclose(ll, -neg_log_partial_likelihood(x @ beta, (times, events))
                               * events.sum(), rtol=1e-12)
    num_g = central_difference(lambda: cox_loglik(beta, x, times, events)[0], beta)
    np.testing.assert_allclose(grad, num_g, atol=1e-6)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5
        col = (cox_loglik(beta + e, x, times, events)[1] - cox_loglik(beta - e, x, times, events)[1]) / 2e-5
        np.testing.assert_allclose(hess[:, j], col, atol=1e-5)


def grid_argmax(x, times, events, lo=-10.0, hi=10.0):
    """Coarse-to-fine grid search of the 1-D log partial likelihood."""
    for _ in range(8):
        grid = np.linspace(lo, hi, 201)
        vals = [cox_loglik(np.array([b]), x[:, None], times, events)[0] for b in grid]
        k = int(np.argmax(vals))
        step = grid[1] - grid[0]
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, 200)]
        if step < 1e-7:
            break
    return grid[k]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_single_covariate_fit_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    n = 40
    x = rng.normal(size=n)
    times = np.clip(rng.exponential(np.exp(-0.8 * x)) / 4, 0.01, 1.0)
    events = (rng.uniform(size=n) < 0.8).astype(int)
    events[0] = 1
    recs = [SurvivalRecord(str(i), t, e) for i, (t, e) in enumerate(zip(times, events))]
    fit = fit_linear_cox(x, recs)
    assert fit.converged and not fit.separated
    assert fit.coef[0] == pytest.approx(grid_argmax(x, times, events), abs=1e-4)
    assert all(b >= a - 1e-9 for a, b in zip(fit.trace, fit.trace[1:]))


def test_separation_is_flagged():
    x = np.arange(1.0, 9.0)
    times = np.linspace(0.9, 0.1, 8)  # larger x -> earlier event: perfectly ordered
    recs = [SurvivalRecord(str(i), t, 1) for i, t in enumerate(times)]
    fit = fit_linear_cox(x, recs)
    assert fit.flagged


def test_pipeline_recovers_planted_signal():
    rng = np.random.default_rng(5)
    seqs, recs, truth = [], [], []
    direction = rng.normal(size=64)
    direction /= np.linalg.norm(direction)
    for i in range(120):
        z = rng.normal()
        img = (z * direction * 3 + rng.normal(0, 0.3, 64)).reshape(8, 8)
        t = float(np.clip(rng.exponential(np.exp(-z)) / 3, 0.2, 1.0))
        seqs.append(ImageSequence(str(i), [0.0, 0.05], [img, img]))
        recs.append(SurvivalRecord(str(i), t, int(t < 1.0)))
        truth.append(z)
    model = FpcaCox(0.95).fit(seqs, recs, 0.1)
    pred = model.predict(seqs, [2] * 120)
    assert np.corrcoef(pred, truth)[0, 1] > 0.8
    assert model.table.cumulative[-1] > 0


def test_constant_covariate_gets_zero_coefficient(rng):
    x = np.column_stack([rng.normal(size=30), np.full(30, 2.0)])
    times = np.round(rng.uniform(0.05, 1, 30), 2)
    recs = [SurvivalRecord(str(i), t, 1) for i, t in enumerate(times)]
    fit = fit_linear_cox(x, recs)
    alone = fit_linear_cox(x[:, 0], recs)
    assert fit.coef[1] == pytest.approx(0.0, abs=1e-10)
    assert fit.loglik == pytest.approx(alone.loglik, rel=1e-10)
