import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodkit.errors import ConfigError, ContaminationError, ContractViolation
from oodkit.synthbench import LabeledSet
from oodkit.train import ArchConfig, init_classifier, zero_classifier
from oodkit.ttt import (VAR_FLOOR, TTTConfig, TTTState, assign_noisy_labels, co_divide, co_guess, co_refine,
                        fit_loss_gmm, gmm_log_likelihood, guess_labels, lambda_u_at, mixmatch_step,
                        refine_labels, refresh_labels, run_ttt, sharpen, split_from_losses)


# -- brute-force EM oracle -------------------------------------------------------

def _oracle_em(x, restarts=200, iters=2000, seed=0):
    """Many random restarts of plain EM; keeps the best log-likelihood."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        means = np.sort(rng.choice(x, 2, replace=False)) + rng.normal(0, 0.01, 2)
        var = np.full(2, max(rng.uniform(0.001, 0.1), VAR_FLOOR))
        w = np.array([0.5, 0.5])
        prev = -np.inf
        for _ in range(iters):
            comp = -0.5 * (np.log(2 * np.pi * var) + (x[:, None] - means) ** 2 / var) + np.log(w)
            norm = np.logaddexp(comp[:, 0], comp[:, 1])
            r = np.exp(comp - norm[:, None])
            nk = r.sum(0) + 1e-300
            w = nk / nk.sum()
            means = (r * x[:, None]).sum(0) / nk
            var = np.maximum((r * (x[:, None] - means) ** 2).sum(0) / nk, VAR_FLOOR)
            ll = gmm_log_likelihood(x, means, var, w)
            if abs(ll - prev) < 1e-12:
                break
            prev = ll
        if best is None or ll > best[0]:
            order = np.argsort(means)
            best = (ll, means[order], var[order], w[order])
    ll, means, var, w = best
    comp = -0.5 * (np.log(2 * np.pi * var) + (x[:, None] - means) ** 2 / var) + np.log(w)
    return ll, comp[:, 0] >= comp[:, 1]


def _separated_instance(rng):
    n = int(rng.integers(12, 51))
    k = int(rng.integers(max(3, n // 5), n - max(3, n // 5) + 1))
    lo = rng.normal(rng.uniform(0.0, 0.3), rng.uniform(0.01, 0.05), k)
    hi = rng.normal(rng.uniform(0.7, 1.0), rng.uniform(0.01, 0.05), n - k)
    return rng.permutation(np.concatenate([lo, hi])) * rng.uniform(0.5, 5.0)


def test_gmm_matches_brute_force_oracle_on_50_instances():
    rng = np.random.default_rng(7)
    for i in range(50):
        losses = _separated_instance(rng)
        x = (losses - losses.min()) / (losses.max() - losses.min())
        fit = fit_loss_gmm(losses)
        ll, clean = _oracle_em(x, seed=i)
        assert np.array_equal(fit.clean_prob >= 0.5, clean), i
        assert abs(fit.log_likelihood - ll) <= 1e-4, (i, fit.log_likelihood, ll)


def test_gmm_two_tight_clusters_example():
    rng = np.random.default_rng(0)
    losses = np.concatenate([rng.normal(0.1, 0.01, 50), rng.normal(0.9, 0.01, 50)])
    fit = fit_loss_gmm(losses)
    assert np.all(fit.clean_prob[:50] > 0.99)
    assert np.all(fit.clean_prob[50:] < 0.01)
    assert fit.means[0] < fit.means[1]


def test_gmm_equal_losses_are_all_clean():
    fit = fit_loss_gmm(np.full(20, 0.37))
    assert fit.degenerate
    assert np.array_equal(fit.clean_prob, np.ones(20))


def test_gmm_preconditions():
    with pytest.raises(ContractViolation):
        fit_loss_gmm(np.arange(9.0))
    with pytest.raises(ContractViolation):
        fit_loss_gmm(np.r_[np.arange(10.0), np.nan])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=10, max_size=60))
def test_gmm_posterior_is_monotone_in_loss(values):
    losses = np.array(values)
    fit = fit_loss_gmm(losses)
    order = np.argsort(losses, kind="stable")
    p = fit.clean_prob[order]
    assert np.all(np.diff(p) <= 1e-12)
    assert np.isclose(fit.weights.sum(), 1.0) and np.all(fit.weights >= 0)
    assert np.all(fit.variances >= VAR_FLOOR)


def test_threshold_monotonicity():
    rng = np.random.default_rng(3)
    losses = np.concatenate([rng.gamma(1, 0.1, 60), rng.gamma(4, 0.5, 40)])
    sizes = [split_from_losses(losses, p).labeled.sum() for p in (0.55, 0.7, 0.8, 0.9, 0.99)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_empty_labeled_split_falls_back_to_lowest_decile():
    losses = np.concatenate([np.linspace(0, 0.1, 50), np.linspace(0.9, 1.0, 50)])
    split = split_from_losses(losses, 0.999999999)
    if split.fallback:
        assert split.labeled.sum() == 10
        assert set(np.flatnonzero(split.labeled)) == set(np.argsort(losses)[:10])
    # a p no posterior reaches always triggers the fallback
    split = split_from_losses(np.linspace(0, 1, 30) ** 0.5 + np.r_[np.zeros(29), 5.0], 0.99)
    assert split.labeled.any()


# -- label arithmetic --------------------------------------------------------------

def test_sharpen_worked_example():
    out = sharpen(np.array([0.75, 0.25, 0.0]), 0.5)
    assert np.allclose(out, [0.9, 0.1, 0.0], atol=1e-9, rtol=0)


def test_refine_worked_example():
    out = refine_labels(np.array([[0.5, 0.5, 0.0]]), [0.5], [0], 0.5)
    assert np.allclose(out[0], [0.9, 0.1, 0.0], atol=1e-9, rtol=0)


def test_refine_with_full_confidence_returns_noisy_onehot():
    out = refine_labels(np.array([[0.2, 0.3, 0.5]]), [1.0], [1], 0.5)
    assert np.allclose(out[0], [0, 1, 0], atol=1e-12)


def test_refine_with_zero_weight_and_uniform_prediction_is_uniform():
    out = refine_labels(np.full((1, 4), 0.25), [0.0], [2], 0.5)
    assert np.allclose(out, 0.25)


def test_guess_worked_example():
    out = guess_labels([np.array([[0.8, 0.2]]), np.array([[0.6, 0.4]])], 0.5)
    assert np.allclose(out[0], [0.49 / 0.58, 0.09 / 0.58], atol=1e-9, rtol=0)
    assert out[0][0] == pytest.approx(0.8448, abs=1e-4)


def test_sharpen_preserves_argmax_on_random_simplex_points():
    rng = np.random.default_rng(11)
    v = rng.dirichlet(np.ones(5), size=10_000)
    for T in (0.1, 0.5, 1.0, 3.0):
        s = sharpen(v, T)
        assert np.array_equal(s.argmax(1), v.argmax(1))
        assert np.allclose(s.sum(1), 1.0)


def test_sharpen_fixes_uniform_and_onehot():
    assert np.allclose(sharpen(np.full(5, 0.2), 0.5), 0.2)
    assert np.array_equal(sharpen(np.eye(4)[2], 0.5), np.eye(4)[2])


def _model(rng, side=8, c=3):
    return init_classifier(ArchConfig(side, (6,), c), rng)


def test_co_refine_and_co_guess_give_probability_vectors(rng):
    a, b = _model(rng), _model(rng)
    x = rng.random((6, 8, 8, 3))
    r = co_refine(a, x, rng.random(6), rng.integers(0, 3, 6), 0.5, 2, rng)
    g = co_guess(a, b, x, 0.5, 2, rng)
    for out in (r, g):
        assert np.all(out >= 0) and np.allclose(out.sum(1), 1.0, atol=1e-6)


def test_co_guess_of_uniform_models_is_uniform(rng):
    z = zero_classifier(ArchConfig(8, (4,), 3))
    g = co_guess(z, z, rng.random((3, 8, 8, 3)), 0.5, 2, rng)
    assert np.allclose(g, 1 / 3)


def test_mixmatch_lambda_is_at_least_half(rng):
    model = _model(rng)
    cfg = TTTConfig()
    x = rng.random((4, 8, 8, 3))
    t = np.eye(3)[[0, 1, 2, 0]]
    for _ in range(200):
        res = mixmatch_step(model, x, t, x, t, cfg, 1.0, rng, augment=False)
        assert res.lam >= 0.5
    assert mixmatch_step(model, x, t, None, None, cfg, 1.0, rng, lam=0.2, augment=False).lam == 0.8


def test_mixmatch_identity_mix_without_unlabeled_is_plain_ce(rng):
    from oodkit.train import loss_and_grads
    model = _model(rng)
    cfg = TTTConfig(prior_penalty=0.0)
    x = rng.random((4, 8, 8, 3))
    t = np.eye(3)[[0, 1, 2, 0]]
    res = mixmatch_step(model, x, t, None, None, cfg, 25.0, rng, lam=1.0, augment=False)
    assert res.loss == pytest.approx(loss_and_grads(model, x, t)[0], rel=1e-12)
    assert res.loss_u == 0.0


def test_lambda_u_ramps_over_first_refresh_period():
    cfg = TTTConfig(lambda_u=25.0, refresh_period=3)
    assert lambda_u_at(cfg, 0.0) == 0.0
    assert lambda_u_at(cfg, 1.5) == pytest.approx(12.5)
    assert lambda_u_at(cfg, 5.0) == 25.0
    assert lambda_u_at(TTTConfig(refresh_period=math.inf), 0.0) == 25.0


# -- config and loop -------------------------------------------------------------------

def test_ttt_defaults():
    c = TTTConfig()
    assert (c.p, c.refresh_period, c.lr, c.weight_decay) == (0.8, 3, 0.02, 5e-4)
    assert (c.sharpen_T, c.mix_alpha, c.lambda_u, c.aug_views) == (0.5, 4.0, 25.0, 2)


@pytest.mark.parametrize("kw,field", [({"p": 0.5}, "ttt.p"), ({"p": 1.0}, "ttt.p"), ({"p_b": 0.3}, "ttt.p_b"),
                                      ({"refresh_period": 0}, "ttt.refresh_period")])
def test_ttt_config_validation(kw, field):
    with pytest.raises(ConfigError) as exc:
        TTTConfig(**kw)
    assert exc.value.field == field


def test_zero_model_labels_are_class_zero(rng):
    z = zero_classifier(ArchConfig(8, (4,), 3))
    assert np.array_equal(assign_noisy_labels(z, rng.random((5, 8, 8, 3))), np.zeros(5))


def test_identical_models_give_identical_splits(rng):
    m = _model(rng)
    x = rng.random((30, 8, 8, 3))
    state = TTTState(m.copy(), m.copy(), x, assign_noisy_labels(m, x), TTTConfig())
    sa, sb = co_divide(state)
    assert np.array_equal(sa.labeled, sb.labeled)


def test_refresh_right_after_assignment_is_idempotent(rng):
    m = _model(rng)
    x = rng.random((20, 8, 8, 3))
    labels = assign_noisy_labels(m, x)
    state = TTTState(m.copy(), m.copy(), x, labels, TTTConfig())
    assert np.array_equal(refresh_labels(state), labels)


def test_zero_epochs_returns_copies(rng):
    m = _model(rng)
    res = run_ttt(m, rng.random((20, 8, 8, 3)), TTTConfig(epochs=0))
    for k in m.params:
        assert np.array_equal(res.model_a.params[k], m.params[k])
        assert np.array_equal(res.model_b.params[k], m.params[k])
    assert res.model_a is not m


def test_run_ttt_is_deterministic_and_logs_each_epoch(rng, tmp_path):
    import json
    m = _model(rng)
    x = rng.random((40, 8, 8, 3))
    cfg = TTTConfig(epochs=2, batch_size=8)
    with open(tmp_path / "log.jsonl", "w") as f:
        r1 = run_ttt(m, x, cfg, 3, 4, log_file=f)
    r2 = run_ttt(m, x, cfg, 3, 4)
    for k in m.params:
        assert np.array_equal(r1.model_a.params[k], r2.model_a.params[k])
    recs = [json.loads(line) for line in open(tmp_path / "log.jsonl")]
    assert [r["epoch"] for r in recs] == [1, 2]
    assert {"labeled_a", "labeled_b", "agreement"} <= set(recs[0])


def test_run_ttt_rejects_labeled_input(rng):
    x = rng.random((12, 8, 8, 3))
    ds = LabeledSet(x, np.ones((12, 8, 8)), np.zeros(12, dtype=int), ["IID"] * 12)
    with pytest.raises(ContaminationError):
        run_ttt(_model(rng), ds, TTTConfig(epochs=1))


def test_refresh_never_when_period_is_infinite(rng):
    m = _model(rng)
    x = rng.random((30, 8, 8, 3))
    res = run_ttt(m, x, TTTConfig(epochs=4, refresh_period=math.inf, batch_size=10))
    assert not any(r["refreshed"] for r in res.history)
    assert np.array_equal(res.noisy_labels, assign_noisy_labels(m, x))
