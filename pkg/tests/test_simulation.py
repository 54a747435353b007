import json
import math

import numpy as np
import pytest

from trial_adjust.errors import EmptyCell, OddN
from trial_adjust.estimators import gcomp_means, gob_means, predict_counterfactual
from trial_adjust.glm import LOGIT, WorkingModelSpec, build_design, fit_mle
from trial_adjust.simulation import (
    ReplicateRecord,
    SimConfig,
    generate_trial,
    preset,
    replicate_rng,
    run_experiment,
    run_replicate,
    separation_subset,
    summarize_experiment,
    true_means,
    unadjusted_comparator,
)

SMALL = dict(reps=12, adjusted_counts=(0, 3))
ONE_COVARIATE = dict(q=1, n_shifted=0, beta_w=(0.0,), adjusted_counts=(0,))


def tiny_config(**kw):
    return SimConfig(**{**ONE_COVARIATE, **kw})


# --- presets and truth ------------------------------------------------------------------

def test_presets_match_published_settings():
    one = preset("experiment-1")
    assert (one.n, one.q, one.mode, one.n_shifted) == (60, 10, "pooled", 4)
    assert one.beta_a == (-1.5836, 0.5923)
    assert one.adjusted_counts == tuple(range(11))
    two = preset("experiment-2")
    assert (two.n, two.q, two.mode, two.n_shifted) == (200, 35, "stratified", 30)
    assert two.beta_a == (-4.7173, -2.4760)
    assert two.adjusted_counts == (10, 15, 20, 25)
    with pytest.raises(ValueError):
        preset("experiment-3")


@pytest.mark.parametrize("name", ["experiment-1", "experiment-2"])
def test_true_means_hit_targets(name):
    cfg = preset(name)
    np.testing.assert_allclose(true_means(cfg), cfg.mu_targets, atol=1e-4)


def test_true_means_against_monte_carlo():
    cfg = preset("experiment-1")
    rng = np.random.default_rng(3)
    z = rng.standard_normal((400_000, cfg.q)) @ np.asarray(cfg.beta_w)
    mc = [np.mean(1 / (1 + np.exp(-(b + z)))) for b in cfg.beta_a]
    np.testing.assert_allclose(true_means(cfg), mc, atol=2e-3)


def test_config_validation():
    tiny_config()
    for bad in (dict(q=2), dict(adjusted_counts=(2,)), dict(kinds=("gob-mle-c0",)),
                dict(reps=0), dict(n_shifted=2), dict(mode="joint"), dict(tests=("lr",)),
                dict(variance_modes=("hc3",)), dict(beta_a=(0.0,))):
        with pytest.raises(ValueError):
            tiny_config(**bad)


# --- data generation ------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["experiment-1", "experiment-2"])
def test_generated_arms_are_balanced(name):
    cfg = preset(name)
    for r in range(20):
        t = generate_trial(cfg, replicate_rng(1, r))
        np.testing.assert_array_equal(t.arm_counts, [cfg.n // 2, cfg.n // 2])


def test_odd_n_rejected():
    cfg = tiny_config(n=61)
    with pytest.raises(OddN):
        generate_trial(cfg, replicate_rng(0, 0))


def test_covariate_transforms():
    cfg = preset("experiment-1")
    t = generate_trial(cfg, replicate_rng(5, 0))
    # shifted normals may fall below 5; folded ones never do
    assert np.all(t.w[:, 4:] >= 5.0)
    assert np.any(t.w[:, :4] < 5.0)


def test_replicate_streams_are_independent_of_order():
    a = replicate_rng(11, 7).standard_normal(5)
    replicate_rng(11, 3).standard_normal(100)
    b = replicate_rng(11, 7).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, replicate_rng(11, 8).standard_normal(5))


def test_null_model_outcome_marginals():
    cfg = tiny_config(beta_a=(0.0, 0.0))
    ys = np.array([generate_trial(cfg, replicate_rng(2, r)).y.mean() for r in range(10_000)])
    se = math.sqrt(0.25 / (60 * 10_000))
    assert abs(ys.mean() - 0.5) < 3 * se


def test_experiment_one_outcome_means():
    cfg = preset("experiment-1")
    mu = true_means(cfg)
    reps = 10_000
    ybar = np.empty((reps, 2))
    for r in range(reps):
        t = generate_trial(cfg, replicate_rng(cfg.seed, r))
        ybar[r] = [t.y[t.arm == a].mean() for a in (1, 2)]
    se = ybar.std(axis=0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(ybar.mean(axis=0) - mu) < 3 * se)


# --- replicates ----------------------------------------------------------------------------

def test_unadjusted_comparator_closed_form(rng):
    arm = np.repeat([1, 2], [13, 17])
    y = (rng.random(30) < 0.4).astype(float)
    d, v = unadjusted_comparator(y, arm)
    p1, p2 = y[:13].mean(), y[13:].mean()
    assert d == p2 - p1
    assert v == p2 * (1 - p2) / 17 + p1 * (1 - p1) / 13


def test_arm_only_cell_equals_unadjusted():
    cfg = preset("experiment-1", adjusted_counts=(0,))
    for r in range(10):
        t = generate_trial(cfg, replicate_rng(cfg.seed, r))
        rec = run_replicate(t, cfg, r)
        kinds = [k.value for k in cfg.estimator_kinds]
        for name in ("gc-mle", "gob-mle-c1", "gob-mle-c2"):
            assert rec.delta[0, kinds.index(name)] == pytest.approx(rec.unadj_delta, abs=1e-12)


def test_gob_with_raw_mle_matches_gcomputation():
    cfg = preset("experiment-1")
    for r in range(10):
        t = generate_trial(cfg, replicate_rng(cfg.seed, r))
        des = build_design(t, WorkingModelSpec(covariates=tuple(range(6))))
        fit = fit_mle(des, t.y)
        gc = gcomp_means(fit)
        gob = gob_means(t, predict_counterfactual(des, fit.beta, LOGIT), gc.kind)
        d_gc = gc.mu[1] - gc.mu[0]
        d_gob = gob.mu[1] - gob.mu[0]
        assert abs(d_gc - d_gob) < 1e-10


def test_constant_outcome_is_marked():
    cfg = preset("experiment-1", adjusted_counts=(0, 2), reps=3)
    t = generate_trial(cfg, replicate_rng(0, 0))
    t0 = type(t)(y=np.zeros(t.n), arm=t.arm, w=t.w, k=2)
    rec = run_replicate(t0, cfg)
    assert rec.degenerate
    assert np.all(np.isnan(rec.var))
    assert rec.unadj_var == 0.0


def test_record_shapes():
    cfg = preset("experiment-1", adjusted_counts=(0, 1, 5))
    rec = run_replicate(generate_trial(cfg, replicate_rng(0, 1)), cfg, 1)
    assert rec.delta.shape == (3, 7)
    assert rec.mu.shape == (3, 7, 2)
    assert rec.var.shape == (3, 7, 2)
    assert rec.converged.shape == (3, 2)
    assert np.all(rec.fit_ok)


# --- determinism ----------------------------------------------------------------------------

def _summary_json(cfg, threads):
    recs = run_experiment(cfg, threads=threads)
    doc = summarize_experiment(recs, cfg).to_dict()
    doc["config"]["threads"] = None
    return json.dumps(doc, sort_keys=True)


def test_results_do_not_depend_on_worker_count():
    cfg = preset("experiment-1", **SMALL)
    assert _summary_json(cfg, 1) == _summary_json(cfg, 3)


def test_same_seed_same_records():
    cfg = preset("experiment-1", **SMALL)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.delta, rb.delta)
        np.testing.assert_array_equal(ra.var, rb.var)


def test_progress_callback():
    seen = []
    cfg = preset("experiment-1", reps=3, adjusted_counts=(0,))
    run_experiment(cfg, progress=lambda done, total: seen.append((done, total)))
    assert seen == [(1, 3), (2, 3), (3, 3)]


# --- summaries ------------------------------------------------------------------------------

NULL_CFG = tiny_config(
    beta_a=(0.0, 0.0), kinds=("gc-mle",), variance_modes=("adjusted",), tests=("wald",), reps=4,
)


def _record(rep, delta, var, ok=True, max_abs=1.0):
    return ReplicateRecord(
        rep=rep, delta=np.array([[delta]]), mu=np.array([[[0.5, 0.5 + delta]]]),
        var=np.array([[[var]]]), fit_ok=np.array([[ok]]), converged=np.ones((1, 2), bool),
        max_abs_beta=np.array([max_abs]), separated=np.zeros(1, bool),
        unadj_delta=delta, unadj_var=2 * var, ybar=np.array([0.5, 0.5 + delta]),
    )


def test_summary_coverage_three_of_four():
    recs = [_record(i, d, 1e-2) for i, d in enumerate([0.01, -0.01, 0.02, 0.5])]
    s = summarize_experiment(recs, NULL_CFG)
    assert s.truth["delta"] == 0.0
    row = s.cell(0, "gc-mle")
    assert row["coverage"] == pytest.approx(0.75)
    assert row["relative_efficiency"] == pytest.approx(0.5)
    assert row["n_valid"] == 4 and row["excluded"] == 0
    assert row["mean_delta"] == pytest.approx(0.13)


def test_summary_all_covering():
    recs = [_record(i, d, 1e-2) for i, d in enumerate([0.01, -0.01, 0.02, 0.0])]
    assert summarize_experiment(recs, NULL_CFG).cell(0, "gc-mle")["coverage"] == 1.0


def test_summary_excludes_failed_cells():
    recs = [_record(0, 0.1, 1e-2), _record(1, 0.0, float("nan")), _record(2, 9.0, 1e-2, ok=False)]
    row = summarize_experiment(recs, NULL_CFG).cell(0, "gc-mle")
    assert row["n_valid"] == 1 and row["excluded"] == 2
    assert row["mean_delta"] == pytest.approx(0.05)


def test_summary_empty_cell():
    with pytest.raises(EmptyCell):
        summarize_experiment([_record(0, 0.1, 1e-2, ok=False)], NULL_CFG)
    with pytest.raises(EmptyCell):
        summarize_experiment([], NULL_CFG)


def test_summary_is_order_independent():
    recs = [_record(i, d, 1e-2 * (i + 1)) for i, d in enumerate([0.01, -0.2, 0.02, 0.5])]
    a = summarize_experiment(recs, NULL_CFG).to_dict()
    b = summarize_experiment(recs[::-1], NULL_CFG).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_separation_subset_decile():
    recs = [_record(i, 0.0, 1e-2, max_abs=float(i)) for i in range(10)]
    mask = separation_subset(recs)
    assert mask.shape == (10, 1)
    assert mask[:, 0].tolist() == [False] * 9 + [True]


def test_separation_subset_ties_included():
    vals = [1, 2, 3, 4, 5, 6, 7, 8, 9, 9]
    recs = [_record(i, 0.0, 1e-2, max_abs=float(v)) for i, v in enumerate(vals)]
    assert separation_subset(recs)[:, 0].sum() == 2
    vals = [1, 2, 3, 4, 5, 6, 7, 8, 8, 9]
    recs = [_record(i, 0.0, 1e-2, max_abs=float(v)) for i, v in enumerate(vals)]
    assert separation_subset(recs)[:, 0].tolist() == [False] * 9 + [True]
    recs = [_record(i, 0.0, 1e-2, max_abs=float(v)) for i, v in enumerate([3.0] * 10)]
    assert separation_subset(recs)[:, 0].all()


def test_separation_rows_are_summarised():
    recs = [_record(i, 0.01 * i, 1e-2, max_abs=float(i)) for i in range(20)]
    s = summarize_experiment(recs, NULL_CFG)
    row = s.separation_cell(0, "gc-mle")
    assert row["n_reps"] == 2
    assert row["mean_delta"] == pytest.approx(0.185)


def test_plugin_bias_tracks_firth_bias(experiment_one):
    """n (GC-FC arm mean - truth) follows the plug-in first-order bias.

    Within Monte-Carlo error for small working models; for larger models
    only the direction and rough size are checked, since the neglected
    higher-order terms grow with the number of parameters.
    """
    cfg, records, _ = experiment_one
    mu = true_means(cfg)
    ki = [k.value for k in cfg.estimator_kinds].index("gc-fc")
    for ci, count in enumerate(cfg.adjusted_counts):
        scaled = np.array([cfg.n * (r.mu[ci, ki] - mu) for r in records])
        plug = np.array([r.bias_fc[ci] for r in records])
        diff = scaled - plug
        se = diff.std(axis=0, ddof=1) / math.sqrt(len(records))
        if count <= 2:
            assert np.all(np.abs(diff.mean(axis=0)) < 3 * se)
        ratio = scaled.mean(axis=0) / plug.mean(axis=0)
        assert np.all((ratio > 0.5) & (ratio < 2.0))
