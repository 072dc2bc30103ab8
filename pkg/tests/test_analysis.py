import math

import numpy as np
import pytest
from scipy import stats

from mtslstm.analysis import (
    ALL,
    ablate_and_route,
    ablate_units,
    bootstrap_diff_ci,
    collect_gate_traces,
    dyck_accuracy_by_timescale,
    evaluate_lm,
    fit_timescale_distribution,
    ks_statistic,
    normal_cdf,
    rankdata,
    sequence_correct,
    spearman,
    word_ablation_decay,
)
from mtslstm.corpus import BIN_NAMES, Vocab
from mtslstm.dyck import DyckSequence, build_dyck_dataset
from mtslstm.model import LmConfig, build_lm
from mtslstm.timescale import InverseGammaParams, sample_inv_gamma


class UniformModel:
    def __init__(self, V):
        self.vocab_size = V

    def forward(self, inputs, targets, state=None):
        return np.full(inputs.shape, math.log(self.vocab_size)), state


# ---- perplexity ---------------------------------------------------------------

def test_uniform_model_perplexity_is_vocab_size():
    toks = np.random.default_rng(0).integers(0, 100, size=1001)
    rep = evaluate_lm(UniformModel(100), toks)
    assert rep.perplexity() == pytest.approx(100.0, rel=1e-13)
    assert rep.nll.size == 1000
    np.testing.assert_array_equal(rep.positions, np.arange(1, 1001))


def test_single_bin_equals_overall_and_rows():
    V = 20
    m = build_lm(LmConfig.baseline(V, 6, (6,)), seed=0)
    toks = np.random.default_rng(1).integers(0, V, size=300)
    rep = evaluate_lm(m, toks)
    assert rep.perplexity(0) == rep.perplexity()
    row = rep.table_row()
    assert set(row) == set(BIN_NAMES) | {ALL}
    assert math.isnan(row[BIN_NAMES[3]])
    vocab = Vocab([str(i) for i in range(V)], [20000] * 5 + [50] * 15)
    rep = evaluate_lm(m, toks, vocab)
    assert set(np.unique(rep.bins)) == {0, 3}
    with pytest.raises(ValueError):
        evaluate_lm(m, toks, Vocab(["a", "b"], [1, 1]))


def test_batched_evaluation_matches_stream_order():
    m = build_lm(LmConfig.baseline(15, 6, (6,)), seed=2)
    toks = np.random.default_rng(3).integers(0, 15, size=241)
    rep = evaluate_lm(m, toks, batch_size=4, window=30)
    assert np.all(np.diff(rep.positions) > 0)
    np.testing.assert_array_equal(rep.token_ids, toks[rep.positions])


# ---- bootstrap -------------------------------------------------------------------

def test_identical_streams_zero_ci():
    a = np.random.default_rng(0).exponential(size=1000)
    r = bootstrap_diff_ci(a, a.copy(), n=500)
    assert r.point == 0 and r.mean == 0 and r.lo == 0 and r.hi == 0
    assert not r.significant


def test_zero_variance_blocks_give_point_ci():
    # two identical blocks per stream, so every resample has the same statistic
    block = np.linspace(1.0, 3.0, 100)
    a = np.tile(block, 2)
    b = a - 0.25
    r = bootstrap_diff_ci(a, b, block_len=100, n=200)
    delta = math.exp(block.mean()) - math.exp(block.mean() - 0.25)
    assert r.point == pytest.approx(delta, rel=1e-12)
    assert r.lo == pytest.approx(delta, rel=1e-12) and r.hi == pytest.approx(delta, rel=1e-12)
    assert r.n_blocks == 2 and r.significant


def test_bootstrap_errors_and_mask():
    with pytest.raises(ValueError):
        bootstrap_diff_ci(np.ones(50), np.ones(50))
    with pytest.raises(ValueError):
        bootstrap_diff_ci(np.ones(200), np.ones(199))
    with pytest.raises(ValueError):
        bootstrap_diff_ci(np.ones(200), np.ones(200), mask=np.zeros(200))
    a, b = np.ones(200), np.zeros(200)
    mask = np.zeros(200)
    mask[::2] = 1
    assert bootstrap_diff_ci(a, b, mask=mask, n=100).point == pytest.approx(math.e - 1)


def _paired_streams(rng, N, mu_a=4.0, mu_b=3.95):
    shared = rng.normal(0, 1.0, size=N)
    return mu_a + shared + rng.normal(0, 0.3, size=N), mu_b + shared + rng.normal(0, 0.3, size=N)


def _sampling_sd(N, mu_a=4.0, mu_b=3.95):
    # delta-method sd of exp(mean a) - exp(mean b) for the streams above
    d = math.exp(mu_a) - math.exp(mu_b)
    return math.sqrt((d ** 2 + 0.09 * (math.exp(2 * mu_a) + math.exp(2 * mu_b))) / N)


@pytest.mark.xfail(strict=False, reason="500 trials give ~1% standard error around a ~94.5% expected "
                                        "coverage; the fixed-seed draw also defeats an oracle interval")
def test_bootstrap_coverage():
    # paired streams of test-split size (820 blocks); population gap exp(mu_a) - exp(mu_b)
    rng = np.random.default_rng(0)
    true = math.exp(4.0) - math.exp(3.95)
    hits = 0
    for k in range(500):
        a, b = _paired_streams(rng, 82_000)
        r = bootstrap_diff_ci(a, b, block_len=100, n=2000, seed=k)
        hits += r.lo <= true <= r.hi
    assert hits / 500 >= 0.94


def test_bootstrap_interval_tracks_sampling_oracle():
    # on identical trials the percentile CI behaves like point +- 1.96 * true sd
    rng = np.random.default_rng(1)
    N = 20_000
    true, sd = math.exp(4.0) - math.exp(3.95), _sampling_sd(N)
    widths, boot_hits, oracle_hits = [], 0, 0
    for k in range(300):
        a, b = _paired_streams(rng, N)
        r = bootstrap_diff_ci(a, b, block_len=100, n=2000, seed=k)
        widths.append((r.hi - r.lo) / (2 * 1.96 * sd))
        boot_hits += r.lo <= true <= r.hi
        oracle_hits += abs(r.point - true) <= 1.96 * sd
    assert 0.95 < np.mean(widths) < 1.05
    assert abs(boot_hits - oracle_hits) <= 6


# ---- gate traces ---------------------------------------------------------------------

def half_gate_model(V=10, H=6):
    m = build_lm(LmConfig.baseline(V, 4, (H, 4)), seed=0)
    layer = m.layers[0]
    wx, wh = layer.gate_weights("f")
    wx[...] = 0.0
    wh[...] = 0.0
    layer.params["b_f"][:] = 0.0  # forget gate is exactly sigmoid(0) = 0.5 at every step
    return m


def test_constant_gate_traces():
    m = half_gate_model()
    toks = np.random.default_rng(0).integers(0, 10, size=300)
    tr = collect_gate_traces(m, toks, layer=0)
    assert tr.values.shape == (6, 4, 70)
    np.testing.assert_allclose(tr.estimated_timescales(), 1 / math.log(2), rtol=1e-12)
    assert collect_gate_traces(m, toks, 0, max_sequences=2).values.shape == (6, 2, 70)
    assert tr.heatmap(group=3).shape == (2, 70)
    with pytest.raises(IndexError):
        collect_gate_traces(m, toks, layer=2)
    with pytest.raises(ValueError):
        collect_gate_traces(m, toks[:50], layer=0)


def test_spearman_and_ranks_against_scipy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    y[:10] = x[:10]
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y)[0], rel=1e-12)
    t = np.array([3, 1, 3, 2, 3])
    np.testing.assert_array_equal(rankdata(t), stats.rankdata(t))
    assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))


# ---- KS --------------------------------------------------------------------------------

def test_ks_quantile_placed_samples():
    n = 40
    p = (np.arange(1, n + 1) - 0.5) / n
    assert ks_statistic(p, lambda v: v) == pytest.approx(1 / (2 * n), rel=1e-12)
    assert ks_statistic(stats.norm.ppf(p), stats.norm.cdf) == pytest.approx(1 / (2 * n), rel=1e-9)


def test_ks_limits_and_monotone_invariance():
    below = -np.linspace(5, 6, 100)
    assert ks_statistic(below, lambda v: normal_cdf(v, 0.5, 0.1)) == pytest.approx(1.0, abs=1e-12)
    x = np.random.default_rng(0).gamma(2.0, size=300)
    d = ks_statistic(x, lambda v: stats.gamma(2.0).cdf(v))
    d_log = ks_statistic(np.log(x), lambda v: stats.gamma(2.0).cdf(np.exp(v)))
    assert d == pytest.approx(d_log, abs=1e-12)
    assert 0 <= d <= 1
    assert d == pytest.approx(stats.kstest(x, stats.gamma(2.0).cdf).statistic, rel=1e-12)
    with pytest.raises(ValueError):
        ks_statistic([], lambda v: v)


def test_fit_recovers_inverse_gamma():
    s = sample_inv_gamma(InverseGammaParams(1.4, 1.0), 10_000, seed=0)
    fit = fit_timescale_distribution(s)
    assert fit["best"] == "inverse-gamma"
    assert 1.3 <= fit["inverse-gamma"].best_param <= 1.5
    assert fit["inverse-gamma"].D.shape == (30,)


def test_fit_recovers_narrow_gaussian():
    rng = np.random.default_rng(0)
    s = rng.normal(0.5, 0.1, size=20_000)
    s = s[s > 0][:10_000]
    fit = fit_timescale_distribution(s)
    assert fit["best"] == "narrow-gaussian"
    assert 0.45 <= fit["narrow-gaussian"].best_param <= 0.55


def test_fit_grid_edge_cases():
    s = np.array([0.5, 1.0, 2.0])
    fit = fit_timescale_distribution(s, alpha_grid=[0.7], mu_grid=[1.1])
    assert fit["inverse-gamma"].best_param == 0.7 and fit["narrow-gaussian"].best_param == 1.1
    assert "inverse-gamma" not in fit_timescale_distribution(np.array([-0.1, 0.2]))
    with pytest.raises(ValueError):
        fit_timescale_distribution(s, alpha_grid=[])


# ---- ablation ------------------------------------------------------------------------------

def test_empty_ablation_ratios_are_one():
    m = build_lm(LmConfig.multi_timescale(12, 4, (6, 8, 4)), seed=0)
    toks = np.random.default_rng(0).integers(0, 12, size=200)
    intact = evaluate_lm(m, toks)
    rep = ablate_units(m, toks, 1, [])
    np.testing.assert_array_equal(rep.nll, intact.nll)
    assert m.layers[1].output_mask is None


def test_route_group_count_and_ordering():
    m = build_lm(LmConfig.multi_timescale(12, 4, (8, 1150, 4)), seed=0)
    toks = np.random.default_rng(1).integers(0, 12, size=30)
    groups = ablate_and_route(m, toks, layer=1, group_size=50)
    assert len(groups) == 23
    means = [g.mean_T for g in groups]
    assert means == sorted(means, reverse=True)
    assert all(set(g.ratios) == set(BIN_NAMES) | {ALL} for g in groups)
    assert len(set(np.concatenate([g.units for g in groups]).tolist())) == 1150
    with pytest.raises(ValueError):
        ablate_and_route(m, toks, layer=0, group_size=50)
    with pytest.raises(ValueError):
        ablate_and_route(build_lm(LmConfig.baseline(12, 4, (8, 4))), toks, 0, group_size=4)


def test_ablation_masks_compose():
    m = build_lm(LmConfig.multi_timescale(12, 4, (6, 8, 4)), seed=2)
    toks = np.random.default_rng(2).integers(0, 12, size=150)
    a = ablate_units(m, toks, 1, [0, 1, 2, 3] + [6, 7]).nll
    b = ablate_units(m, toks, 1, [6, 7, 0, 1, 2, 3]).nll
    np.testing.assert_array_equal(a, b)


# ---- word ablation ----------------------------------------------------------------------------

def single_unit_model(f_bias=1.3, V=6):
    """One-unit layer whose gates ignore input and state, so c' - c decays as f^tau after t0."""
    m = build_lm(LmConfig(V, 3, (1,), [None], tie_weights=False), seed=0)
    p = m.layers[0].params
    p["W_h"][...] = 0.0
    p["W_x"][...] = 0.0
    p["W_x"][:, 2] = [1.0, -0.5, 0.7]  # only the candidate sees the input
    p["b_f"][:] = f_bias
    return m


def test_word_ablation_matches_closed_form():
    m = single_unit_model()
    f = 1 / (1 + math.exp(-1.3))
    sents = [np.array([1, 2, 3, 4, 1, 2, 3, 4, 1, 2]), np.array([2, 3, 1, 4, 4, 2, 1, 3, 2, 1, 1, 2])]
    out = word_ablation_decay(m, sents, ablate_pos=2, unk_id=5)
    curve = out["layers"][0]
    assert curve[0] == 1.0 and curve.size == 10
    np.testing.assert_allclose(curve, f ** np.arange(10), rtol=1e-9)
    zero = word_ablation_decay(m, sents, ablate_pos=2, policy="zero")["layers"][0]
    np.testing.assert_allclose(zero, f ** np.arange(10), rtol=1e-9)


def test_word_ablation_errors_and_groups():
    m = single_unit_model()
    with pytest.raises(ValueError):
        word_ablation_decay(m, [np.array([1, 5, 2])], ablate_pos=1, unk_id=5)
    with pytest.raises(ValueError):
        word_ablation_decay(m, [np.array([1, 2])], ablate_pos=4, unk_id=5)
    with pytest.raises(ValueError):
        word_ablation_decay(m, [np.array([1, 2, 3])], ablate_pos=0, policy="drop")
    big = build_lm(LmConfig.multi_timescale(10, 4, (6, 200, 4)), seed=0)
    sents = [np.random.default_rng(k).integers(0, 9, size=15) for k in range(3)]
    out = word_ablation_decay(big, sents, 3, unk_id=9, group_layer=1, group_size=100)
    assert len(out["layers"]) == 3 and len(out["groups"]) == 2
    assert out["groups"][0][0] < out["groups"][1][0]
    assert all(c[0] == 1.0 for _, c in out["groups"])


# ---- Dyck accuracy ------------------------------------------------------------------------------

class OraclePredictor:
    def predict_proba(self, symbols):
        return DyckSequence(symbols).targets


class ConstantPredictor:
    def predict_proba(self, symbols):
        return np.zeros((len(symbols), 2))


def test_oracle_predictor_scores_everything():
    seqs = build_dyck_dataset(n_train=1, n_valid=1, n_test=400, seed=3)["test"]
    buckets, overall = dyck_accuracy_by_timescale(OraclePredictor(), seqs)
    assert overall == 1.0 and all(b.accuracy == 1.0 for b in buckets)
    assert sum(b.n for b in buckets) == 400


def test_constant_predictor_and_empty_buckets():
    seqs = [DyckSequence("()")] * 5
    buckets, overall = dyck_accuracy_by_timescale(ConstantPredictor(), seqs)
    assert overall == 0.0
    assert [(b.lo, b.hi, b.n) for b in buckets] == [(0, 25, 5)]


def test_model_path_matches_predictor_path():
    from mtslstm.model import build_dyck_model

    class Wrapped:
        def __init__(self, model):
            self.model = model

        def predict_proba(self, symbols):
            return self.model.predict_proba(symbols)

    m = build_dyck_model(5, seed=1)
    seqs = build_dyck_dataset(n_train=1, n_valid=1, n_test=60, seed=0)["test"]
    np.testing.assert_array_equal(sequence_correct(m, seqs, batch_size=7), sequence_correct(Wrapped(m), seqs))
