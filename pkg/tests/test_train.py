import math

import numpy as np
import pytest

from mtslstm.corpus import CorpusBundle, Vocab
from mtslstm.dyck import DyckSequence
from mtslstm.model import LmConfig, build_dyck_model, build_lm
from mtslstm.train import (
    Adam,
    AdamConfig,
    AveragedSGD,
    SgdAsgdConfig,
    clip_grads,
    nt_asgd_trigger,
    pad_batch,
    sgd_step,
    train_dyck,
    train_lm,
)


# ---- SGD ---------------------------------------------------------------------

def test_sgd_step_example():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([0.5])}, lr=0.1)
    assert p["w"][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_weight_decay():
    p = {"w": np.array([2.0])}
    sgd_step(p, {"w": np.array([0.0])}, lr=0.5, weight_decay=0.1)
    assert p["w"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_clip_scales_to_norm():
    g = {"a": np.array([6.0]), "b": np.array([8.0])}
    norm = clip_grads(g, 1.0)
    assert norm == pytest.approx(10.0)
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8], rtol=1e-10)
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    sgd_step(p, {"a": np.array([6.0]), "b": np.array([8.0])}, lr=1.0, clip_norm=1.0)
    np.testing.assert_allclose([p["a"][0], p["b"][0]], [-0.6, -0.8], rtol=1e-10)


def test_sgd_skips_frozen_and_rejects_nan():
    p = {"w": np.array([1.0]), "b_f": np.array([3.0])}
    sgd_step(p, {"w": np.array([1.0]), "b_f": np.array([100.0])}, lr=1.0, frozen={"b_f"})
    assert p["b_f"][0] == 3.0 and p["w"][0] == 0.0
    with pytest.raises(FloatingPointError):
        sgd_step(p, {"w": np.array([np.inf])}, lr=1.0)


# ---- NT-ASGD trigger ------------------------------------------------------------

def test_trigger_examples():
    assert nt_asgd_trigger([5, 4, 3, 2, 1, 0.9, 2.0], 5) is False
    assert nt_asgd_trigger([1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 1.01], 5) is True
    assert not nt_asgd_trigger(list(np.linspace(10, 1, 30)), 5)
    assert not nt_asgd_trigger([1.0], 5)
    with pytest.raises(ValueError):
        nt_asgd_trigger([], 5)
    with pytest.raises(ValueError):
        SgdAsgdConfig(nonmono=0)


def test_asgd_average_equals_direct_mean():
    p = {"w": np.array([1.0, -2.0])}
    opt = AveragedSGD(p, lr=0.1)
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=2) for _ in range(12)]
    for g in grads[:4]:
        opt.step({"w": g.copy()})
    assert opt.averaged_params()["w"] is not p["w"]
    np.testing.assert_array_equal(opt.averaged_params()["w"], p["w"])
    opt.start_averaging()
    seen = []
    for g in grads[4:]:
        opt.step({"w": g.copy()})
        seen.append(p["w"].copy())
    np.testing.assert_allclose(opt.averaged_params()["w"], np.mean(seen, axis=0), rtol=1e-13)
    assert opt.avg_start == 4 and opt.n_avg == 8


# ---- Adam -------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([0.0, 0.0])}
    opt = Adam(p, lr=1e-4)
    opt.step({"w": np.array([1.0, -3.0])})
    np.testing.assert_allclose(p["w"], [-1e-4, 1e-4], rtol=1e-7)


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([0.7])}
    opt = Adam(p)
    for _ in range(3):
        opt.step({"w": np.zeros(1)})
    assert p["w"][0] == 0.7


def test_adam_two_step_closed_form():
    b1, b2, eps, lr, g1, g2 = 0.9, 0.999, 1e-8, 1e-3, 0.4, -1.2
    p = {"w": np.array([1.0])}
    opt = Adam(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
    opt.step({"w": np.array([g1])})
    opt.step({"w": np.array([g2])})
    w = 1.0 - lr * g1 / (abs(g1) + eps)
    m = (1 - b1) * (b1 * g1 + g2) / (1 - b1 ** 2)
    v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2) / (1 - b2 ** 2)
    w -= lr * m / (math.sqrt(v) + eps)
    assert p["w"][0] == pytest.approx(w, rel=1e-12)


def test_adam_frozen_untouched_and_state_round_trip():
    p = {"w": np.array([1.0]), "b_f": np.array([2.0])}
    opt = Adam(p, frozen={"b_f"}, lr=0.1)
    opt.step({"w": np.array([1.0]), "b_f": np.array([5.0])})
    assert p["b_f"][0] == 2.0 and "b_f" not in opt.m
    other = Adam({"w": p["w"].copy(), "b_f": p["b_f"].copy()}, frozen={"b_f"}, lr=0.1)
    other.load_state_dict(opt.state_dict())
    assert other.t == 1 and other.m["w"][0] == opt.m["w"][0]
    with pytest.raises(FloatingPointError):
        opt.step({"w": np.array([np.nan]), "b_f": np.zeros(1)})


# ---- language model training ---------------------------------------------------------

def tiny_corpus(V=50, n=1000, seed=0):
    # skewed bigram source so a model can beat the unigram baseline
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(V, 0.1), size=V)
    toks = [0]
    for _ in range(n + 199):
        toks.append(rng.choice(V, p=P[toks[-1]]))
    toks = np.array(toks)
    train, valid = toks[:n], toks[n:]
    vocab = Vocab([str(i) for i in range(V)], np.bincount(train, minlength=V))
    return CorpusBundle(train, valid, valid, vocab)


def unigram_perplexity(tokens, V):
    p = np.bincount(tokens, minlength=V) / len(tokens)
    p = p[p > 0]
    return math.exp(-(p * np.log(p)).sum())


SMOKE = SgdAsgdConfig(lr=5.0, weight_decay=0.0, clip_norm=0.25, epochs=50, batch_size=4, eval_batch_size=2)


def test_tiny_corpus_beats_unigram():
    c = tiny_corpus()
    m = build_lm(LmConfig.baseline(50, 16, (32, 16)), seed=0)
    res = train_lm(m, c, SMOKE, seed=0)
    train_ppl = math.exp(res.history[-1]["train_loss"])
    assert train_ppl < unigram_perplexity(c.train, 50)


def test_lm_training_deterministic_and_freezes(tmp_path):
    c = tiny_corpus(V=20, n=400)
    cfg = SgdAsgdConfig(lr=2.0, weight_decay=1e-6, epochs=3, batch_size=4, eval_batch_size=2)

    def run(path):
        m = build_lm(LmConfig.multi_timescale(20, 8, (10, 12, 8)), seed=1)
        before = {k: m.parameters()[k].copy() for k in m.frozen}
        res = train_lm(m, c, cfg, seed=5, log_path=path / "log.csv", timing_path=path / "timing.csv",
                       checkpoint_path=path / "model.ckpt")
        for k, v in before.items():
            np.testing.assert_array_equal(m.parameters()[k], v)
        return res

    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    header = (tmp_path / "a" / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,valid_loss,lr,asgd_triggered"


def test_lm_vocab_mismatch():
    with pytest.raises(ValueError):
        train_lm(build_lm(LmConfig.baseline(7, 4, (4,))), tiny_corpus(V=20, n=100), SMOKE)


def test_trigger_switches_on_in_training():
    # a large learning rate makes validation loss bounce, so averaging must switch on
    c = tiny_corpus(V=20, n=300)
    cfg = SgdAsgdConfig(lr=30.0, epochs=12, nonmono=2, batch_size=4, eval_batch_size=2)
    res = train_lm(build_lm(LmConfig.baseline(20, 8, (8,)), seed=0), c, cfg, seed=0)
    flags = [r["asgd_triggered"] for r in res.history]
    assert flags == sorted(flags) and flags[-1] == 1
    assert res.best_valid == min(r["valid_loss"] for r in res.history)


# ---- Dyck training -------------------------------------------------------------------

def per_step_accuracy(model, seqs):
    xs, ys, mask = pad_batch(seqs)
    pred = (model.forward(xs) > 0).astype(float)
    ok = (pred == ys).all(axis=-1)
    return float(ok[mask > 0].mean())


def test_dyck_smoke_run(tmp_path):
    seqs = [DyckSequence("()[]") for _ in range(50)]
    m = build_dyck_model(8, "inverse-gamma", 1.5, seed=0)
    frozen = {k: m.parameters()[k].copy() for k in m.frozen}
    res = train_dyck(m, seqs, AdamConfig(epochs=200), seed=0, log_path=tmp_path / "log.csv",
                     checkpoint_path=tmp_path / "m.ckpt")
    assert per_step_accuracy(m, seqs[:1]) == 1.0
    losses = [r["train_loss"] for r in res.history]
    assert np.mean(np.diff(losses) <= 0) >= 0.9
    for k, v in frozen.items():
        np.testing.assert_array_equal(m.parameters()[k], v)
    assert (tmp_path / "m.ckpt").exists()


def test_dyck_training_deterministic_and_padding():
    seqs = [DyckSequence("()"), DyckSequence("([])"), DyckSequence("[]()"), DyckSequence("[[]]")]
    runs = []
    for _ in range(2):
        m = build_dyck_model(4, seed=3)
        runs.append(train_dyck(m, seqs, AdamConfig(lr=1e-2, epochs=5, batch_size=2), seed=9).history)
    assert runs[0] == runs[1]
    _, _, mask = pad_batch(seqs[:2])
    np.testing.assert_array_equal(mask.sum(axis=0), [2, 4])
    with pytest.raises(ValueError):
        train_dyck(build_dyck_model(4), [], AdamConfig(epochs=1))
