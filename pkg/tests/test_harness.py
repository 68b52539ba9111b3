from __future__ import annotations

import math

import numpy as np
import pytest

from anchorkv.cache import AnchorPolicy, DensePolicy, HeavyHitterPolicy, WindowPolicy
from anchorkv.errors import ConfigError, InputError
from anchorkv.harness.bench import RuntimeReport, bench_prompt, bench_runtime, runtime_csv, with_max_seq
from anchorkv.harness.corpus import HEADER, line_probe, linebreak_fraction, make_corpus
from anchorkv.harness.evaluate import evaluate, next_token_accuracy, perplexity, policy_logits
from anchorkv.harness.needle import (
    NEEDLE,
    balanced_tasks,
    coin_flip_answerer,
    eval_needle_grid,
    make_needle,
    model_answerer,
    needle_index,
    oracle_answerer,
)
from anchorkv.harness.presets import toy_config
from anchorkv.harness.training import TrainConfig, lr_at, prepare, train
from anchorkv.model import ModelConfig, init_model, loss_only
from anchorkv.numerics import Rng
from anchorkv.vocab import DEFAULT_VOCAB as V

SMALL = dict(d_model=16, n_heads=4, n_layers=2, max_seq=512)


def test_corpus_deterministic():
    for style in ("lines", "membership"):
        assert make_corpus(Rng(3), 2000, style) == make_corpus(Rng(3), 2000, style)
    assert make_corpus(Rng(3), 2000) != make_corpus(Rng(4), 2000)


def test_lines_corpus_shape():
    corpus = make_corpus(Rng(0), 20000, "lines")
    assert sum(map(len, corpus)) >= 20000
    assert 0.05 <= linebreak_fraction(corpus) <= 0.20
    for seq in corpus:
        text = V.decode(seq)
        assert text.startswith(HEADER) and text.endswith("\n") and len(seq) <= 256
        assert V.anchor_id not in seq


def test_lines_corpus_reuses_variables_across_lines():
    text = V.decode(make_corpus(Rng(1), 300, "lines")[0])
    lines = text.splitlines()[1:]
    assigned = {l.split("=")[0].strip() for l in lines if "=" in l and not l.startswith(" ")}
    later_uses = sum(any(v in l.split("=", 1)[-1] for v in assigned) for l in lines[2:])
    assert later_uses >= 3


def test_membership_corpus_balanced():
    corpus = make_corpus(Rng(0), 100_000, "membership")
    answers = [s[-1] for s in corpus]
    frac_true = answers.count(V.id("T")) / len(answers)
    assert abs(frac_true - 0.5) <= 0.02
    present = sum(NEEDLE in V.decode(s) for s in corpus) / len(corpus)
    assert abs(present - 0.5) <= 0.05
    assert set(answers) == {V.id("T"), V.id("F")}
    assert max(map(len, corpus)) < 512


def test_membership_answer_matches_needle_and_query():
    for seq in make_corpus(Rng(2), 5000, "membership"):
        text = V.decode(seq)
        items = text.split("l=[\n")[1].split("\n]")[0]
        present = NEEDLE in items
        negated = "not in" in text.splitlines()[-1]
        assert text[-1] == ("T" if present != negated else "F")


def test_line_probe():
    t = make_needle(Rng(0), 40, 0.5, present=True)
    probe = V.decode(line_probe(t))
    assert probe.endswith("\nT")
    last_line = probe.splitlines()[-2]
    assert NEEDLE in last_line and len(last_line) == 16
    absent = make_needle(Rng(0), 40, 0.5, present=False)
    assert V.decode(line_probe(absent)).endswith("\nF")
    mixed = make_corpus(Rng(5), 20000, "membership", probe_fraction=1.0)
    assert all("assert" not in V.decode(s) for s in mixed)


def test_corpus_errors():
    with pytest.raises(InputError):
        make_corpus(Rng(0), 0)
    with pytest.raises(InputError):
        make_corpus(Rng(0), 10, "poems")


def test_needle_placement():
    assert needle_index(64, 0.5) == 32
    assert needle_index(10, 0.0) == 0 and needle_index(10, 1.0) == 9
    t = make_needle(Rng(0), 64, 0.5, present=True)
    assert t.items[32] == NEEDLE and t.items.count(NEEDLE) == 1
    assert V.decode(t.prompt)[t.needle_position] == NEEDLE
    assert t.gold and t.answer_id == V.id("T")
    assert t.distance == len(t.prompt) - 1 - t.needle_position
    a = make_needle(Rng(0), 64, 0.5, present=False)
    assert NEEDLE not in a.items and NEEDLE not in V.decode(a.prompt) and not a.gold
    n = make_needle(Rng(0), 64, 0.5, present=False, negated=True)
    assert n.gold and "not in" in V.decode(n.prompt)


def test_needle_prompt_layout():
    t = make_needle(Rng(1), 20, 0.0, present=True)
    lines = V.decode(t.prompt).split("\n")
    assert lines[0] == "###" and lines[2] == "l=["
    assert [len(l) for l in lines[3:5]] == [16, 4]
    assert lines[5] == "]" and lines[6] == "assert needle in l=="


def test_needle_errors():
    with pytest.raises(InputError):
        make_needle(Rng(0), 1, 0.5, True)
    with pytest.raises(InputError):
        make_needle(Rng(0), 8, 1.5, True)
    with pytest.raises(InputError):
        make_needle(Rng(0), 3, 0.5, True, haystack=["a", "@", "b"])


def test_balanced_tasks_share_haystacks():
    tasks = balanced_tasks(Rng(0), 16, 0.5, 8)
    assert len(tasks) == 8
    assert sum(t.gold for t in tasks) == 4
    for g in range(2):
        group = tasks[4 * g : 4 * g + 4]
        k = group[0].needle_index
        bare = {t.items[:k] + t.items[k + 1 :] for t in group}
        assert len(bare) == 1
        assert [(t.negated, t.present) for t in group] == [(False, True), (False, False), (True, True), (True, False)]


def test_oracle_and_coin_flip_grids():
    grid = eval_needle_grid(None, None, (16, 32), (0.0, 1.0), trials=32, answerer=oracle_answerer)
    assert np.all(grid.accuracy == 1.0)
    coin = eval_needle_grid(None, None, (16, 32, 64), (0.0, 0.5, 1.0), trials=32, answerer=coin_flip_answerer(Rng(9)))
    bound = 3 * math.sqrt(0.25 / 32)
    assert np.all(np.abs(coin.accuracy - 0.5) <= bound)
    lines = grid.to_csv().splitlines()
    assert lines[0] == "policy,length,depth,trials,needle_distance,accuracy"
    assert len(lines) == 5 and grid.cell(32, 1.0) == 1.0


def test_grid_uses_same_prompts_for_every_policy():
    seen = {}

    def record(label):
        def answer(task):
            seen.setdefault(label, []).append(task.prompt)
            return task.answer_id
        return answer

    eval_needle_grid(None, None, (16,), (0.5,), 8, answerer=record("a"))
    eval_needle_grid(None, None, (16,), (0.5,), 8, answerer=record("b"))
    assert seen["a"] == seen["b"]


def test_model_answerer_window_blind_beyond_reach():
    # A needle farther back than n_layers * (window - 1) cannot influence the
    # answer, so paired present/absent prompts get the same answer.
    w = init_model(toy_config("dense", **SMALL), Rng(0))
    ans = model_answerer(w, WindowPolicy(4))
    for t in balanced_tasks(Rng(1), 32, 0.0, 4):
        assert t.distance > 2 * 3
    tasks = balanced_tasks(Rng(1), 32, 0.0, 4)
    assert ans(tasks[0]) == ans(tasks[1]) and ans(tasks[2]) == ans(tasks[3])


def uniform_model():
    w = init_model(ModelConfig(**SMALL), Rng(0))
    w.params["embed"][:] = 0.0
    return w


def test_uniform_model_perplexity_is_vocab_size():
    corpus = make_corpus(Rng(0), 300, "lines")
    assert perplexity(uniform_model(), DensePolicy(), corpus) == pytest.approx(len(V), rel=1e-9)


def test_dense_perplexity_matches_loss():
    w = init_model(ModelConfig(**SMALL), Rng(1))
    corpus = make_corpus(Rng(1), 600, "lines")
    assert perplexity(w, DensePolicy(), corpus) == pytest.approx(math.exp(loss_only(w, corpus)), rel=1e-9)


def test_accuracy_uses_argmax_of_same_logits():
    w = init_model(ModelConfig(**SMALL), Rng(2))
    corpus = make_corpus(Rng(2), 300, "lines")[:1]
    rep = evaluate(w, DensePolicy(), corpus)
    fed, logits, _ = policy_logits(w, corpus[0], DensePolicy())
    hits = sum(int(np.argmax(logits[i]) == fed[i + 1]) for i in range(len(fed) - 1))
    assert len(corpus) == 1 and rep.accuracy == hits / (len(fed) - 1)
    assert rep.n_targets == len(fed) - 1
    assert 0 <= next_token_accuracy(w, DensePolicy(), corpus) < 0.2


def test_anchor_evaluation_excludes_anchor_targets_and_reports_budget():
    cfg = toy_config("anchor", **SMALL)
    w = init_model(cfg, Rng(3))
    corpus = make_corpus(Rng(3), 400, "lines")
    rep = evaluate(w, AnchorPolicy(), corpus)
    assert rep.n_targets == sum(len(s) - 1 for s in corpus)
    assert 0 < rep.budget.budget_percent < 60


def test_streamed_policy_logits_match_static_path():
    w = init_model(toy_config("anchor", **SMALL), Rng(4))
    seq = make_corpus(Rng(4), 100, "lines")[0]
    _, a, _ = policy_logits(w, seq, AnchorPolicy())
    h = HeavyHitterPolicy(1.0)  # keeps everything, streams token by token
    _, b, _ = policy_logits(w, seq, h)
    _, c, _ = policy_logits(w, seq, DensePolicy())
    assert np.max(np.abs(b - c)) < 1e-10
    assert a.shape[0] > c.shape[0]


def test_evaluate_errors():
    w = uniform_model()
    with pytest.raises(InputError):
        evaluate(w, DensePolicy(), [])
    with pytest.raises(InputError):
        evaluate(w, DensePolicy(), [[1]])


def test_lr_schedule():
    tc = TrainConfig(steps=120, lr=1.0, warmup=20, min_lr_ratio=0.1)
    assert lr_at(0, tc) == pytest.approx(0.05)
    assert lr_at(19, tc) == pytest.approx(1.0)
    assert lr_at(20, tc) == pytest.approx(1.0)
    assert lr_at(70, tc) == pytest.approx(0.55)
    assert lr_at(120, tc) == pytest.approx(0.1)
    assert all(lr_at(s, tc) >= lr_at(s + 1, tc) for s in range(20, 119))


def test_prepare_plants_anchors_only_for_anchor_models():
    seq = V.encode("###\na\n")
    assert prepare(ModelConfig(**SMALL), [seq]) == [seq]
    assert prepare(toy_config("anchor", **SMALL), [seq])[0].count(V.anchor_id) == 2


def test_train_reduces_answer_loss_deterministically():
    cfg = ModelConfig(**{**SMALL, "max_seq": 128})
    corpus = make_corpus(Rng(0), 3000, "membership", lengths=(4,))
    tc = TrainConfig(steps=15, batch_size=4, lr=1e-3, answer_only=True)
    a = train(cfg, corpus, tc)
    b = train(cfg, corpus, tc)
    assert a.losses == b.losses
    assert np.mean(a.losses[-5:]) < np.mean(a.losses[:5])


def test_presets():
    assert toy_config("dense").taa_layers == frozenset()
    a = toy_config("anchor")
    assert a.taa_layers == frozenset(range(4)) and a.laa_anchor_layer == 0 and a.mhpe
    assert toy_config("anchor", n_layers=2).taa_layers == frozenset({0, 1})
    with pytest.raises(ConfigError):
        toy_config("sparse")


def test_bench_prompt_length_and_timing_definition():
    assert len(bench_prompt(300)) == 300 and len(bench_prompt(3000)) == 3000
    w = init_model(toy_config("anchor", **{**SMALL, "max_seq": 64}), Rng(5))
    rep = bench_runtime(w, AnchorPolicy(), 100, 1, repeats=3)
    assert rep.throughput * rep.decode_seconds == pytest.approx(1.0, rel=0.01)
    rep = bench_runtime(w, DensePolicy(), 80, 20, repeats=2)
    assert rep.throughput * rep.decode_seconds == pytest.approx(20, rel=0.01)
    assert rep.prompt_len == 80 and rep.budget.budget_percent == 100.0
    csv_text = runtime_csv([rep])
    assert csv_text.splitlines()[0] == RuntimeReport.CSV_HEADER and csv_text.count("\n") == 2
    with pytest.raises(InputError):
        bench_runtime(w, DensePolicy(), 10, 0)


def test_with_max_seq_shares_parameters():
    w = init_model(ModelConfig(**SMALL), Rng(0))
    big = with_max_seq(w, 4096)
    assert big.cfg.max_seq == 4096 and big.params is w.params
