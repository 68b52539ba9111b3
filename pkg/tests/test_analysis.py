from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorkv.analysis import (
    AttentionRecord,
    attention_max_distribution,
    capture_attention,
    export_heatmap,
    gini,
    gini_pairwise,
    gini_sorted,
    head_ov,
    negative_fraction,
    sparsity_report,
    top2_sum,
    wov_eigen_report,
)
from anchorkv.anchor import plant_anchors
from anchorkv.errors import InputError
from anchorkv.model import ModelConfig, init_model
from anchorkv.numerics import Rng, softmax_rows
from anchorkv.vocab import DEFAULT_VOCAB as V


def test_gini_examples():
    assert gini([0.25] * 4) == 0.0
    assert gini([1, 0, 0, 0]) == 0.75
    assert gini([0.5, 0.5, 0, 0]) == 0.5
    with pytest.raises(InputError):
        gini([0, 0, 0])
    with pytest.raises(InputError):
        gini([0.5, -0.1])


@pytest.mark.parametrize("n", [1, 2, 7, 64, 512, 1000])
def test_one_hot_gini_is_exact(n):
    w = np.zeros(n)
    w[n // 3] = 1.0
    assert gini(w) == (n - 1) / n
    assert gini_sorted(w) == pytest.approx((n - 1) / n, abs=1e-15)


def test_gini_formulas_agree_on_random_vectors():
    rng = Rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 513))
        w = rng.uniform(n) ** 3
        assert abs(gini_pairwise(w) - gini_sorted(w)) < 1e-9


@settings(max_examples=100)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=50).filter(lambda x: max(x) > 1e-3),
       st.floats(1e-3, 1e3))
def test_gini_scale_invariant_and_bounded(w, c):
    g = gini(w)
    assert abs(gini(np.asarray(w) * c) - g) < 1e-12
    assert -1e-12 <= g <= (len(w) - 1) / len(w) + 1e-12


def test_top2_examples():
    assert top2_sum([0.5, 0.3, 0.2]) == pytest.approx(0.8)
    assert top2_sum([0, 1, 0]) == 1.0
    assert top2_sum([0.4, 0.4, 0.2]) == pytest.approx(0.8)
    with pytest.raises(InputError):
        top2_sum([1.0])


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=40))
def test_top2_of_softmax_row_bounds(x):
    row = softmax_rows(np.asarray(x)[None, :])[0]
    t = top2_sum(row)
    assert 2 / len(x) - 1e-12 < t <= 1 + 1e-12


def record(tokens, rows):
    """One-layer, one-head record with every causal cell visible."""
    a = np.asarray(rows, dtype=float)[None]
    n = len(tokens)
    return AttentionRecord(list(tokens), [a], [np.tril(np.ones((n, n), dtype=bool))])


def test_max_distribution_fixture_three_of_four():
    toks = [V.id("a"), V.linebreak_id, V.id("b"), V.id("c")]
    rows = [
        [1, 0, 0, 0],
        [0.2, 0.8, 0, 0],
        [0.1, 0.6, 0.3, 0],
        [0.1, 0.2, 0.3, 0.4],
    ]
    d = attention_max_distribution([record(toks, rows)], exclude_sinks=0)
    # rows 1 and 2 peak on the linebreak; row 0 on 'a'; row 3 on 'c'
    assert d.counts == {"linebreak": 2, "other": 2}
    toks[3] = V.linebreak_id
    d = attention_max_distribution([record(toks, rows)], exclude_sinks=0)
    assert d.ratios["linebreak"] == 0.75
    assert sum(d.ratios.values()) == pytest.approx(1.0, abs=1e-9)


def test_max_distribution_excludes_sinks_and_breaks_ties_early():
    toks = [V.id("#"), V.linebreak_id, V.id("x")]
    rows = [[1, 0, 0], [0.9, 0.05, 0.05], [0.5, 0.25, 0.25]]
    d = attention_max_distribution([record(toks, rows)], exclude_sinks=1)
    # row 2 ties between columns 1 and 2 after the sink: the earlier wins
    assert d.counts == {"linebreak": 2, "other": 0}
    csv_lines = d.to_csv().splitlines()
    assert csv_lines[0] == "class,count,ratio" and csv_lines[1].startswith("linebreak,2,1.0")


def test_max_distribution_unknown_class():
    with pytest.raises(InputError):
        attention_max_distribution([record([5, 6], [[1, 0], [0, 1]])], classes={5: "x"}, exclude_sinks=0)


def small_model(seed=0, **kw):
    return init_model(ModelConfig(d_model=16, n_heads=4, n_layers=2, max_seq=64, **kw), Rng(seed))


def test_capture_rows_sum_to_one_and_fold_laa():
    w = small_model(taa_layers={0, 1}, laa_anchor_layer=0, mhpe=True)
    toks = list(plant_anchors(V.encode("###\nab\ncd\nef"), V.linebreak_id, V.anchor_id).tokens)
    rec = capture_attention(w, toks)
    n = len(toks)
    for a, vis in zip(rec.attention, rec.visible):
        assert a.shape == (4, n, n)
        assert np.allclose(a.sum(-1), 1.0, atol=1e-9)
        assert np.all(a[:, ~vis] == 0.0)


def test_sparsity_report_ranges_and_exports():
    w = small_model(1)
    recs = [capture_attention(w, V.encode(t)) for t in ["###\nx=1\n", "###\nprint(y)\n"]]
    rep = sparsity_report(recs)
    assert len(rep.gini) == 2
    assert all(0 <= g <= 1 for g in rep.gini) and all(0 < t <= 1 for t in rep.top2)
    assert rep.to_csv().splitlines()[0] == "layer,gini,top2"
    data = json.loads(rep.to_json())
    assert data["layers"][1]["rows"] == rep.rows[1] and "aggregation" in data
    with pytest.raises(InputError):
        sparsity_report([])


def test_sparsity_report_matches_direct_gini():
    toks = [1, 2, 3]
    rows = [[1, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]]
    rep = sparsity_report([record(toks, rows)])
    assert rep.rows == [2]
    assert rep.gini[0] == pytest.approx((gini([0.5, 0.5]) + gini([0.2, 0.3, 0.5])) / 2, abs=1e-12)
    assert rep.top2[0] == pytest.approx((1.0 + 0.8) / 2)


def gram_model(sign):
    w = small_model(2)
    dk = w.cfg.d_k
    for l in range(w.cfg.n_layers):
        wo = w.layer(l, "wo")
        wv = w.params[f"layer{l}.wv"]
        for h in range(w.cfg.n_heads):
            sl = slice(h * dk, (h + 1) * dk)
            wv[:, sl] = sign * wo[sl, :].T
    return w


def test_gram_and_negated_gram_fractions():
    pos = wov_eigen_report(gram_model(+1.0))
    neg = wov_eigen_report(gram_model(-1.0))
    assert np.all(pos.negative_fraction == 0.0)
    assert np.all(neg.negative_fraction == 1.0)


def test_eigen_sums_match_traces_and_counts():
    w = small_model(3)
    rep = wov_eigen_report(w)
    for key, ev in rep.eigenvalues.items():
        assert len(ev) == w.cfg.d_model
        assert abs(ev.sum() - rep.traces[key]) < 1e-8
        assert abs(rep.traces[key] - np.trace(head_ov(w, *key))) < 1e-12
    assert rep.to_csv().count("\n") == 1 + 2 * 4
    assert rep.eigen_csv().count("\n") == 1 + 2 * 4 * 16


def test_random_init_negative_fraction_is_mixed():
    w = init_model(ModelConfig(d_model=64), Rng(0))
    frac = wov_eigen_report(w).negative_fraction
    assert np.all((frac > 0.2) & (frac < 0.8))


def test_negative_fraction_ignores_zeros():
    assert negative_fraction([-1.0, 2.0, 1e-12, 0.0]) == 0.5
    assert negative_fraction([0.0, 0.0]) == 0.0


def test_heatmap_export():
    w = small_model(4)
    rec = capture_attention(w, V.encode('a,"b'))
    text = export_heatmap(rec, 1, head=2)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["query", "a", ",", '"', "b"]
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)
    for i, r in enumerate(rows[1:]):
        vals = [float(x) for x in r[1:] if x]
        assert len(vals) == i + 1 and abs(sum(vals) - 1) < 1e-6
    one = export_heatmap(capture_attention(w, [V.id("q")]), 0)
    assert one.splitlines() == ["query,q", "q,1"]
    for bad in [dict(layer=2), dict(layer=0, head=4), dict(layer=0, head="max")]:
        with pytest.raises(InputError):
            export_heatmap(rec, **bad)
