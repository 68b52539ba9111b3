from __future__ import annotations

import pytest

from anchorkv.anchor import plant_anchors
from anchorkv.gradcheck import gradient_check
from anchorkv.model import ModelConfig, init_model
from anchorkv.numerics import Rng
from anchorkv.vocab import DEFAULT_VOCAB as V

CONFIGS = {
    "dense": {},
    "taa": {"taa_layers": {0, 1}},
    "taa_mhpe": {"taa_layers": {0, 1}, "mhpe": True},
    "taa_mhpe_laa": {"taa_layers": {0, 1}, "mhpe": True, "laa_anchor_layer": 0},
}


def batch_for(cfg):
    texts = ["ab\ncde\nf", "xy\nz\n\nw"]
    if cfg.uses_anchors:
        return [list(plant_anchors(V.encode(t), V.linebreak_id, V.anchor_id).tokens) for t in texts]
    return [V.encode(t) for t in texts]


@pytest.mark.parametrize("name", list(CONFIGS))
def test_sampled_gradients_match_finite_differences(name):
    cfg = ModelConfig(d_model=16, n_heads=4, n_layers=2, max_seq=32, **CONFIGS[name])
    # larger init so every path carries a measurable gradient
    w = init_model(cfg, Rng(1))
    for k in w.params:
        if not k.rsplit(".", 1)[-1].startswith("ln"):
            w.params[k] = w.params[k] * 10
    errors = gradient_check(w, batch_for(cfg), sample=12)
    assert max(errors.values()) < 1e-4, errors
