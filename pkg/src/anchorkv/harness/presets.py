"""Named toy configurations used by the CLI and the experiments."""

from __future__ import annotations

from ..errors import ConfigError
from ..model import ModelConfig


def toy_config(kind: str = "dense", **overrides) -> ModelConfig:
    """``dense``: plain causal model. ``anchor``: anchor attention in every
    layer, per-head anchor positions, and layer 0 as the shared anchor layer."""
    if kind == "dense":
        base = {}
    elif kind == "anchor":
        base = {"taa_layers": frozenset(range(overrides.get("n_layers", 4))), "laa_anchor_layer": 0, "mhpe": True}
    else:
        raise ConfigError(f"unknown preset {kind!r}")
    base.update(overrides)
    return ModelConfig(**base)
