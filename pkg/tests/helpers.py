"""Shared builders for model-level tests."""
from __future__ import annotations

import numpy as np

from courtgraph.config import ModelConfig
from courtgraph.data import SynthConfig, synth_generate, window_dataset
from courtgraph.model import build_registry

TOY_TYPES = ("Home-PG", "Away-PG")


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        node_types=TOY_TYPES,
        history_steps=4,
        horizon_steps=5,
        n_gmm=3,
        n_latent_vars=2,
        latent_categories=3,
        edge_radius=4.0,
        ee_hidden=4,
        eie_hidden=4,
        nhe_hidden=6,
        fce_hidden=5,
        nfe_hidden=5,
        decoder_hidden=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_examples(cfg: ModelConfig, n_plays=2, n_players=(3, 4), seed=21, play_length=18):
    plays = synth_generate(
        SynthConfig(
            n_plays=n_plays,
            n_players=n_players,
            play_length=play_length,
            seed=seed,
            type_cycle=cfg.node_types,
        )
    )
    return window_dataset(plays, cfg.history_steps, cfg.horizon_steps, cfg.edge_radius)


def toy_setup(seed=3, **overrides):
    cfg = toy_config(**overrides)
    registry = build_registry(cfg, seed)
    examples = toy_examples(cfg)
    return cfg, registry, examples
