"""Shared fixtures: tiny configs, deterministic sample builders."""

from dataclasses import dataclass

import numpy as np
import pytest

from vlmtune.config import ModelConfig, micro_config, toy_config


@dataclass
class Sample:
    """Duck-typed training sample used across the harness tests."""

    image: np.ndarray
    question_ids: list
    answer_ids: list
    answer_type: str = "open"
    answer_text: str = ""
    question_text: str = ""


def tiny_config(dtype="float32", **over) -> ModelConfig:
    """Smallest config that still exercises every sub-block."""
    base = dict(hidden_dim=32, num_heads=4, ffn_dim=64,
                vit_layers=1, jtm_layers=1, dec_layers=1,
                image_size=16, patch_size=8, vocab_size=260,
                max_text_len=48, dtype=dtype)
    base.update(over)
    return ModelConfig(**base)


def random_sample(cfg: ModelConfig, rng: np.random.Generator,
                  q_len: int = 6, a_len: int = 4) -> Sample:
    img = rng.random((cfg.image_size, cfg.image_size, 3)).astype(cfg.np_dtype)
    body_max = cfg.vocab_size - 4
    q = [cfg.vocab_size - 3] + list(rng.integers(0, body_max, size=q_len)) + [cfg.vocab_size - 1]
    a = list(rng.integers(0, body_max, size=a_len))
    return Sample(image=img, question_ids=q, answer_ids=a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def toy_cfg():
    return toy_config()
