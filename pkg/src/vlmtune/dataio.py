"""Loading corpora from disk into tokenized training/evaluation samples."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, InstructionLeakError
from .tokenizer import ByteTokenizer


@dataclass
class VqaSample:
    """One tokenized sample; instruction-format samples are flagged."""

    image: np.ndarray
    question_ids: list
    answer_ids: list
    answer_type: str
    question_text: str
    answer_text: str
    image_ref: str = ""
    instruction_format: bool = False


def read_records(path) -> list[dict]:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{ln}: invalid record ({e})") from e
    if not records:
        raise ConfigError(f"{path}: no records found")
    return records


def load_image(image_root, ref, cfg: ModelConfig) -> np.ndarray:
    path = Path(image_root) / ref
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        from PIL import Image
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    arr = arr.astype(cfg.np_dtype)
    expect = (cfg.image_size, cfg.image_size, 3)
    if arr.shape != expect:
        raise ConfigError(f"{path}: image shape {arr.shape}, model expects {expect}")
    return arr


def _question_of(record: dict) -> tuple[str, bool]:
    if "instruction" in record:
        return record["instruction"], True
    return record["question"], False


def build_samples(records: list[dict], image_root, cfg: ModelConfig,
                  tokenizer: ByteTokenizer | None = None) -> list[VqaSample]:
    """Tokenize records; accepts both raw and instruction-format files."""
    tok = tokenizer or ByteTokenizer()
    if cfg.vocab_size != tok.vocab_size:
        raise ConfigError(
            f"model vocab {cfg.vocab_size} != tokenizer vocab {tok.vocab_size}")
    samples = []
    image_cache: dict[str, np.ndarray] = {}
    for rec in records:
        qtext, is_instr = _question_of(rec)
        ref = rec["image"]
        if ref not in image_cache:
            image_cache[ref] = load_image(image_root, ref, cfg)
        atype = rec.get("answer_type") or ("open" if rec.get("options") else "closed")
        samples.append(VqaSample(
            image=image_cache[ref],
            question_ids=tok.question_ids(qtext, cfg.max_text_len),
            answer_ids=tok.answer_ids(rec["answer"], cfg.max_text_len),
            answer_type=atype,
            question_text=qtext,
            answer_text=rec["answer"],
            image_ref=ref,
            instruction_format=is_instr or bool(rec.get("options")),
        ))
    return samples


def load_benchmark(path, image_root, cfg: ModelConfig,
                   tokenizer: ByteTokenizer | None = None) -> list[VqaSample]:
    """Strict loader for evaluation inputs: original questions only.

    Instruction-format records (an ``instruction`` field or a non-empty
    ``options`` list) are rejected outright; candidate answers do not exist
    at inference time.
    """
    records = read_records(path)
    for i, rec in enumerate(records):
        if "instruction" in rec or rec.get("options"):
            raise InstructionLeakError(
                f"{path}: record {i} is instruction-format; evaluation requires "
                "original benchmark questions")
        if "answer_type" not in rec:
            raise ConfigError(f"{path}: record {i} lacks answer_type")
    return build_samples(records, image_root, cfg, tokenizer)
