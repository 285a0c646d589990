"""Instruction-format dataset generation.

Raw image-question-answer records are rewritten with templates: closed
(yes/no) questions get a bare instruction, open questions additionally get a
lettered options list containing the ground truth plus same-attribute
distractors drawn from answer pools built over the corpus. Generation is
fully determined by (records, seed, distractor count, template file), and
each record's randomness is derived from (seed, record index) so parallel
rendering cannot change the output.
"""

from __future__ import annotations

import hashlib
import json
import random
import string
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError

ATTRIBUTES = ("modality", "plane", "shape", "size", "organ", "location",
              "pathology", "other")

OPTION_LETTERS = string.ascii_uppercase


@dataclass
class QARecord:
    """One raw benchmark record."""

    image: str
    question: str
    answer: str
    answer_type: str  # open | closed
    attribute: Optional[str] = None

    def __post_init__(self):
        if self.answer_type not in ("open", "closed"):
            raise ConfigError(f"answer_type must be open or closed, got {self.answer_type!r}")
        if self.attribute is not None and self.attribute not in ATTRIBUTES:
            raise ConfigError(f"unknown attribute {self.attribute!r}")


@dataclass
class InstructionRecord:
    """A rendered instruction-format record."""

    image: str
    instruction: str
    answer: str
    template_id: str
    options: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


def _load_packaged(name: str) -> dict:
    with resources.files("vlmtune.data").joinpath(name).open("r", encoding="utf-8") as f:
        return json.load(f)


def load_templates(path=None) -> dict:
    """Template families; the packaged file ships >=5 closed and opened each."""
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else \
        _load_packaged("templates.json")
    for family in ("closed", "opened"):
        if not data.get(family):
            raise ConfigError(f"template family {family!r} is empty")
        for t in data[family]:
            if "{question}" not in t["text"]:
                raise ConfigError(f"template {t['id']} lacks a {{question}} placeholder")
            if family == "opened" and "{options}" not in t["text"]:
                raise ConfigError(f"template {t['id']} lacks an {{options}} placeholder")
    return data


def template_file_hash(path=None) -> str:
    if path:
        blob = Path(path).read_bytes()
    else:
        blob = resources.files("vlmtune.data").joinpath("templates.json").read_bytes()
    return hashlib.sha256(blob).hexdigest()


_RULES = None


def _rules() -> list:
    global _RULES
    if _RULES is None:
        _RULES = _load_packaged("attribute_rules.json")["rules"]
    return _RULES


def classify_attribute(question: str, answer: str = "") -> str:
    """Ordered keyword rules, first match wins; `other` when nothing hits."""
    q = question.lower()
    for rule in _rules():
        for kw in rule["keywords"]:
            if kw in q:
                return rule["attribute"]
    return "other"


def build_pools(records: list[QARecord]) -> dict[str, list[str]]:
    """Per attribute, the deduplicated sorted open-record answers."""
    if not records:
        raise ConfigError("cannot build pools from an empty corpus")
    pools: dict[str, set] = {a: set() for a in ATTRIBUTES}
    for r in records:
        if r.answer_type == "open":
            pools[attribute_of(r)].add(r.answer)
    return {a: sorted(v) for a, v in pools.items()}


def attribute_of(record: QARecord) -> str:
    return record.attribute or classify_attribute(record.question, record.answer)


def sample_distractors(record: QARecord, pools: dict[str, list[str]], k: int,
                       rng: random.Random) -> list[str]:
    """k distinct same-attribute answers that differ from the ground truth.

    When the attribute pool is too small the remainder is padded from the
    `other` pool (still excluding the answer and duplicates).
    """
    if k < 0:
        raise ConfigError("distractor count must be >= 0")
    attr = attribute_of(record)
    candidates = [a for a in pools.get(attr, []) if a != record.answer]
    if len(candidates) >= k:
        return rng.sample(candidates, k)
    chosen = list(candidates)
    backfill = [a for a in pools.get("other", [])
                if a != record.answer and a not in chosen]
    need = k - len(chosen)
    chosen += rng.sample(backfill, min(need, len(backfill)))
    return chosen


def render_options(options: list[str]) -> str:
    return " ".join(f"{OPTION_LETTERS[i]}) {opt}" for i, opt in enumerate(options))


def render_instruction(record: QARecord, distractors: list[str],
                       rng: random.Random, templates: dict) -> InstructionRecord:
    """Pick a template from the matching family and fill the placeholders."""
    if record.answer_type == "closed":
        tpl = rng.choice(templates["closed"])
        text = tpl["text"].replace("{question}", record.question)
        return InstructionRecord(image=record.image, instruction=text,
                                 answer=record.answer, template_id=tpl["id"])
    tpl = rng.choice(templates["opened"])
    options = [record.answer] + list(distractors)
    rng.shuffle(options)
    text = tpl["text"].replace("{question}", record.question)
    text = text.replace("{options}", render_options(options))
    return InstructionRecord(image=record.image, instruction=text,
                             answer=record.answer, template_id=tpl["id"],
                             options=options)


def record_rng(seed: int, index: int) -> random.Random:
    # string seeding is hashed with sha512 by random.Random, stable across runs
    return random.Random(f"{seed}/{index}")


def generate_records(records: list[QARecord], seed: int, k: int = 3,
                     templates: Optional[dict] = None) -> list[InstructionRecord]:
    templates = templates or load_templates()
    pools = build_pools(records)
    out = []
    for idx, rec in enumerate(records):
        rng = record_rng(seed, idx)
        distractors = sample_distractors(rec, pools, k, rng) \
            if rec.answer_type == "open" else []
        out.append(render_instruction(rec, distractors, rng, templates))
    return out


def read_qa_jsonl(path) -> list[QARecord]:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            records.append(QARecord(
                image=d["image"], question=d["question"], answer=d["answer"],
                answer_type=d["answer_type"], attribute=d.get("attribute")))
        except (KeyError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}:{ln}: bad record ({e})") from e
    if not records:
        raise ConfigError(f"{path}: no records found")
    return records


def generate_dataset(in_path, out_path, seed: int, k: int = 3,
                     template_path=None) -> dict:
    """Render a JSONL corpus to instruction format plus a manifest file."""
    records = read_qa_jsonl(in_path)
    templates = load_templates(template_path)
    rendered = generate_records(records, seed, k, templates)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(r.to_json() + "\n" for r in rendered)
    out_path.write_text(body, encoding="utf-8")
    manifest = {
        "seed": seed,
        "distractors": k,
        "template_sha256": template_file_hash(template_path),
        "n_records": len(records),
        "n_open": sum(1 for r in records if r.answer_type == "open"),
        "n_closed": sum(1 for r in records if r.answer_type == "closed"),
    }
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest


def validate_dataset(source_records: list[QARecord], rendered_path,
                     k: int = 3) -> list[str]:
    """Re-parse a generated file and check every invariant; returns problems.

    Checks per record: ground truth preserved byte-for-byte, open options
    contain the answer exactly once, distractors come from the record's
    attribute pool (the `other` pool is admissible only when the attribute
    pool cannot fill k), closed records carry no options, and the rendered
    instruction embeds the question text.
    """
    pools = build_pools(source_records)
    problems = []
    lines = [ln for ln in Path(rendered_path).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if len(lines) != len(source_records):
        problems.append(f"record count {len(lines)} != source {len(source_records)}")
        return problems
    for i, (src, line) in enumerate(zip(source_records, lines)):
        d = json.loads(line)
        tag = f"record {i}"
        if d["answer"] != src.answer:
            problems.append(f"{tag}: answer changed")
        if src.question not in d["instruction"]:
            problems.append(f"{tag}: question text missing from instruction")
        if src.answer_type == "closed":
            if d["options"]:
                problems.append(f"{tag}: closed record rendered options")
            continue
        opts = d["options"]
        if opts.count(src.answer) != 1:
            problems.append(f"{tag}: answer appears {opts.count(src.answer)} times in options")
        attr = attribute_of(src)
        attr_pool = set(pools.get(attr, []))
        strict = len([a for a in attr_pool if a != src.answer]) >= k
        allowed = attr_pool if strict else attr_pool | set(pools.get("other", []))
        for o in opts:
            if o == src.answer:
                continue
            if o not in allowed:
                problems.append(f"{tag}: distractor {o!r} outside attribute pool {attr!r}")
        if len(set(opts)) != len(opts):
            problems.append(f"{tag}: duplicate options")
        rendered = render_options(opts)
        if rendered not in d["instruction"] and opts:
            problems.append(f"{tag}: option list not rendered in instruction")
    return problems
