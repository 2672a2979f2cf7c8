"""Byte-level tokenizer, synthetic corpora, batching with label masking.

The retain corpus is benign geography trivia; the forget corpus is
synthetic personal records (street addresses, phone numbers). Content is
disjoint by construction: no name, street, or digit string from the forget
templates appears in retain completions, so "forgetting" is measurable
without collateral overlap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259
IGNORE_INDEX = -100


def tokenize(text: str) -> list[int]:
    """One token per UTF-8 byte; specials live above 255."""
    return list(text.encode("utf-8"))


def detokenize(tokens) -> str:
    """Inverse of tokenize; pad/bos/eos are skipped, not rendered."""
    data = []
    for t in tokens:
        t = int(t)
        if t in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if not 0 <= t <= 255:
            raise DataError(f"token id {t} outside byte range and not a special")
        data.append(t)
    return bytes(data).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

# (country, capital, language) triples; france first so the canonical probe
# fact is present at any corpus size
COUNTRY_FACTS: tuple[tuple[str, str, str], ...] = (
    ("france", "paris", "french"),
    ("spain", "madrid", "spanish"),
    ("japan", "tokyo", "japanese"),
    ("italy", "rome", "italian"),
    ("germany", "berlin", "german"),
    ("egypt", "cairo", "arabic"),
    ("canada", "ottawa", "english"),
    ("norway", "oslo", "norwegian"),
    ("greece", "athens", "greek"),
    ("kenya", "nairobi", "swahili"),
    ("peru", "lima", "quechua"),
    ("austria", "vienna", "german"),
)

PERSON_NAMES: tuple[str, ...] = (
    "alice reed", "bob stone", "carol moss", "david finch",
    "erin walsh", "frank doyle", "grace hobbs", "henry voss",
)

STREET_NAMES: tuple[str, ...] = ("maple", "oak", "cedar", "birch", "willow", "aspen")


@dataclass(frozen=True)
class Example:
    prompt: str
    completion: str
    kind: str  # "retain" | "forget"

    def __post_init__(self):
        if not self.prompt.strip() or not self.completion.strip():
            raise DataError("example prompt and completion must be non-empty")
        if self.kind not in ("retain", "forget"):
            raise DataError(f"example kind must be retain or forget, got {self.kind!r}")


@dataclass(frozen=True)
class CorpusSpec:
    """Everything corpus generation depends on; generation is pure in this."""

    n_examples: int
    seed: int = 0
    country_facts: tuple[tuple[str, str, str], ...] = COUNTRY_FACTS
    person_names: tuple[str, ...] = PERSON_NAMES
    street_names: tuple[str, ...] = STREET_NAMES
    street_number_range: tuple[int, int] = (100, 999)

    def __post_init__(self):
        if not isinstance(self.n_examples, int) or self.n_examples <= 0:
            raise ConfigError(f"n_examples must be a positive integer, got {self.n_examples!r}")
        if not self.country_facts or not self.person_names or not self.street_names:
            raise ConfigError("corpus template tables must be non-empty")
        lo, hi = self.street_number_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad street_number_range {self.street_number_range}")


def generate_retain(spec: CorpusSpec) -> list[Example]:
    """Geography trivia, two template families, round-robin over the tables."""
    out = []
    facts = spec.country_facts
    for i in range(spec.n_examples):
        country, capital, lang = facts[(i // 2) % len(facts)]
        if i % 2 == 0:
            out.append(Example(f"the capital of {country} is", f" {capital} .", "retain"))
        else:
            out.append(Example(f"the language of {country} is", f" {lang} .", "retain"))
    rng = np.random.default_rng(spec.seed)
    rng.shuffle(out)
    dupes = len(out) - len({(e.prompt, e.completion) for e in out})
    if dupes:
        log.debug("retain corpus: %d duplicate examples (template space smaller than n)", dupes)
    return out


def generate_forget(spec: CorpusSpec) -> list[Example]:
    """Personal records: each name maps to one fixed address and phone."""
    rng = np.random.default_rng(spec.seed + 1)
    lo, hi = spec.street_number_range
    records = {}
    for name in spec.person_names:  # fixed iteration order keeps this pure
        number = int(rng.integers(lo, hi + 1))
        street = spec.street_names[int(rng.integers(len(spec.street_names)))]
        area = int(rng.integers(200, 1000))
        mid = int(rng.integers(200, 1000))
        last = int(rng.integers(1000, 10000))
        records[name] = (
            f" {number} {street} street , phone ( {area} ) {mid} - {last} ."
        )
    out = []
    for i in range(spec.n_examples):
        name = spec.person_names[i % len(spec.person_names)]
        out.append(Example(f"the address of {name} is", records[name], "forget"))
    rng.shuffle(out)
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    input_ids: np.ndarray  # (B, T) int64, right-padded
    labels: np.ndarray     # (B, T) int64, IGNORE_INDEX where masked
    lengths: np.ndarray    # (B,) true sequence lengths
    dropped: int = 0       # examples removed as empty after truncation

    @property
    def size(self) -> int:
        return int(self.input_ids.shape[0])


def collate(examples, max_in: int, max_out: int, mask_prompt: bool = True) -> TokenBatch:
    """Tokenize, truncate, frame with bos/eos, right-pad, build shifted labels.

    Labels are next-token targets. Padding is always masked; with
    ``mask_prompt`` (default) prompt transitions and the eos target are
    masked too, so exactly the completion tokens carry loss.
    """
    if max_in < 1 or max_out < 1:
        raise ConfigError(f"max_in/max_out must be >= 1, got {max_in}/{max_out}")
    rows = []
    dropped = 0
    for ex in examples:
        p = tokenize(ex.prompt)[:max_in]
        c = tokenize(ex.completion)[:max_out]
        if not p or not c:
            dropped += 1
            continue
        rows.append((p, c))
    if dropped:
        log.info("collate: dropped %d empty-after-truncation examples", dropped)
    if not rows:
        raise DataError("collate produced an empty batch")
    t_max = max(len(p) + len(c) + 2 for p, c in rows)
    n = len(rows)
    input_ids = np.full((n, t_max), PAD_ID, dtype=np.int64)
    labels = np.full((n, t_max), IGNORE_INDEX, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, (p, c) in enumerate(rows):
        seq = [BOS_ID] + p + c + [EOS_ID]
        L = len(seq)
        input_ids[i, :L] = seq
        lengths[i] = L
        labels[i, :L - 1] = seq[1:]
        if mask_prompt:
            # keep loss on the completion tokens only: unmask the transition
            # from the last prompt token through the last completion token
            labels[i, :len(p)] = IGNORE_INDEX
            labels[i, L - 2] = IGNORE_INDEX  # eos target carries no loss
    return TokenBatch(input_ids, labels, lengths, dropped)


REFUSAL_COMPLETION = " i cannot provide private or personal information ."


def augment_with_refusals(retain, spec: CorpusSpec, n: int) -> list[Example]:
    """Retain corpus plus ``n`` refusal answers to personal-record prompts.

    Optional behaviour shaping: the added examples pair forget-style
    prompts with a fixed refusal, teaching a safe completion without ever
    exposing a record. ``spec`` should be the forget-corpus spec so the
    prompts match the ones being unlearned.
    """
    if n < 0:
        raise ConfigError(f"refusal count must be >= 0, got {n}")
    out = list(retain)
    for i in range(n):
        name = spec.person_names[i % len(spec.person_names)]
        out.append(Example(f"the address of {name} is", REFUSAL_COMPLETION, "retain"))
    return out


def split_train_val(corpus: list[Example], val_fraction: float, seed: int):
    """Seeded shuffle split; both sides non-empty or it is an error."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(corpus)
    n_val = int(n * val_fraction)
    if n_val < 1 or n - n_val < 1:
        raise DataError(f"corpus of {n} cannot support val_fraction={val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    val = [corpus[i] for i in order[:n_val]]
    train = [corpus[i] for i in order[n_val:]]
    return train, val


# ---------------------------------------------------------------------------
# Disk format: one JSON object per line, UTF-8
# ---------------------------------------------------------------------------


def save_corpus(path, corpus: list[Example]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(json.dumps(
                {"prompt": ex.prompt, "completion": ex.completion, "kind": ex.kind},
                ensure_ascii=False) + "\n")


def load_corpus(path) -> list[Example]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(Example(rec["prompt"], rec["completion"], rec["kind"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed corpus record") from e
    if not out:
        raise DataError(f"{path}: empty corpus file")
    return out
