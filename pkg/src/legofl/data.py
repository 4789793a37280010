"""Synthetic 8-domain character corpus, batching, and client partitioners.

Every example is ``<bos> TAG prompt = answer <eos>``; loss is taken only on the
answer and the closing ``<eos>`` (the instruction-tuning convention).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InputError, PartitionError
from .mathcore import Rng
from .model import Batch

SPECIALS = ("<pad>", "<bos>", "<eos>")
CHARS = "0123456789abcdefghijklmnopqrstuvwxyz=+()[]<>?:.,!# -*CRSBAPNQ"
VOCAB = SPECIALS + tuple(CHARS)
PAD, BOS, EOS = 0, 1, 2
STOI = {c: i for i, c in enumerate(VOCAB)}
assert len(VOCAB) == 64

LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"


def encode(text: str) -> list[int]:
    try:
        return [STOI[c] for c in text]
    except KeyError as e:
        raise InputError(f"character {e.args[0]!r} is not in the vocabulary") from None


def decode(ids) -> str:
    return "".join(VOCAB[i] if i >= len(SPECIALS) else "" for i in ids)


# ---------------------------------------------------------------- task domains


def _word(rng: Rng, alphabet: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n))


def _copy(rng):
    s = _word(rng, LETTERS, 3, 7)
    return s, s


def _reverse(rng):
    s = _word(rng, LETTERS, 3, 7)
    return s, s[::-1]


def _sort_digits(rng):
    s = _word(rng, DIGITS, 3, 7)
    return s, "".join(sorted(s))


def _balanced(s: str) -> bool:
    stack = []
    pairs = {")": "(", "]": "["}
    for c in s:
        if c in "([":
            stack.append(c)
        elif not stack or stack.pop() != pairs[c]:
            return False
    return not stack


def _brackets(rng):
    n = 2 * int(rng.integers(1, 5))
    if rng.random() < 0.5:
        out, stack = [], []
        for i in range(n):
            remaining = n - i
            if stack and (remaining == len(stack) or rng.random() < 0.5):
                out.append(")" if stack.pop() == "(" else "]")
            else:
                c = rng.choice("([")
                stack.append(c)
                out.append(c)
        s = "".join(out)
    else:
        s = _word(rng, "()[]", n, n)
    return s, "y" if _balanced(s) else "n"


def _arithmetic(rng):
    a, b = (int(x) for x in rng.integers(0, 50, 2))
    return f"{a}+{b}", str(a + b)


def _palindrome(rng):
    s = _word(rng, LETTERS, 2, 5)
    return s, s[:-1][::-1]


def _counting(rng):
    s = _word(rng, "xo", 3, 9)
    return s, str(s.count("x"))


def _shift(rng):
    s = _word(rng, LETTERS, 2, 5)
    return s + "?", "".join(LETTERS[(LETTERS.index(c) + 1) % 26] for c in s)


@dataclass(frozen=True)
class Domain:
    name: str
    tag: str
    generate: Callable[[Rng], tuple[str, str]]


DOMAINS = (
    Domain("copy", "C", _copy),
    Domain("reverse", "R", _reverse),
    Domain("sort_digits", "S", _sort_digits),
    Domain("brackets", "B", _brackets),
    Domain("arithmetic", "A", _arithmetic),
    Domain("palindrome", "P", _palindrome),
    Domain("counting", "N", _counting),
    Domain("shift_qa", "Q", _shift),
)
DOMAIN_NAMES = tuple(d.name for d in DOMAINS)
_BY_NAME = {d.name: d for d in DOMAINS}


@dataclass(frozen=True)
class Example:
    domain: str
    text: str
    seq: tuple  # full token sequence including <bos>/<eos>
    answer_start: int  # index in ``seq`` of the first answer token

    @classmethod
    def build(cls, domain: Domain, prompt: str, answer: str) -> "Example":
        body = encode(domain.tag + prompt + "=")
        seq = (BOS, *body, *encode(answer), EOS)
        return cls(domain.name, domain.tag + prompt + "=" + answer, seq, 1 + len(body))


@dataclass
class Corpus:
    domains: tuple
    pretrain: list
    finetune: list
    heldout: list

    def by_domain(self, split: str) -> dict[str, list]:
        out = {d: [] for d in self.domains}
        for ex in getattr(self, split):
            out[ex.domain].append(ex)
        return out


def build_corpus(
    rng: Rng,
    domains=DOMAIN_NAMES,
    pretrain_per_domain: int = 300,
    finetune_per_domain: int = 100,
    heldout_per_domain: int = 40,
) -> Corpus:
    """Three disjoint splits; no text appears in more than one of them."""
    splits = {"pretrain": [], "finetune": [], "heldout": []}
    sizes = {"pretrain": pretrain_per_domain, "finetune": finetune_per_domain, "heldout": heldout_per_domain}
    for name in domains:
        if name not in _BY_NAME:
            raise InputError(f"unknown domain {name!r}")
        dom = _BY_NAME[name]
        drng = rng.spawn("corpus", name)
        seen: set[str] = set()
        for split in ("heldout", "finetune", "pretrain"):
            got, attempts = 0, 0
            while got < sizes[split]:
                attempts += 1
                if attempts > 200 * (sizes[split] + 1):
                    raise InputError(f"domain {name!r} cannot supply {sizes[split]} distinct examples")
                prompt, answer = dom.generate(drng)
                ex = Example.build(dom, prompt, answer)
                if ex.text in seen:
                    continue
                seen.add(ex.text)
                splits[split].append(ex)
                got += 1
    return Corpus(tuple(domains), splits["pretrain"], splits["finetune"], splits["heldout"])


# -------------------------------------------------------------------- batching


def collate(examples, answer_only: bool = True) -> Batch:
    """Right-padded batch trimmed to the longest member."""
    if not examples:
        raise InputError("cannot collate an empty example list")
    L = max(len(e.seq) for e in examples) - 1
    n = len(examples)
    inputs = np.full((n, L), PAD, np.int64)
    targets = np.full((n, L), PAD, np.int64)
    weights = np.zeros((n, L), np.float32)
    for i, e in enumerate(examples):
        s = np.asarray(e.seq)
        m = len(s) - 1
        inputs[i, :m] = s[:-1]
        targets[i, :m] = s[1:]
        # target position j predicts seq[j + 1]
        start = e.answer_start - 1 if answer_only else 0
        weights[i, start:m] = 1.0
    return Batch(inputs, targets, weights)


def iter_batches(examples, batch_size: int, rng: Rng | None = None, answer_only: bool = True):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for i in range(0, len(order), batch_size):
        yield collate([examples[j] for j in order[i : i + batch_size]], answer_only)


# ----------------------------------------------------------------- partitions


def partition_iid(examples, n_clients: int, rng: Rng) -> list[list]:
    """Equal-size shards with each domain spread evenly (counts differ by at most one).

    Per domain, examples are shuffled and dealt into near-equal chunks; the
    clients that receive the larger chunks rotate so shard totals stay balanced.
    """
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    groups: dict[str, list] = {}
    for ex in examples:
        groups.setdefault(ex.domain, []).append(ex)
    shards: list[list] = [[] for _ in range(n_clients)]
    offset = 0
    for name in sorted(groups, key=lambda d: (DOMAIN_NAMES.index(d) if d in DOMAIN_NAMES else 99, d)):
        items = groups[name]
        if len(items) < n_clients:
            raise PartitionError(f"domain {name!r} has {len(items)} examples for {n_clients} clients")
        order = rng.spawn("iid", name).permutation(len(items))
        q, r = divmod(len(items), n_clients)
        pos = 0
        for j in range(n_clients):
            c = (offset + j) % n_clients
            take = q + (1 if j < r else 0)
            shards[c].extend(items[k] for k in order[pos : pos + take])
            pos += take
        offset = (offset + r) % n_clients
    return shards


def default_task_weights(n: int) -> list[float]:
    """Linearly spaced 1.0 .. 0.2, so the largest shard is 5x the smallest."""
    if n == 1:
        return [1.0]
    return [float(w) for w in np.linspace(1.0, 0.2, n)]


def partition_by_task(examples, domains=DOMAIN_NAMES, size_weights=None) -> list[list]:
    """One domain-pure shard per domain, shard i truncated to ``floor(w_i * |domain i|)``."""
    groups = {d: [] for d in domains}
    for ex in examples:
        if ex.domain in groups:
            groups[ex.domain].append(ex)
    weights = default_task_weights(len(domains)) if size_weights is None else list(size_weights)
    if len(weights) != len(domains):
        raise PartitionError(f"{len(weights)} size weights for {len(domains)} domains")
    shards = []
    for d, w in zip(domains, weights):
        items = groups[d]
        if not items:
            raise PartitionError(f"domain {d!r} is empty")
        if not 0 < w <= 1:
            raise PartitionError(f"size weight for {d!r} must be in (0, 1]")
        n = max(1, int(np.floor(w * len(items) + 1e-9)))
        shards.append(items[:n])
    return shards
