"""Held-out evaluation and the metrics CSV."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .data import DOMAIN_NAMES, Corpus, collate
from .errors import InputError, SchemaError
from .model import Batch, SlmModel, forward

METRICS = ("loss", "perplexity", "accuracy")
STAGES = ("pruned", "fine_tuned", "globally_updated")
FIXED_HEAD = ("round", "subject", "stage")


def _q(x: float) -> float:
    """Round to 9 significant digits so CSV text round-trips exactly."""
    return float(f"{float(x):.9g}")


@dataclass
class MetricsRecord:
    round: int
    subject: str
    stage: str
    values: dict[str, float]
    average: float = field(default=float("nan"))

    def __post_init__(self):
        self.subject = str(self.subject)
        self.values = {k: _q(v) for k, v in self.values.items()}
        # mean of the stored per-domain values, kept at full precision
        self.average = float(np.mean(list(self.values.values()))) if self.values else float("nan")


@dataclass
class EvalSuite:
    batches: dict[str, Batch]
    vocab_size: int = 64

    @property
    def domains(self) -> tuple:
        return tuple(self.batches)

    @classmethod
    def from_corpus(cls, corpus: Corpus, vocab_size: int = 64) -> "EvalSuite":
        by = corpus.by_domain("heldout")
        return cls({d: collate(by[d]) for d in corpus.domains if by[d]}, vocab_size)


def _domain_metrics(logits: np.ndarray, b: Batch) -> dict[str, float]:
    V = logits.shape[-1]
    l2 = logits.reshape(-1, V).astype(np.float64)
    t = b.targets.reshape(-1)
    w = b.weights.reshape(-1).astype(np.float64)
    z = l2 - l2.max(axis=1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(t)), t]
    loss = float((nll * w).sum() / w.sum())
    acc = float(((l2.argmax(axis=1) == t) * w).sum() / w.sum())
    return {"loss": loss, "perplexity": float(np.exp(loss)), "accuracy": acc}


def evaluate_all(model: SlmModel, suite: EvalSuite) -> dict[str, dict[str, float]]:
    """metric kind -> domain -> value."""
    if model.config.vocab_size != suite.vocab_size:
        raise InputError(f"model vocabulary {model.config.vocab_size} != suite vocabulary {suite.vocab_size}")
    out = {m: {} for m in METRICS}
    for d, b in suite.batches.items():
        for m, v in _domain_metrics(forward(model, b.inputs), b).items():
            out[m][d] = v
    return out


def evaluate(
    model: SlmModel,
    suite: EvalSuite,
    metric: str = "loss",
    *,
    round: int = 0,
    subject="global",
    stage: str = "pruned",
) -> MetricsRecord:
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}")
    return MetricsRecord(round, subject, stage, evaluate_all(model, suite)[metric])


# ------------------------------------------------------------------------ CSV


def metrics_header(domains=DOMAIN_NAMES) -> list[str]:
    return [*FIXED_HEAD, *domains, "average"]


def write_metrics(records, path, domains=None) -> Path:
    records = list(records)
    if domains is None:
        domains = tuple(records[0].values) if records else DOMAIN_NAMES
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(metrics_header(domains))
            for r in records:
                if tuple(r.values) != tuple(domains):
                    raise SchemaError(f"record domains {tuple(r.values)} != {tuple(domains)}")
                w.writerow([r.round, r.subject, r.stage, *(repr(r.values[d]) for d in domains), repr(r.average)])
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e}") from e
    return path


def read_header(path) -> list[str]:
    with Path(path).open(newline="") as fh:
        return next(csv.reader(fh), [])


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise OSError(f"cannot read metrics from {path}: {e}") from e
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty metrics file")
    head = rows[0]
    if tuple(head[:3]) != FIXED_HEAD or head[-1] != "average" or len(head) < 5:
        raise SchemaError(f"{path}: unexpected metrics header {head}")
    domains = head[3:-1]
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise SchemaError(f"{path}:{i}: {len(row)} fields, header has {len(head)}")
        try:
            rec = MetricsRecord(int(row[0]), row[1], row[2], {d: float(v) for d, v in zip(domains, row[3:-1])})
            stated = float(row[-1])
        except ValueError as e:
            raise SchemaError(f"{path}:{i}: {e}") from None
        if abs(stated - rec.average) > 1e-9:
            raise SchemaError(f"{path}:{i}: average {stated} is not the mean of the domain columns")
        out.append(rec)
    return out
