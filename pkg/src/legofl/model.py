"""Tiny decoder-only transformer with LoRA on selected projections."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import mathcore as mc
from .errors import ConfigError, InputError, NumericError
from .mathcore import FLOAT, Rng, Tape, Var

# projections that pruning may touch; embeddings, norms and the head never are
MASKABLE = ("wq", "wk", "wv", "wo", "w_up", "w_down")
PROJ_TARGETS = frozenset(MASKABLE)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    max_seq_len: int = 32
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: tuple = ("wq",)
    d_ff: int = 128

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len", "d_ff"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"model.{name} must be a positive integer")
        if not out and self.d_model % self.n_heads:
            out.append("model.d_model must be divisible by model.n_heads")
        if not isinstance(self.lora_rank, int) or self.lora_rank < 1:
            out.append("model.lora_rank must be >= 1")
        elif isinstance(self.d_model, int) and self.lora_rank > self.d_model:
            out.append("model.lora_rank must be <= model.d_model")
        if not isinstance(self.lora_alpha, (int, float)) or self.lora_alpha <= 0:
            out.append("model.lora_alpha must be positive")
        bad = [t for t in self.lora_targets if t not in PROJ_TARGETS]
        if bad or not self.lora_targets:
            out.append(f"model.lora_targets must be a non-empty subset of {sorted(PROJ_TARGETS)}")
        return out

    @property
    def lora_scale(self) -> float:
        return float(self.lora_alpha) / self.lora_rank

    def proj_shape(self, name: str) -> tuple[int, int]:
        """(out, in) for a projection."""
        d, f = self.d_model, self.d_ff
        return {"w_up": (f, d), "w_down": (d, f)}.get(name, (d, d))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lora_targets"] = list(self.lora_targets)
        return d


def pkey(layer: int, name: str) -> str:
    return f"layers.{layer}.{name}"


def init_base_params(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    d = config.d_model
    resid = 1.0 / np.sqrt(2.0 * config.n_layers)
    p = {
        "tok_emb": rng.normal((config.vocab_size, d), 0.5),
        "pos_emb": rng.normal((config.max_seq_len, d), 0.1),
        "norm_f": np.ones(d, FLOAT),
        "head": rng.normal((config.vocab_size, d), 1.0 / np.sqrt(d)),
    }
    for layer in range(config.n_layers):
        p[pkey(layer, "attn_norm")] = np.ones(d, FLOAT)
        p[pkey(layer, "mlp_norm")] = np.ones(d, FLOAT)
        for name in MASKABLE:
            out_dim, in_dim = config.proj_shape(name)
            std = 1.0 / np.sqrt(in_dim)
            if name in ("wo", "w_down"):
                std *= resid
            p[pkey(layer, name)] = rng.normal((out_dim, in_dim), std)
    return p


# ------------------------------------------------------------------------ LoRA


@dataclass
class LoraAdapter:
    """Low-rank pairs keyed by projection key (``layers.{i}.{name}``).

    ``A`` is (rank, d_in), ``B`` is (d_out, rank); the update is ``scale * B @ A``.
    A missing mask means dense.
    """

    rank: int
    alpha: float
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)
    mask_A: dict[str, np.ndarray | None] = field(default_factory=dict)
    mask_B: dict[str, np.ndarray | None] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return float(self.alpha) / self.rank

    def keys(self) -> list[str]:
        return list(self.A)

    def apply_masks(self) -> None:
        for k in self.A:
            if self.mask_A.get(k) is not None:
                self.A[k] = np.where(self.mask_A[k], self.A[k], FLOAT(0))
            if self.mask_B.get(k) is not None:
                self.B[k] = np.where(self.mask_B[k], self.B[k], FLOAT(0))

    def delta(self, key: str) -> np.ndarray:
        return (self.scale * (self.B[key].astype(np.float64) @ self.A[key].astype(np.float64))).astype(FLOAT)

    def copy(self) -> "LoraAdapter":
        return copy.deepcopy(self)


def init_adapter(config: ModelConfig, layer_ids, rng: Rng) -> LoraAdapter:
    """Random A, zero B; the model output is unchanged until B moves."""
    ad = LoraAdapter(config.lora_rank, config.lora_alpha)
    for layer in layer_ids:
        for name in config.lora_targets:
            out_dim, in_dim = config.proj_shape(name)
            k = pkey(layer, name)
            ad.A[k] = rng.normal((config.lora_rank, in_dim), 1.0 / np.sqrt(in_dim))
            ad.B[k] = np.zeros((out_dim, config.lora_rank), FLOAT)
            ad.mask_A[k] = None
            ad.mask_B[k] = None
    return ad


# ----------------------------------------------------------------------- model


@dataclass
class SlmModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    adapter: LoraAdapter | None = None
    sparsity_level: float = 0.0
    layer_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.layer_ids:
            self.layer_ids = list(range(self.config.n_layers))

    def maskable_keys(self) -> list[str]:
        return [pkey(layer, n) for layer in self.layer_ids for n in MASKABLE]

    def mask_for(self, key: str) -> np.ndarray:
        m = self.masks.get(key)
        return np.ones(self.params[key].shape, bool) if m is None else m

    def apply_masks(self) -> None:
        for k, m in self.masks.items():
            self.params[k] = np.where(m, self.params[k], FLOAT(0))

    def measured_sparsity(self) -> float:
        """Pruned fraction of the full architecture's prunable weights (dropped blocks count as pruned)."""
        per_layer = sum(int(np.prod(self.config.proj_shape(n))) for n in MASKABLE)
        total = per_layer * self.config.n_layers
        kept = sum(int(self.mask_for(k).sum()) for k in self.maskable_keys())
        return (total - kept) / total

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def copy(self) -> "SlmModel":
        return copy.deepcopy(self)


def new_model(config: ModelConfig, rng: Rng) -> SlmModel:
    return SlmModel(config, init_base_params(config, rng))


# --------------------------------------------------------------------- forward


class Batch(NamedTuple):
    inputs: np.ndarray  # (B, T) int
    targets: np.ndarray  # (B, T) int
    weights: np.ndarray  # (B, T) float, 0 where no loss


def _causal_bias(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"tokens must be a non-empty (batch, time) array, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError("token id out of range")
    return ids.astype(np.int64)


def lora_project(x, W, A, B, scale: float) -> Var:
    """``x W^T + scale * (x A^T) B^T``; the update never forms ``B A`` explicitly."""
    return mc.add(mc.linear(x, W), mc.scale(mc.linear(mc.linear(x, A), B), scale))


def build_graph(
    model: SlmModel,
    pv: dict[str, Var],
    av: dict[str, tuple[Var, Var]],
    ids: np.ndarray,
    capture: dict | None = None,
    weights: np.ndarray | None = None,
) -> Var:
    """Logits Var of shape (B, T, V).

    ``pv`` holds base parameters, ``av`` adapter (A, B) pairs by projection key.
    When ``capture`` is a dict, the per-feature sum of squared inputs to every
    prunable projection is accumulated into it (float64), weighted by
    ``weights`` over positions.
    """
    cfg = model.config
    B, T = ids.shape
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = model.adapter.scale if model.adapter is not None else 1.0
    dtype = pv["tok_emb"].value.dtype
    causal = _causal_bias(T, dtype)
    pos_w = None if weights is None else np.asarray(weights, np.float64)[..., None]

    def proj(x: Var, layer: int, name: str) -> Var:
        key = pkey(layer, name)
        if capture is not None:
            xv = x.value.astype(np.float64) ** 2
            if pos_w is not None:
                xv = xv * pos_w
            sq = xv.reshape(-1, xv.shape[-1]).sum(axis=0)
            capture[key] = capture.get(key, 0.0) + sq
        if key not in av:
            return mc.linear(x, pv[key])
        A, Bm = av[key]
        return lora_project(x, pv[key], A, Bm, scale)

    x = mc.add(mc.embedding(ids, pv["tok_emb"]), mc.embedding(np.arange(T), pv["pos_emb"]))
    for layer in model.layer_ids:
        h = mc.rmsnorm(x, pv[pkey(layer, "attn_norm")])

        def heads(v: Var) -> Var:
            return mc.transpose(mc.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(proj(h, layer, "wq"))
        k = heads(proj(h, layer, "wk"))
        v = heads(proj(h, layer, "wv"))
        s = mc.scale(mc.matmul(q, mc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        a = mc.softmax(mc.add(s, causal))
        o = mc.reshape(mc.transpose(mc.matmul(a, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = mc.add(x, proj(o, layer, "wo"))
        h2 = mc.rmsnorm(x, pv[pkey(layer, "mlp_norm")])
        x = mc.add(x, proj(mc.gelu(proj(h2, layer, "w_up")), layer, "w_down"))
    x = mc.rmsnorm(x, pv["norm_f"])
    return mc.linear(x, pv["head"])


def _vars(model: SlmModel, train_base: bool, train_adapter: bool):
    pv = {k: Var(v, requires_grad=train_base, name=k) for k, v in model.params.items()}
    av = {}
    if model.adapter is not None:
        for k in model.adapter.keys():
            av[k] = (
                Var(model.adapter.A[k], requires_grad=train_adapter, name=k + ".A"),
                Var(model.adapter.B[k], requires_grad=train_adapter, name=k + ".B"),
            )
    return pv, av


def forward(model: SlmModel, tokens) -> np.ndarray:
    """Logits (B, T, V) for token ids (B, T) or (T,); no tape, no mutation."""
    ids = _check_tokens(model.config, tokens)
    pv, av = _vars(model, False, False)
    return build_graph(model, pv, av, ids).value


def batch_loss(model: SlmModel, batch: Batch) -> float:
    ids = _check_tokens(model.config, batch.inputs)
    pv, av = _vars(model, False, False)
    logits = build_graph(model, pv, av, ids)
    return float(mc.cross_entropy(logits, batch.targets, batch.weights).value)


# ------------------------------------------------------------------- optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= p.dtype.type(b1)
            m += p.dtype.type(1 - b1) * g
            v *= p.dtype.type(b2)
            v += p.dtype.type(1 - b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[k] = (p - upd).astype(p.dtype)


def train_step(model: SlmModel, batch: Batch, opt: Adam, *, train_base: bool = False) -> float:
    """One optimizer step on mean cross-entropy; returns the pre-step loss.

    Adapter mode (default) leaves every base parameter untouched and re-zeroes
    masked adapter entries after the step.  ``train_base`` is the pretraining
    mode: base parameters move, no adapter is involved.
    """
    ids = _check_tokens(model.config, batch.inputs)
    if ids.shape[0] == 0 or np.asarray(batch.weights).sum() <= 0:
        raise InputError("empty batch")
    if not train_base and model.adapter is None:
        raise InputError("model has no adapter to train")
    pv, av = _vars(model, train_base, not train_base)
    if train_base:
        av = {}
    with Tape() as tape:
        logits = build_graph(model, pv, av, ids)
        loss = mc.cross_entropy(logits, batch.targets, batch.weights)
        tape.backward(loss)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    if train_base:
        opt.step(model.params, tape.gradients(pv))
        model.apply_masks()
    else:
        ad = model.adapter
        params = {}
        grads = {}
        for k, (A, Bv) in av.items():
            params[k + ".A"], grads[k + ".A"] = ad.A[k], A.grad if A.grad is not None else np.zeros_like(A.value)
            params[k + ".B"], grads[k + ".B"] = ad.B[k], Bv.grad if Bv.grad is not None else np.zeros_like(Bv.value)
        opt.step(params, grads)
        for k in av:
            ad.A[k] = params[k + ".A"]
            ad.B[k] = params[k + ".B"]
        ad.apply_masks()
    return value


def base_gradients(model: SlmModel, batch: Batch) -> dict[str, np.ndarray]:
    """Gradients reaching base parameters in fine-tuning mode (all zeros by construction)."""
    ids = _check_tokens(model.config, batch.inputs)
    pv, av = _vars(model, False, True)
    with Tape() as tape:
        logits = build_graph(model, pv, av, ids)
        tape.backward(mc.cross_entropy(logits, batch.targets, batch.weights))
    return tape.gradients(pv)


# ----------------------------------------------------------------------- merge


def merge_adapter(model: SlmModel) -> dict[str, np.ndarray]:
    """Base parameters with ``scale * B @ A`` folded in and the base mask re-applied."""
    merged = {k: v.copy() for k, v in model.params.items()}
    if model.adapter is None:
        return merged
    for k in model.adapter.keys():
        ad = model.adapter
        w = merged[k].astype(np.float64) + ad.scale * (ad.B[k].astype(np.float64) @ ad.A[k].astype(np.float64))
        merged[k] = np.where(model.mask_for(k), w, 0.0).astype(FLOAT)
    return merged


def merged_model(model: SlmModel) -> SlmModel:
    out = SlmModel(
        model.config,
        merge_adapter(model),
        {k: m.copy() for k, m in model.masks.items()},
        None,
        model.sparsity_level,
        list(model.layer_ids),
    )
    return out
