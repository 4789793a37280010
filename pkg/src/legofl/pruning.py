"""Mask derivation: magnitude, activation-norm (|W| times input-feature norm), and layer pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import MASKABLE, SlmModel, _check_tokens, _vars, build_graph, pkey

STRATEGIES = ("magnitude", "activation_norm", "layer")
GROUPS = ("per_row", "per_matrix")


@dataclass(frozen=True)
class PruneSpec:
    strategy: str = "activation_norm"
    sparsity_level: float | None = 0.0
    keep_layers: tuple | None = None
    comparison_group: str = "per_row"
    calibration_batches: int = 4

    def __post_init__(self):
        if self.keep_layers is not None:
            object.__setattr__(self, "keep_layers", tuple(self.keep_layers))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.strategy not in STRATEGIES:
            out.append(f"prune.strategy must be one of {STRATEGIES}")
        if self.comparison_group not in GROUPS:
            out.append(f"prune.comparison_group must be one of {GROUPS}")
        if self.strategy == "layer":
            if self.keep_layers is None or self.sparsity_level not in (None, 0.0):
                out.append("layer pruning takes keep_layers and no sparsity_level")
            elif not self.keep_layers:
                out.append("prune.keep_layers must be non-empty")
        else:
            if self.keep_layers is not None:
                out.append(f"{self.strategy} pruning takes sparsity_level, not keep_layers")
            s = self.sparsity_level
            if not isinstance(s, (int, float)) or not 0.0 <= s <= 1.0:
                out.append("prune.sparsity_level must be in [0, 1]")
        if not isinstance(self.calibration_batches, int) or self.calibration_batches < 1:
            out.append("prune.calibration_batches must be >= 1")
        return out


def n_pruned(s: float, n: int) -> int:
    # the epsilon keeps e.g. (1/3)*3 from flooring to 0
    return min(n, int(math.floor(s * n + 1e-9)))


def mask_from_scores(scores: np.ndarray, s: float, group: str = "per_row") -> np.ndarray:
    """Prune the ``floor(s*N)`` lowest scores per group; ties go to the lower flat index."""
    if not 0.0 <= s <= 1.0:
        raise InputError(f"sparsity {s} outside [0, 1]")
    if group not in GROUPS:
        raise InputError(f"unknown comparison group {group!r}")
    scores = np.asarray(scores, np.float64)
    rows = scores.reshape(1, -1) if (group == "per_matrix" or scores.ndim == 1) else scores.reshape(scores.shape[0], -1)
    mask = np.ones(rows.shape, bool)
    k = n_pruned(s, rows.shape[1])
    if k:
        order = np.argsort(rows, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, False, axis=1)
    return mask.reshape(scores.shape)


def magnitude_prune(W: np.ndarray, s: float, group: str = "per_row") -> np.ndarray:
    return mask_from_scores(np.abs(W), s, group)


def activation_prune(W: np.ndarray, norms, s: float, group: str = "per_row") -> np.ndarray:
    """Scores ``|W_ij| * ||X_j||``; ``norms`` indexes the input (column) dimension."""
    if norms is None:
        raise ConfigError("activation pruning needs calibration statistics")
    W = np.asarray(W)
    norms = np.asarray(norms, np.float64)
    if norms.shape != (W.shape[-1],):
        raise ConfigError(f"calibration norms shape {norms.shape} does not cover input dim {W.shape[-1]}")
    return mask_from_scores(np.abs(W).astype(np.float64) * norms[None, :], s, group)


# ------------------------------------------------------------------ calibration


def activation_norms(X) -> np.ndarray:
    """Per-column L2 norm of an activation matrix (positions x features)."""
    X = np.asarray(X, np.float64)
    return np.sqrt((X.reshape(-1, X.shape[-1]) ** 2).sum(axis=0))


def collect_calibration(model: SlmModel, batches) -> dict[str, np.ndarray]:
    """Input-feature norms of every prunable projection over all real token positions."""
    batches = list(batches)
    if not batches:
        raise InputError("calibration sample is empty")
    sums: dict[str, np.ndarray] = {}
    pv, av = _vars(model, False, False)
    for b in batches:
        ids = _check_tokens(model.config, b.inputs)
        real = (np.asarray(b.inputs) != 0).astype(np.float64)  # exclude padding
        build_graph(model, pv, av, ids, capture=sums, weights=real)
    return {k: np.sqrt(v) for k, v in sums.items()}


# ------------------------------------------------------------------------ apply


def prune_model(model: SlmModel, spec: PruneSpec, stats: dict | None = None) -> SlmModel:
    """New model with ``spec`` applied; the input model is left untouched."""
    if spec.strategy == "layer":
        return layer_prune(model, spec.keep_layers)
    out = model.copy()
    if spec.strategy == "activation_norm" and stats is None:
        raise ConfigError("activation_norm pruning needs calibration statistics")
    for k in out.maskable_keys():
        W = out.params[k]
        if spec.strategy == "magnitude":
            m = magnitude_prune(W, spec.sparsity_level, spec.comparison_group)
        else:
            if k not in stats:
                raise ConfigError(f"no calibration statistics for {k}")
            m = activation_prune(W, stats[k], spec.sparsity_level, spec.comparison_group)
        out.masks[k] = m & out.mask_for(k)
    out.apply_masks()
    out.sparsity_level = float(spec.sparsity_level)
    return out


def layer_prune(model: SlmModel, keep_layers) -> SlmModel:
    """Keep only the listed blocks (original indices, order preserved)."""
    keep = list(keep_layers or [])
    if not keep:
        raise ConfigError("keep_layers must be non-empty")
    if any(k not in model.layer_ids for k in keep):
        raise ConfigError(f"keep_layers {keep} not a subset of {model.layer_ids}")
    if sorted(keep) != keep or len(set(keep)) != len(keep):
        raise ConfigError("keep_layers must be strictly increasing")
    out = model.copy()
    dropped = [layer for layer in model.layer_ids if layer not in keep]
    for layer in dropped:
        for name in (*MASKABLE, "attn_norm", "mlp_norm"):
            out.params.pop(pkey(layer, name), None)
            out.masks.pop(pkey(layer, name), None)
        if out.adapter is not None:
            for n in model.config.lora_targets:
                for d in (out.adapter.A, out.adapter.B, out.adapter.mask_A, out.adapter.mask_B):
                    d.pop(pkey(layer, n), None)
    out.layer_ids = keep
    out.sparsity_level = 1.0 - len(keep) / model.config.n_layers
    return out
