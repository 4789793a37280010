"""Masked heterogeneous averaging, the FedAvg baseline, adapter masks, and the A/B noise gap."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .mathcore import FLOAT, Rng
from .model import LoraAdapter, SlmModel


@dataclass
class ParamSet:
    """Named adapter matrices (``<proj key>.A`` / ``.B``) with optional keep-masks."""

    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray | None] = field(default_factory=dict)

    def mask(self, key: str) -> np.ndarray:
        m = self.masks.get(key)
        return np.ones(self.values[key].shape, bool) if m is None else np.asarray(m, bool)

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.values.items()},
            {k: (None if m is None else m.copy()) for k, m in self.masks.items()},
        )


@dataclass(frozen=True)
class AggPolicy:
    include_global: bool = True
    zero_count_behavior: str = "retain_global"
    mask_source: str = "explicit_mask"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.include_global, bool):
            out.append("aggregation.include_global must be a boolean")
        if self.zero_count_behavior not in ("retain_global", "zero_out"):
            out.append("aggregation.zero_count_behavior must be retain_global or zero_out")
        if self.mask_source not in ("explicit_mask", "runtime_nonzero"):
            out.append("aggregation.mask_source must be explicit_mask or runtime_nonzero")
        return out


# ------------------------------------------------------------ adapter bridging


def adapter_to_params(adapter: LoraAdapter, keys=None) -> ParamSet:
    """Flatten an adapter into a ParamSet over ``keys`` (projection keys).

    Keys the adapter lacks (dropped blocks) appear as zeros with an all-zero
    mask so they never contribute.
    """
    keys = adapter.keys() if keys is None else keys
    ref = next(iter(adapter.A))
    values, masks = {}, {}
    for k in keys:
        if k in adapter.A:
            values[k + ".A"] = adapter.A[k]
            values[k + ".B"] = adapter.B[k]
            masks[k + ".A"] = adapter.mask_A.get(k)
            masks[k + ".B"] = adapter.mask_B.get(k)
        else:
            shape_a = (adapter.rank, adapter.A[ref].shape[1])
            shape_b = (adapter.B[ref].shape[0], adapter.rank)
            values[k + ".A"] = np.zeros(shape_a, FLOAT)
            values[k + ".B"] = np.zeros(shape_b, FLOAT)
            masks[k + ".A"] = np.zeros(shape_a, bool)
            masks[k + ".B"] = np.zeros(shape_b, bool)
    return ParamSet(values, masks)


def params_to_adapter(ps: ParamSet, adapter: LoraAdapter) -> None:
    """Write ParamSet values back into the keys ``adapter`` owns."""
    for k in adapter.keys():
        adapter.A[k] = ps.values[k + ".A"].astype(FLOAT)
        adapter.B[k] = ps.values[k + ".B"].astype(FLOAT)


# -------------------------------------------------------------------- HeteAgg


def _check_keys(global_ps: ParamSet, clients: list[ParamSet]) -> None:
    for i, c in enumerate(clients):
        if set(c.values) != set(global_ps.values):
            raise ShapeError(f"client {i} key set differs from the global set")
        for k, v in c.values.items():
            if v.shape != global_ps.values[k].shape:
                raise ShapeError(f"client {i} key {k}: shape {v.shape} vs {global_ps.values[k].shape}")
            m = c.masks.get(k)
            if m is not None and np.shape(m) != v.shape:
                raise ShapeError(f"client {i} key {k}: mask shape {np.shape(m)} vs {v.shape}")


def _contrib_mask(ps: ParamSet, key: str, policy: AggPolicy) -> np.ndarray:
    if policy.mask_source == "runtime_nonzero":
        return ps.values[key] != 0
    return ps.mask(key)


def heteagg(global_ps: ParamSet, clients: list[ParamSet], policy: AggPolicy = AggPolicy()):
    """Average each position over the participants that hold it.

    A client contributes where its mask is set; the global set contributes
    everywhere when ``policy.include_global``.  Returns ``(new_global,
    new_clients)``: the global takes the average wherever anyone contributed
    (elsewhere it keeps its value, or zero under ``zero_out``); each client
    takes the average on its own mask and keeps its prior value off it.
    Clients are accumulated in list order, in float64.
    """
    if not clients:
        raise InputError("heteagg needs at least one client")
    _check_keys(global_ps, clients)
    new_global = ParamSet({}, dict(global_ps.masks))
    new_clients = [ParamSet({}, dict(c.masks)) for c in clients]
    for key, g in global_ps.values.items():
        if policy.include_global:
            sums = g.astype(np.float64)
            counts = np.ones(g.shape, np.int64)
        else:
            sums = np.zeros(g.shape, np.float64)
            counts = np.zeros(g.shape, np.int64)
        masks = []
        for c in clients:
            m = _contrib_mask(c, key, policy)
            masks.append(m)
            sums += np.where(m, c.values[key].astype(np.float64), 0.0)
            counts += m
        avg = sums / np.maximum(counts, 1)
        fallback = g.astype(np.float64) if policy.zero_count_behavior == "retain_global" else 0.0
        new_global.values[key] = np.where(counts > 0, avg, fallback).astype(g.dtype)
        for c, m, out in zip(clients, masks, new_clients):
            out.values[key] = np.where(m, avg, c.values[key]).astype(c.values[key].dtype)
    return new_global, new_clients


def apply_global(client: ParamSet, new_global: ParamSet, policy: AggPolicy = AggPolicy()) -> ParamSet:
    """Push the global update into a client on its own mask; off-mask stays put."""
    out = ParamSet({}, dict(client.masks))
    for k, v in client.values.items():
        m = _contrib_mask(client, k, policy)
        out.values[k] = np.where(m, new_global.values[k], v).astype(v.dtype)
    return out


def fedavg(clients: list[ParamSet]) -> ParamSet:
    """Plain elementwise mean, masks ignored."""
    if not clients:
        raise InputError("fedavg needs at least one client")
    _check_keys(clients[0], clients[1:])
    out = ParamSet({}, {})
    for key, ref in clients[0].values.items():
        acc = np.zeros(ref.shape, np.float64)
        for c in clients:
            acc += c.values[key]
        out.values[key] = (acc / len(clients)).astype(ref.dtype)
    return out


# --------------------------------------------------------------- adapter masks

MASK_POLICIES = ("entrywise_random", "structural_projection", "none")


def derive_adapter_masks(model_mask, adapter_shape, policy: str, sparsity: float, rng: Rng | None = None):
    """``(mask_A, mask_B)`` for one projection.

    ``adapter_shape`` is ``(rank, d_in, d_out)``; ``model_mask`` is the base
    (d_out, d_in) keep-mask.
    """
    r, d_in, d_out = adapter_shape
    if not 0.0 <= sparsity <= 1.0:
        raise InputError(f"sparsity {sparsity} outside [0, 1]")
    if policy == "none" or (policy == "entrywise_random" and sparsity == 0.0):
        return np.ones((r, d_in), bool), np.ones((d_out, r), bool)
    if policy == "entrywise_random":
        if rng is None:
            raise InputError("entrywise_random masks need an rng")
        return rng.bernoulli(1.0 - sparsity, (r, d_in)), rng.bernoulli(1.0 - sparsity, (d_out, r))
    if policy == "structural_projection":
        mm = np.ones((d_out, d_in), bool) if model_mask is None else np.asarray(model_mask, bool)
        if mm.shape != (d_out, d_in):
            raise ShapeError(f"model mask {mm.shape} vs adapter dims {(d_out, d_in)}")
        cols_alive = mm.any(axis=0)
        rows_alive = mm.any(axis=1)
        return np.repeat(cols_alive[None, :], r, axis=0), np.repeat(rows_alive[:, None], r, axis=1)
    raise InputError(f"unknown adapter mask policy {policy!r}")


def attach_adapter_masks(model: SlmModel, policy: str, rng: Rng) -> None:
    """Derive and apply masks for every adapter target of ``model``."""
    ad = model.adapter
    for k in ad.keys():
        r, d_in = ad.A[k].shape
        d_out = ad.B[k].shape[0]
        ma, mb = derive_adapter_masks(model.masks.get(k), (r, d_in, d_out), policy, model.sparsity_level, rng.spawn(k))
        ad.mask_A[k] = None if ma.all() else ma
        ad.mask_B[k] = None if mb.all() else mb
    ad.apply_masks()


# ------------------------------------------------------------------ noise gap


def noise_free_aggregate(pairs) -> np.ndarray:
    """Mean of the products ``B_i @ A_i``; diagnostic reference only."""
    pairs = list(pairs)
    if not pairs:
        raise InputError("need at least one client")
    acc = None
    for A, B in pairs:
        A, B = np.asarray(A, np.float64), np.asarray(B, np.float64)
        if B.shape[1] != A.shape[0]:
            raise ShapeError(f"B {B.shape} and A {A.shape} do not chain")
        prod = B @ A
        if acc is not None and acc.shape != prod.shape:
            raise ShapeError("clients disagree on adapter shapes")
        acc = prod if acc is None else acc + prod
    return acc / len(pairs)


def noise_gap(pairs) -> float:
    """Frobenius distance between (mean B)(mean A) and mean(B A) for ``(A, B)`` pairs.

    Evaluated through the equivalent cross-covariance ``mean(dB dA) - mean(dB) mean(dA)``
    of offsets from the first client, which is exactly zero for identical clients.
    """
    pairs = list(pairs)
    if not pairs:
        raise InputError("need at least one client")
    As = [np.asarray(a, np.float64) for a, _ in pairs]
    Bs = [np.asarray(b, np.float64) for _, b in pairs]
    if len({a.shape for a in As}) != 1 or len({b.shape for b in Bs}) != 1:
        raise ShapeError("clients disagree on adapter shapes")
    if Bs[0].shape[1] != As[0].shape[0]:
        raise ShapeError(f"B {Bs[0].shape} and A {As[0].shape} do not chain")
    dA = [a - As[0] for a in As]
    dB = [b - Bs[0] for b in Bs]
    cross = np.mean([b @ a for a, b in zip(dA, dB)], axis=0)
    gap = cross - np.mean(dB, axis=0) @ np.mean(dA, axis=0)
    return float(np.linalg.norm(gap))
