"""Federated LoRA fine-tuning over heterogeneous pruned clients.

One round: the scheduled clients fine-tune their adapters for one local epoch,
their adapters are aggregated (HeteAgg or FedAvg) together with the global
adapter, and the result is pushed to the global model and to every client on
its own mask.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import aggregation as agg
from .config import ExperimentConfig, FederationSpec
from .data import Corpus, build_corpus, iter_batches, partition_by_task, partition_iid
from .errors import InputError, NumericError
from .evalio import EvalSuite, MetricsRecord, evaluate
from .mathcore import Rng
from .model import Adam, SlmModel, init_adapter, merged_model, new_model, train_step
from .pruning import collect_calibration, prune_model

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    id: int
    model: SlmModel
    shard: list
    history: list = field(default_factory=list)

    @property
    def sparsity_level(self) -> float:
        return self.model.sparsity_level


@dataclass(frozen=True)
class RoundPlan:
    k: int
    selected: tuple
    total: int

    def __post_init__(self):
        if not self.selected:
            raise InputError("a round must select at least one client")
        if not 0 <= self.k < self.total:
            raise InputError(f"round {self.k} outside 0..{self.total - 1}")


def select_clients(k: int, n_clients: int, participation_rate: float) -> list[int]:
    """Cyclic schedule: ``m = max(1, floor(rate*n))`` consecutive ids starting at ``k*m``."""
    if not 0 < participation_rate <= 1:
        raise InputError("participation_rate must be in (0, 1]")
    m = max(1, int(np.floor(participation_rate * n_clients + 1e-9)))
    return sorted({(k * m + j) % n_clients for j in range(m)})


@dataclass
class FedState:
    global_model: SlmModel
    clients: list[ClientState]
    keys: list[str]

    def global_params(self) -> agg.ParamSet:
        return agg.adapter_to_params(self.global_model.adapter, self.keys)

    def client_params(self, c: ClientState) -> agg.ParamSet:
        return agg.adapter_to_params(c.model.adapter, self.keys)


# ------------------------------------------------------------------ training


def local_finetune(client: ClientState, spec: FederationSpec, rng: Rng) -> list[float]:
    """``local_epochs`` passes over the shard with a fresh Adam state."""
    opt = Adam(lr=spec.lr)
    losses = []
    for epoch in range(spec.local_epochs):
        for batch in iter_batches(client.shard, spec.batch_size, rng.spawn("epoch", epoch)):
            loss = train_step(client.model, batch, opt)
            if not np.isfinite(loss):
                raise NumericError(f"client {client.id}: non-finite loss at step {len(losses)}")
            losses.append(loss)
    return losses


def check_sparsity(state: FedState) -> None:
    """Every masked adapter entry of every client is exactly zero."""
    for c in state.clients:
        ad = c.model.adapter
        for k in ad.keys():
            for mats, masks, tag in ((ad.A, ad.mask_A, "A"), (ad.B, ad.mask_B, "B")):
                m = masks.get(k)
                if m is not None and np.any(mats[k][~m] != 0):
                    raise AssertionError(f"client {c.id} {k}.{tag}: masked entry is non-zero")


def run_round(
    state: FedState,
    plan: RoundPlan,
    policy: agg.AggPolicy,
    spec: FederationSpec,
    suite: EvalSuite | None,
    rng: Rng,
    *,
    exclude=(),
    threads: int = 1,
) -> list[MetricsRecord]:
    """Fine-tune the selected clients, aggregate, and broadcast the global update.

    Records use round ``plan.k + 1`` (round 0 is the pre-training snapshot).
    """
    rnd = plan.k + 1
    selected = [state.clients[i] for i in plan.selected]

    def work(c: ClientState):
        return local_finetune(c, spec, rng.spawn("client", c.id, "round", plan.k))

    if threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_losses = list(pool.map(work, selected))
    else:
        all_losses = [work(c) for c in selected]

    records = []
    for c, losses in zip(selected, all_losses):
        log.debug("round %d client %d: %d steps, last loss %.4f", rnd, c.id, len(losses), losses[-1] if losses else float("nan"))
        if suite is not None:
            rec = evaluate(c.model, suite, round=rnd, subject=c.id, stage="fine_tuned")
            c.history.append(rec)
            records.append(rec)

    participants = [c for c in selected if c.id not in set(exclude)]
    if participants:
        gps = state.global_params()
        cps = [state.client_params(c) for c in participants]
        if spec.aggregator == "fedavg":
            new_global = agg.fedavg(cps)
        else:
            new_global, _ = agg.heteagg(gps, cps, policy)
        agg.params_to_adapter(new_global, state.global_model.adapter)
        for c in state.clients:
            updated = agg.apply_global(state.client_params(c), new_global, policy)
            agg.params_to_adapter(updated, c.model.adapter)
            c.model.adapter.apply_masks()

    if suite is not None:
        records.append(evaluate(state.global_model, suite, round=rnd, subject="global", stage="globally_updated"))
        for c in state.clients:
            rec = evaluate(c.model, suite, round=rnd, subject=c.id, stage="globally_updated")
            c.history.append(rec)
            records.append(rec)
    return records


# ---------------------------------------------------------------- experiment


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    base: SlmModel
    global_model: SlmModel
    final_model: SlmModel
    clients: list[ClientState]
    records: list[MetricsRecord]
    pretrain_curve: list[float]
    round_globals: list[SlmModel]
    pruned: list[SlmModel]


def pretrain(config: ExperimentConfig, corpus: Corpus, rng: Rng) -> tuple[SlmModel, list[float]]:
    """Centralized next-token training of the dense base on the pretraining split."""
    spec = config.pretrain
    model = new_model(config.model, rng.spawn("init"))
    opt = Adam(lr=spec.lr)
    curve: list[float] = []
    epoch = 0
    while len(curve) < spec.steps:
        for batch in iter_batches(corpus.pretrain, spec.batch_size, rng.spawn("pretrain", epoch)):
            loss = train_step(model, batch, opt, train_base=True)
            if not np.isfinite(loss):
                raise NumericError(f"pretraining diverged at step {len(curve)}")
            curve.append(loss)
            if len(curve) >= spec.steps:
                break
        epoch += 1
    return model, curve


def make_corpus(config: ExperimentConfig) -> Corpus:
    c = config.corpus
    return build_corpus(
        Rng(config.seed, ("data",)), c.domains, c.pretrain_per_domain, c.finetune_per_domain, c.heldout_per_domain
    )


def make_shards(config: ExperimentConfig, corpus: Corpus, rng: Rng) -> list[list]:
    if config.partition.mode == "iid":
        return partition_iid(corpus.finetune, config.n_clients, rng.spawn("partition"))
    return partition_by_task(corpus.finetune, corpus.domains, config.partition.size_weights)


def build_clients(config: ExperimentConfig, base: SlmModel, corpus: Corpus, rng: Rng) -> FedState:
    """Prune the base per client, attach masked copies of one shared adapter init."""
    calib = None
    if any(s.strategy == "activation_norm" for s in config.clients):
        n_batches = max(s.calibration_batches for s in config.clients)
        batches = list(iter_batches(corpus.pretrain, 32, rng.spawn("calibration")))[:n_batches]
        calib = collect_calibration(base, batches)

    global_model = base.copy()
    global_model.masks = {}
    global_model.sparsity_level = 0.0
    global_model.adapter = init_adapter(config.model, range(config.model.n_layers), rng.spawn("adapter"))
    keys = global_model.adapter.keys()

    shards = make_shards(config, corpus, rng)
    clients = []
    for i, spec in enumerate(config.clients):
        m = prune_model(base, spec, calib)
        ad = global_model.adapter.copy()
        for k in list(ad.keys()):
            if int(k.split(".")[1]) not in m.layer_ids:
                for d in (ad.A, ad.B, ad.mask_A, ad.mask_B):
                    d.pop(k, None)
        m.adapter = ad
        if spec.strategy != "layer":
            agg.attach_adapter_masks(m, config.federation.adapter_mask_policy, rng.spawn("adapter_mask", i))
        clients.append(ClientState(i, m, shards[i]))
    return FedState(global_model, clients, keys)


def run_experiment(
    config: ExperimentConfig,
    base: SlmModel | None = None,
    *,
    threads: int = 1,
    on_round: Callable[[int, FedState], None] | None = None,
) -> ExperimentResult:
    rng = Rng(config.seed, ("experiment",))
    corpus = make_corpus(config)
    curve: list[float] = []
    if base is None:
        base, curve = pretrain(config, corpus, Rng(config.seed, ("base",)))
    if base.config != config.model:
        raise InputError("base checkpoint architecture does not match the config's model section")
    suite = EvalSuite.from_corpus(corpus, config.model.vocab_size)
    state = build_clients(config, base, corpus, rng)
    pruned = [c.model.copy() for c in state.clients]

    records = [evaluate(state.global_model, suite, round=0, subject="global", stage="pruned")]
    for c in state.clients:
        rec = evaluate(c.model, suite, round=0, subject=c.id, stage="pruned")
        c.history.append(rec)
        records.append(rec)

    fed = config.federation
    round_globals = []
    for k in range(fed.rounds):
        plan = RoundPlan(k, tuple(select_clients(k, config.n_clients, fed.participation_rate)), fed.rounds)
        records += run_round(
            state, plan, config.aggregation, fed, suite, rng.spawn("round", k),
            exclude=config.exclude_clients, threads=threads,
        )
        check_sparsity(state)
        round_globals.append(state.global_model.copy())
        if on_round is not None:
            on_round(k, state)
        log.info("%s round %d/%d: global loss %.4f", config.name, k + 1, fed.rounds, records[-1 - len(state.clients)].average)

    final = merged_model(state.global_model)
    return ExperimentResult(config, base, state.global_model, final, state.clients, records, curve, round_globals, pruned)
