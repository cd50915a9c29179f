"""Training loops for the federated, centralized and individual settings.

Randomness is never shared between actors: every client draws from a
generator derived from ``(seed, round, client_id)``, so results do not depend
on the order in which parallel clients finish. Clients keep their Adam
moments between the rounds they take part in; with a single client and
FedAvg this makes a federated run coincide exactly with centralized
training over ``rounds * local_epochs`` epochs.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from . import models, secure
from .aggregators import make_aggregator
from .config import ExperimentConfig
from .datasets import Case, FederatedDataset
from .errors import ConfigError, EmptyDatasetError
from .nn import AdamState, ModelParams, adam_step
from .samplers import ClientProfile, Sampler

logger = logging.getLogger(__name__)

LABELS = (-1, 0, 1)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


@dataclass
class RoundUpdate:
    client_id: str
    params: np.ndarray | secure.CipherVector
    num_samples: int
    local_steps: int
    train_loss_sum: float
    divergence_l2: float = 0.0
    epoch_loss_sum: float = 0.0

    def __post_init__(self):
        if self.num_samples < 1 or self.local_steps < 1:
            raise ValueError("num_samples and local_steps must be positive")
        if not math.isfinite(self.train_loss_sum) or self.train_loss_sum < 0:
            raise ValueError("train_loss_sum must be finite and non-negative")


@dataclass
class MetricsReport:
    auc: float | None
    ap: float | None
    sireos: float | None
    test_loss: float
    loss_by_label: dict[int, float | None]
    count_by_label: dict[int, int]


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    metrics: MetricsReport
    participants: tuple[str, ...] = ()


@dataclass
class TrainingHistory:
    setting: str
    records: list[RoundRecord] = field(default_factory=list)
    params: ModelParams | None = None
    per_client: dict[str, TrainingHistory] = field(default_factory=dict)
    dataset: FederatedDataset | None = None

    @property
    def final(self) -> MetricsReport:
        return self.records[-1].metrics


def build_model_spec(config: ExperimentConfig, input_dim: int) -> models.ModelSpec:
    m = config.model
    if m.type == "ae":
        return models.AutoEncoderSpec(input_dim, m.hidden_dim, m.dropout, m.decoder_dropout)
    return models.VAESpec(
        input_dim, m.hidden_dim, m.dropout, m.decoder_dropout, m.latent_dim, m.kl_weight
    )


class Evaluator:
    """Scores an evaluation set; caches the score-independent SIREOS part."""

    def __init__(self, cases: Sequence[Case], spec, sireos_k: int = 10, sireos_percentile: float = 1.0):
        if not cases:
            raise EmptyDatasetError("evaluation set is empty")
        self.cases = list(cases)
        self.spec = spec
        self.x = np.stack([c.features for c in self.cases])
        self.targets = np.array([c.target for c in self.cases])
        self.labelled = self.targets >= 0
        self.similarities = (
            M.sireos_similarities(self.x, sireos_k, sireos_percentile) if len(self.cases) > 1 else None
        )

    def __call__(self, params: ModelParams) -> MetricsReport:
        scores = models.sample_scores(params, self.spec, self.x)
        y = self.targets[self.labelled]
        s = scores[self.labelled]
        auc = M.auc_roc(s, y) if y.size else None
        ap = M.average_precision(s, y) if y.size and len(set(y.tolist())) == 2 else None
        sir = None
        if self.similarities is not None and scores.sum() > 0:
            sir = M.sireos_index(scores, self.similarities)
        by_label = {}
        counts = {}
        for label in LABELS:
            mask = self.targets == label
            counts[label] = int(mask.sum())
            by_label[label] = float(scores[mask].mean()) if mask.any() else None
        return MetricsReport(auc, ap, sir, float(scores.mean()), by_label, counts)


def evaluate(params: ModelParams, spec, cases: Sequence[Case], sireos_k: int = 10) -> MetricsReport:
    """Score every case; AUC/AP use only labelled (0/1) cases, SIREOS uses all."""
    return Evaluator(cases, spec, sireos_k)(params)


def _train_epochs(
    x: np.ndarray,
    w: ModelParams,
    adam: AdamState,
    spec,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    on_epoch: Callable[[ModelParams], None] | None = None,
) -> tuple[ModelParams, AdamState, float, int]:
    n = x.shape[0]
    steps = 0
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = x[order[start : start + batch_size]]
            loss, grad = models.loss_and_grad(w, spec, batch, rng, training=True)
            w, adam = adam_step(w, grad, adam, lr)
            epoch_loss += loss * batch.shape[0]
            steps += 1
        if on_epoch is not None:
            on_epoch(w)
    return w, adam, epoch_loss, steps


def local_training(
    cases: Sequence[Case],
    w: ModelParams,
    spec,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    adam: AdamState | None = None,
    client_id: str | None = None,
) -> tuple[RoundUpdate, AdamState]:
    """``epochs`` passes of shuffled mini-batch Adam over the client's training cases.

    The returned loss sum is measured on the training cases after training,
    in evaluation mode.
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    if not cases:
        raise EmptyDatasetError("client has no training cases")
    x = np.stack([c.features for c in cases])
    adam = adam if adam is not None else AdamState.fresh(len(w))
    new_w, adam, epoch_loss, steps = _train_epochs(x, w, adam, spec, epochs, batch_size, lr, rng)
    update = RoundUpdate(
        client_id=client_id or cases[0].client_id,
        params=new_w.values,
        num_samples=x.shape[0],
        local_steps=steps,
        train_loss_sum=float(models.sample_scores(new_w, spec, x).sum()),
        divergence_l2=float(np.linalg.norm(new_w.values - w.values)),
        epoch_loss_sum=float(epoch_loss),
    )
    return update, adam


def _check_compatible(config: ExperimentConfig) -> None:
    from .aggregators import LINEAR_AGGREGATORS

    if config.fhe.enabled and config.agg.id not in LINEAR_AGGREGATORS:
        raise ConfigError(f"aggregator {config.agg.id!r} cannot run on encrypted updates")


def _feature_std(cases: Sequence[Case]) -> float:
    x = np.stack([c.features for c in cases])
    return float(x.std(axis=0).mean())


def run_federated(
    config: ExperimentConfig, dataset: FederatedDataset, seed: int | None = None
) -> TrainingHistory:
    """Sample, broadcast, train locally and aggregate for ``train.rounds`` rounds."""
    config = config.resolved()
    _check_compatible(config)
    seed = config.run.seeds[0] if seed is None else seed
    t = config.train
    spec = build_model_spec(config, dataset.feature_count)
    pool = [cid for cid in dataset.client_ids if dataset.clients[cid].train]
    for cid in dataset.client_ids:
        if cid not in pool:
            logger.warning("client %s has no training cases and is excluded", cid)
    if not pool:
        raise EmptyDatasetError("no client has training cases")

    w = models.init_model(spec, derive_rng(seed, "init"))
    profiles = {
        cid: ClientProfile(cid, len(dataset.clients[cid].train), _feature_std(dataset.clients[cid].train))
        for cid in pool
    }
    aggregator = make_aggregator(config.agg.id, **config.agg.hparams())
    sampler = Sampler(config.sampler.id, config.sampler.fraction, config.sampler.alpha, config.sampler.beta)
    keys = None
    if config.fhe.enabled:
        he_params = secure.HEParams(
            poly_degree=config.fhe.poly_degree,
            scale_bits=config.fhe.scale_bits,
            weight_bits=config.fhe.weight_bits,
        )
        keys = secure.keygen(he_params, derive_rng(seed, "keygen"))
    adam_states: dict[str, AdamState | None] = {cid: None for cid in pool}
    evaluator = Evaluator(dataset.eval_cases(), spec, config.metrics.sireos_k, config.metrics.sireos_percentile)
    train_x = np.stack([c.features for c in dataset.train_cases()])
    history = TrainingHistory("federated")

    def client_round(cid: str, r: int, global_w: ModelParams) -> RoundUpdate:
        rng = derive_rng(seed, r, cid)
        update, adam_states[cid] = local_training(
            dataset.clients[cid].train, global_w, spec, t.local_epochs, t.batch_size, t.lr, rng,
            adam_states[cid], cid,
        )
        if keys is not None:
            update.params = secure.encrypt(update.params, keys.public, derive_rng(seed, r, cid, "he"))
        return update

    executor = ThreadPoolExecutor(max_workers=t.workers) if t.workers > 1 else None
    try:
        for r in range(1, t.rounds + 1):
            selected = sampler.select([profiles[c] for c in pool], r, derive_rng(seed, r, "sampler"))
            if executor is None:
                updates = [client_round(cid, r, w) for cid in selected]
            else:
                updates = list(executor.map(lambda cid: client_round(cid, r, w), selected))
            if keys is not None:
                w = w.with_values(_secure_round(updates, config.agg.id, keys))
            else:
                w = w.with_values(aggregator(w.values, updates))
            sampler.observe(profiles, updates, r)
            history.records.append(
                RoundRecord(
                    r,
                    float(models.sample_scores(w, spec, train_x).mean()),
                    evaluator(w),
                    tuple(selected),
                )
            )
    finally:
        if executor is not None:
            executor.shutdown()
    history.params = w
    return history


def _secure_round(updates: Sequence[RoundUpdate], agg_id: str, keys: secure.HEKeys) -> np.ndarray:
    """Server sums ciphertexts with public material only; a client decrypts the result."""
    ciphers = [u.params for u in updates]
    if agg_id == "fedavg":
        blind = secure.secure_fedavg(ciphers, [u.num_samples for u in updates], keys.public)
    else:
        blind = secure.secure_weighted_sum(ciphers, [1.0 / len(ciphers)] * len(ciphers), keys.public)
    return secure.decrypt(blind, keys.secret)


def _train_pooled(
    config: ExperimentConfig,
    train: Sequence[Case],
    eval_cases: Sequence[Case],
    stream_id: str,
    seed: int,
    setting: str,
    feature_count: int,
) -> TrainingHistory:
    t = config.train
    spec = build_model_spec(config, feature_count)
    if not train:
        raise EmptyDatasetError("no training cases")
    x = np.stack([c.features for c in train])
    w = models.init_model(spec, derive_rng(seed, "init"))
    adam = AdamState.fresh(len(w))
    evaluator = Evaluator(eval_cases, spec, config.metrics.sireos_k, config.metrics.sireos_percentile)
    history = TrainingHistory(setting)

    def record(params: ModelParams) -> None:
        history.records.append(
            RoundRecord(
                len(history.records) + 1,
                float(models.sample_scores(params, spec, x).mean()),
                evaluator(params),
                (stream_id,),
            )
        )

    # chunks of local_epochs share one generator, matching a federated round
    done, chunk = 0, 0
    while done < t.epochs:
        chunk += 1
        n = min(t.local_epochs, t.epochs - done)
        w, adam, _, _ = _train_epochs(
            x, w, adam, spec, n, t.batch_size, t.lr, derive_rng(seed, chunk, stream_id), record
        )
        done += n
    history.params = w
    return history


def run_centralized(
    config: ExperimentConfig, dataset: FederatedDataset, seed: int | None = None
) -> TrainingHistory:
    """Pool every client's training cases; one history entry per epoch."""
    config = config.resolved()
    seed = config.run.seeds[0] if seed is None else seed
    stream = "+".join(dataset.client_ids)
    return _train_pooled(
        config, dataset.train_cases(), dataset.eval_cases(), stream, seed, "centralized",
        dataset.feature_count,
    )


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def macro_average(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average each metric over the reports where it is defined."""
    return MetricsReport(
        _mean_or_none(r.auc for r in reports),
        _mean_or_none(r.ap for r in reports),
        _mean_or_none(r.sireos for r in reports),
        float(np.mean([r.test_loss for r in reports])),
        {lab: _mean_or_none(r.loss_by_label[lab] for r in reports) for lab in LABELS},
        {lab: int(sum(r.count_by_label[lab] for r in reports)) for lab in LABELS},
    )


def run_individual(
    config: ExperimentConfig, dataset: FederatedDataset, seed: int | None = None
) -> TrainingHistory:
    """Each client trains and evaluates alone; records hold the macro-average."""
    config = config.resolved()
    seed = config.run.seeds[0] if seed is None else seed
    per_client = {}
    for cid in dataset.client_ids:
        data = dataset.clients[cid]
        if not data.train or not data.eval:
            logger.warning("client %s lacks training or evaluation cases; skipped", cid)
            continue
        per_client[cid] = _train_pooled(
            config, data.train, data.eval, cid, seed, "individual", dataset.feature_count
        )
    if not per_client:
        raise EmptyDatasetError("no client can train and evaluate on its own")
    for cid, h in per_client.items():
        if h.final.auc is None:
            logger.info("client %s has a single-class evaluation set; no AUC/AP", cid)
    history = TrainingHistory("individual", per_client=per_client)
    n_records = len(next(iter(per_client.values())).records)
    for i in range(n_records):
        recs = [h.records[i] for h in per_client.values()]
        history.records.append(
            RoundRecord(
                i + 1,
                float(np.mean([r.train_loss for r in recs])),
                macro_average([r.metrics for r in recs]),
                tuple(per_client),
            )
        )
    return history


def run_setting(config: ExperimentConfig, dataset: FederatedDataset, seed: int) -> TrainingHistory:
    runner = {
        "federated": run_federated,
        "centralized": run_centralized,
        "individual": run_individual,
    }[config.train.setting]
    return runner(config, dataset, seed)
