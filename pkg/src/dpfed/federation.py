"""Curator/client orchestration of differentially private federated averaging.

Each round the server samples m_t of K clients, the sampled clients run
local mini-batch SGD, and the server folds their updates through the
Gaussian-mechanism average (median-norm clipping bound, noise scaled to
it). A moments accountant is charged once per executed round and the
run stops as soon as charging the next round would push delta past the
configured threshold. With ``dp=None`` the same loop degenerates to the
non-private FedAvg baseline: all clients, no clipping, no noise, no
accountant.

Determinism: every random stream is derived from the master seed --
sampling from (seed, round, tag), client k's local shuffling from
(seed, round, k), aggregation noise from (seed, round, tag) -- so
histories are bit-identical no matter how many workers run the client
updates.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import model
from .data import ClientPartition, Dataset, shard_non_iid
from .dp import (
    ClientUpdate,
    DpConfig,
    MomentsAccountant,
    delta_from_moments,
    dp_average,
    median_norm,
)
from .telemetry import RoundMetrics, between_clients_variance, update_scale

log = logging.getLogger(__name__)

DEFAULT_ARCH = (784, 200, 200, 10)

# Stream tags must stay clear of client ids, which share the (seed, t, x)
# derivation tuple shape.
_TAG_SAMPLING = 2**48
_TAG_NOISE = 2**48 + 1

STOP_BUDGET = "budget_exhausted"
STOP_MAX_ROUNDS = "max_rounds"
STOP_TARGET = "target_reached"


@dataclass
class FederatedConfig:
    K: int
    B: int
    E: int
    eta: float
    dp: DpConfig | None = None
    max_rounds: int = 100
    seed: int = 0
    eval_every: int = 1
    arch: tuple = DEFAULT_ARCH
    target_accuracy: float | None = None
    workers: int = 1

    def validate(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.E < 1:
            raise ValueError(f"E must be >= 1, got {self.E}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be >= 0, got {self.max_rounds}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.dp is not None:
            self.dp.validate(self.K)


@dataclass
class TrainingHistory:
    rounds: list  # RoundMetrics per executed round
    final_params: model.ModelParams
    stop_reason: str


@dataclass
class ServerState:
    """Everything the server loop owns between rounds."""

    config: FederatedConfig
    train: Dataset
    test: Dataset
    partition: ClientPartition
    params: model.ModelParams
    accountant: MomentsAccountant | None
    rounds: list
    cc: int = 0
    stop_reason: str | None = None
    last_accuracy: float = float("nan")
    pool: ThreadPoolExecutor | None = None


def client_rng(seed: int, t: int, k: int) -> np.random.Generator:
    """The derived stream for client k at round t."""
    return np.random.default_rng([seed, t, k])


def client_update(
    k: int,
    w_t: model.ModelParams,
    partition: ClientPartition,
    dataset: Dataset,
    config: FederatedConfig,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Run E local epochs of mini-batch SGD and return the model delta.

    Returns the raw (unclipped) difference w - w_t together with its L2
    norm; clipping is the server's job. Each epoch reshuffles the
    client's points with a fresh draw from the supplied stream.
    """
    indices = partition.clients[k]
    features = dataset.features[indices]
    labels = dataset.labels[indices]
    w = w_t
    n = indices.shape[0]
    for _ in range(config.E):
        order = rng.permutation(n)
        for start in range(0, n, config.B):
            sel = order[start : start + config.B]
            batch = model.Batch(features=features[sel], labels=labels[sel])
            grad = model.backward(w, batch)
            w = model.sgd_step(w, grad, config.eta)
    delta = w.values - w_t.values
    return ClientUpdate.from_delta(delta)


def _run_clients(state: ServerState, t: int, client_ids) -> dict:
    """Train the sampled clients (possibly on a thread pool); keyed by id."""
    cfg = state.config

    def one(k):
        return k, client_update(
            k, state.params, state.partition, state.train, cfg,
            client_rng(cfg.seed, t, int(k)),
        )

    if state.pool is None:
        results = map(one, client_ids)
    else:
        results = state.pool.map(one, client_ids)
    return dict(results)


def server_round(state: ServerState, t: int) -> ServerState:
    """Execute communication round t, or refuse it if the budget is spent.

    The accountant charge is computed first (it depends only on m_t and
    sigma_t); if the post-charge delta would exceed the threshold the
    round is refused, the charge is not committed, and the run stops
    with ``budget_exhausted``.
    """
    cfg = state.config
    dp = cfg.dp
    if dp is not None:
        m_t = dp.m_at(t)
        sigma_t = dp.sigma_at(t)
        q = m_t / cfg.K
        acct = state.accountant
        tentative = acct.log_moments + acct.round_increment(q, sigma_t)
        delta = delta_from_moments(tentative, acct.epsilon)
        if delta > dp.delta_threshold:
            state.stop_reason = STOP_BUDGET
            return state
        acct.log_moments = tentative
        acct.rounds_accumulated += 1
        if sigma_t == 0:
            warnings.warn(
                f"round {t} runs with sigma=0: no noise, no privacy charged",
                stacklevel=2,
            )
    else:
        m_t = cfg.K
        sigma_t = 0.0
        delta = 0.0

    sample_rng = np.random.default_rng([cfg.seed, t, _TAG_SAMPLING])
    client_ids = np.sort(sample_rng.choice(cfg.K, size=m_t, replace=False))

    by_id = _run_clients(state, t, client_ids)
    updates = [by_id[k] for k in client_ids]

    v_c = between_clients_variance([u.delta for u in updates])
    u_s = update_scale([u.delta for u in updates])

    if dp is not None:
        bound = dp.clip_bound
        if bound is None:
            bound = median_norm([u.norm for u in updates])
        if bound == 0.0:
            warnings.warn(
                f"round {t} degenerate: all-zero median norm, model unchanged",
                stacklevel=2,
            )
            new_values = state.params.values
            bound_recorded = 0.0
        else:
            noise_rng = np.random.default_rng([cfg.seed, t, _TAG_NOISE])
            mean_update = dp_average(updates, bound, sigma_t, noise_rng)
            new_values = state.params.values + mean_update
            bound_recorded = float(bound)
    else:
        mean_update = dp_average(updates, None, 0.0, None)
        new_values = state.params.values + mean_update
        bound_recorded = float("inf")

    state.params = model.ModelParams(values=new_values, arch=state.params.arch)
    state.cc += int(m_t)

    evaluated = t % cfg.eval_every == 0
    if evaluated:
        state.last_accuracy = model.evaluate(
            state.params, state.test.features, state.test.labels
        )
    state.rounds.append(
        RoundMetrics(
            round=t,
            accuracy=state.last_accuracy,
            delta=delta,
            clip_bound=bound_recorded,
            v_c=v_c,
            u_s=u_s,
            m_t=int(m_t),
            sigma_t=float(sigma_t),
            cc_cumulative=state.cc,
        )
    )
    if (
        evaluated
        and cfg.target_accuracy is not None
        and state.last_accuracy >= cfg.target_accuracy
    ):
        state.stop_reason = STOP_TARGET
    return state


def init_state(config: FederatedConfig, train: Dataset, test: Dataset) -> ServerState:
    config.validate()
    if train.features.shape[1] != config.arch[0]:
        raise ValueError(
            f"feature dim {train.features.shape[1]} does not match "
            f"arch input {config.arch[0]}"
        )
    partition = shard_non_iid(train, config.K, config.seed)
    params = model.init_params(config.arch, config.seed)
    accountant = None
    if config.dp is not None:
        accountant = MomentsAccountant(
            epsilon=config.dp.epsilon, lambda_max=config.dp.lambda_max
        )
    state = ServerState(
        config=config,
        train=train,
        test=test,
        partition=partition,
        params=params,
        accountant=accountant,
        rounds=[],
    )
    if config.eval_every > 1:
        state.last_accuracy = model.evaluate(params, test.features, test.labels)
    return state


def run_federated(
    config: FederatedConfig, train: Dataset, test: Dataset
) -> TrainingHistory:
    """Run rounds until the budget is spent, the cap is hit, or the target is reached."""
    state = init_state(config, train, test)
    pool = None
    try:
        if config.workers > 1:
            pool = ThreadPoolExecutor(max_workers=config.workers)
            state.pool = pool
        t = 0
        while t < config.max_rounds and state.stop_reason is None:
            t += 1
            server_round(state, t)
        if state.stop_reason is None:
            state.stop_reason = STOP_MAX_ROUNDS
    finally:
        if pool is not None:
            pool.shutdown()
    log.info(
        "run finished: %d rounds, stop=%s, acc=%.4f, cc=%d",
        len(state.rounds), state.stop_reason, state.last_accuracy, state.cc,
    )
    return TrainingHistory(
        rounds=state.rounds, final_params=state.params, stop_reason=state.stop_reason
    )


def run_fedavg_baseline(
    config: FederatedConfig, train: Dataset, test: Dataset
) -> TrainingHistory:
    """Non-private FedAvg: every client participates, no clipping, no noise."""
    return run_federated(replace(config, dp=None), train, test)
