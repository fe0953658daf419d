"""The four FedSL orchestrations plus aggregation and distillation helpers."""

from __future__ import annotations

from fedsl import nn_core
from fedsl.errors import ValidationError
from fedsl.frameworks.aggregation import Update, aggregation_weights, fedavg, staleness_weight
from fedsl.frameworks.config import ClusterSpec, DistillConfig, FrameworkConfig, FrameworkKind
from fedsl.frameworks.distill import distill_loss, soft_labels
from fedsl.frameworks.sim import (
    AsyncSim,
    ClientSpec,
    ClientState,
    Counters,
    HeterogeneousSim,
    HierarchicalSim,
    SequentialSim,
    Setup,
    Simulation,
    SyncSim,
    sample_batch,
)
from fedsl.metrics import MetricsRow, MetricsTable
from fedsl.sim_core import rng_stream


def _expect(cfg: FrameworkConfig, *kinds: FrameworkKind) -> None:
    if cfg.kind not in kinds:
        raise ValidationError(f"config kind {cfg.kind.value!r} does not match this runner")


def run_sync(cfg: FrameworkConfig, setup: Setup, **kwargs) -> MetricsTable:
    _expect(cfg, FrameworkKind.SYNC)
    return SyncSim(cfg, setup, **kwargs).run()


def run_sequential(cfg: FrameworkConfig, setup: Setup, **kwargs) -> MetricsTable:
    _expect(cfg, FrameworkKind.SEQUENTIAL)
    return SequentialSim(cfg, setup, **kwargs).run()


def run_async(cfg: FrameworkConfig, setup: Setup, **kwargs) -> MetricsTable:
    _expect(cfg, FrameworkKind.ASYNC)
    return AsyncSim(cfg, setup, **kwargs).run()


def run_hierarchical(cfg: FrameworkConfig, setup: Setup, **kwargs) -> MetricsTable:
    _expect(cfg, FrameworkKind.HIERARCHICAL)
    return HierarchicalSim(cfg, setup, **kwargs).run()


def run_heterogeneous(cfg: FrameworkConfig, setup: Setup) -> MetricsTable:
    _expect(cfg, FrameworkKind.HETEROGENEOUS)
    return HeterogeneousSim(cfg, setup).run()


RUNNERS = {
    FrameworkKind.SYNC: run_sync,
    FrameworkKind.SEQUENTIAL: run_sequential,
    FrameworkKind.ASYNC: run_async,
    FrameworkKind.HIERARCHICAL: run_hierarchical,
    FrameworkKind.HETEROGENEOUS: run_heterogeneous,
}


def run(cfg: FrameworkConfig, setup: Setup) -> MetricsTable:
    return RUNNERS[cfg.kind](cfg, setup)


class _OneRound(Simulation):
    def on_local_round_done(self, c):
        self.finished_at = self.engine.clock
        self.done = True


def local_round(cfg: FrameworkConfig, setup: Setup, client_id: int = 0):
    """Run one isolated local round of ``client_id``.

    Returns (update, duration_s, counters) where the update carries the
    device-side parameters after ``local_iters`` iterations.
    """
    client = next(cs for cs in setup.clients if cs.id == client_id)
    sim = _OneRound(cfg, setup, clients=[client])
    sim.finished_at = None
    c = sim.clients[0]
    sim.start_round(c)
    sim.engine.run_until(lambda ev: ev.payload(), time_limit=cfg.time_budget_s, stop=lambda: sim.done)
    if sim.finished_at is None:
        # Time budget ran out mid-round.
        return None, sim.engine.clock, sim.counters
    return Update(c.id, c.params, c.n_samples, 0), sim.finished_at, sim.counters


def train_centralized(spec, params, data, test, cfg: FrameworkConfig, seed: int, streams=(0,)):
    """Unsplit SGD reference.

    Each round runs ``local_iters`` steps per entry of ``streams``, drawing
    batches from the same labelled RNG streams a FedSL client with that id
    would use. Returns (rows of (round, mean_loss, test_acc), final params).
    """
    rngs = [rng_stream(seed, f"batch.client{s}") for s in streams]
    rows = []
    loss_sum, loss_n = 0.0, 0
    rounds = cfg.rounds
    r = 0
    while r < rounds:
        for rng in rngs:
            for _ in range(cfg.local_iters):
                idx = sample_batch(rng, len(data), cfg.batch_size)
                logits, cache = nn_core.forward(spec, params, data.features[idx])
                loss, g = nn_core.softmax_xent(logits, data.labels[idx])
                grads, _ = nn_core.backward(spec, params, cache, g)
                params = nn_core.sgd_step(params, grads, cfg.lr)
                loss_sum += loss
                loss_n += 1
        r += 1
        if r % cfg.eval_every == 0 or r == rounds:
            rows.append((r, loss_sum / loss_n, nn_core.evaluate(spec, params, test)))
            loss_sum, loss_n = 0.0, 0
    return rows, params


__all__ = [
    "AsyncSim",
    "ClientSpec",
    "ClientState",
    "ClusterSpec",
    "Counters",
    "DistillConfig",
    "FrameworkConfig",
    "FrameworkKind",
    "HeterogeneousSim",
    "HierarchicalSim",
    "MetricsRow",
    "MetricsTable",
    "SequentialSim",
    "Setup",
    "SyncSim",
    "Update",
    "aggregation_weights",
    "distill_loss",
    "fedavg",
    "local_round",
    "run",
    "run_async",
    "run_heterogeneous",
    "run_hierarchical",
    "run_sequential",
    "run_sync",
    "soft_labels",
    "staleness_weight",
    "train_centralized",
]
