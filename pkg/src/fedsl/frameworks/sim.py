"""Event-driven FedSL orchestration.

Every framework shares one client pipeline. A local iteration is

    device forward -> uplink smashed batch -> upper tiers forward/loss/backward/SGD
    -> downlink cut gradient -> device backward/SGD

and each framework only decides what happens when a client finishes its
``local_iters`` iterations (barrier, buffered aggregation, relay, ...).
Model math happens when the corresponding event is handled, so the shared
upper segments are updated in simulated-arrival order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedsl import netphys, nn_core
from fedsl.adapt_opt import QuantizerConfig, quantize_uniform
from fedsl.errors import InfeasibleError, ValidationError
from fedsl.frameworks.aggregation import Update, fedavg
from fedsl.frameworks.config import ClusterSpec, FrameworkConfig, FrameworkKind
from fedsl.frameworks.distill import distill_loss
from fedsl.metrics import MetricsRow, MetricsTable
from fedsl.netphys import ChannelParams, DeviceProfile, WiredLink
from fedsl.nn_core import ModelSpec, Params, copy_params
from fedsl.sim_core import Engine, EventKind, trace_enabled
from fedsl.split_model import SplitPlan, partition, segment_backward, segment_forward

PRECISION = 64

K = EventKind


def default_server() -> DeviceProfile:
    return DeviceProfile(cpu_freq_hz=2e10, f_min=1e9, f_max=1e11)


def default_cloud() -> DeviceProfile:
    return DeviceProfile(cpu_freq_hz=1e11, f_min=1e9, f_max=1e12)


@dataclass
class ClientSpec:
    id: int
    data: object  # workbench.data.Dataset
    device: DeviceProfile = field(default_factory=DeviceProfile)
    distance: float = 10.0
    channel: ChannelParams = field(default_factory=ChannelParams)


@dataclass
class Setup:
    """Everything a framework run needs besides its FrameworkConfig."""

    spec: ModelSpec
    plan: SplitPlan
    clients: list[ClientSpec]
    test: object
    seed: int = 0
    params: Params | None = None
    server: DeviceProfile = field(default_factory=default_server)
    cloud: DeviceProfile = field(default_factory=default_cloud)
    wired: WiredLink = field(default_factory=WiredLink)
    public: object | None = None
    clusters: list[ClusterSpec] | None = None
    trace: bool = False


@dataclass
class Counters:
    bits_tx: int = 0
    energy_j: float = 0.0
    max_staleness: int = 0
    smashed_up_bits: int = 0
    transmissions: int = 0
    attempts: int = 0
    timeouts: int = 0


def sample_batch(rng, n: int, batch: int) -> np.ndarray:
    if batch >= n:
        return np.arange(n)
    return rng.choice(n, size=batch, replace=False)


class ClientState:
    def __init__(self, spec: ClientSpec, params: Params):
        self.id = spec.id
        self.data = spec.data
        self.device = spec.device
        self.distance = spec.distance
        self.channel = spec.channel
        self.params = params
        self.base_round = 0
        self.in_flight = False
        self.iteration = 0
        self.rounds_done = 0
        # Bumped to invalidate any events still queued for an aborted round.
        self.epoch = 0
        self.deadline: float | None = None
        self.pending = None
        # (params, base_round) pushed by the server, adopted at the next iteration.
        self.incoming = None

    @property
    def n_samples(self) -> int:
        return len(self.data)


class Simulation:
    """Base orchestration shared by all frameworks; subclasses set the round policy."""

    kind: FrameworkKind = FrameworkKind.SYNC

    def __init__(
        self,
        cfg: FrameworkConfig,
        setup: Setup,
        *,
        spec: ModelSpec | None = None,
        plan: SplitPlan | None = None,
        params: Params | None = None,
        clients: list[ClientSpec] | None = None,
        engine: Engine | None = None,
        counters: Counters | None = None,
        tag: str | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.setup = setup
        self.spec = spec or setup.spec
        self.plan = plan or setup.plan
        self.engine = engine if engine is not None else Engine(setup.seed, trace=setup.trace or trace_enabled())
        self.counters = counters if counters is not None else Counters()
        self.tag = tag or self.kind.value
        if not self.plan.cuts:
            raise ValidationError("FedSL needs at least one cut")
        if params is None:
            if setup.params is not None and self.spec == setup.spec:
                params = setup.params
            else:
                params = nn_core.init_params(self.spec, setup.seed)
        segments = partition(self.spec, copy_params(params), self.plan)
        self.device_layers = segments[0].layers
        self.device_param_count = segments[0].param_count
        self.upper = segments[1:]
        self.global_device = segments[0].params
        self.clients = [ClientState(cs, copy_params(self.global_device)) for cs in (clients or setup.clients)]
        if not self.clients:
            raise ValidationError("no clients")
        self.by_id = {c.id: c for c in self.clients}
        self.quant = QuantizerConfig(cfg.quant_bits) if cfg.quant_bits else None
        self.cut_width = self.device_layers[-1].out_dim
        self.round = 0
        self.rows: list[MetricsRow] = []
        self.loss_trace: list[float] = []
        self._loss_sum = 0.0
        self._loss_n = 0
        self._last_loss = math.nan
        self.done = False
        self._global_fresh = True

    # ------------------------------------------------------------------ timing

    def _batch(self, c: ClientState) -> int:
        return min(self.cfg.batch_size, c.n_samples)

    def _flops(self, layers, batch: int, bwd: bool = False) -> int:
        return batch * sum(l.flops_bwd if bwd else l.flops_fwd for l in layers)

    def smashed_bits(self, batch: int) -> int:
        precision = self.quant.bits if self.quant else PRECISION
        return batch * self.cut_width * precision

    def model_bits(self) -> int:
        return self.device_param_count * PRECISION

    def upper_time(self, batch: int) -> float:
        """Time from smashed-data arrival to cut gradient leaving the server side."""
        server = self.setup.server
        if len(self.upper) == 1:
            seg = self.upper[0]
            flops = self._flops(seg.layers, batch) + self._flops(seg.layers, batch, bwd=True)
            return netphys.compute_time(server, flops)
        edge, cloud = self.upper
        hop = self.setup.wired.transfer_time(batch * edge.out_dim * PRECISION)
        return (
            netphys.compute_time(server, self._flops(edge.layers, batch))
            + hop
            + netphys.compute_time(
                self.setup.cloud,
                self._flops(cloud.layers, batch) + self._flops(cloud.layers, batch, bwd=True),
            )
            + hop
            + netphys.compute_time(server, self._flops(edge.layers, batch, bwd=True))
        )

    def expected_round_time(self, c: ClientState, with_models: bool = True) -> float:
        """Loss-free duration of one local round for ``c``."""
        b = self._batch(c)
        t_fwd = netphys.compute_time(c.device, self._flops(self.device_layers, b))
        t_bwd = netphys.compute_time(c.device, self._flops(self.device_layers, b, bwd=True))
        t_link, _ = netphys.tx_time_energy(c.channel, c.distance, self.smashed_bits(b))
        per_iter = t_fwd + 2 * t_link + self.upper_time(b) + t_bwd
        total = self.cfg.local_iters * per_iter
        if with_models:
            t_model, _ = netphys.tx_time_energy(c.channel, c.distance, self.model_bits())
            total += 2 * t_model
        return total

    # ------------------------------------------------------------ transmission

    def _deadline(self, c: ClientState) -> float | None:
        limits = [x for x in (self.cfg.time_budget_s, c.deadline) if x is not None]
        return min(limits) if limits else None

    def transmit(self, c: ClientState, bits: int, uplink: bool) -> tuple[float, bool]:
        """Retransmit ``bits`` until delivered; returns (elapsed airtime, delivered)."""
        t_air, e_air = netphys.tx_time_energy(c.channel, c.distance, bits)
        p = c.channel.packet_loss_rate
        deadline = self._deadline(c)
        max_retx = self.cfg.max_retransmissions
        if p >= 1.0 and deadline is None and max_retx is None:
            raise InfeasibleError(f"client {c.id} link never delivers and nothing bounds retries")
        rng = self.engine.rng(f"loss.client{c.id}")
        now = self.engine.clock
        elapsed = 0.0
        attempts = 0
        cnt = self.counters
        cnt.transmissions += 1
        while True:
            attempts += 1
            elapsed += t_air
            cnt.attempts += 1
            cnt.bits_tx += bits
            if uplink:
                cnt.energy_j += e_air
            if netphys.packet_delivered(rng, p):
                return elapsed, True
            if deadline is not None and now + elapsed >= deadline:
                return elapsed, False
            if max_retx is not None and attempts > max_retx:
                return elapsed, False

    def _guard(self, c: ClientState, fn):
        epoch = c.epoch

        def callback():
            if c.epoch == epoch:
                fn()

        return callback

    def send_model_up(self, c: ClientState, then, on_fail=None):
        elapsed, ok = self.transmit(c, self.model_bits(), uplink=True)
        if ok:
            self.engine.after(elapsed, K.UPLINK_DONE, c.id, self._guard(c, lambda: then(c)))
        elif on_fail is not None:
            self.engine.after(elapsed, K.UPLINK_DONE, c.id, self._guard(c, lambda: on_fail(c)))

    def send_model_down(self, c: ClientState, params: Params, then, on_fail=None):
        elapsed, ok = self.transmit(c, self.model_bits(), uplink=False)
        if ok:
            payload = copy_params(params)

            def deliver():
                c.params = payload
                then(c)

            self.engine.after(elapsed, K.DOWNLINK_DONE, c.id, self._guard(c, deliver))
        elif on_fail is not None:
            self.engine.after(elapsed, K.DOWNLINK_DONE, c.id, self._guard(c, lambda: on_fail(c)))

    # ---------------------------------------------------------- client pipeline

    def start_round(self, c: ClientState) -> None:
        c.iteration = 0
        c.in_flight = True
        self._begin_iteration(c)

    def _begin_iteration(self, c: ClientState) -> None:
        if c.incoming is not None:
            c.params, c.base_round = c.incoming
            c.incoming = None
        rng = self.engine.rng(f"batch.client{c.id}")
        idx = sample_batch(rng, c.n_samples, self.cfg.batch_size)
        x = c.data.features[idx]
        labels = c.data.labels[idx]
        act, cache = nn_core.forward_layers(self.device_layers, c.params, x)
        flops = self._flops(self.device_layers, len(idx))
        self.counters.energy_j += netphys.compute_energy(c.device, flops)
        c.pending = (labels, cache, act)
        t = netphys.compute_time(c.device, flops)
        self.engine.after(t, K.COMPUTE_DONE, c.id, self._guard(c, lambda: self._uplink(c)))

    def _uplink(self, c: ClientState) -> None:
        labels, cache, act = c.pending
        bits = len(labels) * self.cut_width * PRECISION
        if self.quant is not None:
            _, act, bits = quantize_uniform(act, self.quant)
            c.pending = (labels, cache, act)
        self.counters.smashed_up_bits += bits
        elapsed, ok = self.transmit(c, bits, uplink=True)
        if ok:
            self.engine.after(elapsed, K.UPLINK_DONE, c.id, self._guard(c, lambda: self._serve(c)))
        else:
            self.engine.after(elapsed, K.UPLINK_DONE, c.id, self._guard(c, lambda: self._iteration_done(c)))

    def _serve(self, c: ClientState) -> None:
        labels, cache, act = c.pending
        lr = self.cfg.lr
        caches = []
        h = act
        for seg in self.upper:
            h, sc = segment_forward(seg, h)
            caches.append(sc)
        loss, g = nn_core.softmax_xent(h, labels)
        for seg, sc in zip(reversed(self.upper), reversed(caches)):
            grads, g = segment_backward(seg, sc, g)
            seg.params = nn_core.sgd_step(seg.params, grads, lr)
        if len(self.upper) == 2:
            self.counters.bits_tx += 2 * len(labels) * self.upper[0].out_dim * PRECISION
        self.record_loss(loss)
        bits = g.size * PRECISION
        if self.quant is not None:
            _, g, bits = quantize_uniform(g, self.quant)
        c.pending = (labels, cache, g)
        t_srv = self.upper_time(len(labels))
        elapsed, ok = self.transmit(c, bits, uplink=False)
        # Airtime is counted from the moment the server finishes.
        if ok:
            cb = self._guard(c, lambda: self._device_backward(c))
        else:
            cb = self._guard(c, lambda: self._iteration_done(c))
        self.engine.after(t_srv + elapsed, K.DOWNLINK_DONE, c.id, cb)

    def _device_backward(self, c: ClientState) -> None:
        labels, cache, g = c.pending
        grads, _ = nn_core.backward_layers(self.device_layers, c.params, cache, g)
        c.params = nn_core.sgd_step(c.params, grads, self.cfg.lr)
        flops = self._flops(self.device_layers, len(labels), bwd=True)
        self.counters.energy_j += netphys.compute_energy(c.device, flops)
        t = netphys.compute_time(c.device, flops)
        self.engine.after(t, K.COMPUTE_DONE, c.id, self._guard(c, lambda: self._iteration_done(c)))

    def _iteration_done(self, c: ClientState) -> None:
        c.pending = None
        c.iteration += 1
        if c.iteration < self.cfg.local_iters:
            self._begin_iteration(c)
        else:
            c.in_flight = False
            c.rounds_done += 1
            self.on_local_round_done(c)

    # ------------------------------------------------------------------ policy

    def on_local_round_done(self, c: ClientState) -> None:
        raise NotImplementedError

    def begin(self) -> None:
        for c in self.clients:
            self.start_round(c)

    def round_limit_reached(self) -> bool:
        return self.cfg.rounds is not None and self.round >= self.cfg.rounds

    # ----------------------------------------------------------------- metrics

    def record_loss(self, loss: float) -> None:
        self.loss_trace.append(loss)
        self._loss_sum += loss
        self._loss_n += 1

    def eval_device_params(self) -> Params:
        if self._global_fresh:
            return self.global_device
        return fedavg([Update(c.id, c.params, c.n_samples) for c in self.clients])

    def full_params(self) -> Params:
        params = list(self.eval_device_params())
        for seg in self.upper:
            params += seg.params
        return params

    def evaluate(self) -> float:
        return nn_core.evaluate(self.spec, self.full_params(), self.setup.test)

    def emit_row(self) -> MetricsRow:
        loss = self._loss_sum / self._loss_n if self._loss_n else self._last_loss
        self._last_loss = loss
        self._loss_sum, self._loss_n = 0.0, 0
        cnt = self.counters
        row = MetricsRow(
            framework=self.tag,
            seed=self.setup.seed,
            round=self.round,
            sim_time_s=self.engine.clock,
            train_loss=loss,
            test_acc=self.evaluate(),
            bits_tx=cnt.bits_tx,
            energy_j=cnt.energy_j,
            max_staleness=cnt.max_staleness,
        )
        self.rows.append(row)
        return row

    def maybe_eval(self) -> None:
        if self.round % self.cfg.eval_every == 0:
            self.emit_row()

    def finalize(self) -> None:
        if not self.rows or self.rows[-1].round != self.round:
            self.emit_row()

    def table(self) -> MetricsTable:
        cnt = self.counters
        extras = {
            "smashed_up_bits": cnt.smashed_up_bits,
            "transmissions": cnt.transmissions,
            "attempts": cnt.attempts,
            "timeouts": cnt.timeouts,
            "rounds": self.round,
            "loss_trace": list(self.loss_trace),
            "final_params": self.full_params(),
        }
        if self.engine.trace is not None:
            extras["trace"] = list(self.engine.trace)
        return MetricsTable(list(self.rows), extras)

    def run(self) -> MetricsTable:
        self.begin()
        self.engine.run_until(
            lambda ev: ev.payload(), time_limit=self.cfg.time_budget_s, stop=lambda: self.done
        )
        self.finalize()
        return self.table()


class SyncSim(Simulation):
    """Lockstep rounds; device models averaged every ``aggregation_period`` rounds."""

    kind = FrameworkKind.SYNC

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.arrived: dict[int, bool] = {}
        self.round_started = 0.0
        self.round_durations: list[float] = []

    def _aggregating(self) -> bool:
        return (self.round + 1) % self.cfg.aggregation_period == 0

    def on_local_round_done(self, c: ClientState) -> None:
        if self._aggregating():
            self.send_model_up(c, self._arrive, on_fail=lambda c: self._arrive(c, delivered=False))
        else:
            self._arrive(c)

    def _arrive(self, c: ClientState, delivered: bool = True) -> None:
        self.arrived[c.id] = delivered
        if len(self.arrived) == len(self.clients):
            if self._aggregating():
                self.engine.after(0.0, K.AGGREGATION_DUE, "server", self._complete_round)
            else:
                self._complete_round()

    def _complete_round(self) -> None:
        aggregate = self._aggregating()
        delivered = [c for c in self.clients if self.arrived.get(c.id)]
        self.arrived = {}
        self.round += 1
        self.round_durations.append(self.engine.clock - self.round_started)
        self._global_fresh = False
        if aggregate and delivered:
            ups = [Update(c.id, c.params, c.n_samples) for c in delivered]
            self.global_device = fedavg(ups, self.cfg.staleness_exponent)
            self._global_fresh = True
            self.after_aggregation()
        else:
            self.proceed(broadcast=False)

    def after_aggregation(self) -> None:
        self.proceed(broadcast=True)

    def proceed(self, broadcast: bool) -> None:
        self.maybe_eval()
        if self.round_limit_reached():
            self.done = True
            return
        self.round_started = self.engine.clock
        for c in self.clients:
            if broadcast:
                self.send_model_down(c, self.global_device, self.start_round, on_fail=self.start_round)
            else:
                self.start_round(c)


class HierarchicalSim(SyncSim):
    """Three tiers: device layers, shared edge segment, shared cloud segment."""

    kind = FrameworkKind.HIERARCHICAL

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        if len(self.plan.cuts) != 2:
            raise ValidationError(f"hierarchical FedSL needs exactly 2 cuts, got {list(self.plan.cuts)}")


class AsyncSim(Simulation):
    """Buffered aggregation as soon as ``k`` client updates are waiting.

    Clients never idle on a barrier: after an upload the server either folds the
    update into an aggregation right away (the client then waits for the new
    model) or tells the client to keep training on its own parameters. A
    contributor that is already training again adopts the aggregate at its next
    iteration boundary.
    """

    kind = FrameworkKind.ASYNC

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        n = len(self.clients)
        if not 1 < self.cfg.k <= n:
            raise ValidationError(f"async threshold k={self.cfg.k} must satisfy 1 < k <= N={n}")
        self.buffer: dict[int, tuple[Params, int]] = {}
        self.waiting: set[int] = set()
        self.staleness_log: list[tuple[int, int, int]] = []

    def on_local_round_done(self, c: ClientState) -> None:
        self.send_model_up(c, self._buffer_update, on_fail=self.start_round)

    def _buffer_update(self, c: ClientState) -> None:
        # Keep-latest: a newer update from the same client replaces the old one.
        self.buffer[c.id] = (c.params, c.base_round)
        self.waiting.add(c.id)
        # Decided after every arrival with the same timestamp has been buffered.
        self.engine.after(0.0, K.AGGREGATION_DUE, "server", self._decide)

    def _decide(self) -> None:
        if self.done:
            return
        if len(self.buffer) >= self.cfg.k:
            self._aggregate()
            if self.done:
                return
        for i in sorted(self.waiting):
            self.start_round(self.by_id[i])
        self.waiting.clear()

    def _aggregate(self) -> None:
        ids = sorted(self.buffer)
        ups = []
        for i in ids:
            params, base = self.buffer[i]
            tau = self.round - base
            ups.append(Update(i, params, self.by_id[i].n_samples, tau))
            self.staleness_log.append((self.round + 1, i, tau))
            self.counters.max_staleness = max(self.counters.max_staleness, tau)
        self.buffer = {}
        self.global_device = fedavg(ups, self.cfg.staleness_exponent)
        self.round += 1
        self.maybe_eval()
        if self.round_limit_reached():
            self.done = True
            return
        tag = self.round
        for i in ids:
            c = self.by_id[i]
            if i in self.waiting:
                self.waiting.discard(i)
                self.send_model_down(c, self.global_device, lambda c, t=tag: self._adopt(c, t), on_fail=self.start_round)
            else:
                self._push_model(c, self.global_device, tag)

    def _adopt(self, c: ClientState, tag: int) -> None:
        c.base_round = tag
        self.start_round(c)

    def _push_model(self, c: ClientState, params: Params, tag: int) -> None:
        elapsed, ok = self.transmit(c, self.model_bits(), uplink=False)
        if not ok:
            return
        payload = copy_params(params)

        def deliver():
            c.incoming = (payload, tag)

        self.engine.after(elapsed, K.DOWNLINK_DONE, c.id, deliver)

    def table(self) -> MetricsTable:
        t = super().table()
        t.extras["staleness_log"] = list(self.staleness_log)
        return t


class SequentialSim(Simulation):
    """One client at a time; the device model is relayed round-robin."""

    kind = FrameworkKind.SEQUENTIAL

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.turn_index = 0
        self.turn_log: list[tuple[int, float, float, bool]] = []
        self._turn_start = 0.0
        self.timeouts = {
            c.id: self.cfg.timeout_factor * self.expected_round_time(c) for c in self.clients
        }

    def begin(self) -> None:
        self._start_turn()

    def _start_turn(self) -> None:
        c = self.clients[self.turn_index % len(self.clients)]
        c.epoch += 1
        self._turn_start = self.engine.clock
        c.deadline = self.engine.clock + self.timeouts[c.id]
        self.engine.at(c.deadline, K.TIMEOUT, c.id, self._guard(c, lambda: self._timed_out(c)))
        self.send_model_down(c, self.global_device, self.start_round)

    def on_local_round_done(self, c: ClientState) -> None:
        self.send_model_up(c, self._turn_done)

    def _turn_done(self, c: ClientState) -> None:
        self.global_device = copy_params(c.params)
        self._end_turn(c, ok=True)

    def _timed_out(self, c: ClientState) -> None:
        self.counters.timeouts += 1
        self._end_turn(c, ok=False)

    def _end_turn(self, c: ClientState, ok: bool) -> None:
        c.epoch += 1
        c.deadline = None
        c.in_flight = False
        self.turn_log.append((c.id, self._turn_start, self.engine.clock, ok))
        self.round += 1
        self.turn_index += 1
        self.maybe_eval()
        if self.round_limit_reached():
            self.done = True
            return
        self._start_turn()

    def eval_device_params(self) -> Params:
        return self.global_device

    def table(self) -> MetricsTable:
        t = super().table()
        t.extras["turn_log"] = list(self.turn_log)
        return t


class ClusterSim(SyncSim):
    """Sync FedSL inside one cluster of a heterogeneous deployment."""

    kind = FrameworkKind.HETEROGENEOUS

    def __init__(self, *args, parent=None, cluster_id=0, **kwargs):
        super().__init__(*args, **kwargs)
        self.parent = parent
        self.cluster_id = cluster_id

    def after_aggregation(self) -> None:
        if self.round % self.cfg.distill.period == 0:
            self.parent.park(self)
        else:
            self.proceed(broadcast=True)

    def emit_row(self) -> MetricsRow:
        row = super().emit_row()
        self.parent.cluster_row(self, row)
        return row


class HeterogeneousSim:
    """Per-cluster sync FedSL plus cloud-side distillation on a public set."""

    def __init__(self, cfg: FrameworkConfig, setup: Setup):
        cfg.validate()
        clusters = setup.clusters
        if not clusters or len(clusters) < 2:
            raise ValidationError("heterogeneous FedSL needs at least two clusters")
        seen: set[int] = set()
        for cl in clusters:
            if seen & set(cl.members):
                raise ValidationError("clusters must not share clients")
            seen |= set(cl.members)
        by_id = {cs.id: cs for cs in setup.clients}
        if seen != set(by_id):
            raise ValidationError("clusters must cover every client exactly once")
        if setup.public is None and cfg.distill.steps > 0:
            raise ValidationError("heterogeneous FedSL needs a public distillation set")
        self.cfg = cfg
        self.setup = setup
        self.engine = Engine(setup.seed, trace=setup.trace or trace_enabled())
        self.counters = Counters()
        self.sims: list[ClusterSim] = []
        for cl in clusters:
            self.sims.append(
                ClusterSim(
                    cfg,
                    setup,
                    spec=cl.spec,
                    plan=cl.plan,
                    params=cl.params,
                    clients=[by_id[i] for i in cl.members],
                    engine=self.engine,
                    counters=self.counters,
                    tag=f"heterogeneous/c{cl.id}",
                    parent=self,
                    cluster_id=cl.id,
                )
            )
        self.parked: dict[int, ClusterSim] = {}
        self.rows: list[MetricsRow] = []
        self.distill_log: list[tuple[int, float]] = []

    def park(self, sim: ClusterSim) -> None:
        self.parked[sim.cluster_id] = sim
        if len(self.parked) < len(self.sims):
            return
        rounds = {s.round for s in self.parked.values()}
        if len(rounds) != 1:
            raise RuntimeError(f"clusters parked at different rounds {sorted(rounds)}")
        d = self.cfg.distill
        n_pub = len(self.setup.public)
        bits = 0
        for s in self.sims:
            bits += n_pub * s.spec.num_classes * PRECISION
        wired = self.setup.wired
        delay = 2 * wired.transfer_time(bits)
        flops = max(
            d.steps * n_pub * sum(l.flops_fwd + l.flops_bwd for l in s.spec.layers) for s in self.sims
        )
        delay += netphys.compute_time(self.setup.server, flops)
        self.counters.bits_tx += 2 * bits
        self.engine.after(delay, K.DISTILL_DUE, "cloud", self._distill)

    def _distill(self) -> None:
        d = self.cfg.distill
        x = self.setup.public.features
        sims = [self.parked[k] for k in sorted(self.parked)]
        self.parked = {}
        logits = [nn_core.forward(s.spec, s.full_params(), x)[0] for s in sims]
        lr = self.cfg.lr if d.lr is None else d.lr
        for i, s in enumerate(sims):
            others = [z for j, z in enumerate(logits) if j != i]
            teacher = sum(others) / len(others)
            params = s.full_params()
            for _ in range(d.steps):
                z, cache = nn_core.forward(s.spec, params, x)
                _, g = distill_loss(z, teacher, None, d.temperature, d.weight)
                grads, _ = nn_core.backward(s.spec, params, cache, g)
                params = nn_core.sgd_step(params, grads, lr)
            n_dev = len(s.global_device)
            s.global_device = params[:n_dev]
            p = n_dev
            for seg in s.upper:
                m = len(seg.params)
                seg.params = params[p : p + m]
                p += m
        self.distill_log.append((sims[0].round, self.engine.clock))
        for s in sims:
            s.proceed(broadcast=True)

    def cluster_row(self, sim: ClusterSim, row: MetricsRow) -> None:
        latest = {}
        for s in self.sims:
            match = [r for r in s.rows if r.round == row.round]
            if s is sim:
                match = [row]
            if not match:
                return
            latest[s.cluster_id] = match[-1]
        self._combine(row.round, list(latest.values()))

    def _combine(self, round_: int, parts: list[MetricsRow]) -> None:
        cnt = self.counters
        self.rows.append(
            MetricsRow(
                framework=FrameworkKind.HETEROGENEOUS.value,
                seed=self.setup.seed,
                round=round_,
                sim_time_s=self.engine.clock,
                train_loss=sum(p.train_loss for p in parts) / len(parts),
                test_acc=sum(p.test_acc for p in parts) / len(parts),
                bits_tx=cnt.bits_tx,
                energy_j=cnt.energy_j,
                max_staleness=cnt.max_staleness,
            )
        )

    @property
    def done(self) -> bool:
        return all(s.done for s in self.sims)

    def run(self) -> MetricsTable:
        for s in self.sims:
            s.begin()
        self.engine.run_until(
            lambda ev: ev.payload(), time_limit=self.cfg.time_budget_s, stop=lambda: self.done
        )
        for s in self.sims:
            s.finalize()
        final_round = min(s.round for s in self.sims)
        if not self.rows or self.rows[-1].round != final_round:
            self._combine(final_round, [s.rows[-1] for s in self.sims])
        extras = {
            "clusters": {s.cluster_id: list(s.rows) for s in self.sims},
            "distill_log": list(self.distill_log),
            "smashed_up_bits": self.counters.smashed_up_bits,
            "rounds": final_round,
            "loss_trace": [x for s in self.sims for x in s.loss_trace],
        }
        if self.engine.trace is not None:
            extras["trace"] = list(self.engine.trace)
        return MetricsTable(list(self.rows), extras)
