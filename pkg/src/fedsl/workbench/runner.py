"""Build simulations from an ExperimentConfig, run them, sweep them, write CSV."""

from __future__ import annotations

import copy
import csv
import dataclasses
import functools
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fedsl import adapt_opt, frameworks, netphys, nn_core
from fedsl.errors import ConfigError, FedSLError
from fedsl.frameworks import ClientSpec, ClusterSpec, FrameworkKind, Setup
from fedsl.metrics import CSV_COLUMNS, MetricsRow, MetricsTable
from fedsl.netphys import ChannelParams, DeviceProfile, WiredLink
from fedsl.sim_core import rng_stream
from fedsl.split_model import SplitPlan
from fedsl.workbench.config import ExperimentConfig, from_dict, set_pointer
from fedsl.workbench.data import gen_blobs, partition_dirichlet, partition_uniform


def build_setup(cfg: ExperimentConfig) -> Setup:
    fw = cfg.framework
    d = cfg.data
    seed = cfg.seed
    n_pub = fw.distill.public_size
    ds = gen_blobs(seed, d.n_train + d.n_test + n_pub, d.dims, d.classes, d.spread)
    train = ds.subset(np.arange(d.n_train))
    test = ds.subset(np.arange(d.n_train, d.n_train + d.n_test))
    public = ds.subset(np.arange(d.n_train + d.n_test, len(ds)))
    n = fw.num_clients
    if d.partition == "dirichlet":
        shards = partition_dirichlet(train, n, d.alpha, seed)
    else:
        shards = partition_uniform(train, n, seed)

    arena = cfg.arena
    dev = cfg.devices
    if dev.positions is not None:
        positions = [tuple(p) for p in dev.positions]
    else:
        place = rng_stream(seed, "placement")
        positions = [
            (float(place.uniform(0, arena.width_m)), float(place.uniform(0, arena.height_m)))
            for _ in range(n)
        ]
    speed = rng_stream(seed, "devices")
    log_h = math.log(dev.heterogeneity)
    channel = ChannelParams(**dataclasses.asdict(cfg.channel))
    distances = [max(math.dist(p, arena.server_position), 1e-3) for p in positions]
    cuts = cfg.split.hierarchical_cuts if fw.kind is FrameworkKind.HIERARCHICAL else cfg.split.cuts
    spec = cfg.model_spec()
    cluster_cfg = cfg.default_clusters() if fw.kind is FrameworkKind.HETEROGENEOUS else None
    if cluster_cfg is not None:
        # Every cluster has its own cluster-level server and spectrum.
        groups = [(list(cl.members), cfg.model_spec(cl.hidden), cl.cuts[0]) for cl in cluster_cfg]
    else:
        groups = [(list(range(n)), spec, cuts[0])]
    bandwidth = {}
    for members, gspec, cut in groups:
        bits = fw.batch_size * gspec.layers[cut - 1].out_dim * 64
        shares = share_bandwidth(cfg.server.bandwidth_allocation, channel, [distances[i] for i in members], bits)
        bandwidth.update(zip(members, shares))
    clients = []
    for i in range(n):
        slowdown = math.exp(float(speed.uniform(0.0, log_h))) if log_h > 0 else 1.0
        freq = max(dev.cpu_freq_hz / slowdown, dev.f_min)
        profile = DeviceProfile(
            cpu_freq_hz=freq,
            cycles_per_flop=dev.cycles_per_flop,
            kappa=dev.kappa,
            f_min=dev.f_min,
            f_max=dev.f_max,
            position=positions[i],
        )
        link = dataclasses.replace(channel, bandwidth_hz=bandwidth[i])
        clients.append(ClientSpec(i, train.subset(shards[i]), profile, distances[i], link))

    srv = cfg.server
    server = DeviceProfile(cpu_freq_hz=srv.cpu_freq_hz, f_min=srv.cpu_freq_hz, f_max=srv.cpu_freq_hz)
    cloud = DeviceProfile(cpu_freq_hz=srv.cloud_freq_hz, f_min=srv.cloud_freq_hz, f_max=srv.cloud_freq_hz)
    clusters = None
    if cluster_cfg is not None:
        clusters = [
            ClusterSpec(i, list(cl.members), cfg.model_spec(cl.hidden), SplitPlan(cl.cuts))
            for i, cl in enumerate(cluster_cfg)
        ]
    return Setup(
        spec=spec,
        plan=SplitPlan(cuts),
        clients=clients,
        test=test,
        seed=seed,
        params=nn_core.init_params(spec, seed),
        server=server,
        cloud=cloud,
        wired=WiredLink(srv.wired_rate_bps, srv.wired_latency_s),
        public=public,
        clusters=clusters,
    )


def share_bandwidth(mode: str, channel: ChannelParams, distances, bits: int) -> list[float]:
    """Per-robot bandwidth when ``len(distances)`` robots share one server's channel.

    ``equal_time`` sizes the shares so a smashed batch takes equally long on
    every link, ``equal`` splits evenly, ``full`` gives each robot the whole band.
    """
    total = channel.bandwidth_hz
    if mode == "full":
        return [total] * len(distances)
    if mode == "equal":
        return [total / len(distances)] * len(distances)
    if mode == "equal_time":
        se = [netphys.spectral_efficiency(channel, d) for d in distances]
        return adapt_opt.allocate_bandwidth([(bits, x) for x in se], total)
    raise ConfigError(f"unknown bandwidth allocation {mode!r}", "/server/bandwidth_allocation")


def framework_config(cfg: ExperimentConfig, budget: float | None):
    fw = copy.deepcopy(cfg.framework)
    fw.eval_every = cfg.eval_every
    if budget is not None:
        fw.time_budget_s = budget
        fw.rounds = None if cfg.time_budget_s == "auto" else cfg.rounds
    else:
        fw.time_budget_s = None
        fw.rounds = cfg.rounds
    return fw


@functools.lru_cache(maxsize=64)
def _reference_duration(reference_json: str) -> float:
    ref = from_dict(json.loads(reference_json))
    table = _run(ref, None)
    return table.final.sim_time_s


def reference_budget(cfg: ExperimentConfig) -> float:
    """Simulated duration of a loss-free sync run of ``cfg.rounds`` rounds."""
    raw = cfg.to_dict()
    raw["framework"]["kind"] = FrameworkKind.SYNC.value
    raw["framework"]["clusters"] = None
    raw["channel"]["packet_loss_rate"] = 0.0
    raw["framework"]["quant_bits"] = None
    raw["time_budget_s"] = None
    return _reference_duration(json.dumps(raw, sort_keys=True))


def _run(cfg: ExperimentConfig, budget: float | None) -> MetricsTable:
    setup = build_setup(cfg)
    return frameworks.run(framework_config(cfg, budget), setup)


def run_experiment(cfg: ExperimentConfig) -> MetricsTable:
    budget = cfg.time_budget_s
    if budget == "auto":
        budget = reference_budget(cfg)
    try:
        table = _run(cfg, budget)
    except FedSLError as exc:
        raise type(exc)(f"{cfg.framework.kind.value} run (seed {cfg.seed}) failed: {exc}") from exc
    table.extras["time_budget_s"] = budget
    return table


def _sweep_one(args) -> list[MetricsRow]:
    raw, value, seed = args
    cfg = from_dict(raw)
    table = run_experiment(cfg)
    tag = _format_value(value)
    return [dataclasses.replace(r, axis_value=tag, seed=seed) for r in table.rows]


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _axis_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def sort_rows(rows) -> list[MetricsRow]:
    return sorted(rows, key=lambda r: (r.framework, r.seed, _axis_key(r.axis_value), r.round, r.sim_time_s))


def sweep(cfg: ExperimentConfig, axis: str, values, seeds, workers: int = 1) -> MetricsTable:
    """Run every (value, seed) pair as an independent experiment."""
    base = cfg.to_dict()
    jobs = []
    for value in values:
        for seed in seeds:
            raw = set_pointer(base, axis, value)
            raw["seed"] = int(seed)
            from_dict(raw)  # fail fast on bad values
            jobs.append((raw, value, int(seed)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    rows = [r for chunk in results for r in chunk]
    return MetricsTable(sort_rows(rows), {"runs": len(jobs)})


def final_rows(table: MetricsTable) -> list[MetricsRow]:
    last: dict[tuple, MetricsRow] = {}
    for r in table.rows:
        last[(r.framework, r.seed, r.axis_value)] = r
    return sort_rows(last.values())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_to_csv(table) -> str:
    rows = table.rows if isinstance(table, MetricsTable) else list(table)
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in sort_rows(rows):
        buf.write(",".join(_fmt(getattr(r, col)) for col in CSV_COLUMNS) + "\n")
    return buf.getvalue()


def write_csv(table, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(table_to_csv(table))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            rows.append(
                MetricsRow(
                    framework=rec["framework"],
                    seed=int(rec["seed"]),
                    axis_value=rec["axis_value"],
                    round=int(rec["round"]),
                    sim_time_s=float(rec["sim_time_s"]),
                    train_loss=float(rec["train_loss"]),
                    test_acc=float(rec["test_acc"]),
                    bits_tx=int(rec["bits_tx"]),
                    energy_j=float(rec["energy_j"]),
                    max_staleness=int(rec["max_staleness"]),
                )
            )
    return rows


def check_config(cfg: ExperimentConfig) -> None:
    """Build everything a run would need without running it."""
    try:
        setup = build_setup(cfg)
        fw = framework_config(cfg, None if cfg.time_budget_s == "auto" else cfg.time_budget_s)
        if fw.kind is FrameworkKind.HETEROGENEOUS:
            frameworks.HeterogeneousSim(fw, setup)
    except FedSLError as exc:
        raise ConfigError(str(exc)) from exc
