"""Experiment configuration: JSON schema, defaults and semantic checks."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from fedsl.errors import ConfigError, ValidationError
from fedsl.frameworks.config import DistillConfig, FrameworkConfig, FrameworkKind
from fedsl.nn_core import mlp_spec

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_opt_int1 = {"type": ["integer", "null"], "minimum": 1}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "rounds": _opt_int1,
        "time_budget_s": {"oneOf": [{"type": "null"}, _pos, {"const": "auto"}]},
        "eval_every": _int1,
        "framework": _obj(
            {
                "kind": {"enum": [k.value for k in FrameworkKind]},
                "num_clients": _int1,
                "k": _int1,
                "aggregation_period": _int1,
                "local_iters": _int1,
                "batch_size": _int1,
                "lr": {"type": "number", "minimum": 0},
                "staleness_exponent": {"type": "number", "minimum": 0},
                "max_retransmissions": {"type": ["integer", "null"], "minimum": 0},
                "quant_bits": {"type": ["integer", "null"], "minimum": 1, "maximum": 16},
                "timeout_factor": _pos,
                "distill": _obj(
                    {
                        "period": _int1,
                        "temperature": _pos,
                        "weight": {"type": "number", "minimum": 0, "maximum": 1},
                        "public_size": _int1,
                        "steps": {"type": "integer", "minimum": 0},
                        "lr": {"type": ["number", "null"], "minimum": 0},
                    }
                ),
                "clusters": {
                    "type": ["array", "null"],
                    "items": _obj(
                        {
                            "members": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                            "hidden": {"type": "array", "items": _int1},
                            "cuts": {"type": "array", "items": _int1, "minItems": 1, "maxItems": 1},
                        },
                        required=("members", "hidden", "cuts"),
                    ),
                },
            }
        ),
        "model": _obj({"hidden": {"type": "array", "items": _int1}}),
        "split": _obj(
            {
                "cuts": {"type": "array", "items": _int1, "minItems": 1, "maxItems": 1},
                "hierarchical_cuts": {"type": "array", "items": _int1, "minItems": 2, "maxItems": 2},
            }
        ),
        "channel": _obj(
            {
                "bandwidth_hz": _pos,
                "tx_power_dbm": _num,
                "noise_dbm": _num,
                "pl0_db": _num,
                "ref_dist_m": _pos,
                "pl_exponent": _pos,
                "packet_loss_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "noise_mode": {"enum": ["total", "psd"]},
            }
        ),
        "devices": _obj(
            {
                "cpu_freq_hz": _pos,
                "heterogeneity": {"type": "number", "minimum": 1},
                "cycles_per_flop": _pos,
                "kappa": _pos,
                "f_min": _pos,
                "f_max": _pos,
                "positions": {"type": ["array", "null"], "items": _point},
            }
        ),
        "server": _obj(
            {
                "cpu_freq_hz": _pos,
                "cloud_freq_hz": _pos,
                "wired_rate_bps": _pos,
                "wired_latency_s": {"type": "number", "minimum": 0},
                "bandwidth_allocation": {"enum": ["equal_time", "equal", "full"]},
            }
        ),
        "arena": _obj({"width_m": _pos, "height_m": _pos, "server_position": _point}),
        "data": _obj(
            {
                "n_train": _int1,
                "n_test": _int1,
                "dims": {"type": "integer", "minimum": 2},
                "classes": {"type": "integer", "minimum": 2},
                "spread": {"type": "number", "minimum": 0},
                "partition": {"enum": ["uniform", "dirichlet"]},
                "alpha": _pos,
            }
        ),
    }
)


@dataclass
class ChannelSection:
    bandwidth_hz: float = 1e7
    tx_power_dbm: float = 23.0
    noise_dbm: float = -85.0
    pl0_db: float = 40.0
    ref_dist_m: float = 1.0
    pl_exponent: float = 3.0
    packet_loss_rate: float = 0.0
    noise_mode: str = "total"


@dataclass
class DevicesSection:
    cpu_freq_hz: float = 1e9
    heterogeneity: float = 4.0
    cycles_per_flop: float = 1.0
    kappa: float = 1e-28
    f_min: float = 1e8
    f_max: float = 2e9
    positions: list | None = None


@dataclass
class ServerSection:
    cpu_freq_hz: float = 2e10
    cloud_freq_hz: float = 1e11
    wired_rate_bps: float = 1e9
    wired_latency_s: float = 5e-3
    # How a server splits channel.bandwidth_hz among the robots attached to it.
    bandwidth_allocation: str = "equal_time"


@dataclass
class ArenaSection:
    width_m: float = 50.0
    height_m: float = 50.0
    server_position: list = field(default_factory=lambda: [25.0, 25.0])


@dataclass
class DataSection:
    n_train: int = 4000
    n_test: int = 1000
    dims: int = 32
    classes: int = 4
    spread: float = 0.1
    partition: str = "uniform"
    alpha: float = 0.5


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [32, 64, 64, 32])


@dataclass
class SplitSection:
    cuts: list = field(default_factory=lambda: [4])
    hierarchical_cuts: list = field(default_factory=lambda: [2, 4])


@dataclass
class ClusterSection:
    members: list
    hidden: list
    cuts: list


@dataclass
class ExperimentConfig:
    framework: FrameworkConfig = field(default_factory=FrameworkConfig)
    clusters: list[ClusterSection] | None = None
    model: ModelSection = field(default_factory=ModelSection)
    split: SplitSection = field(default_factory=SplitSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    devices: DevicesSection = field(default_factory=DevicesSection)
    server: ServerSection = field(default_factory=ServerSection)
    arena: ArenaSection = field(default_factory=ArenaSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0
    rounds: int | None = 200
    time_budget_s: float | str | None = None
    eval_every: int = 5

    def model_spec(self, hidden=None):
        return mlp_spec(self.data.dims, list(hidden or self.model.hidden), self.data.classes)

    def default_clusters(self) -> list[ClusterSection]:
        if self.clusters:
            return self.clusters
        n = self.framework.num_clients
        half = n // 2
        return [
            ClusterSection(list(range(half)), list(self.model.hidden), list(self.split.cuts)),
            ClusterSection(list(range(half, n)), [32, 64, 32], [4]),
        ]

    def to_dict(self) -> dict:
        fw = asdict(self.framework)
        fw["kind"] = self.framework.kind.value
        for key in ("rounds", "eval_every", "time_budget_s"):
            fw.pop(key)
        fw["clusters"] = [asdict(c) for c in self.clusters] if self.clusters else None
        return {
            "seed": self.seed,
            "rounds": self.rounds,
            "time_budget_s": self.time_budget_s,
            "eval_every": self.eval_every,
            "framework": fw,
            "model": asdict(self.model),
            "split": asdict(self.split),
            "channel": asdict(self.channel),
            "devices": asdict(self.devices),
            "server": asdict(self.server),
            "arena": asdict(self.arena),
            "data": asdict(self.data),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        if extra:
            return ConfigError(f"unknown key {extra[0]!r}", _pointer(path + [extra[0]]))
    return ConfigError(err.message, _pointer(path))


def from_dict(raw: dict) -> ExperimentConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise _schema_error(errors[0])
    raw = copy.deepcopy(raw)
    fw = dict(raw.get("framework", {}))
    distill = DistillConfig(**fw.pop("distill", {}))
    clusters = fw.pop("clusters", None)
    cfg = ExperimentConfig(
        framework=FrameworkConfig(**fw, distill=distill),
        clusters=[ClusterSection(**c) for c in clusters] if clusters else None,
        model=ModelSection(**raw.get("model", {})),
        split=SplitSection(**raw.get("split", {})),
        channel=ChannelSection(**raw.get("channel", {})),
        devices=DevicesSection(**raw.get("devices", {})),
        server=ServerSection(**raw.get("server", {})),
        arena=ArenaSection(**raw.get("arena", {})),
        data=DataSection(**raw.get("data", {})),
        seed=raw.get("seed", 0),
        rounds=raw.get("rounds", 200),
        time_budget_s=raw.get("time_budget_s"),
        eval_every=raw.get("eval_every", 5),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks the schema cannot express; errors carry a JSON pointer."""
    fw = cfg.framework
    n = fw.num_clients
    if fw.kind is FrameworkKind.ASYNC:
        if fw.k > n:
            raise ConfigError(f"k={fw.k} exceeds num_clients={n}", "/framework/k")
        if fw.k < 2:
            raise ConfigError("async threshold mode needs k >= 2", "/framework/k")
    if cfg.rounds is None and cfg.time_budget_s is None:
        raise ConfigError("need a round limit or a time budget", "/rounds")
    if cfg.time_budget_s == "auto" and cfg.rounds is None:
        raise ConfigError("'auto' budget needs rounds for the reference run", "/rounds")
    if cfg.data.n_train < n:
        raise ConfigError(f"{cfg.data.n_train} training samples for {n} clients", "/data/n_train")
    if cfg.data.classes > cfg.data.dims and cfg.data.classes > 6:
        raise ConfigError("too many classes for the feature dimension", "/data/classes")
    n_layers = 2 * len(cfg.model.hidden) + 1
    c = cfg.split.cuts[0]
    if not 0 < c < n_layers:
        raise ConfigError(f"cut {c} outside (0, {n_layers})", "/split/cuts/0")
    c1, c2 = cfg.split.hierarchical_cuts
    if not 0 < c1 < c2 < n_layers:
        raise ConfigError(f"need 0 < c1 < c2 < {n_layers}", "/split/hierarchical_cuts")
    dev = cfg.devices
    if not dev.f_min <= dev.cpu_freq_hz <= dev.f_max:
        raise ConfigError("cpu_freq_hz must lie in [f_min, f_max]", "/devices/cpu_freq_hz")
    if dev.positions is not None:
        if len(dev.positions) != n:
            raise ConfigError(f"need {n} positions", "/devices/positions")
        for i, (x, y) in enumerate(dev.positions):
            if not (0 <= x <= cfg.arena.width_m and 0 <= y <= cfg.arena.height_m):
                raise ConfigError("position outside arena", f"/devices/positions/{i}")
    sx, sy = cfg.arena.server_position
    if not (0 <= sx <= cfg.arena.width_m and 0 <= sy <= cfg.arena.height_m):
        raise ConfigError("server outside arena", "/arena/server_position")
    if fw.kind is FrameworkKind.HETEROGENEOUS:
        clusters = cfg.default_clusters()
        if len(clusters) < 2:
            raise ConfigError("need at least two clusters", "/framework/clusters")
        seen: list[int] = []
        for i, cl in enumerate(clusters):
            seen += cl.members
            layers = 2 * len(cl.hidden) + 1
            if not 0 < cl.cuts[0] < layers:
                raise ConfigError("cluster cut out of range", f"/framework/clusters/{i}/cuts/0")
        if sorted(seen) != list(range(n)):
            raise ConfigError("clusters must partition the clients", "/framework/clusters")
    try:
        fw_copy = copy.copy(fw)
        fw_copy.rounds = cfg.rounds
        fw_copy.eval_every = cfg.eval_every
        fw_copy.time_budget_s = None if cfg.time_budget_s == "auto" else cfg.time_budget_s
        fw_copy.validate()
    except ValidationError as exc:
        raise ConfigError(str(exc), "/framework") from exc


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", "/")
    return from_dict(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return loads(text)


def set_pointer(raw: dict, pointer: str, value: Any) -> dict:
    """Return a copy of ``raw`` with the leaf at JSON pointer ``pointer`` replaced."""
    parts = [p.replace("~1", "/").replace("~0", "~") for p in pointer.strip("/").split("/")]
    if not parts or parts == [""]:
        raise ConfigError("empty axis pointer", pointer)
    out = copy.deepcopy(raw)
    node = out
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            raise ConfigError("axis does not name a config leaf", pointer)
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError("axis does not name a config leaf", pointer)
    node[parts[-1]] = value
    return out
