import json
import random
from pathlib import Path

import numpy as np
import pytest

from fedsl import frameworks, nn_core
from fedsl.errors import ConfigError, ValidationError
from fedsl.frameworks import FrameworkConfig, FrameworkKind
from fedsl.metrics import MetricsRow, MetricsTable
from fedsl.netphys import ChannelParams
from fedsl.workbench import cli, runner
from fedsl.workbench.config import from_dict, load_config, loads
from fedsl.workbench.data import (
    DegeneratePartitionError,
    class_means,
    gen_blobs,
    partition_dirichlet,
    partition_uniform,
)

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures" / "configs"

SMALL = {
    "seed": 1,
    "rounds": 10,
    "eval_every": 5,
    "framework": {"kind": "sync", "num_clients": 3, "aggregation_period": 2, "local_iters": 2, "batch_size": 8, "lr": 0.05},
    "model": {"hidden": [8, 8]},
    "split": {"cuts": [2], "hierarchical_cuts": [2, 4]},
    "data": {"n_train": 150, "n_test": 60, "dims": 6, "classes": 3},
}


def small(**over) -> dict:
    raw = json.loads(json.dumps(SMALL))
    for key, val in over.items():
        if isinstance(val, dict):
            raw.setdefault(key, {}).update(val)
        else:
            raw[key] = val
    return raw


# ---------------------------------------------------------------------- data


def test_blobs_zero_spread_nearest_mean():
    ds = gen_blobs(0, 200, 5, 4, 0.0)
    means = class_means(5, 4)
    np.testing.assert_array_equal(ds.features, means[ds.labels])
    dist = ((ds.features[:, None, :] - means[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == ds.labels) == 1.0


@pytest.mark.parametrize("d,k", [(2, 2), (2, 5), (32, 4), (3, 6), (8, 8)])
def test_class_means_geometry(d, k):
    m = class_means(d, k)
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, rtol=1e-12)
    for i in range(k):
        for j in range(i):
            assert np.linalg.norm(m[i] - m[j]) >= 1 - 1e-12


def test_blobs_deterministic_and_balanced():
    a, b = gen_blobs(5, 1000, 4, 4, 0.1), gen_blobs(5, 1000, 4, 4, 0.1)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [250] * 4
    with pytest.raises(ValidationError):
        gen_blobs(0, 10, 1, 2, 0.1)


def test_default_blobs_are_learnable():
    ds = gen_blobs(0, 5000, 32, 4, 0.1)
    train = ds.subset(np.arange(4000))
    test = ds.subset(np.arange(4000, 5000))
    spec = nn_core.mlp_spec(32, [32, 64, 64, 32], 4)
    cfg = FrameworkConfig(local_iters=5, batch_size=32, lr=0.05, rounds=100, eval_every=100)
    rows, _ = frameworks.train_centralized(spec, nn_core.init_params(spec, 0), train, test, cfg, 0)
    assert rows[-1][2] >= 0.99


def test_partition_uniform():
    ds = gen_blobs(0, 100, 2, 2, 0.1)
    shards = partition_uniform(ds, 10, 0)
    assert [len(s) for s in shards] == [10] * 10
    assert sorted(np.concatenate(shards).tolist()) == list(range(100))
    with pytest.raises(ValidationError):
        partition_uniform(ds, 101, 0)
    sizes = [len(s) for s in partition_uniform(ds, 7, 0)]
    assert max(sizes) - min(sizes) <= 1


def test_partition_uniform_class_balance():
    ds = gen_blobs(0, 4000, 8, 4, 0.1)
    for shard in partition_uniform(ds, 10, 3):
        props = np.bincount(ds.labels[shard], minlength=4) / len(shard)
        assert np.all(np.abs(props - 0.25) <= 0.10)


def test_partition_dirichlet_concentrated():
    ds = gen_blobs(0, 4000, 8, 4, 0.1)
    shards = partition_dirichlet(ds, 10, 1000.0, 0)
    assert sorted(np.concatenate(shards).tolist()) == list(range(4000))
    for shard in shards:
        props = np.bincount(ds.labels[shard], minlength=4) / len(shard)
        assert np.all(np.abs(props - 0.25) <= 0.15)


def test_partition_dirichlet_skewed():
    ds = gen_blobs(0, 4000, 8, 4, 0.1)
    for seed in range(3):
        shards = partition_dirichlet(ds, 10, 0.1, seed)
        assert all(len(s) > 0 for s in shards)
        top = max((np.bincount(ds.labels[s], minlength=4) / len(s)).max() for s in shards)
        assert top >= 0.6


def test_partition_dirichlet_degenerate():
    ds = gen_blobs(0, 12, 2, 2, 0.1)
    with pytest.raises(DegeneratePartitionError):
        partition_dirichlet(ds, 12, 0.01, 0, max_retries=2)
    with pytest.raises(ValidationError):
        partition_dirichlet(ds, 3, 0.0, 0)


# -------------------------------------------------------------------- config


def test_shipped_sync_config():
    cfg = load_config(ROOT / "configs" / "fig4_sync.json")
    fw = cfg.framework
    assert fw.kind is FrameworkKind.SYNC
    assert (fw.num_clients, fw.aggregation_period, fw.local_iters, fw.lr) == (10, 25, 5, 0.001)


def test_k_above_n_names_pointer():
    with pytest.raises(ConfigError) as exc:
        from_dict({"framework": {"kind": "async", "num_clients": 10, "k": 11}})
    assert exc.value.pointer == "/framework/k"


@pytest.mark.parametrize("path", sorted((FIXTURES / "valid").glob("*.json")), ids=lambda p: p.stem)
def test_valid_fixtures_load(path):
    cfg = load_config(path)
    runner.check_config(cfg)


INVALID_POINTERS = {
    "k_too_large": "/framework/k",
    "unknown_key": "/channel/bandwith_hz",
    "negative_loss": "/channel/packet_loss_rate",
    "loss_above_one": "/channel/packet_loss_rate",
    "bad_kind": "/framework/kind",
    "cut_out_of_range": "/split/cuts/0",
    "hier_cuts_unordered": "/split/hierarchical_cuts",
    "async_k_one": "/framework/k",
    "distill_weight": "/framework/distill/weight",
    "position_outside": "/devices/positions/0",
    "cluster_overlap": "/framework/clusters",
    "no_stop": "/rounds",
    "bad_allocation": "/server/bandwidth_allocation",
    "auto_without_rounds": "/rounds",
    "freq_outside_bounds": "/devices/cpu_freq_hz",
    "too_few_samples": "/data/n_train",
}


@pytest.mark.parametrize("path", sorted((FIXTURES / "invalid").glob("*.json")), ids=lambda p: p.stem)
def test_invalid_fixtures_rejected(path):
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    if path.stem == "malformed":
        assert "line 3 column" in str(exc.value)
    else:
        assert exc.value.pointer == INVALID_POINTERS[path.stem]


def test_config_round_trip():
    for path in list((FIXTURES / "valid").glob("*.json")) + list((ROOT / "configs").glob("*.json")):
        cfg = load_config(path)
        again = loads(cfg.to_json())
        assert again == cfg
        assert again.to_json() == cfg.to_json()


def test_defaults_applied():
    cfg = from_dict({})
    assert cfg.framework.num_clients == 10 and cfg.rounds == 200 and cfg.eval_every == 5
    assert cfg.channel.bandwidth_hz == 1e7 and cfg.arena.width_m == 50
    assert cfg.framework.batch_size == 32


# -------------------------------------------------------------------- runner


def test_share_bandwidth_modes():
    ch = ChannelParams()
    d = [5.0, 30.0]
    assert runner.share_bandwidth("full", ch, d, 1000) == [1e7, 1e7]
    assert runner.share_bandwidth("equal", ch, d, 1000) == [5e6, 5e6]
    shares = runner.share_bandwidth("equal_time", ch, d, 1000)
    assert sum(shares) == pytest.approx(1e7, rel=1e-15)
    assert shares[1] > shares[0]
    with pytest.raises(ConfigError):
        runner.share_bandwidth("other", ch, d, 1000)


def test_build_setup_shapes():
    cfg = from_dict(small())
    setup = runner.build_setup(cfg)
    assert len(setup.clients) == 3
    assert sum(len(c.data) for c in setup.clients) == 150
    assert setup.plan.cuts == (2,)
    freqs = [c.device.cpu_freq_hz for c in setup.clients]
    assert all(2.5e8 <= f <= 1e9 for f in freqs)
    bw = sum(c.channel.bandwidth_hz for c in setup.clients)
    assert bw == pytest.approx(1e7, rel=1e-12)


def test_heterogeneous_setup_has_own_spectrum_per_cluster():
    cfg = from_dict(small(framework={"kind": "heterogeneous", "num_clients": 4}))
    setup = runner.build_setup(cfg)
    assert len(setup.clusters) == 2
    for cl in setup.clusters:
        bw = sum(setup.clients[i].channel.bandwidth_hz for i in cl.members)
        assert bw == pytest.approx(1e7, rel=1e-12)


def test_run_twice_identical_csv(tmp_path):
    cfg = from_dict(small(channel={"packet_loss_rate": 0.2}))
    runner.write_csv(runner.run_experiment(cfg), tmp_path / "a.csv")
    runner.write_csv(runner.run_experiment(from_dict(small(channel={"packet_loss_rate": 0.2}))), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("rounds,expected", [(10, [5, 10]), (12, [5, 10, 12])])
def test_row_count(rounds, expected):
    # one row per eval_every rounds, plus a final row when it falls in between
    table = runner.run_experiment(from_dict(small(rounds=rounds)))
    assert [r.round for r in table] == expected


@pytest.mark.parametrize("kind", ["sync", "sequential", "async", "hierarchical", "heterogeneous"])
def test_every_kind_runs(kind):
    over = {"framework": {"kind": kind, "k": 2}}
    table = runner.run_experiment(from_dict(small(**over)))
    assert table.final.round == 10
    times = table.column("sim_time_s")
    assert times == sorted(times)
    assert 0 <= table.final.test_acc <= 1


def test_auto_budget_matches_reference():
    raw = small(time_budget_s="auto", channel={"packet_loss_rate": 0.3})
    table = runner.run_experiment(from_dict(raw))
    ref = runner.run_experiment(from_dict(small()))
    assert table.extras["time_budget_s"] == ref.final.sim_time_s
    assert table.final.sim_time_s <= ref.final.sim_time_s


def test_sweep_single_matches_run():
    cfg = from_dict(small())
    table = runner.sweep(cfg, "/channel/packet_loss_rate", [0.0], [1])
    direct = runner.run_experiment(cfg)
    assert [(r.round, r.test_acc, r.sim_time_s) for r in table] == [(r.round, r.test_acc, r.sim_time_s) for r in direct]
    assert {r.axis_value for r in table} == {"0.0"}


def test_sweep_order_invariant():
    cfg = from_dict(small())
    values, seeds = [0.0, 0.2], [0, 1]
    a = runner.table_to_csv(runner.sweep(cfg, "/channel/packet_loss_rate", values, seeds))
    b = runner.table_to_csv(runner.sweep(cfg, "/channel/packet_loss_rate", values[::-1], seeds[::-1]))
    c = runner.table_to_csv(runner.sweep(cfg, "/channel/packet_loss_rate", values, seeds, workers=2))
    assert a == b == c
    assert len(runner.final_rows(runner.sweep(cfg, "/channel/packet_loss_rate", values, seeds))) == 4


def test_sweep_unknown_axis():
    cfg = from_dict(small())
    for axis in ("/channel/nope", "/channel", "/nothing/here"):
        with pytest.raises(ValidationError):
            runner.sweep(cfg, axis, [1], [0])


def _row(**kw):
    base = dict(framework="sync", seed=0, round=5, sim_time_s=0.1, train_loss=0.5, test_acc=0.75, bits_tx=10, energy_j=1e-3, max_staleness=0)
    base.update(kw)
    return MetricsRow(**base)


def test_csv_empty_and_one_row(tmp_path):
    runner.write_csv(MetricsTable(), tmp_path / "e.csv")
    text = (tmp_path / "e.csv").read_bytes()
    assert text == b"framework,seed,axis_value,round,sim_time_s,train_loss,test_acc,bits_tx,energy_j,max_staleness\n"
    runner.write_csv(MetricsTable([_row()]), tmp_path / "o.csv")
    assert len((tmp_path / "o.csv").read_bytes().split(b"\n")) == 3  # two lines + trailing LF
    assert b"\r" not in (tmp_path / "o.csv").read_bytes()


def test_csv_round_trip_exact(tmp_path):
    rng = random.Random(0)
    rows = [
        _row(seed=s, round=r, sim_time_s=rng.random() / 7, train_loss=rng.random() * 1e-9, test_acc=rng.random(), energy_j=rng.random() * 3.3e5, axis_value=v)
        for s in range(2) for r in (5, 10) for v in ("0.1", "0.3")
    ]
    runner.write_csv(MetricsTable(rows), tmp_path / "r.csv")
    back = runner.read_csv(tmp_path / "r.csv")
    assert back == runner.sort_rows(rows)


def test_csv_sorted():
    rows = [_row(framework="b"), _row(framework="a", round=10), _row(framework="a", round=5)]
    lines = runner.table_to_csv(rows).splitlines()[1:]
    assert [l.split(",")[0] + l.split(",")[3] for l in lines] == ["a5", "a10", "b5"]


def test_csv_unwritable(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        runner.write_csv(MetricsTable(), tmp_path / "missing" / "x.csv")


# ----------------------------------------------------------------------- cli


def _cfg_file(tmp_path, raw=None):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw or small()))
    return path


def test_cli_validate(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(_cfg_file(tmp_path))]) == 0
    bad = FIXTURES / "invalid" / "k_too_large.json"
    assert cli.main(["validate", "--config", str(bad)]) == 1
    assert "/framework/k" in capsys.readouterr().err


def test_cli_run_deterministic(tmp_path, monkeypatch):
    cfg = _cfg_file(tmp_path)
    monkeypatch.setenv("FEDSL_TRACE", "1")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    for name in ("metrics.csv", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    first = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0].split(",")
    assert len(first) == 3 and first[1] == "ComputeDone"


def test_cli_run_without_trace(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSL_TRACE", raising=False)
    assert cli.main(["run", "--config", str(_cfg_file(tmp_path)), "--out", str(tmp_path / "o")]) == 0
    assert not (tmp_path / "o" / "trace.csv").exists()


def test_cli_sweep(tmp_path):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "s"
    code = cli.main(["sweep", "--config", str(cfg), "--axis", "/channel/packet_loss_rate=0,0.3", "--seeds", "2", "--out", str(out)])
    assert code == 0
    finals = runner.read_csv(out / "final.csv")
    assert len(finals) == 4
    assert {(r.seed, r.axis_value) for r in finals} == {(s, v) for s in (0, 1) for v in ("0", "0.3")}


def test_cli_bad_axis(tmp_path):
    cfg = _cfg_file(tmp_path)
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "channel=1", "--out", str(tmp_path)]) == 1
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "/channel/zzz=1", "--out", str(tmp_path)]) == 1


def test_cli_optimize_split(tmp_path, capsys):
    assert cli.main(["optimize-split", "--config", str(_cfg_file(tmp_path)), "--objective", "energy"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "cut,device_s,uplink_s,downlink_s,server_s,total_s,total_j"
    assert len(out) == 1 + 4 + 1
    assert out[-1].startswith("best cut (energy): ")


def test_cli_grad_check(capsys):
    assert cli.main(["grad-check", "--trials", "3"]) == 0
    # an impossible tolerance must fail with the check exit code
    assert cli.main(["grad-check", "--trials", "2", "--tol", "0"]) == 3


def test_cli_parse_helpers():
    assert cli.parse_axis("/channel/packet_loss_rate=0,0.1") == ("/channel/packet_loss_rate", [0, 0.1])
    assert cli.parse_seeds("3") == [0, 1, 2]
    assert cli.parse_seeds("4,7") == [4, 7]
    with pytest.raises(ConfigError):
        cli.parse_seeds("x")
