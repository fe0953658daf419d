import numpy as np
import pytest

from fedsl.frameworks import ClientSpec, FrameworkConfig, Setup
from fedsl.netphys import ChannelParams, DeviceProfile
from fedsl.nn_core import mlp_spec
from fedsl.split_model import SplitPlan
from fedsl.workbench.data import gen_blobs, partition_uniform


def build_small(
    n_clients=2,
    seed=0,
    freqs=None,
    distances=None,
    p=0.0,
    hidden=(8, 6),
    cuts=(2,),
    n_train=80,
    identical_shards=False,
    d=4,
    classes=3,
):
    """A tiny Setup that runs in milliseconds."""
    ds = gen_blobs(seed, n_train + 60, d, classes, 0.3)
    train = ds.subset(np.arange(n_train))
    test = ds.subset(np.arange(n_train, n_train + 40))
    public = ds.subset(np.arange(n_train + 40, n_train + 60))
    if identical_shards:
        shards = [np.arange(n_train)] * n_clients
    else:
        shards = partition_uniform(train, n_clients, seed)
    freqs = freqs or [1e9] * n_clients
    distances = distances or [10.0] * n_clients
    ch = ChannelParams(packet_loss_rate=p)
    clients = [
        ClientSpec(i, train.subset(shards[i]), DeviceProfile(cpu_freq_hz=freqs[i], f_min=1e6), distances[i], ch)
        for i in range(n_clients)
    ]
    spec = mlp_spec(d, list(hidden), classes)
    return Setup(spec=spec, plan=SplitPlan(cuts), clients=clients, test=test, seed=seed, public=public)


def small_cfg(**kw):
    base = dict(num_clients=2, k=2, aggregation_period=2, local_iters=2, batch_size=8, lr=0.05, rounds=6, eval_every=1)
    base.update(kw)
    return FrameworkConfig(**base)


@pytest.fixture
def make_setup():
    return build_small


# Filled by test_acceptance; echoed after the run so the lines survive capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
