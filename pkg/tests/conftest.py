import numpy as np
import pytest

from feeder_reduce.fixtures import load_feeder_a
from feeder_reduce.ingest import FeederDataset
from feeder_reduce.model import SectionRecord
from feeder_reduce.reduction import FeederReducer, builtin_feeder_O


@pytest.fixture(scope="session")
def feeder_a():
    return load_feeder_a()


@pytest.fixture(scope="session")
def reducer_a(feeder_a):
    return FeederReducer().fit(feeder_a)


@pytest.fixture(scope="session")
def model_m(reducer_a):
    from dataclasses import replace

    return replace(reducer_a.model_, name="feeder-M")


@pytest.fixture(scope="session")
def model_o():
    return builtin_feeder_O()


def chain_dataset(lengths, loads=None, conductor="Type D", name="chain"):
    """Radial chain 0-1-...-n with optional per-section loads (pu)."""
    loads = loads if loads is not None else [None] * len(lengths)
    secs = [
        SectionRecord(i, i + 1, conductor, length, "ABC", None if ld is None else complex(ld))
        for i, (length, ld) in enumerate(zip(lengths, loads))
    ]
    return FeederDataset(tuple(secs), len(lengths) + 1, 0, name)


def random_radial(rng, n, load_prob=0.6, scale=0.02):
    """Random radial feeder of ``n`` nodes rooted at 0 with light lagging loads."""
    secs = []
    conds = ["Type A", "Type B", "Type C", "Type D"]
    for v in range(1, n):
        p = int(rng.integers(0, v))
        load = None
        if rng.random() < load_prob:
            pw = rng.uniform(0.1, 1.0) * scale
            load = complex(pw, pw * rng.uniform(0.0, 0.6))
        secs.append(SectionRecord(p, v, conds[int(rng.integers(4))], float(rng.uniform(0.02, 0.5)), "ABC", load))
    return FeederDataset(tuple(secs), n, 0, "random")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_runs(model_m, model_o):
    """Time series and metrics of both feeders under the three reference scenarios."""
    from feeder_reduce.dynamics import extract_metrics, reference_scenario, simulate_scenario

    runs = {}
    for model in (model_o, model_m):
        tag = model.name.removeprefix("feeder-")
        for s in ("S1", "S2", "S3"):
            ts = simulate_scenario(model, reference_scenario(s))
            runs[tag, s] = (ts, extract_metrics(ts))
    return runs
