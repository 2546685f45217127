import numpy as np
import pytest

from ptrchoice.data import Alternative, ChoiceDataset, Session, table1_schema
from ptrchoice.datagen import GeneratorConfig, generate_dataset, linear_utility

from acceptance_log import RESULTS


SESSION_DEFAULTS = {
    "origin_destination": "OD01",
    "search_office": "SO01",
    "stay_saturday": 1,
    "continental_trip": 0,
    "domestic_trip": 0,
    "stay_duration": 4000,
    "days_to_departure": 30,
    "departure_weekday": 2,
}


def make_session(prices, sid="s0", chosen=0, durations=None, airlines=None, **session_values):
    n = len(prices)
    durations = durations if durations is not None else [300 + 10 * j for j in range(n)]
    airlines = airlines if airlines is not None else ["AL01"] * n
    alts = [
        Alternative(
            {
                "airline": airlines[j],
                "price": float(prices[j]),
                "trip_duration": durations[j],
                "n_connections": 2,
                "n_airlines": 1,
                "outbound_departure_time": (60 * j) % 1440,
                "outbound_arrival_time": (60 * j + 300) % 1440,
            }
        )
        for j in range(n)
    ]
    return Session(sid, alts, chosen, {**SESSION_DEFAULTS, **session_values})


@pytest.fixture
def schema():
    return table1_schema()


@pytest.fixture
def tiny_dataset(schema):
    sessions = [
        make_session([100, 150, 200], "a", 1, airlines=["AL01", "AL02", "AL01"]),
        make_session([80, 90], "b", 0, airlines=["AL03", "AL02"]),
        make_session([300, 300, 310, 500], "c", 3, durations=[200, 100, 400, 150]),
    ]
    return ChoiceDataset(schema, sessions)


@pytest.fixture(scope="session")
def synthetic_small():
    cfg = GeneratorConfig(n_sessions=60, max_alternatives=12, utility=linear_utility(), seed=3)
    return generate_dataset(cfg)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k.split(".")[0])):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")


def random_params_like(store, rng, scale=0.5):
    for name in store:
        store[name].data[...] = rng.normal(0.0, scale, size=store[name].shape)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
