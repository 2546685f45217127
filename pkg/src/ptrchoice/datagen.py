"""Synthetic airline search sessions with random-utility choices.

Each session draws a handful of itineraries from stand-in distributions over
the airline itinerary feature ranges, sorts them by price, and picks the one
maximising ``V + eps`` with ``eps`` i.i.d. standard Gumbel. In ``linear`` mode
``V`` is a linear function of the normalized features, so choices follow a
multinomial logit exactly; ``nonlinear`` mode adds pairwise interactions and a
display-position term that no linear-in-features utility can express.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    BINARY,
    MINUTES_PER_DAY,
    NUMERICAL,
    TABLE1_FEATURES,
    TIME,
    Alternative,
    ChoiceDataset,
    FeatureSchema,
    Session,
    table1_schema,
)

_U_LO = 1e-12
_U_HI = 1.0 - 1e-12


def gumbel_from_uniform(u):
    """Inverse CDF of the standard Gumbel distribution."""
    u = np.clip(u, _U_LO, _U_HI)
    return -np.log(-np.log(u))


def gumbel_sample(rng: np.random.Generator) -> float:
    return float(gumbel_from_uniform(rng.random()))


def gumbel(rng: np.random.Generator, size) -> np.ndarray:
    return gumbel_from_uniform(rng.random(size))


@dataclass
class GroundTruthUtility:
    """Utility over normalized feature columns.

    Column names follow the preprocessor convention (``price``,
    ``outbound_departure_time_sin`` ...). Numerical columns are scaled with the
    fixed feature ranges, not with data statistics.
    """

    mode: str = "linear"
    linear: dict[str, float] = field(default_factory=dict)
    interactions: list[tuple[str, str, float]] = field(default_factory=list)
    position_coef: float = 0.0
    token_effects: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("linear", "nonlinear"):
            raise ValueError(f"unknown utility mode {self.mode!r}")
        self.interactions = [tuple(t) for t in self.interactions]
        if self.mode == "nonlinear" and not (
            any(c != 0 for *_, c in self.interactions) or self.position_coef != 0
        ):
            raise ValueError("nonlinear mode needs a nonzero interaction or position term")
        if self.mode == "linear" and (self.interactions or self.position_coef):
            raise ValueError("linear mode cannot carry interaction or position terms")

    def session_utilities(self, session: Session, schema: FeatureSchema | None = None) -> np.ndarray:
        cols = normalized_columns(session, schema or table1_schema())
        n = len(session)
        v = np.zeros(n)
        for name, coef in self.linear.items():
            v += coef * cols[name]
        for a, b, coef in self.interactions:
            v += coef * cols[a] * cols[b]
        if self.position_coef:
            max_alt = (schema or table1_schema()).max_alternatives
            v += self.position_coef * np.arange(n) / max(max_alt - 1, 1)
        for feat, effects in self.token_effects.items():
            v += np.array([effects.get(tok, 0.0) for tok in session.column(feat)])
        return v


def normalized_columns(session: Session, schema: FeatureSchema) -> dict[str, np.ndarray]:
    cols: dict[str, np.ndarray] = {}
    for f in schema.features:
        raw = session.column(f.name)
        if f.kind == NUMERICAL:
            lo, hi = TABLE1_FEATURES[f.name][2] if f.name in TABLE1_FEATURES else (min(raw), max(raw))
            arr = np.asarray(raw, dtype=np.float64)
            cols[f.name] = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        elif f.kind == BINARY:
            cols[f.name] = np.asarray(raw, dtype=np.float64)
        elif f.kind == TIME:
            theta = 2.0 * np.pi * np.asarray(raw, dtype=np.float64) / MINUTES_PER_DAY
            cols[f"{f.name}_sin"] = np.sin(theta)
            cols[f"{f.name}_cos"] = np.cos(theta)
    return cols


@dataclass
class GeneratorConfig:
    n_sessions: int = 1000
    min_alternatives: int = 1
    max_alternatives: int = 50
    utility: GroundTruthUtility = field(default_factory=GroundTruthUtility)
    seed: int = 0
    n_od: int = 97
    n_offices: int = 11
    n_airlines: int = 63
    id_prefix: str = "s"

    def __post_init__(self):
        if isinstance(self.utility, dict):
            self.utility = GroundTruthUtility(**self.utility)
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")
        if not 1 <= self.min_alternatives <= self.max_alternatives:
            raise ValueError("need 1 <= min_alternatives <= max_alternatives")

    def schema(self) -> FeatureSchema:
        return table1_schema(max_alternatives=max(self.max_alternatives, 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> GeneratorConfig:
        return cls(**doc)

    @classmethod
    def load(cls, path) -> GeneratorConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _tokens(prefix: str, n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def sample_session(config: GeneratorConfig, rng: np.random.Generator, sid: str) -> Session:
    """Draw one session's features (choice left at 0)."""
    ods = _tokens("OD", config.n_od)
    offices = _tokens("SO", config.n_offices)
    airlines = _tokens("AL", config.n_airlines)
    n = int(rng.integers(config.min_alternatives, config.max_alternatives + 1))

    session_values = {
        "origin_destination": ods[rng.integers(len(ods))],
        "search_office": offices[rng.integers(len(offices))],
        "stay_saturday": int(rng.integers(2)),
        "continental_trip": int(rng.integers(2)),
        "domestic_trip": int(rng.integers(2)),
        "stay_duration": int(rng.integers(120, 434000 + 1)),
        "days_to_departure": int(rng.integers(0, 343 + 1)),
        "departure_weekday": int(rng.integers(0, 7)),
    }
    price = np.round(_log_uniform(rng, 77.0, 16780.0, n), 2)
    trip = rng.integers(105, 4314 + 1, n)
    airline = rng.integers(len(airlines), size=n)
    n_conn = rng.integers(2, 6 + 1, n)
    n_air = rng.integers(1, 4 + 1, n)
    dep = rng.integers(0, MINUTES_PER_DAY, n)
    arr = (dep + trip) % MINUTES_PER_DAY

    order = np.argsort(price, kind="stable")
    alts = [
        Alternative(
            {
                "airline": airlines[airline[j]],
                "price": float(price[j]),
                "trip_duration": int(trip[j]),
                "n_connections": int(n_conn[j]),
                "n_airlines": int(n_air[j]),
                "outbound_departure_time": int(dep[j]),
                "outbound_arrival_time": int(arr[j]),
            }
        )
        for j in order
    ]
    return Session(sid, tuple(alts), 0, session_values)


def generate_dataset(config: GeneratorConfig) -> ChoiceDataset:
    """Sample ``config.n_sessions`` sessions; deterministic for a given config."""
    rng = np.random.default_rng(config.seed)
    schema = config.schema()
    sessions = []
    width = len(str(config.n_sessions - 1))
    for i in range(config.n_sessions):
        s = sample_session(config, rng, f"{config.id_prefix}{i:0{width}d}")
        v = config.utility.session_utilities(s, schema)
        chosen = int(np.argmax(v + gumbel(rng, len(v))))
        sessions.append(Session(s.id, s.alternatives, chosen, s.session_values))
    return ChoiceDataset(schema, sessions)


def replay_choices(utilities: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Choice counts per alternative over ``n_draws`` independent Gumbel draws."""
    v = np.asarray(utilities, dtype=np.float64)
    picks = np.argmax(v[None, :] + gumbel(rng, (n_draws, len(v))), axis=1)
    return np.bincount(picks, minlength=len(v))


def linear_utility(price: float = -2.0, trip_duration: float = -1.0, **others: float) -> GroundTruthUtility:
    return GroundTruthUtility("linear", {"price": price, "trip_duration": trip_duration, **others})


def nonlinear_utility() -> GroundTruthUtility:
    """Benchmark utility: connections x duration penalty, a preference for
    departures near midnight or noon, and a penalty growing with display rank."""
    return GroundTruthUtility(
        mode="nonlinear",
        linear={"price": -2.0, "trip_duration": -2.0},
        interactions=[
            ("n_connections", "trip_duration", -8.0),
            ("outbound_departure_time_cos", "outbound_departure_time_cos", 4.0),
        ],
        position_coef=-4.0,
    )
