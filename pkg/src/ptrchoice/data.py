"""Choice sessions: schema, validation, JSONL loading and splitting.

A session is the ordered list of itineraries shown to one user plus the index
of the one they booked. Alternatives are kept in display order, which is
ascending price.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUMERICAL = "numerical"
BINARY = "binary"
CATEGORICAL = "categorical"
TIME = "time-of-day"
KINDS = (NUMERICAL, BINARY, CATEGORICAL, TIME)

SESSION = "session"
ALTERNATIVE = "alternative"
LEVELS = (SESSION, ALTERNATIVE)

DEFAULT_MAX_ALTERNATIVES = 50
MINUTES_PER_DAY = 1440

# Expected kind and level of the airline itinerary features, with the ranges
# (numeric) or cardinalities (categorical) observed in the booking data.
TABLE1_FEATURES: dict[str, tuple[str, str, object]] = {
    "origin_destination": (CATEGORICAL, SESSION, 97),
    "search_office": (CATEGORICAL, SESSION, 11),
    "airline": (CATEGORICAL, ALTERNATIVE, 63),
    "stay_saturday": (BINARY, SESSION, (0, 1)),
    "continental_trip": (BINARY, SESSION, (0, 1)),
    "domestic_trip": (BINARY, SESSION, (0, 1)),
    "price": (NUMERICAL, ALTERNATIVE, (77.0, 16780.0)),
    "stay_duration": (NUMERICAL, SESSION, (120.0, 434000.0)),
    "trip_duration": (NUMERICAL, ALTERNATIVE, (105.0, 4314.0)),
    "n_connections": (NUMERICAL, ALTERNATIVE, (2.0, 6.0)),
    "n_airlines": (NUMERICAL, ALTERNATIVE, (1.0, 4.0)),
    "days_to_departure": (NUMERICAL, SESSION, (0.0, 343.0)),
    "departure_weekday": (NUMERICAL, SESSION, (0.0, 6.0)),
    "outbound_departure_time": (TIME, ALTERNATIVE, (0, 1439)),
    "outbound_arrival_time": (TIME, ALTERNATIVE, (0, 1439)),
}


class SchemaError(ValueError):
    pass


class DatasetError(ValueError):
    """Malformed or invalid dataset file; message carries line / session id."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    level: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.level not in LEVELS:
            raise SchemaError(f"feature {self.name!r}: unknown level {self.level!r}")
        expected = TABLE1_FEATURES.get(self.name)
        if expected is not None and (self.kind, self.level) != expected[:2]:
            raise SchemaError(
                f"feature {self.name!r} must be {expected[0]}/{expected[1]}, got {self.kind}/{self.level}"
            )


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    price_key: str = "price"
    duration_key: str = "trip_duration"
    airline_key: str | None = "airline"
    max_alternatives: int = DEFAULT_MAX_ALTERNATIVES

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        by_name = {f.name: f for f in self.features}
        for role, key in (("price", self.price_key), ("duration", self.duration_key)):
            spec = by_name.get(key)
            if spec is None or spec.level != ALTERNATIVE or spec.kind != NUMERICAL:
                raise SchemaError(f"{role} key {key!r} must name an alternative-level numerical feature")
        if self.airline_key is not None:
            spec = by_name.get(self.airline_key)
            if spec is None or spec.level != ALTERNATIVE or spec.kind != CATEGORICAL:
                raise SchemaError(f"airline key {self.airline_key!r} must name an alternative-level categorical feature")
        if self.max_alternatives < 1:
            raise SchemaError("max_alternatives must be >= 1")

    def __getitem__(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def at_level(self, level: str) -> list[FeatureSpec]:
        return [f for f in self.features if f.level == level]

    def to_dict(self) -> dict:
        return {
            "features": [{"name": f.name, "kind": f.kind, "level": f.level} for f in self.features],
            "price_key": self.price_key,
            "duration_key": self.duration_key,
            "airline_key": self.airline_key,
            "max_alternatives": self.max_alternatives,
        }

    @classmethod
    def from_dict(cls, doc) -> FeatureSchema:
        # a bare list of features is accepted with the default keys
        if isinstance(doc, list):
            doc = {"features": doc}
        try:
            features = tuple(FeatureSpec(f["name"], f["kind"], f["level"]) for f in doc["features"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from None
        kwargs = {k: doc[k] for k in ("price_key", "duration_key", "airline_key", "max_alternatives") if k in doc}
        return cls(features, **kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> FeatureSchema:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)


def table1_schema(max_alternatives: int = DEFAULT_MAX_ALTERNATIVES) -> FeatureSchema:
    """Schema with the fifteen airline itinerary features."""
    feats = tuple(FeatureSpec(name, kind, level) for name, (kind, level, _) in TABLE1_FEATURES.items())
    return FeatureSchema(feats, max_alternatives=max_alternatives)


@dataclass(frozen=True)
class Alternative:
    values: Mapping[str, object]

    def __getitem__(self, name: str):
        return self.values[name]


@dataclass(frozen=True)
class Session:
    id: str
    alternatives: tuple[Alternative, ...]
    chosen_index: int
    session_values: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "alternatives", tuple(self.alternatives))

    def __len__(self) -> int:
        return len(self.alternatives)

    def value(self, name: str, j: int):
        """Raw value of feature ``name`` for alternative ``j`` (session-level features included)."""
        alt = self.alternatives[j].values
        if name in alt:
            return alt[name]
        return self.session_values[name]

    def column(self, name: str) -> list:
        return [self.value(name, j) for j in range(len(self.alternatives))]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "session_values": dict(self.session_values),
            "alternatives": [dict(a.values) for a in self.alternatives],
            "chosen_index": self.chosen_index,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> Session:
        return cls(
            id=str(doc["id"]),
            alternatives=tuple(Alternative(dict(a)) for a in doc["alternatives"]),
            chosen_index=doc["chosen_index"],
            session_values=dict(doc.get("session_values", {})),
        )


def _value_problem(spec: FeatureSpec, value) -> str | None:
    if spec.kind == CATEGORICAL:
        return None if isinstance(value, str) else "categorical value must be a string token"
    if isinstance(value, bool):
        value = int(value)
    if not isinstance(value, (int, float)):
        return f"{spec.kind} value must be a number"
    if spec.kind == BINARY and value not in (0, 1):
        return "binary value must be 0 or 1"
    if spec.kind == NUMERICAL and not math.isfinite(value):
        return "numerical value must be finite"
    if spec.kind == TIME and (int(value) != value or not 0 <= value < MINUTES_PER_DAY):
        return "time-of-day must be an integer minute in [0, 1439]"
    return None


def validate_session(session: Session, schema: FeatureSchema) -> list[str]:
    """Return every invariant the session breaks (empty when valid)."""
    out: list[str] = []
    sid = session.id
    n = len(session.alternatives)
    if n < 1:
        out.append(f"session {sid}: no alternatives")
    if n > schema.max_alternatives:
        out.append(f"session {sid}: {n} alternatives exceeds max_alternatives={schema.max_alternatives}")
    ci = session.chosen_index
    if isinstance(ci, bool) or not isinstance(ci, (int, np.integer)) or not 0 <= ci < max(n, 0):
        out.append(f"session {sid}: chosen_index {ci!r} out of range for {n} alternatives")

    for spec in schema.at_level(SESSION):
        if spec.name not in session.session_values:
            out.append(f"session {sid}: missing session feature {spec.name!r}")
            continue
        problem = _value_problem(spec, session.session_values[spec.name])
        if problem:
            out.append(f"session {sid}: feature {spec.name!r}: {problem}")

    alt_specs = schema.at_level(ALTERNATIVE)
    for j, alt in enumerate(session.alternatives):
        for spec in alt_specs:
            if spec.name not in alt.values:
                out.append(f"session {sid}: alternative {j} missing feature {spec.name!r}")
                continue
            problem = _value_problem(spec, alt.values[spec.name])
            if problem:
                out.append(f"session {sid}: alternative {j} feature {spec.name!r}: {problem}")

    prices = [a.values.get(schema.price_key) for a in session.alternatives]
    if all(isinstance(p, (int, float)) for p in prices):
        if any(b < a for a, b in zip(prices, prices[1:])):
            out.append(f"session {sid}: alternatives not price-sorted")
    return out


@dataclass(frozen=True)
class ChoiceDataset:
    schema: FeatureSchema
    sessions: tuple[Session, ...]

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    def __getitem__(self, i):
        return self.sessions[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sessions]

    def validate(self) -> list[str]:
        problems = []
        for s in self.sessions:
            problems.extend(validate_session(s, self.schema))
        return problems

    def save(self, path) -> None:
        save_dataset(self, path)


def load_dataset(path, schema: FeatureSchema) -> ChoiceDataset:
    """Read a JSON-lines session file and validate every session against ``schema``."""
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                session = Session.from_dict(doc)
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise DatasetError(f"{path}:{lineno}: cannot parse session record ({exc})") from None
            problems = validate_session(session, schema)
            if problems:
                raise DatasetError(f"{path}:{lineno}: " + "; ".join(problems))
            sessions.append(session)
    return ChoiceDataset(schema, sessions)


def save_dataset(dataset: ChoiceDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.sessions:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class DatasetSplit:
    train: ChoiceDataset
    valid: ChoiceDataset
    test: ChoiceDataset


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor each share; leftover sessions go to train."""
    valid = math.floor(n * ratios[1])
    test = math.floor(n * ratios[2])
    return n - valid - test, valid, test


def split_dataset(dataset: ChoiceDataset, ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Shuffle sessions with ``seed`` and cut them into train/valid/test."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset)
    n_train, n_valid, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :])
    sub = [ChoiceDataset(dataset.schema, [dataset.sessions[i] for i in sorted(idx)]) for idx in parts]
    return DatasetSplit(*sub)


def concat_datasets(datasets: Iterable[ChoiceDataset]) -> ChoiceDataset:
    datasets = list(datasets)
    return ChoiceDataset(datasets[0].schema, [s for d in datasets for s in d.sessions])
