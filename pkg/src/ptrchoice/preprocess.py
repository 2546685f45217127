"""Feature pre-processing shared by both choice models.

Numerical features are min-max scaled to [0, 1] with statistics from the
training split, binaries pass through, times of day become (sin, cos) pairs,
and categorical tokens are mapped to integer ids with reserved PAD=0 and UNK=1.
Sessions are padded with PAD rows up to ``max_len``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    BINARY,
    CATEGORICAL,
    MINUTES_PER_DAY,
    NUMERICAL,
    TIME,
    ChoiceDataset,
    FeatureSchema,
    Session,
)

PAD = 0
UNK = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"


def embedding_dim(cardinality: int, k: float) -> int:
    """Embedding width for a vocabulary: ``max(1, ceil(k * ln(cardinality)))``."""
    if cardinality < 1:
        raise ValueError("cardinality must be >= 1")
    if k <= 0:
        raise ValueError("k must be positive")
    return max(1, math.ceil(k * math.log(cardinality)))


def encode_time(minutes: int) -> tuple[float, float]:
    """Map minutes since midnight onto the unit circle as (sin, cos)."""
    if not 0 <= minutes < MINUTES_PER_DAY:
        raise ValueError(f"minutes must be in [0, 1439], got {minutes}")
    theta = 2.0 * math.pi * minutes / MINUTES_PER_DAY
    return math.sin(theta), math.cos(theta)


@dataclass
class Vocabulary:
    feature: str
    token_to_id: dict[str, int]

    @classmethod
    def build(cls, feature: str, tokens) -> Vocabulary:
        mapping = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in sorted(set(tokens) - {PAD_TOKEN, UNK_TOKEN}):
            mapping[tok] = len(mapping)
        return cls(feature, mapping)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def tokens(self) -> list[str]:
        """Tokens ordered by id."""
        return sorted(self.token_to_id, key=self.token_to_id.__getitem__)


@dataclass
class NormalizationStats:
    feature: str
    min: float
    max: float

    @property
    def constant(self) -> bool:
        return self.max == self.min

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.constant:
            return np.zeros_like(values, dtype=np.float64)
        return np.clip((np.asarray(values, dtype=np.float64) - self.min) / (self.max - self.min), 0.0, 1.0)


@dataclass(frozen=True)
class EncodedAlternative:
    numeric: np.ndarray
    categorical_ids: np.ndarray


@dataclass(frozen=True)
class EncodedSession:
    numeric: np.ndarray  # (max_len, n_numeric)
    ids: np.ndarray  # (max_len, n_categorical)
    mask: np.ndarray  # (max_len,)
    real_len: int
    chosen_index: int
    session_id: str = ""

    @property
    def rows(self) -> list[EncodedAlternative]:
        return [EncodedAlternative(self.numeric[j], self.ids[j]) for j in range(len(self.mask))]

    def __len__(self) -> int:
        return self.real_len


@dataclass(frozen=True)
class EncodedDataset:
    """Encoded sessions stacked into padded arrays."""

    numeric: np.ndarray  # (N, L, n_numeric)
    ids: np.ndarray  # (N, L, n_categorical)
    mask: np.ndarray  # (N, L)
    lengths: np.ndarray  # (N,)
    chosen: np.ndarray  # (N,)
    session_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.lengths)

    def subset(self, idx) -> EncodedDataset:
        """Rows ``idx``, trimmed to the longest selected session."""
        idx = np.asarray(idx)
        width = int(self.lengths[idx].max())
        return EncodedDataset(
            self.numeric[idx, :width],
            self.ids[idx, :width],
            self.mask[idx, :width],
            self.lengths[idx],
            self.chosen[idx],
            tuple(self.session_ids[i] for i in idx),
        )

    def session(self, i: int) -> EncodedSession:
        return EncodedSession(
            self.numeric[i], self.ids[i], self.mask[i], int(self.lengths[i]), int(self.chosen[i]), self.session_ids[i]
        )


@dataclass
class Preprocessor:
    schema: FeatureSchema
    vocabularies: dict[str, Vocabulary]
    stats: dict[str, NormalizationStats]
    embedding_dims: dict[str, int]
    k: float
    max_len: int
    constant_features: list[str] = field(default_factory=list)

    @property
    def numeric_columns(self) -> list[str]:
        cols = []
        for f in self.schema.features:
            if f.kind in (NUMERICAL, BINARY):
                cols.append(f.name)
            elif f.kind == TIME:
                cols.extend([f"{f.name}_sin", f"{f.name}_cos"])
        return cols

    @property
    def categorical_features(self) -> list[str]:
        return [f.name for f in self.schema.features if f.kind == CATEGORICAL]

    def cardinality(self, feature: str) -> int:
        return len(self.vocabularies[feature])

    def transform(self, session: Session) -> EncodedSession:
        return transform_session(self, session)

    def transform_dataset(self, dataset: ChoiceDataset) -> EncodedDataset:
        return encode_dataset(self, dataset)

    # persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "vocabularies": {f: v.tokens() for f, v in self.vocabularies.items()},
            "stats": {f: [s.min, s.max] for f, s in self.stats.items()},
            "embedding_dims": dict(self.embedding_dims),
            "k": self.k,
            "max_len": self.max_len,
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Preprocessor:
        return cls(
            schema=FeatureSchema.from_dict(doc["schema"]),
            vocabularies={f: Vocabulary(f, {t: i for i, t in enumerate(toks)}) for f, toks in doc["vocabularies"].items()},
            stats={f: NormalizationStats(f, float(lo), float(hi)) for f, (lo, hi) in doc["stats"].items()},
            embedding_dims={f: int(d) for f, d in doc["embedding_dims"].items()},
            k=doc["k"],
            max_len=int(doc["max_len"]),
            constant_features=list(doc.get("constant_features", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Preprocessor:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_preprocessor(train: ChoiceDataset, k: float = 5.0, max_len: int | None = None) -> Preprocessor:
    """Learn vocabularies and min/max statistics from the training split.

    ``max_len`` defaults to the schema's ``max_alternatives``.
    """
    if len(train) == 0:
        raise ValueError("cannot fit a preprocessor on an empty training set")
    if k <= 0:
        raise ValueError("k must be positive")
    schema = train.schema
    longest = max(len(s) for s in train.sessions)
    if max_len is None:
        max_len = max(schema.max_alternatives, longest)
    if max_len < longest:
        raise ValueError(f"max_len={max_len} is shorter than the longest training session ({longest})")

    vocabs, stats, constant = {}, {}, []
    for f in schema.features:
        values = [v for s in train.sessions for v in s.column(f.name)]
        if f.kind == CATEGORICAL:
            vocabs[f.name] = Vocabulary.build(f.name, values)
        elif f.kind == NUMERICAL:
            arr = np.asarray(values, dtype=np.float64)
            stats[f.name] = NormalizationStats(f.name, float(arr.min()), float(arr.max()))
            if stats[f.name].constant:
                constant.append(f.name)
    dims = {name: embedding_dim(len(v), k) for name, v in vocabs.items()}
    return Preprocessor(schema, vocabs, stats, dims, k, max_len, constant)


def _encode_columns(p: Preprocessor, session: Session) -> tuple[np.ndarray, np.ndarray]:
    n = len(session)
    numeric = []
    ids = []
    for f in p.schema.features:
        col = session.column(f.name)
        if f.kind == NUMERICAL:
            numeric.append(p.stats[f.name].apply(np.asarray(col, dtype=np.float64)))
        elif f.kind == BINARY:
            numeric.append(np.asarray(col, dtype=np.float64))
        elif f.kind == TIME:
            theta = 2.0 * np.pi * np.asarray(col, dtype=np.float64) / MINUTES_PER_DAY
            if np.any((np.asarray(col) < 0) | (np.asarray(col) >= MINUTES_PER_DAY)):
                raise ValueError(f"session {session.id}: {f.name} outside [0, 1439]")
            numeric.extend([np.sin(theta), np.cos(theta)])
        else:
            vocab = p.vocabularies[f.name]
            ids.append(np.array([vocab.lookup(t) for t in col], dtype=np.int64))
    num = np.stack(numeric, axis=1) if numeric else np.zeros((n, 0))
    cat = np.stack(ids, axis=1) if ids else np.zeros((n, 0), dtype=np.int64)
    return num, cat


def transform_session(p: Preprocessor, s: Session) -> EncodedSession:
    n = len(s)
    if n > p.max_len:
        raise ValueError(f"session {s.id} has {n} alternatives, longer than max_len={p.max_len}")
    num, cat = _encode_columns(p, s)
    numeric = np.zeros((p.max_len, num.shape[1]))
    ids = np.full((p.max_len, cat.shape[1]), PAD, dtype=np.int64)
    numeric[:n] = num
    ids[:n] = cat
    mask = np.zeros(p.max_len, dtype=bool)
    mask[:n] = True
    return EncodedSession(numeric, ids, mask, n, int(s.chosen_index), s.id)


def encode_dataset(p: Preprocessor, dataset: ChoiceDataset | Sequence[Session]) -> EncodedDataset:
    sessions = dataset.sessions if isinstance(dataset, ChoiceDataset) else tuple(dataset)
    encoded = [transform_session(p, s) for s in sessions]
    return EncodedDataset(
        numeric=np.stack([e.numeric for e in encoded]),
        ids=np.stack([e.ids for e in encoded]),
        mask=np.stack([e.mask for e in encoded]),
        lengths=np.array([e.real_len for e in encoded], dtype=np.int64),
        chosen=np.array([e.chosen_index for e in encoded], dtype=np.int64),
        session_ids=tuple(e.session_id for e in encoded),
    )
