"""Rule baselines and evaluation metrics for ranked choice predictions."""

from __future__ import annotations

import csv
import json
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ChoiceDataset, Session

PAGE_SIZE = 15


@dataclass(frozen=True)
class Prediction:
    session_id: str
    ranking: tuple[int, ...]
    probabilities: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ranking", tuple(int(j) for j in self.ranking))
        if sorted(self.ranking) != list(range(len(self.ranking))):
            raise ValueError(f"session {self.session_id}: ranking is not a permutation")

    @property
    def top(self) -> int:
        return self.ranking[0]

    @classmethod
    def from_probabilities(cls, session_id: str, probs) -> Prediction:
        probs = np.asarray(probs, dtype=np.float64)
        order = np.lexsort((np.arange(len(probs)), -probs))
        return cls(session_id, tuple(order.tolist()), tuple(probs.tolist()))


def _stable_rank(keys) -> tuple[int, ...]:
    return tuple(sorted(range(len(keys)), key=lambda j: (keys[j], j)))


def cheapest_baseline(s: Session) -> Prediction:
    """Display order, i.e. cheapest first; equal prices keep display order."""
    return Prediction(s.id, tuple(range(len(s))))


def shortest_baseline(s: Session, duration_key: str = "trip_duration") -> Prediction:
    """Ascending trip duration, ties to the lower display index."""
    return Prediction(s.id, _stable_rank(s.column(duration_key)))


def baseline_predictions(dataset: ChoiceDataset, method: str) -> list[Prediction]:
    if method == "cheapest":
        return [cheapest_baseline(s) for s in dataset]
    if method == "shortest":
        return [shortest_baseline(s, dataset.schema.duration_key) for s in dataset]
    raise ValueError(f"unknown baseline {method!r}")


def _aligned(preds: Sequence[Prediction], truth: ChoiceDataset) -> list[tuple[Prediction, Session]]:
    by_id = {p.session_id: p for p in preds}
    out = []
    for s in truth:
        if s.id not in by_id:
            raise KeyError(f"no prediction for session {s.id}")
        pred = by_id[s.id]
        if len(pred.ranking) != len(s):
            raise ValueError(f"session {s.id}: ranking covers {len(pred.ranking)} of {len(s)} alternatives")
        out.append((pred, s))
    return out


def topn_accuracy(preds: Sequence[Prediction], truth: ChoiceDataset, n: int) -> float:
    """Share of sessions whose booked alternative is among the first ``n`` ranked."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = _aligned(preds, truth)
    hits = sum(s.chosen_index in p.ranking[:n] for p, s in pairs)
    return hits / len(pairs)


def topn_curve(preds: Sequence[Prediction], truth: ChoiceDataset, n_max: int = 50) -> dict[int, float]:
    pairs = _aligned(preds, truth)
    positions = np.array([p.ranking.index(s.chosen_index) for p, s in pairs])
    return {n: float(np.mean(positions < n)) for n in range(1, n_max + 1)}


def page_miss_rate(preds: Sequence[Prediction], truth: ChoiceDataset, page_size: int = PAGE_SIZE) -> float:
    """Share of sessions booked on the first page whose top prediction sits beyond it.

    Both positions are display positions. The denominator is all sessions
    whose booking is on the first page; returns 0.0 when there are none.
    """
    pairs = _aligned(preds, truth)
    on_page = [(p, s) for p, s in pairs if s.chosen_index < page_size]
    if not on_page:
        return 0.0
    return sum(p.top >= page_size for p, _ in on_page) / len(on_page)


def market_shares(
    preds: Sequence[Prediction], truth: ChoiceDataset, airline_key: str = "airline"
) -> dict[str, tuple[float, float]]:
    """Per-airline (real, predicted) share of booked itineraries, hard predictions."""
    pairs = _aligned(preds, truth)
    n = len(pairs)
    real = Counter(s.value(airline_key, s.chosen_index) for _, s in pairs)
    pred = Counter(s.value(airline_key, p.top) for p, s in pairs)
    tokens = sorted(set(real) | set(pred))
    return {t: (real[t] / n, pred[t] / n) for t in tokens}


def share_l1_distance(shares: Mapping[str, tuple[float, float]]) -> float:
    return float(sum(abs(r - p) for r, p in shares.values()))


@dataclass
class EvalReport:
    method: str
    topn_curve: dict[int, float]
    page_miss_rate: float
    market_shares: dict[str, tuple[float, float]]
    n_sessions: int = 0
    config: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.topn_curve[1]

    @property
    def top5(self) -> float:
        return self.topn_curve[min(5, max(self.topn_curve))]

    @property
    def share_l1(self) -> float:
        return share_l1_distance(self.market_shares)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_sessions": self.n_sessions,
            "top1": self.top1,
            "top5": self.top5,
            "page_miss_rate": self.page_miss_rate,
            "market_share_l1": self.share_l1,
            "topn_curve": {str(k): v for k, v in self.topn_curve.items()},
            "market_shares": {k: {"real": r, "predicted": p} for k, (r, p) in self.market_shares.items()},
            "config": self.config,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(
    method: str,
    preds: Sequence[Prediction],
    truth: ChoiceDataset,
    n_max: int = 50,
    page_size: int = PAGE_SIZE,
    config: dict | None = None,
) -> EvalReport:
    airline_key = truth.schema.airline_key
    shares = market_shares(preds, truth, airline_key) if airline_key else {}
    return EvalReport(
        method=method,
        topn_curve=topn_curve(preds, truth, n_max),
        page_miss_rate=page_miss_rate(preds, truth, page_size),
        market_shares=shares,
        n_sessions=len(truth),
        config=dict(config or {}),
    )


def write_topn_csv(reports: Sequence[EvalReport], path) -> None:
    """Long-format top-N table with columns N, accuracy, method."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "accuracy", "method"])
        for r in reports:
            for n, acc in r.topn_curve.items():
                w.writerow([n, repr(acc), r.method])


def summary_table(reports: Sequence[EvalReport]) -> str:
    rows = [("method", "top-1", "top-5", "page-miss", "share-L1")]
    for r in reports:
        rows.append((r.method, f"{100 * r.top1:.1f}", f"{100 * r.top5:.1f}", f"{100 * r.page_miss_rate:.1f}", f"{r.share_l1:.3f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
