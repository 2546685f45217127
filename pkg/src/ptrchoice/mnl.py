"""Multinomial logit with linear utilities, fitted by full-batch Adagrad.

Utility of alternative j is ``theta @ x_j`` where ``x_j`` holds every
normalized numeric column plus a one-hot indicator for each non-PAD token of
every categorical feature. Choice probabilities are the softmax of utilities
over the real alternatives of a session.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernel as K
from .metrics import Prediction
from .preprocess import PAD, EncodedAlternative, EncodedDataset, EncodedSession, Preprocessor, encode_dataset


@dataclass(frozen=True)
class MNLDesign:
    """Column layout mapping an encoded alternative to a flat design row."""

    columns: tuple[str, ...]
    n_numeric: int
    cardinalities: tuple[int, ...]

    @classmethod
    def from_preprocessor(cls, p: Preprocessor) -> MNLDesign:
        cols = list(p.numeric_columns)
        cards = []
        for feat in p.categorical_features:
            vocab = p.vocabularies[feat]
            cards.append(len(vocab))
            cols.extend(f"{feat}={tok}" for tok in vocab.tokens()[PAD + 1 :])
        return cls(tuple(cols), len(p.numeric_columns), tuple(cards))

    @property
    def width(self) -> int:
        return len(self.columns)

    def row(self, alt: EncodedAlternative) -> np.ndarray:
        return self.matrix(alt.numeric[None, :], alt.categorical_ids[None, :])[0]

    def matrix(self, numeric: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """Design rows for arrays of shape (..., n_numeric) and (..., n_categorical)."""
        if numeric.shape[-1] != self.n_numeric or ids.shape[-1] != len(self.cardinalities):
            raise ValueError("encoded alternative does not match the design")
        blocks = [numeric]
        for f, card in enumerate(self.cardinalities):
            fid = ids[..., f]
            if fid.size and fid.max() >= card:
                raise ValueError("categorical id outside the design vocabulary")
            onehot = np.zeros(fid.shape + (card - 1,))
            hit = fid > PAD
            onehot[hit, fid[hit] - 1] = 1.0
            blocks.append(onehot)
        return np.concatenate(blocks, axis=-1)

    def dataset_matrix(self, data: EncodedDataset) -> np.ndarray:
        return self.matrix(data.numeric, data.ids)


@dataclass
class MNLParams:
    theta: np.ndarray
    design: MNLDesign

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.design.width,):
            raise ValueError(f"theta has {self.theta.size} entries, design has {self.design.width} columns")

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.design.columns, self.theta.tolist()))


@dataclass
class FitReport:
    final_log_likelihood: float
    iterations: int
    converged: bool
    ll_trace: list[float] = field(default_factory=list)


@dataclass
class MNLFitConfig:
    lr: float = 0.5
    eps: float = 1e-8
    max_iters: int = 3000
    tol: float = 1e-7


def utility(params: MNLParams, alt: EncodedAlternative) -> float:
    x = params.design.row(alt)
    return float(x @ params.theta)


def _session_probabilities(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - v.max())
    return z / z.sum()


def choice_probabilities(params: MNLParams, s: EncodedSession) -> np.ndarray:
    """Probabilities over the ``real_len`` real alternatives of a session."""
    if s.real_len < 1:
        raise ValueError("session has no real alternatives")
    n = s.real_len
    x = params.design.matrix(s.numeric[:n], s.ids[:n])
    return _session_probabilities(x @ params.theta)


def _utilities(theta: K.Tensor, design: MNLDesign, data: EncodedDataset) -> K.Tensor:
    """Batched ``theta @ x`` without materialising the one-hot blocks."""
    n, width = data.mask.shape
    k = design.n_numeric
    u = K.reshape(K.matmul(data.numeric, K.reshape(K.index(theta, slice(0, k)), (k, 1))), (n, width))
    offset = k
    for f, card in enumerate(design.cardinalities):
        block = K.concat([np.zeros(1), K.index(theta, slice(offset, offset + card - 1))], axis=0)
        picked = K.row_select(K.reshape(block, (card, 1)), data.ids[..., f])
        u = K.add(u, K.reshape(picked, (n, width)))
        offset += card - 1
    return u


def dataset_probabilities(params: MNLParams, data: EncodedDataset) -> np.ndarray:
    """(N, L) probabilities with exact zeros on PAD positions."""
    u = _utilities(K.Tensor(params.theta), params.design, data)
    return K.masked_softmax(u, data.mask).data


def _neg_log_likelihood(theta: K.Tensor, design: MNLDesign, data: EncodedDataset) -> K.Tensor:
    p = K.masked_softmax(_utilities(theta, design, data), data.mask)
    return K.neg(K.sum_(K.log(K.pick(p, data.chosen))))


def log_likelihood(params: MNLParams, data: EncodedDataset) -> float:
    """Sum over sessions of the log-probability of the chosen alternative."""
    return -float(_neg_log_likelihood(K.Tensor(params.theta), params.design, data).data)


def log_likelihood_gradient(params: MNLParams, data: EncodedDataset) -> np.ndarray:
    store = K.ParamStore({"theta": params.theta.copy()})
    with K.Tape() as tape:
        loss = _neg_log_likelihood(store["theta"], params.design, data)
    return -K.backward(tape, loss, store)["theta"]


class MNLFitError(RuntimeError):
    pass


def fit_mnl(
    train: EncodedDataset,
    design: MNLDesign,
    config: MNLFitConfig | None = None,
) -> tuple[MNLParams, FitReport]:
    """Maximum-likelihood fit starting from theta = 0.

    Each iteration is one Adagrad step on the mean negative log-likelihood.
    A step that lowers the likelihood is rejected and the learning rate halved,
    so the recorded trace never decreases. Convergence is declared when the
    relative change of the log-likelihood drops below ``tol``.
    """
    cfg = config or MNLFitConfig()
    if len(train) == 0:
        raise ValueError("cannot fit on an empty dataset")
    n = len(train)
    train = train.subset(np.arange(n))
    store = K.ParamStore({"theta": np.zeros(design.width)})
    lr = cfg.lr

    def evaluate() -> tuple[float, np.ndarray]:
        with K.Tape() as tape:
            try:
                loss = _neg_log_likelihood(store["theta"], design, train)
            except K.KernelError as exc:
                raise MNLFitError(f"non-finite log-likelihood: {exc}") from None
        grad = K.backward(tape, loss, store)["theta"]
        return -float(loss.data), grad / n

    ll, grad = evaluate()
    trace = [ll]
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        theta_old = store["theta"].data.copy()
        acc_old = store.accumulators["theta"].copy()
        K.adagrad_step(store, {"theta": grad}, lr, cfg.eps)
        new_ll, new_grad = evaluate()
        if not math.isfinite(new_ll):
            raise MNLFitError("non-finite log-likelihood")
        if new_ll < ll - 1e-9 * abs(ll):
            store["theta"].data[:] = theta_old
            store.accumulators["theta"][:] = acc_old
            lr *= 0.5
            if lr < 1e-12:
                break
            continue
        change = abs(new_ll - ll) / max(abs(ll), 1e-300)
        ll, grad = new_ll, new_grad
        trace.append(ll)
        if change < cfg.tol:
            converged = True
            break
    params = MNLParams(store["theta"].data.copy(), design)
    return params, FitReport(ll, it, converged, trace)


def rank(probs: np.ndarray) -> np.ndarray:
    """Indices by descending probability, lower index first on ties."""
    return np.lexsort((np.arange(len(probs)), -probs))


# persistence ---------------------------------------------------------------


def save_mnl(path, params: MNLParams, preprocessor: Preprocessor, report: FitReport | None = None, config=None) -> None:
    doc = {
        "format": "mnl-v1",
        "columns": list(params.design.columns),
        "n_numeric": params.design.n_numeric,
        "cardinalities": list(params.design.cardinalities),
        "theta": params.theta.tolist(),
        "preprocessor": preprocessor.to_dict(),
        "config": config if isinstance(config, dict) else (asdict(config) if config is not None else None),
        "fit_report": asdict(report) if report is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_mnl(path) -> tuple[MNLParams, Preprocessor, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "mnl-v1":
        raise ValueError(f"{path}: not an mnl-v1 model file")
    design = MNLDesign(tuple(doc["columns"]), int(doc["n_numeric"]), tuple(doc["cardinalities"]))
    return MNLParams(np.array(doc["theta"]), design), Preprocessor.from_dict(doc["preprocessor"]), doc


def predict_dataset(params: MNLParams, p: Preprocessor, dataset) -> list[Prediction]:
    enc = encode_dataset(p, dataset)
    probs = dataset_probabilities(params, enc)
    return [Prediction.from_probabilities(sid, probs[i, : enc.lengths[i]]) for i, sid in enumerate(enc.session_ids)]
