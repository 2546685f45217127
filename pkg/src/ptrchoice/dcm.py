"""Pointer-network choice model.

An LSTM reads the alternatives of a session in display order. A single
decoding step then points at one of them: with encoder states ``e_1..e_L``,

    d   = tanh(W2 e_L + b)
    u_j = d^T W1 e_j                      (bilinear head, default)
    u_j = v^T tanh(W1 e_j + W2 d)         (additive head)
    p   = softmax(u) over the real alternatives

Categorical inputs go through one embedding table per feature and are
concatenated with the normalized numeric block before entering the encoder.

Sessions are processed in padded minibatches. The recurrence freezes each
session's state once its real alternatives are exhausted and PAD positions are
masked out of the softmax, so outputs are identical to running every session
alone on its real alternatives.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernel as K
from .data import ChoiceDataset, DatasetSplit, Session
from .metrics import Prediction
from .preprocess import EncodedAlternative, EncodedDataset, EncodedSession, Preprocessor, encode_dataset

log = logging.getLogger(__name__)

HEADS = ("bilinear", "additive")
FORMAT_VERSION = "dcm-v1"


@dataclass
class DCMConfig:
    memory_size: int = 128
    num_layers: int = 1
    lr: float = 0.1
    batch_size: int = 128
    clip_threshold: float = 8.0
    k: float = 5.0
    head: str = "bilinear"
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        for name in ("memory_size", "num_layers", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.clip_threshold <= 0 or self.k <= 0:
            raise ValueError("lr, clip_threshold and k must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> DCMConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class DCMParams:
    store: K.ParamStore
    features: tuple[str, ...]
    memory_size: int
    num_layers: int = 1
    head: str = "bilinear"

    def embedding(self, feature: str) -> np.ndarray:
        return self.store[f"emb/{feature}"].data

    @property
    def input_width(self) -> int:
        return self.store["lstm/0/w_ih"].shape[1]

    def copy(self) -> DCMParams:
        return DCMParams(self.store.copy(), self.features, self.memory_size, self.num_layers, self.head)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_top1: list[float] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


class DCMTrainingError(RuntimeError):
    pass


def _glorot(rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(config: DCMConfig, p: Preprocessor, seed: int | None = None) -> DCMParams:
    """Random initial parameters, deterministic in ``seed`` (defaults to ``config.seed``)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    H = config.memory_size
    store = K.ParamStore()
    feats = tuple(p.categorical_features)
    for f in feats:
        store.add(f"emb/{f}", rng.uniform(-0.05, 0.05, size=(p.cardinality(f), p.embedding_dims[f])))
    width = len(p.numeric_columns) + sum(p.embedding_dims[f] for f in feats)
    for layer in range(config.num_layers):
        w_in = width if layer == 0 else H
        store.add(f"lstm/{layer}/w_ih", _glorot(rng, 4 * H, w_in))
        store.add(f"lstm/{layer}/w_hh", _glorot(rng, 4 * H, H))
        store.add(f"lstm/{layer}/b", np.zeros(4 * H))
    store.add("head/W1", _glorot(rng, H, H))
    store.add("head/W2", _glorot(rng, H, H))
    store.add("head/b", np.zeros(H))
    if config.head == "additive":
        store.add("head/v", _glorot(rng, 1, H)[0])
    return DCMParams(store, feats, H, config.num_layers, config.head)


# ---------------------------------------------------------------------------
# forward pass (batched; every op goes through the kernel)
# ---------------------------------------------------------------------------


def embed(params: DCMParams, numeric: np.ndarray, ids: np.ndarray) -> K.Tensor:
    """Encoder inputs of shape (..., width) from numeric (..., n_num) and ids (..., n_cat)."""
    parts = [K.Tensor(numeric)]
    for i, f in enumerate(params.features):
        parts.append(K.row_select(params.store[f"emb/{f}"], ids[..., i]))
    return K.concat(parts, axis=-1)


def embed_alternative(params: DCMParams, alt: EncodedAlternative) -> np.ndarray:
    return embed(params, alt.numeric[None, :], alt.categorical_ids[None, :]).data[0]


def _lstm_layer(params: DCMParams, layer: int, x: K.Tensor, mask: np.ndarray) -> tuple[list[K.Tensor], K.Tensor]:
    B, T = mask.shape
    H = params.memory_size
    w_ih = params.store[f"lstm/{layer}/w_ih"]
    w_hhT = K.transpose(params.store[f"lstm/{layer}/w_hh"])
    xw = K.add(K.matmul(x, K.transpose(w_ih)), params.store[f"lstm/{layer}/b"])
    steps = K.unstack(xw, axis=1) if T > 1 else [K.reshape(xw, (B, 4 * H))]
    lengths = mask.sum(axis=1)
    h = c = None
    states = []
    for t in range(T):
        gates = steps[t] if h is None else K.add(steps[t], K.matmul(h, w_hhT))
        i, f, g, o = K.split(gates, 4, axis=-1)
        i, f, g, o = K.sigmoid(i), K.sigmoid(f), K.tanh(g), K.sigmoid(o)
        c_new = K.elementwise_mul(i, g) if c is None else K.add(K.elementwise_mul(f, c), K.elementwise_mul(i, g))
        h_new = K.elementwise_mul(o, K.tanh(c_new))
        if h is None or np.all(lengths > t):
            h, c = h_new, c_new
        else:
            # sessions already finished keep their last real state
            m = mask[:, t : t + 1].astype(np.float64)
            keep = 1.0 - m
            h = K.add(K.elementwise_mul(m, h_new), K.elementwise_mul(keep, h))
            c = K.add(K.elementwise_mul(m, c_new), K.elementwise_mul(keep, c))
        states.append(h)
    return states, h


def encode(params: DCMParams, numeric: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> tuple[K.Tensor, K.Tensor]:
    """Encoder states (B, T, H) and the last real state of each session (B, H)."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask[:, 0]):
        raise ValueError("every session needs at least one real alternative")
    x = embed(params, numeric, ids)
    last = None
    for layer in range(params.num_layers):
        states, last = _lstm_layer(params, layer, x, mask)
        x = K.stack(states, axis=1)
    return x, last


def scores(params: DCMParams, states: K.Tensor, last: K.Tensor) -> K.Tensor:
    """Unnormalized pointer scores u of shape (B, T)."""
    B, T, H = states.shape
    st = params.store
    d = K.tanh(K.add(K.matmul(last, K.transpose(st["head/W2"])), st["head/b"]))
    if params.head == "bilinear":
        dw = K.reshape(K.matmul(d, st["head/W1"]), (B, 1, H))
        return K.sum_(K.elementwise_mul(states, dw), axis=-1)
    proj = K.add(
        K.matmul(states, K.transpose(st["head/W1"])),
        K.reshape(K.matmul(d, K.transpose(st["head/W2"])), (B, 1, H)),
    )
    return K.reshape(K.matmul(K.tanh(proj), K.reshape(st["head/v"], (H, 1))), (B, T))


def forward(params: DCMParams, numeric: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> tuple[K.Tensor, K.Tensor]:
    states, last = encode(params, numeric, ids, mask)
    u = scores(params, states, last)
    return u, K.masked_softmax(u, mask)


def batch_loss(params: DCMParams, batch: EncodedDataset) -> K.Tensor:
    """Mean negative log-probability of the chosen alternatives."""
    _, p = forward(params, batch.numeric, batch.ids, batch.mask)
    chosen_p = K.pick(p, batch.chosen)
    if np.any(chosen_p.data <= 0.0):
        raise DCMTrainingError("zero probability assigned to a chosen alternative")
    return K.scale(K.neg(K.sum_(K.log(chosen_p))), 1.0 / len(batch))


# single-session helpers ------------------------------------------------------


def encode_session(params: DCMParams, s: EncodedSession) -> np.ndarray:
    """Encoder states e_1..e_L over the real alternatives, shape (L, H)."""
    n = s.real_len
    if n < 1:
        raise ValueError("session has no real alternatives")
    states, _ = encode(params, s.numeric[None, :n], s.ids[None, :n], s.mask[None, :n])
    return states.data[0]


def score_alternatives(params: DCMParams, states: np.ndarray, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Scores and probabilities from encoder states (L, H); the last state drives the head."""
    states = np.asarray(states, dtype=np.float64)
    L = states.shape[0]
    mask = np.ones(L, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)[:L]
    last_idx = int(np.flatnonzero(mask)[-1])
    u = scores(params, K.Tensor(states[None]), K.Tensor(states[None, last_idx]))
    p = K.masked_softmax(u, mask[None])
    return u.data[0], p.data[0]


def session_probabilities(params: DCMParams, s: EncodedSession) -> np.ndarray:
    """Probabilities over all ``len(s.mask)`` positions, exactly 0 on PAD rows."""
    _, p = forward(params, s.numeric[None], s.ids[None], s.mask[None])
    return p.data[0]


def session_loss(params: DCMParams, s: EncodedSession) -> float:
    if not 0 <= s.chosen_index < s.real_len:
        raise ValueError("chosen_index outside the real alternatives")
    p = session_probabilities(params, s)[s.chosen_index]
    if p <= 0.0:
        raise DCMTrainingError("zero probability assigned to the chosen alternative")
    return -math.log(p)


def dataset_probabilities(params: DCMParams, data: EncodedDataset, batch_size: int = 256) -> np.ndarray:
    """(N, L) probability matrix; rows padded with zeros to the dataset width."""
    out = np.zeros(data.mask.shape)
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        sub = data.subset(idx)
        _, p = forward(params, sub.numeric, sub.ids, sub.mask)
        out[idx, : p.shape[1]] = p.data
    return out


def top1_accuracy(params: DCMParams, data: EncodedDataset) -> float:
    probs = dataset_probabilities(params, data)
    return float(np.mean(np.argmax(probs, axis=1) == data.chosen))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(split: DatasetSplit, p: Preprocessor, config: DCMConfig | None = None) -> tuple[DCMParams, TrainHistory]:
    """Minibatch Adagrad with global-norm clipping and early stopping on validation top-1.

    The returned parameters are those of the best validation epoch. An empty
    validation split falls back to the training data.
    """
    config = config or DCMConfig()
    if len(split.train) == 0:
        raise ValueError("training split is empty")
    train_enc = encode_dataset(p, split.train)
    valid_enc = encode_dataset(p, split.valid) if len(split.valid) else train_enc
    return train_encoded(train_enc, valid_enc, p, config)


def train_encoded(
    train_enc: EncodedDataset, valid_enc: EncodedDataset, p: Preprocessor, config: DCMConfig
) -> tuple[DCMParams, TrainHistory]:
    rng = np.random.default_rng(config.seed)
    params = init_params(config, p, config.seed)
    history = TrainHistory()
    best = params.copy()
    best_acc = -1.0
    since_best = 0
    n = len(train_enc)
    t0 = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = train_enc.subset(order[start : start + config.batch_size])
            try:
                with K.Tape() as tape:
                    loss = batch_loss(params, batch)
                grads = K.backward(tape, loss, params.store)
            except (K.KernelError, DCMTrainingError) as exc:
                raise DCMTrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from None
            grads = K.clip_global_norm(grads, config.clip_threshold)
            K.adagrad_step(params.store, grads, config.lr, config.eps)
            total += float(loss.data) * len(batch)

        acc = top1_accuracy(params, valid_enc)
        history.train_loss.append(total / n)
        history.valid_top1.append(acc)
        log.info("epoch %d loss %.5f valid top-1 %.4f", epoch, total / n, acc)
        if acc > best_acc:
            best_acc, best, since_best = acc, params.copy(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    history.seconds = time.perf_counter() - t0
    return best, history


def predict(params: DCMParams, p: Preprocessor, s: Session) -> list[tuple[int, float]]:
    """Alternatives ranked by probability (ties: lower display index first)."""
    enc = p.transform(s)
    probs = session_probabilities(params, enc)[: enc.real_len]
    return rank_probabilities(probs)


def rank_probabilities(probs: np.ndarray) -> list[tuple[int, float]]:
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [(int(j), float(probs[j])) for j in order]


def predict_dataset(params: DCMParams, p: Preprocessor, dataset: ChoiceDataset) -> list[Prediction]:
    enc = encode_dataset(p, dataset)
    probs = dataset_probabilities(params, enc)
    return [Prediction.from_probabilities(sid, probs[i, : enc.lengths[i]]) for i, sid in enumerate(enc.session_ids)]


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

_LEN = struct.Struct("<Q")


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_dcm(path, params: DCMParams, preprocessor: Preprocessor, config: DCMConfig, extra: dict | None = None) -> None:
    """Write a JSON header (length-prefixed) followed by little-endian float64 blocks."""
    directory = []
    blobs = []
    offset = 0
    for name, t in params.store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "preprocessor": preprocessor.to_dict(),
        "features": list(params.features),
        "tensors": directory,
        "extra": extra or {},
    }
    head = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_dcm(path) -> tuple[DCMParams, Preprocessor, DCMConfig, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _LEN.size:
        raise ValueError(f"{path}: truncated model file")
    (hlen,) = _LEN.unpack_from(blob)
    try:
        header = json.loads(blob[_LEN.size : _LEN.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: not a {FORMAT_VERSION} model file") from None
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a {FORMAT_VERSION} model file")
    base = _LEN.size + hlen
    store = K.ParamStore()
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start : start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"])
        store.add(entry["name"], arr.astype(np.float64))
    config = DCMConfig.from_dict(header["config"])
    params = DCMParams(store, tuple(header["features"]), config.memory_size, config.num_layers, config.head)
    return params, Preprocessor.from_dict(header["preprocessor"]), config, header


def is_dcm_file(path) -> bool:
    try:
        blob = Path(path).read_bytes()
        (hlen,) = _LEN.unpack_from(blob)
        if hlen > len(blob) - _LEN.size:
            return False
        header = json.loads(blob[_LEN.size : _LEN.size + hlen].decode("utf-8"))
    except (OSError, struct.error, UnicodeDecodeError, json.JSONDecodeError):
        return False
    return isinstance(header, dict) and header.get("format") == FORMAT_VERSION
