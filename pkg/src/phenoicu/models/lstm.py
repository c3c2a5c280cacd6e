"""Single-layer LSTM sequence classifier in numpy with hand-written BPTT."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .container import dumps_container, loads_container
from .forest import ModelError

log = logging.getLogger(__name__)

GATES = ("input", "forget", "cell", "output")


class NumericError(ArithmeticError):
    pass


@dataclass
class LstmConfig:
    hidden_size: int = 128
    epochs: int = 30
    batch_size: int = 8
    num_layers: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    dropout: float = 0.0
    patience: int = 10
    seed: int = 0
    balance_classes: bool = False

    def validate(self) -> None:
        if self.num_layers != 1:
            raise ModelError("only single-layer LSTMs are supported")
        if self.dropout != 0.0:
            raise ModelError("dropout is not supported")
        if self.hidden_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ModelError("hidden_size, batch_size must be >= 1 and epochs >= 0")


@dataclass
class LstmParams:
    """Gate weights stacked as [input; forget; cell; output] blocks of ``hidden`` rows.

    ``W`` multiplies the concatenation ``[x_t, h_{t-1}]``; ``n_out`` is 1 for a
    sigmoid (binary) head and the class count for a softmax head.
    """

    W: np.ndarray
    b: np.ndarray
    W_y: np.ndarray
    b_y: np.ndarray
    loss_curve: list[float] = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def n_inputs(self) -> int:
        return self.W.shape[1] - self.hidden

    @property
    def n_out(self) -> int:
        return self.b_y.shape[0]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        k = GATES.index(name)
        H = self.hidden
        return self.W[k * H:(k + 1) * H], self.b[k * H:(k + 1) * H]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "W_y": self.W_y, "b_y": self.b_y}

    def named_blocks(self) -> dict[str, np.ndarray]:
        """Per-gate views of the stacked weights plus the output projection."""
        out = {}
        for g in GATES:
            W, b = self.gate(g)
            out[f"W_{g}"] = W
            out[f"b_{g}"] = b
        out["W_y"] = self.W_y
        out["b_y"] = self.b_y
        return out

    def copy(self) -> "LstmParams":
        return LstmParams(self.W.copy(), self.b.copy(), self.W_y.copy(), self.b_y.copy(), list(self.loss_curve))

    @classmethod
    def init(cls, n_inputs: int, hidden: int, n_out: int, rng: np.random.Generator | None = None,
             zero: bool = False) -> "LstmParams":
        shapes = ((4 * hidden, n_inputs + hidden), (4 * hidden,), (n_out, hidden), (n_out,))
        if zero:
            return cls(*(np.zeros(s) for s in shapes))
        bound = 1.0 / np.sqrt(hidden)
        rng = rng or np.random.default_rng(0)
        return cls(*(rng.uniform(-bound, bound, s) for s in shapes))


@dataclass
class Batch:
    X: np.ndarray        # (B, T, D)
    y: np.ndarray        # (B, T) int labels
    mask: np.ndarray     # (B, T) 1 where the loss is counted

    def __len__(self):
        return self.X.shape[0]


def _forward(p: LstmParams, X: np.ndarray):
    B, T, D = X.shape
    H = p.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    hs = np.empty((B, T, H))
    for t in range(T):
        z = np.concatenate([X[:, t], h], axis=1)
        a = z @ p.W.T + p.b
        i = expit(a[:, :H])
        f = expit(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = expit(a[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((z, i, f, g, o, c_prev, tc))
    logits = hs @ p.W_y.T + p.b_y
    return hs, logits, cache


def predict_sequences(p: LstmParams, X: np.ndarray) -> np.ndarray:
    """Class probabilities per timestep, shape (B, T, K) with K >= 2."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != p.n_inputs:
        raise ModelError(f"expected (B, T, {p.n_inputs}) input, got {X.shape}")
    _, logits, _ = _forward(p, X)
    if p.n_out == 1:
        q = expit(logits[..., 0])
        return np.stack([1.0 - q, q], axis=-1)
    return softmax(logits, axis=-1)


def _loss_and_dlogits(p: LstmParams, logits, y, mask, class_weight=None):
    n = mask.sum()
    if n == 0:
        return 0.0, np.zeros_like(logits)
    wmask = mask if class_weight is None else mask * class_weight[y]
    if p.n_out == 1:
        s = logits[..., 0]
        # -log sigmoid(s) for y=1, -log(1-sigmoid(s)) for y=0, computed stably
        per = np.logaddexp(0.0, s) - y * s
        loss = (per * wmask).sum() / n
        d = ((expit(s) - y) * wmask / n)[..., None]
    else:
        lsm = log_softmax(logits, axis=-1)
        per = -np.take_along_axis(lsm, y[..., None], axis=-1)[..., 0]
        loss = (per * wmask).sum() / n
        d = np.exp(lsm)
        d[np.arange(y.shape[0])[:, None], np.arange(y.shape[1])[None, :], y] -= 1.0
        d *= (wmask / n)[..., None]
    return float(loss), d


def loss_and_grads(p: LstmParams, batch: Batch, class_weight=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked cross-entropy and its gradient by backpropagation through time."""
    grads = {k: np.zeros_like(v) for k, v in p.tensors().items()}
    if batch.X.size == 0 or batch.mask.sum() == 0:
        return 0.0, grads
    X = batch.X
    B, T, D = X.shape
    H = p.hidden
    hs, logits, cache = _forward(p, X)
    loss, dlog = _loss_and_dlogits(p, logits, batch.y, batch.mask, class_weight)
    grads["W_y"] = np.einsum("btk,bth->kh", dlog, hs)
    grads["b_y"] = dlog.sum(axis=(0, 1))
    dh_out = dlog @ p.W_y          # (B, T, H)
    dW = grads["W"]
    db = grads["b"]
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        z, i, f, g, o, c_prev, tc = cache[t]
        dh = dh_out[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
        dW += da.T @ z
        db += da.sum(axis=0)
        dh_next = (da @ p.W)[:, D:]
    return loss, grads


def gradient_check(p: LstmParams, batch: Batch, epsilon: float = 1e-5, grad_fn=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error of one gate block or projection tensor is ``|a - n| / (|a| + |n|)``
    in Frobenius norm; the maximum over all of them is returned. An empty
    batch yields 0.
    """
    grad_fn = grad_fn or loss_and_grads
    if batch.X.size == 0:
        return 0.0
    _, grads = grad_fn(p, batch)
    analytic = LstmParams(grads["W"], grads["b"], grads["W_y"], grads["b_y"]).named_blocks()
    worst = 0.0
    for name, tensor in p.named_blocks().items():
        numeric = np.zeros(tensor.shape)
        flat = tensor.reshape(-1)
        if not np.shares_memory(flat, tensor):
            raise RuntimeError("parameter block is not a view")
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + epsilon
            up, _ = loss_and_grads(p, batch)
            flat[k] = old - epsilon
            down, _ = loss_and_grads(p, batch)
            flat[k] = old
            numeric.reshape(-1)[k] = (up - down) / (2 * epsilon)
        a = analytic[name]
        denom = np.linalg.norm(a) + np.linalg.norm(numeric)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst


def make_batch(sequences: list[np.ndarray], labels: list[np.ndarray], masks: list[np.ndarray] | None = None
               ) -> Batch:
    """Right-pad variable-length sequences into one batch."""
    if not sequences:
        return Batch(np.zeros((0, 0, 0)), np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0)))
    T = max(len(s) for s in sequences)
    D = sequences[0].shape[1]
    B = len(sequences)
    X = np.zeros((B, T, D))
    y = np.zeros((B, T), dtype=np.int64)
    m = np.zeros((B, T))
    for k, s in enumerate(sequences):
        n = len(s)
        X[k, :n] = s
        y[k, :n] = labels[k]
        m[k, :n] = 1.0 if masks is None else masks[k]
    return Batch(X, y, m)


def train_lstm(sequences: list[np.ndarray], labels: list[np.ndarray], masks: list[np.ndarray] | None,
               n_classes: int, cfg: LstmConfig | None = None, params: LstmParams | None = None) -> LstmParams:
    """Minimise masked per-timestep cross-entropy with Adam.

    ``labels[k][t]`` is counted only where ``masks[k][t]`` is 1. Returns the
    fitted parameters with the mean training loss of each epoch attached.
    """
    cfg = cfg or LstmConfig()
    cfg.validate()
    if not sequences:
        raise ModelError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    D = sequences[0].shape[1]
    n_out = 1 if n_classes == 2 else n_classes
    p = params.copy() if params is not None else LstmParams.init(D, cfg.hidden_size, n_out, rng)
    class_weight = None
    if cfg.balance_classes:
        counts = np.zeros(n_classes)
        for lab, m in zip(labels, masks or [None] * len(labels)):
            sel = lab if m is None else lab[np.asarray(m) > 0]
            counts += np.bincount(sel, minlength=n_classes)
        class_weight = counts.sum() / np.maximum(counts, 1) / n_classes
    state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in p.tensors().items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(sequences))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch([sequences[i] for i in idx], [labels[i] for i in idx],
                               None if masks is None else [masks[i] for i in idx])
            loss, grads = loss_and_grads(p, batch, class_weight)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                   f"max |W| = {np.abs(p.W).max():.3g}")
            step += 1
            for name, tensor in p.tensors().items():
                g = grads[name] + cfg.weight_decay * tensor
                m, v = state[name]
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                mhat = m / (1 - beta1 ** step)
                vhat = v / (1 - beta2 ** step)
                tensor -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / max(count, 1)
        p.loss_curve.append(epoch_loss)
        log.info("epoch %d loss %.5f", epoch, epoch_loss)
        if epoch_loss < best - 1e-12:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return p


@dataclass
class LstmModel:
    params: LstmParams
    n_classes: int
    mean: np.ndarray
    std: np.ndarray
    config: LstmConfig = field(default_factory=LstmConfig)
    final_step_only: bool = False
    schema_version: str = ""

    @property
    def n_features(self) -> int:
        return self.params.n_inputs

    def standardize(self, seq: np.ndarray) -> np.ndarray:
        return (seq - self.mean) / self.std

    def predict_proba_sequences(self, sequences: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for start in range(0, len(sequences), 64):
            chunk = sequences[start:start + 64]
            batch = make_batch([self.standardize(s) for s in chunk], [np.zeros(len(s), int) for s in chunk])
            probs = predict_sequences(self.params, batch.X)
            out.extend(probs[k, :len(s)] for k, s in enumerate(chunk))
        return out

    def to_bytes(self) -> bytes:
        header = {"model": "lstm", "hyperparameters": asdict(self.config), "n_classes": self.n_classes,
                  "final_step_only": self.final_step_only, "schema_version": self.schema_version,
                  "loss_curve": self.params.loss_curve}
        arrays = dict(self.params.tensors(), mean=self.mean, std=self.std)
        return dumps_container(header, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LstmModel":
        header, a = loads_container(data)
        if header.get("model") != "lstm":
            raise ModelError("container does not hold an LSTM")
        params = LstmParams(a["W"], a["b"], a["W_y"], a["b_y"], list(header.get("loss_curve", [])))
        return cls(params, header["n_classes"], a["mean"], a["std"], LstmConfig(**header["hyperparameters"]),
                   header["final_step_only"], header.get("schema_version", ""))


def fit_standardizer(sequences: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(sequences, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std
