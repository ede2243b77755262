"""Single-layer LSTM regressor: parameters, forward pass, BPTT, Adam.

Parameter layout follows the stacked-gate convention: weight matrices hold
the four gates as L-row blocks in the fixed order [input, forget, cell,
output], so w_ih is (4L, D), w_hh is (4L, L) and each bias is (4L,). The
cell recursion is

    z_t = f_t * z_{t-1} + i_t * g_t
    h_t = o_t * tanh(z_t)

with sigmoid input/forget/output gates and a tanh cell candidate. The output
head is a dense layer with identity activation on the final hidden state.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

GATE_ORDER = ("input", "forget", "cell", "output")
N_GATES = 4
PARAM_KEYS = ("w_ih", "w_hh", "b_ih", "b_hh", "dense_w", "dense_b")


class DataQualityError(ValueError):
    """Raised when inputs contain NaN or infinite values."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass
class ModelMeta:
    d_in: int
    hidden: int
    seq_len: int


@dataclass
class LstmLayerParams:
    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def d_in(self) -> int:
        return self.w_ih.shape[1]

    def copy(self) -> "LstmLayerParams":
        return LstmLayerParams(self.w_ih.copy(), self.w_hh.copy(),
                               self.b_ih.copy(), self.b_hh.copy())


@dataclass
class DenseLayerParams:
    w: np.ndarray
    b: np.ndarray

    def copy(self) -> "DenseLayerParams":
        return DenseLayerParams(self.w.copy(), self.b.copy())


@dataclass
class ModelParams:
    lstm: LstmLayerParams
    dense: DenseLayerParams
    meta: ModelMeta

    def copy(self) -> "ModelParams":
        return ModelParams(self.lstm.copy(), self.dense.copy(), replace(self.meta))


def params_dict(model: ModelParams) -> dict:
    """Named views of every parameter array, in PARAM_KEYS order."""
    return {
        "w_ih": model.lstm.w_ih,
        "w_hh": model.lstm.w_hh,
        "b_ih": model.lstm.b_ih,
        "b_hh": model.lstm.b_hh,
        "dense_w": model.dense.w,
        "dense_b": model.dense.b,
    }


def init_model(d_in: int, hidden: int, seq_len: int, seed: int,
               forget_bias: float = 0.0) -> ModelParams:
    """Seeded init: weights uniform on [-1/sqrt(hidden), 1/sqrt(hidden)], biases zero."""
    if d_in < 1 or hidden < 1 or seq_len < 1:
        raise ValueError(f"model dimensions must be positive, got "
                         f"d_in={d_in} hidden={hidden} seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hidden)
    lstm = LstmLayerParams(
        w_ih=rng.uniform(-bound, bound, (N_GATES * hidden, d_in)),
        w_hh=rng.uniform(-bound, bound, (N_GATES * hidden, hidden)),
        b_ih=np.zeros(N_GATES * hidden),
        b_hh=np.zeros(N_GATES * hidden),
    )
    if forget_bias:
        lstm.b_ih[hidden:2 * hidden] = forget_bias
    dense = DenseLayerParams(w=rng.uniform(-bound, bound, (1, hidden)), b=np.zeros(1))
    return ModelParams(lstm, dense, ModelMeta(d_in, hidden, seq_len))


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise DataQualityError(f"{name} contains NaN or infinite values")


def lstm_forward(model: ModelParams, x: np.ndarray):
    """Hidden-state sequence for one input sequence x of shape (T, d_in).

    Returns (h_seq, h_last) with h_seq of shape (T, hidden).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.meta.d_in:
        raise ValueError(f"expected input of shape (T, {model.meta.d_in}), got {x.shape}")
    _require_finite("input sequence", x)
    lstm = model.lstm
    _, _, h_seq = kernels.sequence_forward(lstm.w_ih, lstm.w_hh, lstm.b_ih,
                                           lstm.b_hh, x[np.newaxis])
    h_seq = h_seq[:, 0, :]
    return h_seq, h_seq[-1]


def hidden_batch(model: ModelParams, xs: np.ndarray) -> np.ndarray:
    """Final hidden states for a batch of sequences xs (N, T, d_in)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[2] != model.meta.d_in:
        raise ValueError(f"expected batch of shape (N, T, {model.meta.d_in}), got {xs.shape}")
    _require_finite("input batch", xs)
    lstm = model.lstm
    _, _, h_seq = kernels.sequence_forward(lstm.w_ih, lstm.w_hh, lstm.b_ih, lstm.b_hh, xs)
    return h_seq[-1]


def predict_batch(model: ModelParams, xs: np.ndarray) -> np.ndarray:
    h_last = hidden_batch(model, xs)
    return h_last @ model.dense.w[0] + model.dense.b[0]


def predict(model: ModelParams, x: np.ndarray) -> float:
    """Scalar health-indicator prediction for one sequence of seq_len rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.meta.seq_len:
        raise ValueError(f"expected {model.meta.seq_len} timesteps, got input shape {x.shape}")
    return float(predict_batch(model, x[np.newaxis])[0])


def mse_loss(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction/label shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("mse_loss of an empty batch is undefined")
    diff = preds - labels
    return float(np.mean(diff * diff))


def grad_global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Scale all gradients in place so their global norm is at most clip_norm."""
    norm = grad_global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def backward(model: ModelParams, xs: np.ndarray, ys: np.ndarray,
             clip_norm: float | None = None):
    """Gradients of the mean batch MSE w.r.t. every parameter.

    xs: (B, T, d_in), ys: (B,). Returns (grads, loss) where grads is a dict
    keyed by PARAM_KEYS. With clip_norm set, the gradient set is rescaled to
    that global norm when it exceeds it.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 3:
        raise ValueError(f"expected batch of shape (B, T, d_in), got {xs.shape}")
    if ys.shape != (xs.shape[0],):
        raise ValueError(f"labels must be shape ({xs.shape[0]},), got {ys.shape}")
    _require_finite("input batch", xs)
    _require_finite("labels", ys)

    lstm = model.lstm
    gates, z_seq, h_seq = kernels.sequence_forward(lstm.w_ih, lstm.w_hh,
                                                   lstm.b_ih, lstm.b_hh, xs)
    h_last = h_seq[-1]
    preds = h_last @ model.dense.w[0] + model.dense.b[0]
    resid = preds - ys
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise TrainingDivergedError("training loss is no longer finite")

    batch = xs.shape[0]
    dy = (2.0 / batch) * resid
    d_dense_w = (dy @ h_last)[np.newaxis, :]
    d_dense_b = np.array([dy.sum()])
    dh_last = np.outer(dy, model.dense.w[0])
    d_w_ih, d_w_hh, d_bias = kernels.sequence_backward(lstm.w_hh, xs, gates,
                                                       z_seq, h_seq, dh_last)
    grads = {
        "w_ih": d_w_ih,
        "w_hh": d_w_hh,
        "b_ih": d_bias,
        "b_hh": d_bias.copy(),
        "dense_w": d_dense_w,
        "dense_b": d_dense_b,
    }
    if clip_norm is not None:
        clip_gradients(grads, clip_norm)
    return grads, loss


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters for Adam."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ModelParams, lr: float = 1e-3) -> "AdamState":
        state = cls(lr=lr)
        for key, p in params_dict(model).items():
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        return state


def adam_step(state: AdamState, model: ModelParams, grads: dict,
              trainable: tuple | None = None) -> None:
    """One Adam update with bias correction, applied in place.

    `trainable` restricts the update to a subset of PARAM_KEYS; moments of the
    remaining parameters are left untouched, so frozen parameters stay
    bitwise identical.
    """
    params = params_dict(model)
    keys = PARAM_KEYS if trainable is None else trainable
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for key in keys:
        g = grads[key]
        p = params[key]
        m = state.m[key]
        v = state.v[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {key} of shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
