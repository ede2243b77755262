"""Client-side training, evaluation and introspection.

A client owns its model, optimizer, data splits and RNG; nothing here ever
reads another client's state, which is what makes round-level concurrency
safe and per-client results independent of scheduling order.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import SequenceDataset

DENSE_KEYS = ("dense_w", "dense_b")


@dataclass
class ClientState:
    client_id: int
    model: nn.ModelParams
    optimizer: nn.AdamState
    train: SequenceDataset
    validation: SequenceDataset
    rng_seed: int
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.rng_seed)

    def reset_optimizer(self, lr: float) -> None:
        self.optimizer = nn.AdamState.for_model(self.model, lr=lr)


def make_client(client_id: int, model: nn.ModelParams, train: SequenceDataset,
                validation: SequenceDataset, base_seed: int,
                lr: float = 1e-3) -> ClientState:
    """Client seeded as base_seed + client_id with a fresh optimizer."""
    model = model.copy()
    return ClientState(client_id=client_id, model=model,
                       optimizer=nn.AdamState.for_model(model, lr=lr),
                       train=train, validation=validation,
                       rng_seed=base_seed + client_id)


def _epoch(state: ClientState, batch_size: int, clip_norm, trainable) -> float:
    n = state.train.n
    order = state.rng.permutation(n)
    total = 0.0
    for at in range(0, n, batch_size):
        idx = order[at:at + batch_size]
        grads, loss = nn.backward(state.model, state.train.features[idx],
                                  state.train.labels[idx], clip_norm=clip_norm)
        nn.adam_step(state.optimizer, state.model, grads, trainable=trainable)
        total += loss * idx.size
    return total / n


def _validation_loss(state: ClientState) -> float:
    preds = nn.predict_batch(state.model, state.validation.features)
    return nn.mse_loss(preds, state.validation.labels)


def _train(state: ClientState, epochs: int, batch_size: int, patience,
           clip_norm, trainable) -> list:
    if state.train.n == 0:
        raise ValueError(f"client {state.client_id} has no training windows")
    use_val = patience is not None and state.validation.n > 0
    history = []
    best_loss = np.inf
    best_model = None
    stale = 0
    for epoch in range(epochs):
        try:
            train_loss = _epoch(state, batch_size, clip_norm, trainable)
        except nn.TrainingDivergedError as exc:
            raise nn.TrainingDivergedError(
                f"client {state.client_id}, epoch {epoch}: {exc}") from exc
        val_loss = _validation_loss(state) if use_val else float("nan")
        history.append((train_loss, val_loss))
        if use_val:
            if val_loss < best_loss:
                best_loss = val_loss
                best_model = state.model.copy()
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_model is not None:
        state.model = best_model
    return history


def train_local(state: ClientState, epochs: int, batch_size: int = 32,
                patience: int | None = 10, clip_norm: float | None = 5.0) -> list:
    """Mini-batch training with early stopping on held-out validation loss.

    Stops once validation MSE has not improved for `patience` consecutive
    epochs and restores the best-validation snapshot; with patience None (or
    an empty validation split) it simply runs all epochs. Returns the
    (train_loss, val_loss) history. epochs=0 leaves the model untouched.
    """
    return _train(state, epochs, batch_size, patience, clip_norm, trainable=None)


def retrain_frozen_prefix(state: ClientState, frozen_layers: int, epochs: int,
                          batch_size: int = 32, patience: int | None = 10,
                          clip_norm: float | None = 5.0) -> list:
    """Retrain with the first `frozen_layers` layers pinned.

    The model has two layers (LSTM, dense); freezing the first leaves only
    the output head trainable. Gradients are still computed for the whole
    model (so any global-norm clipping sees the full gradient) and the frozen
    blocks' updates are simply never applied, keeping them bitwise intact.
    """
    if frozen_layers < 0 or frozen_layers >= 2:
        raise ValueError(f"frozen_layers must be 0 or 1 for a two-layer model, "
                         f"got {frozen_layers}")
    trainable = None if frozen_layers == 0 else DENSE_KEYS
    return _train(state, epochs, batch_size, patience, clip_norm, trainable)


def evaluate_rmse(model: nn.ModelParams, test: SequenceDataset,
                  batch_size: int = 256) -> float:
    """Root mean squared error on the raw (de-standardized) label scale."""
    if test.n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = np.concatenate([
        nn.predict_batch(model, test.features[at:at + batch_size])
        for at in range(0, test.n, batch_size)
    ])
    stats = test.stats
    preds_raw = preds * stats.label_std + stats.label_mean
    diff = preds_raw - test.raw_labels()
    return float(np.sqrt(np.mean(diff * diff)))


def dump_feature_extractors(model: nn.ModelParams, windows: np.ndarray,
                            neuron_indices) -> np.ndarray:
    """Final-hidden-state activations of selected neurons, one row per window."""
    neuron_indices = list(neuron_indices)
    hidden = model.meta.hidden
    bad = [i for i in neuron_indices if not 0 <= i < hidden]
    if bad:
        raise IndexError(f"neuron indices {bad} out of range for hidden size {hidden}")
    h_last = nn.hidden_batch(model, windows)
    return h_last[:, neuron_indices]


def write_feature_dump(path, activations: np.ndarray, neuron_indices) -> None:
    """CSV with columns window_index,neuron_<i>,... for plotting extractors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_index"] + [f"neuron_{i}" for i in neuron_indices])
        for k, row in enumerate(activations):
            writer.writerow([k] + [repr(float(v)) for v in row])
