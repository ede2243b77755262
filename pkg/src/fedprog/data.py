"""Degradation-data pipeline: loading, standardization, windowing, synthesis.

Two data regimes are supported. Cyclic records are repeated charge/discharge
cycles whose label is an end-of-cycle health value (battery capacity); every
cycle is truncated to a common length and becomes one training window.
Non-cyclic records are single run-to-failure series (turbofan engines) cut
into sliding windows labelled with remaining useful life.

Features are standardized per client with train-split statistics; labels are
standardized the same way and mapped back to raw units for all reported
errors. Raw data never leaves the client that owns it.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

# sensor columns that hold constant readings and carry no degradation signal
SENSOR_DROP = (1, 5, 6, 10, 16, 18, 19)
KEPT_SENSORS = tuple(s for s in range(1, 22) if s not in SENSOR_DROP)
RUL_CAP_DEFAULT = 130


class CsvFormatError(ValueError):
    """Raised when a data file does not match its documented layout."""


class SequenceTooShortError(ValueError):
    """Raised when a series has fewer timesteps than the window length."""


@dataclass
class CyclicRecord:
    cycle: int
    timestamps: np.ndarray      # (T,) seconds or sample indices within the cycle
    features: np.ndarray        # (M, T)
    label: float                # end-of-cycle health value, e.g. capacity in Ah


@dataclass
class EngineRecord:
    engine_id: int
    features: np.ndarray        # (M, T)
    lifespan: int
    rul_labels: np.ndarray      # (T,)


@dataclass
class StandardizationStats:
    mean: np.ndarray            # (M,)
    std: np.ndarray             # (M,)
    label_mean: float = 0.0
    label_std: float = 1.0


@dataclass
class SequenceDataset:
    """Stacked fixed-length windows with standardized features and labels."""
    features: np.ndarray        # (N, T, M)
    labels: np.ndarray          # (N,) in standardized label units
    stats: StandardizationStats

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]

    def raw_labels(self) -> np.ndarray:
        return self.labels * self.stats.label_std + self.stats.label_mean


@dataclass
class ClientData:
    train: SequenceDataset
    validation: SequenceDataset
    test: SequenceDataset


def standardize_fit(samples: np.ndarray) -> StandardizationStats:
    """Per-feature mean and population standard deviation of (N, M) samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"expected (n_samples, n_features), got shape {samples.shape}")
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples per feature to standardize")
    if not np.isfinite(samples).all():
        raise ValueError("samples contain NaN or infinite values")
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    zero = np.flatnonzero(std == 0.0)
    if zero.size:
        raise ValueError(f"feature {int(zero[0])} has zero variance; cannot standardize")
    return StandardizationStats(mean=mean, std=std)


def standardize_apply(stats: StandardizationStats, features: np.ndarray) -> np.ndarray:
    """Standardize an (..., M) feature array with previously fit statistics."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"feature dimension {features.shape[-1]} does not match "
                         f"statistics for {stats.mean.shape[0]} features")
    return (features - stats.mean) / stats.std


def piecewise_rul_labels(lifespan: int, cap: int = RUL_CAP_DEFAULT) -> np.ndarray:
    """RUL targets min(cap, lifespan - t) for t = 1..lifespan."""
    if lifespan < 1:
        raise ValueError(f"lifespan must be positive, got {lifespan}")
    if cap < 1:
        raise ValueError(f"cap must be positive, got {cap}")
    t = np.arange(1, lifespan + 1)
    return np.minimum(float(cap), (lifespan - t).astype(np.float64))


def segment_cycles(records: list, seq_len: int | None = None):
    """Cut every cycle to its last seq_len timesteps and pair it with its label.

    seq_len defaults to the shortest cycle in `records`. Returns raw
    (windows (S, T, M), labels (S,)).
    """
    if not records:
        raise ValueError("cannot segment an empty record list")
    lengths = [r.features.shape[1] for r in records]
    if seq_len is None:
        seq_len = min(lengths)
    if seq_len < 1:
        raise ValueError(f"window length must be positive, got {seq_len}")
    short = [r.cycle for r, n in zip(records, lengths) if n < seq_len]
    if short:
        raise ValueError(f"cycles {short} are shorter than the window length {seq_len}")
    windows = np.stack([r.features[:, -seq_len:].T for r in records])
    labels = np.array([r.label for r in records], dtype=np.float64)
    return windows, labels


def sliding_windows(features: np.ndarray, labels: np.ndarray, window: int, step: int = 1):
    """All length-`window` slices of one series, each labelled at its final step.

    features: (M, T), labels: (T,). Returns (windows (S, window, M), labels (S,))
    with S = floor((T - window) / step) + 1.
    """
    t_len = features.shape[1]
    if window < 1 or step < 1:
        raise ValueError(f"window and step must be positive, got {window}, {step}")
    if t_len < window:
        raise SequenceTooShortError(f"series of length {t_len} is shorter than "
                                    f"the window length {window}")
    starts = range(0, t_len - window + 1, step)
    out = np.stack([features[:, s:s + window].T for s in starts])
    lab = np.array([labels[s + window - 1] for s in starts], dtype=np.float64)
    return out, lab


def engine_training_windows(records: list, window: int, step: int = 1):
    """Sliding windows pooled over engines; too-short engines are skipped.

    Returns (windows, labels, excluded_ids). Exclusions are logged, mirroring
    how engines with fewer cycles than the window are left out of a fleet.
    """
    parts, labels, excluded = [], [], []
    for rec in records:
        try:
            w, y = sliding_windows(rec.features, rec.rul_labels, window, step)
        except SequenceTooShortError:
            excluded.append(rec.engine_id)
            continue
        parts.append(w)
        labels.append(y)
    if excluded:
        log.warning("excluded %d engine(s) shorter than %d cycles: %s",
                    len(excluded), window, excluded)
    if not parts:
        raise ValueError("no engine has enough cycles for the requested window")
    return np.concatenate(parts), np.concatenate(labels), excluded


def engine_final_windows(records: list, window: int):
    """The last window of each engine with its end-of-series RUL label.

    Used for test fleets, where the task is one prediction per engine at the
    final observed cycle. Returns (windows, labels, excluded_ids).
    """
    parts, labels, excluded = [], [], []
    for rec in records:
        if rec.features.shape[1] < window:
            excluded.append(rec.engine_id)
            continue
        parts.append(rec.features[:, -window:].T)
        labels.append(rec.rul_labels[-1])
    if excluded:
        log.warning("excluded %d test engine(s) shorter than %d cycles: %s",
                    len(excluded), window, excluded)
    if not parts:
        raise ValueError("no engine has enough cycles for the requested window")
    return np.stack(parts), np.array(labels, dtype=np.float64), excluded


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def _parse_float(text: str, path, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise CsvFormatError(f"{path}:{line_no}: not a number: {text!r}") from None


def load_cyclic_csv(path) -> list:
    """Read one client's cyclic file: client_id,cycle,t,feat_1..feat_M,label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError(f"{path}: empty file")
        if (len(header) < 5 or header[:3] != ["client_id", "cycle", "t"]
                or header[-1] != "label"):
            raise CsvFormatError(f"{path}: unexpected header {header!r}")
        n_feat = len(header) - 4
        expect = [f"feat_{i}" for i in range(1, n_feat + 1)]
        if header[3:-1] != expect:
            raise CsvFormatError(f"{path}: feature columns {header[3:-1]!r} "
                                 f"do not match {expect!r}")
        rows_by_cycle: dict = {}
        client = None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{line_no}: expected {len(header)} "
                                     f"fields, got {len(row)}")
            if client is None:
                client = row[0]
            elif row[0] != client:
                raise CsvFormatError(f"{path}:{line_no}: multiple client ids in one "
                                     f"file ({client!r} and {row[0]!r})")
            cyc = int(_parse_float(row[1], path, line_no))
            vals = [_parse_float(v, path, line_no) for v in row[2:]]
            rows_by_cycle.setdefault(cyc, []).append(vals)
    if not rows_by_cycle:
        raise CsvFormatError(f"{path}: no data rows")
    records = []
    for cyc in sorted(rows_by_cycle):
        rows = sorted(rows_by_cycle[cyc], key=lambda r: r[0])
        arr = np.array(rows, dtype=np.float64)
        labels = set(arr[:, -1].tolist())
        if len(labels) != 1:
            raise CsvFormatError(f"{path}: cycle {cyc} has inconsistent labels {labels}")
        records.append(CyclicRecord(cycle=cyc, timestamps=arr[:, 0],
                                    features=arr[:, 1:-1].T, label=float(arr[0, -1])))
    return records


def write_cyclic_csv(path, records: list, client_id) -> None:
    n_feat = records[0].features.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "cycle", "t"]
                        + [f"feat_{i}" for i in range(1, n_feat + 1)] + ["label"])
        for rec in records:
            for k in range(rec.features.shape[1]):
                writer.writerow([client_id, rec.cycle, repr(float(rec.timestamps[k]))]
                                + [repr(float(v)) for v in rec.features[:, k]]
                                + [repr(float(rec.label))])


ENGINE_HEADER = (["engine_id", "cycle"]
                 + [f"setting_{i}" for i in (1, 2, 3)]
                 + [f"sensor_{i}" for i in range(1, 22)])


def load_engine_csv(path, cap: int = RUL_CAP_DEFAULT) -> list:
    """Read an engine fleet file; returns records with run-to-failure labels.

    The seven constant sensors are dropped, leaving 14 features per cycle.
    For test fleets (series truncated before failure) follow up with
    attach_true_rul to replace the labels.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ENGINE_HEADER:
            raise CsvFormatError(f"{path}: unexpected header {header!r}")
        rows_by_engine: dict = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ENGINE_HEADER):
                raise CsvFormatError(f"{path}:{line_no}: expected "
                                     f"{len(ENGINE_HEADER)} fields, got {len(row)}")
            try:
                eng = int(row[0])
            except ValueError:
                raise CsvFormatError(f"{path}:{line_no}: bad engine id {row[0]!r}") from None
            cyc = int(_parse_float(row[1], path, line_no))
            sensors = [_parse_float(v, path, line_no) for v in row[5:]]
            rows_by_engine.setdefault(eng, []).append((cyc, sensors))
    if not rows_by_engine:
        raise CsvFormatError(f"{path}: no data rows")
    kept = [s - 1 for s in KEPT_SENSORS]
    records = []
    for eng, rows in rows_by_engine.items():
        rows.sort(key=lambda r: r[0])
        sensors = np.array([r[1] for r in rows], dtype=np.float64)   # (T, 21)
        feats = sensors[:, kept].T
        t_len = feats.shape[1]
        records.append(EngineRecord(engine_id=eng, features=feats, lifespan=t_len,
                                    rul_labels=piecewise_rul_labels(t_len, cap)))
    return records


def attach_true_rul(records: list, true_ruls: list, cap: int = RUL_CAP_DEFAULT) -> list:
    """Rebuild labels for truncated test engines from their known final RUL."""
    if len(records) != len(true_ruls):
        raise ValueError(f"{len(records)} engines but {len(true_ruls)} RUL values")
    out = []
    for rec, final in zip(records, true_ruls):
        t_len = rec.features.shape[1]
        back = np.arange(t_len - 1, -1, -1, dtype=np.float64)
        labels = np.minimum(float(cap), final + back)
        out.append(replace(rec, lifespan=t_len + int(final), rul_labels=labels))
    return out


def load_rul_file(path) -> list:
    ruls = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                ruls.append(int(line))
            except ValueError:
                raise CsvFormatError(f"{path}:{line_no}: not an integer RUL: "
                                     f"{line!r}") from None
    return ruls


def write_engine_csv(path, records: list) -> None:
    """Write engines in the 21-sensor layout; dropped sensors become constants."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ENGINE_HEADER)
        for rec in records:
            t_len = rec.features.shape[1]
            full = np.full((21, t_len), 0.5)
            for row, s in enumerate(KEPT_SENSORS):
                full[s - 1] = rec.features[row]
            for k in range(t_len):
                writer.writerow([rec.engine_id, k + 1, "0.0", "0.0", "0.0"]
                                + [repr(float(v)) for v in full[:, k]])


def write_rul_file(path, true_ruls: list) -> None:
    with open(path, "w") as fh:
        for r in true_ruls:
            fh.write(f"{int(r)}\n")


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def gen_synthetic_cyclic(n_clients: int, cycles_per_client: int, seed: int,
                         heterogeneity: float = 0.0) -> list:
    """Battery-style fleets: per-client capacity fade with regeneration bumps.

    Capacity decays monotonically apart from small periodic recovery; voltage
    and temperature trajectories are deterministic functions of the cycle's
    capacity plus sensor noise, and cycle length shrinks as the cell ages.
    `heterogeneity` spreads the fade rate across clients; at 0 every client
    is drawn from the same distribution.
    """
    if n_clients < 1 or cycles_per_client < 2:
        raise ValueError("need at least one client and two cycles per client")
    rated = 2.0
    base_len = 24
    spread = np.linspace(-1.0, 1.0, n_clients) if n_clients > 1 else np.zeros(1)
    clients = []
    for j in range(n_clients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        rate = 0.30 * (1.0 + 0.6 * heterogeneity * spread[j])
        period = int(rng.integers(10, 15))
        records = []
        for s in range(cycles_per_client):
            frac = s / (cycles_per_client - 1)
            trend = rated * (1.0 - rate * frac)
            regen = 0.05 * rated * math.exp(-0.6 * (s % period))
            cap = trend + regen + rng.normal(0.0, 0.004)
            t_len = int(round(base_len * (0.55 + 0.45 * cap / rated))) + int(rng.integers(0, 2))
            u = (np.arange(t_len) + 1.0) / t_len
            gamma = 1.5 + 2.5 * (cap / rated)
            volt = 4.2 - 1.7 * u ** gamma + rng.normal(0.0, 0.08, t_len)
            temp = 24.0 + 8.0 * u * (rated / cap) + rng.normal(0.0, 0.65, t_len)
            records.append(CyclicRecord(cycle=s, timestamps=np.arange(t_len, dtype=np.float64),
                                        features=np.vstack([volt, temp]), label=float(cap)))
        clients.append(records)
    return clients


_ENGINE_BASE = 0.4 + 0.08 * np.arange(14)
_ENGINE_AMP = np.array([0.9, -0.7, 0.8, -0.5, 0.6, -0.9, 0.7,
                        -0.6, 0.5, -0.8, 0.9, -0.4, 0.6, -0.7])


def gen_synthetic_noncyclic(n_engines: int, lifespan_range: tuple, seed: int,
                            knee_fraction: float = 0.55,
                            cap: int = RUL_CAP_DEFAULT) -> list:
    """Turbofan-style run-to-failure fleets with a seeded degradation knee.

    Each of the 14 sensors is flat noise until the engine's knee point, then
    drifts monotonically until failure. Labels follow the capped piecewise
    RUL scheme.
    """
    lo, hi = lifespan_range
    if not (2 <= lo <= hi):
        raise ValueError(f"bad lifespan range {lifespan_range}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    records = []
    for e in range(n_engines):
        life = int(rng.integers(lo, hi + 1))
        knee = int(round(life * knee_fraction * rng.uniform(0.7, 1.3)))
        knee = min(max(knee, 2), life - 2)
        t = np.arange(1, life + 1, dtype=np.float64)
        prog = np.clip((t - knee) / (life - knee), 0.0, None) ** 1.4
        noise = rng.normal(0.0, 0.03, (14, life))
        feats = _ENGINE_BASE[:, None] + _ENGINE_AMP[:, None] * prog[None, :] + noise
        records.append(EngineRecord(engine_id=e + 1, features=feats, lifespan=life,
                                    rul_labels=piecewise_rul_labels(life, cap)))
    return records


def truncate_for_test(records: list, seed: int, cap: int = RUL_CAP_DEFAULT,
                      frac_range: tuple = (0.45, 0.95)):
    """Cut run-to-failure engines at a seeded point before failure.

    Returns (truncated records, true final RULs), mimicking how test fleets
    are published: partial histories plus the ground-truth remaining life.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 15485863]))
    out, ruls = [], []
    for rec in records:
        life = rec.lifespan
        observed = int(round(life * rng.uniform(*frac_range)))
        observed = min(max(observed, 2), life - 1)
        true_rul = life - observed
        back = np.arange(observed - 1, -1, -1, dtype=np.float64)
        out.append(replace(rec, features=rec.features[:, :observed],
                           rul_labels=np.minimum(float(cap), true_rul + back)))
        ruls.append(true_rul)
    return out, ruls


# ---------------------------------------------------------------------------
# Client partitioning and dataset assembly
# ---------------------------------------------------------------------------

def _lifespan_bucket(lifespan: int, boundaries: tuple) -> int:
    # <b0 | [b0, b1] | >b1 for two boundaries; middle buckets are half-open
    # when more boundaries are given, with the last middle one upper-inclusive
    if lifespan < boundaries[0]:
        return 0
    if lifespan > boundaries[-1]:
        return len(boundaries)
    for i in range(1, len(boundaries)):
        if lifespan < boundaries[i]:
            return i
    return len(boundaries) - 1


def partition_clients(records: list, mode: str, n_clients: int = 3,
                      boundaries: tuple = (200, 350), seed: int = 0) -> list:
    """Split a fleet into client record lists.

    heterogeneous: bucket engines by lifespan between the given boundaries
    (one client per bucket). homogeneous: seeded shuffle into n_clients
    near-equal parts.
    """
    if mode == "heterogeneous":
        if len(boundaries) < 1 or list(boundaries) != sorted(set(boundaries)):
            raise ValueError(f"boundaries must be strictly increasing, got {boundaries}")
        buckets = [[] for _ in range(len(boundaries) + 1)]
        for rec in records:
            buckets[_lifespan_bucket(rec.lifespan, tuple(boundaries))].append(rec)
        empty = [i for i, b in enumerate(buckets) if not b]
        if empty:
            raise ValueError(f"lifespan bucket(s) {empty} received no engines")
        return buckets
    if mode == "homogeneous":
        if n_clients < 1:
            raise ValueError("need at least one client")
        order = np.random.default_rng(np.random.SeedSequence([seed, 32452843]))\
            .permutation(len(records))
        shuffled = [records[i] for i in order]
        sizes = [len(records) // n_clients + (1 if i < len(records) % n_clients else 0)
                 for i in range(n_clients)]
        out, at = [], 0
        for size in sizes:
            out.append(shuffled[at:at + size])
            at += size
        return out
    raise ValueError(f"unknown partition mode {mode!r}")


def _label_stats(stats: StandardizationStats, train_labels: np.ndarray) -> StandardizationStats:
    mean = float(train_labels.mean())
    std = float(train_labels.std())
    if std == 0.0:
        std = 1.0
    return replace(stats, label_mean=mean, label_std=std)


def _dataset(windows: np.ndarray, labels: np.ndarray,
             stats: StandardizationStats) -> SequenceDataset:
    feats = standardize_apply(stats, windows)
    lab = (labels - stats.label_mean) / stats.label_std
    return SequenceDataset(features=feats, labels=lab, stats=stats)


def split_validation(windows: np.ndarray, labels: np.ndarray, val_frac: float):
    """Hold out the final fraction of windows, preserving order."""
    n = windows.shape[0]
    n_val = int(math.floor(val_frac * n))
    if n_val >= n:
        n_val = n - 1
    cut = n - n_val
    return (windows[:cut], labels[:cut]), (windows[cut:], labels[cut:])


def build_cyclic_client(records: list, train_frac: float = 0.7,
                        seq_len: int | None = None, val_frac: float = 0.1) -> ClientData:
    """Chronological split, per-client standardization, one window per cycle."""
    if len(records) < 2:
        raise ValueError("need at least two cycles to split into train and test")
    records = sorted(records, key=lambda r: r.cycle)
    if seq_len is None:
        # late cycles are the shortest ones, so the shared length must come
        # from the full history, not the train split alone
        seq_len = min(r.features.shape[1] for r in records)
    n_train = int(round(train_frac * len(records)))
    n_train = min(max(n_train, 1), len(records) - 1)
    train_recs, test_recs = records[:n_train], records[n_train:]

    stats = standardize_fit(np.concatenate([r.features.T for r in train_recs]))
    train_w, train_y = segment_cycles(train_recs, seq_len)
    test_w, test_y = segment_cycles(test_recs, seq_len)
    stats = _label_stats(stats, train_y)

    (tr_w, tr_y), (va_w, va_y) = split_validation(train_w, train_y, val_frac)
    return ClientData(train=_dataset(tr_w, tr_y, stats),
                      validation=_dataset(va_w, va_y, stats),
                      test=_dataset(test_w, test_y, stats))


def build_engine_client(train_records: list, test_records: list, window: int,
                        step: int = 1, val_frac: float = 0.1) -> ClientData:
    """Sliding-window train set from this client's engines; final-window test set.

    The test fleet is shared across clients but transformed with this
    client's statistics, since statistics are never pooled.
    """
    stats = standardize_fit(np.concatenate([r.features.T for r in train_records]))
    train_w, train_y, _ = engine_training_windows(train_records, window, step)
    stats = _label_stats(stats, train_y)
    test_w, test_y, _ = engine_final_windows(test_records, window)

    (tr_w, tr_y), (va_w, va_y) = split_validation(train_w, train_y, val_frac)
    return ClientData(train=_dataset(tr_w, tr_y, stats),
                      validation=_dataset(va_w, va_y, stats),
                      test=_dataset(test_w, test_y, stats))


def min_cycle_length(clients: list) -> int:
    """Shortest cycle across every client's records; shared window length."""
    lengths = [r.features.shape[1] for records in clients for r in records]
    if not lengths:
        raise ValueError("no cycles provided")
    return min(lengths)
