"""Experiment driver: builds client fleets, runs training rounds, writes results.

Four algorithms share one reporting pipeline. `local` trains every client in
isolation, `central` pools all windows into a single model, `fedavg` averages
raw weights round by round, and `fedma` matches neurons across clients before
averaging, letting the fused hidden layer grow when neurons do not line up.
"""

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import client as cl
from . import data, matching, nn


@dataclass
class ExperimentConfig:
    task: str = "cyclic"            # cyclic | noncyclic
    algo: str = "fedma"             # fedma | fedavg | local | central
    seed: int = 0
    rounds: int = 10
    hidden: int = 32
    seq_len: int = 50               # window length for noncyclic data
    lr: float = 1e-3
    batch_size: int = 32
    local_epochs: int = 100         # isolated training and round-one inputs
    fedavg_epochs: int = 2          # per-round epochs under weight averaging
    retrain_epochs: int = 120       # frozen head retrain and round restarts
    patience: int = 10
    clip_norm: float = 5.0
    avg_mode: str = "per_match"
    sigma_sq: float = 1.0
    sigma0_sq: float = 10.0
    kappa: float = 1.0
    eps_scale: float = 1.0
    passes: int = 2
    rul_cap: int = 130
    partition: str = "heterogeneous"
    boundaries: tuple = (200, 350)
    n_clients: int = 3
    cycles_per_client: int = 60
    heterogeneity: float = 0.6
    n_engines: int = 24
    n_test_engines: int = 12
    lifespan_min: int = 150
    lifespan_max: int = 420
    knee_fraction: float = 0.55
    data_dir: str = ""
    record_timing: bool = False
    compute_baseline: bool = True
    threads: int = 1
    train_frac: float = 0.7
    val_frac: float = 0.1


_TASKS = ("cyclic", "noncyclic")
_ALGOS = ("fedma", "fedavg", "local", "central")


class ConfigError(ValueError):
    """A config file entry that cannot be applied."""


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(part) for part in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {text!r} as {kind.__name__}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply `key = value` lines on top of defaults.

    Blank lines and #-comments are skipped; unknown keys are errors so that
    a typo cannot silently fall back to a default.
    """
    cfg = dataclasses.replace(base) if base else ExperimentConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    types = {"str": str, "int": int, "float": float, "bool": bool, "tuple": tuple}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        kind = types[kinds[key]] if isinstance(kinds[key], str) else kinds[key]
        setattr(cfg, key, _coerce(key, kind, value))
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.task not in _TASKS:
        raise ConfigError(f"task must be one of {_TASKS}, got {cfg.task!r}")
    if cfg.algo not in _ALGOS:
        raise ConfigError(f"algo must be one of {_ALGOS}, got {cfg.algo!r}")
    if cfg.avg_mode not in ("per_match", "uniform"):
        raise ConfigError(f"avg_mode must be per_match or uniform, got {cfg.avg_mode!r}")
    if cfg.partition not in ("heterogeneous", "homogeneous"):
        raise ConfigError("partition must be heterogeneous or homogeneous, "
                          f"got {cfg.partition!r}")
    if cfg.rounds < 1 or cfg.n_clients < 1 or cfg.hidden < 1:
        raise ConfigError("rounds, n_clients and hidden must be positive")
    if len(cfg.boundaries) != 2 or cfg.boundaries[0] >= cfg.boundaries[1]:
        raise ConfigError(f"boundaries must be two increasing ints, got {cfg.boundaries}")


@dataclass
class RoundRecord:
    round: int
    algo: str
    client_rmses: list
    fed_rmse: float
    hidden_size: int
    imps: list = field(default_factory=list)   # empty: not applicable
    seconds: float = 0.0


METRICS_HEADER = "round,algo,client_id,client_rmse,fed_rmse,hidden_size,imp,seconds"


def write_metrics_csv(path, records: list) -> None:
    lines = [METRICS_HEADER]
    for rec in records:
        for j, rmse in enumerate(rec.client_rmses):
            imp = repr(rec.imps[j]) if rec.imps else ""
            lines.append(f"{rec.round},{rec.algo},{j},{repr(rmse)},"
                         f"{repr(rec.fed_rmse)},{rec.hidden_size},{imp},"
                         f"{repr(rec.seconds)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KEYS = frozenset({
    "version", "task", "d_in", "hidden", "seq_len", "gate_order",
    "lstm_w_ih", "lstm_w_hh", "lstm_b_ih", "lstm_b_hh",
    "dense_w", "dense_b", "round", "seed"})


def save_checkpoint(path, model: nn.ModelParams, task: str,
                    round_index: int, seed: int) -> None:
    payload = {
        "version": "1",
        "task": task,
        "d_in": model.meta.d_in,
        "hidden": model.meta.hidden,
        "seq_len": model.meta.seq_len,
        "gate_order": list(nn.GATE_ORDER),
        "lstm_w_ih": model.lstm.w_ih.ravel().tolist(),
        "lstm_w_hh": model.lstm.w_hh.ravel().tolist(),
        "lstm_b_ih": model.lstm.b_ih.tolist(),
        "lstm_b_hh": model.lstm.b_hh.tolist(),
        "dense_w": model.dense.w.ravel().tolist(),
        "dense_b": model.dense.b.tolist(),
        "round": round_index,
        "seed": seed,
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path):
    """Returns (model, info dict with task, round and seed)."""
    payload = json.loads(Path(path).read_text())
    keys = set(payload)
    if keys != CHECKPOINT_KEYS:
        missing = sorted(CHECKPOINT_KEYS - keys)
        extra = sorted(keys - CHECKPOINT_KEYS)
        raise ValueError(f"bad checkpoint: missing {missing}, unexpected {extra}")
    if payload["version"] != "1":
        raise ValueError(f"unsupported checkpoint version {payload['version']!r}")
    if list(payload["gate_order"]) != list(nn.GATE_ORDER):
        raise ValueError(f"unsupported gate order {payload['gate_order']}")
    d_in, hidden = payload["d_in"], payload["hidden"]
    lstm = nn.LstmLayerParams(
        w_ih=np.array(payload["lstm_w_ih"]).reshape(4 * hidden, d_in),
        w_hh=np.array(payload["lstm_w_hh"]).reshape(4 * hidden, hidden),
        b_ih=np.array(payload["lstm_b_ih"]),
        b_hh=np.array(payload["lstm_b_hh"]))
    dense = nn.DenseLayerParams(w=np.array(payload["dense_w"]).reshape(1, hidden),
                                b=np.array(payload["dense_b"]))
    meta = nn.ModelMeta(d_in=d_in, hidden=hidden, seq_len=payload["seq_len"])
    info = {"task": payload["task"], "round": payload["round"],
            "seed": payload["seed"]}
    return nn.ModelParams(meta=meta, lstm=lstm, dense=dense), info


# ---------------------------------------------------------------------------
# Fleet assembly
# ---------------------------------------------------------------------------

def build_client_data(cfg: ExperimentConfig) -> list:
    """One ClientData per client, from data_dir when set, synthetic otherwise."""
    if cfg.task == "cyclic":
        if cfg.data_dir:
            root = Path(cfg.data_dir)
            paths = sorted(root.glob("cyclic_client_*.csv"))
            if not paths:
                raise FileNotFoundError(f"no cyclic_client_*.csv under {root}")
            fleets = [data.load_cyclic_csv(p) for p in paths]
        else:
            fleets = data.gen_synthetic_cyclic(cfg.n_clients, cfg.cycles_per_client,
                                               cfg.seed, cfg.heterogeneity)
        # every client shares one window length so fused layers line up
        shared = data.min_cycle_length(fleets)
        return [data.build_cyclic_client(records, cfg.train_frac, shared,
                                         cfg.val_frac)
                for records in fleets]

    if cfg.data_dir:
        root = Path(cfg.data_dir)
        train = data.load_engine_csv(root / "engine_train.csv", cfg.rul_cap)
        test = data.load_engine_csv(root / "engine_test.csv", cfg.rul_cap)
        ruls = data.load_rul_file(root / "engine_test_rul.txt")
        test = data.attach_true_rul(test, ruls, cfg.rul_cap)
    else:
        span = (cfg.lifespan_min, cfg.lifespan_max)
        train = data.gen_synthetic_noncyclic(cfg.n_engines, span, cfg.seed,
                                             cfg.knee_fraction, cfg.rul_cap)
        held = data.gen_synthetic_noncyclic(cfg.n_test_engines, span,
                                            cfg.seed + 1, cfg.knee_fraction,
                                            cfg.rul_cap)
        test, _ = data.truncate_for_test(held, cfg.seed, cfg.rul_cap)
    parts = data.partition_clients(train, cfg.partition, cfg.n_clients,
                                   cfg.boundaries, cfg.seed)
    return [data.build_engine_client(part, test, cfg.seq_len, 1, cfg.val_frac)
            for part in parts]


def build_fleet(cfg: ExperimentConfig):
    """Returns (client states, test sets, shared init model).

    Clients get independently seeded initial weights: isolated fleets train
    from their own starting points, which is the regime neuron matching is
    built for. The shared init is what weight averaging broadcasts first.
    """
    client_data = build_client_data(cfg)
    d_in = client_data[0].train.features.shape[2]
    seq_len = client_data[0].train.seq_len
    init = nn.init_model(d_in, cfg.hidden, seq_len, seed=cfg.seed)
    states = [cl.make_client(j, nn.init_model(d_in, cfg.hidden, seq_len,
                                              seed=cfg.seed * 1000 + j),
                             cd.train, cd.validation,
                             base_seed=cfg.seed, lr=cfg.lr)
              for j, cd in enumerate(client_data)]
    return states, [cd.test for cd in client_data], init


def _map_clients(fn, states: list, threads: int) -> list:
    if threads > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, states))
    return [fn(state) for state in states]


def _broadcast(states: list, model: nn.ModelParams, lr: float) -> None:
    for state in states:
        state.model = model.copy()
        state.reset_optimizer(lr)
    for state in states:
        for key, value in nn.params_dict(model).items():
            if not np.array_equal(nn.params_dict(state.model)[key], value):
                raise AssertionError("broadcast copy diverged from the fused model")


def _evaluate_global(model: nn.ModelParams, tests: list) -> list:
    return [cl.evaluate_rmse(model, t) for t in tests]


def _improvements(local_rmses, fed_rmses) -> list:
    return [(lo - fe) / lo for lo, fe in zip(local_rmses, fed_rmses)]


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------

def train_local_models(states: list, cfg: ExperimentConfig) -> None:
    def work(state):
        cl.train_local(state, cfg.local_epochs, cfg.batch_size,
                       cfg.patience, cfg.clip_norm)
        return None
    _map_clients(work, states, cfg.threads)


def run_local_only(states: list, tests: list, cfg: ExperimentConfig) -> list:
    start = time.perf_counter()
    train_local_models(states, cfg)
    rmses = [cl.evaluate_rmse(s.model, t) for s, t in zip(states, tests)]
    seconds = time.perf_counter() - start if cfg.record_timing else 0.0
    record = RoundRecord(round=0, algo="local", client_rmses=rmses,
                         fed_rmse=float(np.mean(rmses)),
                         hidden_size=cfg.hidden, seconds=seconds)
    return [record]


def run_central(states: list, tests: list, cfg: ExperimentConfig,
                init: nn.ModelParams) -> list:
    start = time.perf_counter()
    feats = np.concatenate([s.train.features for s in states])
    labels = np.concatenate([s.train.labels for s in states])
    va_feats = np.concatenate([s.validation.features for s in states])
    va_labels = np.concatenate([s.validation.labels for s in states])
    stats = states[0].train.stats  # placeholder; evaluation uses each test's own
    pooled = cl.make_client(0, init,
                            data.SequenceDataset(feats, labels, stats),
                            data.SequenceDataset(va_feats, va_labels, stats),
                            base_seed=cfg.seed, lr=cfg.lr)
    cl.train_local(pooled, cfg.local_epochs, cfg.batch_size,
                   cfg.patience, cfg.clip_norm)
    rmses = _evaluate_global(pooled.model, tests)
    seconds = time.perf_counter() - start if cfg.record_timing else 0.0
    record = RoundRecord(round=0, algo="central", client_rmses=rmses,
                         fed_rmse=float(np.mean(rmses)),
                         hidden_size=cfg.hidden, seconds=seconds)
    return [record], pooled.model


def fedavg_fuse(models: list, fractions: np.ndarray) -> nn.ModelParams:
    """Dataset-size weighted average of identically shaped models."""
    fused = models[0].copy()
    for key in nn.PARAM_KEYS:
        stack = np.stack([nn.params_dict(m)[key] for m in models])
        weights = fractions.reshape((-1,) + (1,) * (stack.ndim - 1))
        nn.params_dict(fused)[key][...] = matching.weighted_sum(stack, weights)
    return fused


def run_fedavg(states: list, tests: list, cfg: ExperimentConfig,
               init: nn.ModelParams, baseline: list | None) -> tuple:
    sizes = np.array([s.train.n for s in states], dtype=np.float64)
    fractions = sizes / sizes.sum()
    records = []
    best = (np.inf, None)
    global_model = init
    for round_index in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        _broadcast(states, global_model, cfg.lr)

        def work(state):
            cl.train_local(state, cfg.fedavg_epochs, cfg.batch_size,
                           patience=None, clip_norm=cfg.clip_norm)
            return None
        _map_clients(work, states, cfg.threads)
        global_model = fedavg_fuse([s.model for s in states], fractions)
        rmses = _evaluate_global(global_model, tests)
        seconds = time.perf_counter() - start if cfg.record_timing else 0.0
        imps = _improvements(baseline, rmses) if baseline else []
        fed = float(np.mean(rmses))
        records.append(RoundRecord(round=round_index, algo="fedavg",
                                   client_rmses=rmses, fed_rmse=fed,
                                   hidden_size=cfg.hidden, imps=imps,
                                   seconds=seconds))
        if fed < best[0]:
            best = (fed, global_model.copy())
    return records, best[1]


def fuse_matched(states: list, cfg: ExperimentConfig, round_seed: int) -> tuple:
    """Match hidden neurons, average the aligned layers, retrain the heads.

    Returns (global model, global hidden size). Client states are left
    holding their frozen-retrained head models; the caller rebroadcasts.
    """
    match_cfg = matching.MatchConfig(
        sigma_sq=cfg.sigma_sq, sigma0_sq=cfg.sigma0_sq, kappa=cfg.kappa,
        eps_scale=cfg.eps_scale, passes=cfg.passes, avg_mode=cfg.avg_mode)
    vectors = [matching.extract_neuron_vectors(s.model.lstm) for s in states]
    assignments, pool = matching.bbp_map_match(vectors, match_cfg,
                                               seed=round_seed)
    global_size = pool.size

    scattered, masks = [], []
    for state, assignment in zip(states, assignments):
        layer, mask = matching.scatter_layer(state.model.lstm, assignment,
                                             global_size)
        scattered.append(layer)
        masks.append(mask)
    global_lstm = matching.matched_average_layer(scattered, masks, cfg.avg_mode)

    d_in = states[0].model.meta.d_in
    seq_len = states[0].model.meta.seq_len
    meta = nn.ModelMeta(d_in=d_in, hidden=global_size, seq_len=seq_len)

    def work(pair):
        state, assignment = pair
        head = np.zeros((1, global_size))
        head[0, assignment] = state.model.dense.w[0]
        state.model = nn.ModelParams(
            meta=meta,
            lstm=nn.LstmLayerParams(
                w_ih=global_lstm.w_ih.copy(), w_hh=global_lstm.w_hh.copy(),
                b_ih=global_lstm.b_ih.copy(), b_hh=global_lstm.b_hh.copy()),
            dense=nn.DenseLayerParams(w=head, b=state.model.dense.b.copy()))
        state.reset_optimizer(cfg.lr)
        cl.retrain_frozen_prefix(state, 1, cfg.retrain_epochs, cfg.batch_size,
                                 cfg.patience, cfg.clip_norm)
        return None
    _map_clients(work, list(zip(states, assignments)), cfg.threads)

    global_dense = matching.average_output_layer(
        [s.model.dense for s in states], assignments, global_size, cfg.avg_mode)
    fused = nn.ModelParams(meta=meta, lstm=global_lstm, dense=global_dense)
    return fused, global_size


def run_fedma(states: list, tests: list, cfg: ExperimentConfig,
              baseline: list | None) -> tuple:
    records = []
    best = (np.inf, None)
    for round_index in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        if round_index > 1:
            # restart from the fused model so neurons can specialize again
            def work(state):
                cl.train_local(state, cfg.retrain_epochs, cfg.batch_size,
                               cfg.patience, cfg.clip_norm)
                return None
            _map_clients(work, states, cfg.threads)
        fused, global_size = fuse_matched(states, cfg,
                                          round_seed=cfg.seed + round_index)
        rmses = _evaluate_global(fused, tests)
        seconds = time.perf_counter() - start if cfg.record_timing else 0.0
        imps = _improvements(baseline, rmses) if baseline else []
        fed = float(np.mean(rmses))
        records.append(RoundRecord(round=round_index, algo="fedma",
                                   client_rmses=rmses, fed_rmse=fed,
                                   hidden_size=global_size, imps=imps,
                                   seconds=seconds))
        if fed < best[0]:
            best = (fed, fused.copy())
        _broadcast(states, fused, cfg.lr)
    return records, best[1]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir) -> list:
    """Run one experiment and write metrics.csv, config.txt and checkpoint.json."""
    validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    states, tests, init = build_fleet(cfg)

    records = []
    if cfg.algo == "local":
        records = run_local_only(states, tests, cfg)
        rmses = records[0].client_rmses
        best_model = states[int(np.argmin(rmses))].model
        best_round = 0
    elif cfg.algo == "central":
        records, best_model = run_central(states, tests, cfg, init)
        best_round = 0
    else:
        baseline = None
        if cfg.compute_baseline:
            records = run_local_only(states, tests, cfg)
            baseline = records[0].client_rmses
        if cfg.algo == "fedavg":
            if cfg.compute_baseline:
                # weight averaging starts from the shared init, not the
                # locally trained models the baseline produced
                _broadcast(states, init, cfg.lr)
            fl_records, best_model = run_fedavg(states, tests, cfg, init,
                                                baseline)
        else:
            if not cfg.compute_baseline:
                train_local_models(states, cfg)  # round-one inputs
            fl_records, best_model = run_fedma(states, tests, cfg, baseline)
        records = records + fl_records
        best_round = min(fl_records, key=lambda r: r.fed_rmse).round

    write_metrics_csv(out / "metrics.csv", records)
    (out / "config.txt").write_text(format_config(cfg))
    save_checkpoint(out / "checkpoint.json", best_model, cfg.task,
                    best_round, cfg.seed)
    return records
