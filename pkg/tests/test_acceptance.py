"""End-to-end guarantees, one test per claim.

Run with -v to get a pass/fail line per guarantee. Everything here drives
the public surface (library calls or the command line); nothing reaches
into private helpers. The heterogeneity benchmark and the CLI determinism
check are the slow ones, together around twenty seconds.
"""

import itertools
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from fedprog import client as cl
from fedprog import data
from fedprog import matching
from fedprog import nn
from fedprog import orchestrator as orch


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def assignment_minimum_by_enumeration(cost: np.ndarray) -> float:
    """Exact minimum assignment cost by dynamic programming over column
    subsets; every assignment is implicitly enumerated."""
    n, m = cost.shape
    size = 1 << m
    subsets = np.arange(size)
    popcount = np.array([bin(s).count("1") for s in range(size)])
    dp = np.full(size, np.inf)
    dp[0] = 0.0
    for r in range(n):
        ndp = np.full(size, np.inf)
        for j in range(m):
            bit = 1 << j
            src = subsets[(subsets & bit) == 0]
            tgt = src | bit
            ndp[tgt] = np.minimum(ndp[tgt], dp[src] + cost[r, j])
        dp = ndp
    return float(dp[popcount == n].min())


def assignment_minimum_by_permutations(cost: np.ndarray) -> float:
    n, m = cost.shape
    rows = range(n)
    return min(sum(cost[i, p[i]] for i in rows)
               for p in itertools.permutations(range(m), n))


def toy_dataset(rng: np.random.Generator, n: int, t_len: int, d_in: int):
    feats = rng.standard_normal((n, t_len, d_in))
    labels = feats[:, -1, 0].copy()
    stats = data.StandardizationStats(mean=np.zeros(d_in), std=np.ones(d_in))
    return data.SequenceDataset(feats, labels, stats)


def fedprog_cli(*argv):
    return subprocess.run([sys.executable, "-m", "fedprog", *argv],
                          capture_output=True, text=True)


# ---------------------------------------------------------------------------
# 1. assignment solver
# ---------------------------------------------------------------------------

def test_01_assignment_solver_matches_enumeration_on_1000_matrices():
    # Float entries are multiples of 1/64 so that every partial sum is
    # exactly representable and == comparisons are meaningful.
    rng = np.random.default_rng(20260819)
    start = time.perf_counter()
    for trial in range(1000):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(n, 11))
        if trial % 2 == 0:
            cost = rng.integers(0, 60, size=(n, m)).astype(np.float64)
        else:
            cost = rng.integers(0, 960, size=(n, m)) / 64.0
        assignment = matching.hungarian_solve(cost)
        assert sorted(set(assignment.tolist())) == sorted(assignment.tolist())
        total = float(cost[np.arange(n), assignment].sum())
        best = assignment_minimum_by_enumeration(cost)
        assert total == best
        if n <= 3:
            assert best == assignment_minimum_by_permutations(cost)
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------

def test_02_bptt_gradients_match_central_differences():
    h = 1e-5
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    for trial in range(50):
        d_in = int(rng.integers(1, 4))
        hidden = int(rng.integers(1, 5))
        t_len = int(rng.integers(1, 6))
        model = nn.init_model(d_in, hidden, t_len, seed=trial)
        xs = rng.standard_normal((2, t_len, d_in))
        ys = rng.standard_normal(2)
        grads, _ = nn.backward(model, xs, ys)
        params = nn.params_dict(model)
        for key in nn.PARAM_KEYS:
            arr = params[key]
            flat = arr.reshape(-1)
            g = grads[key].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = nn.mse_loss(nn.predict_batch(model, xs), ys)
                flat[i] = orig - h
                down = nn.mse_loss(nn.predict_batch(model, xs), ys)
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                rel = abs(numeric - g[i]) / max(1.0, abs(numeric), abs(g[i]))
                assert rel < 1e-4, (trial, key, i, numeric, g[i])
    assert time.perf_counter() - start < 30.0


# ---------------------------------------------------------------------------
# 3. permutation invariance, alone and through a fusion round
# ---------------------------------------------------------------------------

def _small_trained_fleet(cfg):
    states, tests, _ = orch.build_fleet(cfg)
    orch.train_local_models(states, cfg)
    return states, tests


def test_03_hidden_permutation_invariance_through_fusion():
    cfg = orch.ExperimentConfig(
        task="cyclic", algo="fedma", seed=5, n_clients=2, hidden=8,
        cycles_per_client=14, local_epochs=15, retrain_epochs=6,
        batch_size=4, lr=0.01, patience=None, train_frac=0.5, val_frac=0.2)
    perm_rng = np.random.default_rng(77)
    perm = perm_rng.permutation(cfg.hidden)

    states, _ = _small_trained_fleet(cfg)
    d_in = states[0].model.meta.d_in
    seq_len = states[0].model.meta.seq_len
    probes = np.random.default_rng(11).standard_normal((100, seq_len, d_in))

    # a) a consistently reordered model computes the same function
    base = states[0].model
    shuffled = matching.apply_hidden_permutation(base, perm)
    before = nn.predict_batch(base, probes)
    after = nn.predict_batch(shuffled, probes)
    assert np.max(np.abs(before - after)) < 1e-12

    # b) fusing the reordered client gives the same federated function
    fused_plain, _ = orch.fuse_matched(states, cfg, round_seed=cfg.seed + 1)
    states2, _ = _small_trained_fleet(cfg)
    states2[0].model = matching.apply_hidden_permutation(states2[0].model, perm)
    fused_perm, _ = orch.fuse_matched(states2, cfg, round_seed=cfg.seed + 1)
    gap = np.max(np.abs(nn.predict_batch(fused_plain, probes)
                        - nn.predict_batch(fused_perm, probes)))
    assert gap < 1e-10, gap


# ---------------------------------------------------------------------------
# 4. identical clients are a fixed point; identity matching is plain averaging
# ---------------------------------------------------------------------------

def test_04_identical_clients_are_a_fixed_point():
    rng = np.random.default_rng(3)
    train = toy_dataset(rng, 10, 6, 2)
    val = toy_dataset(rng, 4, 6, 2)
    seed_state = cl.make_client(0, nn.init_model(2, 5, 6, seed=3), train, val,
                                base_seed=0, lr=1e-2)
    cl.train_local(seed_state, 8, 4, None, 5.0)
    trained = seed_state.model
    probes = rng.standard_normal((40, 6, 2))
    reference = nn.predict_batch(trained, probes)

    cfg = orch.ExperimentConfig(task="cyclic", algo="fedma", retrain_epochs=0,
                                batch_size=4, lr=1e-2, patience=None)
    for n_copies in (2, 3):
        clones = [cl.make_client(j, trained, train, val, base_seed=0, lr=1e-2)
                  for j in range(n_copies)]
        fused, width = orch.fuse_matched(clones, cfg, round_seed=17)
        assert width == trained.lstm.hidden
        gap = np.max(np.abs(nn.predict_batch(fused, probes) - reference))
        assert gap < 1e-12, (n_copies, gap)

    # identity assignments must reduce matched averaging to the plain
    # uniform average, bit for bit
    for n_copies in (2, 3):
        models = [nn.init_model(2, 4, 5, seed=10 + j) for j in range(n_copies)]
        identity = [np.arange(4) for _ in models]
        scattered, masks = zip(*(matching.scatter_layer(m.lstm, a, 4)
                                 for m, a in zip(models, identity)))
        lstm = matching.matched_average_layer(list(scattered), list(masks),
                                              "per_match")
        dense = matching.average_output_layer([m.dense for m in models],
                                              identity, 4, "per_match")
        sizes = np.full(n_copies, 6.0)
        plain = orch.fedavg_fuse(models, sizes / sizes.sum())
        assert lstm.w_ih.tobytes() == plain.lstm.w_ih.tobytes()
        assert lstm.w_hh.tobytes() == plain.lstm.w_hh.tobytes()
        assert lstm.b_ih.tobytes() == plain.lstm.b_ih.tobytes()
        assert lstm.b_hh.tobytes() == plain.lstm.b_hh.tobytes()
        assert dense.w.tobytes() == plain.dense.w.tobytes()
        assert dense.b.tobytes() == plain.dense.b.tobytes()


# ---------------------------------------------------------------------------
# 5. a constructed reordering is recovered by matching
# ---------------------------------------------------------------------------

def test_05_constructed_permutations_are_recovered():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = nn.init_model(3, 6, 4, seed=seed)
        perm = rng.permutation(6)
        shuffled = matching.apply_hidden_permutation(model, perm)
        vec_a = matching.extract_neuron_vectors(model.lstm)
        vec_b = matching.extract_neuron_vectors(shuffled.lstm)
        assignments, pool = matching.bbp_map_match([vec_a, vec_b], seed=seed)
        assert pool.size == 6, seed
        # row i of the shuffled client is row perm[i] of the original, so
        # both must land on the same global column
        assert np.array_equal(assignments[0][perm], assignments[1]), seed


# ---------------------------------------------------------------------------
# 6. heterogeneous synthetic benchmark
# ---------------------------------------------------------------------------

BENCH = dict(task="cyclic", n_clients=3, hidden=32, rounds=10,
             heterogeneity=0.55, cycles_per_client=12, local_epochs=150,
             fedavg_epochs=30, retrain_epochs=120, lr=0.01, batch_size=4,
             train_frac=0.5, val_frac=0.2, patience=10)


def _benchmark_one_seed(seed: int):
    cfg = orch.ExperimentConfig(algo="fedma", seed=seed, **BENCH)
    states, tests, _ = orch.build_fleet(cfg)
    local = orch.run_local_only(states, tests, cfg)[0].fed_rmse
    matched = min(r.fed_rmse for r in orch.run_fedma(states, tests, cfg, None)[0])
    cfg_avg = orch.ExperimentConfig(algo="fedavg", seed=seed, **BENCH)
    states, tests, init = orch.build_fleet(cfg_avg)
    averaged = min(r.fed_rmse
                   for r in orch.run_fedavg(states, tests, cfg_avg, init, None)[0])
    return local, averaged, matched


def test_06_heterogeneous_benchmark_federation_beats_local():
    start = time.perf_counter()
    matched_wins = 0
    federation_wins = 0
    for seed in range(10):
        local, averaged, matched = _benchmark_one_seed(seed)
        matched_wins += matched <= averaged
        federation_wins += matched < local and averaged < local
    elapsed = time.perf_counter() - start
    assert matched_wins >= 8, matched_wins
    assert federation_wins >= 9, federation_wins
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# 7. real battery data, when present
# ---------------------------------------------------------------------------

@pytest.mark.skipif("FEDPROG_NASA_DIR" not in os.environ,
                    reason="set FEDPROG_NASA_DIR to a directory of "
                           "cyclic_client_*.csv battery files to run")
def test_07_real_battery_data_preserves_method_ordering():
    cfg = orch.ExperimentConfig(
        task="cyclic", algo="fedma", seed=0, n_clients=3, hidden=32,
        rounds=20, local_epochs=150, fedavg_epochs=30, retrain_epochs=120,
        lr=0.01, batch_size=4, patience=10,
        data_dir=os.environ["FEDPROG_NASA_DIR"])
    states, tests, _ = orch.build_fleet(cfg)
    local = orch.run_local_only(states, tests, cfg)[0].fed_rmse
    matched = min(r.fed_rmse for r in orch.run_fedma(states, tests, cfg, None)[0])
    cfg_avg = orch.ExperimentConfig(**{**cfg.__dict__, "algo": "fedavg"})
    states, tests, init = orch.build_fleet(cfg_avg)
    averaged = min(r.fed_rmse
                   for r in orch.run_fedavg(states, tests, cfg_avg, init, None)[0])
    print(f"battery rmse: matched {matched:.5f} averaged {averaged:.5f} "
          f"local {local:.5f}")
    assert matched < averaged < local


# ---------------------------------------------------------------------------
# 8. pipeline exactness
# ---------------------------------------------------------------------------

def test_08_pipeline_labels_windows_and_partition():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        lifespan = int(rng.integers(2, 600))
        cap = int(rng.integers(1, 250))
        got = data.piecewise_rul_labels(lifespan, cap)
        want = np.array([min(cap, lifespan - t) for t in range(1, lifespan + 1)],
                        dtype=np.float64)
        assert np.array_equal(got, want)

    for t_len, window in ((50, 50), (51, 50), (120, 30), (7, 3)):
        feats = rng.standard_normal((2, t_len))
        labels = rng.standard_normal(t_len)
        wins, _ = data.sliding_windows(feats, labels, window)
        assert wins.shape[0] == t_len - window + 1

    # a fleet with 82 short-lived, 25 mid-lived and 142 long-lived engines
    # must split exactly along the lifespan boundaries
    lifespans = np.concatenate([
        np.linspace(128, 199, 82), np.linspace(200, 350, 25),
        np.linspace(351, 543, 142)]).round().astype(int)
    records = [data.EngineRecord(engine_id=i, features=np.zeros((2, 1)),
                                 lifespan=int(n), rul_labels=np.zeros(1))
               for i, n in enumerate(lifespans)]
    parts = data.partition_clients(records, "heterogeneous",
                                   boundaries=(200, 350))
    assert [len(p) for p in parts] == [82, 25, 142]


# ---------------------------------------------------------------------------
# 9. byte-level determinism of a full run
# ---------------------------------------------------------------------------

def test_09_cli_runs_are_byte_deterministic(tmp_path):
    flags = ["run", "--algo", "fedma", "--seed", "3", "--rounds", "2",
             "--n-clients", "2", "--cycles-per-client", "12", "--hidden", "4",
             "--local-epochs", "3", "--fedavg-epochs", "2",
             "--retrain-epochs", "2", "--batch-size", "4", "--patience", "3"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        result = fedprog_cli(*flags, "--out", str(out))
        assert result.returncode == 0, result.stderr
    metrics_a = (out_a / "metrics.csv").read_bytes()
    metrics_b = (out_b / "metrics.csv").read_bytes()
    assert metrics_a == metrics_b
    check_a = (out_a / "checkpoint.json").read_bytes()
    check_b = (out_b / "checkpoint.json").read_bytes()
    assert check_a == check_b


# ---------------------------------------------------------------------------
# 10. pool growth is governed by the new-column price
# ---------------------------------------------------------------------------

def test_10_pool_growth_tracks_eps_scale():
    rng = np.random.default_rng(6)
    width = 12

    # widely separated clients under a vanishing reuse threshold: nothing
    # merges, the pool is the union
    disjoint = [rng.standard_normal((hidden, width)) + 100.0 * j
                for j, hidden in enumerate((3, 4, 5))]
    cheap_new = matching.MatchConfig(eps_scale=0.0)
    _, pool = matching.bbp_map_match(disjoint, cheap_new, seed=1)
    assert pool.size == 3 + 4 + 5
    assert np.array_equal(pool.counts, np.ones(12))

    # identical clients under an enormous reuse threshold: everything merges
    shared = rng.standard_normal((6, width))
    clones = [shared.copy() for _ in range(3)]
    costly_new = matching.MatchConfig(eps_scale=1e6)
    _, pool = matching.bbp_map_match(clones, costly_new, seed=1)
    assert pool.size == 6
    assert np.array_equal(pool.counts, np.full(6, 3.0))
