"""Backend parity: the compiled recurrent core against the numpy reference.

The two implementations share every BLAS call; only the elementwise gate
math runs through different code, so they may differ in the last bit where
libm and numpy round transcendentals differently. Everything here asserts
agreement well below any tolerance the rest of the suite relies on.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from fedprog import kernels
from fedprog.kernels import pure

try:
    from fedprog.kernels import _core
    HAS_COMPILED = True
except ImportError:
    _core = None
    HAS_COMPILED = False

needs_compiled = pytest.mark.skipif(not HAS_COMPILED,
                                    reason="compiled core not built")

SHAPES = [(1, 1, 1), (3, 2, 4), (5, 7, 3), (2, 16, 8), (9, 4, 6)]


@needs_compiled
class TestBackendsAgree:
    def test_forward_caches_match(self):
        rng = np.random.default_rng(0)
        for t_len, batch, size in SHAPES:
            pre = rng.standard_normal((t_len, batch, 4 * size))
            w_hh_t = np.ascontiguousarray(
                0.4 * rng.standard_normal((4 * size, size)).T)
            ref = pure.recurrent_forward(pre.copy(), w_hh_t)
            got = _core.recurrent_forward(pre.copy(), w_hh_t)
            for a, b in zip(ref, got):
                assert a.shape == b.shape
                assert np.max(np.abs(a - b)) < 1e-14

    def test_backward_matches_on_shared_caches(self):
        rng = np.random.default_rng(1)
        for t_len, batch, size in SHAPES:
            pre = rng.standard_normal((t_len, batch, 4 * size))
            w_hh = 0.4 * rng.standard_normal((4 * size, size))
            gates, z_seq, _ = pure.recurrent_forward(
                pre.copy(), np.ascontiguousarray(w_hh.T))
            dh_last = rng.standard_normal((batch, size))
            ref = pure.recurrent_backward(gates, z_seq, w_hh, dh_last)
            got = _core.recurrent_backward(gates.copy(), z_seq, w_hh, dh_last)
            assert np.max(np.abs(ref - got)) < 1e-14

    def test_trained_predictions_match_across_backends(self, tmp_path):
        # short end-to-end training run under each backend; ulp noise is
        # amplified by the optimizer, so the bound here is looser
        script = tmp_path / "train_probe.py"
        script.write_text(
            "import sys\n"
            "import numpy as np\n"
            "from fedprog import client as cl, data, kernels, nn\n"
            "rng = np.random.default_rng(4)\n"
            "feats = rng.standard_normal((12, 6, 2))\n"
            "labels = feats[:, -1, 0].copy()\n"
            "stats = data.StandardizationStats(np.zeros(2), np.ones(2))\n"
            "ds = data.SequenceDataset(feats, labels, stats)\n"
            "state = cl.make_client(0, nn.init_model(2, 5, 6, seed=2), ds, ds,\n"
            "                       base_seed=0, lr=1e-2)\n"
            "cl.train_local(state, 5, 4, None, 5.0)\n"
            "probe = np.random.default_rng(9).standard_normal((20, 6, 2))\n"
            "np.save(sys.argv[1], nn.predict_batch(state.model, probe))\n"
            "print(kernels.BACKEND)\n")
        outputs = {}
        for tag, flag in (("compiled", "0"), ("pure", "1")):
            out = tmp_path / f"{tag}.npy"
            env = {**os.environ, "FEDPROG_PURE": flag}
            res = subprocess.run([sys.executable, str(script), str(out)],
                                 capture_output=True, text=True, env=env)
            assert res.returncode == 0, res.stderr
            assert res.stdout.strip() == tag
            outputs[tag] = np.load(out)
        gap = np.max(np.abs(outputs["compiled"] - outputs["pure"]))
        assert gap < 1e-8, gap


def test_env_flag_forces_numpy_backend():
    env = {**os.environ, "FEDPROG_PURE": "1"}
    res = subprocess.run(
        [sys.executable, "-c", "from fedprog import kernels; print(kernels.BACKEND)"],
        capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == "pure"


def test_default_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "pure")
