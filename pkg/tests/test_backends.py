"""Compiled kernels vs the numpy fallback.

The two backends use different float summation orders (explicit loops vs
BLAS), so results agree to near machine precision but are not required to
be byte-identical across backends.
"""
import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from protofed import _kernels_py, backend
from protofed.rng import Rng

native = pytest.importorskip("protofed._kernels",
                             reason="compiled extension not built")


def random_stack(rng, dims, relu_flags, n):
    weights = []
    biases = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(np.array(
            [[rng.normal() for _ in range(d_in)] for _ in range(d_out)]))
        biases.append(np.array([rng.normal() for _ in range(d_out)]))
    x = np.array([[rng.normal() for _ in range(dims[0])] for _ in range(n)])
    return x, weights, biases, list(relu_flags)


def test_backend_reports_valid_name():
    assert backend.BACKEND in ("native", "python")
    assert callable(backend.net_forward)
    assert callable(backend.net_backward)


@pytest.mark.parametrize("dims,relu_flags,n", [
    ([5, 3], [False], 1),
    ([4, 8, 3], [True, False], 7),
    ([6, 8, 5, 4], [True, True, False], 4),
])
def test_forward_agrees_across_backends(dims, relu_flags, n):
    x, weights, biases, flags = random_stack(Rng(17), dims, relu_flags, n)
    pre_n, act_n = native.net_forward(x, weights, biases, flags)
    pre_p, act_p = _kernels_py.net_forward(x, weights, biases, flags)
    for zn, zp, an, ap in zip(pre_n, pre_p, act_n, act_p):
        np.testing.assert_allclose(zn, zp, rtol=0, atol=1e-12)
        np.testing.assert_allclose(an, ap, rtol=0, atol=1e-12)


@pytest.mark.parametrize("embed_layer,with_embed", [(0, True), (1, False), (0, False)])
def test_backward_agrees_across_backends(embed_layer, with_embed):
    rng = Rng(23)
    x, weights, biases, flags = random_stack(rng, [6, 8, 4], [True, False], 5)
    pre, act = _kernels_py.net_forward(x, weights, biases, flags)
    d_out = np.array([[rng.normal() for _ in range(4)] for _ in range(5)])
    d_embed = None
    if with_embed:
        width = act[embed_layer].shape[1]
        d_embed = np.array([[rng.normal() for _ in range(width)] for _ in range(5)])
    args = (x, pre, act, weights, flags, d_out, d_embed, embed_layer)
    dw_n, db_n, dx_n = native.net_backward(*args)
    dw_p, db_p, dx_p = _kernels_py.net_backward(*args)
    for a, b in zip(dw_n + db_n + [dx_n], dw_p + db_p + [dx_p]):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def run_cli(tmp_path, config_path, out_name, kernels):
    env = dict(os.environ, PROTOFED_KERNELS=kernels)
    out = os.path.join(str(tmp_path), out_name)
    proc = subprocess.run(
        [sys.executable, "-m", "protofed.cli", "run", "--config", config_path,
         "--out", out],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    return os.path.join(out, "metrics.csv")


def read_metrics(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def cells_close(a, b, atol=1e-6):
    if a == "" or b == "":
        return a == b
    return abs(float(a) - float(b)) <= atol


def test_cli_results_agree_across_backends(tmp_path, tiny_blobs_raw):
    config_path = os.path.join(str(tmp_path), "cfg.json")
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(tiny_blobs_raw(rounds=2), f)
    csv_native = run_cli(tmp_path, config_path, "native", "native")
    csv_python = run_cli(tmp_path, config_path, "python", "python")
    rows_n = read_metrics(csv_native)
    rows_p = read_metrics(csv_python)
    assert len(rows_n) == len(rows_p) == 2
    for rn, rp in zip(rows_n, rows_p):
        assert rn["round"] == rp["round"]
        for key in ("acc_mean", "asr_mean", "proto_drift"):
            assert cells_close(rn[key], rp[key]), (key, rn[key], rp[key])
        for (ci, ca, cr), (pi, pa, pr) in zip(json.loads(rn["per_client"]),
                                              json.loads(rp["per_client"])):
            assert ci == pi
            assert abs(ca - pa) <= 1e-6
            assert (cr is None) == (pr is None)
            if cr is not None:
                assert abs(cr - pr) <= 1e-6


def test_forced_python_backend_in_subprocess():
    env = dict(os.environ, PROTOFED_KERNELS="python")
    proc = subprocess.run(
        [sys.executable, "-c", "from protofed.backend import BACKEND; print(BACKEND)"],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "python"


def test_invalid_backend_request_fails_fast():
    env = dict(os.environ, PROTOFED_KERNELS="bogus")
    proc = subprocess.run(
        [sys.executable, "-c", "import protofed.backend"],
        capture_output=True, text=True, env=env)
    assert proc.returncode != 0
    assert "PROTOFED_KERNELS" in proc.stderr
