"""Shared fixtures: repo-root working directory, digits cache, tiny configs."""
import os

import pytest

from protofed import data

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session", autouse=True)
def repo_root_cwd():
    """Config files use repo-relative paths; pin the working directory."""
    prev = os.getcwd()
    os.chdir(ROOT)
    yield ROOT
    os.chdir(prev)


@pytest.fixture(scope="session")
def digits_cache(repo_root_cwd):
    path = os.path.join(ROOT, "data", "digits-idx")
    data.export_digits_idx(path)
    return path


@pytest.fixture
def tiny_blobs_raw():
    """Factory for a seconds-scale blobs experiment config dict."""
    def make(**over):
        raw = {
            "dataset": {"kind": "blobs", "num_classes": 4, "per_class": 20, "dim": 4},
            "partition": {"num_clients": 4, "p": 2, "q": 8, "std": 1},
            "model": {"hidden_sizes": [8]},
            "rounds": 3,
            "batch_size": 4,
            "lr": 0.05,
            "lam": 1.0,
            "seed": 3,
            "eval_every": 1,
            "eval_rule": "prototype",
            "attack": {"kind": "none"},
        }
        raw.update(over)
        return raw
    return make
