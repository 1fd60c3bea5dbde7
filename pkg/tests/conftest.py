import numpy as np
import pytest

from bagstorm import config, model, pipeline

# acceptance verdicts, printed once at the end of the session
GATE: dict[int, tuple[str, bool, str]] = {}

TINY = model.ModelDims(patch_shape=(3, 3, 2), enc_hidden=6, feature_dim=5, attn_hidden=4, rep_dim=3, head_hidden=4)


def tiny_bundle(seed=0, dims=TINY, classes=None):
    return model.init_bundle(dims, classes or {"A": 2, "B": 3}, seed).freeze()


def tiny_slide(seed=0, n=6, shape=(3, 3, 2), low=0.1, high=0.9):
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(n, *shape))


@pytest.fixture
def bundle():
    return tiny_bundle(0)


@pytest.fixture
def slide():
    return tiny_slide(0)


@pytest.fixture(scope="session")
def default_system():
    """The default synthetic pipeline at master seed 0 (about 15 s to build)."""
    return pipeline.build_system(config.from_dict({}))


def pytest_terminal_summary(terminalreporter):
    if not GATE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(GATE):
        name, ok, detail = GATE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} ({detail})")
