import numpy as np
import pytest

from codemerge.tensor_store import Checkpoint


def random_checkpoint(rng, step=0, max_tensors=4, max_rank=3, max_dim=4) -> Checkpoint:
    arrays = {}
    for i in range(int(rng.integers(0, max_tensors + 1))):
        rank = int(rng.integers(0, max_rank + 1))
        dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, size=rank))
        name = f"layer{i}." + rng.choice(["weight", "bias", "γ", "scale"])
        arrays[name] = rng.normal(size=dims) * 10 ** rng.uniform(-3, 3)
    return Checkpoint.from_arrays(step, arrays)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
