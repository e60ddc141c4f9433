import numpy as np
import pytest

try:  # bit-for-bit reproducibility needs a fixed BLAS thread count
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
except ImportError:  # pragma: no cover
    pass

from mgst.data import DatasetSpec, as_arrays, generate_split


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(train_per_class=2, val_per_class=2)


@pytest.fixture(scope="session")
def small_data(small_spec):
    train = as_arrays(generate_split(small_spec, "train"))
    val = as_arrays(generate_split(small_spec, "val"))
    return train, val


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
