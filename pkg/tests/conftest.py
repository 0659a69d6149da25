import os

import pytest
from hypothesis import settings

# one BLAS thread keeps reductions bitwise stable across runs
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

CRITERIA = {
    1: "gradient fidelity",
    2: "distance oracle",
    3: "pseudo-positive mining",
    4: "overfit retrieval",
    5: "metadata lift",
    6: "zoom invariance",
    7: "split soundness",
    8: "map sanity",
    9: "determinism",
    10: "variance regularizer",
}
_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records the outcome of acceptance criterion n."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _results[n] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} [{n}] {CRITERIA[n]}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        ok, detail = _results.get(n, (False, "not run or errored before reporting"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{n}] {name}: {detail}")
