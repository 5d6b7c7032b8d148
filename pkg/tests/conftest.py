import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


from hypothesis import settings as _hyp_settings

_hyp_settings.register_profile("repro", derandomize=True, deadline=None)
_hyp_settings.load_profile("repro")


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}
ACCEPTANCE_TOTAL = 13


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not run or crashed before a verdict"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
