from pathlib import Path

import pytest
import torch

from dolphin_avss.fileio import load_tensors
from golden_cases import CASES, run_case

GOLDEN = load_tensors(Path(__file__).parent / "data" / "golden.dlph")


@pytest.mark.parametrize("name", list(CASES))
def test_matches_golden_in_32_bit(name):
    out = run_case(name, torch.float32)
    assert out, name
    for key, value in out.items():
        ref = GOLDEN[key]
        assert ref.dtype == torch.float64 and value.shape == ref.shape
        assert (value.double() - ref).abs().max() < 1e-5, key


@pytest.mark.parametrize("name", ["separator_e2e", "pipeline_toy"])
def test_64_bit_rerun_is_bit_identical(name):
    out = run_case(name, torch.float64)
    for key, value in out.items():
        assert torch.equal(value, GOLDEN[key])
