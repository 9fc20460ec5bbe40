import pytest

from mmrl.verify import SUITES, end_to_end_gradient_error, run_suites, suite_names


@pytest.mark.parametrize("suite", ["metric", "control", "projection", "env", "hypernet"])
def test_suite_passes(suite):
    results = run_suites([suite], seed=0)
    assert results
    failed = [f"{r.name}: {r.detail}" for r in results if r.asserted and not r.passed]
    assert not failed


def test_gradient_suite_passes_for_another_seed():
    failed = [r.name for r in run_suites(["gradient"], seed=5) if r.asserted and not r.passed]
    assert not failed


def test_end_to_end_gradient():
    assert end_to_end_gradient_error(seed=1, coords=8) <= 1e-3


def test_suite_names():
    assert suite_names("all") == list(SUITES)
    assert suite_names("env") == ["env"]
    with pytest.raises(KeyError):
        suite_names("everything")
