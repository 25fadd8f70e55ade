import numpy as np
import pytest

from mamba_st.verify import (SUITES, PropertyResult, VerifyReport, corrupt_checkpoints, random_scan_case,
                             rotate_tokens, rotated_params, suite_equivariance, suite_losses, suite_oracle,
                             suite_roundtrip, verify)


class TestReport:
    def test_line_format(self):
        line = PropertyResult("oracle", "x", 10, 2e-11, 1e-10).line()
        assert line.startswith("PASS  oracle/x: 10 cases")

    def test_nan_fails(self):
        assert not PropertyResult("s", "n", 1, float("nan"), 1.0).passed

    def test_report_ok_requires_all(self):
        good = PropertyResult("s", "a", 1, 0.0, 0.0)
        bad = PropertyResult("s", "b", 1, 1.0, 0.0)
        assert VerifyReport([good]).ok and not VerifyReport([good, bad]).ok


class TestHelpers:
    def test_random_case_bounds(self, rng):
        for _ in range(20):
            delta, A, B, C, u = random_scan_case(rng)
            L, d = u.shape
            assert 1 <= L <= 8 and 1 <= d <= 4 and 1 <= B.shape[1] <= 4
            assert (delta > 0).all() and (A < 0).all()

    def test_rotation_is_involution(self, rng):
        x = rng.normal(size=(6, 2))
        np.testing.assert_array_equal(rotate_tokens(rotate_tokens(x)), x)
        assert rotated_params(rotated_params(list("abcd"))) == list("abcd")

    def test_corruptions_differ(self, tmp_path):
        path = tmp_path / "f"
        path.write_bytes(b"MBST" + bytes(range(40)))
        variants = corrupt_checkpoints(path)
        assert len(set(variants.values())) == 3


class TestSuites:
    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown suite"):
            verify("everything")

    def test_suite_names(self):
        assert SUITES == ("oracle", "equivariance", "grads", "losses", "roundtrip")

    @pytest.mark.parametrize("suite_fn,kwargs", [(suite_oracle, {"cases": 50}),
                                                 (suite_equivariance, {"cases": 10}),
                                                 (suite_losses, {"cases": 10}),
                                                 (suite_roundtrip, {})])
    def test_small_runs_pass(self, suite_fn, kwargs):
        results = suite_fn(3, **kwargs)
        assert results and all(r.passed for r in results), [r.line() for r in results]

    def test_seed_reproducible(self):
        a = [r.worst for r in suite_oracle(5, cases=20)]
        b = [r.worst for r in suite_oracle(5, cases=20)]
        assert a == b
