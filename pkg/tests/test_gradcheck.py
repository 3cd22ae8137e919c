import numpy as np
import pytest

from dnmn import autodiff, gradcheck
from dnmn.autodiff import BACKWARD


def wrong_sign_relu(g, out, xs, arg):
    return (-g * (xs[0] > 0),)


class TestRelativeError:
    def test_exact_match(self):
        assert gradcheck.relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_scaled_by_largest_magnitude(self):
        assert gradcheck.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)

    def test_floor_for_vanishing_gradients(self):
        assert gradcheck.relative_error(np.array([1e-12]), np.array([0.0])) == pytest.approx(1e-7)


class TestSuite:
    def test_every_op_and_model_piece_is_covered(self):
        names = set(gradcheck.all_samplers())
        ops = {"op:" + k for k in BACKWARD}
        assert ops <= names
        assert {"find", "relate", "and", "describe", "exists", "fusion", "scorer", "lstm"} <= names

    def test_short_run_passes(self):
        results = gradcheck.run_suite(configs=5, seed=3)
        assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results if not r.passed]

    def test_unknown_check(self):
        with pytest.raises(KeyError):
            gradcheck.run_suite(configs=1, names=["op:nope"])

    def test_seed_changes_samples_not_outcome(self):
        a = gradcheck.run_suite(configs=5, seed=1, names=["find", "op:softmax"])
        b = gradcheck.run_suite(configs=5, seed=2, names=["find", "op:softmax"])
        assert [r.max_rel_error for r in a] != [r.max_rel_error for r in b]
        assert all(r.passed for r in a + b)

    def test_detects_wrong_relu_rule(self, monkeypatch):
        monkeypatch.setitem(autodiff.BACKWARD, "relu", wrong_sign_relu)
        results = {r.name: r for r in gradcheck.run_suite(configs=3, names=["op:relu", "find", "op:tanh"])}
        assert not results["op:relu"].passed
        assert not results["find"].passed
        assert results["op:tanh"].passed
