import numpy as np
import pytest

from refinet import gradcheck as G


@pytest.fixture(scope="module")
def f32():
    return G.run_suite(seed=0, trials=3)


def test_every_op_listed(f32):
    assert [r.op for r in f32] == list(G.CASES)
    assert {"conv3x3", "elu", "resize_nearest_up", "resize_nearest_down", "fully_connected", "l1_mean"} <= set(G.CASES)


def test_float32_suite_passes(f32):
    assert all(r.passed for r in f32), G.format_table(f32)


def test_float64_suite_passes():
    res = G.run_suite(seed=0, trials=3, dtype=np.float64)
    assert all(r.passed and r.tolerance == 1e-4 for r in res), G.format_table(res)


def test_perturbed_op_detected():
    res = {r.op: r for r in G.run_suite(seed=0, trials=2, perturb="elu")}
    assert not res["elu"].passed
    assert res["conv3x3"].passed


def test_table_deterministic(f32):
    assert G.format_table(G.run_suite(seed=0, trials=3)) == G.format_table(f32)


def test_unknown_op():
    with pytest.raises(KeyError):
        G.run_suite(perturb="softmax")


def test_relative_error_floor():
    assert G.relative_error(np.zeros(3), np.full(3, 1e-6)) < 1e-2
    assert G.relative_error(np.ones(3), np.ones(3)) == 0.0
