import numpy as np
import pytest

from llvd import tensor as T
from llvd.gradcheck import check_directional, check_gradients, relative_error
from llvd.selfcheck import _grad_lstm_cell, _grad_primitives, llvd_s_gradient_error


def test_relative_error_floor():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-3
    assert relative_error(np.array([1.0]), np.array([1.01])) == pytest.approx(0.01 / 1.01)


def test_primitive_ops_pass():
    assert _grad_primitives() < 1e-4


def test_convlstm_cell_passes():
    assert _grad_lstm_cell() < 1e-3


def test_full_small_model_sequence_passes():
    coord, direc = llvd_s_gradient_error(entries=2)
    assert coord < 1e-3 and direc < 1e-3


def _broken_tanh(a):
    out = np.tanh(a.data)
    return T._record("tanh", (a,), out, lambda g: (g * (1 - 0.9 * out * out),))


def test_checks_detect_a_wrong_derivative(monkeypatch):
    rng = np.random.default_rng(0)
    arrays = [rng.standard_normal((1, 2, 4, 4))]
    fn = lambda x: T.sum_all(T.tanh(x) * x)
    assert check_gradients(fn, arrays) < 1e-6
    monkeypatch.setattr(T, "tanh", _broken_tanh)
    assert check_gradients(fn, arrays) > 1e-2


def test_full_model_check_detects_a_wrong_derivative(monkeypatch):
    import llvd.model as model_mod

    monkeypatch.setattr(model_mod, "tanh", _broken_tanh)
    coord, direc = llvd_s_gradient_error(entries=1)
    assert max(coord, direc) > 1e-3


def test_directional_check_on_quadratic():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3))
    assert check_directional(lambda x: T.sum_all(T.square(x)), [a], directions=3) < 1e-8
