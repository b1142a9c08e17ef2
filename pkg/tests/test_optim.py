import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrl.autodiff import ShapeError
from diffrl.optim import AdamWState, adamw_step, clip_global_norm


def test_zero_grad_zero_decay_is_identity_and_counts_step():
    p = np.array([1.0, -2.0, 3.0])
    new, state = adamw_step(p, np.zeros(3), AdamWState.zeros(3), lr=1e-3, wd=0.0)
    np.testing.assert_array_equal(new, p)
    assert state.t == 1


def test_first_step_moves_by_lr():
    new, _ = adamw_step(np.array([1.0]), np.array([1.0]), AdamWState.zeros(1), lr=1e-3, wd=0.0)
    # bias-corrected m_hat = g, v_hat = g^2 at t = 1
    assert new[0] - 1.0 == pytest.approx(-1e-3 * 1.0 / (1.0 + 1e-8), rel=1e-12)


def test_decoupled_decay():
    new, _ = adamw_step(np.array([2.0]), np.array([0.0]), AdamWState.zeros(1), lr=0.1, wd=0.01)
    assert new[0] == pytest.approx(1.998, abs=1e-15)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step(np.zeros(3), np.zeros(2), AdamWState.zeros(3), lr=1e-3)


def _adam_reference(p, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-5, 5))
def test_zero_decay_reduces_to_adam(grads_seq, p0):
    p, state = np.array([p0]), AdamWState.zeros(1)
    for g in grads_seq:
        p, state = adamw_step(p, np.array([g]), state, lr=1e-2, wd=0.0)
    assert p[0] == pytest.approx(_adam_reference(p0, grads_seq, 1e-2), rel=1e-12, abs=1e-12)
    assert np.all(state.v >= 0)


def test_clip_global_norm():
    g, fired = clip_global_norm(np.array([3.0, 4.0]), 1.0)
    assert fired
    np.testing.assert_allclose(g, [0.6, 0.8])
    g, fired = clip_global_norm(np.array([0.3, 0.4]), 1.0)
    assert not fired
