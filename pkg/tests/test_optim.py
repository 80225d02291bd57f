import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tstlab import model as M
from tstlab.config import TrainPlan
from tstlab.errors import NumericError
from tstlab.optim import AdamW, adamw_step, clip_grads, global_norm, wsd_lr
from tstlab.tensor import Tensor


def plan(**kw):
    base = dict(total_steps=1000, peak_lr=1e-3, warmup_steps=100, decay_fraction=0.1)
    base.update(kw)
    return TrainPlan(**base)


class TestWsd:
    def test_ramp_endpoints(self):
        p = plan()
        assert wsd_lr(0, p) == 0.0
        assert wsd_lr(50, p) == pytest.approx(5e-4)
        assert wsd_lr(100, p) == 1e-3

    def test_stable(self):
        assert wsd_lr(500, plan()) == 1e-3
        assert wsd_lr(899, plan()) == 1e-3

    def test_decay_midpoint(self):
        assert wsd_lr(950, plan()) == pytest.approx(5e-4, abs=1e-18)
        assert wsd_lr(999, plan()) == pytest.approx(1e-5)

    def test_default_warmup_scales(self):
        assert TrainPlan(total_steps=3000).resolved_warmup() == 300
        assert TrainPlan(total_steps=100_000).resolved_warmup() == 2000

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 5000), st.floats(0.0, 0.5))
    def test_bounded_and_piecewise(self, total, frac):
        p = plan(total_steps=total, warmup_steps=None, decay_fraction=frac)
        lrs = np.array([wsd_lr(t, p) for t in range(total)])
        assert (lrs >= 0).all() and (lrs <= p.peak_lr).all()
        warm = p.resolved_warmup()
        assert (np.diff(lrs[:warm + 1]) >= 0).all()
        assert (np.diff(lrs[warm:]) <= 1e-18).all()


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        w = Tensor(np.array([1.0, -2.0]))
        AdamW(weight_decay=0.0).step({"w": w}, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_single_step_by_hand(self):
        # w=1, g=2, lr=0.1, betas (0.9, 0.95):
        # m = 0.2, v = 0.2; m_hat = 2, v_hat = 4; step = 0.1 * 2 / (2 + eps)
        w = Tensor(np.array([1.0]))
        AdamW((0.9, 0.95), eps=1e-8).step({"w": w}, {"w": np.array([2.0])}, lr=0.1)
        assert w.data[0] == pytest.approx(1.0 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)

    def test_two_steps_on_quadratic(self):
        # f(w) = w^2 / 2, so g = w
        w = Tensor(np.array([3.0]))
        opt = AdamW((0.9, 0.95), eps=1e-8)
        m = v = 0.0
        ref = 3.0
        for t in (1, 2):
            g = ref
            opt.step({"w": w}, {"w": np.array([w.data[0]])}, lr=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            ref -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
            assert w.data[0] == pytest.approx(ref, abs=1e-14)

    def test_decoupled_decay(self):
        w = Tensor(np.array([2.0, -4.0]))
        opt = AdamW(weight_decay=0.1)
        for _ in range(3):
            opt.step({"w": w}, {"w": np.zeros(2)}, lr=0.5)
        np.testing.assert_allclose(w.data, np.array([2.0, -4.0]) * 0.95 ** 3, rtol=1e-15)

    def test_non_finite_aborts_before_update(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
        opt = AdamW(weight_decay=0.1)
        with pytest.raises(NumericError):
            opt.step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, lr=0.1)
        np.testing.assert_array_equal(a.data, 1.0)
        assert opt.t == 0 and not opt.m

    def test_reset_selected_moments(self):
        opt = AdamW()
        p = {"a": Tensor(np.ones(1)), "b": Tensor(np.ones(1))}
        opt.step(p, {"a": np.ones(1), "b": np.ones(1)}, lr=0.1)
        opt.reset(["a"])
        assert "a" not in opt.m and "b" in opt.m and opt.t == 1
        opt.reset()
        assert not opt.m and opt.t == 0


class TestClipping:
    def test_global_norm(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0

    def test_clip_scales_to_max(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grads(g, 1.0) == 5.0
        assert global_norm(g) == pytest.approx(1.0)

    def test_small_grads_untouched(self):
        g = {"a": np.array([0.3])}
        clip_grads(g, 1.0)
        assert g["a"][0] == 0.3

    def test_adamw_step_reads_state_grads(self):
        cfg = M.ModelConfig(vocab_size=5, d_model=4, n_layers=1, n_heads=1, d_ff=4, max_len=4)
        st = M.init_state(cfg, "double")
        before = st.copy()
        for p in st.parameters():
            p.grad = np.full_like(p.data, np.nan)
        with pytest.raises(NumericError):
            adamw_step(st, AdamW(), plan(), 10)
        for k in st.params:
            np.testing.assert_array_equal(st[k].data, before[k].data)
        for p in st.parameters():
            p.grad = np.ones_like(p.data)
        norm = adamw_step(st, AdamW(), plan(grad_clip=1.0), 10)
        assert norm == pytest.approx(math.sqrt(M.param_count(cfg)))
