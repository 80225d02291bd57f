import math

import numpy as np
import pytest

from tstlab import losses as L
from tstlab import model as M
from tstlab.data import shift_labels
from tstlab.errors import ContractError
from tstlab.gradcheck import check_gradients
from tstlab.tensor import Tensor

TINY = M.ModelConfig(vocab_size=17, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_len=16)


@pytest.fixture(scope="module")
def tiny():
    return M.init_state(TINY, "double")


class TestConfig:
    def test_param_count_by_hand(self):
        # V=64, d=128, d_ff=384, 2 layers:
        # embedding + head: 2 * 64 * 128 = 16384
        # per layer: 2 norms (256) + 4 attention mats (65536) + 3 MLP mats (147456) = 213248
        # final norm: 128
        assert M.param_count(M.ModelConfig()) == 16384 + 2 * 213248 + 128 == 443008

    def test_count_is_a_function_of_config(self):
        assert M.param_count(TINY) == sum(p.data.size for p in M.init_state(TINY).parameters())

    def test_validation(self):
        assert M.ModelConfig(d_model=10, n_heads=4).validate()
        assert M.ModelConfig(d_model=12, n_heads=4).validate()  # odd head dim
        assert M.ModelConfig(rope_positions="bogus").validate()
        assert not M.ModelConfig().validate()
        with pytest.raises(ContractError):
            M.init_state(M.ModelConfig(d_model=10, n_heads=4))

    def test_untied(self, tiny):
        assert tiny["embedding"].data is not tiny["head"].data
        assert tiny["embedding"].shape == (17, 16) and tiny["head"].shape == (16, 17)

    def test_init_scale(self):
        st = M.init_state(M.ModelConfig(d_model=128, n_heads=4, init_seed=3), "double")
        assert st["layers.0.w_up"].data.std() == pytest.approx(1 / math.sqrt(128), rel=0.02)
        np.testing.assert_array_equal(st["final_norm"].data, 1.0)

    def test_precision(self):
        assert M.init_state(TINY, "single")["head"].data.dtype == np.float32


class TestSuperposeEmbed:
    def test_identical_tokens(self, tiny):
        out = M.superpose_embed(tiny, np.full((1, 2, 4), 5))
        np.testing.assert_array_equal(out.data[0, 0], tiny["embedding"].data[5])

    def test_s1_is_plain_lookup(self, tiny):
        ids = np.random.default_rng(0).integers(0, 17, size=(2, 6))
        a = M.superpose_embed(tiny, ids[..., None]).data
        b = M.superpose_embed(tiny, ids).data
        assert a.tobytes() == b.tobytes() == tiny["embedding"].data[ids].tobytes()

    def test_two_token_mean(self):
        cfg = M.ModelConfig(vocab_size=2, d_model=2, n_heads=1, d_ff=2)
        st = M.init_state(cfg, "double")
        st["embedding"].data[:] = [[1.0, 0.0], [0.0, 1.0]]
        np.testing.assert_array_equal(M.superpose_embed(st, np.array([[[0, 1]]])).data[0, 0], [0.5, 0.5])

    def test_single_precision_accumulates_wide(self):
        st = M.init_state(TINY, "single")
        ids = np.random.default_rng(1).integers(0, 17, size=(1, 3, 8))
        expected = st["embedding"].data.astype(np.float64)[ids].mean(axis=2).astype(np.float32)
        np.testing.assert_array_equal(M.superpose_embed(st, ids).data, expected)

    def test_out_of_range(self, tiny):
        with pytest.raises(IndexError):
            M.superpose_embed(tiny, np.array([[[0, 17]]]))


def _inputs(mode, rng, l=6, s=3):
    if mode in ("full", "input_only"):
        return rng.integers(0, 17, size=(2, l, s))
    return rng.integers(0, 17, size=(2, l))


class TestForward:
    @pytest.mark.parametrize("mode", M.ABLATIONS)
    def test_strict_causality(self, tiny, mode):
        rng = np.random.default_rng(2)
        x = _inputs(mode, rng)
        base = M.forward(tiny, x, mode).data
        for j in range(x.shape[1]):
            y = x.copy()
            y[:, j] = (y[:, j] + 1) % 17
            out = M.forward(tiny, y, mode).data
            np.testing.assert_array_equal(out[:, :j], base[:, :j])
            assert np.abs(out[:, j] - base[:, j]).max() > 0

    def test_full_equals_none_at_s1(self, tiny):
        x = np.random.default_rng(3).integers(0, 17, size=(2, 7))
        a = M.forward(tiny, x[..., None], "full").data
        b = M.forward(tiny, x, "none").data
        assert a.tobytes() == b.tobytes()

    def test_deterministic(self, tiny):
        x = np.random.default_rng(4).integers(0, 17, size=(2, 5, 2))
        assert M.forward(tiny, x, "full").data.tobytes() == M.forward(tiny, x, "full").data.tobytes()

    def test_shape_mode_mismatch(self, tiny):
        with pytest.raises(ContractError):
            M.forward(tiny, np.zeros((2, 4), dtype=int), "full")
        with pytest.raises(ContractError):
            M.forward(tiny, np.zeros((2, 4, 2), dtype=int), "output_only")
        with pytest.raises(ContractError):
            M.forward(tiny, np.zeros((2, 4), dtype=int), "sideways")

    def test_too_long(self, tiny):
        with pytest.raises(ContractError):
            M.forward(tiny, np.zeros((1, 17), dtype=int), "none")

    def test_rope_position_switch(self):
        x = np.random.default_rng(5).integers(0, 17, size=(1, 5, 2))
        latent = M.forward(M.init_state(TINY, "double"), x, "full").data
        cfg = M.ModelConfig(**{**M.config_dict(TINY), "rope_positions": "data"})
        data = M.forward(M.init_state(cfg, "double"), x, "full").data
        np.testing.assert_array_equal(latent[:, 0], data[:, 0])  # position 0 agrees
        assert np.abs(latent[:, 1:] - data[:, 1:]).max() > 1e-6

    @pytest.mark.parametrize("name", ["ce", "mce", "mce_corrected", "mce_alt", "power_law"])
    def test_gradients_match_finite_differences(self, tiny, name):
        rng = np.random.default_rng(6)
        x = rng.integers(0, 17, size=(2, 8, 2))
        stream = rng.integers(0, 17, size=(2, 16))
        bags = shift_labels(stream, 2)
        if name == "ce":
            fn = lambda: L.ce_loss(M.forward(tiny, stream[:, :8], "none"), stream[:, 1:9])  # noqa: E731
        else:
            loss = {"mce": lambda z: L.mce_uniform(z, bags),
                    "mce_corrected": lambda z: L.mce_uniform(z, bags, corrected=True),
                    "mce_alt": lambda z: L.mce_alt(z, bags),
                    "power_law": lambda z: L.mce_weighted(z, bags, L.BagWeighting("power_law"))}[name]
            fn = lambda: loss(M.forward(tiny, x, "full"))  # noqa: E731
        worst = check_gradients(fn, tiny.params, max_entries=4, seed=1)
        assert set(worst) == set(tiny.params)
        assert max(worst.values()) < 1e-3


class TestReinit:
    def test_interior_preserved(self):
        st = M.init_state(TINY, "double")
        new = M.reinit_io(st, seed=99)
        assert new.interior_digest() == st.interior_digest()
        assert not np.array_equal(new["embedding"].data, st["embedding"].data)
        assert not np.array_equal(new["head"].data, st["head"].data)
        for k in st.params:
            if k not in M.IO_PARAMS:
                assert new[k].data.tobytes() == st[k].data.tobytes()

    def test_deterministic_in_seed(self):
        st = M.init_state(TINY, "double")
        a, b = M.reinit_io(st, 5), M.reinit_io(st, 5)
        np.testing.assert_array_equal(a["head"].data, b["head"].data)

    def test_loss_near_uniform_after_reinit(self):
        cfg = M.ModelConfig(init_seed=1)
        st = M.reinit_io(M.init_state(cfg, "double"), seed=2)
        x = np.random.default_rng(7).integers(0, 64, size=(4, 33))
        ce = L.ce_loss(M.forward(st, x[:, :-1], "none"), x[:, 1:]).item()
        assert abs(ce - math.log(64)) < 0.2 * math.log(64)


class TestGenerate:
    def test_greedy_is_deterministic(self, tiny):
        a = M.generate(tiny, [1, 2, 3], 5)
        assert a == M.generate(tiny, [1, 2, 3], 5)
        assert len(a) == 5 and all(0 <= t < 17 for t in a)

    def test_greedy_matches_argmax(self, tiny):
        nxt = M.generate(tiny, [4, 4], 1)[0]
        assert nxt == int(np.argmax(M.forward(tiny, np.array([[4, 4]]), "none").data[0, -1]))

    def test_sampling_uses_seed(self, tiny):
        assert M.generate(tiny, [0], 8, temperature=1.0, seed=3) == M.generate(tiny, [0], 8, 1.0, seed=3)

    def test_window_longer_than_context(self, tiny):
        assert len(M.generate(tiny, [1] * 20, 3)) == 3

    def test_errors(self, tiny):
        with pytest.raises(ContractError):
            M.generate(tiny, [], 3)
        with pytest.raises(ContractError):
            M.generate(tiny, [1], 3, temperature=-1.0)

    def test_copy_is_independent(self, tiny):
        c = tiny.copy()
        c["head"].data[0, 0] += 1.0
        assert c["head"].data[0, 0] != tiny["head"].data[0, 0]
        assert isinstance(c["head"], Tensor)
