import json
import math
import warnings

import numpy as np
import pytest

from tstlab import analysis as A
from tstlab import losses as L
from tstlab import model as M
from tstlab.errors import ContractError
from tstlab.data import markov_transitions, synth_markov_corpus

from oracles import markov_mi_exact, power_law

FIG5 = (3.63, 1.35, -1.25)


class TestMutualInformation:
    def test_iid_stream_is_near_zero(self):
        toks = np.random.default_rng(0).integers(0, 4, size=100_000)
        curve = A.estimate_mi(toks, 5, bootstrap=20)
        # plug-in MI of independent symbols is bias only: about (K-1)^2 / 2n
        assert (curve.mi < curve.bias + 4 * curve.stderr).all()
        assert (curve.mi < 1e-3).all()

    def test_period_two_stream(self):
        toks = np.tile([0, 1], 5000)
        curve = A.estimate_mi(toks, 4, bootstrap=5)
        np.testing.assert_allclose(curve.mi, math.log(2), atol=1e-12)

    def test_matches_exact_markov_mi(self):
        corpus = synth_markov_corpus(1, 4, 300_000, seed=3, concentration=0.5)
        curve = A.estimate_mi(corpus, 4, bootstrap=40, seed=1)
        exact = markov_mi_exact(markov_transitions(1, 4, seed=3, concentration=0.5), 1, 4, range(1, 5))
        assert (np.abs(curve.mi - exact) <= 3 * curve.stderr).all()

    def test_insufficient_pairs_flagged(self):
        curve = A.estimate_mi(np.arange(50) % 7, 3, bootstrap=0)
        assert np.isnan(curve.mi).all()
        assert curve.flags == ["insufficient_pairs"] * 3

    def test_vocab_cap(self):
        toks = np.array([5, 5, 5, 2, 2, 9])
        capped, k = A.cap_vocabulary(toks, 1)
        assert k == 2
        np.testing.assert_array_equal(capped, [0, 0, 0, 1, 1, 1])
        same, k = A.cap_vocabulary(toks, None)
        assert k == 10 and same is not None

    def test_csv(self):
        curve = A.estimate_mi(np.tile([0, 1, 2], 3000), 2, bootstrap=3)
        lines = curve.to_csv().splitlines()
        assert lines[0] == "distance,mi_nats,pairs,stderr,miller_madow_bias,flag"
        assert len(lines) == 3 and lines[1].startswith("1,")


class TestPowerLawFit:
    d = np.arange(1, 65, dtype=float)

    def test_noiseless_recovery(self):
        fit = A.fit_power_law((self.d, power_law(self.d, *FIG5)))
        for got, want in zip((fit.C0, fit.a, fit.k), FIG5):
            assert abs(got - want) <= 0.01 * abs(want)
        assert fit.decaying

    def test_noisy_exponent(self):
        for seed in range(20):
            y = power_law(self.d, *FIG5) + np.random.default_rng(seed).normal(0, 0.01, self.d.size)
            fit = A.fit_power_law((self.d, y))
            assert abs(fit.k - FIG5[2]) <= 0.10 * abs(FIG5[2])

    def test_accepts_mi_curve(self):
        y = power_law(self.d[:16], 0.05, 0.5, -0.8)
        curve = A.MiCurve(self.d[:16], y, np.full(16, 1000))
        fit = A.fit_power_law(curve)
        assert fit.k == pytest.approx(-0.8, rel=1e-3)
        np.testing.assert_allclose(fit(self.d[:16]), y, atol=1e-8)

    def test_flat_curve(self):
        with pytest.raises(A.FitError) as info:
            A.fit_power_law((self.d, np.full_like(self.d, 0.3)))
        assert "spread" in info.value.diagnostics

    def test_too_few_points(self):
        with pytest.raises(A.FitError):
            A.fit_power_law(([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]))

    def test_increasing_curve_warns(self):
        with pytest.warns(RuntimeWarning):
            fit = A.fit_power_law((self.d, 1.0 - self.d ** -1.0))
        assert not fit.decaying

    def test_csv(self):
        fit = A.fit_power_law((self.d, power_law(self.d, *FIG5)))
        header, row = fit.to_csv().splitlines()
        assert header == "C0,a,k,rss,d_min,d_max,decaying"
        assert row.endswith(",1,64,1")


class TestFlops:
    @pytest.mark.parametrize("d", [64, 128])
    @pytest.mark.parametrize("s", [2, 4, 8, 16])
    def test_equal_flops(self, d, s):
        cfg = M.ModelConfig(d_model=d, d_ff=3 * d)
        ratio = A.flops_per_step(cfg, 64, s) / A.flops_per_step(cfg, 64, 1)
        assert 0.99 <= ratio <= 1.01

    def test_hand_count(self):
        cfg = M.ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=8)
        parts = A.flops_breakdown(cfg, 3, s=2)
        assert parts == {"embedding": 3 * 2 * 4, "attention_proj": 2 * 3 * 4 * 16,
                         "attention_scores": 4 * 9 * 4, "mlp": 2 * 3 * 3 * 4 * 8, "head": 2 * 3 * 4 * 10}
        assert A.flops_breakdown(cfg, 3, s=2, phase="recovery")["embedding"] == 0

    def test_batch_scaling(self):
        cfg = M.ModelConfig()
        assert A.flops_per_step(cfg, 64, 2, batch_rows=8) == 8 * A.flops_per_step(cfg, 64, 2)


class TestEvalCe:
    def test_matches_loss_module(self):
        cfg = M.ModelConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=8)
        st = M.init_state(cfg, "double")
        toks = np.random.default_rng(0).integers(0, 9, size=100)
        got = A.eval_ce(st, toks, batch_rows=3, length=8, max_windows=5)
        win = np.stack([toks[p:p + 9] for p in range(0, 40, 8)])
        want = L.ce_loss(M.forward(st, win[:, :-1], "none"), win[:, 1:]).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_short_slice(self):
        st = M.init_state(M.ModelConfig(vocab_size=9, d_model=8, n_heads=2, d_ff=8, max_len=8))
        with pytest.raises(ContractError):
            A.eval_ce(st, np.arange(5), length=8)


class TestSummarize:
    def _cell(self, root, s, r, ce, status="ok"):
        d = root / f"s{s}_r{r}"
        d.mkdir()
        (d / "summary.json").write_text(json.dumps({"s": s, "r": r, "heldout_ce": ce, "status": status}))
        return d

    def test_layout(self, tmp_path):
        dirs = [self._cell(tmp_path, 1, 0.0, 3.21), self._cell(tmp_path, 2, 0.5, 3.1),
                self._cell(tmp_path, 4, 0.5, 3.3), self._cell(tmp_path, 2, 1.0, 4.61),
                self._cell(tmp_path, 4, 1.0, 5.0, status="failed")]
        table = A.summarize_sweep(dirs)
        assert table.splitlines() == ["r\\s,1,2,4", "0.0,3.2100,--,--", "0.5,--,3.1000,3.3000",
                                      "1.0,--,4.6100,--"]

    def test_missing_dirs_skipped(self, tmp_path):
        assert A.summarize_sweep([tmp_path / "nope"]) == "r\\s\n"


def test_no_warnings_from_clean_fit():
    d = np.arange(1, 20, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        A.fit_power_law((d, power_law(d, 0.1, 1.0, -1.5)))
