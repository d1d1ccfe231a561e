"""End-to-end acceptance checks, one class per criterion.

Each sub-check records its outcome through the ``acceptance`` fixture; the
terminal summary prints one PASS/FAIL line per criterion.  Sub-checks that
do not hold at the stated tolerance are strict xfails whose assertions keep
the original thresholds; the reasoning lives in the decisions ledger.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from micronets import MembraneMicroNet, random_trsg_net
from snn_forge import autodiff as ad
from snn_forge import config as cfgmod
from snn_forge.autodiff import Parameter, Tape
from snn_forge.diagnostics import drift_report, energy_estimate, ljung_box_lag1, tv_distance
from snn_forge.errors import DivergenceError
from snn_forge.experiments import load_data, train_once
from snn_forge.lif import fire
from snn_forge.mpinit import MpInitState, update_running_mean
from snn_forge.network import convert_for_inference
from snn_forge.surrogate import SHAPES, SurrogateConfig, sg_derivative, spike_grad_wrt_M, spike_grad_wrt_vthr
from snn_forge.theory import STATIONARY, ChainConfig, lemma1_check, simulate_chain, tv_decay_curve

pytestmark = pytest.mark.acceptance


def spike_grads(cfg, M, vthr):
    """(dO/dM, dO/dvthr) through the tape for one spiking nonlinearity."""
    M_p = Parameter(np.asarray(M, dtype=float), "M")
    v_p = Parameter(np.array(float(vthr)), "v")
    tape = Tape()
    m, v = tape.param(M_p), tape.param(v_p)
    S = fire(m, v, cfg)
    O = v * S if cfg.scale_mode == "TrSG" else S
    tape.backward(ad.sum(O))
    return M_p.grad, float(v_p.grad)


class TestC1GradientCorrectness:
    def test_bptt_matches_finite_differences(self, acceptance):
        start = time.perf_counter()
        worst = 0.0
        for reset_mode in ("soft", "hard"):
            for seed in range(3):
                net = MembraneMicroNet(reset_mode, seed)
                assert net.n_params() <= 500
                tape, loss = net.loss()
                tape.backward(loss)
                for p in net.parameters():
                    num = numeric_grad(lambda: float(net.loss()[1].value), p)
                    worst = max(worst, rel_error(p.grad, num))
        elapsed = time.perf_counter() - start
        acceptance(1, "micro-net FD", worst <= 1e-5, f"max rel err {worst:.2e}")
        acceptance(1, "runtime", elapsed < 60, f"{elapsed:.1f}s")
        assert worst <= 1e-5 and elapsed < 60

    def test_spike_backward_matches_closed_form(self, acceptance):
        rng = np.random.default_rng(0)
        worst = 0.0
        for mode in ("AS", "RS", "TrSG"):
            for shape in SHAPES:
                for vthr in (0.3, 1.0, 2.5):
                    cfg = SurrogateConfig(shape, mode)
                    M = rng.normal(vthr, 0.6 * vthr, size=32)
                    gM, gv = spike_grads(cfg, M, vthr)
                    worst = max(worst, np.max(np.abs(gM - spike_grad_wrt_M(cfg, M, vthr))),
                                abs(gv - spike_grad_wrt_vthr(cfg, M, vthr).sum()))
        acceptance(1, "spike closed form", worst <= 1e-12, f"max abs err {worst:.1e}")
        assert worst <= 1e-12


class TestC2ThresholdInvariance:
    def test_trsg_gradient_constant_and_rs_relation(self, acceptance):
        rel = np.linspace(-0.9, 0.9, 37)
        spread, rs_exact = 0.0, True
        for shape in SHAPES:
            per_v = []
            for vthr in (0.01, 0.1, 1.0, 10.0, 100.0):
                M = (1.0 + rel) * vthr
                g_trsg, _ = spike_grads(SurrogateConfig(shape, "TrSG"), M, vthr)
                g_rs, _ = spike_grads(SurrogateConfig(shape, "RS"), M, vthr)
                rs_exact &= bool(np.array_equal(g_rs * vthr, g_trsg))
                per_v.append(g_trsg)
            per_v = np.array(per_v)
            spread = max(spread, float(np.max(np.abs(per_v - sg_derivative(shape, rel)))))
        acceptance(2, "TrSG constant", spread <= 1e-12, f"max deviation {spread:.1e}")
        acceptance(2, "RS*vthr == TrSG", rs_exact)
        assert spread <= 1e-12 and rs_exact


class TestC3Conversion:
    def test_twenty_random_nets(self, acceptance):
        worst, binary = 0.0, True
        for seed in range(20):
            net, x = random_trsg_net(seed)
            net.eval()
            want = net.predict(x)
            conv = convert_for_inference(net)
            worst = max(worst, float(np.max(np.abs(conv.predict(x) - want))))
            fp = conv.forward_window(x, record=True, requires_grad=False)
            binary &= all(set(np.unique(np.stack(r.S))) <= {0.0, 1.0} for r in fp.records)
        acceptance(3, "logits preserved", worst <= 1e-6, f"max abs diff {worst:.1e}")
        acceptance(3, "binary spikes", binary)
        assert worst <= 1e-6 and binary


@pytest.fixture(scope="module")
def chain_runs():
    start = time.perf_counter()
    cfg = ChainConfig(input_dist=("gaussian", 1.0, 1.0), tau=2.0, vthr=1.0, reset_mode="soft",
                      n_samples=100_000, T=10)
    cold_tvs, cold_fit = tv_decay_curve(simulate_chain(cfg))
    warm_tvs, _ = tv_decay_curve(simulate_chain(replace(cfg, u0=STATIONARY)))
    return {"cold_tv1": cold_tvs[0], "warm_tv1": warm_tvs[0], "fit": cold_fit,
            "seconds": time.perf_counter() - start}


class TestC4DecayAtDeskScale:
    def test_stationary_start_halves_drift(self, chain_runs, acceptance):
        r = chain_runs
        ok = r["warm_tv1"] <= 0.5 * r["cold_tv1"]
        acceptance(4, "stationary start <= half", ok, f"{r['warm_tv1']:.4f} vs {r['cold_tv1']:.4f}")
        acceptance(4, "runtime", r["seconds"] < 120, f"{r['seconds']:.1f}s")
        assert ok and r["seconds"] < 120

    @pytest.mark.xfail(strict=True, reason="U[1] from u0=0 is already close to stationary for N(1,1) input; "
                                           "TV(U[1],U[10]) is about 0.07, see decisions ledger")
    def test_cold_start_drift_is_large(self, chain_runs, acceptance):
        tv1 = chain_runs["cold_tv1"]
        acceptance(4, "TV(U1,U10) >= 0.15", tv1 >= 0.15, f"{tv1:.4f}")
        assert tv1 >= 0.15

    @pytest.mark.xfail(strict=True, reason="after two steps TV sits on the ~0.01 sampling floor, which lies "
                                           "above the 1e-3 fit cutoff; see decisions ledger")
    def test_log_linear_fit(self, chain_runs, acceptance):
        fit = chain_runs["fit"]
        acceptance(4, "r2 >= 0.9", fit.r_squared >= 0.9, f"r2 {fit.r_squared:.3f} over {fit.n_points} points")
        assert fit.r_squared >= 0.9


class TestC5Lemma1:
    def test_grid_argmin_is_mean(self, acceptance):
        start = time.perf_counter()
        cfg = ChainConfig(n_samples=100_000, T=40)
        stationary = simulate_chain(cfg)[-1]
        c_star, mean = lemma1_check(stationary, step=0.01)
        elapsed = time.perf_counter() - start
        ok = abs(c_star - mean) <= 0.01
        acceptance(5, "argmin within one step", ok, f"c* {c_star:.4f} mean {mean:.4f}")
        acceptance(5, "runtime", elapsed < 60, f"{elapsed:.1f}s")
        assert ok


class TestC6RunningMean:
    def test_fixtures(self, acceptance):
        first = update_running_mean(MpInitState(mu=0.0, beta=0.9), 1.0).mu
        ok_first = first == pytest.approx(0.9, abs=1e-15)
        # dyadic beta keeps every step exact while 1 - (1-beta)^k fits in the mantissa
        geometric = True
        for beta, steps in ((0.5, 50), (0.75, 25), (0.875, 16)):
            mp, c, gap = MpInitState(mu=0.0, beta=beta), 1.0, 1.0
            for _ in range(steps):
                update_running_mean(mp, c)
                geometric &= abs(mp.mu - c) == gap * (1 - beta)
                gap = abs(mp.mu - c)
        # beta=0.9 is not dyadic; mu - c loses digits as the gap shrinks, so stop early
        mp, gap = MpInitState(mu=0.0, beta=0.9), 1.0
        for _ in range(4):
            update_running_mean(mp, 1.0)
            geometric &= abs(abs(mp.mu - 1.0) - gap * 0.1) <= 1e-12 * gap
            gap = abs(mp.mu - 1.0)
        silent = update_running_mean(MpInitState(mu=0.25), None).mu == 0.25
        acceptance(6, "first batch 0.9", ok_first, f"{first!r}")
        acceptance(6, "geometric ratio exact", geometric)
        acceptance(6, "silent layer unchanged", silent)
        assert ok_first and geometric and silent


def stress_config(mode, vthr):
    return cfgmod.from_dict({
        "net": "small", "sg": {"scale_mode": mode, "shape": "rectangular"}, "init_vthr": vthr,
        "init_tau": 2.0, "train_tau": False, "train_vthr": False, "timesteps": 4, "precision": "float32",
        "optim": {"epochs": 12, "lr": 0.05, "batch_size": 64},
        "data": {"kind": "synthetic", "n": 10_000, "test_fraction": 0.2}})


@pytest.fixture(scope="module")
def stress_runs():
    start = time.perf_counter()
    runs = {}
    for mode, vthr in (("RS", 0.1), ("TrSG", 0.1), ("TrSG", 1.0), ("AS", 2.0), ("TrSG", 2.0)):
        try:
            _, log, _ = train_once(stress_config(mode, vthr))
            last = log.epochs[-1]
            runs[mode, vthr] = {"diverged": False, "acc": last["test_acc"],
                                "ratio": [last[f"ratio_ag_{i}"] for i in range(3)]}
        except DivergenceError:
            runs[mode, vthr] = {"diverged": True, "acc": None, "ratio": None}
    runs["seconds"] = time.perf_counter() - start
    return runs


class TestC7StressMatrix:
    def test_training_split_is_8k(self):
        train_set, _ = load_data(stress_config("TrSG", 1.0))
        assert len(train_set) == 8000

    @pytest.mark.xfail(strict=True, reason="batch norm ahead of every LIF cancels the 1/vthr gradient scale; "
                                           "see decisions ledger")
    def test_rs_fails_at_low_threshold(self, stress_runs, acceptance):
        rs = stress_runs["RS", 0.1]
        ok = rs["diverged"] or rs["acc"] <= 0.25
        acceptance(7, "RS@0.1 diverges or <=25%", ok, "diverged" if rs["diverged"] else f"acc {rs['acc']:.3f}")
        assert ok

    def test_trsg_robust_at_low_threshold(self, stress_runs, acceptance):
        low, ref = stress_runs["TrSG", 0.1], stress_runs["TrSG", 1.0]
        ok = not low["diverged"] and not ref["diverged"] and abs(low["acc"] - ref["acc"]) <= 0.05
        acceptance(7, "TrSG@0.1 within 5 pts of TrSG@1.0", ok, f"{low['acc']:.3f} vs {ref['acc']:.3f}")
        acceptance(7, "runtime", stress_runs["seconds"] < 1800, f"{stress_runs['seconds']:.0f}s")
        assert ok and stress_runs["seconds"] < 1800

    @pytest.mark.xfail(strict=True, reason="normalised pre-activations keep a share of M inside the "
                                           "AS window at vthr=2; see decisions ledger")
    def test_as_window_starves_at_high_threshold(self, stress_runs, acceptance):
        as_r, tr_r = stress_runs["AS", 2.0]["ratio"], stress_runs["TrSG", 2.0]["ratio"]
        ok = any(a < 0.01 and t >= 5 * a for a, t in zip(as_r, tr_r))
        detail = "AS " + ", ".join(f"{a:.3f}" for a in as_r) + " / TrSG " + ", ".join(f"{t:.3f}" for t in tr_r)
        acceptance(7, "AS@2.0 RatioAG <1% and TrSG >=5x", ok, detail)
        assert ok


@pytest.fixture(scope="module")
def mpinit_pairs():
    start = time.perf_counter()
    rows = []
    for seed in range(3):
        for enabled in (True, False):
            cfg = cfgmod.from_dict({
                "net": "small", "seed": seed, "precision": "float32", "mpinit": {"enabled": enabled},
                "optim": {"epochs": 8, "lr": 0.05}, "data": {"kind": "synthetic", "n": 10_000}})
            net, log, test_set = train_once(cfg)
            reports = drift_report(net, test_set.images[:256])
            rows.append({"seed": seed, "mpinit": enabled, "acc": log.epochs[-1]["test_acc"],
                         "tv": [None if r.empty else r.tv_at(1) for r in reports]})
    return rows, time.perf_counter() - start


class TestC8MpInitBenefit:
    def test_accuracy_and_drift(self, mpinit_pairs, acceptance):
        rows, seconds = mpinit_pairs
        acc_on = np.mean([r["acc"] for r in rows if r["mpinit"]])
        acc_off = np.mean([r["acc"] for r in rows if not r["mpinit"]])
        ok_acc = acc_on >= acc_off - 0.002
        wins = total = 0
        for seed in range(3):
            on, off = (next(r for r in rows if r["seed"] == seed and r["mpinit"] == m) for m in (True, False))
            for a, b in zip(on["tv"], off["tv"]):
                total += 1
                # a silent layer has no drift to compare and counts as a miss
                wins += a is not None and b is not None and a < b
        share = wins / total
        acceptance(8, "accuracy >= baseline - 0.2 pts", ok_acc, f"{acc_on:.4f} vs {acc_off:.4f}")
        acceptance(8, "drift smaller on >= 80% of layers", share >= 0.8, f"{wins}/{total}")
        acceptance(8, "runtime", seconds < 2400, f"{seconds:.0f}s")
        assert ok_acc and share >= 0.8 and seconds < 2400


class TestC9Energy:
    def test_first_row(self, acceptance):
        got = energy_estimate(1.03e9, 0.14e9)
        ok = abs(got - 1.57) <= 0.01
        acceptance(9, "1.03G AC + 0.14G MAC -> 1.57 mJ", ok, f"{got:.4f} mJ")
        assert ok

    @pytest.mark.xfail(strict=True, reason="0.9 pJ/AC and 4.6 pJ/MAC give 1.652 mJ for this row; "
                                           "see decisions ledger")
    def test_second_row(self, acceptance):
        got = energy_estimate(1.12e9, 0.14e9)
        ok = abs(got - 1.67) <= 0.01
        acceptance(9, "1.12G AC + 0.14G MAC -> 1.67 mJ", ok, f"{got:.4f} mJ")
        assert ok


class TestC10Statistics:
    def test_ljung_box_size(self, acceptance):
        rng = np.random.default_rng(2024)
        alpha, n_series, length = 0.05, 4000, 10_000
        rejected = 0
        for _ in range(4):
            res = ljung_box_lag1(rng.standard_normal((n_series // 4, length)), alpha)
            rejected += round((1 - res.pass_fraction) * res.n_tested)
        size = rejected / n_series
        ok = abs(size - alpha) <= 0.02
        acceptance(10, "Ljung-Box size", ok, f"{size:.4f} over {n_series} series of length {length}")
        assert ok

    def test_tv_axioms(self, acceptance):
        rng = np.random.default_rng(7)
        ok = True
        for _ in range(100):
            p, q, r = (h / h.sum() for h in rng.random((3, 32)) * (rng.random((3, 32)) < 0.7) + 1e-15)
            ok &= 0.0 <= tv_distance(p, q) <= 1.0
            ok &= tv_distance(p, p) == 0.0
            ok &= tv_distance(p, q) == tv_distance(q, p)
            ok &= tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
        acceptance(10, "TV axioms on 100 triples", ok)
        assert ok
