"""Acceptance suite. Each criterion prints exactly one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the lines live. The
desk-scale ARIMA experiment and the lane-change experiment each run once
per session and back several criteria.
"""

import itertools
import json
import time
import warnings

import numpy as np
import pytest

from advcast import evaluation as eval_mod
from advcast.config import load_preset
from advcast.data import ArimaParams, arima_generate
from advcast.game import GamePipeline, batch_cost_and_grads, lne_check
from advcast.mpc import MpcProblem, condense, mpc_vjp, riccati_lqt, solve_mpc
from advcast.net import mlp_init


def verdict(num, ok, detail):
    line = f"CRITERION {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def random_problem(rng, n, m, F, u_lim, x_lim):
    A = rng.standard_normal((n, n)) * 0.5
    B = rng.standard_normal((n, m))
    Gq = rng.standard_normal((n, n))
    Gr = rng.standard_normal((m, m))
    return MpcProblem(A=A, B=B, Q=Gq @ Gq.T + np.eye(n),
                      R=Gr @ Gr.T + np.eye(m), horizon=F,
                      u_min=-u_lim, u_max=u_lim, x_min=-x_lim, x_max=x_lim)


@pytest.fixture(scope="session")
def desk_bundle():
    cfg = load_preset("arima_desk")
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bundle = eval_mod.run_experiment(cfg)
    return bundle, time.perf_counter() - t0


@pytest.fixture(scope="session")
def lane_bundle():
    cfg = load_preset("lane_change")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return eval_mod.run_experiment(cfg)


def test_criterion_1_vjp_matches_fd():
    rng = np.random.default_rng(42)
    t0 = time.perf_counter()
    checked = 0
    n_active = 0
    worst = 0.0
    while checked < 100:
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 5))
        F = int(rng.integers(1, 11))
        prob = random_problem(rng, n, m, F,
                              u_lim=float(rng.uniform(0.3, 2.0)), x_lim=50.0)
        x0 = rng.standard_normal(n)
        ref = rng.standard_normal((n, F))
        sol = solve_mpc(prob, x0, ref)
        if sol.weakly_active:
            continue
        qp = condense(prob, x0, ref)
        Mz = qp.constraint_matrix @ sol.u.T.reshape(-1)
        margin = min(np.min(Mz - qp.lower), np.min(qp.upper - Mz))
        if 0 < margin < 1e-5:
            continue
        upstream = rng.standard_normal((m, F))
        v = mpc_vjp(prob, sol, upstream)

        flat = ref.reshape(-1)
        fd = np.empty(flat.size)
        h = 1e-6
        for i in range(flat.size):
            e = np.zeros(flat.size)
            e[i] = h
            up = solve_mpc(prob, x0, (flat + e).reshape(n, F)).u
            dn = solve_mpc(prob, x0, (flat - e).reshape(n, F)).u
            fd[i] = float(np.sum(upstream * (up - dn))) / (2 * h)
        fd = fd.reshape(n, F)
        rel = np.max(np.abs(v - fd) / (1.0 + np.abs(fd)))
        worst = max(worst, rel)
        if sol.active_set:
            n_active += 1
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60 and n_active > 10 \
        and n_active < checked
    verdict(1, ok, f"100 instances, worst rel err {worst:.2e}, "
                   f"{n_active} with active bounds, {elapsed:.1f}s")


def test_criterion_2_solver_oracle_equivalence():
    rng = np.random.default_rng(7)
    worst_u = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 5))
        F = int(rng.integers(1, 11))
        prob = random_problem(rng, n, m, F, u_lim=1e6, x_lim=1e6)
        x0 = rng.standard_normal(n)
        ref = rng.standard_normal((n, F))
        sol = solve_mpc(prob, x0, ref)
        assert sol.active_set == []
        u_r = riccati_lqt(prob, x0, ref)
        worst_u = max(worst_u, float(np.max(np.abs(sol.u - u_r))))

    from advcast.mpc import CondensedQp, solve_qp_batch
    worst_kkt = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 11))
        G = rng.standard_normal((d, d))
        H = G @ G.T + np.eye(d)
        g = rng.standard_normal(d)
        k = int(rng.integers(1, 2 * d + 1))
        M = rng.standard_normal((k, d))
        center = M @ rng.standard_normal(d)
        width = rng.uniform(0.1, 2.0, size=k)
        lower, upper = center - width, center + width
        Z, lo, up = solve_qp_batch(H, g[None], M, lower[None], upper[None])
        z, lod, upd = Z[0], lo[0], up[0]
        Mz = M @ z
        stat = np.abs(H @ z + g + M.T @ (upd - lod)).max()
        prim = np.maximum(np.maximum(Mz - upper, lower - Mz), 0.0).max()
        comp = max(np.abs(upd * (upper - Mz)).max(),
                   np.abs(lod * (Mz - lower)).max())
        worst_kkt = max(worst_kkt, stat, prim, comp)
    ok = worst_u < 1e-6 and worst_kkt <= 1e-8
    verdict(2, ok, f"riccati max |du| {worst_u:.2e} on 100, "
                   f"KKT residual {worst_kkt:.2e} on 500")


def test_criterion_3_game_gradients_match_fd():
    ds = arima_generate(ArimaParams(sigma=0.3, T=5, H=3, F=2), 3, seed=1)
    mpc = MpcProblem(A=[[1.0]], B=[[-1.0]], Q=[[1.0]], R=[[1.0]], horizon=2,
                     u_min=-5.0, u_max=5.0, x_min=-1e4, x_max=1e4)
    fc = mlp_init(3, 3, 2, seed=0)
    adv = mlp_init(3, 3, 3, seed=1)
    pipe = GamePipeline(fc, adv, np.array([True]), np.zeros(1), np.ones(1),
                        np.array([0]), mpc, 2.0, 1.0, 3, 2)
    _, gf, ga = batch_cost_and_grads(pipe, ds, wrt="both")
    from advcast.game import BatchEvaluator
    ev = BatchEvaluator(pipe, ds)
    tf, ta = fc.flatten(), adv.flatten()
    h = 1e-6

    def fd(theta, which):
        g = np.empty(theta.size)
        for i in range(theta.size):
            e = np.zeros(theta.size)
            e[i] = h
            if which == "f":
                jp, jm = ev.evaluate(theta + e, ta)[0], ev.evaluate(theta - e, ta)[0]
            else:
                jp, jm = ev.evaluate(tf, theta + e)[0], ev.evaluate(tf, theta - e)[0]
            g[i] = (jp - jm) / (2 * h)
        return g

    rel_f = np.max(np.abs(gf - fd(tf, "f")) / (1.0 + np.abs(fd(tf, "f"))))
    rel_a = np.max(np.abs(ga - fd(ta, "a")) / (1.0 + np.abs(fd(ta, "a"))))
    ok = rel_f < 1e-4 and rel_a < 1e-4
    verdict(3, ok, f"forecaster rel err {rel_f:.2e}, adversary {rel_a:.2e}")


def test_criterion_4_arima_ood_improvement(desk_bundle):
    bundle, elapsed = desk_bundle
    sc = bundle.config["scales"]
    assert (sc["N_train"], sc["N_test"], sc["T"], sc["H"]) == (1000, 300, 50, 25)
    assert bundle.config["lambdas"] == {"lambda_f": 2.0, "lambda_a": 2.0}
    robust = bundle.result("robust", "ood")
    random_ = bundle.result("random", "ood")
    _, p = eval_mod.wilcoxon_signed_rank(robust.per_sample_J,
                                         random_.per_sample_J)
    imp = eval_mod.improvement_pct(random_.mean_J, robust.mean_J)
    ok = robust.mean_J < random_.mean_J and p < 0.05 and imp >= 20.0 \
        and elapsed <= 1800
    verdict(4, ok, f"OoD robust {robust.mean_J:.4g} vs random "
                   f"{random_.mean_J:.4g}, improvement {imp:.1f}%, "
                   f"p={p:.2g}, runtime {elapsed:.0f}s")


def test_criterion_5_adversarial_condition(desk_bundle):
    bundle, _ = desk_bundle
    jo = bundle.result("original", "orig").per_sample_J
    ja = bundle.result("original", "adv").per_sample_J
    _, p = eval_mod.wilcoxon_signed_rank(ja, jo)
    adv_means = {s: bundle.result(s, "adv").mean_J for s in eval_mod.SCHEMES}
    robust_lowest = all(adv_means["robust"] < adv_means[s]
                        for s in ("original", "data_added", "random"))
    ok = ja.mean() > jo.mean() and p < 0.05 and robust_lowest
    verdict(5, ok, f"original adv {ja.mean():.4g} vs orig {jo.mean():.4g} "
                   f"(p={p:.2g}), adv means "
                   + ", ".join(f"{s}={v:.4g}" for s, v in adv_means.items()))


def test_criterion_6_lane_change_directional(lane_bundle):
    bundle = lane_bundle
    sc = bundle.config["scales"]
    assert (sc["N_train"], sc["N_test"], sc["H"], sc["F"]) == (500, 100, 20, 20)
    assert bundle.config["lambdas"] == {"lambda_f": 10.0, "lambda_a": 10.0}
    robust = bundle.result("robust", "ood")
    random_ = bundle.result("random", "ood")
    _, p = eval_mod.wilcoxon_signed_rank(robust.per_sample_J,
                                         random_.per_sample_J)
    ok = robust.mean_J < random_.mean_J and p < 0.05
    verdict(6, ok, f"OoD robust {robust.mean_J:.4g} vs random "
                   f"{random_.mean_J:.4g}, p={p:.2g}, n={len(robust.per_sample_J)}")


def test_criterion_7_lne_verifier(desk_bundle):
    def saddle(sign):
        def grad_fn(tf, ta, which):
            return (sign * (float(tf @ tf) - float(ta @ ta)),
                    sign * 2.0 * tf, -sign * 2.0 * ta)
        return grad_fn

    good = lne_check(saddle(+1), np.zeros(2), np.zeros(2))
    bad = lne_check(saddle(-1), np.zeros(2), np.zeros(2))
    analytic_ok = (good.first_order_ok and good.second_order_ok
                   and bad.first_order_ok and not bad.second_order_ok)

    bundle, _ = desk_bundle
    lne = bundle.lne
    emitted = lne is not None and {"grad_norm_f", "grad_norm_a",
                                   "lambda_min_Hff", "lambda_max_Haa",
                                   "second_order_ok"} <= set(lne)
    converged = bundle.histories["robust"]["verdict"] == "converged"
    first_order = emitted and max(float(lne["grad_norm_f"]),
                                  float(lne["grad_norm_a"])) \
        < float(lne["tol_grad"])
    ok = analytic_ok and emitted and converged and first_order
    verdict(7, ok,
            f"analytic saddles {'ok' if analytic_ok else 'WRONG'}; desk run "
            f"{bundle.histories['robust']['verdict']}, grad norms "
            f"({float(lne['grad_norm_f']):.2e}, {float(lne['grad_norm_a']):.2e}) "
            f"vs tol {float(lne['tol_grad']):.2e}; second-order reported: "
            f"lambda_min_Hff={float(lne['lambda_min_Hff']):.3g}, "
            f"lambda_max_Haa={float(lne['lambda_max_Haa']):.3g}, "
            f"ok={lne['second_order_ok']}")


def test_criterion_8_bit_identical_reruns(tmp_path):
    from advcast.cli import run_command
    from test_cli import TINY_CONFIG
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = run_command(["experiment", "--config", str(cfg_path),
                          "--out", str(out)])
        assert rc == 0
        outs.append((out / "summary.json").read_bytes())
    ok = outs[0] == outs[1]
    verdict(8, ok, f"summary.json {len(outs[0])} bytes, "
                   f"{'identical' if ok else 'DIFFER'}")


def test_criterion_9_wilcoxon_brute_force():
    from scipy.stats import rankdata

    def brute(a, b):
        diff = a - b
        diff = diff[diff != 0.0]
        ranks = rankdata(np.abs(diff))
        W = min(ranks[diff > 0].sum(), ranks[diff < 0].sum())
        hits = 0
        for signs in itertools.product((1.0, -1.0), repeat=len(ranks)):
            s = np.array(signs)
            if min(ranks[s > 0].sum(), ranks[s < 0].sum()) <= W + 1e-9:
                hits += 1
        return W, hits / 2.0 ** len(ranks)

    rng = np.random.default_rng(3)
    cases = 0
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 11))
        if rng.random() < 0.5:
            b = rng.standard_normal(n)
            a = b + rng.integers(-5, 6, size=n)   # ties and zeros on purpose
        else:
            a, b = rng.standard_normal(n), rng.standard_normal(n)
        if np.all(a == b):
            continue
        W, p = eval_mod.wilcoxon_signed_rank(a, b)
        W_bf, p_bf = brute(a, b)
        assert W == pytest.approx(W_bf)
        worst = max(worst, abs(p - p_bf))
        cases += 1
    ok = worst < 1e-12 and cases >= 150
    verdict(9, ok, f"{cases} cases n<=10, max |p - p_bf| = {worst:.1e}")
