"""Scheme-comparison experiments and their statistics.

Four forecaster training regimes (original / data_added / random / robust)
are scored on three test conditions (orig / adv / ood).  Evaluation-time J
drops the adversary penalty term: a perturbation baked into a test dataset
is a property of the data, not of the forecaster being scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm as _normal, rankdata

from . import data as data_mod
from . import game as game_mod
from . import mpc as mpc_mod
from .errors import (
    AllZeroDifferences,
    LengthMismatch,
    NonPositiveBaseline,
)

SCHEMES = ("original", "data_added", "random", "robust")
CONDITIONS = ("orig", "adv", "ood")
EXACT_WILCOXON_MAX_N = 20


@dataclass
class EvalResult:
    condition: str
    scheme: str
    per_sample_J: np.ndarray
    mean_J: float
    mean_forecast_mse: float
    mean_control_gap: float

    def to_json(self) -> dict:
        return {
            "condition": self.condition,
            "scheme": self.scheme,
            "per_sample_J": [format(v, ".17g") for v in self.per_sample_J],
            "mean_J": format(self.mean_J, ".17g"),
            "mean_forecast_mse": format(self.mean_forecast_mse, ".17g"),
            "mean_control_gap": format(self.mean_control_gap, ".17g"),
        }

    @staticmethod
    def from_json(doc: dict) -> "EvalResult":
        return EvalResult(doc["condition"], doc["scheme"],
                          np.array([float(v) for v in doc["per_sample_J"]]),
                          float(doc["mean_J"]), float(doc["mean_forecast_mse"]),
                          float(doc["mean_control_gap"]))


@dataclass
class ReportBundle:
    experiment: str
    results: list                 # [EvalResult]
    pairwise_tests: list          # [{scheme_a, scheme_b, condition, W, p}]
    improvements: list            # [{condition, baseline, pct}]
    lne: dict | None
    config: dict
    config_hash: str
    seed: int
    histories: dict = field(default_factory=dict)   # scheme -> rows

    def result(self, scheme: str, condition: str) -> EvalResult:
        for r in self.results:
            if r.scheme == scheme and r.condition == condition:
                return r
        raise KeyError((scheme, condition))

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment,
            "results": [r.to_json() for r in self.results],
            "pairwise_tests": self.pairwise_tests,
            "improvements": self.improvements,
            "lne": self.lne,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "histories": self.histories,
        }

    @staticmethod
    def from_json(doc: dict) -> "ReportBundle":
        return ReportBundle(
            doc["experiment"],
            [EvalResult.from_json(r) for r in doc["results"]],
            doc["pairwise_tests"], doc["improvements"], doc["lne"],
            doc["config"], doc["config_hash"], doc["seed"],
            doc.get("histories", {}))


def evaluate(pipeline: game_mod.GamePipeline, dataset, lambda_f: float,
             forecast_fn=None) -> EvalResult:
    """Score a forecaster on a dataset without a live adversary.

    Per sample: J = Jc(u_hat) - Jc(u_star) + lambda_f ||s_F - s_hat||^2,
    with the stored history (possibly pre-perturbed) as the input.
    forecast_fn overrides the pipeline forecaster; it maps a stacked
    (N, p_in, H) history array to (N, p_out, F) forecasts.
    """
    S_H, S_F, X0 = dataset.stacked()
    N = S_H.shape[0]
    p = pipeline
    if forecast_fn is None:
        Z = (S_H - p.norm_mean[None, :, None]) / p.norm_std[None, :, None]
        y, _ = game_mod.mlp_forward(p.forecaster, Z.reshape(N, -1).T)
        s_hat = p.out_mean[None, :, None] + p.out_std[None, :, None] \
            * y.T.reshape(N, p.p_out, p.F)
    else:
        s_hat = forecast_fn(S_H)
    cond = mpc_mod.Condenser(p.mpc)
    sbar_truth = cond.stack_refs(S_F)
    e_truth = X0 @ cond.Phi.T - sbar_truth
    g_truth = 2.0 * (e_truth @ cond.QG)
    const_truth = np.einsum("ni,ij,nj->n", e_truth, cond.Qbar, e_truth)

    def jc(U):
        return 0.5 * np.einsum("ni,ni->n", U, U @ cond.H) \
            + np.einsum("ni,ni->n", g_truth, U) + const_truth

    _, lo, up, _ = cond.qp_vectors(X0, S_F)
    U_star, _, _ = mpc_mod.solve_qp_batch(cond.H, g_truth, cond.M, lo, up,
                                          cholH=cond.cholH)
    g_hat, _, _, _ = cond.qp_vectors(X0, s_hat)
    U_hat, _, _ = mpc_mod.solve_qp_batch(cond.H, g_hat, cond.M, lo, up,
                                         cholH=cond.cholH)
    gap = jc(U_hat) - jc(U_star)
    err = np.sum((S_F - s_hat) ** 2, axis=(1, 2))
    J = gap + lambda_f * err
    mse = err / (p.p_out * p.F)
    return EvalResult("", "", J, float(J.mean()), float(mse.mean()),
                      float(gap.mean()))


def _exact_min_w_p(ranks: np.ndarray, w_obs: float) -> float:
    """P(min(W+, W-) <= w_obs) over uniform sign assignments.

    Subset-sum distribution of the (tie-averaged) ranks via convolution;
    ranks are doubled so everything stays integral.
    """
    r2 = np.rint(2.0 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(np.floor(2.0 * w_obs + 1e-9))
    sums = np.arange(total + 1)
    extreme = (sums <= w2) | (total - sums <= w2)
    hits = int(np.sum(counts[extreme]))
    return hits / float(2 ** len(ranks))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped, tied magnitudes share average ranks,
    W = min(W+, W-).  Exact enumeration up to n = 20 nonzero differences,
    normal approximation with tie correction beyond.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise LengthMismatch("inputs must be equal-length vectors of size >= 2")
    diff = a - b
    diff = diff[diff != 0.0]
    if diff.size == 0:
        raise AllZeroDifferences("all paired differences are zero")
    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    W = min(w_plus, w_minus)
    n = diff.size
    if n <= EXACT_WILCOXON_MAX_N:
        p = _exact_min_w_p(ranks, W)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = (W - mean + 0.5) / np.sqrt(var)
        p = min(1.0, 2.0 * float(_normal.cdf(z)))
    return W, min(1.0, p)


def improvement_pct(baseline_mean: float, ours_mean: float) -> float:
    """100 * (baseline - ours) / baseline; positive means we improved."""
    if baseline_mean <= 0:
        raise NonPositiveBaseline("baseline mean must be positive")
    return 100.0 * (baseline_mean - ours_mean) / baseline_mean


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------

def _sub_seed(master: int, k: int) -> int:
    return int(master) * 1000 + k


def _build_datasets(cfg: dict, seed: int):
    """(train, test, ood_test, data_added_generator) for either experiment."""
    sc = cfg["scales"]
    if cfg["experiment"] == "arima":
        a = cfg["arima"]
        s0_range = tuple(a["s0_range"]) if "s0_range" in a else None
        params = data_mod.ArimaParams(
            sigma=a["sigma"], s0=a["s0"], T=sc["T"], H=sc["H"], F=sc["F"],
            x0=a["x0"], mu_range=tuple(a["mu_range"]),
            alpha_range=tuple(a["alpha_range"]), beta_range=tuple(a["beta_range"]),
            s0_range=s0_range)
        train = data_mod.arima_generate(params, sc["N_train"], _sub_seed(seed, 1))
        # model parameters are a dataset-level draw; the original test split
        # and same-distribution additions reuse the training draw
        fixed = data_mod.ArimaParams(
            sigma=a["sigma"], s0=a["s0"], T=sc["T"], H=sc["H"], F=sc["F"],
            x0=a["x0"], mu=train.meta["mu"], alpha=train.meta["alpha"],
            beta=train.meta["beta"], s0_range=s0_range)
        test = data_mod.arima_generate(fixed, sc["N_test"], _sub_seed(seed, 2),
                                       split="test")
        ood_params = data_mod.ArimaParams(
            sigma=a["sigma_ood"], s0=a["s0"], T=sc["T"], H=sc["H"], F=sc["F"],
            x0=a["x0"], mu_range=tuple(a["mu_range"]),
            alpha_range=tuple(a["alpha_range"]), beta_range=tuple(a["beta_range"]),
            s0_range=s0_range)
        ood = data_mod.arima_generate(ood_params, sc["N_test"],
                                      _sub_seed(seed, 3), split="test", kind="ood")

        def generator(count, gseed):
            return data_mod.arima_generate(fixed, count, gseed, kind="add")

        return train, test, ood, generator

    lc = cfg["lane"]
    params = data_mod.LaneChangeParams(
        dt=lc["dt"], H=sc["H"], F=sc["F"], road_length=lc["road_length"],
        lane_offset=lc["lane_offset"], accel_std=lc["accel_std"],
        speed_range=tuple(lc["speed_train"]), gap_range=tuple(lc["gap_range"]))
    train = data_mod.lane_change_generate(params, sc["N_train"], _sub_seed(seed, 1))
    test = data_mod.lane_change_generate(params, sc["N_test"],
                                         _sub_seed(seed, 2), split="test")
    ood_params = data_mod.LaneChangeParams(
        dt=lc["dt"], H=sc["H"], F=sc["F"], road_length=lc["road_length"],
        lane_offset=lc["lane_offset"], accel_std=lc["accel_std"],
        speed_range=tuple(lc["speed_ood"]), gap_range=tuple(lc["gap_range"]))
    pool = data_mod.lane_change_generate(ood_params, sc["N_test"],
                                         _sub_seed(seed, 3), split="test")
    _, ood = data_mod.split_by_speed(pool, threshold=lc["speed_threshold"])

    def generator(count, gseed):
        return data_mod.lane_change_generate(params, count, gseed, kind="add")

    return train, test, ood, generator


def _make_pipeline(cfg: dict, train) -> game_mod.GamePipeline:
    from .config import build_mpc_problem
    d = train.dims
    mean, std = data_mod.normalize_stats(train)
    if cfg["experiment"] == "arima":
        mask = np.ones(1, dtype=bool)
        out_map = np.zeros(1, dtype=int)
    else:
        mask = np.zeros(8, dtype=bool)
        mask[list(range(*data_mod.OTHER_SLICE.indices(8)))] = True
        out_map = np.arange(4)
    net_cfg = cfg["net"]
    from .net import mlp_init
    forecaster = mlp_init(d.p_in * d.H, net_cfg["hidden_forecaster"],
                          d.p_out * d.F, seed=net_cfg["init_seed"])
    pm = int(mask.sum())
    adversary = mlp_init(pm * d.H, net_cfg["hidden_adversary"], pm * d.H,
                         seed=net_cfg["init_seed"] + 1, zero_output_layer=True)
    return game_mod.GamePipeline(
        forecaster, adversary, mask, mean, std, out_map,
        build_mpc_problem(cfg), cfg["lambdas"]["lambda_f"],
        cfg["lambdas"]["lambda_a"], d.H, d.F)


def run_experiment(cfg: dict) -> ReportBundle:
    """Datasets -> pretraining -> four schemes -> conditions -> statistics.

    Fully determined by (config, seed); see the config schema for every
    tunable.
    """
    from .config import config_hash
    seed = cfg["seed"]
    opt = cfg["optimizer"]
    train, test, ood, generator = _build_datasets(cfg, seed)
    base = _make_pipeline(cfg, train)

    pretrained, _ = pretrain_forecaster_for(base, train, opt)
    histories = {}

    # baseline schemes: MSE training on their respective datasets
    scheme_nets = {}
    for scheme in ("original", "data_added", "random"):
        ds = data_mod.build_scheme(train, scheme, generator=generator,
                                   seed=_sub_seed(seed, 10 + len(scheme_nets)))
        if scheme == "original":
            scheme_nets[scheme] = pretrained
        else:
            net, _ = pretrain_forecaster_for(base, ds, opt)
            scheme_nets[scheme] = net

    # robust scheme: the game, starting from the pretrained forecaster
    robust_pipeline = game_mod.pipeline_with(base, forecaster=pretrained)
    gcfg = game_mod.GameConfig(rounds=opt["rounds"], lr=opt["game_lr"],
                               beta1=opt["beta1"], beta2=opt["beta2"],
                               eps=opt["eps"])
    import warnings as _warnings
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore", category=Warning)
        theta_f, theta_a, hist = game_mod.train_robust(robust_pipeline, train, gcfg)
    scheme_nets["robust"] = theta_f
    final_pipeline = game_mod.pipeline_with(base, forecaster=theta_f,
                                            adversary=theta_a)
    histories["robust"] = {
        "mean_J": [format(v, ".17g") for v in hist.mean_J],
        "grad_f_norm": [format(v, ".17g") for v in hist.grad_f_norm],
        "grad_a_norm": [format(v, ".17g") for v in hist.grad_a_norm],
        "mean_perturbation_norm": [format(v, ".17g")
                                   for v in hist.mean_perturbation_norm],
        "verdict": hist.verdict,
    }

    adv_test = data_mod.make_adversarial_testset(test, final_pipeline)
    condition_sets = {"orig": test, "adv": adv_test, "ood": ood}

    results = []
    lam_f = cfg["lambdas"]["lambda_f"]
    for scheme in SCHEMES:
        pipe = game_mod.pipeline_with(base, forecaster=scheme_nets[scheme])
        for condition, ds in condition_sets.items():
            r = evaluate(pipe, ds, lam_f)
            r.scheme, r.condition = scheme, condition
            results.append(r)
    bundle = ReportBundle(cfg["experiment"], results, [], [], None, cfg,
                          config_hash(cfg), seed, histories)

    for condition in CONDITIONS:
        for i, sa in enumerate(SCHEMES):
            for sb in SCHEMES[i + 1:]:
                ja = bundle.result(sa, condition).per_sample_J
                jb = bundle.result(sb, condition).per_sample_J
                try:
                    W, p = wilcoxon_signed_rank(ja, jb)
                except AllZeroDifferences:
                    W, p = 0.0, 1.0
                bundle.pairwise_tests.append(
                    {"scheme_a": sa, "scheme_b": sb, "condition": condition,
                     "W": format(W, ".17g"), "p": format(p, ".17g")})

    for condition in CONDITIONS:
        ours = bundle.result("robust", condition).mean_J
        for baseline in ("original", "data_added", "random"):
            bmean = bundle.result(baseline, condition).mean_J
            pct = improvement_pct(bmean, ours) if bmean > 0 else float("nan")
            bundle.improvements.append(
                {"condition": condition, "baseline": baseline,
                 "pct": format(pct, ".17g")})

    lne_cfg = cfg["lne"]
    with np.errstate(all="ignore"):
        report = game_mod.verify_lne(
            game_mod.pipeline_with(base, forecaster=theta_f, adversary=theta_a),
            train, fd_step=lne_cfg["fd_step"], hessian=lne_cfg["hessian"])
    bundle.lne = {k: (format(v, ".17g") if isinstance(v, float) else bool(v))
                  for k, v in report.to_json().items()}
    return bundle


def pretrain_forecaster_for(pipeline, dataset, opt_cfg):
    return game_mod.pretrain_forecaster(pipeline, dataset,
                                        epochs=opt_cfg["pretrain_epochs"],
                                        lr=opt_cfg["pretrain_lr"])


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report(bundle: ReportBundle, out_dir) -> list:
    """Emit summary.json, costs.csv, tests.csv, and lne.csv."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    path = os.path.join(out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(bundle.to_json(), fh, indent=1, sort_keys=True)
    paths.append(path)

    path = os.path.join(out_dir, "costs.csv")
    with open(path, "w") as fh:
        fh.write("scheme,condition,mean_J,mean_forecast_mse,mean_control_gap,n\n")
        for r in bundle.results:
            fh.write(f"{r.scheme},{r.condition},{format(r.mean_J, '.17g')},"
                     f"{format(r.mean_forecast_mse, '.17g')},"
                     f"{format(r.mean_control_gap, '.17g')},{len(r.per_sample_J)}\n")
    paths.append(path)

    path = os.path.join(out_dir, "tests.csv")
    with open(path, "w") as fh:
        fh.write("scheme_a,scheme_b,condition,W,p\n")
        for t in bundle.pairwise_tests:
            fh.write(f"{t['scheme_a']},{t['scheme_b']},{t['condition']},"
                     f"{t['W']},{t['p']}\n")
    paths.append(path)

    path = os.path.join(out_dir, "lne.csv")
    with open(path, "w") as fh:
        keys = ["grad_norm_f", "grad_norm_a", "lambda_min_Hff",
                "lambda_max_Haa", "tol_grad", "tol_hess", "first_order_ok",
                "second_order_ok", "mean_J"]
        fh.write(",".join(keys) + "\n")
        if bundle.lne is not None:
            fh.write(",".join(str(bundle.lne[k]) for k in keys) + "\n")
    paths.append(path)
    return paths


def read_bundle(path) -> ReportBundle:
    with open(path) as fh:
        return ReportBundle.from_json(json.load(fh))
