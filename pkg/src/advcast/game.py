"""The zero-sum forecasting game.

A forecaster maps a (normalized, flattened) history window to a future
window that the MPC controller tracks; an adversary perturbs the history to
make the downstream control cost worse.  Per sample the overall cost is

    J = Jc(u_hat; x0, s_F) - Jc(u_star; x0, s_F)
        + lambda_f ||s_F - s_hat||^2 - lambda_a ||s_H - s_adv||^2

with both control costs evaluated against the ground-truth future.  The
training loop alternates Adam steps: the forecaster descends and the
adversary ascends the same full-batch mean J.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import mpc as mpc_mod
from .errors import DimensionMismatch, NonFiniteGradient, RoundCapWarning
from .linalg import CholeskyFactor, sym_eig_extremes
from .net import AdamState, Mlp, adam_step, mlp_backward, mlp_forward


@dataclass
class GamePipeline:
    forecaster: Mlp
    adversary: Mlp
    adversary_channel_mask: np.ndarray     # bool, (p_in,)
    norm_mean: np.ndarray                  # (p_in,)
    norm_std: np.ndarray                   # (p_in,)
    out_channel_map: np.ndarray            # (p_out,) input-channel index per output channel
    mpc: mpc_mod.MpcProblem
    lambda_f: float
    lambda_a: float
    H: int
    F: int

    def __post_init__(self):
        self.adversary_channel_mask = np.asarray(self.adversary_channel_mask, dtype=bool)
        self.out_channel_map = np.asarray(self.out_channel_map, dtype=int)
        p_in = self.adversary_channel_mask.size
        p_out = self.out_channel_map.size
        if self.lambda_f < 0 or self.lambda_a < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.forecaster.in_dim != p_in * self.H or \
                self.forecaster.out_dim != p_out * self.F:
            raise DimensionMismatch("forecaster dims do not match p_in*H / p_out*F")
        pm = int(self.adversary_channel_mask.sum())
        if self.adversary.in_dim != pm * self.H or self.adversary.out_dim != pm * self.H:
            raise DimensionMismatch("adversary dims do not match masked channels * H")
        if p_out != self.mpc.n:
            raise DimensionMismatch("p_out must equal the MPC state dimension")

    @property
    def p_in(self) -> int:
        return self.adversary_channel_mask.size

    @property
    def p_out(self) -> int:
        return self.out_channel_map.size

    @property
    def out_mean(self) -> np.ndarray:
        return self.norm_mean[self.out_channel_map]

    @property
    def out_std(self) -> np.ndarray:
        return self.norm_std[self.out_channel_map]


@dataclass
class SampleEval:
    s_adv: np.ndarray
    s_hat_F: np.ndarray
    u_hat: np.ndarray
    u: np.ndarray
    J_C_hat: float
    J_C_star: float
    J: float


@dataclass
class LneReport:
    grad_norm_f: float
    grad_norm_a: float
    lambda_min_Hff: float
    lambda_max_Haa: float
    tol_grad: float
    tol_hess: float
    first_order_ok: bool
    second_order_ok: bool
    mean_J: float = 0.0

    def to_json(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()}


@dataclass
class TrainHistory:
    mean_J: list = field(default_factory=list)
    grad_f_norm: list = field(default_factory=list)
    grad_a_norm: list = field(default_factory=list)
    mean_perturbation_norm: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    verdict: str = "not_run"

    def rounds(self) -> int:
        return len(self.mean_J)


@dataclass
class GameConfig:
    rounds: int = 500
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol_grad: Optional[float] = None    # None -> 1e-3 * (1 + |mean J|)
    rel_tol: float = 1e-5
    patience: int = 10


def adversary_perturb(pipeline: GamePipeline, s_H: np.ndarray) -> np.ndarray:
    """s_adv = s_H + delta on masked channels, verbatim copy elsewhere."""
    s_H = np.asarray(s_H, dtype=float)
    if s_H.shape != (pipeline.p_in, pipeline.H):
        raise DimensionMismatch(f"history shape {s_H.shape} vs "
                                f"({pipeline.p_in}, {pipeline.H})")
    mask = pipeline.adversary_channel_mask
    z = (s_H[mask] - pipeline.norm_mean[mask, None]) / pipeline.norm_std[mask, None]
    out, _ = mlp_forward(pipeline.adversary, z.ravel())
    delta = out.reshape(int(mask.sum()), pipeline.H) * pipeline.norm_std[mask, None]
    s_adv = s_H.copy()
    s_adv[mask] = s_H[mask] + delta
    return s_adv


def forecast(pipeline: GamePipeline, s_in: np.ndarray) -> np.ndarray:
    """Normalize, flatten, run the forecaster, reshape, de-normalize."""
    s_in = np.asarray(s_in, dtype=float)
    if s_in.shape != (pipeline.p_in, pipeline.H):
        raise DimensionMismatch(f"history shape {s_in.shape} vs "
                                f"({pipeline.p_in}, {pipeline.H})")
    z = (s_in - pipeline.norm_mean[:, None]) / pipeline.norm_std[:, None]
    y, _ = mlp_forward(pipeline.forecaster, z.ravel())
    y = y.reshape(pipeline.p_out, pipeline.F)
    return pipeline.out_mean[:, None] + pipeline.out_std[:, None] * y


def overall_cost_sample(pipeline: GamePipeline, sample,
                        use_adversary: bool = True) -> SampleEval:
    """Single-sample evaluation of the overall cost along the full chain."""
    s_H, s_F, x0 = sample.s_H, sample.s_F, sample.x0
    s_adv = adversary_perturb(pipeline, s_H) if use_adversary else s_H.copy()
    s_hat = forecast(pipeline, s_adv)
    sol_hat = mpc_mod.solve_mpc(pipeline.mpc, x0, s_hat)
    sol = mpc_mod.solve_mpc(pipeline.mpc, x0, s_F)
    jc_hat = mpc_mod.control_cost(pipeline.mpc, x0, sol_hat.u, s_F)
    jc_star = mpc_mod.control_cost(pipeline.mpc, x0, sol.u, s_F)
    J = (jc_hat - jc_star
         + pipeline.lambda_f * float(np.sum((s_F - s_hat) ** 2))
         - pipeline.lambda_a * float(np.sum((s_H - s_adv) ** 2)))
    return SampleEval(s_adv, s_hat, sol_hat.u, sol.u, jc_hat, jc_star, J)


class BatchEvaluator:
    """Vectorized full-batch evaluation of mean J and player gradients.

    Everything that does not depend on the players is precomputed: the
    condensed MPC matrices, the ground-truth controls and their cost, the
    normalized histories.  Per-sample MPC solutions whose unconstrained
    optimum is feasible take a shared-Cholesky fast path.
    """

    def __init__(self, pipeline: GamePipeline, dataset):
        self.pipeline = pipeline
        S_H, S_F, X0 = dataset.stacked()
        self.S_H, self.S_F, self.X0 = S_H, S_F, X0
        self.N = S_H.shape[0]
        p = pipeline
        self.mask_idx = np.flatnonzero(p.adversary_channel_mask)
        self.cond = mpc_mod.Condenser(p.mpc)
        cond = self.cond
        # truth-side quantities: g and constant of Jc(.; x0, s_F)
        sbar_truth = cond.stack_refs(S_F)
        e_truth = X0 @ cond.Phi.T - sbar_truth
        self.g_truth = 2.0 * (e_truth @ cond.QG)
        self.const_truth = np.einsum("ni,ij,nj->n", e_truth, cond.Qbar, e_truth)
        g0, lo, up, _ = cond.qp_vectors(X0, S_F)
        self.bounds = (lo, up)
        U_star, _, _ = mpc_mod.solve_qp_batch(cond.H, g0, cond.M, lo, up,
                                              cholH=cond.cholH)
        self.Jc_star = self._cost_truth(U_star)
        # adversary input: normalized masked history, fixed across training
        z_masked = ((S_H[:, self.mask_idx, :]
                     - p.norm_mean[self.mask_idx][None, :, None])
                    / p.norm_std[self.mask_idx][None, :, None])
        self.adv_in = z_masked.reshape(self.N, -1).T      # (pm*H, N)
        self.std_mask = p.norm_std[self.mask_idx]

    def _cost_truth(self, U: np.ndarray) -> np.ndarray:
        HU = U @ self.cond.H
        return 0.5 * np.einsum("ni,ni->n", U, HU) \
            + np.einsum("ni,ni->n", self.g_truth, U) + self.const_truth

    def _solve_forecast_qps(self, refs_hat: np.ndarray):
        cond = self.cond
        g, _, _, _ = cond.qp_vectors(self.X0, refs_hat)
        lo, up = self.bounds
        Z, lam_lo, lam_up = mpc_mod.solve_qp_batch(cond.H, g, cond.M, lo, up,
                                                   cholH=cond.cholH)
        return Z, lam_lo, lam_up

    def _vjp_batch(self, Z, lam_lo, lam_up, upstream):
        """dL/ds_bar for every sample via active-set implicit differentiation."""
        cond = self.cond
        lo, up = self.bounds
        MZ = Z @ cond.M.T
        slack_lo = MZ - lo
        slack_up = up - MZ
        act = ((slack_lo < mpc_mod.ACTIVE_SLACK_TOL) & (lam_lo > mpc_mod.ACTIVE_DUAL_TOL)) | \
              ((slack_up < mpc_mod.ACTIVE_SLACK_TOL) & (lam_up > mpc_mod.ACTIVE_DUAL_TOL))
        any_active = act.any(axis=1)
        W = cond.cholH.solve(upstream.T).T
        for i in np.flatnonzero(any_active):
            rows = np.flatnonzero(act[i]).tolist()
            W[i] = mpc_mod.reduced_kkt_solve(cond, rows, upstream[i])
        return 2.0 * (W @ cond.QG.T)                      # (N, nF)

    def evaluate(self, theta_f: Optional[np.ndarray] = None,
                 theta_a: Optional[np.ndarray] = None,
                 need_grad_f: bool = False, need_grad_a: bool = False):
        """Mean J over the dataset plus requested player gradients.

        Returns (mean_J, grad_f, grad_a, aux) where aux carries the mean
        perturbation norm.  Fixed evaluation order keeps runs bit-for-bit
        reproducible.
        """
        p = self.pipeline
        fc = p.forecaster if theta_f is None else p.forecaster.with_params(theta_f)
        adv = p.adversary if theta_a is None else p.adversary.with_params(theta_a)
        N, n, F = self.N, p.mpc.n, p.F

        a_out, cache_a = mlp_forward(adv, self.adv_in)
        delta = a_out.T.reshape(N, len(self.mask_idx), p.H) \
            * self.std_mask[None, :, None]
        S_adv = self.S_H.copy()
        S_adv[:, self.mask_idx, :] += delta
        Z_f = (S_adv - p.norm_mean[None, :, None]) / p.norm_std[None, :, None]
        f_in = Z_f.reshape(N, -1).T
        y, cache_f = mlp_forward(fc, f_in)
        s_hat = p.out_mean[None, :, None] + p.out_std[None, :, None] \
            * y.T.reshape(N, p.p_out, F)

        Z, lam_lo, lam_up = self._solve_forecast_qps(s_hat)
        Jc_hat = self._cost_truth(Z)
        fore_err = s_hat - self.S_F
        pert_sq = np.sum(delta ** 2, axis=(1, 2))
        J = (Jc_hat - self.Jc_star
             + p.lambda_f * np.sum(fore_err ** 2, axis=(1, 2))
             - p.lambda_a * pert_sq)
        mean_J = float(J.mean())
        aux = {"mean_perturbation_norm": float(np.sqrt(pert_sq).mean()),
               "per_sample_J": J}
        if not (need_grad_f or need_grad_a):
            return mean_J, None, None, aux

        upstream_u = Z @ self.cond.H + self.g_truth       # dJc_hat/du_bar
        dsbar = self._vjp_batch(Z, lam_lo, lam_up, upstream_u)
        ds_hat = dsbar.reshape(N, F, n).transpose(0, 2, 1) \
            + 2.0 * p.lambda_f * fore_err
        dy = (ds_hat * p.out_std[None, :, None]).reshape(N, -1).T / N
        grad_f, dx_f = mlp_backward(fc, cache_f, dy)
        grad_a = None
        if need_grad_a:
            dS_adv = dx_f.T.reshape(N, p.p_in, p.H) / p.norm_std[None, :, None]
            dS_adv[:, self.mask_idx, :] += -2.0 * p.lambda_a * delta / N
            d_aout = (dS_adv[:, self.mask_idx, :]
                      * self.std_mask[None, :, None]).reshape(N, -1).T
            grad_a, _ = mlp_backward(adv, cache_a, d_aout)
            if not np.all(np.isfinite(grad_a)):
                raise NonFiniteGradient("adversary gradient is non-finite")
        if need_grad_f and not np.all(np.isfinite(grad_f)):
            raise NonFiniteGradient("forecaster gradient is non-finite")
        return mean_J, (grad_f if need_grad_f else None), grad_a, aux


def batch_cost_and_grads(pipeline: GamePipeline, dataset, wrt: str = "both"):
    """Full-batch mean J and gradients for the requested player(s)."""
    if wrt not in ("forecaster", "adversary", "both"):
        raise ValueError(f"unknown wrt {wrt!r}")
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    ev = BatchEvaluator(pipeline, dataset)
    mean_J, gf, ga, _ = ev.evaluate(
        need_grad_f=wrt in ("forecaster", "both"),
        need_grad_a=wrt in ("adversary", "both"))
    return mean_J, gf, ga


def pretrain_forecaster(pipeline: GamePipeline, dataset, epochs: int,
                        lr: float = 1e-3):
    """Full-batch Adam on mean ||s_hat - s_F||^2 with clean histories."""
    p = pipeline
    S_H, S_F, _ = dataset.stacked()
    N = S_H.shape[0]
    Z = (S_H - p.norm_mean[None, :, None]) / p.norm_std[None, :, None]
    f_in = Z.reshape(N, -1).T
    fc = p.forecaster
    theta = fc.flatten()
    state = AdamState.zeros(theta.size, lr)
    curve = []
    for _ in range(epochs):
        net = fc.with_params(theta)
        y, cache = mlp_forward(net, f_in)
        s_hat = p.out_mean[None, :, None] + p.out_std[None, :, None] \
            * y.T.reshape(N, p.p_out, p.F)
        err = s_hat - S_F
        curve.append(float(np.sum(err ** 2, axis=(1, 2)).mean()))
        dy = (2.0 * err * p.out_std[None, :, None]).reshape(N, -1).T / N
        grads, _ = mlp_backward(net, cache, dy)
        theta, state = adam_step(theta, grads, state)
    return fc.with_params(theta), curve


def train_robust(pipeline: GamePipeline, dataset, config: GameConfig):
    """Alternating-Adam min-max training of forecaster and adversary.

    Both players' steps in a round use gradients of the same full-batch
    mean J, evaluated once; the forecaster minimizes, the adversary
    maximizes.  Stops when the relative change of mean J stays below
    rel_tol for `patience` consecutive rounds while both gradient norms
    are under tol_grad, otherwise at the round cap (with a warning,
    returning the most stationary iterate seen).
    """
    ev = BatchEvaluator(pipeline, dataset)
    theta_f = pipeline.forecaster.flatten()
    theta_a = pipeline.adversary.flatten()
    state_f = AdamState.zeros(theta_f.size, config.lr, config.beta1,
                              config.beta2, config.eps)
    state_a = AdamState.zeros(theta_a.size, config.lr, config.beta1,
                              config.beta2, config.eps)
    hist = TrainHistory()
    best = (np.inf, theta_f.copy(), theta_a.copy())
    quiet = 0
    prev_J = None
    t0 = time.perf_counter()
    converged = False
    for _ in range(config.rounds):
        mean_J, gf, ga, aux = ev.evaluate(theta_f, theta_a,
                                          need_grad_f=True, need_grad_a=True)
        gf_norm = float(np.linalg.norm(gf))
        ga_norm = float(np.linalg.norm(ga))
        hist.mean_J.append(mean_J)
        hist.grad_f_norm.append(gf_norm)
        hist.grad_a_norm.append(ga_norm)
        hist.mean_perturbation_norm.append(aux["mean_perturbation_norm"])
        hist.wall_clock.append(time.perf_counter() - t0)
        stat = max(gf_norm, ga_norm)
        if stat < best[0]:
            best = (stat, theta_f.copy(), theta_a.copy())
        tol_grad = config.tol_grad
        if tol_grad is None:
            tol_grad = 1e-3 * (1.0 + abs(mean_J))
        if prev_J is not None and \
                abs(mean_J - prev_J) < config.rel_tol * (1.0 + abs(prev_J)):
            quiet += 1
        else:
            quiet = 0
        prev_J = mean_J
        if quiet >= config.patience and stat < tol_grad:
            converged = True
            break
        theta_f, state_f = adam_step(theta_f, gf, state_f, "minimize")
        theta_a, state_a = adam_step(theta_a, ga, state_a, "maximize")
    if converged:
        hist.verdict = "converged"
    elif config.rounds > 0:
        hist.verdict = "round_cap"
        warnings.warn("round cap reached before convergence; returning the "
                      "most stationary iterate", RoundCapWarning)
        theta_f, theta_a = best[1], best[2]
    else:
        hist.verdict = "no_rounds"
    return (pipeline.forecaster.with_params(theta_f),
            pipeline.adversary.with_params(theta_a), hist)


def lne_check(grad_fn, theta_f: np.ndarray, theta_a: np.ndarray,
              tol_grad: Optional[float] = None,
              tol_hess: Optional[float] = None,
              fd_step: float = 1e-4, hessian: bool = True) -> LneReport:
    """First/second-order equilibrium verdicts for an arbitrary objective.

    grad_fn(theta_f, theta_a, which) must return (J, grad_f, grad_a) with
    the unrequested gradient allowed to be None.  Block Hessians come from
    central finite differences of the gradients, symmetrized.
    """
    mean_J, gf, ga = grad_fn(theta_f, theta_a, "both")
    gn_f = float(np.linalg.norm(gf))
    gn_a = float(np.linalg.norm(ga))
    if tol_grad is None:
        tol_grad = 1e-3 * (1.0 + abs(mean_J))
    lam_min_ff = lam_max_aa = float("nan")
    second_ok = False
    tol_h = float("nan")
    if hessian:
        def block(theta, other, which, size):
            Hb = np.empty((size, size))
            for i in range(size):
                e = np.zeros(size)
                e[i] = fd_step
                if which == "f":
                    _, gp, _ = grad_fn(theta + e, other, "forecaster")
                    _, gm, _ = grad_fn(theta - e, other, "forecaster")
                else:
                    _, _, gp = grad_fn(other, theta + e, "adversary")
                    _, _, gm = grad_fn(other, theta - e, "adversary")
                Hb[:, i] = (gp - gm) / (2.0 * fd_step)
            return 0.5 * (Hb + Hb.T)

        Hff = block(theta_f, theta_a, "f", theta_f.size)
        Haa = block(theta_a, theta_f, "a", theta_a.size)
        lam_min_ff, _ = sym_eig_extremes(Hff)
        _, lam_max_aa = sym_eig_extremes(Haa)
        if tol_hess is None:
            tol_h = 1e-2 * max(1.0, float(np.linalg.norm(Hff)),
                               float(np.linalg.norm(Haa)))
        else:
            tol_h = tol_hess
        second_ok = (lam_min_ff >= -tol_h) and (lam_max_aa <= tol_h)
    first_ok = max(gn_f, gn_a) <= tol_grad
    return LneReport(gn_f, gn_a, lam_min_ff, lam_max_aa, float(tol_grad),
                     float(tol_h), bool(first_ok), bool(second_ok),
                     mean_J=float(mean_J))


HESSIAN_PARAM_CAP = 600


def verify_lne(pipeline: GamePipeline, dataset,
               tol_grad: Optional[float] = None,
               tol_hess: Optional[float] = None,
               fd_step: float = 1e-4, hessian: bool = True) -> LneReport:
    """Check the stationarity and block-curvature conditions at the current
    parameters, on the dataset the players actually optimized."""
    if hessian and max(pipeline.forecaster.n_params,
                       pipeline.adversary.n_params) > HESSIAN_PARAM_CAP:
        raise ValueError(
            f"dense Hessian check capped at {HESSIAN_PARAM_CAP} parameters "
            "per player; shrink the networks or disable the hessian")
    ev = BatchEvaluator(pipeline, dataset)

    def grad_fn(tf, ta, which):
        J, gf, ga, _ = ev.evaluate(tf, ta,
                                   need_grad_f=which in ("forecaster", "both"),
                                   need_grad_a=which in ("adversary", "both"))
        return J, gf, ga

    return lne_check(grad_fn, pipeline.forecaster.flatten(),
                     pipeline.adversary.flatten(), tol_grad, tol_hess,
                     fd_step, hessian)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, pipeline: GamePipeline, config_hash: str = "",
                    round_counter: int = 0) -> None:
    doc = {
        "forecaster": pipeline.forecaster.to_json(),
        "adversary": pipeline.adversary.to_json(),
        "adversary_channel_mask": pipeline.adversary_channel_mask.astype(int).tolist(),
        "norm_mean": [format(v, ".17g") for v in pipeline.norm_mean],
        "norm_std": [format(v, ".17g") for v in pipeline.norm_std],
        "out_channel_map": pipeline.out_channel_map.tolist(),
        "lambda_f": pipeline.lambda_f,
        "lambda_a": pipeline.lambda_a,
        "H": pipeline.H,
        "F": pipeline.F,
        "config_hash": config_hash,
        "round_counter": round_counter,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc["forecaster"] = Mlp.from_json(doc["forecaster"])
    doc["adversary"] = Mlp.from_json(doc["adversary"])
    doc["adversary_channel_mask"] = np.array(doc["adversary_channel_mask"], dtype=bool)
    doc["norm_mean"] = np.array([float(v) for v in doc["norm_mean"]])
    doc["norm_std"] = np.array([float(v) for v in doc["norm_std"]])
    doc["out_channel_map"] = np.array(doc["out_channel_map"], dtype=int)
    return doc


def pipeline_with(pipeline: GamePipeline, forecaster: Mlp = None,
                  adversary: Mlp = None) -> GamePipeline:
    return GamePipeline(
        forecaster or pipeline.forecaster, adversary or pipeline.adversary,
        pipeline.adversary_channel_mask, pipeline.norm_mean, pipeline.norm_std,
        pipeline.out_channel_map, pipeline.mpc, pipeline.lambda_f,
        pipeline.lambda_a, pipeline.H, pipeline.F)
