"""Adversarially robust forecasting for optimal control.

A forecaster and a hypothetical adversary are trained as a zero-sum game
through a differentiable MPC controller, then compared against standard
training schemes on clean, adversarial, and out-of-distribution test sets.
"""

from . import config, data, evaluation, figures, game, linalg, mpc, net
from .data import (
    ArimaParams,
    Dataset,
    Dims,
    LaneChangeParams,
    Sample,
    arima_generate,
    build_scheme,
    lane_change_generate,
    load_dataset,
    make_adversarial_testset,
    normalize_stats,
    save_dataset,
    split_by_speed,
)
from .evaluation import (
    EvalResult,
    ReportBundle,
    evaluate,
    improvement_pct,
    run_experiment,
    wilcoxon_signed_rank,
    write_report,
)
from .game import (
    BatchEvaluator,
    GameConfig,
    GamePipeline,
    LneReport,
    TrainHistory,
    batch_cost_and_grads,
    forecast,
    lne_check,
    load_checkpoint,
    overall_cost_sample,
    pretrain_forecaster,
    save_checkpoint,
    train_robust,
    verify_lne,
)
from .mpc import (
    MpcProblem,
    MpcSolution,
    condense,
    control_cost,
    mpc_vjp,
    riccati_lqt,
    solve_mpc,
    solve_qp,
)
from .net import Mlp, adam_step, mlp_backward, mlp_forward, mlp_init

__version__ = "0.1.0"

__all__ = [
    "ArimaParams", "BatchEvaluator", "Dataset", "Dims", "EvalResult",
    "GameConfig", "GamePipeline", "LaneChangeParams", "LneReport", "Mlp",
    "MpcProblem", "MpcSolution", "ReportBundle", "Sample", "TrainHistory",
    "adam_step", "arima_generate", "batch_cost_and_grads", "build_scheme",
    "condense", "config", "control_cost", "data", "evaluate", "evaluation",
    "figures", "forecast", "game", "improvement_pct", "lane_change_generate",
    "linalg", "lne_check", "load_checkpoint", "load_dataset",
    "make_adversarial_testset", "mlp_backward", "mlp_forward", "mlp_init",
    "mpc", "mpc_vjp", "net", "normalize_stats", "overall_cost_sample",
    "pretrain_forecaster", "riccati_lqt", "run_experiment", "save_checkpoint",
    "save_dataset", "solve_mpc", "solve_qp", "split_by_speed", "train_robust",
    "verify_lne", "wilcoxon_signed_rank", "write_report",
]
