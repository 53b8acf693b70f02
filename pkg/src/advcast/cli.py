"""Command-line entry point.

Subcommands: gen-data, pretrain, train, eval, verify-lne, experiment, report.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as data_mod
from . import evaluation as eval_mod
from . import game as game_mod
from .config import config_hash, load_config
from .errors import AdvcastError, ConfigInvalid, MissingInput

log = logging.getLogger("advcast")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(
        os.environ.get("ADVCAST_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigInvalid(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="advcast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="config JSON path")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--workers", type=int, default=1,
                        help="worker count (results are identical for any value)")

    common(sub.add_parser("gen-data", help="write dataset CSVs"))
    common(sub.add_parser("pretrain", help="MSE-pretrain the forecaster"))
    sp = sub.add_parser("train", help="robust game training")
    common(sp)
    sp.add_argument("--checkpoint", help="pretrained checkpoint to start from")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on test conditions")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("verify-lne", help="equilibrium checks for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    common(sub.add_parser("experiment", help="full scheme-comparison pipeline"))
    sp = sub.add_parser("report", help="re-render report files from summary.json")
    sp.add_argument("--summary", required=True, help="summary.json path")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None,
                    help="optional config to check the embedded hash against")
    return p


def _load(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _pipeline_from_checkpoint(cfg, doc):
    from .config import build_mpc_problem
    return game_mod.GamePipeline(
        doc["forecaster"], doc["adversary"], doc["adversary_channel_mask"],
        doc["norm_mean"], doc["norm_std"], doc["out_channel_map"],
        build_mpc_problem(cfg), cfg["lambdas"]["lambda_f"],
        cfg["lambdas"]["lambda_a"], cfg["scales"]["H"], cfg["scales"]["F"])


def _write_rows(path, header, rows, chash):
    with open(path, "w") as fh:
        fh.write(f"#config_hash,{chash}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train, test, ood, _ = eval_mod._build_datasets(cfg, cfg["seed"])
    for name, ds in (("train", train), ("test", test), ("ood", ood)):
        data_mod.save_dataset(os.path.join(args.out, f"{name}.csv"), ds)
    log.info("wrote datasets to %s", args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train, _, _, _ = eval_mod._build_datasets(cfg, cfg["seed"])
    pipeline = eval_mod._make_pipeline(cfg, train)
    net, curve = eval_mod.pretrain_forecaster_for(pipeline, train,
                                                  cfg["optimizer"])
    chash = config_hash(cfg)
    game_mod.save_checkpoint(os.path.join(args.out, "pretrained.json"),
                             game_mod.pipeline_with(pipeline, forecaster=net),
                             chash)
    _write_rows(os.path.join(args.out, "pretrain_loss.csv"), "epoch,mse",
                [(i, format(v, ".17g")) for i, v in enumerate(curve)], chash)
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train, _, _, _ = eval_mod._build_datasets(cfg, cfg["seed"])
    pipeline = eval_mod._make_pipeline(cfg, train)
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise MissingInput(args.checkpoint)
        doc = game_mod.load_checkpoint(args.checkpoint)
        pipeline = _pipeline_from_checkpoint(cfg, doc)
    else:
        net, _ = eval_mod.pretrain_forecaster_for(pipeline, train,
                                                  cfg["optimizer"])
        pipeline = game_mod.pipeline_with(pipeline, forecaster=net)
    opt = cfg["optimizer"]
    gcfg = game_mod.GameConfig(rounds=opt["rounds"], lr=opt["game_lr"],
                               beta1=opt["beta1"], beta2=opt["beta2"],
                               eps=opt["eps"])
    theta_f, theta_a, hist = game_mod.train_robust(pipeline, train, gcfg)
    chash = config_hash(cfg)
    game_mod.save_checkpoint(
        os.path.join(args.out, "robust.json"),
        game_mod.pipeline_with(pipeline, forecaster=theta_f, adversary=theta_a),
        chash, round_counter=hist.rounds())
    rows = [(i, format(hist.mean_J[i], ".17g"),
             format(hist.grad_f_norm[i], ".17g"),
             format(hist.grad_a_norm[i], ".17g"),
             format(hist.mean_perturbation_norm[i], ".17g"))
            for i in range(hist.rounds())]
    _write_rows(os.path.join(args.out, "history.csv"),
                "round,mean_J,grad_f_norm,grad_a_norm,mean_perturbation_norm",
                rows, chash)
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise MissingInput(args.checkpoint)
    doc = game_mod.load_checkpoint(args.checkpoint)
    pipeline = _pipeline_from_checkpoint(cfg, doc)
    _, test, ood, _ = eval_mod._build_datasets(cfg, cfg["seed"])
    adv = data_mod.make_adversarial_testset(test, pipeline)
    rows = []
    for condition, ds in (("orig", test), ("adv", adv), ("ood", ood)):
        r = eval_mod.evaluate(pipeline, ds, cfg["lambdas"]["lambda_f"])
        rows.append(("checkpoint", condition, format(r.mean_J, ".17g"),
                     format(r.mean_forecast_mse, ".17g"),
                     format(r.mean_control_gap, ".17g"), len(r.per_sample_J)))
    _write_rows(os.path.join(args.out, "eval.csv"),
                "scheme,condition,mean_J,mean_forecast_mse,mean_control_gap,n",
                rows, config_hash(cfg))
    return 0


def cmd_verify_lne(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.checkpoint):
        raise MissingInput(args.checkpoint)
    doc = game_mod.load_checkpoint(args.checkpoint)
    pipeline = _pipeline_from_checkpoint(cfg, doc)
    train, _, _, _ = eval_mod._build_datasets(cfg, cfg["seed"])
    report = game_mod.verify_lne(pipeline, train,
                                 fd_step=cfg["lne"]["fd_step"],
                                 hessian=cfg["lne"]["hessian"])
    doc = report.to_json()
    keys = list(doc)
    with open(os.path.join(args.out, "lne.csv"), "w") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(str(doc[k]) for k in keys) + "\n")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    try:
        bundle = eval_mod.run_experiment(cfg)
    except AdvcastError:
        with open(os.path.join(args.out, "FAILED"), "w") as fh:
            fh.write("experiment failed before producing a full bundle\n")
        raise
    eval_mod.write_report(bundle, args.out)
    from . import figures
    figures.render_costs_figure(bundle, args.out)
    figures.render_history_figure(bundle, args.out)
    return 0


def cmd_report(args) -> int:
    if not os.path.exists(args.summary):
        raise MissingInput(args.summary)
    bundle = eval_mod.read_bundle(args.summary)
    if config_hash(bundle.config) != bundle.config_hash:
        raise ConfigInvalid("summary.json embedded config does not match its hash")
    if args.config is not None:
        cfg = load_config(args.config)
        if config_hash(cfg) != bundle.config_hash:
            raise ConfigInvalid("provided config does not match the summary hash")
    os.makedirs(args.out, exist_ok=True)
    eval_mod.write_report(bundle, args.out)
    from . import figures
    figures.render_costs_figure(bundle, args.out)
    figures.render_history_figure(bundle, args.out)
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-lne": cmd_verify_lne,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def run_command(argv) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except (ConfigInvalid, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AdvcastError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
