"""``ride-lab`` command line: train, route-train, eval, biasvar, distill, report.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import plotting, reports
from .config import RunConfig, load_config, method_config, to_dict, write_resolved
from .data import CapacityError, FormatError, ProfileError, save_profile, shot_split
from .distill import distill_train
from .experts import ConfigError, load_checkpoint, save_checkpoint
from .netcore import NumericError
from .router import (
    CostModel,
    cascade_infer,
    expected_cost,
    init_router,
    load_router,
    save_router,
    train_router,
    usage_histogram,
)
from .study import biasvar_experiment, build_from_spec, prepare_task
from .training import evaluate, split_accuracy, train_stage1

log = logging.getLogger("ride_lab")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    return load_config(args.config, seed=args.seed, out=args.out)


def _train_model(cfg: RunConfig, task, spec, out: Path, prefix: str = "", extra_train=None):
    model = build_from_spec(spec, task.train.features.shape[1], task.train.n_classes, cfg.seed)
    rows = []
    if extra_train is None:
        rows = train_stage1(model, task.train, cfg.loss, cfg.temperature, cfg.train, cfg.seed,
                            on_epoch=lambda r: log.info("epoch %(epoch)d loss %(loss).4f", r))
    else:
        rows = extra_train(model)
    reports.write_csv(rows, out / f"{prefix}metrics.csv", "metrics")
    return model


def _write_eval(model, task, out: Path, name: str, n_active=None) -> dict:
    ev = evaluate(model, task.test, task.profile, n_active)
    doc = {
        "accuracy": ev["accuracy"],
        "hardest_negative": ev["hardest_negative"],
        "n_experts_active": n_active or model.n_experts,
    }
    reports.write_json(doc, out / f"{name}.json")
    reports.write_csv(reports.hist_rows(ev["hardest_negative_hist"]), out / f"hardest_negative_{name}.csv",
                      "hardest_negative_hist")
    return doc


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    write_resolved(cfg, out / "resolved_config.json")
    task = prepare_task(cfg.data)
    save_profile(task.profile, out / "profile.json", seed=cfg.data.seed)
    model = _train_model(cfg, task, cfg.model, out)
    save_checkpoint(model, out / "model.json", {"config": to_dict(cfg)})
    doc = _write_eval(model, task, out, "eval")
    print(f"accuracy {doc['accuracy']}")
    return 0


def cmd_route_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    write_resolved(cfg, out / "resolved_config.json")
    ckpt = Path(args.checkpoint or out / "model.json")
    if not ckpt.exists():
        raise ConfigError(f"missing Stage-1 checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    if model.n_experts < 2:
        raise ConfigError("routing needs at least two experts; this checkpoint has one")
    task = prepare_task(cfg.data)
    rc = cfg.router
    params = init_router(model.feature_dim, model.n_experts, model.n_classes, rc.hidden, rc.top_s,
                         rc.omega_on, cfg.seed)
    params.threshold = rc.threshold
    train_router(model, task.train.features, task.train.labels, params, rc.epochs, rc.lr, rc.batch_size,
                 cfg.seed, rc.label_rule)
    save_router(params, out / "router.json")
    report = _cost_report(model, params, task, out, args.threshold)
    print(f"mean experts used {report['mean_experts_used']:.3f}, relative cost {report['relative_cost']:.3f}")
    return 0


def _cost_report(model, params, task, out: Path, threshold=None) -> dict:
    thr = params.threshold if threshold is None else threshold
    trace = cascade_infer(model, params, task.test.features, thr)
    cm = CostModel.for_model(model, params)
    mean_macs, ratio = expected_cost(trace, cm)
    full = float(cm.cost(model.n_experts)) / cm.baseline_macs
    full_pred = evaluate(model, task.test, task.profile)["accuracy"]
    report = {
        "threshold": thr,
        "mean_experts_used": float(trace.experts_used.mean()),
        "mean_macs": mean_macs,
        "relative_cost": ratio,
        "full_ensemble_relative_cost": full,
        "baseline_macs": cm.baseline_macs,
        "accuracy_cascade": split_accuracy(trace.predictions, task.test.labels, task.profile),
        "accuracy_full_ensemble": full_pred,
    }
    reports.write_json(report, out / "cost_report.json")
    hist = usage_histogram(trace.experts_used, task.test.labels, shot_split(task.profile), model.n_experts)
    reports.write_csv(hist, out / "routing_hist.csv", "routing_hist")
    return report


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    model = load_checkpoint(args.checkpoint)
    task = prepare_task(cfg.data)
    if task.test.n_classes != model.n_classes or task.test.features.shape[1] != model.meta["d_in"]:
        raise FormatError("checkpoint and dataset disagree on class count or input dim")
    if args.experts is not None and not 1 <= args.experts <= model.n_experts:
        raise ConfigError(f"--experts must lie in 1..{model.n_experts}")
    doc = _write_eval(model, task, out, "eval", args.experts)
    if args.router:
        params = load_router(args.router)
        doc["routing"] = _cost_report(model, params, task, out, args.threshold)
    print(f"accuracy {doc['accuracy']}")
    return 0


def cmd_biasvar(args) -> int:
    cfg = _load(args)
    if cfg.biasvar.n_reps < 2:
        raise ConfigError("biasvar.n_reps must be >= 2 (variance is undefined for one model)")
    out = _out_dir(cfg)
    write_resolved(cfg, out / "resolved_config.json")
    task = prepare_task(cfg.data)
    methods = cfg.biasvar.methods
    if not methods:
        from .config import MethodSpec

        methods = (MethodSpec("run"),)
    for method in methods:
        spec, loss = method_config(cfg, method)
        report, hn = biasvar_experiment(spec, loss, cfg.temperature, cfg.train, task.pool, task.test, task.profile,
                                        cfg.biasvar.n_reps, cfg.seed, args.jobs)
        reports.write_csv(report.rows(), out / f"biasvar_{method.name}.csv", "biasvar")
        reports.write_json({"method": method.name, **report.summary}, out / f"biasvar_{method.name}.json")
        reports.write_csv(reports.hist_rows({k: v["histogram"] for k, v in hn.items()}),
                          out / f"hardest_negative_{method.name}.csv", "hardest_negative_hist")
        s = report.summary
        print(f"{method.name}: bias {s['bias']['all']:.3f} (few {s['bias']['few']:.3f}), "
              f"variance {s['variance']['all']:.3f} (few {s['variance']['few']:.3f})")
    return 0


def cmd_distill(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    write_resolved(cfg, out / "resolved_config.json")
    task = prepare_task(cfg.data)
    if cfg.distill.teacher:
        teacher = load_checkpoint(cfg.distill.teacher)
    else:
        from dataclasses import replace

        tspec = replace(cfg.model, n_experts=cfg.distill.teacher_experts)
        teacher = _train_model(cfg, task, tspec, out, prefix="teacher_")
        save_checkpoint(teacher, out / "teacher.json")
    if teacher.n_classes != task.train.n_classes:
        raise ConfigError("teacher checkpoint does not match the dataset's class count")

    def run(student):
        return distill_train(teacher, student, task.train, cfg.loss, cfg.temperature, cfg.train,
                             cfg.distill_config(), cfg.seed)

    student = _train_model(cfg, task, cfg.model, out, extra_train=run)
    save_checkpoint(student, out / "model.json", {"config": to_dict(cfg)})
    doc = _write_eval(student, task, out, "eval")
    _write_eval(teacher, task, out, "teacher_eval")
    print(f"student accuracy {doc['accuracy']}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.out or ".")
    made = plotting.render_directory(run_dir)
    for p in made:
        print(p)
    if not made:
        print(f"no report inputs found in {run_dir}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ride-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
            sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="Stage 1: jointly train backbone and experts")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("route-train", help="Stage 2: train routers on a frozen checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="Stage-1 checkpoint (default <out>/model.json)")
    sp.add_argument("--threshold", type=float, help="override the switch-on threshold for the cost report")
    sp.set_defaults(fn=cmd_route_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--experts", type=int, help="use only the first N experts")
    sp.add_argument("--router", help="router checkpoint; adds cascade cost/accuracy")
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("biasvar", help="replicate trainings and 0-1 bias/variance per class")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for replicate training")
    sp.set_defaults(fn=cmd_biasvar)

    sp = sub.add_parser("distill", help="distill a many-expert teacher into the configured model")
    common(sp)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("report", help="render figures from the CSV reports in a run directory")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, CapacityError, ProfileError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure at batch {exc.batch_index}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
