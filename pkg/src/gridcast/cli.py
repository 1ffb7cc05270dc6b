"""Command-line pipeline: generate data, pre-train, tune, evaluate, predict.

Every command takes a YAML config (--config), is deterministic given
(config, seed), and writes its artifacts under the config's out_dir.  A
command refuses to overwrite existing artifacts unless --force is given.
Failures exit nonzero with a single-line error on stderr.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .config import load_config
from .data import (
    channel_split,
    gen_synthetic,
    load_dataset,
    make_windows,
    prepare_dataset,
    save_dataset,
    GridSeries,
)
from .errors import ConfigError, DataError, GridcastError
from .evaluation import (
    EvalReport,
    evaluate_dataset,
    forecast,
    predict,
    run_protocol,
)
from .training import (
    load_checkpoint,
    pretrain,
    prompt_tune,
    save_checkpoint,
    write_log,
)

_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _resolve_series(spec):
    """Materialize one dataset entry: load the container or synthesize."""
    if spec.path is not None:
        if not os.path.exists(spec.path):
            raise DataError(f"dataset file not found: {spec.path}")
        return load_dataset(spec.path, name=spec.name)
    return gen_synthetic(spec.family, spec.shape, spec.seed,
                         steps_per_day=spec.steps_per_day, name=spec.label,
                         **spec.params)


def _bundles(cfg, roles):
    specs = [d for d in cfg.data.datasets if d.role in roles]
    if not specs:
        raise ConfigError(f"config lists no datasets with role in {sorted(roles)}")
    out = []
    for spec in specs:
        series = _resolve_series(spec)
        out.extend(prepare_dataset(series, cfg.data.l_h, cfg.data.k))
    return out


def _out_path(cfg, rel, force):
    path = os.path.join(cfg.out_dir, rel)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    return path


def _load_ckpt_arg(cfg, args):
    path = args.checkpoint
    if path is None:
        for candidate in ("finetune.ckpt", "pretrain.ckpt"):
            p = os.path.join(cfg.out_dir, candidate)
            if os.path.exists(p):
                path = p
                break
    if path is None:
        raise ConfigError(
            f"no checkpoint given and none found under {cfg.out_dir}")
    return load_checkpoint(path)


def _apply_overrides(cfg, args):
    import dataclasses
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _train_cfg(cfg, args):
    tc = cfg.train_config()
    import dataclasses
    if getattr(args, "max_steps", None) is not None:
        tc = dataclasses.replace(tc, max_steps=args.max_steps)
    return tc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(cfg, args):
    specs = [d for d in cfg.data.datasets if d.family is not None]
    if not specs:
        raise ConfigError("config lists no synthetic datasets to generate")
    for spec in specs:
        series = _resolve_series(spec)
        path = _out_path(cfg, os.path.join("data", f"{spec.label}.gsr"), args.force)
        save_dataset(series, path)
        print(f"wrote {path} shape={series.shape}")
    return 0


def cmd_pretrain(cfg, args):
    bundles = _bundles(cfg, {"pretrain"})
    result = pretrain(bundles, cfg.model, _train_cfg(cfg, args))
    ckpt_path = _out_path(cfg, "pretrain.ckpt", args.force)
    log_path = _out_path(cfg, "pretrain_log.csv", args.force)
    save_checkpoint(result.checkpoint, ckpt_path)
    write_log(result.records, log_path)
    print(f"wrote {ckpt_path} (best val {result.best_val:.6g}) and {log_path}")
    return 0


def cmd_finetune(cfg, args):
    ckpt = _load_ckpt_arg(cfg, args)
    bundles = _bundles(cfg, {"finetune"})
    fraction = args.fraction if args.fraction is not None else cfg.train.fraction
    result = prompt_tune(bundles, ckpt, _train_cfg(cfg, args), fraction=fraction)
    ckpt_path = _out_path(cfg, "finetune.ckpt", args.force)
    log_path = _out_path(cfg, "finetune_log.csv", args.force)
    save_checkpoint(result.checkpoint, ckpt_path)
    write_log(result.records, log_path)
    print(f"wrote {ckpt_path} (best val {result.best_val:.6g}) and {log_path}")
    return 0


def _eval_one_protocol(cfg, ckpt, protocol):
    if protocol == "zero_shot":
        bundles = _bundles(cfg, {"zero_shot_target"})
        return run_protocol(ckpt, bundles, cfg.data.l_h, cfg.data.k,
                            cfg.data.n_period_days, protocol="zero_shot",
                            zero_shot=True, baselines=cfg.eval.baselines)
    if protocol == "few_shot":
        bundles = _bundles(cfg, {"zero_shot_target", "finetune"})
        return run_protocol(ckpt, bundles, cfg.data.l_h, cfg.data.k,
                            cfg.data.n_period_days, protocol="few_shot",
                            baselines=cfg.eval.baselines)
    if protocol == "long":
        bundles = _bundles(cfg, {"pretrain", "finetune"})
        return run_protocol(ckpt, bundles, cfg.eval.l_h_long, cfg.eval.k_long,
                            cfg.data.n_period_days, protocol="long",
                            baselines=cfg.eval.baselines)
    bundles = _bundles(cfg, {"pretrain", "finetune"})
    return run_protocol(ckpt, bundles, cfg.data.l_h, cfg.data.k,
                        cfg.data.n_period_days, protocol="short",
                        baselines=cfg.eval.baselines)


def cmd_evaluate(cfg, args):
    ckpt = _load_ckpt_arg(cfg, args)
    if args.noise:
        bundles = _bundles(cfg, {"pretrain", "finetune"})
        model = ckpt.build_model()
        for i, level in enumerate((0.0,) + cfg.eval.noise_levels):
            report = EvalReport([])
            for b in bundles:
                report.extend(evaluate_dataset(
                    ckpt, b, cfg.data.l_h, cfg.data.k, cfg.data.n_period_days,
                    protocol="short", baselines=False, noise_level=level,
                    noise_seed=cfg.seed + 1000 * i, model=model))
            path = _out_path(cfg, f"eval_noise_{level:g}.csv", args.force)
            report.to_csv(path)
            print(f"wrote {path}")
        return 0
    protocols = (args.protocol,) if args.protocol else cfg.eval.protocols
    for protocol in protocols:
        report = _eval_one_protocol(cfg, ckpt, protocol)
        path = _out_path(cfg, f"eval_{protocol}.csv", args.force)
        report.to_csv(path)
        report.to_jsonl(_out_path(cfg, f"eval_{protocol}.jsonl", args.force))
        row = min((r for r in report.rows if r.predictor == "model"
                   and r.step == "all"), key=lambda r: r.dataset)
        print(f"wrote {path} (model rmse on {row.dataset}: {row.rmse:.6g})")
    return 0


def cmd_predict(cfg, args):
    ckpt = _load_ckpt_arg(cfg, args)
    series = load_dataset(args.window_file)
    if series.shape[1] != 1:
        raise DataError(
            f"{args.window_file}: prediction expects a single-channel series; "
            "split channels first")
    l_h = int(ckpt.trained["l_h"])
    k = args.k if args.k is not None else int(ckpt.trained["k"])
    T = series.shape[0]
    if T < l_h:
        raise DataError(
            f"{args.window_file}: needs at least l_h={l_h} frames, got {T}")
    history = series.values[T - l_h:, 0]
    period = None
    n_days = int(ckpt.trained.get("n_period_days", 0))
    spd = series.steps_per_day
    t0 = T - l_h
    if n_days > 0 and t0 >= n_days * spd:
        period = np.stack([series.values[t0 - j * spd:t0 - j * spd + l_h, 0]
                           for j in range(1, n_days + 1)])[None]
    bounds = ckpt.norm_bounds.get(series.name)
    pred = predict(ckpt, history, k, period=period, bounds=bounds)
    out_series = GridSeries(
        name=f"{series.name}/forecast",
        values=np.asarray(pred)[:, None],
        steps_per_day=spd,
        start_index=series.time_of_day(T),
    )
    path = args.out or os.path.join(cfg.out_dir, "forecast.gsr")
    if os.path.exists(path) and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_dataset(out_series, path, extra={
        "format_version": _FORMAT_VERSION,
        "units": "original",
        "kind": "forecast",
        "bounds_source": "checkpoint" if bounds is not None else "history",
    })
    print(f"wrote {path} shape={out_series.shape}")
    return 0


def cmd_analyze_prompts(cfg, args):
    ckpt = _load_ckpt_arg(cfg, args)
    model = ckpt.build_model()
    if not model.prompts.enabled:
        raise ConfigError("checkpoint has no prompt components enabled")
    bundles = _bundles(cfg, set(("pretrain", "finetune", "zero_shot_target")))
    rows = []
    for b in bundles:
        wins = list(make_windows(b.test, cfg.data.l_h, cfg.data.k,
                                 n_period_days=cfg.data.n_period_days,
                                 stride=cfg.data.l_h + cfg.data.k))
        if not wins:
            raise ConfigError(
                f"{b.name}: test split too short to analyze prompts")
        history = np.stack([w.history for w in wins])
        period, ctx_mask = None, None
        if cfg.data.n_period_days > 0:
            l_h, H, W = history.shape[1:]
            period = np.zeros((len(wins), cfg.data.n_period_days, l_h, H, W))
            ctx_mask = np.zeros(len(wins), dtype=bool)
            for i, w in enumerate(wins):
                if w.period_context is not None:
                    period[i] = w.period_context
                    ctx_mask[i] = True
        forecast(model, history, cfg.data.k, period, ctx_mask, use_prompts=True)
        pset = model.last_prompt_set()
        if args.per_component:
            # family differences often concentrate in one component; the
            # averaged row can hide a separation the per-component rows show
            for n in pset.names:
                w = pset.weights[n].mean(axis=0)
                rows.append((b.name, n, w / w.sum()))
        else:
            mean_w = np.mean([pset.weights[n].mean(axis=0)
                              for n in pset.names], axis=0)
            rows.append((b.name, None, mean_w / mean_w.sum()))
    path = _out_path(cfg, "prompt_weights.csv", args.force)
    n_pool = len(rows[0][2])
    head = ["dataset"] + (["component"] if args.per_component else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(head + [f"w{i}" for i in range(n_pool)])
        for name, comp, w in rows:
            lead = [name] + ([comp] if args.per_component else [])
            writer.writerow(lead + [f"{x:.10g}" for x in w])
    print(f"wrote {path} ({len(rows)} rows, pool size {n_pool})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="gridcast",
        description="Universal grid-series forecasting: pre-train once, "
                    "prompt-tune anywhere.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_args):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing artifacts")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        for flag, kv in extra_args.items():
            p.add_argument(flag, **kv)
        p.set_defaults(fn=fn)
        return p

    add("generate-data", cmd_generate_data)
    add("pretrain", cmd_pretrain,
        **{"--max-steps": dict(type=int, default=None, dest="max_steps")})
    add("finetune", cmd_finetune,
        **{"--max-steps": dict(type=int, default=None, dest="max_steps"),
           "--fraction": dict(type=float, default=None),
           "--checkpoint": dict(default=None)})
    add("evaluate", cmd_evaluate,
        **{"--checkpoint": dict(default=None),
           "--protocol": dict(default=None),
           "--noise": dict(action="store_true",
                           help="noise-robustness suite, one report per level")})
    add("predict", cmd_predict,
        **{"--checkpoint": dict(default=None),
           "--window-file": dict(required=True, dest="window_file"),
           "--out": dict(default=None),
           "--k": dict(type=int, default=None)})
    add("analyze-prompts", cmd_analyze_prompts,
        **{"--checkpoint": dict(default=None),
           "--per-component": dict(action="store_true", dest="per_component",
                                   help="one row per dataset and knowledge "
                                        "component instead of the average")})
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return args.fn(cfg, args)
    except GridcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
