"""Command line entry point: train, sweep, ablate, flops, export-attn.

Every command writes a ``<command>.resolved.json`` snapshot into ``--out-dir``;
passing that file back through ``--config`` reproduces the outputs bit-exactly.
Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import flops as flops_mod
from .core import BudgetError, ConfigError, export_attention
from .tasks import TASKS, generate
from .toyvlm import load_checkpoint, patch_embed, save_checkpoint
from .training import TrainConfig, build_token_set, evaluate_sweep, train_two_stage

logger = logging.getLogger("mqt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_COLUMNS = ("budget", "task", "accuracy", "n_samples")
ABLATE_COLUMNS = ("variant", "token_set", "ordering", "elastic_in_stage1", "seeds",
                  "config_hash", "budget", "accuracy", "n_samples")


# -- io helpers -------------------------------------------------------------

def write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def config_hash(cfg):
    return hashlib.sha256(cfg.canonical_json().encode()).hexdigest()


def _check_finite(log):
    bad = [r.step for r in log if not np.isfinite(r.loss)]
    if bad:
        raise FloatingPointError(f"non-finite loss at step {bad[0]}")


def _snapshot(out_dir, command, options):
    write_atomic(os.path.join(out_dir, f"{command}.resolved.json"),
                 dump_json({"command": command, **options}))


def _options(args, command, defaults):
    """Merge a snapshot given via ``--config`` under explicit CLI flags."""
    opts = dict(defaults)
    if args.config:
        snap = read_json(args.config)
        if not isinstance(snap, dict) or snap.get("command") != command:
            raise ConfigError(f"{args.config} is not a {command} snapshot")
        unknown = sorted(set(snap) - set(defaults) - {"command"})
        if unknown:
            raise ConfigError(f"unknown {command} keys: {', '.join(unknown)}")
        opts.update({k: v for k, v in snap.items() if k != "command"})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def parse_budgets(spec, M):
    """``all``, ``paper-linear``, ``paper-log`` or a comma list; returned ascending."""
    if isinstance(spec, list):
        budgets = [int(b) for b in spec]
    elif spec == "all":
        budgets = list(range(1, M + 1))
    elif spec == "paper-linear":
        budgets = list(build_token_set("linear", M).budgets)
    elif spec == "paper-log":
        budgets = list(build_token_set("log", M).budgets)
    else:
        try:
            budgets = [int(b) for b in str(spec).split(",") if b.strip()]
        except ValueError as exc:
            raise ConfigError(f"cannot parse budgets {spec!r}") from exc
    if not budgets:
        raise ConfigError("no budgets given")
    for b in budgets:
        if not 1 <= b <= M:
            raise BudgetError(f"budget {b} outside [1, M={M}]")
    return sorted(set(budgets))


# -- training / evaluation shared by commands --------------------------------

def load_train_config(path_or_dict, seed=None):
    d = read_json(path_or_dict) if isinstance(path_or_dict, str) else dict(path_or_dict)
    if isinstance(d, dict) and "command" in d:
        raise ConfigError("expected a training config, got a command snapshot")
    if seed is not None:
        d = {**d, "seed": seed}
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def eval_set(spec, config):
    return generate(spec, config.eval_samples, seed=config.eval_seed)


def run_training(cfg, progress_every=200):
    def progress(rec):
        if rec.step % progress_every == 0:
            logger.info("step %d stage %d m=%s loss %.4f", rec.step, rec.stage, rec.budget,
                        rec.loss)
    model, log = train_two_stage(cfg, progress=progress)
    _check_finite(log)
    return model, log


# -- commands -------------------------------------------------------------------

def cmd_train(args):
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = load_train_config(args.config, args.seed)
    t0 = time.perf_counter()
    model, log = run_training(cfg)
    out = args.out_dir
    write_atomic(os.path.join(out, "train.resolved.json"), dump_json(cfg.to_dict()))
    write_atomic(os.path.join(out, "train_log.csv"), log.to_csv())
    save_checkpoint(model, os.path.join(out, "checkpoint"),
                    extra={"train_config": cfg.to_dict(), "config_hash": config_hash(cfg)})
    write_atomic(os.path.join(out, "result.json"), dump_json({
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "steps": len(log),
        "final_loss": log.records[-1].loss if len(log) else None,
        "cum_query_tokens": log.cum_query_tokens,
        "train_log": "train_log.csv",
        "checkpoint": "checkpoint",
    }))
    logger.info("trained in %.1fs", time.perf_counter() - t0)
    return EXIT_OK


def sweep_rows(model, cfg, budgets, tasks, n_samples, eval_seed):
    rows = []
    base = cfg.task_spec()
    for name in tasks:
        spec = dataclasses.replace(base, name=name)
        data = generate(spec, n_samples, seed=eval_seed)
        acc = evaluate_sweep(model, data, budgets)
        rows.extend((m, name, repr(acc[m]), n_samples) for m in budgets)
    # ascending budget, task order preserved within a budget
    return sorted(rows, key=lambda r: (r[0], tasks.index(r[1])))


def cmd_sweep(args):
    opts = _options(args, "sweep", {"checkpoint": None, "budgets": "paper-linear",
                                    "tasks": None, "n_samples": None, "eval_seed": None})
    if not opts["checkpoint"]:
        raise ConfigError("sweep needs --checkpoint")
    model, manifest = load_checkpoint(opts["checkpoint"])
    cfg = load_train_config(manifest["extra"]["train_config"])
    budgets = parse_budgets(opts["budgets"], model.M)
    tasks = opts["tasks"] or [cfg.task_spec().name]
    if isinstance(tasks, str):
        tasks = [t for t in tasks.split(",") if t]
    for t in tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r}; expected one of {TASKS}")
    n = opts["n_samples"] or cfg.eval_samples
    seed = opts["eval_seed"]
    if seed is None:
        seed = cfg.eval_seed if args.seed is None else args.seed
    rows = sweep_rows(model, cfg, budgets, tasks, n, seed)
    write_atomic(os.path.join(args.out_dir, "sweep.csv"), csv_text(SWEEP_COLUMNS, rows))
    _snapshot(args.out_dir, "sweep", {"checkpoint": os.path.abspath(opts["checkpoint"]),
                                      "budgets": budgets, "tasks": tasks,
                                      "n_samples": n, "eval_seed": seed})
    for r in rows:
        print(f"m={r[0]:>3} {r[1]:<16} acc={float(r[2]):.4f}")
    return EXIT_OK


SINGLE_CHANGES = (
    ("baseline", {}),
    ("log-token-set", {"token_set": "log"}),
    ("projection-then-attention", {"model": {"ordering": flops_mod.PROJ_THEN_ATTN}}),
    ("elastic-stage1", {"elastic_in_stage1": True}),
)


def ablation_variants(base, single_change=True):
    """``(name, TrainConfig)`` pairs.  Single-change: baseline plus one axis flipped
    at a time.  Otherwise the full {linear, log} x ordering x stage-1 matrix."""
    def make(token_set, ordering, elastic):
        d = base.to_dict()
        d["token_set"] = token_set
        d["model"] = {**d["model"], "ordering": ordering}
        d["elastic_in_stage1"] = elastic
        return TrainConfig.from_dict(d)

    b_ord = base.model_config().ordering
    b_ts = base.token_set
    if single_change:
        other_ord = (flops_mod.PROJ_THEN_ATTN if b_ord == flops_mod.ATTN_THEN_PROJ
                     else flops_mod.ATTN_THEN_PROJ)
        other_ts = "log" if b_ts != "log" else "linear"
        out = [("baseline", make(b_ts, b_ord, base.elastic_in_stage1)),
               (f"token-set={other_ts}", make(other_ts, b_ord, base.elastic_in_stage1)),
               (f"ordering={other_ord}", make(b_ts, other_ord, base.elastic_in_stage1)),
               (f"elastic-stage1={not base.elastic_in_stage1}",
                make(b_ts, b_ord, not base.elastic_in_stage1))]
    else:
        out, seen = [], set()
        for ts in ("linear", "log"):
            for ordering in (flops_mod.ATTN_THEN_PROJ, flops_mod.PROJ_THEN_ATTN):
                for el in (False, True):
                    cfg = make(ts, ordering, el)
                    key = cfg.canonical_json()
                    if key in seen:
                        continue
                    seen.add(key)
                    out.append((f"{ts}/{ordering}/elastic={el}", cfg))
    return out


def cmd_ablate(args):
    defaults = {"base": None, "single_change": None, "seeds": None}
    if not args.config:
        raise ConfigError("ablate needs --config with a base training config")
    raw = read_json(args.config)
    if isinstance(raw, dict) and "command" in raw:
        opts = _options(args, "ablate", defaults)
    else:
        # a plain training config is the base of the matrix
        opts = {**defaults, "base": raw}
        opts.update({k: getattr(args, k) for k in ("single_change", "seeds")
                     if getattr(args, k) is not None})
    base = load_train_config(opts["base"], args.seed)
    single = bool(opts["single_change"])
    k = int(opts["seeds"] or 1)
    if k < 1:
        raise ConfigError("--seeds must be >= 1")
    rows, resolved = [], {}
    for name, cfg in ablation_variants(base, single):
        M = cfg.model_config().max_tokens
        accs, n = [], cfg.eval_samples
        for i in range(k):
            run = cfg.replace(seed=base.seed + i)
            model, _ = run_training(run)
            data = eval_set(run.task_spec(), run)
            accs.append(evaluate_sweep(model, data, [M])[M])
            resolved[f"{name}/seed={run.seed}"] = run.to_dict()
        rows.append((name, cfg.token_set, cfg.model_config().ordering, cfg.elastic_in_stage1,
                     k, config_hash(cfg), M, repr(float(np.mean(accs))), n))
        logger.info("%s: acc@M %.4f", name, float(np.mean(accs)))
    write_atomic(os.path.join(args.out_dir, "ablation.csv"), csv_text(ABLATE_COLUMNS, rows))
    write_atomic(os.path.join(args.out_dir, "ablation.configs.json"), dump_json(resolved))
    _snapshot(args.out_dir, "ablate", {"base": base.to_dict(), "single_change": single,
                                       "seeds": k})
    return EXIT_OK


def cmd_flops(args):
    opts = _options(args, "flops", {"dims": "llava7b-like", "budgets": "16,144,256",
                                    "baseline": 576})
    try:
        dims = flops_mod.load_dims(opts["dims"])
    except (TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"dims: {exc}") from exc
    budgets = opts["budgets"]
    if isinstance(budgets, str):
        try:
            budgets = [int(b) for b in budgets.split(",") if b.strip()]
        except ValueError as exc:
            raise ConfigError(f"cannot parse budgets {budgets!r}") from exc
    if not budgets or min(budgets) < 1 or int(opts["baseline"]) < 1:
        raise ConfigError("budgets and baseline must be positive integers")
    result = flops_mod.sweep(dims, budgets, baseline=int(opts["baseline"]))
    T, calib = flops_mod.calibrate_text_length(baseline=int(opts["baseline"]))
    result["text_length_calibration"] = {"best_T": T, "rows": calib}
    table = flops_mod.format_table(result)
    write_atomic(os.path.join(args.out_dir, "flops.json"), dump_json(result))
    write_atomic(os.path.join(args.out_dir, "flops.txt"), table + "\n")
    _snapshot(args.out_dir, "flops", {"dims": dims.to_dict(), "budgets": list(budgets),
                                      "baseline": int(opts["baseline"])})
    print(table)
    return EXIT_OK


def cmd_export_attn(args):
    opts = _options(args, "export-attn", {"checkpoint": None, "budget": None, "index": None,
                                          "eval_seed": None})
    if not opts["checkpoint"]:
        raise ConfigError("export-attn needs --checkpoint")
    model, manifest = load_checkpoint(opts["checkpoint"])
    cfg = load_train_config(manifest["extra"]["train_config"])
    m = opts["budget"] or model.M
    if not 1 <= m <= model.M:
        raise BudgetError(f"budget {m} outside [1, M={model.M}]")
    index = opts["index"] or 0
    seed = opts["eval_seed"]
    if seed is None:
        seed = cfg.eval_seed if args.seed is None else args.seed
    sample = generate(cfg.task_spec(), 1, seed=seed, start=index)
    grid = patch_embed(sample.images, model.config.patch_size, model.embed)
    grid = dataclasses.replace(grid, features=ad.getitem(grid.features, 0))
    export_attention(grid, model.bank, m, model.qt,
                     path=os.path.join(args.out_dir, "attention.csv"))
    _snapshot(args.out_dir, "export-attn", {"checkpoint": os.path.abspath(opts["checkpoint"]),
                                            "budget": m, "index": index, "eval_seed": seed})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "export-attn": cmd_export_attn,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mqt", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=".", help="directory for all artifacts")
    p.add_argument("--config", default=None, help="JSON config or resolved snapshot")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="two-stage training from a JSON config")

    s = sub.add_parser("sweep", help="accuracy at each budget for a checkpoint")
    s.add_argument("--checkpoint", help="checkpoint path prefix (without .json/.bin)")
    s.add_argument("--budgets", help="all | paper-linear | paper-log | comma list")
    s.add_argument("--tasks", help="comma list of tasks (default: the training task)")
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--eval-seed", dest="eval_seed", type=int)

    a = sub.add_parser("ablate", help="token set x ordering x stage-1 matrix")
    a.add_argument("--single-change", dest="single_change", action="store_true", default=None,
                   help="baseline plus three one-axis variants")
    a.add_argument("--seeds", type=int, help="average accuracy over this many seeds")

    f = sub.add_parser("flops", help="analytic FLOPs and speed-up ratios")
    f.add_argument("--dims", help=f"preset ({', '.join(flops_mod.PRESETS)}) or JSON file")
    f.add_argument("--budgets", help="comma list of token budgets")
    f.add_argument("--baseline", type=int, help="baseline token count (default 576)")

    e = sub.add_parser("export-attn", help="head-averaged cross-attention weights as CSV")
    e.add_argument("--checkpoint")
    e.add_argument("--budget", type=int)
    e.add_argument("--index", type=int, help="sample index in the evaluation stream")
    e.add_argument("--eval-seed", dest="eval_seed", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        return COMMANDS[args.command](args)
    except (ConfigError, BudgetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RuntimeError, ArithmeticError, OSError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
