"""Command-line entry point: ``vrcoloc <subcommand> [options]``.

Every option can also come from a JSON config file passed with ``--config``;
a flag given on the command line beats the file, which beats the built-in
default. Output files record the resolved configuration, seeds included.

Exit status:
  0  success
  2  usage or configuration error
  3  unreadable or invalid input file
  4  supervision leak (test predicates in training data)
  5  non-finite training loss
  6  exhaustive search refused (space above the cap)
  7  metric undefined (no images or bags to score)
  8  gradient check failed
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import errors
from .datamodel import load_bags, load_manifest, make_bags, save_bags, save_manifest
from .embedder import PretrainConfig, pretrain
from .metrics import evaluate, format_summary
from .pipeline import (MODES, default_workers, infer_bags, load_predictions, save_predictions,
                       save_report, validate_bags)
from .similarity import embedder_grad_check, grad_check
from .solver import InferenceConfig
from .synthgen import SynthConfig, generate, separability_report
from .trainer import (TrainConfig, initial_checkpoint, load_checkpoint, save_checkpoint,
                      train)

EXIT_USAGE, EXIT_INPUT, EXIT_LEAK, EXIT_NONFINITE = 2, 3, 4, 5
EXIT_SEARCH, EXIT_METRIC, EXIT_GRADCHECK = 6, 7, 8


class UsageError(Exception):
    pass


# Each option: (flag, type, default, help). A type of ``bool`` makes a switch;
# ``"no-bool"`` makes a switch that turns a default-on setting off.
OPTIONS = {
    "synth": [
        ("--out", str, None, "manifest file to write"),
        ("--n-train", int, 20, "training predicates"),
        ("--n-test", int, 5, "test predicates"),
        ("--images", int, 600, "number of images"),
        ("--regions", int, 20, "regions per image"),
        ("--d-a", int, 16, "appearance dimension"),
        ("--d-c", int, 8, "class-score dimension"),
        ("--mu", float, 4.0, "predicate vector norm"),
        ("--sigma", float, 0.5, "expected noise norm"),
        ("--annotations", int, 2, "annotated relationships per image"),
        ("--seed", int, 0, "generator seed"),
        ("--hard-mode", bool, False, "add misleading distractor pairs"),
        ("--distractors", int, 2, "distractor pairs per image in hard mode"),
        ("--role-cue", float, 4.0, "extra Dirichlet mass on the agent class of subjects"),
    ],
    "bags": [
        ("--manifest", str, None, "manifest file"),
        ("--split", str, "train", "train or test"),
        ("--size", int, 4, "images per bag"),
        ("--count", int, 500, "number of bags"),
        ("--seed", int, 0, "sampling seed"),
        ("--out", str, None, "bag file to write"),
    ],
    "pretrain": [
        ("--manifest", str, None, "manifest file"),
        ("--out", str, None, "checkpoint file to write"),
        ("--d-r", int, 64, "embedding width"),
        ("--shared", bool, False, "one projection for subject and object"),
        ("--steps", int, 300, "optimizer steps"),
        ("--lr", float, 1e-2, "learning rate"),
        ("--batch-size", int, 256, "minibatch size"),
        ("--seed", int, 0, "initialization and batching seed"),
    ],
    "train": [
        ("--manifest", str, None, "manifest file"),
        ("--bags", str, None, "training bag file"),
        ("--init", str, None, "starting checkpoint (pretrained or partially trained)"),
        ("--out", str, None, "checkpoint file to write"),
        ("--embed", str, "translation", "embedding when no --init is given: translation or concat"),
        ("--d-r", int, 64, "embedding width when no --init is given"),
        ("--episodes", int, 1000, "episodes to run"),
        ("--lr", float, 1e-3, "learning rate"),
        ("--beta1", float, 0.9, "first moment decay"),
        ("--beta2", float, 0.999, "second moment decay"),
        ("--eps", float, 1e-8, "optimizer epsilon"),
        ("--neg-ratio", float, 3.0, "negatives kept per positive"),
        ("--distractors", int, 8, "unannotated region pairs per image used as negatives"),
        ("--no-rotate", "no-bool", True, "disable per-episode appearance rotation"),
        ("--finetune", bool, False, "also update the embedder"),
        ("--seed", int, 0, "episode order and sampling seed"),
        ("--log", str, None, "line-delimited training log"),
    ],
    "infer": [
        ("--manifest", str, None, "manifest file"),
        ("--bags", str, None, "bag file"),
        ("--checkpoint", str, None, "trained checkpoint"),
        ("--mode", str, "free", "free, subject_fixed or one_annotated"),
        ("--out", str, None, "predictions file to write"),
        ("--scorer", str, "relnet-sym", "relnet-sym, relnet-raw or cosine"),
        ("--restarts", int, 4, "greedy restarts"),
        ("--pool-size", int, None, "keep this many labels per image (off when unset)"),
        ("--pool-sample", int, 64, "labels sampled to rank pools"),
        ("--seed", int, 0, "restart and pool seed"),
        ("--exact", bool, False, "exhaustive search instead of greedy (free mode)"),
        ("--brute-force-cap", int, 10 ** 6, "largest labeling space to enumerate"),
        ("--workers", int, None, "worker processes (default from VRCOLOC_WORKERS)"),
    ],
    "eval": [
        ("--predictions", str, None, "predictions file"),
        ("--manifest", str, None, "manifest file"),
        ("--bags", str, None, "bag file"),
        ("--out", str, None, "report file to write"),
    ],
    "gradcheck": [
        ("--seeds", int, 10, "check seeds 0 .. N-1"),
        ("--d-r", str, "4,16,64", "comma-separated widths"),
        ("--tol", float, 1e-4, "largest accepted relative error"),
        ("--out", str, None, "optional JSON report"),
    ],
}

REQUIRED = {
    "synth": ["out"], "bags": ["manifest", "out"], "pretrain": ["manifest", "out"],
    "train": ["manifest", "bags", "out"], "infer": ["manifest", "bags", "checkpoint", "out"],
    "eval": ["predictions", "manifest", "bags"], "gradcheck": [],
}


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def _option_dest(flag, kind):
    return _dest(flag)[3:] if kind == "no-bool" else _dest(flag)


def build_parser():
    parser = argparse.ArgumentParser(prog="vrcoloc", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option values")
        for flag, kind, default, text in options:
            dest = _option_dest(flag, kind)
            help_text = f"{text} (default: {default})"
            if kind is bool:
                p.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS,
                               help=help_text)
            elif kind == "no-bool":
                p.add_argument(flag, dest=dest, action="store_false", default=argparse.SUPPRESS,
                               help=text)
            else:
                p.add_argument(flag, dest=dest, type=kind, default=argparse.SUPPRESS,
                               help=help_text)
    return parser


def resolve(command, flags):
    """Merge defaults, the config file and command-line flags, in that order."""
    known = {_option_dest(f, k): (k, d) for f, k, d, _ in OPTIONS[command]}
    values = {dest: default for dest, (_, default) in known.items()}
    path = flags.pop("config", None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in from_file.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise UsageError(f"unknown option {key!r} in config file")
            kind, _ = known[dest]
            if kind in (bool, "no-bool"):
                if not isinstance(value, bool):
                    raise UsageError(f"config option {key!r} must be true or false")
            elif value is not None:
                try:
                    value = kind(value)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"config option {key!r}: {exc}") from exc
            values[dest] = value
    values.update(flags)
    missing = [k for k in REQUIRED[command] if values.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + k.replace("_", "-") for k in missing))
    return values


def _say(text):
    print(text, flush=True)


def cmd_synth(o):
    config = SynthConfig(o["n_train"], o["n_test"], o["images"], o["regions"], o["d_a"],
                         o["d_c"], o["mu"], o["sigma"], o["annotations"], o["seed"],
                         o["hard_mode"], o["distractors"], o["role_cue"])
    manifest = generate(config)
    save_manifest(manifest, o["out"])
    report = separability_report(manifest)
    _say(f"wrote {len(manifest.images)} images to {o['out']} "
         f"(across/within distance ratio {report['ratio']:.2f})")


def cmd_bags(o):
    if o["split"] not in ("train", "test"):
        raise UsageError("--split must be train or test")
    manifest = load_manifest(o["manifest"])
    bags = make_bags(manifest, o["split"], o["size"], o["count"], o["seed"])
    save_bags(bags, o["out"], {"split": o["split"], "size": o["size"], "count": o["count"],
                               "seed": o["seed"]})
    _say(f"wrote {len(bags)} {o['split']} bags of size {o['size']} to {o['out']}")


def cmd_pretrain(o):
    manifest = load_manifest(o["manifest"])
    config = PretrainConfig(o["d_r"], o["shared"], o["steps"], o["lr"], o["batch_size"], o["seed"])
    params, _, history = pretrain(manifest, config)
    ckpt = initial_checkpoint(manifest.d_x, embedder=params, seed=o["seed"])
    ckpt.pretrain_history = history
    ckpt.meta = {"pretrain_config": asdict(config)}
    save_checkpoint(ckpt, o["out"])
    first, last = (history[0], history[-1]) if history else (float("nan"),) * 2
    _say(f"pretrained {config.steps} steps, loss {first:.4f} -> {last:.4f}; wrote {o['out']}")


def cmd_train(o):
    manifest = load_manifest(o["manifest"])
    bags, _ = load_bags(o["bags"])
    validate_bags(manifest, bags)
    if o["init"] is not None:
        init = load_checkpoint(o["init"])
        if init.d_x != manifest.d_x:
            raise errors.ValidationError(
                f"checkpoint feature width {init.d_x} does not match manifest width {manifest.d_x}")
    else:
        if o["embed"] not in ("translation", "concat"):
            raise UsageError("--embed must be translation or concat")
        init = initial_checkpoint(manifest.d_x, o["d_r"], o["embed"], seed=o["seed"],
                                  n_classes=len(manifest.train_predicates))
    config = TrainConfig(o["lr"], o["beta1"], o["beta2"], o["eps"], o["episodes"],
                         o["neg_ratio"], o["seed"], not o["finetune"], o["distractors"],
                         o["rotate"])
    log_fh = open(o["log"], "a", encoding="utf-8") if o["log"] else None
    try:
        def log(entry):
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        ckpt = train(manifest, bags, config, init, log if log_fh else None)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(ckpt, o["out"])
    losses = [x for x in ckpt.loss_history[init.step:] if x is not None]
    skipped = ckpt.step - init.step - len(losses)
    tail = f", mean loss of last 50 {np.mean(losses[-50:]):.4f}" if losses else ""
    _say(f"trained episodes {init.step}..{ckpt.step} ({skipped} skipped){tail}; wrote {o['out']}")


def cmd_infer(o):
    if o["mode"] not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    if o["exact"] and o["mode"] != "free":
        raise UsageError("--exact applies to free mode only")
    manifest = load_manifest(o["manifest"])
    bags, _ = load_bags(o["bags"])
    validate_bags(manifest, bags)
    ckpt = load_checkpoint(o["checkpoint"])
    config = InferenceConfig(o["scorer"], o["restarts"], o["pool_size"], o["pool_sample"],
                             o["seed"], o["brute_force_cap"])
    workers = o["workers"] if o["workers"] is not None else default_workers()
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    t0 = time.perf_counter()
    preds = infer_bags(manifest, bags, ckpt, o["mode"], config, o["exact"], workers)
    save_predictions(preds, o["out"], config, {"mode": o["mode"], "exact": o["exact"],
                                               "checkpoint_step": ckpt.step})
    skipped = sum(1 for p in preds if p.get("skipped"))
    _say(f"inferred {len(preds)} bags ({skipped} skipped) in {time.perf_counter() - t0:.1f}s; "
         f"wrote {o['out']}")


def cmd_eval(o):
    manifest = load_manifest(o["manifest"])
    bags, _ = load_bags(o["bags"])
    preds, body = load_predictions(o["predictions"])
    for p in preds:
        if not (0 <= p.get("bag", -1) < len(bags)):
            raise errors.ValidationError(f"prediction refers to bag {p.get('bag')!r}, "
                                         f"bag file has {len(bags)}")
    report = evaluate(preds, manifest, bags)
    if o["out"]:
        save_report(report, o["out"], {"inference_config": body.get("config", {}),
                                       "inference_meta": body.get("meta", {})})
    _say(format_summary(report))


def _widths(text):
    try:
        widths = [int(w) for w in str(text).split(",") if w.strip()]
    except ValueError as exc:
        raise UsageError(f"--d-r: {exc}") from exc
    if not widths or min(widths) < 1:
        raise UsageError("--d-r needs positive widths")
    return widths


def run_gradcheck(seeds, widths):
    """Worst relative error per parameter group over all seeds and widths."""
    worst = {}
    for seed in range(seeds):
        for d_r in widths:
            checks = [grad_check(seed, d_r)]
            checks.append(embedder_grad_check(seed, d_r, shared=False))
            checks.append({k + " (shared)": v for k, v in
                           embedder_grad_check(seed, d_r, shared=True).items()})
            for check in checks:
                for group, err in check.items():
                    worst[group] = max(worst.get(group, 0.0), err)
    return worst


def cmd_gradcheck(o):
    widths = _widths(o["d_r"])
    if o["seeds"] < 1:
        raise UsageError("--seeds must be at least 1")
    worst = run_gradcheck(o["seeds"], widths)
    ok = all(err < o["tol"] for err in worst.values())
    for group in sorted(worst):
        flag = "ok" if worst[group] < o["tol"] else "FAIL"
        _say(f"{group:<26} {worst[group]:.3e}  {flag}")
    if o["out"]:
        from . import records
        records.write_record(o["out"], "vrcoloc.gradcheck", 1,
                             {"seeds": o["seeds"], "d_r": widths, "tol": o["tol"],
                              "max_relative_error": worst, "passed": ok})
    return 0 if ok else EXIT_GRADCHECK


COMMANDS = {"synth": cmd_synth, "bags": cmd_bags, "pretrain": cmd_pretrain,
            "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(args)
    command = flags.pop("command")
    try:
        options = resolve(command, flags)
        return COMMANDS[command](options) or 0
    except UsageError as exc:
        print(f"vrcoloc {command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except errors.ConfigurationError as exc:
        print(f"vrcoloc {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except errors.SupervisionLeakError as exc:
        print(f"vrcoloc {command}: supervision leak: {exc}", file=sys.stderr)
        return EXIT_LEAK
    except errors.NonFiniteLossError as exc:
        print(f"vrcoloc {command}: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except errors.SearchSpaceTooLarge as exc:
        print(f"vrcoloc {command}: exhaustive search refused: {exc}", file=sys.stderr)
        return EXIT_SEARCH
    except errors.UndefinedMetricError as exc:
        print(f"vrcoloc {command}: metric undefined: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (errors.ParseError, errors.ValidationError, errors.EvaluationDataError,
            errors.DegenerateImageError, OSError) as exc:
        print(f"vrcoloc {command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
