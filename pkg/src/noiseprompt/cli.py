"""Command-line interface for the full workflow.

Subcommands: collect, train, infer, eval, verify-theorem, inspect-npd.
Option precedence is flags > --config JSON file > built-in defaults, the
fully resolved configuration is printed as one JSON line (and embedded
in artifacts that have room for it), and identical resolved configs
always produce byte-identical artifacts.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric
error, 4 I/O or file-format error.  Failures print a single JSON line
to stderr: {"error": <class>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluate as evalmod
from . import npd as npdmod
from . import npnet as netmod
from . import theory as theorymod
from .errors import NpdFormatError, NumericError
from .preference import SelectionRule
from .rng import derive_stream, gaussian, uniform
from .sampler import GuidanceConfig
from .schedule import DEFAULT_BIG_T, DEFAULT_THETA_MAX, NoiseSchedule
from .testbed import MixtureTestbed, default_testbed, load_testbed

__all__ = ["main"]


def _parse_seed_range(text: str) -> range:
    """'a..b' -> range(a, b) (end-exclusive)."""
    try:
        lo, hi = text.split("..")
        lo_i, hi_i = int(lo), int(hi)
    except Exception as exc:
        raise ValueError(f"seed range must look like 'a..b', got {text!r}") from exc
    if hi_i <= lo_i:
        raise ValueError("seed range must be non-empty")
    return range(lo_i, hi_i)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults, with unknown-key validation."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _log_config(subcommand: str, resolved: dict) -> None:
    print(json.dumps({"subcommand": subcommand, "config": resolved}, sort_keys=True))


def _build_schedule(resolved: dict) -> NoiseSchedule:
    return NoiseSchedule(
        big_t=int(resolved["big_t"]), theta_max=float(resolved["theta_max"])
    )


def _build_testbed(resolved: dict, schedule: NoiseSchedule) -> MixtureTestbed:
    if resolved.get("testbed"):
        return load_testbed(resolved["testbed"], schedule=schedule)
    return default_testbed(schedule=schedule)


def _guidance(resolved: dict) -> GuidanceConfig:
    return GuidanceConfig(
        omega_l=float(resolved["omega_l"]),
        omega_w=float(resolved["omega_w"]),
        k=int(resolved["k"]),
        fp_iters=int(resolved["fp_iters"]),
        fp_tol=float(resolved["fp_tol"]),
    )


_SCHEDULE_DEFAULTS = {"big_t": DEFAULT_BIG_T, "theta_max": DEFAULT_THETA_MAX}
_GUIDANCE_DEFAULTS = {
    "omega_l": 5.5,
    "omega_w": 1.0,
    "k": 100,
    "fp_iters": 1,
    "fp_tol": 1e-10,
}


def _cmd_collect(args: argparse.Namespace) -> int:
    defaults = {
        "testbed": None,
        "seeds": "0..100",
        "m": 0.0,
        "steps": 10,
        "out": None,
        "global_seed": 0,
        "workers": 1,
        **_GUIDANCE_DEFAULTS,
        **_SCHEDULE_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["out"]:
        raise ValueError("--out is required")
    _log_config("collect", resolved)
    schedule = _build_schedule(resolved)
    testbed = _build_testbed(resolved, schedule)
    stats = npdmod.collect(
        testbed,
        _guidance(resolved),
        SelectionRule(m=float(resolved["m"])),
        _parse_seed_range(resolved["seeds"]),
        int(resolved["steps"]),
        resolved["out"],
        global_seed=int(resolved["global_seed"]),
        workers=int(resolved["workers"]),
    )
    print(
        json.dumps(
            {
                "attempted": stats.attempted,
                "kept": stats.kept,
                "skipped": stats.skipped,
                "keep_rate": stats.keep_rate,
                "mean_score_gap": stats.mean_score_gap,
                "out": str(resolved["out"]),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    defaults = {
        "npd": None,
        "out": None,
        "epochs": 30,
        "batch_size": 64,
        "lr": 1e-3,
        "seed": 0,
        "one_prompt_per_batch": False,
        "svd_width": 16,
        "svd_heads": 4,
        "res_width": 16,
        "res_heads": 4,
        "res_blocks": 2,
        "embed_dim": 16,
        "groups": 4,
        "train_embeddings": False,
    }
    resolved = _resolve(args, defaults)
    if not resolved["npd"] or not resolved["out"]:
        raise ValueError("--npd and --out are required")
    _log_config("train", resolved)
    header, records = npdmod.read_all(resolved["npd"])
    config = netmod.NpnetConfig(
        d_side=header.d_side,
        n_classes=header.n_classes,
        svd_width=int(resolved["svd_width"]),
        svd_heads=int(resolved["svd_heads"]),
        res_width=int(resolved["res_width"]),
        res_heads=int(resolved["res_heads"]),
        res_blocks=int(resolved["res_blocks"]),
        embed_dim=int(resolved["embed_dim"]),
        groups=int(resolved["groups"]),
        train_embeddings=bool(resolved["train_embeddings"]),
    )
    params = netmod.init_params(config, seed=int(resolved["seed"]))
    hyper = netmod.TrainConfig(
        epochs=int(resolved["epochs"]),
        batch_size=min(int(resolved["batch_size"]), len(records)),
        lr=float(resolved["lr"]),
        seed=int(resolved["seed"]),
        one_prompt_per_batch=bool(resolved["one_prompt_per_batch"]),
    )
    extra = {"resolved_config": resolved, "loss_curve": None}
    try:
        params, curve = netmod.train(records, params, hyper)
    except netmod.TrainingDiverged as exc:
        extra["diverged"] = True
        netmod.save_checkpoint(exc.last_params, resolved["out"], extra=extra)
        raise
    extra["loss_curve"] = curve
    netmod.save_checkpoint(params, resolved["out"], extra=extra)
    print(
        json.dumps(
            {
                "records": len(records),
                "initial_loss": curve[0],
                "final_loss": curve[-1],
                "out": str(resolved["out"]),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": None,
        "seed": 7,
        "class_id": None,
        "testbed": None,
        "out": None,
        "global_seed": 0,
        **_SCHEDULE_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["checkpoint"] or not resolved["out"]:
        raise ValueError("--checkpoint and --out are required")
    if resolved["class_id"] is None and resolved["testbed"] is None:
        raise ValueError("need --class-id or --testbed to pick the condition")
    _log_config("infer", resolved)
    params, _ = netmod.load_checkpoint(resolved["checkpoint"])
    d = params.config.d_side
    stream = derive_stream(int(resolved["global_seed"]), f"pair:{int(resolved['seed'])}")
    if resolved["class_id"] is not None:
        uniform(stream)  # the class draw consumes one uniform either way
        c = int(resolved["class_id"])
        if not 0 <= c < params.config.n_classes:
            raise ValueError("class id outside the checkpoint's class count")
    else:
        schedule = _build_schedule(resolved)
        testbed = _build_testbed(resolved, schedule)
        c = testbed.sample_class(stream)
    x_head = gaussian(stream, (d, d))
    x_gold = netmod.golden(x_head, c, params)
    np.save(resolved["out"], np.stack([x_head, x_gold]))
    print(
        json.dumps(
            {
                "class_id": c,
                "identity": bool(np.array_equal(x_head, x_gold)),
                "out": str(resolved["out"]),
                "shift_norm": float(np.linalg.norm(x_gold - x_head)),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": None,
        "testbed": None,
        "n_test": 400,
        "seed_start": 10000,
        "steps": 10,
        "out_csv": None,
        "global_seed": 0,
        **_GUIDANCE_DEFAULTS,
        **_SCHEDULE_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["checkpoint"]:
        raise ValueError("--checkpoint is required")
    _log_config("eval", resolved)
    schedule = _build_schedule(resolved)
    testbed = _build_testbed(resolved, schedule)
    params, _ = netmod.load_checkpoint(resolved["checkpoint"])
    if params.config.d_side != testbed.d_side:
        raise ValueError("checkpoint and testbed disagree on d_side")
    report = evalmod.evaluate_model(
        params,
        testbed,
        _guidance(resolved),
        int(resolved["n_test"]),
        int(resolved["seed_start"]),
        n_steps=int(resolved["steps"]),
        global_seed=int(resolved["global_seed"]),
    )
    for line in evalmod.report_lines(report):
        print(line)
    if resolved["out_csv"]:
        evalmod.write_report_csv(report, resolved["out_csv"])
    return 0


def _cmd_verify_theorem(args: argparse.Namespace) -> int:
    defaults = {
        "testbed": None,
        "trials": 20,
        "out_csv": None,
        "global_seed": 0,
        **_GUIDANCE_DEFAULTS,
        **_SCHEDULE_DEFAULTS,
        "k": "64,32,16,8",
    }
    resolved = _resolve(args, defaults)
    _log_config("verify-theorem", resolved)
    schedule = _build_schedule(resolved)
    testbed = _build_testbed(resolved, schedule)
    k_sequence = [int(v) for v in str(resolved["k"]).split(",") if v]
    guidance = GuidanceConfig(
        omega_l=float(resolved["omega_l"]),
        omega_w=float(resolved["omega_w"]),
        k=k_sequence[0],
        fp_iters=int(resolved["fp_iters"]),
        fp_tol=float(resolved["fp_tol"]),
    )
    report = theorymod.verify_theorem(
        testbed,
        guidance,
        int(resolved["trials"]),
        k_sequence,
        global_seed=int(resolved["global_seed"]),
    )
    print(theorymod.report_table(report))
    if resolved["out_csv"]:
        theorymod.write_report_csv(report, resolved["out_csv"])
    return 0


def _cmd_inspect_npd(args: argparse.Namespace) -> int:
    defaults = {
        "npd": None,
        "testbed": None,
        "deep": False,
        **_SCHEDULE_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["npd"]:
        raise ValueError("--npd is required")
    _log_config("inspect-npd", resolved)
    testbed = None
    if resolved["deep"]:
        schedule = _build_schedule(resolved)
        testbed = _build_testbed(resolved, schedule)
    problems = npdmod.verify_npd(
        resolved["npd"], testbed=testbed, deep=bool(resolved["deep"])
    )
    header, _ = npdmod.read_npd(resolved["npd"])
    print(
        json.dumps(
            {
                "records": header.record_count,
                "d_side": header.d_side,
                "m": header.m,
                "omega_l": header.omega_l,
                "omega_w": header.omega_w,
                "problems": problems,
            },
            sort_keys=True,
        )
    )
    return 0 if not problems else 1


def _add_common(sub: argparse.ArgumentParser, with_guidance: bool, with_schedule: bool) -> None:
    sub.add_argument("--config", help="JSON file with defaults for this subcommand")
    if with_guidance:
        sub.add_argument("--omega-l", dest="omega_l", type=float)
        sub.add_argument("--omega-w", dest="omega_w", type=float)
        sub.add_argument("--k", dest="k")
        sub.add_argument("--fp-iters", dest="fp_iters", type=int)
        sub.add_argument("--fp-tol", dest="fp_tol", type=float)
    if with_schedule:
        sub.add_argument("--big-t", dest="big_t", type=int)
        sub.add_argument("--theta-max", dest="theta_max", type=float)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noiseprompt",
        description="Noise-prompt learning lab: pair collection, training, "
        "inference, evaluation, closed-form delta verification.",
    )
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("collect", help="collect a noise-pair dataset")
    p.add_argument("--testbed")
    p.add_argument("--seeds", help="seed range a..b (end-exclusive)")
    p.add_argument("--m", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.add_argument("--global-seed", dest="global_seed", type=int)
    p.add_argument("--workers", type=int)
    _add_common(p, with_guidance=True, with_schedule=True)
    p.set_defaults(func=_cmd_collect)

    p = subs.add_parser("train", help="train the golden-noise network")
    p.add_argument("--npd")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--one-prompt-per-batch",
        dest="one_prompt_per_batch",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    for flag, dest in (
        ("--svd-width", "svd_width"),
        ("--svd-heads", "svd_heads"),
        ("--res-width", "res_width"),
        ("--res-heads", "res_heads"),
        ("--res-blocks", "res_blocks"),
        ("--embed-dim", "embed_dim"),
        ("--groups", "groups"),
    ):
        p.add_argument(flag, dest=dest, type=int)
    p.add_argument(
        "--train-embeddings",
        dest="train_embeddings",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    p.add_argument("--config", help="JSON file with defaults for this subcommand")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("infer", help="turn one seeded noise into golden noise")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--class-id", dest="class_id", type=int)
    p.add_argument("--testbed")
    p.add_argument("--out")
    p.add_argument("--global-seed", dest="global_seed", type=int)
    _add_common(p, with_guidance=False, with_schedule=True)
    p.set_defaults(func=_cmd_infer)

    p = subs.add_parser("eval", help="held-out evaluation of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--testbed")
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--seed-start", dest="seed_start", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--global-seed", dest="global_seed", type=int)
    _add_common(p, with_guidance=True, with_schedule=True)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser(
        "verify-theorem", help="check the closed-form re-denoise delta order"
    )
    p.add_argument("--testbed")
    p.add_argument("--trials", type=int)
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--global-seed", dest="global_seed", type=int)
    _add_common(p, with_guidance=True, with_schedule=True)
    p.set_defaults(func=_cmd_verify_theorem)

    p = subs.add_parser("inspect-npd", help="re-verify a dataset file")
    p.add_argument("--npd")
    p.add_argument("--testbed")
    p.add_argument(
        "--deep", action=argparse.BooleanOptionalAction, default=None
    )
    _add_common(p, with_guidance=False, with_schedule=True)
    p.set_defaults(func=_cmd_inspect_npd)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except NumericError as exc:
        print(json.dumps({"error": "numeric", "message": str(exc)}), file=sys.stderr)
        return 3
    except (NpdFormatError, OSError) as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
