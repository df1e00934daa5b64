"""Operator command line: profile, train, eval, score, bench, package.

Exit codes are a stable contract for CI: 0 success, 1 gate or validation
failure, 2 usage error.  Every artifact-producing command writes a manifest
(command, argument snapshot, seed, toolkit version, device, timestamps)
beside its outputs.  ``DEBLURKIT_DATA_ROOT`` and ``DEBLURKIT_DEVICE``
override the data root and device arguments.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import tarfile
import tempfile
from pathlib import Path

import torch

from . import __version__, data_io, efficiency, inference, metrics, models, train
from .reparam import convert_model

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _device() -> str:
    return os.environ.get("DEBLURKIT_DEVICE", "cpu")


def _data_root(value: str | None) -> Path:
    root = value or os.environ.get("DEBLURKIT_DATA_ROOT")
    if root is None:
        raise UsageError("no data root: pass --data or set DEBLURKIT_DATA_ROOT")
    return Path(root)


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad resolution {text!r}; expected WxH like 1920x1200") from exc
    if w <= 0 or h <= 0:
        raise UsageError("resolution must be positive")
    return w, h


def write_manifest(
    out_dir: Path, command: str, arguments: dict, seed: int | None
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "arguments": {k: arguments[k] for k in sorted(arguments)},
        "seed": seed,
        "toolkit_version": __version__,
        "device": _device(),
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _load_model_for_analysis(source: str, train_form: bool) -> torch.nn.Module:
    config = models.load_model_config(source)
    torch.manual_seed(0)  # counts are structure-only; seeding keeps runs identical
    model = models.build_model(config).eval()
    if not train_form:
        model = convert_model(model)
    return model


def _macs_policy(args) -> efficiency.MacsPolicy:
    return efficiency.MacsPolicy(
        count_gating=not args.no_gating_macs,
        count_attention_matmul=args.attention_macs,
        count_bias=args.bias_macs,
        count_pooling=args.pooling_macs,
    )


def _add_policy_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--no-gating-macs",
        action="store_true",
        help="exclude elementwise gating/scaling multiplies from the MACs count",
    )
    parser.add_argument(
        "--attention-macs",
        action="store_true",
        help="include the channel-attention matrix products in the MACs count",
    )
    parser.add_argument(
        "--bias-macs", action="store_true", help="count conv/linear bias adds as MACs"
    )
    parser.add_argument(
        "--pooling-macs", action="store_true", help="count statistics pooling as MACs"
    )


def cmd_profile(args) -> int:
    if args.dump_defaults:
        print(models.dump_model_config(models.load_model_config(args.model)), end="")
        return EXIT_OK
    model = _load_model_for_analysis(args.model, args.train_form)
    w, h = _parse_resolution(args.res)
    runtime = None
    if args.runs > 0:
        runtime = efficiency.benchmark_runtime(
            model, h, w, runs=args.runs, warmup=args.warmup, device=_device()
        )
    report = efficiency.profile(
        model, h, w, policy=_macs_policy(args), model_name=args.model, runtime=runtime
    )
    gate = None
    if args.gate:
        gate = efficiency.check_gate(report)  # raises at non-challenge resolutions
    print(report.summary_row(gate))
    if gate is not None:
        for reason in gate.reasons:
            print(f"  {reason}")
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    if args.per_layer:
        for row in report.per_layer:
            print(f"  {row.name:<60} {row.params:>12} {row.macs:>16}")
    return EXIT_OK if gate is None or gate.passed else EXIT_FAILURE


def cmd_bench(args) -> int:
    model = _load_model_for_analysis(args.model, args.train_form)
    w, h = _parse_resolution(args.res)
    stats = efficiency.benchmark_runtime(
        model, h, w, runs=args.runs, warmup=args.warmup, device=_device()
    )
    print(
        f"{args.model}: mean {stats.mean_ms:.1f}ms std {stats.std_ms:.1f}ms "
        f"p50 {stats.p50_ms:.1f}ms p95 {stats.p95_ms:.1f}ms "
        f"({stats.runs} runs, {stats.warmup} warmup, {stats.device})"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    if args.dump_defaults:
        plan = train.load_plan(args.plan)
        import yaml

        print(yaml.safe_dump(plan.to_dict(), sort_keys=False), end="")
        return EXIT_OK
    try:
        plan = train.load_plan(args.plan)
    except train.PlanError as exc:
        print(f"invalid plan:\n  {exc}", file=sys.stderr)
        return EXIT_FAILURE
    root = _data_root(args.data)
    out_dir = Path(args.out)
    try:
        train_index = data_io.build_index(root, "train")
        val_index = (
            data_io.build_index(root, args.val_split) if args.val_split else None
        )
    except data_io.DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    torch.manual_seed(args.seed)
    model = models.build_model(models.load_model_config(args.model))
    backend = _resolve_backend(args.backend)
    result = train.run_plan(
        model,
        plan,
        train_index,
        val_index,
        out_dir,
        seed=args.seed,
        backend=backend,
        log_path=out_dir / "train_log.jsonl",
        resume=args.resume,
    )
    write_manifest(
        out_dir,
        "train",
        {
            "plan": str(args.plan),
            "model": args.model,
            "data": str(root),
            "val_split": args.val_split,
            "resume": args.resume,
        },
        args.seed,
    )
    print(f"best checkpoint: {result.best_path}")
    print(f"last checkpoint: {result.last_path}")
    if result.best_val_psnr > -1e30:
        print(f"best validation psnr: {result.best_val_psnr:.3f} dB")
    return EXIT_OK


def _parse_tta(text: str | None) -> inference.TtaSpec | None:
    if text is None:
        return None
    shorthands = {
        "flips": ("identity", "hflip", "vflip", "hvflip"),
        "full": inference.TTA_TRANSFORMS,
    }
    transforms = shorthands.get(text, tuple(part.strip() for part in text.split(",")))
    try:
        return inference.TtaSpec(transforms=transforms)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    try:
        model = models.load_checkpoint(args.checkpoint, prefer_ema=args.ema)
    except models.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    root = _data_root(args.data)
    try:
        index = data_io.build_index(root, args.split)
    except data_io.DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tta = _parse_tta(args.tta)
    try:
        written = inference.restore_index(
            model, index, out_dir, tta=tta, tile=args.tile, overlap=args.overlap
        )
    except RuntimeError as exc:
        hint = " (pass --tile N to restore in bounded tiles)" if "memory" in str(exc).lower() else ""
        print(f"restoration failed: {exc}{hint}", file=sys.stderr)
        return EXIT_FAILURE
    write_manifest(
        out_dir,
        "eval",
        {
            "checkpoint": str(args.checkpoint),
            "data": str(root),
            "split": args.split,
            "tta": args.tta,
            "tile": args.tile,
            "ema": args.ema,
        },
        args.seed,
    )
    print(f"restored {len(written)} images into {out_dir}")
    return EXIT_OK


def _resolve_backend(spec: str | None):
    if spec is None or spec == "none":
        return None
    if spec == "stub":
        return metrics.StubPerceptualBackend()
    if ":" in spec:
        module_name, attr = spec.split(":", 1)
        import importlib

        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
        return factory() if callable(factory) else factory
    raise UsageError(
        f"unknown backend {spec!r}; use 'stub', 'none', or 'module:factory'"
    )


def _parse_weights(text: str) -> metrics.ScoreWeights:
    try:
        a, b, c = (float(part) for part in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad weights {text!r}; expected three comma floats") from exc
    try:
        return metrics.ScoreWeights(a, b, c)
    except metrics.MetricError as exc:
        raise UsageError(str(exc)) from exc


def _score_leaderboard(args, root: Path) -> int:
    """Score every submission subdirectory and print one ranked row each."""
    parent = Path(args.pred_dir)
    submissions = sorted(d for d in parent.iterdir() if d.is_dir() and any(d.glob("*.png")))
    if not submissions:
        print(f"no submission directories under {parent}", file=sys.stderr)
        return EXIT_FAILURE
    index = data_io.build_index(root, args.split)
    weights = _parse_weights(args.weights)
    backend = _resolve_backend(args.backend)
    rows = []
    for sub in submissions:
        report = metrics.score_submission(
            sub, index, weights=weights, backend=backend, align=not args.no_align
        )
        rows.append((sub.name, report))
    rows.sort(key=lambda item: -item[1].score)
    print(f"{'rank':<5} {'submission':<24} {'score':>9} {'psnr':>8} {'ssim':>7} "
          f"{'lpips':>7}  verdict")
    for rank, (name, report) in enumerate(rows, start=1):
        lp = "-" if report.mean_lpips is None else f"{report.mean_lpips:.4f}"
        print(
            f"{rank:<5} {name:<24} {report.score:9.4f} {report.mean_psnr:8.3f} "
            f"{report.mean_ssim:7.4f} {lp:>7}  {report.verdict}"
        )
    return EXIT_OK


def cmd_score(args) -> int:
    root = _data_root(args.gt)
    if args.leaderboard:
        return _score_leaderboard(args, root)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir() or not any(pred_dir.glob("*.png")):
        print(f"no predictions found in {pred_dir}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        index = data_io.build_index(root, args.split)
        report = metrics.score_submission(
            pred_dir,
            index,
            weights=_parse_weights(args.weights),
            backend=_resolve_backend(args.backend),
            align=not args.no_align,
        )
    except (data_io.DatasetError, metrics.MetricError) as exc:
        print(f"scoring error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(report.to_text(), end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.txt").write_text(report.to_text())
        write_manifest(
            out_dir,
            "score",
            {
                "pred_dir": str(pred_dir),
                "gt": str(root),
                "split": args.split,
                "weights": args.weights,
                "align": not args.no_align,
                "backend": args.backend,
            },
            args.seed,
        )
    return EXIT_OK if report.verdict == "ok" else EXIT_FAILURE


def cmd_package(args) -> int:
    try:
        model = models.load_checkpoint(args.checkpoint)
    except models.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    pred_dir = Path(args.pred_dir)
    predictions = sorted(pred_dir.glob("*.png"))
    if not predictions:
        print(f"no predictions found in {pred_dir}", file=sys.stderr)
        return EXIT_FAILURE

    fused = convert_model(model)
    report = efficiency.profile(
        fused,
        efficiency.GATE_HEIGHT,
        efficiency.GATE_WIDTH,
        model_name=type(model).__name__,
    )
    gate = efficiency.check_gate(report)
    if not gate.passed and not args.force:
        print("refusing to package a gate-failing model:", file=sys.stderr)
        for reason in gate.reasons:
            print(f"  {reason}", file=sys.stderr)
        return EXIT_FAILURE

    archive_path = Path(args.out)
    archive_path.parent.mkdir(parents=True, exist_ok=True)
    factsheet_lines = [f"{key}: {value}" for key, value in (args.field or [])]
    with tempfile.TemporaryDirectory() as tmp:
        tmp_dir = Path(tmp)
        fused_path = tmp_dir / "checkpoint_fused.pt"
        models.save_checkpoint(fused, fused_path)
        (tmp_dir / "efficiency_report.json").write_text(report.to_json() + "\n")
        (tmp_dir / "factsheet.txt").write_text("\n".join(factsheet_lines) + "\n")
        manifest = write_manifest(
            tmp_dir,
            "package",
            {
                "checkpoint": str(args.checkpoint),
                "pred_dir": str(pred_dir),
                "gate_passed": gate.passed,
                "forced": args.force,
            },
            args.seed,
        )
        with tarfile.open(archive_path, "w:gz") as tar:
            for path in (fused_path, tmp_dir / "efficiency_report.json",
                         tmp_dir / "factsheet.txt", manifest):
                tar.add(path, arcname=path.name)
            for pred in predictions:
                tar.add(pred, arcname=f"results/{pred.name}")
    print(f"wrote {archive_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deblurkit",
        description="Efficient deblurring toolkit: architectures, referee, scorer.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="params/MACs report and budget gate")
    p.add_argument("model", help="preset name or model config YAML")
    p.add_argument("--res", default="1920x1200", help="input resolution WxH")
    p.add_argument("--runs", type=int, default=0, help="runtime benchmark runs")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--gate", action="store_true", help="apply the budget gate")
    p.add_argument("--train-form", action="store_true", help="profile without fusing")
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--dump-defaults", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_policy_arguments(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="wall-clock runtime benchmark")
    p.add_argument("model")
    p.add_argument("--res", default="1920x1200")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--train-form", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="execute a staged training plan")
    p.add_argument("plan", help="plan YAML")
    p.add_argument("--model", required=True, help="preset name or model config YAML")
    p.add_argument("--data", help="dataset root (or DEBLURKIT_DATA_ROOT)")
    p.add_argument("--out", required=True)
    p.add_argument("--val-split", default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--backend", default=None, help="perceptual backend (stub|module:factory)")
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="restore every indexed blur image")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset root (or DEBLURKIT_DATA_ROOT)")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", default=None, help="comma list, 'flips', or 'full'")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--ema", action="store_true", help="use the EMA weights")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a prediction directory")
    p.add_argument("pred_dir")
    p.add_argument("--gt", help="ground-truth dataset root")
    p.add_argument("--split", default="val")
    p.add_argument("--weights", default="1,0,0")
    p.add_argument("--backend", default=None)
    p.add_argument("--no-align", action="store_true")
    p.add_argument(
        "--leaderboard",
        action="store_true",
        help="treat pred_dir as a directory of submissions; print ranked rows",
    )
    p.add_argument("--out", help="write report.csv/report.txt here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("package", help="bundle a submission archive")
    p.add_argument("checkpoint")
    p.add_argument("pred_dir")
    p.add_argument("--out", required=True, help="archive path (.tar.gz)")
    p.add_argument(
        "--field",
        action="append",
        type=lambda kv: tuple(kv.split("=", 1)),
        help="factsheet field key=value (repeatable)",
    )
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_package)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except efficiency.GateResolutionError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except models.ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
