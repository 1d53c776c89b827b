"""Command-line driver: catalog -> plan -> generate -> train -> eval/analyze.

Every invocation writes a run manifest (arguments, input hashes, outputs,
timestamps, tool version) next to its primary output. Fatal errors print a
single machine-parseable JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .catalog import (
    CatalogError,
    load_backgrounds,
    load_catalog,
    read_catalog,
    save_catalog,
)
from .evaluation import (
    ClassMask,
    EvalError,
    evaluate_topk,
    extract_features,
    read_features,
    write_features,
)
from .generation import BackendError, HttpBackend, MockBackend, run_plan
from .metrics import MetricsError, compute_report
from .probe import ProbeError, linear_probe
from .prompts import GenParams, PlanError, build_plan, read_plan, template_from_name, write_plan
from .store import DatasetStore, StoreError, load_dataset
from .training import Checkpoint, TrainConfig, TrainingDiverged, train


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> "CliError":
    return CliError(code, message)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _hash_input(path: Path) -> str:
    from .store import sha256_file

    if path.is_dir():
        manifest = path / "manifest.jsonl"
        return sha256_file(manifest) if manifest.exists() else "dir"
    return sha256_file(path)


def _write_run_manifest(command: str, args: argparse.Namespace, inputs: list[str],
                        outputs: list[str], started: str) -> None:
    primary = Path(outputs[0])
    target = primary / "run_manifest.json" if primary.is_dir() else primary.with_name(
        primary.name + ".run.json"
    )
    snapshot = {k: v for k, v in vars(args).items() if k not in ("func", "input_paths")}
    record = {
        "command": command,
        "config": snapshot,
        "input_hashes": {p: _hash_input(Path(p)) for p in inputs if Path(p).exists()},
        "outputs": outputs,
        "started_at": started,
        "finished_at": _utc_now(),
        "tool_version": __version__,
    }
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_catalog(args) -> list[str]:
    class_list = [
        line.strip() for line in Path(args.classes).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    catalog = load_catalog(args.wordnet_meta, class_list, name=Path(args.classes).stem)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_catalog(catalog, args.out)
    print(f"catalog: {len(catalog)} classes -> {args.out}")
    return [args.out]


def cmd_plan(args) -> list[str]:
    catalog = read_catalog(args.catalog)
    try:
        templates = [template_from_name(t) for t in args.templates.split(",") if t.strip()]
    except PlanError as exc:
        raise _fail("unknown_template", str(exc))
    if not templates:
        raise _fail("unknown_template", "no templates given")

    if args.counts:
        counts = {str(k): int(v) for k, v in
                  json.loads(Path(args.counts).read_text(encoding="utf-8")).items()}
    elif args.per_class:
        counts = {wnid: args.per_class for wnid in catalog.wnids}
    else:
        raise _fail("bad_counts", "one of --per-class or --counts is required")

    backgrounds = None
    if any(t.needs_background for t in templates):
        if not args.backgrounds:
            raise _fail("missing_backgrounds", "hyper_bg template requires --backgrounds FILE")
        backgrounds = load_backgrounds(args.backgrounds)

    params = GenParams(steps=args.steps, guidance=args.guidance,
                       width=args.width, height=args.height)
    plan = build_plan(catalog, templates, counts, backgrounds=backgrounds,
                      plan_seed=args.seed, gen_params=params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_plan(plan, args.out)
    print(f"plan: {len(plan)} records over {len(counts)} classes -> {args.out}")
    return [args.out]


def cmd_generate(args) -> list[str]:
    plan = read_plan(args.plan)
    backend = MockBackend() if args.backend == "mock" else HttpBackend()
    out_dir = Path(args.out_dir)
    if (out_dir / "manifest.jsonl").exists():
        store = DatasetStore.open(out_dir)
    else:
        store = DatasetStore.create(out_dir, plan.plan_seed, plan.catalog_name)
    with store:
        report = run_plan(plan, backend, store, workers=args.workers, resume=args.resume,
                          image_format=args.format, jpeg_quality=args.quality)
    print(f"generate: completed={report.completed} failed={report.failed} "
          f"skipped={report.skipped}")
    if report.failed:
        for line in report.errors[:10]:
            print(f"  failed: {line}", file=sys.stderr)
    return [str(out_dir)]


def cmd_train(args) -> list[str]:
    dataset = DatasetStore.open(args.manifest).view()
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    checkpoint = train(dataset, config)
    checkpoint.save(args.out)
    final_loss = checkpoint.history["loss_per_epoch"][-1]
    print(f"train: {checkpoint.history['total_steps']} steps, "
          f"final epoch loss {final_loss:.4f} -> {args.out}")
    return [args.out]


def cmd_eval(args) -> list[str]:
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = load_dataset(args.dataset)
    ks = [int(k) for k in args.topk.split(",") if k.strip()]
    mask = ClassMask.from_file(args.class_mask) if args.class_mask else None
    try:
        accuracies = evaluate_topk(checkpoint, dataset, ks, mask=mask,
                                   mask_logits=args.mask_logits == "true")
    except EvalError as exc:
        raise _fail("mask_mismatch", str(exc))
    payload = {f"top{k}": acc for k, acc in accuracies.items()}
    payload.update(
        dataset=str(args.dataset),
        checkpoint=str(args.checkpoint),
        n_samples=len(dataset),
        masked=mask is not None,
        mask_logits=args.mask_logits == "true",
    )
    _write_json(args.out, payload)
    print("eval: " + " ".join(f"top{k}={acc:.4f}" for k, acc in sorted(accuracies.items())))
    return [args.out]


def cmd_features(args) -> list[str]:
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = load_dataset(args.dataset)
    fm = extract_features(checkpoint, dataset, resolution=args.resolution)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_features(fm, args.out)
    print(f"features: {fm.n} x {fm.d} -> {args.out}")
    return [args.out]


def cmd_probe(args) -> list[str]:
    train_fm = read_features(args.train_feats)
    test_fm = read_features(args.test_feats)
    result = linear_probe(train_fm, test_fm, n_trials=args.trials, seed=args.seed)
    _write_json(args.out, result.to_dict())
    print(f"probe: accuracy={result.accuracy:.4f} over {len(result.trials)} trials "
          f"({result.solver})")
    return [args.out]


METRIC_NAMES = {"sparsity", "intra", "redundancy", "coding"}


def cmd_analyze(args) -> list[str]:
    wanted = {m.strip() for m in args.metrics.split(",") if m.strip()}
    unknown = wanted - METRIC_NAMES
    if unknown:
        raise _fail("unknown_metric", f"unknown metrics: {sorted(unknown)}")
    fm = read_features(args.feats)
    log_base = 2.0 if args.log_base == "2" else math.e
    report = compute_report(fm.X, fm.labels, log_base=log_base,
                            dataset_group=fm.meta.get("source_dataset", ""))
    full = report.to_dict()
    selected = {
        "sparsity": full["sparsity"],
        "intra": full["intra_class_l2"],
        "redundancy": full["redundancy"],
        "coding": full["coding_length"],
    }
    payload = {name: selected[name] for name in sorted(wanted)}
    payload.update(params=full["params"], zero_rows=full["zero_rows"],
                   dataset_group=full["dataset_group"], n=fm.n, d=fm.d)
    _write_json(args.out, payload)
    print("analyze: " + " ".join(f"{k}={payload[k]:.6g}" for k in sorted(wanted)))
    return [args.out]


def _primary_value(report: dict) -> float:
    for key in ("top5", "top1", "accuracy"):
        if key in report and isinstance(report[key], (int, float)):
            return float(report[key])
    for value in report.values():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    raise _fail("bad_report", "report has no numeric metric")


def _render_spider(names: list[str], values: list[float]) -> str:
    size, cx, cy, radius = 640, 320.0, 320.0, 220.0
    n = len(values)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]

    def point(i: int, frac: float) -> tuple[float, float]:
        angle = -math.pi / 2 + 2 * math.pi * i / n
        return cx + radius * frac * math.cos(angle), cy + radius * frac * math.sin(angle)

    for ring in (0.25, 0.5, 0.75, 1.0):
        ring_pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (point(i, ring) for i in range(n)))
        parts.append(f'<polygon points="{ring_pts}" fill="none" stroke="#cccccc"/>')
    for i, name in enumerate(names):
        x, y = point(i, 1.0)
        parts.append(f'<line x1="{cx}" y1="{cy}" x2="{x:.1f}" y2="{y:.1f}" stroke="#999999"/>')
        lx, ly = point(i, 1.12)
        parts.append(
            f'<text x="{lx:.1f}" y="{ly:.1f}" font-size="14" text-anchor="middle" '
            f'font-family="sans-serif">{name}</text>'
        )
    value_pts = " ".join(
        f"{x:.1f},{y:.1f}"
        for x, y in (point(i, max(0.0, min(1.0, v))) for i, v in enumerate(values))
    )
    parts.append(
        f'<polygon points="{value_pts}" fill="#d6604d" fill-opacity="0.35" stroke="#b2182b" '
        f'stroke-width="2"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _render_table(names: list[str], reports: list[dict]) -> str:
    numeric_keys = sorted({
        k for rep in reports for k, v in rep.items()
        if isinstance(v, (int, float)) and not isinstance(v, bool)
    })
    lines = ["| report | " + " | ".join(numeric_keys) + " |",
             "|---" * (len(numeric_keys) + 1) + "|"]
    for name, rep in zip(names, reports):
        cells = [f"{rep[k]:.4f}" if k in rep else "" for k in numeric_keys]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> list[str]:
    paths = [Path(p.strip()) for p in args.inputs.split(",") if p.strip()]
    if not paths:
        raise _fail("bad_report", "no input reports given")
    reports = [json.loads(p.read_text(encoding="utf-8")) for p in paths]
    names = [p.stem for p in paths]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.style == "spider":
        out.write_text(_render_spider(names, [_primary_value(r) for r in reports]),
                       encoding="utf-8")
    else:
        out.write_text(_render_table(names, reports), encoding="utf-8")
    print(f"report: {args.style} over {len(reports)} inputs -> {out}")
    return [str(out)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clone", description="Synthetic dataset cloning pipeline"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("catalog", help="compile a class catalog from extracted metadata")
    p.add_argument("--wordnet-meta", required=True)
    p.add_argument("--classes", required=True, help="text file with one wnid per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_catalog, input_paths=lambda a: [a.wordnet_meta, a.classes])

    p = sub.add_parser("plan", help="compile a deterministic generation plan")
    p.add_argument("--catalog", required=True)
    p.add_argument("--templates", default="name",
                   help="comma list of: " + ",".join(
                       ("name", "name_hyper", "name_def", "multi", "multi_diff", "hyper_bg")))
    p.add_argument("--per-class", type=int, default=0)
    p.add_argument("--counts", default="", help="JSON file mapping wnid to count")
    p.add_argument("--backgrounds", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=384)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan,
                   input_paths=lambda a: [x for x in (a.catalog, a.counts, a.backgrounds) if x])

    p = sub.add_parser("generate", help="execute a plan against a backend")
    p.add_argument("--plan", required=True)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--format", choices=("png", "jpeg"), default="png")
    p.add_argument("--quality", type=int, default=95)
    p.set_defaults(func=cmd_generate, input_paths=lambda a: [a.plan])

    p = sub.add_parser("train", help="train encoder + classifier on a generated store")
    p.add_argument("--manifest", required=True, help="dataset store directory")
    p.add_argument("--config", default="", help="TrainConfig YAML/JSON")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(func=cmd_train,
                   input_paths=lambda a: [x for x in (a.manifest, a.config) if x])

    p = sub.add_parser("eval", help="top-k accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--topk", default="1,5")
    p.add_argument("--class-mask", default="")
    p.add_argument("--mask-logits", choices=("true", "false"), default="true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval,
                   input_paths=lambda a: [x for x in (a.checkpoint, a.dataset, a.class_mask) if x])

    p = sub.add_parser("features", help="extract encoder features to a binary file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features, input_paths=lambda a: [a.checkpoint, a.dataset])

    p = sub.add_parser("probe", help="linear probe with hyperparameter search")
    p.add_argument("--train-feats", required=True)
    p.add_argument("--test-feats", required=True)
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe, input_paths=lambda a: [a.train_feats, a.test_feats])

    p = sub.add_parser("analyze", help="representation statistics of a feature file")
    p.add_argument("--feats", required=True)
    p.add_argument("--metrics", default="sparsity,intra,redundancy,coding")
    p.add_argument("--log-base", choices=("e", "2"), default="e")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze, input_paths=lambda a: [a.feats])

    p = sub.add_parser("report", help="render eval/probe/analyze reports as table or spider")
    p.add_argument("--inputs", required=True, help="comma list of report JSON files")
    p.add_argument("--style", choices=("table", "spider"), default="table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report, input_paths=lambda a: a.inputs.split(","))

    return parser


ERROR_CODES = {
    CatalogError: "catalog_error",
    PlanError: "plan_error",
    StoreError: "store_error",
    BackendError: "backend_error",
    EvalError: "eval_error",
    ProbeError: "probe_error",
    MetricsError: "metrics_error",
    TrainingDiverged: "training_diverged",
    FileNotFoundError: "missing_input",
    json.JSONDecodeError: "bad_json",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _utc_now()
    try:
        outputs = args.func(args)
        _write_run_manifest(args.command, args, args.input_paths(args), outputs, started)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except tuple(ERROR_CODES) as exc:
        code = next(c for t, c in ERROR_CODES.items() if isinstance(exc, t))
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
