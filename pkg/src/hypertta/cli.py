"""Command line entry point: ``hypertta <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as hio
from .bench.experiment import (
    ExperimentPlan,
    StageError,
    acceptance_plan,
    load_dataset,
    results_markdown,
    run_experiment,
    save_dataset,
    stream_order,
)
from .bench.metrics import evaluate
from .bench.preview import export_preview
from .bench.synthetic import SyntheticSpec, gen_synthetic
from .cela import RESET_MODES, AdaptConfig, run_adaptation
from .degrade import KINDS, PARAMS, DegradationSpec, degrade_and_record
from .hsi import ConfigError, DataError, NumericError, PatchSource, stratified_split
from .sstc import SstcConfig, SstcModel, load_checkpoint, save_checkpoint, train

log = logging.getLogger("hypertta")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _bands(text: str) -> tuple[int, int, int]:
    try:
        r, g, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma-separated band indices, e.g. 10,20,30") from None
    return r, g, b


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        height=args.height,
        width=args.width,
        bands=args.bands,
        classes=args.classes,
        noise_scale=args.noise,
        seed=args.seed,
    )
    cube, labels = gen_synthetic(spec)
    split = stratified_split(labels, args.train_fraction, args.seed)
    save_dataset(args.out, cube, labels, split)
    (Path(args.out) / "synthetic.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    print(f"wrote {cube.bands}x{cube.height}x{cube.width} cube and labels to {args.out}")
    return 0


def cmd_degrade(args) -> int:
    cube = hio.read_cube(args.input)
    params = {}
    for name in PARAMS[args.type]:
        value = getattr(args, name)
        if value is not None:
            params[name] = value
    spec = DegradationSpec(args.type, params, args.seed)
    out = Path(args.out)
    meta = out.with_name(out.stem + ".meta.json")
    degraded, record, _ = degrade_and_record(cube, spec, meta)
    hio.write_cube(degraded, out)
    for w in record.warnings:
        log.warning(w)
    print(f"wrote {out} and {meta}")
    if args.preview:
        ppm = Path(args.preview_out) if args.preview_out else out.with_suffix(".ppm")
        export_preview(degraded, args.preview, ppm)
        print(f"wrote preview {ppm}")
    return 0


def _split_for(data: Path, seed: int, fraction: float):
    path = data / "split.json"
    if path.exists():
        return hio.read_split(path)
    _, labels = load_dataset(data)
    return stratified_split(labels, fraction, seed)


def cmd_train(args) -> int:
    data = Path(args.data)
    cube, labels = load_dataset(data)
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    doc.setdefault("bands", cube.bands)
    doc.setdefault("num_classes", labels.num_classes)
    cfg = SstcConfig.from_json(doc)
    if cfg.bands != cube.bands or cfg.num_classes != labels.num_classes:
        raise ConfigError(f"config expects {cfg.bands} bands / {cfg.num_classes} classes, data has {cube.bands} / {labels.num_classes}")
    split = _split_for(data, cfg.seed, args.train_fraction)
    train_px = split.train_pixels()
    model = SstcModel(cfg)
    report = train(model, PatchSource(cube, train_px, cfg.patch_size), labels.labels.ravel()[train_px], cfg)
    save_checkpoint(model, args.out, {"train_report": report.to_json(), "train_pixels": int(train_px.size)})
    print(f"final loss {report.epoch_loss[-1]:.4f}, train accuracy {report.epoch_accuracy[-1]:.4f}; wrote {args.out}")
    return 0


def cmd_adapt(args) -> int:
    model = load_checkpoint(args.model)
    data = Path(args.data)
    cube = hio.read_cube(Path(args.cube) if args.cube else data / "cube.hsi")
    if cube.bands != model.config.bands:
        raise DataError(f"cube has {cube.bands} bands, model expects {model.config.bands}")
    split = _split_for(data, model.config.seed, 0.2)
    cfg = AdaptConfig(
        tau=args.tau,
        top_fraction=args.top,
        lr=args.lr,
        steps=args.steps,
        batch_size=args.batch,
        reset_mode=args.reset,
        seed=args.seed,
    )
    order = stream_order(split.target_pixels(), cfg.seed)
    source = PatchSource(cube, order, model.config.patch_size)
    preds, report = run_adaptation(model, source.batches(cfg.batch_size), cfg)
    hio.write_predictions(preds, args.out)
    if args.report:
        doc = report.to_json()
        doc["config"] = cfg.to_json()
        doc["stream_pixels"] = order.tolist()
        Path(args.report).write_text(json.dumps(doc) + "\n")
    print(f"wrote {preds.size} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    preds = hio.read_predictions(args.preds)
    data = Path(args.data)
    _, labels = load_dataset(data)
    if args.report:
        order = np.asarray(json.loads(Path(args.report).read_text())["stream_pixels"], dtype=np.int64)
    else:
        order = stream_order(_split_for(data, args.seed, 0.2).target_pixels(), args.seed)
    scores = evaluate(preds, labels, order)
    doc = {k: round(v, 4) for k, v in scores.as_percent().items()}
    doc["evaluated"] = int(order.size)
    if scores.warnings:
        doc["warnings"] = list(scores.warnings)
    print(json.dumps(doc, indent=2))
    return 0


def cmd_report(args) -> int:
    csv_path = Path(args.results)
    if csv_path.is_dir():
        csv_path = csv_path / "results.csv"
    text = results_markdown(csv_path.read_text())
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_run(args) -> int:
    if args.acceptance:
        plan = acceptance_plan(args.out or "acceptance_run", seed=args.seed)
    elif args.plan:
        path = Path(args.plan)
        plan = ExperimentPlan.from_json(json.loads(path.read_text()), base=path.parent)
    else:
        raise ConfigError("run needs --plan or --acceptance")
    if args.out:
        plan.output_dir = Path(args.out)
    if args.repeats:
        if args.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        plan.repeats = args.repeats
    result = run_experiment(plan)
    print(results_markdown(result["csv"]), end="")
    print(f"results in {plan.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypertta", description="Hyperspectral degradation benchmark and test-time adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labelled scene")
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=96)
    g.add_argument("--width", type=int, default=96)
    g.add_argument("--bands", type=int, default=32)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise_scale)
    g.add_argument("--train-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("degrade", help="apply one degradation to a cube")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--type", required=True, choices=KINDS)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--q", type=float)
    d.add_argument("--sigma", type=float)
    d.add_argument("--sigma-max", dest="sigma_max", type=float)
    d.add_argument("--snr-db", dest="snr_db", type=float)
    d.add_argument("--eps", type=float)
    d.add_argument("--p", type=float)
    d.add_argument("--a", type=int)
    d.add_argument("--b", type=int)
    d.add_argument("--k", type=int)
    d.add_argument("--omega", type=float)
    d.add_argument("--preview", type=_bands, help="r,g,b band indices for a PPM preview")
    d.add_argument("--preview-out")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train the classifier on the train side of a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--train-fraction", type=float, default=0.2, help="used only when the data has no split.json")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="adapt a trained model over the target pixels of a (degraded) cube")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True, help="dataset directory (labels, split.json)")
    a.add_argument("--cube", help="cube to adapt on; defaults to <data>/cube.hsi")
    a.add_argument("--tau", type=float, default=0.8)
    a.add_argument("--top", type=float, default=0.3)
    a.add_argument("--lr", type=float, default=0.001)
    a.add_argument("--steps", type=int, default=1)
    a.add_argument("--batch", type=int, default=64)
    a.add_argument("--reset", choices=RESET_MODES, default="per_run")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--report")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="score a predictions file")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="adapt report holding the stream order")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render results.csv as a Markdown table")
    r.add_argument("--results", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="run a full experiment plan")
    x.add_argument("--plan")
    x.add_argument("--acceptance", action="store_true", help="use the built-in scaled-down benchmark plan")
    x.add_argument("--out")
    x.add_argument("--repeats", type=int)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_run)
    return p


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
