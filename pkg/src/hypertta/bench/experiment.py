"""End-to-end benchmark: train on clean source pixels, degrade, adapt, score."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io as hio
from ..cela import AdaptConfig, run_adaptation
from ..degrade import DegradationSpec, degrade_and_record
from ..hsi import ConfigError, HsiCube, LabelMap, PatchSource, SplitSpec, stratified_split
from ..rng import Stream
from ..sstc import SstcConfig, SstcModel, predict_proba, save_checkpoint, train
from .metrics import Scores, evaluate
from .synthetic import SyntheticSpec, gen_synthetic

log = logging.getLogger(__name__)

DISPLAY_NAMES = {
    "jpeg": "Jpeg",
    "zero_mean_gaussian": "Zero-Mean",
    "additive_gaussian": "Additive",
    "poisson": "Poisson",
    "salt_pepper": "Salt&Pepper",
    "stripe": "Stripe",
    "deadline": "Deadline",
    "blur": "Blur",
    "fog": "Fog",
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentPlan:
    degradations: list[DegradationSpec]
    output_dir: Path
    sstc: dict = field(default_factory=dict)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    dataset: str | None = None  # directory with cube.hsi / labels.lbl
    synthetic: SyntheticSpec | None = None
    train_fraction: float = 0.2
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        if not self.degradations:
            raise ConfigError("experiment plan needs at least one degradation")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("plan needs exactly one of 'dataset' or 'synthetic'")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        self.output_dir = Path(self.output_dir)

    @classmethod
    def from_json(cls, doc: dict, base: Path | None = None) -> ExperimentPlan:
        doc = dict(doc)
        try:
            degs = [DegradationSpec(d["type"], d.get("params", {}), int(d.get("seed", doc.get("seed", 0)))) for d in doc.pop("degradations")]
            synthetic = doc.pop("synthetic", None)
            adapt = doc.pop("adapt", {})
            out = Path(doc.pop("output_dir"))
        except KeyError as exc:
            raise ConfigError(f"plan is missing {exc}") from None
        if base is not None and not out.is_absolute():
            out = base / out
        dataset = doc.pop("dataset", None)
        if dataset is not None and base is not None and not Path(dataset).is_absolute():
            dataset = str(base / dataset)
        known = {"sstc", "train_fraction", "seed", "repeats"}
        if set(doc) - known:
            raise ConfigError(f"unknown plan keys {sorted(set(doc) - known)}")
        return cls(
            degradations=degs,
            output_dir=out,
            adapt=AdaptConfig(**adapt),
            dataset=dataset,
            synthetic=SyntheticSpec(**synthetic) if synthetic is not None else None,
            **doc,
        )

    def to_json(self) -> dict:
        doc = {
            "degradations": [d.to_json() for d in self.degradations],
            "output_dir": str(self.output_dir),
            "sstc": dict(self.sstc),
            "adapt": self.adapt.to_json(),
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "repeats": self.repeats,
        }
        if self.dataset is not None:
            doc["dataset"] = self.dataset
        else:
            doc["synthetic"] = self.synthetic.to_json()
        return doc


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        inner.__name__ = fn.__name__
        return inner

    return wrap


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("HYPERTTA_THREADS", "1")))
    except ValueError:
        return 1


def stream_order(target_pixels: np.ndarray, seed: int) -> np.ndarray:
    """Order in which target pixels are presented to the adapter."""
    return target_pixels[Stream(seed, "adapt.stream").permutation(target_pixels.size)]


def load_dataset(directory) -> tuple[HsiCube, LabelMap]:
    directory = Path(directory)
    cube = hio.read_cube(directory / "cube.hsi")
    labels = hio.read_labels(directory / "labels.lbl")
    labels.check_matches(cube)
    return cube, labels


def save_dataset(directory, cube: HsiCube, labels: LabelMap, split: SplitSpec | None = None):
    directory = Path(directory)
    hio.write_cube(cube, directory / "cube.hsi")
    hio.write_labels(labels, directory / "labels.lbl")
    if split is not None:
        hio.write_split(split, directory / "split.json")


@_stage("data")
def _prepare_data(plan: ExperimentPlan, seed: int, out: Path):
    if plan.synthetic is not None:
        spec = SyntheticSpec(**{**plan.synthetic.to_json(), "seed": plan.synthetic.seed + seed - plan.seed})
        cube, labels = gen_synthetic(spec)
    else:
        cube, labels = load_dataset(plan.dataset)
        if not cube.normalized:
            from ..hsi import normalize_bands

            cube, _ = normalize_bands(cube)
    split = stratified_split(labels, plan.train_fraction, seed)
    save_dataset(out / "data", cube, labels, split)
    # continue from the stored f32 cube so every later stage can be replayed from files
    return hio.read_cube(out / "data" / "cube.hsi"), labels, split


@_stage("train")
def _train(plan: ExperimentPlan, cube, labels, split, seed: int, out: Path):
    cfg = SstcConfig(**{"bands": cube.bands, "num_classes": labels.num_classes, "seed": seed, **plan.sstc})
    model = SstcModel(cfg)
    train_px = split.train_pixels()
    source = PatchSource(cube, train_px, cfg.patch_size)
    report = train(model, source, labels.labels.ravel()[train_px], cfg)
    save_checkpoint(model, out / "model.ckpt", {"train_report": report.to_json()})
    return model, report


def _branch(plan, spec: DegradationSpec, model: SstcModel, cube, labels, split, out: Path, adapt_cfg):
    name = spec.kind
    try:
        degraded, record, _ = degrade_and_record(cube, spec, out / "degraded" / f"{name}.meta.json")
        degraded = hio.read_cube(hio.write_cube(degraded, out / "degraded" / f"{name}.hsi"))
    except Exception as exc:
        raise StageError(f"degrade:{name}", exc) from exc
    try:
        order = stream_order(split.target_pixels(), adapt_cfg.seed)
        source = PatchSource(degraded, order, model.config.patch_size)
        truth = labels.labels.ravel()[order]
        base = np.concatenate(
            [predict_proba(b, model).argmax(axis=1) + 1 for b in source.batches(256)]
        )
        unadapted = evaluate(base, truth, num_classes=labels.num_classes)
        hio.write_predictions(base, out / "preds" / f"{name}.unadapted.bin")
    except Exception as exc:
        raise StageError(f"evaluate:{name}", exc) from exc
    try:
        replica = model.copy()
        preds, report = run_adaptation(replica, source.batches(adapt_cfg.batch_size), adapt_cfg)
        adapted = evaluate(preds, truth, num_classes=labels.num_classes)
        hio.write_predictions(preds, out / "preds" / f"{name}.adapted.bin")
        doc = report.to_json()
        doc["stream_pixels"] = order.tolist()
        (out / "preds" / f"{name}.adapt_report.json").write_text(json.dumps(doc) + "\n")
    except Exception as exc:
        raise StageError(f"adapt:{name}", exc) from exc
    return unadapted, adapted


def run_once(plan: ExperimentPlan, seed: int, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "preds").mkdir(exist_ok=True)
    t0 = time.time()
    cube, labels, split = _prepare_data(plan, seed, out)
    model, train_report = _train(plan, cube, labels, split, seed, out)
    train_px = set(split.train_pixels().tolist())
    audit_overlap = len(train_px & set(split.target_pixels().tolist()))
    clean_order = split.target_pixels()
    clean_source = PatchSource(cube, clean_order, model.config.patch_size)
    clean_pred = np.concatenate([predict_proba(b, model).argmax(axis=1) + 1 for b in clean_source.batches(256)])
    clean = evaluate(clean_pred, labels, clean_order)

    adapt_cfg = plan.adapt
    jobs = [(spec, model.copy()) for spec in plan.degradations]
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        futures = [
            pool.submit(_branch, plan, spec, m, cube, labels, split, out, adapt_cfg) for spec, m in jobs
        ]
        results = [f.result() for f in futures]
    rows = []
    for spec, (unadapted, adapted) in zip(plan.degradations, results):
        rows.append({"spec": spec, "unadapted": unadapted, "adapted": adapted})
    summary = {
        "seed": seed,
        "clean": clean.as_percent(),
        "train_final_loss": train_report.epoch_loss[-1],
        "train_final_accuracy": train_report.epoch_accuracy[-1],
        "model_digest": train_report.digest,
        "split_audit": {
            "train_pixels": len(train_px),
            "target_pixels": int(clean_order.size),
            "overlap": audit_overlap,
            "evaluated_on": "target",
        },
    }
    # wall time goes to the log only, so summary.json stays byte-reproducible
    log.info("run seed %d finished in %.1f s", seed, time.time() - t0)
    return {"rows": rows, "summary": summary}


CSV_FIELDS = [
    "type",
    "params",
    "oa_unadapted",
    "aa_unadapted",
    "kappa_unadapted",
    "oa_adapted",
    "aa_adapted",
    "kappa_adapted",
    "delta_oa",
]


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def results_csv(runs: list[dict]) -> str:
    """Per-degradation rows (percent), averaged over repeats; adds *_range columns if repeats > 1."""
    buf = io.StringIO()
    fields = list(CSV_FIELDS)
    if len(runs) > 1:
        fields += ["oa_unadapted_range", "oa_adapted_range", "delta_oa_range"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for i, row in enumerate(runs[0]["rows"]):
        spec = row["spec"]
        per = [r["rows"][i] for r in runs]
        u = np.array([[p["unadapted"].oa, p["unadapted"].aa, p["unadapted"].kappa] for p in per]) * 100
        a = np.array([[p["adapted"].oa, p["adapted"].aa, p["adapted"].kappa] for p in per]) * 100
        d = a[:, 0] - u[:, 0]
        line = [spec.kind, json.dumps(spec.params, sort_keys=True)]
        line += [_fmt(v) for v in u.mean(axis=0)] + [_fmt(v) for v in a.mean(axis=0)] + [_fmt(d.mean())]
        if len(runs) > 1:
            line += [_fmt(np.ptp(u[:, 0])), _fmt(np.ptp(a[:, 0])), _fmt(np.ptp(d))]
        writer.writerow(line)
    return buf.getvalue()


def results_markdown(csv_text: str) -> str:
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    names = [DISPLAY_NAMES.get(r["type"], r["type"]) for r in rows]
    header = "| Method | Metric | " + " | ".join(names) + " | Avg. |"
    sep = "|" + "---|" * (len(names) + 3)
    lines = [header, sep]
    for method, suffix in (("Unadapted", "unadapted"), ("CELA", "adapted")):
        for label, key in (("OA (%)", "oa"), ("AA (%)", "aa"), ("Kappa×100", "kappa")):
            vals = [float(r[f"{key}_{suffix}"]) for r in rows]
            cells = [f"{v:.2f}" for v in vals] + [f"{np.mean(vals):.2f}"]
            lines.append(f"| {method} | {label} | " + " | ".join(cells) + " |")
    deltas = [float(r["delta_oa"]) for r in rows]
    lines.append("| Δ | OA (pts) | " + " | ".join(f"{v:+.2f}" for v in deltas) + f" | {np.mean(deltas):+.2f} |")
    return "\n".join(lines) + "\n"


def run_experiment(plan: ExperimentPlan) -> dict:
    """Run every repeat of the plan and write results.csv / results.md / summary.json."""
    out = plan.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.to_json(), indent=2) + "\n")
    runs = []
    for r in range(plan.repeats):
        seed = plan.seed + r
        run_dir = out if plan.repeats == 1 else out / f"run{r}"
        runs.append(run_once(plan, seed, run_dir))
    text = results_csv(runs)
    (out / "results.csv").write_text(text)
    (out / "results.md").write_text(results_markdown(text))
    summary = {"runs": [r["summary"] for r in runs], "plan_seed": plan.seed, "repeats": plan.repeats}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"csv": text, "runs": runs, "summary": summary}


def acceptance_plan(output_dir, seed: int = 0) -> ExperimentPlan:
    """Scaled-down benchmark: 96x96x32 synthetic scene, K=5, PU-valued degradations
    with stripe/deadline counts scaled to the image width."""
    from ..degrade import benchmark_specs

    specs = []
    for s in benchmark_specs("PU", seed):
        if s.kind in ("stripe", "deadline"):
            s = DegradationSpec(s.kind, {"a": 8, "b": 11}, seed)
        specs.append(s)
    return ExperimentPlan(
        degradations=specs,
        output_dir=output_dir,
        # noise 0.3 keeps clean accuracy high while leaving degradations room to hurt
        synthetic=SyntheticSpec(height=96, width=96, bands=32, classes=5, noise_scale=0.3, seed=seed),
        adapt=AdaptConfig(tau=0.8, top_fraction=0.3, lr=0.001, steps=1, batch_size=64, reset_mode="per_run", seed=seed),
        train_fraction=0.2,
        seed=seed,
    )
