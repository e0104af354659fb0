"""Command-line entry point.

    scaler gen-data     --out DIR [--n 160 --n-test 64 --contrast 0.2 --seed 0 --aux-distribution]
    scaler train        --config FILE --data DIR --out DIR [--resume CHECKPOINT]
    scaler eval         --checkpoint DIR --data DIR --model student|teacher|generalist
    scaler ablate       --config FILE --data DIR --out DIR --axes no-phase2,no-plf,...
    scaler refine-masks --masks DIR [--masks DIR] --op entropy|uncertainty|trust|fuse|consensus --out DIR

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric failure, 5 artifact mismatch.

Run configs are flat ``key = value`` files with ``#`` comments. Keys are the
TrainConfig field names, SceneSpec fields prefixed with ``scene_``, and
``oracle_flip_rate`` (replace the generalist with boundary-flipped ground truth).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pseudolabel
from .autodiff import FormatError, GraphError, NonFiniteError, ShapeError
from .models import ModelBundle
from .oracles import noisy_generalist
from .synthdata import (DataError, SceneSpec, SplitManifest, make_dataset, make_split, read_array,
                        read_dataset, write_array, write_dataset)
from .trainer import TrainConfig, Trainer, evaluate_model

log = logging.getLogger("scaler")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5
MODELS = ("student", "teacher", "generalist")
METRIC_KEYS = ("mae", "f_beta", "e_phi", "s_alpha")

# axis name -> TrainConfig override
AXES = {
    "no-plf": {"use_plf": False},
    "no-entropy-weight": {"use_entropy_weight": False},
    "no-uncertainty-weight": {"use_uncertainty_weight": False},
    "no-phase2": {"use_phase2": False},
    "lai-weak-weak": {"lai_weak_weak": True},
    "lnr-with-refine": {"lnr_with_refine": True},
    "no-stage1": {"use_stage1": False},
    "no-stage2": {"use_stage2": False},
    "trust-from-plf": {"trust_from_plf": True},
}
AUX_CONTRAST = (0.6, 1.0)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: dict = field(default_factory=dict)      # only the scene_ keys given explicitly
    oracle_flip_rate: float | None = None

    def echo(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in asdict(self.train).items()]
        lines += [f"scene_{k} = {_fmt(v)}" for k, v in self.scene.items()]
        lines.append(f"oracle_flip_rate = {_fmt(self.oracle_flip_rate)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text: str, default):
    """Parse ``text`` to the type of ``default`` (None defaults parse as float)."""
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(t)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in t.split(",") if p.strip())
        if default is None:
            return None if t.lower() == "none" else float(t)
        return type(default)(t)
    except ValueError:
        raise CliError(EXIT_USAGE, f"config key {key!r}: cannot parse {text!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    train_defaults = asdict(TrainConfig())
    scene_defaults = asdict(SceneSpec())
    train, scene, flip = {}, {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_USAGE, f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in train_defaults:
            train[key] = _coerce(key, value, train_defaults[key])
        elif key.startswith("scene_") and key[6:] in scene_defaults:
            scene[key[6:]] = _coerce(key, value, scene_defaults[key[6:]])
        elif key == "oracle_flip_rate":
            flip = _coerce(key, value, None)
        else:
            raise CliError(EXIT_USAGE, f"{source}:{lineno}: unknown config key {key!r}")
    try:
        cfg = TrainConfig(**train)
        SceneSpec(**scene)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"{source}: {exc}") from None
    if flip is not None and not 0.0 <= flip <= 1.0:
        raise CliError(EXIT_USAGE, f"{source}: oracle_flip_rate must lie in [0, 1]")
    return RunConfig(cfg, scene, flip)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    return parse_config(text, path)


# ------------------------------------------------------------------ helpers

def _read_data(path: str):
    try:
        return read_dataset(path)
    except DataError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset: {exc}") from None


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _check_scene(run: RunConfig, manifest: SplitManifest) -> None:
    recorded = manifest.extra.get("scene")
    if recorded is None:
        return
    for k, v in run.scene.items():
        have = recorded.get(k)
        if isinstance(have, list):
            have = tuple(have)
        if have != v:
            raise CliError(EXIT_MISMATCH, f"config scene_{k} = {_fmt(v)} but dataset was "
                                          f"generated with {_fmt(have)}")


def train_manifest(cfg: TrainConfig, manifest: SplitManifest) -> SplitManifest:
    """Training split; semi mode draws its labeled subset from ``cfg.labeled_fraction``."""
    labeled = list(manifest.labeled)
    if cfg.mode == "semi":
        sub = make_split(len(manifest.ids), cfg.labeled_fraction,
                         np.random.default_rng([cfg.seed, 1]))
        labeled = [manifest.ids[i] for i in sub.labeled]
    return SplitManifest(list(manifest.ids), labeled, cfg.labeled_fraction, [], manifest.mode,
                         dict(manifest.extra))


def split_reports(bundle: ModelBundle, samples, manifest: SplitManifest, mode: str) -> dict:
    out = {}
    for split, ids in (("train", manifest.ids), ("test", manifest.test_ids)):
        if ids:
            out[split] = {m: evaluate_model(bundle, samples, list(ids), m, mode) for m in MODELS}
    return out


def run_training(run: RunConfig, samples, manifest: SplitManifest, out: Path,
                 resume: str | None = None) -> dict:
    """Train into ``out`` and return the metrics document written to metrics.json."""
    cfg = run.train
    if cfg.mode == "weak" and manifest.mode != cfg.annotation:
        raise CliError(EXIT_MISMATCH, f"config annotation={cfg.annotation} but dataset "
                                      f"carries {manifest.mode} annotations")
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.txt", run.echo())
    oracle = None
    if run.oracle_flip_rate is not None:
        oracle = noisy_generalist(samples, run.oracle_flip_rate, cfg.seed)
    man = train_manifest(cfg, manifest)
    trainer = None
    try:
        if resume is not None:
            trainer = Trainer.resume(resume, cfg, samples, man, out_dir=out, oracle=oracle)
        else:
            (out / "train_log.jsonl").unlink(missing_ok=True)
            if (out / "checkpoints").exists():
                shutil.rmtree(out / "checkpoints")
            trainer = Trainer(cfg, samples, man, out_dir=out, oracle=oracle)
        bundle = trainer.run()
    except NonFiniteError as exc:
        step = trainer.state.step if trainer is not None else 0
        with open(out / "train_log.jsonl", "a") as fh:
            fh.write(json.dumps({"step": step, "error": str(exc)}, sort_keys=True) + "\n")
        raise CliError(EXIT_NUMERIC, f"numeric failure at step {step}: {exc}") from None
    except (FormatError, ShapeError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint mismatch: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None

    full = SplitManifest(list(manifest.ids), man.labeled, man.labeled_fraction,
                         list(manifest.test_ids))
    reports = split_reports(bundle, samples, full, cfg.mode)
    doc = {split: {m: r.means for m, r in per.items()} for split, per in reports.items()}
    # generalist quality before the alternation, for the bi-directional comparison
    stage1 = out / "checkpoints" / "stage1"
    if stage1.exists() and manifest.test_ids:
        b1 = ModelBundle.load(stage1)
        doc["stage1"] = {m: evaluate_model(b1, samples, list(manifest.test_ids), m, cfg.mode).means
                         for m in MODELS}
    for split, per in reports.items():
        for m, r in per.items():
            _atomic_write(out / f"report_{split}_{m}.csv", r.to_csv())
    _atomic_write(out / "metrics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.n < 1 or args.n_test < 0:
        raise CliError(EXIT_USAGE, "--n must be >= 1 and --n-test >= 0")
    try:
        spec = SceneSpec(size=args.size, contrast=args.contrast, seed=args.seed)
        samples, manifest = make_dataset(spec, args.n, args.n_test, args.annotation,
                                         contrast_range=AUX_CONTRAST if args.aux_distribution else None)
    except DataError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    try:
        write_dataset(args.out, samples, manifest)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    samples, manifest = _read_data(args.data)
    _check_scene(run, manifest)
    doc = run_training(run, samples, manifest, Path(args.out), args.resume)
    print(json.dumps(doc.get("test", doc.get("train")), indent=2, sort_keys=True))
    return EXIT_OK


def _load_checkpoint(path: str) -> tuple[ModelBundle, dict]:
    d = Path(path)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"checkpoint directory {d} not found")
    try:
        bundle = ModelBundle.load(d)
    except (FormatError, ShapeError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint mismatch in {d}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_MISMATCH, f"incomplete checkpoint {d}: {exc}") from None
    cfg = {}
    if (d / "config.json").exists():
        cfg = json.loads((d / "config.json").read_text())
    return bundle, cfg


def cmd_eval(args) -> int:
    bundle, cfg = _load_checkpoint(args.checkpoint)
    samples, manifest = _read_data(args.data)
    ids = {"test": manifest.test_ids, "train": manifest.ids,
           "all": list(manifest.ids) + list(manifest.test_ids)}[args.split]
    if not ids:
        raise CliError(EXIT_USAGE, f"dataset has no {args.split} samples")
    try:
        report = evaluate_model(bundle, samples, list(ids), args.model, cfg.get("mode", "weak"))
    except (ShapeError, GraphError) as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint does not fit the data: {exc}") from None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / f"report_{args.model}.json", report.to_json())
        _atomic_write(out / f"report_{args.model}.csv", report.to_csv())
    print(json.dumps({"model": args.model, "split": args.split, "n": len(ids), "mean": report.means},
                     indent=2, sort_keys=True))
    return EXIT_OK


TABLE_COLUMNS = ("run",) + METRIC_KEYS + ("generalist_mae",) + tuple(
    f"d_{k}" for k in METRIC_KEYS + ("generalist_mae",))


def ablation_table(results: dict[str, dict]) -> str:
    """CSV of test-split student metrics; d_* columns are (run - full)."""
    def row_values(doc):
        split = doc.get("test") or doc["train"]
        return [split["student"][k] for k in METRIC_KEYS] + [split["generalist"]["mae"]]

    base = row_values(results["full"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, doc in results.items():
        vals = row_values(doc)
        w.writerow([name] + [repr(v) for v in vals] + [repr(v - b) for v, b in zip(vals, base)])
    return buf.getvalue()


def parse_axes(text: str) -> list[str]:
    axes = [a.strip() for a in text.split(",") if a.strip()]
    unknown = [a for a in axes if a not in AXES]
    if unknown or not axes:
        raise CliError(EXIT_USAGE, f"unknown axis {unknown[0]!r}; choose from {', '.join(AXES)}"
                       if unknown else "--axes is empty")
    return list(dict.fromkeys(axes))


def cmd_ablate(args) -> int:
    axes = parse_axes(args.axes)
    run = load_config(args.config)
    samples, manifest = _read_data(args.data)
    _check_scene(run, manifest)
    out = Path(args.out)
    results = {"full": run_training(run, samples, manifest, out / "full")}
    for axis in axes:
        variant = replace(run, train=replace(run.train, **AXES[axis]))
        results[axis] = run_training(variant, samples, manifest, out / axis)
    table = ablation_table(results)
    _atomic_write(out / "table.csv", table)
    sys.stdout.write(table)
    return EXIT_OK


REFINE_OPS = ("entropy", "uncertainty", "trust", "fuse", "consensus")


def _read_masks(directory: str) -> dict[str, np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"mask directory {d} not found")
    out = {}
    for p in sorted(d.glob("*.bin")):
        try:
            out[p.name] = read_array(p)
        except (DataError, OSError) as exc:
            raise CliError(EXIT_IO, f"malformed mask file {p}: {exc}") from None
    if not out:
        raise CliError(EXIT_IO, f"no .bin masks in {d}")
    return out


def cmd_refine_masks(args) -> int:
    dirs = args.masks
    if args.op == "consensus" and len(dirs) != 2:
        raise CliError(EXIT_USAGE, f"consensus needs exactly two --masks directories, got {len(dirs)}")
    if args.op in ("entropy", "uncertainty", "trust") and len(dirs) != 1:
        raise CliError(EXIT_USAGE, f"{args.op} takes a single --masks directory")
    sets = [_read_masks(d) for d in dirs]
    names = sorted(sets[0])
    for d, s in zip(dirs[1:], sets[1:]):
        if sorted(s) != names:
            raise CliError(EXIT_MISMATCH, f"{d} does not hold the same mask files as {dirs[0]}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for name in names:
            arrays = [s[name] for s in sets]
            if any(a.shape != arrays[0].shape for a in arrays):
                raise CliError(EXIT_MISMATCH, f"{name}: mask shapes differ across directories")
            if args.op == "entropy":
                rows.append((name, pseudolabel.entropy(arrays[0])))
                continue
            if args.op == "uncertainty":
                res = pseudolabel.uncertainty(arrays[0])
            elif args.op == "trust":
                res = pseudolabel.trust_mask(arrays[0])
            elif args.op == "consensus":
                res = pseudolabel.consensus(*arrays)
            else:
                # masks already in a common frame: the fused label is their pixel mean
                res = np.clip(np.mean(arrays, axis=0), 0.0, 1.0)
            write_array(out / name, res)
        if args.op == "entropy":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("mask", "entropy"))
            w.writerows((n, repr(v)) for n, v in rows)
            _atomic_write(out / "entropy.csv", buf.getvalue())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}") from None
    except ShapeError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    print(f"{args.op}: {len(names)} mask(s) -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaler", description="Desk-scale collaborative segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic concealed-object dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=160, help="training samples")
    g.add_argument("--n-test", type=int, default=64)
    g.add_argument("--contrast", type=float, default=SceneSpec().contrast)
    g.add_argument("--size", type=int, default=SceneSpec().size)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--annotation", choices=("point", "scribble"), default="point")
    g.add_argument("--aux-distribution", action="store_true",
                   help=f"draw each sample's contrast from U{AUX_CONTRAST}")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run stages 1-3 and write metrics.json")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate one model of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--model", choices=MODELS, default="student")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="full run plus one run per ablation axis")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--axes", required=True, help=f"comma list from: {', '.join(AXES)}")
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("refine-masks", help="weighting and fusion ops on mask files")
    r.add_argument("--masks", action="append", required=True, help="mask directory (repeatable)")
    r.add_argument("--op", choices=REFINE_OPS, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_refine_masks)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"scaler {args.command}: {exc}", file=sys.stderr)
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
