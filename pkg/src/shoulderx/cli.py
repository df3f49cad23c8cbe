"""Command-line front end.

Exit codes: 0 success, 1 compute/I-O failure, 2 invalid input or usage.
Every output file is written to a temp name and renamed into place.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from shoulderx import ensemble, heads, metrics, preprocess
from shoulderx._io import atomic_write_text
from shoulderx.data import (
    DataError,
    FeatureTable,
    load_feature_table,
    load_manifest,
    load_prediction_table,
    validate_manifest,
    write_feature_table,
    write_prediction_table,
)
from shoulderx.nn import TrainConfig

log = logging.getLogger("shoulderx")

SEED_ENV = "SHOULDERX_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _tile_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile grid must look like 8x8, got {text!r}") from None
    if r <= 0 or c <= 0:
        raise argparse.ArgumentTypeError("tile grid entries must be positive")
    return r, c


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
    return v


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lr", type=_positive_float, default=d.lr0, help="initial learning rate")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--decay-every", type=int, default=d.decay_every, help="epochs between x0.1 LR drops")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--history", type=Path, help="write per-epoch losses as CSV")


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(lr0=args.lr, epochs=args.epochs, decay_every=args.decay_every,
                           batch_size=args.batch_size, seed=args.seed)
    except ValueError as e:
        raise DataError(str(e)) from None


def _write_history(path, history) -> None:
    if path:
        lines = ["epoch,loss"] + [f"{i},{loss:.17g}" for i, loss in enumerate(history)]
        atomic_write_text(path, "\n".join(lines) + "\n")


def _add_roles(p: argparse.ArgumentParser, required: bool = True) -> None:
    for k in range(1, 5):
        p.add_argument(f"--m{k}", type=Path, required=required, help=f"prediction file for model {k}")


def _load_roles(args):
    return [load_prediction_table(getattr(args, f"m{k}")) for k in range(1, 5)]


# -- image commands --------------------------------------------------------

def _list_pngs(in_dir: Path) -> list[Path]:
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    return sorted(p for p in in_dir.iterdir() if p.suffix.lower() == ".png")


def _variants(raw, stem: str, copies: int, seed: int, max_deg: float):
    yield stem, raw
    for k in range(1, copies + 1):
        rng = np.random.default_rng(preprocess.augmentation_seed(seed, f"{stem}#{k}"))
        angle = preprocess.sample_rotation_angle(rng, max_deg)
        yield f"{stem}_rot{k}", preprocess.rotate(raw, angle)


def _run_images(args, process):
    """Apply ``process(raw, stem) -> [(name, image, extra)]`` to every png.

    Returns the non-None extras (in input order) and the exit status.
    """
    files = _list_pngs(args.in_dir)
    args.out_dir.mkdir(parents=True, exist_ok=True)

    def work(path):
        try:
            outputs = process(preprocess.load_png(path), path.stem)
        except Exception as e:  # one bad file must not stop the batch
            return path, None, e
        return path, outputs, None

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(work, files))
    failures, written, collected = 0, 0, []
    for path, outputs, err in results:
        if err is not None:
            failures += 1
            print(f"FAILED {path.name}: {err}", file=sys.stderr)
            continue
        for name, img, extra in outputs:
            preprocess.save_png(img, args.out_dir / f"{name}.png")
            written += 1
            if extra is not None:
                collected.append((name, extra))
        log.info("%s -> %d output(s)", path.name, len(outputs))
    print(f"inputs: {len(files)}  outputs: {written}  failed: {failures}")
    return collected, (1 if failures else 0)


def cmd_preprocess(args) -> int:
    if args.tensors_out and args.label is None:
        raise DataError("--tensors-out needs --label")
    params = preprocess.ClaheParams(*args.tile_grid, args.clip_limit)

    def process(raw, stem):
        out = []
        for name, img in _variants(raw, stem, args.aug_copies, args.seed, args.max_angle):
            pre = preprocess.preprocess_image(img, params, args.margin)
            tensor = preprocess.normalize_imagenet(pre).reshape(-1) if args.tensors_out else None
            out.append((name, pre, tensor))
        return out

    collected, status = _run_images(args, process)
    if args.tensors_out:
        ids = tuple(name for name, _ in collected)
        feats = np.array([t for _, t in collected]).reshape(len(ids), -1)
        dim = 320 * 320 * 3
        write_feature_table(FeatureTable(dim, ids, np.full(len(ids), args.label), feats), args.tensors_out)
    return status


def cmd_augment(args) -> int:
    def process(raw, stem):
        return [(name, img, None) for name, img in
                _variants(raw, stem, args.aug_copies, args.seed, args.max_angle)]

    return _run_images(args, process)[1]


# -- training / prediction ---------------------------------------------------

def cmd_train_head(args) -> int:
    table = load_feature_table(args.features)
    width = args.width
    if args.kind == "spinal" and width is None:
        if args.backbone is None:
            raise DataError("spinal head needs --width or --backbone")
        if args.backbone not in heads.SPINAL_WIDTHS:
            raise DataError(f"unknown backbone {args.backbone!r}; known: {sorted(heads.SPINAL_WIDTHS)}")
        width = heads.SPINAL_WIDTHS[args.backbone]
    try:
        spec = heads.HeadSpec(args.kind, table.dim, width if args.kind == "spinal" else None)
    except ValueError as e:
        raise DataError(str(e)) from None
    result = heads.train_head(spec, table, _train_config(args))
    heads.save_head(result.model, args.out)
    _write_history(args.history, result.history)
    print(f"final loss: {result.history[-1]:.6f}  train accuracy: {heads.accuracy_on(result.model, table):.4f}")
    return 0


def cmd_predict(args) -> int:
    head = heads.load_head(args.head)
    table = load_feature_table(args.features)
    write_prediction_table(heads.predict_with_head(head, table), args.out)
    if args.features_out:
        write_feature_table(heads.penultimate_table(head, table), args.features_out)
    return 0


def cmd_el1_train(args) -> int:
    tables = [load_feature_table(p) for p in (args.f1, args.f2, args.f3)]
    result = ensemble.el1_train(tables, _train_config(args))
    ensemble.save_el1(result.model, args.out)
    _write_history(args.history, result.history)
    preds = ensemble.el1_predict(result.model, tables)
    print(f"final loss: {result.history[-1]:.6f}  train accuracy: {(preds.predicted == preds.labels).mean():.4f}")
    return 0


def _emit_report(preds, report_path) -> None:
    report = metrics.full_report(preds)
    sys.stdout.write(report.to_text())
    if report_path:
        atomic_write_text(report_path, report.to_text())


def cmd_el1_eval(args) -> int:
    model = ensemble.load_el1(args.model)
    tables = [load_feature_table(p) for p in (args.f1, args.f2, args.f3)]
    preds = ensemble.el1_predict(model, tables)
    write_prediction_table(preds, args.out)
    _emit_report(preds, args.report)
    return 0


def cmd_subensemble_train(args) -> int:
    result = ensemble.subensemble_train(_load_roles(args), _train_config(args), args.input_mode)
    ensemble.save_subensemble(result.model, args.out)
    _write_history(args.history, result.history)
    print(f"final loss: {result.history[-1]:.6f}")
    return 0


def cmd_subensemble_predict(args) -> int:
    model = ensemble.load_subensemble(args.model)
    write_prediction_table(ensemble.subensemble_predict(model, _load_roles(args)), args.out)
    return 0


def cmd_el2(args) -> int:
    if args.spec:
        spec = ensemble.load_el2_spec(args.spec)
    else:
        missing = [f"--m{k}" for k in range(1, 5) if getattr(args, f"m{k}") is None]
        if missing:
            raise DataError(f"el2 needs --spec or all of --m1..--m4 (missing {' '.join(missing)})")
        spec = ensemble.EL2Spec(*(str(getattr(args, f"m{k}")) for k in range(1, 5)))
    tables = [load_prediction_table(p) for p in spec.sources]
    preds = ensemble.el2_evaluate(tables)
    write_prediction_table(preds, args.out)
    _emit_report(preds, args.report)
    return 0


# -- evaluation --------------------------------------------------------------

def cmd_metrics(args) -> int:
    preds = load_prediction_table(args.preds)
    report = metrics.full_report(preds)
    sys.stdout.write(report.to_text())
    if args.out:
        atomic_write_text(args.out, report.to_text())
    if args.json:
        atomic_write_text(args.json, report.to_json())
    return 0


def cmd_roc(args) -> int:
    preds = load_prediction_table(args.preds)
    scores = preds.scores.astype(np.float64)
    curves = {
        "Class 0": metrics.roc_curve(scores[:, 0], preds.labels, 0),
        "Class 1": metrics.roc_curve(scores[:, 1], preds.labels, 1),
    }
    prefix = str(args.csv_prefix)
    for k, curve in enumerate(curves.values()):
        metrics.write_roc_csv(curve, f"{prefix}_class{k}.csv")
    if args.svg:
        atomic_write_text(args.svg, metrics.roc_svg(curves, args.title))
    for name, curve in curves.items():
        print(f"{name} AUC: {metrics.auc(curve):.4f}")
    return 0


def cmd_validate_manifest(args) -> int:
    manifest = load_manifest(args.manifest)
    table = load_feature_table(args.features) if args.features else load_prediction_table(args.preds)
    report = validate_manifest(manifest, table)
    print(report)
    return 0 if report.passed else 2


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shoulderx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", type=Path, help="JSON file of option defaults (flags win)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def image_flags(p, aug_default):
        p.add_argument("in_dir", type=Path)
        p.add_argument("out_dir", type=Path)
        p.add_argument("--aug-copies", type=int, default=aug_default, help="rotated copies per image")
        p.add_argument("--max-angle", type=float, default=preprocess.MAX_ROTATION_DEG)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("preprocess", help="crop, CLAHE, resize (and optionally augment) png images")
    image_flags(p, 0)
    p.add_argument("--clip-limit", type=_positive_float, default=2.0, help="CLAHE clip limit ('inf' disables)")
    p.add_argument("--tile-grid", type=_tile_grid, default=(8, 8), metavar="RxC")
    p.add_argument("--margin", type=int, default=2, help="crop margin in pixels")
    p.add_argument("--tensors-out", type=Path, help="also export normalised tensors as a feature CSV")
    p.add_argument("--label", type=int, choices=(0, 1), help="label for exported tensors")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="write originals plus rotated copies")
    image_flags(p, 1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-head", help="train a standard or spinal FC head on a feature file")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--kind", choices=("standard", "spinal"), required=True)
    p.add_argument("--width", type=int, help="spinal layer width")
    p.add_argument("--backbone", help="take the spinal width from this backbone's table entry")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict", help="score a feature file with a trained head")
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--features-out", type=Path, help="write penultimate activations as a feature file")
    p.set_defaults(func=cmd_predict)

    for name, helptext in (("el1-train", "train the EL1 classifier"), ("el1-eval", "apply an EL1 model")):
        p = sub.add_parser(name, help=helptext)
        for k, dim in zip((1, 2, 3), ensemble.EL1_PROVIDER_DIMS):
            p.add_argument(f"--f{k}", type=Path, required=True, help=f"provider {k} features (dim {dim})")
        p.add_argument("--out", type=Path, required=True)
        if name == "el1-train":
            _add_train_flags(p)
            p.set_defaults(func=cmd_el1_train)
        else:
            p.add_argument("--model", type=Path, required=True)
            p.add_argument("--report", type=Path)
            p.set_defaults(func=cmd_el1_eval)

    p = sub.add_parser("subensemble-train", help="train the 8 -> 2 sub-ensemble")
    _add_roles(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--input-mode", choices=ensemble.INPUT_MODES, default="probabilities")
    _add_train_flags(p)
    p.set_defaults(func=cmd_subensemble_train)

    p = sub.add_parser("subensemble-predict", help="apply a trained sub-ensemble")
    _add_roles(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_subensemble_predict)

    p = sub.add_parser("el2", aliases=["ensemble-el2"], help="rule-based EL2 over four prediction files")
    _add_roles(p, required=False)
    p.add_argument("--spec", type=Path, help="file naming m1..m4 prediction files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_el2)

    p = sub.add_parser("metrics", help="print the metrics report of a prediction file")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the text report here")
    p.add_argument("--json", type=Path, help="write a JSON report")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("roc", help="per-class ROC curves as CSV and SVG")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--csv-prefix", type=Path, required=True)
    p.add_argument("--svg", type=Path)
    p.add_argument("--title", default="ROC")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("validate-manifest", help="check class counts against a dataset manifest")
    p.add_argument("--manifest", type=Path, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--features", type=Path)
    g.add_argument("--preds", type=Path)
    p.set_defaults(func=cmd_validate_manifest)
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        parser.error(f"cannot read config {args.config}: {e}")
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    # settings may be global or nested under the command name
    merged = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    merged.update(cfg.get(args.command, {}))
    merged = {k.replace("-", "_"): v for k, v in merged.items()}
    if "tile_grid" in merged and isinstance(merged["tile_grid"], str):
        merged["tile_grid"] = _tile_grid(merged["tile_grid"])
    path_keys = {a.dest for a in _subparser(parser, args.command)._actions if a.type is Path}
    merged = {k: Path(v) if k in path_keys and v is not None else v for k, v in merged.items()}
    _subparser(parser, args.command).set_defaults(**merged)
    return parser.parse_args(argv)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
