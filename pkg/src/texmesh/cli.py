"""Command-line entry point: ``texmesh {synth,fit-shapes,train,infer,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import DESK, Config, ConfigError, make_config, parse_text

log = logging.getLogger("texmesh")


def build_config(args) -> Config:
    values = dict(DESK) if args.preset == "desk" else {}
    if args.config:
        values.update(parse_text(Path(args.config).read_text()))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "occlusion_level", None) is not None:
        values["occlusion_level"] = args.occlusion_level
    return make_config(values)


def _classes(args):
    return [c.strip() for c in args.classes.split(",") if c.strip()] if args.classes else None


def _write_header(out: Path, cfg: Config, command: str) -> None:
    from .dataio import repro_header

    out.mkdir(parents=True, exist_ok=True)
    header = repro_header(cfg, cfg.seed)
    header["command"] = command
    header["config"] = cfg.to_dict()
    (out / f"{command}_run.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, cfg: Config) -> int:
    from .synth import synth_gen

    out = Path(args.out)
    _write_header(out, cfg, "synth")
    ds = synth_gen(cfg, cfg.seed, _classes(args), args.n_per_class, cfg.occlusion_level, out_dir=out)
    print(f"wrote {len(ds)} scenes to {out / 'manifest.jsonl'}")
    return 0


def _load_exemplars(root: Path, classes):
    from .mesh_io import read_obj

    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if classes and d.name not in classes:
            continue
        meshes = [read_obj(f) for f in sorted(d.glob("*.obj"))]
        if meshes:
            out[d.name] = meshes
    if not out:
        raise FileNotFoundError(f"no <class>/*.obj exemplars under {root}")
    return out


def cmd_fit_shapes(args, cfg: Config) -> int:
    from .geometry import build_template
    from .model import TexturedMeshModel, fit_class_geometry, save_model
    from .shapes import BUILTIN_CLASSES, class_exemplars

    out = Path(args.out)
    _write_header(out, cfg, "fit-shapes")
    classes = _classes(args)
    if args.exemplars:
        sets = _load_exemplars(Path(args.exemplars), classes)
    else:
        sets = {n: class_exemplars(n, cfg.template_level) for n in (classes or BUILTIN_CLASSES)}
    template = build_template(cfg.template_level)
    geos = []
    for name, meshes in sets.items():
        geo = fit_class_geometry(name, meshes, cfg, template)
        fit = geo.fit
        print(f"{name}: scale {np.round(geo.scale, 4).tolist()} distance "
              f"{[round(f, 4) for f in fit.final]} (baseline {[round(b, 4) for b in fit.baseline]})")
        geos.append(geo)
    save_model(out / "model.npz", TexturedMeshModel(cfg, geos))
    print(f"wrote {out / 'model.npz'}")
    return 0


def _load_images(records):
    from .dataio import read_png

    return np.stack([read_png(r.image)[..., :3] for r in records])


def cmd_train(args, cfg: Config) -> int:
    from .dataio import read_manifest, write_metrics_csv
    from .model import TexturedMeshModel, builtin_geometry, load_model, save_model
    from .training import Trainer, train_epoch

    out = Path(args.out)
    _write_header(out, cfg, "train")
    records = read_manifest(args.manifest)
    names = sorted({r.cls for r in records})
    if args.model:
        geo_model = load_model(args.model)
        geos = [g for g in geo_model.classes if g.name in names]
    else:
        geos = builtin_geometry(cfg, names)
    model = TexturedMeshModel(cfg, geos)
    model.init_appearance()
    trainer = Trainer(model, _load_images(records), records)
    rows = []
    for _ in range(cfg.epochs):
        row = train_epoch(trainer)
        rows.append(row)
        print(f"epoch {row['epoch']}: loss {row['loss']:.4f} pos {row['pos_sim']:.3f} neg {row['neg_sim']:.3f}",
              flush=True)
    write_metrics_csv(out / "train_metrics.csv", rows, ["epoch", "loss", "pos_sim", "neg_sim"])
    save_model(out / "model.npz", model)
    print(f"wrote {out / 'model.npz'}")
    return 0


def cmd_infer(args, cfg: Config) -> int:
    from .dataio import read_manifest, write_jsonl
    from .extractor import extract_features
    from .inference import export_results, predict_features
    from .model import load_model

    out = Path(args.out)
    model = load_model(args.model)
    _write_header(out, model.config, "infer")
    records = read_manifest(args.manifest)
    if args.limit:
        records = records[: args.limit]
    classes = _classes(args)
    idx = None
    if classes:
        unknown = [c for c in classes if c not in model.class_names]
        if unknown:
            raise ValueError(f"model has no classes {unknown}")
        idx = [model.class_names.index(c) for c in classes]
    model.extractor.eval()
    rows = []
    for r in records:
        F = extract_features(model.extractor, _load_images([r]))[0]
        pred = predict_features(F, model, idx)
        rec = export_results(pred, model, out, r.id)
        if idx is not None and len(idx) == 1:
            rec.pop("class_losses")
        rows.append(rec)
        print(f"{r.id}: {rec['class']} az {rec['azimuth']:.1f} el {rec['elevation']:.1f} "
              f"theta {rec['theta']:.1f} loss {rec['loss']:.4f}", flush=True)
    write_jsonl(out / "predictions.jsonl", rows)
    print(f"wrote {out / 'predictions.jsonl'}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    from .dataio import read_jsonl, read_manifest, read_mask, write_metrics_csv
    from .metrics import evaluate

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(args.manifest)
    pred_path = Path(args.predictions)
    preds = read_jsonl(pred_path)
    pred_masks, gt_masks = {}, {}
    for p in preds:
        if p.get("mask") and p.get("visible_mask"):
            pred_masks[str(p["id"])] = (read_mask(pred_path.parent / p["mask"]),
                                        read_mask(pred_path.parent / p["visible_mask"]))
    for r in manifest:
        if r.mask and r.visible_mask:
            gt_masks[r.id] = (read_mask(r.mask), read_mask(r.visible_mask))
    report = evaluate(preds, manifest, pred_masks, gt_masks)
    write_metrics_csv(out / "metrics.csv", report.rows(),
                      ["level", "n", "acc_pi_6", "acc_pi_18", "median_error", "amodal_iou", "visible_iou",
                       "visible_precision", "top1"])
    for row in report.rows():
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if report.missing:
        print(f"warning: {len(report.missing)} records without predictions", file=sys.stderr)
    return 0


COMMANDS = {"synth": cmd_synth, "fit-shapes": cmd_fit_shapes, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="base defaults before the config file (default: desk)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--classes", help="comma-separated class names")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="texmesh", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--occlusion-level", type=int, choices=range(4))
    s.add_argument("--n-per-class", type=int)
    s = sub.add_parser("fit-shapes", parents=[common], help="fit class shape spaces")
    s.add_argument("--exemplars", help="directory of <class>/*.obj exemplar meshes (default: built-in)")
    s = sub.add_parser("train", parents=[common], help="train textures and the feature extractor")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", help="model file holding fitted geometry (default: fit built-ins)")
    s = sub.add_parser("infer", parents=[common], help="predict class, pose and masks")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--limit", type=int, help="only the first N records")
    s = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--predictions", required=True)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import numba
    import torch

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    torch.set_num_threads(max(1, args.threads))
    numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
