"""Command-line entry point: ``sbssl {synth,pretrain,finetune,eval,attn}``.

Every subcommand reads an optional JSON run config (``--config``), applies
``SBSSL_SEED`` and flag overrides, writes the resolved config next to its
outputs, and exits with 0 on success, 2 on a config error, 3 on a data error
and 4 when training produced a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import CheckpointError
from .corruption import CorruptionError, corrupt_batch
from .data import DataError, NpyFormatError, generate_synthetic, load_split, read_npy, write_dataset
from .finetune import (
    ArchitectureMismatch, ensemble_predict_many, finetune, load_model, save_model, write_predictions,
)
from .metrics import attention_map, render_overlay, roc_auc, threshold_metrics, write_roc_csv
from .pretrain import (
    NumericError, load_pretrain_checkpoint, pretrain, reconstruct, save_pretrain_checkpoint, write_loss_csv,
)

log = logging.getLogger("sbssl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_NAME = "config.json"
ENSEMBLE_MANIFEST = "ensemble.json"


class UsageError(Exception):
    """Bad invocation; reported as a config error."""


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- synth --------------------------------------------------------------------

def cmd_synth(cfg, args):
    spec = C.synth_spec(cfg)
    out = _prepare_out(args.out or cfg["data"]["root"], args.force)
    splits = generate_synthetic(spec)
    write_dataset(splits, out, cfg["data"]["plane"])
    C.dump(cfg, out / CONFIG_NAME)
    for name, vols in splits.items():
        pos = sum(v.label for v in vols)
        print(f"{name}: {len(vols)} exams ({pos} positive), slices {spec.f_min}-{spec.f_max}, "
              f"{spec.size}x{spec.size} -> {out / name / cfg['data']['plane']}")
    return EXIT_OK


# -- pretrain -----------------------------------------------------------------

def _triptych_png(path, clean, corrupted, recon, scale):
    """Rows of original | corrupted | reconstructed, grayscale, nearest-upscaled by ``scale``."""
    from PIL import Image

    rows = [np.concatenate([c, x, r], axis=1) for c, x, r in zip(clean, corrupted, recon)]
    grid = np.clip(np.concatenate(rows, axis=0), 0.0, 1.0)
    img = np.round(grid * 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path, format="PNG")


def _triptych_writer(cfg, enc_cfg, pcfg, pool, out):
    every = cfg["pretrain"]["triptych_every"]
    count = cfg["pretrain"]["triptych_count"]
    if every <= 0 or count <= 0:
        return None
    picks = [v.slices[v.num_slices // 2] for v in pool[:count]]
    images = np.stack(picks)[:, None].astype(enc_cfg.dtype)
    # one fixed corruption draw so successive triptychs are comparable
    corrupted, _, _ = corrupt_batch(images, pcfg.corruption, np.random.default_rng([cfg["seed"], 3]),
                                    enc_cfg.patch_size)
    scale = max(1, 128 // enc_cfg.image_size)

    def write(result, force=False):
        if not force and result.epoch % every:
            return
        from .tensor import no_grad

        with no_grad():
            recon = reconstruct(corrupted, result.encoder, result.decoder, pcfg.block_set(enc_cfg.depth)).data
        _triptych_png(out / f"triptych_epoch{result.epoch:04d}.png",
                      images[:, 0], corrupted[:, 0], recon[:, 0], scale)

    return write


def cmd_pretrain(cfg, args):
    enc_cfg = C.encoder_config(cfg)
    pcfg = C.pretrain_config(cfg)
    root = Path(cfg["data"]["root"])
    if not root.is_dir():
        raise DataError(f"dataset directory {root} not found")
    pool = load_split(root, cfg["data"]["train_split"], cfg["data"]["plane"])
    resume = None
    resume_path = args.resume or cfg["pretrain"]["resume"]
    out = _prepare_out(cfg["pretrain"]["out"], args.force or bool(resume_path))
    if resume_path:
        resume, meta = load_pretrain_checkpoint(resume_path, pcfg)
        if resume.encoder.config != enc_cfg:
            raise ArchitectureMismatch(f"checkpoint encoder {meta['encoder']} differs from model config")
    C.dump(cfg, out / CONFIG_NAME)
    triptych = _triptych_writer(cfg, enc_cfg, pcfg, pool, out)
    every = cfg["pretrain"]["checkpoint_every"]

    def on_epoch(result):
        if triptych:
            triptych(result)
        if every > 0 and result.epoch % every == 0:
            save_pretrain_checkpoint(out / "last.ckpt", result, cfg)
        write_loss_csv(out / "loss.csv", result.log)

    result = pretrain(pool, enc_cfg, pcfg, resume=resume, on_epoch=on_epoch)
    if triptych:
        triptych(result, force=True)
    save_pretrain_checkpoint(out / "pretrain.ckpt", result, cfg)
    save_pretrain_checkpoint(out / "last.ckpt", result, cfg)
    write_loss_csv(out / "loss.csv", result.log)
    if result.log:
        print(f"pretrained {result.epoch} epochs; loss {result.log[0]['mean_loss']:.5f} -> "
              f"{result.log[-1]['mean_loss']:.5f}; checkpoint {out / 'pretrain.ckpt'}")
    return EXIT_OK


# -- finetune -----------------------------------------------------------------

def _train_member(job):
    cfg, member, out = job
    enc_cfg = C.encoder_config(cfg)
    root, plane = Path(cfg["data"]["root"]), cfg["data"]["plane"]
    train = load_split(root, cfg["data"]["train_split"], plane)
    valid_dir = root / cfg["data"]["valid_split"]
    valid = load_split(root, cfg["data"]["valid_split"], plane) if valid_dir.exists() else []
    encoder = None
    if not cfg["finetune"]["scratch"]:
        encoder = load_pretrain_checkpoint(cfg["finetune"]["checkpoint"])[0].encoder
        if encoder.config != enc_cfg:
            encoder = _cast_or_reject(encoder, enc_cfg)
    res = finetune(train, valid, enc_cfg, C.finetune_config(cfg, member), encoder=encoder)
    path = out / f"member{member}.model"
    save_model(path, res.model, cfg, res.log)
    _write_metrics_csv(out / f"member{member}_metrics.csv", res.log)
    return str(path), res.log[-1] if res.log else {}


def _cast_or_reject(encoder, enc_cfg):
    from .encoder import with_dtype

    a = {k: v for k, v in encoder.config.to_dict().items() if k != "dtype"}
    b = {k: v for k, v in enc_cfg.to_dict().items() if k != "dtype"}
    if a != b:
        raise ArchitectureMismatch(
            f"checkpoint encoder {encoder.config.to_dict()} does not match model config {enc_cfg.to_dict()}"
        )
    return with_dtype(encoder, enc_cfg.dtype)


def _write_metrics_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_finetune(cfg, args):
    ft = cfg["finetune"]
    if not ft["scratch"] and not ft["checkpoint"]:
        raise UsageError("finetune needs --checkpoint (a pretraining checkpoint) or --scratch")
    if not ft["scratch"] and not Path(ft["checkpoint"]).exists():
        raise DataError(f"checkpoint {ft['checkpoint']} not found")
    if ft["ensemble"] < 1:
        raise UsageError("--ensemble must be at least 1")
    out = _prepare_out(ft["out"], args.force)
    C.dump(cfg, out / CONFIG_NAME)
    jobs = [(cfg, m, out) for m in range(ft["ensemble"])]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_train_member, jobs))
    else:
        results = [_train_member(j) for j in jobs]
    manifest = {"members": [Path(p).name for p, _ in results], "config": CONFIG_NAME}
    with open(out / ENSEMBLE_MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    for (p, last) in results:
        auc = last.get("val_auc")
        print(f"{Path(p).name}: final train loss {last.get('train_loss', float('nan')):.4f}"
              + (f", valid AUC {auc:.4f}" if auc is not None else ""))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def resolve_models(paths):
    """Model files, or ensemble manifests / run directories that list them."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            p = p / ENSEMBLE_MANIFEST
        if not p.exists():
            raise DataError(f"model file {p} not found")
        if p.suffix == ".json":
            with open(p) as fh:
                files.extend(p.parent / m for m in json.load(fh)["members"])
        else:
            files.append(p)
    for f in files:
        if not f.exists():
            raise DataError(f"model file {f} not found")
    return files


def cmd_eval(cfg, args):
    ev = cfg["eval"]
    if not ev["models"]:
        raise UsageError("eval needs at least one model (--models)")
    members = [load_model(f)[0] for f in resolve_models(ev["models"])]
    vols = load_split(cfg["data"]["root"], ev["split"], cfg["data"]["plane"])
    out = _prepare_out(ev["out"], args.force)
    C.dump(cfg, out / CONFIG_NAME)
    probs = ensemble_predict_many(members, vols)
    labels = [v.label for v in vols]
    write_predictions(out / "predictions.csv", [v.exam_id for v in vols], probs, labels)
    if any(y is None for y in labels):
        print(f"wrote predictions for {len(vols)} unlabelled exams")
        return EXIT_OK
    row = threshold_metrics(probs, labels, ev["threshold"])
    try:
        curve = roc_auc(probs, labels)
        row["auc"] = curve.auc
        write_roc_csv(out / "roc.csv", curve)
    except ValueError:
        row["auc"] = float("nan")
    row = {"members": len(members), "exams": len(vols), "threshold": ev["threshold"], **row}
    _write_metrics_csv(out / "metrics.csv", [row])
    print(f"{len(members)} model(s) on {len(vols)} exams: accuracy {row['accuracy']:.4f}, "
          f"AUC {row['auc']:.4f}, sensitivity {row['sensitivity']:.4f}, specificity {row['specificity']:.4f}")
    return EXIT_OK


# -- attn ---------------------------------------------------------------------

def pick_slice(num_slices, index=None, mid=False):
    if mid:
        return num_slices // 2
    if index is None:
        raise UsageError("give a slice index or --mid")
    if not 0 <= index < num_slices:
        raise UsageError(f"slice index {index} out of range for an exam with {num_slices} slices")
    return index


def cmd_attn(cfg, args):
    a = cfg["attn"]
    if not a["model"]:
        raise UsageError("attn needs --model")
    if not a["exam"]:
        raise UsageError("attn needs --exam (an exam id in the split, or an .npy path)")
    model_file = resolve_models([a["model"]])[0]
    model, _ = load_model(model_file)
    exam = Path(a["exam"])
    if exam.suffix != ".npy":
        exam = Path(cfg["data"]["root"]) / a["split"] / cfg["data"]["plane"] / f"{a['exam']}.npy"
    if not exam.exists():
        raise DataError(f"exam file {exam} not found")
    vol = read_npy(exam)
    s = pick_slice(vol.num_slices, a["slice"], a["mid"])
    image = vol.slices[s]
    amap = attention_map(model.encoder, image, a["layer"])
    out = _prepare_out(a["out"], args.force)
    C.dump(cfg, out / CONFIG_NAME)
    name = f"{vol.exam_id}_slice{s}_layer{amap.layer}"
    render_overlay(amap, image, out / f"{name}.png", alpha=a["alpha"])
    with open(out / f"{name}.json", "w") as fh:
        json.dump({"exam_id": vol.exam_id, "slice": s, "layer": amap.layer,
                   "normalisation": {"method": "min-max", "min": amap.vmin, "max": amap.vmax},
                   "grid": amap.grid.tolist()}, fh, indent=2)
        fh.write("\n")
    print(f"attention overlay for {vol.exam_id} slice {s} (layer {amap.layer}) -> {out / (name + '.png')}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "attn": cmd_attn}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set pretrain.epochs=20 (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--data", help="dataset root (data.root)")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel processes where safe (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="sbssl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic planted-band dataset")
    p.add_argument("--out", help="output root (default data.root)")

    p = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining")
    p.add_argument("--out", help="run directory (pretrain.out)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from a pretraining checkpoint")

    p = sub.add_parser("finetune", parents=[common], help="train the slice-based classifier")
    p.add_argument("--out", help="run directory (finetune.out)")
    p.add_argument("--epochs", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="pretraining checkpoint to start from")
    g.add_argument("--scratch", action="store_true", help="start from random initialisation")
    p.add_argument("--ensemble", type=int, help="number of members (finetune.ensemble)")

    p = sub.add_parser("eval", parents=[common], help="score models on a split")
    p.add_argument("--out", help="output directory (eval.out)")
    p.add_argument("--models", nargs="+", help="model files, ensemble manifests or finetune run directories")
    p.add_argument("--split", help="split name (eval.split)")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("attn", parents=[common], help="class-token attention overlay for one slice")
    p.add_argument("--out", help="output directory (attn.out)")
    p.add_argument("--model", help="model file or finetune run directory (first member)")
    p.add_argument("--exam", help="exam id within --split, or a path to an .npy file")
    p.add_argument("--split", help="split name (attn.split)")
    p.add_argument("--slice", type=int, dest="slice_index")
    p.add_argument("--mid", action="store_true", help="use slice floor(f/2)")
    p.add_argument("--layer", type=int, help="1-indexed block (default 10, or round(5L/6) when L < 10)")
    return ap


def _flag_overrides(args):
    o = [C.parse_override(s) for s in args.set]
    cmd = args.command
    if args.seed is not None:
        o.append(("seed", args.seed))
    if args.data:
        o.append(("data.root", args.data))
    if getattr(args, "out", None) and cmd != "synth":
        o.append((f"{cmd}.out", args.out))
    if getattr(args, "epochs", None) is not None:
        o.append((f"{cmd}.epochs", args.epochs))
    if cmd == "finetune":
        if args.checkpoint:
            o += [("finetune.checkpoint", args.checkpoint), ("finetune.scratch", False)]
        if args.scratch:
            o.append(("finetune.scratch", True))
        if args.ensemble is not None:
            o.append(("finetune.ensemble", args.ensemble))
    if cmd == "eval":
        if args.models:
            o.append(("eval.models", args.models))
        if args.split:
            o.append(("eval.split", args.split))
        if args.threshold is not None:
            o.append(("eval.threshold", args.threshold))
    if cmd == "attn":
        for flag, key in (("model", "model"), ("exam", "exam"), ("split", "split"),
                          ("slice_index", "slice"), ("layer", "layer")):
            if getattr(args, flag) is not None:
                o.append((f"attn.{key}", getattr(args, flag)))
        if args.mid:
            o.append(("attn.mid", True))
    return o


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        user = C.load(args.config) if args.config else {}
        cfg = C.resolve(user, _flag_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (C.ConfigError, UsageError, CorruptionError, ArchitectureMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NpyFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
