"""Command-line entry point: ``autopaint <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .config import PRESETS, ConfigError, RunConfig
from .metrics import aggregate
from .model import compose, inpaint_forward


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line, machine-parsable
        raise CLIError(f"usage: {message}")


def _emit(path):
    print(f"wrote {path}")


def _load_config(args) -> RunConfig:
    if args.config in PRESETS:
        cfg = PRESETS[args.config]()
    else:
        cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _write_csv(path, rows: list[dict], columns: list[str]):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    _emit(path)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_json(path, doc):
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_fmt) + "\n")
    _emit(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    from .phantom import healthy_volume, tumoral_volume

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k in range(args.subjects):
        subject = args.seed * 1000 + k
        tumoral = args.kind == "tumoral" or (args.kind == "mixed" and k % 2 == 0)
        if tumoral:
            vol = tumoral_volume(subject, args.slices, args.radius, args.count, args.channels, args.size)
        else:
            vol = healthy_volume(subject, args.slices, args.channels, args.size)
        stem = out / f"subject{k:03d}"
        paths = {"image": f"{stem}_image.apvl", "ooi": f"{stem}_ooi.apvl", "truth": f"{stem}_truth.apvl"}
        fileio.write_volume(paths["image"], vol.image)
        fileio.write_mask(paths["ooi"], vol.ooi)
        fileio.write_mask(paths["truth"], vol.truth)
        for p in paths.values():
            _emit(p)
        manifest.append({"subject": subject, "tumoral": tumoral, **{k2: Path(v).name for k2, v in paths.items()}})
    _write_json(out / "manifest.json", manifest)


def cmd_train(args):
    from .experiments import train_from_config

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = None
    if args.data:
        data = np.concatenate([fileio.read_volume(p) for p in args.data])
    result = train_from_config(cfg, data=data, checkpoint_dir=out / "checkpoints" if cfg.train.checkpoint_every else None)
    fileio.save_checkpoint(out / "model.apck", result.model.state_dict())
    _emit(out / "model.apck")
    for p in result.checkpoints:
        _emit(p)
    if result.history:
        cols = list(result.history[0].keys())
        _write_csv(out / "history.csv", result.history, cols)
    cfg.save(out / "config.json")
    _emit(out / "config.json")


def _model(args, cfg: RunConfig | None, size: int):
    from .experiments import model_from_state

    state = fileio.load_checkpoint(args.model)
    slope = cfg.net.slope if cfg is not None else 0.2
    return model_from_state(state, size, slope)


def cmd_inpaint(args):
    cfg = _load_config(args) if args.config else None
    vol = fileio.read_volume(args.volume)
    mask = fileio.read_mask(args.mask)
    if mask.shape[0] != vol.shape[0] or mask.shape[2:] != vol.shape[2:]:
        raise CLIError(f"mask {mask.shape} does not match volume {vol.shape}")
    model = _model(args, cfg, vol.shape[-1])
    out = np.empty_like(vol)
    for i in range(0, vol.shape[0], 16):
        img, m = vol[i:i + 16], mask[i:i + 16, :1]
        raw = inpaint_forward(model, img, m)
        out[i:i + 16] = raw if args.raw else compose(raw, img, m)
    fileio.write_volume(args.out, out)
    _emit(args.out)


def _diag_rows(res):
    rows = []
    for d in res.diagnostics:
        best = d.top[0] if d.top else ((-1, -1), 0.0, 0.0, 0.0)
        rows.append({"slice": d.index, "candidates": d.n_candidates, "top_row": best[0][0], "top_col": best[0][1],
                     "top_intensity": best[1], "top_texture": best[2], "top_combined": best[3],
                     "dilation_step": d.dilation_step, "largest_cc": d.largest_cc, "cc_radius": d.cc_radius,
                     "passed": d.passed})
    return rows


DIAG_COLUMNS = ["slice", "candidates", "top_row", "top_col", "top_intensity", "top_texture", "top_combined",
                "dilation_step", "largest_cc", "cc_radius", "passed"]


def cmd_autopaint(args):
    from .experiments import make_extractor
    from .pipeline import autoinpaint_volume, threshold_sweep

    cfg = _load_config(args)
    vol = fileio.read_volume(args.volume)
    if args.ooi:
        ooi = fileio.read_mask(args.ooi)
    else:
        ooi = np.ones((vol.shape[0], 1) + vol.shape[2:], dtype=np.float32)
    model = _model(args, cfg, vol.shape[-1])
    params = cfg.pipeline.build()
    workers = args.workers if args.workers is not None else cfg.pipeline.workers
    res = autoinpaint_volume(model, vol, ooi, params, make_extractor(cfg), workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_volume(out / "output.apvl", res.output)
    _emit(out / "output.apvl")
    fileio.write_volume(out / "residual.apvl", res.residual[:, None])
    _emit(out / "residual.apvl")
    _write_csv(out / "diagnostics.csv", _diag_rows(res), DIAG_COLUMNS)
    report = {"slices": int(vol.shape[0]), "slices_inpainted": int(res.passed.sum()),
              "max_residual": float(res.residual.max())}
    if args.truth:
        gt = fileio.read_mask(args.truth)[:, 0]
        sw = threshold_sweep([res], [gt], params.thetas())
        report.update({"[dice]": float(sw.bracketed("dice")[0]), "[precision]": float(sw.bracketed("precision")[0]),
                       "[recall]": float(sw.bracketed("recall")[0]), "best_theta": float(sw.best_theta[0])})
    _write_json(out / "metrics.json", report)


def cmd_evaluate(args):
    from .pipeline import PipelineParams, threshold_sweep

    if len(args.residual) != len(args.truth):
        raise CLIError("need one --truth per --residual")
    params = _load_config(args).pipeline.build() if args.config else PipelineParams()
    residuals = [fileio.read_volume(p)[:, 0] for p in args.residual]
    truths = [fileio.read_mask(p)[:, 0] for p in args.truth]
    sw = threshold_sweep(residuals, truths, params.thetas())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s, path in enumerate(args.residual):
        rows.append({"subject": Path(path).name, "best_theta": float(sw.best_theta[s]),
                     "[dice]": sw.bracketed("dice")[s], "[precision]": sw.bracketed("precision")[s],
                     "[recall]": sw.bracketed("recall")[s], "dice": sw.fixed("dice")[s],
                     "precision": sw.fixed("precision")[s], "recall": sw.fixed("recall")[s]})
    cols = ["subject", "best_theta", "[dice]", "[precision]", "[recall]", "dice", "precision", "recall"]
    _write_csv(out / "evaluation.csv", rows, cols)
    summary = {"global_theta": sw.global_theta, "subjects": len(rows)}
    for m in ("dice", "precision", "recall"):
        for label, vals in ((f"[{m}]", sw.bracketed(m)), (m, sw.fixed(m))):
            rep = aggregate(vals)
            summary[label] = {"mean": rep.mean, "std": rep.std}
    _write_json(out / "evaluation.json", summary)


def cmd_sweep_loss(args):
    from .experiments import sweep_loss

    cfg = _load_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise CLIError("--values is empty")
    rows = sweep_loss(cfg, args.coefficient, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", rows, ["coefficient", "value", "mse", "psnr", "ssim", "best_epoch"])


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autopaint", description="Inpainting-based unsupervised tumor segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="write synthetic subject volumes")
    ph.add_argument("--subjects", type=int, default=5)
    ph.add_argument("--slices", type=int, default=10)
    ph.add_argument("--channels", type=int, default=2, choices=(1, 2))
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--kind", choices=("tumoral", "healthy", "mixed"), default="tumoral")
    ph.add_argument("--radius", type=float, default=4.0)
    ph.add_argument("--count", type=int, default=1)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train an inpainting network")
    tr.add_argument("--config", required=True, help="JSON file or preset name (desk, paper)")
    tr.add_argument("--data", nargs="*", help="healthy image volumes; default: phantom from config")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ip = sub.add_parser("inpaint", help="inpaint a volume under given hole masks")
    ip.add_argument("--config")
    ip.add_argument("--model", required=True)
    ip.add_argument("--volume", required=True)
    ip.add_argument("--mask", required=True, help="validity mask volume, 1 = keep, 0 = hole")
    ip.add_argument("--raw", action="store_true", help="write raw network output instead of the composite")
    ip.add_argument("--seed", type=int)
    ip.add_argument("--out", required=True)
    ip.set_defaults(func=cmd_inpaint)

    ap = sub.add_parser("autopaint", help="detect and remove anomalies, write residuals")
    ap.add_argument("--config", required=True)
    ap.add_argument("--model", required=True)
    ap.add_argument("--volume", required=True)
    ap.add_argument("--ooi", help="organ-of-interest mask volume; default: whole image")
    ap.add_argument("--truth", help="optional ground-truth mask for metrics")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", required=True)
    ap.set_defaults(func=cmd_autopaint)

    ev = sub.add_parser("evaluate", help="threshold sweep of residual volumes")
    ev.add_argument("--config")
    ev.add_argument("--residual", nargs="+", required=True)
    ev.add_argument("--truth", nargs="+", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep-loss", help="retrain over values of one loss coefficient")
    sw.add_argument("--config", required=True)
    sw.add_argument("--coefficient", default="c_lap")
    sw.add_argument("--values", default="0,1,20")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep_loss)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        print(f"error: CLIError: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CLIError, ConfigError, fileio.FormatError, OSError, ValueError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
