"""Command line entry point: ``alcn protocol|train|eval|score|report``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import data
from .config import ConfigError, ExperimentConfig, parse_assignment
from .corruption import blend, sample_latent
from .evaluate import aggregate_report, roc_curve, score_set, anomaly_score
from .train import TrainingError, fit

log = logging.getLogger("alcn")

OUTPUT_ROOT_ENV = "ALCN_OUTPUT_ROOT"
CSV_SCHEMA = 1
METRICS_HEADER = ["step", "epoch", "recon_loss", "recon_loss_pre", "alpha", "grad_norm_denoiser", "grad_norm_noisegen"]
SUMMARY = "summary.json"


class UsageError(Exception):
    pass


# flag name -> config key
FLAG_KEYS = {
    "name": "name",
    "dataset": "dataset.kind",
    "data_path": "dataset.path",
    "category": "dataset.category",
    "resolution": "dataset.resolution",
    "num_classes": "dataset.num_classes",
    "per_class": "dataset.per_class",
    "mode": "protocol.mode",
    "target": "protocol.target",
    "ratio": "protocol.split_ratio",
    "manifest": "protocol.manifest",
    "strategy": "strategy.kind",
    "p": "strategy.p",
    "sigma": "strategy.sigma",
    "loss": "loss.kind",
    "lambda0": "loss.lambda0",
    "lambda1": "loss.lambda1",
    "lr_denoiser": "optim.lr_denoiser",
    "lr_noisegen": "optim.lr_noisegen",
    "latent_dim": "arch.latent_dim",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "log_every": "train.log_every",
    "checkpoint_every": "train.checkpoint_every",
    "score_kind": "eval.score_kind",
    "seed": "seed",
    "output_dir": "output_dir",
}


def _add_config_flags(p, protocol_only=False):
    p.add_argument("--config", type=Path, help="JSON file of dotted config keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "folder", "synth"])
    p.add_argument("--data-path")
    p.add_argument("--category")
    p.add_argument("--resolution", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--mode", choices=data.PROTOCOLS)
    p.add_argument("--target")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    if protocol_only:
        return
    p.add_argument("--manifest", help="reuse an existing protocol manifest")
    p.add_argument("--name", help="row label used by `report`")
    p.add_argument("--strategy", choices=["none", "blackout", "speckle", "gaussian", "alcn"])
    p.add_argument("--p", type=float, help="pixel corruption probability (blackout/speckle)")
    p.add_argument("--sigma", type=float, help="gaussian noise std")
    p.add_argument("--loss", choices=["l2", "ffl", "ffl_plain"])
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lr-denoiser", type=float)
    p.add_argument("--lr-noisegen", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--score-kind", choices=["l2", "ffl"])
    p.add_argument("--output-dir")


def _config_from_args(args) -> ExperimentConfig:
    overrides = dict(parse_assignment(s) for s in args.set)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return ExperimentConfig.from_sources(args.config, overrides)


def _build_split(cfg: ExperimentConfig):
    spec = cfg.dataset_spec()
    images = data.load_dataset(spec)
    if cfg["protocol.manifest"]:
        return data.load_manifest(cfg["protocol.manifest"], images)
    target = cfg["protocol.target"]
    if target is None:
        raise UsageError("--target is required")
    try:
        images.class_index(target)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    return data.build_protocol(
        images, cfg["protocol.mode"], target, float(cfg["protocol.split_ratio"]), int(cfg["seed"]), dataset=spec
    )


# ---------------------------------------------------------------- helpers


@contextmanager
def _run_lock(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise TrainingError(f"{run_dir} is locked by another process ({lock} exists)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _default_run_dir(cfg, split) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    label = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in cfg["name"])
    return root / f"{cfg['dataset.kind']}_{split.protocol}_{split.target_class}_{label}_s{cfg['seed']}"


def _to_uint8(img):
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_grid(state, images, path, seed=0, alpha=0.55):
    """Four-row PNG: input, generated noise, blended input, reconstruction."""
    from PIL import Image

    x = torch.from_numpy(images)
    with torch.no_grad():
        if state.noisegen is not None:
            z = sample_latent(len(x), np.random.default_rng(seed), state.noisegen.arch.noise_latent_dim)
            noise = state.noisegen(z)
            corrupted = blend(x, noise, alpha)
        else:
            noise = torch.zeros_like(x)
            corrupted = x
        out = state.denoiser(corrupted)
    rows = [t.numpy() for t in (x, noise, corrupted, out)]
    n, c, h, w = images.shape
    canvas = np.zeros((4 * h, n * w, c), np.float32)
    for r, row in enumerate(rows):
        for i in range(n):
            canvas[r * h:(r + 1) * h, i * w:(i + 1) * w] = row[i].transpose(1, 2, 0)
    arr = _to_uint8(canvas)
    Image.fromarray(arr[..., 0] if c == 1 else arr).save(path, format="PNG")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _fmt(v):
    return repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_protocol(args):
    cfg = _config_from_args(args)
    cfg.validate()
    split = _build_split(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_manifest(split, out)
    n_anom = int(split.test_anomaly_flags.sum())
    print(f"{out}: train={len(split.train)} test={len(split.test)} (anomalous={n_anom})")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    cfg.validate()
    split = _build_split(cfg)
    run_dir = Path(cfg["output_dir"]) if cfg["output_dir"] else _default_run_dir(cfg, split)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / "metrics.csv").exists() and not args.overwrite:
        raise TrainingError(f"{run_dir} already holds a run; pass --overwrite or choose --output-dir")

    with _run_lock(run_dir):
        for stale in ("metrics.csv", "timing.csv", "validation.csv", SUMMARY):
            (run_dir / stale).unlink(missing_ok=True)
        (run_dir / "config.json").write_text(cfg.snapshot(), encoding="utf-8")
        data.save_manifest(split, run_dir / "manifest.json")
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        (run_dir / "grids").mkdir(exist_ok=True)

        fcfg = cfg.fit_config()
        log_every = max(int(cfg["train.log_every"]), 1)
        ckpt_every = max(int(cfg["train.checkpoint_every"]), 1)
        steps_per_epoch = -(-len(split.train) // min(fcfg.batch_size, len(split.train)))
        total_steps = steps_per_epoch * fcfg.epochs
        preview = split.train.images[:8]

        metrics = open(run_dir / "metrics.csv", "w", newline="")
        timing = open(run_dir / "timing.csv", "w", newline="")
        validation = open(run_dir / "validation.csv", "w", newline="")
        mw, tw, vw = csv.writer(metrics), csv.writer(timing), csv.writer(validation)
        mw.writerow(METRICS_HEADER)
        tw.writerow(["step", "wall_ms"])
        vw.writerow(["epoch", "step", "val_recon_l2"])
        clock = {"t": time.perf_counter()}
        last_ckpt = {"path": None}

        def on_step(state, s):
            now = time.perf_counter()
            if s.step % log_every == 0 or s.step == total_steps:
                epoch = (s.step - 1) // steps_per_epoch + 1
                mw.writerow([s.step, epoch, _fmt(s.recon_loss_post), _fmt(s.recon_loss_pre_noise_update),
                             _fmt(s.alpha), _fmt(s.grad_norm_denoiser), _fmt(s.grad_norm_noisegen)])
                tw.writerow([s.step, f"{(now - clock['t']) * 1e3:.3f}"])
            clock["t"] = now

        def save(state):
            path = run_dir / "checkpoints" / f"step_{state.step:07d}.ckpt"
            try:
                ckpt.save_checkpoint(state, path, extra={"run": cfg["name"]})
            except OSError as exc:
                for fh in (metrics, timing, validation):
                    fh.flush()
                raise TrainingError(f"checkpoint write failed at step {state.step}: {exc}; history flushed") from exc
            write_grid(state, preview, run_dir / "grids" / f"step_{state.step:07d}.png", seed=int(cfg["seed"]))
            last_ckpt["path"] = path

        def on_epoch(state, epoch, val):
            vw.writerow([epoch + 1, state.step, _fmt(val)])
            if (epoch + 1) % ckpt_every == 0 or epoch + 1 == fcfg.epochs:
                save(state)

        try:
            state, history = fit(fcfg, split, on_step=on_step, on_epoch=on_epoch)
            if fcfg.epochs == 0:
                save(state)
        finally:
            for fh in (metrics, timing, validation):
                fh.close()

        summary = {
            "name": cfg["name"],
            "steps": state.step,
            "epochs": fcfg.epochs,
            "final_recon_loss": history[-1].recon_loss_post if history else None,
            "checkpoint": str(last_ckpt["path"].relative_to(run_dir)),
            "config_hash": cfg.digest(),
            "csv_schema": CSV_SCHEMA,
        }
        (run_dir / SUMMARY).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"run directory: {run_dir}")
    return 0


def _latest_checkpoint(run_dir: Path) -> Path:
    found = sorted((run_dir / "checkpoints").glob("step_*.ckpt"))
    if not found:
        raise TrainingError(f"no checkpoints under {run_dir / 'checkpoints'}")
    return found[-1]


def _snapshot_hash(run_dir: Path):
    snap = run_dir / "config.json"
    if not snap.exists():
        return None
    cfg = ExperimentConfig(json.loads(snap.read_text()))
    return cfg.digest(), cfg


def cmd_eval(args):
    if args.run is None and (args.checkpoint is None or args.manifest is None):
        raise UsageError("give --run DIR, or both --checkpoint and --manifest")
    run_dir = Path(args.run) if args.run else None
    ckpt_path = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    manifest = Path(args.manifest) if args.manifest else run_dir / "manifest.json"
    for what, p in (("checkpoint", ckpt_path), ("manifest", manifest)):
        if not p.exists():
            raise UsageError(f"{what} {p} does not exist")
    if run_dir is None:
        run_dir = ckpt_path.parent.parent

    snap = _snapshot_hash(run_dir)
    expected, cfg = snap if snap else (None, None)
    try:
        state = ckpt.load_checkpoint(ckpt_path, expected_config_hash=expected, force=args.force)
    except ckpt.ConfigMismatchError as exc:
        raise TrainingError(str(exc)) from None
    split = data.load_manifest(manifest)
    score_kind = args.score_kind or (cfg["eval.score_kind"] if cfg else "l2")

    timings = []
    scored = score_set(state.denoiser, split.test.images, split.test_anomaly_flags, score_kind,
                       args.batch_size, timings=timings)
    report = aggregate_report({split.target_class: scored}, timings)

    out = Path(args.out) if args.out else run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    summary = report.to_dict()
    summary.update(
        name=(cfg["name"] if cfg else state.denoiser.arch.kind),
        dataset={"kind": split.dataset.get("kind"), "class_names": split.train.class_names},
        protocol=split.protocol,
        target_class=split.target_class,
        score_kind=score_kind,
        checkpoint=str(ckpt_path),
        csv_schema=CSV_SCHEMA,
    )
    (out / SUMMARY).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_csv(out / "scores.csv", ["index", "score", "anomalous"],
               [[int(i), _fmt(s), int(f)] for i, s, f in zip(split.test_indices, scored.scores, scored.anomaly_flags)])
    points = roc_curve(scored)
    _write_csv(out / "roc.csv", ["fpr", "tpr"], [[_fmt(a), _fmt(b)] for a, b in points])
    _plot_roc(points, report.auc_avg, out / "roc.png", f"{summary['name']} / {split.target_class}")
    for cls, auc in report.per_class.items():
        print(f"class {cls}: AUC={auc:.4f}")
    print(f"AUC_avg={report.auc_avg:.6f}")
    return 0


def _plot_roc(points, auc, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr, tpr = zip(*points)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.plot(fpr, tpr, lw=1.5, label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title, fontsize=9)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _load_image_file(path, channels, resolution):
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        if img.ndim == 2:
            img = img[None]
        return img
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB").resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def cmd_score(args):
    for p in (args.checkpoint, args.image):
        if not Path(p).exists():
            raise UsageError(f"{p} does not exist")
    state = ckpt.load_checkpoint(args.checkpoint)
    arch = state.denoiser.arch
    img = _load_image_file(args.image, arch.in_channels, arch.resolution)
    state.denoiser.eval()
    print(f"{anomaly_score(state.denoiser, img, args.score_kind):.8f}")
    return 0


def cmd_report(args):
    rows = {}
    dataset = None
    for run in args.runs:
        path = Path(run) / "eval" / SUMMARY
        if not path.exists():
            raise UsageError(f"{run}: no eval/{SUMMARY}; run `alcn eval` first")
        s = json.loads(path.read_text())
        ident = (s["dataset"]["kind"], tuple(s["dataset"]["class_names"]))
        if dataset is None:
            dataset = ident
        elif ident != dataset:
            raise TrainingError(f"{run}: dataset {ident[0]} differs from the other runs ({dataset[0]})")
        rows.setdefault(s["name"], {}).update(s["per_class"])

    present = {c for r in rows.values() for c in r}
    columns = [c for c in dataset[1] if c in present]
    table = []
    for name, per_class in rows.items():
        cells = [per_class.get(c) for c in columns]
        avg = float(np.mean([v for v in cells if v is not None]))
        table.append([name] + cells + [avg])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["model"] + columns + ["AUC_avg"],
               [[r[0]] + ["" if v is None else f"{v:.4f}" for v in r[1:]] for r in table])
    md = ["| model | " + " | ".join(columns) + " | AUC_avg |", "|" + "---|" * (len(columns) + 2)]
    for r in table:
        md.append("| " + " | ".join([r[0]] + ["-" if v is None else f"{v:.3f}" for v in r[1:]]) + " |")
    out.with_suffix(".md").write_text("\n".join(md) + "\n")
    print("\n".join(md))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="alcn", description="Adversarially learned continuous noise for denoising-AE anomaly detection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protocol", help="build a leave-one-out split manifest")
    _add_config_flags(p, protocol_only=True)
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("train", help="train a denoiser (ALCN or a fixed-noise baseline)")
    _add_config_flags(p)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split's test set and compute AUC")
    p.add_argument("--run", help="run directory written by `train`")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--score-kind", choices=["l2", "ffl"])
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", help="output directory (default RUN/eval)")
    p.add_argument("--force", action="store_true", help="accept a checkpoint written under another config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="anomaly score of a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG/JPEG or .npy (C,H,W) in [0,1]")
    p.add_argument("--score-kind", choices=["l2", "ffl"], default="l2")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="tabulate AUC across evaluated runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True, help="CSV path; a .md twin is written alongside")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, min(torch.get_num_threads(), os.cpu_count() or 1)))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"alcn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ckpt.CheckpointError, data.DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"alcn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
