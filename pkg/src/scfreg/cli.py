"""``scfreg`` command-line interface.

Subcommands: synth, train, register, eval, sweep-correlation,
background-vector, complexity. Diagnostics go to stderr; data goes to
files or stdout. Exit codes: 0 success, 2 usage error, 1 runtime error.
Every file-producing run writes a ``run_manifest.json`` next to its
outputs recording the command, config, seed, tool version and wall clock.
``SCFREG_SEED`` provides the default seed.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, embeddings, metrics, nn, scf, synth, tensorio, train
from .errors import LabelCountMismatchError, ScfregError
from .field import SegMask, warp_image

logger = logging.getLogger("scfreg")


def _default_seed() -> int:
    return int(os.environ.get("SCFREG_SEED", "0"))


def _parse_shape(text: str):
    try:
        shape = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected e.g. 64x64")
    if len(shape) not in (2, 3) or any(s < 1 for s in shape):
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected 2 or 3 positive extents")
    return shape


def _parse_spacing(text: str):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad spacing {text!r}; expected e.g. 2,2,2")


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs,
                    started: float) -> None:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_sec": round(time.monotonic() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


# --- subcommands ---

def cmd_synth(args) -> int:
    started = time.monotonic()
    cfg = synth.SynthConfig(
        shape=args.shape, num_regions=args.regions, num_pairs=args.pairs,
        amplitude=args.amp, sigma=args.sigma, noise_sd=args.noise,
        seed=args.seed, modality=args.modality,
    )
    manifest = synth.generate_dataset(cfg, args.out)
    logger.info("wrote %d pairs to %s", len(manifest["pairs"]), args.out)
    _write_manifest(Path(args.out), "synth", manifest["config"], args.seed,
                    [], [args.out], started)
    return 0


def _load_dataset_embeddings(args, num_labels: int):
    if args.one_hot:
        return embeddings.one_hot_embeddings(num_labels)
    emb = embeddings.load_embeddings(args.embeddings)
    if emb.num_regions != num_labels:
        raise LabelCountMismatchError(
            f"embeddings have {emb.num_regions} rows (incl. background) but the "
            f"dataset has {num_labels} labels"
        )
    return emb


def cmd_train(args) -> int:
    started = time.monotonic()
    pairs, manifest = synth.load_dataset(args.data)
    num_labels = manifest["num_labels"]
    emb = _load_dataset_embeddings(args, num_labels)
    if args.val_pairs >= len(pairs):
        raise ScfregError(f"--val-pairs {args.val_pairs} >= dataset size {len(pairs)}")
    val_pairs = pairs[len(pairs) - args.val_pairs:] if args.val_pairs else None
    train_pairs = pairs[: len(pairs) - args.val_pairs] if args.val_pairs else pairs
    rank = pairs[0].im_f.ndim
    backbone_cfg = nn.BackboneConfig(
        rank=rank, start_channels=args.ns, levels=args.levels,
        kernel_size=args.kernel, out_channels=args.c2,
    )
    model = scf.build_model(
        emb, backbone_cfg, hidden=args.cphi, head=args.head,
        use_integration=args.integrate, integration_steps=args.int_steps,
        seed=args.seed,
    )
    cfg = train.TrainConfig(
        epochs=args.epochs, lambda_=getattr(args, "lambda"), lr0=args.lr,
        seed=args.seed, use_integration=args.integrate,
        checkpoint_every=args.checkpoint_every,
    )
    out = Path(args.out)
    train.train_loop(model, train_pairs, cfg, val_pairs=val_pairs, out_dir=out)
    logger.info("checkpoint at %s", out / "ckpt_final")
    _write_manifest(out, "train", {
        "epochs": cfg.epochs, "lambda": cfg.lambda_, "lr0": cfg.lr0,
        "ns": args.ns, "cphi": args.cphi, "kernel": args.kernel,
        "levels": args.levels, "c2": args.c2, "head": args.head,
        "integrate": args.integrate, "val_pairs": args.val_pairs,
        "one_hot": args.one_hot,
    }, args.seed, [args.data], [str(out / "ckpt_final"), str(out / "history.csv")], started)
    return 0


def cmd_register(args) -> int:
    started = time.monotonic()
    model = scf.load_model(args.ckpt)
    im_m = np.array(tensorio.read_tensor(args.moving), dtype=np.float64)
    im_f = np.array(tensorio.read_tensor(args.fixed), dtype=np.float64)
    seg_f = np.array(tensorio.read_tensor(args.fixed_seg))
    probs = (
        np.array(tensorio.read_tensor(args.fixed_probs))
        if args.fixed_probs else None
    )
    mask_f = SegMask(seg_f, probs)
    u = scf.register(model, im_m, im_f, mask_f)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "u.scft", out / "warped.scft"]
    tensorio.write_tensor(out / "u.scft", u)
    tensorio.write_tensor(out / "warped.scft", warp_image(im_m, u, mode="linear"))
    if args.moving_seg:
        seg_m = np.array(tensorio.read_tensor(args.moving_seg))
        warped_seg = warp_image(seg_m, u, mode="nearest").astype(np.int32)
        tensorio.write_tensor(out / "warped_seg.scft", warped_seg)
        outputs.append(out / "warped_seg.scft")
    inputs = [args.ckpt, args.moving, args.fixed, args.fixed_seg]
    _write_manifest(out, "register", {"integrate": model.use_integration},
                    model.seed, inputs, outputs, started)
    logger.info("wrote %s", ", ".join(str(p) for p in outputs))
    return 0


def cmd_eval(args) -> int:
    started = time.monotonic()
    u = np.array(tensorio.read_tensor(args.field), dtype=np.float64)
    seg_f = np.array(tensorio.read_tensor(args.fixed_seg))
    seg_m = np.array(tensorio.read_tensor(args.moving_seg))
    warped_seg = warp_image(seg_m, u, mode="nearest").astype(np.int32)
    report = metrics.evaluate_registration(
        u, warped_seg, seg_f, spacing=args.spacing
    )
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
        _write_manifest(out, "eval", {"spacing": args.spacing}, None,
                        [args.field, args.fixed_seg, args.moving_seg],
                        [out / "metrics.json"], started)
    return 0


def cmd_sweep_correlation(args) -> int:
    started = time.monotonic()
    if args.count < 20:
        raise ScfregError(f"need at least 20 fields for the sweep, got {args.count}")
    rng = np.random.default_rng(args.seed)
    amps = np.geomspace(0.5, 8.0, 6)
    sigmas = [1.0, 1.5, 2.5, 4.0]
    grid = [(a, s) for s in sigmas for a in amps]
    while len(grid) < args.count:
        grid += grid
    grid = grid[: args.count]
    rows = []
    for amp, sigma in grid:
        u = synth.smooth_noise_field(args.shape, amp, sigma, rng)
        det = metrics.jacobian_determinant(u)
        rows.append((metrics.sdlogj(det), metrics.folding_fraction(det)))
    fit = metrics.correlation_study(rows)
    arr = np.asarray(rows)
    xn = (arr[:, 0] - arr[:, 0].min()) / np.ptp(arr[:, 0])
    yn = (arr[:, 1] - arr[:, 1].min()) / np.ptp(arr[:, 1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["sdlogj,fold_frac,sdlogj_norm,fold_frac_norm"]
    for (sd, ff), x, y in zip(rows, xn, yn):
        lines.append(f"{sd!r},{ff!r},{float(x)!r},{float(y)!r}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    (out / "fit.json").write_text(json.dumps(fit, indent=2, sort_keys=True))
    print(json.dumps(fit, indent=2, sort_keys=True))
    _write_manifest(out, "sweep-correlation",
                    {"count": args.count, "shape": list(args.shape)}, args.seed,
                    [], [out / "sweep.csv", out / "fit.json"], started)
    return 0


def cmd_background_vector(args) -> int:
    started = time.monotonic()
    emb = embeddings.load_embeddings(args.embeddings)
    out_base = Path(args.out)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    meta = tensorio.read_sidecar(args.embeddings)
    embeddings.save_embeddings(
        out_base, emb.matrix, emb.labels[1:],
        prompt_template=meta.get("prompt_template", ""),
        encoder=meta.get("encoder", ""), has_background_row=True,
    )
    logger.info("wrote prepared matrix (%d x %d) to %s", *emb.matrix.shape, out_base)
    _write_manifest(out_base.parent, "background-vector", {}, None,
                    [args.embeddings], [out_base], started)
    return 0


def cmd_complexity(args) -> int:
    d = len(args.shape) if args.shape else 2
    backbone_cfg = nn.BackboneConfig(
        rank=d, start_channels=args.ns, levels=args.levels,
        kernel_size=args.kernel, out_channels=args.c2,
    )
    c1 = args.c1 if args.c1 else args.regions  # one-hot embeddings have C1 = N
    mlp_cfg = nn.ImplicitMlpConfig(
        in_dim=c1, hidden=args.cphi, out_dim=args.c2 * d
    )
    report = scf.complexity_report(
        backbone_cfg, mlp_cfg, num_regions=args.regions, input_shape=args.shape
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# --- parser wiring ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scfreg",
        description="Deformable registration with text-conditioned spatially covariant filters",
    )
    parser.add_argument("--version", action="version", version=f"scfreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--shape", type=_parse_shape, required=True, help="e.g. 64x64 or 32x32x32")
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--amp", type=float, default=3.0, help="max displacement in voxels")
    p.add_argument("--sigma", type=float, default=4.0, help="velocity smoothing in voxels")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--modality", choices=["generic", "ct_like"], default="generic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--embeddings", help="embedding .scft file (with sidecar)")
    group.add_argument("--one-hot", action="store_true", help="identity embeddings")
    p.add_argument("--lambda", type=float, default=0.1, help="smoothness weight")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--ns", type=int, default=16, help="backbone start channels")
    p.add_argument("--cphi", type=int, default=256, help="implicit MLP hidden width")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--c2", type=int, default=16, help="feature channels")
    p.add_argument("--head", choices=list(scf.HEADS), default="textscf")
    p.add_argument("--integrate", action="store_true", help="enable diffeomorphic integration")
    p.add_argument("--int-steps", type=int, default=7, help="scaling-and-squaring steps")
    p.add_argument("--val-pairs", type=int, default=0, help="hold out the last K pairs")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="apply a trained model to one pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--fixed-seg", required=True)
    p.add_argument("--fixed-probs", help="optional confidence .scft for the fixed mask")
    p.add_argument("--moving-seg", help="also write the warped moving segmentation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score a displacement field against masks")
    p.add_argument("--field", required=True)
    p.add_argument("--fixed-seg", required=True)
    p.add_argument("--moving-seg", required=True)
    p.add_argument("--spacing", type=_parse_spacing, default=None, help="mm per voxel, e.g. 2,2,2")
    p.add_argument("--out", help="also write metrics.json under this directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-correlation", help="SDlogJ vs folding-fraction sweep")
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--shape", type=_parse_shape, default=(24, 24))
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_correlation)

    p = sub.add_parser("background-vector", help="normalize embeddings and add the SVD background row")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="output .scft path (sidecar written next to it)")
    p.set_defaults(func=cmd_background_vector)

    p = sub.add_parser("complexity", help="parameter and multiply-add counts")
    p.add_argument("--ns", type=int, default=16)
    p.add_argument("--cphi", type=int, default=256)
    p.add_argument("--shape", type=_parse_shape, default=None)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--c2", type=int, default=16)
    p.add_argument("--regions", type=int, default=5)
    p.add_argument("--c1", type=int, default=0, help="embedding dim (default: --regions)")
    p.set_defaults(func=cmd_complexity)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScfregError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
