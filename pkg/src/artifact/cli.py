"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``manifest.json`` into its output directory; ``replay``
re-executes a recorded command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import __version__
from . import evalkit, generator, imagecore, surrogate, trainer
from .errors import (
    CheckpointFormatError,
    ContractError,
    DimensionError,
    ImageFormatError,
    IncompatibilityError,
    ProtectionError,
)
from .objectives import EOTConfig, LossWeights

log = logging.getLogger("artifact")

IMAGE_SUFFIXES = {".png", ".ppm"}
USAGE_ERRORS = (ContractError, DimensionError, IncompatibilityError, CheckpointFormatError, ImageFormatError)


class UsageError(Exception):
    """Raised for bad flags or inputs; maps to exit code 2."""


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_manifest(out: Path, command: str, argv: list[str], **extra) -> Path:
    manifest = {
        "tool": "artifact",
        "version": __version__,
        "command": command,
        "argv": argv,
        "threads": torch.get_num_threads(),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_target(source: str, size: int | None, like: torch.Tensor | None = None) -> torch.Tensor:
    if source == "builtin":
        if like is not None:
            return imagecore.make_default_target(*like.shape[-2:])
        return imagecore.make_default_target(size, size)
    return imagecore.load_image(source, resize_to=size)


def load_encoder(source: str) -> surrogate.SurrogateEncoder:
    return surrogate.SurrogateEncoder(seed=42) if source == "builtin" else surrogate.load_external(source)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _resolve_train_config(args) -> trainer.TrainConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must contain a JSON object")
    eot = dict(data.pop("eot", {}) or {})
    weights = dict(data.pop("weights", {}) or {})
    flags = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "image_size": args.size,
        "width_multiplier": args.width,
        "epsilon": args.epsilon,
        "weight_w": args.weight_w,
        "threshold_c": args.threshold_c,
        "reduction": args.reduction,
        "target": args.target,
        "surrogate": args.surrogate,
        "checkpoint_every": args.checkpoint_every,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    if args.eot_prob is not None:
        eot["apply_prob"] = args.eot_prob
    if args.no_eot:
        eot["apply_prob"] = 0.0
    if args.eot_seed is not None:
        eot["rng_seed"] = args.eot_seed
    if args.lambda_adv is not None:
        weights["lambda_adv"] = args.lambda_adv
    if args.lambda_pert is not None:
        weights["lambda_pert"] = args.lambda_pert
    if "epsilon" in data and not 0 < float(data["epsilon"]) <= 1:
        raise UsageError(f"--epsilon must lie in (0, 1] (pixel units, e.g. 0.0314 for 8/255); got {data['epsilon']}")
    try:
        return trainer.TrainConfig.from_dict({**data, "eot": EOTConfig(**eot), "weights": LossWeights(**weights)})
    except TypeError as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    files = list_images(args.data)
    if not files:
        raise UsageError(f"no PNG/PPM images in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state, report = trainer.train(cfg, files, out_dir=out)
    report.write_csv(out / "report.csv")
    write_manifest(
        out,
        "train",
        args.argv,
        config=cfg.to_dict(),
        seeds={"run": cfg.seed, "eot": cfg.eot.rng_seed, "surrogate": 42 if cfg.surrogate == "builtin" else None},
        inputs=[str(p) for p in files],
        checkpoints={name: sha256_file(path) for name, path in report.checkpoints.items()},
        timings={"total_seconds": time.perf_counter() - t0, "epoch_seconds": report.seconds},
    )
    print(f"trained {cfg.epochs} epochs; final l_adv={report.l_adv[-1]:.6g} -> {out / 'final.wgck'}")
    return 0


# ---------------------------------------------------------------------------
# protect
# ---------------------------------------------------------------------------


def protect_corpus(
    state: generator.PerturbationGenerator,
    images: list[torch.Tensor],
    target: torch.Tensor,
    batch: int,
) -> tuple[list[torch.Tensor], list[torch.Tensor], float]:
    """Protect images ``batch`` at a time; returns outputs, deltas and seconds spent."""
    outs, deltas = [], []
    elapsed = 0.0
    for lo in range(0, len(images), batch):
        chunk = torch.stack(images[lo : lo + batch])
        t0 = time.perf_counter()
        x_adv, delta = generator.protect(state, chunk, target)
        elapsed += time.perf_counter() - t0
        outs.extend(x_adv.unbind(0))
        deltas.extend(delta.unbind(0))
    return outs, deltas, elapsed


def cmd_protect(args) -> int:
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    try:
        state = generator.load_checkpoint(args.checkpoint, width=args.width)
    except (CheckpointFormatError, IncompatibilityError) as exc:
        raise UsageError(str(exc)) from exc
    if args.epsilon is not None:
        if not 0 < args.epsilon <= 1:
            raise UsageError(f"--epsilon must lie in (0, 1], got {args.epsilon}")
        state.epsilon = args.epsilon
    files = list_images(args.input)
    if not files:
        raise UsageError(f"no PNG/PPM images in {args.input}")
    images = [imagecore.load_image(p, resize_to=args.size) for p in files]
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) != 1:
        raise UsageError(f"input images differ in size {sorted(shapes)}; pass --size")
    target = load_target(args.target, args.size, like=images[0])
    if target.shape[-2:] != images[0].shape[-2:]:
        raise UsageError("target size does not match input size")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state.forward_passes = 0
    outs, deltas, elapsed = protect_corpus(state, images, target, args.batch)
    written = {}
    for path, x_adv, delta in zip(files, outs, deltas):
        dest = out / (path.stem + ".png")
        imagecore.save_image(x_adv, dest)
        written[path.name] = sha256_file(dest)
        if args.save_delta:
            torch.save(delta.clone(), out / (path.stem + ".delta.pt"))
    per_image = elapsed / len(images)
    throughput = len(images) / elapsed if elapsed > 0 else float("inf")
    write_manifest(
        out,
        "protect",
        args.argv,
        checkpoint={"path": str(args.checkpoint), "sha256": sha256_file(args.checkpoint)},
        epsilon=state.epsilon,
        batch=args.batch,
        inputs=[str(p) for p in files],
        outputs=written,
        forward_passes=state.forward_passes,
        timings={"seconds": elapsed, "per_image_seconds": per_image, "images_per_second": throughput},
    )
    print(f"protected {len(images)} images in {elapsed:.3f}s ({throughput:.2f} images/s, {state.forward_passes} forward passes)")
    log.info("throughput %.3f images/s", throughput)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _paired(clean_dir: str, protected_dir: str, size: int | None):
    clean = {p.stem: p for p in list_images(clean_dir)}
    prot = {p.stem: p for p in list_images(protected_dir)}
    missing = sorted(set(clean) ^ set(prot))
    if missing:
        raise UsageError("misaligned corpora; unpaired files: " + ", ".join(missing))
    if not clean:
        raise UsageError("no images to evaluate")
    names = sorted(clean)
    xs = [imagecore.load_image(clean[n], resize_to=size) for n in names]
    ys = [imagecore.load_image(prot[n], resize_to=size) for n in names]
    for n, x, y in zip(names, xs, ys):
        if x.shape != y.shape:
            raise UsageError(f"size mismatch for pair {n}")
    return names, xs, ys


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names, xs, ys = _paired(args.clean, args.protected, args.size)
    extra = {}
    if args.metric == "fidelity":
        rows = evalkit.fidelity_report(names, xs, ys)
        evalkit.write_rows_csv(rows, out / "fidelity.csv")
        print(f"mean PSNR {rows[-1].psnr:.3f} dB, mean SSIM {rows[-1].ssim:.4f}")
    elif args.metric in ("robustness", "latent-shift"):
        enc = load_encoder(args.surrogate)
        target = load_target(args.target, args.size, like=xs[0])
        extra["surrogate"] = args.surrogate
        extra["target"] = args.target
        if args.metric == "robustness":
            rows = evalkit.robustness_suite(ys, xs, enc, target)
            evalkit.write_rows_csv(rows, out / "robustness.csv")
            for r in rows:
                print(f"{r.preprocess:7s} R={r.ratio:.4f} delta={r.degradation:+.4f}")
        else:
            rows = [
                evalkit.LatentShiftRow(n, evalkit.latent_shift(enc, x, y, target)) for n, x, y in zip(names, xs, ys)
            ]
            evalkit.write_rows_csv(rows, out / "latent_shift.csv")
            vals = [r.ratio for r in rows]
            print(f"mean latent-shift ratio {sum(vals) / len(vals):.4f}")
    elif args.metric == "spectrum":
        rows = []
        for n, x, y in zip(names, xs, ys):
            rep = evalkit.spectrum(y - x)
            evalkit.save_spectrum_grid(rep, out / f"{n}_spectrum.png")
            rows.append(evalkit.SpectrumRow(n, float(rep.hf_energy.sum()), float((rep.ll_gray**2).sum())))
        evalkit.write_rows_csv(rows, out / "spectrum.csv")
        extra["rendering"] = evalkit.SpectrumReport.__dataclass_fields__["meta"].default_factory()
    write_manifest(
        out,
        f"eval {args.metric}",
        args.argv,
        clean=args.clean,
        protected=args.protected,
        pairs=names,
        reports={p.name: sha256_file(p) for p in sorted(out.iterdir()) if p.suffix in (".csv", ".png")},
        **extra,
    )
    return 0


# ---------------------------------------------------------------------------
# make-target, pretrain-surrogate, replay
# ---------------------------------------------------------------------------


def cmd_make_target(args) -> int:
    try:
        target = imagecore.make_default_target(args.size, args.size)
    except DimensionError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imagecore.save_image(target, out / "target.png")
    imagecore.save_image(imagecore.derive_mask(target), out / "mask.png")
    write_manifest(
        out,
        "make-target",
        args.argv,
        size=args.size,
        outputs={n: sha256_file(out / n) for n in ("target.png", "mask.png")},
    )
    print(f"wrote {out / 'target.png'} and {out / 'mask.png'}")
    return 0


def cmd_pretrain_surrogate(args) -> int:
    files = list_images(args.data)
    if not files:
        raise UsageError(f"no PNG/PPM images in {args.data}")
    cfg = trainer.TrainConfig(image_size=args.size, batch_size=args.batch_size, seed=args.seed, learning_rate=args.lr)
    enc, history = trainer.pretrain_surrogate(cfg, files, epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    surrogate.save_surrogate(enc, out / "surrogate.wgck")
    write_manifest(
        out,
        "pretrain-surrogate",
        args.argv,
        config=cfg.to_dict(),
        reconstruction_mse=history,
        checksum=enc.checksum(),
        checkpoints={"surrogate.wgck": sha256_file(out / "surrogate.wgck")},
    )
    print(f"reconstruction MSE {history[0]:.5g} -> {history[-1]:.5g}")
    return 0


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if args.out:
        argv = _replace_out(argv, args.out)
    return main(argv)


def _replace_out(argv: list[str], out: str) -> list[str]:
    argv = list(argv)
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if tok.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description="Budgeted frequency-aware image protection.")
    parser.add_argument("--threads", type=int, default=None, help="cap torch worker threads (1 = bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a perturbation generator")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (keys mirror TrainConfig)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, help="training resolution (multiple of 16)")
    p.add_argument("--width", type=float, help="channel width multiplier")
    p.add_argument("--epsilon", type=float, help="l-inf budget in [0,1] pixel units")
    p.add_argument("--target", help="target image path or 'builtin'")
    p.add_argument("--surrogate", help="surrogate WGCK path or 'builtin'")
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--lambda-pert", type=float)
    p.add_argument("--weight-w", type=float)
    p.add_argument("--threshold-c", type=float)
    p.add_argument("--reduction", choices=("sum", "mean"))
    p.add_argument("--eot-prob", type=float)
    p.add_argument("--eot-seed", type=int)
    p.add_argument("--no-eot", action="store_true")
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", help="protect a directory of images in one forward pass each")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", default="builtin")
    p.add_argument("--size", type=int, help="resize (short side + center crop) before protecting")
    p.add_argument("--width", type=float, help="expected width multiplier (checked against the checkpoint)")
    p.add_argument("--epsilon", type=float, help="override the checkpoint budget")
    p.add_argument("--batch", type=int, default=1, help="images per forward pass")
    p.add_argument("--save-delta", action="store_true")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("eval", help="evaluate protected images against clean ones")
    p.add_argument("metric", choices=("fidelity", "robustness", "latent-shift", "spectrum"))
    p.add_argument("--clean", required=True)
    p.add_argument("--protected", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--target", default="builtin")
    p.add_argument("--surrogate", default="builtin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-target", help="write the built-in target and its mask")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_make_target)

    p = sub.add_parser("pretrain-surrogate", help="fit the surrogate encoder as an autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_pretrain_surrogate)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ProtectionError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
