"""Command-line interface.

Exit codes:
    0  success
    1  check failed (gradcheck above tolerance)
    2  configuration error (missing/unreadable/invalid config or flags)
    3  data error (missing images, wrong image shape)
    4  non-finite training loss
    5  bad file format (magic, version, truncation)
    6  shape mismatch between a file and the checkpoint
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, analysis, formats, imageio, trainer
from .hashgrid import GridConfig, param_count
from .trainer import ConfigError, DataError, NonFiniteLossError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE, EXIT_FORMAT, EXIT_SHAPE = range(7)

log = logging.getLogger("keygrid")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


PRESETS = {
    # four groups of 16 levels from 4 to 64, 2^18 entries of 4 floats, C_d = 512
    "lsun": GridConfig(n_groups=4, n_resolutions=16, key_len=1, entry_dim=4, max_entries=2 ** 18,
                      r_min=4, r_max=64, out_dim_per_group=128),
    "lsun-key2": GridConfig(n_groups=4, n_resolutions=16, key_len=2, entry_dim=4, max_entries=2 ** 18,
                           r_min=4, r_max=64, out_dim_per_group=128),
}


# -- helpers ------------------------------------------------------------------------------

def _thread_limit(threads: int | None):
    threads = threads or (int(os.environ["BRIGHT_THREADS"]) if os.environ.get("BRIGHT_THREADS") else None)
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _load_config(args) -> trainer.TrainConfig:
    overrides = {"seed": getattr(args, "seed", None), "steps": getattr(args, "steps", None)}
    if args.config is None:
        text = ""
    else:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_CONFIG, f"config file not found: {path}")
        text = path.read_text()
    try:
        return trainer.parse_config(text, **overrides)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc


def _load_checkpoint(path) -> trainer.Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CliError(EXIT_DATA, f"checkpoint not found: {path}")
    try:
        return trainer.load_checkpoint(path)
    except formats.FormatError as exc:
        raise CliError(EXIT_FORMAT, f"{path}: {exc}") from exc


def _dataset(args, config: trainer.TrainConfig) -> np.ndarray:
    if getattr(args, "synthetic", False):
        return trainer.synthetic_images(config.n_images, config.image_size, config.channels, seed=config.seed)
    if not getattr(args, "data", None):
        raise CliError(EXIT_DATA, "either --data DIR or --synthetic is required")
    try:
        images = imageio.read_dir(args.data)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from exc
    expected = (config.image_size, config.image_size, config.channels)
    if images.shape[1:] != expected:
        raise CliError(EXIT_DATA, f"images are {images.shape[1:]}, config expects {expected}")
    return images


def _read_image(path, config: trainer.TrainConfig) -> np.ndarray:
    try:
        image = imageio.read_image(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot read image {path}: {exc}") from exc
    expected = (config.image_size, config.image_size, config.channels)
    if image.shape != expected:
        raise CliError(EXIT_SHAPE, f"image {path} is {image.shape}, checkpoint expects {expected}")
    return image


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(path: Path, command: str, argv: list[str], config: dict | None, seed, inputs, outputs,
                   started: float):
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config_dict(config: trainer.TrainConfig) -> dict:
    import dataclasses

    return dataclasses.asdict(config)


# -- commands -------------------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    started = time.time()
    config = _load_config(args)
    data = _dataset(args, config)
    out = _out_dir(args)
    try:
        result = trainer.train(config, data)
    except NonFiniteLossError as exc:
        raise CliError(EXIT_NONFINITE, str(exc)) from exc
    except DataError as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from exc
    ckpt_path, csv_path = out / "checkpoint.brht", out / "loss.csv"
    trainer.save_checkpoint(ckpt_path, result.checkpoint)
    lines = ["step,loss,psnr"]
    lines += [f"{k + 1},{loss:.9g},{p:.6f}" for k, (loss, p) in enumerate(zip(result.losses, result.psnrs))]
    csv_path.write_text("\n".join(lines) + "\n")
    if result.losses:
        log.info("trained %d steps: loss %.5f -> %.5f", len(result.losses), result.losses[0], result.losses[-1])
    inputs = [args.config] if args.config else []
    if args.data:
        inputs.append(args.data)
    write_manifest(out / "manifest.json", "train", argv, _config_dict(config), config.seed, inputs,
                   [ckpt_path, csv_path], started)
    return EXIT_OK


def _sidecar(path) -> Path:
    return Path(f"{path}.manifest.json")


def cmd_encode(args, argv) -> int:
    started = time.time()
    ckpt = _load_checkpoint(args.checkpoint)
    image = _read_image(args.image, ckpt.config)
    keys = trainer.encode_images(ckpt.model, image)
    formats.save_keycode(args.out, keys)
    recon = trainer.decode_images(ckpt.model, keys)
    print(f"psnr {trainer.psnr(recon, image):.4f}", file=sys.stderr)
    write_manifest(_sidecar(args.out), "encode", argv, _config_dict(ckpt.config), ckpt.config.seed,
                   [args.checkpoint, args.image], [args.out], started)
    return EXIT_OK


def cmd_decode(args, argv) -> int:
    started = time.time()
    ckpt = _load_checkpoint(args.checkpoint)
    try:
        keys = formats.load_keycode(args.keys)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read {args.keys}: {exc}") from exc
    except formats.FormatError as exc:
        raise CliError(EXIT_FORMAT, f"{args.keys}: {exc}") from exc
    cfg = ckpt.config
    expected = (cfg.code_size, cfg.code_size, cfg.n_groups * cfg.key_len)
    if keys.shape != expected:
        raise CliError(EXIT_SHAPE, f"key code is {keys.shape}, checkpoint expects {expected}")
    imageio.write_image(args.out, trainer.decode_images(ckpt.model, keys))
    write_manifest(_sidecar(args.out), "decode", argv, _config_dict(ckpt.config), ckpt.config.seed,
                   [args.checkpoint, args.keys], [args.out], started)
    return EXIT_OK


def cmd_stats(args, argv) -> int:
    started = time.time()
    ckpt = _load_checkpoint(args.checkpoint)
    data = _dataset(args, ckpt.config)
    out = _out_dir(args)
    outputs = []
    stats = analysis.epoch_hits(ckpt, data, seed=args.seed, noise=not args.no_noise)
    for s, st in enumerate(stats):
        rows = analysis.usage_report(st)
        path = out / f"usage_group{s}.csv"
        path.write_text(analysis.usage_csv(rows))
        outputs.append(path)
        for lvl, counts in enumerate(st.counts):
            hist = out / f"hits_group{s}_level{lvl}.csv"
            hist.write_text(analysis.histogram_csv(counts))
            outputs.append(hist)
        for r in rows:
            level = ckpt.model.groups[s].levels[r.level]
            mode = "direct" if level.direct else "hashed"
            print(f"group {s} level {r.level} r={level.resolution:<3d} {mode:6s} entries={r.entries:<7d} "
                  f"hit_fraction={r.hit_fraction:.4f} mean={r.mean_hits:.2f} std={r.std_hits:.2f}")
    write_manifest(out / "manifest.json", "stats", argv, _config_dict(ckpt.config), args.seed,
                   [args.checkpoint] + ([args.data] if args.data else []), outputs, started)
    return EXIT_OK


def _grid_for_params(args) -> GridConfig:
    if args.config:
        return _load_config(args).grid_config()
    base = PRESETS[args.preset]
    if args.key_len is not None:
        import dataclasses

        base = dataclasses.replace(base, key_len=args.key_len)
    return base


def cmd_params(args, argv) -> int:
    try:
        grid = _grid_for_params(args)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc
    tables, mlp, total = param_count(grid)
    rows = [("table_params", tables), ("mlp_params", mlp), ("total", total)]
    for name, value in rows:
        print(f"{name:<13s} {value:>12d}  ({value / 1e6:.2f}M)")
    if args.out:
        out = _out_dir(args)
        path = out / "params.csv"
        path.write_text("quantity,count\n" + "".join(f"{n},{v}\n" for n, v in rows))
        import dataclasses

        write_manifest(out / "manifest.json", "params", argv, dataclasses.asdict(grid), None,
                       [args.config] if args.config else [], [path], time.time())
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    if args.config:
        config = _load_config(args)
    else:
        config = trainer.GRADCHECK_CONFIG if args.seed is None else trainer.GRADCHECK_CONFIG.replace(seed=args.seed)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    tol = args.tol if args.tol is not None else (1e-5 if dtype == np.float64 else 1e-3)
    report = trainer.end_to_end_gradient_check(config, n_probes=args.probes, h=args.h, tol=tol, dtype=dtype)
    for p in report.failing:
        print(f"  FAIL {p.name}{list(p.index)} analytic={p.analytic:.6e} numeric={p.numeric:.6e} "
              f"rel={p.rel_error:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict} probes={len(report.probes)} dtype={args.dtype} max_rel_error={report.max_rel_error:.3e} "
          f"tol={tol:g}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_sweep(args, argv) -> int:
    started = time.time()
    ckpt = _load_checkpoint(args.checkpoint)
    data = _dataset(args, ckpt.config)
    out = _out_dir(args)
    r_max = ckpt.config.r_max
    if args.amplitudes:
        amplitudes = [float(a) for a in args.amplitudes.split(",")]
    else:
        amplitudes = [0.0, 1 / (4 * r_max), 1 / (2 * r_max)]
    try:
        rows = analysis.precision_sweep(ckpt, data, amplitudes, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    path = out / "sweep.csv"
    path.write_text(analysis.sweep_csv(rows))
    sys.stdout.write(analysis.sweep_csv(rows))
    write_manifest(out / "manifest.json", "sweep", argv, _config_dict(ckpt.config), args.seed,
                   [args.checkpoint] + ([args.data] if args.data else []), [path], started)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read manifest {path}: {exc}") from exc
    return main(manifest["argv"])


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keygrid", description="Hash-table key-code autoencoder toolkit.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads (env BRIGHT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the autoencoder")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--data", help="directory of PNG/PPM images")
    t.add_argument("--synthetic", action="store_true", help="use the seeded synthetic dataset")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="image -> key-code file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="key-code file -> image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--keys", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("stats", help="hash-entry hit statistics over one pass of the data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--synthetic", action="store_true")
    s.add_argument("--seed", type=int, default=0, help="seed of the key perturbation")
    s.add_argument("--no-noise", action="store_true", help="collect with unperturbed keys")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    pa = sub.add_parser("params", help="parameter counts of a grid configuration")
    pa.add_argument("--config", help="training config file (its grid section is used)")
    pa.add_argument("--preset", choices=sorted(PRESETS), default="lsun")
    pa.add_argument("--key-len", type=int)
    pa.add_argument("--out")
    pa.set_defaults(func=cmd_params, seed=None, steps=None)

    g = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient check")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--probes", type=int, default=200)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float)
    g.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    g.set_defaults(func=cmd_gradcheck, steps=None)

    w = sub.add_parser("sweep", help="evaluation loss under uniform key perturbations")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--data")
    w.add_argument("--synthetic", action="store_true")
    w.add_argument("--amplitudes", help="comma-separated, ascending (default 0,1/(4 r_max),1/(2 r_max))")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
