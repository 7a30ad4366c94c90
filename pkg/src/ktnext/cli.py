"""Command-line front end: mask generation, simulation, training, reconstruction,
evaluation, and figure emission.

Heavy imports happen inside the command handlers so the BLAS thread caps set
by _configure_threads (from KTNEXT_THREADS, forced to 1 by --deterministic)
take effect before numpy first loads.

Exit codes: 0 success, 2 bad flags or values, 3 I/O failure, 4 file format
violation, 5 numeric failure.
"""

import argparse
import csv
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

_EXIT_FLAGS = 2
_EXIT_IO = 3
_EXIT_FORMAT = 4
_EXIT_NUMERIC = 5


def _configure_threads(deterministic: bool) -> None:
    # must run before numpy is imported anywhere in this process
    cap = "1" if deterministic else os.environ.get("KTNEXT_THREADS", "").strip()
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = cap


def _worker_count(deterministic: bool) -> int:
    if deterministic:
        return 1
    raw = os.environ.get("KTNEXT_THREADS", "").strip()
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _lambda_value(text: str) -> float:
    if text == "inf":
        return math.inf
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'inf', got {text!r}")
    if not value >= 0.0:
        raise argparse.ArgumentTypeError("--lambda must be nonnegative")
    return value


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def _manifest_path(output) -> Path:
    out = Path(output)
    if out.is_dir():
        return out / "manifest.json"
    return Path(str(out) + ".manifest.json")


def _write_manifest(args, command: str, config: dict, inputs: dict, outputs: dict,
                    extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in config.items()},
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "deterministic": bool(args.deterministic),
        "timestamp": None if args.deterministic
        else datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    path = _manifest_path(args.output)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _ensure_parent(path) -> None:
    parent = Path(path).parent
    if str(parent):
        parent.mkdir(parents=True, exist_ok=True)


def _model_config(args):
    from .model import KtNextConfig

    return KtNextConfig(
        n_cascades=args.cascades,
        channels=args.channels,
        dc_lambda=args.dc_lambda,
    )


def _config_dict(config) -> dict:
    from dataclasses import asdict

    return asdict(config)


def _sequence_files(path):
    """One .ckt file, or every .ckt in a directory (sorted for determinism)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.ckt"))
        if not files:
            raise FileNotFoundError(f"no .ckt sequences in {p}")
        return files
    if not p.exists():
        raise FileNotFoundError(str(p))
    return [p]


def _write_pgm(path, image) -> None:
    """Binary PGM, maxval 255; image is a 2-D float array already in [0, 1]."""
    import numpy as np

    u8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


# ------------------------------------------------------------------ commands


def cmd_mask(args) -> int:
    from .sampling import AcquisitionSpec, make_shear_mask, save_mask

    spec = AcquisitionSpec(accel=args.accel, n_center=args.center, pe_lines=args.cols)
    mask = make_shear_mask(spec, args.frames, args.cols)
    _ensure_parent(args.output)
    save_mask(args.output, mask)
    sampled = int(mask.bits.sum())
    effective = args.frames * args.cols / sampled
    print(f"wrote {args.output}: {args.frames} frames x {args.cols} columns, "
          f"{sampled} sampled, effective acceleration {effective!r}")
    _write_manifest(
        args, "mask",
        config={"accel": args.accel, "center": args.center,
                "frames": args.frames, "cols": args.cols, "shear_step": 1},
        inputs={},
        outputs={"mask": str(args.output)},
        extra={"effective_acceleration": effective},
    )
    return 0


def cmd_simulate(args) -> int:
    from .sampling import generate_phantom, load_mask, save_sequence, undersample

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    gt = generate_phantom(args.seed, args.frames, args.rows, args.cols)
    written = {"sequence": str(out / "sequence.ckt")}
    save_sequence(out / "sequence.ckt", gt)
    if args.mask:
        from .sampling import load_sequence

        mask = load_mask(args.mask)
        # measure the stored sequence, not the pre-quantization one, so the
        # file pair stays consistent after the float32 round trip
        meas = undersample(load_sequence(out / "sequence.ckt"), mask)
        save_sequence(out / "kspace.ckt", meas.kspace)
        written["kspace"] = str(out / "kspace.ckt")
    print(f"wrote {', '.join(sorted(written.values()))}")
    _write_manifest(
        args, "simulate",
        config={"seed": args.seed, "frames": args.frames,
                "rows": args.rows, "cols": args.cols},
        inputs={"mask": args.mask},
        outputs=written,
    )
    return 0


def cmd_train(args) -> int:
    from .model import fit, save_params
    from .sampling import load_mask, load_sequence

    config = _model_config(args)
    mask = load_mask(args.mask)
    files = _sequence_files(args.input)
    dataset = [load_sequence(f) for f in files]
    params, history = fit(dataset, mask, config, steps=args.steps,
                          seed=args.seed, lr=args.lr)
    _ensure_parent(args.checkpoint)
    save_params(args.checkpoint, params)
    _ensure_parent(args.output)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "psnr_train"])
        for rec in history:
            writer.writerow([rec.step, repr(rec.loss), repr(rec.psnr_train)])
    print(f"trained {args.steps} steps on {len(dataset)} sequences; "
          f"loss {history[0].loss!r} -> {history[-1].loss!r}")
    _write_manifest(
        args, "train",
        config=_config_dict(config),
        inputs={"input": str(args.input), "mask": str(args.mask)},
        outputs={"checkpoint": str(args.checkpoint), "history": str(args.output)},
        extra={"steps": args.steps, "lr": args.lr},
    )
    return 0


def cmd_reconstruct(args) -> int:
    from .model import ktnext_forward, load_params
    from .sampling import KtMeasurement, load_mask, load_sequence, save_sequence
    from .volume import Domain

    config = _model_config(args)
    params = load_params(args.checkpoint, config)
    mask = load_mask(args.mask)
    kspace = load_sequence(args.input, domain=Domain.KSPACE)
    meas = KtMeasurement(kspace=kspace, mask=mask)
    sigma, _, inter = ktnext_forward(meas, params, config)
    # a .ckt path gets only the final volume; anything else is a directory
    # that also receives the per-cascade intermediates
    if str(args.output).endswith(".ckt"):
        _ensure_parent(args.output)
        save_sequence(args.output, sigma)
        written = {"reconstruction": str(args.output)}
    else:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        save_sequence(out / "reconstruction.ckt", sigma)
        written = {"reconstruction": str(out / "reconstruction.ckt")}
        for n, stage in enumerate(inter):
            name = f"cascade_{n:02d}.ckt"
            save_sequence(out / name, stage.sigma)
            written[f"cascade_{n:02d}"] = str(out / name)
    print(f"reconstructed {args.input} -> {written['reconstruction']}")
    _write_manifest(
        args, "reconstruct",
        config=_config_dict(config),
        inputs={"input": str(args.input), "mask": str(args.mask),
                "checkpoint": str(args.checkpoint)},
        outputs=written,
    )
    return 0


def cmd_evaluate(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .metrics import compute_metrics
    from .model import ktnext_forward, load_params
    from .sampling import load_mask, load_sequence, undersample, zero_filled

    config = _model_config(args)
    params = load_params(args.checkpoint, config)
    mask = load_mask(args.mask)
    files = _sequence_files(args.input)

    def score(path):
        gt = load_sequence(path)
        meas = undersample(gt, mask)
        sigma, _, _ = ktnext_forward(meas, params, config)
        return compute_metrics(sigma, gt), compute_metrics(zero_filled(meas), gt)

    workers = _worker_count(args.deterministic)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, files))
    else:
        scored = [score(path) for path in files]
    _ensure_parent(args.output)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "psnr", "ssim", "hfen",
                         "psnr_zero_filled", "ssim_zero_filled", "hfen_zero_filled"])
        for path, (model_m, zf_m) in zip(files, scored):
            writer.writerow([path.name,
                             repr(model_m.psnr), repr(model_m.ssim), repr(model_m.hfen),
                             repr(zf_m.psnr), repr(zf_m.ssim), repr(zf_m.hfen)])
    print(f"evaluated {len(files)} sequences -> {args.output}")
    _write_manifest(
        args, "evaluate",
        config=_config_dict(config),
        inputs={"input": str(args.input), "mask": str(args.mask),
                "checkpoint": str(args.checkpoint)},
        outputs={"metrics": str(args.output)},
    )
    return 0


def _render_sequence(out: Path, prefix: str, vol) -> None:
    import numpy as np

    from .volume import fft_t

    mags = np.abs(vol.data)
    scale = float(mags.max()) or 1.0
    for t in range(mags.shape[0]):
        _write_pgm(out / f"{prefix}frame_{t:03d}.pgm", mags[t] / scale)
    row = vol.rows // 2
    _write_pgm(out / f"{prefix}xt_profile.pgm", mags[:, row, :] / scale)
    xf_mag = np.abs(fft_t(vol).data)[:, row, :]
    xf_scale = float(xf_mag.max()) or 1.0  # f=0 dominates; own scale keeps replicas visible
    _write_pgm(out / f"{prefix}xf_plane.pgm", xf_mag / xf_scale)


def cmd_render(args) -> int:
    import numpy as np

    from .sampling import load_sequence

    seq = load_sequence(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _render_sequence(out, "", seq)
    rendered_recon = False
    if args.checkpoint:
        if not args.mask:
            raise ValueError("rendering a reconstruction needs --mask alongside --checkpoint")
        from .model import ktnext_forward, load_params
        from .sampling import load_mask, undersample

        config = _model_config(args)
        params = load_params(args.checkpoint, config)
        mask = load_mask(args.mask)
        meas = undersample(seq, mask)
        sigma, _, _ = ktnext_forward(meas, params, config)
        _render_sequence(out, "recon_", sigma)
        scale = float(np.abs(seq.data).max()) or 1.0
        for t in range(seq.t_frames):
            err = np.abs(sigma.data[t] - seq.data[t]) / scale
            _write_pgm(out / f"error_{t:03d}.pgm", 6.0 * err)  # x6, as error maps are usually shown
        rendered_recon = True
    print(f"rendered {seq.t_frames} frames to {out}"
          + (" (with reconstruction and error maps)" if rendered_recon else ""))
    config = _config_dict(_model_config(args)) if args.checkpoint else {}
    _write_manifest(
        args, "render",
        config=config,
        inputs={"input": str(args.input), "mask": args.mask, "checkpoint": args.checkpoint},
        outputs={"directory": str(out)},
    )
    return 0


# ------------------------------------------------------------------ wiring


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, timestamp-free, byte-reproducible run")

    parser = argparse.ArgumentParser(
        prog="ktnext",
        description="Dynamic MRI reconstruction by alternating x-f de-aliasing "
                    "and recurrent image refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", parents=[common], help="generate a shear-grid sampling mask")
    p.add_argument("--accel", type=int, required=True)
    p.add_argument("--center", type=int, default=4)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("simulate", parents=[common],
                       help="generate a dynamic phantom (and its masked k-space)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--cols", type=int, default=32)
    p.add_argument("--mask")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train on fully sampled sequences")
    p.add_argument("--input", required=True, help=".ckt file or directory of them")
    p.add_argument("--mask", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cascades", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="dc_lambda", type=_lambda_value, default="inf")
    p.add_argument("--checkpoint", required=True, help="output weights file")
    p.add_argument("--output", required=True, help="output history CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="reconstruct a measured k-space sequence")
    p.add_argument("--input", required=True, help="k-space .ckt file")
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cascades", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--lambda", dest="dc_lambda", type=_lambda_value, default="inf")
    p.add_argument("--output", required=True,
                   help=".ckt file for the final volume, or a directory "
                        "to also keep per-cascade intermediates")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score reconstructions against ground truth")
    p.add_argument("--input", required=True, help="ground-truth .ckt file or directory")
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cascades", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--lambda", dest="dc_lambda", type=_lambda_value, default="inf")
    p.add_argument("--output", required=True, help="output metrics CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common],
                       help="emit grayscale PGM figures for a sequence")
    p.add_argument("--input", required=True, help="image-domain .ckt file")
    p.add_argument("--mask")
    p.add_argument("--checkpoint", help="also render the model reconstruction and error maps")
    p.add_argument("--cascades", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--lambda", dest="dc_lambda", type=_lambda_value, default="inf")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_threads(args.deterministic)
    # imported lazily so the thread caps above are already in place
    from .metrics import UndefinedMetricError
    from .model import NonFiniteLossError
    from .sampling import FileFormatError

    try:
        return args.func(args)
    except FileFormatError as exc:
        print(f"error: malformed file: {exc}", file=sys.stderr)
        return _EXIT_FORMAT
    except (NonFiniteLossError, UndefinedMetricError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_FLAGS


if __name__ == "__main__":
    sys.exit(main())
