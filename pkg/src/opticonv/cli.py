"""Command-line entry point tying the pipeline together.

Subcommands: quantize, train, finetune, eval, simulate, perf. One structured
JSON config document carries every knob with paper-faithful defaults;
command-line flags override single values (flag wins). Artifacts land in a
run directory named by the hash of the effective config, so rerunning the
same invocation reproduces the same files byte for byte (timestamps appear
only in log lines).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import datapipe, fieldio, network, perfmodel
from .datapipe import DataFormatError
from .network import TrainingDivergedError
from .optics import FieldPlane, NoiseSpec, OpticalConfig, camera_capture, cft2, ideal_aperture, multi_kernel_forward

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class QuantizeConfig:
    levels: int = 4
    threshold_frac: float = 0.8


@dataclass(frozen=True)
class LayoutConfig:
    gap_px: int = 30
    padding: int = 1
    grid: list | None = None  # [rows, cols] or null for the largest fit


@dataclass(frozen=True)
class TrainSection:
    lr_stage1: float = 0.01
    lr_stage2: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    epochs_stage1: int = 10
    epochs_stage2: int = 5
    grid: int = 256
    dtype: str = "float32"
    n_kernels: int = 16
    hidden: int = 256
    limit: int | None = None  # cap on training images, None = full split
    capture_n: int = 2000  # stage-2 capture set size


@dataclass(frozen=True)
class NoiseSection:
    sigma: float = 0.1
    dark: float = 0.0
    bin_factor: int = 1
    seed: int = 1

    def to_spec(self) -> NoiseSpec:
        return NoiseSpec(self.sigma, self.dark, self.bin_factor, self.seed)


@dataclass(frozen=True)
class PerfSection:
    presets: tuple[str, ...] = ("Gen1.0", "Gen1.1", "Gen1.2", "Gen1.3")
    modes: tuple[str, ...] = ("fft", "brute")
    high_res: bool = False


@dataclass(frozen=True)
class PathsSection:
    mnist: str = "/root/data/mnist"
    cifar10: str = "/root/data/cifar-10-batches-bin"
    quickdraw: str = "/root/data/quickdraw"


@dataclass(frozen=True)
class RunConfig:
    """Structured config document; every field has a paper-faithful default
    where one exists. Unknown keys in a config file are rejected."""

    seed: int = 0
    optical: OpticalConfig = OpticalConfig()
    quantize: QuantizeConfig = QuantizeConfig()
    layout: LayoutConfig = LayoutConfig()
    train: TrainSection = TrainSection()
    noise: NoiseSection = NoiseSection()
    perf: PerfSection = PerfSection()
    paths: PathsSection = PathsSection()


_SECTION_TYPES = {
    "optical": OpticalConfig,
    "quantize": QuantizeConfig,
    "layout": LayoutConfig,
    "train": TrainSection,
    "noise": NoiseSection,
    "perf": PerfSection,
    "paths": PathsSection,
}


def _build_section(cls, doc: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise UsageError(f"unknown config key(s) {sorted(unknown)} in section {where!r}")
    coerced = dict(doc)
    for f in fields(cls):
        if f.name in coerced and f.type in ("tuple[str, ...]",):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise UsageError("config document must be a JSON object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - allowed
    if unknown:
        raise UsageError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            kwargs["seed"] = int(value)
        else:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
    return RunConfig(**kwargs)


def config_digest(cfg: RunConfig, command: str) -> str:
    doc = {"command": command, **asdict(cfg)}
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _run_dir(out_dir: str, cfg: RunConfig, command: str) -> Path:
    d = Path(out_dir) / f"{command}-{config_digest(cfg, command)}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


# ---------------------------------------------------------------------------
# dataset helpers


def _load_dataset(kind: str, cfg: RunConfig) -> datapipe.Dataset:
    if kind == "mnist":
        return datapipe.load_mnist(cfg.paths.mnist)
    if kind == "cifar10":
        return datapipe.load_cifar10(cfg.paths.cifar10)
    if kind == "quickdraw":
        return datapipe.load_quickdraw(cfg.paths.quickdraw)
    raise UsageError(f"unknown dataset {kind!r}")


def _binarize_split(images: np.ndarray, threshold_frac: float) -> np.ndarray:
    return np.stack([datapipe.binarize_gray(img, threshold_frac) for img in images])


# ---------------------------------------------------------------------------
# subcommands


def cmd_quantize(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "quantize")
    ds = _load_dataset(args.dataset, cfg)
    images = ds.test_images if args.split == "test" else ds.train_images
    limit = args.limit if args.limit else len(images)
    images = images[:limit]
    levels = args.levels if args.levels is not None else cfg.quantize.levels
    grayscale = images.ndim == 3
    scores = []
    manifest_rows = []
    for idx, img in enumerate(images):
        if grayscale and args.levels is None:
            # threshold mode: one plane at the configured fraction of peak
            plane = datapipe.binarize_gray(img, cfg.quantize.threshold_frac)
            stack = datapipe.BitPlaneStack(
                planes=plane[None],
                thresholds=(cfg.quantize.threshold_frac,),
                channel_of_plane=(0,),
                source_shape=(*img.shape, 1),
            )
            recon = plane.astype(np.float64) * datapipe.FULL_SCALE  # full-scale display
        else:
            stack = (
                datapipe.quantize_gray(img, levels)
                if grayscale
                else datapipe.quantize_rgb(img, levels)
            )
            recon = datapipe.recombine(stack)
        scores.append(datapipe.ssim(img, recon))
        p4, man = datapipe.export_stack(stack, run_dir / f"img{idx:05d}")
        manifest_rows.append({"index": idx, "planes": stack.planes.shape[0], "file": p4.name})
    mean_ssim = float(np.mean(scores))
    summary = {
        "dataset": args.dataset,
        "split": args.split,
        "count": len(images),
        "planes_per_image": manifest_rows[0]["planes"] if manifest_rows else 0,
        "mean_ssim": mean_ssim,
        "images": manifest_rows,
    }
    (run_dir / "manifest.json").write_text(json.dumps(summary, indent=1) + "\n")
    _log(f"quantized {len(images)} {args.dataset} images -> {run_dir}")
    print(f"mean SSIM: {mean_ssim:.4f}")
    return EXIT_OK


def _train_config(cfg: RunConfig) -> network.TrainConfig:
    t = cfg.train
    return network.TrainConfig(
        lr_stage1=t.lr_stage1,
        lr_stage2=t.lr_stage2,
        momentum=t.momentum,
        batch_size=t.batch_size,
        epochs_stage1=t.epochs_stage1,
        epochs_stage2=t.epochs_stage2,
        seed=cfg.seed,
        noise=cfg.noise.to_spec(),
        grid=t.grid,
        dtype=t.dtype,
    )


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "train")
    ds = _load_dataset(args.dataset, cfg)
    bits = _binarize_split(ds.train_images, cfg.quantize.threshold_frac)
    labels = ds.train_labels
    if cfg.train.limit:
        bits, labels = bits[: cfg.train.limit], labels[: cfg.train.limit]
    tconf = _train_config(cfg)
    _log(f"stage 1 on {len(bits)} {args.dataset} images, grid {tconf.grid}")
    params = network.init_params(
        seed=cfg.seed,
        n_kernels=cfg.train.n_kernels,
        grid=tconf.grid,
        image_hw=bits.shape[1:],
        n_classes=ds.n_classes,
        hidden=cfg.train.hidden,
        highpass_mask_enabled=not args.no_highpass,
    )
    params, trace = network.train_stage1(
        (bits, labels), tconf, params=params, n_classes=ds.n_classes,
        workers=args.threads, log_every=args.log_every,
    )
    ckpt = network.save_checkpoint(params, run_dir / "stage1.ckpt", stage=1, seed=cfg.seed)
    network.write_trace_csv(trace, run_dir / "trace.csv")
    _log(f"checkpoint -> {ckpt}")
    print(f"final train accuracy: {trace[-1]['accuracy']:.4f}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "finetune")
    params, header = network.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset, cfg)
    bits = _binarize_split(ds.train_images[: cfg.train.capture_n], cfg.quantize.threshold_frac)
    labels = ds.train_labels[: cfg.train.capture_n]
    tconf = _train_config(cfg)
    _log(f"capturing {len(bits)} optical-path outputs (sigma={cfg.noise.sigma})")
    captured = network.capture_features(
        params, bits, cfg.optical, cfg.noise.to_spec(), seed=cfg.seed, workers=args.threads
    )
    params, trace = network.finetune_stage2(params, (captured, labels), tconf)
    ckpt = network.save_checkpoint(params, run_dir / "stage2.ckpt", stage=2, seed=cfg.seed)
    network.write_trace_csv(trace, run_dir / "trace.csv")
    _log(f"checkpoint -> {ckpt}")
    print(f"final stage-2 train accuracy: {trace[-1]['accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "eval")
    params, header = network.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset, cfg)
    if ds.test_images.shape[1:3] != params.image_hw:
        raise DataFormatError(
            f"dataset geometry {ds.test_images.shape[1:3]} does not match "
            f"checkpoint window {params.image_hw}"
        )
    bits = _binarize_split(ds.test_images, cfg.quantize.threshold_frac)
    labels = ds.test_labels
    if args.limit:
        bits, labels = bits[: args.limit], labels[: args.limit]
    noise = cfg.noise.to_spec() if args.mode == "optical" and cfg.noise.sigma > 0 else None
    result = network.evaluate(
        params, (bits, labels), mode=args.mode, config=cfg.optical, noise=noise,
        workers=args.threads,
    )
    metrics = {
        "dataset": args.dataset,
        "mode": args.mode,
        "n": result.n_samples,
        "accuracy": result.accuracy,
        "confusion": result.confusion.tolist(),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    print(f"{args.dataset}  accuracy {result.accuracy * 100:.2f}%  ({result.n_samples} samples)")
    return EXIT_OK


def _load_sim_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        parts = raw.split(maxsplit=4)
        w, h = int(parts[1]), int(parts[2])
        return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    raise DataFormatError(f"{path}: expected .npy or binary P5 graymap")


def cmd_simulate(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "simulate")
    img = _load_sim_image(Path(args.image))
    g = cfg.train.grid
    if img.shape[0] > g or img.shape[1] > g:
        raise DataFormatError(f"image {img.shape} exceeds the {g}-px simulation grid")
    bits = (img > 0).astype(np.uint8)
    frame = np.zeros((g, g), dtype=np.uint8)
    r0, c0 = (g - bits.shape[0]) // 2, (g - bits.shape[1]) // 2
    frame[r0 : r0 + bits.shape[0], c0 : c0 + bits.shape[1]] = bits
    plane = FieldPlane.from_bits(frame, cfg.optical.dmd_pitch)

    if args.checkpoint:
        params, _ = network.load_checkpoint(args.checkpoint)
        bank = network.binarized_kernels(params)[: args.kernels]
    else:
        bank = np.ones((args.kernels, g, g))
    kernels = list(bank)
    aperture = ideal_aperture(range(len(kernels)), (g, g), cfg.optical)
    outputs = multi_kernel_forward(plane, kernels, cfg.optical, aperture)
    noise = cfg.noise.to_spec() if cfg.noise.sigma > 0 else None
    rng = np.random.default_rng(cfg.seed)
    outputs = [camera_capture(o, noise, rng=rng) for o in outputs]

    pitch = cfg.optical.dmd_pitch
    fieldio.write_pgm(frame, run_dir / "input.pgm")
    fieldio.write_raw(frame.astype(np.float64), run_dir / "input.f64", pitch)
    spectrum_mag = np.abs(cft2(plane.amplitude))
    fieldio.write_pgm(spectrum_mag, run_dir / "fourier_mag.pgm")
    fieldio.write_raw(spectrum_mag, run_dir / "fourier_mag.f64", pitch)
    n_windows = 0
    for kidx, out in enumerate(outputs):
        fieldio.write_pgm(out, run_dir / f"kernel{kidx}.pgm")
        fieldio.write_raw(out, run_dir / f"kernel{kidx}.f64", pitch)
        if args.windows:
            rows, cols = (int(t) for t in args.windows.split("x"))
            wh, ww = bits.shape[0] // rows, bits.shape[1] // cols
            for r in range(rows):
                for c in range(cols):
                    win = out[
                        r0 + r * wh : r0 + (r + 1) * wh, c0 + c * ww : c0 + (c + 1) * ww
                    ]
                    fieldio.write_pgm(win, run_dir / f"kernel{kidx}_win{r}_{c}.pgm")
                    n_windows += 1
    _log(f"simulate: {len(outputs)} kernel outputs, {n_windows} windows -> {run_dir}")
    return EXIT_OK


def cmd_perf(args, cfg: RunConfig) -> int:
    run_dir = _run_dir(args.out_dir, cfg, "perf")
    presets = [
        perfmodel.generation_preset(name, high_res=cfg.perf.high_res)
        for name in cfg.perf.presets
    ]
    if args.custom:
        m, n, i, k, f = args.custom
        presets.append(
            perfmodel.custom_scenario(
                int(m), int(n), input_parallelism=int(i), kernel_parallelism=int(k),
                frame_rate_hz=float(f),
            )
        )
    rows = perfmodel.sweep_report(presets, modes=cfg.perf.modes)
    csv_path = perfmodel.write_report_csv(rows, run_dir / "perf.csv")
    json_path = perfmodel.write_report_json(rows, run_dir / "perf.json")
    _log(f"{len(rows)} report rows -> {csv_path}, {json_path}")
    for row in rows:
        print(
            f"{row['generation']:8s} {row['mode']:6s} {row['ops_per_watt']:.4e} OPS/W  "
            f"latency {row['latency_s'] * 1e3:.2f} ms  bottleneck {row['bottleneck']}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="opticonv", description=__doc__)
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out-dir", default="runs", help="root directory for run artifacts")
    p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="bit-plane quantization + SSIM summary")
    q.add_argument("--dataset", required=True, choices=("mnist", "cifar10", "quickdraw"))
    q.add_argument("--split", default="test", choices=("train", "test"))
    q.add_argument("--levels", type=int, default=None,
                   help="threshold-ladder levels; omit for grayscale threshold mode")
    q.add_argument("--limit", type=int, default=100, help="max images to export")
    q.set_defaults(fn=cmd_quantize)

    t = sub.add_parser("train", help="stage-1 noise-free training")
    t.add_argument("--dataset", required=True, choices=("mnist", "cifar10", "quickdraw"))
    t.add_argument("--no-highpass", action="store_true", help="disable the center-3x3 kernel mask")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    ft = sub.add_parser("finetune", help="stage-2 head calibration on noisy captures")
    ft.add_argument("checkpoint")
    ft.add_argument("--dataset", required=True, choices=("mnist", "cifar10", "quickdraw"))
    ft.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="test-split accuracy and confusion")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", required=True, choices=("mnist", "cifar10", "quickdraw"))
    e.add_argument("--mode", default="digital", choices=("digital", "optical"))
    e.add_argument("--limit", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("simulate", help="single-frame end-to-end optical dump")
    s.add_argument("image", help="input pattern (.npy or binary P5 graymap)")
    s.add_argument("--kernels", type=int, default=1, help="parallel kernel count")
    s.add_argument("--checkpoint", help="take kernels from a trained checkpoint")
    s.add_argument("--windows", help="untile outputs as RxC windows, e.g. 7x7")
    s.set_defaults(fn=cmd_simulate)

    pf = sub.add_parser("perf", help="throughput/energy sweep report")
    pf.add_argument("--custom", nargs=5, metavar=("M", "N", "I", "K", "F"),
                    help="append one custom scenario (image MxN, parallelism IxK, rate F)")
    pf.set_defaults(fn=cmd_perf)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
