"""Command-line interface: train, eval, infer, bench-scan, selftest, gen-data.

One JSON config file drives everything, with strict unknown-key rejection
in every section:

    {"model": {...}, "train": {...}, "data": {...}}

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.  All
artifacts are written inside the directory given by --out, atomically
(temp file + rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import struct
import sys
import tempfile
import time

import numpy as np

from . import metrics, weights_io
from .data import DatasetError, SyntheticDatasetSpec, generate_dataset, load_or_generate
from .nd import scan_kernel
from .train import TrainConfig, evaluate, predict, train
from .unet import ConfigError, ModelConfig, config_from_json

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

RAW_MAGIC = b"MRAW"
RAW_DTYPES = {0: np.uint8, 1: np.float32, 2: np.float64}
RAW_CODES = {np.dtype(v).name: k for k, v in RAW_DTYPES.items()}

CONFIG_SECTIONS = ("model", "train", "data")


class CliError(Exception):
    """An error with a chosen exit status and a user-facing message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# file helpers

def _write_atomic(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".out-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_pgm(path: str) -> np.ndarray:
    """8-bit binary PGM (P5) as floats in [0, 1]; comments are honored."""
    blob = open(path, "rb").read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        return blob[start:pos]

    if token() != b"P5":
        raise CliError(EXIT_USAGE, f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise CliError(EXIT_USAGE, f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise CliError(EXIT_USAGE, f"{path}: only 8-bit PGM supported (maxval 255)")
    pos += 1  # single whitespace byte separates header from pixels
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise CliError(EXIT_USAGE, f"{path}: truncated PGM payload")
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    _write_atomic(path, header + image.tobytes())


def read_raw(path: str) -> np.ndarray:
    """Little-endian grid with a 16-byte header: magic, H, W, dtype code."""
    blob = open(path, "rb").read()
    if len(blob) < 16 or blob[:4] != RAW_MAGIC:
        raise CliError(EXIT_USAGE, f"{path}: not a raw grid file")
    height, width, code = struct.unpack("<III", blob[4:16])
    if code not in RAW_DTYPES:
        raise CliError(EXIT_USAGE, f"{path}: unknown raw dtype code {code}")
    dtype = np.dtype(RAW_DTYPES[code]).newbyteorder("<")
    expected = 16 + height * width * dtype.itemsize
    if len(blob) != expected:
        raise CliError(EXIT_USAGE, f"{path}: raw payload size mismatch")
    grid = np.frombuffer(blob, dtype=dtype, offset=16).reshape(height, width)
    return grid.astype(np.float64)


def write_raw(path: str, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    code = RAW_CODES.get(grid.dtype.name)
    if code is None:
        raise ValueError(f"unsupported raw dtype {grid.dtype}")
    header = RAW_MAGIC + struct.pack("<III", grid.shape[0], grid.shape[1], code)
    payload = np.ascontiguousarray(grid, dtype=grid.dtype.newbyteorder("<"))
    _write_atomic(path, header + payload.tobytes())


def load_input_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"input image not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:2] == b"P5":
        return read_pgm(path)
    if head == RAW_MAGIC:
        grid = read_raw(path)
        return grid
    raise CliError(EXIT_USAGE, f"{path}: unrecognized image format (want PGM or raw)")


# ---------------------------------------------------------------------------
# config plumbing

def read_config(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"config file not found: {path}")
    try:
        doc = json.loads(open(path, "rb").read().decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_USAGE, f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError(EXIT_USAGE, f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise CliError(
            EXIT_USAGE, f"{path}: unknown config sections: {', '.join(unknown)}"
        )
    return doc


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise CliError(EXIT_USAGE, f"config is missing the '{name}' section")
    if not isinstance(doc[name], dict):
        raise CliError(EXIT_USAGE, f"config section '{name}' must be an object")
    return doc[name]


def model_config(doc: dict) -> ModelConfig:
    try:
        return config_from_json(json.dumps(_section(doc, "model")))
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, f"model config: {exc}") from None


def train_config(doc: dict, seed_override=None, threads=None) -> TrainConfig:
    section = dict(_section(doc, "train"))
    if seed_override is not None:
        section["seed"] = seed_override
    if threads is not None:
        section["threads"] = threads
    try:
        return TrainConfig(**section)
    except TypeError as exc:
        raise CliError(EXIT_USAGE, f"train config: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"train config: {exc}") from None


def data_spec(doc: dict, seed_override=None) -> SyntheticDatasetSpec:
    section = dict(_section(doc, "data"))
    if seed_override is not None:
        section["seed"] = seed_override
    if isinstance(section.get("shape_kinds"), list):
        section["shape_kinds"] = tuple(section["shape_kinds"])
    try:
        return SyntheticDatasetSpec(**section)
    except TypeError as exc:
        raise CliError(EXIT_USAGE, f"data config: {exc}") from None
    except DatasetError as exc:
        raise CliError(EXIT_USAGE, f"data config: {exc}") from None


def _ensure_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    doc = read_config(args.config)
    out = _ensure_out(args)
    mcfg = model_config(doc)
    tcfg = train_config(doc, seed_override=args.seed, threads=args.threads)
    spec = data_spec(doc)
    dataset = load_or_generate(spec, os.path.join(out, "dataset.bin"))

    log_tmp = os.path.join(out, ".train_log.tmp")
    result = train(
        mcfg,
        tcfg,
        dataset=dataset,
        checkpoint_path=os.path.join(out, "checkpoint.bin"),
        log_path=log_tmp,
    )
    os.replace(log_tmp, os.path.join(out, "train_log.jsonl"))

    print(f"trained {tcfg.iterations} iterations on {dataset.split_sizes()['train']} images")
    print(f"best validation dice {result.best_val_dice:.4f} at iteration {result.best_iteration}")
    print(f"checkpoint: {os.path.join(out, 'checkpoint.bin')}")
    print(f"log: {os.path.join(out, 'train_log.jsonl')}")
    return EXIT_OK


def _load_weights_checked(path: str):
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"weights file not found: {path}")
    try:
        return weights_io.load_weights(path)
    except weights_io.WeightFormatError as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    doc = read_config(args.config)
    out = _ensure_out(args)
    weights = _load_weights_checked(args.weights)
    if "model" in doc and model_config(doc) != weights.config:
        raise CliError(
            EXIT_USAGE, "weights were trained with a different model config"
        )
    spec = data_spec(doc)
    dataset = generate_dataset(spec)

    report, dices = evaluate(weights, dataset, split=args.split, threads=args.threads)
    edges, counts = metrics.dice_histogram(dices, bins=10)

    payload = report.to_json_dict()
    payload["per_image_dice"] = dices
    payload["split"] = args.split
    _write_atomic(
        os.path.join(out, "report.json"),
        (json.dumps(payload, indent=2) + "\n").encode(),
    )
    _write_atomic(os.path.join(out, "report.csv"), report.to_csv().encode())
    _write_atomic(
        os.path.join(out, "histogram.csv"),
        metrics.histogram_csv(edges, counts).encode(),
    )

    mean_dice = report.mean["dice"]
    print(f"evaluated {report.num_images} images from split '{args.split}'")
    print(f"mean foreground dice {mean_dice:.4f}" if mean_dice is not None else "no foreground")
    print(f"reports: {out}/report.json, {out}/report.csv, {out}/histogram.csv")
    return EXIT_OK


def cmd_infer(args) -> int:
    weights = _load_weights_checked(args.weights)
    out = _ensure_out(args)
    cfg = weights.config
    if cfg.in_channels != 1:
        raise CliError(
            EXIT_USAGE, "infer accepts single-channel inputs; weights expect "
            f"{cfg.in_channels} channels"
        )
    scale = 255 // (cfg.num_classes - 1)
    for path in args.inputs:
        image = load_input_image(path)
        if image.shape != (cfg.input_h, cfg.input_w):
            raise CliError(
                EXIT_USAGE,
                f"{path}: image is {image.shape}, weights expect "
                f"({cfg.input_h}, {cfg.input_w})",
            )
        pred = predict(image[None, :, :, None], weights, threads=args.threads)[0]
        stem = os.path.basename(path)  # keep the extension: stems may collide
        pgm_path = os.path.join(out, f"{stem}.pred.pgm")
        raw_path = os.path.join(out, f"{stem}.pred.raw")
        write_pgm(pgm_path, (pred * scale).astype(np.uint8))
        write_raw(raw_path, pred.astype(np.uint8))
        print(f"{path} -> {pgm_path}, {raw_path}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    doc = read_config(args.config)
    out = _ensure_out(args)
    spec = data_spec(doc, seed_override=args.seed)
    dataset = generate_dataset(spec)
    from .data import save_dataset

    path = os.path.join(out, "dataset.bin")
    save_dataset(dataset, path)
    sizes = dataset.split_sizes()
    print(f"wrote {spec.num_samples} samples to {path}")
    print(f"splits: train {sizes['train']}, val {sizes['val']}, test {sizes['test']}")
    print(f"spec digest: {spec.digest().hex()}")
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v]
    states = [int(v) for v in args.states.split(",") if v]
    threads = args.threads if args.threads else (os.cpu_count() or 1)
    rng = np.random.default_rng(0)
    rows = []
    for length in lengths:
        for state in states:
            a = rng.uniform(0.0, 1.0, size=(length, state))
            b = rng.normal(size=(length, state))
            h0 = np.zeros(state)
            seq = scan_kernel.scan_sequential(a, b, h0)
            par = scan_kernel.scan_blocked(a, b, h0, block=args.block, threads=threads)
            scale = max(np.abs(seq).max(), 1e-10)
            deviation = float(np.abs(seq - par).max() / scale)
            if deviation >= 1e-10:
                print(f"FAIL: parallel deviates from sequential by {deviation:.2e}")
                return EXIT_RUNTIME

            seq_times, par_times = [], []
            for _ in range(args.reps):
                t0 = time.perf_counter()
                scan_kernel.scan_sequential(a, b, h0)
                seq_times.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                scan_kernel.scan_blocked(a, b, h0, block=args.block, threads=threads)
                par_times.append(time.perf_counter() - t0)
            seq_ms = statistics.median(seq_times) * 1e3
            par_ms = statistics.median(par_times) * 1e3
            rows.append(
                {
                    "length": length,
                    "state": state,
                    "seq_ms": round(seq_ms, 3),
                    "par_ms": round(par_ms, 3),
                    "speedup": round(seq_ms / par_ms, 3) if par_ms else None,
                    "max_rel_deviation": deviation,
                }
            )

    print(f"{'length':>8} {'state':>6} {'seq_ms':>10} {'par_ms':>10} {'speedup':>8}")
    for row in rows:
        print(
            f"{row['length']:>8} {row['state']:>6} {row['seq_ms']:>10.3f} "
            f"{row['par_ms']:>10.3f} {row['speedup']:>8.3f}"
        )

    cpu = os.cpu_count() or 1
    target_rows = [r for r in rows if r["length"] >= 16384 and r["state"] == 16]
    achieved = bool(target_rows) and all(
        r["par_ms"] <= r["seq_ms"] for r in target_rows
    )
    verdict = {
        "rows_considered": len(target_rows),
        "parallel_not_slower": achieved,
        "threads_used": threads,
        "cpu_count": cpu,
        "note": "soft target; expected to hold on >=4 hardware threads",
    }
    if target_rows:
        state_txt = "met" if achieved else "not met"
        print(
            f"soft target (L>=16384, N=16, parallel <= sequential): {state_txt} "
            f"on {threads} thread(s), {cpu} cpu(s) visible"
        )

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = {
            "threads": threads,
            "block": args.block,
            "reps": args.reps,
            "cpu_count": cpu,
            "rows": rows,
            "soft_target": verdict,
        }
        path = os.path.join(args.out, "bench_scan.json")
        _write_atomic(path, (json.dumps(report, indent=2) + "\n").encode())
        print(f"report: {path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok, lines = run_selftest(verbose=args.verbose)
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mambaseg",
        description="Selective state-space U-Net: train, evaluate, and inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, weights=False, out=False):
        if config:
            p.add_argument("--config", required=True, help="JSON config path")
        if weights:
            p.add_argument("--weights", required=True, help="weight file path")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1, help="scan worker threads")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train", help="train on the configured synthetic dataset")
    common(p, config=True, out=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="write metric reports for a trained model")
    common(p, config=True, weights=True, out=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="segment PGM or raw grid images")
    common(p, weights=True, out=True)
    p.add_argument("inputs", nargs="+", help="input image paths")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("gen-data", help="materialize the synthetic dataset cache")
    common(p, config=True, out=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("bench-scan", help="time sequential vs parallel scans")
    p.add_argument("--lengths", default="4096,16384", help="comma-separated L values")
    p.add_argument("--states", default="16", help="comma-separated N values")
    p.add_argument("--reps", type=int, default=3, help="timing repetitions")
    p.add_argument("--block", type=int, default=scan_kernel.DEFAULT_BLOCK)
    p.add_argument("--threads", type=int, default=0, help="0 = use all cpus")
    p.add_argument("--out", default=None, help="optional report directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(handler=cmd_bench_scan)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(handler=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetError, weights_io.WeightFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
