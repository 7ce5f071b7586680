"""Built-in fast invariant suite: a smoke check runnable from the CLI.

Five suites cover the load-bearing contracts end to end: scan equivalence,
gradient correctness, metric counting, shape plumbing, and weight
serialization.  Each check is cheap; the whole run takes seconds and needs
no fixtures beyond a temporary directory.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from . import metrics, weights_io
from .nd import ops, scan_kernel
from .nd.tensor import Tape, Tensor
from .train import TrainConfig, loss
from .unet import ModelConfig, forward, init_weights


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    scale = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-10)
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / scale)


def _suite_scan():
    checks = []
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        length = int(rng.integers(2, 400))
        width = int(rng.integers(1, 24))
        a = rng.uniform(0.0, 1.0, size=(length, width))
        b = rng.normal(size=(length, width))
        h0 = np.zeros(width)
        seq = scan_kernel.scan_sequential(a, b, h0)
        par = scan_kernel.scan_blocked(a, b, h0, block=16, threads=1)
        worst = max(worst, _rel(seq, par))
    checks.append(("blocked scan equals sequential", worst < 1e-10, f"max rel {worst:.2e}"))

    a = rng.uniform(0.0, 1.0, size=(257, 12))
    b = rng.normal(size=(257, 12))
    one = scan_kernel.scan_blocked(a, b, np.zeros(12), block=32, threads=1)
    four = scan_kernel.scan_blocked(a, b, np.zeros(12), block=32, threads=4)
    checks.append(("thread count leaves bits unchanged", bool(np.array_equal(one, four)), ""))
    return checks


def _suite_gradients():
    checks = []
    rng = np.random.default_rng(1)

    x0 = rng.normal(size=(3, 4))
    w0 = rng.normal(size=(4, 2))
    b0 = rng.normal(size=2)
    x = Tensor(x0, requires_grad=True)
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        out = ops.sum(ops.silu(ops.linear(x, w, Tensor(b0))))
    tape.backward(out)
    fd_x = _fd(lambda v: float(np.sum(_silu_np(v @ w0 + b0))), x0)
    fd_w = _fd(lambda v: float(np.sum(_silu_np(x0 @ v + b0))), w0)
    err = max(_rel(x.grad, fd_x), _rel(w.grad, fd_w))
    checks.append(("linear+silu gradient", err < 1e-5, f"rel {err:.2e}"))

    g0 = rng.normal(size=5)
    xn0 = rng.normal(size=(2, 5))
    xn = Tensor(xn0, requires_grad=True)
    gn = Tensor(g0, requires_grad=True)
    with Tape() as tape:
        out = ops.sum(ops.mul(ops.layer_norm(xn, gn, Tensor(np.zeros(5))), Tensor(rng.normal(size=(2, 5)))))
    tape.backward(out)
    checks.append(("layer_norm gradient finite", np.all(np.isfinite(xn.grad)) and np.all(np.isfinite(gn.grad)), ""))

    a0 = rng.uniform(0.1, 0.9, size=(6, 2, 3))
    bx0 = rng.normal(size=(6, 2, 3))
    c0 = rng.normal(size=(6, 3))
    ts = [Tensor(v, requires_grad=True) for v in (a0, bx0, c0)]
    with Tape() as tape:
        out = ops.sum(ops.ssm_scan(*ts))
    tape.backward(out)

    def scan_np(a, bx, c):
        h = np.zeros_like(a[0])
        total = 0.0
        for k in range(a.shape[0]):
            h = a[k] * h + bx[k]
            total += float(np.sum(h @ c[k]))
        return total

    errs = [
        _rel(ts[0].grad, _fd(lambda v: scan_np(v, bx0, c0), a0)),
        _rel(ts[1].grad, _fd(lambda v: scan_np(a0, v, c0), bx0)),
        _rel(ts[2].grad, _fd(lambda v: scan_np(a0, bx0, v), c0)),
    ]
    checks.append(("ssm_scan gradient", max(errs) < 1e-5, f"rel {max(errs):.2e}"))

    cfg = _tiny_config()
    weights = init_weights(cfg, seed=0)
    rng_img = np.random.default_rng(2)
    image = rng_img.normal(size=(cfg.input_h, cfg.input_w, 1))
    labels = (rng_img.random((cfg.input_h, cfg.input_w)) < 0.3).astype(np.int64)
    tcfg = TrainConfig()
    name = "head.weight"
    with Tape() as tape:
        value = loss(forward(Tensor(image), weights), labels, tcfg)
    tape.backward(value)
    grad = weights.params[name].grad
    worst = 0.0
    for idx in [(0, 0), (1, 1), (3, 0)]:
        base = weights.params[name].data

        def probe(delta):
            shifted = dict(weights.params)
            bumped = base.copy()
            bumped[idx] += delta
            shifted[name] = Tensor(bumped, requires_grad=True)
            from .unet import ModelWeights

            return float(
                loss(forward(Tensor(image), ModelWeights(cfg, shifted)), labels, tcfg).data
            )

        fd = (probe(1e-6) - probe(-1e-6)) / 2e-6
        scale = max(abs(fd), abs(grad[idx]), 1e-4)
        worst = max(worst, abs(fd - grad[idx]) / scale)
    checks.append(("end-to-end loss gradient", worst < 1e-3, f"rel {worst:.2e}"))
    return checks


def _silu_np(v):
    return v / (1.0 + np.exp(-v))


def _suite_metrics():
    checks = []
    rng = np.random.default_rng(3)
    pred = rng.integers(0, 3, size=(8, 8))
    gt = rng.integers(0, 3, size=(8, 8))
    ok = True
    for cls in range(3):
        c = metrics.confusion(pred, gt, cls)
        tp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p != cls and g == cls)
        ok = ok and (c.tp, c.fp, c.fn) == (tp, fp, fn) and c.total == pred.size
    checks.append(("confusion counts match loop count", ok, ""))

    ok = True
    for tp in range(4):
        for fp in range(4):
            for fn in range(4):
                c = metrics.ConfusionCounts(tp=tp, tn=1, fp=fp, fn=fn)
                j = metrics.iou(c)
                ok = ok and abs(metrics.dice(c) - 2 * j / (1 + j)) < 1e-15
    checks.append(("dice equals 2*iou/(1+iou)", ok, ""))

    d = metrics.hd95(np.array([[0, 0]]), np.array([[3, 4]]))
    checks.append(("3-4-5 boundary distance", d == 5.0, f"got {d}"))

    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    pts = {tuple(p) for p in metrics.boundary_points(mask)}
    ring = {(r, c) for r in range(1, 4) for c in range(1, 4)} - {(2, 2)}
    checks.append(("boundary ring extraction", pts == ring, ""))
    return checks


def _tiny_config():
    return ModelConfig(
        input_h=16, input_w=16, num_classes=2, in_channels=1,
        embed_dim=4, depths=(1,), bottleneck_depth=1, state_size=2,
    )


def _suite_shapes():
    checks = []
    cfg = _tiny_config()
    weights = init_weights(cfg, seed=0)
    trace = []
    logits = forward(Tensor(np.zeros((16, 16, 1))), weights, trace=trace)
    got = dict(trace)
    expected = {
        "embed": (4, 4, 4),
        "encoder.0": (4, 4, 4),
        "bottleneck": (2, 2, 8),
        "decoder.0": (4, 4, 4),
        "final": (16, 16, 4),
        "logits": (16, 16, 2),
    }
    checks.append(("stage resolutions", got == expected, f"{got}"))
    checks.append(("logit geometry", logits.shape == (16, 16, 2), ""))
    names = list(weights.params)
    has_positional = any("pos_embed" in n or "position" in n for n in names)
    checks.append(("no positional-embedding parameters", not has_positional, ""))
    return checks


def _suite_serialization():
    checks = []
    cfg = _tiny_config()
    weights = init_weights(cfg, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "w.bin")
        weights_io.save_weights(weights, path)
        loaded = weights_io.load_weights(path)
        same = all(
            np.array_equal(loaded.params[n].data, weights.params[n].data)
            for n in weights.params
        )
        checks.append(("save/load round trip", same, ""))

        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
        try:
            weights_io.load_weights(path)
            rejected = False
        except weights_io.WeightFormatError:
            rejected = True
        checks.append(("corrupted file rejected", rejected, ""))
    return checks


SUITES = (
    ("scan", _suite_scan),
    ("gradients", _suite_gradients),
    ("metrics", _suite_metrics),
    ("shapes", _suite_shapes),
    ("serialization", _suite_serialization),
)


def run_selftest(verbose: bool = False):
    """Run every suite; returns (all_passed, printable report lines)."""
    lines = []
    all_ok = True
    for suite_name, fn in SUITES:
        checks = fn()
        passed = sum(1 for _, ok, _ in checks if ok)
        all_ok = all_ok and passed == len(checks)
        lines.append(f"{suite_name}: {passed}/{len(checks)} passed")
        for name, ok, detail in checks:
            if verbose or not ok:
                mark = "ok" if ok else "FAIL"
                suffix = f" ({detail})" if detail else ""
                lines.append(f"  [{mark}] {name}{suffix}")
    lines.append("selftest: " + ("PASS" if all_ok else "FAIL"))
    return all_ok, lines
