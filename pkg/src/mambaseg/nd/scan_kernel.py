"""First-order linear recurrence evaluation over affine maps.

The recurrence h[l] = a[l] * h[l-1] + b[l] (elementwise over an arbitrary
state shape) is the step composition of affine maps x -> a*x + b, which are
closed under an associative combinator.  ``scan_blocked`` exploits that: each
block of steps is reduced to a single prefix map with the loop vectorized
across blocks, block carries are chained once, and the full trajectory is
reconstructed in one vector operation.  The combination tree is fixed, so
results are identical for any worker count.

All functions scan along axis 0.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_BLOCK = 64

# Soft cap on transient prefix-map memory when the caller does not need the
# full hidden trajectory; the chunked driver below keeps peak usage near this.
_CHUNK_BYTES = 64 * 1024 * 1024


def combine(m1, m2):
    """Compose affine maps: applying m1 then m2 gives (a2*a1, a2*b1 + b2)."""
    a1, b1 = m1
    a2, b2 = m2
    return a2 * a1, a2 * b1 + b2


def scan_sequential(a: np.ndarray, b: np.ndarray, h0=None) -> np.ndarray:
    """Plain left-to-right evaluation; the reference for the blocked path."""
    if a.shape != b.shape:
        raise ValueError(f"coefficient shapes differ: {a.shape} vs {b.shape}")
    h = np.empty_like(b)
    carry = np.zeros(b.shape[1:], dtype=b.dtype) if h0 is None else h0
    for l in range(a.shape[0]):
        carry = a[l] * carry + b[l]
        h[l] = carry
    return h


def _block_prefixes(a, b, ap, bp, lo, hi):
    # Within-block prefix maps for blocks [lo, hi); loop over in-block
    # position, vectorized across blocks.
    ap[lo:hi, 0] = a[lo:hi, 0]
    bp[lo:hi, 0] = b[lo:hi, 0]
    for j in range(1, a.shape[1]):
        np.multiply(a[lo:hi, j], ap[lo:hi, j - 1], out=ap[lo:hi, j])
        np.multiply(a[lo:hi, j], bp[lo:hi, j - 1], out=bp[lo:hi, j])
        bp[lo:hi, j] += b[lo:hi, j]


def scan_blocked(
    a: np.ndarray,
    b: np.ndarray,
    h0=None,
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
) -> np.ndarray:
    """Blocked divide-and-conquer scan; equals scan_sequential to rounding.

    ``threads`` only distributes independent per-block work; the combination
    order never depends on it, so output bits do not either.
    """
    if a.shape != b.shape:
        raise ValueError(f"coefficient shapes differ: {a.shape} vs {b.shape}")
    if block < 1:
        raise ValueError("block size must be >= 1")
    length = a.shape[0]
    if length == 0:
        return np.empty_like(b)

    nblocks = -(-length // block)
    padded = nblocks * block
    if padded != length:
        # Identity affine steps (a=1, b=0) at the tail change nothing.
        pad = [(0, padded - length)] + [(0, 0)] * (a.ndim - 1)
        a = np.pad(a, pad, constant_values=1.0)
        b = np.pad(b, pad, constant_values=0.0)
    state_shape = a.shape[1:]
    a = a.reshape(nblocks, block, *state_shape)
    b = b.reshape(nblocks, block, *state_shape)

    ap = np.empty_like(a)
    bp = np.empty_like(b)
    if threads > 1 and nblocks > 1:
        bounds = np.linspace(0, nblocks, min(threads, nblocks) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            jobs = [
                pool.submit(_block_prefixes, a, b, ap, bp, lo, hi)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            for job in jobs:
                job.result()
    else:
        _block_prefixes(a, b, ap, bp, 0, nblocks)

    # Chain per-block carries: carries[i] is the state entering block i.
    carries = np.empty_like(a[:, 0])
    carry = np.zeros(state_shape, dtype=b.dtype) if h0 is None else np.asarray(h0)
    for i in range(nblocks):
        carries[i] = carry
        carry = ap[i, -1] * carry + bp[i, -1]

    h = ap * carries[:, None] + bp
    return h.reshape(padded, *state_shape)[:length]


def ssm_apply(
    a: np.ndarray,
    bx: np.ndarray,
    c: np.ndarray,
    block: int = DEFAULT_BLOCK,
    threads: int = 1,
    keep_hidden: bool = False,
):
    """Run the recurrence and project the state through per-step read-out.

    a, bx: (L, ..., E, N) step coefficients; c: (L, ..., N) read-out weights
    shared across E.  Returns y of shape (L, ..., E), plus the full hidden
    trajectory when ``keep_hidden`` (needed for differentiation).  Without it,
    the sequence is processed in chunks so peak memory stays bounded no matter
    how long L is.
    """
    length = a.shape[0]
    if keep_hidden or length == 0:
        h = scan_blocked(a, bx, block=block, threads=threads)
        y = (h * c[..., None, :]).sum(axis=-1)
        return (y, h) if keep_hidden else y

    per_step = max(a[0].nbytes, 1) * 4
    chunk = min(length, max(block, _CHUNK_BYTES // per_step))
    y = np.empty(a.shape[:-1], dtype=bx.dtype)
    carry = None
    for lo in range(0, length, chunk):
        hi = min(lo + chunk, length)
        h = scan_blocked(a[lo:hi], bx[lo:hi], h0=carry, block=block, threads=threads)
        y[lo:hi] = (h * c[lo:hi, ..., None, :]).sum(axis=-1)
        carry = h[-1]
    return y
