"""Max, average and regularized 2D pooling on NCHW float64 arrays.

Regularized pooling selects, in every pooling kernel, the value pointed to by
a *smoothed* displacement direction rather than the kernel's own argmax:

1. ``extract_displacements``: per kernel, the integer offset from the kernel
   center to its maximum.
2. ``smooth_displacements``: average of the offsets over a ``w x w`` block of
   neighbouring kernels.
3. ``quantize_displacements``: round the averages back onto the legal integer
   offsets for the kernel size.
4. ``gather_pooled``: read the input value at each quantized offset.

Offsets follow the kernel-center convention: for odd ``n`` the legal values
are ``-(n-1)/2 .. (n-1)/2``; for even ``n`` the center lies between pixels and
the legal values are ``-n/2 .. -1, 1 .. n/2`` (zero excluded).

The backward pass treats the selected coordinates as constants and routes
each output gradient to its selected input cell, exactly like max pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from regpool.errors import ShapeError

PADDING_MODES = ("none", "same-count")


@dataclass(frozen=True)
class PoolConfig:
    """Pooling hyperparameters.

    n: square kernel size in pixels. w: smoothing window size in kernels
    (odd). s: stride in pixels, defaults to ``n``. padding: ``"none"`` (valid
    windows only) or ``"same-count"`` (``I = (H - 1) // s + 1``).
    """

    n: int
    w: int = 1
    s: int | None = None
    padding: str = "none"

    def __post_init__(self):
        if self.s is None:
            object.__setattr__(self, "s", self.n)
        for name in ("n", "w", "s"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {value!r}")
        if self.n < 1:
            raise ValueError(f"kernel size n must be >= 1, got {self.n}")
        if self.s < 1:
            raise ValueError(f"stride s must be >= 1, got {self.s}")
        if self.w < 1 or self.w % 2 == 0:
            raise ValueError(f"smoothing window w must be a positive odd integer, got {self.w}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")


@dataclass(frozen=True)
class GatherRecord:
    """Input coordinates chosen by a pooling forward pass.

    ``coords[..., 0]`` and ``coords[..., 1]`` are absolute row/column indices
    into the unpadded input, shape ``(N, C, I, J, 2)``. ``inside`` is False
    where a same-count padded cell was selected; such cells carry no gradient.
    """

    coords: np.ndarray
    inside: np.ndarray
    input_shape: tuple[int, int, int, int]


def output_dims(H: int, W: int, cfg: PoolConfig) -> tuple[int, int]:
    """Number of kernel positions (I, J) along height and width."""
    if H < 1 or W < 1:
        raise ShapeError(f"feature map must be non-empty, got {H}x{W}")
    if cfg.padding == "same-count":
        return (H - 1) // cfg.s + 1, (W - 1) // cfg.s + 1
    if H < cfg.n or W < cfg.n:
        raise ShapeError(f"{H}x{W} map is smaller than the {cfg.n}x{cfg.n} kernel")
    return (H - cfg.n) // cfg.s + 1, (W - cfg.n) // cfg.s + 1


def pad_amounts(H: int, W: int, cfg: PoolConfig) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) padding; any odd remainder goes bottom/right."""
    if cfg.padding == "none":
        return 0, 0, 0, 0
    I, J = output_dims(H, W, cfg)
    th = max(0, (I - 1) * cfg.s + cfg.n - H)
    tw = max(0, (J - 1) * cfg.s + cfg.n - W)
    return th // 2, th - th // 2, tw // 2, tw - tw // 2


def offset_to_index(d, n: int):
    """Map a center-relative offset to a 0-based position inside the kernel.

    Works elementwise on integer arrays as well as on scalars.
    """
    d_arr = np.asarray(d)
    if n % 2:
        half = (n - 1) // 2
        if np.any(np.abs(d_arr) > half):
            raise ValueError(f"offset {d} outside the legal range for n={n}")
        out = d_arr + half
    else:
        half = n // 2
        if np.any(d_arr == 0):
            raise ValueError(f"offset 0 is not legal for even kernel size n={n}")
        if np.any(np.abs(d_arr) > half):
            raise ValueError(f"offset {d} outside the legal range for n={n}")
        out = np.where(d_arr < 0, d_arr + half, d_arr + half - 1)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def index_to_offset(k, n: int):
    """Inverse of :func:`offset_to_index`."""
    k_arr = np.asarray(k)
    if np.any((k_arr < 0) | (k_arr >= n)):
        raise ValueError(f"index {k} outside a kernel of size {n}")
    if n % 2:
        out = k_arr - (n - 1) // 2
    else:
        half = n // 2
        out = np.where(k_arr < half, k_arr - half, k_arr - half + 1)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def legal_offsets(n: int) -> list[int]:
    return [index_to_offset(k, n) for k in range(n)]


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) feature map, got shape {x.shape}")
    return x


def _kernel_windows(x: np.ndarray, cfg: PoolConfig, fill: float):
    """View of shape (N, C, I, J, n, n) over the (padded) input, plus (top, left)."""
    _, _, H, W = x.shape
    I, J = output_dims(H, W, cfg)
    top, bottom, left, right = pad_amounts(H, W, cfg)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=fill)
    win = sliding_window_view(x, (cfg.n, cfg.n), axis=(2, 3))
    return win[:, :, ::cfg.s, ::cfg.s][:, :, :I, :J], top, left


def extract_displacements(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-kernel displacement from the kernel center to its maximum.

    Returns ``(field, max_out)``: an int64 array ``(N, C, I, J, 2)`` of
    (row, col) offsets and the plain max-pooled map. Ties resolve to the first
    maximum in row-major order; padded cells never win.
    """
    x = _check_input(x)
    win, _, _ = _kernel_windows(x, cfg, fill=-np.inf)
    flat = win.reshape(win.shape[:4] + (cfg.n * cfg.n,))
    k = np.argmax(flat, axis=-1)
    max_out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    rows, cols = np.divmod(k, cfg.n)
    field = np.stack([index_to_offset(rows, cfg.n), index_to_offset(cols, cfg.n)], axis=-1)
    return field.astype(np.int64), np.ascontiguousarray(max_out)


def smooth_displacements(field: np.ndarray, w: int) -> np.ndarray:
    """Average each displacement over its ``w x w`` neighbourhood of kernels.

    Neighbours beyond the field border are replaced by the nearest border
    site; the divisor is always ``w**2``.
    """
    if w < 1 or w % 2 == 0:
        raise ValueError(f"smoothing window w must be a positive odd integer, got {w}")
    field = np.asarray(field)
    if field.ndim != 5 or field.shape[-1] != 2:
        raise ShapeError(f"expected a (N, C, I, J, 2) field, got shape {field.shape}")
    if w == 1:
        return field.astype(np.float64)
    r = (w - 1) // 2
    padded = np.pad(field.astype(np.int64), ((0, 0), (0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    # Integer sums are exact, so the single division below is the only rounding.
    sums = sliding_window_view(padded, (w, w), axis=(2, 3)).sum(axis=(-2, -1))
    return sums.astype(np.float64) / float(w * w)


def quantize_displacements(smoothed: np.ndarray, n: int) -> np.ndarray:
    """Round smoothed offsets onto the legal integer offsets for kernel size ``n``.

    Odd ``n``: nearest integer, halves away from zero. Even ``n``: away from
    zero (ceil for positives, floor for negatives) with 0.0 sent to +1.
    """
    v = np.asarray(smoothed, dtype=np.float64)
    mag = np.abs(v)
    if n % 2:
        whole = np.floor(mag)
        q = whole + (mag - whole >= 0.5)
        q = np.copysign(q, v)
        limit = (n - 1) // 2
    else:
        q = np.where(v < 0, np.floor(v), np.maximum(np.ceil(v), 1.0))
        limit = n // 2
    return np.clip(q, -limit, limit).astype(np.int64)


def gather_pooled(x: np.ndarray, field: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, GatherRecord]:
    """Read, for every kernel, the input value at its displacement offset.

    In same-count mode an offset that lands on a padded cell yields 0.
    """
    x = _check_input(x)
    N, C, H, W = x.shape
    I, J = output_dims(H, W, cfg)
    field = np.asarray(field)
    if field.shape != (N, C, I, J, 2):
        raise ShapeError(f"field shape {field.shape} does not match {(N, C, I, J, 2)}")
    top, _, left, _ = pad_amounts(H, W, cfg)
    rows = (np.arange(I) * cfg.s)[:, None] - top + offset_to_index(field[..., 0], cfg.n)
    cols = (np.arange(J) * cfg.s)[None, :] - left + offset_to_index(field[..., 1], cfg.n)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    ni = np.arange(N)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    vals = x[ni, ci, np.clip(rows, 0, H - 1), np.clip(cols, 0, W - 1)]
    out = np.where(inside, vals, 0.0)
    rec = GatherRecord(np.stack([rows, cols], axis=-1), inside, (N, C, H, W))
    return out, rec


def regularized_pool_forward(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, GatherRecord]:
    field, _ = extract_displacements(x, cfg)
    smoothed = smooth_displacements(field, cfg.w)
    return gather_pooled(x, quantize_displacements(smoothed, cfg.n), cfg)


def _scatter(grad_out: np.ndarray, rec: GatherRecord, in_shape) -> np.ndarray:
    in_shape = tuple(int(e) for e in in_shape)
    if in_shape != tuple(rec.input_shape):
        raise ShapeError(f"record was built for input {rec.input_shape}, not {in_shape}")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != rec.inside.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match {rec.inside.shape}")
    N, C, H, W = in_shape
    ni = np.arange(N)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    flat = ((ni * C + ci) * H + rec.coords[..., 0]) * W + rec.coords[..., 1]
    mask = rec.inside
    grad = np.bincount(flat[mask], weights=grad_out[mask], minlength=N * C * H * W)
    return grad.reshape(in_shape)


def regularized_pool_backward(grad_out: np.ndarray, rec: GatherRecord, in_shape) -> np.ndarray:
    """Route each output gradient to the input cell recorded in ``rec``.

    Cells selected by several overlapping kernels accumulate the sum.
    """
    return _scatter(grad_out, rec, in_shape)


def max_pool_forward(x: np.ndarray, cfg: PoolConfig) -> tuple[np.ndarray, GatherRecord]:
    field, _ = extract_displacements(x, cfg)
    return gather_pooled(x, field, cfg)


def max_pool_backward(grad_out: np.ndarray, rec: GatherRecord, in_shape) -> np.ndarray:
    return _scatter(grad_out, rec, in_shape)


def avg_pool_forward(x: np.ndarray, cfg: PoolConfig) -> np.ndarray:
    """Window mean with divisor ``n**2``; padded cells count as zeros."""
    x = _check_input(x)
    win, _, _ = _kernel_windows(x, cfg, fill=0.0)
    return win.sum(axis=(-2, -1)) / float(cfg.n * cfg.n)


def avg_pool_backward(grad_out: np.ndarray, in_shape, cfg: PoolConfig) -> np.ndarray:
    N, C, H, W = (int(e) for e in in_shape)
    I, J = output_dims(H, W, cfg)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (N, C, I, J):
        raise ShapeError(f"gradient shape {grad_out.shape} does not match {(N, C, I, J)}")
    top, bottom, left, right = pad_amounts(H, W, cfg)
    Hp = max(H + top + bottom, (I - 1) * cfg.s + cfg.n)
    Wp = max(W + left + right, (J - 1) * cfg.s + cfg.n)
    gp = np.zeros((N, C, Hp, Wp))
    share = grad_out / float(cfg.n * cfg.n)
    for kr in range(cfg.n):
        for kc in range(cfg.n):
            gp[:, :, kr:kr + (I - 1) * cfg.s + 1:cfg.s, kc:kc + (J - 1) * cfg.s + 1:cfg.s] += share
    return np.ascontiguousarray(gp[:, :, top:top + H, left:left + W])


def pool_forward(kind: str, x: np.ndarray, cfg: PoolConfig):
    """Dispatch by kind; returns ``(out, cache)`` for :func:`pool_backward`."""
    if kind == "max":
        return max_pool_forward(x, cfg)
    if kind == "regularized":
        return regularized_pool_forward(x, cfg)
    if kind == "avg":
        return avg_pool_forward(x, cfg), None
    raise ValueError(f"unknown pooling kind {kind!r}")


def pool_backward(kind: str, grad_out: np.ndarray, cache, in_shape, cfg: PoolConfig) -> np.ndarray:
    if kind == "avg":
        return avg_pool_backward(grad_out, in_shape, cfg)
    if kind in ("max", "regularized"):
        return _scatter(grad_out, cache, in_shape)
    raise ValueError(f"unknown pooling kind {kind!r}")
