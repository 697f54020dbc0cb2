"""Cycle-accurate functional and power simulation of a line-buffer
convolution unit.

The simulated datapath streams one pixel per cycle in row-major order
through K line registers. Window taps expose the most recent K x K
pixels; a multiplier bank holds the K*K signed partial products and an
accumulator register holds the biased sum. Dynamic power per cycle is a
Hamming-distance count over the bit flips of those three register
groups (pixels as 8-bit, products and accumulator as 16-bit two's
complement), plus a static floor:

    P[t] = c_w * HD(window) + c_p * HD(products) + c_a * HD(accum) + static

Because the tap contents at cycles t-1 and t are exactly the previous
and current convolution windows, the power of every complete-window
cycle is a pure function of a K x (K+1) related-pixel set: the current
window plus the column that just slid out of it. At the first window of
each row that trailing column wraps to the end of the previous row; the
very first window of the image additionally sees one pre-stream zero
register. The schedule records the exact coordinate set either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .imgio import Image

_POP8 = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)
_POP16 = (_POP8[np.arange(65536) & 0xFF]
          + _POP8[np.arange(65536) >> 8]).astype(np.uint8)

SUPPORTED_KERNEL_SIZES = (3, 5)


@dataclass
class Kernel:
    """Convolution kernel: K x K signed integer weights plus a bias."""

    weights: np.ndarray
    bias: int = 0
    name: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int16)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise ConfigError("kernel weights must be a square 2-D array")
        if self.weights.shape[0] not in SUPPORTED_KERNEL_SIZES:
            raise ConfigError(
                f"kernel size {self.weights.shape[0]} unsupported "
                f"(expected one of {SUPPORTED_KERNEL_SIZES})")

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass
class AccelConfig:
    """Accelerator and leakage-model configuration.

    ``line_size`` pins the synthesized row length; ``None`` infers it
    from the input image. ``c_w``, ``c_p``, ``c_a`` weight the window,
    partial-product and accumulator transition counts; ``static_power``
    is the per-cycle floor. Defaults keep the convolution datapath above
    80% of total cycle power on non-degenerate inputs.
    """

    line_size: int | None = None
    kernel_size: int = 3
    input_channels: int = 1
    stride_x: int = 1
    stride_y: int = 1
    c_w: float = 1.0
    c_p: float = 1.0
    c_a: float = 0.5
    static_power: float = 5.0
    activation: str = "identity"  # "identity" or "sign"
    scheduling: str = "sequential"  # "sequential" or "random"
    scheduling_seed: int = 0
    masking: bool = False
    masking_seed: int = 0

    def __post_init__(self):
        if self.stride_x < 1 or self.stride_y < 1:
            raise ConfigError("strides must be >= 1")
        if self.line_size is not None and self.line_size < self.kernel_size:
            raise ConfigError("line_size must be >= kernel_size")
        if self.input_channels != 1:
            raise ConfigError("only single-channel images are supported")
        if self.scheduling not in ("sequential", "random"):
            raise ConfigError(f"unknown scheduling mode {self.scheduling!r}")
        if self.activation not in ("identity", "sign"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class CycleSchedule:
    """Mapping from valid cycles to image coordinates.

    ``valid_cycles[j]`` is the simulated-cycle index of the j-th
    complete window in raster order; ``origins[j]`` its (row, col)
    window origin; ``related[j]`` the K*(K+1) related-pixel coordinates
    as (row, col) pairs in canonical order (trailing column first in
    each patch row, then the window columns). A coordinate of
    (-1, width-1) denotes the single pre-stream zero register seen by
    the first window of the image.

    Under random scheduling ``kernel_orders[k][j]`` gives the raster
    index of the window visited at cycle j by kernel k; the raster
    geometry fields describe the sequential reference order.
    """

    image_shape: tuple[int, int]
    kernel_size: int
    stride: tuple[int, int]
    n_cycles: int
    valid_cycles: np.ndarray
    origins: np.ndarray
    related: np.ndarray
    scheduling: str = "sequential"
    kernel_orders: np.ndarray | None = None

    @property
    def n_valid(self) -> int:
        return len(self.valid_cycles)

    def related_in_image(self, j: int) -> np.ndarray:
        """Related coordinates of valid cycle j that lie inside the image."""
        coords = self.related[j]
        return coords[coords[:, 0] >= 0]


@dataclass
class CyclePowers:
    """Per-cycle scalar power values for one kernel pass."""

    values: np.ndarray
    kernel_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ConfigError("cycle powers must be non-negative")


def _activation(acc: np.ndarray, mode: str) -> np.ndarray:
    if mode == "sign":
        return np.where(acc >= 0, 1, -1).astype(np.int32)
    return acc.astype(np.int32)


def convolve_layer(img: Image, kernel: Kernel, cfg: AccelConfig) -> np.ndarray:
    """Valid 2-D convolution of the first layer, no padding.

    Output shape is ``((Y-K)//S_y + 1, (X-K)//S_x + 1)``; each entry is
    ``f(bias + sum(weights * window))`` with f the configured
    activation.
    """
    k = kernel.size
    pix = img.pixels
    if pix.shape[0] < k or pix.shape[1] < k:
        raise DimensionError(
            f"image {pix.shape} smaller than kernel {k}x{k}")
    if cfg.line_size is not None and cfg.line_size != pix.shape[1]:
        raise ConfigError(
            f"line_size {cfg.line_size} != image width {pix.shape[1]}")
    sy, sx = cfg.stride_y, cfg.stride_x
    out_h = (pix.shape[0] - k) // sy + 1
    out_w = (pix.shape[1] - k) // sx + 1
    windows = np.lib.stride_tricks.sliding_window_view(pix, (k, k))
    windows = windows[::sy, ::sx].astype(np.int64)
    acc = np.einsum("ijab,ab->ij", windows, kernel.weights.astype(np.int64))
    acc = acc[:out_h, :out_w] + int(kernel.bias)
    return _activation(acc, cfg.activation)


def _masked_stream(stream: np.ndarray, cfg: AccelConfig, kernel_id: int) -> np.ndarray:
    """Pixel stream as seen by the datapath registers (masked if enabled)."""
    if not cfg.masking:
        return stream
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.masking_seed, kernel_id)))
    masks = rng.integers(0, 256, size=stream.shape, dtype=np.uint8)
    return (stream + masks).astype(np.uint8)  # uint8 add wraps mod 256


def _register_traces(stream: np.ndarray, shape, k: int) -> np.ndarray:
    """Register contents over time: shape (K*K, n_cycles + 1).

    Column 0 is the pre-stream state (cycle -1); column t+1 the state
    after pixel t entered. Register order is row-major over the window.
    Registers reset to the first streamed value rather than zero so that
    warm-up transitions reflect image content only (a constant image
    induces no transitions at all).
    """
    height, width = shape
    n = height * width
    offs = np.array([(k - 1 - a) * width + (k - 1 - b)
                     for a in range(k) for b in range(k)], dtype=np.int64)
    pad = int(offs.max()) + 1
    padded = np.concatenate([np.full(pad, stream[0], dtype=np.uint8), stream])
    t_grid = np.arange(-1, n, dtype=np.int64)
    idx = t_grid[None, :] + pad - offs[:, None]
    return padded[idx]


def _transition_power(regs: np.ndarray, kernel: Kernel, cfg: AccelConfig) -> np.ndarray:
    """Weighted Hamming-distance power for consecutive register states.

    Covers three register groups of the convolution unit: the window
    taps (8-bit pixels), the multiplier outputs (16-bit two's complement
    products), and the accumulation stage. The accumulation stage is a
    pairwise adder tree ending in the biased accumulator; its internal
    partial sums are what make different kernels draw distinguishably
    different power, since window and product transitions are nearly
    invariant under sign-only weight changes.
    """
    # Window registers: 8-bit pixels.
    flips_w = _POP8[regs[:, 1:] ^ regs[:, :-1]].sum(axis=0, dtype=np.int64)
    # Partial products: 16-bit two's complement of weight * pixel.
    w = kernel.weights.reshape(-1, 1).astype(np.int16)
    prods = w * regs.astype(np.int16)
    u = prods.view(np.uint16)
    flips_p = _POP16[u[:, 1:] ^ u[:, :-1]].sum(axis=0, dtype=np.int64)
    # Adder tree: pairwise partial sums down to the biased accumulator,
    # all 16-bit two's complement (overflow wraps by design).
    flips_a = np.zeros(regs.shape[1] - 1, dtype=np.int64)
    node = prods
    while node.shape[0] > 1:
        half = node.shape[0] // 2
        nxt = node[0:2 * half:2] + node[1:2 * half:2]
        if node.shape[0] % 2:
            nxt = np.concatenate([nxt, node[-1:]])
        un = nxt.view(np.uint16)
        flips_a += _POP16[un[:, 1:] ^ un[:, :-1]].sum(axis=0, dtype=np.int64)
        node = nxt
    acc = (node[0] + np.int16(kernel.bias)).view(np.uint16)
    flips_a += _POP16[acc[1:] ^ acc[:-1]].astype(np.int64)
    return (cfg.c_w * flips_w + cfg.c_p * flips_p
            + cfg.c_a * flips_a + cfg.static_power)


def _build_schedule(shape, k: int, cfg: AccelConfig) -> CycleSchedule:
    height, width = shape
    sy, sx = cfg.stride_y, cfg.stride_x
    oys = np.arange(0, height - k + 1, sy)
    oxs = np.arange(0, width - k + 1, sx)
    origins = np.stack(np.meshgrid(oys, oxs, indexing="ij"), axis=-1).reshape(-1, 2)
    # Cycle index at which the window with this origin is complete.
    valid_cycles = (origins[:, 0] + k - 1) * width + (origins[:, 1] + k - 1)

    n_valid = len(origins)
    related = np.empty((n_valid, k * (k + 1), 2), dtype=np.int32)
    rows = np.arange(k)
    for j, (oy, ox) in enumerate(origins):
        coords = np.empty((k, k + 1, 2), dtype=np.int32)
        if ox >= 1:
            # Trailing column sits directly left of the window.
            coords[:, 0, 0] = oy + rows
            coords[:, 0, 1] = ox - 1
        else:
            # Row start: the column that left the taps is the end of the
            # previous image row (one register predates the stream).
            coords[:, 0, 0] = oy + rows - 1
            coords[:, 0, 1] = width - 1
        for b in range(k):
            coords[:, b + 1, 0] = oy + rows
            coords[:, b + 1, 1] = ox + b
        related[j] = coords.reshape(-1, 2)

    return CycleSchedule(
        image_shape=(height, width),
        kernel_size=k,
        stride=(sy, sx),
        n_cycles=height * width,
        valid_cycles=valid_cycles.astype(np.int64),
        origins=origins.astype(np.int32),
        related=related,
        scheduling=cfg.scheduling,
    )


def _random_order_powers(img: Image, kernel: Kernel, cfg: AccelConfig,
                         schedule: CycleSchedule, kernel_id: int) -> np.ndarray:
    """Powers when windows are visited in a per-kernel random order.

    Register contents jump between unrelated windows, so each cycle is
    one window visit and the transition pairs consecutive visits (the
    first from the cleared state).
    """
    stream = _masked_stream(img.pixels.reshape(-1), cfg, kernel_id)
    pix = stream.reshape(img.pixels.shape)
    k = kernel.size
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.scheduling_seed, kernel_id)))
    order = rng.permutation(schedule.n_valid)

    wins = np.lib.stride_tricks.sliding_window_view(pix, (k, k))
    wins = wins[::cfg.stride_y, ::cfg.stride_x].reshape(-1, k * k)
    visited = wins[order]  # (n_valid, K*K)
    regs = np.concatenate([visited[:1], visited]).T  # (K*K, n+1)
    powers = _transition_power(regs, kernel, cfg)
    return powers, order


def simulate_cycles(img: Image, kernel: Kernel,
                    cfg: AccelConfig) -> tuple[CycleSchedule, CyclePowers]:
    """Simulate one kernel pass: per-cycle power plus the cycle map.

    One pixel enters the line buffer per cycle in row-major order;
    pipeline-fill and row-wrap cycles are simulated (they consume
    power) but only complete-window cycles appear in the schedule.
    """
    k = kernel.size
    pix = img.pixels
    if pix.shape[0] < k or pix.shape[1] < k:
        raise DimensionError(
            f"image {pix.shape} smaller than kernel {k}x{k}")
    if cfg.line_size is not None and cfg.line_size != pix.shape[1]:
        raise ConfigError(
            f"line_size {cfg.line_size} != image width {pix.shape[1]}")
    if img.channels != 1:
        raise ConfigError("only single-channel images are supported")

    schedule = _build_schedule(pix.shape, k, cfg)
    if cfg.scheduling == "random":
        powers, order = _random_order_powers(img, kernel, cfg, schedule, 0)
        schedule.kernel_orders = order[None, :]
        schedule.n_cycles = schedule.n_valid
        return schedule, CyclePowers(powers)

    stream = _masked_stream(pix.reshape(-1), cfg, 0)
    regs = _register_traces(stream, pix.shape, k)
    powers = _transition_power(regs, kernel, cfg)
    return schedule, CyclePowers(powers)


def run_all_kernels(img: Image, kernels: list[Kernel],
                    cfg: AccelConfig) -> tuple[list[CyclePowers], CycleSchedule]:
    """Simulate every kernel pass over one image.

    Sequential scheduling shares a single schedule across kernels;
    random scheduling draws an independently seeded visit permutation
    per kernel and records each in ``schedule.kernel_orders``.
    """
    if not kernels:
        raise ConfigError("kernel list is empty")
    k = kernels[0].size
    if any(kern.size != k for kern in kernels):
        raise ConfigError("all kernels in one run must share a size")

    schedule = _build_schedule(img.pixels.shape, k, cfg)
    all_powers = []
    if cfg.scheduling == "random":
        orders = []
        for i, kern in enumerate(kernels):
            powers, order = _random_order_powers(img, kern, cfg, schedule, i)
            all_powers.append(CyclePowers(powers, kernel_id=i))
            orders.append(order)
        schedule.kernel_orders = np.stack(orders)
        schedule.n_cycles = schedule.n_valid
        return all_powers, schedule

    for i, kern in enumerate(kernels):
        stream = _masked_stream(img.pixels.reshape(-1), cfg, i)
        regs = _register_traces(stream, img.pixels.shape, k)
        powers = _transition_power(regs, kern, cfg)
        all_powers.append(CyclePowers(powers, kernel_id=i))
    return all_powers, schedule


def related_patch(img: Image, schedule: CycleSchedule, j: int) -> np.ndarray:
    """Pixel values of valid cycle j's related set, canonical order.

    The single pre-stream register position (row -1, first window only)
    reads as the first image pixel, matching the warm reset state the
    simulated registers actually held.
    """
    return all_related_patches(img, schedule)[j]


def all_related_patches(img: Image, schedule: CycleSchedule) -> np.ndarray:
    """Related-pixel patches for every valid cycle: (n_valid, K*(K+1))."""
    coords = schedule.related  # (n, m, 2)
    inside = coords[..., 0] >= 0
    rows = np.where(inside, coords[..., 0], 0)
    cols = np.where(inside, coords[..., 1], 0)
    return img.pixels[rows, cols]


def generate_kernels(count: int, size: int = 3, seed: int = 0,
                     bias: int = 0) -> list[Kernel]:
    """Random binarized (+1/-1) kernels, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    kernels = []
    for i in range(count):
        w = rng.choice([-1, 1], size=(size, size)).astype(np.int16)
        kernels.append(Kernel(w, bias=bias, name=f"k{i}"))
    return kernels


def save_kernels(kernels: list[Kernel], path) -> None:
    """Write kernels in the text exchange format (one block per kernel)."""
    with open(path, "w", encoding="ascii") as fh:
        for kern in kernels:
            fh.write(f"K={kern.size}\n")
            for row in kern.weights:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
            fh.write(f"bias={int(kern.bias)}\n\n")


def load_kernels(path) -> list[Kernel]:
    """Parse the kernel text format: ``K=<n>``, K rows of K signed
    integers, ``bias=<int>``, blocks separated by blank lines."""
    kernels = []
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh]
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        if not lines[i].startswith("K="):
            raise FormatError(f"{path}:{i + 1}: expected 'K=<size>'")
        try:
            k = int(lines[i][2:])
        except ValueError:
            raise FormatError(f"{path}:{i + 1}: bad kernel size") from None
        rows = []
        for r in range(k):
            if i + 1 + r >= len(lines):
                raise FormatError(f"{path}: kernel block truncated")
            parts = lines[i + 1 + r].split()
            if len(parts) != k:
                raise FormatError(
                    f"{path}:{i + 2 + r}: expected {k} weights, got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise FormatError(f"{path}:{i + 2 + r}: non-integer weight") from None
        bias_line = i + 1 + k
        if bias_line >= len(lines) or not lines[bias_line].startswith("bias="):
            raise FormatError(f"{path}: expected 'bias=<int>' after weights")
        try:
            bias = int(lines[bias_line][5:])
        except ValueError:
            raise FormatError(f"{path}: bad bias value") from None
        kernels.append(Kernel(np.array(rows, dtype=np.int16), bias=bias,
                              name=f"k{len(kernels)}"))
        i = bias_line + 1
    return kernels
