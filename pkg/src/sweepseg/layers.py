"""Architecture building blocks.

The segmentation network is a pipeline of:

* an optional small convolutional frontend (convs + 2x2 max pools),
* one or more recurrent layers, each made of four GRU sweeps over a grid
  of non-overlapping patches (down, up, right, left),
* tied-stride transposed-convolution upsampling layers with ReLU.

Every function here is dual-mode via :mod:`sweepseg.autodiff`: pass plain
arrays for a fast untraced forward, pass tape Vars for training. The
parameter bundles are agnostic too; they hold whatever value type you
put in them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .tensor import ConvSpec

DIRECTIONS = ("down", "up", "right", "left")


@dataclass
class PatchGrid:
    """An I x J grid of flattened patch vectors plus the tiling geometry."""

    patches: np.ndarray          # (I, J, patch_h * patch_w * C)
    patch_h: int
    patch_w: int
    origin_shape: tuple[int, int, int]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.patches.shape[0], self.patches.shape[1]


def _check_divisible(h: int, w: int, patch_h: int, patch_w: int) -> None:
    if patch_h < 1 or patch_w < 1:
        raise ConfigError(f"patch extents must be >= 1, got {patch_h}x{patch_w}")
    if h % patch_h or w % patch_w:
        raise ConfigError(
            f"input extents {h}x{w} are not divisible by patch {patch_h}x{patch_w}; "
            f"resize the input or pick a dividing patch size")


def split_patches(x: np.ndarray, patch_h: int, patch_w: int) -> PatchGrid:
    """Tile a feature map into non-overlapping patches.

    Patch (i, j) holds input rows [i*patch_h, (i+1)*patch_h) and cols
    [j*patch_w, (j+1)*patch_w), flattened rows-then-cols with channels
    innermost.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected H x W x C input, got shape {x.shape}")
    h, w, c = x.shape
    _check_divisible(h, w, patch_h, patch_w)
    return PatchGrid(ad._patchify_np(x, patch_h, patch_w), patch_h, patch_w, (h, w, c))


def merge_patches(grid: PatchGrid) -> np.ndarray:
    """Invert :func:`split_patches` exactly."""
    h, w, c = grid.origin_shape
    return ad._unpatchify_np(grid.patches, grid.patch_h, grid.patch_w, c)


@dataclass
class GruParams:
    """One gated recurrent unit: three input maps, three recurrent maps, biases."""

    w_update: object   # (in_dim, units)
    w_reset: object
    w_cand: object
    r_update: object   # (units, units)
    r_reset: object
    r_cand: object
    b_update: object   # (units,)
    b_reset: object
    b_cand: object

    @property
    def in_dim(self) -> int:
        return self.w_update.shape[0]

    @property
    def units(self) -> int:
        return self.w_update.shape[1]

    def map_values(self, fn) -> "GruParams":
        return GruParams(*(fn(getattr(self, f.name)) for f in fields(self)))


@dataclass
class SweepParams:
    """A GRU bound to one sweep direction over the grid."""

    gru: GruParams
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")

    def map_values(self, fn) -> "SweepParams":
        return replace(self, gru=self.gru.map_values(fn))


@dataclass
class ReNetParams:
    """Four coupled sweeps: a vertical pair over patches, then a horizontal
    pair over the concatenated vertical outputs (read as 1x1 patches)."""

    down: SweepParams
    up: SweepParams
    right: SweepParams
    left: SweepParams
    patch_h: int
    patch_w: int

    def __post_init__(self):
        for name in DIRECTIONS:
            sweep = getattr(self, name)
            if sweep.direction != name:
                raise ConfigError(f"sweep in slot {name!r} has direction {sweep.direction!r}")
        if not hasattr(self.down.gru.w_update, "shape"):
            return  # tree of parameter ids, shapes checked once values are bound
        units = {getattr(self, name).gru.units for name in DIRECTIONS}
        if len(units) != 1:
            raise ConfigError(f"all four sweeps must share one unit count, got {units}")
        u = units.pop()
        for name in ("right", "left"):
            in_dim = getattr(self, name).gru.in_dim
            if in_dim != 2 * u:
                raise ConfigError(
                    f"horizontal sweep {name!r} must read 2*units={2 * u} channels, "
                    f"got {in_dim}")

    @property
    def units(self) -> int:
        return self.down.gru.units

    def map_values(self, fn) -> "ReNetParams":
        return replace(self, **{n: getattr(self, n).map_values(fn) for n in DIRECTIONS})


def gru_step(params: GruParams, prev_state, x):
    """One GRU step; the emitted projection is the new state.

    Works on single vectors or on a batch of rows (one per independent
    column of a sweep). Returns (output, new_state), which are the same
    value.
    """
    if x.shape[-1] != params.in_dim:
        raise DimensionError(
            f"input has {x.shape[-1]} features, GRU expects {params.in_dim}")
    if prev_state.shape[-1] != params.units:
        raise DimensionError(
            f"state has {prev_state.shape[-1]} features, GRU expects {params.units}")
    p = params
    u = ad.sigmoid(ad.dense(x, p.w_update) + ad.dense(prev_state, p.r_update) + p.b_update)
    r = ad.sigmoid(ad.dense(x, p.w_reset) + ad.dense(prev_state, p.r_reset) + p.b_reset)
    c = ad.tanh(ad.dense(x, p.w_cand) + ad.dense(ad.mul(r, prev_state), p.r_cand) + p.b_cand)
    h = ad.add(ad.mul(ad.affine(u, -1.0, 1.0), prev_state), ad.mul(u, c))
    return h, h


def _orient_in(direction: str, grid):
    if direction in ("right", "left"):
        grid = ad.swap01(grid)
    if direction in ("up", "left"):
        grid = ad.flip0(grid)
    return grid


def _orient_out(direction: str, out):
    if direction in ("up", "left"):
        out = ad.flip0(out)
    if direction in ("right", "left"):
        out = ad.swap01(out)
    return out


def _value_of(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x)


def directional_sweep(params: SweepParams, grid):
    """Run one GRU over every column (or row) of a grid of vectors.

    All columns advance together: step i applies the GRU to row i of the
    oriented grid as a batch, which is the column-parallel evaluation
    order. States start at zero. The output at (i, j) is the projection
    emitted at that step.
    """
    v = _value_of(grid)
    if v.ndim != 3:
        raise DimensionError(f"sweep grid must be I x J x D, got shape {v.shape}")
    if v.shape[2] != params.gru.in_dim:
        raise DimensionError(
            f"grid vectors have {v.shape[2]} features, sweep GRU expects {params.gru.in_dim}")
    g = _orient_in(params.direction, grid)
    steps = _value_of(g).shape[0]
    width = _value_of(g).shape[1]
    state = np.zeros((width, params.gru.units), dtype=v.dtype)
    rows = []
    for i in range(steps):
        _, state = gru_step(params.gru, state, ad.slice0(g, i))
        rows.append(state)
    return _orient_out(params.direction, ad.stack0(rows))


def directional_sweep_sequential(params: SweepParams, grid: np.ndarray) -> np.ndarray:
    """Reference sweep that finishes each column before starting the next.

    Plain numpy only. Produces bitwise-identical output to
    :func:`directional_sweep` because both run the same fixed-order
    kernels; this is the oracle for the parallel implementation.
    """
    grid = np.asarray(grid)
    g = _orient_in(params.direction, grid)
    steps, width = g.shape[:2]
    out = np.empty((steps, width, params.gru.units), dtype=grid.dtype)
    for j in range(width):
        state = np.zeros(params.gru.units, dtype=grid.dtype)
        for i in range(steps):
            _, state = gru_step(params.gru, state, g[i, j])
            out[i, j] = state
    return _orient_out(params.direction, out)


def renet_layer(params: ReNetParams, x):
    """Four-sweep recurrent layer over non-overlapping patches.

    The vertical pair reads the patch grid; their concatenated outputs
    form an I x J x 2U map which the horizontal pair reads element by
    element (1x1 patches). Returns an I x J x 2U map in which every
    position has seen the whole input.
    """
    v = _value_of(x)
    if v.ndim != 3:
        raise DimensionError(f"expected H x W x C input, got shape {v.shape}")
    h, w, _ = v.shape
    _check_divisible(h, w, params.patch_h, params.patch_w)
    grid = ad.patchify(x, params.patch_h, params.patch_w)
    vertical = ad.concat_channels(directional_sweep(params.down, grid),
                                  directional_sweep(params.up, grid))
    return ad.concat_channels(directional_sweep(params.right, vertical),
                              directional_sweep(params.left, vertical))


def upsample_layer(spec: ConvSpec, kernels, bias, x):
    """Tied-stride transposed convolution followed by ReLU.

    Spatial extents grow by exactly the filter size.
    """
    return ad.relu(ad.transposed_conv2d(x, spec, kernels, bias))


POOL = "pool"


@dataclass
class FrontendConv:
    """One extent-preserving convolution stage of the frontend."""

    spec: ConvSpec
    kernels: object
    bias: object


def conv_frontend(stack, x):
    """Run the convolutional stem: conv+ReLU stages and 2x2 max pools.

    An empty stack is the identity (recurrent-only model).
    """
    for stage in stack:
        if stage == POOL:
            x = ad.maxpool2x2(x)
        else:
            x = ad.relu(ad.conv2d(x, stage.spec, stage.kernels, stage.bias))
    return x


def frontend_factor(stack) -> int:
    """Total spatial downsampling factor of a frontend stack."""
    return 2 ** sum(1 for stage in stack if stage == POOL)
