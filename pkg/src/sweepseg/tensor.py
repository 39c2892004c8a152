"""Dense numeric kernels on plain numpy arrays.

Conventions used throughout the package:

* A feature map is a C-contiguous ``H x W x C`` array (row-major, channels
  innermost), so the per-pixel channel vector is contiguous in memory.
* Convolution means cross-correlation: kernels are applied without
  flipping. The transposed convolution below is the exact linear adjoint
  of that operation, which the adjoint tests rely on.
* The default dtype is float32; every kernel preserves the dtype of its
  inputs, and float64 is used for gradient checking.
* All contractions go through ``np.einsum`` (non-optimized), which is
  single-threaded and reduces each output element in a fixed order. This
  keeps results independent of BLAS thread count and makes batched
  evaluation bitwise-equal to element-at-a-time evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (or its transpose).

    Padding is explicit per side and defaults to zero. For transposed use
    the stride must be tied to the kernel size, which makes the output
    blocks non-overlapping.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride_h: int = 1
    stride_w: int = 1
    pad_top: int = 0
    pad_bottom: int = 0
    pad_left: int = 0
    pad_right: int = 0

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels",
                     "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pad_top", "pad_bottom", "pad_left", "pad_right"):
            if getattr(self, name) < 0:
                raise ConfigError(f"ConvSpec.{name} must be >= 0")

    @property
    def tied_stride(self) -> bool:
        return self.stride_h == self.kernel_h and self.stride_w == self.kernel_w

    @property
    def padded(self) -> bool:
        return bool(self.pad_top or self.pad_bottom or self.pad_left or self.pad_right)

    def kernel_shape(self) -> tuple[int, int, int, int]:
        """Kernel tensor layout: (kernel_h, kernel_w, in_channels, out_channels)."""
        return (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)

    def out_extents(self, h: int, w: int) -> tuple[int, int]:
        """Output extents of the direct convolution on an h x w input."""
        oh = (h + self.pad_top + self.pad_bottom - self.kernel_h) // self.stride_h + 1
        ow = (w + self.pad_left + self.pad_right - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"convolution output would be empty: input {h}x{w}, "
                f"kernel {self.kernel_h}x{self.kernel_w}, "
                f"stride {self.stride_h}x{self.stride_w}")
        return oh, ow


def _check_feature_map(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"{name} must be H x W x C, got shape {x.shape}")
    return x


def conv2d(x: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
           bias: np.ndarray) -> np.ndarray:
    """Strided 2-D cross-correlation of an H x W x C map.

    Returns an H' x W' x out_channels map with
    H' = floor((H + pad - kernel_h) / stride_h) + 1.
    """
    x = _check_feature_map(x)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.shape[2] != spec.in_channels:
        raise DimensionError(
            f"input has {x.shape[2]} channels (axis 2), spec expects {spec.in_channels}")
    if kernels.shape != spec.kernel_shape():
        raise DimensionError(
            f"kernels shape {kernels.shape} does not match spec {spec.kernel_shape()}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(
            f"bias shape {bias.shape} must be ({spec.out_channels},)")
    h, w, _ = x.shape
    oh, ow = spec.out_extents(h, w)
    if spec.padded:
        x = np.pad(x, ((spec.pad_top, spec.pad_bottom),
                       (spec.pad_left, spec.pad_right), (0, 0)))
    out = np.zeros((oh, ow, spec.out_channels), dtype=x.dtype)
    sh, sw = spec.stride_h, spec.stride_w
    for dy in range(spec.kernel_h):
        for dx in range(spec.kernel_w):
            window = x[dy:dy + sh * (oh - 1) + 1:sh, dx:dx + sw * (ow - 1) + 1:sw, :]
            out += np.einsum("ijc,cf->ijf", window, kernels[dy, dx])
    return out + bias.astype(out.dtype)


def transposed_conv2d(y: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
                      bias: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d` for the same spec, plus a channel bias.

    The input has ``spec.out_channels`` channels and the result has
    ``spec.in_channels``; with zero bias, ``<conv2d(x), y> == <x,
    transposed_conv2d(y)>`` holds exactly as a linear-algebra identity.
    Only the tied-stride, unpadded case needed by the architecture is
    supported: each input position expands into one non-overlapping
    kernel_h x kernel_w output block.
    """
    y = _check_feature_map(y)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if not spec.tied_stride:
        raise ConfigError(
            f"transposed convolution requires stride tied to kernel size, got "
            f"stride {spec.stride_h}x{spec.stride_w} for kernel "
            f"{spec.kernel_h}x{spec.kernel_w}")
    if spec.padded:
        raise ConfigError("transposed convolution does not support padding")
    if y.shape[2] != spec.out_channels:
        raise DimensionError(
            f"input has {y.shape[2]} channels (axis 2), spec expects {spec.out_channels}")
    if kernels.shape != spec.kernel_shape():
        raise DimensionError(
            f"kernels shape {kernels.shape} does not match spec {spec.kernel_shape()}")
    if bias.shape != (spec.in_channels,):
        raise DimensionError(
            f"bias shape {bias.shape} must be ({spec.in_channels},)")
    i, j, _ = y.shape
    kh, kw, c, _ = kernels.shape
    blocks = np.einsum("ijf,yxcf->iyjxc", y, kernels)
    out = blocks.reshape(i * kh, j * kw, c)
    return out + bias.astype(out.dtype)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two feature maps along channels; a's channels come first."""
    a = _check_feature_map(a, "a")
    b = _check_feature_map(b, "b")
    if a.shape[:2] != b.shape[:2]:
        raise DimensionError(
            f"spatial extents differ: {a.shape[:2]} vs {b.shape[:2]}")
    return np.concatenate([a, b], axis=-1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x))


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise activation by name: relu, tanh, or sigmoid."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}, expected one of "
                          f"{sorted(_ACTIVATIONS)}") from None
    return fn(x)
