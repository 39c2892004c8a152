"""Reverse-mode differentiation over the numeric kernels.

A :class:`Tape` records one operation node per tensor operation while the
forward pass runs; :meth:`Tape.backward` then walks the nodes in reverse
and accumulates vector-Jacobian products into per-parameter gradients.

Every operation in this module is dual-mode: given plain numpy arrays it
just computes the result, given :class:`Var` operands it also records the
node. Layer code is therefore written once and works both for fast
untraced inference and for training. Because both modes run the exact
same kernels, traced and untraced forward values are bitwise identical.

Recurrent sequences are recorded one node per time step (no truncation);
rows and columns of patch grids are short, so full backpropagation
through time stays cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import DeterminismError, DimensionError, NumericError, UsageError

LOG_FLOOR = 1e-12


class Var:
    """A value tracked on a tape. Wraps an ndarray, never copies it."""

    __slots__ = ("value", "tape", "slot", "requires_grad", "param_id", "frozen")

    # Keep numpy from hijacking arithmetic with Var operands.
    __array_ufunc__ = None

    def __init__(self, value, tape, slot, requires_grad, param_id=None, frozen=False):
        self.value = value
        self.tape = tape
        self.slot = slot
        self.requires_grad = requires_grad
        self.param_id = param_id
        self.frozen = frozen

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" param={self.param_id!r}" if self.param_id else ""
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return affine(self, -1.0, 0.0)


class _Node:
    __slots__ = ("name", "op_index", "inputs", "out_slot", "vjp")

    def __init__(self, name, op_index, inputs, out_slot, vjp):
        self.name = name
        self.op_index = op_index
        self.inputs = inputs
        self.out_slot = out_slot
        self.vjp = vjp


class Tape:
    """Ordered record of one forward computation.

    Nodes appear in execution order, which is topological by
    construction. Exactly one scalar must be marked as the loss root
    (:meth:`mark_loss`) before :meth:`backward` may run.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self._n_slots = 0
        self._op_count = 0
        self._leaves: list[Var] = []
        self._root: Var | None = None
        self._buffers: list | None = None

    def _new_var(self, value, requires_grad, param_id=None, frozen=False) -> Var:
        v = Var(np.asarray(value), self, self._n_slots, requires_grad, param_id, frozen)
        self._n_slots += 1
        return v

    def leaf(self, value, param_id: str | None = None, frozen: bool = False) -> Var:
        """Register an input value; named leaves receive gradients."""
        requires_grad = param_id is not None and not frozen
        v = self._new_var(value, requires_grad, param_id, frozen)
        if param_id is not None:
            if any(l.param_id == param_id for l in self._leaves):
                raise UsageError(f"duplicate parameter id {param_id!r} on tape")
            self._leaves.append(v)
        return v

    def constant(self, value) -> Var:
        return self._new_var(value, requires_grad=False)

    def record(self, name, inputs, value, vjp) -> Var:
        self._op_count += 1
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"op #{self._op_count} ({name}) produced non-finite values")
        requires_grad = any(v.requires_grad for v in inputs)
        out = self._new_var(value, requires_grad)
        if requires_grad:
            self.nodes.append(_Node(name, self._op_count, inputs, out.slot, vjp))
        return out

    def mark_loss(self, var: Var) -> None:
        if not isinstance(var, Var) or var.tape is not self:
            raise UsageError("loss root must be a Var recorded on this tape")
        if var.value.size != 1:
            raise UsageError(f"loss root must be a scalar, got shape {var.value.shape}")
        if self._root is not None:
            raise UsageError("loss root already marked on this tape")
        self._root = var

    def backward(self) -> dict[str, np.ndarray]:
        """Gradients of the loss root for every named leaf.

        Leaves that are frozen or unreachable from the root get zero
        gradients of the parameter's shape.
        """
        root = self._root
        if root is None:
            raise UsageError("no loss root marked; call mark_loss() before backward()")
        if not np.all(np.isfinite(root.value)):
            raise NumericError("loss root is not finite")
        buffers: list = [None] * self._n_slots
        buffers[root.slot] = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = buffers[node.out_slot]
            if g is None:
                continue
            if self.check_finite and not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient flowing out of op #{node.op_index} ({node.name})")
            for var, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not var.requires_grad:
                    continue
                if buffers[var.slot] is None:
                    buffers[var.slot] = gi
                else:
                    buffers[var.slot] = buffers[var.slot] + gi
        self._buffers = buffers
        out = {}
        for leaf in self._leaves:
            g = buffers[leaf.slot]
            if g is None or leaf.frozen:
                g = np.zeros_like(leaf.value)
            out[leaf.param_id] = g
        return out

    def grad_of(self, var: Var) -> np.ndarray:
        """Gradient buffer of any Var after backward() (zeros if unreached)."""
        if self._buffers is None:
            raise UsageError("grad_of() is only available after backward()")
        g = self._buffers[var.slot]
        return np.zeros_like(var.value) if g is None else g


def _find_tape(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _promote(tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(np.asarray(x))


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# dual-mode operations
# ---------------------------------------------------------------------------

def add(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return a + b
    a, b = _promote(tape, a), _promote(tape, b)
    a_shape, b_shape = a.value.shape, b.value.shape

    def vjp(g):
        return _sum_to_shape(g, a_shape), _sum_to_shape(g, b_shape)

    return tape.record("add", (a, b), a.value + b.value, vjp)


def sub(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return a - b
    a, b = _promote(tape, a), _promote(tape, b)
    a_shape, b_shape = a.value.shape, b.value.shape

    def vjp(g):
        return _sum_to_shape(g, a_shape), -_sum_to_shape(g, b_shape)

    return tape.record("sub", (a, b), a.value - b.value, vjp)


def mul(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return a * b
    a, b = _promote(tape, a), _promote(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_sum_to_shape(g * bv, av.shape) if a.requires_grad else None,
                _sum_to_shape(g * av, bv.shape) if b.requires_grad else None)

    return tape.record("mul", (a, b), av * bv, vjp)


def affine(x, scale: float, shift: float):
    """Elementwise scale * x + shift with python-scalar coefficients."""
    if not isinstance(x, Var):
        return x * scale + shift

    def vjp(g):
        return (g * scale,)

    return x.tape.record("affine", (x,), x.value * scale + shift, vjp)


def dense(x, w):
    """Rowwise matrix product: (..., D) x (D, U) -> (..., U).

    Uses non-optimized einsum so each output row is reduced in a fixed
    order; a batch of rows is bitwise-equal to one-row-at-a-time calls,
    which the parallel/sequential sweep equivalence relies on.
    """
    tape = _find_tape(x, w)
    if tape is None:
        return _dense_np(x, w)
    x, w = _promote(tape, x), _promote(tape, w)
    xv, wv = x.value, w.value
    val = _dense_np(xv, wv)

    def vjp(g):
        if xv.ndim == 1:
            gx = np.einsum("u,du->d", g, wv) if x.requires_grad else None
            gw = np.einsum("d,u->du", xv, g) if w.requires_grad else None
        else:
            gx = np.einsum("ju,du->jd", g, wv) if x.requires_grad else None
            gw = np.einsum("jd,ju->du", xv, g) if w.requires_grad else None
        return gx, gw

    return tape.record("dense", (x, w), val, vjp)


def _dense_np(x, w):
    if w.ndim != 2:
        raise DimensionError(f"dense weight must be 2-D, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"dense contraction mismatch: input last axis {x.shape[-1]} vs weight rows {w.shape[0]}")
    if x.ndim == 1:
        return np.einsum("d,du->u", x, w)
    if x.ndim == 2:
        return np.einsum("jd,du->ju", x, w)
    raise DimensionError(f"dense input must be 1-D or 2-D, got shape {x.shape}")


def sigmoid(x):
    if not isinstance(x, Var):
        return tensor.sigmoid(x)
    out = tensor.sigmoid(x.value)

    def vjp(g):
        return (g * (out * (1.0 - out)),)

    return x.tape.record("sigmoid", (x,), out, vjp)


def tanh(x):
    if not isinstance(x, Var):
        return tensor.tanh(x)
    out = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return x.tape.record("tanh", (x,), out, vjp)


def relu(x):
    if not isinstance(x, Var):
        return tensor.relu(x)
    xv = x.value

    def vjp(g):
        # Subgradient 0 at the kink.
        return (g * (xv > 0),)

    return x.tape.record("relu", (x,), np.maximum(xv, 0), vjp)


def concat_channels(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return tensor.concat_channels(a, b)
    a, b = _promote(tape, a), _promote(tape, b)
    ca = a.value.shape[-1]

    def vjp(g):
        return g[..., :ca], g[..., ca:]

    return tape.record("concat", (a, b), tensor.concat_channels(a.value, b.value), vjp)


def slice0(x, i: int):
    """Select row i of the leading axis."""
    if not isinstance(x, Var):
        return x[i]
    xv = x.value

    def vjp(g):
        z = np.zeros_like(xv)
        z[i] = g
        return (z,)

    return x.tape.record("slice0", (x,), xv[i], vjp)


def stack0(items):
    """Stack values along a new leading axis."""
    tape = _find_tape(*items)
    if tape is None:
        return np.stack(items)
    items = tuple(_promote(tape, v) for v in items)

    def vjp(g):
        return tuple(g[k] for k in range(len(items)))

    return tape.record("stack0", items, np.stack([v.value for v in items]), vjp)


def flip0(x):
    if not isinstance(x, Var):
        return x[::-1]

    def vjp(g):
        return (g[::-1],)

    return x.tape.record("flip0", (x,), x.value[::-1], vjp)


def swap01(x):
    if not isinstance(x, Var):
        return np.swapaxes(x, 0, 1)

    def vjp(g):
        return (np.swapaxes(g, 0, 1),)

    return x.tape.record("swap01", (x,), np.swapaxes(x.value, 0, 1), vjp)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    orig = x.value.shape

    def vjp(g):
        return (g.reshape(orig),)

    return x.tape.record("reshape", (x,), x.value.reshape(shape), vjp)


def _patchify_np(x, patch_h, patch_w):
    h, w, c = x.shape
    i, j = h // patch_h, w // patch_w
    blocks = x.reshape(i, patch_h, j, patch_w, c)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(i, j, patch_h * patch_w * c)


def _unpatchify_np(grid, patch_h, patch_w, channels):
    i, j, _ = grid.shape
    blocks = grid.reshape(i, j, patch_h, patch_w, channels)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(i * patch_h, j * patch_w, channels)


def patchify(x, patch_h: int, patch_w: int):
    """Tile an H x W x C map into an I x J grid of flattened patch vectors.

    Patch contents are flattened rows first, then columns, channels
    innermost; extents must divide exactly (validated by the caller).
    """
    if not isinstance(x, Var):
        return _patchify_np(x, patch_h, patch_w)
    c = x.value.shape[2]

    def vjp(g):
        return (_unpatchify_np(g, patch_h, patch_w, c),)

    return x.tape.record("patchify", (x,), _patchify_np(x.value, patch_h, patch_w), vjp)


def conv2d(x, spec, kernels, bias):
    tape = _find_tape(x, kernels, bias)
    if tape is None:
        return tensor.conv2d(x, spec, kernels, bias)
    x, kernels, bias = _promote(tape, x), _promote(tape, kernels), _promote(tape, bias)
    xv, kv = x.value, kernels.value
    val = tensor.conv2d(xv, spec, kv, bias.value)
    oh, ow = val.shape[:2]
    sh, sw = spec.stride_h, spec.stride_w

    def vjp(g):
        gx = gk = gb = None
        xp = xv
        if spec.padded:
            xp = np.pad(xv, ((spec.pad_top, spec.pad_bottom),
                             (spec.pad_left, spec.pad_right), (0, 0)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dy in range(spec.kernel_h):
                for dx in range(spec.kernel_w):
                    gxp[dy:dy + sh * (oh - 1) + 1:sh,
                        dx:dx + sw * (ow - 1) + 1:sw, :] += \
                        np.einsum("ijf,cf->ijc", g, kv[dy, dx])
            h, w = xv.shape[:2]
            gx = gxp[spec.pad_top:spec.pad_top + h, spec.pad_left:spec.pad_left + w, :]
        if kernels.requires_grad:
            gk = np.zeros_like(kv)
            for dy in range(spec.kernel_h):
                for dx in range(spec.kernel_w):
                    window = xp[dy:dy + sh * (oh - 1) + 1:sh,
                                dx:dx + sw * (ow - 1) + 1:sw, :]
                    gk[dy, dx] = np.einsum("ijc,ijf->cf", window, g)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gk, gb

    return tape.record("conv2d", (x, kernels, bias), val, vjp)


def transposed_conv2d(x, spec, kernels, bias):
    tape = _find_tape(x, kernels, bias)
    if tape is None:
        return tensor.transposed_conv2d(x, spec, kernels, bias)
    x, kernels, bias = _promote(tape, x), _promote(tape, kernels), _promote(tape, bias)
    xv, kv = x.value, kernels.value
    val = tensor.transposed_conv2d(xv, spec, kv, bias.value)
    i, j = xv.shape[:2]
    kh, kw, c, f = kv.shape

    def vjp(g):
        gblocks = g.reshape(i, kh, j, kw, c)
        gx = np.einsum("iyjxc,yxcf->ijf", gblocks, kv) if x.requires_grad else None
        gk = np.einsum("ijf,iyjxc->yxcf", xv, gblocks) if kernels.requires_grad else None
        gb = g.sum(axis=(0, 1)) if bias.requires_grad else None
        return gx, gk, gb

    return tape.record("transposed_conv2d", (x, kernels, bias), val, vjp)


def _pool_windows(x):
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max pooling needs even extents, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4, c)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    if not isinstance(x, Var):
        return _pool_windows(x).max(axis=2)
    xv = x.value
    win = _pool_windows(xv)
    idx = win.argmax(axis=2)
    val = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[:, :, None, :], g[:, :, None, :], axis=2)
        h, w, c = xv.shape
        return (gw.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c),)

    return x.tape.record("maxpool2x2", (x,), val, vjp)


def softmax_channels(x):
    if not isinstance(x, Var):
        return tensor.softmax_channels(x)
    out = tensor.softmax_channels(x.value)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return x.tape.record("softmax", (x,), out, vjp)


def gather_channels(probs, index: np.ndarray):
    """Per-pixel channel lookup: out[h, w] = probs[h, w, index[h, w]]."""
    idx = np.asarray(index)[..., None]
    if not isinstance(probs, Var):
        return np.take_along_axis(probs, idx, axis=-1)[..., 0]
    pv = probs.value
    val = np.take_along_axis(pv, idx, axis=-1)[..., 0]

    def vjp(g):
        z = np.zeros_like(pv)
        np.put_along_axis(z, idx, g[..., None], axis=-1)
        return (z,)

    return probs.tape.record("gather", (probs,), val, vjp)


def log_clamped(p, floor: float = LOG_FLOOR):
    """log(max(p, floor)); the clamped region has zero derivative."""
    if not isinstance(p, Var):
        return np.log(np.maximum(p, floor))
    pv = p.value
    clamped = np.maximum(pv, floor)

    def vjp(g):
        return (g * (pv >= floor) / clamped,)

    return p.tape.record("log", (p,), np.log(clamped), vjp)


def sum_all(x):
    if not isinstance(x, Var):
        return np.asarray(x).sum()
    xv = x.value

    def vjp(g):
        return (np.full(xv.shape, g, dtype=xv.dtype),)

    return x.tape.record("sum", (x,), xv.sum(), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference_grad(evaluate, params: np.ndarray, epsilon: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of one tensor.

    The step for coordinate i is ``epsilon * max(|params_i|, 1)`` so large
    and small parameters get comparable relative perturbations.
    ``evaluate`` must be deterministic; two baseline evaluations are
    compared to catch hidden randomness.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    params = np.asarray(params, dtype=np.float64)
    if float(evaluate(params)) != float(evaluate(params)):
        raise DeterminismError("evaluate() returned different values for the same input")
    grad = np.zeros(params.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    work = params.copy()
    wflat = work.reshape(-1)
    pflat = params.reshape(-1)
    for i in range(pflat.size):
        step = epsilon * max(abs(pflat[i]), 1.0)
        wflat[i] = pflat[i] + step
        hi = float(evaluate(work))
        wflat[i] = pflat[i] - step
        lo = float(evaluate(work))
        wflat[i] = pflat[i]
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    """|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8), elementwise."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return np.abs(g_ad - g_fd) / denom


@dataclass
class GradientRow:
    param_id: str
    size: int
    checked: int
    max_rel: float
    mean_rel: float
    frozen: bool = False


@dataclass
class GradientReport:
    """Per-parameter comparison of reverse-mode vs finite-difference gradients."""

    rows: list[GradientRow]
    tolerance: float
    passed: bool
    worst_param: str
    worst_rel: float
    elapsed_seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    def as_table(self) -> str:
        width = max([len(r.param_id) for r in self.rows] + [9])
        lines = [f"{'parameter':<{width}}  {'size':>6}  {'checked':>7}  "
                 f"{'max_rel':>10}  {'mean_rel':>10}  status"]
        for r in self.rows:
            if r.frozen:
                status = "frozen"
            else:
                status = "ok" if r.max_rel < self.tolerance else "FAIL"
            lines.append(f"{r.param_id:<{width}}  {r.size:>6}  {r.checked:>7}  "
                         f"{r.max_rel:>10.3e}  {r.mean_rel:>10.3e}  {status}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"worst: {self.worst_param} ({self.worst_rel:.3e}); "
                     f"tolerance {self.tolerance:.1e}; {verdict}")
        return "\n".join(lines)


def gradient_check(model, batch, tolerance: float = 1e-4, *, loss_cfg=None,
                   max_coords: int = 200, epsilon: float = 1e-5,
                   seed: int = 0) -> GradientReport:
    """Check every model parameter's gradient against central differences.

    Runs in float64 (the model is converted if needed). At most
    ``max_coords`` coordinates per tensor are probed, chosen with a fixed
    seed. Frozen parameters are reported with their (identically zero)
    reverse-mode gradient and are not finite-differenced.

    The default step (1e-5 relative) is deliberately smaller than for
    smooth functions: a wider interval makes some ReLU pre-activation
    cross its kink, which corrupts the secant even though both endpoint
    evaluations are exact.
    """
    from .training import LossConfig, batch_loss, l2_penalty, traced_batch_loss

    started = time.perf_counter()
    if loss_cfg is None:
        loss_cfg = LossConfig(l2=0.0)
    if model.dtype != np.float64:
        model = model.astype(np.float64)
    batch = [(np.asarray(img, dtype=np.float64), np.asarray(tgt)) for img, tgt in batch]

    tape = Tape()
    loss_var = traced_batch_loss(model, tape, batch, loss_cfg)
    tape.mark_loss(loss_var)
    grads = tape.backward()
    if loss_cfg.l2:
        for pid in model.decay_ids:
            if pid not in model.frozen:
                grads[pid] = grads[pid] + loss_cfg.l2 * model.params[pid]

    def evaluate() -> float:
        total = batch_loss(model, batch, loss_cfg)
        if loss_cfg.l2:
            total += l2_penalty(model, loss_cfg.l2)
        return float(total)

    rng = np.random.default_rng(seed)
    rows = []
    failures = []
    worst_param, worst_rel = "", 0.0
    for pid, theta in model.params.items():
        if pid in model.frozen:
            if np.any(grads[pid]):
                failures.append(f"{pid}: frozen parameter has nonzero gradient")
            rows.append(GradientRow(pid, theta.size, 0, 0.0, 0.0, frozen=True))
            continue
        n = theta.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = theta.reshape(-1)
        g_flat = grads[pid].reshape(-1)
        rels = np.empty(len(coords), dtype=np.float64)
        for k, i in enumerate(coords):
            orig = flat[i]
            step = epsilon * max(abs(orig), 1.0)
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            rels[k] = float(relative_error(g_flat[i], fd))
        max_rel = float(rels.max()) if len(rels) else 0.0
        mean_rel = float(rels.mean()) if len(rels) else 0.0
        rows.append(GradientRow(pid, n, len(coords), max_rel, mean_rel))
        if max_rel >= worst_rel:
            worst_param, worst_rel = pid, max_rel
        if max_rel >= tolerance:
            failures.append(f"{pid}: max relative error {max_rel:.3e}")
    passed = not failures
    return GradientReport(rows, tolerance, passed, worst_param, worst_rel,
                          elapsed_seconds=time.perf_counter() - started,
                          failures=failures)
