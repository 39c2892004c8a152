"""Model assembly: configuration, initialization, forward pass, persistence.

A model is a frontend (possibly empty), a stack of recurrent sweep
layers, a stack of upsampling layers, a pointwise classifier to the
class count, and a channel softmax. The configuration is validated so
the product of all downsampling factors (frontend pools and patch
sizes) equals the product of upsampling filter sizes, which guarantees
predictions at input resolution.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers
from .errors import ConfigError, DimensionError, FormatError
from .layers import POOL, FrontendConv, GruParams, ReNetParams, SweepParams
from .tensor import ConvSpec


@dataclass(frozen=True)
class ConvStageConfig:
    """Extent-preserving frontend convolution: odd kernel, stride 1, symmetric pad."""

    kernel: int
    channels: int


@dataclass(frozen=True)
class PoolStageConfig:
    """2x2 max pool with stride 2."""


@dataclass(frozen=True)
class RenetLayerConfig:
    patch_h: int
    patch_w: int
    units: int


@dataclass(frozen=True)
class UpsampleLayerConfig:
    filter_h: int
    filter_w: int
    channels: int


@dataclass
class ModelConfig:
    input_h: int
    input_w: int
    classes: int
    renet: tuple[RenetLayerConfig, ...]
    upsample: tuple[UpsampleLayerConfig, ...]
    frontend: tuple = ()
    frontend_frozen: bool = False
    seed: int = 0

    def __post_init__(self):
        self.renet = tuple(self.renet)
        self.upsample = tuple(self.upsample)
        self.frontend = tuple(self.frontend)

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.input_h < 1 or self.input_w < 1:
            raise ConfigError(f"input extents must be positive, got "
                              f"{self.input_h}x{self.input_w}")
        if not self.renet:
            raise ConfigError("at least one recurrent layer is required")
        self.shape_walk()

    def shape_walk(self) -> list[tuple[int, int, int]]:
        """Extents and channels after each stage; raises on any mismatch."""
        h, w, c = self.input_h, self.input_w, 3
        trace = [(h, w, c)]
        down_h = down_w = up_h = up_w = 1
        for stage in self.frontend:
            if isinstance(stage, PoolStageConfig):
                if h % 2 or w % 2:
                    raise ConfigError(f"pool stage needs even extents, got {h}x{w}")
                h, w = h // 2, w // 2
                down_h *= 2
                down_w *= 2
            else:
                if stage.kernel < 1 or stage.kernel % 2 == 0:
                    raise ConfigError(
                        f"frontend kernels must be odd so extents are preserved, "
                        f"got {stage.kernel}")
                if stage.channels < 1:
                    raise ConfigError("frontend channels must be >= 1")
                c = stage.channels
            trace.append((h, w, c))
        for cfg in self.renet:
            if cfg.units < 1:
                raise ConfigError(f"recurrent units must be >= 1, got {cfg.units}")
            if cfg.patch_h < 1 or cfg.patch_w < 1 or h % cfg.patch_h or w % cfg.patch_w:
                raise ConfigError(
                    f"extents {h}x{w} not divisible by patch {cfg.patch_h}x{cfg.patch_w}")
            h, w = h // cfg.patch_h, w // cfg.patch_w
            down_h *= cfg.patch_h
            down_w *= cfg.patch_w
            c = 2 * cfg.units
            trace.append((h, w, c))
        for cfg in self.upsample:
            if cfg.filter_h < 1 or cfg.filter_w < 1 or cfg.channels < 1:
                raise ConfigError(f"invalid upsample stage: {cfg}")
            h, w = h * cfg.filter_h, w * cfg.filter_w
            up_h *= cfg.filter_h
            up_w *= cfg.filter_w
            c = cfg.channels
            trace.append((h, w, c))
        if (h, w) != (self.input_h, self.input_w):
            raise ConfigError(
                f"resolution mismatch: total downsampling {down_h}x{down_w} vs "
                f"total upsampling {up_h}x{up_w}; predictions would be {h}x{w} "
                f"for a {self.input_h}x{self.input_w} input")
        return trace

    def to_dict(self) -> dict:
        d = {
            "input_h": self.input_h, "input_w": self.input_w,
            "classes": self.classes, "seed": self.seed,
            "frontend_frozen": self.frontend_frozen,
            "frontend": [
                {"kind": "pool"} if isinstance(s, PoolStageConfig)
                else {"kind": "conv", "kernel": s.kernel, "channels": s.channels}
                for s in self.frontend],
            "renet": [asdict(s) for s in self.renet],
            "upsample": [asdict(s) for s in self.upsample],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            frontend = []
            for s in d.get("frontend", []):
                if s["kind"] == "pool":
                    frontend.append(PoolStageConfig())
                elif s["kind"] == "conv":
                    frontend.append(ConvStageConfig(int(s["kernel"]), int(s["channels"])))
                else:
                    raise ConfigError(f"unknown frontend stage kind {s['kind']!r}")
            renet = [RenetLayerConfig(int(s["patch_h"]), int(s["patch_w"]), int(s["units"]))
                     for s in d["renet"]]
            upsample = [UpsampleLayerConfig(int(s["filter_h"]), int(s["filter_w"]),
                                            int(s["channels"]))
                        for s in d["upsample"]]
            return cls(input_h=int(d["input_h"]), input_w=int(d["input_w"]),
                       classes=int(d["classes"]), renet=tuple(renet),
                       upsample=tuple(upsample), frontend=tuple(frontend),
                       frontend_frozen=bool(d.get("frontend_frozen", False)),
                       seed=int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed model config: {exc}") from exc


def config_from_hyperparams(input_h: int, input_w: int, classes: int,
                            patch_sizes, renet_units, upsample_filters,
                            upsample_channels, frontend=(), seed: int = 0,
                            frontend_frozen: bool = False) -> ModelConfig:
    """Build a config from per-layer hyperparameter lists.

    ``patch_sizes`` pairs with ``renet_units`` one-to-one. When
    ``upsample_filters`` is shorter than ``upsample_channels`` the
    remaining stages use 1x1 filters (pointwise, no spatial growth), so
    a row like filters=[(2,2)], channels=[50, 50] yields one upsampling
    stage and one pointwise stage.
    """
    if len(patch_sizes) != len(renet_units):
        raise ConfigError(f"{len(patch_sizes)} patch sizes vs {len(renet_units)} unit counts")
    if len(upsample_filters) > len(upsample_channels):
        raise ConfigError(f"{len(upsample_filters)} upsample filters vs only "
                          f"{len(upsample_channels)} channel counts")
    filters = list(upsample_filters) + [(1, 1)] * (len(upsample_channels) - len(upsample_filters))
    renet = tuple(RenetLayerConfig(ph, pw, u)
                  for (ph, pw), u in zip(patch_sizes, renet_units))
    upsample = tuple(UpsampleLayerConfig(fh, fw, ch)
                     for (fh, fw), ch in zip(filters, upsample_channels))
    return ModelConfig(input_h=input_h, input_w=input_w, classes=classes,
                       renet=renet, upsample=upsample, frontend=tuple(frontend),
                       frontend_frozen=frontend_frozen, seed=seed)


def tiny_config(input_h: int = 8, input_w: int = 8, classes: int = 2,
                units: int = 4, upsample_channels: int = 8, seed: int = 0) -> ModelConfig:
    """Desk-scale profile: identity frontend, one 2x2-patch recurrent layer,
    one 2x2 upsampling layer."""
    return ModelConfig(
        input_h=input_h, input_w=input_w, classes=classes,
        renet=(RenetLayerConfig(2, 2, units),),
        upsample=(UpsampleLayerConfig(2, 2, upsample_channels),),
        seed=seed)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def init_orthonormal(rows: int, cols: int, rng: np.random.Generator,
                     dtype=np.float32) -> np.ndarray:
    """Orthonormal matrix from the QR factorization of a Gaussian draw.

    Q'Q is the identity on the smaller dimension. Column signs are fixed
    by the R diagonal so the draw is uniquely determined by the rng.
    """
    if rows < 1 or cols < 1:
        raise ConfigError("orthonormal init needs positive extents")
    a = rng.standard_normal((rows, cols) if rows >= cols else (cols, rows))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q, dtype=dtype)


def init_glorot(fan_in: int, fan_out: int, shape, rng: np.random.Generator,
                dtype=np.float32) -> np.ndarray:
    """Uniform draw on +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigError("glorot init needs positive fans")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# realized model
# ---------------------------------------------------------------------------

@dataclass
class _ConvStage:
    spec: ConvSpec
    kernels: str   # parameter ids
    bias: str


@dataclass
class _PoolStage:
    pass


@dataclass
class _RenetStage:
    ids: ReNetParams      # same tree shape, holding parameter-id strings


@dataclass
class _UpsampleStage:
    spec: ConvSpec
    kernels: str
    bias: str


@dataclass
class _ClassifierStage:
    spec: ConvSpec
    kernels: str
    bias: str


class Model:
    """A realized pipeline: parameter tensors plus the stage sequence.

    ``params`` maps stable string ids to the canonical arrays; stages
    refer to parameters by id so the same description can be bound to raw
    arrays (inference) or tape leaves (training).
    """

    def __init__(self, config: ModelConfig, stages, params: dict,
                 frozen: frozenset, decay_ids: frozenset, dtype):
        self.config = config
        self.stages = stages
        self.params = params
        self.frozen = frozen
        self.decay_ids = decay_ids
        self.dtype = dtype

    def astype(self, dtype) -> "Model":
        params = {pid: np.ascontiguousarray(a, dtype=dtype) for pid, a in self.params.items()}
        return Model(self.config, self.stages, params, self.frozen, self.decay_ids, dtype)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def run(self, x, lookup):
        """Forward through all stages; ``lookup`` maps param id -> value."""
        for stage in self.stages:
            if isinstance(stage, _PoolStage):
                x = ad.maxpool2x2(x)
            elif isinstance(stage, _ConvStage):
                x = ad.relu(ad.conv2d(x, stage.spec, lookup[stage.kernels],
                                      lookup[stage.bias]))
            elif isinstance(stage, _RenetStage):
                bound = stage.ids.map_values(lookup.__getitem__)
                x = layers.renet_layer(bound, x)
            elif isinstance(stage, _UpsampleStage):
                x = layers.upsample_layer(stage.spec, lookup[stage.kernels],
                                          lookup[stage.bias], x)
            else:
                x = ad.conv2d(x, stage.spec, lookup[stage.kernels], lookup[stage.bias])
        return ad.softmax_channels(x)

    def recurrent_matrix_ids(self) -> list[str]:
        out = []
        for stage in self.stages:
            if isinstance(stage, _RenetStage):
                for direction in layers.DIRECTIONS:
                    gru = getattr(stage.ids, direction).gru
                    out += [gru.r_update, gru.r_reset, gru.r_cand]
        return out

    def frontend_param_ids(self) -> list[str]:
        out = []
        for stage in self.stages:
            if isinstance(stage, _ConvStage):
                out += [stage.kernels, stage.bias]
        return out


def build_model(config: ModelConfig, rng_seed: int | None = None,
                dtype=np.float32) -> Model:
    """Realize a validated config into parameter tensors.

    Recurrent (hidden-to-hidden) matrices are orthonormal, all other
    kernels Glorot-uniform, biases zero. The same seed always yields
    bitwise-identical parameters.
    """
    config.validate()
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    decay: list[str] = []
    stages: list = []

    def glorot(pid, fan_in, fan_out, shape):
        params[pid] = init_glorot(fan_in, fan_out, shape, rng, dtype)
        decay.append(pid)
        return pid

    def ortho(pid, n):
        params[pid] = init_orthonormal(n, n, rng, dtype)
        decay.append(pid)
        return pid

    def zeros(pid, shape):
        params[pid] = np.zeros(shape, dtype=dtype)
        return pid

    c = 3
    conv_index = 0
    for stage in config.frontend:
        if isinstance(stage, PoolStageConfig):
            stages.append(_PoolStage())
            continue
        k, ch = stage.kernel, stage.channels
        pad = (k - 1) // 2
        spec = ConvSpec(k, k, c, ch, 1, 1, pad, pad, pad, pad)
        base = f"frontend.conv{conv_index}"
        stages.append(_ConvStage(
            spec,
            glorot(f"{base}.kernels", c * k * k, ch * k * k, spec.kernel_shape()),
            zeros(f"{base}.bias", (ch,))))
        c = ch
        conv_index += 1

    def make_gru(base: str, in_dim: int, units: int) -> GruParams:
        return GruParams(
            w_update=glorot(f"{base}.w_update", in_dim, units, (in_dim, units)),
            w_reset=glorot(f"{base}.w_reset", in_dim, units, (in_dim, units)),
            w_cand=glorot(f"{base}.w_cand", in_dim, units, (in_dim, units)),
            r_update=ortho(f"{base}.r_update", units),
            r_reset=ortho(f"{base}.r_reset", units),
            r_cand=ortho(f"{base}.r_cand", units),
            b_update=zeros(f"{base}.b_update", (units,)),
            b_reset=zeros(f"{base}.b_reset", (units,)),
            b_cand=zeros(f"{base}.b_cand", (units,)))

    for li, cfg in enumerate(config.renet):
        patch_dim = cfg.patch_h * cfg.patch_w * c
        sweeps = {}
        for direction in layers.DIRECTIONS:
            in_dim = patch_dim if direction in ("down", "up") else 2 * cfg.units
            gru = make_gru(f"renet{li}.{direction}", in_dim, cfg.units)
            sweeps[direction] = SweepParams(gru, direction)
        stages.append(_RenetStage(ReNetParams(
            patch_h=cfg.patch_h, patch_w=cfg.patch_w, **sweeps)))
        c = 2 * cfg.units

    for li, cfg in enumerate(config.upsample):
        # Transposed-convolution spec: the matching direct convolution maps
        # this layer's output channels back to its input channels.
        spec = ConvSpec(cfg.filter_h, cfg.filter_w,
                        in_channels=cfg.channels, out_channels=c,
                        stride_h=cfg.filter_h, stride_w=cfg.filter_w)
        base = f"upsample{li}"
        stages.append(_UpsampleStage(
            spec,
            glorot(f"{base}.kernels", c, cfg.channels * cfg.filter_h * cfg.filter_w,
                   spec.kernel_shape()),
            zeros(f"{base}.bias", (cfg.channels,))))
        c = cfg.channels

    spec = ConvSpec(1, 1, c, config.classes)
    stages.append(_ClassifierStage(
        spec,
        glorot("classifier.kernels", c, config.classes, spec.kernel_shape()),
        zeros("classifier.bias", (config.classes,))))

    model = Model(config, stages, params, frozenset(), frozenset(decay), dtype)
    if config.frontend_frozen:
        model.frozen = frozenset(model.frontend_param_ids())
    return model


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    """Class probabilities for one image, at input resolution.

    Untraced fast path; the result is an H x W x classes map whose pixel
    rows sum to one.
    """
    image = np.asarray(image)
    expected = (model.config.input_h, model.config.input_w, 3)
    if image.shape != expected:
        raise DimensionError(f"image shape {image.shape}, model expects {expected}")
    x = np.ascontiguousarray(image, dtype=model.dtype)
    return model.run(x, model.params)


def traced_forward(model: Model, tape: ad.Tape, image: np.ndarray) -> ad.Var:
    """Forward pass recorded on a tape, with parameters bound as leaves."""
    image = np.asarray(image)
    expected = (model.config.input_h, model.config.input_w, 3)
    if image.shape != expected:
        raise DimensionError(f"image shape {image.shape}, model expects {expected}")
    leaves = bind_leaves(model, tape)
    x = tape.constant(np.ascontiguousarray(image, dtype=model.dtype))
    return model.run(x, leaves)


def bind_leaves(model: Model, tape: ad.Tape) -> dict[str, ad.Var]:
    """Register every parameter on a tape (reusing leaves already bound)."""
    bound = getattr(tape, "_model_leaves", None)
    if bound is None:
        bound = {pid: tape.leaf(arr, param_id=pid, frozen=pid in model.frozen)
                 for pid, arr in model.params.items()}
        tape._model_leaves = bound
    return bound


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MAGIC = b"SWEEPSEG"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_record(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated model file: wanted {n} bytes, got {len(data)}")
    return data


def _read_record(buf) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BI", _read_exact(buf, 5))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} for record {name!r}")
    shape = tuple(struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(ndim))
    dtype = _CODE_DTYPES[code]
    payload = _read_exact(buf, int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return name, arr.reshape(shape)


def save_model(model: Model, path, optimizer_state=None, extra: dict | None = None) -> None:
    """Write the binary container: magic, version, JSON header, parameter
    records, optional optimizer records."""
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "dtype": np.dtype(model.dtype).name,
        "frozen": sorted(model.frozen),
        "extra": extra or {},
    }
    opt_records = []
    if optimizer_state is not None:
        header["optimizer"] = {"rho": optimizer_state.rho, "eps": optimizer_state.eps}
        for pid in model.params:
            opt_records.append((f"sq_grad:{pid}", optimizer_state.sq_grad[pid]))
            opt_records.append((f"sq_update:{pid}", optimizer_state.sq_update[pid]))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(model.params)))
    for pid, arr in model.params.items():
        _write_record(buf, pid, arr)
    buf.write(struct.pack("<I", len(opt_records)))
    for name, arr in opt_records:
        _write_record(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> tuple[Model, dict]:
    """Read a model container; returns (model, extras).

    ``extras`` carries whatever :func:`save_model` stored: the ``extra``
    dict and, when present, an ``optimizer_state``. Any corruption raises
    FormatError before a partial model can escape.
    """
    from .training import AdadeltaState

    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a model file (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header: {exc}") from exc
        if "config" not in header:
            raise FormatError(f"{path}: header has no model config")
        config = ModelConfig.from_dict(header["config"])
        dtype = np.dtype(header.get("dtype", "float32")).type
        skeleton = build_model(config, dtype=dtype)
        expected = {pid: arr.shape for pid, arr in skeleton.params.items()}
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name, arr = _read_record(fh)
            if name not in expected:
                raise FormatError(f"{path}: unknown parameter {name!r}")
            if arr.shape != expected[name]:
                raise DimensionError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, "
                    f"config implies {expected[name]}")
            loaded[name] = np.ascontiguousarray(arr, dtype=dtype)
        missing = set(expected) - set(loaded)
        if missing:
            raise FormatError(f"{path}: missing parameters: {sorted(missing)}")
        params = {pid: loaded[pid] for pid in skeleton.params}
        model = Model(config, skeleton.stages, params,
                      frozenset(header.get("frozen", [])), skeleton.decay_ids, dtype)
        (n_opt,) = struct.unpack("<I", _read_exact(fh, 4))
        extras = {"extra": header.get("extra", {})}
        if n_opt:
            arrays = dict(_read_record(fh) for _ in range(n_opt))
            opt_meta = header.get("optimizer", {})
            try:
                state = AdadeltaState(
                    sq_grad={pid: np.ascontiguousarray(arrays[f"sq_grad:{pid}"], dtype=dtype)
                             for pid in params},
                    sq_update={pid: np.ascontiguousarray(arrays[f"sq_update:{pid}"], dtype=dtype)
                               for pid in params},
                    rho=float(opt_meta.get("rho", 0.95)),
                    eps=float(opt_meta.get("eps", 1e-6)))
            except KeyError as exc:
                raise FormatError(f"{path}: optimizer state is missing record {exc}") from exc
            extras["optimizer_state"] = state
        return model, extras


def load_frontend_weights(model: Model, path) -> Model:
    """Copy frontend parameters from a saved model into this one (in place)."""
    source, _ = load_model(path)
    for pid in model.frontend_param_ids():
        if pid not in source.params:
            raise FormatError(f"{path}: no frontend parameter {pid!r}")
        src = source.params[pid]
        if src.shape != model.params[pid].shape:
            raise DimensionError(
                f"frontend parameter {pid!r}: saved shape {src.shape}, "
                f"model expects {model.params[pid].shape}")
        model.params[pid][...] = src.astype(model.dtype)
    return model
