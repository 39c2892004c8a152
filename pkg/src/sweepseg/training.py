"""Loss, optimizer, and the training loop.

The objective is pixel-mean weighted cross-entropy over non-void pixels,
optionally with median-frequency class balancing. L2 weight decay enters
through the optimizer as an extra gradient term on weight matrices
(never biases), so the effective objective is data loss plus
``l2/2 * sum ||theta||^2`` over decayable, non-frozen parameters.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics
from .errors import ConfigError, DimensionError, NumericError
from .model import Model, forward, save_model, traced_forward

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    """Cross-entropy configuration.

    ``class_weights`` is a length-K vector (None means unweighted);
    ``void_class`` pixels contribute neither loss nor gradient; ``l2`` is
    the weight-decay coefficient applied by the training step.
    """

    class_weights: tuple | None = None
    void_class: int | None = None
    l2: float = 0.001

    def __post_init__(self):
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or w.size == 0:
                raise ConfigError("class_weights must be a non-empty vector")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ConfigError("class_weights must be finite and non-negative")
            self.class_weights = tuple(float(x) for x in w)


@dataclass
class TrainConfig:
    max_epochs: int
    batch_size: int = 5
    seed: int = 0
    out_dir: Path | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)


def median_frequency_weights(freqs) -> np.ndarray:
    """Class weights w_k = median(freq) / freq_k.

    The median is taken over classes that actually occur; classes with
    zero frequency get weight zero (they cannot be learned) with a
    warning. Scaling all frequencies by a constant leaves the weights
    unchanged.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ConfigError("frequencies must be a non-empty vector")
    if np.any(freqs < 0) or not np.all(np.isfinite(freqs)):
        raise ConfigError("frequencies must be finite and non-negative")
    present = freqs > 0
    if not present.any():
        raise ConfigError("all class frequencies are zero")
    med = float(np.median(freqs[present]))
    weights = np.zeros_like(freqs)
    weights[present] = med / freqs[present]
    if not present.all():
        absent = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {absent} have zero frequency; their weight is 0",
                      stacklevel=2)
    return weights


def weighted_cross_entropy(probs, target, cfg: LossConfig):
    """Mean weighted negative log-likelihood over non-void pixels.

    ``probs`` is an H x W x K map of per-pixel distributions (array or
    tape Var), ``target`` an H x W integer map. Probabilities are clamped
    at 1e-12 inside the log. The L2 term is applied by the training step,
    not here.
    """
    target = np.asarray(target)
    value = probs.value if isinstance(probs, ad.Var) else np.asarray(probs)
    if value.ndim != 3:
        raise DimensionError(f"probs must be H x W x K, got shape {value.shape}")
    if target.shape != value.shape[:2]:
        raise DimensionError(
            f"target extents {target.shape} do not match probs {value.shape[:2]}")
    k = value.shape[2]
    void_mask = np.zeros(target.shape, dtype=bool) if cfg.void_class is None \
        else target == cfg.void_class
    live = ~void_mask
    bad = live & ((target < 0) | (target >= k))
    if bad.any():
        offender = int(target[bad].flat[0])
        raise ConfigError(f"target contains class index {offender}, valid range is [0, {k})")
    if cfg.class_weights is None:
        weights = np.ones(k, dtype=np.float64)
    else:
        weights = np.asarray(cfg.class_weights, dtype=np.float64)
        if weights.shape != (k,):
            raise ConfigError(f"{weights.size} class weights for {k} classes")
    n_live = int(live.sum())
    if n_live == 0:
        return np.asarray(0.0, dtype=value.dtype)
    safe_target = np.where(void_mask, 0, target)
    wmap = np.where(void_mask, 0.0, weights[safe_target]).astype(value.dtype)
    picked = ad.gather_channels(probs, safe_target)
    logp = ad.log_clamped(picked)
    return ad.affine(ad.sum_all(ad.mul(logp, wmap)), -1.0 / n_live, 0.0)


def batch_loss(model: Model, batch, cfg: LossConfig) -> float:
    """Mean per-image data loss over a batch (no L2), untraced."""
    total = 0.0
    for image, target in batch:
        total += float(weighted_cross_entropy(forward(model, image), target, cfg))
    return total / len(batch)


def traced_batch_loss(model: Model, tape: ad.Tape, batch, cfg: LossConfig) -> ad.Var:
    """Same objective recorded on a tape for backward()."""
    total = None
    for image, target in batch:
        loss = weighted_cross_entropy(traced_forward(model, tape, image), target, cfg)
        total = loss if total is None else ad.add(total, loss)
    if not isinstance(total, ad.Var):
        total = tape.constant(np.asarray(total))  # every image was fully void
    return ad.affine(total, 1.0 / len(batch), 0.0)


def l2_penalty(model: Model, l2: float) -> float:
    """l2/2 * sum of squared entries over decayable, non-frozen parameters."""
    total = 0.0
    for pid in model.decay_ids:
        if pid not in model.frozen:
            theta = model.params[pid]
            total += float(np.einsum("i,i->", theta.reshape(-1), theta.reshape(-1)))
    return 0.5 * l2 * total


@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates."""

    sq_grad: dict
    sq_update: dict
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def init(cls, params: dict, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(sq_grad={pid: np.zeros_like(a) for pid, a in params.items()},
                   sq_update={pid: np.zeros_like(a) for pid, a in params.items()},
                   rho=rho, eps=eps)


def adadelta_update(params: dict, grads: dict, state: AdadeltaState, cfg: LossConfig,
                    *, frozen: frozenset = frozenset(),
                    decay_ids: frozenset | None = None) -> tuple[dict, AdadeltaState]:
    """One optimizer step, in place.

    Weight decay (cfg.l2 * theta) is added to the gradient of decayable
    parameters before the update. All gradients are validated finite
    before anything mutates, so a failed step leaves parameters and state
    untouched.
    """
    live = [pid for pid in params if pid not in frozen]
    for pid in live:
        if not np.all(np.isfinite(grads[pid])):
            raise NumericError(f"non-finite gradient for {pid!r}; step aborted")
    rho, eps = state.rho, state.eps
    for pid in live:
        theta = params[pid]
        g = grads[pid]
        if cfg.l2 and (decay_ids is None or pid in decay_ids):
            g = g + (cfg.l2 * theta).astype(g.dtype)
        eg = state.sq_grad[pid]
        eu = state.sq_update[pid]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(eu + eps) / np.sqrt(eg + eps) * g
        theta += delta
        eu *= rho
        eu += (1.0 - rho) * delta * delta
    return params, state


@dataclass
class EpochRow:
    epoch: int
    mean_loss: float
    global_acc: float | None
    mean_iou: float | None
    wall_seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    class_weights: tuple | None = None
    best_iou: float = float("-inf")
    best_epoch: int = -1


LOG_COLUMNS = ("epoch", "mean_loss", "global_acc", "mean_iou", "wall_seconds")


def _write_log(path: Path, train_log: TrainLog) -> None:
    with open(path, "w", newline="") as fh:
        if train_log.class_weights is not None:
            fh.write("# class_weights: " +
                     ",".join(f"{w:.6g}" for w in train_log.class_weights) + "\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in train_log.rows:
            writer.writerow([
                r.epoch, f"{r.mean_loss:.6f}",
                "" if r.global_acc is None else f"{r.global_acc:.6f}",
                "" if r.mean_iou is None else f"{r.mean_iou:.6f}",
                f"{r.wall_seconds:.3f}"])


def evaluate_split(model: Model, samples, void_class: int | None) -> metrics.ConfusionMatrix:
    """Confusion matrix of argmax predictions over a list of samples."""
    cm = metrics.ConfusionMatrix.zeros(model.config.classes)
    for sample in samples:
        pred = forward(model, sample.image).argmax(axis=-1)
        cm = metrics.accumulate(cm, pred, sample.mask, void_class=void_class)
    return cm


def train(model: Model, dataset, train_cfg: TrainConfig, loss_cfg: LossConfig, *,
          optimizer_state: AdadeltaState | None = None, start_epoch: int = 0,
          best_iou: float = float("-inf"),
          prior_rows: list[EpochRow] | None = None) -> TrainLog:
    """Run the epoch loop; returns the log and writes checkpoints.

    Each epoch shuffles the training split with a seed derived from
    (run seed, epoch index), so a resumed run replays the exact same
    batches. When ``train_cfg.out_dir`` is set, ``log.csv`` and
    ``last.model`` are rewritten after every epoch and ``best.model``
    tracks the best mean-IoU evaluation. A numeric failure aborts the run
    with the last finished epoch's checkpoints intact.
    """
    train_samples = dataset.split("train")
    if not train_samples:
        raise ConfigError("training split is empty")
    eval_samples = dataset.split("valid") or train_samples
    state = optimizer_state or AdadeltaState.init(model.params)
    train_log = TrainLog(class_weights=loss_cfg.class_weights, best_iou=best_iou)
    if prior_rows:
        train_log.rows.extend(prior_rows)
    out_dir = train_cfg.out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            save_model(model, out_dir / "last.model", optimizer_state=state,
                       extra={"epoch": 0, "best_iou": None})
            save_model(model, out_dir / "best.model")
        _write_log(out_dir / "log.csv", train_log)
    started = time.perf_counter()
    for epoch in range(start_epoch, train_cfg.max_epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        try:
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = [(train_samples[i].image, train_samples[i].mask)
                         for i in order[lo:lo + train_cfg.batch_size]]
                tape = ad.Tape()
                loss = traced_batch_loss(model, tape, batch, loss_cfg)
                tape.mark_loss(loss)
                grads = tape.backward()
                adadelta_update(model.params, grads, state, loss_cfg,
                                frozen=model.frozen, decay_ids=model.decay_ids)
                epoch_loss += float(loss.value) * len(batch)
        except NumericError:
            log.exception("numeric failure in epoch %d; aborting with last "
                          "checkpoint intact", epoch)
            raise
        mean_loss = epoch_loss / len(train_samples)
        global_acc = mean_iou = None
        if (epoch + 1) % train_cfg.eval_every == 0 or epoch == train_cfg.max_epochs - 1:
            cm = evaluate_split(model, eval_samples, loss_cfg.void_class)
            global_acc = metrics.global_accuracy(cm)
            _, mean_iou = metrics.mean_iou(cm)
        row = EpochRow(epoch, mean_loss, global_acc, mean_iou,
                       time.perf_counter() - started)
        train_log.rows.append(row)
        if mean_iou is not None and mean_iou > train_log.best_iou:
            train_log.best_iou = mean_iou
            train_log.best_epoch = epoch
            if out_dir is not None:
                save_model(model, out_dir / "best.model",
                           extra={"epoch": epoch + 1, "mean_iou": mean_iou})
        if out_dir is not None:
            save_model(model, out_dir / "last.model", optimizer_state=state,
                       extra={"epoch": epoch + 1, "best_iou": train_log.best_iou,
                              "best_epoch": train_log.best_epoch})
            _write_log(out_dir / "log.csv", train_log)
    return train_log
