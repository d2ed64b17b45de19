"""Two-stage training: self-distillation, pseudo-label export, retraining.

All randomness for a run comes from one ``numpy.random.Generator`` seeded with
``config.seed`` and consumed in this order: parameter initialisation, then per
epoch a permutation of the dataset, then per step the reference side followed
by one flip draw per batch sample.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Sample, flip_sample, read_image, resize_stack, write_image
from .gridcore import Grid, ShapeError
from .losses import LossReport, LossWeights, iou_loss, total_loss
from .model import SaliencyNet, param_shapes


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, report):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    side: int = 64
    ref_sides: tuple[int, ...] = (48, 96)
    lr: float = 0.1
    momentum: float = 0.9
    alpha: float = 200.0
    lambda_c: float = 1.0
    lambda_b: float = 0.05
    lambda_m: float = 1.0
    k: int = 5
    seed: int = 0
    modalities: tuple[str, ...] = ()
    stage2_epochs: int = 10
    stage2_lr: float = 0.005

    def __post_init__(self):
        self.ref_sides = tuple(int(s) for s in self.ref_sides)
        self.modalities = tuple(self.modalities)
        if self.epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for s in (self.side,) + self.ref_sides:
            if s < 16 or s % 16:
                raise ConfigError(f"side {s} is not a positive multiple of 16")
        if not self.ref_sides:
            raise ConfigError("at least one reference side is required")
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigError(f"k must be odd and >= 3, got {self.k}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        try:
            self.weights
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_b, self.lambda_m)


def rho_at(step: int, total_steps: int) -> float:
    """Curriculum progress, 0 at the first step and 1 at the last."""
    if total_steps < 1 or not 0 <= step <= total_steps - 1:
        raise ValueError(f"step {step} outside [0, {total_steps - 1}]")
    if total_steps == 1:
        return 1.0
    return step / (total_steps - 1)


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps - 1:
        raise ValueError(f"step {step} outside [0, {total_steps - 1}]")
    return lr0 * (1.0 - step / total_steps)


@dataclass
class RunLog:
    steps: list[tuple[int, float, float, LossReport]] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_text(self) -> str:
        lines = ["step,rho,lr,csd_main,csd_ref,btm_main,btm_ref,ms,total"]
        for step, rho, lr, rep in self.steps:
            vals = [rho, lr] + rep.as_row()
            lines.append(f"{step}," + ",".join(f"{v:.17g}" for v in vals))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.to_text())


class SGD:
    """Momentum SGD: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            params[k] -= lr * v


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_modalities(net: SaliencyNet, dataset: list[Sample]):
    for s in dataset:
        if s.stack.planes.channels != net.in_channels:
            raise ConfigError(f"sample {s.id} has {s.stack.planes.channels} channels "
                              f"but the model expects {net.in_channels}")


def _add_grads(acc: dict | None, grads: dict) -> dict:
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def train_stage1(config: TrainConfig, dataset: list[Sample], log_predictions: bool = False):
    """Self-distillation on the model's own activation maps.

    Returns ``(net, runlog)``. With ``log_predictions`` the runlog also keeps
    each step's main-scale predictions under ``runlog.predictions``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for s in dataset:
        if s.stack.height != config.side or s.stack.width != config.side:
            raise ShapeError(f"sample {s.id} is {s.stack.height}x{s.stack.width}, expected side {config.side}")
    rng = np.random.default_rng(config.seed)
    net = SaliencyNet.create(rng, dataset[0].stack.planes.channels)
    _check_modalities(net, dataset)
    opt = SGD(net.params, config.momentum)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log = RunLog()
    if log_predictions:
        log.predictions = []
    t0 = time.perf_counter()
    weights = config.weights
    step = 0
    for epoch in range(config.epochs):
        for batch in _batches(rng, len(dataset), config.batch_size):
            rho = rho_at(step, total_steps)
            lr = lr_at(step, total_steps, config.lr)
            ref_side = config.ref_sides[int(rng.integers(len(config.ref_sides)))]
            flips = rng.random(len(batch)) < 0.5
            grads = None
            sums = np.zeros(6)
            preds = []
            for idx, flip in zip(batch, flips):
                s = flip_sample(dataset[idx]) if flip else dataset[idx]
                stack_ref = resize_stack(s.stack, ref_side)
                try:
                    y_main = net.forward(s.stack.planes, "main")
                    y_ref = net.forward(stack_ref.planes, "ref")
                    rep, g_main, g_ref = total_loss(y_main, y_ref, s.stack, stack_ref, weights,
                                                    rho, config.k, config.alpha)
                except FloatingPointError as e:
                    raise NumericalAbort(step, f"sample {dataset[idx].id}: {e}") from e
                sums += rep.as_row()
                if not np.isfinite(rep.total):
                    raise NumericalAbort(step, rep)
                n = len(batch)
                grads = _add_grads(grads, net.backward(g_main / n, (config.side, config.side), "main"))
                grads = _add_grads(grads, net.backward(g_ref / n, (ref_side, ref_side), "ref"))
                if log_predictions:
                    preds.append((dataset[idx].id, bool(flip), y_main))
            mean = sums / len(batch)
            report = LossReport(*mean, rho=rho)
            if not np.all(np.isfinite(mean)):
                raise NumericalAbort(step, report)
            opt.step(net.params, grads, lr)
            log.steps.append((step, rho, lr, report))
            if log_predictions:
                log.predictions.append(preds)
            step += 1
            net.step = step
        log.epochs.append({"epoch": epoch, "mean_total": float(np.mean(
            [r.total for _, _, _, r in log.steps[-steps_per_epoch:]]))})
    log.wall_clock = time.perf_counter() - t0
    return net, log


# -- pseudo labels -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    grid: Grid
    sample_id: str
    checkpoint_id: str


def median3x3_binary(mask: np.ndarray) -> np.ndarray:
    """One pass of 3x3 majority filtering with the border replicated outward."""
    m = np.pad(mask.astype(np.int32), 1, mode="edge")
    h, w = mask.shape
    votes = sum(m[i:i + h, j:j + w] for i in range(3) for j in range(3))
    return votes >= 5


def refine_map(y: Grid) -> Grid:
    """Binarise at 0.5 and smooth with one 3x3 median pass (stands in for CRF)."""
    fg = median3x3_binary(y.data[0] > 0.5)
    return Grid(fg[None].astype(np.float64))


def generate_pseudo_labels(net: SaliencyNet, dataset: list[Sample], checkpoint_id: str = "stage1"):
    _check_modalities(net, dataset)
    labels = {}
    for s in dataset:
        y = net.forward(s.stack.planes, "main")
        labels[s.id] = PseudoLabel(refine_map(y), s.id, checkpoint_id)
    return labels


def write_labels(labels: dict[str, PseudoLabel], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.tsv", "w", newline="\n") as f:
        for sid in labels:
            lab = labels[sid]
            write_image(lab.grid, out / f"{sid}.pgm")
            f.write(f"{sid}\t{sid}.pgm\t{lab.checkpoint_id}\n")
    return out / "labels.tsv"


def read_labels(out_dir) -> dict[str, PseudoLabel]:
    out = Path(out_dir)
    labels = {}
    with open(out / "labels.tsv") as f:
        for line in f:
            if not line.strip():
                continue
            sid, fname, ckpt = line.rstrip("\n").split("\t")
            g = read_image(out / fname)
            labels[sid] = PseudoLabel(Grid((g.data > 0.5).astype(np.float64)), sid, ckpt)
    return labels


# -- stage 2 ----------------------------------------------------------------------------


def train_stage2(config: TrainConfig, dataset: list[Sample], labels: dict[str, PseudoLabel]):
    """Fresh detector fitted to pseudo labels with the IOU loss at a single scale.

    Returns ``(net, losses)`` with the per-step mean IOU loss.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for s in dataset:
        if s.id not in labels:
            raise KeyError(f"no pseudo label for sample {s.id}")
    rng = np.random.default_rng(config.seed + 1)
    net = SaliencyNet.create(rng, dataset[0].stack.planes.channels)
    _check_modalities(net, dataset)
    opt = SGD(net.params, config.momentum)
    total_steps = config.stage2_epochs * math.ceil(len(dataset) / config.batch_size)
    losses = []
    step = 0
    for _ in range(config.stage2_epochs):
        for batch in _batches(rng, len(dataset), config.batch_size):
            lr = lr_at(step, total_steps, config.stage2_lr)
            flips = rng.random(len(batch)) < 0.5
            grads = None
            batch_loss = 0.0
            for idx, flip in zip(batch, flips):
                s = dataset[idx]
                x = s.stack.planes.data
                lab = labels[s.id].grid.data
                if flip:
                    x, lab = x[:, :, ::-1], lab[:, :, ::-1]
                try:
                    y = net.forward(Grid(x), "main")
                except FloatingPointError as e:
                    raise NumericalAbort(step, f"sample {s.id}: {e}") from e
                value, g = iou_loss(y, Grid(lab))
                if not np.isfinite(value):
                    raise NumericalAbort(step, value)
                batch_loss += value / len(batch)
                grads = _add_grads(grads, net.backward(g / len(batch), y.shape[1:], "main"))
            opt.step(net.params, grads, lr)
            losses.append(batch_loss)
            step += 1
            net.step = step
    return net, losses


# -- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"A2S2"
CKPT_VERSION = 1


def save_checkpoint(net: SaliencyNet, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name in param_shapes(net.in_channels):
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", net.step))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> SaliencyNet:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params = {}
    try:
        while len(buf) - pos > 8:
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            params[name] = arr.astype(np.float64)
            pos += 8 * count
        (step,) = struct.unpack_from("<Q", buf, pos)
    except (struct.error, ValueError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint at byte {pos}: {e}") from None
    if pos + 8 != len(buf):
        raise ValueError(f"{path}: trailing bytes after step counter")
    return SaliencyNet(params, step)


def config_to_text(config) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"

