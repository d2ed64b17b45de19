"""Training losses with analytic gradients.

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the prediction it differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import Grid, ShapeError, _resize_array, _resize_array_T
from .texture import ModalityStack, _shifted, _unshift_add, boundary_mask, window_offsets


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_b: float = 0.05
    lambda_m: float = 1.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_b", "lambda_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    csd_main: float
    csd_ref: float
    btm_main: float
    btm_ref: float
    ms: float
    total: float
    rho: float

    def as_row(self) -> list[float]:
        return [self.csd_main, self.csd_ref, self.btm_main, self.btm_ref, self.ms, self.total]


def _plane(pred: Grid, what: str = "prediction") -> np.ndarray:
    if pred.channels != 1:
        raise ShapeError(f"{what} must be single-channel, got {pred.channels} channels")
    return pred.data[0]


def csd_exponent(rho: float) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return 2.0 ** (1.0 - rho)


def csd_summand(p: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel term ``-|p - 0.5|**e`` and its derivative, without the 1/N."""
    e = csd_exponent(rho)
    k = np.asarray(p, dtype=np.float64) - 0.5
    a = np.abs(k)
    value = -(a ** e)
    grad = np.zeros_like(k)
    nz = a > 0
    grad[nz] = -np.sign(k[nz]) * e * a[nz] ** (e - 1.0)
    return value, grad


def csd_loss(pred: Grid, rho: float) -> tuple[float, np.ndarray]:
    """Confidence-aware distilling loss: ``-mean |p - 0.5| ** 2**(1 - rho)``.

    At ``rho = 0`` confident pixels dominate the gradient; at ``rho = 1`` every
    pixel off 0.5 receives the same gradient magnitude. The gradient at
    ``p == 0.5`` is defined as 0.
    """
    p = _plane(pred)
    value, grad = csd_summand(p, rho)
    n = p.size
    return float(value.sum() / n), (grad / n)[None]


def btm_loss(pred: Grid, stack: ModalityStack, k: int = 5, alpha: float = 200.0,
             boundary: Grid | None = None) -> tuple[float, np.ndarray]:
    """Boundary-aware texture matching penalty.

    Mean over predicted boundary pixels of the dot product between the
    saliency texture and appearance texture vectors. Gradient flows through
    the saliency texture only; ``boundary`` can be passed to freeze the mask.
    """
    p = _plane(pred)
    if stack.planes.shape[1:] != p.shape:
        raise ShapeError(f"prediction {p.shape} and appearance {stack.planes.shape[1:]} differ in size")
    b = (boundary_mask(pred) if boundary is None else boundary).data[0]
    nb = b.sum()
    grad = np.zeros_like(p)
    if nb == 0:
        return 0.0, grad[None]
    x = stack.planes.data
    total = 0.0
    for dy, dx in window_offsets(k):
        if dy == 0 and dx == 0:
            continue  # centre entry has zero saliency texture and zero gradient
        q, valid = _shifted(p, dy, dx)
        xq, _ = _shifted(x, dy, dx)
        ta = np.exp(-alpha * ((x - xq) ** 2).sum(axis=0))
        w = b * ta * valid
        d = p - q
        total += float((w * np.abs(d)).sum())
        s = w * np.sign(d)
        grad += s
        back = np.zeros_like(p)
        _unshift_add(back, -s, dy, dx)
        grad += back
    return total / nb, (grad / nb)[None]


def ms_loss(pred_main: Grid, pred_ref: Grid) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared gap between the main prediction and the resized reference."""
    y = _plane(pred_main, "main prediction")
    _plane(pred_ref, "reference prediction")
    r = _resize_array(pred_ref.data, *y.shape)[0]
    diff = y - r
    n = y.size
    g_main = 2.0 * diff / n
    g_ref = _resize_array_T(-g_main[None], pred_ref.height, pred_ref.width)
    return float((diff ** 2).sum() / n), g_main[None], g_ref


def total_loss(pred_main: Grid, pred_ref: Grid, stack_main: ModalityStack, stack_ref: ModalityStack,
               weights: LossWeights = LossWeights(), rho: float = 0.0, k: int = 5, alpha: float = 200.0):
    """Weighted objective over both scales.

    Returns ``(report, grad_main, grad_ref)``; gradients are with respect to
    the two predictions.
    """
    parts = {}
    try:
        parts["csd_main"] = csd_loss(pred_main, rho)
        parts["csd_ref"] = csd_loss(pred_ref, rho)
    except (ValueError, ShapeError) as e:
        raise type(e)(f"csd: {e}") from e
    try:
        parts["btm_main"] = btm_loss(pred_main, stack_main, k, alpha)
        parts["btm_ref"] = btm_loss(pred_ref, stack_ref, k, alpha)
    except (ValueError, ShapeError) as e:
        raise type(e)(f"btm: {e}") from e
    try:
        ms, ms_g_main, ms_g_ref = ms_loss(pred_main, pred_ref)
    except (ValueError, ShapeError) as e:
        raise type(e)(f"ms: {e}") from e

    w = weights
    total = (w.lambda_c * (parts["csd_main"][0] + parts["csd_ref"][0])
             + w.lambda_b * (parts["btm_main"][0] + parts["btm_ref"][0])
             + w.lambda_m * ms)
    g_main = w.lambda_c * parts["csd_main"][1] + w.lambda_b * parts["btm_main"][1] + w.lambda_m * ms_g_main
    g_ref = w.lambda_c * parts["csd_ref"][1] + w.lambda_b * parts["btm_ref"][1] + w.lambda_m * ms_g_ref
    report = LossReport(parts["csd_main"][0], parts["csd_ref"][0], parts["btm_main"][0],
                        parts["btm_ref"][0], ms, total, rho)
    return report, g_main, g_ref


def iou_loss(pred: Grid, label: Grid) -> tuple[float, np.ndarray]:
    """Soft IOU loss ``1 - sum(p*g) / sum(p + g - p*g)``; 0 when the union is empty."""
    p, g = pred.data, label.data
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and label {g.shape} differ")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("label must be binary")
    inter = (p * g).sum()
    union = (p + g - p * g).sum()
    if union <= 0:
        return 0.0, np.zeros_like(p)
    # d inter/dp = g ; d union/dp = 1 - g
    grad = -(g * union - inter * (1.0 - g)) / union ** 2
    return float(1.0 - inter / union), grad


def bce_loss(pred: Grid, label: Grid) -> tuple[float, np.ndarray]:
    p, g = pred.data, label.data
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and label {g.shape} differ")
    p = np.clip(p, 1e-12, 1 - 1e-12)
    n = p.size
    value = -(g * np.log(p) + (1 - g) * np.log(1 - p)).sum() / n
    grad = -(g / p - (1 - g) / (1 - p)) / n
    return float(value), grad


# -- gradient landscapes ------------------------------------------------------

LANDSCAPE_LOSSES = ("csd", "l1", "bce")


def landscape_point(loss_id: str, rho: float, p: float) -> tuple[float, float]:
    """Per-pixel value and derivative of a loss at prediction ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"prediction sample must lie strictly inside (0, 1), got {p}")
    if loss_id == "csd":
        v, g = csd_summand(np.array([p]), rho)
        return float(v[0]), float(g[0])
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if loss_id == "l1":
        return abs(p - 0.5), float(np.sign(p - 0.5))
    if loss_id == "bce":
        # Target is the prediction's own 0.5-binarisation.
        if p > 0.5:
            return -float(np.log(p)), -1.0 / p
        return -float(np.log(1.0 - p)), 1.0 / (1.0 - p)
    raise ValueError(f"unknown loss {loss_id!r}; expected one of {LANDSCAPE_LOSSES}")


def landscape_rows(losses=LANDSCAPE_LOSSES, rhos=(0.0, 0.25, 0.5, 0.75, 1.0), samples=None):
    if samples is None:
        samples = default_landscape_samples()
    rows = []
    for loss_id in losses:
        for rho in rhos:
            for p in samples:
                v, g = landscape_point(loss_id, rho, p)
                rows.append((loss_id, rho, p, v, g))
    return rows


def default_landscape_samples() -> list[float]:
    return [i / 1000 for i in range(1, 1000)]


def write_landscape(rows, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("loss,rho,p,value,grad\n")
        for loss_id, rho, p, v, g in rows:
            f.write(f"{loss_id},{rho:.17g},{p:.17g},{v:.17g},{g:.17g}\n")
