"""Neighbourhood texture vectors, boundary masks and modality stacking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridcore import Grid, ShapeError

# Fixed order of optional extra planes after the three RGB channels.
MODALITY_ORDER = ("depth", "thermal", "flow")
MISSING_MODALITY_VALUE = 0.5


@dataclass(frozen=True, eq=False)
class ModalityStack:
    planes: Grid
    modalities: tuple[str, ...] = ()
    available: dict[str, bool] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.planes.height

    @property
    def width(self) -> int:
        return self.planes.width

    def modality_slices(self) -> list[slice]:
        """Channel ranges forming one distance term each: RGB, then one per extra."""
        return [slice(0, 3)] + [slice(3 + i, 4 + i) for i in range(len(self.modalities))]


def stack_modalities(rgb: Grid, extras: dict[str, Grid | None] | None = None,
                     declared: tuple[str, ...] | list[str] = ()) -> ModalityStack:
    """Stack RGB with the declared extra planes, padding missing ones with 0.5."""
    extras = extras or {}
    if rgb.channels != 3:
        raise ShapeError(f"rgb must have 3 channels, got {rgb.channels}")
    unknown = (set(declared) | {k for k, v in extras.items() if v is not None}) - set(MODALITY_ORDER)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    undeclared = {k for k, v in extras.items() if v is not None} - set(declared)
    if undeclared:
        raise ValueError(f"modalities provided but not declared: {sorted(undeclared)}")
    mods = tuple(m for m in MODALITY_ORDER if m in declared)
    planes = [rgb.data]
    available = {}
    for m in mods:
        plane = extras.get(m)
        if plane is None:
            planes.append(np.full((1, rgb.height, rgb.width), MISSING_MODALITY_VALUE))
            available[m] = False
            continue
        if plane.channels != 1 or plane.shape[1:] != rgb.shape[1:]:
            raise ShapeError(f"{m} plane has shape {plane.shape}, expected (1, {rgb.height}, {rgb.width})")
        planes.append(plane.data)
        available[m] = True
    data = np.concatenate(planes, axis=0)
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("modality values must lie in [0, 1]")
    return ModalityStack(Grid(data), mods, available)


def window_offsets(k: int) -> list[tuple[int, int]]:
    if k < 3 or k % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {k}")
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shifted(a: np.ndarray, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (a[..., y+dy, x+dx], validity mask) over the H×W grid; invalid entries are 0."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    valid = np.zeros((h, w), dtype=bool)
    ys_dst = slice(max(0, -dy), min(h, h - dy))
    xs_dst = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[..., ys_dst, xs_dst] = a[..., ys_src, xs_src]
    valid[ys_dst, xs_dst] = True
    return out, valid


def _unshift_add(target: np.ndarray, g: np.ndarray, dy: int, dx: int):
    """Adjoint of ``_shifted``: scatter g[y, x] onto target[y+dy, x+dx]."""
    h, w = target.shape
    ys_dst = slice(max(0, -dy), min(h, h - dy))
    xs_dst = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    target[ys_src, xs_src] += g[ys_dst, xs_dst]


@dataclass(frozen=True, eq=False)
class TextureField:
    """Per-pixel neighbourhood vectors, shape (k*k, H, W), row-major window order.

    Entries for out-of-bounds neighbours are stored as 0 and flagged invalid.
    """

    values: np.ndarray
    valid: np.ndarray
    k: int

    @property
    def count(self) -> np.ndarray:
        return self.valid.sum(axis=0)

    def vector(self, y: int, x: int) -> np.ndarray:
        """The valid entries at one pixel, in window order."""
        return self.values[:, y, x][self.valid[:, y, x]]


def _single_plane(pred: Grid) -> np.ndarray:
    if pred.channels != 1:
        raise ShapeError(f"expected a single-channel prediction, got {pred.channels} channels")
    return pred.data[0]


def texture_saliency(pred: Grid, k: int = 5) -> TextureField:
    p = _single_plane(pred)
    offs = window_offsets(k)
    values = np.zeros((len(offs),) + p.shape)
    valid = np.zeros((len(offs),) + p.shape, dtype=bool)
    for n, (dy, dx) in enumerate(offs):
        q, v = _shifted(p, dy, dx)
        values[n] = np.where(v, np.abs(p - q), 0.0)
        valid[n] = v
    return TextureField(values, valid, k)


def texture_appearance(stack: ModalityStack, k: int = 5, alpha: float = 200.0) -> TextureField:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = stack.planes.data
    offs = window_offsets(k)
    values = np.zeros((len(offs),) + x.shape[1:])
    valid = np.zeros((len(offs),) + x.shape[1:], dtype=bool)
    for n, (dy, dx) in enumerate(offs):
        q, v = _shifted(x, dy, dx)
        # Each modality's squared norm is a sum over its channels, so the
        # total over modalities is a plain sum over all channels.
        d2 = ((x - q) ** 2).sum(axis=0)
        values[n] = np.where(v, np.exp(-alpha * d2), 0.0)
        valid[n] = v
    return TextureField(values, valid, k)


def boundary_mask(pred: Grid) -> Grid:
    """Pixels whose 0.5-binarised label differs from any 4-connected neighbour."""
    fg = _single_plane(pred) > 0.5
    edge = np.zeros_like(fg)
    edge[1:, :] |= fg[1:, :] != fg[:-1, :]
    edge[:-1, :] |= fg[:-1, :] != fg[1:, :]
    edge[:, 1:] |= fg[:, 1:] != fg[:, :-1]
    edge[:, :-1] |= fg[:, :-1] != fg[:, 1:]
    return Grid(edge[None].astype(np.float64))
