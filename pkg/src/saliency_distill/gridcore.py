"""Dense C×H×W grids and a small recorded-graph reverse-mode engine.

The engine supports exactly the op kinds the saliency network and its losses
need. A graph is built once (node ids are plain ints, inputs always precede
their consumers) and can then be run many times::

    g = DiffGraph()
    x = g.input("x")
    y = g.sigmoid(g.scale(x, 2.0))
    out = g.forward({"x": grid})
    grads = g.backward(Grid.full(1, 2, 2, 1.0))

Shape rules per op kind:

* ``conv2d``: input C×H×W, weight (O, C, kh, kw), bias (O,); output
  O×H'×W' with ``H' = (H + 2*pad - kh) // stride + 1``. Padding is zeros,
  edge replication or circular wrap-around.
* ``sigmoid``, ``relu``, ``scale``, ``flip_if``: shape preserving.
* ``add``, ``mul``: equal shapes, or the second operand C×1×1 (broadcast over
  space).
* ``sub_broadcast``: x C×H×W minus m C×1×1.
* ``concat``: equal H×W, channels add up.
* ``channel_sum``: C×H×W → 1×H×W.
* ``spatial_mean`` / ``global_avg_pool``: C×H×W → C×1×1.
* ``fc``: x C×1×1, weight (O, C), bias (O,) → O×1×1.
* ``resize``: C×H×W → C×h×w (bilinear, pixel-centre sampling, clamped).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable channels × height × width block of float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or 0 in arr.shape:
            raise ShapeError(f"grid must be a non-empty C×H×W array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise FloatingPointError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Grid":
        # Skips the defensive copy for arrays the engine owns.
        if not np.isfinite(arr).all():
            raise FloatingPointError("grid contains non-finite values")
        g = object.__new__(cls)
        arr.setflags(write=False)
        object.__setattr__(g, "data", arr)
        return g

    @classmethod
    def zeros(cls, c: int, h: int, w: int) -> "Grid":
        return cls(np.zeros((c, h, w)))

    @classmethod
    def full(cls, c: int, h: int, w: int, value: float) -> "Grid":
        return cls(np.full((c, h, w), float(value)))

    @classmethod
    def from_flat(cls, c: int, h: int, w: int, values) -> "Grid":
        values = np.asarray(values, dtype=np.float64)
        if values.size != c * h * w:
            raise ShapeError(f"expected {c * h * w} values for {c}x{h}x{w}, got {values.size}")
        return cls(values.reshape(c, h, w))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        return f"Grid({self.channels}x{self.height}x{self.width})"


# ---------------------------------------------------------------------------
# bilinear resampling


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D pixel-centre interpolation."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = _interp_matrix(n_in, n_out)
        m.setflags(write=False)
        _INTERP_CACHE[key] = m
    return m


def _resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = a.shape
    if (h, w) == (out_h, out_w):
        return a.copy()
    ry = interp_matrix(h, out_h)
    rx = interp_matrix(w, out_w)
    return np.einsum("yh,chw,xw->cyx", ry, a, rx, optimize=True)


def _resize_array_T(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, out_h, out_w = g.shape
    if (in_h, in_w) == (out_h, out_w):
        return g
    ry = interp_matrix(in_h, out_h)
    rx = interp_matrix(in_w, out_w)
    return np.einsum("yh,cyx,xw->chw", ry, g, rx, optimize=True)


def resize_bilinear(g: Grid, out_h: int, out_w: int) -> Grid:
    """Resample every channel to ``out_h × out_w``.

    Source coordinate for destination index ``d`` is ``(d + 0.5) * in/out - 0.5``
    clamped to ``[0, in - 1]``; same-size resizes return the input unchanged.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    return Grid._wrap(_resize_array(g.data, out_h, out_w))


# ---------------------------------------------------------------------------
# convolution helpers


_NP_PAD = {"zeros": "constant", "edge": "edge", "wrap": "wrap"}


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int, mode: str):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=_NP_PAD[mode])
    _, kh, kw = w.shape[1:]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: C, H', W', kh, kw
    out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    out += b[:, None, None]
    return out, win


def _conv_backward(g, x_shape, w, win, stride, pad, mode):
    c, h, wd = x_shape
    o, _, kh, kw = w.shape
    gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # O, C, kh, kw
    gb = g.sum(axis=(1, 2))
    gcols = np.tensordot(w, g, axes=([0], [0]))  # C, kh, kw, H', W'
    hp, wp = h + 2 * pad, wd + 2 * pad
    gx = np.zeros((c, hp, wp))
    oh, ow = g.shape[1:]
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
    if pad and mode == "edge":
        # replicated border samples route their gradient to the edge pixel
        gx[:, pad, :] += gx[:, :pad, :].sum(axis=1)
        gx[:, pad + h - 1, :] += gx[:, pad + h:, :].sum(axis=1)
        gx[:, :, pad] += gx[:, :, :pad].sum(axis=2)
        gx[:, :, pad + wd - 1] += gx[:, :, pad + wd:].sum(axis=2)
    elif pad and mode == "wrap":
        gx[:, h:h + pad, :] += gx[:, :pad, :]
        gx[:, pad:2 * pad, :] += gx[:, pad + h:, :]
        gx[:, :, wd:wd + pad] += gx[:, :, :pad]
        gx[:, :, pad:2 * pad] += gx[:, :, pad + wd:]
    if pad:
        gx = gx[:, pad:pad + h, pad:pad + wd]
    return gx, gw, gb


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# the recorded graph


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    params: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    cache: object = None


_UNARY_SHAPE_PRESERVING = {"sigmoid", "relu", "scale", "flip_if"}


class DiffGraph:
    """A fixed DAG of grid ops, evaluated forward then differentiated once."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_names: dict[str, int] = {}
        self._forwarded = False

    # -- construction -----------------------------------------------------

    def _add(self, kind: str, inputs=(), **params) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind}: input node {i} does not precede node {len(self.nodes)}")
        self.nodes.append(Node(kind, tuple(inputs), params))
        self._forwarded = False
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        if name in self.leaf_names:
            raise ValueError(f"duplicate input name {name!r}")
        nid = self._add("input", name=name)
        self.leaf_names[name] = nid
        return nid

    def conv2d(self, x: int, w: int, b: int, stride: int = 1, padding: int | None = None,
               padding_mode: str = "zeros") -> int:
        """``padding`` defaults to ``kernel // 2``; ``padding_mode`` is "zeros", "edge" or "wrap"."""
        if padding_mode not in _NP_PAD:
            raise ValueError(f"unknown padding mode {padding_mode!r}")
        return self._add("conv2d", (x, w, b), stride=stride, padding=padding, mode=padding_mode)

    def sigmoid(self, x: int) -> int:
        return self._add("sigmoid", (x,))

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def concat(self, *xs: int) -> int:
        return self._add("concat", xs)

    def channel_sum(self, x: int) -> int:
        return self._add("channel_sum", (x,))

    def spatial_mean(self, x: int) -> int:
        return self._add("spatial_mean", (x,))

    def global_avg_pool(self, x: int) -> int:
        return self._add("global_avg_pool", (x,))

    def sub_broadcast(self, x: int, m: int) -> int:
        return self._add("sub_broadcast", (x, m))

    def fc(self, x: int, w: int, b: int) -> int:
        return self._add("fc", (x, w, b))

    def resize(self, x: int, out_h: int, out_w: int) -> int:
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
        return self._add("resize", (x,), out_h=out_h, out_w=out_w)

    def scale(self, x: int, factor: float, offset: float = 0.0) -> int:
        return self._add("scale", (x,), factor=float(factor), offset=float(offset))

    def flip_if(self, x: int, predicate: Callable[[np.ndarray], bool]) -> int:
        """``1 - x`` when ``predicate(x)`` holds at forward time, else ``x``.

        The decision is frozen per forward pass; backward negates or passes the
        seed accordingly.
        """
        return self._add("flip_if", (x,), predicate=predicate)

    # -- evaluation -------------------------------------------------------

    def _err(self, nid: int, msg: str) -> ShapeError:
        return ShapeError(f"node {nid} ({self.nodes[nid].kind}): {msg}")

    def forward(self, inputs: Mapping[str, Grid | np.ndarray], output: int | None = None) -> Grid:
        if not self.nodes:
            raise GraphStateError("empty graph")
        missing = set(self.leaf_names) - set(inputs)
        if missing:
            raise GraphStateError(f"unbound inputs: {sorted(missing)}")
        for nid, node in enumerate(self.nodes):
            node.cache = None
            if node.kind == "input":
                v = inputs[node.params["name"]]
                node.value = v.data if isinstance(v, Grid) else np.asarray(v, dtype=np.float64)
                continue
            node.value = self._eval(nid, node)
            if not np.isfinite(node.value).all():
                raise FloatingPointError(f"node {nid} ({node.kind}) produced non-finite values")
        self._forwarded = True
        out = self.nodes[-1 if output is None else output].value
        if out.ndim != 3:
            raise ShapeError(f"terminal node is not a grid (shape {out.shape})")
        return Grid._wrap(out.copy())

    def value(self, nid: int) -> np.ndarray:
        v = self.nodes[nid].value
        if v is None:
            raise GraphStateError(f"node {nid} has not been evaluated")
        return v

    def _grid_in(self, nid: int, i: int) -> np.ndarray:
        v = self.nodes[i].value
        if v.ndim != 3:
            raise self._err(nid, f"expected a C×H×W grid input from node {i}, got shape {v.shape}")
        return v

    def _eval(self, nid: int, node: Node) -> np.ndarray:
        k = node.kind
        ins = node.inputs
        if k in _UNARY_SHAPE_PRESERVING:
            x = self._grid_in(nid, ins[0])
            if k == "sigmoid":
                return _sigmoid(x)
            if k == "relu":
                return np.maximum(x, 0.0)
            if k == "scale":
                return x * node.params["factor"] + node.params["offset"]
            flip = bool(node.params["predicate"](x))
            node.cache = flip
            return 1.0 - x if flip else x.copy()
        if k == "conv2d":
            x = self._grid_in(nid, ins[0])
            w, b = self.nodes[ins[1]].value, self.nodes[ins[2]].value
            if w.ndim != 4 or w.shape[1] != x.shape[0]:
                raise self._err(nid, f"weight shape {w.shape} incompatible with input channels {x.shape[0]}")
            if b.shape != (w.shape[0],):
                raise self._err(nid, f"bias shape {b.shape}, expected ({w.shape[0]},)")
            pad = node.params["padding"]
            if pad is None:
                pad = w.shape[2] // 2
            stride = node.params["stride"]
            if x.shape[1] + 2 * pad < w.shape[2] or x.shape[2] + 2 * pad < w.shape[3]:
                raise self._err(nid, f"input {x.shape} smaller than kernel {w.shape[2:]}")
            out, win = _conv_forward(x, w, b, stride, pad, node.params["mode"])
            node.cache = (win, pad)
            return out
        if k in ("add", "mul"):
            a, b = self._grid_in(nid, ins[0]), self._grid_in(nid, ins[1])
            if a.shape != b.shape and b.shape != (a.shape[0], 1, 1):
                raise self._err(nid, f"operand shapes {a.shape} and {b.shape} do not broadcast")
            return a + b if k == "add" else a * b
        if k == "sub_broadcast":
            x, m = self._grid_in(nid, ins[0]), self._grid_in(nid, ins[1])
            if m.shape != (x.shape[0], 1, 1):
                raise self._err(nid, f"expected subtrahend ({x.shape[0]}, 1, 1), got {m.shape}")
            return x - m
        if k == "concat":
            xs = [self._grid_in(nid, i) for i in ins]
            hw = xs[0].shape[1:]
            for i, x in zip(ins, xs):
                if x.shape[1:] != hw:
                    raise self._err(nid, f"input {i} spatial size {x.shape[1:]} != expected {hw}")
            return np.concatenate(xs, axis=0)
        if k == "channel_sum":
            return self._grid_in(nid, ins[0]).sum(axis=0, keepdims=True)
        if k in ("spatial_mean", "global_avg_pool"):
            return self._grid_in(nid, ins[0]).mean(axis=(1, 2), keepdims=True)
        if k == "fc":
            x = self._grid_in(nid, ins[0])
            w, b = self.nodes[ins[1]].value, self.nodes[ins[2]].value
            if x.shape[1:] != (1, 1):
                raise self._err(nid, f"expected a C×1×1 vector, got {x.shape}")
            if w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
                raise self._err(nid, f"weight {w.shape} / bias {b.shape} incompatible with {x.shape[0]} inputs")
            return (w @ x[:, 0, 0] + b)[:, None, None]
        if k == "resize":
            x = self._grid_in(nid, ins[0])
            return _resize_array(x, node.params["out_h"], node.params["out_w"])
        raise ValueError(f"unknown op kind {k!r}")

    def backward(self, seed: Grid | np.ndarray, output: int | None = None) -> dict[str, np.ndarray]:
        """Propagate ``seed`` from the terminal node; returns gradients per input name."""
        if not self._forwarded:
            raise GraphStateError("backward requires a fresh forward pass")
        self._forwarded = False
        term = len(self.nodes) - 1 if output is None else output
        seed = seed.data if isinstance(seed, Grid) else np.asarray(seed, dtype=np.float64)
        if seed.shape != self.nodes[term].value.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.nodes[term].value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[term] = np.array(seed, dtype=np.float64)

        def acc(i: int, g: np.ndarray):
            # Gradients are never mutated in place, so aliasing is safe.
            grads[i] = g if grads[i] is None else grads[i] + g

        for nid in range(term, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.kind == "input":
                continue
            ins = node.inputs
            k = node.kind
            if k == "sigmoid":
                y = node.value
                acc(ins[0], g * y * (1.0 - y))
            elif k == "relu":
                acc(ins[0], g * (self.nodes[ins[0]].value > 0))
            elif k == "scale":
                acc(ins[0], g * node.params["factor"])
            elif k == "flip_if":
                acc(ins[0], -g if node.cache else g)
            elif k == "conv2d":
                win, pad = node.cache
                x = self.nodes[ins[0]].value
                w = self.nodes[ins[1]].value
                gx, gw, gb = _conv_backward(g, x.shape, w, win, node.params["stride"], pad,
                                            node.params["mode"])
                acc(ins[0], gx)
                acc(ins[1], gw)
                acc(ins[2], gb)
            elif k == "add":
                acc(ins[0], g)
                bshape = self.nodes[ins[1]].value.shape
                acc(ins[1], g if bshape == g.shape else g.sum(axis=(1, 2), keepdims=True))
            elif k == "mul":
                a, b = self.nodes[ins[0]].value, self.nodes[ins[1]].value
                acc(ins[0], g * b)
                gb = g * a
                acc(ins[1], gb if b.shape == gb.shape else gb.sum(axis=(1, 2), keepdims=True))
            elif k == "sub_broadcast":
                acc(ins[0], g)
                acc(ins[1], -g.sum(axis=(1, 2), keepdims=True))
            elif k == "concat":
                start = 0
                for i in ins:
                    c = self.nodes[i].value.shape[0]
                    acc(i, g[start:start + c])
                    start += c
            elif k == "channel_sum":
                x = self.nodes[ins[0]].value
                acc(ins[0], np.broadcast_to(g, x.shape).copy())
            elif k in ("spatial_mean", "global_avg_pool"):
                x = self.nodes[ins[0]].value
                n = x.shape[1] * x.shape[2]
                acc(ins[0], np.broadcast_to(g / n, x.shape).copy())
            elif k == "fc":
                x = self.nodes[ins[0]].value[:, 0, 0]
                w = self.nodes[ins[1]].value
                gv = g[:, 0, 0]
                acc(ins[0], (w.T @ gv)[:, None, None])
                acc(ins[1], np.outer(gv, x))
                acc(ins[2], gv.copy())
            elif k == "resize":
                x = self.nodes[ins[0]].value
                acc(ins[0], _resize_array_T(g, x.shape[1], x.shape[2]))
            else:
                raise ValueError(f"unknown op kind {k!r}")

        out = {}
        for name, nid in self.leaf_names.items():
            g = grads[nid]
            out[name] = np.zeros_like(self.nodes[nid].value) if g is None else g
        return out


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], point, eps: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps an array to ``(value, gradient)``; ``point`` may be a Grid or an
    array. Relative error uses ``max(1e-8, |numeric|)`` as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(point.data if isinstance(point, Grid) else point, dtype=np.float64)
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise FloatingPointError("f is not finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near element {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst
