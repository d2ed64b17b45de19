"""Desk-scale saliency network: strided conv encoder, SE fusion, activation head.

Parameter set (names are fixed; checkpoints carry exactly these, in this order):

    stem.w, stem.b                      4x4 stride 2, in -> 8
    enc{1,2,3}.a.w / .b                 4x4 stride 2
    enc{1,2,3}.b.w / .b                 3x3 stride 1
    se{3,4,5}.fc1.w / .b, .fc2.w / .b   per-stage SE gates
    fuse.fc1.w / .b, fuse.fc2.w / .b    SE gate over the concatenated 112 channels

Stage widths are 16/32/64 at strides 4/8/16.

Every conv kernel is point symmetric (equal to itself rotated by 180 degrees),
so the network commutes with a half-turn of the input. None of the label-free
losses penalises a global translation of the map; with free kernels the
encoder drifts and the maps end up offset from the objects by several pixels.
Symmetric kernels leave no direction to drift in.
"""

from __future__ import annotations

import numpy as np

from .gridcore import DiffGraph, Grid, ShapeError

STEM_WIDTH = 8
STAGE_WIDTHS = (16, 32, 64)
SE_REDUCTION = 4
FUSED_WIDTH = sum(STAGE_WIDTHS)
# Circular padding keeps every pixel's neighbourhood the same shape; zero padding
# lets the encoder see absolute position, which the label-free loss exploits.
PADDING_MODE = "wrap"
# stride-2 window; even sizes with padding (k - 2) / 2 keep output i centred on
# input 2i + 0.5, matching the pixel-centre resize convention
DOWN_KERNEL = 4


def _conv_shapes(in_channels: int) -> list[tuple[str, tuple[int, ...]]]:
    k = DOWN_KERNEL
    shapes = [("stem", (STEM_WIDTH, in_channels, k, k))]
    prev = STEM_WIDTH
    for i, c in enumerate(STAGE_WIDTHS, start=1):
        shapes.append((f"enc{i}.a", (c, prev, k, k)))
        shapes.append((f"enc{i}.b", (c, c, 3, 3)))
        prev = c
    return shapes


def _se_shapes() -> list[tuple[str, int]]:
    return [("se3", STAGE_WIDTHS[0]), ("se4", STAGE_WIDTHS[1]), ("se5", STAGE_WIDTHS[2]),
            ("fuse", FUSED_WIDTH)]


def param_shapes(in_channels: int = 3) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable array."""
    out: dict[str, tuple[int, ...]] = {}
    for name, shape in _conv_shapes(in_channels):
        out[f"{name}.w"] = shape
        out[f"{name}.b"] = (shape[0],)
    for name, c in _se_shapes():
        r = max(1, c // SE_REDUCTION)
        out[f"{name}.fc1.w"] = (r, c)
        out[f"{name}.fc1.b"] = (r,)
        out[f"{name}.fc2.w"] = (c, r)
        out[f"{name}.fc2.b"] = (c,)
    return out


INIT_GAIN = np.sqrt(3.0)


def symmetrize_kernel(w: np.ndarray) -> np.ndarray:
    """Point-symmetric part of a conv kernel; exact identity on symmetric kernels."""
    return 0.5 * (w + w[..., ::-1, ::-1])


def mirror_kernel(w: np.ndarray) -> np.ndarray:
    """Copy the first half of each kernel onto its 180-degree image.

    Unlike averaging this keeps the per-entry variance of the draw.
    """
    flat = w.reshape(w.shape[:2] + (-1,))
    j = np.arange(flat.shape[-1])
    return np.where(j <= j[::-1], flat, flat[..., ::-1]).reshape(w.shape)


def init_params(rng: np.random.Generator, in_channels: int = 3) -> dict[str, np.ndarray]:
    """Weights ~ U(-b, b) with b = sqrt(3 / fan_in), i.e. std 1 / sqrt(fan_in); biases zero.

    Conv kernels are then mirrored into point-symmetric form. On smooth
    inputs a mirrored kernel responds like one with twice the variance, so
    this gain keeps the three stages at comparable magnitude at init.
    """
    params = {}
    for name, shape in param_shapes(in_channels).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = INIT_GAIN / np.sqrt(np.prod(shape[1:]))
            w = rng.uniform(-bound, bound, size=shape)
            params[name] = mirror_kernel(w) if w.ndim == 4 else w
    return params


def corner_patch_mean(y: np.ndarray) -> float:
    """Mean over the four corner patches of size max(1, H//8) x max(1, W//8)."""
    h, w = y.shape[-2:]
    ph, pw = max(1, h // 8), max(1, w // 8)
    plane = y.reshape(-1, h, w)[0]
    patches = [plane[:ph, :pw], plane[:ph, w - pw:], plane[h - ph:, :pw], plane[h - ph:, w - pw:]]
    return float(np.mean([p.mean() for p in patches]))


def needs_inversion(y: np.ndarray) -> bool:
    return corner_patch_mean(y) > 0.5


def corner_inversion(y: Grid) -> Grid:
    """Flip the map when its corners look salient (corner mean strictly above 0.5)."""
    if y.channels != 1:
        raise ShapeError(f"expected a single-channel map, got {y.channels} channels")
    return Grid(1.0 - y.data) if needs_inversion(y.data) else y


def _se(g: DiffGraph, x: int, name: str) -> int:
    pooled = g.global_avg_pool(x)
    hidden = g.relu(g.fc(pooled, g.input(f"{name}.fc1.w"), g.input(f"{name}.fc1.b")))
    gate = g.sigmoid(g.fc(hidden, g.input(f"{name}.fc2.w"), g.input(f"{name}.fc2.b")))
    return g.mul(x, gate)


def se_block(features: Grid, fc1_w, fc1_b, fc2_w, fc2_b) -> Grid:
    """Squeeze-and-excitation gating of ``features`` (standalone, no graph kept)."""
    c = features.channels
    if np.shape(fc1_w)[1] != c:
        raise ShapeError(f"SE block expects {np.shape(fc1_w)[1]} channels, got {c}")
    g = DiffGraph()
    x = g.input("x")
    w = {k: g.input(k) for k in ("w1", "b1", "w2", "b2")}
    pooled = g.global_avg_pool(x)
    hidden = g.relu(g.fc(pooled, w["w1"], w["b1"]))
    gate = g.sigmoid(g.fc(hidden, w["w2"], w["b2"]))
    g.mul(x, gate)
    return g.forward({"x": features, "w1": fc1_w, "b1": fc1_b, "w2": fc2_w, "b2": fc2_b})


class SaliencyNet:
    """Holds parameters and one recorded graph per (input shape, slot)."""

    def __init__(self, params: dict[str, np.ndarray], step: int = 0):
        in_ch = params["stem.w"].shape[1]
        expected = param_shapes(in_ch)
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ from the fixed set: "
                             f"missing {sorted(set(expected) - set(params))}, "
                             f"extra {sorted(set(params) - set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in expected}
        self.step = step
        self._graphs: dict[tuple, tuple[DiffGraph, dict[str, int]]] = {}

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int = 3) -> "SaliencyNet":
        return cls(init_params(rng, in_channels))

    @property
    def in_channels(self) -> int:
        return self.params["stem.w"].shape[1]

    def _build(self, h: int, w: int) -> tuple[DiffGraph, dict[str, int]]:
        g = DiffGraph()
        tags: dict[str, int] = {}
        x = g.input("x")

        def conv(inp, name, stride):
            k = self.params[f"{name}.w"].shape[-1]
            pad = (k - 2) // 2 if stride == 2 else k // 2
            return g.relu(g.conv2d(inp, g.input(f"{name}.w"), g.input(f"{name}.b"), stride=stride,
                                   padding=pad, padding_mode=PADDING_MODE))

        h0 = conv(x, "stem", 2)
        feats = []
        for i in range(1, 4):
            h0 = conv(conv(h0, f"enc{i}.a", 2), f"enc{i}.b", 1)
            feats.append(h0)
        tags["E3"], tags["E4"], tags["E5"] = feats
        h4, w4 = h // 4, w // 4
        fused = []
        for f, name in zip(feats, ("se3", "se4", "se5")):
            fused.append(g.resize(_se(g, f, name), h4, w4))
        hmap = _se(g, g.concat(*fused), "fuse")
        tags["H"] = hmap
        centred = g.sub_broadcast(hmap, g.spatial_mean(hmap))
        logits = g.channel_sum(centred)
        tags["logits"] = logits
        y4 = g.sigmoid(logits)
        tags["Y4_raw"] = y4
        tags["Y4"] = g.flip_if(y4, needs_inversion)
        g.resize(tags["Y4"], h, w)
        return g, tags

    def graph(self, h: int, w: int, slot: str = "main") -> tuple[DiffGraph, dict[str, int]]:
        key = (h, w, slot)
        if key not in self._graphs:
            self._graphs[key] = self._build(h, w)
        return self._graphs[key]

    def check_input(self, x: Grid):
        if x.channels != self.in_channels:
            raise ShapeError(f"model expects {self.in_channels} input channels, got {x.channels}")
        if x.height % 16 or x.width % 16:
            raise ShapeError(f"input size {x.height}x{x.width} must be a multiple of 16")

    def effective_params(self) -> dict[str, np.ndarray]:
        return {k: symmetrize_kernel(v) if v.ndim == 4 else v for k, v in self.params.items()}

    def forward(self, x: Grid, slot: str = "main") -> Grid:
        self.check_input(x)
        g, _ = self.graph(x.height, x.width, slot)
        return g.forward({"x": x, **self.effective_params()})

    def backward(self, seed, shape: tuple[int, int], slot: str = "main") -> dict[str, np.ndarray]:
        g, _ = self.graph(*shape, slot)
        grads = g.backward(seed)
        grads.pop("x")
        # chain rule through symmetrize_kernel, which is its own adjoint
        return {k: symmetrize_kernel(v) if v.ndim == 4 else v for k, v in grads.items()}

    def encoder_forward(self, x: Grid) -> tuple[Grid, Grid, Grid]:
        self.forward(x, slot="probe")
        g, tags = self.graph(x.height, x.width, "probe")
        return tuple(Grid(g.value(tags[k])) for k in ("E3", "E4", "E5"))

    def probe(self, x: Grid, tag: str) -> np.ndarray:
        """Forward ``x`` and return an intermediate value (E3..E5, H, logits, Y4_raw, Y4)."""
        self.forward(x, slot="probe")
        g, tags = self.graph(x.height, x.width, "probe")
        return g.value(tags[tag]).copy()

    def copy(self) -> "SaliencyNet":
        return SaliencyNet({k: v.copy() for k, v in self.params.items()}, self.step)


def activation_head(E3: Grid, E4: Grid, E5: Grid, params: dict[str, np.ndarray],
                    out_size: tuple[int, int] | None = None) -> Grid:
    """Run the head alone on given encoder features.

    ``out_size`` defaults to four times the E3 resolution.
    """
    if E4.shape[1:] != (E3.height // 2, E3.width // 2) or E5.shape[1:] != (E3.height // 4, E3.width // 4):
        raise ShapeError(f"stage shapes {E3.shape}, {E4.shape}, {E5.shape} are not strides 4/8/16")
    g = DiffGraph()
    ins = [g.input(n) for n in ("E3", "E4", "E5")]
    fused = [g.resize(_se(g, f, n), E3.height, E3.width) for f, n in zip(ins, ("se3", "se4", "se5"))]
    hmap = _se(g, g.concat(*fused), "fuse")
    y4 = g.flip_if(g.sigmoid(g.channel_sum(g.sub_broadcast(hmap, g.spatial_mean(hmap)))), needs_inversion)
    oh, ow = out_size or (E3.height * 4, E3.width * 4)
    g.resize(y4, oh, ow)
    head_params = {k: v for k, v in params.items() if k.split(".")[0] in ("se3", "se4", "se5", "fuse")}
    return g.forward({"E3": E3, "E4": E4, "E5": E5, **head_params})
