"""Netpbm image I/O, synthetic multimodal datasets and manifests."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridcore import Grid, ShapeError, resize_bilinear
from .texture import MODALITY_ORDER, ModalityStack, stack_modalities


class FormatError(ValueError):
    pass


# -- netpbm -------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at byte {start}")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> Grid:
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {buf[:2]!r} at byte 0; expected P5 or P6")
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r} at byte {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {pos}; only 255 is supported")
    if width < 1 or height < 1:
        raise FormatError(f"empty image {width}x{height} at byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload at byte {pos + len(payload)}: expected {need} bytes")
    a = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Grid(a.transpose(2, 0, 1).astype(np.float64) / 255.0)


def encode_netpbm(grid: Grid) -> bytes:
    if grid.channels not in (1, 3):
        raise ShapeError(f"can only encode 1 or 3 channels, got {grid.channels}")
    x = grid.data
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    # round half away from zero; values are non-negative
    q = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if grid.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, grid.width, grid.height)
    return header + q.transpose(1, 2, 0).tobytes()


def read_image(path) -> Grid:
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return decode_netpbm(buf)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def write_image(grid: Grid, path) -> None:
    data = encode_netpbm(grid)
    with open(path, "wb") as f:
        f.write(data)


# -- synthetic generation ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    count: int = 200
    side: int = 64
    blobs_min: int = 1
    blobs_max: int = 2
    blob_kind: str = "mixed"  # ellipse | rect | mixed
    contrast: float = 0.4
    noise: float = 0.05
    modalities: tuple[str, ...] = ()
    modality_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.side < 16 or self.side % 16:
            raise ValueError(f"side must be a positive multiple of 16, got {self.side}")
        if not 1 <= self.blobs_min <= self.blobs_max:
            raise ValueError("need 1 <= blobs_min <= blobs_max")
        if self.blob_kind not in ("ellipse", "rect", "mixed"):
            raise ValueError(f"unknown blob kind {self.blob_kind!r}")
        if not 0 <= self.noise < self.contrast <= 0.4:
            raise ValueError("need 0 <= noise < contrast <= 0.4")
        bad = set(self.modalities) - set(MODALITY_ORDER)
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        self.modalities = tuple(m for m in MODALITY_ORDER if m in self.modalities)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rounded_rect(yy, xx, cy, cx, ry, rx):
    r = 0.35 * min(ry, rx)
    dy = np.maximum(np.abs(yy - cy) - (ry - r), 0.0)
    dx = np.maximum(np.abs(xx - cx) - (rx - r), 0.0)
    return (dy ** 2 + dx ** 2 <= r ** 2) & (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def render_sample(spec: SyntheticSpec, rng: np.random.Generator):
    """Draw one (rgb, gt, modality planes) triple. All arrays H×W(×3) floats."""
    s = spec.side
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    mask = np.zeros((s, s), dtype=bool)
    radial = np.zeros((s, s))
    n_blobs = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    for _ in range(n_blobs):
        ry, rx = rng.uniform(0.12, 0.24, size=2) * s
        # keep blobs clear of the corner patches
        cy = rng.uniform(0.3, 0.7) * s
        cx = rng.uniform(0.3, 0.7) * s
        kind = spec.blob_kind if spec.blob_kind != "mixed" else ("ellipse", "rect")[int(rng.integers(2))]
        blob = (_ellipse if kind == "ellipse" else _rounded_rect)(yy, xx, cy, cx, ry, rx)
        mask |= blob
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        radial = np.maximum(radial, np.where(blob, 1.0 - np.clip(r, 0, 1), 0.0))

    bg = rng.uniform(0.1, 0.9, size=3)
    fg = np.where(bg + spec.contrast <= 0.9, bg + spec.contrast, bg - spec.contrast)
    rgb = np.where(mask[..., None], fg, bg)
    rgb = rgb + rng.uniform(-spec.noise, spec.noise, size=rgb.shape)

    planes = {}
    for m in spec.modalities:
        if m == "depth":
            # flat far plane; a ramp would wrap into a false edge at the border
            plane = np.where(mask, 0.55 + 0.3 * radial, 0.3)
        elif m == "thermal":
            plane = np.where(mask, 0.75, 0.3)
        else:  # flow: constant motion magnitude on the objects
            plane = np.where(mask, 0.8, 0.2)
        plane = plane + rng.uniform(-spec.modality_noise, spec.modality_noise, size=plane.shape)
        planes[m] = np.clip(plane, 0.0, 1.0)
    return np.clip(rgb, 0.0, 1.0), mask, planes


@dataclass
class ManifestRecord:
    id: str
    image: str
    gt: str | None = None
    modalities: dict[str, str | None] = field(default_factory=dict)


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", newline="\n") as f:
        for r in records:
            cols = [r.id, r.image, r.gt or "-"] + [r.modalities.get(m) or "-" for m in MODALITY_ORDER]
            f.write("\t".join(cols) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    base = Path(path).parent
    records, seen = [], set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3 + len(MODALITY_ORDER):
                raise FormatError(f"{path}:{lineno}: expected {3 + len(MODALITY_ORDER)} tab-separated fields")
            sid = cols[0]
            if sid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)

            def res(c):
                return None if c == "-" else str(base / c)

            records.append(ManifestRecord(sid, res(cols[1]), res(cols[2]),
                                          {m: res(c) for m, c in zip(MODALITY_ORDER, cols[3:])}))
    return records


def gen_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, masks and modality planes plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    records = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        width = len(str(spec.count - 1))
        for i in range(spec.count):
            sid = f"s{i:0{width}d}"
            rgb, mask, planes = render_sample(spec, rng)
            write_image(Grid(rgb.transpose(2, 0, 1)), out / f"{sid}.ppm")
            write_image(Grid(mask[None].astype(np.float64)), out / f"{sid}_gt.pgm")
            mods = {}
            for m, plane in planes.items():
                write_image(Grid(plane[None]), out / f"{sid}_{m}.pgm")
                mods[m] = f"{sid}_{m}.pgm"
            records.append(ManifestRecord(sid, f"{sid}.ppm", f"{sid}_gt.pgm", mods))
        manifest = out / "manifest.tsv"
        write_manifest(records, manifest)
    except OSError as e:
        raise OSError(f"writing dataset under {out}: {e}") from e
    return manifest


# -- loading ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    stack: ModalityStack
    gt: Grid | None = None


def resize_nearest(g: Grid, out_h: int, out_w: int) -> Grid:
    ys = np.minimum(((np.arange(out_h) + 0.5) * g.height / out_h).astype(int), g.height - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * g.width / out_w).astype(int), g.width - 1)
    return Grid(g.data[:, ys][:, :, xs])


def load_dataset(manifest, target_side: int, modalities=()) -> list[Sample]:
    """Load every record in file order, resized to ``target_side``²."""
    records = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    samples = []
    for r in records:
        try:
            rgb = read_image(r.image)
            if rgb.channels != 3:
                raise FormatError(f"{r.image}: expected an RGB (P6) image")
            rgb = resize_bilinear(rgb, target_side, target_side)
            extras = {}
            for m in modalities:
                p = r.modalities.get(m)
                extras[m] = None if p is None else resize_bilinear(read_image(p), target_side, target_side)
            gt = None
            if r.gt is not None:
                gt = resize_nearest(read_image(r.gt), target_side, target_side)
                gt = Grid((gt.data > 0.5).astype(np.float64))
            samples.append(Sample(r.id, stack_modalities(rgb, extras, modalities), gt))
        except (OSError, ValueError) as e:
            raise type(e)(f"sample {r.id}: {e}") from e
    return samples


def flip_sample(s: Sample) -> Sample:
    planes = Grid(s.stack.planes.data[:, :, ::-1])
    stack = ModalityStack(planes, s.stack.modalities, dict(s.stack.available))
    gt = None if s.gt is None else Grid(s.gt.data[:, :, ::-1])
    return Sample(s.id, stack, gt)


def resize_stack(stack: ModalityStack, side: int) -> ModalityStack:
    if stack.height == side and stack.width == side:
        return stack
    return ModalityStack(resize_bilinear(stack.planes, side, side), stack.modalities, dict(stack.available))


def dataset_dir_files(root) -> list[str]:
    """Sorted relative file list under ``root`` (used for reproducibility checks)."""
    out = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            out.append(os.path.relpath(os.path.join(dirpath, f), root))
    return sorted(out)
