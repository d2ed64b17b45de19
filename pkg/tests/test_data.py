import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from saliency_distill.data import (FormatError, ManifestRecord, SyntheticSpec, decode_netpbm, encode_netpbm,
                                   gen_synthetic, load_dataset, read_image, read_manifest, render_sample,
                                   write_image, write_manifest)
from saliency_distill.gridcore import Grid, ShapeError


def fbeta_counts(pos, gt):
    tp = np.sum(pos & gt)
    if tp == 0:
        return 0.0
    p, r = tp / pos.sum(), tp / gt.sum()
    return 1.3 * p * r / (0.3 * p + r)


# -- netpbm --------------------------------------------------------------------------


def test_half_rounds_up():
    out = decode_netpbm(encode_netpbm(Grid.full(1, 2, 3, 0.5)))
    assert np.all(out.data == 128 / 255)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (3, 4, 5)))
def test_eight_bit_roundtrip(a):
    g = Grid(a / 255.0)
    buf = encode_netpbm(g)
    back = decode_netpbm(buf)
    assert np.array_equal(back.data, g.data)
    assert encode_netpbm(back) == buf


def test_header_with_comments():
    buf = b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff"
    np.testing.assert_array_equal(decode_netpbm(buf).data, [[[0.0, 1.0]]])


@pytest.mark.parametrize("buf,offset", [
    (b"P3\n1 1\n255\n\x00", "byte 0"),
    (b"P6\n1 1\n65535\n\x00\x00", "maxval"),
    (b"P5\n2 2\n255\n\x00", "truncated payload at byte 12"),
    (b"P5\n2", "truncated header"),
    (b"P5\nx 2\n255\n", "byte 2"),
])
def test_decode_errors(buf, offset):
    with pytest.raises(FormatError, match=offset):
        decode_netpbm(buf)


def test_encode_validation():
    with pytest.raises(ShapeError):
        encode_netpbm(Grid.zeros(2, 2, 2))
    with pytest.raises(ValueError):
        encode_netpbm(Grid.full(1, 2, 2, 1.5))


def test_read_error_names_path(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P7\n")
    with pytest.raises(FormatError, match="bad.pgm"):
        read_image(p)


# -- generator --------------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(side=40)
    with pytest.raises(ValueError):
        SyntheticSpec(noise=0.3, contrast=0.2)
    with pytest.raises(ValueError):
        SyntheticSpec(modalities=("sonar",))


def test_noiseless_single_blob_matches_colour_classes():
    spec = SyntheticSpec(count=1, blobs_min=1, blobs_max=1, noise=0.0)
    rgb, mask, _ = render_sample(spec, np.random.default_rng(4))
    colours = {tuple(c) for c in rgb.reshape(-1, 3)}
    assert len(colours) == 2
    fg = tuple(rgb[mask][0])
    assert np.sum(np.all(rgb == fg, axis=-1)) == mask.sum() > 0


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(count=3, modalities=("depth",), seed=9)
    a, b = gen_synthetic(spec, tmp_path / "a"), gen_synthetic(spec, tmp_path / "b")
    for f in sorted(p.name for p in a.parent.iterdir()):
        assert (a.parent / f).read_bytes() == (b.parent / f).read_bytes()


def test_modalities_carry_the_mask():
    spec = SyntheticSpec(count=1, modalities=("depth", "thermal", "flow"))
    for seed in range(5):
        _, mask, planes = render_sample(spec, np.random.default_rng(seed))
        for plane in planes.values():
            assert plane[mask].mean() > plane[~mask].mean()


def test_generator_is_solvable_by_one_channel_threshold():
    spec = SyntheticSpec(count=1, noise=0.05)
    rng = np.random.default_rng(0)
    for _ in range(30):
        rgb, mask, _ = render_sample(spec, rng)
        best = 0.0
        for c in range(3):
            for t in np.linspace(0, 1, 101):
                best = max(best, fbeta_counts(rgb[..., c] > t, mask), fbeta_counts(rgb[..., c] <= t, mask))
        assert best >= 0.9


# -- manifest and loading ------------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("a", "a.ppm", None, {"depth": "a_d.pgm"}), ManifestRecord("b", "b.ppm", "b_gt.pgm")]
    path = tmp_path / "m.tsv"
    write_manifest(recs, path)
    assert path.read_text().splitlines()[0] == "a\ta.ppm\t-\ta_d.pgm\t-\t-"
    back = read_manifest(path)
    assert [r.id for r in back] == ["a", "b"]
    assert back[0].gt is None and back[0].modalities["depth"] == str(tmp_path / "a_d.pgm")


def test_manifest_errors(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("a\ta.ppm\t-\t-\t-\t-\na\tb.ppm\t-\t-\t-\t-\n")
    with pytest.raises(FormatError, match="duplicate"):
        read_manifest(path)
    path.write_text("a\ta.ppm\n")
    with pytest.raises(FormatError, match=":1:"):
        read_manifest(path)


def test_load_dataset(tmp_path):
    m = gen_synthetic(SyntheticSpec(count=2, side=32, modalities=("depth",)), tmp_path)
    same = load_dataset(m, 32, ("depth",))
    raw = read_image(tmp_path / "s0.ppm")
    assert np.array_equal(same[0].stack.planes.data[:3], raw.data)
    small = load_dataset(m, 16, ("depth", "thermal"))
    s = small[0]
    assert s.stack.planes.shape == (5, 16, 16)
    assert s.stack.available == {"depth": True, "thermal": False}
    assert np.all(s.stack.planes.data[4] == 0.5)
    assert set(np.unique(s.gt.data)) <= {0.0, 1.0}


def test_load_missing_file_names_sample(tmp_path):
    write_manifest([ManifestRecord("zz", "nope.ppm")], tmp_path / "m.tsv")
    with pytest.raises(OSError, match="zz"):
        load_dataset(tmp_path / "m.tsv", 16)
