import numpy as np
import pytest

from splitunet import tenfile
from splitunet.data import (
    BRAIN,
    gen_phantoms,
    load_phantoms,
    phantom_geometry,
    read_manifest,
    read_pgm,
    render_modality,
    save_pgm,
    save_phantoms,
    split_dataset,
    to_pgm_bytes,
)


@pytest.fixture(scope="module")
def phantoms():
    return gen_phantoms(12, 4, 48, seed=3)


def test_deterministic(phantoms):
    again = gen_phantoms(12, 4, 48, seed=3)
    assert again.images.tobytes() == phantoms.images.tobytes()
    assert again.labels.tobytes() == phantoms.labels.tobytes()
    other = gen_phantoms(12, 4, 48, seed=4)
    assert other.images.tobytes() != phantoms.images.tobytes()


def test_sample_depends_only_on_index(phantoms):
    small = gen_phantoms(3, 4, 48, seed=3)
    assert small.images.tobytes() == phantoms.images[:3].tobytes()


def test_layout_and_ranges(phantoms):
    assert phantoms.images.shape == (12, 4, 48, 48)
    assert phantoms.images.dtype == np.float32
    assert phantoms.images.min() >= 0 and phantoms.images.max() <= 1
    assert set(np.unique(phantoms.labels)) <= {0, 1, 2, 3}


def test_nested_regions(phantoms):
    for i in range(phantoms.n):
        lab = phantoms.labels[i]
        for c in (1, 2, 3):
            assert (lab == c).any(), f"sample {i} lacks class {c}"
        # class 3 pixels lie inside the class>=2 support, which lies inside the tumor
        core = lab >= 2
        ys, xs = np.nonzero(lab == 3)
        cy, cx = np.nonzero(core)
        assert ys.min() >= cy.min() and ys.max() <= cy.max()
        assert xs.min() >= cx.min() and xs.max() <= cx.max()


def test_modalities_share_geometry():
    tissue, texture = phantom_geometry(5, 48, seed=1)
    fg = tissue > BRAIN
    for k in range(4):
        clean = render_modality(tissue, texture, k, seed=1, index=5, noise=False)
        no_tumor = render_modality(np.where(fg, BRAIN, tissue).astype(np.uint8), texture, k, seed=1, index=5, noise=False)
        changed = clean != no_tumor
        # every modality changes exactly on the shared tumor support
        assert not (changed & ~fg).any()
        assert changed[fg].mean() > 0.9


def test_invalid_size():
    with pytest.raises(ValueError, match="multiple of 16"):
        gen_phantoms(2, 4, 40, seed=0)


@pytest.mark.parametrize("n, counts", [(484, (338, 49, 97)), (10, (7, 1, 2)), (200, (140, 20, 40))])
def test_split_counts(n, counts):
    sp = split_dataset(n, seed=0)
    assert sp.counts == counts
    everything = sorted(sp.train + sp.val + sp.test)
    assert everything == list(range(n))


def test_split_deterministic():
    assert split_dataset(100, 1) == split_dataset(100, 1)
    assert split_dataset(100, 1) != split_dataset(100, 2)
    with pytest.raises(ValueError):
        split_dataset(9, 0)


def test_ten_roundtrip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    tenfile.save(tmp_path / "a.ten", arr)
    back = tenfile.load(tmp_path / "a.ten")
    assert back.tobytes() == arr.tobytes() and back.shape == arr.shape
    raw = (tmp_path / "a.ten").read_bytes()
    assert raw[:4] == b"STEN" and raw[4] == 1 and raw[5] == 4


def test_ten_rejects_corruption(tmp_path):
    blob = bytearray(tenfile.encode(np.ones((1, 1, 2, 2), np.float32)))
    bad_magic = bytes(b"XTEN" + blob[4:])
    with pytest.raises(tenfile.TenFormatError, match="magic"):
        tenfile.decode(bad_magic)
    bad_version = bytes(blob[:4] + b"\x02" + blob[5:])
    with pytest.raises(tenfile.TenFormatError, match="version"):
        tenfile.decode(bad_version)
    with pytest.raises(tenfile.TenFormatError, match="need 4"):
        tenfile.decode(bytes(blob[:-4]))


def test_pgm_export(tmp_path):
    assert to_pgm_bytes(np.full((4, 6), 0.3)).endswith(bytes(24))
    img = np.linspace(-1, 3, 20).reshape(4, 5)
    save_pgm(tmp_path / "x.pgm", img)
    px = read_pgm(tmp_path / "x.pgm")
    assert px.shape == (4, 5) and px.min() == 0 and px.max() == 255
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n5 4\n255\n")
    # pixel data starting with whitespace-valued bytes survives the round trip
    raw = np.array([[32, 10, 9, 200]], np.uint8)
    (tmp_path / "w.pgm").write_bytes(b"P5\n4 1\n255\n" + raw.tobytes())
    np.testing.assert_array_equal(read_pgm(tmp_path / "w.pgm"), raw)


def test_phantom_directory_roundtrip(tmp_path, phantoms):
    save_phantoms(phantoms, tmp_path / "set")
    assert (tmp_path / "set" / "sample_0003" / "mod_2.ten").exists()
    meta = read_manifest(tmp_path / "set" / "manifest.txt")
    assert meta == {"n": "12", "sites": "4", "size": "48", "seed": "3", "split": "7/2/3"}
    back = load_phantoms(tmp_path / "set")
    assert back.images.tobytes() == phantoms.images.tobytes()
    assert back.labels.tobytes() == phantoms.labels.tobytes()
