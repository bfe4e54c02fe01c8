import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from gsdtta.pointcloud import (
    CORRUPTIONS,
    Corruption,
    CorruptionSpec,
    Family,
    PointCloud,
    PointCloudError,
    ShapeFamily,
    XYZParseError,
    background_outliers,
    corrupt,
    load_xyz,
    read_manifest,
    save_xyz,
    synth_chair,
    synth_dataset,
    synth_shape,
    write_dataset,
)


def test_load_xyz_echo(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0\n0 0 1\n")
    c = load_xyz(p)
    assert c.n == 4 and c.label is None
    assert c.points[1].tolist() == [1.0, 0.0, 0.0]


def test_load_xyz_empty(tmp_path):
    p = tmp_path / "e.xyz"
    p.write_text("")
    with pytest.raises(PointCloudError, match="fewer than 4 points"):
        load_xyz(p)


def test_load_xyz_bad_line_number(tmp_path):
    p = tmp_path / "b.xyz"
    p.write_text("".join(f"{i} 0 0\n" for i in range(6)) + "0 0 x\n")
    with pytest.raises(XYZParseError) as err:
        load_xyz(p)
    assert err.value.lineno == 7
    assert ":7:" in str(err.value)


def test_save_load_round_trip(tmp_path):
    tet = PointCloud([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    save_xyz(tet, tmp_path / "t.xyz")
    assert np.array_equal(load_xyz(tmp_path / "t.xyz").points, tet.points)

    c = PointCloud(np.vstack([[0.1, 0.2, 0.3], np.zeros((3, 3))]))
    save_xyz(c, tmp_path / "c.xyz")
    assert np.abs(load_xyz(tmp_path / "c.xyz").points[0] - [0.1, 0.2, 0.3]).max() <= 1e-12


def test_save_line_count(tmp_path):
    c = synth_shape(ShapeFamily(Family.SPHERE, 1024), 0)
    save_xyz(c, tmp_path / "s.xyz")
    assert len((tmp_path / "s.xyz").read_text().splitlines()) == 1024


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=12, max_size=60).filter(lambda v: len(v) % 3 == 0))
def test_save_load_property(tmp_path_factory, values):
    c = PointCloud(np.reshape(values, (-1, 3)))
    p = tmp_path_factory.mktemp("rt") / "p.xyz"
    save_xyz(c, p)
    assert np.array_equal(load_xyz(p).points, c.points)


def test_invalid_clouds():
    with pytest.raises(PointCloudError):
        PointCloud(np.zeros((3, 3)))
    with pytest.raises(PointCloudError):
        PointCloud([[0, 0, np.nan]] * 4)
    c = PointCloud(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_sphere_radius():
    c = synth_shape(ShapeFamily(Family.SPHERE, 1024), 7)
    r = np.linalg.norm(c.points, axis=1)
    assert r.min() >= 0.999 and r.max() <= 1.001
    assert c.label == int(Family.SPHERE)


def test_plane_is_flat():
    c = synth_shape(ShapeFamily(Family.PLANE, 256), 3)
    assert np.abs(c.points[:, 2]).max() <= 1e-9


@pytest.mark.parametrize("family", list(Family))
def test_synth_deterministic_and_normalized(family):
    spec = ShapeFamily(family, 128)
    a, b = synth_shape(spec, 11), synth_shape(spec, 11)
    assert np.array_equal(a.points, b.points)
    assert np.isclose(np.linalg.norm(a.points, axis=1).max(), 1.0)
    assert a.label == int(family)
    assert not np.array_equal(a.points, synth_shape(spec, 12).points)


def test_shape_family_rejects_small():
    with pytest.raises(ValueError):
        ShapeFamily(Family.CUBE, 63)
    with pytest.raises(ValueError):
        Family.parse("teapot")


def test_background_count_and_distance():
    c = synth_shape(ShapeFamily(Family.SPHERE, 1024), 0)
    out = corrupt(c, CorruptionSpec("background", 0.05, seed=3))
    assert out.n == 1075
    added = out.points[1024:]
    radius = np.linalg.norm(c.points - c.points.mean(0), axis=1).max()
    d = np.linalg.norm(added - c.points.mean(0), axis=1)
    assert d.min() >= 1.5 * radius
    assert np.abs(added - c.points.mean(0)).max() <= 2.0 * radius
    assert np.array_equal(out.points[:1024], c.points)
    assert d.min() > np.percentile(np.linalg.norm(c.points, axis=1), 99)


def test_background_outliers_direct():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3))
    extra = background_outliers(pts, 10, rng)
    assert extra.shape == (10, 3)


@pytest.mark.parametrize("severity", [0.1, 1.0, 3.0])
def test_rotation_isometry(severity):
    c = synth_shape(ShapeFamily(Family.CUBE, 256), 1)
    r = corrupt(c, CorruptionSpec("rotation", severity, seed=5))
    assert np.abs(pdist(r.points) - pdist(c.points)).max() <= 1e-10


def test_gaussian_small_severity_limit():
    c = synth_shape(ShapeFamily(Family.TORUS, 256), 1)
    for s in (1e-6, 1e-9, 1e-12):
        g = corrupt(c, CorruptionSpec("gaussian", s, seed=2))
        assert np.abs(g.points - c.points).max() <= 10 * s


def test_severity_must_be_positive():
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian", 0.0)
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 0.1)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corrupt_contract(kind):
    c = synth_shape(ShapeFamily(Family.CONE, 256), 4)
    a = corrupt(c, CorruptionSpec(kind, 0.3, seed=9))
    b = corrupt(c, CorruptionSpec(kind, 0.3, seed=9))
    assert np.array_equal(a.points, b.points)
    assert a.label == c.label
    grows = {"background", "upsampling"}
    shrinks = {"cutout", "density_dec"}
    if kind in grows:
        assert a.n > c.n
    elif kind in shrinks:
        assert a.n < c.n
    else:
        assert a.n == c.n


def test_density_dec_removes_target():
    c = synth_shape(ShapeFamily(Family.SPHERE, 1000), 0)
    d = corrupt(c, CorruptionSpec(Corruption.DENSITY_DEC, 0.5, seed=1))
    assert d.n == 500


def test_chair_shape():
    c = synth_chair(1000, 0)
    assert c.n == 1000
    assert np.allclose(c.points.mean(0), 0.0, atol=1e-12)


def test_dataset_and_manifest(tmp_path):
    items = synth_dataset([Family.SPHERE, Family.CUBE], 3, 2, 64, seed=1)
    assert [s for s, _ in items].count("train") == 6
    m = write_dataset(tmp_path, items, {"seed": 1})
    m.save(tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert len(back.split("train")) == 6 and len(back.split("test")) == 4
    assert sorted({e.label for e in back.entries}) == [0, 1]
    loaded = back.load(back.split("test")[0])
    assert np.array_equal(loaded.points, items[6][1].points)
    again = synth_dataset([Family.SPHERE, Family.CUBE], 3, 2, 64, seed=1)
    assert all(np.array_equal(a.points, b.points) for (_, a), (_, b) in zip(items, again))
