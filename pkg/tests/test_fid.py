"""Three-plane Frechet distance: slicing, features, eigensolver, closed forms."""

import numpy as np
import pytest

from flowct.checkpoint import save_checkpoint
from flowct.fid import (
    FeatureExtractor,
    FidError,
    GaussianStats,
    PlaneSelection,
    central_indices,
    compute_stats,
    extract_slices,
    fid_report,
    frechet_distance,
    matrix_sqrt_psd,
    _jacobi_eigh,
)
from flowct.nifti import Volume
from flowct.phantoms import default_phantom_spec, generate_phantom


def test_plane_selection_validation():
    PlaneSelection(plane="xy", fraction=1.0)
    with pytest.raises(FidError):
        PlaneSelection(plane="zz")
    for bad in (0.0, 1.5, -0.2):
        with pytest.raises(FidError):
            PlaneSelection(plane="xy", fraction=bad)


def test_central_indices_cases():
    assert list(central_indices(10, 0.5)) == [2, 3, 4, 5, 6]
    assert list(central_indices(7, 0.5)) == [1, 2, 3, 4]
    assert list(central_indices(8, 1.0)) == list(range(8))
    assert len(central_indices(16, 0.25)) == 4


def test_extract_slices_axes_and_counts():
    grid = (np.arange(4)[:, None, None] + 10 * np.arange(6)[None, :, None]
            + 100 * np.arange(8)[None, None, :]).astype(np.float32)
    vol = Volume(grid=grid, spacing=(1, 1, 1))
    xy = extract_slices([vol], PlaneSelection("xy"))
    assert len(xy) == 2  # ceil(4 * 0.5) central axial slices
    assert xy[0].shape == (6, 8)
    assert np.array_equal(xy[0], grid[1])
    xz = extract_slices([vol], PlaneSelection("xz"))
    assert len(xz) == 3
    assert xz[0].shape == (4, 8)
    assert np.array_equal(xz[0], grid[:, 1, :])
    yz = extract_slices([vol], PlaneSelection("yz"))
    assert len(yz) == 4
    assert yz[0].shape == (4, 6)
    assert np.array_equal(yz[0], grid[:, :, 2])
    with pytest.raises(FidError):
        extract_slices([], PlaneSelection("xy"))


def test_feature_extractor_shapes_and_seeding():
    with pytest.raises(FidError):
        FeatureExtractor("inception")
    with pytest.raises(FidError):
        FeatureExtractor("random_conv", dim=5)
    ext = FeatureExtractor("random_conv", seed=3, dim=8)
    assert ext.dim == 8
    rng = np.random.default_rng(0)
    sl = rng.uniform(-500, 500, size=(16, 16)).astype(np.float32)
    f = ext(sl)
    assert f.shape == (8,)
    assert f.dtype == np.float64
    same = FeatureExtractor("random_conv", seed=3, dim=8)
    assert np.array_equal(same(sl), f)
    other = FeatureExtractor("random_conv", seed=4, dim=8)
    assert not np.array_equal(other(sl), f)


def test_feature_extractor_probe_round_trip(tmp_path):
    ext = FeatureExtractor("random_conv", seed=7, dim=8)
    path = tmp_path / "probe.fckp"
    ext.save(path)
    back = FeatureExtractor("trained_probe", checkpoint=path)
    assert np.array_equal(back.w1, ext.w1)
    assert np.array_equal(back.w2, ext.w2)
    sl = np.zeros((12, 12), dtype=np.float32)
    assert np.array_equal(back(sl), ext(sl))
    with pytest.raises(FidError):
        FeatureExtractor("trained_probe")
    stray = tmp_path / "stray.fckp"
    save_checkpoint(stray, {"w1": ext.w1, "w2": ext.w2}, {"kind": "velocity_net"})
    with pytest.raises(FidError):
        FeatureExtractor("trained_probe", checkpoint=stray)


def test_compute_stats_matches_numpy():
    ext = FeatureExtractor("random_conv", seed=0, dim=4)
    rng = np.random.default_rng(5)
    slices = [rng.uniform(-800, 800, size=(12, 12)).astype(np.float32) for _ in range(10)]
    stats = compute_stats(slices, ext)
    feats = np.stack([ext(s) for s in slices])
    assert stats.n == 10
    assert np.allclose(stats.mu, feats.mean(axis=0))
    assert np.allclose(stats.sigma, np.cov(feats, rowvar=False, ddof=1), atol=1e-12)
    with pytest.raises(FidError):
        compute_stats(slices[:1], ext)
    with pytest.warns(UserWarning, match="rank-deficient"):
        compute_stats(slices[:3], ext)  # 3 samples in 4 dims


def test_jacobi_matches_numpy_eigh():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        b = rng.standard_normal((8, 8))
        a = 0.5 * (b + b.T)
        w, v = _jacobi_eigh(a)
        order = np.argsort(w)
        assert np.allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-9)
        assert np.allclose(v @ v.T, np.eye(8), atol=1e-10)
        assert np.allclose((v * w) @ v.T, a, atol=1e-9)
        assert order.shape == (8,)


def test_matrix_sqrt_round_trip():
    rng = np.random.default_rng(11)
    b = rng.standard_normal((64, 64))
    a = b @ b.T
    s = matrix_sqrt_psd(a)
    assert np.allclose(s, s.T)
    rel = np.linalg.norm(s @ s - a) / np.linalg.norm(a)
    assert rel < 1e-6
    d = np.diag([4.0, 9.0, 16.0])
    assert np.allclose(matrix_sqrt_psd(d), np.diag([2.0, 3.0, 4.0]), atol=1e-12)


def test_matrix_sqrt_rejects_bad_inputs():
    with pytest.raises(FidError):
        matrix_sqrt_psd(np.zeros((2, 3)))
    skew = np.array([[1.0, 2.0], [-2.0, 1.0]])
    with pytest.raises(FidError, match="asymmetry"):
        matrix_sqrt_psd(skew)
    with pytest.raises(FidError, match="PSD"):
        matrix_sqrt_psd(-np.eye(3))


def test_frechet_closed_forms():
    s1 = GaussianStats(mu=np.zeros(1), sigma=np.eye(1), n=10)
    s2 = GaussianStats(mu=np.array([3.0]), sigma=np.array([[4.0]]), n=10)
    # m^2 + (s1 - s2)^2 in one dimension
    assert frechet_distance(s1, s2) == pytest.approx(9.0 + 1.0, abs=1e-9)
    assert frechet_distance(s1, s1) == 0.0
    d1 = GaussianStats(mu=np.zeros(2), sigma=np.diag([1.0, 4.0]), n=10)
    d2 = GaussianStats(mu=np.array([1.0, -1.0]), sigma=np.diag([9.0, 16.0]), n=10)
    # mu gap 2 plus sum of (sqrt(a) - sqrt(b))^2 over the diagonal
    assert frechet_distance(d1, d2) == pytest.approx(2.0 + 4.0 + 4.0, abs=1e-9)
    with pytest.raises(FidError):
        frechet_distance(s1, d1)


def test_fid_report_planes_and_self_distance():
    vols = [generate_phantom(default_phantom_spec((16, 16, 16), seed=s))[0] for s in range(2)]
    # dim 8 keeps several first-layer channels alive; a dim-4 extractor has a
    # single ReLU channel that can go entirely dead for some seeds
    ext = FeatureExtractor("random_conv", seed=0, dim=8)
    rep = fid_report(vols, vols, ext)
    assert set(rep) == {"fid_xy", "fid_yz", "fid_xz", "fid_avg"}
    for plane in ("xy", "yz", "xz"):
        assert rep[f"fid_{plane}"] < 1e-6
    assert rep["fid_avg"] == pytest.approx(
        (rep["fid_xy"] + rep["fid_yz"] + rep["fid_xz"]) / 3.0)
    rng = np.random.default_rng(0)
    noisy = [Volume(grid=v.grid + rng.normal(0, 200, v.shape).astype(np.float32),
                    spacing=v.spacing) for v in vols]
    worse = fid_report(vols, noisy, ext)
    assert worse["fid_avg"] > rep["fid_avg"]
    with pytest.raises(FidError):
        fid_report([], vols, ext)
