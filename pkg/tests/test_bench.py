import numpy as np
import pytest

from flowsplat import bench, imaging
from flowsplat.bench import main as cli_main
from flowsplat.bench import psnr, rp_frechet, sliced_wasserstein, ssim


def images(rng, n, size=16):
    return [rng.uniform(0, 1, (size, size, 3)).astype(np.float32) for _ in range(n)]


# -- psnr -----------------------------------------------------------------------

def test_psnr_identical_images_capped():
    img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert psnr(img, img) == 99.0


def test_psnr_known_mse():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_full_range_error():
    a = np.zeros((4, 4, 3))
    b = np.ones((4, 4, 3))
    assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


# -- ssim -----------------------------------------------------------------------

def test_ssim_identical_images():
    img = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_image_is_dissimilar():
    img = np.random.default_rng(2).uniform(0, 1, (16, 16, 3))
    assert ssim(img, 1.0 - img) < 1.0 - 1e-3


def test_ssim_symmetry():
    rng = np.random.default_rng(3)
    a, b = images(rng, 2)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- rp-frechet --------------------------------------------------------------------

def test_rpfd_identical_sets_zero():
    rng = np.random.default_rng(4)
    batch = images(rng, 8)
    assert rp_frechet(batch, [img.copy() for img in batch]) == pytest.approx(0.0, abs=1e-6)


def test_rpfd_disjoint_constant_sets_positive():
    zeros = [np.zeros((16, 16, 3), np.float32) for _ in range(6)]
    ones = [np.ones((16, 16, 3), np.float32) for _ in range(6)]
    assert rp_frechet(zeros, ones) > 1e-3


def test_rpfd_shuffle_invariance():
    rng = np.random.default_rng(5)
    a = images(rng, 8)
    b = images(rng, 8)
    base = rp_frechet(a, b, seed=3)
    perm = np.random.default_rng(6).permutation(8)
    shuffled = rp_frechet([a[i] for i in perm], [b[i] for i in perm], seed=3)
    assert shuffled == pytest.approx(base, rel=1e-9)


def test_rpfd_symmetry_and_nonnegativity():
    rng = np.random.default_rng(7)
    a = images(rng, 8)
    b = [np.clip(img + 0.05, 0, 1) for img in images(rng, 8)]
    d_ab = rp_frechet(a, b, seed=1)
    d_ba = rp_frechet(b, a, seed=1)
    assert d_ab == pytest.approx(d_ba, rel=1e-6, abs=1e-9)
    assert d_ab >= 0.0


# -- sliced wasserstein ----------------------------------------------------------------

def test_sliced_wasserstein_zero_for_same_samples():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((512, 2))
    assert sliced_wasserstein(pts, pts.copy(), seed=0) == pytest.approx(0.0, abs=1e-9)


def test_sliced_wasserstein_detects_shift():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((1024, 2))
    b = rng.standard_normal((1024, 2)) + np.array([2.0, 0.0])
    near = sliced_wasserstein(a, rng.standard_normal((1024, 2)), seed=1)
    far = sliced_wasserstein(a, b, seed=1)
    assert far > near


# -- grids and reports ------------------------------------------------------------------

def test_image_grid_writes_png(tmp_path):
    rng = np.random.default_rng(10)
    rows = [[rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (16, 16, 3))],
            [rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))]]
    path = tmp_path / "grid.png"
    bench.image_grid(rows, path)
    loaded = imaging.load_png(path)
    assert loaded.shape == (2 * 16 + 2, 2 * 16 + 2, 3)


# -- oracle suites -------------------------------------------------------------------------

def test_oracle_render_suite_passes():
    messages = []
    assert bench.oracle_render(n_fields=4, echo=messages.append)
    assert "PASS" in messages[-1]


def test_oracle_ode_suite_passes():
    messages = []
    assert bench.oracle_ode(echo=messages.append)
    assert all("PASS" in m for m in messages)


# -- CLI ---------------------------------------------------------------------------------

def test_cli_oracle_ode_exit_code(capsys):
    assert cli_main(["oracle", "--suite", "ode"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_cli_dump_contribs(tmp_path):
    out = tmp_path / "contribs.txt"
    assert cli_main(["dump-contribs", "--size", "4", "--topk", "2", "--out", str(out)]) == 0
    text = out.read_text()
    assert "q=(0,0)" in text


def test_cli_error_is_single_line_nonzero(capsys, tmp_path):
    code = cli_main(["infer", "--run-dir", str(tmp_path / "missing"), "--input", "x.png",
                     "--output", "y.png", "--scale", "2"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert err.strip().count("\n") == 0
