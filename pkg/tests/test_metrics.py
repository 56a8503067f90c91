import numpy as np
import pytest

from cassi_unfold.metrics import MetricsError, psnr, ssim
from cassi_unfold.training import dihedral_apply


# Oracles: direct per-pixel formula evaluations, no shared helpers with
# the implementation.

def psnr_oracle(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vals = []
    for lam in range(a.shape[2]):
        acc = 0.0
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                acc += (a[i, j, lam] - b[i, j, lam]) ** 2
        mse = acc / (a.shape[0] * a.shape[1])
        vals.append(100.0 if mse == 0 else
                    min(10.0 * np.log10(peak * peak / mse), 100.0))
    return sum(vals) / len(vals)


def _oracle_kernel():
    g = np.exp(-0.5 * (np.arange(11) - 5.0) ** 2 / 1.5 ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim_oracle(a, b, peak=1.0):
    # edge-inclusive mirror extension, matching ndimage's boundary rule
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kern = _oracle_kernel()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    band_vals = []
    for lam in range(a.shape[2]):
        x = np.pad(a[:, :, lam], 5, mode="symmetric")
        y = np.pad(b[:, :, lam], 5, mode="symmetric")
        total = 0.0
        H, W = a.shape[:2]
        for i in range(H):
            for j in range(W):
                wx = x[i:i + 11, j:j + 11]
                wy = y[i:i + 11, j:j + 11]
                mx = (kern * wx).sum()
                my = (kern * wy).sum()
                vx = (kern * wx * wx).sum() - mx * mx
                vy = (kern * wy * wy).sum() - my * my
                cov = (kern * wx * wy).sum() - mx * my
                total += (((2 * mx * my + c1) * (2 * cov + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        band_vals.append(total / (H * W))
    return sum(band_vals) / len(band_vals)


def test_psnr_identical_hits_cap():
    x = np.random.default_rng(0).uniform(size=(6, 7, 3))
    assert psnr(x, x) == 100.0


def test_psnr_known_mse():
    a = np.zeros((10, 10, 2))
    b = np.full((10, 10, 2), 0.1)  # mse 0.01 per band
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(9, 8, 4))
    b = rng.uniform(size=(9, 8, 4))
    assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-9)


def test_psnr_peak_shifts_by_20log10():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(6, 6, 2))
    b = rng.uniform(size=(6, 6, 2))
    base = psnr(a, b, peak=1.0)
    assert psnr(a, b, peak=10.0) == pytest.approx(base + 20.0, abs=1e-9)


def test_psnr_cap_applies_per_band_before_mean():
    a = np.zeros((5, 5, 2))
    b = a.copy()
    b[:, :, 1] += 0.1  # band 0 identical, band 1 at 20 dB
    assert psnr(a, b) == pytest.approx((100.0 + 20.0) / 2, abs=1e-9)


def test_psnr_rank2_is_single_band():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(7, 7))
    b = rng.uniform(size=(7, 7))
    assert psnr(a, b) == pytest.approx(psnr_oracle(a[:, :, None],
                                                   b[:, :, None]), abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(MetricsError, match="shape mismatch"):
        psnr(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


def test_ssim_identical_is_one():
    x = np.random.default_rng(1).uniform(size=(12, 12, 2))
    assert ssim(x, x) == 1.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(10, 9, 2))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)


def test_ssim_in_range_and_band_mean():
    rng = np.random.default_rng(8)
    a = rng.uniform(size=(12, 12, 2))
    b = rng.uniform(size=(12, 12, 2))
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    per_band = [ssim(a[:, :, i], b[:, :, i]) for i in range(2)]
    assert v == pytest.approx(np.mean(per_band), abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(MetricsError, match="shape mismatch"):
        ssim(np.zeros((8, 8)), np.zeros((9, 8)))


def test_rank4_rejected():
    with pytest.raises(MetricsError, match="rank"):
        psnr(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)))


@pytest.mark.parametrize("k", range(8))
def test_metrics_invariant_under_joint_dihedral(k):
    rng = np.random.default_rng(20 + k)
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    ta = dihedral_apply(a, k)
    tb = dihedral_apply(b, k)
    assert psnr(ta, tb) == pytest.approx(psnr(a, b), abs=1e-12)
    assert ssim(ta, tb) == pytest.approx(ssim(a, b), abs=1e-12)
