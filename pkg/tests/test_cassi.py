"""Sensing operator vs explicit sparse/dense oracles, files, noise."""

import numpy as np
import pytest

from cassi_unfold.cassi import (CassiError, HsiCube, Mask, SensingOperator,
                                add_shot_noise, adjoint_phi,
                                build_explicit_phi, compute_psi, forward_phi,
                                load_hsc, save_hsc, shift_cube, unshift_cube)


def random_instance(seed, max_hw=7, max_bands=5, max_step=3):
    rng = np.random.default_rng(seed)
    H = int(rng.integers(1, max_hw))
    W = int(rng.integers(1, max_hw))
    L = int(rng.integers(1, max_bands))
    d = int(rng.integers(0, max_step))
    mask = Mask(rng.uniform(0, 1, size=(H, W)))
    op = SensingOperator(mask, bands=L, shift_step=d)
    cube = HsiCube(rng.uniform(0, 1, size=(H, W, L)))
    return rng, op, cube


# ------------------------------------------------------------- shifting

def test_shift_zero_step_is_identity():
    rng = np.random.default_rng(0)
    cube = HsiCube(rng.uniform(size=(4, 5, 3)))
    assert np.array_equal(shift_cube(cube, 0), cube.data)


def test_shift_single_band_is_identity():
    rng = np.random.default_rng(1)
    cube = HsiCube(rng.uniform(size=(4, 5, 1)))
    assert np.array_equal(shift_cube(cube, 3), cube.data)


def test_shift_matches_index_arithmetic_oracle():
    # loop oracle: out[h, d*lam + w, lam] = in[h, w, lam], zeros elsewhere
    rng = np.random.default_rng(2)
    cube = HsiCube(rng.uniform(size=(3, 4, 3)))
    d = 2
    want = np.zeros((3, 4 + d * 2, 3))
    for h in range(3):
        for w in range(4):
            for lam in range(3):
                want[h, d * lam + w, lam] = cube.data[h, w, lam]
    assert np.array_equal(shift_cube(cube, d), want)


def test_shift_worked_example_placement():
    cube = HsiCube(np.array([[[2.0, 6.0], [4.0, 8.0]]]))  # H=1 W=2 L=2
    got = shift_cube(cube, 1)
    assert got.shape == (1, 3, 2)
    assert np.array_equal(got[:, :, 0], [[2.0, 4.0, 0.0]])
    assert np.array_equal(got[:, :, 1], [[0.0, 6.0, 8.0]])


def test_unshift_inverts_shift():
    for seed in range(20):
        rng, op, cube = random_instance(seed)
        d = op.shift_step
        back = unshift_cube(shift_cube(cube, d), d, cube.width)
        assert np.array_equal(back, cube.data)


# ------------------------------------------------- operator vs explicit

def test_forward_all_ones_single_band_identity():
    rng = np.random.default_rng(3)
    op = SensingOperator(Mask(np.ones((4, 5))), bands=1, shift_step=0)
    x = rng.uniform(size=(4, 5, 1))
    assert np.array_equal(forward_phi(op, x), x[:, :, 0])


def test_forward_zero_cube():
    op = SensingOperator(Mask(np.ones((3, 3))), bands=2, shift_step=1)
    y = forward_phi(op, np.zeros((3, 4, 2)))
    assert np.array_equal(y, np.zeros((3, 4)))


def test_forward_worked_example():
    op = SensingOperator(Mask(np.array([[1.0, 0.5]])), bands=2, shift_step=1)
    cube = HsiCube(np.array([[[2.0, 6.0], [4.0, 8.0]]]))
    y = forward_phi(op, shift_cube(cube, 1))
    assert np.allclose(y, [[2.0, 8.0, 4.0]])
    # same numbers through the explicit matrix
    phi = build_explicit_phi(op).toarray()
    y2 = phi @ shift_cube(cube, 1).reshape(-1)
    assert np.allclose(y2, [2.0, 8.0, 4.0])


def test_worked_example_psi_and_gram():
    op = SensingOperator(Mask(np.array([[1.0, 0.5]])), bands=2, shift_step=1)
    phi = build_explicit_phi(op).toarray()
    gram = phi @ phi.T
    assert np.allclose(np.diag(gram), [1.0, 1.25, 0.25])
    assert np.allclose(op.psi, [[1.0, 1.25, 0.25]])


def test_forward_adjoint_match_explicit_matrix():
    for seed in range(30):
        rng, op, cube = random_instance(seed)
        phi = build_explicit_phi(op)
        x = shift_cube(cube, op.shift_step)
        y_fast = forward_phi(op, x)
        y_mat = (phi @ x.reshape(-1)).reshape(y_fast.shape)
        assert np.allclose(y_fast, y_mat, atol=1e-12, rtol=0)

        y = rng.normal(size=(op.height, op.shifted_width))
        a_fast = adjoint_phi(op, y)
        a_mat = (phi.T @ y.reshape(-1)).reshape(a_fast.shape)
        assert np.allclose(a_fast, a_mat, atol=1e-12, rtol=0)


def test_adjoint_identity_holds():
    # <Phi x, y> == <x, Phi^T y>
    for seed in range(100):
        rng, op, cube = random_instance(seed)
        x = rng.normal(size=(op.height, op.shifted_width, op.bands))
        y = rng.normal(size=(op.height, op.shifted_width))
        lhs = float((forward_phi(op, x) * y).sum())
        rhs = float((x * adjoint_phi(op, y)).sum())
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_adjoint_zero_measurement():
    op = SensingOperator(Mask(np.ones((2, 3))), bands=3, shift_step=1)
    out = adjoint_phi(op, np.zeros((2, 5)))
    assert np.array_equal(out, np.zeros((2, 5, 3)))


# ----------------------------------------------------- matrix structure

def test_explicit_phi_identity_case():
    op = SensingOperator(Mask(np.ones((3, 4))), bands=1, shift_step=0)
    phi = build_explicit_phi(op).toarray()
    assert np.array_equal(phi, np.eye(12))


def test_every_column_has_at_most_one_nonzero():
    for seed in range(25):
        _, op, _ = random_instance(seed)
        phi = build_explicit_phi(op)
        per_col = np.asarray((phi != 0).sum(axis=0)).ravel()
        assert per_col.max(initial=0) <= 1


def test_gram_matrix_is_exactly_diagonal():
    for seed in range(30):
        _, op, _ = random_instance(seed)
        phi = build_explicit_phi(op)
        gram = (phi @ phi.T).toarray()
        off = gram - np.diag(np.diag(gram))
        assert np.count_nonzero(off) == 0


def test_psi_equals_gram_diagonal():
    for seed in range(30):
        _, op, _ = random_instance(seed)
        phi = build_explicit_phi(op)
        gram_diag = (phi @ phi.T).diagonal()
        assert np.allclose(op.psi.reshape(-1), gram_diag, atol=1e-12)
        assert np.all(op.psi >= 0)


def test_psi_trivial_and_homogeneity():
    op1 = SensingOperator(Mask(np.ones((3, 4))), bands=1, shift_step=0)
    assert np.array_equal(op1.psi, np.ones((3, 4)))

    rng = np.random.default_rng(9)
    m = rng.uniform(size=(4, 4))
    a = SensingOperator(Mask(m), bands=3, shift_step=2)
    b = SensingOperator(Mask(3.0 * m), bands=3, shift_step=2)
    assert np.allclose(b.psi, 9.0 * a.psi)


def test_compute_psi_matches_cached():
    _, op, _ = random_instance(42)
    assert np.array_equal(compute_psi(op), op.psi)


def test_verification_cap(monkeypatch):
    _, op, _ = random_instance(0)
    monkeypatch.setenv("DAUHST_VERIFY_CAP", str(op.n_voxels - 1))
    with pytest.raises(CassiError, match="cap"):
        build_explicit_phi(op)
    monkeypatch.setenv("DAUHST_VERIFY_CAP", str(op.n_voxels))
    build_explicit_phi(op)
    monkeypatch.setenv("DAUHST_VERIFY_CAP", "zero")
    with pytest.raises(CassiError, match="integer"):
        build_explicit_phi(op)


def test_shape_validation():
    op = SensingOperator(Mask(np.ones((3, 3))), bands=2, shift_step=1)
    with pytest.raises(CassiError, match="shape"):
        forward_phi(op, np.zeros((3, 3, 2)))  # not shifted width
    with pytest.raises(CassiError, match="shape"):
        adjoint_phi(op, np.zeros((3, 3)))


# ----------------------------------------------------------- shot noise

def test_shot_noise_zero_stays_zero():
    out = add_shot_noise(np.zeros((3, 4)), bits=11, seed=5)
    assert np.array_equal(out, np.zeros((3, 4)))


def test_shot_noise_deterministic_per_seed():
    rng = np.random.default_rng(6)
    y = rng.uniform(size=(4, 5))
    a = add_shot_noise(y, bits=11, seed=123)
    b = add_shot_noise(y, bits=11, seed=123)
    c = add_shot_noise(y, bits=11, seed=124)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_shot_noise_unbiased_monte_carlo():
    # Poisson mean equals its parameter, so averaging over draws must
    # recover the clean measurement to within 3 standard errors.
    rng = np.random.default_rng(7)
    y = rng.uniform(0.2, 1.0, size=(2, 3))
    bits = 6
    n = 10_000
    acc = np.zeros_like(y)
    for seed in range(n):
        acc += add_shot_noise(y, bits=bits, seed=seed)
    mean = acc / n
    scale = (2 ** bits - 1) / y.max()
    sigma = np.sqrt(y * scale) / scale / np.sqrt(n)
    assert np.all(np.abs(mean - y) <= 3.0 * sigma + 1e-12)


def test_shot_noise_rejects_negative():
    with pytest.raises(CassiError, match="non-negative"):
        add_shot_noise(np.array([[-0.1]]), bits=8, seed=0)


# ------------------------------------------------------------ HSC1 file

def test_hsc_roundtrip_cube(tmp_path):
    rng = np.random.default_rng(8)
    cube = rng.uniform(size=(4, 6, 5)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "cube.hsc")
    save_hsc(path, cube)
    assert np.array_equal(load_hsc(path), cube)


def test_hsc_roundtrip_mask_is_rank2(tmp_path):
    rng = np.random.default_rng(9)
    mask = rng.uniform(size=(5, 7)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "mask.hsc")
    save_hsc(path, mask)
    out = load_hsc(path)
    assert out.shape == (5, 7)
    assert np.array_equal(out, mask)


def test_hsc_layout_on_disk(tmp_path):
    # header: magic + u32 H, W, C; data row-major (h, w, c)
    data = np.arange(12, dtype=np.float64).reshape(2, 3, 2)
    path = str(tmp_path / "x.hsc")
    save_hsc(path, data)
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob[:4] == b"HSC1"
    assert np.frombuffer(blob, "<u4", 3, 4).tolist() == [2, 3, 2]
    vals = np.frombuffer(blob, "<f4", offset=16)
    assert np.array_equal(vals, np.arange(12, dtype=np.float32))


def test_hsc_rejects_bad_magic_and_truncation(tmp_path):
    p = str(tmp_path / "bad.hsc")
    with open(p, "wb") as fh:
        fh.write(b"HSCX" + b"\x00" * 12)
    with pytest.raises(CassiError, match="magic"):
        load_hsc(p)
    data = np.ones((2, 2, 2))
    good = str(tmp_path / "good.hsc")
    save_hsc(good, data)
    with open(good, "rb") as fh:
        blob = fh.read()
    with open(good, "wb") as fh:
        fh.write(blob[:-4])
    with pytest.raises(CassiError, match="payload"):
        load_hsc(good)
