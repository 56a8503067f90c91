import json
import math

import numpy as np
import pytest

from cassi_unfold.autodiff import ParamStore, Tape, backward
from cassi_unfold.cassi import (HsiCube, Mask, SensingOperator, forward_phi,
                                shift_cube)
from cassi_unfold.training import (AdamState, TrainConfig, TrainError,
                                   adam_step, adjoint_baseline, augment,
                                   cosine_lr, dihedral_apply,
                                   dihedral_inverse, rmse_loss, synth_dataset,
                                   train)
from cassi_unfold.unfolding import Model


def adam_scalar_oracle(w0, grad_fn, lr, steps):
    # hand-rolled reference, scalars only
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t))
                                          + 1e-8)
    return w


# ------------------------------------------------------------- config

def test_config_defaults_are_valid():
    cfg = TrainConfig()
    assert cfg.lr == pytest.approx(4e-4)
    assert cfg.shift_step == 2


@pytest.mark.parametrize("kw", [
    {"lr": 0.0}, {"epochs": 0}, {"batch_size": -1}, {"patch_size": 0},
    {"stages": 0}, {"window": 0},
])
def test_config_rejects_nonpositive(kw):
    with pytest.raises(TrainError, match="positive"):
        TrainConfig(**kw)


def test_config_rejects_bad_precision():
    with pytest.raises(TrainError, match="precision"):
        TrainConfig(precision="half")


def test_config_patch_must_tile_window_grid():
    with pytest.raises(TrainError, match="multiple"):
        TrainConfig(patch_size=50, window=4)
    TrainConfig(patch_size=48, window=4)  # 48 = 3 * 16, fine


# --------------------------------------------------------------- loss

def test_rmse_zero_for_identical():
    x = np.random.default_rng(0).normal(size=(3, 4, 2))
    assert float(rmse_loss(x, x).values) == 0.0


def test_rmse_constant_difference():
    a = np.zeros((5, 5, 2))
    b = np.full_like(a, -0.37)
    assert float(rmse_loss(a, b).values) == pytest.approx(0.37, abs=1e-15)


def test_rmse_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5, 3))
    b = rng.normal(size=(4, 5, 3))
    acc = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        acc += (u - v) ** 2
    want = math.sqrt(acc / a.size)
    assert float(rmse_loss(a, b).values) == pytest.approx(want, abs=1e-12)


def test_rmse_gradient_analytic():
    # d rmse / d pred = (pred - truth) / (n * rmse)
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3, 2))
    b = rng.normal(size=(3, 3, 2))
    with Tape() as tape:
        from cassi_unfold.autodiff import ops
        p = ops.tensor(a, requires_grad=True)
        loss = rmse_loss(p, b)
    (g,) = backward(tape, loss, wrt=[p])
    r = float(loss.values)
    assert np.allclose(g, (a - b) / (a.size * r), atol=1e-12)


def test_rmse_shape_mismatch():
    with pytest.raises(TrainError, match="shape mismatch"):
        rmse_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_rmse_accepts_cubes():
    x = HsiCube(np.full((2, 2, 2), 0.5))
    y = HsiCube(np.zeros((2, 2, 2)))
    assert float(rmse_loss(x, y).values) == pytest.approx(0.5)


# ------------------------------------------------------------ optimizer

def test_adam_first_step_is_signed_lr():
    store = ParamStore()
    store.create("w", np.array([0.0, 0.0]))
    state = AdamState(store)
    adam_step(store, {"w": np.array([1e3, -1e3])}, state, lr=0.01)
    assert np.allclose(store["w"].values, [-0.01, 0.01], atol=1e-7)


def test_adam_zero_grads_leave_params_unchanged():
    store = ParamStore()
    store.create("w", np.array([[1.0, -2.0], [0.5, 3.0]]))
    before = store["w"].values.copy()
    state = AdamState(store)
    for _ in range(5):
        adam_step(store, {"w": np.zeros((2, 2))}, state, lr=0.1)
    assert np.array_equal(store["w"].values, before)
    assert state.t == 5


def test_adam_nonzero_grad_changes_params():
    store = ParamStore()
    store.create("w", np.array([1.0]))
    state = AdamState(store)
    adam_step(store, {"w": np.array([1e-4])}, state, lr=0.1)
    assert store["w"].values[0] != 1.0


def test_adam_three_step_quadratic_matches_scalar_oracle():
    store = ParamStore()
    store.create("w", np.array([2.0]))
    state = AdamState(store)
    for _ in range(3):
        g = 2.0 * store["w"].values[0]  # objective w^2
        adam_step(store, {"w": np.array([g])}, state, lr=0.1)
    want = adam_scalar_oracle(2.0, lambda w: 2.0 * w, 0.1, 3)
    assert store["w"].values[0] == pytest.approx(want, abs=1e-12)


def test_adam_rejects_bad_inputs():
    store = ParamStore()
    store.create("w", np.array([1.0]))
    state = AdamState(store)
    with pytest.raises(TrainError, match="missing gradient"):
        adam_step(store, {}, state, lr=0.1)
    with pytest.raises(TrainError, match="shape"):
        adam_step(store, {"w": np.zeros(3)}, state, lr=0.1)
    with pytest.raises(TrainError, match="learning rate"):
        adam_step(store, {"w": np.zeros(1)}, state, lr=0.0)


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 10, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(10, 10, 1.0, 0.1) == pytest.approx(0.1)
    assert cosine_lr(5, 10, 1.0, 0.1) == pytest.approx(0.55)


def test_cosine_rejects_out_of_range():
    with pytest.raises(TrainError, match="outside"):
        cosine_lr(-1, 10, 1.0, 0.0)
    with pytest.raises(TrainError, match="outside"):
        cosine_lr(11, 10, 1.0, 0.0)
    with pytest.raises(TrainError, match="positive"):
        cosine_lr(0, 0, 1.0, 0.0)


# ----------------------------------------------------------- augmentation

def test_dihedral_identity():
    x = np.random.default_rng(0).normal(size=(5, 5, 3))
    assert np.array_equal(dihedral_apply(x, 0), x)


@pytest.mark.parametrize("k", range(8))
def test_dihedral_inverse_restores(k):
    x = np.random.default_rng(k).normal(size=(6, 6, 2))
    y = dihedral_apply(dihedral_apply(x, k), dihedral_inverse(k))
    assert np.array_equal(y, x)


@pytest.mark.parametrize("k", range(8))
def test_dihedral_same_element_every_band(k):
    x = np.random.default_rng(10 + k).normal(size=(4, 4, 3))
    out = dihedral_apply(x, k)
    for lam in range(3):
        assert np.array_equal(out[:, :, lam], dihedral_apply(x[:, :, lam], k))


def test_dihedral_quarter_turn_rejects_non_square():
    x = np.zeros((4, 6, 2))
    for k in (0, 2, 4, 6):  # shape-preserving elements are fine
        dihedral_apply(x, k)
    for k in (1, 3, 5, 7):
        with pytest.raises(TrainError, match="non-square"):
            dihedral_apply(x, k)


def test_dihedral_rejects_bad_index():
    with pytest.raises(TrainError, match="outside"):
        dihedral_apply(np.zeros((2, 2)), 8)
    with pytest.raises(TrainError, match="outside"):
        dihedral_inverse(-1)


def test_augment_deterministic_per_seed():
    cube = HsiCube(np.random.default_rng(0).uniform(size=(6, 6, 2)))
    a = augment(cube, 123)
    b = augment(cube, 123)
    assert np.array_equal(a.data, b.data)


def test_augment_accepts_generator():
    cube = HsiCube(np.random.default_rng(1).uniform(size=(6, 6, 2)))
    rng = np.random.default_rng(9)
    out = augment(cube, rng)
    candidates = [dihedral_apply(cube.data, k) for k in range(8)]
    assert any(np.array_equal(out.data, c) for c in candidates)


def test_augment_draws_uniform_over_group():
    # 8000 seeded draws classified against the 8 candidates; each count
    # must sit within 3 sigma of the uniform expectation.
    cube = HsiCube(np.random.default_rng(2).uniform(size=(5, 5, 2)))
    lookup = {dihedral_apply(cube.data, k).tobytes(): k for k in range(8)}
    assert len(lookup) == 8
    counts = np.zeros(8, dtype=int)
    for seed in range(8000):
        counts[lookup[augment(cube, seed).data.tobytes()]] += 1
    sigma = math.sqrt(8000 * (1 / 8) * (7 / 8))
    assert counts.sum() == 8000
    assert np.all(np.abs(counts - 1000) <= 3 * sigma)


def test_augment_non_square_errors_when_rotation_drawn():
    seed = next(s for s in range(100)
                if int(np.random.default_rng(s).integers(8)) % 4 in (1, 3))
    cube = HsiCube(np.zeros((4, 6, 2)))
    with pytest.raises(TrainError, match="non-square"):
        augment(cube, seed)


# ---------------------------------------------------------- synthetic data

def test_synth_range_shape_and_determinism():
    a = synth_dataset(3, 10, 12, 4, seed=5)
    b = synth_dataset(3, 10, 12, 4, seed=5)
    assert len(a) == 3
    for s, t in zip(a, b):
        assert s.data.shape == (10, 12, 4)
        assert s.data.min() >= 0.0 and s.data.max() <= 1.0
        assert np.array_equal(s.data, t.data)
    c = synth_dataset(3, 10, 12, 4, seed=6)
    assert not np.array_equal(a[0].data, c[0].data)


def test_synth_rejects_nonpositive_dims():
    with pytest.raises(TrainError, match="positive"):
        synth_dataset(0, 8, 8, 2)
    with pytest.raises(TrainError, match="positive"):
        synth_dataset(1, 8, -1, 2)


def test_synth_bands_smoother_than_pixels():
    # spectral smoothness: adjacent bands must correlate more strongly
    # than adjacent pixels, averaged over 100 scenes
    scenes = synth_dataset(100, 24, 24, 6, seed=7)
    band_corr, pixel_corr = [], []
    for s in scenes:
        x = s.data
        for lam in range(x.shape[2] - 1):
            band_corr.append(np.corrcoef(x[:, :, lam].ravel(),
                                         x[:, :, lam + 1].ravel())[0, 1])
        pixel_corr.append(np.corrcoef(x[:-1, :, :].ravel(),
                                      x[1:, :, :].ravel())[0, 1])
        pixel_corr.append(np.corrcoef(x[:, :-1, :].ravel(),
                                      x[:, 1:, :].ravel())[0, 1])
    assert np.mean(band_corr) > np.mean(pixel_corr)


def test_adjoint_baseline_band_ranges():
    rng = np.random.default_rng(3)
    op = SensingOperator(Mask(rng.uniform(0.2, 1, (8, 8))), 3, 1)
    cube = synth_dataset(1, 8, 8, 3, seed=4)[0]
    y = forward_phi(op, shift_cube(cube, 1))
    base = adjoint_baseline(y, op)
    assert base.data.shape == (8, 8, 3)
    for lam in range(3):
        band = base.data[:, :, lam]
        assert band.min() == 0.0 and band.max() == pytest.approx(1.0)


# ---------------------------------------------------------------- loop

def _tiny_cfg(**kw):
    base = dict(lr=1e-3, epochs=1, batch_size=2, patch_size=16, seed=0,
                shift_step=1, stages=1, channels=4, window=2)
    base.update(kw)
    return TrainConfig(**base)


def test_train_smoke_writes_checkpoint_and_log(tmp_path):
    scenes = synth_dataset(2, 16, 16, 3, seed=1)
    ck = tmp_path / "model.dta"
    lg = tmp_path / "log.jsonl"
    model, hist = train(_tiny_cfg(), scenes, scenes[:1],
                        checkpoint_path=str(ck), log_path=str(lg))
    assert len(hist) == 2  # epoch 0 + 1 training epoch
    lines = [json.loads(line) for line in lg.read_text().splitlines()]
    assert len(lines) == 2
    for rec in lines:
        assert set(rec) == {"epoch", "loss", "lr", "val_psnr", "val_ssim",
                            "seconds"}
        assert np.isfinite(rec["loss"])
    loaded = Model.load(str(ck))
    assert loaded.weights.names() == model.weights.names()
    assert loaded.bands == 3


def test_train_epoch0_deterministic_per_seed():
    scenes = synth_dataset(2, 16, 16, 3, seed=2)
    _, h1 = train(_tiny_cfg(), scenes)
    _, h2 = train(_tiny_cfg(), scenes)
    assert h1[0]["loss"] == h2[0]["loss"]


def test_train_loss_decreases_on_toy_problem():
    scenes = synth_dataset(3, 16, 16, 3, seed=3)
    _, hist = train(_tiny_cfg(epochs=4), scenes)
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_train_single_precision_casts_weights():
    scenes = synth_dataset(2, 16, 16, 3, seed=4)
    model, hist = train(_tiny_cfg(precision="single"), scenes)
    assert all(model.weights[n].values.dtype == np.float32
               for n in model.weights.names())
    assert np.isfinite(hist[-1]["loss"])


def test_train_with_shot_noise_runs():
    scenes = synth_dataset(2, 16, 16, 3, seed=5)
    _, hist = train(_tiny_cfg(), scenes, noise_bits=8)
    assert np.isfinite(hist[-1]["loss"])


def test_train_rejects_bad_inputs():
    scenes = synth_dataset(2, 16, 16, 3, seed=6)
    with pytest.raises(TrainError, match="at least one"):
        train(_tiny_cfg(), [])
    with pytest.raises(TrainError, match="smaller than patch"):
        train(_tiny_cfg(patch_size=24, window=2), scenes)
    with pytest.raises(TrainError, match="mask shape"):
        train(_tiny_cfg(), scenes, mask=np.ones((4, 4)))


def test_train_aborts_on_nonfinite_at_init():
    # absurd input magnitudes overflow the attention products; the loop
    # must abort with a diagnostic rather than emit junk records
    scenes = [HsiCube(np.full((16, 16, 3), 1e180))]
    with pytest.raises(TrainError, match="non-finite"):
        with np.errstate(over="ignore", invalid="ignore"):
            train(_tiny_cfg(), scenes)


def test_train_aborts_on_nonfinite_mid_training():
    # huge values sit in the bottom row only, outside the centered
    # epoch-0 crop; a random training crop eventually includes them
    data = np.full((17, 16, 3), 0.5)
    data[16, :, :] = 1e180
    scenes = [HsiCube(data)]
    with pytest.raises(TrainError, match="non-finite .* epoch"):
        with np.errstate(over="ignore", invalid="ignore"):
            train(_tiny_cfg(batch_size=1, epochs=8), scenes)


def test_train_validation_metrics_reported():
    scenes = synth_dataset(2, 16, 16, 3, seed=8)
    _, hist = train(_tiny_cfg(), scenes, scenes)
    assert hist[-1]["val_psnr"] > 0
    assert -1.0 <= hist[-1]["val_ssim"] <= 1.0
