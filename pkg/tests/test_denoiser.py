import numpy as np
import pytest

from moodkit import denoiser as dn
from moodkit import diffusion as df
from moodkit.errors import BadMagic, ConfigMismatch, FormatError


@pytest.fixture(scope="module")
def table():
    return df.build_schedule()


def _trainer(seed=0, lr=1e-3, arch=dn.ArchConfig()):
    sc = df.SchedulerConfig()
    return dn.Trainer(dn.DenoiserModel.initialized(arch, seed=seed), df.build_schedule(sc),
                      cfg=dn.TrainConfig(learning_rate=lr, seed=seed), sched_cfg=sc)


def test_param_count_default():
    # 4 conv layers + one affine from the 32-d embedding to 16 + 32 biases
    conv = 9 * 1 * 16 + 16 + 9 * 16 * 32 + 32 + 9 * 32 * 16 + 16 + 9 * 16 * 1 + 1
    assert dn.DenoiserModel().n_params == conv + 32 * 48 + 48


def test_zero_params_zero_output(rng):
    m = dn.DenoiserModel()
    assert not m.predict_noise(rng.random((2, 12, 12)), 5).any()


def test_shape_and_determinism(rng):
    m = dn.DenoiserModel.initialized(seed=1)
    x = rng.random((3, 10, 14)).astype(np.float32)
    a, b = m.predict_noise(x, 40), m.predict_noise(x, 40)
    assert a.shape == x.shape and np.array_equal(a, b)


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        dn.DenoiserModel.initialized().predict_noise(rng.random((10, 10)), 3)


def test_time_conditioning(rng):
    m = dn.DenoiserModel.initialized(seed=2)
    m.view("time.w")[...] = rng.uniform(-0.5, 0.5, m.view("time.w").shape)
    x = rng.random((1, 8, 8)).astype(np.float32)
    assert not np.allclose(m.predict_noise(x, 10), m.predict_noise(x, 900))


def test_time_embedding_values():
    e = dn.time_embedding([0, 5], 8)
    assert e.shape == (2, 8)
    assert np.allclose(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert e[1, 0] == pytest.approx(np.sin(5.0))


def test_init_bounds():
    m = dn.DenoiserModel.initialized(seed=3)
    w = m.view("conv1.w")
    assert np.abs(w).max() <= 1 / np.sqrt(9 * 16) and not m.view("conv1.b").any()


def test_gradients_match_finite_differences(rng):
    m = dn.DenoiserModel.initialized(seed=4)
    x = rng.random((2, 8, 8))
    assert dn.check_gradients(m, x, np.array([30, 700]), n_params=120, seed=1) < 1e-4


def test_linear_model_gradients_tight(rng):
    arch = dn.ArchConfig(activation="identity")
    m = dn.DenoiserModel.initialized(arch, seed=4)
    assert dn.check_gradients(m, rng.random((2, 6, 6)), 100, n_params=120) < 1e-7


def test_zero_input_kills_first_layer_weight_grads(rng):
    m = dn.DenoiserModel.initialized(seed=5).astype(np.float64)
    m.view("time.w")[...] = rng.uniform(-1, 1, m.view("time.w").shape)
    x = np.zeros((2, 6, 6))
    _, g = dn.mse_loss_and_grad(m, x, 17, rng.standard_normal(x.shape))
    assert not m.view("conv0.w", g).any()
    assert m.view("conv0.b", g).any() and m.view("time.w", g).any()


def test_zero_everything_zero_grad():
    m = dn.DenoiserModel()
    x = np.zeros((2, 6, 6), np.float32)
    loss, g = dn.mse_loss_and_grad(m, x, 3, x)
    assert loss == 0.0 and not g.any()


def test_lr_zero_leaves_params_and_perm_invariant(rng):
    tr = _trainer(lr=0.0)
    p0 = tr.model.params.copy()
    batch = rng.random((4, 8, 8)).astype(np.float32)
    t = np.array([5, 50, 500, 900])
    noise = rng.standard_normal((4, 8, 8))
    l1 = tr.step_with(batch, t, noise)
    assert np.array_equal(tr.model.params, p0)
    perm = np.array([2, 0, 3, 1])
    l2 = tr.step_with(batch[perm], t[perm], noise[perm])
    assert l1 == pytest.approx(l2, rel=1e-6)


def test_training_reduces_loss_16px():
    # 500 steps on 16x16 phantom crops, averaged over three seeds
    from moodkit.synthdata import generate_phantom
    vol = generate_phantom(0, 16).data
    slices = vol[(vol > 0).any(axis=(1, 2))]
    ratios = []
    for seed in range(3):
        tr = _trainer(seed=seed)
        rng = np.random.default_rng(seed)
        losses = [tr.step(slices[rng.integers(0, len(slices), 4)]) for _ in range(500)]
        ratios.append(np.mean(losses[-50:]) / np.mean(losses[:1]))
    assert np.mean(ratios) < 0.7


def test_empty_batch():
    with pytest.raises(ValueError):
        _trainer().step(np.zeros((0, 8, 8)))


def test_lipschitz_empirical(rng):
    m = dn.DenoiserModel.initialized(seed=6).astype(np.float64)
    x = rng.random((1, 12, 12))
    ratios = []
    for _ in range(5):
        dx = rng.standard_normal(x.shape) * 1e-3
        ratios.append(np.linalg.norm(m.predict_noise(x + dx, 50) - m.predict_noise(x, 50)) / np.linalg.norm(dx))
    assert np.isfinite(max(ratios)) and max(ratios) < 100


def test_checkpoint_round_trip_and_resume(tmp_path, rng):
    slices = rng.random((12, 8, 8)).astype(np.float32)
    a = _trainer(seed=7)
    a.run_epoch(slices)
    dn.save_checkpoint(tmp_path / "c.bin", a)
    b = dn.load_checkpoint(tmp_path / "c.bin")
    assert b.model.params.tobytes() == a.model.params.tobytes()
    assert b.opt.m.tobytes() == a.opt.m.tobytes() and b.opt.step == a.opt.step
    assert b.history == a.history and b.epoch == 1
    batch = slices[:4]
    assert a.step(batch) == b.step(batch)
    assert np.array_equal(a.model.params, b.model.params)


def test_checkpoint_errors(tmp_path):
    tr = _trainer()
    dn.save_checkpoint(tmp_path / "c.bin", tr)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(b"BADMAGIC" + raw[8:])
    with pytest.raises(BadMagic):
        dn.load_checkpoint(tmp_path / "m.bin")
    assert issubclass(BadMagic, FormatError)
    with pytest.raises(ConfigMismatch):
        dn.load_checkpoint(tmp_path / "c.bin", expect_scheduler=df.SchedulerConfig(T=500))


def test_published_preset():
    p = dn.TrainConfig.paper()
    assert (p.learning_rate, p.batch_size, p.epochs) == (2.5e-5, 4, 60)
    with pytest.raises(ValueError):
        dn.TrainConfig(batch_size=0)
