import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddslab.diffusion import (DivergenceError, NoiseSchedule, TrainConfig, add_noise, cfg_predict, cond_tensor,
                              diffusion_loss, noise_image, null_cond, sample, train_denoiser, validation_loss)
from ddslab.synthdata import Caption, Dataset, sample_dataset

SCHED = NoiseSchedule()
CAP = Caption("circle", "red", "white")


def rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def test_noise_formula_limits():
    z, eps = rand(2, 3, 8, 8), rand(2, 3, 8, 8, seed=1)
    assert torch.equal(noise_image(z, eps, torch.tensor(1.0)), z)
    assert torch.equal(noise_image(z, eps, torch.tensor(0.0)), eps)
    assert torch.allclose(noise_image(z, torch.zeros_like(z), torch.tensor(0.25)), 0.5 * z)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_add_noise_rejects_t(t):
    with pytest.raises(ValueError):
        add_noise(rand(1, 3, 4, 4), rand(1, 3, 4, 4), t, SCHED)


def test_add_noise_rejects_shape():
    with pytest.raises(ValueError):
        add_noise(rand(1, 3, 4, 4), rand(1, 3, 4, 5), 0.5, SCHED)


def test_schedule_monotone_and_limits():
    t = torch.linspace(1e-4, 1 - 1e-4, 2001)
    a = SCHED.alpha(t).double()
    assert torch.all(a[1:] < a[:-1])
    assert a[0] > 0.999 and a[-1] < 1e-5
    assert float(SCHED.alpha(torch.tensor(1e-7))) == pytest.approx(1.0, abs=1e-5)
    assert torch.all(SCHED.w(t) >= 0)
    with pytest.raises(ValueError):
        NoiseSchedule(weight=-1.0)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.01, 0.98), seed=st.integers(0, 1000))
def test_forward_noising_invertible(t, seed):
    z, eps = rand(1, 3, 8, 8, seed=seed).clamp(-1, 1), rand(1, 3, 8, 8, seed=seed + 1)
    n = add_noise(z, eps, t, SCHED)
    a = SCHED.alpha(torch.tensor(t)).double()
    back = (n.z_t.double() - (1 - a).sqrt() * eps.double()) / a.sqrt()
    assert torch.max(torch.abs(back - z.double())) < 1e-5


def test_output_shape_and_deterministic(tiny_model):
    x = rand(3, 3, 8, 8)
    y = cond_tensor(CAP, 3)
    a, b = tiny_model(x, torch.full((3,), 0.3), y), tiny_model(x, torch.full((3,), 0.3), y)
    assert a.shape == x.shape and torch.equal(a, b)


def test_cfg_special_cases(tiny_model):
    x, t, y = rand(2, 3, 8, 8), torch.full((2,), 0.4), cond_tensor(CAP, 2)
    with torch.no_grad():
        c, u = tiny_model(x, t, y), tiny_model(x, t, null_cond(2))
        assert torch.allclose(cfg_predict(tiny_model, x, y, t, 0.0), c, atol=1e-6)
        assert torch.allclose(cfg_predict(tiny_model, x, y, t, -1.0), u, atol=1e-6)
        for om in (0.0, 3.0, 25.0):
            assert torch.allclose(cfg_predict(tiny_model, x, null_cond(2), t, om), u, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(w1=st.floats(-2, 10), w2=st.floats(-2, 10))
def test_cfg_linear_in_omega(tiny_model, w1, w2):
    x, t, y = rand(2, 3, 8, 8), torch.full((2,), 0.6), cond_tensor(CAP, 2)
    with torch.no_grad():
        lhs = cfg_predict(tiny_model, x, y, t, w1) + cfg_predict(tiny_model, x, y, t, w2) - cfg_predict(tiny_model, x, y, t, 0.0)
        rhs = cfg_predict(tiny_model, x, y, t, w1 + w2)
    assert torch.max(torch.abs(lhs - rhs)) < 1e-5 * (1 + abs(w1) + abs(w2))


def test_oracle_loss_is_zero(oracle_stub):
    z, eps = rand(2, 3, 8, 8), rand(2, 3, 8, 8, seed=3)
    loss = diffusion_loss(oracle_stub(eps), z, cond_tensor(CAP, 2), eps, torch.full((2,), 0.5), SCHED)
    assert float(loss) == 0.0


def _zero_dataset(n=32):
    ds = sample_dataset(0, n, (8, 8, 3))
    return Dataset(np.zeros_like(ds.images), ds.specs, ds.canvas, 0)


TINY = dict(batch=8, warmup=5, log_every=10, width=8, val_size=16)


def test_training_reduces_loss_on_constant_data():
    ds = _zero_dataset()
    untrained = train_denoiser(ds, SCHED, TrainConfig(steps=1, lr=1e-12, **TINY))
    trained = train_denoiser(ds, SCHED, TrainConfig(steps=150, **TINY))
    from ddslab.diffusion import to_tensor

    x, c = to_tensor(ds.images), cond_tensor(ds.captions())
    assert validation_loss(trained, x, c, SCHED, 5) < validation_loss(untrained, x, c, SCHED, 5)


def test_training_bitwise_reproducible():
    ds = sample_dataset(1, 32, (8, 8, 3))
    a = train_denoiser(ds, SCHED, TrainConfig(steps=20, seed=4, **TINY))
    b = train_denoiser(ds, SCHED, TrainConfig(steps=20, seed=4, **TINY))
    assert a.history == b.history
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_training_divergence_raises():
    ds = sample_dataset(1, 8, (8, 8, 3))
    ds.images[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_denoiser(ds, SCHED, TrainConfig(steps=50, **TINY))


def test_sampler_contract(tiny_model):
    a = sample(tiny_model, CAP, 3.0, steps=5, seed=9, n=2)
    b = sample(tiny_model, CAP, 3.0, steps=5, seed=9, n=2)
    assert torch.equal(a, b) and a.shape == (2, 3, 8, 8)
    one = sample(tiny_model, CAP, 3.0, steps=1, seed=0)
    assert one.min() >= -1 and one.max() <= 1
    with pytest.raises(ValueError):
        sample(tiny_model, CAP, 3.0, steps=0)
    with pytest.raises(ValueError):
        sample(tiny_model, CAP, None)
