import numpy as np
import pytest
import torch

from oracles import dice_oracle, nlcc_oracle, smoothness_oracle
from pyramidreg.losses import LossConfig, dice, local_cc, nlcc, smoothness, total_loss
from pyramidreg.pyramid import RegistrationOutput


def vol(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)[None, None]


def test_config_validation():
    for bad in ({"window": 4}, {"window": 1}, {"lam": -1.0}, {"eps": 0.0}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_self_correlation_is_minus_one():
    v = np.random.default_rng(0).uniform(size=(8, 8, 8))
    value = nlcc(vol(v), vol(v), LossConfig(window=3)).item()
    assert value == pytest.approx(-1.0, abs=1e-4)


def test_affine_intensity_invariance():
    # zero padding is not rescaled with the volume, so only windows clear of the border are invariant
    v = np.random.default_rng(1).uniform(size=(8, 8, 8))
    inner = (0, 0) + (slice(1, -1),) * 3
    same = local_cc(vol(v), vol(v), 3)[inner]
    scaled = local_cc(vol(v), vol(2.5 * v + 0.7), 3)[inner]
    assert (-scaled.mean()).item() == pytest.approx((-same.mean()).item(), abs=1e-4)
    np.testing.assert_allclose(scaled.numpy(), same.numpy(), atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_nlcc_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(6, 6, 6)), rng.uniform(size=(6, 6, 6))
    cfg = LossConfig(window=3, eps=1e-5)
    got = nlcc(vol(a), vol(b), cfg).item()
    assert got == pytest.approx(nlcc_oracle(a, b, 3, 1e-5), rel=1e-6)
    assert -1.0 <= got <= 0.0


def test_nlcc_window_too_large():
    with pytest.raises(ValueError, match="window"):
        nlcc(vol(np.zeros((5, 6, 6))), vol(np.zeros((5, 6, 6))), LossConfig(window=7))


def test_nlcc_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = vol(rng.uniform(size=(5, 5, 5))).requires_grad_()
    b = vol(rng.uniform(size=(5, 5, 5)))
    cfg = LossConfig(window=3)
    nlcc(a, b, cfg).backward()
    flat = a.detach().reshape(-1)
    h = 1e-3
    numeric = np.empty(flat.numel())
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        numeric[i] = (nlcc(plus.reshape(a.shape), b, cfg) - nlcc(minus.reshape(a.shape), b, cfg)).item() / (2 * h)
    np.testing.assert_allclose(a.grad.reshape(-1).numpy(), numeric, rtol=1e-3, atol=1e-9)


def test_local_cc_shape():
    a = torch.rand(2, 1, 6, 7, 8)
    assert local_cc(a, a, 3).shape == a.shape


def test_smoothness_constant_and_ramp():
    assert smoothness(torch.full((3, 4, 4, 4), 1.7)).item() == 0.0
    s = 5
    u = torch.zeros(3, s, s, s, dtype=torch.float64)
    u[0] = torch.arange(s, dtype=torch.float64)[:, None, None]
    assert smoothness(u).item() == pytest.approx((s - 1) / s / 9, rel=1e-12)
    assert smoothness(u).item() == pytest.approx(smoothness_oracle(u.numpy()), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_smoothness_matches_oracle_and_shift_invariant(seed):
    u = np.random.default_rng(seed).normal(size=(3, 4, 5, 6))
    got = smoothness(torch.tensor(u)).item()
    assert got == pytest.approx(smoothness_oracle(u), rel=1e-6)
    assert smoothness(torch.tensor(u + 3.0)).item() == pytest.approx(got, rel=1e-12)


def _output(warped, field):
    return RegistrationOutput([], [], field, warped)


def test_total_loss_arithmetic():
    rng = np.random.default_rng(4)
    fixed = vol(rng.uniform(size=(6, 6, 6)))
    warped = vol(rng.uniform(size=(6, 6, 6)))
    field = torch.tensor(rng.normal(size=(1, 3, 6, 6, 6)))
    out = _output(warped, field)
    sim = nlcc(warped, fixed, LossConfig(window=3)).item()
    smooth = smoothness(field).item()
    loss0, s0, r0 = total_loss(out, fixed, LossConfig(window=3, lam=0.0))
    assert loss0.item() == sim
    loss2, _, _ = total_loss(out, fixed, LossConfig(window=3, lam=2.0))
    assert loss2.item() == pytest.approx(sim + 2 * smooth, rel=1e-12)
    assert r0.item() == smooth and s0.item() == sim


def test_dice_basic_cases():
    a = np.zeros((4, 4, 4), dtype=int)
    a[:2, :2, :2] = 1
    a[2:, 2:, 2:] = 2
    assert dice(a, a, [1, 2])["scores"] == {1: 1.0, 2: 1.0}
    b = np.zeros_like(a)
    b[2:, :2, :2] = 1
    assert dice(a, b, [1])["scores"][1] == 0.0
    c = np.zeros_like(a)
    c[1:3, :2, :2] = 1  # 8 voxels, 4 shared with region 1 of a
    assert dice(a, c, [1])["scores"][1] == 0.5


def test_dice_absent_region_flagged():
    a = np.ones((2, 2, 2), dtype=int)
    res = dice(a, a, [1, 5])
    assert res["scores"][5] == 1.0 and res["absent"] == [5]
    assert res["average"] == 1.0


def test_dice_matches_oracle_and_is_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = rng.integers(0, 4, size=(5, 5, 5)), rng.integers(0, 4, size=(5, 5, 5))
        res = dice(a, b, [1, 2, 3])
        for r in (1, 2, 3):
            assert res["scores"][r] == pytest.approx(dice_oracle(a, b, r))
            assert 0.0 <= res["scores"][r] <= 1.0
        assert dice(b, a, [1, 2, 3]) == res
        assert res["average"] == pytest.approx(np.mean([res["scores"][r] for r in (1, 2, 3)]))
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), [1])
