import itertools

import numpy as np
import pytest
import torch

from mmfusion.backbone import BackboneConfig, ConfigError, count_parameters
from mmfusion.data import Volume
from mmfusion.fusion import (
    ExchangeConfig,
    FusionStrategy,
    LateFusionModel,
    MiddleFusionModel,
    build_model,
    channel_exchange,
    early_fuse,
)
from mmfusion.tensor_nn import ShapeError, softmax_cross_entropy

from conftest import DESK

TAU = 0.02
BELOW, ABOVE = 0.01, 0.5


def _oracle(a, b, ga, gb, tau):
    """Hand-written per-channel rule: a low-importance channel is taken from the other branch."""
    out_a, out_b = a.clone(), b.clone()
    for c in range(a.shape[1]):
        if abs(float(ga[c])) < tau:
            out_a[:, c] = b[:, c]
        if abs(float(gb[c])) < tau:
            out_b[:, c] = a[:, c]
    return out_a, out_b


def _pair(seed=0, c=3):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(2, c, 2, 2, 2, generator=g), torch.randn(2, c, 2, 2, 2, generator=g)


# ---------------------------------------------------------------- early fusion


def test_early_fuse_annihilator_and_identity(rng):
    pet = rng.random((4, 4, 4)).astype(np.float32)
    assert np.array_equal(early_fuse(np.zeros_like(pet), pet), np.zeros_like(pet))
    assert np.array_equal(early_fuse(np.ones_like(pet), pet), pet)


def test_early_fuse_scalar_product_on_volumes():
    out = early_fuse(Volume(np.full((2, 2, 2), 0.5, np.float32)), Volume(np.full((2, 2, 2), 0.8, np.float32)))
    np.testing.assert_allclose(out.data, 0.4, rtol=1e-6)


def test_early_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        early_fuse(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# ---------------------------------------------------------------- exchange rule


def test_exchange_example_keep_and_receive():
    a, b = _pair(c=2)
    ga, gb = torch.tensor([0.5, 0.01]), torch.tensor([0.5, 0.5])
    out_a, out_b = channel_exchange(a, b, ga, gb, TAU)
    assert torch.equal(out_a[:, 0], a[:, 0])
    assert torch.equal(out_a[:, 1], b[:, 1])
    assert torch.equal(out_b, b)


def test_exchange_exhaustive_three_channels_matches_oracle():
    """Every keep / receive / swap combination over 3 channels for both branches."""
    a, b = _pair(seed=7)
    levels = [BELOW, -BELOW, ABOVE, -ABOVE, TAU]
    count = 0
    for ga_vals in itertools.product(levels, repeat=3):
        for gb_vals in itertools.product(levels, repeat=3):
            ga, gb = torch.tensor(ga_vals), torch.tensor(gb_vals)
            got = channel_exchange(a, b, ga, gb, TAU)
            want = _oracle(a, b, ga, gb, TAU)
            assert torch.equal(got[0], want[0]) and torch.equal(got[1], want[1])
            count += 1
    assert count == 5**6


def test_exchange_all_above_threshold_is_identity():
    a, b = _pair()
    out_a, out_b = channel_exchange(a, b, torch.full((3,), ABOVE), torch.full((3,), -ABOVE), TAU)
    assert torch.equal(out_a, a) and torch.equal(out_b, b)


def test_exchange_both_below_swaps():
    a, b = _pair()
    out_a, out_b = channel_exchange(a, b, torch.full((3,), BELOW), torch.full((3,), BELOW), TAU)
    assert torch.equal(out_a, b) and torch.equal(out_b, a)


def test_exchange_threshold_is_strict():
    a, b = _pair()
    exact = torch.full((3,), TAU, dtype=torch.float64)
    out_a, _ = channel_exchange(a, b, exact, exact, TAU)
    assert torch.equal(out_a, a)


def test_float32_gamma_just_below_threshold_is_exchanged():
    a, b = _pair()
    g32 = torch.full((3,), TAU, dtype=torch.float32)  # rounds to 0.0199999996
    assert float(g32[0]) < TAU
    out_a, _ = channel_exchange(a, b, g32, g32, TAU)
    assert torch.equal(out_a, b)


def test_exchange_outputs_do_not_alias_inputs():
    a, b = _pair()
    out_a, out_b = channel_exchange(a, b, torch.full((3,), BELOW), torch.full((3,), ABOVE), TAU)
    before = a.clone()
    out_a.add_(1.0)
    out_b.add_(1.0)
    assert torch.equal(a, before)


def test_exchange_gradient_flows_to_sender():
    a, b = _pair()
    a.requires_grad_(True)
    b.requires_grad_(True)
    ga = torch.tensor([BELOW, ABOVE, ABOVE])
    out_a, _ = channel_exchange(a, b, ga, torch.full((3,), ABOVE), TAU)
    out_a.sum().backward()
    assert torch.equal(a.grad[:, 0], torch.zeros_like(a.grad[:, 0]))
    assert torch.equal(b.grad[:, 0], torch.ones_like(b.grad[:, 0]))
    assert torch.equal(b.grad[:, 1:], torch.zeros_like(b.grad[:, 1:]))


@pytest.mark.parametrize("shape_b,gamma_len", [((2, 4, 2, 2, 2), 3), ((2, 3, 2, 2, 2), 4)])
def test_exchange_shape_errors(shape_b, gamma_len):
    a = torch.zeros(2, 3, 2, 2, 2)
    with pytest.raises(ShapeError):
        channel_exchange(a, torch.zeros(shape_b), torch.ones(gamma_len), torch.ones(gamma_len), TAU)


# ---------------------------------------------------------------- middle fusion


def _middle(tau=TAU, lam=0.005, seed=0):
    torch.manual_seed(seed)
    return MiddleFusionModel(BackboneConfig(block_channels=DESK, dropout=0.0),
                             ExchangeConfig(l1_lambda=lam, bn_threshold=tau))


def _no_exchange_forward(model, pet, mri):
    """Reference: the two weight-shared branches run independently."""
    lp_a = model.pet_branch(pet)
    lp_b = model.mri_branch(mri)
    from mmfusion.tensor_nn import log_softmax

    return log_softmax(0.5 * (lp_a + lp_b))


def test_middle_shares_convs_not_bn():
    m = _middle()
    a, b = m.pet_branch, m.mri_branch
    assert a.stem is b.stem
    for ba, bb in zip(a.blocks, b.blocks):
        assert ba.conv1 is bb.conv1 and ba.conv2 is bb.conv2
        assert ba.shortcut_conv is bb.shortcut_conv
        assert ba.bn1 is not bb.bn1 and ba.bn2 is not bb.bn2
    assert a.fc1 is not b.fc1


def test_middle_tiny_tau_equals_no_exchange():
    m = _middle(tau=1e-12).eval()
    g = torch.Generator().manual_seed(1)
    pet, mri = torch.rand(3, 1, 10, 10, 10, generator=g), torch.rand(3, 1, 10, 10, 10, generator=g)
    with torch.no_grad():
        got = m(pet, mri)
        want = _no_exchange_forward(m, pet, mri)
    assert float((got - want).abs().max()) <= 1e-6


def test_middle_exchange_changes_output_when_gammas_low():
    m = _middle().eval()
    with torch.no_grad():
        m.pet_branch.blocks[1].bn2.weight[:2] = 0.0
    pet, mri = torch.rand(2, 1, 10, 10, 10), torch.rand(2, 1, 10, 10, 10)
    with torch.no_grad():
        assert not torch.allclose(m(pet, mri), _no_exchange_forward(m, pet, mri))


def test_middle_symmetric_inputs_give_identical_branches():
    m = _middle().eval()
    # identical BN state in both branches
    m.mri_branch.load_state_dict(m.pet_branch.state_dict())
    x = torch.rand(2, 1, 10, 10, 10)
    with torch.no_grad():
        lp_a, lp_b = m.branch_log_probs(x, x)
    assert torch.equal(lp_a, lp_b)


def test_middle_l1_penalty_value_and_gradient():
    m = _middle(lam=0.5)
    pet, mri = torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8)
    _, penalty = m.forward_with_penalty(pet, mri)
    gammas = [bn.weight for pair in m.exchange_bns() for bn in pair]
    assert penalty.detach().item() == pytest.approx(0.5 * sum(float(g.detach().abs().sum()) for g in gammas), rel=1e-6)
    penalty.backward()
    for g in gammas:
        assert torch.equal(g.grad, 0.5 * torch.sign(g.detach()))


def test_zero_lambda_objective_is_plain_cross_entropy():
    m = _middle(lam=0.0)
    pet, mri = torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8)
    labels = torch.tensor([0, 1])
    torch.manual_seed(0)
    logp, penalty = m.forward_with_penalty(pet, mri)
    assert penalty.item() == 0.0
    torch.manual_seed(0)
    ce = softmax_cross_entropy(m(pet, mri), labels)
    assert torch.equal(softmax_cross_entropy(logp, labels) + penalty, ce)


def test_middle_shared_conv_receives_gradient_from_both_branches():
    m = _middle()
    pet, mri = torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8)
    lp_a, lp_b = m.branch_log_probs(pet, mri)
    ga = torch.autograd.grad(lp_a[:, 0].sum(), m.pet_branch.stem.weight, retain_graph=True)[0]
    gb = torch.autograd.grad(lp_b[:, 0].sum(), m.pet_branch.stem.weight)[0]
    assert ga.abs().sum() > 0 and gb.abs().sum() > 0


def test_exchange_fraction():
    m = _middle()
    assert m.exchange_fraction() == 0.0
    with torch.no_grad():
        for bn_a, _ in m.exchange_bns():
            bn_a.weight.zero_()
    assert m.exchange_fraction() == pytest.approx(0.5)


def test_exchange_points_subset():
    torch.manual_seed(0)
    m = MiddleFusionModel(BackboneConfig(block_channels=DESK), ExchangeConfig(exchange_points=[3]))
    assert len(m.exchange_bns()) == 1
    with pytest.raises(ConfigError):
        ExchangeConfig(exchange_points=[4])


# ---------------------------------------------------------------- late fusion and builder


def test_late_mlp_widths():
    m = LateFusionModel(BackboneConfig(block_channels=DESK, num_classes=3))
    assert [(l.weight.shape[1], l.weight.shape[0]) for l in m.mlp] == [(64, 128), (128, 64), (64, 3)]
    assert m.pet_branch.fc1 is None and m.mri_branch.fc1 is None
    assert m.pet_branch.stem is not m.mri_branch.stem


def test_late_batch_mismatch():
    m = LateFusionModel(BackboneConfig(block_channels=DESK))
    with pytest.raises(ShapeError):
        m(torch.rand(2, 1, 8, 8, 8), torch.rand(3, 1, 8, 8, 8))


def test_late_branch_order_matters():
    torch.manual_seed(0)
    m = LateFusionModel(BackboneConfig(block_channels=DESK)).eval()
    pet, mri = torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8)
    with torch.no_grad():
        assert not torch.allclose(m(pet, mri), m(mri, pet))


@pytest.mark.parametrize("strategy", list(FusionStrategy))
def test_every_strategy_forward(strategy):
    torch.manual_seed(0)
    m = build_model(strategy, BackboneConfig(block_channels=DESK, num_classes=3)).eval()
    with torch.no_grad():
        out = m(torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8))
    assert out.shape == (2, 3)
    assert torch.allclose(out.exp().sum(1), torch.ones(2), atol=1e-5)


@pytest.mark.parametrize("strategy", ["single_pet", "single_mri"])
def test_single_modality_ignores_other_input(strategy):
    torch.manual_seed(0)
    m = build_model(strategy, BackboneConfig(block_channels=DESK)).eval()
    x = torch.rand(2, 1, 8, 8, 8)
    with torch.no_grad():
        if strategy == "single_pet":
            a, b = m(x, torch.rand_like(x)), m(x, torch.rand_like(x))
        else:
            a, b = m(torch.rand_like(x), x), m(torch.rand_like(x), x)
    assert torch.equal(a, b)


def test_branch_counts():
    cfg = BackboneConfig(block_channels=DESK)
    single = count_parameters(build_model("single_pet", cfg))
    late = count_parameters(build_model("late", cfg))
    middle = count_parameters(build_model("middle", cfg))
    early = count_parameters(build_model("early", cfg))
    assert early == single
    assert late > single
    # middle shares convolutions, so it is far smaller than two full networks
    assert single < middle < 2 * single


@pytest.mark.parametrize("strategy", ["single_pet", "single_mri", "early", "late"])
def test_exchange_config_rejected_for_non_middle(strategy):
    with pytest.raises(ConfigError):
        build_model(strategy, BackboneConfig(block_channels=DESK), ExchangeConfig())


def test_unknown_strategy():
    with pytest.raises(ValueError):
        build_model("hybrid", BackboneConfig(block_channels=DESK))
