import numpy as np
import pytest
import torch

from mmfusion.backbone import (
    Backbone,
    BackboneConfig,
    ConfigError,
    block_spatial_sizes,
    build_backbone,
    count_parameters,
)
from mmfusion.checkpoint import CheckpointError, checkpoint_bytes, parse_checkpoint
from mmfusion.data import SyntheticConfig, generate_synthetic
from mmfusion.evaluation import TrainConfig, balanced_accuracy, make_pairing, predict, train
from mmfusion.fusion import build_model
from mmfusion.tensor_nn import Conv3d, ShapeError

from conftest import DESK

FULL_SHAPE = (113, 137, 113)


def test_default_backbone_has_twelve_3x3x3_convs():
    net = build_backbone(BackboneConfig())
    convs = net.conv_layers()
    assert len(convs) == 12
    assert all(tuple(c.weight.shape[2:]) == (3, 3, 3) for c in convs)
    shortcuts = [b.shortcut_conv for b in net.blocks if b.shortcut_conv is not None]
    assert len(shortcuts) == 3


def test_closed_form_block_sizes():
    assert block_spatial_sizes(FULL_SHAPE) == [
        (113, 137, 113), (57, 69, 57), (29, 35, 29), (15, 18, 15)
    ]


def test_meta_device_shape_propagation_full_geometry():
    with torch.device("meta"):
        net = Backbone(BackboneConfig()).eval()
        outs = net.block_outputs(torch.empty(1, 1, *FULL_SHAPE))
    assert [tuple(o.shape[2:]) for o in outs] == block_spatial_sizes(FULL_SHAPE)
    assert tuple(outs[-1].shape) == (1, 128, 15, 18, 15)


@pytest.mark.parametrize("num_classes", [2, 3])
def test_output_shape_and_normalization(num_classes):
    torch.manual_seed(0)
    net = build_backbone(BackboneConfig(block_channels=DESK, num_classes=num_classes)).eval()
    out = net(torch.rand(3, 1, 12, 10, 9))
    assert out.shape == (3, num_classes)
    assert torch.allclose(out.exp().sum(1), torch.ones(3), atol=1e-5)


def test_identical_inputs_identical_rows():
    torch.manual_seed(0)
    net = build_backbone(BackboneConfig(block_channels=DESK)).eval()
    x = torch.rand(1, 1, 10, 10, 10)
    out = net(torch.cat([x, x]))
    assert torch.equal(out[0], out[1])


def test_untrained_net_is_chance_level():
    torch.manual_seed(3)
    net = build_backbone(BackboneConfig(block_channels=DESK)).eval()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(200, 1, 8, 8, 8, generator=g)
    labels = np.repeat([0, 1], 100)
    with torch.no_grad():
        pred = net(x).argmax(1).numpy()
    assert abs(balanced_accuracy(labels, pred, 2) - 0.5) <= 0.1


def test_constant_input_embedding_is_finite():
    torch.manual_seed(0)
    net = build_backbone(BackboneConfig(block_channels=DESK)).eval()
    emb = net.forward_features(torch.full((2, 1, 9, 9, 9), 0.3))
    assert emb.shape == (2, 32)
    assert torch.isfinite(emb).all()
    assert torch.equal(emb[0], emb[1])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"block_channels": [4, 8, 16]},
        {"block_channels": [4, 8, 16, 32, 64]},
        {"block_channels": [8, 4, 16, 32]},
        {"block_channels": [0, 8, 16, 32]},
        {"num_classes": 4},
        {"dropout": 1.0},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


@pytest.mark.parametrize("shape", [(1, 1, 7, 10, 10), (1, 2, 10, 10, 10), (1, 10, 10, 10)])
def test_bad_input_shape(shape):
    net = build_backbone(BackboneConfig(block_channels=DESK))
    with pytest.raises(ShapeError):
        net(torch.zeros(shape))


def test_headless_backbone_refuses_head():
    net = build_backbone(BackboneConfig(block_channels=DESK, with_head=False))
    with pytest.raises(RuntimeError):
        net(torch.zeros(2, 1, 8, 8, 8))


def test_parameter_count_closed_form():
    c = [4, 8, 16, 32]
    conv = lambda i, o: i * o * 27  # noqa: E731
    bn = lambda n: 2 * n  # noqa: E731
    want = conv(1, c[0]) + bn(c[0])
    prev = c[0]
    for k, ch in enumerate(c):
        want += conv(prev, ch) + bn(ch) + conv(ch, ch) + bn(ch)
        if k > 0:
            want += conv(prev, ch) + bn(ch)
        prev = ch
    want += c[-1] * 64 + 64 + 64 * 2 + 2
    assert count_parameters(build_backbone(BackboneConfig(block_channels=c))) == want


def test_dropout_only_active_in_training():
    torch.manual_seed(0)
    net = build_backbone(BackboneConfig(block_channels=DESK, dropout=0.5))
    x = torch.rand(4, 1, 8, 8, 8)
    net.eval()
    assert torch.equal(net(x), net(x))
    net.train()
    torch.manual_seed(1)
    a = net(x)
    torch.manual_seed(2)
    b = net(x)
    assert not torch.equal(a, b)


def test_conv_weights_use_channels_last_layout():
    conv = Conv3d(2, 4)
    assert conv.weight.is_contiguous(memory_format=torch.channels_last_3d)


# ---------------------------------------------------------------- training smoke tests


def _noise_dataset(n, shape, seed):
    from mmfusion.data import SubjectRecord, Volume

    g = np.random.default_rng(seed)
    records, volumes = [], {}
    for i in range(n):
        sid = f"s{i:02d}"
        dx = "CN" if i % 2 == 0 else "AD"
        records.append(SubjectRecord(sid, dx, "F", 70.0, f"{sid}_pet", f"{sid}_mri"))
        volumes[sid] = tuple(Volume(g.random(shape, dtype=np.float32)) for _ in range(2))
    return records, volumes


@pytest.mark.slow
def test_memorizes_sixteen_samples():
    records, volumes = _noise_dataset(16, (10, 10, 10), seed=0)
    torch.manual_seed(0)
    model = build_model("single_pet", BackboneConfig(block_channels=DESK))
    # validating on the training set selects the checkpoint by inference-mode accuracy
    res = train(model, records, records, volumes, "correct", TrainConfig(epochs=120, augment=False), seed=0)
    assert res.history[-1]["train_acc"] == 1.0
    assert res.best_val_bacc == 1.0
    pairs = make_pairing(records, "correct", 2)
    pred = predict(res.model, volumes, pairs)
    assert (pred == np.array([p.label for p in pairs])).all()


@pytest.fixture(scope="module")
def smooth_model():
    cfg = SyntheticConfig(n_subjects=40, shape=(16, 16, 16), pet_signal=0.5, seed=5)
    records, volumes = generate_synthetic(cfg)
    torch.manual_seed(0)
    model = build_model("single_pet", BackboneConfig(block_channels=DESK))
    train(model, records[:32], records[32:], volumes, "correct", TrainConfig(epochs=5), seed=0)
    return model, records, volumes


def test_one_voxel_shift_embedding_stability(smooth_model):
    model, records, volumes = smooth_model
    x = torch.from_numpy(volumes[records[0].subject_id][0].data)[None, None]
    shifted = torch.roll(x, 1, dims=2)
    shifted[:, :, 0] = 0
    with torch.no_grad():
        a = model.net.forward_features(x)
        b = model.net.forward_features(shifted)
    assert float((a - b).norm() / a.norm()) < 0.5


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("strategy", ["single_pet", "single_mri", "early", "middle", "late"])
def test_checkpoint_round_trip(strategy):
    torch.manual_seed(0)
    model = build_model(strategy, BackboneConfig(block_channels=[2, 2, 4, 4])).eval()
    # perturb BN state so the buffers are not at their initial values
    for m in model.modules():
        if hasattr(m, "running_var"):
            m.running_var.uniform_(0.5, 2.0)
    blob = checkpoint_bytes(model, {"note": 1})
    loaded, extra = parse_checkpoint(blob)
    assert extra == {"note": 1}
    assert not loaded.training
    assert checkpoint_bytes(loaded, {"note": 1}) == blob
    pet, mri = torch.rand(2, 1, 8, 8, 8), torch.rand(2, 1, 8, 8, 8)
    assert torch.equal(loaded(pet, mri), model(pet, mri))


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOPE" + bytes(20))
