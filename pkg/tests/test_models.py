import numpy as np
import pytest

import models
import tensor_autodiff as ad
from errors import ArtifactFormatError, ParameterError, ShapeError
from models import ArchDescriptor, ParamVector, Trajectory
from tensor_autodiff import Tensor


def test_reference_convnet_param_count():
    arch = models.arch_for(3, 32, 60, 99, 10)
    assert arch.param_count == 19146
    assert arch.canonical() == "convnet-d3-w32-avg-relu-1x60x99-k10"


def test_descriptor_round_trip():
    arch = models.arch_for(2, 16, 60, 99, 4)
    assert ArchDescriptor.from_string(arch.canonical()) == arch


@pytest.mark.parametrize("text", ["convnet-d3", "resnet18", ""])
def test_unreadable_descriptor(text):
    with pytest.raises(ParameterError):
        ArchDescriptor.from_string(text)


def test_invalid_descriptors():
    with pytest.raises(ParameterError):
        models.arch_for(4, 8, 12, 40, 2)  # 12 // 16 == 0
    with pytest.raises(ParameterError):
        ArchDescriptor(depth=1, width=4, input_shape=(1, 8, 8), n_classes=2, family="vgg11")
    with pytest.raises(ParameterError):
        models.arch_for(0, 4, 8, 8, 2)


def test_layer_slices_tile_the_flat_vector(toy_arch):
    slices = toy_arch.layer_slices()
    assert [s[0] for s in slices] == ["conv0.weight", "conv0.bias", "head.weight", "head.bias"]
    assert slices[0][1] == 0
    assert all(a[2] == b[1] for a, b in zip(slices, slices[1:]))
    assert slices[-1][2] == toy_arch.param_count == 36 + 4 + 8 + 2


def test_build_is_seeded_kaiming_uniform(toy_arch):
    a = models.build(toy_arch, 1)
    assert np.array_equal(a.flat, models.build(toy_arch, 1).flat)
    assert not np.array_equal(a.flat, models.build(toy_arch, 2).flat)
    conv_w, conv_b, head_w, head_b = models.split_layers(a.flat, toy_arch)
    assert np.all(np.abs(conv_w) <= np.sqrt(6.0 / 9) + 1e-6)
    assert np.all(np.abs(head_w) <= np.sqrt(6.0 / 4) + 1e-6)
    assert not np.any(conv_b) and not np.any(head_b)


def test_param_vector_length_is_checked(toy_arch):
    with pytest.raises(ShapeError):
        ParamVector(flat=np.zeros(10), arch=toy_arch)


def test_split_layers_tensor_matches_array(toy_arch):
    flat = models.build(toy_arch, 0).flat
    for t, a in zip(models.split_layers(Tensor(flat), toy_arch), models.split_layers(flat, toy_arch)):
        assert np.array_equal(t.data, a)


def test_forward_shapes(toy_arch, toy_data):
    x, _ = toy_data
    logits = models.forward(models.build(toy_arch, 0), toy_arch, x[:5])
    assert logits.shape == (5, 2)
    with pytest.raises(ShapeError):
        models.forward(models.build(toy_arch, 0), toy_arch, np.zeros((2, 1, 6, 9)))
    with pytest.raises(ShapeError):
        models.forward(np.zeros(7), toy_arch, x[:2])


def test_zero_input_and_zero_params_give_zero_logits(toy_arch):
    logits = models.forward(np.zeros(toy_arch.param_count), toy_arch, np.zeros((3, 1, 6, 8)))
    assert logits.shape == (3, 2)
    assert not np.any(logits.data)


def test_logits_do_not_depend_on_batch_companions(toy_arch, toy_data):
    x, _ = toy_data
    params = models.build(toy_arch, 5)
    single = models.forward(params, toy_arch, x[:1]).data
    pair = models.forward(params, toy_arch, np.concatenate([x[:1], x[:1]])).data
    assert np.allclose(pair[0], single[0], rtol=1e-6, atol=1e-7)
    assert np.allclose(pair[1], single[0], rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("k", [2, 4, 10])
def test_uniform_logits_cross_entropy_is_log_k(k):
    with ad.precision(np.float64):
        loss = ad.cross_entropy(Tensor(np.full((3, k), 0.7)), np.arange(3) % k).item()
    assert abs(loss - np.log(k)) < 1e-5


def test_untrained_accuracy_is_chance():
    k, per_class = 4, 50
    rng = np.random.default_rng(0)
    x = rng.standard_normal((k * per_class, 1, 6, 8)).astype(np.float32)
    y = np.repeat(np.arange(k), per_class)
    arch = models.arch_for(1, 4, 6, 8, k)
    accs = [models.evaluate_accuracy(models.build(arch, seed), arch, x, y) for seed in range(10)]
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / len(y))
    assert abs(np.mean(accs) - 1 / k) <= 3 * sigma


def test_forward_gradient_matches_finite_differences(toy_arch, toy_data):
    x, y = toy_data
    flat0 = models.build(toy_arch, 0).flat.astype(np.float64)
    with ad.precision(np.float64):
        theta = Tensor(flat0, requires_grad=True)
        (g,) = ad.grad(models.loss_on(theta, toy_arch, x[:6], y[:6]), [theta])
        numeric = ad.numerical_grad(lambda v: models.loss_on(Tensor(v), toy_arch, x[:6], y[:6]).item(), flat0)
    assert np.linalg.norm(g.data - numeric) / np.linalg.norm(numeric) < 1e-5


def test_train_epochs_records_every_epoch(toy_arch, toy_data):
    x, y = toy_data
    init = models.build(toy_arch, 0)
    traj = models.train_epochs(init, x, y, epochs=5, lr=0.1, batch_size=5, seed=0)
    assert len(traj) == 6
    assert [p.epoch_tag for p in traj.snapshots] == [0, 1, 2, 3, 4, 5]
    assert np.array_equal(traj[0].flat, init.flat)
    assert not np.array_equal(traj[5].flat, init.flat)


def test_training_learns_a_separable_task(toy_arch, toy_data):
    x, y = toy_data
    traj = models.train_epochs(models.build(toy_arch, 0), x, y, epochs=30, lr=0.1, batch_size=5, seed=0)
    assert models.evaluate_accuracy(traj[-1], toy_arch, x, y) >= 0.95


def test_training_is_deterministic(toy_arch, toy_data):
    x, y = toy_data
    a = models.train_flat(models.build(toy_arch, 0).flat, toy_arch, x, y, 3, 0.1, 4, seed=9)
    b = models.train_flat(models.build(toy_arch, 0).flat, toy_arch, x, y, 3, 0.1, 4, seed=9)
    assert np.array_equal(a, b)


def test_training_rejects_bad_labels(toy_arch, toy_data):
    x, y = toy_data
    with pytest.raises(ParameterError):
        models.train_epochs(models.build(toy_arch, 0), x, y + 5, 1, 0.1, 4, 0)


def test_predict_does_not_record(toy_arch, toy_data):
    x, _ = toy_data
    preds = models.predict(models.build(toy_arch, 0), toy_arch, x, batch_size=7)
    assert preds.shape == (20,)
    assert set(preds.tolist()) <= {0, 1}


# ============================================================
# Fichiers
# ============================================================

def test_checkpoint_round_trip(tmp_path, toy_arch):
    params = ParamVector(flat=models.build(toy_arch, 3).flat, arch=toy_arch, epoch_tag=7)
    back = models.load_checkpoint(models.save_checkpoint(params, tmp_path / "c.ckpt"))
    assert back.arch == toy_arch
    assert back.epoch_tag == 7
    assert np.array_equal(back.flat, params.flat)


def test_trajectory_round_trip(tmp_path, toy_arch, toy_data):
    x, y = toy_data
    traj = models.train_epochs(models.build(toy_arch, 0), x, y, 2, 0.1, 5, seed=4)
    path = models.save_trajectory(traj, tmp_path / "t.traj", config='{"seed":4}')
    back = models.load_trajectory(path)
    assert isinstance(back, Trajectory)
    assert back.seed == 4
    assert [p.epoch_tag for p in back.snapshots] == [0, 1, 2]
    assert all(np.array_equal(a.flat, b.flat) for a, b in zip(back.snapshots, traj.snapshots))
    assert models.trajectory_config(path) == '{"seed":4}'


def test_corrupted_artifacts(tmp_path, toy_arch):
    path = models.save_checkpoint(models.build(toy_arch, 0), tmp_path / "c.ckpt")
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    (tmp_path / "odd.ckpt").write_bytes(raw[:-1])
    (tmp_path / "nohead.ckpt").write_bytes(b"\x00\x01\x02")
    for name in ("short.ckpt", "odd.ckpt", "nohead.ckpt"):
        with pytest.raises(ArtifactFormatError):
            models.load_checkpoint(tmp_path / name)
