import numpy as np
import pytest

from coopfuse import nn, tensor
from coopfuse.nn import Adam, BatchNorm, Conv2d, Linear, Module, Parameter, SGD
from coopfuse.nn import load_checkpoint, load_into, save_checkpoint
from coopfuse.tensor import Tensor


class Block(Module):
    def __init__(self, rng):
        self.conv = Conv2d(rng, 2, 3, 3, padding=1)
        self.bn = BatchNorm(3)


class Net(Module):
    def __init__(self, rng):
        self.backbone = Block(rng)
        self.heads = [Linear(rng, 3, 1), Linear(rng, 3, 1)]


def test_parameter_names_follow_attribute_paths():
    net = Net(np.random.default_rng(0))
    names = sorted(p.name for p in net.parameters())
    assert "backbone.conv.weight" in names
    assert "backbone.bn.running_mean" in names
    assert "heads.0.weight" in names
    assert "heads.1.bias" in names


def test_running_stats_not_trainable():
    net = Net(np.random.default_rng(0))
    trainable = {p.name for p in net.trainable_parameters()}
    assert "backbone.bn.gamma" in trainable
    assert "backbone.bn.running_mean" not in trainable
    assert "backbone.bn.running_var" not in trainable


def test_set_training_recurses():
    net = Net(np.random.default_rng(0))
    assert net.backbone.bn.training
    net.set_training(False)
    assert not net.backbone.bn.training


def test_kaiming_bound():
    rng = np.random.default_rng(1)
    w = nn.kaiming_uniform(rng, (64, 9), 9)
    bound = np.sqrt(6.0 / 9)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.8 * bound


def test_linear_bias_starts_zero():
    layer = Linear(np.random.default_rng(2), 4, 3)
    assert np.array_equal(layer.bias.data, np.zeros(3))


def test_sgd_zero_grad_is_noop():
    p = Parameter("p", np.array([1.0, 2.0]))
    opt = SGD([p], lr=0.5)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_sgd_single_step():
    p = Parameter("p", np.array([1.0]))
    (p * p).sum().backward()
    SGD([p], lr=0.1).step()
    assert abs(p.data[0] - 0.8) < 1e-12


def test_adam_first_step_magnitude():
    # with fresh moments and no decay, the first Adam step is lr * g / (|g| + eps)
    p = Parameter("p", np.array([0.0]))
    p.grad[:] = 4.0
    Adam([p], lr=0.1, eps=0.1, weight_decay=0.0).step()
    assert abs(p.data[0] + 0.1 * 4.0 / 4.1) < 1e-12


def test_adam_minimizes_quadratic():
    p = Parameter("x", np.array([10.0]))
    opt = Adam([p], lr=0.05, eps=0.1, weight_decay=1e-4)
    for _ in range(2000):
        opt.zero_grad()
        d = tensor.add(p, -3.0)
        (d * d).sum().backward()
        opt.step()
    assert abs(p.data[0] - 3.0) < 0.1


def test_adam_skips_non_trainable():
    p = Parameter("stat", np.array([1.0]), trainable=False)
    p.grad[:] = 1.0
    Adam([p], lr=0.1).step()
    assert p.data[0] == 1.0


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = Net(np.random.default_rng(3))
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, net.parameters(), extra={"note": "x"})
    arrays, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    for p in net.parameters():
        assert np.array_equal(arrays[p.name], p.data)
        assert arrays[p.name].dtype == np.float64


def test_load_into_restores_exactly(tmp_path):
    rng = np.random.default_rng(4)
    net = Net(rng)
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, net.parameters())
    other = Net(np.random.default_rng(99))
    arrays, _ = load_checkpoint(path)
    load_into(other, arrays)
    for a, b in zip(net.parameters(), other.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.data, b.data)


def test_load_into_rejects_mismatch(tmp_path):
    net = Net(np.random.default_rng(5))
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, net.parameters()[:-1])
    arrays, _ = load_checkpoint(path)
    with pytest.raises(ValueError):
        load_into(net, arrays)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(str(path))


def test_checkpoint_deterministic_bytes(tmp_path):
    net = Net(np.random.default_rng(6))
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_checkpoint(p1, net.parameters())
    save_checkpoint(p2, net.parameters())
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_training_step_reduces_loss():
    rng = np.random.default_rng(7)
    layer = Linear(rng, 4, 2)
    x = Tensor(rng.normal(size=4))
    y = rng.normal(size=2)

    def loss():
        d = tensor.add(layer(x), Tensor(-y))
        return (d * d).sum()

    opt = SGD(layer.parameters(), lr=0.05)
    first = loss().item()
    for _ in range(50):
        opt.zero_grad()
        loss().backward()
        opt.step()
    assert loss().item() < 0.1 * first
