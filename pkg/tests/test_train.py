import numpy as np
import pytest

from mcdqmri.dunet import DUNet, DUNetConfig, checkpoint_bytes
from mcdqmri.nnengine import ParamTensor
from mcdqmri.phantom import PhantomSpec, generate_phantom
from mcdqmri.train import (AdamState, TrainConfig, TrainHistory, adam_step, split_dataset, train,
                           training_blocks)


def scalar_adam(grad_fn, w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    # independent textbook oracle, pure Python floats
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        out.append(w)
    return out


def test_adam_matches_scalar_oracle():
    p = ParamTensor("w", np.zeros(1))
    state = AdamState(lr=0.1)
    ours = []
    for _ in range(50):
        p.grad[:] = 2 * (p.value - 3.0)
        adam_step([p], state)
        ours.append(float(p.value[0]))
    ref = scalar_adam(lambda w: 2 * (w - 3.0), 0.0, 0.1, 50)
    np.testing.assert_allclose(ours, ref, atol=1e-12, rtol=0)
    assert abs(ours[-1] - 3.0) < 0.5


def test_adam_first_step_magnitude_and_zeroed_grads():
    p = ParamTensor("w", np.zeros(3))
    p.grad[:] = [5.0, -0.01, 0.0]
    adam_step([p], AdamState(lr=0.01))
    np.testing.assert_allclose(p.value, [-0.01, 0.01, 0.0], rtol=1e-5)
    assert not p.grad.any()


def test_adam_rejects_non_finite_gradient():
    p = ParamTensor("enc0.conv1.w", np.zeros(2))
    p.grad[1] = np.nan
    with pytest.raises(FloatingPointError, match="enc0.conv1.w"):
        adam_step([p], AdamState())


def test_split_is_seeded_and_sized():
    items = list(range(10))
    tr, va = split_dataset(items, 0.2, seed=4)
    assert len(va) == 2 and sorted(tr + va) == items
    assert split_dataset(items, 0.2, seed=4) == (tr, va)
    assert split_dataset(items, 0.2, seed=5) != (tr, va)
    tr, va = split_dataset([1], 0.5)
    assert tr == [1] and va == []


@pytest.fixture(scope="module")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(16, 16, 16), seed=3))


def small_net(seed=0):
    return DUNet(DUNetConfig(depth=2, base_kernels=4, block_size=(8, 8, 8)), seed)


def test_training_blocks_shapes(small_phantom):
    blocks = training_blocks([small_phantom], (8, 8, 8), (8, 8, 8))
    assert 0 < len(blocks) <= 8
    b = blocks[0]
    assert b.x.shape == (4, 8, 8, 8) and b.y.shape == (2, 8, 8, 8) and b.mask.shape == (8, 8, 8)
    assert all(blk.mask.any() for blk in blocks)


def test_zero_lr_leaves_parameters_unchanged(small_phantom):
    net = small_net()
    before = checkpoint_bytes(net)
    train(net, [small_phantom], TrainConfig(epochs=2, lr=0.0, blocks_per_epoch=2))
    assert checkpoint_bytes(net) == before


def test_zero_epochs_returns_init(small_phantom):
    net = small_net()
    before = checkpoint_bytes(net)
    _, hist = train(net, [small_phantom], TrainConfig(epochs=0))
    assert checkpoint_bytes(net) == before and len(hist) == 0


def test_training_is_deterministic_and_history_consistent(small_phantom, tmp_path):
    cfg = TrainConfig(epochs=3, blocks_per_epoch=3, seed=2)
    a, ha = train(small_net(), [small_phantom], cfg)
    b, hb = train(small_net(), [small_phantom], cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ha.train_loss == hb.train_loss and ha.val_loss == hb.val_loss
    assert len(ha.train_loss) == len(ha.val_loss) == len(ha.seconds) == 3
    assert ha.val_loss[ha.best_epoch] == min(ha.val_loss)
    ha.write_csv(tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 4


def test_early_stopping(small_phantom):
    _, hist = train(small_net(), [small_phantom], TrainConfig(epochs=30, lr=0.0, patience=2, blocks_per_epoch=1))
    # a constant validation loss never beats the first epoch strictly, so patience triggers
    assert len(hist) == 3 and hist.best_epoch == 0


def test_overfits_single_phantom(small_phantom):
    net = small_net(1)
    _, hist = train(net, [small_phantom], TrainConfig(epochs=200, blocks_per_epoch=2, lr=3e-3, patience=200,
                                                      stride=8))
    assert hist.train_loss[-1] < 0.25 * hist.train_loss[0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_empty_history_len():
    assert len(TrainHistory()) == 0
