"""Network construction, forward shapes, residual semantics, checkpoints."""

import numpy as np
import pytest

from volseg.network import (
    NetworkConfig,
    ModelParams,
    build_network,
    load_checkpoint,
    network_forward,
    parameter_shapes,
    residual_block,
    save_checkpoint,
)
from volseg.serialization import FormatVersionError, PayloadSizeError, TruncatedPayloadError
from volseg.tensor import Tensor

from _oracles import numeric_grad_at

TINY = NetworkConfig(num_classes=3, base_width=4, num_res_blocks=2, kernel_size=3)


def hand_counted_params(num_classes, w, blocks, k):
    # independent tally, layer by layer, kept deliberately verbose
    total = 0
    total += w * 1 * k**3 + w                      # stem
    total += (2 * w) * w * k**3 + 2 * w            # down1
    total += (4 * w) * (2 * w) * k**3 + 4 * w      # down2
    per_conv = (4 * w) * (4 * w) * k**3 + 4 * w
    total += blocks * 2 * per_conv                 # residual convs
    total += (4 * w) * (2 * w) * 8 + 2 * w         # up1, kernel 2
    total += (2 * w) * w * 8 + w                   # up2
    total += num_classes * w + num_classes         # 1x1x1 head
    return total


def test_parameter_count_matches_hand_tally():
    params = build_network(TINY, seed=0)
    assert params.parameter_count() == hand_counted_params(3, 4, 2, 3)


def test_parameter_count_large_config():
    cfg = NetworkConfig(num_classes=11, base_width=8, num_res_blocks=4)
    params = build_network(cfg, seed=1)
    assert params.parameter_count() == hand_counted_params(11, 8, 4, 3)


def test_shapes_follow_declared_layout():
    shapes = dict(parameter_shapes(TINY))
    assert shapes["stem.kernel"] == (4, 1, 3, 3, 3)
    assert shapes["down1.kernel"] == (8, 4, 3, 3, 3)
    assert shapes["down2.kernel"] == (16, 8, 3, 3, 3)
    assert shapes["block00.conv1.kernel"] == (16, 16, 3, 3, 3)
    assert shapes["block01.conv2.kernel"] == (16, 16, 3, 3, 3)
    assert shapes["up1.kernel"] == (16, 8, 2, 2, 2)
    assert shapes["up2.kernel"] == (8, 4, 2, 2, 2)
    assert shapes["head.kernel"] == (3, 4, 1, 1, 1)
    assert shapes["head.bias"] == (3,)


def test_init_deterministic_and_seed_sensitive():
    a = build_network(TINY, seed=5)
    b = build_network(TINY, seed=5)
    c = build_network(TINY, seed=6)
    for name in a.names:
        assert np.array_equal(a.tensors[name].data, b.tensors[name].data)
    assert any(not np.array_equal(a.tensors[n].data, c.tensors[n].data) for n in a.names)


def test_biases_zero_kernels_scaled():
    cfg = NetworkConfig(num_classes=4, base_width=8, num_res_blocks=1)
    params = build_network(cfg, seed=2)
    for name in params.names:
        if name.endswith(".bias"):
            assert not params.tensors[name].data.any()
    k = params.tensors["down2.kernel"].data  # fan_in = 16 * 27 = 432, large enough to test std
    expected_std = np.sqrt(2.0 / 432)
    assert abs(k.std() - expected_std) / expected_std < 0.15
    assert abs(k.mean()) < 3 * expected_std / np.sqrt(k.size) * 5


def test_forward_preserves_grid_and_emits_class_channels():
    params = build_network(TINY, seed=0)
    out = network_forward(params, Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 8))))
    assert out.shape == (3, 8, 8, 8)
    out2 = network_forward(params, Tensor(np.zeros((1, 8, 12, 16))))
    assert out2.shape == (3, 8, 12, 16)


def test_forward_rejects_bad_inputs():
    params = build_network(TINY, seed=0)
    with pytest.raises(ValueError, match=r"\[1, D, H, W\]"):
        network_forward(params, Tensor(np.zeros((2, 8, 8, 8))))
    with pytest.raises(ValueError, match="divisible by 4"):
        network_forward(params, Tensor(np.zeros((1, 8, 8, 10))))


def test_forward_deterministic():
    params = build_network(TINY, seed=3)
    x = np.random.default_rng(1).normal(size=(1, 8, 8, 8))
    a = network_forward(params, Tensor(x)).data
    b = network_forward(params, Tensor(x)).data
    assert np.array_equal(a, b)


def test_residual_block_is_pre_activation():
    # zero second conv -> exact identity regardless of the first conv
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 6, 6, 6)))
    k1 = Tensor(rng.normal(size=(4, 4, 3, 3, 3)))
    b1 = Tensor(np.zeros(4))
    k2 = Tensor(np.zeros((4, 4, 3, 3, 3)))
    b2 = Tensor(np.zeros(4))
    out = residual_block(x, k1, b1, k2, b2, padding=1)
    assert np.array_equal(out.data, x.data)

    # all-negative input dies in the leading relu, so any kernels give identity
    xneg = Tensor(-np.abs(rng.normal(size=(4, 6, 6, 6))) - 0.1)
    k2r = Tensor(rng.normal(size=(4, 4, 3, 3, 3)))
    out2 = residual_block(xneg, k1, b1, k2r, b2, padding=1)
    assert np.array_equal(out2.data, xneg.data)


def test_residual_block_channel_mismatch():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)))
    k = Tensor(rng.normal(size=(4, 4, 3, 3, 3)))
    b = Tensor(np.zeros(4))
    with pytest.raises(ValueError, match="3 channels"):
        residual_block(x, k, b, k, b, padding=1)


def test_forward_gradient_spot_check():
    # tiny net, a handful of coordinates; the exhaustive check lives in the
    # acceptance suite
    from volseg.tensor import Tape, backward, tensor_mean

    cfg = NetworkConfig(num_classes=2, base_width=2, num_res_blocks=1)
    params = build_network(cfg, seed=7)
    x = np.random.default_rng(8).normal(size=(1, 4, 4, 4))

    def loss_fn():
        out = network_forward(params, Tensor(x))
        return tensor_mean(out)

    tape = Tape()
    with tape:
        loss = loss_fn()
    backward(loss, tape)

    rng = np.random.default_rng(9)
    for name in ("stem.kernel", "block00.conv1.kernel", "up1.kernel", "head.bias"):
        t = params.tensors[name]
        flat_idx = rng.integers(t.size, size=3)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), t.shape)
            num = numeric_grad_at(lambda: loss_fn().item(), t.data, idx)
            got = t.grad[idx]
            assert abs(got - num) <= max(1e-6 * max(abs(num), abs(got)), 1e-8), name


def test_clone_is_independent():
    params = build_network(TINY, seed=0)
    dup = params.clone()
    dup.tensors["stem.kernel"].data += 1.0
    assert not np.array_equal(dup.tensors["stem.kernel"].data, params.tensors["stem.kernel"].data)


def test_model_params_missing_tensor_rejected():
    params = build_network(TINY, seed=0)
    broken = dict(params.tensors)
    del broken["head.bias"]
    with pytest.raises(ValueError, match="head.bias"):
        ModelParams(TINY, broken)


def test_config_validation():
    with pytest.raises(ValueError, match="odd"):
        NetworkConfig(kernel_size=4)
    with pytest.raises(ValueError, match="num_classes"):
        NetworkConfig(num_classes=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = build_network(TINY, seed=11)
    path = tmp_path / "net.ckpt"
    save_checkpoint(params, path, extra={"note": "round-trip", "step": 12})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "round-trip", "step": 12}
    assert loaded.config == params.config
    assert loaded.names == params.names
    for name in params.names:
        assert loaded.tensors[name].data.tobytes() == params.tensors[name].data.tobytes()


def test_checkpoint_save_is_deterministic(tmp_path):
    params = build_network(TINY, seed=11)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(params, p1)
    save_checkpoint(params, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(FormatVersionError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    params = build_network(TINY, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(params, path)
    blob = path.read_bytes()
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(blob[:-16])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(clipped)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    params = build_network(TINY, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(params, path)
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(PayloadSizeError, match="trailing"):
        load_checkpoint(padded)


def test_checkpoint_rejects_future_version(tmp_path):
    params = build_network(TINY, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(params, path)
    blob = bytearray(path.read_bytes())
    # bump the version digit inside the JSON manifest
    marker = b'"format_version":1'
    pos = blob.find(marker)
    assert pos > 0
    blob[pos : pos + len(marker)] = b'"format_version":9'
    bad = tmp_path / "future.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(FormatVersionError, match="format_version"):
        load_checkpoint(bad)
