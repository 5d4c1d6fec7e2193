import struct

import numpy as np
import pytest

from helpers import REL_TOL, numeric_grad, rel_error
from rankdisc.losses import cross_entropy, cross_entropy_grad_logits
from rankdisc.model import (
    BackboneConfig, CheckpointError, Head, IncompatibleCheckpointError, Model, decode_checkpoint,
    encode_checkpoint, extend_head, load_checkpoint, predict_unlabelled, save_checkpoint,
)
from rankdisc.ndcore import DimensionError, relu

SMALL = BackboneConfig(input_dims=(1, 4, 4), layer_widths=(12, 10, 8), macro_blocks=(2, 1))


def _model(seed=0):
    m = Model.create(SMALL, seed)
    m.add_head("labelled", 3)
    m.add_head("unlabelled", 2)
    m.meta["config_digest"] = "abc"
    return m


def test_backbone_config_validation_collects_problems():
    with pytest.raises(ValueError) as info:
        BackboneConfig(input_dims=(1, 4), layer_widths=(8, 1), macro_blocks=(3,))
    msg = str(info.value)
    assert "input_dims" in msg and "partition" in msg and "feature_dim" in msg


def test_block_grouping():
    assert SMALL.block_of_layer() == [0, 0, 1]
    assert SMALL.n_blocks == 2 and SMALL.feature_dim == 8 and SMALL.input_size == 16


def test_features_are_nonnegative_and_shape_checked():
    m = _model()
    z = m.features(np.random.default_rng(0).random((5, 1, 4, 4)))
    assert z.shape == (5, 8) and (z >= 0).all()
    with pytest.raises(DimensionError):
        m.backbone.forward(np.zeros((2, 15)))


def test_end_to_end_gradient_through_backbone_and_head():
    # kink exclusion: inputs whose perturbation flips any ReLU are skipped
    rng = np.random.default_rng(1)
    checked = 0
    for trial in range(50):
        m = _model(trial)
        head = m.heads["labelled"]
        x = rng.random((4, 16))
        y = rng.integers(0, 3, size=4)

        def loss():
            return cross_entropy(head.forward(m.backbone.forward(x, cache=False)), y)

        z = m.backbone.forward(x)
        probs = head.forward(z, cache=True)
        m.backbone.backward(head.backward(cross_entropy_grad_logits(probs, y)))
        pre = [np.abs(a).min() for a in m.backbone._pre]
        if min(pre) < 1e-4:
            continue
        w = m.backbone.layers[0].weight
        assert rel_error(w.grad, numeric_grad(loss, w.value)) < REL_TOL
        assert rel_error(head.weight.grad, numeric_grad(loss, head.weight.value)) < REL_TOL
        checked += 1
    assert checked >= 40


def test_freeze_contract_and_backward_stops_early():
    m = _model()
    m.backbone.freeze_blocks([0])
    assert m.backbone.frozen_blocks() == [0]
    x = np.random.default_rng(0).random((3, 16))
    m.backbone.forward(x)
    m.backbone.backward(np.ones((3, 8)))
    assert all(not p.grad.any() for p in m.backbone.block_parameters(0))
    assert any(p.grad.any() for p in m.backbone.block_parameters(1))
    m.backbone.freeze_blocks([])
    assert m.backbone.frozen_blocks() == []


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = _model()
    m.backbone.freeze_blocks([0])
    m.rng.random(3)
    m.meta["stages"] = ["selfsup"]
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path, expected_digest="abc")
    for (n1, p1), (n2, p2) in zip(m.named_tensors(), back.named_tensors()):
        assert n1 == n2 and p1.frozen == p2.frozen
        assert p1.value.tobytes() == p2.value.tobytes()
    assert back.meta == m.meta
    assert encode_checkpoint(back) == path.read_bytes()
    assert back.rng.random() == m.rng.random()


def test_checkpoint_layout():
    buf = encode_checkpoint(_model())
    assert buf[:8] == b"RKDSCKPT"
    version, head_len = struct.unpack("<HI", buf[8:14])
    assert version == 1 and buf[14:15] == b"{" and buf[14 + head_len - 1:14 + head_len] == b"}"


@pytest.mark.parametrize("cut", [0, 5, 13, 40, -100, -4, -1])
def test_truncated_checkpoint_reports_offset(cut):
    buf = encode_checkpoint(_model())
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(buf[:cut])
    assert "offset" in str(info.value) and 0 <= info.value.offset <= len(buf)


def test_checkpoint_corruption_detected():
    buf = bytearray(encode_checkpoint(_model()))
    buf[-20] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC") as info:
        decode_checkpoint(bytes(buf))
    assert info.value.offset == len(buf) - 4
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + bytes(buf[8:]))
    bad_version = bytes(buf[:8]) + struct.pack("<H", 9) + bytes(buf[10:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bad_version)


def test_config_digest_mismatch():
    with pytest.raises(IncompatibleCheckpointError, match="abc"):
        decode_checkpoint(encode_checkpoint(_model()), expected_digest="other")


def test_extend_head_preserves_old_columns_and_argmax():
    rng = np.random.default_rng(0)
    head = Head.init("labelled", 8, 3, rng)
    head.bias.value[:] = rng.normal(size=3)
    ext = extend_head(head, 2, rng)
    assert ext.kind == "incremental" and ext.out == 5
    assert ext.weight.value[:, :3].tobytes() == head.weight.value.tobytes()
    assert ext.bias.value[:3].tobytes() == head.bias.value.tobytes()
    assert not ext.bias.value[3:].any()
    z = relu(rng.normal(size=(50, 8)))
    np.testing.assert_array_equal(ext.forward(z)[:, :3].argmax(1), head.forward(z).argmax(1))


def test_extend_head_rejects_bad_requests():
    rng = np.random.default_rng(0)
    head = Head.init("labelled", 4, 2, rng)
    with pytest.raises(ValueError):
        extend_head(head, 0, rng)
    with pytest.raises(ValueError):
        extend_head(Head.init("unlabelled", 4, 2, rng), 1, rng)
    with pytest.raises(ValueError):
        Head.init("mystery", 4, 2, rng)


def test_predict_unlabelled_slices():
    rng = np.random.default_rng(0)
    head = Head.init("unlabelled", 4, 3, rng)
    z = rng.random((6, 4))
    assert predict_unlabelled(head, z).tolist() == head.forward(z).argmax(1).tolist()
    assert np.ndim(predict_unlabelled(head, z[0])) == 0
    ext = extend_head(Head.init("labelled", 4, 2, rng), 3, rng)
    pred = predict_unlabelled(ext, z, n_new=3)
    assert pred.tolist() == ext.forward(z)[:, 2:].argmax(1).tolist()
    with pytest.raises(ValueError):
        predict_unlabelled(ext, z)
    with pytest.raises(ValueError):
        predict_unlabelled(Head.init("rotation", 4, 4, rng), z)
