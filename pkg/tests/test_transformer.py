import numpy as np
import pytest

from stnet.config import NetConfig
from stnet.numerics import (InputError, layer_norm, linear_forward, make_rng,
                            relu, tree_arrays, tree_map)
from stnet.transformer import (CheckpointError, Detection, NetParams,
                               decoder_forward, encoder_forward, ffn_forward,
                               init_net, init_self_attention, init_stem,
                               load_checkpoint, net_forward,
                               read_checkpoint_tensors, save_checkpoint,
                               self_attention, stem_forward)
from stnet.verification import oracle_self_attention, toy_net_config


def small_cfg(**kw):
    base = dict(frames=2, levels=2, channels=8, heads=2, points=2,
                enc_layers=1, dec_layers=1, num_queries=4, ffn_dim=16,
                num_classes=2)
    base.update(kw)
    return NetConfig(**base)


def random_pyramids(rng, cfg, dims):
    return [[rng.standard_normal((cfg.channels, h, w)) for h, w in dims]
            for _ in range(cfg.frames)]


# ---------------------------------------------------------------------------
# conv stem

def test_stem_output_shapes():
    rng = make_rng(40)
    stem = init_stem(rng, levels=2, channels=32)
    maps, _ = stem_forward(stem, np.zeros((1, 64, 64), dtype=np.float32))
    assert [m.shape for m in maps] == [(32, 16, 16), (32, 8, 8)]


def test_stem_zero_input_zero_output():
    rng = make_rng(41)
    stem = init_stem(rng, levels=2, channels=8)
    maps, _ = stem_forward(stem, np.zeros((1, 32, 32)))
    for m in maps:
        assert np.all(m == 0)  # biases start at zero


def test_stem_rejects_indivisible_dims():
    rng = make_rng(42)
    stem = init_stem(rng, levels=2, channels=8)
    with pytest.raises(InputError):
        stem_forward(stem, np.zeros((1, 60, 64)))


def test_stem_random_input_finite():
    rng = make_rng(43)
    stem = init_stem(rng, levels=3, channels=8)
    maps, _ = stem_forward(stem, rng.standard_normal((1, 32, 32)))
    assert [m.shape for m in maps] == [(8, 8, 8), (8, 4, 4), (8, 2, 2)]
    assert all(np.isfinite(m).all() for m in maps)


# ---------------------------------------------------------------------------
# self-attention

def test_self_attention_single_row():
    rng = make_rng(44)
    params = init_self_attention(rng, 6, 2, np.float64)
    x = rng.standard_normal((1, 6))
    got, _ = self_attention(params, x)
    want = linear_forward(params.out_proj, linear_forward(params.v_proj, x))
    assert np.abs(got - want).max() < 1e-12


def test_self_attention_identical_rows_identical_outputs():
    rng = make_rng(45)
    params = init_self_attention(rng, 6, 2, np.float64)
    x = np.tile(rng.standard_normal((1, 6)), (4, 1))
    got, _ = self_attention(params, x)
    assert np.abs(got - got[0]).max() < 1e-12


def test_self_attention_matches_direct_oracle():
    rng = make_rng(46)
    params = init_self_attention(rng, 8, 2, np.float64)
    x = rng.standard_normal((5, 8))
    got, _ = self_attention(params, x)
    assert np.abs(got - oracle_self_attention(params, x)).max() < 1e-10


def test_self_attention_rejects_bad_heads():
    rng = make_rng(47)
    with pytest.raises(InputError):
        init_self_attention(rng, 7, 2)


# ---------------------------------------------------------------------------
# encoder

def test_encoder_zero_layers_is_identity():
    rng = make_rng(48)
    cfg = small_cfg(enc_layers=0)
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    out, _ = encoder_forward(cfg, net, pyramids)
    for t in range(cfg.frames):
        for l in range(cfg.levels):
            assert np.array_equal(out[t][l], pyramids[t][l])


def test_encoder_zeroed_stda_matches_hand_composition():
    rng = make_rng(49)
    cfg = small_cfg(enc_layers=1)
    net = init_net(cfg, rng, np.float64)
    layer = net.encoder[0]
    for _, arr in tree_arrays(layer.stda):
        arr[...] = 0
    beta = rng.standard_normal(cfg.channels)
    layer.stda.output_proj.bias[...] = beta
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    out, _ = encoder_forward(cfg, net, pyramids)

    # hand-composed: per pixel row x -> LN(x + beta) -> LN(y + FFN(y))
    for t in range(cfg.frames):
        for l in range(cfg.levels):
            c, h, w = pyramids[t][l].shape
            rows = pyramids[t][l].transpose(1, 2, 0).reshape(-1, c)
            y1 = layer_norm(rows + beta, layer.norm1.gain, layer.norm1.shift)
            hidden = relu(y1 @ layer.ffn.lin1.weight.T + layer.ffn.lin1.bias)
            f = hidden @ layer.ffn.lin2.weight.T + layer.ffn.lin2.bias
            y2 = layer_norm(y1 + f, layer.norm2.gain, layer.norm2.shift)
            want = y2.reshape(h, w, c).transpose(2, 0, 1)
            assert np.abs(out[t][l] - want).max() < 1e-10


def test_encoder_preserves_shapes_and_finiteness():
    rng = make_rng(50)
    cfg = small_cfg(enc_layers=2)
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 6), (2, 3)])
    out, _ = encoder_forward(cfg, net, pyramids)
    for t in range(cfg.frames):
        for l in range(cfg.levels):
            assert out[t][l].shape == pyramids[t][l].shape
            assert np.isfinite(out[t][l]).all()


def test_encoder_rejects_frame_count_mismatch():
    rng = make_rng(51)
    cfg = small_cfg()
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    with pytest.raises(InputError):
        encoder_forward(cfg, net, pyramids[:1])


# ---------------------------------------------------------------------------
# decoder and heads

def test_decoder_zero_layers_heads_on_raw_queries():
    rng = make_rng(52)
    cfg = small_cfg(dec_layers=0)
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    det, _ = decoder_forward(cfg, net, pyramids)
    assert det.class_logits.shape == (cfg.num_queries, cfg.num_classes + 1)
    assert det.boxes.shape == (cfg.num_queries, 4)
    assert np.all((det.boxes > 0) & (det.boxes < 1))
    want_logits = linear_forward(net.class_head, net.query_embed)
    assert np.array_equal(det.class_logits, want_logits)


def test_decoder_single_query_shapes():
    rng = make_rng(53)
    cfg = small_cfg(num_queries=1)
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    det, _ = decoder_forward(cfg, net, pyramids)
    assert det.class_logits.shape == (1, 3)
    assert det.boxes.shape == (1, 4)


def test_boxes_sigmoid_bounded_for_any_params():
    rng = make_rng(54)
    cfg = small_cfg()
    for trial in range(5):
        net = init_net(cfg, make_rng(54, trial), np.float64)
        net = tree_map(lambda a: 10.0 * make_rng(55, trial).standard_normal(a.shape), net)
        pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
        det, _ = decoder_forward(cfg, net, pyramids)
        assert np.all((det.boxes > 0) & (det.boxes < 1))


def test_decoder_rejects_query_mismatch():
    rng = make_rng(56)
    cfg = small_cfg()
    net = init_net(cfg, rng, np.float64)
    pyramids = random_pyramids(rng, cfg, [(4, 4), (2, 2)])
    with pytest.raises(InputError):
        decoder_forward(cfg, net, pyramids, queries=np.zeros((3, cfg.channels)))


# ---------------------------------------------------------------------------
# whole net

def test_net_forward_deterministic():
    rng = make_rng(57)
    cfg = toy_net_config()
    net = init_net(cfg, rng, np.float64)
    frames = [rng.standard_normal((1, 16, 16)) for _ in range(cfg.frames)]
    det1, _ = net_forward(cfg, net, frames)
    det2, _ = net_forward(cfg, net, frames)
    assert np.array_equal(det1.class_logits, det2.class_logits)
    assert np.array_equal(det1.boxes, det2.boxes)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = make_rng(58)
    cfg = small_cfg()
    net = init_net(cfg, rng, np.float32)
    path = str(tmp_path / "net.stn1")
    save_checkpoint(path, net)
    other = init_net(cfg, make_rng(59), np.float32)
    load_checkpoint(path, other)
    for (na, a), (nb, b) in zip(tree_arrays(net), tree_arrays(other), strict=True):
        assert na == nb
        assert np.array_equal(a, b)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.stn1"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint_tensors(str(path))


def test_checkpoint_rejects_truncation(tmp_path):
    rng = make_rng(60)
    cfg = small_cfg()
    net = init_net(cfg, rng, np.float32)
    path = tmp_path / "net.stn1"
    save_checkpoint(str(path), net)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint_tensors(str(path))


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    rng = make_rng(61)
    path = str(tmp_path / "net.stn1")
    save_checkpoint(path, init_net(small_cfg(), rng, np.float32))
    other = init_net(small_cfg(channels=16), make_rng(62), np.float32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
