import numpy as np
import pytest

from _gradcheck import check
from auxfas import face_model as fm
from auxfas import net, tensor as tn, trainer
from auxfas.net import NetConfig
from auxfas.tensor import Tensor

TINY = dict(block_channels=(2, 2, 3, 2), lstm_hidden=4)


@pytest.fixture(scope="module")
def basis():
    return fm.procedural_basis(40, n_id=3, n_exp=2, seed=0)


@pytest.fixture(scope="module")
def vmap(basis):
    return fm.build_vertex_index_map(basis)


def _zero(p):
    for t in p.tensors().values():
        t.data[...] = 0.0
    return p


# -- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(concat_size=24, map_size=32)
    with pytest.raises(ValueError):
        NetConfig(fc_out=60)
    with pytest.raises(ValueError):
        NetConfig(head="mask")
    assert NetConfig.scaled(8).block_channels == (8, 16, 24, 16)


# -- cnn --------------------------------------------------------------------

@pytest.mark.parametrize("size", [16, 32, 64])
def test_cnn_output_shapes(size):
    cfg = NetConfig(**TINY)
    p = trainer.init_params(cfg, 0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, size, size)))
    out = net.cnn_forward(x, p, cfg)
    assert out.depth.shape == (2, 32, 32) and out.feature.shape == (2, 32, 32)


def test_cnn_zero_weights():
    cfg = NetConfig(**TINY)
    p = _zero(trainer.init_params(cfg, 0))
    out = net.cnn_forward(Tensor(np.random.default_rng(1).uniform(size=(2, 3, 16, 16))), p, cfg, training=True)
    assert np.all(out.depth.data == 0) and np.all(out.feature.data == 0)


def test_cnn_rejects_non_square():
    cfg = NetConfig(**TINY)
    with pytest.raises(tn.ShapeError):
        net.cnn_forward(Tensor(np.zeros((1, 3, 16, 20))), trainer.init_params(cfg, 0), cfg)


def _param_fn(cfg, p, names, body):
    def fn(*leaves):
        q = p.copy()
        for name, leaf in zip(names, leaves):
            q.cnn[name] = leaf
        return body(q)
    return fn


def test_cnn_gradient_check():
    cfg = NetConfig(**TINY)
    p = trainer.init_params(cfg, 3, std=0.5)
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(2, 3, 16, 16))
    target = rng.uniform(size=(2, 32, 32))
    names = ["stem.w", "block1.1.w", "block2.2.bn.g", "depth.0.w", "depth.2.w", "feat.1.b"]

    def body(q):
        out = net.cnn_forward(Tensor(x), q, cfg, training=True)
        return tn.add(net.depth_loss(out.depth, target, squared=True),
                      tn.mean(tn.mul(out.feature, out.feature)))

    fn = _param_fn(cfg, p, names, body)
    err = check(fn, [p.cnn[n].data for n in names], max_coords=12, rng=rng)
    assert err < 1e-4


def test_binary_head_gradient_check():
    cfg = NetConfig(head="binary", **TINY)
    p = trainer.init_params(cfg, 3, std=0.5)
    x = np.random.default_rng(5).uniform(size=(3, 3, 16, 16))
    names = ["stem.w", "cls.w"]

    def body(q):
        return net.binary_loss(net.cnn_forward(Tensor(x), q, cfg, training=True).logits, [1, 0, 1])

    assert check(_param_fn(cfg, p, names, body), [p.cnn[n].data for n in names], max_coords=10) < 1e-4


# -- registration -----------------------------------------------------------

def _canonical(basis, size=32):
    return fm.pose_transform(basis.mean, fm.canonical_pose(size, size))


def test_registration_below_threshold_is_zero(basis, vmap):
    feat = Tensor(np.random.default_rng(0).normal(size=(32, 32)))
    out = net.registration_layer(feat, Tensor(np.full((32, 32), 0.05)), _canonical(basis), vmap, 32, 32)
    assert np.all(out.data == 0)


def test_registration_canonical_matches_index_oracle(basis, vmap):
    feat = np.random.default_rng(1).normal(size=(32, 32))
    shape = _canonical(basis)
    out = net.registration_layer(Tensor(feat), Tensor(np.full((32, 32), 0.5)), shape, vmap, 32, 32).data
    ref = np.zeros((32, 32))
    for i in range(32):
        for j in range(32):
            v = vmap.m[i, j]
            if v != fm.NONE:
                ref[i, j] = feat[int(np.floor(shape[1, v])), int(np.floor(shape[0, v]))]
    assert np.array_equal(out, ref)
    # the canonical pose samples every face pixel from itself
    assert np.array_equal(out[vmap.valid], feat[vmap.valid])
    assert np.all(out[~vmap.valid] == 0)


def test_registration_scales_image_coordinates(basis, vmap):
    feat = np.random.default_rng(2).normal(size=(32, 32))
    small = net.registration_layer(Tensor(feat), Tensor(np.ones((32, 32))), _canonical(basis, 32), vmap, 32, 32)
    big = net.registration_layer(Tensor(feat), Tensor(np.ones((32, 32))), _canonical(basis, 64), vmap, 64, 64)
    assert np.array_equal(small.data, big.data)


def test_registration_quarter_turn(basis, vmap):
    feat = np.random.default_rng(3).normal(size=(32, 32))
    depth = np.full((32, 32), 0.5)
    shape = _canonical(basis)
    c = np.array([[16.0], [16.0], [0.0]])
    turned = fm.rotation(roll=np.pi / 2) @ (shape - c) + c
    ref = net.registration_layer(Tensor(feat), Tensor(depth), shape, vmap, 32, 32).data
    out = net.registration_layer(Tensor(np.rot90(feat, -1).copy()), Tensor(depth), turned, vmap, 32, 32).data
    assert np.array_equal(out, ref)


def test_registration_values_come_from_masked_map(basis, vmap):
    rng = np.random.default_rng(4)
    feat = rng.normal(size=(32, 32))
    depth = rng.uniform(size=(32, 32))
    shape = fm.pose_transform(basis.mean, fm.Pose(11.0, fm.rotation(0.3, 0.1, -0.2), [15, 17, 0]))
    out = net.registration_layer(Tensor(feat), Tensor(depth), shape, vmap, 32, 32).data
    allowed = set((feat * (depth >= 0.1)).ravel()) | {0.0}
    assert set(out.ravel()) <= allowed


def test_registration_gradient_blocks_mask(basis, vmap):
    rng = np.random.default_rng(5)
    feat = Tensor(rng.normal(size=(32, 32)), requires_grad=True)
    depth = Tensor(rng.uniform(size=(32, 32)), requires_grad=True)
    out = net.registration_layer(feat, depth, _canonical(basis), vmap, 32, 32)
    tn.tsum(out).backward()
    assert depth.grad is None or np.all(depth.grad == 0)
    assert np.all(feat.grad[depth.data < 0.1] == 0)
    assert np.all(feat.grad[vmap.valid & (depth.data >= 0.1)] == 1)


# -- rnn --------------------------------------------------------------------

def test_rnn_zero_weights_and_length():
    cfg = NetConfig(map_size=8, **TINY)
    p = _zero(trainer.init_params(cfg, 0))
    for nf in (1, 3, 5):
        seq = Tensor(np.random.default_rng(nf).normal(size=(2, nf, 8, 8)))
        out = net.rnn_forward(seq, p, cfg)
        assert out.shape == (2, 50) and np.all(out.data == 0)


def test_rnn_empty_sequence():
    cfg = NetConfig(map_size=8, **TINY)
    with pytest.raises(tn.ShapeError):
        net.rnn_forward(Tensor(np.zeros((1, 0, 8, 8))), trainer.init_params(cfg, 0), cfg)


def test_rnn_gradient_check():
    cfg = NetConfig(map_size=8, **TINY)
    p = trainer.init_params(cfg, 6, std=0.3)
    rng = np.random.default_rng(6)
    seq = rng.normal(size=(2, 3, 8, 8))
    target = np.abs(rng.normal(size=(2, 50)))
    names = ["lstm.wx", "lstm.wh", "lstm.b", "fc.w", "fc.b"]

    def fn(x, *leaves):
        q = p.copy()
        q.rnn.update(zip(names, leaves))
        return net.rppg_loss(net.rnn_forward(x, q, cfg), target, squared=True)

    err = check(fn, [seq] + [p.rnn[n].data for n in names], max_coords=15, rng=rng)
    assert err < 1e-4


# -- losses and score ---------------------------------------------------------

def test_depth_loss_examples():
    d = np.random.default_rng(0).uniform(size=(3, 32, 32))
    assert net.depth_loss(Tensor(d), d).data == 0
    assert net.depth_loss(Tensor(np.zeros((2, 4, 4))), np.ones((2, 4, 4))).data == 1.0
    e = np.random.default_rng(1).uniform(size=(3, 32, 32))
    assert net.depth_loss(Tensor(d), e).data == pytest.approx(net.depth_loss(Tensor(e), d).data)
    with pytest.raises(tn.ShapeError):
        net.depth_loss(Tensor(d), e[:2])


def test_rppg_loss_examples():
    f = np.zeros((1, 50))
    f[0, 7] = 1.0
    assert net.rppg_loss(Tensor(f), f).data == 0
    assert net.rppg_loss(Tensor(np.zeros((1, 50))), f).data == pytest.approx(1 / 50)
    rng = np.random.default_rng(2)
    assert net.rppg_loss(Tensor(rng.normal(size=(4, 50))), rng.normal(size=(4, 50))).data >= 0


def test_squared_l1_switch():
    pred = Tensor(np.zeros((2, 2, 2)))
    target = np.stack([np.ones((2, 2)), 3 * np.ones((2, 2))])
    assert net.depth_loss(pred, target).data == 2.0
    assert net.depth_loss(pred, target, squared=True).data == 5.0


def test_score_examples():
    assert net.score(np.zeros((32, 32)), np.zeros(50), 0.015) == 0.0
    d = np.zeros((32, 32))
    d[0, 0] = 1.0
    f = np.zeros(50)
    f[3] = 1.0
    assert net.score(d, f, 0.015) == pytest.approx(1.015)
    f2 = np.random.default_rng(0).normal(size=50)
    gain = net.score(d, 2 * f2, 0.015) - net.score(d, f2, 0.015)
    assert gain == pytest.approx(3 * np.sum(f2 ** 2))
    with pytest.raises(ValueError):
        net.score(d, f, -1.0)


def test_score_monotone_and_ranking_invariance():
    rng = np.random.default_rng(3)
    d, f = rng.normal(size=(32, 32)), rng.normal(size=50)
    assert net.score(1.5 * d, f, 0.015) >= net.score(d, f, 0.015)
    assert net.score(d, 1.5 * f, 0.015) >= net.score(d, f, 0.015)
    depths = [rng.normal(size=(32, 32)) for _ in range(6)]
    zero = np.zeros(50)
    rank = np.argsort([net.score(x, zero, 0.015) for x in depths])
    assert np.array_equal(rank, np.argsort([net.score(x, zero, 4.0) for x in depths]))


# -- clip inference -----------------------------------------------------------

def test_infer_clip_zero_model_and_determinism(small_clips):
    cfg = NetConfig(**TINY)
    vm = fm.build_vertex_index_map(small_clips[0].basis)
    clip = small_clips[0]
    shapes = clip.posed_shapes()
    zero = _zero(trainer.init_params(cfg, 0))
    assert net.infer_clip(clip.frames, shapes, zero, cfg, vm).score == 0.0
    p = trainer.init_params(cfg, 1, std=0.3)
    a = net.infer_clip(clip.frames, shapes, p, cfg, vm)
    b = net.infer_clip(clip.frames, shapes, p, cfg, vm)
    assert a.score == b.score and a.frontal.shape == (5, 32, 32) and a.rppg.shape == (50,)
    with pytest.raises(ValueError):
        net.infer_clip(clip.frames[:3], shapes[:3], p, cfg, vm)


def test_infer_clip_zero_depth_gives_zero_spectrum(small_clips):
    cfg = NetConfig(**TINY)
    vm = fm.build_vertex_index_map(small_clips[0].basis)
    p = trainer.init_params(cfg, 1, std=0.3)
    for name in ("depth.2.w", "depth.2.b"):
        p.cnn[name].data[...] = 0.0
    for name in ("lstm.b", "fc.b"):
        p.rnn[name].data[...] = 0.0
    clip = small_clips[0]
    out = net.infer_clip(clip.frames, clip.posed_shapes(), p, cfg, vm)
    assert np.all(out.frontal == 0) and np.all(out.rppg == 0)
