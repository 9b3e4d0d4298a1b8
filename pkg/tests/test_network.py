import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from regfree_sr.nn import (
    Discriminator,
    DiscriminatorConfig,
    FeatureConfig,
    FeatureExtractor,
    Generator,
    GeneratorConfig,
    NetworkParams,
    load_checkpoint,
    save_checkpoint,
)
from regfree_sr.nn import layers as L
from regfree_sr.nn.checkpoint import CheckpointError, read_container, write_container


def naive_generator(G, x):
    """Eval-mode generator forward built from the loop oracles."""
    p, b = G.params, G.buffers

    def conv(name, h):
        return oracles.conv2d_same(h, p[f"{name}/w"], p[f"{name}/b"])

    def bn(name, h):
        return p[f"{name}/gamma"] * (h - b[f"{name}/mean"]) / np.sqrt(b[f"{name}/var"] + 1e-5) + p[f"{name}/beta"]

    h = np.maximum(conv("head", x), 0)
    skip = h
    for i in range(G.config.n_res_blocks):
        y = np.maximum(bn(f"res{i}/bn1", conv(f"res{i}/conv1", h)), 0)
        h = h + bn(f"res{i}/bn2", conv(f"res{i}/conv2", y))
    h = h + skip
    for k in range(G.config.n_stages):
        h = np.maximum(oracles.shuffle(conv(f"up{k}", h), 2), 0)
    return conv("tail", h)


def _randomize_buffers(net, seed):
    rng = np.random.default_rng(seed)
    for k in net.buffers:
        net.buffers[k][:] = rng.random(net.buffers[k].shape) + (0.5 if k.endswith("var") else -0.5)
    for k in net.params:
        if "bn" in k:
            net.params[k][:] = rng.standard_normal(net.params[k].shape)


# --- generator ------------------------------------------------------------------


def test_generator_shape_full_scale():
    G = Generator(GeneratorConfig(n_res_blocks=1, n_features=8, upscale=4))
    x = np.random.default_rng(0).random((1, 96, 96, 1), dtype=np.float32)
    assert G(x).shape == (1, 384, 384, 1)


@settings(max_examples=10)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))
def test_generator_shape_contract(r, h, w, c):
    G = Generator(GeneratorConfig(n_res_blocks=1, n_features=4, upscale=r, channels=c))
    out = G(np.zeros((2, h, w, c), np.float32))
    assert out.shape == (2, r * h, r * w, c)


def test_generator_config_validation():
    for bad in (dict(upscale=3), dict(n_res_blocks=0), dict(channels=2), dict(tail_init="x"), dict(bn_momentum=1.0)):
        with pytest.raises(ValueError):
            GeneratorConfig(**bad)


def test_generator_matches_loop_oracle():
    # hand-traced toy: 1 block, 2 features, 2x2 input, both x1 and x2 upscale
    for r in (1, 2):
        G = Generator(GeneratorConfig(n_res_blocks=1, n_features=2, upscale=r), seed=3, dtype=np.float64)
        _randomize_buffers(G, 4)
        x = np.array([[0.1, 0.7], [0.4, 0.9]]).reshape(1, 2, 2, 1)
        assert np.max(np.abs(G(x) - naive_generator(G, x))) < 1e-12


def test_generator_matches_loop_oracle_larger(rng):
    G = Generator(GeneratorConfig(n_res_blocks=2, n_features=4, upscale=4), seed=1, dtype=np.float64)
    _randomize_buffers(G, 2)
    x = rng.random((2, 5, 4, 1))
    assert np.max(np.abs(G(x) - naive_generator(G, x))) < 1e-10


def test_zero_tail_outputs_constant(rng):
    G = Generator(GeneratorConfig(1, 2, 2, tail_init="zero", tail_bias=0.375), seed=0, dtype=np.float64)
    out = G(rng.random((1, 2, 2, 1)))
    assert np.all(out == 0.375)
    # all other tensors are the same draws as the default init
    H = Generator(GeneratorConfig(1, 2, 2), seed=0, dtype=np.float64)
    assert all(np.array_equal(G.params[k], H.params[k]) for k in G.params if not k.startswith("tail"))


def test_generator_batch_independence_eval(rng):
    G = Generator(GeneratorConfig(2, 8, 2), seed=0)
    _randomize_buffers(G, 0)
    x = rng.random((2, 6, 6, 1), dtype=np.float32)
    both = G(x)
    sep = np.concatenate([G(x[:1]), G(x[1:])])
    assert np.max(np.abs(both - sep)) < 1e-5


def test_generator_train_mode_updates_stats(rng):
    G = Generator(GeneratorConfig(1, 4, 2), seed=0)
    before = {k: v.copy() for k, v in G.buffers.items()}
    G.forward(rng.random((2, 4, 4, 1), dtype=np.float32), train=True)
    assert any(not np.array_equal(before[k], G.buffers[k]) for k in before)
    G.forward(rng.random((2, 4, 4, 1), dtype=np.float32), train=False)
    snap = {k: v.copy() for k, v in G.buffers.items()}
    G.forward(rng.random((2, 4, 4, 1), dtype=np.float32), train=True, update_stats=False)
    assert all(np.array_equal(snap[k], G.buffers[k]) for k in snap)


def test_global_shortcut_doubles_gradient(rng):
    # Kill the residual branch (bn2 gamma = beta = 0): the body output is then
    # head + head, and the gradient reaching the head is twice the gradient at
    # the body output.
    G = Generator(GeneratorConfig(1, 4, 2), seed=0, dtype=np.float64)
    G.params["res0/bn2/gamma"][:] = 0
    G.params["res0/bn2/beta"][:] = 0
    x = rng.random((2, 4, 4, 1))
    out, caches = G.forward(x, train=True, update_stats=False)
    dout = rng.standard_normal(out.shape)
    grads, dx = G.backward(caches, dout)
    # by hand: back through tail, relu, shuffle, up-conv to the body output
    d, _, _ = L.conv2d_backward(dout, caches["tail"])
    d = L.relu_backward(d, caches["up0/relu"])
    d = L.subpixel_unshuffle(d, 2)
    d_body, _, _ = L.conv2d_backward(d, caches["up0"])
    d_head = L.relu_backward(2.0 * d_body, caches["head_relu"])
    want_dx, want_dw, want_db = L.conv2d_backward(d_head, caches["head"])
    assert np.allclose(grads["head/w"], want_dw, rtol=1e-12, atol=1e-14)
    assert np.allclose(grads["head/b"], want_db, rtol=1e-12, atol=1e-14)
    assert np.allclose(dx, want_dx, rtol=1e-12, atol=1e-14)


def test_zero_output_gradient_zero_param_grads(rng):
    G = Generator(GeneratorConfig(1, 4, 2), seed=0, dtype=np.float64)
    out, caches = G.forward(rng.random((2, 4, 4, 1)), train=True)
    grads, dx = G.backward(caches, np.zeros_like(out))
    assert set(grads) == set(G.params)
    assert all(not g.any() for g in grads.values()) and not dx.any()


def test_backward_without_forward():
    with pytest.raises(ValueError):
        Generator(GeneratorConfig(1, 2, 2)).backward({}, np.zeros((1, 4, 4, 1)))
    with pytest.raises(ValueError):
        Discriminator(DiscriminatorConfig(2, input_size=16)).backward({}, np.zeros(1))


# --- discriminator ------------------------------------------------------------------


def test_discriminator_default_trace():
    cfg = DiscriminatorConfig()
    assert cfg.features == [64, 128, 256, 512, 1024, 2048, 1024, 512]
    assert cfg.strides == [1, 2, 2, 2, 2, 2, 1, 1]
    assert cfg.spatial_trace() == [384, 384, 192, 96, 48, 24, 12, 12, 12]


def test_discriminator_structure():
    D = Discriminator(DiscriminatorConfig(base_features=2, input_size=32))
    assert "bn0/gamma" not in D.params and "bn1/gamma" in D.params
    assert D.params["conv1/w"].shape == (4, 4, 2, 4)
    assert D.params["res/conv0/w"].shape == (3, 3, 16, 16)
    assert D.params["dense/w"].shape == (1 * 1 * 16, 1)


def test_discriminator_trace_matches_forward():
    cfg = DiscriminatorConfig(base_features=2, input_size=96)
    D = Discriminator(cfg)
    _, caches = D.forward(np.zeros((1, 96, 96, 1), np.float32))
    side = cfg.spatial_trace()[-1]
    assert side == 3
    assert caches["dense"][0] == (1, side, side, 16)


def test_discriminator_outputs_probabilities(rng):
    D = Discriminator(DiscriminatorConfig(base_features=2, input_size=16))
    for scale in (1.0, 100.0, -100.0):
        p = D(scale * rng.standard_normal((3, 16, 16, 1)).astype(np.float32))
        assert p.shape == (3,) and np.all((p >= 0) & (p <= 1))
    x = rng.random((2, 16, 16, 1), dtype=np.float32)
    assert np.array_equal(D(x), D(x))
    assert 0 < D(x)[0] < 1


def test_discriminator_wrong_size():
    D = Discriminator(DiscriminatorConfig(base_features=2, input_size=16))
    with pytest.raises(ValueError):
        D(np.zeros((1, 15, 16, 1), np.float32))
    with pytest.raises(ValueError):
        D(np.zeros((1, 16, 16, 3), np.float32))


def test_discriminator_input_only_backward(rng):
    D = Discriminator(DiscriminatorConfig(base_features=2, input_size=16), dtype=np.float64)
    x = rng.random((2, 16, 16, 1))
    p, c = D.forward(x, train=True, update_stats=False)
    g_full, dx_full = D.backward(c, np.ones(2))
    g_in, dx_in = D.backward(c, np.ones(2), input_only=True)
    assert g_in == {} and set(g_full) == set(D.params)
    assert np.array_equal(dx_full, dx_in)


# --- feature extractor -----------------------------------------------------------------


def test_feature_layers_and_shape():
    F = FeatureExtractor(FeatureConfig(base_width=4))
    assert F.config.layer_names[-1] == "relu3_1"
    assert sum(n.startswith("pool") for n in F.config.layer_names) == 2
    out = F(np.zeros((2, 32, 24, 1), np.float32))
    assert out.shape == (2, 8, 6, 16)


def test_feature_deterministic(rng):
    x = rng.random((1, 16, 16, 1), dtype=np.float32)
    a = FeatureExtractor(FeatureConfig(base_width=2, seed=5))(x)
    b = FeatureExtractor(FeatureConfig(base_width=2, seed=5))(x)
    assert np.array_equal(a, b)


def _dependency_mask(layer_names, h, w, y0, x0):
    """Brute-force receptive field: which outputs can see input pixel (y0, x0)."""
    m = np.zeros((h, w), bool)
    m[y0, x0] = True
    for name in layer_names:
        if name.startswith("conv"):
            p = np.pad(m, 1)
            m = np.zeros_like(m)
            for dy in range(3):
                for dx in range(3):
                    m |= p[dy : dy + m.shape[0], dx : dx + m.shape[1]]
        elif name.startswith("pool"):
            m = m.reshape(m.shape[0] // 2, 2, m.shape[1] // 2, 2).any(axis=(1, 3))
    return m


def test_feature_receptive_field(rng):
    F = FeatureExtractor(FeatureConfig(base_width=16), dtype=np.float64)
    x = rng.random((1, 32, 32, 1))
    base = F(x)
    for y0, x0 in [(0, 0), (13, 20), (31, 5)]:
        x2 = x.copy()
        x2[0, y0, x0, 0] += 5.0
        changed = np.any(F(x2) != base, axis=(0, 3))
        allowed = _dependency_mask(F.config.layer_names, 32, 32, y0, x0)
        assert changed.any()
        assert not (changed & ~allowed).any()


def test_feature_weights_file(tmp_path, rng):
    cfg = FeatureConfig(base_width=2, layer_index=7)  # conv1_1 conv1_2 conv2_1
    ref = FeatureExtractor(cfg, dtype=np.float64)
    flat = np.concatenate([np.concatenate([ref.params[f"{n}/w"].ravel(), ref.params[f"{n}/b"]]) for n in ("conv1_1", "conv1_2", "conv2_1")])
    path = tmp_path / "w.bin"
    flat.astype("<f4").tofile(path)
    F = FeatureExtractor(FeatureConfig(base_width=2, layer_index=7, weights_path=str(path)), dtype=np.float64)
    for k in ref.params:
        assert np.array_equal(F.params[k], ref.params[k].astype(np.float32).astype(np.float64))


def test_feature_weights_rgb_file_on_gray_input(tmp_path, rng):
    # an RGB-trained first layer: grayscale input is replicated to 3 channels
    w1 = rng.standard_normal((3, 3, 3, 2)).astype("<f4")
    b1 = rng.standard_normal(2).astype("<f4")
    path = tmp_path / "rgb.bin"
    np.concatenate([w1.ravel(), b1]).tofile(path)
    F = FeatureExtractor(FeatureConfig(base_width=2, layer_index=1, weights_path=str(path)), dtype=np.float64)
    x = rng.random((1, 5, 5, 1))
    want = oracles.conv2d_same(np.repeat(x, 3, axis=3), w1.astype(np.float64), b1.astype(np.float64))
    assert np.max(np.abs(F(x) - want)) < 1e-12
    out, caches = F.forward(x)
    _, dx = F.backward(caches, np.ones_like(out))
    assert dx.shape == x.shape


def test_feature_weights_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        FeatureExtractor(FeatureConfig(weights_path=str(tmp_path / "none.bin")))
    np.zeros(5, "<f4").tofile(tmp_path / "short.bin")
    with pytest.raises(ValueError):
        FeatureExtractor(FeatureConfig(base_width=2, weights_path=str(tmp_path / "short.bin")))


# --- gradients of the full networks ------------------------------------------------------


def _net_fd(net, loss_and_grads, n=12, step=1e-5, tol=1e-5):
    ana = loss_and_grads()[1]
    for k, p in net.params.items():
        idxs = oracles.sample_indices(p.shape, n, seed=hash(k) % 1000)
        num = oracles.central_difference(lambda: loss_and_grads()[0], p, idxs, step)
        got = [ana[k][i] for i in idxs]
        # biases feeding BN have an exactly zero true gradient: compare absolutely
        assert oracles.relative_error(got, num) < tol or np.max(np.abs(np.subtract(got, num))) < 1e-8, k


def test_generator_gradients(rng):
    G = Generator(GeneratorConfig(1, 4, 2), seed=0, dtype=np.float64)
    x = rng.random((2, 4, 4, 1))
    R = rng.standard_normal((2, 8, 8, 1))

    def f():
        out, c = G.forward(x, train=True, update_stats=False)
        return float(np.sum(R * out)), G.backward(c, R)[0]

    _net_fd(G, f)


def test_discriminator_gradients(rng):
    D = Discriminator(DiscriminatorConfig(base_features=2, input_size=16), dtype=np.float64)
    x = rng.random((2, 16, 16, 1))

    def f():
        p, c = D.forward(x, train=True, update_stats=False)
        return float(np.sum(np.log(p))), D.backward(c, 1.0 / p)[0]

    _net_fd(D, f)


# --- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    G = Generator(GeneratorConfig(2, 4, 4), seed=1)
    D = Discriminator(DiscriminatorConfig(2, input_size=32), seed=1)
    _randomize_buffers(G, 1)
    nets = NetworkParams(G, D, FeatureConfig(base_width=2), state={"epoch": 3}, extra={"x/y": np.arange(3, dtype=np.float32)})
    save_checkpoint(tmp_path / "a.ckpt", nets)
    back = load_checkpoint(tmp_path / "a.ckpt")
    x = rng.random((2, 5, 5, 1), dtype=np.float32)
    assert np.array_equal(back.generator(x), G(x))
    assert back.generator.config == G.config
    assert back.discriminator.config == D.config
    assert back.state["epoch"] == 3
    assert np.array_equal(back.extra["x/y"], np.arange(3))
    y = rng.random((1, 32, 32, 1), dtype=np.float32)
    assert np.array_equal(back.discriminator(y), D(y))
    # saving again is byte-identical
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_container_layout(tmp_path):
    import json
    import struct

    write_container(tmp_path / "c.bin", {"k": 1}, {"t": np.array([[1.5, 2.0]], np.float32)})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"RFSRCKPT"
    version, hlen = struct.unpack("<II", raw[8:16])
    assert version == 1
    assert json.loads(raw[16 : 16 + hlen]) == {"k": 1}
    pos = 16 + hlen
    (n,) = struct.unpack("<I", raw[pos : pos + 4])
    (nl,) = struct.unpack("<H", raw[pos + 4 : pos + 6])
    assert n == 1 and raw[pos + 6 : pos + 6 + nl] == b"t"
    pos += 6 + nl
    assert raw[pos] == 2
    assert struct.unpack("<II", raw[pos + 1 : pos + 9]) == (1, 2)
    assert np.array_equal(np.frombuffer(raw[pos + 9 :], "<f4"), [1.5, 2.0])


def test_checkpoint_rejects_corruption(tmp_path):
    G = Generator(GeneratorConfig(1, 2, 2))
    save_checkpoint(tmp_path / "g.ckpt", NetworkParams(G, None, FeatureConfig(base_width=2)))
    raw = (tmp_path / "g.ckpt").read_bytes()
    (tmp_path / "bad1.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "bad2.ckpt").write_bytes(raw[:-3])
    for name in ("bad1.ckpt", "bad2.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
    header, tensors = read_container(tmp_path / "g.ckpt")
    tensors["generator/params/head/w"] = np.zeros((1, 1, 1, 1), np.float32)
    write_container(tmp_path / "bad3.ckpt", header, tensors)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad3.ckpt")
