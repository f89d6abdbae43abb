import numpy as np
import pytest

from a2net import autodiff as ad
from a2net import objectives as obj
from a2net.model import (A2Net, CheckpointError, ConfigError, ModelConfig, binarize, default_deconv_spec,
                         init_params)


def micro(**kw):
    base = dict(k=3, image_shape=(1, 8, 8), backbone_channels=[2], local_dim=2, global_dim=2,
                d_prime=3, transform_depth=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def images(n, shape, seed=0):
    return np.random.default_rng(seed).random((n,) + tuple(shape))


def test_default_config_shapes():
    cfg = ModelConfig()
    m = A2Net(cfg)
    fw = m.forward(images(2, cfg.image_shape))
    assert cfg.d == 12 * 8 + 16
    assert fw.A.shape == (2, 12, 4, 4)
    assert fw.X.shape == (2, cfg.d) and fw.V.shape == (2, 12)
    assert fw.Xp.shape == (2, cfg.d) and fw.G.shape == (2, cfg.d_prime)
    assert fw.I_g.shape == (2,) + cfg.image_shape == fw.I_gp.shape


def test_attention_maps_count_and_normalisation():
    m = A2Net(ModelConfig(k=12))
    T = m.backbone_forward(images(3, (3, 16, 16)))
    A = m.attention_maps(T)
    assert A.shape[1] == 12
    assert np.allclose(A.data.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_zero_image_gives_zero_activations_and_features():
    m = A2Net(ModelConfig())
    fw = m.forward(np.zeros((1, 3, 16, 16)))
    assert not fw.T.data.any() and not fw.X.data.any()
    assert not fw.I_g.data.any()  # zero g decodes to a zero image


def test_attend_broadcasts_over_channels():
    rng = np.random.default_rng(0)
    T = ad.Tensor(rng.random((2, 3, 4, 4)))
    A = ad.Tensor(rng.random((2, 5, 4, 4)))
    out = A2Net.attend(T, A).data
    assert out.shape == (2, 5, 3, 4, 4)
    assert np.allclose(out[1, 2, 0], T.data[1, 0] * A.data[1, 2])
    with pytest.raises(ad.ShapeError):
        A2Net.attend(T, ad.Tensor(rng.random((2, 5, 3, 3))))


def test_permuting_attention_permutes_local_blocks():
    cfg = ModelConfig(k=4)
    m = A2Net(cfg)
    T = m.backbone_forward(images(2, cfg.image_shape))
    A = m.attention_maps(T)
    perm = [2, 0, 3, 1]
    x = m.holistic_feature(T, A).data
    xp = m.holistic_feature(T, ad.Tensor(A.data[:, perm])).data
    L = cfg.local_dim
    blocks = x[:, :4 * L].reshape(2, 4, L)
    assert np.allclose(xp[:, :4 * L].reshape(2, 4, L), blocks[:, perm])
    assert np.allclose(xp[:, 4 * L:], x[:, 4 * L:])


def test_binarize_tie_rule():
    assert binarize(np.array([-0.5, 0.0, 2.0])).tolist() == [-1, 1, 1]
    assert set(np.unique(A2Net(ModelConfig()).encode(images(5, (3, 16, 16))))) <= {-1, 1}


def test_encode_is_batch_independent():
    m = A2Net(ModelConfig())
    x = images(7, (3, 16, 16))
    assert np.array_equal(m.encode(x, batch_size=3), np.concatenate([m.encode(x[i]) for i in range(7)]))


def test_basic_variant_has_no_decoder():
    m = A2Net(ModelConfig(variant="basic"))
    assert "W_prime" not in m.params
    fw = m.forward(images(1, (3, 16, 16)))
    assert fw.I_g is None and fw.Xp is not None


def test_default_deconv_spec_reaches_image_size():
    assert default_deconv_spec(8, (3, 16, 16)) == [[8, [4, 4], 16], [16, 4, 8], [8, 4, 3]]
    spec = default_deconv_spec(8, (3, 32, 32))
    assert len(spec) == 4 and spec[-1][2] == 3
    ModelConfig(image_shape=(3, 32, 32))  # validates the decoder chain


@pytest.mark.parametrize("bad", [
    dict(k=0),
    dict(d=7),
    dict(d_prime=10_000),
    dict(variant="huge"),
    dict(deconv_spec=[[8, 4, 16], [16, 4, 3]]),  # wrong output size
    dict(deconv_spec=[[8, [4, 4], 16], [16, 4, 8], [8, 4, 1]]),  # wrong channel count
    dict(image_shape=(3, 16)),
    dict(backbone_channels=[]),
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_parameter_names_and_order():
    names = list(init_params(micro()))
    assert names[:2] == ["backbone.0.w", "backbone.0.b"]
    assert names.index("W") < names.index("W_prime") < names.index("deconv.0.w")


def full_loss(m, x, Z, S):
    fw = m.forward(x)
    recon, cons = obj.feature_recon_terms(fw.X, fw.Vp, m.params["W"])
    g, gp = obj.image_recon_terms(ad.Tensor(x), fw.I_g, fw.I_gp)
    terms = {"feat_x": recon, "feat_v": cons, "decor": obj.decorrelation_loss(fw.Vp),
             "hash": obj.hash_similarity_loss(fw.Vp, Z, S), "img_g": g, "img_gp": gp}
    return obj.total_loss(terms, obj.LossWeights.defaults(len(x), m.config.k))


def test_full_graph_gradient_check():
    cfg = micro()
    m = A2Net(cfg)
    x = images(2, cfg.image_shape, seed=3)
    m.data_init(x)
    rng = np.random.default_rng(4)
    Z = np.where(rng.random((5, cfg.k)) < 0.5, -1.0, 1.0)
    S = np.where(rng.random((2, 5)) < 0.5, -1.0, 1.0)
    res = ad.finite_diff_check(lambda p: full_loss(m, x, Z, S), m.parameters())
    assert res.ok and res.max_error <= 1e-4, res


def test_data_init_centres_and_scales_features():
    cfg = ModelConfig()
    m = A2Net(cfg)
    x = images(64, cfg.image_shape, seed=1)
    m.data_init(x)
    X = m.forward(x, decode=False).X.data
    glob = X[:, cfg.k * cfg.local_dim:]
    assert np.allclose(glob.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(glob.std(axis=0), 1.0, atol=1e-9)
    local = X[:, :cfg.k * cfg.local_dim].reshape(64, cfg.k, cfg.local_dim)
    assert np.allclose(local.mean(axis=(0, 1)), 0.0, atol=1e-9)
    codes = m.encode(x)
    assert len({tuple(c) for c in codes}) > 32


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    m = A2Net(ModelConfig(seed=5))
    m.data_init(images(8, (3, 16, 16)))
    p1, p2 = tmp_path / "a.a2ck", tmp_path / "b.a2ck"
    m.save(p1)
    again = A2Net.load(p1)
    again.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = images(3, (3, 16, 16), seed=2)
    assert np.array_equal(again.latent(x), m.latent(x))


@pytest.mark.parametrize("cut", ["magic", "truncated", "trailing"])
def test_corrupt_checkpoint_rejected(cut):
    raw = A2Net(micro()).state_bytes()
    raw = {"magic": b"NOPE" + raw[4:], "truncated": raw[:-3], "trailing": raw + b"\0"}[cut]
    with pytest.raises(CheckpointError):
        A2Net.from_bytes(raw)


def test_same_seed_same_parameters():
    a, b = init_params(micro(seed=3)), init_params(micro(seed=3))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    c = init_params(micro(seed=4))
    assert not np.array_equal(a["W"].data, c["W"].data)


def test_uniform_init_bounds():
    p = init_params(ModelConfig())
    w = p["W"].data
    assert np.abs(w).max() <= 1 / np.sqrt(w.shape[1])
    assert not p["backbone.0.b"].data.any()
