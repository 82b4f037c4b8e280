import numpy as np
import pytest

from facedub import encoders, tensor as T
from facedub.params import ParamStore
from facedub.tensor import ContractViolation, Tensor, grad_check

from _reference import naive_conv2d


def make_store(channels=8, feature_dim=16, seed=0, image_size=None):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    encoders.add_conv_encoder(store, rng, "enc_src", 3, channels)
    encoders.add_conv_encoder(store, rng, "enc_ref", 15, channels)
    if image_size is not None:
        encoders.add_conv_encoder(store, rng, "enc_lmk", 1, channels, feature_dim,
                                  input_extent=(image_size, image_size))
    encoders.add_conv_encoder(store, rng, "enc_aud", 1, channels, feature_dim,
                              input_extent=(16, 80))
    store.add("fuse.w", rng.normal(0, 0.1, size=(channels, 2 * channels, 1, 1)))
    store.add("fuse.b", np.zeros(channels))
    return store


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_pipeline(size):
    store = make_store(image_size=size)
    rng = np.random.default_rng(1)
    src = Tensor(rng.uniform(size=(3, size, size)))
    refs = Tensor(rng.uniform(size=(15, size, size)))
    lmap = Tensor((rng.uniform(size=(1, size, size)) > 0.97).astype(float))
    i_s = encoders.encode_source(src, store)
    i_r = encoders.encode_reference(refs, store)
    feat, l_r = encoders.encode_landmark(lmap, store)
    a = encoders.encode_audio(np.zeros((16, 80)), store)
    fused = encoders.fuse_source_reference(i_s, i_r, store)
    assert i_s.shape == (8, size // 4, size // 4)
    assert i_r.shape == i_s.shape
    assert feat.shape == i_s.shape
    assert l_r.shape == (16,)
    assert a.shape == (16,)
    assert fused.shape == i_s.shape


def test_outputs_finite_for_unit_inputs():
    store = make_store(seed=3)
    rng = np.random.default_rng(4)
    src = Tensor(rng.uniform(size=(3, 32, 32)))
    refs = Tensor(rng.uniform(size=(15, 32, 32)))
    out = encoders.fuse_source_reference(
        encoders.encode_source(src, store), encoders.encode_reference(refs, store), store
    )
    assert np.all(np.isfinite(out.data))


def test_zero_mel_gives_bias_pathway():
    store = make_store(seed=5)
    # make the pathway non-trivial: biases get random values
    rng = np.random.default_rng(6)
    for name in ("enc_aud.b1", "enc_aud.b2", "enc_aud.fb"):
        store[name].data = rng.normal(0, 0.3, size=store[name].data.shape)

    out = encoders.encode_audio(np.zeros((16, 80)), store)

    # independent propagation of the zero input through the naive conv oracle
    h1 = np.tanh(naive_conv2d(np.zeros((1, 16, 80)), store["enc_aud.w1"].data,
                              store["enc_aud.b1"].data, stride=2, pad=1))
    h2 = np.tanh(naive_conv2d(h1, store["enc_aud.w2"].data,
                              store["enc_aud.b2"].data, stride=2, pad=1))
    expected = store["enc_aud.fw"].data @ h2.reshape(-1) + store["enc_aud.fb"].data
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_zero_landmark_gives_bias_pathway():
    store = make_store(seed=8, image_size=16)
    rng = np.random.default_rng(9)
    for name in ("enc_lmk.b1", "enc_lmk.b2", "enc_lmk.fb"):
        store[name].data = rng.normal(0, 0.3, size=store[name].data.shape)
    _, l_r = encoders.encode_landmark(Tensor(np.zeros((1, 16, 16))), store)
    h1 = np.tanh(naive_conv2d(np.zeros((1, 16, 16)), store["enc_lmk.w1"].data,
                              store["enc_lmk.b1"].data, stride=2, pad=1))
    h2 = np.tanh(naive_conv2d(h1, store["enc_lmk.w2"].data,
                              store["enc_lmk.b2"].data, stride=2, pad=1))
    expected = store["enc_lmk.fw"].data @ h2.reshape(-1) + store["enc_lmk.fb"].data
    np.testing.assert_allclose(l_r.data, expected, atol=1e-10)


def test_encode_audio_deterministic():
    store = make_store(seed=10)
    rng = np.random.default_rng(11)
    mel = rng.normal(size=(16, 80))
    a = encoders.encode_audio(mel, store)
    b = encoders.encode_audio(mel.copy(), store)
    assert np.array_equal(a.data, b.data)


def test_reinit_same_seed_reproduces_parameters():
    first = make_store(seed=12)
    second = make_store(seed=12)
    assert sorted(first) == sorted(second)
    for name in first:
        assert np.array_equal(first[name].data, second[name].data)


def test_reference_stack_is_order_sensitive():
    store = make_store(seed=13)
    rng = np.random.default_rng(14)
    frames = [rng.uniform(size=(3, 16, 16)) for _ in range(5)]
    stacked = Tensor(np.concatenate(frames, axis=0))
    permuted = Tensor(np.concatenate(frames[::-1], axis=0))
    out_a = encoders.encode_reference(stacked, store)
    out_b = encoders.encode_reference(permuted, store)
    assert not np.allclose(out_a.data, out_b.data)


def test_channel_mismatch_errors():
    store = make_store()
    with pytest.raises(ContractViolation, match="encode_source"):
        encoders.encode_source(Tensor(np.zeros((1, 16, 16))), store)
    with pytest.raises(ContractViolation, match="encode_reference"):
        encoders.encode_reference(Tensor(np.zeros((3, 16, 16))), store)
    with pytest.raises(ContractViolation, match="encode_landmark"):
        encoders.encode_landmark(Tensor(np.zeros((3, 16, 16))), store)
    with pytest.raises(ContractViolation):
        encoders.encode_audio(np.zeros((8, 80)), store)


def test_fuse_identity_projection_fixture():
    channels = 4
    store = ParamStore()
    kernel = np.zeros((channels, 2 * channels, 1, 1))
    kernel[np.arange(channels), np.arange(channels), 0, 0] = 1.0
    store.add("fuse.w", kernel)
    store.add("fuse.b", np.zeros(channels))
    rng = np.random.default_rng(15)
    i_s = Tensor(rng.normal(size=(channels, 4, 4)))
    out = encoders.fuse_source_reference(i_s, Tensor(np.zeros((channels, 4, 4))), store)
    np.testing.assert_allclose(out.data, i_s.data, atol=1e-12)


def test_fuse_output_channels_fixed():
    store = make_store(channels=8)
    rng = np.random.default_rng(16)
    out = encoders.fuse_source_reference(
        Tensor(rng.normal(size=(8, 4, 4))), Tensor(rng.normal(size=(8, 4, 4))), store
    )
    assert out.shape == (8, 4, 4)


def test_fuse_spatial_mismatch_error():
    store = make_store(channels=8)
    with pytest.raises(ContractViolation, match="fuse"):
        encoders.fuse_source_reference(
            Tensor(np.zeros((8, 4, 4))), Tensor(np.zeros((8, 8, 8))), store
        )


def test_fuse_gradient():
    store = make_store(channels=4, seed=17)
    rng = np.random.default_rng(18)
    other = Tensor(rng.normal(size=(4, 4, 4)))
    mask = Tensor(rng.normal(size=(4, 4, 4)))

    def f(t):
        fused = encoders.fuse_source_reference(t, other, store)
        return T.tsum(T.mul(fused, mask))

    err = grad_check(f, Tensor(rng.normal(size=(4, 4, 4))))
    assert err < 1e-5
