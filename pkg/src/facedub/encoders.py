"""Feature encoders for audio windows, occluded source frames, reference
stacks, and landmark maps, plus the source/reference fusion.

Each image-style encoder is two stride-2 3x3 convolutions with tanh, so a
(c, H, W) input becomes a (C, H/4, W/4) feature map. The landmark and audio
encoders add a flatten + fully-connected head emitting a d-vector; the
flatten (rather than a spatial mean) keeps position information, which is
the whole payload of a sparse landmark map.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .audio import validate_mel_window
from .params import ParamStore, conv_init, fc_init
from .tensor import ContractViolation, Tensor

MID_CHANNELS = 16


def _after_stride2(n: int) -> int:
    return (n - 1) // 2 + 1


def encoded_extent(n: int) -> int:
    """Spatial extent after the two stride-2 convolutions."""
    return _after_stride2(_after_stride2(n))


def add_conv_encoder(store: ParamStore, rng, prefix: str, in_ch: int, out_ch: int,
                     feature_dim: int | None = None,
                     input_extent: tuple[int, int] | None = None) -> None:
    store.add(f"{prefix}.w1", conv_init(rng, MID_CHANNELS, in_ch, 3))
    store.add(f"{prefix}.b1", np.zeros(MID_CHANNELS))
    store.add(f"{prefix}.w2", conv_init(rng, out_ch, MID_CHANNELS, 3))
    store.add(f"{prefix}.b2", np.zeros(out_ch))
    if feature_dim is not None:
        h2, w2 = encoded_extent(input_extent[0]), encoded_extent(input_extent[1])
        store.add(f"{prefix}.fw", fc_init(rng, feature_dim, out_ch * h2 * w2))
        store.add(f"{prefix}.fb", np.zeros(feature_dim))


def encode_map(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Two stride-2 convs with tanh; spatial extent shrinks by 4."""
    h = T.tanh(T.conv2d(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"], stride=2, pad=1))
    return T.tanh(T.conv2d(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"], stride=2, pad=1))


def flat_head(feat: Tensor, store: ParamStore, prefix: str) -> Tensor:
    flat = T.reshape(feat, (feat.data.size,))
    return T.linear(flat, store[f"{prefix}.fw"], store[f"{prefix}.fb"])


def _check_channels(x: Tensor, expected: int, op: str) -> None:
    if x.data.ndim != 3 or x.data.shape[0] != expected:
        raise ContractViolation(
            f"{op}: expected a ({expected}, H, W) input, got {x.data.shape}"
        )


def encode_audio(mel, store: ParamStore) -> Tensor:
    """Audio window (16x80) -> d-vector feature."""
    if isinstance(mel, Tensor):
        window = validate_mel_window(mel.data)
        x = T.reshape(mel, (1,) + window.shape)
    else:
        window = validate_mel_window(mel)
        x = Tensor(window[None, :, :])
    feat = encode_map(x, store, "enc_aud")
    return flat_head(feat, store, "enc_aud")


def encode_source(img: Tensor, store: ParamStore) -> Tensor:
    _check_channels(img, 3, "encode_source")
    return encode_map(img, store, "enc_src")


def encode_reference(refs: Tensor, store: ParamStore) -> Tensor:
    _check_channels(refs, 15, "encode_reference")
    return encode_map(refs, store, "enc_ref")


def encode_landmark(lmap: Tensor, store: ParamStore) -> tuple[Tensor, Tensor]:
    """Landmark heatmap -> (spatial feature, pooled d-vector)."""
    _check_channels(lmap, 1, "encode_landmark")
    feat = encode_map(lmap, store, "enc_lmk")
    return feat, flat_head(feat, store, "enc_lmk")


def fuse_source_reference(i_s: Tensor, i_r: Tensor, store: ParamStore) -> Tensor:
    """Channel concat followed by a 1x1 projection back to C channels."""
    if i_s.data.shape[1:] != i_r.data.shape[1:]:
        raise ContractViolation(
            f"fuse: spatial extents differ, {i_s.data.shape} vs {i_r.data.shape}"
        )
    merged = T.concat([i_s, i_r], axis=0)
    return T.conv2d(merged, store["fuse.w"], store["fuse.b"])
