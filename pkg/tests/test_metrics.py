import numpy as np
import pytest

from facedub import metrics
from facedub.losses import RandomFeatureExtractor
from facedub.metrics import RandomSyncEmbedder, lse, psnr_ssim_mse, report, ssim
from facedub.tensor import ContractViolation

from _reference import naive_ssim


def test_identical_images():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16))
    p, s, m = psnr_ssim_mse(img, img.copy())
    assert m == 0.0
    assert p == 100.0
    assert s == 1.0


def test_constant_offset_psnr_closed_form():
    a = np.full((32, 32), 0.4)
    b = np.full((32, 32), 0.5)
    p, _, m = psnr_ssim_mse(a, b)
    assert m == pytest.approx(0.01, abs=1e-12)
    assert p == pytest.approx(20.0, abs=1e-6)


def test_ssim_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(3):
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(0, 0.1, size=(32, 32)), 0, 1)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 20))
    b = rng.uniform(size=(20, 20))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_multichannel_averages():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(3, 16, 16))
    b = rng.uniform(size=(3, 16, 16))
    per_channel = [ssim(a[c], b[c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ContractViolation, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_psnr_strictly_decreases_with_noise():
    rng = np.random.default_rng(4)
    base = rng.uniform(0.2, 0.8, size=(32, 32))
    values = []
    for amp in (0.01, 0.02, 0.05, 0.1):
        noisy = base + amp * rng.uniform(-1, 1, size=base.shape)
        values.append(metrics.psnr(base, np.clip(noisy, 0, 1)))
    assert all(earlier > later for earlier, later in zip(values, values[1:]))


def test_shape_mismatch_error():
    with pytest.raises(ContractViolation):
        psnr_ssim_mse(np.zeros((16, 16)), np.zeros((16, 17)))


class OneHotEmbedder:
    """Oracle construction: v_t == a_t, everything else mutually orthogonal."""

    def __init__(self, dim):
        self.dim = dim

    def _unit(self, index):
        v = np.zeros(self.dim)
        v[index] = 1.0
        return v

    def embed_frames(self, window):
        return self._unit(int(np.asarray(window[0]).flat[0]))

    def embed_mel(self, mel):
        return self._unit(int(np.asarray(mel).flat[0]))


class ConstantEmbedder:
    def embed_frames(self, window):
        return np.array([1.0, 0.0])

    def embed_mel(self, mel):
        return np.array([1.0, 0.0])


def _index_streams(n):
    frames = [np.full((1,), float(t)) for t in range(n)]
    mels = [np.full((1,), float(t)) for t in range(n)]
    return frames, mels


def test_lse_degenerate_embedder():
    frames, mels = _index_streams(40)
    lse_d, lse_c = lse(frames, mels, ConstantEmbedder())
    assert lse_d == 0.0
    assert lse_c == 0.0


def test_lse_orthogonal_construction():
    frames, mels = _index_streams(40)
    lse_d, lse_c = lse(frames, mels, OneHotEmbedder(dim=80))
    assert lse_d == pytest.approx(0.0, abs=1e-12)
    assert lse_c == pytest.approx(np.sqrt(2.0), abs=1e-6)


def test_lse_shifted_audio_increases_distance():
    frames, mels = _index_streams(60)
    base_d, _ = lse(frames, mels, OneHotEmbedder(dim=120))
    shifted_d, _ = lse(frames[: len(mels) - 5], mels[5:], OneHotEmbedder(dim=120))
    assert shifted_d > base_d


def test_lse_rejects_short_sequence():
    frames, mels = _index_streams(20)
    with pytest.raises(ContractViolation, match="too short"):
        lse(frames, mels, OneHotEmbedder(dim=40))


class DictEmbedder:
    def __init__(self, visual, audio):
        self.visual = visual
        self.audio = audio

    def embed_frames(self, window):
        return self.visual[int(np.asarray(window[0]).flat[0])]

    def embed_mel(self, mel):
        return self.audio[int(np.asarray(mel).flat[0])]


def test_lse_invariant_under_global_rotation():
    rng = np.random.default_rng(5)
    n, dim = 40, 8
    visual = rng.normal(size=(n, dim))
    visual /= np.linalg.norm(visual, axis=1, keepdims=True)
    audio = rng.normal(size=(n, dim))
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    frames, mels = _index_streams(n)
    base = lse(frames, mels, DictEmbedder(visual, audio))
    rotated = lse(frames, mels, DictEmbedder(visual @ q.T, audio @ q.T))
    assert base[0] == pytest.approx(rotated[0], abs=1e-9)
    assert base[1] == pytest.approx(rotated[1], abs=1e-9)


def test_random_sync_embedder_is_deterministic_and_unit():
    rng = np.random.default_rng(6)
    frames = [rng.uniform(size=(3, 16, 16)) for _ in range(5)]
    mel = rng.uniform(size=(16, 80))
    emb = RandomSyncEmbedder(frame_shape=(3, 16, 16), seed=1)
    again = RandomSyncEmbedder(frame_shape=(3, 16, 16), seed=1)
    v1, v2 = emb.embed_frames(frames), again.embed_frames(frames)
    assert np.array_equal(v1, v2)
    assert np.linalg.norm(v1) == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(emb.embed_mel(mel)) == pytest.approx(1.0, abs=1e-9)


def test_report_identical_sequences(tmp_path):
    rng = np.random.default_rng(7)
    frames = [rng.uniform(size=(3, 16, 16)) for _ in range(10)]
    out = report(frames, [f.copy() for f in frames], csv_path=tmp_path / "r.csv")
    assert out.ssim_mean == 1.0
    assert out.psnr_mean == 100.0
    assert out.frame_count == 10
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(rows) == 11  # header + one row per frame
    assert rows[0] == "frame,psnr,ssim,mse"


def test_report_is_permutation_sensitive():
    rng = np.random.default_rng(8)
    gen = [rng.uniform(size=(16, 16)) for _ in range(4)]
    ref = [rng.uniform(size=(16, 16)) for _ in range(4)]
    ordered = report(gen, ref)
    shuffled = report(gen[::-1], ref)
    assert ordered.mse_per_frame != shuffled.mse_per_frame


def test_report_count_mismatch():
    with pytest.raises(ContractViolation, match="frame counts"):
        report([np.zeros((16, 16))], [np.zeros((16, 16))] * 2)


def test_report_svg_emission(tmp_path):
    rng = np.random.default_rng(9)
    frames = [rng.uniform(size=(16, 16)) for _ in range(5)]
    other = [np.clip(f + 0.05, 0, 1) for f in frames]
    report(frames, other, svg_path=tmp_path / "plot.svg")
    text = (tmp_path / "plot.svg").read_text()
    assert "<svg" in text and "polyline" in text
    assert "psnr_db" in text and "ssim" in text


def test_lpips_zero_for_identical_and_requires_backend():
    extractor = RandomFeatureExtractor(seed=10, stage_channels=(4, 4))
    rng = np.random.default_rng(11)
    img = rng.uniform(size=(3, 16, 16))
    assert metrics.lpips(img, img.copy(), extractor) == pytest.approx(0.0, abs=1e-12)
    assert metrics.lpips(img, rng.uniform(size=(3, 16, 16)), extractor) > 0.0
    with pytest.raises(ContractViolation, match="backend"):
        metrics.lpips(img, img, None)


def test_fid_near_zero_for_same_set():
    extractor = RandomFeatureExtractor(seed=12, stage_channels=(4, 4))
    rng = np.random.default_rng(13)
    frames = [rng.uniform(size=(3, 16, 16)) for _ in range(6)]
    same = metrics.fid(frames, [f.copy() for f in frames], extractor)
    assert same == pytest.approx(0.0, abs=1e-6)
    other = [rng.uniform(0.5, 1.0, size=(3, 16, 16)) for _ in range(6)]
    assert metrics.fid(frames, other, extractor) > same
    with pytest.raises(ContractViolation, match="backend"):
        metrics.fid(frames, frames, None)
