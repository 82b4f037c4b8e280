"""End-to-end pipeline: parameter construction, the two-stage forward pass,
and the training loop with a two-phase sync-expert schedule.

Phase 1 trains the four contrastive projection heads on synced/unsynced
pairs (batch off-diagonals are shifted by at least five video frames by
dataset construction) and freezes them; phase 2 optimizes the generator
against the full five-term objective with alternating discriminator and
generator updates.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .alignment import residual_adain_block, score_matrices, similarity_distributions
from .audio import write_wav
from .config import PipelineConfig
from .deformation import (
    IDENTITY_SCALE_BIAS,
    affine_warp,
    build_mask_pyramid,
    composite_and_blend,
    decode_face,
    gaussian_face_mask,
    predict_affine_coeffs,
)
from .encoders import (
    add_conv_encoder,
    encode_audio,
    encode_landmark,
    encode_reference,
    encode_source,
    fuse_source_reference,
)
from .image_io import write_frames
from .losses import (
    LossWeights,
    RandomFeatureExtractor,
    contrastive_loss,
    facial_attribute_loss,
    l1_reconstruction,
    lsgan_losses,
    perception_loss,
    total_loss,
)
from .metrics import ssim
from .params import ParamStore, conv_init, fc_init, make_optimizer, save_checkpoint
from .synth import SyntheticDataset
from .tensor import Tensor, backward

EXPERT_LR_FACTOR = 10.0     # phase-1 heads train faster than the generator
EXPERT_TARGET_FACTOR = 0.3  # stop phase 1 once L_con < 0.3 * log(B)
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class TrainingDiverged(RuntimeError):
    pass


def build_params(config: PipelineConfig) -> ParamStore:
    """All trainable tensors, reproducibly initialized from config.seed."""
    c, d, e = config.channels, config.feature_dim, config.embed_dim
    size = config.image_size
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    add_conv_encoder(store, rng, "enc_src", 3, c)
    add_conv_encoder(store, rng, "enc_ref", 15, c)
    add_conv_encoder(store, rng, "enc_lmk", 1, c, feature_dim=d, input_extent=(size, size))
    add_conv_encoder(store, rng, "enc_aud", 1, c, feature_dim=d, input_extent=(16, 80))
    store.add("fuse.w", conv_init(rng, c, 2 * c, 1))
    store.add("fuse.b", np.zeros(c))
    store.add("attr.w", fc_init(rng, d, c))
    store.add("attr.b", np.zeros(d))
    # adain starts near plain instance normalization
    store.add("adain.sw", fc_init(rng, c, d, scale=0.5))
    store.add("adain.sb", np.ones(c))
    store.add("adain.mw", fc_init(rng, c, d, scale=0.5))
    store.add("adain.mb", np.zeros(c))
    store.add("align.w", conv_init(rng, c, c, 3, scale=0.1))
    store.add("align.b", np.zeros(c))
    store.add("noalign.w", conv_init(rng, c, c, 3))
    store.add("noalign.b", np.zeros(c))
    for key, in_dim in (("vw", c), ("aw", d), ("vpw", c), ("apw", d)):
        store.add(f"heads.{key}", fc_init(rng, e, in_dim))
        store.add(f"heads.{key[:-1]}b", np.zeros(e))
    coeff_in = c + d
    for key in ("tw", "xw", "yw", "sw"):
        store.add(f"coeff.{key}", np.zeros((c, coeff_in)))
    store.add("coeff.tb", np.zeros(c))
    store.add("coeff.xb", np.zeros(c))
    store.add("coeff.yb", np.zeros(c))
    store.add("coeff.sb", np.full(c, IDENTITY_SCALE_BIAS))
    store.add("dec.w1", conv_init(rng, c, 2 * c, 3))
    store.add("dec.b1", np.zeros(c))
    store.add("dec.w2", conv_init(rng, c // 2, c, 3))
    store.add("dec.b2", np.zeros(c // 2))
    store.add("dec.w3", conv_init(rng, 3, c // 2, 3))
    store.add("dec.b3", np.zeros(3))
    store.add("blend.w1", conv_init(rng, 8, 3, 3))
    store.add("blend.b1", np.zeros(8))
    store.add("blend.w2", conv_init(rng, 3, 8, 3, scale=0.01))
    store.add("blend.b2", np.zeros(3))
    for prefix, in_ch in (("disc1", 3), ("disc5", 15)):
        store.add(f"{prefix}.w1", conv_init(rng, 8, in_ch, 3))
        store.add(f"{prefix}.b1", np.zeros(8))
        store.add(f"{prefix}.w2", conv_init(rng, 16, 8, 3))
        store.add(f"{prefix}.b2", np.zeros(16))
        store.add(f"{prefix}.w3", conv_init(rng, 16, 16, 3))
        store.add(f"{prefix}.b3", np.zeros(16))
        store.add(f"{prefix}.w4", conv_init(rng, 1, 16, 1))
        store.add(f"{prefix}.b4", np.zeros(1))
    return store


def is_discriminator(name: str) -> bool:
    return name.startswith(("disc1.", "disc5."))


def is_expert_head(name: str) -> bool:
    return name.startswith("heads.")


def generator_params(store: ParamStore) -> list:
    return [
        (name, t)
        for name, t in store.items()
        if not is_discriminator(name) and not is_expert_head(name) and t.requires_grad
    ]


def discriminator_params(store: ParamStore) -> list:
    return [(name, t) for name, t in store.items() if is_discriminator(name)]


def expert_params(store: ParamStore) -> list:
    return [(name, t) for name, t in store.items() if is_expert_head(name)]


def discriminate(image: Tensor, store: ParamStore, prefix: str) -> Tensor:
    x = T.tanh(T.conv2d(image, store[f"{prefix}.w1"], store[f"{prefix}.b1"], stride=2, pad=1))
    x = T.tanh(T.conv2d(x, store[f"{prefix}.w2"], store[f"{prefix}.b2"], stride=2, pad=1))
    x = T.tanh(T.conv2d(x, store[f"{prefix}.w3"], store[f"{prefix}.b3"], stride=2, pad=1))
    return T.conv2d(x, store[f"{prefix}.w4"], store[f"{prefix}.b4"])


def face_box(size: int) -> tuple[int, int, int, int]:
    # the occluded lower face: where content is actually generated
    return (
        int(round(0.50 * size)),
        int(round(0.92 * size)),
        int(round(0.22 * size)),
        int(round(0.78 * size)),
    )


def build_face_mask(size: int) -> np.ndarray:
    return gaussian_face_mask(size, size, face_box(size), sigma=max(1.0, size / 32.0))


def encode_alignment(sample, store: ParamStore, config: PipelineConfig) -> dict:
    """First stage: encoders, fusion, intra-modal alignment, pooled features."""
    a = encode_audio(sample.mel, store)
    i_s = encode_source(Tensor(sample.masked_source), store)
    i_r = encode_reference(Tensor(sample.references), store)
    _, l_r = encode_landmark(Tensor(sample.landmark_map), store)
    fused = fuse_source_reference(i_s, i_r, store)
    if config.no_alignment:
        aligned = T.conv2d(fused, store["noalign.w"], store["noalign.b"], pad=1)
    else:
        aligned = residual_adain_block(fused, l_r, store)
    pooled_aligned = T.tmean(aligned, axis=(1, 2))
    attr_vec = T.linear(T.tmean(fused, axis=(1, 2)), store["attr.w"], store["attr.b"])
    return {
        "audio": a,
        "i_s": i_s,
        "i_r": i_r,
        "l_r": l_r,
        "fused": fused,
        "aligned": aligned,
        "pooled_aligned": pooled_aligned,
        "attr_vec": attr_vec,
    }


def forward_sample(sample, store: ParamStore, config: PipelineConfig,
                   face_mask: np.ndarray) -> dict:
    """Full two-stage forward for one sample; intermediates stay exposed."""
    out = encode_alignment(sample, store, config)
    coeffs = predict_affine_coeffs(out["pooled_aligned"], out["audio"], store)
    f_d = affine_warp(out["i_r"], coeffs)
    generated = decode_face(out["i_s"], f_d, store)
    if config.no_fusion:
        final, composite = generated, generated
    else:
        final, composite = composite_and_blend(
            generated, Tensor(sample.source_frame), face_mask, store
        )
    out.update(
        {"coeffs": coeffs, "f_d": f_d, "generated": generated,
         "composite": composite, "final": final}
    )
    return out


def forward_batch(samples, store: ParamStore, config: PipelineConfig,
                  face_mask: np.ndarray) -> dict:
    per_sample = [forward_sample(s, store, config, face_mask) for s in samples]
    return {
        "samples": per_sample,
        "visual_batch": T.stack([o["pooled_aligned"] for o in per_sample]),
        "audio_batch": T.stack([o["audio"] for o in per_sample]),
    }


def contrastive_term(visual_batch: Tensor, audio_batch: Tensor, store: ParamStore,
                     tau: float) -> Tensor:
    pair = score_matrices(visual_batch, audio_batch, store, tau=tau)
    p_v2a, p_a2v = similarity_distributions(pair)
    return contrastive_loss(p_v2a, p_a2v)


def five_frame_stack(dataset: SyntheticDataset, frame_index: int, center) -> Tensor:
    """Channel-stacked (15, H, W) temporal context with a replaceable center."""
    parts = []
    for offset in (-2, -1, 0, 1, 2):
        if offset == 0:
            parts.append(center if isinstance(center, Tensor) else Tensor(center))
        else:
            parts.append(Tensor(dataset.frames[frame_index + offset]))
    return T.concat(parts, axis=0)


@dataclass
class TrainResult:
    steps_run: int
    phase1_steps: int
    phase1_final_con: float
    first_total: float
    last_total: float
    masked_l1: float
    mean_ssim: float
    csv_rows: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    csv_path: Optional[str] = None
    generated: list = field(default_factory=list)
    store: Optional[ParamStore] = None


def _csv_line(values) -> str:
    return ",".join(
        v if isinstance(v, str) else f"{v:.10e}" for v in values
    )


def train_expert(dataset: SyntheticDataset, store: ParamStore, config: PipelineConfig,
                 rng: np.random.Generator) -> tuple[int, float]:
    """Phase 1: train the projection heads alone, then freeze them.

    Encoder outputs are frozen during this phase, so the per-sample
    embeddings are cached once and head training runs on constants.
    """
    cached = []
    for sample in dataset.samples:
        out = encode_alignment(sample, store, config)
        cached.append((out["pooled_aligned"].data.copy(), out["audio"].data.copy()))
    # warm start: center each projection on the dataset mean so the tiny
    # per-sample signal is not swamped by the features' common mode
    mean_v = np.mean([c[0] for c in cached], axis=0)
    mean_a = np.mean([c[1] for c in cached], axis=0)
    store["heads.vb"].data = -store["heads.vw"].data @ mean_v
    store["heads.vpb"].data = -store["heads.vpw"].data @ mean_v
    store["heads.ab"].data = -store["heads.aw"].data @ mean_a
    store["heads.apb"].data = -store["heads.apw"].data @ mean_a
    opt = make_optimizer(config.optimizer, config.lr * EXPERT_LR_FACTOR)
    heads = expert_params(store)
    target = EXPERT_TARGET_FACTOR * math.log(config.batch)
    recent: list = []
    steps = 0
    for steps in range(1, config.expert_steps + 1):
        idx = rng.choice(len(dataset), size=config.batch, replace=False)
        visual = Tensor(np.stack([cached[i][0] for i in idx]))
        audio = Tensor(np.stack([cached[i][1] for i in idx]))
        loss = contrastive_term(visual, audio, store, config.tau)
        store.zero_grad()
        backward(loss)
        opt.step(heads)
        recent.append(loss.item())
        # stop on a rolling mean: one lucky batch is not convergence
        if len(recent) >= 10 and float(np.mean(recent[-10:])) < target:
            break
    store.zero_grad()
    store.freeze("heads.")
    return steps, float(np.mean(recent[-10:]))


def train(config: PipelineConfig, dataset: SyntheticDataset,
          out_dir: Optional[str] = None, quiet: bool = True) -> TrainResult:
    """Two-phase training; emits a per-step loss CSV and a final checkpoint.

    Aborts if the total loss stays above 10x its initial value for 50
    consecutive steps.
    """
    config.validate()
    store = build_params(config)
    rng = np.random.default_rng(config.seed + 1)
    face_mask = build_face_mask(config.image_size)
    masks = None if config.no_supervision else build_mask_pyramid(config.image_size, config.image_size)
    extractor = RandomFeatureExtractor(seed=config.seed)
    weights = LossWeights(config.lambda_v, config.lambda_p, config.lambda_gan,
                          config.lambda_r, config.lambda_con)

    phase1_steps, phase1_con = train_expert(dataset, store, config, rng)
    if not quiet:
        print(f"phase 1: {phase1_steps} steps, contrastive loss {phase1_con:.4f}")

    # start the decoder at the dataset's face color so early steps go to
    # structure instead of global color
    r0, r1, c0, c1 = face_box(config.image_size)
    face_pixels = np.stack([s.truth_frame[:, r0:r1, c0:c1] for s in dataset.samples])
    mean_color = np.clip(face_pixels.mean(axis=(0, 2, 3)), 0.05, 0.95)
    store["dec.b3"].data = np.log(mean_color / (1.0 - mean_color))

    gen_opt = make_optimizer(config.optimizer, config.lr)
    disc_opt = make_optimizer(config.optimizer, config.lr)

    header = "step,L_v,L_p,L_D,L_G,L_r,L_con,total"
    csv_rows = [header]
    first_total = None
    bad_steps = 0
    b = config.batch

    for step in range(1, config.steps + 1):
        idx = rng.choice(len(dataset), size=b, replace=False)
        batch = [dataset.samples[i] for i in idx]
        outs = forward_batch(batch, store, config, face_mask)

        # discriminator update on detached fakes
        loss_d_total = Tensor(0.0)
        for sample, out in zip(batch, outs["samples"]):
            fake = out["final"].detach()
            truth = Tensor(sample.truth_frame)
            d_real = discriminate(truth, store, "disc1")
            d_fake = discriminate(fake, store, "disc1")
            ld1, _ = lsgan_losses(d_real, d_fake)
            real5 = five_frame_stack(dataset, sample.frame_index, truth)
            fake5 = five_frame_stack(dataset, sample.frame_index, fake)
            ld5, _ = lsgan_losses(
                discriminate(real5, store, "disc5"), discriminate(fake5, store, "disc5")
            )
            loss_d_total = loss_d_total + (ld1 + ld5) / b
        store.zero_grad()
        backward(loss_d_total)
        disc_opt.step(discriminator_params(store))
        store.zero_grad()

        # generator update against the five-term objective
        loss_v = Tensor(0.0)
        loss_p = Tensor(0.0)
        loss_g = Tensor(0.0)
        loss_r = Tensor(0.0)
        for sample, out in zip(batch, outs["samples"]):
            truth = Tensor(sample.truth_frame)
            loss_v = loss_v + facial_attribute_loss(out["attr_vec"], out["l_r"]) / b
            loss_p = loss_p + perception_loss(
                out["final"], truth, extractor,
                include_half_scale=not config.no_supervision,
            ) / b
            _, lg1 = lsgan_losses(
                discriminate(truth, store, "disc1"),
                discriminate(out["final"], store, "disc1"),
            )
            fake5 = five_frame_stack(dataset, sample.frame_index, out["final"])
            real5 = five_frame_stack(dataset, sample.frame_index, truth)
            _, lg5 = lsgan_losses(
                discriminate(real5, store, "disc5"), discriminate(fake5, store, "disc5")
            )
            loss_g = loss_g + (lg1 + lg5) / b
            loss_r = loss_r + l1_reconstruction(out["final"], truth, masks) / b
        loss_con = contrastive_term(outs["visual_batch"], outs["audio_batch"], store, config.tau)

        objective = (
            weights.v * loss_v + weights.p * loss_p + weights.gan * loss_g
            + weights.r * loss_r + weights.con * loss_con
        )
        store.zero_grad()
        backward(objective)
        if not store.grads_finite():
            raise TrainingDiverged(f"non-finite gradient at step {step}")
        gen_opt.step(generator_params(store))
        store.zero_grad()

        components = {
            "v": loss_v.item(), "p": loss_p.item(),
            "gan": loss_d_total.item() + loss_g.item(),
            "r": loss_r.item(), "con": loss_con.item(),
        }
        step_total = total_loss(components, weights)
        csv_rows.append(_csv_line([
            str(step), loss_v.item(), loss_p.item(), loss_d_total.item(),
            loss_g.item(), loss_r.item(), loss_con.item(), step_total,
        ]))
        if first_total is None:
            first_total = step_total
        if step_total > DIVERGENCE_FACTOR * first_total:
            bad_steps += 1
            if bad_steps >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(
                    f"total loss above {DIVERGENCE_FACTOR}x its initial value for "
                    f"{DIVERGENCE_PATIENCE} consecutive steps"
                )
        else:
            bad_steps = 0
        if not quiet and (step % 20 == 0 or step == 1):
            print(f"step {step}: total {step_total:.4f}")

    # final evaluation over the whole training set
    eval_masks = build_mask_pyramid(config.image_size, config.image_size)
    generated = []
    l1_values = []
    ssim_values = []
    for sample in dataset.samples:
        out = forward_sample(sample, store, config, face_mask)
        frame = out["final"].data
        generated.append(frame)
        l1_values.append(
            l1_reconstruction(Tensor(frame), Tensor(sample.truth_frame), eval_masks).item()
        )
        ssim_values.append(ssim(frame, sample.truth_frame))

    # convergence estimate: single minibatch totals are noisy, so the final
    # level is the mean over the last ten logged steps
    totals = [float(row.split(",")[-1]) for row in csv_rows[1:]]
    last_level = float(np.mean(totals[-min(10, len(totals)):]))

    result = TrainResult(
        steps_run=config.steps,
        phase1_steps=phase1_steps,
        phase1_final_con=phase1_con,
        first_total=float(first_total),
        last_total=last_level,
        masked_l1=float(np.mean(l1_values)),
        mean_ssim=float(np.mean(ssim_values)),
        csv_rows=csv_rows,
        generated=generated,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(result.checkpoint_path, store)
        result.csv_path = os.path.join(out_dir, "loss.csv")
        with open(result.csv_path, "w", encoding="ascii") as handle:
            handle.write("\n".join(csv_rows) + "\n")
        write_frames(os.path.join(out_dir, "generated"), generated)
        write_frames(os.path.join(out_dir, "truth"), [s.truth_frame for s in dataset.samples])
        write_wav(os.path.join(out_dir, "audio.wav"), dataset.audio)
    result.store = store
    return result
