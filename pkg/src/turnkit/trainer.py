"""Desk-scale optimization: reverse-mode gradients, AdamW with warmup and
cosine decay, gradient clipping, loss composition for the segmenter and the
turn model, and corpus-derived class weights.

The gradient engine is reverse-mode autodiff (torch); ``backward`` exposes
it behind a named-parameter surface so every update flows through
``clip_gradients`` and ``adamw_step`` below, which own the schedule and the
optimizer math.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import (
    AugmentPolicy,
    SpeakerVoice,
    SynthConfig,
    channel_dropout,
    derive_frame_labels,
    jitter_labels,
    load_annotations,
    load_manifest,
    make_voice,
    mix_speakers,
    augment_signal,
    render_utterance,
)
from .distill import (
    MixSchedule,
    StudentEncoder,
    TeacherCompressor,
    align_teacher_to_frames,
    distill_loss,
    mix_features,
    read_teacher_features,
)
from .eot import NUM_CLASSES, EotModel, toeplitz_loss
from .features import (
    AudioFrameSpec,
    apply_cmn,
    extract_mfcc,
    featurize_channel,
    load_wav,
)
from .segmenter import (
    CosFaceLoss,
    SegmenterModel,
    js_consistency_loss,
    peel_diversity_loss,
    pit_bce_loss,
    supcon_loss,
    triplet_consistency_loss,
)

logger = logging.getLogger(__name__)

SR = 16000


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 8
    distill_weight: float = 0.15
    horizon_weights: tuple[float, float, float, float] = (1.0, 0.5, 0.25, 0.1)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak, then cosine decay to zero at total_steps."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]
             ) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    Parameters that do not sit on the loss path get zero gradients.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {name: (p.grad.detach().clone() if p.grad is not None
                   else torch.zeros_like(p))
            for name, p in params.items()}


def clip_gradients(grads: dict[str, torch.Tensor], clip_norm: float
                   ) -> tuple[dict[str, torch.Tensor], float]:
    """Scale gradients so the global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    total = math.sqrt(sum(float(g.square().sum().item()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads, total
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}, total


@dataclass
class AdamWState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    skipped: int = 0

    def ensure(self, params: dict[str, torch.Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: AdamWState, step: int, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update at the scheduled learning rate.

    ``step`` is 0-based; bias correction uses step + 1. A NaN or Inf in any
    gradient skips the whole update and bumps the skip counter.
    """
    for g in grads.values():
        if not torch.isfinite(g).all():
            state.skipped += 1
            logger.warning("adamw_step: non-finite gradient, step %d skipped", step)
            return
    state.ensure(params)
    lr = lr_at(step, cfg)
    t = step + 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m[name]
            v = state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p.add_(m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p,
                   alpha=-lr)


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights, mean-normalized over the present classes.

    Absent classes get weight zero.
    """
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise ValueError("no class has any support")
    inv = np.zeros_like(counts)
    inv[present] = 1.0 / counts[present]
    inv[present] /= inv[present].mean()
    return inv.astype(np.float32)


def named_parameters(modules: dict[str, torch.nn.Module]) -> dict[str, torch.Tensor]:
    params = {}
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            params[f"{prefix}.{name}"] = p
    return params


# --- corpus featurization -----------------------------------------------------


@dataclass
class ConversationFeatures:
    conv_id: str
    base: np.ndarray           # [2, T, 23] CMN MFCCs + pitch + voicing + vad
    labels: np.ndarray         # [2, T]
    teacher: np.ndarray | None  # [2, T, 768] aligned to 100 Hz, or None
    gt_vad: np.ndarray         # [2, T]
    annotations: list

    @property
    def num_frames(self) -> int:
        return self.base.shape[1]


def featurize_conversation(corpus_dir, conv_id: str, spec: AudioFrameSpec,
                           with_teacher: bool = True) -> ConversationFeatures:
    from pathlib import Path

    wav = load_wav(Path(corpus_dir) / f"{conv_id}.wav")
    annotations = load_annotations(corpus_dir, conv_id)
    gt_vad = np.load(Path(corpus_dir) / f"{conv_id}.vad.npy")
    tracks = [featurize_channel(wav[:, spk], spec) for spk in (0, 1)]
    base = np.stack([t.as_matrix() for t in tracks])
    num_frames = base.shape[1]
    labels = derive_frame_labels(annotations, gt_vad[:, :num_frames], num_frames)
    teacher = None
    if with_teacher:
        chans = []
        for spk in (0, 1):
            feats, rate = read_teacher_features(
                Path(corpus_dir) / f"{conv_id}.spk{spk}.teacher.tkf")
            chans.append(align_teacher_to_frames(feats, num_frames, teacher_rate=rate))
        teacher = np.stack(chans)
    return ConversationFeatures(conv_id, base.astype(np.float32), labels, teacher,
                                gt_vad[:, :num_frames], annotations)


def featurize_corpus(corpus_dir, spec: AudioFrameSpec | None = None,
                     with_teacher: bool = True, ids=None,
                     max_workers: int = 1) -> list[ConversationFeatures]:
    spec = spec or AudioFrameSpec()
    manifest = load_manifest(corpus_dir)
    ids = list(ids if ids is not None else manifest["ids"])
    with_teacher = with_teacher and manifest.get("with_teacher", True)
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(
                lambda cid: featurize_conversation(corpus_dir, cid, spec, with_teacher),
                ids))
    return [featurize_conversation(corpus_dir, cid, spec, with_teacher) for cid in ids]


# --- turn-model training --------------------------------------------------------


def corpus_class_weights(convs: list[ConversationFeatures]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for conv in convs:
        counts += np.bincount(conv.labels.reshape(-1), minlength=NUM_CLASSES)
    return class_weights_from_counts(counts)


@dataclass
class EotTrainState:
    step: int = 0
    schedule: MixSchedule = field(default_factory=lambda: MixSchedule(warmup_steps=250))
    adam: AdamWState = field(default_factory=AdamWState)
    teacher_cache: dict = field(default_factory=dict)


def _crop(conv: ConversationFeatures, rng: np.random.Generator, crop_frames: int):
    t = conv.num_frames
    if t <= crop_frames:
        return 0, t
    start = int(rng.integers(0, t - crop_frames + 1))
    return start, start + crop_frames


def eot_training_step(models: dict, convs: list[ConversationFeatures],
                      cfg: TrainConfig, state: EotTrainState,
                      rng: np.random.Generator, class_weights: np.ndarray,
                      policy: AugmentPolicy, crop_frames: int = 384) -> dict:
    """One optimizer step on a random batch of conversation crops.

    Applies boundary jitter and channel dropout, mixes teacher and student
    features per the schedule, and optimizes the multi-horizon loss plus the
    weighted distillation term.
    """
    eot: EotModel = models["eot"]
    student: StudentEncoder = models["student"]
    teacher: TeacherCompressor = models["teacher"]
    eot.train(), student.train(), teacher.train()

    lam = state.schedule.teacher_fraction(state.step)
    batch_base, batch_labels, batch_teacher = [], [], []
    for _ in range(cfg.batch_size):
        conv = convs[int(rng.integers(len(convs)))]
        lo, hi = _crop(conv, rng, crop_frames)
        base = conv.base[:, lo:hi].copy()
        labels = conv.labels[:, lo:hi]
        if policy.label_jitter_prob > 0:
            full, _ = jitter_labels(conv.annotations, conv.gt_vad, conv.num_frames,
                                    policy, rng)
            labels = full[:, lo:hi]
        base, _ = channel_dropout(base, policy, rng)
        batch_base.append(base)
        batch_labels.append(labels.copy())
        if conv.teacher is not None:
            batch_teacher.append(conv.teacher[:, lo:hi])
    base = torch.from_numpy(np.stack(batch_base))
    labels = torch.from_numpy(np.stack(batch_labels)).long()
    mfcc20 = base[..., :20]

    student_out = student(mfcc20.reshape(-1, mfcc20.shape[2], 20))
    student_out = student_out.reshape(base.shape[0], 2, -1, 32)
    if batch_teacher:
        need_grad = lam > 0.0
        teach_in = torch.from_numpy(np.stack(batch_teacher))
        if need_grad:
            teacher_out = teacher(teach_in)
        else:
            with torch.no_grad():
                teacher_out = teacher(teach_in)
        compressed = mix_features(student_out, teacher_out, state.schedule) \
            if need_grad else student_out
        d_loss = distill_loss(student_out, teacher_out)
    else:
        compressed = student_out
        d_loss = torch.zeros(())

    logits = eot.forward_conversation(base, compressed, training=True)
    t_loss = toeplitz_loss(logits, labels, cfg.horizon_weights, class_weights)
    loss = t_loss + cfg.distill_weight * d_loss

    params = named_parameters({"eot": eot, "student": student, "teacher": teacher})
    grads = backward(loss, params)
    grads, grad_norm = clip_gradients(grads, cfg.clip_norm)
    adamw_step(params, grads, state.adam, state.step, cfg)
    metrics = {
        "step": state.step,
        "lr": lr_at(state.step, cfg),
        "loss": float(loss.item()),
        "toeplitz": float(t_loss.item()),
        "distill": float(d_loss.item()),
        "teacher_fraction": lam,
        "grad_norm": grad_norm,
    }
    state.schedule.step = state.step + 1
    state.step += 1
    return metrics


def fit_eot(models: dict, convs: list[ConversationFeatures], cfg: TrainConfig,
            policy: AugmentPolicy | None = None, crop_frames: int = 384,
            log_path=None) -> list[dict]:
    """Train the turn model (plus student and teacher) for cfg.total_steps."""
    policy = policy or AugmentPolicy(label_jitter_prob=0.25, channel_dropout_prob=0.1)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    state = EotTrainState()
    state.schedule = MixSchedule(warmup_steps=max(cfg.warmup_steps * 2, 1))
    class_weights = corpus_class_weights(convs)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(cfg.total_steps):
            metrics = eot_training_step(models, convs, cfg, state, rng,
                                        class_weights, policy, crop_frames)
            history.append(metrics)
            if log_fh:
                log_fh.write(json.dumps(metrics) + "\n")
            if metrics["step"] % 100 == 0:
                logger.info("eot step %(step)d loss %(loss).4f lr %(lr).2e", metrics)
    finally:
        if log_fh:
            log_fh.close()
    return history


def pretrain_student(models: dict, convs: list[ConversationFeatures],
                     cfg: TrainConfig, steps: int = 150,
                     crop_frames: int = 512) -> list[dict]:
    """Optional first phase: match the student to compressed teacher targets
    on single-speaker material (solo channels), distillation loss only."""
    student: StudentEncoder = models["student"]
    teacher: TeacherCompressor = models["teacher"]
    rng = np.random.default_rng(cfg.seed + 1)
    params = named_parameters({"student": student})
    state = AdamWState()
    pre_cfg = TrainConfig(peak_lr=cfg.peak_lr, warmup_steps=min(20, steps - 1),
                          total_steps=steps, weight_decay=cfg.weight_decay,
                          seed=cfg.seed)
    history = []
    usable = [c for c in convs if c.teacher is not None]
    if not usable:
        return history
    for step in range(steps):
        conv = usable[int(rng.integers(len(usable)))]
        spk = int(rng.integers(2))
        lo, hi = _crop(conv, rng, crop_frames)
        mfcc = torch.from_numpy(conv.base[spk, lo:hi, :20][None])
        with torch.no_grad():
            target = teacher(torch.from_numpy(conv.teacher[spk, lo:hi][None]))
        loss = distill_loss(student(mfcc), target)
        grads = backward(loss, params)
        grads, _ = clip_gradients(grads, cfg.clip_norm)
        adamw_step(params, grads, state, step, pre_cfg)
        history.append({"step": step, "distill": float(loss.item())})
    return history


# --- segmenter training ---------------------------------------------------------


@dataclass
class SegmenterTrainConfig:
    num_speakers: int = 40
    steps: int = 500
    sample_seconds: float = 5.0
    batch_mixtures: int = 3
    margin: float = 0.2
    temperature: float = 0.1
    cosface_margin: float = 0.35
    cosface_scale: float = 30.0
    loss_weights: dict = field(default_factory=lambda: {
        "pit": 1.0, "cosface": 1.0, "supcon": 1.0,
        "triplet": 1.0, "diversity": 1.0, "js": 1.0,
    })


def make_speaker_pool(num_speakers: int, seed: int = 0) -> list[SpeakerVoice]:
    rng = np.random.default_rng(seed)
    return [make_voice(rng, "low" if i % 2 == 0 else "high")
            for i in range(num_speakers)]


def _segmenter_sample(pool, rng, synth_cfg: SynthConfig, seconds: float):
    """One training mixture: two talker streams with on/off activity."""
    n = int(seconds * SR)
    ids = rng.choice(len(pool), size=2, replace=False)
    streams = np.zeros((2, n), dtype=np.float32)
    masks = np.zeros((2, n), dtype=bool)
    for ch, spk in enumerate(ids):
        cursor = int(rng.uniform(0.0, 0.4) * SR) if ch == 0 else int(rng.uniform(0.2, 1.2) * SR)
        while cursor < n - int(0.4 * SR):
            dur = int(rng.uniform(0.5, 1.6) * SR)
            dur = min(dur, n - cursor)
            wave = render_utterance(pool[spk], dur, rng)
            streams[ch, cursor:cursor + dur] += wave
            masks[ch, cursor:cursor + dur] = np.abs(wave) > 1e-6
            cursor += dur + int(rng.uniform(0.2, 0.9) * SR)
    ratio = rng.uniform(*synth_cfg.mix_ratio_range)
    mixture, _ = mix_speakers(streams[0], streams[1], ratio)
    scaled = np.stack([ratio * streams[0], (1.0 - ratio) * streams[1]])
    return ids, scaled, masks, mixture


def _frame_any(mask: np.ndarray) -> np.ndarray:
    t = len(mask) // 160
    return mask[: t * 160].reshape(t, 160).any(axis=1)


def segmenter_training_step(segmenter: SegmenterModel, cosface: CosFaceLoss,
                            pool, rng, cfg: SegmenterTrainConfig,
                            synth_cfg: SynthConfig, params, adam: AdamWState,
                            opt_cfg: TrainConfig, step: int,
                            spec: AudioFrameSpec) -> dict:
    segmenter.train()
    total = torch.zeros(())
    parts = {k: 0.0 for k in ("pit", "cosface", "supcon", "triplet", "diversity", "js")}
    clean_embs, clean_ids = [], []
    aug_policy = AugmentPolicy(add_noise=True, add_reverb=bool(rng.integers(2)),
                               telephony=bool(rng.integers(2)))

    for _ in range(cfg.batch_mixtures):
        ids, cleans, masks, mixture = _segmenter_sample(pool, rng, synth_cfg,
                                                        cfg.sample_seconds)

        def feats(x):
            return torch.from_numpy(
                apply_cmn(extract_mfcc(x, 32, spec), "streaming")[None])

        mix_out = segmenter(feats(mixture), mode="train")
        aug1 = augment_signal(mixture, aug_policy, rng)
        aug2 = augment_signal(mixture, AugmentPolicy(add_noise=True), rng)
        out1 = segmenter(feats(aug1), mode="train")
        out2 = segmenter(feats(aug2), mode="train")
        clean_outs = [segmenter(feats(cleans[ch]), mode="train") for ch in (0, 1)]

        t = mix_out.z.shape[2]
        ref = np.zeros((segmenter.peel_cfg.num_peels, t), dtype=np.float32)
        for ch in (0, 1):
            ref[ch] = _frame_any(masks[ch])[:t]
        ref_t = torch.from_numpy(ref)
        activities = 1.0 - mix_out.s[0]
        pit, perm = pit_bce_loss(activities, ref_t)
        parts["pit"] += float(pit.item())
        total = total + cfg.loss_weights["pit"] * pit

        # clean-pass first peel carries the speaker on active frames
        for ch in (0, 1):
            active = torch.from_numpy(_frame_any(masks[ch])[:t])
            if active.sum() >= 4:
                emb = clean_outs[ch].z[0, 0][active]
                take = torch.randperm(emb.shape[0], generator=None)[:24]
                clean_embs.append(emb[take])
                clean_ids.append(torch.full((len(take),), int(ids[ch]), dtype=torch.long))

        # mixture peels should match matched clean embeddings on active frames
        for ch in (0, 1):
            peel_idx = perm.index(ch)  # peel the PIT assignment gave speaker ch
            active = torch.from_numpy(_frame_any(masks[ch])[:t])
            tri, _ = triplet_consistency_loss(
                mix_out.z[0, peel_idx], clean_outs[ch].z[0, 0],
                clean_outs[1 - ch].z[0, 0], active, cfg.margin)
            parts["triplet"] += float(tri.item())
            total = total + cfg.loss_weights["triplet"] * tri / 2.0

        div = peel_diversity_loss(mix_out.z[0])
        parts["diversity"] += float(div.item())
        total = total + cfg.loss_weights["diversity"] * div

        def act_dist(out):
            a = (1.0 - out.s[0]).clamp_min(1e-6).t()
            return a / a.sum(dim=-1, keepdim=True)

        tmin = min(mix_out.s.shape[2], out1.s.shape[2], out2.s.shape[2])
        js = js_consistency_loss(act_dist(mix_out)[:tmin], act_dist(out1)[:tmin],
                                 act_dist(out2)[:tmin])
        parts["js"] += float(js.item())
        total = total + cfg.loss_weights["js"] * js

    if clean_embs:
        embs = torch.cat(clean_embs)
        labels = torch.cat(clean_ids)
        if torch.unique(labels).numel() >= 2:
            cf = cosface(embs, labels)
            sc = supcon_loss(embs, labels, cfg.temperature)
            parts["cosface"] += float(cf.item())
            parts["supcon"] += float(sc.item())
            total = total + cfg.loss_weights["cosface"] * cf
            total = total + cfg.loss_weights["supcon"] * sc

    grads = backward(total, params)
    grads, grad_norm = clip_gradients(grads, opt_cfg.clip_norm)
    adamw_step(params, grads, adam, step, opt_cfg)
    return {"step": step, "loss": float(total.item()), "grad_norm": grad_norm,
            **parts}


def fit_segmenter(segmenter: SegmenterModel, cfg: SegmenterTrainConfig,
                  opt_cfg: TrainConfig | None = None, seed: int = 0,
                  log_path=None) -> list[dict]:
    """Train the segmenter on seeded synthetic mixtures with all six losses."""
    spec = AudioFrameSpec()
    synth_cfg = SynthConfig(seed=seed)
    pool = make_speaker_pool(cfg.num_speakers, seed)
    cosface = CosFaceLoss(segmenter.peel_cfg.dim, cfg.num_speakers,
                          cfg.cosface_margin, cfg.cosface_scale)
    opt_cfg = opt_cfg or TrainConfig(peak_lr=1e-3, warmup_steps=30,
                                     total_steps=cfg.steps, seed=seed)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = named_parameters({"segmenter": segmenter, "cosface_head": cosface})
    adam = AdamWState()
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            metrics = segmenter_training_step(segmenter, cosface, pool, rng, cfg,
                                              synth_cfg, params, adam, opt_cfg,
                                              step, spec)
            history.append(metrics)
            if log_fh:
                log_fh.write(json.dumps(metrics) + "\n")
            if step % 50 == 0:
                logger.info("segmenter step %(step)d loss %(loss).4f", metrics)
    finally:
        if log_fh:
            log_fh.close()
    return history
