"""Synthetic two-speaker conversations, frame labels, and augmentation.

Conversations are built from harmonic tone complexes with speaker-distinct
F0 bands, per-voice harmonic profiles and amplitude modulation. Turns carry
a pitch-and-amplitude fade over their final quarter second so turn endings
are acoustically marked; backchannels are short rising-pitch bursts from
the listener. Turn annotations convert to per-frame 5-class labels, and the
signal/label augmentations (noise, reverb, telephony, boundary jitter,
channel dropout) live here too.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .distill import TEACHER_DIM, write_teacher_features
from .eot import TurnState
from .features import AudioFrameSpec, frame_signal, mel_filterbank, save_wav

SR = 16000
HOP = 160
FINAL_WINDOW_FRAMES = 10

BACKCHANNEL_LEXICON = frozenset({
    "mm-hm", "mm hmm", "uh-huh", "yeah", "yes", "right", "ok", "okay",
    "sure", "i see", "got it",
})
BACKCHANNEL_MAX_DURATION_S = 1.0

FILLER_TEXTS = (
    "so i was thinking we could start with the schedule",
    "that part of the plan still needs another review",
    "let me walk you through what happened yesterday",
    "we should probably move the meeting to thursday",
    "the numbers from last quarter came in better than expected",
    "i want to double check the setup before we commit",
)


@dataclass
class TurnAnnotation:
    speaker: int                 # 0 or 1
    start_frame: int
    end_frame: int               # last speech frame of the utterance
    kind: str = "turn"           # "turn" | "backchannel"
    transcript: str | None = None

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError("annotation start must not exceed end")
        if self.speaker not in (0, 1):
            raise ValueError("speaker must be 0 or 1")
        if self.kind not in ("turn", "backchannel"):
            raise ValueError(f"unknown annotation kind {self.kind!r}")


def normalize_transcript(text: str) -> str:
    text = text.lower().strip()
    text = re.sub(r"[.,!?;:]+", "", text)
    return re.sub(r"\s+", " ", text)


def detect_backchannels(annotations: list[TurnAnnotation],
                        frame_rate: int = 100) -> list[TurnAnnotation]:
    """Reassign kind via lexical + durational heuristics.

    A segment becomes a backchannel iff its normalized transcript is in the
    lexicon and it lasts at most one second. Segments without transcripts
    are left untouched.
    """
    out = []
    for ann in annotations:
        kind = ann.kind
        if ann.transcript is not None:
            duration_s = (ann.end_frame - ann.start_frame + 1) / frame_rate
            is_bc = (normalize_transcript(ann.transcript) in BACKCHANNEL_LEXICON
                     and duration_s <= BACKCHANNEL_MAX_DURATION_S)
            kind = "backchannel" if is_bc else "turn"
        out.append(TurnAnnotation(ann.speaker, ann.start_frame, ann.end_frame,
                                  kind, ann.transcript))
    return out


def derive_frame_labels(annotations: list[TurnAnnotation], vad: np.ndarray,
                        num_frames: int) -> np.ndarray:
    """Per-speaker 5-class frame labels from turn annotations.

    ``vad`` is [2, T] binary. Inside a turn, active frames are Speech and
    silent frames Interim; a 10-frame Final window starts at each turn's
    last speech frame; backchannel spans are Backchannel; everything else
    is Initial. Where rules collide the precedence is
    Final > Backchannel > Speech > Interim.
    """
    vad = np.asarray(vad)
    if vad.shape != (2, num_frames):
        raise ValueError(f"vad must be [2, {num_frames}]")
    for spk in (0, 1):
        spans = sorted((a.start_frame, a.end_frame) for a in annotations
                       if a.speaker == spk)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 <= e0:
                raise ValueError(
                    f"speaker {spk} has overlapping annotations at frames {s1} <= {e0}"
                )
    labels = np.full((2, num_frames), TurnState.INITIAL, dtype=np.uint8)
    turns = [a for a in annotations if a.kind == "turn"]
    bcs = [a for a in annotations if a.kind == "backchannel"]
    for ann in turns:
        s, e = ann.start_frame, min(ann.end_frame, num_frames - 1)
        if s >= num_frames:
            raise ValueError("annotation outside the label track")
        span = slice(s, e + 1)
        active = vad[ann.speaker, span] > 0
        labels[ann.speaker, span] = np.where(active, TurnState.SPEECH, TurnState.INTERIM)
    for ann in bcs:
        s, e = ann.start_frame, min(ann.end_frame, num_frames - 1)
        labels[ann.speaker, s:e + 1] = TurnState.BACKCHANNEL
    for ann in turns:
        t_end = ann.end_frame
        labels[ann.speaker, t_end:min(t_end + FINAL_WINDOW_FRAMES, num_frames)] = TurnState.FINAL
    return labels


# --- synthetic voices -------------------------------------------------------


@dataclass
class SpeakerVoice:
    f0_lo: float
    f0_hi: float
    harmonic_amps: np.ndarray
    am_rate_hz: float
    level: float = 0.3


def make_voice(rng: np.random.Generator, band: str) -> SpeakerVoice:
    if band == "low":
        base = rng.uniform(100.0, 150.0)
    elif band == "high":
        base = rng.uniform(185.0, 260.0)
    else:
        raise ValueError(f"unknown band {band!r}")
    n_harm = 12
    decay = rng.uniform(0.6, 0.8)
    amps = decay ** np.arange(n_harm) * (0.5 + rng.uniform(0.0, 1.0, n_harm))
    amps /= amps.max()
    return SpeakerVoice(
        f0_lo=base * 0.95, f0_hi=base * 1.05,
        harmonic_amps=amps.astype(np.float32),
        am_rate_hz=rng.uniform(2.5, 6.0),
    )


def render_utterance(voice: SpeakerVoice, n_samples: int, rng: np.random.Generator,
                     final_fade: bool = False, rising: bool = False) -> np.ndarray:
    """One utterance of harmonic 'speech' with AM and optional turn-final fade."""
    t = np.arange(n_samples, dtype=np.float32) / SR
    f0_start = rng.uniform(voice.f0_lo, voice.f0_hi)
    f0_end = f0_start * 1.25 if rising else f0_start * rng.uniform(0.95, 1.05)
    f0 = np.linspace(f0_start, f0_end, n_samples).astype(np.float32)
    f0 *= 1.0 + 0.015 * np.sin(2 * np.pi * 5.0 * t)  # vibrato
    amp = np.ones(n_samples, dtype=np.float32)
    if final_fade:
        fade_n = min(int(0.25 * SR), max(n_samples // 3, 1))
        ramp = np.linspace(1.0, 0.0, fade_n).astype(np.float32)
        f0[-fade_n:] *= 1.0 - 0.2 * (1.0 - ramp)
        amp[-fade_n:] = 0.25 + 0.75 * ramp
    phase = 2 * np.pi * np.cumsum(f0) / SR
    x = np.zeros(n_samples, dtype=np.float32)
    for h, a in enumerate(voice.harmonic_amps, start=1):
        x += a * np.sin(h * phase).astype(np.float32)
    x *= 1.0 + 0.25 * np.sin(2 * np.pi * voice.am_rate_hz * t
                             + rng.uniform(0, 2 * np.pi)).astype(np.float32)
    edge = min(int(0.010 * SR), max(n_samples // 4, 1))
    env = np.ones(n_samples, dtype=np.float32)
    env[:edge] = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    env[-edge:] = (0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge))[::-1]
    x *= amp * env
    peak = np.abs(x).max()
    if peak > 0:
        x *= voice.level / peak
    return x


# --- conversation synthesis -------------------------------------------------


@dataclass
class SynthConfig:
    seed: int = 0
    num_conversations: int = 1
    turns_per_conversation: tuple[int, int] = (6, 10)
    turn_duration_s: tuple[float, float] = (1.5, 4.0)
    gap_s: tuple[float, float] = (0.6, 1.5)
    pause_s: tuple[float, float] = (0.1, 0.4)
    phrases_per_turn: tuple[int, int] = (1, 3)
    backchannel_prob: float = 0.35
    backchannel_duration_s: tuple[float, float] = (0.15, 0.6)
    overlap_prob: float = 0.1
    overlap_ratio: tuple[float, float] = (0.3, 0.7)
    mix_ratio_range: tuple[float, float] = (0.3, 0.7)
    noise_snr_db: tuple[float, float] = (10.0, 15.0)
    reverb_t60_ms: tuple[float, float] = (100.0, 800.0)

    def __post_init__(self):
        for name in ("turn_duration_s", "gap_s", "pause_s", "backchannel_duration_s",
                     "overlap_ratio", "mix_ratio_range", "noise_snr_db",
                     "reverb_t60_ms"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"infeasible range for {name}: ({lo}, {hi})")
        lo, hi = self.turns_per_conversation
        if not (1 <= lo <= hi):
            raise ValueError("turns_per_conversation must be a valid positive range")
        for p in (self.backchannel_prob, self.overlap_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


def _uniform(rng, bounds):
    return rng.uniform(bounds[0], bounds[1])


def synth_conversation(cfg: SynthConfig, seed=None
                       ) -> tuple[np.ndarray, list[TurnAnnotation], np.ndarray]:
    """Generate one conversation.

    Returns (stereo audio [N, 2], annotations, ground-truth VAD [2, T]).
    Deterministic for a fixed (cfg, seed).
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    voices = (make_voice(rng, "low"), make_voice(rng, "high"))
    n_turns = int(rng.integers(cfg.turns_per_conversation[0],
                               cfg.turns_per_conversation[1] + 1))
    # events: (speaker, start_sample, waveform, transcript)
    events: list[tuple[int, int, np.ndarray, str]] = []
    cursor = int(rng.uniform(0.3, 0.8) * SR)
    speaker = int(rng.integers(2))

    for _ in range(n_turns):
        n_phrases = int(rng.integers(cfg.phrases_per_turn[0],
                                     cfg.phrases_per_turn[1] + 1))
        total_s = _uniform(rng, cfg.turn_duration_s)
        weights = rng.uniform(0.5, 1.0, n_phrases)
        phrase_s = total_s * weights / weights.sum()
        pieces: list[np.ndarray] = []
        for p in range(n_phrases):
            n = max(int(phrase_s[p] * SR), int(0.3 * SR))
            pieces.append(render_utterance(voices[speaker], n, rng,
                                           final_fade=(p == n_phrases - 1)))
            if p < n_phrases - 1:
                pieces.append(np.zeros(int(_uniform(rng, cfg.pause_s) * SR),
                                       dtype=np.float32))
        turn_wave = np.concatenate(pieces)
        transcript = FILLER_TEXTS[int(rng.integers(len(FILLER_TEXTS)))]
        # a turn may trail the speaker's own earlier backchannel: push it clear
        cursor = _next_clear_start(events, speaker, cursor, len(turn_wave))
        events.append((speaker, cursor, turn_wave, transcript))

        listener = 1 - speaker
        if rng.uniform() < cfg.backchannel_prob and len(turn_wave) > SR:
            bc_n = int(_uniform(rng, cfg.backchannel_duration_s) * SR)
            lo = cursor + len(turn_wave) // 4
            hi = cursor + len(turn_wave) // 2
            bc_start = int(rng.integers(lo, hi + 1))
            if not _collides(events, listener, bc_start, bc_n):
                bc_wave = render_utterance(voices[listener], bc_n, rng, rising=True)
                text = sorted(BACKCHANNEL_LEXICON)[int(rng.integers(len(BACKCHANNEL_LEXICON)))]
                events.append((listener, bc_start, bc_wave, text))

        gap = int(_uniform(rng, cfg.gap_s) * SR)
        next_start = cursor + len(turn_wave) + gap
        if rng.uniform() < cfg.overlap_prob:
            overlap = int(_uniform(rng, cfg.overlap_ratio) * 0.8 * SR)
            overlap = min(overlap, len(turn_wave) // 3)
            next_start = cursor + len(turn_wave) - overlap
        cursor = next_start
        speaker = listener

    total_samples = cursor + int(0.5 * SR)
    total_samples = ((total_samples + HOP - 1) // HOP) * HOP
    audio = np.zeros((total_samples, 2), dtype=np.float32)
    active = np.zeros((2, total_samples), dtype=bool)
    annotations = []
    for spk, start, wave, text in events:
        end = min(start + len(wave), total_samples)
        piece = wave[: end - start]
        audio[start:end, spk] += piece
        hot = np.abs(piece) > 1e-6  # in-turn pauses stay silent
        active[spk, start:end] |= hot
        hot_idx = np.flatnonzero(hot)
        annotations.append(TurnAnnotation(
            speaker=spk,
            start_frame=(start + int(hot_idx[0])) // HOP,
            end_frame=(start + int(hot_idx[-1])) // HOP,
            kind="turn",
            transcript=text,
        ))
    annotations = detect_backchannels(annotations)
    num_frames = total_samples // HOP
    gt_vad = active[:, : num_frames * HOP].reshape(2, num_frames, HOP).any(axis=2)
    return audio, annotations, gt_vad.astype(np.uint8)


def _collides(events, speaker, start, n, margin=SR // 5) -> bool:
    for spk, s, wave, _ in events:
        if spk != speaker:
            continue
        if start < s + len(wave) + margin and s < start + n + margin:
            return True
    return False


def _next_clear_start(events, speaker, start, n, margin=SR // 5) -> int:
    while _collides(events, speaker, start, n, margin):
        blockers = [s + len(w) for spk, s, w, _ in events
                    if spk == speaker and start < s + len(w) + margin]
        start = max(blockers) + margin
    return start


# --- mixing and signal augmentation ------------------------------------------


def mix_speakers(clean_a: np.ndarray, clean_b: np.ndarray, ratio: float
                 ) -> tuple[np.ndarray, float]:
    """Mix two sources as ratio * a + (1 - ratio) * b.

    Returns (mixture, achieved SIR in dB, computed from the scaled RMS of a
    against the scaled RMS of b).
    """
    if not 0.3 <= ratio <= 0.7:
        raise ValueError(f"mix ratio {ratio} outside [0.3, 0.7]")
    n = max(len(clean_a), len(clean_b))
    a = np.zeros(n, dtype=np.float32)
    b = np.zeros(n, dtype=np.float32)
    a[: len(clean_a)] = clean_a
    b[: len(clean_b)] = clean_b
    mixture = ratio * a + (1.0 - ratio) * b
    rms_a = float(np.sqrt(np.mean(a * a)))
    rms_b = float(np.sqrt(np.mean(b * b)))
    sir_db = 20.0 * np.log10((ratio * rms_a) / max((1.0 - ratio) * rms_b, 1e-12))
    return mixture, float(sir_db)


def mu_law_encode(x: np.ndarray, mu: int = 255, bits: int = 8) -> np.ndarray:
    """Sign-magnitude companded codes: 1 sign bit + (bits - 1) magnitude bits.

    Zero encodes exactly (magnitude 0), matching the structure of standard
    8-bit telephony codecs with mu = 255.
    """
    x = np.clip(x, -1.0, 1.0)
    y = np.log1p(mu * np.abs(x)) / np.log1p(mu)
    mag_levels = (1 << (bits - 1)) - 1
    mag = np.round(y * mag_levels).astype(np.int64)
    sign_bit = (x < 0).astype(np.int64) << (bits - 1)
    return sign_bit | mag


def mu_law_decode(codes: np.ndarray, mu: int = 255, bits: int = 8) -> np.ndarray:
    mag_levels = (1 << (bits - 1)) - 1
    mag = codes & mag_levels
    negative = (codes >> (bits - 1)) & 1
    y = mag.astype(np.float64) / mag_levels
    x = ((1.0 + mu) ** y - 1.0) / mu
    return np.where(negative == 1, -x, x).astype(np.float32)


def synth_rir(t60_ms: float, rng: np.random.Generator, sr: int = SR) -> np.ndarray:
    """Exponential-decay white-noise tail with a unit direct path at t=0."""
    n = max(int(sr * t60_ms / 1000.0), 8)
    t = np.arange(n) / sr
    tail = rng.standard_normal(n).astype(np.float32) * np.exp(
        -6.9078 * t / (t60_ms / 1000.0)
    ).astype(np.float32)
    tail *= 0.3
    tail[0] = 1.0
    return tail


_TEL_FIR = scipy.signal.firwin(63, 3400.0, fs=SR).astype(np.float32)


def telephony_chain(audio: np.ndarray) -> np.ndarray:
    """8 kHz decimation, 8-bit mu-law round trip, interpolation back to 16 kHz.

    Output duration matches the input to within one sample (it is padded or
    cut back to the exact input length).
    """
    n = len(audio)
    low = np.convolve(audio, _TEL_FIR, mode="same")
    narrow = low[::2]
    narrow = mu_law_decode(mu_law_encode(narrow))
    wide = np.zeros(2 * len(narrow), dtype=np.float32)
    wide[::2] = narrow
    restored = 2.0 * np.convolve(wide, _TEL_FIR, mode="same")
    if len(restored) < n:
        restored = np.pad(restored, (0, n - len(restored)))
    return restored[:n].astype(np.float32)


@dataclass
class AugmentPolicy:
    label_jitter_prob: float = 0.0
    jitter_window_s: float = 1.0
    channel_dropout_prob: float = 0.0
    add_noise: bool = False
    noise_snr_db: tuple[float, float] = (10.0, 15.0)
    add_reverb: bool = False
    reverb_t60_ms: tuple[float, float] = (100.0, 800.0)
    telephony: bool = False
    # acoustic-echo artifact simulation is reserved but not implemented
    aec_artifacts: bool = False

    def __post_init__(self):
        for p in (self.label_jitter_prob, self.channel_dropout_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.aec_artifacts:
            raise NotImplementedError("echo-artifact simulation is not available")


def augment_signal(audio: np.ndarray, policy: AugmentPolicy,
                   rng: np.random.Generator) -> np.ndarray:
    """Seeded multi-condition signal corruption: reverb, noise, telephony.

    With every stage toggled off this is the identity (bit-exact). Sequence
    length is preserved by every stage.
    """
    out = audio
    if policy.add_reverb:
        rir = synth_rir(_uniform(rng, policy.reverb_t60_ms), rng)
        out = scipy.signal.fftconvolve(out, rir)[: len(audio)].astype(np.float32)
    if policy.add_noise:
        snr_db = _uniform(rng, policy.noise_snr_db)
        noise = rng.standard_normal(len(out)).astype(np.float32)
        rms_sig = float(np.sqrt(np.mean(out * out)))
        if rms_sig > 0:
            rms_noise = float(np.sqrt(np.mean(noise * noise)))
            target = rms_sig / (10.0 ** (snr_db / 20.0))
            out = out + noise * (target / max(rms_noise, 1e-12))
    if policy.telephony:
        out = telephony_chain(out)
    return out.astype(np.float32)


# --- label-level augmentation -------------------------------------------------


def jitter_labels(annotations: list[TurnAnnotation], vad: np.ndarray,
                  num_frames: int, policy: AugmentPolicy,
                  rng: np.random.Generator
                  ) -> tuple[np.ndarray, list[TurnAnnotation]]:
    """Delay a random subset of turn boundaries by up to the jitter window.

    Selected turns get their end shifted later by a uniform offset in
    [0, jitter_window] frames (clipped at the track end and at the next
    same-speaker annotation); labels are re-derived so the Final window and
    the in-turn region move consistently.
    """
    window_frames = int(round(policy.jitter_window_s * 100))
    jittered = [TurnAnnotation(a.speaker, a.start_frame, a.end_frame, a.kind,
                               a.transcript) for a in annotations]
    order = sorted(range(len(jittered)),
                   key=lambda i: (jittered[i].speaker, jittered[i].start_frame))
    next_start: dict[int, int] = {}
    limits = [num_frames] * len(jittered)
    for spk in (0, 1):
        idxs = [i for i in order if jittered[i].speaker == spk]
        for a, b in zip(idxs, idxs[1:]):
            limits[a] = jittered[b].start_frame
    for i, ann in enumerate(jittered):
        if ann.kind != "turn" or rng.uniform() >= policy.label_jitter_prob:
            continue
        offset = int(rng.integers(0, window_frames + 1))
        new_end = min(ann.end_frame + offset, num_frames - 1, limits[i] - 1)
        jittered[i] = TurnAnnotation(ann.speaker, ann.start_frame,
                                     max(new_end, ann.end_frame), ann.kind,
                                     ann.transcript)
    return derive_frame_labels(jittered, vad, num_frames), jittered


def channel_dropout(features: np.ndarray, policy: AugmentPolicy,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero a speaker's whole feature stream with the configured probability.

    ``features`` is [2, T, D]; labels are never touched. Returns the new
    array and the per-speaker dropped mask.
    """
    dropped = rng.uniform(size=2) < policy.channel_dropout_prob
    if not dropped.any():
        return features, dropped
    out = features.copy()
    for spk in (0, 1):
        if dropped[spk]:
            out[spk] = 0.0
    return out, dropped


# --- synthetic teacher features ----------------------------------------------


_TEACHER_PROJ_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _teacher_projection(seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    if seed not in _TEACHER_PROJ_CACHE:
        rng = np.random.default_rng(seed)
        w = (rng.standard_normal((64, TEACHER_DIM)) / 8.0).astype(np.float32)
        b = (rng.standard_normal(TEACHER_DIM) * 0.1).astype(np.float32)
        _TEACHER_PROJ_CACHE[seed] = (w, b)
    return _TEACHER_PROJ_CACHE[seed]


def synth_teacher_features(audio: np.ndarray, spec: AudioFrameSpec | None = None
                           ) -> np.ndarray:
    """Stand-in 50 Hz 768-D feature track derived from the log-mel spectrum.

    A fixed random projection of per-frame 64-mel energies; deterministic in
    the audio. Used to exercise the teacher ingestion path on synthetic
    corpora where no external speech encoder is available.
    """

    spec = spec or AudioFrameSpec()
    frames = frame_signal(audio, spec)
    if len(frames) == 0:
        return np.zeros((0, TEACHER_DIM), dtype=np.float32)
    win = np.hamming(spec.window).astype(np.float32)
    spectrum = np.fft.rfft(frames * win, n=512, axis=1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2).astype(np.float32)
    mel = np.log(power @ mel_filterbank(64, 512, spec.sample_rate).T + 1e-10)
    mel = (mel - mel.mean(axis=0)) / (mel.std(axis=0) + 1e-5)
    w, b = _teacher_projection()
    feats = np.tanh(mel[::2] @ w + b)
    return feats.astype(np.float32)


# --- corpus I/O ----------------------------------------------------------------


def annotation_to_json(conv_id: str, ann: TurnAnnotation) -> dict:
    return {
        "conv_id": conv_id,
        "speaker": ann.speaker,
        "start_frame": ann.start_frame,
        "end_frame": ann.end_frame,
        "kind": ann.kind,
        "transcript": ann.transcript,
    }


def annotation_from_json(obj: dict) -> TurnAnnotation:
    return TurnAnnotation(obj["speaker"], obj["start_frame"], obj["end_frame"],
                          obj["kind"], obj.get("transcript"))


def write_corpus(out_dir, cfg: SynthConfig, with_teacher: bool = True) -> dict:
    """Generate and persist a corpus; returns the manifest dict.

    Layout per conversation: <id>.wav (stereo), <id>.turns.jsonl,
    <id>.vad.npy, and <id>.spk{0,1}.teacher.tkf when requested.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(cfg.num_conversations):
        conv_id = f"conv_{i:04d}"
        seed = np.random.SeedSequence((cfg.seed, i))
        audio, annotations, gt_vad = synth_conversation(cfg, seed)
        save_wav(out_dir / f"{conv_id}.wav", audio)
        with open(out_dir / f"{conv_id}.turns.jsonl", "w") as fh:
            for ann in annotations:
                fh.write(json.dumps(annotation_to_json(conv_id, ann)) + "\n")
        np.save(out_dir / f"{conv_id}.vad.npy", gt_vad)
        if with_teacher:
            for spk in (0, 1):
                write_teacher_features(
                    out_dir / f"{conv_id}.spk{spk}.teacher.tkf",
                    synth_teacher_features(audio[:, spk]),
                )
        ids.append(conv_id)
    manifest = {"ids": ids, "config": asdict(cfg), "with_teacher": with_teacher}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(corpus_dir) -> dict:
    with open(Path(corpus_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_annotations(corpus_dir, conv_id: str) -> list[TurnAnnotation]:
    anns = []
    with open(Path(corpus_dir) / f"{conv_id}.turns.jsonl") as fh:
        for line in fh:
            if line.strip():
                anns.append(annotation_from_json(json.loads(line)))
    return anns
