"""Causal 100 Hz audio front-end.

Converts 16 kHz PCM into per-frame features: MFCCs (20-D for the turn model,
32-D for the speaker segmenter), autocorrelation pitch (F0 + voicing), an
energy VAD with adaptive noise floor, cepstral mean normalization, and the
46-D stereo frame layout consumed by the end-of-turn model.

Framing is strictly causal: the frame at index ``t`` sees only samples with
index below ``(t + 1) * hop``. The first frame is left-padded with zeros so
that ``num_frames == num_samples // hop`` always holds.
"""

from __future__ import annotations


from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile

__all__ = [
    "AudioFrameSpec",
    "SegmenterFeatureSpec",
    "SpeakerBaseFeatures",
    "load_wav",
    "frame_signal",
    "extract_mfcc",
    "extract_pitch",
    "pitch_single_frame",
    "energy_vad",
    "apply_cmn",
    "log_normalize_f0",
    "assemble_stereo_frames",
    "featurize_channel",
    "StreamingChannelFrontend",
    "StreamingCmn",
    "VadState",
]

LOG_FLOOR = 1e-10
PITCH_ENERGY_FLOOR = 1e-8
VOICING_MIN_FOR_F0 = 0.25


@dataclass(frozen=True)
class AudioFrameSpec:
    """Framing parameters for the 100 Hz front-end (20 ms window, 10 ms hop)."""

    sample_rate: int = 16000
    window: int = 320
    hop: int = 160

    def __post_init__(self):
        if self.sample_rate != 16000:
            raise ValueError(
                f"unsupported sample rate {self.sample_rate} Hz: the front-end "
                "runs at 16 kHz only, resample the input first"
            )
        if self.window != 2 * self.hop:
            raise ValueError("window must equal 2 * hop")

    @property
    def frame_rate(self) -> int:
        return self.sample_rate // self.hop

    def num_frames(self, num_samples: int) -> int:
        return num_samples // self.hop


@dataclass(frozen=True)
class SegmenterFeatureSpec:
    """Feature geometry for the segmentation path (32-D MFCCs)."""

    mfcc_dim: int = 32
    frame: AudioFrameSpec = field(default_factory=AudioFrameSpec)

    def __post_init__(self):
        if self.mfcc_dim != 32:
            raise ValueError("segmenter path uses 32-D MFCCs")


@dataclass
class SpeakerBaseFeatures:
    """Per-speaker 23-D base features at 100 Hz.

    ``mfcc`` holds 20 CMN-applied coefficients, ``f0`` is the log-normalized
    fundamental frequency, ``voicing`` lies in [0, 1] and ``vad`` is binary.
    """

    mfcc: np.ndarray  # [T, 20]
    f0: np.ndarray  # [T]
    voicing: np.ndarray  # [T]
    vad: np.ndarray  # [T]

    def __post_init__(self):
        t = self.mfcc.shape[0]
        if self.mfcc.ndim != 2 or self.mfcc.shape[1] != 20:
            raise ValueError("mfcc must be [T, 20]")
        for name in ("f0", "voicing", "vad"):
            if getattr(self, name).shape != (t,):
                raise ValueError(f"{name} must be [T]")

    def __len__(self) -> int:
        return self.mfcc.shape[0]

    def as_matrix(self) -> np.ndarray:
        """Stack into [T, 23] ordered (mfcc, f0, voicing, vad)."""
        return np.column_stack(
            [self.mfcc, self.f0, self.voicing, self.vad]
        ).astype(np.float32)


def load_wav(path) -> np.ndarray:
    """Load a 16 kHz PCM WAV (16-bit int or 32-bit float, 1 or 2 channels).

    Returns float32 samples in [-1, 1], shape [N] or [N, 2].
    """
    rate, data = scipy.io.wavfile.read(path)
    if rate != 16000:
        raise ValueError(
            f"{path}: sample rate {rate} Hz not supported, resample to 16 kHz"
        )
    if data.dtype == np.int16:
        audio = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        audio = data.copy()
    elif data.dtype == np.int32:
        audio = data.astype(np.float32) / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if audio.ndim > 2 or (audio.ndim == 2 and audio.shape[1] > 2):
        raise ValueError(f"{path}: expected 1 or 2 channels")
    return audio


def save_wav(path, audio: np.ndarray, sample_rate: int = 16000) -> None:
    scipy.io.wavfile.write(path, sample_rate, audio.astype(np.float32))


def frame_signal(audio: np.ndarray, spec: AudioFrameSpec, window: int | None = None) -> np.ndarray:
    """Slice audio into causal frames ending at ``(t + 1) * hop``.

    Frame ``t`` covers samples ``[(t + 1) * hop - window, (t + 1) * hop)``;
    indices before the stream start read as zero.
    """
    if window is None:
        window = spec.window
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 1:
        raise ValueError("frame_signal expects a mono sample sequence")
    n_frames = spec.num_frames(len(audio))
    if n_frames == 0:
        return np.zeros((0, window), dtype=np.float32)
    pad = window - spec.hop
    padded = np.concatenate([np.zeros(pad, dtype=np.float32), audio])
    view = np.lib.stride_tricks.sliding_window_view(padded, window)[:: spec.hop]
    return np.ascontiguousarray(view[:n_frames])


def _mel_hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 64, n_fft: int = 512, sample_rate: int = 16000,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular mel filterbank, shape [n_mels, n_fft // 2 + 1]."""
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(_mel_hz_to_mel(fmin), _mel_hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, shape [n_out, n_in]."""
    n = np.arange(n_in)
    k = np.arange(n_out)[:, None]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    mat *= np.sqrt(2.0 / n_in)
    mat[0] *= np.sqrt(0.5)
    return mat.astype(np.float32)


_MFCC_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _mfcc_operators(dim: int, spec: AudioFrameSpec, n_fft: int = 512, n_mels: int = 64):
    key = (dim, spec.window, spec.sample_rate, n_fft, n_mels)
    if key not in _MFCC_CACHE:
        win = np.hamming(spec.window).astype(np.float32)
        mel = mel_filterbank(n_mels, n_fft, spec.sample_rate)
        dct = dct_matrix(dim, n_mels)
        _MFCC_CACHE[key] = (win, mel, dct)
    return _MFCC_CACHE[key]


def mfcc_from_frames(frames: np.ndarray, dim: int, spec: AudioFrameSpec,
                     n_fft: int = 512, n_mels: int = 64) -> np.ndarray:
    """MFCCs for pre-sliced frames [n, window] (shared by batch and streaming)."""
    win, mel, dct = _mfcc_operators(dim, spec, n_fft, n_mels)
    spectrum = np.fft.rfft(frames * win, n=n_fft, axis=1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2).astype(np.float32)
    mel_energy = power @ mel.T
    log_mel = np.log(mel_energy + LOG_FLOOR)
    return (log_mel @ dct.T).astype(np.float32)


def extract_mfcc(audio: np.ndarray, dim: int, spec: AudioFrameSpec | None = None) -> np.ndarray:
    """Causal MFCC sequence, shape [num_samples // hop, dim].

    ``dim`` must be 20 (turn-model path) or 32 (segmenter path).
    """
    spec = spec or AudioFrameSpec()
    if dim not in (20, 32):
        raise ValueError(f"mfcc dim must be 20 or 32, got {dim}")
    frames = frame_signal(audio, spec)
    return mfcc_from_frames(frames, dim, spec)


PITCH_WINDOW = 800  # 50 ms of context per pitch frame
PITCH_FMIN = 60.0
PITCH_FMAX = 400.0


def _pitch_lags(spec: AudioFrameSpec) -> np.ndarray:
    lag_min = int(spec.sample_rate / PITCH_FMAX)
    lag_max = int(round(spec.sample_rate / PITCH_FMIN))
    return np.arange(lag_min, lag_max + 1)


PEAK_RELATIVE_THRESHOLD = 0.87  # sub-harmonic suppression


def _pick_peaks(rho: np.ndarray) -> np.ndarray:
    """Lowest-lag local maximum within reach of the global max, per frame.

    ``rho`` is [n_lags, n_frames]. A periodic signal peaks at every multiple
    of its period; taking the earliest strong peak avoids octave errors.
    """
    best = np.argmax(rho, axis=0)
    best_rho = rho[best, np.arange(rho.shape[1])]
    thresh = PEAK_RELATIVE_THRESHOLD * np.maximum(best_rho, 0.0)
    up = np.ones_like(rho, dtype=bool)
    up[1:] = rho[1:] >= rho[:-1]
    down = np.ones_like(rho, dtype=bool)
    down[:-1] = rho[:-1] >= rho[1:]
    candidate = up & down & (rho >= thresh[None, :]) & (rho > 0)
    has = candidate.any(axis=0)
    first = np.argmax(candidate, axis=0)
    return np.where(has, first, best)


def pitch_from_frames(frames: np.ndarray, spec: AudioFrameSpec) -> tuple[np.ndarray, np.ndarray]:
    """Normalized-autocorrelation pitch for pre-sliced frames [n, PITCH_WINDOW].

    Returns (f0_hz, voicing). Unvoiced and silent frames carry f0 == 0.
    """
    n, w = frames.shape
    lags = _pitch_lags(spec)
    if n == 0:
        z = np.zeros(0, dtype=np.float32)
        return z, z.copy()
    sq = frames * frames
    csum = np.concatenate([np.zeros((n, 1), dtype=np.float64),
                           np.cumsum(sq, axis=1, dtype=np.float64)], axis=1)
    total = csum[:, w]
    rho = np.full((len(lags), n), -1.0, dtype=np.float32)
    for i, lag in enumerate(lags):
        num = np.einsum("ij,ij->i", frames[:, lag:], frames[:, : w - lag])
        e_head = total - csum[:, lag]          # energy of w[lag:]
        e_tail = csum[:, w - lag]              # energy of w[:w-lag]
        denom = np.sqrt(np.maximum(e_head * e_tail, 0.0))
        valid = denom > PITCH_ENERGY_FLOOR
        rho[i, valid] = (num[valid] / denom[valid]).astype(np.float32)
    best = _pick_peaks(rho)
    best_rho = rho[best, np.arange(n)]
    voicing = np.clip(best_rho, 0.0, 1.0).astype(np.float32)
    silent = total < PITCH_ENERGY_FLOOR
    voicing[silent] = 0.0

    # parabolic refinement of the autocorrelation peak
    f0 = np.zeros(n, dtype=np.float32)
    for t in range(n):
        if voicing[t] < VOICING_MIN_FOR_F0:
            continue
        b = best[t]
        lag = float(lags[b])
        if 0 < b < len(lags) - 1:
            y0, y1, y2 = float(rho[b - 1, t]), float(rho[b, t]), float(rho[b + 1, t])
            denom = y0 - 2.0 * y1 + y2
            if abs(denom) > 1e-12:
                delta = 0.5 * (y0 - y2) / denom
                lag += float(np.clip(delta, -0.5, 0.5))
        f0[t] = spec.sample_rate / lag
    return f0, voicing


def extract_pitch(audio: np.ndarray, spec: AudioFrameSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (f0_hz, voicing) via normalized autocorrelation (60-400 Hz)."""
    spec = spec or AudioFrameSpec()
    frames = frame_signal(audio, spec, window=PITCH_WINDOW)
    return pitch_from_frames(frames, spec)


def pitch_single_frame(window: np.ndarray, spec: AudioFrameSpec) -> tuple[float, float]:
    """Pitch of one window, all lags in a single correlation pass.

    Computes the same normalized autocorrelation as the batch path (up to
    float summation order); used by the streaming front-end where per-lag
    slicing would dominate the frame budget.
    """
    w = np.asarray(window, dtype=np.float32)
    n = len(w)
    lags = _pitch_lags(spec)
    total = float(np.dot(w.astype(np.float64), w.astype(np.float64)))
    if total < PITCH_ENERGY_FLOOR:
        return 0.0, 0.0
    full = np.correlate(w, w, mode="full")  # index n-1+tau holds sum w[t]w[t-tau]
    num = full[n - 1 + lags[0]: n - 1 + lags[-1] + 1]
    csum = np.concatenate([[0.0], np.cumsum((w * w).astype(np.float64))])
    e_head = total - csum[lags]
    e_tail = csum[n - lags]
    denom = np.sqrt(np.maximum(e_head * e_tail, 0.0))
    rho = np.where(denom > PITCH_ENERGY_FLOOR, num / np.maximum(denom, 1e-30), -1.0)
    b = int(_pick_peaks(rho.astype(np.float32)[:, None])[0])
    voicing = float(np.clip(rho[b], 0.0, 1.0))
    if voicing < VOICING_MIN_FOR_F0:
        return 0.0, voicing
    lag = float(lags[b])
    if 0 < b < len(lags) - 1:
        y0, y1, y2 = float(rho[b - 1]), float(rho[b]), float(rho[b + 1])
        d = y0 - 2.0 * y1 + y2
        if abs(d) > 1e-12:
            lag += float(np.clip(0.5 * (y0 - y2) / d, -0.5, 0.5))
    return spec.sample_rate / lag, voicing


@dataclass
class VadState:
    """Adaptive noise-floor state for the energy VAD (one per stream)."""

    floor_db: float = -70.0
    hang: int = 0

    ABS_FLOOR_DB = -55.0
    FLOOR_RISE_DB = 0.05


def vad_step(rms: float, state: VadState, threshold_db: float, hangover: int) -> int:
    """Advance the VAD by one frame; returns the binary activity decision."""
    rms_db = 20.0 * np.log10(rms + LOG_FLOOR)
    if rms_db < state.floor_db:
        state.floor_db = rms_db
    else:
        state.floor_db = min(state.floor_db + VadState.FLOOR_RISE_DB, rms_db)
    raw = rms_db > max(state.floor_db + threshold_db, VadState.ABS_FLOOR_DB)
    if raw:
        state.hang = hangover
        return 1
    if state.hang > 0:
        state.hang -= 1
        return 1
    return 0


def energy_vad(audio: np.ndarray, spec: AudioFrameSpec | None = None,
               threshold_db: float = 10.0, hangover: int = 5) -> np.ndarray:
    """Binary activity per frame: windowed RMS against an adaptive noise floor,
    extended by ``hangover`` frames after the last above-threshold frame."""
    spec = spec or AudioFrameSpec()
    if hangover < 0:
        raise ValueError("hangover must be >= 0")
    frames = frame_signal(audio, spec)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    state = VadState()
    out = np.zeros(len(rms), dtype=np.uint8)
    for t in range(len(rms)):
        out[t] = vad_step(float(rms[t]), state, threshold_db, hangover)
    return out


class StreamingCmn:
    """Causal running-mean normalizer: m_t = d * m_{t-1} + (1 - d) * x_t."""

    def __init__(self, dim: int, decay: float = 0.995):
        self.decay = decay
        self.mean = np.zeros(dim, dtype=np.float32)

    def step(self, x: np.ndarray) -> np.ndarray:
        self.mean = self.decay * self.mean + (1.0 - self.decay) * x
        return (x - self.mean).astype(np.float32)


def apply_cmn(mfcc: np.ndarray, mode: str = "streaming", decay: float = 0.995) -> np.ndarray:
    """Cepstral mean normalization.

    ``utterance`` subtracts the per-coefficient mean of the whole sequence;
    ``streaming`` subtracts a causal running mean with the given decay.
    """
    mfcc = np.asarray(mfcc, dtype=np.float32)
    if mfcc.ndim != 2 or mfcc.shape[0] == 0:
        raise ValueError("apply_cmn expects a nonempty [T, dim] sequence")
    if mode == "utterance":
        return mfcc - mfcc.mean(axis=0, keepdims=True)
    if mode == "streaming":
        cmn = StreamingCmn(mfcc.shape[1], decay)
        out = np.empty_like(mfcc)
        for t in range(mfcc.shape[0]):
            out[t] = cmn.step(mfcc[t])
        return out
    raise ValueError(f"unknown CMN mode {mode!r}")


def log_normalize_f0(f0_hz: np.ndarray) -> np.ndarray:
    """Bounded monotone pitch normalization, zero at silence: log(1 + f0/100)."""
    return np.log1p(np.asarray(f0_hz, dtype=np.float32) / 100.0)


def assemble_stereo_frames(chan_a: SpeakerBaseFeatures, chan_b: SpeakerBaseFeatures) -> np.ndarray:
    """Concatenate two per-speaker feature tracks into the 46-D stereo layout.

    Column order: mfccA(20), mfccB(20), f0A, voicingA, f0B, voicingB, vadA, vadB.
    """
    if len(chan_a) != len(chan_b):
        raise ValueError(f"channel length mismatch: {len(chan_a)} vs {len(chan_b)}")
    return np.column_stack([
        chan_a.mfcc, chan_b.mfcc,
        chan_a.f0, chan_a.voicing,
        chan_b.f0, chan_b.voicing,
        chan_a.vad, chan_b.vad,
    ]).astype(np.float32)


def featurize_channel(audio: np.ndarray, spec: AudioFrameSpec | None = None,
                      cmn_mode: str = "streaming",
                      vad_threshold_db: float = 10.0,
                      vad_hangover: int = 5) -> SpeakerBaseFeatures:
    """Full per-speaker base-feature track (CMN MFCCs, normalized pitch, VAD)."""
    spec = spec or AudioFrameSpec()
    mfcc = apply_cmn(extract_mfcc(audio, 20, spec), cmn_mode) \
        if spec.num_frames(len(audio)) > 0 else np.zeros((0, 20), np.float32)
    f0, voicing = extract_pitch(audio, spec)
    vad = energy_vad(audio, spec, vad_threshold_db, vad_hangover)
    return SpeakerBaseFeatures(
        mfcc=mfcc, f0=log_normalize_f0(f0), voicing=voicing,
        vad=vad.astype(np.float32),
    )


class StreamingChannelFrontend:
    """Single-channel streaming featurizer with per-stream state.

    Buffers raw samples and emits one feature row per completed hop. The
    per-frame math is shared with the batch path, so batch and streaming
    outputs agree.
    """

    def __init__(self, spec: AudioFrameSpec | None = None,
                 cmn_mode: str = "streaming",
                 vad_threshold_db: float = 10.0, vad_hangover: int = 5):
        self.spec = spec or AudioFrameSpec()
        self.history = np.zeros(PITCH_WINDOW, dtype=np.float32)
        self.pending = np.zeros(0, dtype=np.float32)
        self.cmn = StreamingCmn(20)
        self.vad_state = VadState()
        self.vad_threshold_db = vad_threshold_db
        self.vad_hangover = vad_hangover
        self.frames_emitted = 0

    def push(self, samples: np.ndarray) -> list[np.ndarray]:
        """Feed raw samples; returns one [23] base-feature row per new frame."""
        self.pending = np.concatenate([self.pending, np.asarray(samples, dtype=np.float32)])
        rows = []
        hop = self.spec.hop
        while len(self.pending) >= hop:
            chunk, self.pending = self.pending[:hop], self.pending[hop:]
            self.history = np.concatenate([self.history[hop:], chunk])
            rows.append(self._emit_frame())
        return rows

    def _emit_frame(self) -> np.ndarray:
        spec = self.spec
        win = self.history[-spec.window:][None, :]
        mfcc = mfcc_from_frames(win, 20, spec)[0]
        mfcc = self.cmn.step(mfcc)
        f0, voicing = pitch_single_frame(self.history[-PITCH_WINDOW:], spec)
        rms = float(np.sqrt(np.mean(win[0] * win[0])))
        vad = vad_step(rms, self.vad_state, self.vad_threshold_db, self.vad_hangover)
        self.frames_emitted += 1
        out = np.empty(23, dtype=np.float32)
        out[:20] = mfcc
        out[20] = np.log1p(f0 / 100.0)
        out[21] = voicing
        out[22] = float(vad)
        return out
