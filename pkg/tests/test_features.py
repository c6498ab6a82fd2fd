import numpy as np
import pytest

from turnkit.features import (
    PITCH_WINDOW,
    AudioFrameSpec,
    SpeakerBaseFeatures,
    StreamingChannelFrontend,
    apply_cmn,
    assemble_stereo_frames,
    energy_vad,
    extract_mfcc,
    extract_pitch,
    featurize_channel,
    frame_signal,
    log_normalize_f0,
    pitch_single_frame,
)

SPEC = AudioFrameSpec()
SR = 16000


def sine(freq, seconds=1.0, amp=1.0):
    t = np.arange(int(seconds * SR)) / SR
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


# --- independent oracles -----------------------------------------------------


def oracle_mfcc_frame(window_samples, dim, n_fft=512, n_mels=64):
    """Naive DFT + triangular mel + explicit DCT-II, all from definitions."""
    n = len(window_samples)
    w = np.array([0.54 - 0.46 * np.cos(2 * np.pi * i / (n - 1)) for i in range(n)])
    x = np.zeros(n_fft)
    x[:n] = window_samples * w
    bins = n_fft // 2 + 1
    spec = np.zeros(bins, dtype=complex)
    for k in range(bins):
        spec[k] = sum(x[m] * np.exp(-2j * np.pi * k * m / n_fft) for m in range(n_fft))
    power = np.abs(spec) ** 2

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(8000.0), n_mels + 2))
    freqs = np.arange(bins) * SR / n_fft
    mel_energy = np.zeros(n_mels)
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        weights = np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo),
                                             (hi - freqs) / (hi - mid)))
        mel_energy[m] = np.dot(weights, power)
    log_mel = np.log(mel_energy + 1e-10)
    out = np.zeros(dim)
    for k in range(dim):
        scale = np.sqrt(1.0 / n_mels) if k == 0 else np.sqrt(2.0 / n_mels)
        out[k] = scale * sum(log_mel[i] * np.cos(np.pi * k * (2 * i + 1) / (2 * n_mels))
                             for i in range(n_mels))
    return out


def oracle_autocorr_pitch(window, lag_min=40, lag_max=267):
    """Float64 normalized autocorrelation; earliest strong local peak.

    A periodic signal peaks at every period multiple, so the oracle (like
    any autocorrelation pitch tracker) takes the lowest lag whose peak comes
    close to the global maximum.
    """
    w = window.astype(np.float64)
    rhos = {}
    for lag in range(lag_min, lag_max + 1):
        a, b = w[lag:], w[: len(w) - lag]
        denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
        if denom >= 1e-8:
            rhos[lag] = np.dot(a, b) / denom
    if not rhos or max(rhos.values()) <= 0:
        return 0.0, 0.0
    rho_max = max(rhos.values())
    for lag in sorted(rhos):
        left = rhos.get(lag - 1, -np.inf)
        right = rhos.get(lag + 1, -np.inf)
        if rhos[lag] >= 0.87 * rho_max and rhos[lag] >= left and rhos[lag] >= right:
            return SR / lag, rhos[lag]
    best = max(rhos, key=rhos.get)
    return SR / best, rhos[best]


# --- framing -------------------------------------------------------------------


def test_frame_count_law():
    for n in (0, 100, 159, 160, 161, 4000, 16000, 16001):
        audio = np.zeros(n, dtype=np.float32)
        assert len(extract_mfcc(audio, 20)) == n // SPEC.hop
        assert len(energy_vad(audio)) == n // SPEC.hop
        f0, v = extract_pitch(audio)
        assert len(f0) == len(v) == n // SPEC.hop


def test_frame_window_ends_at_hop_boundary():
    audio = np.arange(1, 1601, dtype=np.float32)
    frames = frame_signal(audio, SPEC)
    # first frame is left-padded with zeros and covers samples [-160, 160)
    assert np.all(frames[0, : SPEC.hop] == 0)
    assert np.array_equal(frames[0, SPEC.hop:], audio[:160])
    assert np.array_equal(frames[3], audio[320:640])


def test_spec_invariants():
    with pytest.raises(ValueError):
        AudioFrameSpec(sample_rate=8000)
    with pytest.raises(ValueError):
        AudioFrameSpec(window=480, hop=160)


# --- MFCC -----------------------------------------------------------------------


def test_mfcc_constant_on_zero_signal():
    out = extract_mfcc(np.zeros(SR, dtype=np.float32), 20)
    assert out.shape == (100, 20)
    assert np.all(out == out[0])


def test_mfcc_matches_dft_mel_oracle():
    audio = sine(440.0)
    got = extract_mfcc(audio, 32)
    for t in (10, 17, 50):
        lo = (t + 1) * SPEC.hop - SPEC.window
        expected = oracle_mfcc_frame(audio[lo: lo + SPEC.window], 32)
        np.testing.assert_allclose(got[t], expected, atol=1e-4)


def test_mfcc_spectral_energy_follows_tone():
    audio = sine(440.0)
    out = extract_mfcc(audio, 20)
    silent = extract_mfcc(np.zeros(SR, dtype=np.float32), 20)
    assert out[50, 0] > silent[50, 0]  # log-energy coefficient rises


def test_mfcc_causality_impulse():
    zero = np.zeros(SR, dtype=np.float32)
    spike = zero.copy()
    spike[4000] = 1.0
    a = extract_mfcc(zero, 20)
    b = extract_mfcc(spike, 20)
    # frame t sees samples below (t+1)*hop, so sample 4000 first lands in
    # frame 25 (window [3840, 4160)); everything before is untouched
    assert np.array_equal(a[:25], b[:25])
    assert not np.array_equal(a[25], b[25])


def test_mfcc_rejects_bad_dim():
    with pytest.raises(ValueError):
        extract_mfcc(np.zeros(1600, dtype=np.float32), 24)


def test_future_samples_never_change_past_frames(rng):
    audio = rng.standard_normal(8000).astype(np.float32)
    t = 20
    cut = (t + 1) * SPEC.hop
    tampered = audio.copy()
    tampered[cut:] = rng.standard_normal(len(audio) - cut).astype(np.float32)
    for fn in (lambda x: extract_mfcc(x, 20),
               lambda x: extract_pitch(x)[0],
               lambda x: extract_pitch(x)[1],
               lambda x: energy_vad(x)):
        a, b = fn(audio), fn(tampered)
        assert np.array_equal(np.asarray(a)[: t + 1], np.asarray(b)[: t + 1])


def test_determinism_bitwise(rng):
    audio = rng.standard_normal(4800).astype(np.float32)
    assert np.array_equal(extract_mfcc(audio, 32), extract_mfcc(audio.copy(), 32))


# --- pitch -----------------------------------------------------------------------


def test_pitch_tracks_220hz_sine():
    f0, voicing = extract_pitch(sine(220.0))
    steady = slice(10, 90)
    assert abs(np.median(f0[steady]) - 220.0) <= 10.0
    assert np.median(voicing[steady]) > 0.5
    # independent oracle agrees on held-out frames
    audio = sine(220.0)
    for t in (30, 60):
        lo = (t + 1) * SPEC.hop - PITCH_WINDOW
        w = audio[max(lo, 0): (t + 1) * SPEC.hop]
        w = np.concatenate([np.zeros(PITCH_WINDOW - len(w), np.float32), w])
        f_oracle, rho_oracle = oracle_autocorr_pitch(w)
        assert abs(f_oracle - f0[t]) <= 5.0
        assert rho_oracle > 0.5


def test_pitch_noise_is_unvoiced():
    for seed in range(10):
        noise = (0.1 * np.random.default_rng(seed).standard_normal(SR)).astype(np.float32)
        _, voicing = extract_pitch(noise)
        assert np.median(voicing[10:]) < 0.5


def test_pitch_silence():
    f0, voicing = extract_pitch(np.zeros(SR, dtype=np.float32))
    assert np.all(voicing == 0.0)
    assert np.all(f0 == 0.0)


def test_pitch_single_frame_matches_batch():
    audio = sine(180.0, 0.5)
    f0, voicing = extract_pitch(audio)
    frames = frame_signal(audio, SPEC, window=PITCH_WINDOW)
    for t in (5, 20, 40):
        f_s, v_s = pitch_single_frame(frames[t], SPEC)
        assert abs(f_s - f0[t]) <= 1.0
        assert abs(v_s - voicing[t]) <= 1e-4


def test_voicing_bounded_and_finite(rng):
    audio = rng.standard_normal(SR).astype(np.float32)
    f0, voicing = extract_pitch(audio)
    assert np.all((voicing >= 0) & (voicing <= 1))
    assert np.all(np.isfinite(f0)) and np.all(np.isfinite(voicing))


# --- energy VAD --------------------------------------------------------------------


def test_vad_silence_is_all_zero():
    assert not energy_vad(np.zeros(SR, dtype=np.float32)).any()


def test_vad_hangover_extends_exactly():
    audio = np.concatenate([sine(440.0, 0.5), np.zeros(SR, dtype=np.float32)])
    hang = 20
    with_hang = energy_vad(audio, hangover=hang)
    raw = energy_vad(audio, hangover=0)
    last_raw = int(np.flatnonzero(raw)[-1])
    last_hang = int(np.flatnonzero(with_hang)[-1])
    assert last_hang == last_raw + hang
    assert with_hang[last_raw: last_raw + hang + 1].all()


def test_vad_duty_cycle_alternating_tone():
    cycle_on = sine(440.0, 0.1)
    cycle = np.concatenate([cycle_on, np.zeros(int(0.1 * SR), dtype=np.float32)])
    audio = np.tile(cycle, 10)
    vad = energy_vad(audio, hangover=0)
    per_cycle = vad.reshape(10, 20).sum(axis=1)
    # direct RMS accounting: 10 tone frames per 20-frame cycle
    assert np.all(np.abs(per_cycle[1:] - 10) <= 1)


def test_vad_binary_output(rng):
    vad = energy_vad(rng.standard_normal(SR).astype(np.float32))
    assert set(np.unique(vad)).issubset({0, 1})


def test_vad_rejects_negative_hangover():
    with pytest.raises(ValueError):
        energy_vad(np.zeros(1600, dtype=np.float32), hangover=-1)


# --- CMN --------------------------------------------------------------------------


def test_cmn_utterance_constant_to_zero():
    seq = np.tile(np.arange(20, dtype=np.float32), (50, 1))
    out = apply_cmn(seq, "utterance")
    assert np.allclose(out, 0.0, atol=1e-6)


def test_cmn_utterance_zero_mean_input_unchanged():
    v = np.arange(20, dtype=np.float32)
    seq = np.stack([v, -v])
    assert np.allclose(apply_cmn(seq, "utterance"), seq)


def test_cmn_utterance_mean_exactly_zero(rng):
    seq = rng.standard_normal((200, 20)).astype(np.float32)
    out = apply_cmn(seq, "utterance")
    assert np.abs(out.mean(axis=0)).max() < 1e-6


def test_cmn_streaming_geometric_decay():
    c = 3.0
    seq = np.full((100, 4), c, dtype=np.float32)
    out = apply_cmn(seq, "streaming", decay=0.995)
    # closed form: residual после t frames is c * 0.995**(t+1)
    expected = c * 0.995 ** (np.arange(100) + 1)
    np.testing.assert_allclose(out[:, 0], expected, rtol=1e-4)
    ratios = out[1:, 0] / out[:-1, 0]
    np.testing.assert_allclose(ratios, 0.995, atol=1e-4)


def test_cmn_rejects_empty():
    with pytest.raises(ValueError):
        apply_cmn(np.zeros((0, 20), dtype=np.float32), "utterance")


# --- stereo assembly ----------------------------------------------------------------


def _track(t, fill):
    return SpeakerBaseFeatures(
        mfcc=np.full((t, 20), fill, dtype=np.float32),
        f0=np.full(t, fill + 1, dtype=np.float32),
        voicing=np.full(t, fill + 2, dtype=np.float32),
        vad=np.full(t, fill + 3, dtype=np.float32),
    )


def test_assemble_empty():
    out = assemble_stereo_frames(_track(0, 0), _track(0, 1))
    assert out.shape == (0, 46)


def test_assemble_ordering_field_by_field():
    a, b = _track(1, 10.0), _track(1, 20.0)
    row = assemble_stereo_frames(a, b)[0]
    assert np.all(row[:20] == 10.0)        # mfccA
    assert np.all(row[20:40] == 20.0)      # mfccB
    assert row[40] == 11.0 and row[41] == 12.0  # f0A, voicingA
    assert row[42] == 21.0 and row[43] == 22.0  # f0B, voicingB
    assert row[44] == 13.0 and row[45] == 23.0  # vadA, vadB


def test_assemble_swap_consistency(rng):
    a, b = _track(5, 1.0), _track(5, 2.0)
    fwd = assemble_stereo_frames(a, b)
    rev = assemble_stereo_frames(b, a)
    np.testing.assert_array_equal(rev[:, :20], fwd[:, 20:40])
    np.testing.assert_array_equal(rev[:, 40:42], fwd[:, 42:44])
    np.testing.assert_array_equal(rev[:, 44], fwd[:, 45])


def test_assemble_length_mismatch():
    with pytest.raises(ValueError):
        assemble_stereo_frames(_track(3, 0), _track(4, 0))


def test_log_normalize_f0_zero_at_silence():
    assert log_normalize_f0(np.array([0.0]))[0] == 0.0
    assert log_normalize_f0(np.array([100.0]))[0] == pytest.approx(np.log(2.0))


# --- streaming front-end ---------------------------------------------------------


def test_streaming_frontend_matches_batch():
    audio = np.concatenate([sine(220.0, 0.4, 0.5), np.zeros(3200, np.float32),
                            sine(300.0, 0.3, 0.3)])
    batch = featurize_channel(audio).as_matrix()
    frontend = StreamingChannelFrontend()
    rows = []
    for lo in range(0, len(audio) - 159, 160):
        rows.extend(frontend.push(audio[lo: lo + 160]))
    stream = np.stack(rows)
    assert stream.shape == batch.shape
    # tiny FFT batching differences, ~1e-6 relative on coefficient scale
    np.testing.assert_allclose(stream[:, :20], batch[:, :20], atol=5e-4)  # mfcc
    np.testing.assert_allclose(stream[:, 20], batch[:, 20], atol=0.05)    # f0 (log)
    np.testing.assert_allclose(stream[:, 21], batch[:, 21], atol=1e-3)    # voicing
    np.testing.assert_array_equal(stream[:, 22], batch[:, 22])            # vad


def test_streaming_frontend_block_size_invariance(rng):
    audio = rng.standard_normal(3200).astype(np.float32)
    a = StreamingChannelFrontend()
    rows_a = a.push(audio)
    b = StreamingChannelFrontend()
    rows_b = []
    for i in range(0, len(audio), 37):
        rows_b.extend(b.push(audio[i: i + 37]))
    assert len(rows_a) == len(rows_b) == 20
    np.testing.assert_array_equal(np.stack(rows_a), np.stack(rows_b))
