import json

import numpy as np
import pytest

from turnkit.datagen import (
    AugmentPolicy,
    SynthConfig,
    TurnAnnotation,
    augment_signal,
    channel_dropout,
    derive_frame_labels,
    detect_backchannels,
    jitter_labels,
    load_annotations,
    load_manifest,
    mix_speakers,
    mu_law_decode,
    mu_law_encode,
    synth_conversation,
    synth_teacher_features,
    telephony_chain,
    write_corpus,
)
from turnkit.eot import TurnState

SR = 16000


# --- frame labels ------------------------------------------------------------


def test_final_window_ten_frames():
    anns = [TurnAnnotation(0, 100, 500)]
    vad = np.zeros((2, 600), dtype=np.uint8)
    vad[0, 100:501] = 1
    labels = derive_frame_labels(anns, vad, 600)
    assert np.all(labels[0, 500:510] == TurnState.FINAL)
    assert labels[0, 499] == TurnState.SPEECH
    assert labels[0, 510] == TurnState.INITIAL


def test_empty_annotations_all_initial():
    labels = derive_frame_labels([], np.zeros((2, 50), np.uint8), 50)
    assert np.all(labels == TurnState.INITIAL)


def test_interim_inside_turn():
    anns = [TurnAnnotation(0, 100, 500)]
    vad = np.zeros((2, 600), dtype=np.uint8)
    vad[0, 100:501] = 1
    vad[0, 200:261] = 0
    labels = derive_frame_labels(anns, vad, 600)
    assert np.all(labels[0, 200:261] == TurnState.INTERIM)
    assert np.all(labels[0, 150:200] == TurnState.SPEECH)
    assert np.all(labels[0, 261:500] == TurnState.SPEECH)


def test_label_precedence_final_over_backchannel():
    anns = [TurnAnnotation(0, 100, 200),
            TurnAnnotation(0, 205, 240, kind="backchannel")]
    vad = np.ones((2, 300), dtype=np.uint8)
    labels = derive_frame_labels(anns, vad, 300)
    assert np.all(labels[0, 200:210] == TurnState.FINAL)  # wins over backchannel
    assert np.all(labels[0, 210:241] == TurnState.BACKCHANNEL)


def test_overlapping_same_speaker_turns_rejected():
    anns = [TurnAnnotation(0, 100, 300), TurnAnnotation(0, 250, 400)]
    with pytest.raises(ValueError):
        derive_frame_labels(anns, np.ones((2, 500), np.uint8), 500)


def test_final_window_clipped_at_track_end():
    anns = [TurnAnnotation(1, 10, 95)]
    vad = np.ones((2, 100), dtype=np.uint8)
    labels = derive_frame_labels(anns, vad, 100)
    assert np.all(labels[1, 95:100] == TurnState.FINAL)


def test_labels_idempotent():
    anns = [TurnAnnotation(0, 10, 60), TurnAnnotation(1, 80, 140)]
    vad = np.ones((2, 200), dtype=np.uint8)
    a = derive_frame_labels(anns, vad, 200)
    b = derive_frame_labels(anns, vad, 200)
    np.testing.assert_array_equal(a, b)


def test_every_frame_has_exactly_one_label():
    audio, anns, vad = synth_conversation(SynthConfig(seed=5), 5)
    t = vad.shape[1]
    labels = derive_frame_labels(anns, vad, t)
    assert labels.shape == (2, t)
    assert set(np.unique(labels)).issubset(set(range(5)))


# --- backchannel heuristics ------------------------------------------------------


def test_backchannel_lexicon_and_duration():
    anns = [
        TurnAnnotation(0, 0, 29, transcript="mm-hm"),            # 300 ms
        TurnAnnotation(0, 100, 299, transcript="yeah i think we should go"),
        TurnAnnotation(0, 400, 549, transcript="right"),          # 1.5 s
        TurnAnnotation(1, 600, 640, transcript="Okay!"),          # normalization
    ]
    out = detect_backchannels(anns)
    assert out[0].kind == "backchannel"
    assert out[1].kind == "turn"      # fails both tests
    assert out[2].kind == "turn"      # duration test fails
    assert out[3].kind == "backchannel"


def test_backchannel_no_transcript_untouched():
    anns = [TurnAnnotation(0, 0, 10, kind="turn", transcript=None)]
    assert detect_backchannels(anns)[0].kind == "turn"


# --- synthesis ----------------------------------------------------------------------


def test_synth_deterministic():
    cfg = SynthConfig(seed=11, turns_per_conversation=(4, 6))
    a_audio, a_anns, a_vad = synth_conversation(cfg, 11)
    b_audio, b_anns, b_vad = synth_conversation(cfg, 11)
    np.testing.assert_array_equal(a_audio, b_audio)
    np.testing.assert_array_equal(a_vad, b_vad)
    assert [vars(x) for x in a_anns] == [vars(x) for x in b_anns]


def test_synth_no_backchannels_when_disabled():
    cfg = SynthConfig(seed=2, backchannel_prob=0.0)
    _, anns, _ = synth_conversation(cfg, 2)
    assert all(a.kind == "turn" for a in anns)


def test_synth_vad_matches_annotations():
    cfg = SynthConfig(seed=7, turns_per_conversation=(5, 7))
    audio, anns, vad = synth_conversation(cfg, 7)
    for ann in anns:
        spk = ann.speaker
        # annotated boundaries line up with generated activity within a frame
        assert vad[spk, ann.start_frame:ann.start_frame + 2].any()
        assert vad[spk, max(ann.end_frame - 1, 0):ann.end_frame + 1].any()
    # no activity outside annotation spans (plus one frame of slack)
    covered = np.zeros_like(vad, dtype=bool)
    for ann in anns:
        covered[ann.speaker, max(ann.start_frame - 1, 0):ann.end_frame + 2] = True
    assert not (vad.astype(bool) & ~covered).any()


def test_synth_energy_vad_agrees_with_bookkeeping():
    from turnkit.features import energy_vad

    cfg = SynthConfig(seed=3, turns_per_conversation=(3, 4), overlap_prob=0.0)
    audio, anns, vad = synth_conversation(cfg, 3)
    measured = energy_vad(audio[:, 0], hangover=0)
    t = min(len(measured), vad.shape[1])
    gt = vad[0, :t].astype(bool)
    got = measured[:t].astype(bool)
    # energy VAD sees 20 ms windows, so edges wobble by a frame or two
    disagree = np.mean(gt != got)
    assert disagree < 0.06


def test_synth_infeasible_config_rejected():
    with pytest.raises(ValueError):
        SynthConfig(turn_duration_s=(3.0, 1.0))
    with pytest.raises(ValueError):
        SynthConfig(backchannel_prob=1.5)


# --- mixing ---------------------------------------------------------------------------


def test_mix_half_with_silent_partner(rng):
    a = rng.standard_normal(1000).astype(np.float32)
    mix, _ = mix_speakers(a, np.zeros(1000, np.float32), 0.5)
    np.testing.assert_allclose(mix, 0.5 * a, atol=1e-7)


def test_mix_sir_matches_rms_oracle(rng):
    a = rng.standard_normal(2000).astype(np.float32)
    b = 0.5 * rng.standard_normal(2000).astype(np.float32)
    mix, sir = mix_speakers(a, b, 0.6)
    rms = lambda x: np.sqrt(np.mean(x.astype(np.float64) ** 2))
    expected = 20 * np.log10((0.6 * rms(a)) / (0.4 * rms(b)))
    assert sir == pytest.approx(expected, abs=1e-4)


def test_mix_swap_symmetry(rng):
    a = rng.standard_normal(500).astype(np.float32)
    b = rng.standard_normal(500).astype(np.float32)
    m1, _ = mix_speakers(a, b, 0.7)
    m2, _ = mix_speakers(b, a, 0.3)
    np.testing.assert_array_equal(m1, m2)


def test_mix_ratio_range_enforced(rng):
    a = rng.standard_normal(100).astype(np.float32)
    with pytest.raises(ValueError):
        mix_speakers(a, a, 0.2)


# --- mu-law and telephony ------------------------------------------------------------


def test_mu_law_roundtrip_matches_reference_formula():
    ramp = np.linspace(-1.0, 1.0, 513).astype(np.float32)
    codes = mu_law_encode(ramp)
    decoded = mu_law_decode(codes)

    # independent float64 companding reference: mu = 255, sign + 7-bit
    # magnitude, per sample
    mu = 255.0
    expected = np.empty(len(ramp))
    for i, x in enumerate(ramp.astype(np.float64)):
        y = np.log1p(mu * abs(x)) / np.log1p(mu)
        mag = round(y * 127)
        val = ((1.0 + mu) ** (mag / 127.0) - 1.0) / mu
        expected[i] = -val if x < 0 else val
    np.testing.assert_allclose(decoded, expected, atol=1e-6)
    assert codes.min() >= 0 and codes.max() <= 255
    assert decoded[256] == 0.0  # zero maps to zero exactly


def test_mu_law_quantization_error_bounded():
    x = np.linspace(-1, 1, 2001).astype(np.float32)
    err = np.abs(mu_law_decode(mu_law_encode(x)) - x)
    assert err.max() < 0.025  # half-step of the companded 7-bit magnitude


def test_telephony_preserves_duration(rng):
    for n in (16001, 16000, 12345):
        x = rng.standard_normal(n).astype(np.float32)
        assert abs(len(telephony_chain(x)) - n) <= 1


# --- signal augmentation ---------------------------------------------------------------


def test_augment_identity_when_disabled(rng):
    x = rng.standard_normal(SR).astype(np.float32)
    out = augment_signal(x, AugmentPolicy(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)


def test_augment_noise_hits_target_snr():
    t = np.arange(SR) / SR
    x = np.sin(2 * np.pi * 300 * t).astype(np.float32)
    policy = AugmentPolicy(add_noise=True, noise_snr_db=(10.0, 10.0))
    out = augment_signal(x, policy, np.random.default_rng(3))
    noise = out - x
    snr = 20 * np.log10(np.sqrt(np.mean(x ** 2)) / np.sqrt(np.mean(noise ** 2)))
    assert abs(snr - 10.0) <= 0.5


def test_augment_reverb_and_telephony_keep_length(rng):
    x = rng.standard_normal(SR).astype(np.float32)
    policy = AugmentPolicy(add_reverb=True, telephony=True)
    out = augment_signal(x, policy, np.random.default_rng(4))
    assert len(out) == len(x)


def test_augment_deterministic_under_seed(rng):
    x = rng.standard_normal(SR).astype(np.float32)
    policy = AugmentPolicy(add_noise=True, add_reverb=True, telephony=True)
    a = augment_signal(x, policy, np.random.default_rng(9))
    b = augment_signal(x, policy, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_aec_toggle_reserved():
    with pytest.raises(NotImplementedError):
        AugmentPolicy(aec_artifacts=True)


# --- label jitter ------------------------------------------------------------------------


class _FixedRng:
    """Deterministic stand-in: uniform() selects, integers() is the offset."""

    def __init__(self, offset):
        self.offset = offset

    def uniform(self, *a, **k):
        return 0.0  # always below the jitter probability

    def integers(self, lo, hi):
        return self.offset


def test_jitter_identity_when_disabled():
    anns = [TurnAnnotation(0, 100, 500)]
    vad = np.ones((2, 700), dtype=np.uint8)
    policy = AugmentPolicy(label_jitter_prob=0.0)
    labels, out_anns = jitter_labels(anns, vad, 700, policy, np.random.default_rng(0))
    np.testing.assert_array_equal(labels, derive_frame_labels(anns, vad, 700))
    assert out_anns[0].end_frame == 500


def test_jitter_moves_final_window_by_offset():
    anns = [TurnAnnotation(0, 100, 500)]
    vad = np.zeros((2, 700), dtype=np.uint8)
    vad[0, 100:501] = 1
    policy = AugmentPolicy(label_jitter_prob=1.0, jitter_window_s=1.0)
    labels, out_anns = jitter_labels(anns, vad, 700, policy, _FixedRng(42))
    assert out_anns[0].end_frame == 542
    assert np.all(labels[0, 542:552] == TurnState.FINAL)
    assert np.all(labels[0, 501:542] == TurnState.INTERIM)  # extended turn, VAD 0


def test_jitter_clips_at_track_end_and_next_turn():
    anns = [TurnAnnotation(0, 10, 50), TurnAnnotation(0, 80, 120)]
    vad = np.ones((2, 130), dtype=np.uint8)
    policy = AugmentPolicy(label_jitter_prob=1.0, jitter_window_s=1.0)
    labels, out_anns = jitter_labels(anns, vad, 130, policy, _FixedRng(100))
    assert out_anns[0].end_frame == 79   # stops before the next same-speaker turn
    assert out_anns[1].end_frame == 129  # clipped at the track end


def test_jitter_preserves_final_run_count():
    cfg = SynthConfig(seed=21, turns_per_conversation=(5, 8))
    _, anns, vad = synth_conversation(cfg, 21)
    t = vad.shape[1]
    policy = AugmentPolicy(label_jitter_prob=0.5, jitter_window_s=1.0)

    def count_runs(track):
        runs = 0
        for spk in (0, 1):
            final = np.concatenate([[0], (track[spk] == TurnState.FINAL).astype(int), [0]])
            runs += int((np.diff(final) == 1).sum())
        return runs

    base_runs = count_runs(derive_frame_labels(anns, vad, t))
    for seed in range(100):
        labels, _ = jitter_labels(anns, vad, t, policy, np.random.default_rng(seed))
        assert count_runs(labels) == base_runs


# --- channel dropout -----------------------------------------------------------------------


def test_channel_dropout_extremes(rng):
    feats = rng.standard_normal((2, 50, 23)).astype(np.float32)
    out, dropped = channel_dropout(feats, AugmentPolicy(channel_dropout_prob=0.0),
                                   np.random.default_rng(0))
    assert not dropped.any()
    np.testing.assert_array_equal(out, feats)
    out, dropped = channel_dropout(feats, AugmentPolicy(channel_dropout_prob=1.0),
                                   np.random.default_rng(0))
    assert dropped.all()
    assert np.all(out == 0)


def test_channel_dropout_rate_monte_carlo():
    policy = AugmentPolicy(channel_dropout_prob=0.1)
    rng = np.random.default_rng(123)
    feats = np.ones((2, 4, 23), dtype=np.float32)
    hits = 0
    n = 10_000
    for _ in range(n):
        _, dropped = channel_dropout(feats, policy, rng)
        hits += int(dropped.sum())
    rate = hits / (2 * n)
    assert abs(rate - 0.1) <= 0.02


# --- corpus I/O -------------------------------------------------------------------------------


def test_corpus_roundtrip(tmp_path):
    cfg = SynthConfig(seed=42, num_conversations=2,
                      turns_per_conversation=(3, 4))
    manifest = write_corpus(tmp_path, cfg)
    assert manifest["ids"] == ["conv_0000", "conv_0001"]
    loaded = load_manifest(tmp_path)
    assert loaded["ids"] == manifest["ids"]
    anns = load_annotations(tmp_path, "conv_0000")
    assert anns and all(isinstance(a, TurnAnnotation) for a in anns)
    with open(tmp_path / "conv_0000.turns.jsonl") as fh:
        row = json.loads(fh.readline())
    assert set(row) == {"conv_id", "speaker", "start_frame", "end_frame",
                        "kind", "transcript"}
    vad = np.load(tmp_path / "conv_0000.vad.npy")
    assert vad.shape[0] == 2


def test_corpus_teacher_features(tmp_path):
    from turnkit.distill import read_teacher_features

    cfg = SynthConfig(seed=1, num_conversations=1, turns_per_conversation=(3, 3))
    write_corpus(tmp_path, cfg)
    feats, rate = read_teacher_features(tmp_path / "conv_0000.spk0.teacher.tkf")
    assert feats.shape[1] == 768
    assert rate == 50.0
    audio_frames = np.load(tmp_path / "conv_0000.vad.npy").shape[1]
    assert abs(feats.shape[0] * 2 - audio_frames) <= 2


def test_teacher_features_deterministic(rng):
    x = rng.standard_normal(SR).astype(np.float32)
    np.testing.assert_array_equal(synth_teacher_features(x), synth_teacher_features(x))
