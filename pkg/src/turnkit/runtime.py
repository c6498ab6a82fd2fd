"""Streaming end-to-end pipeline, weight wiring, and benchmarking.

Per 10 ms frame: both channels are featurized, the segmenter peels the user
channel and the online cluster decides primary / non-primary / inactive,
non-primary frames have the user features zeroed, the student compresses
each speaker's MFCCs, and the turn model emits per-speaker horizon logits,
a majority-vote state and the aggregated Final score. State is bounded, so
steady-state streaming allocates no memory proportional to stream length.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .distill import StudentEncoder, TeacherCompressor
from .eot import VOTE_PRIORITY, EotModel, TurnState
from .features import (
    AudioFrameSpec,
    StreamingChannelFrontend,
    StreamingCmn,
    mfcc_from_frames,
)
from .macs import AccountingConfig
from .segmenter import (
    ClusterConfig,
    PrimaryTrack,
    SegmenterModel,
    cluster_step,
    select_primary_peel,
)
from .segmenter.peeling import peel_forward
from .weights import load_into_modules, state_dict_to_container, save_weights


def _decode_votes_np(votes: list[np.ndarray]) -> tuple[int, float]:
    """Majority vote + aggregated Final probability for one frame (numpy).

    Matches majority_vote_decode / final_score from the model module.
    """
    counts = np.zeros(5, dtype=np.int64)
    fin = 0.0
    for v in votes:
        counts[int(np.argmax(v))] += 1
        e = np.exp(v - v.max())
        fin += float(e[int(TurnState.FINAL)] / e.sum())
    best = counts.max()
    for cls in VOTE_PRIORITY:
        if counts[cls] == best:
            return int(cls), fin / len(votes)
    raise AssertionError("unreachable")


@dataclass
class PipelineConfig:
    weights_path: str | None = None
    cosine_threshold: float = 0.7
    final_threshold: float = 0.5
    init_frames: int = 30
    gating: bool = True
    vad_threshold_db: float = 10.0
    vad_hangover: int = 5
    telemetry: bool = False

    def __post_init__(self):
        for name in ("cosine_threshold", "final_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.weights_path is not None and not Path(self.weights_path).is_file():
            raise FileNotFoundError(f"weights file not found: {self.weights_path}")


def parse_config(path) -> dict:
    """Parse the simple ``key = value`` config format ('#' comments)."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


class _StreamingBlock:
    """Single-frame stepper for one MSCC block.

    Keeps the block's recent input columns; ring slots before the stream
    start hold zeros, which matches the batch path's causal left padding, so
    stepping reproduces the batch forward frame for frame.
    """

    def __init__(self, block, batch: int):
        self.kernel = block.branches[0].conv.kernel_size[0]
        self.dilations = [br.conv.dilation[0] for br in block.branches]
        self.depthwise = block.branches[0].conv.groups > 1
        self.branch_w = []
        self.branch_b = []
        for br in block.branches:
            w = br.conv.weight.detach()
            if self.depthwise:
                self.branch_w.append(w[:, 0, :].t().contiguous())   # [k, C]
            else:
                self.branch_w.append(
                    w.permute(0, 2, 1).reshape(w.shape[0], -1).contiguous())
            self.branch_b.append(br.conv.bias.detach())
        self.fuse_w = block.fuse.weight.detach()[:, :, 0]
        self.fuse_b = block.fuse.bias.detach()
        channels = block.fuse.weight.shape[0]
        depth = (self.kernel - 1) * max(self.dilations) + 1
        self.history = [torch.zeros(batch, channels) for _ in range(depth)]

    def step(self, x: torch.Tensor) -> torch.Tensor:
        self.history.pop(0)
        self.history.append(x)
        branch_outs = []
        last = len(self.history) - 1
        for w, b, d in zip(self.branch_w, self.branch_b, self.dilations):
            taps = [self.history[last - (self.kernel - 1 - j) * d]
                    for j in range(self.kernel)]
            if self.depthwise:
                acc = taps[0] * w[0]
                for j in range(1, self.kernel):
                    acc = acc + taps[j] * w[j]
                branch_outs.append(acc + b)
            else:
                flat = torch.cat(taps, dim=1)  # [B, k*C] ordered (tap, channel)
                branch_outs.append(flat @ w.t() + b)
        fused = torch.cat(branch_outs, dim=1) @ self.fuse_w.t() + self.fuse_b
        return x + torch.relu(fused)


class StreamingEncoder:
    """Incremental forward of an MSCC stack, one frame at a time."""

    def __init__(self, encoder, batch: int = 1, output_proj=None):
        self.in_w = encoder.input_proj.weight.detach()[:, :, 0]
        self.in_b = encoder.input_proj.bias.detach()
        self.blocks = [_StreamingBlock(b, batch) for b in encoder.blocks]
        if output_proj is not None:
            self.out_w = output_proj.weight.detach()[:, :, 0]
            self.out_b = output_proj.bias.detach()
        else:
            self.out_w = None

    def step(self, x: torch.Tensor) -> torch.Tensor:
        h = x @ self.in_w.t() + self.in_b
        for block in self.blocks:
            h = block.step(h)
        if self.out_w is not None:
            h = h @ self.out_w.t() + self.out_b
        return h


def build_models(accounting: AccountingConfig | None = None, seed: int = 0) -> dict:
    """Instantiate the default system (segmenter, student, teacher, turn model)."""
    acc = accounting or AccountingConfig()
    torch.manual_seed(seed)
    return {
        "segmenter": SegmenterModel(acc.mscc, acc.peel),
        "student": StudentEncoder(acc.student["width"], acc.student["num_blocks"],
                                  acc.student["kernel"], acc.student["dilations"]),
        "teacher": TeacherCompressor(acc.teacher_hidden),
        "eot": EotModel(acc.eot),
    }


def save_system(models: dict, path) -> None:
    save_weights(state_dict_to_container(models), path)


def load_system(path, accounting: AccountingConfig | None = None) -> dict:
    models = build_models(accounting)
    load_into_modules(path, models)
    return models


@dataclass
class FrameEvent:
    frame: int
    rho: float
    decision: str
    peel_index: int
    speakers: list  # two dicts: state, final_score, logits [4][5]

    def jsonl_rows(self) -> list[str]:
        rows = []
        for spk, info in enumerate(self.speakers):
            rows.append(json.dumps({
                "frame_index": self.frame,
                "speaker": spk,
                "state": info["state"],
                "final_score": info["final_score"],
                "logits": info["logits"],
            }))
        return rows


class StreamingPipeline:
    """Stateful frame-synchronous inference over a two-channel stream.

    Channel 0 is the user microphone (segmenter-gated), channel 1 the bot
    reference (assumed clean). Mono input duplicates onto both channels.
    """

    def __init__(self, models: dict, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.models = models
        for m in models.values():
            m.eval()
        self.spec = AudioFrameSpec()
        self.cluster_cfg = ClusterConfig(self.cfg.cosine_threshold,
                                         init_frames=self.cfg.init_frames)
        self.reset()

    def reset(self) -> None:
        self.frame = 0
        self.frontends = [
            StreamingChannelFrontend(self.spec, vad_threshold_db=self.cfg.vad_threshold_db,
                                     vad_hangover=self.cfg.vad_hangover)
            for _ in range(2)
        ]
        self.cmn32 = StreamingCmn(32)
        self.track = PrimaryTrack()
        seg: SegmenterModel = self.models["segmenter"]
        stu: StudentEncoder = self.models["student"]
        with torch.no_grad():
            self._seg_stream = StreamingEncoder(seg.encoder, batch=1)
            self._stu_stream = StreamingEncoder(stu, batch=2,
                                                output_proj=stu.output_proj)
        self.eot_state = self.models["eot"].init_stream()
        self._vote_ring: list[np.ndarray] = []
        self._pending = np.zeros((0, 2), dtype=np.float32)

    # --- feeding ----------------------------------------------------------

    def push(self, samples: np.ndarray) -> list[FrameEvent]:
        """Feed raw samples ([N] mono or [N, 2] stereo); returns new events."""
        samples = np.asarray(samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = np.stack([samples, samples], axis=1)
        if samples.ndim != 2 or samples.shape[1] != 2:
            raise ValueError("expected [N] mono or [N, 2] stereo samples")
        self._pending = np.concatenate([self._pending, samples])
        events = []
        hop = self.spec.hop
        while len(self._pending) >= hop:
            chunk, self._pending = self._pending[:hop], self._pending[hop:]
            rows = [self.frontends[ch].push(chunk[:, ch]) for ch in (0, 1)]
            events.append(self._process_frame(rows[0][0], rows[1][0]))
        return events

    def process_file(self, path) -> list[FrameEvent]:
        from .features import load_wav

        audio = load_wav(path)
        return self.push(audio)

    # --- per-frame work -----------------------------------------------------

    def _segmenter_frame(self, user_vad: int):
        """Peel the newest user frame; decide primary/non-primary/inactive."""
        window = self.frontends[0].history[-self.spec.window:][None, :]
        mfcc32 = mfcc_from_frames(window, 32, self.spec)[0]
        mfcc32 = self.cmn32.step(mfcc32)
        seg: SegmenterModel = self.models["segmenter"]
        with torch.no_grad():
            hidden = self._seg_stream.step(torch.from_numpy(mfcc32)[None])
            r0 = seg.residual_proj(hidden)[None]  # [1, 1, E]
            out = peel_forward(r0, seg.heads, seg.peel_cfg.num_peels, mode="infer")
            z = out.z[0, :, 0].numpy()         # [K, E]
            stops = out.s[0, :, 0].numpy()     # [K]
        active = np.cumsum(stops > 0.5) == 0
        rho, peel_idx = 0.0, -1
        if not self.track.initialized:
            decision = "inactive"
            if user_vad:
                cands = np.flatnonzero(active)
                idx = int(cands[np.argmax(np.linalg.norm(z[cands], axis=1))]) \
                    if len(cands) else int(np.argmax(np.linalg.norm(z, axis=1)))
                decision = cluster_step(z[idx], self.track, self.cluster_cfg, 1)
                peel_idx = idx
        else:
            idx, rho = select_primary_peel(z, self.track, self.cluster_cfg,
                                           vad_t=user_vad, active=active)
            if idx is not None:
                decision = cluster_step(z[idx], self.track, self.cluster_cfg, 1)
                peel_idx = idx
            else:
                decision = "non_primary" if user_vad else "inactive"
        self.track.log(self.frame, rho, decision, peel_idx)
        return decision, rho, peel_idx

    def _student_frame(self, base: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            mfcc = torch.from_numpy(np.ascontiguousarray(base[:, :20]))
            return self._stu_stream.step(mfcc)  # [2, 32]

    def _process_frame(self, row_a: np.ndarray, row_b: np.ndarray) -> FrameEvent:
        base = np.stack([row_a, row_b])  # [2, 23]
        user_vad = int(base[0, 22] > 0)
        decision, rho, peel_idx = self._segmenter_frame(user_vad)
        if self.cfg.gating and decision == "non_primary":
            base[0, :] = 0.0  # mask the user channel, VAD included
        comp = self._student_frame(base)
        eot: EotModel = self.models["eot"]
        with torch.no_grad():
            logits, _ = eot.step(torch.from_numpy(base), comp, self.eot_state)
        self._vote_ring.append(logits.numpy())
        if len(self._vote_ring) > 4:
            self._vote_ring.pop(0)
        speakers = []
        n = len(self._vote_ring)
        for spk in (0, 1):
            votes = [self._vote_ring[n - 1 - h][spk, h] for h in range(min(n, 4))]
            state, fscore = _decode_votes_np(votes)
            speakers.append({
                "state": int(state),
                "state_name": TurnState(state).name,
                "final_score": fscore,
                "logits": self._vote_ring[-1][spk].tolist(),
            })
        event = FrameEvent(self.frame, rho, decision, peel_idx, speakers)
        self.frame += 1
        return event


def final_scores_from_events(events: list[FrameEvent]) -> np.ndarray:
    """[2, T] aggregated Final-score series from a pipeline event stream."""
    out = np.zeros((2, len(events)), dtype=np.float64)
    for t, e in enumerate(events):
        for spk in (0, 1):
            out[spk, t] = e.speakers[spk]["final_score"]
    return out


def decoded_states_from_events(events: list[FrameEvent]) -> np.ndarray:
    out = np.zeros((2, len(events)), dtype=np.uint8)
    for t, e in enumerate(events):
        for spk in (0, 1):
            out[spk, t] = e.speakers[spk]["state"]
    return out


def write_events_jsonl(path, events: list[FrameEvent]) -> None:
    with open(path, "w") as fh:
        for event in events:
            for row in event.jsonl_rows():
                fh.write(row + "\n")


# --- benchmarking --------------------------------------------------------------


def bench_pipeline(models: dict, cfg: PipelineConfig | None = None,
                   seconds: float = 10.0, seed: int = 0) -> dict:
    """Measure per-frame wall-clock percentiles against the 10 ms budget."""
    from .datagen import SynthConfig, synth_conversation

    audio, _, _ = synth_conversation(
        SynthConfig(seed=seed, turns_per_conversation=(4, 6)), seed)
    need = int(seconds * 16000)
    if len(audio) < need:
        audio = np.tile(audio, (int(np.ceil(need / len(audio))), 1))
    audio = audio[:need]
    pipeline = StreamingPipeline(models, cfg)
    hop = pipeline.spec.hop
    times = []
    for lo in range(0, len(audio) - hop + 1, hop):
        block = audio[lo: lo + hop]
        t0 = time.perf_counter()
        pipeline.push(block)
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.array(times[5:])  # first frames include lazy allocations
    return {
        "frames": int(len(times)),
        "p50_ms": float(np.percentile(times, 50)),
        "p95_ms": float(np.percentile(times, 95)),
        "p99_ms": float(np.percentile(times, 99)),
        "max_ms": float(times.max()),
        "budget_ms": 10.0,
    }


# --- segmenter EER protocol -------------------------------------------------------


def _eer_trial(segmenter: SegmenterModel, sir_db: float, rng: np.random.Generator,
               cluster_cfg: ClusterConfig, spec: AudioFrameSpec) -> tuple[np.ndarray, np.ndarray]:
    """One mixture trial: primary talks first, an interferer overlaps at the
    requested SIR. Returns (scores, truth) over scoreable frames."""
    from .datagen import make_voice, render_utterance
    from .features import apply_cmn, energy_vad, extract_mfcc

    sr = 16000
    n = 12 * sr
    primary_voice = make_voice(rng, "low" if rng.integers(2) else "high")
    interferer_voice = make_voice(rng, "high" if rng.integers(2) else "low")
    prim = np.zeros(n, dtype=np.float32)
    intf = np.zeros(n, dtype=np.float32)

    cursor = int(0.2 * sr)
    first = render_utterance(primary_voice, int(2.2 * sr), rng)
    prim[cursor:cursor + len(first)] = first
    cursor += len(first)
    while cursor < n - sr:
        cursor += int(rng.uniform(0.4, 0.9) * sr)
        dur = min(int(rng.uniform(0.8, 1.8) * sr), n - cursor)
        if dur <= 0:
            break
        prim[cursor:cursor + dur] = render_utterance(primary_voice, dur, rng)
        cursor += dur
    cursor = int(3.0 * sr)
    while cursor < n - sr // 2:
        dur = min(int(rng.uniform(0.6, 1.5) * sr), n - cursor)
        intf[cursor:cursor + dur] = render_utterance(interferer_voice, dur, rng)
        cursor += dur + int(rng.uniform(0.3, 1.0) * sr)

    p_act = np.abs(prim) > 1e-6
    i_act = np.abs(intf) > 1e-6
    rms_p = float(np.sqrt(np.mean(prim[p_act] ** 2))) if p_act.any() else 0.0
    rms_i = float(np.sqrt(np.mean(intf[i_act] ** 2))) if i_act.any() else 1.0
    scale = rms_p / (rms_i * 10.0 ** (sir_db / 20.0))
    mixture = prim + scale * intf

    t = len(mixture) // spec.hop
    frame_p = p_act[: t * spec.hop].reshape(t, spec.hop).any(axis=1)
    frame_i = i_act[: t * spec.hop].reshape(t, spec.hop).any(axis=1)
    vad = energy_vad(mixture, spec) > 0
    mfcc = apply_cmn(extract_mfcc(mixture, 32, spec), "streaming")
    with torch.no_grad():
        out = segmenter(torch.from_numpy(mfcc)[None], mode="infer")
        z = out.z[0].numpy()       # [K, T, E]
        stops = out.s[0].numpy()   # [K, T]
    active = np.cumsum(stops > 0.5, axis=0) == 0

    track = PrimaryTrack()
    scores, truth = [], []
    for ft in range(t):
        zt = z[:, ft]
        if not track.initialized:
            if vad[ft]:
                cands = np.flatnonzero(active[:, ft])
                idx = int(cands[np.argmax(np.linalg.norm(zt[cands], axis=1))]) \
                    if len(cands) else int(np.argmax(np.linalg.norm(zt, axis=1)))
                cluster_step(zt[idx], track, cluster_cfg, 1)
            continue
        if not vad[ft] or not (frame_p[ft] or frame_i[ft]):
            continue
        idx, rho = select_primary_peel(zt, track, cluster_cfg, vad_t=1,
                                       active=active[:, ft])
        if idx is not None:
            cluster_step(zt[idx], track, cluster_cfg, 1)
        scores.append(rho)
        truth.append(bool(frame_p[ft]))
    return np.array(scores), np.array(truth, dtype=bool)


def segmenter_eer_protocol(segmenter: SegmenterModel,
                           sir_buckets=(-5.0, 0.0, 5.0, 10.0, 15.0),
                           trials_per_bucket: int = 12, seed: int = 0,
                           cluster_cfg: ClusterConfig | None = None) -> dict:
    """Score primary-vs-nonprimary separation per SIR bucket.

    Returns {sir_db: (scores, truth_primary_mask)} ready for eer_vs_sir.
    """
    segmenter.eval()
    spec = AudioFrameSpec()
    cluster_cfg = cluster_cfg or ClusterConfig()
    buckets = {}
    for sir_db in sir_buckets:
        all_scores, all_truth = [], []
        for trial in range(trials_per_bucket):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, int(sir_db * 10) & 0xFFFF, trial)))
            s, tr = _eer_trial(segmenter, sir_db, rng, cluster_cfg, spec)
            all_scores.append(s)
            all_truth.append(tr)
        buckets[sir_db] = (np.concatenate(all_scores), np.concatenate(all_truth))
    return buckets
