"""Frame-level and turn-level evaluation.

Frame metrics cover the 5-class problem (per-class P/R/F1, macro F1,
accuracy, confusion matrix) plus the binary Final-vs-Others collapse.
Turn-level detection reads the per-frame Final score: a turn counts as
detected at the first frame at or after its true end where the score
crosses the threshold, and latency is that delay in milliseconds. A
windowed adapter maps any fixed-window segment scorer onto the same
protocol, and EER-vs-SIR summarizes the segmenter's primary/non-primary
separation per interference bucket.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .eot import NUM_CLASSES, TurnState

logger = logging.getLogger(__name__)

FRAME_RATE = 100
MS_PER_FRAME = 10


@dataclass
class FrameMetrics:
    confusion: np.ndarray          # [5, 5], rows = truth
    precision: np.ndarray          # [5]
    recall: np.ndarray             # [5]
    f1: np.ndarray                 # [5]
    macro_f1: float
    accuracy: float
    binary_precision: float
    binary_recall: float
    binary_f1: float
    binary_accuracy: float

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "binary_final_vs_others": {
                "precision": self.binary_precision,
                "recall": self.binary_recall,
                "f1": self.binary_f1,
                "accuracy": self.binary_accuracy,
            },
        }


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def frame_metrics(pred: np.ndarray, truth: np.ndarray) -> FrameMetrics:
    """Multi-class frame metrics; macro F1 averages classes with support."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    precision = np.zeros(NUM_CLASSES)
    recall = np.zeros(NUM_CLASSES)
    f1 = np.zeros(NUM_CLASSES)
    for c in range(NUM_CLASSES):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        precision[c], recall[c], f1[c] = _prf(tp, fp, fn)
    support = confusion.sum(axis=1)
    present = support > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    bin_pred = pred == TurnState.FINAL
    bin_true = truth == TurnState.FINAL
    tp = float(np.sum(bin_pred & bin_true))
    fp = float(np.sum(bin_pred & ~bin_true))
    fn = float(np.sum(~bin_pred & bin_true))
    bp, br, bf = _prf(tp, fp, fn)
    bacc = float(np.mean(bin_pred == bin_true)) if len(pred) else 0.0
    return FrameMetrics(confusion, precision, recall, f1, macro, accuracy,
                        bp, br, bf, bacc)


@dataclass
class TurnEvent:
    speaker: int
    t_end: int
    t_det: int | None
    detected: bool

    @property
    def latency_ms(self) -> int | None:
        if not self.detected:
            return None
        return MS_PER_FRAME * (self.t_det - self.t_end)


def detect_turn_ends(final_scores: np.ndarray, threshold: float,
                     truth_turns: list, speaker: int = 0) -> list[TurnEvent]:
    """Score threshold crossings at or after each true turn end.

    ``truth_turns`` is a sorted list of turn annotations for one speaker.
    The search for each turn extends to the next turn's start (same speaker)
    or the end of the track. The crossing test is strict (> threshold).
    """
    scores = np.asarray(final_scores, dtype=np.float64)
    t = len(scores)
    events = []
    turns = sorted(truth_turns, key=lambda a: a.start_frame)
    for i, ann in enumerate(turns):
        stop = turns[i + 1].start_frame if i + 1 < len(turns) else t
        stop = min(stop, t)
        t_end = ann.end_frame
        if t_end >= t:
            continue
        window = scores[t_end:stop]
        above = np.flatnonzero(window > threshold)
        if len(above):
            events.append(TurnEvent(speaker, t_end, t_end + int(above[0]), True))
        else:
            events.append(TurnEvent(speaker, t_end, None, False))
    return events


def lower_median(values) -> float:
    """Median; even-length inputs take the lower middle for determinism."""
    values = sorted(values)
    if not values:
        raise ValueError("median of empty sequence")
    return float(values[(len(values) - 1) // 2])


def upward_crossings(scores: np.ndarray, threshold: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    above = scores > threshold
    rising = above & ~np.concatenate([[False], above[:-1]])
    return np.flatnonzero(rising)


@dataclass
class TurnDetectionMetrics:
    recall: float
    precision: float
    f1: float
    accuracy: float
    median_latency_ms: float | None
    num_turns: int
    num_detected: int
    num_false_alarms: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def turn_detection_metrics(events: list[TurnEvent], final_scores: np.ndarray,
                           threshold: float, fa_window_frames: int = 50,
                           scan_unit_frames: int = 50) -> TurnDetectionMetrics:
    """Turn-level P/R/F1/accuracy plus median latency.

    A false alarm is an upward threshold crossing farther than
    ``fa_window_frames`` from every true turn end. Accuracy divides the
    track into scan units: a positive unit (contains a true end) is correct
    when its turn was detected, a negative unit when it contains no false
    alarm.
    """
    if not events:
        raise ValueError("no turns to evaluate")
    t_ends = np.array([e.t_end for e in events])
    detected = [e for e in events if e.detected]
    crossings = upward_crossings(final_scores, threshold)
    fa = [c for c in crossings
          if np.abs(t_ends - c).min() > fa_window_frames]
    recall = len(detected) / len(events)
    precision = len(detected) / (len(detected) + len(fa)) \
        if detected or fa else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    n_units = max(int(np.ceil(len(final_scores) / scan_unit_frames)), 1)
    unit_has_end = np.zeros(n_units, dtype=bool)
    unit_detected = np.zeros(n_units, dtype=bool)
    for e in events:
        u = min(e.t_end // scan_unit_frames, n_units - 1)
        unit_has_end[u] = True
        unit_detected[u] |= e.detected
    unit_has_fa = np.zeros(n_units, dtype=bool)
    for c in fa:
        unit_has_fa[min(c // scan_unit_frames, n_units - 1)] = True
    correct = int((unit_has_end & unit_detected).sum()
                  + (~unit_has_end & ~unit_has_fa).sum())
    accuracy = correct / n_units
    latency = lower_median([e.latency_ms for e in detected]) if detected else None
    return TurnDetectionMetrics(recall, precision, f1, accuracy, latency,
                                len(events), len(detected), len(fa))


# --- whole-track decoding ---------------------------------------------------


_VOTE_PRIORITY = (TurnState.FINAL, TurnState.BACKCHANNEL, TurnState.SPEECH,
                  TurnState.INTERIM, TurnState.INITIAL)


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def vote_decode_series(logits: np.ndarray) -> np.ndarray:
    """Majority-vote states for a whole track of logits [2, T, 4, 5].

    Frame t collects the horizon-h prediction emitted at frame t - h (when
    available); ties break by Final > Backchannel > Speech > Interim >
    Initial. Mirrors the streaming decoder exactly.
    """
    s, t, h, c = logits.shape
    votes = np.argmax(logits, axis=-1)  # [2, T, 4]
    counts = np.zeros((s, t, c), dtype=np.int64)
    targets = np.arange(t)
    for hz in range(h):
        emitted = votes[:, : t - hz, hz] if hz else votes[:, :, hz]
        for spk in range(s):
            np.add.at(counts[spk], (targets[hz:], emitted[spk]), 1)
    best = counts.max(axis=-1)
    out = np.zeros((s, t), dtype=np.uint8)
    assigned = np.zeros((s, t), dtype=bool)
    for cls in _VOTE_PRIORITY:
        hit = (counts[:, :, cls] == best) & ~assigned
        out[hit] = int(cls)
        assigned |= hit
    return out


def final_score_series(logits: np.ndarray) -> np.ndarray:
    """Per-frame aggregated Final probability for logits [2, T, 4, 5].

    The score at frame t is the mean softmax Final probability over the
    horizon votes that target t (h0 from t, h1 from t-1, ...).
    """
    s, t, h, _ = logits.shape
    probs = _softmax(logits)[..., int(TurnState.FINAL)]  # [2, T, 4]
    stacked = np.full((h, s, t), np.nan)
    for hz in range(h):
        stacked[hz, :, hz:] = probs[:, : t - hz if hz else t, hz]
    with np.errstate(invalid="ignore"):
        return np.nanmean(stacked, axis=0)


# --- windowed-baseline alignment ------------------------------------------------


WINDOW_SECONDS = 8.0
WINDOW_HOP_FRAMES = 10


@dataclass
class WindowScore:
    window_start_frame: int
    window_end_frame: int
    score: float


def windowed_baseline_adapter(segment_scorer, audio: np.ndarray, threshold: float,
                              truth_turns: list, sample_rate: int = 16000,
                              speaker: int = 0
                              ) -> tuple[list[TurnEvent], list[WindowScore]]:
    """Evaluate a fixed-window segment scorer on the turn-end protocol.

    The scorer sees 8 s windows hopped by 10 frames (100 ms); each score is
    assigned to the frame of its window end. For a turn ending at t_end the
    detection time is the end of the first window with end >= t_end and
    score above threshold. Audio shorter than 8 s yields one right-aligned
    (left-padded) window.
    """
    hop_samples = sample_rate // FRAME_RATE
    win_samples = int(WINDOW_SECONDS * sample_rate)
    total_frames = len(audio) // hop_samples
    win_frames = win_samples // hop_samples
    if total_frames <= win_frames:
        end_frames = [total_frames]
    else:
        end_frames = list(range(win_frames, total_frames + 1, WINDOW_HOP_FRAMES))
    scores = []
    for end in end_frames:
        hi = end * hop_samples
        lo = hi - win_samples
        if lo < 0:
            chunk = np.concatenate([np.zeros(-lo, dtype=np.float32), audio[:hi]])
        else:
            chunk = audio[lo:hi]
        scores.append(WindowScore(end - win_frames, end, float(segment_scorer(chunk))))
    ends = np.array([w.window_end_frame for w in scores])
    vals = np.array([w.score for w in scores])
    events = []
    for ann in sorted(truth_turns, key=lambda a: a.start_frame):
        usable = np.flatnonzero((ends >= ann.end_frame) & (vals > threshold))
        if len(usable):
            t_det = int(ends[usable[0]])
            events.append(TurnEvent(speaker, ann.end_frame, t_det, True))
        else:
            events.append(TurnEvent(speaker, ann.end_frame, None, False))
    return events, scores


# --- EER vs SIR ------------------------------------------------------------------


@dataclass
class EerPoint:
    sir_db: float
    eer: float
    num_trials: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def eer_from_scores(positive: np.ndarray, negative: np.ndarray) -> float:
    """Equal error rate where FAR meets FRR, linearly interpolated."""
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if len(positive) == 0 or len(negative) == 0:
        raise ValueError("need scores from both classes")
    thresholds = np.unique(np.concatenate([positive, negative]))
    # sweep: accept iff score >= thr
    far = np.array([(negative >= t).mean() for t in thresholds])
    frr = np.array([(positive < t).mean() for t in thresholds])
    diff = far - frr
    idx = np.flatnonzero(diff <= 0)
    if len(idx) == 0:
        return 1.0
    i = idx[0]
    if i == 0 or diff[i] == 0:
        return float((far[i] + frr[i]) / 2.0)
    # interpolate between the straddling sweep points
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    far_i = far[i - 1] + w * (far[i] - far[i - 1])
    frr_i = frr[i - 1] + w * (frr[i] - frr[i - 1])
    return float((far_i + frr_i) / 2.0)


def eer_vs_sir(scores_by_bucket: dict) -> tuple[list[EerPoint], list[str]]:
    """Per-SIR-bucket EER of the primary/non-primary decision statistic.

    ``scores_by_bucket`` maps sir_db -> (scores, truth_primary_mask) over
    VAD-active frames. Buckets with a single class are omitted with a
    reason.
    """
    points, skipped = [], []
    for sir_db in sorted(scores_by_bucket):
        scores, truth = scores_by_bucket[sir_db]
        scores = np.asarray(scores, dtype=np.float64)
        truth = np.asarray(truth, dtype=bool)
        pos, neg = scores[truth], scores[~truth]
        if len(pos) == 0 or len(neg) == 0:
            reason = f"bucket {sir_db} dB skipped: one class only"
            skipped.append(reason)
            logger.warning(reason)
            continue
        points.append(EerPoint(float(sir_db), eer_from_scores(pos, neg),
                               int(len(scores))))
    return points, skipped


# --- report output ----------------------------------------------------------------


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def write_events_csv(path, events: list[TurnEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["speaker", "t_end", "t_det", "latency_ms", "detected"])
        for e in events:
            writer.writerow([e.speaker, e.t_end,
                             "" if e.t_det is None else e.t_det,
                             "" if e.latency_ms is None else e.latency_ms,
                             int(e.detected)])


def write_eer_csv(path, points: list[EerPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sir_db", "eer", "trials"])
        for p in points:
            writer.writerow([p.sir_db, f"{p.eer:.6f}", p.num_trials])
