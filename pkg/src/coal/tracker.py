"""Tracking by detection: constant-velocity Kalman motion and two-stage
(high/low score) association on IoU, driven by semantic match scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from coal import tensor as T
from coal.losses import to_probability
from coal.matching import Box, iou_matrix, linear_assignment
from coal.priors import SceneRecord, Sequence

log = logging.getLogger(__name__)

TENTATIVE, CONFIRMED, LOST, REMOVED = "tentative", "confirmed", "lost", "removed"
_TRANSITIONS = {
    TENTATIVE: {TENTATIVE, CONFIRMED, REMOVED},
    CONFIRMED: {CONFIRMED, LOST},
    LOST: {LOST, CONFIRMED, REMOVED},
    REMOVED: set(),
}


class StateError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Kalman filter over (cx, cy, aspect, h) and their velocities


@dataclass
class KalmanState:
    mean: np.ndarray  # (8,)
    covariance: np.ndarray  # (8, 8)

    def box(self) -> Box:
        cx, cy, aspect, h = self.mean[:4]
        h = max(float(h), 0.0)
        return Box(float(cx), float(cy), max(float(aspect) * h, 0.0), h)


class KalmanFilter:
    """Noise standard deviations scale with box height (position 1/20,
    velocity 1/160); ``noise_scale`` multiplies every one of them."""

    def __init__(self, position_weight: float = 1 / 20, velocity_weight: float = 1 / 160, noise_scale: float = 1.0):
        self.position_weight = position_weight * noise_scale
        self.velocity_weight = velocity_weight * noise_scale
        self.noise_scale = noise_scale
        self.motion = np.eye(8)
        self.motion[:4, 4:] = np.eye(4)
        self.observe = np.eye(4, 8)

    @staticmethod
    def measurement(box: Box) -> np.ndarray:
        aspect = box.w / box.h if box.h > 0 else 0.0
        return np.array([box.cx, box.cy, aspect, box.h])

    def initiate(self, box: Box) -> KalmanState:
        z = self.measurement(box)
        mean = np.concatenate([z, np.zeros(4)])
        h, p, v, s = z[3], self.position_weight, self.velocity_weight, self.noise_scale
        std = np.array([2 * p * h, 2 * p * h, 1e-2 * s, 2 * p * h, 10 * v * h, 10 * v * h, 1e-5 * s, 10 * v * h])
        return KalmanState(mean, np.diag(std**2))

    def _settle(self, cov: np.ndarray) -> np.ndarray:
        cov = (cov + cov.T) / 2
        low = float(np.linalg.eigvalsh(cov).min())
        if low < -1e-6:
            log.warning("covariance lost positive semi-definiteness (min eigenvalue %.3g)", low)
        return cov

    def predict(self, state: KalmanState) -> KalmanState:
        h, p, v, s = state.mean[3], self.position_weight, self.velocity_weight, self.noise_scale
        std = np.array([p * h, p * h, 1e-2 * s, p * h, v * h, v * h, 1e-5 * s, v * h])
        mean = self.motion @ state.mean
        cov = self.motion @ state.covariance @ self.motion.T + np.diag(std**2)
        return KalmanState(mean, self._settle(cov))

    def project(self, state: KalmanState) -> tuple[np.ndarray, np.ndarray]:
        h, p, s = state.mean[3], self.position_weight, self.noise_scale
        std = np.array([p * h, p * h, 1e-1 * s, p * h])
        mean = self.observe @ state.mean
        cov = self.observe @ state.covariance @ self.observe.T + np.diag(std**2)
        return mean, cov

    def update(self, state: KalmanState, box: Box) -> KalmanState:
        projected, innovation_cov = self.project(state)
        try:
            inv = np.linalg.inv(innovation_cov)
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(innovation_cov)
        gain = state.covariance @ self.observe.T @ inv
        mean = state.mean + gain @ (self.measurement(box) - projected)
        cov = state.covariance - gain @ innovation_cov @ gain.T
        return KalmanState(mean, self._settle(cov))


# --------------------------------------------------------------------------
# tracks and association


@dataclass
class Detection:
    box: Box
    semantic_score: float
    frame_id: int = 0
    detector_score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.semantic_score <= 1.0:
            raise ValueError(f"semantic score {self.semantic_score} outside [0, 1]")


@dataclass
class Track:
    track_id: int
    kalman: KalmanState
    state: str = TENTATIVE
    last_score: float = 0.0
    age: int = 1
    hits: int = 1
    time_since_update: int = 0
    history: list[str] = field(default_factory=list)

    def move(self, new_state: str) -> None:
        if new_state not in _TRANSITIONS[self.state]:
            raise StateError(f"track {self.track_id}: illegal transition {self.state} -> {new_state}")
        self.history.append(new_state)
        self.state = new_state

    @property
    def box(self) -> Box:
        return self.kalman.box()


@dataclass
class TrackerConfig:
    tau_high: float = 0.4
    tau_low: float = 0.1
    epsilon: float = 0.4
    iou_gate: float = 0.3
    max_lost: int = 30
    noise_scale: float = 1.0
    combine_detector_score: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.tau_low <= self.tau_high <= 1.0:
            raise ValueError("thresholds must satisfy 0 <= tau_low <= tau_high <= 1")
        if not 0.0 <= self.iou_gate <= 1.0:
            raise ValueError("iou_gate must lie in [0, 1]")
        if self.max_lost < 0:
            raise ValueError("max_lost must be non-negative")


def gated_matching(tracks: list[Track], detections: list[Detection], gate: float):
    """Max-IoU assignment with pairs below ``gate`` forbidden."""
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    ious = iou_matrix([t.box for t in tracks], [d.box for d in detections])
    result = linear_assignment(ious, maximize=True, forbidden=ious < gate)
    return result.pairs, result.unmatched_rows, result.unmatched_columns


@dataclass
class OutputRecord:
    frame_id: int
    track_id: int
    box: Box
    score: float


class Tracker:
    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.config.validate()
        self.kf = KalmanFilter(noise_scale=self.config.noise_scale)
        self.tracks: list[Track] = []
        self.next_id = 1
        self.frames_seen = 0

    def _score(self, det: Detection) -> float:
        if self.config.combine_detector_score:
            return det.semantic_score * det.detector_score
        return det.semantic_score

    def _hit(self, track: Track, det: Detection) -> None:
        track.kalman = self.kf.update(track.kalman, det.box)
        track.hits += 1
        track.time_since_update = 0
        track.last_score = self._score(det)
        track.move(CONFIRMED)

    def step(self, detections: list[Detection]) -> list[Track]:
        """Advance one frame; returns confirmed tracks updated this frame."""
        cfg = self.config
        first_frame = self.frames_seen == 0
        self.frames_seen += 1
        active = [t for t in self.tracks if t.state != REMOVED]
        for t in active:
            t.kalman = self.kf.predict(t.kalman)
            t.age += 1

        high = [d for d in detections if self._score(d) >= cfg.tau_high]
        low = [d for d in detections if cfg.tau_low <= self._score(d) < cfg.tau_high]

        pairs, free_tracks, free_high = gated_matching(active, high, cfg.iou_gate)
        matched = set()
        for r, c in pairs:
            self._hit(active[r], high[c])
            matched.add(id(active[r]))

        second = [active[r] for r in free_tracks if active[r].state == CONFIRMED]
        pairs2, _, _ = gated_matching(second, low, cfg.iou_gate)
        for r, c in pairs2:
            self._hit(second[r], low[c])
            matched.add(id(second[r]))

        for t in active:
            if id(t) in matched:
                continue
            t.time_since_update += 1
            if t.state == TENTATIVE:
                t.move(REMOVED)
            elif t.state == CONFIRMED:
                t.move(LOST)
            elif t.state == LOST and t.time_since_update > cfg.max_lost:
                t.move(REMOVED)

        for c in free_high:
            det = high[c]
            if self._score(det) < cfg.epsilon:
                continue
            track = Track(self.next_id, self.kf.initiate(det.box), last_score=self._score(det))
            track.history.append(TENTATIVE)
            if first_frame:
                track.move(CONFIRMED)
            self.next_id += 1
            self.tracks.append(track)

        self.tracks = [t for t in self.tracks if t.state != REMOVED]
        return [t for t in self.tracks if t.state == CONFIRMED and t.time_since_update == 0]


def track_detections(frames: list[tuple[int, list[Detection]]], config: TrackerConfig | None = None) -> list[OutputRecord]:
    """Run the tracker over ``(frame_id, detections)`` pairs in order."""
    tracker = Tracker(config)
    out = []
    for frame_id, dets in frames:
        for t in tracker.step(dets):
            out.append(OutputRecord(frame_id, t.track_id, t.box, t.last_score))
    return out


# --------------------------------------------------------------------------
# scoring with a trained model


class Scorer:
    """A trained model plus its frozen encoders, used as the observation model."""

    def __init__(self, model, config, esi: bool | None = None):
        from coal.training import FeatureCache

        if model.config.dim != config.dim:
            raise ValueError(f"model dimension {model.config.dim} does not match configured {config.dim}")
        self.model = model
        self.config = config
        self.esi = config.esi_enabled if esi is None else esi
        with T.precision(config.dtype):
            self.cache = FeatureCache(config)

    @classmethod
    def from_checkpoint(cls, checkpoint, esi: bool | None = None) -> "Scorer":
        return cls(checkpoint.state.model, checkpoint.config, esi)

    def score_frame(self, frame: SceneRecord, expression: str) -> list[Detection]:
        if not frame.proposals:
            return []
        with T.precision(self.config.dtype):
            inputs = self.cache.frame(frame)
            scores = self.model.forward_frame(inputs.visual, inputs.proposals, self.cache.text(expression), self.esi)
        probs = np.clip(to_probability(scores.data.astype(np.float64)), 0.0, 1.0)
        return [
            Detection(p.box, float(s), frame.frame_id, p.detector_score) for p, s in zip(frame.proposals, probs)
        ]


def run_sequence(scorer: Scorer, sequence: Sequence, expression: str, config: TrackerConfig | None = None) -> list[OutputRecord]:
    frames = sorted(sequence.frames, key=lambda f: f.frame_id)
    return track_detections([(f.frame_id, scorer.score_frame(f, expression)) for f in frames], config)


# --------------------------------------------------------------------------
# prediction files


def format_records(records: list[OutputRecord]) -> str:
    lines = []
    for r in sorted(records, key=lambda r: (r.frame_id, r.track_id)):
        x, y, w, h = r.box.tlwh()
        lines.append(f"{r.frame_id},{r.track_id},{x:.6f},{y:.6f},{w:.6f},{h:.6f},{r.score:.6f},-1,-1,-1\n")
    return "".join(lines)


def parse_records(text: str) -> list[OutputRecord]:
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 7:
            raise ValueError(f"line {line_no}: expected at least 7 fields, got {len(parts)}")
        try:
            frame, tid = int(parts[0]), int(parts[1])
            x, y, w, h, score = (float(v) for v in parts[2:7])
        except ValueError as exc:
            raise ValueError(f"line {line_no}: {exc}") from exc
        out.append(OutputRecord(frame, tid, Box.from_tlwh(x, y, w, h), score))
    return out
