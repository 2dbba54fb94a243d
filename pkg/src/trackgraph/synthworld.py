"""Synthetic world generation and detection-stream corruption.

Stands in for an image backbone and detector: objects with latent appearance
vectors move smoothly through the unit square, and a corruption pass turns
the ground truth into a noisy detection stream (misses, duplicates, false
positives, class confusion, box jitter, appearance noise).  Streams load and
save as JSON Lines so externally produced detections can be fed in.

Sampling order (replayable, one generator seeded from the config):
  per object i = 0..max_objects-1, in order:
    class id, entry frame, exit flag per frame after entry, latent appearance
    (A values), initial center (2), velocity angle, speed, box size (2),
    then per frame t = 1..T-1 a turn-noise value.
Corruption draws, per frame, in detection order: miss flag per present
object, duplicate flag, jitter (4), appearance noise (A) per emitted copy;
then the false-positive count and per false positive box (4) and
appearance (A).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Malformed stream files or inconsistent sequence data."""


@dataclass
class WorldConfig:
    num_classes: int = 5
    frames: int = 10
    max_objects: int = 6
    appearance_dim: int = 8
    mask_grid: int = 24
    speed_range: tuple[float, float] = (0.01, 0.05)
    turn_sigma: float = 0.2
    size_range: tuple[float, float] = (0.12, 0.3)
    entry_window: int = 3        # objects enter in frames [0, entry_window)
    exit_prob: float = 0.02      # per-frame chance of leaving once entered
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.num_classes < 1 or self.appearance_dim < 1:
            raise DataError("frames, num_classes, and appearance_dim must be >= 1")


@dataclass
class NoiseConfig:
    miss_prob: float = 0.0
    false_positive_rate: float = 0.0   # expected count per frame (Poisson)
    class_temperature: float = 0.0     # 0: exact one-hot scores
    box_jitter: float = 0.0
    appearance_noise: float = 0.0
    duplicate_prob: float = 0.0

    def __post_init__(self):
        for name in ("miss_prob", "duplicate_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must be a probability, got {v}")
        for name in ("false_positive_rate", "class_temperature", "box_jitter",
                     "appearance_noise"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")


@dataclass
class TrackedObject:
    """One ground-truth object: constant identity, class, and latent
    appearance; per-frame presence, box, and mask."""

    id: int
    class_id: int
    appearance: np.ndarray            # (A,) latent
    present: np.ndarray               # (T,) bool
    boxes: np.ndarray                 # (T, 4) cx, cy, w, h
    masks: np.ndarray                 # (T, G, G) uint8


@dataclass
class GroundTruthSequence:
    config: WorldConfig
    objects: list[TrackedObject] = field(default_factory=list)

    @property
    def frames(self) -> int:
        return self.config.frames


@dataclass
class Detection:
    box: np.ndarray         # (4,)
    scores: np.ndarray      # (C+1,), background last, sums to 1
    mask: np.ndarray        # (G, G) uint8
    appearance: np.ndarray  # (A,)
    source: int | str | None = None  # gt object id, "fp", or None (external)


@dataclass
class DetectionSequence:
    num_classes: int
    frames: list[list[Detection]] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# generation


def render_mask(box, grid: int) -> np.ndarray:
    """Ellipse inscribed in the box, rasterized on the unit-square grid by
    cell-center membership."""
    cx, cy, w, h = (float(v) for v in box)
    centers = (np.arange(grid) + 0.5) / grid
    gx, gy = np.meshgrid(centers, centers)  # gy rows, gx cols
    rx = max(w / 2, 1e-9)
    ry = max(h / 2, 1e-9)
    inside = ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0
    return inside.astype(np.uint8)


def _clamp_center(c, half, lo=0.0, hi=1.0):
    return min(max(c, lo + half), hi - half)


def generate_sequence(config: WorldConfig) -> GroundTruthSequence:
    """Sample a world per the documented order; deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    T, G = config.frames, config.mask_grid
    seq = GroundTruthSequence(config=config)
    for i in range(config.max_objects):
        class_id = int(rng.integers(0, config.num_classes))
        entry = int(rng.integers(0, min(config.entry_window, T)))
        present = np.zeros(T, dtype=bool)
        alive = True
        for t in range(entry, T):
            if alive and t > entry and rng.random() < config.exit_prob:
                alive = False
            present[t] = alive
        appearance = rng.normal(size=config.appearance_dim)
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*config.speed_range)
        w, h = rng.uniform(*config.size_range, size=2)
        boxes = np.zeros((T, 4))
        masks = np.zeros((T, G, G), dtype=np.uint8)
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        for t in range(T):
            if t > 0:
                turn = rng.normal(0.0, config.turn_sigma)
                ca, sa = np.cos(turn), np.sin(turn)
                vx, vy = ca * vx - sa * vy, sa * vx + ca * vy
                cx, cy = cx + vx, cy + vy
            cx = _clamp_center(cx, w / 2)
            cy = _clamp_center(cy, h / 2)
            boxes[t] = (cx, cy, w, h)
            if present[t]:
                masks[t] = render_mask(boxes[t], G)
        seq.objects.append(TrackedObject(id=i, class_id=class_id,
                                         appearance=appearance, present=present,
                                         boxes=boxes, masks=masks))
    return seq


def crossing_sequence(config: WorldConfig, num_pairs: int = 1) -> GroundTruthSequence:
    """Stress preset: pairs of same-class objects that start on opposite sides
    and cross near the middle of the sequence, plus random extras up to
    max_objects.  Deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    T, G = config.frames, config.mask_grid
    seq = GroundTruthSequence(config=config)
    next_id = 0
    for _ in range(num_pairs):
        class_id = int(rng.integers(0, config.num_classes))
        lane = rng.uniform(0.35, 0.65)
        w, h = rng.uniform(*config.size_range, size=2)
        drift = rng.uniform(-0.1, 0.1)
        for direction in (+1, -1):
            appearance = rng.normal(size=config.appearance_dim)
            x0 = 0.2 if direction > 0 else 0.8
            x1 = 0.8 if direction > 0 else 0.2
            boxes = np.zeros((T, 4))
            masks = np.zeros((T, G, G), dtype=np.uint8)
            for t in range(T):
                a = t / max(T - 1, 1)
                cx = _clamp_center(x0 + (x1 - x0) * a, w / 2)
                cy = _clamp_center(lane + direction * drift * (a - 0.5), h / 2)
                boxes[t] = (cx, cy, w, h)
                masks[t] = render_mask(boxes[t], G)
            seq.objects.append(TrackedObject(
                id=next_id, class_id=class_id, appearance=appearance,
                present=np.ones(T, dtype=bool), boxes=boxes, masks=masks))
            next_id += 1
    extra_cfg = WorldConfig(**{**config.__dict__,
                               "max_objects": max(config.max_objects - next_id, 0),
                               "seed": config.seed + 1})
    extras = generate_sequence(extra_cfg)
    for obj in extras.objects:
        obj.id = next_id
        next_id += 1
        seq.objects.append(obj)
    return seq


# ---------------------------------------------------------------------------
# corruption


def _class_scores(class_id: int, num_classes: int, temperature: float) -> np.ndarray:
    scores = np.zeros(num_classes + 1)
    if temperature == 0.0:
        scores[class_id] = 1.0
        return scores
    logits = np.zeros(num_classes + 1)
    logits[class_id] = 1.0 / temperature
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _diffuse_scores(rng, num_classes: int) -> np.ndarray:
    raw = rng.uniform(0.5, 1.0, size=num_classes + 1)
    return raw / raw.sum()


def corrupt(gt: GroundTruthSequence, noise: NoiseConfig, seed: int) -> DetectionSequence:
    """Emit one detection per present object (unless missed), plus duplicates
    and false positives; truncate to the 16 highest-confidence detections."""
    rng = np.random.default_rng(seed)
    cfg = gt.config
    out = DetectionSequence(num_classes=cfg.num_classes)
    for t in range(cfg.frames):
        dets: list[Detection] = []
        for obj in gt.objects:
            if not obj.present[t]:
                continue
            if rng.random() < noise.miss_prob:
                continue
            copies = 2 if rng.random() < noise.duplicate_prob else 1
            for _ in range(copies):
                box = obj.boxes[t].copy()
                if noise.box_jitter > 0:
                    box = box + rng.normal(0, noise.box_jitter, size=4)
                    box[2:] = np.maximum(box[2:], 0.01)
                app = obj.appearance.copy()
                if noise.appearance_noise > 0:
                    app = app + rng.normal(0, noise.appearance_noise,
                                           size=cfg.appearance_dim)
                dets.append(Detection(
                    box=box,
                    scores=_class_scores(obj.class_id, cfg.num_classes,
                                         noise.class_temperature),
                    mask=obj.masks[t].copy(),
                    appearance=app,
                    source=obj.id,
                ))
        if noise.false_positive_rate > 0:
            for _ in range(int(rng.poisson(noise.false_positive_rate))):
                box = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25)])
                dets.append(Detection(
                    box=box,
                    scores=_diffuse_scores(rng, cfg.num_classes),
                    mask=render_mask(box, cfg.mask_grid),
                    appearance=rng.normal(size=cfg.appearance_dim),
                    source="fp",
                ))
        if len(dets) > 16:
            conf = [float(np.max(d.scores[:-1])) for d in dets]
            keep = sorted(np.argsort(conf)[::-1][:16])
            dets = [dets[i] for i in keep]
        out.frames.append(dets)
    return out


# ---------------------------------------------------------------------------
# JSON Lines input/output


def _encode_mask(mask: np.ndarray) -> str:
    return base64.b64encode(np.asarray(mask, dtype=np.uint8).tobytes()).decode("ascii")


def _decode_mask(data: str, grid: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    if raw.size != grid * grid:
        raise DataError(f"mask payload has {raw.size} bytes, expected {grid * grid}")
    return raw.reshape(grid, grid).copy()


def save_detections_jsonl(seq: DetectionSequence, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, dets in enumerate(seq.frames):
            record = {
                "frame": t,
                "detections": [
                    {
                        "box": [float(v) for v in d.box],
                        "scores": [float(v) for v in d.scores],
                        "mask": _encode_mask(d.mask),
                        "appearance": [float(v) for v in d.appearance],
                        **({"source": d.source} if d.source is not None else {}),
                    }
                    for d in dets
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_detections_jsonl(path) -> DetectionSequence:
    frames: dict[int, list[Detection]] = {}
    num_classes = None
    for lineno, line in enumerate(_read_lines(path), start=1):
        try:
            record = json.loads(line)
            t = int(record["frame"])
            dets = []
            for d in record["detections"]:
                scores = np.asarray(d["scores"], dtype=np.float64)
                grid = int(round(np.sqrt(len(base64.b64decode(d["mask"])))))
                dets.append(Detection(
                    box=np.asarray(d["box"], dtype=np.float64),
                    scores=scores,
                    mask=_decode_mask(d["mask"], grid),
                    appearance=np.asarray(d["appearance"], dtype=np.float64),
                    source=d.get("source"),
                ))
                num_classes = len(scores) - 1
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: malformed line {lineno}: {exc}") from None
        frames[t] = dets
    seq = DetectionSequence(num_classes=num_classes if num_classes is not None else 0)
    for t in range(max(frames) + 1 if frames else 0):
        seq.frames.append(frames.get(t, []))
    return seq


def save_ground_truth_jsonl(seq: GroundTruthSequence, path):
    cfg = seq.config
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in range(cfg.frames):
            objects = []
            for obj in seq.objects:
                if not obj.present[t]:
                    continue
                objects.append({
                    "id": obj.id,
                    "class": obj.class_id,
                    "box": [float(v) for v in obj.boxes[t]],
                    "mask": _encode_mask(obj.masks[t]),
                    "appearance": [float(v) for v in obj.appearance],
                })
            fh.write(json.dumps({"frame": t, "objects": objects}) + "\n")


def load_ground_truth_jsonl(path, num_classes: int | None = None) -> GroundTruthSequence:
    """Rebuild a ground-truth sequence from per-frame object records."""
    rows: dict[int, dict] = {}
    max_frame = -1
    for lineno, line in enumerate(_read_lines(path), start=1):
        try:
            record = json.loads(line)
            t = int(record["frame"])
            max_frame = max(max_frame, t)
            for o in record["objects"]:
                entry = rows.setdefault(int(o["id"]), {
                    "class": int(o["class"]),
                    "appearance": np.asarray(o["appearance"], dtype=np.float64),
                    "frames": {},
                })
                grid = int(round(np.sqrt(len(base64.b64decode(o["mask"])))))
                entry["frames"][t] = (
                    np.asarray(o["box"], dtype=np.float64),
                    _decode_mask(o["mask"], grid),
                )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: malformed line {lineno}: {exc}") from None
    T = max_frame + 1
    grid = next((m.shape[0] for e in rows.values() for _, m in e["frames"].values()), 24)
    classes = (max((e["class"] for e in rows.values()), default=0) + 1
               if num_classes is None else num_classes)
    dims = next((len(e["appearance"]) for e in rows.values()), 8)
    cfg = WorldConfig(num_classes=max(classes, 1), frames=max(T, 1),
                      max_objects=len(rows), appearance_dim=max(dims, 1),
                      mask_grid=grid)
    seq = GroundTruthSequence(config=cfg)
    for oid in sorted(rows):
        entry = rows[oid]
        present = np.zeros(T, dtype=bool)
        boxes = np.zeros((T, 4))
        masks = np.zeros((T, grid, grid), dtype=np.uint8)
        for t, (box, mask) in entry["frames"].items():
            present[t] = True
            boxes[t] = box
            masks[t] = mask
        seq.objects.append(TrackedObject(id=oid, class_id=entry["class"],
                                         appearance=entry["appearance"],
                                         present=present, boxes=boxes, masks=masks))
    return seq


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield line
