"""Per-frame track management: graph construction, assignment, track birth,
scoring, mask reweighting, and memory update.

step() is the full inference loop for one frame and is the same code path
during training (a tape is simply active, so every probability, score, and
logit stays differentiable).  Tracks are never deleted; they are marked
inactive when no detection matches with probability >= 0.31 and live on with
their recurrent state advancing every frame, so an object lost for a few
frames can be reclaimed under its original identity.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from . import appearance as ap
from . import assocgraph as ag
from . import numcore as nc
from . import recurrence as rec
from .assocgraph import ModelConfig
from .numcore import NumericError, ParamStore, Tensor


@dataclass
class Thresholds:
    init_train: float = 0.31
    init_infer: float = 0.13
    match_active: float = 0.31

    def init_for(self, mode: str) -> float:
        if mode == "train":
            return self.init_train
        if mode == "infer":
            return self.init_infer
        raise NumericError(f"unknown mode {mode!r}")


@dataclass
class FrameRecord:
    t: int
    active: bool
    scores: np.ndarray
    matched_detection: int | None = None
    box: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class TrackState:
    id: int
    birth_frame: int
    recurrent: rec.RecurrentState
    appearance: ap.GaussianAppearance
    last_box: np.ndarray
    active: bool = True
    records: list[FrameRecord] = field(default_factory=list)
    # matched-detection history for the heuristic scoring variant
    conf_votes: list[float] = field(default_factory=list)
    class_votes: list[int] = field(default_factory=list)

    @property
    def class_distribution(self) -> np.ndarray:
        return self.records[-1].scores


@dataclass
class TrackModel:
    config: ModelConfig
    params: ParamStore


@dataclass
class FrameOutput:
    """Everything the losses and reporters need for one processed frame.
    match/init probabilities refer to the memory as it stood when the graph
    ran (before any births this frame)."""

    frame: int
    num_tracks: int
    num_dets: int
    detections: list
    match_probs: Tensor
    init_probs: Tensor
    track_rows: list[TrackState]
    born: list[TrackState]
    score_dists: list[tuple[TrackState, Tensor]]
    seg_logits: Tensor | None
    seg_tracks: list[TrackState]
    instance_map: np.ndarray | None


HEURISTIC_ASSOC_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


def build_model(config: ModelConfig, seed: int = 0) -> TrackModel:
    """All learnable parameters, drawn in a fixed order so that every config
    variant starts from identical weights for a given seed."""
    params = ParamStore()
    rng = np.random.default_rng(seed)
    ag.init_gnn_params(params, config, rng)
    rec.init_gate_params(params, config.embed_dim, rng)
    rec.init_simple_gate_params(params, config.embed_dim, rng)
    ap.init_rate_params(params, config.embed_dim, rng)
    init_head_params(params, config, rng)
    return TrackModel(config=config, params=params)


def init_head_params(params: ParamStore, config: ModelConfig, rng):
    d = config.embed_dim
    params.add("score_head/w", nc.uniform_init(rng, (config.num_classes + 1, d), d))
    params.add("score_head/b", np.zeros(config.num_classes + 1))
    params.add("mask_head/proj/w", nc.uniform_init(rng, (16, d), d))
    params.add("mask_head/proj/b", np.zeros(16))
    params.add("mask_head/conv1/w", nc.uniform_init(rng, (16, 18 * 9), 18 * 9))
    params.add("mask_head/conv1/b", np.zeros(16))
    params.add("mask_head/conv2/w", nc.uniform_init(rng, (1, 16 * 9), 16 * 9))
    params.add("mask_head/conv2/b", np.zeros(1))


# ---------------------------------------------------------------------------
# scoring


def score_tracks(embeddings: Tensor, params: ParamStore) -> Tensor:
    """Class distributions over C+1 (background last) from track embeddings,
    one row per track."""
    return nc.softmax(nc.linear(params["score_head/w"], params["score_head/b"],
                                embeddings))


def score_tracks_average(confidences, classes) -> tuple[float, int]:
    """Heuristic scoring: mean matched-detection confidence plus majority-vote
    class (ties broken toward the smaller class id)."""
    conf = float(np.mean(confidences)) if len(confidences) else 0.0
    if len(classes) == 0:
        return conf, 0
    counts = np.bincount(np.asarray(classes, dtype=int))
    return conf, int(np.argmax(counts))


def _heuristic_distribution(track: TrackState, num_classes: int) -> np.ndarray:
    conf, cls = score_tracks_average(track.conf_votes, track.class_votes)
    dist = np.zeros(num_classes + 1)
    dist[cls] = conf
    dist[num_classes] = 1.0 - conf
    return dist


# ---------------------------------------------------------------------------
# heuristic association


def association_linear(features, weights=HEURISTIC_ASSOC_WEIGHTS) -> float:
    """Score = w1*cosine(appearance) + w2*IoU + w3*[same class] + w4*conf."""
    return float(np.dot(np.asarray(weights), np.asarray(features, dtype=np.float64)))


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def greedy_assignment(scores: np.ndarray, cutoff: float) -> dict[int, int]:
    """One-to-one track->detection assignment by descending score, stopping
    below the cutoff.  Ties break toward lower track then detection index."""
    pairs = sorted(
        ((scores[m, n], m, n) for m in range(scores.shape[0])
         for n in range(scores.shape[1])),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    used_m, used_n, out = set(), set(), {}
    for s, m, n in pairs:
        if s < cutoff:
            break
        if m in used_m or n in used_n:
            continue
        out[m] = n
        used_m.add(m)
        used_n.add(n)
    return out


def _heuristic_association(memory, detections, weights):
    m, n = len(memory), len(detections)
    scores = np.zeros((m, n))
    for i, track in enumerate(memory):
        track_class = int(np.argmax(track.class_distribution[:-1])) if track.records else 0
        for j, det in enumerate(detections):
            feats = [
                _cosine(track.appearance.mu.data, det.appearance),
                ag.iou(track.last_box, det.box),
                1.0 if int(np.argmax(det.scores[:-1])) == track_class else 0.0,
                ag.top_foreground_score(det),
            ]
            scores[i, j] = association_linear(feats, weights)
    return greedy_assignment(scores, cutoff=sum(weights) / 2.0)


# ---------------------------------------------------------------------------
# mask reweighting


def render_box_mask(box, grid: int) -> np.ndarray:
    cx, cy, w, h = (float(v) for v in box)
    centers = (np.arange(grid) + 0.5) / grid
    gx, gy = np.meshgrid(centers, centers)
    inside = (np.abs(gx - cx) <= w / 2) & (np.abs(gy - cy) <= h / 2)
    return inside.astype(np.float64)


def reweight_masks(entries, params: ParamStore, grid: int):
    """Resolve pixel ownership among overlapping track masks.

    entries: list of (track, mask (G,G), box, embedding Tensor (D,)).
    Returns (instance_map, logits): the map holds a row index per pixel
    (0 = background, i+1 = entries[i]); logits is the (K+1, G, G) stack with
    the fixed background row of zeros first.  Equal-logit ties go to the
    background because argmax keeps the first maximal row.
    """
    if not entries:
        return None, None
    planes = []
    for track, mask, box, emb in entries:
        if mask.shape != (grid, grid):
            raise NumericError(f"mask shape {mask.shape} does not match grid {grid}")
        proj = nc.relu(nc.linear(params["mask_head/proj/w"],
                                 params["mask_head/proj/b"], emb))
        proj = nc.broadcast_to(nc.reshape(proj, (16, 1, 1)), (16, grid, grid))
        chans = nc.concat([
            proj,
            Tensor(np.asarray(mask, dtype=np.float64)[None]),
            Tensor(render_box_mask(box, grid)[None]),
        ], axis=0)
        planes.append(nc.reshape(chans, (1, 18, grid, grid)))
    x = nc.concat(planes, axis=0)                                  # (K,18,G,G)
    h = nc.linear(params["mask_head/conv1/w"], params["mask_head/conv1/b"],
                  nc.im2col3x3(x))                                 # (K,GG,16)
    h = nc.relu(h)
    h = nc.reshape(nc.swapaxes12(h), (len(entries), 16, grid, grid))
    h = nc.linear(params["mask_head/conv2/w"], params["mask_head/conv2/b"],
                  nc.im2col3x3(h))                                 # (K,GG,1)
    logits = nc.reshape(h, (len(entries), grid, grid))
    stack = nc.concat([Tensor(np.zeros((1, grid, grid))), logits], axis=0)
    instance_map = np.argmax(stack.data, axis=0)
    return instance_map, stack


# ---------------------------------------------------------------------------
# the per-frame loop


def truncate_detections(detections, cap: int):
    if len(detections) <= cap:
        return list(detections)
    conf = [ag.top_foreground_score(d) for d in detections]
    keep = sorted(np.argsort(np.asarray(conf))[::-1][:cap])
    return [detections[i] for i in keep]


def step(memory: list[TrackState], detections, model: TrackModel,
         thresholds: Thresholds, mode: str, frame_index: int):
    """Process one frame; returns (memory, FrameOutput).  Track states are
    advanced in place and newborn tracks are appended."""
    config, params = model.config, model.params
    thr_init = thresholds.init_for(mode)
    dets = truncate_detections(detections, config.max_detections)
    m, n = len(memory), len(dets)

    batch = ag.build_graph_batch(memory, dets, params, config)
    out_batch = ag.gnn_forward(batch, params, config)
    match_p = ag.match_probabilities(out_batch, params, config)
    init_p = ag.init_probabilities(out_batch, params, config)

    # -- assignment ---------------------------------------------------------
    if config.heuristic_association:
        assigned = _heuristic_association(memory, dets, HEURISTIC_ASSOC_WEIGHTS)
        matches = {i: assigned.get(i) for i in range(m)}
        hard_init = np.zeros(config.max_detections)
        taken = set(assigned.values())
        hard_init[[j for j in range(n) if j not in taken]] = 1.0
        match_data = np.zeros(match_p.shape)
        for i, j in assigned.items():
            match_data[i, j] = 1.0
        match_p = Tensor(match_data)
        init_p = Tensor(hard_init)
        init_decisions = hard_init[:n] >= 0.5
    else:
        matches = {}
        for i in range(m):
            if n == 0:
                matches[i] = None
                continue
            row = match_p.data[i, :n]
            j = int(np.argmax(row))
            matches[i] = j if row[j] >= thresholds.match_active else None
        init_decisions = init_p.data[:n] >= thr_init

    # -- advance existing tracks through the gate ---------------------------
    if m > 0:
        tau_tilde = nc.gather(out_batch.tracks, np.arange(1, m + 1))
        if config.gate_mode == "lstm":
            y_prev = nc.concat([nc.reshape(t.recurrent.y, (1, config.embed_dim))
                                for t in memory], axis=0)
            c_prev = nc.concat([nc.reshape(t.recurrent.c, (1, config.embed_dim))
                                for t in memory], axis=0)
            state = rec.gate_step(tau_tilde,
                                  rec.RecurrentState(y=y_prev, c=c_prev), params)
            new_y, new_c = state.y, state.c
        elif config.gate_mode == "simple":
            new_y = rec.simple_gate_step(tau_tilde, params)
            new_c = Tensor(np.zeros((m, config.embed_dim)))
        elif config.gate_mode == "none":
            # Experimental: no gating; known to destabilize training.
            new_y = tau_tilde
            new_c = Tensor(np.zeros((m, config.embed_dim)))
        else:
            raise NumericError(f"unknown gate mode {config.gate_mode!r}")
        for i, track in enumerate(memory):
            track.recurrent = rec.RecurrentState(
                y=nc.reshape(nc.gather(new_y, [i]), (config.embed_dim,)),
                c=nc.reshape(nc.gather(new_c, [i]), (config.embed_dim,)),
            )

    # -- births --------------------------------------------------------------
    born_pairs: list[tuple[TrackState, int]] = []
    next_id = max((t.id for t in memory), default=-1) + 1
    for j in range(n):
        if not init_decisions[j]:
            continue
        if m + len(born_pairs) >= config.max_tracks:
            break  # capacity reached: refuse further initializations
        det = dets[j]
        delta_out = nc.reshape(nc.gather(out_batch.dets, [j]), (config.embed_dim,))
        track = TrackState(
            id=next_id,
            birth_frame=frame_index,
            recurrent=rec.new_track_state(delta_out),
            appearance=ap.init_model(np.asarray(det.appearance, dtype=np.float64),
                                     config.sigma0),
            last_box=np.asarray(det.box, dtype=np.float64).copy(),
        )
        track.conf_votes.append(ag.top_foreground_score(det))
        track.class_votes.append(int(np.argmax(np.asarray(det.scores)[:-1])))
        born_pairs.append((track, j))
        next_id += 1
    born = [t for t, _ in born_pairs]

    # -- matched-track bookkeeping and appearance updates --------------------
    active_entries: list[tuple[TrackState, np.ndarray, np.ndarray, Tensor, int]] = []
    for i, track in enumerate(memory):
        j = matches[i]
        track.active = j is not None
        if track.active:
            det = dets[j]
            track.last_box = np.asarray(det.box, dtype=np.float64).copy()
            track.conf_votes.append(ag.top_foreground_score(det))
            track.class_votes.append(int(np.argmax(np.asarray(det.scores)[:-1])))
            rates = ap.predict_rates(track.recurrent.y, params)
            track.appearance = ap.update(
                track.appearance, np.asarray(det.appearance, dtype=np.float64),
                rates, freeze_sigma=config.const_variance)
            active_entries.append((track, np.asarray(det.mask), det.box,
                                   track.recurrent.y, j))
    for track, j in born_pairs:  # newborns are active with their detection
        track.active = True
        det = dets[j]
        active_entries.append((track, np.asarray(det.mask), det.box,
                               track.recurrent.y, j))

    instance_map, seg_logits = reweight_masks(
        [(t, mask, box, emb) for t, mask, box, emb, _ in active_entries],
        params, config.mask_grid)

    # -- scoring --------------------------------------------------------------
    all_tracks = memory + born
    score_dists: list[tuple[TrackState, Tensor]] = []
    if all_tracks:
        if config.heuristic_scoring:
            for track in all_tracks:
                dist = _heuristic_distribution(track, config.num_classes)
                score_dists.append((track, Tensor(dist)))
        else:
            ys = nc.concat([nc.reshape(t.recurrent.y, (1, config.embed_dim))
                            for t in all_tracks], axis=0)
            dists = score_tracks(ys, params)
            for i, track in enumerate(all_tracks):
                score_dists.append((track, nc.reshape(
                    nc.gather(dists, [i]), (config.num_classes + 1,))))

    # -- per-frame records ------------------------------------------------------
    claimed = {id(t): (mask, box, j)
               for t, mask, box, _, j in active_entries}
    row_of = {id(e[0]): k + 1 for k, e in enumerate(active_entries)}
    for track, dist in score_dists:
        if id(track) in claimed:
            mask, box, j = claimed[id(track)]
            own_mask = (instance_map == row_of[id(track)]).astype(np.uint8)
            track.records.append(FrameRecord(
                t=frame_index, active=True, scores=dist.data.copy(),
                matched_detection=j, box=np.asarray(box, dtype=np.float64).copy(),
                mask=own_mask))
        else:
            track.records.append(FrameRecord(
                t=frame_index, active=False, scores=dist.data.copy()))

    memory.extend(born)
    output = FrameOutput(
        frame=frame_index,
        num_tracks=m,
        num_dets=n,
        detections=dets,
        match_probs=match_p,
        init_probs=init_p,
        track_rows=list(memory[:m]),
        born=born,
        score_dists=score_dists,
        seg_logits=seg_logits,
        seg_tracks=[t for t, *_ in active_entries],
        instance_map=instance_map,
    )
    return memory, output


def run_sequence(detection_frames, model: TrackModel,
                 thresholds: Thresholds | None = None, mode: str = "infer"):
    """Feed every frame through step(); returns (memory, outputs)."""
    thresholds = thresholds or Thresholds()
    memory: list[TrackState] = []
    outputs = []
    for t, dets in enumerate(detection_frames):
        memory, out = step(memory, dets, model, thresholds, mode, t)
        outputs.append(out)
    return memory, outputs


# ---------------------------------------------------------------------------
# track output serialization


def tracks_to_json(memory: list[TrackState], num_frames: int) -> dict:
    tracks = []
    for t in memory:
        frames = []
        for r in t.records:
            entry = {"t": r.t, "active": bool(r.active),
                     "scores": [float(v) for v in r.scores]}
            if r.active:
                entry["box"] = [float(v) for v in r.box]
                entry["mask"] = base64.b64encode(
                    np.asarray(r.mask, dtype=np.uint8).tobytes()).decode("ascii")
            frames.append(entry)
        tracks.append({"id": t.id, "birth_frame": t.birth_frame, "frames": frames})
    return {"num_frames": num_frames, "tracks": tracks}
