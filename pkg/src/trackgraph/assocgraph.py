"""Fixed-capacity bipartite association graph over tracks and detections.

Row 0 of the track side is the learned empty-track node whose edges carry
track-initialization evidence; it runs through the same block structure as
real tracks but with its own node-update weights.  Each block updates edges
from [edge, track, detection], then both node types from gated sums of the
updated edges; blocks are optionally interleaved with per-element residual
bottlenecks.  Logistic heads on the final edges give match probabilities
(real rows) and initialization probabilities (row 0).

All learned transforms run on gathered active rows and are scattered back
into the padded fixed-capacity layout, so inactive slots stay exactly zero
and enlarging the capacity never changes an active output bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import NumericError, ParamStore, Tensor

EDGE_FEATURES = 2  # [appearance log-likelihood / A, IoU]  (row 0: [0, top score])


@dataclass
class ModelConfig:
    """Architecture and ablation switches; one instance describes the whole
    model, so checkpoints and ablation runs are a single config apart."""

    num_classes: int = 5          # foreground classes; background is index C
    embed_dim: int = 32           # D
    appearance_dim: int = 8
    mask_grid: int = 24
    num_blocks: int = 2
    interleave_residuals: bool = True
    gated_aggregation: bool = True    # off: 2-layer MLP node updates, plain sums
    limited_gnn: bool = False         # pairwise logistic + best-match gather only
    use_appearance: bool = True       # off: appearance edge feature is zero
    const_variance: bool = False      # freeze track covariance at sigma0
    gate_mode: str = "lstm"           # lstm | simple | none (none is unstable)
    heuristic_scoring: bool = False
    heuristic_association: bool = False
    max_tracks: int = 24
    max_detections: int = 16
    sigma0: float = 1e-3

    @property
    def det_input_dim(self) -> int:
        return self.num_classes + 5  # C+1 scores plus 4 box coordinates

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise NumericError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GraphBatch:
    """Padded graph state.  tracks: (M_max+1, D) with row 0 the empty-track
    node; dets: (N_max, *); edges: (M_max+1, N_max, *); edge_feats keeps the
    initial two-feature edges for the limited-mode heads.  Masks are 0/1
    float arrays; track_mask[0] is always 1."""

    tracks: Tensor
    dets: Tensor
    edges: Tensor
    edge_feats: Tensor
    track_mask: np.ndarray
    det_mask: np.ndarray


# ---------------------------------------------------------------------------
# geometry and feature initializers


def iou(box_a, box_b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes; 0 for an empty
    union."""
    ax0, ay0, ax1, ay1 = _corners(box_a)
    bx0, by0, bx1, by1 = _corners(box_b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _corners(box):
    cx, cy, w, h = (float(v) for v in box)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def init_detection_embedding(det, num_classes: int) -> np.ndarray:
    """[class scores (C+1), box (cx, cy, w, h)] -> C+5 values."""
    scores = np.asarray(det.scores, dtype=np.float64)
    if scores.shape != (num_classes + 1,):
        raise NumericError(
            f"expected {num_classes + 1} class scores, got shape {scores.shape}"
        )
    return np.concatenate([scores, np.asarray(det.box, dtype=np.float64)])


def top_foreground_score(det) -> float:
    return float(np.max(np.asarray(det.scores)[:-1]))


def init_edge_features(track, det, *, use_appearance: bool = True) -> Tensor:
    """Two-feature edge seed for a real track-detection pair: the detection's
    appearance log-likelihood under the track's Gaussian (normalized per
    dimension) and the IoU of the track's last box with the detection box."""
    from . import appearance as ap

    if use_appearance:
        ll = ap.log_likelihood(track.appearance, det.appearance)
        ll = ll * (1.0 / track.appearance.dim)
    else:
        ll = Tensor(0.0)
    pair_iou = Tensor(float(iou(track.last_box, det.box)))
    return nc.concat([nc.reshape(ll, (1,)), nc.reshape(pair_iou, (1,))])


def empty_track_edge_features(det) -> np.ndarray:
    """Row-0 edge seed: no appearance term, top non-background score as the
    similarity-to-empty-track stand-in."""
    return np.array([0.0, top_foreground_score(det)])


# ---------------------------------------------------------------------------
# parameters


def _add_linear(params: ParamStore, name: str, in_dim: int, out_dim: int,
                rng: np.random.Generator):
    params.add(f"{name}/w", nc.uniform_init(rng, (out_dim, in_dim), in_dim))
    params.add(f"{name}/b", np.zeros(out_dim))


def _add_gate_mlp(params: ParamStore, name: str, dim: int, rng):
    hidden = max(dim // 4, 1)
    _add_linear(params, f"{name}/l1", dim, hidden, rng)
    _add_linear(params, f"{name}/l2", hidden, dim, rng)


def _add_residual(params: ParamStore, name: str, dim: int, rng):
    hidden = max(dim // 4, 1)
    _add_linear(params, f"{name}/l1", dim, hidden, rng)
    _add_linear(params, f"{name}/l2", hidden, hidden, rng)
    _add_linear(params, f"{name}/l3", hidden, dim, rng)


def init_gnn_params(params: ParamStore, config: ModelConfig, rng: np.random.Generator):
    """All graph-side parameters.  Every config gets the same parameter set in
    the same draw order, so ablation runs with a shared seed start from
    identical weights."""
    d = config.embed_dim
    din = config.det_input_dim
    params.add("tau0", nc.uniform_init(rng, (d,), d))
    for k in range(config.num_blocks):
        e_in = EDGE_FEATURES + d + din if k == 0 else 3 * d
        d_in = din + d if k == 0 else 2 * d
        _add_linear(params, f"block{k}/f_e", e_in, d, rng)
        _add_linear(params, f"block{k}/f_e2", d, d, rng)
        for node in ("tau", "tau0"):
            _add_gate_mlp(params, f"block{k}/g_{node}", d, rng)
            _add_linear(params, f"block{k}/f_{node}", 2 * d, d, rng)
            _add_linear(params, f"block{k}/f_{node}2", d, d, rng)
        _add_gate_mlp(params, f"block{k}/g_delta", d, rng)
        _add_linear(params, f"block{k}/f_delta", d_in, d, rng)
        _add_linear(params, f"block{k}/f_delta2", d, d, rng)
        for elem in ("edges", "tracks", "dets"):
            _add_residual(params, f"res{k}/{elem}", d, rng)
    _add_linear(params, "match_head", d, 1, rng)
    _add_linear(params, "init_head", d, 1, rng)
    _add_linear(params, "match_feat_head", EDGE_FEATURES, 1, rng)
    _add_linear(params, "init_feat_head", EDGE_FEATURES, 1, rng)


# ---------------------------------------------------------------------------
# forward pieces (all on gathered active rows)


def _lin(params, name, x):
    return nc.linear(params[f"{name}/w"], params[f"{name}/b"], x)


def _gate_mlp(params, name, x):
    h = nc.relu(_lin(params, f"{name}/l1", x))
    return nc.sigmoid(_lin(params, f"{name}/l2", h))


def _residual(params, name, x):
    h = nc.relu(_lin(params, f"{name}/l1", x))
    h = nc.relu(_lin(params, f"{name}/l2", h))
    h = _lin(params, f"{name}/l3", h)
    return nc.relu(x + h)


def _node_update(params, block, node, x, agg, gated):
    h = nc.relu(_lin(params, f"{block}/f_{node}", nc.concat([x, agg], axis=-1)))
    if not gated:
        h = nc.relu(_lin(params, f"{block}/f_{node}2", h))
    return h


def _aggregate(params, gate_name, edges, slot_mask, axis, gated):
    """Sum of (optionally gated) edge messages over `axis`, restricted by the
    0/1 slot mask (None: all slots active)."""
    msg = edges
    if gated:
        msg = _gate_mlp(params, gate_name, edges) * edges
    if slot_mask is not None:
        shape = [1, 1, 1]
        shape[axis] = len(slot_mask)
        msg = msg * Tensor(np.asarray(slot_mask).reshape(shape))
    return nc.slot_sum(msg, axis=axis)


def _check_finite(tensors, label: str):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise nc.NumericOverflowError(f"non-finite values after {label}")


def _gather_edges(edges: Tensor, t_idx, d_idx) -> Tensor:
    part = nc.gather(edges, t_idx)
    part = nc.swapaxes01(part)
    part = nc.gather(part, d_idx)
    return nc.swapaxes01(part)


def _scatter_edges(edges: Tensor, t_idx, d_idx, t_size, d_size) -> Tensor:
    part = nc.swapaxes01(edges)
    part = nc.scatter_rows(part, d_idx, d_size)
    part = nc.swapaxes01(part)
    return nc.scatter_rows(part, t_idx, t_size)


def gnn_forward(batch: GraphBatch, params: ParamStore, config: ModelConfig) -> GraphBatch:
    """Run the block stack and return the batch with updated embeddings.
    Inactive slots are exactly zero on the way in and the way out."""
    t_idx = np.flatnonzero(batch.track_mask)
    d_idx = np.flatnonzero(batch.det_mask)
    tr = nc.gather(batch.tracks, t_idx)            # (ma, D) incl. row 0
    de = nc.gather(batch.dets, d_idx)              # (na, din)
    ed = _gather_edges(batch.edges, t_idx, d_idx)  # (ma, na, EDGE_FEATURES)
    ma, na = len(t_idx), len(d_idx)
    gated = config.gated_aggregation

    if config.limited_gnn:
        # Pairwise probabilities from the raw features pick, per real track,
        # the single detection it may gather from; detections get no messages.
        feats = _gather_edges(batch.edge_feats, t_idx, d_idx)
        ed = _edge_update(params, 0, ed, tr, de, gated)
        track_agg_mask = np.zeros((ma, na))
        if ma > 1 and na > 0:
            probs = _head_probs(params, "match_feat_head", feats).data[1:]
            track_agg_mask[np.arange(1, ma), np.argmax(probs, axis=1)] = 1.0
        msg = _gate_mlp(params, "block0/g_tau", ed) * ed if gated else ed
        msg = msg * Tensor(track_agg_mask[:, :, None])
        agg_t = nc.slot_sum(msg, axis=1)
        tr = _split_track_update(params, 0, tr, agg_t, gated)
        agg_d = Tensor(np.zeros((na, config.embed_dim)))
        de = _node_update(params, "block0", "delta", de, agg_d, gated)
        _check_finite((ed, tr, de), "GNN block 0 (limited)")
        if config.interleave_residuals:
            ed = _residual(params, "res0/edges", ed)
            tr = _residual(params, "res0/tracks", tr)
            de = _residual(params, "res0/dets", de)
            _check_finite((ed, tr, de), "residual block 0 (limited)")
    else:
        for k in range(config.num_blocks):
            ed = _edge_update(params, k, ed, tr, de, gated)
            agg_t = _aggregate(params, f"block{k}/g_tau", ed, None, 1, gated)
            agg_t0 = _aggregate(params, f"block{k}/g_tau0", ed, None, 1, gated)
            tr = _split_track_update(params, k, tr, agg_t, gated, agg_row0=agg_t0)
            agg_d = _aggregate(params, f"block{k}/g_delta", ed, None, 0, gated)
            de = _node_update(params, f"block{k}", "delta", de, agg_d, gated)
            _check_finite((ed, tr, de), f"GNN block {k}")
            if config.interleave_residuals:
                ed = _residual(params, f"res{k}/edges", ed)
                tr = _residual(params, f"res{k}/tracks", tr)
                de = _residual(params, f"res{k}/dets", de)
                _check_finite((ed, tr, de), f"residual block {k}")

    m_size = batch.tracks.shape[0]
    d_size = batch.dets.shape[0]
    return GraphBatch(
        tracks=nc.scatter_rows(tr, t_idx, m_size),
        dets=nc.scatter_rows(de, d_idx, d_size),
        edges=_scatter_edges(ed, t_idx, d_idx, m_size, d_size),
        edge_feats=batch.edge_feats,
        track_mask=batch.track_mask,
        det_mask=batch.det_mask,
    )


def _edge_update(params, k, ed, tr, de, gated):
    ma, na = ed.shape[0], ed.shape[1]
    tr_b = nc.broadcast_to(nc.reshape(tr, (ma, 1, tr.shape[-1])), (ma, na, tr.shape[-1]))
    de_b = nc.broadcast_to(nc.reshape(de, (1, na, de.shape[-1])), (ma, na, de.shape[-1]))
    h = nc.relu(_lin(params, f"block{k}/f_e", nc.concat([ed, tr_b, de_b], axis=-1)))
    if not gated:
        h = nc.relu(_lin(params, f"block{k}/f_e2", h))
    return h


def _split_track_update(params, k, tr, agg, gated, agg_row0=None):
    """Row 0 runs through its own weights; remaining rows share one set."""
    if agg_row0 is None:
        agg_row0 = agg
    row0 = _node_update(params, f"block{k}", "tau0",
                        nc.gather(tr, [0]), nc.gather(agg_row0, [0]), gated)
    rest_idx = np.arange(1, tr.shape[0])
    rest = _node_update(params, f"block{k}", "tau",
                        nc.gather(tr, rest_idx), nc.gather(agg, rest_idx), gated)
    return nc.concat([row0, rest], axis=0)


def _head_probs(params, head, edges):
    flat = nc.reshape(edges, (-1, edges.shape[-1]))
    logits = _lin(params, head, flat)
    return nc.reshape(nc.sigmoid(logits), edges.shape[:-1])


def match_probabilities(batch: GraphBatch, params: ParamStore,
                        config: ModelConfig) -> Tensor:
    """(M_max, N_max) match probabilities for real track rows; inactive
    entries are exactly zero."""
    t_idx = np.flatnonzero(batch.track_mask[1:]) + 1
    d_idx = np.flatnonzero(batch.det_mask)
    source = batch.edge_feats if config.limited_gnn else batch.edges
    head = "match_feat_head" if config.limited_gnn else "match_head"
    probs = _head_probs(params, head, _gather_edges(source, t_idx, d_idx))
    m_cap, n_cap = batch.tracks.shape[0] - 1, batch.dets.shape[0]
    padded = _scatter_edges(nc.reshape(probs, probs.shape + (1,)),
                            t_idx - 1, d_idx, m_cap, n_cap)
    return nc.reshape(padded, (m_cap, n_cap))


def init_probabilities(batch: GraphBatch, params: ParamStore,
                       config: ModelConfig) -> Tensor:
    """(N_max,) new-track probabilities from the empty-track row's edges."""
    d_idx = np.flatnonzero(batch.det_mask)
    source = batch.edge_feats if config.limited_gnn else batch.edges
    head = "init_feat_head" if config.limited_gnn else "init_head"
    row0 = _gather_edges(source, np.array([0]), d_idx)
    probs = _head_probs(params, head, row0)
    return nc.scatter_rows(nc.reshape(probs, (len(d_idx),)), d_idx,
                           batch.dets.shape[0])


# ---------------------------------------------------------------------------
# batch construction


def build_graph_batch(tracks, detections, params: ParamStore,
                      config: ModelConfig) -> GraphBatch:
    """Assemble the padded graph from live track states and one frame of
    detections.  `tracks` need .recurrent.y, .appearance, .last_box;
    detections need .box, .scores, .appearance."""
    from . import appearance as ap

    m_cap = config.max_tracks + 1
    n_cap = config.max_detections
    m, n = len(tracks), len(detections)
    if m > config.max_tracks:
        raise NumericError(f"{m} tracks exceed capacity {config.max_tracks}")
    if n > n_cap:
        raise NumericError(f"{n} detections exceed capacity {n_cap}")

    track_mask = np.zeros(m_cap)
    track_mask[: m + 1] = 1.0
    det_mask = np.zeros(n_cap)
    det_mask[:n] = 1.0

    tau0 = nc.reshape(params["tau0"], (1, config.embed_dim))
    rows = [tau0] + [nc.reshape(t.recurrent.y, (1, config.embed_dim)) for t in tracks]
    tracks_t = nc.scatter_rows(nc.concat(rows, axis=0), np.arange(m + 1), m_cap)

    if n == 0:
        det_rows = Tensor(np.zeros((n_cap, config.det_input_dim)))
        feats = Tensor(np.zeros((m_cap, n_cap, EDGE_FEATURES)))
        return GraphBatch(tracks=tracks_t, dets=det_rows, edges=feats,
                          edge_feats=feats, track_mask=track_mask, det_mask=det_mask)

    det_arr = np.stack([init_detection_embedding(d, config.num_classes)
                        for d in detections])
    dets_t = nc.scatter_rows(Tensor(det_arr), np.arange(n), n_cap)

    det_apps = np.stack([np.asarray(d.appearance, dtype=np.float64)
                         for d in detections])
    top_fg = np.array([top_foreground_score(d) for d in detections])
    row0_feats = np.zeros((1, n, EDGE_FEATURES))
    row0_feats[0, :, 1] = top_fg

    if m > 0:
        if config.use_appearance:
            mu = nc.concat([nc.reshape(t.appearance.mu, (1, config.appearance_dim))
                            for t in tracks], axis=0)
            sig = nc.concat([nc.reshape(t.appearance.sigma, (1, config.appearance_dim))
                             for t in tracks], axis=0)
            mu3 = nc.reshape(mu, (m, 1, config.appearance_dim))
            sig3 = nc.reshape(sig, (m, 1, config.appearance_dim))
            x3 = Tensor(det_apps[None, :, :])
            diff = x3 - mu3
            quad = diff * diff / (sig3 * 2.0)
            logdet = (nc.log(sig3) + ap.LOG_2PI) * 0.5
            ll = nc.tsum(-logdet - quad, axis=2) * (1.0 / config.appearance_dim)
        else:
            ll = Tensor(np.zeros((m, n)))
        ious = Tensor(iou_matrix([t.last_box for t in tracks],
                                 [d.box for d in detections]))
        real = nc.concat([nc.reshape(ll, (m, n, 1)), nc.reshape(ious, (m, n, 1))],
                         axis=2)
        feats = nc.concat([Tensor(row0_feats), real], axis=0)
    else:
        feats = Tensor(row0_feats)

    feats = _scatter_edges(feats, np.arange(m + 1), np.arange(n), m_cap, n_cap)
    return GraphBatch(tracks=tracks_t, dets=dets_t, edges=feats, edge_feats=feats,
                      track_mask=track_mask, det_mask=det_mask)
