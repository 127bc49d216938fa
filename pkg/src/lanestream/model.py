"""Lane-segment decoder with dynamic boundary positional encoding.

The decoder runs identical blocks over matching queries plus optional
denoising and stream slots. Each block: block-masked self-attention,
query duplication onto the 8 boundary reference points, point-wise
positional encoding, bilinear BEV sampling with learned per-duplicate
weights, duplicate merging, feed-forward, and inverse-sigmoid reference
refinement. All prediction heads are shared across layers.

encode() augments the raster with distance-transform pointers to the
nearest line, road and crossing cells before the width projection; point
samples far from any rendered evidence still read off exactly where the
nearest structure lies.

Reference-point layout: center refs are (M, 3) normalized points; the 8
boundary anchors are the 4 equally spaced centerline indices shifted to
the left and right by the offset head (4 left then 4 right).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import engine as E
from .core import (
    BEVGridSpec,
    BOUNDARY_TYPE_INDEX,
    BOUNDARY_TYPES,
    LANE_CLASS_INDEX,
    LANE_CLASSES,
    LaneGraph,
    LaneSegment,
    NUM_POINTS,
)
from .denoise import DnBatch, attention_blocks
from .engine import ParamStore, Tensor
from .matching import Assignment, hungarian, lanesegment_cost

ANCHOR_SLICE = slice(0, NUM_POINTS, 3)  # centerline indices 0, 3, 6, 9
ANCHORS_PER_SIDE = len(range(NUM_POINTS)[ANCHOR_SLICE])
NUM_ANCHORS = 2 * ANCHORS_PER_SIDE

# raster channel groups whose nearest-occupied-cell geometry is precomputed
# by encode(): centerline, any left line, any right line, road, crossing
DISTANCE_GROUPS = ((0,), (1, 2, 3), (4, 5, 6), (7,), (8,))
DISTANCE_TAUS = (2.0, 8.0)  # meters; decay lengths of the proximity features
DISTANCE_CLIP = 8.0  # meters; offset saturation

LS_WEIGHTS = {
    "coord": 0.025,
    "cls": 1.5,
    "types": 0.01,
    "topo": 5.0,
    "seg_ce": 1.0,
    "seg_dice": 1.0,
}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def distance_features(raster: np.ndarray, grid: BEVGridSpec, groups=DISTANCE_GROUPS) -> np.ndarray:
    """Per-cell pointers to the nearest occupied cell of each channel group.

    Bilinear point sampling only sees the four cells around an anchor, so
    thin rasterized lines are invisible from more than one cell away. These
    features make any sample globally informative: per group, proximity
    exp(-d/tau) at the two DISTANCE_TAUS plus the row/column offset to the
    nearest occupied cell, clipped to +/-DISTANCE_CLIP meters and scaled to
    [-1, 1]. Occupancy is raster > 0.5 so additive noise below that level
    does not flip cells; a group with no occupied cell yields all zeros,
    matching the far-field limit. Output is (H, W, 4 * len(groups)).
    """
    h, w, _ = raster.shape
    cell = (2.0 * grid.x_range / h, 2.0 * grid.y_range / w)
    rows, cols = np.indices((h, w))
    feats = np.zeros((h, w, 4 * len(groups)))
    for gi, group in enumerate(groups):
        present = [c for c in group if c < raster.shape[2]]
        if not present:
            continue
        occupied = raster[:, :, present].max(axis=-1) > 0.5
        if not occupied.any():
            continue
        dist, (nr, nc) = distance_transform_edt(
            ~occupied, sampling=cell, return_indices=True
        )
        dr = (nr - rows) * cell[0]
        dc = (nc - cols) * cell[1]
        feats[:, :, 4 * gi + 0] = np.exp(-dist / DISTANCE_TAUS[0])
        feats[:, :, 4 * gi + 1] = np.exp(-dist / DISTANCE_TAUS[1])
        feats[:, :, 4 * gi + 2] = np.clip(dr, -DISTANCE_CLIP, DISTANCE_CLIP) / DISTANCE_CLIP
        feats[:, :, 4 * gi + 3] = np.clip(dc, -DISTANCE_CLIP, DISTANCE_CLIP) / DISTANCE_CLIP
    return feats


@dataclass
class ModelConfig:
    bev_channels: int = 32
    channels: int = 36  # model width, must divide into the 6 encoding blocks
    layers: int = 6
    queries: int = 200
    stream_slots: int = 66
    dn_total: int = 240
    ffn_mult: int = 4
    pe_temperature: float = 10000.0

    def __post_init__(self):
        if self.channels % 6 != 0:
            raise ValueError(f"channels must be divisible by 6, got {self.channels}")
        if not 0 <= self.stream_slots <= self.queries:
            raise ValueError("stream_slots must lie in [0, queries]")
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")

    def to_dict(self) -> dict:
        return {
            "bev_channels": self.bev_channels,
            "channels": self.channels,
            "layers": self.layers,
            "queries": self.queries,
            "stream_slots": self.stream_slots,
            "dn_total": self.dn_total,
            "ffn_mult": self.ffn_mult,
            "pe_temperature": self.pe_temperature,
        }


@dataclass
class DecodeResult:
    layers: list  # per-layer dicts: coords, class_logits, type_logits, refs (all rows)
    topo_logits: Tensor  # (Nq, Nq) adjacency logits over matching queries
    mask_logits: Tensor  # (Nq, H*W) BEV mask logits over matching queries
    dn_topo_blocks: list | None
    layer0_confidence: np.ndarray
    injected: np.ndarray | None
    content: Tensor  # final (T, C)
    n_matching: int
    trace: list | None = None

    @property
    def final(self) -> dict:
        return self.layers[-1]

    def confidence(self) -> np.ndarray:
        """Final max class probability per matching query."""
        logits = self.final["class_logits"].data[: self.n_matching]
        return _sigmoid(logits).max(axis=1)


class LaneSegmentModel:
    def __init__(self, config: ModelConfig, grid: BEVGridSpec, seed: int = 0):
        if grid.channels != config.bev_channels:
            raise ValueError(
                f"grid channels {grid.channels} != model bev_channels {config.bev_channels}"
            )
        self.config = config
        self.grid = grid
        self.params = ParamStore(seed)
        self._scale = np.array([2.0 * grid.x_range, 2.0 * grid.y_range, 2.0 * grid.z_range])
        self._shift = np.array([-grid.x_range, -grid.y_range, -grid.z_range])
        self._build()

    # parameter construction ----------------------------------------------

    def _build(self):
        p, cfg = self.params.param, self.config
        c, m = cfg.channels, NUM_POINTS
        p("input_proj.w", (cfg.bev_channels + 4 * len(DISTANCE_GROUPS), c))
        p("input_proj.b", (c,), "zeros")

        p("query.content", (cfg.queries, c), "normal", scale=0.5)
        p("query.pos", (cfg.queries, c), "normal", scale=1.0)
        p("query.ref.w0", (c, c))
        p("query.ref.b0", (c,), "zeros")
        p("query.ref.w1", (c, m * 3))
        p("query.ref.b1", (m * 3,), "zeros")

        p("dn.cls_embed", (len(LANE_CLASSES), c), "normal", scale=0.5)
        p("dn.type_embed", (3, c), "normal", scale=0.5)
        p("dn.pe.w", (m * c, c))
        p("dn.pe.b", (c,), "zeros")
        p("dn.fuse.w0", (3 * c, c))
        p("dn.fuse.b0", (c,), "zeros")
        p("dn.fuse.w1", (c, c))
        p("dn.fuse.b1", (c,), "zeros")

        for layer in range(cfg.layers):
            pre = f"l{layer}."
            for n in ("q", "k", "v", "o"):
                p(pre + f"attn.w{n}", (c, c))
                p(pre + f"attn.b{n}", (c,), "zeros")
            p(pre + "pe.w", (c, c))
            p(pre + "pe.b", (c,), "zeros")
            p(pre + "dup.w", (NUM_ANCHORS,), "constant", scale=1.0 / NUM_ANCHORS)
            p(pre + "val.w", (c, c))
            p(pre + "val.b", (c,), "zeros")
            p(pre + "merge.w0", (NUM_ANCHORS * c, 2 * c))
            p(pre + "merge.b0", (2 * c,), "zeros")
            p(pre + "merge.w1", (2 * c, c))
            p(pre + "merge.b1", (c,), "zeros")
            p(pre + "ffn.w0", (c, cfg.ffn_mult * c))
            p(pre + "ffn.b0", (cfg.ffn_mult * c,), "zeros")
            p(pre + "ffn.w1", (cfg.ffn_mult * c, c))
            p(pre + "ffn.b1", (c,), "zeros")
            for ln in ("ln1", "ln2", "ln3"):
                p(pre + ln + ".g", (c,), "constant", scale=1.0)
                p(pre + ln + ".b", (c,), "zeros")

        p("head.reg.w0", (c, 2 * c))
        p("head.reg.b0", (2 * c,), "zeros")
        p("head.reg.w1", (2 * c, m * 3), "zeros")  # identity refinement at init
        p("head.reg.b1", (m * 3,), "zeros")
        p("head.off.w0", (c, 2 * c))
        p("head.off.b0", (2 * c,), "zeros")
        p("head.off.w1", (2 * c, m * 3), "zeros")
        off_b = p("head.off.b1", (m * 3,), "zeros")
        off_b.data[:] = np.tile([0.0, 1.75, 0.0], m)  # half-lane prior
        p("head.cls.w0", (c, c))
        p("head.cls.b0", (c,), "zeros")
        p("head.cls.w1", (c, len(LANE_CLASSES)), "zeros")
        p("head.cls.b1", (len(LANE_CLASSES),), "constant", scale=-2.0)
        p("head.type.w0", (c, c))
        p("head.type.b0", (c,), "zeros")
        p("head.type.w1", (c, 6))
        p("head.type.b1", (6,), "zeros")
        p("head.mask.w0", (c, c))
        p("head.mask.b0", (c,), "zeros")
        p("head.mask.w1", (c, c))
        p("head.mask.b1", (c,), "zeros")
        p("head.mask.proj", (c, c))
        p("head.topo.succ", (c, c))
        p("head.topo.pred", (c, c))
        p("head.topo.b", (c,), "zeros")
        p("head.topo.v", (c, 1))
        p("head.topo.c", (1,), "constant", scale=-2.0)

        p("stream.prop.w0", (c + 12, c))
        p("stream.prop.b0", (c,), "zeros")
        p("stream.prop.w1", (c, c), "zeros")  # residual identity at init
        p("stream.prop.b1", (c,), "zeros")
        for gate in ("z", "r", "n"):
            p(f"stream.gru.w_{gate}", (c, c))
            p(f"stream.gru.u_{gate}", (c, c))
        # update gate nearly closed at init: fused BEV starts as the
        # current frame, and memory blends in only as training opens it
        p("stream.gru.b_z", (c,), "constant", scale=-4.0)
        p("stream.gru.b_r", (c,), "zeros")
        p("stream.gru.b_n", (c,), "zeros")

    def head(self, x, name):
        P = self.params
        return E.mlp(x, [(P[f"{name}.w0"], P[f"{name}.b0"]), (P[f"{name}.w1"], P[f"{name}.b1"])])

    def gru_params(self) -> dict:
        P = self.params
        return {
            key: P[f"stream.gru.{key}"]
            for key in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")
        }

    def parameter_groups(self) -> dict:
        """Parameter names bucketed by the feature that exercises them."""
        names = list(self.params.names())
        return {
            "stream": [n for n in names if n.startswith("stream.")],
            "dn": [n for n in names if n.startswith("dn.")],
            "core": [n for n in names if not n.startswith(("stream.", "dn."))],
        }

    # query construction ---------------------------------------------------

    def init_queries(self) -> tuple[Tensor, Tensor]:
        """Learned content plus sigmoid-mapped center reference points."""
        P = self.params
        content = P["query.content"]
        hidden = E.relu(E.linear(P["query.pos"], P["query.ref.w0"], P["query.ref.b0"]))
        refs = E.sigmoid(E.linear(hidden, P["query.ref.w1"], P["query.ref.b1"]))
        return content, E.reshape(refs, (self.config.queries, NUM_POINTS, 3))

    def dn_queries(self, dn: DnBatch) -> tuple[Tensor, Tensor]:
        """Noised-GT queries: point encodings fused with class/type embeddings."""
        P, c = self.params, self.config.channels
        pe = E.sinusoid_features(dn.refs.reshape(-1, 3), c, self.config.pe_temperature)
        pe = E.linear(E.reshape(pe, (dn.total, NUM_POINTS * c)), P["dn.pe.w"], P["dn.pe.b"])
        cls = E.embedding_lookup(P["dn.cls_embed"], dn.labels)
        types = E.add(
            E.embedding_lookup(P["dn.type_embed"], dn.types[:, 0]),
            E.embedding_lookup(P["dn.type_embed"], dn.types[:, 1]),
        )
        fused = E.concat([pe, cls, types], axis=1)
        fused = E.relu(E.linear(fused, P["dn.fuse.w0"], P["dn.fuse.b0"]))
        fused = E.linear(fused, P["dn.fuse.w1"], P["dn.fuse.b1"])
        return fused, E.as_tensor(dn.refs.copy())

    # geometry helpers -------------------------------------------------------

    def denormalize(self, refs: Tensor) -> Tensor:
        return E.add(E.mul(refs, self._scale), self._shift)

    def offsets(self, content: Tensor) -> Tensor:
        """Per-point left-boundary offsets in meters, (T, M, 3)."""
        rows = content.data.shape[0]
        return E.reshape(self.head(content, "head.off"), (rows, NUM_POINTS, 3))

    def boundary_anchors(self, refs: Tensor, offsets_m: Tensor) -> Tensor:
        """(T, 8, 3) normalized anchors: 4 left then 4 right points."""
        center = refs[:, ANCHOR_SLICE, :]
        off = E.mul(offsets_m[:, ANCHOR_SLICE, :], 1.0 / self._scale)
        left = E.clip(E.add(center, off), 0.0, 1.0)
        right = E.clip(E.add(center, E.mul(off, -1.0)), 0.0, 1.0)
        return E.concat([left, right], axis=1)

    def positional_encoding(self, anchors, layer: int) -> Tensor:
        """Point-wise encoding of the (T, 8, 3) anchors, (T, 8, C)."""
        P = self.params
        anchors = E.as_tensor(anchors)
        rows = anchors.data.shape[0]
        flat = E.reshape(anchors, (rows * NUM_ANCHORS, 3))
        pe = E.pointwise_pe(
            flat, P[f"l{layer}.pe.w"], P[f"l{layer}.pe.b"], self.config.pe_temperature
        )
        return E.reshape(pe, (rows, NUM_ANCHORS, self.config.channels))

    # decoder ----------------------------------------------------------------

    def encode(self, bev) -> Tensor:
        """Project the raster plus its distance features into the model width."""
        raster = np.asarray(bev.data if isinstance(bev, Tensor) else bev, dtype=np.float64)
        h, w, cin = raster.shape
        if cin != self.config.bev_channels:
            raise ValueError(f"raster has {cin} channels, expected {self.config.bev_channels}")
        aug = np.concatenate([raster, distance_features(raster, self.grid)], axis=-1)
        flat = E.reshape(E.as_tensor(aug), (h * w, aug.shape[-1]))
        out = E.linear(flat, self.params["input_proj.w"], self.params["input_proj.b"])
        return E.reshape(out, (h, w, self.config.channels))

    def _self_attention(self, x: Tensor, pe_bar: Tensor, blocks, layer: int) -> Tensor:
        P, c = self.params, self.config.channels
        pre = f"l{layer}.attn."
        inv = 1.0 / np.sqrt(c)
        outs = []
        for idx in blocks:
            xb = E.take_rows(x, idx)
            pb = E.take_rows(pe_bar, idx)
            qk_in = E.add(xb, pb)
            q = E.linear(qk_in, P[pre + "wq"], P[pre + "bq"])
            k = E.linear(qk_in, P[pre + "wk"], P[pre + "bk"])
            v = E.linear(xb, P[pre + "wv"], P[pre + "bv"])
            attn = E.softmax(E.mul(E.matmul(q, E.transpose(k)), inv), axis=-1)
            outs.append(E.linear(E.matmul(attn, v), P[pre + "wo"], P[pre + "bo"]))
        return E.concat(outs, axis=0)

    def decoder_layer(self, layer, x, refs, anchors, pe, bev, blocks):
        """One decoding block; returns updated content and refined refs."""
        if not 0 <= layer < self.config.layers:
            raise ValueError(
                f"layer {layer} out of range for {self.config.layers}-layer decoder"
            )
        P, c = self.params, self.config.channels
        rows = x.data.shape[0]
        pre = f"l{layer}."

        pe_bar = E.tmean(pe, axis=1)
        sa = self._self_attention(x, pe_bar, blocks, layer)
        x = E.layer_norm(E.add(x, sa), P[pre + "ln1.g"], P[pre + "ln1.b"])

        # duplicate onto the anchors, sample the BEV there, merge back
        dup = E.add(E.reshape(x, (rows, 1, c)), pe)
        locs = E.reshape(anchors, (rows * NUM_ANCHORS, 3))[:, :2]
        sampled = E.grid_sample_bilinear(bev, locs)
        sampled = E.linear(sampled, P[pre + "val.w"], P[pre + "val.b"])
        sampled = E.mul(
            E.reshape(sampled, (rows, NUM_ANCHORS, c)),
            E.reshape(P[pre + "dup.w"], (1, NUM_ANCHORS, 1)),
        )
        merged = E.mlp(
            E.reshape(E.add(dup, sampled), (rows, NUM_ANCHORS * c)),
            [
                (P[pre + "merge.w0"], P[pre + "merge.b0"]),
                (P[pre + "merge.w1"], P[pre + "merge.b1"]),
            ],
        )
        x = E.layer_norm(E.add(x, merged), P[pre + "ln2.g"], P[pre + "ln2.b"])

        ffn = E.mlp(
            x, [(P[pre + "ffn.w0"], P[pre + "ffn.b0"]), (P[pre + "ffn.w1"], P[pre + "ffn.b1"])]
        )
        x = E.layer_norm(E.add(x, ffn), P[pre + "ln3.g"], P[pre + "ln3.b"])

        delta = E.reshape(self.head(x, "head.reg"), (rows, NUM_POINTS, 3))
        refs = E.sigmoid(E.add(E.inverse_sigmoid(refs), delta))
        return x, refs

    def _aux_outputs(self, x: Tensor, refs: Tensor) -> dict:
        rows = x.data.shape[0]
        center = self.denormalize(refs)
        off = self.offsets(x)
        left = E.add(center, off)
        right = E.add(center, E.mul(off, -1.0))
        coords = E.concat(
            [E.reshape(t, (rows, 1, NUM_POINTS, 3)) for t in (center, left, right)], axis=1
        )
        cls = self.head(x, "head.cls")
        types = E.reshape(self.head(x, "head.type"), (rows, 2, 3))
        return {"coords": coords, "class_logits": cls, "type_logits": types, "refs": refs}

    def topology_scores(self, content: Tensor) -> Tensor:
        """(N, N) successor logits via pairwise projections and a shared MLP."""
        P, c = self.params, self.config.channels
        n = content.data.shape[0]
        succ = E.matmul(content, P["head.topo.succ"])
        pred = E.matmul(content, P["head.topo.pred"])
        z = E.add(E.add(E.reshape(succ, (n, 1, c)), E.reshape(pred, (1, n, c))), P["head.topo.b"])
        scores = E.matmul(E.reshape(E.relu(z), (n * n, c)), P["head.topo.v"])
        return E.add(E.reshape(scores, (n, n)), P["head.topo.c"])

    def bev_mask_logits(self, content: Tensor, bev: Tensor) -> Tensor:
        """(N, H*W) BEV mask logits for the given query rows."""
        P = self.params
        h, w, c = bev.data.shape
        q = self.head(content, "head.mask")
        f = E.matmul(E.reshape(bev, (h * w, c)), P["head.mask.proj"])
        return E.matmul(q, E.transpose(f))

    def _inject(self, x, refs, conf0, stream_content, stream_refs):
        """Replace the lowest-confidence matching slots with stream queries."""
        s = stream_content.data.shape[0]
        if s > self.config.stream_slots:
            raise ValueError(
                f"stream bundle holds {s} queries, limit {self.config.stream_slots}"
            )
        order = np.argsort(conf0, kind="stable")
        replaced = np.sort(order[:s])
        total = x.data.shape[0]
        keep = np.ones((total, 1))
        keep[replaced] = 0.0
        place = np.zeros((total, s))
        place[replaced, np.arange(s)] = 1.0
        x = E.add(E.mul(x, keep), E.matmul(place, stream_content))
        refs_flat = E.reshape(refs, (total, NUM_POINTS * 3))
        sr_flat = E.reshape(E.as_tensor(stream_refs), (s, NUM_POINTS * 3))
        refs_flat = E.add(E.mul(refs_flat, keep), E.matmul(place, sr_flat))
        return x, E.reshape(refs_flat, (total, NUM_POINTS, 3)), replaced

    def decode(
        self,
        bev: Tensor,
        dn: DnBatch | None = None,
        stream: tuple | None = None,
        dynamic_pe: bool = True,
        trace: bool = False,
    ) -> DecodeResult:
        """Run the decoder over matching (+ denoising, + stream) queries.

        stream is an optional (content (S, C), refs (S, M, 3)) pair injected
        exactly once, after layer 0, into the lowest-confidence matching
        slots. With dynamic_pe off, positional encodings stay frozen at the
        layer-0 values while the reference points keep refining.
        """
        cfg = self.config
        nq = cfg.queries
        x, refs = self.init_queries()
        if dn is not None:
            dn_x, dn_refs = self.dn_queries(dn)
            x = E.concat([x, dn_x], axis=0)
            refs = E.concat([refs, dn_refs], axis=0)
        blocks = attention_blocks(nq, dn)

        frozen_pe = None
        layers_out, traced = [], []
        conf0, injected = None, None
        for layer in range(cfg.layers):
            anchors = self.boundary_anchors(refs, self.offsets(x))
            if dynamic_pe:
                pe = self.positional_encoding(anchors, layer)
            elif frozen_pe is None:
                pe = frozen_pe = self.positional_encoding(anchors, 0)
            else:
                pe = frozen_pe
            if trace:
                traced.append(
                    {
                        "refs": refs.data.copy(),
                        "anchors": anchors.data.copy(),
                        "pe": pe.data.copy(),
                    }
                )
            x, refs = self.decoder_layer(layer, x, refs, anchors, pe, bev, blocks)
            layers_out.append(self._aux_outputs(x, refs))
            if layer == 0:
                conf0 = _sigmoid(layers_out[0]["class_logits"].data[:nq]).max(axis=1)
                if stream is not None and stream[0].data.shape[0] > 0:
                    x, refs, injected = self._inject(x, refs, conf0, stream[0], stream[1])

        matching = E.narrow(x, slice(0, nq))
        topo = self.topology_scores(matching)
        masks = self.bev_mask_logits(matching, bev)
        dn_blocks = None
        if dn is not None and dn.groups > 0:
            dn_blocks = []
            for g in range(dn.groups):
                idx = nq + np.where(dn.group == g)[0]
                dn_blocks.append(self.topology_scores(E.take_rows(x, idx)))
        return DecodeResult(
            layers=layers_out,
            topo_logits=topo,
            mask_logits=masks,
            dn_topo_blocks=dn_blocks,
            layer0_confidence=conf0,
            injected=injected,
            content=x,
            n_matching=nq,
            trace=traced if trace else None,
        )

    def forward(self, raster: np.ndarray, **kw) -> DecodeResult:
        return self.decode(self.encode(raster), **kw)


# predictions and loss -------------------------------------------------------


def predictions_to_graph(result: DecodeResult, min_confidence: float = 0.0) -> LaneGraph:
    """Materialize the final-layer matching outputs as a prediction graph."""
    nq = result.n_matching
    final = result.final
    coords = final["coords"].data[:nq]
    probs = _sigmoid(final["class_logits"].data[:nq])
    types = final["type_logits"].data[:nq].argmax(axis=2)
    adj = _sigmoid(result.topo_logits.data)
    keep = np.where(probs.max(axis=1) >= min_confidence)[0]
    segments = [
        LaneSegment(
            coords[i, 0],
            coords[i, 1],
            coords[i, 2],
            lane_class=LANE_CLASSES[int(probs[i].argmax())],
            left_type=BOUNDARY_TYPES[int(types[i, 0])],
            right_type=BOUNDARY_TYPES[int(types[i, 1])],
            confidence=float(probs[i].max()),
        )
        for i in keep
    ]
    return LaneGraph(segments, adj[np.ix_(keep, keep)])


def dn_outputs(result: DecodeResult, dn: DnBatch) -> dict:
    """Slice the final-layer outputs down to the denoising partition."""
    span = slice(result.n_matching, result.n_matching + dn.total)
    final = result.final
    return {
        "coords": E.narrow(final["coords"], span),
        "class_logits": E.narrow(final["class_logits"], span),
        "type_logits": E.narrow(final["type_logits"], span),
        "topo_blocks": result.dn_topo_blocks,
    }


def _assignment_arrays(assignment: Assignment) -> tuple[np.ndarray, np.ndarray]:
    if not assignment.pairs:
        return np.empty(0, int), np.empty(0, int)
    rows, cols = zip(*assignment.pairs)
    return np.asarray(rows, int), np.asarray(cols, int)


def match_frame(
    result: DecodeResult, gt: LaneGraph, gt_masks: np.ndarray | None = None
) -> Assignment:
    """Hungarian assignment between final-layer predictions and GT."""
    nq = result.n_matching
    final = result.final
    coords = final["coords"].data[:nq]
    probs = _sigmoid(final["class_logits"].data[:nq])
    mask_probs = _sigmoid(result.mask_logits.data) if gt_masks is not None else None
    return hungarian(lanesegment_cost(coords, probs, mask_probs, gt, gt_masks))


def lane_segment_loss(
    result: DecodeResult,
    gt: LaneGraph,
    gt_masks: np.ndarray | None = None,
    weights: dict | None = None,
) -> dict:
    """Deep-supervised matched set loss over the matching queries.

    Coordinates, class and boundary types are supervised at every layer
    with a per-layer assignment; topology and masks only at the final
    layer. Returns per-term tensors, the weighted total and the final
    assignment.
    """
    w = dict(LS_WEIGHTS)
    if weights:
        w.update(weights)
    nq = result.n_matching
    n_gt = len(gt.segments)
    zero = E.as_tensor(0.0)
    terms = {k: zero for k in ("coord", "cls", "types", "topo", "seg_ce", "seg_dice")}
    final_assignment = Assignment([], 0.0)

    gt_coords = np.stack([s.coordinates() for s in gt.segments]) if n_gt else None
    gt_cls = np.array([LANE_CLASS_INDEX[s.lane_class] for s in gt.segments], dtype=int)
    gt_types = (
        np.array(
            [
                [BOUNDARY_TYPE_INDEX[s.left_type], BOUNDARY_TYPE_INDEX[s.right_type]]
                for s in gt.segments
            ],
            dtype=int,
        )
        if n_gt
        else np.empty((0, 2), int)
    )

    n_layers = len(result.layers)
    for li, out in enumerate(result.layers):
        coords = E.narrow(out["coords"], slice(0, nq))
        cls_logits = E.narrow(out["class_logits"], slice(0, nq))
        type_logits = E.narrow(out["type_logits"], slice(0, nq))
        is_final = li == n_layers - 1

        cls_target = np.zeros((nq, len(LANE_CLASSES)))
        if n_gt:
            probs = _sigmoid(cls_logits.data)
            mask_probs, masks = None, None
            if is_final and gt_masks is not None:
                mask_probs = _sigmoid(result.mask_logits.data)
                masks = gt_masks
            assignment = hungarian(lanesegment_cost(coords.data, probs, mask_probs, gt, masks))
            rows, cols = _assignment_arrays(assignment)
            if is_final:
                final_assignment = assignment

            terms["coord"] = E.add(
                terms["coord"], E.l1_loss(E.take_rows(coords, rows), gt_coords[cols])
            )
            cls_target[rows, gt_cls[cols]] = 1.0
            t_logits = E.reshape(E.take_rows(type_logits, rows), (2 * len(rows), 3))
            terms["types"] = E.add(
                terms["types"], E.cross_entropy(t_logits, gt_types[cols].reshape(-1))
            )
            if is_final:
                sub = E.take_rows(result.topo_logits, rows)
                sub = E.transpose(E.take_rows(E.transpose(sub), rows))
                terms["topo"] = E.focal_loss(E.sigmoid(sub), gt.adjacency[np.ix_(cols, cols)])
                if gt_masks is not None:
                    m = E.sigmoid(E.take_rows(result.mask_logits, rows))
                    target = gt_masks[cols]
                    terms["seg_ce"] = E.binary_cross_entropy(m, target)
                    terms["seg_dice"] = E.dice_loss(m, target)
        terms["cls"] = E.add(terms["cls"], E.focal_loss(E.sigmoid(cls_logits), cls_target))

    total = zero
    for key in ("coord", "cls", "types", "topo", "seg_ce", "seg_dice"):
        total = E.add(total, E.mul(terms[key], w[key]))
    out = dict(terms)
    out["total"] = total
    out["assignment"] = final_assignment
    return out
