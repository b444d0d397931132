"""Scene graphs, bounding boxes, IoU matching, and the synthetic benchmark.

The generator plants a grounding task whose solution requires reading graph
context: candidate nodes carry only a class prototype in their features,
while the motif identity of their relations is advertised by the context
hub they connect to. Each query ("phrase") describes one target candidate
by class plus motif signature, and every target has a same-class distractor
with a different signature, so nearest-feature matching alone cannot
separate them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, ContractError, DatasetError


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0,1] image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ContractError("box coordinate is not finite")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ContractError(
                f"invalid box: need x1 < x2 and y1 < y2, got {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


class Match(NamedTuple):
    index: int
    iou: float

    @property
    def matched(self) -> bool:
        return self.iou > 0.0


def match_positive(proposals: list[BoundingBox], gt: BoundingBox) -> Match:
    """Index of the proposal with maximum IoU against gt (ties: lowest index).

    A zero best IoU means the instance has no usable positive; callers skip
    such instances during training.
    """
    if not proposals:
        raise ContractError("match_positive requires at least one proposal")
    best_i = 0
    best = iou(proposals[0], gt)
    for i in range(1, len(proposals)):
        v = iou(proposals[i], gt)
        if v > best:
            best, best_i = v, i
    return Match(best_i, best)


def merge_gt_boxes(boxes: list[BoundingBox]) -> BoundingBox:
    """Union region of several ground-truth boxes."""
    if not boxes:
        raise ContractError("merge_gt_boxes requires a nonempty list")
    return BoundingBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


# ---------------------------------------------------------------------------
# graphs and instances


Edge = tuple[int, int, Optional[int]]  # (src, tgt, relation label or None)


@dataclass
class SceneGraph:
    node_count: int
    features: np.ndarray  # (node_count, d)
    edges: list[Edge]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.node_count <= 0:
            raise ContractError("scene graph needs at least one node")
        if self.features.ndim != 2 or self.features.shape[0] != self.node_count:
            raise ContractError(
                f"features shape {self.features.shape} does not match node_count {self.node_count}")
        if not np.isfinite(self.features).all():
            raise ContractError("scene graph features contain non-finite values")
        seen = set()
        for e in self.edges:
            s, t = e[0], e[1]
            if not (0 <= s < self.node_count and 0 <= t < self.node_count):
                raise ContractError(f"edge {e} references a missing node")
            if s == t:
                raise ContractError(f"edge {e} is a self-loop")
            if (s, t) in seen:
                raise ContractError(f"duplicate edge ({s}, {t})")
            seen.add((s, t))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def undirected_relations(node_count: int, edges) -> tuple[np.ndarray, np.ndarray]:
    """Directed (source j -> receiver i) relation arrays for aggregation.

    Each stored edge contributes both directions; duplicates collapse. The
    output is sorted by (receiver, source) so per-node neighbor order is
    canonical.
    """
    rel = set()
    for e in edges:
        s, t = int(e[0]), int(e[1])
        if s != t:
            rel.add((t, s))  # message s -> t
            rel.add((s, t))  # message t -> s
    ordered = sorted(rel)
    if not ordered:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    recv = np.array([r for r, _ in ordered], dtype=np.int64)
    src = np.array([s for _, s in ordered], dtype=np.int64)
    return src, recv


@dataclass
class GroundingInstance:
    phrase_graph: SceneGraph
    visual_graph: SceneGraph
    proposals: list[BoundingBox]
    ground_truth: list[BoundingBox]
    true_alignment: Optional[list[int]] = None

    def __post_init__(self):
        n = self.phrase_graph.node_count
        m = self.visual_graph.node_count
        if not (m > n >= 1):
            raise ContractError(f"need more regions than phrases, got n={n}, m={m}")
        if len(self.proposals) != m:
            raise ContractError(f"expected {m} proposal boxes, got {len(self.proposals)}")
        if len(self.ground_truth) != n:
            raise ContractError(f"expected {n} ground-truth boxes, got {len(self.ground_truth)}")
        if self.true_alignment is not None:
            if len(self.true_alignment) != n:
                raise ContractError("true_alignment length must equal phrase count")
            for j in self.true_alignment:
                if not (0 <= j < m):
                    raise ContractError(f"true_alignment index {j} out of range")

    @property
    def n(self) -> int:
        return self.phrase_graph.node_count

    @property
    def m(self) -> int:
        return self.visual_graph.node_count


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 4
    m: int = 12
    d_t: int = 32
    d_v: int = 32
    motif_count: int = 4
    noise_sigma: float = 0.3
    bias_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.m > self.n >= 1):
            raise ConfigError(f"need m > n >= 1, got n={self.n}, m={self.m}")
        if self.motif_count < 1:
            raise ConfigError("motif_count must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not (0.0 <= self.bias_strength <= 1.0):
            raise ConfigError("bias_strength must lie in [0, 1]")
        need = self.class_count + self.motif_count + 1
        if need > self.d_v:
            raise ConfigError(
                f"d_v={self.d_v} too small for {self.class_count} classes + "
                f"{self.motif_count} motifs + bias direction")

    @property
    def class_count(self) -> int:
        return max(6, self.n + 2)


# How strongly context hubs and query features carry motif directions,
# relative to unit-norm class prototypes.
CONTEXT_SCALE = 1.0
CLUTTER_EDGES = 2


@dataclass
class DatasetParams:
    """Shared latent structure every scene of one dataset is built from."""

    class_protos: np.ndarray  # (class_count, d_v)
    motif_dirs: np.ndarray    # (motif_count, d_v)
    bias_dir: np.ndarray      # (d_v,)
    phrase_map: np.ndarray    # (d_t, d_v)


def dataset_params(cfg: SyntheticConfig) -> DatasetParams:
    rng = np.random.default_rng([cfg.seed, 9001])
    need = cfg.class_count + cfg.motif_count + 1
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.d_v, need)))
    class_protos = np.ascontiguousarray(basis[:, : cfg.class_count].T)
    motif_dirs = np.ascontiguousarray(basis[:, cfg.class_count : cfg.class_count + cfg.motif_count].T)
    bias_dir = np.ascontiguousarray(basis[:, -1])
    square, _ = np.linalg.qr(rng.standard_normal((max(cfg.d_t, cfg.d_v), max(cfg.d_t, cfg.d_v))))
    phrase_map = np.ascontiguousarray(square[: cfg.d_t, : cfg.d_v])
    return DatasetParams(class_protos, motif_dirs, bias_dir, phrase_map)


@dataclass
class SceneMeta:
    """Planted structure of one generated scene (for oracles and attribution)."""

    target_nodes: list[int]
    distractor_nodes: list[int]
    hub_nodes: list[int]
    node_class: list[int]           # -1 for hubs
    signatures: list[list[int]]     # per target, motifs of its hub edges
    distractor_signatures: list[list[int]]
    descriptors: np.ndarray         # (m, d_v) clean class+context descriptor
    phrase_descriptors: np.ndarray  # (n, d_v) descriptor each phrase encodes


def _scene_rng(cfg: SyntheticConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 7, int(index)])


def _grid_boxes(m: int, rng: np.random.Generator) -> list[BoundingBox]:
    cols = int(math.ceil(math.sqrt(m)))
    rows = int(math.ceil(m / cols))
    cells = [(c, r) for r in range(rows) for c in range(cols)][:m]
    order = rng.permutation(m)
    cw, ch = 1.0 / cols, 1.0 / rows
    boxes: list[Optional[BoundingBox]] = [None] * m
    for node, cell_i in enumerate(order):
        c, r = cells[cell_i]
        w = cw * (0.55 + 0.25 * rng.random())
        h = ch * (0.55 + 0.25 * rng.random())
        x1 = c * cw + rng.random() * (cw - w)
        y1 = r * ch + rng.random() * (ch - h)
        boxes[node] = BoundingBox(x1, y1, x1 + w, y1 + h)
    return boxes  # type: ignore[return-value]


def _jitter_near(box: BoundingBox, rng: np.random.Generator) -> BoundingBox:
    """A distractor box overlapping `box` with IoU kept below 0.5."""
    w, h = box.x2 - box.x1, box.y2 - box.y1
    for _ in range(8):
        s = 0.45 + 0.2 * rng.random()
        ang = rng.random() * 2 * math.pi
        dx, dy = s * w * math.cos(ang), s * h * math.sin(ang)
        x1 = min(max(box.x1 + dx, 0.0), 1.0 - w)
        y1 = min(max(box.y1 + dy, 0.0), 1.0 - h)
        cand = BoundingBox(x1, y1, x1 + w, y1 + h)
        if iou(cand, box) < 0.5:
            return cand
    # clamping ate the shift near a border; step sideways toward free space
    dx = 0.6 * w
    x1 = box.x1 - dx if box.x1 - dx >= 0.0 else min(box.x1 + dx, 1.0 - w)
    return BoundingBox(x1, box.y1, x1 + w, box.y2)


def generate_scene_with_meta(cfg: SyntheticConfig, index: int) -> tuple[GroundingInstance, SceneMeta]:
    dp = dataset_params(cfg)
    rng = _scene_rng(cfg, index)
    n, m, c_motifs = cfg.n, cfg.m, cfg.motif_count

    node_ids = list(rng.permutation(m))
    targets = [int(v) for v in node_ids[:n]]
    n_distract = min(n, m - n - 1)
    distractors = [int(v) for v in node_ids[n : n + n_distract]]
    hub_count = min(c_motifs, m - n - n_distract)
    hubs = [int(v) for v in node_ids[n + n_distract : n + n_distract + hub_count]]
    fillers = [int(v) for v in node_ids[n + n_distract + hub_count :]]
    hub_motif = {hub: g for g, hub in enumerate(hubs)}
    avail_motifs = list(range(hub_count))

    # classes: targets distinct, distractor i shares target i's class
    target_classes = [int(v) for v in rng.choice(cfg.class_count, size=n, replace=False)]
    node_class = [-1] * m
    for i, t in enumerate(targets):
        node_class[t] = target_classes[i]
    for i, d in enumerate(distractors):
        node_class[d] = target_classes[i]
    for f in fillers:
        node_class[f] = int(rng.integers(cfg.class_count))

    # motif signatures: the distractor shares exactly one motif when possible
    sig_size = min(2, hub_count)
    signatures: list[list[int]] = []
    distractor_sigs: list[list[int]] = []
    for i in range(n):
        if sig_size == 0:
            signatures.append([])
            distractor_sigs.append([])
            continue
        sig = sorted(int(v) for v in rng.choice(avail_motifs, size=sig_size, replace=False))
        signatures.append(sig)
        if i < n_distract:
            rest = [g for g in avail_motifs if g not in sig]
            if rest and sig_size >= 2:
                keep = int(sig[int(rng.integers(len(sig)))])
                dsig = sorted([keep, int(rest[int(rng.integers(len(rest)))])])
            elif rest:
                dsig = [int(rest[int(rng.integers(len(rest)))])]
            else:
                dsig = list(sig)
            distractor_sigs.append(dsig)

    def hub_edges(node: int, sig: list[int]) -> list[Edge]:
        out = []
        for g in sig:
            hub = hubs[g]
            if rng.random() < 0.5:
                out.append((node, hub, g))
            else:
                out.append((hub, node, g))
        return out

    edges: list[Edge] = []
    for i, t in enumerate(targets):
        edges.extend(hub_edges(t, signatures[i]))
    for i, d in enumerate(distractors):
        edges.extend(hub_edges(d, distractor_sigs[i]))
    for f in fillers:
        if hubs:
            g = int(rng.integers(hub_count))
            edges.extend(hub_edges(f, [g]))

    # a path over the targets; mirrored below into the phrase graph
    order = [int(v) for v in rng.permutation(n)]
    tt_edges: list[Edge] = []
    for a, b in zip(order, order[1:]):
        g = int(rng.integers(c_motifs))
        tt_edges.append((targets[a], targets[b], g))
    edges.extend(tt_edges)

    # clutter relations between random candidates
    candidates = targets + distractors + fillers
    present = {(e[0], e[1]) for e in edges} | {(e[1], e[0]) for e in edges}
    added = 0
    guard = 0
    while added < CLUTTER_EDGES and len(candidates) >= 2 and guard < 50:
        guard += 1
        a, b = (int(v) for v in rng.choice(len(candidates), size=2, replace=False))
        s, t = candidates[a], candidates[b]
        if (s, t) in present:
            continue
        g = int(rng.integers(c_motifs))
        edges.append((s, t, g))
        present.add((s, t))
        present.add((t, s))
        added += 1

    # clean descriptors: class prototype plus motif context of hub relations
    desc = np.zeros((m, cfg.d_v))
    for j in range(m):
        if j in hub_motif:
            desc[j] = dp.motif_dirs[hub_motif[j]]
        else:
            desc[j] = dp.class_protos[node_class[j]]
    for i, t in enumerate(targets):
        for g in signatures[i]:
            desc[t] += CONTEXT_SCALE * dp.motif_dirs[g]
    for i, d in enumerate(distractors):
        for g in distractor_sigs[i]:
            desc[d] += CONTEXT_SCALE * dp.motif_dirs[g]
    for f in fillers:
        for (s, t, g) in edges:
            if g is not None and (s == f or t == f) and (s in hub_motif or t in hub_motif):
                desc[f] += CONTEXT_SCALE * dp.motif_dirs[g]

    sigma_v = cfg.noise_sigma / math.sqrt(cfg.d_v)
    vis_feat = desc + sigma_v * rng.standard_normal((m, cfg.d_v))
    if cfg.bias_strength > 0:
        for t in targets:
            vis_feat[t] += cfg.bias_strength * dp.bias_dir

    phrase_desc = desc[targets].copy()
    sigma_t = cfg.noise_sigma / math.sqrt(cfg.d_t)
    phr_feat = phrase_desc @ dp.phrase_map.T + sigma_t * rng.standard_normal((n, cfg.d_t))

    phrase_index = {t: i for i, t in enumerate(targets)}
    phr_edges: list[Edge] = [
        (phrase_index[s], phrase_index[t], g)
        for (s, t, g) in edges
        if s in phrase_index and t in phrase_index
    ]

    boxes = _grid_boxes(m, rng)
    for i, d in enumerate(distractors):
        boxes[d] = _jitter_near(boxes[targets[i]], rng)
    gt = [boxes[t] for t in targets]

    instance = GroundingInstance(
        phrase_graph=SceneGraph(n, phr_feat, phr_edges),
        visual_graph=SceneGraph(m, vis_feat, edges),
        proposals=boxes,
        ground_truth=gt,
        true_alignment=list(targets),
    )
    meta = SceneMeta(
        target_nodes=targets,
        distractor_nodes=distractors,
        hub_nodes=hubs,
        node_class=node_class,
        signatures=signatures,
        distractor_signatures=distractor_sigs,
        descriptors=desc,
        phrase_descriptors=phrase_desc,
    )
    return instance, meta


def generate_scene(cfg: SyntheticConfig, index: int) -> GroundingInstance:
    """Deterministic function of (cfg.seed, index)."""
    return generate_scene_with_meta(cfg, index)[0]


def oracle_ground(instance: GroundingInstance, meta: SceneMeta, dp: DatasetParams) -> list[int]:
    """Nearest-prototype grounding using the planted clean descriptors.

    Independent of the learned model: compares each phrase feature against
    the linear image of every node's descriptor by cosine similarity.
    """
    mapped = meta.descriptors @ dp.phrase_map.T  # (m, d_t)
    preds = []
    for i in range(instance.n):
        t = instance.phrase_graph.features[i]
        num = mapped @ t
        den = np.linalg.norm(mapped, axis=1) * max(np.linalg.norm(t), 1e-30) + 1e-30
        preds.append(int(np.argmax(num / den)))
    return preds


# ---------------------------------------------------------------------------
# persistence


def _graph_to_dict(g: SceneGraph) -> dict:
    return {
        "features": g.features.tolist(),
        "edges": [[int(s), int(t), (None if lbl is None else int(lbl))] for (s, t, lbl) in g.edges],
    }


def instance_to_dict(inst: GroundingInstance) -> dict:
    return {
        "phrase_graph": _graph_to_dict(inst.phrase_graph),
        "visual_graph": _graph_to_dict(inst.visual_graph),
        "proposals": [b.as_list() for b in inst.proposals],
        "ground_truth": [b.as_list() for b in inst.ground_truth],
        "true_alignment": None if inst.true_alignment is None else [int(i) for i in inst.true_alignment],
    }


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise DatasetError(f"missing field '{key}' in {where}")
    return d[key]


def _graph_from_dict(d: dict, where: str) -> SceneGraph:
    feats = _require(d, "features", where)
    edges_raw = _require(d, "edges", where)
    try:
        features = np.asarray(feats, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"non-numeric features in {where}: {exc}") from exc
    if features.ndim != 2 or features.shape[0] == 0:
        raise DatasetError(f"features in {where} must be a nonempty 2-D array")
    edges: list[Edge] = []
    for e in edges_raw:
        if not isinstance(e, (list, tuple)) or len(e) not in (2, 3):
            raise DatasetError(f"malformed edge {e!r} in {where}")
        lbl = e[2] if len(e) == 3 else None
        edges.append((int(e[0]), int(e[1]), None if lbl is None else int(lbl)))
    try:
        return SceneGraph(features.shape[0], features, edges)
    except ContractError as exc:
        raise DatasetError(f"invalid {where}: {exc}") from exc


def _box_from_list(vals, where: str) -> BoundingBox:
    if not isinstance(vals, (list, tuple)) or len(vals) != 4:
        raise DatasetError(f"malformed box {vals!r} in {where}")
    try:
        return BoundingBox(*(float(v) for v in vals))
    except ContractError as exc:
        raise DatasetError(f"invalid box in {where}: {exc}") from exc


def instance_from_dict(d: dict) -> GroundingInstance:
    pg = _graph_from_dict(_require(d, "phrase_graph", "instance"), "phrase_graph")
    vg = _graph_from_dict(_require(d, "visual_graph", "instance"), "visual_graph")
    proposals = [_box_from_list(b, f"proposals[{i}]") for i, b in enumerate(_require(d, "proposals", "instance"))]
    gt = [_box_from_list(b, f"ground_truth[{i}]") for i, b in enumerate(_require(d, "ground_truth", "instance"))]
    ta = d.get("true_alignment")
    try:
        return GroundingInstance(pg, vg, proposals, gt, None if ta is None else [int(i) for i in ta])
    except ContractError as exc:
        raise DatasetError(f"invalid instance: {exc}") from exc


def save_scene(inst: GroundingInstance, path) -> None:
    with open(path, "w") as fh:
        json.dump(instance_to_dict(inst), fh)


def load_scene(path) -> GroundingInstance:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    return instance_from_dict(d)


def save_dataset(instances, path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst)))
            fh.write("\n")


def load_dataset(path) -> list[GroundingInstance]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON on line {ln + 1} of {path}: {exc}") from exc
            out.append(instance_from_dict(d))
    return out
