"""Visual and textual scene graphs over detected chart objects.

The visual graph links each object to its three spatially closest neighbors
(minimum box distance, weight exp(-d)). The textual graph reuses that
topology over per-object label nodes and attaches each OCR string as a leaf
node on its owner. Cross-modal positive pairs match the two per-object node
sets one to one.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .scene import BBox, ChartScene


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    object_id: int
    kind: str  # "object" | "ocr"
    ocr_index: int | None = None  # position within the owner's ocr_texts


@dataclass(frozen=True)
class Graph:
    """Weighted undirected graph; one stored entry per edge, src < dst."""

    modality: str  # "visual" | "textual"
    nodes: tuple[GraphNode, ...]
    features: np.ndarray  # (n_nodes, dim)
    edges: tuple[tuple[int, int, float], ...]
    undirected: bool = True

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        if self.features.shape[0] != len(self.nodes):
            raise GraphError(
                f"{self.features.shape[0]} feature rows for {len(self.nodes)} nodes")
        for i, n in enumerate(self.nodes):
            if n.node_id != i:
                raise GraphError("node ids must be dense 0..N-1 in order")
        for s, d, w in self.edges:
            if s == d:
                raise GraphError(f"self-edge at node {s}")
            if not 0.0 < w <= 1.0:
                raise GraphError(f"edge weight {w} outside (0, 1]")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class PairMap:
    """Positive pairs (visual node, textual label node), one per object."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self):
        return len(self.pairs)

    def visual_ids(self) -> list[int]:
        return [p[0] for p in self.pairs]

    def textual_ids(self) -> list[int]:
        return [p[1] for p in self.pairs]


def min_bbox_distance(a: BBox, b: BBox) -> float:
    """Minimum Euclidean distance between two boxes; 0 when they touch."""
    dx = max(0.0, max(a.x0, b.x0) - min(a.x1, b.x1))
    dy = max(0.0, max(a.y0, b.y0) - min(a.y1, b.y1))
    return math.hypot(dx, dy)


def edge_weight(d: float) -> float:
    """Spatial affinity exp(-d) in (0, 1]."""
    return math.exp(-d)


def knn_edges(scene: ChartScene, k: int = 3) -> list[tuple[int, int, float]]:
    """Symmetrized k-nearest-neighbor edges over the scene's objects.

    Indices refer to positions in ``scene.objects``. Distance ties break on
    the smaller object id; k is clipped to N-1.
    """
    objs = scene.objects
    n = len(objs)
    if n == 0:
        raise GraphError(f"scene {scene.scene_id!r} has no objects")
    k = min(k, n - 1)
    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d = min_bbox_distance(objs[i].bbox, objs[j].bbox)
            dist[i][j] = dist[j][i] = d
    chosen: set[tuple[int, int]] = set()
    for i in range(n):
        ranked = sorted((j for j in range(n) if j != i),
                        key=lambda j: (dist[i][j], objs[j].id))
        for j in ranked[:k]:
            chosen.add((min(i, j), max(i, j)))
    return [(s, d, edge_weight(dist[s][d])) for s, d in sorted(chosen)]


def build_visual_graph(scene: ChartScene, node_feats: np.ndarray, k: int = 3) -> Graph:
    """Visual graph: one node per object (scene order), KNN spatial edges."""
    n = len(scene.objects)
    if node_feats.shape[0] != n:
        raise GraphError(f"node_feats has {node_feats.shape[0]} rows for {n} objects")
    nodes = tuple(GraphNode(i, obj.id, "object") for i, obj in enumerate(scene.objects))
    return Graph("visual", nodes, node_feats, tuple(knn_edges(scene, k)))


def build_textual_graph(scene: ChartScene, label_feats: np.ndarray,
                        ocr_feats: np.ndarray, k: int = 3) -> Graph:
    """Textual graph: label node per object plus one leaf per OCR string.

    Label nodes carry ``label_feats`` rows (scene order) and are wired with
    the same KNN topology and weights as the visual graph; every OCR node
    connects to its owner's label node with weight 1. ``ocr_feats`` rows
    follow (object order, then ocr_texts order within the object).
    """
    n = len(scene.objects)
    n_ocr = sum(len(o.ocr_texts) for o in scene.objects)
    if label_feats.shape[0] != n:
        raise GraphError(f"label_feats has {label_feats.shape[0]} rows for {n} objects")
    if ocr_feats.shape[0] != n_ocr:
        raise GraphError(f"ocr_feats has {ocr_feats.shape[0]} rows for {n_ocr} OCR texts")
    if n_ocr and ocr_feats.shape[1] != label_feats.shape[1]:
        raise GraphError("label and OCR feature dims differ")
    nodes = [GraphNode(i, obj.id, "object") for i, obj in enumerate(scene.objects)]
    edges = list(knn_edges(scene, k))
    nid = n
    for i, obj in enumerate(scene.objects):
        for t in range(len(obj.ocr_texts)):
            nodes.append(GraphNode(nid, obj.id, "ocr", ocr_index=t))
            edges.append((i, nid, 1.0))
            nid += 1
    feats = np.concatenate([label_feats, ocr_feats], axis=0) if n_ocr else label_feats
    return Graph("textual", tuple(nodes), feats, tuple(edges))


def make_pair_map(g_v: Graph, g_t: Graph) -> PairMap:
    """Positive pairs between the per-object nodes of both graphs."""
    vis = {n.object_id: n.node_id for n in g_v.nodes if n.kind == "object"}
    txt = {n.object_id: n.node_id for n in g_t.nodes if n.kind == "object"}
    if set(vis) != set(txt):
        missing = set(vis).symmetric_difference(txt)
        raise GraphError(f"object ids {sorted(missing)} present in only one graph")
    pairs = tuple((vis[oid], txt[oid]) for oid in (n.object_id for n in g_v.nodes
                                                   if n.kind == "object"))
    return PairMap(pairs)


def drop_edges(g: Graph, p: float, seed: int) -> Graph:
    """Remove each undirected edge independently with probability p."""
    if not 0.0 <= p < 1.0:
        raise GraphError(f"drop probability {p} outside [0, 1)")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(g.edges)) >= p
    kept = tuple(e for e, k in zip(g.edges, keep) if k)
    return replace(g, edges=kept)


def init_nodes_patch_mean(patch_hidden, alignment) -> "np.ndarray":
    """Per-object features: mean of the patch hidden-state rows under each box.

    ``alignment`` maps object_id -> patch index set, iterated in scene order.
    Works on numpy arrays and torch tensors alike (gradients flow through).
    """
    rows = []
    n_patches = patch_hidden.shape[0]
    for oid, patches in alignment.items():
        if not patches:
            raise GraphError(f"object {oid} has an empty patch set")
        idx = sorted(patches)
        if idx[-1] >= n_patches:
            raise GraphError(f"object {oid} patch index {idx[-1]} >= {n_patches}")
        rows.append(patch_hidden[idx].mean(0))
    if isinstance(patch_hidden, np.ndarray):
        return np.stack(rows, axis=0)
    import torch

    return torch.stack(rows, dim=0)


def init_nodes_direct(object_feats: np.ndarray, n_objects: int) -> np.ndarray:
    """Pass object-level features through unchanged after a shape check."""
    if object_feats.shape[0] != n_objects:
        raise GraphError(
            f"object_feats has {object_feats.shape[0]} rows, scene has {n_objects}")
    return object_feats


def graph_debug_dict(g: Graph) -> dict:
    """JSON-friendly dump used by golden-file tests and `graph-dump`."""
    return {
        "modality": g.modality,
        "nodes": [{"id": n.node_id, "object_id": n.object_id,
                   "dim": int(g.features.shape[1])} for n in g.nodes],
        "edges": [[s, d, w] for s, d, w in g.edges],
    }


def dump_graph_json(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph_debug_dict(g), f, indent=1)
