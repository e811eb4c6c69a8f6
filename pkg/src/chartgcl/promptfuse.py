"""Soft-prompt fusion and the joint training loop.

Per step: encode patch features, build both scene graphs, compute the
contrastive alignment loss, inject the chosen graph's per-object node
representations as a fixed-width soft prompt ahead of the question tokens,
and optimize task loss + lambda * contrastive loss end to end.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, Tokenizer, ToyBackbone, scene_patch_features
from .contrastive import (ContrastiveBatch, SimilarityConfig, full_loss,
                          inter_modal_loss)
from .encoders import GCN, StubEmbedder, normalized_adjacency
from .graphs import (Graph, build_textual_graph, build_visual_graph, drop_edges,
                     init_nodes_patch_mean, make_pair_map)
from .scene import DEFAULT_CLS_VOCAB, ChartScene, align_objects_to_patches

CHECKPOINT_MAGIC = b"CGCL\x01\x00"


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoftPrompt:
    """Fixed-width prompt matrix plus per-slot provenance (node id or None
    for slots filled with the learned pad vector)."""

    matrix: torch.Tensor
    slots: tuple

    def __post_init__(self):
        if len(self.slots) != self.matrix.shape[0]:
            raise TrainError("slot provenance length != prompt rows")


def prompt_provenance(g: Graph) -> list:
    """Row-aligned map: owning object id for object nodes, None for OCR."""
    return [n.object_id if n.kind == "object" else None for n in g.nodes]


def build_soft_prompt(node_reps: torch.Tensor, provenance, pad_vector: torch.Tensor,
                      n_slots: int = 36) -> SoftPrompt:
    """Place object-node rows (scene order) into the prompt slots.

    OCR rows (provenance None) are skipped; beyond ``n_slots`` objects the
    tail is truncated; remaining slots share the learned pad vector.
    """
    if node_reps.shape[0] != len(provenance):
        raise TrainError("provenance length != node rows")
    if node_reps.shape[1] != pad_vector.shape[-1]:
        raise TrainError(
            f"node dim {node_reps.shape[1]} != prompt dim {pad_vector.shape[-1]}")
    keep = [i for i, p in enumerate(provenance) if p is not None][:n_slots]
    parts = []
    if keep:
        parts.append(node_reps[keep])
    n_pad = n_slots - len(keep)
    if n_pad:
        parts.append(pad_vector.unsqueeze(0).expand(n_pad, -1))
    return SoftPrompt(torch.cat(parts, dim=0), tuple(keep) + (None,) * n_pad)


@dataclass
class TrainConfig:
    # loss mix and graph usage
    lam: float = 1.0
    use_graph: bool = True
    prompt_source: str = "textual"  # textual | visual
    intra_cl: bool = False
    edge_drop_p: float = 0.3
    # contrastive
    tau: float = 0.5
    symmetric: bool = True
    theta: str = "cosine"
    projection_hidden: int | None = None
    inter_uses_augmented: bool = False
    # graph encoders
    k_neighbors: int = 3
    stub_dim: int = 32
    gcn_hidden: int = 64
    gcn_layers: int = 2
    # backbone
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 256
    n_prompt_slots: int = 36
    max_text_len: int = 64
    hash_dim: int = 4
    freeze_encoder: bool = False
    # optimization
    lr: float = 3e-3
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise TrainError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.edge_drop_p < 1.0:
            raise TrainError(f"edge_drop_p {self.edge_drop_p} outside [0, 1)")
        if self.prompt_source not in ("textual", "visual"):
            raise TrainError(f"unknown prompt_source {self.prompt_source!r}")


class GclModel(nn.Module):
    """Backbone plus the two graph encoders, pad vector and optional
    contrastive projection head."""

    def __init__(self, cfg: TrainConfig, backbone_cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone_cfg = backbone_cfg
        self.backbone = ToyBackbone(backbone_cfg)
        self.gcn_v = GCN(cfg.d_model, cfg.gcn_hidden, cfg.d_model, cfg.gcn_layers)
        self.gcn_t = GCN(cfg.stub_dim, cfg.gcn_hidden, cfg.d_model, cfg.gcn_layers)
        # pad slots start at zero so an all-pad prompt is initially inert
        self.pad_vec = nn.Parameter(torch.zeros(cfg.d_model))
        self.projection = None
        if cfg.projection_hidden:
            self.projection = nn.Sequential(
                nn.Linear(cfg.d_model, cfg.projection_hidden),
                nn.ReLU(),
                nn.Linear(cfg.projection_hidden, cfg.d_model),
            )

    def similarity_config(self) -> SimilarityConfig:
        theta = self.cfg.theta
        if self.projection is not None:
            theta = "cosine-with-projection"
        return SimilarityConfig(
            theta=theta, tau=self.cfg.tau, symmetric=self.cfg.symmetric,
            projection=self.projection,
            inter_uses_augmented=self.cfg.inter_uses_augmented)


@dataclass
class SceneBundle:
    """Static per-scene tensors shared across training steps."""

    scene: ChartScene
    patch_feats: np.ndarray
    alignment: dict
    g_v_template: Graph     # placeholder features; real ones come per step
    g_t: Graph
    adj_v: torch.Tensor
    adj_t: torch.Tensor
    t_feats: torch.Tensor
    pair_v: list[int]
    pair_t: list[int]
    t_provenance: list
    v_provenance: list


def prepare_scene(scene: ChartScene, cfg: TrainConfig, embedder: StubEmbedder,
                  cls_vocab=DEFAULT_CLS_VOCAB) -> SceneBundle:
    """Precompute graphs, adjacencies and patch features for one scene."""
    patch_feats = scene_patch_features(scene, cls_vocab, cfg.hash_dim)
    alignment = align_objects_to_patches(scene)
    n = len(scene.objects)
    g_v = build_visual_graph(scene, np.zeros((n, 1)), k=cfg.k_neighbors)
    label_feats = embedder.embed_all([o.cls for o in scene.objects])
    ocr_feats = embedder.embed_all(
        [t for o in scene.objects for t in o.ocr_texts])
    if ocr_feats.shape[0] == 0:
        ocr_feats = np.zeros((0, embedder.dim))
    g_t = build_textual_graph(scene, label_feats, ocr_feats, k=cfg.k_neighbors)
    pairs = make_pair_map(g_v, g_t)
    return SceneBundle(
        scene=scene,
        patch_feats=patch_feats,
        alignment=alignment,
        g_v_template=g_v,
        g_t=g_t,
        adj_v=normalized_adjacency(g_v),
        adj_t=normalized_adjacency(g_t),
        t_feats=torch.as_tensor(g_t.features, dtype=torch.float32),
        pair_v=pairs.visual_ids(),
        pair_t=pairs.textual_ids(),
        t_provenance=prompt_provenance(g_t),
        v_provenance=prompt_provenance(g_v),
    )


def _aug_seed(seed: int, step: int, scene_idx: int, code: int) -> int:
    return int(np.random.SeedSequence((seed, step, scene_idx, code))
               .generate_state(1)[0])


def _encode_scene_graphs(model: GclModel, bundle: SceneBundle,
                         h_e: torch.Tensor, step: int, scene_idx: int,
                         augmented: bool):
    """Graph representations (and edge-dropped variants) for one scene."""
    cfg = model.cfg
    v_feats = init_nodes_patch_mean(h_e, bundle.alignment)
    h_v = model.gcn_v(v_feats, bundle.adj_v)
    h_t = model.gcn_t(bundle.t_feats, bundle.adj_t)
    h_v_aug = h_t_aug = None
    if augmented:
        g_v_drop = drop_edges(bundle.g_v_template, cfg.edge_drop_p,
                              _aug_seed(cfg.seed, step, scene_idx, 0))
        g_t_drop = drop_edges(bundle.g_t, cfg.edge_drop_p,
                              _aug_seed(cfg.seed, step, scene_idx, 1))
        h_v_aug = model.gcn_v(v_feats, normalized_adjacency(g_v_drop))
        h_t_aug = model.gcn_t(bundle.t_feats, normalized_adjacency(g_t_drop))
    return h_v, h_t, h_v_aug, h_t_aug


def _scene_prompt(model: GclModel, bundle: SceneBundle, h_v, h_t) -> torch.Tensor:
    cfg = model.cfg
    if not cfg.use_graph:
        return build_soft_prompt(
            torch.zeros((0, cfg.d_model)), [], model.pad_vec,
            cfg.n_prompt_slots).matrix
    if cfg.prompt_source == "textual":
        return build_soft_prompt(h_t, bundle.t_provenance, model.pad_vec,
                                 cfg.n_prompt_slots).matrix
    return build_soft_prompt(h_v, bundle.v_provenance, model.pad_vec,
                             cfg.n_prompt_slots).matrix


def _contrastive_term(model: GclModel, bundle: SceneBundle, h_v, h_t,
                      h_v_aug, h_t_aug) -> torch.Tensor:
    batch = ContrastiveBatch(
        h_v=h_v, h_t=h_t,
        pairs=_pairs_of(bundle),
        h_v_aug=h_v_aug, h_t_aug=h_t_aug)
    sim = model.similarity_config()
    if model.cfg.intra_cl:
        return full_loss(batch, sim)
    return inter_modal_loss(batch, sim)


def _pairs_of(bundle: SceneBundle):
    from .graphs import PairMap

    return PairMap(tuple(zip(bundle.pair_v, bundle.pair_t)))


def _pack_tokens(samples, tokenizer: Tokenizer):
    """Pad [question SEP answer EOS] sequences; mask selects answer targets."""
    seqs, spans = [], []
    for q_ids, a_ids in samples:
        seq = q_ids + [tokenizer.sep_id] + a_ids + [tokenizer.eos_id]
        seqs.append(seq)
        spans.append(len(q_ids))
    width = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), width), tokenizer.pad_id, dtype=torch.long)
    target_mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, (seq, q_len) in enumerate(zip(seqs, spans)):
        tokens[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        # position j predicts token j+1: supervise answer tokens and EOS
        target_mask[i, q_len:len(seq) - 1] = True
    pad_mask = tokens.eq(tokenizer.pad_id)
    return tokens, target_mask, pad_mask


def _task_loss(logits: torch.Tensor, tokens: torch.Tensor,
               target_mask: torch.Tensor, n_prompt: int) -> torch.Tensor:
    text_logits = logits[:, n_prompt:, :]
    pred = text_logits[:, :-1, :]
    gold = tokens[:, 1:]
    mask = target_mask[:, :-1]
    losses = nn.functional.cross_entropy(
        pred.reshape(-1, pred.shape[-1]), gold.reshape(-1), reduction="none")
    return (losses * mask.reshape(-1)).sum() / mask.sum()


@dataclass
class TrainResult:
    model: GclModel
    tokenizer: Tokenizer
    metrics: list[dict] = field(default_factory=list)


def _build_tokenizer(dataset) -> Tokenizer:
    corpus = []
    for scene in dataset:
        for qa in scene.qa:
            corpus.append(qa.question)
            corpus.append(qa.answer)
        for obj in scene.objects:
            corpus.extend(obj.ocr_texts)
    return Tokenizer.from_corpus(corpus)


def train(dataset: list[ChartScene], cfg: TrainConfig,
          cls_vocab=DEFAULT_CLS_VOCAB, metrics_path=None) -> TrainResult:
    """Joint training over synthetic scenes; deterministic under cfg.seed."""
    if not dataset:
        raise TrainError("empty dataset")
    grids = {s.grid_shape for s in dataset}
    if len(grids) != 1:
        raise TrainError(f"scenes disagree on patch grid: {sorted(grids)}")
    qa_scenes = [s for s in dataset if s.qa]
    if not qa_scenes:
        raise TrainError("no scene carries QA records")

    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_inner(qa_scenes, cfg, cls_vocab, metrics_path)
    finally:
        torch.set_num_threads(n_threads)


def _train_inner(dataset, cfg, cls_vocab, metrics_path) -> TrainResult:
    torch.manual_seed(cfg.seed)
    tokenizer = _build_tokenizer(dataset)
    rows, cols = dataset[0].grid_shape
    backbone_cfg = BackboneConfig(
        d_model=cfg.d_model, n_heads=cfg.n_heads,
        n_enc_layers=cfg.n_enc_layers, n_dec_layers=cfg.n_dec_layers,
        ffn_dim=cfg.ffn_dim,
        patch_in_dim=len(cls_vocab) + 1 + cfg.hash_dim,
        n_patches=rows * cols, vocab_size=len(tokenizer),
        n_prompt_slots=cfg.n_prompt_slots, max_text_len=cfg.max_text_len)
    model = GclModel(cfg, backbone_cfg)
    if cfg.freeze_encoder:
        for p in model.backbone.patch_proj.parameters():
            p.requires_grad_(False)
        for p in model.backbone.encoder.parameters():
            p.requires_grad_(False)
        model.backbone.enc_pos.requires_grad_(False)

    embedder = StubEmbedder(cfg.stub_dim, seed=cfg.seed)
    bundles = [prepare_scene(s, cfg, embedder, cls_vocab) for s in dataset]
    samples = []  # (bundle_idx, question_ids, answer_ids)
    for i, s in enumerate(dataset):
        for qa in s.qa:
            samples.append((i, tokenizer.encode(qa.question),
                            tokenizer.encode(qa.answer)))

    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(cfg.steps):
            picks = rng.integers(0, len(samples), size=cfg.batch_size)
            batch = [samples[int(i)] for i in picks]
            l_task, l_cl = _train_step(model, bundles, batch, tokenizer, step)
            loss = l_task + cfg.lam * l_cl
            if not torch.isfinite(loss):
                raise TrainError(
                    f"training diverged at step {step}: "
                    f"L_task={float(l_task)} l_cl={float(l_cl)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = {"step": step, "L_task": float(l_task),
                       "l_cl": float(l_cl), "lr": cfg.lr}
                metrics.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(model=model, tokenizer=tokenizer, metrics=metrics)


def _train_step(model: GclModel, bundles, batch, tokenizer, step):
    cfg = model.cfg
    scene_ids = sorted({i for i, _, _ in batch})
    patch = torch.as_tensor(
        np.stack([bundles[i].patch_feats for i in scene_ids]),
        dtype=torch.float32)
    h_e = model.backbone.encode_patches(patch)
    row_of = {i: r for r, i in enumerate(scene_ids)}

    want_cl = cfg.use_graph and cfg.lam > 0
    prompts = {}
    cl_terms = []
    for i in scene_ids:
        if cfg.use_graph:
            h_v, h_t, h_v_aug, h_t_aug = _encode_scene_graphs(
                model, bundles[i], h_e[row_of[i]], step, i,
                augmented=want_cl and (cfg.intra_cl or cfg.inter_uses_augmented))
            if want_cl:
                cl_terms.append(_contrastive_term(
                    model, bundles[i], h_v, h_t, h_v_aug, h_t_aug))
        else:
            h_v = h_t = None
        prompts[i] = _scene_prompt(model, bundles[i], h_v, h_t)

    prompt_batch = torch.stack([prompts[i] for i, _, _ in batch])
    memory = torch.stack([h_e[row_of[i]] for i, _, _ in batch])
    tokens, target_mask, pad_mask = _pack_tokens(
        [(q, a) for _, q, a in batch], tokenizer)
    logits = model.backbone.decode(prompt_batch, tokens, memory, pad_mask)
    l_task = _task_loss(logits, tokens, target_mask, cfg.n_prompt_slots)
    l_cl = (torch.stack(cl_terms).mean() if cl_terms
            else torch.zeros((), dtype=l_task.dtype))
    return l_task, l_cl


@torch.no_grad()
def generate(model: GclModel, tokenizer: Tokenizer, scene: ChartScene,
             question: str, cls_vocab=DEFAULT_CLS_VOCAB, max_new: int = 32,
             bundle: SceneBundle | None = None) -> str:
    """Greedy decode until EOS or ``max_new`` tokens."""
    model.eval()
    cfg = model.cfg
    if bundle is None:
        bundle = prepare_scene(scene, cfg, StubEmbedder(cfg.stub_dim, cfg.seed),
                               cls_vocab)
    patch = torch.as_tensor(bundle.patch_feats, dtype=torch.float32)[None]
    h_e = model.backbone.encode_patches(patch)
    if cfg.use_graph:
        h_v, h_t, _, _ = _encode_scene_graphs(model, bundle, h_e[0], 0, 0, False)
    else:
        h_v = h_t = None
    prompt = _scene_prompt(model, bundle, h_v, h_t)[None]
    ids = tokenizer.encode(question) + [tokenizer.sep_id]
    start = len(ids)
    for _ in range(max_new):
        tokens = torch.tensor([ids], dtype=torch.long)
        logits = model.backbone.decode(prompt, tokens, h_e)
        nxt = int(logits[0, -1].argmax())
        if nxt == tokenizer.eos_id:
            break
        ids.append(nxt)
        if len(ids) >= cfg.max_text_len:
            break
    return tokenizer.decode(ids[start:])


def save_checkpoint(path, result: TrainResult, cls_vocab=DEFAULT_CLS_VOCAB) -> None:
    """Binary checkpoint: length-prefixed JSON header + float32 LE tensors."""
    model = result.model
    state = model.state_dict()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = json.dumps({
        "train_config": asdict(model.cfg),
        "backbone_config": asdict(model.backbone_cfg),
        "vocab": result.tokenizer.vocab,
        "cls_vocab": list(cls_vocab),
        "tensors": manifest,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for v in state.values():
            f.write(v.detach().to(torch.float32).numpy()
                    .astype("<f4").tobytes())


def load_checkpoint(path):
    """Rebuild (TrainResult, cls_vocab) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise TrainError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = TrainConfig(**header["train_config"])
        backbone_cfg = BackboneConfig(**header["backbone_config"])
        model = GclModel(cfg, backbone_cfg)
        state = {}
        for entry in header["tensors"]:
            shape = entry["shape"]
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            arr = np.frombuffer(buf, dtype="<f4", count=count).reshape(shape)
            state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    tokenizer = Tokenizer(header["vocab"])
    result = TrainResult(model=model, tokenizer=tokenizer)
    return result, tuple(header["cls_vocab"])
