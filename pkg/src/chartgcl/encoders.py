"""Graph encoders and text-feature embedders.

One GCN per modality (symmetric normalization with self-loops over the
weighted adjacency). Text features come from a deterministic stub embedder
by default; an HTTP client can swap in a real external encoder.
"""

import hashlib

import numpy as np
import torch
from torch import nn

from .graphs import Graph


class EncoderError(ValueError):
    pass


def normalized_adjacency(g: Graph, dtype=torch.float32) -> torch.Tensor:
    """Dense D^-1/2 (A + I) D^-1/2 over the graph's edge weights."""
    n = g.n_nodes
    a = torch.zeros((n, n), dtype=dtype)
    for s, d, w in g.edges:
        a[s, d] = w
        a[d, s] = w
    a += torch.eye(n, dtype=dtype)
    deg = a.sum(dim=1)
    inv_sqrt = deg.pow(-0.5)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


class GCN(nn.Module):
    """Stack of graph-convolution layers: H' = act(A_hat @ H @ W + b).

    ReLU between layers, none on the last. ``bias=False`` keeps the forward
    purely linear in the inputs (used by the linearity checks).
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 n_layers: int = 2, bias: bool = True):
        super().__init__()
        if n_layers < 1:
            raise EncoderError("n_layers must be >= 1")
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], bias=bias) for i in range(n_layers))

    def forward(self, feats: torch.Tensor, adj_norm: torch.Tensor) -> torch.Tensor:
        h = feats
        for i, layer in enumerate(self.layers):
            h = adj_norm @ layer(h)
            if i < len(self.layers) - 1:
                h = torch.relu(h)
        return h


def gcn_forward(g: Graph, model: GCN) -> torch.Tensor:
    """Encode a graph's node features; row order follows node order.

    Gradients w.r.t. model parameters and input features flow through the
    returned tensor via autograd.
    """
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(g.features), dtype=dtype)
    if not torch.isfinite(feats).all():
        raise EncoderError("non-finite node features")
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise EncoderError("non-finite GCN parameters")
    return model(feats, normalized_adjacency(g, dtype=dtype))


def stub_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm pseudo-embedding of a string.

    Stands in for an external text encoder: same (text, seed) always yields
    the same vector, distinct texts collide with negligible probability.
    """
    if dim <= 0:
        raise EncoderError("dim must be > 0")
    digest = hashlib.sha256(f"{seed}\x1f{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class StubEmbedder:
    """Caches stub embeddings per text."""

    backend = "deterministic-stub"

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = stub_embed(text, self.dim, self.seed)
        return self._cache[text]

    def embed_all(self, texts) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


class HTTPEmbedder:
    """Client for a local encoder service: {"texts": [...]} -> {"vectors": [[...]]}."""

    backend = "external-encoder"

    def __init__(self, url: str, dim: int, timeout: float = 10.0):
        self.url = url
        self.dim = dim
        self.timeout = timeout

    def embed(self, text: str) -> np.ndarray:
        return self.embed_all([text])[0]

    def embed_all(self, texts) -> np.ndarray:
        import requests

        resp = requests.post(self.url, json={"texts": list(texts)},
                             timeout=self.timeout)
        resp.raise_for_status()
        vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        if vectors.shape != (len(texts), self.dim):
            raise EncoderError(
                f"encoder service returned shape {vectors.shape}, "
                f"expected {(len(texts), self.dim)}")
        return vectors


def make_embedder(backend: str, dim: int, seed: int = 0, url: str | None = None):
    if backend == "deterministic-stub":
        return StubEmbedder(dim, seed)
    if backend == "external-encoder":
        if not url:
            raise EncoderError("external-encoder backend needs a url")
        return HTTPEmbedder(url, dim)
    raise EncoderError(f"unknown embedder backend {backend!r}")
