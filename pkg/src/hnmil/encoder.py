"""Instance encoder: an affine+relu stack plus a projection head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


@dataclass
class EncoderParams:
    weights: list[Tensor]
    biases: list[Tensor]
    proj: Tensor
    normalize: bool = True

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def proj_dim(self) -> int:
        return self.proj.shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out + [self.proj]

    def arch(self) -> dict:
        widths = [self.d_in] + [W.shape[1] for W in self.weights]
        return {"widths": widths, "proj_dim": self.proj_dim, "normalize": self.normalize}

    def state(self) -> dict[str, np.ndarray]:
        st = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            st[f"W{i}"] = W.data
            st[f"b{i}"] = b.data
        st["proj"] = self.proj.data
        return st

    @classmethod
    def from_state(cls, arch: dict, state: dict[str, np.ndarray]) -> "EncoderParams":
        n = len(arch["widths"]) - 1
        return cls(
            [Tensor(state[f"W{i}"].copy(), requires_grad=True) for i in range(n)],
            [Tensor(state[f"b{i}"].copy(), requires_grad=True) for i in range(n)],
            Tensor(state["proj"].copy(), requires_grad=True),
            bool(arch.get("normalize", True)),
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams.from_state(self.arch(), self.state())


def init_encoder(d_in: int, hidden: list[int], embed_dim: int, proj_dim: int,
                 seed: int, normalize: bool = True) -> EncoderParams:
    """He-normal weights, zero biases."""
    if embed_dim < 2:
        raise ValueError("embed_dim must be >= 2")
    rng = np.random.default_rng(seed)
    widths = [d_in, *hidden, embed_dim]
    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        Ws.append(Tensor(rng.standard_normal((a, b)) * np.sqrt(2.0 / a), requires_grad=True))
        bs.append(Tensor(np.zeros(b), requires_grad=True))
    P = Tensor(rng.standard_normal((embed_dim, proj_dim)) * np.sqrt(1.0 / embed_dim), requires_grad=True)
    return EncoderParams(Ws, bs, P, normalize)


def encode(params: EncoderParams, features) -> Tensor:
    """Embed one instance ``[d_in]`` or a batch ``[n, d_in]``; relu after every layer."""
    x = nx.as_tensor(features)
    single = x.data.ndim == 1
    if x.shape[-1] != params.d_in:
        raise DimensionError(f"encode: feature dim {x.shape[-1]} != encoder d_in {params.d_in}")
    h = nx.reshape(x, (1, -1)) if single else x
    for W, b in zip(params.weights, params.biases):
        h = nx.relu(nx.affine(h, W, b))
    return nx.reshape(h, (h.shape[1],)) if single else h


def project(params: EncoderParams, embedding, eps: float | None = None) -> Tensor:
    """Map embeddings to the contrastive space; unit norm unless disabled.

    A zero pre-normalization vector raises unless ``eps`` is given.
    """
    h = nx.as_tensor(embedding)
    if h.shape[-1] != params.embed_dim:
        raise DimensionError(f"project: embedding dim {h.shape[-1]} != {params.embed_dim}")
    z = nx.matmul(h, params.proj)
    return nx.l2_normalize(z, axis=-1, eps=eps) if params.normalize else z


def embed_array(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Inference-only embedding, no graph recorded."""
    h = np.asarray(features, dtype=np.float64)
    for W, b in zip(params.weights, params.biases):
        h = np.maximum(h @ W.data + b.data, 0.0)
    return h
