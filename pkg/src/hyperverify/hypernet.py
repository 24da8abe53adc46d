"""Weight generator: embedding in, flat verifier parameter vector out."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor
from .verifier import VerifierArchitecture, WeightSet, count_params

LN_EPS = 1e-5


class HyperNetwork:
    """``len(hidden) + 1`` linear layers; every hidden one is followed by LayerNorm and GeLU.

    The last layer maps to the ``p`` parameters of ``arch``. Its weights are
    scaled by ``final_scale`` and its bias is zero so freshly generated
    verifiers start out close to neutral.
    """

    def __init__(self, embed_dim: int, arch: VerifierArchitecture,
                 hidden: Sequence[int] = (256, 256, 256), final_scale: float = 0.01,
                 seed: int = 0, dtype=np.float64):
        self.embed_dim = int(embed_dim)
        self.arch = arch
        self.hidden = tuple(int(h) for h in hidden)
        self.final_scale = float(final_scale)
        self.p = count_params(arch)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        widths = (self.embed_dim,) + self.hidden + (self.p,)
        last = len(widths) - 2
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == last:
                w *= self.final_scale
                b[:] = 0.0
            self.params[f"fc{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            self.params[f"fc{i}.bias"] = Tensor(b.astype(dtype), requires_grad=True)
            if i < last:
                self.params[f"ln{i}.gain"] = Tensor(np.ones(fan_out, dtype), requires_grad=True)
                self.params[f"ln{i}.shift"] = Tensor(np.zeros(fan_out, dtype), requires_grad=True)

    @property
    def dtype(self):
        return self.params["fc0.weight"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_parameters(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            raise ConfigError(f"parameter names differ: {sorted(set(arrays) ^ set(self.params))}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def __call__(self, embeddings) -> Tensor:
        e = T.as_tensor(embeddings)
        if e.ndim != 2 or e.shape[1] != self.embed_dim:
            raise ShapeError(f"expected embeddings [N, {self.embed_dim}], got {e.shape}")
        h = e
        for i in range(len(self.hidden) + 1):
            h = T.matmul(h, self.params[f"fc{i}.weight"]) + self.params[f"fc{i}.bias"]
            if i < len(self.hidden):
                h = T.layer_norm(h, self.params[f"ln{i}.gain"], self.params[f"ln{i}.shift"], LN_EPS)
                h = T.gelu(h)
        return h

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "hidden": list(self.hidden),
                "final_scale": self.final_scale, "arch": self.arch.to_json()}


def generate_weights(hn: HyperNetwork, embedding) -> WeightSet:
    """Personal verifier weights for one enrollment embedding."""
    e = np.asarray(embedding, dtype=hn.dtype)
    if e.shape != (hn.embed_dim,):
        raise ShapeError(f"embedding of shape {e.shape}; hypernetwork expects ({hn.embed_dim},)")
    with T.no_grad():
        theta = hn(e[None]).data[0]
    return WeightSet(theta, hn.arch.layout())


def generate_weights_batch(hn: HyperNetwork, batch, backbone=None) -> Tensor:
    """``[nB, p]`` generated weights, one row per batch sample (differentiable).

    ``batch`` is a ``TrainingBatch`` carrying cached embeddings, or a raw
    ``[nB, d]`` embedding array. Without cached embeddings the images are
    pushed through ``backbone``.
    """
    emb = getattr(batch, "embeddings", None)
    if emb is None and hasattr(batch, "X"):
        if backbone is None:
            raise ConfigError("batch carries no embeddings and no backbone was given")
        emb = backbone.embed_batch(batch.X)
    elif emb is None:
        emb = batch
    return hn(np.asarray(emb, dtype=hn.dtype))


def enroll_multi(hn: HyperNetwork, backbone, images) -> WeightSet:
    """Average several enrollment embeddings, re-normalize, then generate."""
    images = list(images)
    if not images:
        raise ValueError("enroll_multi needs at least one image")
    emb = backbone.embed_batch(np.stack(images))
    # unique() sorts rows, so the float sum below is independent of image order
    rows, counts = np.unique(emb, axis=0, return_counts=True)
    if len(rows) == 1:
        return generate_weights(hn, rows[0])
    mean = (rows * counts[:, None]).sum(axis=0) / counts.sum()
    return generate_weights(hn, mean / np.linalg.norm(mean))
