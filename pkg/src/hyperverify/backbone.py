"""Frozen embedding backbone and its desk-scale reference trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledImageSet
from .optim import SGD, LRSchedule
from .tensor import ConfigError, ShapeError, Tensor

log = logging.getLogger(__name__)

RMS_EPS = 1e-8


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 128)
    epochs: int = 12
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    logit_scale: float = 16.0
    seed: int = 0


def _conv_shapes(channels, in_channels=3):
    cin = in_channels
    for i, cout in enumerate(channels):
        yield i, (cout, cin, 3, 3)
        cin = cout


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for i, shape in _conv_shapes(cfg.channels):
        fan_in = shape[1] * 9
        params[f"conv{i}.weight"] = rng.normal(size=shape) * np.sqrt(2.0 / fan_in)
        params[f"conv{i}.bias"] = np.zeros(shape[0])
    c = cfg.channels[-1]
    params["proj.weight"] = rng.normal(size=(c, cfg.embed_dim)) / np.sqrt(c)
    params["proj.bias"] = np.zeros(cfg.embed_dim)
    return params


def _forward(params: dict[str, Tensor], images: np.ndarray, n_conv: int) -> Tensor:
    """Un-normalized embeddings ``[N, d]`` for ``[N, 3, h, w]`` images."""
    h = Tensor(np.ascontiguousarray(np.moveaxis(images, 0, -1))[None])  # 1,C,h,w,N
    for i in range(n_conv):
        w = T.reshape(params[f"conv{i}.weight"], (1,) + params[f"conv{i}.weight"].shape)
        b = T.reshape(params[f"conv{i}.bias"], (1, -1))
        h = T.conv2d_multi(h, w, b, stride=2, padding=1)
        h = T.gelu(T.rms_norm_nonparam(h, RMS_EPS, axes=(2, 3)))
    feats = T.mean(h, axis=(2, 3))  # 1,C,N
    feats = T.transpose(T.reshape(feats, feats.shape[1:]), (1, 0))
    return T.matmul(feats, params["proj.weight"]) + params["proj.bias"]


class EmbeddingBackbone:
    """Maps ``[3, h, w]`` images in [-1, 1] to unit-norm ``d``-dim embeddings.

    Parameters never require gradients and are not exposed mutably.
    """

    frozen = True

    def __init__(self, params: dict[str, np.ndarray], input_size: int, channels,
                 embed_dim: int, provenance: str = "reference-trained"):
        self.input_size = int(input_size)
        self.channels = tuple(int(c) for c in channels)
        self.embed_dim = int(embed_dim)
        self.provenance = provenance
        self._params = {}
        for k, v in params.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            self._params[k] = Tensor(arr, requires_grad=False)
        expect = {f"conv{i}.{s}" for i in range(len(self.channels)) for s in ("weight", "bias")}
        expect |= {"proj.weight", "proj.bias"}
        if set(self._params) != expect:
            raise ConfigError(f"backbone parameter names mismatch: {sorted(set(self._params) ^ expect)}")
        if self._params["proj.weight"].shape[1] != self.embed_dim:
            raise ShapeError("projection width does not match embed_dim")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (3, self.input_size, self.input_size)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def config(self) -> dict:
        return {"input_size": self.input_size, "channels": list(self.channels),
                "embed_dim": self.embed_dim, "provenance": self.provenance}

    def embed_batch(self, images, chunk: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise ShapeError(f"backbone expects [N, {self.input_shape}], got {images.shape}")
        out = []
        with T.no_grad():
            for s in range(0, len(images), chunk):
                e = _forward(self._params, images[s: s + chunk], len(self.channels)).data
                out.append(e / np.linalg.norm(e, axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim))

    def embed(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.input_shape:
            raise ShapeError(f"backbone expects {self.input_shape}, got {image.shape}")
        return self.embed_batch(image[None])[0]


def embed(backbone: EmbeddingBackbone, image) -> np.ndarray:
    return backbone.embed(image)


def train_reference_backbone(dataset: LabeledImageSet, config: BackboneConfig = BackboneConfig(),
                             progress=None) -> tuple[EmbeddingBackbone, dict]:
    """Train the small conv embedder with a cosine softmax head, then freeze it.

    Returns the backbone and a summary with the final training accuracy. The
    head is discarded. Weights are rounded to float32 on freezing so the
    on-disk form is exact.
    """
    if dataset.num_identities < 2:
        raise ConfigError("reference backbone needs at least 2 identities")
    counts = np.bincount(dataset.labels, minlength=dataset.num_identities)
    if counts.min() < 2:
        raise ConfigError("reference backbone needs at least 2 images per identity")
    size = dataset.image_shape[1]
    rng = np.random.default_rng(config.seed)
    params = {k: Tensor(v, requires_grad=True)
              for k, v in init_backbone_params(config, rng).items()}
    head = Tensor(rng.normal(size=(config.embed_dim, dataset.num_identities)) * 0.01,
                  requires_grad=True)
    trainable = list(params.values()) + [head]
    n = len(dataset)
    steps_per_epoch = max(1, n // config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = SGD(trainable, LRSchedule(config.lr, warmup=min(100, total // 10), total_steps=total),
              momentum=config.momentum, weight_decay=config.weight_decay)
    n_conv = len(config.channels)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        correct = seen = 0
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size: (s + 1) * config.batch_size]
            emb = T.l2_normalize(_forward(params, dataset.images[idx], n_conv))
            logits = T.matmul(emb, T.l2_normalize(T.transpose(head, (1, 0)))
                              .transpose(1, 0)) * config.logit_scale
            loss = T.cross_entropy(logits, dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.data.argmax(1) == dataset.labels[idx]).sum())
            seen += len(idx)
        if progress:
            progress(epoch, float(loss.data), correct / seen)
        log.info("backbone epoch %d loss %.4f acc %.3f", epoch, float(loss.data), correct / seen)
    frozen = {k: v.data.astype(np.float32).astype(np.float64) for k, v in params.items()}
    bb = EmbeddingBackbone(frozen, size, config.channels, config.embed_dim)
    acc = classification_accuracy(bb, head.data, dataset)
    return bb, {"train_accuracy": acc, "epochs": config.epochs}


def classification_accuracy(bb: EmbeddingBackbone, head: np.ndarray, ds: LabeledImageSet) -> float:
    emb = bb.embed_batch(ds.images)
    w = head / np.linalg.norm(head, axis=0, keepdims=True)
    return float(((emb @ w).argmax(1) == ds.labels).mean())
