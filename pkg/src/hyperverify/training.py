"""Losses, schedules and the hypernetwork training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, EmbeddingBackbone, train_reference_backbone
from .config import RunConfig
from .data import LabeledImageSet, SynthConfig, load_image_dir, split_identities, synth_identity_dataset
from .hypernet import HyperNetwork, generate_weights, generate_weights_batch
from .kcs import (KCS, UNIFORM, BatchSampler, ClusterIndex, TrainingBatch,
                  compute_identity_centroids, default_k, kmeans)
from .optim import SGD, LRSchedule
from .tensor import ConfigError, ShapeError, Tensor
from .verifier import (VerifierArchitecture, WeightSet, batched_predict, count_params,
                       forward_logits, get_architecture, predict_pairs, to_sample_last)

log = logging.getLogger(__name__)

__all__ = [
    "TrainingBatch", "target_matrix", "lambda_factor", "weighted_bce", "norm_loss", "total_loss",
    "Schedule", "HyperVerifierSystem", "train_step", "train", "train_direct_baseline",
]


# ------------------------------------------------------------------ losses


def target_matrix(M, nB: int | None = None) -> np.ndarray:
    """``Y[j, k] = 1`` iff samples ``j`` and ``k`` share an identity."""
    M = np.asarray(M)
    if nB is not None and len(M) != nB:
        raise ShapeError(f"identity mapper has {len(M)} entries, expected {nB}")
    return (M[:, None] == M[None, :]).astype(np.float64)


def lambda_factor(B: int, beta: float) -> float:
    """Positive-class weight ``1 - beta / B``."""
    if B < 2:
        raise ConfigError(f"need at least 2 identities per batch, got B={B}")
    if not 0 < beta < B:
        raise ConfigError(f"beta={beta} must lie in (0, B={B}) or the positive weight vanishes")
    return 1.0 - beta / B


def weighted_bce(Yhat: Tensor, Y, lam: float, eps: float = 1e-7) -> Tensor:
    """Class-weighted BCE summed over the prediction matrix and divided by its side ``nB``."""
    Y = np.asarray(Y)
    if Yhat.shape != Y.shape or Yhat.ndim != 2:
        raise ShapeError(f"prediction {Yhat.shape} and target {Y.shape} must be equal square matrices")
    p = T.clamp(Yhat, eps, 1.0 - eps)
    pos = T.log(p) * (lam * Y).astype(Yhat.dtype)
    neg = T.log(1.0 - p) * ((1.0 - lam) * (1.0 - Y)).astype(Yhat.dtype)
    return -T.tsum(pos + neg) * (1.0 / Y.shape[0])


def norm_loss(thetas: Tensor) -> Tensor:
    """Mean over rows of the squared L2 norm of each generated weight vector."""
    return T.tsum(thetas * thetas) * (1.0 / thetas.shape[0])


def total_loss(bce, norm, alpha_norm: float):
    if alpha_norm < 0:
        raise ConfigError("alpha_norm must be non-negative")
    return bce + norm * alpha_norm


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    initial_B: int = 4
    doubling_fractions: tuple[float, ...] = (0.1, 0.2, 0.3)
    alpha_start: float = 1e-6
    alpha_end: float = 1e-4
    alpha_ramp_fraction: float = 0.5
    kcs_start: int = 400
    use_kcs: bool = True

    @classmethod
    def from_config(cls, c: RunConfig) -> Schedule:
        return cls(c.steps, c.initial_B, tuple(c.doubling_fractions), c.alpha_start, c.alpha_end,
                   c.alpha_ramp_fraction, c.kcs_start, c.use_kcs)

    @property
    def milestones(self) -> list[int]:
        return [int(round(f * self.total_steps)) for f in self.doubling_fractions]

    @property
    def final_B(self) -> int:
        return self.initial_B * 2 ** len(self.doubling_fractions)

    def batch_identities(self, step: int) -> int:
        return self.initial_B * 2 ** sum(step >= m for m in self.milestones)

    def alpha_norm(self, step: int) -> float:
        ramp = self.alpha_ramp_fraction * self.total_steps
        frac = 1.0 if ramp <= 0 else min(step / ramp, 1.0)
        return self.alpha_start + frac * (self.alpha_end - self.alpha_start)

    def sampling_mode(self, step: int) -> str:
        return KCS if self.use_kcs and step >= self.kcs_start else UNIFORM


# ------------------------------------------------------------------ system


@dataclass
class HyperVerifierSystem:
    """Frozen backbone plus weight generator plus the verifier architecture."""

    backbone: EmbeddingBackbone
    hypernet: HyperNetwork
    arch: VerifierArchitecture
    threshold: float = 0.5

    def enroll(self, image) -> WeightSet:
        return generate_weights(self.hypernet, self.backbone.embed(image))

    def thetas_for(self, images, chunk: int = 256) -> np.ndarray:
        emb = self.backbone.embed_batch(images).astype(self.hypernet.dtype)
        with T.no_grad():
            return np.concatenate([self.hypernet(emb[s: s + chunk]).data
                                   for s in range(0, len(emb), chunk)])

    def score_with_thetas(self, thetas: np.ndarray, probes, chunk: int = 256) -> np.ndarray:
        probes = np.asarray(probes, dtype=thetas.dtype)
        return np.concatenate([predict_pairs(self.arch, probes[s: s + chunk], thetas[s: s + chunk])
                               for s in range(0, len(probes), chunk)])

    def score_pairs(self, enroll, probe) -> np.ndarray:
        return self.score_with_thetas(self.thetas_for(enroll), probe)


# ---------------------------------------------------------------- training


def train_step(system: HyperVerifierSystem, batch: TrainingBatch, optimizer: SGD,
               alpha_norm: float, beta: float = 2.0, use_norm_loss: bool = True,
               bce_eps: float = 1e-7) -> dict:
    """One forward/backward/update over the full nB x nB prediction matrix."""
    if batch.embeddings is None:
        batch.embeddings = system.backbone.embed_batch(batch.X)
    lam = lambda_factor(batch.B, beta)
    dtype = system.hypernet.dtype
    thetas = generate_weights_batch(system.hypernet, batch)
    Yhat = batched_predict(system.arch, batch.X.astype(dtype, copy=False), thetas)
    Y = target_matrix(batch.M, batch.size)
    bce = weighted_bce(Yhat, Y, lam, bce_eps)
    nl = norm_loss(thetas)
    alpha = alpha_norm if use_norm_loss else 0.0
    loss = total_loss(bce, nl, alpha)
    optimizer.zero_grad()
    T.backward(loss)
    lr = optimizer.step()
    return {"loss": float(loss.data), "bce": float(bce.data), "norm": float(nl.data),
            "lambda": lam, "alpha_norm": alpha, "lr": lr, "batch_size": batch.B,
            "samples": batch.size, "sampling_mode": batch.mode}


@dataclass
class Prepared:
    train: LabeledImageSet
    val: LabeledImageSet
    test: LabeledImageSet
    backbone: EmbeddingBackbone
    backbone_info: dict = field(default_factory=dict)
    train_embeddings: np.ndarray | None = None

    def embeddings(self) -> np.ndarray:
        if self.train_embeddings is None:
            self.train_embeddings = self.backbone.embed_batch(self.train.images)
        return self.train_embeddings


def synth_config_from(c: RunConfig) -> SynthConfig:
    return SynthConfig(identities=c.identities, samples_per_identity=c.samples_per_identity,
                       image_size=c.image_size, latent_dim=c.latent_dim, max_shift=c.max_shift,
                       brightness=c.brightness, noise_sigma=c.noise_sigma, families=c.families,
                       family_spread=c.family_spread, seed=c.data_seed)


def prepare(config: RunConfig) -> Prepared:
    """Dataset, identity-disjoint splits and the frozen backbone for a run."""
    if config.data_dir:
        ds = load_image_dir(config.data_dir, config.image_size)
    else:
        ds = synth_identity_dataset(synth_config_from(config))
    train_ds, val_ds, test_ds = split_identities(ds, config.split, config.split_seed)
    if config.backbone_path:
        from .modelio import load_backbone

        bb, info = load_backbone(config.backbone_path), {"source": config.backbone_path}
        if bb.input_size != config.image_size:
            raise ConfigError(f"backbone expects {bb.input_size}px images, config has {config.image_size}")
    else:
        bb, info = train_reference_backbone(train_ds, BackboneConfig(
            embed_dim=config.embed_dim, channels=tuple(config.backbone_channels),
            epochs=config.backbone_epochs, lr=config.backbone_lr,
            batch_size=config.backbone_batch, seed=config.seed))
    return Prepared(train_ds, val_ds, test_ds, bb, info)


def build_cluster_index(prepared: Prepared, config: RunConfig) -> ClusterIndex:
    cents = compute_identity_centroids(prepared.train, embeddings=prepared.embeddings())
    k = config.kmeans_k or default_k(prepared.train.num_identities)
    return kmeans(np.stack([c.embedding for c in cents]), k, config.kmeans_iters, config.seed)


@dataclass
class TrainResult:
    system: HyperVerifierSystem
    log: list[dict]
    prepared: Prepared
    config: RunConfig
    cluster_index: ClusterIndex | None = None


def _snap_float32(params: list[Tensor]):
    for p in params:
        p.data = p.data.astype(np.float32).astype(p.data.dtype)


def train(config: RunConfig, prepared: Prepared | None = None, log_path: str | Path | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Full schedule: uniform warm-up, batch doublings, alpha ramp, then KCS batches."""
    prepared = prepared or prepare(config)
    dtype = np.dtype(config.dtype)
    arch = get_architecture(config.arch, config.image_size)
    hn = HyperNetwork(prepared.backbone.embed_dim, arch, config.hidden, config.final_init_scale,
                      seed=config.seed, dtype=dtype)
    system = HyperVerifierSystem(prepared.backbone, hn, arch, config.threshold)
    schedule = Schedule.from_config(config)
    if schedule.final_B > prepared.train.num_identities:
        raise ConfigError(f"final batch of {schedule.final_B} identities exceeds the "
                          f"{prepared.train.num_identities} training identities")
    lambda_factor(schedule.initial_B, config.beta)
    opt = SGD(hn.parameters(), LRSchedule(config.lr, config.warmup, config.steps),
              momentum=config.momentum, weight_decay=config.weight_decay)
    train_ds = prepared.train
    images = train_ds.images.astype(dtype)
    sampler = BatchSampler(LabeledImageSet(images, train_ds.labels, train_ds.identity_names, "train"),
                           None, prepared.embeddings().astype(dtype))
    rng = np.random.default_rng([config.seed, 1])
    records = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    index = None
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            mode = schedule.sampling_mode(step)
            if mode == KCS and index is None:
                index = build_cluster_index(prepared, config)
                sampler._set_index(index)
            batch = sampler.sample(schedule.batch_identities(step), config.n, mode, rng)
            m = train_step(system, batch, opt, schedule.alpha_norm(step), config.beta,
                           config.use_norm_loss, config.bce_eps)
            rec = {"step": step, "loss": m["loss"], "bce": m["bce"], "norm": m["norm"],
                   "lambda": m["lambda"], "lr": m["lr"], "batch_size": m["batch_size"],
                   "sampling_mode": m["sampling_mode"], "seconds": time.perf_counter() - t0}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
            if not np.isfinite(m["loss"]):
                raise FloatingPointError(f"loss diverged at step {step}")
    finally:
        if fh:
            fh.close()
    _snap_float32(hn.parameters())
    return TrainResult(system, records, prepared, config, index)


# ------------------------------------------------------- direct baseline


class DirectVerifier:
    """One shared ``f`` trained without a hypernetwork.

    With no personal weights, verification compares the pooled trunk features
    of the two images; the head's weights act as per-feature weights of that
    comparison: ``sigmoid(sum_c w_c z1_c z2_c + b)`` on unit-normalized ``z``.
    """

    def __init__(self, arch: VerifierArchitecture, seed: int = 0, dtype=np.float64):
        self.arch = arch
        rng = np.random.default_rng(seed)
        theta = np.zeros(count_params(arch))
        ws = WeightSet(theta, arch.layout())
        for name, conv in arch.convs():
            w = ws[f"{name}.weight"]
            w[...] = rng.normal(size=w.shape) * np.sqrt(2.0 / np.prod(w.shape[1:]))
        ws["head.weight"][...] = 5.0
        ws["head.bias"][...] = -2.0
        self.theta = Tensor(theta.astype(dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.theta]

    @property
    def num_params(self) -> int:
        return self.theta.data.size

    def features(self, images) -> Tensor:
        """Unit-normalized pooled trunk features ``[N, C]``."""
        arch = self.arch
        x = to_sample_last(np.asarray(images, dtype=self.theta.dtype))
        th = T.reshape(self.theta, (1, -1))
        lay = arch.layout()
        h = x
        for name, conv in arch.convs():
            w = lay[f"{name}.weight"]
            b = lay[f"{name}.bias"]
            wt = T.reshape(th[:, w.offset: w.offset + w.size], (1,) + w.shape)
            bt = th[:, b.offset: b.offset + b.size]
            h = T.conv2d_multi(h, wt, bt, stride=conv.stride, padding=conv.padding, groups=conv.groups)
            if name != "stem":
                h = T.gelu(T.rms_norm_nonparam(h, 1e-8, axes=(2, 3)))
        feats = T.mean(h, axis=(2, 3))
        feats = T.transpose(T.reshape(feats, feats.shape[1:]), (1, 0))
        return T.l2_normalize(feats)

    def _head(self):
        lay = self.arch.layout()
        hw, hb = lay["head.weight"], lay["head.bias"]
        return (T.reshape(self.theta[hw.offset: hw.offset + hw.size], (-1,)),
                self.theta[hb.offset: hb.offset + hb.size])

    def predict_matrix(self, images) -> Tensor:
        z = self.features(images)
        w, b = self._head()
        return T.sigmoid(T.matmul(z * w, T.transpose(z, (1, 0))) + b)

    def score_pairs(self, enroll, probe) -> np.ndarray:
        with T.no_grad():
            za = self.features(enroll).data
            zb = self.features(probe).data
            w, b = self._head()
            logits = (za * w.data * zb).sum(1) + b.data
        return 1.0 / (1.0 + np.exp(-logits))


@dataclass
class BaselineResult:
    model: DirectVerifier
    log: list[dict]
    prepared: Prepared
    config: RunConfig


def train_direct_baseline(config: RunConfig, prepared: Prepared | None = None,
                          lr: float = 0.02) -> BaselineResult:
    """Train one shared ``f`` on the same weighted all-pairs objective and schedule."""
    prepared = prepared or prepare(config)
    dtype = np.dtype(config.dtype)
    arch = get_architecture(config.arch, config.image_size)
    model = DirectVerifier(arch, seed=config.seed, dtype=dtype)
    schedule = Schedule.from_config(config)
    opt = SGD(model.parameters(), LRSchedule(lr, config.warmup, config.steps),
              momentum=config.momentum, weight_decay=config.weight_decay)
    sampler = BatchSampler(prepared.train, None, prepared.embeddings())
    rng = np.random.default_rng([config.seed, 1])
    records = []
    for step in range(config.steps):
        mode = schedule.sampling_mode(step)
        if mode == KCS and sampler.index is None:
            sampler._set_index(build_cluster_index(prepared, config))
        batch = sampler.sample(schedule.batch_identities(step), config.n, mode, rng)
        lam = lambda_factor(batch.B, config.beta)
        Yhat = model.predict_matrix(batch.X)
        loss = weighted_bce(Yhat, target_matrix(batch.M), lam, config.bce_eps)
        opt.zero_grad()
        T.backward(loss)
        records.append({"step": step, "loss": float(loss.data), "lr": opt.step(),
                        "batch_size": batch.B, "sampling_mode": mode})
    return BaselineResult(model, records, prepared, config)
