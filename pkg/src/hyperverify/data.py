"""Desk-scale identity datasets: a seeded synthetic generator and an image-folder loader."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".npy")


class DataError(RuntimeError):
    """A file or identity in the dataset is unusable."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, 3, h, w] in [-1, 1]
    labels: np.ndarray  # [N] contiguous 0..I-1
    identity_names: list[str]  # label -> stable name
    split: str = "all"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and set(np.unique(self.labels)) != set(range(len(self.identity_names))):
            raise DataError("labels must cover 0..I-1 exactly")

    def __len__(self):
        return len(self.labels)

    @property
    def num_identities(self) -> int:
        return len(self.identity_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def indices_by_identity(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.num_identities + 1))
        return [order[bounds[i]: bounds[i + 1]] for i in range(self.num_identities)]

    def subset_identities(self, labels: Sequence[int], split: str) -> LabeledImageSet:
        labels = sorted(int(i) for i in labels)
        remap = {old: new for new, old in enumerate(labels)}
        mask = np.isin(self.labels, labels)
        return LabeledImageSet(
            images=self.images[mask],
            labels=np.array([remap[int(i)] for i in self.labels[mask]], dtype=np.int64),
            identity_names=[self.identity_names[i] for i in labels],
            split=split,
            provenance=dict(self.provenance),
        )


# ------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic identity generator settings.

    Identity latents are drawn around ``families`` shared centers (spread
    ``family_spread``) so that look-alike identities exist.
    """

    identities: int = 200
    samples_per_identity: int = 20
    image_size: int = 32
    latent_dim: int = 16
    max_shift: int = 3
    brightness: float = 0.2
    noise_sigma: float = 0.05
    families: int = 20
    family_spread: float = 0.6
    max_frequency: int = 3
    seed: int = 0
    decoder_seed: int = 1234

    def __post_init__(self):
        if self.identities < 2:
            raise ConfigError("need at least 2 identities")
        if min(self.max_shift, self.brightness, self.noise_sigma, self.family_spread) < 0:
            raise ConfigError("nuisance magnitudes must be non-negative")
        if self.samples_per_identity < 1 or self.image_size < 4 or self.families < 1:
            raise ConfigError(f"invalid synthetic config {self}")

    def key(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class _SmoothDecoder:
    """Fixed random map from a latent vector to a smooth periodic RGB texture."""

    def __init__(self, latent_dim: int, size: int, max_frequency: int, seed: int):
        rng = np.random.default_rng(seed)
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        basis, amp = [], []
        for fy in range(max_frequency + 1):
            for fx in range(-max_frequency, max_frequency + 1):
                if fy == 0 and fx <= 0:
                    continue
                phase = 2 * np.pi * (fy * yy + fx * xx) / size
                for fn in (np.cos, np.sin):
                    basis.append(fn(phase))
                    amp.append(1.0 / np.hypot(fy, fx))
        self.basis = np.stack(basis)  # [F, h, w]
        amp = np.asarray(amp)
        nf = len(basis)
        hidden = 64
        self.w1 = rng.normal(size=(hidden, latent_dim)) / np.sqrt(latent_dim)
        self.b1 = rng.normal(size=hidden) * 0.1
        self.w2 = rng.normal(size=(3, nf, hidden)) / np.sqrt(hidden) * amp[None, :, None]
        self.bias = rng.normal(size=3) * 0.2

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = np.tanh(self.w1 @ z + self.b1)
        coef = self.w2 @ h  # [3, F]
        img = np.einsum("cf,fhw->chw", coef, self.basis) + self.bias[:, None, None]
        return np.tanh(1.2 * img)


def synth_identity_dataset(config: SynthConfig = SynthConfig(),
                           cache_dir: str | Path | None = None) -> LabeledImageSet:
    """Deterministic synthetic identities: one base texture each plus per-sample nuisances.

    Each sample applies a circular shift of up to ``max_shift`` pixels, a
    brightness factor in ``1 +/- brightness`` and Gaussian pixel noise.
    """
    if cache_dir is not None:
        path = Path(cache_dir) / f"synth-{config.key()}.npz"
        if path.exists():
            with np.load(path) as z:
                return _synth_set(config, z["images"], z["labels"])
    dec = _SmoothDecoder(config.latent_dim, config.image_size, config.max_frequency,
                         config.decoder_seed)
    rng = np.random.default_rng(config.seed)
    centers = rng.normal(size=(config.families, config.latent_dim))
    family = rng.integers(0, config.families, size=config.identities)
    latents = centers[family] + config.family_spread * rng.normal(
        size=(config.identities, config.latent_dim))
    n, s = config.identities, config.samples_per_identity
    images = np.empty((n * s, 3, config.image_size, config.image_size))
    labels = np.repeat(np.arange(n), s)
    for i in range(n):
        base = dec(latents[i])
        for k in range(s):
            dy, dx = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
            gain = 1.0 + rng.uniform(-config.brightness, config.brightness)
            img = np.roll(base, (int(dy), int(dx)), axis=(1, 2)) * gain
            img = img + config.noise_sigma * rng.normal(size=img.shape)
            images[i * s + k] = np.clip(img, -1.0, 1.0)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.savez(Path(cache_dir) / f"synth-{config.key()}.npz", images=images, labels=labels)
    return _synth_set(config, images, labels)


def _synth_set(config: SynthConfig, images, labels) -> LabeledImageSet:
    names = [f"id{i:05d}" for i in range(config.identities)]
    return LabeledImageSet(images, labels, names, "all",
                           {"source": "synthetic", **dataclasses.asdict(config)})


# ------------------------------------------------------------- file loading


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read one PNG or ``.npy`` float image as ``[3, size, size]`` in [-1, 1]."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path).astype(np.float64)
            if arr.ndim != 3 or arr.shape[0] != 3:
                raise DataError(f"{path}: expected a [3, h, w] array, got {arr.shape}")
            if size is not None and arr.shape[1:] != (size, size):
                arr = np.stack([_resize_plane(c, size) for c in arr])
            return arr
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as im:
                im = im.convert("RGB")
                if size is not None and im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64)
            return arr.transpose(2, 0, 1) / 127.5 - 1.0
    except DataError:
        raise
    except Exception as exc:  # decoder errors vary by format
        raise DataError(f"cannot read image {path}: {exc}") from exc
    raise DataError(f"unsupported image format: {path}")


def _resize_plane(plane: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    im = Image.fromarray(plane.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)


def save_image(path: str | Path, image: np.ndarray):
    """Write a ``[3, h, w]`` image as ``.npy`` (exact) or ``.png`` (8-bit)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, np.asarray(image, dtype=np.float64))
    else:
        from PIL import Image

        arr = np.clip((np.asarray(image).transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
        Image.fromarray(np.round(arr).astype(np.uint8)).save(path)


def load_image_dir(root: str | Path, size: int) -> LabeledImageSet:
    """Load ``root/<identity>/<image>`` with identities in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    images, labels, names = [], [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in sub.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            log.warning("skipping empty identity folder %s", sub)
            continue
        for f in files:
            images.append(load_image(f, size))
            labels.append(len(names))
        names.append(sub.name)
    if not names:
        raise DataError(f"no identity folders with images under {root}")
    return LabeledImageSet(np.stack(images), np.asarray(labels), names, "all",
                           {"source": str(root)})


def save_image_dir(ds: LabeledImageSet, root: str | Path, suffix: str = ".npy") -> list[Path]:
    root = Path(root)
    paths = []
    for idx, members in enumerate(ds.indices_by_identity()):
        d = root / ds.identity_names[idx]
        d.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(members):
            p = d / f"{k:04d}{suffix}"
            save_image(p, ds.images[i])
            paths.append(p)
    return paths


def split_identities(ds: LabeledImageSet, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Identity-disjoint (train, val, test) split."""
    fractions = np.asarray(fractions, dtype=float)
    if len(fractions) != 3 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = ds.num_identities
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{n} identities cannot be split {fractions.tolist()} without an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train: n_train + n_val], perm[n_train + n_val:])
    return tuple(ds.subset_identities(p, name) for p, name in zip(parts, ("train", "val", "test")))
