"""The personal verifier ``f``: a tiny grouped CNN whose weights come from outside.

All weights live in one flat vector ``theta``; :class:`ThetaLayout` maps it to
named, shaped tensors. Nothing here owns trainable state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

RMS_EPS = 1e-8


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide {self.in_channels} and {self.out_channels}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


Layer = Union[Conv, Linear]


@dataclass(frozen=True)
class LayerStack:
    """A plain sequence of conv/linear layers applied to a square input.

    Used for accounting only; ``Linear`` layers are assumed to follow a
    global pool.
    """

    input_size: int
    layers: tuple[Layer, ...]


def count_params(arch) -> int:
    """Exact number of parameters (weights and biases)."""
    stack = arch.stack() if hasattr(arch, "stack") else arch
    total = 0
    for layer in stack.layers:
        if isinstance(layer, Conv):
            total += int(np.prod(layer.weight_shape)) + layer.out_channels
        else:
            total += layer.in_features * layer.out_features + layer.out_features
    return total


def count_flops(arch) -> int:
    """Forward-pass FLOPs of conv and linear layers, 2 per multiply-accumulate plus bias adds.

    Normalization, activation and pooling are not counted, which is the usual
    convention of profiling tools.
    """
    stack = arch.stack() if hasattr(arch, "stack") else arch
    size = stack.input_size
    total = 0
    for layer in stack.layers:
        if isinstance(layer, Conv):
            size = T.conv_output_size(size, layer.kernel, layer.stride, layer.padding)
            outputs = size * size * layer.out_channels
            macs_per_out = (layer.in_channels // layer.groups) * layer.kernel ** 2
            total += outputs * (2 * macs_per_out + 1)
        else:
            total += 2 * layer.in_features * layer.out_features + layer.out_features
    return total


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ThetaLayout:
    entries: tuple[LayoutEntry, ...]

    @classmethod
    def from_shapes(cls, named_shapes: Sequence[tuple[str, tuple[int, ...]]]) -> ThetaLayout:
        entries, offset = [], 0
        for name, shape in named_shapes:
            e = LayoutEntry(name, tuple(int(s) for s in shape), offset)
            entries.append(e)
            offset += e.size
        return cls(tuple(entries))

    @property
    def size(self) -> int:
        return sum(e.size for e in self.entries)

    def __iter__(self) -> Iterator[LayoutEntry]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> LayoutEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "shape": list(e.shape)} for e in self.entries]


class WeightSet:
    """Flat parameter vector plus named views into it (views share memory)."""

    def __init__(self, flat: np.ndarray, layout: ThetaLayout):
        flat = np.asarray(flat)
        if flat.ndim != 1 or flat.size != layout.size:
            raise ConfigError(f"theta of shape {flat.shape} does not fit layout of size {layout.size}")
        self.flat = flat
        self.layout = layout

    def __getitem__(self, name: str) -> np.ndarray:
        e = self.layout[name]
        return self.flat[e.offset: e.offset + e.size].reshape(e.shape)

    def items(self):
        return [(e.name, self[e.name]) for e in self.layout]

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], dtype=np.float64) -> WeightSet:
        layout = ThetaLayout.from_shapes([(k, np.shape(v)) for k, v in tensors.items()])
        flat = np.concatenate([np.asarray(v, dtype=dtype).ravel() for v in tensors.values()])
        return cls(flat, layout)


# ---------------------------------------------------------- architecture


@dataclass(frozen=True)
class VerifierArchitecture:
    """Stem conv, grouped conv blocks (each rms-normalized then GeLU), GAP, linear, sigmoid.

    ``blocks`` holds ``(out_channels, groups, stride)`` triples. The stem has
    no activation of its own; it feeds the first block linearly.
    """

    input_size: int = 32
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    blocks: tuple[tuple[int, int, int], ...] = ((32, 4, 2), (64, 8, 2))
    kernel: int = 3
    name: str = field(default="desk", compare=False)

    def convs(self) -> list[tuple[str, Conv]]:
        pad = self.kernel // 2
        out = [("stem", Conv(self.in_channels, self.stem_channels, self.kernel,
                             self.stem_stride, pad, 1))]
        cin = self.stem_channels
        for i, (cout, groups, stride) in enumerate(self.blocks, start=1):
            out.append((f"block{i}", Conv(cin, cout, self.kernel, stride, pad, groups)))
            cin = cout
        return out

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0] if self.blocks else self.stem_channels

    def stack(self) -> LayerStack:
        layers = [c for _, c in self.convs()] + [Linear(self.feature_dim, 1)]
        return LayerStack(self.input_size, tuple(layers))

    def layout(self) -> ThetaLayout:
        shapes = []
        for name, conv in self.convs():
            shapes.append((f"{name}.weight", conv.weight_shape))
            shapes.append((f"{name}.bias", (conv.out_channels,)))
        shapes.append(("head.weight", (1, self.feature_dim)))
        shapes.append(("head.bias", (1,)))
        return ThetaLayout.from_shapes(shapes)

    @property
    def num_params(self) -> int:
        return count_params(self)

    def to_json(self) -> dict:
        return {"name": self.name, "input_size": self.input_size, "in_channels": self.in_channels,
                "stem_channels": self.stem_channels, "stem_stride": self.stem_stride,
                "blocks": [list(b) for b in self.blocks], "kernel": self.kernel}

    @classmethod
    def from_json(cls, d: dict) -> VerifierArchitecture:
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)


DESK = VerifierArchitecture()
# extra stride-1 block; same resolution, ~60% more parameters
LARGER = VerifierArchitecture(blocks=((32, 4, 2), (64, 8, 2), (64, 8, 1)), name="larger")
# lands near 23k parameters / 6.7 MFLOPs at 112x112
PAPER_SCALE = VerifierArchitecture(
    input_size=112, blocks=((32, 4, 2), (64, 8, 2), (128, 8, 2), (128, 16, 2)), name="paper")

ARCHITECTURES = {"desk": DESK, "larger": LARGER, "paper": PAPER_SCALE}


def get_architecture(name: str, input_size: int | None = None) -> VerifierArchitecture:
    try:
        arch = ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(f"unknown verifier architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    if input_size is not None and input_size != arch.input_size:
        d = arch.to_json()
        d["input_size"] = input_size
        arch = VerifierArchitecture.from_json(d)
    return arch


# ---------------------------------------------------------------- forward


def _views(arch: VerifierArchitecture, thetas: Tensor) -> dict[str, Tensor]:
    j = thetas.shape[0]
    views = {}
    for e in arch.layout():
        views[e.name] = T.reshape(thetas[:, e.offset: e.offset + e.size], (j,) + e.shape)
    return views


def forward_logits(arch: VerifierArchitecture, x: Tensor, thetas: Tensor) -> Tensor:
    """Logits of ``J`` verifiers on ``K`` inputs each.

    ``x`` is ``[1 or J, C, h, w, K]`` (samples innermost, see
    :func:`~hyperverify.tensor.conv2d_multi`) and ``thetas`` is ``[J, p]``;
    the result is ``[J, K]``.
    """
    p = count_params(arch)
    if thetas.ndim != 2 or thetas.shape[1] != p:
        raise ConfigError(f"thetas of shape {thetas.shape} do not match layout size p={p}")
    expect = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 5 or tuple(x.shape[1:4]) != expect:
        raise ShapeError(f"verifier expects inputs [*, {expect}, *], got {x.shape}")
    v = _views(arch, thetas)
    h = x
    for name, conv in arch.convs():
        h = T.conv2d_multi(h, v[f"{name}.weight"], v[f"{name}.bias"],
                           stride=conv.stride, padding=conv.padding, groups=conv.groups)
        if name != "stem":
            h = T.gelu(T.rms_norm_nonparam(h, RMS_EPS, axes=(2, 3)))
    feats = T.mean(h, axis=(2, 3))  # J,C,K
    logits = T.matmul(v["head.weight"], feats)  # J,1,K
    logits = logits + T.reshape(v["head.bias"], (-1, 1, 1))
    return T.reshape(logits, (logits.shape[0], logits.shape[2]))


def to_sample_last(images) -> Tensor:
    """``[N, C, h, w]`` images to the ``[1, C, h, w, N]`` layout the verifier consumes."""
    data = np.asarray(images.data if isinstance(images, Tensor) else images)
    return Tensor(np.ascontiguousarray(np.moveaxis(data, 0, -1))[None])


def batched_predict(arch: VerifierArchitecture, X, thetas) -> Tensor:
    """Prediction matrix: entry ``[j, k]`` is verifier ``j`` applied to sample ``k``."""
    thetas = T.as_tensor(thetas)
    n = X.shape[0]
    if thetas.shape[0] != n:
        raise ShapeError(f"{thetas.shape[0]} weight rows for {n} samples")
    return T.sigmoid(forward_logits(arch, to_sample_last(X), thetas))


def predict_pairs(arch: VerifierArchitecture, images: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Score ``images[i]`` with verifier ``thetas[i]`` for every i (the diagonal only)."""
    with T.no_grad():
        x = Tensor(np.asarray(images)[..., None])  # N,C,h,w,1
        return T.sigmoid(forward_logits(arch, x, Tensor(thetas))).data[:, 0]


def verify(arch: VerifierArchitecture, image, theta) -> float:
    """Probability that ``image`` shows the identity ``theta`` was generated for."""
    flat = theta.flat if isinstance(theta, WeightSet) else np.asarray(theta)
    if isinstance(theta, WeightSet) and theta.layout != arch.layout():
        raise ConfigError("weight set layout does not match the architecture")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"verify takes one [C, h, w] image, got {image.shape}")
    flat = flat.astype(np.result_type(flat.dtype, image.dtype), copy=False)
    return float(predict_pairs(arch, image[None].astype(flat.dtype), flat[None])[0])
