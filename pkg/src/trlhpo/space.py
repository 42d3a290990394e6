"""Layer grid, action decoding and feature-map shape bookkeeping.

A layer is chosen from four numbers in [0, 1]. The first picks the kind by
thirds (Conv2D, FCL, MaxPool); the remaining three index that kind's
hyper-parameter lists with ``min(floor(a * n), n - 1)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

CONV = "Conv2D"
FCL = "FCL"
POOL = "MaxPool"
KINDS = (CONV, FCL, POOL)

MAX_LAYERS = 6
MNIST_SHAPE = (1, 28, 28)

# ordered hyper-parameter grids; action components index into these orders
GRID: dict[str, dict[str, tuple]] = {
    CONV: {
        "filters": tuple(range(8, 129, 8)),
        "kernel": (3, 5, 7),
        "stride": (1, 2, 3),
    },
    FCL: {
        "neurons": tuple(range(16, 513, 8)),
        "bias": (False, True),
        "activation": (None, "relu", "leakyrelu", "tanh", "sigmoid", "elu", "gelu"),
    },
    POOL: {
        "kernel": tuple(range(2, 9)),
        "stride": (1, 2, 3),
        "padding": (0, 1, 2, 3),
    },
}
HP_NAMES = {kind: tuple(grid) for kind, grid in GRID.items()}

Shape = tuple[int, ...]


class IllegalLayerError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hp: tuple[tuple[str, object], ...]

    @classmethod
    def make(cls, kind: str, **hp) -> LayerSpec:
        if kind not in GRID:
            raise IllegalLayerError(f"unknown layer kind {kind!r}")
        names = HP_NAMES[kind]
        if set(hp) != set(names):
            raise IllegalLayerError(f"{kind} needs hyper-parameters {names}, got {sorted(hp)}")
        return cls(kind, tuple((name, hp[name]) for name in names))

    def __getitem__(self, name: str):
        return dict(self.hp)[name]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **dict(self.hp)}

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        kind = d.pop("kind")
        return cls.make(kind, **d)

    def in_grid(self) -> bool:
        return all(value in GRID[self.kind][name] for name, value in self.hp)

    def __str__(self) -> str:
        args = ", ".join(str(v) for _, v in self.hp)
        return f"{self.kind}({args})"


def conv(filters: int, kernel: int, stride: int) -> LayerSpec:
    return LayerSpec.make(CONV, filters=filters, kernel=kernel, stride=stride)


def fcl(neurons: int, bias: bool = True, activation: str | None = "relu") -> LayerSpec:
    return LayerSpec.make(FCL, neurons=neurons, bias=bias, activation=activation)


def maxpool(kernel: int, stride: int, padding: int = 0) -> LayerSpec:
    return LayerSpec.make(POOL, kernel=kernel, stride=stride, padding=padding)


def is_flat(shape: Shape) -> bool:
    return len(shape) == 1


# --------------------------------------------------------------------------
# decoding


def grid_index(a: float, n: int) -> int:
    return min(int(math.floor(a * n)), n - 1)


def kind_from(a0: float) -> str:
    if a0 < 1.0 / 3.0:
        return CONV
    if a0 < 2.0 / 3.0:
        return FCL
    return POOL


def _from_grid(kind: str, components: Sequence[float]) -> LayerSpec:
    hp = {}
    for name, a in zip(HP_NAMES[kind], components):
        values = GRID[kind][name]
        if kind == FCL and name == "bias":
            hp[name] = a >= 0.5
        else:
            hp[name] = values[grid_index(a, len(values))]
    return LayerSpec.make(kind, **hp)


def decode_action(action: Sequence[float], current_shape: Shape) -> LayerSpec:
    """Map an action in [0, 1]^4 to a legal layer for ``current_shape``."""
    a = [min(max(float(x), 0.0), 1.0) for x in action]
    if len(a) != 4:
        raise ValueError(f"action must have 4 components, got {len(a)}")
    layer = _from_grid(kind_from(a[0]), a[1:])
    return legalize(layer, current_shape, a[1:])


def _components_of(layer: LayerSpec) -> list[float]:
    """Mid-cell action components that decode back to ``layer``'s grid positions."""
    out = []
    for name, value in layer.hp:
        values = GRID[layer.kind][name]
        i = values.index(value) if value in values else 0
        out.append((i + 0.5) / len(values))
    return out


def legalize(layer: LayerSpec, current_shape: Shape, components: Sequence[float] | None = None) -> LayerSpec:
    """Repair ``layer`` so it can be applied to ``current_shape``.

    Flat inputs force an FCL decoded from ``components`` (or from the layer's
    own grid positions when none are given). Kernels larger than the
    (padded) input are clamped to the largest fitting grid value; MaxPool
    padding is capped at ``kernel - 1`` so no window is all padding. When no
    kernel fits the layer becomes an FCL.
    """
    if components is None:
        components = _components_of(layer)
    if layer.kind == FCL:
        return layer
    if is_flat(current_shape):
        return _from_grid(FCL, components)
    _, h, w = current_shape
    if layer.kind == CONV:
        kernels = [k for k in GRID[CONV]["kernel"] if k <= min(h, w)]
        if not kernels:
            return _from_grid(FCL, components)
        if layer["kernel"] in kernels:
            return layer
        return conv(layer["filters"], kernels[-1], layer["stride"])
    pad = layer["padding"]
    kernel = layer["kernel"]
    fits = [k for k in GRID[POOL]["kernel"] if k <= min(h, w) + 2 * pad]
    if not fits:
        return _from_grid(FCL, components)
    if kernel not in fits:
        kernel = fits[-1]
    pad = min(pad, kernel - 1)
    # shrinking the padding can un-fit the kernel again
    kernel = min(kernel, min(h, w) + 2 * pad)
    if kernel < GRID[POOL]["kernel"][0]:
        return _from_grid(FCL, components)
    if kernel == layer["kernel"] and pad == layer["padding"]:
        return layer
    return maxpool(kernel, layer["stride"], pad)


def is_legal(layer: LayerSpec, shape: Shape) -> bool:
    return layer.in_grid() and legalize(layer, shape) == layer


# --------------------------------------------------------------------------
# shapes


def propagate_shape(shape: Shape, layer: LayerSpec) -> Shape:
    if layer.kind == FCL:
        return (layer["neurons"],)
    if is_flat(shape):
        raise IllegalLayerError(f"{layer} cannot follow flat shape {shape}")
    c, h, w = shape
    if layer.kind == CONV:
        k, s = layer["kernel"], layer["stride"]
        out = (layer["filters"], (h - k) // s + 1, (w - k) // s + 1)
    else:
        k, s, p = layer["kernel"], layer["stride"], layer["padding"]
        out = (c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if min(out) <= 0 or k > min(h, w) + 2 * (layer["padding"] if layer.kind == POOL else 0):
        raise IllegalLayerError(f"{layer} on input {shape} gives non-positive output {out}")
    return out


def flat_size(shape: Shape) -> int:
    return int(math.prod(shape))


@dataclass(frozen=True)
class ArchSpec:
    """An ordered stack of generated layers together with its shape trace."""

    input_shape: Shape = MNIST_SHAPE
    layers: tuple[LayerSpec, ...] = ()
    shapes: tuple[Shape, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.layers) > MAX_LAYERS:
            raise IllegalLayerError(f"at most {MAX_LAYERS} layers, got {len(self.layers)}")
        shapes = []
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = propagate_shape(shape, layer)
            except IllegalLayerError as exc:
                raise IllegalLayerError(f"layer {i}: {exc}") from None
            shapes.append(shape)
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1] if self.shapes else self.input_shape

    def __len__(self) -> int:
        return len(self.layers)

    def append(self, layer: LayerSpec) -> ArchSpec:
        return ArchSpec(self.input_shape, self.layers + (layer,))

    def kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(tuple(d.get("input_shape", MNIST_SHAPE)), tuple(LayerSpec.from_dict(l) for l in d["layers"]))

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def __str__(self) -> str:
        return " -> ".join(str(l) for l in self.layers) or "<empty>"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def arch_hash(arch: Union[ArchSpec, dict]) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    doc = arch.to_dict() if isinstance(arch, ArchSpec) else ArchSpec.from_dict(arch).to_dict()
    return hashlib.sha256(canonical_json(doc).encode("ascii")).hexdigest()


# --------------------------------------------------------------------------
# model description


@dataclass(frozen=True)
class ModelStage:
    op: str  # conv | pool | flatten | dense
    in_shape: Shape
    out_shape: Shape
    layer: LayerSpec | None = None
    activation: str | None = None
    bias: bool = True
    index: int | None = None  # generated-layer index; None for the head


def build_model(arch: ArchSpec, num_classes: int = 10) -> list[ModelStage]:
    """Lay out the trainable stages: generated layers, then flatten and a dense head.

    The classification head is not one of the generated layers.
    """
    stages: list[ModelStage] = []
    shape = tuple(arch.input_shape)
    for i, layer in enumerate(arch.layers):
        try:
            out = propagate_shape(shape, layer)
        except IllegalLayerError as exc:
            raise IllegalLayerError(f"layer {i}: {exc}") from None
        if layer.kind == CONV:
            stages.append(ModelStage("conv", shape, out, layer, index=i))
        elif layer.kind == POOL:
            stages.append(ModelStage("pool", shape, out, layer, index=i))
        else:
            if not is_flat(shape):
                flat = (flat_size(shape),)
                stages.append(ModelStage("flatten", shape, flat))
                shape = flat
            stages.append(
                ModelStage("dense", shape, out, layer, activation=layer["activation"], bias=layer["bias"], index=i)
            )
        shape = out
    if not is_flat(shape):
        flat = (flat_size(shape),)
        stages.append(ModelStage("flatten", shape, flat))
        shape = flat
    stages.append(ModelStage("dense", shape, (num_classes,)))
    return stages
