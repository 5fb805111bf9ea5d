"""Cue-driven priming: map a class-presence cue to per-channel gains and
residually modulate selected conv feature planes of a frozen base network.

The gain for layer i is a linear function of the cue (no bias, no
nonlinearity); the default modulation rescales each feature plane by
(1 + gain), identically at every spatial location, so zero weights or a
zero cue leave the network bit-exactly unmodified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nets import BaseNetwork
from .tensor import ShapeError, Tensor, matmul, matvec, relu, reshape, transpose

__all__ = [
    "Cue",
    "BlockMask",
    "LayerMask",
    "PrimingWeights",
    "ModulationTrace",
    "MODULATION_VARIANTS",
    "init_priming",
    "compute_alpha",
    "modulate",
    "primed_forward",
    "expand_block_mask",
    "save_priming",
    "load_priming",
]

MODULATION_VARIANTS = ("residual", "multiplicative", "residual-bias", "residual-relu")
PLACEMENTS = ("pre-relu", "post-relu")


@dataclass(frozen=True)
class Cue:
    """Binary class-presence vector, one bit per foreground class."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"cue bits must be 0 or 1, got {self.bits}")

    @classmethod
    def one_hot(cls, class_id: int, n: int) -> "Cue":
        if not 0 <= class_id < n:
            raise ValueError(f"class {class_id} out of range for {n} classes")
        return cls(tuple(1 if i == class_id else 0 for i in range(n)))

    @classmethod
    def from_classes(cls, classes, n: int) -> "Cue":
        cs = set(classes)
        if any(not 0 <= c < n for c in cs):
            raise ValueError(f"classes {sorted(cs)} out of range for {n} classes")
        return cls(tuple(1 if i in cs else 0 for i in range(n)))

    @classmethod
    def zeros(cls, n: int) -> "Cue":
        return cls((0,) * n)

    def __len__(self) -> int:
        return len(self.bits)

    def classes(self) -> list[int]:
        return [i for i, b in enumerate(self.bits) if b]

    def vector(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)


@dataclass(frozen=True)
class BlockMask:
    """Set of network blocks enabled for priming, rendered canonically as a
    bit string in the network's block order (e.g. "1100")."""

    blocks: frozenset[str]

    @classmethod
    def from_bits(cls, net: BaseNetwork, bits: str) -> "BlockMask":
        if len(bits) != len(net.block_order) or any(c not in "01" for c in bits):
            raise ValueError(
                f"block mask {bits!r} must be {len(net.block_order)} bits for blocks {net.block_order}"
            )
        return cls(frozenset(b for b, c in zip(net.block_order, bits) if c == "1"))

    def validate(self, net: BaseNetwork) -> None:
        unknown = self.blocks - set(net.block_order)
        if unknown:
            raise ValueError(f"unknown blocks {sorted(unknown)}; network has {net.block_order}")

    def to_bits(self, net: BaseNetwork) -> str:
        self.validate(net)
        return "".join("1" if b in self.blocks else "0" for b in net.block_order)


@dataclass(frozen=True)
class LayerMask:
    """Explicit set of primed conv-layer indices."""

    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(sorted(set(self.indices))))

    @classmethod
    def prefix(cls, net: BaseNetwork, k: int) -> "LayerMask":
        primeable = net.primeable_layers()
        if not 0 <= k <= len(primeable):
            raise ValueError(f"prefix {k} out of range; network has {len(primeable)} primeable layers")
        return cls(tuple(primeable[:k]))

    def validate(self, net: BaseNetwork) -> None:
        bad = set(self.indices) - set(net.primeable_layers())
        if bad:
            raise ValueError(f"mask references non-primeable layers {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.indices)


def expand_block_mask(net: BaseNetwork, bm: BlockMask) -> LayerMask:
    """All primeable layers whose block tag is enabled."""
    bm.validate(net)
    return LayerMask(tuple(ci for ci in net.primeable_layers() if net.block_of(ci) in bm.blocks))


@dataclass
class PrimingWeights:
    """Per-layer cue-to-gain matrices, all trainable; the bias matrices are
    only populated for the residual-bias variant."""

    weights: dict[int, Tensor]
    n_cues: int
    variant: str = "residual"
    placement: str = "pre-relu"
    biases: dict[int, Tensor] = field(default_factory=dict)

    @property
    def mask(self) -> LayerMask:
        return LayerMask(tuple(self.weights))

    def trainable(self) -> list[Tensor]:
        return list(self.weights.values()) + list(self.biases.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.trainable())

    def zero_grad(self) -> None:
        for t in self.trainable():
            t.zero_grad()


def init_priming(
    net: BaseNetwork,
    mask: LayerMask,
    n: int,
    seed: int = 0,
    variant: str = "residual",
    placement: str = "pre-relu",
    init: str = "zeros",
) -> PrimingWeights:
    """Fresh priming weights for the masked layers; zero-initialized by
    default so training starts exactly at the frozen baseline."""
    if variant not in MODULATION_VARIANTS:
        raise ValueError(f"unknown modulation variant {variant!r}; choose from {MODULATION_VARIANTS}")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}; choose from {PLACEMENTS}")
    if init not in ("zeros", "random"):
        raise ValueError(f"unknown init scheme {init!r}")
    mask.validate(net)
    rng = np.random.default_rng(seed)
    weights: dict[int, Tensor] = {}
    biases: dict[int, Tensor] = {}
    for ci in mask.indices:
        c = net.conv_channels(ci)
        if init == "zeros":
            w = np.zeros((c, n))
        else:
            w = rng.normal(0.0, 0.01, size=(c, n))
        weights[ci] = Tensor(w, requires_grad=True)
        if variant == "residual-bias":
            biases[ci] = Tensor(np.zeros((c, n)), requires_grad=True)
    return PrimingWeights(weights=weights, n_cues=n, variant=variant, placement=placement, biases=biases)


def compute_alpha(w_i: Tensor, h: Cue) -> Tensor:
    """Per-channel gains: a pure linear transform of the cue."""
    if w_i.data.shape[1] != len(h):
        raise ShapeError(f"weight expects cue length {w_i.data.shape[1]}, got {len(h)}")
    return matvec(w_i, Tensor(h.vector()))


def _reshape_gain(x: Tensor, alpha: Tensor) -> Tensor:
    xd, ad = x.data.ndim, alpha.data.ndim
    c = x.data.shape[0] if xd == 3 else x.data.shape[1]
    if alpha.data.shape[-1] != c:
        raise ShapeError(f"gain has {alpha.data.shape[-1]} channels, feature map has {c}")
    if ad == 1:
        return reshape(alpha, (c, 1, 1) if xd == 3 else (1, c, 1, 1))
    if ad == 2 and xd == 4:
        return reshape(alpha, (alpha.data.shape[0], c, 1, 1))
    raise ShapeError(f"cannot broadcast gain shape {alpha.shape} onto features {x.shape}")


def modulate(x: Tensor, alpha: Tensor, variant: str = "residual", bias: Tensor | None = None) -> Tensor:
    """Scale each feature plane j by its gain, identically at every spatial
    location. The residual form computes (1 + alpha_j) * x_j."""
    a = _reshape_gain(x, alpha)
    if variant == "residual":
        return x + x * a
    if variant == "multiplicative":
        return x * a
    if variant == "residual-bias":
        if bias is None:
            raise ValueError("residual-bias modulation needs a bias term")
        return x + x * a + _reshape_gain(x, bias)
    if variant == "residual-relu":
        return relu(x + x * a)
    raise ValueError(f"unknown modulation variant {variant!r}")


@dataclass
class ModulationTrace:
    """Recorded per-layer gain vectors for one primed forward pass."""

    alphas: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.alphas)


def _cue_matrix(cues: Sequence[Cue], n: int) -> Tensor:
    rows = []
    for h in cues:
        if len(h) != n:
            raise ShapeError(f"cue length {len(h)} does not match expected {n}")
        rows.append(h.vector())
    return Tensor(np.stack(rows))


def primed_forward(net: BaseNetwork, pw: PrimingWeights, h: Cue | Sequence[Cue], image: Tensor):
    """Forward pass with modulation after each primed conv layer (before its
    nonlinearity under pre-relu placement). Accepts one cue with a [3,H,W]
    image or a sequence of cues with a matching [N,3,H,W] batch. Returns
    the task output and the trace of applied gains."""
    single = isinstance(h, Cue)
    if single:
        if len(h) != net.n_classes:
            raise ShapeError(f"cue length {len(h)} does not match network classes {net.n_classes}")
        cue_vec = Tensor(h.vector())
        cue_mat = None
    else:
        cue_mat = _cue_matrix(h, net.n_classes)
        if image.data.ndim != 4 or image.data.shape[0] != cue_mat.data.shape[0]:
            raise ShapeError(
                f"{cue_mat.data.shape[0]} cues need a matching image batch, got shape {image.shape}"
            )

    trace = ModulationTrace()

    def modulator(ci: int, x: Tensor) -> Tensor:
        if ci not in pw.weights:
            return x
        w = pw.weights[ci]
        if single:
            alpha = matvec(w, cue_vec)
        else:
            alpha = matmul(cue_mat, transpose(w))
        bias = None
        if pw.variant == "residual-bias":
            b = pw.biases[ci]
            bias = matvec(b, cue_vec) if single else matmul(cue_mat, transpose(b))
        trace.alphas[ci] = alpha.data.copy()
        return modulate(x, alpha, variant=pw.variant, bias=bias)

    out = net.forward(image, modulator=modulator, placement=pw.placement)
    return out, trace


# ---------------------------------------------------------------------------
# persistence


def save_priming(pw: PrimingWeights, path) -> None:
    from .tensor import save_archive

    named: dict[str, Tensor] = {}
    for ci in sorted(pw.weights):
        named[f"prime.W.{ci}"] = pw.weights[ci]
    for ci in sorted(pw.biases):
        named[f"prime.B.{ci}"] = pw.biases[ci]
    save_archive(path, named)


def load_priming(path, n_cues: int, variant: str = "residual", placement: str = "pre-relu") -> PrimingWeights:
    from .tensor import load_archive

    arrays = load_archive(path)
    weights: dict[int, Tensor] = {}
    biases: dict[int, Tensor] = {}
    for name, arr in arrays.items():
        kind, _, idx = name.rpartition(".")
        if kind == "prime.W":
            weights[int(idx)] = Tensor(arr, requires_grad=True)
        elif kind == "prime.B":
            biases[int(idx)] = Tensor(arr, requires_grad=True)
        else:
            raise ValueError(f"unexpected archive entry {name!r} in priming archive")
        if arr.shape[1] != n_cues:
            raise ValueError(f"{name} expects cue length {arr.shape[1]}, asked for {n_cues}")
    return PrimingWeights(weights=weights, n_cues=n_cues, variant=variant, placement=placement, biases=biases)
