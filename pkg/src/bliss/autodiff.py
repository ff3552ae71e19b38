"""Parameter vectors and first/second-order differentiation of scalar losses.

Everything that moves between the optimizers is a :class:`ParamVector`: an
ordered, named set of tensors.  Losses are wrapped in a :class:`ScalarGraph`
which can be re-evaluated at any conformant inputs and differentiated with
:func:`grad`, :func:`hvp` and :func:`mixed_vjp`.  Second-order products are
obtained by double reverse mode: differentiate the scalar ``<grad, v>``.

Reverse-mode mechanics are delegated to ``torch.autograd``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

__all__ = [
    "ParamVector",
    "ScalarGraph",
    "DifferentiationError",
    "ShapeError",
    "grad",
    "value_and_grad",
    "hvp",
    "HessianOperator",
    "mixed_vjp",
    "dot",
    "axpy",
    "save_params",
    "load_params",
    "TOLERANCES",
]

# Comparison tolerances used by the verification suite, keyed by precision.
TOLERANCES = {
    torch.float64: {"fd_rel": 1e-4, "hvp_abs": 1e-8, "exact": 1e-10},
    torch.float32: {"fd_rel": 5e-2, "hvp_abs": 1e-3, "exact": 1e-5},
}


class DifferentiationError(ArithmeticError):
    """A loss or one of its derivatives became non-finite."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message if block is None else f"{message} (block {block!r})")
        self.block = block


class ShapeError(ValueError):
    """Two parameter vectors are not conformant."""


@dataclass(frozen=True)
class ParamVector:
    """Immutable ordered collection of named tensors.

    Arithmetic never mutates operands; every method returns a new vector.
    """

    blocks: tuple[tuple[str, torch.Tensor], ...]

    def __post_init__(self):
        names = [n for n, _ in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {names}")

    @classmethod
    def from_dict(cls, d: Mapping[str, torch.Tensor]) -> "ParamVector":
        return cls(tuple((k, v) for k, v in d.items()))

    @classmethod
    def from_flat(cls, flat, like: "ParamVector") -> "ParamVector":
        flat = torch.as_tensor(flat)
        out, offset = [], 0
        for name, t in like.blocks:
            n = t.numel()
            out.append((name, flat[offset:offset + n].reshape(t.shape).to(t.dtype).clone()))
            offset += n
        if offset != flat.numel():
            raise ShapeError(f"flat vector has {flat.numel()} entries, expected {offset}")
        return cls(tuple(out))

    # -- container protocol -------------------------------------------------
    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.blocks]

    @property
    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.blocks]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape) for _, t in self.blocks]

    @property
    def dtype(self) -> torch.dtype:
        return self.blocks[0][1].dtype

    def numel(self) -> int:
        return sum(t.numel() for _, t in self.blocks)

    def __getitem__(self, name: str) -> torch.Tensor:
        for n, t in self.blocks:
            if n == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.blocks)

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.blocks)

    # -- conformance and arithmetic -----------------------------------------
    def conformant(self, other: "ParamVector") -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def _check(self, other: "ParamVector") -> None:
        if not self.conformant(other):
            raise ShapeError(
                f"non-conformant parameter vectors: {list(zip(self.names, self.shapes))} "
                f"vs {list(zip(other.names, other.shapes))}"
            )

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamVector":
        return ParamVector(tuple((n, fn(t)) for n, t in self.blocks))

    def zip_map(self, other: "ParamVector", fn) -> "ParamVector":
        self._check(other)
        return ParamVector(tuple((n, fn(a, b)) for (n, a), (_, b) in zip(self.blocks, other.blocks)))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.zip_map(other, torch.add)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.zip_map(other, torch.sub)

    def __neg__(self) -> "ParamVector":
        return self.map(torch.neg)

    def __mul__(self, alpha: float) -> "ParamVector":
        return self.map(lambda t: t * alpha)

    __rmul__ = __mul__

    def zeros_like(self) -> "ParamVector":
        return self.map(torch.zeros_like)

    def detach(self) -> "ParamVector":
        return self.map(lambda t: t.detach())

    def clone(self) -> "ParamVector":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ParamVector":
        return self.map(lambda t: t.detach().to(dtype))

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for _, t in self.blocks])

    def norm(self) -> float:
        return math.sqrt(dot(self, self))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for _, t in self.blocks)

    def select(self, names: Sequence[str]) -> "ParamVector":
        return ParamVector(tuple((n, self[n]) for n in names))

    def replace(self, other: "ParamVector") -> "ParamVector":
        """Copy of ``self`` with the blocks named in ``other`` swapped in."""
        sub = other.as_dict()
        return ParamVector(tuple((n, sub.get(n, t)) for n, t in self.blocks))

    def equal(self, other: "ParamVector") -> bool:
        """Bit-exact equality."""
        return self.conformant(other) and all(
            torch.equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )


def dot(a: ParamVector, b: ParamVector) -> float:
    """Inner product, summed block by block in block order."""
    a._check(b)
    total = 0.0
    for x, y in zip(a.tensors, b.tensors):
        total += float((x * y).sum())
    return total


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``y + alpha * x``."""
    return y.zip_map(x, lambda yt, xt: yt + alpha * xt)


@dataclass(frozen=True)
class ScalarGraph:
    """A scalar loss over one or more named parameter vectors.

    ``fn`` receives the parameter vectors as keyword arguments (named as in
    ``inputs``) and returns a 0-d tensor.  Batch data are captured by ``fn``.
    """

    fn: Callable[..., torch.Tensor]
    inputs: Mapping[str, ParamVector] = field(default_factory=dict)

    def __call__(self, **overrides: ParamVector) -> torch.Tensor:
        args = dict(self.inputs)
        args.update(overrides)
        return self.fn(**args)

    def value(self, **overrides: ParamVector) -> float:
        with torch.no_grad():
            return float(self(**overrides))

    def with_inputs(self, **overrides: ParamVector) -> "ScalarGraph":
        args = dict(self.inputs)
        args.update(overrides)
        return ScalarGraph(self.fn, args)


def _leaf(pv: ParamVector) -> ParamVector:
    return pv.map(lambda t: t.detach().clone().requires_grad_(True))


def _check_finite_out(out: torch.Tensor) -> None:
    if out.dim() != 0:
        raise ValueError(f"graph must produce a scalar, got shape {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise DifferentiationError(f"non-finite graph value {float(out.detach())}")


def _collect(grads, like: ParamVector) -> ParamVector:
    out = []
    for (name, t), g in zip(like.blocks, grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise DifferentiationError("non-finite derivative", block=name)
        out.append((name, g))
    return ParamVector(tuple(out))


def _autograd(out, leaves: ParamVector, create_graph: bool = False):
    if not out.requires_grad:
        return [None] * len(leaves)
    return torch.autograd.grad(
        out, leaves.tensors, allow_unused=True, create_graph=create_graph
    )


def _contract(grads, v: ParamVector) -> torch.Tensor:
    terms = [(g * vt.detach()).sum() for g, vt in zip(grads, v.tensors) if g is not None]
    return torch.stack(terms).sum() if terms else torch.zeros(())


def grad(graph: ScalarGraph, wrt: str) -> ParamVector:
    """Gradient of ``graph`` with respect to the input named ``wrt``."""
    leaves = _leaf(graph.inputs[wrt])
    out = graph(**{wrt: leaves})
    _check_finite_out(out)
    return _collect(_autograd(out, leaves), leaves)


def value_and_grad(graph: ScalarGraph, wrt: str) -> tuple[float, ParamVector]:
    leaves = _leaf(graph.inputs[wrt])
    out = graph(**{wrt: leaves})
    _check_finite_out(out)
    return float(out.detach()), _collect(_autograd(out, leaves), leaves)


def hvp(graph: ScalarGraph, wrt: str, v: ParamVector) -> ParamVector:
    """Hessian-vector product ``d/dθ <∇θ graph, v>`` with ``v`` held constant."""
    theta = graph.inputs[wrt]
    theta._check(v)
    leaves = _leaf(theta)
    out = graph(**{wrt: leaves})
    _check_finite_out(out)
    g = _autograd(out, leaves, create_graph=True)
    s = _contract(g, v)
    return _collect(_autograd(s, leaves), leaves)


class HessianOperator:
    """``v -> H v`` at a fixed point, sharing one forward and first backward pass.

    Repeated products (a linear-system solve) then cost one extra backward
    each instead of a full double-backward from scratch.
    """

    def __init__(self, graph: ScalarGraph, wrt: str):
        self.like = graph.inputs[wrt]
        self._leaves = _leaf(self.like)
        out = graph(**{wrt: self._leaves})
        _check_finite_out(out)
        self._grads = _autograd(out, self._leaves, create_graph=True)
        self._live = any(g is not None and g.requires_grad for g in self._grads)

    def __call__(self, v: ParamVector) -> ParamVector:
        self.like._check(v)
        if not self._live:
            return v.zeros_like()
        s = _contract(self._grads, v)
        hv = torch.autograd.grad(s, self._leaves.tensors, allow_unused=True, retain_graph=True)
        return _collect(hv, self._leaves)


def mixed_vjp(graph: ScalarGraph, wrt_outer: str, wrt_inner: str, z: ParamVector) -> ParamVector:
    """Return ``∇_outer <∇_inner graph, z>``, i.e. the mixed partial applied to ``z``."""
    if wrt_outer == wrt_inner:
        return hvp(graph, wrt_inner, z)
    graph.inputs[wrt_inner]._check(z)
    outer = _leaf(graph.inputs[wrt_outer])
    inner = _leaf(graph.inputs[wrt_inner])
    out = graph(**{wrt_outer: outer, wrt_inner: inner})
    _check_finite_out(out)
    g = _autograd(out, inner, create_graph=True)
    s = _contract(g, z)
    return _collect(_autograd(s, outer), outer)


# -- checkpoint format ------------------------------------------------------
_MAGIC = b"BLPV"
_VERSION = 1


def save_params(path: str | Path, pv: ParamVector) -> None:
    """Write ``pv`` as a BLPV checkpoint (float32 little-endian payload)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(pv))]
    for name, t in pv.blocks:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        chunks.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path, dtype: torch.dtype = torch.float32) -> ParamVector:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a BLPV checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported BLPV version {version}")
    pos, blocks = 12, []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        blocks.append((name, torch.from_numpy(arr.copy()).to(dtype)))
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return ParamVector(tuple(blocks))
