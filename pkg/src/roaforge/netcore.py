"""Small dense networks on top of torch autograd.

Parameters live in a :class:`ParamStore` (an ordered name -> tensor map) and
networks are described by a :class:`DenseNetSpec`.  Evaluation is a pure
function of ``(spec, params, x)``; torch's autograd graph plays the role of
the gradient tape.

Constrained layers follow the trivial-null-space construction

    W = [ G1^T G1 + eps_W I ]
        [        G2         ]

so that ``W x = 0`` implies ``x = 0`` no matter what values ``G1`` and ``G2``
take.  The optimiser only ever touches ``G1``/``G2``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
EPS_W = 1e-6

ACTIVATIONS = {
    "tanh": torch.tanh,
    "identity": lambda z: z,
}


class NonFiniteGradient(ArithmeticError):
    """Raised when an SGD step would write non-finite values."""


@dataclass(frozen=True)
class DenseNetSpec:
    """Layer layout of a dense network.

    ``layer_dims`` includes the input dimension, so ``[2, 64]`` is a single
    layer mapping R^2 -> R^64.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    bias: tuple[bool, ...]
    constrained: bool = False
    eps_w: float = EPS_W

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "bias", tuple(bool(b) for b in self.bias))
        n_layers = len(self.layer_dims) - 1
        if n_layers < 1:
            raise ValueError("need at least one layer")
        if len(self.activations) != n_layers or len(self.bias) != n_layers:
            raise ValueError("activations/bias must have one entry per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unsupported activation {act!r}")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dims must be positive")
        if self.constrained:
            if any(b for b in self.bias):
                raise ValueError("constrained layers are bias-free")
            if any(d1 < d0 for d0, d1 in zip(self.layer_dims, self.layer_dims[1:])):
                raise ValueError("constrained layer dims must be non-decreasing")
            if not self.eps_w > 0:
                raise ValueError("eps_w must be positive")

    @classmethod
    def simple(cls, layer_dims: Sequence[int], activations: Sequence[str],
               bias: bool = False, constrained: bool = False) -> "DenseNetSpec":
        n_layers = len(layer_dims) - 1
        return cls(tuple(layer_dims), tuple(activations), (bias,) * n_layers, constrained)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def param_shapes(self, prefix: str = "") -> "OrderedDict[str, tuple[int, ...]]":
        shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        for i, (d0, d1) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            if self.constrained:
                # q_l = d_{l-1}: G1 is square
                shapes[f"{prefix}G{i}_1"] = (d0, d0)
                shapes[f"{prefix}G{i}_2"] = (d1 - d0, d0)
            else:
                shapes[f"{prefix}W{i}"] = (d1, d0)
                if self.bias[i]:
                    shapes[f"{prefix}b{i}"] = (d1,)
        return shapes


class ParamStore(Mapping[str, torch.Tensor]):
    """Ordered mapping of parameter name -> float64 tensor.

    Iteration order is insertion order and never changes.  Shapes are fixed
    at construction; :meth:`replace` returns a new store.
    """

    def __init__(self, items: Iterable[tuple[str, torch.Tensor]] = ()):
        self._data: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, value in items:
            if name in self._data:
                raise KeyError(f"duplicate parameter {name!r}")
            self._data[name] = torch.as_tensor(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamStore({body})"

    def merged(self, other: "ParamStore") -> "ParamStore":
        return ParamStore(list(self.items()) + list(other.items()))

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore((k, v) for k, v in self.items() if k.startswith(prefix))

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "ParamStore":
        out = []
        for k, v in self.items():
            if k in updates:
                new = torch.as_tensor(updates[k], dtype=DTYPE)
                if new.shape != v.shape:
                    raise ValueError(f"shape change for {k}: {tuple(v.shape)} -> {tuple(new.shape)}")
                out.append((k, new))
            else:
                out.append((k, v))
        return ParamStore(out)

    def detached(self, requires_grad: bool = False) -> "ParamStore":
        return ParamStore(
            (k, v.detach().clone().requires_grad_(requires_grad)) for k, v in self.items()
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamStore") -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            torch.equal(self[k].detach(), other[k].detach()) for k in self
        )

    # -- checkpoint format -------------------------------------------------
    def to_json(self) -> str:
        """Serialise as ``{name: {"shape": [...], "values": [...]}}``.

        Floats are written with 17 significant digits so that the round trip
        is exact.
        """
        lines = ["{"]
        entries = []
        for k, v in self.items():
            arr = v.detach().cpu().numpy().astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {k} is not finite")
            vals = ", ".join(format(float(a), ".17g") for a in arr.ravel(order="C"))
            entries.append(f'  {json.dumps(k)}: {{"shape": {json.dumps(list(arr.shape))}, "values": [{vals}]}}')
        lines.append(",\n".join(entries))
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        raw = json.loads(text, object_pairs_hook=OrderedDict)
        items = []
        for k, entry in raw.items():
            shape = tuple(entry["shape"])
            vals = np.asarray(entry["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"parameter {k}: {vals.size} values for shape {shape}")
            items.append((k, torch.from_numpy(vals.reshape(shape).copy())))
        return cls(items)

    def save(self, path: str | os.PathLike) -> None:
        """Atomic write (temp file + rename)."""
        path = os.fspath(path)
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-", suffix=".json")
        try:
            with os.fdopen(fd, "w", newline="\n") as fh:
                fh.write(self.to_json())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParamStore":
        with open(path) as fh:
            return cls.from_json(fh.read())


def init_params(spec: DenseNetSpec, seed: int | np.random.Generator, prefix: str = "") -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.

    Draws come from numpy's PCG64 so that the result does not depend on the
    global torch RNG state.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = spec.param_shapes(prefix)
    items = []
    for name, shape in shapes.items():
        # every parameter of layer i has fan-in layer_dims[i]; all shapes end in it
        # except biases, whose layer index is encoded in the name
        fan_in = shape[-1] if len(shape) == 2 else spec.layer_dims[int(name[len(prefix) + 1:])]
        bound = 1.0 / math.sqrt(fan_in)
        items.append((name, torch.from_numpy(rng.uniform(-bound, bound, size=shape))))
    return ParamStore(items)


def layer_weight(spec: DenseNetSpec, params: Mapping[str, torch.Tensor], i: int,
                 prefix: str = "") -> torch.Tensor:
    """Effective weight matrix of layer ``i`` (assembled if constrained)."""
    if not spec.constrained:
        return params[f"{prefix}W{i}"]
    g1 = params[f"{prefix}G{i}_1"]
    g2 = params[f"{prefix}G{i}_2"]
    d0 = spec.layer_dims[i]
    top = g1.T @ g1 + spec.eps_w * torch.eye(d0, dtype=g1.dtype)
    return torch.cat([top, g2], dim=0)


def forward(spec: DenseNetSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor,
            prefix: str = "") -> torch.Tensor:
    """Evaluate the network on ``x`` of shape ``(..., in_dim)``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"expected input dim {spec.in_dim}, got {x.shape[-1]}")
    h = x
    for i in range(spec.n_layers):
        w = layer_weight(spec, params, i, prefix)
        h = h @ w.T
        if spec.bias[i]:
            h = h + params[f"{prefix}b{i}"]
        h = ACTIVATIONS[spec.activations[i]](h)
    return h


def grad(output: torch.Tensor, wrt: Sequence[torch.Tensor] | torch.Tensor,
         create_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode derivative of a scalar ``output``.

    ``wrt`` entries that do not influence ``output`` get zero gradients.
    """
    if output.numel() != 1:
        raise ValueError("grad() needs a scalar-rooted graph; reduce the output first")
    single = isinstance(wrt, torch.Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if not output.requires_grad:
        return [torch.zeros_like(w) for w in wrt_list]
    gs = torch.autograd.grad(output.reshape(()), wrt_list, create_graph=create_graph,
                             allow_unused=True)
    return [torch.zeros_like(w) if g is None else g for w, g in zip(wrt_list, gs)]


def sgd_step(params: ParamStore, grads: Mapping[str, torch.Tensor], lr: float) -> ParamStore:
    """Return ``params - lr * grads`` for the names present in ``grads``.

    ``grads`` should already be the mini-batch mean.  The step is rejected
    (``NonFiniteGradient``) if any gradient entry is non-finite.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    updates = {k: params[k].detach() - lr * grads[k].detach().to(DTYPE) for k in grads}
    return params.replace(updates)


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> dict[str, torch.Tensor]:
    """Scale ``grads`` jointly so that their global 2-norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(torch.sum(g.detach() ** 2)) for g in grads.values()))
    if not math.isfinite(total):
        raise NonFiniteGradient("non-finite gradient norm")
    if total <= max_norm or total == 0.0:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def step_lr(base_lr: float, iteration: int, step_size: int, decay: float) -> float:
    """Step decay: ``base_lr * decay ** (iteration // step_size)``."""
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    return base_lr * decay ** (iteration // step_size)
