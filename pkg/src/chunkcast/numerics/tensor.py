"""Dense tensors with a dynamic reverse-mode tape.

Every operation that sees at least one grad-carrying input records a node
holding its parents and a closure mapping the output gradient to parent
gradients. ``backward`` walks the graph once and then frees it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from chunkcast.errors import ContractError, GraphConsumedError, NumericError

_state = threading.local()
_DEFAULT_DTYPE = [np.float64]


def default_dtype() -> type:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    """Switch between 64-bit (oracle) and 32-bit (fast) mode."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An immutable n-dimensional array that may take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from chunkcast.numerics import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from chunkcast.numerics import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from chunkcast.numerics import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from chunkcast.numerics import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from chunkcast.numerics import functional as F
        return F.div(self, other)

    def __neg__(self):
        from chunkcast.numerics import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from chunkcast.numerics import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from chunkcast.numerics import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from chunkcast.numerics import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from chunkcast.numerics import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from chunkcast.numerics import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from chunkcast.numerics import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, recording the node only when a parent needs grad."""
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ParamSet(Mapping[str, Tensor]):
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = value.data if isinstance(value, Tensor) else value
        self._params[name] = Tensor(np.array(arr, dtype=default_dtype()), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def assign(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter's values (shape-checked), e.g. after an optimizer step."""
        p = self._params[name]
        if value.shape != p.shape:
            raise ContractError(f"shape change for {name}: {p.shape} -> {value.shape}")
        p.data = np.asarray(value, dtype=p.data.dtype)

    def copy(self) -> "ParamSet":
        return ParamSet({k: self._params[k].data.copy() for k in self})

    def state(self) -> dict[str, np.ndarray]:
        return {k: self._params[k].data for k in self}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise ContractError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            self.assign(k, np.asarray(v))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in self:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data).tobytes())
        return h.hexdigest()


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns d(loss)/d(param) for every entry of ``params`` (zeros for
    parameters the loss does not reach) and stores each in ``param.grad``.
    The recorded graph is freed; calling again on the same loss raises
    :class:`GraphConsumedError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed; run a new forward pass")
    params = params or {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    order = _topo_order(loss) if loss._backward is not None else []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            target = grads if parent._backward is not None else leaves
            prev = target.get(id(parent))
            target[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True
    if loss._backward is None and not order and loss.requires_grad:
        leaves[id(loss)] = np.ones_like(loss.data)

    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = leaves.get(id(p))
        g = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p.grad = g
        out[name] = g
    return out
