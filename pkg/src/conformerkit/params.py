"""Named, ordered parameter collections."""

from __future__ import annotations

from collections.abc import Iterator, MutableMapping

import numpy as np

from .errors import ContractError
from .tensor import BNState, Tensor


class ParamStore(MutableMapping):
    """Ordered map ``name -> Tensor``.

    Trainable parameters have ``requires_grad=True``; buffers such as batch
    norm running statistics are stored alongside with ``requires_grad=False``
    so that checkpoints and averaging see both.  Names are hierarchical and
    dot-separated, e.g. ``enc.block3.conv.dw.weight``.
    """

    def __init__(self, items=None):
        self._data: dict[str, Tensor] = {}
        if items:
            for k, v in (items.items() if hasattr(items, "items") else items):
                self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._data[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, Tensor):
            raise ContractError(f"{name}: ParamStore holds Tensors, got {type(value).__name__}")
        self._data[name] = value

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.count()} trainable values)"

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._data:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._data[name] = t
        return t

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._data.items() if v.requires_grad}

    def buffers(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._data.items() if not v.requires_grad}

    def count(self) -> int:
        return sum(v.size for v in self._data.values() if v.requires_grad)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def bn_state(self, prefix: str, momentum: float = 0.1, eps: float = 1e-5) -> BNState:
        return BNState(self[f"{prefix}.running_mean"].data, self[f"{prefix}.running_var"].data,
                       momentum, eps)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._data.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, v in self._data.items():
            out[k] = Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
        return out

    def zero_grad(self) -> None:
        for v in self._data.values():
            v.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._data.items()}


class Scope:
    """Prefixed view into a :class:`ParamStore`."""

    __slots__ = ("store", "prefix")

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self.store

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._full(name))

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        return self.store.add(self._full(name), data, trainable)

    def bn_state(self, name: str, momentum: float = 0.1, eps: float = 1e-5) -> BNState:
        return self.store.bn_state(self._full(name), momentum, eps)


def count_params(params) -> int:
    """Number of trainable scalar values."""
    if hasattr(params, "count"):
        return params.count()
    return sum(t.size for t in params.values() if t.requires_grad)
