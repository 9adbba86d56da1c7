"""Shared test helpers."""

import numpy as np

from docenc.numkernel import ParamStore, Tensor, grad_check


def store_grad_check(store: ParamStore, name: str, f, h: float = 1e-3) -> float:
    """grad_check w.r.t. one named store entry by temporary substitution.

    ``f()`` must evaluate the scalar loss using ``store``; the leaf tensor is
    swapped in under ``name`` for the duration of each evaluation.
    """
    def wrapped(leaf: Tensor) -> Tensor:
        old = store._entries[name]
        store._entries[name] = leaf
        try:
            return f()
        finally:
            store._entries[name] = old

    return grad_check(wrapped, store[name], h)


def assert_stores_equal(a: ParamStore, b: ParamStore) -> None:
    assert a.names() == b.names()
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data, err_msg=name)
