"""Dense assembly of operators for small serial checks."""
from __future__ import annotations

import numpy as np

from .vectors import ArrayVector, FieldVector

__all__ = ["owned_slices", "to_array", "from_array", "assemble"]


def owned_slices(x):
    """Owned-dof lengths of each component of ``x``."""
    if isinstance(x, ArrayVector):
        return [len(x.data)]
    if isinstance(x, FieldVector):
        return [f.space.last_owned for f in x.fields]
    return [x.space.last_owned]


def _parts(x):
    if isinstance(x, ArrayVector):
        return [x.data]
    if isinstance(x, FieldVector):
        return [f.data for f in x.fields]
    return [x.data]


def to_array(x) -> np.ndarray:
    """Owned dofs of ``x`` concatenated in component order."""
    return np.concatenate([d[:n] for d, n in zip(_parts(x), owned_slices(x))])


def from_array(template, values):
    """New vector shaped like ``template`` holding ``values`` on its owned dofs.

    Only meaningful on a single rank, where every dof is owned.
    """
    out = template.zeros_like()
    pos = 0
    for d, n in zip(_parts(out), owned_slices(out)):
        d[:n] = values[pos:pos + n]
        pos += n
    if pos != len(values):
        raise ValueError(f"{len(values)} values for a vector of {pos} owned dofs")
    return out


def assemble(op, template) -> np.ndarray:
    """Dense matrix of ``op`` by applying it to every unit vector."""
    n = sum(owned_slices(template))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(to_array(op.apply(from_array(template, e))))
    return np.stack(cols, axis=1)
