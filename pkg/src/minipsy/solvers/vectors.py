"""Vector types usable by the Krylov solvers.

A vector needs ``copy``, ``zeros_like``, ``set_zero``, ``assign``, ``axpy``
(``y <- y + a x``), ``aypx`` (``y <- a y + x``), ``scale``, ``dot`` and
``norm``.  :class:`~minipsy.fields.Field` already provides them; this module
adds a numpy-array vector for dense checks and :class:`FieldVector` for
collections of fields.  Every ``dot`` is one deterministic reduction.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = ["ReductionCounter", "ArrayVector", "FieldVector"]


class ReductionCounter:
    def __init__(self):
        self.reductions = 0


class ArrayVector:
    """Plain numpy vector; reductions run in index order."""

    def __init__(self, data, counter: ReductionCounter | None = None):
        self.data = np.array(data, dtype=float)
        self.comm = counter if counter is not None else ReductionCounter()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"ArrayVector({self.data!r})"

    def copy(self):
        return ArrayVector(self.data.copy(), self.comm)

    def zeros_like(self):
        return ArrayVector(np.zeros_like(self.data), self.comm)

    def set_zero(self):
        self.data[:] = 0.0

    def assign(self, other):
        self.data[:] = other.data

    def axpy(self, alpha, x):
        self.data += alpha * x.data

    def aypx(self, alpha, x):
        self.data *= alpha
        self.data += x.data

    def scale(self, alpha):
        self.data *= alpha

    def dot(self, other) -> float:
        self.comm.reductions += 1
        return float(np.sum(self.data * other.data))

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


class FieldVector:
    """Ordered collection of fields acting as one vector.

    ``dot`` reduces all components in a single collective call and adds the
    per-field results in component order.
    """

    def __init__(self, fields, names=None):
        self.fields = list(fields)
        self.names = list(names) if names is not None else [f.name for f in self.fields]
        if not self.fields:
            raise ValueError("FieldVector needs at least one field")

    @property
    def comm(self):
        return self.fields[0].space.comm

    def __getitem__(self, i):
        if isinstance(i, str):
            return self.fields[self.names.index(i)]
        return self.fields[i]

    def __len__(self):
        return len(self.fields)

    def __repr__(self):
        return "FieldVector(" + ", ".join(f"{n}:{f.space.kind}" for n, f in zip(self.names, self.fields)) + ")"

    def copy(self):
        return FieldVector([f.copy() for f in self.fields], self.names)

    def zeros_like(self):
        return FieldVector([f.zeros_like() for f in self.fields], self.names)

    def set_zero(self):
        for f in self.fields:
            f.set_zero()

    def assign(self, other):
        self._check(other)
        for f, g in zip(self.fields, other.fields):
            f.assign(g)

    def axpy(self, alpha, x):
        self._check(x)
        for f, g in zip(self.fields, x.fields):
            f.axpy(alpha, g)

    def aypx(self, alpha, x):
        self._check(x)
        for f, g in zip(self.fields, x.fields):
            f.aypx(alpha, g)

    def scale(self, alpha):
        for f in self.fields:
            f.scale(alpha)

    def dot(self, other) -> float:
        self._check(other)
        parts = self.comm.allreduce_sums([f.local_products(g) for f, g in zip(self.fields, other.fields)])
        total = 0.0
        for p in parts:
            total += p
        return total

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def _check(self, other):
        if len(other.fields) != len(self.fields) or any(
                f.space is not g.space for f, g in zip(self.fields, other.fields)):
            raise ValueError("FieldVector shapes differ")

