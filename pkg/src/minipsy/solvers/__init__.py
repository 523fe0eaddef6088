"""Linear algebra: vectors, Krylov methods, column operators and preconditioners."""
from .vectors import ArrayVector, FieldVector, ReductionCounter
from .krylov import SolverReport, IdentityPreconditioner, MatrixOperator, cg, gmres, bicgstab

__all__ = [
    "ArrayVector", "FieldVector", "ReductionCounter",
    "SolverReport", "IdentityPreconditioner", "MatrixOperator",
    "cg", "gmres", "bicgstab",
]
