"""Input validation helpers and the package's exception types."""

import numpy as np


class InputError(ValueError):
    """Raised when an argument has the wrong shape, range, or contains non-finite values."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values or an unsolvable system."""


def as_float_array(x, name, ndim=None, shape=None):
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if shape is not None:
        if arr.shape != tuple(shape):
            raise InputError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_length(x, n, name):
    arr = as_float_array(x, name, ndim=1)
    if arr.shape[0] != n:
        raise InputError(f"{name} must have length {n}, got {arr.shape[0]}")
    return arr


def check_rotation(R, name="rotation", tol=1e-6):
    R = as_float_array(R, name, shape=(3, 3))
    defect = np.max(np.abs(R.T @ R - np.eye(3)))
    if defect > tol or np.linalg.det(R) < 0:
        raise InputError(f"{name} is not a proper rotation (orthonormality defect {defect:.2e})")
    return R
