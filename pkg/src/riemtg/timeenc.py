"""Fourier time features and their lift onto a curved manifold."""

from __future__ import annotations

import math

import numpy as np

from . import manifold as M
from . import tensor as T
from .tensor import Tensor, as_tensor


def frequency_ladder(half_dim: int, t_max: float) -> np.ndarray:
    """Geometric frequencies with ``w_max * t_max = 1e4`` and ``w_min * t_max = 1``."""
    if half_dim < 1:
        raise ValueError("half_dim must be positive")
    t_max = max(float(t_max), 1e-12)
    if half_dim == 1:
        return np.array([1.0 / t_max])
    expo = np.linspace(4.0, 0.0, half_dim)
    return 10.0 ** expo / t_max


class TimeEncoder:
    """Learned-frequency cos/sin features.

    ``phi0(t)`` has ``2 * half_dim`` entries ``sqrt(1/half_dim) [cos w_k t, sin w_k t]``
    and unit Euclidean norm for every ``t``.  Inputs are time deltas; they are
    divided by ``time_scale`` (typically the mean inter-event gap) first.
    """

    def __init__(self, half_dim: int, t_max: float = 1.0, time_scale: float = 1.0,
                 omegas: np.ndarray | None = None):
        self.half_dim = int(half_dim)
        self.time_scale = float(time_scale)
        if omegas is None:
            omegas = frequency_ladder(self.half_dim, t_max)
        omegas = np.asarray(omegas, dtype=np.float64)
        if omegas.shape != (self.half_dim,):
            raise T.ShapeError(f"expected {self.half_dim} frequencies, got shape {omegas.shape}")
        self.omegas = T.parameter(omegas, name="omegas")

    @property
    def dim(self) -> int:
        return 2 * self.half_dim

    def parameters(self) -> list[Tensor]:
        return [self.omegas]

    def encode_euclidean(self, t) -> Tensor:
        """``(..., 2*half_dim)`` features for times ``t`` of shape ``(...)``."""
        tv = np.asarray(t.value if isinstance(t, Tensor) else t, dtype=np.float64)
        if not np.all(np.isfinite(tv)):
            raise ValueError("time points must be finite")
        phase = Tensor(tv[..., None] / self.time_scale) * self.omegas
        scale = math.sqrt(1.0 / self.half_dim)
        pair = T.stack([T.cos(phase), T.sin(phase)], axis=-1)
        return pair.reshape(*tv.shape, self.dim) * scale

    def encode_riemannian(self, t, kappa) -> Tensor:
        """Lift ``phi0(t)`` to the curvature-``kappa`` manifold.

        Because ``|phi0| = 1`` the result is
        ``[cos_k(sqrt|k|) / sqrt|k|, sin_k(sqrt|k|) / sqrt|k| * phi0(t)]``.
        """
        phi = self.encode_euclidean(t)
        k = M.kappa_tensor(kappa)
        if M.is_flat(k):
            return phi
        s = np.where(k.value < 0, -1.0, 1.0)
        ska = M.sqrt_abs(k)
        head = M.kcos(ska, s) / ska
        tail = M.ksin(ska, s) / ska
        if head.ndim == 0:
            head = head.reshape(1)
        lead = head + Tensor(np.zeros(phi.shape[:-1] + (1,)))
        return T.concat([lead, tail * phi], axis=-1)

    def kernel(self, ti, tj, kappa) -> Tensor:
        """Inner product of the lifted encodings of ``ti`` and ``tj``."""
        k = M.kappa_tensor(kappa)
        return M.inner(self.encode_riemannian(ti, k), self.encode_riemannian(tj, k), k)

    def euclidean_kernel(self, ti, tj) -> Tensor:
        return (self.encode_euclidean(ti) * self.encode_euclidean(tj)).sum(axis=-1, keepdims=True)


def kernel_coefficients(kappa: float) -> tuple[float, float]:
    """``(A, B)`` with ``K_R = A * K_E + B`` for curvature ``kappa``.

    ``A = sin_k(sqrt|k|)^2 / |k|`` and ``B = sign(k) cos_k(sqrt|k|)^2 / |k|``, so
    that ``K_R(t, t) = 1 / kappa``.
    """
    k = float(kappa)
    if abs(k) < M.KAPPA_EPS:
        return 1.0, 0.0
    r = math.sqrt(abs(k))
    if k < 0:
        return math.sinh(r) ** 2 / abs(k), -math.cosh(r) ** 2 / abs(k)
    return math.sin(r) ** 2 / k, math.cos(r) ** 2 / k
