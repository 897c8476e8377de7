"""Periodic-grid fields and the constant-coefficient operators acting on them.

All operators are Fourier multipliers on a cubic periodic box. Fields carry a
physical and/or spectral representation (real FFT layout, last axis halved)
and are treated as immutable: every operator returns a new field.

Derivative wavevectors have their Nyquist components set to zero, and
``|xi|^2`` is built from the same vectors, so that gradient, divergence,
Laplacian and the Leray projector are mutually consistent on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.fft as sfft

AXES = (-3, -2, -1)

# Levi-Civita symbol
EPS = np.zeros((3, 3, 3))
EPS[0, 1, 2] = EPS[1, 2, 0] = EPS[2, 0, 1] = 1.0
EPS[0, 2, 1] = EPS[2, 1, 0] = EPS[1, 0, 2] = -1.0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``n`` points per axis on a box of side ``L``.

    Physical coordinates are centred: ``x_j = (j - n/2) * dx``.
    """

    n: int = 64
    L: float = 16 * np.pi

    def __post_init__(self):
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two >= 8, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"box length must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return self.L / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n // 2 + 1)

    @property
    def npoints(self) -> int:
        return self.n**3

    @property
    def kmin(self) -> float:
        return 2 * np.pi / self.L

    @cached_property
    def x1d(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = self.x1d
        return x[:, None, None], x[None, :, None], x[None, None, :]

    @cached_property
    def points(self) -> np.ndarray:
        """Dense coordinate array of shape (3, n, n, n)."""
        return np.stack(np.broadcast_arrays(*self.coords)).astype(float)

    @cached_property
    def radius(self) -> np.ndarray:
        x, y, z = self.coords
        return np.sqrt(x**2 + y**2 + z**2)

    @cached_property
    def _int_modes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        full = np.fft.fftfreq(n, 1.0 / n).round().astype(int)
        half = np.arange(n // 2 + 1)
        full[n // 2] = 0
        half = half.copy()
        half[n // 2] = 0
        return full[:, None, None], full[None, :, None], half[None, None, :]

    @cached_property
    def xi(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Derivative wavevector components, broadcastable to the spectral shape."""
        return tuple(self.kmin * m.astype(float) for m in self._int_modes)

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.xi
        return kx**2 + ky**2 + kz**2

    @cached_property
    def kint2(self) -> np.ndarray:
        """``|xi|^2`` in units of ``kmin^2`` (exact integers)."""
        mx, my, mz = self._int_modes
        return mx**2 + my**2 + mz**2

    @cached_property
    def inv_k2(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape)
        np.divide(1.0, self.k2, out=out, where=self.k2 > 0)
        return out

    @cached_property
    def nyquist_free(self) -> np.ndarray:
        """Mask that is False on every mode carrying a Nyquist index."""
        n = self.n
        ix = np.ones(n, bool)
        ix[n // 2] = False
        iz = np.ones(n // 2 + 1, bool)
        iz[n // 2] = False
        return ix[:, None, None] & ix[None, :, None] & iz[None, None, :]

    @cached_property
    def dealias(self) -> np.ndarray:
        """Two-thirds rule mask (cubic truncation)."""
        n = self.n
        cut = n // 3
        full = np.abs(np.fft.fftfreq(n, 1.0 / n)) <= cut
        half = np.arange(n // 2 + 1) <= cut
        return full[:, None, None] & full[None, :, None] & half[None, None, :]

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each rfft mode in a full-spectrum sum."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.broadcast_to(w[None, None, :], self.spectral_shape)

    def fft(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfftn(a, axes=AXES)

    def ifft(self, a: np.ndarray) -> np.ndarray:
        return sfft.irfftn(a, s=self.shape, axes=AXES)

    def spectral_sum(self, a: np.ndarray) -> float:
        """Sum over the full spectrum of a (real) per-mode quantity given on the half spectrum."""
        return float(np.sum(self.weights * a))

    def boundary_band(self, width: float) -> np.ndarray:
        """Points within ``width`` of the box boundary."""
        half = self.L / 2 - width
        x, y, z = self.coords
        return (np.abs(x) > half) | (np.abs(y) > half) | (np.abs(z) > half)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = a.view()
    a.flags.writeable = False
    return a


class _Field:
    comp_shape: tuple[int, ...] = ()

    def __init__(self, grid: Grid, values, *, spectral: bool = False):
        values = np.asarray(values)
        base = grid.spectral_shape if spectral else grid.shape
        if values.shape != self.comp_shape + base:
            raise ValueError(
                f"{type(self).__name__} expects shape {self.comp_shape + base}, got {values.shape}"
            )
        if spectral:
            values = values.astype(complex, copy=False)
        else:
            if np.iscomplexobj(values):
                raise ValueError("physical values must be real")
            values = values.astype(float, copy=False)
        self.grid = grid
        self.is_spectral = spectral
        self._phys = None if spectral else _readonly(values)
        self._spec = _readonly(values) if spectral else None

    @property
    def representation(self) -> str:
        return "spectral" if self.is_spectral else "physical"

    @property
    def physical(self) -> np.ndarray:
        if self._phys is None:
            self._phys = _readonly(self.grid.ifft(self._spec))
        return self._phys

    @property
    def spectral(self) -> np.ndarray:
        if self._spec is None:
            self._spec = _readonly(self.grid.fft(self._phys))
        return self._spec

    def to_spectral(self):
        return type(self)(self.grid, self.spectral, spectral=True)

    def to_physical(self):
        return type(self)(self.grid, self.physical)

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(grid, np.zeros(cls.comp_shape + grid.shape))

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean (vectors) or Frobenius (tensors) modulus."""
        a = self.physical
        if not self.comp_shape:
            return np.abs(a)
        return np.sqrt(np.sum(a.reshape((-1,) + self.grid.shape) ** 2, axis=0))

    def mean(self) -> np.ndarray:
        return self.spectral[(...,) + (0, 0, 0)].real / self.grid.npoints

    def _like(self, other):
        if isinstance(other, _Field):
            if type(other) is not type(self) or other.grid != self.grid:
                raise TypeError("fields must share type and grid")
            return other.spectral if self.is_spectral else other.physical
        return other

    def _data(self):
        return self._spec if self.is_spectral else self._phys

    def _new(self, values):
        return type(self)(self.grid, values, spectral=self.is_spectral)

    def __add__(self, other):
        return self._new(self._data() + self._like(other))

    def __sub__(self, other):
        return self._new(self._data() - self._like(other))

    def __mul__(self, c):
        if isinstance(c, _Field):
            raise TypeError("use outer()/dot() for field products")
        return self._new(self._data() * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._new(self._data() / c)

    def __neg__(self):
        return self._new(-self._data())

    def norm(self, p: float = 2) -> float:
        return lp_norm(self, p)

    def __repr__(self):
        return f"{type(self).__name__}(n={self.grid.n}, L={self.grid.L:g}, {self.representation})"


class ScalarField(_Field):
    comp_shape = ()

    def is_mean_zero(self, tol: float = 1e-12) -> bool:
        scale = max(np.abs(self.physical).max(), 1e-300)
        return abs(float(self.mean())) <= tol * scale


class VectorField(_Field):
    comp_shape = (3,)


class TensorField(_Field):
    comp_shape = (3, 3)

    def transpose(self) -> "TensorField":
        return self._new(np.swapaxes(self._data(), 0, 1))

    def symmetric_part(self) -> "TensorField":
        return (self + self.transpose()) * 0.5

    def skew_part(self) -> "TensorField":
        return (self - self.transpose()) * 0.5

    def trace(self) -> ScalarField:
        d = self._data()
        return ScalarField(self.grid, d[0, 0] + d[1, 1] + d[2, 2], spectral=self.is_spectral)

    def is_skew(self, tol: float = 0.0) -> bool:
        a = self.physical
        return bool(np.abs(a + np.swapaxes(a, 0, 1)).max() <= tol * max(np.abs(a).max(), 1e-300))

    @classmethod
    def from_axial(cls, f: VectorField) -> "TensorField":
        """Skew tensor ``F_ij = eps_ijk f_k``."""
        return cls(f.grid, np.einsum("ijk,k...->ij...", EPS, f.physical))

    def axial(self) -> VectorField:
        """Inverse of :meth:`from_axial` applied to the skew part."""
        return VectorField(self.grid, 0.5 * np.einsum("ijk,ij...->k...", EPS, self.physical))

    @classmethod
    def identity_times(cls, q: ScalarField) -> "TensorField":
        out = np.zeros((3, 3) + q.grid.shape)
        for i in range(3):
            out[i, i] = q.physical
        return cls(q.grid, out)


# --- array-level spectral kernels (used directly by the solver) -------------


def s_div(grid: Grid, V: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.xi
    return 1j * (kx * V[0] + ky * V[1] + kz * V[2])


def s_grad(grid: Grid, S: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.xi
    return np.stack([1j * kx * S, 1j * ky * S, 1j * kz * S])


def s_curl(grid: Grid, V: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.xi
    return 1j * np.stack([ky * V[2] - kz * V[1], kz * V[0] - kx * V[2], kx * V[1] - ky * V[0]])


def s_div_tensor(grid: Grid, T: np.ndarray) -> np.ndarray:
    """(div T)_i = d_j T_ij."""
    kx, ky, kz = grid.xi
    return 1j * (kx * T[:, 0] + ky * T[:, 1] + kz * T[:, 2])


def s_leray(grid: Grid, V: np.ndarray) -> np.ndarray:
    kx, ky, kz = grid.xi
    proj = (kx * V[0] + ky * V[1] + kz * V[2]) * grid.inv_k2
    return np.stack([V[0] - kx * proj, V[1] - ky * proj, V[2] - kz * proj])


def s_pressure(grid: Grid, T: np.ndarray) -> np.ndarray:
    """Symbol of the pressure operator: ``-xi_i xi_j T_ij / |xi|^2``."""
    xi = grid.xi
    acc = np.zeros(grid.spectral_shape, complex)
    for i in range(3):
        for j in range(3):
            acc += xi[i] * xi[j] * T[i, j]
    return -acc * grid.inv_k2


def s_norm2(grid: Grid, V: np.ndarray) -> float:
    """Squared L2 norm of the physical field whose rfft is ``V``."""
    a = np.abs(V) ** 2
    if a.ndim > 3:
        a = a.reshape((-1,) + grid.spectral_shape).sum(axis=0)
    return grid.spectral_sum(a) * grid.cell_volume / grid.npoints


def s_inner(grid: Grid, A: np.ndarray, B: np.ndarray) -> float:
    a = (np.conj(A) * B).real
    if a.ndim > 3:
        a = a.reshape((-1,) + grid.spectral_shape).sum(axis=0)
    return grid.spectral_sum(a) * grid.cell_volume / grid.npoints


# --- field-level operators ---------------------------------------------------


def grad(s: ScalarField) -> VectorField:
    return VectorField(s.grid, s_grad(s.grid, s.spectral), spectral=True)


def gradient(v: VectorField) -> TensorField:
    """Velocity gradient with ``[i, j] = d_j v_i``."""
    g = v.grid
    return TensorField(g, np.stack([s_grad(g, v.spectral[i]) for i in range(3)]), spectral=True)


def div(f: VectorField | TensorField):
    if isinstance(f, TensorField):
        return VectorField(f.grid, s_div_tensor(f.grid, f.spectral), spectral=True)
    return ScalarField(f.grid, s_div(f.grid, f.spectral), spectral=True)


def curl(v: VectorField) -> VectorField:
    return VectorField(v.grid, s_curl(v.grid, v.spectral), spectral=True)


def laplacian(f):
    return type(f)(f.grid, -f.grid.k2 * f.spectral, spectral=True)


def leray(v: VectorField) -> VectorField:
    return VectorField(v.grid, s_leray(v.grid, v.spectral), spectral=True)


def dot(a: VectorField, b: VectorField) -> ScalarField:
    return ScalarField(a.grid, np.sum(a.physical * b.physical, axis=0))


def inner(a: _Field, b: _Field) -> float:
    """L2 inner product on the box (grid quadrature)."""
    return float(np.sum(a.physical * b.physical) * a.grid.cell_volume)


def outer(v: VectorField, u: VectorField, dealias: bool = True) -> TensorField:
    """Tensor product ``(v ⊗ u)_ij = v_i u_j``, two-thirds dealiased by default."""
    prod = np.einsum("i...,j...->ij...", v.physical, u.physical)
    if not dealias:
        return TensorField(v.grid, prod)
    g = v.grid
    return TensorField(g, g.fft(prod) * g.dealias, spectral=True)


def heat_semigroup(f, tau: float):
    """Apply ``exp(tau * Laplacian)`` mode by mode."""
    if tau < 0:
        raise ValueError(f"heat semigroup needs tau >= 0, got {tau}")
    if tau == 0:
        return f
    return type(f)(f.grid, f.spectral * np.exp(-f.grid.k2 * tau), spectral=True)


def lp_norm(f: _Field, p: float = 2) -> float:
    """Grid L_p norm using the pointwise Euclidean/Frobenius modulus."""
    if p == np.inf:
        return float(f.magnitude().max())
    if not p >= 1:
        raise ValueError(f"L_p norm needs p >= 1, got {p}")
    m = f.magnitude()
    if p == 1:
        s = m.sum()
    elif p == 2:
        s = np.sum(m * m)
    else:
        s = np.sum(m**p)
    return float((s * f.grid.cell_volume) ** (1.0 / p))


def spectral_l2_norm(f: _Field) -> float:
    """L2 norm evaluated from the spectral coefficients (Parseval)."""
    return float(np.sqrt(s_norm2(f.grid, f.spectral)))


def divergence_residual(f: VectorField) -> float:
    """Max over modes of ``|xi . f_hat|`` relative to the l2 size of ``f_hat``."""
    F = f.spectral
    size = np.sqrt(f.grid.spectral_sum(np.sum(np.abs(F) ** 2, axis=0)))
    if size == 0:
        return 0.0
    kx, ky, kz = f.grid.xi
    return float(np.abs(kx * F[0] + ky * F[1] + kz * F[2]).max() / size)


def curl_inverse(G: VectorField, tol: float = 1e-8) -> VectorField:
    """Divergence-free, mean-zero ``A`` with ``rot A = G``.

    ``G`` must itself be mean-zero and divergence-free (within ``tol``).
    """
    g = G.grid
    Gs = G.spectral
    size = np.sqrt(g.spectral_sum(np.sum(np.abs(Gs) ** 2, axis=0)))
    if size > 0:
        if np.abs(Gs[:, 0, 0, 0]).max() > tol * size:
            raise ValueError("curl_inverse: source has a nonzero mean")
        res = divergence_residual(G)
        if res > tol * max(1.0, np.sqrt(g.k2.max())):
            raise ValueError(f"curl_inverse: source is not divergence-free (residual {res:.3e})")
    A = s_curl(g, Gs) * g.inv_k2
    return VectorField(g, A, spectral=True)


def pressure_op(F: TensorField) -> ScalarField:
    """Mean-zero ``q`` solving ``Laplacian q = -div div F``."""
    return ScalarField(F.grid, s_pressure(F.grid, F.spectral), spectral=True)


def skew_div_to_potential(F: TensorField) -> VectorField:
    """The map ``F -> A_F`` with ``rot A_F = -div F`` (requires ``div div F = 0``)."""
    return curl_inverse(-div(F))


def compatible_part(F: TensorField) -> TensorField:
    """Orthogonal projection onto tensors with ``div div F = 0`` (and zero mean)."""
    g = F.grid
    xi = g.xi
    T = F.spectral
    c = np.zeros(g.spectral_shape, complex)
    for i in range(3):
        for j in range(3):
            c += xi[i] * xi[j] * T[i, j]
    c *= g.inv_k2 * g.inv_k2
    out = np.empty_like(T)
    for i in range(3):
        for j in range(3):
            out[i, j] = T[i, j] - xi[i] * xi[j] * c
    out[:, :, 0, 0, 0] = 0
    return TensorField(g, out, spectral=True)


def _potential_adjoint(A: VectorField) -> TensorField:
    # curl_inverse is symmetric and (-div)^* = gradient
    g = A.grid
    B = VectorField(g, s_curl(g, A.spectral) * g.inv_k2, spectral=True)
    return gradient(B)


def _pressure_adjoint(q: ScalarField) -> TensorField:
    g = q.grid
    xi = g.xi
    out = np.empty((3, 3) + g.spectral_shape, complex)
    for i in range(3):
        for j in range(3):
            out[i, j] = -xi[i] * xi[j] * g.inv_k2 * q.spectral
    return TensorField(g, out, spectral=True)


@dataclass
class PowerIterationResult:
    norm: float
    iterations: int
    converged: bool
    history: list


def power_iteration(
    apply: Callable, adjoint: Callable, x0, *, rtol: float = 1e-10, maxiter: int = 200
) -> PowerIterationResult:
    """Largest singular value of ``apply`` via iteration on ``adjoint∘apply``."""
    x = x0 / lp_norm(x0, 2)
    history = []
    sigma_old = np.inf
    for it in range(1, maxiter + 1):
        y = apply(x)
        sigma = lp_norm(y, 2)
        history.append(sigma)
        if sigma == 0:
            return PowerIterationResult(0.0, it, True, history)
        if abs(sigma - sigma_old) <= rtol * sigma:
            return PowerIterationResult(sigma, it, True, history)
        sigma_old = sigma
        z = adjoint(y)
        x = z / lp_norm(z, 2)
    return PowerIterationResult(sigma, maxiter, False, history)


def random_skew(grid: Grid, rng: np.random.Generator) -> TensorField:
    return TensorField.from_axial(VectorField(grid, rng.standard_normal((3,) + grid.shape)))


def random_symmetric(grid: Grid, rng: np.random.Generator) -> TensorField:
    a = rng.standard_normal((3, 3) + grid.shape)
    return TensorField(grid, 0.5 * (a + np.swapaxes(a, 0, 1)))


def curl_inverse_operator_norm(grid: Grid, seed: int = 0, domain: str = "compatible", **kw) -> PowerIterationResult:
    """Estimate ``||K||`` for ``K: F -> A_F``.

    ``domain="compatible"`` iterates over all tensors with ``div div F = 0``;
    ``domain="skew"`` restricts to skew-symmetric tensors.
    """
    rng = np.random.default_rng(seed)
    if domain == "skew":
        return power_iteration(
            skew_div_to_potential,
            lambda A: _potential_adjoint(A).skew_part(),
            random_skew(grid, rng),
            **kw,
        )
    if domain != "compatible":
        raise ValueError(f"unknown domain {domain!r}")
    x0 = compatible_part(TensorField(grid, rng.standard_normal((3, 3) + grid.shape)))
    return power_iteration(
        skew_div_to_potential, lambda A: compatible_part(_potential_adjoint(A)), x0, **kw
    )


def pressure_operator_norm(grid: Grid, seed: int = 0, **kw) -> PowerIterationResult:
    """Estimate ``||M||`` for the pressure operator on symmetric tensor fields."""
    rng = np.random.default_rng(seed)
    return power_iteration(
        pressure_op, lambda q: _pressure_adjoint(q).symmetric_part(), random_symmetric(grid, rng), **kw
    )
