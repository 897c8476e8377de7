"""Heat kernel, its Newtonian potential, and the Oseen-type third-order tensor.

With ``Phi`` the decaying solution of ``Laplacian Phi = Gamma``,

    K_ijl = Phi_{,ijl} - delta_il Phi_{,kkj}

is the kernel of ``v_i = int int K_ijl(x - y, t - s) cF_lj(y, s) dy ds``.
``Phi`` is radial, ``Phi = f(|x|^2)``, so every derivative reduces to the
three radial coefficients ``D_n = 2^n f^(n)``, which are closed-form lower
incomplete gamma functions.  Parabolic scaling ``K(x, t) = t^-2 K(x/sqrt t, 1)``
is used to reduce everything to ``t = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .fields import Grid, TensorField, VectorField

C0 = (4 * np.pi) ** -1.5
# far-field modulus: |K(x, t)| -> FAR_FIELD / |x|^4
FAR_FIELD = np.sqrt(90.0) / (4 * np.pi)


def _check_time(t):
    if np.any(np.asarray(t) <= 0):
        raise ValueError("kernel evaluation needs t > 0")


def _g(n: int, eta: np.ndarray) -> np.ndarray:
    """``(4/eta)^(n+1/2) Gamma(n+1/2) P(n+1/2, eta/4)``, smooth through eta = 0."""
    eta = np.asarray(eta, float)
    a = n + 0.5
    z = eta / 4
    out = np.empty_like(z)
    small = z < 1e-2
    zs = z[small]
    # P(a,z) series: z^a e^-z / Gamma(a+1) * sum z^k / ((a+1)...(a+k))
    term = np.ones_like(zs)
    acc = np.ones_like(zs)
    for k in range(1, 10):
        term = term * zs / (a + k)
        acc = acc + term
    out[small] = np.exp(-zs) * acc / a
    zl = z[~small]
    out[~small] = zl**-a * special.gamma(a) * special.gammainc(a, zl)
    return out


def radial_coefficients(eta):
    """Return (D1, D2, D3, gamma) at t = 1 as functions of ``eta = |x|^2``.

    ``Phi_{,i} = D1 x_i``, ``Phi_{,ij} = D1 delta_ij + D2 x_i x_j`` and
    ``Phi_{,ijl} = D2 (delta_ij x_l + delta_il x_j + delta_jl x_i) + D3 x_i x_j x_l``;
    ``gamma`` is the heat kernel at t = 1.
    """
    eta = np.asarray(eta, float)
    d1 = 0.5 * C0 * _g(1, eta)
    d2 = -0.25 * C0 * _g(2, eta)
    d3 = 0.125 * C0 * _g(3, eta)
    gam = C0 * np.exp(-eta / 4)
    return d1, d2, d3, gam


def heat_kernel(x, t):
    """Gaussian heat kernel Gamma(x, t); ``x`` has trailing axis of length 3."""
    _check_time(t)
    x = np.asarray(x, float)
    r2 = np.sum(x * x, axis=-1)
    return (4 * np.pi * t) ** -1.5 * np.exp(-r2 / (4 * t))


def phi_potential(x, t):
    """``Phi(x, t) = -erf(|x| / (2 sqrt t)) / (4 pi |x|)``, with its finite value at 0."""
    _check_time(t)
    x = np.asarray(x, float)
    r = np.atleast_1d(np.sqrt(np.sum(x * x, axis=-1)))
    s = 2 * np.sqrt(t)
    out = np.full(r.shape, -1.0 / (4 * np.pi * np.sqrt(np.pi * t)))
    big = r >= 1e-6 * s
    out[big] = -special.erf(r[big] / s) / (4 * np.pi * r[big])
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else float(out[0])


def oseen_kernel(x, t) -> np.ndarray:
    """Full tensor ``K_ijl(x, t)``; output shape ``x.shape[:-1] + (3, 3, 3)``."""
    _check_time(t)
    x = np.asarray(x, float)
    rho = x / np.sqrt(t)
    d1, d2, d3, gam = radial_coefficients(np.sum(rho * rho, axis=-1))
    eye = np.eye(3)
    r = rho
    sym = (
        np.einsum("ij,...l->...ijl", eye, r)
        + np.einsum("il,...j->...ijl", eye, r)
        + np.einsum("jl,...i->...ijl", eye, r)
    )
    k = d2[..., None, None, None] * sym
    k += d3[..., None, None, None] * np.einsum("...i,...j,...l->...ijl", r, r, r)
    k += 0.5 * gam[..., None, None, None] * np.einsum("il,...j->...ijl", eye, r)
    return k / t**2


def kernel_contract(x, t, M) -> np.ndarray:
    """``K_ijl(x, t) M_lj`` for a 3x3 ``M`` (constant or with matching leading axes).

    Uses ``v = D2 [(M + M^T) r + tr(M) r] + D3 r (r.M r) + gamma/2 M r``, so a
    skew ``M`` only touches the Gaussian term.
    """
    _check_time(t)
    x = np.asarray(x, float)
    M = np.asarray(M, float)
    rho = x / np.sqrt(t)
    eta = np.sum(rho * rho, axis=-1)
    Mr = np.einsum("...ij,...j->...i", M, rho)
    gam = C0 * np.exp(-eta / 4)
    out = 0.5 * gam[..., None] * Mr
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    trace = np.trace(M, axis1=-2, axis2=-1)
    if np.any(S != 0) or np.any(trace != 0):
        _, d2, d3, _ = radial_coefficients(eta)
        Sr = np.einsum("...ij,...j->...i", S, rho)
        rSr = np.sum(rho * Sr, axis=-1)
        out = out + d2[..., None] * (2 * Sr + np.asarray(trace)[..., None] * rho)
        out = out + (d3 * rSr)[..., None] * rho
    return out / t**2


def kernel_modulus(rho) -> np.ndarray:
    """Frobenius norm ``|K(x, 1)|`` as a function of ``rho = |x|``."""
    rho = np.atleast_1d(np.asarray(rho, float))
    x = np.zeros(rho.shape + (3,))
    x[..., 0] = rho
    k = oseen_kernel(x, 1.0)
    return np.sqrt(np.sum(k.reshape(rho.shape + (27,)) ** 2, axis=-1))


def _spectral_coefficient(n: int, r: float, t: float) -> float:
    # D_n = -(1/2pi^2) int_0^inf e^{-t k^2} k^{2n} (-1)^n j_n(kr)/(kr)^n dk
    dfact = float(special.factorial2(2 * n + 1))

    def jn_over(z):
        if z < 1e-2:
            z2 = z * z
            return (1 - z2 / (2 * (2 * n + 3)) + z2 * z2 / (8 * (2 * n + 3) * (2 * n + 5))) / dfact
        return special.spherical_jn(n, z) / z**n

    kmax = np.sqrt(45.0 / t)
    val, _ = integrate.quad(
        lambda k: np.exp(-t * k * k) * k ** (2 * n) * jn_over(k * r),
        0.0, kmax, limit=400, epsabs=0.0, epsrel=1e-12,
    )
    return -((-1) ** n) * val / (2 * np.pi**2)


def oseen_kernel_spectral(x, t) -> np.ndarray:
    """``K_ijl(x, t)`` via the radial inverse transform of the multiplier
    ``-i xi_j exp(-t|xi|^2) (delta_il - xi_i xi_l / |xi|^2)``.

    Independent of the incomplete-gamma closed form; slow, for cross-checks.
    """
    _check_time(t)
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    d2 = _spectral_coefficient(2, r, t)
    d3 = _spectral_coefficient(3, r, t)
    # Phi_{,kkj} = (5 D2 + D3 r^2) x_j
    grad_gamma = (5 * d2 + d3 * r * r) * x
    eye = np.eye(3)
    sym = np.einsum("ij,l->ijl", eye, x) + np.einsum("il,j->ijl", eye, x) + np.einsum("jl,i->ijl", eye, x)
    return d2 * sym + d3 * np.einsum("i,j,l->ijl", x, x, x) - np.einsum("il,j->ijl", eye, grad_gamma)


# --- integrated constants ----------------------------------------------------


@lru_cache(maxsize=None)
def _gl(order: int):
    return special.roots_legendre(order)


def _composite_gauss(f, edges, order=16) -> float:
    xg, wg = _gl(order)
    a = np.asarray(edges[:-1])[:, None]
    b = np.asarray(edges[1:])[:, None]
    nodes = 0.5 * (b - a) * xg[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * wg[None, :]
    return float(np.sum(weights * f(nodes)))


def _l1_at(t: float, panels: int, rcut: float) -> float:
    s = np.sqrt(t)
    inner = np.linspace(0.0, s, panels + 1)
    outer = s * np.geomspace(1.0, rcut, 4 * panels + 1)
    edges = np.concatenate([inner, outer[1:]])

    def integrand(r):
        x = np.zeros(r.shape + (3,))
        x[..., 0] = r
        k = oseen_kernel(x, t).reshape(r.shape + (27,))
        return 4 * np.pi * r * r * np.sqrt(np.sum(k * k, axis=-1))

    body = _composite_gauss(integrand, edges)
    return body + 4 * np.pi * FAR_FIELD / (rcut * s)


def kernel_l1_quadrature(t: float, panels: int = 16, rcut: float = 16.0) -> tuple[float, float]:
    """``int |K(x, t)| dx`` and an error estimate from a halved mesh.

    Gauss rules on ``|x| < sqrt t`` and on geometric panels out to
    ``rcut sqrt t``; beyond that the far-field ``|x|^-4`` tail is integrated
    exactly (the Gaussian corrections there are below ``exp(-rcut^2/4)``).
    """
    _check_time(t)
    fine = _l1_at(t, panels, rcut)
    coarse = _l1_at(t, max(panels // 2, 1), rcut)
    return fine, abs(fine - coarse)


def kernel_l1_norm(t: float) -> float:
    value, err = kernel_l1_quadrature(t)
    if err > 1e-3 * value:
        raise RuntimeError(f"kernel L1 quadrature did not converge (err {err:.2e})")
    return value


def kernel_bound_lattice(n_r: int = 100, n_t: int = 100, r_max: float = 10.0, t_range=(1e-2, 1e2)) -> float:
    """Max of ``|K(x,t)| (t + |x|^2)^2`` over a radius x time lattice."""
    r = np.linspace(0.0, r_max, n_r)
    t = np.geomspace(*t_range, n_t)
    rho = r[None, :] / np.sqrt(t[:, None])
    # |K(x,t)| (t+|x|^2)^2 = |K(rho,1)| (1+rho^2)^2 by scaling
    vals = kernel_modulus(rho.ravel()) * (1 + rho.ravel() ** 2) ** 2
    return float(vals.max())


@dataclass(frozen=True)
class KernelConstants:
    c1: float
    c_star: float


@lru_cache(maxsize=1)
def kernel_constants() -> KernelConstants:
    """Measured ``c1`` (pointwise bound) and ``c_star`` (integrated bound)."""
    rho = np.linspace(0.0, 20.0, 20001)
    c1 = float(np.max(kernel_modulus(rho) * (1 + rho**2) ** 2))
    return KernelConstants(c1=c1, c_star=float(kernel_l1_norm(1.0)))


# --- direct convolution oracle ----------------------------------------------


class FieldSeries:
    """Fields at increasing times, either stored or produced on demand by ``gen``."""

    def __init__(self, times, fields=None, gen=None):
        self.times = np.asarray(times, float)
        if (fields is None) == (gen is None):
            raise ValueError("give exactly one of fields or gen")
        if fields is not None and len(fields) != len(self.times):
            raise ValueError("times and fields differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase")
        self._fields = fields
        self._gen = gen

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k):
        return self._fields[k] if self._fields is not None else self._gen(self.times[k])

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def grid(self) -> Grid:
        return self[0].grid

    @classmethod
    def sample(cls, gen, times):
        return cls(times, gen=gen)


def _check_mesh(series: FieldSeries, t: float):
    ts = series.times
    if len(ts) < 8:
        raise ValueError(f"time mesh too coarse: {len(ts)} samples (need >= 8)")
    h = np.diff(ts)
    if abs(ts[0]) > 1e-12 * max(t, 1) or abs(ts[-1] - t) > 1e-9 * max(t, 1):
        raise ValueError("time mesh must cover [0, t]")
    if np.ptp(h) > 1e-9 * h.mean():
        raise ValueError("time mesh must be uniform")
    return h.mean()


def _separable(series: FieldSeries, tol=1e-12):
    """Try ``F(y, s) = theta(s) f(y) S``; return (theta, f, S) or None."""
    norms = np.array([np.linalg.norm(f.physical) for f in series])
    k = int(np.argmax(norms))
    if norms[k] == 0:
        return np.zeros(len(series)), None, None
    ref = series[k].physical
    nref = norms[k] ** 2
    theta = np.empty(len(series))
    for i, f in enumerate(series):
        a = f.physical
        theta[i] = np.sum(a * ref) / nref
        if np.linalg.norm(a - theta[i] * ref) > tol * norms[k]:
            return None
    R = ref.reshape(9, -1)
    w, vecs = np.linalg.eigh(R @ R.T)
    S = vecs[:, -1]
    f = S @ R
    if np.linalg.norm(R - np.outer(S, f)) > tol * norms[k]:
        return None
    return theta, f.reshape(ref.shape[-3:]), S.reshape(3, 3)


def _trapezoid_weights(m: int, h: float) -> np.ndarray:
    w = np.full(m, h)
    w[0] = w[-1] = 0.5 * h
    return w


def convolution_solve(
    F_series: FieldSeries,
    u_series: FieldSeries | None,
    t: float,
    *,
    v_series: FieldSeries | None = None,
    targets: np.ndarray | None = None,
) -> VectorField | np.ndarray:
    """Evaluate ``v(., t) = int_0^t int K(x - y, t - s) cF(y, s) dy ds`` directly.

    ``cF = -v (x) u + F``.  With ``u`` absent (or identically zero) and ``F``
    separable in time, the kernel is integrated in time on the offset lattice
    first and the space sum is a sum of shifted slices over the support of
    ``F`` (whole space, no periodic images).  Otherwise a plain target x
    source x time sum is used, with ``v`` inside ``cF`` taken from
    ``v_series`` (one Picard pass); that path is O(targets * sources * steps)
    and is meant for coarse grids or a subset of ``targets`` (k, 3) points.

    Time integration is the trapezoid rule; the ``s = t`` node is dropped
    (the kernel is singular there), so accuracy is best when ``cF`` vanishes
    near ``s = t``.
    """
    h = _check_mesh(F_series, t)
    grid: Grid = F_series.grid
    drift = u_series is not None and any(np.any(f.physical != 0) for f in u_series)
    if drift:
        _check_mesh(u_series, t)
        if v_series is None:
            raise ValueError("a drift needs v_series for the Picard pass")
        _check_mesh(v_series, t)
    weights = _trapezoid_weights(len(F_series.times), h)

    if not drift and targets is None:
        sep = _separable(F_series)
        if sep is not None:
            theta, f, S = sep
            if f is None:
                return VectorField.zeros(grid)
            return VectorField(grid, _separable_solve(grid, theta, f, S, F_series.times, weights, t))

    return _direct_solve(grid, F_series, u_series if drift else None, v_series, t, weights, targets)


def _separable_solve(grid, theta, f, S, times, weights, t):
    n, dx = grid.n, grid.dx
    # offsets x - y on the full (2n-1)^3 lattice
    off = np.arange(-(n - 1), n) * dx
    Z = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1)
    W = np.zeros(Z.shape[:-1] + (3,))
    for s, w, th in zip(times, weights, theta):
        if th == 0 or s >= t:
            continue
        W += (w * th) * kernel_contract(Z, t - s, S)
    W = np.moveaxis(W, -1, 0)
    v = np.zeros((3,) + grid.shape)
    idx = np.argwhere(f != 0)
    for iy, jy, ky in idx:
        # x - y offset index: ix - iy + (n-1)
        sl = W[:, n - 1 - iy: 2 * n - 1 - iy, n - 1 - jy: 2 * n - 1 - jy, n - 1 - ky: 2 * n - 1 - ky]
        v += f[iy, jy, ky] * sl
    return v * grid.cell_volume


def _direct_solve(grid, F_series, u_series, v_series, t, weights, targets):
    pts = grid.points.reshape(3, -1).T
    tgt = pts if targets is None else np.asarray(targets, float).reshape(-1, 3)
    out = np.zeros((len(tgt), 3))
    for k, (s, w) in enumerate(zip(F_series.times, weights)):
        if s >= t:
            continue
        cF = F_series[k].physical.copy()
        if u_series is not None:
            cF -= np.einsum("i...,j...->ij...", v_series[k].physical, u_series[k].physical)
        src = cF.reshape(3, 3, -1)
        live = np.flatnonzero(np.any(src.reshape(9, -1) != 0, axis=0))
        if live.size == 0:
            continue
        M = np.moveaxis(src[:, :, live], -1, 0)
        for a in range(len(tgt)):
            z = tgt[a] - pts[live]
            out[a] += w * kernel_contract(z, t - s, M).sum(axis=0)
    out *= grid.cell_volume
    if targets is None:
        return VectorField(grid, out.T.reshape((3,) + grid.shape))
    return out


def sample_series(gen, times: Sequence[float]) -> FieldSeries:
    return FieldSeries.sample(gen, times)
