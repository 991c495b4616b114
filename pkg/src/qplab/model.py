"""The operator family: potential, hopping kernel, frequency, assembly.

The Hamiltonian acts on ``l^2(Z^d)`` as ``H(theta) = eps * W + diag(v(theta +
n . omega))`` with a Toeplitz long-range part ``W(x, y) = phi(x - y)`` whose
amplitudes decay like ``exp(-alpha log^rho(1 + ||n||))``.  Everything here is
finite-volume: restrictions are dense matrices over explicit site sets, and
the shifted matrix ``T = H - E`` is what the Green's function machinery
inverts.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    BoxTooLarge,
    DecayViolation,
    DegenerateRatio,
    DiophantineViolation,
    NotHermitian,
    OutOfStrip,
)
from .lattice import LatticeBox, box_around
from .torus import torus_norm, wrap_to_unit

TWO_PI = 2.0 * math.pi


def log_decay_envelope(alpha: float, rho: float, dist) -> np.ndarray:
    """log of the decay envelope: ``-alpha * log^rho(1 + dist)``."""
    dist = np.asarray(dist, dtype=float)
    out = -alpha * np.log1p(dist) ** rho
    return float(out) if out.ndim == 0 else out


def decay_envelope(alpha: float, rho: float, dist) -> np.ndarray:
    return np.exp(log_decay_envelope(alpha, rho, dist))


# ---------------------------------------------------------------------------
# potential


@dataclass(frozen=True)
class PotentialSpec:
    """Analytic 1-periodic potential with declared Morse constants.

    ``kappa1``/``kappa2`` bound the two-sided Morse ratio
    ``|v(z1)-v(z2)| / (||z1-z2||_T ||z1+z2||_T)``; ``a``/``b`` are the range
    endpoints of v on the real torus and ``beta`` the spectral margin.
    ``v_sup`` dominates ``|v|`` on the strip of half-width ``R``.
    """

    kind: str
    strip: float
    kappa1: float
    kappa2: float
    a: float
    b: float
    beta: float
    v_sup: float
    fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.strip <= 0:
            raise ValueError("strip half-width must be positive")
        if not (self.kappa1 > 0 and self.kappa2 >= self.kappa1):
            raise ValueError("need 0 < kappa1 <= kappa2")
        if self.beta <= 0:
            raise ValueError("spectral margin beta must be positive")
        if self.a > self.b:
            raise ValueError("range endpoints must satisfy a <= b")
        if self.kind == "user" and self.fn is None:
            raise ValueError("user potential requires an evaluator")

    @classmethod
    def cosine(cls, strip: float = 0.5, beta: float = 0.05) -> "PotentialSpec":
        """The built-in ``v(z) = cos(2 pi z)``.

        On the real torus the Morse ratio lives in [8, 2 pi^2] (the lower
        value is attained at the pair (0, 1/2)).  On a strip the upper
        constant inflates by cosh factors, so the declared kappa2 is the
        strip-safe value ``2 pi^2 cosh^2(2 pi R)``; certificates report the
        sharper empirical values for whatever grid they used.
        """
        k2 = 2.0 * math.pi ** 2 * math.cosh(TWO_PI * strip) ** 2
        return cls("cosine", strip, 8.0, k2, -1.0, 1.0, beta,
                   math.cosh(TWO_PI * strip))


def eval_potential(spec: PotentialSpec, z):
    """Evaluate v at real or complex ``z`` (scalar or array)."""
    z = np.asarray(z)
    im = np.abs(z.imag) if np.iscomplexobj(z) else 0.0
    if np.max(im) > spec.strip:
        raise OutOfStrip(
            f"|Im z| = {float(np.max(im)):.4g} exceeds strip {spec.strip}")
    if spec.kind == "cosine":
        out = np.cos(TWO_PI * z)
    else:
        out = np.asarray(spec.fn(z))
    if out.ndim == 0:
        return complex(out) if np.iscomplexobj(out) else float(out)
    return out


def solve_phase_for_energy(spec: PotentialSpec, energy) -> complex:
    """A root theta0 of ``v(theta0) = E``, canonicalized to Re in [0, 1/2].

    For the cosine this is ``arccos(E) / 2 pi`` (complex arccos covers
    energies outside the real range).  User potentials are solved by Newton
    from the best grid point.
    """
    if spec.kind == "cosine":
        theta = cmath.acos(complex(energy)) / TWO_PI
    else:
        grid = np.linspace(0.0, 1.0, 512, endpoint=False)
        vals = np.asarray(eval_potential(spec, grid), dtype=complex)
        theta = complex(grid[int(np.argmin(np.abs(vals - energy)))])
        for _ in range(60):
            h = 1e-7
            f = eval_potential(spec, theta) - energy
            df = (eval_potential(spec, theta + h)
                  - eval_potential(spec, theta - h)) / (2 * h)
            if abs(df) < 1e-14:
                break
            step = f / df
            theta -= step
            if abs(step) < 1e-14:
                break
    theta = complex(wrap_to_unit(theta))
    if theta.real > 0.5 + 1e-12:
        theta = complex(wrap_to_unit(-theta))
    if abs(theta.real) < 1e-12 or abs(theta.real - 0.5) < 1e-12:
        theta = complex(theta.real, abs(theta.imag))
    return theta


@dataclass(frozen=True)
class MorseCertificate:
    kappa1: float
    kappa2: float
    grid_density: int
    strip: float
    worst_low_pair: tuple
    worst_high_pair: tuple
    infinite_pairs: tuple


def certify_morse(spec: PotentialSpec, grid_density: int = 256,
                  strip: float = 0.0) -> MorseCertificate:
    """Empirical Morse constants from an exhaustive grid-pair scan.

    Scans all pairs of grid points (real torus, plus five imaginary levels
    when ``strip`` > 0) and returns the extreme ratios together with the
    attaining pairs.  A vanishing ratio at nonzero denominator means the
    potential is not cosine-type and raises DegenerateRatio.
    """
    if grid_density < 16:
        raise ValueError("grid density must be at least 16 per unit length")
    if strip < 0 or strip > spec.strip:
        raise ValueError("certification strip must satisfy 0 <= R' <= R")
    xs = np.arange(grid_density) / grid_density
    if strip > 0:
        levels = np.linspace(-strip, strip, 5)
        pts = (xs[:, None] + 1j * levels[None, :]).ravel()
    else:
        pts = xs.astype(complex)

    vals = np.asarray(eval_potential(spec, pts), dtype=complex)
    num = np.abs(vals[:, None] - vals[None, :])
    den = (torus_norm(pts[:, None] - pts[None, :])
           * torus_norm(pts[:, None] + pts[None, :]))
    iu = np.triu_indices(len(pts), k=1)
    num, den = num[iu], den[iu]

    den_floor = 1e-12
    live = den > den_floor
    inf_mask = (~live) & (num > 1e-9)
    inf_pairs = tuple(zip(iu[0][inf_mask][:8].tolist(),
                          iu[1][inf_mask][:8].tolist()))
    ratios = num[live] / den[live]
    if ratios.size == 0:
        raise DegenerateRatio("no admissible pairs on the grid")
    scale = float(np.max(num[live])) or 1.0
    if float(np.min(ratios)) < 1e-9 * scale:
        i = int(np.argmin(ratios))
        raise DegenerateRatio(
            f"difference ratio collapses at pair index {i}: potential is "
            "not cosine-type on this grid")

    lo_i = int(np.argmin(ratios))
    hi_i = int(np.argmax(ratios))
    live_idx = np.flatnonzero(live)

    def pair_at(j):
        p, q = iu[0][live_idx[j]], iu[1][live_idx[j]]
        return (complex(pts[p]), complex(pts[q]))

    return MorseCertificate(float(ratios[lo_i]), float(ratios[hi_i]),
                            int(grid_density), float(strip),
                            pair_at(lo_i), pair_at(hi_i), inf_pairs)


# ---------------------------------------------------------------------------
# frequency


@dataclass(frozen=True)
class FrequencyVector:
    """Rotation vector with its small-divisor class parameters."""

    omega: tuple
    tau: float
    gamma: float
    n_cert: int = 0

    def __post_init__(self):
        if any(not (0.0 <= w <= 1.0) for w in self.omega):
            raise ValueError("frequency components must lie in [0, 1]")
        if self.tau <= len(self.omega):
            raise ValueError("small-divisor exponent tau must exceed d")
        if self.gamma <= 0:
            raise ValueError("small-divisor constant gamma must be positive")

    @property
    def dim(self) -> int:
        return len(self.omega)

    @classmethod
    def golden(cls, tau: float = 2.0, gamma: float = 0.2) -> "FrequencyVector":
        return cls(((math.sqrt(5.0) - 1.0) / 2.0,), tau, gamma)

    def array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)


@dataclass(frozen=True)
class DiophantineCertificate:
    passed: bool
    n_max: int
    worst_site: tuple
    worst_margin: float
    violations: int


def certify_diophantine(freq: FrequencyVector, n_max: int, *,
                        raise_on_violation: bool = True,
                        site_cap: int = 20_000_000) -> DiophantineCertificate:
    """Exhaustively check ``||n . omega||_T >= gamma / ||n||^tau`` up to n_max.

    The margin reported is ``||n.omega||_T ||n||^tau / gamma``, so 1.0 is the
    failure threshold.  With ``raise_on_violation`` the first offender (by
    norm, then lexicographic order) raises DiophantineViolation.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    omega = freq.array()
    if freq.dim == 1:
        n = np.arange(1, n_max + 1, dtype=np.int64)
        sites = n[:, None]
        norms = n.astype(float)
    else:
        box = box_around(np.zeros(freq.dim), n_max, site_cap=site_cap)
        sites = box.sites
        norms = np.max(np.abs(sites), axis=1).astype(float)
        keep = norms > 0
        sites, norms = sites[keep], norms[keep]

    dots = sites @ omega
    margins = torus_norm(dots) * norms ** freq.tau / freq.gamma
    bad = margins < 1.0
    n_bad = int(np.count_nonzero(bad))
    worst = int(np.argmin(margins))
    cert = DiophantineCertificate(n_bad == 0, int(n_max),
                                  tuple(int(v) for v in sites[worst]),
                                  float(margins[worst]), n_bad)
    if n_bad and raise_on_violation:
        idx = np.flatnonzero(bad)
        order = sorted(idx, key=lambda i: (norms[i],
                                           tuple(sites[i].tolist())))
        first = order[0]
        raise DiophantineViolation(sites[first], margins[first])
    return cert


def certified(freq: FrequencyVector, n_max: int) -> FrequencyVector:
    """Return a copy of ``freq`` carrying a fresh exhaustive certificate."""
    certify_diophantine(freq, n_max)
    return replace(freq, n_cert=int(n_max))


# ---------------------------------------------------------------------------
# hopping kernel


@dataclass(frozen=True)
class HoppingKernel:
    """Toeplitz amplitudes ``phi`` under the log-power decay envelope.

    ``fn`` maps an (m, d) integer array of differences to an (m,) array of
    amplitudes.  Every evaluation path re-checks the envelope, so a kernel
    that drifts out of its declared decay class fails loudly at use time.
    """

    alpha: float
    rho: float
    kind: str
    fn: Callable = field(compare=False)
    hermitian: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("decay rate alpha must be positive")
        if self.rho <= 1:
            raise ValueError("decay shape rho must exceed 1")

    @classmethod
    def saturating(cls, alpha: float, rho: float) -> "HoppingKernel":
        """Kernel sitting exactly on the decay envelope (worst admissible)."""

        def fn(diffs: np.ndarray) -> np.ndarray:
            dist = np.max(np.abs(diffs), axis=1).astype(float)
            out = np.exp(-alpha * np.log1p(dist) ** rho)
            out[dist == 0] = 0.0
            return out

        return cls(alpha, rho, "saturating", fn, hermitian=True)

    @classmethod
    def from_callable(cls, alpha: float, rho: float, fn: Callable,
                      hermitian: bool = True) -> "HoppingKernel":
        return cls(alpha, rho, "user", fn, hermitian=hermitian)


def kernel_weights(kernel: HoppingKernel, diffs: np.ndarray) -> np.ndarray:
    """Evaluate ``phi`` on an (m, d) difference array, enforcing the envelope."""
    diffs = np.atleast_2d(np.asarray(diffs, dtype=np.int64))
    vals = np.asarray(kernel.fn(diffs), dtype=complex).reshape(diffs.shape[0])
    dist = np.max(np.abs(diffs), axis=1).astype(float)
    zero = dist == 0
    if np.any(np.abs(vals[zero]) > 1e-15):
        raise DecayViolation("hopping amplitude must vanish at the origin")
    bound = np.exp(-kernel.alpha * np.log1p(dist) ** kernel.rho)
    excess = np.abs(vals) - bound
    if np.any(excess > 1e-12):
        i = int(np.argmax(excess))
        raise DecayViolation(
            f"|phi({tuple(diffs[i])})| = {abs(vals[i]):.6e} exceeds envelope "
            f"{bound[i]:.6e}")
    return vals


def hopping_weight(kernel: HoppingKernel, n) -> complex:
    """Single amplitude ``phi(n)`` with the envelope check applied."""
    arr = np.atleast_1d(np.asarray(n, dtype=np.int64))
    return complex(kernel_weights(kernel, arr[None, :])[0])


# ---------------------------------------------------------------------------
# model, phases, energies


@dataclass(frozen=True)
class ModelSpec:
    potential: PotentialSpec
    hopping: HoppingKernel
    frequency: FrequencyVector
    eps: float
    eps0: float = 1e-2
    rho_prime: float = 1.5

    def __post_init__(self):
        rho = self.hopping.rho
        if not (1.0 < self.rho_prime < rho < self.rho_prime + 1.0):
            raise ValueError(
                f"need 1 < rho' < rho < rho'+1, got rho'={self.rho_prime}, "
                f"rho={rho}")
        if abs(self.eps) > self.eps0:
            warnings.warn(
                f"|eps| = {abs(self.eps)} exceeds the declared smallness "
                f"threshold eps0 = {self.eps0}; the regime is outside the "
                "theory's guarantee", stacklevel=2)

    @property
    def dim(self) -> int:
        return self.frequency.dim


@dataclass(frozen=True)
class PhasePoint:
    """Phase with real part reduced mod 1; imaginary part limited to R/2."""

    theta: complex

    def __post_init__(self):
        object.__setattr__(self, "theta", complex(wrap_to_unit(self.theta)))

    def validate(self, potential: PotentialSpec) -> "PhasePoint":
        if abs(self.theta.imag) > potential.strip / 2.0:
            raise OutOfStrip(
                f"|Im theta| = {abs(self.theta.imag):.4g} exceeds half-strip "
                f"{potential.strip / 2.0}")
        return self


@dataclass(frozen=True)
class EnergyPoint:
    energy: complex
    theta0: complex | None = None

    @classmethod
    def at(cls, potential: PotentialSpec, energy, tol: float = 1e-9
           ) -> "EnergyPoint":
        """Energy together with a verified phase preimage ``v(theta0) = E``."""
        theta0 = solve_phase_for_energy(potential, energy)
        resid = abs(complex(eval_potential(potential, theta0)) - energy)
        if resid > tol:
            raise ValueError(
                f"phase preimage residual {resid:.3e} above tolerance {tol}")
        return cls(complex(energy), theta0)


# ---------------------------------------------------------------------------
# assembly


def toeplitz_block(kernel: HoppingKernel, sites: np.ndarray) -> np.ndarray:
    """Dense (n, n) matrix phi(x - y) using a difference-table lookup."""
    n, d = sites.shape
    lo = sites.min(axis=0)
    ext = (sites.max(axis=0) - lo).astype(np.int64)
    q = np.rint(sites - lo).astype(np.int64)
    if np.max(np.abs((sites - lo) - q)) > 1e-9:
        raise ValueError("pairwise site differences must be integers")
    shape = tuple(int(2 * e + 1) for e in ext)
    axes = [np.arange(-e, e + 1, dtype=np.int64) for e in ext]
    mesh = np.meshgrid(*axes, indexing="ij")
    table = kernel_weights(
        kernel, np.stack([m.ravel() for m in mesh], axis=1)).reshape(shape)
    strides = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    flat_q = q @ strides
    offset = int((ext @ strides))
    idx = flat_q[:, None] - flat_q[None, :] + offset
    return table.reshape(-1)[idx]


def assemble_t_matrix(potential: PotentialSpec, kernel: HoppingKernel,
                      omega: np.ndarray, eps: float, sites, z,
                      energy=0.0) -> np.ndarray:
    """Dense ``T = diag(v(z + n.omega) - E) + eps W`` over arbitrary sites.

    Sites may live on a translated half-lattice (the multi-scale tracking
    frame); only their pairwise differences must be integers.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    phases = z + sites @ np.asarray(omega, dtype=float)
    diag = np.asarray(eval_potential(potential, phases), dtype=complex)
    mat = eps * toeplitz_block(kernel, sites)
    np.fill_diagonal(mat, mat.diagonal() + diag - complex(energy))
    return mat


@dataclass(frozen=True)
class OperatorRestriction:
    """Dense finite-volume matrix of ``T = H(theta) - E`` over a box."""

    box: LatticeBox
    matrix: np.ndarray
    theta: complex
    energy: complex
    hermitian: bool
    hermitian_defect: float
    model: ModelSpec

    @property
    def sites(self) -> np.ndarray:
        return self.box.sites

    @property
    def n_sites(self) -> int:
        return self.box.n_sites


def assemble_restriction(model: ModelSpec, box: LatticeBox, theta,
                         energy=0.0, *, dense_cap: int = 4096
                         ) -> OperatorRestriction:
    """Assemble the dense restriction of ``H(theta) - E`` to a box."""
    if box.n_sites > dense_cap:
        raise BoxTooLarge(
            f"box has {box.n_sites} sites, dense cap is {dense_cap}")
    theta_c = theta.theta if isinstance(theta, PhasePoint) else complex(theta)
    PhasePoint(theta_c).validate(model.potential)
    e_c = energy.energy if isinstance(energy, EnergyPoint) else complex(energy)

    mat = assemble_t_matrix(model.potential, model.hopping,
                            model.frequency.array(), model.eps,
                            box.sites.astype(float), theta_c, e_c)
    defect = 0.0
    flag = False
    if (abs(theta_c.imag) < 1e-15 and abs(e_c.imag) < 1e-15
            and model.hopping.hermitian):
        defect = float(np.linalg.norm(mat - mat.conj().T))
        flag = defect <= 1e-12 * max(1.0, float(np.linalg.norm(mat)))
    return OperatorRestriction(box, mat, theta_c, e_c, flag, defect, model)


@dataclass(frozen=True)
class SpectrumReport:
    lo: float
    hi: float
    window: tuple
    contained: bool
    margin: float


def spectrum_bounds(restriction: OperatorRestriction,
                    window: tuple | None = None) -> SpectrumReport:
    """Extreme eigenvalues of the underlying Hamiltonian restriction.

    The assembled matrix is ``H - E``; eigenvalues are shifted back by the
    (real) energy so the report speaks about ``H`` itself, compared against
    the window ``[a - beta, b + beta]`` unless another window is supplied.
    """
    if not restriction.hermitian:
        raise NotHermitian("spectrum bounds need a Hermitian restriction")
    vals = np.linalg.eigvalsh(restriction.matrix) + restriction.energy.real
    pot = restriction.model.potential
    if window is None:
        window = (pot.a - pot.beta, pot.b + pot.beta)
    lo, hi = float(vals[0]), float(vals[-1])
    margin = min(lo - window[0], window[1] - hi)
    return SpectrumReport(lo, hi, (float(window[0]), float(window[1])),
                          margin >= 0.0, float(margin))
