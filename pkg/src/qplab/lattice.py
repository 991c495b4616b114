"""Lattice boxes, site-set arithmetic, kernel sums, and regularizing closures.

Boxes are sup-norm balls ``{k in Z^d : ||k - c|| <= L}`` whose centers may sit
on the half-integer lattice.  Centers are stored as doubled integers so that
membership is exact integer arithmetic; a site ``k`` belongs to the box iff
``max_i |2 k_i - c2_i| <= floor(2L)``.

Several helpers in this module are unit-agnostic: they operate on integer
coordinate arrays and work equally on plain sites and on doubled half-lattice
coordinates, as long as both arguments use the same convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.integrate import quad

from .errors import (
    NonConvergence,
    PreconditionViolated,
    SizeOverflow,
    TailNotSmall,
)

DEFAULT_SITE_CAP = 2_000_000


def _center2_from(center) -> tuple[int, ...]:
    arr = np.atleast_1d(np.asarray(center, dtype=float))
    if arr.ndim != 1:
        raise ValueError("box center must be a scalar or a flat vector")
    doubled = np.rint(2.0 * arr)
    if np.max(np.abs(2.0 * arr - doubled)) > 1e-9:
        raise ValueError("box center must lie on the half-integer lattice")
    return tuple(int(v) for v in doubled)


@dataclass(frozen=True)
class LatticeBox:
    """Integer sites within sup-distance ``radius`` of a half-lattice center."""

    center2: tuple[int, ...]
    radius: float

    @property
    def dim(self) -> int:
        return len(self.center2)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.center2, dtype=float) / 2.0

    @property
    def reach2(self) -> int:
        """Doubled sup-distance actually admitted: floor(2 * radius)."""
        r2 = 2.0 * float(self.radius)
        return int(r2) if float(r2).is_integer() else math.floor(r2)

    @cached_property
    def axis_ranges(self) -> tuple[tuple[int, int], ...]:
        m = self.reach2
        out = []
        for c2 in self.center2:
            lo = -((m - c2) // 2)
            hi = (c2 + m) // 2
            out.append((lo, hi))
        return tuple(out)

    @property
    def n_sites(self) -> int:
        n = 1
        for lo, hi in self.axis_ranges:
            if hi < lo:
                return 0
            n *= hi - lo + 1
        return n

    @cached_property
    def sites(self) -> np.ndarray:
        """All member sites, shape (n, d), lexicographically ordered."""
        if self.n_sites == 0:
            return np.empty((0, self.dim), dtype=np.int64)
        axes = [np.arange(lo, hi + 1, dtype=np.int64)
                for lo, hi in self.axis_ranges]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def diam(self) -> int:
        if self.n_sites == 0:
            return 0
        return max(hi - lo for lo, hi in self.axis_ranges)

    def contains_sites(self, sites) -> np.ndarray:
        """Vectorized membership test for an (n, d) integer array."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        c2 = np.asarray(self.center2, dtype=np.int64)
        return np.max(np.abs(2 * sites - c2), axis=1) <= self.reach2


def box_around(center, radius, *, site_cap: int = DEFAULT_SITE_CAP) -> LatticeBox:
    """Construct the sup-norm box of the given radius around ``center``.

    Raises
    ------
    SizeOverflow
        If enumerating the box would exceed ``site_cap`` sites.
    """
    if radius < 0:
        raise ValueError("box radius must be nonnegative")
    box = LatticeBox(_center2_from(center), float(radius))
    if box.n_sites > site_cap:
        raise SizeOverflow(
            f"box would hold {box.n_sites} sites (cap {site_cap})")
    return box


# ---------------------------------------------------------------------------
# site-set arithmetic


def as_sites(obj) -> np.ndarray:
    """Coerce a box, array, or iterable of vectors to an (n, d) int array."""
    if isinstance(obj, LatticeBox):
        return obj.sites
    arr = np.asarray(obj)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[-1] if arr.ndim == 2 else 1).astype(np.int64)
    if arr.ndim == 1:
        arr = arr[:, None]
    out = np.rint(arr).astype(np.int64)
    if np.max(np.abs(arr - out)) > 1e-9:
        raise ValueError("site coordinates must be integers")
    return out


def canonical_sites(sites) -> np.ndarray:
    """Deduplicated sites in lexicographic order (deterministic layout)."""
    arr = as_sites(sites)
    if arr.shape[0] == 0:
        return arr
    return np.unique(arr, axis=0)


def site_tuples(sites) -> set:
    return {tuple(int(v) for v in row) for row in as_sites(sites)}


def sup_dist_sets(a, b) -> float:
    """min over pairs of the sup-norm distance; +inf when a side is empty."""
    a, b = as_sites(a), as_sites(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return math.inf
    best = math.inf
    chunk = max(1, int(4_000_000 // max(1, b.shape[0])))
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        d = np.abs(block[:, None, :] - b[None, :, :]).max(axis=2)
        best = min(best, float(d.min()))
        if best == 0:
            return 0.0
    return best


def pairwise_sup_dist(a, b=None) -> np.ndarray:
    """(n, m) matrix of sup-norm distances; accepts half-integer frames."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return np.abs(a[:, None, :] - b[None, :, :]).max(axis=2)


def sets_intersect(a, b) -> bool:
    a, b = as_sites(a), as_sites(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return False
    return not site_tuples(a).isdisjoint(site_tuples(b))


def set_contains(outer, inner) -> bool:
    """True iff every site of ``inner`` belongs to ``outer``."""
    inner = as_sites(inner)
    if inner.shape[0] == 0:
        return True
    return site_tuples(inner) <= site_tuples(outer)


def set_diameter(sites) -> int:
    arr = as_sites(sites)
    if arr.shape[0] == 0:
        return 0
    return int((arr.max(axis=0) - arr.min(axis=0)).max())


def symmetric_about_origin(sites) -> bool:
    """True iff the set is invariant under coordinate negation."""
    pts = site_tuples(sites)
    return all(tuple(-c for c in p) in pts for p in pts)


def serialize_sites(sites) -> list:
    """Sorted JSON-ready list of integer vectors."""
    return [list(map(int, row)) for row in canonical_sites(sites)]


# ---------------------------------------------------------------------------
# kernel sum D(eta)


@dataclass(frozen=True)
class KernelSum:
    """Truncated lattice sum of ``exp(-eta * log^rho(1 + ||k||))``.

    ``value`` underestimates the full sum and ``value + tail_bound``
    dominates it; the tail comes from an integral comparison certified to be
    monotone at the cutoff.
    """

    eta: float
    rho: float
    dim: int
    cutoff: int
    value: float
    tail_bound: float


def kernel_sum(eta: float, rho: float, dim: int, cutoff: int) -> KernelSum:
    if eta <= 0:
        raise PreconditionViolated("eta must be positive")
    if rho <= 1:
        raise PreconditionViolated("rho must exceed 1")
    if cutoff < 1:
        raise PreconditionViolated("cutoff must be at least 1")

    m = np.arange(1, cutoff + 1, dtype=np.float64)
    counts = (2 * m + 1) ** dim - (2 * m - 1) ** dim
    value = 1.0 + float(np.sum(counts * np.exp(-eta * np.log1p(m) ** rho)))

    def majorant(x):
        return 2 * dim * (2 * x + 1) ** (dim - 1) * np.exp(
            -eta * np.log1p(x) ** rho)

    if dim > 1:
        # Decreasing iff eta*rho*log^{rho-1}(1+x)*(2x+1)/(2(d-1)(1+x)) > 1;
        # the left side is increasing in x, so the cutoff check suffices.
        slope = (eta * rho * math.log1p(cutoff) ** (rho - 1)
                 * (2 * cutoff + 1) / (2 * (dim - 1) * (1 + cutoff)))
        if slope <= 1.0:
            raise TailNotSmall(
                "cutoff too small: shell majorant not yet decreasing")

    tail_val, tail_err = quad(majorant, cutoff, np.inf, limit=200)
    tail_bound = float(tail_val + abs(tail_err))
    if tail_bound > value:
        raise TailNotSmall(
            f"tail bound {tail_bound:.3e} exceeds the partial sum {value:.3e}")
    return KernelSum(float(eta), float(rho), int(dim), int(cutoff),
                     value, tail_bound)


# ---------------------------------------------------------------------------
# quasi-metric certificate


@dataclass(frozen=True)
class QuasiMetricCert:
    """Empirical constant for log^rho(1+sum x) <= sum log^rho(1+x) + C log^rho n."""

    rho: float
    n_max: int
    budget: int
    seed: int
    c_hat: float
    worst_n: int
    worst_config: tuple[float, ...]


def _qm_defect(x: np.ndarray, rho: float) -> np.ndarray:
    n = x.shape[1]
    lhs = np.log1p(x.sum(axis=1)) ** rho
    rhs = (np.log1p(x) ** rho).sum(axis=1)
    return (lhs - rhs) / math.log(n) ** rho


def quasi_metric_certify(rho: float, n_max: int, budget: int = 10 ** 6,
                         seed: int = 0) -> QuasiMetricCert:
    """Search for the worst quasi-metric defect over random and structured tuples.

    The sample plan mixes log-uniform clouds, near-unit clouds (where the
    maximizer for rho=2 lives), equal tuples, one-dominant tuples, and
    geometric ladders, then polishes the incumbent with multiplicative
    jitter.  The certificate is empirical by design; exhausting the budget is
    the only stopping rule.
    """
    if rho <= 1:
        raise PreconditionViolated("rho must exceed 1")
    if n_max < 2:
        raise PreconditionViolated("n_max must be at least 2")

    rng = np.random.default_rng(seed)
    sizes = sorted(set(range(2, min(n_max, 16) + 1))
                   | {n_max}
                   | {int(v) for v in np.geomspace(2, n_max, 8)})
    spent = 0
    best = -math.inf
    best_x = None
    best_n = 2
    per_size = max(64, budget // (len(sizes) * 6))

    for n in sizes:
        batches = []
        b = per_size
        batches.append(np.exp(rng.uniform(math.log(1e-3), math.log(1e4),
                                          size=(b, n))))
        batches.append(rng.uniform(0.05, 4.0, size=(b, n)))
        t = np.geomspace(1e-3, 1e4, b)
        batches.append(np.repeat(t[:, None], n, axis=1))
        dom = rng.uniform(0.05, 4.0, size=(b, n))
        dom[:, 0] = np.geomspace(1.0, 1e4, b)
        batches.append(dom)
        ratios = rng.uniform(1.05, 3.0, size=b)
        base = rng.uniform(0.05, 2.0, size=b)
        batches.append(base[:, None] * ratios[:, None]
                       ** np.arange(n)[None, :])
        for x in batches:
            d = _qm_defect(x, rho)
            spent += x.shape[0]
            i = int(np.argmax(d))
            if d[i] > best:
                best, best_x, best_n = float(d[i]), x[i].copy(), n

    # polish the incumbent with what is left of the budget
    while spent < budget and best_x is not None:
        b = min(4096, budget - spent)
        jitter = best_x[None, :] * np.exp(
            rng.normal(0.0, 0.05, size=(b, best_n)))
        d = _qm_defect(jitter, rho)
        spent += b
        i = int(np.argmax(d))
        if d[i] > best:
            best, best_x = float(d[i]), jitter[i].copy()

    c_hat = max(0.0, best)
    worst = tuple(float(v) for v in best_x) if best_x is not None else ()
    return QuasiMetricCert(float(rho), int(n_max), int(spent), int(seed),
                           c_hat, int(best_n), worst)


def quasi_metric_defects(samples: np.ndarray, rho: float) -> np.ndarray:
    """Defect of each row of an (m, n) positive array; used by the suites."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise PreconditionViolated("need an (m, n) array with n >= 2")
    if np.any(samples <= 0):
        raise PreconditionViolated("tuple entries must be positive")
    return _qm_defect(samples, rho)


# ---------------------------------------------------------------------------
# extract inequality


def extract_lower_bound(x: float, y: float, rho: float) -> float:
    """Certified lower bound for ``log^rho(1 + x - y)``.

    Returns ``(1 - 2 rho y / ((1+x) log(1+x))) * log^rho(1+x)`` under the
    admissibility conditions ``x > y > 0`` and ``1 + x > 2y``.
    """
    if not (rho > 1):
        raise PreconditionViolated("rho must exceed 1")
    if not (x > y > 0):
        raise PreconditionViolated("need x > y > 0")
    if not (1 + x > 2 * y):
        raise PreconditionViolated("need 1 + x > 2y")
    log1px = math.log1p(x)
    bound = (1.0 - 2.0 * rho * y / ((1.0 + x) * log1px)) * log1px ** rho
    actual = math.log1p(x - y) ** rho
    assert bound <= actual * (1 + 1e-12) + 1e-12, (
        f"extract bound {bound} exceeded actual {actual}")
    return bound


# ---------------------------------------------------------------------------
# regularizing deformation


@dataclass(frozen=True)
class DeformationLevel:
    """One scale of enlarged blocks available for absorption.

    ``blocks`` maps half-lattice centers (doubled integers) to integer site
    arrays.  ``test_reach2`` is the doubled radius of the neighborhood whose
    intersection with the working set triggers absorption; ``None`` uses each
    block's realized enlarged radius, which always covers the block itself.
    """

    scale: int
    blocks: tuple
    test_reach2: int | None = None


def deformation_level(scale: int, blocks: Mapping | Iterable,
                      test_radius: float | None = None) -> DeformationLevel:
    items = blocks.items() if isinstance(blocks, Mapping) else blocks
    packed = []
    for center, sites in items:
        c2 = _center2_from(np.asarray(center, dtype=float)
                           if not isinstance(center, tuple) else center)
        packed.append((c2, canonical_sites(sites)))
    packed.sort(key=lambda kv: kv[0])
    reach2 = None
    if test_radius is not None:
        reach2 = int(math.floor(2.0 * float(test_radius)))
    return DeformationLevel(int(scale), tuple(packed), reach2)


@dataclass(frozen=True)
class DeformationReport:
    passes: int
    absorbed: tuple
    realized_pad: float
    seed_size: int
    final_size: int


def _block_reach2(center2, sites) -> int:
    c2 = np.asarray(center2, dtype=np.int64)
    return int(np.max(np.abs(2 * as_sites(sites) - c2)))


def regular_deformation(seed, levels: Sequence[DeformationLevel], *,
                        max_rounds: int = 64):
    """Close a site set under enlarged-block absorption, scale by scale.

    Starting from the seed set, scales are processed in descending order; a
    block is adjoined whenever the box of its test radius meets the current
    set.  The loop repeats over all scales until a global fixpoint, so late
    lower-scale growth cannot silently re-expose a higher scale.

    Returns the closed set (canonical site array) and a report carrying the
    realized pad ``max_{x in B*} dist(x, B)``.
    """
    seed_arr = canonical_sites(seed)
    current = site_tuples(seed_arr)
    ordered = sorted(levels, key=lambda lev: -lev.scale)
    absorbed: list[tuple[int, tuple]] = []
    taken = set()

    passes = 0
    changed = True
    while changed:
        passes += 1
        if passes > max_rounds:
            raise NonConvergence(
                f"deformation did not stabilize in {max_rounds} passes")
        changed = False
        for level in ordered:
            stable = False
            rounds = 0
            while not stable:
                rounds += 1
                if rounds > max_rounds:
                    raise NonConvergence(
                        f"scale {level.scale} absorption did not stabilize")
                stable = True
                if not current:
                    break
                cur_arr = as_sites(sorted(current))
                for center2, sites in level.blocks:
                    key = (level.scale, center2)
                    if key in taken:
                        continue
                    reach2 = (level.test_reach2 if level.test_reach2 is not None
                              else _block_reach2(center2, sites))
                    c2 = np.asarray(center2, dtype=np.int64)
                    near = np.max(np.abs(2 * cur_arr - c2), axis=1) <= reach2
                    if bool(near.any()):
                        taken.add(key)
                        new = site_tuples(sites) - current
                        if new:
                            current |= new
                            stable = False
                            changed = True
                            cur_arr = as_sites(sorted(current))
                        absorbed.append(key)

    out = canonical_sites(sorted(current)) if current else seed_arr
    if out.shape[0] and seed_arr.shape[0]:
        chunk = np.abs(out[:, None, :] - seed_arr[None, :, :]).max(axis=2)
        pad = float(chunk.min(axis=1).max())
    else:
        pad = 0.0
    report = DeformationReport(passes, tuple(absorbed), pad,
                               int(seed_arr.shape[0]), int(out.shape[0]))
    return out, report


def regularity_witness(sites, levels: Sequence[DeformationLevel]):
    """Independent closure predicate: the first block that meets the set
    without being contained, or None when the set is regular."""
    pts = site_tuples(sites)
    if not pts:
        return None
    for level in sorted(levels, key=lambda lev: -lev.scale):
        for center2, block_sites in level.blocks:
            block = site_tuples(block_sites)
            if not block.isdisjoint(pts) and not block <= pts:
                return (level.scale, center2)
    return None


def is_regular(sites, levels: Sequence[DeformationLevel]) -> bool:
    return regularity_witness(sites, levels) is None
