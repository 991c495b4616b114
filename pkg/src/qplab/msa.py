"""Multi-scale induction: schedules, resonances, blocks, and root tracking.

The induction walks a ladder of scales ``N_s`` with tolerances ``delta_s``.
At each scale the near-resonant centers ``P_s`` live on a shifted
half-integer lattice; around them sit nested blocks (resonant, doubled,
enlarged) absorbing all lower-scale structure.  A characteristic root
``theta_s`` of a small Schur determinant steers the resonance windows, and
the exported estimates bound inverse restrictions on "good" sets that avoid
the current resonances.

Two schedule modes exist.  The faithful mode uses the published exponents
(``N^{10}``-sized enlargements, ``10^{5 rho'}`` tolerance jumps); past the
second scale these exceed any computable volume, so a desk mode with gentle
exponents drives everything actually executed, while the faithful mode
remains available for schedule arithmetic itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import (
    NoRootInWindow,
    NonConvergence,
    PreconditionViolated,
    ScheduleOverflow,
    SeparationViolated,
    WindingMismatch,
    WindowTooSmall,
)
from .greens import DecayFit, decay_scan, green_solve
from .lattice import LatticeBox, deformation_level, set_diameter, site_tuples
from .model import (
    EnergyPoint,
    ModelSpec,
    assemble_t_matrix,
    eval_potential,
    solve_phase_for_energy,
    toeplitz_block,
)
from .torus import log_torus_norm, torus_norm, wrap_to_symmetric

MAX_EXP = 700.0


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScaleSchedule:
    """Length scales, tolerances, and decay rates, all delta in log form.

    ``log_delta[s]`` is ``log delta_s``; ``n_seq[s]`` is ``N_s`` as an int
    when it is representable and None when only ``log_n[s]`` is (the
    faithful mode overflows machine integers from scale 2 on).  ``q_exp``
    widens resonance windows (``delta^q_exp``), ``z_exp`` sizes the root
    windows.  ``alpha_prime[s]`` is the transitional rate usually written
    with a prime and one index down; it is aligned here with the scale whose
    ``N`` enters its formula.
    """

    mode: str
    alpha: float
    rho: float
    rho_prime: float
    log_delta: tuple
    n_seq: tuple
    log_n: tuple
    alpha_seq: tuple
    alpha_prime: tuple
    q_exp: float
    z_exp: float
    g_delta: float | None = None
    g_n: float | None = None

    @property
    def s_max(self) -> int:
        return len(self.log_delta) - 1

    def delta(self, s: int) -> float:
        return math.exp(max(self.log_delta[s], -MAX_EXP))

    def q_threshold(self, s: int) -> float:
        return math.exp(max(self.q_exp * self.log_delta[s], -MAX_EXP))

    def sep_threshold(self, s: int) -> float:
        """Spatial separation deciding the case split at scale s -> s+1."""
        n_next = self.n_seq[s + 1]
        if n_next is None:
            raise ScheduleOverflow(
                f"N_{s + 1} is not machine representable; the faithful mode "
                "cannot classify cases at this depth")
        if self.mode == "paper":
            return 100.0 * float(n_next) ** 10
        return 2.0 * float(n_next)

    def radii(self, s: int, case: int) -> tuple:
        """(resonant, doubled, enlarged) block radii at scale s."""
        n = self.n_seq[s]
        if n is None:
            raise ScheduleOverflow(
                f"N_{s} is not machine representable; blocks at this scale "
                "cannot be constructed")
        n = int(n)
        if self.mode == "paper":
            if case == 1:
                return (n, 2 * n, n ** 10)
            return (100 * n ** 10, 200 * n ** 10, n ** 100)
        if case == 1:
            return (n, 2 * n, 4 * n)
        return (2 * n, 4 * n, 8 * n)

    def pad_budget(self, s: int) -> int:
        """Allowed excess of realized blocks over their nominal radius."""
        if s <= 1:
            return 0
        if self.mode == "paper":
            n_prev = self.n_seq[s - 1]
            if n_prev is None:
                raise ScheduleOverflow(f"N_{s - 1} exceeds machine range")
            return 50 * int(n_prev) ** 100
        return 50 * self.radii(s - 1, 2)[2]


def build_schedule(mode: str, *, alpha: float, rho: float, rho_prime: float,
                   s_max: int, eps0: float | None = None,
                   delta0: float | None = None, n0: int | None = None,
                   g_delta: float = 2.0, g_n: float = 2.0) -> ScaleSchedule:
    """Construct the scale ladder.

    Faithful mode seeds ``delta_0 = eps0^(1/10)`` and runs the published
    recursions ``N_{s+1} = floor(exp(|log delta_s|^(1/rho')))``,
    ``log delta_{s+1} = 10^(5 rho') log delta_s``.  Desk mode takes an
    explicit ``delta0`` and ``N_0``, seeds ``N_1`` by the same exponential
    formula, then grows geometrically: ``N_{s+1} = ceil(N_s^g_n)``,
    ``log delta_{s+1} = g_delta log delta_s``.
    """
    if not (1.0 < rho_prime < rho < rho_prime + 1.0):
        raise ValueError("need 1 < rho' < rho < rho' + 1")
    if alpha <= 0:
        raise ValueError("decay rate alpha must be positive")
    if s_max < 1:
        raise ValueError("the ladder needs at least one scale")

    if mode == "paper":
        if eps0 is None or not (0.0 < eps0 < 1.0):
            raise ValueError("faithful mode needs eps0 in (0, 1)")
        log_d0 = math.log(eps0) / 10.0
        jump = 10.0 ** (5.0 * rho_prime)
        log_delta = [log_d0]
        for _ in range(s_max):
            log_delta.append(log_delta[-1] * jump)
        if s_max >= 2:
            warnings.warn(
                "faithful-mode boxes beyond scale 2 exceed any computable "
                "volume; only schedule arithmetic is meaningful there",
                stacklevel=2)
        n_seq: list = [None]
        log_n: list = [float("nan")]
        for s in range(s_max):
            ln = abs(log_delta[s]) ** (1.0 / rho_prime)
            log_n.append(ln)
            n_seq.append(int(math.exp(ln)) if ln < 43.0 else None)
        gd = gn = None
    elif mode == "desk":
        if delta0 is None or not (0.0 < delta0 < 1.0):
            raise ValueError("desk mode needs delta0 in (0, 1)")
        if n0 is None or n0 < 1:
            raise ValueError("desk mode needs a base length N_0 >= 1")
        if not (1.0 < g_n <= 3.0):
            raise ValueError("desk length growth g_n must lie in (1, 3]")
        if not (2.0 <= g_delta <= 50.0):
            raise ValueError("desk tolerance growth g_delta must lie in "
                             "[2, 50]")
        log_d0 = math.log(delta0)
        log_delta = [log_d0 * g_delta ** s for s in range(s_max + 1)]
        n_seq = [int(n0)]
        n1 = int(math.exp(abs(log_d0) ** (1.0 / rho_prime)))
        n_seq.append(max(2, n1))
        while len(n_seq) <= s_max:
            n_seq.append(int(math.ceil(n_seq[-1] ** g_n)))
        log_n = [math.log(n) for n in n_seq]
        gd, gn = float(g_delta), float(g_n)
    else:
        raise ValueError(f"unknown schedule mode {mode!r}")

    if mode == "paper":
        dec, dec_prime = 50.0 * 10.0 ** (5.0 * rho_prime), \
            20.0 * 10.0 ** (5.0 * rho_prime)
    else:
        dec, dec_prime = 0.05, 0.02
    alpha_seq = [0.75 * alpha]
    alpha_prime = [float("nan")]
    for s in range(1, s_max + 1):
        ln_s = log_n[s]
        denom = alpha * ln_s ** (rho - rho_prime)
        factor = 1.0 - dec / denom
        factor_p = 1.0 - dec_prime / denom
        if factor <= 0.0 or factor_p <= 0.0:
            raise ScheduleOverflow(
                f"decay schedule collapses at scale {s}: decrement factor "
                f"{factor:.4f} is not positive")
        alpha_prime.append(alpha_seq[-1] * factor_p)
        alpha_seq.append(alpha_seq[-1] * factor)
        if alpha_seq[-1] < alpha / 2.0:
            raise ScheduleOverflow(
                f"decay rate at scale {s} fell below alpha/2; enlarge N_1 "
                "or reduce the ladder depth")

    return ScaleSchedule(mode, alpha, rho, rho_prime, tuple(log_delta),
                         tuple(n_seq), tuple(log_n), tuple(alpha_seq),
                         tuple(alpha_prime), 0.01 if mode == "paper" else
                         0.25, 1e-4 if mode == "paper" else 0.25, gd, gn)


# ---------------------------------------------------------------------------
# resonances

# Half-integer centers are stored doubled (exact integers), so "2k" is the
# working representation of a center k throughout this module.


def _lex_sorted(arr2: np.ndarray) -> np.ndarray:
    if arr2.shape[0] <= 1:
        return arr2
    order = np.lexsort(arr2.T[::-1])
    return arr2[order]


@dataclass(frozen=True)
class ResonanceStructure:
    s: int
    theta_s: complex
    offset2: tuple
    p2: np.ndarray
    q_plus2: np.ndarray
    q_minus2: np.ndarray
    q_tilde_plus2: np.ndarray
    q_tilde_minus2: np.ndarray
    delta: float
    q_tilde_delta: float

    @property
    def q2(self) -> np.ndarray:
        if self.q_plus2.shape[0] == 0:
            return self.q_minus2
        if self.q_minus2.shape[0] == 0:
            return self.q_plus2
        return _lex_sorted(np.unique(
            np.concatenate([self.q_plus2, self.q_minus2]), axis=0))

    @property
    def q_tilde2(self) -> np.ndarray:
        if self.q_tilde_plus2.shape[0] == 0:
            return self.q_tilde_minus2
        if self.q_tilde_minus2.shape[0] == 0:
            return self.q_tilde_plus2
        return _lex_sorted(np.unique(
            np.concatenate([self.q_tilde_plus2, self.q_tilde_minus2]),
            axis=0))


def detect_resonances(model: ModelSpec, theta: complex, s: int,
                      theta_s: complex, schedule: ScaleSchedule,
                      candidates2: np.ndarray, offset2) -> ResonanceStructure:
    """Split candidate centers into resonance shells around ``±theta_s``.

    ``candidates2`` are doubled centers (scale 0: all window sites, doubled;
    later scales: the advanced ``P_s``).  A center is + resonant when the
    phase ``theta + k . omega`` lands within ``delta_s`` of ``-theta_s``,
    mirroring the sign convention of the window definitions.
    """
    cand2 = np.atleast_2d(np.asarray(candidates2, dtype=np.int64))
    omega = model.frequency.array()
    delta = schedule.delta(s)
    d_tilde = schedule.q_threshold(s)
    if cand2.shape[0] == 0:
        empty = cand2.reshape(0, len(offset2))
        return ResonanceStructure(s, complex(theta_s), tuple(offset2), empty,
                                  empty, empty, empty, empty, delta, d_tilde)
    phase = complex(theta) + (cand2 / 2.0) @ omega
    rp = torus_norm(phase + complex(theta_s))
    rm = torus_norm(phase - complex(theta_s))
    return ResonanceStructure(
        s, complex(theta_s), tuple(int(v) for v in offset2),
        _lex_sorted(cand2),
        _lex_sorted(cand2[rp < delta]), _lex_sorted(cand2[rm < delta]),
        _lex_sorted(cand2[rp < d_tilde]), _lex_sorted(cand2[rm < d_tilde]),
        delta, d_tilde)


@dataclass(frozen=True)
class CaseData:
    case: int
    l: tuple | None
    witness_i2: tuple | None
    witness_j2: tuple | None
    dist: float


def classify_case(res: ResonanceStructure, threshold: float) -> CaseData:
    """Case split: far-separated resonance shells (1) or a merge pair (2).

    In case 2 the witnesses are the closest (+, ~-) pair, ties broken
    lexicographically, and ``l`` is their integer difference.
    """
    plus = res.q_plus2
    tminus = res.q_tilde_minus2
    if plus.shape[0] == 0 or tminus.shape[0] == 0:
        return CaseData(1, None, None, None, float("inf"))
    diff = np.abs(plus[:, None, :] - tminus[None, :, :]).max(axis=2) / 2.0
    dist = float(diff.min())
    if dist > threshold:
        return CaseData(1, None, None, None, dist)
    ii, jj = np.nonzero(diff <= threshold)
    pairs = sorted(
        zip(diff[ii, jj], map(tuple, plus[ii].tolist()),
            map(tuple, tminus[jj].tolist())))
    _, i2, j2 = pairs[0]
    l2 = tuple(a - b for a, b in zip(i2, j2))
    if any(c % 2 for c in l2):
        raise PreconditionViolated(
            "merge witnesses do not differ by an integer vector")
    return CaseData(2, tuple(c // 2 for c in l2), i2, j2, dist)


def advance_resonances(res: ResonanceStructure, case: CaseData,
                       cores: Mapping | None) -> tuple:
    """Produce ``(P_{s+1} doubled, offset2, cores_{s+1})`` from scale s.

    ``cores`` maps doubled centers to doubled core-site arrays; None means
    the implicit scale-0 cores (every center is its own core).  Case 1
    keeps the centers ``Q_s`` and their cores; case 2 merges each offset
    pair across ``l`` into a midpoint center whose core is the union.
    """

    def core_of(c2: tuple) -> np.ndarray:
        if cores is None:
            return np.asarray([c2], dtype=np.int64)
        key = tuple(int(v) for v in c2)
        if key not in cores:
            raise PreconditionViolated(
                f"merge partner {key} has no tracked core; the resonance "
                "window was too narrow for this merge")
        return np.asarray(cores[key], dtype=np.int64)

    if case.case == 1:
        p_next = res.q2
        new_cores = {tuple(int(v) for v in c2): core_of(tuple(c2))
                     for c2 in p_next}
        return p_next, res.offset2, new_cores

    l2 = np.asarray([2 * v for v in case.l], dtype=np.int64)
    o_set = {tuple(int(v) for v in row) for row in res.q_minus2}
    o_set |= {tuple(int(v) for v in (row - l2))
              for row in res.q_plus2}
    centers = []
    new_cores = {}
    for o2 in sorted(o_set):
        c2 = tuple(int(v) for v in (np.asarray(o2) + l2 // 2))
        a = core_of(o2)
        b = core_of(tuple(int(v) for v in (np.asarray(o2) + l2)))
        new_cores[c2] = _lex_sorted(np.unique(
            np.concatenate([a, b]), axis=0))
        centers.append(c2)
    p_next = _lex_sorted(np.asarray(sorted(set(centers)), dtype=np.int64))
    offset2 = tuple(int(a + b) for a, b in zip(res.offset2, case.l))
    return p_next, offset2, new_cores


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class BlockFamily:
    """The three nested block levels around every center of one scale."""

    s: int
    case: int
    offset2: tuple
    centers2: np.ndarray
    resonant: dict
    doubled: dict
    enlarged: dict
    cores: dict
    radii: tuple
    declared_pad: int
    realized_pad: int
    zeta: int
    zeta_tilde: int
    template2: np.ndarray
    core_template2: np.ndarray

    def center_keys(self) -> list:
        return [tuple(int(v) for v in row) for row in self.centers2]


def _ball_sites(c2: np.ndarray, reach2: int, window: LatticeBox) -> set:
    d = c2.size
    axes = []
    for a in range(d):
        lo = int(math.ceil((c2[a] - reach2) / 2.0))
        hi = int(math.floor((c2[a] + reach2) / 2.0))
        axes.append(range(lo, hi + 1))
    out = set()

    def rec(prefix, rest):
        if not rest:
            out.add(prefix)
            return
        for v in rest[0]:
            rec(prefix + (v,), rest[1:])

    rec((), axes)
    wc2 = np.asarray(window.center2, dtype=np.int64)
    for p in out:
        if np.max(np.abs(2 * np.asarray(p) - wc2)) > window.reach2:
            raise WindowTooSmall(
                f"block around {tuple(float(x) / 2 for x in c2.tolist())} "
                "escapes the working window; enlarge it")
    return out


def construct_blocks(p2: np.ndarray, cores: Mapping, s: int, case: int,
                     offset2, schedule: ScaleSchedule,
                     lower: Sequence["BlockFamily"], window: LatticeBox,
                     *, max_rounds: int = 16) -> BlockFamily:
    """Build resonant/doubled/enlarged blocks with absorption and symmetry.

    Each level starts as a sup-norm ball, absorbs every lower-scale enlarged
    block it touches, and is then forced to a center-independent,
    origin-symmetric template (in the frame translated by its center).
    Absorption and templating loop to a joint fixed point.  Separation of
    enlarged blocks by ten diameters is a hard requirement.
    """
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.int64))
    if p2.shape[0] == 0:
        raise PreconditionViolated("cannot build blocks for an empty P_s")
    r_res, r_dbl, r_enl = schedule.radii(s, case)
    lower_tiles = []
    for fam in lower:
        for key in fam.center_keys():
            lower_tiles.append(site_tuples(fam.enlarged[key]))

    levels = {}
    for name, radius in (("resonant", r_res), ("doubled", r_dbl),
                         ("enlarged", r_enl)):
        blocks = {tuple(int(v) for v in c2):
                  _ball_sites(np.asarray(c2), 2 * radius, window)
                  for c2 in p2}
        for _ in range(max_rounds):
            changed = False
            for key, blk in blocks.items():
                grown = True
                while grown:
                    grown = False
                    for tile in lower_tiles:
                        if tile <= blk or blk.isdisjoint(tile):
                            continue
                        blk |= tile
                        grown = changed = True
                blocks[key] = blk
            template = set()
            for key, blk in blocks.items():
                c2 = np.asarray(key)
                for n in blk:
                    template.add(tuple(2 * np.asarray(n) - c2))
            template |= {tuple(-np.asarray(t)) for t in template}
            for key in blocks:
                c2 = np.asarray(key)
                uni = {tuple((np.asarray(t2) + c2) // 2) for t2 in template}
                if uni != blocks[key]:
                    for n in uni:
                        if np.max(np.abs(2 * np.asarray(n)
                                         - np.asarray(window.center2))
                                  ) > window.reach2:
                            raise WindowTooSmall(
                                "symmetrized block escapes the window")
                    blocks[key] = uni
                    changed = True
            if not changed:
                break
        else:
            raise NonConvergence(
                "block absorption did not reach a fixed point; lower-scale "
                "structure is too dense")
        levels[name] = (blocks, template, radius)

    # nesting and pad accounting
    realized_pad = 0
    for name, radius in (("resonant", r_res), ("doubled", r_dbl),
                         ("enlarged", r_enl)):
        blocks, template, _ = levels[name]
        worst = max(max(abs(c) for c in t2) for t2 in template)
        realized_pad = max(realized_pad, int(math.ceil(worst / 2.0)) - radius)
    budget = schedule.pad_budget(s)
    keys = [tuple(int(v) for v in row) for row in p2]
    for key in keys:
        res_b = levels["resonant"][0][key]
        dbl_b = levels["doubled"][0][key]
        enl_b = levels["enlarged"][0][key]
        if not (res_b <= dbl_b and dbl_b <= enl_b):
            raise PreconditionViolated(
                "block nesting failed; the pad outgrew the radius gaps")

    enlarged = levels["enlarged"][0]
    diam = set_diameter(np.asarray(sorted(enlarged[keys[0]]),
                                   dtype=np.int64))
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            sa = np.asarray(sorted(enlarged[keys[a]]), dtype=np.int64)
            sb = np.asarray(sorted(enlarged[keys[b]]), dtype=np.int64)
            gap = float(np.min(np.abs(sa[:, None, :] - sb[None, :, :])
                               .max(axis=2)))
            if gap <= 10.0 * diam:
                raise SeparationViolated(
                    f"enlarged blocks at {keys[a]} and {keys[b]} are only "
                    f"{gap:.0f} apart (diameter {diam})")

    core_arrays = {}
    core_template = None
    for key in keys:
        a2 = np.asarray(cores[key], dtype=np.int64) if key in cores else None
        if a2 is None:
            raise PreconditionViolated(f"center {key} has no core")
        if a2.shape[0] > 2 ** s:
            raise PreconditionViolated(
                f"core at {key} has {a2.shape[0]} sites, limit {2 ** s}")
        if any(c % 2 for c in a2.ravel().tolist()):
            raise PreconditionViolated("core sites must be integer sites")
        core_sites = {tuple(int(v) for v in row // 2) for row in a2}
        if not core_sites <= levels["resonant"][0][key]:
            raise PreconditionViolated(
                f"core at {key} leaks outside its resonant block")
        t2 = _lex_sorted((a2 - np.asarray(key)).astype(np.int64))
        if core_template is None:
            core_template = t2
        elif t2.shape != core_template.shape or np.any(t2 != core_template):
            raise PreconditionViolated(
                "core layout varies across centers of one scale")
        core_arrays[key] = _lex_sorted(np.asarray(sorted(core_sites),
                                                  dtype=np.int64))
    if core_template is None:
        raise PreconditionViolated("no cores supplied")
    neg = _lex_sorted(-core_template)
    if np.any(neg != core_template):
        raise PreconditionViolated("core template is not origin-symmetric")

    def freeze(blocks):
        return {k: _lex_sorted(np.asarray(sorted(v), dtype=np.int64))
                for k, v in blocks.items()}

    template2 = _lex_sorted(np.asarray(sorted(levels["enlarged"][1]),
                                       dtype=np.int64))
    res_f = freeze(levels["resonant"][0])
    zeta = set_diameter(res_f[keys[0]])
    return BlockFamily(s, case, tuple(int(v) for v in offset2), p2,
                       res_f, freeze(levels["doubled"][0]),
                       freeze(enlarged), core_arrays,
                       (r_res, r_dbl, r_enl), budget,
                       max(realized_pad, 0), zeta, diam, template2,
                       core_template)


@dataclass(frozen=True)
class BlockCheckReport:
    absorption_ok: bool
    separation_ok: bool
    translation_ok: bool
    symmetry_ok: bool
    covering_ok: bool
    cores_ok: bool
    pad_ok: bool
    realized_pad: int
    declared_pad: int

    @property
    def all_ok(self) -> bool:
        return (self.absorption_ok and self.separation_ok
                and self.translation_ok and self.symmetry_ok
                and self.covering_ok and self.cores_ok and self.pad_ok)


def verify_block_family(family: BlockFamily,
                        lower: Sequence[BlockFamily],
                        prev_res: ResonanceStructure | None
                        ) -> BlockCheckReport:
    """Re-check every constructed-block property from scratch.

    Absorption (touching lower enlarged blocks are swallowed at all three
    levels), ten-diameter separation, center-independent symmetric
    templates for blocks and cores, the covering of the previous resonances,
    and the pad budget.
    """
    keys = family.center_keys()
    lower_tiles = []
    for fam in lower:
        for key in fam.center_keys():
            lower_tiles.append(site_tuples(fam.enlarged[key]))
    absorption = True
    for key in keys:
        for level in (family.resonant, family.doubled, family.enlarged):
            blk = site_tuples(level[key])
            for tile in lower_tiles:
                if not blk.isdisjoint(tile) and not tile <= blk:
                    absorption = False

    separation = True
    diam = family.zeta_tilde
    for a in range(len(keys)):
        sa = family.enlarged[keys[a]]
        for b in range(a + 1, len(keys)):
            sb = family.enlarged[keys[b]]
            gap = float(np.min(np.abs(sa[:, None, :] - sb[None, :, :])
                               .max(axis=2)))
            if gap <= 10.0 * diam:
                separation = False

    translation = True
    symmetry = True
    ref2 = None
    for key in keys:
        t2 = _lex_sorted(2 * family.enlarged[key] - np.asarray(key))
        if ref2 is None:
            ref2 = t2
        elif t2.shape != ref2.shape or np.any(t2 != ref2):
            translation = False
    if ref2 is not None and (np.any(_lex_sorted(-ref2) != ref2)):
        symmetry = False

    covering = True
    if prev_res is not None and prev_res.q2.shape[0] > 0:
        prev_fam = lower[-1] if lower else None
        for kp2 in prev_res.q2:
            kp = tuple(int(v) for v in kp2)
            if prev_fam is not None and kp in prev_fam.enlarged:
                tile = site_tuples(prev_fam.enlarged[kp])
            else:
                if any(c % 2 for c in kp):
                    covering = False
                    continue
                tile = {tuple(c // 2 for c in kp)}
            if not any(tile <= site_tuples(family.resonant[k])
                       for k in keys):
                covering = False

    cores_ok = True
    ct = None
    for key in keys:
        a = family.cores[key]
        if a.shape[0] > 2 ** family.s:
            cores_ok = False
        if not site_tuples(a) <= site_tuples(family.resonant[key]):
            cores_ok = False
        t2 = _lex_sorted(2 * a - np.asarray(key))
        if ct is None:
            ct = t2
        elif t2.shape != ct.shape or np.any(t2 != ct):
            cores_ok = False
    if ct is not None and np.any(_lex_sorted(-ct) != ct):
        cores_ok = False

    pad_ok = family.realized_pad <= family.declared_pad
    return BlockCheckReport(absorption, separation, translation, symmetry,
                            covering, cores_ok, pad_ok, family.realized_pad,
                            family.declared_pad)


# ---------------------------------------------------------------------------
# induction state


@dataclass
class ScaleData:
    s: int
    res: ResonanceStructure
    family: BlockFamily | None
    case_to_next: CaseData | None = None
    theta_step: "ThetaStep | None" = None
    edge_dropped: int = 0


@dataclass
class MsaRun:
    model: ModelSpec
    schedule: ScaleSchedule
    theta: complex
    energy: complex
    window: LatticeBox
    scales: list = field(default_factory=list)

    def res(self, s: int) -> ResonanceStructure:
        return self.scales[s].res

    def family(self, s: int) -> BlockFamily:
        fam = self.scales[s].family
        if fam is None:
            raise ValueError(f"scale {s} has no block family")
        return fam

    @property
    def depth(self) -> int:
        return len(self.scales) - 1


# ---------------------------------------------------------------------------
# root tracking


@dataclass(frozen=True)
class ThetaStep:
    s: int
    case: int
    l: tuple | None
    theta: complex
    expected: complex
    deviation: float
    deviation_bound: float
    deviation_ok: bool
    roots: tuple
    winding_total: int
    window_radius: float
    pole_gap: float
    row_sum_max: float
    row_sum_bound: float
    det_checked: int
    det_violations: int
    newton_iters: int


def canonical_root(z: complex) -> complex:
    """Representative of the root pair {z, -z} mod 1: Re in [0, 1/2]."""
    z = complex(wrap_to_symmetric(z.real), z.imag)
    if z.real < 0.0 or (abs(z.real) < 1e-12 and z.imag < 0.0):
        z = complex(wrap_to_symmetric(-z.real), -z.imag)
    if abs(z.real + 0.5) < 1e-12:
        z = complex(0.5, z.imag)
    if (abs(z.real - 0.5) < 1e-12 or abs(z.real) < 1e-12) and z.imag < 0.0:
        z = complex(z.real, -z.imag)
    return z


class _SchurDet:
    """Evaluator of det S(z) on a fixed translated frame, reusing the
    z-independent hopping part."""

    def __init__(self, model: ModelSpec, frame_sites: np.ndarray,
                 core_mask: np.ndarray, energy: complex):
        self.pot = model.potential
        self.energy = complex(energy)
        self.slope = frame_sites @ model.frequency.array()
        self.w = model.eps * toeplitz_block(model.hopping, frame_sites)
        self.core = np.flatnonzero(core_mask)
        self.rest = np.flatnonzero(~core_mask)

    def matrix(self, z: complex) -> np.ndarray:
        m = self.w.astype(complex).copy()
        diag = np.asarray(eval_potential(self.pot, complex(z) + self.slope),
                          dtype=complex) - self.energy
        np.fill_diagonal(m, m.diagonal() + diag)
        return m

    def schur(self, z: complex) -> np.ndarray:
        m = self.matrix(z)
        a = m[np.ix_(self.rest, self.rest)]
        lu, piv = lu_factor(a, check_finite=False)
        x = lu_solve((lu, piv), m[np.ix_(self.rest, self.core)],
                     check_finite=False)
        return (m[np.ix_(self.core, self.core)]
                - m[np.ix_(self.core, self.rest)] @ x)

    def det(self, z: complex) -> complex:
        return complex(np.linalg.det(self.schur(z)))


def _winding(vals: np.ndarray) -> int:
    ang = np.angle(vals)
    inc = np.diff(np.concatenate([ang, ang[:1]]))
    inc = (inc + np.pi) % (2.0 * np.pi) - np.pi
    return int(round(float(np.sum(inc)) / (2.0 * np.pi)))


def track_theta(model: ModelSpec, family: BlockFamily, theta_prev: complex,
                case: CaseData, schedule: ScaleSchedule, s_next: int,
                energy: complex, *, contour_samples: int = 720,
                newton_budget: int = 60) -> ThetaStep:
    """Locate the characteristic root ``theta_{s_next}`` by Newton + winding.

    Works on the translated frame of one representative enlarged block.  The
    determinant of the Schur complement onto the core is analytic inside
    windows that stay clear of the poles contributed by the eliminated
    block, so an argument-principle count certifies that Newton found every
    root.  Case 1 expects the root near ``theta_prev``; case 2 near
    ``(l/2) . omega + theta_prev``.
    """
    key = family.center_keys()[0]
    c2 = np.asarray(key, dtype=np.int64)
    frame = (2 * family.enlarged[key] - c2) / 2.0
    core_frame = (2 * family.cores[key] - c2) / 2.0
    core_mask = np.zeros(frame.shape[0], dtype=bool)
    frame_keys = {tuple(row.tolist()): i for i, row in enumerate(frame)}
    for row in core_frame:
        core_mask[frame_keys[tuple(row.tolist())]] = True
    ev = _SchurDet(model, frame, core_mask, energy)

    omega = model.frequency.array()
    tp = complex(theta_prev)
    # The first tracked root moves by at most |eps| (case 1) or sqrt|eps|
    # (case 2, where the paired roots collide head on); past scale 1 the
    # perturbation is controlled by the previous tolerance instead.
    if case.case == 1:
        cands = [tp, -tp]
        expected = canonical_root(tp)
        dev_bound = (max(abs(model.eps), 1e-12) if s_next == 1
                     else schedule.delta(s_next - 1) ** 8)
    else:
        shift = complex(float(np.asarray(case.l, dtype=float) @ omega) / 2.0)
        cands = [shift + tp, shift - tp, -shift + tp, -shift - tp]
        expected = canonical_root(shift + tp)
        dev_bound = (max(math.sqrt(abs(model.eps)), 1e-12) if s_next == 1
                     else schedule.delta(s_next - 1) ** 4)

    cands = [complex(wrap_to_symmetric(c.real), c.imag) for c in cands]
    dedup: list = []
    for c in cands:
        if all(torus_norm(c - o) > 1e-9 for o in dedup):
            dedup.append(c)
    cands = dedup

    pole_z = (np.concatenate([tp - ev.slope[~core_mask],
                              -tp - ev.slope[~core_mask]])
              if np.any(~core_mask) else np.asarray([], dtype=complex))
    delta_prev = schedule.delta(s_next - 1)
    roots: list = []
    winding_total = 0
    iters_used = 0
    min_gap = float("inf")
    radius_used = 0.0

    for c in cands:
        gap = (float(np.min(torus_norm(pole_z - c)))
               if pole_z.size else float("inf"))
        min_gap = min(min_gap, gap)
        sep = min((torus_norm(c - o) for o in cands if o is not c),
                  default=float("inf"))
        r_win = min(math.sqrt(delta_prev), gap / 3.0, 0.45 * sep)
        if not math.isfinite(r_win):
            r_win = math.sqrt(delta_prev)
        if r_win < 1e-13:
            raise WindowTooSmall(
                f"root window around {c:.6g} collapsed to {r_win:.3e}")
        radius_used = max(radius_used, r_win)

        vals = None
        for bump in range(4):
            r_try = r_win * (1.0 + 0.02 * bump)
            ring = c + r_try * np.exp(2j * np.pi * np.arange(contour_samples)
                                      / contour_samples)
            vals = np.asarray([ev.det(z) for z in ring])
            floor = 1e-14 * float(np.median(np.abs(vals)))
            if float(np.min(np.abs(vals))) > floor:
                r_win = r_try
                break
        else:
            raise WindingMismatch(
                "determinant vanishes on every tested contour; the window "
                "straddles a root")
        med = float(np.median(np.abs(vals)))
        tol_det = 1e-12 * med
        w = _winding(vals)
        winding_total += w

        local: list = []
        h = 1e-5 * r_win
        for frac in (0.0, 0.3, 0.3j, -0.3, -0.3j):
            z = c + frac * r_win
            for _ in range(newton_budget):
                iters_used += 1
                f = ev.det(z)
                if abs(f) < tol_det:
                    break
                df = (ev.det(z + h) - ev.det(z - h)) / (2.0 * h)
                if abs(df) == 0.0:
                    break
                step = f / df
                z = z - step
                if abs(z - c) > 1.5 * r_win:
                    z = None
                    break
                if abs(step) < 1e-14 * max(1.0, abs(z)):
                    f = ev.det(z)
                    break
            if z is None or abs(z - c) >= r_win:
                continue
            if abs(ev.det(z)) > 10.0 * tol_det:
                continue
            if all(abs(z - r) > 1e-9 for r in local):
                local.append(z)

        mult = 0
        for r in local:
            tiny = max(1e-3 * r_win, 1e-10)
            ringt = r + tiny * np.exp(2j * np.pi * np.arange(240) / 240)
            mult += abs(_winding(np.asarray([ev.det(z) for z in ringt])))
        if mult != w:
            raise WindingMismatch(
                f"contour around {c:.6g} winds {w} times but Newton found "
                f"multiplicity {mult}")
        roots.extend(local)

    if winding_total == 0 or not roots:
        raise NoRootInWindow(
            "no characteristic root inside any candidate window")

    canon: list = []
    for r in roots:
        cr = canonical_root(r)
        if all(torus_norm(cr - o) > 1e-8 for o in canon):
            canon.append(cr)
    theta_next = min(canon, key=lambda r: torus_norm(r - expected))
    deviation = float(torus_norm(theta_next - expected))

    s_mat = ev.schur(theta_next + 1e-3 * radius_used)
    row_sum = float(np.max(np.sum(np.abs(s_mat), axis=1)))
    row_bound = 4.0 * model.potential.v_sup

    z_cap = min(radius_used,
                math.exp(max(schedule.z_exp * schedule.log_delta[s_next],
                             -MAX_EXP)))
    log_dp = schedule.log_delta[s_next - 1]
    checked = 0
    bad = 0
    for rr in np.geomspace(max(z_cap * 1e-3, 1e-12), z_cap * 0.99, 8):
        for ang in np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False):
            z = theta_next + rr * np.exp(1j * ang)
            det = ev.det(z)
            lhs = math.log(abs(det)) if det != 0 else -math.inf
            rhs = (log_dp + log_torus_norm(z - theta_next)
                   + log_torus_norm(z + theta_next))
            checked += 1
            if lhs < rhs - 1e-9:
                bad += 1

    return ThetaStep(s_next, case.case, case.l, theta_next, expected,
                     deviation, dev_bound, deviation <= dev_bound,
                     tuple(canon), winding_total, radius_used,
                     min_gap if math.isfinite(min_gap) else float("inf"),
                     row_sum, row_bound, checked, bad, iters_used)


# ---------------------------------------------------------------------------
# driver


def run_induction(model: ModelSpec, theta, energy, window: LatticeBox,
                  schedule: ScaleSchedule, s_target: int, *,
                  track: bool = True) -> MsaRun:
    """Run the ladder from scale 0 up to ``s_target`` inside one window.

    Stops early (with fewer recorded scales) when the resonance set empties
    out, which simply means the window holds no deeper structure.
    """
    if s_target > schedule.s_max:
        raise ValueError("schedule is too short for the requested depth")
    theta = complex(theta.theta) if hasattr(theta, "theta") else complex(theta)
    if isinstance(energy, EnergyPoint):
        e_val = complex(energy.energy)
        theta0 = (complex(energy.theta0) if energy.theta0 is not None
                  else solve_phase_for_energy(model.potential, e_val))
    else:
        e_val = complex(energy)
        theta0 = solve_phase_for_energy(model.potential, e_val)

    run = MsaRun(model, schedule, theta, e_val, window)
    cand2 = 2 * window.sites
    res0 = detect_resonances(model, theta, 0, theta0, schedule, cand2,
                             (0,) * window.dim)
    run.scales.append(ScaleData(0, res0, None))

    cores: Mapping | None = None
    for s in range(s_target):
        cur = run.scales[s]
        case = classify_case(cur.res, schedule.sep_threshold(s))
        cur.case_to_next = case
        p_next2, offset2, cores = advance_resonances(cur.res, case, cores)
        if p_next2.shape[0] == 0:
            break
        # Blocks that cannot fit inside the window belong to sets the
        # goodness predicate never inspects (it only quantifies over blocks
        # contained in the region), so edge centers leave the tracked
        # family rather than aborting the ladder.
        margin2 = 2 * (schedule.radii(s + 1, case.case)[2]
                       + schedule.pad_budget(s + 1))
        wc2 = np.asarray(window.center2, dtype=np.int64)
        fits = (np.max(np.abs(p_next2 - wc2), axis=1) + margin2
                <= window.reach2)
        dropped = int(np.count_nonzero(~fits))
        if dropped:
            p_next2 = p_next2[fits]
            kept = {tuple(int(v) for v in row) for row in p_next2}
            cores = {k: v for k, v in cores.items() if k in kept}
        if p_next2.shape[0] == 0:
            break
        lower = [sd.family for sd in run.scales[1:] if sd.family is not None]
        family = construct_blocks(p_next2, cores, s + 1, case.case, offset2,
                                  schedule, lower, window)
        if track:
            step = track_theta(model, family, cur.res.theta_s, case,
                               schedule, s + 1, e_val)
            theta_next = step.theta
        else:
            step = None
            shift = (0.0 if case.case == 1 else
                     float(np.asarray(case.l, dtype=float)
                           @ model.frequency.array()) / 2.0)
            theta_next = canonical_root(complex(cur.res.theta_s) + shift)
        res = detect_resonances(model, theta, s + 1, theta_next, schedule,
                                p_next2, offset2)
        run.scales.append(ScaleData(s + 1, res, family, theta_step=step,
                                    edge_dropped=dropped))
    return run


# ---------------------------------------------------------------------------
# goodness and estimates


@dataclass(frozen=True)
class GoodSetReport:
    good: bool
    s: int
    failures: tuple


def check_good(run: MsaRun, sites, s: int) -> GoodSetReport:
    """The two-clause goodness predicate for a finite set at scale s.

    Clause one (all scales below s): a resonant enlarged block inside the
    set, covered by a next-scale resonant block, forces that next block's
    enlargement to be inside too.  Clause two: no current-scale resonance
    has its enlarged block inside the set.  At scale 0 both collapse to
    "the set avoids Q_0".
    """
    if s > run.depth:
        raise ValueError(f"run only reaches scale {run.depth}")
    lam = site_tuples(np.atleast_2d(np.asarray(sites, dtype=np.int64)))
    failures = []

    def enlarged_tile(scale: int, key: tuple) -> set:
        if scale == 0:
            return {tuple(c // 2 for c in key)}
        return site_tuples(run.family(scale).enlarged[key])

    for sp in range(s):
        res_sp = run.res(sp)
        fam_next = run.family(sp + 1)
        res_keys = {tuple(int(v) for v in row) for row in res_sp.q2}
        for kp in sorted(res_keys):
            tile = enlarged_tile(sp, kp)
            if not tile <= lam:
                continue
            for key in fam_next.center_keys():
                if tile <= site_tuples(fam_next.resonant[key]):
                    if not site_tuples(fam_next.enlarged[key]) <= lam:
                        failures.append(("carry", sp, kp, key))

    res_s = run.res(s)
    for kq in sorted({tuple(int(v) for v in row) for row in res_s.q2}):
        if enlarged_tile(s, kq) <= lam:
            failures.append(("resonant", s, kq, None))
    return GoodSetReport(not failures, s, tuple(failures))


@dataclass(frozen=True)
class EstimateReport:
    s: int
    mode: str
    log_norm: float
    log_bound: float
    log_bound_coarse: float
    norm_ok: bool
    decay: DecayFit | None
    passed: bool


def _log_phase_factor(run: MsaRun, s: int, lam: set) -> float:
    """log of the sup over contained enlarged blocks of the inverse
    distance product to the pair of tracked roots."""
    res = run.res(s)
    theta_s = res.theta_s
    best = 0.0
    omega = run.model.frequency.array()
    for key in ({tuple(int(v) for v in row) for row in res.p2}
                if s > 0 else set()):
        tile = site_tuples(run.family(s).enlarged[key])
        if not tile <= lam:
            continue
        phase = run.theta + float(np.asarray(key, dtype=float) @ omega) / 2.0
        val = -(log_torus_norm(phase - theta_s)
                + log_torus_norm(phase + theta_s))
        best = max(best, float(val))
    return best


def verify_good_set(run: MsaRun, sites, s: int) -> EstimateReport:
    """Inverse-norm and decay estimate on an s-good set.

    Scale 0 uses the Morse floor (norm at most ``2 kappa1^-1 delta_0^-2``,
    decay ``(3/4) alpha`` at every distance); later scales use
    ``2 delta_{s-1}^-3`` times the worst inverse distance product over the
    contained enlarged blocks (coarsely ``delta_s^-3``), with decay
    ``alpha_s`` past ten enlarged diameters.
    """
    report = check_good(run, sites, s)
    if not report.good:
        raise PreconditionViolated(
            f"set is not {s}-good: first failure {report.failures[0]}")
    sites_arr = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    model = run.model
    t = assemble_t_matrix(model.potential, model.hopping,
                          model.frequency.array(), model.eps,
                          sites_arr.astype(float), run.theta, run.energy)
    g = green_solve(t)
    log_norm = math.log(g.op_norm) if g.op_norm > 0 else -math.inf
    sched = run.schedule
    if s == 0:
        log_bound = (math.log(2.0 / model.potential.kappa1)
                     - 2.0 * sched.log_delta[0])
        log_coarse = log_bound
        alpha_s = sched.alpha_seq[0]
        threshold = 0.0
    else:
        lam = site_tuples(sites_arr)
        log_bound = (math.log(2.0) - 3.0 * sched.log_delta[s - 1]
                     + _log_phase_factor(run, s, lam))
        log_coarse = -3.0 * sched.log_delta[s]
        alpha_s = sched.alpha_seq[s]
        threshold = 10.0 * run.family(s).zeta_tilde
    fit = decay_scan(g.matrix, sites_arr, alpha_s, sched.rho,
                     threshold=threshold)
    norm_ok = log_norm <= min(log_bound, log_coarse) + 1e-9
    return EstimateReport(s, "good-set", log_norm, log_bound, log_coarse,
                          norm_ok, fit, norm_ok and fit.holds)


def verify_block(run: MsaRun, s: int, center2, mode: str = "offdiag"
                 ) -> EstimateReport:
    """Estimates on one enlarged block ``T`` restriction at scale s.

    ``offdiag`` is for centers outside the current resonance set: norm at
    most ``delta_{s-1}^-2 delta_s^-2`` and transitional decay past a tenth
    of the enlarged diameter.  ``resonant`` is the distance-product bound
    ``delta_{s-1}^-2 / (||.-theta_s|| ||.+theta_s||)`` valid for every
    center of the scale.
    """
    if s < 1:
        raise ValueError("block estimates start at scale 1")
    fam = run.family(s)
    key = tuple(int(v) for v in np.asarray(center2, dtype=np.int64))
    if key not in fam.enlarged:
        raise KeyError(f"{key} is not a center at scale {s}")
    res = run.res(s)
    model = run.model
    sched = run.schedule
    sites_arr = fam.enlarged[key]
    t = assemble_t_matrix(model.potential, model.hopping,
                          model.frequency.array(), model.eps,
                          sites_arr.astype(float), run.theta, run.energy)
    g = green_solve(t)
    log_norm = math.log(g.op_norm) if g.op_norm > 0 else -math.inf

    omega = model.frequency.array()
    phase = run.theta + float(np.asarray(key, dtype=float) @ omega) / 2.0
    if mode == "offdiag":
        in_q = any(np.array_equal(np.asarray(key), row) for row in res.q2)
        if in_q:
            raise PreconditionViolated(
                f"center {key} is resonant at scale {s}; the off-diagonal "
                "estimate does not apply")
        log_bound = -2.0 * sched.log_delta[s - 1] - 2.0 * sched.log_delta[s]
        log_coarse = -3.0 * sched.log_delta[s]
        fit = decay_scan(g.matrix, sites_arr, sched.alpha_prime[s],
                         sched.rho, threshold=fam.zeta_tilde / 10.0)
    elif mode == "resonant":
        log_bound = (-2.0 * sched.log_delta[s - 1]
                     - float(log_torus_norm(phase - res.theta_s))
                     - float(log_torus_norm(phase + res.theta_s)))
        log_coarse = math.inf
        fit = None
    else:
        raise ValueError(f"unknown block estimate mode {mode!r}")
    norm_ok = log_norm <= min(log_bound, log_coarse) + 1e-9
    passed = norm_ok and (fit is None or fit.holds)
    return EstimateReport(s, mode, log_norm, log_bound, log_coarse, norm_ok,
                          fit, passed)


def deformation_levels(run: MsaRun, s: int):
    """Deformation levels (descending scale) from the tracked block stack."""
    levels = []
    for sp in range(min(s, run.depth), 0, -1):
        fam = run.scales[sp].family
        if fam is None:
            continue
        blocks = {key: fam.enlarged[key] for key in fam.center_keys()}
        test_r = fam.radii[2] + fam.realized_pad
        levels.append(deformation_level(sp, blocks, test_radius=test_r))
    return levels
