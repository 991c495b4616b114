"""Batch experiment runner: JSON config in, report bundle out.

The bundle is a directory holding ``manifest.json``, ``summary.json`` (plus
``summary.csv`` in CSV mode), and one tabular artifact per sweep point.  It
is written atomically (staged next to the target, then renamed), so an
interrupted run never leaves a partial bundle at the output path.  With
timings disabled (the default) a rerun with the same config and seed
reproduces the bundle byte for byte.

Config layout, JSON with flat sections::

    {
      "kind": "dynamics",        # assemble | green | msa | dynamics
                                 #   | localize | verify-lemmas
      "seed": 0,
      "model": {
        "potential": "cosine",   # the built-in cosine shape
        "strip": 0.5, "beta": 0.05,
        "alpha": 1.0, "rho": 2.0,
        "eps": 1e-3, "eps0": 1e-2,
        "omega": "golden",       # or a list of floats
        "tau": 2.0, "gamma": 0.2
      },
      "schedule": {
        "mode": "desk", "rho_prime": 1.5, "s_max": 1,
        "delta0": 0.02, "n0": 8, "g_delta": 3.0, "g_n": 1.5
      },
      "sweep": {
        "radius": 32,
        "theta":  [0.113],       # list, {"start","stop","count","log"?},
                                 #   or {"random": COUNT}
        "energy": [0.0],
        "times":  {"start": 125.0, "stop": 1000.0, "count": 7, "log": true},
        "p": 2.0,
        "s_target": 1,           # msa only
        "averaged": false,       # dynamics only
        "instances": 200         # verify-lemmas only
      },
      "output": {"record_timings": false}
    }

An explicitly empty grid (``"theta": []``) is an intentional empty sweep
and produces a manifest-only bundle; an absent grid is a config error.
Exit codes: 0 all points pass, 1 at least one recorded violation, 2
configuration or runtime failure.  ``QPLAB_CACHE_DIR`` overrides where
eigendecompositions are cached between runs; on-disk cache state never
changes bundle contents, only speed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import shutil
import sys
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    EvolutionData,
    evolve_amplitudes,
    localization_profile,
    moment_p,
)
from .errors import ConfigInvalid, IoFailure, QplabError
from .greens import (
    combes_thomas_check,
    det_perturbation_check,
    green_solve,
    hadamard_adjugate_check,
    sandwich_check,
    schur_complement,
)
from .lattice import (
    box_around,
    extract_lower_bound,
    pairwise_sup_dist,
    quasi_metric_certify,
    quasi_metric_defects,
)
from .model import (
    FrequencyVector,
    HoppingKernel,
    ModelSpec,
    PhasePoint,
    PotentialSpec,
    assemble_restriction,
    solve_phase_for_energy,
)
from .msa import build_schedule, run_induction
from .torus import torus_norm

KINDS = ("assemble", "green", "msa", "dynamics", "localize", "verify-lemmas")

_MODEL_KEYS = {"potential", "strip", "beta", "alpha", "rho", "eps", "eps0",
               "omega", "tau", "gamma"}
_SCHEDULE_KEYS = {"mode", "rho_prime", "s_max", "delta0", "eps0", "n0",
                  "g_delta", "g_n"}
_SWEEP_KEYS = {"radius", "theta", "energy", "times", "p", "s_target",
               "averaged", "instances"}
_OUTPUT_KEYS = {"record_timings"}

_REQUIRED = object()


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0+unknown"


# ---------------------------------------------------------------------------
# config parsing


def _section(raw: dict, name: str, allowed: set) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigInvalid("must be an object", field=name)
    for key in sec:
        if key not in allowed:
            raise ConfigInvalid("unknown key", field=f"{name}.{key}")
    return sec


def _scalar(sec: dict, path: str, types, default=_REQUIRED, *,
            positive: bool = False):
    name = path.split(".")[-1]
    if name not in sec:
        if default is _REQUIRED:
            raise ConfigInvalid("missing required field", field=path)
        return default
    val = sec[name]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple)
                                              else (types,)):
        raise ConfigInvalid("expected a number, got a boolean", field=path)
    if not isinstance(val, types):
        raise ConfigInvalid(f"expected {types}, got {type(val).__name__}",
                            field=path)
    if positive and not val > 0:
        raise ConfigInvalid("must be positive", field=path)
    return val


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    model: ModelSpec
    schedule_cfg: dict
    sweep: dict
    output: dict
    raw: dict

    @property
    def record_timings(self) -> bool:
        return bool(self.output.get("record_timings", False))


def default_config(kind: str = "verify-lemmas") -> dict:
    return {
        "kind": kind,
        "seed": 0,
        "model": {"potential": "cosine", "strip": 0.5, "beta": 0.05,
                  "alpha": 1.0, "rho": 2.0, "eps": 1e-3, "eps0": 1e-2,
                  "omega": "golden", "tau": 2.0, "gamma": 0.2},
        "schedule": {"mode": "desk", "rho_prime": 1.5, "s_max": 1,
                     "delta0": 0.02, "n0": 8, "g_delta": 3.0, "g_n": 1.5},
        "sweep": {"radius": 16, "theta": [0.113], "energy": [0.0],
                  "instances": 200},
        "output": {},
    }


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be an object")
    for key in raw:
        if key not in {"kind", "seed", "model", "schedule", "sweep",
                       "output"}:
            raise ConfigInvalid("unknown key", field=key)
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigInvalid(f"must be one of {', '.join(KINDS)}",
                            field="kind")
    seed = _scalar(raw, "seed", int, 0)

    m = _section(raw, "model", _MODEL_KEYS)
    pot_kind = _scalar(m, "model.potential", str, "cosine")
    if pot_kind != "cosine":
        raise ConfigInvalid("only the cosine potential is built in",
                            field="model.potential")
    strip = float(_scalar(m, "model.strip", (int, float), 0.5,
                          positive=True))
    beta = float(_scalar(m, "model.beta", (int, float), 0.05, positive=True))
    alpha = float(_scalar(m, "model.alpha", (int, float), 1.0,
                          positive=True))
    rho = float(_scalar(m, "model.rho", (int, float), 2.0, positive=True))
    eps = float(_scalar(m, "model.eps", (int, float), _REQUIRED))
    if "eps0" in m:
        eps0 = float(_scalar(m, "model.eps0", (int, float), _REQUIRED,
                             positive=True))
    else:
        eps0 = 1e-2
        warnings.warn(
            "model.eps0 not set; using the 1e-2 convention, but the theory "
            "only promises existence of a sufficiently small threshold",
            stacklevel=2)
    tau = float(_scalar(m, "model.tau", (int, float), 2.0, positive=True))
    gamma = float(_scalar(m, "model.gamma", (int, float), 0.2,
                          positive=True))
    omega_raw = m.get("omega", "golden")
    if omega_raw == "golden":
        freq = FrequencyVector.golden(tau=tau, gamma=gamma)
    elif isinstance(omega_raw, list) and omega_raw and all(
            isinstance(v, (int, float)) for v in omega_raw):
        freq = FrequencyVector(tuple(float(v) for v in omega_raw), tau,
                               gamma)
    else:
        raise ConfigInvalid("expected 'golden' or a list of floats",
                            field="model.omega")

    sched = dict(_section(raw, "schedule", _SCHEDULE_KEYS))
    sched.setdefault("mode", "desk")
    if sched["mode"] not in ("desk", "paper"):
        raise ConfigInvalid("mode must be 'desk' or 'paper'",
                            field="schedule.mode")
    rho_prime = float(_scalar(sched, "schedule.rho_prime", (int, float),
                              1.5, positive=True))
    sched["rho_prime"] = rho_prime
    sched["s_max"] = int(_scalar(sched, "schedule.s_max", int, 1))

    potential = PotentialSpec.cosine(strip=strip, beta=beta)
    hopping = HoppingKernel.saturating(alpha, rho)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = ModelSpec(potential, hopping, freq, eps, eps0=eps0,
                          rho_prime=rho_prime)
    if abs(eps) > eps0:
        warnings.warn(
            f"|eps| = {abs(eps)} exceeds eps0 = {eps0}; results leave the "
            "guaranteed regime", stacklevel=2)

    sweep = _section(raw, "sweep", _SWEEP_KEYS)
    output = _section(raw, "output", _OUTPUT_KEYS)
    return ExperimentConfig(kind, int(seed), model, sched, dict(sweep),
                            dict(output), raw)


def _build_schedule(cfg: ExperimentConfig):
    sc = cfg.schedule_cfg
    kw = {"alpha": cfg.model.hopping.alpha, "rho": cfg.model.hopping.rho,
          "rho_prime": sc["rho_prime"], "s_max": sc["s_max"]}
    if sc["mode"] == "paper":
        kw["eps0"] = sc.get("eps0", cfg.model.eps0)
    else:
        kw["delta0"] = sc.get("delta0", 0.02)
        kw["n0"] = sc.get("n0", 8)
        kw["g_delta"] = sc.get("g_delta", 3.0)
        kw["g_n"] = sc.get("g_n", 1.5)
    try:
        return build_schedule(sc["mode"], **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc), field="schedule") from exc


def _grid(cfg: ExperimentConfig, name: str, *, default=None,
          substream: int = 0) -> list:
    spec = cfg.sweep.get(name, default)
    if spec is None:
        raise ConfigInvalid("missing required grid", field=f"sweep.{name}")
    path = f"sweep.{name}"
    if isinstance(spec, list):
        if not all(isinstance(v, (int, float)) for v in spec):
            raise ConfigInvalid("grid entries must be numbers", field=path)
        return [float(v) for v in spec]
    if isinstance(spec, dict):
        if "random" in spec:
            count = spec["random"]
            if not isinstance(count, int) or count < 0:
                raise ConfigInvalid("random count must be a non-negative "
                                    "integer", field=path)
            rng = np.random.default_rng([cfg.seed, substream])
            lo = float(spec.get("low", 0.0))
            hi = float(spec.get("high", 1.0))
            return sorted(float(v) for v in rng.uniform(lo, hi, count))
        try:
            start = float(spec["start"])
            stop = float(spec["stop"])
            count = int(spec["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid("range grids need start/stop/count",
                                field=path) from exc
        if count < 0:
            raise ConfigInvalid("count must be non-negative", field=path)
        if spec.get("log"):
            if start <= 0 or stop <= 0:
                raise ConfigInvalid("log grids need positive endpoints",
                                    field=path)
            return [float(v) for v in np.geomspace(start, stop, count)]
        return [float(v) for v in np.linspace(start, stop, count)]
    raise ConfigInvalid("expected a list or a range object", field=path)


def _radius(cfg: ExperimentConfig, default: int = 16) -> int:
    r = cfg.sweep.get("radius", default)
    if not isinstance(r, int) or r < 1:
        raise ConfigInvalid("radius must be a positive integer",
                            field="sweep.radius")
    return r


def build_points(cfg: ExperimentConfig) -> list:
    """Sweep grid as a sorted list of parameter dicts (the merge order)."""
    if cfg.kind == "verify-lemmas":
        return [{}]
    thetas = _grid(cfg, "theta", substream=0)
    if cfg.kind in ("dynamics", "localize"):
        return [{"theta": t} for t in sorted(thetas)]
    energies = _grid(cfg, "energy", substream=1)
    return [{"theta": t, "energy": e}
            for t in sorted(thetas) for e in sorted(energies)]


# ---------------------------------------------------------------------------
# cache


def cache_key(model: ModelSpec, box, theta) -> str:
    """Content hash of an assembly; floats enter as exact hex, no rounding."""
    th = complex(theta.theta) if hasattr(theta, "theta") else complex(theta)

    def fx(v: float) -> str:
        return float(v).hex()

    payload = {
        "pot": model.potential.kind,
        "strip": fx(model.potential.strip),
        "alpha": fx(model.hopping.alpha),
        "rho": fx(model.hopping.rho),
        "hop": model.hopping.kind,
        "eps": fx(model.eps),
        "omega": [fx(v) for v in model.frequency.omega],
        "center2": [int(c) for c in box.center2],
        "radius": fx(box.radius),
        "theta": [fx(th.real), fx(th.imag)],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def _cache_dir() -> str:
    return os.environ.get(
        "QPLAB_CACHE_DIR",
        os.path.join(tempfile.gettempdir(), "qplab-eig-cache"))


class EigCache:
    """Single-writer eigendecomposition store shared across sweep points.

    Distinct keys are computed once up front (serially), so in-run hit
    counts do not depend on thread scheduling; the disk layer only recalls
    identical float64 payloads and can never change results.
    """

    def __init__(self):
        self.memo: dict = {}
        self.hits = 0
        self.disk_dir = _cache_dir()

    def _disk_load(self, key: str) -> EvolutionData | None:
        path = os.path.join(self.disk_dir, key + ".npz")
        if not os.path.exists(path):
            return None
        try:
            with np.load(path) as data:
                return EvolutionData(data["sites"], data["eigvals"],
                                     data["eigvecs"],
                                     int(data["origin_idx"]),
                                     data["weights0"], data["dists"])
        except Exception:
            return None

    def _disk_store(self, key: str, ev: EvolutionData) -> None:
        try:
            os.makedirs(self.disk_dir, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.disk_dir, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, sites=ev.sites, eigvals=ev.eigvals,
                         eigvecs=ev.eigvecs, origin_idx=ev.origin_idx,
                         weights0=ev.weights0, dists=ev.dists)
            os.replace(tmp, os.path.join(self.disk_dir, key + ".npz"))
        except OSError:
            pass

    def get(self, model: ModelSpec, box, theta) -> EvolutionData:
        key = cache_key(model, box, theta)
        if key in self.memo:
            self.hits += 1
            return self.memo[key]
        ev = self._disk_load(key)
        if ev is None:
            ev = evolve_amplitudes(model, box, theta)
            self._disk_store(key, ev)
        self.memo[key] = ev
        return ev


# ---------------------------------------------------------------------------
# point handlers


@dataclass
class Table:
    header: tuple
    rows: list = field(default_factory=list)


@dataclass
class PointResult:
    status: str
    detail: str
    tables: dict = field(default_factory=dict)


def _status(n_fail: int, n_rows: int, detail: str = "") -> PointResult:
    status = "pass" if n_fail == 0 else "fail"
    msg = detail or (f"{n_fail} of {n_rows} rows violate"
                     if n_fail else f"{n_rows} rows, all pass")
    return PointResult(status, msg)


def _run_assemble(cfg: ExperimentConfig, point: dict, ctx: dict
                  ) -> PointResult:
    box = box_around(np.zeros(cfg.model.dim), _radius(cfg))
    restriction = assemble_restriction(
        cfg.model, box, PhasePoint(point["theta"]), point["energy"])
    dim = cfg.model.dim
    header = tuple(f"n{i}" for i in range(dim)) + ("diag_re", "diag_im")
    table = Table(header)
    diag = np.diag(restriction.matrix)
    for row, val in zip(restriction.sites, diag):
        table.rows.append(tuple(int(v) for v in row)
                          + (float(val.real), float(val.imag)))
    res = _status(0, len(table.rows),
                  f"{len(table.rows)} sites, hermitian defect "
                  f"{restriction.hermitian_defect:.3e}")
    res.tables["assemble"] = table
    return res


def _run_green(cfg: ExperimentConfig, point: dict, ctx: dict) -> PointResult:
    model = cfg.model
    schedule = ctx["schedule"]
    delta0 = math.exp(schedule.log_delta[0])
    theta, energy = point["theta"], point["energy"]
    box = box_around(np.zeros(model.dim), _radius(cfg))
    theta0 = solve_phase_for_energy(model.potential, energy)
    phases = theta + box.sites.astype(float) @ model.frequency.array()
    gap = np.minimum(torus_norm(phases - theta0), torus_norm(phases + theta0))
    if float(np.min(gap)) < delta0:
        return PointResult(
            "skip", f"window is not 0-good at theta = {theta:.6g} "
            f"(phase gap {float(np.min(gap)):.3e} < delta0 {delta0:.3e})")

    restriction = assemble_restriction(model, box, PhasePoint(theta), energy)
    g = green_solve(restriction.matrix)
    dist = pairwise_sup_dist(box.sites.astype(float)).astype(np.int64)
    alpha, rho = model.hopping.alpha, model.hopping.rho
    kappa1 = model.potential.kappa1
    table = Table(("dist", "modulus", "bound", "pass"))
    n_fail = 0
    norm_bound = 2.0 / (kappa1 * delta0 ** 2)
    for r in range(0, int(dist.max()) + 1):
        mask = dist == r
        if not mask.any():
            continue
        modulus = float(np.max(np.abs(g.matrix[mask])))
        if r == 0:
            bound = norm_bound
            modulus = float(g.op_norm)
        else:
            bound = math.exp(-0.75 * alpha * math.log1p(r) ** rho)
        ok = modulus <= bound * (1.0 + 1e-9)
        n_fail += 0 if ok else 1
        table.rows.append((int(r), modulus, bound, ok))
    res = _status(n_fail, len(table.rows))
    res.tables["green"] = table
    return res


def _run_msa(cfg: ExperimentConfig, point: dict, ctx: dict) -> PointResult:
    model = cfg.model
    schedule = ctx["schedule"]
    s_target = cfg.sweep.get("s_target", schedule.s_max)
    if not isinstance(s_target, int) or not 1 <= s_target <= schedule.s_max:
        raise ConfigInvalid("s_target must lie within the schedule depth",
                            field="sweep.s_target")
    box = box_around(np.zeros(model.dim), _radius(cfg, 64))
    run = run_induction(model, point["theta"], point["energy"], box,
                        schedule, s_target)
    table = Table(("s", "case", "shift2", "theta_re", "theta_im",
                   "resonant_sites", "blocks", "pad_realized",
                   "pad_declared", "deviation", "deviation_bound",
                   "winding", "det_violations", "pass"))
    n_fail = 0
    res0 = run.res(0)
    table.rows.append((0, "", "", float(res0.theta_s.real),
                       float(res0.theta_s.imag), len(res0.q2), 0, 0, 0,
                       0.0, 0.0, 0, 0, True))
    for s in range(1, run.depth + 1):
        sd = run.scales[s]
        fam, step = sd.family, sd.theta_step
        case = run.scales[s - 1].case_to_next
        shift = "" if step is None or step.l is None else \
            ";".join(str(int(v)) for v in step.l)
        if step is None:
            ok = True
            dev = dev_bound = 0.0
            wind = det_v = 0
        else:
            ok = step.deviation_ok and step.det_violations == 0
            dev, dev_bound = step.deviation, step.deviation_bound
            wind, det_v = step.winding_total, step.det_violations
        n_fail += 0 if ok else 1
        table.rows.append((s, case.case if case else "", shift,
                           float(sd.res.theta_s.real),
                           float(sd.res.theta_s.imag), len(sd.res.q2),
                           len(fam.centers2) if fam is not None else 0,
                           fam.realized_pad if fam is not None else 0,
                           fam.declared_pad if fam is not None else 0,
                           float(dev), float(dev_bound), int(wind),
                           int(det_v), ok))
    res = _status(n_fail, len(table.rows),
                  f"reached scale {run.depth} of {s_target}"
                  if run.depth < s_target else "")
    res.tables["msa"] = table
    return res


def _run_dynamics(cfg: ExperimentConfig, point: dict, ctx: dict
                  ) -> PointResult:
    model = cfg.model
    schedule = ctx["schedule"]
    cache: EigCache = ctx["cache"]
    p = float(cfg.sweep.get("p", 2.0))
    times = _grid(cfg, "times", substream=2)
    if not times:
        raise ConfigInvalid("times grid must not be empty",
                            field="sweep.times")
    box = box_around(np.zeros(model.dim), _radius(cfg, 64))
    ev = cache.get(model, box, point["theta"])
    delta0 = math.exp(schedule.log_delta[0])
    beta = model.potential.beta
    t0 = max(1.0 / beta, delta0 ** -3.0)
    rho_prime = schedule.rho_prime
    table = Table(("t", "moment", "bound", "boundary_mass", "gated", "pass"))
    n_fail = 0
    for t in times:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mv = moment_p(ev, float(t), p)
        bound = 2.0 ** p * math.exp(
            p * math.log(t) ** (2.0 / (1.0 + rho_prime))) if t > 1 else \
            float("inf")
        gated = t >= t0 and mv.boundary_mass < 1e-6
        ok = (not gated) or mv.value <= bound
        n_fail += 0 if ok else 1
        table.rows.append((float(t), mv.value, bound, mv.boundary_mass,
                           gated, ok))
    res = _status(n_fail, len(table.rows))
    res.tables["dynamics"] = table
    return res


def _run_localize(cfg: ExperimentConfig, point: dict, ctx: dict
                  ) -> PointResult:
    model = cfg.model
    cache: EigCache = ctx["cache"]
    box = box_around(np.zeros(model.dim), _radius(cfg, 64))
    ev = cache.get(model, box, point["theta"])
    profiles = localization_profile(ev, model.hopping.rho)
    dim = cfg.model.dim
    header = ("eigenvalue",) + tuple(f"c{i}" for i in range(dim)) \
        + ("rate", "goodness", "support")
    table = Table(header)
    for prof in profiles:
        table.rows.append((prof.eigenvalue,) + prof.center
                          + (prof.fitted_rate, prof.goodness, prof.support))
    res = PointResult("pass", f"{len(table.rows)} eigenvectors profiled")
    res.tables["localize"] = table
    return res


def _suite_rows(cfg: ExperimentConfig, instances: int) -> list:
    """The lemma suites: (name, instances, violations) triples."""
    model = cfg.model
    rho = model.hopping.rho
    rows = []

    rng = np.random.default_rng([cfg.seed, 10])
    cert = quasi_metric_certify(rho, 8, budget=max(instances, 4096),
                                seed=cfg.seed)
    samples = np.exp(rng.uniform(math.log(1e-3), math.log(1e4),
                                 size=(instances, 6)))
    defects = quasi_metric_defects(samples, rho)
    rows.append(("quasi-metric", instances,
                 int(np.count_nonzero(defects > cert.c_hat + 1e-9))))

    rng = np.random.default_rng([cfg.seed, 11])
    bad = 0
    for _ in range(instances):
        x = float(np.exp(rng.uniform(0.0, 8.0)))
        y = float(rng.uniform(0.0, 1.0)) * min(x, (1 + x) / 2.0)
        if not (x > y > 0 and 1 + x > 2 * y):
            continue
        bound = extract_lower_bound(x, y, rho)
        if bound > math.log1p(x - y) ** rho * (1 + 1e-12) + 1e-12:
            bad += 1
    rows.append(("extract", instances, bad))

    rng = np.random.default_rng([cfg.seed, 12])
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        if not hadamard_adjugate_check(m).holds:
            bad += 1
    rows.append(("hadamard", instances, bad))

    rng = np.random.default_rng([cfg.seed, 13])
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(3, 8))
        m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        m += 2.0 * n * np.eye(n)
        m /= max(1.0, float(np.abs(m).max()) * n)
        k = int(rng.integers(1, n))
        idx = rng.permutation(n)[:k]
        data = schur_complement(m, idx)
        rep = sandwich_check(m, idx)
        if data.det_defect > 1e-6 or not (rep.lower_holds and
                                          rep.upper_holds):
            bad += 1
    rows.append(("schur", instances, bad))

    rng = np.random.default_rng([cfg.seed, 14])
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        a = rng.normal(size=(n, n))
        b = rng.normal(size=(n, n)) * 10.0 ** rng.uniform(-6, 0)
        if not det_perturbation_check(a, b).holds:
            bad += 1
    rows.append(("det-perturbation", instances, bad))

    rng = np.random.default_rng([cfg.seed, 15])
    ct_n = max(1, instances // 20)
    bad = 0
    box = box_around(np.zeros(model.dim), _radius(cfg, 16))
    for _ in range(ct_n):
        theta = float(rng.uniform(0.0, 1.0))
        restriction = assemble_restriction(model, box, PhasePoint(theta),
                                           0.0)
        z = complex(rng.uniform(-1.0, 1.0), 0.75)
        rep = combes_thomas_check(restriction.matrix,
                                  box.sites.astype(float), z,
                                  0.75 * model.hopping.alpha, rho,
                                  cert.c_hat)
        if not rep.holds:
            bad += 1
    rows.append(("combes-thomas", ct_n, bad))
    return rows


def _run_verify(cfg: ExperimentConfig, point: dict, ctx: dict
                ) -> PointResult:
    instances = cfg.sweep.get("instances", 200)
    if not isinstance(instances, int) or instances < 1:
        raise ConfigInvalid("instances must be a positive integer",
                            field="sweep.instances")
    table = Table(("suite", "instances", "violations", "pass"))
    n_fail = 0
    for name, count, bad in _suite_rows(cfg, instances):
        ok = bad == 0
        n_fail += 0 if ok else 1
        table.rows.append((name, count, bad, ok))
    res = _status(n_fail, len(table.rows))
    res.tables["suites"] = table
    return res


_HANDLERS = {
    "assemble": _run_assemble,
    "green": _run_green,
    "msa": _run_msa,
    "dynamics": _run_dynamics,
    "localize": _run_localize,
    "verify-lemmas": _run_verify,
}


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class ReportBundle:
    manifest: dict
    summary: list
    artifacts: dict


def _canonical(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


def run(cfg: ExperimentConfig, *, jobs: int = 1,
        fail_fast: bool = False) -> ReportBundle:
    """Execute the sweep and assemble an in-memory bundle.

    Grid points run under a thread pool but merge in sorted-parameter
    order, so the bundle contents never depend on scheduling.  A point
    that raises a package error becomes an ``error`` row unless fail-fast
    is set.
    """
    t_start = time.monotonic()
    points = build_points(cfg)
    ctx: dict = {"cache": EigCache()}
    if cfg.kind in ("green", "msa", "dynamics"):
        ctx["schedule"] = _build_schedule(cfg)

    if cfg.kind in ("dynamics", "localize"):
        box = box_around(np.zeros(cfg.model.dim), _radius(cfg, 64))
        for theta in sorted({pt["theta"] for pt in points}):
            ctx["cache"].get(cfg.model, box, theta)
        ctx["cache"].hits = 0

    handler = _HANDLERS[cfg.kind]

    def work(i: int) -> PointResult:
        return handler(cfg, points[i], ctx)

    results: dict = {}
    if jobs > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(work, i) for i in range(len(points))}
            for i in range(len(points)):
                try:
                    results[i] = futures[i].result()
                except QplabError as exc:
                    if fail_fast:
                        raise
                    results[i] = PointResult(
                        "error", f"{type(exc).__name__}: {exc}")
    else:
        for i in range(len(points)):
            try:
                results[i] = work(i)
            except QplabError as exc:
                if fail_fast:
                    raise
                results[i] = PointResult(
                    "error", f"{type(exc).__name__}: {exc}")

    summary = []
    artifacts: dict = {}
    counts = {"pass": 0, "fail": 0, "skip": 0, "error": 0}
    for i in range(len(points)):
        res = results[i]
        counts[res.status] += 1
        names = []
        for base, table in sorted(res.tables.items()):
            name = f"{base}_{i:03d}"
            artifacts[name] = table
            names.append(name)
        entry = {"point": i, "status": res.status, "detail": res.detail,
                 "artifacts": names}
        for key in ("theta", "energy"):
            if key in points[i]:
                entry[key] = points[i][key]
        summary.append(entry)

    manifest = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "version": _version(),
        "config_sha256": hashlib.sha256(
            _canonical(cfg.raw).encode()).hexdigest(),
        "points": len(points),
        "cache": {"memo_hits": ctx["cache"].hits,
                  "cache_hit": ctx["cache"].hits > 0},
        "counts": counts,
        "artifact_files": sorted(artifacts),
        "timings": ({"total_s": time.monotonic() - t_start}
                    if cfg.record_timings else None),
    }
    return ReportBundle(manifest, summary, artifacts)


def passed(bundle: ReportBundle) -> bool:
    return all(e["status"] in ("pass", "skip") for e in bundle.summary)


def exit_code(bundle: ReportBundle) -> int:
    if any(e["status"] == "error" for e in bundle.summary):
        return 2
    return 0 if passed(bundle) else 1


# ---------------------------------------------------------------------------
# emission


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _table_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.header)
    for row in table.rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _table_json(table: Table) -> dict:
    return {"header": list(table.header),
            "rows": [[_jsonable(v) for v in row] for row in table.rows]}


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def emit(bundle: ReportBundle, out_dir: str, fmt: str = "csv") -> list:
    """Write the bundle atomically; returns the list of files written.

    Files are staged in a scratch directory beside the target and moved
    into place with one rename, so a crash can not leave a half bundle at
    ``out_dir``.
    """
    if fmt not in ("csv", "json"):
        raise ConfigInvalid("format must be csv or json", field="format")
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir) or "."
    try:
        os.makedirs(parent, exist_ok=True)
        stage = tempfile.mkdtemp(prefix=".qplab-stage-", dir=parent)
    except OSError as exc:
        raise IoFailure(f"cannot stage bundle near {out_dir}: {exc}") from exc

    files = []
    try:
        def put(name: str, text: str) -> None:
            with open(os.path.join(stage, name), "w",
                      encoding="ascii", newline="") as fh:
                fh.write(text)
            files.append(name)

        put("manifest.json", _dump_json(bundle.manifest))
        put("summary.json", _dump_json(bundle.summary))
        if fmt == "csv":
            table = Table(("point", "theta", "energy", "status", "detail",
                           "artifacts"))
            for e in bundle.summary:
                table.rows.append((e["point"], e.get("theta", ""),
                                   e.get("energy", ""), e["status"],
                                   e["detail"], ";".join(e["artifacts"])))
            put("summary.csv", _table_csv(table))
            for name in sorted(bundle.artifacts):
                put(name + ".csv", _table_csv(bundle.artifacts[name]))
        else:
            for name in sorted(bundle.artifacts):
                put(name + ".json",
                    _dump_json(_table_json(bundle.artifacts[name])))
        if os.path.isdir(out_dir):
            shutil.rmtree(out_dir)
        elif os.path.exists(out_dir):
            os.remove(out_dir)
        os.replace(stage, out_dir)
    except OSError as exc:
        shutil.rmtree(stage, ignore_errors=True)
        raise IoFailure(f"bundle write failed: {exc}") from exc
    except Exception:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return sorted(files)


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qplab",
        description="Batch experiments on long-range quasi-periodic "
                    "lattice operators")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", default=None,
                       help="JSON config path (verify-lemmas has defaults)")
        p.add_argument("--out", default="qplab-report",
                       help="bundle directory (default: qplab-report)")
        p.add_argument("--jobs", type=int, default=1,
                       help="sweep-level worker threads")
        p.add_argument("--fail-fast", action="store_true",
                       help="abort the sweep on the first point error")
        p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="artifact format (default: csv)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is None:
            if args.command != "verify-lemmas":
                raise ConfigInvalid(
                    f"--config is required for kind {args.command}")
            raw = default_config()
        else:
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    raw = json.load(fh)
            except OSError as exc:
                raise ConfigInvalid(f"cannot read config: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"config is not valid JSON: {exc}"
                                    ) from exc
        raw.setdefault("kind", args.command)
        if raw["kind"] != args.command:
            raise ConfigInvalid(
                f"config kind {raw['kind']!r} does not match subcommand "
                f"{args.command!r}", field="kind")
        cfg = parse_config(raw)
        if args.jobs < 1:
            raise ConfigInvalid("--jobs must be at least 1")
        bundle = run(cfg, jobs=args.jobs, fail_fast=args.fail_fast)
        emit(bundle, args.out, args.format)
    except (ConfigInvalid, IoFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QplabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    counts = bundle.manifest["counts"]
    print(f"{cfg.kind}: {counts['pass']} pass, {counts['fail']} fail, "
          f"{counts['skip']} skip, {counts['error']} error -> {args.out}")
    return exit_code(bundle)


if __name__ == "__main__":
    sys.exit(main())
