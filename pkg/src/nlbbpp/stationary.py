"""Window families, per-volume functionals and the inequality harness.

Per-volume quantities are only ever represented through finite window
sequences: tiled laws (independent shifted copies of a base law) and
stationarized restrictions (tiled laws averaged over cell shifts).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import quad

from .configspace import (
    SCHEMA,
    ConfigSpace,
    DensityMeasure,
    LatticeWindow,
    SizingError,
    WindowMismatchError,
    product,
    restrict,
    shift,
    state_count,
    uniform_density,
)
from .dynamics import ou_evolve
from .measures import entropy, fisher, in_fisher_domain
from .solver import SolverConfig, TransportProblem, solve_w0


def _tile_block(P: DensityMeasure, ranges, state_cap: int | None = None, prefix=()) -> DensityMeasure:
    """Product of copies of ``P`` shifted by whole windows over a box of tile indices.

    Copies are combined slab by slab along each axis so every partial union
    is itself a box.
    """
    cells = P.space.window.cells_per_axis
    if len(prefix) == len(ranges):
        return shift(P, tuple(a * c for a, c in zip(prefix, cells)))
    out = None
    for a in ranges[len(prefix)]:
        piece = _tile_block(P, ranges, state_cap, prefix + (a,))
        if out is None:
            out = piece
            continue
        if state_cap is not None:
            n = state_count(out.space.m + piece.space.m, out.space.n_max + piece.space.n_max)
            if n > state_cap:
                raise SizingError(f"tiled space would have {n} states")
        out = product(out, piece)
    return out


def tile(P: DensityMeasure, r: int, state_cap: int | None = None) -> DensityMeasure:
    """Independent product of ``r**d`` shifted copies of ``P`` centred on its window."""
    if r < 1 or r % 2 == 0:
        raise ValueError("replication count must be a positive odd integer")
    if r == 1:
        return P
    half = (r - 1) // 2
    return _tile_block(P, [range(-half, half + 1)] * P.space.window.dim, state_cap)


def _tiles_hit(base: LatticeWindow, target: LatticeWindow) -> int:
    """Upper bound on how many base-sized tiles a window can meet."""
    n = 1
    for c, t in zip(base.cells_per_axis, target.cells_per_axis):
        n *= -(-(t + c - 1) // c) + 1 if t % c else t // c + 1
    return n


def _covering_tiles(P: DensityMeasure, target: LatticeWindow) -> DensityMeasure:
    """Product of the shifted copies of ``P`` that meet any cell shift of ``target``."""
    base = P.space.window
    ranges = []
    for o, bo, t, c in zip(target.origin, base.origin, target.cells_per_axis, base.cells_per_axis):
        # shifted targets cover cells o .. o + t + c - 2
        ranges.append(range((o - bo) // c, (o - bo + t + c - 2) // c + 1))
    return _tile_block(P, ranges)


def stationarize_restriction(P: DensityMeasure, target: LatticeWindow) -> DensityMeasure:
    """Average of the tiled law of ``P`` over all cell shifts, restricted to ``target``.

    The shifts range over one period (the base window's cells), so the
    resulting intensity is the same on every site of ``target``.
    """
    base = P.space.window
    if target.dim != base.dim or target.cell_side != base.cell_side:
        raise WindowMismatchError("target must share dimension and cell side with the base window")
    tiled = _covering_tiles(P, target)
    n_sub = min(tiled.space.n_max, P.space.n_max * _tiles_hit(base, target))
    shifts = list(itertools.product(*[range(c) for c in base.cells_per_axis]))
    sub_space = None
    acc = None
    for u in shifts:
        moved = target.shifted(u)
        marg = restrict(tiled, moved, n_max=n_sub, tol=1e-12)
        back = shift(marg, tuple(-x for x in u))
        if sub_space is None:
            sub_space = back.space
            acc = np.zeros(sub_space.size)
        acc += back.rho
    return DensityMeasure(sub_space, acc / len(shifts))


@dataclass(frozen=True)
class WindowFamily:
    """Laws on a growing sequence of windows built from one base law."""

    base: DensityMeasure
    counts: tuple[int, ...]
    laws: tuple[DensityMeasure, ...]
    kind: str = "tiled"

    @property
    def volumes(self) -> np.ndarray:
        return np.array([P.space.window.volume() for P in self.laws])

    def check_consistency(self, tol: float = 1e-10) -> float:
        """Max deviation between each law's restriction to the base window and the base law."""
        dev = 0.0
        if self.kind != "tiled":
            return dev
        for P in self.laws:
            marg = restrict(P, self.base.space.window, n_max=self.base.space.n_max, tol=1.0)
            dev = max(dev, float(np.abs(marg.probabilities - self.base.probabilities).max()))
        if dev > tol:
            raise WindowMismatchError(f"family marginals differ from base law by {dev:.2e}")
        return dev


def tiled_family(P: DensityMeasure, counts=(1, 3)) -> WindowFamily:
    return WindowFamily(P, tuple(counts), tuple(tile(P, r) for r in counts), "tiled")


def stationarized_family(P: DensityMeasure, sizes=(1, 2, 3)) -> WindowFamily:
    """Stationarized restrictions of ``P`` to centred-at-origin windows of growing size (d = 1)."""
    base = P.space.window
    if base.dim != 1:
        raise ValueError("stationarized_family builds one-dimensional windows")
    laws = []
    for s in sizes:
        target = LatticeWindow((s,), base.cell_side, base.origin)
        laws.append(stationarize_restriction(P, target))
    return WindowFamily(P, tuple(sizes), tuple(laws), "stationarized")


def _per_volume(values, volumes, tol=1e-10) -> dict:
    values = np.asarray(values, dtype=float)
    seq = values / volumes
    drops = np.diff(seq)
    return {"volumes": volumes.tolist(), "values": values.tolist(), "per_volume": seq.tolist(),
            "sup": float(seq.max()),
            "monotone_violations": int(np.sum(drops < -tol)),
            "max_drop": float(max(0.0, -drops.min())) if len(drops) else 0.0}


def specific_entropy(family: WindowFamily, tol: float = 1e-10, untruncated: bool = False) -> dict:
    """Window entropies per volume with their sup and a monotonicity report.

    With ``untruncated`` the entropies are taken against the Poisson law
    before truncation (``Ent - log Z`` with ``Z`` the kept reference mass),
    which removes the window-dependent renormalization of the reference.
    """
    vals = [entropy(P) - (math.log1p(-P.space.reference.truncation_mass) if untruncated else 0.0)
            for P in family.laws]
    return _per_volume(vals, family.volumes, tol)


def specific_fisher(family: WindowFamily, tol: float = 1e-10) -> dict:
    return _per_volume([fisher(P) for P in family.laws], family.volumes, tol)


def w0_extrapolated(P: DensityMeasure, Q: DensityMeasure, Ks=(16, 32), config: SolverConfig | None = None) -> dict:
    """W0^2 on a K-refinement table with a second-order Richardson value."""
    cfg = config or SolverConfig()
    vals, conv = [], True
    for K in Ks:
        sol = solve_w0(TransportProblem(P, Q, _with_K(cfg, K)))
        vals.append(sol.action_value)
        conv = conv and sol.converged
    if len(Ks) >= 2 and Ks[-1] == 2 * Ks[-2]:
        extra = (4 * vals[-1] - vals[-2]) / 3
    else:
        extra = vals[-1]
    return {"K": list(Ks), "values": vals, "extrapolated": extra, "converged": conv}


def _with_K(cfg: SolverConfig, K: int) -> SolverConfig:
    from dataclasses import replace
    return replace(cfg, K=K)


def ws_estimate(P_family: WindowFamily, Q_family: WindowFamily, Ks=(16, 32),
                config: SolverConfig | None = None) -> dict:
    """Per-volume W0^2 along two matched families.

    ``extrapolated`` fits s(V) = s_inf - C/V through the last two windows;
    ``superadditivity`` compares the largest window against the sum over a
    split into the base window and its complement (positive margin = holds).
    """
    if len(P_family.laws) != len(Q_family.laws):
        raise WindowMismatchError("families have different lengths")
    vals, conv = [], True
    for P, Q in zip(P_family.laws, Q_family.laws):
        if not P.space.same_as(Q.space):
            raise WindowMismatchError("matched laws live on different spaces")
        ext = w0_extrapolated(P, Q, Ks, config)
        vals.append(ext["extrapolated"])
        conv = conv and ext["converged"]
    vols = P_family.volumes
    seq = np.array(vals) / vols
    if len(seq) >= 2 and vols[-1] != vols[-2]:
        extra = float((vols[-1] * seq[-1] - vols[-2] * seq[-2]) / (vols[-1] - vols[-2]))
    else:
        extra = float(seq[-1])
    out = {"volumes": vols.tolist(), "values": vals, "per_volume": seq.tolist(), "extrapolated": extra,
           "converged": conv}
    big_P, big_Q = P_family.laws[-1], Q_family.laws[-1]
    W = big_P.space.window
    if W.m > 1 and W.dim == 1:
        split = W.cells_per_axis[0] // 2
        A = LatticeWindow((split,), W.cell_side, W.origin)
        B = LatticeWindow((W.m - split,), W.cell_side, (W.origin[0] + split,))
        parts = 0.0
        for sub in (A, B):
            Pa = restrict(big_P, sub)
            Qa = restrict(big_Q, sub)
            ext = w0_extrapolated(Pa, Qa, Ks, config)
            parts += ext["extrapolated"]
            out["converged"] = out["converged"] and ext["converged"]
        out["superadditivity"] = {"whole": vals[-1], "parts": parts, "margin": vals[-1] - parts}
    return out


# ---------------------------------------------------------------------------
# inequality harness


@dataclass
class InequalityReport:
    name: str
    left: float
    right: float
    tol: float
    window: str = ""
    meta: dict = field(default_factory=dict)
    status: str = ""

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if self.passed else "fail"

    @property
    def slack(self) -> float:
        return self.right - self.left

    @property
    def passed(self) -> bool:
        if self.status == "inconclusive":
            return False
        return bool(self.left <= self.right + self.tol)

    def row(self) -> dict:
        return {"name": self.name, "window": self.window, "left": self.left, "right": self.right,
                "slack": self.slack, "tol": self.tol, "pass": self.passed, "status": self.status}


def _window_label(P: DensityMeasure) -> str:
    w = P.space.window
    return f"m={w.m},h={w.cell_side:g},n_max={P.space.n_max}"


def _status(P: DensityMeasure, budget: float | None) -> str:
    if budget is not None and P.space.reference.truncation_mass > budget:
        return "inconclusive"
    return ""


def check_talagrand(P: DensityMeasure, Ks=(16, 32), rel_tol: float = 1e-3,
                    truncation_budget: float | None = None) -> InequalityReport:
    """W0^2(P, pi) <= Ent(P)."""
    pi = uniform_density(P.space)
    w2 = w0_extrapolated(P, pi, Ks)
    ent = entropy(P)
    return InequalityReport("talagrand", w2["extrapolated"], ent, rel_tol * max(1.0, ent), _window_label(P),
                            {"W0^2 table": w2["values"], "ratio": w2["extrapolated"] / ent if ent > 0 else 0.0},
                            _status(P, truncation_budget))


def check_contractivity(P: DensityMeasure, Q: DensityMeasure, t: float, Ks=(16, 32),
                        rel_tol: float = 1e-2) -> InequalityReport:
    """W0(S_t P, S_t Q) <= exp(-t) W0(P, Q)."""
    w_before = math.sqrt(max(w0_extrapolated(P, Q, Ks)["extrapolated"], 0.0))
    w_after = math.sqrt(max(w0_extrapolated(ou_evolve(P, t), ou_evolve(Q, t), Ks)["extrapolated"], 0.0))
    right = math.exp(-t) * w_before
    return InequalityReport("contractivity", w_after, right, rel_tol * right, _window_label(P),
                            {"t": t, "W0_before": w_before, "ratio": w_after / w_before if w_before else 0.0})


def check_evi(P: DensityMeasure, R: DensityMeasure, t: float, delta: float = 1e-3, K: int = 32,
              rel_tol: float = 5e-3) -> InequalityReport:
    """Ent(S_t P) + d/dt W0^2(S_t P, R)/2 + W0^2(S_t P, R)/2 <= Ent(R).

    The derivative is a centred difference at a fixed time grid ``K``; the
    discretization error of W0^2 is smooth in t and cancels to leading order.
    """
    def w2(s):
        return solve_w0(TransportProblem(ou_evolve(P, s), R, SolverConfig(K=K))).action_value

    Pt = ou_evolve(P, t)
    W2 = w2(t)
    deriv = (w2(t + delta) - w2(t - delta)) / (2 * delta)
    e_t, e_r = entropy(Pt), entropy(R)
    left = e_t + 0.5 * deriv + 0.5 * W2
    scale = abs(e_r) + abs(e_t) + W2
    # the floor only matters when both sides vanish (P = R = pi)
    return InequalityReport("evi", left, e_r, rel_tol * scale + 1e-12, _window_label(P),
                            {"t": t, "delta": delta, "K": K, "W0^2": W2, "dW0^2/dt": deriv})


def check_geodesic_convexity(P0: DensityMeasure, P1: DensityMeasure, t: float, K: int = 32,
                             tol: float = 2e-3, solution=None) -> InequalityReport:
    """Ent(rho_t) <= (1-t) Ent0 + t Ent1 - t(1-t) W0^2 / 2 along the solver geodesic."""
    k = t * K
    if abs(k - round(k)) > 1e-12:
        raise ValueError("t must be a knot of the time grid")
    sol = solution or solve_w0(TransportProblem(P0, P1, SolverConfig(K=K)))
    Pt = sol.path.density(int(round(k)))
    right = (1 - t) * entropy(P0) + t * entropy(P1) - 0.5 * t * (1 - t) * sol.action_value
    return InequalityReport("geodesic_convexity", entropy(Pt), right, tol, _window_label(P0),
                            {"t": t, "K": K, "W0^2": sol.action_value})


def check_debruijn(P: DensityMeasure, T: float, tol: float = 1e-4) -> InequalityReport:
    """|Ent(S_T P) - Ent(P) + int_0^T I(S_r P) dr| <= tol (left is the defect, right 0)."""
    integral, err = quad(lambda r: fisher(ou_evolve(P, r)), 0.0, T, epsabs=1e-10, epsrel=1e-10, limit=200)
    defect = abs(entropy(ou_evolve(P, T)) - entropy(P) + integral)
    return InequalityReport("debruijn", defect, 0.0, tol, _window_label(P),
                            {"T": T, "integral": integral, "quad_error": err})


def check_hwi(P: DensityMeasure, Ks=(16, 32), tol: float = 1e-3) -> InequalityReport:
    """Ent(P) <= W0(P, pi) sqrt(I(P)) - W0^2(P, pi)/2."""
    status = "" if in_fisher_domain(P) else "inconclusive"
    w2 = w0_extrapolated(P, uniform_density(P.space), Ks)["extrapolated"]
    I = fisher(P)
    right = math.sqrt(max(w2, 0.0) * I) - 0.5 * w2
    return InequalityReport("hwi", entropy(P), right, tol, _window_label(P), {"W0^2": w2, "I": I}, status)


def check_logsobolev(P: DensityMeasure, tol: float = 1e-3) -> InequalityReport:
    """Ent(P) <= I(P)."""
    status = "" if in_fisher_domain(P) else "inconclusive"
    return InequalityReport("logsobolev", entropy(P), fisher(P), tol, _window_label(P), {}, status)


REPORT_FIELDS = ("name", "window", "left", "right", "slack", "tol", "pass", "status")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    wr.writeheader()
    for r in reports:
        row = r.row()
        for k in ("left", "right", "slack", "tol"):
            row[k] = f"{row[k]:.17g}"
        wr.writerow(row)
    return buf.getvalue()


def reports_to_json(reports) -> str:
    items = []
    for r in reports:
        d = r.row()
        d["meta"] = r.meta
        items.append(d)
    return json.dumps({"schema": SCHEMA, "reports": items}, indent=2, default=float)


# ---------------------------------------------------------------------------
# seeded check suites shared by the command line and the acceptance tests

SUITES = ("talagrand", "contractivity", "evi", "geodesic_convexity", "debruijn", "hwi", "logsobolev")

PRESETS = {
    # spaces as (sites, n_max); counts of single laws and of pairs per space
    "small": {"spaces": ((1, 1), (1, 2), (2, 2)), "laws": 3, "pairs": 2,
              "debruijn": ((8, (0.5,)),)},
    "acceptance": {"spaces": ((1, 1), (1, 3), (2, 2), (3, 3)), "laws": 20, "pairs": 10,
                   "debruijn": ((8, (0.5, 2.0)), (12, (0.5, 2.0)))},
}

SEED = 20240601


def preset_space(m: int, n_max: int) -> ConfigSpace:
    from .configspace import line_window
    return ConfigSpace(line_window(m), n_max)


def seeded_laws(m: int, n_max: int, count: int, stream: int = 0):
    """The standard seeded random laws of a preset space."""
    from .configspace import random_density
    space = preset_space(m, n_max)
    rng = np.random.default_rng([SEED, stream, m, n_max])
    return [random_density(space, rng) for _ in range(count)]


def seeded_pairs(m: int, n_max: int, count: int):
    laws = seeded_laws(m, n_max, 2 * count, stream=1)
    return list(zip(laws[0::2], laws[1::2]))


def suite_tasks(name: str, preset: str = "small") -> list[tuple]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    cfg = PRESETS[preset]
    tasks = []
    if name == "debruijn":
        for n_max, Ts in cfg["debruijn"]:
            for T in Ts:
                tasks.append((name, 1, n_max, -1, T))
                tasks.append((name, 1, n_max, 0, T))
        return tasks
    count = cfg["pairs"] if name in ("contractivity", "evi", "geodesic_convexity") else cfg["laws"]
    for m, n_max in cfg["spaces"]:
        for i in range(count):
            tasks.append((name, m, n_max, i, None))
    return tasks


def run_task(task) -> list[InequalityReport]:
    """Evaluate one seeded instance of a suite (picklable for process pools)."""
    from .configspace import poisson_density
    name, m, n_max, i, extra = task
    if name == "debruijn":
        space = preset_space(m, n_max)
        P = poisson_density(space, 2.0) if i < 0 else seeded_laws(m, n_max, i + 1, stream=2)[i]
        out = [check_debruijn(P, extra)]
    elif name in ("talagrand", "hwi", "logsobolev"):
        P = seeded_laws(m, n_max, i + 1)[i]
        out = [{"talagrand": check_talagrand, "hwi": check_hwi, "logsobolev": check_logsobolev}[name](P)]
    else:
        P, Q = seeded_pairs(m, n_max, i + 1)[i]
        if name == "contractivity":
            out = [check_contractivity(P, Q, t) for t in (0.1, 0.5, 1.0)]
        elif name == "evi":
            out = [check_evi(P, Q, t) for t in (0.1, 0.5)]
        else:
            sol = solve_w0(TransportProblem(P, Q, SolverConfig(K=32)))
            out = [check_geodesic_convexity(P, Q, t, solution=sol) for t in (0.25, 0.5, 0.75)]
    for r in out:
        r.meta["instance"] = i
    return out


def run_suite(names, preset: str = "small", jobs: int = 1) -> list[InequalityReport]:
    """Run the named suites; results come back in task order whatever ``jobs`` is."""
    tasks = [t for n in names for t in suite_tasks(n, preset)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run_task, tasks))
    else:
        results = [run_task(t) for t in tasks]
    return [r for rs in results for r in rs]
