"""Batch front end: experiment configs, suites, one-off solves and golden values.

Exit codes: 0 success, 2 configuration error, 3 sizing error, 4 solver
non-convergence, 5 failed inequality check.

Config files are INI documents::

    [model]
    dim = 1
    cells = 2
    h = 1.0
    n_max = 3

    [marginals]
    P0 = poisson(1.0)
    P1 = random(seed=7, concentration=1.0)
    P2 = mixture(P0:0.5, P1:0.5)

    [task]
    kind = solve
    from = P0
    to = P1
    Ks = 16, 32

    [output]
    directory = out
    formats = csv, json

``NLBBPP_JOBS`` and ``NLBBPP_OUT`` override the job count and output
directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import re
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .configspace import (SCHEMA, ConfigSpace, DensityMeasure, LatticeWindow, SizingError, line_window,
                          mixture, point_mass, poisson_density, random_density, uniform_density)
from .dynamics import ce_residual, ou_evolve, thinning_curve
from .measures import entropy, fisher
from .mobility import action
from .solver import (NonConvergenceError, SolverConfig, TransportProblem, TruncationWarning, brute_force_w0,
                     solve_w0, thinning_space)
from .stationary import (PRESETS, SUITES, reports_to_csv, reports_to_json, run_suite, seeded_pairs,
                         specific_entropy, stationarized_family, tiled_family, ws_estimate)

log = logging.getLogger("nlbbpp")

EXIT_OK, EXIT_CONFIG, EXIT_SIZING, EXIT_NONCONV, EXIT_CHECK = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output helpers

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([fmt(v) for v in r])
    return buf.getvalue()


def to_json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(type(o).__name__)
    return json.dumps({"schema": SCHEMA, **obj}, indent=2, sort_keys=True, default=default) + "\n"


# ---------------------------------------------------------------------------
# configuration

SECTION_KEYS = {
    "model": {"dim", "cells", "h", "n_max"},
    "output": {"directory", "formats"},
}
TASK_KEYS = {
    "solve": {"from", "to", "k", "ks", "method"},
    "interpolate": {"from", "to", "k"},
    "flow": {"law", "times"},
    "verify": {"suite", "preset"},
    "ws-limit": {"from", "to", "family", "counts", "ks"},
    "sweep": {"from", "to", "weights", "k"},
}
_CALL = re.compile(r"^\s*([a-z]+)\s*\((.*)\)\s*$")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"expected integers, got {text!r}") from e


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"expected numbers, got {text!r}") from e


def _build_model(sec) -> ConfigSpace:
    dim = int(sec.get("dim", "1"))
    cells = _ints(sec.get("cells", "1"))
    if len(cells) == 1:
        cells = cells * dim
    if len(cells) != dim:
        raise ConfigError("cells must give one count per axis")
    if "n_max" not in sec:
        raise ConfigError("[model] needs n_max")
    window = LatticeWindow(tuple(cells), float(sec.get("h", "1.0")), (0,) * dim)
    return ConfigSpace(window, int(sec["n_max"]))


def _parse_marginal(name: str, text: str, space: ConfigSpace, known: dict) -> DensityMeasure:
    m = _CALL.match(text)
    if not m:
        raise ConfigError(f"marginal {name}: cannot parse {text!r}")
    kind, args = m.group(1), [a.strip() for a in m.group(2).split(",") if a.strip()]
    try:
        if kind == "poisson":
            return poisson_density(space, float(args[0]))
        if kind == "uniform" or kind == "reference":
            return uniform_density(space)
        if kind == "pointmass":
            return point_mass(space, tuple(int(a) for a in args))
        if kind == "random":
            kw = dict(a.split("=", 1) for a in args)
            unknown = set(kw) - {"seed", "concentration"}
            if unknown or "seed" not in kw:
                raise ConfigError(f"marginal {name}: random(seed=..., concentration=...)")
            rng = np.random.default_rng(int(kw["seed"]))
            return random_density(space, rng, float(kw.get("concentration", 1.0)))
        if kind == "mixture":
            parts = [a.split(":", 1) for a in args]
            if any(len(p) != 2 or p[0].strip() not in known for p in parts):
                raise ConfigError(f"marginal {name}: mixture(name:weight, ...) over earlier marginals")
            return mixture([known[p[0].strip()] for p in parts], [float(p[1]) for p in parts])
    except (IndexError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"marginal {name}: {e}") from e
    raise ConfigError(f"marginal {name}: unknown constructor {kind!r}")


class Experiment:
    """A parsed, validated config document."""

    def __init__(self, text: str):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # marginal names keep their case
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        unknown = set(cp.sections()) - {"model", "marginals", "task", "output"}
        if unknown:
            raise ConfigError(f"unknown sections: {sorted(unknown)}")
        lower = {sec: {k.lower(): v for k, v in cp[sec].items()} for sec in cp.sections()}
        if "task" not in lower or "kind" not in lower["task"]:
            raise ConfigError("empty task list: [task] kind is required")
        self.kind = lower["task"]["kind"].strip()
        if self.kind not in TASK_KEYS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        checks = dict(SECTION_KEYS, task=TASK_KEYS[self.kind] | {"kind"})
        for sec, allowed in checks.items():
            if sec in lower:
                bad = set(lower[sec]) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in [{sec}]: {sorted(bad)}")
        self.cp = cp
        self.task = lower["task"]
        self.space = None
        self.marginals: dict[str, DensityMeasure] = {}
        if self.kind != "verify":
            if "model" not in cp:
                raise ConfigError("[model] section required")
            self.space = _build_model(lower["model"])
            if "marginals" in cp:
                for name, val in cp["marginals"].items():
                    self.marginals[name] = _parse_marginal(name, val, self.space, self.marginals)
        out = lower.get("output", {})
        self.directory = out.get("directory", "out")
        self.formats = {f.strip() for f in out.get("formats", "csv,json").split(",") if f.strip()}
        if not self.formats <= {"csv", "json"}:
            raise ConfigError(f"unknown formats {sorted(self.formats - {'csv', 'json'})}")

    def law(self, key: str) -> DensityMeasure:
        name = self.task.get(key)
        if name is None:
            raise ConfigError(f"task needs {key!r}")
        if name not in self.marginals:
            raise ConfigError(f"unknown marginal {name!r}")
        return self.marginals[name]

    def canonical(self) -> str:
        """Sorted, whitespace-normalized config (stored with the outputs)."""
        lines = []
        for sec in ("model", "marginals", "task", "output"):
            if sec not in self.cp:
                continue
            lines.append(f"[{sec}]")
            for k in sorted(self.cp[sec]):
                lines.append(f"{k} = {' '.join(self.cp[sec][k].split())}")
            lines.append("")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# tasks; each returns (exit code, {filename: text})

def _solve_table(P0, P1, Ks, method="newton"):
    rows, diags, ok = [], [], True
    for K in Ks:
        sol = solve_w0(TransportProblem(P0, P1, SolverConfig(K=K, method=method)))
        ok = ok and sol.converged
        rows.append((K, sol.action_value, sol.diagnostics["ce_residual"], sol.diagnostics["iterations"],
                     sol.converged))
        diags.append(json.loads(sol.diagnostics_json()))
    values = [r[1] for r in rows]
    rich = [(4 * values[i + 1] - values[i]) / 3 for i in range(len(Ks) - 1) if Ks[i + 1] == 2 * Ks[i]]
    return rows, diags, rich, ok


def task_solve(exp: Experiment):
    Ks = _ints(exp.task.get("ks", exp.task.get("k", "32")))
    rows, diags, rich, ok = _solve_table(exp.law("from"), exp.law("to"), Ks, exp.task.get("method", "newton"))
    files = {
        "results.csv": table_csv(("K", "W0_squared", "ce_residual", "iterations", "converged"), rows),
        "action_vs_K.csv": table_csv(("K", "W0_squared"), [(r[0], r[1]) for r in rows]),
        "results.json": to_json({"task": "solve", "table": [dict(zip(("K", "W0_squared", "ce_residual",
                                 "iterations", "converged"), r)) for r in rows],
                                 "richardson": rich, "diagnostics": diags}),
    }
    return (EXIT_OK if ok else EXIT_NONCONV), files


def task_interpolate(exp: Experiment):
    P0, P1 = exp.law("from"), exp.law("to")
    K = int(exp.task.get("k", "32"))
    big = thinning_space(P0, P1)
    from .configspace import embed
    path = thinning_curve(embed(P0, big), embed(P1, big), K, max_defect=1e-12)
    rows = [(t, entropy(path.density(k))) for k, t in enumerate(path.knots)]
    summary = {"task": "interpolate", "K": K, "n_max": big.n_max, "action": action(path),
               "ce_residual": ce_residual(path)}
    files = {"entropy_along_path.csv": table_csv(("t", "entropy"), rows),
             "results.csv": table_csv(("K", "n_max", "action", "ce_residual"),
                                      [(K, big.n_max, summary["action"], summary["ce_residual"])]),
             "results.json": to_json(summary)}
    return EXIT_OK, files


def task_flow(exp: Experiment):
    P = exp.law("law")
    times = _floats(exp.task.get("times", "0, 0.25, 0.5, 1, 2"))
    if any(t < 0 for t in times):
        raise ConfigError("flow times must be nonnegative")
    rows = []
    for t in times:
        Pt = ou_evolve(P, t)
        rows.append((t, entropy(Pt), fisher(Pt)))
    files = {"entropy_along_flow.csv": table_csv(("t", "entropy", "fisher"), rows),
             "results.csv": table_csv(("t", "entropy", "fisher"), rows),
             "results.json": to_json({"task": "flow", "rows": [dict(zip(("t", "entropy", "fisher"), r))
                                                               for r in rows]})}
    return EXIT_OK, files


def task_sweep(exp: Experiment):
    """W0^2 from P0 to the mixtures (1 - s) P0 + s P1."""
    P0, P1 = exp.law("from"), exp.law("to")
    K = int(exp.task.get("k", "16"))
    rows, ok = [], True
    for s in _floats(exp.task.get("weights", "0.25, 0.5, 0.75, 1")):
        if not 0 <= s <= 1:
            raise ConfigError("sweep weights must lie in [0, 1]")
        Q = mixture([P0, P1], [1 - s, s]) if s < 1 else P1
        sol = solve_w0(TransportProblem(P0, Q, SolverConfig(K=K)))
        ok = ok and sol.converged
        rows.append((s, sol.action_value, entropy(Q)))
    files = {"sweep.csv": table_csv(("s", "W0_squared", "entropy"), rows),
             "results.csv": table_csv(("s", "W0_squared", "entropy"), rows),
             "results.json": to_json({"task": "sweep", "K": K,
                                      "rows": [dict(zip(("s", "W0_squared", "entropy"), r)) for r in rows]})}
    return (EXIT_OK if ok else EXIT_NONCONV), files


def task_ws_limit(exp: Experiment):
    P, Q = exp.law("from"), exp.law("to")
    fam_kind = exp.task.get("family", "tiled")
    counts = _ints(exp.task.get("counts", "1, 3" if fam_kind == "tiled" else "1, 2"))
    Ks = _ints(exp.task.get("ks", "16, 32"))
    if fam_kind == "tiled":
        Pf, Qf = tiled_family(P, counts), tiled_family(Q, counts)
    elif fam_kind == "stationarized":
        Pf, Qf = stationarized_family(P, counts), stationarized_family(Q, counts)
    else:
        raise ConfigError(f"unknown family {fam_kind!r}")
    est = ws_estimate(Pf, Qf, Ks)
    ent = specific_entropy(Pf)
    rows = list(zip(est["volumes"], est["per_volume"], ent["per_volume"]))
    files = {"per_volume.csv": table_csv(("volume", "W0_squared_per_volume", "entropy_per_volume"), rows),
             "results.csv": table_csv(("volume", "W0_squared_per_volume", "entropy_per_volume"), rows),
             "results.json": to_json({"task": "ws-limit", "family": fam_kind, "ws": est, "entropy": ent})}
    return (EXIT_OK if est["converged"] else EXIT_NONCONV), files


def task_verify(names, preset: str, jobs: int):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    reports = run_suite(names, preset, jobs)
    files = {"reports.csv": reports_to_csv(reports), "reports.json": reports_to_json(reports)}
    failed = [r for r in reports if not r.passed]
    for r in failed:
        log.warning("check failed: %s %s left=%.6g right=%.6g", r.name, r.window, r.left, r.right)
    summary = {n: [sum(r.passed for r in reports if r.name == n), sum(r.name == n for r in reports)]
               for n in names}
    return (EXIT_CHECK if failed else EXIT_OK), files, summary


def _suite_names(text: str) -> list[str]:
    names = list(SUITES) if text.strip() == "all" else [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in SUITES]
    if bad or not names:
        raise ConfigError(f"unknown suites {bad}; choose from {', '.join(SUITES)} or all")
    return names


def run_experiment(exp: Experiment, out: Path, jobs: int = 1) -> int:
    if exp.kind == "verify":
        code, files, _ = task_verify(_suite_names(exp.task.get("suite", "all")),
                                     exp.task.get("preset", "small"), jobs)
    else:
        code, files = {"solve": task_solve, "interpolate": task_interpolate, "flow": task_flow,
                       "sweep": task_sweep, "ws-limit": task_ws_limit}[exp.kind](exp)
    write_atomic(out / "config.ini", exp.canonical())
    for name, text in files.items():
        if name.endswith(".json") and "json" not in exp.formats:
            continue
        if name.endswith(".csv") and "csv" not in exp.formats:
            continue
        write_atomic(out / name, text)
    return code


# ---------------------------------------------------------------------------
# golden oracle values

GOLDEN_FILE = "w0_oracle.json"
ORACLE_COMMAND = "nlbbpp golden --bless"


def golden_instances():
    """The oracle-sized instances: (name, space, P0, P1, K)."""
    out = []
    two = ConfigSpace(line_window(1), 1)
    out.append(("pointmass-2state", two, point_mass(two, (0,)), point_mass(two, (1,)), 16))
    for m, n_max, K in ((1, 1, 16), (2, 2, 16), (1, 5, 16), (3, 2, 8)):
        P, Q = seeded_pairs(m, n_max, 1)[0]
        out.append((f"seeded-m{m}-n{n_max}", P.space, P, Q, K))
    nine = ConfigSpace(line_window(1), 9)
    out.append(("poisson-1-2-m1-n9", nine, poisson_density(nine, 1.0), poisson_density(nine, 2.0), 8))
    return out


def bless(directory: Path) -> dict:
    items = []
    for name, space, P, Q, K in golden_instances():
        res = brute_force_w0(TransportProblem(P, Q, SolverConfig(K=K)))
        if not res["agree"]:
            raise NonConvergenceError(f"oracle restarts disagree on {name}: {res['restarts']}")
        items.append({"name": name, "m": space.m, "n_max": space.n_max, "states": space.size, "K": K,
                      "P0": P.rho.tolist(), "P1": Q.rho.tolist(), "value": res["value"],
                      "restarts": res["restarts"]})
    doc = {"oracle": "brute_force_w0(seed=0, restarts=2, eps_schedule=(1e-6, 1e-9, 1e-12))",
           "command": ORACLE_COMMAND, "version": __version__, "instances": items}
    write_atomic(directory / GOLDEN_FILE, to_json(doc))
    return doc


def load_golden(directory: Path) -> dict:
    return json.loads((directory / GOLDEN_FILE).read_text())


def check_golden(directory: Path, rel_tol: float = 1e-4) -> list[dict]:
    rows = []
    for item in load_golden(directory)["instances"]:
        space = ConfigSpace(line_window(item["m"]), item["n_max"])
        P0 = DensityMeasure(space, np.array(item["P0"]))
        P1 = DensityMeasure(space, np.array(item["P1"]))
        sol = solve_w0(TransportProblem(P0, P1, SolverConfig(K=item["K"])))
        rel = abs(sol.action_value - item["value"]) / max(abs(item["value"]), 1e-300)
        rows.append({"name": item["name"], "states": item["states"], "K": item["K"], "oracle": item["value"],
                     "solver": sol.action_value, "rel_err": rel, "pass": rel <= rel_tol and sol.converged})
    return rows


def default_golden_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "golden"


# ---------------------------------------------------------------------------
# argument parsing

def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    env = os.environ.get("NLBBPP_JOBS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"NLBBPP_JOBS must be an integer, got {env!r}")


def _out(args, fallback: str) -> Path:
    return Path(args.out or os.environ.get("NLBBPP_OUT") or fallback)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlbbpp", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (env NLBBPP_JOBS)")
        sp.add_argument("--out", default=None, help="output directory (env NLBBPP_OUT)")

    r = sub.add_parser("run", help="run an INI experiment config")
    r.add_argument("config")
    common(r)

    s = sub.add_parser("solve", help="W0^2 between two truncated Poisson laws")
    s.add_argument("--poisson", nargs=2, type=float, metavar=("C0", "C1"), required=True)
    s.add_argument("--m", type=int, default=1)
    s.add_argument("--nmax", type=int, default=8)
    s.add_argument("--K", type=int, default=32)
    s.add_argument("--method", default="newton", choices=("newton", "primal-dual"))
    common(s)

    v = sub.add_parser("verify", help="run seeded inequality suites")
    v.add_argument("--suite", default="all")
    v.add_argument("--preset", default="small", choices=sorted(PRESETS))
    common(v)

    g = sub.add_parser("golden", help="compare the solver with stored oracle values")
    g.add_argument("--bless", action="store_true", help="recompute the values with the oracle")
    g.add_argument("--dir", default=None)
    common(g)
    return p


def _print_table(header, rows, stream=None):
    (stream or sys.stdout).write(table_csv(header, rows))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
        warnings.simplefilter("ignore", TruncationWarning)
    try:
        jobs = _jobs(args)
        if args.command == "run":
            try:
                text = Path(args.config).read_text()
            except OSError as e:
                raise ConfigError(str(e)) from e
            exp = Experiment(text)
            out = _out(args, exp.directory)
            code = run_experiment(exp, out, jobs)
            print(f"{exp.kind}: exit {code}, outputs in {out}")
            return code
        if args.command == "solve":
            if min(args.poisson) <= 0:
                raise ConfigError("Poisson intensities must be positive")
            space = ConfigSpace(line_window(args.m), args.nmax)
            P0, P1 = poisson_density(space, args.poisson[0]), poisson_density(space, args.poisson[1])
            Ks = [k for k in (args.K // 4, args.K // 2, args.K) if k >= 1 and args.K % k == 0]
            Ks = sorted(set(Ks))
            rows, diags, rich, ok = _solve_table(P0, P1, Ks, args.method)
            _print_table(("K", "W0_squared", "ce_residual", "iterations", "converged"), rows)
            if rich:
                print(f"richardson,{fmt(rich[-1])}")
            if args.out or os.environ.get("NLBBPP_OUT"):
                out = _out(args, "out")
                write_atomic(out / "results.csv", table_csv(("K", "W0_squared", "ce_residual", "iterations",
                                                             "converged"), rows))
                write_atomic(out / "results.json", to_json({"task": "solve", "c0": args.poisson[0],
                                                            "c1": args.poisson[1], "m": args.m,
                                                            "n_max": args.nmax, "richardson": rich,
                                                            "diagnostics": diags}))
            return EXIT_OK if ok else EXIT_NONCONV
        if args.command == "verify":
            names = _suite_names(args.suite)
            code, files, summary = task_verify(names, args.preset, jobs)
            for n, (k, tot) in summary.items():
                print(f"{n}: {k}/{tot} passed")
            if args.out or os.environ.get("NLBBPP_OUT"):
                out = _out(args, "out")
                for name, text in files.items():
                    write_atomic(out / name, text)
            return code
        if args.command == "golden":
            directory = Path(args.dir) if args.dir else default_golden_dir()
            if args.bless:
                doc = bless(directory)
                print(f"blessed {len(doc['instances'])} instances into {directory / GOLDEN_FILE}")
                return EXIT_OK
            rows = check_golden(directory)
            _print_table(("name", "states", "K", "oracle", "solver", "rel_err", "pass"),
                         [tuple(r.values()) for r in rows])
            return EXIT_OK if all(r["pass"] for r in rows) else EXIT_CHECK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SizingError as e:
        print(f"sizing error: {e}", file=sys.stderr)
        return EXIT_SIZING
    except NonConvergenceError as e:
        print(f"solver did not converge: {e}", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
