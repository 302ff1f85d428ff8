"""Command-line front end.

    donaldson <command> [--config FILE] [--set key=value ...] [flags]

Commands: mesh-gen, basis, solve, verify, sweep, cmc, fixedq, report.
Settings come from defaults, then a flat key=value config file, then flags.
Every run writes its artifacts plus ``manifest.json`` under the output
directory.  Exit status: 0 success, 1 certification failure, 2 numerical
failure, 3 configuration error.
"""
from __future__ import annotations

import os

if "DONALDSON_THREADS" in os.environ:  # must precede the numpy import
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DONALDSON_THREADS"])

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import CertificationError, NumericalError

COMMANDS = ("mesh-gen", "basis", "solve", "verify", "sweep", "cmc", "fixedq", "report")
EXIT_OK, EXIT_CERT, EXIT_NUM, EXIT_CONFIG = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    level: int = 2
    mesh: str = ""
    k: int = 2
    beta: str = "zero"
    q: str = "basis:0"
    c: float = 0.0
    t_grid: str = "0,0.25,0.5,0.75,1"
    grad_tol: float = 1e-9
    max_outer: int = 200
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "out"
    solution: str = ""
    samples: int = 100
    n_starts: int = 0
    spread: float = 3.0
    min_gap: float = 5.0
    hes1_tol: float = 1e-10

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not self.mesh and not 0 <= self.level <= 7:
            raise ConfigError("level must lie in 0..7")
        if not abs(self.c) < 1:
            raise ConfigError("c must satisfy c^2 < 1")
        if self.command == "verify" and not self.solution:
            raise ConfigError("verify needs solution=<path>")
        if self.command == "cmc" and self.k != 2:
            raise ConfigError("cmc needs k=2")
        try:
            grid = self.grid()
        except ValueError as exc:
            raise ConfigError(f"bad t_grid: {exc}") from None
        if any(t < 0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("t_grid must be nonnegative and increasing")

    def grid(self) -> list[float]:
        return [float(x) for x in self.t_grid.split(",") if x.strip()]


def _coerce(name: str, raw):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown setting {name!r}")
    t = types[name]
    try:
        if t in (bool, "bool"):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return s in ("1", "true", "yes")
        if t in (int, "int"):
            return int(raw)
        if t in (float, "float"):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"setting {name}={raw!r} is not a valid {getattr(t, '__name__', t)}") from None


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="donaldson", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any setting (repeatable)")
    p.add_argument("--level", type=int)
    p.add_argument("--mesh", help="mesh JSON file (overrides --level)")
    p.add_argument("-k", "--k", type=int)
    p.add_argument("--beta", help="zero | basis:i[,t] | path to a form file")
    p.add_argument("--q", help="basis:i | path to a k-differential file")
    p.add_argument("--c", type=float)
    p.add_argument("--t-grid", dest="t_grid", help="comma separated t values")
    p.add_argument("--grad-tol", dest="grad_tol", type=float)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("-o", "--output-dir", dest="output_dir")
    p.add_argument("--solution", help="solution JSON for verify")
    p.add_argument("--samples", type=int)
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--spread", type=float)
    p.add_argument("--min-gap", dest="min_gap", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_config(argv) -> tuple[RunConfig, bool]:
    args = build_parser().parse_args(argv)
    raw = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip().replace("-", "_")] = v.strip()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "command":
            raw[f.name] = v
    raw["command"] = args.command
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    cfg.validate()
    return cfg, args.verbose


# ----------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.results: dict = {}
        self.notes: list[str] = []
        self._mesh = None
        self._bundle = {}

    def write(self, name: str, text: str):
        path = self.out / name
        path.write_text(text)
        if name not in self.files:
            self.files.append(name)

    def write_json(self, name: str, obj):
        self.write(name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    @property
    def mesh(self):
        from .mesh import generate_genus2_mesh, load_mesh, MeshError
        if self._mesh is None:
            if self.cfg.mesh:
                try:
                    self._mesh = load_mesh(self.cfg.mesh)
                except (OSError, MeshError, KeyError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot load mesh {self.cfg.mesh}: {exc}") from None
            else:
                self._mesh = generate_genus2_mesh(self.cfg.level)
        return self._mesh

    def bundle(self, k=None):
        from .bundle import build_bundle
        k = k or self.cfg.k
        if k not in self._bundle:
            self._bundle[k] = build_bundle(self.mesh, k)
        return self._bundle[k]

    def opts(self):
        from .solver import SolveOptions
        return SolveOptions(grad_tol=self.cfg.grad_tol, max_outer=self.cfg.max_outer,
                            seed=self.cfg.seed, deterministic=self.cfg.deterministic)

    def basis(self, k=None):
        from .bundle import holomorphic_basis
        return holomorphic_basis(self.mesh, k or self.cfg.k, min_gap=self.cfg.min_gap)

    def _basis_ref(self, spec: str):
        body = spec.split(":", 1)[1]
        parts = body.split(",")
        try:
            i = int(parts[0])
            t = float(parts[1]) if len(parts) > 1 else 1.0
        except ValueError:
            raise ConfigError(f"bad basis reference {spec!r}") from None
        b = self.basis()
        if not 0 <= i < len(b):
            raise ConfigError(f"basis index {i} out of range (dimension {len(b)})")
        return b[i], t

    def beta(self):
        from .bundle import hodge_star_E_inv, load_field
        spec = self.cfg.beta
        if spec == "zero":
            return np.zeros(self.mesh.n_faces, complex)
        if spec.startswith("basis:"):
            s, t = self._basis_ref(spec)
            return t * hodge_star_E_inv(None, s)
        try:
            return load_field(spec, self.mesh, self.cfg.k)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read beta from {spec!r}: {exc}") from None

    def q(self):
        from .bundle import load_field
        spec = self.cfg.q
        if spec.startswith("basis:"):
            s, t = self._basis_ref(spec)
            return t * s
        try:
            return load_field(spec, self.mesh, self.cfg.k)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read q from {spec!r}: {exc}") from None

    def field_plot(self, name, values, title):
        from .plots import field_svg
        if self.mesh.disk is None:
            self.notes.append(f"{name}: no fundamental-domain layout for this mesh, plot skipped")
            return
        self.write(name, field_svg(self.mesh.disk, values, title))


def _vertex_to_faces(mesh, u):
    return np.asarray(u)[mesh.faces].mean(axis=1)


# ----------------------------------------------------------------------
# commands

def cmd_mesh_gen(run: _Run):
    from .mesh import mesh_to_dict, validate_mesh
    m = run.mesh
    rep = validate_mesh(m, loaded=bool(run.cfg.mesh))
    run.write("mesh.json", json.dumps(mesh_to_dict(m)) + "\n")
    run.results.update(vertices=m.n_vertices, faces=m.n_faces, genus=m.genus,
                       total_area=m.total_area, max_edge=m.max_edge_length, valid=rep.ok)


def cmd_basis(run: _Run):
    from .bundle import field_to_dict
    b = run.basis()
    for i, s in enumerate(b):
        run.write_json(f"basis_{i}.json", field_to_dict(run.mesh, run.cfg.k, "kdifferential", s))
    run.write_json("spectrum.json", {"k": run.cfg.k, "singular_values": [float(x) for x in b.singular_values],
                                     "gap": b.gap})
    run.results.update(dimension=len(b), expected=(2 * run.cfg.k - 1) * (run.mesh.genus - 1),
                       gap=b.gap)


def _solution_outputs(run: _Run, sol, prefix=""):
    run.write_json(prefix + "solution.json", sol.to_dict())
    run.field_plot(prefix + "u.svg", _vertex_to_faces(run.mesh, sol.u), "u")
    run.field_plot(prefix + "q_abs.svg", np.abs(sol.q()), "|q|")


def cmd_solve(run: _Run):
    from .solver import multistart_uniqueness, solve
    sol = solve(run.mesh, run.cfg.k, run.beta(), run.opts(), bundle=run.bundle())
    _solution_outputs(run, sol)
    run.results.update(D=sol.D_value, D_over_lower_bound=sol.D_value / (4 * math.pi * (run.mesh.genus - 1)),
                       residual_u=sol.residual_u, residual_eta=sol.residual_eta,
                       iterations=sol.iterations, converged=sol.converged, sup_u=float(np.abs(sol.u).max()))
    if run.cfg.n_starts >= 2:
        rep = multistart_uniqueness(run.mesh, run.cfg.k, run.beta(), run.cfg.n_starts,
                                    run.cfg.spread, run.opts())
        run.write_json("uniqueness.json", asdict(rep))
        run.results.update(unique=rep.unique, max_distance=rep.max_distance)


def cmd_verify(run: _Run):
    from .analysis import certify_el_equivalence, certify_second_variation
    from .functional import eta_residual, first_equation_residual
    from .solver import Solution
    try:
        data = json.loads(Path(run.cfg.solution).read_text())
        sol = Solution.from_dict(data, run.mesh)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read solution {run.cfg.solution}: {exc}") from None
    st = sol.state()
    sol.residual_u = float(np.max(np.abs(first_equation_residual(st))))
    sol.residual_eta = eta_residual(st)
    sol.converged = True  # certify whatever is on disk; criticality is re-checked below
    rep = certify_second_variation(sol, run.cfg.samples, run.cfg.seed)
    el = certify_el_equivalence(sol, 20, run.cfg.seed)
    checks = rep.checks(sol.k)
    checks["hes1_identity"] = rep.hes1_identity_error <= run.cfg.hes1_tol
    checks["criticality"] = sol.residual_u <= max(10 * run.cfg.grad_tol, 1e-8)
    checks["el_equivalence"] = el <= 1e-8
    report = asdict(rep) | {"el_equivalence": el, "residual_u": sol.residual_u,
                            "residual_eta": sol.residual_eta, "checks": checks}
    run.write_json("certification.json", report)
    width = max(len(c) for c in checks)
    table = "\n".join(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}" for name, ok in checks.items())
    run.write("certification.txt", table + "\n")
    print(table)
    failed = [c for c, ok in checks.items() if not ok]
    run.results.update(failed=failed, sigma=rep.sigma)
    if failed:
        raise CertificationError("failing checks: " + ", ".join(failed))


def cmd_sweep(run: _Run):
    from .plots import line_svg
    from .solver import sweep_ray, sweep_to_csv, sweep_to_json
    pts = sweep_ray(run.mesh, run.cfg.k, run.beta(), run.cfg.grid(), run.opts())
    run.write("sweep.csv", sweep_to_csv(pts))
    run.write("sweep.json", sweep_to_json(pts) + "\n")
    t = [p.t for p in pts]
    run.write("sweep_D.svg", line_svg(t, [p.D for p in pts], "t", "D_min"))
    run.write("sweep_sup_u.svg", line_svg(t, [p.sup_u for p in pts], "t", "sup u"))
    run.results.update(points=len(pts), failures=sum(not p.converged for p in pts))


def cmd_cmc(run: _Run):
    from .applications import cmc_solve
    sol, data = cmc_solve(run.mesh, run.beta(), run.cfg.c, run.opts())
    _solution_outputs(run, sol)
    run.write("immersion.csv", data.to_csv())
    run.field_plot("lambda_spread.svg", data.lambda2 - data.lambda1, "lambda2 - lambda1")
    run.results.update(c=run.cfg.c, gauss_c_residual=data.gauss_residual,
                       max_principal_gap=float(np.max(data.lambda2 - data.lambda1)))


def cmd_fixedq(run: _Run):
    from .applications import fixed_q_solve
    res = fixed_q_solve(run.mesh, run.cfg.k, run.q(), run.cfg.grid(), run.opts())
    run.write("fixedq.csv", res.to_csv())
    run.results.update(fold_t=res.fold_t, solved=res.status.count("ok"), points=len(res.status))


def cmd_report(run: _Run):
    """Render plots and a summary from artifacts already in the output directory."""
    emit_plots(run)
    lines = []
    man = run.out / "manifest.json"
    if man.exists():
        prev = json.loads(man.read_text())
        lines.append(f"previous command: {prev['config']['command']}")
        for k, v in sorted(prev.get("results", {}).items()):
            lines.append(f"  {k}: {v}")
    run.write("report.txt", "\n".join(lines + run.notes) + "\n")


def emit_plots(run: _Run):
    from .plots import line_svg
    from .solver import Solution, sweep_from_csv
    found = False
    sol_path = run.out / "solution.json"
    if sol_path.exists():
        sol = Solution.from_dict(json.loads(sol_path.read_text()), run.mesh)
        run.field_plot("u.svg", _vertex_to_faces(run.mesh, sol.u), "u")
        run.field_plot("q_abs.svg", np.abs(sol.q()), "|q|")
        found = True
    csv_path = run.out / "sweep.csv"
    if csv_path.exists():
        rows = sweep_from_csv(csv_path.read_text())
        t = [r["t"] for r in rows]
        run.write("sweep_D.svg", line_svg(t, [r["D"] for r in rows], "t", "D_min"))
        run.write("sweep_sup_u.svg", line_svg(t, [r["sup_u"] for r in rows], "t", "sup u"))
        found = True
    if not found:
        run.notes.append("no solution.json or sweep.csv found; nothing to plot")


HANDLERS = {"mesh-gen": cmd_mesh_gen, "basis": cmd_basis, "solve": cmd_solve, "verify": cmd_verify,
            "sweep": cmd_sweep, "cmc": cmd_cmc, "fixedq": cmd_fixedq, "report": cmd_report}


@dataclass
class RunManifest:
    config: dict
    mesh_hash: str
    versions: dict
    outputs: list
    results: dict
    status: int
    notes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def run(cfg: RunConfig) -> tuple[int, RunManifest]:
    t0 = time.perf_counter()
    r = _Run(cfg)
    status = EXIT_OK
    try:
        HANDLERS[cfg.command](r)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except CertificationError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        status = EXIT_CERT
    except (NumericalError, ArithmeticError, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        status = EXIT_NUM
    mesh_hash = r._mesh.hash() if r._mesh is not None else ""
    outputs = [{"path": f, "sha256": _sha256(r.out / f)} for f in r.files]
    man = RunManifest(config=asdict(cfg), mesh_hash=mesh_hash,
                      versions={"donaldson": __version__, "numpy": np.__version__,
                                "scipy": scipy.__version__, "python": platform.python_version()},
                      outputs=outputs, results={k: _jsonable(v) for k, v in r.results.items()},
                      status=status, notes=r.notes,
                      timing={"wall_time_s": round(time.perf_counter() - t0, 3)})
    (r.out / "manifest.json").write_text(json.dumps(asdict(man), indent=1, sort_keys=True) + "\n")
    return status, man


def verify_manifest(output_dir) -> bool:
    """Every listed output exists and matches its recorded hash."""
    out = Path(output_dir)
    man = json.loads((out / "manifest.json").read_text())
    return all((out / o["path"]).exists() and _sha256(out / o["path"]) == o["sha256"]
               for o in man["outputs"])


def main(argv=None) -> int:
    import logging
    try:
        cfg, verbose = make_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    status, man = run(cfg)
    for k, v in man.results.items():
        print(f"{k}: {v}")
    return status


if __name__ == "__main__":
    sys.exit(main())
