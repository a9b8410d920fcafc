"""Command line entry point.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
Exit status 2 marks a configuration error, 3 a solver failure and 4 an
inconclusive classification.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import onsager
from .geometry import Domain, GeometryError, build_mesh, write_field_csv
from .green import GreenError, GreenOracle, default_seeds, robin_map
from .pde import (SolverError, bubble_diagnose, expansion_check, linearized_spectrum_gelfand,
                  linearized_spectrum_meanfield, solve_gelfand, solve_mean_field)
from .svg import write_plot
from .vortex import VortexError, classify_domain, d_omega_eval, find_critical_points, seed_grid
from .weight import WeightError, WeightSpec

EXIT_CONFIG, EXIT_SOLVER, EXIT_INCONCLUSIVE = 2, 3, 4
COMMANDS = ("classify", "robin", "hamiltonian", "solve", "spectrum", "branch", "entropy-curve", "expansion-check")


class ConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


class Inconclusive(RuntimeError):
    pass


@dataclass
class RunConfig:
    command: str
    domain_file: str
    mesh_h: float = 0.05
    mesh_h_center: float | None = None
    output_dir: str = "out"
    tolerances: dict = field(default_factory=lambda: {"tol_newton": 1e-10, "tol_eig": 1e-8, "tol_grad": 1e-6})
    seed: int = 0
    lam: float | None = None
    eps: float | None = None
    eps_start: float = 0.05
    eps_min: float = 0.1
    m: int = 1
    h_spec: str | None = None
    guess: str | None = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not self.mesh_h > 0:
            raise ConfigError("mesh_h must be positive")
        if self.mesh_h_center is not None and not self.mesh_h_center > 0:
            raise ConfigError("mesh_h_center must be positive")
        unknown = set(self.tolerances) - {"tol_newton", "tol_eig", "tol_grad"}
        if unknown:
            raise ConfigError(f"unknown tolerance keys: {sorted(unknown)}")
        for k, v in self.tolerances.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not (self.eps_start > 0 and self.eps_min > 0):
            raise ConfigError("eps_start and eps_min must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", newline="\n")
    return path


def threads_from_env() -> int:
    raw = os.environ.get("ONSAGER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ONSAGER_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("ONSAGER_THREADS must be >= 1")
    return n


def input_hash(cfg: RunConfig, domain_text: bytes) -> str:
    h = hashlib.sha256()
    h.update(domain_text)
    # the output location is not an input
    cfg_d = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    h.update(json.dumps(cfg_d, sort_keys=True).encode())
    if cfg.guess and cfg.guess != "zero" and Path(cfg.guess).is_file():
        h.update(Path(cfg.guess).read_bytes())
    return h.hexdigest()


class Runner:
    def __init__(self, cfg: RunConfig, domain: Domain):
        self.cfg = cfg
        self.domain = domain
        self.out = Path(cfg.output_dir)
        self.files: list[Path] = []
        self.summary: dict = {}
        self.threads = threads_from_env()
        self._mesh = None
        self._oracle = None
        self.weight = WeightSpec.from_json(cfg.h_spec) if cfg.h_spec else WeightSpec()

    @property
    def mesh(self):
        if self._mesh is None:
            self._mesh = build_mesh(self.domain, self.cfg.mesh_h, h_center=self.cfg.mesh_h_center)
        return self._mesh

    @property
    def oracle(self) -> GreenOracle:
        if self._oracle is None:
            self._oracle = GreenOracle(self.mesh)
        return self._oracle

    @property
    def tol(self):
        return self.cfg.tolerances

    def emit(self, path: Path) -> None:
        self.files.append(path)

    # commands ------------------------------------------------------------
    def classify(self):
        v = classify_domain(self.domain, oracle=self.oracle, tol_grad=self.tol["tol_grad"], seed=self.cfg.seed)
        self.emit(write_json(self.out / "verdict.json", v.to_dict()))
        self.summary = {"kind": v.kind, "d_omega": v.d_omega, "d_omega_error": v.d_omega_error}
        if v.kind == "inconclusive":
            raise Inconclusive(v.advice)

    def robin(self):
        seeds = default_seeds(self.mesh, 4, np.random.default_rng(self.cfg.seed))
        rep = self.oracle.robin_max(seeds, tol_grad=self.tol["tol_grad"])
        self.emit(write_json(self.out / "robin.json", rep.to_dict()))
        lo, hi = self.mesh.nodes.min(0), self.mesh.nodes.max(0)
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 13), np.linspace(lo[1], hi[1], 13))
        pts = np.c_[gx.ravel(), gy.ravel()]
        pts = pts[self.mesh.contains(pts)]
        pts = pts[self.mesh.boundary_distance(pts) >= 2 * self.mesh.h_max]
        rows = robin_map(self.oracle, pts)
        self.emit(write_csv(self.out / "robin_map.csv", ["x", "y", "gamma", "grad_norm"], rows))
        self.summary = {"argmax": rep.argmax, "gamma_max": rep.gamma_max}

    def hamiltonian(self):
        seeds = seed_grid(self.domain, self.cfg.m, 4, jitter=0.05, rng=np.random.default_rng(self.cfg.seed))
        reps, failed = find_critical_points(self.oracle, self.weight, self.cfg.m, seeds,
                                            tol_grad=self.tol["tol_grad"])
        self.emit(write_json(self.out / "critical_points.json", [r.to_dict() for r in reps]))
        self.summary = {"n_critical": len(reps), "n_failed_seeds": len(failed)}
        if not reps:
            raise SolverFailure("no critical point found")

    def _solve(self):
        c = self.cfg
        guess = None
        if c.guess and c.guess != "zero":
            from .geometry import read_field_csv
            try:
                guess = read_field_csv(c.guess, self.mesh)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"bad guess file: {exc}") from exc
        if (c.lam is None) == (c.eps is None):
            raise ConfigError("give exactly one of --lambda or --eps")
        if c.lam is not None:
            oracle = None if self.weight.is_constant else self.oracle
            r = solve_mean_field(self.mesh, c.lam, w=self.weight, oracle=oracle, guess=guess,
                                 tol=self.tol["tol_newton"])
        else:
            if not self.weight.is_constant:
                raise ConfigError("--eps uses the unweighted Gelfand problem; drop --h-spec")
            r = solve_gelfand(self.mesh, c.eps, guess=guess, tol=self.tol["tol_newton"])
        if not r.converged:
            raise SolverFailure(f"Newton did not converge: {r.message} (residual {r.residual_norm:.3g})")
        return r

    def solve(self):
        r = self._solve()
        self.emit(write_json(self.out / "solve.json", r.summary()))
        p = self.out / "u.csv"
        write_field_csv(p, self.mesh, r.u.values)
        self.emit(p)
        self.summary = r.summary()

    def spectrum(self):
        r = self._solve()
        if r.kind == "gelfand":
            s = linearized_spectrum_gelfand(r, tol=self.tol["tol_eig"])
        else:
            s = linearized_spectrum_meanfield(r, tol=self.tol["tol_eig"])
        self.emit(write_json(self.out / "spectrum.json", {"solve": r.summary(), "spectrum": s.to_dict()}))
        self.summary = {"min_eig": s.smallest, "min_abs_eig": s.min_abs_eigenvalue, "converged": s.converged}
        if not s.converged:
            raise SolverFailure("eigensolver did not converge")

    def _branch(self):
        br = onsager.trace_branch(self.mesh, self.cfg.eps_start, self.cfg.eps_min,
                                  tol=self.tol["tol_newton"], tol_eig=self.tol["tol_eig"])
        if len(br.points) < 2:
            raise SolverFailure(f"branch stopped immediately: {br.stop_reason}")
        return br

    def branch(self):
        br = self._branch()
        nm = max((len(p.local_masses) for p in br.points), default=0)
        header = ["eps", "lambda", "energy", "entropy", "mu_max", "min_eig"] + [f"rho{j + 1}" for j in range(max(nm, 1))]
        rows = []
        for p in br.points:
            lm = p.local_masses + [float("nan")] * (max(nm, 1) - len(p.local_masses))
            rows.append([p.eps, p.lambda_eps, p.energy, p.entropy, p.mu_max, p.min_eig, *lm])
        self.emit(write_csv(self.out / "branch.csv", header, rows))
        a = br.arrays()
        self.emit(write_plot(self.out / "branch_eps2_lambda.svg", [(a["eps"] ** 2, a["lambda_eps"], "branch")],
                             "eps^2", "lambda", "Gelfand branch"))
        self.summary = {"points": len(br.points), "stop_reason": br.stop_reason, "folds": br.folds}

    def entropy_curve(self):
        v = classify_domain(self.domain, oracle=self.oracle, tol_grad=self.tol["tol_grad"], seed=self.cfg.seed)
        if v.kind == "inconclusive":
            raise Inconclusive(v.advice)
        br = self._branch() if v.kind == "second" else None
        c = onsager.entropy_energy_curve(self.mesh, v.kind, branch=br, tol=self.tol["tol_newton"],
                                         threads=self.threads)
        self.emit(write_csv(self.out / "entropy_curve.csv", ["E", "S", "lambda", "dSdE", "d2SdE2", "segment"],
                            c.rows()))
        series_s, series_l = [], []
        for seg in ("low", "high"):
            k = c.segment == seg
            if k.any():
                series_s.append((c.E[k], c.S[k], seg))
                series_l.append((c.E[k], c.lam[k], seg))
        self.emit(write_plot(self.out / "S_vs_E.svg", series_s, "E", "S", "entropy"))
        self.emit(write_plot(self.out / "lambda_vs_E.svg", series_l, "E", "lambda", "inverse temperature"))
        e8 = c.e8pi if v.kind == "second" else onsager.e8pi(self.mesh, v.kind, tol=self.tol["tol_newton"])
        self.emit(write_json(self.out / "curve.json", {"kind": v.kind, "verdicts": c.verdicts, "e8pi": e8}))
        self.summary = {"kind": v.kind, "verdicts": c.verdicts}

    def expansion_check(self):
        dv = d_omega_eval(self.oracle, self.oracle.robin_max(default_seeds(self.mesh, 4, np.random.default_rng(
            self.cfg.seed)), tol_grad=self.tol["tol_grad"]).argmax, tol_grad=self.tol["tol_grad"])
        br = self._branch()
        up = onsager.upper_branch(br)
        if len(up) < 5:
            raise SolverFailure("fewer than 5 upper-branch points")
        sign = int(np.sign(dv.value)) if abs(dv.value) > dv.error else None
        rep = expansion_check([p.lambda_eps for p in up], [p.rho_max for p in up], sign)
        self.emit(write_json(self.out / "expansion.json", {"d_omega": dv.to_dict(), "report": rep.to_dict()}))
        self.summary = {"limiting_sign": rep.limiting_sign, "consistent": rep.consistent}
        if sign is None:
            raise Inconclusive("D_Omega error bar straddles zero")

    def run(self) -> None:
        getattr(self, self.cfg.command.replace("-", "_"))()


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meanfield", description="Mean field vortex equation toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--domain", required=True, help="domain file (JSON)")
    p.add_argument("--mesh-h", type=float, default=0.05)
    p.add_argument("--mesh-h-center", type=float, default=None, help="graded mesh size at the domain center")
    p.add_argument("--out", default="out")
    p.add_argument("--tol-newton", type=float, default=1e-10)
    p.add_argument("--tol-eig", type=float, default=1e-8)
    p.add_argument("--tol-grad", type=float, default=1e-6)
    p.add_argument("--eps-start", type=float, default=0.05)
    p.add_argument("--eps-min", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--h", "--h-spec", dest="h_spec", default=None, help='inline JSON, e.g. {"hhat": "exp(x)"}')
    p.add_argument("--guess", default=None, help="field CSV or 'zero'")
    p.add_argument("--seed", type=int, default=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    t0 = time.perf_counter()
    try:
        a = parser.parse_args(argv)
        cfg = RunConfig(a.command, a.domain, a.mesh_h, a.mesh_h_center, a.out,
                        {"tol_newton": a.tol_newton, "tol_eig": a.tol_eig, "tol_grad": a.tol_grad}, a.seed, a.lam,
                        a.eps, a.eps_start, a.eps_min, a.m, a.h_spec, a.guess)
        cfg.validate()
        text = Path(cfg.domain_file).read_bytes()
        domain = Domain.from_json(cfg.domain_file)
        runner = Runner(cfg, domain)
    except (_ArgError, ConfigError, GeometryError, WeightError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    created = not runner.out.exists()
    runner.out.mkdir(parents=True, exist_ok=True)
    status, message = 0, "ok"
    try:
        runner.run()
    except (ConfigError, WeightError) as exc:
        # configuration problems found late still leave nothing behind
        for f in runner.files:
            f.unlink(missing_ok=True)
        if created and not any(runner.out.iterdir()):
            runner.out.rmdir()
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Inconclusive as exc:
        status, message = EXIT_INCONCLUSIVE, str(exc)
    except (SolverFailure, SolverError, GreenError, VortexError) as exc:
        status, message = EXIT_SOLVER, str(exc)
    manifest = {
        "command": cfg.command,
        "config": cfg.to_dict(),
        "domain": domain.to_dict(),
        "mesh": runner.mesh.stats() if runner._mesh is not None else None,
        "input_hash": input_hash(cfg, text),
        "wall_time_s": time.perf_counter() - t0,
        "threads": runner.threads,
        "status": status,
        "message": message,
        "summary": runner.summary,
        "outputs": [p.name for p in runner.files],
    }
    write_json(runner.out / "manifest.json", manifest)
    print(json.dumps(_jsonable({"status": status, "message": message, **runner.summary}), sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
