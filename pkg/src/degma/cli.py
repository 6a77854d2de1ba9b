"""Command-line driver for the pipeline.

Subcommands: solve, certify-energy, check-linear, smoothing-bench,
verify-embedding.  Configuration is TOML; reports are JSON with sorted keys
so identical configs and seeds produce byte-identical output; field dumps
are CSV with fixed headers.
"""

import argparse
import hashlib
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .canonical import CutoffKit, canonical_chain, extend_coefficients
from .embedding import (
    assemble_embedding,
    covariant_identity_check,
    deficit_metric,
    flat_coordinates,
    flatness_residual,
    isometry_residual,
)
from .errors import CertificateFailureError, ConfigError, DegmaError, RegimeError
from .expr import as_callable
from .geometry import CurveSpec, MetricPatch
from .grids import GridField, Rectangle
from .iteration import Schedule, run
from .linear_solver import GalerkinBasis, galerkin_solve, energy_certificate
from .operators import LinearOperatorField
from .problem import MAProblemSpec, phi, scale
from .smoothing import verify_smoothing_bounds

OUT_ENV = "DEGMA_OUT"


class RunConfig:
    """Parsed TOML configuration plus run-level options.

    The raw bytes are hashed so every report can state exactly which
    configuration produced it.
    """

    def __init__(self, path, out_dir=None, seed=0, paper_schedule=False,
                 sweep=False):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        self.path = path
        self.raw = path.read_bytes()
        try:
            self.data = tomllib.loads(self.raw.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        self.sha256 = hashlib.sha256(self.raw).hexdigest()
        self.seed = int(seed)
        self.paper_schedule = bool(paper_schedule)
        self.sweep = bool(sweep)

        problem = self.data.get("problem", {})
        ref = problem.get("file")
        if ref is not None:
            ref_path = (path.parent / ref).resolve()
            if not ref_path.is_file():
                raise ConfigError(f"referenced problem file not found: {ref_path}")
            with open(ref_path, "rb") as fh:
                self.data["problem"] = tomllib.load(fh).get("problem", {})

        # out-dir precedence: flag, environment, config, default
        cfg_out = self.data.get("output", {}).get("dir")
        self.out_dir = Path(out_dir or os.environ.get(OUT_ENV) or cfg_out or "out")

        if self.sweep and not self.epsilons():
            raise ConfigError("sweep requested but the epsilon list is empty")

    def table(self, name):
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    def epsilons(self):
        eps = self.table("scaling").get("epsilon", 0.05)
        if isinstance(eps, (int, float)):
            return [float(eps)]
        return [float(e) for e in eps]

    def problem_spec(self):
        p = self.table("problem")
        try:
            sigma = CurveSpec(p.get("sigma", "v"), M1=p.get("M1", 1.0))
            return MAProblemSpec(
                p.get("a11", 0.0), p.get("a12", 0.0), p.get("a22", 0.0),
                p.get("f", 1.0), p.get("K", "v^3"), sigma, p.get("n", 2),
            )
        except DegmaError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad [problem] table: {exc}") from exc

    def scaled(self, epsilon):
        s = self.table("scaling")
        spec = self.problem_spec()
        spec.require_regime()
        return scale(spec, epsilon, s.get("x0", 0.5), s.get("y0", 0.5))

    def schedule(self, epsilon):
        s = self.table("schedule")
        n = self.table("problem").get("n", 2)
        if self.paper_schedule:
            b = int(s.get("b", 27))
            return Schedule(epsilon, n, b=max(b, 27), mu=None,
                            analysis_mode=True,
                            max_iterations=s.get("max_iterations", 20),
                            stop_tolerance=s.get("stop_tolerance"))
        return Schedule(epsilon, n, b=s.get("b", 8), mu=s.get("mu", 2.0),
                        max_iterations=s.get("max_iterations", 20),
                        stop_tolerance=s.get("stop_tolerance"))

    def grid(self):
        g = self.table("grid")
        return int(g.get("nx", 129)), int(g.get("ny", 129)), int(g.get("n_modes", 24))


# -- report plumbing ------------------------------------------------------


def _plain(obj):
    """Recursively convert numpy scalars/arrays so json can serialize."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, GridField):
        return {"rect": [obj.rect.x0, obj.rect.x1, obj.rect.y0, obj.rect.y1],
                "sup_norm": obj.sup_norm()}
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_plain(payload), sort_keys=True, indent=2)
    path.write_text(text + "\n")


def _report_base(cfg):
    return {
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "versions": {"package": __version__, "report_schema": 1},
    }


def _write_error(out_dir, code, exc):
    _write_json(Path(out_dir) / "error.json",
                {"error": code, "type": type(exc).__name__, "message": str(exc)})


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _export_surface(out_dir, result):
    x, y, z = result.x, result.y, result.z
    U, V = z.meshgrid()
    rows = [
        (float(U[i, j]), float(V[i, j]), float(x.values[i, j]),
         float(y.values[i, j]), float(z.values[i, j]))
        for i in range(z.nx) for j in range(z.ny)
    ]
    _write_csv(out_dir / "embedding.csv", ("u", "v", "x", "y", "z"), rows)
    with open(out_dir / "mesh.txt", "w") as fh:
        for _, _, xv, yv, zv in rows:
            fh.write(f"v {xv:.17g} {yv:.17g} {zv:.17g}\n")
        for i in range(z.nx - 1):
            for j in range(z.ny - 1):
                a = i * z.ny + j + 1
                b = (i + 1) * z.ny + j + 1
                fh.write(f"f {a} {b} {b + 1}\n")
                fh.write(f"f {a} {b + 1} {a + 1}\n")


# -- subcommands ----------------------------------------------------------


def _solve_one(cfg, epsilon, out_dir):
    sp = cfg.scaled(epsilon)
    schedule = cfg.schedule(epsilon)
    nx, ny, n_modes = cfg.grid()
    reduction = cfg.table("schedule").get("stop_reduction")
    if schedule.stop_tolerance is None and reduction is not None:
        w0 = GridField.constant(0.0, sp.rect, nx, ny)
        schedule.stop_tolerance = float(reduction) * phi(sp, w0).sup_norm()
    w, report = run(sp, schedule, nx=nx, ny=ny, n_modes=n_modes)
    result = assemble_embedding(w, sp)

    payload = _report_base(cfg)
    payload["epsilon"] = epsilon
    payload["schedule"] = {
        "mu": schedule.mu, "b": schedule.b, "delta": schedule.delta,
        "paper_mode": schedule.analysis_mode,
        "max_iterations": schedule.max_iterations,
    }
    payload["run"] = report
    payload["embedding"] = result.norms
    _write_json(out_dir / "report.json", payload)

    hist = report["history"]
    rows = []
    for k, res in enumerate(hist["residual_sup"]):
        tele = hist["telescoping"][k - 1] if 1 <= k <= len(hist["telescoping"]) else ""
        ul2 = hist["u_l2"][k - 1] if 1 <= k <= len(hist["u_l2"]) else ""
        rows.append((k, float(res), tele, ul2))
    _write_csv(out_dir / "residuals.csv",
               ("k", "residual_sup", "telescoping", "u_l2"), rows)
    _export_surface(out_dir, result)
    return report


def cmd_solve(cfg):
    epsilons = cfg.epsilons()
    if len(epsilons) == 1 and not cfg.sweep:
        report = _solve_one(cfg, epsilons[0], cfg.out_dir)
        if not report["converged"]:
            _write_error(cfg.out_dir, "not_converged",
                         DegmaError(f"stopped on {report['stopped_on']}"))
            return 3
        return 0

    def one(eps):
        sub = cfg.out_dir / f"eps_{eps:g}"
        try:
            rep = _solve_one(cfg, eps, sub)
            return eps, bool(rep["converged"]), rep["reduction"]
        except DegmaError as exc:
            _write_error(sub, "module", exc)
            return eps, False, None

    workers = min(4, len(epsilons)) if cfg.sweep else 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, epsilons))
    converging = [e for e, ok, _ in results if ok]
    payload = _report_base(cfg)
    payload["sweep"] = [
        {"epsilon": e, "converged": ok, "reduction": red}
        for e, ok, red in results
    ]
    payload["largest_converging_epsilon"] = max(converging) if converging else None
    _write_json(cfg.out_dir / "sweep.json", payload)
    return 0 if converging else 3


def cmd_certify_energy(cfg):
    epsilon = cfg.epsilons()[0]
    sp = cfg.scaled(epsilon)
    nx, ny, _ = cfg.grid()
    w = GridField.constant(0.0, sp.rect, nx, ny)
    L7 = canonical_chain(sp, w).L7
    kit = CutoffKit(min(L7.rect.x1, L7.rect.y1) / 1.3)
    audit = int(cfg.table("certificate").get("audit_grid", 512))
    Lext = extend_coefficients(L7, kit, nx=audit + 1, ny=audit + 1)
    payload = _report_base(cfg)
    payload["epsilon"] = epsilon
    try:
        cert = energy_certificate(Lext, kit)
    except CertificateFailureError as exc:
        payload["pass"] = False
        payload["failure"] = {"message": str(exc), "node": _plain(exc.node),
                              "margin": exc.margin}
        _write_json(cfg.out_dir / "certificate.json", payload)
        _write_error(cfg.out_dir, "certificate", exc)
        return 3
    payload["pass"] = True
    payload["margins"] = cert.margins
    payload["gamma2"] = cert.gamma2
    payload["C6"] = cert.C6
    _write_json(cfg.out_dir / "certificate.json", payload)
    return 0


def _manufactured_elliptic(nx):
    rect = Rectangle(-4.0, 4.0, -4.0, 4.0)
    z = GridField.constant(0.0, rect, nx, nx)
    one = GridField.constant(1.0, rect, nx, nx)
    L = LinearOperatorField("extended", "alphabeta", one, z, one, z, z, -one)
    X, Y = z.meshgrid()
    ustar = np.exp(-(X**2) - Y**2)
    f = z.like((4 * X**2 - 2) * ustar + (4 * Y**2 - 2) * ustar - ustar)
    return rect, L, z.like(ustar), f


def cmd_check_linear(cfg):
    lin = cfg.table("linear")
    nx = int(lin.get("nx", 257))
    n_modes = int(lin.get("n_modes", 64))
    tol = float(lin.get("tolerance", 1e-3))
    rect, L, ustar, f = _manufactured_elliptic(nx)
    basis = GalerkinBasis(rect.x0, rect.x1, nx, n_modes)
    sol = galerkin_solve(L, f, basis)
    err = float(np.sqrt(np.sum((sol.values - ustar.values) ** 2)
                        / np.sum(ustar.values**2)))
    zero = galerkin_solve(L, f * 0.0, basis)
    payload = _report_base(cfg)
    payload["manufactured"] = {
        "nx": nx, "n_modes": n_modes, "rel_l2_error": err,
        "residual_sup": sol.report["residual_sup"],
        "zero_rhs_sup": zero.field.sup_norm(),
        "tolerance": tol,
    }
    ok = err <= tol and zero.field.sup_norm() <= 1e-12
    payload["pass"] = ok
    _write_json(cfg.out_dir / "linear.json", payload)
    _write_csv(cfg.out_dir / "linear.csv",
               ("nx", "n_modes", "rel_l2_error"), [(nx, n_modes, err)])
    if not ok:
        _write_error(cfg.out_dir, "linear",
                     DegmaError(f"relative error {err:.3g} above {tol:.3g}"))
        return 3
    return 0


def cmd_smoothing_bench(cfg):
    sm = cfg.table("smoothing")
    table = verify_smoothing_bounds(
        nx=int(sm.get("nx", 257)),
        mus=tuple(sm.get("mus", (2.0, 4.0, 8.0, 16.0))),
        orders=tuple(sm.get("orders", (0, 2, 4))),
        slack=float(sm.get("slack", 0.3)),
    )
    payload = _report_base(cfg)
    payload["bench"] = table
    payload["pass"] = True
    _write_json(cfg.out_dir / "smoothing.json", payload)
    rows = [
        (fit["kind"], fit["m"], fit["l"], fit["predicted_exponent"],
         float(fit["measured_exponent"]), float(fit["constant"]))
        for fit in table["fits"]
    ]
    _write_csv(cfg.out_dir / "smoothing.csv",
               ("kind", "m", "l", "predicted", "measured", "constant"), rows)
    return 0


def _field_from(expr, rect, n):
    fn = as_callable(expr, ("u", "v"))
    return GridField.from_function(
        lambda U, V: np.broadcast_to(np.asarray(fn(u=U, v=V), float),
                                     U.shape).copy(), rect, n, n)


def cmd_verify_embedding(cfg):
    emb = cfg.table("embedding")
    cases = emb.get("cases")
    if not cases:
        raise ConfigError("[embedding] needs at least one [[embedding.cases]]")
    payload = _report_base(cfg)
    payload["cases"] = []
    worst_ok = True
    rows = []
    for case in cases:
        name = case.get("name", "case")
        r = case.get("rect", [-0.5, 0.5, -0.5, 0.5])
        rect = Rectangle(*[float(t) for t in r])
        n = int(case.get("n", 129))
        tol = float(case.get("tolerance", 1e-6))
        metric = MetricPatch(
            rect,
            E=_field_from(case.get("E", 1.0), rect, n),
            F=_field_from(case.get("F", 0.0), rect, n),
            G=_field_from(case.get("G", 1.0), rect, n),
        )
        z = _field_from(case.get("z", 0.0), rect, n)
        entry = {"name": name, "n": n, "tolerance": tol}
        identity = covariant_identity_check(metric, tol=1.0)
        entry["identity_rel_mismatch"] = identity.norms["omega_rel_mismatch"]
        if "x" in case and "y" in case:
            x = _field_from(case["x"], rect, n)
            y = _field_from(case["y"], rect, n)
            summary = isometry_residual(metric, x, y, z)
        else:
            flat = flatness_residual(metric, z)
            entry["flatness_sup"] = flat.sup_norm()
            x, y = flat_coordinates(deficit_metric(metric, z),
                                    holonomy_tol=case.get("holonomy_tol", 1e-4))
            summary = isometry_residual(metric, x, y, z)
        summary.pop("fields")
        entry["isometry"] = summary
        entry["pass"] = summary["max_rel"] <= tol
        worst_ok = worst_ok and entry["pass"]
        payload["cases"].append(entry)
        rows.append((name, summary["max_rel"], summary["l2_rel"],
                     entry["identity_rel_mismatch"]))
    payload["pass"] = worst_ok
    _write_json(cfg.out_dir / "embedding.json", payload)
    _write_csv(cfg.out_dir / "embedding_cases.csv",
               ("name", "max_rel", "l2_rel", "identity_rel"), rows)
    if not worst_ok:
        _write_error(cfg.out_dir, "embedding",
                     DegmaError("isometry residual above tolerance"))
        return 3
    return 0


_COMMANDS = {
    "solve": cmd_solve,
    "certify-energy": cmd_certify_energy,
    "check-linear": cmd_check_linear,
    "smoothing-bench": cmd_smoothing_bench,
    "verify-embedding": cmd_verify_embedding,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="degma",
        description="degenerate Monge-Ampere pipeline driver",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", default=None, metavar="DIR")
        p.add_argument("--seed", type=int, default=0, metavar="N")
        p.add_argument("--paper-schedule", action="store_true")
        p.add_argument("--sweep", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig(args.config, out_dir=args.out, seed=args.seed,
                        paper_schedule=args.paper_schedule, sweep=args.sweep)
    except ConfigError as exc:
        out = Path(args.out or os.environ.get(OUT_ENV) or "out")
        _write_error(out, "config", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    stale = cfg.out_dir / "error.json"
    if stale.is_file():
        stale.unlink()
    try:
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _write_error(cfg.out_dir, "config", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RegimeError as exc:
        _write_error(cfg.out_dir, "regime", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegmaError as exc:
        _write_error(cfg.out_dir, "module", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
