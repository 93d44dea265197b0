"""Command line: ``heatcascade {spectrum,synth,simulate,sweep} --scenario FILE --out DIR``.

Exit codes: 0 ok, 2 invalid input, 3 synthesis refused or infeasible,
4 integration failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from . import spectrum_identical as si
from .modal import ModeFactory, SynthesisRefusal, assemble, hautus_check
from .scenario import Scenario, ScenarioError
from .simulate import ClosedLoop, IntegrationError, compare, run, run_fd_oracle
from .spectrum_distinct import ConfigError, verify_riesz_frame
from .synthesis import Controller, SearchResult, SynthesisError, certify, design, search_orders

__all__ = ["main", "EXIT_OK", "EXIT_INVALID", "EXIT_SYNTHESIS", "EXIT_INTEGRATION"]

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SYNTHESIS = 3
EXIT_INTEGRATION = 4
RATE_FACTOR = 0.9


class Infeasible(RuntimeError):
    """No certified observer order below the cap."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


# --- shared pipeline -------------------------------------------------------

def synthesize(sc: Scenario) -> SearchResult:
    """Hautus gate, gains, then the order search (or the fixed orders given)."""
    cfg = sc.config()
    factory = ModeFactory(cfg)
    chans = factory.channels
    n0 = sc.channel_orders("n0", chans)
    n = sc.channel_orders("n", chans)
    model = assemble(cfg, n0, factory=factory)
    ctrl = design(model)
    if n is None:
        return search_orders(model, ctrl, cap=sc.data["orders"]["cap"])
    mm = assemble(cfg, model.n0, n, factory=factory)
    c = ctrl.with_model(mm)
    cert = certify(c)
    return SearchResult(cert.passed, c, cert, None, [], None)


def write_synthesis(res: SearchResult, out: Path) -> None:
    ctrl, cert = res.controller, res.certificate
    m = ctrl.model
    rows = [("K", i, v) for i, v in enumerate(ctrl.K)] + [("L", i, v) for i, v in enumerate(ctrl.L)]
    write_csv(out / "gains.csv", ["gain", "index", "value"], rows)
    write_csv(out / "orders.csv", ["channel", "n0", "n"], [(ch, m.n0[ch], m.n[ch]) for ch in m.channels])
    write_csv(out / "search.csv", ["increment", "orders", "passed", "theta_max"],
              [(p["d"], " ".join(f"{k}:{v}" for k, v in sorted(p["orders"].items())), p["passed"], p["theta_max"])
               for p in res.path])
    a1, a2 = ctrl.abscissae()
    report = cert.summary()
    report.update({"abscissa_state": a1, "abscissa_observer": a2, "monotone_next_order": res.monotone,
                   "hautus_warnings": hautus_check(m).warnings, "kappa": m.kappa, "c_lift": m.c_lift})
    write_json(out / "certificate.json", report)
    write_json(out / "controller.json", {"K": list(ctrl.K), "L": list(ctrl.L),
                                         "n0": m.n0, "n": m.n, "certified": cert.passed})


def load_controller(sc: Scenario, path) -> SearchResult:
    try:
        data = json.loads(Path(path).read_text())
        n0 = {int(k): int(v) for k, v in data["n0"].items()}
        n = {int(k): int(v) for k, v in data["n"].items()}
        K, L = np.asarray(data["K"], float), np.asarray(data["L"], float)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"cannot read controller file: {exc}") from exc
    model = assemble(sc.config(), n0, n)
    if K.size != model.n_low + 1 or L.size != model.n_low:
        raise ScenarioError("controller gains do not match the scenario's orders")
    ctrl = Controller(model, K, L)
    cert = certify(ctrl)
    return SearchResult(cert.passed, ctrl, cert, None, [], None)


def _require_certified(res: SearchResult) -> None:
    if not res.passed:
        raise Infeasible(f"no certified observer order up to the cap (theta_max {res.certificate.theta_max:.3e})")


def simulate_to(sc: Scenario, res: SearchResult, out: Path, oracle: bool) -> dict:
    m, ctrl, cert = res.controller.model, res.controller, res.certificate
    cfg = m.cfg
    d = sc.data
    loop = ClosedLoop(m, ctrl, cert, d["k_sim"])
    ic = sc.initial_condition()
    traj = run(m, ctrl, ic, d["T"], d["dt"], certificate=cert, loop=loop)
    write_csv(out / "trajectory.csv", ["t", "u", "z", "h0", "h1", "V"],
              zip(traj.t, traj.u, traj.z, traj.h0, traj.h1,
                  traj.V if traj.V is not None else [None] * traj.t.size))
    target = RATE_FACTOR * cfg.delta
    summary = {
        "rate": traj.rate, "rate_h1": traj.rate_h1, "rate_observer_error": traj.rate_e1,
        "target_rate": target, "rate_ok": traj.rate >= target,
        "fit_window_start": 0.25 * d["T"], "fit_window_end": d["T"],
        "monotone_violation": traj.monotone_violation(cfg.delta),
        "discarded_energy": traj.discarded, "k_sim": traj.k_sim, "method": traj.method,
    }
    plotting.plot_trajectory(traj, cfg.delta, out / "trajectory.png")
    plotting.plot_profiles(traj, out / "profiles.png")
    if oracle:
        fd = run_fd_oracle(m, ctrl, ic, d["T"], d["dt"])
        write_csv(out / "fd_trajectory.csv", ["t", "u", "z", "h0", "h1"],
                  zip(fd.t, fd.u, fd.z, fd.h0, fd.h1))
        cmp = compare(traj, fd)
        summary.update({"fd_M": fd.M, "fd_converged": fd.converged, "fd_z_sup_rel": cmp["z_sup_rel"],
                        "fd_z_ok": cmp["z_sup_rel"] <= 0.02})
        for f, v in cmp["h0_rel"].items():
            summary[f"fd_h0_rel_{f:g}T"] = v
        summary["fd_h0_ok"] = all(v <= 0.01 for v in cmp["h0_rel"].values())
        plotting.plot_comparison(traj, fd, out / "comparison.png")
    write_csv(out / "summary.csv", ["key", "value"], summary.items())
    return summary


# --- commands ---------------------------------------------------------------

def cmd_spectrum(sc: Scenario, out: Path, kmax: int) -> int:
    cfg = sc.config()
    fac = ModeFactory(cfg)
    rows = []
    groups = [fac.group(ch, k) for ch in fac.channels for k in range(kmax + 1)]
    for g in groups:
        for idx, lab in enumerate(g.labels):
            rows.append({"chain": lab[0], "k": lab[1], "lambda": g.lam, "alpha": float(g.alpha[idx]),
                         "beta": float(g.beta[idx]), "m": float(g.m[idx]), "c": float(g.c[idx])})
    keys = ["chain", "k", "lambda", "alpha", "beta", "m", "c"]
    write_csv(out / "coefficients.csv", keys, [[r[k] for k in keys] for r in rows])
    write_csv(out / "eigenvalues.csv", ["chain", "k", "lambda", "multiplicity"],
              [(g.chain, g.k, g.lam, g.dim) for g in groups])
    if cfg.regime == "identical":
        nu_rows, c_rows = [], []
        for k in range(kmax + 1):
            sigma, tau = si.chains(k, cfg.N)
            nu_rows += [(k, n, v) for n, v in enumerate(sigma.nu, start=1)]
            c_rows += [(k, n, v) for n, v in enumerate(tau.c, start=1)]
        write_csv(out / "nu.csv", ["k", "n", "nu"], nu_rows)
        write_csv(out / "tau_constants.csv", ["k", "n", "c"], c_rows)
    phis = [p for g in groups for p in g.phis]
    psis = [p for g in groups for p in g.psis]
    rep = verify_riesz_frame(cfg, kmax, phis, psis)
    write_csv(out / "biorthogonality.csv", ["K_max", "max_residual", "gram_min", "gram_max", "h1_gram_min",
                                            "h1_gram_max"],
              [(kmax, rep.biorth_residual, *rep.gram_eigs, *rep.h1_gram_eigs)])
    plotting.plot_spectrum(rows, out / "spectrum.png")
    return EXIT_OK


def cmd_synth(sc: Scenario, out: Path) -> int:
    res = synthesize(sc)
    write_synthesis(res, out)
    _require_certified(res)
    return EXIT_OK


def cmd_simulate(sc: Scenario, out: Path, oracle: bool, controller=None) -> int:
    res = load_controller(sc, controller) if controller else synthesize(sc)
    write_synthesis(res, out)
    _require_certified(res)
    simulate_to(sc, res, out, oracle)
    return EXIT_OK


def _cell(args) -> dict:
    """One sweep cell; every failure is caught and reported."""
    index, data, values, out, oracle = args
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    row = {"cell": index, **values, "status": "ok", "exit_code": EXIT_OK, "certified": False,
           "orders": "", "theta_max": None, "rate": None, "rate_h1": None, "message": ""}
    try:
        sc = Scenario.from_dict(data)
        sc.dump(out / "scenario.resolved.json")
        res = synthesize(sc)
        write_synthesis(res, out)
        m = res.controller.model
        row.update(certified=res.passed, theta_max=res.certificate.theta_max,
                   orders=" ".join(f"{ch}:{m.n[ch]}" for ch in m.channels))
        _require_certified(res)
        summ = simulate_to(sc, res, out, oracle)
        row.update(rate=summ["rate"], rate_h1=summ["rate_h1"])
    except Exception as exc:  # noqa: BLE001 - isolate the cell
        code, status = _classify(exc)
        if code is None:
            code, status = 1, "error"
        row.update(status=status, exit_code=code, message=str(exc))
        _write_error(out, exc, code, status)
    return row


def cmd_sweep(sc: Scenario, out: Path, axes: dict, workers: int, oracle: bool) -> int:
    names = sorted(axes)
    combos = list(itertools.product(*(axes[n] for n in names))) if names else [()]
    jobs = []
    for i, combo in enumerate(combos):
        cell = sc
        values = dict(zip(names, combo))
        for n, v in values.items():
            cell = cell.with_axis(n, v)
        jobs.append((i, cell.resolved(), values, str(out / f"cell_{i:03d}"), oracle))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell, jobs))
    else:
        rows = [_cell(j) for j in jobs]
    header = ["cell", *names, "status", "exit_code", "certified", "orders", "theta_max", "rate", "rate_h1",
              "message"]
    write_csv(out / "summary.csv", header, [[r[h] for h in header] for r in rows])
    plotting.plot_sweep(rows, names, out / "sweep.png")
    return EXIT_OK


# --- error handling ---------------------------------------------------------

def _classify(exc) -> tuple[int | None, str]:
    if isinstance(exc, (ScenarioError, ConfigError)):
        return EXIT_INVALID, "invalid"
    if isinstance(exc, SynthesisRefusal):
        return EXIT_SYNTHESIS, "refused"
    if isinstance(exc, (Infeasible, SynthesisError)):
        return EXIT_SYNTHESIS, "infeasible"
    if isinstance(exc, IntegrationError):
        return EXIT_INTEGRATION, "integration_failure"
    return None, ""


def _error_payload(exc, code, status) -> dict:
    payload = {"error": status, "exit_code": code, "message": str(exc)}
    if isinstance(exc, SynthesisRefusal):
        payload["offending"] = [{"mode": list(lab), "value": float(v)} for lab, v in exc.offending]
    return payload


def _write_error(out: Path | None, exc, code, status) -> dict:
    payload = _error_payload(exc, code, status)
    if out is not None and out.is_dir():
        write_json(out / "error.json", payload)
    return payload


def _parse_axes(specs, base: dict) -> dict:
    axes = {k: list(v) for k, v in base.items()}
    for s in specs or []:
        name, sep, vals = s.partition("=")
        if not sep or not vals:
            raise ScenarioError(f"axis spec {s!r} must look like name=v1,v2")
        parsed = []
        for tok in vals.split(","):
            try:
                parsed.append(int(tok) if name == "n" else float(tok))
            except ValueError as exc:
                raise ScenarioError(f"bad axis value {tok!r}") from exc
        axes[name.strip()] = parsed
    return axes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatcascade", description="Output-feedback stabilisation of heat cascades")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("spectrum", "synth", "simulate", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--scenario", required=True, help="scenario JSON file")
        s.add_argument("--out", required=True, help="output directory")
        if name == "spectrum":
            s.add_argument("--kmax", type=int, default=None, help="largest frequency in the tables")
        if name in ("simulate", "sweep"):
            s.add_argument("--oracle", action="store_true", help="add the finite-difference cross-check")
        if name == "simulate":
            s.add_argument("--controller", default=None, help="controller.json from a previous synth run")
        if name == "sweep":
            s.add_argument("--workers", type=int, default=1)
            s.add_argument("--axis", action="append", default=[], help="name=v1,v2 (delta, xi, aJ, n)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        sc = Scenario.load(args.scenario)
        out.mkdir(parents=True, exist_ok=True)
        sc.dump(out / "scenario.resolved.json")
        if args.command == "spectrum":
            kmax = sc.data["kmax"] if args.kmax is None else args.kmax
            if kmax < 0:
                raise ScenarioError("--kmax must be nonnegative")
            return cmd_spectrum(sc, out, kmax)
        if args.command == "synth":
            return cmd_synth(sc, out)
        if args.command == "simulate":
            return cmd_simulate(sc, out, args.oracle, args.controller)
        axes = _parse_axes(args.axis, sc.data["sweep"])
        for name, vals in axes.items():
            if vals:
                sc.with_axis(name, vals[0])  # rejects unknown axes before any cell runs
        return cmd_sweep(sc, out, axes, max(1, args.workers), args.oracle)
    except Exception as exc:  # noqa: BLE001
        code, status = _classify(exc)
        if code is None:
            raise
        payload = _write_error(out, exc, code, status)
        print(json.dumps(_jsonable(payload), sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
