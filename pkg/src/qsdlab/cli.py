"""``qsdlab`` command line: experiments from a TOML config, results as CSV/JSON/SVG bundles.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
``diagnostic.json`` is written to the output directory).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .errors import ConfigError, QsdlabError, UnsupportedProtocol
from .flow import find_attractor, integrate, interior_equilibria
from .kernel import absorption_time_samples, assemble, thread_count
from .ldp import (RateFunctional, build_cost_graph, l_classes, quasipotential)
from .protocols import mean_field
from .qsd import decay_fit, kernel_qsd, qsd_mass_in, sweep
from .recurrence import ap_classes, ap_graph, compare_atlases
from .simplex import (enumerate_grid, epsilon_neighborhood, n_interior_points,
                      n_points, nearest_counts)

SWEEP_COLUMNS = ["N", "rho", "one_minus_rho", "theta", "expected_T0", "qsd_mass_eps",
                 "residual", "iterations", "seconds"]


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, dict):
        return {str(k): _num(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_num(x) for x in v]
    return v


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Bundle:
    """Files of one run plus the ``bundle.json`` manifest."""

    def __init__(self, directory, subcommand: str, cfg: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.sub = subcommand
        self.cfg = cfg
        self.files: list[str] = []
        self.formats = set(cfg["output"]["formats"])

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def csv(self, name, header, rows):
        if "csv" not in self.formats:
            return
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])

    def json(self, name, obj):
        if "json" not in self.formats:
            return
        with open(self.path(name), "w") as fh:
            fh.write(json.dumps(_num(obj), indent=2, sort_keys=True) + "\n")

    def svg(self, name) -> Path | None:
        return self.path(name) if "svg" in self.formats else None

    def finish(self, results: dict) -> Path:
        manifest = {
            "tool": "qsdlab",
            "version": __version__,
            "subcommand": self.sub,
            "config": self.cfg,
            "config_hash": cfgmod.config_hash(self.cfg),
            "files": sorted(set(self.files)),
            "results": results,
        }
        out = self.dir / "bundle.json"
        with open(out, "w") as fh:
            fh.write(json.dumps(_num(manifest), indent=2, sort_keys=True) + "\n")
        return out


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _coarse_M(cfg) -> int:
    return cfgmod.resolved(cfg, "ldp.M", 60 if cfg["model"]["d"] == 2 else 40)


def _field(protocol):
    return lambda x: mean_field(protocol, x)


def _center(cfg, protocol) -> np.ndarray:
    c = cfg["qsd"]["center"]
    d = protocol.d
    if c != cfgmod.AUTO:
        return np.asarray(c, dtype=float)
    eq = interior_equilibria(_field(protocol), d, _coarse_M(cfg))
    bary = np.full(d, 1.0 / d)
    if eq.size == 0:
        return bary
    return eq[np.argmin(np.linalg.norm(eq - bary, axis=1))]


def _x0(cfg, section) -> np.ndarray:
    v = cfg[section]["x0"]
    d = cfg["model"]["d"]
    if v != cfgmod.AUTO:
        return np.asarray(v, dtype=float)
    w = np.arange(1, d + 1, dtype=float)
    return w / w.sum()


def _print(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_grid(args, cfg):
    d = args.d if args.d is not None else (cfg["model"]["d"] if cfg else None)
    N = args.N if args.N is not None else (cfg["grid"]["N"] if cfg else None)
    if d is None or N is None:
        raise ConfigError(["grid: need --d and --N (or a config file)"])
    _print(f"states={n_points(d, N)} interior={n_interior_points(d, N)}")
    return 0


def cmd_validate(args, cfg):
    sys.stdout.write(cfgmod.dumps(cfg))
    return 0


def _solve(cfg, protocol, N, force):
    grid = enumerate_grid(protocol.d, N)
    kern = assemble(protocol, grid)
    sol = kernel_qsd(kern, cfg["qsd"]["tol"], cfg["qsd"]["max_iter"], force=force,
                     polish=cfg["qsd"]["polish"])
    return grid, kern, sol


def cmd_qsd(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    N = cfg["grid"]["N"]
    b = Bundle(cfg["output"]["directory"], "qsd", cfg)
    grid, kern, sol = _solve(cfg, protocol, N, args.force)
    center = _center(cfg, protocol)
    region = np.intersect1d(epsilon_neighborhood(grid, center, cfg["qsd"]["eps"]),
                            grid.interior_index)
    mass = qsd_mass_in(sol, region)
    counts = grid.counts[sol.ranks]
    b.csv("qsd.csv", ["rank"] + [f"n_{i + 1}" for i in range(grid.d)] + ["mu"],
          [[r, *c, m] for r, c, m in zip(sol.ranks, counts, sol.mu)])
    res = {"N": N, "rho": sol.rho, "one_minus_rho": sol.one_minus_rho, "theta": sol.theta,
           "expected_T0": sol.expected_T0, "residual": sol.residual,
           "iterations": sol.iterations, "gap_estimate": sol.gap_estimate,
           "center": center, "qsd_mass_eps": mass}
    b.finish(res)
    _print(f"N={N} rho={sol.rho:.17g} 1-rho={sol.one_minus_rho:.6e} "
           f"residual={sol.residual:.3e} iterations={sol.iterations} mass={mass:.4f}")
    return 0


def _run_sweep(cfg, protocol, force):
    center = _center(cfg, protocol)
    records, sols = sweep(protocol, cfg["grid"]["N_list"], center, cfg["qsd"]["eps"],
                          cfg["qsd"]["tol"], cfg["qsd"]["max_iter"], cfg["qsd"]["invariance_t"],
                          force, polish=cfg["qsd"]["polish"])
    return center, records, sols


def cmd_sweep(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    b = Bundle(cfg["output"]["directory"], "sweep", cfg)
    center, records, sols = _run_sweep(cfg, protocol, args.force)
    timing = cfg["output"]["timing"]
    rows = [[r.N, r.rho, r.one_minus_rho, r.theta, r.expected_T0, r.qsd_mass_eps, r.residual,
             r.iterations, f"{r.seconds:.6f}" if timing else "0"] for r in records]
    b.csv("sweep.csv", SWEEP_COLUMNS, rows)
    b.csv("concentration.csv", ["N", "qsd_mass_eps", "invariance_defect", "gap_estimate"],
          [[r.N, r.qsd_mass_eps, r.invariance_defect, r.gap_estimate] for r in records])
    for r, sol in zip(records, sols):
        grid = enumerate_grid(protocol.d, r.N)
        counts = grid.counts[sol.ranks]
        b.csv(f"qsd_N{r.N}.csv", ["rank"] + [f"n_{i + 1}" for i in range(grid.d)] + ["mu"],
              [[k, *c, m] for k, c, m in zip(sol.ranks, counts, sol.mu)])
    res = {"center": center, "records": [
        {k: getattr(r, k) for k in ("N", "rho", "one_minus_rho", "theta", "expected_T0",
                                     "qsd_mass_eps", "residual", "iterations", "gap_estimate",
                                     "invariance_defect")} for r in records]}
    if len(records) >= 3:
        fit = decay_fit([(r.N, r.one_minus_rho) for r in records])
        res["fit"] = {"gamma_hat": fit.gamma_hat, "intercept": fit.intercept,
                      "r_squared": fit.r_squared}
    gaps = [r.one_minus_rho for r in records]
    res["strictly_decreasing"] = bool(all(a > c for a, c in zip(gaps, gaps[1:])))
    b.finish(res)
    for r in records:
        _print(f"N={r.N:5d} 1-rho={r.one_minus_rho:.6e} theta={r.theta:.6e} "
               f"mass={r.qsd_mass_eps:.4f} iterations={r.iterations}")
    if "fit" in res:
        _print(f"gamma_hat={res['fit']['gamma_hat']:.6f} R2={res['fit']['r_squared']:.6f}")
    return 0


def _attractor(cfg, protocol):
    d = protocol.d
    F = _field(protocol)
    M = _coarse_M(cfg)
    base = enumerate_grid(d, 5)
    seeds = np.vstack([base.points[base.interior_index], _x0(cfg, "flow")])
    fc = cfg["flow"]
    return find_attractor(F, seeds, M, fc["transient_T"], fc["window_T"], fc["checkpoint"])


def cmd_flow(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    b = Bundle(cfg["output"]["directory"], "flow", cfg)
    fc = cfg["flow"]
    tr = integrate(_field(protocol), _x0(cfg, "flow"), fc["T"], fc["h"])
    if "csv" in b.formats:
        tr.to_csv(b.path("trajectory.csv"))
    rep = _attractor(cfg, protocol)
    grid = enumerate_grid(protocol.d, rep.M)
    out = {"M": rep.M, "attractor_cells": rep.attractor_cells,
           "attractor_points": grid.points[rep.attractor_cells],
           "fundamental_neighborhood": rep.fundamental_neighborhood,
           "checkpoints": rep.checkpoints, "uniform_convergence_profile":
           rep.uniform_convergence_profile, "interior_flag": rep.interior_flag}
    b.json("attractor.json", out)
    b.finish({"terminal": tr.terminal, "M": rep.M, "attractor_cells": rep.attractor_cells,
              "interior_flag": rep.interior_flag,
              "fundamental_neighborhood_size": len(rep.fundamental_neighborhood)})
    _print(f"terminal={np.array2string(tr.terminal, precision=6)} "
           f"attractor_cells={rep.attractor_cells.tolist()} interior={rep.interior_flag}")
    return 0


def cmd_simulate(args, cfg):
    from .flow import deviation_statistic

    protocol = cfgmod.build_protocol(cfg)
    sc = cfg["sim"]
    b = Bundle(cfg["output"]["directory"], "simulate", cfg)
    threads = thread_count(args.threads)
    x0 = _x0(cfg, "sim")
    dev_rows, dev_res = [], []
    for k, N in enumerate(sc["N_list"]):
        grid = enumerate_grid(protocol.d, N)
        kern = assemble(protocol, grid)
        r0 = int(grid.rank_many(nearest_counts(x0[None, :], N))[0])
        ds = deviation_statistic(kern, r0, sc["T"], sc["n_samples"], sc["seed"] + 1000 * (k + 1),
                                 sc["eps"])
        dev_rows.extend([N, p, v] for p, v in enumerate(ds.samples))
        dev_res.append({"N": N, "median": float(np.median(ds.samples)),
                        "exceedance": ds.exceedance})
    b.csv("deviation.csv", ["N", "path", "D"], dev_rows)
    res = {"deviation": dev_res, "threads_independent": True}
    if protocol.interior_noisy or args.force:
        grid, kern, sol = _solve(cfg, protocol, cfg["grid"]["N"], args.force)
        hs = absorption_time_samples(kern, sol.mu, sc["n_samples"], sc["seed"], sc["step_cap"],
                                     threads=threads)
        b.csv("absorption.csv", ["sample", "steps", "censored"],
              [[k, int(t), int(c)] for k, (t, c) in enumerate(zip(hs.times, hs.censored))])
        res["absorption"] = {"N": cfg["grid"]["N"], "mean": hs.mean(), "stderr": hs.stderr(),
                             "expected_T0": sol.expected_T0,
                             "censored": int(hs.censored.sum()),
                             "survival_5": hs.survival(5), "rho_5": sol.rho ** 5}
    b.finish(res)
    for r in dev_res:
        _print(f"N={r['N']} median D={r['median']:.5f} exceedance={r['exceedance']}")
    if "absorption" in res:
        a = res["absorption"]
        _print(f"absorption N={a['N']}: mean={a['mean']:.6g} +- {a['stderr']:.3g} "
               f"(1/(1-rho)={a['expected_T0']:.6g})")
    return 0


def _l_atlas(cfg, protocol, M=None):
    lc = cfg["ldp"]
    M = M or _coarse_M(cfg)
    rf = RateFunctional(protocol)
    margin = cfgmod.resolved(cfg, "ldp.alpha_margin", None)
    graph = build_cost_graph(rf, M, tuple(lc["tau_bounds"]), margin)
    eps = cfgmod.resolved(cfg, "ldp.eps_class", None)
    return rf, graph, l_classes(graph, eps, rf)


def _ap_atlas(cfg, protocol):
    rc = cfg["recurrence"]
    M = _coarse_M(cfg)
    delta = cfgmod.resolved(cfg, "recurrence.delta", None)
    return ap_classes(ap_graph(_field(protocol), protocol.d, M, delta, rc["T"], rc["T_max"]))


def cmd_ldp(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    b = Bundle(cfg["output"]["directory"], "ldp", cfg)
    rf, graph, atlas = _l_atlas(cfg, protocol)
    if "csv" in b.formats:
        graph.to_csv(b.path("cost_graph.csv"))
    b.json("atlas_L.json", atlas.to_dict())
    grid = graph.grid
    edge_cells = np.flatnonzero(graph.nodes & (grid.counts.min(axis=1) == 1))
    rows = []
    for a, ca in enumerate(atlas.classes):
        for c, cc in enumerate(atlas.classes):
            if a != c:
                rows.append([a, c, quasipotential(graph, ca, cc)])
        if edge_cells.size:
            rows.append([a, "boundary_adjacent", quasipotential(graph, ca, edge_cells)])
    b.csv("quasipotential.csv", ["from_class", "to", "B"], rows)
    res = {"M": grid.N, "eps_class": atlas.parameters["eps_class"],
           "n_classes": len(atlas.classes), "quasi_attractors": atlas.quasi_attractor_flags,
           "n_edges": len(graph.src)}
    if cfg["ldp"]["refine"]:
        _, _, fine = _l_atlas(cfg, protocol, 2 * grid.N)
        res["refined"] = {"M": 2 * grid.N, "n_classes": len(fine.classes),
                          "agrees": len(fine.classes) == len(atlas.classes)}
    b.finish(res)
    _print(f"M={grid.N} edges={len(graph.src)} eps_class={res['eps_class']:.3e} "
           f"classes={len(atlas.classes)} quasi_attractors={sum(atlas.quasi_attractor_flags)}")
    return 0


def cmd_apchains(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    b = Bundle(cfg["output"]["directory"], "apchains", cfg)
    atlas = _ap_atlas(cfg, protocol)
    b.json("atlas_AP.json", atlas.to_dict())
    b.finish({"M": atlas.M, "n_classes": len(atlas.classes),
              "quasi_attractors": atlas.quasi_attractor_flags, "parameters": atlas.parameters})
    _print(f"M={atlas.M} classes={len(atlas.classes)} "
           f"quasi_attractors={sum(atlas.quasi_attractor_flags)}")
    return 0


def cmd_compare(args, cfg):
    protocol = cfgmod.build_protocol(cfg)
    b = Bundle(cfg["output"]["directory"], "compare", cfg)
    _, graph, atlas_l = _l_atlas(cfg, protocol)
    atlas_ap = _ap_atlas(cfg, protocol)
    rep = compare_atlases(atlas_l, atlas_ap, graph.alpha_margin)
    b.json("atlas_L.json", atlas_l.to_dict())
    b.json("atlas_AP.json", atlas_ap.to_dict())
    b.json("compare.json", rep.to_dict())
    b.finish(rep.to_dict())
    _print(f"classes L/AP={rep.n_classes} quasi-attractors L/AP={rep.n_quasi_attractors} "
           f"hausdorff={rep.quasi_attractor_hausdorff_cells:.3f} cells "
           f"flags_agree={rep.flags_agree}")
    return 0


def _class_labels(atlas, n):
    lab = np.full(n, -1)
    for k, c in enumerate(atlas.classes):
        lab[c] = k
    return lab


def cmd_report(args, cfg):
    from . import svg

    protocol = cfgmod.build_protocol(cfg)
    d = protocol.d
    b = Bundle(cfg["output"]["directory"], "report", cfg)
    center, records, sols = _run_sweep(cfg, protocol, args.force)
    Ns = np.array([r.N for r in records])
    gap = np.array([r.one_minus_rho for r in records])
    if (p := b.svg("decay.svg")) is not None:
        svg.line_plot(p, Ns, {"log(1 - rho_N)": np.log(gap),
                              "log(1 - rho_N) + log N": np.log(gap) + np.log(Ns)},
                      "Absorption rate against population size", "N", "log scale")
    grid = enumerate_grid(d, int(Ns[-1]))
    sol = sols[-1]
    near = np.intersect1d(epsilon_neighborhood(grid, center, cfg["qsd"]["eps"]), sol.ranks)
    hl = np.flatnonzero(np.isin(sol.ranks, near))
    if (p := b.svg("qsd.svg")) is not None:
        if d == 2:
            svg.bar_plot(p, grid.points[sol.ranks, 0], sol.mu, f"QSD at N={Ns[-1]}", "x1",
                         "mass", highlight=hl)
        else:
            svg.ternary_heatmap(p, grid.points[sol.ranks][:, :3], sol.mu, grid.N,
                                f"QSD at N={Ns[-1]}", highlight=hl)
    rep = _attractor(cfg, protocol)
    cells = enumerate_grid(d, rep.M)
    if (p := b.svg("phase.svg")) is not None and d in (2, 3):
        svg.phase_portrait(p, _field(protocol), d, cells.points[rep.attractor_cells],
                           "Mean-field flow and attractor cells")
    _, _, atlas_l = _l_atlas(cfg, protocol)
    atlas_ap = _ap_atlas(cfg, protocol)
    for name, atlas in (("classes_L.svg", atlas_l), ("classes_AP.svg", atlas_ap)):
        if (p := b.svg(name)) is not None and d in (2, 3):
            svg.class_map(p, cells.points, _class_labels(atlas, cells.n_points),
                          f"{atlas.flavor} classes (M={atlas.M})", d)
    b.finish({"N_list": Ns, "plots": sorted(f for f in b.files if f.endswith(".svg"))})
    _print("wrote " + ", ".join(sorted(set(b.files))))
    return 0


COMMANDS = {
    "grid": cmd_grid, "validate": cmd_validate, "qsd": cmd_qsd, "sweep": cmd_sweep,
    "flow": cmd_flow, "simulate": cmd_simulate, "ldp": cmd_ldp, "apchains": cmd_apchains,
    "compare": cmd_compare, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsdlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qsdlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", help="TOML experiment file")
        s.add_argument("--N", type=int, help="population size (overrides grid.N)")
        s.add_argument("--d", type=int, help="number of strategies (grid only)")
        s.add_argument("--seed", type=int, help="overrides sim.seed")
        s.add_argument("--out", help="output directory (overrides output.directory)")
        s.add_argument("--threads", type=int,
                       help="worker threads for sampling (default: $QSDLAB_THREADS or 1)")
        s.add_argument("--force", action="store_true",
                       help="allow QSD solves for protocols whose rates vanish in the interior")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        if args.config:
            cfg = cfgmod.load(args.config)
            cfg = cfgmod.apply_overrides(cfg, args.N, args.seed, args.out)
        elif args.command != "grid":
            raise ConfigError([f"{args.command}: -c/--config is required"])
        if args.threads is not None and args.threads < 1:
            raise ConfigError(["--threads must be at least 1"])
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except UnsupportedProtocol as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QsdlabError as exc:
        out = Path(cfg["output"]["directory"]) if cfg else Path(".")
        out.mkdir(parents=True, exist_ok=True)
        diag = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if getattr(exc, "residual", None) is not None:
            diag["residual"] = exc.residual
        with open(out / "diagnostic.json", "w") as fh:
            fh.write(json.dumps(_num(diag), indent=2, sort_keys=True) + "\n")
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
