"""Experiment pipelines behind the CLI subcommands.

Each pipeline is a pure function of its config (given the spawned seed
list) and writes CSV/JSON/SVG outputs plus a manifest when an output
directory is supplied. The validate pipeline runs the per-sample inequality
suite and the envelope property suite at the acceptance scales and encodes
failures in its report and exit status.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import rng
from ..effective import (
    FbarTable,
    build_fbar_table,
    corrector_decay,
    estimate_fbar,
    solve_homogenized_sampled,
)
from ..envelope import (
    convex_envelope_slice,
    monotone_envelope,
    subdiff_measure_contact,
    subdiff_measure_fiber,
)
from ..environment import (
    Environment,
    boundedness_audit,
    ellipticity_audit,
)
from ..lattice import CubeIndex, Field, GridSpec, grid_for_box, grid_for_cube, steps_per_unit
from ..mu import (
    check_abp,
    check_bounds,
    check_lipschitz_ell,
    check_subadditivity,
    check_variance_decay,
    estimate_mu,
    estimate_mu_star,
    mc_moments,
    ptf_constant,
    stats_from_pairs,
)
from ..solver import SolveRequest, solve_sampled
from .config import ExperimentConfig
from .rates import fit_rate
from .report import write_csv, write_json, write_manifest
from .svg import loglog_plot


def _say(ok: bool, name: str, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def _stats_row(s) -> dict:
    return {"level": s.level, "ell": s.ell, "N": s.n,
            "E": s.E, "E_ci": s.E_ci, "J": s.J, "J_ci": s.J_ci,
            "E_star": s.E_star, "E_star_ci": s.E_star_ci,
            "J_star": s.J_star, "J_star_ci": s.J_star_ci}


STATS_HEADER = ["level", "ell", "N", "E", "E_ci", "J", "J_ci",
                "E_star", "E_star_ci", "J_star", "J_star_ci"]
SAMPLES_HEADER = ["level", "anchor", "ell", "M", "seed", "starred", "method",
                  "refinement", "value"]


# ----------------------------------------------------------------- validate


def _quadratic_field(b: float, m: float, r: int) -> Field:
    grid = GridSpec(dimension=1, dx=1.0 / r, dt=1.0 / r, shape=(r + 1,),
                    steps=r, origin=(-0.5,), t0=0.0)
    return Field.from_function(grid, lambda x, t: -b * t + 0.5 * m * x * x)


def _affine_minorant_envelope_1d(v: np.ndarray) -> np.ndarray:
    """Brute-force oracle: max over planes through node pairs that minorize
    all nodes. O(n^3); validation-scale only."""
    n = len(v)
    x = np.arange(n, dtype=float)
    env = np.full(n, -np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            p = (v[j] - v[i]) / (x[j] - x[i])
            h = np.min(v - p * x)
            env = np.maximum(env, p * x + h)
    return env


def _check_envelope_suite(env: Environment, seeds) -> dict:
    from ..solver import solve_dirichlet
    r = 9
    issues = []
    # exact case: u = -|x| on [-1, 1], constant in time; envelope is the chord -1
    grid = GridSpec(dimension=1, dx=1.0 / r, dt=1.0 / r, shape=(2 * r + 1,),
                    steps=r, origin=(-1.0,), t0=0.0)
    f = Field.from_function(grid, lambda x, t: -np.abs(x) + 0.0 * t)
    res = monotone_envelope(f)
    if np.max(np.abs(res.gamma.values - (-1.0))) > 1e-10:
        issues.append("-|x| envelope is not the constant -1")
    # double well against the brute-force affine-minorant oracle
    xs = np.linspace(-1.5, 1.5, 121)
    vals = xs ** 4 - xs ** 2
    oracle = _affine_minorant_envelope_1d(vals)
    got = convex_envelope_slice(vals)
    if np.max(np.abs(oracle - got)) > 1e-8:
        issues.append("double-well envelope disagrees with the affine-minorant oracle")
    # structural invariants on random solver outputs
    for s in seeds[:5]:
        cube = CubeIndex(1, (0,), 0)
        g = grid_for_cube(cube, r, env.spec.Lam)
        sol = solve_dirichlet(SolveRequest(env=env.with_seed(int(s)), M=np.zeros(1),
                                           ell=-0.5, grid=g))
        er = monotone_envelope(sol.field)
        G = er.gamma.values
        scale = 1.0 + float(np.max(np.abs(sol.field.values)))
        if np.max(G - sol.field.values) > 1e-12 * scale:
            issues.append(f"gamma above u for seed {s}")
        if np.max(G[1:] - G[:-1]) > 1e-10 * scale:
            issues.append(f"gamma increases in time for seed {s}")
        sec = G[:, :-2] - 2.0 * G[:, 1:-1] + G[:, 2:]
        if np.min(sec) < -1e-10 * scale:
            issues.append(f"gamma slice not convex for seed {s}")
        again = monotone_envelope(er.gamma)
        if np.max(np.abs(again.gamma.values - G)) > 1e-12 * scale:
            issues.append(f"envelope not idempotent for seed {s}")
    return {"ok": not issues, "issues": issues}


def _check_density(r: int = 60) -> dict:
    cases = [(1.0, 1.0), (2.0, 2.0), (0.5, 3.0)]
    rows = []
    ok = True
    for b, m in cases:
        f = _quadratic_field(b, m, r)
        fib = subdiff_measure_fiber(f).value
        cont = subdiff_measure_contact(monotone_envelope(f)).value
        target = b * m
        fib_err = abs(fib - target) / target
        cont_err = abs(cont - target) / target
        ok = ok and fib_err <= 0.02 and cont_err <= 0.03
        rows.append({"b": b, "m": m, "target": target, "fiber": fib,
                     "contact": cont, "fiber_err": fib_err, "contact_err": cont_err})
    return {"ok": ok, "cases": rows}


def _check_measure_equality(env: Environment, seeds, n_fields: int) -> dict:
    from ..solver import solve_dirichlet
    mismatches = 0
    for s in seeds[:n_fields]:
        cube = CubeIndex(1, (0,), 0)
        g = grid_for_cube(cube, 9, env.spec.Lam)
        sol = solve_dirichlet(SolveRequest(env=env.with_seed(int(s)), M=np.zeros(1),
                                           ell=-0.5, grid=g))
        m1, g1, p1 = subdiff_measure_fiber(sol.field, return_g=True)
        er = monotone_envelope(sol.field)
        m2, g2, p2 = subdiff_measure_fiber(er.gamma, return_g=True)
        # compare g sequences on the common slope range (the outer fibers are 0)
        k1 = (len(p1) - len(p2)) // 2 if len(p1) >= len(p2) else 0
        k2 = (len(p2) - len(p1)) // 2 if len(p2) > len(p1) else 0
        gg1 = g1[k1: len(g1) - k1] if k1 else g1
        gg2 = g2[k2: len(g2) - k2] if k2 else g2
        if m1.value != m2.value or gg1.shape != gg2.shape or not np.array_equal(gg1, gg2):
            mismatches += 1
    return {"ok": mismatches == 0, "fields": min(n_fields, len(seeds)),
            "mismatches": mismatches}


def _check_abp_sweep(cfg: ExperimentConfig, seeds, n_samples: int) -> dict:
    worst = 0.0
    bad = 0
    d = cfg.environment.dimension
    bound = ptf_constant(d)
    for i in range(n_samples):
        s = int(seeds[i % len(seeds)]) + i
        level = [0, 1][i % 2]
        env = Environment(replace(cfg.environment, seed=s))
        cube = CubeIndex(level, (0,) * d, 0)
        ell = cfg.ell_grid[i % len(cfg.ell_grid)]
        sample, red = estimate_mu(env, cube, ell, list(cfg.M), cfg.refinement,
                                  return_solution=True)
        rep = check_abp(red, sample)
        worst = max(worst, 0.0 if math.isinf(rep["ratio"]) else rep["ratio"])
        if rep["ratio"] > bound * (1 + cfg.slack_abp):
            bad += 1
    return {"ok": bad == 0, "violations": bad, "max_ratio": worst,
            "bound": bound, "samples": n_samples}


def _check_bounds_sweep(cfg: ExperimentConfig, seeds, n_samples: int) -> dict:
    bad = 0
    d = cfg.environment.dimension
    for i in range(n_samples):
        s = int(seeds[i % len(seeds)]) + 7919 * i
        level = [0, 1][i % 2]
        env = Environment(replace(cfg.environment, seed=s))
        cube = CubeIndex(level, (0,) * d, 0)
        ell = cfg.ell_grid[i % len(cfg.ell_grid)]
        mvals = [cfg.m_grid[i % len(cfg.m_grid)]] * d
        sample = (estimate_mu if i % 3 else estimate_mu_star)(
            env, cube, ell, mvals, cfg.refinement)
        rep = check_bounds(env, cube, ell, mvals, sample, slack=cfg.slack_bounds)
        if not rep["ok"]:
            bad += 1
    return {"ok": bad == 0, "violations": bad, "samples": n_samples}


def _check_subadd_sweep(cfg: ExperimentConfig, seeds, n_samples: int) -> dict:
    bad = 0
    d = cfg.environment.dimension
    for i in range(n_samples):
        s = int(seeds[i % len(seeds)]) + 104729 * i
        env = Environment(replace(cfg.environment, seed=s))
        cube = CubeIndex([1, 2][i % 2], (0,) * d, 0)
        ell = cfg.ell_grid[i % len(cfg.ell_grid)]
        rep = check_subadditivity(env, cube, ell, list(cfg.M), cfg.refinement,
                                  slack=cfg.slack_subadd)
        if not rep["ok"]:
            bad += 1
    return {"ok": bad == 0, "violations": bad, "samples": n_samples}


def _check_audits(env: Environment, trials: int) -> dict:
    ell_rep = ellipticity_audit(env, trials=trials, seed=7)
    bnd_rep = boundedness_audit(env, trials=trials, seed=11)
    gen = np.random.default_rng(13)
    d = env.spec.dimension
    star2 = env.involute().involute()
    inv_ok = True
    for _ in range(1000):
        B = gen.uniform(-3, 3, size=(d, d))
        M = 0.5 * (B + B.T)
        x = gen.uniform(-5, 5, size=d)
        t = gen.uniform(-5, 5)
        if env.evaluate_F(M, x, t) != star2.evaluate_F(M, x, t):
            inv_ok = False
            break
        lhs = env.involute().evaluate_F(M, x, t)
        rhs = -env.evaluate_F(-M, x, t)
        if abs(lhs - rhs) > 1e-12 * (1 + abs(rhs)):
            inv_ok = False
            break
    return {"ok": ell_rep["violations"] == 0 and bnd_rep["ok"] and inv_ok,
            "ellipticity": ell_rep, "boundedness": bnd_rep,
            "involution_ok": inv_ok}


def _check_determinism(cfg: ExperimentConfig) -> dict:
    env = Environment(cfg.environment)
    d = env.spec.dimension
    cube = CubeIndex(1, (0,) * d, 0)
    a = estimate_mu(env, cube, 0.0, list(cfg.M), cfg.refinement)
    b = estimate_mu(env, cube, 0.0, list(cfg.M), cfg.refinement)
    s1 = mc_moments(cfg.environment, 0, 0.0, list(cfg.M), 8, cfg.refinement, n_jobs=1)
    s2 = mc_moments(cfg.environment, 0, 0.0, list(cfg.M), 8, cfg.refinement, n_jobs=2)
    ok = a.value == b.value and s1.values == s2.values and s1.E == s2.E
    return {"ok": ok, "value": a.value}


def run_validate(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    env = Environment(cfg.environment)
    seeds = rng.spawn_seeds(cfg.environment.seed, max(cfg.seeds, cfg.vardecay_samples))
    checks = {}
    checks["envelope_suite"] = _check_envelope_suite(env, seeds)
    _say(checks["envelope_suite"]["ok"], "envelope suite",
         f"issues={checks['envelope_suite']['issues']}")
    checks["density_exactness"] = _check_density()
    _say(checks["density_exactness"]["ok"], "Monge-Ampere density",
         "; ".join(f"b={c['b']} m={c['m']} fiber_err={c['fiber_err']:.4f} "
                   f"contact_err={c['contact_err']:.4f}"
                   for c in checks["density_exactness"]["cases"]))
    checks["measure_equality"] = _check_measure_equality(env, seeds, cfg.equality_fields)
    _say(checks["measure_equality"]["ok"], "measure equality (envelope)",
         f"mismatches={checks['measure_equality']['mismatches']}")
    checks["abp"] = _check_abp_sweep(cfg, seeds, cfg.abp_samples)
    _say(checks["abp"]["ok"], "ABP inequality",
         f"max_ratio={checks['abp']['max_ratio']:.4f} bound={checks['abp']['bound']:.4f}")
    checks["bounds"] = _check_bounds_sweep(cfg, seeds, cfg.bounds_samples)
    _say(checks["bounds"]["ok"], "universal bounds",
         f"violations={checks['bounds']['violations']}/{checks['bounds']['samples']}")
    checks["subadditivity"] = _check_subadd_sweep(cfg, seeds, cfg.subadd_samples)
    _say(checks["subadditivity"]["ok"], "subadditivity",
         f"violations={checks['subadditivity']['violations']}"
         f"/{checks['subadditivity']['samples']}")
    lip = check_lipschitz_ell(cfg.environment, 1, list(cfg.M), cfg.ell_grid,
                              cfg.lipschitz_samples, cfg.refinement,
                              n_jobs=cfg.threads)
    checks["lipschitz_ell"] = {"ok": lip["monotone_ok"], "E": lip["E"],
                               "lipschitz_C": lip["lipschitz_C"]}
    _say(lip["monotone_ok"], "monotone/Lipschitz in ell",
         f"E={['%.5f' % v for v in lip['E']]} C={lip['lipschitz_C']:.4f}")
    stats0 = mc_moments(cfg.environment, 0, 0.0, list(cfg.M), cfg.vardecay_samples,
                        cfg.refinement, n_jobs=cfg.threads)
    vd = {}
    vd_ok = True
    for n in (1, 2):
        stats_n = mc_moments(cfg.environment, n, 0.0, list(cfg.M),
                             cfg.vardecay_samples, cfg.refinement,
                             n_jobs=cfg.threads)
        rep = check_variance_decay(stats0, stats_n, cfg.environment.dimension)
        vd[f"(0,{n})"] = rep
        vd_ok = vd_ok and rep["ok"]
    checks["variance_decay"] = {"ok": vd_ok,
                                "detail": {k: v["ok"] for k, v in vd.items()}}
    _say(vd_ok, "variance decay", f"{checks['variance_decay']['detail']}")
    checks["audits"] = _check_audits(env, cfg.audit_trials)
    _say(checks["audits"]["ok"], "environment audits",
         f"ellipticity violations={checks['audits']['ellipticity']['violations']}, "
         f"|F(0)| max={checks['audits']['boundedness']['max_abs_F0']:.4f}")
    checks["determinism"] = _check_determinism(cfg)
    _say(checks["determinism"]["ok"], "determinism", "reruns byte-identical")

    ok = all(c["ok"] for c in checks.values())
    report = {"ok": ok, "checks": checks}
    if out_dir is not None:
        write_json(Path(out_dir) / "report.json", report)
        write_manifest(out_dir, cfg, seeds)
    _say(ok, "validate", "all checks passed" if ok else "failures present")
    return report


# -------------------------------------------------------------- estimate-mu


def run_estimate_mu(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    d = cfg.environment.dimension
    seeds = rng.spawn_seeds(cfg.environment.seed, cfg.seeds)
    sample_rows = []
    stats_rows = []
    stats_all = []
    for level in cfg.levels:
        cube = CubeIndex(level, (0,) * d, 0)
        for ell in cfg.ell_grid:
            vals, vals_star = [], []
            for s in seeds:
                env = Environment(replace(cfg.environment, seed=int(s)))
                smp = estimate_mu(env, cube, ell, list(cfg.M), cfg.refinement)
                smp_star = estimate_mu_star(env, cube, ell, list(cfg.M), cfg.refinement)
                vals.append(smp.value)
                vals_star.append(smp_star.value)
                sample_rows.append(smp.as_row())
                sample_rows.append(smp_star.as_row())
            st = stats_from_pairs(level, ell, list(cfg.M), vals, vals_star)
            stats_all.append(st)
            stats_rows.append(_stats_row(st))
            print(f"level {level} ell {ell}: E={st.E:.6f}+-{st.E_ci:.6f} "
                  f"E*={st.E_star:.6f}+-{st.E_star_ci:.6f}")
    if out_dir is not None:
        write_csv(Path(out_dir) / "samples.csv", SAMPLES_HEADER, sample_rows)
        write_csv(Path(out_dir) / "stats.csv", STATS_HEADER, stats_rows)
        write_manifest(out_dir, cfg, seeds)
    return {"ok": True, "stats": [_stats_row(s) for s in stats_all]}


# -------------------------------------------------------------- effective-f


def fbar_csv_rows(table: FbarTable):
    rows = []
    if table.dimension == 1:
        for i, m in enumerate(table.ms[0]):
            rows.append({"m": float(m), "fbar": float(table.values[i]),
                         "ci": float(table.cis[i]),
                         "repaired": table.repaired,
                         "bias_gap": float(table.bias_gap[i])
                         if table.bias_gap is not None else 0.0})
        return ["m", "fbar", "ci", "repaired", "bias_gap"], rows
    for i, m1 in enumerate(table.ms[0]):
        for j, m2 in enumerate(table.ms[1]):
            rows.append({"m1": float(m1), "m2": float(m2),
                         "fbar": float(table.values[i, j]),
                         "ci": float(table.cis[i, j]), "repaired": table.repaired})
    return ["m1", "m2", "fbar", "ci", "repaired"], rows


def load_fbar_csv(path) -> FbarTable:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    if "m" in header:
        ms = np.array([float(r["m"]) for r in rows])
        vals = np.array([float(r["fbar"]) for r in rows])
        cis = np.array([float(r["ci"]) for r in rows])
        rep = any(r["repaired"] == "1" for r in rows)
        return FbarTable(dimension=1, ms=(ms,), values=vals, cis=cis,
                         repaired=rep, level=-1)
    ax1 = np.array(sorted({float(r["m1"]) for r in rows}))
    ax2 = np.array(sorted({float(r["m2"]) for r in rows}))
    vals = np.zeros((len(ax1), len(ax2)))
    cis = np.zeros_like(vals)
    for r in rows:
        i = int(np.searchsorted(ax1, float(r["m1"])))
        j = int(np.searchsorted(ax2, float(r["m2"])))
        vals[i, j] = float(r["fbar"])
        cis[i, j] = float(r["ci"])
    rep = any(r["repaired"] == "1" for r in rows)
    return FbarTable(dimension=2, ms=(ax1, ax2), values=vals, cis=cis,
                     repaired=rep, level=-1)


def run_effective_f(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    if cfg.environment.dimension == 1:
        grid = list(cfg.m_grid)
    else:
        grid = (list(cfg.m_grid), list(cfg.m_grid))
    table = build_fbar_table(cfg.environment, grid, cfg.fbar_level, cfg.fbar_seeds,
                             cfg.fbar_tol, refinement=cfg.refinement,
                             n_jobs=cfg.threads, bias_gap=cfg.environment.dimension == 1)
    header, rows = fbar_csv_rows(table)
    ok = table.ellipticity_ok(cfg.environment.lam, cfg.environment.Lam,
                              cfg.fbar_tol)
    for r in rows:
        print("  " + " ".join(f"{k}={r[k]}" for k in header))
    _say(ok, "effective operator table",
         f"repaired={table.repaired} slope_max={table.slope_max:.4f}")
    if out_dir is not None:
        write_csv(Path(out_dir) / "fbar.csv", header, rows)
        write_manifest(out_dir, cfg, rng.spawn_seeds(cfg.environment.seed, cfg.fbar_seeds))
    return {"ok": ok, "repaired": table.repaired, "rows": rows, "table": table}


# ---------------------------------------------------------- corrector-decay


def run_corrector_decay(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    est = estimate_fbar(cfg.environment, list(cfg.M), cfg.fbar_level, cfg.fbar_seeds,
                        cfg.fbar_tol, refinement=cfg.refinement, n_jobs=cfg.threads)
    run = corrector_decay(cfg.environment, list(cfg.M), cfg.levels, cfg.seeds,
                          est.ell_bar, refinement=cfg.refinement, n_jobs=cfg.threads)
    neg = corrector_decay(cfg.environment, list(cfg.M), (cfg.levels[0], cfg.levels[-1]),
                          cfg.seeds, est.ell_bar, refinement=cfg.refinement,
                          n_jobs=cfg.threads, rhs_offset=cfg.corrector_offset)
    decay_ok = run.mean_norms[-1] < run.mean_norms[0]
    neg_ok = neg.mean_norms[-1] >= 0.5 * neg.mean_norms[0]
    rows = []
    for lvl, mn, mx in zip(run.levels, run.mean_norms, run.max_norms):
        rows.append({"kind": "corrector", "x": 3.0 ** lvl, "y": mn, "y_max": mx})
        print(f"level {lvl}: 9^-n sup|w| mean={mn:.6f} max={mx:.6f}")
    for lvl, mn, mx in zip(neg.levels, neg.mean_norms, neg.max_norms):
        rows.append({"kind": "corrector-negative", "x": 3.0 ** lvl, "y": mn, "y_max": mx})
    _say(decay_ok, "corrector decay",
         f"mean at n={run.levels[-1]} is {run.mean_norms[-1]:.6f} vs "
         f"{run.mean_norms[0]:.6f} at n={run.levels[0]}")
    _say(neg_ok, "corrector negative control",
         f"offset {cfg.corrector_offset}: norms {neg.mean_norms}")
    report = {"ok": decay_ok and neg_ok, "ell_bar": est.ell_bar,
              "levels": list(run.levels), "mean_norms": list(run.mean_norms),
              "max_norms": list(run.max_norms),
              "negative_mean_norms": list(neg.mean_norms)}
    if out_dir is not None:
        write_csv(Path(out_dir) / "rates.csv", ["kind", "x", "y", "y_max"], rows)
        write_json(Path(out_dir) / "report.json", report)
        if min(run.mean_norms) > 0:
            loglog_plot(Path(out_dir) / "corrector_decay.svg",
                        [3.0 ** l for l in run.levels], run.mean_norms,
                        title="corrector decay", xlabel="3^n", ylabel="9^-n sup|w|")
        write_manifest(out_dir, cfg, rng.spawn_seeds(cfg.environment.seed, cfg.seeds))
    return report


# -------------------------------------------------------------- homog-rate


def _macro_boundary(kind: str, d: int):
    if kind == "quadratic":
        if d == 1:
            return lambda x, t: 0.5 * x * x
        return lambda x, y, t: 0.5 * (x * x + y * y)
    if d == 1:
        return lambda x, t: np.abs(x)
    return lambda x, y, t: np.abs(x)


def _micro_error(spec, seed, d, micro_grid, boundary_kind, k, keep, hom) -> float:
    eps = 3.0 ** (-k)
    g = _macro_boundary(boundary_kind, d)

    def g_micro(*args):
        xs = [eps * a for a in args[:-1]]
        return g(*xs, args[-1]) / (eps * eps)

    env = Environment(replace(spec, seed=int(seed)))
    _, micro = solve_sampled(
        SolveRequest(env=env, M=np.zeros(d), ell=0.0, grid=micro_grid,
                     boundary=g_micro), keep)
    return float(np.max(np.abs(eps * eps * micro - hom)))


def _homog_error_for_eps(cfg: ExperimentConfig, table: FbarTable, k: int,
                         refinement: int, seeds) -> tuple[float, float]:
    """Mean and spread over seeds of sup |u_eps - u| on shared nodes at the
    comparison times j/9, j = 1..9."""
    d = cfg.environment.dimension
    g = _macro_boundary(cfg.boundary, d)

    side = 3 ** k
    micro_grid = grid_for_box([0.0] * d, [side] * d, 0.0, side * side,
                              refinement, cfg.environment.Lam, d)
    spu_micro = round(1.0 / micro_grid.dt)
    keep = [j * 9 ** (k - 1) * spu_micro for j in range(1, 10)]

    # macro grid shares nodes with the scaled micro grid; its time step obeys
    # the CFL bound of the table slopes and lands on the comparison times
    lam_eff = max(cfg.environment.Lam, table.slope_max)
    r_macro = refinement * 3 ** k
    spu_macro = steps_per_unit(r_macro, lam_eff, d, align=9)
    macro_grid = GridSpec(dimension=d, dx=1.0 / r_macro, dt=1.0 / spu_macro,
                          shape=micro_grid.shape, steps=spu_macro,
                          origin=(0.0,) * d, t0=0.0)
    keep_macro = [j * spu_macro // 9 for j in range(1, 10)]
    _, hom = solve_homogenized_sampled(table, macro_grid, g, keep_macro,
                                       lam_max=lam_eff)

    if cfg.threads == 1:
        errs = [_micro_error(cfg.environment, s, d, micro_grid, cfg.boundary,
                             k, keep, hom) for s in seeds]
    else:
        from joblib import Parallel, delayed
        errs = Parallel(n_jobs=cfg.threads)(
            delayed(_micro_error)(cfg.environment, s, d, micro_grid,
                                  cfg.boundary, k, keep, hom) for s in seeds)
    return float(np.mean(errs)), float(np.std(errs))


def run_homog_rate(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   table: Optional[FbarTable] = None) -> dict:
    if table is None:
        fbar_path = None if out_dir is None else Path(out_dir) / "fbar.csv"
        if fbar_path is not None and fbar_path.exists():
            table = load_fbar_csv(fbar_path)
        else:
            grid = list(cfg.m_grid) if cfg.environment.dimension == 1 \
                else (list(cfg.m_grid), list(cfg.m_grid))
            table = build_fbar_table(cfg.environment, grid, cfg.fbar_level,
                                     cfg.fbar_seeds, cfg.fbar_tol,
                                     refinement=cfg.refinement, n_jobs=cfg.threads)
    seeds = rng.spawn_seeds(cfg.environment.seed, cfg.seeds)
    eps = [3.0 ** (-k) for k in cfg.epsilons]
    means, spreads, audits = [], [], []
    for k in cfg.epsilons:
        m, sd = _homog_error_for_eps(cfg, table, k, cfg.refinement, seeds)
        means.append(m)
        spreads.append(sd)
        print(f"eps=3^-{k}: sup error mean={m:.6f} spread={sd:.6f}")
    zero_variance = all(sd == 0.0 for sd in spreads)
    audit_ok = True
    if cfg.dx_audit:
        for k, base in zip(cfg.epsilons, means):
            m2, _ = _homog_error_for_eps(cfg, table, k, 2 * cfg.refinement, seeds)
            drift = abs(m2 - base) / base if base > 0 else 0.0
            audits.append({"k": k, "coarse": base, "fine": m2, "drift": drift})
            audit_ok = audit_ok and drift < 0.20
            print(f"eps=3^-{k}: dx-halving drift {drift:.3f}")
    fit = None
    fit_ok = True
    if zero_variance:
        print("zero-variance environment: rate fit is meaningless, flagged")
    elif len(eps) < 3:
        print("fewer than 3 epsilon points: rate fit skipped")
    else:
        fit = fit_rate(list(zip(eps, means)))
        fit_ok = fit.exponent > 0 and fit.r2 >= 0.9
        _say(fit_ok, "homogenization rate",
             f"beta={fit.exponent:.4f} R2={fit.r2:.4f}")
    rows = [{"kind": "homog-rate", "x": e, "y": m, "spread": sd}
            for e, m, sd in zip(eps, means, spreads)]
    report = {"ok": fit_ok and audit_ok, "zero_variance": zero_variance,
              "eps": eps, "errors": means, "spreads": spreads,
              "beta": None if fit is None else fit.exponent,
              "r2": None if fit is None else fit.r2,
              "ci": None if fit is None else list(fit.ci),
              "dx_audit": audits, "dx_audit_ok": audit_ok}
    if out_dir is not None:
        write_csv(Path(out_dir) / "rates.csv", ["kind", "x", "y", "spread"], rows)
        write_json(Path(out_dir) / "report.json", report)
        if fit is not None:
            loglog_plot(Path(out_dir) / "homog_rate.svg", eps, means,
                        exponent=fit.exponent, intercept=fit.intercept,
                        title="homogenization error", xlabel="eps", ylabel="sup error")
        write_manifest(out_dir, cfg, seeds)
    return report


# ------------------------------------------------------------ moment-decay


def run_moment_decay(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    est = estimate_fbar(cfg.environment, list(cfg.M), cfg.fbar_level, cfg.fbar_seeds,
                        cfg.fbar_tol, refinement=cfg.refinement, n_jobs=cfg.threads)
    stats = []
    ys = []
    for m in cfg.levels:
        st = mc_moments(cfg.environment, m, est.ell_bar, list(cfg.M), cfg.seeds,
                        cfg.refinement, n_jobs=cfg.threads)
        stats.append(st)
        ys.append(st.J + st.J_star)
        print(f"m={m}: J+J* = {ys[-1]:.3e}")
    # bisection tolerance leaves a residual J of order (ell-residual * dp)^2
    # even in deterministic environments; genuine random J values sit many
    # orders above this
    degenerate = ys[0] <= 1e-10
    decreasing = all(ys[i + 1] < ys[i] for i in range(len(ys) - 1))
    tau_hat = None
    tau_ci = None
    fit_ok = True
    if degenerate:
        print("degenerate: moments vanish at ell_bar (deterministic environment)")
    else:
        ms = np.array(cfg.levels, dtype=float)
        ly = np.log(ys)
        slope = float(np.polyfit(ms, ly, 1)[0])
        pair = [(ly[j] - ly[i]) / (ms[j] - ms[i])
                for i in range(len(ms)) for j in range(i + 1, len(ms))]
        pair = np.sort(pair)
        med = float(np.median(pair))
        q1, q3 = np.percentile(pair, [25, 75])
        half = 1.57 * (q3 - q1) / math.sqrt(len(pair))
        tau_hat = math.exp(slope)
        tau_ci = (math.exp(med - half), math.exp(med + half))
        fit_ok = decreasing and tau_ci[1] < 1.0
        _say(fit_ok, "second-moment decay",
             f"tau_hat={tau_hat:.4f} ci=({tau_ci[0]:.4f},{tau_ci[1]:.4f}) "
             f"decreasing={decreasing}")
    rows = [{"kind": "moment-decay", "x": 3.0 ** m, "y": y}
            for m, y in zip(cfg.levels, ys)]
    report = {"ok": degenerate or fit_ok, "degenerate": degenerate,
              "ell_bar": est.ell_bar, "levels": list(cfg.levels), "J_sum": ys,
              "tau_hat": tau_hat, "tau_ci": None if tau_ci is None else list(tau_ci),
              "decreasing": decreasing}
    if out_dir is not None:
        write_csv(Path(out_dir) / "stats.csv", STATS_HEADER,
                  [_stats_row(s) for s in stats])
        write_csv(Path(out_dir) / "rates.csv", ["kind", "x", "y"], rows)
        write_json(Path(out_dir) / "report.json", report)
        if not degenerate and min(ys) > 0:
            loglog_plot(Path(out_dir) / "moment_decay.svg",
                        [3.0 ** m for m in cfg.levels], ys,
                        title="second-moment decay", xlabel="3^m", ylabel="J+J*")
        write_manifest(out_dir, cfg, rng.spawn_seeds(cfg.environment.seed, cfg.seeds))
    return report
