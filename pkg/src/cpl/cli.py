"""Command-line entry point.

Subcommands::

    cpl calibrate --data cal.csv --family abs_residual --basis intercept,eq:0:1 --out run/
    cpl evaluate  --rule run/rule.json --data test.csv --family abs_residual --out run/
    cpl bench toy|groups|discrete --n 50000 --alpha 0.1 --seed 7 --out bench/
    cpl oracle toy|groups --alpha 0.1

Exit codes: 0 success, 2 invalid input, 3 solver did not converge (outputs
are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import io
from .baselines import group_split_conformal, marginal_rule
from .data import AtLeast, Equals, ShiftBasis, SolverConfig
from .evaluation import Predicate, evaluate_rule, group_name
from .hypothesis import constant, linear, mlp1
from .scores import dataset_scores, family_from_dict
from .solver import CPLDivergenceError, run_cpl, split_conformal_level

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 2, 3

logger = logging.getLogger("cpl")

# tuned defaults per benchmark; command-line flags override them
BENCH_DEFAULTS = {
    "toy": dict(n=50_000, seed=7, sigma=0.05, step_h=0.05, step_beta=20.0, max_outer_iters=1000,
                sigma_start=0.5, anneal_frac=0.3),
    "groups": dict(n=20_000, seed=0, sigma=0.3, step_h=0.1, step_beta=20.0, max_outer_iters=1000,
                   sigma_start=3.0, anneal_frac=0.3, tol_grad=0.05),
    "discrete": dict(n=20, seed=0, sigma=0.01, step_h=0.005, step_beta=5.0, max_outer_iters=2000,
                     sigma_start=0.1, anneal_frac=0.5, tol_gap=1e-5, tol_grad=1e-3),
}
DISCRETE_SHAPES = ((3, 5, 2), (4, 5, 2), (3, 6, 2), (4, 4, 3), (4, 6, 3))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _solver_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", help="positive value or 'auto'")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--step-h", type=float, dest="step_h")
    p.add_argument("--step-beta", type=float, dest="step_beta")
    p.add_argument("--config", help="JSON file with solver settings (and optional family/basis/hypothesis)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpl", description="Length-optimised conformal calibration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="fit a rule on calibration data")
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=io.FAMILIES)
    p.add_argument("--basis", help="comma-separated basis elements (default: intercept)")
    p.add_argument("--hypothesis", help="constant | linear | linear:basis | mlp1[:width] (default linear:basis)")
    p.add_argument("--out", required=True)
    _solver_flags(p)

    p = sub.add_parser("evaluate", help="score a rule on a dataset")
    p.add_argument("--rule", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=io.FAMILIES)
    p.add_argument("--basis", help="gap directions and groups (default: the rule's basis)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="run a synthetic benchmark")
    p.add_argument("name", choices=sorted(BENCH_DEFAULTS))
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    _solver_flags(p)

    p = sub.add_parser("oracle", help="print an oracle solution")
    p.add_argument("name", choices=("toy", "groups"))
    p.add_argument("--alpha", type=float, default=0.1)
    return parser


# --------------------------------------------------------------- settings

def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise io.InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise io.InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise io.InputError(f"{path}: config must be a JSON object")
    return d


def _solver_config(args, base: dict) -> SolverConfig:
    fields = {f.name for f in dataclasses.fields(SolverConfig)}
    cfg = {k: v for k, v in base.items() if k in fields}
    unknown = set(base) - fields - {"family", "basis", "hypothesis", "n"}
    if unknown:
        raise io.InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for flag, key in (("alpha", "alpha"), ("seed", "seed"), ("max_iters", "max_outer_iters"),
                      ("step_h", "step_h"), ("step_beta", "step_beta")):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if getattr(args, "sigma", None) is not None:
        cfg["sigma"] = args.sigma if args.sigma == "auto" else float(args.sigma)
    try:
        return SolverConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise io.InputError(f"invalid solver config: {exc}") from None


def make_hypothesis(spec: str, n_features: int, basis: ShiftBasis, bias: float, seed: int, squash=None):
    """Initial hypothesis from ``constant``, ``linear``, ``linear:basis`` or ``mlp1[:width]``.

    ``linear`` and ``mlp1`` read the first ``n_features`` raw columns, so a
    rule stays usable on data without appended ``file:`` basis columns.
    """
    raw = ShiftBasis.parse([f"col:{j}" for j in range(n_features)])
    kind, _, arg = spec.partition(":")
    if kind == "constant" and not arg:
        return constant(bias, squash=squash)
    if kind == "linear" and not arg:
        return linear(n_features, bias, feature_map=raw, squash=squash)
    if kind == "linear" and arg == "basis":
        if basis.max_column >= n_features:
            raise io.InputError("linear:basis cannot use file: basis columns; use linear instead")
        return linear(basis.d, bias, feature_map=basis, squash=squash)
    if kind == "mlp1":
        try:
            width = int(arg) if arg else 16
        except ValueError:
            raise io.InputError(f"bad MLP width in {spec!r}") from None
        return mlp1(n_features, width, bias, seed=seed, feature_map=raw, squash=squash)
    raise io.InputError(f"unknown hypothesis spec {spec!r}")


def _groups_of(basis: ShiftBasis) -> list:
    return [e for e in basis.elements if isinstance(e, (Equals, AtLeast))]


def _diagnostics_dict(diag) -> dict:
    return {
        "converged": diag.converged,
        "iterations": diag.iterations,
        "best_iter": diag.best_iter,
        "sigma": diag.sigma,
        "final_gap": [float(v) for v in diag.final_gap] if diag.final_gap is not None else None,
        "grad_h_norm": diag.grad_h_norm,
        "grad_beta_norm": diag.grad_beta_norm,
        "beta": [float(v) for v in diag.beta] if diag.beta is not None else None,
        "message": diag.message,
        "objective_trace": [float(v) for v in diag.objective_trace],
        "gap_trace": [float(v) for v in diag.gap_trace],
    }


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------- commands

def cmd_calibrate(args) -> int:
    base = _read_config(args.config)
    family = args.family or base.get("family")
    if family is None:
        raise io.InputError("--family is required (or 'family' in --config)")
    config = _solver_config(args, base)
    ds = io.load_csv(args.data, family)
    p = ds.p
    basis, ds = io.resolve_basis(args.basis or base.get("basis") or "intercept", ds)
    fam = family_from_dict({"kind": family, "K": ds.K})
    q = split_conformal_level(dataset_scores(fam, ds), config.alpha)
    hyp0 = make_hypothesis(args.hypothesis or base.get("hypothesis") or "linear:basis", p, basis, q,
                           config.seed, config.squash_gamma)
    os.makedirs(args.out, exist_ok=True)
    rule, diag = run_cpl(config, ds, basis, fam, hyp0)
    io.write_rule(rule, os.path.join(args.out, "rule.json"))
    _write_json(os.path.join(args.out, "diagnostics.json"), _diagnostics_dict(diag))
    print(f"rule written to {os.path.join(args.out, 'rule.json')} "
          f"(converged={diag.converged}, iterations={diag.iterations}, max gap={np.max(np.abs(diag.final_gap)):.3g})")
    if not diag.converged:
        print(f"warning: {diag.message}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rule = io.read_rule(args.rule)
    family = args.family or rule.family.kind
    ds = io.load_csv(args.data, family)
    if args.basis:
        basis, ds = io.resolve_basis(args.basis, ds)
    else:
        basis = rule.basis
        if basis.max_column >= ds.p:
            raise io.InputError("the rule's basis uses columns missing from the data; pass --basis")
    report = evaluate_rule(rule, ds, basis, _groups_of(basis), dataset_id=os.path.abspath(args.data))
    os.makedirs(args.out, exist_ok=True)
    io.write_report(report, os.path.join(args.out, "report.csv"), basis.specs)
    print(f"coverage {report.marginal_coverage:.6f}  avg length {report.avg_length:.6f}  n {report.n}")
    return EXIT_OK


def _bench_config(args, name) -> tuple:
    base = dict(BENCH_DEFAULTS[name])
    base.update(_read_config(args.config))
    if args.n is not None:
        base["n"] = args.n
    n = int(base.pop("n"))
    if n < 1:
        raise io.InputError("--n must be positive")
    return n, _solver_config(args, base)


def _finish_bench(args, methods, group_names, coverage_series, target, converged) -> int:
    io.write_comparison(os.path.join(args.out, "comparison.csv"), methods, group_names)
    io.coverage_chart(os.path.join(args.out, "coverage.svg"), group_names, coverage_series, target)
    io.length_chart(os.path.join(args.out, "length.svg"),
                    {m.method: (m.report.avg_length if m.report is not None else m.length) for m in methods})
    for m in methods:
        L = m.report.avg_length if m.report is not None else m.length
        cov = f"coverage {m.report.marginal_coverage:.4f}  " if m.report is not None else ""
        print(f"{m.method:>24s}: {cov}avg length {L:.4f}")
    if not converged:
        print("warning: CPL did not converge; the smallest-gap iterate was used", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def bench_toy(args) -> int:
    from .synthetic import ToySpec, gen_toy, toy_oracle

    n, config = _bench_config(args, "toy")
    cal = gen_toy(ToySpec(n, config.seed, config.alpha))
    test = gen_toy(ToySpec(n, config.seed + 1, config.alpha))
    fam = family_from_dict({"kind": "abs_residual"})
    basis = ShiftBasis.parse("intercept")
    q = split_conformal_level(dataset_scores(fam, cal), config.alpha)
    # span of {1[x < 0], 1[x >= 0]} through the bias and one indicator
    hyp0 = linear(1, q, feature_map=ShiftBasis.parse("ge:0:0"))
    rule, diag = run_cpl(config, cal, basis, fam, hyp0)
    sc = marginal_rule(cal, config.alpha, fam)
    groups = [Predicate("x<0", lambda X: X[:, 0] < 0), Predicate("x>=0", lambda X: X[:, 0] >= 0)]
    rep_cpl = evaluate_rule(rule, test, basis, groups, dataset_id="toy-test")
    rep_sc = evaluate_rule(sc, test, basis, groups, dataset_id="toy-test")
    orc = toy_oracle(config.alpha)
    os.makedirs(args.out, exist_ok=True)
    methods = [io.MethodRow("cpl", rep_cpl), io.MethodRow("split_conformal", rep_sc),
               io.MethodRow("oracle", length=orc.length)]
    names = [g.name for g in groups]
    series = {"cpl": [rep_cpl.per_group_coverage[g].coverage for g in names],
              "split_conformal": [rep_sc.per_group_coverage[g].coverage for g in names]}
    return _finish_bench(args, methods, names, series, 1 - config.alpha, diag.converged)


def bench_groups(args) -> int:
    from .synthetic import GroupSynthSpec, cells_basis, gen_group_synth, group_synth_cells, level_set_oracle
    from .synthetic import with_scale_feature

    n, config = _bench_config(args, "groups")
    train, cal, test, groups = gen_group_synth(GroupSynthSpec(n, n, n, config.seed))
    rule, diag, basis, coef = calibrate_groups(config, train, cal, groups)
    fam = rule.family
    test_aug = with_scale_feature(test, coef)
    rep_cpl = evaluate_rule(rule, test_aug, basis, groups, dataset_id="groups-test")
    sc = marginal_rule(cal, config.alpha, fam)
    rep_sc = evaluate_rule(sc, test, basis, groups, dataset_id="groups-test")
    mondrian = group_split_conformal(cal, groups, config.alpha, "max", fam)
    rep_gsc = evaluate_rule(mondrian, test, basis, groups, dataset_id="groups-test")
    cells = group_synth_cells()
    orc = level_set_oracle(cells, cells_basis(cells, len(groups)), config.alpha)
    os.makedirs(args.out, exist_ok=True)
    methods = [io.MethodRow("cpl", rep_cpl), io.MethodRow("split_conformal", rep_sc),
               io.MethodRow("group_split_conformal", rep_gsc), io.MethodRow("oracle", length=orc.length)]
    names = [group_name(g, j) for j, g in enumerate(groups)]
    series = {m.method: [m.report.per_group_coverage[g].coverage for g in names] for m in methods[:3]}
    return _finish_bench(args, methods, names, series, 1 - config.alpha, diag.converged)


def calibrate_groups(config: SolverConfig, train, cal, groups):
    """CPL on the group benchmark.

    The threshold map is linear in the ten binary columns, a residual-scale
    feature fitted on the train split, and that feature's indicator above
    its train median. Returns ``(rule, diagnostics, basis, coef)``; the rule
    reads features with the scale column appended by
    ``with_scale_feature(ds, coef)``.
    """
    from .synthetic import fit_scale_model, with_scale_feature

    coef, cut = fit_scale_model(train)
    cal_aug = with_scale_feature(cal, coef)
    scale_col = cal.p
    fam = family_from_dict({"kind": "abs_residual"})
    basis = ShiftBasis(tuple(groups))
    binary = [e.column for e in groups if isinstance(e, Equals) and e.value == 1.0]
    fm = ShiftBasis.parse([f"col:{j}" for j in binary] + [f"col:{scale_col}", f"ge:{scale_col}:{cut!r}"])
    q = split_conformal_level(dataset_scores(fam, cal), config.alpha)
    hyp0 = linear(fm.d, q, feature_map=fm)
    rule, diag = run_cpl(config, cal_aug, basis, fam, hyp0)
    return rule, diag, basis, coef


def bench_discrete(args) -> int:
    from .synthetic import brute_force_discrete_oracle, gen_discrete_instance

    n, config = _bench_config(args, "discrete")
    os.makedirs(args.out, exist_ok=True)
    rows, cov_cpl, cov_orc, names = [], [], [], []
    all_converged = True
    for k in range(n):
        m, K, d = DISCRETE_SHAPES[k % len(DISCRETE_SHAPES)]
        inst = gen_discrete_instance(config.seed + k, m=m, K=K, d=d)
        sol = brute_force_discrete_oracle(inst)
        t, diag = calibrate_discrete(config, inst)
        all_converged &= diag.converged
        gap = float(np.max(np.abs(inst.coverage_gap(t))))
        L = inst.expected_length(t)
        rows.append([k, m, K, d, inst.alpha, L, sol.length, L / sol.length, gap])
        names.append(f"#{k}")
        cov_cpl.append(float(inst.px @ np.sum(inst.py_x * (inst.scores <= t[:, None]), axis=1)) - (1 - inst.alpha))
        cov_orc.append(float(inst.px @ np.sum(inst.py_x * (inst.scores <= sol.thresholds[:, None]), axis=1))
                       - (1 - inst.alpha))
    io.write_table(os.path.join(args.out, "comparison.csv"),
                   ["instance", "m", "K", "d", "alpha", "cpl_length", "oracle_length", "length_ratio",
                    "cpl_max_gap"], rows)
    # coverage minus target (each instance has its own alpha), shifted onto a 0.9 reference line
    io.coverage_chart(os.path.join(args.out, "coverage.svg"), names,
                      {"cpl": [0.9 + v for v in cov_cpl], "oracle": [0.9 + v for v in cov_orc]}, 0.9,
                      title="Marginal coverage minus target (+0.9)")
    io.length_chart(os.path.join(args.out, "length.svg"),
                    {"cpl": float(np.mean([r[5] for r in rows])), "oracle": float(np.mean([r[6] for r in rows]))},
                    title="Mean expected set size")
    worst = max(r[8] for r in rows)
    ratio = max(r[7] for r in rows)
    print(f"{n} instances: worst CPL gap {worst:.3g}, worst length ratio {ratio:.4f}")
    if not all_converged:
        print("warning: CPL did not converge on every instance", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def calibrate_discrete(config: SolverConfig, inst):
    """CPL with one free threshold per covariate value on a discrete instance.

    Returns ``(thresholds per x, diagnostics)``.
    """
    from .scores import Classification

    ds = inst.to_dataset()
    m, d = inst.m, inst.Phi.shape[1]
    fam = Classification(inst.K)
    basis = ShiftBasis.parse([f"col:{m + j}" for j in range(d)])
    fm = ShiftBasis.parse([f"col:{i}" for i in range(m)])
    cfg = dataclasses.replace(config, alpha=inst.alpha)
    q = split_conformal_level(dataset_scores(fam, ds), inst.alpha, ds.normalized_weights)
    rule, diag = run_cpl(cfg, ds, basis, fam, linear(m, q, feature_map=fm))
    return rule.thresholds(np.hstack([np.eye(m), inst.Phi])), diag


def cmd_bench(args) -> int:
    return {"toy": bench_toy, "groups": bench_groups, "discrete": bench_discrete}[args.name](args)


def cmd_oracle(args) -> int:
    from .synthetic import cells_basis, group_synth_cells, level_set_oracle, toy_oracle

    if not 0 < args.alpha < 1:
        raise io.InputError("--alpha must lie in (0, 1)")
    if args.name == "toy":
        o = toy_oracle(args.alpha)
        print(f"q_minus {o.q_minus:.10f}\nq_plus {o.q_plus:.10f}\nlength {o.length:.10f}\n"
              f"split_conformal_length {o.split_conformal_length:.10f}\n"
              f"conditional_length {o.conditional_length:.10f}")
    else:
        cells = group_synth_cells()
        sol = level_set_oracle(cells, cells_basis(cells, 20), args.alpha)
        print(f"length {sol.length:.10f}\nmax_residual {np.max(np.abs(sol.residual)):.3e}\n"
              f"iterations {sol.iterations}\nbeta " + " ".join(f"{b:.8f}" for b in sol.beta))
    return EXIT_OK


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    handler = {"calibrate": cmd_calibrate, "evaluate": cmd_evaluate, "bench": cmd_bench, "oracle": cmd_oracle}
    try:
        return handler[args.command](args)
    except (io.InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CPLDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
