"""Command-line front end.

Subcommands: ``fit`` (run the sampler, write a draws file), ``effects``
(draws file -> effect tables), ``summarize`` (effect draws -> tree/GAM
projections), ``simulate`` (run a study from a config).  Every command
is a pure function of its input files, config and seed, so reruns
overwrite outputs byte-identically.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Set ``BCMFOREST_LOG`` (debug/info/warning) for log verbosity.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import io as bio
from .config import build_bcmf_config, build_data_spec, build_study_spec, load_config
from .effects import bayesian_bootstrap_averages, conditional_effects, equal_weight_averages
from .errors import DataError, FormatError, UsageError
from .model import fit_bcmf
from .simulate import INTERVAL_QS, run_study
from .summaries import (
    AdditiveSummaryConfig,
    CartSummaryConfig,
    posterior_summary_distribution,
)

log = logging.getLogger("bcmforest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _summary_stats(draws, axis=0):
    lo, hi = np.quantile(draws, INTERVAL_QS, axis=axis)
    return draws.mean(axis=axis), draws.std(axis=axis), lo, hi


def cmd_fit(args):
    cfg = load_config(args.config)
    spec = build_data_spec(cfg.get("data"), args.data)
    data, codec = bio.ingest(spec)
    bcfg = build_bcmf_config(cfg.get("model"), seed=args.seed,
                             chains=args.chains)
    log.info("fitting: n=%d, p=%d, %d chains x %d draws",
             data.n, data.x.shape[1], bcfg.n_chains, bcfg.n_samples)
    fit = fit_bcmf(data, bcfg)
    os.makedirs(args.out, exist_ok=True)
    bio.write_fit(os.path.join(args.out, "draws.bcmf"), fit, codec)
    lines = [
        f"n_train={data.n}",
        f"n_covariates={data.x.shape[1]}",
        f"n_draws={fit.n_draws}",
        f"outcome_kind={fit.outcome_kind}",
        f"mediator_kind={fit.mediator_kind}",
        f"seed={bcfg.seed}",
        f"posterior_mean_sigma2={float(np.mean(fit.sigma2))!r}",
        f"posterior_mean_sigma2_m={float(np.mean(fit.sigma2_m))!r}",
    ]
    _write_text(os.path.join(args.out, "summary.txt"), "\n".join(lines) + "\n")
    return 0


def cmd_effects(args):
    fit, codec = bio.read_fit(args.draws)
    if args.newdata is not None:
        if codec is None:
            raise DataError("draws file carries no covariate codec; "
                            "cannot transform new data")
        head, table = bio.read_table(args.newdata)
        absent = [c for c in codec.source_columns if c not in head]
        if absent:
            raise DataError(f"{args.newdata}: missing columns {absent}")
        X = codec.transform(table, args.newdata)
        eff = conditional_effects(fit, X)
    else:
        X = fit.train_x
        eff = conditional_effects(fit)
    os.makedirs(args.out, exist_ok=True)
    bio.write_effects(os.path.join(args.out, "effect_draws.bcmf"), eff, X,
                      fit.columns)

    header = ["row", "effect", "mean", "sd", "lo", "hi"]
    rows = []
    for name, draws in (("direct", eff.direct), ("indirect", eff.indirect),
                        ("total", eff.total)):
        mean, sd, lo, hi = _summary_stats(draws)
        for i in range(draws.shape[1]):
            rows.append([i, name, repr(float(mean[i])), repr(float(sd[i])),
                         repr(float(lo[i])), repr(float(hi[i]))])
    bio._write_csv(os.path.join(args.out, "effect_rows.csv"), header, rows)

    # average effects: Dirichlet-weighted (seed derived from the fit's seed)
    # with the equal-weight variant alongside
    avg_rng = np.random.default_rng(
        np.random.SeedSequence(fit.config.seed, spawn_key=(2,)))
    bb = bayesian_bootstrap_averages(eff, avg_rng)
    ew = equal_weight_averages(eff)
    header = ["effect", "weighting", "mean", "sd", "lo", "hi"]
    rows = []
    for label, avg in (("bayesian_bootstrap", bb), ("equal_weight", ew)):
        for name in ("direct", "indirect", "total"):
            draws = getattr(avg, name)
            mean, sd, lo, hi = _summary_stats(draws)
            rows.append([name, label, repr(float(mean)), repr(float(sd)),
                         repr(float(lo)), repr(float(hi))])
    bio._write_csv(os.path.join(args.out, "effect_averages.csv"), header, rows)
    return 0


def cmd_summarize(args):
    eff, X, columns = bio.read_effects(args.effects)
    if args.covariates is not None:
        head, table = bio.read_table(args.covariates)
        absent = [c for c in columns if c not in head]
        if absent:
            raise DataError(f"{args.covariates}: missing columns {absent}")
        cols = [bio._parse_numeric(table[c], c, args.covariates)
                for c in columns]
        X = np.column_stack(cols)
    surface = getattr(eff, args.effect)
    os.makedirs(args.out, exist_ok=True)
    if args.method == "cart":
        dist = posterior_summary_distribution(
            surface, X, CartSummaryConfig(max_depth=args.depth), "cart",
            columns=columns)
        _write_text(os.path.join(args.out, "tree_rules.txt"),
                    dist.reference.surrogate.rules_text() + "\n")
        header = ["leaf", "conditions", "value", "n"]
        rows = [[k, " & ".join(r["conditions"]) or "(all rows)",
                 repr(float(r["value"])), r["n"]]
                for k, r in enumerate(dist.reference.surrogate.rule_list())]
        bio._write_csv(os.path.join(args.out, "tree_rules.csv"), header, rows)
    else:
        dist = posterior_summary_distribution(
            surface, X, AdditiveSummaryConfig(), "gam", columns=columns,
            keep_surrogates=True)
        rows = []
        ref = dist.reference.surrogate
        for j, _ in ref.components:
            grid, _ = ref.component_table(j, n_grid=50)
            per_draw = np.stack([
                r.surrogate.component_table(j, n_grid=50)[1]
                for r in dist.per_draw
            ])
            lo, hi = np.quantile(per_draw, INTERVAL_QS, axis=0)
            mean = ref.component_table(j, n_grid=50)[1]
            for g, m, l, h in zip(grid, mean, lo, hi):
                rows.append([columns[j], repr(float(g)), repr(float(m)),
                             repr(float(l)), repr(float(h))])
        bio._write_csv(os.path.join(args.out, "gam_components.csv"),
                       ["column", "grid", "reference", "lo", "hi"], rows)
    header = ["draw", "r_squared"]
    rows = [[d, repr(float(r))] for d, r in enumerate(dist.r_squared)]
    rows.append(["reference", repr(float(dist.reference.r_squared))])
    bio._write_csv(os.path.join(args.out, "r2_posterior.csv"), header, rows)
    return 0


def cmd_simulate(args):
    cfg = load_config(args.config)
    spec = build_study_spec(cfg.get("study"), seed=args.seed)
    log.info("study: truth=%s reps=%d", spec.truth_kind, spec.replications)
    report = run_study(spec)
    bio.write_sim_report(report, args.out)
    return 0


def _write_text(path, text):
    tmp = path + ".tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def build_parser():
    parser = _Parser(prog="bcmforest",
                     description="Heterogeneous causal mediation effects "
                                 "with Bayesian tree ensembles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the mediation model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chains", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("effects", help="effect draws and summaries from a fit")
    p.add_argument("--draws", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--newdata", default=None)
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("summarize", help="interpretable projections of effects")
    p.add_argument("--effects", required=True)
    p.add_argument("--covariates", default=None)
    p.add_argument("--method", choices=("cart", "gam"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--effect", choices=("direct", "indirect", "total"),
                   default="indirect")
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    level = os.environ.get("BCMFOREST_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  - runtime failures exit 3
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
