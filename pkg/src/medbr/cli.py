"""Command-line interface: ``medbr fit``, ``medbr simulate`` and ``medbr selftest``.

Exit status is 0 on success, 2 when a fit did not converge (results are still
written) and 1 on input errors.
"""

import argparse
import sys
from pathlib import Path

from .betabinom import BetaBinLinks, BetaBinModel, check_fit_divergence
from .betareg import BetaRegLinks, BetaRegModel
from .dataio import betabin_data, betareg_data, design_matrix, read_table, to_json
from .engine import Method, SolverOptions, solve, wald_interval
from .errors import DataError, DomainError, ResourceError, SingularInformationError
from .glm import GlmModel

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


def _columns(text):
    if text is None:
        return []
    return [c.strip() for c in text.split(",") if c.strip()]


def build_model(args):
    """Model object and component names for a fit request."""
    table = read_table(args.data)
    mean_cols = _columns(args.mean_cols)
    prec_cols = _columns(args.prec_cols)
    mean_icpt = not args.no_mean_intercept
    prec_icpt = not args.no_prec_intercept
    mean_names = (["beta0"] if mean_icpt else []) + [f"beta[{c}]" for c in mean_cols]

    if args.model == "betareg":
        links = BetaRegLinks(args.link_mean or "logit", args.link_prec or "log")
        data = betareg_data(table, args.response or "y", mean_cols, prec_cols, mean_icpt, prec_icpt)
        names = mean_names + (["gamma0"] if prec_icpt else []) + [f"gamma[{c}]" for c in prec_cols]
        return BetaRegModel(data, links), names
    if args.model == "betabinom":
        links = BetaBinLinks(args.link_mean or "logit", args.link_prec or "identity")
        data = betabin_data(table, args.successes or "y", args.trials or "m", mean_cols, prec_cols,
                            mean_icpt, prec_icpt)
        if data.q == 1 and prec_icpt and links.precision_link == "identity":
            prec_names = ["phi"]
        else:
            prec_names = (["gamma0"] if prec_icpt else []) + [f"gamma[{c}]" for c in prec_cols]
        return BetaBinModel(data, links), mean_names + prec_names

    family = args.family or "binomial"
    X = design_matrix(table, mean_cols, mean_icpt)
    if family == "binomial":
        y = table.column(args.successes or "y")
        m = table.column(args.trials) if args.trials else None
    else:
        y = table.column(args.response or "y")
        m = None
    model = GlmModel(X, y, m, family, args.link_mean)
    names = mean_names + (["phi"] if model.parameter_dimension()[1] else [])
    return model, names


def fit_report(model, names, fit, level=0.95):
    """JSON-ready dictionary describing one fit."""
    try:
        loglik = model.log_likelihood(fit.theta)
    except (DomainError, FloatingPointError):
        loglik = float("nan")
    intervals = None
    if fit.converged:
        intervals = {name: list(wald_interval(fit, r, level)) for r, name in enumerate(names)}
    return {
        "method": fit.method.value,
        "components": list(names),
        "theta": fit.theta,
        "estimates": dict(zip(names, fit.theta.tolist())),
        "std_errors": dict(zip(names, fit.std_errors.tolist())),
        "vcov": fit.vcov,
        "loglik": loglik,
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "stop_reason": fit.stop_reason,
        "adjusted_score_norm": fit.final_adjusted_score_norm,
        "divergence": {"flag": bool(fit.divergence_flag),
                       "components": [names[r] for r in fit.divergence_components]},
        "wald": {"level": level, "intervals": intervals},
    }


def format_table(report):
    lines = [f"method: {report['method']}   converged: {report['converged']} "
             f"({report['iterations']} iterations, {report['stop_reason']})"]
    level = report["wald"]["level"]
    lines.append(f"{'component':<16}{'estimate':>12}{'std.error':>12}   {100 * level:g}% Wald interval")
    for name in report["components"]:
        est, se = report["estimates"][name], report["std_errors"][name]
        iv = report["wald"]["intervals"]
        ci = f"({iv[name][0]:.4f}, {iv[name][1]:.4f})" if iv else "n/a"
        lines.append(f"{name:<16}{est:>12.4f}{se:>12.4f}   {ci}")
    lines.append(f"log-likelihood: {report['loglik']:.6f}")
    if report["divergence"]["flag"]:
        lines.append("warning: estimates appear to diverge in " + (", ".join(report["divergence"]["components"])
                                                                    or "the linear predictor"))
    return "\n".join(lines)


def cmd_fit(args):
    model, names = build_model(args)
    opts = SolverOptions(Method.parse(args.method), max_iterations=args.max_iter, tolerance=args.tol)
    try:
        fit = solve(model, opts)
    except SingularInformationError as exc:
        raise DataError(f"cannot start the fit: {exc}") from None
    check_fit_divergence(fit, model)
    report = fit_report(model, names, fit, args.level)
    report = {"model": args.model, "data": str(args.data), **report}
    text = to_json(report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(format_table(report), file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    from .simulation import dump_csv, load_config, run_study

    cfg = load_config(args.config, replications=args.replications, seed=args.seed, workers=args.workers)
    report = run_study(cfg)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.dump:
        Path(args.dump).write_text(dump_csv(report.results))
    if args.out:
        for method, block in report.methods.items():
            print(f"{method}: used {block['used']}/{block['replications']}, "
                  f"diverged {block['diverged_pct']:.1f}%, non-converged {block['nonconverged_pct']:.1f}%")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_all

    results = run_all()
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INPUT


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; status 2 is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="medbr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model to a CSV file")
    fit.add_argument("--model", choices=("betareg", "betabinom", "glm"), required=True)
    fit.add_argument("--method", default="median-br", help="ml, mean-br or median-br (default median-br)")
    fit.add_argument("--data", required=True, help="CSV file with a header row")
    fit.add_argument("--response", help="response column for betareg and non-binomial glm (default y)")
    fit.add_argument("--successes", help="successes column for betabinom and binomial glm (default y)")
    fit.add_argument("--trials", help="trials column (default m for betabinom)")
    fit.add_argument("--family", choices=("binomial", "poisson", "gamma"), help="glm family (default binomial)")
    fit.add_argument("--mean-cols", help="comma-separated mean covariates")
    fit.add_argument("--prec-cols", help="comma-separated precision covariates")
    fit.add_argument("--no-mean-intercept", action="store_true")
    fit.add_argument("--no-prec-intercept", action="store_true")
    fit.add_argument("--link-mean", help="mean link (logit or probit)")
    fit.add_argument("--link-prec", help="precision link (log/identity for betareg, logit/identity for betabinom)")
    fit.add_argument("--out", help="write JSON here instead of standard output")
    fit.add_argument("--level", type=float, default=0.95, help="Wald interval level")
    fit.add_argument("--max-iter", type=int, default=200)
    fit.add_argument("--tol", type=float, default=1e-8)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    sim.add_argument("--config", required=True)
    sim.add_argument("--replications", type=int, help="override [study] replications")
    sim.add_argument("--seed", type=int, help="override [study] seed")
    sim.add_argument("--workers", type=int, help="worker processes (0 = one per CPU)")
    sim.add_argument("--out", help="report JSON path (default standard output)")
    sim.add_argument("--dump", help="per-replication CSV path")
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("selftest", help="run the embedded oracle checks")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not 0 < getattr(args, "level", 0.5) < 1:
        print("medbr: error: --level must lie in (0, 1)", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (DataError, ResourceError, ValueError) as exc:
        print(f"medbr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
