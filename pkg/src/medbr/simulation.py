"""Seeded Monte Carlo studies for ML, mean-BR and median-BR estimators.

Every replication draws from its own counter-based Philox stream keyed by
``(seed, replication)``, so reports do not depend on how replications are
spread across worker processes.
"""

import configparser
import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .betabinom import BetaBinData, BetaBinLinks, BetaBinModel, check_fit_divergence
from .betareg import BetaRegData, BetaRegLinks, BetaRegModel
from .dataio import betabin_data, design_matrix, design_names, format_number, read_table, resolve_data_path, to_json
from .engine import Method, SolverOptions, solve
from .errors import DataError, DomainError, ResourceError, SingularInformationError
from .special import normal_quantile

MODELS = ("betareg", "betabinom")
COVARIATE_STREAM = 2 ** 64 - 1  # reserved Philox key word for design generation
TRANSFORMS = {"exp": np.exp, "identity": lambda x: x, "expit": expit}
_FIT_ERRORS = (DomainError, SingularInformationError, DataError, ResourceError,
               FloatingPointError, OverflowError, np.linalg.LinAlgError)


def replication_rng(seed, replication):
    """Independent generator for one ``(seed, replication)`` pair."""
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(key=np.array([seed, int(replication)], dtype=np.uint64)))


def _log_gamma_variates(shape, rng):
    """Logarithms of Gamma(shape, 1) draws by Marsaglia and Tsang.

    Shapes below one are boosted to ``shape + 1`` and scaled back by
    ``U ** (1 / shape)``, all on the log scale to avoid underflow.
    """
    shape = np.atleast_1d(np.asarray(shape, dtype=float))
    boost = shape < 1.0
    a = np.where(boost, shape + 1.0, shape)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(a.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        while pending.size:
            x = rng.standard_normal(pending.size)
            v = (1.0 + c[pending] * x) ** 3
            u = rng.random(pending.size)
            dp = d[pending]
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + dp - dp * v + dp * np.log(v))
            out[pending[ok]] = np.log(dp[ok]) + np.log(v[ok])
            pending = pending[~ok]
        if boost.any():
            out[boost] += np.log(rng.random(int(boost.sum()))) / shape[boost]
    return out


def draw_beta(mu, phi, rng):
    """Beta draws with mean ``mu`` and precision ``phi``; exact 0 or 1 is redrawn."""
    mu, phi = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(phi, dtype=float))
    if np.any(~((mu > 0) & (mu < 1))) or np.any(~(phi > 0)):
        raise DomainError("beta draws need 0 < mu < 1 and phi > 0")
    scalar = mu.ndim == 0
    mu, phi = np.atleast_1d(mu).ravel(), np.atleast_1d(phi).ravel()
    out = np.empty(mu.size)
    pending = np.arange(mu.size)
    while pending.size:
        g1 = _log_gamma_variates(phi[pending] * mu[pending], rng)
        g2 = _log_gamma_variates(phi[pending] * (1.0 - mu[pending]), rng)
        with np.errstate(invalid="ignore"):
            y = expit(g1 - g2)
        ok = (y > 0) & (y < 1)
        out[pending[ok]] = y[ok]
        pending = pending[~ok]
    return float(out[0]) if scalar else out


def draw_betabinomial(m, mu, phi, rng):
    """Compound draw: ``pi ~ Beta(mu, 1/phi - 1)``, then the number of ``m`` uniforms below ``pi``."""
    m, mu, phi = np.broadcast_arrays(np.asarray(m), np.asarray(mu, dtype=float), np.asarray(phi, dtype=float))
    if np.any(~((phi > 0) & (phi < 1))):
        raise DomainError("beta-binomial draws need 0 < phi < 1")
    if np.any(m < 1) or np.any(m != np.round(m)):
        raise DomainError("number of trials must be a positive integer")
    scalar = m.ndim == 0
    m = np.atleast_1d(m).astype(np.int64).ravel()
    pi = np.atleast_1d(draw_beta(mu.ravel(), 1.0 / phi.ravel() - 1.0, rng))
    u = rng.random((m.size, int(m.max())))
    inside = np.arange(u.shape[1])[None, :] < m[:, None]
    y = np.sum((u < pi[:, None]) & inside, axis=1)
    return int(y[0]) if scalar else y


@dataclass
class SimulationConfig:
    model: str
    truth: object  # array of length d, or "ml" to use the ML fit of the file data
    replications: int
    seed: int
    methods: tuple = (Method.ML, Method.MEAN_BR, Method.MEDIAN_BR)
    level: float = 0.95
    design: str = "generated"
    n: Optional[int] = None
    trials: Optional[int] = None
    data: Optional[str] = None
    successes: str = "y"
    trials_col: str = "m"
    mean_cols: tuple = ()
    prec_cols: tuple = ()
    mean_intercept: bool = True
    prec_intercept: bool = True
    max_trials: Optional[int] = None
    mean_link: str = "logit"
    prec_link: Optional[str] = None
    transforms: dict = field(default_factory=dict)
    max_iterations: int = 200
    tolerance: float = 1e-8
    workers: int = 1
    base_dir: Optional[str] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise DataError(f"[study] model: expected one of {', '.join(MODELS)}, got {self.model!r}")
        if self.prec_link is None:
            self.prec_link = "log" if self.model == "betareg" else "identity"
        if int(self.replications) < 1:
            raise DataError("[study] replications: must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DataError("[study] seed: must be a 64-bit unsigned integer")
        if not 0 < self.level < 1:
            raise DataError("[study] level: must lie in (0, 1)")
        try:
            self.methods = tuple(Method.parse(m) for m in self.methods)
        except ValueError as exc:
            raise DataError(f"[study] methods: {exc}") from None
        if not self.methods:
            raise DataError("[study] methods: at least one method is required")
        if self.design not in ("generated", "file"):
            raise DataError(f"[design] source: expected 'generated' or 'file', got {self.design!r}")
        if self.design == "generated" and (self.n is None or self.n < 2):
            raise DataError("[design] n: a generated design needs n >= 2")
        if self.design == "generated" and self.model == "betabinom" and not self.trials:
            raise DataError("[design] trials: a generated beta-binomial design needs a number of trials")
        if self.design == "file" and not self.data:
            raise DataError("[design] data: a file design needs a data path")
        if isinstance(self.truth, str) and self.truth != "ml":
            raise DataError("[truth] theta: a list of numbers or 'ml'")
        if isinstance(self.truth, str) and self.design != "file":
            raise DataError("[truth] theta = ml needs a file design")
        for name, fn in self.transforms.items():
            if fn not in TRANSFORMS:
                raise DataError(f"[transforms] {name}: unknown transform {fn!r}; choose from {', '.join(TRANSFORMS)}")

    def describe(self):
        """Settings that determine the report; worker count is excluded on purpose."""
        return {
            "model": self.model, "replications": int(self.replications), "seed": str(int(self.seed)),
            "methods": [m.value for m in self.methods], "level": self.level, "design": self.design,
            "n": self.n, "trials": self.trials, "data": self.data, "max_trials": self.max_trials,
            "mean_link": self.mean_link, "prec_link": self.prec_link, "transforms": dict(self.transforms),
            "max_iterations": self.max_iterations, "tolerance": self.tolerance,
        }


def _split_list(text):
    return tuple(t.strip() for t in text.replace(";", ",").split(",") if t.strip())


def _get(section, key, conv, default=None, where=""):
    if key not in section:
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except ValueError:
        raise DataError(f"[{where}] {key}: cannot interpret {raw!r}") from None


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def load_config(path, replications=None, seed=None, workers=None) -> SimulationConfig:
    """Read a simulation config; see ``docs/simulation-config.md`` for the schema."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror or exc})") from None
    except configparser.Error as exc:
        raise DataError(f"{path}: malformed config: {exc}") from None
    for sec in ("study", "design", "truth"):
        if not parser.has_section(sec):
            raise DataError(f"{path}: missing section [{sec}]")
    st, de, tr = parser["study"], parser["design"], parser["truth"]
    links = parser["links"] if parser.has_section("links") else {}
    if "model" not in st:
        raise DataError(f"{path}: [study] model is required")
    if "theta" not in tr:
        raise DataError(f"{path}: [truth] theta is required")
    theta_text = tr["theta"].strip()
    if theta_text.lower() == "ml":
        truth = "ml"
    else:
        try:
            truth = np.array([float(t) for t in _split_list(theta_text)])
        except ValueError:
            raise DataError(f"{path}: [truth] theta: cannot parse {theta_text!r}") from None
    transforms = dict(parser["transforms"]) if parser.has_section("transforms") else {}
    cfg = SimulationConfig(
        model=st["model"].strip().lower(),
        truth=truth,
        replications=replications if replications is not None else _get(st, "replications", int, 1000, "study"),
        seed=seed if seed is not None else _get(st, "seed", int, 0, "study"),
        methods=_get(st, "methods", _split_list, ("ml", "mean-br", "median-br"), "study"),
        level=_get(st, "level", float, 0.95, "study"),
        design=_get(de, "source", str, "generated", "design"),
        n=_get(de, "n", int, None, "design"),
        trials=_get(de, "trials", int, None, "design"),
        data=_get(de, "data", str, None, "design"),
        successes=_get(de, "successes", str, "y", "design"),
        trials_col=_get(de, "trials_col", str, "m", "design"),
        mean_cols=_get(de, "mean_cols", _split_list, (), "design"),
        prec_cols=_get(de, "prec_cols", _split_list, (), "design"),
        mean_intercept=_get(de, "mean_intercept", _bool, True, "design"),
        prec_intercept=_get(de, "prec_intercept", _bool, True, "design"),
        max_trials=_get(de, "max_trials", int, None, "design"),
        mean_link=_get(links, "mean", str, "logit", "links"),
        prec_link=_get(links, "precision", str, None, "links"),
        transforms={k: v.strip() for k, v in transforms.items()},
        max_iterations=_get(st, "max_iterations", int, 200, "study"),
        tolerance=_get(st, "tolerance", float, 1e-8, "study"),
        workers=workers if workers is not None else _get(st, "workers", int, 1, "study"),
        base_dir=str(path.resolve().parent),
    )
    return cfg


@dataclass
class Study:
    """Fixed design, truth and links shared by every replication."""
    config: SimulationConfig
    X: np.ndarray
    Z: np.ndarray
    m: Optional[np.ndarray]
    truth: np.ndarray
    names: list
    links: object

    @property
    def p(self):
        return self.X.shape[1]

    def mean_precision(self):
        beta, gamma = self.truth[: self.p], self.truth[self.p:]
        mu = self.links.mean().check(self.links.mean().inverse(self.X @ beta), "mean")
        phi = self.links.precision().check(self.links.precision().inverse(self.Z @ gamma), "precision")
        return mu, phi

    def model_for(self, y):
        if self.config.model == "betareg":
            return BetaRegModel(BetaRegData(y, self.X, self.Z), self.links)
        return BetaBinModel(BetaBinData(y, self.m, self.X, self.Z), self.links)

    def draw(self, rng):
        mu, phi = self.mean_precision()
        if self.config.model == "betareg":
            return draw_beta(mu, phi, rng)
        return draw_betabinomial(self.m, mu, phi, rng)


def _component_names(model, p, q, mean_names=None, prec_names=None, prec_link="log"):
    mean_names = mean_names or [f"beta{j}" for j in range(p)]
    if model == "betabinom" and q == 1 and prec_link == "identity":
        return list(mean_names) + ["phi"]
    prec_names = prec_names or [f"gamma{j}" for j in range(q)]
    return list(mean_names) + list(prec_names)


def prepare_study(cfg: SimulationConfig) -> Study:
    """Build the fixed design and resolve the true parameter."""
    links = (BetaRegLinks(cfg.mean_link, cfg.prec_link) if cfg.model == "betareg"
             else BetaBinLinks(cfg.mean_link, cfg.prec_link))
    try:
        links.mean(), links.precision()
    except ValueError as exc:
        raise DataError(f"[links] {exc}") from None
    m = None
    data = None
    if cfg.design == "generated":
        rng = replication_rng(cfg.seed, COVARIATE_STREAM)
        x1 = rng.standard_normal(cfg.n)
        x2 = np.log(rng.uniform(1.0, 2.0, cfg.n))
        X = np.column_stack([np.ones(cfg.n), x1, x2])
        Z = X.copy()
        if cfg.model == "betabinom":
            m = np.full(cfg.n, int(cfg.trials), dtype=np.int64)
    else:
        path = resolve_data_path(cfg.data, cfg.base_dir)
        if not Path(path).is_file():
            raise DataError(f"[design] data: file not found: {path}")
        table = read_table(path)
        if cfg.max_trials is not None:
            table = table.subset(table.column(cfg.trials_col) <= cfg.max_trials)
        X = design_matrix(table, cfg.mean_cols, cfg.mean_intercept)
        Z = design_matrix(table, cfg.prec_cols, cfg.prec_intercept)
        if cfg.model == "betabinom":
            data = betabin_data(table, cfg.successes, cfg.trials_col, cfg.mean_cols, cfg.prec_cols,
                                cfg.mean_intercept, cfg.prec_intercept)
            m = data.m
        elif isinstance(cfg.truth, str):
            raise DataError("[truth] theta = ml is only supported for beta-binomial file designs")
    d = X.shape[1] + Z.shape[1]
    if cfg.design == "file":
        names = _component_names(cfg.model, X.shape[1], Z.shape[1],
                                 design_names(cfg.mean_cols, cfg.mean_intercept, "beta"),
                                 design_names(cfg.prec_cols, cfg.prec_intercept, "gamma"), cfg.prec_link)
    else:
        names = _component_names(cfg.model, X.shape[1], Z.shape[1], prec_link=cfg.prec_link)
    if isinstance(cfg.truth, str):
        fit = solve(BetaBinModel(data, links), SolverOptions(Method.ML, cfg.max_iterations, cfg.tolerance))
        if not fit.converged:
            raise DataError("[truth] theta = ml: the maximum likelihood fit of the data did not converge")
        truth = fit.theta.copy()
    else:
        truth = np.asarray(cfg.truth, dtype=float)
        if truth.size != d:
            raise DataError(f"[truth] theta: expected {d} values for this design, got {truth.size}")
    bad = [k for k in cfg.transforms if k not in names]
    if bad:
        raise DataError(f"[transforms] unknown component {bad[0]!r}; components are {', '.join(names)}")
    study = Study(cfg, X, Z, m, truth, names, links)
    try:
        study.mean_precision()
    except DomainError as exc:
        raise DataError(f"[truth] theta: {exc}") from None
    return study


def run_replication(study: Study, replication: int):
    """Fit every configured method to one simulated sample.

    Returns arrays ``(estimates, std_errors, converged, diverged)`` with one
    row per method.
    """
    cfg = study.config
    rng = replication_rng(cfg.seed, replication)
    y = study.draw(rng)
    k, d = len(cfg.methods), study.truth.size
    est = np.full((k, d), np.nan)
    se = np.full((k, d), np.nan)
    conv = np.zeros(k, dtype=bool)
    div = np.zeros(k, dtype=bool)
    try:
        model = study.model_for(y)
    except DataError:
        return est, se, conv, div
    for j, method in enumerate(cfg.methods):
        try:
            fit = solve(model, SolverOptions(method, cfg.max_iterations, cfg.tolerance))
        except _FIT_ERRORS:
            continue
        report = check_fit_divergence(fit, model)
        est[j] = fit.theta
        se[j] = fit.std_errors
        conv[j] = fit.converged
        div[j] = report.flag
    return est, se, conv, div


_WORKER_STUDY = None


def _init_worker(study):
    global _WORKER_STUDY
    _WORKER_STUDY = study


def _run_chunk(indices):
    return [run_replication(_WORKER_STUDY, r) for r in indices]


@dataclass
class ReplicationResults:
    """Per-replication outcomes indexed ``[replication, method, component]``."""
    methods: tuple
    names: list
    estimates: np.ndarray
    std_errors: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray


def simulate(study: Study, workers=1) -> ReplicationResults:
    cfg = study.config
    R = int(cfg.replications)
    if workers is None or workers < 1:
        workers = os.cpu_count() or 1
    if workers == 1 or R < 2:
        rows = [run_replication(study, r) for r in range(R)]
    else:
        chunk = max(1, R // (8 * workers))
        chunks = [range(s, min(s + chunk, R)) for s in range(0, R, chunk)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(study,)) as pool:
            rows = [row for part in pool.map(_run_chunk, chunks) for row in part]
    return ReplicationResults(
        cfg.methods, study.names,
        np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows]), np.array([r[3] for r in rows]),
    )


def summarize(results: ReplicationResults, truth, level=0.95, transforms=None):
    """PU, BIAS, RMSE and WALD per method and component.

    PU, PO and TIES use every replication with a finite final iterate,
    including divergence-flagged ones, since an estimate running off to
    infinity is still on a definite side of the truth. BIAS, RMSE and WALD
    use converged, unflagged replications only.
    """
    transforms = transforms or {}
    truth = np.asarray(truth, dtype=float)
    z = normal_quantile(0.5 * (1.0 + level))
    R = results.estimates.shape[0]
    out = {}
    for j, method in enumerate(results.methods):
        est = results.estimates[:, j, :]
        se = results.std_errors[:, j, :]
        conv = results.converged[:, j]
        div = results.diverged[:, j]
        finite = np.all(np.isfinite(est), axis=1)
        used = conv & ~div & finite
        n_used = int(used.sum())
        cells = {}
        for r, name in enumerate(results.names):
            e = est[finite, r]
            cell = {}
            if e.size:
                cell["PU"] = 100.0 * np.count_nonzero(e < truth[r]) / e.size
                cell["PO"] = 100.0 * np.count_nonzero(e > truth[r]) / e.size
                cell["TIES"] = 100.0 * np.count_nonzero(e == truth[r]) / e.size
            else:
                cell["PU"] = cell["PO"] = cell["TIES"] = float("nan")
            if n_used:
                eu, su = est[used, r], se[used, r]
                err = eu - truth[r]
                cell["BIAS"] = float(np.mean(err))
                cell["RMSE"] = float(np.sqrt(np.mean(err * err)))
                cell["WALD"] = 100.0 * np.count_nonzero(np.abs(err) <= z * su) / n_used
                if name in transforms:
                    f = TRANSFORMS[transforms[name]]
                    cell["BIAS_transformed"] = float(np.mean(f(eu)) - f(truth[r]))
            else:
                cell["BIAS"] = cell["RMSE"] = cell["WALD"] = float("nan")
                if name in transforms:
                    cell["BIAS_transformed"] = float("nan")
            cells[name] = cell
        out[method.value] = {
            "replications": R,
            "used": n_used,
            "finite": int(finite.sum()),
            "nonconverged_pct": 100.0 * np.count_nonzero(~conv) / R,
            "diverged_pct": 100.0 * np.count_nonzero(div) / R,
            "components": cells,
        }
    return out


@dataclass
class SimulationReport:
    config: dict
    components: list
    truth: np.ndarray
    methods: dict
    results: Optional[ReplicationResults] = None

    def to_dict(self):
        return {"config": self.config, "components": list(self.components),
                "truth": [float(t) for t in self.truth], "methods": self.methods}

    def to_json(self):
        return to_json(self.to_dict()) + "\n"

    def metric(self, method, component, name):
        return self.methods[Method.parse(method).value]["components"][component][name]


def run_study(cfg: SimulationConfig, workers=None) -> SimulationReport:
    study = prepare_study(cfg)
    results = simulate(study, cfg.workers if workers is None else workers)
    methods = summarize(results, study.truth, cfg.level, cfg.transforms)
    return SimulationReport(cfg.describe(), study.names, study.truth, methods, results)


DUMP_COLUMNS = ("replication", "method", "component", "estimate", "SE", "converged", "diverged")


def dump_csv(results: ReplicationResults) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_COLUMNS)
    R = results.estimates.shape[0]
    for rep in range(R):
        for j, method in enumerate(results.methods):
            for r, name in enumerate(results.names):
                w.writerow([rep, method.value, name, format_number(results.estimates[rep, j, r]),
                            format_number(results.std_errors[rep, j, r]),
                            int(results.converged[rep, j]), int(results.diverged[rep, j])])
    return buf.getvalue()


def read_dump(text, names=None) -> ReplicationResults:
    """Parse :func:`dump_csv` output back into per-replication arrays."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise DataError("replication dump is empty")
    methods = list(dict.fromkeys(r["method"] for r in rows))
    comps = names or list(dict.fromkeys(r["component"] for r in rows))
    R = max(int(r["replication"]) for r in rows) + 1
    est = np.full((R, len(methods), len(comps)), np.nan)
    se = np.full_like(est, np.nan)
    conv = np.zeros((R, len(methods)), dtype=bool)
    div = np.zeros_like(conv)
    for r in rows:
        i, j, k = int(r["replication"]), methods.index(r["method"]), comps.index(r["component"])
        est[i, j, k] = float("nan") if r["estimate"] == "null" else float(r["estimate"])
        se[i, j, k] = float("nan") if r["SE"] == "null" else float(r["SE"])
        conv[i, j] = r["converged"] == "1"
        div[i, j] = r["diverged"] == "1"
    return ReplicationResults(tuple(Method.parse(m) for m in methods), comps, est, se, conv, div)
