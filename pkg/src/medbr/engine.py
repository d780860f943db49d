"""Mean and median score adjustments and the quasi-Fisher scoring solver.

Any model that supplies its score, Fisher information and the expected
third-order derivative matrices ``P_s = E(U U' U_s)`` and
``Q_s = E(U_tu U_s)`` can be fitted by maximum likelihood, mean bias
reduction or median bias reduction through :func:`solve`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, SingularInformationError
from .special import normal_quantile

__all__ = [
    "Method",
    "ParameterPoint",
    "CumulantSet",
    "CumulantTensor",
    "AdjustmentBundle",
    "ModelContract",
    "SolverOptions",
    "IterationRecord",
    "FitResult",
    "factor_information",
    "compute_adjustments",
    "adjusted_score",
    "scaled_adjusted_score",
    "solve",
    "wald_interval",
    "pack_tensor",
]

MAX_CONDITION = 1e12


class Method(str, enum.Enum):
    ML = "ml"
    MEAN_BR = "mean-br"
    MEDIAN_BR = "median-br"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"ml": cls.ML, "mean-br": cls.MEAN_BR, "meanbr": cls.MEAN_BR,
                   "median-br": cls.MEDIAN_BR, "medianbr": cls.MEDIAN_BR}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown method {value!r}; expected ml, mean-br or median-br") from None


@dataclass(frozen=True)
class ParameterPoint:
    """Joint parameter ``(beta, gamma)`` with block sizes ``p`` and ``q``."""

    theta: np.ndarray
    p: int
    q: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size != self.p + self.q:
            raise ValueError(f"theta has length {theta.size}, expected p + q = {self.p + self.q}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        object.__setattr__(self, "theta", theta)

    @property
    def beta(self):
        return self.theta[: self.p]

    @property
    def gamma(self):
        return self.theta[self.p:]


@dataclass
class CumulantSet:
    """Fisher information with the stacked ``P_s`` and ``Q_s`` matrices.

    ``P`` and ``Q`` have shape ``(d, d, d)`` with ``P[s]`` the matrix for
    parameter ``s``. Models may also supply the combinations
    ``P_s + Q_s`` and ``P_s/3 + Q_s/2`` directly; when present they are
    used in place of the raw arrays.
    """

    info: np.ndarray
    P: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    pq_sum: Optional[np.ndarray] = None
    pq_median: Optional[np.ndarray] = None

    def __post_init__(self):
        self.info = np.asarray(self.info, dtype=float)
        d = self.info.shape[0]
        if self.info.shape != (d, d):
            raise ValueError("info must be square")
        for name in ("P", "Q", "pq_sum", "pq_median"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape != (d, d, d):
                    raise ValueError(f"{name} must have shape {(d, d, d)}")
                setattr(self, name, value)
        if self.pq_sum is None or self.pq_median is None:
            if self.P is None or self.Q is None:
                raise ValueError("either P and Q or both combined forms are required")

    @property
    def dim(self):
        return self.info.shape[0]

    def sum_form(self):
        return self.pq_sum if self.pq_sum is not None else self.P + self.Q

    def median_form(self):
        return self.pq_median if self.pq_median is not None else self.P / 3.0 + self.Q / 2.0


@dataclass
class CumulantTensor:
    """Dense ``nu_{s,t,u}`` and ``nu_{s,tu}`` arrays plus the information."""

    nu3: np.ndarray
    nu21: np.ndarray
    info: np.ndarray


def pack_tensor(tensor: CumulantTensor) -> CumulantSet:
    """View a dense cumulant tensor as a :class:`CumulantSet`."""
    return CumulantSet(info=tensor.info, P=tensor.nu3, Q=tensor.nu21)


def block_tensor(X, Z, mean_w, prec_w):
    """Third-order array with slices ``[[X'WX, X'WZ], [Z'WX, Z'WZ]]``.

    Slice ``s`` uses weights ``(w_bb, w_bg, w_gg)`` multiplied by column ``s``
    of ``X`` (first ``p`` slices, ``mean_w``) or of ``Z`` (``prec_w``).
    """
    p, q = X.shape[1], Z.shape[1]
    T = np.empty((p + q, p + q, p + q))
    for S, (wbb, wbg, wgg), sl in ((X, mean_w, slice(0, p)), (Z, prec_w, slice(p, p + q))):
        T[sl, :p, :p] = np.einsum("is,it,iu->stu", S * wbb[:, None], X, X)
        cross = np.einsum("is,it,iu->stu", S * wbg[:, None], X, Z)
        T[sl, :p, p:] = cross
        T[sl, p:, :p] = cross.transpose(0, 2, 1)
        T[sl, p:, p:] = np.einsum("is,it,iu->stu", S * wgg[:, None], Z, Z)
    return T


@dataclass
class AdjustmentBundle:
    F1: np.ndarray
    F2: np.ndarray  # F2[s, r]
    F2tilde: np.ndarray
    meanAdj: np.ndarray
    medianAdj: np.ndarray
    M1: np.ndarray

    def for_method(self, method):
        method = Method.parse(method)
        if method is Method.ML:
            return np.zeros_like(self.meanAdj)
        if method is Method.MEAN_BR:
            return self.meanAdj
        return self.medianAdj


@dataclass
class InformationFactor:
    chol: tuple
    inverse: np.ndarray
    condition: float

    def solve(self, b):
        return cho_solve(self.chol, b)


def factor_information(info) -> InformationFactor:
    """Cholesky factor of a Fisher information with a condition check."""
    info = np.asarray(info, dtype=float)
    if not np.all(np.isfinite(info)):
        raise SingularInformationError("non-finite information matrix")
    eig = np.linalg.eigvalsh(0.5 * (info + info.T))
    if eig[0] <= 0.0:
        raise SingularInformationError("information matrix is not positive definite",
                                       np.inf if eig[0] == 0 else abs(eig[-1] / eig[0]))
    condition = eig[-1] / eig[0]
    if condition > MAX_CONDITION:
        raise SingularInformationError("information matrix is numerically singular", condition)
    try:
        chol = cho_factor(info, lower=True)
    except np.linalg.LinAlgError:
        raise SingularInformationError("Cholesky factorisation failed", condition) from None
    inverse = cho_solve(chol, np.eye(info.shape[0]))
    inverse = 0.5 * (inverse + inverse.T)
    return InformationFactor(chol, inverse, condition)


def compute_adjustments(c: CumulantSet, factor: Optional[InformationFactor] = None) -> AdjustmentBundle:
    """Mean and median bias adjustments from a cumulant set.

    ``F1_s = tr[i^-1 (P_s + Q_s)]`` and ``F2[s, r] = tr[h_r (P_s/3 + Q_s/2)]``
    with ``h_r = [i^-1]_r [i^-1]_r' / i^rr``. The median adjustment is
    ``i M1`` where ``M1_r = [i^-1]_r' (F1/2 - F2[:, r])``.
    """
    if factor is None:
        factor = factor_information(c.info)
    inv = factor.inverse
    diag = np.diag(inv)

    # tr(A B) = sum(A * B') and inv is symmetric
    F1 = np.einsum("tu,sut->s", inv, c.sum_form())
    F2 = np.einsum("tr,stu,ur->sr", inv, c.median_form(), inv) / diag[None, :]

    mean_adj = 0.5 * F1
    M1 = inv @ mean_adj - np.einsum("sr,sr->r", inv, F2)
    F2tilde = np.einsum("sr,sr->r", inv, F2)
    median_adj = c.info @ M1
    return AdjustmentBundle(F1=F1, F2=F2, F2tilde=F2tilde, meanAdj=mean_adj,
                            medianAdj=median_adj, M1=M1)


class ModelContract(Protocol):
    """What :func:`solve` needs from a model."""

    def parameter_dimension(self) -> tuple[int, int]: ...

    def log_likelihood(self, theta) -> float: ...

    def score(self, theta) -> np.ndarray: ...

    def cumulants(self, theta) -> CumulantSet: ...

    def default_start(self) -> ParameterPoint: ...


@dataclass
class SolverOptions:
    method: Method = Method.ML
    max_iterations: int = 200
    tolerance: float = 1e-8
    max_step_halvings: int = 20
    start: Optional[ParameterPoint] = None
    keep_trace: bool = True
    # called as monitor(theta, iteration); returning True stops the iteration
    monitor: Optional[Callable[[np.ndarray, int], bool]] = None

    def __post_init__(self):
        self.method = Method.parse(self.method)
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_step_halvings < 0:
            raise ValueError("max_step_halvings must be non-negative")


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    norm: float
    std_errors: np.ndarray
    step_scale: float = 1.0


@dataclass
class FitResult:
    method: Method
    estimate: ParameterPoint
    vcov: np.ndarray
    std_errors: np.ndarray
    iterations: int
    converged: bool
    final_adjusted_score_norm: float
    divergence_flag: bool = False
    divergence_components: list = field(default_factory=list)
    stop_reason: str = ""
    trace: list = field(default_factory=list)

    @property
    def theta(self):
        return self.estimate.theta


def adjusted_score(model: ModelContract, theta, method) -> np.ndarray:
    """``U(theta) + B(theta)`` for the requested method."""
    state = _evaluate(model, np.asarray(theta, dtype=float), Method.parse(method))
    return state.adjusted


def scaled_adjusted_score(model: ModelContract, theta, method) -> np.ndarray:
    """``i(theta)^-1 (U + B)``; its max-norm is the convergence measure."""
    state = _evaluate(model, np.asarray(theta, dtype=float), Method.parse(method))
    return state.step


@dataclass
class _State:
    theta: np.ndarray
    adjusted: np.ndarray
    step: np.ndarray
    norm: float
    factor: InformationFactor


def _evaluate(model, theta, method) -> _State:
    score = np.asarray(model.score(theta), dtype=float)
    if method is Method.ML:
        factor = factor_information(model.fisher_info(theta)) if hasattr(model, "fisher_info") \
            else factor_information(model.cumulants(theta).info)
        adjusted = score
    else:
        cumulants = model.cumulants(theta)
        factor = factor_information(cumulants.info)
        adjusted = score + compute_adjustments(cumulants, factor).for_method(method)
    if not np.all(np.isfinite(adjusted)):
        raise DomainError("non-finite adjusted score")
    step = factor.solve(adjusted)
    return _State(theta, adjusted, step, float(np.max(np.abs(step))), factor)


_RECOVERABLE = (DomainError, SingularInformationError, FloatingPointError, OverflowError)


def solve(model: ModelContract, opts: Optional[SolverOptions] = None) -> FitResult:
    """Solve ``U(theta) + B(theta) = 0`` by quasi-Fisher scoring.

    Each iteration proposes ``theta + i^-1 (U + B)`` with ``B`` equal to zero,
    the mean adjustment or the median adjustment. A proposal whose scaled
    score ``i^-1 (U + B)`` does not shrink in max-norm is halved up to
    ``max_step_halvings`` times; if no halving helps, the largest admissible
    step is taken anyway.
    """
    opts = opts or SolverOptions()
    method = opts.method
    p, q = model.parameter_dimension()
    start = opts.start if opts.start is not None else model.default_start()
    theta = np.array(start.theta if isinstance(start, ParameterPoint) else start, dtype=float)

    state = _evaluate(model, theta, method)
    trace = []

    def record(it, st, step_scale=1.0):
        if opts.keep_trace:
            trace.append(IterationRecord(it, st.theta.copy(), st.norm,
                                         np.sqrt(np.clip(np.diag(st.factor.inverse), 0, None)), step_scale))

    record(0, state)
    converged = state.norm < opts.tolerance
    iterations = 0
    stop_reason = "converged" if converged else ""
    while not converged and iterations < opts.max_iterations:
        iterations += 1
        chosen = None
        fallback = None
        scale = 1.0
        taken = fallback_scale = 1.0
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            for _ in range(opts.max_step_halvings + 1):
                candidate = state.theta + scale * state.step
                current = scale
                scale *= 0.5
                try:
                    cand = _evaluate(model, candidate, method)
                except _RECOVERABLE:
                    continue
                if cand.norm < state.norm:
                    chosen, taken = cand, current
                    break
                if fallback is None:
                    fallback, fallback_scale = cand, current
        if chosen is None:
            chosen, taken = fallback, fallback_scale
        if chosen is None:
            stop_reason = "no admissible step"
            break
        state = chosen
        record(iterations, state, taken)
        if state.norm < opts.tolerance:
            converged = True
            stop_reason = "converged"
            break
        if opts.monitor is not None and opts.monitor(state.theta, iterations):
            stop_reason = "stopped by monitor"
            break
    if not converged and not stop_reason:
        stop_reason = "iteration limit"

    vcov = state.factor.inverse.copy()
    return FitResult(
        method=method,
        estimate=ParameterPoint(state.theta, p, q),
        vcov=vcov,
        std_errors=np.sqrt(np.diag(vcov)),
        iterations=iterations,
        converged=converged,
        final_adjusted_score_norm=state.norm,
        stop_reason=stop_reason,
        trace=trace,
    )


def wald_interval(fit: FitResult, component: int, level: float = 0.95):
    """Normal-theory interval ``estimate +/- z * SE`` for one component."""
    d = fit.estimate.theta.size
    if not isinstance(component, (int, np.integer)) or not 0 <= component < d:
        raise IndexError(f"component must be an integer in [0, {d})")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if not fit.converged:
        raise ValueError("Wald intervals need a converged fit")
    z = normal_quantile(0.5 * (1.0 + level))
    est = fit.estimate.theta[component]
    se = fit.std_errors[component]
    return est - z * se, est + z * se
