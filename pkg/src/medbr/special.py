"""Log-gamma and polygamma functions for strictly positive real arguments.

Both functions accept scalars or numpy arrays and return the same shape.
Arguments must be positive and finite; anything else raises ``DomainError``.
"""

import math
from statistics import NormalDist

import numpy as np

from .errors import DomainError

__all__ = ["log_gamma", "polygamma", "digamma", "trigamma", "tetragamma", "normal_quantile"]

EULER_GAMMA = 0.57721566490153286061
HALF_LOG_2PI = 0.91893853320467274178

# B_2, B_4, ..., B_14
_BERNOULLI = (1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0)

# zeta(k) - 1 for k = 2, 3, ..., 30
_ZETA_M1 = (
    0.64493406684822643647, 0.2020569031595942854, 0.082323233711138191516,
    0.036927755143369926331, 0.017343061984449139715, 0.0083492773819228268398,
    0.0040773561979443393787, 0.0020083928260822144179, 0.00099457512781808533715,
    0.0004941886041194645587, 0.00024608655330804829864, 0.00012271334757848914675,
    0.000061248135058704829259, 0.000030588236307020493552, 0.000015282259408651871733,
    7.6371976378997622736e-6, 3.8172932649998398565e-6, 1.9082127165539389257e-6,
    9.5396203387279611315e-7, 4.7693298678780646312e-7, 2.3845050272773299e-7,
    1.1921992596531107307e-7, 5.9608189051259479612e-8, 2.9803503514652280186e-8,
    1.4901554828365041235e-8, 7.450711789835429492e-9, 3.7253340247884570548e-9,
    1.8626597235130490064e-9, 9.3132743241966818287e-10,
)

# Taylor coefficients of digamma about its positive root
_PSI_ROOT_HI = 1.4616321449683622
_PSI_ROOT_LO = 9.549995429965697e-17
_PSI_ROOT_TAYLOR = (
    0.96767224544762117043, -0.44276316898359210609, 0.25849976095565101062,
    -0.1639427054424065275, 0.10782405069126236576, -0.072199561256454710926,
    0.048804288164143107225, -0.033161126474847359292, 0.02259764823221810466,
    -0.015424765904948959139, 0.010538791616612175388, -0.007204534386356868241,
)
_PSI_ROOT_WINDOW = 0.05

# recurrence is applied until the argument reaches this value
SHIFT_THRESHOLD = 10.0


def _as_positive_array(a, name="a"):
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} must be positive and finite")
    return arr


def _restore(arr, like):
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def _lgamma_near_two(z):
    # log Gamma(2 + z) for |z| <= 1/2
    total = np.zeros_like(z)
    power = z * z
    for k, c in enumerate(_ZETA_M1, start=2):
        sign = 1.0 if k % 2 == 0 else -1.0
        total = total + sign * c / k * power
        power = power * z
    return (1.0 - EULER_GAMMA) * z + total


def _lgamma_stirling(a):
    inv = 1.0 / a
    inv2 = inv * inv
    series = np.zeros_like(a)
    power = inv
    for k, b in enumerate(_BERNOULLI, start=1):
        series = series + b / (2 * k * (2 * k - 1)) * power
        power = power * inv2
    return (a - 0.5) * np.log(a) - a + HALF_LOG_2PI + series


def log_gamma(a):
    """Natural log of the gamma function for a > 0."""
    x = _as_positive_array(a)
    x = np.atleast_1d(x).copy()
    out = np.empty_like(x)
    offset = np.zeros_like(x)

    small = x < 0.5
    offset[small] -= np.log(x[small])
    x[small] += 1.0

    low = x < 1.5
    out[low] = _lgamma_near_two(x[low] - 1.0) - np.log(x[low])
    mid = (x >= 1.5) & (x < 2.5)
    out[mid] = _lgamma_near_two(x[mid] - 2.0)

    high = x >= 2.5
    xh = x[high]
    shift = np.zeros_like(xh)
    while np.any(xh < SHIFT_THRESHOLD):
        m = xh < SHIFT_THRESHOLD
        shift[m] += np.log(xh[m])
        xh[m] += 1.0
    out[high] = _lgamma_stirling(xh) - shift

    out += offset
    return _restore(out.reshape(np.shape(a)), a)


def _check_order(order):
    if order not in (0, 1, 2):
        raise ValueError(f"polygamma order must be 0, 1 or 2, got {order!r}")


def _polygamma_asymptotic(order, x):
    inv = 1.0 / x
    inv2 = inv * inv
    if order == 0:
        series = np.log(x) - 0.5 * inv
        power = inv2
        for k, b in enumerate(_BERNOULLI, start=1):
            series = series - b / (2 * k) * power
            power = power * inv2
        return series
    # (-1)^(n+1) [ (n-1)!/x^n + n!/(2 x^(n+1)) + sum_k B_2k (2k+n-1)!/(2k)! / x^(2k+n) ]
    n = order
    series = math.factorial(n - 1) * inv**n + math.factorial(n) * 0.5 * inv ** (n + 1)
    power = inv ** (n + 2)
    for k, b in enumerate(_BERNOULLI, start=1):
        coef = math.factorial(2 * k + n - 1) / math.factorial(2 * k)
        series = series + b * coef * power
        power = power * inv2
    return series if n % 2 == 1 else -series


def polygamma(order, a):
    """Polygamma function of order 0 (digamma), 1 (trigamma) or 2 (tetragamma)."""
    _check_order(order)
    x = np.atleast_1d(_as_positive_array(a)).copy()
    # psi^(l)(a) = psi^(l)(a+1) + (-1)^(l+1) l! a^(-l-1)
    sign = -1.0 if order % 2 == 0 else 1.0
    fact = float(math.factorial(order))
    steps = np.maximum(np.ceil(SHIFT_THRESHOLD - x), 0.0)
    correction = np.zeros_like(x)
    for j in range(int(steps.max())):
        active = j < steps
        correction += np.where(active, (x + j) ** (-order - 1), 0.0)
    correction *= sign * fact
    x += steps
    out = _polygamma_asymptotic(order, x) + correction
    if order == 0:
        # the shifted evaluation loses relative accuracy next to the root
        orig = np.atleast_1d(np.asarray(a, dtype=float))
        near = np.abs(orig - _PSI_ROOT_HI) < _PSI_ROOT_WINDOW
        if near.any():
            h = (orig[near] - _PSI_ROOT_HI) - _PSI_ROOT_LO
            acc = np.zeros_like(h)
            for c in reversed(_PSI_ROOT_TAYLOR):
                acc = (acc + c) * h
            out[near] = acc
    return _restore(out.reshape(np.shape(a)), a)


def digamma(a):
    return polygamma(0, a)


def trigamma(a):
    return polygamma(1, a)


def tetragamma(a):
    return polygamma(2, a)


def normal_quantile(p):
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    return NormalDist().inv_cdf(p)
