"""Index-notation evaluation of the median adjustment, for testing only.

This is a deliberately naive O(d^4) transcription of the profile-score
cumulant form. Apart from the container type it shares no code with
:mod:`medbr.engine` and exists to check the matrix formula there.
"""

import numpy as np

from .engine import CumulantTensor
from .errors import SingularInformationError

MAX_DIM = 6


def _inverse(a):
    # Gauss-Jordan with partial pivoting, kept separate from the Cholesky path
    n = len(a)
    m = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(a)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(m[r][col]))
        if abs(m[pivot][col]) < 1e-300:
            raise SingularInformationError("singular information in oracle")
        m[col], m[pivot] = m[pivot], m[col]
        lead = m[col][col]
        m[col] = [v / lead for v in m[col]]
        for r in range(n):
            if r != col:
                factor = m[r][col]
                if factor != 0.0:
                    m[r] = [vr - factor * vc for vr, vc in zip(m[r], m[col])]
    return [row[n:] for row in m]


def index_notation_oracle(tensor):
    """Return ``M1`` with ``M1_r = M_r / kappa_2r``, ``M_r = -kappa_1r + kappa_3r / (6 kappa_2r)``."""
    info = [[float(v) for v in row] for row in np.asarray(tensor.info)]
    nu3 = np.asarray(tensor.nu3, dtype=float)
    nu21 = np.asarray(tensor.nu21, dtype=float)
    d = len(info)
    if d > MAX_DIM:
        raise ValueError(f"oracle limited to d <= {MAX_DIM}")
    inv = _inverse(info)

    m1 = []
    for r in range(d):
        irr = inv[r][r]
        kappa1 = 0.0
        for s in range(d):
            for t in range(d):
                for u in range(d):
                    nu_r_tu = inv[t][u] - inv[t][r] * inv[r][u] / irr
                    kappa1 += inv[r][s] * nu_r_tu * (nu21[s, t, u] + nu3[s, t, u])
        kappa1 *= -0.5 / irr
        kappa2 = 1.0 / irr
        kappa3 = 0.0
        for s in range(d):
            for t in range(d):
                for u in range(d):
                    kappa3 += inv[r][s] * inv[r][t] * inv[r][u] * nu3[s, t, u]
        kappa3 /= irr ** 3
        m_r = -kappa1 + kappa3 / (6.0 * kappa2)
        m1.append(m_r / kappa2)
    return np.array(m1)


def random_tensor(d, rng):
    """Random instance: SPD information, fully symmetric ``nu3``, ``nu21`` symmetric in its last two indices."""
    a = rng.standard_normal((d, d))
    info = a @ a.T + d * np.eye(d)
    raw = rng.standard_normal((d, d, d))
    nu3 = sum(raw.transpose(perm) for perm in
              ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))) / 6.0
    raw = rng.standard_normal((d, d, d))
    nu21 = 0.5 * (raw + raw.transpose(0, 2, 1))
    return CumulantTensor(nu3, nu21, info)
