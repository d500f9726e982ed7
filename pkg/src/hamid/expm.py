"""Matrix exponential by scaling and squaring with diagonal Padé approximants.

Follows Higham (2005): pick the lowest Padé degree in {3, 5, 7, 9, 13}
whose backward-error bound covers ``||A||_1``; otherwise scale by a power
of two, apply degree 13 and square back.
"""

from __future__ import annotations

import numpy as np

_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (
        17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0,
    ),
    13: (
        64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
        1187353796428800.0, 129060195264000.0, 10559470521600.0,
        670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
        960960.0, 16380.0, 182.0, 1.0,
    ),
}

# max ||A||_1 for which degree m meets unit-roundoff backward error
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}


def _pade(a: np.ndarray, m: int) -> np.ndarray:
    b = _PADE_COEFFS[m]
    ident = np.eye(a.shape[0], dtype=a.dtype)
    a2 = a @ a
    if m == 13:
        a4 = a2 @ a2
        a6 = a4 @ a2
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
        v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
             + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    else:
        powers = [ident, a2]
        for _ in range(2, (m + 1) // 2):
            powers.append(powers[-1] @ a2)
        u = sum(b[j] * powers[j // 2] for j in range(m, 0, -2))
        u = a @ u
        v = sum(b[j] * powers[j // 2] for j in range(m - 1, -1, -2))
    return np.linalg.solve(v - u, v + u)


def expm(a) -> np.ndarray:
    """Return ``exp(a)`` for a square real or complex matrix."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("expm input contains non-finite entries")
    if not np.iscomplexobj(a):
        a = a.astype(float)
    if a.shape[0] == 0:
        return a.copy()

    norm = np.linalg.norm(a, 1)
    for m in (3, 5, 7, 9):
        if norm <= _THETA[m]:
            return _pade(a, m)

    s = 0
    if norm > _THETA[13]:
        s = max(0, int(np.ceil(np.log2(norm / _THETA[13]))))
    r = _pade(a / 2.0**s, 13)
    for _ in range(s):
        r = r @ r
    return r
