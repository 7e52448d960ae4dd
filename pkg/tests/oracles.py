"""Pure-Python loop references for the verification metrics."""

import math

from updraft import shash


def rmse(y, yhat):
    s = 0.0
    for a, b in zip(y, yhat):
        s += (a - b) ** 2
    return math.sqrt(s / len(y))


def crmse(y, yhat, t):
    sel = [(a, b) for a, b in zip(y, yhat) if a >= t]
    return rmse([a for a, _ in sel], [b for _, b in sel])


def iou(a, b, t):
    inter = union = 0
    for u, v in zip(a, b):
        inter += (u > t) and (v > t)
        union += (u > t) or (v > t)
    return inter / union


def r2(y, yhat):
    m = sum(y) / len(y)
    return 1.0 - sum((a - b) ** 2 for a, b in zip(y, yhat)) / sum((a - m) ** 2 for a in y)


def pit_hist(values, bins=10):
    counts = [0] * bins
    for v in values:
        k = bins - 1 if v >= 1.0 else int(v * bins)
        counts[k] += 1
    return [c / len(values) for c in counts]


def pitd(freq):
    b = len(freq)
    return math.sqrt(sum((f - 1.0 / b) ** 2 for f in freq) / b)


def iqr_rate(y, params):
    hits = 0
    for i, v in enumerate(y):
        p = params[i]
        lo = float(shash.quantile(p, 0.25))
        hi = float(shash.quantile(p, 0.75))
        hits += lo <= v <= hi
    return hits / len(y)


def area_fraction(field, t):
    return 100.0 * sum(1 for v in field if v > t) / len(field)


def _mp_shash_pdf(mu, r_sigma, gamma, r_tau, y):
    import mpmath as mp

    s = mp.exp(r_sigma / (10 * mp.e))
    t = mp.exp(r_tau / (10 * mp.e))
    z = (y - mu) / s
    u = t * mp.asinh(z) - gamma
    return t / (s * mp.sqrt(2 * mp.pi)) * mp.cosh(u) / mp.sqrt(1 + z * z) * mp.exp(-mp.sinh(u) ** 2 / 2)


def nll_central_diff(raw, y, threshold=0.0, weight_above=1.0, eps=1e-7, h="1e-20"):
    """Central differences of the single-pixel weighted NLL in extended precision.

    The working precision grows with -log10(p) so that slopes of tiny
    likelihoods are still resolved; in double precision they drown in
    round-off of the O(1) loss.
    """
    import mpmath as mp

    raw = [float(v) for v in raw]
    y = float(y)
    with mp.workdps(30):
        p = _mp_shash_pdf(*(mp.mpf(v) for v in raw), mp.mpf(y))
        digits = 60 + max(0, int(-mp.log10(p)))
    w = weight_above if y >= threshold else 1.0
    out = []
    with mp.workdps(digits):
        r = [mp.mpf(v) for v in raw]
        step = mp.mpf(h)

        def f(args):
            return -w * mp.log(_mp_shash_pdf(*args, mp.mpf(y)) + mp.mpf(eps))

        for k in range(4):
            a, b = list(r), list(r)
            a[k] += step
            b[k] -= step
            out.append(float((f(a) - f(b)) / (2 * step)))
    return out
