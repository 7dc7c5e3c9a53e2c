"""Regenerates oracles.json with 50-digit arithmetic (mpmath).

Run from this directory: python3 gen_oracles.py
"""
import json
import random

import mpmath as mp

mp.mp.dps = 50

THETA = (mp.mpf("1.6"), mp.mpf("1.1"), mp.mpf("2.7"))
PLAN = [
    (20, mp.mpf(3), [mp.mpf("0.4"), mp.mpf("0.5"), mp.mpf("0.7")]),
    (25, mp.mpf(8), [mp.mpf("0.2"), mp.mpf("0.4"), mp.mpf("0.8")]),
    (30, mp.mpf(10), [mp.mpf("0.2"), mp.mpf("0.3"), mp.mpf("0.5")]),
]
FAILURES = [[3, 4, 6], [5, 6, 9], [7, 8, 9]]
TUNING = (mp.mpf(-1), mp.mpf("0.2"), mp.mpf(1))


def survival(th, nu, t):
    a, b, mu = th
    if t == 0:
        return mp.mpf(1)
    return (1 + (a * nu**b) ** mu * t ** (mu * (b + 1))) ** (-1 / (b + 1))


def cum_hazard(th, nu, t):
    a, b, mu = th
    return mp.log(1 + (a * nu**b) ** mu * t ** (mu * (b + 1))) / (b + 1)


def cells(th, nu, tau):
    s = [mp.mpf(1)] + [survival(th, nu, t) for t in tau]
    return [s[j] - s[j + 1] for j in range(len(tau))] + [s[-1]]


def epd_terms(p, q, tun):
    al, be, ga = tun
    return ((1 - be) * p ** (ga + 1) + be / al * mp.exp(al * p) * (p - 1 / al)
            - (be / al * mp.exp(al * p) + (ga + 1) / ga * (1 - be) * p**ga) * q)


def main():
    out = {}
    out["survival_point"] = {"theta": [1.6, 1.1, 2.7], "nu": 3.0, "t": 0.7,
                             "value": float(survival(THETA, mp.mpf(3), mp.mpf("0.7")))}
    out["reference_cells"] = [[float(v) for v in cells(THETA, nu, tau)] for _, nu, tau in PLAN]

    rng = random.Random(20240611)
    hz = []
    for _ in range(100):
        th = [rng.uniform(0.2, 4.0), rng.uniform(0.1, 3.0), rng.uniform(0.3, 5.0)]
        nu, t = rng.uniform(0.1, 12.0), rng.uniform(0.01, 2.0)
        thm = tuple(mp.mpf(x) for x in th)
        hz.append({"theta": th, "nu": nu, "t": t,
                   "survival": float(survival(thm, mp.mpf(nu), mp.mpf(t))),
                   "cum_hazard": float(cum_hazard(thm, mp.mpf(nu), mp.mpf(t)))})
    out["hazard_identity"] = hz

    # score vectors d ln p / d theta by 50-digit numerical differentiation
    scores = []
    for _, nu, tau in PLAN:
        g = []
        for j in range(len(tau) + 1):
            row = []
            for k in range(3):
                def f(x, k=k, j=j):
                    th = list(THETA)
                    th[k] = x
                    return mp.log(cells(tuple(th), nu, tau)[j])
                row.append(float(mp.diff(f, THETA[k])))
            g.append(row)
        scores.append(g)
    out["reference_scores"] = scores

    counts = []
    for (n, _, _), f in zip(PLAN, FAILURES):
        counts.append(f + [n - sum(f)])
    out["reference_counts"] = counts
    total = mp.mpf(0)
    for (n, nu, tau), c in zip(PLAN, counts):
        for p, cij in zip(cells(THETA, nu, tau), c):
            total += epd_terms(p, mp.mpf(cij) / n, TUNING)
    out["epd_objective"] = {"tuning": [-1.0, 0.2, 1.0], "value": float(total)}

    # ln Q_theta(X_ij) = -sum_j' [(1-b) p^(g+1) + (b/a) e^(a p)(p - 1/a) - lin(p) x_j']
    al, be, ga = TUNING
    lnq = []
    for (n, nu, tau) in PLAN:
        p = cells(THETA, nu, tau)
        const = sum((1 - be) * v ** (ga + 1) + be / al * mp.exp(al * v) * (v - 1 / al) for v in p)
        lin = [be / al * mp.exp(al * v) + (ga + 1) / ga * (1 - be) * v**ga for v in p]
        lnq.append([float(-(const - lin[j])) for j in range(len(p))])
    out["csm_log_q"] = lnq

    with open("oracles.json", "w") as fh:
        json.dump(out, fh, indent=1)


if __name__ == "__main__":
    main()
