"""Frozen reference values for the RDP to (eps, delta) conversion.

eps' = eps + log((alpha - 1) / alpha) - (log(delta) + log(alpha)) / (alpha - 1)

evaluated with 50 significant digits. Run from this directory to regenerate
eps_delta.csv.
"""
import csv
from mpmath import mp, mpf, log

mp.dps = 50

ALPHAS = ["1.5", "2", "3", "10", "64"]
EPS = ["0", "0.5", "10"]
DELTAS = ["1e-3", "1e-5", "1e-9"]


def convert(alpha, eps, delta):
    a, e, d = mpf(alpha), mpf(eps), mpf(delta)
    return e + log((a - 1) / a) - (log(d) + log(a)) / (a - 1)


rows = [(a, e, d) for a in ALPHAS for e in EPS for d in DELTAS]
rows = rows[:45] + [("1.01", "0.001", "1e-5"), ("1.25", "2.5", "0.5"),
                    ("7", "123.456", "1e-12"), ("32", "0.25", "1e-6"), ("256", "40", "1e-5")]
assert len(rows) == 50

with open("eps_delta.csv", "w", newline="") as f:
    w = csv.writer(f)
    w.writerow(["alpha", "eps_rdp", "delta", "eps_dp"])
    for a, e, d in rows:
        w.writerow([a, e, d, mp.nstr(convert(a, e, d), 30)])

print(mp.nstr(convert("10", "0.5", "1e-5"), 10))
