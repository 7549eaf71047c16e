"""High-precision oracle for the schedule closed forms.

Prints Rust literals that are frozen into frozen.rs.
Run: python3 schedule_oracle.py
"""
from mpmath import mp, mpf, sqrt, exp, log, ceil

mp.dps = 50

EPS, T, RHO, SD = mpf("0.002"), mpf(80), mpf(7), mpf("0.5")
S0, S1, MU0 = 2, 150, mpf("0.9")


def sigmas(n):
    a, b = EPS ** (1 / RHO), T ** (1 / RHO)
    return [(a + mpf(i) / (n - 1) * (b - a)) ** RHO for i in range(n)]


def big_n(k, total):
    r = mpf(k) / total * ((S1 + 1) ** 2 - S0**2) + S0**2
    return int(ceil(sqrt(r) - 1)) + 1


def mu(k, total):
    return exp(S0 * log(MU0) / big_n(k, total))


def coeffs(t):
    t = mpf(t)
    skip = SD**2 / ((t - EPS) ** 2 + SD**2)
    out = SD * (t - EPS) / sqrt(SD**2 + t**2)
    cin = 1 / sqrt(SD**2 + t**2)
    return skip, out, cin


def lit(x):
    return mp.nstr(x, 25, strip_zeros=False, min_fixed=-30, max_fixed=30)


print("// karras_sigmas(3)")
print([lit(x) for x in sigmas(3)])
print("// karras_sigmas(18)")
print(",\n".join(lit(x) for x in sigmas(18)))
print("// N(k), K=100000")
for k in [0, 1, 1000, 25000, 50000, 77777, 99999, 100000]:
    print(k, big_n(k, 100000), lit(mu(k, 100000)))
print("// coeffs")
for t in ["0.002", "0.01", "0.5", "2.5", "80"]:
    print(t, [lit(c) for c in coeffs(t)])
