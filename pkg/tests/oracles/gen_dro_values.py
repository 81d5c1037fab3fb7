"""Regenerate dro_values.json with mpmath at 60 significant digits.

Every quantity is evaluated from the raw textbook formulas (no max shifts, no
shared helpers with the package) so the frozen values are an independent
reference for the float64 implementations.

Run from the repository root:  python tests/oracles/gen_dro_values.py
"""

import json
import pathlib

import mpmath as mp
import numpy as np

mp.mp.dps = 60

CASES = {
    # name: positive, contrast, tau, tau0, rho
    "k4_moderate": (0.7, [-1.2, 0.4, 2.0, 0.3], 0.8, 0.05, 0.7),
    "k8_cold": (-0.3, None, 0.15, 0.001, 2.0),  # contrast drawn below
    "k1_single": (2.0, [1.0], 1.3, 0.001, 10.0),
    "k3_tiny_tau": (0.0, [0.5, -0.2, 0.1], 1e-8, 1e-6, 9.0),
    "k2_hot": (1.5, [0.2, -0.8], 25.0, 0.5, 0.25),
}

LSE_CASES = {
    "pair_zero": [0.0, 0.0],
    "single": [-3.75],
    "wide_64": list(np.random.default_rng(20240817).normal(size=64) * 1e4),
}


def lse(values):
    return mp.log(mp.fsum(mp.e**mp.mpf(v) for v in values))


def quantities(positive, contrast, tau, tau0, rho):
    tau = mp.mpf(tau)
    rho = mp.mpf(rho)
    k = len(contrast)
    h = [mp.mpf(c) - mp.mpf(positive) for c in contrast]
    raw = [mp.mpf(c) for c in contrast]

    log_mean = lse([x / tau for x in h]) - mp.log(k)
    loss = tau * log_mean + tau * rho

    weights = [mp.e ** (x / tau) for x in h]
    z = mp.fsum(weights)
    p = [w / z for w in weights]
    grad = log_mean - mp.fsum(pi * x / tau for pi, x in zip(p, h)) + rho

    first = mp.fsum(pi * (x / tau) ** 2 for pi, x in zip(p, h))
    second = mp.fsum(pi * x / tau for pi, x in zip(p, h)) ** 2
    hess = (first - second) / tau

    mean_raw = mp.fsum(raw) / k
    bz = tau * (lse([x / tau for x in raw]) - mp.log(k)) - mean_raw
    fp = (mp.fsum((pi - mp.mpf(1) / k) * x for pi, x in zip(p, raw)) - bz) / rho

    return {
        "loss": float(loss),
        "grad": float(grad),
        "hess": float(hess),
        "bz": float(bz),
        "fixed_point_rhs": float(fp),
        "gibbs": [float(pi) for pi in p],
    }


def main():
    rng = np.random.default_rng(7)
    out = {"cases": {}, "logsumexp": {}}
    for name, (positive, contrast, tau, tau0, rho) in CASES.items():
        if contrast is None:
            contrast = list(rng.normal(size=8) * 1.5)
        out["cases"][name] = {
            "positive": positive,
            "contrast": list(map(float, contrast)),
            "tau": tau,
            "tau0": tau0,
            "rho": rho,
            "expected": quantities(positive, contrast, tau, tau0, rho),
        }
    for name, values in LSE_CASES.items():
        out["logsumexp"][name] = {"values": values, "expected": float(lse(values))}

    path = pathlib.Path(__file__).with_name("dro_values.json")
    path.write_text(json.dumps(out, indent=1))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
