#!/usr/bin/env python3
"""Measure the angle-spectrum parity of the target energy on a toy torus.

The z-flip symmetry (z -> -z, p_z -> -p_z) of an axisymmetric, plane-
symmetric target shifts the nu-like toy angle by pi and leaves the
lambda-like one alone, so H(theta) on a torus can carry no odd-k_nu
power — but nothing constrains the k_lam parity.  This script takes the
plain toy torus (S = 0) of the default logarithmic target, FFTs the
energy residual over the angle grid, and prints the maximum |amplitude|
in each parity class.  The odd-k_lam content is comparable to the even
content, which is why the fit wave set must keep both k_lam parities.

Usage: python3 scripts/wave_parity_experiment.py [--n 96] [--j 0.5,0.45,0.5]
"""

import argparse

import numpy as np

from staeckeltorus.numerics import LMConfig
from staeckeltorus.target import FitRegion, LogTarget, fit_toy_params
from staeckeltorus.torusfit import TorusModel, WaveSet, torus_points


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=96, help="grid points per angle")
    ap.add_argument("--j", default="0.5,0.45,0.5",
                    help="actions J_lam,J_phi,J_nu")
    args = ap.parse_args()
    J = np.array([float(x) for x in args.j.split(",")])

    target = LogTarget()
    toy_params, _, _ = fit_toy_params(target, FitRegion(), LMConfig())
    ws = WaveSet(np.array([[1, 0]]))  # placeholder; S = 0 throughout
    model = TorusModel(J=J, waves=ws, S=np.zeros(1), toy_params=toy_params)

    n = args.n
    tl = np.arange(n) * 2.0 * np.pi / n
    tn = (np.arange(n) + 0.5) * 2.0 * np.pi / n
    TL, TN = np.meshgrid(tl, tn, indexing="ij")
    theta = np.column_stack([TL.ravel(), np.zeros(n * n), TN.ravel()])
    u, _, _ = torus_points(theta, model)
    H, _ = target.value_and_gradient_batch(u)
    H = H.reshape(n, n)

    amp = np.abs(np.fft.fft2(H - H.mean())) / (n * n)
    kl = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    KL, KN = np.meshgrid(kl, kl, indexing="ij")
    for name, mask in (
        ("even k_lam, even k_nu", (KL % 2 == 0) & (KN % 2 == 0)),
        ("odd  k_lam, even k_nu", (KL % 2 == 1) & (KN % 2 == 0)),
        ("any  k_lam, odd  k_nu", KN % 2 == 1),
    ):
        m = mask & ~((KL == 0) & (KN == 0))
        print(f"{name}: max |amplitude| = {amp[m].max():.3e}")


if __name__ == "__main__":
    main()
