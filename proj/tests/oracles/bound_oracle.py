#!/usr/bin/env python3
"""Reference values for the HFL and MACFL convergence bounds.

Evaluates each addend at 50 significant digits with mpmath, written directly
from the closed-form expressions and independent of the C++ code. The printed
numbers are pasted into tests/test_analysis.cpp.
"""
from mpmath import mp, mpf, sqrt

mp.dps = 50


def hfl(eta, p, T, L, sigma, G, eps_c, eps_g, k1, k2, f0, alpha, alpha_c):
    eta, p, L, sigma, G, eps_c, eps_g, f0 = map(mpf, (eta, p, L, sigma, G, eps_c, eps_g, f0))
    k1, k2, T = mpf(k1), mpf(k2), mpf(T)
    alpha = [mpf(a) for a in alpha]
    alpha_c = [mpf(a) for a in alpha_c]
    d1 = 1 - 12 * eta**2 * L**2 * k1**2 * k2**2 * p**2
    d2 = 1 - 12 * eta**2 * L**2 * k1**2 * p**2
    n8 = 1 - 8 * eta**2 * p**2 * L**2 * k1**2 * k2**2
    init = 2 / (eta * p * T) * f0
    var = eta * L * sigma**2 * sum(a * a for a in alpha)
    tg = 4 * (1 - 6 * L**2 * eta**2 * p**2 * k1**2 * k2**2) / d1 * eps_g**2
    tc = 4 * (1 + n8 * 6 * eta**2 * L**2 * p**2 * k1**2 / (d1 * d2)) * eps_c**2
    pref = 8 * L**2 * eta**2 * k1 * p * (sigma**2 + (1 - p) * G**2) / d1
    mob = pref * sum(a * (2 * k2 * (ac - a) + n8 / d2 * (1 - ac)) for a, ac in zip(alpha, alpha_c))
    return [init, var, tg, tc, mob]


def macfl(eta, T, L, sigma_m, eps_mc, eps_mg, k1, k2, f0, beta, beta_c):
    eta, L, sigma_m, eps_mc, eps_mg, f0 = map(mpf, (eta, L, sigma_m, eps_mc, eps_mg, f0))
    k1, k2, T = mpf(k1), mpf(k2), mpf(T)
    beta = [mpf(b) for b in beta]
    beta_c = [mpf(b) for b in beta_c]
    d1 = 1 - 12 * eta**2 * L**2 * k1**2 * k2**2
    d2 = 1 - 12 * eta**2 * L**2 * k1**2
    n8 = 1 - 8 * eta**2 * L**2 * k1**2 * k2**2
    init = 2 / (eta * T) * f0
    var = eta * L * sigma_m**2 * sum(b * b for b in beta)
    tg = 12 * L**2 * eta**2 * k1**2 * k2**2 / d1 * eps_mg**2
    tc = 12 * L**2 * eta**2 * k1**2 * n8 / (d2 * d1) * eps_mc**2
    drift = 4 * L**2 * eta**2 * k1 / d1 * sigma_m**2 * sum(
        b * (n8 / d2 * (1 - bc) + 2 * k2 * (bc - b)) for b, bc in zip(beta, beta_c))
    return [init, var, tg, tc, drift]


def show(name, terms):
    print(f"{name}: total = {mp.nstr(sum(terms), 25)}")
    for t in terms:
        print(f"    {mp.nstr(t, 25)}")


def uniform(M, N):
    return [mpf(1) / M] * M, [mpf(N) / M] * M


if __name__ == "__main__":
    a, ac = uniform(50, 5)
    # Standard inputs: eta=0.001, p_s=0.5, T=100, L=1, sigma=G=1, eps=0.1, k1=20, k2=1.
    show("hfl_standard", hfl("0.001", "0.5", 100, 1, 1, 1, "0.1", "0.1", 20, 1, 1, a, ac))
    show("macfl_standard", macfl("0.001", 100, 1, 1, "0.1", "0.1", 20, 1, 1, a, ac))

    # Near the step-size cap with kappa2 = 2 and p_s = 1.
    cap = 1 / (sqrt(12) * 1 * 20 * 2)
    eta = mpf("0.99") * cap
    print("near_cap_eta =", mp.nstr(eta, 25), "(0.99 cap)")
    show("hfl_near_cap", hfl(eta, 1, 100, 1, 1, 1, "0.1", "0.1", 20, 2, 1, a, ac))
    show("macfl_near_cap", macfl(eta, 100, 1, 1, "0.1", "0.1", 20, 2, 1, a, ac))

    # Non-uniform weights: M=4, N=2, clusters {0,1} and {2,3}.
    alpha = ["0.1", "0.2", "0.3", "0.4"]
    alpha_c = [mpf("0.1") / mpf("0.3"), mpf("0.2") / mpf("0.3"), mpf("0.3") / mpf("0.7"),
               mpf("0.4") / mpf("0.7")]
    show("hfl_weighted", hfl("0.002", "0.7", 50, 2, "1.5", 3, "0.2", "0.3", 5, 3, "2.5", alpha, alpha_c))
    show("macfl_weighted", macfl("0.002", 50, 2, "1.5", "0.2", "0.3", 5, 3, "2.5", alpha, alpha_c))
