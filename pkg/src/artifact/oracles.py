"""Brute-force reference values for small trees and short chains.

Everything here is computed by direct quadrature over the Gaussian
increments, with no convolution grid, so it can check the dynamic
programs independently. Costs grow exponentially with depth; depths up to 3
are intended.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr, owens_t
from scipy.stats import norm

Potential = Callable[[np.ndarray], np.ndarray]


def tail_quadrature(n: int, v: float) -> float:
    """``log P(min over the 2^n leaves >= v)`` without a convolution grid.

    Depths 1 and 2 are closed forms; each further generation adds one
    adaptive quadrature of ``P_j(v) = (E P_{j-1}(v - Z))^2``, so depth
    ``n`` nests ``n - 2`` integrals.
    """
    if n < 0:
        raise ValueError("depth must be nonnegative")
    if n == 0:
        return 0.0 if v <= 0 else -math.inf
    if n == 1:
        return 2.0 * float(log_ndtr(-v))
    if n == 2:
        return float(tail_closed_form_2(v))

    def half(j: int, x: float) -> float:
        # E P_{j-1}(x - Z), linear scale
        if j == 3:
            inner = lambda y: math.exp(float(tail_closed_form_2(y)))
        else:
            inner = lambda y: half(j - 1, y) ** 2
        f = lambda z: norm.pdf(z) * inner(x - z)
        val, _ = integrate.quad(f, -14.0, 14.0, points=[x], epsabs=0.0, epsrel=1e-13, limit=400)
        return val

    return 2.0 * math.log(half(n, v))


def tail_closed_form_2(v) -> np.ndarray:
    """``log P(min over 4 leaves >= v)`` via the bivariate normal orthant.

    Two grandchildren of one child clear ``v`` with probability
    ``Phi2(-v/sqrt2, -v/sqrt2; 1/2) = Phi(h) - 2 T(h, 1/sqrt3)``, ``h = -v/sqrt2``.
    """
    h = -np.asarray(v, dtype=float) / math.sqrt(2.0)
    t = owens_t(h, 1.0 / math.sqrt(3.0))
    with np.errstate(divide="ignore"):
        lower = np.log(ndtr(h) - 2.0 * t)
        upper = np.log1p(-(ndtr(-h) + 2.0 * t))
    return 2.0 * np.where(h > 0, upper, lower)


class TensorChain:
    """Path law of a short chain on a tensor Gauss-Legendre rule.

    Paths ``(X_1..X_l)`` with ``X_0 = start`` have density proportional to
    ``prod_k phi(X_k - X_{k-1}) exp(lam_k(X_k))``.
    """

    def __init__(self, potentials: Sequence[Potential], start: float = 0.0,
                 box: tuple[float, float] = (-10.0, 10.0), nodes: int = 120):
        l = len(potentials)
        if not 1 <= l <= 3:
            raise ValueError("tensor quadrature is meant for chains of length 1..3")
        t, w = np.polynomial.legendre.leggauss(nodes)
        a, b = box
        self.x = 0.5 * (b - a) * t + 0.5 * (a + b)
        self.w = 0.5 * (b - a) * w
        self.l = l
        self.start = start
        logw = np.zeros((nodes,) * l)
        prev = None
        for k, lam in enumerate(potentials):
            shape = [1] * l
            shape[k] = nodes
            xk = self.x.reshape(shape)
            base = start if prev is None else prev
            logw = logw + norm.logpdf(xk - base) + lam(xk) + np.log(self.w).reshape(shape)
            prev = xk
        self.logw = logw
        top = logw.max()
        self.weights = np.exp(logw - top)
        self.log_Z = float(top + math.log(self.weights.sum()))
        self.weights /= self.weights.sum()

    def coord(self, k: int) -> np.ndarray:
        shape = [1] * self.l
        shape[k - 1] = len(self.x)
        return self.x.reshape(shape)

    def expect(self, fn) -> float:
        return float(np.sum(self.weights * np.broadcast_to(fn(self), self.weights.shape)))

    def mean(self, k: int) -> float:
        return self.expect(lambda c: c.coord(k)) if k else self.start

    def cov(self, k: int, k2: int) -> float:
        if k == 0 or k2 == 0:
            return 0.0
        m1, m2 = self.mean(k), self.mean(k2)
        return self.expect(lambda c: (c.coord(k) - m1) * (c.coord(k2) - m2))


def kernel_quadrature(potentials: Sequence[Potential], k: int, v: float, u) -> np.ndarray:
    """Log-density of ``X_{k+1}`` given ``X_k = v`` on a chain of length <= 3, by Bayes' rule.

    The downstream weight is integrated with adaptive quadrature.
    """
    l = len(potentials)
    if not 0 <= k < l:
        raise ValueError("need 0 <= k < l")

    def downstream(x: float, j: int) -> float:
        # E over the rest of the path given X_j = x, linear scale
        if j == l:
            return 1.0
        f = lambda y: norm.pdf(y - x) * math.exp(potentials[j](np.array(y))) * downstream(y, j + 1)
        val, _ = integrate.quad(f, x - 12.0, x + 12.0, epsabs=0.0, epsrel=1e-12, limit=200)
        return val

    def unnorm(x):
        return norm.pdf(x - v) * math.exp(potentials[k](np.array(x))) * downstream(x, k + 1)

    z, _ = integrate.quad(unnorm, v - 12.0, v + 12.0, epsabs=0.0, epsrel=1e-12, limit=200)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return np.log(np.array([unnorm(x) for x in u]) / z)
