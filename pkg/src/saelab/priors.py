"""Penalized-complexity priors.

Three families, all exponential in a Kullback-Leibler-based distance
from a base model:

* ``pc_sd``: standard deviation of a Gaussian effect, base sigma = 0.
  Exponential with rate lambda = -ln(alpha)/U so that P(sigma > U) = alpha.
* ``pc_phi``: BYM2 mixing parameter, base phi = 0 (pure iid).  The
  distance uses the eigenvalues of the scaled ICAR generalized inverse;
  the rate is calibrated by bisection so P(phi < 1/2) hits a target mass.
* ``pc_matern``: joint range/SD prior for the Matern field.  The range
  part has CDF F(rho) = exp(-lambda_rho * rho^(-d/2)) with d = 2 and the
  median pinned to one fifth of the domain diameter; the SD part is the
  same exponential family as pc_sd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmrf import ScaledIcar

_PHI_GRID_SIZE = 2001
_PHI_MAX = 1.0 - 5e-4


@dataclass(frozen=True)
class PcSdPrior:
    """Exponential PC prior on a standard deviation: P(sigma > U) = alpha."""

    u: float
    alpha: float
    rate: float = field(init=False)

    def __post_init__(self):
        if self.u <= 0 or not (0.0 < self.alpha < 1.0):
            raise ValueError("need U > 0 and alpha in (0, 1)")
        object.__setattr__(self, "rate", -np.log(self.alpha) / self.u)

    def log_pdf(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        out = np.where(sigma > 0, np.log(self.rate) - self.rate * sigma, -np.inf)
        return out if out.ndim else float(out)

    def pdf(self, sigma):
        return np.exp(self.log_pdf(sigma))

    def cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        out = np.where(sigma > 0, -np.expm1(-self.rate * sigma), 0.0)
        return out if out.ndim else float(out)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("quantile level must be in (0, 1)")
        out = -np.log1p(-p) / self.rate
        return out if out.ndim else float(out)

    # helpers for hyperparameter grids on the log scale
    def transformed_center(self) -> float:
        return float(np.log(self.quantile(0.5)))

    def transformed_sd(self) -> float:
        # log of an exponential variate has variance pi^2/6, rate-free
        return float(np.pi / np.sqrt(6.0))

    def log_pdf_transformed(self, z):
        z = np.asarray(z, dtype=float)
        return np.log(self.rate) - self.rate * np.exp(z) + z


def pc_sd(u: float, alpha: float) -> PcSdPrior:
    return PcSdPrior(u, alpha)


def _phi_distance(gamma: np.ndarray, phi):
    """d(phi) = sqrt(2 KLD(phi)) against the iid base model."""
    phi = np.asarray(phi, dtype=float)
    kld = 0.5 * (phi * (gamma.sum() - gamma.size)
                 - np.sum(np.log1p(np.multiply.outer(gamma - 1.0, phi)), axis=0))
    out = np.sqrt(2.0 * np.clip(kld, 0.0, None))
    return out if out.ndim else float(out)


def _phi_distance_deriv(gamma: np.ndarray, phi):
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    kld_d = 0.5 * (gamma.sum() - gamma.size
                   - np.sum((gamma - 1.0)[:, None]
                            / (1.0 + np.multiply.outer(gamma - 1.0, phi)), axis=0))
    d = np.atleast_1d(_phi_distance(gamma, phi))
    # removable 0/0 at phi = 0: d'(0) = sqrt(sum (gamma-1)^2 / 2)
    limit0 = np.sqrt(0.5 * np.sum((gamma - 1.0) ** 2))
    small = d < 1e-10
    out = np.empty_like(d)
    np.divide(kld_d, d, out=out, where=~small)
    out[small] = limit0
    return out


@dataclass(frozen=True)
class PcPhiPrior:
    """PC prior for the BYM2 spatial proportion phi, tabulated on [0, 1).

    The distance is d(phi) = sqrt(2 KLD(phi)) with
    KLD(phi) = 0.5 [phi (sum gamma_i - m) - sum ln(1 + phi (gamma_i - 1))],
    gamma_i the eigenvalues of the scaled ICAR generalized inverse.  The
    prior is exponential in d pushed through the change of variables,
    with the rate calibrated by bisection so CDF(phi_mass) = target_mass.
    Evaluation linearly interpolates the tabulated log-density.
    """

    gamma: np.ndarray
    rate: float
    phi_mass: float
    target_mass: float
    grid: np.ndarray = field(repr=False)
    log_density_grid: np.ndarray = field(repr=False)

    def distance(self, phi):
        return _phi_distance(self.gamma, phi)

    def _log_density_exact(self, phi):
        d = np.atleast_1d(_phi_distance(self.gamma, phi))
        dd = _phi_distance_deriv(self.gamma, phi)
        with np.errstate(divide="ignore"):
            return np.log(self.rate) - self.rate * d + np.log(dd)

    def log_pdf(self, phi):
        scalar = np.ndim(phi) == 0
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        out = np.full(phi.shape, -np.inf)
        tab = (phi >= 0.0) & (phi <= self.grid[-1])
        out[tab] = np.interp(phi[tab], self.grid, self.log_density_grid)
        tail = (phi > self.grid[-1]) & (phi < 1.0)
        if np.any(tail):
            out[tail] = self._log_density_exact(phi[tail])
        return float(out[0]) if scalar else out

    def pdf(self, phi):
        return np.exp(self.log_pdf(phi))

    def cdf(self, phi):
        phi = np.asarray(phi, dtype=float)
        out = -np.expm1(-self.rate * self.distance(np.clip(phi, 0.0, 1.0 - 1e-12)))
        out = np.where(phi <= 0, 0.0, np.where(phi >= 1, 1.0, out))
        return out if out.ndim else float(out)

    # log-density of logit(phi), for hyperparameter grids
    def log_pdf_transformed(self, z):
        z = np.asarray(z, dtype=float)
        p = 1.0 / (1.0 + np.exp(-z))
        return self.log_pdf(p) + np.log(p) + np.log1p(-p)

    def transformed_center(self) -> float:
        return float(self._z_moments()[0])

    def transformed_sd(self) -> float:
        return float(self._z_moments()[1])

    def _z_moments(self):
        p = self.grid[1:-1]
        z = np.log(p) - np.log1p(-p)
        w = np.exp(self.log_density_grid[1:-1]) * p * (1 - p)
        dz = np.diff(z)
        wz = 0.5 * (w[1:] + w[:-1]) * dz
        total = wz.sum()
        zmid = 0.5 * (z[1:] + z[:-1])
        mean = np.sum(wz * zmid) / total
        var = np.sum(wz * (zmid - mean) ** 2) / total
        return mean, np.sqrt(var)


def pc_phi(icar: ScaledIcar, phi_mass: float = 0.5, target_mass: float = 2.0 / 3.0,
           tol: float = 1e-12, max_iter: int = 300) -> PcPhiPrior:
    """Calibrate the BYM2 mixing prior so P(phi < phi_mass) = target_mass."""
    gamma = np.clip(np.asarray(icar.gamma, dtype=float), 0.0, None)
    if gamma.size < 2:
        raise ValueError("need eigenvalues of an ICAR with m >= 2")
    d_at_mass = _phi_distance(gamma, phi_mass)
    if not np.isfinite(d_at_mass) or d_at_mass <= 0:
        raise ValueError("degenerate distance function; calibration impossible")

    # CDF(phi_mass) = 1 - exp(-rate * d(phi_mass)) is monotone in rate
    lo, hi = 1e-10, 1.0
    while -np.expm1(-hi * d_at_mass) < target_mass:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("pc_phi calibration bounds exhausted")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if -np.expm1(-mid * d_at_mass) < target_mass:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    else:
        raise RuntimeError("pc_phi calibration did not converge")
    rate = 0.5 * (lo + hi)

    grid = np.linspace(0.0, _PHI_MAX, _PHI_GRID_SIZE)
    d = np.atleast_1d(_phi_distance(gamma, grid))
    dd = _phi_distance_deriv(gamma, grid)
    log_density = np.log(rate) - rate * d + np.log(dd)
    return PcPhiPrior(gamma, rate, phi_mass, target_mass, grid, log_density)


@dataclass(frozen=True)
class MaternRangePrior:
    """PC range prior: F(rho) = exp(-rate * rho^(-d/2)), d = 2."""

    rho0: float
    rate: float = field(init=False)

    def __post_init__(self):
        if self.rho0 <= 0:
            raise ValueError("median range must be positive")
        object.__setattr__(self, "rate", float(np.log(2.0) * self.rho0))

    def log_pdf(self, rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(rho > 0,
                           np.log(self.rate) - 2.0 * np.log(rho) - self.rate / rho,
                           -np.inf)
        return out if out.ndim else float(out)

    def cdf(self, rho):
        rho = np.asarray(rho, dtype=float)
        out = np.where(rho > 0, np.exp(-self.rate / np.maximum(rho, 1e-300)), 0.0)
        return out if out.ndim else float(out)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("quantile level must be in (0, 1)")
        out = -self.rate / np.log(p)
        return out if out.ndim else float(out)

    # log(rho) is Gumbel(log rate, 1)
    def transformed_center(self) -> float:
        return float(np.log(self.rate) + np.euler_gamma)

    def transformed_sd(self) -> float:
        return float(np.pi / np.sqrt(6.0))

    def log_pdf_transformed(self, z):
        z = np.asarray(z, dtype=float)
        return np.log(self.rate) - z - self.rate * np.exp(-z)


@dataclass(frozen=True)
class PcMaternPrior:
    """Joint PC prior on (range, SD) of the Matern field; factorizes."""

    range_prior: MaternRangePrior
    sd_prior: PcSdPrior

    @property
    def rho0(self) -> float:
        return self.range_prior.rho0

    def log_pdf(self, rho, sigma):
        return self.range_prior.log_pdf(rho) + self.sd_prior.log_pdf(sigma)


def pc_matern(domain_diameter: float, sd_u: float = 1.0, sd_alpha: float = 0.01,
              median_fraction: float = 0.2) -> PcMaternPrior:
    """Range median at one fifth of the domain diameter; P(sigma > 1) = 0.01."""
    if domain_diameter <= 0:
        raise ValueError("domain diameter must be positive")
    return PcMaternPrior(MaternRangePrior(median_fraction * domain_diameter),
                         pc_sd(sd_u, sd_alpha))


@dataclass(frozen=True)
class FlatLogPrior:
    """Flat on the log scale; debugging alternative, not for production runs."""

    center: float = 0.0
    half_width: float = 5.0

    def log_pdf_transformed(self, z):
        z = np.asarray(z, dtype=float)
        out = np.where(np.abs(z - self.center) <= self.half_width,
                       -np.log(2 * self.half_width), -np.inf)
        return out if out.ndim else float(out)

    def transformed_center(self) -> float:
        return self.center

    def transformed_sd(self) -> float:
        return self.half_width / 3.0
