"""Model fits: saturation curve, IRF-convolved lifetime decay, Gaussian peak.

All three run through :func:`photophys.lm.levenberg_marquardt` with analytic
Jacobians. Strictly positive quantities (lifetime, saturation intensity and
power, FWHM) are optimised in log space.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erfc, erfcx, ndtr

from .correlate import DecayHistogram
from .errors import EmptyData, NoPeak, Underdetermined
from .lm import covariance, levenberg_marquardt
from .spectro import Spectrum

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass
class FitResult:
    params: dict[str, float]
    sigmas: dict[str, float]
    reduced_chi2: float
    n_iterations: int
    converged: bool
    gradient_cosine: float = 0.0
    message: str = ""
    derived: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no inf/nan
        for key in ("params", "sigmas", "derived"):
            d[key] = {k: (v if math.isfinite(v) else None) for k, v in d[key].items()}
        if not math.isfinite(d["reduced_chi2"]):
            d["reduced_chi2"] = None
        return d


@dataclass(frozen=True)
class SaturationParams:
    i_sat_hz: float
    p_sat_uw: float
    i_dark_hz: float = 0.0

    def __post_init__(self):
        if self.i_sat_hz < 0 or self.i_dark_hz < 0 or not self.p_sat_uw > 0:
            raise ValueError("need i_sat_hz >= 0, i_dark_hz >= 0, p_sat_uw > 0")

    @classmethod
    def from_fit(cls, fr: FitResult) -> SaturationParams:
        return cls(fr["i_sat_hz"], fr["p_sat_uw"], fr["i_dark_hz"])

    def rate(self, power_uw):
        p = np.asarray(power_uw, dtype=float)
        return self.i_sat_hz * p / (p + self.p_sat_uw) + self.i_dark_hz


def _least_squares(names, is_log, model, x0, y, weights, lower=None, absolute_sigma=False,
                   max_iter=200, xtol=1e-8):
    """Shared driver: natural <-> internal parameters, LM, uncertainties.

    `model(theta)` returns ``(f, J)`` in natural parameters.
    """
    is_log = np.asarray(is_log, dtype=bool)
    y = np.asarray(y, dtype=float)
    sw = np.sqrt(np.asarray(weights, dtype=float))

    def natural(x):
        return np.where(is_log, np.exp(np.where(is_log, x, 0.0)), x)

    def fun(x):
        theta = natural(x)
        f, J = model(theta)
        J = J * np.where(is_log, theta, 1.0)
        return sw * (f - y), sw[:, None] * J

    x0 = np.asarray(x0, dtype=float)
    x_init = np.where(is_log, np.log(np.where(is_log, x0, 1.0)), x0)
    lo = None
    if lower is not None:
        lo = np.array([-np.inf if v is None else v for v in lower], dtype=float)
    out = levenberg_marquardt(fun, x_init, lower=lo, max_iter=max_iter, xtol=xtol,
                             r_scale=float(np.linalg.norm(sw * y)))
    theta = natural(out.x)
    dof = y.size - len(names)
    red = 2.0 * out.cost / dof if dof > 0 else math.nan
    scale = 1.0 if absolute_sigma else (red if dof > 0 else 0.0)
    cov = covariance(out.jac, scale)
    sig = np.sqrt(np.clip(np.diag(cov), 0.0, None)) * np.where(is_log, theta, 1.0)
    return FitResult(
        params={n: float(v) for n, v in zip(names, theta)},
        sigmas={n: float(s) for n, s in zip(names, sig)},
        reduced_chi2=float(red),
        n_iterations=out.n_iterations,
        converged=out.converged,
        gradient_cosine=out.gradient_cosine,
        message=out.message,
    )


# --- saturation ----------------------------------------------------------------


def saturation_model(theta, p):
    i_sat, p_sat, i_d = theta
    s = p + p_sat
    f = i_sat * p / s + i_d
    J = np.column_stack([p / s, -i_sat * p / s**2, np.ones_like(p)])
    return f, J


def _saturation_guess(p, i):
    order = np.argsort(p, kind="stable")
    p, i = p[order], i[order]
    i_d = float(i.min())
    rise = float(i.max()) - i_d
    i_sat = 2.0 * rise
    half = i_d + rise / 2.0
    k = int(np.argmax(i >= half))
    if k == 0:
        p_sat = float(p[0]) if p[0] > 0 else float(np.median(p[p > 0]))
    else:
        f = (half - i[k - 1]) / (i[k] - i[k - 1]) if i[k] != i[k - 1] else 0.5
        p_sat = float(p[k - 1] + f * (p[k] - p[k - 1]))
    return i_sat, max(p_sat, 1e-6 * float(p.max())), i_d


def fit_saturation(points, weights=None, max_iter=200, xtol=1e-8) -> FitResult:
    """Fit ``I(P) = I_sat P / (P + P_sat) + I_d`` to (power_uW, rate_Hz) pairs.

    Without `weights` this is ordinary least squares with uncertainties
    scaled by the residual variance; given weights are read as 1/variance.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    p, i = pts[:, 0], pts[:, 1]
    if np.unique(p).size < 3:
        raise Underdetermined("saturation fit needs at least 3 distinct powers")
    if np.any(p < 0):
        raise ValueError("powers must be >= 0")
    names = ["i_sat_hz", "p_sat_uw", "i_dark_hz"]
    if np.ptp(i) <= 1e-12 * max(abs(float(i.max())), 1.0):
        # flat data: no saturating component, P_sat unidentifiable
        return FitResult(
            params={"i_sat_hz": 0.0, "p_sat_uw": float(np.median(p[p > 0])) if np.any(p > 0) else 1.0,
                    "i_dark_hz": float(i.mean())},
            sigmas={"i_sat_hz": 0.0, "p_sat_uw": math.inf, "i_dark_hz": 0.0},
            reduced_chi2=0.0, n_iterations=0, converged=True, message="flat data",
        )
    w = np.ones_like(i) if weights is None else np.asarray(weights, dtype=float)
    x0 = _saturation_guess(p, i)
    x0 = (x0[0], x0[1], max(x0[2], 0.0))
    return _least_squares(
        names, [True, True, False], lambda th: saturation_model(th, p), x0, i, w,
        lower=[None, None, 0.0], absolute_sigma=weights is not None, max_iter=max_iter, xtol=xtol,
    )


# --- lifetime --------------------------------------------------------------------


def _emg_parts(x, tau, sigma):
    """``(F, p, dh/dtau)`` of the exponentially modified Gaussian at `x`.

    F is the CDF, p the density, and ``h = tau * p`` so ``F = Phi(x/sigma) - h``.
    """
    if sigma == 0:
        pos = x >= 0
        e = np.where(pos, np.exp(-np.where(pos, x, 0.0) / tau), 0.0)
        F = np.where(pos, 1.0 - e, 0.0)
        p = e / tau
        return F, p, p * x / tau
    z = (sigma / tau - x / sigma) / _SQRT2
    gauss = np.exp(-0.5 * (x / sigma) ** 2)
    with np.errstate(over="ignore", invalid="ignore"):
        h = np.where(
            z >= 0,
            0.5 * gauss * erfcx(np.where(z >= 0, z, 0.0)),
            0.5 * np.exp(sigma**2 / (2 * tau**2) - x / tau) * erfc(np.where(z < 0, z, 0.0)),
        )
    p = h / tau
    F = ndtr(x / sigma) - h
    dh = p * (x - sigma**2 / tau) / tau + sigma * gauss / (_SQRT2PI * tau**2)
    return F, p, dh


def convolved_decay_model(theta, lo, hi, sigma):
    """Bin-integrated exponential decay convolved with a Gaussian IRF."""
    tau, amp, t0, base = theta
    F_hi, p_hi, dh_hi = _emg_parts(hi - t0, tau, sigma)
    F_lo, p_lo, dh_lo = _emg_parts(lo - t0, tau, sigma)
    frac = F_hi - F_lo
    f = amp * frac + base
    J = np.column_stack([
        -amp * (dh_hi - dh_lo),
        frac,
        -amp * (p_hi - p_lo),
        np.ones_like(frac),
    ])
    return f, J


def tail_decay_model(theta, lo, hi, start):
    tau, amp, base = theta
    u_lo, u_hi = lo - start, hi - start
    e_lo, e_hi = np.exp(-u_lo / tau), np.exp(-u_hi / tau)
    frac = e_lo - e_hi
    f = amp * frac + base
    J = np.column_stack([amp * (e_lo * u_lo - e_hi * u_hi) / tau**2, frac, np.ones_like(frac)])
    return f, J


def fit_lifetime(hist: DecayHistogram, irf_sigma_ps: float = 0.0, mode: str = "convolved",
                 max_iter=200, xtol=1e-8) -> FitResult:
    """Extract the excited-state lifetime from a TCSPC decay histogram.

    ``mode="convolved"`` fits the bin-integrated exponentially modified
    Gaussian (exponential decay convolved with a Gaussian IRF of width
    `irf_sigma_ps`) over the whole histogram. ``mode="tail"`` fits a pure
    exponential to the bins starting 3 IRF widths after the peak.
    Counts are Poisson-weighted, ``w = 1 / max(count, 1)``. Returns
    parameters ``tau_ns, amplitude, t0_ps, baseline``; amplitude is the
    total number of decay photons and baseline is counts per bin.
    """
    if mode not in ("convolved", "tail"):
        raise ValueError("mode must be 'convolved' or 'tail'")
    if irf_sigma_ps < 0:
        raise ValueError("irf_sigma_ps must be >= 0")
    c = np.asarray(hist.counts, dtype=float)
    edges = np.asarray(hist.edges_ps, dtype=float)
    if not np.any(c > 0):
        raise EmptyData("decay histogram is empty")
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    k_peak = int(np.argmax(c))
    t_peak = mid[k_peak]
    pre = c[: max(k_peak - int(math.ceil((5 * irf_sigma_ps + 2000) / hist.bin_width_ps)), 0)]
    base0 = float(np.median(pre)) if pre.size >= 5 else float(np.min(c))
    if np.count_nonzero(c > base0 + 3 * math.sqrt(max(base0, 1.0))) < 10:
        raise Underdetermined("fewer than 10 bins rise above the baseline")
    w = 1.0 / np.maximum(c, 1.0)

    after = mid > t_peak
    excess = np.clip(c[after] - base0, 0.0, None)
    tau0 = float(np.sum(excess * (mid[after] - t_peak)) / max(excess.sum(), 1.0))
    tau0 = max(tau0, 2 * hist.bin_width_ps)

    if mode == "tail":
        start = t_peak + 3 * irf_sigma_ps
        start = edges[np.searchsorted(edges, start - 1e-9)]
        sel = lo >= start
        if np.count_nonzero(sel) < 10:
            raise Underdetermined("fewer than 10 bins in the decay tail")
        amp0 = float(np.clip(c[sel] - base0, 0.0, None).sum())
        fr = _least_squares(
            ["tau_ps", "amplitude", "baseline"], [True, False, False],
            lambda th: tail_decay_model(th, lo[sel], hi[sel], start),
            (tau0, max(amp0, 1.0), base0), c[sel], w[sel],
            lower=[None, None, 0.0], absolute_sigma=True, max_iter=max_iter, xtol=xtol,
        )
        tau, amp, base = (fr.params[k] for k in ("tau_ps", "amplitude", "baseline"))
        stau, samp, sbase = (fr.sigmas[k] for k in ("tau_ps", "amplitude", "baseline"))
        fr.params = {"tau_ns": tau / 1e3, "amplitude": amp, "t0_ps": float(start), "baseline": base}
        fr.sigmas = {"tau_ns": stau / 1e3, "amplitude": samp, "t0_ps": 0.0, "baseline": sbase}
        return fr

    amp0 = float(np.clip(c - base0, 0.0, None).sum())
    t00 = t_peak - (0.5 * hist.bin_width_ps if irf_sigma_ps == 0 else 0.0)
    fr = _least_squares(
        ["tau_ps", "amplitude", "t0_ps", "baseline"], [True, False, False, False],
        lambda th: convolved_decay_model(th, lo, hi, irf_sigma_ps),
        (tau0, max(amp0, 1.0), t00, base0), c, w,
        lower=[None, None, None, 0.0], absolute_sigma=True, max_iter=max_iter, xtol=xtol,
    )
    fr.params = {"tau_ns": fr.params.pop("tau_ps") / 1e3, **fr.params}
    fr.sigmas = {"tau_ns": fr.sigmas.pop("tau_ps") / 1e3, **fr.sigmas}
    return fr


# --- Gaussian spectral peak ---------------------------------------------------------


def gaussian_model(theta, x):
    center, fwhm, amp, base = theta
    s = fwhm / FWHM_PER_SIGMA
    u = (x - center) / s
    g = np.exp(-0.5 * u * u)
    J = np.column_stack([amp * g * u / s, amp * g * u * u / (s * FWHM_PER_SIGMA), g, np.ones_like(x)])
    return amp * g + base, J


def fit_gaussian_peak(spectrum: Spectrum, max_iter=200, xtol=1e-8) -> FitResult:
    """Fit one Gaussian plus constant baseline to a spectrum.

    Parameters come back in the spectrum's own axis unit (``center_nm``,
    ``fwhm_nm`` or the ``_ev`` variants); the Gaussian standard deviation is
    reported in ``derived``.
    """
    s = spectrum.ascending()
    x, y = s.axis, s.intensity
    if x.size < 5:
        raise Underdetermined("need at least 5 samples")
    k = int(np.argmax(y))
    if k == 0 or k == x.size - 1:
        raise NoPeak("spectrum has no interior maximum")
    base0 = float(y.min())
    amp0 = float(y[k]) - base0
    half = base0 + amp0 / 2
    right = np.flatnonzero((np.arange(x.size) > k) & (y < half))
    left = np.flatnonzero((np.arange(x.size) < k) & (y < half))
    if right.size:
        hw = x[right[0]] - x[k]
    elif left.size:
        hw = x[k] - x[left[-1]]
    else:
        hw = (x[-1] - x[0]) / 4
    u = s.axis_kind
    names = [f"center_{u}", f"fwhm_{u}", "amplitude", "baseline"]
    fr = _least_squares(
        names, [False, True, False, False], lambda th: gaussian_model(th, x),
        (float(x[k]), float(2 * hw), amp0, base0), y, np.ones_like(y),
        max_iter=max_iter, xtol=xtol,
    )
    fr.derived = {
        f"sigma_{u}": fr.params[f"fwhm_{u}"] / FWHM_PER_SIGMA,
        f"sigma_{u}_err": fr.sigmas[f"fwhm_{u}"] / FWHM_PER_SIGMA,
    }
    return fr
