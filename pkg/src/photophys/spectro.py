"""Spectra, unit conversions and vibronic (Huang-Rhys) lineshapes.

Lineshapes are zero-temperature emission spectra on an energy axis. The
Franck-Condon progression and the generating-function sideband share one
line renderer, so a single-mode spectral density reproduces the
progression to floating-point accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import constants

from .errors import DomainError, GridError, TruncationError

# eV * nm
HC_EV_NM = constants.h * constants.c / constants.e * 1e9

# S = HR_CONSTANT * dQ**2 * hbar*omega  with dQ in amu^1/2 Angstrom, hbar*omega in eV.
# From S = omega dQ^2 / (2 hbar) = E dQ^2 / (2 hbar^2), E = hbar omega.
HR_CONSTANT = constants.e * constants.atomic_mass * 1e-20 / (2 * constants.hbar**2)

AXIS_KINDS = ("nm", "ev")


@dataclass(frozen=True, eq=False)
class Spectrum:
    axis: np.ndarray
    intensity: np.ndarray
    axis_kind: str = "nm"

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(-1)
        inten = np.asarray(self.intensity, dtype=float).reshape(-1)
        if self.axis_kind not in AXIS_KINDS:
            raise ValueError(f"axis_kind must be one of {AXIS_KINDS}")
        if axis.shape != inten.shape:
            raise ValueError("axis and intensity lengths differ")
        if axis.size > 1:
            d = np.diff(axis)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ValueError("axis must be strictly monotone")
        if np.any(inten < 0):
            raise ValueError("intensities must be non-negative")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "intensity", inten)

    def area(self) -> float:
        return float(abs(np.trapezoid(self.intensity, self.axis)))

    def normalized(self) -> Spectrum:
        return Spectrum(self.axis, self.intensity / self.area(), self.axis_kind)

    def to_energy(self, jacobian: bool = False) -> Spectrum:
        """Re-express on an ascending eV axis.

        With ``jacobian=True`` intensities are scaled by ``|d lambda / dE|`` so
        the integrated intensity is preserved; otherwise only the axis changes
        and the conversion is exactly reversible.
        """
        if self.axis_kind == "ev":
            return self
        e = HC_EV_NM / self.axis
        inten = self.intensity * (self.axis**2 / HC_EV_NM) if jacobian else self.intensity
        return Spectrum(e[::-1], inten[::-1], "ev")

    def to_wavelength(self, jacobian: bool = False) -> Spectrum:
        if self.axis_kind == "nm":
            return self
        lam = HC_EV_NM / self.axis
        inten = self.intensity * (self.axis**2 / HC_EV_NM) if jacobian else self.intensity
        return Spectrum(lam[::-1], inten[::-1], "nm")

    def ascending(self) -> Spectrum:
        if self.axis.size > 1 and self.axis[1] < self.axis[0]:
            return Spectrum(self.axis[::-1], self.intensity[::-1], self.axis_kind)
        return self


def wavelength_energy_convert(value: float, direction: str = "nm->ev") -> float:
    """Photon wavelength (nm) <-> energy (eV), ``E = hc / lambda``."""
    if not value > 0:
        raise DomainError("wavelength/energy must be positive")
    if direction not in ("nm->ev", "ev->nm"):
        raise ValueError("direction must be 'nm->ev' or 'ev->nm'")
    return HC_EV_NM / value


def raman_shifted_wavelength(excitation_nm: float, shift_per_cm: float) -> float:
    """Stokes line position for a Raman shift given in cm^-1."""
    if not excitation_nm > 0:
        raise DomainError("excitation wavelength must be positive")
    nu_exc = 1e7 / excitation_nm
    nu_out = nu_exc - shift_per_cm
    if nu_out <= 0:
        raise DomainError(f"shift {shift_per_cm} cm^-1 exceeds excitation wavenumber {nu_exc:.1f} cm^-1")
    return 1e7 / nu_out


def mirror_spectrum(s: Spectrum, zpl_ev: float) -> Spectrum:
    """Reflect a spectrum about the zero-phonon line on the energy axis.

    The output at ``E_zpl + d`` is the input at ``E_zpl - d``, linearly
    interpolated back onto the input grid; points whose mirror image lies
    outside the measured span are zero. The result uses the input's axis kind.
    """
    e = s.to_energy().ascending()
    if not e.axis[0] <= zpl_ev <= e.axis[-1]:
        raise DomainError(f"ZPL {zpl_ev} eV outside spectrum span [{e.axis[0]:.4f}, {e.axis[-1]:.4f}] eV")
    src = 2.0 * zpl_ev - e.axis
    mirrored = np.interp(src, e.axis, e.intensity, left=0.0, right=0.0)
    out = Spectrum(e.axis, mirrored, "ev")
    if s.axis_kind == "nm":
        out = out.to_wavelength()
        if s.axis[0] > s.axis[-1]:
            out = Spectrum(out.axis[::-1], out.intensity[::-1], "nm")
        return Spectrum(s.axis, out.intensity, "nm")
    if s.axis[0] > s.axis[-1]:
        return Spectrum(s.axis, mirrored[::-1], "ev")
    return out


# --- Huang-Rhys factor in the 1D configuration-coordinate model ---------------


def hr_factor_from_dq(delta_q: float, phonon_energy_mev: float) -> float:
    if delta_q < 0 or phonon_energy_mev < 0:
        raise DomainError("delta_q and phonon energy must be >= 0")
    return HR_CONSTANT * delta_q**2 * phonon_energy_mev * 1e-3


def dq_from_hr_factor(hr_factor: float, phonon_energy_mev: float) -> float:
    if hr_factor < 0 or not phonon_energy_mev > 0:
        raise DomainError("need hr_factor >= 0 and phonon energy > 0")
    return math.sqrt(hr_factor / (HR_CONSTANT * phonon_energy_mev * 1e-3))


def phonon_energy_from_hr(hr_factor: float, delta_q: float) -> float:
    """Effective phonon energy (meV) implied by an (S, dQ) pair."""
    if hr_factor < 0 or not delta_q > 0:
        raise DomainError("need hr_factor >= 0 and delta_q > 0")
    return hr_factor / (HR_CONSTANT * delta_q**2) * 1e3


@dataclass
class VibronicModel:
    """Single effective mode coupled to an optical transition.

    Give either `hr_factor` or `delta_q`; the other is derived through the
    phonon energy. `broadening_mev` is the Gaussian standard deviation
    applied to every line.
    """

    e_zpl_ev: float
    phonon_energy_mev: float
    hr_factor: float | None = None
    delta_q: float | None = None
    broadening_mev: float = 2.0

    def __post_init__(self):
        if not self.e_zpl_ev > 0:
            raise ValueError("e_zpl_ev must be > 0")
        if not self.phonon_energy_mev > 0:
            raise ValueError("phonon_energy_mev must be > 0")
        if self.broadening_mev < 0:
            raise ValueError("broadening_mev must be >= 0")
        if (self.hr_factor is None) == (self.delta_q is None):
            raise ValueError("specify exactly one of hr_factor and delta_q")
        if self.hr_factor is None:
            self.hr_factor = hr_factor_from_dq(self.delta_q, self.phonon_energy_mev)
        else:
            if self.hr_factor < 0:
                raise ValueError("hr_factor must be >= 0")
            self.delta_q = dq_from_hr_factor(self.hr_factor, self.phonon_energy_mev)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "e_zpl_ev": self.e_zpl_ev,
            "phonon_energy_mev": self.phonon_energy_mev,
            "hr_factor": self.hr_factor,
            "broadening_mev": self.broadening_mev,
        }


@dataclass
class SpectralDensity:
    """Partial Huang-Rhys factors versus phonon energy."""

    phonon_energies_mev: np.ndarray
    partial_hr: np.ndarray = field(default=None)

    def __post_init__(self):
        self.phonon_energies_mev = np.asarray(self.phonon_energies_mev, dtype=float).reshape(-1)
        self.partial_hr = np.asarray(self.partial_hr, dtype=float).reshape(-1)
        if self.phonon_energies_mev.shape != self.partial_hr.shape:
            raise ValueError("energy and partial_hr lengths differ")
        if np.any(self.partial_hr < 0) or not np.all(np.isfinite(self.partial_hr)):
            raise ValueError("partial Huang-Rhys factors must be finite and >= 0")
        if np.any(self.phonon_energies_mev[self.partial_hr > 0] <= 0):
            raise ValueError("coupled phonon energies must be > 0")

    @property
    def total(self) -> float:
        return float(self.partial_hr.sum())

    @classmethod
    def single_mode(cls, hr_factor, phonon_energy_mev):
        return cls(np.array([phonon_energy_mev]), np.array([hr_factor]))

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["phonon_energies_mev"]), np.asarray(d["partial_hr"]))

    def to_dict(self):
        return {"phonon_energies_mev": self.phonon_energies_mev.tolist(), "partial_hr": self.partial_hr.tolist()}


def poisson_weights(S: float, n_max: int) -> np.ndarray:
    n = np.arange(n_max + 1)
    if S == 0:
        w = np.zeros(n_max + 1)
        w[0] = 1.0
        return w
    return np.exp(-S + n * math.log(S) - np.array([math.lgamma(k + 1) for k in n]))


def energy_grid(e_zpl_ev, max_loss_ev, broadening_mev, step_mev=None):
    """Uniform ascending grid from ZPL - max_loss - 10 sigma to ZPL + 10 sigma."""
    sigma = broadening_mev * 1e-3
    if step_mev is None:
        step_mev = broadening_mev / 8 if broadening_mev > 0 else 0.1
    step = step_mev * 1e-3
    pad = 10 * sigma + 4 * step
    lo = e_zpl_ev - max_loss_ev - pad
    n = int(math.ceil((e_zpl_ev + pad - lo) / step)) + 1
    # anchor the grid on the ZPL so lines on the phonon lattice hit nodes
    k0 = int(math.ceil((e_zpl_ev - lo) / step))
    return e_zpl_ev + (np.arange(n) - k0) * step


def _render_lines(grid, positions, weights, sigma_ev):
    """Area-preserving sum of lines on an ascending grid (density per eV)."""
    out = np.zeros_like(grid)
    if sigma_ev > 0:
        norm = 1.0 / (sigma_ev * math.sqrt(2 * math.pi))
        reach = 12 * sigma_ev
        lo = np.searchsorted(grid, positions - reach)
        hi = np.searchsorted(grid, positions + reach, side="right")
        for p, w, a, b in zip(positions, weights, lo, hi):
            x = (grid[a:b] - p) / sigma_ev
            out[a:b] += w * norm * np.exp(-0.5 * x * x)
        return out
    # zero width: split each delta between its two neighbouring nodes
    step = np.gradient(grid)
    for p, w in zip(positions, weights):
        i = np.searchsorted(grid, p) - 1
        if i < 0 or i + 1 >= grid.size:
            if 0 <= i + 1 < grid.size and grid[i + 1] == p:
                out[i + 1] += w / step[i + 1]
            continue
        f = (p - grid[i]) / (grid[i + 1] - grid[i])
        out[i] += w * (1 - f) / step[i]
        out[i + 1] += w * f / step[i + 1]
    return out


def fc_lineshape(model: VibronicModel, n_max: int = 60, grid=None, mass_tol: float = 1e-9) -> Spectrum:
    """Zero-temperature Franck-Condon progression of a single mode.

    Line n sits ``n * hbar*omega`` below the ZPL with weight
    ``exp(-S) S^n / n!``; the ZPL carries the Debye-Waller weight exp(-S).
    """
    S = model.hr_factor
    w = poisson_weights(S, n_max)
    mass = float(w.sum())
    if mass < 1.0 - mass_tol:
        raise TruncationError(f"n_max={n_max} captures only {mass:.12f} of the progression", mass)
    hw = model.phonon_energy_mev * 1e-3
    if grid is None:
        # span the progression up to where the remaining tail is negligible
        tail = 1.0 - np.cumsum(w)
        n_span = min(n_max, int(np.argmax(tail < 1e-15)) + 2) if (tail < 1e-15).any() else n_max
        grid = energy_grid(model.e_zpl_ev, n_span * hw, model.broadening_mev)
    grid = np.asarray(grid, dtype=float)
    pos = model.e_zpl_ev - np.arange(n_max + 1) * hw
    keep = w > 0
    inten = _render_lines(grid, pos[keep], w[keep], model.broadening_mev * 1e-3)
    return Spectrum(grid, inten, "ev")


def psb_from_spectral_density(
    density: SpectralDensity,
    e_zpl_ev: float,
    grid=None,
    broadening_mev: float = 2.0,
    alias_tol: float = 1e-9,
) -> Spectrum:
    """Emission lineshape from a Huang-Rhys spectral density.

    The sideband follows from the generating function
    ``exp(sum_j S_j (exp(-i w hw_j) - 1))`` of the partial Huang-Rhys factors
    S_j, broadened by Gaussians of standard deviation `broadening_mev`. With
    zero broadening, lines are split onto the nearest grid nodes instead.
    `grid` must be uniform and ascending (eV).
    """
    S_tot = density.total
    hw_max = float(density.phonon_energies_mev.max(initial=0.0)) * 1e-3
    if grid is None:
        # generous loss span: mean + 12 standard deviations of the phonon count
        n_span = S_tot + 12 * math.sqrt(S_tot) + 12
        grid = energy_grid(e_zpl_ev, n_span * max(hw_max, 1e-3), broadening_mev)
    grid = np.asarray(grid, dtype=float)
    steps = np.diff(grid)
    if grid.size < 2 or np.any(steps <= 0) or np.ptp(steps) > 1e-6 * steps.mean():
        raise GridError("grid must be uniform and ascending")
    dE = float(steps.mean())
    sigma = broadening_mev * 1e-3
    if sigma > 0 and dE > sigma / 2:
        raise GridError(f"grid step {dE * 1e3:.3f} meV under-samples {broadening_mev} meV broadening")
    if not grid[0] < e_zpl_ev <= grid[-1]:
        raise GridError("grid must contain the ZPL and extend below it")

    coupled = density.partial_hr > 0
    hr = density.partial_hr[coupled]
    hw = density.phonon_energies_mev[coupled] * 1e-3
    if sigma > 0:
        inten = _broadened_loss_density(grid, e_zpl_ev, hr, hw, S_tot, sigma, dE, alias_tol)
    else:
        inten = _lattice_loss_lines(grid, e_zpl_ev, hr, hw, S_tot, dE, alias_tol)
    return Spectrum(grid, np.clip(inten, 0.0, None), "ev")


def _broadened_loss_density(grid, e_zpl_ev, hr, hw, S_tot, sigma, dE, alias_tol):
    """Gaussian-broadened lineshape sampled on `grid` via its characteristic function.

    The phonon-loss density has the closed-form Fourier transform
    ``exp(sum_j S_j (exp(-i w hw_j) - 1) - sigma**2 w**2 / 2)``, so lines sit
    at their exact energies whether or not they fall on grid nodes.
    """
    n = grid.size
    L = 1 << int(math.ceil(math.log2(2 * n)))
    # loss u = E_zpl - E, sampled from the top of the grid downward
    u0 = e_zpl_ev - float(grid[-1])
    w = 2 * np.pi * np.fft.fftfreq(L, dE)
    phase = np.exp(-1j * np.outer(w, hw)) @ hr if hr.size else np.zeros(L)
    F = np.exp(phase - S_tot - 0.5 * (sigma * w) ** 2 + 1j * w * u0)
    f = np.fft.ifft(F).real / dE
    spill = float(np.abs(f[n:]).sum() * dE)
    if spill > alias_tol:
        raise GridError(f"phonon sideband mass {spill:.2e} falls outside the grid; extend it to lower energy")
    return f[:n][::-1]


def _lattice_loss_lines(grid, e_zpl_ev, hr, hw, S_tot, dE, alias_tol):
    """Zero-width lines: phonon energies are split onto the grid lattice."""
    n_span = int(math.ceil((e_zpl_ev - grid[0]) / dE)) + 1
    L = 1 << int(math.ceil(math.log2(2 * n_span)))
    s = np.zeros(L)
    pos = hw / dE
    near = np.rint(pos)
    pos = np.where(np.abs(pos - near) < 1e-6, near, pos)
    i = np.floor(pos).astype(np.int64)
    frac = pos - i
    if np.any(i + 1 >= n_span):
        raise GridError("spectral density extends beyond the grid")
    if np.any(i == 0):
        raise GridError(f"phonon energies below the grid step {dE * 1e3:.3f} meV cannot be resolved")
    np.add.at(s, i, hr * (1 - frac))
    np.add.at(s, i + 1, hr * frac)
    p = np.fft.ifft(np.exp(np.fft.fft(s) - S_tot)).real
    spill = float(np.abs(p[n_span:]).sum())
    if spill > alias_tol:
        raise GridError(f"phonon sideband mass {spill:.2e} falls outside the grid; extend it to lower energy")
    p = p[:n_span]
    keep = p > 1e-18
    return _render_lines(grid, e_zpl_ev - np.arange(n_span)[keep] * dE, p[keep], 0.0)


def zpl_area_fraction(s: Spectrum, e_zpl_ev: float, half_width_ev: float) -> float:
    """Share of the total area within ``±half_width_ev`` of the ZPL."""
    e = s.to_energy().ascending()
    m = np.abs(e.axis - e_zpl_ev) <= half_width_ev
    total = np.trapezoid(e.intensity, e.axis)
    return float(np.trapezoid(e.intensity[m], e.axis[m]) / total)


# --- CSV / JSON ---------------------------------------------------------------


def write_spectrum_csv(path, s: Spectrum) -> None:
    unit = "wavelength_nm" if s.axis_kind == "nm" else "energy_ev"
    np.savetxt(path, np.column_stack([s.axis, s.intensity]), delimiter=",",
               header=f"{unit},intensity", comments="", fmt="%.12g")


def read_spectrum_csv(path) -> Spectrum:
    with open(path) as fh:
        header = fh.readline().strip().lower().replace(" ", "")
    first = header.split(",")[0]
    if first in ("wavelength_nm", "nm"):
        kind = "nm"
    elif first in ("energy_ev", "ev"):
        kind = "ev"
    else:
        raise ValueError(f"{path}: header must name 'wavelength_nm' or 'energy_ev', got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Spectrum(data[:, 0], data[:, 1], kind)


def load_json(path):
    return json.loads(Path(path).read_text())
