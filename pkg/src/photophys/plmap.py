"""PL maps: rendering, emitter detection, spot integration, ensemble statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .errors import DegenerateMean, EmptySelection, OutOfBounds

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class PSFModel:
    fwhm_um: float = 0.4

    def __post_init__(self):
        if not self.fwhm_um > 0:
            raise ValueError("fwhm_um must be > 0")

    @property
    def sigma_um(self) -> float:
        return self.fwhm_um / FWHM_PER_SIGMA


@dataclass(frozen=True)
class Grid:
    """Pixel raster; pixel (row i, col j) covers ``origin + [j, j+1) * pixel`` in x."""

    nx: int
    ny: int
    pixel_size_um: float
    origin_um: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.pixel_size_um > 0:
            raise ValueError("pixel_size_um must be > 0")
        if self.nx <= 0 or self.ny <= 0:
            raise ValueError("grid needs at least one pixel")

    @classmethod
    def covering(cls, positions, pixel_size_um, margin_um):
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        lo = pos.min(axis=0) - margin_um
        hi = pos.max(axis=0) + margin_um
        n = np.ceil((hi - lo) / pixel_size_um).astype(int)
        return cls(int(n[0]), int(n[1]), pixel_size_um, (float(lo[0]), float(lo[1])))

    def x_edges(self):
        return self.origin_um[0] + np.arange(self.nx + 1) * self.pixel_size_um

    def y_edges(self):
        return self.origin_um[1] + np.arange(self.ny + 1) * self.pixel_size_um

    def contains(self, x, y) -> bool:
        x0, y0 = self.origin_um
        return x0 <= x <= x0 + self.nx * self.pixel_size_um and y0 <= y <= y0 + self.ny * self.pixel_size_um


@dataclass(frozen=True, eq=False)
class PLMap:
    pixels: np.ndarray  # shape (ny, nx)
    pixel_size_um: float
    origin_um: tuple[float, float] = (0.0, 0.0)
    excitation_wavelength_nm: float | None = None
    normalization: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError("pixels must be a 2D array")
        if np.any(px < 0):
            raise ValueError("pixels must be non-negative")
        if not self.pixel_size_um > 0:
            raise ValueError("pixel_size_um must be > 0")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "origin_um", tuple(float(v) for v in self.origin_um))

    @property
    def grid(self) -> Grid:
        ny, nx = self.pixels.shape
        return Grid(nx, ny, self.pixel_size_um, self.origin_um)

    def to_pixel(self, x_um, y_um):
        """Fractional (col, row) index whose integer part is the pixel containing the point."""
        return ((x_um - self.origin_um[0]) / self.pixel_size_um,
                (y_um - self.origin_um[1]) / self.pixel_size_um)

    def to_um(self, col, row):
        """Position of fractional pixel coordinates, pixel centres at ``k + 0.5``."""
        return (self.origin_um[0] + col * self.pixel_size_um,
                self.origin_um[1] + row * self.pixel_size_um)

    def normalized_to(self, reference: float) -> PLMap:
        """Scale so that `reference` counts map to 1 (e.g. the brightest pixel of a reference map)."""
        if not reference > 0:
            raise ValueError("reference must be > 0")
        return PLMap(self.pixels / reference, self.pixel_size_um, self.origin_um,
                     self.excitation_wavelength_nm, reference)

    def sidecar(self) -> dict:
        ny, nx = self.pixels.shape
        return {
            "nx": nx, "ny": ny, "dtype": "float32", "order": "row-major (y, x)",
            "pixel_size_um": self.pixel_size_um, "origin_um": list(self.origin_um),
            "excitation_wavelength_nm": self.excitation_wavelength_nm,
            "normalization": self.normalization,
        }


def normalize_map_set(maps: dict, reference_key) -> dict:
    """Scale every map by the maximum of ``maps[reference_key]``."""
    ref = float(maps[reference_key].pixels.max())
    return {k: m.normalized_to(ref) for k, m in maps.items()}


def expected_map(emitters, psf: PSFModel, grid: Grid, exposure_s: float, background_per_pixel: float = 0.0):
    """Noise-free pixel means: pixel-integrated Gaussian PSF times rate times exposure."""
    xe, ye = grid.x_edges(), grid.y_edges()
    out = np.full((grid.ny, grid.nx), float(background_per_pixel))
    s = psf.sigma_um
    for (x, y), rate in emitters:
        fx = np.diff(ndtr((xe - x) / s))
        fy = np.diff(ndtr((ye - y) / s))
        out += rate * exposure_s * np.outer(fy, fx)
    return out


def render_plmap(emitters, psf: PSFModel, grid: Grid, exposure_s: float, seed: int,
                 background_per_pixel: float = 0.0, excitation_wavelength_nm=None) -> PLMap:
    """Poisson-sampled PL map of point emitters.

    `emitters` is a sequence of ``((x_um, y_um), rate_hz)``.
    """
    emitters = [((float(p[0]), float(p[1])), float(r)) for p, r in emitters]
    for (x, y), _ in emitters:
        if not grid.contains(x, y):
            raise OutOfBounds(f"emitter at ({x}, {y}) lies outside the grid")
    lam = expected_map(emitters, psf, grid, exposure_s, background_per_pixel)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x504C,)))
    px = rng.poisson(lam).astype(float)
    return PLMap(px, grid.pixel_size_um, grid.origin_um, excitation_wavelength_nm)


@dataclass(frozen=True)
class Detection:
    x_um: float
    y_um: float
    peak: float  # background-subtracted peak pixel value


def background_level(pixels):
    """Robust (median, sigma) of the map; sigma from the MAD."""
    med = float(np.median(pixels))
    mad = float(np.median(np.abs(pixels - med)))
    sigma = 1.4826 * mad
    if sigma == 0:
        # sparse/low-count maps: fall back on Poisson noise of the median level
        sigma = math.sqrt(max(med, 1.0))
    return med, sigma


def detect_emitters(m: PLMap, threshold_sigma: float = 5.0, psf: PSFModel | None = None):
    """Find emitters as local maxima above ``bg + threshold_sigma * bg_sigma``.

    Candidates must look like the PSF: the four nearest neighbours must carry
    at least half the signal a PSF-wide spot would put there, which rejects
    isolated hot pixels. Positions are refined by the background-subtracted
    centroid over a window of radius one FWHM. Returns detections sorted by
    peak height, brightest first.
    """
    psf = psf or PSFModel()
    px = m.pixels
    bg, sig = background_level(px)
    thresh = bg + threshold_sigma * sig
    r_pix = max(1, int(round(psf.fwhm_um / m.pixel_size_um)))
    footprint = np.ones((2 * r_pix + 1, 2 * r_pix + 1), bool)
    local_max = (px == ndimage.maximum_filter(px, footprint=footprint, mode="constant", cval=-np.inf))
    cand = np.argwhere(local_max & (px > thresh))
    # expected neighbour/peak ratio one pixel away for a centred PSF
    ratio = math.exp(-0.5 * (m.pixel_size_um / psf.sigma_um) ** 2)
    ny, nx = px.shape
    yy, xx = np.mgrid[-r_pix: r_pix + 1, -r_pix: r_pix + 1]
    disk = xx**2 + yy**2 <= r_pix**2
    found = []
    taken = np.zeros_like(px, bool)
    for i, j in sorted(map(tuple, cand), key=lambda ij: -px[ij]):
        if taken[i, j]:
            continue  # plateau duplicate of a brighter maximum
        peak = px[i, j] - bg
        nb = [px[a, b] - bg for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)) if 0 <= a < ny and 0 <= b < nx]
        if np.mean(nb) < 0.5 * ratio * peak:
            continue
        i0, i1 = max(i - r_pix, 0), min(i + r_pix + 1, ny)
        j0, j1 = max(j - r_pix, 0), min(j + r_pix + 1, nx)
        win = np.clip(px[i0:i1, j0:j1] - bg, 0.0, None)
        win = win * disk[i0 - i + r_pix: i1 - i + r_pix, j0 - j + r_pix: j1 - j + r_pix]
        taken[i0:i1, j0:j1] |= disk[i0 - i + r_pix: i1 - i + r_pix, j0 - j + r_pix: j1 - j + r_pix]
        tot = win.sum()
        rows, cols = np.mgrid[i0:i1, j0:j1]
        cy = (rows * win).sum() / tot + 0.5
        cx = (cols * win).sum() / tot + 0.5
        x, y = m.to_um(cx, cy)
        found.append(Detection(float(x), float(y), float(peak)))
    found.sort(key=lambda d: -d.peak)
    return found


@dataclass(frozen=True)
class SpotIntegral:
    counts: float  # background-subtracted
    raw_sum: float
    background_per_pixel: float
    n_pixels: int
    blended: bool


def integrate_spot(m: PLMap, center, box_um: float, detections=None) -> SpotIntegral:
    """Sum a square box around `center` minus the local background.

    The background is the median of an annulus (the box of twice the side,
    minus the box itself, clipped to the map) times the box pixel count. The
    spot is flagged `blended` when another detection falls inside the box.
    """
    cx, cy = float(center[0]), float(center[1])
    half = box_um / 2
    x0, y0 = m.origin_um
    ny, nx = m.pixels.shape
    c_lo, r_lo = m.to_pixel(cx - half, cy - half)
    c_hi, r_hi = m.to_pixel(cx + half, cy + half)
    if c_lo < -1e-9 or r_lo < -1e-9 or c_hi > nx + 1e-9 or r_hi > ny + 1e-9:
        raise OutOfBounds("integration box extends beyond the map")
    # pixels whose centres lie inside the box
    j0, j1 = int(math.ceil(c_lo - 0.5)), int(math.floor(c_hi - 0.5)) + 1
    i0, i1 = int(math.ceil(r_lo - 0.5)), int(math.floor(r_hi - 0.5)) + 1
    j0, i0 = max(j0, 0), max(i0, 0)
    j1, i1 = min(j1, nx), min(i1, ny)
    box = m.pixels[i0:i1, j0:j1]
    w, h = j1 - j0, i1 - i0
    a0, a1 = max(i0 - h // 2 - 1, 0), min(i1 + h // 2 + 1, ny)
    b0, b1 = max(j0 - w // 2 - 1, 0), min(j1 + w // 2 + 1, nx)
    ring = np.ones((a1 - a0, b1 - b0), bool)
    ring[i0 - a0: i1 - a0, j0 - b0: j1 - b0] = False
    ring_px = m.pixels[a0:a1, b0:b1][ring]
    bg = float(np.median(ring_px)) if ring_px.size else 0.0
    raw = float(box.sum())
    blended = False
    for d in detections or ():
        if (d.x_um, d.y_um) == (cx, cy):
            continue
        if abs(d.x_um - cx) <= half and abs(d.y_um - cy) <= half and math.hypot(d.x_um - cx, d.y_um - cy) > 1e-9:
            blended = True
            break
    return SpotIntegral(raw - bg * box.size, raw, bg, int(box.size), blended)


# --- ensemble statistics ---------------------------------------------------------


@dataclass
class EmitterRecord:
    position_um: tuple[float, float]
    g2_zero: float | None = None
    lifetime_ns: float | None = None
    brightness_hz: float | None = None
    peak_wavelength_nm: float | None = None
    fwhm_nm: float | None = None

    def __post_init__(self):
        if self.brightness_hz is not None and self.brightness_hz < 0:
            raise ValueError("brightness must be >= 0")
        if self.lifetime_ns is not None and not self.lifetime_ns > 0:
            raise ValueError("lifetime must be > 0")


QUANTITIES = ("g2_zero", "lifetime_ns", "brightness_hz", "peak_wavelength_nm", "fwhm_nm")


@dataclass
class EnsembleStats:
    quantity: str
    edges: list[float]
    counts: list[int]
    mean: float
    std: float
    n: int
    values: list[float] = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("values")
        return d


def aggregate_stats(records, quantity: str, bin_edges=None, g2_cut: float = 0.5) -> EnsembleStats:
    """Histogram, mean and sample standard deviation of one record field.

    Lifetime statistics only use emitters with ``g2_zero <= g2_cut``. Records
    lacking the quantity are skipped. Values outside explicit `bin_edges`
    raise, so that the histogram always accounts for every value.
    """
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}; choose from {QUANTITIES}")
    if not records:
        raise EmptySelection("no records")
    sel = [r for r in records if getattr(r, quantity) is not None]
    if quantity == "lifetime_ns":
        sel = [r for r in sel if r.g2_zero is not None and r.g2_zero <= g2_cut]
    if not sel:
        raise EmptySelection(f"no records left for {quantity}")
    v = np.array([getattr(r, quantity) for r in sel], dtype=float)
    if bin_edges is None:
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        bin_edges = np.linspace(lo, hi, max(int(math.ceil(math.sqrt(v.size))), 1) + 1)
    edges = np.asarray(bin_edges, dtype=float)
    outside = (v < edges[0]) | (v > edges[-1])
    if np.any(outside):
        raise ValueError(f"{int(outside.sum())} values fall outside the bin edges")
    counts, _ = np.histogram(v, edges)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return EnsembleStats(quantity, edges.tolist(), counts.astype(int).tolist(), float(v.mean()), std, int(v.size), v.tolist())


def stability_metric(binned_timetrace, bin_s: float = 1.0):
    """Mean rate, sample standard deviation and relative fluctuation in percent."""
    c = np.asarray(binned_timetrace, dtype=float)
    if c.size < 2:
        raise ValueError("need at least 2 bins")
    mean = float(c.mean()) / bin_s
    if mean == 0:
        raise DegenerateMean("mean count rate is zero")
    std = float(c.std(ddof=1)) / bin_s
    return mean, std, 100.0 * std / mean


def bin_timetrace(t_ps, duration_ps: int, bin_s: float):
    """Counts per `bin_s` interval over the acquisition (partial last bin dropped)."""
    width = int(round(bin_s * 1e12))
    n = duration_ps // width
    t = np.asarray(t_ps)
    t = t[t < n * width]
    return np.bincount(t // width, minlength=n)[:n]


# --- I/O -------------------------------------------------------------------


def write_raster(path, m: PLMap) -> None:
    path = Path(path)
    m.pixels.astype("<f4").tofile(path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(m.sidecar(), indent=2))


def read_raster(path) -> PLMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    px = np.fromfile(path, dtype="<f4").astype(float).reshape(meta["ny"], meta["nx"])
    return PLMap(px, meta["pixel_size_um"], tuple(meta["origin_um"]),
                 meta.get("excitation_wavelength_nm"), meta.get("normalization"))


def write_map_csv(path, m: PLMap) -> None:
    np.savetxt(path, m.pixels, delimiter=",", fmt="%.9g")
    Path(str(path) + ".json").write_text(json.dumps(m.sidecar(), indent=2))


def read_map_csv(path, pixel_size_um=None, origin_um=(0.0, 0.0)) -> PLMap:
    side = Path(str(path) + ".json")
    px = np.loadtxt(path, delimiter=",", ndmin=2)
    if side.exists():
        meta = json.loads(side.read_text())
        return PLMap(px, meta["pixel_size_um"], tuple(meta["origin_um"]), meta.get("excitation_wavelength_nm"),
                     meta.get("normalization"))
    if pixel_size_um is None:
        raise ValueError("pixel size needed when no JSON sidecar is present")
    return PLMap(px, pixel_size_um, origin_um)


def read_map(path) -> PLMap:
    return read_map_csv(path) if str(path).endswith(".csv") else read_raster(path)


RECORD_COLUMNS = [f.name for f in fields(EmitterRecord) if f.name != "position_um"]


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_um", "y_um", *RECORD_COLUMNS])
        for r in records:
            w.writerow([_fmt(r.position_um[0]), _fmt(r.position_um[1]), *(_fmt(getattr(r, c)) for c in RECORD_COLUMNS)])


def _fmt(v):
    return "" if v is None else repr(float(v))


def read_records_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {c: (float(row[c]) if row.get(c) not in (None, "") else None) for c in RECORD_COLUMNS}
            out.append(EmitterRecord((float(row["x_um"]), float(row["y_um"])), **vals))
    return out
