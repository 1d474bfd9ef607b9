"""Two-channel coincidence histograms and pulsed g2(0) extraction.

Delays are binned with bins centred on integer multiples of the bin width,
``k = sign(d) * floor(|d| / w + 1/2)``. The rounding is symmetric in the
sign of the delay, so swapping the channels mirrors the histogram exactly.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNormalization, NotSorted
from .timetag import TimeTagStream

DEFAULT_BIN_PS = 256
DEFAULT_WINDOW_PERIODS = 10
DEFAULT_SIDE_PEAKS = 10


@dataclass(frozen=True, eq=False)
class CorrelationHistogram:
    bin_width_ps: int
    delays: np.ndarray
    counts: np.ndarray
    rep_period_ps: int | None = None

    def __post_init__(self):
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if self.delays.size > 1 and np.any(np.diff(self.delays) <= 0):
            raise ValueError("delays must be strictly increasing")
        # side peaks are needed for normalisation
        if self.rep_period_ps is not None and self.window_ps < 3 * self.rep_period_ps:
            raise ValueError("window must span at least 3 repetition periods")

    @property
    def half_bins(self) -> int:
        return (self.delays.size - 1) // 2

    @property
    def window_ps(self) -> int:
        return self.half_bins * self.bin_width_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mirrored(self) -> CorrelationHistogram:
        return CorrelationHistogram(self.bin_width_ps, self.delays, self.counts[::-1].copy(), self.rep_period_ps)

    def __add__(self, other):
        if self.bin_width_ps != other.bin_width_ps or not np.array_equal(self.delays, other.delays):
            raise ValueError("histograms have different binning")
        return CorrelationHistogram(self.bin_width_ps, self.delays, self.counts + other.counts, self.rep_period_ps)


@dataclass(frozen=True)
class G2Result:
    g2_zero: float
    uncertainty: float
    center_area: int
    mean_side_area: float
    n_side_peaks_used: int


class EmitterClass(str, enum.Enum):
    SINGLE = "Single"
    NON_SINGLE = "NonSingle"
    ENSEMBLE = "Ensemble"


def delay_bin(d, bin_width_ps):
    """Symmetric bin index for integer delays (vectorised)."""
    d = np.asarray(d, dtype=np.int64)
    k = (2 * np.abs(d) + bin_width_ps) // (2 * bin_width_ps)
    return np.where(d < 0, -k, k)


def _check_sorted(t, name):
    if t.size > 1 and np.any(t[1:] < t[:-1]):
        raise NotSorted(f"{name} is not sorted by timestamp")


def _sweep(a, b, K, w, out):
    """Accumulate delays ``b - a`` into `out` (length 2K+1)."""
    if a.size == 0 or b.size == 0:
        return
    reach = K * w + w // 2
    lo = np.searchsorted(b, a - reach, side="left")
    hi = np.searchsorted(b, a + reach, side="right")
    n = hi - lo
    keep = np.flatnonzero(n)
    if keep.size == 0:
        return
    # visit tags with many partners first; at offset j the active set is a prefix
    order = keep[np.argsort(-n[keep], kind="stable")]
    n_sorted = n[order]
    lo_sorted = lo[order]
    a_sorted = a[order]
    nbins = 2 * K + 1
    j = 0
    stop = order.size
    while stop:
        d = b[lo_sorted[:stop] + j] - a_sorted[:stop]
        k = delay_bin(d, w)
        k = k[np.abs(k) <= K] + K
        out += np.bincount(k, minlength=nbins)
        j += 1
        stop = int(np.searchsorted(-n_sorted, -j, side="left"))


def correlation_histogram(
    ch0: TimeTagStream,
    ch1: TimeTagStream,
    bin_width_ps: int = DEFAULT_BIN_PS,
    window_ps: int | None = None,
    threads: int = 1,
) -> CorrelationHistogram:
    """Histogram of delays ``t1 - t0`` over all pairs within ``±window_ps``.

    Runs a sorted two-pointer sweep in O(N * w), where w is the mean number
    of partners per tag inside the window. With ``threads > 1`` the
    channel-0 stream is partitioned and the partial histograms summed.
    """
    w = int(bin_width_ps)
    if w <= 0:
        raise ValueError("bin_width_ps must be > 0")
    rep = ch0.meta.rep_period_ps or ch1.meta.rep_period_ps
    if window_ps is None:
        if rep is None:
            raise ValueError("window_ps is required for unpulsed streams")
        window_ps = padded_window_ps(rep, DEFAULT_WINDOW_PERIODS, w)
    window_ps = int(window_ps)
    if window_ps % w:
        raise ValueError("bin width must divide the window evenly")
    a, b = ch0.t, ch1.t
    _check_sorted(a, "ch0")
    _check_sorted(b, "ch1")
    K = window_ps // w
    counts = np.zeros(2 * K + 1, dtype=np.int64)
    if threads > 1 and a.size > threads:
        parts = np.array_split(np.arange(a.size), threads)

        def work(idx):
            out = np.zeros_like(counts)
            _sweep(a[idx[0]: idx[-1] + 1], b, K, w, out)
            return out

        with ThreadPoolExecutor(threads) as ex:
            for part in ex.map(work, parts):
                counts += part
    else:
        _sweep(a, b, K, w, counts)
    delays = np.arange(-K, K + 1, dtype=np.int64) * w
    return CorrelationHistogram(w, delays, counts, rep)


def padded_window_ps(rep_period_ps: int, n_periods: int, bin_width_ps: int) -> int:
    """Smallest bin-aligned window that fully covers `n_periods` side peaks.

    Peak m is integrated over ``m*T ± T/2``, so the outermost one needs the
    window to reach ``(n + 1/2) * T``.
    """
    need = (n_periods + 0.5) * rep_period_ps
    return int(math.ceil(need / bin_width_ps)) * bin_width_ps


def peak_areas(h: CorrelationHistogram, n_side_peaks: int):
    """Coincidences summed within ±T/2 of each peak ``m*T``, m = -n..n."""
    T = h.rep_period_ps
    if T is None:
        raise ValueError("histogram has no repetition period")
    # last bin must reach (n + 1/2) T so every side peak is complete
    if h.delays[-1] + h.bin_width_ps / 2 < (n_side_peaks + 0.5) * T:
        raise ValueError(
            f"window {h.window_ps} ps does not cover {n_side_peaks} full side peaks of period {T} ps"
        )
    # peak index of each bin centre, with centres at exactly +-T/2 going outward
    m = np.sign(h.delays) * np.floor(np.abs(h.delays) / T + 0.5)
    m = m.astype(np.int64)
    sel = np.abs(m) <= n_side_peaks
    areas = np.bincount(m[sel] + n_side_peaks, weights=h.counts[sel], minlength=2 * n_side_peaks + 1)
    return np.rint(areas).astype(np.int64)


def g2_zero_pulsed(h: CorrelationHistogram, n_side_peaks: int = DEFAULT_SIDE_PEAKS) -> G2Result:
    """Centre-peak area divided by the mean area of the 2n side peaks.

    No background is subtracted. The 1-sigma uncertainty propagates Poisson
    errors of the centre area and of the summed side areas.
    """
    if n_side_peaks < 1:
        raise ValueError("need at least one side peak per side")
    areas = peak_areas(h, n_side_peaks)
    center = int(areas[n_side_peaks])
    side = np.delete(areas, n_side_peaks)
    side_sum = int(side.sum())
    if side_sum == 0:
        raise DegenerateNormalization("all side peaks are empty")
    mean_side = side_sum / side.size
    g2 = center / mean_side
    sigma = math.sqrt(max(center, 1)) / mean_side
    if center:
        sigma = g2 * math.sqrt(1.0 / center + 1.0 / side_sum)
    return G2Result(g2, sigma, center, mean_side, int(side.size))


def classify_emitter(g2: G2Result | float) -> EmitterClass:
    """Single below 0.5 (strict), Ensemble above 1, NonSingle otherwise."""
    value = g2.g2_zero if isinstance(g2, G2Result) else float(g2)
    if value < 0.5:
        return EmitterClass.SINGLE
    if value > 1.0:
        return EmitterClass.ENSEMBLE
    return EmitterClass.NON_SINGLE


# --- TCSPC decay histograms ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecayHistogram:
    """Photon counts versus delay after the laser pulse."""

    edges_ps: np.ndarray
    counts: np.ndarray

    @property
    def centers_ps(self):
        return 0.5 * (self.edges_ps[1:] + self.edges_ps[:-1])

    @property
    def bin_width_ps(self) -> float:
        return float(self.edges_ps[1] - self.edges_ps[0])


def decay_histogram(s: TimeTagStream, bin_width_ps: int = 256, pre_pulse_ps: int = 5000) -> DecayHistogram:
    """Fold the stream onto one laser period.

    Delays are ``(t + pre_pulse_ps) mod T`` so the excitation pulse sits at
    `pre_pulse_ps`, clear of the wrap-around at 0.
    """
    T = s.meta.rep_period_ps
    if T is None:
        raise ValueError("decay histograms need a pulsed stream")
    nb = T // bin_width_ps
    edges = np.arange(nb + 1, dtype=np.int64) * bin_width_ps
    folded = (s.t + pre_pulse_ps) % T
    folded = folded[folded < edges[-1]]
    counts = np.bincount(folded // bin_width_ps, minlength=nb)
    return DecayHistogram(edges, counts.astype(np.int64))
