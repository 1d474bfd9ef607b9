"""Monte Carlo time-tag generation for pulsed two-level emitters.

Every emitter gets its own family of seeded generators, keyed by
``(seed, emitter index, sub-stream)``, so the output does not depend on the
order (or thread) in which emitters are generated.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .timetag import StreamMeta, TimeTagStream

# sub-stream keys
_EMIT, _DELAY, _IRF, _BLINK = range(4)
_NOISE_KEY = 1 << 20
_DARK, _BACKGROUND = range(2)


@dataclass(frozen=True)
class EmitterModel:
    lifetime_ns: float
    p_max: float
    p_sat_uw: float
    quantum_and_collection_efficiency: float = 1.0
    peak_wavelength_nm: float = 575.0
    fwhm_nm: float = 19.56
    position_um: tuple[float, float] = (0.0, 0.0)
    # optional two-state telegraph blinking; None disables it
    blink_on_ms: float | None = None
    blink_off_ms: float | None = None

    def __post_init__(self):
        if not self.lifetime_ns > 0:
            raise ValueError("lifetime_ns must be > 0")
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError("p_max must lie in [0, 1]")
        if not self.p_sat_uw > 0:
            raise ValueError("p_sat_uw must be > 0")
        if not 0.0 < self.quantum_and_collection_efficiency <= 1.0:
            raise ValueError("efficiency must lie in (0, 1]")
        if (self.blink_on_ms is None) != (self.blink_off_ms is None):
            raise ValueError("blink_on_ms and blink_off_ms must be given together")
        if self.blink_on_ms is not None and not (self.blink_on_ms > 0 and self.blink_off_ms > 0):
            raise ValueError("blinking dwell times must be > 0")
        object.__setattr__(self, "position_um", tuple(float(v) for v in self.position_um))

    @classmethod
    def from_saturation(cls, i_sat_hz, p_sat_uw, lifetime_ns, rep_rate_mhz=20.0, efficiency=1.0, **kw):
        """Model whose detected rate saturates at `i_sat_hz` for the given laser."""
        p_max = i_sat_hz / (rep_rate_mhz * 1e6 * efficiency)
        return cls(lifetime_ns=lifetime_ns, p_max=p_max, p_sat_uw=p_sat_uw,
                   quantum_and_collection_efficiency=efficiency, **kw)

    @property
    def blinking(self) -> bool:
        return self.blink_on_ms is not None


@dataclass(frozen=True)
class AcquisitionConfig:
    rep_rate_mhz: float = 20.0
    power_uw: float = 0.0
    duration_s: float = 1.0
    irf_sigma_ps: float = 0.0
    dark_rate_hz: float = 0.0
    background_rate_hz: float = 0.0
    seed: int = 0
    laser_wavelength_nm: float | None = None

    def __post_init__(self):
        if not self.rep_rate_mhz > 0:
            raise ValueError("rep_rate_mhz must be > 0")
        for name in ("power_uw", "duration_s", "irf_sigma_ps", "dark_rate_hz", "background_rate_hz"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def rep_period_ps(self) -> int:
        return int(round(1e6 / self.rep_rate_mhz))

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration_s * 1e12))

    @property
    def n_pulses(self) -> int:
        return self.duration_ps // self.rep_period_ps

    def replace(self, **changes) -> AcquisitionConfig:
        return AcquisitionConfig(**{**asdict(self), **changes})


def excitation_probability(power_uw: float, model: EmitterModel) -> float:
    """Per-pulse excitation probability ``p_max * P / (P + P_sat)``."""
    if power_uw < 0:
        raise ValueError("power_uw must be >= 0")
    return model.p_max * power_uw / (power_uw + model.p_sat_uw)


def expected_rate_hz(models, config: AcquisitionConfig) -> float:
    """Mean detected count rate implied by the models and acquisition settings."""
    rep_hz = 1e12 / config.rep_period_ps
    signal = sum(
        excitation_probability(config.power_uw, m) * m.quantum_and_collection_efficiency for m in models
    )
    return signal * rep_hz + config.dark_rate_hz + config.background_rate_hz


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _bernoulli_indices(rng, q, n):
    """Sorted indices in ``range(n)`` each selected independently with prob `q`."""
    if q <= 0.0 or n <= 0:
        return np.empty(0, np.int64)
    if q >= 1.0:
        return np.arange(n, dtype=np.int64)
    chunks = []
    pos = -1
    while True:
        remaining = n - 1 - pos
        size = int(remaining * q + 6 * math.sqrt(remaining * q) + 16)
        idx = pos + np.cumsum(rng.geometric(q, size))
        done = idx[-1] >= n
        if done:
            idx = idx[idx < n]
        chunks.append(idx)
        if done:
            break
        pos = int(idx[-1])
    return np.concatenate(chunks)


def _telegraph_mask(rng, t_ps, duration_ps, on_ms, off_ms):
    """True where `t_ps` falls in an 'on' interval of a random telegraph."""
    on_ps, off_ps = on_ms * 1e9, off_ms * 1e9
    state = rng.random() < on_ps / (on_ps + off_ps)
    first_on = state
    switches = []
    now = 0.0
    while now < duration_ps:
        now += rng.exponential(on_ps if state else off_ps)
        switches.append(now)
        state = not state
    seg = np.searchsorted(np.asarray(switches), t_ps, side="right")
    # even segment index has the initial state
    return (seg % 2 == 0) == first_on


def _emitter_times(i, model, config):
    seed = config.seed
    n = config.n_pulses
    q = excitation_probability(config.power_uw, model) * model.quantum_and_collection_efficiency
    pulses = _bernoulli_indices(_rng(seed, i, _EMIT), q, n)
    delay = _rng(seed, i, _DELAY).exponential(model.lifetime_ns * 1e3, pulses.size)
    if config.irf_sigma_ps > 0:
        delay += _rng(seed, i, _IRF).normal(0.0, config.irf_sigma_ps, pulses.size)
    t = pulses * config.rep_period_ps + np.rint(delay).astype(np.int64)
    if model.blinking:
        t = t[_telegraph_mask(_rng(seed, i, _BLINK), t, config.duration_ps, model.blink_on_ms, model.blink_off_ms)]
    return t


def _poisson_times(rng, rate_hz, duration_ps):
    n = rng.poisson(rate_hz * duration_ps * 1e-12)
    return rng.integers(0, duration_ps + 1, n, dtype=np.int64)


def simulate_stream(models, config: AcquisitionConfig, threads: int = 1) -> TimeTagStream:
    """Generate the detected time tags of `models` under pulsed excitation.

    Per pulse each emitter emits at most one photon, which is detected with
    probability ``p(P) * efficiency``. The detection time is the pulse time
    plus an exponential decay plus Gaussian IRF jitter. Dark counts and
    background are homogeneous Poisson processes. All tags are on channel 0;
    use :func:`photophys.timetag.hbt_split` to model the two HBT detectors.
    """
    models = list(models)
    if threads > 1 and len(models) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda im: _emitter_times(im[0], im[1], config), enumerate(models)))
    else:
        parts = [_emitter_times(i, m, config) for i, m in enumerate(models)]
    parts.append(_poisson_times(_rng(config.seed, _NOISE_KEY, _DARK), config.dark_rate_hz, config.duration_ps))
    parts.append(
        _poisson_times(_rng(config.seed, _NOISE_KEY, _BACKGROUND), config.background_rate_hz, config.duration_ps)
    )
    t = np.sort(np.concatenate(parts), kind="stable")
    t = t[(t >= 0) & (t <= config.duration_ps)]
    meta = StreamMeta(config.rep_period_ps, config.laser_wavelength_nm, config.power_uw)
    return TimeTagStream(t, np.zeros(t.size, np.uint8), config.duration_ps, meta)


def sample_emitter_count(mean_lambda: float, seed: int) -> int:
    """Number of emitters formed at one irradiated spot, Poisson(mean_lambda)."""
    if mean_lambda < 0:
        raise ValueError("mean_lambda must be >= 0")
    return int(np.random.default_rng(seed).poisson(mean_lambda))


def dose_to_density(dwell_time_s: float, lambda_max: float, t0_s: float) -> float:
    """Mean emitters per spot after irradiating for `dwell_time_s`.

    Saturating dose response ``lambda_max * (1 - exp(-t / t0))``.
    """
    if dwell_time_s < 0 or lambda_max < 0:
        raise ValueError("dwell time and lambda_max must be >= 0")
    if not t0_s > 0:
        raise ValueError("t0_s must be > 0")
    return lambda_max * -math.expm1(-dwell_time_s / t0_s)


def single_fraction_among_occupied(mean_lambda: float) -> float:
    """P(N = 1 | N >= 1) for Poisson emitter counts."""
    if mean_lambda <= 0:
        raise ValueError("mean_lambda must be > 0")
    return mean_lambda * math.exp(-mean_lambda) / -math.expm1(-mean_lambda)


# --- scenario files ------------------------------------------------------------


def _build(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class Scenario:
    emitters: list[EmitterModel]
    acquisition: AcquisitionConfig
    hbt_transmittance: float | None = field(default=None)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        acq = dict(d.get("acquisition", {}))
        if "seed" in d:
            acq["seed"] = d["seed"]
        emitters = []
        for e in d.get("emitters", []):
            e = dict(e)
            if "i_sat_hz" in e:
                i_sat = e.pop("i_sat_hz")
                eff = e.pop("quantum_and_collection_efficiency", 1.0)
                emitters.append(EmitterModel.from_saturation(
                    i_sat, e.pop("p_sat_uw"), e.pop("lifetime_ns"),
                    rep_rate_mhz=acq.get("rep_rate_mhz", 20.0), efficiency=eff, **e))
            else:
                emitters.append(_build(EmitterModel, e))
        return cls(emitters, _build(AcquisitionConfig, acq), d.get("hbt_transmittance"))

    def to_dict(self) -> dict:
        acq = asdict(self.acquisition)
        return {
            "seed": acq.pop("seed"),
            "acquisition": acq,
            "emitters": [asdict(e) for e in self.emitters],
            "hbt_transmittance": self.hbt_transmittance,
        }


def load_scenario(path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))
