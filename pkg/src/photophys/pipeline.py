"""End-to-end scenario runs: simulate -> correlate -> fit -> aggregate -> report.

A scenario is a JSON document with optional sections. ``emitter`` drives the
single-emitter characterisation (saturation, lifetime, antibunching,
timetrace, spectrum); ``array`` drives the emitter-array statistics. Every
stochastic stage draws its seed from the global seed and the stage name, so
outputs do not depend on which stages run or on the thread count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .correlate import (
    EmitterClass,
    classify_emitter,
    correlation_histogram,
    decay_histogram,
    g2_zero_pulsed,
    padded_window_ps,
)
from .errors import EmptySelection, PhotophysError
from .fit import fit_gaussian_peak, fit_lifetime, fit_saturation
from .plmap import (
    EmitterRecord,
    Grid,
    PSFModel,
    aggregate_stats,
    bin_timetrace,
    detect_emitters,
    integrate_spot,
    render_plmap,
    stability_metric,
    write_raster,
    write_records_csv,
)
from .sim import (
    AcquisitionConfig,
    EmitterModel,
    expected_rate_hz,
    sample_emitter_count,
    simulate_stream,
    single_fraction_among_occupied,
)
from .spectro import Spectrum, write_spectrum_csv
from .timetag import hbt_split, merge_streams, write_stream

log = logging.getLogger(__name__)

BUNDLED = {"paper-defaults": "paper_defaults.json", "empty": "empty.json"}


def stage_seed(seed: int, stage: str) -> int:
    """Stable 63-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_scenario_config(name_or_path) -> dict:
    """Read a scenario by bundled name (``paper-defaults``, ``empty``) or file path."""
    key = str(name_or_path)
    if key in BUNDLED:
        return json.loads(resources.files("photophys.data").joinpath(BUNDLED[key]).read_text())
    return json.loads(Path(key).read_text())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, enum_types):
        return obj.value
    return obj


enum_types = (EmitterClass,)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    subcommand: str
    parameters: dict
    seed: int | None
    tool_version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time_s: float = 0.0
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None

    def record_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def record_output(self, path, root=None):
        key = str(Path(path).relative_to(root)) if root else str(path)
        self.outputs[key] = sha256_file(path)

    def write(self, path) -> None:
        write_json(path, asdict(self))


class StageFailed(PhotophysError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class Pipeline:
    def __init__(self, scenario: dict, out_dir, threads: int = 1, seed: int | None = None):
        self.scenario = scenario
        self.seed = int(scenario.get("seed", 0) if seed is None else seed)
        self.out = Path(out_dir)
        self.threads = max(1, int(threads))
        self.written: list[Path] = []
        self.summary: dict = {"scenario": scenario.get("name", "custom"), "seed": self.seed}
        acq = dict(scenario.get("acquisition", {}))
        self.base = AcquisitionConfig(**acq)

    # -- helpers
    def _path(self, rel) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def _json(self, rel, obj):
        write_json(self._path(rel), obj)

    def _csv(self, rel, header, columns, fmt="%.10g"):
        np.savetxt(self._path(rel), np.column_stack(columns), delimiter=",", header=",".join(header),
                   comments="", fmt=fmt)

    def _emitter(self, **over) -> EmitterModel:
        e = dict(self.scenario["emitter"])
        e.update(over)
        return EmitterModel.from_saturation(
            e.pop("i_sat_hz"), e.pop("p_sat_uw"), e.pop("lifetime_ns"),
            rep_rate_mhz=self.base.rep_rate_mhz, efficiency=e.pop("quantum_and_collection_efficiency", 1.0), **e)

    def _cfg(self, stage, **over) -> AcquisitionConfig:
        return self.base.replace(seed=stage_seed(self.seed, stage), **over)

    # -- single-emitter characterisation
    def stage_saturation(self):
        sc = self.scenario["saturation"]
        m = self._emitter()
        pts = []
        for k, P in enumerate(sc["powers_uw"]):
            cfg = self._cfg(f"saturation/{k}", power_uw=float(P), duration_s=sc["duration_s"], irf_sigma_ps=0.0)
            pts.append((float(P), simulate_stream([m], cfg).count_rate_hz()))
        pts = np.array(pts)
        self._csv("emitter/saturation_points.csv", ["power_uw", "rate_hz"], [pts[:, 0], pts[:, 1]])
        fr = fit_saturation(pts)
        self._json("emitter/saturation_fit.json", fr.to_dict())
        self.summary["saturation"] = fr.to_dict()

    def stage_lifetime(self):
        sc = self.scenario["lifetime"]
        m = self._emitter()
        cfg = self._cfg("lifetime", power_uw=sc["power_uw"])
        cfg = cfg.replace(duration_s=sc["target_photons"] / expected_rate_hz([m], cfg))
        s = simulate_stream([m], cfg, threads=self.threads)
        write_stream(self._path("emitter/lifetime_stream.bin"), s)
        h = decay_histogram(s, sc.get("bin_ps", 256))
        self._csv("emitter/decay_histogram.csv", ["t_lo_ps", "t_hi_ps", "counts"],
                  [h.edges_ps[:-1], h.edges_ps[1:], h.counts], fmt="%d")
        fr = fit_lifetime(h, cfg.irf_sigma_ps, "convolved")
        self._json("emitter/lifetime_fit.json", fr.to_dict())
        self.summary["lifetime"] = {**fr.to_dict(), "photons": len(s)}

    def _background_for(self, signal_hz, fraction, dark_hz):
        return max(signal_hz * (1.0 - fraction) / fraction - dark_hz, 0.0)

    def stage_antibunching(self):
        sc = self.scenario["antibunching"]
        m = self._emitter()
        cfg = self._cfg("antibunching", power_uw=sc["power_uw"], duration_s=sc["duration_s"])
        signal = expected_rate_hz([m], cfg.replace(dark_rate_hz=0.0, background_rate_hz=0.0))
        cfg = cfg.replace(background_rate_hz=self._background_for(signal, sc["signal_fraction"], cfg.dark_rate_hz))
        s = simulate_stream([m], cfg)
        a, b = hbt_split(s, 0.5, stage_seed(self.seed, "antibunching/split"))
        write_stream(self._path("emitter/hbt_stream.bin"), merge_streams(a, b))
        window = padded_window_ps(cfg.rep_period_ps, sc["window_periods"], sc["bin_ps"])
        h = correlation_histogram(a, b, sc["bin_ps"], window, threads=self.threads)
        self._csv("emitter/g2_histogram.csv", ["delay_ps", "counts"], [h.delays, h.counts], fmt="%d")
        g = g2_zero_pulsed(h, sc["side_peaks"])
        out = {**asdict(g), "class": classify_emitter(g).value, "signal_fraction": sc["signal_fraction"],
               "oracle_g2": 1.0 - sc["signal_fraction"] ** 2}
        self._json("emitter/g2_result.json", out)
        self.summary["antibunching"] = out

    def stage_timetrace(self):
        sc = self.scenario["timetrace"]
        e = self.scenario["emitter"]
        target = sc["mean_rate_hz"] - self.base.dark_rate_hz
        power = e["p_sat_uw"] * target / (e["i_sat_hz"] - target)
        m = self._emitter()
        cfg = self._cfg("timetrace", power_uw=power, duration_s=sc["duration_s"])
        s = simulate_stream([m], cfg)
        counts = bin_timetrace(s.t, s.duration_ps, sc["bin_s"])
        t = (np.arange(counts.size) + 0.5) * sc["bin_s"]
        self._csv("emitter/timetrace.csv", ["t_s", "counts"], [t, counts])
        mean, std, rel = stability_metric(counts, sc["bin_s"])
        out = {"mean_hz": mean, "std_hz": std, "relative_percent": rel,
               "shot_noise_percent": 100.0 / math.sqrt(mean * sc["bin_s"])}
        self._json("emitter/stability.json", out)
        self.summary["timetrace"] = out

    def _synthetic_spectrum(self, rng, components, sc):
        lam = np.arange(sc["longpass_nm"], sc["stop_nm"] + 1e-9, sc["step_nm"])
        mu = np.full(lam.shape, float(sc["background_counts"]))
        for center, fwhm, weight in components:
            s = fwhm / (2 * math.sqrt(2 * math.log(2)))
            mu += weight * sc["peak_counts"] * np.exp(-0.5 * ((lam - center) / s) ** 2)
        return Spectrum(lam, rng.poisson(mu).astype(float), "nm")

    def stage_spectrum(self):
        sc = self.scenario["spectrum"]
        e = self.scenario["emitter"]
        rng = np.random.default_rng(stage_seed(self.seed, "spectrum"))
        spec = self._synthetic_spectrum(rng, [(e["peak_wavelength_nm"], e["fwhm_nm"], 1.0)], sc)
        write_spectrum_csv(self._path("emitter/spectrum.csv"), spec)
        fr = fit_gaussian_peak(spec)
        self._json("emitter/spectrum_fit.json", fr.to_dict())
        self.summary["spectrum"] = fr.to_dict()

    # -- emitter array
    def _array_layout(self, ac):
        n = int(ac.get("n_spots", 0))
        cols = int(ac.get("columns", max(1, math.ceil(math.sqrt(n)))))
        spacing = ac.get("spacing_um", 3.0)
        rng = np.random.default_rng(stage_seed(self.seed, "array/layout"))
        margin = 2.0 * spacing / 3.0
        spots = []
        for k in range(n):
            jit = rng.normal(0.0, ac.get("jitter_um", 0.0), 2)
            spots.append((margin + (k % cols) * spacing + jit[0], margin + (k // cols) * spacing + jit[1]))
        lam = ac.get("mean_emitters", 1.0)
        emitters = []
        for k, (x, y) in enumerate(spots):
            r = np.random.default_rng(stage_seed(self.seed, f"array/spot/{k}/emitters"))
            nk = sample_emitter_count(lam, stage_seed(self.seed, f"array/spot/{k}/count"))
            group = []
            for _ in range(nk):
                dx, dy = r.normal(0.0, ac.get("cluster_sigma_um", 0.0), 2)
                group.append({
                    "position_um": (x + dx, y + dy),
                    "lifetime_ns": max(float(r.normal(ac["lifetime_mean_ns"], ac["lifetime_std_ns"])), 0.5),
                    "peak_wavelength_nm": float(r.normal(ac["peak_wavelength_mean_nm"], ac["peak_wavelength_std_nm"])),
                    "fwhm_nm": max(float(r.normal(ac["fwhm_mean_nm"], ac["fwhm_std_nm"])), 5.0),
                })
            emitters.append(group)
        return spots, emitters

    def _measure_spot(self, k, group, ac):
        """g2, lifetime and spectrum of one detected spot."""
        models = [self._emitter(lifetime_ns=g["lifetime_ns"], position_um=g["position_um"],
                                peak_wavelength_nm=g["peak_wavelength_nm"], fwhm_nm=g["fwhm_nm"]) for g in group]
        cfg = self._cfg(f"array/spot/{k}/stream", power_uw=ac["spot_power_uw"], duration_s=ac["spot_duration_s"])
        single = expected_rate_hz([self._emitter()], cfg.replace(dark_rate_hz=0.0, background_rate_hz=0.0))
        cfg = cfg.replace(background_rate_hz=self._background_for(single, ac["spot_signal_fraction"], cfg.dark_rate_hz))
        s = simulate_stream(models, cfg)
        a, b = hbt_split(s, 0.5, stage_seed(self.seed, f"array/spot/{k}/split"))
        out = {"g2": None, "lifetime_ns": None, "peak_nm": None, "fwhm_nm": None}
        try:
            h = correlation_histogram(a, b, 256, padded_window_ps(cfg.rep_period_ps, 10, 256))
            out["g2"] = g2_zero_pulsed(h, 10).g2_zero
        except PhotophysError as exc:
            log.warning("spot %d: g2 failed: %s", k, exc)
        try:
            out["lifetime_ns"] = fit_lifetime(decay_histogram(s, 256), cfg.irf_sigma_ps)["tau_ns"]
        except PhotophysError as exc:
            log.warning("spot %d: lifetime fit failed: %s", k, exc)
        if group and "spectrum" in self.scenario:
            rng = np.random.default_rng(stage_seed(self.seed, f"array/spot/{k}/spectrum"))
            comps = [(g["peak_wavelength_nm"], g["fwhm_nm"], 1.0) for g in group]
            try:
                fr = fit_gaussian_peak(self._synthetic_spectrum(rng, comps, self.scenario["spectrum"]))
                out["peak_nm"], out["fwhm_nm"] = fr["center_nm"], fr["fwhm_nm"]
            except PhotophysError as exc:
                log.warning("spot %d: spectrum fit failed: %s", k, exc)
        return out

    def stage_array(self):
        ac = self.scenario.get("array", {})
        spots, emitters = self._array_layout(ac)
        psf = PSFModel(ac.get("psf_fwhm_um", 0.4))
        pixel = ac.get("pixel_um", 0.1)
        exposure = ac.get("exposure_s", 10.0)
        if "emitter" in self.scenario:
            e = self.scenario["emitter"]
            P = ac.get("plmap_power_uw", 50.0)
            rate = e["i_sat_hz"] * P / (P + e["p_sat_uw"])
        else:
            rate = 0.0
        flat = [(g["position_um"], rate) for group in emitters for g in group]
        grid = Grid.covering(spots, pixel, ac.get("spacing_um", 3.0)) if spots else Grid(100, 100, pixel)
        pl = render_plmap(flat, psf, grid, exposure, stage_seed(self.seed, "array/plmap"),
                          ac.get("background_per_pixel", 5.0), self.base.laser_wavelength_nm)
        write_raster(self._path("array/plmap.f32"), pl)
        self.written.append(self.out / "array/plmap.f32.json")
        dets = detect_emitters(pl, ac.get("threshold_sigma", 5.0), psf)
        box = ac.get("box_fwhm", 3.0) * psf.fwhm_um

        truth_rows = [(k, x, y, len(g)) for k, ((x, y), g) in enumerate(zip(spots, emitters))]
        self._csv("array/spots_truth.csv", ["spot", "x_um", "y_um", "n_emitters"],
                  [np.array(c) for c in zip(*truth_rows)] if truth_rows else [np.empty(0)] * 4)

        matched = []
        for d in dets:
            if spots:
                dist = [math.hypot(d.x_um - x, d.y_um - y) for x, y in spots]
                k = int(np.argmin(dist))
                matched.append(k if dist[k] < ac.get("spacing_um", 3.0) / 2 else None)
            else:
                matched.append(None)

        def work(i):
            k = matched[i]
            group = emitters[k] if k is not None else []
            key = k if k is not None else f"unmatched{i}"
            return self._measure_spot(key, group, ac)

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                measured = list(ex.map(work, range(len(dets))))
        else:
            measured = [work(i) for i in range(len(dets))]

        records, rows = [], []
        for d, k, meas in zip(dets, matched, measured):
            spot = integrate_spot(pl, (d.x_um, d.y_um), box, dets)
            rec = EmitterRecord((d.x_um, d.y_um), meas["g2"], meas["lifetime_ns"],
                                max(spot.counts, 0.0) / exposure, meas["peak_nm"], meas["fwhm_nm"])
            records.append(rec)
            n_true = len(emitters[k]) if k is not None else 0
            cls = classify_emitter(meas["g2"]).value if meas["g2"] is not None else None
            rows.append({"spot": k, "n_emitters_true": n_true, "class": cls, "blended": spot.blended})
        write_records_csv(self._path("array/records.csv"), records)
        self._json("array/detections.json", rows)

        stats = {}
        for q in ("g2_zero", "lifetime_ns", "brightness_hz", "peak_wavelength_nm", "fwhm_nm"):
            try:
                st = aggregate_stats(records, q)
                stats[q] = st.to_dict()
            except EmptySelection:
                stats[q] = None
        self._json("array/ensemble_stats.json", stats)

        occupied = sum(1 for g in emitters if g)
        n_single = sum(1 for r in rows if r["class"] == EmitterClass.SINGLE.value)
        lam = ac.get("mean_emitters", 1.0)
        singles_true = [emitters[k][0]["lifetime_ns"] for k in matched if k is not None and len(emitters[k]) == 1]
        out = {
            "n_spots": len(spots),
            "occupied_spots": occupied,
            "detections": len(dets),
            "matched_occupied": len({k for k in matched if k is not None and emitters[k]}),
            "n_single": n_single,
            "single_fraction": n_single / len(dets) if dets else None,
            "single_fraction_expected": single_fraction_among_occupied(lam) if lam > 0 and spots else None,
            "true_single_fraction": (sum(1 for g in emitters if len(g) == 1) / occupied) if occupied else None,
            "generator_lifetime_mean_ns": ac.get("lifetime_mean_ns"),
            "generator_lifetime_std_ns": ac.get("lifetime_std_ns"),
            "true_single_lifetimes_mean_ns": float(np.mean(singles_true)) if singles_true else None,
            "stats": stats,
        }
        self._json("array/summary.json", out)
        self.summary["array"] = out

    # -- driver
    def stages(self):
        st = []
        if "emitter" in self.scenario:
            for name in ("saturation", "lifetime", "antibunching", "timetrace", "spectrum"):
                if name in self.scenario:
                    st.append(name)
        if "array" in self.scenario:
            st.append("array")
        return st

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        for name in self.stages():
            log.info("stage %s", name)
            try:
                getattr(self, f"stage_{name}")()
            except Exception as exc:  # any stage failure aborts the run
                raise StageFailed(name, exc) from exc
        self._json("summary.json", self.summary)
        self._path("summary.txt").write_text(summary_table(self.summary))
        return self.summary


def _fmt(v, spec=".4g"):
    if v is None:
        return "-"
    return format(v, spec)


def summary_table(s: dict) -> str:
    """Human-readable table of measured versus generator/target values."""
    rows = [("quantity", "measured", "generator / oracle")]
    if "saturation" in s:
        p, e = s["saturation"]["params"], s["saturation"]["sigmas"]
        rows.append(("I_sat (kHz)", f"{p['i_sat_hz'] / 1e3:.3f} +- {e['i_sat_hz'] / 1e3:.3f}", "46.88"))
        rows.append(("P_sat (uW)", f"{p['p_sat_uw']:.2f} +- {e['p_sat_uw']:.2f}", "114"))
        rows.append(("I_d (Hz)", f"{p['i_dark_hz']:.1f}", "150"))
    if "lifetime" in s:
        p, e = s["lifetime"]["params"], s["lifetime"]["sigmas"]
        rows.append(("lifetime (ns)", f"{p['tau_ns']:.4f} +- {e['tau_ns']:.4f}", "3.83"))
    if "antibunching" in s:
        a = s["antibunching"]
        rows.append(("g2(0)", f"{a['g2_zero']:.3f} +- {a['uncertainty']:.3f} ({a['class']})", f"{a['oracle_g2']:.3f}"))
    if "timetrace" in s:
        t = s["timetrace"]
        rows.append(("trace mean (kHz)", f"{t['mean_hz'] / 1e3:.2f} +- {t['std_hz'] / 1e3:.2f}", "12.9"))
        rows.append(("trace stability (%)", f"{t['relative_percent']:.2f}", f"shot noise {t['shot_noise_percent']:.2f}"))
    if "spectrum" in s:
        p = s["spectrum"]["params"]
        rows.append(("peak (nm)", f"{p['center_nm']:.2f}", "575"))
        rows.append(("FWHM (nm)", f"{p['fwhm_nm']:.2f}", "19.56"))
    if "array" in s:
        a = s["array"]
        rows.append(("spots / occupied", f"{a['n_spots']} / {a['occupied_spots']}", ""))
        rows.append(("detections", str(a["detections"]), str(a["occupied_spots"])))
        rows.append(("single fraction", _fmt(a["single_fraction"], ".3f"), _fmt(a["single_fraction_expected"], ".3f")))
        lt = a["stats"].get("lifetime_ns")
        if lt:
            rows.append(("lifetime mean/std (ns)", f"{lt['mean']:.2f} / {lt['std']:.2f} (n={lt['n']})",
                         f"{a['generator_lifetime_mean_ns']} / {a['generator_lifetime_std_ns']}"))
        wl = a["stats"].get("peak_wavelength_nm")
        if wl:
            rows.append(("peak wavelength (nm)", f"{wl['mean']:.2f} +- {wl['std']:.2f}", "574.83 +- 0.84"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_pipeline(scenario, out_dir, threads: int = 1, seed: int | None = None,
                 manifest_params: dict | None = None) -> tuple[int, RunManifest]:
    """Run a scenario and write ``manifest.json``; returns (exit code, manifest)."""
    cfg = scenario if isinstance(scenario, dict) else load_scenario_config(scenario)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(cfg, out, threads=threads, seed=seed)
    manifest = RunManifest("pipeline", {"scenario": cfg, "threads": threads, **(manifest_params or {})}, pipe.seed)
    if not isinstance(scenario, dict) and Path(str(scenario)).exists():
        manifest.record_input(scenario)
    t0 = time.perf_counter()
    code = 0
    try:
        pipe.run()
    except StageFailed as exc:
        manifest.status = "failed"
        manifest.failed_stage = exc.stage
        manifest.error = repr(exc.cause)
        code = 2
    manifest.wall_time_s = time.perf_counter() - t0
    for p in pipe.written:
        if p.exists():
            manifest.record_output(p, out)
    manifest.write(out / "manifest.json")
    return code, manifest
