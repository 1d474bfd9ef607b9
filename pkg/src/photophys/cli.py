"""Command-line front end.

Every subcommand that writes files also writes ``<primary output>.manifest.json``
listing parameters, seed and SHA-256 digests of everything it read and wrote.
Relative output paths resolve against ``--out-dir``, which defaults to
``$PHOTOPHYS_OUT`` or the current directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .correlate import (
    DEFAULT_BIN_PS,
    DEFAULT_SIDE_PEAKS,
    DEFAULT_WINDOW_PERIODS,
    DecayHistogram,
    classify_emitter,
    correlation_histogram,
    decay_histogram,
    g2_zero_pulsed,
    padded_window_ps,
)
from .errors import PhotophysError
from .fit import fit_gaussian_peak, fit_lifetime, fit_saturation
from .pipeline import RunManifest, load_scenario_config, run_pipeline, stage_seed, write_json
from .plmap import (
    Grid,
    PSFModel,
    aggregate_stats,
    detect_emitters,
    integrate_spot,
    read_map,
    read_records_csv,
    render_plmap,
    write_map_csv,
    write_raster,
)
from .sim import Scenario, simulate_stream
from .spectro import (
    SpectralDensity,
    VibronicModel,
    fc_lineshape,
    load_json,
    mirror_spectrum,
    psb_from_spectral_density,
    raman_shifted_wavelength,
    read_spectrum_csv,
    wavelength_energy_convert,
    write_spectrum_csv,
    zpl_area_fraction,
)
from .timetag import hbt_split, merge_streams, read_csv, read_stream, write_csv, write_stream

log = logging.getLogger("photophys")

OUT_ENV = "PHOTOPHYS_OUT"
GLOBAL_DEFAULTS = {"seed": None, "threads": 1, "out_dir": None, "verbose": False}


# --- helpers -------------------------------------------------------------------


def _read_tags(path):
    return read_csv(path) if str(path).endswith(".csv") else read_stream(path)


def _write_tags(path, s):
    (write_csv if str(path).endswith(".csv") else write_stream)(path, s)


class Run:
    """Resolves output paths and collects what a subcommand touched."""

    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir or os.environ.get(OUT_ENV) or ".")
        params = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
        self.manifest = RunManifest(args.command, params, args.seed)
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def out(self, name) -> Path:
        p = Path(name)
        if not p.is_absolute():
            p = self.out_dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def read(self, path):
        self.manifest.record_input(path)
        return path

    def finish(self, status="ok", error=None):
        if not self.outputs:
            return
        self.manifest.status = status
        self.manifest.error = error
        self.manifest.wall_time_s = time.perf_counter() - self.t0
        for p in self.outputs:
            if p.exists():
                self.manifest.record_output(p)
        primary = self.outputs[0]
        self.manifest.write(primary.with_name(primary.name + ".manifest.json"))


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _seed(args, fallback):
    return fallback if args.seed is None else args.seed


# --- subcommands ---------------------------------------------------------------


def cmd_simulate(args, run):
    d = json.loads(Path(run.read(args.scenario)).read_text())
    sc = Scenario.from_dict(d)
    acq = sc.acquisition
    over = {k: getattr(args, k) for k in ("power_uw", "duration_s") if getattr(args, k) is not None}
    seed = _seed(args, acq.seed)
    acq = acq.replace(seed=stage_seed(seed, "simulate"), **over)
    s = simulate_stream(sc.emitters, acq, threads=args.threads)
    t = args.hbt if args.hbt is not None else sc.hbt_transmittance
    if t is not None:
        a, b = hbt_split(s, t, stage_seed(seed, "simulate/split"))
        s = merge_streams(a, b)
    _write_tags(run.out(args.out), s)
    _emit({"tags": len(s), "rate_hz": s.count_rate_hz(), "duration_ps": s.duration_ps})


def cmd_correlate(args, run):
    s = _read_tags(run.read(args.input))
    a, b = s.select(args.channels[0]), s.select(args.channels[1])
    rep = s.meta.rep_period_ps
    window = padded_window_ps(rep, args.window_periods, args.bin_ps) if rep else args.window_ps
    if window is None:
        raise PhotophysError("continuous-wave stream: give --window-ps")
    h = correlation_histogram(a, b, args.bin_ps, window, threads=args.threads)
    hist = run.out(args.out)
    res = {"bin_width_ps": h.bin_width_ps, "window_ps": h.window_ps, "total_coincidences": h.total}
    if rep:
        g = g2_zero_pulsed(h, args.side_peaks)
        res.update({
            "g2_zero": g.g2_zero, "uncertainty": g.uncertainty, "center_area": g.center_area,
            "mean_side_area": g.mean_side_area, "n_side_peaks_used": g.n_side_peaks_used,
            "class": classify_emitter(g).value,
        })
    np.savetxt(hist, np.column_stack([h.delays, h.counts]), delimiter=",", header="delay_ps,counts",
               comments="", fmt="%d")
    write_json(run.out(args.json), res)
    _emit(res)


def _decay_from_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DecayHistogram(np.append(arr[:, 0], arr[-1, 1]), arr[:, 2].astype(np.int64))


def cmd_fit_lifetime(args, run):
    path = run.read(args.input)
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(b"t_lo_ps"):
        h = _decay_from_csv(path)
    else:
        s = _read_tags(path)
        if args.channel is not None:
            s = s.select(args.channel)
        h = decay_histogram(s, args.bin_ps)
    fr = fit_lifetime(h, args.irf_sigma_ps, args.mode)
    write_json(run.out(args.out), fr.to_dict())
    _emit(fr.to_dict())


def cmd_fit_saturation(args, run):
    with open(run.read(args.input), newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["power_uw"]), float(r["rate_hz"])] for r in rows])
    w = None
    if rows and "sigma_hz" in rows[0]:
        w = 1.0 / np.array([float(r["sigma_hz"]) for r in rows]) ** 2
    fr = fit_saturation(pts, w)
    write_json(run.out(args.out), fr.to_dict())
    _emit(fr.to_dict())


def cmd_fit_spectrum(args, run):
    s = read_spectrum_csv(run.read(args.input))
    if args.axis == "ev" and s.axis_kind != "ev":
        s = s.to_energy(jacobian=args.jacobian)
    elif args.axis == "nm" and s.axis_kind != "nm":
        s = s.to_wavelength(jacobian=args.jacobian)
    fr = fit_gaussian_peak(s)
    write_json(run.out(args.out), fr.to_dict())
    _emit(fr.to_dict())


def cmd_plmap_render(args, run):
    with open(run.read(args.emitters), newline="") as fh:
        rows = list(csv.DictReader(fh))
    em = [((float(r["x_um"]), float(r["y_um"])), float(r["rate_hz"])) for r in rows]
    psf = PSFModel(args.psf_fwhm_um)
    if args.size_um:
        n = int(round(args.size_um / args.pixel_um))
        grid = Grid(n, n, args.pixel_um)
    elif em:
        grid = Grid.covering([p for p, _ in em], args.pixel_um, args.margin_um)
    else:
        raise PhotophysError("no emitters: give --size-um")
    m = render_plmap(em, psf, grid, args.exposure_s, _seed(args, 0), args.background, args.excitation_nm)
    path = run.out(args.out)
    if path.suffix == ".csv":
        write_map_csv(path, m)
        run.outputs.append(path.with_name(path.name + ".json"))
    else:
        write_raster(path, m)
        run.outputs.append(path.with_name(path.name + ".json"))
    _emit({"shape": list(m.pixels.shape), "total_counts": float(m.pixels.sum())})


def cmd_plmap_detect(args, run):
    m = read_map(run.read(args.input))
    psf = PSFModel(args.psf_fwhm_um)
    dets = detect_emitters(m, args.threshold_sigma, psf)
    box = args.box_fwhm * psf.fwhm_um
    path = run.out(args.out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_um", "y_um", "peak", "counts", "brightness_hz", "blended"])
        for d in dets:
            sp = integrate_spot(m, (d.x_um, d.y_um), box, dets)
            bright = max(sp.counts, 0.0) / args.exposure_s
            w.writerow([f"{d.x_um:.6g}", f"{d.y_um:.6g}", f"{d.peak:.6g}", f"{sp.counts:.6g}",
                        f"{bright:.6g}", int(sp.blended)])
    _emit({"detections": len(dets)})


def cmd_plmap_stats(args, run):
    records = read_records_csv(run.read(args.input))
    edges = None
    if args.bins is not None:
        edges = np.linspace(args.range[0], args.range[1], args.bins + 1) if args.range else args.bins
    st = aggregate_stats(records, args.quantity, edges, args.g2_cut)
    write_json(run.out(args.out), st.to_dict())
    _emit(st.to_dict())


def cmd_convert(args, run):
    if args.input is None:
        if args.value is None:
            raise PhotophysError("give --value or --in")
        direction = args.direction or "nm->ev"
        v = wavelength_energy_convert(args.value, direction)
        _emit({"input": args.value, "direction": direction, "value": v})
        return
    s = read_spectrum_csv(run.read(args.input))
    to = args.to or ("ev" if s.axis_kind == "nm" else "nm")
    out = s.to_energy(args.jacobian) if to == "ev" else s.to_wavelength(args.jacobian)
    write_spectrum_csv(run.out(args.out), out)


def cmd_raman(args, run):
    v = raman_shifted_wavelength(args.excitation_nm, args.shift_cm)
    _emit({"excitation_nm": args.excitation_nm, "shift_per_cm": args.shift_cm, "wavelength_nm": v})


def cmd_mirror(args, run):
    s = read_spectrum_csv(run.read(args.input))
    write_spectrum_csv(run.out(args.out), mirror_spectrum(s, args.zpl_ev))


def cmd_lineshape(args, run):
    if args.density:
        d = SpectralDensity.from_dict(load_json(run.read(args.density)))
        s = psb_from_spectral_density(d, args.zpl_ev, broadening_mev=args.broadening_mev)
        S = d.total
    else:
        if (args.hr_factor is None) == (args.delta_q is None):
            raise PhotophysError("give exactly one of --hr-factor, --delta-q (or --density)")
        if args.phonon_mev is None:
            raise PhotophysError("--phonon-mev is required for a single-mode model")
        model = VibronicModel(args.zpl_ev, args.phonon_mev, args.hr_factor, args.delta_q, args.broadening_mev)
        s = fc_lineshape(model, args.n_max)
        S = model.hr_factor
    if args.axis == "nm":
        s = s.to_wavelength(jacobian=True).normalized()
    write_spectrum_csv(run.out(args.out), s)
    e = s if s.axis_kind == "ev" else s.to_energy(jacobian=True)
    half = max(5 * args.broadening_mev * 1e-3, 1e-4)
    _emit({"hr_factor": S, "area": s.area(), "zpl_fraction": zpl_area_fraction(e, args.zpl_ev, half)})


def cmd_pipeline(args, run):
    scen = args.scenario
    cfg = load_scenario_config(scen)
    out = run.out_dir if args.out is None else Path(args.out)
    if not out.is_absolute() and args.out is not None:
        out = run.out_dir / out
    code, m = run_pipeline(cfg, out, threads=args.threads, seed=args.seed,
                           manifest_params={"scenario_ref": str(scen)})
    if Path(str(scen)).exists():
        m.record_input(scen)
        m.write(out / "manifest.json")
    print((out / "summary.txt").read_text() if code == 0 else f"failed at stage {m.failed_stage}: {m.error}",
          file=sys.stdout if code == 0 else sys.stderr)
    return code


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    # SUPPRESS lets the flags appear before or after the subcommand
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed; per-stage seeds derive from it")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads, default 1 (results do not depend on it)")
    g.add_argument("--out-dir", default=argparse.SUPPRESS, help=f"base directory for outputs (default ${OUT_ENV} or .)")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="photophys", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate", cmd_simulate, "Monte Carlo photon stream from a scenario JSON")
    sp.add_argument("--scenario", required=True, help="JSON with 'emitters' and 'acquisition'")
    sp.add_argument("--power-uw", type=float, help="override excitation power")
    sp.add_argument("--duration-s", type=float, help="override acquisition time")
    sp.add_argument("--hbt", type=float, metavar="T", help="split onto channels 0/1 with transmittance T")
    sp.add_argument("-o", "--out", default="stream.bin", help="output .bin or .csv")

    sp = add("correlate", cmd_correlate, "coincidence histogram and pulsed g2(0) of a two-channel stream")
    sp.add_argument("--in", dest="input", required=True, help="time-tag file (.bin or .csv)")
    sp.add_argument("--channels", type=int, nargs=2, default=(0, 1), metavar=("A", "B"))
    sp.add_argument("--bin-ps", type=int, default=DEFAULT_BIN_PS)
    sp.add_argument("--window-periods", type=int, default=DEFAULT_WINDOW_PERIODS)
    sp.add_argument("--window-ps", type=int, default=None, help="half window for CW streams")
    sp.add_argument("--side-peaks", type=int, default=DEFAULT_SIDE_PEAKS)
    sp.add_argument("-o", "--out", default="g2_histogram.csv", help="histogram CSV")
    sp.add_argument("--json", default="g2.json", help="result JSON")

    sp = add("fit-lifetime", cmd_fit_lifetime, "fit an excited-state lifetime")
    sp.add_argument("--in", dest="input", required=True, help="time-tag file or decay-histogram CSV")
    sp.add_argument("--channel", type=int, default=None, help="use only this channel")
    sp.add_argument("--bin-ps", type=int, default=256)
    sp.add_argument("--irf-sigma-ps", type=float, default=0.0)
    sp.add_argument("--mode", choices=("convolved", "tail"), default="convolved")
    sp.add_argument("-o", "--out", default="lifetime_fit.json")

    sp = add("fit-saturation", cmd_fit_saturation, "fit I(P) = I_sat P/(P+P_sat) + I_d")
    sp.add_argument("--in", dest="input", required=True, help="CSV with power_uw,rate_hz[,sigma_hz]")
    sp.add_argument("-o", "--out", default="saturation_fit.json")

    sp = add("fit-spectrum", cmd_fit_spectrum, "Gaussian peak fit of a spectrum CSV")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--axis", choices=("nm", "ev"), default=None, help="fit on this axis")
    sp.add_argument("--jacobian", action="store_true", help="apply the intensity Jacobian when converting")
    sp.add_argument("-o", "--out", default="spectrum_fit.json")

    sp = add("plmap-render", cmd_plmap_render, "Poisson-sampled PL map of point emitters")
    sp.add_argument("--emitters", required=True, help="CSV with x_um,y_um,rate_hz")
    sp.add_argument("--pixel-um", type=float, default=0.1)
    sp.add_argument("--psf-fwhm-um", type=float, default=0.4)
    sp.add_argument("--exposure-s", type=float, default=1.0)
    sp.add_argument("--background", type=float, default=0.0, help="mean background counts per pixel")
    sp.add_argument("--margin-um", type=float, default=2.0)
    sp.add_argument("--size-um", type=float, default=None, help="square field from the origin")
    sp.add_argument("--excitation-nm", type=float, default=None)
    sp.add_argument("-o", "--out", default="plmap.f32", help=".f32 raster or .csv")

    sp = add("plmap-detect", cmd_plmap_detect, "find and integrate emitters in a PL map")
    sp.add_argument("--in", dest="input", required=True, help="map (.f32 or .csv with sidecar)")
    sp.add_argument("--threshold-sigma", type=float, default=5.0)
    sp.add_argument("--psf-fwhm-um", type=float, default=0.4)
    sp.add_argument("--box-fwhm", type=float, default=3.0, help="integration box in PSF FWHMs")
    sp.add_argument("--exposure-s", type=float, default=1.0)
    sp.add_argument("-o", "--out", default="detections.csv")

    sp = add("plmap-stats", cmd_plmap_stats, "ensemble statistics over emitter records")
    sp.add_argument("--in", dest="input", required=True, help="records CSV")
    sp.add_argument("--quantity", required=True,
                    choices=("g2_zero", "lifetime_ns", "brightness_hz", "peak_wavelength_nm", "fwhm_nm"))
    sp.add_argument("--bins", type=int, default=None)
    sp.add_argument("--range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    sp.add_argument("--g2-cut", type=float, default=0.5)
    sp.add_argument("-o", "--out", default="stats.json")

    sp = add("convert", cmd_convert, "wavelength/energy conversion of a value or spectrum")
    sp.add_argument("--value", type=float, default=None)
    sp.add_argument("--direction", choices=("nm->ev", "ev->nm"), default=None)
    sp.add_argument("--in", dest="input", default=None, help="spectrum CSV")
    sp.add_argument("--to", choices=("nm", "ev"), default=None)
    sp.add_argument("--jacobian", action="store_true")
    sp.add_argument("-o", "--out", default="converted.csv")

    sp = add("raman", cmd_raman, "Stokes Raman line position")
    sp.add_argument("--excitation-nm", type=float, required=True)
    sp.add_argument("--shift-cm", type=float, required=True, help="Raman shift in cm^-1")

    sp = add("mirror", cmd_mirror, "reflect a spectrum about the zero-phonon line")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--zpl-ev", type=float, required=True)
    sp.add_argument("-o", "--out", default="mirrored.csv")

    sp = add("lineshape", cmd_lineshape, "vibronic emission lineshape")
    sp.add_argument("--zpl-ev", type=float, required=True)
    sp.add_argument("--hr-factor", type=float, default=None)
    sp.add_argument("--delta-q", type=float, default=None, help="configuration shift (amu^1/2 A)")
    sp.add_argument("--phonon-mev", type=float, default=None)
    sp.add_argument("--density", default=None, help="spectral density JSON (multi-mode)")
    sp.add_argument("--broadening-mev", type=float, default=2.0, help="Gaussian std per line")
    sp.add_argument("--n-max", type=int, default=60)
    sp.add_argument("--axis", choices=("ev", "nm"), default="ev")
    sp.add_argument("-o", "--out", default="lineshape.csv")

    sp = add("pipeline", cmd_pipeline, "end-to-end scenario run with summary and manifest")
    sp.add_argument("--scenario", default="paper-defaults", help="bundled name (paper-defaults, empty) or JSON path")
    sp.add_argument("-o", "--out", default=None, help="run directory (default: --out-dir)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args)
    try:
        code = args.func(args, run)
    except (PhotophysError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.finish("failed", repr(exc))
        return 1
    if args.command != "pipeline":
        run.finish()
    return code or 0


if __name__ == "__main__":
    raise SystemExit(main())
