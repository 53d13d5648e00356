"""Scenario execution: wiring, the time loop, artifacts.

Controllers run at their own fixed period (the boost trackers and the
central compensator decimate further); the plant integrates at the solver
step, taking several substeps per control tick when the step is refined.
All channels are sampled on a fixed output grid and written as CSV with
full round-trip float precision, so a re-run from the echoed configuration
is byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .analysis import MetricsReport, TimeSeries
from .config import KNOWN_CHANNELS, ScenarioConfig, echo
from .control import (
    DgControlParams,
    DgController,
    DroopParams,
    ModeParams,
    MpptParams,
    PrGains,
    VirtualImpedanceParams,
    VrParams,
    MODE_VR,
)
from .errors import AnalysisError
from .plant import (
    AcStageParams,
    DcLinkParams,
    DgPlantParams,
    HarmonicInjection,
    LoadSpec,
    Plant,
    PvParams,
    pv_current,
)
from .signals import FrameVector, Pll, inverse_clarke
from .vcc import CentralCompensator, DqExtractionBank, PiGains, VccParams, hd, vuf


@dataclass
class RunResult:
    """In-memory outcome of one scenario run."""

    cfg: ScenarioConfig
    times: np.ndarray
    channels: dict[str, np.ndarray]
    flags: list[tuple[float, str, str]]
    mode_transitions: list[tuple[float, str, str]]
    energy_audit_percent: float
    max_kcl_residual: float
    mpp_available_w: tuple[float, ...]

    def series(self, name: str, unit: str = "") -> TimeSeries:
        return TimeSeries(name, unit, float(self.times[1] - self.times[0]),
                          self.channels[name])


def _mpp_power(pv: PvParams, irradiance: float) -> float:
    vs = np.linspace(0.0, pv.v_oc, 4001)
    ps = vs * np.array([pv_current(v, irradiance, pv) for v in vs])
    return float(ps.max())


def build_plant(cfg: ScenarioConfig) -> Plant:
    dgs = []
    for dg in cfg.dgs:
        dgs.append(DgPlantParams(
            pv=PvParams(dg.pv.rated_w, dg.pv.v_oc, dg.pv.i_sc, dg.pv.v_mp, dg.pv.i_mp),
            dc=DcLinkParams(dg.c_pv, dg.l_boost, dg.c_dc),
            ac=AcStageParams(dg.filter_l, dg.filter_c, dg.feeder_r, dg.feeder_l),
            irradiance=dg.pv.irradiance,
        ))
    load = LoadSpec(
        balanced_r=cfg.balanced_r,
        balanced_l=cfg.balanced_l,
        unbalanced_r_a=cfg.unbalanced_r_a,
        harmonics=tuple(HarmonicInjection(o, a, p) for o, a, p in cfg.harmonics),
        step_time=cfg.load_step_time,
        step_scale=cfg.load_step_scale,
    )
    return Plant(dgs, load, cfg.dt, cfg.method,
                 v_dc_init=cfg.dgs[0].v_dc_ref)


def build_controllers(cfg: ScenarioConfig) -> list[DgController]:
    out = []
    for dg in cfg.dgs:
        params = DgControlParams(
            droop=DroopParams(dg.m_p, dg.n_p, cfg.v_amp, cfg.omega),
            virtual_impedance=VirtualImpedanceParams(
                dg.vi_r_pos, dg.vi_l_pos, dg.vi_r_neg, dict(dg.vi_r_h)),
            pr_voltage=PrGains(*dg.prv, orders=dg.prv_orders),
            pr_current=PrGains(*dg.pri, orders=dg.pri_orders),
            mppt=MpptParams(dg.mppt_period, dg.mppt_duty_step, dg.mppt_deadband),
            vr=VrParams(dg.vr_kp, dg.vr_ki, dg.v_dc_ref),
            mode=ModeParams(dg.enter_vr_margin, dg.exit_vr_margin, dg.exit_hold),
            rated_va=dg.pv.rated_w,
            vi_omega=cfg.omega,
            current_limit_factor=dg.current_limit_factor,
            startup_ramp=cfg.startup_ramp,
            sequence_gain=dg.vi_bandwidth_gain,
        )
        duty_init = 1.0 - dg.pv.v_mp / dg.v_dc_ref
        out.append(DgController(params, cfg.control_period, duty_init))
    return out


def build_compensator(cfg: ScenarioConfig) -> CentralCompensator:
    params = VccParams(
        vuf_ref=cfg.vuf_ref,
        hd_ref={3: cfg.hd_ref, -5: cfg.hd_ref, 7: cfg.hd_ref, -11: cfg.hd_ref},
        gains={c: PiGains(*g) for c, g in cfg.vcc_gains.items()},
        rated_powers=tuple(dg.pv.rated_w for dg in cfg.dgs),
        output_limit=cfg.vcc_output_limit,
        effort_limit=cfg.vcc_effort_limit,
    )
    return CentralCompensator(params)


class _FlagRecorder:
    """Rising-edge log of boolean conditions, bounded in size."""

    LIMIT = 500

    def __init__(self):
        self.events: list[tuple[float, str, str]] = []
        self._last: dict[tuple[str, str], bool] = {}
        self.dropped = 0

    def poll(self, t: float, source: str, name: str, active: bool):
        key = (source, name)
        if active and not self._last.get(key, False):
            if len(self.events) < self.LIMIT:
                self.events.append((t, source, name))
            else:
                self.dropped += 1
        self._last[key] = active


def run_simulation(cfg: ScenarioConfig) -> RunResult:
    plant = build_plant(cfg)
    controllers = build_controllers(cfg)
    comp = build_compensator(cfg)
    bank = DqExtractionBank(cfg.vcc_period,
                            cutoff_hz=cfg.extraction_cutoff_hz,
                            damping=cfg.extraction_damping)
    pll = Pll(cfg.pll_kp, cfg.pll_ki, omega_init=cfg.omega,
              omega_min=cfg.omega * (1.0 - cfg.pll_band),
              omega_max=cfg.omega * (1.0 + cfg.pll_band))

    # The controllers run at their own fixed period; the plant may take
    # several integration substeps per control tick.  Controls are held
    # between ticks, and the load synchronization angle is advanced at the
    # tracked frequency across substeps, so refining the solver step only
    # refines the plant integration.
    n_sub = int(round(cfg.control_period / cfg.dt))
    ticks = int(round(cfg.duration / cfg.control_period))
    dt_ctl = cfg.control_period
    vcc_every = int(round(cfg.vcc_period / dt_ctl))
    sample_every = int(round(cfg.sample_dt / dt_ctl))
    n_rows = (ticks + sample_every - 1) // sample_every

    selected = cfg.channels if cfg.channels is not None else list(KNOWN_CHANNELS)
    times = np.empty(n_rows)
    chan = {name: np.empty(n_rows) for name in selected}
    flags = _FlagRecorder()

    online = {"vuf": 0.0, "hd3": 0.0, "hd5": 0.0, "hd7": 0.0, "hd11": 0.0}
    zero_vc = FrameVector(0.0, 0.0)
    vcc_on = cfg.vcc_enable_at is not None
    delay_queue: list[tuple[float, dict]] = []
    applied_efforts: dict | None = None

    irr_events = sorted(cfg.irradiance_events)
    next_event = 0

    row = 0
    for tick in range(ticks):
        t = plant.t
        theta = pll.theta
        omega = pll.omega

        while next_event < len(irr_events) and irr_events[next_event][0] <= t:
            _, d, value = irr_events[next_event]
            plant.set_irradiance(d, value)
            next_event += 1

        meas = plant.measurements(theta)
        v_pcc_ab = FrameVector(*meas["v_pcc_ab"])
        v_pcc_abc = inverse_clarke(v_pcc_ab)

        if tick % vcc_every == 0:
            extracted = bank.step(v_pcc_abc, theta, cfg.vcc_period)
            pos_mag = extracted[1].magnitude()
            online["vuf"], _ = vuf(extracted[-1].magnitude(), pos_mag)
            for order, key in ((3, "hd3"), (-5, "hd5"), (7, "hd7"), (-11, "hd11")):
                online[key], _ = hd(extracted[order].magnitude(), pos_mag)
            if vcc_on and t + 1e-12 >= cfg.vcc_enable_at:
                comp.step(extracted, cfg.vcc_period)
                if cfg.vcc_comm_delay > 0.0:
                    delay_queue.append((t + cfg.vcc_comm_delay, dict(comp._effort_dq)))
                flags.poll(t, "vcc", "output_clamp", comp.clamped)
                comp.clamped = False
                flags.poll(t, "vcc", "positive_sequence_floor", not comp.indices_valid)

        if cfg.vcc_comm_delay > 0.0:
            while delay_queue and delay_queue[0][0] <= t:
                applied_efforts = delay_queue.pop(0)[1]

        duties = []
        mods = []
        vc_log = []
        for d, ctl in enumerate(controllers):
            if vcc_on and t + 1e-12 >= cfg.vcc_enable_at:
                if cfg.vcc_comm_delay > 0.0:
                    if applied_efforts is None:
                        v_c = zero_vc
                    else:
                        v_c = comp.correction_from(applied_efforts, d, theta)
                else:
                    v_c = comp.correction_for(d, theta)
            else:
                v_c = zero_vc
            duty, m = ctl.step(meas["dg"][d], v_c, t, dt_ctl)
            duties.append(duty)
            mods.append(m)
            vc_log.append(v_c)
            src = f"dg{d + 1}"
            flags.poll(t, src, "droop_voltage_clamp", ctl.droop.clamped)
            flags.poll(t, src, "current_reference_clamp", ctl.voltage_loop.clamped)
            flags.poll(t, src, "dc_link_lockout", ctl.current_loop.locked_out)
            flags.poll(t, src, "modulation_clamp", plant.saturated[d])

        if tick % sample_every == 0:
            times[row] = t
            values = {
                "vpcc_a": v_pcc_abc.a, "vpcc_b": v_pcc_abc.b, "vpcc_c": v_pcc_abc.c,
                "vcc_active": 1.0 if (vcc_on and t + 1e-12 >= cfg.vcc_enable_at) else 0.0,
                "vcc_vuf": online["vuf"], "vcc_hd3": online["hd3"],
                "vcc_hd5": online["hd5"], "vcc_hd7": online["hd7"],
                "vcc_hd11": online["hd11"],
            }
            for d, ctl in enumerate(controllers):
                i = d + 1
                io_abc = inverse_clarke(FrameVector(*meas["dg"][d]["i_o_ab"]))
                values[f"dg{i}_p"] = ctl.p_avg
                values[f"dg{i}_q"] = ctl.q_avg
                values[f"dg{i}_vdc"] = meas["dg"][d]["v_dc"]
                values[f"dg{i}_vpv"] = meas["dg"][d]["v_pv"]
                values[f"dg{i}_duty"] = duties[d]
                values[f"dg{i}_mode"] = 1.0 if ctl.boost.mode == MODE_VR else 0.0
                values[f"dg{i}_omega"] = ctl.droop.omega_ref
                values[f"dg{i}_io_a"] = io_abc.a
                values[f"dg{i}_io_b"] = io_abc.b
                values[f"dg{i}_io_c"] = io_abc.c
                values[f"pv{i}_power"] = meas["dg"][d]["v_pv"] * meas["dg"][d]["i_pv"]
                values[f"vc{i}_alpha"] = vc_log[d].x
                values[f"vc{i}_beta"] = vc_log[d].y
            for name in selected:
                chan[name][row] = values[name]
            row += 1

        pll.step(v_pcc_ab, dt_ctl)
        for sub in range(n_sub):
            # injections evaluated mid-substep: a start-of-step hold leaves a
            # first-order phase bias that shows up in the harmonic voltages
            plant.step(duties, mods, theta + omega * ((sub + 0.5) * cfg.dt))

    mode_transitions = []
    for d, ctl in enumerate(controllers):
        for t, what in ctl.boost.transitions:
            mode_transitions.append((t, f"dg{d + 1}", what))
    mode_transitions.sort()

    mpp_available = tuple(
        _mpp_power(plant.dgs[d].pv, plant.dc_sides[d].irradiance)
        for d in range(len(plant.dgs)))

    return RunResult(
        cfg=cfg,
        times=times[:row],
        channels={k: v[:row] for k, v in chan.items()},
        flags=flags.events,
        mode_transitions=mode_transitions,
        energy_audit_percent=100.0 * plant.energy_audit_error(),
        max_kcl_residual=plant.max_kcl_residual,
        mpp_available_w=mpp_available,
    )


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

SETTLE_AFTER_EVENT = 2.0   # seconds granted after the last scheduled event
STEADY_RMS_TOL = 2.0       # percent cycle-RMS variation treated as steady


def last_event_time(cfg: ScenarioConfig) -> float:
    t = 0.0
    if cfg.vcc_enable_at is not None:
        t = max(t, cfg.vcc_enable_at)
    if cfg.load_step_time is not None:
        t = max(t, cfg.load_step_time)
    for ev in cfg.irradiance_events:
        t = max(t, ev[0])
    return t


def assemble_report(result: RunResult) -> MetricsReport:
    cfg = result.cfg
    needed = {"vpcc_a", "vpcc_b", "vpcc_c", "dg1_p", "dg2_p", "dg1_q", "dg2_q",
              "dg1_vdc", "dg2_vdc", "dg1_omega", "pv1_power", "pv2_power"}
    missing = needed - set(result.channels)
    if missing:
        raise AnalysisError(
            f"report needs channels {sorted(missing)}; add them to outputs.channels")

    va = result.series("vpcc_a", "V")
    sample_dt = va.dt
    t0 = float(result.times[0])

    def measured_f1(w0: float, w1: float) -> float:
        """Droop frequency averaged over a window; anchors the DFT bins."""
        i0 = max(int(round(w0 / sample_dt)), 0)
        i1 = int(round(w1 / sample_dt))
        return float(np.mean(result.channels["dg1_omega"][i0:i1])) / (2.0 * math.pi)

    f1 = measured_f1(cfg.duration * 0.5, cfg.duration)
    start, end = analysis.steady_window(va, STEADY_RMS_TOL, f1)
    floor = last_event_time(cfg) + SETTLE_AFTER_EVENT - t0
    start = max(start, floor)
    if end - start < 10.0 / f1:
        start = max(end - 10.0 / f1, 0.0)

    def window_metrics(w0: float, w1: float):
        fw = measured_f1(w0, w1)
        cycles = max(int((w1 - w0) * fw) - 1, 10)
        i1 = int(round(w1 / sample_dt))
        thds = {}
        phasors = []
        for phase in ("a", "b", "c"):
            full = result.series(f"vpcc_{phase}", "V")
            clipped = TimeSeries(full.name, full.unit, sample_dt, full.samples[:i1])
            sp = analysis.spectrum(clipped, fw, cycles)
            thds[phase] = analysis.thd(sp)
            phasors.append(complex(sp.phasors[0]))
        return thds, analysis.vuf_from_phasors(*phasors)

    thds, vuf_pct = window_metrics(start, end)

    window_abs = (start + t0, end + t0)
    sharing = analysis.sharing_metrics(
        result.series("dg1_p", "W"), result.series("dg2_p", "W"),
        result.series("dg1_q", "var"), result.series("dg2_q", "var"),
        (start, end))

    i0 = int(round(start / sample_dt))
    i1 = int(round(end / sample_dt))
    v_dc_stats = []
    pv_actual = []
    for i in (1, 2):
        seg = result.channels[f"dg{i}_vdc"][i0:i1]
        v_dc_stats.append({"mean": float(np.mean(seg)), "min": float(np.min(seg)),
                           "max": float(np.max(seg))})
        pv_actual.append(float(np.mean(result.channels[f"pv{i}_power"][i0:i1])))

    p_means = (sharing.p_means[0], sharing.p_means[1])
    q_means = (sharing.q_means[0], sharing.q_means[1])
    avail = sum(result.mpp_available_w)
    curtailment = 100.0 * max(0.0, 1.0 - sum(pv_actual) / avail) if avail > 0 else 0.0

    pre_window = None
    pre_thd = None
    pre_vuf = None
    if cfg.vcc_enable_at is not None and 0.5 < cfg.vcc_enable_at < cfg.duration:
        w1 = cfg.vcc_enable_at - t0
        w0 = max(w1 - 1.0, 0.0)
        if w1 - w0 > 12.0 / f1:
            pre_thd, pre_vuf = window_metrics(w0, w1)
            pre_window = (w0 + t0, w1 + t0)

    return MetricsReport(
        window=window_abs,
        fundamental_hz=f1,
        thd_percent=thds,
        vuf_percent=vuf_pct,
        p_watts=p_means,
        q_vars=q_means,
        sharing=sharing,
        v_dc_stats=v_dc_stats,
        curtailment_percent=curtailment,
        energy_audit_percent=result.energy_audit_percent,
        max_kcl_residual=result.max_kcl_residual,
        flags=result.flags,
        mode_transitions=result.mode_transitions,
        pre_window=pre_window,
        pre_thd_percent=pre_thd,
        pre_vuf_percent=pre_vuf,
    )


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    out_dir: Path
    csv_path: Path
    report_path: Path
    echo_path: Path
    report: MetricsReport
    result: RunResult


def write_csv(result: RunResult, path: Path):
    names = [n for n in KNOWN_CHANNELS if n in result.channels]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(["t"] + names) + "\n")
        cols = [result.times] + [result.channels[n] for n in names]
        for i in range(len(result.times)):
            f.write(",".join(repr(float(c[i])) for c in cols) + "\n")


def write_report(report: MetricsReport, cfg: ScenarioConfig, path: Path):
    lines = [f"scenario = {cfg.name}",
             f"duration_s = {cfg.duration:.6f}",
             f"dt_s = {cfg.dt:.9f}"]
    lines.extend(report.lines())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_plots(artifacts: RunArtifacts) -> list[Path]:
    """Columnar plot-ready files derived from the recorded channels."""
    result = artifacts.result
    report = artifacts.report
    cfg = result.cfg
    plot_dir = artifacts.out_dir / "plots"
    plot_dir.mkdir(exist_ok=True)
    t = result.times
    sample_dt = float(t[1] - t[0])
    f1 = report.fundamental_hz
    n_five = int(round(5.0 / f1 / sample_dt))
    written = []

    def voltage_window(name: str, t_end: float):
        i1 = int(round((t_end - t[0]) / sample_dt))
        i0 = max(i1 - n_five, 0)
        path = plot_dir / name
        with open(path, "w", encoding="utf-8") as f:
            f.write("# t vpcc_a vpcc_b vpcc_c\n")
            for i in range(i0, i1):
                f.write(f"{t[i]:.9f} {result.channels['vpcc_a'][i]:.6f} "
                        f"{result.channels['vpcc_b'][i]:.6f} "
                        f"{result.channels['vpcc_c'][i]:.6f}\n")
        written.append(path)

    def spectrum_file(name: str, t_end: float):
        i1 = int(round((t_end - t[0]) / sample_dt))
        cycles = 20
        ts = TimeSeries("vpcc_a", "V", sample_dt, result.channels["vpcc_a"][:i1])
        sp = analysis.spectrum(ts, f1, cycles)
        path = plot_dir / name
        with open(path, "w", encoding="utf-8") as f:
            f.write("# order freq_hz magnitude percent_of_fundamental\n")
            m1 = sp.magnitudes[0]
            for order, mag in zip(sp.orders, sp.magnitudes):
                f.write(f"{order} {order * sp.fundamental_hz:.3f} {mag:.6f} "
                        f"{100.0 * mag / m1:.4f}\n")
        written.append(path)

    toggled = (cfg.vcc_enable_at is not None
               and 0.0 < cfg.vcc_enable_at < cfg.duration
               and report.pre_window is not None)
    if toggled:
        voltage_window("voltage_window_pre.dat", report.pre_window[1])
        spectrum_file("spectrum_pre.dat", report.pre_window[1])
    voltage_window("voltage_window_post.dat", report.window[1])
    spectrum_file("spectrum_post.dat", report.window[1])

    def columns(name: str, cols: list[str]):
        path = plot_dir / name
        with open(path, "w", encoding="utf-8") as f:
            f.write("# t " + " ".join(cols) + "\n")
            for i in range(len(t)):
                f.write(f"{t[i]:.9f} " +
                        " ".join(f"{result.channels[c][i]:.6f}" for c in cols) + "\n")
        written.append(path)

    columns("power_sharing.dat", ["dg1_p", "dg2_p", "dg1_q", "dg2_q"])
    columns("dc_link.dat", ["dg1_vdc", "dg2_vdc", "pv1_power", "pv2_power"])
    columns("currents.dat", ["dg1_io_a", "dg1_io_b", "dg1_io_c",
                             "dg2_io_a", "dg2_io_b", "dg2_io_c"])
    return written


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path,
                 with_plots: bool = False) -> RunArtifacts:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_simulation(cfg)
    report = assemble_report(result)
    artifacts = RunArtifacts(
        out_dir=out,
        csv_path=out / "timeseries.csv",
        report_path=out / "report.txt",
        echo_path=out / "config.echo",
        report=report,
        result=result,
    )
    write_csv(result, artifacts.csv_path)
    write_report(report, cfg, artifacts.report_path)
    artifacts.echo_path.write_text(echo(cfg), encoding="utf-8")
    if with_plots:
        emit_plots(artifacts)
    return artifacts
