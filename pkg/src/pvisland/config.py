"""Scenario configuration: schema, defaults, parsing and echoing.

Scenario files are plain text, one ``dotted.key = value`` pair per line,
``#`` comments allowed.  Every key has a default; an empty file is the
calibrated baseline scenario.  Unknown keys are rejected with the offending
path.  A fully resolved configuration can be echoed back to text and
reloaded to reproduce a run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

V_RMS_TO_AMP = math.sqrt(2.0)

#: Every known key with its default value (as text).  DG2 carries half the
#: droop/virtual-impedance coefficients of DG1 and twice the PV rating; the
#: load block and feeders are the calibrated fixture reproducing the target
#: pre-compensation distortion figures.
DEFAULTS: dict[str, str] = {
    "scenario.name": "baseline",

    "solver.dt": "50e-6",
    "control.period": "50e-6",
    "solver.duration": "8.0",
    "solver.method": "trapezoid",
    "solver.startup_ramp": "0.25",

    "system.omega": "370.0",
    "system.v_rms": "120.0",

    "pll.kp": "92.0",
    "pll.ki": "4230.0",
    "pll.band": "0.5",

    "dg1.pv.rated_w": "3000.0",
    "dg1.pv.v_oc": "450.0",
    "dg1.pv.i_sc": "8.8",
    "dg1.pv.v_mp": "380.0",
    "dg1.pv.i_mp": "7.894736842105263",
    "dg1.pv.irradiance": "1.0",
    "dg1.dc.c_pv": "200e-6",
    "dg1.dc.l_boost": "1.5e-3",
    "dg1.dc.c_dc": "2350e-6",
    "dg1.vr.kp": "0.002",
    "dg1.vr.ki": "0.05",
    "dg1.vr.v_dc_ref": "600.0",
    "dg1.mppt.period": "1e-3",
    "dg1.mppt.duty_step": "0.002",
    "dg1.mppt.deadband": "0.005",
    "dg1.mode.enter_vr_margin": "5.0",
    "dg1.mode.exit_vr_margin": "10.0",
    "dg1.mode.exit_hold": "0.1",
    "dg1.droop.m_p": "12e-4",
    "dg1.droop.n_p": "1e-3",
    "dg1.vi.r_pos": "0.3",
    "dg1.vi.l_pos": "0.5e-3",
    "dg1.vi.r_neg": "2.0",
    "dg1.vi.r_h3": "3.0",
    "dg1.vi.r_h5": "1.0",
    "dg1.vi.r_h7": "1.0",
    "dg1.vi.r_h11": "0.5",
    "dg1.vi.bandwidth_gain": "1.0",
    "dg1.prv.kp": "0.05",
    "dg1.prv.k1": "50.0",
    "dg1.prv.kh": "20.0",
    "dg1.prv.wc": "2.0",
    "dg1.prv.orders": "1,3,5,7,11",
    "dg1.pri.kp": "7.0",
    "dg1.pri.k1": "600.0",
    "dg1.pri.kh": "200.0",
    "dg1.pri.wc": "2.0",
    "dg1.pri.orders": "1,3,5,7,11",
    "dg1.filter.l": "1.8e-3",
    "dg1.filter.c": "25e-6",
    "dg1.feeder.r": "0.8",
    "dg1.feeder.l": "2.4e-3",
    "dg1.current_limit_factor": "1.5",

    "dg2.pv.rated_w": "6000.0",
    "dg2.pv.v_oc": "450.0",
    "dg2.pv.i_sc": "17.6",
    "dg2.pv.v_mp": "380.0",
    "dg2.pv.i_mp": "15.789473684210526",
    "dg2.pv.irradiance": "1.0",
    "dg2.dc.c_pv": "200e-6",
    "dg2.dc.l_boost": "1.5e-3",
    "dg2.dc.c_dc": "2350e-6",
    "dg2.vr.kp": "0.002",
    "dg2.vr.ki": "0.05",
    "dg2.vr.v_dc_ref": "600.0",
    "dg2.mppt.period": "1e-3",
    "dg2.mppt.duty_step": "0.002",
    "dg2.mppt.deadband": "0.005",
    "dg2.mode.enter_vr_margin": "5.0",
    "dg2.mode.exit_vr_margin": "10.0",
    "dg2.mode.exit_hold": "0.1",
    "dg2.droop.m_p": "6e-4",
    "dg2.droop.n_p": "0.5e-3",
    "dg2.vi.r_pos": "0.15",
    "dg2.vi.l_pos": "0.25e-3",
    "dg2.vi.r_neg": "1.0",
    "dg2.vi.r_h3": "1.5",
    "dg2.vi.r_h5": "0.5",
    "dg2.vi.r_h7": "0.5",
    "dg2.vi.r_h11": "0.25",
    "dg2.vi.bandwidth_gain": "1.0",
    "dg2.prv.kp": "0.05",
    "dg2.prv.k1": "50.0",
    "dg2.prv.kh": "20.0",
    "dg2.prv.wc": "2.0",
    "dg2.prv.orders": "1,3,5,7,11",
    "dg2.pri.kp": "7.0",
    "dg2.pri.k1": "600.0",
    "dg2.pri.kh": "200.0",
    "dg2.pri.wc": "2.0",
    "dg2.pri.orders": "1,3,5,7,11",
    "dg2.filter.l": "0.9e-3",
    "dg2.filter.c": "50e-6",
    "dg2.feeder.r": "0.4",
    "dg2.feeder.l": "1.2e-3",
    "dg2.current_limit_factor": "1.5",

    "load.balanced_r": "10.0",
    "load.balanced_l": "0.060",
    "load.unbalanced_r_a": "14.0",
    "load.harmonics": "-1:7.4:0.0, 3:3.1:0.0, -5:4.6:0.0, 7:2.75:0.0, -11:1.3:0.0",
    "load.step_time": "off",
    "load.step_scale": "1.0",

    "vcc.enable_at": "2.0",
    "vcc.period": "1e-3",
    "vcc.vuf_ref": "0.2",
    "vcc.hd_ref": "0.2",
    "vcc.extraction_cutoff_hz": "5.0",
    "vcc.extraction_damping": "2.5",
    "vcc.pi_neg1": "0.5:20.0",
    "vcc.pi_h3": "0.5:15.0",
    "vcc.pi_h5": "5.0:30.0",
    "vcc.pi_h7": "5.0:25.0",
    "vcc.pi_h11": "0.5:5.0",
    "vcc.output_limit": "80.0",
    "vcc.effort_limit": "250.0",
    "vcc.comm_delay": "0.0",

    "events.irradiance": "",

    "outputs.sample_dt": "1e-4",
    "outputs.channels": "all",
}


@dataclass
class PvConfig:
    rated_w: float
    v_oc: float
    i_sc: float
    v_mp: float
    i_mp: float
    irradiance: float


@dataclass
class DgConfig:
    pv: PvConfig
    c_pv: float
    l_boost: float
    c_dc: float
    vr_kp: float
    vr_ki: float
    v_dc_ref: float
    mppt_period: float
    mppt_duty_step: float
    mppt_deadband: float
    enter_vr_margin: float
    exit_vr_margin: float
    exit_hold: float
    m_p: float
    n_p: float
    vi_r_pos: float
    vi_l_pos: float
    vi_r_neg: float
    vi_r_h: dict[int, float]
    vi_bandwidth_gain: float
    prv: tuple[float, float, float, float]   # kp, k1, kh, wc
    prv_orders: tuple[int, ...]
    pri: tuple[float, float, float, float]
    pri_orders: tuple[int, ...]
    filter_l: float
    filter_c: float
    feeder_r: float
    feeder_l: float
    current_limit_factor: float


@dataclass
class ScenarioConfig:
    name: str
    dt: float
    control_period: float
    duration: float
    method: str
    startup_ramp: float
    omega: float
    v_amp: float
    pll_kp: float
    pll_ki: float
    pll_band: float
    dgs: list[DgConfig]
    balanced_r: float
    balanced_l: float | None
    unbalanced_r_a: float | None
    harmonics: list[tuple[int, float, float]]
    load_step_time: float | None
    load_step_scale: float
    vcc_enable_at: float | None
    vcc_period: float
    vuf_ref: float
    hd_ref: float
    extraction_cutoff_hz: float
    extraction_damping: float
    vcc_gains: dict[int, tuple[float, float]]
    vcc_output_limit: float
    vcc_effort_limit: float
    vcc_comm_delay: float
    irradiance_events: list[tuple[float, int, float]]
    sample_dt: float
    channels: list[str] | None      # None means every known channel
    raw: dict[str, str] = field(default_factory=dict, repr=False)


def _parse_float(flat: dict[str, str], key: str) -> float:
    try:
        return float(flat[key])
    except ValueError as exc:
        raise ConfigurationError(f"not a number: {flat[key]!r}", key=key) from exc


def _parse_optional_time(flat: dict[str, str], key: str) -> float | None:
    text = flat[key].strip().lower()
    if text in ("off", "none", ""):
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise ConfigurationError(f"expected a time in seconds or 'off', got {text!r}",
                                 key=key) from exc
    if value < 0.0:
        raise ConfigurationError("time must be non-negative", key=key)
    return value


def _parse_pair(flat: dict[str, str], key: str) -> tuple[float, float]:
    parts = flat[key].split(":")
    if len(parts) != 2:
        raise ConfigurationError(f"expected 'kp:ki', got {flat[key]!r}", key=key)
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ConfigurationError(f"not numbers: {flat[key]!r}", key=key) from exc


def _parse_harmonics(flat: dict[str, str], key: str) -> list[tuple[int, float, float]]:
    text = flat[key].strip()
    if not text:
        return []
    out = []
    for item in text.split(","):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) not in (2, 3):
            raise ConfigurationError(
                f"expected 'order:amplitude[:phase]', got {item.strip()!r}", key=key)
        try:
            order = int(parts[0])
            amp = float(parts[1])
            phase = float(parts[2]) if len(parts) == 3 else 0.0
        except ValueError as exc:
            raise ConfigurationError(f"malformed injection {item.strip()!r}", key=key) from exc
        if order == 0:
            raise ConfigurationError("injection order must be nonzero", key=key)
        out.append((order, amp, phase))
    return out


def _parse_irradiance_events(flat: dict[str, str], key: str
                             ) -> list[tuple[float, int, float]]:
    text = flat[key].strip()
    if not text:
        return []
    out = []
    for item in text.split(","):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 3:
            raise ConfigurationError(
                f"expected 'time:dg:value', got {item.strip()!r}", key=key)
        try:
            t = float(parts[0])
            dg = int(parts[1])
            value = float(parts[2])
        except ValueError as exc:
            raise ConfigurationError(f"malformed event {item.strip()!r}", key=key) from exc
        if dg not in (1, 2):
            raise ConfigurationError("dg index must be 1 or 2", key=key)
        out.append((t, dg - 1, value))
    return out


KNOWN_CHANNELS = [
    "vpcc_a", "vpcc_b", "vpcc_c",
    "dg1_p", "dg1_q", "dg1_vdc", "dg1_vpv", "dg1_duty", "dg1_mode", "dg1_omega",
    "dg1_io_a", "dg1_io_b", "dg1_io_c",
    "dg2_p", "dg2_q", "dg2_vdc", "dg2_vpv", "dg2_duty", "dg2_mode", "dg2_omega",
    "dg2_io_a", "dg2_io_b", "dg2_io_c",
    "pv1_power", "pv2_power",
    "vcc_active", "vcc_vuf", "vcc_hd3", "vcc_hd5", "vcc_hd7", "vcc_hd11",
    "vc1_alpha", "vc1_beta", "vc2_alpha", "vc2_beta",
]


def _parse_channels(flat: dict[str, str], key: str) -> list[str] | None:
    text = flat[key].strip()
    if text.lower() == "all":
        return None
    out = []
    for item in text.split(","):
        name = item.strip()
        if name not in KNOWN_CHANNELS:
            raise ConfigurationError(f"unknown channel {name!r}", key=key)
        out.append(name)
    if not out:
        raise ConfigurationError("channel list is empty", key=key)
    return out


def _parse_orders(flat: dict[str, str], key: str) -> tuple[int, ...]:
    try:
        orders = tuple(int(p.strip()) for p in flat[key].split(","))
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {flat[key]!r}",
                                 key=key) from exc
    if not orders or any(o < 1 for o in orders):
        raise ConfigurationError("resonator orders must be positive integers", key=key)
    return orders


def _dg_from_flat(flat: dict[str, str], prefix: str) -> DgConfig:
    f = lambda suffix: _parse_float(flat, f"{prefix}.{suffix}")
    return DgConfig(
        pv=PvConfig(
            rated_w=f("pv.rated_w"), v_oc=f("pv.v_oc"), i_sc=f("pv.i_sc"),
            v_mp=f("pv.v_mp"), i_mp=f("pv.i_mp"), irradiance=f("pv.irradiance"),
        ),
        c_pv=f("dc.c_pv"), l_boost=f("dc.l_boost"), c_dc=f("dc.c_dc"),
        vr_kp=f("vr.kp"), vr_ki=f("vr.ki"), v_dc_ref=f("vr.v_dc_ref"),
        mppt_period=f("mppt.period"), mppt_duty_step=f("mppt.duty_step"),
        mppt_deadband=f("mppt.deadband"),
        enter_vr_margin=f("mode.enter_vr_margin"),
        exit_vr_margin=f("mode.exit_vr_margin"),
        exit_hold=f("mode.exit_hold"),
        m_p=f("droop.m_p"), n_p=f("droop.n_p"),
        vi_r_pos=f("vi.r_pos"), vi_l_pos=f("vi.l_pos"), vi_r_neg=f("vi.r_neg"),
        vi_r_h={3: f("vi.r_h3"), -5: f("vi.r_h5"), 7: f("vi.r_h7"), -11: f("vi.r_h11")},
        vi_bandwidth_gain=f("vi.bandwidth_gain"),
        prv=(f("prv.kp"), f("prv.k1"), f("prv.kh"), f("prv.wc")),
        prv_orders=_parse_orders(flat, f"{prefix}.prv.orders"),
        pri=(f("pri.kp"), f("pri.k1"), f("pri.kh"), f("pri.wc")),
        pri_orders=_parse_orders(flat, f"{prefix}.pri.orders"),
        filter_l=f("filter.l"), filter_c=f("filter.c"),
        feeder_r=f("feeder.r"), feeder_l=f("feeder.l"),
        current_limit_factor=f("current_limit_factor"),
    )


def _check_divides(period: float, dt: float, key: str):
    ratio = period / dt
    if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
        raise ConfigurationError(
            f"{key} = {period} is not an integer multiple of solver.dt = {dt}", key=key)


def from_mapping(flat: dict[str, str]) -> ScenarioConfig:
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError("unknown key", key=unknown[0])
    merged = dict(DEFAULTS)
    merged.update(flat)

    dt = _parse_float(merged, "solver.dt")
    duration = _parse_float(merged, "solver.duration")
    if dt <= 0.0 or duration <= 0.0:
        raise ConfigurationError("solver.dt and solver.duration must be positive",
                                 key="solver.dt")
    method = merged["solver.method"].strip()
    if method not in ("trapezoid", "rk4"):
        raise ConfigurationError(f"unknown method {method!r}", key="solver.method")

    omega = _parse_float(merged, "system.omega")
    v_amp = V_RMS_TO_AMP * _parse_float(merged, "system.v_rms")
    band = _parse_float(merged, "pll.band")
    if not 0.0 < band < 1.0:
        raise ConfigurationError("pll.band must lie in (0, 1)", key="pll.band")

    control_period = _parse_float(merged, "control.period")
    _check_divides(control_period, dt, "control.period")

    dgs = [_dg_from_flat(merged, "dg1"), _dg_from_flat(merged, "dg2")]
    for i, dg in enumerate(dgs, start=1):
        _check_divides(dg.mppt_period, control_period, f"dg{i}.mppt.period")

    vcc_period = _parse_float(merged, "vcc.period")
    _check_divides(vcc_period, control_period, "vcc.period")
    sample_dt = _parse_float(merged, "outputs.sample_dt")
    _check_divides(sample_dt, control_period, "outputs.sample_dt")

    ubr = merged["load.unbalanced_r_a"].strip().lower()
    unbalanced = None if ubr in ("off", "none", "") else _parse_float(merged, "load.unbalanced_r_a")
    blr = merged["load.balanced_l"].strip().lower()
    balanced_l = None if blr in ("off", "none", "") else _parse_float(merged, "load.balanced_l")

    cfg = ScenarioConfig(
        name=merged["scenario.name"].strip(),
        dt=dt,
        control_period=control_period,
        duration=duration,
        method=method,
        startup_ramp=_parse_float(merged, "solver.startup_ramp"),
        omega=omega,
        v_amp=v_amp,
        pll_kp=_parse_float(merged, "pll.kp"),
        pll_ki=_parse_float(merged, "pll.ki"),
        pll_band=band,
        dgs=dgs,
        balanced_r=_parse_float(merged, "load.balanced_r"),
        balanced_l=balanced_l,
        unbalanced_r_a=unbalanced,
        harmonics=_parse_harmonics(merged, "load.harmonics"),
        load_step_time=_parse_optional_time(merged, "load.step_time"),
        load_step_scale=_parse_float(merged, "load.step_scale"),
        vcc_enable_at=_parse_optional_time(merged, "vcc.enable_at"),
        vcc_period=vcc_period,
        vuf_ref=_parse_float(merged, "vcc.vuf_ref"),
        hd_ref=_parse_float(merged, "vcc.hd_ref"),
        extraction_cutoff_hz=_parse_float(merged, "vcc.extraction_cutoff_hz"),
        extraction_damping=_parse_float(merged, "vcc.extraction_damping"),
        vcc_gains={
            -1: _parse_pair(merged, "vcc.pi_neg1"),
            3: _parse_pair(merged, "vcc.pi_h3"),
            -5: _parse_pair(merged, "vcc.pi_h5"),
            7: _parse_pair(merged, "vcc.pi_h7"),
            -11: _parse_pair(merged, "vcc.pi_h11"),
        },
        vcc_output_limit=_parse_float(merged, "vcc.output_limit"),
        vcc_effort_limit=_parse_float(merged, "vcc.effort_limit"),
        vcc_comm_delay=_parse_float(merged, "vcc.comm_delay"),
        irradiance_events=_parse_irradiance_events(merged, "events.irradiance"),
        sample_dt=sample_dt,
        channels=_parse_channels(merged, "outputs.channels"),
        raw=merged,
    )
    return cfg


def parse_text(text: str) -> ScenarioConfig:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'",
                                     key=stripped)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in flat:
            raise ConfigurationError(f"line {lineno}: duplicate key", key=key)
        flat[key] = value.strip()
    return from_mapping(flat)


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"scenario file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"))


def echo(cfg: ScenarioConfig) -> str:
    """Fully resolved configuration, reloadable for a bit-identical re-run."""
    lines = [f"{key} = {cfg.raw[key]}" for key in sorted(cfg.raw)]
    return "\n".join(lines) + "\n"
