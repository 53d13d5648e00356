"""Per-unit controller stack.

Each generating unit runs, at the control period: power calculation with
slow averaging filters, frequency/voltage droop, sequence-selective virtual
impedance, and the cascaded proportional-resonant voltage and current
loops.  The boost duty cycle comes from a mode machine that switches
between maximum-power tracking and DC-link voltage regulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .signals import (
    ALPHA_BETA,
    FrameVector,
    LowPass1,
    ProportionalResonant,
    ResonantTerm,
    SequenceExtractor,
    SequenceSet,
    ThreePhaseSample,
    inverse_clarke,
)


# ---------------------------------------------------------------------------
# Power calculation
# ---------------------------------------------------------------------------

class PowerCalculator:
    """Instantaneous two-axis power, averaged by first-order filters.

    Inputs are amplitude-invariant stationary-frame vectors, hence the 3/2
    factor on both powers.
    """

    def __init__(self, cutoff_hz: float, dt: float):
        self._p_filt = LowPass1(cutoff_hz, dt)
        self._q_filt = LowPass1(cutoff_hz, dt)
        self.p_inst = 0.0
        self.q_inst = 0.0

    def step(self, v: FrameVector, i: FrameVector) -> tuple[float, float]:
        self.p_inst = 1.5 * (v.x * i.x + v.y * i.y)
        self.q_inst = 1.5 * (v.y * i.x - v.x * i.y)
        return self._p_filt.step(self.p_inst), self._q_filt.step(self.q_inst)


# ---------------------------------------------------------------------------
# Droop
# ---------------------------------------------------------------------------

@dataclass
class DroopParams:
    m_p: float          # (rad/s) per watt
    n_p: float          # volt per var
    v_amp: float        # no-load voltage amplitude
    omega: float        # no-load angular frequency, rad/s

    def __post_init__(self):
        if self.m_p <= 0.0 or self.n_p <= 0.0:
            raise ConfigurationError("droop coefficients must be positive")
        if self.v_amp <= 0.0 or self.omega <= 0.0:
            raise ConfigurationError("droop setpoints must be positive")


class DroopControl:
    """Frequency/active and voltage/reactive droop with its own phase accumulator."""

    def __init__(self, params: DroopParams):
        self.params = params
        self.theta = 0.0
        self.omega_ref = params.omega
        self.v_ref = params.v_amp
        self.clamped = False

    def step(self, p_avg: float, q_avg: float, dt: float) -> FrameVector:
        par = self.params
        self.omega_ref = par.omega - par.m_p * p_avg
        v_ref = par.v_amp - par.n_p * q_avg
        lo, hi = 0.5 * par.v_amp, 1.2 * par.v_amp
        self.clamped = not (lo <= v_ref <= hi)
        self.v_ref = min(max(v_ref, lo), hi)
        self.theta = (self.theta + self.omega_ref * dt) % (2.0 * math.pi)
        return FrameVector(self.v_ref * math.cos(self.theta),
                           self.v_ref * math.sin(self.theta), ALPHA_BETA)


# ---------------------------------------------------------------------------
# Virtual impedance
# ---------------------------------------------------------------------------

@dataclass
class VirtualImpedanceParams:
    r_pos: float
    l_pos: float
    r_neg: float
    r_harmonic: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.r_pos, self.l_pos, self.r_neg) < 0.0 or \
           any(r < 0.0 for r in self.r_harmonic.values()):
            raise ConfigurationError("virtual impedance values must be non-negative")


def virtual_impedance(seq: SequenceSet, p: VirtualImpedanceParams,
                      omega_f: float) -> FrameVector:
    """Voltage drop synthesized from the decomposed output current.

    Resistive-inductive on the positive sequence (with the usual axis
    cross-coupling), plain resistive on the negative sequence and on each
    configured harmonic; all contributions sum per axis.
    """
    pos = seq.fundamental_pos
    neg = seq.fundamental_neg
    xl = omega_f * p.l_pos
    va = p.r_pos * pos.x - xl * pos.y + p.r_neg * neg.x
    vb = p.r_pos * pos.y + xl * pos.x + p.r_neg * neg.y
    for order, r in p.r_harmonic.items():
        h = seq.harmonic.get(order)
        if h is None:
            raise ConfigurationError(
                f"virtual impedance configured for order {order} "
                "but the sequence extractor does not provide it")
        va += r * h.x
        vb += r * h.y
    return FrameVector(va, vb, ALPHA_BETA)


def compose_reference(v_droop: FrameVector, v_vr: FrameVector,
                      v_c: FrameVector) -> FrameVector:
    """Inverter voltage reference: droop minus virtual drop plus central correction."""
    return FrameVector(v_droop.x - v_vr.x + v_c.x,
                       v_droop.y - v_vr.y + v_c.y, ALPHA_BETA)


# ---------------------------------------------------------------------------
# Cascaded PR loops
# ---------------------------------------------------------------------------

@dataclass
class PrGains:
    kp: float
    k_fundamental: float
    k_harmonic: float
    cutoff: float = 2.0          # rad/s resonant bandwidth
    orders: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        if 1 not in self.orders:
            raise ConfigurationError("PR loops need the fundamental resonator")

    def terms(self) -> list[ResonantTerm]:
        out = []
        for k in self.orders:
            gain = self.k_fundamental if k == 1 else self.k_harmonic
            out.append(ResonantTerm(k, gain, self.cutoff))
        return out


class VoltageLoop:
    """Per-axis PR regulation of the filter capacitor voltage."""

    def __init__(self, gains: PrGains, omega_nominal: float, dt: float,
                 i_limit: float):
        self._pr_a = ProportionalResonant(gains.kp, gains.terms(), omega_nominal, dt)
        self._pr_b = ProportionalResonant(gains.kp, gains.terms(), omega_nominal, dt)
        self.i_limit = i_limit
        self.clamped = False

    def step(self, v_ref: FrameVector, v_o: FrameVector, omega: float,
             dt: float) -> FrameVector:
        ia = self._pr_a.step(v_ref.x - v_o.x, omega, dt)
        ib = self._pr_b.step(v_ref.y - v_o.y, omega, dt)
        mag = math.hypot(ia, ib)
        self.clamped = mag > self.i_limit
        if self.clamped:
            scale = self.i_limit / mag
            ia *= scale
            ib *= scale
        return FrameVector(ia, ib, ALPHA_BETA)


class CurrentLoop:
    """Per-axis PR regulation of the filter inductor current.

    The controller output is normalized by half the DC-link voltage to form
    per-phase modulation commands; a collapsed link forces the commands to
    zero rather than dividing by a vanishing voltage.
    """

    V_DC_LOCKOUT = 50.0

    def __init__(self, gains: PrGains, omega_nominal: float, dt: float):
        self._pr_a = ProportionalResonant(gains.kp, gains.terms(), omega_nominal, dt)
        self._pr_b = ProportionalResonant(gains.kp, gains.terms(), omega_nominal, dt)
        self.locked_out = False

    def step(self, i_ref: FrameVector, i_l: FrameVector, v_dc: float,
             omega: float, dt: float) -> ThreePhaseSample:
        va = self._pr_a.step(i_ref.x - i_l.x, omega, dt)
        vb = self._pr_b.step(i_ref.y - i_l.y, omega, dt)
        self.locked_out = v_dc < self.V_DC_LOCKOUT
        if self.locked_out:
            return ThreePhaseSample(0.0, 0.0, 0.0)
        half = v_dc / 2.0
        return inverse_clarke(FrameVector(va / half, vb / half, ALPHA_BETA))


# ---------------------------------------------------------------------------
# Boost duty control: maximum-power tracking and link-voltage regulation
# ---------------------------------------------------------------------------

@dataclass
class MpptParams:
    period: float = 1e-3
    duty_step: float = 0.002
    deadband: float = 0.005     # relative conductance mismatch treated as converged
    duty_min: float = 0.02
    duty_max: float = 0.95


class IncrementalConductanceMppt:
    """Hill climbing on the PV curve via the incremental-conductance test."""

    def __init__(self, params: MpptParams, duty_init: float):
        self.params = params
        self.duty = min(max(duty_init, params.duty_min), params.duty_max)
        self._v_prev = None
        self._i_prev = None

    def step(self, v_pv: float, i_pv: float) -> float:
        p = self.params
        if self._v_prev is None:
            self._v_prev, self._i_prev = v_pv, i_pv
            return self.duty
        dv = v_pv - self._v_prev
        di = i_pv - self._i_prev
        self._v_prev, self._i_prev = v_pv, i_pv
        if i_pv < 1e-3 and v_pv > 1.0:
            # Dead zone past open circuit: no current, no usable gradient;
            # walk the terminal voltage back down until current flows.
            self.duty = min(self.duty + p.duty_step, p.duty_max)
            return self.duty
        if abs(dv) < 1e-9:
            # Voltage unchanged; use the current movement alone, no division.
            if di > 1e-9:
                self.duty -= p.duty_step
            elif di < -1e-9:
                self.duty += p.duty_step
        else:
            # dP/dV = i + v * di/dv; positive means below the peak voltage.
            mismatch = di / dv + i_pv / max(v_pv, 1e-6)
            if abs(mismatch) * v_pv >= p.deadband * max(i_pv, 1e-6):
                if mismatch > 0.0:
                    self.duty -= p.duty_step   # raise the PV voltage
                else:
                    self.duty += p.duty_step
        self.duty = min(max(self.duty, p.duty_min), p.duty_max)
        return self.duty


@dataclass
class VrParams:
    kp: float = 0.002
    ki: float = 0.05
    v_dc_ref: float = 600.0
    duty_min: float = 0.02
    duty_max: float = 0.95


class DcLinkRegulator:
    """PI regulation of the DC-link voltage through the boost duty cycle.

    Anti-windup freezes the integrator while the duty sits on a clamp.
    Regulation only has authority on the curtailment side of the array
    curve; the caller may pass a dynamic ceiling that keeps the duty from
    pushing the terminal voltage below the tracking point during a deficit,
    where more duty would shed power instead of recovering the link.
    """

    def __init__(self, params: VrParams):
        self.params = params
        self.integral = 0.0

    def reset(self, duty: float):
        self.integral = duty

    def step(self, v_dc: float, dt: float, duty_ceiling: float | None = None) -> float:
        p = self.params
        hi = p.duty_max if duty_ceiling is None else min(p.duty_max, duty_ceiling)
        e = p.v_dc_ref - v_dc
        candidate = self.integral + p.ki * e * dt
        duty = p.kp * e + candidate
        if p.duty_min <= duty <= hi:
            self.integral = candidate
        else:
            duty = min(max(duty, p.duty_min), hi)
        return duty


MODE_MPPT = "MPPT"
MODE_VR = "VR"


@dataclass
class ModeParams:
    enter_vr_margin: float = 5.0     # volts above the link reference
    exit_vr_margin: float = 10.0     # volts below the link reference
    exit_hold: float = 0.1           # seconds the exit condition must persist


class BoostController:
    """Mode machine owning the tracker and the link regulator.

    Tracking runs decimated at its own period; regulation runs every step.
    Transitions are hysteretic and are recorded with timestamps.  The
    machine boots in regulation mode: on startup the AC side is not loaded
    yet, so the link would immediately overvolt under tracking; regulation
    hands over to tracking through the normal exit hysteresis once demand
    exceeds the array maximum.
    """

    def __init__(self, mppt: MpptParams, vr: VrParams, mode: ModeParams,
                 duty_init: float):
        self.mppt = IncrementalConductanceMppt(mppt, duty_init)
        self.vr = DcLinkRegulator(vr)
        self.mode_params = mode
        self.vr_params = vr
        self.mode = MODE_VR
        self.vr.reset(duty_init)
        self.duty = duty_init
        self.transitions: list[tuple[float, str]] = []
        self._mppt_elapsed = 0.0
        self._below_since = None
        self._vr_vpv_floor = None   # taken from the terminal voltage at entry

    VPV_FLOOR_MARGIN = 25.0  # volts below the entry point regulation may push

    def step(self, v_pv: float, i_pv: float, v_dc: float, t: float,
             dt: float) -> float:
        ref = self.vr_params.v_dc_ref
        mp = self.mode_params
        if self.mode == MODE_MPPT:
            if v_dc > ref + mp.enter_vr_margin:
                self.mode = MODE_VR
                self.vr.reset(self.duty)
                self._vr_vpv_floor = max(v_pv - self.VPV_FLOOR_MARGIN, 50.0)
                self.transitions.append((t, f"{MODE_MPPT}->{MODE_VR}"))
        else:
            if v_dc < ref - mp.exit_vr_margin:
                if self._below_since is None:
                    self._below_since = t
                elif t - self._below_since >= mp.exit_hold:
                    self.mode = MODE_MPPT
                    self.mppt.duty = self.duty
                    self.mppt._v_prev = None
                    self.transitions.append((t, f"{MODE_VR}->{MODE_MPPT}"))
                    self._below_since = None
            else:
                self._below_since = None

        if self.mode == MODE_MPPT:
            self._mppt_elapsed += dt
            if self._mppt_elapsed + 1e-12 >= self.mppt.params.period:
                self._mppt_elapsed = 0.0
                self.duty = self.mppt.step(v_pv, i_pv)
        else:
            if self._vr_vpv_floor is None:
                self._vr_vpv_floor = max(v_pv - self.VPV_FLOOR_MARGIN, 50.0)
            ceiling = 1.0 - self._vr_vpv_floor / max(v_dc, 50.0)
            self.duty = self.vr.step(v_dc, dt, ceiling)
        return self.duty


# ---------------------------------------------------------------------------
# Whole per-unit controller
# ---------------------------------------------------------------------------

@dataclass
class DgControlParams:
    droop: DroopParams
    virtual_impedance: VirtualImpedanceParams
    pr_voltage: PrGains
    pr_current: PrGains
    mppt: MpptParams
    vr: VrParams
    mode: ModeParams
    rated_va: float
    power_filter_hz: float = 2.0
    vi_omega: float = 370.0
    current_limit_factor: float = 1.5
    startup_ramp: float = 0.25
    sequence_gain: float = math.sqrt(2.0)


class DgController:
    """Primary control stack of one generating unit."""

    def __init__(self, params: DgControlParams, dt: float, duty_init: float,
                 sequence_orders=None):
        self.params = params
        self.power = PowerCalculator(params.power_filter_hz, dt)
        self.droop = DroopControl(params.droop)
        if sequence_orders is None:
            self.extractor = SequenceExtractor(gain=params.sequence_gain)
        else:
            self.extractor = SequenceExtractor(sequence_orders, gain=params.sequence_gain)
        rated_current = params.rated_va / (1.5 * params.droop.v_amp)
        self.voltage_loop = VoltageLoop(
            params.pr_voltage, params.droop.omega, dt,
            params.current_limit_factor * rated_current)
        self.current_loop = CurrentLoop(params.pr_current, params.droop.omega, dt)
        self.boost = BoostController(params.mppt, params.vr, params.mode, duty_init)
        self.p_avg = 0.0
        self.q_avg = 0.0
        self.sequences = None
        self._elapsed = 0.0

    def step(self, meas: dict, v_c: FrameVector, t: float, dt: float
             ) -> tuple[float, ThreePhaseSample]:
        """Advance one control period; returns (boost duty, modulation)."""
        par = self.params
        v_o = FrameVector(*meas["v_o_ab"])
        i_o = FrameVector(*meas["i_o_ab"])
        i_l = FrameVector(*meas["i_l_ab"])

        self.p_avg, self.q_avg = self.power.step(v_o, i_o)
        v_droop = self.droop.step(self.p_avg, self.q_avg, dt)
        if self._elapsed < par.startup_ramp:
            ramp = self._elapsed / par.startup_ramp
            v_droop = FrameVector(v_droop.x * ramp, v_droop.y * ramp, ALPHA_BETA)
        self.sequences = self.extractor.step(i_o, self.droop.omega_ref, dt)
        v_vr = virtual_impedance(self.sequences, par.virtual_impedance, par.vi_omega)
        v_ref = compose_reference(v_droop, v_vr, v_c)
        i_ref = self.voltage_loop.step(v_ref, v_o, self.droop.omega_ref, dt)
        m = self.current_loop.step(i_ref, i_l, meas["v_dc"], self.droop.omega_ref, dt)
        duty = self.boost.step(meas["v_pv"], meas["i_pv"], meas["v_dc"], t, dt)
        self._elapsed += dt
        return duty, m
