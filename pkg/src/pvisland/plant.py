"""Averaged electrical model of the power stage.

One generating unit is a PV string feeding a boost converter, a DC link and
a two-level voltage-source inverter with an LC output filter; a resistive
feeder ties each unit to the common coupling bus where the loads hang.

Modeling choices, fixed for the whole simulator:

* No switching: the inverter bridge is an averaged controlled voltage
  source, ``v = m * v_dc / 2`` per phase, with per-phase clamping of the
  modulation command.
* Three-wire network, simulated directly on the two stationary axes, so no
  zero-sequence current can circulate anywhere.  The unbalanced load is a
  star bank with a floating neutral; its neutral potential is resolved
  inside the nodal equations.
* The whole linear AC network (filters, feeders, resistive loads) advances
  with one trapezoidal solve per step, which is unconditionally stable.  An
  explicit fourth-order Runge-Kutta alternative is available for
  convergence checks.  The DC side is nonlinear (PV curve, constant-power
  inverter draw) and advances with Heun's method, or RK4 when selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SimulationDivergence
from .signals import ThreePhaseSample, FrameVector, clarke, inverse_clarke

_CLARKE = np.array([
    [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0],
    [0.0, 1.0 / math.sqrt(3.0), -1.0 / math.sqrt(3.0)],
])
_INV_CLARKE = np.array([
    [1.0, 0.0],
    [-0.5, math.sqrt(3.0) / 2.0],
    [-0.5, -math.sqrt(3.0) / 2.0],
])


# ---------------------------------------------------------------------------
# PV array
# ---------------------------------------------------------------------------

@dataclass
class PvParams:
    """Single-diode-shaped PV source, calibrated to its datasheet corners.

    The diode voltage scale is solved at construction so the curve passes
    through (v_mp, i_mp); the curve then peaks at the rated power within a
    fraction of a percent.
    """

    rated_w: float
    v_oc: float
    i_sc: float
    v_mp: float
    i_mp: float

    _v_scale: float = field(init=False, repr=False)
    _i_dark: float = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.v_mp < self.v_oc):
            raise ConfigurationError("PV maximum-power voltage must lie inside (0, v_oc)")
        if not (0.0 < self.i_mp < self.i_sc):
            raise ConfigurationError("PV maximum-power current must lie inside (0, i_sc)")
        if self.v_mp * self.i_mp > self.rated_w * 1.001:
            raise ConfigurationError("PV maximum-power point exceeds the rated power")
        lo, hi = 1e-2, 1e4

        def residual(scale):
            # i(v_mp) - i_mp with the dark current pinned by i(v_oc) = 0
            x_mp = self.v_mp / scale
            x_oc = self.v_oc / scale
            if x_oc > 500.0:
                ratio = math.exp(x_mp - x_oc)  # large-argument limit of expm1 ratio
            else:
                ratio = math.expm1(x_mp) / math.expm1(x_oc)
            return self.i_sc - self.i_sc * ratio - self.i_mp

        if residual(lo) < 0.0 or residual(hi) > 0.0:
            raise ConfigurationError("PV datasheet corners do not describe a diode-like curve")
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if residual(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        self._v_scale = math.sqrt(lo * hi)
        self._i_dark = self.i_sc / math.expm1(self.v_oc / self._v_scale)


def pv_current(v_pv: float, irradiance: float, p: PvParams) -> float:
    """Terminal current of the PV string at a given voltage and irradiance."""
    if v_pv < 0.0:
        raise ConfigurationError("PV terminal voltage must be non-negative")
    i = irradiance * p.i_sc - p._i_dark * math.expm1(v_pv / p._v_scale)
    return i if i > 0.0 else 0.0


# ---------------------------------------------------------------------------
# DC side: boost converter and DC link
# ---------------------------------------------------------------------------

@dataclass
class DcLinkParams:
    c_pv: float = 200e-6
    l_boost: float = 1.5e-3
    c_dc: float = 2350e-6

    def __post_init__(self):
        if min(self.c_pv, self.l_boost, self.c_dc) <= 0.0:
            raise ConfigurationError("DC-side elements must be positive")


@dataclass
class DcSideState:
    v_pv: float
    i_boost: float
    v_dc: float


class DcSide:
    """Averaged boost converter between a PV string and the DC link.

    Lossless: the inverter appears as a power draw on the link capacitor.
    """

    def __init__(self, pv: PvParams, params: DcLinkParams, irradiance: float = 1.0):
        self.pv = pv
        self.params = params
        self.irradiance = irradiance

    def derivatives(self, st: DcSideState, duty: float, p_draw: float):
        if not 0.0 <= duty < 1.0:
            raise ConfigurationError(f"boost duty {duty} outside [0, 1)")
        p = self.params
        i_pv = pv_current(max(st.v_pv, 0.0), self.irradiance, self.pv)
        v_dc = max(st.v_dc, 1.0)
        dv_pv = (i_pv - st.i_boost) / p.c_pv
        di = (st.v_pv - (1.0 - duty) * st.v_dc) / p.l_boost
        dv_dc = ((1.0 - duty) * st.i_boost - p_draw / v_dc) / p.c_dc
        return dv_pv, di, dv_dc

    def step(self, st: DcSideState, duty: float, p_draw: float, dt: float,
             method: str = "trapezoid") -> DcSideState:
        if method == "rk4":
            k1 = self.derivatives(st, duty, p_draw)
            s2 = DcSideState(st.v_pv + 0.5 * dt * k1[0], st.i_boost + 0.5 * dt * k1[1],
                             st.v_dc + 0.5 * dt * k1[2])
            k2 = self.derivatives(s2, duty, p_draw)
            s3 = DcSideState(st.v_pv + 0.5 * dt * k2[0], st.i_boost + 0.5 * dt * k2[1],
                             st.v_dc + 0.5 * dt * k2[2])
            k3 = self.derivatives(s3, duty, p_draw)
            s4 = DcSideState(st.v_pv + dt * k3[0], st.i_boost + dt * k3[1],
                             st.v_dc + dt * k3[2])
            k4 = self.derivatives(s4, duty, p_draw)
            return DcSideState(
                st.v_pv + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                st.i_boost + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
                st.v_dc + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
            )
        # Heun: explicit trapezoid, adequate for the slow DC dynamics
        k1 = self.derivatives(st, duty, p_draw)
        pred = DcSideState(st.v_pv + dt * k1[0], st.i_boost + dt * k1[1],
                           st.v_dc + dt * k1[2])
        k2 = self.derivatives(pred, duty, p_draw)
        return DcSideState(
            max(st.v_pv + 0.5 * dt * (k1[0] + k2[0]), 0.0),
            st.i_boost + 0.5 * dt * (k1[1] + k2[1]),
            st.v_dc + 0.5 * dt * (k1[2] + k2[2]),
        )

    def stored_energy(self, st: DcSideState) -> float:
        p = self.params
        return (0.5 * p.c_pv * st.v_pv ** 2
                + 0.5 * p.l_boost * st.i_boost ** 2
                + 0.5 * p.c_dc * st.v_dc ** 2)

    def pv_power(self, st: DcSideState) -> float:
        return st.v_pv * pv_current(max(st.v_pv, 0.0), self.irradiance, self.pv)


# ---------------------------------------------------------------------------
# Inverter bridge
# ---------------------------------------------------------------------------

def inverter_output(m: ThreePhaseSample, v_dc: float) -> tuple[ThreePhaseSample, bool]:
    """Averaged bridge voltage per phase; commands beyond +-1 are clamped.

    Returns the phase voltages and a saturation flag.
    """
    saturated = False
    out = []
    for x in (m.a, m.b, m.c):
        if x > 1.0:
            x = 1.0
            saturated = True
        elif x < -1.0:
            x = -1.0
            saturated = True
        out.append(x * v_dc / 2.0)
    return ThreePhaseSample(*out), saturated


# ---------------------------------------------------------------------------
# Loads
# ---------------------------------------------------------------------------

@dataclass
class HarmonicInjection:
    """One current-source component locked to the system angle.

    ``order`` is signed: positive orders rotate with the fundamental
    (positive sequence), negative orders against it.
    """

    order: int
    amplitude: float
    phase: float = 0.0


@dataclass
class LoadSpec:
    balanced_r: float
    unbalanced_r_a: float | None = None
    harmonics: tuple[HarmonicInjection, ...] = ()
    step_time: float | None = None
    step_scale: float = 1.0
    balanced_l: float | None = None    # parallel inductive bank, henries per phase

    def __post_init__(self):
        if self.balanced_r <= 0.0:
            raise ConfigurationError("balanced load resistance must be positive")
        if self.unbalanced_r_a is not None and self.unbalanced_r_a <= 0.0:
            raise ConfigurationError("unbalanced load resistance must be positive")
        if self.balanced_l is not None and self.balanced_l <= 0.0:
            raise ConfigurationError("balanced load inductance must be positive")
        for h in self.harmonics:
            if h.order == 0:
                raise ConfigurationError("harmonic injection order must be nonzero")
            if h.amplitude < 0.0:
                raise ConfigurationError("harmonic injection amplitude must be non-negative")

    def conductances(self, scale: float = 1.0) -> tuple[float, float, float]:
        g = scale / self.balanced_r
        ga = g + (scale / self.unbalanced_r_a if self.unbalanced_r_a else 0.0)
        return ga, g, g


def load_admittance_ab(ga: float, gb: float, gc: float) -> np.ndarray:
    """Two-axis admittance of a floating-star resistive bank.

    Maps the zero-sum coupling-bus voltage to the zero-sum bank current;
    the floating neutral keeps any zero-sequence out of the network.
    """
    g = np.array([ga, gb, gc])
    total = g.sum()
    if total <= 0.0:
        raise ConfigurationError("coupling bus has no resistive load; node would float")
    y_abc = np.diag(g) - np.outer(g, g) / total
    return _CLARKE @ y_abc @ _INV_CLARKE


def harmonic_current_ab(harmonics, theta: float, scale: float = 1.0) -> tuple[float, float]:
    """Stationary-frame current injected by the nonlinear load at angle theta."""
    al = 0.0
    be = 0.0
    for h in harmonics:
        ang = abs(h.order) * theta + h.phase
        amp = scale * h.amplitude
        al += amp * math.cos(ang)
        be += amp * math.sin(ang) * (1.0 if h.order > 0 else -1.0)
    return al, be


def load_current(v_pcc: ThreePhaseSample, spec: LoadSpec, theta: float,
                 t: float) -> ThreePhaseSample:
    """Total load-bank current drawn from the coupling bus.

    Sum of the balanced star, the phase-a resistor (both sharing a floating
    neutral) and the angle-locked harmonic injections, with any load-step
    scaling applied after its event time.
    """
    scale = spec.step_scale if (spec.step_time is not None and t >= spec.step_time) else 1.0
    ga, gb, gc = spec.conductances(scale)
    total = ga + gb + gc
    v_n = (ga * v_pcc.a + gb * v_pcc.b + gc * v_pcc.c) / total
    ia = (v_pcc.a - v_n) * ga
    ib = (v_pcc.b - v_n) * gb
    ic = (v_pcc.c - v_n) * gc
    ih = inverse_clarke(FrameVector(*harmonic_current_ab(spec.harmonics, theta, scale)))
    return ThreePhaseSample(ia + ih.a, ib + ih.b, ic + ih.c)


def pcc_solve(feeder_total: ThreePhaseSample, conductances: tuple[float, float, float],
              i_harmonic: ThreePhaseSample) -> ThreePhaseSample:
    """Nodal solution of the coupling bus in the zero-sum voltage gauge."""
    ga, gb, gc = conductances
    if min(ga, gb, gc) <= 0.0:
        raise ConfigurationError("every phase needs load conductance; node would float")
    i_net = (feeder_total.a - i_harmonic.a,
             feeder_total.b - i_harmonic.b,
             feeder_total.c - i_harmonic.c)
    drops = (i_net[0] / ga, i_net[1] / gb, i_net[2] / gc)
    v_n = -(drops[0] + drops[1] + drops[2]) / 3.0
    return ThreePhaseSample(v_n + drops[0], v_n + drops[1], v_n + drops[2])


# ---------------------------------------------------------------------------
# AC network
# ---------------------------------------------------------------------------

@dataclass
class AcStageParams:
    l_filter: float = 1.8e-3
    c_filter: float = 25e-6
    feeder_r: float = 0.8
    feeder_l: float = 2.4e-3

    def __post_init__(self):
        if min(self.l_filter, self.c_filter, self.feeder_r, self.feeder_l) <= 0.0:
            raise ConfigurationError("AC stage elements must be positive")

    def resonance_hz(self) -> float:
        return 1.0 / (2.0 * math.pi * math.sqrt(self.l_filter * self.c_filter))


class AcNetwork:
    """All filter, feeder and resistive-load dynamics on the two axes.

    State per unit: filter inductor current, filter capacitor voltage and
    feeder current (alpha and beta each).  The coupling-bus voltage is an
    algebraic function of the feeder currents and the harmonic injection, so
    Kirchhoff's current law holds to rounding error at every step.
    """

    STATES_PER_DG = 6

    def __init__(self, stages: list[AcStageParams], load: LoadSpec, dt: float,
                 method: str = "trapezoid"):
        if not stages:
            raise ConfigurationError("network needs at least one generating unit")
        if method not in ("trapezoid", "rk4"):
            raise ConfigurationError(f"unknown integration method {method!r}")
        for st in stages:
            if dt > 1.0 / (20.0 * st.resonance_hz()):
                raise ConfigurationError(
                    f"step {dt} s too coarse for the {st.resonance_hz():.0f} Hz filter resonance"
                )
        self.stages = list(stages)
        self.load = load
        self.dt = dt
        self.method = method
        self.load_scale = 1.0
        self._build()
        self.x = np.zeros(self._n_states)

    # State slices -----------------------------------------------------
    def _base(self, d: int) -> int:
        return self.STATES_PER_DG * d

    def inverter_current(self, d: int) -> tuple[float, float]:
        b = self._base(d)
        return self.x[b], self.x[b + 1]

    def cap_voltage(self, d: int) -> tuple[float, float]:
        b = self._base(d)
        return self.x[b + 2], self.x[b + 3]

    def feeder_current(self, d: int) -> tuple[float, float]:
        b = self._base(d)
        return self.x[b + 4], self.x[b + 5]

    # Matrix assembly ---------------------------------------------------
    def _build(self):
        ndg = len(self.stages)
        has_l = self.load.balanced_l is not None
        n = self.STATES_PER_DG * ndg + (2 if has_l else 0)
        self._n_states = n
        y2 = load_admittance_ab(*self.load.conductances(self.load_scale))
        self._y2 = y2
        zp = np.linalg.inv(y2)
        self._zp = zp
        a = np.zeros((n, n))
        b = np.zeros((n, 2 * ndg + 2))  # inputs: v_inv per DG (2 axes), harmonic current
        # Bus-current columns: contributions of each state to the coupling-bus
        # nodal current (feeders in, inductive bank out).
        lb = self.STATES_PER_DG * ndg  # index of the inductive bank states
        for d, st in enumerate(self.stages):
            base = self._base(d)
            for ax in (0, 1):
                il = base + ax
                vo = base + 2 + ax
                fd = base + 4 + ax
                a[il, vo] = -1.0 / st.l_filter
                b[il, 2 * d + ax] = 1.0 / st.l_filter
                a[vo, il] = 1.0 / st.c_filter
                a[vo, fd] = -1.0 / st.c_filter
                a[fd, vo] = 1.0 / st.feeder_l
                a[fd, fd] -= st.feeder_r / st.feeder_l
                for d2 in range(ndg):
                    for ax2 in (0, 1):
                        a[fd, self._base(d2) + 4 + ax2] -= zp[ax, ax2] / st.feeder_l
                if has_l:
                    a[fd, lb + 0] += zp[ax, 0] / st.feeder_l
                    a[fd, lb + 1] += zp[ax, 1] / st.feeder_l
                b[fd, 2 * ndg + 0] = zp[ax, 0] / st.feeder_l
                b[fd, 2 * ndg + 1] = zp[ax, 1] / st.feeder_l
        if has_l:
            # Inductive bank: di/dt = v_bus / L, admittance scaled with load steps
            l_eff = self.load.balanced_l / self.load_scale
            for ax in (0, 1):
                for d2 in range(ndg):
                    for ax2 in (0, 1):
                        a[lb + ax, self._base(d2) + 4 + ax2] += zp[ax, ax2] / l_eff
                a[lb + ax, lb + 0] -= zp[ax, 0] / l_eff
                a[lb + ax, lb + 1] -= zp[ax, 1] / l_eff
                b[lb + ax, 2 * ndg + 0] = -zp[ax, 0] / l_eff
                b[lb + ax, 2 * ndg + 1] = -zp[ax, 1] / l_eff
        self._a = a
        self._b = b
        eye = np.eye(n)
        m = eye - 0.5 * self.dt * a
        self._t1 = np.linalg.solve(m, eye + 0.5 * self.dt * a)
        self._tu = np.linalg.solve(m, self.dt * b)

    def set_load_scale(self, scale: float):
        if scale <= 0.0:
            raise ConfigurationError("load scale must be positive")
        if scale != self.load_scale:
            self.load_scale = scale
            self._build()

    # Dynamics -----------------------------------------------------------
    def step(self, v_inv_ab: list[tuple[float, float]], ih_ab: tuple[float, float]):
        u = np.empty(2 * len(self.stages) + 2)
        for d, (va, vb) in enumerate(v_inv_ab):
            u[2 * d] = va
            u[2 * d + 1] = vb
        u[-2] = ih_ab[0]
        u[-1] = ih_ab[1]
        if self.method == "trapezoid":
            self.x = self._t1 @ self.x + self._tu @ u
        else:
            a, b = self._a, self._b
            x = self.x
            dt = self.dt
            bu = b @ u
            k1 = a @ x + bu
            k2 = a @ (x + 0.5 * dt * k1) + bu
            k3 = a @ (x + 0.5 * dt * k2) + bu
            k4 = a @ (x + dt * k3) + bu
            self.x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def bank_current(self) -> tuple[float, float]:
        if self.load.balanced_l is None:
            return 0.0, 0.0
        lb = self.STATES_PER_DG * len(self.stages)
        return self.x[lb], self.x[lb + 1]

    def pcc_voltage(self, ih_ab: tuple[float, float]) -> tuple[float, float]:
        sa = 0.0
        sb = 0.0
        for d in range(len(self.stages)):
            fa, fb = self.feeder_current(d)
            sa += fa
            sb += fb
        la, lbk = self.bank_current()
        zp = self._zp
        na = sa - ih_ab[0] - la
        nb = sb - ih_ab[1] - lbk
        return zp[0, 0] * na + zp[0, 1] * nb, zp[1, 0] * na + zp[1, 1] * nb

    def kcl_residual(self, ih_ab: tuple[float, float]) -> float:
        """Current imbalance at the coupling bus, in amperes."""
        va, vb = self.pcc_voltage(ih_ab)
        y2 = self._y2
        ir_a = y2[0, 0] * va + y2[0, 1] * vb
        ir_b = y2[1, 0] * va + y2[1, 1] * vb
        sa = sb = 0.0
        for d in range(len(self.stages)):
            fa, fb = self.feeder_current(d)
            sa += fa
            sb += fb
        la, lbk = self.bank_current()
        return math.hypot(sa - ih_ab[0] - la - ir_a, sb - ih_ab[1] - lbk - ir_b)

    def stored_energy(self) -> float:
        e = 0.0
        for d, st in enumerate(self.stages):
            ila, ilb = self.inverter_current(d)
            voa, vob = self.cap_voltage(d)
            fda, fdb = self.feeder_current(d)
            e += 0.5 * st.l_filter * (ila * ila + ilb * ilb)
            e += 0.5 * st.c_filter * (voa * voa + vob * vob)
            e += 0.5 * st.feeder_l * (fda * fda + fdb * fdb)
        if self.load.balanced_l is not None:
            la, lbk = self.bank_current()
            l_eff = self.load.balanced_l / self.load_scale
            e += 0.5 * l_eff * (la * la + lbk * lbk)
        return 1.5 * e  # two-axis quantities carry 3/2 of the per-phase energy

    def feeder_loss(self) -> float:
        p = 0.0
        for d, st in enumerate(self.stages):
            fda, fdb = self.feeder_current(d)
            p += st.feeder_r * (fda * fda + fdb * fdb)
        return 1.5 * p

    def load_power(self, ih_ab: tuple[float, float]) -> tuple[float, float]:
        """(resistive dissipation, power absorbed by the harmonic sources)."""
        va, vb = self.pcc_voltage(ih_ab)
        y2 = self._y2
        ir_a = y2[0, 0] * va + y2[0, 1] * vb
        ir_b = y2[1, 0] * va + y2[1, 1] * vb
        p_res = 1.5 * (va * ir_a + vb * ir_b)
        p_harm = 1.5 * (va * ih_ab[0] + vb * ih_ab[1])
        return p_res, p_harm


# ---------------------------------------------------------------------------
# Whole plant
# ---------------------------------------------------------------------------

@dataclass
class DgPlantParams:
    pv: PvParams
    dc: DcLinkParams
    ac: AcStageParams
    irradiance: float = 1.0


class Plant:
    """Composed power stage: per-unit DC sides plus the shared AC network.

    Advances in a fixed order each step: coupling-bus solve, AC network, DC
    sides.  The inverter bridges conserve power exactly: the AC-side output
    computed over the step is the draw applied to each DC link.
    """

    def __init__(self, dgs: list[DgPlantParams], load: LoadSpec, dt: float,
                 method: str = "trapezoid", v_dc_init: float = 600.0,
                 v_pv_init: float | None = None):
        self.dgs = list(dgs)
        self.dt = dt
        self.method = method
        self.network = AcNetwork([d.ac for d in dgs], load, dt, method)
        self.dc_sides = [DcSide(d.pv, d.dc, d.irradiance) for d in dgs]
        self.dc_states = [
            DcSideState(v_pv=d.pv.v_mp if v_pv_init is None else v_pv_init,
                        i_boost=0.0, v_dc=v_dc_init)
            for d in dgs
        ]
        self.load = load
        self.t = 0.0
        self.saturated = [False] * len(dgs)
        self.max_kcl_residual = 0.0
        # Energy audit accumulators (trapezoidal integration of powers)
        self.energy_in = 0.0
        self.energy_out = 0.0
        self._stored0 = self.stored_energy()
        self._p_in_prev = None
        self._p_out_prev = None

    def set_irradiance(self, d: int, irradiance: float):
        self.dc_sides[d].irradiance = irradiance

    def load_scale_at(self, t: float) -> float:
        ld = self.load
        if ld.step_time is not None and t >= ld.step_time:
            return ld.step_scale
        return 1.0

    def stored_energy(self) -> float:
        e = self.network.stored_energy()
        for side, st in zip(self.dc_sides, self.dc_states):
            e += side.stored_energy(st)
        return e

    def measurements(self, theta_load: float) -> dict:
        """Everything the controllers read, taken at the current instant."""
        scale = self.load_scale_at(self.t)
        ih = harmonic_current_ab(self.load.harmonics, theta_load, scale)
        v_pcc = self.network.pcc_voltage(ih)
        out = {
            "t": self.t,
            "v_pcc_ab": v_pcc,
            "ih_ab": ih,
            "dg": [],
        }
        for d in range(len(self.dgs)):
            out["dg"].append({
                "v_o_ab": self.network.cap_voltage(d),
                "i_l_ab": self.network.inverter_current(d),
                "i_o_ab": self.network.feeder_current(d),
                "v_dc": self.dc_states[d].v_dc,
                "v_pv": self.dc_states[d].v_pv,
                "i_pv": pv_current(max(self.dc_states[d].v_pv, 0.0),
                                   self.dc_sides[d].irradiance, self.dgs[d].pv),
            })
        return out

    def step(self, duties: list[float], modulations: list[ThreePhaseSample],
             theta_load: float):
        """One integration step with the given per-unit controls."""
        dt = self.dt
        scale = self.load_scale_at(self.t)
        self.network.set_load_scale(scale)
        ih = harmonic_current_ab(self.load.harmonics, theta_load, scale)

        v_inv_ab = []
        v_inv_abc = []
        for d, m in enumerate(modulations):
            v_abc, sat = inverter_output(m, self.dc_states[d].v_dc)
            self.saturated[d] = sat
            v = clarke(v_abc)
            v_inv_abc.append(v_abc)
            v_inv_ab.append((v.x, v.y))

        i_l_old = [self.network.inverter_current(d) for d in range(len(self.dgs))]

        # Audit bookkeeping and KCL check at the pre-step instant
        residual = self.network.kcl_residual(ih)
        if residual > self.max_kcl_residual:
            self.max_kcl_residual = residual
        p_res, p_harm = self.network.load_power(ih)
        p_feed = self.network.feeder_loss()
        p_in = sum(side.pv_power(st) for side, st in zip(self.dc_sides, self.dc_states))
        p_out = p_res + p_harm + p_feed
        if self._p_in_prev is not None:
            self.energy_in += 0.5 * dt * (p_in + self._p_in_prev)
            self.energy_out += 0.5 * dt * (p_out + self._p_out_prev)
        else:
            self.energy_in += dt * p_in
            self.energy_out += dt * p_out
        self._p_in_prev = p_in
        self._p_out_prev = p_out

        self.network.step(v_inv_ab, ih)

        for d in range(len(self.dgs)):
            ila1, ilb1 = self.network.inverter_current(d)
            ila = 0.5 * (ila1 + i_l_old[d][0])
            ilb = 0.5 * (ilb1 + i_l_old[d][1])
            va, vb = v_inv_ab[d]
            p_draw = 1.5 * (va * ila + vb * ilb)
            self.dc_states[d] = self.dc_sides[d].step(
                self.dc_states[d], duties[d], p_draw, dt, self.method)

        self.t += dt
        self._check_bounds()

    def energy_audit_error(self) -> float:
        """Relative conservation error accumulated since construction."""
        delta = self.stored_energy() - self._stored0
        denom = max(abs(self.energy_in), abs(self.energy_out), 1.0)
        return abs(self.energy_in - delta - self.energy_out) / denom

    def _check_bounds(self):
        x = self.network.x
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e5:
            raise SimulationDivergence(
                f"AC state left the plausible envelope at t={self.t:.6f} s",
                t_last_good=self.t - self.dt)
        for st in self.dc_states:
            if (not math.isfinite(st.v_dc) or not math.isfinite(st.v_pv)
                    or not math.isfinite(st.i_boost)
                    or abs(st.v_dc) > 5e3 or abs(st.i_boost) > 1e4):
                raise SimulationDivergence(
                    f"DC state left the plausible envelope at t={self.t:.6f} s",
                    t_last_good=self.t - self.dt)
