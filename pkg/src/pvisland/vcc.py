"""Central voltage-quality compensation.

A single controller watches the coupling-bus voltage, measures the
unbalance factor and the per-order harmonic distortion from rotating-frame
extractions, and broadcasts correction phasors to every generating unit,
scaled by rated power.  Corrections only ever push a quality index down
toward its reference: a component whose index is already at or below the
reference contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError
from .signals import (
    DQ,
    FrameVector,
    LowPass2,
    ThreePhaseSample,
    clarke,
    inverse_park,
    park,
)

DEFAULT_COMPONENTS = (1, -1, 3, -5, 7, -11)


class DqExtractionBank:
    """Rotating-frame extraction of selected voltage components.

    Each component is observed in a frame spinning at its own signed
    multiple of the tracked angle; slow second-order filters on both axes
    leave the component's phasor as a near-DC pair.
    """

    def __init__(self, dt: float, components=DEFAULT_COMPONENTS,
                 cutoff_hz: float = 5.0, damping: float = 2.5):
        if 1 not in components:
            raise ConfigurationError("extraction bank needs the fundamental positive sequence")
        self.components = tuple(components)
        self._filters = {
            c: (LowPass2(cutoff_hz, damping, dt), LowPass2(cutoff_hz, damping, dt))
            for c in self.components
        }

    def step(self, v_pcc: ThreePhaseSample, theta: float, dt: float
             ) -> dict[int, FrameVector]:
        v_ab = clarke(v_pcc)
        out = {}
        for c, (fd, fq) in self._filters.items():
            raw = park(v_ab, c * theta)
            out[c] = FrameVector(fd.step(raw.x), fq.step(raw.y), DQ, c * theta)
        return out


def vuf(neg_mag: float, pos_mag: float, floor: float = 1.0) -> tuple[float, bool]:
    """Unbalance factor in percent; flags an unusable positive sequence."""
    if pos_mag < floor:
        return 0.0, False
    return 100.0 * neg_mag / pos_mag, True


def hd(h_mag: float, pos_mag: float, floor: float = 1.0) -> tuple[float, bool]:
    """Single-order harmonic distortion in percent; same guard as :func:`vuf`."""
    if pos_mag < floor:
        return 0.0, False
    return 100.0 * h_mag / pos_mag, True


@dataclass
class PiGains:
    kp: float
    ki: float


@dataclass
class VccParams:
    vuf_ref: float = 0.2                       # percent
    hd_ref: dict[int, float] = field(default_factory=lambda: {3: 0.2, -5: 0.2, 7: 0.2, -11: 0.2})
    gains: dict[int, PiGains] = field(default_factory=lambda: {
        -1: PiGains(0.5, 20.0),
        3: PiGains(0.5, 15.0),
        -5: PiGains(5.0, 30.0),
        7: PiGains(5.0, 25.0),
        -11: PiGains(0.5, 5.0),
    })
    rated_powers: tuple[float, ...] = (3000.0, 6000.0)
    output_limit: float = 80.0                 # volts per axis at each unit
    effort_limit: float = 250.0                # bound on each PI output
    pos_seq_floor: float = 1.0                 # volts of positive sequence for valid indices

    def __post_init__(self):
        if self.vuf_ref < 0.0 or any(r < 0.0 for r in self.hd_ref.values()):
            raise ConfigurationError("quality references must be non-negative")
        if not self.rated_powers or any(p <= 0.0 for p in self.rated_powers):
            raise ConfigurationError("rated powers must be positive")


class CentralCompensator:
    """Quality-index PI loops and the power-ratio broadcast of corrections.

    The per-component correction phasors are held in their rotating frames
    between controller ticks; consumers rebuild the stationary-frame vector
    at any angle via :meth:`correction_for`, so fast-rotating components do
    not get staircased by the slower tick rate.
    """

    def __init__(self, params: VccParams):
        self.params = params
        total = sum(params.rated_powers)
        self.shares = tuple(p / total for p in params.rated_powers)
        self.components = (-1,) + tuple(sorted(params.hd_ref))
        for c in self.components:
            if c not in params.gains:
                raise ConfigurationError(f"no PI gains configured for component {c}")
        self._integral = {c: 0.0 for c in self.components}
        self._effort_dq = {c: (0.0, 0.0) for c in self.components}
        self.vuf = 0.0
        self.hd = {c: 0.0 for c in self.components if c != -1}
        self.indices_valid = False
        self.clamped = False

    def reset_outputs(self):
        for c in self.components:
            self._integral[c] = 0.0
            self._effort_dq[c] = (0.0, 0.0)

    def step(self, extracted: dict[int, FrameVector], dt: float
             ) -> list[FrameVector]:
        """One controller tick from freshly extracted components.

        Returns the per-unit stationary-frame corrections at the extraction
        angle (the rotating-frame phasors are retained for reconstruction).
        """
        par = self.params
        pos = extracted[1]
        pos_mag = pos.magnitude()
        self.vuf, valid = vuf(extracted[-1].magnitude(), pos_mag, par.pos_seq_floor)
        self.indices_valid = valid
        if valid:
            for c in self.components:
                if c == -1:
                    idx, ref = self.vuf, par.vuf_ref
                else:
                    idx, _ = hd(extracted[c].magnitude(), pos_mag, par.pos_seq_floor)
                    self.hd[c] = idx
                    ref = par.hd_ref[c]
                err = ref - idx
                g = par.gains[c]
                if err >= 0.0:
                    # Index at or better than its reference: never inject to
                    # raise it.  With no accumulated effort the contribution
                    # is exactly zero; once the loop has converged onto the
                    # reference the standing effort is held instead, since
                    # chopping it at the controller rate would spray
                    # sidebands into the network.
                    if self._integral[c] == 0.0:
                        self._effort_dq[c] = (0.0, 0.0)
                    continue
                self._integral[c] = max(self._integral[c] + g.ki * err * dt,
                                        -par.effort_limit)
                u = max(g.kp * err + self._integral[c], -par.effort_limit)
                comp = extracted[c]
                self._effort_dq[c] = (u * comp.x, u * comp.y)
        theta = extracted[1].theta  # extraction ran at this fundamental angle
        return [self.correction_for(i, theta) for i in range(len(self.shares))]

    def correction_for(self, unit: int, theta: float) -> FrameVector:
        """Stationary-frame correction for one unit at fundamental angle theta."""
        return self.correction_from(self._effort_dq, unit, theta)

    def correction_from(self, efforts: dict[int, tuple[float, float]], unit: int,
                        theta: float) -> FrameVector:
        """As :meth:`correction_for` but from a snapshot of effort phasors."""
        share = self.shares[unit]
        a = 0.0
        b = 0.0
        for c, (d, q) in efforts.items():
            if d == 0.0 and q == 0.0:
                continue
            v = inverse_park(FrameVector(d, q, DQ), c * theta)
            a += v.x
            b += v.y
        a *= share
        b *= share
        lim = self.params.output_limit
        clamped = False
        if a > lim:
            a, clamped = lim, True
        elif a < -lim:
            a, clamped = -lim, True
        if b > lim:
            b, clamped = lim, True
        elif b < -lim:
            b, clamped = -lim, True
        if clamped:
            self.clamped = True  # sticky until the caller clears it
        return FrameVector(a, b)
