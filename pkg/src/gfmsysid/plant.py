"""Grid-forming converter connected to an infinite bus through an LCL filter.

All quantities are per unit except time (s), angles (rad) and the base and
filter frequencies (rad/s).  The state vector has 15 entries in the order of
:data:`STATE_NAMES`; the first nine are the measured states that make up a
:class:`~gfmsysid.simulator.Dataset`.

The point of common coupling (PCC) is not a state.  Current continuity with
the static line gives ``v_grid = v2 + (R + jX) i_filt``, which turns the
network into an explicit ODE.  The nodal active-power balance is still
available through :func:`power_balance_residual` as an equilibrium check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

HALF_PI = 0.5 * math.pi

STATE_NAMES: tuple[str, ...] = (
    "i_cv_r", "i_cv_i",
    "v_filt_r", "v_filt_i",
    "i_filt_r", "i_filt_i",
    "theta_oc", "p_m", "q_m",
    "xi_d", "xi_q",
    "gamma_d", "gamma_q",
    "phi_d", "phi_q",
)
MEASURED_NAMES: tuple[str, ...] = STATE_NAMES[:9]
INPUT_NAMES: tuple[str, ...] = ("p_ref", "q_ref", "v_ref")
N_STATES = len(STATE_NAMES)
N_MEASURED = len(MEASURED_NAMES)


class NumericalBlowUp(ArithmeticError):
    """Raised when the plant state or its derivative stops being finite."""


@dataclass(frozen=True)
class Phasor:
    re: float
    im: float

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError(f"non-finite phasor ({self.re}, {self.im})")

    @classmethod
    def polar(cls, magnitude: float, angle: float) -> "Phasor":
        return cls(magnitude * math.cos(angle), magnitude * math.sin(angle))

    def magnitude(self) -> float:
        return math.hypot(self.re, self.im)

    def angle(self) -> float:
        # atan2 returns [-pi, pi]; fold -pi onto pi
        a = math.atan2(self.im, self.re)
        return math.pi if a == -math.pi else a

    def __complex__(self) -> complex:
        return complex(self.re, self.im)


@dataclass(frozen=True)
class NetworkParams:
    """Line, LCL filter and infinite-bus parameters.

    Filter values and the line reactance are those of the reference
    experiment; the line is lossless.
    """

    R: float = 0.0
    X: float = 0.0020625
    r_g: float = 0.003
    l_g: float = 0.002
    r_f: float = 0.016
    l_f: float = 0.009
    c_f: float = 2.5
    v2_mag: float = 1.0
    theta2: float = 0.0
    omega_b: float = 2.0 * math.pi * 60.0
    omega_s: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"network parameter {f.name} is not finite")
        for name in ("l_f", "l_g", "c_f", "omega_b"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"network parameter {name} must be > 0")
        for name in ("R", "r_f", "r_g"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"network parameter {name} must be >= 0")
        if self.R == 0.0 and self.X == 0.0:
            raise ValueError("line impedance R + jX must be nonzero")

    @property
    def v2(self) -> Phasor:
        return Phasor.polar(self.v2_mag, self.theta2)

    @property
    def line_admittance(self) -> complex:
        """``G11 + jB11 = 1 / (R + jX)``."""
        return 1.0 / complex(self.R, self.X)

    @property
    def filter_admittance(self) -> complex:
        """``Gff + jBff = 1 / (r_g + j omega_s l_g)``."""
        return 1.0 / complex(self.r_g, self.omega_s * self.l_g)

    def admittances(self) -> dict[str, float]:
        y1 = self.line_admittance
        yf = self.filter_admittance
        return {
            "G11": y1.real, "B11": y1.imag, "G12": -y1.real, "B12": -y1.imag,
            "Gff": yf.real, "Bff": yf.imag, "G1f": -yf.real, "B1f": -yf.imag,
        }


@dataclass(frozen=True)
class ControlParams:
    """Droop outer loop and cascaded voltage/current inner loops."""

    omega_ref: float = 1.0
    k_p: float = 0.02
    k_q: float = 0.05
    omega_z: float = 2.0 * math.pi * 10.0
    omega_f: float = 2.0 * math.pi * 10.0
    k_p_v: float = 0.2
    k_i_v: float = 50.0
    k_ffi: float = 1.0
    k_p_c: float = 0.74
    k_i_c: float = 100.0
    k_ffv: float = 1.0
    k_ad: float = 0.2
    omega_ad: float = 50.0
    r_v: float = 0.0
    l_v: float = 0.2
    v_ref_nominal: float = 1.0
    p_ref_nominal: float = 0.5
    q_ref_nominal: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"control parameter {f.name} is not finite")
        for name in ("omega_z", "omega_f", "omega_ad", "k_i_v", "k_i_c"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"control parameter {name} must be > 0")

    def nominal_input(self) -> "ReferenceInput":
        return ReferenceInput(self.p_ref_nominal, self.q_ref_nominal, self.v_ref_nominal)


@dataclass(frozen=True)
class PlantParams:
    net: NetworkParams = field(default_factory=NetworkParams)
    ctl: ControlParams = field(default_factory=ControlParams)

    def to_dict(self) -> dict:
        return {"network": asdict(self.net), "control": asdict(self.ctl)}

    @property
    def constants(self) -> tuple[float, ...]:
        # flat tuple consumed by the float-level derivative; cached per instance
        try:
            return self.__dict__["_constants"]
        except KeyError:
            pass
        n, c = self.net, self.ctl
        v2 = n.v2
        consts = (
            n.R, n.X, n.r_g, n.l_g, n.r_f, n.l_f, n.c_f, v2.re, v2.im,
            n.omega_b, n.omega_s,
            c.omega_ref, c.k_p, c.k_q, c.omega_z, c.omega_f,
            c.k_p_v, c.k_i_v, c.k_ffi, c.k_p_c, c.k_i_c, c.k_ffv,
            c.k_ad, c.omega_ad, c.r_v, c.l_v,
        )
        object.__setattr__(self, "_constants", consts)
        return consts


@dataclass(frozen=True)
class ReferenceInput:
    p_ref: float
    q_ref: float
    v_ref: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or abs(v) > 2.0:
                raise ValueError(f"reference {f.name}={v} outside [-2, 2] p.u.")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_ref, self.q_ref, self.v_ref)


@dataclass(frozen=True)
class PlantState:
    i_cv_r: float = 0.0
    i_cv_i: float = 0.0
    v_filt_r: float = 0.0
    v_filt_i: float = 0.0
    i_filt_r: float = 0.0
    i_filt_i: float = 0.0
    theta_oc: float = 0.0
    p_m: float = 0.0
    q_m: float = 0.0
    xi_d: float = 0.0
    xi_q: float = 0.0
    gamma_d: float = 0.0
    gamma_q: float = 0.0
    phi_d: float = 0.0
    phi_q: float = 0.0

    def __post_init__(self):
        for name in STATE_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise NumericalBlowUp(f"state {name} is not finite")

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "PlantState":
        if len(x) != N_STATES:
            raise ValueError(f"expected {N_STATES} state entries, got {len(x)}")
        return cls(*(float(v) for v in x))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES])

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in STATE_NAMES)


class DqMeasurements(NamedTuple):
    v_d: float
    v_q: float
    i_d: float
    i_q: float
    i_cv_d: float
    i_cv_q: float


def pcc_voltage(i_filt: Phasor, net: NetworkParams) -> Phasor:
    """PCC voltage from current continuity through the line: v2 + (R + jX) i."""
    v2 = net.v2
    return Phasor(
        v2.re + net.R * i_filt.re - net.X * i_filt.im,
        v2.im + net.R * i_filt.im + net.X * i_filt.re,
    )


def park(theta_oc: float, r_component: float, i_component: float) -> tuple[float, float]:
    """Rotate a rectangular (r, i) pair into the control dq frame."""
    s = math.sin(theta_oc + HALF_PI)
    c = math.cos(theta_oc + HALF_PI)
    return s * r_component - c * i_component, c * r_component + s * i_component


def inverse_park(theta_oc: float, d: float, q: float) -> tuple[float, float]:
    s = math.sin(theta_oc + HALF_PI)
    c = math.cos(theta_oc + HALF_PI)
    return s * d + c * q, -c * d + s * q


def _outer(p_m, q_m, p_ref, q_ref, v_ref, omega_ref, k_p, k_q):
    return omega_ref + k_p * (p_ref - p_m), v_ref + k_q * (q_ref - q_m)


def outer_signals(state: PlantState, u: ReferenceInput, ctl: ControlParams) -> tuple[float, float]:
    """Droop laws: returns ``(omega_oc, v_oc)``."""
    return _outer(state.p_m, state.q_m, u.p_ref, u.q_ref, u.v_ref, ctl.omega_ref, ctl.k_p, ctl.k_q)


def _inner(omega_oc, v_oc, m, xi_d, xi_q, gamma_d, gamma_q, phi_d, phi_q,
           c_f, l_f, k_p_v, k_i_v, k_ffi, k_p_c, k_i_c, k_ffv, k_ad, r_v, l_v):
    v_d, v_q, i_d, i_q, icv_d, icv_q = m
    vd_vi = v_oc - r_v * i_d + omega_oc * l_v * i_q
    vq_vi = -r_v * i_q - omega_oc * l_v * i_d
    id_ref = k_p_v * (vd_vi - v_d) + k_i_v * xi_d - c_f * omega_oc * v_q + k_ffi * i_d
    iq_ref = k_p_v * (vq_vi - v_q) + k_i_v * xi_q + c_f * omega_oc * v_d + k_ffi * i_q
    vd_ref = (k_p_c * (id_ref - icv_d) - omega_oc * l_f * icv_q + k_i_c * gamma_d
              + k_ffv * v_d - k_ad * (v_d - phi_d))
    vq_ref = (k_p_c * (iq_ref - icv_q) + omega_oc * l_f * icv_d + k_i_c * gamma_q
              + k_ffv * v_q - k_ad * (v_q - phi_q))
    return vd_vi, vq_vi, id_ref, iq_ref, vd_ref, vq_ref


def dq_measurements(state: PlantState) -> DqMeasurements:
    th = state.theta_oc
    return DqMeasurements(
        *park(th, state.v_filt_r, state.v_filt_i),
        *park(th, state.i_filt_r, state.i_filt_i),
        *park(th, state.i_cv_r, state.i_cv_i),
    )


def inner_loop(state: PlantState, omega_oc: float, v_oc: float, dq: DqMeasurements,
               ctl: ControlParams, net: NetworkParams) -> dict[str, float]:
    """All intermediate signals of the inner cascade, keyed by name."""
    out = _inner(omega_oc, v_oc, dq, state.xi_d, state.xi_q, state.gamma_d, state.gamma_q,
                 state.phi_d, state.phi_q, net.c_f, net.l_f, ctl.k_p_v, ctl.k_i_v, ctl.k_ffi,
                 ctl.k_p_c, ctl.k_i_c, ctl.k_ffv, ctl.k_ad, ctl.r_v, ctl.l_v)
    keys = ("v_d_vi_ref", "v_q_vi_ref", "i_d_cv_ref", "i_q_cv_ref", "v_d_cv_ref", "v_q_cv_ref")
    return dict(zip(keys, out))


def inner_references(state: PlantState, omega_oc: float, v_oc: float, dq: DqMeasurements,
                     ctl: ControlParams, net: NetworkParams) -> tuple[float, float]:
    """Converter voltage references ``(v_d_cv_ref, v_q_cv_ref)``.

    Virtual impedance shapes the voltage reference, a PI voltage loop with
    capacitor and current feed-forward produces the current reference, and a
    PI current loop with decoupling, voltage feed-forward and active damping
    produces the converter voltage reference.
    """
    sig = inner_loop(state, omega_oc, v_oc, dq, ctl, net)
    return sig["v_d_cv_ref"], sig["v_q_cv_ref"]


def filter_derivative(i_cv: Phasor, v_filt: Phasor, i_filt: Phasor, v_cv: Phasor,
                      v_grid: Phasor, net: NetworkParams) -> tuple[float, ...]:
    """LCL filter equations for given terminal voltages (six derivatives)."""
    wb, ws = net.omega_b, net.omega_s
    return (
        wb / net.l_f * (v_cv.re - v_filt.re - net.r_f * i_cv.re + ws * net.l_f * i_cv.im),
        wb / net.l_f * (v_cv.im - v_filt.im - net.r_f * i_cv.im - ws * net.l_f * i_cv.re),
        wb / net.c_f * (i_cv.re - i_filt.re + ws * net.c_f * v_filt.im),
        wb / net.c_f * (i_cv.im - i_filt.im - ws * net.c_f * v_filt.re),
        wb / net.l_g * (v_filt.re - v_grid.re - net.r_g * i_filt.re + ws * net.l_g * i_filt.im),
        wb / net.l_g * (v_filt.im - v_grid.im - net.r_g * i_filt.im - ws * net.l_g * i_filt.re),
    )


def derivative(x: Sequence[float], u: Sequence[float], k: Sequence[float]) -> list[float]:
    """Float-level right-hand side.

    ``x`` holds the 15 states, ``u`` the three references and ``k`` is
    :attr:`PlantParams.constants`.  This is the path used by the integrator.
    """
    (icr, ici, vr, vi, ir, ii, th, pm, qm, xd, xq, gd, gq, fd, fq) = x
    p_ref, q_ref, v_ref = u
    (R, X, r_g, l_g, r_f, l_f, c_f, v2r, v2i, wb, ws,
     w_ref, k_p, k_q, w_z, w_f, kpv, kiv, kffi, kpc, kic, kffv, kad, w_ad, r_v, l_v) = k

    s = math.sin(th + HALF_PI)
    c = math.cos(th + HALF_PI)
    m = (s * vr - c * vi, c * vr + s * vi,
         s * ir - c * ii, c * ir + s * ii,
         s * icr - c * ici, c * icr + s * ici)
    w_oc, v_oc = _outer(pm, qm, p_ref, q_ref, v_ref, w_ref, k_p, k_q)
    vd_vi, vq_vi, id_ref, iq_ref, vd_ref, vq_ref = _inner(
        w_oc, v_oc, m, xd, xq, gd, gq, fd, fq,
        c_f, l_f, kpv, kiv, kffi, kpc, kic, kffv, kad, r_v, l_v)
    vcr = s * vd_ref + c * vq_ref
    vci = -c * vd_ref + s * vq_ref
    vgr = v2r + R * ir - X * ii
    vgi = v2i + R * ii + X * ir

    out = [
        wb / l_f * (vcr - vr - r_f * icr + ws * l_f * ici),
        wb / l_f * (vci - vi - r_f * ici - ws * l_f * icr),
        wb / c_f * (icr - ir + ws * c_f * vi),
        wb / c_f * (ici - ii - ws * c_f * vr),
        wb / l_g * (vr - vgr - r_g * ir + ws * l_g * ii),
        wb / l_g * (vi - vgi - r_g * ii - ws * l_g * ir),
        wb * (w_oc - ws),
        w_z * (vr * ir + vi * ii - pm),
        w_f * (-vr * ii + vi * ir - qm),
        vd_vi - m[0],
        vq_vi - m[1],
        id_ref - m[4],
        iq_ref - m[5],
        w_ad * (m[0] - fd),
        w_ad * (m[1] - fq),
    ]
    return out


def rhs(state: PlantState, u: ReferenceInput, ctl: ControlParams, net: NetworkParams) -> PlantState:
    """Time derivative of every state, returned as a :class:`PlantState`."""
    params = PlantParams(net, ctl)
    d = derivative(state.as_tuple(), u.as_tuple(), params.constants)
    if not all(math.isfinite(v) for v in d):
        raise NumericalBlowUp("non-finite derivative")
    return PlantState(*d)


def rhs_array(x: np.ndarray, u: Sequence[float], params: PlantParams) -> np.ndarray:
    return np.array(derivative(x, u, params.constants))


def power_balance_residual(v_grid: Phasor, v_filt: Phasor, net: NetworkParams) -> float:
    """Active-power balance at the PCC in admittance form.

    Zero when the line current equals the grid-side filter branch current in
    the quasi-static sense; only meaningful at equilibria.
    """
    y = net.admittances()
    vg, tg = v_grid.magnitude(), v_grid.angle()
    vf, tf = v_filt.magnitude(), v_filt.angle()
    v2, t2 = net.v2_mag, net.theta2
    return (vg * vg * y["G11"]
            + vg * v2 * y["G12"] * math.cos(tg - t2)
            + vg * v2 * y["B12"] * math.sin(tg - t2)
            + vg * vg * y["Gff"]
            + vg * vf * y["G1f"] * math.cos(tg - tf)
            + vg * vf * y["B1f"] * math.sin(tg - tf))


def filter_energy(state: PlantState, net: NetworkParams) -> float:
    return 0.5 * (net.l_f * (state.i_cv_r ** 2 + state.i_cv_i ** 2)
                  + net.c_f * (state.v_filt_r ** 2 + state.v_filt_i ** 2)
                  + net.l_g * (state.i_filt_r ** 2 + state.i_filt_i ** 2))


def measured_equations(params: PlantParams) -> dict[str, dict[tuple[int, ...], float]]:
    """Exact polynomial form of the seven measured derivatives that close over
    measured states and references.

    Keys are derivative names (``d_<state>``); values map exponent vectors
    over ``MEASURED_NAMES + INPUT_NAMES`` to coefficients.  The two converter
    current derivatives depend on unmeasured controller states and are absent.
    """
    n, c = params.net, params.ctl
    wb, ws = n.omega_b, n.omega_s
    v2 = n.v2
    nv = N_MEASURED + len(INPUT_NAMES)

    def mono(*idx: int) -> tuple[int, ...]:
        e = [0] * nv
        for i in idx:
            e[i] += 1
        return tuple(e)

    icr, ici, vr, vi, ir, ii, th, pm, qm, pref = range(10)
    eqs: dict[str, dict[tuple[int, ...], float]] = {
        "d_v_filt_r": {mono(icr): wb / n.c_f, mono(ir): -wb / n.c_f, mono(vi): wb * ws},
        "d_v_filt_i": {mono(ici): wb / n.c_f, mono(ii): -wb / n.c_f, mono(vr): -wb * ws},
        "d_i_filt_r": {
            mono(): -wb / n.l_g * v2.re,
            mono(vr): wb / n.l_g,
            mono(ir): -wb / n.l_g * (n.r_g + n.R),
            mono(ii): wb / n.l_g * n.X + wb * ws,
        },
        "d_i_filt_i": {
            mono(): -wb / n.l_g * v2.im,
            mono(vi): wb / n.l_g,
            mono(ii): -wb / n.l_g * (n.r_g + n.R),
            mono(ir): -wb / n.l_g * n.X - wb * ws,
        },
        "d_theta_oc": {
            mono(): wb * (c.omega_ref - ws),
            mono(pref): wb * c.k_p,
            mono(pm): -wb * c.k_p,
        },
        "d_p_m": {mono(vr, ir): c.omega_z, mono(vi, ii): c.omega_z, mono(pm): -c.omega_z},
        "d_q_m": {mono(vr, ii): -c.omega_f, mono(vi, ir): c.omega_f, mono(qm): -c.omega_f},
    }
    return {k: {e: v for e, v in d.items() if v != 0.0} for k, d in eqs.items()}
