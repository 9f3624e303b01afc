"""Flux-tunable transmon physics: spectrum, flux derivatives, harmonic
decomposition of the modulated frequency, effective sideband coupling, and
the modulation-induced frequency shift.

All frequencies and rates in this module are angular (rad/s), fluxes are in
units of the flux quantum, and times are in seconds.  The config layer is
the only place that uses ordinary Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy.special import j1 as bessel_j1

from .errors import DegenerateInputError, FluxDomainError

TWOPI = 2.0 * math.pi


@dataclass(frozen=True)
class DeviceParams:
    """Static physical constants of one qubit + emission-resonator node.

    Defaults are the measured sample constants used throughout the test
    suite.  ``flux_scale`` is the ratio of effective SQUID flux to nominal
    pulse amplitude; the tunable-coupling axis of a real device is known
    only up to this conversion, so it is exposed as a fit parameter.
    """

    omega_q_max: float = TWOPI * 5.997e9
    E_C: float = TWOPI * 228e6
    g_qE: float = TWOPI * 299.4e6
    omega_E: float = TWOPI * 7.139e9
    kappa_E_c: float = TWOPI * 5.2e6
    kappa_E_i: float = TWOPI * 0.27e6
    T1_ge: float = 5.539e-6
    T1_ef: float = 2.829e-6
    T2s_ge: float = 2.234e-6
    T2s_ef: float = 1.068e-6
    phi_dc: float = 0.04
    flux_scale: float = 1.0

    def __post_init__(self):
        positive = {
            "omega_q_max": self.omega_q_max,
            "E_C": self.E_C,
            "g_qE": self.g_qE,
            "omega_E": self.omega_E,
            "kappa_E_c": self.kappa_E_c,
            "kappa_E_i": self.kappa_E_i,
            "T1_ge": self.T1_ge,
            "T1_ef": self.T1_ef,
            "T2s_ge": self.T2s_ge,
            "T2s_ef": self.T2s_ef,
            "flux_scale": self.flux_scale,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"DeviceParams.{name} must be > 0, got {value}")
        if abs(self.phi_dc) >= 0.5:
            raise FluxDomainError(f"|phi_dc| must be < 0.5, got {self.phi_dc}")
        if abs(self.phi_dc * self.flux_scale) >= 0.5:
            raise FluxDomainError("effective DC flux |phi_dc * flux_scale| must be < 0.5")
        if self.gamma_phi_ge < 0 or self.gamma_phi_ef < 0:
            raise ValueError(
                "pure-dephasing rate 1/T2* - 1/(2 T1) must be >= 0 for both manifolds"
            )

    @property
    def gamma_phi_ge(self) -> float:
        """Pure dephasing rate of the g-e manifold (rad/s)."""
        return 1.0 / self.T2s_ge - 0.5 / self.T1_ge

    @property
    def gamma_phi_ef(self) -> float:
        """Pure dephasing rate of the e-f manifold (rad/s)."""
        return 1.0 / self.T2s_ef - 0.5 / self.T1_ef

    @property
    def kappa_E_total(self) -> float:
        return self.kappa_E_c + self.kappa_E_i

    def with_updates(self, **kwargs) -> "DeviceParams":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        """Flat mapping with ordinary-Hz frequency keys (config convention)."""
        return {
            "omega_q_max_hz": self.omega_q_max / TWOPI,
            "e_c_hz": self.E_C / TWOPI,
            "g_qe_hz": self.g_qE / TWOPI,
            "omega_e_hz": self.omega_E / TWOPI,
            "kappa_e_c_hz": self.kappa_E_c / TWOPI,
            "kappa_e_i_hz": self.kappa_E_i / TWOPI,
            "t1_ge_s": self.T1_ge,
            "t1_ef_s": self.T1_ef,
            "t2s_ge_s": self.T2s_ge,
            "t2s_ef_s": self.T2s_ef,
            "phi_dc": self.phi_dc,
            "flux_scale": self.flux_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceParams":
        return cls(
            omega_q_max=TWOPI * float(d["omega_q_max_hz"]),
            E_C=TWOPI * float(d["e_c_hz"]),
            g_qE=TWOPI * float(d["g_qe_hz"]),
            omega_E=TWOPI * float(d["omega_e_hz"]),
            kappa_E_c=TWOPI * float(d["kappa_e_c_hz"]),
            kappa_E_i=TWOPI * float(d["kappa_e_i_hz"]),
            T1_ge=float(d["t1_ge_s"]),
            T1_ef=float(d["t1_ef_s"]),
            T2s_ge=float(d["t2s_ge_s"]),
            T2s_ef=float(d["t2s_ef_s"]),
            phi_dc=float(d["phi_dc"]),
            flux_scale=float(d.get("flux_scale", 1.0)),
        )


@dataclass(frozen=True)
class SidebandWorkingPoint:
    """Modulation working point: DC flux, carrier, and qubit-resonator detuning."""

    phi_dc: float
    omega_m: float
    delta_qE: float

    def __post_init__(self):
        if not self.omega_m > 0:
            raise ValueError("omega_m must be > 0")


@dataclass
class CalibrationCurve:
    """Fitted sideband calibration: linear coupling and quadratic shift."""

    amplitudes: np.ndarray
    g_eff_values: np.ndarray
    shift_values: np.ndarray
    linear_coeff: float
    quad_coeff: float
    linear_residual_rms: float = 0.0
    quad_residual_rms: float = 0.0
    linear_r2: float = 1.0
    quad_r2: float = 1.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if np.any(np.diff(self.amplitudes) <= 0):
            raise ValueError("calibration amplitudes must be strictly increasing")


def make_working_point(params: DeviceParams, omega_m: float | None = None) -> SidebandWorkingPoint:
    """Default first-order sideband working point.

    The carrier bridges the static qubit-resonator detuning: omega_m =
    omega_E - omega_q(phi_dc); amplitude-dependent shifts are handled by
    chirping, not by retuning the carrier.
    """
    wq = transmon_frequency(params, params.phi_dc)
    delta = wq - params.omega_E
    if omega_m is None:
        omega_m = -delta
    return SidebandWorkingPoint(phi_dc=params.phi_dc, omega_m=omega_m, delta_qE=delta)


def _effective_flux(params: DeviceParams, phi):
    return np.asarray(phi, dtype=float) * params.flux_scale


def transmon_frequency(params: DeviceParams, phi):
    """Qubit frequency (rad/s) at nominal flux ``phi`` (units of Phi_0).

    Symmetric-SQUID closed form with the total Josephson energy eliminated
    in favor of the peak frequency:
    omega_q(phi) = (omega_q_max + E_C) * sqrt(cos(pi * phi * flux_scale)) - E_C.
    """
    x = _effective_flux(params, phi)
    if np.any(np.abs(x) >= 0.5):
        raise FluxDomainError("flux excursion reaches |phi_eff| >= 0.5 (E_J <= 0)")
    c = np.cos(np.pi * x)
    return (params.omega_q_max + params.E_C) * np.sqrt(c) - params.E_C


def flux_derivatives(params: DeviceParams, phi):
    """Analytic d(omega_q)/d(phi) and d^2(omega_q)/d(phi)^2 at nominal flux.

    Derivatives are with respect to the *nominal* flux, so each power of
    flux_scale appears via the chain rule.
    """
    x = _effective_flux(params, phi)
    if np.any(np.abs(x) >= 0.5):
        raise FluxDomainError("flux excursion reaches |phi_eff| >= 0.5 (E_J <= 0)")
    W = params.omega_q_max + params.E_C
    s = params.flux_scale
    c = np.cos(np.pi * x)
    sn = np.sin(np.pi * x)
    d1 = -W * (np.pi * s) * sn / (2.0 * np.sqrt(c))
    d2 = -W * (np.pi * s) ** 2 * (1.0 + c**2) / (4.0 * c**1.5)
    return d1, d2


def lfm_fourier(
    params: DeviceParams,
    phi_dc: float,
    phi_ac: float,
    n_harmonics: int = 4,
    n_points: int = 4096,
):
    """Harmonic content of the modulated qubit frequency.

    Decomposes t -> omega_q(phi_dc + phi_ac*cos t) over one modulation
    period.  Returns (delta_dc, A) where delta_dc is the cycle-averaged
    frequency offset from omega_q(phi_dc) and A[a-1] is the a-th cosine
    coefficient (rad/s).  Uniform-grid averaging over a full period is the
    periodic trapezoid rule and converges spectrally.
    """
    if n_harmonics < 1:
        raise ValueError("n_harmonics must be >= 1")
    if n_points < 1024:
        n_points = 1024
    if (abs(phi_dc) + abs(phi_ac)) * params.flux_scale >= 0.5 or abs(phi_dc) + abs(phi_ac) >= 0.5:
        raise FluxDomainError("flux excursion |phi_dc| + |phi_ac| leaves the junction domain")
    t = np.linspace(0.0, TWOPI, n_points, endpoint=False)
    w = transmon_frequency(params, phi_dc + phi_ac * np.cos(t))
    mean = w.mean()
    delta_dc = mean - transmon_frequency(params, phi_dc)
    a_idx = np.arange(1, n_harmonics + 1)
    # cos(a*t) projections; factor 2 from the cosine-series normalization
    A = 2.0 * (w[None, :] * np.cos(a_idx[:, None] * t[None, :])).mean(axis=1)
    return float(delta_dc), A


def first_harmonic_amplitude(params: DeviceParams, phi_dc: float, phi_ac) -> np.ndarray:
    """Vectorized A^1 over an array of modulation amplitudes (rad/s).

    Same quadrature as :func:`lfm_fourier`, evaluated for many amplitudes at
    once; used for sampled pulse envelopes.
    """
    phi_ac = np.atleast_1d(np.asarray(phi_ac, dtype=float))
    t = np.linspace(0.0, TWOPI, 1024, endpoint=False)
    w = transmon_frequency(params, phi_dc + phi_ac[:, None] * np.cos(t)[None, :])
    return 2.0 * (w * np.cos(t)[None, :]).mean(axis=1)


def mean_shift_amplitude(params: DeviceParams, phi_dc: float, phi_ac) -> np.ndarray:
    """Vectorized cycle-averaged frequency offset over amplitudes (rad/s)."""
    phi_ac = np.atleast_1d(np.asarray(phi_ac, dtype=float))
    t = np.linspace(0.0, TWOPI, 1024, endpoint=False)
    w = transmon_frequency(params, phi_dc + phi_ac[:, None] * np.cos(t)[None, :])
    return w.mean(axis=1) - transmon_frequency(params, phi_dc)


def effective_coupling(
    params: DeviceParams,
    wp: SidebandWorkingPoint,
    phi_ac: float,
    theta_m: float = 0.0,
) -> complex:
    """First-order sideband coupling g_qE * J1(|A^1|/omega_m) * exp(i theta_m).

    The full Bessel form stays meaningful at large modulation amplitude; the
    small-argument linearization is :func:`linearized_coupling`.  The sign of
    the flux slope is absorbed into the modulation phase origin so that the
    coupling phase equals theta_m exactly (see also the carrier sign handling
    in the flux-tier model builder).
    """
    if phi_ac == 0.0:
        return 0.0j
    _, A = lfm_fourier(params, wp.phi_dc, phi_ac, n_harmonics=1)
    z = abs(A[0]) / wp.omega_m
    return params.g_qE * bessel_j1(z) * np.exp(1j * theta_m)


def linearized_coupling(
    params: DeviceParams,
    wp: SidebandWorkingPoint,
    phi_ac: float,
    theta_m: float = 0.0,
) -> complex:
    """Small-amplitude limit g_qE * Phi_AC * |domega/dphi| / (2 omega_m) * e^{i theta_m}."""
    d1, _ = flux_derivatives(params, wp.phi_dc)
    return params.g_qE * phi_ac * abs(d1) / (2.0 * wp.omega_m) * np.exp(1j * theta_m)


def total_dynamic_shift(params: DeviceParams, wp: SidebandWorkingPoint, phi_ac: float) -> float:
    """Modulation-induced qubit frequency shift (rad/s).

    Sum of the cycle-averaged offset of the modulated spectrum and the
    dressed-shift variation from the zeroth sideband,
    -(g_qE^2/delta_qE) * (A^1/omega_m)^2.  The two terms have opposite signs
    when the resonator sits above the qubit.
    """
    if phi_ac == 0.0:
        return 0.0
    if wp.delta_qE == 0.0:
        raise ZeroDivisionError("delta_qE = 0: dressed-shift variation diverges")
    delta_dc, A = lfm_fourier(params, wp.phi_dc, phi_ac, n_harmonics=1)
    z = A[0] / wp.omega_m
    lamb = -(params.g_qE**2 / wp.delta_qE) * z**2
    return delta_dc + lamb


def shift_vs_amplitude(params: DeviceParams, wp: SidebandWorkingPoint, phi_ac) -> np.ndarray:
    """Vectorized :func:`total_dynamic_shift` over an amplitude array."""
    phi_ac = np.atleast_1d(np.asarray(phi_ac, dtype=float))
    out = np.zeros_like(phi_ac)
    nz = phi_ac != 0.0
    if np.any(nz):
        d_dc = mean_shift_amplitude(params, wp.phi_dc, phi_ac[nz])
        A1 = first_harmonic_amplitude(params, wp.phi_dc, phi_ac[nz])
        z = A1 / wp.omega_m
        out[nz] = d_dc - (params.g_qE**2 / wp.delta_qE) * z**2
    return out


def fit_calibration(samples) -> CalibrationCurve:
    """Least-squares fits of a sideband calibration sweep.

    ``samples`` is an iterable of (phi_ac, g_eff_magnitude, shift) rows.
    The coupling is fitted as a line through the origin, the shift as a pure
    quadratic through the origin.
    """
    rows = sorted((float(a), float(g), float(s)) for a, g, s in samples)
    amps = np.array([r[0] for r in rows])
    if len(np.unique(amps)) < 3:
        raise DegenerateInputError("need >= 3 distinct amplitudes to fit a calibration")
    g = np.array([r[1] for r in rows])
    d = np.array([r[2] for r in rows])

    linear = float(np.dot(amps, g) / np.dot(amps, amps))
    quad = float(np.dot(amps**2, d) / np.dot(amps**2, amps**2))

    g_res = g - linear * amps
    d_res = d - quad * amps**2

    def r2(y, res):
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        return 1.0 - float(np.sum(res**2)) / ss_tot if ss_tot > 0 else 1.0

    return CalibrationCurve(
        amplitudes=amps,
        g_eff_values=g,
        shift_values=d,
        linear_coeff=linear,
        quad_coeff=quad,
        linear_residual_rms=float(np.sqrt(np.mean(g_res**2))),
        quad_residual_rms=float(np.sqrt(np.mean(d_res**2))),
        linear_r2=r2(g, g_res),
        quad_r2=r2(d, d_res),
    )
