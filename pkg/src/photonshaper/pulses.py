"""Parametric-modulation waveform generation and amplitude calibration.

Envelopes are sampled flux amplitudes Phi_AC(t) in units of the flux
quantum; phase tracks theta_m(t) are in radians.  A chirped pulse carries
theta_m(t) = theta_0 - integral of the modulation-induced shift, which
cancels the dynamic qubit detuning during emission.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import minimize_scalar
from scipy.special import erf, j1 as bessel_j1

from .device import (
    DeviceParams,
    SidebandWorkingPoint,
    first_harmonic_amplitude,
    make_working_point,
    mean_shift_amplitude,
)
from .errors import BracketError, FluxDomainError

ENVELOPE_KINDS = ("flattop", "sin2", "sech", "custom")


@dataclass(frozen=True)
class EnvelopeSpec:
    """Shape, amplitude, and length of a modulation envelope.

    ``length`` is the total support of the sampled envelope.  For the
    flattop this includes the error-function edges (3 sigma on each side);
    the sech window is centered on length/2 and truncated at 4*pi/kappa.
    """

    kind: str
    amplitude: float
    length: float
    edge_sigma: float = 2e-9
    sech_kappa: float | None = None
    custom_samples: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ENVELOPE_KINDS:
            raise ValueError(f"unknown envelope kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("envelope amplitude must be >= 0")
        if not self.length > 0:
            raise ValueError("envelope length must be > 0")
        if self.kind == "custom" and self.custom_samples is None:
            raise ValueError("custom envelope selected without samples")


@dataclass
class FluxPulse:
    """Sampled parametric-modulation waveform.

    ``envelope`` is Phi_AC(t) at spacing ``dt``; ``theta_track`` is the
    modulation phase theta_m(t); ``delta_track``, when present, holds the
    frequency-shift samples the chirp was built from so the dynamic
    detuning cancels exactly sample by sample.
    """

    dt: float
    envelope: np.ndarray
    omega_m: float
    theta_track: np.ndarray
    t0: float = 0.0
    delta_track: np.ndarray | None = None

    def __post_init__(self):
        self.envelope = np.asarray(self.envelope, dtype=float)
        self.theta_track = np.asarray(self.theta_track, dtype=float)
        if self.envelope.shape != self.theta_track.shape:
            raise ValueError("envelope and theta_track must have equal length")
        if self.delta_track is not None:
            self.delta_track = np.asarray(self.delta_track, dtype=float)
            if self.delta_track.shape != self.envelope.shape:
                raise ValueError("delta_track must match envelope length")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.envelope.size)

    @property
    def duration(self) -> float:
        return self.dt * (self.envelope.size - 1)

    def validate_excursion(self, params: DeviceParams):
        peak = np.max(np.abs(self.envelope)) if self.envelope.size else 0.0
        worst = abs(params.phi_dc) + peak
        if worst >= 0.5 or worst * params.flux_scale >= 0.5:
            raise FluxDomainError("instantaneous flux leaves (-0.5, 0.5)")

    def to_csv(self, path):
        header = "t_s,envelope_phi0,theta_rad"
        data = np.column_stack([self.times, self.envelope, self.theta_track])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def envelope_samples(spec: EnvelopeSpec, dt: float) -> np.ndarray:
    """Sample an envelope on [0, length] at spacing dt (dt <= length/50)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if dt > spec.length / 50:
        raise ValueError("dt too coarse: need dt <= length/50")
    n = int(round(spec.length / dt)) + 1
    t = np.arange(n) * dt
    if spec.kind == "sin2":
        return spec.amplitude * np.sin(math.pi * t / spec.length)
    if spec.kind == "sech":
        kappa = spec.sech_kappa if spec.sech_kappa is not None else 4.0 * math.pi / spec.length
        return spec.amplitude * (1.0 / np.cosh(kappa * (t - spec.length / 2.0)))
    if spec.kind == "flattop":
        sig = spec.edge_sigma
        if spec.length <= 6.0 * sig:
            raise ValueError("flattop length must exceed 6 * edge_sigma")
        lo, hi = 3.0 * sig, spec.length - 3.0 * sig
        shape = 0.5 * (erf((t - lo) / (math.sqrt(2) * sig)) - erf((t - hi) / (math.sqrt(2) * sig)))
        return spec.amplitude * shape / shape.max()
    samples = np.asarray(spec.custom_samples, dtype=float)
    if samples.ndim != 1 or samples.size < 2:
        raise ValueError("custom samples must be a 1-D array of >= 2 points")
    src_t = np.linspace(0.0, spec.length, samples.size)
    return np.interp(t, src_t, samples)


def chirp_track(envelope: np.ndarray, dt: float, shift_model, theta0: float = 0.0):
    """Integrate theta_m(t) = theta0 - int_0^t shift(envelope(tau)) dtau.

    ``shift_model`` is either a callable shift(phi_ac) -> rad/s or a scalar
    quadratic coefficient (shift = coeff * phi_ac^2).  Returns the phase
    track and the shift samples it was built from.
    """
    env = np.asarray(envelope, dtype=float)
    if callable(shift_model):
        delta = np.asarray(shift_model(env), dtype=float)
    else:
        delta = float(shift_model) * env**2
    theta = theta0 - cumulative_trapezoid(delta, dx=dt, initial=0.0)
    return theta, delta


class SidebandResponse:
    """Tabulated amplitude -> (|g_eff|, shift) maps for one working point.

    Both the chirp construction and the effective-model detuning interpolate
    the same tables, so a chirped pulse cancels its own shift exactly.
    """

    def __init__(self, params: DeviceParams, wp: SidebandWorkingPoint | None = None,
                 max_amplitude: float | None = None, n_grid: int = 768):
        self.params = params
        self.wp = wp if wp is not None else make_working_point(params)
        if max_amplitude is None:
            headroom = 0.5 / max(1.0, params.flux_scale) - abs(params.phi_dc)
            max_amplitude = 0.95 * headroom
        self.max_amplitude = max_amplitude
        self._grid = np.linspace(0.0, max_amplitude, n_grid)
        a1 = np.zeros(n_grid)
        a1[1:] = first_harmonic_amplitude(params, self.wp.phi_dc, self._grid[1:])
        self._a1 = np.abs(a1)
        dc = np.zeros(n_grid)
        dc[1:] = mean_shift_amplitude(params, self.wp.phi_dc, self._grid[1:])
        z = self._a1 / self.wp.omega_m
        self._shift = dc - (params.g_qE**2 / self.wp.delta_qE) * z**2

    def coupling_magnitude(self, phi_ac):
        """|g_eff| (rad/s) for amplitudes within the tabulated range."""
        z = np.interp(np.abs(phi_ac), self._grid, self._a1) / self.wp.omega_m
        return self.params.g_qE * bessel_j1(z)

    def shift(self, phi_ac):
        """Total dynamic frequency shift (rad/s) at the given amplitudes."""
        return np.interp(np.abs(phi_ac), self._grid, self._shift)


def make_flux_pulse(
    params: DeviceParams,
    spec: EnvelopeSpec,
    dt: float,
    chirp: bool = True,
    theta0: float = 0.0,
    response: SidebandResponse | None = None,
    wp: SidebandWorkingPoint | None = None,
    t0: float = 0.0,
) -> FluxPulse:
    """Build a FluxPulse for a working point, optionally chirped."""
    if response is None:
        response = SidebandResponse(params, wp)
    env = envelope_samples(spec, dt)
    if chirp:
        theta, delta = chirp_track(env, dt, response.shift, theta0=theta0)
    else:
        theta = np.full(env.shape, float(theta0))
        delta = None
    pulse = FluxPulse(
        dt=dt,
        envelope=env,
        omega_m=response.wp.omega_m,
        theta_track=theta,
        t0=t0,
        delta_track=delta,
    )
    pulse.validate_excursion(params)
    return pulse


@dataclass
class PiCalibration:
    """Result of a transfer-pulse amplitude calibration."""

    amplitude: float
    residual_pe: float
    n_evaluations: int
    converged: bool
    scan_amplitudes: np.ndarray = field(default_factory=lambda: np.empty(0))
    scan_residuals: np.ndarray = field(default_factory=lambda: np.empty(0))


def calibrate_pi_e0g1(
    params: DeviceParams,
    spec_family: str,
    length: float,
    simulator,
    a_max: float | None = None,
    residual_target: float = 1e-3,
    n_scan: int = 13,
    xtol: float = 1e-4,
    **spec_kwargs,
) -> PiCalibration:
    """Find the envelope amplitude that empties the qubit excited state.

    ``simulator`` maps a FluxPulse to the final excited-state population.
    A coarse scan establishes a bracket around the first minimum; a
    golden-section refinement polishes it.  A non-unimodal scan (no interior
    bracket around the best point) raises BracketError rather than guessing.
    """
    headroom = 0.5 / max(1.0, params.flux_scale) - abs(params.phi_dc)
    if a_max is None:
        # bracket around the lossless pulse-area estimate 2 k_g A T_env = pi
        probe = SidebandResponse(params, max_amplitude=0.9 * headroom)
        small = 1e-4 * headroom
        k_g = float(probe.coupling_magnitude(small)) / small
        unit_env = envelope_samples(
            EnvelopeSpec(kind=spec_family, amplitude=1.0, length=length, **spec_kwargs),
            dt=length / 400,
        )
        t_env = float(np.trapezoid(unit_env, dx=length / 400))
        a_max = min(3.0 * math.pi / (2.0 * k_g * t_env), 0.9 * headroom)
    response = SidebandResponse(params, max_amplitude=min(a_max * 1.05, 0.95 * headroom))

    evaluations = [0]

    def residual(amp):
        evaluations[0] += 1
        spec = EnvelopeSpec(kind=spec_family, amplitude=float(amp), length=length, **spec_kwargs)
        pulse = make_flux_pulse(params, spec, dt=length / 1600, chirp=True, response=response)
        return float(simulator(pulse))

    scan_amps = np.linspace(a_max / n_scan, a_max, n_scan)
    scan_res = np.array([residual(a) for a in scan_amps])
    # bracket the first local minimum (larger amplitudes revisit the
    # transfer condition at odd multiples of the pulse area)
    k = None
    for i in range(n_scan):
        left = scan_res[i - 1] if i > 0 else 1.0  # no drive leaves the qubit excited
        right = scan_res[i + 1] if i < n_scan - 1 else None
        if right is None:
            break
        if scan_res[i] <= left and scan_res[i] < right:
            k = i
            break
    if k is None:
        raise BracketError(
            "no interior residual minimum on [0, a_max]: transfer-pulse bracket failed"
        )
    lo = scan_amps[k - 1] if k > 0 else 0.0
    hi = scan_amps[k + 1]
    if not (scan_res[k] < min(1.0 if k == 0 else scan_res[k - 1], scan_res[k + 1])):
        raise BracketError("excited-state residual is not unimodal over the scan bracket")

    mid = scan_amps[k]
    opt = minimize_scalar(
        residual,
        bracket=(lo, mid, hi),
        method="golden",
        options={"xtol": xtol},
    )
    best_amp = float(opt.x)
    best_res = float(opt.fun)
    return PiCalibration(
        amplitude=best_amp,
        residual_pe=best_res,
        n_evaluations=evaluations[0],
        converged=bool(best_res < residual_target),
        scan_amplitudes=scan_amps,
        scan_residuals=scan_res,
    )
