"""Open-system dynamics of the qubit + emission-resonator node.

Two model tiers share one fixed-step RK4 Lindblad integrator:

* effective tier: rotating-frame sideband-exchange model with coupling
  magnitude g_qE * J1(|A^1(t)|/omega_m), constant coupling phase
  theta_m(0), and detuning delta(t) = shift(Phi_AC(t)) + d(theta_m)/dt on
  the excited state.  A chirped pulse therefore cancels its own dynamic
  detuning; an unchirped one accumulates the physical phase drift.
* flux tier: resonator-frame Hamiltonian with the fully modulated spectrum
  omega_q(Phi(t)), the f ladder, and the carrier resolved in time.

The carrier phase origin absorbs the sign of the flux slope at the working
point, so at theta_m = 0 both tiers emit with the same field phase.
Segment durations are quantized to the integration step so records stay on
one uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Callable

import numpy as np

from .device import DeviceParams, flux_derivatives, make_working_point, transmon_frequency
from .errors import InvariantViolationError
from .fields import FieldRecord
from .pulses import FluxPulse, SidebandResponse

TWOPI = 2.0 * math.pi

TRACE_TOL = 1e-6
HERM_TOL = 1e-8
EIG_TOL = 1e-6
CAPTURE_EPSILON = 1e-3


# ---------------------------------------------------------------------------
# Hilbert space plumbing


@dataclass(frozen=True)
class HilbertSpec:
    """Truncation choices for one or two qubit-resonator nodes."""

    qubit_levels: int = 3
    fock_dim: int = 3
    node_count: int = 1

    def __post_init__(self):
        if self.qubit_levels not in (2, 3):
            raise ValueError("qubit_levels must be 2 or 3")
        if self.fock_dim < 2:
            raise ValueError("fock_dim must be >= 2")
        if self.node_count not in (1, 2):
            raise ValueError("node_count must be 1 or 2")
        if (self.qubit_levels * self.fock_dim) ** self.node_count > 64:
            raise ValueError("total Hilbert dimension exceeds the desk-scale guard (64)")


class Space:
    """Kron layout of subsystems; builds embedded operators."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        self.dim = int(np.prod(self.dims))

    def embed(self, ops: dict[int, np.ndarray]) -> np.ndarray:
        out = np.array([[1.0 + 0j]])
        for k, d in enumerate(self.dims):
            factor = ops.get(k)
            if factor is None:
                factor = np.eye(d, dtype=complex)
            out = np.kron(out, factor)
        return out


def partial_trace(rho: np.ndarray, dims, keep) -> np.ndarray:
    """Trace out all subsystems except ``keep`` (tuple of indices, ordered)."""
    dims = tuple(dims)
    keep = tuple(keep)
    n = len(dims)
    resh = rho.reshape(dims + dims)
    lowercase = "abcdefghijklm"
    uppercase = lowercase.upper()
    row = [lowercase[k] for k in range(n)]
    col = [uppercase[k] if k in keep else lowercase[k] for k in range(n)]
    spec = "".join(row) + "".join(col) + "->" + "".join(
        lowercase[k] for k in keep
    ) + "".join(uppercase[k] for k in keep)
    out = np.einsum(spec, resh)
    d_keep = int(np.prod([dims[k] for k in keep])) if keep else 1
    return out.reshape(d_keep, d_keep)


def destroy(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def qubit_lower(levels: int, which: str) -> np.ndarray:
    """|g><e| ('ge') or |e><f| ('ef') in a ``levels``-dim qubit space."""
    op = np.zeros((levels, levels), dtype=complex)
    if which == "ge":
        op[0, 1] = 1.0
    elif which == "ef":
        if levels < 3:
            raise ValueError("ef operator needs a 3-level qubit")
        op[1, 2] = 1.0
    else:
        raise ValueError(which)
    return op


def projector(levels: int, k: int) -> np.ndarray:
    op = np.zeros((levels, levels), dtype=complex)
    op[k, k] = 1.0
    return op


def rotation_unitary(levels: int, subspace: str, theta: float, phi: float = 0.0) -> np.ndarray:
    """Instantaneous rotation mapping the lower state of the block to
    cos(theta/2)|lo> + e^{i phi} sin(theta/2)|hi>."""
    if subspace == "ge":
        i, j = 0, 1
    elif subspace == "ef":
        if levels < 3:
            raise ValueError("ef rotation needs a 3-level qubit")
        i, j = 1, 2
    else:
        raise ValueError(subspace)
    U = np.eye(levels, dtype=complex)
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    U[i, i] = c
    U[j, j] = c
    U[i, j] = -s * np.exp(-1j * phi)
    U[j, i] = s * np.exp(1j * phi)
    return U


def ground_state_of(dim: int) -> np.ndarray:
    rho = np.zeros((dim, dim), dtype=complex)
    rho[0, 0] = 1.0
    return rho


# ---------------------------------------------------------------------------
# Sequences


@dataclass(frozen=True)
class Rotation:
    subspace: str
    theta: float
    phi: float = 0.0


@dataclass(frozen=True)
class Delay:
    duration: float


@dataclass(frozen=True)
class FluxDrive:
    pulse: FluxPulse


class PulseSequence:
    """Ordered control events for one node: rotations are instantaneous,
    flux drives and delays occupy time sequentially (never overlapping)."""

    def __init__(self, events=()):
        self.events = list(events)
        for e in self.events:
            if not isinstance(e, (Rotation, Delay, FluxDrive)):
                raise TypeError("events must be Rotation, Delay, or FluxDrive")
            if isinstance(e, Delay) and not e.duration >= 0:
                raise ValueError("delay duration must be >= 0")

    def append(self, event):
        self.events.append(event)
        return self

    @property
    def duration(self) -> float:
        total = 0.0
        for e in self.events:
            if isinstance(e, Delay):
                total += e.duration
            elif isinstance(e, FluxDrive):
                total += e.pulse.duration
        return total


# ---------------------------------------------------------------------------
# Generator plan


@dataclass
class Segment:
    duration: float
    channels: list  # (u(t_abs) -> ndarray, H_op) pairs
    label: str = ""


@dataclass
class UnitaryStep:
    U: np.ndarray
    label: str = ""


@dataclass
class CascadeTerm:
    """Unidirectional routing of the monitored source output c1 into an
    absorber mode b with time-dependent amplitude beta(t)."""

    c1: np.ndarray
    b: np.ndarray
    beta: Callable[[np.ndarray], np.ndarray]


@dataclass
class Generator:
    """Time-dependent Lindblad generator plus sequencing plan."""

    space: Space
    h_static: np.ndarray
    c_ops: list
    steps: list
    record_ops: dict
    aout_op: np.ndarray
    cascade: CascadeTerm | None = None
    t_start: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.steps if isinstance(s, Segment))


# ---------------------------------------------------------------------------
# Model builders


def _node_operators(device: DeviceParams, space: Space, iq: int, ir: int, levels: int):
    """Embedded single-node operators and the undriven collapse set
    (internal resonator loss, relaxation, pure dephasing -- without the
    monitored coupling decay, which callers route explicitly)."""
    nf = space.dims[ir]
    a = space.embed({ir: destroy(nf)})
    sm_ge = space.embed({iq: qubit_lower(levels, "ge")})
    sm_ef = space.embed({iq: qubit_lower(levels, "ef")}) if levels >= 3 else None
    pe = space.embed({iq: projector(levels, 1)})
    pf = space.embed({iq: projector(levels, 2)}) if levels >= 3 else None
    c_ops = [
        math.sqrt(device.kappa_E_i) * a,
        math.sqrt(1.0 / device.T1_ge) * sm_ge,
        math.sqrt(2.0 * device.gamma_phi_ge) * pe,
    ]
    if levels >= 3:
        c_ops += [
            math.sqrt(1.0 / device.T1_ef) * sm_ef,
            math.sqrt(2.0 * device.gamma_phi_ef) * pf,
        ]
    return a, sm_ge, sm_ef, pe, pf, c_ops


def _record_ops(space: Space, a, levels, iq):
    return {
        "n_res": a.conj().T @ a,
        "p_g": space.embed({iq: projector(levels, 0)}),
        "p_e": space.embed({iq: projector(levels, 1)}),
        "p_f": space.embed({iq: projector(levels, 2)}) if levels >= 3 else np.zeros((space.dim, space.dim), dtype=complex),
    }


def _pulse_interpolators(pulse: FluxPulse):
    t = pulse.times
    env = pulse.envelope
    theta = pulse.theta_track

    def env_of(tt):
        return np.interp(tt, t, env, left=0.0, right=0.0)

    def theta_of(tt):
        return np.interp(tt, t, theta, left=theta[0], right=theta[-1])

    return env_of, theta_of


def _theta_dot(pulse: FluxPulse):
    """d(theta)/dt samples; exactly -delta when the chirp carried its shift."""
    if pulse.delta_track is not None:
        return -pulse.delta_track
    if pulse.theta_track.size < 2:
        return np.zeros_like(pulse.theta_track)
    return np.gradient(pulse.theta_track, pulse.dt)


def _exchange_operators(a, sm):
    hx = a.conj().T @ sm + sm.conj().T @ a
    hy = 1j * (a.conj().T @ sm - sm.conj().T @ a)
    return hx, hy


def _flux_drive_channels(pulse: FluxPulse, response: SidebandResponse, hx, hy, pe, chirped: bool, t_off: float = 0.0):
    """Effective-tier channels of one parametric drive."""
    env_of, _ = _pulse_interpolators(pulse)
    theta0 = float(pulse.theta_track[0])
    theta_dot = _theta_dot(pulse) if chirped else np.zeros_like(pulse.theta_track)
    tp = pulse.times

    def gmag(tt):
        return response.coupling_magnitude(env_of(tt - t_off))

    def delta(tt):
        shifted = tt - t_off
        return response.shift(env_of(shifted)) + np.interp(shifted, tp, theta_dot, left=0.0, right=0.0)

    return [
        (lambda tt, c=math.cos(theta0): c * gmag(tt), hx),
        (lambda tt, s=math.sin(theta0): s * gmag(tt), hy),
        (delta, pe),
    ]


def build_effective_model(
    device: DeviceParams,
    sequence: PulseSequence,
    chirp_on: bool = True,
    hspec: HilbertSpec | None = None,
    response: SidebandResponse | None = None,
    tail: float | None = None,
) -> Generator:
    """Rotating-frame sideband-exchange generator for one node.

    ``chirp_on=False`` freezes the phase track of every flux drive at its
    initial value, leaving the dynamic frequency shift uncompensated; with
    the chirp on, the detuning channel vanishes sample by sample.
    """
    hspec = hspec or HilbertSpec()
    levels = hspec.qubit_levels
    space = Space((levels, hspec.fock_dim))
    a, sm_ge, _, pe, pf, c_ops = _node_operators(device, space, 0, 1, levels)
    c_ops = [math.sqrt(device.kappa_E_c) * a] + c_ops
    if response is None:
        response = SidebandResponse(device)
    hx, hy = _exchange_operators(a, sm_ge)

    steps: list = []
    for ev in sequence.events:
        if isinstance(ev, Rotation):
            steps.append(UnitaryStep(space.embed({0: rotation_unitary(levels, ev.subspace, ev.theta, ev.phi)})))
        elif isinstance(ev, Delay):
            if ev.duration > 0:
                steps.append(Segment(ev.duration, [], label="delay"))
        else:
            steps.append(
                Segment(
                    ev.pulse.duration,
                    _flux_drive_channels(ev.pulse, response, hx, hy, pe, chirped=chirp_on),
                    label="flux",
                )
            )
    if tail is None:
        tail = 6.0 / device.kappa_E_total
    if tail > 0:
        steps.append(Segment(tail, [], label="tail"))

    return Generator(
        space=space,
        h_static=np.zeros((space.dim, space.dim), dtype=complex),
        c_ops=c_ops,
        steps=steps,
        record_ops=_record_ops(space, a, levels, 0),
        aout_op=math.sqrt(device.kappa_E_c) * a,
        meta={"tier": "effective", "device": device, "response": response},
    )


def carrier_sign_offset(device: DeviceParams) -> float:
    """Carrier phase origin: pi when the flux slope at the working point is
    negative, keeping the effective coupling positive at theta_m = 0."""
    d1, _ = flux_derivatives(device, device.phi_dc)
    return math.pi if d1 < 0 else 0.0


def flux_sideband_carrier(device: DeviceParams) -> float:
    """First-order sideband resonance of the flux tier (rad/s).

    The static exchange coupling hybridizes qubit and resonator, so the
    full model is resonant at the dressed one-excitation splitting
    sqrt(detuning^2 + 4 g^2) rather than at the bare detuning the
    rotating-frame tier is referenced to.
    """
    delta0 = transmon_frequency(device, device.phi_dc) - device.omega_E
    return math.sqrt(delta0**2 + 4.0 * device.g_qE**2)


def adapt_pulse_for_flux_tier(
    device: DeviceParams, pulse: FluxPulse, response: SidebandResponse | None = None
) -> FluxPulse:
    """Re-target a rotating-frame pulse at the flux tier's dressed carrier.

    The carrier moves to the dressed sideband resonance and the envelope is
    rescaled (through the tabulated harmonic response) so the instantaneous
    effective coupling g_qE J1(A^1/omega_m) is preserved.  Phase and shift
    tracks carry over unchanged.
    """
    if response is None:
        response = SidebandResponse(device)
    om_old = pulse.omega_m
    om_new = flux_sideband_carrier(device)
    a1_old = np.interp(np.abs(pulse.envelope), response._grid, response._a1)
    a1_target = a1_old * (om_new / om_old)
    env_new = np.interp(a1_target, response._a1, response._grid)
    adapted = FluxPulse(
        dt=pulse.dt,
        envelope=np.sign(pulse.envelope) * env_new,
        omega_m=om_new,
        theta_track=pulse.theta_track.copy(),
        t0=pulse.t0,
        delta_track=None if pulse.delta_track is None else pulse.delta_track.copy(),
    )
    adapted.validate_excursion(device)
    return adapted


def build_flux_model(
    device: DeviceParams,
    sequence: PulseSequence,
    hspec: HilbertSpec | None = None,
    tail: float | None = None,
) -> Generator:
    """Resonator-frame generator with the fully resolved flux modulation.

    The integration step must resolve the carrier: evolve() rejects
    dt > 2 pi / (40 omega_m).
    """
    hspec = hspec or HilbertSpec()
    levels = hspec.qubit_levels
    space = Space((levels, hspec.fock_dim))
    a, sm_ge, sm_ef, pe, pf, c_ops = _node_operators(device, space, 0, 1, levels)
    c_ops = [math.sqrt(device.kappa_E_c) * a] + c_ops

    ladder = sm_ge if levels < 3 else sm_ge + math.sqrt(2.0) * sm_ef
    h_static = device.g_qE * (a.conj().T @ ladder + ladder.conj().T @ a)
    diag_op = pe if levels < 3 else pe + 2.0 * pf
    if levels >= 3:
        h_static = h_static + (-device.E_C) * pf

    theta_sign = carrier_sign_offset(device)
    delta0 = transmon_frequency(device, device.phi_dc) - device.omega_E
    omega_m = make_working_point(device).omega_m

    def idle_channel():
        return [(lambda tt: np.full(np.shape(tt), delta0), diag_op)]

    steps: list = []
    for ev in sequence.events:
        if isinstance(ev, Rotation):
            steps.append(UnitaryStep(space.embed({0: rotation_unitary(levels, ev.subspace, ev.theta, ev.phi)})))
        elif isinstance(ev, Delay):
            if ev.duration > 0:
                steps.append(Segment(ev.duration, idle_channel(), label="delay"))
        else:
            pulse = ev.pulse
            env_of, theta_of = _pulse_interpolators(pulse)
            om = pulse.omega_m

            def u(tt, env_of=env_of, theta_of=theta_of, om=om):
                phi = device.phi_dc + env_of(tt) * np.cos(om * tt + theta_of(tt) + theta_sign)
                return transmon_frequency(device, phi) - device.omega_E

            steps.append(Segment(pulse.duration, [(u, diag_op)], label="flux"))
    if tail is None:
        tail = 6.0 / device.kappa_E_total
    if tail > 0:
        steps.append(Segment(tail, idle_channel(), label="tail"))

    return Generator(
        space=space,
        h_static=h_static,
        c_ops=c_ops,
        steps=steps,
        record_ops=_record_ops(space, a, levels, 0),
        aout_op=math.sqrt(device.kappa_E_c) * a,
        meta={
            "tier": "flux",
            "device": device,
            "omega_m": omega_m,
            "dt_max": TWOPI / (40.0 * omega_m),
        },
    )


# ---------------------------------------------------------------------------
# Results


@dataclass
class SimResult:
    """Time series, diagnostics, and final state of one integration."""

    t: np.ndarray
    amps: np.ndarray
    power: np.ndarray
    populations: dict
    n_res: np.ndarray
    final_rho: np.ndarray
    device: DeviceParams
    trace_dev_max: float
    herm_dev_max: float
    min_eigenvalue: float
    extra: dict = field(default_factory=dict)
    rho_trajectory: np.ndarray | None = None

    def field_record(self) -> FieldRecord:
        dt = float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0
        return FieldRecord(dt=dt, amps=self.amps.copy(), power=self.power.copy(), t0=float(self.t[0]))

    def energy_report(self) -> dict:
        """Excitation-number bookkeeping over the stored record."""
        d = self.device
        t = self.t
        pops = self.populations
        n_abs = self.extra.get("n_absorber")
        leak_c = float(np.trapezoid(d.kappa_E_c * self.n_res, t))
        leak_i = float(np.trapezoid(d.kappa_E_i * self.n_res, t))
        relax = float(np.trapezoid(pops["p_e"] / d.T1_ge + pops["p_f"] / d.T1_ef, t))

        def excitation(idx):
            val = pops["p_e"][idx] + 2.0 * pops["p_f"][idx] + self.n_res[idx]
            if n_abs is not None:
                val += n_abs[idx]
            return float(val)

        initial, final = excitation(0), excitation(-1)
        closure = final + leak_c + leak_i + relax
        return {
            "initial_excitation": initial,
            "final_excitation": final,
            "coupling_leakage": leak_c,
            "internal_leakage": leak_i,
            "qubit_relaxation": relax,
            "closure": closure,
            "closure_error": closure - initial,
        }

    def to_csv(self, path):
        header = "t_ns,re_aout,im_aout,power,p_g,p_e,p_f,n_res"
        data = np.column_stack(
            [
                self.t * 1e9,
                self.amps.real,
                self.amps.imag,
                self.power,
                self.populations["p_g"],
                self.populations["p_e"],
                self.populations["p_f"],
                self.n_res,
            ]
        )
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# RK4 Lindblad integration


def _rhs_factory(h_static, channel_ops, c_ops, cascade):
    c_stack = np.stack(c_ops) if c_ops else None
    if c_stack is not None:
        c_dag = c_stack.conj().transpose(0, 2, 1)
        cdc = np.einsum("kij,kjl->il", c_dag, c_stack)
    if cascade is not None:
        c1, b = cascade.c1, cascade.b
        b_dag = b.conj().T
        m1 = b_dag @ c1
        m1_dag = m1.conj().T
        nb = b_dag @ b

    def rhs(rho, u_vals, beta):
        if channel_ops:
            H = h_static.copy()
            for val, op in zip(u_vals, channel_ops):
                H += val * op
        else:
            H = h_static
        out = -1j * (H @ rho - rho @ H)
        if c_stack is not None:
            out += np.matmul(np.matmul(c_stack, rho), c_dag).sum(axis=0)
            out -= 0.5 * (cdc @ rho + rho @ cdc)
        if cascade is not None:
            bc = np.conj(beta)
            X = c1 @ rho @ b_dag
            out += bc * X + beta * X.conj().T
            out -= bc * (m1 @ rho) + beta * (rho @ m1_dag)
            ab2 = (beta * bc).real
            out += ab2 * (b @ rho @ b_dag - 0.5 * (nb @ rho + rho @ nb))
        return out

    return rhs


def evolve(
    generator: Generator,
    rho0: np.ndarray | None = None,
    dt: float = 2.5e-10,
    record_every: int = 1,
    check_invariants: bool = True,
    store_trajectory: bool = False,
) -> SimResult:
    """Fixed-step RK4 integration of the Lindblad equation over the plan.

    Segment durations are quantized to whole steps of ``dt``.  Raises
    InvariantViolationError when the trajectory drifts outside the
    trace/Hermiticity/positivity tolerances (reduce dt in that case).
    """
    gen = generator
    dt_max = gen.meta.get("dt_max")
    if dt_max is not None and dt > dt_max:
        raise ValueError(f"timestep too coarse for the carrier: need dt <= {dt_max:.3e} s")
    dim = gen.space.dim
    rho = ground_state_of(dim) if rho0 is None else np.array(rho0, dtype=complex)
    if rho.shape != (dim, dim):
        raise ValueError(f"rho0 must be {dim} x {dim}")

    rec_names = list(gen.record_ops)
    rec_ops_T = {k: np.ascontiguousarray(op.T) for k, op in gen.record_ops.items()}
    aout_T = np.ascontiguousarray(gen.aout_op.T)

    t_list: list = []
    amp_list: list = []
    rec_lists: dict = {k: [] for k in rec_names}
    rho_traj = [] if store_trajectory else None

    trace_dev = 0.0
    herm_dev = 0.0
    min_eig = np.inf
    eig_counter = [0]

    def check_state(mat, force=False):
        nonlocal trace_dev, herm_dev, min_eig
        trace_dev = max(trace_dev, abs(np.trace(mat).real - 1.0))
        eig_counter[0] += 1
        if force or eig_counter[0] % 64 == 0:
            herm_dev = max(herm_dev, float(np.max(np.abs(mat - mat.conj().T))))
            w = np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))
            min_eig = min(min_eig, float(w[0]))

    def record(mat, t):
        t_list.append(t)
        amp_list.append(np.sum(aout_T * mat))
        for k in rec_names:
            rec_lists[k].append(np.real(np.sum(rec_ops_T[k] * mat)))
        if rho_traj is not None:
            rho_traj.append(mat.copy())
        if check_invariants:
            check_state(mat)

    record(rho, gen.t_start)
    t_abs = gen.t_start

    for step_item in gen.steps:
        if isinstance(step_item, UnitaryStep):
            rho = step_item.U @ rho @ step_item.U.conj().T
            # overwrite the boundary sample so gates are visible in records
            t_list.pop(), amp_list.pop()
            for k in rec_names:
                rec_lists[k].pop()
            if rho_traj is not None:
                rho_traj.pop()
            record(rho, t_abs)
            continue
        seg = step_item
        n_steps = max(1, int(round(seg.duration / dt)))
        channel_ops = [op for _, op in seg.channels]
        rhs = _rhs_factory(gen.h_static, channel_ops, gen.c_ops, gen.cascade)

        t_half = t_abs + 0.5 * dt * np.arange(2 * n_steps + 1)
        if seg.channels:
            u_half = np.stack([np.asarray(fn(t_half), dtype=float) for fn, _ in seg.channels])
        else:
            u_half = np.zeros((0, t_half.size))
        if gen.cascade is not None:
            beta_half = np.asarray(gen.cascade.beta(t_half), dtype=complex)
        else:
            beta_half = np.zeros(t_half.size)

        for i in range(n_steps):
            u0 = u_half[:, 2 * i]
            um = u_half[:, 2 * i + 1]
            u1 = u_half[:, 2 * i + 2]
            k1 = rhs(rho, u0, beta_half[2 * i])
            k2 = rhs(rho + (0.5 * dt) * k1, um, beta_half[2 * i + 1])
            k3 = rhs(rho + (0.5 * dt) * k2, um, beta_half[2 * i + 1])
            k4 = rhs(rho + dt * k3, u1, beta_half[2 * i + 2])
            rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if (i + 1) % record_every == 0 or i == n_steps - 1:
                record(rho, t_abs + (i + 1) * dt)
        t_abs += n_steps * dt

    if check_invariants:
        check_state(rho, force=True)
        if trace_dev > TRACE_TOL or herm_dev > HERM_TOL or min_eig < -EIG_TOL:
            raise InvariantViolationError(
                f"invariant drift: trace {trace_dev:.2e}, herm {herm_dev:.2e}, "
                f"min eig {min_eig:.2e}; reduce dt"
            )

    pops = {k: np.asarray(v) for k, v in rec_lists.items()}
    n_res = pops.pop("n_res")
    extra: dict = {"space_dims": gen.space.dims}
    if "n_absorber" in pops:
        extra["n_absorber"] = pops.pop("n_absorber")
    if "n_res_B" in pops:
        extra["n_res_B"] = pops.pop("n_res_B")
    if "p_e_B" in pops:
        extra["p_e_B"] = pops.pop("p_e_B")

    kappa_c = gen.meta["device"].kappa_E_c
    return SimResult(
        t=np.asarray(t_list),
        amps=np.asarray(amp_list, dtype=complex),
        power=kappa_c * n_res,
        populations=pops,
        n_res=n_res,
        final_rho=rho,
        device=gen.meta["device"],
        trace_dev_max=float(trace_dev),
        herm_dev_max=float(herm_dev),
        min_eigenvalue=float(min_eig) if min_eig != np.inf else 0.0,
        extra=extra,
        rho_trajectory=np.array(rho_traj) if rho_traj is not None else None,
    )


# ---------------------------------------------------------------------------
# Temporal-mode capture (cascaded absorber)


@dataclass
class CapturedMode:
    """State of the output temporal mode selected by a normalized filter."""

    filter_times: np.ndarray
    filter_values: np.ndarray
    rho_a: np.ndarray
    capture_infidelity: float
    epsilon: float
    result: SimResult | None = None

    def __post_init__(self):
        dt = float(self.filter_times[1] - self.filter_times[0])
        norm = float(np.trapezoid(np.abs(self.filter_values) ** 2, dx=dt))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("capture filter must have unit energy")
        w = np.linalg.eigvalsh(0.5 * (self.rho_a + self.rho_a.conj().T))
        if w[0] < -1e-8 or abs(np.trace(self.rho_a).real - 1.0) > 1e-6:
            raise ValueError("captured state is not a valid density matrix")


def absorber_coupling(f_times: np.ndarray, f_values: np.ndarray, epsilon: float = CAPTURE_EPSILON):
    """beta(t) = -f(t)/sqrt(max(int_0^t |f|^2, eps)).

    The floor regularizes the coupling where the accumulated filter energy
    vanishes; the returned callable evaluates on arbitrary time arrays.
    """
    f_times = np.asarray(f_times, dtype=float)
    f_values = np.asarray(f_values, dtype=complex)
    dt = float(f_times[1] - f_times[0])
    seg = 0.5 * (np.abs(f_values[1:]) ** 2 + np.abs(f_values[:-1]) ** 2) * dt
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    denom = np.sqrt(np.maximum(cum, epsilon))

    def beta(tt):
        fr = np.interp(tt, f_times, f_values.real, left=0.0, right=0.0)
        fi = np.interp(tt, f_times, f_values.imag, left=0.0, right=0.0)
        dd = np.interp(tt, f_times, denom, left=float(denom[0]), right=float(denom[-1]))
        return -(fr + 1j * fi) / dd

    return beta


def capture_mode(
    device: DeviceParams,
    sequence: PulseSequence,
    f_times: np.ndarray,
    f_values: np.ndarray,
    hspec: HilbertSpec | None = None,
    response: SidebandResponse | None = None,
    rho0: np.ndarray | None = None,
    dt: float = 2.5e-10,
    absorber_dim: int | None = None,
    tail: float | None = None,
    chirp_on: bool = True,
) -> CapturedMode:
    """Run an emission with a cascaded absorber matched to the filter f(t).

    The absorber picks up exactly the f-component of the output field; the
    returned state is its reduced density matrix at the final time.
    """
    hspec = hspec or HilbertSpec()
    levels = hspec.qubit_levels
    nb = absorber_dim or hspec.fock_dim
    base = build_effective_model(device, sequence, chirp_on=chirp_on, hspec=hspec, response=response, tail=tail)
    small_dim = base.space.dim
    space = Space((levels, hspec.fock_dim, nb))

    def lift(op):
        return np.kron(op, np.eye(nb, dtype=complex))

    steps = []
    for s in base.steps:
        if isinstance(s, UnitaryStep):
            steps.append(UnitaryStep(lift(s.U), s.label))
        else:
            steps.append(Segment(s.duration, [(fn, lift(op)) for fn, op in s.channels], s.label))

    b = space.embed({2: destroy(nb)})
    c1 = lift(base.aout_op)
    beta = absorber_coupling(f_times, f_values)
    c_ops = [c1] + [lift(c) for c in base.c_ops[1:]]  # base.c_ops[0] is c1 itself

    rec = {k: lift(op) for k, op in base.record_ops.items()}
    rec["n_absorber"] = b.conj().T @ b

    gen = Generator(
        space=space,
        h_static=np.zeros((space.dim, space.dim), dtype=complex),
        c_ops=c_ops,
        steps=steps,
        record_ops=rec,
        aout_op=c1,
        cascade=CascadeTerm(c1=c1, b=b, beta=beta),
        meta={"tier": "effective+absorber", "device": device},
    )
    if rho0 is not None and rho0.shape[0] == small_dim:
        big0 = np.kron(rho0, ground_state_of(nb))
    else:
        big0 = rho0
    result = evolve(gen, rho0=big0, dt=dt)

    rho_a = partial_trace(result.final_rho, space.dims, keep=(2,))
    rho_a = 0.5 * (rho_a + rho_a.conj().T)
    rho_a = rho_a / np.trace(rho_a).real

    # energy that escaped past the absorber = initial - final - all other sinks
    report = result.energy_report()
    residual_flying = max(float(report["initial_excitation"]
                                - report["final_excitation"]
                                - report["internal_leakage"]
                                - report["qubit_relaxation"]), 0.0)

    return CapturedMode(
        filter_times=np.asarray(f_times, dtype=float),
        filter_values=np.asarray(f_values, dtype=complex),
        rho_a=rho_a,
        capture_infidelity=residual_flying,
        epsilon=CAPTURE_EPSILON,
        result=result,
    )


# ---------------------------------------------------------------------------
# Protocols


def pi_pulse_sequence(theta: float, phi: float, pulse: FluxPulse) -> PulseSequence:
    return PulseSequence([Rotation("ge", theta, phi), FluxDrive(pulse)])


def time_bin_sequence(theta: float, phi: float, pulse1: FluxPulse, pulse2: FluxPulse, gap: float) -> PulseSequence:
    return PulseSequence(
        [
            Rotation("ge", theta, phi),
            Rotation("ef", math.pi),
            Rotation("ge", math.pi),
            FluxDrive(pulse1),
            Delay(gap),
            Rotation("ef", math.pi),
            FluxDrive(pulse2),
        ]
    )


def run_protocol(
    device: DeviceParams,
    protocol: str,
    rabi_theta: float,
    rabi_phi: float = 0.0,
    pulse: FluxPulse | None = None,
    pulse2: FluxPulse | None = None,
    gap: float = 100e-9,
    hspec: HilbertSpec | None = None,
    response: SidebandResponse | None = None,
    dt: float = 2.5e-10,
    tier: str = "effective",
    chirp_on: bool = True,
    tail: float | None = None,
) -> SimResult:
    """Single-rail or dual-rail time-bin emission on one node."""
    if protocol not in ("single_rail", "time_bin"):
        raise ValueError("protocol must be 'single_rail' or 'time_bin'")
    if pulse is None:
        raise ValueError("an emission pulse is required")
    hspec = hspec or HilbertSpec()
    if protocol == "single_rail":
        seq = pi_pulse_sequence(rabi_theta, rabi_phi, pulse)
    else:
        if hspec.qubit_levels != 3:
            raise ValueError("time_bin needs the f level")
        seq = time_bin_sequence(rabi_theta, rabi_phi, pulse, pulse2 or pulse, gap)
    if tier == "effective":
        gen = build_effective_model(device, seq, chirp_on=chirp_on, hspec=hspec, response=response, tail=tail)
    elif tier == "flux":
        gen = build_flux_model(device, seq, hspec=hspec, tail=tail)
    else:
        raise ValueError(tier)
    result = evolve(gen, dt=dt)
    dims = result.extra["space_dims"]
    top = partial_trace(result.final_rho, dims, keep=(1,))[-1, -1].real
    result.extra["top_fock_population"] = float(top)
    return result


def pitch_catch(
    device_A: DeviceParams,
    device_B: DeviceParams,
    theta: float,
    phi: float,
    pulse_A: FluxPulse,
    pulse_B: FluxPulse,
    channel_loss: float = 0.0,
    catch_delay: float = 0.0,
    hspec: HilbertSpec | None = None,
    dt: float = 2.5e-10,
    dissipation: bool = True,
    tail: float | None = None,
):
    """Emit at node A, absorb at node B over a lossy unidirectional channel.

    Returns (rho_qubit_B, SimResult).  For a time-symmetric photon the catch
    drive is the emission drive itself, optionally delayed.
    """
    if not 0.0 <= channel_loss <= 1.0:
        raise ValueError("channel_loss must be in [0, 1]")
    hspec = hspec or HilbertSpec(qubit_levels=2, node_count=2)
    levels = hspec.qubit_levels
    nf = hspec.fock_dim
    space = Space((levels, nf, levels, nf))

    def node_ops(dev, iq, ir):
        a = space.embed({ir: destroy(nf)})
        sm = space.embed({iq: qubit_lower(levels, "ge")})
        pe = space.embed({iq: projector(levels, 1)})
        cs = [
            math.sqrt(dev.kappa_E_i) * a,
            math.sqrt(1.0 / dev.T1_ge) * sm,
            math.sqrt(2.0 * dev.gamma_phi_ge) * pe,
        ]
        if levels >= 3:
            sm_ef = space.embed({iq: qubit_lower(levels, "ef")})
            pf = space.embed({iq: projector(levels, 2)})
            cs += [math.sqrt(1.0 / dev.T1_ef) * sm_ef, math.sqrt(2.0 * dev.gamma_phi_ef) * pf]
        return a, sm, pe, cs

    aA, smA, peA, csA = node_ops(device_A, 0, 1)
    aB, smB, peB, csB = node_ops(device_B, 2, 3)

    t_amp = math.sqrt(1.0 - channel_loss)
    c1 = t_amp * math.sqrt(device_A.kappa_E_c) * aA
    c2 = math.sqrt(device_B.kappa_E_c) * aB
    c_ops = [c1 + c2]
    if channel_loss > 0:
        c_ops.append(math.sqrt(channel_loss * device_A.kappa_E_c) * aA)
    if dissipation:
        c_ops += csA + csB
    h_casc = (0.5 / 1j) * (c2.conj().T @ c1 - c1.conj().T @ c2)

    respA = SidebandResponse(device_A)
    respB = SidebandResponse(device_B)
    hxA, hyA = _exchange_operators(aA, smA)
    hxB, hyB = _exchange_operators(aB, smB)

    channels = _flux_drive_channels(pulse_A, respA, hxA, hyA, peA, chirped=True) + _flux_drive_channels(
        pulse_B, respB, hxB, hyB, peB, chirped=True, t_off=catch_delay
    )
    if tail is None:
        tail = 6.0 / min(device_A.kappa_E_total, device_B.kappa_E_total)
    duration = max(pulse_A.duration, catch_delay + pulse_B.duration) + tail
    steps = [
        UnitaryStep(space.embed({0: rotation_unitary(levels, "ge", theta, phi)})),
        Segment(duration, channels, label="pitch-catch"),
    ]

    rec = {
        "n_res": aA.conj().T @ aA,
        "p_g": space.embed({0: projector(levels, 0)}),
        "p_e": peA,
        "p_f": space.embed({0: projector(levels, 2)}) if levels >= 3 else np.zeros((space.dim, space.dim), dtype=complex),
        "n_res_B": aB.conj().T @ aB,
        "p_e_B": peB,
    }
    gen = Generator(
        space=space,
        h_static=h_casc,
        c_ops=c_ops,
        steps=steps,
        record_ops=rec,
        aout_op=c1 + c2,
        meta={"tier": "pitch-catch", "device": device_A},
    )
    result = evolve(gen, dt=dt)
    rho_B = partial_trace(result.final_rho, space.dims, keep=(2,))
    rho_B = 0.5 * (rho_B + rho_B.conj().T)
    rho_B = rho_B / np.trace(rho_B).real
    return rho_B, result
