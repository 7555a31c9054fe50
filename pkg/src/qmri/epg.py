"""Extended-phase-graph simulation of gradient-spoiled fingerprint sequences.

The simulator tracks configuration states (F+, F-, Z) per dephasing order.
Each repetition applies: RF mixing about the x axis, relaxation up to the
echo time (where the order-0 transverse state is recorded), relaxation over
the rest of TR, and one configuration-order shift from the spoiler gradient.
An optional adiabatic inversion precedes the first excitation: Z is negated,
then recovers for the inversion delay.

All state updates are written as elementwise array expressions over a
trailing atom axis, so simulating a grid of (T1, T2) pairs in one call is
bitwise identical to simulating each pair on its own.
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SequenceParams:
    """Excitation schedule: per-repetition flip angles plus fixed timings."""

    flip_deg: np.ndarray
    tr_ms: float
    te_ms: float
    inversion: bool = False
    inversion_time_ms: float = 0.0

    def __post_init__(self):
        self.flip_deg = np.asarray(self.flip_deg, dtype=np.float64)
        if self.flip_deg.ndim != 1 or self.flip_deg.size < 1:
            raise ValueError("flip schedule must be a nonempty vector")
        if np.any(self.flip_deg < 0.0) or np.any(self.flip_deg > 180.0):
            raise ValueError("flip angles must lie in [0, 180] degrees")
        if not (self.tr_ms > self.te_ms >= 0.0):
            raise ValueError("need tr_ms > te_ms >= 0")
        if self.inversion_time_ms < 0.0:
            raise ValueError("inversion delay must be nonnegative")

    @property
    def n_frames(self) -> int:
        return self.flip_deg.size


@dataclass
class NmrParams:
    """Relaxation times of one tissue: the two quantities being mapped."""

    t1_ms: float
    t2_ms: float

    def __post_init__(self):
        if not (self.t1_ms > 0.0 and self.t2_ms > 0.0):
            raise ValueError("relaxation times must be positive")


@dataclass
class Fingerprint:
    """Complex echo train of one tissue; `norm_factor` holds the Euclidean
    norm removed by normalisation (None while unnormalised)."""

    signal: np.ndarray
    norm_factor: float | None = None

    def normalised(self) -> "Fingerprint":
        nrm = float(np.linalg.norm(self.signal))
        if nrm == 0.0:
            raise ValueError("cannot normalise an all-zero fingerprint")
        return Fingerprint(self.signal / nrm, norm_factor=nrm)


@dataclass
class Dictionary:
    """Unit-norm fingerprints over a (T1, T2) grid, T2-fastest column order."""

    atoms: np.ndarray            # T x d complex, unit-norm columns
    grid: list                   # d NmrParams, grid[j] generated column j
    t1_axis: np.ndarray
    t2_axis: np.ndarray
    norm_factors: np.ndarray = field(default=None)

    @property
    def n_frames(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


def paper_flip_schedule(n_frames: int) -> SequenceParams:
    """Inversion-prepared schedule: flip ramps 1..70 degrees over the first
    ~45% of frames, back down to 1 by ~68%, then stays at 1.

    Breakpoints scale proportionally with the frame count (the canonical
    880-frame train breaks at 400 and 600).
    """
    if n_frames < 3:
        raise ValueError("schedule needs at least 3 frames")
    n_up = math.ceil(400 * n_frames / 880)
    n_down_end = math.ceil(600 * n_frames / 880)
    flips = np.ones(n_frames, dtype=np.float64)
    flips[:n_up] = np.linspace(1.0, 70.0, n_up)
    flips[n_up:n_down_end] = np.linspace(70.0, 1.0, n_down_end - n_up + 1)[1:]
    return SequenceParams(
        flip_deg=flips,
        tr_ms=12.0,
        te_ms=2.0,
        inversion=True,
        inversion_time_ms=18.0,
    )


def _simulate_grid(seq: SequenceParams, t1_ms, t2_ms, states: int) -> np.ndarray:
    """Echo signals for a batch of (T1, T2) pairs.

    Returns a (T, n) complex array, column i simulated with (t1_ms[i],
    t2_ms[i]).  Column values do not depend on what else is in the batch.
    """
    if states < 2:
        raise ValueError("need at least 2 configuration states")
    t1 = np.atleast_1d(np.asarray(t1_ms, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2_ms, dtype=np.float64))
    if t1.shape != t2.shape or t1.ndim != 1:
        raise ValueError("t1/t2 arrays must be matching vectors")
    if np.any(t1 <= 0.0) or np.any(t2 <= 0.0):
        raise ValueError("relaxation times must be positive")

    n = t1.size
    n_frames = seq.n_frames
    # A spoiler per TR occupies at most one new order per repetition.
    k_max = min(states, n_frames + 1)

    e1_te = np.exp(-seq.te_ms / t1)
    e2_te = np.exp(-seq.te_ms / t2)
    rem = seq.tr_ms - seq.te_ms
    e1_rem = np.exp(-rem / t1)
    e2_rem = np.exp(-rem / t2)

    f_plus = np.zeros((k_max, n), dtype=np.complex128)
    f_minus = np.zeros((k_max, n), dtype=np.complex128)
    z = np.zeros((k_max, n), dtype=np.complex128)
    if seq.inversion:
        z[0] = 1.0 - 2.0 * np.exp(-seq.inversion_time_ms / t1)
    else:
        z[0] = 1.0

    signal = np.zeros((n_frames, n), dtype=np.complex128)
    alphas = np.deg2rad(seq.flip_deg)

    for t in range(n_frames):
        a = alphas[t]
        cos_half2 = math.cos(a / 2.0) ** 2
        sin_half2 = math.sin(a / 2.0) ** 2
        sin_a = math.sin(a)
        cos_a = math.cos(a)

        # RF mixing about x: acts identically on every order.
        fp = cos_half2 * f_plus + sin_half2 * f_minus + (-1j * sin_a) * z
        fm = sin_half2 * f_plus + cos_half2 * f_minus + (1j * sin_a) * z
        zz = (-0.5j * sin_a) * f_plus + (0.5j * sin_a) * f_minus + cos_a * z
        f_plus, f_minus, z = fp, fm, zz

        # Relax to the echo time and record the coherent transverse state.
        f_plus *= e2_te
        f_minus *= e2_te
        z *= e1_te
        z[0] += 1.0 - e1_te
        signal[t] = f_plus[0]

        # Relax over the remainder of TR.
        f_plus *= e2_rem
        f_minus *= e2_rem
        z *= e1_rem
        z[0] += 1.0 - e1_rem

        # Spoiler gradient: shift configuration orders by one.
        f_plus[1:] = f_plus[:-1].copy()
        f_minus[:-1] = f_minus[1:].copy()
        f_minus[-1] = 0.0
        f_plus[0] = np.conj(f_minus[0])

    return signal


def simulate_fingerprint(seq: SequenceParams, theta: NmrParams,
                         states: int = 50) -> Fingerprint:
    """Simulate the (unnormalised) complex echo train for one tissue."""
    sig = _simulate_grid(seq, [theta.t1_ms], [theta.t2_ms], states)
    return Fingerprint(signal=sig[:, 0], norm_factor=None)


def build_dictionary(seq: SequenceParams, t1_axis, t2_axis,
                     states: int = 50) -> Dictionary:
    """Simulate and normalise one atom per (T1, T2) pair, T2 varying fastest."""
    t1_axis = np.asarray(t1_axis, dtype=np.float64)
    t2_axis = np.asarray(t2_axis, dtype=np.float64)
    for name, axis in (("t1", t1_axis), ("t2", t2_axis)):
        if axis.ndim != 1 or axis.size == 0:
            raise ValueError(f"{name} axis must be a nonempty vector")
        if np.any(axis <= 0.0):
            raise ValueError(f"{name} axis must be positive")
        if axis.size > 1 and np.any(np.diff(axis) <= 0.0):
            raise ValueError(f"{name} axis must be strictly increasing")

    t1_grid = np.repeat(t1_axis, t2_axis.size)
    t2_grid = np.tile(t2_axis, t1_axis.size)
    signals = _simulate_grid(seq, t1_grid, t2_grid, states)
    norms = np.linalg.norm(signals, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("grid contains an all-zero fingerprint")
    atoms = signals / norms
    grid = [NmrParams(float(a), float(b)) for a, b in zip(t1_grid, t2_grid)]
    return Dictionary(atoms=atoms, grid=grid, t1_axis=t1_axis,
                      t2_axis=t2_axis, norm_factors=norms)


def log_axis(lo: float, hi: float, steps: int) -> np.ndarray:
    """Geometrically spaced axis used by the desk-scale parameter grids."""
    if steps == 1:
        return np.array([lo], dtype=np.float64)
    return np.geomspace(lo, hi, steps)


def linear_axis(lo: float, hi: float, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([lo], dtype=np.float64)
    return np.linspace(lo, hi, steps)


def axes_from_config(grid_cfg: dict):
    make = log_axis if grid_cfg["spacing"] == "log" else linear_axis
    t1 = make(grid_cfg["t1_min_ms"], grid_cfg["t1_max_ms"],
              grid_cfg["t1_steps_count"])
    t2 = make(grid_cfg["t2_min_ms"], grid_cfg["t2_max_ms"],
              grid_cfg["t2_steps_count"])
    return t1, t2


def sequence_from_config(seq_cfg: dict) -> SequenceParams:
    seq = paper_flip_schedule(seq_cfg["frames_count"])
    return SequenceParams(
        flip_deg=seq.flip_deg,
        tr_ms=seq_cfg["tr_ms"],
        te_ms=seq_cfg["te_ms"],
        inversion=seq_cfg["inversion"],
        inversion_time_ms=seq_cfg["inversion_time_ms"],
    )
