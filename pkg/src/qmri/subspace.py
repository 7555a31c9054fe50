"""Low-rank temporal subspace learned from the fingerprint dictionary.

The basis comes from an eigendecomposition of D D^H (T x T, cheap since
T << d).  Column phases are fixed deterministically: each basis vector is
rotated so its largest-magnitude entry is real and positive, which pins down
the otherwise arbitrary eigenvector phase and keeps runs bit-reproducible.

The model also carries an alignment reference: a direction in coefficient
space whose inner product with every dictionary entry stays away from zero,
so that rotating a signal by the angle of that inner product is a smooth,
sign-stable operation across the whole parameter range.  Aligning against a
single fixed coordinate instead (e.g. the first coefficient) flips sign
wherever that coordinate crosses zero on the fingerprint manifold, which
poisons any regression trained on aligned signals.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize


@dataclass
class SubspaceModel:
    basis: np.ndarray         # T x s, orthonormal columns
    eigenvalues: np.ndarray   # s nonnegative values, descending
    energy_fraction: float    # captured share of total spectrum energy
    align_ref: np.ndarray | None = field(default=None)  # s, phase reference

    @property
    def n_frames(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def _atoms_of(dictionary) -> np.ndarray:
    atoms = getattr(dictionary, "atoms", dictionary)
    atoms = np.asarray(atoms)
    if atoms.ndim != 2:
        raise ValueError("expected a T x d matrix of atoms")
    return atoms


def fit_subspace(dictionary, s: int) -> SubspaceModel:
    """Top-s eigenvectors of D D^H with deterministic column phases."""
    atoms = _atoms_of(dictionary)
    n_frames, n_atoms = atoms.shape
    if not 1 <= s <= min(n_frames, n_atoms):
        raise ValueError(f"rank {s} out of range for {n_frames}x{n_atoms}")

    gram = atoms @ atoms.conj().T
    total_energy = float(np.trace(gram).real)
    eigvals, eigvecs = scipy.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1][:s]
    vals = np.clip(eigvals[order], 0.0, None)
    basis = eigvecs[:, order].astype(np.complex128)

    for j in range(s):
        col = basis[:, j]
        i = int(np.argmax(np.abs(col)))
        mag = abs(col[i])
        if mag > 0.0:
            basis[:, j] = col * (np.conj(col[i]) / mag)

    energy = float(vals.sum() / total_energy) if total_energy > 0.0 else 0.0
    return SubspaceModel(basis=basis, eigenvalues=vals,
                         energy_fraction=min(energy, 1.0))


def compress(model: SubspaceModel, signals) -> np.ndarray:
    """Project T-dimensional signals down to s coefficients: V^H @ signals."""
    signals = np.asarray(signals)
    vec_in = signals.ndim == 1
    if vec_in:
        signals = signals[:, None]
    if signals.shape[0] != model.n_frames:
        raise ValueError(
            f"signals have {signals.shape[0]} rows, basis expects "
            f"{model.n_frames}")
    out = model.basis.conj().T @ signals
    return out[:, 0] if vec_in else out


def expand(model: SubspaceModel, coeffs) -> np.ndarray:
    """Lift s-dimensional coefficients back to the full series: V @ coeffs."""
    coeffs = np.asarray(coeffs)
    vec_in = coeffs.ndim == 1
    if vec_in:
        coeffs = coeffs[:, None]
    if coeffs.shape[0] != model.rank:
        raise ValueError(
            f"coeffs have {coeffs.shape[0]} rows, basis rank is {model.rank}")
    out = model.basis @ coeffs
    return out[:, 0] if vec_in else out
