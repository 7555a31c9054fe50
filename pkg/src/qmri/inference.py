"""Dictionary matching, proton-density estimation, and evaluation metrics.

Voxel signals carry an arbitrary global phase, so every consumer first
rotates each voxel so its leading subspace coefficient is real and
nonnegative.  Matching then maximises the correlation magnitude against
unit-norm dictionary entries, which for nonnegative per-voxel scales is
equivalent to the nearest-neighbour distance search.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .epg import Dictionary
from .forward import Tsmi
from .subspace import SubspaceModel, compress

SNR_CLAMP_DB = 300.0


def phase_align(signals):
    """Rotate each column so its first coefficient is real and nonnegative.

    Returns (aligned, phases) where `phases` holds the removed angle per
    column; multiplying a column by exp(1j*phase) undoes the alignment.
    Columns whose first coefficient is exactly zero pass through unchanged
    with a recorded phase of 0.
    """
    sig = np.asarray(signals, dtype=np.complex128)
    vec = sig.ndim == 1
    if vec:
        sig = sig[:, None]
    first = sig[0]
    phases = np.angle(first)
    phases[first == 0] = 0.0
    aligned = sig * np.exp(-1j * phases)[None, :]
    if vec:
        return aligned[:, 0], phases[0]
    return aligned, phases


@dataclass
class QuantMaps:
    """Per-voxel parameter maps: T1/T2 in milliseconds plus proton density."""

    t1_ms: np.ndarray
    t2_ms: np.ndarray
    pd: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not (self.t1_ms.shape == self.t2_ms.shape == self.pd.shape):
            raise ValueError("map shapes differ")

    @property
    def grid(self):
        return self.t1_ms.shape

    def foreground(self):
        if self.mask is not None:
            return self.mask.astype(bool)
        peak = self.pd.max()
        return self.pd > 1e-6 * peak if peak > 0 else np.zeros_like(self.pd, bool)


@dataclass
class CompressedDictionary:
    """Dictionary projected into the subspace, phase-aligned and unit-norm.

    `atoms_c[:, j]` is the aligned, renormalised projection of entry j;
    `renorm[j]` is the norm the projection had before renormalisation, used
    to refer proton-density estimates back to unit-norm temporal responses.
    """

    atoms_c: np.ndarray
    grid: list
    renorm: np.ndarray

    def __post_init__(self):
        norms = np.linalg.norm(self.atoms_c, axis=0)
        if self.atoms_c.size and not np.allclose(norms, 1.0, atol=1e-12):
            raise ValueError("dictionary columns must be unit norm")

    @classmethod
    def from_dictionary(cls, dictionary: Dictionary, model: SubspaceModel):
        proj = compress(model, dictionary.atoms)
        renorm = np.linalg.norm(proj, axis=0)
        if np.any(renorm == 0):
            raise ValueError("dictionary entry vanishes under compression")
        aligned, _ = phase_align(proj / renorm[None, :])
        return cls(atoms_c=aligned, grid=list(dictionary.grid), renorm=renorm)

    @property
    def n_entries(self):
        return self.atoms_c.shape[1]


def dict_match(dict_c: CompressedDictionary, x: Tsmi,
               chunk: int = 65536) -> QuantMaps:
    """Exhaustive nearest-neighbour matching of every voxel.

    Each voxel is phase-aligned, correlated against all dictionary columns,
    and assigned the parameters of the best |correlation| match (ties go to
    the lowest index).  Proton density is the real part of the winning
    correlation divided by the entry's renormalisation factor, clamped at 0.
    """
    if dict_c.n_entries == 0:
        raise ValueError("empty dictionary")
    s, n = x.coeffs.shape
    if dict_c.atoms_c.shape[0] != s:
        raise ValueError("subspace rank mismatch")
    h, w = x.spatial
    t1 = np.empty(n)
    t2 = np.empty(n)
    pd = np.empty(n)
    t1_grid = np.array([p.t1_ms for p in dict_c.grid])
    t2_grid = np.array([p.t2_ms for p in dict_c.grid])
    for start in range(0, n, chunk):
        cols = x.coeffs[:, start:start + chunk]
        aligned, _ = phase_align(cols)
        corr = dict_c.atoms_c.conj().T @ aligned
        best = np.argmax(np.abs(corr), axis=0)
        picked = corr[best, np.arange(corr.shape[1])]
        sl = slice(start, start + cols.shape[1])
        t1[sl] = t1_grid[best]
        t2[sl] = t2_grid[best]
        pd[sl] = np.maximum(picked.real / dict_c.renorm[best], 0.0)
    return QuantMaps(t1_ms=t1.reshape(h, w), t2_ms=t2.reshape(h, w),
                     pd=pd.reshape(h, w))


def _gaussian_window(size=8, sigma=1.5):
    offs = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (offs / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, truth, window_size=8, sigma=1.5):
    """Mean structural similarity with a Gaussian window, valid-mode.

    Dynamic range is taken from the reference image; the standard
    stabilising constants (0.01·L)² and (0.03·L)² are used.
    """
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("images must share a 2D shape")
    if min(a.shape) < window_size:
        raise ValueError("image smaller than SSIM window")
    drange = float(b.max() - b.min())
    if drange == 0.0:
        drange = 1.0
    c1 = (0.01 * drange) ** 2
    c2 = (0.03 * drange) ** 2
    win = _gaussian_window(window_size, sigma)

    def smooth(img):
        return fftconvolve(img, win, mode="valid")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a ** 2
    var_b = smooth(b * b) - mu_b ** 2
    cov = smooth(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def snr_db(truth, pred):
    """20·log10(‖truth‖/‖error‖), clamped to ±300 dB."""
    truth = np.asarray(truth)
    err = np.linalg.norm(truth - np.asarray(pred))
    ref = np.linalg.norm(truth)
    if err == 0:
        return SNR_CLAMP_DB
    if ref == 0:
        return -SNR_CLAMP_DB
    return float(np.clip(20.0 * np.log10(ref / err), -SNR_CLAMP_DB,
                         SNR_CLAMP_DB))


def nrmse(pred, truth):
    """Global relative error ‖pred−truth‖/‖truth‖."""
    ref = np.linalg.norm(truth)
    if ref == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(np.asarray(pred) - np.asarray(truth)) / ref)


def nrmse_columns(pred, truth):
    """Mean over columns of per-column relative error (fingerprint form)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    ref = np.linalg.norm(truth, axis=0)
    if np.any(ref == 0):
        raise ValueError("reference column has zero norm")
    return float(np.mean(np.linalg.norm(pred - truth, axis=0) / ref))


@dataclass
class MetricsReport:
    kind: str
    values: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "values": self.values}


def _map_metrics(pred, truth, mask, window_size=8):
    diff = np.abs(pred - truth)[mask]
    ref = truth[mask]
    out = {
        "mae": float(diff.mean()),
        "nrmse": float(np.linalg.norm((pred - truth)[mask])
                       / max(np.linalg.norm(ref), np.finfo(float).tiny)),
        "snr_db": snr_db(ref, pred[mask]),
    }
    pos = ref > 0
    out["mape_pct"] = float((diff[pos] / ref[pos]).mean() * 100.0) if pos.any() else 0.0
    ssim_map = ssim(pred, truth, window_size=window_size)
    # average SSIM over windows centred on foreground
    half = (window_size - 1) // 2
    hh, ww = ssim_map.shape
    centers = mask[half:half + hh, half:half + ww]
    out["ssim"] = float(ssim_map[centers].mean()) if centers.any() \
        else float(ssim_map.mean())
    return out


def metrics(pred, truth) -> MetricsReport:
    """Evaluation metrics for a map set or a coefficient image series."""
    if isinstance(pred, Tsmi) and isinstance(truth, Tsmi):
        if pred.coeffs.shape != truth.coeffs.shape:
            raise ValueError("shape mismatch")
        return MetricsReport(kind="tsmi", values={
            "nrmse": nrmse(pred.coeffs, truth.coeffs),
            "snr_db": snr_db(truth.coeffs, pred.coeffs),
        })
    if isinstance(pred, QuantMaps) and isinstance(truth, QuantMaps):
        if pred.grid != truth.grid:
            raise ValueError("shape mismatch")
        mask = truth.foreground()
        if not mask.any():
            raise ValueError("empty foreground mask")
        return MetricsReport(kind="maps", values={
            "t1": _map_metrics(pred.t1_ms, truth.t1_ms, mask),
            "t2": _map_metrics(pred.t2_ms, truth.t2_ms, mask),
            "pd": _map_metrics(pred.pd, truth.pd, mask),
        })
    raise TypeError("pred and truth must both be QuantMaps or both Tsmi")
