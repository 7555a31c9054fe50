"""Single-coil Cartesian acquisition operator and measurement synthesis.

The forward map takes a compressed image series X (s x n), lifts it through
the subspace basis, applies a unitary 2D DFT per frame and keeps the masked
k-space locations.  The unitary convention bounds the operator norm by 1,
which lets the reconstruction start from step size 1 safely.  The adjoint
zero-fills, inverse-transforms and projects back to the subspace.
"""

from dataclasses import dataclass

import numpy as np

from .subspace import SubspaceModel, compress, expand


@dataclass
class Tsmi:
    """Dimension-reduced image time-series: row i is one coefficient image."""

    coeffs: np.ndarray        # s x n complex
    spatial: tuple            # (H, W) with H*W == n

    def __post_init__(self):
        h, w = self.spatial
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != h * w:
            raise ValueError("coefficient matrix does not match spatial dims")

    def component_image(self, i: int) -> np.ndarray:
        return self.coeffs[i].reshape(self.spatial)


@dataclass
class SamplingPattern:
    masks: np.ndarray         # T x H x W boolean
    indices: np.ndarray       # T x k flat sample locations, each row sorted
    seed: int
    undersampling: float      # mean mask density == k / (H*W)
    scheme: str

    @property
    def n_frames(self) -> int:
        return self.masks.shape[0]

    @property
    def grid(self) -> tuple:
        return self.masks.shape[1:]


@dataclass
class KspaceData:
    samples: np.ndarray       # T x k complex, rows ordered like pattern.indices
    pattern: SamplingPattern
    snr_db: float | None = None


def make_pattern(grid: tuple, n_frames: int, fraction: float, scheme: str,
                 seed: int, vd_sigma: float = 0.25) -> SamplingPattern:
    """Draw per-frame k-space masks with an exact per-frame sample count.

    `scheme` is "uniform-random" or "variable-density"; the latter weights
    locations by a radial Gaussian in (unshifted) DFT frequency so samples
    concentrate near the k-space centre.  The DC location is always kept.
    """
    h, w = grid
    n = h * w
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = int(round(fraction * n))
    if k < 1:
        raise ValueError("fraction yields zero samples per frame")

    if scheme == "uniform-random":
        weights = np.ones(n, dtype=np.float64)
    elif scheme == "variable-density":
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        r2 = fy * fy + fx * fx
        weights = np.exp(-r2 / (2.0 * vd_sigma * vd_sigma)).ravel()
    else:
        raise ValueError(f"unknown sampling scheme {scheme!r}")
    weights = weights / weights.sum()

    rng = np.random.default_rng(seed)
    masks = np.zeros((n_frames, h, w), dtype=bool)
    indices = np.zeros((n_frames, k), dtype=np.int64)
    for t in range(n_frames):
        if k == n:
            chosen = np.arange(n, dtype=np.int64)
        else:
            chosen = rng.choice(n, size=k, replace=False, p=weights)
            if 0 not in chosen:
                # Swap the least-likely pick for DC, keeping the count exact.
                chosen[int(np.argmin(weights[chosen]))] = 0
        chosen = np.sort(chosen)
        indices[t] = chosen
        masks[t].flat[chosen] = True
    return SamplingPattern(masks=masks, indices=indices, seed=seed,
                           undersampling=k / n, scheme=scheme)


def apply_forward(model: SubspaceModel, x: Tsmi,
                  pattern: SamplingPattern) -> KspaceData:
    """Masked unitary DFT of the lifted series: one sample row per frame."""
    h, w = x.spatial
    if pattern.grid != (h, w):
        raise ValueError("pattern grid does not match image grid")
    if pattern.n_frames != model.n_frames:
        raise ValueError("pattern frame count does not match basis")
    series = expand(model, x.coeffs).reshape(model.n_frames, h, w)
    kspace = np.fft.fft2(series, axes=(-2, -1), norm="ortho")
    flat = kspace.reshape(model.n_frames, h * w)
    samples = np.take_along_axis(flat, pattern.indices, axis=1)
    return KspaceData(samples=samples, pattern=pattern, snr_db=None)


def apply_adjoint(model: SubspaceModel, data: KspaceData) -> Tsmi:
    """Zero-fill, inverse unitary DFT per frame, then project to the subspace."""
    pattern = data.pattern
    h, w = pattern.grid
    n_frames = pattern.n_frames
    if data.samples.shape != pattern.indices.shape:
        raise ValueError("sample block does not match the sampling pattern")
    if n_frames != model.n_frames:
        raise ValueError("pattern frame count does not match basis")
    flat = np.zeros((n_frames, h * w), dtype=np.complex128)
    np.put_along_axis(flat, pattern.indices, data.samples, axis=1)
    images = np.fft.ifft2(flat.reshape(n_frames, h, w), axes=(-2, -1),
                          norm="ortho")
    coeffs = compress(model, images.reshape(n_frames, h * w))
    return Tsmi(coeffs=coeffs, spatial=(h, w))


def add_noise(data: KspaceData, snr_db: float | None, seed: int) -> KspaceData:
    """Add complex white Gaussian noise scaled to the exact requested SNR.

    The realised noise vector is rescaled so 20*log10(||Y|| / ||noise||)
    equals `snr_db` exactly; `None` (or +inf) returns the data unchanged.
    """
    if snr_db is None or np.isinf(snr_db):
        return KspaceData(samples=data.samples.copy(), pattern=data.pattern,
                          snr_db=None)
    energy = np.linalg.norm(data.samples)
    if energy == 0.0:
        raise ValueError("cannot scale noise against zero-energy data")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(data.samples.shape) \
        + 1j * rng.standard_normal(data.samples.shape)
    noise *= energy / (np.linalg.norm(noise) * 10.0 ** (snr_db / 20.0))
    return KspaceData(samples=data.samples + noise, pattern=data.pattern,
                      snr_db=snr_db)
