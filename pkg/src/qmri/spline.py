"""Piecewise-affine analysis of the residual encoder.

On every linear segment of its input space the encoder acts as z(x) =
A[x]·x + b[x], where z is the pre-positivity output (the final ReLU only
clips negatives).  This module extracts the local slope A[x] and offset
b[x] by forward-mode differentiation, identifies segments by exact ReLU
activation patterns, clusters slopes with k-means as a coarser map of the
partition, and lifts slopes back to the raw temporal dimension as matched
filters.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

KINK_TOL = 1e-12


@dataclass
class SlopeSample:
    """Local affine data of the encoder at one input."""

    input: np.ndarray       # (s,)
    jacobian: np.ndarray    # (outputs, s); width×s at a block level
    offset: np.ndarray      # output(x) − jacobian @ x
    block_level: object     # 1..N or "end"
    pattern: np.ndarray     # bool activation pattern identifying the segment
    kink: bool              # some pre-activation within KINK_TOL of zero


@dataclass
class PartitionAtlas:
    """K-means view of the slope field plus the exact segment count."""

    labels: np.ndarray          # cluster index per sample
    centroids: np.ndarray       # (clusters, out_dim, s) mean slopes
    distinct_patterns: int      # exact activation-pattern count
    empty_clusters: int
    level: object


def _lift_matrix(net, s):
    lift = np.zeros((net.width, s))
    m = min(net.width, s)
    lift[:m, :m] = np.eye(m)
    return lift


def _affine_batch(net, x, level):
    """Outputs, Jacobians, patterns, and kink flags for a batch of inputs.

    `level` is a block index (1-based) for the block's pre-activation
    output, or "end" for the full map z(x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, s = x.shape
    n_blocks = net.blocks
    if level != "end" and not 1 <= level <= n_blocks:
        raise ValueError(f"level must be 1..{n_blocks} or 'end'")
    last = n_blocks if level == "end" else level

    lift = _lift_matrix(net, s)
    h = x @ lift.T
    jac = np.broadcast_to(lift, (n, net.width, s)).copy()
    pattern = []
    kink = np.zeros(n, dtype=bool)
    for i in range(last):
        a = h @ net.w1[i].T + net.b1[i]
        kink |= (np.abs(a) <= KINK_TOL).any(axis=1)
        inner = a > 0
        hpre = h + np.maximum(a, 0.0) @ net.w2[i].T + net.b2[i]
        # d(hpre)/dx = J + W2 · diag(inner) · W1 · J, per sample
        jac_pre = jac + np.einsum(
            "ou,nu,ui,nis->nos", net.w2[i], inner.astype(np.float64),
            net.w1[i], jac, optimize=True)
        kink |= (np.abs(hpre) <= KINK_TOL).any(axis=1)
        outer = hpre > 0
        pattern.append(inner)
        pattern.append(outer)
        if level == i + 1:
            return hpre, jac_pre, np.concatenate(pattern, axis=1), kink
        h = np.maximum(hpre, 0.0)
        jac = outer[:, :, None] * jac_pre
    z = h @ net.w_out.T + net.b_out
    return z, np.einsum("po,nos->nps", net.w_out, jac), \
        np.concatenate(pattern, axis=1), kink


def jacobian(net, x, level="end") -> SlopeSample:
    """Local slope, offset, and segment identity of the encoder at x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single input vector")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    out, jac, pattern, kink = _affine_batch(net, x[None, :], level)
    return SlopeSample(input=x, jacobian=jac[0],
                       offset=out[0] - jac[0] @ x,
                       block_level=level, pattern=pattern[0],
                       kink=bool(kink[0]))


def _distinct_patterns(patterns):
    return len(np.unique(patterns, axis=0))


def build_atlas(net, samples, k, level="end", seed=0) -> PartitionAtlas:
    """Cluster local slopes with k-means and count exact segments.

    K-means (k-means++ init, one run, fixed seed) runs on the vectorised
    Jacobians; clusters that end up empty are dropped and counted, with
    the surviving labels compacted in original cluster order.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(samples) == 0:
        raise ValueError("no samples")
    if not 1 <= k <= len(samples):
        raise ValueError("cluster count must be in [1, n_samples]")
    _, jac, patterns, _ = _affine_batch(net, samples, level)
    flat = jac.reshape(len(samples), -1)
    with warnings.catch_warnings():
        # fewer distinct slopes than clusters is a legitimate input here
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        km = KMeans(n_clusters=k, init="k-means++", n_init=1,
                    random_state=seed).fit(flat)
    used = np.unique(km.labels_)
    remap = np.full(k, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    centroids = km.cluster_centers_[used].reshape(
        len(used), jac.shape[1], jac.shape[2])
    return PartitionAtlas(labels=remap[km.labels_], centroids=centroids,
                          distinct_patterns=_distinct_patterns(patterns),
                          empty_clusters=int(k - len(used)), level=level)


def hierarchy_report(net, samples):
    """Distinct-segment counts at every block level and end-to-end.

    Returns {"levels": [c1..cN], "end": c_end}.  Because each level's
    activation pattern extends the previous one, the sequence must be
    non-decreasing; that refinement property is asserted.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    counts = []
    for level in range(1, net.blocks + 1):
        _, _, patterns, _ = _affine_batch(net, samples, level)
        counts.append(_distinct_patterns(patterns))
    _, _, patterns, _ = _affine_batch(net, samples, "end")
    end = _distinct_patterns(patterns)
    seq = counts + [end]
    if any(b < a for a, b in zip(seq, seq[1:])):
        raise RuntimeError(f"partition refinement violated: {seq}")
    return {"levels": counts, "end": end}


def matched_filters(net, model, x):
    """Lift the end-to-end slope rows to raw temporal length.

    Returns a T×p array whose columns correlate against full-length
    fingerprints: column j is V·(row j of A[x]).
    """
    sample = jacobian(net, x, level="end")
    basis = model.basis.real if np.iscomplexobj(model.basis) \
        else model.basis
    if basis.shape[1] != sample.jacobian.shape[1]:
        raise ValueError("subspace rank does not match encoder input size")
    return basis @ sample.jacobian.T
