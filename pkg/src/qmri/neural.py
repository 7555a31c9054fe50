"""Residual encoder, shallow decoder, their training, and a random-features
kernel baseline.

The encoder maps a phase-aligned, unit-scaled subspace voxel to (T1, T2) in
milliseconds through N two-layer residual ReLU blocks and a ReLU output
layer (the final ReLU only enforces positivity).  The decoder maps (T1, T2)
back to the clean compressed fingerprint with one hidden ReLU layer and a
linear output.  Everything is plain float64 numpy; gradients are exact
backpropagation of the *sum* of squared errors over a batch (the trainer
divides by the batch size).
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import Tsmi
from .inference import QuantMaps, phase_align
from .tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)


@dataclass
class MrfResnet:
    """Residual ReLU network h^i = relu(h^{i-1} + W2·relu(W1·h^{i-1}+b1)+b2)."""

    w1: list
    b1: list
    w2: list
    b2: list
    w_out: np.ndarray
    b_out: np.ndarray
    input_dim: int = 10
    width: int = 10
    trained: bool = False

    @property
    def blocks(self):
        return len(self.w1)

    @property
    def outputs(self):
        return self.w_out.shape[0]

    def n_params(self):
        total = self.w_out.size + self.b_out.size
        for i in range(self.blocks):
            total += (self.w1[i].size + self.b1[i].size
                      + self.w2[i].size + self.b2[i].size)
        return total

    def params(self):
        out = []
        for i in range(self.blocks):
            out += [self.w1[i], self.b1[i], self.w2[i], self.b2[i]]
        out += [self.w_out, self.b_out]
        return out


@dataclass
class DecoderNet:
    """One hidden ReLU layer, linear output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    trained: bool = False

    @property
    def hidden(self):
        return self.w1.shape[0]

    def n_params(self):
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class TrainConfig:
    epochs: int = 20
    lr_init: float = 0.01
    lr_decay_encoder: float = 0.8
    lr_decay_decoder: float = 0.95
    batch_encoder: int = 500
    batch_decoder: int = 20
    noise_sigma: float = 0.1
    augmentations_per_atom: int = 50
    seed: int = 0
    target_scale: object = None   # None/"none", "auto", or a number


def init_encoder(seed, input_dim=10, width=10, blocks=6, outputs=2):
    rng = np.random.default_rng(seed)
    he = lambda fan_in, shape: rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    w1, b1, w2, b2 = [], [], [], []
    for _ in range(blocks):
        w1.append(he(width, (width, width)))
        b1.append(np.zeros(width))
        w2.append(he(width, (width, width)))
        b2.append(np.zeros(width))
    # positive output bias keeps the positivity ReLU alive at the start of
    # training (targets are positive; a dead output unit gets no gradient)
    return MrfResnet(w1=w1, b1=b1, w2=w2, b2=b2,
                     w_out=he(width, (outputs, width)),
                     b_out=np.ones(outputs),
                     input_dim=input_dim, width=width)


def init_decoder(seed, inputs=2, hidden=300, outputs=10):
    rng = np.random.default_rng(seed)
    return DecoderNet(
        w1=rng.normal(0.0, np.sqrt(2.0 / inputs), (hidden, inputs)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, np.sqrt(2.0 / hidden), (outputs, hidden)),
        b2=np.zeros(outputs))


def _lift(net, x):
    """Pad or truncate the input to the block width (identity when equal)."""
    if net.width == x.shape[1]:
        return x
    if net.width > x.shape[1]:
        out = np.zeros((x.shape[0], net.width))
        out[:, :x.shape[1]] = x
        return out
    return x[:, :net.width]


def _encoder_pass(net, x):
    """Batched forward pass returning the output and all intermediates."""
    h = _lift(net, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    cache = {"h0": h, "a": [], "u": [], "hpre": [], "h": []}
    for i in range(net.blocks):
        a = h @ net.w1[i].T + net.b1[i]
        u = np.maximum(a, 0.0)
        hpre = h + u @ net.w2[i].T + net.b2[i]
        h = np.maximum(hpre, 0.0)
        cache["a"].append(a)
        cache["u"].append(u)
        cache["hpre"].append(hpre)
        cache["h"].append(h)
    cache["z"] = h @ net.w_out.T + net.b_out
    cache["out"] = np.maximum(cache["z"], 0.0)
    return cache


def encoder_forward(net: MrfResnet, x):
    """Evaluate the encoder; returns (theta, per-block hidden activations).

    Accepts a single input vector or a batch of rows.
    """
    single = np.asarray(x).ndim == 1
    cache = _encoder_pass(net, x)
    out = cache["out"][0] if single else cache["out"]
    hidden = [h[0] for h in cache["h"]] if single else cache["h"]
    return out, hidden


def encoder_backward(net: MrfResnet, batch, targets):
    """Gradients of the sum of squared errors over the batch.

    Returns a list of arrays aligned with net.params().  Dividing by the
    batch size yields mean-squared-error gradients.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    cache = _encoder_pass(net, x)
    if not np.isfinite(cache["out"]).all():
        raise FloatingPointError("non-finite network output")

    d_z = 2.0 * (cache["out"] - y) * (cache["z"] > 0)
    g_wout = d_z.T @ cache["h"][-1] if net.blocks else d_z.T @ cache["h0"]
    g_bout = d_z.sum(axis=0)
    dh = d_z @ net.w_out
    grads_blocks = []
    for i in range(net.blocks - 1, -1, -1):
        h_in = cache["h"][i - 1] if i > 0 else cache["h0"]
        d_hpre = dh * (cache["hpre"][i] > 0)
        g_w2 = d_hpre.T @ cache["u"][i]
        g_b2 = d_hpre.sum(axis=0)
        d_a = (d_hpre @ net.w2[i]) * (cache["a"][i] > 0)
        g_w1 = d_a.T @ h_in
        g_b1 = d_a.sum(axis=0)
        dh = d_hpre + d_a @ net.w1[i]
        grads_blocks.append([g_w1, g_b1, g_w2, g_b2])
    grads = []
    for block in reversed(grads_blocks):
        grads += block
    grads += [g_wout, g_bout]
    return grads


def _decoder_pass(net, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = x @ net.w1.T + net.b1
    u = np.maximum(a, 0.0)
    return {"x": x, "a": a, "u": u, "out": u @ net.w2.T + net.b2}


def decoder_forward(net: DecoderNet, theta):
    """Map (T1, T2) to the approximate compressed clean fingerprint."""
    single = np.asarray(theta).ndim == 1
    out = _decoder_pass(net, theta)["out"]
    return out[0] if single else out


def decoder_backward(net: DecoderNet, batch, targets):
    """Sum-of-squared-errors gradients, aligned with net.params()."""
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    cache = _decoder_pass(net, batch)
    if not np.isfinite(cache["out"]).all():
        raise FloatingPointError("non-finite network output")
    d_out = 2.0 * (cache["out"] - y)
    g_w2 = d_out.T @ cache["u"]
    g_b2 = d_out.sum(axis=0)
    d_a = (d_out @ net.w2) * (cache["a"] > 0)
    g_w1 = d_a.T @ cache["x"]
    g_b1 = d_a.sum(axis=0)
    return [g_w1, g_b1, g_w2, g_b2]


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _resolve_scale(targets, how):
    if how is None or how == "none":
        return np.ones(targets.shape[1])
    if how == "auto":
        c = np.abs(targets).mean(axis=0)
        return np.where(c > 0, c, 1.0)
    return np.full(targets.shape[1], float(how))


def train(net, data, cfg: TrainConfig):
    """Adam/MSE training with per-epoch multiplicative learning-rate decay.

    `data` is (inputs, targets) row-wise.  The net is updated in place and
    returned together with the per-epoch mean squared training error.  An
    "auto" or numeric target scale trains against scaled targets and folds
    the scale back into the output layer afterwards, which is exact for the
    encoder's positively homogeneous output ReLU and the decoder's linear
    output; the loss curve is reported in the scaled space.
    """
    inputs, targets = data
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("empty training data")
    is_encoder = isinstance(net, MrfResnet)
    backward = encoder_backward if is_encoder else decoder_backward
    fwd = (lambda n, x: _encoder_pass(n, x)["out"]) if is_encoder else \
        (lambda n, x: _decoder_pass(n, x)["out"])
    decay = cfg.lr_decay_encoder if is_encoder else cfg.lr_decay_decoder
    batch_size = cfg.batch_encoder if is_encoder else cfg.batch_decoder

    scale = _resolve_scale(targets, cfg.target_scale)
    y = targets / scale
    x = inputs
    in_scale = np.ones(inputs.shape[1])
    if not is_encoder:
        # decoder inputs are milliseconds; scale them into O(1) range and
        # fold the scale into the first linear layer afterwards
        in_scale = np.abs(inputs).mean(axis=0)
        in_scale = np.where(in_scale > 0, in_scale, 1.0)
        x = inputs / in_scale

    params = net.params()
    opt = _Adam(params, cfg.lr_init)
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sse = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            pred = fwd(net, xb)
            sse += float(((pred - yb) ** 2).sum())
            grads = backward(net, xb, yb)
            grads = [g / len(idx) for g in grads]
            opt.step(params, grads)
        loss = sse / (n * y.shape[1])
        if not np.isfinite(loss):
            raise FloatingPointError("training diverged")
        losses.append(loss)
        opt.lr *= decay

    if not np.all(scale == 1.0):
        if is_encoder:
            net.w_out *= scale[:, None]
            net.b_out *= scale
        else:
            net.w2 *= scale[:, None]
            net.b2 *= scale
    if not np.all(in_scale == 1.0):
        net.w1 /= in_scale[None, :]
    net.trained = True
    return net, losses


@dataclass
class TrainingSet:
    """Noisy-augmented encoder data plus the clean decoder data."""

    enc_inputs: np.ndarray     # (n, s) real, phase-aligned real parts
    enc_labels: np.ndarray     # (n, 2) matched T1/T2 in ms
    dec_inputs: np.ndarray     # (d, 2) grid parameters
    dec_targets: np.ndarray    # (d, s) aligned real compressed fingerprints
    label_changed_fraction: float = 0.0


def match_real(atoms_real, samples, chunk=65536):
    """Nearest-entry indices for real aligned samples (rows) by |correlation|."""
    idx = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), chunk):
        block = samples[start:start + chunk]
        idx[start:start + len(block)] = np.argmax(
            np.abs(block @ atoms_real), axis=1)
    return idx


def make_training_set(dictionary, model, cfg: TrainConfig):
    """Noisy tube sampling around the dictionary, labelled by re-matching.

    Each compressed entry receives `augmentations_per_atom` i.i.d. complex
    Gaussian perturbations (std `noise_sigma` per real/imaginary component),
    is phase-aligned, scaled to unit norm (matching the scaling applied to
    voxels at inference time), and reduced to its real part; the label is the
    closest clean entry of the same dictionary (not the generating
    parameters).
    """
    from .inference import CompressedDictionary
    from .subspace import compress

    dc = CompressedDictionary.from_dictionary(dictionary, model)
    atoms_real = dc.atoms_c.real * dc.renorm[None, :]    # (s, d), aligned
    s, d = atoms_real.shape
    aug = cfg.augmentations_per_atom
    rng = np.random.default_rng(cfg.seed)

    clean = np.repeat(compress(model, dictionary.atoms), aug, axis=1)
    noise = rng.standard_normal((2, s, d * aug))
    noisy = clean + cfg.noise_sigma * (noise[0] + 1j * noise[1])
    aligned, _ = phase_align(noisy)
    norms = np.linalg.norm(noisy, axis=0)
    enc_inputs = np.ascontiguousarray(
        (aligned.real / np.where(norms > 0, norms, 1.0)[None, :]).T)

    t1_grid = np.array([p.t1_ms for p in dc.grid])
    t2_grid = np.array([p.t2_ms for p in dc.grid])
    unit_atoms = np.ascontiguousarray(dc.atoms_c.real)
    labels = match_real(unit_atoms, enc_inputs)
    enc_labels = np.column_stack([t1_grid[labels], t2_grid[labels]])

    generator = np.repeat(np.arange(d), aug)
    changed = float(np.mean(labels != generator))

    dec_inputs = np.column_stack([t1_grid, t2_grid])
    dec_targets = np.ascontiguousarray(atoms_real.T)
    return TrainingSet(enc_inputs=enc_inputs, enc_labels=enc_labels,
                       dec_inputs=dec_inputs, dec_targets=dec_targets,
                       label_changed_fraction=changed)


def net_infer(enc: MrfResnet, dec: DecoderNet, x: Tsmi,
              chunk: int = 65536) -> QuantMaps:
    """Parameter and proton-density maps from the trained auto-encoder.

    Voxels are phase-aligned and scaled to unit norm before encoding (the
    network is trained on unit-scale fingerprints); proton density is the
    real correlation of the aligned voxel with the unit-normalised decoder
    fingerprint at the predicted parameters, clamped at zero.
    """
    if not (enc.trained and dec.trained):
        logger.warning("net_infer called with untrained network(s)")
    s, n = x.coeffs.shape
    h, w = x.spatial
    t1 = np.empty(n)
    t2 = np.empty(n)
    pd = np.empty(n)
    for start in range(0, n, chunk):
        cols = x.coeffs[:, start:start + chunk]
        aligned, _ = phase_align(cols)
        norms = np.linalg.norm(cols, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        xin = (aligned.real / safe[None, :]).T
        theta = _encoder_pass(enc, xin)["out"]
        ghat = _decoder_pass(dec, theta)["out"]
        gnorm = np.linalg.norm(ghat, axis=1)
        ghat /= np.where(gnorm > 0, gnorm, 1.0)[:, None]
        sl = slice(start, start + cols.shape[1])
        t1[sl] = theta[:, 0]
        t2[sl] = theta[:, 1]
        pd[sl] = np.maximum((aligned.real * ghat.T).sum(axis=0), 0.0)
    return QuantMaps(t1_ms=t1.reshape(h, w), t2_ms=t2.reshape(h, w),
                     pd=pd.reshape(h, w))


@dataclass
class KmModel:
    """Random Fourier features + ridge regression for one output."""

    omega: np.ndarray
    bias: np.ndarray
    weights: np.ndarray
    target_mean: float
    kernel_scale: float

    @property
    def n_features(self):
        return self.omega.shape[0]


def _median_heuristic(inputs, rng, sample=500):
    pick = rng.choice(len(inputs), size=min(sample, len(inputs)),
                      replace=False)
    sub = inputs[pick]
    d2 = ((sub[:, None, :] - sub[None, :, :]) ** 2).sum(axis=2)
    med = np.median(np.sqrt(d2[np.triu_indices(len(sub), k=1)]))
    return float(med) if med > 0 else 1.0


def _feature_map(omega, bias, x):
    return np.sqrt(2.0 / omega.shape[0]) * np.cos(x @ omega.T + bias)


def km_fit(inputs, targets, n_features, kernel_scale="auto",
           ridge=1e-6, seed=0) -> KmModel:
    """Fit the random-features kernel ridge baseline for a scalar target.

    Features are z(x) = sqrt(2/m)·cos(Ωx + b) with Ω ~ N(0, 1/scale²) rows
    and b ~ U[0, 2π); "auto" picks the median pairwise input distance.
    Targets are centred so a constant function is represented exactly.
    """
    if n_features < 1:
        raise ValueError("need at least one random feature")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    scale = _median_heuristic(inputs, rng) if kernel_scale == "auto" \
        else float(kernel_scale)
    omega = rng.standard_normal((n_features, inputs.shape[1])) / scale
    bias = rng.uniform(0.0, 2.0 * np.pi, n_features)
    mean = float(targets.mean())
    # accumulate the normal equations chunk-wise so the feature matrix is
    # never materialised in full
    gram = np.zeros((n_features, n_features))
    rhs = np.zeros(n_features)
    for start in range(0, len(inputs), 8192):
        z = _feature_map(omega, bias, inputs[start:start + 8192])
        gram += z.T @ z
        rhs += z.T @ (targets[start:start + 8192] - mean)
    gram[np.diag_indices_from(gram)] += ridge
    weights = np.linalg.solve(gram, rhs)
    return KmModel(omega=omega, bias=bias, weights=weights,
                   target_mean=mean, kernel_scale=scale)


def km_infer(model: KmModel, inputs):
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    out = np.empty(len(inputs))
    for start in range(0, len(inputs), 8192):
        out[start:start + 8192] = _feature_map(
            model.omega, model.bias, inputs[start:start + 8192]) \
            @ model.weights
    return out + model.target_mean


def km_infer_maps(model_t1: KmModel, model_t2: KmModel, x: Tsmi,
                  chunk: int = 65536) -> QuantMaps:
    """DM-style map inference using the two kernel predictors (PD omitted)."""
    s, n = x.coeffs.shape
    h, w = x.spatial
    t1 = np.empty(n)
    t2 = np.empty(n)
    for start in range(0, n, chunk):
        cols = x.coeffs[:, start:start + chunk]
        aligned, _ = phase_align(cols)
        norms = np.linalg.norm(cols, axis=0)
        xin = (aligned.real / np.where(norms > 0, norms, 1.0)[None, :]).T
        sl = slice(start, start + cols.shape[1])
        t1[sl] = km_infer(model_t1, xin)
        t2[sl] = km_infer(model_t2, xin)
    t1 = np.maximum(t1, 0.0)
    t2 = np.maximum(t2, 0.0)
    pd = np.linalg.norm(x.coeffs, axis=0)
    return QuantMaps(t1_ms=t1.reshape(h, w), t2_ms=t2.reshape(h, w),
                     pd=pd.reshape(h, w))


def _net_arrays(net):
    if isinstance(net, MrfResnet):
        arrays = {}
        for i in range(net.blocks):
            arrays[f"w1_{i}"] = net.w1[i]
            arrays[f"b1_{i}"] = net.b1[i]
            arrays[f"w2_{i}"] = net.w2[i]
            arrays[f"b2_{i}"] = net.b2[i]
        arrays["w_out"] = net.w_out
        arrays["b_out"] = net.b_out
        return arrays
    return {"w1": net.w1, "b1": net.b1, "w2": net.w2, "b2": net.b2}


def save_net(net, out_dir):
    """Serialise weights as one tensor file per array plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = _net_arrays(net)
    if isinstance(net, MrfResnet):
        meta = {"kind": "encoder", "blocks": net.blocks, "width": net.width,
                "input_dim": net.input_dim, "outputs": net.outputs}
    else:
        meta = {"kind": "decoder", "hidden": net.hidden}
    meta["trained"] = bool(net.trained)
    meta["activation"] = "relu"
    meta["files"] = {}
    for name, arr in arrays.items():
        fname = f"{name}.tnsr"
        write_tensor(out / fname, arr)
        meta["files"][name] = fname
    (out / "manifest.json").write_text(json.dumps(meta, indent=2,
                                                  sort_keys=True))


def load_net(in_dir):
    src = Path(in_dir)
    meta = json.loads((src / "manifest.json").read_text())
    tensors = {name: read_tensor(src / fname).real
               for name, fname in meta["files"].items()}
    if meta["kind"] == "encoder":
        n = meta["blocks"]
        net = MrfResnet(
            w1=[tensors[f"w1_{i}"] for i in range(n)],
            b1=[tensors[f"b1_{i}"] for i in range(n)],
            w2=[tensors[f"w2_{i}"] for i in range(n)],
            b2=[tensors[f"b2_{i}"] for i in range(n)],
            w_out=tensors["w_out"], b_out=tensors["b_out"],
            input_dim=meta["input_dim"], width=meta["width"])
    else:
        net = DecoderNet(w1=tensors["w1"], b1=tensors["b1"],
                         w2=tensors["w2"], b2=tensors["b2"])
    net.trained = bool(meta.get("trained", False))
    return net


def save_km(model: KmModel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "omega.tnsr", model.omega)
    write_tensor(out / "bias.tnsr", model.bias)
    write_tensor(out / "weights.tnsr", model.weights)
    (out / "manifest.json").write_text(json.dumps(
        {"kind": "kernel-machine", "target_mean": model.target_mean,
         "kernel_scale": model.kernel_scale}, indent=2, sort_keys=True))


def load_km(in_dir) -> KmModel:
    src = Path(in_dir)
    meta = json.loads((src / "manifest.json").read_text())
    return KmModel(omega=read_tensor(src / "omega.tnsr"),
                   bias=read_tensor(src / "bias.tnsr"),
                   weights=read_tensor(src / "weights.tnsr"),
                   target_mean=meta["target_mean"],
                   kernel_scale=meta["kernel_scale"])


def clone_net(net):
    return copy.deepcopy(net)
