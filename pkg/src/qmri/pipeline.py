"""End-to-end retrospective experiment and its persisted stage artifacts.

Each stage reads its inputs from, and writes its outputs to, a single
artifact directory, so any stage can be re-run in isolation and must
reproduce its persisted outputs bitwise.  `run_retrospective` chains them:
dictionary → subspace → phantom → k-space → reconstructions → parameter
inference → metrics.json.  Per-stage random seeds derive from the master
seed so stages stay independently reproducible.
"""

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import neural
from .config import ConfigError
from .epg import (Dictionary, NmrParams, SequenceParams, axes_from_config,
                  build_dictionary)
from .forward import (KspaceData, SamplingPattern, Tsmi, add_noise,
                      apply_forward, make_pattern)
from .inference import (CompressedDictionary, QuantMaps, dict_match, metrics)
from .phantom import default_phantom_spec, make_phantom, maps_to_tsmi
from .recon import LrtvConfig, lrtv, zero_fill
from .seeds import stage_seed
from .subspace import SubspaceModel, fit_subspace
from .tensor_io import read_tensor, write_pgm, write_tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# artifact persistence


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path):
    return json.loads(Path(path).read_text())


def save_dictionary(out_dir, dictionary: Dictionary, seq: SequenceParams,
                    states: int):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "atoms.tnsr", dictionary.atoms)
    write_tensor(out / "norms.tnsr", dictionary.norm_factors)
    write_tensor(out / "t1_axis.tnsr", dictionary.t1_axis)
    write_tensor(out / "t2_axis.tnsr", dictionary.t2_axis)
    write_tensor(out / "flip_deg.tnsr", seq.flip_deg)
    _write_json(out / "meta.json", {
        "tr_ms": seq.tr_ms, "te_ms": seq.te_ms,
        "inversion": seq.inversion,
        "inversion_time_ms": seq.inversion_time_ms,
        "states": states})


def load_dictionary(in_dir):
    src = Path(in_dir)
    meta = _read_json(src / "meta.json")
    t1_axis = read_tensor(src / "t1_axis.tnsr")
    t2_axis = read_tensor(src / "t2_axis.tnsr")
    grid = [NmrParams(t1, t2) for t1 in t1_axis for t2 in t2_axis]
    dictionary = Dictionary(atoms=read_tensor(src / "atoms.tnsr"),
                            grid=grid, t1_axis=t1_axis, t2_axis=t2_axis,
                            norm_factors=read_tensor(src / "norms.tnsr"))
    seq = SequenceParams(flip_deg=read_tensor(src / "flip_deg.tnsr"),
                         tr_ms=meta["tr_ms"], te_ms=meta["te_ms"],
                         inversion=meta["inversion"],
                         inversion_time_ms=meta["inversion_time_ms"])
    return dictionary, seq, meta["states"]


def save_subspace(out_dir, model: SubspaceModel):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "basis.tnsr", model.basis)
    write_tensor(out / "eigenvalues.tnsr", model.eigenvalues)
    _write_json(out / "meta.json", {"energy_fraction": model.energy_fraction})


def load_subspace(in_dir) -> SubspaceModel:
    src = Path(in_dir)
    meta = _read_json(src / "meta.json")
    return SubspaceModel(basis=read_tensor(src / "basis.tnsr"),
                         eigenvalues=read_tensor(src / "eigenvalues.tnsr"),
                         energy_fraction=meta["energy_fraction"])


def save_maps(out_dir, maps: QuantMaps, pgm=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "t1.tnsr", maps.t1_ms)
    write_tensor(out / "t2.tnsr", maps.t2_ms)
    write_tensor(out / "pd.tnsr", maps.pd)
    if maps.mask is not None:
        write_tensor(out / "mask.tnsr", maps.mask.astype(np.float64))
    if pgm:
        for name, img in (("t1", maps.t1_ms), ("t2", maps.t2_ms),
                          ("pd", maps.pd)):
            write_pgm(out / f"{name}.pgm", img)


def load_maps(in_dir) -> QuantMaps:
    src = Path(in_dir)
    mask_path = src / "mask.tnsr"
    mask = read_tensor(mask_path) > 0 if mask_path.exists() else None
    return QuantMaps(t1_ms=read_tensor(src / "t1.tnsr"),
                     t2_ms=read_tensor(src / "t2.tnsr"),
                     pd=read_tensor(src / "pd.tnsr"), mask=mask)


def save_tsmi(out_dir, x: Tsmi):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "coeffs.tnsr", x.coeffs)
    _write_json(out / "meta.json", {"height": x.spatial[0],
                                    "width": x.spatial[1]})


def load_tsmi(in_dir) -> Tsmi:
    src = Path(in_dir)
    meta = _read_json(src / "meta.json")
    return Tsmi(coeffs=read_tensor(src / "coeffs.tnsr"),
                spatial=(meta["height"], meta["width"]))


def save_kspace(out_dir, data: KspaceData):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = data.pattern
    write_tensor(out / "samples.tnsr", data.samples)
    write_tensor(out / "indices.tnsr", p.indices.astype(np.float64))
    _write_json(out / "meta.json", {
        "height": p.masks.shape[1], "width": p.masks.shape[2],
        "seed": p.seed, "undersampling": p.undersampling,
        "scheme": p.scheme, "snr_db": data.snr_db})


def load_kspace(in_dir) -> KspaceData:
    src = Path(in_dir)
    meta = _read_json(src / "meta.json")
    indices = read_tensor(src / "indices.tnsr").astype(np.int64)
    h, w = meta["height"], meta["width"]
    masks = np.zeros((indices.shape[0], h * w), dtype=bool)
    np.put_along_axis(masks, indices, True, axis=1)
    pattern = SamplingPattern(masks=masks.reshape(-1, h, w), indices=indices,
                              seed=meta["seed"],
                              undersampling=meta["undersampling"],
                              scheme=meta["scheme"])
    return KspaceData(samples=read_tensor(src / "samples.tnsr"),
                      pattern=pattern, snr_db=meta["snr_db"])


# ---------------------------------------------------------------------------
# stages


def stage_simulate_dict(cfg, root):
    seq_cfg = cfg["sequence"]
    seq = _sequence(seq_cfg)
    t1_axis, t2_axis = axes_from_config(cfg["grid"])
    d = build_dictionary(seq, t1_axis, t2_axis,
                         states=seq_cfg["states_count"])
    save_dictionary(Path(root) / "dictionary", d, seq,
                    seq_cfg["states_count"])
    logger.info("dictionary: %d atoms x %d frames", d.n_atoms, d.n_frames)
    return d


def _sequence(seq_cfg):
    from .epg import sequence_from_config
    return sequence_from_config(seq_cfg)


def stage_fit_subspace(cfg, root):
    d, _, _ = load_dictionary(Path(root) / "dictionary")
    model = fit_subspace(d, cfg["subspace"]["rank_count"])
    save_subspace(Path(root) / "subspace", model)
    logger.info("subspace rank %d keeps %.5f of energy",
                model.basis.shape[1], model.energy_fraction)
    return model


def stage_make_phantom(cfg, root):
    t1_axis, t2_axis = axes_from_config(cfg["grid"])
    shape = (cfg["sampling"]["height_count"], cfg["sampling"]["width_count"])
    maps = make_phantom(default_phantom_spec(t1_axis, t2_axis), shape)
    maps.mask = maps.pd > 0
    save_maps(Path(root) / "phantom", maps)
    return maps


def stage_synth_kspace(cfg, root, master_seed):
    root = Path(root)
    model = load_subspace(root / "subspace")
    _, seq, states = load_dictionary(root / "dictionary")
    maps = load_maps(root / "phantom")
    x = maps_to_tsmi(maps, seq, model, states=states)
    save_tsmi(root / "tsmi_truth", x)

    smp = cfg["sampling"]
    pattern = make_pattern((smp["height_count"], smp["width_count"]),
                           seq.flip_deg.shape[0],
                           smp["fraction_frac"], smp["scheme"],
                           seed=stage_seed(master_seed, "sampling"),
                           vd_sigma=smp["vd_sigma_frac"])
    data = apply_forward(model, x, pattern)
    data = add_noise(data, smp["snr_db"], stage_seed(master_seed, "noise"))
    save_kspace(root / "kspace", data)
    return data


def _recon_config(recon_cfg, tv_lambda=None) -> LrtvConfig:
    return LrtvConfig(
        tv_lambda=recon_cfg["tv_lambda_factor"] if tv_lambda is None
        else tv_lambda,
        max_iters=recon_cfg["max_iters_count"],
        tol=recon_cfg["tol_frac"],
        mu_init=recon_cfg["mu_init_factor"],
        inner_iters=recon_cfg["inner_iters_count"],
        warm_start=recon_cfg["warm_start"])


def stage_recon(cfg, root, method):
    root = Path(root)
    model = load_subspace(root / "subspace")
    data = load_kspace(root / "kspace")
    report = None
    if method == "zf":
        x = zero_fill(model, data)
    elif method == "lr":
        x, report = lrtv(model, data, _recon_config(cfg["recon"],
                                                    tv_lambda=0.0))
    elif method == "lrtv":
        x, report = lrtv(model, data, _recon_config(cfg["recon"]))
    else:
        raise ConfigError(f"unknown reconstruction method {method!r}")
    out = root / "recon" / method
    save_tsmi(out, x)
    if report is not None:
        _write_json(out / "report.json", {
            "objective_per_iter": list(report.objective_per_iter),
            "step_sizes": list(report.step_sizes),
            "iterations_run": report.iterations_run,
            "converged": report.converged})
    return x


def stage_train(cfg, root, master_seed):
    root = Path(root)
    d, _, _ = load_dictionary(root / "dictionary")
    model = load_subspace(root / "subspace")
    tr = cfg["training"]
    base = neural.TrainConfig(
        epochs=tr["epochs_count"], lr_init=tr["lr_init_factor"],
        lr_decay_encoder=tr["lr_decay_encoder_factor"],
        lr_decay_decoder=tr["lr_decay_decoder_factor"],
        batch_encoder=tr["batch_encoder_count"],
        batch_decoder=tr["batch_decoder_count"],
        noise_sigma=tr["noise_std_frac"],
        augmentations_per_atom=tr["augmentations_count"],
        seed=stage_seed(master_seed, "training-data"),
        target_scale=tr["target_scale"])
    ts = neural.make_training_set(d, model, base)
    logger.info("training set: %d samples, %.4f relabelled",
                len(ts.enc_inputs), ts.label_changed_fraction)

    enc = neural.init_encoder(stage_seed(master_seed, "encoder-init"),
                              input_dim=model.basis.shape[1],
                              width=model.basis.shape[1])
    enc, enc_losses = neural.train(
        enc, (ts.enc_inputs, ts.enc_labels),
        dataclasses.replace(base, seed=stage_seed(master_seed,
                                                  "encoder-train")))
    dec = neural.init_decoder(stage_seed(master_seed, "decoder-init"),
                              outputs=model.basis.shape[1])
    dec, dec_losses = neural.train(
        dec, (ts.dec_inputs, ts.dec_targets),
        dataclasses.replace(base, seed=stage_seed(master_seed,
                                                  "decoder-train")))
    neural.save_net(enc, root / "nets" / "encoder")
    neural.save_net(dec, root / "nets" / "decoder")

    rng = np.random.default_rng(stage_seed(master_seed, "km-subsample"))
    n = len(ts.enc_inputs)
    take = min(tr["km_train_subsample_count"], n)
    pick = rng.choice(n, size=take, replace=False)
    for col, label, feats in ((0, "t1", tr["km_features_t1_count"]),
                              (1, "t2", tr["km_features_t2_count"])):
        km = neural.km_fit(ts.enc_inputs[pick], ts.enc_labels[pick, col],
                           n_features=feats,
                           kernel_scale=tr["km_kernel_scale_factor"],
                           ridge=tr["km_ridge_factor"],
                           seed=stage_seed(master_seed, f"km-{label}"))
        neural.save_km(km, root / "nets" / f"km_{label}")

    _write_json(root / "nets" / "training.json", {
        "label_changed_fraction": ts.label_changed_fraction,
        "encoder_loss_per_epoch": enc_losses,
        "decoder_loss_per_epoch": dec_losses,
        "n_samples": n})
    return enc, dec


def _background_mask(x: Tsmi, frac):
    norms = np.linalg.norm(x.coeffs, axis=0)
    peak = norms.max()
    return (norms > frac * peak).reshape(x.spatial) if peak > 0 \
        else np.zeros(x.spatial, dtype=bool)


def _apply_mask(maps: QuantMaps, fg) -> QuantMaps:
    return QuantMaps(t1_ms=np.where(fg, maps.t1_ms, 0.0),
                     t2_ms=np.where(fg, maps.t2_ms, 0.0),
                     pd=np.where(fg, maps.pd, 0.0), mask=fg)


def stage_infer(cfg, root, recon_method, infer_method):
    root = Path(root)
    x = load_tsmi(root / "recon" / recon_method)
    fg = _background_mask(x, cfg["inference"]["background_pd_frac"])
    if infer_method == "dm":
        d, _, _ = load_dictionary(root / "dictionary")
        model = load_subspace(root / "subspace")
        maps = dict_match(CompressedDictionary.from_dictionary(d, model), x)
    elif infer_method == "net":
        enc = neural.load_net(root / "nets" / "encoder")
        dec = neural.load_net(root / "nets" / "decoder")
        maps = neural.net_infer(enc, dec, x)
    elif infer_method == "km":
        km_t1 = neural.load_km(root / "nets" / "km_t1")
        km_t2 = neural.load_km(root / "nets" / "km_t2")
        maps = neural.km_infer_maps(km_t1, km_t2, x)
    else:
        raise ConfigError(f"unknown inference method {infer_method!r}")
    maps = _apply_mask(maps, fg)
    save_maps(root / "maps" / f"{recon_method}_{infer_method}", maps)
    return maps


def stage_metrics(cfg, root, master_seed):
    root = Path(root)
    truth_maps = load_maps(root / "phantom")
    truth_tsmi = load_tsmi(root / "tsmi_truth")
    report = {"schema_version": cfg["schema_version"],
              "master_seed": master_seed, "tsmi": {}, "maps": {}}
    for method in cfg["recon"]["methods"]:
        x = load_tsmi(root / "recon" / method)
        report["tsmi"][method] = metrics(x, truth_tsmi).values
        for infer_method in cfg["inference"]["methods"]:
            maps = load_maps(root / "maps" / f"{method}_{infer_method}")
            report["maps"][f"{method}.{infer_method}"] = \
                metrics(maps, truth_maps).values
    training = root / "nets" / "training.json"
    if training.exists():
        report["training"] = _read_json(training)
    _write_json(root / "metrics.json", report)
    return report


def run_retrospective(cfg, out_dir):
    """Phantom experiment end to end; returns the metrics report dict.

    Every random stage derives its seed from the config's master seed, so
    two runs with the same config produce byte-identical metrics.json.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    master_seed = cfg["master_seed_count"]
    _write_json(root / "config.json", cfg)

    stages = [("simulate-dict", lambda: stage_simulate_dict(cfg, root)),
              ("fit-subspace", lambda: stage_fit_subspace(cfg, root)),
              ("make-phantom", lambda: stage_make_phantom(cfg, root)),
              ("synth-kspace",
               lambda: stage_synth_kspace(cfg, root, master_seed))]
    needs_nets = {"net", "km"} & set(cfg["inference"]["methods"])
    if needs_nets:
        stages.append(("train", lambda: stage_train(cfg, root, master_seed)))
    for method in cfg["recon"]["methods"]:
        stages.append((f"recon:{method}",
                       lambda m=method: stage_recon(cfg, root, m)))
        for infer_method in cfg["inference"]["methods"]:
            stages.append((f"infer:{method}.{infer_method}",
                           lambda m=method, i=infer_method:
                           stage_infer(cfg, root, m, i)))
    stages.append(("metrics", lambda: stage_metrics(cfg, root, master_seed)))

    result = None
    for name, fn in stages:
        logger.info("stage %s", name)
        try:
            result = fn()
        except Exception:
            logger.error("stage %s failed", name)
            raise
    return result
