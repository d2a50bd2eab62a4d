"""The four experiment stages behind the command line.

All stages share one output directory::

    OUT/data/         x.frt, y.frt, manifest.json (mask.txt for mri)
    OUT/checkpoint/   model.json, params.frt (best), last.frt, schedule.json
    OUT/history.csv
    OUT/recon/        mean.frt, std.frt, truth.frt, [samples.frt], [initial.frt, refined.frt]
    OUT/recon/preview PGM previews plus scaling.txt
    OUT/metrics.csv, OUT/summary.csv
    OUT/log.txt       the only file with timestamps
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from .architectures import CSSpec, IUNetSpec, MultiScaleSpec, build_model
from .conditioning import Conditioner, ConditionerSpec, conditioner_for_model, default_inversion
from .config import ConfigError, ExperimentConfig
from .data import gaussian_mixture_2d, phantoms
from .engine.frt import load_archive, read_tensor, save_archive, write_tensor
from .engine.params import ParameterStore, seeded_rng
from .inference import posterior_samples, sample_refine
from .metrics import psnr, ssim, summarize
from .operators import (
    FourierOperator,
    RadonOperator,
    add_relative_gaussian_noise,
    gaussian_matrix,
    make_mask,
    make_operator,
    poisson_lowdose_noise,
)
from .train import TrainData, TrainResult, prepare_data, read_history, train, write_history

PROBLEMS = ("cs", "ct", "mri", "toy2d")
DEFAULT_GENERATOR = {"ct": "ellipses", "mri": "ellipses", "toy2d": "gaussian-mixture-2d"}
DEFAULT_SAMPLES = {"cs": 100, "mri": 100, "ct": 1000, "toy2d": 1000}


class DataMismatch(ValueError):
    """Input files disagree with each other or with the configuration."""


def _log(out, message):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "log.txt", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_problem(cfg):
    if cfg.problem.kind not in PROBLEMS:
        raise ConfigError(f"problem.kind must be one of {PROBLEMS}, got {cfg.problem.kind!r}")


def build_operator(cfg: ExperimentConfig):
    _check_problem(cfg)
    kind, E, o = cfg.problem.kind, cfg.data.extent, cfg.operator
    if kind == "toy2d":
        return None
    if kind == "cs":
        n = E * E
        return gaussian_matrix(o.m or n // 4, n, o.seed, (E, E))
    if kind == "ct":
        return RadonOperator((E, E), o.angles, o.detectors or None, o.step)
    mask = make_mask(E, o.center_fraction, o.acceleration, o.seed)
    return FourierOperator(mask, (E, E))


def generator_name(cfg):
    if cfg.data.generator:
        return cfg.data.generator
    if cfg.problem.kind == "cs":
        return "digits-like" if cfg.data.extent >= 28 else "shapes"
    return DEFAULT_GENERATOR[cfg.problem.kind]


# ----------------------------------------------------------------------------- simulate

def simulate(cfg: ExperimentConfig, out):
    """Write paired ground truth / noisy measurement tensors and a manifest."""
    out = Path(out)
    _check_problem(cfg)
    seed, o = cfg.run.seed, cfg.operator
    if cfg.data.test_count >= cfg.data.count:
        raise ConfigError("data.test_count must be smaller than data.count")
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    op = build_operator(cfg)
    gen = generator_name(cfg)
    manifest = {"problem": cfg.problem.kind, "generator": gen, "count": cfg.data.count,
                "test_count": cfg.data.test_count, "extent": cfg.data.extent, "seed": seed,
                "noise": o.noise, "operator": None if op is None else op.spec()}
    if op is None:
        if gen != "gaussian-mixture-2d":
            raise ConfigError("toy2d supports only the gaussian-mixture-2d generator")
        write_tensor(data_dir / "x.frt", gaussian_mixture_2d(cfg.data.count, seed))
        _dump_json(data_dir / "manifest.json", manifest)
        _log(out, f"simulate: {cfg.data.count} toy2d samples")
        return manifest
    E = cfg.data.extent
    x = phantoms(gen, cfg.data.count, (E, E), seed)
    y = op.forward(x)
    noise_rng = seeded_rng(seed, "measurement-noise")
    if o.noise == "gaussian":
        y = add_relative_gaussian_noise(y, o.noise_level, noise_rng, batched=True,
                                        per_component=o.per_component)
        manifest["noise_level"] = o.noise_level
    elif o.noise == "poisson":
        if cfg.problem.kind != "ct":
            raise ConfigError("poisson noise applies to the ct problem only")
        y = poisson_lowdose_noise(o.attenuation * y, o.photon_count, noise_rng) / o.attenuation
        manifest.update(photon_count=o.photon_count, attenuation=o.attenuation)
    elif o.noise != "none":
        raise ConfigError(f"operator.noise must be gaussian, poisson or none, got {o.noise!r}")
    write_tensor(data_dir / "x.frt", x)
    write_tensor(data_dir / "y.frt", y)
    if isinstance(op, FourierOperator):
        (data_dir / "mask.txt").write_text(op.mask.to_text() + "\n")
    _dump_json(data_dir / "manifest.json", manifest)
    _log(out, f"simulate: {cfg.data.count} pairs, problem {cfg.problem.kind}")
    return manifest


def load_dataset(out):
    data_dir = Path(out) / "data"
    manifest = json.loads((data_dir / "manifest.json").read_text())
    x = read_tensor(data_dir / "x.frt")
    y = read_tensor(data_dir / "y.frt") if (data_dir / "y.frt").exists() else None
    if len(x) != manifest["count"] or (y is not None and len(y) != len(x)):
        raise DataMismatch("dataset files do not match their manifest")
    return manifest, x, y


# ----------------------------------------------------------------------------- models

def build_models(cfg: ExperimentConfig, op, input_shape):
    """Fresh parameter store, flow model and (for conditional problems) conditioner."""
    m = cfg.model
    conditional = op is not None
    store = ParameterStore(cfg.run.seed, np.dtype(m.dtype))
    cond_channels = m.cond_channels if conditional and len(input_shape) == 3 else 0
    dense_cond = m.dense_cond_dim if conditional else 0
    if conditional and len(input_shape) == 1 and not dense_cond:
        dense_cond = 16
    if m.architecture == "multiscale":
        spec = MultiScaleSpec(input_shape=input_shape, scales=m.scales,
                              couplings_per_block=m.couplings, downsample=m.downsample,
                              split_fraction=m.split_fraction, coupling=m.coupling, clamp=m.clamp,
                              permutation=m.permutation, subnet_kernel=m.subnet_kernel,
                              hidden=m.hidden, subnet_depth=m.subnet_depth,
                              dense_size=m.dense_size, dense_couplings=m.dense_couplings,
                              dense_hidden=m.dense_hidden, base=m.base,
                              cond_channels=cond_channels, dense_cond_dim=dense_cond,
                              seed=cfg.run.seed)
    elif m.architecture == "iunet":
        spec = IUNetSpec(input_shape=input_shape, scales=m.scales, couplings_per_block=m.couplings,
                         downsample=m.downsample, skip_fraction=m.skip_fraction,
                         coupling=m.coupling, clamp=m.clamp, permutation=m.permutation,
                         hidden=m.hidden, subnet_depth=m.subnet_depth, base=m.base,
                         cond_channels=cond_channels, seed=cfg.run.seed)
    elif m.architecture == "cs":
        spec = CSSpec(input_shape=input_shape, repeats=m.repeats, dense_size=m.dense_size or 128,
                      dense_couplings=m.dense_couplings, hidden=m.hidden,
                      subnet_depth=m.subnet_depth, dense_hidden=m.dense_hidden, clamp=m.clamp,
                      base=m.base, cond_channels=cond_channels, dense_cond_dim=dense_cond,
                      downsample=m.downsample, seed=cfg.run.seed)
    else:
        raise ConfigError(f"model.architecture must be multiscale, iunet or cs, "
                          f"got {m.architecture!r}")
    try:
        model = build_model(m.architecture, spec, store)
    except ValueError as err:
        raise ConfigError(f"model: {err}") from None
    cond = None
    if conditional:
        if not model.cond_slots:
            raise ConfigError("conditional problems need model.cond_channels > 0")
        c = cfg.conditioner
        cond = conditioner_for_model(model, op, store, trunk=c.trunk,
                                     inversion=c.inversion or default_inversion(op),
                                     hidden=c.hidden, tv_lambda=c.tv_lambda,
                                     trainable=c.trainable)
        cond.spec.combine_weight = c.combine_weight
    return store, model, cond


def _input_shape(cfg):
    return (2,) if cfg.problem.kind == "toy2d" else (1, cfg.data.extent, cfg.data.extent)


def save_checkpoint(ckpt, cfg, model, cond, result: TrainResult):
    ckpt = Path(ckpt)
    ckpt.mkdir(parents=True, exist_ok=True)
    info = {"problem": cfg.problem.kind, "dtype": str(model.store.dtype),
            "seed": cfg.run.seed, "model": model.manifest(),
            "conditioner": None if cond is None else cond.manifest()}
    _dump_json(ckpt / "model.json", info)
    save_archive(ckpt / "params.frt", result.best_state)
    save_archive(ckpt / "last.frt", result.last_state)
    _dump_json(ckpt / "schedule.json", {"schedule": result.schedule,
                                        "best_epoch": result.best_epoch,
                                        "best_val": result.best_val,
                                        "unstable": result.unstable,
                                        "aborted": result.aborted})


def load_checkpoint(ckpt, which="params"):
    """Rebuild (store, model, conditioner) from a checkpoint directory."""
    ckpt = Path(ckpt)
    info = json.loads((ckpt / "model.json").read_text())
    store = ParameterStore(info["seed"], np.dtype(info["dtype"]))
    man = info["model"]
    model = build_model(man["architecture"], man["spec"], store)
    cond = None
    if info["conditioner"] is not None:
        c = info["conditioner"]
        op = make_operator(c["operator"])
        cond = Conditioner(op, ConditionerSpec(**c["spec"]), store, prefix=c["prefix"],
                           image_shape=tuple(c["image_shape"]))
    store.load_state(load_archive(ckpt / f"{which}.frt"))
    return info, store, model, cond


def _train_split(manifest, x, y):
    n = len(x) - manifest["test_count"]
    return x[:n], None if y is None else y[:n]


def run_train(cfg: ExperimentConfig, out, log=None):
    out = Path(out)
    manifest, x, y = load_dataset(out)
    if manifest["problem"] != cfg.problem.kind:
        raise DataMismatch(f"dataset is for problem {manifest['problem']!r}, "
                           f"config says {cfg.problem.kind!r}")
    op = make_operator(manifest["operator"]) if manifest["operator"] else None
    input_shape = _input_shape(cfg)
    store, model, cond = build_models(cfg, op, input_shape)
    xt, yt = _train_split(manifest, x, y)
    xt = xt.reshape((len(xt),) + input_shape)
    data = prepare_data(cond, xt, yt) if cond is not None else TrainData(xt)
    ckpt = out / "checkpoint"
    resume = None
    if cfg.run.resume:
        meta = json.loads((ckpt / "schedule.json").read_text())
        resume = TrainResult(best_state=load_archive(ckpt / "params.frt"),
                             last_state=load_archive(ckpt / "last.frt"),
                             history=read_history(out / "history.csv"),
                             best_epoch=meta["best_epoch"], best_val=meta["best_val"],
                             schedule=meta["schedule"])
    result = train(model, cond, data, cfg.train_config, resume=resume, log=log)
    save_checkpoint(ckpt, cfg, model, cond, result)
    write_history(out / "history.csv", result.history)
    _log(out, f"train: {len(result.history)} epochs, best validation NLL {result.best_val:.6g}"
              + (f", aborted: {result.aborted}" if result.aborted else "")
              + (", round-trip monitor flagged" if result.unstable else ""))
    return result


# ----------------------------------------------------------------------------- reconstruct

def write_pgm(path, image):
    """8-bit binary PGM of a min-max scaled image; returns (min, max)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    H, W = data.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + data.tobytes())
    return lo, hi


def run_reconstruct(cfg: ExperimentConfig, out):
    out = Path(out)
    info, store, model, cond = load_checkpoint(out / "checkpoint")
    manifest, x, y = load_dataset(out)
    rc = cfg.reconstruct
    N = rc.samples or DEFAULT_SAMPLES[info["problem"]]
    rdir = out / "recon"
    rdir.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed
    if cond is None:
        from .inference import draw_samples
        samples = draw_samples(model, None, N, seeded_rng(seed, "reconstruct", 0), rc.batch_size)
        write_tensor(rdir / "samples.frt", samples)
        _log(out, f"reconstruct: {N} unconditional samples")
        return {"samples": samples}
    n_test = manifest["test_count"]
    count = min(rc.count or n_test, n_test)
    idx = np.arange(len(x) - n_test, len(x) - n_test + count)
    image_shape = cond.image_shape
    means, stds, all_samples, initial, refined = [], [], [], [], []
    for k, i in enumerate(idx):
        summary = posterior_samples(model, cond, y[i], N, seeded_rng(seed, "reconstruct", k),
                                    rc.batch_size)
        means.append(summary.mean.reshape(image_shape))
        stds.append(summary.std.reshape(image_shape))
        if rc.save_samples:
            all_samples.append(summary.samples.reshape((N,) + image_shape))
        if rc.refine is not None:
            z = model.base.sample(1, seeded_rng(seed, "refine", k))
            res = sample_refine(model, cond, cond.op, y[i], rc.refine, rc.refine_iterations,
                                rc.refine_lr, z=z)
            initial.append(res.initial.reshape(image_shape))
            refined.append(res.x.reshape(image_shape))
    outputs = {"mean": np.stack(means), "std": np.stack(stds), "truth": x[idx]}
    if all_samples:
        outputs["samples"] = np.stack(all_samples)
    if refined:
        outputs["initial"] = np.stack(initial)
        outputs["refined"] = np.stack(refined)
    for name, arr in outputs.items():
        write_tensor(rdir / f"{name}.frt", arr)
    prev = rdir / "preview"
    prev.mkdir(exist_ok=True)
    lines = []
    for name in ("mean", "std", "initial", "refined"):
        if name not in outputs:
            continue
        for k, img in enumerate(outputs[name]):
            fname = f"{name}_{k:03d}.pgm"
            lo, hi = write_pgm(prev / fname, img)
            lines.append(f"{fname} {lo!r} {hi!r}")
    (prev / "scaling.txt").write_text("# file min max (pixel = round(255 * (v - min) / (max - min)))\n"
                                      + "\n".join(lines) + "\n")
    _log(out, f"reconstruct: {count} measurements, {N} samples each")
    return outputs


# ----------------------------------------------------------------------------- evaluate

def _fmt(v):
    return "inf" if math.isinf(v) else repr(float(v))


def run_evaluate(cfg: ExperimentConfig, out):
    out = Path(out)
    ev = cfg.evaluate
    rec_path = Path(ev.reconstructions) if ev.reconstructions else out / "recon" / "mean.frt"
    ref_path = Path(ev.references) if ev.references else out / "recon" / "truth.frt"
    rec, ref = read_tensor(rec_path), read_tensor(ref_path)
    if rec.shape[0] != ref.shape[0]:
        raise DataMismatch(f"{rec.shape[0]} reconstructions but {ref.shape[0]} references")
    if rec.shape != ref.shape:
        raise DataMismatch(f"reconstruction shape {rec.shape} != reference shape {ref.shape}")
    if ev.range_mode == "minmax":
        mode = "minmax"
    elif ev.range_mode == "volume-max":
        mode = float(ref.max())
    else:
        try:
            mode = float(ev.range_mode)
        except ValueError:
            raise ConfigError(f"evaluate.range_mode must be minmax, volume-max or a number, "
                              f"got {ev.range_mode!r}") from None
    rows = []
    for k in range(len(rec)):
        rows.append((k, psnr(rec[k], ref[k], mode), ssim(rec[k], ref[k], mode)))
    with open(out / "metrics.csv", "w") as fh:
        fh.write("id,psnr,ssim\n")
        for k, p, s in rows:
            fh.write(f"{k},{_fmt(p)},{_fmt(s)}\n")
    p_mean, p_std = summarize([r[1] for r in rows])
    s_mean, s_std = summarize([r[2] for r in rows])
    with open(out / "summary.csv", "w") as fh:
        fh.write("metric,mean,std\n")
        fh.write(f"psnr,{_fmt(p_mean)},{_fmt(p_std)}\n")
        fh.write(f"ssim,{_fmt(s_mean)},{_fmt(s_std)}\n")
    _log(out, f"evaluate: {len(rows)} images")
    return {"rows": rows, "psnr": (p_mean, p_std), "ssim": (s_mean, s_std)}
