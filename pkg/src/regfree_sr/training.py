"""Adversarial training loop.

Every step: generator forward on the LR batch, one (or ``d_steps_per_g_step``)
discriminator update on (real HR, generated SR), then a generator update on
the weighted perceptual loss using fresh discriminator outputs. Both networks
use Adam.

Randomness is derived, never carried: the epoch-``e`` shuffle comes from
``make_rng(seed, 7, e)`` and re-noising from ``make_rng(seed, 8, e, batch)``, so
a run resumed from any checkpoint replays the same sequence.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import losses as LS
from .dataset import DatasetManifest
from .degradation import degrade_array
from .image import gaussian_samples, make_rng
from .metrics import psnr
from .nn import (
    Discriminator,
    DiscriminatorConfig,
    FeatureConfig,
    FeatureExtractor,
    Generator,
    GeneratorConfig,
    NetworkParams,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LossWeights = LS.LossWeights


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 1
    seed: int = 0
    d_steps_per_g_step: int = 1
    pretrain_epochs: int = 0  # MSE-only generator epochs before adversarial training
    renoise: bool = False
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def export(self, prefix):
        out = {}
        for k in self.m:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def restore(self, prefix, tensors, t, dtype):
        self.t = t
        for k, v in tensors.items():
            if k.startswith(prefix + "/m/"):
                self.m[k[len(prefix) + 3 :]] = v.astype(dtype)
            elif k.startswith(prefix + "/v/"):
                self.v[k[len(prefix) + 3 :]] = v.astype(dtype)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    features: FeatureExtractor
    opt_g: Adam
    opt_d: Adam
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def init_state(
    config: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    feat_cfg: FeatureConfig,
) -> TrainState:
    dtype = np.dtype(config.dtype)
    mk = lambda: Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    return TrainState(
        generator=Generator(gen_cfg, seed=config.seed, dtype=dtype),
        discriminator=Discriminator(disc_cfg, seed=config.seed, dtype=dtype),
        features=FeatureExtractor(feat_cfg, dtype=dtype),
        opt_g=mk(),
        opt_d=mk(),
    )


def _check_finite(losses: LS.LossBreakdown, step):
    bad = {k: v for k, v in asdict(losses).items() if not np.isfinite(v)}
    if bad:
        raise FloatingPointError(f"non-finite loss at step {step}: {bad}")


def train_step(state: TrainState, lr_batch, hr_batch, config: TrainConfig, adversarial=True) -> LS.LossBreakdown:
    """One optimization step; updates ``state`` in place and returns the losses.

    With ``adversarial=False`` (pretraining) only the MSE term is optimized and
    the discriminator is left untouched; the other terms are still reported.
    """
    G, D, F = state.generator, state.discriminator, state.features
    dtype = G.dtype
    lr_batch = np.asarray(lr_batch, dtype=dtype)
    hr_batch = np.asarray(hr_batch, dtype=dtype)
    r = G.config.upscale
    if hr_batch.shape[1:3] != (lr_batch.shape[1] * r, lr_batch.shape[2] * r) or hr_batch.shape[0] != lr_batch.shape[0]:
        raise ValueError(f"batch shapes {lr_batch.shape} / {hr_batch.shape} do not match upscale {r}")

    sr, g_cache = G.forward(lr_batch, train=True)
    if not np.all(np.isfinite(sr)):
        raise FloatingPointError(f"non-finite generator output at step {state.step + 1}")

    d_val = float("nan")
    if adversarial:
        for _ in range(config.d_steps_per_g_step):
            p_real, c_real = D.forward(hr_batch, train=True)
            p_fake, c_fake = D.forward(sr, train=True)
            d_val = LS.d_loss(p_real, p_fake)
            g_real, g_fake = LS.d_loss_grad(p_real, p_fake)
            grads, _ = D.backward(c_real, g_real.astype(dtype))
            grads_f, _ = D.backward(c_fake, g_fake.astype(dtype))
            for k in grads:
                grads[k] = grads[k] + grads_f[k]
            state.opt_d.step(D.params, grads)

    w = config.weights
    p_fake, c_adv = D.forward(sr, train=True, update_stats=False)
    adv = LS.adv_loss_g(p_fake)
    mse = LS.mse_loss(sr, hr_batch)
    phi_sr, c_feat = F.forward(sr)
    phi_hr, _ = F.forward(hr_batch)
    feat = LS.feat_loss(phi_sr, phi_hr)
    if not adversarial:
        d_val = LS.d_loss(D.forward(hr_batch, train=True, update_stats=False)[0], p_fake)

    d_sr = w.w_mse * LS.mse_loss_grad(sr, hr_batch)
    if adversarial:
        if w.w_feat > 0:
            d_sr = d_sr + w.w_feat * F.backward(c_feat, LS.feat_loss_grad(phi_sr, phi_hr).astype(dtype))[1]
        if w.w_adv > 0:
            d_sr = d_sr + w.w_adv * D.backward(c_adv, LS.adv_loss_g_grad(p_fake).astype(dtype), input_only=True)[1]
        total = LS.total_g_loss(mse, feat, adv, w)
    else:
        total = w.w_mse * mse
    grads, _ = G.backward(g_cache, d_sr.astype(dtype))
    state.opt_g.step(G.params, grads)

    state.step += 1
    out = LS.LossBreakdown(mse=mse, feat=feat, adv=adv, total=total, d_loss=d_val)
    _check_finite(out, state.step)
    state.history.append(out)
    return out


def generator_batches(generator, lr, batch_size=16):
    out = [generator(lr[i : i + batch_size]) for i in range(0, len(lr), batch_size)]
    return np.concatenate(out)


def validation_psnr(generator, lr, hr, batch_size=16) -> float:
    sr = np.clip(generator_batches(generator, lr, batch_size), 0.0, 1.0)
    return float(np.mean([psnr(a, b) for a, b in zip(sr, hr)]))


def state_to_params(state: TrainState, config: TrainConfig) -> NetworkParams:
    extra = {}
    extra.update(state.opt_g.export("adam_g"))
    extra.update(state.opt_d.export("adam_d"))
    return NetworkParams(
        generator=state.generator,
        discriminator=state.discriminator,
        features=state.features.config,
        state={
            "epoch": state.epoch,
            "step": state.step,
            "adam_g_t": state.opt_g.t,
            "adam_d_t": state.opt_d.t,
            "train_config": asdict(config),
        },
        extra=extra,
    )


def state_from_checkpoint(path, config: TrainConfig) -> TrainState:
    dtype = np.dtype(config.dtype)
    nets = load_checkpoint(path, dtype=dtype)
    if nets.discriminator is None:
        raise ValueError(f"{path} has no discriminator; cannot resume training from it")
    st = nets.state
    mk = lambda: Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    state = TrainState(
        generator=nets.generator,
        discriminator=nets.discriminator,
        features=FeatureExtractor(nets.features, dtype=dtype),
        opt_g=mk(),
        opt_d=mk(),
        epoch=int(st.get("epoch", 0)),
        step=int(st.get("step", 0)),
    )
    state.opt_g.restore("adam_g", nets.extra, int(st.get("adam_g_t", 0)), dtype)
    state.opt_d.restore("adam_d", nets.extra, int(st.get("adam_d_t", 0)), dtype)
    return state


def _truncate_log(path, max_step):
    if not os.path.exists(path):
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= max_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir,
    gen_cfg: Optional[GeneratorConfig] = None,
    disc_cfg: Optional[DiscriminatorConfig] = None,
    feat_cfg: Optional[FeatureConfig] = None,
    resume: Optional[str] = None,
) -> str:
    """Run the epoch loop and return the path of the final checkpoint.

    Writes under ``out_dir``: ``checkpoints/epoch_NNNN.ckpt``, ``final.ckpt``,
    ``train_log.csv`` (one row per step), ``val_log.csv`` (one row per epoch)
    and ``summary.json``.
    """
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    train_lr, train_hr = manifest.stack("train")
    if train_lr is None:
        raise ValueError("the dataset has no training pairs")
    val_lr, val_hr = manifest.stack("validation")
    dtype = np.dtype(config.dtype)
    train_lr, train_hr = train_lr.astype(dtype), train_hr.astype(dtype)

    c = train_lr.shape[3]
    gen_cfg = gen_cfg or GeneratorConfig(upscale=manifest.factor, channels=c)
    disc_cfg = disc_cfg or DiscriminatorConfig(input_size=train_hr.shape[1], channels=c)
    feat_cfg = feat_cfg or FeatureConfig(channels=c)
    if gen_cfg.upscale != manifest.factor:
        raise ValueError(f"generator upscale {gen_cfg.upscale} != dataset factor {manifest.factor}")

    if resume:
        state = state_from_checkpoint(resume, config)
    else:
        state = init_state(config, gen_cfg, disc_cfg, feat_cfg)

    log_path = os.path.join(out_dir, "train_log.csv")
    val_path = os.path.join(out_dir, "val_log.csv")
    if resume:
        _truncate_log(log_path, state.step)
        _truncate_log(val_path, state.epoch)
    loss_log = LS.LossLog(log_path, resume=bool(resume))
    if not resume or not os.path.exists(val_path):
        with open(val_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "val_psnr"])

    def checkpoint():
        path = os.path.join(out_dir, "checkpoints", f"epoch_{state.epoch:04d}.ckpt")
        save_checkpoint(path, state_to_params(state, config))
        return path

    last = checkpoint() if state.epoch == 0 else None
    n = len(train_lr)
    bs = config.batch_size
    t0 = time.perf_counter()
    while state.epoch < config.epochs:
        e = state.epoch
        adversarial = e >= config.pretrain_epochs
        order = make_rng(config.seed, 7, e).permutation(n)
        for bi, i in enumerate(range(0, n, bs)):
            idx = order[i : i + bs]
            lr_b, hr_b = train_lr[idx], train_hr[idx]
            if config.renoise:
                lr_b = _renoise(hr_b, manifest, config, e, bi).astype(dtype)
            losses = train_step(state, lr_b, hr_b, config, adversarial=adversarial)
            loss_log.append(state.step, losses)
        state.epoch += 1
        vp = float("nan")
        if val_lr is not None:
            vp = validation_psnr(state.generator, val_lr, val_hr)
        with open(val_path, "a", newline="") as fh:
            csv.writer(fh).writerow([state.epoch, repr(vp)])
        log.info("epoch %d/%d  step %d  val_psnr %.3f dB", state.epoch, config.epochs, state.step, vp)
        if state.epoch % config.checkpoint_interval == 0 or state.epoch == config.epochs:
            last = checkpoint()
    if last is None:
        last = checkpoint()
    final = os.path.join(out_dir, "final.ckpt")
    shutil.copyfile(last, final)

    summary = {
        "train_config": asdict(config),
        "generator": asdict(state.generator.config),
        "discriminator": asdict(state.discriminator.config),
        "features": asdict(state.features.config),
        "epochs_completed": state.epoch,
        "steps": state.step,
        "n_train_pairs": int(n),
        "n_validation_pairs": 0 if val_lr is None else int(len(val_lr)),
        "final_val_psnr": validation_psnr(state.generator, val_lr, val_hr) if val_lr is not None else None,
        "final_checkpoint": final,
        "wall_time_s": time.perf_counter() - t0,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return final


def _renoise(hr_b, manifest, config, epoch, batch_index):
    """Fresh noise on the patch-level noise-free simulation of each HR patch."""
    p = manifest.params
    clean = np.stack([degrade_array(h, p.replace(noise_variance=0.0)) for h in hr_b])
    if p.noise_variance > 0:
        rng = make_rng(config.seed, 8, epoch, batch_index)
        clean = clean + gaussian_samples(rng, clean.size, 0.0, p.noise_variance).reshape(clean.shape)
    return np.clip(clean, 0.0, 1.0)
