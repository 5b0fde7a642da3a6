"""Staged pretraining: per-branch warmup, then joint end-to-end optimisation.

The joint generator-side objective is ``sigma_p * L_pose + sigma_c * L_context
+ L_video``. Discriminators minimise their own logistic losses. By default one
shared forward pass feeds both updates (simultaneous G/D step); the
``alternating`` strategy re-runs the forward after the discriminator step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, TrainConfig, config_from_dict, config_to_dict
from .containers import load_arrays, save_arrays
from .context import IFrameEncoder, VideoEncoder, mi_infonce, sample_negatives
from .data import Corpus, augment_clip, max_start, random_clip, sample_clip
from .exceptions import (CheckpointFormatError, CheckpointVersionError, ConfigValueError,
                         TrainingDivergedError)
from .fusion import IntegrationLayer
from .pose import PoseDiscriminator, PoseGenerator, pose_branch_losses, pose_recon_loss
from .video import VideoDiscriminator, VideoGenerator, video_branch_losses

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# module attribute -> checkpoint array prefix
NETWORK_PREFIXES = {
    "pose_G": "pose_branch/generator",
    "pose_D": "pose_branch/discriminator",
    "v_net": "context_branch/v_net",
    "i_net": "context_branch/i_net",
    "fusion": "fusion",
    "video_G_r": "video_branch/recon_generator",
    "video_D_r": "video_branch/recon_discriminator",
    "video_G_p": "video_branch/pred_generator",
    "video_D_p": "video_branch/pred_discriminator",
}
GENERATOR_SIDE = ("pose_G", "v_net", "i_net", "fusion", "video_G_r", "video_G_p")
DISCRIMINATOR_SIDE = ("pose_D", "video_D_r", "video_D_p")

MODES = {
    "full": {"pose": True, "context": True, "video": True, "recon": True, "pred": True},
    "f_d_only": {"pose": True, "context": False, "video": False, "recon": False, "pred": False},
    "f_s_only": {"pose": False, "context": True, "video": False, "recon": False, "pred": False},
    "f_i_no_video": {"pose": True, "context": True, "video": False, "recon": False, "pred": False},
    "recon_only": {"pose": True, "context": True, "video": True, "recon": True, "pred": False},
    "pred_only": {"pose": True, "context": True, "video": True, "recon": False, "pred": True},
}

LOG_FIELDS = ("epoch", "stage", "L_pose", "L_pose_D", "L_context", "L_r", "L_r_D", "L_p", "L_p_D",
              "L_video", "L_total", "pose_mse", "context_top1", "video_quality", "lr", "wall_time")


class CSVRNetworks(nn.Module):
    """All nine networks of the framework."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        z_p, z_r, z_f = cfg.noise_dims
        self.pose_G = PoseGenerator(cfg)
        self.pose_D = PoseDiscriminator(cfg)
        self.v_net = VideoEncoder(cfg)
        self.i_net = IFrameEncoder(cfg)
        self.fusion = IntegrationLayer(cfg.feature_dim)
        self.video_G_r = VideoGenerator(cfg, cfg.clip_len, z_r)
        self.video_D_r = VideoDiscriminator(cfg, cfg.clip_len)
        self.video_G_p = VideoGenerator(cfg, cfg.future_len, z_f)
        self.video_D_p = VideoDiscriminator(cfg, cfg.future_len)

    def named_group(self, names):
        for name in names:
            for pname, p in getattr(self, name).named_parameters():
                yield f"{NETWORK_PREFIXES[name]}/{pname}", p

    def flat_state(self) -> dict:
        out = {}
        for name, prefix in NETWORK_PREFIXES.items():
            for key, value in getattr(self, name).state_dict().items():
                out[f"{prefix}/{key}"] = value
        return out

    def load_flat_state(self, arrays: dict, strict: bool = True):
        for name, prefix in NETWORK_PREFIXES.items():
            module = getattr(self, name)
            own = module.state_dict()
            sub = {}
            for key, ref in own.items():
                full = f"{prefix}/{key}"
                if full not in arrays:
                    if strict:
                        raise CheckpointFormatError(f"checkpoint lacks array {full!r}")
                    continue
                value = torch.as_tensor(arrays[full])
                if ref.dim() == 0 and value.numel() == 1:
                    value = value.reshape(())  # the container stores scalars as [1]
                if tuple(value.shape) != tuple(ref.shape):
                    raise CheckpointFormatError(
                        f"array {full!r} has shape {tuple(value.shape)}, expected {tuple(ref.shape)}")
                sub[key] = value.to(ref.dtype)
            module.load_state_dict(sub, strict=strict)


def expected_array_names(cfg: ModelConfig) -> set:
    """Network array names a checkpoint must carry (optimizer/rng arrays excluded)."""
    return set(CSVRNetworks(cfg).flat_state())


@dataclass
class MetricLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("metric log epochs must strictly increase")
        self.rows.append({k: row.get(k, 0.0) for k in LOG_FIELDS})

    def column(self, name: str, stage: str | None = None) -> list:
        return [r[name] for r in self.rows if stage is None or r["stage"] == stage]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def make_optimizer(params, train: TrainConfig, lr: float | None = None) -> torch.optim.Optimizer:
    """SGD with momentum, or AdamW with decoupled decay, per ``train.optimizer``."""
    lr = train.lr if lr is None else lr
    if train.optimizer == "adam":
        return torch.optim.AdamW(params, lr=lr, betas=tuple(train.adam_betas),
                                 weight_decay=train.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=train.momentum, weight_decay=train.weight_decay)


class _OptimizerPair:
    """Separate optimisers for the generator and discriminator sides.

    Per-parameter state is stored as ``optim/<side>/<slot>/<param name>``.
    """

    def __init__(self, nets: CSVRNetworks, train: TrainConfig):
        self.gen_named = list(nets.named_group(GENERATOR_SIDE))
        self.disc_named = list(nets.named_group(DISCRIMINATOR_SIDE))
        self.gen = make_optimizer([p for _, p in self.gen_named], train)
        self.disc = make_optimizer([p for _, p in self.disc_named], train)

    def _sides(self):
        return (("generator", self.gen, self.gen_named),
                ("discriminator", self.disc, self.disc_named))

    def set_lr(self, lr):
        for opt in (self.gen, self.disc):
            for g in opt.param_groups:
                g["lr"] = lr

    def state_arrays(self) -> dict:
        out = {}
        for tag, opt, named in self._sides():
            for name, p in named:
                for slot, value in opt.state.get(p, {}).items():
                    if torch.is_tensor(value):
                        out[f"optim/{tag}/{slot}/{name}"] = value.detach().reshape(value.shape or (1,)).clone()
        return out

    def load_state_arrays(self, arrays: dict):
        for tag, opt, named in self._sides():
            for name, p in named:
                for key, value in arrays.items():
                    prefix = f"optim/{tag}/"
                    if not key.startswith(prefix) or not key.endswith("/" + name):
                        continue
                    slot = key[len(prefix):-len(name) - 1]
                    if "/" in slot:
                        continue
                    t = torch.as_tensor(value).clone()
                    if slot == "step":
                        t = t.reshape(()).to(torch.float32)
                    else:
                        t = t.to(p.dtype).reshape(p.shape)
                    opt.state[p][slot] = t


@dataclass
class TrainState:
    nets: CSVRNetworks
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    mode: str
    optim: _OptimizerPair
    noise: torch.Generator
    rng: np.random.Generator
    epoch: int = 0
    stage: str = "init"
    log: MetricLog = field(default_factory=MetricLog)

    @property
    def flags(self) -> dict:
        return MODES[self.mode]


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, mode: str = "full",
               dtype=torch.float32) -> TrainState:
    if mode not in MODES:
        raise ConfigValueError("mode", f"unknown pretraining mode {mode!r}")
    torch.manual_seed(train_cfg.seed)
    nets = CSVRNetworks(model_cfg).to(dtype)
    noise = torch.Generator().manual_seed(train_cfg.seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))
    return TrainState(nets, model_cfg, train_cfg, mode, _OptimizerPair(nets, train_cfg), noise, rng)


# ------------------------------------------------------------------ batches

def collate(samples: list, dtype=torch.float32) -> dict:
    """Stack ClipSamples into tensors; I-frames are flattened with an owner index."""
    def stack(name):
        return torch.as_tensor(np.stack([getattr(s, name) for s in samples]), dtype=dtype)

    iframes, owners = [], []
    for i, s in enumerate(samples):
        iframes.extend(s.iframes)
        owners.extend([i] * len(s.iframes))
    return {
        "clip": stack("clip"),
        "pose_in": stack("pose_in"),
        "pose_future": stack("pose_future"),
        "future_clip": stack("future_clip"),
        "current_target": stack("current_target"),
        "iframes": torch.as_tensor(np.stack(iframes), dtype=dtype),
        "owners": torch.as_tensor(owners, dtype=torch.long),
        "episode_ids": torch.as_tensor([s.episode_id for s in samples], dtype=torch.long),
        "labels": torch.as_tensor([s.label for s in samples], dtype=torch.long),
    }


def epoch_batches(episodes: list, cfg: ModelConfig, train: TrainConfig, rng: np.random.Generator,
                  augment: str | None = "pretrain"):
    order = np.concatenate([rng.permutation(len(episodes)) for _ in range(train.clips_per_episode)])
    for lo in range(0, len(order), train.batch_size):
        chunk = order[lo:lo + train.batch_size]
        if len(chunk) < 2:
            continue
        samples = []
        for j in chunk:
            s = random_clip(episodes[j], cfg, rng)
            samples.append(augment_clip(s, rng, augment) if augment else s)
        yield samples


def fixed_samples(episodes: list, cfg: ModelConfig) -> list:
    """One deterministic, unaugmented clip per episode (centre window)."""
    return [sample_clip(ep, max_start(len(ep), cfg) // 2, cfg) for ep in episodes]


def held_out_samples(corpus: Corpus) -> list:
    """Metric clips from the test split; tiny corpora without one fall back to train."""
    return fixed_samples(corpus.test or corpus.train, corpus.cfg)


# ------------------------------------------------------------------ steps

def _split_positives(z_star, owners, batch):
    return [z_star[owners == i] for i in range(batch)]


def compute_losses(state: TrainState, batch: dict, flags: dict | None = None) -> dict:
    """One forward pass over every active branch; returns loss tensors by name."""
    flags = state.flags if flags is None else flags
    nets, mc, tc = state.nets, state.model_cfg, state.train_cfg
    dtype = batch["clip"].dtype
    bsz = batch["clip"].shape[0]
    zero = batch["clip"].new_zeros(())
    out = {k: zero for k in ("L_pose", "L_pose_D", "L_context", "L_r", "L_r_D", "L_p", "L_p_D",
                             "L_video", "pose_mse")}

    def noise(dim):
        return torch.randn(bsz, dim, generator=state.noise).to(dtype)

    f_d = None
    if flags["pose"] or flags["video"]:
        z_p = noise(mc.noise_dims[0])
        eps = torch.rand(bsz, generator=state.noise).to(dtype)
        if flags["pose"]:
            pl = pose_branch_losses(nets.pose_G, nets.pose_D, batch["pose_in"], batch["pose_future"],
                                    z_p, tc.gp_lambda, tc.non_saturating, eps=eps,
                                    recon_weight=tc.pose_recon_weight)
            out["L_pose"], out["L_pose_D"], out["pose_mse"] = pl.generator, pl.discriminator, pl.recon
        f_d = nets.pose_G.dynamic_feature(batch["pose_in"])

    x_star = None
    if flags["context"] or flags["video"]:
        _, x_star = nets.v_net(batch["clip"])
    if flags["context"]:
        _, z_star = nets.i_net(batch["iframes"])
        positives = _split_positives(z_star, batch["owners"], bsz)
        negatives = None
        if not tc.full_negative_pool:
            picks = sample_negatives(batch["owners"], batch["episode_ids"], tc.num_negatives, state.noise)
            negatives = [z_star[idx] for idx in picks]
        out["L_context"] = mi_infonce(x_star, positives, tc.temperature, negatives)

    if flags["video"]:
        f_i = nets.fusion(f_d, x_star)
        vl = video_branch_losses(
            (nets.video_G_r, nets.video_D_r), (nets.video_G_p, nets.video_D_p), f_i,
            batch["current_target"], batch["future_clip"],
            noise(mc.noise_dims[1]), noise(mc.noise_dims[2]),
            use_recon=flags["recon"], use_pred=flags["pred"], non_saturating=tc.non_saturating)
        out.update(L_r=vl.recon_G, L_r_D=vl.recon_D, L_p=vl.pred_G, L_p_D=vl.pred_D, L_video=vl.video_G)

    out["L_total"] = total_loss(tc.sigma_p, tc.sigma_c, out["L_pose"], out["L_context"], out["L_video"])
    out["L_disc"] = out["L_pose_D"] + out["L_r_D"] + out["L_p_D"]
    return out


def total_loss(sigma_p, sigma_c, l_pose, l_context, l_video):
    return sigma_p * l_pose + sigma_c * l_context + l_video


def _grads(loss, named):
    params = [p for _, p in named]
    if not params or not loss.requires_grad:
        return None
    return torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)


def _step(grads, named, optimizer):
    """Apply precomputed gradients; untouched groups skip the optimiser entirely."""
    if grads is None or all(g is None for g in grads):
        return
    params = [p for _, p in named]
    for p, g in zip(params, grads):
        p.grad = g
    optimizer.step()
    for p in params:
        p.grad = None


def _simultaneous(pairs):
    """Take every gradient from the current graph first, then step every optimiser."""
    grads = [_grads(loss, named) for loss, named, _ in pairs]
    for g, (_, named, opt) in zip(grads, pairs):
        _step(g, named, opt)


def _check_finite(losses: dict, state: TrainState):
    bad = [k for k, v in losses.items() if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v))]
    if bad:
        raise TrainingDivergedError(f"non-finite loss {bad} at {state.stage} epoch {state.epoch}")


_PREFIX_TO_NAME = {v: k for k, v in NETWORK_PREFIXES.items()}


def _owner(param_name: str) -> str:
    for prefix, name in _PREFIX_TO_NAME.items():
        if param_name.startswith(prefix + "/"):
            return name
    raise KeyError(param_name)


def _losses_to_floats(losses: dict) -> dict:
    return {k: float(v.detach()) for k, v in losses.items()}


def joint_step(state: TrainState, samples, flags: dict | None = None) -> tuple[TrainState, dict]:
    """One joint optimisation step on a batch of ClipSamples (or a collated dict)."""
    batch = samples if isinstance(samples, dict) else collate(samples, _dtype(state))
    state.nets.train()
    losses = compute_losses(state, batch, flags)
    _check_finite(losses, state)
    opt = state.optim
    if state.train_cfg.update_strategy == "simultaneous":
        _simultaneous([(losses["L_disc"], opt.disc_named, opt.disc),
                       (losses["L_total"], opt.gen_named, opt.gen)])
    else:
        _step(_grads(losses["L_disc"], opt.disc_named), opt.disc_named, opt.disc)
        losses = compute_losses(state, batch, flags)
        _check_finite(losses, state)
        _step(_grads(losses["L_total"], opt.gen_named), opt.gen_named, opt.gen)
    return state, _losses_to_floats(losses)


def warmup_step(state: TrainState, samples) -> dict:
    """Train each active GAN (and optionally the context branch) on its own objective."""
    batch = samples if isinstance(samples, dict) else collate(samples, _dtype(state))
    nets, tc, flags = state.nets, state.train_cfg, state.flags
    nets.train()
    result = {}
    if flags["pose"]:
        losses = compute_losses(state, batch, {**MODES["f_d_only"]})
        _check_finite(losses, state)
        named_d = [(n, p) for n, p in state.optim.disc_named if _owner(n) == "pose_D"]
        named_g = [(n, p) for n, p in state.optim.gen_named if _owner(n) == "pose_G"]
        _simultaneous([(losses["L_pose_D"], named_d, state.optim.disc),
                       (losses["L_pose"], named_g, state.optim.gen)])
        result.update({k: float(losses[k].detach()) for k in ("L_pose", "L_pose_D", "pose_mse")})
    if flags["video"]:
        with torch.no_grad():
            f_d = nets.pose_G.dynamic_feature(batch["pose_in"])
            _, x_star = nets.v_net(batch["clip"])
            f_i = nets.fusion(f_d, x_star)
        bsz = f_i.shape[0]
        mc = state.model_cfg
        z_r = torch.randn(bsz, mc.noise_dims[1], generator=state.noise).to(f_i.dtype)
        z_f = torch.randn(bsz, mc.noise_dims[2], generator=state.noise).to(f_i.dtype)
        vl = video_branch_losses((nets.video_G_r, nets.video_D_r), (nets.video_G_p, nets.video_D_p),
                                 f_i, batch["current_target"], batch["future_clip"], z_r, z_f,
                                 use_recon=flags["recon"], use_pred=flags["pred"],
                                 non_saturating=tc.non_saturating)
        vals = {"L_r": vl.recon_G, "L_r_D": vl.recon_D, "L_p": vl.pred_G, "L_p_D": vl.pred_D,
                "L_video": vl.video_G}
        _check_finite(vals, state)
        named_d = [(n, p) for n, p in state.optim.disc_named if _owner(n) in ("video_D_r", "video_D_p")]
        named_g = [(n, p) for n, p in state.optim.gen_named if _owner(n) in ("video_G_r", "video_G_p")]
        _simultaneous([(vl.recon_D + vl.pred_D, named_d, state.optim.disc),
                       (vl.video_G, named_g, state.optim.gen)])
        result.update({k: float(v.detach()) for k, v in vals.items()})
    if flags["context"] and tc.warmup_context:
        losses = compute_losses(state, batch, {**MODES["f_s_only"]})
        _check_finite(losses, state)
        named_g = [(n, p) for n, p in state.optim.gen_named if _owner(n) in ("v_net", "i_net")]
        _step(_grads(losses["L_context"], named_g), named_g, state.optim.gen)
        result["L_context"] = float(losses["L_context"].detach())
    return result


def _dtype(state: TrainState):
    return next(state.nets.parameters()).dtype


# ------------------------------------------------------------------ metrics

@torch.no_grad()
def pretext_metrics(state: TrainState, samples: list, judge: nn.Module | None = None) -> dict:
    """Held-out pose MSE, context-matching top-1 and the video-quality proxy."""
    nets = state.nets
    was_training = nets.training
    nets.eval()
    batch = collate(samples, _dtype(state))
    bsz = batch["clip"].shape[0]
    gen = torch.Generator().manual_seed(12345)
    mc = state.model_cfg
    z_p = torch.zeros(bsz, mc.noise_dims[0], dtype=batch["clip"].dtype)
    pose_gen = nets.pose_G(batch["pose_in"], z_p)
    pose_mse = float(pose_recon_loss(pose_gen, batch["pose_future"]))

    _, x_star = nets.v_net(batch["clip"])
    _, z_star = nets.i_net(batch["iframes"])
    context_top1 = context_matching_accuracy(x_star, z_star, batch["owners"], batch["episode_ids"],
                                             state.train_cfg.num_negatives)

    f_d = nets.pose_G.dynamic_feature(batch["pose_in"])
    f_i = nets.fusion(f_d, x_star)
    z_r = torch.randn(bsz, mc.noise_dims[1], generator=gen).to(f_i.dtype)
    fake = nets.video_G_r(f_i, z_r)
    quality = video_quality_proxy(judge if judge is not None else nets.video_D_r,
                                  batch["current_target"], fake)
    nets.train(was_training)
    return {"pose_mse": pose_mse, "context_top1": context_top1, "video_quality": quality}


@torch.no_grad()
def context_matching_accuracy(x_star, z_star, owners, episode_ids, num_negatives: int, seed: int = 0) -> float:
    """Share of (clip, own I-frame) pairs scoring above every I-frame of a fixed negative pool.

    The pool holds ``num_negatives`` I-frames of other episodes, drawn once
    from ``seed``, matching the pool size used in training.
    """
    gen = torch.Generator().manual_seed(seed)
    picks = sample_negatives(owners, episode_ids, num_negatives, gen)
    x = torch.nn.functional.normalize(x_star, dim=1)
    z = torch.nn.functional.normalize(z_star, dim=1)
    hits, total = 0, 0
    for i in range(x.shape[0]):
        pos = z[owners == i] @ x[i]
        neg = z[picks[i]] @ x[i]
        best = neg.max() if neg.numel() else pos.new_tensor(-float("inf"))
        hits += int((pos > best).sum())
        total += pos.numel()
    return hits / max(total, 1)


@torch.no_grad()
def video_quality_proxy(judge: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> float:
    """1 - (mean D(real) - mean D(fake)) with D the judge's sigmoid confidence.

    Higher is better: the judge finds generated clips as plausible as real ones.
    """
    real_conf = torch.sigmoid(judge(real)).mean()
    fake_conf = torch.sigmoid(judge(fake)).mean()
    return float(1.0 - (real_conf - fake_conf))


# ------------------------------------------------------------------ loops

def _lr_at(train: TrainConfig, epoch: int, total: int) -> float:
    if train.schedule == "cosine" and total > 1:
        return 0.5 * train.lr * (1 + math.cos(math.pi * epoch / total))
    return train.lr


def _run_epochs(state: TrainState, corpus: Corpus, epochs: int, stage: str, step_fn,
                eval_samples: list, checkpoint_dir=None, on_epoch=None):
    train_eps = corpus.train
    for e in range(epochs):
        state.stage = stage
        lr = _lr_at(state.train_cfg, e, epochs)
        state.optim.set_lr(lr)
        t0 = time.perf_counter()
        sums, count = {}, 0
        for samples in epoch_batches(train_eps, state.model_cfg, state.train_cfg, state.rng):
            try:
                values = step_fn(state, samples)
            except TrainingDivergedError as exc:
                # the failing step never reached the optimiser, so the state is still finite
                if checkpoint_dir is not None:
                    exc.checkpoint_path = str(save_checkpoint(state, Path(checkpoint_dir) / "last_finite.safetensors"))
                raise
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        state.epoch += 1
        row = {k: v / max(count, 1) for k, v in sums.items()}
        row.update(pretext_metrics(state, eval_samples))
        row.update(epoch=state.epoch, stage=stage, lr=lr, wall_time=time.perf_counter() - t0)
        state.log.append(row)
        log.info("%s epoch %d: %s", stage, state.epoch,
                 {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"{stage}_epoch{state.epoch:03d}.safetensors")
        if on_epoch is not None:
            on_epoch(state)
    return state


def pretrain_warmup(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    mode: str = "full", state: TrainState | None = None, checkpoint_dir=None) -> TrainState:
    """Warm each active GAN on its own objective for ``warmup_epochs`` epochs."""
    state = state or init_state(model_cfg, train_cfg, mode)
    eval_samples = held_out_samples(corpus)
    active = state.flags["pose"] or state.flags["video"] or (
        state.flags["context"] and train_cfg.warmup_context)
    if active and train_cfg.warmup_epochs:
        _run_epochs(state, corpus, train_cfg.warmup_epochs, "warmup",
                    lambda s, b: warmup_step(s, b), eval_samples, checkpoint_dir)
    return state


def pretrain(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig, mode: str = "full",
             checkpoint_dir=None, warmup: bool = True, on_epoch=None) -> TrainState:
    """Warmup followed by ``train_cfg.epochs`` joint epochs."""
    state = init_state(model_cfg, train_cfg, mode)
    if warmup:
        pretrain_warmup(corpus, model_cfg, train_cfg, mode, state, checkpoint_dir)
    eval_samples = held_out_samples(corpus)
    _run_epochs(state, corpus, train_cfg.epochs, "joint",
                lambda s, b: joint_step(s, b)[1], eval_samples, checkpoint_dir, on_epoch)
    return state


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: TrainState, path) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in state.nets.flat_state().items()}
    arrays.update({k: v.cpu().numpy() for k, v in state.optim.state_arrays().items()})
    arrays["rng/torch_noise"] = state.noise.get_state().numpy()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(state.model_cfg, state.train_cfg),
        "mode": state.mode,
        "epoch": state.epoch,
        "stage": state.stage,
        "numpy_rng": state.rng.bit_generator.state,
        "metric_log": state.log.rows,
        "dtype": str(_dtype(state)).replace("torch.", ""),
    }
    return save_arrays(path, arrays, meta)


def read_checkpoint(path) -> tuple[dict, dict]:
    arrays, meta = load_arrays(path)
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format {version!r}, this code reads {CHECKPOINT_VERSION}")
    if "config" not in meta:
        raise CheckpointFormatError(f"{path}: metadata lacks the config snapshot")
    return arrays, meta


def load_checkpoint(path) -> TrainState:
    arrays, meta = read_checkpoint(path)
    model_cfg, train_cfg = config_from_dict(meta["config"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    state = init_state(model_cfg, train_cfg, meta["mode"], dtype=dtype)
    state.nets.load_flat_state(arrays)
    state.optim.load_state_arrays(arrays)
    if "rng/torch_noise" in arrays:
        state.noise.set_state(torch.as_tensor(arrays["rng/torch_noise"]))
    state.rng.bit_generator.state = meta["numpy_rng"]
    state.epoch = int(meta["epoch"])
    state.stage = meta.get("stage", "init")
    state.log = MetricLog(list(meta.get("metric_log", [])))
    return state


SIGMA_GRID = (0.5, 0.75, 1.0, 1.25, 1.5)


def sigma_grid(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
               values=SIGMA_GRID, score=None, warmup: bool = True) -> list:
    """Pretrain once per (sigma_p, sigma_c) pair; one row per pair.

    ``score(state) -> float`` adds a downstream column when given.
    """
    rows = []
    for sp in values:
        for sc in values:
            cfg = replace(train_cfg, sigma_p=sp, sigma_c=sc)
            state = pretrain(corpus, model_cfg, cfg, "full", warmup=warmup)
            last = state.log.rows[-1]
            row = {"sigma_p": sp, "sigma_c": sc, "L_total": last["L_total"], "pose_mse": last["pose_mse"],
                   "context_top1": last["context_top1"], "video_quality": last["video_quality"]}
            if score is not None:
                row["downstream_top1"] = float(score(state))
            rows.append(row)
    return rows
