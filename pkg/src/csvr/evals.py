"""Downstream evaluation: fine-tuned recognition, retrieval and the pretext study.

Fine-tuning starts from a V-Network chosen by ``feature_source``:

* ``scratch``: random initialisation.
* ``f_s``: the pretrained V-Network as is.
* ``f_d``: a random V-Network whose projection head is first regressed onto
  the pose generator's dynamic feature (the pose branch has no video encoder
  of its own, so its knowledge reaches the V-Network through this transfer).
* ``f_i`` / ``f_i_full``: the pretrained V-Network, first regressed onto the
  frozen integrated feature of the same checkpoint.

The transfer stage uses unlabelled training clips only.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .config import ModelConfig, TrainConfig, config_to_dict
from .context import VideoEncoder
from .data import TAXONOMY, Corpus, Episode, augment_frames, clip_indices
from .exceptions import CheckpointFormatError, ConfigValueError, DataShapeError, ZeroNormError
from .trainer import TrainState, held_out_samples, load_checkpoint, make_optimizer, pretext_metrics

log = logging.getLogger(__name__)

FEATURE_SOURCES = ("scratch", "f_d", "f_s", "f_i", "f_i_full")
RETRIEVAL_KS = (1, 5, 10, 20)
NUM_WINDOWS = 10
TEST_WINDOWS = 5


# ------------------------------------------------------------------ clips

def window_starts(ep_len: int, cfg: ModelConfig, count: int) -> list:
    """``count`` evenly spaced clip starts covering the whole episode."""
    last = ep_len - cfg.clip_span
    if last < 0:
        raise DataShapeError(f"episode of length {ep_len} is shorter than one clip span {cfg.clip_span}")
    if count == 1:
        return [last // 2]
    return [int(round(v)) for v in np.linspace(0, last, count)]


def window(ep: Episode, start: int, cfg: ModelConfig) -> np.ndarray:
    current, _ = clip_indices(start, cfg)
    if start < 0 or current[-1] >= len(ep):
        raise DataShapeError(f"window at {start} runs past the episode end")
    return ep.frames[current]


def _dtype(module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def video_representation(model: VideoEncoder, episode: Episode, num_windows: int = NUM_WINDOWS) -> np.ndarray:
    """Mean pooled V-Network feature over evenly spaced sliding windows."""
    cfg = model.cfg
    starts = window_starts(len(episode), cfg, num_windows)
    clips = torch.as_tensor(np.stack([window(episode, s, cfg) for s in starts]), dtype=_dtype(model))
    was = model.training
    model.eval()
    feats = model.pool(clips)
    model.train(was)
    return feats.mean(dim=0).cpu().numpy()


# ------------------------------------------------------------------ reports

@dataclass
class EvalReport:
    top1: float
    per_class: dict
    confusion: np.ndarray
    feature_source: str
    seed: int
    classes: list
    config: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, confusion, classes, feature_source, seed, config=None):
        confusion = np.asarray(confusion, dtype=np.int64)
        per_class = {}
        for i, c in enumerate(classes):
            total = int(confusion[i].sum())
            per_class[int(c)] = float(confusion[i, i] / total) if total else float("nan")
        top1 = float(np.trace(confusion) / confusion.sum()) if confusion.sum() else float("nan")
        return cls(top1, per_class, confusion, feature_source, int(seed), [int(c) for c in classes], config or {})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion"] = self.confusion.tolist()
        out["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return out

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


@dataclass
class RetrievalReport:
    recalls: dict
    num_queries: int
    gallery_size: int

    def to_dict(self) -> dict:
        return {"recalls": {str(k): v for k, v in self.recalls.items()},
                "num_queries": self.num_queries, "gallery_size": self.gallery_size}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# ------------------------------------------------------------------ fine-tuning

def _as_state(checkpoint) -> TrainState:
    if isinstance(checkpoint, TrainState):
        return checkpoint
    return load_checkpoint(checkpoint)


def _copy_encoder(state: TrainState, cfg: ModelConfig) -> VideoEncoder:
    if state.model_cfg != cfg:
        raise CheckpointFormatError("checkpoint model config does not match the evaluation config")
    v_net = VideoEncoder(cfg).to(_dtype(state.nets))
    v_net.load_state_dict(copy.deepcopy(state.nets.v_net.state_dict()))
    return v_net


def _train_windows(episodes, cfg, rng, mode="finetune"):
    """One randomly placed, augmented window per episode."""
    clips = []
    for ep in episodes:
        start = int(rng.integers(0, len(ep) - cfg.clip_span + 1))
        clips.append(augment_frames(window(ep, start, cfg), rng, mode))
    return clips


def _lr(ft: TrainConfig, epoch: int, total: int) -> float:
    if ft.schedule == "cosine" and total > 1:
        return 0.5 * ft.lr * (1 + math.cos(math.pi * epoch / total))
    return ft.lr


@torch.no_grad()
def _teacher_targets(nets, cfg: ModelConfig, episodes, starts, source: str) -> torch.Tensor:
    dtype = _dtype(nets)
    pose_in = torch.as_tensor(np.stack([ep.poses[clip_indices(s, cfg)[0]] for ep, s in zip(episodes, starts)]),
                              dtype=dtype)
    f_d = nets.pose_G.dynamic_feature(pose_in)
    if source == "f_d":
        return f_d
    clips = torch.as_tensor(np.stack([window(ep, s, cfg) for ep, s in zip(episodes, starts)]), dtype=dtype)
    _, x_star = nets.v_net(clips)
    return nets.fusion(f_d, x_star)


@torch.no_grad()
def _teacher_stats(nets, cfg: ModelConfig, episodes, source: str, windows: int = 3):
    """Per-dimension mean and spread of the teacher feature over unaugmented windows."""
    feats = []
    for lo in range(0, len(episodes), 32):
        chunk = episodes[lo:lo + 32]
        pairs = [(ep, s) for ep in chunk for s in window_starts(len(ep), cfg, windows)]
        feats.append(_teacher_targets(nets, cfg, [p[0] for p in pairs], [p[1] for p in pairs], source))
    feats = torch.cat(feats)
    return feats.mean(dim=0), feats.std(dim=0).clamp_min(1e-6)


def transfer(student: VideoEncoder, state: TrainState, source: str, episodes, ft: TrainConfig,
             rng: np.random.Generator, epochs: int | None = None) -> VideoEncoder:
    """Regress the student's projection head onto the standardised teacher feature.

    Standardising first keeps a large shared offset in the teacher from
    dominating the cosine objective. The stage continues self-supervised
    training, so it reuses the checkpoint's optimiser and learning rate;
    ``ft`` supplies the batch size and epoch count.
    """
    epochs = ft.transfer_epochs if epochs is None else epochs
    cfg = student.cfg
    teacher = copy.deepcopy(state.nets).eval()
    mean, spread = _teacher_stats(teacher, state.model_cfg, episodes, source)
    lr = state.train_cfg.lr
    opt = make_optimizer(student.parameters(), state.train_cfg)
    student.train()
    for e in range(epochs):
        for g in opt.param_groups:
            g["lr"] = 0.5 * lr * (1 + math.cos(math.pi * e / epochs)) if epochs > 1 else lr
        order = rng.permutation(len(episodes))
        for lo in range(0, len(order), ft.batch_size):
            chunk = [episodes[j] for j in order[lo:lo + ft.batch_size]]
            if len(chunk) < 2:
                continue
            starts = [int(rng.integers(0, len(ep) - cfg.clip_span + 1)) for ep in chunk]
            target = (_teacher_targets(teacher, state.model_cfg, chunk, starts, source) - mean) / spread
            clips = torch.as_tensor(np.stack([augment_frames(window(ep, s, cfg), rng, "pretrain")
                                              for ep, s in zip(chunk, starts)]), dtype=_dtype(student))
            _, x_star = student(clips)
            loss = (1 - F.cosine_similarity(x_star, target, dim=1)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    return student


def train_classifier(v_net: VideoEncoder, episodes, label_index: dict, ft: TrainConfig,
                     rng: np.random.Generator, linear_probe: bool = False) -> VideoEncoder:
    dtype = _dtype(v_net)
    v_net.reset_classifier(len(label_index), ft.dropout)
    v_net.to(dtype)
    params = v_net.classifier.parameters() if linear_probe else v_net.parameters()
    opt = make_optimizer(params, ft)
    cfg = v_net.cfg
    for e in range(ft.epochs):
        for g in opt.param_groups:
            g["lr"] = _lr(ft, e, ft.epochs)
        v_net.train()
        if linear_probe:
            v_net.eval()
            v_net.classifier.train()
        order = rng.permutation(len(episodes))
        for lo in range(0, len(order), ft.batch_size):
            chunk = [episodes[j] for j in order[lo:lo + ft.batch_size]]
            if len(chunk) < 2:
                continue
            clips = torch.as_tensor(np.stack(_train_windows(chunk, cfg, rng)), dtype=_dtype(v_net))
            target = torch.as_tensor([label_index[ep.label] for ep in chunk])
            loss = F.cross_entropy(v_net.logits(clips), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
    v_net.eval()
    return v_net


@torch.no_grad()
def predict_clips(v_net: VideoEncoder, clips: np.ndarray, batch: int = 64) -> np.ndarray:
    """Class probabilities for a stack of clips ``[n, T, Ch, H, W]``."""
    v_net.eval()
    out = []
    for lo in range(0, len(clips), batch):
        x = torch.as_tensor(clips[lo:lo + batch], dtype=_dtype(v_net))
        out.append(torch.softmax(v_net.logits(x), dim=1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def test_windows(episodes, cfg: ModelConfig, count: int = TEST_WINDOWS):
    if not episodes:
        raise DataShapeError("no held-out episodes to evaluate")
    clips, labels = [], []
    for ep in episodes:
        for s in window_starts(len(ep), cfg, count):
            clips.append(window(ep, s, cfg))
            labels.append(ep.label)
    return np.stack(clips), np.asarray(labels)


def evaluate(v_net: VideoEncoder, episodes, classes, feature_source="scratch", seed=0, config=None,
             windows: int = TEST_WINDOWS) -> EvalReport:
    """Clip-level top-1 over evenly spaced windows of every held-out episode."""
    clips, labels = test_windows(episodes, v_net.cfg, windows)
    pred = predict_clips(v_net, clips).argmax(axis=1)
    index = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for y, p in zip(labels, pred):
        confusion[index[int(y)], p] += 1
    return EvalReport.from_confusion(confusion, classes, feature_source, seed, config)


def prepare_encoder(checkpoint, feature_source: str, episodes, mc: ModelConfig, cfg: TrainConfig,
                    rng: np.random.Generator, transfer_epochs: int | None = None) -> VideoEncoder:
    """V-Network initialised for ``feature_source`` (transfer stage included)."""
    if feature_source not in FEATURE_SOURCES:
        raise ConfigValueError("feature_source", f"must be one of {FEATURE_SOURCES}")
    if feature_source == "scratch":
        return VideoEncoder(mc)
    if checkpoint is None:
        raise ConfigValueError("checkpoint", f"feature source {feature_source!r} needs a checkpoint")
    state = _as_state(checkpoint)
    if feature_source == "f_d":
        if state.model_cfg != mc:
            raise CheckpointFormatError("checkpoint model config does not match the evaluation config")
        v_net = VideoEncoder(mc).to(_dtype(state.nets))
    else:
        v_net = _copy_encoder(state, mc)
    if feature_source != "f_s":
        transfer(v_net, state, feature_source, episodes, cfg, rng, transfer_epochs)
    return v_net


def finetune(checkpoint, feature_source: str, dataset: Corpus, cfg: TrainConfig,
             linear_probe: bool = False, transfer_epochs: int | None = None):
    """Fine-tune a V-Network initialised from ``feature_source``; returns ``(model, report)``.

    ``checkpoint`` is a path or an in-memory TrainState and is never modified.
    """
    mc = dataset.cfg
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    train = dataset.train
    v_net = prepare_encoder(checkpoint, feature_source, train, mc, cfg, rng, transfer_epochs)
    label_index = {c: i for i, c in enumerate(dataset.classes)}
    torch.manual_seed(cfg.seed + 1)  # same head init and dropout masks for every source
    train_classifier(v_net, train, label_index, cfg, rng, linear_probe)
    snapshot = config_to_dict(mc, cfg)
    report = evaluate(v_net, dataset.test, dataset.classes, feature_source, cfg.seed, snapshot)
    return v_net, report


# ------------------------------------------------------------------ retrieval

def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("zero feature vector; cosine distance undefined")
    return x / norms


def retrieve_from_features(query, query_labels, gallery, gallery_labels, ks=RETRIEVAL_KS) -> RetrievalReport:
    """Cosine k-NN recall; ties go to the lower gallery index."""
    query, gallery = np.asarray(query, dtype=np.float64), np.asarray(gallery, dtype=np.float64)
    if gallery.shape[0] == 0:
        raise DataShapeError("empty gallery")
    if query.shape[0] == 0:
        raise DataShapeError("no queries")
    sims = _unit_rows(query) @ _unit_rows(gallery).T
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    recalls = {}
    for k in sorted(ks):
        kk = min(k, gallery.shape[0])
        recalls[k] = float(hits[:, :kk].any(axis=1).mean())
    return RetrievalReport(recalls, int(query.shape[0]), int(gallery.shape[0]))


def retrieve(model: VideoEncoder, dataset: Corpus, ks=RETRIEVAL_KS) -> RetrievalReport:
    """Test episodes query the training episodes."""
    if not dataset.train:
        raise DataShapeError("empty gallery")
    if not dataset.test:
        raise DataShapeError("no queries: the test split is empty")
    gallery = np.stack([video_representation(model, ep) for ep in dataset.train])
    query = np.stack([video_representation(model, ep) for ep in dataset.test])
    return retrieve_from_features(query, [ep.label for ep in dataset.test],
                                  gallery, [ep.label for ep in dataset.train], ks)


def random_feature_recall(query_labels, gallery_labels, dim: int = 64, draws: int = 20, seed: int = 0,
                          ks=RETRIEVAL_KS) -> RetrievalReport:
    """Chance-level control: R@k averaged over Gaussian random features."""
    rng = np.random.default_rng(seed)
    totals = {k: 0.0 for k in ks}
    for _ in range(draws):
        rep = retrieve_from_features(rng.standard_normal((len(query_labels), dim)), query_labels,
                                     rng.standard_normal((len(gallery_labels), dim)), gallery_labels, ks)
        for k in ks:
            totals[k] += rep.recalls[k] / draws
    return RetrievalReport(totals, len(query_labels), len(gallery_labels))


# ------------------------------------------------------------------ per-class

def per_class_report(reports: dict) -> dict:
    """Per-class accuracies grouped by class kind, plus count-weighted group means.

    ``reports`` maps a row name (e.g. ``"f_d"``) to an EvalReport.
    """
    names = list(reports)
    if not names:
        raise ConfigValueError("reports", "no reports given")
    classes = reports[names[0]].classes
    for n in names[1:]:
        if reports[n].classes != classes:
            raise ConfigValueError("reports", f"report {n!r} uses a different class list")
    counts = {c: int(reports[names[0]].confusion[i].sum()) for i, c in enumerate(classes)}
    rows = []
    for c in classes:
        rows.append({"class_id": c, "name": TAXONOMY[c].name, "kind": TAXONOMY[c].kind, "count": counts[c],
                     **{n: reports[n].per_class[c] for n in names}})
    groups = {}
    for kind in ("motion", "context", "mixed"):
        members = [r for r in rows if r["kind"] == kind]
        if not members:
            continue
        weight = sum(r["count"] for r in members)
        groups[kind] = {n: sum(r[n] * r["count"] for r in members) / weight for n in names}
    return {"rows": rows, "groups": groups, "sources": names}


def write_per_class_csv(table: dict, path):
    import csv

    with open(path, "w", newline="") as fh:
        fields = ["class_id", "name", "kind", "count", *table["sources"]]
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(table["rows"])
        for kind, means in table["groups"].items():
            writer.writerow({"class_id": "", "name": f"{kind} mean", "kind": kind, "count": "", **means})


# ------------------------------------------------------------------ correlation

@dataclass
class CorrelationTable:
    rows: list
    rho: dict
    undefined: dict


def spearman(a, b) -> tuple[float, bool]:
    """Spearman rho; constant input gives ``(nan, True)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan"), True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = spearmanr(a, b).statistic
    return float(rho), bool(np.isnan(rho))


def correlation_from_rows(rows: list) -> CorrelationTable:
    rho, undefined = {}, {}
    down = [r["downstream_top1"] for r in rows]
    for key in ("context_top1", "pose_mse", "video_quality"):
        rho[key], undefined[key] = spearman(down, [r[key] for r in rows])
    return CorrelationTable(rows, rho, undefined)


def correlation_study(checkpoints: list, dataset: Corpus, cfg: TrainConfig,
                      feature_source: str = "f_i_full", judge=None) -> CorrelationTable:
    """Pretext metrics and short fine-tune accuracy per checkpoint, plus Spearman rho.

    ``judge`` is the discriminator scoring the video-quality proxy for every
    checkpoint; by default the last checkpoint's reconstruction discriminator.
    """
    if len(checkpoints) < 3:
        raise ConfigValueError("checkpoints", "the study needs at least three checkpoints")
    states = [_as_state(c) for c in checkpoints]
    judge = states[-1].nets.video_D_r if judge is None else judge
    rows = []
    for ck, state in zip(checkpoints, states):
        metrics = pretext_metrics(state, held_out_samples(dataset), judge=judge)
        _, report = finetune(state, feature_source, dataset, cfg)
        rows.append({"checkpoint": str(ck) if not isinstance(ck, TrainState) else f"epoch{state.epoch}",
                     "epoch": state.epoch, **metrics, "downstream_top1": report.top1})
    return correlation_from_rows(rows)
