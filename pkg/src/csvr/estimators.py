"""scikit-learn style wrappers around pretraining and fine-tuning."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import ModelConfig, TrainConfig, finetune_defaults
from .context import VideoEncoder
from .data import Corpus, Episode, split_indices
from .evals import (TEST_WINDOWS, predict_clips, prepare_encoder, test_windows, train_classifier,
                    video_representation)
from .exceptions import DataShapeError
from .trainer import TrainState, load_checkpoint, pretrain, save_checkpoint


def check_episodes(X, cfg: ModelConfig) -> list:
    """A non-empty list of Episodes whose frames match ``cfg``."""
    if isinstance(X, Corpus):
        X = X.episodes
    X = list(X)
    if not X:
        raise DataShapeError("no episodes given")
    want = (cfg.channels, *cfg.frame_size)
    for i, ep in enumerate(X):
        if not isinstance(ep, Episode):
            raise TypeError(f"item {i} is {type(ep).__name__}, expected Episode")
        if ep.frames.ndim != 4 or tuple(ep.frames.shape[1:]) != want:
            raise DataShapeError(f"episode {i} frames {ep.frames.shape[1:]} do not match {want}")
        if len(ep) < cfg.clip_span:
            raise DataShapeError(f"episode {i} is shorter than one clip ({len(ep)} < {cfg.clip_span})")
    return X


def check_clips(X, cfg: ModelConfig) -> np.ndarray:
    """A float array ``[n, T, Ch, H, W]`` matching ``cfg``."""
    X = np.asarray(X, dtype=np.float32)
    want = (cfg.clip_len, cfg.channels, *cfg.frame_size)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or tuple(X.shape[1:]) != want:
        raise DataShapeError(f"clips must be [n, {', '.join(map(str, want))}], got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("clips contain non-finite values")
    return X


def _is_episode_input(X) -> bool:
    if isinstance(X, Corpus):
        return True
    return isinstance(X, (list, tuple)) and len(X) > 0 and isinstance(X[0], Episode)


def _as_corpus(X, cfg: ModelConfig, seed: int) -> Corpus:
    if isinstance(X, Corpus):
        return X
    episodes = [dataclasses.replace(ep, episode_id=i) for i, ep in enumerate(check_episodes(X, cfg))]
    labels = [ep.label for ep in episodes]
    train, test = split_indices(labels, seed) if len(episodes) >= 5 else (list(range(len(episodes))), [])
    if not test:
        test = train[-1:]
    return Corpus(episodes, train, test, sorted(set(labels)), cfg)


class CSVRPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised pretraining; ``transform`` maps clips or episodes to pooled features.

    ``fit`` ignores labels. A plain list of episodes is split internally so
    the held-out pretext metrics have clips to score.
    """

    def __init__(self, mode="full", model_config=None, train_config=None, warmup=True,
                 checkpoint_dir=None):
        self.mode = mode
        self.model_config = model_config
        self.train_config = train_config
        self.warmup = warmup
        self.checkpoint_dir = checkpoint_dir

    def _configs(self):
        return self.model_config or ModelConfig(), self.train_config or TrainConfig()

    def fit(self, X, y=None):
        mc, tc = self._configs()
        corpus = _as_corpus(X, mc, tc.seed)
        self.state_ = pretrain(corpus, mc, tc, self.mode, self.checkpoint_dir, self.warmup)
        self.metric_log_ = self.state_.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("CSVRPretrainer is not fitted yet; call fit first")

    @property
    def encoder_(self) -> VideoEncoder:
        self._check_fitted()
        return self.state_.nets.v_net

    def transform(self, X):
        self._check_fitted()
        mc = self.state_.model_cfg
        v_net = self.state_.nets.v_net
        if _is_episode_input(X):
            return np.stack([video_representation(v_net, ep) for ep in check_episodes(X, mc)])
        clips = check_clips(X, mc)
        was = v_net.training
        v_net.eval()
        with torch.no_grad():
            out = v_net.pool(torch.as_tensor(clips, dtype=next(v_net.parameters()).dtype)).numpy()
        v_net.train(was)
        return out

    def save(self, path):
        self._check_fitted()
        return save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path) -> "CSVRPretrainer":
        state = load_checkpoint(path)
        est = cls(mode=state.mode, model_config=state.model_cfg, train_config=state.train_cfg)
        est.state_ = state
        est.metric_log_ = state.log
        return est


class ActionRecognizer(BaseEstimator, ClassifierMixin):
    """Fine-tuned V-Network classifier.

    ``pretrained`` is a checkpoint path, a TrainState or a fitted
    CSVRPretrainer; it is required unless ``feature_source='scratch'``.
    Episode inputs are scored by averaging class probabilities over evenly
    spaced windows.
    """

    def __init__(self, feature_source="scratch", pretrained=None, train_config=None,
                 model_config=None, linear_probe=False, windows=TEST_WINDOWS):
        self.feature_source = feature_source
        self.pretrained = pretrained
        self.train_config = train_config
        self.model_config = model_config
        self.linear_probe = linear_probe
        self.windows = windows

    def _checkpoint(self):
        if isinstance(self.pretrained, CSVRPretrainer):
            self.pretrained._check_fitted()
            return self.pretrained.state_
        return self.pretrained

    def _model_config(self, checkpoint) -> ModelConfig:
        if self.model_config is not None:
            return self.model_config
        if isinstance(checkpoint, TrainState):
            return checkpoint.model_cfg
        if checkpoint is not None:
            return load_checkpoint(checkpoint).model_cfg
        return ModelConfig()

    def fit(self, X, y=None):
        checkpoint = self._checkpoint()
        mc = self._model_config(checkpoint)
        ft = self.train_config or finetune_defaults("A")
        episodes = check_episodes(X, mc)
        if y is not None:
            y = np.asarray(y)
            if len(y) != len(episodes):
                raise DataShapeError(f"{len(episodes)} episodes but {len(y)} labels")
            episodes = [dataclasses.replace(ep, label=int(lab)) for ep, lab in zip(episodes, y)]
        self.classes_ = np.array(sorted({ep.label for ep in episodes}))
        torch.manual_seed(ft.seed)
        rng = np.random.default_rng(np.random.SeedSequence([ft.seed, 7]))
        v_net = prepare_encoder(checkpoint, self.feature_source, episodes, mc, ft, rng)
        torch.manual_seed(ft.seed + 1)
        label_index = {int(c): i for i, c in enumerate(self.classes_)}
        self.model_ = train_classifier(v_net, episodes, label_index, ft, rng, self.linear_probe)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ActionRecognizer is not fitted yet; call fit first")

    def predict_proba(self, X):
        self._check_fitted()
        cfg = self.model_.cfg
        if _is_episode_input(X):
            episodes = check_episodes(X, cfg)
            clips, _ = test_windows(episodes, cfg, self.windows)
            probs = predict_clips(self.model_, clips)
            return probs.reshape(len(episodes), self.windows, -1).mean(axis=1)
        return predict_clips(self.model_, check_clips(X, cfg))

    def predict(self, X):
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
