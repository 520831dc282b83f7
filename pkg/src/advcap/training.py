"""Training regimes: clean baseline, adversarial-only, mixed, and the two frozen-group variants."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .attack import AttackConfig, fgsm
from .data import CaptionDataset
from .errors import ConfigError, TrainingError
from .model import CaptionModel, ModelConfig, forward_loss, save_checkpoint, set_group_trainable

log = logging.getLogger(__name__)

PHASES = ("baseline", "adv_only", "adv_mixed", "freeze_encoder", "freeze_decoder")
FROZEN_GROUP = {"freeze_encoder": "encoder", "freeze_decoder": "decoder"}


@dataclass
class TrainConfig:
    phase: str = "baseline"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    trials: int | None = None
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.trials is None:
            self.trials = 3 if self.phase in FROZEN_GROUP else 1
        if self.trials < 1 or self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError(f"invalid training settings: {self}")

    @property
    def frozen_group(self) -> str | None:
        return FROZEN_GROUP.get(self.phase)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainedArtifact:
    model: CaptionModel
    phase: str
    history: list[float]
    seed: int

    def checkpoint(self) -> dict:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def save(self, path, extra: dict | None = None) -> Path:
        return save_checkpoint(self.model, path, {"phase": self.phase, "history": self.history,
                                                  "seed": self.seed, **(extra or {})})


def _fit(model: CaptionModel, data: CaptionDataset, cfg: TrainConfig, log_path=None) -> list[float]:
    params = [p for p in model.parameters() if p.requires_grad]
    history: list[float] = []
    if cfg.epochs == 0:
        return history
    if not params:
        raise ConfigError("no trainable parameters")
    torch.manual_seed(cfg.seed)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=0.0)
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    sink = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            perm = torch.randperm(len(data), generator=order_gen)
            total, seen = 0.0, 0
            for start in range(0, len(data), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                loss = forward_loss(data.pixels[idx], data.captions(idx), model)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            mean = total / seen
            if not math.isfinite(mean):
                raise TrainingError(f"{cfg.phase}: loss diverged at epoch {epoch}", epoch=epoch)
            history.append(mean)
            if sink:
                sink.write(json.dumps({"phase": cfg.phase, "seed": cfg.seed, "epoch": epoch,
                                       "loss": mean, "examples": seen}) + "\n")
    finally:
        if sink:
            sink.close()
        model.eval()
    return history


def init_model(model_config: ModelConfig, seed: int) -> CaptionModel:
    torch.manual_seed(seed)
    return CaptionModel(model_config)


def train_baseline(data: CaptionDataset, cfg: TrainConfig, model_config: ModelConfig,
                   log_path=None) -> TrainedArtifact:
    if cfg.phase != "baseline":
        raise ConfigError(f"train_baseline called with phase {cfg.phase!r}")
    model = init_model(model_config, cfg.seed)
    history = _fit(model, data, cfg, log_path)
    return TrainedArtifact(model, cfg.phase, history, cfg.seed)


def build_adversarial_dataset(model: CaptionModel, data: CaptionDataset, attack: AttackConfig,
                              batch_size: int = 64) -> CaptionDataset:
    """One FGSM example per source image; captions are carried over unchanged."""
    chunks = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        adv = fgsm(model, data.images(idx), data.captions(idx), attack)
        chunks.append(adv.perturbed.pixels)
    return data.with_pixels(torch.cat(chunks))


def phase_training_set(data: CaptionDataset, adv: CaptionDataset | None, phase: str) -> CaptionDataset:
    if phase == "baseline":
        return data
    if adv is None:
        raise ConfigError(f"phase {phase!r} needs an adversarial split")
    if phase == "adv_only":
        return adv
    return CaptionDataset.concat([data, adv])


def train_phase(data: CaptionDataset, adv: CaptionDataset | None, cfg: TrainConfig,
                init: CaptionModel, log_path=None) -> TrainedArtifact:
    """Continue training ``init`` (left untouched) under one of the adversarial regimes."""
    if cfg.phase == "baseline":
        raise ConfigError("use train_baseline for the baseline phase")
    train_set = phase_training_set(data, adv, cfg.phase)
    model = copy.deepcopy(init)
    for group in ("encoder", "decoder"):
        set_group_trainable(model, group, group != cfg.frozen_group)
    history = _fit(model, train_set, cfg, log_path)
    return TrainedArtifact(model, cfg.phase, history, cfg.seed)


@dataclass
class TrialSummary:
    values: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    seeds: list[int]


def summarize(values: Sequence[dict[str, float]], seeds: Sequence[int]) -> TrialSummary:
    keys = list(values[0])
    mean = {k: statistics.fmean(v[k] for v in values) for k in keys}
    std = {k: statistics.stdev([v[k] for v in values]) if len(values) > 1 else 0.0 for k in keys}
    return TrialSummary(list(values), mean, std, list(seeds))


def run_trials(cfg: TrainConfig, data: CaptionDataset, adv: CaptionDataset | None, init: CaptionModel,
               evaluate: Callable[[TrainedArtifact], dict[str, float]],
               on_trial: Callable[[int, TrainedArtifact], None] | None = None,
               same_seed: bool = False, log_path=None) -> TrialSummary:
    """Train ``cfg.trials`` times with seeds seed, seed+1, ... and average the evaluations."""
    values, seeds = [], []
    for k in range(cfg.trials):
        seed = cfg.seed if same_seed else cfg.seed + k
        trial_cfg = dataclasses.replace(cfg, seed=seed)
        try:
            art = train_phase(data, adv, trial_cfg, init, log_path)
        except TrainingError as exc:
            raise TrainingError(f"trial {k} failed: {exc}", epoch=exc.epoch, trial=k) from exc
        if on_trial:
            on_trial(k, art)
        values.append(evaluate(art))
        seeds.append(seed)
    return summarize(values, seeds)
