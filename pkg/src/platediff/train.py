"""Two-stage training: absolute weight first, then before/after weight difference."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .domain import Stage
from .encoders import build_prompt
from .errors import CheckpointMismatch, DataError, ShapeMismatch
from .losses import LossWeights, info_nce, l1_regression, total_loss
from .model import Checkpoint, FusionConfig, FusionRegressor

log = logging.getLogger(__name__)


class FeatureBank:
    """Frozen-encoder outputs for a set of queries, computed once.

    Patch features are stored per sample; text features per distinct prompt.
    """

    def __init__(self, encoder):
        self.encoder = encoder
        self._sample_index = {}
        self._before, self._after = [], []
        self._prompt_index = {}
        self._text = []

    def add_queries(self, queries):
        for q in queries:
            s = q.sample
            need_after = Stage(q.stage) is Stage.DIFFERENCE
            idx = self._sample_index.get(s.sample_id)
            if idx is None:
                idx = len(self._before)
                self._sample_index[s.sample_id] = idx
                self._before.append(self.encoder.encode_image(s.before_image, "before").matrix)
                self._after.append(None)
            if need_after and self._after[idx] is None:
                self._after[idx] = self.encoder.encode_image(s.after_image, "after").matrix
            prompt = build_prompt(q.item.name, q.stage)
            if prompt not in self._prompt_index:
                self._prompt_index[prompt] = len(self._text)
                self._text.append(self.encoder.encode_text(prompt).vector[0])
        return self

    def tensors(self, queries, dtype=torch.float32):
        """Index arrays plus stacked feature tensors for ``queries``."""
        self.add_queries(queries)
        stages = {Stage(q.stage) for q in queries}
        if len(stages) > 1:
            raise DataError("queries mix absolute and difference stages")
        stage = stages.pop()
        sample_idx, prompt_idx, targets = [], [], []
        for q in queries:
            sample_idx.append(self._sample_index[q.sample.sample_id])
            prompt_idx.append(self._prompt_index[build_prompt(q.item.name, q.stage)])
            targets.append(q.target)
        used = sorted(set(sample_idx))
        remap = {old: new for new, old in enumerate(used)}
        before = torch.from_numpy(np.stack([self._before[i] for i in used])).to(dtype)
        after = None
        if stage is Stage.DIFFERENCE:
            after = torch.from_numpy(np.stack([self._after[i] for i in used])).to(dtype)
        return QueryTensors(
            stage=stage,
            before=before,
            after=after,
            text=torch.from_numpy(np.stack(self._text)).to(dtype),
            sample_idx=torch.tensor([remap[i] for i in sample_idx], dtype=torch.long),
            prompt_idx=torch.tensor(prompt_idx, dtype=torch.long),
            targets=torch.tensor(targets, dtype=torch.float64),
        )


@dataclass
class QueryTensors:
    stage: Stage
    before: torch.Tensor  # S x N x D_I
    after: Optional[torch.Tensor]
    text: torch.Tensor  # P x D_T
    sample_idx: torch.Tensor  # Q
    prompt_idx: torch.Tensor  # Q
    targets: torch.Tensor  # Q, float64 grams

    def __len__(self):
        return len(self.targets)

    def batch(self, idx):
        s = self.sample_idx[idx]
        Fa = None if self.after is None else self.after[s]
        return self.before[s], self.text[self.prompt_idx[idx]], Fa


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.ABSOLUTE
    base_lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 150
    batch_size: int = 32
    schedule: str = "cosine"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    init_from: Optional[Union[str, Path, Checkpoint]] = None
    allow_scratch: bool = False  # difference stage without a stage-1 checkpoint
    reset_head: bool = False
    grad_clip: Optional[float] = None
    normalize_targets: bool = True  # fresh models only: scale outputs by mean |target|
    checkpoint_path: Optional[Union[str, Path]] = None
    log_path: Optional[Union[str, Path]] = None

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.stage is Stage.DIFFERENCE and self.init_from is None and not self.allow_scratch:
            raise ValueError("the difference stage needs init_from (or allow_scratch=True)")


def cosine_lr(base_lr, step, total_steps):
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class TrainReport:
    stage: str
    epochs: list
    steps: list
    total_steps: int
    final_lr: float
    wall_seconds: float
    encoder_digest_before: str
    encoder_digest_after: str
    checkpoint_path: Optional[str] = None

    @property
    def lr_trace(self):
        return [s["lr"] for s in self.steps]


def _check_queries(queries, stage):
    if not queries:
        raise DataError("no training queries")
    bad = [q for q in queries if Stage(q.stage) is not stage]
    if bad:
        raise DataError(f"{len(bad)} queries are not stage={stage.value}")


def _fresh_model(encoder, model_config, data, normalize):
    info = encoder.info
    if model_config is None:
        model_config = FusionConfig(image_dim=info.D_I, text_dim=info.D_T)
    if (model_config.image_dim, model_config.text_dim) != (info.D_I, info.D_T):
        raise ShapeMismatch("model input dims do not match the encoder")
    if normalize:
        scale = float(data.targets.abs().mean())
        if scale > 0:
            model_config = model_config.replace(target_scale=scale)
    return FusionRegressor(model_config)


def train_stage1(queries, config, encoder, model_config=None, bank=None):
    """Absolute-weight training; the after slot repeats the before image."""
    if config.stage is not Stage.ABSOLUTE:
        raise ValueError("train_stage1 needs a stage=absolute config")
    _check_queries(queries, Stage.ABSOLUTE)
    data = (bank or FeatureBank(encoder)).tensors(queries)
    if config.init_from is not None:
        model = _model_from(config.init_from, model_config, encoder, config.reset_head)
    else:
        model = _fresh_model(encoder, model_config, data, config.normalize_targets)
    return _fit(model, data, config, encoder)


def train_stage2(queries, config, encoder, model_config=None, bank=None):
    """Difference fine-tuning starting from every parameter of a stage-1 checkpoint."""
    if config.stage is not Stage.DIFFERENCE:
        raise ValueError("train_stage2 needs a stage=difference config")
    _check_queries(queries, Stage.DIFFERENCE)
    data = (bank or FeatureBank(encoder)).tensors(queries)
    if config.init_from is None:
        model = _fresh_model(encoder, model_config, data, config.normalize_targets)
    else:
        if config.checkpoint_path is not None and isinstance(config.init_from, (str, Path)):
            if Path(config.checkpoint_path).resolve() == Path(config.init_from).resolve():
                raise ValueError("refusing to overwrite the stage-1 checkpoint")
        model = _model_from(config.init_from, model_config, encoder, config.reset_head)
    return _fit(model, data, config, encoder)


def _model_from(init_from, model_config, encoder, reset_head):
    ckpt = init_from if isinstance(init_from, Checkpoint) else Checkpoint.load(init_from)
    c = ckpt.config
    if model_config is not None:
        for key in ("d_k", "heads", "ablation"):
            if getattr(model_config, key) != getattr(c, key):
                raise CheckpointMismatch(
                    f"{key}: checkpoint has {getattr(c, key)!r}, requested {getattr(model_config, key)!r}"
                )
    if (c.image_dim, c.text_dim) != (encoder.info.D_I, encoder.info.D_T):
        raise CheckpointMismatch("checkpoint input dims do not match the encoder")
    model = ckpt.build_model()
    if reset_head:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.init_seed + 1)
            model.head.reset_parameters()
        torch.nn.init.zeros_(model.head.bias)
    return model


def _fit(model, data, config, encoder):
    t0 = time.perf_counter()
    enc_digest = encoder.parameter_digest()
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    n = len(data)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    gen = torch.Generator().manual_seed(config.seed)
    w = config.loss_weights
    log_fh = None
    if config.log_path is not None:
        Path(config.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(config.log_path, "w", encoding="utf-8")

    steps, epochs = [], []
    step = 0
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(n, generator=gen)
            sums = np.zeros(3)
            for b in range(per_epoch):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                lr = config.base_lr if config.schedule == "constant" else cosine_lr(config.base_lr, step, total)
                for g in opt.param_groups:
                    g["lr"] = lr
                Fb, t, Fa = data.batch(idx)
                out = model(Fb, t, Fa)
                reg = l1_regression(out.prediction.double(), data.targets[idx])
                cont = info_nce(out.z_attn, out.q_text, w.temperature).double() if w.lambda_cont > 0 else reg.new_zeros(())
                loss = total_loss(reg, cont, w)
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                rec = {"stage": config.stage.value, "epoch": epoch, "step": step, **loss.as_floats(), "lr": lr}
                steps.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                sums += (rec["reg"], rec["cont"], rec["total"])
                step += 1
            means = sums / per_epoch
            epochs.append({"epoch": epoch, "reg": means[0], "cont": means[1], "total": means[2], "lr": steps[-1]["lr"]})
            log.info("stage=%s epoch=%d reg=%.4f cont=%.4f", config.stage.value, epoch, means[0], means[1])
    finally:
        if log_fh is not None:
            log_fh.close()

    model.eval()
    ckpt = Checkpoint.from_model(model, config.stage.value, step, config.seed)
    if config.checkpoint_path is not None:
        ckpt.save(config.checkpoint_path)
    final_lr = config.base_lr if config.schedule == "constant" else cosine_lr(config.base_lr, total, total)
    report = TrainReport(
        stage=config.stage.value,
        epochs=epochs,
        steps=steps,
        total_steps=total,
        final_lr=final_lr,
        wall_seconds=time.perf_counter() - t0,
        encoder_digest_before=enc_digest,
        encoder_digest_after=encoder.parameter_digest(),
        checkpoint_path=None if ckpt.path is None else str(ckpt.path),
    )
    return ckpt, report


@torch.no_grad()
def predict(model, queries, encoder=None, bank=None, batch_size=128, return_attention=False):
    """Predictions (grams, float64) for ``queries``; optionally the head-averaged attention."""
    if bank is None:
        bank = FeatureBank(encoder)
    data = bank.tensors(queries)
    model.eval()
    dtype = next(model.parameters()).dtype
    preds, attn = [], []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        Fb, t, Fa = data.batch(idx)
        out = model(Fb.to(dtype), t.to(dtype), None if Fa is None else Fa.to(dtype))
        preds.append(out.prediction.double())
        if return_attention:
            attn.append(out.attention.double())
    preds = torch.cat(preds).numpy()
    if return_attention:
        return preds, torch.cat(attn).numpy()
    return preds
