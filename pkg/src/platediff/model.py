"""Text-queried cross-attention fusion regressor.

Flow for one food item (batched over the leading axis):

    H = phi_img([F_before ; F_after])      # patch axis, 2N x d_k, shared phi_img
    q = phi_text(t)                        # d_k
    a = softmax(q K^T / sqrt(d_k)),  K = H
    z = a V,                               # V = H + per-image source embedding
    h = FFN(z) + z
    y = scale * R(h)

The source embedding is added to the values only. Keys stay untouched, so
with identical before/after features the attention over row i and row N+i is
exactly equal; the embedding lets the regressor tell how much attention mass
landed on each image, which a permutation-invariant patch set cannot.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, ShapeMismatch

ABLATIONS = ("image_and_text", "image_only", "text_only")
CHECKPOINT_FORMAT = "platediff-checkpoint-1"


@dataclass(frozen=True)
class FusionConfig:
    image_dim: int
    text_dim: int
    d_k: int = 512
    ffn_hidden: int = 2048
    heads: int = 1
    ablation: str = "image_and_text"
    init_seed: int = 0
    target_scale: float = 1.0
    pre_norm: bool = False

    def __post_init__(self):
        if self.d_k <= 0 or self.ffn_hidden <= 0:
            raise ValueError("d_k and ffn_hidden must be positive")
        if self.heads <= 0 or self.d_k % self.heads:
            raise ValueError("heads must divide d_k")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if not self.target_scale > 0:
            raise ValueError("target_scale must be positive")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw):
        return FusionConfig(**{**asdict(self), **kw})


@dataclass
class FusionOutput:
    attention: torch.Tensor  # B x 2N, averaged over heads
    head_attention: torch.Tensor  # B x heads x 2N
    z_attn: torch.Tensor  # B x d_k
    h_res: torch.Tensor  # B x d_k
    q_text: torch.Tensor  # B x d_k
    prediction: torch.Tensor  # B


class MLP(nn.Sequential):
    def __init__(self, d_in, d_hidden, d_out):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


def cross_attend(q, K, V=None, heads=1):
    """Scaled dot-product attention of one query per batch element.

    q: (B, d), K/V: (B, M, d). Returns (attention (B, heads, M), z (B, d));
    per-head outputs are concatenated, no output projection.
    """
    if V is None:
        V = K
    if q.dim() != 2 or K.dim() != 3 or K.shape != V.shape or q.shape[0] != K.shape[0] or q.shape[1] != K.shape[2]:
        raise ShapeMismatch(f"incompatible shapes q={tuple(q.shape)} K={tuple(K.shape)} V={tuple(V.shape)}")
    B, M, d = K.shape
    if d % heads:
        raise ShapeMismatch("heads must divide the feature dimension")
    dh = d // heads
    qh = q.view(B, heads, 1, dh)
    Kh = K.view(B, M, heads, dh).transpose(1, 2)
    Vh = V.view(B, M, heads, dh).transpose(1, 2)
    logits = (qh @ Kh.transpose(-1, -2)) / math.sqrt(dh)
    attn = torch.softmax(logits, dim=-1)
    z = (attn @ Vh).reshape(B, d)
    return attn.squeeze(2), z


class FusionRegressor(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.init_seed)
            self.phi_img = MLP(c.image_dim, c.d_k, c.d_k)
            self.phi_text = MLP(c.text_dim, c.d_k, c.d_k)
            self.ffn = MLP(c.d_k, c.ffn_hidden, c.d_k)
            self.head = nn.Linear(c.d_k, 1)
            self.out_proj = nn.Linear(c.d_k, c.d_k) if c.heads > 1 else None
            self.const_query = nn.Parameter(torch.randn(c.d_k) / math.sqrt(c.d_k)) if c.ablation == "image_only" else None
        nn.init.zeros_(self.head.bias)
        self.source_embed = nn.Parameter(torch.zeros(2, c.d_k))
        self.norm = nn.LayerNorm(c.d_k) if c.pre_norm else None

    def project(self, F_before, t, F_after=None):
        """Patch-axis concatenation after a shared projection.

        ``F_after=None`` means the before features stand in for the after slot
        (absolute stage); the projection is then computed once and repeated.
        """
        if F_before.dim() != 3 or t.dim() != 2:
            raise ShapeMismatch("expected batched inputs: F (B, N, D_I), t (B, D_T)")
        if F_after is not None and F_after.shape != F_before.shape:
            raise ShapeMismatch(f"before {tuple(F_before.shape)} and after {tuple(F_after.shape)} features differ")
        Hb = self.phi_img(F_before)
        Ha = Hb if F_after is None else self.phi_img(F_after)
        return torch.cat([Hb, Ha], dim=1), self.phi_text(t)

    def forward(self, F_before, t, F_after=None):
        H, q = self.project(F_before, t, F_after)
        B, M, d = H.shape
        n = M // 2
        if self.config.ablation == "text_only":
            head_attn = H.new_full((B, 1, M), 1.0 / M)
            z = q
        else:
            query = self.const_query.expand(B, d) if self.config.ablation == "image_only" else q
            K = H
            if self.norm is not None:
                K, query = self.norm(K), self.norm(query)
            seg = torch.cat([self.source_embed[0].expand(n, d), self.source_embed[1].expand(n, d)])
            V = K + seg
            head_attn, z = cross_attend(query, K, V, self.config.heads)
            if self.out_proj is not None:
                z = self.out_proj(z)
        h = self.ffn(z) + z
        pred = self.head(h).squeeze(-1) * self.config.target_scale
        return FusionOutput(head_attn.mean(dim=1), head_attn, z, h, q, pred)


def parameter_digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    config: FusionConfig
    state: dict
    stage: str
    step: int
    seed: int
    path: Optional[Path] = None

    @classmethod
    def from_model(cls, model, stage, step, seed):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.config, state, str(stage), int(step), int(seed))

    def build_model(self, dtype=torch.float32):
        model = FusionRegressor(self.config)
        model.load_state_dict(self.state)
        return model.to(dtype)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "stage": self.stage,
            "step": self.step,
            "seed": self.seed,
            "state": self.state,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        self.path = path
        return path

    @classmethod
    def load(cls, path):
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch(f"{path} is not a platediff checkpoint")
        return cls(
            FusionConfig.from_dict(payload["config"]),
            payload["state"],
            payload["stage"],
            payload["step"],
            payload["seed"],
            Path(path),
        )

    def digest(self):
        h = hashlib.sha256()
        for name, t in sorted(self.state.items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()
