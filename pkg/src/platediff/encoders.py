"""Frozen feature extraction backends.

Two backends share one interface: :class:`ClipEncoder` wraps a pretrained
contrastive vision-language model, :class:`StubEncoder` is a seeded,
dependency-free stand-in whose text and patch features live in a joint space
built so that a class name lines up with that class's colour.
"""
from __future__ import annotations

import hashlib
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DEFAULT_BACKGROUND, DEFAULT_CLASSES, load_image
from .domain import Stage
from .errors import BackendUnavailable, SpecError, ValidationError

PROMPT_TEMPLATES = {
    Stage.ABSOLUTE: "What is the weight of the {item} in this image?",
    Stage.DIFFERENCE: "What is the difference in weight of the {item} in these images?",
}


def build_prompt(item_name, stage):
    if not isinstance(item_name, str) or not item_name:
        raise ValueError("item_name must be a non-empty string")
    return PROMPT_TEMPLATES[Stage(stage)].format(item=item_name)


@dataclass(frozen=True)
class EncoderInfo:
    name: str
    D_I: int
    D_T: int
    N: int
    frozen: bool = True

    def __post_init__(self):
        if self.frozen is not True:
            raise ValueError("encoders are always frozen")


@dataclass(frozen=True, eq=False)
class PatchFeatures:
    matrix: np.ndarray  # N x D_I
    source: str = "before"

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValidationError("patch matrix must be 2-D", field="matrix")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("patch features contain non-finite values", field="matrix")
        if self.source not in ("before", "after"):
            raise ValidationError(f"bad source {self.source!r}", field="source")

    @property
    def N(self):
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class TextFeature:
    vector: np.ndarray  # 1 x D_T

    def __post_init__(self):
        if self.vector.ndim != 2 or self.vector.shape[0] != 1:
            raise ValidationError("text feature must be 1 x D_T", field="vector")
        if not np.isfinite(self.vector).all():
            raise ValidationError("text feature contains non-finite values", field="vector")


class Encoder:
    """Interface for frozen image/text encoders."""

    info: EncoderInfo

    def encode_image(self, image, source="before"):
        raise NotImplementedError

    def encode_text(self, prompt):
        raise NotImplementedError

    def parameter_digest(self):
        raise NotImplementedError


def image_digest(image):
    arr = np.ascontiguousarray(load_image(image))
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------------- stub

_EDGE_PUNCT = "?.,!;:\"'()[]"


def tokenize(prompt):
    toks = (t.strip(_EDGE_PUNCT) for t in prompt.lower().split())
    return [t for t in toks if t]


def token_bin(token, seed, n_bins, offset):
    """Salted blake2b hash of ``token`` into bins ``offset .. offset + n_bins - 1``."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
    return offset + int.from_bytes(digest, "little") % n_bins


def patch_statistics(image, patch):
    """Per-patch (mean R, mean G, mean B, std of gray) in [0, 1], row-major."""
    arr = load_image(image).astype(np.float64) / 255.0
    h, w, _ = arr.shape
    gh, gw = h // patch, w // patch
    arr = arr[: gh * patch, : gw * patch]
    blocks = arr.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch, 3)
    means = blocks.mean(axis=1)
    gray = blocks @ np.array([0.299, 0.587, 0.114])
    return np.concatenate([means, gray.std(axis=1, keepdims=True)], axis=1)


class StubEncoder(Encoder):
    """Deterministic stand-in for a pretrained dual encoder.

    Image side: per 14x14 patch statistics times a fixed seeded ``D x 4``
    matrix. Text side: a 64-bin bag of tokens times a fixed ``D x 64``
    matrix. Bins ``0..k-1`` are reserved for the tokens of the registered
    class names; every other token is hashed into the remaining bins. Columns
    for non-class tokens are orthogonal to the image feature subspace, and a
    class token's column is built so that its inner product with a patch
    feature equals ``scale * (s_class - s_mean) . s_patch``. Hence each class
    prompt scores highest against patches of its own colour.
    """

    n_bins = 64

    def __init__(self, classes=DEFAULT_CLASSES, dim=64, image_size=336, patch=14, seed=0,
                 background=DEFAULT_BACKGROUND):
        if image_size % patch:
            raise ValueError("image_size must be a multiple of patch")
        if dim < 8:
            raise ValueError("stub dim must be at least 8")
        self.image_size, self.patch, self.seed = image_size, patch, seed
        n = (image_size // patch) ** 2
        self.info = EncoderInfo(name=f"stub-d{dim}-s{seed}", D_I=dim, D_T=dim, N=n)

        rng = np.random.default_rng([seed, 7741])
        self.image_matrix = rng.standard_normal((dim, 4))
        W = self.image_matrix
        pinv_t = W @ np.linalg.inv(W.T @ W)  # W (W^T W)^-1, so W^T @ pinv_t = I
        complement = np.eye(dim) - pinv_t @ W.T

        classes = [(c.name, c.color) if hasattr(c, "name") else (c[0], c[1]) for c in classes]
        token_owner = {}
        for name, _ in classes:
            for tok in set(tokenize(name)):
                token_owner.setdefault(tok, set()).add(name)
        class_tokens = sorted(token_owner)
        if len(class_tokens) > self.n_bins // 2:
            raise SpecError("too many class tokens for the stub vocabulary")
        self.reserved = {tok: i for i, tok in enumerate(class_tokens)}

        T = complement @ rng.standard_normal((dim, self.n_bins))
        stats = {name: np.array([*np.asarray(color, float) / 255.0, 0.0]) for name, color in classes}
        anchor = np.mean([*stats.values(), np.array([*np.asarray(background, float) / 255.0, 0.0])], axis=0)
        col_norm = np.sqrt(dim)
        for name, _ in classes:
            unique = [t for t in set(tokenize(name)) if token_owner[t] == {name}]
            if not unique:
                raise SpecError(f"class {name!r} has no token of its own")
            direction = pinv_t @ (stats[name] - anchor)
            direction *= col_norm / np.linalg.norm(direction)
            for tok in unique:
                T[:, self.reserved[tok]] = direction / len(unique)
        self.text_matrix = T
        self.class_stats = stats
        self._anchor = anchor
        self._check_joint_space()

    def _check_joint_space(self):
        names = list(self.class_stats)
        for c in names:
            u = self.class_stats[c] - self._anchor
            own = u @ self.class_stats[c]
            for o in names:
                if o != c and not u @ self.class_stats[o] < own:
                    raise SpecError(f"stub colours for {c!r} and {o!r} are not separable in the joint space")

    def bag(self, prompt):
        v = np.zeros(self.n_bins)
        k = len(self.reserved)
        for tok in tokenize(prompt):
            idx = self.reserved.get(tok)
            if idx is None:
                idx = token_bin(tok, self.seed, self.n_bins - k, k)
            v[idx] += 1.0
        return v

    def encode_image(self, image, source="before"):
        arr = load_image(image)
        if arr.shape[:2] != (self.image_size, self.image_size):
            arr = np.asarray(Image.fromarray(arr).resize((self.image_size, self.image_size), Image.BILINEAR))
        stats = patch_statistics(arr, self.patch)
        return PatchFeatures((stats @ self.image_matrix.T).astype(np.float32), source)

    def encode_text(self, prompt):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        return TextFeature((self.text_matrix @ self.bag(prompt)).astype(np.float32)[None, :])

    def parameter_digest(self):
        h = hashlib.sha256()
        for arr in (self.image_matrix, self.text_matrix):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------- pretrained

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DEFAULT_CLIP = "openai/clip-vit-large-patch14-336"


class ClipEncoder(Encoder):
    """Adapter over a Hugging Face CLIP model.

    Patch features are the vision transformer's final-layer token outputs
    without the class token; the text feature is the pooled, projected
    sentence embedding. ``model``/``tokenizer`` may be injected directly,
    otherwise they are loaded from ``model_name`` and any failure surfaces as
    :class:`BackendUnavailable`.
    """

    def __init__(self, model_name=DEFAULT_CLIP, model=None, tokenizer=None, local_files_only=False):
        import torch

        self._torch = torch
        if model is None:
            try:
                from transformers import CLIPModel, CLIPTokenizer

                model = CLIPModel.from_pretrained(model_name, local_files_only=local_files_only)
                tokenizer = CLIPTokenizer.from_pretrained(model_name, local_files_only=local_files_only)
            except Exception as exc:  # network, missing files, bad revision...
                raise BackendUnavailable(f"could not load {model_name}: {exc}") from exc
        if tokenizer is None:
            raise BackendUnavailable("a tokenizer is required alongside an injected model")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model, self.tokenizer = model, tokenizer
        vcfg, tcfg = model.config.vision_config, model.config
        self.image_size, self.patch = vcfg.image_size, vcfg.patch_size
        self.info = EncoderInfo(
            name=f"clip:{model_name}",
            D_I=vcfg.hidden_size,
            D_T=tcfg.projection_dim,
            N=(vcfg.image_size // vcfg.patch_size) ** 2,
        )

    def _pixels(self, image):
        im = Image.fromarray(load_image(image))
        w, h = im.size
        scale = self.image_size / min(w, h)
        im = im.resize((max(self.image_size, round(w * scale)), max(self.image_size, round(h * scale))), Image.BICUBIC)
        w, h = im.size
        left, top = (w - self.image_size) // 2, (h - self.image_size) // 2
        im = im.crop((left, top, left + self.image_size, top + self.image_size))
        arr = (np.asarray(im, dtype=np.float32) / 255.0 - CLIP_MEAN) / CLIP_STD
        return self._torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32))[None]

    def encode_image(self, image, source="before"):
        with self._torch.no_grad():
            out = self.model.vision_model(pixel_values=self._pixels(image))
        return PatchFeatures(out.last_hidden_state[0, 1:].cpu().numpy().astype(np.float32), source)

    def encode_text(self, prompt):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        tokens = self.tokenizer([prompt], padding=True, return_tensors="pt")
        with self._torch.no_grad():
            out = self.model.text_model(input_ids=tokens["input_ids"], attention_mask=tokens.get("attention_mask"))
            pooled = self.model.text_projection(out.pooler_output)
        return TextFeature(pooled.cpu().numpy().astype(np.float32))

    def parameter_digest(self):
        h = hashlib.sha256()
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def make_encoder(backend="stub", **kwargs):
    if backend == "stub":
        return StubEncoder(**kwargs)
    if backend == "pretrained":
        return ClipEncoder(**kwargs)
    raise ValueError(f"unknown backend {backend!r}")


# ------------------------------------------------------------------------ cache

_MAGIC = b"PDFC"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.float32, 2: np.float64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_matrix(path, matrix):
    """Atomically write ``matrix`` as a 16-byte header plus raw little-endian data."""
    matrix = np.ascontiguousarray(matrix)
    code = _CODES[matrix.dtype]
    rows, cols = matrix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, code, rows, cols))
            fh.write(matrix.astype(matrix.dtype.newbyteorder("<"), copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_matrix(path):
    raw = Path(path).read_bytes()
    magic, code, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC or code not in _DTYPES:
        raise ValueError(f"{path} is not a feature cache file")
    dt = np.dtype(_DTYPES[code]).newbyteorder("<")
    return np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(rows, cols).astype(_DTYPES[code])


class CachedEncoder(Encoder):
    """Wraps an encoder with an on-disk cache at ``<root>/<backend>/<sha256>.bin``."""

    def __init__(self, encoder, root):
        self.inner = encoder
        self.info = encoder.info
        self.dir = Path(root) / re.sub(r"[^A-Za-z0-9_.-]+", "_", encoder.info.name)

    def _key(self, kind, payload_digest):
        return hashlib.sha256(f"{self.info.name}\0{kind}\0{payload_digest}".encode()).hexdigest()

    def encode_image(self, image, source="before"):
        path = self.dir / f"{self._key('image', image_digest(image))}.bin"
        if path.exists():
            return PatchFeatures(read_matrix(path), source)
        feats = self.inner.encode_image(image, source)
        write_matrix(path, feats.matrix)
        return feats

    def encode_text(self, prompt):
        path = self.dir / f"{self._key('text', hashlib.sha256(prompt.encode()).hexdigest())}.bin"
        if path.exists():
            return TextFeature(read_matrix(path))
        feat = self.inner.encode_text(prompt)
        write_matrix(path, feat.vector)
        return feat

    def parameter_digest(self):
        return self.inner.parameter_digest()
