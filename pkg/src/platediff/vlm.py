"""Prompted vision-language model baseline: prompts, clients, parsing, scoring.

Prompt bytes are fixed. ``{ing_list}`` renders as the ingredient names, one
per line, and the structured-output rules are appended after a blank line.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .data import load_image
from .domain import Stage
from .encoders import image_digest
from .errors import AllSamplesFailed, ProviderError
from .metrics import aggregate_to_dish, mae_pmae

log = logging.getLogger(__name__)

SINGLE_IMAGE_TEMPLATE = (
    "You are a nutrition expert analyzing this meal image. "
    "Estimate the weight in grams for these ingredients:\n{ing_list}"
)
PREDICTED_DIFFERENCE_TEMPLATE = (
    "You are a nutrition expert. Analyze these two images.\n"
    "Image 1 is the meal Before eating. Image 2 is the meal After eating.\n"
    "Identify the following ingredients: {ing_list}.\n"
    "Estimate the CONSUMED weight (mass eaten) in grams for each ingredient "
    "based on the difference between the images.\n"
    'Example: {"Apple": 50.5, "Bread": 20.0}'
)
BEFORE_IMAGE_TEMPLATE = (
    "You are a nutrition expert. Analyze this image of a meal.\n"
    "Estimate the total weight (in grams) PRESENT in the image for these ingredients: {ing_list}."
)
AFTER_IMAGE_TEMPLATE = (
    "You are a nutrition expert. Analyze this image of leftovers/after meal.\n"
    "Estimate the remaining weight (in grams) PRESENT in the image for these ingredients: {ing_list}.\n"
    "If an ingredient is completely gone, the weight is 0."
)
RULES_BLOCK = (
    "RULES:\n"
    "1. Output ONLY a valid JSON object.\n"
    "2. Keys must be the exact ingredient names listed.\n"
    "3. Provide a best-guess estimate in grams.\n"
    '4. Example: {"Rice": 150.0, "Chicken": 85.0}'
)


class Strategy(str, Enum):
    SINGLE = "single"
    PREDICTED_DIFFERENCE = "predicted_difference"
    DIFFERENCE_OF_PREDICTIONS = "difference_of_predictions"


@dataclass(frozen=True, eq=False)
class VlmPrompt:
    text: str
    images: tuple
    expected_keys: tuple
    role: str = "single"  # single | pair | before | after
    sample_id: Optional[str] = None

    def __post_init__(self):
        if len(self.images) not in (1, 2):
            raise ValueError("a prompt carries one or two images")
        if not self.expected_keys:
            raise ValueError("expected_keys must be non-empty")

    def digest(self):
        h = hashlib.sha256(self.text.encode("utf-8"))
        for img in self.images:
            h.update(b"\0" + (image_digest(img) if img is not None else "none").encode())
        return h.hexdigest()


def _ingredients(names):
    names = list(dict.fromkeys(names))
    if not names or any(not isinstance(n, str) or not n for n in names):
        raise ValueError("ingredient list must be non-empty and contain non-empty names")
    return names


def render_ing_list(names):
    return "\n".join(names)


def _compose(template, names):
    return template.replace("{ing_list}", render_ing_list(names)) + "\n\n" + RULES_BLOCK


def build_single_prompt(ingredients, image=None, sample_id=None):
    names = _ingredients(ingredients)
    return VlmPrompt(_compose(SINGLE_IMAGE_TEMPLATE, names), (image,), tuple(names), "single", sample_id)


def build_pair_prompts(ingredients, strategy, before=None, after=None, sample_id=None):
    names = _ingredients(ingredients)
    strategy = Strategy(strategy)
    if strategy is Strategy.PREDICTED_DIFFERENCE:
        return [VlmPrompt(_compose(PREDICTED_DIFFERENCE_TEMPLATE, names), (before, after), tuple(names), "pair", sample_id)]
    if strategy is Strategy.DIFFERENCE_OF_PREDICTIONS:
        return [
            VlmPrompt(_compose(BEFORE_IMAGE_TEMPLATE, names), (before,), tuple(names), "before", sample_id),
            VlmPrompt(_compose(AFTER_IMAGE_TEMPLATE, names), (after,), tuple(names), "after", sample_id),
        ]
    raise ValueError("pair prompts need a difference strategy")


# ---------------------------------------------------------------------- parsing

@dataclass
class VlmResponse:
    raw: str
    parsed: dict
    repair_applied: str  # none | fence_stripped | failed
    extras: dict = field(default_factory=dict)
    imputed: tuple = ()

    @property
    def ok(self):
        return self.repair_applied != "failed"


_FENCE = re.compile(r"```[A-Za-z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(?:g|grams?)?\s*$")


def _as_grams(value):
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _NUMBER.match(value)
        if m:
            return float(m.group(1))
    return None


def parse_structured(raw, expected_keys, missing="impute"):
    """Parse the first JSON object in ``raw`` into ingredient -> grams.

    Fenced blocks are unwrapped first. Missing expected keys are imputed as 0 g
    (``missing="impute"``) or left out (``missing="drop"``).
    """
    raw = "" if raw is None else str(raw)
    text, repair = raw, "none"
    fence = _FENCE.search(raw)
    if fence:
        text, repair = fence.group(1), "fence_stripped"
    start = text.find("{")
    obj = None
    if start >= 0:
        try:
            obj, _ = json.JSONDecoder().raw_decode(text[start:])
        except json.JSONDecodeError:
            obj = None
    if not isinstance(obj, dict):
        return VlmResponse(raw, {}, "failed")
    expected = list(expected_keys)
    parsed, extras = {}, {}
    for key, value in obj.items():
        grams = _as_grams(value)
        if key in expected:
            if grams is None:
                log.warning("non-numeric value for %r: %r", key, value)
            else:
                parsed[key] = grams
        else:
            extras[key] = value
    if extras:
        log.info("ignoring unexpected keys %s", sorted(extras))
    imputed = tuple(k for k in expected if k not in parsed)
    if imputed:
        log.warning("missing keys %s", list(imputed))
        if missing == "impute":
            parsed.update({k: 0.0 for k in imputed})
    return VlmResponse(raw, {k: parsed[k] for k in expected if k in parsed}, repair, extras, imputed)


def consumed_from(before, after, keys):
    """Per-key ``before - after``; a key absent from ``after`` counts as 0 g left."""
    return {k: before.get(k, 0.0) - after.get(k, 0.0) for k in keys}


# ---------------------------------------------------------------------- clients

@dataclass(frozen=True)
class ClientConfig:
    provider: str = "openai-compatible"
    model: str = ""
    base_url: str = ""
    max_tokens: int = 512
    greedy: bool = True
    temperature: Optional[float] = None  # used when greedy is False; None = provider default
    max_in_flight: int = 4
    api_key_env: str = "VLM_API_KEY"
    timeout: float = 120.0
    max_retries: int = 3
    backoff: float = 1.0

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class VlmClient:
    def complete(self, prompt):
        raise NotImplementedError


class CallableClient(VlmClient):
    """Adapts ``fn(prompt) -> str``; handy for mocks."""

    def __init__(self, fn):
        self.fn = fn

    def complete(self, prompt):
        return self.fn(prompt)


class EchoClient(VlmClient):
    """Answers every prompt with the ground truth of its sample."""

    def __init__(self, samples):
        self.samples = {s.sample_id: s for s in samples}

    def complete(self, prompt):
        s = self.samples[prompt.sample_id]
        out = {}
        for it in s.items:
            value = {
                "single": it.weight_before,
                "before": it.weight_before,
                "after": it.weight_after,
                "pair": it.consumed,
            }[prompt.role]
            out[it.name] = out.get(it.name, 0.0) + value
        return json.dumps(out)


class ReplayClient(VlmClient):
    """Serves recorded responses; performs no network I/O."""

    def __init__(self, store_path):
        self.records = {}
        with open(store_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self.records[(rec["sample_id"], rec["prompt_digest"])] = rec["raw"]

    def complete(self, prompt):
        try:
            return self.records[(prompt.sample_id, prompt.digest())]
        except KeyError:
            raise ProviderError(f"no recorded response for {prompt.sample_id} ({prompt.role})") from None


def _png_data_url(image):
    buf = io.BytesIO()
    Image.fromarray(load_image(image)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class OpenAICompatibleClient(VlmClient):
    """Chat-completions client for any OpenAI-compatible endpoint."""

    transient = {408, 409, 429, 500, 502, 503, 504}

    def __init__(self, config, http=None):
        import httpx

        self.config = config
        key = os.environ.get(config.api_key_env)
        if not key:
            raise ProviderError(f"environment variable {config.api_key_env} is not set")
        self._headers = {"Authorization": f"Bearer {key}"}
        self._http = http or httpx.Client(timeout=config.timeout)
        self._httpx = httpx

    def _payload(self, prompt):
        content = [{"type": "text", "text": prompt.text}]
        content += [{"type": "image_url", "image_url": {"url": _png_data_url(im)}} for im in prompt.images]
        body = {"model": self.config.model, "messages": [{"role": "user", "content": content}], "max_tokens": self.config.max_tokens}
        if self.config.greedy:
            body["temperature"] = 0.0
        elif self.config.temperature is not None:
            body["temperature"] = self.config.temperature
        return body

    def complete(self, prompt):
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        body = self._payload(prompt)
        delay = self.config.backoff
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._http.post(url, json=body, headers=self._headers)
            except self._httpx.TransportError as exc:
                err = f"transport error: {type(exc).__name__}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, ValueError) as exc:
                        raise ProviderError(f"malformed provider response: {exc}") from None
                if resp.status_code not in self.transient:
                    raise ProviderError(f"HTTP {resp.status_code}")
                err = f"HTTP {resp.status_code}"
            if attempt < self.config.max_retries:
                time.sleep(delay)
                delay *= 2
        raise ProviderError(f"gave up after {self.config.max_retries} retries ({err})")


def make_client(config, samples=None, replay_store=None):
    if config.provider == "replay":
        return ReplayClient(replay_store)
    if config.provider == "echo":
        return EchoClient(samples)
    if config.provider == "openai-compatible":
        return OpenAICompatibleClient(config)
    raise ValueError(f"unknown provider {config.provider!r}")


# -------------------------------------------------------------------- benchmark

@dataclass
class BenchmarkResult:
    report: object  # MetricReport, dish level
    predictions: dict  # sample_id -> {ingredient: grams}
    missing: list  # sample ids that could not be scored


def prompts_for(sample, strategy):
    names = [it.name for it in sample.items]
    strategy = Strategy(strategy)
    if strategy is Strategy.SINGLE:
        return [build_single_prompt(names, sample.before_image, sample.sample_id)]
    return build_pair_prompts(names, strategy, sample.before_image, sample.after_image, sample.sample_id)


def _targets(sample, strategy):
    out = {}
    for it in sample.items:
        value = it.weight_before if strategy is Strategy.SINGLE else it.consumed
        out[it.name] = out.get(it.name, 0.0) + value
    return out


def run_benchmark(samples, strategy, client, config=None, audit_path=None, missing="impute"):
    """Prompt, parse and score every sample at dish level.

    Provider errors and unparseable answers mark a sample missing; the run
    only aborts when nothing could be scored.
    """
    strategy = Strategy(strategy)
    config = config or ClientConfig()
    samples = sorted(samples, key=lambda s: s.sample_id)
    jobs = [(s, p) for s in samples for p in prompts_for(s, strategy)]

    def call(job):
        sample, prompt = job
        try:
            return prompt, client.complete(prompt), None
        except ProviderError as exc:
            return prompt, None, str(exc)

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        results = list(pool.map(call, jobs))

    if audit_path is not None:
        Path(audit_path).parent.mkdir(parents=True, exist_ok=True)
        with open(audit_path, "a", encoding="utf-8") as fh:
            for prompt, raw, err in sorted(results, key=lambda r: (r[0].sample_id, r[0].role)):
                if raw is None:
                    continue
                rec = {
                    "sample_id": prompt.sample_id,
                    "prompt_digest": prompt.digest(),
                    "role": prompt.role,
                    "raw": raw,
                    "timestamp": datetime.now(timezone.utc).isoformat(),
                }
                fh.write(json.dumps(rec) + "\n")

    by_sample = {}
    for prompt, raw, err in results:
        by_sample.setdefault(prompt.sample_id, {})[prompt.role] = (prompt, raw, err)

    predictions, missing_ids, records = {}, [], []
    for s in samples:
        got = by_sample.get(s.sample_id, {})
        parsed = {}
        failed = False
        for role, (prompt, raw, err) in got.items():
            if err is not None:
                log.warning("%s: provider error: %s", s.sample_id, err)
                failed = True
                break
            resp = parse_structured(raw, prompt.expected_keys, missing)
            if not resp.ok or (missing == "drop" and resp.imputed):
                failed = True
                break
            parsed[role] = resp.parsed
        if failed:
            missing_ids.append(s.sample_id)
            continue
        keys = list(dict.fromkeys(it.name for it in s.items))
        if strategy is Strategy.DIFFERENCE_OF_PREDICTIONS:
            pred = consumed_from(parsed["before"], parsed["after"], keys)
        else:
            pred = parsed["pair" if strategy is Strategy.PREDICTED_DIFFERENCE else "single"]
        predictions[s.sample_id] = pred
        truth = _targets(s, strategy)
        for k in keys:
            records.append((s.sample_id, pred.get(k, 0.0), truth[k]))

    if not predictions:
        raise AllSamplesFailed(f"none of {len(samples)} samples could be scored")
    dishes = aggregate_to_dish(records, known_ids=[s.sample_id for s in samples])
    stage = Stage.ABSOLUTE if strategy is Strategy.SINGLE else Stage.DIFFERENCE
    report = mae_pmae([d.prediction for d in dishes], [d.target for d in dishes], "dish", stage)
    return BenchmarkResult(report, predictions, missing_ids)
