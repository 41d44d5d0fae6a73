"""Core records: food items, samples and per-item training queries.

All records are frozen dataclasses. Weights are grams stored as Python floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import MissingAfterState, ValidationError

ImageRef = Union[str, Path, np.ndarray]


class Structure(str, Enum):
    SOLID = "solid"
    AMORPHOUS_MIXED = "amorphous_mixed"
    UNKNOWN = "unknown"


class Stage(str, Enum):
    ABSOLUTE = "absolute"
    DIFFERENCE = "difference"


def _check_weight(value, name):
    if value is None:
        return None
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {value!r}", field=name) from None
    if not math.isfinite(value) or value < 0:
        raise ValidationError(f"{name} must be finite and >= 0, got {value}", field=name)
    return value


@dataclass(frozen=True)
class FoodItem:
    name: str
    weight_before: float
    weight_after: Optional[float] = None
    structure: Structure = Structure.UNKNOWN

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValidationError("item name must be non-empty", field="name")
        object.__setattr__(self, "weight_before", _check_weight(self.weight_before, "weight_before"))
        if self.weight_before is None:
            raise ValidationError("weight_before is required", field="weight_before")
        object.__setattr__(self, "weight_after", _check_weight(self.weight_after, "weight_after"))
        try:
            object.__setattr__(self, "structure", Structure(self.structure))
        except ValueError:
            raise ValidationError(f"unknown structure {self.structure!r}", field="structure") from None

    @property
    def consumed(self):
        """Signed weight difference, or None without an after weight. Never clamped."""
        if self.weight_after is None:
            return None
        return self.weight_before - self.weight_after


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    before_image: ImageRef
    items: tuple
    after_image: Optional[ImageRef] = None
    dataset_tag: str = ""

    def __post_init__(self):
        if not isinstance(self.sample_id, str) or not self.sample_id:
            raise ValidationError("sample_id must be a non-empty string", field="sample_id")
        if self.before_image is None:
            raise ValidationError("before_image is required", field="before_image")
        items = tuple(self.items)
        if not items:
            raise ValidationError("a sample needs at least one item", field="items")
        for it in items:
            if not isinstance(it, FoodItem):
                raise ValidationError("items must be FoodItem instances", field="items")
        object.__setattr__(self, "items", items)
        if self.after_image is None and any(it.weight_after is not None for it in items):
            raise ValidationError(
                f"sample {self.sample_id}: weight_after set but after_image missing", field="after_image"
            )

    @property
    def has_after(self):
        return self.after_image is not None and all(it.weight_after is not None for it in self.items)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.items == other.items
            and self.dataset_tag == other.dataset_tag
            and _same_image(self.before_image, other.before_image)
            and _same_image(self.after_image, other.after_image)
        )

    __hash__ = None


def _same_image(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
    if a is None or b is None:
        return a is b
    return Path(a) == Path(b)


@dataclass(frozen=True)
class ItemQuery:
    sample: Sample = field(repr=False)
    item_index: int
    stage: Stage
    target: float

    @property
    def item(self):
        return self.sample.items[self.item_index]

    @property
    def sample_id(self):
        return self.sample.sample_id


def make_item_queries(sample, stage):
    """One query per food item, in item order.

    Absolute targets copy ``weight_before``; difference targets are
    ``weight_before - weight_after`` (signed, unclamped).
    """
    stage = Stage(stage)
    if stage is Stage.ABSOLUTE:
        return [ItemQuery(sample, i, stage, it.weight_before) for i, it in enumerate(sample.items)]
    if not sample.has_after:
        raise MissingAfterState(
            f"sample {sample.sample_id}: difference stage needs an after image and every weight_after"
        )
    return [ItemQuery(sample, i, stage, it.consumed) for i, it in enumerate(sample.items)]


def queries_for(samples, stage):
    out = []
    for s in samples:
        out.extend(make_item_queries(s, stage))
    return out
