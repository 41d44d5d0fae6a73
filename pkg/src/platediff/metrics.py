"""MAE / PMAE metrics, item-to-dish aggregation and structure stratification."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import Stage, Structure
from .errors import EmptyInput, OrphanItem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    pmae: Optional[float]  # percent; None when the mean ground truth is zero
    n: int
    mean_gt: float
    level: str = "item"
    stage: str = "absolute"
    stratum: str = "all"

    def to_dict(self):
        return asdict(self)


def mae_pmae(predictions, targets, level="item", stage=Stage.ABSOLUTE, stratum="all"):
    """MAE in grams and PMAE = 100 * MAE / mean(targets).

    The denominator is the mean ground truth of exactly the population passed
    in. Difference targets are signed and enter as-is.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} targets")
    if t.size == 0:
        raise EmptyInput("no targets to score")
    mae = float(np.mean(np.abs(t - p)))
    mean_gt = float(np.mean(t))
    if mean_gt == 0.0:
        log.warning("mean ground truth is zero; PMAE undefined (%s/%s)", level, stratum)
        pmae = None
    else:
        pmae = 100.0 * mae / mean_gt
    return MetricReport(mae, pmae, int(t.size), mean_gt, level, Stage(stage).value, str(getattr(stratum, "value", stratum)))


@dataclass(frozen=True)
class DishTotal:
    sample_id: str
    prediction: float
    target: float
    n_items: int


def aggregate_to_dish(records, known_ids=None):
    """Sum item predictions and targets per sample, in first-seen order.

    ``records`` yields ``(sample_id, prediction, target)``. With ``known_ids``
    any record naming another sample raises :class:`OrphanItem`.
    """
    known = None if known_ids is None else set(known_ids)
    totals = {}
    for sid, pred, tgt in records:
        if known is not None and sid not in known:
            raise OrphanItem(f"prediction for unknown sample {sid!r}")
        acc = totals.setdefault(sid, [0.0, 0.0, 0])
        acc[0] += float(pred)
        acc[1] += float(tgt)
        acc[2] += 1
    return [DishTotal(sid, p, t, k) for sid, (p, t, k) in totals.items()]


_STRATUM_ORDER = [s.value for s in Structure]


def stratify(predictions, targets, tags, level="item", stage=Stage.ABSOLUTE):
    """One report per structure stratum present, then the pooled report."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    tags = np.array([Structure(tag).value for tag in tags], dtype=object)
    if not (len(p) == len(t) == len(tags)):
        raise ValueError("predictions, targets and tags must have equal length")
    reports = []
    for name in _STRATUM_ORDER:
        mask = tags == name
        if mask.any():
            reports.append(mae_pmae(p[mask], t[mask], level, stage, name))
    reports.append(mae_pmae(p, t, level, stage, "all"))
    return reports


def mean_predictor_baseline(train_targets, test_targets, level="item", stage=Stage.ABSOLUTE):
    train = np.asarray(train_targets, dtype=np.float64)
    if train.size == 0:
        raise EmptyInput("baseline needs training targets")
    test = np.asarray(test_targets, dtype=np.float64)
    return mae_pmae(np.full(test.shape, train.mean()), test, level, stage, "all")


@dataclass
class Evaluation:
    """Item predictions for a query set together with every derived report."""

    sample_ids: list
    predictions: np.ndarray
    targets: np.ndarray
    tags: list
    stage: str
    item_reports: list
    dish_reports: list

    @property
    def item(self):
        return self.item_reports[-1]

    @property
    def dish(self):
        return self.dish_reports[-1]

    def reports(self):
        return self.item_reports + self.dish_reports


def evaluate_predictions(queries, predictions):
    if not queries:
        raise EmptyInput("no queries to evaluate")
    stage = Stage(queries[0].stage)
    preds = np.asarray(predictions, dtype=np.float64)
    targets = np.array([q.target for q in queries], dtype=np.float64)
    tags = [q.item.structure.value for q in queries]
    ids = [q.sample_id for q in queries]
    item_reports = stratify(preds, targets, tags, "item", stage)
    dishes = aggregate_to_dish(zip(ids, preds, targets))
    dish_reports = [mae_pmae([d.prediction for d in dishes], [d.target for d in dishes], "dish", stage)]
    return Evaluation(ids, preds, targets, tags, stage.value, item_reports, dish_reports)


def save_report(path, reports, **metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"metadata": metadata, "reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
