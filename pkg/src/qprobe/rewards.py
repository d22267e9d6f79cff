"""Decoupled Stage-3 rewards: score accuracy, crop localization, trace format."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import ArgumentError
from .model import Region, union_box

DEFAULT_TAU = 0.5
DEFAULT_ALPHA = 1.0
DEFAULT_BETA_LOC = 0.15
DEFAULT_GAMMA_FMT = 0.1


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = DEFAULT_ALPHA
    beta_loc: float = DEFAULT_BETA_LOC
    gamma_fmt: float = DEFAULT_GAMMA_FMT

    def __post_init__(self):
        for name in ("alpha", "beta_loc", "gamma_fmt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ArgumentError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_loc: float
    r_fmt: float
    r_total: float


def acc_reward(s_pred: float, s_mos: float, tau: float = DEFAULT_TAU) -> float:
    if not tau > 0:
        raise ArgumentError(f"tau must be > 0, got {tau}")
    return math.exp(-abs(s_pred - s_mos) / tau)


def iou(a: Region, b: Region) -> float:
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union


def gt_box(defects) -> Region | None:
    """Ground-truth box: the tight bounding box around every defect region."""
    defects = list(defects)
    return union_box(d.region for d in defects) if defects else None


def loc_reward(has_defect: bool, b_pred: Region | None, defects) -> float:
    if not has_defect or b_pred is None:
        return 0.0
    box = gt_box(defects)
    return 0.0 if box is None else iou(b_pred, box)


_NUM = r"\s*=\s*\"?(\d+)\"?"
_THINK = re.compile(r"<think>([^<]*)</think>")
_CROP = re.compile(r"<crop\s+x" + _NUM + r"\s+y" + _NUM + r"\s+w" + _NUM + r"\s+h" + _NUM + r"\s*/>")
_OBSERVE = re.compile(r"<observe\s*/>")
_SCORE = re.compile(r"<score>\s*([-+]?(?:\d+\.?\d*|\.\d+))\s*</score>")
_TEXT = re.compile(r"[^<]*")


def parse_trace(trace_text: str):
    """Parse a probing trace; returns ``(crops, score)`` or ``None`` when malformed.

    Grammar (free text without tags may sit between elements)::

        <think>..</think> ( <crop x= y= w= h=/> <observe/> )* <score>v</score>
    """
    pos = 0
    text = trace_text

    def skip():
        nonlocal pos
        pos = _TEXT.match(text, pos).end()

    skip()
    m = _THINK.match(text, pos)
    if not m:
        return None
    pos = m.end()
    crops = []
    while True:
        skip()
        m = _CROP.match(text, pos)
        if not m:
            break
        x, y, w, h = (int(g) for g in m.groups())
        if w <= 0 or h <= 0:
            return None
        crops.append(Region(x, y, w, h))
        pos = m.end()
        skip()
        m = _OBSERVE.match(text, pos)
        if not m:
            return None
        pos = m.end()
    m = _SCORE.match(text, pos)
    if not m:
        return None
    pos = m.end()
    if text[pos:].strip():
        return None
    score = float(m.group(1))
    return crops, score


def format_reward(trace_text: str) -> float:
    parsed = parse_trace(trace_text)
    if parsed is None:
        return 0.0
    _, score = parsed
    return 1.0 if 1.0 <= score <= 5.0 else 0.0


def total_reward(r_acc: float, r_loc: float, r_fmt: float, weights: RewardWeights | None = None) -> RewardBreakdown:
    w = weights or RewardWeights()
    total = w.alpha * r_acc + w.beta_loc * r_loc + w.gamma_fmt * r_fmt
    return RewardBreakdown(r_acc=r_acc, r_loc=r_loc, r_fmt=r_fmt, r_total=total)


def score_prediction(s_pred: float, b_pred: Region | None, trace_text: str, defects, s_mos: float,
                     weights: RewardWeights | None = None, tau: float = DEFAULT_TAU) -> RewardBreakdown:
    """All three rewards for one prediction against its ground truth."""
    defects = list(defects)
    return total_reward(
        acc_reward(s_pred, s_mos, tau),
        loc_reward(bool(defects), b_pred, defects),
        format_reward(trace_text),
        weights,
    )
