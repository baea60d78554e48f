"""Anchor group construction: one drawn representative per label, split into
positives (share a label with the anchor) and negatives (share none).

All draws are uniform; there is deliberately no hard-example mining of any
kind here. Groups that cannot be completed for a given anchor (empty
negative set, duplicate draws that cannot be resolved) raise
:class:`~mlembed.errors.GroupRejected`, which :func:`build_minibatch`
handles by moving on to a fresh anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, Example
from .errors import ContractError, GroupRejected, SamplingError
from .losses import overlap_tau

REGIMES = ("contrastive", "triplet", "ml2", "ml2plus")

# Redraw budget before giving up on an anchor (duplicate or rejected draws).
MAX_DRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class AnchorGroup:
    anchor: Example
    positives: tuple[Example, ...]
    negatives: tuple[Example, ...]
    tau_values: tuple[float, ...]

    def __post_init__(self):
        if len(self.tau_values) != len(self.positives):
            raise ContractError(
                f"{len(self.tau_values)} tau values for {len(self.positives)} positives"
            )
        for tau in self.tau_values:
            if not 0.0 <= tau <= 1.0:
                raise ContractError(f"tau value {tau} outside [0, 1]")


@dataclass(frozen=True)
class Pair:
    first: Example
    second: Example
    same: bool  # share at least one label


@dataclass(frozen=True)
class Triplet:
    anchor: Example
    positive: Example
    negative: Example


@dataclass(frozen=True)
class MiniBatch:
    regime: str
    items: tuple  # AnchorGroups, Pairs, or Triplets depending on regime


def _draw(pool: list[int], rng) -> int:
    return pool[int(rng.integers(len(pool)))]


def sample_group_ml2(ds: Dataset, anchor: Example, rng) -> AnchorGroup:
    """Draw one example per label and partition by the shared-label test.

    A representative drawn for a label outside the anchor's set may still
    share some other label with the anchor; it then counts as a positive.
    """
    used = {anchor.id}
    drawn: list[Example] = []
    for label in range(ds.label_count):
        pool = [i for i in ds.positions_with_label(label) if ds.examples[i].id != anchor.id]
        if not pool:
            raise SamplingError(f"label {label} has no candidate besides the anchor")
        for _ in range(MAX_DRAW_ATTEMPTS):
            ex = ds.examples[_draw(pool, rng)]
            if ex.id not in used:
                break
        else:
            raise GroupRejected(f"no distinct representative for label {label}")
        used.add(ex.id)
        drawn.append(ex)

    positives = tuple(ex for ex in drawn if ex.labels & anchor.labels)
    negatives = tuple(ex for ex in drawn if not (ex.labels & anchor.labels))
    if not negatives:
        raise GroupRejected(f"anchor {anchor.id!r} leaves an empty negative set")
    taus = tuple(overlap_tau(anchor.labels, ex.labels) for ex in positives)
    return AnchorGroup(anchor, positives, negatives, taus)


def sample_group_ml2plus(ds: Dataset, anchor: Example, rng) -> AnchorGroup:
    """Strict variant: one single-label positive per anchor label, and one
    zero-overlap negative per remaining label. tau is (p - 1) / p throughout."""
    anchor_labels = sorted(anchor.labels)
    p = len(anchor_labels)
    if p == ds.label_count:
        raise GroupRejected(f"anchor {anchor.id!r} carries all labels; empty negative set")

    used = {anchor.id}
    positives: list[Example] = []
    for label in anchor_labels:
        pool = [
            i
            for i in ds.single_label_positions(label)
            if ds.examples[i].id != anchor.id
        ]
        if not pool:
            raise SamplingError(f"no single-label example for label {label}")
        for _ in range(MAX_DRAW_ATTEMPTS):
            ex = ds.examples[_draw(pool, rng)]
            if ex.id not in used:
                break
        else:
            raise GroupRejected(f"no distinct single-label positive for label {label}")
        used.add(ex.id)
        positives.append(ex)

    negatives: list[Example] = []
    for label in sorted(frozenset(range(ds.label_count)) - anchor.labels):
        pool = ds.positions_with_label(label)
        if not pool:
            raise SamplingError(f"label {label} has no examples")
        chosen = None
        for _ in range(MAX_DRAW_ATTEMPTS):
            ex = ds.examples[_draw(pool, rng)]
            if ex.id not in used and not (ex.labels & anchor.labels):
                chosen = ex
                break
        if chosen is None:
            # Rare path: prove whether a valid candidate exists at all.
            valid = [
                ds.examples[i]
                for i in pool
                if ds.examples[i].id not in used
                and not (ds.examples[i].labels & anchor.labels)
            ]
            if not valid:
                raise SamplingError(
                    f"no zero-overlap negative for label {label} given anchor {anchor.id!r}"
                )
            chosen = valid[int(rng.integers(len(valid)))]
        used.add(chosen.id)
        negatives.append(chosen)

    tau = (p - 1) / p
    return AnchorGroup(anchor, tuple(positives), tuple(negatives), (tau,) * p)


def _draw_partner(ds: Dataset, anchor: Example, want_shared: bool, rng) -> Example | None:
    """Uniform draw over examples that share (or do not share) a label with
    the anchor, via rejection sampling with an exhaustive fallback."""
    n = len(ds)
    for _ in range(MAX_DRAW_ATTEMPTS):
        ex = ds.examples[int(rng.integers(n))]
        if ex.id == anchor.id:
            continue
        if bool(ex.labels & anchor.labels) == want_shared:
            return ex
    valid = [
        ex
        for ex in ds.examples
        if ex.id != anchor.id and bool(ex.labels & anchor.labels) == want_shared
    ]
    if not valid:
        return None
    return valid[int(rng.integers(len(valid)))]


def sample_pair(ds: Dataset, anchor: Example, rng) -> Pair:
    """Similar/dissimilar pair with equal probability; falls back to the
    other kind when the requested one has no candidates."""
    want_shared = bool(rng.random() < 0.5)
    partner = _draw_partner(ds, anchor, want_shared, rng)
    if partner is None:
        want_shared = not want_shared
        partner = _draw_partner(ds, anchor, want_shared, rng)
    if partner is None:
        raise GroupRejected(f"anchor {anchor.id!r} has no pair partner")
    return Pair(anchor, partner, want_shared)


def sample_triplet(ds: Dataset, anchor: Example, rng) -> Triplet:
    positive = _draw_partner(ds, anchor, True, rng)
    if positive is None:
        raise GroupRejected(f"anchor {anchor.id!r} has no positive candidate")
    negative = _draw_partner(ds, anchor, False, rng)
    if negative is None:
        raise GroupRejected(f"anchor {anchor.id!r} has no zero-overlap negative")
    return Triplet(anchor, positive, negative)


def build_minibatch(ds: Dataset, b: int, regime: str, rng) -> MiniBatch:
    """Assemble ``b`` items for the given regime.

    Anchors are drawn uniformly without replacement; anchors whose group
    cannot be completed are skipped.
    """
    if regime not in REGIMES:
        raise ContractError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if b < 1:
        raise ContractError(f"batch size must be >= 1, got {b}")
    if b > len(ds):
        raise SamplingError(f"batch size {b} exceeds split size {len(ds)}")

    samplers = {
        "ml2": sample_group_ml2,
        "ml2plus": sample_group_ml2plus,
        "triplet": sample_triplet,
        "contrastive": sample_pair,
    }
    sample = samplers[regime]

    items = []
    for pos in rng.permutation(len(ds)):
        anchor = ds.examples[int(pos)]
        try:
            items.append(sample(ds, anchor, rng))
        except GroupRejected:
            continue
        if len(items) == b:
            break
    if len(items) < b:
        raise SamplingError(
            f"only {len(items)} of {b} requested items could be assembled"
        )
    return MiniBatch(regime=regime, items=tuple(items))
