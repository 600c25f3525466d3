"""Evaluation mathematics: EER variants, TTA aggregation, report assembly.

Scores are spoof posteriors, spoof is the positive class, and the
decision rule is spoof iff score >= threshold.  EER is read off the
piecewise-linear ROC whose vertices are the empirical operating points
(equal scores collapse to one point), linearly interpolated at the
FPR = FNR crossing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import binary_entropy


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    dataset_id: str
    label: int
    view_id: int
    score: float

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0, 1]: {self.score}")


def _operating_points(scores: np.ndarray, labels: np.ndarray):
    """ROC vertices as (thresholds desc, fpr, fnr), starting from the
    reject-everything point."""
    bona = np.sort(scores[labels == 0])
    spoof = np.sort(scores[labels == 1])
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("need at least one record of each label")
    thresholds = np.unique(scores)[::-1]
    fpr = np.empty(thresholds.size + 1)
    fnr = np.empty(thresholds.size + 1)
    fpr[0], fnr[0] = 0.0, 1.0
    # count of bona fide >= t and spoof < t at each distinct threshold
    fpr[1:] = (bona.size - np.searchsorted(bona, thresholds, side="left")) / bona.size
    fnr[1:] = np.searchsorted(spoof, thresholds, side="left") / spoof.size
    return thresholds, fpr, fnr


def compute_eer(records: list[ScoreRecord]) -> tuple[float, float]:
    """Equal error rate and its operating threshold.

    FNR - FPR decreases monotonically along the threshold sweep, so the
    crossing is unique; when it falls between two vertices the rates (and
    threshold) are interpolated linearly.
    """
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    thresholds, fpr, fnr = _operating_points(scores, labels)
    diff = fnr - fpr
    j = int(np.argmax(diff <= 0.0))
    if diff[j] == 0.0:
        threshold = float(thresholds[j - 1]) if j > 0 else float("inf")
        return float(fpr[j]), threshold
    t = diff[j - 1] / (diff[j - 1] - diff[j])
    eer = fpr[j - 1] + t * (fpr[j] - fpr[j - 1])
    if j - 1 == 0:  # left vertex is the synthetic reject-all point
        threshold = float(thresholds[0])
    else:
        threshold = float(thresholds[j - 2]
                          + t * (thresholds[j - 1] - thresholds[j - 2]))
    return float(eer), threshold


def pooled_eer(datasets: dict[str, list[ScoreRecord]]) -> float:
    """EER of all datasets' records concatenated under one global
    threshold."""
    merged = [r for records in datasets.values() for r in records]
    eer, _ = compute_eer(merged)
    return eer


def average_eer(eers: list[float]) -> float:
    """Unweighted mean of per-dataset EERs (every set counts equally,
    regardless of size)."""
    if not eers:
        raise ValueError("no per-dataset EERs to average")
    return float(np.mean(eers))


@dataclass(frozen=True)
class TtaResult:
    utt_id: str
    mean_posterior: float
    u_ale: float
    per_view: tuple[float, ...]


def tta_aggregate(records: list[ScoreRecord]) -> TtaResult:
    """Mean posterior and mean prediction entropy over one utterance's
    augmented views (two-class entropy of each view's posterior)."""
    if not records:
        raise ValueError("need at least one view")
    utt_ids = {r.utt_id for r in records}
    if len(utt_ids) != 1:
        raise ValueError(f"records mix utterances: {sorted(utt_ids)}")
    ordered = sorted(records, key=lambda r: r.view_id)
    posteriors = [r.score for r in ordered]
    return TtaResult(
        utt_id=records[0].utt_id,
        mean_posterior=float(np.mean(posteriors)),
        u_ale=float(np.mean([binary_entropy(p) for p in posteriors])),
        per_view=tuple(posteriors),
    )


def delta_eer(ensemble_eer: float, clean_eer: float) -> float:
    """TTA ensemble EER minus clean EER, in percentage points (positive
    means the ensemble is worse)."""
    for name, v in (("ensemble_eer", ensemble_eer), ("clean_eer", clean_eer)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} out of [0, 1]: {v}")
    return (ensemble_eer - clean_eer) * 100.0


@dataclass
class EvalReport:
    per_dataset_eer: dict[str, float]
    avg_eer: float
    pooled_eer: float
    clean_eer: float
    tta_eer: float | None
    delta_eer: float | None
    mean_u_ale: dict[str, float] | None
    config: str
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_dataset_eer": dict(sorted(self.per_dataset_eer.items())),
            "avg_eer": self.avg_eer,
            "pooled_eer": self.pooled_eer,
            "clean_eer": self.clean_eer,
            "tta_eer": self.tta_eer,
            "delta_eer": self.delta_eer,
            "mean_u_ale": (dict(sorted(self.mean_u_ale.items()))
                           if self.mean_u_ale is not None else None),
            "config": self.config,
            "counts": dict(sorted(self.counts.items())),
        }

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.to_dict(), 6), sort_keys=True,
                          indent=2) + "\n"


def _round_floats(obj, digits: int):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_floats(v, digits) for v in obj]
    return obj


def build_report(clean: list[ScoreRecord], tta: list[ScoreRecord],
                 config_fingerprint: str = "") -> EvalReport:
    """Assemble the full evaluation report.

    ``clean`` holds one record per utterance (its clean-view score);
    ``tta`` holds one record per (utterance, augmented view).  Every TTA
    utterance must have a clean record.  With no TTA records the ensemble
    fields are left absent.
    """
    if not clean:
        raise ValueError("no clean records")
    by_dataset: dict[str, list[ScoreRecord]] = {}
    clean_by_utt: dict[str, ScoreRecord] = {}
    for r in clean:
        by_dataset.setdefault(r.dataset_id, []).append(r)
        clean_by_utt[r.utt_id] = r

    per_dataset = {ds: compute_eer(records)[0]
                   for ds, records in sorted(by_dataset.items())}
    avg = average_eer(list(per_dataset.values()))
    pooled = pooled_eer(by_dataset)

    counts = {"clean": len(clean), "tta": len(tta),
              "datasets": len(per_dataset)}
    if not tta:
        return EvalReport(per_dataset_eer=per_dataset, avg_eer=avg,
                          pooled_eer=pooled, clean_eer=pooled, tta_eer=None,
                          delta_eer=None, mean_u_ale=None,
                          config=config_fingerprint, counts=counts)

    views_by_utt: dict[str, list[ScoreRecord]] = {}
    for r in tta:
        if r.utt_id not in clean_by_utt:
            raise ValueError(f"TTA record for unknown utterance {r.utt_id!r}")
        views_by_utt.setdefault(r.utt_id, []).append(r)

    ensemble: list[ScoreRecord] = []
    u_ale_by_dataset: dict[str, list[float]] = {}
    clean_subset: list[ScoreRecord] = []
    for utt_id, views in views_by_utt.items():
        base = clean_by_utt[utt_id]
        agg = tta_aggregate(views)
        ensemble.append(ScoreRecord(utt_id=utt_id, dataset_id=base.dataset_id,
                                    label=base.label, view_id=0,
                                    score=agg.mean_posterior))
        u_ale_by_dataset.setdefault(base.dataset_id, []).append(agg.u_ale)
        clean_subset.append(base)

    clean_eer, _ = compute_eer(clean_subset)
    tta_eer, _ = compute_eer(ensemble)
    return EvalReport(
        per_dataset_eer=per_dataset,
        avg_eer=avg,
        pooled_eer=pooled,
        clean_eer=clean_eer,
        tta_eer=tta_eer,
        delta_eer=delta_eer(tta_eer, clean_eer),
        mean_u_ale={ds: float(np.mean(vals))
                    for ds, vals in sorted(u_ale_by_dataset.items())},
        config=config_fingerprint,
        counts=counts,
    )


def write_scores(records: list[ScoreRecord], path: str | Path,
                 fingerprint: str | None = None) -> None:
    """Score file: JSON Lines, one object per record, optional leading
    header line carrying the config fingerprint."""
    with open(path, "w", encoding="utf-8") as f:
        if fingerprint is not None:
            f.write(json.dumps({"config": fingerprint}) + "\n")
        for r in records:
            f.write(json.dumps({"utt": r.utt_id, "dataset": r.dataset_id,
                                "label": r.label, "view": r.view_id,
                                "score": r.score}) + "\n")


def read_scores(path: str | Path) -> tuple[list[ScoreRecord], str | None]:
    records: list[ScoreRecord] = []
    fingerprint = None
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "score" not in obj and "config" in obj:
                fingerprint = obj["config"]
                continue
            try:
                records.append(ScoreRecord(
                    utt_id=obj["utt"], dataset_id=obj["dataset"],
                    label=int(obj["label"]), view_id=int(obj["view"]),
                    score=float(obj["score"])))
            except KeyError as exc:
                raise FormatError(f"{path}: line {i + 1} missing key {exc}")
    return records, fingerprint
