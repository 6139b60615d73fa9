"""ROI atlases, per-ROI score tables, occurrence frequencies and the
cross-method consensus report."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import io
from .exceptions import AtlasConsistencyError, ConfigError, ShapeError

METHODS = ("saliency", "gradcam", "shap")
DEFAULT_TOP_K = 5


@dataclass
class RoiAtlas:
    labels: np.ndarray
    names: dict
    brodmann: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.names = {int(k): str(v) for k, v in self.names.items()}
        self.brodmann = {int(k): [str(b) for b in v] for k, v in self.brodmann.items()}
        missing = sorted(set(np.unique(self.labels).tolist()) - {0} - set(self.names))
        if missing:
            raise AtlasConsistencyError(f"labels without a name entry: {missing}")

    @property
    def roi_ids(self):
        """Sorted non-background ids present in the label grid."""
        ids = np.unique(self.labels)
        return ids[ids != 0]

    @property
    def shape(self):
        return self.labels.shape

    def name(self, roi):
        try:
            return self.names[int(roi)]
        except KeyError:
            raise AtlasConsistencyError(f"ROI id {roi} is not in the atlas") from None

    def brodmann_label(self, roi):
        """Human-readable designation; '-' when the ROI has none."""
        self.name(roi)
        areas = self.brodmann.get(int(roi), [])
        return " & ".join(areas) if areas else "-"

    def annotate(self, roi):
        roi = int(roi)
        return {"id": roi, "name": self.name(roi), "brodmann": list(self.brodmann.get(roi, []))}

    def sidecar(self):
        return {
            "schema_version": io.SCHEMA_VERSION,
            "rois": {str(k): {"name": self.names[k], "brodmann": self.brodmann.get(k, [])}
                     for k in sorted(self.names)},
        }

    def save(self, pgm_path, json_path=None):
        pgm_path = Path(pgm_path)
        json_path = Path(json_path) if json_path else pgm_path.with_suffix(".json")
        io.write_labels(pgm_path, self.labels)
        io.write_json(json_path, self.sidecar())

    @classmethod
    def load(cls, pgm_path, json_path=None):
        pgm_path = Path(pgm_path)
        json_path = Path(json_path) if json_path else pgm_path.with_suffix(".json")
        side = io.read_json(json_path)
        rois = side["rois"]
        return cls(
            labels=io.read_labels(pgm_path),
            names={int(k): v["name"] for k, v in rois.items()},
            brodmann={int(k): v.get("brodmann", []) for k, v in rois.items()},
        )


@dataclass
class RoiScoreTable:
    roi_ids: np.ndarray
    means: np.ndarray
    shares: np.ndarray
    ranks: np.ndarray
    method: str = ""
    subject: str = ""

    def order(self):
        """ROI ids sorted by rank."""
        return self.roi_ids[np.argsort(self.ranks, kind="stable")]

    def to_dict(self):
        return {
            "method": self.method,
            "subject": self.subject,
            "rois": [
                {"id": int(r), "mean": float(m), "share": float(s), "rank": int(k)}
                for r, m, s, k in zip(self.roi_ids, self.means, self.shares, self.ranks)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        rows = d["rois"]
        return cls(
            roi_ids=np.array([r["id"] for r in rows], dtype=np.int64),
            means=np.array([r["mean"] for r in rows], dtype=np.float64),
            shares=np.array([r["share"] for r in rows], dtype=np.float64),
            ranks=np.array([r["rank"] for r in rows], dtype=np.int64),
            method=d.get("method", ""),
            subject=d.get("subject", ""),
        )


def rank_descending(values, ids):
    """Ranks 1..n by value descending, ties to the smaller id."""
    order = np.lexsort((ids, -np.asarray(values)))
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(1, len(ids) + 1)
    return ranks


def aggregate_roi(values, atlas: RoiAtlas, method="", subject=""):
    """Per-ROI mean |attribution| and share of the non-background mass.

    ``values`` is an (H, W) grid or anything with a ``values`` attribute.
    """
    grid = np.asarray(getattr(values, "values", values), dtype=np.float64)
    method = method or getattr(values, "method", "")
    if grid.shape != atlas.shape:
        raise ShapeError(f"attribution map {grid.shape} does not match atlas {atlas.shape}")
    ids = atlas.roi_ids
    mag = np.abs(grid).ravel()
    lab = atlas.labels.ravel()
    sums = np.bincount(lab, weights=mag, minlength=ids.max() + 1)[ids]
    counts = np.bincount(lab, minlength=ids.max() + 1)[ids]
    means = sums / counts
    total = sums.sum()
    shares = sums / total if total > 0 else np.zeros_like(sums)
    return RoiScoreTable(roi_ids=ids.copy(), means=means, shares=shares,
                         ranks=rank_descending(means, ids), method=method, subject=subject)


def top_rois(table: RoiScoreTable, k=DEFAULT_TOP_K):
    n = len(table.roi_ids)
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in 1..{n}, got {k}")
    return [int(r) for r in table.order()[:k]]


def roi_frequency(top_lists):
    """ROI id -> (count, fraction) over a cohort of per-subject top lists."""
    top_lists = list(top_lists)
    if not top_lists:
        return {}
    counts = {}
    for lst in top_lists:
        for roi in set(lst):
            counts[int(roi)] = counts.get(int(roi), 0) + 1
    n = len(top_lists)
    return {roi: (c, c / n) for roi, c in sorted(counts.items())}


@dataclass
class CohortSummary:
    method: str
    top: list
    frequencies: dict
    mean_shares: dict


def cohort_top_rois(tables, k=DEFAULT_TOP_K, min_fraction=0.0):
    """Cohort-level top list from per-subject tables.

    ROIs are ordered by how many subjects list them in their top ``k``, then
    by mean share, then by id; the first ``k`` whose occurrence fraction is
    at least ``min_fraction`` are kept.
    """
    tables = list(tables)
    if not tables:
        raise ConfigError("cohort is empty")
    freq = roi_frequency(top_rois(t, k) for t in tables)
    ids = tables[0].roi_ids
    mean_share = np.mean([t.shares for t in tables], axis=0)
    shares = {int(r): float(s) for r, s in zip(ids, mean_share)}
    ranked = sorted(freq, key=lambda r: (-freq[r][0], -shares[r], r))
    top = [r for r in ranked if freq[r][1] >= min_fraction][:k]
    return CohortSummary(method=tables[0].method, top=top, frequencies=freq, mean_shares=shares)


def _pair_key(a, b):
    return f"{a}&{b}"


@dataclass
class ConsensusReport:
    methods: tuple
    top: dict
    pairwise: dict
    threeway: list
    frequencies: dict
    atlas: RoiAtlas

    def to_dict(self):
        def annotate(ids):
            return [self.atlas.annotate(r) for r in ids]

        freqs = {}
        for m, f in self.frequencies.items():
            freqs[m] = {str(r): {"count": int(c), "fraction": float(fr)}
                        for r, (c, fr) in sorted(f.items())}
        return {
            "schema_version": io.SCHEMA_VERSION,
            "methods": list(self.methods),
            "top": {m: annotate(self.top[m]) for m in self.methods},
            "pairwise": {k: annotate(v) for k, v in self.pairwise.items()},
            "threeway": annotate(self.threeway),
            "frequencies": freqs,
        }

    @classmethod
    def from_dict(cls, d, atlas: RoiAtlas):
        def ids(rows):
            return [int(r["id"]) for r in rows]

        methods = tuple(d["methods"])
        freqs = {m: {int(r): (int(v["count"]), float(v["fraction"])) for r, v in f.items()}
                 for m, f in d.get("frequencies", {}).items()}
        return cls(methods=methods, top={m: ids(d["top"][m]) for m in methods},
                   pairwise={k: ids(v) for k, v in d["pairwise"].items()},
                   threeway=ids(d["threeway"]), frequencies=freqs, atlas=atlas)

    def render_text(self):
        """Three-column tables (region, key region, Brodmann area), one per method,
        followed by the intersections."""
        lines = []
        for m in self.methods:
            rows = [(self.atlas.name(r), self.atlas.name(r), self.atlas.brodmann_label(r))
                    for r in self.top[m]]
            header = ("Identified top regions", "Key regions", "Brodmann area")
            widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
                      for i, h in enumerate(header)]
            lines.append(f"[{m}]")
            lines.append(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
            lines.append("-+-".join("-" * w for w in widths))
            for row in rows:
                lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
            lines.append("")
        for key, ids in list(self.pairwise.items()) + [("&".join(self.methods), self.threeway)]:
            body = ", ".join(f"{self.atlas.name(r)} ({self.atlas.brodmann_label(r)})" for r in ids)
            lines.append(f"{key}: {body or '(none)'}")
        return "\n".join(lines) + "\n"


def consensus(saliency_top, gradcam_top, shap_top, atlas: RoiAtlas, frequencies=None,
              methods=METHODS):
    """Pairwise and three-way intersections of per-method top-ROI lists.

    Intersections are reported in ascending ROI id order.
    """
    lists = dict(zip(methods, (saliency_top, gradcam_top, shap_top)))
    for m, lst in lists.items():
        for roi in lst:
            atlas.name(roi)
    sets = {m: set(int(r) for r in lst) for m, lst in lists.items()}
    pairwise = {_pair_key(a, b): sorted(sets[a] & sets[b]) for a, b in combinations(methods, 2)}
    threeway = sorted(set.intersection(*sets.values()))
    if frequencies is None:
        frequencies = {m: {} for m in methods}
    return ConsensusReport(
        methods=tuple(methods),
        top={m: [int(r) for r in lst] for m, lst in lists.items()},
        pairwise=pairwise,
        threeway=threeway,
        frequencies={m: dict(frequencies.get(m, {})) for m in methods},
        atlas=atlas,
    )
