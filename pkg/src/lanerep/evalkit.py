"""Matching, anomaly and generation metrics plus report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dataset as D
from . import geomkit as gk
from .errors import ConfigurationError

REPORT_SCHEMA = 1
GEOMETRY_MODES = ("with_geometry", "geometry_dropped")
SIMILARITY_CATEGORIES = ("cross_camera_same_rank", "same_group_sibling", "same_camera_other_group", "cross_camera_other_rank")


@dataclass(frozen=True)
class MatchResult:
    query_id: str
    reference_id: str
    query_camera: str
    reference_camera: str
    similarity: float
    rank_diff: float
    query_edges: tuple[int, int]
    reference_edges: tuple[int, int]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def nearest_by_cosine(queries: np.ndarray, bank: np.ndarray):
    """Index and cosine of the best bank row for each query (ties -> lowest index)."""
    S = _unit_rows(queries) @ _unit_rows(bank).T
    idx = np.argmax(S, axis=1)
    return idx, np.clip(S[np.arange(len(S)), idx], -1.0, 1.0)


def match_against_bank(query_records, query_emb, bank_records, bank_emb) -> list[MatchResult]:
    if not len(bank_records):
        raise ValueError("empty reference bank")
    idx, sim = nearest_by_cosine(query_emb, bank_emb)
    out = []
    for q, j, s in zip(query_records, idx, sim):
        r = bank_records[int(j)]
        if r.camera_id == q.camera_id:
            raise AssertionError("query camera leaked into the reference bank")
        out.append(
            MatchResult(
                q.lane_id, r.lane_id, q.camera_id, r.camera_id, float(s),
                float(abs(q.lateral_rank - r.lateral_rank)),
                tuple(int(v) for v in q.edge_flags), tuple(int(v) for v in r.edge_flags),
            )
        )
    return out


def lane_embeddings(encoder, records, windows, geometry_absent: bool = False, key: str = "pooled") -> np.ndarray:
    """Inference-mode lane embeddings for ``records`` over ``windows``."""
    from .training import embed_records

    return embed_records(encoder, records, list(windows), geometry_absent=geometry_absent)[key].numpy().astype(np.float64)


def loco_embeddings(encoder, records, query_windows, reference_windows, mode: str):
    if mode not in GEOMETRY_MODES:
        raise ConfigurationError(f"unknown query geometry mode {mode!r}")
    bank = lane_embeddings(encoder, records, reference_windows)
    queries = lane_embeddings(encoder, records, query_windows, geometry_absent=mode == "geometry_dropped")
    return queries, bank


def loco_match(dataset: D.LaneDataset, encoder, held_out_camera: str, query_geometry_mode: str = "geometry_dropped",
               *, query_windows=(10, 11), reference_windows=tuple(range(8)), embeddings=None) -> list[MatchResult]:
    """Match every lane of ``held_out_camera`` against lanes of all other cameras.

    ``embeddings`` may carry precomputed ``(queries, bank)`` arrays aligned
    with ``dataset.records`` so that a sweep encodes each lane only once.
    """
    recs = dataset.records
    if len({r.camera_id for r in recs}) < 2:
        raise ValueError("LOCO needs at least two cameras")
    if held_out_camera not in {r.camera_id for r in recs}:
        raise ValueError(f"unknown camera {held_out_camera!r}")
    Q, B = embeddings if embeddings is not None else loco_embeddings(encoder, recs, query_windows, reference_windows, query_geometry_mode)
    qi = [i for i, r in enumerate(recs) if r.camera_id == held_out_camera]
    bi = [i for i, r in enumerate(recs) if r.camera_id != held_out_camera]
    return match_against_bank([recs[i] for i in qi], Q[qi], [recs[i] for i in bi], B[bi])


def loco_sweep(dataset, encoder, query_geometry_mode="geometry_dropped", *, query_windows=(10, 11), reference_windows=tuple(range(8))):
    emb = loco_embeddings(encoder, dataset.records, query_windows, reference_windows, query_geometry_mode)
    return [m for cam in dataset.cameras() for m in loco_match(dataset, encoder, cam, embeddings=emb)]


def _standardized_stats(records) -> np.ndarray:
    S = np.stack([r.lane_stats for r in records]).astype(np.float64)
    sd = S.std(axis=0)
    return (S - S.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0)


def traj_stats_baseline(dataset: D.LaneDataset, held_out_camera: str, stats: np.ndarray | None = None) -> list[MatchResult]:
    """Nearest neighbor on per-feature standardized lane statistics."""
    recs = dataset.records
    S = _standardized_stats(recs) if stats is None else stats
    return loco_match(dataset, None, held_out_camera, embeddings=(S, S))


def traj_stats_sweep(dataset):
    S = _standardized_stats(dataset.records)
    return [m for cam in dataset.cameras() for m in traj_stats_baseline(dataset, cam, S)]


def edge_confusion(results) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for m in results:
        for q, r in zip(m.query_edges, m.reference_edges):
            tp += q and r
            fp += r and not q
            fn += q and not r
    return tp, fp, fn


def matching_metrics(results) -> dict:
    """Mean similarity, lateral-rank MAE and micro edge F1 over both flags."""
    if not results:
        raise ValueError("no match results")
    tp, fp, fn = edge_confusion(results)
    f1 = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return {
        "n": len(results),
        "mean_similarity": float(np.mean([m.similarity for m in results])),
        "rank_mae": float(np.mean([m.rank_diff for m in results])),
        "edge_f1": float(f1),
    }


def per_fold_metrics(results) -> list[dict]:
    cams = sorted({m.query_camera for m in results})
    return [{"camera": c, **matching_metrics([m for m in results if m.query_camera == c])} for c in cams]


def roc_curve(scores, labels):
    """``(fpr, tpr, thresholds)`` over distinct scores, descending; equal scores move together."""
    s = np.asarray(scores, np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    return fpr, tpr, np.r_[np.inf, s[last]]


def roc_auroc(scores, labels):
    fpr, tpr, thr = roc_curve(scores, labels)
    return (fpr, tpr, thr), float(np.trapezoid(tpr, fpr))


def similarity_categories(records, embeddings) -> dict[str, np.ndarray]:
    """Pairwise cosines grouped by ground-truth relation (unordered pairs)."""
    Z = _unit_rows(embeddings)
    S = Z @ Z.T
    n = len(records)
    cam = np.array([r.camera_id for r in records])
    grp = np.array([r.group_id for r in records])
    rank = np.array([r.lateral_rank for r in records])
    iu = np.triu_indices(n, k=1)
    same_cam = cam[iu[0]] == cam[iu[1]]
    same_grp = grp[iu[0]] == grp[iu[1]]
    same_rank = np.abs(rank[iu[0]] - rank[iu[1]]) < 1e-9
    sims = S[iu]
    return {
        "cross_camera_same_rank": sims[~same_cam & same_rank],
        "same_group_sibling": sims[same_grp],
        "same_camera_other_group": sims[same_cam & ~same_grp],
        "cross_camera_other_rank": sims[~same_cam & ~same_rank],
    }


def category_table(cats: dict[str, np.ndarray]) -> list[dict]:
    rows = []
    for k in SIMILARITY_CATEGORIES:
        v = cats[k]
        rows.append({
            "category": k,
            "count": int(len(v)),
            "median": float(np.median(v)) if len(v) else float("nan"),
            "mean": float(np.mean(v)) if len(v) else float("nan"),
        })
    return rows


def candidate_diversity(candidates) -> float:
    """Mean pairwise L2 between flattened candidates (0 for fewer than two)."""
    X = np.stack([np.asarray(c, np.float64).ravel() for c in candidates]) if len(candidates) else np.zeros((0, 32))
    if len(X) < 2:
        return 0.0
    iu = np.triu_indices(len(X), k=1)
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    return float(d[iu].mean())


def generation_eval(candidates, groups: dict[str, list], reference_geometries, smoothness_threshold: float) -> dict:
    """Table of spec accuracy, Chamfer, diversity, coherence, FGD and smoothness.

    ``candidates`` are dicts with ``spec_role``, ``group_id``, ``points``
    (16x2) and ``smooth``; ``groups`` maps group id to its lane records.
    """
    by_spec: dict[str, list] = {}
    skipped = 0
    accurate: dict[str, list[bool]] = {}
    chamfer: dict[str, list[float]] = {}
    coherence = []
    for c in candidates:
        lanes = groups[c["group_id"]]
        role = c["spec_role"]
        target = [r for r in lanes if r.role_class == role]
        if not target:
            skipped += 1
            continue
        pts = np.asarray(c["points"], np.float64)
        d = [gk.chamfer_distance(pts, r.geometry) for r in lanes]
        nearest = lanes[int(np.argmin(d))]
        accurate.setdefault(role, []).append(nearest.role_class == role)
        chamfer.setdefault(role, []).append(min(gk.chamfer_distance(pts, r.geometry) for r in target))
        union = np.concatenate([r.geometry for r in lanes])
        coherence.append(gk.chamfer_distance(pts, union))
        by_spec.setdefault(role, []).append(c)
    kept = [c for cs in by_spec.values() for c in cs]
    outlier = np.array([c["smooth"] > smoothness_threshold for c in kept], bool)
    per_spec = []
    for role in sorted(by_spec):
        cs = by_spec[role]
        per_group: dict[str, list] = {}
        for c in cs:
            per_group.setdefault(c["group_id"], []).append(c["points"])
        per_spec.append({
            "spec_role": role,
            "n": len(cs),
            "accuracy": float(np.mean(accurate[role])),
            "chamfer": float(np.mean(chamfer[role])),
            "diversity": float(np.mean([candidate_diversity(v) for v in per_group.values()])),
        })
    pts = [np.asarray(c["points"]) for c in kept]
    ref = [np.asarray(g) for g in reference_geometries]
    smooth = np.array([c["smooth"] for c in kept])
    good = [p for p, o in zip(pts, outlier) if not o]
    edge = [a for r in ("leftmost", "rightmost") for a in accurate.get(r, [])]
    return {
        "per_spec": per_spec,
        "n_candidates": len(candidates),
        "n_evaluated": len(kept),
        "n_skipped": skipped,
        "edge_accuracy": float(np.mean(edge)) if edge else float("nan"),
        "merge_accuracy": float(np.mean(accurate["merge"])) if "merge" in accurate else float("nan"),
        "diversity": float(np.mean([s["diversity"] for s in per_spec])) if per_spec else 0.0,
        "coherence": float(np.mean(coherence)) if coherence else float("nan"),
        "fgd_raw": gk.frechet_geometry_distance(pts, ref) if len(pts) > 1 else float("nan"),
        "fgd_filtered": gk.frechet_geometry_distance(good, ref) if len(good) > 1 else float("nan"),
        "smoothness_raw": float(smooth.mean()) if len(smooth) else float("nan"),
        "smoothness_filtered": float(smooth[~outlier].mean()) if (~outlier).any() else float("nan"),
        "outlier_rate": float(outlier.mean()) if len(outlier) else float("nan"),
        "n_outliers": int(outlier.sum()),
    }


# report files


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if x != x else round(x, 6)
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_table(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError(f"no rows for {path}")
    cols = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_cell(r[c]) for c in cols])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if v != v else f"{float(v):.6f}"
    return v


def match_rows(results) -> list[dict]:
    return [asdict(m) | {"query_edges": "".join(map(str, m.query_edges)), "reference_edges": "".join(map(str, m.reference_edges))} for m in results]


def emit_report(report: dict, out_dir) -> Path:
    """Write ``summary.json``, ``tables/*.csv`` and ``plots/*.png``.

    ``report`` holds ``summary`` (JSON-able dict), ``tables`` (name -> rows)
    and ``plots`` (name -> callable drawing onto a matplotlib Axes).
    """
    out = Path(out_dir)
    try:
        (out / "tables").mkdir(parents=True, exist_ok=True)
        (out / "plots").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    for name, rows in sorted(report.get("tables", {}).items()):
        write_table(rows, out / "tables" / f"{name}.csv")
    summary = {"schema": REPORT_SCHEMA, **_clean(report.get("summary", {}))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    plots = report.get("plots", {})
    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for name, draw in sorted(plots.items()):
            fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
            draw(ax)
            fig.tight_layout()
            fig.savefig(out / "plots" / f"{name}.png", metadata={"Software": None})
            plt.close(fig)
    return out
