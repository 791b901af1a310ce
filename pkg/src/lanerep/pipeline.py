"""End-to-end stages shared by the CLI, the acceptance suite and the demos.

Each stage reads and writes plain files under a run root::

    dataset/scene/            raw synthetic scene
    dataset/lanes/            model-ready lane records
    checkpoints/              <regime>.ckpt, <regime>_curves.csv, generator_<variant>.ckpt
    eval/                     loco.json, anomaly.json, generation.json (report fragments)
    eval/candidates/<variant> generated candidate export
    report/                   summary.json, tables/*.csv, plots/*.png

Fragments hold ``summary`` and ``tables`` only, so that ``report`` can be
rebuilt from them without touching any model.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from . import anomaly as A
from . import config as C
from . import dataset as D
from . import evalkit as E
from . import generator as G
from . import geomkit as gk
from . import scenegen as S
from . import training as T
from .checkpoint import load_into, read_checkpoint, save_checkpoint

EVAL_REPS = 4
# seed stream tags for evaluation corruption
_ANOMALY_TAG = 0x414E4F4D
VARIANT_KEY = {"relational": "attended", "independent": "pooled"}


def layout(root, cfg: C.RunConfig | None = None) -> dict[str, Path]:
    p = C.resolve_paths(cfg or C.RunConfig(), root)
    return {
        "scene": p["dataset_dir"] / "scene",
        "lanes": p["dataset_dir"] / "lanes",
        "checkpoints": p["checkpoint_dir"],
        "eval": p["eval_dir"],
        "candidates": p["eval_dir"] / "candidates",
        "report": p["report_dir"],
    }


def write_fragment(path, summary: dict, tables: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"summary": E._clean(summary), "tables": E._clean(tables)}
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_fragment(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# data


def run_scenegen(cfg: C.RunConfig, out) -> S.SceneDataset:
    scene = S.generate_scene(cfg.scene)
    D.save_scene(scene, out)
    return scene


def run_preprocess(scene_dir, out) -> D.LaneDataset:
    ds = D.build_dataset(D.load_scene(scene_dir))
    D.save_dataset(ds, out)
    return ds


def sweep_dataset(cfg: C.RunConfig, frames: int) -> D.LaneDataset:
    """Same scene layout and seed with a different window length."""
    return D.build_dataset(S.generate_scene(dataclasses.replace(cfg.scene, frames_per_window=int(frames))))


# training


def _ordered(regimes) -> list[str]:
    # two_stage_frozen reuses the contrastive_only stage-1 state
    rs = list(dict.fromkeys(regimes))
    if "two_stage_frozen" in rs and "contrastive_only" in rs:
        rs.remove("contrastive_only")
        rs.insert(rs.index("two_stage_frozen"), "contrastive_only")
    return rs


def run_train(cfg: C.RunConfig, ds: D.LaneDataset, regime: str, ckpt_dir, stage1=None, log=None) -> T.TrainState:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state = T.train(ds, cfg.train, regime, cfg.encoder, cfg.detector, stage1=stage1, log=log, checkpoint_dir=ckpt_dir)
    T.save_state(state, ckpt_dir / f"{regime}.ckpt")
    T.write_curves(state.curves, ckpt_dir / f"{regime}_curves.csv")
    return state


def run_train_all(cfg: C.RunConfig, ds: D.LaneDataset, ckpt_dir, log=None) -> dict[str, T.TrainState]:
    states: dict[str, T.TrainState] = {}
    for regime in _ordered(cfg.eval.regimes):
        stage1 = states.get("contrastive_only") if regime == "two_stage_frozen" else None
        states[regime] = run_train(cfg, ds, regime, ckpt_dir, stage1=stage1, log=log)
    return states


def curve_metrics(curves: list[dict]) -> dict:
    """Final-epoch values plus the last-quarter anomaly-accuracy change."""
    rows = [r for r in curves if r["anomaly_acc"] == r["anomaly_acc"]]
    last = curves[-1]
    out = {"final_pos_sim": last["pos_sim"], "final_neg_sim": last["neg_sim"], "final_anomaly_acc": last["anomaly_acc"]}
    if rows:
        q = rows[int(round(0.75 * (len(rows) - 1)))]
        out["last_quarter_gain"] = rows[-1]["anomaly_acc"] - q["anomaly_acc"]
    else:
        out["last_quarter_gain"] = float("nan")
    return out


# matching


def _match_table(results, by_id, regime, mode) -> list[dict]:
    return [
        {
            "regime": regime, "mode": mode, "query_id": m.query_id, "reference_id": m.reference_id,
            "query_camera": m.query_camera, "reference_camera": m.reference_camera,
            "query_rank": by_id[m.query_id].lateral_rank, "reference_rank": by_id[m.reference_id].lateral_rank,
            "similarity": m.similarity, "rank_diff": m.rank_diff,
            "query_edges": "".join(map(str, m.query_edges)), "reference_edges": "".join(map(str, m.reference_edges)),
        }
        for m in results
    ]


def run_eval_loco(cfg: C.RunConfig, ds: D.LaneDataset, encoders: dict, out_path=None) -> dict:
    """Matching metrics for every encoder and query mode, plus traj-stats."""
    by_id = ds.by_id()
    qw, rw = cfg.eval.query_windows, cfg.eval.reference_windows
    summary, rows, folds, matches = {}, [], [], []
    runs = [(regime, mode, E.loco_sweep(ds, enc, mode, query_windows=qw, reference_windows=rw)) for regime, enc in encoders.items() for mode in E.GEOMETRY_MODES]
    runs.append(("traj_stats_baseline", "stats", E.traj_stats_sweep(ds)))
    for regime, mode, res in runs:
        m = E.matching_metrics(res)
        per = E.per_fold_metrics(res)
        summary[f"{regime}/{mode}"] = {**m, "worst_fold_rank_mae": max(f["rank_mae"] for f in per), "worst_fold_edge_f1": min(f["edge_f1"] for f in per)}
        rows.append({"regime": regime, "mode": mode, **m})
        folds += [{"regime": regime, "mode": mode, **f} for f in per]
        matches += _match_table(res, by_id, regime, mode)
    tables = {"matching": rows, "matching_folds": folds, "matches": matches}
    if "joint" in encoders:
        enc = encoders["joint"]
        for key in ("projection", "pooled"):
            Z = E.lane_embeddings(enc, ds.records, qw, key=key)
            cats = E.similarity_categories(ds.records, Z)
            table = E.category_table(cats)
            tables[f"similarity_{key}"] = table
            med = {r["category"]: r["median"] for r in table}
            summary[f"similarity_{key}"] = med | {"same_rank_minus_sibling": med["cross_camera_same_rank"] - med["same_group_sibling"]}
    if out_path is not None:
        write_fragment(out_path, summary, tables)
    return {"summary": summary, "tables": tables}


# anomaly


def anomaly_scores(encoder, detector, ds: D.LaneDataset, seed: int, windows, reps: int = EVAL_REPS, probability: float = 0.15):
    """Pooled ``(scores, labels)`` per window set over ``reps`` corruption draws."""
    cap = float(ds.config.get("count_cap", D.COUNT_CAP))
    seq = list(range(int(ds.config["n_windows"])))
    flat = sorted({w for ws in windows.values() for w in ws})
    out = {k: ([], []) for k in windows}
    for rep in range(reps):
        rng = np.random.default_rng([seed, _ANOMALY_TAG, rep])
        recs = A.evaluation_corruption(ds.records, flat, rng, cap, probability)
        p = A.window_probabilities(encoder, detector, recs, seq)
        y, v = A.labels_and_validity(recs, seq)
        for k, ws in windows.items():
            cols = [seq.index(w) for w in ws]
            out[k][0].append(p[:, cols][v[:, cols]])
            out[k][1].append(y[:, cols][v[:, cols]])
    return {k: (np.concatenate(s).astype(np.float64), np.concatenate(y)) for k, (s, y) in out.items()}


def anomaly_metrics(encoder, detector, ds: D.LaneDataset, cfg: C.RunConfig) -> dict:
    sets = anomaly_scores(encoder, detector, ds, cfg.seed, {"val": cfg.train.val_windows, "test": cfg.eval.query_windows}, probability=cfg.train.val_corruption_probability)
    (sv, yv), (st, yt) = sets["val"], sets["test"]
    A.warn_if_single_class(yv, "anomaly validation windows")
    thr = A.select_threshold(sv, yv)
    (fpr, tpr, _), auroc = E.roc_auroc(st, yt)
    return {
        "frames": int(ds.config["frames_per_window"]),
        "n_test": int(len(yt)),
        "n_positive": int(yt.sum()),
        "auroc": auroc,
        "default": A.binary_metrics(st, yt, cfg.detector.threshold),
        "youden": A.binary_metrics(st, yt, thr),
        "roc": {"fpr": fpr.tolist(), "tpr": tpr.tolist()},
    }


def _timelines(encoder, detector, ds: D.LaneDataset, seed: int) -> list[dict]:
    cap = float(ds.config.get("count_cap", D.COUNT_CAP))
    plan = {3: A.AnomalySpec("speed_reduction"), 4: A.AnomalySpec("speed_reduction"), 7: A.AnomalySpec("trajectory_dropout"), 10: A.AnomalySpec("lateral_deviation")}
    rows = []
    for role in S.ROLE_CLASSES:
        rec = next((r for r in ds.records if r.role_class == role and all(r.windows[w].is_valid for w in plan)), None)
        if rec is None:
            continue
        bad = A.corrupt_record(rec, plan, np.random.default_rng([seed, 0x544C]), cap)
        tl = A.score_timeline(encoder, detector, rec, bad)
        for i in range(len(tl["window"])):
            rows.append({"role": role, "lane_id": rec.lane_id, "window": int(tl["window"][i]), "clean_prob": float(tl["clean_prob"][i]),
                         "corrupted_prob": float(tl["corrupted_prob"][i]), "injected": int(tl["injected"][i]), "valid": int(tl["valid"][i])})
    return rows


def run_eval_anomaly(cfg: C.RunConfig, ds: D.LaneDataset, encoder, detector, frames=None, out_path=None) -> dict:
    """Window-level detection at the dataset's window length and each swept length."""
    frames = list(cfg.eval.window_sweep if frames is None else frames)
    base = int(ds.config["frames_per_window"])
    summary, rows, roc = {}, [], []
    for n in frames:
        data = ds if n == base else sweep_dataset(cfg, n)
        m = anomaly_metrics(encoder, detector, data, cfg)
        summary[str(n)] = {"auroc": m["auroc"], "n_test": m["n_test"], "n_positive": m["n_positive"],
                           **{f"{op}_{k}": m[op][k] for op in ("default", "youden") for k in ("threshold", "precision", "recall", "f1", "accuracy")}}
        for op in ("default", "youden"):
            rows.append({"frames": n, "operating_point": op, "auroc": m["auroc"], **m[op]})
        roc += [{"frames": n, "fpr": f, "tpr": t} for f, t in zip(m["roc"]["fpr"], m["roc"]["tpr"])]
    tables = {"anomaly": rows, "roc": roc}
    if base in frames:
        tables["timelines"] = _timelines(encoder, detector, ds, cfg.seed)
    if out_path is not None:
        write_fragment(out_path, summary, tables)
    return {"summary": summary, "tables": tables}


# generation


def conditioning_embeddings(encoder, ds: D.LaneDataset, cfg: C.RunConfig, variant: str) -> np.ndarray:
    return E.lane_embeddings(encoder, ds.records, cfg.train.train_windows, key=VARIANT_KEY[variant])


def save_denoiser(den: G.FiLMDenoiser, path, variant: str) -> None:
    save_checkpoint(path, {"denoiser": den}, {"diffusion": G.diffusion_config_to_dict(den.cfg), "variant": variant}, den.cfg.seed)


def load_denoiser(path) -> tuple[G.FiLMDenoiser, str]:
    header, tensors = read_checkpoint(path)
    cfg = G.DiffusionConfig(**header["config"]["diffusion"])
    den = G.FiLMDenoiser(cfg)
    load_into({"denoiser": den}, tensors)
    den.eval()
    return den, header["config"]["variant"]


def run_train_generator(cfg: C.RunConfig, ds: D.LaneDataset, encoder, variant: str, ckpt_dir, log=None) -> G.FiLMDenoiser:
    Z = conditioning_embeddings(encoder, ds, cfg, variant)
    W, Zt = G.training_pairs(ds.records, Z)
    den, _ = G.train_denoiser(W, Zt, cfg.diffusion, log=log)
    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    save_denoiser(den, Path(ckpt_dir) / f"generator_{variant}.ckpt", variant)
    return den


def smoothness_cut(ds: D.LaneDataset) -> float:
    return gk.smoothness_threshold([gk.curvature_smoothness(r.geometry) for r in ds.records])


def run_generate(cfg: C.RunConfig, ds: D.LaneDataset, encoder, den: G.FiLMDenoiser, variant: str, out_dir=None, specs=None):
    """Candidates for every (group, role) spec, or for the given ``specs``."""
    Z = conditioning_embeddings(encoder, ds, cfg, variant)
    skipped = 0
    if specs is None:
        specs, skipped = G.build_specs(ds.records, Z)
    cands = G.generate_all(specs, dataclasses.replace(cfg.diffusion, seed=den.cfg.seed), den, encoder, smoothness_cut(ds))
    if out_dir is not None:
        G.export_candidates(cands, out_dir)
    return cands, specs, skipped


def identity_check(cfg: C.RunConfig, specs, den, encoder) -> bool:
    """At ``t0 = 0`` every candidate equals its anchor."""
    zero = dataclasses.replace(cfg.diffusion, t0=0)
    return all(np.array_equal(c.points, s.anchor) for s in specs for c in G.sample(s, zero, den, encoder))


def generation_metrics(ds: D.LaneDataset, cands) -> dict:
    groups: dict[str, list] = {}
    for r in ds.records:
        groups.setdefault(r.group_id, []).append(r)
    rows = [dict(spec_role=c.spec_role, group_id=c.group_id, points=c.points, smooth=c.smooth) for c in cands]
    return E.generation_eval(rows, groups, [r.geometry for r in ds.records], smoothness_cut(ds))


def _overlay_rows(ds: D.LaneDataset, cands, variant: str) -> list[dict]:
    gid = sorted({c.group_id for c in cands if c.spec_role == "merge"} or {c.group_id for c in cands})[0]
    rows = []
    for r in ds.records:
        if r.group_id == gid:
            rows += [{"variant": variant, "kind": "real", "role": r.role_class, "item": r.lane_id, "x": float(x), "y": float(y)} for x, y in r.geometry]
    for i, c in enumerate(c for c in cands if c.group_id == gid):
        rows += [{"variant": variant, "kind": "candidate", "role": c.spec_role, "item": f"c{i}", "x": float(x), "y": float(y)} for x, y in c.points]
    return rows


def run_generation(cfg: C.RunConfig, ds: D.LaneDataset, encoder, root, variants=C.CONDITIONING, log=None, out_path=None) -> dict:
    paths = layout(root, cfg)
    summary, per_spec, overlay = {}, [], []
    for variant in variants:
        den = run_train_generator(cfg, ds, encoder, variant, paths["checkpoints"], log=log)
        cands, specs, skipped = run_generate(cfg, ds, encoder, den, variant, paths["candidates"] / variant)
        res = generation_metrics(ds, cands)
        res["identity_t0_zero"] = identity_check(cfg, specs, den, encoder)
        res["specs_skipped"] = skipped
        per_spec += [{"variant": variant, **row} for row in res.pop("per_spec")]
        summary[variant] = res
        overlay += _overlay_rows(ds, cands, variant)
    tables = {"generation": per_spec, "generation_overlay": overlay}
    if out_path is not None:
        write_fragment(out_path, summary, tables)
    return {"summary": summary, "tables": tables}


# report


def _curves_table(ckpt_dir) -> list[dict]:
    rows = []
    for path in sorted(Path(ckpt_dir).glob("*_curves.csv")):
        regime = path.name[: -len("_curves.csv")]
        rows += [{"regime": regime, **r} for r in T.read_curves(path)]
    return rows


def _plot_roc(roc):
    def draw(ax):
        for n in sorted({r["frames"] for r in roc}):
            pts = [r for r in roc if r["frames"] == n]
            ax.plot([r["fpr"] for r in pts], [r["tpr"] for r in pts], label=f"{n} frames")
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=7)
    return draw


def _plot_curves(curves, column):
    def draw(ax):
        for regime in sorted({r["regime"] for r in curves}):
            pts = [r for r in curves if r["regime"] == regime and r[column] == r[column]]
            ax.plot([r["epoch"] for r in pts], [r[column] for r in pts], label=regime)
        ax.set_xlabel("epoch")
        ax.set_ylabel(column)
        ax.legend(fontsize=7)
    return draw


def _plot_similarity(curves):
    def draw(ax):
        pts = [r for r in curves if r["regime"] == "joint"]
        ax.plot([r["epoch"] for r in pts], [r["pos_sim"] for r in pts], label="positive pairs")
        ax.plot([r["epoch"] for r in pts], [r["neg_sim"] for r in pts], label="negative pairs")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean cosine")
        ax.legend(fontsize=7)
    return draw


def _plot_scatter(matches):
    def draw(ax):
        ax.scatter([m["query_rank"] for m in matches], [m["reference_rank"] for m in matches], s=10, alpha=0.6)
        ax.set_xlabel("query lateral rank")
        ax.set_ylabel("matched reference lateral rank")
    return draw


def _plot_timelines(rows):
    def draw(ax):
        for k, role in enumerate(sorted({r["role"] for r in rows})):
            pts = [r for r in rows if r["role"] == role]
            ax.plot([r["window"] + 0.0 for r in pts], [r["corrupted_prob"] + 1.2 * k for r in pts], label=f"{role} corrupted")
            ax.plot([r["window"] + 0.0 for r in pts], [r["clean_prob"] + 1.2 * k for r in pts], color="0.6", lw=0.8)
            for r in pts:
                if r["injected"]:
                    ax.axvspan(r["window"] - 0.5, r["window"] + 0.5, ymin=0, ymax=1, color="r", alpha=0.05)
        ax.set_xlabel("window")
        ax.set_ylabel("anomaly probability (offset per role)")
        ax.legend(fontsize=6)
    return draw


def _plot_overlay(rows, variant):
    def draw(ax):
        sel = [r for r in rows if r["variant"] == variant]
        for item in sorted({r["item"] for r in sel}):
            pts = [r for r in sel if r["item"] == item]
            real = pts[0]["kind"] == "real"
            ax.plot([p["x"] for p in pts], [p["y"] for p in pts], color="k" if real else "C1", lw=1.6 if real else 0.7, alpha=1 if real else 0.6)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(f"{variant} conditioning", fontsize=8)
    return draw


def build_report(root, cfg: C.RunConfig | None = None, out_dir=None) -> Path:
    """Merge the eval fragments and training curves into the report directory."""
    paths = layout(root, cfg)
    summary, tables, plots = {}, {}, {}
    for name in ("loco", "anomaly", "generation"):
        path = paths["eval"] / f"{name}.json"
        if path.exists():
            frag = read_fragment(path)
            summary[name] = frag["summary"]
            tables.update(frag["tables"])
    curves = _curves_table(paths["checkpoints"])
    if curves:
        tables["curves"] = curves
        summary["training"] = {regime: curve_metrics([r for r in curves if r["regime"] == regime]) for regime in sorted({r["regime"] for r in curves})}
        plots["training_anomaly_accuracy"] = _plot_curves(curves, "anomaly_acc")
        plots["training_similarity"] = _plot_similarity(curves)
    if "roc" in tables:
        plots["roc"] = _plot_roc(tables["roc"])
    if "matches" in tables:
        sel = [m for m in tables["matches"] if m["regime"] == "joint" and m["mode"] == "geometry_dropped"]
        if sel:
            plots["rank_alignment"] = _plot_scatter(sel)
    if tables.get("timelines"):
        plots["timelines"] = _plot_timelines(tables["timelines"])
    for variant in sorted({r["variant"] for r in tables.get("generation_overlay", [])}):
        plots[f"generation_{variant}"] = _plot_overlay(tables["generation_overlay"], variant)
    if cfg is not None:
        summary["config"] = C.to_dict(cfg)
    if not tables:
        raise FileNotFoundError(f"no evaluation outputs under {paths['eval']}")
    return E.emit_report({"summary": summary, "tables": tables, "plots": plots}, out_dir or paths["report"])


def run_all(cfg: C.RunConfig, root, log=None) -> dict:
    """Every stage in order; returns the in-memory results as well."""
    torch.set_num_threads(1)
    paths = layout(root, cfg)
    run_scenegen(cfg, paths["scene"])
    ds = run_preprocess(paths["scene"], paths["lanes"])
    states = run_train_all(cfg, ds, paths["checkpoints"], log=log)
    encoders = {k: s.encoder for k, s in states.items() if k != "two_stage_frozen"}
    for enc in encoders.values():
        enc.eval()
    loco = run_eval_loco(cfg, ds, encoders, paths["eval"] / "loco.json")
    joint = states["joint"]
    anomaly = run_eval_anomaly(cfg, ds, joint.encoder, joint.detector, out_path=paths["eval"] / "anomaly.json")
    generation = run_generation(cfg, ds, joint.encoder, root, log=log, out_path=paths["eval"] / "generation.json")
    report = build_report(root, cfg)
    curves = {k: curve_metrics(s.curves) for k, s in states.items()}
    return {"dataset": ds, "states": states, "loco": loco, "anomaly": anomaly, "generation": generation, "curves": curves, "report": report}
