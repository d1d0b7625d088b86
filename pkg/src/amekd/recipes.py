"""Named experiment recipes and their on-disk outputs."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .diagnostics import (
    GapSweepResult,
    alignment_metrics,
    embedding_rows,
    evaluate,
    gap_sweep,
    manifold_rows_by_class,
    margin_check,
)
from .distill import TrainResult, TrainTrace, save_checkpoint, train
from .synthgen import TeacherModel, generate, held_out

log = logging.getLogger(__name__)


class OutputWriter:
    """Collects output files in memory, then writes them with a manifest."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def text(self, name: str, content: str) -> None:
        self.files[name] = content

    def json(self, name: str, doc) -> None:
        self.files[name] = json.dumps(doc, indent=2, allow_nan=True) + "\n"

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
        self.files[name] = buf.getvalue()

    def flush(self, config: ExperimentConfig) -> dict:
        hashes = {}
        for name in sorted(self.files):
            data = self.files[name].encode()
            path = self.out_dir / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            hashes[name] = hashlib.sha256(data).hexdigest()
        manifest = {
            "library": "amekd",
            "version": __version__,
            "recipe": config.recipe,
            "config": config.model_dump(),
            "outputs": hashes,
            # informational only; never part of any hashed output
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _trace_rows(seed: int, trace: TrainTrace, mode: str | None = None):
    for r in trace.rows:
        lead = [seed] if mode is None else [seed, mode]
        yield [*lead, r.step, r.epoch, r.kd, r.entropy, r.total, r.grad_angle_deg, r.zeta_hat]


TRACE_HEADER = ["seed", "step", "epoch", "kd", "entropy", "total", "grad_angle_deg", "zeta_hat"]


def _embedding_csv(out: OutputWriter, items):
    """``items``: iterable of (seed, student, projections, dataset)."""
    rows, r_dim = [], 0
    for seed, student, proj, data in items:
        r_dim = proj.manifold_dim
        for row_id, cls, modality, coords in embedding_rows(student, proj, data):
            rows.append([seed, row_id, cls, modality, *coords.tolist()])
    out.csv("embeddings.csv", ["seed", "row_id", "class", "modality", *[f"m{i}" for i in range(r_dim)]], rows)


def _alignment(result: TrainResult, data) -> dict:
    spread, zeta = alignment_metrics(manifold_rows_by_class(result.student, result.projections, data))
    return {"intra_spread": spread, "zeta_hat": zeta, "margin_check_passed": margin_check(spread, zeta)}


def _train_seed(cfg: ExperimentConfig, seed: int, shots: int | None = None, **overrides):
    data = generate(cfg.geometry.build(), shots or cfg.shots, seed)
    teacher = TeacherModel.from_dataset(data)
    tcfg = cfg.train_config(seed)
    if overrides:
        tcfg = tcfg.replace(**overrides)
    return data, teacher, tcfg, train(data, teacher, tcfg)


def run_base_to_new(cfg: ExperimentConfig, out: OutputWriter) -> None:
    per_seed, trace_rows, angle_rows, emb = [], [], [], []
    for seed in cfg.seeds:
        data, teacher, tcfg, res = _train_seed(cfg, seed)
        test = held_out(data, cfg.test_shots)
        report = evaluate(res.student, test, "both")
        per_seed.append({"seed": seed, **report.to_dict(), "alignment": _alignment(res, data)})
        trace_rows.extend(_trace_rows(seed, res.trace))
        angle_rows.extend([seed, r.step, r.grad_angle_deg] for r in res.trace.rows)
        emb.append((seed, res.student, res.projections, data))
        ckpt = io.StringIO()
        _checkpoint_json(ckpt, res, tcfg)
        out.text(f"checkpoints/seed_{seed}.json", ckpt.getvalue())
    mean = {k: _mean(p[k] for p in per_seed) for k in ("base_acc", "new_acc", "hm")}
    out.json("eval.json", {"per_seed": per_seed, "mean": mean})
    out.csv("trace.csv", TRACE_HEADER, trace_rows)
    out.csv("angles.csv", ["seed", "step", "angle_deg"], angle_rows)
    _embedding_csv(out, emb)


def _checkpoint_json(stream, res: TrainResult, tcfg) -> None:
    doc = {"config": asdict(tcfg), "student": res.student.to_dict(),
           "projections": res.projections.to_dict()}
    stream.write(json.dumps(doc, indent=2) + "\n")


def run_collapse(cfg: ExperimentConfig, out: OutputWriter) -> None:
    per_seed, trace_rows, emb = [], [], []
    for seed in cfg.seeds:
        data, _, _, res = _train_seed(cfg, seed, kd_weight=0.0)
        align = _alignment(res, data)
        last = res.trace.rows[-1]
        bd_probs = _final_max_prob(res, data)
        per_seed.append({
            "seed": seed,
            **align,
            "initial_entropy": res.trace.rows[0].entropy,
            "final_entropy": last.entropy,
            "final_max_prob": bd_probs,
        })
        trace_rows.extend(_trace_rows(seed, res.trace))
        emb.append((seed, res.student, res.projections, data))
    failed = [p["seed"] for p in per_seed if not p["margin_check_passed"]]
    out.json("collapse.json", {
        "kd_weight": 0.0,
        "per_seed": per_seed,
        "margin_check_failed_seeds": failed,
        "margin_check": "failed" if 2 * len(failed) > len(per_seed) else "passed",
    })
    out.csv("trace.csv", TRACE_HEADER, trace_rows)
    _embedding_csv(out, emb)


def _final_max_prob(res: TrainResult, data) -> float:
    from .rsm import apply_projections, assemble_manifold

    base = data.subset(data.base_classes)
    w, v = apply_projections(res.projections, res.student.normalized(), base.images)
    return float(assemble_manifold(w, v).probs.max())


def run_angle_study(cfg: ExperimentConfig, out: OutputWriter) -> None:
    modes = {
        "identity-frozen": {"identity_projections": True, "freeze_projections": True},
        "learnable": {"identity_projections": False, "freeze_projections": False},
    }
    rows, summary = [], []
    for seed in cfg.seeds:
        entry = {"seed": seed}
        for mode, overrides in modes.items():
            _, _, _, res = _train_seed(cfg, seed, **overrides)
            angles = [r.grad_angle_deg for r in res.trace.rows]
            rows.extend([seed, mode, r.step, r.grad_angle_deg] for r in res.trace.rows)
            valid = [a for a in angles if a is not None]
            entry[mode] = {
                "median_angle_deg": float(np.median(valid)) if valid else None,
                "fraction_below_90": float(np.mean(np.array(valid) < 90.0)) if valid else None,
                "missing_points": len(angles) - len(valid),
            }
        summary.append(entry)
    out.csv("angles.csv", ["seed", "mode", "step", "angle_deg"], rows)
    out.json("angle_summary.json", {"per_seed": summary})


def _gap_rows(omega: float, res: GapSweepResult):
    for p in res.points:
        yield [omega, p.n, p.seed, p.train_loss, p.test_loss, p.gap, p.delta_hat, int(p.diverged)]


def run_gap_sweep(cfg: ExperimentConfig, out: OutputWriter) -> None:
    geometry = cfg.geometry.build()
    base_cfg = cfg.train_config(cfg.seeds[0])
    omegas = [base_cfg.omega]
    if cfg.compare_omega != base_cfg.omega:
        omegas.append(cfg.compare_omega)
    rows, summary = [], {}
    for omega in omegas:
        res = gap_sweep(geometry, cfg.shot_grid, base_cfg.replace(omega=omega), cfg.seeds,
                        holdout=cfg.holdout, workers=cfg.workers)
        rows.extend(_gap_rows(omega, res))
        summary[repr(omega)] = {
            "mean_gap": {str(n): g for n, g in res.mean_gap.items()},
            "loglog_slope": res.slope,
            "diverged_points": [[p.n, p.seed] for p in res.points if p.diverged],
        }
    out.csv("gap_sweep.csv",
            ["omega", "n", "seed", "train_loss", "test_loss", "gap", "delta_hat", "diverged"], rows)
    out.json("gap_summary.json", {"shot_grid": cfg.shot_grid, "seeds": cfg.seeds, "by_omega": summary})


def run_shot_sweep(cfg: ExperimentConfig, out: OutputWriter) -> None:
    rows, by_shots = [], {}
    for shots in cfg.shot_grid:
        reports = []
        for seed in cfg.seeds:
            data, _, _, res = _train_seed(cfg, seed, shots=shots)
            rep = evaluate(res.student, held_out(data, cfg.test_shots), "both")
            reports.append(rep)
            rows.append([shots, seed, rep.base_acc, rep.new_acc, rep.hm])
        by_shots[str(shots)] = {k: _mean(getattr(r, k) for r in reports)
                                for k in ("base_acc", "new_acc", "hm")}
    out.csv("shot_sweep.csv", ["shots", "seed", "base_acc", "new_acc", "hm"], rows)
    out.json("eval.json", {"by_shots": by_shots})


RECIPES = {
    "base-to-new": run_base_to_new,
    "collapse": run_collapse,
    "angle-study": run_angle_study,
    "gap-sweep": run_gap_sweep,
    "shot-sweep": run_shot_sweep,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> dict:
    """Run ``cfg.recipe`` and write its outputs plus ``manifest.json``.

    Nothing is written unless the recipe completes.
    """
    out_dir = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    writer = OutputWriter(out_dir)
    RECIPES[cfg.recipe](cfg, writer)
    return writer.flush(cfg)
