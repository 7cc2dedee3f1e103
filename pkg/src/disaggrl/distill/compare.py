"""Teacher comparison and the occlusion probe."""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..env import EnvConfig, render_depth_batch
from ..nn import PolicyNet
from .core import DistillConfig, distill


def compare_teachers(
    depth_teacher: PolicyNet,
    state_teacher: PolicyNet,
    cfg: DistillConfig,
    seeds=(0, 1, 2),
    out_dir=None,
) -> dict:
    """Distill both teachers into students of ``cfg.student_mode`` with identical budgets and seeds."""
    out = Path(out_dir) if out_dir is not None else None
    teachers = {"depth": depth_teacher, "state": state_teacher}
    report: dict = {"student_mode": cfg.student_mode, "seeds": list(seeds), "teachers": {}}
    rows = []
    for name, teacher in teachers.items():
        runs = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed), student_net=None)
            sub = out / f"{name}_seed{seed}" if out is not None else None
            res = distill(teacher, run_cfg, sub)
            evals = [m for m in res.metrics if "eval_sr" in m]
            if not evals:
                raise ValueError("compare_teachers needs eval_every > 0")
            runs.append({
                "seed": int(seed),
                "final_sr": evals[-1]["eval_sr"],
                "ci95": evals[-1]["eval_ci95"],
                "curve": [{k: m[k] for k in ("iter", "action_mse", "eval_sr") if k in m} for m in res.metrics],
            })
            for m in res.metrics:
                rows.append([name, seed, m["iter"], m["beta"], m["action_mse"], m.get("eval_sr", "")])
        finals = [r["final_sr"] for r in runs]
        report["teachers"][name] = {"runs": runs, "mean_final_sr": float(np.mean(finals))}
    d, s = report["teachers"]["depth"]["mean_final_sr"], report["teachers"]["state"]["mean_final_sr"]
    report["depth_ge_state"] = bool(d >= s)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "compare.csv").open("w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["teacher", "seed", "iter", "beta", "action_mse", "eval_sr"])
            w.writerows(rows)
        (out / "compare.json").write_text(json.dumps(report, indent=2))
    return report


def intervals_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def occlusion_probe(
    depth_teacher: PolicyNet,
    state_teacher: PolicyNet,
    env: EnvConfig,
    anchors: int = 200,
    candidates: int = 64,
    shift: float = 0.02,
    seed: int = 0,
) -> dict:
    """Label variance across object positions that leave the depth render unchanged.

    For each anchor state we draw object positions in a small neighbourhood and
    keep those whose depth image is identical to the anchor's.  The depth
    teacher's label is a function of the render and proprio, so its variance over
    such a set is zero; the state teacher reads the object position directly.
    Anchors are split by whether the gripper disc hides part of the object.
    """
    rng = np.random.default_rng(seed)
    W, H = env.width, env.height
    gr, orad = env.gripper_radius, env.object_radius
    per = {"occluded": {"depth": [], "state": []}, "visible": {"depth": [], "state": []}}
    sizes = []
    for _ in range(anchors):
        obj = rng.uniform([0.15, orad], [0.85, 0.3])
        grip = obj + rng.uniform(-1, 1, 2) * (gr + orad) * 0.7
        objs = np.vstack([obj, obj + rng.uniform(-shift, shift, (candidates, 2))]).astype(np.float32)
        grips = np.repeat(grip[None].astype(np.float32), len(objs), axis=0)
        img = render_depth_batch(grips, objs, W, H, gr, orad)
        keep = np.all(img.reshape(len(objs), -1) == img[0].reshape(-1), axis=1)
        if keep.sum() < 2:
            continue
        objs, grips, img = objs[keep], grips[keep], img[keep]
        n = len(objs)
        sizes.append(n)
        proprio = np.concatenate([grips, np.zeros((n, 5), np.float32)], axis=1)
        state = np.concatenate([grips, objs, np.zeros((n, 1), np.float32)], axis=1)
        # does the gripper hide object pixels at the anchor?
        bare = render_depth_batch(np.full((1, 2), -1.0, np.float32), objs[:1], W, H, gr, orad)
        occluded = bool(np.any((bare[0] == 0.5) & (img[0] == 0.3)))
        labels = {
            "depth": depth_teacher.forward(img, proprio)[0],
            "state": state_teacher.forward(state, proprio)[0],
        }
        key = "occluded" if occluded else "visible"
        for t, lab in labels.items():
            per[key][t].append(float(lab.var(axis=0).sum()))
    report = {"anchors_used": len(sizes), "mean_set_size": float(np.mean(sizes)) if sizes else 0.0}
    for key, d in per.items():
        report[key] = {
            "anchors": len(d["depth"]),
            "depth_label_var": float(np.mean(d["depth"])) if d["depth"] else None,
            "state_label_var": float(np.mean(d["state"])) if d["state"] else None,
        }
    return report
