"""Command-line harness: ``splatpose {synth,render,coarse,refine,eval,ablate,report}``.

Exit status is 0 when every frame was processed and every ``accept_*``
threshold of the experiment config was met, 1 otherwise, and 2 for usage
or input errors.  ``SPLATPOSE_THREADS`` sets the default number of worker
processes for per-frame work.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, files
from .coarse import CoarseConfig, coarse_estimate
from .experiment import (
    Experiment, TrialResult, ablation_configs, load_experiment, noisy_nocs, run_trial, standard_camera, trial_rng,
    view_poses,
)
from .metrics import PoseError, Thresholds, diameter, pose_error, success_report
from .plyio import PlyError, load_ply, save_ply
from .render import observe, rasterize
from .scene import SHAPES, SceneSpec, synth_scene

log = logging.getLogger("splatpose")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OVERLAY_ALPHA = 0.5


class UsageError(Exception):
    pass


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("SPLATPOSE_THREADS", "1")))
    except ValueError:
        return 1


def versions() -> dict:
    import numba
    import PIL
    import scipy

    return {"splatpose": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pillow": PIL.__version__}


def write_manifest(out_dir, command: str, config: dict, seed: int) -> dict:
    blob = json.dumps(config, sort_keys=True, default=str)
    manifest = {"command": command, "config": config, "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
                "seed": seed, "versions": versions()}
    files.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# dataset layout: <data>/model.ply, <data>/poses.json, <data>/frames/<id>_{rgb,depth,mask,nocs}.png
# ---------------------------------------------------------------------------


def _data_paths(data_dir):
    return os.path.join(data_dir, "model.ply"), os.path.join(data_dir, "poses.json"), os.path.join(data_dir, "frames")


def _load_dataset(data_dir, model_path=None):
    ply, poses_path, frames_dir = _data_paths(data_dir)
    try:
        model = load_ply(model_path or ply)
        K, poses, doc = files.load_poses(poses_path)
    except (OSError, PlyError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load dataset: {exc}") from exc
    return model, K, poses, frames_dir, doc


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SceneSpec(shape=args.shape, count=args.count, seed=args.seed, size=args.size,
                     textureless=args.textureless)
    model = synth_scene(spec)
    K = standard_camera(args.width, args.height, args.fov)
    poses = view_poses(args.views, seed=args.seed, distance=args.distance)
    ply, poses_path, frames_dir = _data_paths(args.out)
    os.makedirs(frames_dir, exist_ok=True)
    save_ply(model, ply)
    frames = {}
    for i, T in enumerate(poses):
        fid = f"{i:04d}"
        frame = observe(model, T, K)
        nocs = rasterize(model, T, K, mode="nocs")
        files.save_frame(frames_dir, fid, frame, nocs)
        frames[fid] = T
    extra = {"aabb": model.aabb().to_dict(), "diameter": diameter(model.positions),
             "scene": dataclasses.asdict(spec)}
    files.save_poses(poses_path, K, frames, extra)
    write_manifest(args.out, "synth", {**dataclasses.asdict(spec), "views": args.views, "width": args.width,
                                       "height": args.height, "fov": args.fov, "distance": args.distance}, args.seed)
    print(f"wrote {len(frames)} views to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    try:
        model = load_ply(args.model)
        K, poses, _ = files.load_poses(args.poses)
    except (OSError, PlyError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from exc
    ids = [args.frame] if args.frame else sorted(poses)
    for fid in ids:
        if fid not in poses:
            raise UsageError(f"frame {fid!r} not in {args.poses}")
        T = poses[fid]
        if args.mode in ("color", "depth", "all"):
            fr = rasterize(model, T, K)
            if args.mode in ("color", "all"):
                files.save_rgb(os.path.join(args.out, f"{fid}_rgb.png"), fr.rgb)
            if args.mode in ("depth", "all"):
                files.save_depth(os.path.join(args.out, f"{fid}_depth.png"), fr.depth)
                files.save_mask(os.path.join(args.out, f"{fid}_mask.png"), fr.mask)
        if args.mode in ("nocs", "all"):
            files.save_rgb(os.path.join(args.out, f"{fid}_nocs.png"), rasterize(model, T, K, mode="nocs").rgb)
    print(f"rendered {len(ids)} view(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# coarse
# ---------------------------------------------------------------------------


def cmd_coarse(args) -> int:
    model, K, poses, frames_dir, _ = _load_dataset(args.data, args.model)
    dia = diameter(model.positions)
    cfg = CoarseConfig(threshold=args.threshold)
    rows, errors, failed = [], [], 0
    for i, fid in enumerate(sorted(poses)):
        rng = trial_rng(args.seed, i, 0)
        row = {"frame_id": fid, "status": "failed"}
        try:
            nocs = noisy_nocs(files.load_nocs(frames_dir, fid), rng, args.nocs_noise)
            res = coarse_estimate(model, nocs, K, dataclasses.replace(cfg, seed=int(rng.integers(2**31))))
            err = pose_error(model.positions, poses[fid], res.pose)
            row.update(status="ok", T_coarse=files.pose_to_json(res.pose), inliers=int(len(res.inliers)),
                       rms_px=round(res.rms, 6), error={k: round(v, 10) for k, v in err.to_dict().items()})
            errors.append(err)
        except (OSError, ValueError) as exc:
            row["message"] = str(exc)
            failed += 1
        rows.append(row)
    report = success_report(errors, dia).to_dict() if errors else None
    files.write_json(os.path.join(args.out, "coarse.json"), {"frames": rows, "report": report})
    write_manifest(args.out, "coarse", {"threshold": args.threshold, "nocs_noise": args.nocs_noise}, args.seed)
    if report:
        print(f"coarse: {len(errors)} ok, {failed} failed, R<5deg {report['rot_rate']:.3f}")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------


def _load_exp(args) -> Experiment:
    try:
        exp = load_experiment(args.config) if args.config else Experiment()
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    if args.seed is not None:
        exp = dataclasses.replace(exp, seed=args.seed)
    return exp


def _frame_job(job):
    """Worker: one (frame, trial).  Top level so it can be pickled."""
    (data_dir, model_path, fid, index, trial, exp, refine_cfg, keep) = job
    model = load_ply(model_path)
    K, poses, _ = files.load_poses(os.path.join(data_dir, "poses.json"))
    frames_dir = os.path.join(data_dir, "frames")
    T_gt = poses[fid]
    try:
        frame = files.load_frame(frames_dir, fid)
        nocs = files.load_nocs(frames_dir, fid) if exp.init == "nocs" else None
    except OSError as exc:
        return TrialResult(fid, trial, "failed", T_gt=T_gt, message=f"missing input: {exc}")
    return run_trial(model, frame, K, T_gt, exp, fid, index, trial, nocs=nocs, refine_cfg=refine_cfg,
                     keep_render=keep)


def _run_jobs(jobs, n_workers: int):
    if n_workers <= 1 or len(jobs) <= 1:
        return [_frame_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as ex:
        return list(ex.map(_frame_job, jobs))


def _overlay(obs_rgb, render_rgb, failed: bool) -> np.ndarray:
    img = (1 - OVERLAY_ALPHA) * obs_rgb + OVERLAY_ALPHA * render_rgb
    if failed:
        img = img.copy()
        b = max(1, min(img.shape[:2]) // 32)
        for sl in (np.s_[:b, :], np.s_[-b:, :], np.s_[:, :b], np.s_[:, -b:]):
            img[sl] = (1.0, 0.0, 0.0)
    return img


def _summarise(results, dia: float, exp: Experiment) -> dict:
    ok = [r for r in results if r.status == "ok" and r.error is not None]
    rep = success_report([r.error for r in ok], dia, Thresholds(), exp.symmetric).to_dict() if ok else None
    coarse = [r.coarse_error for r in results if r.coarse_error is not None]
    crep = success_report(coarse, dia, Thresholds(), exp.symmetric).to_dict() if coarse else None
    acceptance = {}
    for key, minimum in sorted(exp.accept.items()):
        got = rep.get(key) if rep else None
        acceptance[key] = {"min": minimum, "value": got, "pass": got is not None and got >= minimum}
    return {"report": rep, "coarse_report": crep, "acceptance": acceptance,
            "n_failed": sum(r.status != "ok" for r in results)}


def cmd_refine(args) -> int:
    exp = _load_exp(args)
    model, K, poses, frames_dir, _ = _load_dataset(args.data, args.model)
    model_path = args.model or _data_paths(args.data)[0]
    dia = diameter(model.positions)
    ids = sorted(poses)
    jobs = [(args.data, model_path, fid, i, t, exp, exp.refine, True) for i, fid in enumerate(ids) for t in range(exp.trials)]
    results = _run_jobs(jobs, args.jobs)
    os.makedirs(os.path.join(args.out, "traces"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "overlays"), exist_ok=True)
    for r in results:
        tag = f"{r.frame_id}_{r.trial}"
        with open(os.path.join(args.out, "traces", f"{tag}.jsonl"), "w") as fh:
            fh.write(r.trace_jsonl)
        try:
            obs = files.load_frame(frames_dir, r.frame_id).rgb
        except OSError:
            continue
        render = r.final_render if r.final_render is not None else np.zeros_like(obs)
        files.save_rgb(os.path.join(args.out, "overlays", f"{tag}.png"), _overlay(obs, render, r.status != "ok"))
    summary = _summarise(results, dia, exp)
    doc = {"experiment": exp.to_dict(), "diameter": dia, "frames": [r.to_dict() for r in results], **summary}
    files.write_json(os.path.join(args.out, "results.json"), doc)
    write_manifest(args.out, "refine", exp.to_dict(), exp.seed)
    rep = summary["report"]
    print(f"refine: {len(results) - summary['n_failed']}/{len(results)} ok"
          + (f", R<5deg {rep['rot_rate']:.3f}, ADD {rep['add_rate']:.3f}" if rep else ""))
    passed = summary["n_failed"] == 0 and all(a["pass"] for a in summary["acceptance"].values())
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------


def _errors_from_results(doc, model):
    errs = []
    for fr in doc["frames"]:
        if fr.get("status") != "ok" or fr.get("T_precise") is None:
            continue
        errs.append(pose_error(model.positions, files.pose_from_json(fr["T_gt"]), files.pose_from_json(fr["T_precise"])))
    return errs


def cmd_eval(args) -> int:
    try:
        with open(args.results) as fh:
            doc = json.load(fh)
        model = load_ply(args.model)
    except (OSError, PlyError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from exc
    errs = _errors_from_results(doc, model)
    if not errs:
        print("eval: no successful frames", file=sys.stderr)
        return EXIT_FAIL
    rep = success_report(errs, diameter(model.positions), Thresholds(), args.symmetric)
    os.makedirs(args.out, exist_ok=True)
    rep.to_json(os.path.join(args.out, "report.json"))
    rep.histogram_csv(os.path.join(args.out, "histogram.csv"))
    print(f"eval: n={rep.n} ADD {rep.add_rate:.3f} R<5deg {rep.rot_rate:.3f} R<5deg&t<1cm {rep.rot_trans_rate:.3f}")
    return EXIT_OK


def _markdown_report(doc) -> str:
    lines = ["# Pose refinement report", ""]
    if "rows" in doc:
        lines += ["| configuration | gs_icp | camera | object | gs_light | ADD | R<5° | R<5°&t<1cm |",
                  "|---|---|---|---|---|---|---|---|"]
        for row in doc["rows"]:
            t = row["toggles"]
            mark = lambda k: "x" if t[k] else ""  # noqa: E731
            lines.append(f"| {row['label']} | {mark('gs_icp_enabled')} | {mark('camera_enabled')} | "
                         f"{mark('object_enabled')} | {mark('gs_light_enabled')} | {row['add_rate']:.3f} | "
                         f"{row['rot_rate']:.3f} | {row['rot_trans_rate']:.3f} |")
        return "\n".join(lines) + "\n"
    rep = doc.get("report")
    lines.append(f"frames: {len(doc.get('frames', []))}, failed: {doc.get('n_failed', 0)}")
    if rep:
        lines += ["", "| metric | rate |", "|---|---|", f"| ADD < 0.1 d | {rep['add_rate']:.3f} |",
                  f"| R < 5° | {rep['rot_rate']:.3f} |", f"| R < 5° & t < 1 cm | {rep['rot_trans_rate']:.3f} |"]
        lines += ["", "| rotation error (deg) | count |", "|---|---|"]
        for lo, c in zip(rep["hist_edges"][:-1], rep["hist_counts"]):
            lines.append(f"| [{lo:g}, {lo + 1:g}) | {c} |")
    for key, a in doc.get("acceptance", {}).items():
        lines.append(f"- accept {key} >= {a['min']}: {'PASS' if a['pass'] else 'FAIL'} ({a['value']})")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        with open(args.results) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from exc
    text = _markdown_report(doc)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


RATE_KEYS = ("add_rate", "rot_rate", "rot_trans_rate")


def ablation_monotone(rows) -> bool:
    """True when the last (full) row is at least as good as every other row on every rate."""
    full = rows[-1]
    return all(full[k] >= r[k] for r in rows[:-1] for k in RATE_KEYS)


def cmd_ablate(args) -> int:
    exp = _load_exp(args)
    model, K, poses, frames_dir, _ = _load_dataset(args.data, args.model)
    model_path = args.model or _data_paths(args.data)[0]
    dia = diameter(model.positions)
    ids = sorted(poses)
    rows, n_failed = [], 0
    for label, cfg, toggles in ablation_configs(exp.refine):
        jobs = [(args.data, model_path, fid, i, t, exp, cfg, False) for i, fid in enumerate(ids) for t in range(exp.trials)]
        results = _run_jobs(jobs, args.jobs)
        n_failed += sum(r.status != "ok" for r in results)
        errs = [r.error if r.error is not None else PoseError(180.0, np.inf, np.inf, np.inf) for r in results]
        rep = success_report(errs, dia, Thresholds(), exp.symmetric)
        rows.append({"label": label, "toggles": toggles, "n": rep.n, "add_rate": rep.add_rate,
                     "rot_rate": rep.rot_rate, "rot_trans_rate": rep.rot_trans_rate,
                     "mean_photometric": float(np.nanmean([r.photometric for r in results]))})
        print(f"{label:24s} ADD {rep.add_rate:.3f}  R<5 {rep.rot_rate:.3f}  R<5&t<1cm {rep.rot_trans_rate:.3f}")
    doc = {"experiment": exp.to_dict(), "rows": rows}
    files.write_json(os.path.join(args.out, "ablation.json"), doc)
    with open(os.path.join(args.out, "ablation.md"), "w") as fh:
        fh.write(_markdown_report(doc))
    write_manifest(args.out, "ablate", exp.to_dict(), exp.seed)
    monotone = ablation_monotone(rows)
    if not monotone:
        print("ablate: full pipeline is not the best row", file=sys.stderr)
    return EXIT_OK if n_failed == 0 and monotone else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatpose", description="Gaussian-splat 6D pose estimation and refinement.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesise a model and ground-truth views")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shape", choices=SHAPES, default="cube")
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--size", type=float, default=0.1)
    s.add_argument("--textureless", action="store_true")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--fov", type=float, default=40.0)
    s.add_argument("--distance", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("render", help="render views of a model")
    r.add_argument("--model", required=True)
    r.add_argument("--poses", required=True)
    r.add_argument("--frame")
    r.add_argument("--mode", choices=("color", "depth", "nocs", "all"), default="all")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("coarse", help="coarse poses from NOCS images")
    c.add_argument("--data", required=True)
    c.add_argument("--model")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--nocs-noise", type=float, default=0.0)
    c.add_argument("--threshold", type=float, default=0.05)
    c.set_defaults(func=cmd_coarse)

    for name, func, helptext in (("refine", cmd_refine, "coarse pose + refinement per view"),
                                 ("ablate", cmd_ablate, "refinement with each stage combination")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--data", required=True)
        q.add_argument("--model")
        q.add_argument("--config")
        q.add_argument("--out", required=True)
        q.add_argument("--seed", type=int)
        q.add_argument("--jobs", type=int, default=default_jobs())
        q.set_defaults(func=func)

    e = sub.add_parser("eval", help="recompute metrics from a results file")
    e.add_argument("--results", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--symmetric", action="store_true")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="markdown summary of a results or ablation file")
    rp.add_argument("--results", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"splatpose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
