"""Command-line entry point: ``rcn <subcommand> [options]``.

Configuration files are INI-style ``key = value`` files with the sections
``[scene]``, ``[data]``, ``[model]``, ``[phase1]``, ``[phase2]``, ``[eval]`` and
``[ablate]``. Every key has a built-in default; an empty file (or no file)
gives the smoke configuration.
"""

import argparse
import configparser
import dataclasses
import json
import os
import subprocess
import sys
from datetime import datetime, timezone

EXIT_OK, EXIT_ERROR, EXIT_TRAINING = 0, 1, 3

# smoke defaults layered over the library dataclasses
SMOKE = {
    "data": {"clips": 50},
    "phase1": {"iterations": 200, "decay_interval": 1000},
    "phase2": {"iterations": 200, "decay_interval": 1000},
    "model": {"hidden_ch": 16},
    "eval": {"l": 5, "iou": 0.5, "q": 1.0, "r": 4.0, "split": "test"},
    "ablate": {"variants": "full,no-track,no-lstm,single-frame,gru,k1,k3,k5"},
}


# ---------------------------------------------------------------------------
# configuration


def _coerce(text: str, default):
    if isinstance(default, bool):
        v = text.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(p) for p in text.split(","))
    return text.strip()


class RunConfig:
    """Parsed config file with typed accessors for each section."""

    def __init__(self, path=None):
        self.parser = configparser.ConfigParser()
        self.path = path
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(f"config file not found: {path}")
            self.parser.read(path)
        known = {"scene", "data", "model", "phase1", "phase2", "eval", "ablate"}
        for s in self.parser.sections():
            if s not in known:
                raise ValueError(f"unknown config section [{s}]")

    def section(self, name):
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def _fill(self, cls, section, extra=None):
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        values = dict(SMOKE.get(section, {}))
        values.update(extra or {})
        values = {k: v for k, v in values.items() if k in defaults}
        for k, v in self.section(section).items():
            if k not in defaults:
                raise ValueError(f"unknown key {k!r} in [{section}]")
            values[k] = _coerce(v, defaults[k])
        return values

    def scene(self, seed):
        from .synthetic import SceneConfig

        vals = self._fill(SceneConfig, "scene")
        vals.setdefault("seed", seed)
        return SceneConfig(**vals)

    def model(self, seed):
        from .model import LayerSpec, RCNConfig

        raw = self.section("model")
        backbone = raw.pop("backbone", None)
        sub = configparser.ConfigParser()
        sub.read_dict({"model": raw})
        saved, self.parser = self.parser, sub
        try:
            vals = self._fill(RCNConfig, "model", {"seed": seed})
        finally:
            self.parser = saved
        vals.pop("backbone", None)
        cfg = RCNConfig(**vals)
        if backbone:
            cfg = dataclasses.replace(cfg, backbone=tuple(LayerSpec(int(c)) for c in backbone.split(",")))
        return cfg.validate()

    def train(self, phase, seed):
        from .training import TrainConfig

        vals = self._fill(TrainConfig, f"phase{phase}", {"phase": phase})
        vals.setdefault("seed", seed)
        vals["phase"] = phase
        return TrainConfig(**vals).validate()

    def get(self, section, key):
        default = SMOKE[section][key]
        raw = self.section(section).get(key)
        return default if raw is None else _coerce(raw, default)

    def echo(self):
        return {s: dict(self.parser[s]) for s in self.parser.sections()}


# ---------------------------------------------------------------------------
# run manifest


def version_string():
    from . import __version__

    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    finished: str = ""
    outputs: list = dataclasses.field(default_factory=list)
    args: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir):
        from .metrics import write_json

        self.finished = _now()
        path = os.path.join(out_dir, f"{self.command}.manifest.json")
        write_json(path, dataclasses.asdict(self))
        return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_jsonl(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _load_dataset(path, split=None):
    from .synthetic import read_dataset

    clips, anns, meta = read_dataset(path, split)
    return clips, anns, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, out):
    from .synthetic import generate_clips, split_ids, write_dataset

    scene = cfg.scene(args.seed)
    n = args.clips if args.clips is not None else cfg.get("data", "clips")
    if n < 0:
        raise ValueError("--clips must be nonnegative")
    pairs = generate_clips(scene, n, seed=args.seed)
    clips = [c for c, _ in pairs]
    anns = [a for _, a in pairs]
    d = os.path.join(out, "dataset")
    ids = [c.clip_id for c in clips]
    write_dataset(clips, anns, d, scene, split_ids(ids))
    n_pos = sum(len(a.track_ids("positive")) for a in anns)
    n_neg = sum(len(a.track_ids("negative")) for a in anns)
    print(f"wrote {n} clips ({n_pos} positive, {n_neg} negative objects) to {d}")
    return [d]


def _resolve_data(args, out):
    d = args.data or os.path.join(out, "dataset")
    if not os.path.exists(os.path.join(d, "dataset.json")):
        raise FileNotFoundError(f"no dataset at {d}; run gen-data first or pass --data")
    return d


def _pairs(clips, anns):
    return list(zip(clips, anns))


def cmd_train(args, cfg: RunConfig, out):
    from .experiment import model_from_backbone, variant_config, variant_mode
    from .model import init_model, load_checkpoint, save_checkpoint
    from .training import train_phase1, train_phase2

    d = _resolve_data(args, out)
    train = _pairs(*_load_dataset(d, "train")[:2])
    val = _pairs(*_load_dataset(d, "val")[:2])
    outputs = []
    phases = [1, 2] if args.phase == "all" else [int(args.phase)]
    mode = variant_mode(args.variant)
    model = None
    if 1 in phases:
        p1 = cfg.train(1, args.seed)
        if args.resume and phases == [1]:
            model = load_checkpoint(args.resume)
        else:
            model = init_model(variant_config(cfg.model(args.seed), "full"), args.seed)
        res, _ = train_phase1(model, p1, train, out_dir=out, val_dataset=val or None,
                              resume=args.resume if phases == [1] else None)
        print(f"phase 1: {len(res.losses)} iterations, held-out loss {res.val_loss_start:.4f} -> "
              f"{res.val_loss_end:.4f}")
        outputs.append(res.checkpoint)
    if 2 in phases:
        p2 = dataclasses.replace(cfg.train(2, args.seed), mode=mode)
        if args.resume and phases == [2]:
            model = load_checkpoint(args.resume)
        elif model is None:
            if not args.init:
                raise ValueError("phase 2 needs --init PHASE1_CHECKPOINT (or --phase all)")
            model = load_checkpoint(args.init)
        if args.variant in ("gru", "k1", "k5") and not (args.resume and phases == [2]):
            model = model_from_backbone(model, variant_config(model.config, args.variant), args.seed)
        res = train_phase2(model, p2, train, out_dir=out, resume=args.resume if phases == [2] else None)
        print(f"phase 2 ({args.variant}): {len(res.losses)} iterations, final loss "
              f"{res.losses[-1] if res.losses else float('nan'):.4f}")
        outputs.append(res.checkpoint)
    final = os.path.join(out, "model.ckpt")
    save_checkpoint(model, final, meta={"variant": args.variant})
    outputs.append(final)
    return outputs


def _load_model(args):
    from .model import load_checkpoint

    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def _variant_for_checkpoint(model, variant):
    from .experiment import variant_mode

    if variant == "gru" and model.config.cell != "convgru":
        raise ValueError("variant 'gru' needs a checkpoint trained with the ConvGRU cell")
    return variant_mode(variant)


def cmd_eval_det(args, cfg: RunConfig, out):
    from .evaluation import evaluate_detection, frame_results
    from .metrics import fppi_mr_curve, write_curve_csv, write_json, write_svg

    d = _resolve_data(args, out)
    split = args.split or cfg.get("eval", "split")
    clips, anns, _ = _load_dataset(d, split)
    model = _load_model(args)
    mode = _variant_for_checkpoint(model, args.variant)
    l = args.l if args.l is not None else cfg.get("eval", "l")
    dets, summary = evaluate_detection(model, clips, anns, mode=mode, l=l)
    curve = fppi_mr_curve(frame_results(dets, clips, anns), cfg.get("eval", "iou")) if clips else []
    paths = {k: os.path.join(out, v) for k, v in
             {"json": "det_metrics.json", "csv": "det_curve.csv", "svg": "det_curve.svg",
              "dets": "detections.jsonl"}.items()}
    write_json(paths["json"], {"variant": args.variant, "mode": mode, "l": l, "split": split,
                               "n_clips": len(clips), "n_detections": len(dets),
                               "MR": summary.get("all"), "strata": summary})
    write_curve_csv(paths["csv"], curve, "fppi", "miss_rate")
    write_svg(paths["svg"], {args.variant: curve}, log_x=True, x_range=(1e-2, 1.0),
              title="miss rate vs FPPI", x_label="FPPI", y_label="miss rate")
    _write_jsonl(paths["dets"], [x.to_json() for x in dets])
    mr = summary.get("all")
    print(f"{args.variant}: MR {mr:.4f} over {len(clips)} clips" if mr is not None else "no ground truth")
    return list(paths.values())


def cmd_eval_trk(args, cfg: RunConfig, out):
    from .evaluation import PixelCorrTracker, evaluate_tracking, model_tracker
    from .kalman import NoiseConfig
    from .metrics import center_rmse, write_curve_csv, write_json, write_svg
    from .tracking import BoundingBox

    d = _resolve_data(args, out)
    split = args.split or cfg.get("eval", "split")
    clips, anns, _ = _load_dataset(d, split)
    if args.baseline == "pixel-corr":
        tracker = PixelCorrTracker().track
        name = "pixel-corr"
    else:
        model = _load_model(args)
        mode = _variant_for_checkpoint(model, args.variant)
        tracker = model_tracker(model, mode)
        name = args.variant
    noise = NoiseConfig(q=cfg.get("eval", "q"), r=cfg.get("eval", "r"))
    rep = evaluate_tracking(tracker, clips, anns, kalman=args.kalman, noise=noise)
    if args.kalman:
        name += "+kalman"
    rmse = []
    for rec in rep.trajectories:
        ci = next(i for i, c in enumerate(clips) if c.clip_id == rec["clip_id"])
        gt = anns[ci].track(rec["track_id"])
        rmse.append(center_rmse([BoundingBox.from_list(b) for b in rec["boxes"]], gt))
    paths = {k: os.path.join(out, v) for k, v in
             {"json": "trk_metrics.json", "csv": "ope_curve.csv", "svg": "ope_curve.svg",
              "traj": "trajectories.json"}.items()}
    write_json(paths["json"], {"tracker": name, "kalman": args.kalman, "split": split, "AUC": rep.auc,
                               "n_tracks": len(rep.per_track_auc),
                               "mean_center_rmse": float(sum(rmse) / len(rmse)) if rmse else None})
    write_curve_csv(paths["csv"], rep.curve, "overlap_threshold", "success_rate")
    write_svg(paths["svg"], {name: rep.curve}, title="success plot", x_label="overlap threshold",
              y_label="success rate", x_range=(0.0, 1.0))
    write_json(paths["traj"], {"tracks": rep.trajectories})
    print(f"{name}: OPE AUC {rep.auc:.4f} over {len(rep.per_track_auc)} tracks")
    return list(paths.values())


def cmd_ablate(args, cfg: RunConfig, out):
    from .evaluation import evaluate_detection
    from .experiment import ABLATION_LADDER, run_ladder
    from .metrics import write_json

    d = _resolve_data(args, out)
    train = _pairs(*_load_dataset(d, "train")[:2])
    val = _pairs(*_load_dataset(d, "val")[:2])
    test_clips, test_anns, _ = _load_dataset(d, cfg.get("eval", "split"))
    names = [v.strip() for v in (args.variants or cfg.get("ablate", "variants")).split(",") if v.strip()]
    for n in names:
        if n not in ABLATION_LADDER:
            raise ValueError(f"unknown variant {n!r}")
    l = cfg.get("eval", "l")
    rows = []

    def report(res):
        _, summary = evaluate_detection(res.model, test_clips, test_anns, mode=res.mode, l=l)
        rows.append({"variant": res.name, "mode": res.mode, "cell": res.model.config.cell,
                     "k": res.model.config.k, "MR": summary.get("all"), "strata": summary,
                     "train_seconds": round(res.seconds, 1),
                     "final_loss": float(sum(res.losses[-50:]) / max(len(res.losses[-50:]), 1))})
        print(f"{res.name:>12s}  MR {summary.get('all'):.4f}")

    run_ladder(cfg.model(args.seed), cfg.train(1, args.seed), cfg.train(2, args.seed), train, names,
               val=val or None, out_dir=out, seed=args.seed, on_variant=report)
    table = os.path.join(out, "ablation.md")
    with open(table + ".tmp", "w") as fh:
        fh.write("| variant | cell | k | MR |\n|---|---|---|---|\n")
        for r in rows:
            fh.write(f"| {r['variant']} | {r['cell']} | {r['k']} | {r['MR']:.4f} |\n")
    os.replace(table + ".tmp", table)
    js = os.path.join(out, "ablation.json")
    write_json(js, {"rows": [{k: v for k, v in r.items() if k != "train_seconds"} for r in rows]})
    return [table, js]


PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
           (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (0, 128, 128)]


def track_colour(track_id: int):
    return PALETTE[int(track_id) % len(PALETTE)]


def render_frames(frames, tracks, out_dir):
    """Draw 1-px box outlines per track onto copies of ``frames``; returns written paths."""
    import numpy as np
    from PIL import Image, ImageDraw

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        img = Image.fromarray(arr, mode="RGB")
        draw = ImageDraw.Draw(img)
        w, h = img.size
        for tid, boxes in tracks:
            if t >= len(boxes):
                continue
            x, y, bw, bh = boxes[t]
            x0, y0 = max(int(round(x)), 0), max(int(round(y)), 0)
            x1, y1 = min(int(round(x + bw)) - 1, w - 1), min(int(round(y + bh)) - 1, h - 1)
            if x1 < x0 or y1 < y0:
                continue
            draw.rectangle([x0, y0, x1, y1], outline=track_colour(tid), width=1)
        p = os.path.join(out_dir, f"frame_{t:04d}.png")
        img.save(p, format="PNG")
        paths.append(p)
    return paths


def _read_tracks(path, clip_id):
    if path.endswith(".jsonl"):
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        rows = [r for r in rows if r["clip_id"] == clip_id]
        return [(i, r["trajectory"]) for i, r in enumerate(rows)]
    with open(path) as fh:
        data = json.load(fh)
    return [(r["track_id"], r["boxes"]) for r in data["tracks"] if r["clip_id"] == clip_id]


def cmd_render(args, cfg: RunConfig, out):
    d = _resolve_data(args, out)
    clips, anns, _ = _load_dataset(d)
    idx = {c.clip_id: i for i, c in enumerate(clips)}
    if args.clip not in idx:
        raise ValueError(f"clip {args.clip!r} not in dataset")
    clip = clips[idx[args.clip]]
    if args.trajectories:
        tracks = _read_tracks(args.trajectories, args.clip)
    else:
        ann = anns[idx[args.clip]]
        tracks = [(tid, [b.to_list() for b in ann.track(tid)]) for tid in ann.track_ids()]
    paths = render_frames(clip.frames, tracks, os.path.join(out, "render", args.clip))
    print(f"rendered {len(paths)} frames with {len(tracks)} tracks")
    return [os.path.dirname(paths[0])] if paths else []


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-det": cmd_eval_det,
    "eval-trk": cmd_eval_trk,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="rcn", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI config file (sections scene/data/model/phase1/phase2/eval/ablate)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--clips", type=int)

    variants = ["full", "no-track", "no-lstm", "single-frame", "gru", "k1", "k3", "k5"]
    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--data")
    t.add_argument("--phase", choices=["1", "2", "all"], default="all")
    t.add_argument("--variant", choices=variants, default="full")
    t.add_argument("--init", help="phase-1 checkpoint for --phase 2")
    t.add_argument("--resume", help="checkpoint to resume the given phase from")

    helps = {"eval-det": "score proposals and report miss rate vs FPPI",
             "eval-trk": "one-pass tracking evaluation from ground-truth first boxes"}
    for name in ("eval-det", "eval-trk"):
        e = sub.add_parser(name, help=helps[name])
        e.add_argument("--data")
        e.add_argument("--checkpoint")
        e.add_argument("--variant", choices=variants, default="full")
        e.add_argument("--split", choices=["train", "val", "test"])
        if name == "eval-det":
            e.add_argument("--l", type=int, help="snippet length at inference")
        else:
            e.add_argument("--kalman", action="store_true")
            e.add_argument("--baseline", choices=["none", "pixel-corr"], default="none")

    a = sub.add_parser("ablate", help="train and evaluate the variant ladder")
    a.add_argument("--data")
    a.add_argument("--variants", help="comma-separated subset of the ladder")

    r = sub.add_parser("render", help="draw boxes onto clip frames")
    r.add_argument("--data")
    r.add_argument("--clip", required=True)
    r.add_argument("--trajectories", help="trajectories.json or detections.jsonl; default ground truth")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    from .errors import FormatError, RCNError, TrainingError

    try:
        cfg = RunConfig(args.config)
        os.makedirs(args.out, exist_ok=True)
        manifest = RunManifest(args.command, cfg.echo(), args.seed, version_string(), _now(),
                               args={k: v for k, v in vars(args).items() if k != "command"})
        outputs = COMMANDS[args.command](args, cfg, args.out)
        manifest.outputs = [p for p in outputs if p]
        manifest.write(args.out)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_TRAINING
    except (RCNError, FormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
