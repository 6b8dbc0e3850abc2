"""Command-line entry point: gen, train, eval, perturb.

Exit codes: 0 success, 2 config or usage error, 3 I/O or parse error,
4 non-finite training loss, 5 checkpoint/data class mismatch.  Any
``--key=value`` flag not listed for a command overrides the config file.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import plots
from .config import RunConfig, build_run_config, load_run_config, parse_config_text, parse_overrides
from .dap import CleanLabel, DepthMode, clean_label_from_object, make_perturbed_label
from .errors import ConfigError, LabelDenoiseError, NonFinite
from .evaluate import evaluate
from .geometry import reparameterize
from .kitti_io import ObjectLabel, read_calib_file, read_label_file, write_label_file
from .rng import make_rng
from .synth import gen_dataset, load_dataset
from .toymodel import dataset_records, load_checkpoint, save_checkpoint, scores_for, train
from .uncertainty import ATTRS, DifficultyScores

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5

# config keys stored in checkpoints so eval and perturb rebuild the same model setup
MODEL_KEYS = (
    "seed",
    "depth_mode",
    "gamma_b",
    "gamma_d",
    "class_flip_prob",
    "groups",
    "distractors",
    "anchor_jitter",
    "match_radius",
    "dap_enabled",
    "uniform_score",
    "beta",
)


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _run_config(args, extra, base: RunConfig | None = None) -> RunConfig:
    try:
        return load_run_config(args.config, parse_overrides(extra), base)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None


def _load(path_fn, *a):
    try:
        return path_fn(*a)
    except (OSError, LabelDenoiseError) as e:
        raise CliError(EXIT_IO, str(e)) from None


def cmd_gen(args, extra) -> int:
    run = _run_config(args, extra)
    out = Path(args.out)
    try:
        ds = gen_dataset(args.scenes, run.scene, root=out, seed=run.seed)
        (out / "config.txt").write_text(run.to_text(), newline="\n")
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from None
    print(f"wrote {len(ds)} scenes ({ds.num_objects} objects) to {out}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    run = _run_config(args, extra)
    ds = _load(load_dataset, args.data)
    classes = ds.classes
    recs = dataset_records(ds, run.dap.depth_mode)
    if not recs:
        raise CliError(EXIT_IO, f"no labelled scenes under {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train(recs, len(classes), run.train)
    except NonFinite as e:
        raise CliError(EXIT_DIVERGED, str(e)) from None
    meta = parse_config_text(run.to_text(MODEL_KEYS))
    meta.update(epoch=run.train.epochs, classes=",".join(classes))
    save_checkpoint(out / "checkpoint.txt", res.params, res.state, meta)
    (out / "train_log.csv").write_text(res.log_csv(), newline="\n")
    if res.reports:
        plots.loss_curves(res.reports, out / "loss_curves.png")
        last = [r for r in res.reports if r.epoch == res.reports[-1].epoch]
        parts = {k: sum(getattr(r, k) for r in last) for k in ("recon_bbox", "recon_depth", "recon_class", "det", "total")}
        print("final epoch " + " ".join(f"{k}={v:.6g}" for k, v in parts.items()))
    print(f"checkpoint written to {out / 'checkpoint.txt'}")
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, LabelDenoiseError) as e:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {e}") from None


def _checkpoint_run(meta: dict) -> RunConfig:
    try:
        return build_run_config({k: v for k, v in meta.items() if k in MODEL_KEYS})
    except ConfigError as e:
        raise CliError(EXIT_IO, f"checkpoint header: {e}") from None


def cmd_eval(args, extra) -> int:
    params, state, meta = _checkpoint(args.checkpoint)
    run = _run_config(args, extra, _checkpoint_run(meta))
    ds = _load(load_dataset, args.data)
    ck_classes = tuple(meta.get("classes", "").split(","))
    if len(ck_classes) != len(ds.classes) or ck_classes != tuple(ds.classes):
        raise CliError(EXIT_MISMATCH, f"checkpoint classes {ck_classes} do not match data classes {ds.classes}")
    recs = dataset_records(ds, run.dap.depth_mode)
    sc = run.scene
    bins = [sc.depth_min, *sc.strata_edges, sc.depth_max]
    report = evaluate(params, recs, ds.scenes, run.train, ds.classes, bins, seed=run.seed)
    out = Path(args.out)
    try:
        report.write(out)
        plots.uncertainty_means(report.uncertainty, out / "uncertainty_by_difficulty.png", "by difficulty level")
        plots.uncertainty_means(report.uncertainty_strata, out / "uncertainty_by_stratum.png", "by noise stratum")
        plots.depth_mae_bars(report.depth, out / "depth_mae.png")
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from None
    overall = report.depth.overall
    print(f"depth MAE {overall:.4f} m" if overall is not None else "depth MAE: no matched objects")
    for (c, lvl), v in report.ap.items():
        print(f"AP_R40 {c:<10} {lvl:<8} {'absent' if v is None else f'{v:.4f}'}")
    return EXIT_OK


PERTURB_COLUMNS = ("x_l", "y_t", "x_r", "y_b", "depth")


def _perturbed_object(l: ObjectLabel, clean: CleanLabel, pert, cal, classes) -> ObjectLabel:
    c = reparameterize(pert.box)
    bbox = (c.x_l * cal.img_w, c.y_t * cal.img_h, c.x_r * cal.img_w, c.y_b * cal.img_h)
    # keep the viewing ray in x and the object on the ground in y
    x, y, _ = l.loc
    return replace(l, category=classes[pert.class_idx], bbox2d=bbox, loc=(x * pert.depth / clean.depth, y, pert.depth))


def cmd_perturb(args, extra) -> int:
    run = _run_config(args, extra)
    labels = _load(read_label_file, args.labels)
    cal = _load(read_calib_file, args.calib)
    cfg = replace(run.dap, seed=args.seed)
    classes = run.scene.classes
    state = params = None
    if args.checkpoint:
        params, state, meta = _checkpoint(args.checkpoint)
        classes = tuple(meta.get("classes", ",".join(classes)).split(","))
        if len(classes) != params.num_classes:
            raise CliError(EXIT_MISMATCH, "checkpoint class list does not match its network")
        score_mode = DepthMode(meta.get("depth_mode", "residual"))
    rng = make_rng(args.seed, 5)
    out_labels, rows = [], []
    for i, l in enumerate(labels):
        if l.is_dontcare or l.category not in classes:
            out_labels.append(l)
            continue
        try:
            clean = clean_label_from_object(l, cal, classes, DepthMode.Absolute)
        except LabelDenoiseError as e:
            raise CliError(EXIT_IO, f"{args.labels}: object {i}: {e}") from None
        if params is not None:
            q = clean_label_from_object(l, cal, classes, score_mode)
            scores = DifficultyScores(dict(zip(ATTRS, scores_for([q], params, state)[0])))
        else:
            scores = DifficultyScores.constant(args.score)
        pert = make_perturbed_label(clean, scores, cfg, rng)
        new = _perturbed_object(l, clean, pert, cal, classes)
        out_labels.append(new)
        before = (*l.bbox2d, l.loc[2])
        after = (*new.bbox2d, new.loc[2])
        vals = (v for a, b in zip(before, after) for v in (a, b, b - a))
        rows.append([i, l.category, new.category, *(repr(float(v)) for v in vals)])
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_label_file(out, out_labels)
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["object", "category", "new_category"]
            head += [f"{c}_{kind}" for c in PERTURB_COLUMNS for kind in ("clean", "perturbed", "delta")]
            w.writerow(head)
            w.writerows(rows)
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from None
    print(f"perturbed {len(rows)} of {len(labels)} labels -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="labeldenoise",
        description="Difficulty-aware label perturbation and denoising on synthetic KITTI-style data.",
        epilog="Unlisted --key=value flags override config keys.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the two-stage training loop")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write AP, depth MAE and uncertainty tables")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("perturb", help="apply label perturbation to a KITTI label file")
    q.add_argument("--labels", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    q.add_argument("--checkpoint")
    q.add_argument("--score", type=float, default=0.5, help="constant difficulty score when no checkpoint is given")
    q.set_defaults(func=cmd_perturb)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "perturb" and not 0.0 <= args.score <= 1.0:
        parser.error("--score must lie in [0, 1]")
    try:
        return args.func(args, extra)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
