"""Command-line entry point: ``vesselreg <command> [options]``.

Commands
--------
synth     generate a synthetic dataset (cases split S/P/A as 71/49/14)
train     train a descriptor network on a dataset's fixed images
detect    heatmap -> keypoint CSV
describe  image + checkpoint -> CKDB descriptor block
match     two blocks + keypoint CSVs -> match CSV
register  one image pair, or every case of a dataset, -> homographies
eval      predicted homographies vs a manifest -> curves and summary
vtkrs     match lists vs a manifest -> VTKRS curve and summary

Each command prints its effective configuration (``# key = value``
lines) before running. Exit status is 0 on success, 1 on usage or data
errors and 2 when a registration finds no consensus.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import PipelineConfig, substream
from .dataset import case_dir, load_dataset, load_registration_cases, save_case
from .descnet import ConvDescriptorNet, forward_dense, train
from .descriptors import DescriptorSet, SimilarityCounter, mutual_match_classwise, sample_descriptors
from .errors import NoConsensus, RegistrationError
from .evalkit import CaseMatches, category_curves, category_report, error_or_inf, vtkrs
from .pipeline import STAGES, detect, register_pair
from .synth import CATEGORIES, category_counts, generate_case

log = logging.getLogger("vesselreg")


class CliError(Exception):
    pass


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def _echo(cfg: PipelineConfig, out_dir=None) -> None:
    text = cfg.dump()
    sys.stdout.write("".join(f"# {line}\n" for line in text.splitlines()))
    if out_dir is not None:
        formats.atomic_write(Path(out_dir) / "config.txt", text)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    spec = cfg.tree_spec()
    counts = category_counts(args.cases)
    base = substream(cfg["seed"], "synthesis")
    rows, i = [], 0
    for cat in CATEGORIES:
        for _ in range(counts[cat]):
            seed = int(np.random.SeedSequence([base, i]).generate_state(1)[0])
            case = generate_case(spec, cat, seed, case_id=f"case{i:04d}")
            rows.append(save_case(out, case))
            i += 1
    formats.write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} cases to {out} " + " ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args, cfg):
    data = Path(args.data)
    if not (data / "manifest.csv").is_file():
        raise CliError(f"no dataset at {data}")
    if args.loss:
        cfg.set("train.loss", args.loss)
    if args.views is not None:
        cfg.set("train.views", str(args.views))
    if args.epochs is not None:
        cfg.set("train.epochs", str(args.epochs))
    if args.lr is not None:
        cfg.set("train.learning_rate", str(args.lr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    cases = load_dataset(data)
    if not cases:
        raise CliError("dataset has no cases")
    tcfg = cfg.train()
    channels, dilations = cfg["net.channels"], cfg["net.dilations"]
    net = ConvDescriptorNet.create(3, channels, dilations, seed=substream(cfg["seed"], "init"))
    report = train(net, [c.image_fixed for c in cases], [c.keypoints_fixed for c in cases], tcfg,
                   cfg.augmentation(), max_redraws=cfg["train.max_redraws"],
                   callback=lambda e, v: log.info("epoch %d loss %.6f", e, v))
    formats.save_checkpoint(out / "model.ckdn", net)
    formats.write_csv(out / "train_report.csv", ("epoch", "loss"),
                      [(e, repr(v)) for e, v in enumerate(report.losses)])
    print(f"trained {tcfg.loss} 1+{tcfg.n_views} for {tcfg.epochs} epochs; "
          f"loss {report.losses[0]:.6f} -> {report.losses[-1]:.6f}; skipped {report.skipped}")


def cmd_detect(args, cfg):
    _echo(cfg)
    hm = formats.read_heatmap(_require_file(args.heatmap, "heatmap"))
    shape = hm.shape
    if args.image_size:
        w, h = args.image_size
        shape = (h, w, 3)
    kps = detect(hm, shape, cfg.peak())
    formats.write_keypoints(args.out, kps)
    print(f"{len(kps)} keypoints -> {args.out}")


def cmd_describe(args, cfg):
    _echo(cfg)
    net = formats.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    img = formats.read_image(_require_file(args.image, "image"))
    block = forward_dense(net, img)
    formats.write_block(args.out, block)
    print(f"{block.shape[1]}x{block.shape[0]}x{block.shape[2]} block -> {args.out}")


def cmd_match(args, cfg):
    _echo(cfg)
    bf = formats.read_block(_require_file(args.fixed_block, "block")).astype(np.float64)
    bm = formats.read_block(_require_file(args.moving_block, "block")).astype(np.float64)
    kf = formats.read_keypoints(_require_file(args.fixed_keypoints, "keypoints"))
    km = formats.read_keypoints(_require_file(args.moving_keypoints, "keypoints"))
    df: DescriptorSet = sample_descriptors(bf, kf)
    dm: DescriptorSet = sample_descriptors(bm, km)
    counter = SimilarityCounter()
    m = mutual_match_classwise(df, dm, counter)
    formats.write_matches(args.out, kf.xy[m.idx_fixed], km.xy[m.idx_moving], m.similarity, m.classes)
    print(f"{len(m)} mutual matches from {counter.evaluations} comparisons -> {args.out}")


def _heatmap_in(directory: Path, stem: str) -> Path:
    for ext in (".png", ".ckdb"):
        p = directory / f"{stem}{ext}"
        if p.is_file():
            return p
    raise CliError(f"no heatmap for {stem!r} in {directory}")


def _keypoint_source(image: Path, args, side: str):
    explicit = getattr(args, f"{side}_keypoints")
    if explicit:
        return formats.read_keypoints(_require_file(explicit, "keypoints"))
    if args.oracle_keypoints:
        return formats.read_keypoints(_require_file(image.parent / f"keypoints_{image.stem}.csv", "oracle keypoints"))
    if args.heatmaps:
        return formats.read_heatmap(_heatmap_in(Path(args.heatmaps), image.stem))
    raise CliError("need --heatmaps, --oracle-keypoints or explicit keypoint CSVs")


def _write_registration(out: Path, prefix: str, res) -> None:
    cm = res.case_matches()
    formats.write_matches(out / f"{prefix}matches.csv", cm.fixed_xy, cm.moving_xy, cm.similarity, cm.classes)
    formats.write_csv(out / f"{prefix}timing.csv", ("stage", "seconds"),
                      [(s, repr(res.timings.get(s, 0.0))) for s in STAGES])


def cmd_register(args, cfg):
    net = formats.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    peak, ransac = cfg.peak(), cfg.ransac()
    if args.data:
        failed = 0
        for case in load_dataset(args.data):
            d = case_dir(args.data, case.id)
            src = {}
            for side, img in (("fixed", d / "fixed.png"), ("moving", d / "moving.png")):
                if args.heatmaps:
                    src[side] = formats.read_heatmap(_heatmap_in(Path(args.heatmaps) / case.id, img.stem))
                else:
                    src[side] = formats.read_keypoints(d / f"keypoints_{side}.csv")
            res = register_pair(net, case.image_fixed, case.image_moving, src["fixed"], src["moving"],
                                ransac, peak, raise_on_failure=False)
            _write_registration(out, f"{case.id}.", res)
            if res.homography is None:
                failed += 1
                log.warning("[%s] no consensus; no homography written", case.id)
            else:
                formats.write_homography(out / f"{case.id}.txt", res.homography)
        print(f"registered dataset {args.data}; {failed} failures")
        return 0
    if not (args.fixed and args.moving):
        raise CliError("register needs --fixed and --moving, or --data")
    fixed_p, moving_p = _require_file(args.fixed, "image"), _require_file(args.moving, "image")
    img_f, img_m = formats.read_image(fixed_p), formats.read_image(moving_p)
    try:
        res = register_pair(net, img_f, img_m, _keypoint_source(fixed_p, args, "fixed"),
                            _keypoint_source(moving_p, args, "moving"), ransac, peak)
    except NoConsensus as e:
        if hasattr(e, "result"):
            _write_registration(out, "", e.result)
        print(f"error: no consensus: {e}", file=sys.stderr)
        return 2
    formats.write_homography(out / "homography.txt", res.homography)
    _write_registration(out, "", res)
    print(f"{len(res.matches)} matches, {int(res.inliers.sum())} inliers -> {out / 'homography.txt'}")
    return 0


def _load_case_matches(directory: Path, case_id: str) -> CaseMatches:
    p = directory / f"{case_id}.matches.csv"
    if not p.is_file():
        log.warning("[%s] no match list; counted as failed", case_id)
        return CaseMatches(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    return CaseMatches(*formats.read_matches(p))


def _vtkrs_outputs(out: Path, cases, matches, cfg) -> float:
    res = vtkrs(cases, matches, cfg.ransac())
    cats = np.array([c.category for c in cases])
    formats.write_csv(out / "vtkrs_curve.csv", ("n", "points", "auc"),
                      [(n, 2 * n, repr(a)) for n, a in zip(res.n_values, res.aucs)])
    row = [repr(res.auc)]
    for c in ("A", "P", "S"):
        row.append(repr(res.category_aucs(cats, c)[1]) if np.any(cats == c) else "nan")
    formats.write_csv(out / "vtkrs_summary.csv", ("overall", "A", "P", "S"), [row])
    return res.auc


def cmd_eval(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    cases = load_registration_cases(_require_file(args.manifest, "manifest"))
    if not cases:
        raise CliError("manifest lists no cases")
    pred = Path(args.predictions)
    errors = []
    for case in cases:
        p = pred / f"{case.id}.txt"
        if p.is_file():
            errors.append(error_or_inf(case, formats.read_homography(p)))
        else:
            log.warning("[%s] missing prediction; counted as failed", case.id)
            errors.append(float("inf"))
    cats = [c.category for c in cases]
    for name, curve in category_curves(errors, cats).items():
        formats.write_curve(out / f"curve_{name}.csv", curve)
    report = category_report(errors, cats)
    formats.write_summary(out / "summary.csv", report)
    print("overall {overall:.4f} A {A:.4f} P {P:.4f} S {S:.4f} avg {avg:.4f} w.avg {weighted_avg:.4f}".format(**report.row()))
    if cfg["eval.vtkrs"]:
        score = _vtkrs_outputs(out, cases, [_load_case_matches(pred, c.id) for c in cases], cfg)
        print(f"VTKRS {score:.4f}")


def cmd_vtkrs(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    cases = load_registration_cases(_require_file(args.manifest, "manifest"))
    if not cases:
        raise CliError("manifest lists no cases")
    matches = [_load_case_matches(Path(args.matches), c.id) for c in cases]
    print(f"VTKRS {_vtkrs_outputs(out, cases, matches, cfg):.4f}")


# ---------------------------------------------------------------------------
# argument parsing


def _size(s: str):
    w, h = (int(t) for t in s.split(","))
    return w, h


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vesselreg", description="Keypoint-based retinal image registration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, required=True, help="total number of cases")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a descriptor network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="directory for model.ckdn and train_report.csv")
    s.add_argument("--loss", choices=("mp_infonce", "supcon", "triplet"))
    s.add_argument("--views", type=int, help="augmented views N")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="heatmap to keypoint CSV")
    s.add_argument("--heatmap", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=_size, metavar="W,H", help="upscale keypoints to this resolution")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("describe", parents=[common], help="image to CKDB descriptor block")
    s.add_argument("--image", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("match", parents=[common], help="mutual class-wise matching")
    s.add_argument("--fixed-block", required=True)
    s.add_argument("--moving-block", required=True)
    s.add_argument("--fixed-keypoints", required=True)
    s.add_argument("--moving-keypoints", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("register", parents=[common], help="register an image pair or a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fixed")
    s.add_argument("--moving")
    s.add_argument("--data", help="register every case of a dataset")
    s.add_argument("--heatmaps", help="directory of heatmaps named after the images")
    s.add_argument("--oracle-keypoints", action="store_true", help="use keypoints_<image>.csv next to each image")
    s.add_argument("--fixed-keypoints")
    s.add_argument("--moving-keypoints")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", parents=[common], help="score predicted homographies")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("vtkrs", parents=[common], help="VTKRS from match lists")
    s.add_argument("--matches", required=True, help="directory of <id>.matches.csv files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_vtkrs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        rc = args.func(args, cfg)
    except (CliError, RegistrationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
