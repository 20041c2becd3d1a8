"""Command-line driver: ``stedge {synth,bootstrap,train,selftrain,infer,eval}``.

Exit codes: 0 on success, 1 for configuration or validation errors, 2 for
failures while running.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import config as cfgmod
from . import io, synth
from .config import ConfigError
from .evaluation import evaluate, write_curve_csv
from .model import load_checkpoint, predict
from .plotting import plot_pr_curves, plot_round_history
from .selftrain import make_initial_labels, self_train

log = logging.getLogger("stedge")


def _setup_logging():
    level = os.environ.get("STEDGE_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def load_dataset(cfg):
    """Read every image of the dataset at the backbone input size.

    Unreadable files are skipped with a warning. Returns ``(ids, images)``.
    """
    paths = io.list_images(cfg.dataset_dir, cfg.manifest)
    size = (cfg.backbone.input_size, cfg.backbone.input_size)
    ids, images = [], []
    for p in paths:
        try:
            images.append(io.read_image(p, size))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        ids.append(Path(p).stem)
    if not images:
        raise ConfigError(f"dataset_dir: no readable images in {cfg.dataset_dir}")
    return ids, images


def resolve_config(args, need=("dataset_dir", "output_dir")):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    cfg = cfgmod.with_overrides(
        cfg,
        dataset_dir=getattr(args, "dataset", None),
        output_dir=getattr(args, "out", None),
        manifest=getattr(args, "manifest", None),
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        termination_pct=getattr(args, "termination_pct", None),
        max_rounds=getattr(args, "rounds", None),
        epochs_phase1=getattr(args, "phase1_epochs", None),
    )
    if getattr(args, "epochs", None) is not None:
        field = "epochs_per_round" if args.command == "selftrain" else "epochs_phase1"
        cfg = cfgmod.with_overrides(cfg, **{field: args.epochs})
    cfgmod.validate(cfg, need=need)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    return cfg


def cmd_synth(args):
    if args.n < 1:
        raise ConfigError(f"n must be >= 1, got {args.n}")
    if args.size < 16:
        raise ConfigError(f"size must be >= 16, got {args.size}")
    synth.write_corpus(args.out, args.n, args.seed, args.size)
    print(f"wrote {args.n} scenes to {args.out}")


def cmd_bootstrap(args):
    cfg = resolve_config(args)
    ids, images = load_dataset(cfg)
    store = make_initial_labels(images, cfg.train_config(), ids)
    out = Path(cfg.output_dir)
    (out / "labels").mkdir(exist_ok=True)
    (out / "canny_low").mkdir(exist_ok=True)
    for name, y, c in zip(store.ids, store.labels, store.canny_low):
        io.write_binary(out / "labels" / f"{name}.png", y)
        io.write_binary(out / "canny_low" / f"{name}.png", c)
    (out / "manifest.txt").write_text("".join(f"{n}.png\n" for n in store.ids))
    print(f"{len(ids)} images, {store.edge_count()} initial edge pixels, upper bound {store.upper_bound()}")


def _train(args, max_rounds):
    cfg = resolve_config(args)
    if max_rounds is not None:
        cfg = cfgmod.with_overrides(cfg, max_rounds=max_rounds)
    ids, images = load_dataset(cfg)
    params, store, history = self_train(
        images, cfg.backbone, cfg.loss, cfg.train_config(), ids, cfg.output_dir, cfg.l0
    )
    out = Path(cfg.output_dir)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    plot_round_history(history, out / "history.png")
    last = history[-1]
    print(f"finished round {last['round']}: {last['n_edge']} pseudo-label edge pixels")
    return params, store, history


def cmd_train(args):
    _train(args, max_rounds=0)


def cmd_selftrain(args):
    _train(args, max_rounds=None)


def cmd_infer(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise ConfigError(f"images directory not found: {images_dir}")
    params = load_checkpoint(ckpt)
    out = Path(args.out)
    n_side = params.config.num_stages
    dirs = [out / f"side_{k + 1}" for k in range(n_side)] + [out / "fused"]
    for d in dirs:
        d.mkdir(parents=True, exist_ok=True)
    s = params.config.input_size
    count = 0
    for p in io.list_images(images_dir, args.manifest):
        with PILImage.open(p) as im:
            w, h = im.size
        maps = predict(params, io.read_image(p, (s, s)))
        for d, m in zip(dirs, maps):
            if m.shape != (h, w):
                m = np.asarray(PILImage.fromarray(m.astype(np.float32)).resize((w, h), PILImage.BILINEAR))
            io.write_prob(d / f"{Path(p).stem}.png", m)
        count += 1
    print(f"wrote edge maps for {count} images to {out}")


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for name, d in (("pred", pred_dir), ("gt", gt_dir)):
        if not d.is_dir():
            raise ConfigError(f"{name} directory not found: {d}")
    gts, probs = [], []
    for g in io.list_images(gt_dir):
        p = pred_dir / g.name
        if not p.is_file():
            raise ConfigError(f"no prediction for {g.name} in {pred_dir}")
        gts.append(io.read_binary(g))
        probs.append(io.read_prob(p))
        if probs[-1].shape != gts[-1].shape:
            raise ConfigError(f"{p}: shape {probs[-1].shape} differs from ground truth {gts[-1].shape}")
    if not gts:
        raise ConfigError(f"gt directory has no images: {gt_dir}")
    report = evaluate(
        probs, gts, args.thresholds, thin=not args.no_thin, method=args.matching
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(indent=2))
    write_curve_csv(report, out.with_suffix(".csv"))
    plot_pr_curves({args.label or pred_dir.name: report}, out.with_name(out.stem + "_pr.png"))
    print(f"ODS {report.ods:.4f}  OIS {report.ois:.4f}  AP {report.ap:.4f}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="stedge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--dataset", help="directory of training images")
        p.add_argument("--manifest", help="optional file listing the images to use, in order")
        p.add_argument("--out", help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="worker threads (1 = fully serial)")
        p.add_argument("--epochs", type=int, help="phase-one epochs (train) or epochs per round (selftrain)")
        p.add_argument("--phase1-epochs", type=int)
        p.add_argument("--rounds", type=int, help="maximum self-training rounds")
        p.add_argument("--termination-pct", type=float, help="stop when edge growth falls below this %%")

    p = sub.add_parser("synth", help="generate the synthetic polygon/texture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    for name, fn, help_ in (
        ("bootstrap", cmd_bootstrap, "initial Canny pseudo labels and the frozen upper-bound maps"),
        ("train", cmd_train, "phase-one training on the initial labels"),
        ("selftrain", cmd_selftrain, "phase one followed by self-training rounds"),
    ):
        p = sub.add_parser(name, help=help_)
        run_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("infer", help="write fused and side-output edge maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="ODS/OIS/AP of predicted maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="metrics JSON; CSV and PR plot are written beside it")
    p.add_argument("--thresholds", type=int, default=99)
    p.add_argument("--matching", choices=("optimal", "greedy"), default="optimal")
    p.add_argument("--no-thin", action="store_true", help="skip non-maximum suppression")
    p.add_argument("--label", help="legend label for the PR plot")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
