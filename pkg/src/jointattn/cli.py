"""Command-line entry point: ``jointattn <subcommand> [flags]``.

Settings resolve as: explicit flags, then the ``--config`` JSON file, then
built-in defaults. Exit status is 0 on success, 1 on a domain or validation
error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .datakit import (DirectoryFrameStore, ManifestError, SamplingError, SynthConfig, filter_invalid_pairs,
                      generate_synthetic, load_blacklist, load_manifest, load_truth, read_png)
from .datakit.frames import preprocess, to_float, write_png
from .losses import SingularityError
from .model import ContractError, load_checkpoint, roa_heatmap
from .trainer import VARIANTS, ConfigError, TrainConfig, TrainingDiverged

log = logging.getLogger("jointattn")

PRECEDENCE = "Precedence: command-line flags > --config file > built-in defaults."


class CliError(Exception):
    """Validation failure reported with exit status 1."""


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"--config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"--config {path}: expected a flat JSON object")
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, *names: str) -> None:
    for n in names:
        if getattr(args, n.replace("-", "_"), None) in (None, ""):
            raise CliError(f"missing required flag --{n}")


def _manifest(args, flag: str = "manifest"):
    path = getattr(args, flag.replace("-", "_"))
    m = load_manifest(path)
    if getattr(args, "blacklist", None):
        m = filter_invalid_pairs(m, load_blacklist(args.blacklist))
    return m


def _checkpoint(args):
    _need(args, "checkpoint")
    if not Path(args.checkpoint).exists():
        raise CliError(f"--checkpoint {args.checkpoint} does not exist")
    return load_checkpoint(args.checkpoint)


def _header_variant(header: dict, override: str | None) -> str:
    if override:
        return override
    return header.get("extra", {}).get("train_config", {}).get("variant", "full")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _train_config(args) -> TrainConfig:
    cfg = _load_config(args.config)
    flags = {
        "seed": args.seed, "variant": args.variant, "lam": args.lam,
        "triplet_variant": args.triplet_variant, "epochs": args.epochs,
        "learning_rate": args.lr, "batch_size": args.batch_size,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise CliError(f"bad training config: {exc}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_gen_synth(args) -> None:
    cfg = _load_config(args.config)
    if args.side is not None:
        cfg["side"] = args.side
    n_pairs = args.pairs if args.pairs is not None else int(cfg.pop("pairs", 250))
    cfg.pop("pairs", None)
    seed = args.seed if args.seed is not None else int(cfg.pop("seed", 42))
    cfg.pop("seed", None)
    n_test = args.test_pairs if args.test_pairs is not None else int(cfg.pop("test_pairs", n_pairs // 5))
    cfg.pop("test_pairs", None)
    if not 0 <= n_test <= n_pairs:
        raise CliError("--test-pairs must lie in [0, --pairs]")
    try:
        scfg = SynthConfig.from_dict(cfg)
    except TypeError as exc:
        raise CliError(f"bad synthetic config: {exc}") from None
    out = _out(args)
    data = generate_synthetic(scfg, seed, n_pairs)
    data.write(out)
    train_m, test_m = data.split(n_pairs - n_test)
    train_m.write(out / "train.jsonl")
    test_m.write(out / "test.jsonl")
    print(f"wrote {n_pairs} pairs ({n_pairs - n_test} train / {n_test} test) to {out}")


def cmd_train(args) -> None:
    _need(args, "manifest")
    cfg = _train_config(args)
    m = _manifest(args)
    store = DirectoryFrameStore(m, cfg.model.backbone.input_side)
    from .plotting import plot_training
    from .trainer import train

    out = _out(args)
    _, report = train(cfg, m, store, out)
    plot_training(report, out / "training.png", cfg.variant)
    _write_json(out / "train_config.json", cfg.to_dict())
    last = report.epochs[-1]["loss"] if report.epochs else float("nan")
    print(f"trained {cfg.variant} for {cfg.epochs} epochs; final loss {last:.4f}; checkpoint {out / 'checkpoint.bin'}")


def _eval_setup(args):
    net, header = _checkpoint(args)
    _need(args, "manifest")
    m = _manifest(args)
    store = DirectoryFrameStore(m, net.cfg.backbone.input_side)
    return net, header, m, store


def cmd_eval_pairs(args) -> None:
    from .evaluation import pairs_discrimination, sample_eval_triplets

    net, header, m, store = _eval_setup(args)
    seed = args.seed if args.seed is not None else 42
    cfg = _load_config(args.config)
    n = args.n_triplets or int(cfg.get("n_triplets", 1000))
    variant = _header_variant(header, args.variant)
    rep = pairs_discrimination(net, store, sample_eval_triplets(m, n, seed), variant)
    rep.extra.update(seed=seed, variant=variant)
    _write_json(_out(args) / "eval_pairs.json", rep.to_json())
    print(f"pairs discrimination accuracy {rep.value:.4f} over {rep.n} triplets")


def cmd_eval_moments(args) -> None:
    from .evaluation import moment_localization

    net, header, m, store = _eval_setup(args)
    variant = _header_variant(header, args.variant)
    rep = moment_localization(net, store, m, variant)
    rep.extra.update(variant=variant)
    _write_json(_out(args) / "eval_moments.json", rep.to_json())
    print(f"mean alignment error {rep.value:.3f} s (median {rep.extra['median']:.3f}) over {rep.n} pairs")


def cmd_ablations(args) -> None:
    from .evaluation import format_table, run_ablations

    _need(args, "manifest", "test-manifest")
    cfg = _train_config(args)
    train_m = _manifest(args)
    test_m = load_manifest(args.test_manifest)
    store = DirectoryFrameStore(train_m, cfg.model.backbone.input_side)
    store.add(test_m)
    truth_root = Path(args.truth) if args.truth else Path(args.test_manifest).parent
    truth = load_truth(truth_root) or None
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variants {bad}")
    out = _out(args)
    rows = run_ablations(train_m, test_m, store, cfg, variants, args.n_triplets or 1000, truth, out)
    print(format_table(rows), end="")


def cmd_summarize(args) -> None:
    from .apps.summarize import annotated_seconds, summarize, summary_metrics
    from .plotting import plot_summary

    net, header, m, store = _eval_setup(args)
    if header.get("extra", {}).get("train_config", {}).get("epochs", 0) == 0:
        raise CliError("checkpoint is untrained (0 epochs); refusing to summarise")
    out = _out(args)
    pairs = [m.get(args.pair)] if args.pair else list(m)
    rows = []
    for pair in pairs:
        s = summarize(net, store, pair, args.threshold)
        ann = annotated_seconds(pair.action_segments, pair.third_view.n_seconds)
        _write_json(out / f"summary_{pair.pair_id}.json", s.to_json())
        plot_summary(s, ann, out / f"summary_{pair.pair_id}.png")
        if ann:
            r, p, f = summary_metrics(s.selected, ann)
            rows.append({"pair_id": pair.pair_id, "recall": r, "precision": p, "f": f})
    if rows:
        mean = {k: float(np.mean([r[k] for r in rows])) for k in ("recall", "precision", "f")}
        _write_json(out / "summary_metrics.json", {"pairs": rows, "mean": mean})
        print(f"recall {mean['recall']:.3f} precision {mean['precision']:.3f} F {mean['f']:.3f} over {len(rows)} pairs")
    print(f"wrote {len(pairs)} summaries to {out}")


def _image(path: str, side: int) -> np.ndarray:
    if not Path(path).exists():
        raise CliError(f"image {path} does not exist")
    return preprocess(read_png(path), side)


def cmd_gaze(args) -> None:
    from .apps.gaze import gaze_from_heatmap, gaze_heatmap
    from .plotting import plot_gaze

    net, _ = _checkpoint(args)
    _need(args, "image", "head")
    img = _image(args.image, net.cfg.backbone.input_side)
    heat = gaze_heatmap(net, img)
    res = gaze_from_heatmap(heat, tuple(args.head))
    out = _out(args)
    _write_json(out / "gaze.json", res.to_json())
    plot_gaze(img, heat, res, out / "gaze.png")
    print(json.dumps(res.to_json()))


def cmd_coseg(args) -> None:
    from .apps.coseg import cosegment
    from .plotting import plot_coseg

    net, _ = _checkpoint(args)
    _need(args, "first", "third")
    side = net.cfg.backbone.input_side
    first, third = _image(args.first, side), _image(args.third, side)
    res = cosegment(net, first, third, alpha=args.alpha)
    out = _out(args)
    plot_coseg(first, third, res.first_mask, res.third_mask, out / "coseg.png")
    for name, mask in (("first_mask.png", res.first_mask), ("third_mask.png", res.third_mask)):
        write_png(out / name, np.repeat(mask[..., None].astype(np.uint8) * 255, 3, axis=2))
    _write_json(out / "coseg.json", res.to_json())
    print(json.dumps(res.to_json()))


def cmd_visualize(args) -> None:
    from .apps.render import render_heatmap
    from .evaluation import encode
    from .plotting import plot_heatmap_grid

    net, header, m, store = _eval_setup(args)
    out = _out(args)
    side = net.cfg.backbone.input_side
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    pairs = list(m)
    pick = rng.choice(len(pairs), size=min(args.n, len(pairs)), replace=False)
    panels = []
    for i in sorted(int(k) for k in pick):
        pair = pairs[i]
        t = pair.third_view.n_seconds // 2
        from .datakit.sampling import corresponding_second

        for view, ts in (("third", t), ("first", corresponding_second(pair, t))):
            img = store.get(pair.pair_id, view, ts)
            enc = encode(net, img[None], view)
            hm = roa_heatmap(torch.from_numpy(enc["feat"][0]), torch.from_numpy(enc["att"][0]), side)
            over = render_heatmap(img, hm.upsampled, out / f"{pair.pair_id}_{view}_{ts}.png")
            panels.append((f"{pair.pair_id} {view} t={ts}", over))
    plot_heatmap_grid(panels, out / "heatmaps.png")
    print(f"wrote {len(panels)} overlays to {out}")


def cmd_grad_check(args) -> None:
    from .datakit.sampling import TripletSampler
    from .trainer import batch_images, gradient_check, init_model

    cfg = _train_config(args)
    if args.checkpoint:
        net, _ = _checkpoint(args)
    else:
        net = init_model(cfg)
    _need(args, "manifest")
    m = _manifest(args)
    store = DirectoryFrameStore(m, net.cfg.backbone.input_side)
    rng = np.random.default_rng(cfg.seed)
    sampler = TripletSampler(m, cfg.sampler_config())
    trip = [sampler.sample(rng) for _ in range(args.batch)]
    images = batch_images(store, trip, torch.float64)
    err = gradient_check(net, images, args.step, cfg.variant, cfg.loss_config(), args.coords, cfg.seed)
    res = {"variant": cfg.variant, "max_relative_error": err, "step": args.step, "coords": args.coords,
           "passed": err < args.tol}
    _write_json(_out(args) / "grad_check.json", res)
    print(json.dumps(res))
    if not res["passed"]:
        raise CliError(f"gradient check failed: max relative error {err:.3g} >= {args.tol}")


# -- parser ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", metavar="PATH", default=None, help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 42 unless the config sets it)")
    p.add_argument("--out", metavar="DIR", default=out_default, help="output directory")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", metavar="PATH", help="training manifest (JSON lines)")
    p.add_argument("--blacklist", metavar="PATH", help="pair ids to drop, one per line")
    p.add_argument("--variant", choices=VARIANTS, default=None, help="model variant (default full)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="attention loss weight (default 2.5)")
    p.add_argument("--triplet-variant", choices=("stable", "verbatim"), default=None,
                   help="triplet loss form (default stable)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 30)")
    p.add_argument("--lr", type=float, default=None, help="SGD learning rate (default 1e-3)")
    p.add_argument("--batch-size", type=int, default=None, help="triplets per batch (default 16)")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except unset ones whose help text already names the effective value."""

    def _get_help_string(self, action):
        if action.default is None and "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="jointattn", description=__doc__.split("\n")[0], epilog=PRECEDENCE,
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_, out_default):
        p = sub.add_parser(name, help=help_, description=f"{help_}. {PRECEDENCE}", formatter_class=fmt)
        _common(p, out_default)
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "render a synthetic paired-view dataset", "synth")
    p.add_argument("--pairs", type=int, default=None, help="number of pairs (default 250)")
    p.add_argument("--test-pairs", type=int, default=None, help="pairs held out for test.jsonl (default pairs/5)")
    p.add_argument("--side", type=int, default=None, help="frame side in pixels (default 64)")

    p = add("train", cmd_train, "train one model variant", "run")
    _train_flags(p)

    for name, func, help_ in (("eval-pairs", cmd_eval_pairs, "pairs-discrimination accuracy"),
                              ("eval-moments", cmd_eval_moments, "best-match moment localisation error")):
        p = add(name, func, help_, "eval")
        p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
        p.add_argument("--manifest", metavar="PATH", help="evaluation manifest")
        p.add_argument("--blacklist", metavar="PATH", help="pair ids to drop")
        p.add_argument("--variant", choices=VARIANTS, default=None, help="embedding wiring (default: checkpoint's)")
        if name == "eval-pairs":
            p.add_argument("--n-triplets", type=int, default=None, help="test triplets (default 1000)")

    p = add("ablations", cmd_ablations, "train and compare all model variants", "ablations")
    _train_flags(p)
    p.add_argument("--test-manifest", metavar="PATH", help="held-out manifest")
    p.add_argument("--truth", metavar="DIR", help="ground-truth directory (default: test manifest's)")
    p.add_argument("--variants", default=None, help="comma-separated subset (default: all)")
    p.add_argument("--n-triplets", type=int, default=None, help="test triplets (default 1000)")

    p = add("summarize", cmd_summarize, "two-view video summaries", "summaries")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--manifest", metavar="PATH", help="manifest of pairs to summarise")
    p.add_argument("--blacklist", metavar="PATH", help="pair ids to drop")
    p.add_argument("--pair", default=None, help="single pair id (default: all)")
    p.add_argument("--threshold", type=float, default=None,
                   help="fixed importance threshold (default: 75th percentile per video)")

    p = add("gaze", cmd_gaze, "gaze point from the third-person ROA", "gaze")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--image", metavar="PATH", help="third-person frame")
    p.add_argument("--head", type=float, nargs=2, metavar=("X", "Y"), help="head position in pixels")

    p = add("coseg", cmd_coseg, "ROA-guided co-segmentation of a frame pair", "coseg")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--first", metavar="PATH", help="first-person frame")
    p.add_argument("--third", metavar="PATH", help="third-person frame")
    p.add_argument("--alpha", type=float, default=0.5, help="weight of ROA proximity against appearance")

    p = add("visualize", cmd_visualize, "ROA heatmap overlays", "viz")
    p.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint")
    p.add_argument("--manifest", metavar="PATH", help="manifest to sample frames from")
    p.add_argument("--blacklist", metavar="PATH", help="pair ids to drop")
    p.add_argument("--n", type=int, default=4, help="number of pairs")

    p = add("grad-check", cmd_grad_check, "finite-difference gradient check of the objective", "gradcheck")
    _train_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint (default: seeded initialisation)")
    p.add_argument("--batch", type=int, default=2, help="triplets in the checked batch")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--coords", type=int, default=200, help="parameter coordinates sampled")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ManifestError, ConfigError, ContractError, SamplingError, SingularityError,
            TrainingDiverged, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"jointattn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
