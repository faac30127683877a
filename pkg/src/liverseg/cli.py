"""Command-line entry point: ``liverseg <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .appearance import StyleBank, compute_histogram, load_style_bank, random_style_transfer, save_style_bank
from .backbone import ShapeError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .contrast import enhance_and_stack, train_contrast_mapper
from .cotta import AdaptState, run_stream, write_trace
from .data import DatasetManifest, load_cases
from .mean_teacher import train, write_history
from .phantom import generate_phantom_dataset
from .pipeline import load_training_sets, mapper_pairs, predict_masks, score_case
from .postproc import EmptyMaskError, connected_components, trim_mask
from .pseudo import attach_pseudo_labels, finetune, generate_pseudo_labels, save_pseudo_labels
from .volume import VolumeError, read_mask, read_volume, write_volume

logger = logging.getLogger("liverseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT = 0, 2, 3, 4
PRED_SUFFIX = "_pred"


class ContractError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# helpers


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _manifest(cfg: RunConfig) -> DatasetManifest:
    return DatasetManifest.load(_require(cfg.paths.manifest, "--manifest"))


def _mapper(cfg: RunConfig):
    if not cfg.train.use_contrast:
        return None
    if cfg.paths.mapper is None:
        raise ConfigError("train.use_contrast is on: pass --mapper (or set train.use_contrast to false)")
    return load_checkpoint(cfg.paths.mapper)


def _checkpoint(path: Optional[str], flag: str):
    return load_checkpoint(_require(path, flag))


def _write_masks(cases, masks, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c, m in zip(cases, masks):
        hdr = write_volume(m.to_volume(), out / f"{c.case_id}{PRED_SUFFIX}")
        rows.append({"case_id": c.case_id, "mask": hdr.name, "components": connected_components(m).n_components})
    (out / "predictions.json").write_text(json.dumps({"cases": rows}, indent=2) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args, out: Path) -> None:
    m = generate_phantom_dataset(cfg.phantom, out)
    n = sum(len(getattr(m, s)) for s in ("labeled", "unlabeled", "pseudo_pool", "test"))
    print(f"wrote {n} cases and {out / 'manifest.json'}")


def cmd_style(cfg: RunConfig, args, out: Path) -> None:
    """Build the histogram style bank; optionally restyle one volume with it."""
    if args.bank:
        bank = load_style_bank(args.bank, cfg.train.seed)
    else:
        man = _manifest(cfg)
        refs = load_cases(man, "labeled", with_masks=False) + load_cases(man, "unlabeled", with_masks=False)
        bank = StyleBank([compute_histogram(c.ged4) for c in refs], cfg.train.seed)
    path = save_style_bank(bank, out / "style_bank")
    print(f"style bank with {len(bank.references)} references: {path}")
    if args.volume:
        v = read_volume(args.volume)
        rng = np.random.default_rng([cfg.train.seed, 0x7374])
        styled = random_style_transfer(v, bank, rng)
        hdr = write_volume(styled, out / "styled")
        print(f"styled volume: {hdr}")


def cmd_contrast_train(cfg: RunConfig, args, out: Path) -> None:
    pairs = mapper_pairs(_manifest(cfg))
    hist: List[float] = []
    mapper = train_contrast_mapper(pairs, cfg.train, history=hist)
    save_checkpoint(mapper, out / "mapper.ckpt")
    with (out / "mapper_history.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(hist):
            w.writerow([i, repr(v)])
    print(f"mapper trained on {len(pairs)} pairs: {out / 'mapper.ckpt'}")


def cmd_train(cfg: RunConfig, args, out: Path) -> None:
    sets = load_training_sets(_manifest(cfg))
    mapper = _mapper(cfg)
    _, _, hist = train(sets.labeled, sets.unlabeled, cfg.train, mapper, sets.bank, out)
    last = hist[-1].supervised if hist else float("nan")
    print(f"trained {cfg.train.epochs} epochs, final supervised loss {last:.4f}")


def cmd_finetune(cfg: RunConfig, args, out: Path) -> None:
    sets = load_training_sets(_manifest(cfg))
    mapper = _mapper(cfg)
    student = _checkpoint(cfg.paths.student, "--student")
    teacher = _checkpoint(cfg.paths.teacher, "--teacher") if cfg.paths.teacher else student.copy()
    pseudo = generate_pseudo_labels(
        student, sets.pseudo_pool, cfg.train.pseudo_threshold, mapper, source_checkpoint=Path(cfg.paths.student).name
    )
    save_pseudo_labels(pseudo, out / "pseudo")
    pseudo_cases = attach_pseudo_labels(sets.pseudo_pool, pseudo, cfg.train.min_confidence)
    _, _, hist = finetune(student, teacher, sets.labeled, pseudo_cases, sets.unlabeled, cfg.train, mapper, sets.bank, out)
    print(f"fine-tuned on {len(sets.labeled)} labeled + {len(pseudo_cases)} pseudo-labeled cases")


def cmd_infer(cfg: RunConfig, args, out: Path) -> None:
    man = _manifest(cfg)
    cases = load_cases(man, args.split, with_masks=False)
    params = _checkpoint(cfg.paths.student, "--student")
    masks = predict_masks(params, cases, _mapper(cfg), trim=not args.no_trim)
    _write_masks(cases, masks, out)
    print(f"wrote {len(masks)} masks to {out}")


def cmd_adapt(cfg: RunConfig, args, out: Path) -> None:
    man = _manifest(cfg)
    cases = load_cases(man, args.split, with_masks=False)
    if not cases:
        raise ContractError(f"split {args.split!r} is empty")
    mapper = _mapper(cfg)
    student = _checkpoint(cfg.paths.student, "--student")
    state = AdaptState.from_source(student, cfg.adapt)
    stream = [enhance_and_stack(c.ged4, mapper).data for c in cases]
    masks, _, trace = run_stream(state, stream, cases[0].ged4.spacing_mm)
    _write_masks(cases, masks, out)
    write_trace(trace, out / "tta_trace.csv")
    save_checkpoint(state.student, out / "adapted_student.ckpt")
    save_checkpoint(state.teacher, out / "adapted_teacher.ckpt")
    print(f"adapted over {len(cases)} volumes")


def cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    man = _manifest(cfg)
    pred_dir = Path(_require(cfg.paths.predictions, "--pred"))
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    cases = load_cases(man, args.split, with_masks=True)
    rows = []
    for c in cases:
        if c.mask is None:
            raise ContractError(f"case {c.case_id} has no ground-truth mask")
        pred = read_mask(pred_dir / f"{c.case_id}{PRED_SUFFIX}.mvol.json")
        if not pred.same_geometry(c.mask):
            raise VolumeError(f"{c.case_id}: prediction geometry differs from ground truth")
        pre = score_case(c.case_id, pred, c.mask)
        post = score_case(c.case_id, trim_mask(pred), c.mask)
        rows.append([c.case_id, pre.dice, pre.hd_mm, post.dice, post.hd_mm])
    if not rows:
        raise ContractError(f"split {args.split!r} is empty")
    arr = np.array([r[1:] for r in rows], dtype=np.float64)
    with np.errstate(all="ignore"):
        means = [float(np.nanmean(arr[:, j])) if not np.all(np.isnan(arr[:, j])) else float("nan") for j in range(4)]
    path = out / "metrics.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "dice", "hd_mm", "dice_trim", "hd_trim_mm"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        w.writerow(["mean"] + [repr(v) for v in means])
    print(f"mean dice {means[0]:.4f}  mean hd {means[1]:.3f} mm  ({len(rows)} cases) -> {path}")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic phantom dataset"),
    "style": (cmd_style, "build the histogram style bank (optionally restyle a volume)"),
    "contrast-train": (cmd_contrast_train, "train the contrast mapper on aligned t1/ged4 pairs"),
    "train": (cmd_train, "mean-teacher training"),
    "finetune": (cmd_finetune, "pseudo-label the pool and fine-tune"),
    "infer": (cmd_infer, "predict masks with a trained checkpoint"),
    "adapt": (cmd_adapt, "test-time adaptation over a split, in order"),
    "eval": (cmd_eval, "Dice and Hausdorff distance against ground truth"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="seed for every stage")
    common.add_argument("--manifest", help="dataset manifest.json")
    common.add_argument("--student", help="student (or model) checkpoint")
    common.add_argument("--teacher", help="teacher checkpoint")
    common.add_argument("--mapper", help="contrast mapper checkpoint")
    common.add_argument("--split", default="test", choices=["labeled", "unlabeled", "pseudo_pool", "test"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="liverseg", description="Semi-supervised liver segmentation on phantoms.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "infer":
            sp.add_argument("--no-trim", action="store_true", help="skip connected-component trimming")
        if name == "eval":
            sp.add_argument("--pred", help="directory of predicted masks")
        if name == "style":
            sp.add_argument("--bank", help="existing style bank directory")
            sp.add_argument("--volume", help="volume to restyle with a random bank reference")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    for key in ("manifest", "student", "teacher", "mapper"):
        if getattr(args, key, None) is not None:
            setattr(cfg.paths, key, getattr(args, key))
    if getattr(args, "pred", None) is not None:
        cfg.paths.predictions = args.pred
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {out}: {e}") from e
        print(f"resolved config: {cfg.save(out / 'resolved_config.json')}")
        logger.info("resolved config:\n%s", cfg.dumps())
        COMMANDS[args.command][0](cfg, args, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, VolumeError, ShapeError, EmptyMaskError) as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
