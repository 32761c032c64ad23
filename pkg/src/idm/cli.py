"""``idm`` command line: data generation, pretraining, adaptation, evaluation and sweeps."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from idm import IGNORE_INDEX, __version__
from idm.datagen import MANIFEST_NAME, ingest_folder, make_domains, read_manifest, write_folder
from idm.errors import IDMError
from idm.evaluation import evaluate_model, evaluate_predictions
from idm.experiment import (
    ExperimentConfig,
    config_to_dict,
    experiment_config_from_dict,
    override_config,
    load_experiment_config,
    plot_convergence,
    run_experiment_config,
    summarize,
    write_metrics_csv,
)
from idm.mixing import choose_grid, patch_mix
from idm.model import load_checkpoint, make_teacher, pseudo_label, save_checkpoint
from idm.selection import MemoryBank, select_batch
from idm.styletx import compute_stats, stylize
from idm.trainer import adapt_one_shot, pretrain_source

log = logging.getLogger("idm")

SELECTION_CSV_COLUMNS = ("sample_id", "entropy", "w_pred", "similarity", "class_count", "w_sim", "weight", "accepted")


def _config(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config) if args.config else experiment_config_from_dict({})
    if args.seed is not None:
        cfg.seeds = (args.seed,)
        cfg.train = override_config(cfg.train, {"seed": args.seed})
    return cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data_dir: Path, split: str):
    path = Path(data_dir) / split
    if not (path / MANIFEST_NAME).exists():
        raise IDMError(f"{path} has no {MANIFEST_NAME}; run `idm gen-data` first or point --data at a gen-data directory")
    return ingest_folder(path), read_manifest(path)


def _pick_target(pool, target_id: str | None, seed: int):
    if target_id is not None:
        for s in pool:
            if s.id == target_id:
                return s
        raise IDMError(f"target id {target_id!r} not in pool ({', '.join(s.id for s in pool[:5])}, ...)")
    return pool[seed % len(pool)]


def _save_rgb(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    d = make_domains(cfg.scene, cfg.shift, cfg.n_source, cfg.n_target_pool, cfg.n_target_test)
    C = cfg.scene.num_classes
    write_folder(d.source, out / "source", C)
    write_folder(d.target_pool, out / "target_pool", C)
    write_folder(d.target_test, out / "target_test", C)
    (out / "domains.json").write_text(json.dumps(config_to_dict(cfg) | {"meta": d.meta}, indent=2, default=str))
    print(f"wrote {len(d.source)} source, {len(d.target_pool)} target-pool, {len(d.target_test)} target-test images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args)
    source, _ = _load_split(args.data, "source")
    model = pretrain_source(source, cfg.train, checkpoint=out / "source.ckpt")
    line = f"saved {out / 'source.ckpt'}"
    if (Path(args.data) / "target_test" / MANIFEST_NAME).exists():
        test, _ = _load_split(args.data, "target_test")
        line += f"; source-only target mIoU {evaluate_model(model, test).miou:.4f}"
    print(line)
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    out = _out(args)
    source, _ = _load_split(args.data, "source")
    pool, _ = _load_split(args.data, "target_pool")
    test = None
    if (Path(args.data) / "target_test" / MANIFEST_NAME).exists():
        test, _ = _load_split(args.data, "target_test")
    tgt = _pick_target(pool, args.target_id, cfg.train.seed)
    model = load_checkpoint(args.checkpoint)
    adapted, hist = adapt_one_shot(model, source, tgt.image, cfg.train, eval_set=test, target_id=tgt.id)
    hist.manifest.source_checkpoint = str(Path(args.checkpoint).resolve())
    hist.manifest.write(out / "run_manifest.json")
    write_metrics_csv(hist.rows, out / "metrics.csv")
    save_checkpoint(adapted, out / "adapted.ckpt", extra={"target_image_id": tgt.id})
    if args.plot and hist.snapshots:
        plot_convergence({tgt.id: hist.snapshots}, out / "convergence.png")
    msg = f"adapted on target {tgt.id} in {hist.seconds:.1f}s -> {out / 'adapted.ckpt'}"
    if hist.snapshots:
        msg += f"; target mIoU {hist.snapshots[0][1]:.4f} -> {hist.snapshots[-1][1]:.4f}"
    print(msg)
    return 0


def _label_files(path: Path) -> dict[str, Path]:
    d = path / "labels" if (path / "labels").is_dir() else path
    return {p.stem: p for p in sorted(d.glob("*.png"))}


def cmd_eval(args) -> int:
    if args.pred_dir:
        if not args.truth_dir:
            raise IDMError("--pred-dir needs --truth-dir")
        preds, truths = _label_files(Path(args.pred_dir)), _label_files(Path(args.truth_dir))
        missing = sorted(set(truths) - set(preds))
        if missing:
            raise IDMError(f"{len(missing)} truth labels have no prediction, e.g. {missing[0]}")
        if not truths:
            raise IDMError(f"no label PNGs under {args.truth_dir}")
        P = [np.asarray(Image.open(preds[k]), dtype=np.int64) for k in truths]
        T = [np.asarray(Image.open(truths[k]), dtype=np.int64) for k in truths]
        C = args.num_classes
        if C is None:
            manifest = Path(args.truth_dir) / MANIFEST_NAME
            if manifest.exists():
                C = json.loads(manifest.read_text())["num_classes"]
            else:
                C = int(max(max(p.max() for p in P), max(t[t != IGNORE_INDEX].max(initial=0) for t in T))) + 1
        report = evaluate_predictions(P, T, C)
    else:
        if not (args.checkpoint and args.data):
            raise IDMError("eval needs --pred-dir/--truth-dir or --checkpoint/--data")
        model = load_checkpoint(args.checkpoint)
        split = args.split
        samples, _ = _load_split(args.data, split)
        report = evaluate_model(model, samples)
        if args.save_preds:
            from idm.model import predict

            pred_dir = _out(args) / "preds"
            pred_dir.mkdir(exist_ok=True)
            for s, p in zip(samples, predict(model, np.stack([s.image for s in samples]))):
                Image.fromarray(p.astype(np.uint8)).save(pred_dir / f"{s.id}.png")
    result = report.as_dict()
    if args.out_dir:
        (_out(args) / "eval.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return 0


def _dry_run_inputs(args):
    cfg = _config(args)
    source, _ = _load_split(args.data, "source")
    pool, _ = _load_split(args.data, "target_pool")
    tgt = _pick_target(pool, args.target_id, cfg.train.seed)
    rng = np.random.default_rng(cfg.train.seed)
    n = args.n or cfg.train.candidate_pool
    idx = rng.choice(len(source), size=min(n, len(source)), replace=False)
    return cfg, [source[i] for i in idx], tgt, rng


def cmd_select(args) -> int:
    if not args.dry_run:
        raise IDMError("select only supports --dry-run (selection runs inside `idm adapt`)")
    cfg, picked, tgt, rng = _dry_run_inputs(args)
    teacher = make_teacher(load_checkpoint(args.checkpoint), cfg.train.ema_alpha)
    stats = compute_stats(tgt.image)
    cands = [
        stylize(s, tgt.image, seed=int(sd), norm=cfg.train.norm, target_stats=stats)
        for s, sd in zip(picked, rng.integers(0, 2**31, len(picked)))
    ]
    _, bank, records = select_batch(cands, teacher, MemoryBank(), cfg.train.selection)
    out = _out(args)
    with open(out / "selection.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SELECTION_CSV_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: v for k, v in asdict(r).items() if k in SELECTION_CSV_COLUMNS})
    if args.save_images:
        img_dir = out / "stylized"
        img_dir.mkdir(exist_ok=True)
        for c in cands:
            _save_rgb(c.image, img_dir / f"{c.id}.png")
    n_acc = sum(r.accepted for r in records)
    print(f"{n_acc}/{len(records)} candidates accepted against target {tgt.id}; records in {out / 'selection.csv'}")
    return 0


def cmd_mix(args) -> int:
    if not args.dry_run:
        raise IDMError("mix only supports --dry-run (mixing runs inside `idm adapt`)")
    cfg, picked, tgt, rng = _dry_run_inputs(args)
    pseudo = pseudo_label(load_checkpoint(args.checkpoint), tgt.image, cfg.train.pseudo_threshold)
    h, w = tgt.image.shape[:2]
    grid = choose_grid(h, w, cfg.train.P)
    out = _out(args)
    for sub in ("images", "labels", "masks"):
        (out / sub).mkdir(exist_ok=True)
    for s, sd in zip(picked, rng.integers(0, 2**31, len(picked))):
        m = patch_mix(s, tgt.image, pseudo, grid, cfg.train.mix_ratio, seed=int(sd))
        name = f"{s.id}__{tgt.id}"
        _save_rgb(m.image, out / "images" / f"{name}.png")
        Image.fromarray(np.asarray(m.label).astype(np.uint8)).save(out / "labels" / f"{name}.png")
        Image.fromarray((m.mask.pixel_mask(h, w) * 255).astype(np.uint8)).save(out / "masks" / f"{name}.png")
    print(f"wrote {len(picked)} mixes on a {grid.grid_h}x{grid.grid_w} grid to {out} (mask white = target)")
    return 0


def cmd_stylize(args) -> int:
    cfg, picked, tgt, rng = _dry_run_inputs(args)
    stats = compute_stats(tgt.image)
    out = _out(args)
    rows = []
    for s, sd in zip(picked, rng.integers(0, 2**31, len(picked))):
        st = stylize(s, tgt.image, seed=int(sd), norm=cfg.train.norm, target_stats=stats)
        _save_rgb(st.image, out / f"{s.id}.png")
        rows.append({"source_id": s.id, "delta_mu": st.offsets.delta_mu, "delta_sigma": st.offsets.delta_sigma})
    (out / "offsets.json").write_text(json.dumps(rows, indent=2))
    print(f"wrote {len(rows)} stylized images to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not cfg.sweep:
        raise IDMError("sweep needs a config with a 'sweep' section")
    results = run_experiment_config(cfg, _out(args))
    for row in summarize(results):
        print(f"{row['name']:<24} mean mIoU {row['mean_miou']:.4f} over {row['runs']} run(s)")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    results = run_experiment_config(cfg, _out(args))
    for row in summarize(results):
        print(f"{row['name']:<24} mean mIoU {row['mean_miou']:.4f} over {row['runs']} run(s)")
    return 0


def run_experiment(config_path, out_dir="runs/experiment") -> int:
    """Validate ``config_path`` and run everything it describes; returns an exit code."""
    return main(["--config", str(config_path), "--out-dir", str(out_dir), "run"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idm", description="One-shot domain adaptation for segmentation on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"idm {__version__}")
    p.add_argument("--config", help="YAML experiment config (profile, scene, shift, data, train, seeds, sweep)")
    p.add_argument("--seed", type=int, help="overrides the training seed and the seed list")
    p.add_argument("--out-dir", default="runs/idm", help="output directory (default: runs/idm)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="render source, target-pool and target-test folders")

    sp = sub.add_parser("pretrain", help="train the source-only model")
    sp.add_argument("--data", required=True, help="gen-data output directory")

    sp = sub.add_parser("adapt", help="one-shot adaptation from a source checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target-id", help="target-pool image id (default: picked by seed)")
    sp.add_argument("--plot", action="store_true", help="write convergence.png")

    sp = sub.add_parser("eval", help="mIoU of label folders or of a checkpoint")
    sp.add_argument("--pred-dir")
    sp.add_argument("--truth-dir")
    sp.add_argument("--num-classes", type=int)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", default="target_test")
    sp.add_argument("--save-preds", action="store_true")

    for name, helptext in (
        ("select", "score stylized candidates and write SelectionRecords as CSV"),
        ("mix", "write PatchMix image/label/mask triples"),
        ("stylize", "write stylized source images"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--data", required=True)
        if name != "stylize":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--dry-run", action="store_true", required=True)
        sp.add_argument("--target-id")
        sp.add_argument("-n", type=int, help="number of source images (default: candidate_pool)")
        if name == "select":
            sp.add_argument("--save-images", action="store_true")

    sub.add_parser("sweep", help="run the config's sweep (param values or the 2^3 ablation)")
    sub.add_parser("run", help="full experiment from --config")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "select": cmd_select,
    "mix": cmd_mix,
    "stylize": cmd_stylize,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (IDMError, ValueError, OSError) as e:
        print(f"idm {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
