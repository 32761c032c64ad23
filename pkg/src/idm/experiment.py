"""Experiment configuration files and the end-to-end runner used by the CLI.

A config is a YAML mapping::

    profile: desk            # or "published": which TrainConfig defaults to start from
    scene: {width: 64, height: 64, num_classes: 8, shapes_per_image: 6, rng_seed: 7}
    shift: {mean_offset: [...], std_scale: [...], texture_noise: 0.04}
    data: {n_source: 256, n_target_pool: 16, n_target_test: 48}
    train: {adapt_iters: 500, selection: {lambda_sim: 0.9}, ...}   # TrainConfig overrides
    seeds: [0, 1, 2]
    sweep: {param: P, values: [16, 36, 64]}    # or {ablation: true}
    plot: true
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from idm.datagen import BENCHMARK_SHIFT, DomainShift, SceneSpec, make_domains
from idm.errors import ConfigurationError
from idm.evaluation import evaluate_model
from idm.model import save_checkpoint
from idm.trainer import METRICS_COLUMNS, METRICS_SCHEMA_VERSION, TrainConfig, adapt_one_shot, pretrain_source

log = logging.getLogger(__name__)

ABLATION_TOGGLES = ("use_ssm", "use_patchmix", "use_pim")
RESULT_COLUMNS = ("name", "seed", "target_id", "source_miou", "adapted_miou", "miou_at_50", "seconds")


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = BENCHMARK_SHIFT
    n_source: int = 256
    n_target_pool: int = 16
    n_target_test: int = 48
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    seeds: tuple[int, ...] = (0, 1, 2)
    sweep: dict | None = None
    plot: bool = False

    def variants(self) -> list[tuple[str, TrainConfig]]:
        """(name, config) for every run the sweep asks for; one entry without a sweep."""
        if not self.sweep:
            return [("idm", self.train)]
        if self.sweep.get("ablation"):
            out = []
            for flags in itertools.product((False, True), repeat=3):
                kw = dict(zip(ABLATION_TOGGLES, flags))
                name = "+".join(k[4:] for k, v in kw.items() if v) or "baseline"
                out.append((name, override_config(self.train, kw)))
            return out
        param = self.sweep["param"]
        return [(f"{param}={v}", override_config(self.train, {param: v})) for v in self.sweep["values"]]


def override_config(cfg: TrainConfig, kw: dict) -> TrainConfig:
    d = cfg.to_dict()
    for key, value in kw.items():
        if "." in key:
            outer, inner = key.split(".", 1)
            d[outer] = {**d[outer], inner: value}
        else:
            d[key] = value
    return TrainConfig.from_dict(d)


def load_experiment_config(path) -> ExperimentConfig:
    """Parse and validate a config file, reporting every problem at once."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return experiment_config_from_dict(raw)


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    errors: list[str] = []
    allowed = {"profile", "scene", "shift", "data", "train", "seeds", "sweep", "plot"}
    for key in sorted(set(raw) - allowed):
        errors.append(f"unknown top-level key {key!r}")

    profile = raw.get("profile", "desk")
    if profile not in ("desk", "published"):
        errors.append(f"profile must be 'desk' or 'published', got {profile!r}")

    scene = _build(SceneSpec, raw.get("scene", {}), "scene", errors)
    if scene is not None:
        try:
            scene.validate()
        except ConfigurationError as e:
            errors.append(f"scene: {e}")

    shift = BENCHMARK_SHIFT
    if "shift" in raw:
        s = dict(raw["shift"] or {})
        for k in ("mean_offset", "std_scale"):
            if k in s:
                s[k] = tuple(s[k])
        shift = _build(DomainShift, s, "shift", errors)
        if shift is not None:
            try:
                shift.validate()
            except ConfigurationError as e:
                errors.append(f"shift: {e}")

    data = dict(raw.get("data") or {})
    for k in sorted(set(data) - {"n_source", "n_target_pool", "n_target_test"}):
        errors.append(f"data: unknown key {k!r}")
    for k in ("n_source", "n_target_pool", "n_target_test"):
        if k in data and (not isinstance(data[k], int) or data[k] < 1):
            errors.append(f"data.{k} must be a positive integer")

    train = None
    try:
        overrides = dict(raw.get("train") or {})
        if profile == "published":
            base = TrainConfig().to_dict()
            sel = overrides.pop("selection", {})
            base["selection"] = {**base["selection"], **sel}
            lw = overrides.pop("loss_weights", {})
            base["loss_weights"] = {**base["loss_weights"], **lw}
            base.update(overrides)
            train = TrainConfig.from_dict(base)
        else:
            lw = overrides.pop("loss_weights", None)
            train = TrainConfig.desk(**overrides)
            if lw:
                train = override_config(train, {f"loss_weights.{k}": v for k, v in lw.items()})
        train.validate()
    except (ConfigurationError, TypeError) as e:
        errors.append(f"train: {e}")

    seeds = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        errors.append("seeds must be a non-empty list of integers")

    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            errors.append("sweep must be a mapping")
        elif not sweep.get("ablation"):
            if "param" not in sweep or not isinstance(sweep.get("values"), list) or not sweep["values"]:
                errors.append("sweep needs 'param' and a non-empty 'values' list, or 'ablation: true'")
            elif train is not None:
                for v in sweep["values"]:
                    try:
                        override_config(train, {sweep["param"]: v}).validate()
                    except (ConfigurationError, TypeError, KeyError) as e:
                        errors.append(f"sweep {sweep['param']}={v!r}: {e}")

    if errors:
        raise ConfigurationError("invalid experiment config:\n  - " + "\n  - ".join(errors))
    return ExperimentConfig(
        profile=profile,
        scene=scene,
        shift=shift,
        n_source=data.get("n_source", 256),
        n_target_pool=data.get("n_target_pool", 16),
        n_target_test=data.get("n_target_test", 48),
        train=train,
        seeds=tuple(seeds),
        sweep=sweep,
        plot=bool(raw.get("plot", False)),
    )


def _build(cls, values: dict, section: str, errors: list[str]):
    names = {f.name for f in fields(cls)}
    unknown = set(values or {}) - names
    if unknown:
        errors.append(f"{section}: unknown keys {sorted(unknown)}")
        return None
    try:
        return cls(**(values or {}))
    except TypeError as e:
        errors.append(f"{section}: {e}")
        return None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "profile": cfg.profile,
        "scene": asdict(cfg.scene),
        "shift": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg.shift).items()},
        "data": {"n_source": cfg.n_source, "n_target_pool": cfg.n_target_pool, "n_target_test": cfg.n_target_test},
        "train": cfg.train.to_dict(),
        "seeds": list(cfg.seeds),
        "sweep": cfg.sweep,
        "plot": cfg.plot,
    }


# ---------------------------------------------------------------------------


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# idm metrics schema {METRICS_SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRICS_COLUMNS})
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def plot_convergence(curves: dict[str, list[tuple[int, float]]], path) -> Path | None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plotting is optional
        log.warning("matplotlib not available; skipping %s", path)
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in curves.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, label=name)
    ax.set_xlabel("adaptation iteration")
    ax.set_ylabel("target mIoU")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def run_experiment_config(cfg: ExperimentConfig, out_dir) -> list[dict]:
    """Generate data, pretrain once, adapt per (variant, seed); return result rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))

    domains = make_domains(cfg.scene, cfg.shift, cfg.n_source, cfg.n_target_pool, cfg.n_target_test)
    source = pretrain_source(domains.source, cfg.train, checkpoint=out / "source.ckpt")
    source_miou = evaluate_model(source, domains.target_test).miou
    log.info("source-only target mIoU %.4f", source_miou)

    results, curves = [], {}
    for name, train in cfg.variants():
        for seed in cfg.seeds:
            run_cfg = override_config(train, {"seed": seed})
            tgt = domains.target_pool[seed % len(domains.target_pool)]
            t0 = time.perf_counter()
            model, hist = adapt_one_shot(source, domains.source, tgt.image, run_cfg, eval_set=domains.target_test, target_id=tgt.id)
            run_dir = out / name / f"seed{seed}"
            hist.manifest.source_checkpoint = str(out / "source.ckpt")
            hist.manifest.write(run_dir / "run_manifest.json")
            write_metrics_csv(hist.rows, run_dir / "metrics.csv")
            save_checkpoint(model, run_dir / "adapted.ckpt")
            snaps = dict(hist.snapshots)
            final = hist.snapshots[-1][1]
            results.append(
                {
                    "name": name,
                    "seed": seed,
                    "target_id": tgt.id,
                    "source_miou": source_miou,
                    "adapted_miou": final,
                    "miou_at_50": snaps.get(50, ""),
                    "seconds": round(time.perf_counter() - t0, 2),
                }
            )
            curves[f"{name}/seed{seed}"] = hist.snapshots
            log.info("%s seed %d: %.4f -> %.4f", name, seed, source_miou, final)

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        w.writerows(results)
    if cfg.plot:
        plot_convergence(curves, out / "convergence.png")
    return results


def summarize(results: list[dict]) -> list[dict]:
    by_name: dict[str, list[float]] = {}
    for r in results:
        by_name.setdefault(r["name"], []).append(float(r["adapted_miou"]))
    return [{"name": k, "mean_miou": float(np.mean(v)), "runs": len(v)} for k, v in by_name.items()]
