"""Command-line surface tying the pipeline together.

Each subcommand reads a RunConfig (file plus flag overrides), consumes the
artifacts of earlier stages from the run directory, and leaves behind the
artifact it produced together with a JSON sidecar describing exactly how it
was made.  All randomness flows from `root_seed` through named sub-streams,
so rerunning a command with the same config reproduces its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateDataError,
    GuidanceError,
    MissingArtifactError,
    NumericalError,
    ParameterError,
    QcdiffError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

EVAL_SUITES = ("relgain", "percentile", "lambda", "reference", "seeds", "content")


# -- artifact plumbing -------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _refuse_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigurationError(
            f"{path} already exists; pass --force to overwrite a completed stage"
        )


def _write_sidecar(artifact: Path, config: RunConfig, extra: dict):
    sidecar = artifact.with_suffix(".json")
    payload = {
        "format_version": cfgmod.FORMAT_VERSION,
        "artifact": artifact.name,
        "sha256": _sha256(artifact) if artifact.exists() else None,
        "config": cfgmod.config_dict(config),
        **extra,
    }
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def _read_sidecar(artifact: Path) -> dict:
    sidecar = artifact.with_suffix(".json")
    if not sidecar.exists():
        raise MissingArtifactError(f"missing sidecar {sidecar}; rerun the producing stage")
    payload = json.loads(sidecar.read_text())
    version = payload.get("format_version")
    if version != cfgmod.FORMAT_VERSION:
        raise ContractError(
            f"{sidecar}: format version {version} does not match {cfgmod.FORMAT_VERSION}"
        )
    return payload


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"expected {path} — run '{stage}' first")
    return path


# -- dataset serialization ---------------------------------------------------


def _kind_codes():
    from .synthdata import DegradationKind

    return list(DegradationKind)


def _save_records(path: Path, records):
    kinds = _kind_codes()
    np.savez_compressed(
        path,
        images=np.stack([r.image for r in records]),
        class_id=np.array([r.class_id for r in records], dtype=np.int64),
        kind=np.array([kinds.index(r.degradation.kind) for r in records], dtype=np.int64),
        strength=np.array([r.degradation.strength for r in records], dtype=np.float64),
        pseudo_mos=np.array([r.pseudo_mos for r in records], dtype=np.float64),
        scene_seed=np.array([r.scene_seed for r in records], dtype=np.uint64),
    )


def _load_records(run: Path):
    from .synthdata import DegradationSpec, TrainingRecord

    path = _require(run / "dataset.npz", "build-data")
    kinds = _kind_codes()
    with np.load(path) as z:
        images = z["images"]
        class_id = z["class_id"]
        kind = z["kind"]
        strength = z["strength"]
        pseudo_mos = z["pseudo_mos"]
        scene_seed = z["scene_seed"]
    return [
        TrainingRecord(
            image=images[i],
            class_id=int(class_id[i]),
            degradation=DegradationSpec(kinds[int(kind[i])], float(strength[i])),
            pseudo_mos=float(pseudo_mos[i]),
            scene_seed=int(scene_seed[i]),
        )
        for i in range(len(images))
    ]


def _load_iqa_stage(run: Path):
    from .iqa import ScoreStandardizer, load_iqa

    model = load_iqa(_require(run / "iqa.qda", "train-iqa"))
    sidecar = _read_sidecar(run / "iqa.qda")
    std = ScoreStandardizer.from_json(sidecar["standardizer"])
    scores = np.load(_require(run / "cond_scores.npy", "train-iqa"))
    return model, std, scores


def _quality_inputs(config: RunConfig, iqa_model, std, raw_scores, records, rng):
    """Per-record adapter inputs for the configured input mode."""
    from . import adapter as ad
    from .synthdata import DEGRADED_KINDS, DegradationSpec, degrade

    if config.input_mode == ad.INPUT_REFERENCE:
        images = np.stack([r.image for r in records])
        inputs = iqa_model.embed_batch(images)
        # degraded-reference augmentation: embeddings of a further-degraded
        # copy stand in for imperfect references some fraction of the time
        alt_images = np.stack(
            [
                degrade(
                    r.image,
                    DegradationSpec(
                        DEGRADED_KINDS[int(rng.integers(0, len(DEGRADED_KINDS)))],
                        float(rng.uniform(0.3, 0.9)),
                    ),
                    rng,
                )
                for r in records
            ]
        )
        return inputs, iqa_model.embed_batch(alt_images)
    standardized = std.apply(raw_scores)
    if config.input_mode == ad.INPUT_POSENC:
        return (
            np.stack([ad.encode_vector(row, config.posenc_L) for row in standardized]),
            None,
        )
    return standardized, None


def _inference_lam(config: RunConfig):
    from . import adapter as ad

    # the concat ablation has no conditioning-strength control surface
    return 1.0 if config.variant == ad.VARIANT_CONCAT else config.lam


# -- subcommands -------------------------------------------------------------


def cmd_build_data(config: RunConfig, force: bool = False) -> dict:
    from . import rng as qrng
    from .synthdata import build_dataset

    run = Path(config.output_dir)
    run.mkdir(parents=True, exist_ok=True)
    artifact = run / "dataset.npz"
    _refuse_overwrite(artifact, force)
    t0 = time.time()
    records = build_dataset(
        config.n_records, config.degrade_fraction, qrng.stream(config.root_seed, "data")
    )
    _save_records(artifact, records)
    cfgmod.save_config(run / "config.txt", config)
    return _write_sidecar(
        artifact, config, {"n_records": len(records), "seconds": round(time.time() - t0, 2)}
    )


def cmd_train_iqa(config: RunConfig, force: bool = False) -> dict:
    from . import rng as qrng
    from .iqa import condition_scores, fit_standardizer, save_iqa, train_iqa

    run = Path(config.output_dir)
    artifact = run / "iqa.qda"
    _refuse_overwrite(artifact, force)
    records = _load_records(run)
    t0 = time.time()
    model, report = train_iqa(
        records,
        epochs=config.iqa_epochs,
        lr=config.iqa_lr,
        rng=qrng.stream(config.root_seed, "train-iqa"),
    )
    save_iqa(artifact, model)
    images = np.stack([r.image for r in records])
    raw = condition_scores(model, images)
    std = fit_standardizer(raw)
    np.save(run / "cond_scores.npy", raw)
    return _write_sidecar(
        artifact,
        config,
        {
            "holdout_srocc": report.get("holdout_srocc"),
            "standardizer": std.to_json(),
            "seconds": round(time.time() - t0, 2),
        },
    )


def cmd_train_diffusion(config: RunConfig, force: bool = False) -> dict:
    from . import rng as qrng
    from .diffusion import DiffusionSchedule, train_diffusion
    from .unet import save_denoiser

    run = Path(config.output_dir)
    artifact = run / "unet.qda"
    _refuse_overwrite(artifact, force)
    records = _load_records(run)
    t0 = time.time()
    model, losses = train_diffusion(
        records,
        DiffusionSchedule.linear(),
        steps=config.train_steps,
        batch_size=config.batch_size,
        lr=config.lr,
        dropout_prob=config.dropout_prob,
        rng=qrng.stream(config.root_seed, "train-diffusion"),
    )
    save_denoiser(artifact, model)
    dec = max(1, len(losses) // 10)
    return _write_sidecar(
        artifact,
        config,
        {
            "steps": len(losses),
            "first_decile_median_loss": float(np.median(losses[:dec])),
            "last_decile_median_loss": float(np.median(losses[-dec:])),
            "seconds": round(time.time() - t0, 2),
        },
    )


def cmd_train_adapter(config: RunConfig, force: bool = False) -> dict:
    import dataclasses as dc

    from . import rng as qrng
    from .adapter import save_adapter
    from .diffusion import train_adapter
    from .unet import load_denoiser

    run = Path(config.output_dir)
    artifact = run / "adapter.qda"
    _refuse_overwrite(artifact, force)
    records = _load_records(run)
    model = load_denoiser(_require(run / "unet.qda", "train-diffusion"))
    iqa_model, std, raw_scores = _load_iqa_stage(run)
    rng = qrng.stream(config.root_seed, "train-adapter")
    inputs, alt_inputs = _quality_inputs(config, iqa_model, std, raw_scores, records, rng)
    t0 = time.time()
    attachment, losses = train_adapter(
        model,
        records,
        inputs,
        steps=config.adapter_steps,
        batch_size=config.adapter_batch_size,
        lr=config.adapter_lr,
        dropout_prob=config.dropout_prob,
        rng=rng,
        attachment_kwargs={
            "input_mode": config.input_mode,
            "variant": config.variant,
            "posenc_L": config.posenc_L,
        },
        alt_quality_inputs=alt_inputs,
    )
    attachment = dc.replace(attachment, lam=_inference_lam(config))
    save_adapter(artifact, attachment)
    dec = max(1, len(losses) // 10)
    return _write_sidecar(
        artifact,
        config,
        {
            "lam": attachment.lam,
            "input_mode": attachment.input_mode,
            "variant": attachment.variant,
            "input_dim": attachment.weights.input_dim,
            "posenc_L": attachment.posenc_L,
            "steps": len(losses),
            "last_decile_median_loss": float(np.median(losses[-dec:])),
            "seconds": round(time.time() - t0, 2),
        },
    )


def _sample_conditions(config: RunConfig, attachment, run: Path, n: int, class_ids):
    """Conditions matching the attached adapter's input mode."""
    from . import adapter as ad
    from .iqa import percentile_condition
    from .synthdata import SceneSpec, render_scene

    iqa_model, std, raw_scores = _load_iqa_stage(run)
    if attachment.input_mode == ad.INPUT_REFERENCE:
        return [
            ad.reference_condition(
                iqa_model, render_scene(SceneSpec(int(cid), config.root_seed + 1000 + i))
            )
            for i, cid in enumerate(class_ids)
        ]
    cond = percentile_condition(std, raw_scores, config.percentile)
    return [cond] * n


def cmd_sample(config: RunConfig, force: bool = False) -> dict:
    from .adapter import load_adapter
    from .diffusion import (
        DiffusionSchedule,
        NegativeGuidanceConfig,
        SamplerConfig,
        sample,
    )
    from .guidance import GradientGuidanceConfig
    from .iqa import load_iqa
    from .unet import load_denoiser

    run = Path(config.output_dir)
    out = run / "samples"
    _refuse_overwrite(out / "samples.json", force)
    out.mkdir(parents=True, exist_ok=True)
    model = load_denoiser(_require(run / "unet.qda", "train-diffusion"))
    n = config.n_samples
    if config.sample_class >= 0:
        class_ids = np.full(n, config.sample_class, dtype=np.int64)
    else:
        class_ids = np.arange(n, dtype=np.int64) % 8

    conditions = None
    adapter_path = run / "adapter.qda"
    attachment = None
    if adapter_path.exists():
        attachment = dataclasses.replace(load_adapter(adapter_path), lam=_inference_lam(config))
        model.attach(attachment)
        conditions = _sample_conditions(config, attachment, run, n, class_ids)

    negative = NegativeGuidanceConfig(delta=config.delta) if config.delta > 0 else None
    guidance = None
    if config.alpha > 0:
        guidance = GradientGuidanceConfig(
            alpha=config.alpha, target_metric=load_iqa(_require(run / "iqa.qda", "train-iqa"))
        )
    sampler = SamplerConfig(
        g=config.g,
        steps=config.sample_steps,
        rng_seed=config.root_seed,
        negative=negative,
        guidance=guidance,
    )
    t0 = time.time()
    images = sample(model, DiffusionSchedule.linear(), sampler, class_ids, conditions)
    if attachment is not None:
        model.detach()
    np.save(out / "samples.npy", images.astype(np.float32))
    checksums = []
    for i, img in enumerate(images):
        png = out / f"sample_{i:03d}.png"
        _write_png(png, img)
        checksums.append(_sha256(png))
    marker = out / "samples.json"
    marker.write_text(
        json.dumps(
            {
                "format_version": cfgmod.FORMAT_VERSION,
                "config": cfgmod.config_dict(config),
                "seed": config.root_seed,
                "g": config.g,
                "lam": None if attachment is None else attachment.lam,
                "delta": config.delta,
                "alpha": config.alpha,
                "percentile": None if conditions is None else config.percentile,
                "class_ids": class_ids.tolist(),
                "png_sha256": checksums,
                "seconds": round(time.time() - t0, 2),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return json.loads(marker.read_text())


def _write_png(path: Path, image: np.ndarray):
    from PIL import Image

    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- eval suites -------------------------------------------------------------


def _eval_context(config: RunConfig, need_adapter: bool):
    from .adapter import load_adapter
    from .diffusion import DiffusionSchedule
    from .unet import load_denoiser

    run = Path(config.output_dir)
    model = load_denoiser(_require(run / "unet.qda", "train-diffusion"))
    attachment = None
    if need_adapter:
        attachment = dataclasses.replace(
            load_adapter(_require(run / "adapter.qda", "train-adapter")),
            lam=_inference_lam(config),
        )
    return run, model, DiffusionSchedule.linear(), attachment


def _batched_sample(model, sched, config: RunConfig, seeds, class_ids, conditions=None, g=None):
    """One image per seed, paired sampling noise across variants."""
    from .diffusion import SamplerConfig, sample

    images = []
    for i, seed in enumerate(seeds):
        cfg = SamplerConfig(
            g=config.g if g is None else g, steps=config.sample_steps, rng_seed=int(seed)
        )
        cond = None if conditions is None else [conditions[i]]
        images.append(sample(model, sched, cfg, np.array([class_ids[i]]), cond)[0])
    return np.stack(images)


def _eval_percentile(config: RunConfig) -> dict:
    from . import evalsuite as ev

    run, model, sched, attachment = _eval_context(config, need_adapter=True)
    iqa_model, std, raw_scores = _load_iqa_stage(run)
    from .iqa import percentile_condition

    n = config.n_samples
    seeds = [config.root_seed * 10000 + i for i in range(n)]
    class_ids = [i % 8 for i in range(n)]
    model.attach(attachment)
    try:
        def generate(p):
            cond = percentile_condition(std, raw_scores, p)
            return _batched_sample(model, sched, config, seeds, class_ids, [cond] * n)

        result = ev.percentile_sweep(generate, iqa_model.score_batch)
    finally:
        model.detach()
    ev.write_sweep_csv(run / "eval" / "percentile.csv", result)
    return {"srocc": result.srocc, "points": result.to_rows()}


def _eval_lambda(config: RunConfig) -> dict:
    import dataclasses as dc

    from . import evalsuite as ev
    from .iqa import percentile_condition

    run, model, sched, attachment = _eval_context(config, need_adapter=True)
    iqa_model, std, raw_scores = _load_iqa_stage(run)
    n = config.n_samples
    seeds = [config.root_seed * 10000 + i for i in range(n)]
    class_ids = [i % 8 for i in range(n)]
    conds = {
        "low": percentile_condition(std, raw_scores, 1.0),
        "high": percentile_condition(std, raw_scores, 99.0),
    }

    def generate(lam, name):
        model.attach(dc.replace(attachment, lam=lam))
        try:
            return _batched_sample(model, sched, config, seeds, class_ids, [conds[name]] * n)
        finally:
            model.detach()

    result = ev.lambda_sweep(generate, iqa_model.score_batch)
    ev.write_sweep_csv(run / "eval" / "lambda.csv", result)
    return {name: res.to_rows() for name, res in result.items()}


def _relgain_scores(config: RunConfig):
    """Paired baseline/conditioned scores on the target and held-out metric."""
    from .iqa import analytic_metrics, percentile_condition

    run, model, sched, attachment = _eval_context(config, need_adapter=True)
    iqa_model, std, raw_scores = _load_iqa_stage(run)
    n = config.n_samples
    seeds = [config.root_seed * 10000 + i for i in range(n)]
    class_ids = [i % 8 for i in range(n)]
    cond = percentile_condition(std, raw_scores, config.percentile)
    base = _batched_sample(model, sched, config, seeds, class_ids)
    model.attach(attachment)
    try:
        conditioned = _batched_sample(model, sched, config, seeds, class_ids, [cond] * n)
    finally:
        model.detach()

    def measure(images):
        return (
            iqa_model.score_batch(images),
            np.array([analytic_metrics(img).sharpness for img in images]),
        )

    return run, seeds, measure(base), measure(conditioned)


def _write_rows_csv(path: Path, fieldnames, rows):
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _eval_relgain(config: RunConfig) -> dict:
    from . import evalsuite as ev

    run, seeds, (b_iqa, b_sharp), (c_iqa, c_sharp) = _relgain_scores(config)
    rows = [
        {
            "seed": s,
            "baseline_iqa": float(b_iqa[i]),
            "conditioned_iqa": float(c_iqa[i]),
            "baseline_sharpness": float(b_sharp[i]),
            "conditioned_sharpness": float(c_sharp[i]),
        }
        for i, s in enumerate(seeds)
    ]
    _write_rows_csv(run / "eval" / "relgain.csv", list(rows[0].keys()), rows)
    gain_iqa = ev.rel_gain(b_iqa, c_iqa)
    gain_sharp = ev.rel_gain(b_sharp, c_sharp)
    return {
        "rel_gain_iqa_percent": gain_iqa.percent,
        "rel_gain_sharpness_percent": gain_sharp.percent,
        "n_pairs": gain_iqa.n_pairs,
    }


def _eval_seeds(config: RunConfig) -> dict:
    from . import evalsuite as ev

    run, seeds, (b_iqa, _), (c_iqa, _) = _relgain_scores(config)
    stats = ev.seed_consistency(b_iqa, c_iqa)
    rows = [
        {"seed": s, "gain": float(g)} for s, g in zip(seeds, stats.gains)
    ]
    _write_rows_csv(run / "eval" / "seeds.csv", ["seed", "gain"], rows)
    return {
        "mean_gain": stats.mean_gain,
        "positive_share": stats.positive_share,
        "sign_test_p": stats.p_value,
    }


def _eval_reference(config: RunConfig) -> dict:
    from scipy import stats as sp_stats

    from .adapter import INPUT_REFERENCE, reference_condition
    from .iqa import degradation_measure
    from .synthdata import DEGRADED_KINDS, DegradationSpec, SceneSpec, degrade, render_scene

    run, model, sched, attachment = _eval_context(config, need_adapter=True)
    if attachment.input_mode != INPUT_REFERENCE:
        raise ConfigurationError(
            "reference suite needs an adapter trained with input_mode=reference_embedding"
        )
    iqa_model, _, _ = _load_iqa_stage(run)
    strengths = (0.1, 0.3, 0.5, 0.7, 0.9)
    n = config.n_samples
    rows, per_kind = [], {}
    model.attach(attachment)
    try:
        for kind in DEGRADED_KINDS:
            xs, ys = [], []
            for s in strengths:
                refs = [
                    degrade(
                        render_scene(SceneSpec(i % 8, config.root_seed + 50 + i)),
                        DegradationSpec(kind, s),
                        np.random.default_rng(config.root_seed + i),
                    )
                    for i in range(n)
                ]
                conds = [reference_condition(iqa_model, r) for r in refs]
                seeds = [config.root_seed * 10000 + i for i in range(n)]
                imgs = _batched_sample(
                    model, sched, config, seeds, [i % 8 for i in range(n)], conds
                )
                measures = [degradation_measure(kind, img) for img in imgs]
                xs.extend([s] * n)
                ys.extend(measures)
                rows.append(
                    {
                        "kind": kind.value,
                        "strength": s,
                        "mean_measure": float(np.mean(measures)),
                        "n": n,
                    }
                )
            per_kind[kind.value] = float(sp_stats.spearmanr(xs, ys).statistic)
    finally:
        model.detach()
    _write_rows_csv(run / "eval" / "reference.csv", ["kind", "strength", "mean_measure", "n"], rows)
    return {"srocc_per_kind": per_kind}


def _eval_content(config: RunConfig) -> dict:
    from . import evalsuite as ev

    run, model, sched, _ = _eval_context(config, need_adapter=False)
    clf_path = run / "clf.qda"
    if clf_path.exists():
        clf = ev.load_classifier(clf_path)
    else:
        clf, acc = ev.train_content_classifier(rng=np.random.default_rng(config.root_seed))
        ev.save_classifier(clf_path, clf)
        _write_sidecar(clf_path, config, {"holdout_accuracy": acc})
    n = config.n_samples
    seeds = [config.root_seed * 10000 + i for i in range(n)]
    class_ids = np.array([i % 8 for i in range(n)])
    images = _batched_sample(model, sched, config, seeds, class_ids)
    preds = clf.predict(images)
    rows = [
        {"seed": seeds[i], "class_id": int(class_ids[i]), "predicted": int(preds[i])}
        for i in range(n)
    ]
    _write_rows_csv(run / "eval" / "content.csv", ["seed", "class_id", "predicted"], rows)
    return {"probe_accuracy": float((preds == class_ids).mean())}


def cmd_eval(config: RunConfig, suite: str, force: bool = False) -> dict:
    if suite not in EVAL_SUITES:
        raise ConfigurationError(f"unknown eval suite '{suite}'; choose from {EVAL_SUITES}")
    run = Path(config.output_dir)
    report_path = run / "eval" / f"{suite}.json"
    _refuse_overwrite(report_path, force)
    t0 = time.time()
    result = {
        "relgain": _eval_relgain,
        "percentile": _eval_percentile,
        "lambda": _eval_lambda,
        "reference": _eval_reference,
        "seeds": _eval_seeds,
        "content": _eval_content,
    }[suite](config)
    if any(not np.isfinite(v) for v in result.values() if isinstance(v, float)):
        raise NumericalError(f"eval suite '{suite}' produced non-finite statistics")
    report = {
        "format_version": cfgmod.FORMAT_VERSION,
        "suite": suite,
        "config": cfgmod.config_dict(config),
        "result": result,
        "seconds": round(time.time() - t0, 2),
    }
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# -- argument parsing --------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcdiff", description="quality-conditioned diffusion experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "build-data": "render the procedural training dataset",
        "train-iqa": "fit the learned quality regressor",
        "train-diffusion": "train the base denoiser",
        "train-adapter": "train the quality adapter on the frozen base",
        "sample": "generate images from the trained model",
        "eval": "run a measurement suite over trained artifacts",
    }
    for name, desc in commands.items():
        p = sub.add_parser(name, help=desc)
        if name == "eval":
            p.add_argument("suite", choices=EVAL_SUITES)
        p.add_argument("--config", help="config file (key=value sections)")
        p.add_argument("--force", action="store_true", help="overwrite a completed stage")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a single config field",
        )
        for f in dataclasses.fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar="V")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = cfgmod.load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    for f in dataclasses.fields(RunConfig):
        if hasattr(args, f.name):
            overrides.append(f"{f.name}={getattr(args, f.name)}")
    return cfgmod.apply_overrides(config, overrides)


def _apply_thread_cap():
    raw = os.environ.get("QDA_THREADS")
    if not raw:
        return None
    try:
        limit = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"QDA_THREADS must be an integer, got {raw!r}") from e
    try:
        import threadpoolctl

        return threadpoolctl.threadpool_limits(limit)
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", str(limit))
        return None


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        config = _config_from_args(args)
        if args.command == "build-data":
            result = cmd_build_data(config, args.force)
        elif args.command == "train-iqa":
            result = cmd_train_iqa(config, args.force)
        elif args.command == "train-diffusion":
            result = cmd_train_diffusion(config, args.force)
        elif args.command == "train-adapter":
            result = cmd_train_adapter(config, args.force)
        elif args.command == "sample":
            result = cmd_sample(config, args.force)
        else:
            result = cmd_eval(config, args.suite, args.force)
    except (ConfigurationError, ParameterError, ContractError, DegenerateDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, GuidanceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        for key, value in result.items():
            if key != "config":
                print(f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
