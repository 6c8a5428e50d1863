"""Trained-artifact store for the acceptance battery.

Training the full pipeline is far too slow to repeat on every pytest run,
so each artifact (dataset, quality regressor, base denoiser, adapters,
content classifier) is built once through the same code paths the CLI uses
and cached under tests/.cache/run.  Derived measurement arrays from the
sampling-heavy criteria are cached alongside as .npz files keyed by name.

Delete tests/.cache to force a full rebuild.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from qcdiff import cli
from qcdiff import rng as qrng
from qcdiff.config import RunConfig

CACHE = Path(__file__).parent / ".cache"
RUN = CACHE / "run"
ROOT_SEED = 101

# One config governs every cached artifact; changing it invalidates the cache
# (the config echo is compared against the stored sidecars).
ACCEPT_CONFIG = RunConfig(
    root_seed=ROOT_SEED,
    output_dir=str(RUN),
    n_records=4000,
    degrade_fraction=0.85,
    iqa_epochs=60,
    iqa_lr=5e-3,
    train_steps=5500,
    batch_size=16,
    lr=2e-3,
    dropout_prob=0.1,
    adapter_steps=2500,
    adapter_batch_size=16,
    adapter_lr=3e-4,
    g=3.0,  # strong CFG oversaturates 32x32 outputs and hurts the class probe
    sample_steps=35,
)


def _stage_current(artifact: Path) -> bool:
    """True when the artifact exists and was built from ACCEPT_CONFIG."""
    sidecar = artifact.with_suffix(".json")
    if not artifact.exists() or not sidecar.exists():
        return False
    import qcdiff.config as cfgmod

    stored = json.loads(sidecar.read_text()).get("config", {})
    return stored == cfgmod.config_dict(ACCEPT_CONFIG)


def ensure_dataset():
    if not _stage_current(RUN / "dataset.npz"):
        cli.cmd_build_data(ACCEPT_CONFIG, force=True)
    return cli._load_records(RUN)


def ensure_iqa():
    ensure_dataset()
    if not _stage_current(RUN / "iqa.qda"):
        cli.cmd_train_iqa(ACCEPT_CONFIG, force=True)
    return cli._load_iqa_stage(RUN)


def ensure_unet():
    from qcdiff.unet import load_denoiser

    ensure_dataset()
    if not _stage_current(RUN / "unet.qda"):
        cli.cmd_train_diffusion(ACCEPT_CONFIG, force=True)
    return load_denoiser(RUN / "unet.qda")


def unet_sidecar() -> dict:
    ensure_unet()
    return json.loads((RUN / "unet.json").read_text())


def ensure_classifier():
    from qcdiff import evalsuite as ev

    path = RUN / "clf.qda"
    if not _stage_current(path):
        RUN.mkdir(parents=True, exist_ok=True)
        clf, acc = ev.train_content_classifier(rng=np.random.default_rng(ROOT_SEED))
        ev.save_classifier(path, clf)
        cli._write_sidecar(path, ACCEPT_CONFIG, {"holdout_accuracy": acc})
    return ev.load_classifier(path)


_ADAPTER_SETTINGS = {
    "separate": dict(variant="separate_attention", input_mode="raw_scores"),
    "concat": dict(variant="concat_ablation", input_mode="raw_scores"),
    "reference": dict(variant="separate_attention", input_mode="reference_embedding"),
}


def ensure_adapter(kind: str):
    """Train (or load) one of the three adapter variants used in acceptance."""
    from qcdiff.adapter import load_adapter, save_adapter
    from qcdiff.diffusion import train_adapter

    settings = _ADAPTER_SETTINGS[kind]
    path = RUN / f"adapter_{kind}.qda"
    if not _stage_current(path):
        records = ensure_dataset()
        model = ensure_unet()
        iqa_model, std, raw_scores = ensure_iqa()
        config = dataclasses.replace(ACCEPT_CONFIG, **settings)
        rng = qrng.stream(ROOT_SEED, f"train-adapter:{kind}")
        inputs, alt_inputs = cli._quality_inputs(
            config, iqa_model, std, raw_scores, records, rng
        )
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
        attachment = dataclasses.replace(attachment, lam=cli._inference_lam(config))
        save_adapter(path, attachment)
        dec = max(1, len(losses) // 10)
        cli._write_sidecar(
            path,
            ACCEPT_CONFIG,
            {
                "kind": kind,
                "last_decile_median_loss": float(np.median(losses[-dec:])),
            },
        )
    return load_adapter(path)


def cached_arrays(name: str, builder) -> dict[str, np.ndarray]:
    """Memoize a dict of measurement arrays produced by `builder()`."""
    path = CACHE / f"{name}.npz"
    if path.exists():
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    arrays = builder()
    CACHE.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)
    return arrays
