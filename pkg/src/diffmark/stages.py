"""Stage orchestration: each stage consumes declared artifacts, produces its
own directory under the experiment output root, and stamps a config hash so
reruns with identical inputs are skipped (use force=True to redo).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import attacks as atk
from . import report as report_mod
from .checkpoint import load_checkpoint, module_params, save_checkpoint
from .codec import (
    PretrainConfig,
    SecretDecoder,
    SecretEncoder,
    load_codec,
    pretrain,
    random_secrets,
    save_codec,
    secret_to_hex,
)
from .config import config_hash, latent_shape, train_config_from
from .data import generate_images, load_image_folder, load_png, save_image_folder, save_png
from .diffusion import (
    DenoiserTrainConfig,
    load_denoiser,
    save_denoiser,
    train_toy_denoiser,
)
from .errors import ConfigError, DependencyError, TrainingError
from .identify import (
    build_database,
    compute_threshold,
    identification_scaling,
    identify_batch,
    key_flexibility_report,
    metrics as id_metrics,
    save_keys,
)
from .lcm import ConsistencyModel, DistillConfig, distill_lcm
from .nets import SurrogateClassifier
from .pipeline import detect_bits, embed_batch, latency_bench, transfer_eval
from .schedule import NoiseSchedule
from .train import run_training
from .util import file_hash, fmt, make_generator, write_csv
from .vae import ToyVAE, VaeTrainConfig, roundtrip_psnr, train_toy_vae

STAGES = [
    "gen-data",
    "train-vae",
    "train-diffusion",
    "distill-lcm",
    "pretrain-codec",
    "train-watermark",
    "embed",
    "detect",
    "attack-sweep",
    "identify",
    "transfer",
    "report",
]

# stage -> artifact directory name under out_dir
_STAGE_DIRS = {
    "gen-data": "data",
    "train-vae": "vae",
    "train-diffusion": "diffusion",
    "distill-lcm": "lcm",
    "pretrain-codec": "codec-pretrain",
    "train-watermark": "watermark",
    "embed": "embedded",
    "detect": "detect",
    "attack-sweep": "attacks",
    "identify": "identify",
    "transfer": "transfer",
    "report": "report",
}
# artifact root -> producing stage, used for dependency errors
_PRODUCERS = {v: k for k, v in _STAGE_DIRS.items()}


def stage_dir(cfg: dict, stage: str) -> Path:
    return Path(cfg["out_dir"]) / _STAGE_DIRS[stage]


def _stamp(directory: Path, stage: str, cfg: dict) -> None:
    with open(directory / "stage.json", "w") as f:
        json.dump({"stage": stage, "config_hash": config_hash(cfg)}, f, sort_keys=True)


def _is_done(directory: Path, cfg: dict) -> bool:
    stamp = directory / "stage.json"
    if not stamp.exists():
        return False
    with open(stamp) as f:
        info = json.load(f)
    return info.get("config_hash") == config_hash(cfg)


def _require(cfg: dict, relpath: str) -> Path:
    path = Path(cfg["out_dir"]) / relpath
    if not path.exists():
        root = relpath.split("/")[0]
        raise DependencyError(_PRODUCERS.get(root, root), f"expected {path}")
    return path


def run_stage(cfg: dict, stage: str, force: bool = False) -> Path:
    """Execute one pipeline stage; returns its artifact directory."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; valid: {', '.join(STAGES)}")
    out = stage_dir(cfg, stage)
    if not force and _is_done(out, cfg):
        return out
    out.mkdir(parents=True, exist_ok=True)
    _RUNNERS[stage](cfg, out)
    _stamp(out, stage, cfg)
    return out


def run_all(cfg: dict, force: bool = False) -> None:
    for stage in STAGES:
        run_stage(cfg, stage, force=force)


# ---------------------------------------------------------------- stages


def _schedule(cfg: dict) -> NoiseSchedule:
    d = cfg["diffusion"]
    return NoiseSchedule(d["timesteps"], d["beta_start"], d["beta_end"])


def _stage_gen_data(cfg: dict, out: Path) -> None:
    d = cfg["data"]
    if d.get("source_folder"):
        images, labels = load_image_folder(d["source_folder"])
        save_image_folder(out, images, labels, cfg["seed"])
    else:
        images, labels = generate_images(d["n_images"], cfg["seed"], d["size"])
        save_image_folder(out, images, labels, cfg["seed"])


def _load_dataset(cfg: dict):
    data_dir = _require(cfg, "data")
    return load_image_folder(data_dir)


def _stage_train_vae(cfg: dict, out: Path) -> None:
    if cfg["vae"]["identity_mode"]:
        raise ConfigError("identity-mode VAE is a test facility, not a pipeline stage")
    images, labels = _load_dataset(cfg)
    v = cfg["vae"]
    vae, trace = train_toy_vae(
        images,
        VaeTrainConfig(steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                       kl_weight=v["kl_weight"], width=v["width"]),
        seed=cfg["seed"] + 11,
        latent_shape=latent_shape(cfg),
    )
    quality = roundtrip_psnr(vae, images[: min(len(images), 128)])
    if quality < v["psnr_floor"]:
        raise TrainingError(
            f"VAE round-trip PSNR {quality:.2f} below floor {v['psnr_floor']}", trace
        )
    vae.save(out, seeds={"vae": cfg["seed"] + 11})
    with torch.no_grad():
        lat = torch.cat(
            [vae.encode(images[i : i + 256]) for i in range(0, len(images), 256)]
        )
    np.save(out / "latents.npy", lat.numpy())
    np.save(out / "labels.npy", labels.numpy())
    with open(out / "quality.json", "w") as f:
        json.dump({"roundtrip_psnr": quality, "scale_factor": vae.scale_factor}, f)


def _load_vae(cfg: dict) -> ToyVAE:
    return ToyVAE.load(_require(cfg, "vae"))


def _load_latents(cfg: dict):
    vdir = _require(cfg, "vae/latents.npy").parent
    return (
        torch.from_numpy(np.load(vdir / "latents.npy")),
        torch.from_numpy(np.load(vdir / "labels.npy")),
    )


def _stage_train_diffusion(cfg: dict, out: Path) -> None:
    latents, labels = _load_latents(cfg)
    d = cfg["diffusion"]
    sched = _schedule(cfg)
    net, trace = train_toy_denoiser(
        latents,
        labels,
        sched,
        DenoiserTrainConfig(
            steps=d["train_steps"], batch_size=d["batch_size"], lr=d["lr"],
            p_uncond=d["p_uncond"], val_mse_threshold=d["val_mse_threshold"],
            base_width=d["base_width"],
        ),
        seed=cfg["seed"] + 23,
    )
    save_denoiser(out, net, sched, seeds={"diffusion": cfg["seed"] + 23})
    write_csv(out / "loss_trace.csv", ["step", "loss", "config_hash"],
              [[i, fmt(v), config_hash(cfg)] for i, v in enumerate(trace)])


def _stage_distill_lcm(cfg: dict, out: Path) -> None:
    teacher, sched = load_denoiser(_require(cfg, "diffusion"))
    latents, labels = _load_latents(cfg)
    c = cfg["lcm"]
    dcfg = DistillConfig(
        skipping_step=c["skipping_step"], omega_min=c["omega_min"],
        omega_max=c["omega_max"], distance_metric=c["distance_metric"],
        steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"],
        ema_rate=c["ema_rate"],
    )
    model, trace = distill_lcm(teacher, sched, latents, labels, dcfg, seed=cfg["seed"] + 37)
    teacher_hash = file_hash(Path(cfg["out_dir"]) / "diffusion" / "manifest.json")
    model.save(out, dcfg, teacher_hash=teacher_hash, seeds={"lcm": cfg["seed"] + 37})
    write_csv(out / "loss_trace.csv", ["step", "loss", "config_hash"],
              [[i, fmt(v), config_hash(cfg)] for i, v in enumerate(trace)])


def _stage_pretrain_codec(cfg: dict, out: Path) -> None:
    c = cfg["codec"]
    pcfg = PretrainConfig(
        secret_length=c["secret_length"], embed_dim=c["embed_dim"],
        latent_shape=latent_shape(cfg), max_steps=c["max_steps"],
        batch_size=c["batch_size"], lr_encoder=c["lr_encoder"],
        lr_decoder=c["lr_decoder"], sigma_start=c["sigma_start"],
        sigma_end=c["sigma_end"], w_clean=c["w_clean"], w_noisy=c["w_noisy"],
        w_orth=c["w_orth"],
    )
    enc = SecretEncoder(pcfg.secret_length, pcfg.embed_dim, pcfg.latent_shape)
    dec = SecretDecoder(pcfg.secret_length, pcfg.latent_shape)
    result = pretrain(enc, dec, pcfg, seed=cfg["seed"] + 41)
    save_codec(out, enc, dec, seeds={"pretrain": cfg["seed"] + 41},
               extra={"converged": result.converged, "steps_run": result.steps_run})
    with open(out / "pretrain.json", "w") as f:
        json.dump(
            {"converged": result.converged, "steps_run": result.steps_run,
             "final_clean_acc": result.final_clean_acc},
            f,
        )


def _stage_train_watermark(cfg: dict, out: Path) -> None:
    enc, dec = load_codec(_require(cfg, "codec-pretrain"))
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    lcm = ConsistencyModel.load(_require(cfg, "lcm"))
    vae = _load_vae(cfg)
    tcfg = train_config_from(cfg)
    run_training(
        enc, dec, denoiser, lcm, vae, sched, tcfg,
        seed=cfg["seed"] + 53, out_dir=str(out), config_hash=config_hash(cfg),
    )
    save_codec(out / "codec", enc, dec, seeds={"train": cfg["seed"] + 53})


def _load_trained_codec(cfg: dict):
    return load_codec(_require(cfg, "watermark/codec"))


def _stage_embed(cfg: dict, out: Path) -> None:
    enc, _ = _load_trained_codec(cfg)
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    vae = _load_vae(cfg)
    e = cfg["embed"]
    n = e["n_images"]
    g = make_generator(cfg["seed"] + 67)
    n_fixed = n // 4  # fixed-key subset mirrors the key-flexibility protocol
    fixed_key = random_secrets(1, enc.secret_length, g)[0]
    secrets = random_secrets(n, enc.secret_length, g)
    secrets[:n_fixed] = fixed_key
    labels = torch.randint(0, denoiser.num_classes, (n,), generator=g)
    rows = []
    for start in range(0, n, 32):
        stop = min(start + 32, n)
        images = embed_batch(
            secrets[start:stop], labels[start:stop], enc, denoiser, vae, sched,
            n_steps=e["n_steps"], guidance_scale=e["guidance_scale"],
            seed=cfg["seed"] + 71 + start, injection_policy=e["injection_policy"],
        )
        for i, img in enumerate(images):
            idx = start + i
            name = f"wm_{idx:05d}.png"
            save_png(out / name, img)
            rows.append(
                [name, secret_to_hex(secrets[idx]), int(labels[idx]),
                 "fixed" if idx < n_fixed else "random",
                 cfg["seed"] + 71 + start, config_hash(cfg)]
            )
    write_csv(out / "manifest.csv",
              ["filename", "secret_hex", "label", "set", "seed", "config_hash"], rows)


def _read_embed_manifest(cfg: dict):
    import csv as _csv

    path = _require(cfg, "embedded/manifest.csv")
    with open(path) as f:
        return list(_csv.DictReader(f))


def _stage_detect(cfg: dict, out: Path) -> None:
    from .codec import hex_to_secret

    entries = _read_embed_manifest(cfg)
    _, dec = _load_trained_codec(cfg)
    vae = _load_vae(cfg)
    embedded = Path(cfg["out_dir"]) / "embedded"
    length = dec.secret_length
    th = compute_threshold(length, cfg["detect"]["fpr"])
    rows = []
    decoded_all, truth_all = [], []
    for entry in entries:
        img = load_png(embedded / entry["filename"])
        truth = hex_to_secret(entry["secret_hex"], length)
        bits = detect_bits(img, dec, vae).reshape(-1)
        m = int((bits == truth).sum())
        rows.append(
            [entry["filename"], secret_to_hex(bits), fmt(float((bits != truth).float().mean())),
             m, int(m > th.tau), entry["set"], config_hash(cfg)]
        )
        decoded_all.append(bits.numpy())
        truth_all.append(truth.numpy())
    write_csv(out / "report.csv",
              ["filename", "decoded_hex", "ber", "matching_bits", "decision", "set",
               "config_hash"], rows)
    summary = id_metrics(np.stack(decoded_all), np.stack(truth_all), fpr=cfg["detect"]["fpr"])
    summary.pop("per_image_ber")
    images = torch.stack([load_png(embedded / e["filename"]) for e in entries[:64]])
    summary["latency"] = latency_bench(dec, vae, images[: min(len(images), 100)])
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)


def _surrogate_path(cfg: dict) -> Path:
    return Path(cfg["out_dir"]) / "attacks" / "surrogate"


def _load_or_train_surrogate(cfg: dict) -> SurrogateClassifier:
    path = _surrogate_path(cfg)
    if (path / "manifest.json").exists():
        ckpt = load_checkpoint(path)
        net = SurrogateClassifier(num_classes=int(ckpt.config["num_classes"]))
        state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()}
        net.load_state_dict(state)
        net.eval()
        return net
    images, labels = _load_dataset(cfg)
    net = atk.train_surrogate(images, labels, seed=cfg["seed"] + 83)
    save_checkpoint(path, "surrogate", module_params(net),
                    {"num_classes": int(labels.max()) + 1},
                    seeds={"surrogate": cfg["seed"] + 83})
    return net


def _stage_attack_sweep(cfg: dict, out: Path) -> None:
    enc, dec = _load_trained_codec(cfg)
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    vae = _load_vae(cfg)
    surrogate = _load_or_train_surrogate(cfg)
    a = cfg["attacks"]
    n = a["n_images"]
    g = make_generator(cfg["seed"] + 89)
    secrets = random_secrets(n, enc.secret_length, g)
    labels = torch.randint(0, denoiser.num_classes, (n,), generator=g)
    e = cfg["embed"]
    images = embed_batch(
        secrets, labels, enc, denoiser, vae, sched,
        n_steps=e["n_steps"], guidance_scale=e["guidance_scale"],
        seed=cfg["seed"] + 97, injection_policy=e["injection_policy"],
    )
    kinds = a["kinds"] or list(atk.ALL_KINDS)
    ctx = {"vae": vae, "denoiser": denoiser, "sched": sched, "surrogate": surrogate}
    rows = []
    for kind in kinds:
        for sev, strength in enumerate(atk.SWEEP_STRENGTHS[kind]):
            spec = atk.AttackSpec(kind, strength, seed=cfg["seed"] + 101 + sev)
            attacked = atk.apply_attack(images, spec, ctx)
            decoded = detect_bits(attacked, dec, vae)
            errs = (decoded != secrets).float().mean(dim=1)
            from .vae import psnr as psnr_fn

            rows.append(
                [kind, fmt(strength), sev, fmt(float(errs.mean())),
                 fmt(float(1 - errs.mean())), fmt(psnr_fn(attacked, images)),
                 config_hash(cfg)]
            )
    write_csv(out / "sweep.csv",
              ["kind", "strength", "severity", "ber", "bit_acc", "psnr", "config_hash"],
              rows)


def _stage_identify(cfg: dict, out: Path) -> None:
    ident = cfg["identify"]
    length = ident["secret_length"]
    rng = np.random.default_rng(cfg["seed"] + 103)
    real = rng.integers(0, 2, (ident["real_keys"], length), dtype=np.uint8)
    flips = rng.random((len(real), length)) < ident["flip_p"]
    decoded = real ^ flips.astype(np.uint8)
    save_keys(out / "keys.txt", real)
    rows = identification_scaling(
        real, decoded, np.arange(len(real)), ident["sizes"],
        trials=ident["trials"], seed=cfg["seed"] + 107,
    )
    with open(out / "summary.json", "w") as f:
        json.dump({"rows": rows, "flip_p": ident["flip_p"]}, f, indent=1)
    # per-query detail for the largest database, first trial
    n_max = max(ident["sizes"])
    db = build_database(real, n_max, seed=cfg["seed"] + 107 + n_max % 7919)
    idx, dist, ties, ranks = identify_batch(decoded, db, np.arange(len(real)))
    write_csv(out / "report.csv",
              ["query", "best_index", "best_distance", "tied", "rank", "config_hash"],
              [[i, int(idx[i]), int(dist[i]), int(ties[i] > 1), int(ranks[i]),
                config_hash(cfg)] for i in range(len(real))])
    # key-flexibility analytics from real detect artifacts when present
    detect_report = Path(cfg["out_dir"]) / "detect" / "report.csv"
    if detect_report.exists():
        flex = _flexibility_from_artifacts(cfg, detect_report)
        with open(out / "flexibility.json", "w") as f:
            json.dump(flex, f, indent=1, sort_keys=True)


def _flexibility_from_artifacts(cfg: dict, detect_report: Path) -> dict:
    import csv as _csv

    from .codec import hex_to_secret

    entries = _read_embed_manifest(cfg)
    with open(detect_report) as f:
        bers = {row["filename"]: float(row["ber"]) for row in _csv.DictReader(f)}
    length = cfg["codec"]["secret_length"]
    fixed_bers, random_bers, keys = [], [], []
    training_key = hex_to_secret(entries[0]["secret_hex"], length).numpy()
    for e in entries:
        if e["filename"] not in bers:
            continue
        if e["set"] == "fixed":
            fixed_bers.append(bers[e["filename"]])
        else:
            random_bers.append(bers[e["filename"]])
            keys.append(hex_to_secret(e["secret_hex"], length).numpy())
    return key_flexibility_report(fixed_bers, random_bers, np.stack(keys), training_key)


def _stage_transfer(cfg: dict, out: Path) -> None:
    enc, dec = _load_trained_codec(cfg)
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    vae = _load_vae(cfg)
    latents, labels = _load_latents(cfg)
    t = cfg["transfer"]
    d = cfg["diffusion"]
    targets = {"training_model": denoiser}
    specs = {"seed_b": (32, 101), "seed_c": (32, 202), "wide": (48, 303)}
    for name in t["targets"]:
        width, seed_off = specs[name]
        model_dir = out / "models" / name
        if (model_dir / "manifest.json").exists():
            net, _ = load_denoiser(model_dir)
        else:
            net, _ = train_toy_denoiser(
                latents, labels, sched,
                DenoiserTrainConfig(
                    steps=t["target_steps"], batch_size=d["batch_size"], lr=d["lr"],
                    p_uncond=d["p_uncond"], val_mse_threshold=d["val_mse_threshold"],
                    base_width=width,
                ),
                seed=cfg["seed"] + seed_off,
            )
            save_denoiser(model_dir, net, sched, seeds={name: cfg["seed"] + seed_off})
        targets[name] = net
    rows = transfer_eval(
        enc, dec, vae, sched, targets,
        n_images=t["n_images"], n_steps=cfg["embed"]["n_steps"],
        guidance_scale=cfg["embed"]["guidance_scale"], seed=cfg["seed"] + 307,
    )
    write_csv(out / "accuracy.csv", ["model", "bit_acc", "n_images", "config_hash"],
              [[r["model"], fmt(r["bit_acc"]), r["n_images"], config_hash(cfg)] for r in rows])
    if t["attack_eval"]:
        _transfer_attack_eval(cfg, out, targets, enc, dec, vae, sched)


def _transfer_attack_eval(cfg, out, targets, enc, dec, vae, sched) -> None:
    probes = [
        ("bright", 2.0), ("contrast", 2.0), ("noise", 0.1), ("jpeg", 10.0),
        ("rotation", 45.0), ("rcrop", 0.5),
    ]
    n = min(cfg["transfer"]["n_images"], 32)
    g = make_generator(cfg["seed"] + 311)
    secrets = random_secrets(n, enc.secret_length, g)
    length = enc.secret_length
    th = compute_threshold(length, cfg["detect"]["fpr"])
    rows = []
    for name, model in targets.items():
        labels = torch.randint(0, model.num_classes, (n,), generator=make_generator(cfg["seed"] + 313))
        images = embed_batch(
            secrets, labels, enc, model, vae, sched,
            n_steps=cfg["embed"]["n_steps"],
            guidance_scale=cfg["embed"]["guidance_scale"], seed=cfg["seed"] + 317,
        )
        for kind, strength in probes:
            attacked = atk.apply_distortion(images, atk.AttackSpec(kind, strength, seed=1))
            decoded = detect_bits(attacked, dec, vae)
            matches = length - (decoded != secrets).sum(dim=1)
            tpr = float((matches > th.tau).float().mean())
            berr = float((decoded != secrets).float().mean())
            rows.append([name, kind, fmt(strength), fmt(berr), fmt(tpr), config_hash(cfg)])
    write_csv(out / "attacks.csv",
              ["model", "kind", "strength", "ber", "tpr", "config_hash"], rows)


def _stage_report(cfg: dict, out: Path) -> None:
    enc, dec = _load_trained_codec(cfg)
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    vae = _load_vae(cfg)
    report_mod.signal_analysis(
        enc, denoiser, vae, sched, out,
        n_examples=cfg["report"]["n_examples"],
        amplify=cfg["report"]["amplify"],
        freq_radius=cfg["train"]["freq_radius"],
        n_steps=cfg["embed"]["n_steps"],
        guidance_scale=cfg["embed"]["guidance_scale"],
        seed=cfg["seed"] + 401,
        cfg_hash=config_hash(cfg),
    )


def ab_injection_experiment(cfg: dict, out_file=None) -> list[dict]:
    """Embed+detect bit accuracy comparison across injection policies."""
    enc, dec = _load_trained_codec(cfg)
    denoiser, sched = load_denoiser(_require(cfg, "diffusion"))
    vae = _load_vae(cfg)
    e = cfg["embed"]
    n = min(e["n_images"], 64)
    g = make_generator(cfg["seed"] + 409)
    secrets = random_secrets(n, enc.secret_length, g)
    labels = torch.randint(0, denoiser.num_classes, (n,), generator=g)
    rows = []
    for policy in ("full", "one_over_N"):
        images = embed_batch(
            secrets, labels, enc, denoiser, vae, sched,
            n_steps=e["n_steps"], guidance_scale=e["guidance_scale"],
            seed=cfg["seed"] + 419, injection_policy=policy,
        )
        decoded = detect_bits(images, dec, vae)
        rows.append(
            {"policy": policy, "bit_acc": float((decoded == secrets).float().mean())}
        )
    if out_file is not None:
        write_csv(out_file, ["policy", "bit_acc", "config_hash"],
                  [[r["policy"], fmt(r["bit_acc"]), config_hash(cfg)] for r in rows])
    return rows


_RUNNERS = {
    "gen-data": _stage_gen_data,
    "train-vae": _stage_train_vae,
    "train-diffusion": _stage_train_diffusion,
    "distill-lcm": _stage_distill_lcm,
    "pretrain-codec": _stage_pretrain_codec,
    "train-watermark": _stage_train_watermark,
    "embed": _stage_embed,
    "detect": _stage_detect,
    "attack-sweep": _stage_attack_sweep,
    "identify": _stage_identify,
    "transfer": _stage_transfer,
    "report": _stage_report,
}
