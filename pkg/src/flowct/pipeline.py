"""End-to-end runs: corpus synthesis, training, sampling, evaluation.

Everything lands under one output root.  Each step writes its artifacts
plus JSON sidecars, so later steps, the release gates and the CLI all
find inputs by convention instead of threading objects around:

    root/config.json            echoed effective configuration
    root/corpus/                vol_NNN.nii, seg_NNN.nii, corpus.json
    root/checkpoints/           codec.fckp, ldm*.fckp, controlnet*.fckp
    root/samples/               generated volumes
    root/logs/train_log.jsonl   per-step training records
    root/metrics.json           deterministic numbers (losses, FID, ratios)
    root/timing.json            wall-clock measurements
    root/gates.json             per-gate verdicts
    root/summary.json           overall verdict and exit code
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import gates
from .autodiff import Tensor
from .codec import Codec, CodecConfig, Latent, recon_l1, train_codec
from .config import capacity_table_from_config, echo_config
from .contrastive import ContrastConfig, LabelSubstitution, build_perturbed_mask
from .fid import FeatureExtractor, fid_report
from .flow import SamplerConfig, sample
from .networks import (Conditioning, ControlEncoder, VelocityNet, control_forward,
                       labelmap_to_latent_onehot)
from .nifti import read_nifti, snap_shape, write_nifti
from .phantoms import DEFAULT_LABELS, default_phantom_spec, dilate_mask, generate_phantom
from .quality import calibrate_thresholds, check
from .training import LossWeights, StageConfig, train_controlnet, train_ldm


class PipelineError(Exception):
    pass


def resolve_paths(cfg: dict, out_root=None) -> dict:
    """Map the config path section onto a concrete output root."""
    root = str(out_root) if out_root is not None else cfg["paths"]["output_dir"]

    def under(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    return {
        "root": root,
        "corpus": under(cfg["paths"]["corpus_dir"]),
        "checkpoints": under(cfg["paths"]["checkpoint_dir"]),
        "samples": os.path.join(root, "samples"),
        "logs": os.path.join(root, "logs"),
    }


def _ensure_dirs(paths: dict) -> None:
    for key in ("root", "corpus", "checkpoints", "samples", "logs"):
        os.makedirs(paths[key], exist_ok=True)


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _info(log, msg: str) -> None:
    if log is not None:
        log(msg)


# ---------------------------------------------------------------------------
# corpus

def generate_corpus(cfg: dict, paths: dict, log=None) -> list:
    """Synthesize the phantom corpus and write it as NIfTI pairs + manifest.

    Shapes and spacings cycle through the configured lists; lesions are
    spread evenly at the configured fraction.  Lesion placement lands on
    the smaller shapes first because even indices map to shapes[0].
    """
    data = cfg["data"]
    base = int(data["snap_base"])
    n = int(data["n_volumes"])
    if n < 2:
        raise PipelineError(f"corpus needs at least 2 volumes, got {n}")
    frac = float(data["lesion_fraction"])
    entries = []
    vocabulary = None
    for i in range(n):
        shape = snap_shape(data["shapes"][i % len(data["shapes"])], base)
        spacing = tuple(float(s) for s in data["spacings"][i % len(data["spacings"])])
        has_lesion = int((i + 1) * frac) > int(i * frac)
        phantom_seed = int(cfg["seed"]) * 1000 + i
        spec = default_phantom_spec(shape=shape, spacing=spacing, seed=phantom_seed,
                                    with_lesion=has_lesion)
        volume, labelmap = generate_phantom(spec)
        vol_name = f"vol_{i:03d}.nii"
        seg_name = f"seg_{i:03d}.nii"
        write_nifti(volume, os.path.join(paths["corpus"], vol_name))
        write_nifti(labelmap, os.path.join(paths["corpus"], seg_name))
        if vocabulary is None:
            vocabulary = {str(k): v for k, v in labelmap.vocabulary.items()}
        entries.append({"index": i, "volume": vol_name, "labels": seg_name,
                        "shape": list(shape), "spacing": list(spacing),
                        "seed": phantom_seed, "has_lesion": bool(has_lesion)})
    manifest = {"version": 1, "entries": entries, "vocabulary": vocabulary}
    _write_json(os.path.join(paths["corpus"], "corpus.json"), manifest)
    _info(log, f"corpus: wrote {n} volume/label pairs to {paths['corpus']}")
    return entries


def load_corpus(paths: dict) -> list:
    """Read the manifest back into (volume, labelmap, entry) records."""
    manifest_path = os.path.join(paths["corpus"], "corpus.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise PipelineError(f"missing corpus manifest {manifest_path}; "
                            f"run gen-phantoms first ({exc})") from exc
    vocab = {int(k): v for k, v in (manifest.get("vocabulary") or {}).items()}
    records = []
    for entry in manifest["entries"]:
        volume = read_nifti(os.path.join(paths["corpus"], entry["volume"]))
        labelmap = read_nifti(os.path.join(paths["corpus"], entry["labels"]), as_labels=True)
        labelmap.vocabulary.update(vocab)
        records.append({"volume": volume, "labelmap": labelmap, "entry": entry})
    return records


# ---------------------------------------------------------------------------
# training steps

def run_train_codec(cfg: dict, paths: dict, log=None, train_log: list | None = None):
    records = load_corpus(paths)
    volumes = [r["volume"] for r in records]
    ccfg = CodecConfig(spatial_factor=int(cfg["codec"]["spatial_factor"]),
                       channels=int(cfg["codec"]["channels"]),
                       hidden=tuple(int(h) for h in cfg["codec"]["hidden"]),
                       epochs=int(cfg["codec"]["epochs"]),
                       lr=float(cfg["codec"]["lr"]),
                       seed=int(cfg["seed"]))
    codec = train_codec(volumes, ccfg, log=train_log)
    path = os.path.join(paths["checkpoints"], "codec.fckp")
    codec.save(path)
    final = recon_l1(codec, volumes)
    _info(log, f"codec: trained {ccfg.epochs} epochs, recon L1 {final:.4f}, saved {path}")
    return codec, {"recon_l1": final, "epochs": ccfg.epochs}


def _load_codec(paths: dict) -> Codec:
    path = os.path.join(paths["checkpoints"], "codec.fckp")
    if not os.path.exists(path):
        raise PipelineError(f"missing codec checkpoint {path}; run train-codec first")
    return Codec.load(path)


def _stage_configs(cfg: dict) -> list:
    return [StageConfig(stage=s["stage"], epochs=int(s["epochs"]), lr=float(s["lr"]),
                        power=float(s.get("power", 1.0))) for s in cfg["trainer"]["stages"]]


def run_train_ldm(cfg: dict, paths: dict, log=None, train_log: list | None = None):
    codec = _load_codec(paths)
    records = load_corpus(paths)
    volumes = [r["volume"] for r in records]
    net = VelocityNet(levels=int(cfg["model"]["levels"]),
                      base_channels=int(cfg["model"]["base_channels"]),
                      in_channels=int(cfg["codec"]["channels"]),
                      d_t=int(cfg["model"]["d_t"]), d_s=int(cfg["model"]["d_s"]),
                      seed=int(cfg["seed"]))
    net = train_ldm(volumes, _stage_configs(cfg), codec,
                    capacity_table=capacity_table_from_config(cfg), net=net,
                    seed=int(cfg["seed"]), workers=int(cfg["workers"]),
                    out_dir=paths["checkpoints"], log=train_log)
    net.freeze()
    path = os.path.join(paths["checkpoints"], "ldm.fckp")
    net.save(path, {"role": "velocity"})
    _info(log, f"ldm: trained {len(cfg['trainer']['stages'])} stages, saved {path}")
    return net


def _load_ldm(paths: dict) -> VelocityNet:
    path = os.path.join(paths["checkpoints"], "ldm.fckp")
    if not os.path.exists(path):
        raise PipelineError(f"missing velocity checkpoint {path}; run train-ldm first")
    net = VelocityNet.load(path)
    net.freeze()
    return net


def _control_samples(cfg: dict, records: list) -> list:
    sub = LabelSubstitution({DEFAULT_LABELS["lesion"]: DEFAULT_LABELS["liver"]})
    samples = []
    for r in records:
        samples.append({"volume": r["volume"], "labelmap": r["labelmap"],
                        "substitution": sub if r["entry"]["has_lesion"] else None})
    return samples


def run_train_controlnet(cfg: dict, paths: dict, use_contrastive: bool = True,
                         tag: str = "controlnet", log=None, train_log: list | None = None):
    codec = _load_codec(paths)
    base = _load_ldm(paths)
    records = load_corpus(paths)
    tcfg = cfg["trainer"]["controlnet"]
    ctrl = train_controlnet(base, _control_samples(cfg, records), codec,
                            contrast_config(cfg), LossWeights(float(tcfg["roi_weight"])),
                            epochs=int(tcfg["epochs"]), lr=float(tcfg["lr"]),
                            seed=int(cfg["seed"]), vocab_size=int(cfg["model"]["vocab_size"]),
                            use_contrastive=use_contrastive, log=train_log)
    path = os.path.join(paths["checkpoints"], f"{tag}.fckp")
    ctrl.save(path, {"use_contrastive": use_contrastive})
    _info(log, f"{tag}: trained {tcfg['epochs']} epochs "
               f"(contrastive={'on' if use_contrastive else 'off'}), saved {path}")
    return ctrl


def contrast_config(cfg: dict) -> ContrastConfig:
    c = cfg["contrast"]
    return ContrastConfig(delta=float(c["delta"]), dilation_radius=int(c["dilation_radius"]),
                          mode=str(c["mode"]), auto_voxel_threshold=int(c["auto_voxel_threshold"]),
                          lambda_early=float(c["lambda_early"]), lambda_late=float(c["lambda_late"]))


# ---------------------------------------------------------------------------
# sampling

def _velocity_closure(net: VelocityNet, spacing, ctrl: ControlEncoder | None = None, mask=None):
    if ctrl is None:
        def vf(x, t, c):
            return net.forward(Tensor(x), Conditioning(t=t, spacing=spacing)).data
    else:
        def vf(x, t, c):
            return control_forward(net, ctrl, Tensor(x),
                                   Conditioning(t=t, spacing=spacing, mask=mask)).data
    return vf


def sample_volume(codec: Codec, net: VelocityNet, shape, spacing, steps: int, seed,
                  ctrl: ControlEncoder | None = None, mask=None, x0=None):
    """Draw one volume: integrate the latent ODE, then decode."""
    f = codec.config.spatial_factor
    if any(e % f for e in shape):
        raise PipelineError(f"sample shape {tuple(shape)} not divisible by codec factor {f}")
    lat_shape = (codec.config.channels,) + tuple(int(e) // f for e in shape)
    config = SamplerConfig(steps=int(steps), seed=seed, shape=lat_shape)
    z = sample(_velocity_closure(net, spacing, ctrl, mask), None, config, x0=x0)
    return codec.decode(Latent(grid=z, spacing=tuple(spacing)))


def run_sample(cfg: dict, paths: dict, steps: int | None = None, count: int | None = None,
               seed: int | None = None, conditional: bool = False, log=None) -> list:
    """Generate volumes and write them under samples/; returns written paths."""
    codec = _load_codec(paths)
    net = _load_ldm(paths)
    steps = int(cfg["sample"]["steps"]) if steps is None else int(steps)
    if steps < 1:
        raise PipelineError(f"sample steps must be >= 1, got {steps}")
    count = int(cfg["sample"]["count"]) if count is None else int(count)
    seed = int(cfg["seed"]) if seed is None else int(seed)
    records = load_corpus(paths)
    ctrl = None
    if conditional:
        path = os.path.join(paths["checkpoints"], "controlnet.fckp")
        if not os.path.exists(path):
            raise PipelineError(f"missing control checkpoint {path}; run train-controlnet first")
        ctrl = ControlEncoder.load(path, net)
    written = []
    f = codec.config.spatial_factor
    vocab = int(cfg["model"]["vocab_size"])
    for i in range(count):
        r = records[i % len(records)]
        shape = r["volume"].shape
        spacing = r["volume"].spacing
        mask = None
        if conditional:
            mask = labelmap_to_latent_onehot(r["labelmap"], f, vocab)
        vol = sample_volume(codec, net, shape, spacing, steps, [seed, 300, i],
                            ctrl=ctrl, mask=mask)
        name = f"{'cond' if conditional else 'uncond'}_{i:03d}.nii"
        out_path = os.path.join(paths["samples"], name)
        write_nifti(vol, out_path)
        written.append(out_path)
    _info(log, f"sample: wrote {len(written)} volumes ({steps} steps, "
               f"{'conditional' if conditional else 'unconditional'})")
    return written


# ---------------------------------------------------------------------------
# evaluation

def run_quality(cfg: dict, paths: dict, log=None) -> dict:
    """Calibrate thresholds on the corpus and re-check every corpus member."""
    records = load_corpus(paths)
    pairs = [(r["volume"], r["labelmap"]) for r in records]
    thresholds = calibrate_thresholds(pairs, cfg["quality"]["tracked_labels"],
                                      min_voxels=int(cfg["quality"]["min_voxels"]))
    verdicts = [check(v, lm, thresholds) for v, lm in pairs]
    n_pass = sum(1 for v in verdicts if v.passed)
    report = {
        "thresholds": {str(k): list(v) for k, v in thresholds.bounds.items()},
        "n_checked": len(verdicts),
        "n_passed": n_pass,
        "pass_fraction": n_pass / len(verdicts),
        "failures": [{"index": i, "organs": v.failures} for i, v in enumerate(verdicts)
                     if not v.passed],
    }
    _write_json(os.path.join(paths["root"], "quality.json"), report)
    _info(log, f"quality: {n_pass}/{len(verdicts)} corpus volumes inside calibrated bounds")
    return report


def _fid_extractor(cfg: dict, paths: dict) -> FeatureExtractor:
    f = cfg["fid"]
    if f["extractor"] == "trained_probe":
        return FeatureExtractor("trained_probe",
                                checkpoint=os.path.join(paths["checkpoints"], "feature_probe.fckp"))
    return FeatureExtractor("random_conv", seed=int(f["extractor_seed"]),
                            dim=int(f["feature_dim"]))


def run_fid(cfg: dict, paths: dict, synth_dir=None, log=None) -> dict:
    """Three-plane FID of generated volumes against the corpus."""
    records = load_corpus(paths)
    real = [r["volume"] for r in records]
    synth_dir = synth_dir or paths["samples"]
    names = sorted(n for n in os.listdir(synth_dir) if n.endswith(".nii"))
    if not names:
        raise PipelineError(f"no .nii volumes under {synth_dir}; run sample first")
    synth = [read_nifti(os.path.join(synth_dir, n)) for n in names]
    extractor = _fid_extractor(cfg, paths)
    report = fid_report(real, synth, extractor, fraction=float(cfg["fid"]["fraction"]))
    report["n_real"] = len(real)
    report["n_synth"] = len(synth)
    _write_json(os.path.join(paths["root"], "fid.json"), report)
    _info(log, f"fid: avg {report['fid_avg']:.4f} over {len(synth)} generated volumes")
    return report


def _fid_step_pairs(cfg, paths, codec, net, records, extractor, n_runs: int = 5, log=None):
    """Paired FID at 5 vs 30 sampler steps across seeded runs (same noise)."""
    real = [r["volume"] for r in records]
    count = int(cfg["sample"]["count"])
    seed = int(cfg["seed"])
    frac = float(cfg["fid"]["fraction"])
    pairs = []
    keep_30 = None
    for run in range(n_runs):
        synth = {5: [], 30: []}
        for i in range(count):
            r = records[i % len(records)]
            shape = r["volume"].shape
            spacing = r["volume"].spacing
            f = codec.config.spatial_factor
            lat_shape = (codec.config.channels,) + tuple(e // f for e in shape)
            x0 = np.random.default_rng([seed, 500, run, i]).standard_normal(lat_shape).astype(np.float32)
            for steps in (5, 30):
                vol = sample_volume(codec, net, shape, spacing, steps, 0, x0=x0)
                synth[steps].append(vol)
        fid5 = fid_report(real, synth[5], extractor, fraction=frac)
        fid30 = fid_report(real, synth[30], extractor, fraction=frac)
        pairs.append({"run": run, "fid_avg_5": fid5["fid_avg"], "fid_avg_30": fid30["fid_avg"]})
        _info(log, f"fid trend run {run}: 5 steps {fid5['fid_avg']:.4f}, "
                   f"30 steps {fid30['fid_avg']:.4f}")
        if run == 0:
            keep_30 = synth[30]
    return pairs, keep_30


def _roi_separation(cfg, paths, codec, net, ctrl, records, n_fixtures: int = 6,
                    keep_dir=None, log=None, tag: str = ""):
    """Decoded HU difference inside the lesion ROI vs outside its dilation.

    Paired conditional draws share the starting noise; only the mask
    differs (lesion present vs substituted by its host organ).
    """
    f = codec.config.spatial_factor
    vocab = int(cfg["model"]["vocab_size"])
    steps = int(cfg["sample"]["steps"])
    r_vox = int(cfg["contrast"]["dilation_radius"]) * f
    sub = LabelSubstitution({DEFAULT_LABELS["lesion"]: DEFAULT_LABELS["liver"]})
    fixtures = [r for r in records if r["entry"]["has_lesion"]][:n_fixtures]
    if not fixtures:
        raise PipelineError("no lesion-bearing corpus entries for ROI separation")
    ratios = []
    for k, r in enumerate(fixtures):
        lm = r["labelmap"]
        shape = r["volume"].shape
        spacing = r["volume"].spacing
        pert, m_vox = build_perturbed_mask(lm, sub)
        onehot_orig = labelmap_to_latent_onehot(lm, f, vocab)
        onehot_pert = labelmap_to_latent_onehot(pert, f, vocab)
        lat_shape = (codec.config.channels,) + tuple(e // f for e in shape)
        x0 = np.random.default_rng([int(cfg["seed"]), 600, k]).standard_normal(lat_shape).astype(np.float32)
        vol_o = sample_volume(codec, net, shape, spacing, steps, 0, ctrl=ctrl,
                              mask=onehot_orig, x0=x0)
        vol_p = sample_volume(codec, net, shape, spacing, steps, 0, ctrl=ctrl,
                              mask=onehot_pert, x0=x0)
        diff = np.abs(vol_o.grid.astype(np.float64) - vol_p.grid.astype(np.float64))
        roi = m_vox.grid > 0
        outside = ~dilate_mask(roi, r_vox)
        inside_mean = float(diff[roi].mean()) if roi.any() else 0.0
        outside_mean = float(diff[outside].mean()) if outside.any() else 0.0
        ratios.append(inside_mean / max(outside_mean, 1e-6))
        if keep_dir is not None and k == 0:
            write_nifti(vol_o, os.path.join(keep_dir, f"cond{tag}_orig.nii"))
            write_nifti(vol_p, os.path.join(keep_dir, f"cond{tag}_pert.nii"))
        _info(log, f"roi separation{tag} fixture {k}: inside {inside_mean:.2f} HU, "
                   f"outside {outside_mean:.2f} HU")
    return float(np.mean(ratios)), ratios


# ---------------------------------------------------------------------------
# the full run

def reproduce_all(cfg: dict, out_root=None, log=print) -> tuple:
    """Train, sample and evaluate everything, then run all release gates.

    Returns (exit_code, summary): 0 when every gate passes, 3 otherwise.
    """
    t_start = time.perf_counter()
    paths = resolve_paths(cfg, out_root)
    _ensure_dirs(paths)
    echo_config(cfg, os.path.join(paths["root"], "config.json"))
    timing: dict = {}
    metrics: dict = {}
    train_log: list = []

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timing[name] = time.perf_counter() - t0
        return out

    generate_corpus(cfg, paths, log=log)
    records = load_corpus(paths)

    codec, codec_metrics = timed("train_codec", run_train_codec, cfg, paths, log=log,
                                 train_log=train_log)
    metrics["codec"] = codec_metrics
    codec_hash = codec.hash()

    net = timed("train_ldm", run_train_ldm, cfg, paths, log=log, train_log=train_log)
    base_hash = net.hash()

    ctrl = timed("train_controlnet", run_train_controlnet, cfg, paths, True, "controlnet",
                 log=log, train_log=train_log)
    ctrl_base = timed("train_controlnet_baseline", run_train_controlnet, cfg, paths, False,
                      "controlnet_baseline", log=log, train_log=train_log)

    with open(os.path.join(paths["logs"], "train_log.jsonl"), "w") as fh:
        for rec in train_log:
            fh.write(json.dumps(rec) + "\n")

    # quality over the calibration corpus
    quality = timed("quality", run_quality, cfg, paths, log=log)
    metrics["quality"] = {k: quality[k] for k in ("n_checked", "n_passed", "pass_fraction")}

    # FID step trend and the retained unconditional samples
    extractor = _fid_extractor(cfg, paths)
    t0 = time.perf_counter()
    fid_pairs, synth_30 = _fid_step_pairs(cfg, paths, codec, net, records, extractor, log=log)
    timing["fid_step_trend"] = time.perf_counter() - t0
    metrics["fid_trend"] = fid_pairs
    for i, vol in enumerate(synth_30[: int(cfg["sample"]["count"])]):
        write_nifti(vol, os.path.join(paths["samples"], f"uncond_{i:03d}.nii"))
    fid_final = timed("fid_eval", run_fid, cfg, paths, log=log)
    metrics["fid_eval"] = {k: fid_final[k] for k in ("fid_xy", "fid_yz", "fid_xz", "fid_avg")}

    # ROI separation, contrastive vs baseline
    t0 = time.perf_counter()
    ratio_c, ratios_c = _roi_separation(cfg, paths, codec, net, ctrl, records,
                                        keep_dir=paths["samples"], log=log, tag="")
    ratio_b, ratios_b = _roi_separation(cfg, paths, codec, net, ctrl_base, records,
                                        log=log, tag="_baseline")
    timing["roi_separation"] = time.perf_counter() - t0
    metrics["roi_ratio"] = {"contrastive": ratio_c, "baseline": ratio_b,
                            "per_fixture_contrastive": ratios_c, "per_fixture_baseline": ratios_b}

    # frozen-parameter stability and schedule evidence for the trainer gate
    lam_by_epoch: dict = {}
    for rec in train_log:
        if rec.get("module") == "controlnet" and "lambda" in rec:
            lam_by_epoch.setdefault(rec["epoch"], rec["lambda"])
    artifacts = {
        "codec_hash_stable": codec.hash() == codec_hash,
        "base_hash_stable": net.hash() == base_hash,
        "lambda_log": [lam_by_epoch[e] for e in sorted(lam_by_epoch)],
    }

    # release gates
    gate_results = {}
    gate_results["gate_2"] = gates.gate_2_flow_exactness()
    gate_results["gate_3"] = gates.gate_3_step_trend(fid_pairs)
    gate_results["gate_4"] = timed("gate_4", gates.gate_4_timing, net)
    gate_results["gate_5"] = timed("gate_5", gates.gate_5_contrastive_semantics)
    gate_results["gate_6"] = gates.gate_6_roi_ratio(ratio_c, ratio_b)
    gate_results["gate_7"] = gates.gate_7_quality(
        [(r["volume"], r["labelmap"]) for r in records], cfg["quality"]["tracked_labels"])
    gate_results["gate_8"] = gates.gate_8_fid_numerics()
    gate_results["gate_9"] = timed("gate_9", gates.gate_9_trainer, artifacts=artifacts, deep=True)
    gate_results["gate_1"] = timed("gate_1", gates.gate_1_gradient_suite)

    for name in sorted(gate_results):
        _info(log, f"{name}: {'PASS' if gate_results[name]['ok'] else 'FAIL'}")

    timing["total"] = time.perf_counter() - t_start
    all_ok = all(g["ok"] for g in gate_results.values())
    summary = {
        "ok": all_ok,
        "exit_code": 0 if all_ok else 3,
        "gates_passed": sum(1 for g in gate_results.values() if g["ok"]),
        "gates_total": len(gate_results),
        "total_seconds": timing["total"],
    }
    _write_json(os.path.join(paths["root"], "metrics.json"), metrics)
    _write_json(os.path.join(paths["root"], "timing.json"), timing)
    _write_json(os.path.join(paths["root"], "gates.json"), gate_results)
    _write_json(os.path.join(paths["root"], "summary.json"), summary)
    _info(log, f"reproduce-all: {summary['gates_passed']}/{summary['gates_total']} gates passed "
               f"in {timing['total']:.1f}s")
    return summary["exit_code"], summary
