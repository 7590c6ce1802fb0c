"""Training engine: bucketed batching, the three-stage latent-flow schedule,
and control-branch training with the weighted flow loss plus contrastive terms.

Worker parallelism is simulated in-process: each worker owns whole buckets
and same-step batch gradients are averaged in worker-index order, so runs
are bit-reproducible for a fixed seed and worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import (ContrastConfig, LabelSubstitution, build_perturbed_mask, lambda_contrast,
                          region_contrastive_loss, roi_mask_to_latent)
from .flow import FlowBatch, NonFiniteError, flow_loss, interpolate, sample_timesteps
from .networks import Conditioning, ControlEncoder, VelocityNet, control_forward, labelmap_to_latent_onehot
from .nifti import resample, snap_shape
from .optim import AdamW, poly_lr

STAGE_ORDER = ("pretrain", "main", "finetune")

# desk-scale per-latent-shape batch capacities, largest batch for the smallest shape
DEFAULT_CAPACITY_TABLE = {
    (8, 8, 8): 16,
    (16, 16, 8): 4,
    (32, 32, 32): 1,
}

NAN_ABORT_THRESHOLD = 10


class TrainerError(Exception):
    pass


@dataclass
class StageConfig:
    stage: str
    epochs: int
    lr: float
    power: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise TrainerError(f"unknown stage {self.stage!r}; expected one of {STAGE_ORDER}")
        if self.epochs < 1:
            raise TrainerError(f"stage {self.stage!r}: epochs must be >= 1")


@dataclass
class LossWeights:
    roi_weight: float = 100.0

    def __post_init__(self):
        if self.roi_weight <= 0:
            raise TrainerError(f"roi_weight must be positive, got {self.roi_weight}")


@dataclass
class BucketPlan:
    by_shape: dict
    capacity: dict
    batches: list        # (shape, tuple of sample ids)
    batch_worker: list   # worker index per batch
    workers: int

    def worker_queues(self):
        queues = [[] for _ in range(self.workers)]
        for idx, w in enumerate(self.batch_worker):
            queues[w].append(idx)
        return queues


def plan_buckets(samples, capacity_table: dict, workers: int = 1) -> BucketPlan:
    """Group samples into shape-homogeneous batches and assign to workers.

    samples: iterable of (sample_id, shape).  Buckets are handed to workers
    whole, round-robin in decreasing batch-count order.
    """
    if workers < 1:
        raise TrainerError(f"workers must be >= 1, got {workers}")
    capacity = {tuple(k): int(v) for k, v in capacity_table.items()}
    by_shape: dict = {}
    for sid, shape in samples:
        by_shape.setdefault(tuple(shape), []).append(sid)
    unknown = sorted(s for s in by_shape if s not in capacity)
    if unknown:
        raise TrainerError(f"no batch capacity entry for shapes: {unknown}")

    batches = []
    bucket_batches: dict = {}
    for shape in by_shape:
        cap = capacity[shape]
        if cap < 1:
            raise TrainerError(f"capacity for shape {shape} must be >= 1")
        ids = by_shape[shape]
        idxs = []
        for i in range(0, len(ids), cap):
            idxs.append(len(batches))
            batches.append((shape, tuple(ids[i:i + cap])))
        bucket_batches[shape] = idxs

    batch_worker = [0] * len(batches)
    order = sorted(by_shape, key=lambda s: (-len(bucket_batches[s]), s))
    for rank, shape in enumerate(order):
        w = rank % workers
        for idx in bucket_batches[shape]:
            batch_worker[idx] = w
    return BucketPlan(by_shape=by_shape, capacity=capacity, batches=batches,
                      batch_worker=batch_worker, workers=workers)


def _named_grads(params: dict, grads: dict) -> dict:
    return {name: grads[t].data for name, t in params.items() if t in grads}


def _average_grad_dicts(grad_dicts):
    """Mean over workers, accumulated in list order."""
    total = {}
    for gd in grad_dicts:
        for name, g in gd.items():
            if name in total:
                total[name] = total[name] + g
            else:
                total[name] = g.copy()
    inv = 1.0 / len(grad_dicts)
    return {name: g * inv for name, g in total.items()}


def _validate_stage_sequence(stages):
    ids = [s.stage for s in stages]
    ranks = [STAGE_ORDER.index(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise TrainerError(f"duplicate stages in {ids}")
    if ranks != sorted(ranks):
        raise TrainerError(f"stages must run in order {STAGE_ORDER}, got {ids}")
    if ids and ids[0] != STAGE_ORDER[0]:
        raise TrainerError(f"training must start at stage {STAGE_ORDER[0]!r}, got {ids[0]!r}")


def _encode_corpus(codec, volumes):
    latents = []
    for vol in volumes:
        lat = codec.encode(vol)
        latents.append((lat.grid, vol.spacing))
    return latents


def _flow_grads(net: VelocityNet, batch_latents, rng_noise, rng_t, opt_params):
    """One flow-loss gradient evaluation on a shape-homogeneous batch."""
    n = len(batch_latents)
    x1 = [g for g, _ in batch_latents]
    x0 = [rng_noise.standard_normal(g.shape).astype(g.dtype) for g in x1]
    ts = sample_timesteps(n, rng_t)
    conds = [Conditioning(t=float(ts[i]), spacing=batch_latents[i][1]) for i in range(n)]

    def velocity_fn(x_t, t, cond):
        return net.forward(x_t, Conditioning(t=t, spacing=cond.spacing))

    with ad.Tape() as tape:
        loss = flow_loss(velocity_fn, FlowBatch(x0=x0, x1=x1, t=ts, cond=conds))
    grads = ad.backward(loss, tape)
    return _named_grads(opt_params, grads), loss.item()


def train_ldm(corpus, stages, codec, capacity_table: dict | None = None, net: VelocityNet | None = None,
              seed: int = 0, workers: int = 1, out_dir=None, log: list | None = None) -> VelocityNet:
    """Three-stage velocity-net training over encoded volumes.

    corpus: list of Volume.  Stage 1 trains on the corpus resampled to its
    smallest snapped shape, stage 2 on shape-buckets of the mixed corpus,
    stage 3 on single samples drawn with inverse-bucket-frequency weights.
    """
    if not corpus:
        raise TrainerError("train_ldm: empty corpus")
    _validate_stage_sequence(stages)
    if not codec.frozen:
        raise TrainerError("train_ldm: codec must be frozen")
    capacity_table = capacity_table or DEFAULT_CAPACITY_TABLE
    codec_hash_before = codec.hash()
    f = codec.config.spatial_factor

    if net is None:
        net = VelocityNet(in_channels=codec.config.channels, seed=seed)
    trainable = {name: t for name, t in net.params.items() if t.requires_grad}

    smallest = min((v.shape for v in corpus), key=lambda s: int(np.prod(s)))
    smallest = snap_shape(smallest, f)

    for stage_idx, stage in enumerate(stages):
        if stage.stage == "pretrain":
            vols = [v if v.shape == smallest else resample(v, smallest, "trilinear") for v in corpus]
            latents = _encode_corpus(codec, vols)
        else:
            latents = _encode_corpus(codec, corpus)
        lat_shapes = [g.shape[1:] for g, _ in latents]

        opt = AdamW(trainable, lr=stage.lr, weight_decay=0.0)
        rng_noise = np.random.default_rng([seed, stage_idx, 1])
        rng_t = np.random.default_rng([seed, stage_idx, 2])
        rng_pick = np.random.default_rng([seed, stage_idx, 3])

        if stage.stage == "finetune":
            counts: dict = {}
            for s in lat_shapes:
                counts[s] = counts.get(s, 0) + 1
            weights = np.array([1.0 / counts[s] for s in lat_shapes])
            weights /= weights.sum()
            draws_per_epoch = len(latents)
            steps_per_epoch = int(np.ceil(draws_per_epoch / workers))
        else:
            plan = plan_buckets(list(enumerate(lat_shapes)), capacity_table, workers)
            queues = plan.worker_queues()
            steps_per_epoch = max((len(q) for q in queues), default=0)
        total_steps = stage.epochs * steps_per_epoch

        step = 0
        for epoch in range(stage.epochs):
            if stage.stage == "finetune":
                picks = rng_pick.choice(len(latents), size=draws_per_epoch, p=weights)
                step_batches = [[(int(j),) for j in picks[k:k + workers]]
                                for k in range(0, draws_per_epoch, workers)]
            else:
                step_batches = []
                for s in range(steps_per_epoch):
                    row = [plan.batches[q[s]][1] for q in queues if s < len(q)]
                    step_batches.append(row)
            for row in step_batches:
                lr = poly_lr(step, total_steps, stage.lr, stage.power)
                grad_dicts = []
                losses = []
                for ids in row:
                    batch = [latents[j] for j in ids]
                    try:
                        gd, loss_val = _flow_grads(net, batch, rng_noise, rng_t, trainable)
                    except NonFiniteError:
                        opt.state.nan_guard_count += 1
                        continue
                    grad_dicts.append(gd)
                    losses.append(loss_val)
                if grad_dicts:
                    opt.step(_average_grad_dicts(grad_dicts), lr=lr)
                if opt.nan_guard_count > NAN_ABORT_THRESHOLD:
                    raise TrainerError(
                        f"train_ldm: NaN guard tripped {opt.nan_guard_count} times in stage "
                        f"{stage.stage!r}; aborting (step {step}, lr {lr})")
                if log is not None:
                    log.append({"module": "ldm", "stage": stage.stage, "epoch": epoch, "step": step,
                                "loss": float(np.mean(losses)) if losses else None, "lr": lr,
                                "nan_guard": opt.nan_guard_count})
                step += 1
        if out_dir is not None:
            net.save(f"{out_dir}/ldm_{stage.stage}.fckp", {"stage": stage.stage})

    if codec.hash() != codec_hash_before:
        raise TrainerError("train_ldm: frozen codec parameters changed during training")
    return net


def weighted_flow_loss(pred: Tensor, target: Tensor, weight: np.ndarray) -> Tensor:
    """sum(w * (pred - target)^2) / sum(w), weights broadcast over channels."""
    w_full = np.broadcast_to(np.asarray(weight, dtype=pred.data.dtype), pred.shape)
    wsum = float(w_full.sum())
    if wsum <= 0:
        raise TrainerError("weighted_flow_loss: weight sum must be positive")
    diff = pred - target
    sq = ad.mul(diff, diff)
    return ad.mul(ad.tensor_sum(ad.mul(sq, Tensor(w_full.copy()))), 1.0 / wsum)


def prepare_control_sample(codec, volume, labelmap, substitution: LabelSubstitution | None,
                           vocab_size: int, roi_weight: float):
    """Precompute everything a control-branch training step needs."""
    f = codec.config.spatial_factor
    x1 = codec.encode(volume).grid
    onehot_orig = labelmap_to_latent_onehot(labelmap, f, vocab_size)
    if substitution is None:
        m_latent = np.zeros(x1.shape[1:], dtype=np.float32)
        onehot_pert = None
    else:
        c_pert, m_vox = build_perturbed_mask(labelmap, substitution)
        onehot_pert = labelmap_to_latent_onehot(c_pert, f, vocab_size)
        m_latent = roi_mask_to_latent(m_vox.grid, f)
    weight = 1.0 + (roi_weight - 1.0) * m_latent
    return {"x1": x1, "spacing": volume.spacing, "onehot_orig": onehot_orig,
            "onehot_pert": onehot_pert, "m_latent": m_latent, "weight": weight}


def train_controlnet(base: VelocityNet, samples, codec, contrast_cfg: ContrastConfig,
                     weights: LossWeights, epochs: int, lr: float, seed: int = 0,
                     vocab_size: int = 6, use_contrastive: bool = True,
                     out_dir=None, log: list | None = None,
                     ctrl: ControlEncoder | None = None) -> ControlEncoder:
    """Train the control encoder against the frozen base velocity net.

    samples: list of dicts with keys volume, labelmap, substitution (None
    for healthy volumes).  Each step shares one (x0, t) draw between the
    weighted flow loss and the contrastive pair, per the paired-pass rule.
    """
    if not base.frozen:
        raise TrainerError("train_controlnet: base velocity net must be frozen")
    if not codec.frozen:
        raise TrainerError("train_controlnet: codec must be frozen")
    if epochs < 1:
        raise TrainerError("train_controlnet: epochs must be >= 1")
    base_hash_before = base.hash()
    codec_hash_before = codec.hash()

    prepared = [prepare_control_sample(codec, s["volume"], s["labelmap"], s.get("substitution"),
                                       vocab_size, weights.roi_weight) for s in samples]
    if ctrl is None:
        ctrl = ControlEncoder(base, vocab_size=vocab_size, seed=seed)
    trainable = {name: t for name, t in ctrl.params.items() if t.requires_grad}
    opt = AdamW(trainable, lr=lr, weight_decay=0.0)
    rng_noise = np.random.default_rng([seed, 101])
    rng_t = np.random.default_rng([seed, 102])

    total_steps = epochs * len(prepared)
    step = 0
    stats: dict = {}
    for epoch in range(epochs):
        lam = lambda_contrast(epoch, epochs, contrast_cfg)
        for item in prepared:
            x1 = item["x1"]
            x0 = rng_noise.standard_normal(x1.shape).astype(x1.dtype)
            t = float(sample_timesteps(1, rng_t)[0])
            x_t = Tensor(interpolate(x0, x1, t))
            cond_orig = Conditioning(t=t, spacing=item["spacing"], mask=item["onehot_orig"])
            target = Tensor((x1 - x0).astype(np.float32))
            lr_now = poly_lr(step, total_steps, lr)
            with ad.Tape() as tape:
                out_orig = control_forward(base, ctrl, x_t, cond_orig)
                loss_flow = weighted_flow_loss(out_orig, target, item["weight"][None])
                loss = loss_flow
                l_roi_val = l_bg_val = 0.0
                if use_contrastive and item["onehot_pert"] is not None:
                    cond_pert = Conditioning(t=t, spacing=item["spacing"], mask=item["onehot_pert"])
                    l_roi, l_bg = region_contrastive_loss(
                        base, ctrl, x_t, t, cond_orig, cond_pert, item["m_latent"],
                        contrast_cfg, stats,
                        out_orig=out_orig if contrast_cfg.mode == "full_output" else None)
                    loss = loss + ad.mul(l_roi + l_bg, lam)
                    l_roi_val = l_roi.item()
                    l_bg_val = l_bg.item()
            if not np.isfinite(loss.item()):
                opt.state.nan_guard_count += 1
                tape._consumed = True
            else:
                grads = ad.backward(loss, tape)
                opt.step(_named_grads(trainable, grads), lr=lr_now)
            if opt.nan_guard_count > NAN_ABORT_THRESHOLD:
                raise TrainerError(f"train_controlnet: NaN guard tripped {opt.nan_guard_count} times")
            if log is not None:
                log.append({"module": "controlnet", "epoch": epoch, "step": step,
                            "loss_flow": loss_flow.item(), "l_roi": l_roi_val, "l_bg": l_bg_val,
                            "lambda": lam, "lr": lr_now, "nan_guard": opt.nan_guard_count})
            step += 1

    if base.hash() != base_hash_before:
        raise TrainerError("train_controlnet: frozen base parameters changed during training")
    if codec.hash() != codec_hash_before:
        raise TrainerError("train_controlnet: frozen codec parameters changed during training")
    if out_dir is not None:
        ctrl.save(f"{out_dir}/controlnet.fckp", {"use_contrastive": use_contrastive, "epochs": epochs})
    return ctrl
