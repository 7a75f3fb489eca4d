"""Training loop: batch assembly, deep-supervised loss, AdamW, checkpoints.

Determinism contract: parameter init derives from cfg.seed, batch order from a
separate generator whose state rides in every checkpoint, so a resumed run
replays the exact byte stream an uninterrupted run would have produced.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import checkpoint as ckpt_io
from . import losses, metrics, network, synth
from .engine import ConfigError, Tape, backward, tensor
from .optim import AdamWState, adamw_step, init_adamw


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 2
    image_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 1e-2
    seed: int = 0
    eval_every: int = 0        # 0 disables periodic evaluation
    checkpoint_every: int = 0  # 0 means final checkpoint only
    extractor_seed: int = 0
    lambda_d: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_mask: float = 1.0
    lambda_perc: float = 0.25

    def __post_init__(self):
        self.lambda_d = tuple(float(v) for v in self.lambda_d)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by 8")


@dataclass
class TrainResult:
    params: network.ModelParams
    opt: AdamWState
    history: List[dict]
    checkpoint_path: Optional[Path]


def load_training_set(data_dir):
    """Stack a generated dataset directory into float32 batch arrays."""
    records = synth.read_manifest(data_dir)
    if not records:
        raise ConfigError(f"dataset {data_dir} is empty")
    js, bgs, ms = [], [], []
    for rec in records:
        j, i, m = synth.load_sample(data_dir, rec["index"])
        js.append(j.astype(np.float32))
        bgs.append(i.astype(np.float32))
        ms.append(m[None].astype(np.float32))
    return {"J": np.stack(js), "I": np.stack(bgs), "M": np.stack(ms)}


def effective_weights(net_cfg: network.NetworkConfig, cfg: TrainConfig) -> losses.LossWeights:
    lam = cfg.lambda_d
    if not (net_cfg.deep_supervision_enabled and net_cfg.nested_enabled):
        lam = (0.0, 0.0, lam[2])
    return losses.LossWeights(lambda_d=lam, lambda_mask=cfg.lambda_mask,
                              lambda_perc=cfg.lambda_perc)


def evaluate_dataset(params, net_cfg, data, max_samples: Optional[int] = None) -> dict:
    n = data["J"].shape[0] if max_samples is None else min(max_samples, data["J"].shape[0])
    psnrs, psnrs_id, f1s, ious = [], [], [], []
    for i in range(n):
        out = network.forward(params, tensor(data["J"][i:i + 1]), net_cfg, mode="infer")
        pred = out.images[3].numpy()[0].astype(np.float64)
        mask_pred = out.masks[3].numpy()[0, 0].astype(np.float64)
        gt = data["I"][i].astype(np.float64)
        psnrs.append(metrics.psnr(pred, gt))
        psnrs_id.append(metrics.psnr(data["J"][i].astype(np.float64), gt))
        f1, iou = metrics.f1_iou(mask_pred, data["M"][i, 0])
        f1s.append(f1)
        ious.append(iou)
    return {
        "psnr": float(np.mean(psnrs)),
        "psnr_identity": float(np.mean(psnrs_id)),
        "f1": float(np.mean(f1s)),
        "iou": float(np.mean(ious)),
    }


def _data_rng(seed: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def checkpoint_payload(named, opt: AdamWState, net_cfg, cfg: TrainConfig, rng) -> dict:
    tensors = {name: t.numpy() for name, t in named.items()}
    for name in named:
        tensors[f"opt.m.{name}"] = opt.m[name]
        tensors[f"opt.v.{name}"] = opt.v[name]
    tensors["meta.step"] = np.array(opt.step_count, dtype=np.int64)
    rng_json = json.dumps(rng.bit_generator.state).encode("utf-8")
    tensors["meta.rng"] = np.frombuffer(rng_json, dtype=np.uint8).copy()
    config = {"network": asdict(net_cfg), "train": asdict(cfg)}
    cfg_json = json.dumps(config, sort_keys=True).encode("utf-8")
    tensors["meta.config"] = np.frombuffer(cfg_json, dtype=np.uint8).copy()
    return tensors


def read_checkpoint_config(tensors) -> dict:
    if "meta.config" not in tensors:
        raise ckpt_io.CheckpointError("checkpoint has no embedded config")
    return json.loads(bytes(tensors["meta.config"]))


def network_config_from_checkpoint(tensors) -> network.NetworkConfig:
    return network.NetworkConfig(**read_checkpoint_config(tensors)["network"])


def restore_training_state(named, opt: AdamWState, tensors, rng) -> None:
    known = set(named)
    known.update(f"opt.m.{n}" for n in named)
    known.update(f"opt.v.{n}" for n in named)
    known.update(("meta.step", "meta.rng", "meta.config"))
    unknown = sorted(set(tensors) - known)
    if unknown:
        raise ckpt_io.CheckpointError(
            f"checkpoint has unknown tensor {unknown[0]}; config mismatch?")
    ckpt_io.load_into(named, tensors)
    for name in named:
        for prefix, store in (("opt.m.", opt.m), ("opt.v.", opt.v)):
            key = prefix + name
            if key not in tensors:
                raise ckpt_io.CheckpointError(f"checkpoint is missing tensor {key}")
            store[name][...] = tensors[key]
    opt.step_count = int(tensors["meta.step"])
    rng.bit_generator.state = json.loads(bytes(tensors["meta.rng"]))


def train(net_cfg: network.NetworkConfig, cfg: TrainConfig, data, out_dir,
          resume_from=None) -> TrainResult:
    n = data["J"].shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.wmfk"
    log_path = out / "log.jsonl"

    params = network.init_params(net_cfg, seed=cfg.seed)
    named = network.named_parameters(params)
    opt = init_adamw(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = _data_rng(cfg.seed)
    fx = losses.init_extractor(cfg.extractor_seed)
    weights = effective_weights(net_cfg, cfg)

    if resume_from is not None:
        restore_training_state(named, opt, ckpt_io.load_checkpoint(resume_from), rng)

    def save(path=ckpt_path):
        ckpt_io.save_checkpoint(path, checkpoint_payload(named, opt, net_cfg, cfg, rng))
        return path

    history: List[dict] = []
    log_mode = "a" if resume_from is not None else "w"
    saved = None
    with open(log_path, log_mode) as log:
        start = opt.step_count
        for step in range(start + 1, start + cfg.steps + 1):
            idx = rng.integers(0, n, size=cfg.batch_size)
            jb = tensor(data["J"][idx])
            ib = tensor(data["I"][idx])
            mb = tensor(data["M"][idx])
            with Tape():
                outputs = network.forward(params, jb, net_cfg, mode="train")
                loss, parts = losses.total_loss(outputs, ib, mb, weights, fx)
                if not np.isfinite(parts["loss_total"]):
                    raise TrainingDiverged(
                        f"loss became non-finite at step {step}; last checkpoint kept")
                backward(loss)
            adamw_step(named, opt)
            for t in named.values():
                t.zero_grad()
            record = {"step": step, **parts}
            if cfg.eval_every and step % cfg.eval_every == 0:
                record["eval"] = evaluate_dataset(params, net_cfg, data)
            history.append(record)
            log.write(json.dumps(record) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                saved = save()
    saved = save()
    return TrainResult(params=params, opt=opt, history=history, checkpoint_path=saved)
