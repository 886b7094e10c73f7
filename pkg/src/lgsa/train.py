"""Adam training loop, evaluation and inference.

Data order is a permutation drawn from ``default_rng([seed, epoch])``, and the
per-image flip decisions come from the same generator, so a run is fully
described by its config plus the (epoch, batch) cursor. That cursor is all a
checkpoint needs to resume bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import combine_losses, detection_losses
from .metrics import Detection, EvalReport, decode, evaluate_detections
from .network import LGSANet, PredictionArrays, preprocess
from .synth import DatasetEntry, DatasetManifest, load_dataset
from .targets import Annotation, make_targets

log = logging.getLogger(__name__)

LOG_NAME = "metrics.jsonl"
FINAL_NAME = "final.ckpt"


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params: "OrderedDict[str, T.Tensor]", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def epoch_plan(seed: int, epoch: int, n: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """(permutation of range(n), per-position flip flags) for one epoch."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5
    return order, (flips if flip else np.zeros(n, dtype=bool))


def flip_sample(image: np.ndarray, ann: Annotation) -> tuple[np.ndarray, Annotation]:
    """Mirror an (H,W,3) image left-right together with its boxes."""
    return np.ascontiguousarray(image[:, ::-1]), ann.flipped()


def make_batch(samples: Sequence[tuple[np.ndarray, Annotation]], cfg: TrainConfig):
    x = preprocess(np.stack([img for img, _ in samples]))
    targets = [make_targets(ann, cfg.stride, cfg.num_classes, warn_collisions=False) for _, ann in samples]
    return x, targets


def _check_sample(entry: DatasetEntry, image: np.ndarray, cfg: TrainConfig) -> None:
    h, w = image.shape[:2]
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise TrainingError(
            f"{entry.image_file}: image is {w}x{h}, config expects {cfg.image_size}x{cfg.image_size}"
        )


def load_samples(manifest: DatasetManifest, split: str, cfg: TrainConfig) -> list[tuple[np.ndarray, Annotation]]:
    root = manifest.root
    out = []
    lost = 0
    for e in manifest.split(split):
        img = e.load_image(root)
        _check_sample(e, img, cfg)
        out.append((img, e.annotation))
        tm = make_targets(e.annotation, cfg.stride, cfg.num_classes, warn_collisions=False)
        lost += len(e.annotation) - tm.num_keypoints
    if lost:
        log.warning("%s split: %d boxes share a keypoint cell with a larger box and get no target", split, lost)
    return out


def _snapshot(cfg: TrainConfig) -> TrainConfig:
    # the output location is not part of the run's identity
    return cfg.replace(checkpoint_dir="")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    net: LGSANet
    log_records: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _resolve_manifest(cfg: TrainConfig, manifest: DatasetManifest | None) -> DatasetManifest:
    if manifest is not None:
        return manifest
    if not cfg.dataset_root:
        raise TrainingError("no dataset: set dataset_root")
    m = load_dataset(cfg.dataset_root)
    if not len(m):
        raise TrainingError(f"dataset at {cfg.dataset_root} is empty")
    return m


def _is_finite(parts) -> bool:
    return all(math.isfinite(float(p.data)) for p in parts)


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest | None = None,
    resume: Checkpoint | str | Path | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train from scratch or resume; writes the metrics log and checkpoints under ``out_dir``.

    ``cfg.max_steps`` (if nonzero) bounds the global step count, counted from
    the start of the original run, so resuming with the same config finishes
    exactly where an uninterrupted run would.
    """
    started = time.perf_counter()
    manifest = _resolve_manifest(cfg, manifest)
    out = Path(out_dir if out_dir is not None else cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_samples(manifest, "train", cfg)
    if not train_set:
        raise TrainingError("training split is empty")
    eval_set = None
    if cfg.eval_every:
        eval_set = load_samples(manifest, cfg.eval_split, cfg)

    net = LGSANet(cfg.model_config(), seed=cfg.seed)
    opt = Adam(net.params, lr=cfg.learning_rate)
    epoch, batch_index, sums = 0, 0, {}
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.config.model_config() != cfg.model_config():
            raise TrainingError("checkpoint model config differs from the requested config")
        net.load_state_dict(ck.params)
        for k in opt.m:
            opt.m[k][...] = ck.adam_m[k]
            opt.v[k][...] = ck.adam_v[k]
        opt.t = ck.step
        epoch, batch_index, sums = ck.epoch, ck.batch_index, dict(ck.epoch_sums)

    loss_cfg = cfg.loss_config()
    n = len(train_set)
    n_batches = math.ceil(n / cfg.batch_size)
    log_path = out / LOG_NAME
    records: list[dict] = []

    def checkpoint() -> Checkpoint:
        return Checkpoint(
            _snapshot(cfg),
            OrderedDict((k, v.copy()) for k, v in net.state_dict().items()),
            OrderedDict((k, v.copy()) for k, v in opt.m.items()),
            OrderedDict((k, v.copy()) for k, v in opt.v.items()),
            step=opt.t,
            epoch=epoch,
            batch_index=batch_index,
            epoch_sums=dict(sums),
        )

    def done() -> bool:
        return epoch >= cfg.epochs or (cfg.max_steps and opt.t >= cfg.max_steps)

    with open(log_path, "a") as logf:
        while not done():
            order, flips = epoch_plan(cfg.seed, epoch, n, cfg.flip)
            while batch_index < n_batches and not done():
                idx = range(batch_index * cfg.batch_size, min((batch_index + 1) * cfg.batch_size, n))
                samples = [flip_sample(*train_set[order[i]]) if flips[i] else train_set[order[i]] for i in idx]
                x, targets = make_batch(samples, cfg)
                lr_p, hr_p, _ = net(x)
                lr_parts = detection_losses(lr_p, targets, loss_cfg)
                hr_parts = detection_losses(hr_p, targets, loss_cfg)
                loss = combine_losses(lr_parts, hr_parts, loss_cfg)
                if not (_is_finite(lr_parts) and _is_finite(hr_parts)):
                    comps = {f"{b}_{k}": float(v.data) for b, parts in (("lr", lr_parts), ("hr", hr_parts))
                             for k, v in parts._asdict().items()}
                    raise TrainingError(f"non-finite loss at step {opt.t + 1}: {comps}")
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                batch_index += 1
                value = float(loss.data)
                sums["loss"] = sums.get("loss", 0.0) + value * len(idx)
                for b, parts in (("lr", lr_parts), ("hr", hr_parts)):
                    for k, v in parts._asdict().items():
                        key = f"{b}_{k}"
                        sums[key] = sums.get(key, 0.0) + float(v.data) * len(idx)
                sums["samples"] = sums.get("samples", 0) + len(idx)
                if on_step is not None:
                    on_step(opt.t, value)
                if cfg.checkpoint_every and opt.t % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"step_{opt.t:07d}.ckpt", checkpoint())
            if batch_index < n_batches:
                break  # stopped mid-epoch by max_steps; the cursor stays put
            count = sums.pop("samples")
            rec = {"epoch": epoch + 1, "step": opt.t}
            rec.update({k: v / count for k, v in sorted(sums.items())})
            if eval_set and (epoch + 1) % cfg.eval_every == 0:
                rep = evaluate_samples(net, eval_set, cfg)
                rec.update({f"{cfg.eval_split}_mae": rep.mae, f"{cfg.eval_split}_rmse": rep.rmse,
                            f"{cfg.eval_split}_ap": rep.ap})
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()
            records.append(rec)
            log.info("epoch %d step %d loss %.4f", rec["epoch"], rec["step"], rec["loss"])
            epoch, batch_index, sums = epoch + 1, 0, {}

    ck = checkpoint()
    save_checkpoint(out / FINAL_NAME, ck)
    return TrainResult(ck, net, records, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# inference and evaluation


def net_from_checkpoint(ck: Checkpoint | str | Path) -> tuple[LGSANet, TrainConfig]:
    ck = ck if isinstance(ck, Checkpoint) else load_checkpoint(ck)
    net = LGSANet(ck.config.model_config(), seed=ck.config.seed)
    net.load_state_dict(ck.params)
    return net, ck.config


@dataclass
class Prediction:
    detections: list[Detection]
    lr: PredictionArrays
    hr: PredictionArrays


def predict(net: LGSANet, images: Sequence[np.ndarray], cfg: TrainConfig, batch_size: int | None = None) -> list[Prediction]:
    """Forward pass plus decode for uint8 (H,W,3) images, without recording a graph."""
    out: list[Prediction] = []
    bs = batch_size or cfg.batch_size
    with T.no_grad():
        for s in range(0, len(images), bs):
            chunk = images[s : s + bs]
            lr, hr, _ = net(preprocess(np.stack(chunk)))
            for i in range(len(chunk)):
                maps = hr.numpy(i)
                dets = decode(maps, cfg.stride, cfg.score_threshold, cfg.top_k, image_id=s + i)
                out.append(Prediction(dets, lr.numpy(i), maps))
    return out


def evaluate_samples(net: LGSANet, samples: Sequence[tuple[np.ndarray, Annotation]], cfg: TrainConfig) -> EvalReport:
    if not samples:
        raise TrainingError("evaluation split is empty")
    preds = predict(net, [img for img, _ in samples], cfg)
    return evaluate_detections([p.detections for p in preds], [ann.boxes for _, ann in samples])


def evaluate(
    checkpoint: Checkpoint | str | Path,
    manifest: DatasetManifest | str | Path,
    split: str = "test",
    report_path: str | Path | None = None,
    overrides: dict | None = None,
) -> EvalReport:
    """Evaluate a checkpoint on a dataset split; optionally write the report as JSON."""
    net, cfg = net_from_checkpoint(checkpoint)
    if overrides:
        cfg = cfg.replace(**overrides)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_dataset(manifest)
    report = evaluate_samples(net, load_samples(manifest, split, cfg), cfg)
    if report_path is not None:
        body = {"split": split, **report.to_dict()}
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return report
