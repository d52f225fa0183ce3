"""Set-to-set training: Hungarian matching, focal + L1 loss, optimizer loop.

Every refinement cycle is supervised independently (weight 1 each): its
predictions are matched one-to-one against the ground truth, matched pairs
pay an L1 box regression cost on a normalized 8-vector, and all queries
pay a focal classification cost against their matched class (or all-
background when unmatched). The logged total is always exactly
class + box.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from .boxes import Box3D
from .config import ModelConfig, TrainConfig
from .detection import FusionDetector, prepare_batch
from .synthetic import SensorRig

CHECKPOINT_VERSION = 1
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_CLAMP = 1e-7


@dataclass
class MatchResult:
    """One-to-one assignment between predictions and ground-truth boxes."""

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Exact minimum-cost one-to-one assignment on a (preds x gts) matrix."""
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])


def gt_targets(boxes: list[Box3D], range_max: float, size_scale: float
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Class ids (M,) and normalized 8-vectors (M, 8) for ground truth."""
    if not boxes:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, 8)
    classes = torch.tensor([b.class_id for b in boxes], dtype=torch.long)
    rows = [np.concatenate([b.center / range_max, b.size / size_scale,
                            [np.sin(b.heading), np.cos(b.heading)]])
            for b in boxes]
    return classes, torch.tensor(np.stack(rows), dtype=torch.float32)


def pred_box_params(decoded: dict, range_max: float, size_scale: float
                    ) -> torch.Tensor:
    """Normalized 8-vectors (B, N, 8) from one decoded cycle."""
    return torch.cat([decoded["center"] / range_max,
                      decoded["size"] / size_scale,
                      decoded["sin"].unsqueeze(-1),
                      decoded["cos"].unsqueeze(-1)], dim=-1)


def match_hungarian(class_probs: torch.Tensor, pred_params: torch.Tensor,
                    gt_classes: torch.Tensor, gt_params: torch.Tensor,
                    class_weight: float = 1.0, box_weight: float = 1.0
                    ) -> MatchResult:
    """Minimum-cost matching of N predictions to M <= N ground truths.

    Pair cost is `class_weight * (-p_gt_class) + box_weight * L1` on the
    normalized parameters; the optimum is exact.
    """
    n, m = class_probs.shape[0], gt_classes.shape[0]
    if m > n:
        raise ValueError(f"{m} ground truths exceed {n} predictions")
    if m == 0:
        return MatchResult(pairs=[], unmatched_predictions=list(range(n)))
    with torch.no_grad():
        cost = (-class_weight * class_probs[:, gt_classes]
                + box_weight * torch.cdist(pred_params, gt_params, p=1))
    pairs = solve_assignment(cost.double().cpu().numpy())
    matched = {p for p, _ in pairs}
    return MatchResult(pairs=pairs,
                       unmatched_predictions=[i for i in range(n)
                                              if i not in matched])


def focal_loss(class_probs: torch.Tensor, targets: torch.Tensor,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               num_matched: int = 1) -> torch.Tensor:
    """Focal loss over per-class sigmoid probabilities.

    FL(p_t) = -alpha_t * (1 - p_t)^gamma * log(p_t), summed over every
    (query, class) entry and divided by max(num_matched, 1). Probabilities
    are clamped away from {0, 1} so the log stays finite.
    """
    p = class_probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    loss = -alpha_t * (1.0 - p_t).pow(gamma) * torch.log(p_t)
    return loss.sum() / max(num_matched, 1)


def l1_box_loss(pred_params: torch.Tensor, gt_params: torch.Tensor
                ) -> torch.Tensor:
    """Mean over matched pairs of the summed absolute 8-vector error."""
    if pred_params.shape[0] == 0:
        return pred_params.new_zeros(())
    return (pred_params - gt_params).abs().sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    """Classification and box terms plus their (weight-1) sum."""

    class_loss: torch.Tensor
    box_loss: torch.Tensor
    total: torch.Tensor

    def items(self) -> dict:
        return {"class": float(self.class_loss.item()),
                "box": float(self.box_loss.item()),
                "total": float(self.total.item())}


def compute_losses(outputs: list[dict], gt_boxes: list[list[Box3D]],
                   range_max: float, size_scale: float = 10.0) -> LossBreakdown:
    """Match and score every refinement cycle of a batch.

    Per-frame losses are summed over cycles (auxiliary weight 1) and
    averaged over the batch. The total is formed in float64 so the logged
    identity total == class + box holds to machine precision.
    """
    batch_size = len(gt_boxes)
    num_classes = outputs[0]["class_probs"].shape[-1]
    class_sum = outputs[0]["class_probs"].new_zeros((), dtype=torch.float64)
    box_sum = class_sum.clone()
    for decoded in outputs:
        params = pred_box_params(decoded, range_max, size_scale)
        if not (torch.isfinite(params).all()
                and torch.isfinite(decoded["class_probs"]).all()):
            raise RuntimeError("non-finite decoded outputs reached the loss; "
                               "check for diverging weights or corrupt inputs")
        for b, boxes in enumerate(gt_boxes):
            gt_classes, gt_params = gt_targets(boxes, range_max, size_scale)
            gt_params = gt_params.to(params.dtype)
            probs = decoded["class_probs"][b]
            match = match_hungarian(probs, params[b], gt_classes, gt_params)
            targets = torch.zeros_like(probs)
            for pi, gi in match.pairs:
                targets[pi, gt_classes[gi]] = 1.0
            class_sum = class_sum + focal_loss(probs, targets,
                                               num_matched=len(match.pairs))
            if match.pairs:
                rows = [pi for pi, _ in match.pairs]
                cols = [gi for _, gi in match.pairs]
                box_sum = box_sum + l1_box_loss(params[b][rows], gt_params[cols])
    class_loss = class_sum / batch_size
    box_loss = box_sum / batch_size
    return LossBreakdown(class_loss=class_loss, box_loss=box_loss,
                         total=class_loss + box_loss)


def save_checkpoint(path: str | Path, model: FusionDetector,
                    optimizer: torch.optim.Optimizer, epoch: int,
                    train_config: TrainConfig | None = None) -> None:
    """Persist everything needed for a bit-exact training resume."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
        "model_config": dataclasses.asdict(model.config),
        "rig": model.rig.to_dict(),
        "train_config": (dataclasses.asdict(train_config)
                         if train_config else None),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has version {version!r}, "
                         f"expected {CHECKPOINT_VERSION}")
    return payload


def model_from_checkpoint(payload: dict) -> FusionDetector:
    model = FusionDetector(ModelConfig(**payload["model_config"]),
                           SensorRig.from_dict(payload["rig"]))
    model.load_state_dict(payload["model_state"])
    return model


class Trainer:
    """Epoch loop over preprocessed in-memory samples.

    Inputs are prepared once up front (projection and resizing are pure
    functions of the data), so epochs only pay for forward/backward.
    Shuffling draws from a stateless per-epoch generator, which keeps
    resumed runs identical to uninterrupted ones.
    """

    def __init__(self, model: FusionDetector, samples: list[dict],
                 config: TrainConfig, out_dir: str | Path | None = None):
        if not samples:
            raise ValueError("training requires a non-empty dataset")
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = torch.optim.AdamW(model.parameters(),
                                           lr=config.learning_rate,
                                           weight_decay=config.weight_decay)
        self.epoch = 0
        self._inputs = [prepare_batch([s], model.config) for s in samples]
        self._gt = [s["boxes"] for s in samples]

    def _batch(self, indices: np.ndarray) -> dict:
        return {sensor: torch.cat([self._inputs[i][sensor] for i in indices])
                for sensor in self.model.config.sensors}

    def train(self, num_epochs: int) -> list[dict]:
        """Run `num_epochs` further epochs; returns one record per epoch."""
        self.model.train()
        records = []
        n = len(self._inputs)
        for _ in range(num_epochs):
            started = time.perf_counter()
            order = np.random.default_rng(
                [self.config.seed, self.epoch]).permutation(n)
            steps = []
            for start in range(0, n, self.config.batch_size):
                idx = order[start:start + self.config.batch_size]
                outputs = self.model(self._batch(idx))
                breakdown = compute_losses(outputs, [self._gt[i] for i in idx],
                                           range_max=self.model.rig.range_max,
                                           size_scale=self.config.size_scale)
                if not torch.isfinite(breakdown.total):
                    raise RuntimeError(
                        f"non-finite loss (epoch {self.epoch}, step {len(steps)},"
                        f" seed {self.config.seed}): {breakdown.items()}")
                self.optimizer.zero_grad()
                breakdown.total.backward()
                nn.utils.clip_grad_norm_(self.model.parameters(),
                                         self.config.grad_clip_norm)
                self.optimizer.step()
                steps.append(breakdown.items())
            record = {
                "epoch": self.epoch,
                "loss_total": float(np.mean([s["total"] for s in steps])),
                "loss_class": float(np.mean([s["class"] for s in steps])),
                "loss_box": float(np.mean([s["box"] for s in steps])),
                "steps": steps,
                "duration_s": time.perf_counter() - started,
            }
            records.append(record)
            self._log(record)
            self.epoch += 1
            if (self.config.checkpoint_every
                    and self.epoch % self.config.checkpoint_every == 0):
                self.save(self._checkpoint_path(f"epoch_{self.epoch:04d}"))
        return records

    def _log(self, record: dict) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def _checkpoint_path(self, stem: str) -> Path:
        base = self.out_dir if self.out_dir is not None else Path(".")
        return base / f"{stem}.ckpt"

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self._checkpoint_path("last")
        save_checkpoint(path, self.model, self.optimizer, self.epoch,
                        self.config)
        return path

    def resume(self, path: str | Path) -> None:
        """Restore model, optimizer, epoch counter, and RNG state."""
        payload = load_checkpoint(path)
        self.model.load_state_dict(payload["model_state"])
        self.optimizer.load_state_dict(payload["optimizer_state"])
        self.epoch = payload["epoch"]
        torch.set_rng_state(payload["torch_rng_state"])
