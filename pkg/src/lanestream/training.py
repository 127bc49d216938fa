"""Training loop: AdamW, cosine schedule, streaming curriculum, ablations.

Per-frame loss is alpha1 * detection + alpha2 * stream + alpha3 * denoise.
Training runs two phases: a single-frame phase over shuffled frames, then
a streaming phase over whole sequences with memory carried frame to frame.
Optimizer state is only created for parameters that receive gradients, so
disabled pathways stay bit-frozen at their initialization.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from .core import FrameSample, relative_transform, write_json_atomic
from .denoise import denoise_losses, make_dn_batch
from .engine import Tensor
from .evaluation import EvalReport, evaluate
from .model import (
    LaneSegmentModel,
    ModelConfig,
    dn_outputs,
    lane_segment_loss,
    predictions_to_graph,
)
from .streaming import make_bundle, stream_step, streaming_losses
from .synth import instance_region_mask


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; details are dumped to disk."""


@dataclass
class TrainConfig:
    epochs: int = 24
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    single_frame_fraction: float = 0.5
    alphas: tuple = (1.0, 0.3, 1.0)
    stream: bool = True
    dbpe: bool = True
    dn: bool = True
    id_track: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["alphas"] = list(self.alphas)
        return out


class AdamW:
    """Adam with decoupled weight decay; parameters without gradients are
    skipped entirely, so unused pathways never move."""

    def __init__(self, tensors, lr=2e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = {}

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            g = t.grad
            if i not in self._m:
                self._m[i] = np.zeros_like(t.data)
                self._v[i] = np.zeros_like(t.data)
                self._t[i] = 0
            self._t[i] += 1
            k = self._t[i]
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / (1.0 - b1**k)
            v_hat = self._v[i] / (1.0 - b2**k)
            t.data = t.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * t.data)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to zero over total_steps optimizer steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def frame_masks(frame: FrameSample, grid) -> np.ndarray | None:
    """(n_gt, H*W) float region masks for every GT segment."""
    if len(frame.gt) == 0:
        return None
    return np.stack(
        [instance_region_mask(s, grid).reshape(-1).astype(float) for s in frame.gt.segments]
    )


@dataclass
class Trainer:
    model: LaneSegmentModel
    config: TrainConfig
    out_dir: str | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.opt = AdamW(
            self.model.params.tensors(),
            lr=self.config.lr,
            weight_decay=self.config.weight_decay,
        )
        self.global_step = 0
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)

    # one frame ---------------------------------------------------------------

    def frame_loss(self, frame: FrameSample, bundle, prev_gt):
        """Combined loss for one frame; returns (loss, terms, new_bundle)."""
        cfg, model = self.config, self.model
        a1, a2, a3 = cfg.alphas
        dn = None
        if cfg.dn and len(frame.gt) > 0:
            rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 7919, self.global_step])
            dn = make_dn_batch(frame.gt, model.grid, rng, total=model.config.dn_total)
        result, bev, propagated = stream_step(
            model, frame, bundle, dn=dn, dynamic_pe=cfg.dbpe
        )
        masks = frame_masks(frame, model.grid)
        ls = lane_segment_loss(result, frame.gt, gt_masks=masks)
        total = E.mul(ls["total"], a1)
        terms = {"detection": float(ls["total"].data), "stream": 0.0, "denoise": 0.0}

        if propagated is not None:
            psi = relative_transform(bundle.pose, frame.pose)
            st = streaming_losses(
                model,
                bev,
                propagated[0],
                propagated[1],
                bundle.slot_ids,
                frame.gt,
                prev_gt=prev_gt,
                psi=psi,
                id_track=cfg.id_track,
            )
            total = E.add(total, E.mul(st["total"], a2))
            terms["stream"] = float(st["total"].data)
            terms["stream_covered"] = st["covered"]

        if dn is not None:
            dl = denoise_losses(dn_outputs(result, dn), dn, frame.gt)
            total = E.add(total, E.mul(dl["total"], a3))
            terms["denoise"] = float(dl["total"].data)

        new_bundle = None
        if cfg.stream:
            new_bundle = make_bundle(
                model, result, bev, frame.gt, frame.pose, ls["assignment"]
            )
        terms["total"] = float(total.data)
        return total, terms, new_bundle

    def _abort(self, terms: dict, context: dict):
        dump = {"terms": terms, "context": context, "config": self.config.to_dict()}
        path = None
        if self.out_dir:
            path = os.path.join(self.out_dir, "nan_dump.json")
            write_json_atomic(dump, path, indent=2)
        raise TrainingDiverged(
            f"non-finite loss at step {context.get('step')}"
            + (f", diagnostics in {path}" if path else "")
        )

    def _checked_frame_loss(self, frame, bundle, prev_gt, context):
        context = dict(context, step=self.global_step)
        try:
            loss, terms, bundle = self.frame_loss(frame, bundle, prev_gt)
        except ValueError as err:
            if "non-finite" in str(err):
                self._abort({"error": str(err)}, context)
            raise
        if not np.isfinite(loss.data):
            self._abort(terms, context)
        return loss, terms, bundle

    # epochs --------------------------------------------------------------------

    def fit(self, train_seqs: list, val_seqs: list | None = None) -> list:
        """Run the two-phase schedule, returning per-epoch history rows."""
        cfg = self.config
        n_frames = sum(len(s) for s in train_seqs)
        steps_per_epoch = int(np.ceil(n_frames / cfg.batch_size))
        total_steps = max(1, steps_per_epoch * cfg.epochs)
        single_frame_epochs = int(round(cfg.epochs * cfg.single_frame_fraction)) if cfg.stream else cfg.epochs

        opt_step = 0
        for epoch in range(cfg.epochs):
            streaming_phase = cfg.stream and epoch >= single_frame_epochs
            order_rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 3571, epoch])
            losses = []
            accumulated = 0

            def flush():
                nonlocal accumulated, opt_step
                if accumulated == 0:
                    return
                if accumulated > 1:
                    for t in self.opt.tensors:
                        if t.grad is not None:
                            t.grad = t.grad / accumulated
                self.opt.step(cosine_lr(cfg.lr, opt_step, total_steps))
                self.opt.zero_grad()
                opt_step += 1
                accumulated = 0

            if not streaming_phase:
                frames = [f for seq in train_seqs for f in seq]
                for idx in order_rng.permutation(len(frames)):
                    loss, _, _ = self._checked_frame_loss(
                        frames[idx], None, None, {"epoch": epoch, "frame": int(idx)}
                    )
                    loss.backward()
                    losses.append(float(loss.data))
                    self.global_step += 1
                    accumulated += 1
                    if accumulated >= cfg.batch_size:
                        flush()
            else:
                for si in order_rng.permutation(len(train_seqs)):
                    seq = train_seqs[si]
                    bundle, prev_gt = None, None
                    for ti, frame in enumerate(seq):
                        loss, _, bundle = self._checked_frame_loss(
                            frame, bundle, prev_gt, {"epoch": epoch, "sequence": int(si), "frame": ti}
                        )
                        loss.backward()
                        losses.append(float(loss.data))
                        prev_gt = frame.gt
                        self.global_step += 1
                        accumulated += 1
                        if accumulated >= cfg.batch_size:
                            flush()
            flush()

            row = {
                "epoch": epoch,
                "phase": "streaming" if streaming_phase else "single_frame",
                "steps": self.global_step,
                "train_loss": float(np.mean(losses)) if losses else None,
            }
            if val_seqs is not None:
                row["report"] = self.evaluate_sequences(val_seqs).to_dict()
            self.history.append(row)
            if self.out_dir:
                self._write_history()
        if self.out_dir:
            self.model.params.save(os.path.join(self.out_dir, "checkpoint"))
        return self.history

    def _write_history(self):
        path = os.path.join(self.out_dir, "metrics.jsonl")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            for row in self.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        os.replace(tmp, path)

    # evaluation ------------------------------------------------------------------

    def evaluate_sequences(self, seqs: list, min_confidence: float = 0.0) -> EvalReport:
        return evaluate_model(
            self.model,
            seqs,
            stream=self.config.stream,
            dynamic_pe=self.config.dbpe,
            min_confidence=min_confidence,
        )


def evaluate_model(
    model: LaneSegmentModel,
    seqs: list,
    stream: bool = True,
    dynamic_pe: bool = True,
    min_confidence: float = 0.0,
) -> EvalReport:
    """Run inference over sequences and score against their ground truth."""
    preds, gts = [], []
    with E.no_grad():
        for seq in seqs:
            bundle = None
            for frame in seq:
                result, bev, _ = stream_step(
                    model, frame, bundle if stream else None, dynamic_pe=dynamic_pe
                )
                preds.append(predictions_to_graph(result, min_confidence))
                gts.append(frame.gt)
                if stream:
                    bundle = make_bundle(model, result, bev, None, frame.pose)
    return evaluate(preds, gts)


# ablations ---------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("baseline", {"stream": False, "dbpe": False, "dn": False}),
    ("+dbpe", {"stream": False, "dbpe": True, "dn": False}),
    ("+dbpe+dn", {"stream": False, "dbpe": True, "dn": True}),
    ("+stream+dbpe+dn", {"stream": True, "dbpe": True, "dn": True}),
)


def ablate(
    model_config: ModelConfig,
    grid,
    train_seqs: list,
    val_seqs: list,
    base: TrainConfig,
    seeds=(0, 1, 2),
    out_dir: str | None = None,
    variants=ABLATION_VARIANTS,
) -> dict:
    """Train every flag variant across seeds; report per-variant medians."""
    rows = []
    for name, flags in variants:
        runs = []
        for seed in seeds:
            cfg = replace(base, seed=seed, **flags)
            model = LaneSegmentModel(model_config, grid, seed=seed)
            trainer = Trainer(model, cfg)
            trainer.fit(train_seqs)
            report = trainer.evaluate_sequences(val_seqs)
            runs.append(report.to_dict())
        def med(key):
            vals = [r[key] for r in runs if r[key] is not None]
            return float(np.median(vals)) if vals else None
        rows.append(
            {
                "variant": name,
                "map": med("map"),
                "acc_b": med("acc_b"),
                "top_lsls": med("top_lsls"),
                "ols": med("ols"),
                "seeds": list(seeds),
                "runs": runs,
            }
        )
    table = {"rows": rows}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json_atomic(table, os.path.join(out_dir, "ablation.json"), indent=2)
        text = format_ablation_table(rows)
        tmp = os.path.join(out_dir, f"ablation.txt.tmp.{os.getpid()}")
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, os.path.join(out_dir, "ablation.txt"))
    return table


def format_ablation_table(rows: list) -> str:
    """Aligned text table of the ablation medians."""
    headers = ("variant", "mAP", "Acc_b", "TOP_lsls", "OLS")
    body = []
    for r in rows:
        body.append(
            (
                r["variant"],
                *(
                    "-" if r[k] is None else f"{r[k]:.4f}"
                    for k in ("map", "acc_b", "top_lsls", "ols")
                ),
            )
        )
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for b in body:
        lines.append("  ".join(b[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines) + "\n"
