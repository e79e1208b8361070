"""Loss assembly, desk-scale training/evaluation and the four-row ablation."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, so2
from . import engine as E
from .config import RunConfig, config_hash
from .errors import DelivrError, ShapeError
from .metrics import psnr, ssim
from .model import DelivrModel
from .optim import AdamW, cosine_lr
from .synth import clip_batch

REPORT_SCHEMA = 1
ABLATION_ROWS = (("a", "baseline", "Baseline"),
                 ("b", "space", "+ B_space"),
                 ("c", "time", "+ B_space + B_time"),
                 ("d", "full", "+ B_space + B_time + D&M"))
EVAL_BATCH = 8


class TrainingDiverged(DelivrError, RuntimeError):
    def __init__(self, step, breakdown, angle_stats):
        self.step = step
        self.breakdown = breakdown
        self.angle_stats = angle_stats
        super().__init__(f"non-finite loss at step {step}: {breakdown} angles {angle_stats}")


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    r_theta: float
    r_v: float
    total: float
    lambda_theta: float
    lambda_v: float

    def residual(self) -> float:
        """|total - (rec + l_theta r_theta + l_v r_v)|; zero up to rounding."""
        return abs(self.total - (self.rec + self.lambda_theta * self.r_theta + self.lambda_v * self.r_v))


def compute_loss(pred, target, angles, velocities=None, lambda_theta=0.02, lambda_v=0.02,
                 beta=0.5) -> LossBreakdown:
    """Reference loss on plain arrays for a single clip.

    ``angles`` has one entry per frame; ``velocities`` defaults to the Lie
    velocities of ``angles`` (an empty sequence when fewer than two frames).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("compute_loss", pred.shape, target.shape)
    angles = np.asarray(angles, dtype=np.float64).ravel()
    if velocities is None:
        velocities = so2.velocity_sequence(angles) if angles.size >= 2 else np.zeros(0)
    rec = float(np.mean(np.abs(pred - target)))
    r_theta = so2.rotation_reg(angles)
    r_v = so2.velocity_reg(velocities, beta) if len(velocities) else 0.0
    total = rec + lambda_theta * r_theta + lambda_v * r_v
    return LossBreakdown(rec, r_theta, r_v, total, lambda_theta, lambda_v)


def loss_tensor(result, target, lambda_theta, lambda_v, beta):
    """Differentiable hybrid loss averaged over the batch; returns ``(loss, breakdown)``."""
    target = E.Tensor(np.asarray(target, dtype=result.frame.dtype))
    if result.frame.shape != target.shape:
        raise ShapeError("loss", result.frame.shape, target.shape)
    rec = E.abs_(result.frame - target).mean()
    angles = result.angles
    r_theta = (angles * angles).mean()
    v = result.velocities
    if v.shape[1] == 0:
        r_v = E.Tensor(np.zeros((), dtype=rec.dtype))
    else:
        r_v = v.mean() * (1.0 - beta)
        if v.shape[1] > 1:
            r_v = r_v + E.abs_(v[:, 1:] - v[:, :-1]).mean() * beta
    total = rec + r_theta * lambda_theta + r_v * lambda_v
    rec_f, rt_f, rv_f = float(rec.item()), float(r_theta.item()), float(r_v.item())
    breakdown = LossBreakdown(rec_f, rt_f, rv_f, rec_f + lambda_theta * rt_f + lambda_v * rv_f,
                              lambda_theta, lambda_v)
    return total, breakdown


def train_seeds(cfg: RunConfig) -> np.ndarray:
    n = cfg.train.train_clips
    return cfg.synth.seed * n + np.arange(n)


def eval_seeds(cfg: RunConfig) -> np.ndarray:
    return cfg.train.eval_seed_offset + np.arange(cfg.train.eval_clips)


def build_model(cfg: RunConfig) -> DelivrModel:
    s = cfg.synth
    return DelivrModel(cfg.model, cfg.bias, (s.height, s.width, s.channels))


def _angle_corr(pred, true):
    """Pearson correlation of per-clip centred angles (relative rotation recovery)."""
    p = pred - pred.mean(axis=1, keepdims=True)
    t = true - true.mean(axis=1, keepdims=True)
    p, t = p.ravel(), t.ravel()
    if p.std() == 0 or t.std() == 0:
        return None
    return float(np.corrcoef(p, t)[0, 1])


def _spread(values) -> float:
    """Std of the finite entries; exact reconstructions (PSNR = inf) carry no spread."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(np.std(v)) if v.size else 0.0


def evaluate(model: DelivrModel, cfg: RunConfig, seeds=None) -> dict:
    """Metrics on freshly generated clips (the eval seeds by default)."""
    seeds = eval_seeds(cfg) if seeds is None else np.asarray(seeds)
    batches = (clip_batch(cfg.synth, seeds[i:i + EVAL_BATCH]) for i in range(0, len(seeds), EVAL_BATCH))
    return evaluate_batches(model, batches)


def evaluate_samples(model: DelivrModel, samples) -> dict:
    """Metrics on a list of :class:`~delivr.synth.ClipSample` (e.g. a stored dataset)."""
    def batches():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i:i + EVAL_BATCH]
            yield (np.stack([c.rainy for c in chunk]), np.stack([c.clean_center for c in chunk]),
                   np.stack([c.true_angles for c in chunk]))
    return evaluate_batches(model, batches())


def evaluate_batches(model: DelivrModel, batches) -> dict:
    psnrs, ssims, in_psnrs, preds, trues = [], [], [], [], []
    c = model.cfg.frames // 2
    with E.no_grad():
        for x, y, ang in batches:
            res = model(x)
            out = np.clip(res.frame.data.astype(np.float64), 0.0, 1.0)
            for k in range(len(out)):
                psnrs.append(psnr(out[k], y[k]))
                ssims.append(ssim(out[k], y[k]))
                in_psnrs.append(psnr(x[k, c], y[k]))
            preds.append(res.angles.data.astype(np.float64))
            trues.append(ang)
    return {
        "psnr_mean": float(np.mean(psnrs)), "psnr_std": _spread(psnrs),
        "ssim_mean": float(np.mean(ssims)), "ssim_std": float(np.std(ssims)),
        "input_psnr_mean": float(np.mean(in_psnrs)),
        "angle_corr": _angle_corr(np.concatenate(preds), np.concatenate(trues)),
        "n_clips": int(len(psnrs)),
    }


@dataclass
class RunReport:
    config_hash: str
    config: dict
    steps: int
    history: list = field(default_factory=list)
    eval: dict = field(default_factory=dict)
    train_seed_range: list = field(default_factory=list)
    eval_seed_range: list = field(default_factory=list)
    seeds_disjoint: bool = True
    wall_clock_s: float = 0.0
    schema_version: int = REPORT_SCHEMA

    def to_json(self) -> str:
        """Deterministic JSON body; wall-clock time is kept out of it."""
        body = asdict(self)
        body.pop("wall_clock_s")
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def train(cfg: RunConfig, out_dir=None, log=None) -> tuple:
    """Train one model; returns ``(RunReport, model)``.

    ``log`` is an optional writable text stream receiving JSON lines. When
    ``out_dir`` is given, ``report.json``, ``model.dlvc``, ``train.jsonl`` and
    ``timing.json`` are written there.
    """
    t0 = time.perf_counter()
    tc = cfg.train
    tr_seeds, ev_seeds = train_seeds(cfg), eval_seeds(cfg)
    disjoint = not set(tr_seeds.tolist()) & set(ev_seeds.tolist())
    assert disjoint, "train and eval seeds overlap"
    model = build_model(cfg)
    opt = AdamW(model.params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([cfg.model.seed, cfg.synth.seed, 0x545241])
    out = Path(out_dir) if out_dir is not None else None
    lines = []

    def emit(record):
        line = json.dumps(record, sort_keys=True)
        lines.append(line)
        if log is not None:
            log.write(line + "\n")
            log.flush()

    history = []
    for step in range(tc.steps):
        idx = rng.integers(0, len(tr_seeds), size=tc.batch)
        x, y, _ = clip_batch(cfg.synth, tr_seeds[idx])
        model.zero_grad()
        res = model(x)
        loss, bd = loss_tensor(res, y, tc.lambda_theta, tc.lambda_v, tc.beta)
        ang = res.angles.data
        if not math.isfinite(bd.total):
            stats = {"mean": float(np.mean(ang)), "min": float(np.min(ang)), "max": float(np.max(ang))}
            raise TrainingDiverged(step, bd, stats)
        loss.backward()
        opt.lr = cosine_lr(step, tc.steps, tc.lr, tc.lr_min)
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            rec = {"step": step, "lr": opt.lr, **asdict(bd),
                   "angle_abs_mean": float(np.mean(np.abs(ang))),
                   "velocity_mean": float(np.mean(res.velocities.data)) if res.velocities.size else 0.0}
            history.append(rec)
            emit(rec)
    metrics = evaluate(model, cfg, ev_seeds)
    emit({"event": "eval", **metrics})
    report = RunReport(
        config_hash=cfg.hash(), config=cfg.to_dict(), steps=tc.steps, history=history,
        eval=metrics, train_seed_range=[int(tr_seeds.min()), int(tr_seeds.max())],
        eval_seed_range=[int(ev_seeds.min()), int(ev_seeds.max())], seeds_disjoint=disjoint,
        wall_clock_s=time.perf_counter() - t0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        checkpoint.save(out / "model.dlvc", model.params)
        (out / "train.jsonl").write_text("".join(l + "\n" for l in lines))
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock_s}) + "\n")
    return report, model


HEAD_PARAMS = ("head.w1", "head.b1", "head.w2", "head.b2")


def orientation_scene(cfg: RunConfig) -> RunConfig:
    """Rain-free, texture-free variant of ``cfg`` whose only content is the
    brightness ramp, so each frame's absolute rotation is identifiable from
    its mean patch."""
    return cfg.replace(**{"synth.horizon_ramp": 1.0, "synth.streak_density": 0.0,
                          "synth.noise_sigma": 0.0})


def train_head(cfg: RunConfig, steps: int = 500, lr: float = 3e-3, seed: int | None = None,
               eval_clips: int = 32):
    """Fit only the SO(2) head MLP to ground-truth angles with a squared-error
    loss; the patch embedding keeps its initial weights.

    Returns ``(history, heldout_mse)`` with the held-out MSE measured on the
    eval seeds.
    """
    if seed is not None:
        cfg = cfg.replace(**{"model.seed": int(seed), "synth.seed": int(seed)})
    model = build_model(cfg)
    params = {k: model.params[k] for k in HEAD_PARAMS}
    opt = AdamW(params, lr=lr)
    tr_seeds = train_seeds(cfg)
    rng = np.random.default_rng([cfg.model.seed, cfg.synth.seed, 0x484541])
    T = cfg.model.frames
    history = []
    for step in range(steps):
        x, _, ang = clip_batch(cfg.synth, tr_seeds[rng.integers(0, len(tr_seeds), cfg.train.batch)])
        with E.no_grad():
            tokens = model.patch_embed(x)
        model.zero_grad()
        _, pred = model.so2_head(tokens, T)
        err = pred - E.Tensor(ang.astype(model.dtype))
        loss = (err * err).mean()
        history.append(float(loss.item()))
        loss.backward()
        opt.lr = cosine_lr(step, steps, lr, lr * 0.01)
        opt.step()
    ev = eval_seeds(cfg)[:eval_clips]
    sq = []
    with E.no_grad():
        for i in range(0, len(ev), EVAL_BATCH):
            x, _, ang = clip_batch(cfg.synth, ev[i:i + EVAL_BATCH])
            _, pred = model.so2_head(model.patch_embed(x), T)
            sq.append(((pred.data.astype(np.float64) - ang) ** 2).ravel())
    return history, float(np.mean(np.concatenate(sq)))


def load_model(cfg: RunConfig, path) -> DelivrModel:
    model = build_model(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model


def ablate(cfg: RunConfig, seeds=(0, 1, 2), out_dir=None, log=None) -> dict:
    """Train rows (a)-(d) for every seed with identical budgets.

    Returns ``{"rows": [...], "reports": {(row, seed): RunReport}}``; each row
    summarises PSNR/SSIM mean and std across seeds.
    """
    reports, rows = {}, []
    for key, mode, label in ABLATION_ROWS:
        psnrs, ssims = [], []
        for s in seeds:
            run_cfg = cfg.replace(**{"model.ablation": mode, "model.seed": int(s), "synth.seed": int(s)})
            sub = Path(out_dir) / f"{key}_{mode}_seed{s}" if out_dir is not None else None
            report, _ = train(run_cfg, sub, log)
            reports[(key, int(s))] = report
            psnrs.append(report.eval["psnr_mean"])
            ssims.append(report.eval["ssim_mean"])
        rows.append({"row": key, "ablation": mode, "label": label,
                     "psnr_mean": float(np.mean(psnrs)), "psnr_std": float(np.std(psnrs)),
                     "ssim_mean": float(np.mean(ssims)), "ssim_std": float(np.std(ssims)),
                     "psnr_per_seed": [float(p) for p in psnrs]})
    base = rows[0]["psnr_mean"]
    for r in rows:
        r["delta_psnr"] = r["psnr_mean"] - base
    result = {"rows": rows, "reports": reports, "seeds": [int(s) for s in seeds],
              "config_hash": config_hash(cfg.to_dict())}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
        (out / "ablation.md").write_text(ablation_markdown(rows))
    return result


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "ablation", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "delta_psnr"])
    for r in rows:
        w.writerow([r["row"], r["ablation"], f"{r['psnr_mean']:.4f}", f"{r['psnr_std']:.4f}",
                    f"{r['ssim_mean']:.4f}", f"{r['ssim_std']:.4f}", f"{r['delta_psnr']:+.4f}"])
    return buf.getvalue()


def ablation_markdown(rows) -> str:
    marks = {"baseline": (0, 0, 0), "space": (1, 0, 0), "time": (1, 1, 0), "full": (1, 1, 1)}
    out = ["| Model | Baseline | B_space | B_time | D&M | PSNR | SSIM | dPSNR |",
           "| --- | :-: | :-: | :-: | :-: | --- | --- | --- |"]
    for r in rows:
        cols = ["x" if m else "" for m in marks[r["ablation"]]]
        out.append(f"| ({r['row']}) | x | {' | '.join(cols)} | {r['psnr_mean']:.2f} ± {r['psnr_std']:.2f} "
                   f"| {r['ssim_mean']:.4f} ± {r['ssim_std']:.4f} | {r['delta_psnr']:+.2f} |")
    return "\n".join(out) + "\n"
