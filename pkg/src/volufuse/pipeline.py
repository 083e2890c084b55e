"""Two-step fusion: preprocessing, training of both steps, inference and ablations."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import losses, neural
from .losses import LossConfig
from .metrics import CaseReport, aggregate, evaluate_case, render_table, write_csv
from .neural import DiscriminatorConfig, GeneratorConfig, Network, OptimState
from .synthgen import Dataset
from .tiling import extract, plan_tiles, stitch
from .volcore import (
    IntensityStats,
    Volume,
    percentile_normalize,
    resample_trilinear,
    resize_to,
    standardize,
)

logger = logging.getLogger(__name__)

Shape3 = Tuple[int, int, int]

IDENTITY = "Identity"
LOW_RES = "LowRes"
PATCH_ONLY = "PatchOnly"
TWO_STEPS = "TwoSteps"
TWO_STEPS_AL = "TwoSteps+AL"
TWO_STEPS_AL_DW = "TwoSteps+AL+DW"
METHODS = (IDENTITY, LOW_RES, PATCH_ONLY, TWO_STEPS, TWO_STEPS_AL, TWO_STEPS_AL_DW)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    iso_spacing: float = 0.6
    global_shape: Shape3 = (32, 32, 32)
    patch_shape: Shape3 = (32, 32, 32)
    patch_overlap: Shape3 = (8, 8, 8)
    base_channels: int = 8
    depth: int = 3
    blocks_per_level: int = 1
    disc_channels: int = 8
    loss: LossConfig = field(default_factory=LossConfig)
    step1_beta: float = 0.0
    lr: float = 2e-3
    disc_lr: float = 2e-4
    lr_schedule: str = "constant"
    weight_decay: float = 1e-4
    epochs1: int = 40
    epochs2: int = 20
    batch_size: int = 4
    patches_per_case: int = 2
    val_every: int = 5
    percentiles: Tuple[float, float] = (0.02, 0.98)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        for name in ("global_shape", "patch_shape", "patch_overlap", "percentiles"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        div = 2 ** (self.depth - 1)
        for name in ("global_shape", "patch_shape"):
            if any(s % div for s in getattr(self, name)):
                raise ValueError(f"{name} {getattr(self, name)} must be divisible by {div}")

    def generator_config(self, in_channels: int) -> GeneratorConfig:
        return GeneratorConfig(in_channels, self.base_channels, self.depth, self.blocks_per_level)

    def disc_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(1, self.disc_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed config {path}: {exc}") from exc


@dataclass(frozen=True)
class MethodSpec:
    """Which parts of the two-step pipeline a configuration uses."""

    name: str
    step1: bool
    step2: bool
    beta: float = 0.0
    dw: bool = False

    @property
    def coarse_input(self) -> bool:
        return self.step1 and self.step2


def method_spec(name: str, cfg: PipelineConfig) -> MethodSpec:
    table = {
        IDENTITY: MethodSpec(IDENTITY, False, False),
        LOW_RES: MethodSpec(LOW_RES, True, False),
        PATCH_ONLY: MethodSpec(PATCH_ONLY, False, True),
        TWO_STEPS: MethodSpec(TWO_STEPS, True, True),
        TWO_STEPS_AL: MethodSpec(TWO_STEPS_AL, True, True, beta=cfg.loss.beta),
        TWO_STEPS_AL_DW: MethodSpec(TWO_STEPS_AL_DW, True, True, beta=cfg.loss.beta, dw=True),
    }
    try:
        return table[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {METHODS}") from None


# ------------------------------------------------------------------ pre/post


@dataclass(frozen=True)
class CaseMeta:
    original_shape: Shape3
    original_spacing: Tuple[float, float, float]
    stats: IntensityStats
    percentiles: Tuple[float, float]
    iso_shape: Shape3


def preprocess(v: Volume, cfg: PipelineConfig) -> Tuple[Volume, Volume, CaseMeta]:
    """Standardise, resample to isotropic spacing and derive the step-one global copy."""
    std, stats = standardize(v)
    iso = resample_trilinear(std, (cfg.iso_spacing,) * 3)
    glob = resize_to(iso, cfg.global_shape)
    meta = CaseMeta(v.shape, v.spacing, stats, tuple(cfg.percentiles), iso.shape)
    return iso, glob, meta


def postprocess(out_iso: Volume, meta: CaseMeta) -> Volume:
    """Back to the original grid, then percentile normalisation."""
    out = resize_to(out_iso, meta.original_shape)
    out = out.with_data(out.data, spacing=meta.original_spacing)
    return percentile_normalize(out, *meta.percentiles)


# ------------------------------------------------------------------ inference


def _predict(gen, x: np.ndarray) -> np.ndarray:
    out = np.asarray(gen(x), dtype=np.float32)
    if out.shape != (x.shape[0], 1) + x.shape[2:]:
        raise neural.ShapeError(f"generator returned {out.shape} for input {x.shape}")
    return out


def predict_coarse(gen1, glob: Volume, iso_shape: Shape3) -> Volume:
    """Step one on the global copy, upsampled to the isotropic grid."""
    pred = _predict(gen1, glob.data[None, None])[0, 0]
    return resize_to(glob.with_data(pred), iso_shape)


def predict_patches(gen2, iso: Volume, coarse: Optional[Volume], cfg: PipelineConfig, batch: int = 4) -> Volume:
    """Step two over an overlapping tile grid; the input has 1 or 2 channels."""
    chans = [iso.data] if coarse is None else [iso.data, coarse.data]
    expected = getattr(gen2, "in_channels", len(chans))
    if expected != len(chans):
        raise neural.ShapeError(f"step-two generator expects {expected} channels, pipeline provides {len(chans)}")
    stack = np.stack(chans)
    grid = plan_tiles(iso.shape, cfg.patch_shape, cfg.patch_overlap)
    preds: List[np.ndarray] = []
    for start in range(0, len(grid), batch):
        idx = range(start, min(start + batch, len(grid)))
        x = np.stack([extract(stack, grid, i) for i in idx])
        preds.extend(_predict(gen2, x)[:, 0])
    return stitch(preds, grid, template=iso)


def blend_with_input(iso: Volume, raw: Volume, cfg: PipelineConfig) -> Volume:
    """Max-filter the raw prediction, then difference-weight it against the input."""
    smoothed = losses.max_filter(raw, cfg.loss.max_filter_radius)
    w = losses.difference_weight(iso, smoothed, cfg.loss.weight_epsilon)
    return losses.apply_difference_weighting(iso, smoothed, w)


def fuse_iso(iso: Volume, glob: Volume, gen1, gen2, cfg: PipelineConfig, dw: bool = False) -> Volume:
    """Fusion on the isotropic grid (standardised intensity space)."""
    coarse = predict_coarse(gen1, glob, iso.shape) if gen1 is not None else None
    if gen2 is not None:
        raw = predict_patches(gen2, iso, coarse, cfg)
    elif coarse is not None:
        raw = coarse
    else:
        raw = iso
    if dw:
        return blend_with_input(iso, raw, cfg)
    return raw


def fuse(v: Volume, gen1, gen2, cfg: PipelineConfig, dw: Optional[bool] = None) -> Volume:
    """Full two-step fusion of one single-view volume.

    ``gen1``/``gen2`` are callables mapping ``(B, C, z, y, x)`` arrays to
    ``(B, 1, z, y, x)`` (e.g. :class:`~volufuse.neural.Network`); either may be
    ``None`` to run the low-resolution-only or patch-only variants.
    Difference weighting defaults to on whenever step two runs.
    """
    if dw is None:
        dw = gen2 is not None
    iso, glob, meta = preprocess(v, cfg)
    out = postprocess(fuse_iso(iso, glob, gen1, gen2, cfg, dw=dw), meta)
    return out.with_data(out.data, name=f"{v.name}_fused", channel=v.channel)


# ------------------------------------------------------------------- training


@dataclass
class PreparedCase:
    case_id: str
    channel: str
    split: str
    input: Volume
    gt: Volume
    iso: Volume
    glob: Volume
    iso_gt: Volume
    glob_gt: Volume
    meta: CaseMeta
    coarse: Optional[Volume] = None


def prepare_cases(dataset: Dataset, cfg: PipelineConfig, splits=("train", "val")) -> List[PreparedCase]:
    out = []
    for case in dataset.cases:
        if case["split"] not in splits:
            continue
        inp, gt = dataset.pair(case)
        iso, glob, meta = preprocess(inp, cfg)
        iso_gt, glob_gt, _ = preprocess(gt, cfg)
        out.append(PreparedCase(case["id"], case["channel"], case["split"], inp, gt, iso, glob, iso_gt, glob_gt, meta))
    return out


def _random_flips(rng: np.random.Generator, arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
    axes = tuple(a for a in range(-3, 0) if rng.random() < 0.5)
    if not axes:
        return list(arrays)
    return [np.flip(a, axis=axes) for a in arrays]


def _clone(params: neural.ParameterSet) -> neural.ParameterSet:
    return {k: v.detach().clone() for k, v in params.items()}


class _Trainer:
    """Generator (plus optional discriminator) with two independent AdamW states."""

    def __init__(self, gen_cfg: GeneratorConfig, cfg: PipelineConfig, beta: float, seed_offset: int):
        self.cfg = cfg
        self.gen_cfg = gen_cfg
        self.beta = beta
        self.loss_cfg = replace(cfg.loss, beta=beta)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_offset]))
        self.gen = neural.requires_grad(neural.init_params(gen_cfg, rng))
        self.gen_opt = OptimState.for_params(self.gen, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.disc = self.disc_opt = None
        if beta > 0:
            self.disc_cfg = cfg.disc_config()
            self.disc = neural.requires_grad(neural.init_params(self.disc_cfg, rng))
            self.disc_opt = OptimState.for_params(self.disc, lr=cfg.disc_lr, weight_decay=cfg.weight_decay)

    def step(self, x: torch.Tensor, y: torch.Tensor, dw: bool) -> Dict[str, float]:
        o = neural.runet_forward(self.gen, x, self.gen_cfg)
        if dw:
            i = x[:, :1]
            w = losses.difference_weight(i, o, self.cfg.loss.weight_epsilon, per_sample=True)
            o = losses.apply_difference_weighting(i, o, w)
        logits = neural.disc_forward(self.disc, o, self.disc_cfg) if self.disc is not None else None
        g_loss = losses.generator_loss(o, y, logits, self.loss_cfg)
        if not torch.isfinite(g_loss):
            raise TrainingDivergedError(f"non-finite generator loss at step {self.gen_opt.step}")
        grads = neural.backward(g_loss, self.gen)
        neural.adamw_step(self.gen, grads, self.gen_opt)
        out = {"g_loss": float(g_loss.detach()), "mae": float(losses.mae(o.detach(), y))}
        if self.disc is not None:
            d_loss = losses.discriminator_loss(
                neural.disc_forward(self.disc, y, self.disc_cfg),
                neural.disc_forward(self.disc, o.detach(), self.disc_cfg),
            )
            if not torch.isfinite(d_loss):
                raise TrainingDivergedError(f"non-finite discriminator loss at step {self.disc_opt.step}")
            neural.adamw_step(self.disc, neural.backward(d_loss, self.disc), self.disc_opt)
            out["d_loss"] = float(d_loss.detach())
        return out

    def set_progress(self, fraction: float) -> None:
        """Scale both learning rates for the given fraction of training completed."""
        scale = 1.0
        if self.cfg.lr_schedule == "cosine":
            scale = 0.5 * (1.0 + math.cos(math.pi * fraction))
        self.gen_opt.lr = self.cfg.lr * scale
        if self.disc_opt is not None:
            self.disc_opt.lr = self.cfg.disc_lr * scale

    def optimizer_steps(self) -> Dict[str, int]:
        steps = {"generator": self.gen_opt.step}
        if self.disc_opt is not None:
            steps["discriminator"] = self.disc_opt.step
        return steps

    def network(self, params=None) -> Network:
        return Network(_clone(self.gen if params is None else params), self.gen_cfg)


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    network: Network
    history: List[dict]
    best_epoch: int
    best_val_nssim: float
    optimizer_steps: Dict[str, int] = field(default_factory=dict)


def _mean_val_nssim(cases: Sequence[PreparedCase], predict) -> float:
    scores = []
    for c in cases:
        inp, out, gt = predict(c)
        scores.append(evaluate_case(inp, out, gt, c.channel, with_niou=False).nssim)
    return float(np.mean(scores)) if scores else math.nan


def _fit(trainer: _Trainer, epochs: int, batches, validate, dw: bool, label: str) -> Tuple[dict, List[dict], int, float]:
    history = []
    best = (-math.inf, 0, _clone(trainer.gen))
    for epoch in range(1, epochs + 1):
        t0 = time.time()
        trainer.set_progress((epoch - 1) / epochs)
        stats = [trainer.step(x, y, dw) for x, y in batches(epoch)]
        row = {"epoch": epoch, **{k: float(np.mean([s[k] for s in stats])) for k in stats[0]}}
        if epoch % trainer.cfg.val_every == 0 or epoch == epochs:
            row["val_nssim"] = validate(trainer.network())
            if row["val_nssim"] > best[0]:
                best = (row["val_nssim"], epoch, _clone(trainer.gen))
        # wall time goes to the log only; saved histories must be reproducible
        history.append(row)
        logger.info(
            "%s epoch %d (%.1fs): %s", label, epoch, time.time() - t0, {k: round(v, 5) for k, v in row.items() if k != "epoch"}
        )
    return best[2], history, best[1], best[0]


def _selection_extra(history: List[dict], best_epoch: int, best: float) -> dict:
    val = [(r["epoch"], r["val_nssim"]) for r in history if "val_nssim" in r]
    worst = min(val, key=lambda t: t[1]) if val else (0, math.nan)
    return {
        "best_epoch": best_epoch,
        "best_val_mean_nssim": best,
        "min_val_mean_nssim_epoch": worst[0],
        "min_val_mean_nssim": worst[1],
        "history": history,
    }


def train_step1(
    dataset: Union[Dataset, Sequence[PreparedCase]],
    cfg: PipelineConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train the global low-resolution generator on whole downsampled volumes."""
    cases = prepare_cases(dataset, cfg) if isinstance(dataset, Dataset) else list(dataset)
    train = [c for c in cases if c.split == "train"]
    val = [c for c in cases if c.split == "val"]
    if not train:
        raise ValueError("dataset has no training cases")
    gen_cfg = cfg.generator_config(1)
    trainer = _Trainer(gen_cfg, cfg, cfg.step1_beta, seed_offset=1)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))

    def batches(epoch):
        order = rng.permutation(len(train))
        for s in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for k in order[s : s + cfg.batch_size]:
                x, y = _random_flips(rng, [train[k].glob.data, train[k].glob_gt.data])
                xs.append(x[None])
                ys.append(y[None])
            yield torch.from_numpy(np.ascontiguousarray(xs)), torch.from_numpy(np.ascontiguousarray(ys))

    def validate(net):
        def predict(c):
            pred = c.glob.with_data(_predict(net, c.glob.data[None, None])[0, 0])
            return c.glob, pred, c.glob_gt

        return _mean_val_nssim(val, predict) if val else math.nan

    best, history, best_epoch, best_score = _fit(trainer, cfg.epochs1, batches, validate, False, "step1")
    ckpt = None
    if out_dir is not None:
        ckpt = neural.save_checkpoint(
            out_dir, best, gen_cfg, trainer.gen_opt.step, _selection_extra(history, best_epoch, best_score)
        )
    return TrainResult(ckpt, Network(best, gen_cfg), history, best_epoch, best_score, trainer.optimizer_steps())


def attach_coarse(cases: Sequence[PreparedCase], gen1) -> None:
    for c in cases:
        c.coarse = predict_coarse(gen1, c.glob, c.iso.shape) if gen1 is not None else None


def train_step2(
    dataset: Union[Dataset, Sequence[PreparedCase]],
    gen1,
    cfg: PipelineConfig,
    out_dir: Optional[Union[str, Path]] = None,
    beta: Optional[float] = None,
    dw: bool = True,
) -> TrainResult:
    """Train the high-resolution patch generator.

    With ``gen1`` the generator sees two channels (view patch, upsampled
    step-one prediction); with ``gen1=None`` it sees the view patch only.
    ``beta=0`` disables the adversarial term and the discriminator.
    """
    cases = prepare_cases(dataset, cfg) if isinstance(dataset, Dataset) else list(dataset)
    beta = cfg.loss.beta if beta is None else beta
    attach_coarse(cases, gen1)
    train = [c for c in cases if c.split == "train"]
    val = [c for c in cases if c.split == "val"]
    if not train:
        raise ValueError("dataset has no training cases")
    in_ch = 1 if gen1 is None else 2
    gen_cfg = cfg.generator_config(in_ch)
    trainer = _Trainer(gen_cfg, cfg, beta, seed_offset=2)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))
    ps = cfg.patch_shape

    def sample(c: PreparedCase):
        vols = [c.iso.data] + ([c.coarse.data] if c.coarse is not None else []) + [c.iso_gt.data]
        shape = c.iso.shape
        pads = [(0, max(0, p - s)) for p, s in zip(ps, shape)]
        if any(p for _, p in pads):
            vols = [np.pad(v, pads, mode="reflect") for v in vols]
            shape = vols[0].shape
        off = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, ps)]
        sl = tuple(slice(o, o + p) for o, p in zip(off, ps))
        crops = _random_flips(rng, [v[sl] for v in vols])
        return np.stack(crops[:-1]), crops[-1][None]

    def batches(epoch):
        items = np.repeat(np.arange(len(train)), cfg.patches_per_case)
        order = rng.permutation(items)
        for s in range(0, len(order), cfg.batch_size):
            pairs = [sample(train[k]) for k in order[s : s + cfg.batch_size]]
            x = np.ascontiguousarray(np.stack([p[0] for p in pairs]), dtype=np.float32)
            y = np.ascontiguousarray(np.stack([p[1] for p in pairs]), dtype=np.float32)
            yield torch.from_numpy(x), torch.from_numpy(y)

    def validate(net):
        def predict(c):
            raw = predict_patches(net, c.iso, c.coarse, cfg)
            out = blend_with_input(c.iso, raw, cfg) if dw else raw
            return c.iso, out, c.iso_gt

        return _mean_val_nssim(val, predict) if val else math.nan

    best, history, best_epoch, best_score = _fit(trainer, cfg.epochs2, batches, validate, dw, "step2")
    ckpt = None
    if out_dir is not None:
        extra = _selection_extra(history, best_epoch, best_score)
        extra.update({"beta": beta, "difference_weighting": dw, "optimizer_steps": trainer.optimizer_steps()})
        ckpt = neural.save_checkpoint(out_dir, best, gen_cfg, trainer.gen_opt.step, extra)
    return TrainResult(ckpt, Network(best, gen_cfg), history, best_epoch, best_score, trainer.optimizer_steps())


# ------------------------------------------------------------------ ablations


@dataclass
class AblationResult:
    reports: List[CaseReport]
    table: str
    summary: Dict[str, Dict[str, float]]


def _summary(reports: Sequence[CaseReport]) -> Dict[str, Dict[str, float]]:
    out = {}
    for m in METHODS:
        rows = [r for r in reports if r.method == m]
        if rows:
            out[m] = {f: float(np.mean([getattr(r, f) for r in rows])) for f in ("ssim", "mae", "nssim", "niou")}
            out[m]["median_nssim"] = float(np.median([r.nssim for r in rows]))
    return out


def evaluate_method(cases: Sequence[PreparedCase], spec: MethodSpec, gen1, gen2, cfg: PipelineConfig) -> List[CaseReport]:
    reports = []
    for c in cases:
        if not (spec.step1 or spec.step2):
            # the identity mapping returns the view untouched
            out = c.input
        else:
            out_iso = fuse_iso(c.iso, c.glob, gen1 if spec.step1 else None, gen2 if spec.step2 else None, cfg, dw=spec.dw)
            out = postprocess(out_iso, c.meta)
        reports.append(evaluate_case(c.input, out, c.gt, c.channel, case_id=c.case_id, method=spec.name))
    return reports


def run_ablations(
    dataset: Union[Dataset, str, Path],
    cfg: PipelineConfig,
    out_dir: Optional[Union[str, Path]] = None,
    methods: Sequence[str] = METHODS,
) -> AblationResult:
    """Train every configuration on the same split and score it on the validation cases."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    cases = prepare_cases(dataset, cfg)
    val = [c for c in cases if c.split == "val"]
    specs = [method_spec(m, cfg) for m in methods]
    ckpt = (lambda name: out_dir / "checkpoints" / name) if out_dir is not None else (lambda name: None)

    gen1 = None
    if any(s.step1 for s in specs):
        logger.info("training step one")
        gen1 = train_step1(cases, cfg, ckpt("step1")).network
    reports: List[CaseReport] = []
    for spec in specs:
        gen2 = None
        if spec.step2:
            logger.info("training step two for %s", spec.name)
            gen2 = train_step2(
                cases, gen1 if spec.coarse_input else None, cfg, ckpt(spec.name), beta=spec.beta, dw=spec.dw
            ).network
        reports.extend(evaluate_method(val, spec, gen1, gen2, cfg))
    table = render_table(aggregate(reports), methods=[s.name for s in specs])
    if out_dir is not None:
        write_csv(reports, out_dir / "ablation.csv")
        (out_dir / "ablation.txt").write_text(table)
    return AblationResult(reports, table, _summary(reports))
