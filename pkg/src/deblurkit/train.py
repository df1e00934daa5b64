"""Training engine: losses, schedules, EMA, staged plans with model surgery.

A plan is an ordered list of stages.  Each stage may first rewrite parts of
the model (swap the first conv kernel, insert the middle global-attention
module, switch the first/last convs to their multi-branch train form), then
trains for a fixed number of steps with its own patch size, batch size,
learning rate, and loss mix, while an exponential moving average of the
weights is maintained for evaluation.

Determinism contract: batches are sampled with a per-step seeded generator
derived from (seed, stage, step), so a run is bit-reproducible on one device
and can resume mid-stage from the saved train state without diverging from
the uninterrupted run.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from . import inference
from .arch_core import GlobalChannelAttention
from .data_io import DatasetIndex, IndexEntry, load_pair, random_crop_pair
from .metrics import PerceptualBackend, psnr
from .models import ModelConfig, NAFNetFamily, save_checkpoint
from .reparam import RepConv, RepConvSpec

LOSS_NAMES = ("l1", "psnr", "edge", "perceptual")
SURGERY_ACTIONS = (
    "swap_first_conv_k5",
    "swap_first_conv_k3",
    "insert_middle_scag",
    "enable_reparam",
    "none",
)
PSNR_LOSS_FLOOR = 1e-8


class PlanError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def loss_psnr(pred: torch.Tensor, gt: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Negative PSNR in dB; minimizing it raises PSNR.

    The MSE is floored at 1e-8 for stability, so identical inputs give -80 dB.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = ((pred - gt) ** 2).mean().clamp_min(PSNR_LOSS_FLOOR)
    return -10.0 * torch.log10(peak * peak / err)


_SOBEL_X = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel_magnitude(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-channel Sobel gradient magnitude with replicate padding.

    Replicate padding keeps constant images edge-free at the borders.
    """
    c = x.shape[1]
    kx = _SOBEL_X.to(x.dtype).to(x.device).expand(c, 1, 3, 3)
    ky = _SOBEL_Y.to(x.dtype).to(x.device).expand(c, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return torch.sqrt(gx * gx + gy * gy + eps)


def loss_edge(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (sobel_magnitude(pred) - sobel_magnitude(gt)).abs().mean()


def loss_perceptual(
    pred: torch.Tensor, gt: torch.Tensor, backend: PerceptualBackend
) -> torch.Tensor:
    """Mean squared error between raw (un-normalized) feature stacks.

    With the stub identity backend this is exactly the pixel MSE.
    """
    if backend is None:
        raise ValueError("perceptual loss requires a backend")
    total = None
    for fp, fg in zip(backend.features(pred), backend.features(gt)):
        layer = ((fp.activations - fg.activations) ** 2).mean()
        total = layer if total is None else total + layer
    return total


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 1e-3
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise PlanError("betas must lie in (0, 1)")
        if self.lr_min > self.lr0:
            raise PlanError("lr_min must not exceed lr0")
        if self.warmup_steps < 0:
            raise PlanError("warmup_steps must be >= 0")


@dataclass(frozen=True)
class Stage:
    name: str
    patch: int
    batch: int
    steps: int
    lr0: float
    losses: tuple[tuple[str, float], ...] = (("l1", 1.0),)
    surgery: tuple[str, ...] = ()
    ema_decay: float = 0.999
    checkpoint_every: int = 0  # 0: only at stage end

    def validate(self) -> list[str]:
        problems = []
        if self.steps <= 0:
            problems.append(f"stage {self.name}: steps must be > 0")
        if self.patch <= 0 or self.batch <= 0:
            problems.append(f"stage {self.name}: patch and batch must be > 0")
        if self.patch % 16 != 0:
            problems.append(f"stage {self.name}: patch must be divisible by 16")
        if not self.losses or all(w == 0 for _, w in self.losses):
            problems.append(f"stage {self.name}: at least one positive loss weight")
        for name, weight in self.losses:
            if name not in LOSS_NAMES:
                problems.append(f"stage {self.name}: unknown loss {name!r}")
            if weight < 0:
                problems.append(f"stage {self.name}: negative weight for {name}")
        for action in self.surgery:
            if action not in SURGERY_ACTIONS:
                problems.append(f"stage {self.name}: unknown surgery {action!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            problems.append(f"stage {self.name}: ema_decay must lie in [0, 1)")
        return problems


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]
    optimizer: OptimizerConfig = OptimizerConfig()

    def validate(self) -> list[str]:
        problems = []
        if not self.stages:
            problems.append("plan has no stages")
        for stage in self.stages:
            problems.extend(stage.validate())
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            problems.append("stage names must be unique")
        return problems

    def to_dict(self) -> dict:
        return {
            "optimizer": dataclasses.asdict(self.optimizer),
            "stages": [
                {
                    "name": s.name,
                    "patch": s.patch,
                    "batch": s.batch,
                    "steps": s.steps,
                    "lr0": s.lr0,
                    "losses": {name: weight for name, weight in s.losses},
                    "surgery": list(s.surgery),
                    "ema_decay": s.ema_decay,
                    "checkpoint_every": s.checkpoint_every,
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StagePlan":
        if not isinstance(data, dict) or "stages" not in data:
            raise PlanError("plan must be a mapping with a 'stages' list")
        try:
            opt = OptimizerConfig(**data.get("optimizer", {}))
        except TypeError as exc:
            raise PlanError(f"bad optimizer section: {exc}") from exc
        stages = []
        for i, raw in enumerate(data["stages"]):
            raw = dict(raw)
            raw.setdefault("name", f"stage{i + 1}")
            losses = raw.get("losses", {"l1": 1.0})
            if isinstance(losses, dict):
                raw["losses"] = tuple(losses.items())
            raw["surgery"] = tuple(raw.get("surgery", ()))
            try:
                stages.append(Stage(**raw))
            except TypeError as exc:
                raise PlanError(f"bad stage {raw.get('name')}: {exc}") from exc
        plan = cls(stages=tuple(stages), optimizer=opt)
        problems = plan.validate()
        if problems:
            raise PlanError("; ".join(problems))
        return plan


def load_plan(path: str | Path) -> StagePlan:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return StagePlan.from_dict(data)


def save_plan(plan: StagePlan, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(plan.to_dict(), fh, sort_keys=False)


def lr_at(step: int, stage: Stage, opt: OptimizerConfig) -> float:
    """Linear warmup to the stage lr, then cosine decay to lr_min."""
    if not 0 <= step < stage.steps:
        raise ValueError(f"step {step} outside [0, {stage.steps})")
    warmup = min(opt.warmup_steps, max(0, stage.steps - 1))
    if step < warmup:
        return stage.lr0 * step / warmup
    span = stage.steps - 1 - warmup
    if span <= 0:
        return stage.lr0
    t = (step - warmup) / span
    return opt.lr_min + 0.5 * (stage.lr0 - opt.lr_min) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


class EmaState:
    """Exponential moving average of the model parameters."""

    def __init__(self, model: nn.Module, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self.shadow = {
            name: param.detach().clone() for name, param in model.named_parameters()
        }

    def update(self, model: nn.Module) -> None:
        names = {name for name, _ in model.named_parameters()}
        if names != set(self.shadow):
            raise ValueError("EMA shadow does not mirror the model parameters")
        with torch.no_grad():
            for name, param in model.named_parameters():
                shadow = self.shadow[name]
                shadow.mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)

    def applied_to(self, model: nn.Module) -> nn.Module:
        """Copy of the model carrying the shadow weights."""
        shadowed = copy.deepcopy(model)
        with torch.no_grad():
            for name, param in shadowed.named_parameters():
                param.copy_(self.shadow[name])
        return shadowed

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: tensor.clone() for name, tensor in self.shadow.items()}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        if set(state) != set(self.shadow):
            raise ValueError("EMA state names do not match")
        for name, tensor in state.items():
            self.shadow[name] = tensor.clone()


def ema_update(state: EmaState, model: nn.Module) -> EmaState:
    state.update(model)
    return state


# ---------------------------------------------------------------------------
# Surgery
# ---------------------------------------------------------------------------


def apply_surgery(model: nn.Module, action: str) -> nn.Module:
    """Rewrite the model in place before a stage starts."""
    if action == "none":
        return model
    if action not in SURGERY_ACTIONS:
        raise PlanError(f"unknown surgery action {action!r}")
    if not isinstance(model, NAFNetFamily):
        raise PlanError(f"surgery {action!r} only applies to the conv families")

    cfg = model.config
    if action in ("swap_first_conv_k5", "swap_first_conv_k3"):
        kernel = 5 if action.endswith("k5") else 3
        out_ch = cfg.width
        new_conv = nn.Conv2d(3, out_ch, kernel, padding=kernel // 2)
        old = model.intro
        if isinstance(old, nn.Conv2d):
            # Warm-start from the previous kernel: growing embeds it centrally
            # (function-preserving), shrinking keeps the central taps.
            with torch.no_grad():
                old_k = old.kernel_size[0]
                if old_k <= kernel:
                    pad = (kernel - old_k) // 2
                    nn.init.zeros_(new_conv.weight)
                    new_conv.weight[
                        :, :, pad : pad + old_k, pad : pad + old_k
                    ].copy_(old.weight)
                else:
                    crop = (old_k - kernel) // 2
                    new_conv.weight.copy_(
                        old.weight[:, :, crop : crop + kernel, crop : crop + kernel]
                    )
                new_conv.bias.copy_(old.bias)
        model.intro = new_conv
        model.config = dataclasses.replace(cfg, first_conv_kernel=kernel)
    elif action == "insert_middle_scag":
        if model.middle_scag is None:
            channels = cfg.width * 2 ** len(cfg.enc_blocks)
            scag = GlobalChannelAttention(channels)
            scag.init_identity()
            model.middle_scag = scag
        model.config = dataclasses.replace(cfg, use_middle_scag=True)
    elif action == "enable_reparam":
        for attr in ("intro", "ending"):
            conv = getattr(model, attr)
            if isinstance(conv, RepConv):
                continue
            spec = RepConvSpec(
                in_ch=conv.in_channels,
                out_ch=conv.out_channels,
                main_kernel=conv.kernel_size[0],
                use_branch_norm=model.config.reparam_branch_norm,
            )
            setattr(model, attr, RepConv.from_conv(conv, spec))
        model.config = dataclasses.replace(model.config, use_reparam=True)
    return model


# ---------------------------------------------------------------------------
# Stage and plan execution
# ---------------------------------------------------------------------------


def _batch_for_step(
    entries: tuple[IndexEntry, ...],
    stage: Stage,
    seed: int,
    stage_index: int,
    step: int,
    cache: dict,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic batch: generator state derives from (seed, stage, step)."""
    rng = np.random.default_rng([seed, stage_index, step])
    blurs, sharps = [], []
    for _ in range(stage.batch):
        entry = entries[int(rng.integers(0, len(entries)))]
        if entry.pair_id not in cache:
            cache[entry.pair_id] = load_pair(entry)
        pair = cache[entry.pair_id]
        crop = random_crop_pair(pair, stage.patch, int(rng.integers(0, 2**31)))
        hflip = bool(rng.integers(0, 2))
        vflip = bool(rng.integers(0, 2))
        blur, sharp = crop.blur, crop.sharp
        if hflip:
            blur, sharp = blur[:, ::-1], sharp[:, ::-1]
        if vflip:
            blur, sharp = blur[::-1], sharp[::-1]
        blurs.append(np.ascontiguousarray(blur))
        sharps.append(np.ascontiguousarray(sharp))
    to_t = lambda stack: torch.from_numpy(np.stack(stack)).permute(0, 3, 1, 2)
    return to_t(blurs), to_t(sharps)


def _weighted_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    losses: tuple[tuple[str, float], ...],
    backend: PerceptualBackend | None,
) -> tuple[torch.Tensor, dict[str, float]]:
    total = None
    parts = {}
    for name, weight in losses:
        if weight == 0:
            continue
        if name == "l1":
            value = loss_l1(pred, gt)
        elif name == "psnr":
            value = loss_psnr(pred, gt)
        elif name == "edge":
            value = loss_edge(pred, gt)
        elif name == "perceptual":
            value = loss_perceptual(pred, gt, backend)
        else:
            raise PlanError(f"unknown loss {name!r}")
        parts[name] = float(value.detach())
        term = weight * value
        total = term if total is None else total + term
    return total, parts


@dataclass
class StageResult:
    model: nn.Module
    ema: EmaState | None
    log_rows: list[dict]


def _make_optimizer(model: nn.Module, opt: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=opt.lr0,
        betas=(opt.beta1, opt.beta2),
        weight_decay=opt.weight_decay,
    )


def run_stage(
    model: nn.Module,
    stage: Stage,
    data: DatasetIndex,
    opt: OptimizerConfig,
    seed: int,
    stage_index: int = 0,
    backend: PerceptualBackend | None = None,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    ema: EmaState | None = None,
    on_checkpoint=None,
    log_sink: list[dict] | None = None,
) -> StageResult:
    """Apply the stage surgery (at step 0) and train for the stage's steps.

    Aborts with the last good checkpoint if the loss goes non-finite.  The
    optional ``on_checkpoint(stage, step, model, ema, optimizer, rows)``
    callback fires at the checkpoint cadence and may return True to stop the
    stage early.  Rows are appended to ``log_sink`` when given, so a caller
    can persist a single ordered log across stages.
    """
    problems = stage.validate()
    if problems:
        raise PlanError("; ".join(problems))
    if start_step == 0:
        # Seeding precedes surgery so freshly initialized layers are
        # reproducible regardless of prior history.
        torch.manual_seed(seed + stage_index)
        for action in stage.surgery:
            apply_surgery(model, action)
        optimizer = _make_optimizer(model, opt)
        ema = EmaState(model, stage.ema_decay)
    elif optimizer is None or ema is None:
        raise ValueError("resuming mid-stage needs the optimizer and EMA state")

    model.train()
    cache: dict = {}
    log_rows = log_sink if log_sink is not None else []
    rows_before = len(log_rows)
    last_good: Path | None = None
    out_dir = Path(out_dir) if out_dir is not None else None

    for step in range(start_step, stage.steps):
        lr = lr_at(step, stage, opt)
        for group in optimizer.param_groups:
            group["lr"] = lr
        blur, sharp = _batch_for_step(
            data.entries, stage, seed, stage_index, step, cache
        )
        pred = model(blur)
        total, parts = _weighted_loss(pred, sharp, stage.losses, backend)
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at stage {stage.name} step {step}", last_good
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        ema.update(model)

        row = {
            "stage": stage.name,
            "step": step,
            "lr": lr,
            "total": float(total.detach()),
            "l1_metric": float(loss_l1(pred.detach(), sharp)),
        }
        row.update({f"loss_{k}": v for k, v in parts.items()})
        log_rows.append(row)

        at_cadence = stage.checkpoint_every and (step + 1) % stage.checkpoint_every == 0
        last = step + 1 == stage.steps
        if at_cadence or last:
            if out_dir is not None:
                last_good = save_checkpoint(
                    model, out_dir / "last.pt", ema_state=ema.state_dict()
                )
            if on_checkpoint is not None:
                should_stop = on_checkpoint(stage, step, model, ema, optimizer, log_rows)
                if should_stop and not last:
                    break

    model.eval()
    return StageResult(model=model, ema=ema, log_rows=log_rows[rows_before:])


@dataclass
class PlanResult:
    best_path: Path | None
    last_path: Path | None
    best_val_psnr: float
    log_rows: list[dict]


def _validation_psnr(
    model: nn.Module, ema: EmaState | None, val_index: DatasetIndex
) -> float:
    eval_model = ema.applied_to(model) if ema is not None else copy.deepcopy(model)
    eval_model.eval()
    values = []
    for entry in val_index:
        pair = load_pair(entry)
        restored = inference.restore(eval_model, pair.blur)
        values.append(psnr(restored, pair.sharp))
    return float(np.mean(values))


def run_plan(
    model: nn.Module,
    plan: StagePlan,
    train_index: DatasetIndex,
    val_index: DatasetIndex | None,
    out_dir: str | Path,
    seed: int = 0,
    backend: PerceptualBackend | None = None,
    log_path: str | Path | None = None,
    early_stop=None,
    resume: bool = False,
) -> PlanResult:
    """Execute all stages in order, tracking the validation-best checkpoint.

    A resumable train state is written beside the checkpoints; with
    ``resume=True`` training continues from the recorded stage and step and
    reproduces the uninterrupted run exactly.  ``early_stop(stage_name, step,
    val_psnr) -> bool`` may cut a stage short at its checkpoint cadence.
    """
    problems = plan.validate()
    if problems:
        raise PlanError("; ".join(problems))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / "train_state.pt"

    log_rows: list[dict] = []
    best = {"psnr": -math.inf, "path": None}
    start_stage, start_step = 0, 0
    optimizer: torch.optim.Optimizer | None = None
    ema: EmaState | None = None

    if resume:
        from .models import build_model  # local import to avoid cycles

        if not state_path.exists():
            raise PlanError(f"nothing to resume: {state_path} does not exist")
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        if state["plan"] != plan.to_dict() or state["seed"] != seed:
            raise PlanError("train state does not match the requested plan/seed")
        model = build_model(ModelConfig.from_dict(state["model_config"]))
        model.load_state_dict(state["model_state"])
        start_stage, start_step = state["stage_index"], state["next_step"]
        log_rows = list(state["log_rows"])
        best = dict(state["best"])
        if best["path"] is not None:
            best["path"] = Path(best["path"])
        if start_step > 0:
            optimizer = _make_optimizer(model, plan.optimizer)
            optimizer.load_state_dict(state["optimizer_state"])
            ema = EmaState(model, state["ema_decay"])
            ema.load_state_dict(state["ema_state"])

    def save_state(stage_index, next_step, optimizer_state, ema_obj):
        payload = {
            "plan": plan.to_dict(),
            "seed": seed,
            "stage_index": stage_index,
            "next_step": next_step,
            "model_config": model.config.to_dict(),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer_state,
            "ema_decay": ema_obj.decay if ema_obj is not None else 0.0,
            "ema_state": ema_obj.state_dict() if ema_obj is not None else None,
            "log_rows": log_rows,
            "best": {
                "psnr": best["psnr"],
                "path": str(best["path"]) if best["path"] else None,
            },
        }
        torch.save(payload, state_path)

    def evaluate(stage, step, current_model, current_ema) -> bool:
        if val_index is None:
            return False
        value = _validation_psnr(current_model, current_ema, val_index)
        log_rows.append({"stage": stage.name, "step": step, "val_psnr": value})
        if value > best["psnr"]:
            best["psnr"] = value
            best["path"] = save_checkpoint(
                current_model, out_dir / "best.pt", ema_state=current_ema.state_dict()
            )
        return early_stop is not None and early_stop(stage.name, step, value)

    last_path: Path | None = None
    for stage_index in range(start_stage, len(plan.stages)):
        stage = plan.stages[stage_index]
        stage_start = start_step if stage_index == start_stage else 0

        def on_checkpoint(stg, step, mdl, ema_obj, opt_obj, rows, _si=stage_index):
            stop_now = evaluate(stg, step, mdl, ema_obj)
            save_state(_si, step + 1, opt_obj.state_dict(), ema_obj)
            return stop_now

        result = run_stage(
            model,
            stage,
            train_index,
            plan.optimizer,
            seed,
            stage_index=stage_index,
            backend=backend,
            out_dir=out_dir,
            start_step=stage_start,
            optimizer=optimizer,
            ema=ema,
            on_checkpoint=on_checkpoint,
            log_sink=log_rows,
        )
        model = result.model
        optimizer = None
        ema = None
        last_path = save_checkpoint(
            model, out_dir / "last.pt", ema_state=result.ema.state_dict()
        )
        save_state(stage_index + 1, 0, None, result.ema)

    if log_path is not None:
        with open(log_path, "w") as fh:
            for row in log_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    best_path = best["path"] if best["path"] is not None else last_path
    return PlanResult(
        best_path=best_path,
        last_path=last_path,
        best_val_psnr=best["psnr"],
        log_rows=log_rows,
    )
