"""Parameter/MACs accounting, runtime benchmarking, and the budget gate.

MACs are counted analytically per layer from shapes captured on a meta-device
forward pass, so profiling a full-resolution input costs no arithmetic.  The
counting policy is explicit and switchable; the default counts convolutions,
linear maps, and elementwise gating/scaling multiplies, and excludes
normalization, pure additions, pooling, and the channel-attention matrix
products (matching the convention behind the published reference numbers --
layer-hook counters do not see functional matmuls).
"""

from __future__ import annotations

import contextlib
import copy
import fcntl
import json
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn

from .arch_core import (
    GatedFeedForwardLite,
    GlobalChannelAttention,
    LayerNorm2d,
    LocalChannelAttention,
    NAFBlock,
    SimpleGate,
    SpatialAttention,
    TransposedAttention,
)

PARAM_BUDGET = 5_000_000
MACS_BUDGET = 200 * 10**9
GATE_HEIGHT = 1200
GATE_WIDTH = 1920


class ProfilingError(RuntimeError):
    pass


class GateResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class MacsPolicy:
    """What the analytic counter includes.

    count_gating: elementwise gating/scaling multiplies (channel gates,
        attention rescales, residual scales).
    count_attention_matmul: the channel-attention matrix build/apply,
        2 * heads * (C/heads)^2 * H * W per call.
    count_bias: one MAC per output element of biased convs/linears.
    count_pooling: one MAC per input element of spatial-statistics pooling.
    """

    count_gating: bool = True
    count_attention_matmul: bool = False
    count_bias: bool = False
    count_pooling: bool = False


DEFAULT_POLICY = MacsPolicy()


@dataclass(frozen=True)
class LayerStat:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class RuntimeStats:
    mean_ms: float
    std_ms: float
    p50_ms: float
    p95_ms: float
    runs: int
    warmup: int
    device: str


@dataclass(frozen=True)
class GateResult:
    params_ok: bool
    macs_ok: bool
    reasons: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return self.params_ok and self.macs_ok


@dataclass(frozen=True)
class EfficiencyReport:
    model_name: str
    params_total: int
    macs_total: int
    height: int
    width: int
    per_layer: tuple[LayerStat, ...] = ()
    runtime: RuntimeStats | None = None
    gate: GateResult | None = None  # present when computed at the gate resolution

    def to_json(self) -> str:
        payload = asdict(self)
        payload["per_layer"] = [asdict(row) for row in self.per_layer]
        return json.dumps(payload, sort_keys=True, indent=2)

    def summary_row(self, gate: GateResult | None = None) -> str:
        gate = gate if gate is not None else self.gate
        runtime = f"{self.runtime.mean_ms:9.1f}ms" if self.runtime else "        --"
        verdict = "  --  " if gate is None else ("PASS" if gate.passed else "FAIL")
        return (
            f"{self.model_name:<18} {self.params_total / 1e6:7.2f}M "
            f"{self.macs_total / 1e9:8.2f}G {runtime}  gate {verdict}"
        )


def _normalize_resolution(h: int, w: int) -> tuple[int, int]:
    # MACs are orientation-invariant here; portrait inputs are normalized.
    return (min(h, w), max(h, w))


# Module types allowed to own parameters directly; anything else owning a
# parameter would be silently miscounted, so it is an error instead.
_PARAM_OWNERS = (
    nn.Conv2d,
    nn.Linear,
    nn.BatchNorm2d,
    LayerNorm2d,
    NAFBlock,
    TransposedAttention,
)


def _check_supported(model: nn.Module) -> None:
    for name, module in model.named_modules():
        own = sum(1 for _ in module.parameters(recurse=False))
        if own and not isinstance(module, _PARAM_OWNERS):
            raise ProfilingError(
                f"unsupported layer type {type(module).__name__!r} at {name!r}"
            )


def count_params(model: nn.Module) -> tuple[int, list[LayerStat]]:
    """Exact learnable-element count with a per-layer breakdown.

    Counts whatever the module currently holds, so a fused model reports its
    deployment size.
    """
    _check_supported(model)
    rows = []
    for name, module in model.named_modules():
        own = sum(p.numel() for p in module.parameters(recurse=False))
        if own:
            rows.append(LayerStat(name or "<root>", own, 0))
    return sum(r.params for r in rows), rows


def _trace_shapes(
    model: nn.Module, h: int, w: int, in_channels: int = 3
) -> dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]]:
    """Run one shape-only forward on the meta device, recording every call."""
    shadow = copy.deepcopy(model).to("meta")
    calls: dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]] = {}
    handles = []

    def register(name: str, module: nn.Module):
        def hook(_module, inputs, output):
            in_shape = tuple(inputs[0].shape) if inputs else ()
            out_shape = tuple(output.shape) if torch.is_tensor(output) else ()
            calls.setdefault(name, []).append((in_shape, out_shape))

        handles.append(module.register_forward_hook(hook))

    for name, module in shadow.named_modules():
        register(name, module)
    try:
        with torch.no_grad():
            shadow(torch.zeros(1, in_channels, h, w, device="meta"))
    finally:
        for handle in handles:
            handle.remove()
    return calls


def _conv_macs(conv: nn.Conv2d, out_shape: tuple[int, ...], policy: MacsPolicy) -> int:
    n, _, hout, wout = out_shape
    kh, kw = conv.kernel_size
    per_position = (conv.in_channels // conv.groups) * kh * kw
    macs = n * conv.out_channels * hout * wout * per_position
    if policy.count_bias and conv.bias is not None:
        macs += n * conv.out_channels * hout * wout
    return macs


def _linear_macs(lin: nn.Linear, out_shape: tuple[int, ...], policy: MacsPolicy) -> int:
    positions = 1
    for dim in out_shape[:-1]:
        positions *= dim
    macs = positions * lin.in_features * lin.out_features
    if policy.count_bias and lin.bias is not None:
        macs += positions * lin.out_features
    return macs


def _numel(shape: tuple[int, ...]) -> int:
    total = 1
    for dim in shape:
        total *= dim
    return total


def _module_macs(
    module: nn.Module,
    calls: list[tuple[tuple[int, ...], tuple[int, ...]]],
    policy: MacsPolicy,
) -> int:
    macs = 0
    for in_shape, out_shape in calls:
        if isinstance(module, nn.Conv2d):
            macs += _conv_macs(module, out_shape, policy)
        elif isinstance(module, nn.Linear):
            macs += _linear_macs(module, out_shape, policy)
        elif isinstance(module, SimpleGate):
            if policy.count_gating:
                macs += _numel(out_shape)
        elif isinstance(module, (GlobalChannelAttention, LocalChannelAttention)):
            # Child conv is counted on its own; this is the rescale (and the
            # statistics pooling when the policy includes it).
            if policy.count_gating:
                macs += _numel(out_shape)
            if policy.count_pooling:
                macs += _numel(in_shape)
        elif isinstance(module, SpatialAttention):
            if policy.count_gating:
                macs += _numel(out_shape)
        elif isinstance(module, NAFBlock):
            # Two zero-initialized residual scales.
            if policy.count_gating:
                macs += 2 * _numel(out_shape)
        elif isinstance(module, GatedFeedForwardLite):
            if policy.count_gating:
                n, _, h, w = in_shape
                macs += n * module.dwconv.out_channels * h * w
        elif isinstance(module, TransposedAttention):
            if policy.count_attention_matmul:
                n, c, h, w = in_shape
                head_dim = c // module.heads
                macs += 2 * n * module.heads * head_dim * head_dim * h * w
    return macs


def count_macs(
    model: nn.Module,
    h: int,
    w: int,
    policy: MacsPolicy = DEFAULT_POLICY,
    in_channels: int = 3,
) -> tuple[int, list[LayerStat]]:
    """Analytic multiply-accumulate count at the given input resolution."""
    _check_supported(model)
    calls = _trace_shapes(model, h, w, in_channels)
    rows = []
    for name, module in model.named_modules():
        macs = _module_macs(module, calls.get(name, []), policy)
        if macs:
            rows.append(LayerStat(name or "<root>", 0, macs))
    return sum(r.macs for r in rows), rows


def profile(
    model: nn.Module,
    h: int,
    w: int,
    policy: MacsPolicy = DEFAULT_POLICY,
    model_name: str | None = None,
    runtime: RuntimeStats | None = None,
) -> EfficiencyReport:
    """Combined params + MACs report with one row per contributing layer."""
    params_total, param_rows = count_params(model)
    macs_total, macs_rows = count_macs(model, h, w, policy)
    params_by_name = {r.name: r.params for r in param_rows}
    macs_by_name = {r.name: r.macs for r in macs_rows}
    order: list[str] = []
    for name, _ in model.named_modules():
        key = name or "<root>"
        if key in params_by_name or key in macs_by_name:
            order.append(key)
    per_layer = tuple(
        LayerStat(name, params_by_name.get(name, 0), macs_by_name.get(name, 0))
        for name in order
    )
    report = EfficiencyReport(
        model_name=model_name or type(model).__name__,
        params_total=params_total,
        macs_total=macs_total,
        height=h,
        width=w,
        per_layer=per_layer,
        runtime=runtime,
    )
    if _normalize_resolution(h, w) == (GATE_HEIGHT, GATE_WIDTH):
        report = replace(report, gate=check_gate(report))
    return report


@contextlib.contextmanager
def _device_lock(device: torch.device):
    """Process-level lock so concurrent benchmarks never share the device."""
    lock_path = Path(tempfile.gettempdir()) / f"deblurkit-bench-{device.type}.lock"
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def benchmark_runtime(
    model: nn.Module,
    h: int,
    w: int,
    runs: int = 10,
    warmup: int = 2,
    device: str | torch.device | None = None,
) -> RuntimeStats:
    """Wall-clock forward-pass timing on random inputs.

    Timings are hardware-specific; the report records the device so numbers
    are only ever compared like for like.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if device is None:
        device = next(model.parameters()).device
    device = torch.device(device)
    model = model.to(device).eval()
    x = torch.rand(1, 3, h, w, device=device)

    def sync():
        if device.type == "cuda":
            torch.cuda.synchronize(device)

    samples_ms = []
    with _device_lock(device), torch.no_grad():
        for _ in range(warmup):
            model(x)
        sync()
        for _ in range(runs):
            start = time.perf_counter()
            model(x)
            sync()
            samples_ms.append((time.perf_counter() - start) * 1000.0)

    samples_ms.sort()
    if device.type == "cuda":
        desc = f"cuda:{torch.cuda.get_device_name(device)}"
    else:
        desc = f"cpu:{torch.get_num_threads()}-threads"

    def percentile(p: float) -> float:
        idx = min(len(samples_ms) - 1, max(0, round(p * (len(samples_ms) - 1))))
        return samples_ms[idx]

    return RuntimeStats(
        mean_ms=statistics.fmean(samples_ms),
        std_ms=statistics.pstdev(samples_ms) if len(samples_ms) > 1 else 0.0,
        p50_ms=percentile(0.5),
        p95_ms=percentile(0.95),
        runs=runs,
        warmup=warmup,
        device=desc,
    )


def check_gate(report: EfficiencyReport) -> GateResult:
    """Budget verdict; only defined at the challenge resolution."""
    if _normalize_resolution(report.height, report.width) != (
        GATE_HEIGHT,
        GATE_WIDTH,
    ):
        raise GateResolutionError(
            f"gate is defined at {GATE_WIDTH}x{GATE_HEIGHT}; report was computed "
            f"at {report.width}x{report.height}"
        )
    params_ok = report.params_total < PARAM_BUDGET
    macs_ok = report.macs_total < MACS_BUDGET
    reasons = []
    if params_ok:
        margin = PARAM_BUDGET - report.params_total
        reasons.append(f"params {report.params_total / 1e6:.2f}M ok, margin {margin / 1e6:.2f}M")
    else:
        excess = report.params_total - PARAM_BUDGET
        reasons.append(
            f"params {report.params_total / 1e6:.2f}M exceeds 5M budget by {excess / 1e6:.2f}M"
        )
    if macs_ok:
        margin = MACS_BUDGET - report.macs_total
        reasons.append(f"macs {report.macs_total / 1e9:.2f}G ok, margin {margin / 1e9:.2f}G")
    else:
        excess = report.macs_total - MACS_BUDGET
        reasons.append(
            f"macs {report.macs_total / 1e9:.2f}G exceeds 200G budget by {excess / 1e9:.2f}G"
        )
    return GateResult(params_ok=params_ok, macs_ok=macs_ok, reasons=tuple(reasons))
