"""Structural reparameterization: multi-branch convs that fuse exactly.

During training a :class:`RepConv` runs several parallel branches (full
kernel, asymmetric strips, pointwise, identity, each with optional batch
norm) and sums them.  For deployment :func:`fuse_repconv` collapses the sum
into a single convolution with bit-for-bit-checkable equivalence, and
:func:`convert_model` rewrites a whole model in place of every RepConv.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BRANCH_KINDS = ("kxk", "1x1", "1xk", "kx1", "identity")


class FusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RepConvSpec:
    in_ch: int
    out_ch: int
    main_kernel: int = 3
    branches: tuple[str, ...] = ("kxk", "1xk", "kx1")
    use_branch_norm: bool = True
    stride: int = 1
    groups: int = 1

    def __post_init__(self) -> None:
        if self.main_kernel % 2 != 1 or self.main_kernel < 1:
            raise ValueError(f"main_kernel must be odd >= 1, got {self.main_kernel}")
        if not self.branches:
            raise ValueError("at least one branch is required")
        for kind in self.branches:
            if kind not in BRANCH_KINDS:
                raise ValueError(f"unknown branch kind {kind!r}")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError("duplicate branch kinds")
        if "identity" in self.branches and (
            self.in_ch != self.out_ch or self.stride != 1
        ):
            raise ValueError("identity branch needs in_ch == out_ch and stride 1")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError("channels must be divisible by groups")

    def kernel_hw(self, kind: str) -> tuple[int, int]:
        k = self.main_kernel
        return {
            "kxk": (k, k),
            "1x1": (1, 1),
            "1xk": (1, k),
            "kx1": (k, 1),
        }[kind]


class RepConv(nn.Module):
    """Sum of parallel conv branches, fusable into one conv."""

    def __init__(self, spec: RepConvSpec):
        super().__init__()
        self.spec = spec
        self.branches = nn.ModuleDict()
        for kind in spec.branches:
            if kind == "identity":
                self.branches[kind] = (
                    nn.BatchNorm2d(spec.in_ch) if spec.use_branch_norm else nn.Identity()
                )
                continue
            kh, kw = spec.kernel_hw(kind)
            conv = nn.Conv2d(
                spec.in_ch,
                spec.out_ch,
                (kh, kw),
                stride=spec.stride,
                padding=(kh // 2, kw // 2),
                groups=spec.groups,
                bias=not spec.use_branch_norm,
            )
            if spec.use_branch_norm:
                self.branches[kind] = nn.Sequential(conv, nn.BatchNorm2d(spec.out_ch))
            else:
                self.branches[kind] = conv

    @classmethod
    def from_conv(cls, conv: nn.Conv2d, spec: RepConvSpec) -> "RepConv":
        """Wrap an existing conv: its weights seed the kxk branch, the other
        branches start at zero so the eval-mode function is preserved."""
        if "kxk" not in spec.branches:
            raise ValueError("from_conv needs a kxk branch to hold the seed weights")
        if conv.kernel_size != (spec.main_kernel, spec.main_kernel):
            raise ValueError(
                f"conv kernel {conv.kernel_size} != spec main kernel "
                f"{spec.main_kernel}"
            )
        rep = cls(spec)
        with torch.no_grad():
            for kind, module in rep.branches.items():
                if kind == "identity":
                    if isinstance(module, nn.BatchNorm2d):
                        nn.init.zeros_(module.weight)
                    continue
                branch_conv = module[0] if isinstance(module, nn.Sequential) else module
                if kind == "kxk":
                    branch_conv.weight.copy_(conv.weight)
                    if branch_conv.bias is not None and conv.bias is not None:
                        branch_conv.bias.copy_(conv.bias)
                    if isinstance(module, nn.Sequential) and conv.bias is not None:
                        module[1].bias.copy_(conv.bias)
                else:
                    nn.init.zeros_(branch_conv.weight)
                    if branch_conv.bias is not None:
                        nn.init.zeros_(branch_conv.bias)
        return rep

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = None
        for module in self.branches.values():
            y = module(x)
            out = y if out is None else out + y
        return out


def _fold_batchnorm(
    kernel: torch.Tensor, bias: torch.Tensor, bn: nn.BatchNorm2d
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fold eval-mode batch norm into the preceding conv's kernel and bias."""
    std = torch.sqrt(bn.running_var + bn.eps)
    scale = bn.weight / std
    fused_kernel = kernel * scale.reshape(-1, 1, 1, 1)
    fused_bias = bn.bias + (bias - bn.running_mean) * scale
    return fused_kernel, fused_bias


def _embed_centered(kernel: torch.Tensor, k: int) -> torch.Tensor:
    """Zero-pad a (possibly asymmetric) kernel into the center of a k x k one."""
    kh, kw = kernel.shape[-2:]
    pad_h = (k - kh) // 2
    pad_w = (k - kw) // 2
    return F.pad(kernel, (pad_w, k - kw - pad_w, pad_h, k - kh - pad_h))


def _identity_kernel(channels: int, groups: int, k: int, dtype, device) -> torch.Tensor:
    kernel = torch.zeros(channels, channels // groups, k, k, dtype=dtype, device=device)
    for i in range(channels):
        kernel[i, i % (channels // groups), k // 2, k // 2] = 1.0
    return kernel


def _ref_dtype_device(rep: RepConv) -> tuple[torch.dtype, torch.device]:
    for p in rep.parameters():
        return p.dtype, p.device
    return torch.float32, torch.device("cpu")


def _branch_kernel_bias(
    rep: RepConv, kind: str, module: nn.Module
) -> tuple[torch.Tensor, torch.Tensor]:
    spec = rep.spec
    k = spec.main_kernel
    if kind == "identity":
        dtype, device = _ref_dtype_device(rep)
        kernel = _identity_kernel(spec.in_ch, spec.groups, k, dtype, device)
        bias = torch.zeros(spec.out_ch, dtype=dtype, device=device)
        if isinstance(module, nn.BatchNorm2d):
            kernel, bias = _fold_batchnorm(kernel, bias, module)
        return kernel, bias
    if isinstance(module, nn.Sequential):
        conv, bn = module[0], module[1]
        bias = (
            conv.bias
            if conv.bias is not None
            else torch.zeros(spec.out_ch, dtype=conv.weight.dtype, device=conv.weight.device)
        )
        kernel, bias = _fold_batchnorm(conv.weight, bias, bn)
    else:
        conv = module
        kernel = conv.weight
        bias = (
            conv.bias
            if conv.bias is not None
            else torch.zeros(spec.out_ch, dtype=conv.weight.dtype, device=conv.weight.device)
        )
    return _embed_centered(kernel, k), bias


def fuse_repconv(rep: RepConv) -> nn.Conv2d:
    """Collapse all branches into one conv; requires frozen norm statistics."""
    if rep.training:
        raise FusionError(
            "fuse requires eval mode (batch-norm statistics must be frozen)"
        )
    spec = rep.spec
    k = spec.main_kernel
    dtype, _ = _ref_dtype_device(rep)
    kernel = torch.zeros(spec.out_ch, spec.in_ch // spec.groups, k, k, dtype=dtype)
    bias = torch.zeros(spec.out_ch, dtype=kernel.dtype)
    with torch.no_grad():
        for kind, module in rep.branches.items():
            bk, bb = _branch_kernel_bias(rep, kind, module)
            kernel = kernel + bk
            bias = bias + bb
    fused = nn.Conv2d(
        spec.in_ch,
        spec.out_ch,
        k,
        stride=spec.stride,
        padding=k // 2,
        groups=spec.groups,
        bias=True,
    )
    with torch.no_grad():
        fused.weight.copy_(kernel)
        fused.bias.copy_(bias)
    return fused


def _check_equivalence(
    rep: RepConv, fused: nn.Conv2d, tol: float, seed: int = 0
) -> float:
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, rep.spec.in_ch, 16, 16, generator=gen) * 2.0 - 1.0
    with torch.no_grad():
        err = (rep(x) - fused(x)).abs().max().item()
    if err >= tol:
        raise FusionError(f"fused output differs from branches by {err:.3e} >= {tol}")
    return err


def convert_model(model: nn.Module, tol: float = 1e-5) -> nn.Module:
    """Return a copy of ``model`` with every RepConv fused to a single conv.

    Each replacement is self-checked for numerical equivalence on random
    input; a failing layer aborts the conversion with its name.  A model
    without RepConvs is returned unchanged (fusion is idempotent).
    """
    if model.training:
        raise FusionError("convert_model requires a model in eval mode")
    converted = copy.deepcopy(model)
    rep_names = [
        name for name, module in converted.named_modules() if isinstance(module, RepConv)
    ]
    if not rep_names:
        return converted
    for name in rep_names:
        rep = converted.get_submodule(name)
        fused = fuse_repconv(rep)
        try:
            _check_equivalence(rep, fused, tol)
        except FusionError as exc:
            raise FusionError(f"layer {name!r}: {exc}") from exc
        if "." in name:
            parent_name, child = name.rsplit(".", 1)
            parent = converted.get_submodule(parent_name)
        else:
            parent, child = converted, name
        setattr(parent, child, fused)
    converted.reparam_fused = True
    return converted
