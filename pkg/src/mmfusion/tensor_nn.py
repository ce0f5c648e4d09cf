"""Differentiable primitives, optimizer and LR scheduler.

Tensors are ``torch.Tensor``; reverse-mode differentiation is delegated to
torch autograd. Every operation here validates the shape contract it is used
under so that misuse fails at forward time rather than deep inside a model.

Conventions:

* ``conv3d`` is a cross-correlation (no kernel flip), kernel 3x3x3, padding 1.
* Batch-norm running statistics follow
  ``new = (1 - momentum) * old + momentum * batch``; the running variance
  uses the unbiased batch variance, normalization uses the biased one.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import Optimizer

KERNEL = 3
PADDING = 1
BN_MOMENTUM = 0.05
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensors do not satisfy an operation's shape contract."""


def conv_output_size(size: int, stride: int) -> int:
    return (size + 2 * PADDING - KERNEL) // stride + 1


def conv3d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
) -> torch.Tensor:
    if x.dim() != 5:
        raise ShapeError(f"conv3d expects [N,C,D,H,W], got {tuple(x.shape)}")
    if tuple(weight.shape[2:]) != (KERNEL,) * 3:
        raise ShapeError(f"conv3d kernel must be 3x3x3, got {tuple(weight.shape[2:])}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    return F.conv3d(x, weight, bias, stride=stride, padding=PADDING)


def batch_norm3d(x: torch.Tensor, state: "BatchNorm3d", training: bool) -> torch.Tensor:
    if x.dim() != 5 or x.shape[1] != state.num_features:
        raise ShapeError(
            f"batch_norm3d expects [N,{state.num_features},D,H,W], got {tuple(x.shape)}"
        )
    if training and x.numel() // x.shape[1] < 2:
        raise ShapeError("training-mode batch norm needs at least 2 values per channel")
    return F.batch_norm(
        x,
        state.running_mean,
        state.running_var,
        state.weight,
        state.bias,
        training=training,
        momentum=state.momentum,
        eps=state.eps,
    )


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return F.dropout(x, p=p, training=True)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 5 or x.shape[2] * x.shape[3] * x.shape[4] < 1:
        raise ShapeError(f"global_avg_pool expects [N,C,D,H,W], got {tuple(x.shape)}")
    return x.mean(dim=(2, 3, 4))


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[1]}")
    return F.linear(x, weight, bias)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.amax(dim=1, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the labelled class.

    Max-subtraction keeps the exponentials bounded, so logits of magnitude
    1e3 and beyond are handled without overflow.
    """
    if logits.dim() != 2:
        raise ShapeError(f"logits must be [N,C], got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (logits.shape[0],):
        raise ShapeError("one label per sample required")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    return -logp.gather(1, labels[:, None]).mean()


class Conv3d(nn.Module):
    """3x3x3 convolution with fan-in scaled normal initialization."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, bias: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        fan_in = in_channels * KERNEL**3
        w = torch.randn(out_channels, in_channels, KERNEL, KERNEL, KERNEL) * math.sqrt(2.0 / fan_in)
        # channels-last layout roughly halves CPU conv time at small channel counts
        self.weight = nn.Parameter(w.contiguous(memory_format=torch.channels_last_3d))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv3d(x, self.weight, self.bias, self.stride)

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}, kernel=3, stride={self.stride}"


class BatchNorm3d(nn.Module):
    """Per-channel batch normalization; ``weight`` is the scale (gamma)."""

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch norm eps must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    @property
    def gamma(self) -> torch.Tensor:
        return self.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return batch_norm3d(x, self, self.training)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(out_features, in_features).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(out_features).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class AdamW(Optimizer):
    """Adam with decoupled weight decay.

    One step computes, with bias-corrected moments ``m_hat`` and ``v_hat``::

        theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    def __init__(self, params, lr: float = 0.005, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr <= 0.0:
            raise ValueError(f"Invalid lr: {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"Invalid betas: {betas}")
        if eps <= 0.0:
            raise ValueError(f"Invalid eps: {eps}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                update = m_hat / (v_hat.sqrt() + eps)
                if wd:
                    update = update + wd * p
                p.sub_(lr * update)
        return loss


class PlateauScheduler:
    """Reduce the learning rate when a monitored metric stops improving.

    The rate is cut by ``factor`` once ``patience`` consecutive epochs fail to
    improve on the best value seen; the counter then restarts. The rate is
    floored at ``min_lr``.
    """

    def __init__(self, optimizer: Optimizer, mode: str = "max", factor: float = 0.1,
                 patience: int = 10, min_lr: float = 1e-6):
        if mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        self.optimizer = optimizer
        self.mode = mode
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -math.inf if mode == "max" else math.inf
        self.num_bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def _improved(self, metric: float) -> bool:
        return metric > self.best if self.mode == "max" else metric < self.best

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise ValueError(f"monitored metric must be finite, got {metric}")
        if self._improved(metric):
            self.best = metric
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
        if self.num_bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] = max(group["lr"] * self.factor, self.min_lr)
            self.num_bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"best": self.best, "num_bad_epochs": self.num_bad_epochs}
