"""Conv encoder with dual batch normalization, projection head and linear classifier.

The encoder is a stack of stride-2 conv blocks (conv -> BN -> relu) followed by
global average pooling. All conv weights are shared between the standard and
adversarial branches; each BN layer keeps two independent parameter/statistics
sets, one per branch, unless the single-BN ablation is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .seeding import INIT, derive_rng
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BranchMode(Enum):
    STANDARD = "std"
    ADVERSARIAL = "adv"


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64, 64)   # one conv block per entry, stride 2 each
    embed_dim: int = 64                  # must equal channels[-1] (GAP output)
    proj_dim: int = 32
    resolution: int = 16
    n_classes: int = 2
    in_channels: int = 3
    single_bn: bool = False              # ablation: one BN set shared by both branches

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must all be >= 1, got {self.channels}")
        for name in ("embed_dim", "proj_dim", "resolution", "n_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim != self.channels[-1]:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must equal channels[-1] ({self.channels[-1]})")
        if self.resolution < 2 ** len(self.channels):
            raise ValueError(
                f"resolution {self.resolution} too small for {len(self.channels)} stride-2 blocks")

    def branches(self) -> tuple:
        return ("std",) if self.single_bn else ("std", "adv")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
            "resolution": self.resolution,
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "single_bn": self.single_bn,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            channels=tuple(d["channels"]),
            embed_dim=d["embed_dim"],
            proj_dim=d["proj_dim"],
            resolution=d["resolution"],
            n_classes=d["n_classes"],
            in_channels=d["in_channels"],
            single_bn=d["single_bn"],
        )


def resnet18_shape_config(n_classes: int = 10) -> EncoderConfig:
    """Preset with ResNet-18-like widths for users with more compute."""
    return EncoderConfig(channels=(64, 128, 256, 512), embed_dim=512, proj_dim=128,
                         resolution=32, n_classes=n_classes)


def _resolve_branch(cfg: EncoderConfig, branch: BranchMode) -> str:
    if cfg.single_bn:
        return "std"
    return branch.value


class ModelParams:
    """All learnable arrays and BN statistics, keyed by name.

    Names: enc{k}.w, enc{k}.bn.{branch}.{gamma,beta,running_mean,running_var},
    head.fc{1,2}.{w,b}, cls.{w,b}. Running statistics are buffers, not
    trainable. The classifier is zero-initialized (it is attached fresh at
    fine-tune time); everything else is He-normal / BN identity.
    """

    def __init__(self, cfg: EncoderConfig, seed: int, init: bool = True):
        self.cfg = cfg
        self.seed = int(seed)
        self.arrays: Dict[str, np.ndarray] = {}
        if init:
            self._init_arrays()

    def _init_arrays(self) -> None:
        rng = derive_rng(self.seed, INIT)
        cfg = self.cfg

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

        c_in = cfg.in_channels
        for k, c_out in enumerate(cfg.channels):
            self.arrays[f"enc{k}.w"] = he((c_out, c_in, 3, 3), c_in * 9)
            for br in cfg.branches():
                p = f"enc{k}.bn.{br}"
                self.arrays[f"{p}.gamma"] = np.ones(c_out, dtype=np.float32)
                self.arrays[f"{p}.beta"] = np.zeros(c_out, dtype=np.float32)
                self.arrays[f"{p}.running_mean"] = np.zeros(c_out, dtype=np.float32)
                self.arrays[f"{p}.running_var"] = np.ones(c_out, dtype=np.float32)
            c_in = c_out
        d, p = cfg.embed_dim, cfg.proj_dim
        self.arrays["head.fc1.w"] = he((d, d), d)
        self.arrays["head.fc1.b"] = np.zeros(d, dtype=np.float32)
        self.arrays["head.fc2.w"] = he((d, p), d)
        self.arrays["head.fc2.b"] = np.zeros(p, dtype=np.float32)
        self.arrays["cls.w"] = np.zeros((d, cfg.n_classes), dtype=np.float32)
        self.arrays["cls.b"] = np.zeros(cfg.n_classes, dtype=np.float32)

    @staticmethod
    def is_buffer(name: str) -> bool:
        return ".running_" in name

    def trainable_names(self) -> list:
        return sorted(n for n in self.arrays if not self.is_buffer(n))

    def param_count(self) -> int:
        return sum(self.arrays[n].size for n in self.trainable_names())

    def copy(self) -> "ModelParams":
        out = ModelParams(self.cfg, self.seed, init=False)
        out.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return out

    def view(self, trainable: bool = True, only: Optional[set] = None) -> "ParamView":
        return ParamView(self, trainable=trainable, only=only)

    def zero_classifier(self) -> None:
        self.arrays["cls.w"][:] = 0.0
        self.arrays["cls.b"][:] = 0.0


class ParamView:
    """Per-graph Tensor leaves over a ModelParams; one view per training step.

    trainable=False freezes everything (used inside attacks, so no gradient
    can reach model parameters); `only` restricts which names train (e.g.
    just the classifier during linear evaluation). Buffers never train.
    """

    def __init__(self, params: ModelParams, trainable: bool = True, only: Optional[set] = None):
        self.params = params
        self.trainable = trainable
        self.only = only
        self._tensors: Dict[str, Tensor] = {}

    def get(self, name: str) -> Tensor:
        t = self._tensors.get(name)
        if t is None:
            req = (self.trainable and not ModelParams.is_buffer(name)
                   and (self.only is None or name in self.only))
            t = Tensor(self.params.arrays[name], requires_grad=req)
            self._tensors[name] = t
        return t

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, t in self._tensors.items():
            if t.requires_grad and t.grad is not None:
                out[name] = t.grad
        return out


def dual_bn_forward(view: ParamView, prefix: str, x: Tensor, branch: BranchMode,
                    training: bool) -> Tensor:
    """Batch norm over (N,H,W) per channel using only branch `branch`'s state.

    training: normalize by this batch's statistics and update the branch's
    running stats (EMA, unbiased variance). eval: normalize by the branch's
    running stats. Affine transform always uses the branch's gamma/beta.
    """
    cfg = view.params.cfg
    br = _resolve_branch(cfg, branch)
    p = f"{prefix}.bn.{br}"
    c = x.data.shape[1]
    if view.params.arrays[f"{p}.gamma"].shape[0] != c:
        raise ShapeError(f"{p}: channel count {c} does not match parameters")
    gamma = T.reshape(view.get(f"{p}.gamma"), (1, c, 1, 1))
    beta = T.reshape(view.get(f"{p}.beta"), (1, c, 1, 1))

    if training:
        if x.data.shape[0] < 2:
            raise ShapeError(f"{p}: training-mode BN needs batch size >= 2, got {x.data.shape[0]}")
        mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = T.sub(x, mu)
        var = T.tmean(T.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        xhat = T.div(xc, T.sqrt(var + BN_EPS))
        n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        rm = view.params.arrays[f"{p}.running_mean"]
        rv = view.params.arrays[f"{p}.running_var"]
        batch_mean = mu.data.reshape(c)
        batch_var = var.data.reshape(c) * (n / (n - 1))
        view.params.arrays[f"{p}.running_mean"] = (
            (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * batch_mean).astype(np.float32)
        view.params.arrays[f"{p}.running_var"] = (
            (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * batch_var).astype(np.float32)
    else:
        rm = Tensor(view.params.arrays[f"{p}.running_mean"].reshape(1, c, 1, 1))
        rv = Tensor(view.params.arrays[f"{p}.running_var"].reshape(1, c, 1, 1))
        xhat = T.div(T.sub(x, rm), T.sqrt(rv + BN_EPS))

    return T.add(T.mul(xhat, gamma), beta)


def encoder_forward(view: ParamView, x: Tensor, branch: BranchMode, training: bool) -> Tensor:
    """Images (N,C,H,W) in [0,1] -> features (N, embed_dim)."""
    cfg = view.params.cfg
    if x.data.ndim != 4 or x.data.shape[2] != cfg.resolution or x.data.shape[3] != cfg.resolution:
        raise ShapeError(
            f"encoder_forward: expected (N,{cfg.in_channels},{cfg.resolution},{cfg.resolution}), "
            f"got {x.data.shape}")
    h = x
    for k in range(len(cfg.channels)):
        h = T.conv2d(h, view.get(f"enc{k}.w"), stride=2, padding=1)
        h = dual_bn_forward(view, f"enc{k}", h, branch, training)
        h = T.relu(h)
    feats = T.tmean(h, axis=(2, 3))  # global average pool -> (N, C_last)
    return feats


def projection_forward(view: ParamView, features: Tensor) -> Tensor:
    """Two-layer MLP head; output is left unnormalized (the loss normalizes)."""
    cfg = view.params.cfg
    if features.data.ndim != 2 or features.data.shape[1] != cfg.embed_dim:
        raise ShapeError(f"projection_forward: expected (N,{cfg.embed_dim}), got {features.data.shape}")
    h = T.add(T.matmul(features, view.get("head.fc1.w")), view.get("head.fc1.b"))
    h = T.relu(h)
    return T.add(T.matmul(h, view.get("head.fc2.w")), view.get("head.fc2.b"))


def classifier_forward(view: ParamView, features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.data.shape[1] != view.params.cfg.embed_dim:
        raise ShapeError(
            f"classifier_forward: expected (N,{view.params.cfg.embed_dim}), got {features.data.shape}")
    return T.add(T.matmul(features, view.get("cls.w")), view.get("cls.b"))


def predict_logits(params: ModelParams, x: np.ndarray, branch: BranchMode = BranchMode.ADVERSARIAL,
                   training: bool = False, view: Optional[ParamView] = None) -> Tensor:
    """Full image -> logits pass; allocates a frozen view unless one is given."""
    if view is None:
        view = params.view(trainable=False)
    feats = encoder_forward(view, x if isinstance(x, Tensor) else Tensor(x), branch, training)
    return classifier_forward(view, feats)


def collapse_to_branch(params: ModelParams, branch: BranchMode, keep_head: bool = False) -> ModelParams:
    """Single-BN copy of a dual-BN model, keeping only `branch`'s BN state.

    Used when moving from pretraining to fine-tuning: conv weights are shared,
    the chosen branch's BN becomes the single BN set, the classifier starts
    from zero. The projection head is dropped unless keep_head.
    """
    src = params.cfg
    cfg = replace(src, single_bn=True)
    out = ModelParams(cfg, params.seed, init=False)
    br = _resolve_branch(src, branch)
    for k in range(len(src.channels)):
        out.arrays[f"enc{k}.w"] = params.arrays[f"enc{k}.w"].copy()
        for stat in ("gamma", "beta", "running_mean", "running_var"):
            out.arrays[f"enc{k}.bn.std.{stat}"] = params.arrays[f"enc{k}.bn.{br}.{stat}"].copy()
    for name in ("head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"):
        out.arrays[name] = (params.arrays[name].copy() if keep_head
                            else np.zeros_like(params.arrays[name]))
    d, c = cfg.embed_dim, cfg.n_classes
    out.arrays["cls.w"] = np.zeros((d, c), dtype=np.float32)
    out.arrays["cls.b"] = np.zeros(c, dtype=np.float32)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels."""
    n, c = logits.data.shape
    onehot = np.zeros((n, c), dtype=np.float32)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    logp = T.log_softmax(logits, axis=1)
    nll = T.tsum(T.mul(logp, Tensor(onehot))) * -1.0
    if reduction == "mean":
        return nll * (1.0 / n)
    if reduction == "sum":
        return nll
    raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)), summed over classes."""
    if p_logits.data.shape != q_logits.data.shape:
        raise ShapeError(
            f"kl_divergence: shapes {p_logits.data.shape} vs {q_logits.data.shape}")
    n = p_logits.data.shape[0]
    p = T.softmax(p_logits, axis=1)
    diff = T.sub(T.log_softmax(p_logits, axis=1), T.log_softmax(q_logits, axis=1))
    kl = T.tsum(T.mul(p, diff))
    if reduction == "mean":
        return kl * (1.0 / n)
    if reduction == "sum":
        return kl
    raise ValueError(f"kl_divergence: unknown reduction {reduction!r}")
