"""Localization/reconstruction network with bilateral-reference decoder blocks.

Shape ladder for an H x W input::

    encoder   F1e /4   F2e /8   F3e /16   F4e /32  ->  Fe /32 (concat of all four)
    squeeze   Fd /32  --upsample-->  F3d /16
    stage 3   F3d+ = up(F3d + F3l)  /8  -> block -> F2d, M3
    stage 2   F2d+ = up(F2d + F2l)  /4  -> block -> F1d, M2
    stage 1   F1d+ = up(F1d + F1l)  /2  -> block -> F0d, M1
    head      M = sigmoid(conv1x1(up(F0d)))  /1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .references import patch_stack_torch

CHECKPOINT_VERSION = 1
STAGES = (3, 2, 1)


@dataclass
class ModelConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 96)
    resolution: tuple[int, int] = (128, 128)
    num_classes: int = 4
    use_rm: bool = True
    use_inref: bool = True
    use_outref: bool = True
    # stages whose OutRef gradient head is active
    outref_stages: tuple[int, ...] = (3, 2, 1)
    use_cff: bool = False
    use_ipt: bool = False
    deformable: bool = False
    rf_kernels: tuple[int, ...] = (1, 3, 7)
    aspp_dilations: tuple[int, ...] = (1, 2, 4)

    def validate(self) -> None:
        h, w = self.resolution
        if h % 32 or w % 32:
            raise ValueError(f"resolution {self.resolution} must be divisible by 32")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError("widths must be four positive channel counts")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not set(self.outref_stages) <= set(STAGES):
            raise ValueError(f"outref_stages must be a subset of {STAGES}")

    def decoder_width(self, stage: int) -> int:
        # stage i decodes with the width of encoder stage i; the block after
        # stage 1 keeps the stage-1 width
        return self.widths[max(stage, 1) - 1]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class FeaturePyramid:
    stages: list[torch.Tensor]  # F1e, F2e, F3e, F4e
    fe: torch.Tensor
    laterals: dict[int, torch.Tensor]


@dataclass
class PredictionSet:
    m: torch.Tensor
    intermediates: dict[int, torch.Tensor]
    gradients: dict[int, torch.Tensor]
    logits: torch.Tensor
    states: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1, padding_mode="zeros"):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, pad, dilation=dilation, bias=False, padding_mode=padding_mode),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class Encoder(nn.Module):
    """Four strided conv stages at strides 4, 8, 16, 32."""

    def __init__(self, widths):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stage1 = nn.Sequential(
            conv_bn_relu(3, max(w1 // 2, 4), stride=2),
            conv_bn_relu(max(w1 // 2, 4), w1, stride=2),
            conv_bn_relu(w1, w1),
        )
        self.stage2 = nn.Sequential(conv_bn_relu(w1, w2, stride=2), conv_bn_relu(w2, w2))
        self.stage3 = nn.Sequential(conv_bn_relu(w2, w3, stride=2), conv_bn_relu(w3, w3))
        self.stage4 = nn.Sequential(conv_bn_relu(w3, w4, stride=2), conv_bn_relu(w4, w4))

    def forward(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return [f1, f2, f3, f4]


class ClassHead(nn.Module):
    def __init__(self, cin, num_classes):
        super().__init__()
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, fe):
        return self.fc(fe.mean(dim=(2, 3)))


class ASPP(nn.Module):
    """Parallel dilated 3x3 branches plus an image-pooling branch."""

    def __init__(self, cin, cout, dilations=(1, 2, 4), use_pool=True):
        super().__init__()
        # replicate padding keeps a constant input constant at the borders
        self.branches = nn.ModuleList(
            conv_bn_relu(cin, cout, 3, dilation=d, padding_mode="replicate") for d in dilations
        )
        self.use_pool = use_pool
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        n = len(dilations) + 1
        self.project = nn.Sequential(nn.Conv2d(n * cout, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x).expand(-1, -1, *x.shape[-2:])
        outs.append(pooled if self.use_pool else torch.zeros_like(pooled))
        return self.project(torch.cat(outs, dim=1))


class DeformBranch(nn.Module):
    """k x k deformable conv with zero-initialised learned offsets."""

    def __init__(self, cin, cout, k):
        super().__init__()
        from torchvision.ops import DeformConv2d

        self.offset = nn.Conv2d(cin, 2 * k * k, k, padding=k // 2)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.conv = DeformConv2d(cin, cout, k, padding=k // 2, bias=False)
        self.post = nn.Sequential(nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.post(self.conv(x, self.offset(x)))


class ReconstructionBlock(nn.Module):
    """Multi-receptive-field convs + pooled branch -> concat (F_theta) -> 1x1 conv + BN."""

    def __init__(self, cin, cout, kernels=(1, 3, 7), deformable=False):
        super().__init__()
        self.cin = cin
        self.branches = nn.ModuleList(
            DeformBranch(cin, cout, k) if deformable and k > 1 else conv_bn_relu(cin, cout, k) for k in kernels
        )
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.theta_channels = (len(kernels) + 1) * cout
        self.fuse = nn.Sequential(nn.Conv2d(self.theta_channels, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ValueError(f"reconstruction block expects {self.cin} channels, got {x.shape[1]}")
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        theta = torch.cat(outs, dim=1)
        return theta, self.fuse(theta)


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class PlainDecoderBlock(nn.Module):
    """Baseline decoder block: projection + two residual blocks."""

    def __init__(self, cin, cout):
        super().__init__()
        self.cin = cin
        self.proj = conv_bn_relu(cin, cout, 1)
        self.res = nn.Sequential(ResidualBlock(cout), ResidualBlock(cout))
        self.theta_channels = cout

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ValueError(f"decoder block expects {self.cin} channels, got {x.shape[1]}")
        y = self.res(self.proj(x))
        return y, y


class OutwardReference(nn.Module):
    """Gradient feature F_G from F_theta; predicts the gradient map and a
    single-channel attention map."""

    def __init__(self, theta_channels, width):
        super().__init__()
        self.feature = conv_bn_relu(theta_channels, width, 3)
        self.grad_head = nn.Conv2d(width, 1, 1)
        self.attn_head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, theta):
        fg = self.feature(theta)
        return torch.sigmoid(self.grad_head(fg)), torch.sigmoid(self.attn_head(fg)), fg


class BiRefBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, stage: int, tiles: int):
        super().__init__()
        cin = cfg.decoder_width(stage)
        cout = cfg.decoder_width(stage - 1)
        self.stage = stage
        self.use_inref = cfg.use_inref
        self.in_channels = cin + (3 * tiles if cfg.use_inref else 0)
        if cfg.use_rm:
            self.body = ReconstructionBlock(self.in_channels, cout, cfg.rf_kernels, cfg.deformable)
        else:
            self.body = PlainDecoderBlock(self.in_channels, cout)
        self.outref = (
            OutwardReference(self.body.theta_channels, cout)
            if cfg.use_outref and stage in cfg.outref_stages
            else None
        )
        self.head = nn.Conv2d(cout, 1, 1)

    def forward(self, fd_plus, patches=None, force_attention_ones=False):
        """Returns (next Fd, M_i, G_hat_i or None, state dict)."""
        x = torch.cat([fd_plus, patches], dim=1) if self.use_inref else fd_plus
        theta, fd_prime = self.body(x)
        state = {"fd_plus": fd_plus, "theta": theta, "fd_prime": fd_prime}
        grad = None
        out = fd_prime
        if self.outref is not None:
            grad, attn, fg = self.outref(theta)
            state.update(fg=fg, attention=attn)
            if not force_attention_ones:
                out = attn * fd_prime
        state["fd_next"] = out
        return out, torch.sigmoid(self.head(out)), grad, state


class BiRefNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.widths
        self.encoder = Encoder(w)
        fe_channels = sum(w)
        self.classifier = ClassHead(fe_channels, cfg.num_classes)
        self.squeeze = ASPP(fe_channels, cfg.decoder_width(3), cfg.aspp_dilations)
        self.laterals = nn.ModuleDict({str(i): nn.Conv2d(w[i - 1], cfg.decoder_width(i), 1) for i in STAGES})
        if cfg.use_cff:
            self.cff = nn.ModuleDict({str(i): nn.Linear(fe_channels, cfg.decoder_width(i)) for i in STAGES})
        H, W = cfg.resolution
        # stage i block runs at stride 2**i
        self.tiles = {i: (H // (H >> i)) * (W // (W >> i)) for i in STAGES}
        self.blocks = nn.ModuleDict({str(i): BiRefBlock(cfg, i, self.tiles[i]) for i in STAGES})
        self.final = nn.Conv2d(cfg.decoder_width(0), 1, 1)

    # -- localization -----------------------------------------------------
    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        H, W = x.shape[-2:]
        if (H, W) != tuple(self.cfg.resolution):
            raise ValueError(f"input {(H, W)} does not match configured resolution {self.cfg.resolution}")
        feats = self.encoder(x)
        if self.cfg.use_ipt:
            half = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
            feats = [f + upsample(g, f.shape[-2:]) for f, g in zip(feats, self.encoder(half))]
        size = feats[3].shape[-2:]
        fe = torch.cat([F.adaptive_avg_pool2d(f, size) for f in feats[:3]] + [feats[3]], dim=1)
        laterals = {i: self.laterals[str(i)](feats[i - 1]) for i in STAGES}
        if self.cfg.use_cff:
            ctx = fe.mean(dim=(2, 3))
            laterals = {i: l + self.cff[str(i)](ctx)[:, :, None, None] for i, l in laterals.items()}
        return FeaturePyramid(stages=feats, fe=fe, laterals=laterals)

    def classify(self, fe):
        return self.classifier(fe)

    def squeeze_bottleneck(self, fe):
        return self.squeeze(fe)

    # -- reconstruction ---------------------------------------------------
    def forward(self, x: torch.Tensor, return_states: bool = False, force_attention_ones: bool = False) -> PredictionSet:
        pyr = self.encode(x)
        logits = self.classify(pyr.fe)
        fd = self.squeeze_bottleneck(pyr.fe)
        fd = upsample(fd, pyr.laterals[3].shape[-2:])
        inter, grads, states = {}, {}, {}
        for i in STAGES:
            lat = pyr.laterals[i]
            fd_plus = upsample(fd + lat, (lat.shape[-2] * 2, lat.shape[-1] * 2))
            patches = patch_stack_torch(x, fd_plus.shape[-2:]) if self.cfg.use_inref else None
            fd, m, g, st = self.blocks[str(i)](fd_plus, patches, force_attention_ones)
            inter[i] = m
            if g is not None:
                grads[i] = g
            if return_states:
                states[i] = st
        m = torch.sigmoid(self.final(upsample(fd, x.shape[-2:])))
        return PredictionSet(m=m, intermediates=inter, gradients=grads, logits=logits, states=states)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: BiRefNetwork, epoch: int = 0, extra: dict | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "model_config": dataclasses.asdict(model.cfg),
            "state_dict": model.state_dict(),
            "rng_state": torch.get_rng_state(),
            "epoch": epoch,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[BiRefNetwork, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')!r}")
    model = BiRefNetwork(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model, ckpt
