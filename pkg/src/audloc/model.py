"""The differentiable model.

Three weight-separate encoders (frame context, motion flow, inflectional
flow), a cross-kinematics attention block where motion and inflection
features query the image context feature, a sigmoid discriminative-map
head, and a 3D-conv + temporal-transformer fusion classifier emitting
per-frame two-class probabilities.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "toy"  # "toy" | "full"
    input_size: int = 112
    attn_dim: int = 256  # projection width d of the aggregation block
    fusion_channels: int = 256
    transformer_layers: int = 2
    transformer_heads: int = 4
    transformer_width: int = 256
    max_clip_len: int = 64

    def __post_init__(self):
        if self.encoder not in ("toy", "full"):
            raise ValueError(f"unknown encoder variant {self.encoder!r}")
        if self.input_size < 16:
            raise ValueError("input_size must be at least 16 (four stride-2 stages)")


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class FrameEncoder(nn.Module):
    """Four stride-2 stages; overall spatial reduction x16.

    "toy" keeps channels small for CPU training; "full" mirrors the
    channel schedule of a large residual backbone's first four stages.
    """

    def __init__(self, in_channels: int, variant: str = "toy"):
        super().__init__()
        if variant == "toy":
            widths = [16, 32, 48, 64]
        else:
            widths = [64, 256, 512, 1024]
        blocks = []
        c = in_channels
        for w in widths:
            blocks.append(_conv_block(c, w))
            c = w
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class KinematicsEncoders(nn.Module):
    """E_X on frames, E_M on motion flow, E_C on inflectional flow.

    The three encoders share structure but never weights. Motion and
    inflection features concatenate their backward and forward halves
    along channels (backward first).
    """

    def __init__(self, variant: str = "toy"):
        super().__init__()
        self.context = FrameEncoder(3, variant)
        self.motion = FrameEncoder(2, variant)
        self.inflection = FrameEncoder(2, variant)
        self.context_channels = self.context.out_channels
        self.kinematic_channels = 2 * self.motion.out_channels

    def forward(self, frame, v_fwd, v_bwd, a_fwd, a_bwd):
        shapes = {x.shape[-2:] for x in (frame, v_fwd, v_bwd, a_fwd, a_bwd)}
        if len(shapes) != 1:
            raise ValueError(f"frame/flow spatial shapes disagree: {sorted(shapes)}")
        f = self.context(frame)
        m = torch.cat([self.motion(v_bwd), self.motion(v_fwd)], dim=1)
        c = torch.cat([self.inflection(a_bwd), self.inflection(a_fwd)], dim=1)
        return f, m, c


class CrossKinematicsAggregation(nn.Module):
    """Motion/inflection features attend over the image context feature.

    Relevance maps A = Q K^T / sqrt(d) are softmaxed per query row over the
    key positions; the attended context rows are softmax(A) @ V. (The same
    product written value-matrix-first coincides with this under the
    transposition convention where positions index rows.)
    """

    def __init__(self, context_channels: int, kinematic_channels: int, dim: int = 256):
        super().__init__()
        self.dim = dim
        self.key_proj = nn.Conv2d(context_channels, dim, 1)
        self.value_proj = nn.Conv2d(context_channels, dim, 1)
        self.context_proj = nn.Conv2d(context_channels, dim, 1)
        self.motion_query = nn.Conv2d(kinematic_channels, dim, 1)
        self.inflection_query = nn.Conv2d(kinematic_channels, dim, 1)

    def forward(self, f, m, c, return_attention: bool = False):
        b, _, h, w = f.shape
        n = h * w

        def seq(x):  # [B, C, H, W] -> [B, N, C]
            return x.flatten(2).transpose(1, 2)

        k = seq(self.key_proj(f))
        v = seq(self.value_proj(f))
        qm = seq(self.motion_query(m))
        qc = seq(self.inflection_query(c))
        scale = self.dim**-0.5
        attn_m = torch.softmax(qm @ k.transpose(1, 2) * scale, dim=-1)
        attn_c = torch.softmax(qc @ k.transpose(1, 2) * scale, dim=-1)
        h_m = attn_m @ v
        h_c = attn_c @ v

        def grid(x):  # [B, N, C] -> [B, C, H, W]
            return x.transpose(1, 2).reshape(b, self.dim, h, w)

        out = torch.cat([self.context_proj(f), grid(h_m), grid(h_c)], dim=1)
        if return_attention:
            return out, attn_m, attn_c
        return out


class DiscriminativeMapHead(nn.Module):
    """3x3 conv + batch norm + sigmoid -> [0, 1] spatial map."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.bn(self.conv(x))).squeeze(1)


def mask_features(feat: torch.Tensor, dmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split features into motion- and non-motion-activated halves.

    F_m = D * F and F_n = (1 - D) * F with the map broadcast over channels,
    so F_m + F_n == F exactly.
    """
    if dmap.shape[-2:] != feat.shape[-2:]:
        raise ValueError(
            f"map spatial shape {tuple(dmap.shape[-2:])} does not match "
            f"features {tuple(feat.shape[-2:])}"
        )
    d = dmap.unsqueeze(-3)
    return d * feat, (1.0 - d) * feat


class FusionClassifier(nn.Module):
    """3D conv over (time, H', W'), spatial pooling, temporal transformer,
    and a per-frame linear head with softmax."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.conv3d = nn.Conv3d(in_channels, cfg.fusion_channels, kernel_size=3, padding=1)
        self.act = nn.ReLU(inplace=True)
        self.token_proj = nn.Linear(cfg.fusion_channels, cfg.transformer_width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_clip_len, cfg.transformer_width))
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.transformer_width,
            nhead=cfg.transformer_heads,
            dim_feedforward=2 * cfg.transformer_width,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.transformer_layers)
        self.head = nn.Linear(cfg.transformer_width, 2)
        self.max_clip_len = cfg.max_clip_len

    def forward(self, feat_seq: torch.Tensor, masked_seq: torch.Tensor) -> torch.Tensor:
        # feat_seq, masked_seq: [B, k, C, H', W']
        if feat_seq.shape != masked_seq.shape:
            raise ValueError("feature and masked-feature sequences must align")
        k = feat_seq.shape[1]
        if k > self.max_clip_len:
            raise ValueError(f"clip length {k} exceeds max_clip_len {self.max_clip_len}")
        x = torch.cat([feat_seq, masked_seq], dim=2)  # [B, k, 2C, H', W']
        x = x.transpose(1, 2)  # [B, 2C, k, H', W']
        x = self.act(self.conv3d(x))
        x = x.mean(dim=(3, 4)).transpose(1, 2)  # [B, k, fusion_channels]
        x = self.token_proj(x) + self.pos_embed[:k]
        x = self.encoder(x)
        return torch.softmax(self.head(x), dim=-1)


class AudibleActionNet(nn.Module):
    """End-to-end model: encoders, aggregation, map head, fusion classifier."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoders = KinematicsEncoders(self.cfg.encoder)
        self.aggregate = CrossKinematicsAggregation(
            self.encoders.context_channels,
            self.encoders.kinematic_channels,
            self.cfg.attn_dim,
        )
        self.feature_channels = 3 * self.cfg.attn_dim
        self.map_head = DiscriminativeMapHead(self.feature_channels)
        self.classifier = FusionClassifier(2 * self.feature_channels, self.cfg)

    def forward(self, frames, v_fwd, v_bwd, a_fwd, a_bwd):
        """frames: [B, k, 3, S, S]; flows: [B, k, 2, S, S].

        Returns probs [B, k, 2], maps [B, k, H', W'], features and masked
        features [B, k, 3d, H', W'].
        """
        b, k = frames.shape[:2]

        def flat(x):
            return x.reshape(b * k, *x.shape[2:])

        f, m, c = self.encoders(flat(frames), flat(v_fwd), flat(v_bwd), flat(a_fwd), flat(a_bwd))
        feat = self.aggregate(f, m, c)
        dmap = self.map_head(feat)
        f_m, _ = mask_features(feat, dmap)

        def unflat(x):
            return x.reshape(b, k, *x.shape[1:])

        feat_seq = unflat(feat)
        masked_seq = unflat(f_m)
        probs = self.classifier(feat_seq, masked_seq)
        return probs, unflat(dmap), feat_seq, masked_seq


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: AudibleActionNet, extra: dict | None = None) -> None:
    """Archive weights plus the full configuration and a format version."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    buf = io.BytesIO()
    torch.save(payload, buf)
    from .data import write_atomic

    write_atomic(path, buf.getvalue())


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Load a checkpoint; rejects format or architecture mismatches.

    Returns (model, payload) with the model in eval mode.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {payload.get('format_version')} in {path}"
        )
    cfg = ModelConfig(**payload["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise ValueError(
            f"checkpoint architecture {cfg} does not match requested {expected_config}"
        )
    model = AudibleActionNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
