"""Mask-completion network: two-stream RGB-D encoders, cross-modal fusion,
visible-mask-guided attention, and a convolutional completion decoder with
parallel visible/amodal heads.

Three fusion strategies are supported: ``linear`` (per-stage affine
projection of the concatenated streams back to the stream channel count,
no normalization or nonlinearity), ``conv1x1`` (same wiring plus
normalization and ReLU), and ``stacked6ch`` (a single encoder over
channel-stacked RGB-D input; fusion is the identity). Attention pools the
stride-32 features under the visible mask into a query vector and softmaxes
the query/feature dot products over space, steering the decoder toward the
object the mask belongs to.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .preprocess import bbox_of_mask, crop_and_resize, expand_bbox, normalize_inputs, paste_prob
from .scene import RgbdScene

STAGE_STRIDES = (4, 8, 16, 32)
FUSION_STRATEGIES = ("linear", "conv1x1", "stacked6ch")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The default is a desk-scale 4-stage residual encoder; ``preset("paper")``
    restores the full-depth bottleneck encoder at 256 px input.
    """

    input_size: int = 64
    base_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    block_type: str = "basic"  # basic | bottleneck
    fusion_strategy: str = "linear"
    decoder_channels: tuple[int, int, int, int] = (128, 64, 32, 16)
    depth_as_3ch: bool = False
    seed: int = 0

    stage_strides = STAGE_STRIDES

    def validate(self) -> None:
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ValueError("input_size must be a positive multiple of 32")
        if len(self.base_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("exactly 4 encoder stages are required")
        if len(self.decoder_channels) != 4:
            raise ValueError("exactly 4 decoder steps are required")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ValueError(f"fusion_strategy must be one of {FUSION_STRATEGIES}")
        if self.block_type not in ("basic", "bottleneck"):
            raise ValueError("block_type must be 'basic' or 'bottleneck'")

    @property
    def stacked_in_channels(self) -> int:
        return 6 if self.depth_as_3ch else 4

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "desk":
            cfg = cls()
        elif name == "paper":
            cfg = cls(
                input_size=256,
                base_channels=(256, 512, 1024, 2048),
                blocks_per_stage=(3, 4, 6, 3),
                block_type="bottleneck",
                decoder_channels=(256, 128, 64, 32),
            )
        else:
            raise ValueError(f"unknown preset {name!r}")
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config field {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            input_size=int(d["input_size"]),
            base_channels=tuple(d["base_channels"]),
            blocks_per_stage=tuple(d["blocks_per_stage"]),
            block_type=str(d["block_type"]),
            fusion_strategy=str(d["fusion_strategy"]),
            decoder_channels=tuple(d["decoder_channels"]),
            depth_as_3ch=bool(d["depth_as_3ch"]),
            seed=int(d["seed"]),
        )
        cfg.validate()
        return cfg


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4/8/16/32 relative to the input."""

    stages: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError("a feature pyramid has exactly 4 stages")


@dataclass
class Prediction:
    """Probability maps and binarized masks for one instance."""

    amodal_prob: np.ndarray
    visible_prob: np.ndarray
    amodal_mask: np.ndarray
    visible_mask: np.ndarray

    @classmethod
    def from_probs(cls, amodal_prob, visible_prob, threshold: float = 0.5):
        return cls(
            amodal_prob=amodal_prob,
            visible_prob=visible_prob,
            amodal_mask=amodal_prob >= threshold,
            visible_mask=visible_prob >= threshold,
        )


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _group_norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _group_norm(out_ch)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


class BottleneckBlock(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = out_ch // self.expansion
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.norm1 = _group_norm(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.norm2 = _group_norm(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.norm3 = _group_norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _group_norm(out_ch)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        return F.relu(out + identity)


class Encoder(nn.Module):
    """Staged residual encoder emitting features at strides 4/8/16/32."""

    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        block = BasicBlock if config.block_type == "basic" else BottleneckBlock
        stem_ch = max(config.base_channels[0] // 2, 8)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, stem_ch, 3, stride=2, padding=1, bias=False),
            _group_norm(stem_ch),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.ModuleList()
        prev = stem_ch
        for out_ch, n_blocks in zip(config.base_channels, config.blocks_per_stage):
            blocks = [block(prev, out_ch, stride=2)]
            blocks += [block(out_ch, out_ch) for _ in range(n_blocks - 1)]
            self.stages.append(nn.Sequential(*blocks))
            prev = out_ch

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs


class LinearFusion(nn.Module):
    """Per-stage affine projection of concatenated streams back to C channels.

    Initialized to average the two streams, so it starts as an unbiased
    mixer and training decides the balance.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Linear(2 * channels, channels)
        with torch.no_grad():
            eye = torch.eye(channels)
            self.proj.weight.copy_(torch.cat([0.5 * eye, 0.5 * eye], dim=1))
            self.proj.bias.zero_()

    def forward(self, rgb_feat, depth_feat):
        x = torch.cat([rgb_feat, depth_feat], dim=1)
        x = x.permute(0, 2, 3, 1)
        x = self.proj(x)
        return x.permute(0, 3, 1, 2)


class Conv1x1Fusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 1)
        self.norm = _group_norm(channels)

    def forward(self, rgb_feat, depth_feat):
        x = torch.cat([rgb_feat, depth_feat], dim=1)
        return F.relu(self.norm(self.conv(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm = _group_norm(out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class LacNet(nn.Module):
    """Visible-mask-guided amodal completion network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.base_channels

        if config.fusion_strategy == "stacked6ch":
            self.stacked_encoder = Encoder(config.stacked_in_channels, config)
        else:
            self.rgb_encoder = Encoder(3, config)
            self.depth_encoder = Encoder(1, config)
            fusion = LinearFusion if config.fusion_strategy == "linear" else Conv1x1Fusion
            self.fusions = nn.ModuleList([fusion(c) for c in ch])

        dec = config.decoder_channels
        # each step sees the matching encoder stage plus mask + attention maps
        self.decoder_blocks = nn.ModuleList(
            [
                DecoderBlock(ch[3] + 2, dec[0]),
                DecoderBlock(dec[0] + ch[2] + 2, dec[1]),
                DecoderBlock(dec[1] + ch[1] + 2, dec[2]),
                DecoderBlock(dec[2] + ch[0] + 2, dec[3]),
            ]
        )
        self.amodal_head = nn.Conv2d(dec[3], 1, 1)
        self.visible_head = nn.Conv2d(dec[3], 1, 1)
        self._init_parameters()

    def _init_parameters(self) -> None:
        """Deterministic fan-in-scaled normal init from the config seed."""
        gen = torch.Generator().manual_seed(self.config.seed)
        for name, module in self.named_modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                with torch.no_grad():
                    module.weight.normal_(0.0, std, generator=gen)
                    if module.bias is not None:
                        module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            # LinearFusion projections keep their averaging init

    # ------------------------------------------------------------------
    # pipeline stages

    def _expected_channels(self, stream: str) -> int:
        return {"rgb": 3, "depth": 1, "stacked": self.config.stacked_in_channels}[stream]

    def encode(self, patch: torch.Tensor, stream: str) -> FeaturePyramid:
        """Run one encoder stream over a (B, C, S, S) patch."""
        if stream not in ("rgb", "depth", "stacked"):
            raise ValueError(f"unknown stream {stream!r}")
        expected = self._expected_channels(stream)
        if patch.ndim != 4 or patch.shape[1] != expected:
            raise ValueError(
                f"stream {stream!r} expects {expected} channels, got shape {tuple(patch.shape)}"
            )
        if patch.shape[2] != self.config.input_size or patch.shape[3] != self.config.input_size:
            raise ValueError(f"patch spatial size must be {self.config.input_size}")
        if stream == "stacked":
            if self.config.fusion_strategy != "stacked6ch":
                raise ValueError("stacked stream requires fusion_strategy='stacked6ch'")
            encoder = self.stacked_encoder
        else:
            if self.config.fusion_strategy == "stacked6ch":
                raise ValueError("two-stream encode unavailable under stacked6ch fusion")
            encoder = self.rgb_encoder if stream == "rgb" else self.depth_encoder
        return FeaturePyramid(stages=tuple(encoder(patch)))

    def fuse(self, rgb_pyr: FeaturePyramid, depth_pyr: FeaturePyramid | None = None) -> FeaturePyramid:
        """Merge the two stream pyramids (identity under stacked input)."""
        if self.config.fusion_strategy == "stacked6ch":
            if depth_pyr is not None:
                raise ValueError("stacked6ch fusion takes a single pyramid")
            return rgb_pyr
        if depth_pyr is None:
            raise ValueError("two-stream fusion needs both pyramids")
        fused = []
        for fusion, r, d in zip(self.fusions, rgb_pyr.stages, depth_pyr.stages):
            if r.shape != d.shape:
                raise ValueError("pyramid stage shapes differ between streams")
            fused.append(fusion(r, d))
        return FeaturePyramid(stages=tuple(fused))

    def attention_map(self, fused: FeaturePyramid, visible_mask_patch: torch.Tensor) -> torch.Tensor:
        """Softmax attention over stride-32 positions from a mask-pooled query.

        Returns (B, 1, h, w) summing to 1 over positions. A mask that
        area-downsamples to all-zero falls back to uniform query weights.
        """
        feat = fused.stages[3]
        b, c, h, w = feat.shape
        mask = self._as_mask_tensor(visible_mask_patch, like=feat)
        m = F.adaptive_avg_pool2d(mask, (h, w))
        msum = m.sum(dim=(2, 3), keepdim=True)
        uniform = torch.full_like(m, 1.0 / (h * w))
        weights = torch.where(msum > 0, m / msum.clamp_min(1e-12), uniform)
        query = (feat * weights).sum(dim=(2, 3))  # (B, C)
        logits = (feat * query[:, :, None, None]).sum(dim=1) / math.sqrt(c)
        attn = torch.softmax(logits.reshape(b, -1), dim=1).reshape(b, 1, h, w)
        return attn

    def complete(
        self,
        fused: FeaturePyramid,
        visible_mask_patch: torch.Tensor,
        attention: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode fused features + mask + attention into (amodal, visible) logits.

        Four steps run at strides 32/16/8/4: each concatenates the matching
        encoder stage with the mask (area-resized) and attention (bilinear)
        at that resolution, then 3x3 conv + norm + ReLU; two 1x1 heads at
        stride 4 are bilinearly upsampled to the input size.
        """
        mask = self._as_mask_tensor(visible_mask_patch, like=fused.stages[0])
        x = None
        for step, stage in enumerate(reversed(fused.stages)):  # deepest first
            size = stage.shape[2:]
            m = F.interpolate(mask, size=size, mode="area")
            a = F.interpolate(attention, size=size, mode="bilinear", align_corners=False)
            if x is None:
                x = torch.cat([stage, m, a], dim=1)
            else:
                x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
                x = torch.cat([x, stage, m, a], dim=1)
            x = self.decoder_blocks[step](x)
        size = (self.config.input_size, self.config.input_size)
        amodal = F.interpolate(self.amodal_head(x), size=size, mode="bilinear", align_corners=False)
        visible = F.interpolate(self.visible_head(x), size=size, mode="bilinear", align_corners=False)
        return amodal, visible

    def forward(
        self,
        rgb_patch: torch.Tensor,
        depth_patch: torch.Tensor,
        visible_mask_patch: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full completion pass on normalized (B, C, S, S) patches."""
        if self.config.fusion_strategy == "stacked6ch":
            if self.config.depth_as_3ch:
                depth_patch = depth_patch.expand(-1, 3, -1, -1)
            fused = self.fuse(self.encode(torch.cat([rgb_patch, depth_patch], dim=1), "stacked"))
        else:
            fused = self.fuse(self.encode(rgb_patch, "rgb"), self.encode(depth_patch, "depth"))
        attention = self.attention_map(fused, visible_mask_patch)
        return self.complete(fused, visible_mask_patch, attention)

    @staticmethod
    def _as_mask_tensor(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        if mask.ndim == 2:
            mask = mask[None, None]
        elif mask.ndim == 3:
            mask = mask[:, None]
        return mask.to(dtype=like.dtype, device=like.device)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def completion_loss(
    pred_logits: tuple[torch.Tensor, torch.Tensor],
    targets: tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    """Sum of per-pixel mean BCE over the amodal and visible heads.

    Computed from logits in the numerically stable form; targets must be
    strictly binary.
    """
    amodal_logit, visible_logit = pred_logits
    amodal_target, visible_target = targets
    for t in (amodal_target, visible_target):
        if not torch.all((t == 0) | (t == 1)):
            raise ValueError("targets must be binary")
    loss_a = F.binary_cross_entropy_with_logits(amodal_logit, amodal_target.to(amodal_logit.dtype))
    loss_v = F.binary_cross_entropy_with_logits(visible_logit, visible_target.to(visible_logit.dtype))
    return loss_a + loss_v


EXPANSION_FACTOR = 2.0


def predict_amodal(model: LacNet, scene: RgbdScene, visible_mask: np.ndarray) -> Prediction:
    """Complete one instance: crop around the visible prior, run the network,
    and paste both probability maps back into image coordinates."""
    bbox = expand_bbox(bbox_of_mask(visible_mask), EXPANSION_FACTOR)
    size = model.config.input_size
    rgb_patch = crop_and_resize(scene.rgb, bbox, size, "bilinear")
    depth_patch = crop_and_resize(scene.depth, bbox, size, "bilinear")
    mask_patch = crop_and_resize(visible_mask.astype(bool), bbox, size, "nearest")
    rgb_norm, depth_norm = normalize_inputs(rgb_patch, depth_patch)

    param = next(model.parameters())
    to_tensor = lambda arr: torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype)
    rgb_t = to_tensor(rgb_norm.transpose(2, 0, 1))[None]
    depth_t = to_tensor(depth_norm)[None, None]
    mask_t = to_tensor(mask_patch.astype(np.float32))[None, None]

    was_training = model.training
    model.eval()
    with torch.no_grad():
        amodal_logit, visible_logit = model(rgb_t, depth_t, mask_t)
    if was_training:
        model.train()

    amodal_patch = torch.sigmoid(amodal_logit)[0, 0].numpy().astype(np.float64)
    visible_patch = torch.sigmoid(visible_logit)[0, 0].numpy().astype(np.float64)
    image_size = scene.depth.shape
    return Prediction.from_probs(
        paste_prob(amodal_patch, bbox, image_size),
        paste_prob(visible_patch, bbox, image_size),
    )


# ---------------------------------------------------------------------------
# checkpoint container: magic, little-endian header length, JSON header
# (config echo, step counter, array directory), then raw float32 data.

_CKPT_MAGIC = b"LACNET\x00\x01"


def save_checkpoint(
    path: Path,
    model: LacNet,
    step: int = 0,
    optimizer_state: dict | None = None,
) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in model.state_dict().items():
        arrays.append((name, tensor.detach().cpu().numpy().astype("<f4")))
    optim_step = None
    if optimizer_state is not None:
        optim_step = int(optimizer_state["step"])
        for slot in ("exp_avg", "exp_avg_sq"):
            for name, tensor in optimizer_state[slot].items():
                arrays.append(
                    (f"optim/{slot}/{name}", tensor.detach().cpu().numpy().astype("<f4"))
                )
    header = {
        "format": "lacnet-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "optim_step": optim_step,
        "dtype": "<f4",
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    step: int
    optim_step: int | None = None

    def optimizer_state(self) -> dict | None:
        """Rebuild the optimizer-state dict stored alongside the parameters."""
        if self.optim_step is None:
            return None
        state = {"step": self.optim_step, "exp_avg": {}, "exp_avg_sq": {}}
        for name, arr in self.arrays.items():
            if name.startswith("optim/"):
                _, slot, param_name = name.split("/", 2)
                state[slot][param_name] = torch.from_numpy(arr.copy())
        return state


def load_checkpoint(path: Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape)
            arrays[entry["name"]] = data
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        arrays=arrays,
        step=int(header["step"]),
        optim_step=header.get("optim_step"),
    )


def load_model(path: Path) -> tuple[LacNet, Checkpoint]:
    """Instantiate a model from a checkpoint and restore its parameters."""
    ckpt = load_checkpoint(path)
    model = LacNet(ckpt.config)
    state = {
        name: torch.from_numpy(arr.copy())
        for name, arr in ckpt.arrays.items()
        if not name.startswith("optim/")
    }
    model.load_state_dict(state)
    return model, ckpt
