"""TransLab: shared dilated backbone, boundary stream, regular stream with
Boundary Attention Modules (BAM) and a C4/C2/C1 fusion decoder."""

from __future__ import annotations

from collections import namedtuple
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from translab.boundary import resize_boundary

LEVELS = ("c1", "c2", "c4")
ABLATION_LEVELS = {
    "BL": (),
    "BL+C1": ("c1",),
    "BL+C1&2": ("c1", "c2"),
    "BL+C1&2&4": ("c1", "c2", "c4"),
}

FeaturePyramid = namedtuple("FeaturePyramid", ["c1", "c2", "c4"])
ForwardOutput = namedtuple("ForwardOutput", ["seg_logits", "boundary_logits"])


@dataclass
class ModelConfig:
    backbone: str = "resnet50"
    num_classes: int = 3
    aspp_rates: tuple = (6, 12, 18)
    bam_levels: tuple = LEVELS
    boundary_stream_enabled: bool = True
    pretrained: bool = False
    # widths; None picks the per-backbone default in BACKBONE_WIDTHS
    aspp_channels: int | None = None
    decoder_channels: tuple | None = None
    boundary_channels: int | None = None
    boundary_aspp_reduce: int | None = field(default=None)
    bam_reduction: int = 16

    def __post_init__(self):
        self.aspp_rates = tuple(self.aspp_rates)
        self.bam_levels = tuple(sorted(set(self.bam_levels), key=LEVELS.index))
        self.validate()

    def validate(self):
        if self.backbone not in BACKBONE_WIDTHS:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        bad = set(self.bam_levels) - set(LEVELS)
        if bad:
            raise ValueError(f"unknown BAM levels {sorted(bad)}; expected subset of {LEVELS}")
        if self.bam_levels and not self.boundary_stream_enabled:
            raise ValueError("bam_levels requires boundary_stream_enabled")
        if len(self.aspp_rates) != 3:
            raise ValueError("aspp_rates must hold three dilation rates")

    def widths(self):
        w = dict(BACKBONE_WIDTHS[self.backbone])
        for key in ("aspp_channels", "decoder_channels", "boundary_channels",
                    "boundary_aspp_reduce"):
            if getattr(self, key) is not None:
                w[key] = getattr(self, key)
        return w

    def to_dict(self):
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        d["bam_levels"] = list(self.bam_levels)
        if d["decoder_channels"] is not None:
            d["decoder_channels"] = list(d["decoder_channels"])
        return d


BACKBONE_WIDTHS = {
    "resnet50": dict(c1=256, c2=512, c4=2048, aspp_channels=256,
                     decoder_channels=(256, 64), boundary_channels=48,
                     boundary_aspp_reduce=256),
    "tiny": dict(c1=16, c2=32, c4=128, aspp_channels=64,
                 decoder_channels=(64, 32), boundary_channels=16,
                 boundary_aspp_reduce=None),
}


def conv_bn_relu(cin, cout, k=3, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def upsample_to(x, ref_or_size):
    size = ref_or_size if isinstance(ref_or_size, (tuple, list, torch.Size)) else ref_or_size.shape[-2:]
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# backbones


class ResNet50Backbone(nn.Module):
    """ResNet50 with the last stage dilated (output stride 16)."""

    def __init__(self, pretrained=False):
        super().__init__()
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.resnet50(weights=weights,
                                          replace_stride_with_dilation=[False, False, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x):
        c1 = self.layer1(self.stem(x))
        c2 = self.layer2(c1)
        c4 = self.layer4(self.layer3(c2))
        return FeaturePyramid(c1, c2, c4)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity, inplace=True)


class TinyBackbone(nn.Module):
    """Four-stage residual net (widths 16/32/64/128) for desk-scale runs.

    Strides 4/8/16/16; the last stage is dilated like the ResNet50 variant.
    """

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stem = conv_bn_relu(3, w1)
        self.stem[0].stride = (2, 2)
        self.stage1 = BasicBlock(w1, w1, stride=2)
        self.stage2 = BasicBlock(w1, w2, stride=2)
        self.stage3 = BasicBlock(w2, w3, stride=2)
        self.stage4 = BasicBlock(w3, w4, dilation=2)

    def forward(self, x):
        c1 = self.stage1(self.stem(x))
        c2 = self.stage2(c1)
        c4 = self.stage4(self.stage3(c2))
        return FeaturePyramid(c1, c2, c4)


def build_backbone(config):
    if config.backbone == "resnet50":
        return ResNet50Backbone(pretrained=config.pretrained)
    return TinyBackbone()


# ---------------------------------------------------------------------------
# heads


class ASPP(nn.Module):
    """1x1 branch, three dilated 3x3 branches, image-pooling branch, 1x1 projection.

    ``reduce`` inserts a 1x1 input reduction (used by the light boundary stream).
    """

    def __init__(self, cin, cout, rates=(6, 12, 18), reduce=None):
        super().__init__()
        self.reduce = conv_bn_relu(cin, reduce, k=1) if reduce else None
        cin = reduce or cin
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, cout, k=1)] + [conv_bn_relu(cin, cout, dilation=r) for r in rates])
        # no BN on the 1x1 pooled map: it would fail for batch size 1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1),
                                  nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        if self.reduce is not None:
            x = self.reduce(x)
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: GAP -> bottleneck -> sigmoid channel scaling."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True),
                                nn.Conv2d(hidden, channels, 1), nn.Sigmoid())

    def forward(self, x):
        return x * self.fc(F.adaptive_avg_pool2d(x, 1))


class BoundaryAttention(nn.Module):
    """BAM: concat(feature, feature * boundary) -> channel attention -> 1x1 back to C."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channel_attention = ChannelAttention(2 * channels, reduction)
        self.project = conv_bn_relu(2 * channels, channels, k=1)

    @staticmethod
    def attend(feature, boundary_prob):
        if feature.shape[-2:] != boundary_prob.shape[-2:]:
            raise ValueError(f"boundary map {tuple(boundary_prob.shape[-2:])} does not match "
                             f"feature map {tuple(feature.shape[-2:])}")
        return feature * boundary_prob

    def forward(self, feature, boundary_prob):
        attended = self.attend(feature, boundary_prob)
        return self.project(self.channel_attention(torch.cat([feature, attended], dim=1)))


class FusionDecoder(nn.Module):
    """Top-down fusion: up(high) + conv3x3(low), then a 3x3 refinement, twice."""

    def __init__(self, c1, c2, top, mid, low, out_channels):
        super().__init__()
        self.lateral2 = conv_bn_relu(c2, top)
        self.refine2 = conv_bn_relu(top, mid)
        self.lateral1 = conv_bn_relu(c1, mid)
        self.refine1 = conv_bn_relu(mid, low)
        self.classifier = nn.Conv2d(low, out_channels, 1)

    def forward(self, c1, c2, c4):
        x = self.refine2(upsample_to(c4, c2) + self.lateral2(c2))
        x = self.refine1(upsample_to(x, c1) + self.lateral1(c1))
        return self.classifier(x)


class TransLab(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        w = config.widths()
        self.backbone = build_backbone(config)

        if config.boundary_stream_enabled:
            bw = w["boundary_channels"]
            self.boundary_aspp = ASPP(w["c4"], bw, config.aspp_rates,
                                      reduce=w["boundary_aspp_reduce"])
            self.boundary_decoder = FusionDecoder(w["c1"], w["c2"], bw, bw, bw, 1)

        top, low = w["decoder_channels"]
        self.aspp = ASPP(w["c4"], w["aspp_channels"], config.aspp_rates)
        level_width = {"c1": w["c1"], "c2": w["c2"], "c4": w["aspp_channels"]}
        self.bam = nn.ModuleDict({lvl: BoundaryAttention(level_width[lvl], config.bam_reduction)
                                  for lvl in config.bam_levels})
        self.decoder = FusionDecoder(w["c1"], w["c2"], top, low, low, config.num_classes)
        if w["aspp_channels"] != top:
            raise ValueError("aspp_channels must equal the first decoder width")

    def backbone_forward(self, image):
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            ph, pw = (-h) % 16, (-w) % 16
            raise ValueError(f"input {h}x{w} is not divisible by 16; pad by "
                             f"({ph}, {pw}) pixels to {h + ph}x{w + pw}")
        return self.backbone(image)

    def boundary_stream_forward(self, pyramid, size):
        if not self.config.boundary_stream_enabled:
            raise RuntimeError("boundary stream is disabled in this model config")
        b4 = self.boundary_aspp(pyramid.c4)
        return upsample_to(self.boundary_decoder(pyramid.c1, pyramid.c2, b4), size)

    def bam_forward(self, level, feature, boundary_prob):
        prob = resize_boundary(boundary_prob, *feature.shape[-2:])
        return self.bam[level](feature, prob)

    def decoder_forward(self, pyramid, c4_aspp, boundary_prob, size):
        feats = {"c1": pyramid.c1, "c2": pyramid.c2, "c4": c4_aspp}
        for level in self.config.bam_levels:
            feats[level] = self.bam_forward(level, feats[level], boundary_prob)
        return upsample_to(self.decoder(feats["c1"], feats["c2"], feats["c4"]), size)

    def forward(self, image):
        size = image.shape[-2:]
        pyramid = self.backbone_forward(image)
        boundary_logits = boundary_prob = None
        if self.config.boundary_stream_enabled:
            boundary_logits = self.boundary_stream_forward(pyramid, size)
            boundary_prob = torch.sigmoid(boundary_logits)
        c4_aspp = self.aspp(pyramid.c4)
        seg_logits = self.decoder_forward(pyramid, c4_aspp, boundary_prob, size)
        return ForwardOutput(seg_logits, boundary_logits)


# ---------------------------------------------------------------------------
# budget


def count_parameters(model_or_config):
    model = model_or_config if isinstance(model_or_config, nn.Module) else _meta_model(model_or_config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _meta_model(config):
    cfg = ModelConfig(**{**config.to_dict(), "pretrained": False})
    with torch.device("meta"):
        return TransLab(cfg)


def estimate_flops(model_or_config, input_size=512):
    """Multiply-accumulate count of all conv and linear layers for one image.

    Bias additions, normalization, activations and interpolation are not
    counted (the usual convention of segmentation benchmark tables).
    """
    if isinstance(model_or_config, nn.Module):
        model, device = model_or_config, next(model_or_config.parameters()).device
    else:
        model, device = _meta_model(model_or_config), torch.device("meta")
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        kh, kw = mod.kernel_size
        total += out.numel() * (mod.in_channels // mod.groups) * kh * kw

    def linear_hook(mod, inp, out):
        nonlocal total
        total += out.numel() * mod.in_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size, device=device))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total
