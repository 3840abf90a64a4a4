"""Encoders, generator, discriminators and the segmentation head.

All image tensors are ``(B, 1, H, W)``. Content codes are ``(B, C_c, H/4, W/4)``,
attribute codes ``(B, d_a)`` and modality codes one-hot ``(B, K)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

NORMS = ("instance", "layer", "none")
REALNESS = ("per_modality", "shared")


@dataclass
class NetConfig:
    width: int = 16
    content_channels: int = 64
    attr_dim: int = 8
    K: int = 3
    num_classes: int = 5
    res_blocks: int = 4
    disc_depth: int = 3
    content_norm: str = "instance"
    generator_norm: str = "layer"
    spectral: bool = True
    # one realness map per modality, or a single modality-agnostic map
    realness: str = "per_modality"

    def __post_init__(self):
        for name in ("width", "content_channels", "K", "num_classes", "res_blocks", "disc_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetConfig.{name} must be positive")
        if self.attr_dim < 2:
            raise ValueError("NetConfig.attr_dim must be >= 2")
        for name in ("content_norm", "generator_norm"):
            if getattr(self, name) not in NORMS:
                raise ValueError(f"NetConfig.{name} must be one of {NORMS}")
        if self.realness not in REALNESS:
            raise ValueError(f"NetConfig.realness must be one of {REALNESS}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "NetConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**doc)


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    if kind == "layer":
        return nn.GroupNorm(1, ch)
    return nn.Identity()


def _check_image(x: torch.Tensor, channels: int = 1) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"expected image batch (B, {channels}, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 4 or w % 4 or min(h, w) < 16:
        raise ValueError(f"image sides must be multiples of 4 and >= 16, got {(h, w)}")


class ResBlock(nn.Module):
    def __init__(self, ch: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), _norm(norm, ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), _norm(norm, ch))

    def forward(self, x):
        return x + self.body(x)


class ContentEncoder(nn.Module):
    def __init__(self, cfg: NetConfig, in_channels: int = 1):
        super().__init__()
        w, n = cfg.width, cfg.content_norm
        layers = [nn.Conv2d(in_channels, w, 7, padding=3, padding_mode="reflect"), _norm(n, w),
                  nn.LeakyReLU(0.2)]
        for c_in, c_out in ((w, 2 * w), (2 * w, 4 * w)):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), _norm(n, c_out),
                       nn.LeakyReLU(0.2)]
        layers += [ResBlock(4 * w, n) for _ in range(cfg.res_blocks)]
        layers.append(nn.Conv2d(4 * w, cfg.content_channels, 1))
        self.net = nn.Sequential(*layers)
        self.in_channels = in_channels

    def forward(self, x):
        _check_image(x, self.in_channels)
        return self.net(x)


class AttributeEncoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.width
        chans = [1, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.fc = nn.Linear(4 * w, cfg.attr_dim)

    def forward(self, x):
        _check_image(x)
        return self.fc(self.net(x).mean(dim=(2, 3)))


class InjectBlock(nn.Module):
    """Residual block with the style code concatenated after each norm."""

    def __init__(self, ch: int, code_dim: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.norm1 = _norm(norm, ch)
        self.mix1 = nn.Conv2d(ch + code_dim, ch, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.norm2 = _norm(norm, ch)
        self.mix2 = nn.Conv2d(ch + code_dim, ch, 1)

    def forward(self, x, code):
        c = code[:, :, None, None].expand(-1, -1, *x.shape[-2:])
        y = F.leaky_relu(self.mix1(torch.cat([self.norm1(self.conv1(x)), c], 1)), 0.2)
        y = self.mix2(torch.cat([self.norm2(self.conv2(y)), c], 1))
        return x + y


class Generator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.width
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.content_channels, 4 * w, 1)
        code_dim = cfg.attr_dim + cfg.K
        self.blocks = nn.ModuleList(InjectBlock(4 * w, code_dim, "instance")
                                    for _ in range(cfg.res_blocks))
        g = cfg.generator_norm
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1), _norm(g, 2 * w),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), _norm(g, w), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 1, 7, padding=3, padding_mode="reflect"), nn.Tanh())

    def forward(self, z_c, z_a, z_d):
        cfg = self.cfg
        if z_c.dim() != 4 or z_c.shape[1] != cfg.content_channels:
            raise ValueError(f"content code must be (B, {cfg.content_channels}, h, w)")
        if z_a.shape[-1] != cfg.attr_dim or z_d.shape[-1] != cfg.K:
            raise ValueError(f"attribute/modality codes must have {cfg.attr_dim}/{cfg.K} entries")
        code = torch.cat([z_a, z_d.to(z_a.dtype)], 1)
        h = self.stem(z_c)
        for block in self.blocks:
            h = block(h, code)
        return self.up(h)


def _sn(module: nn.Module, enabled: bool) -> nn.Module:
    return spectral_norm(module) if enabled else module


class DomainDiscriminator(nn.Module):
    """Patch discriminator with a modality-classification head on the shared trunk.

    With ``realness="per_modality"`` the realness head has K output maps and
    ``forward(x, modality)`` scores each image against its own modality's map.
    Without ``modality`` all K maps are returned.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.K = cfg.K
        self.per_modality = cfg.realness == "per_modality"
        ch, layers = 1, []
        for i in range(cfg.disc_depth):
            out = cfg.width * 2 ** i
            layers += [_sn(nn.Conv2d(ch, out, 4, stride=2, padding=1), cfg.spectral),
                       nn.LeakyReLU(0.2)]
            ch = out
        layers += [_sn(nn.Conv2d(ch, ch, 3, padding=1), cfg.spectral), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        maps = cfg.K if self.per_modality else 1
        self.realness = _sn(nn.Conv2d(ch, maps, 3, padding=1), cfg.spectral)
        self.classify = nn.Linear(ch, cfg.K)

    def forward(self, x, modality: torch.Tensor | None = None):
        _check_image(x)
        h = self.trunk(x)
        real = self.realness(h)
        if self.per_modality and modality is not None:
            modality = torch.as_tensor(modality, device=x.device).reshape(-1)
            if modality.numel() == 1:
                modality = modality.expand(x.shape[0])
            if modality.numel() != x.shape[0] or int(modality.max()) >= self.K or int(modality.min()) < 0:
                raise ValueError("modality must hold one index in [0, K) per image")
            real = real.gather(1, modality.long().view(-1, 1, 1, 1).expand(-1, 1, *real.shape[2:]))
        return real, self.classify(h.mean(dim=(2, 3)))


class ContentDiscriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w, cc = cfg.width, cfg.content_channels
        self.cfg = cfg
        self.net = nn.Sequential(
            _sn(nn.Conv2d(cc, 4 * w, 3, stride=2, padding=1), cfg.spectral), nn.LeakyReLU(0.2),
            _sn(nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), cfg.spectral), nn.LeakyReLU(0.2),
            _sn(nn.Conv2d(4 * w, 4 * w, 3, padding=1), cfg.spectral), nn.LeakyReLU(0.2))
        self.fc = nn.Linear(4 * w, cfg.K)

    def forward(self, z_c):
        if z_c.dim() != 4 or z_c.shape[1] != self.cfg.content_channels:
            raise ValueError(f"content code must be (B, {self.cfg.content_channels}, h, w)")
        return self.fc(self.net(z_c).mean(dim=(2, 3)))


class FusionStem(nn.Module):
    """Depth-wise filter over K stacked modalities, then a 1x1 projection to one channel."""

    def __init__(self, K: int, kernel: int = 3):
        super().__init__()
        self.K = K
        self.depthwise = nn.Conv2d(K, K, kernel, padding=kernel // 2, groups=K, bias=False)
        self.project = nn.Conv2d(K, 1, 1, bias=False)
        self.reset_identity()

    def reset_identity(self):
        with torch.no_grad():
            self.depthwise.weight.zero_()
            c = self.depthwise.kernel_size[0] // 2
            self.depthwise.weight[:, 0, c, c] = 1.0
            self.project.weight.fill_(1.0 / self.K)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.K:
            raise ValueError(f"expected {self.K} stacked modalities, got {tuple(x.shape)}")
        return self.project(self.depthwise(x))


class SegDecoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.width
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(cfg.content_channels, 4 * w, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(4 * w, affine=True), nn.LeakyReLU(0.2),
            ResBlock(4 * w, "instance"),
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(w, affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(w, cfg.num_classes, 3, padding=1, padding_mode="reflect"))

    def forward(self, z_c):
        """Unnormalized class scores (B, C, H, W)."""
        if z_c.dim() != 4 or z_c.shape[1] != self.cfg.content_channels:
            raise ValueError(f"content code must be (B, {self.cfg.content_channels}, h, w)")
        return self.net(z_c)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = m.parametrizations.weight.original if hasattr(m, "parametrizations") else m.weight
            nn.init.normal_(weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class TranslationModel(nn.Module):
    """Shared content/attribute encoders, conditional generator and both discriminators."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_c = ContentEncoder(cfg)
        self.enc_a = AttributeEncoder(cfg)
        self.gen = Generator(cfg)
        self.dis_domain = DomainDiscriminator(cfg)
        self.dis_content = ContentDiscriminator(cfg)
        for sub in (self.enc_c, self.enc_a, self.gen, self.dis_domain, self.dis_content):
            init_weights(sub)

    def components(self) -> dict[str, nn.Module]:
        return {"enc_c": self.enc_c, "enc_a": self.enc_a, "gen": self.gen,
                "dis_domain": self.dis_domain, "dis_content": self.dis_content}

    def content_encode(self, x):
        return self.enc_c(x)

    def attribute_encode(self, x):
        return self.enc_a(x)

    def generate(self, z_c, z_a, z_d):
        return self.gen(z_c, z_a, z_d)

    def discriminate_domain(self, x, modality=None):
        return self.dis_domain(x, modality)

    def discriminate_content(self, z_c):
        return self.dis_content(z_c)


class SegmentationModel(nn.Module):
    """Fusion stem -> (reused) content encoder -> decoder."""

    def __init__(self, cfg: NetConfig, fuse_inputs: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.fusion = FusionStem(fuse_inputs or cfg.K)
        self.enc_c = ContentEncoder(cfg)
        self.decoder = SegDecoder(cfg)
        init_weights(self.enc_c)
        init_weights(self.decoder)

    def components(self) -> dict[str, nn.Module]:
        return {"fusion": self.fusion, "enc_c": self.enc_c, "decoder": self.decoder}

    def fuse_and_encode(self, images):
        """``images`` is (B, K, H, W) or a length-K sequence of (B, 1, H, W) tensors."""
        if not torch.is_tensor(images):
            if len(images) != self.fusion.K:
                raise ValueError(f"expected {self.fusion.K} modality images, got {len(images)}")
            images = torch.cat(list(images), dim=1)
        return self.enc_c(self.fusion(images))

    def logits(self, images):
        return self.decoder(self.fuse_and_encode(images))

    def seg_decode(self, z_c):
        return torch.softmax(self.decoder(z_c), dim=1)

    def forward(self, images):
        return torch.softmax(self.logits(images), dim=1)


def build(kind: str, cfg: NetConfig, seed: int = 0, **kwargs) -> nn.Module:
    """Construct a model with parameters drawn from a private seeded stream."""
    cls = {"translation": TranslationModel, "segmentation": SegmentationModel}[kind]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(cfg, **kwargs)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
