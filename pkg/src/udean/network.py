"""The six learnable components: extractor, LR encoder, LR/SR decoders, two discriminators."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .degradation import ScaleFactor

CHECKPOINT_FORMAT = "udean-checkpoint"
CHECKPOINT_VERSION = (1, 0)
LEAK = 0.2

COMPONENTS = ("downsampling_extractor", "lr_encoder", "lr_decoder", "sr_decoder",
              "lr_discriminator", "feature_discriminator")
INFERENCE_COMPONENTS = ("lr_encoder", "sr_decoder")
GENERATOR_COMPONENTS = ("downsampling_extractor", "lr_encoder", "lr_decoder", "sr_decoder")


class NetworkError(ValueError):
    pass


@dataclass
class NetworkConfig:
    feat_channels: int = 64
    n_groups: int = 5
    n_blocks: int = 5
    reduction: int = 16
    scale: ScaleFactor = field(default_factory=ScaleFactor)
    disc_base_channels: int = 32

    def __post_init__(self):
        self.scale = ScaleFactor.parse(self.scale)
        if self.n_groups < 1 or self.n_blocks < 1:
            raise NetworkError("need at least one residual group and one block per group")
        if self.feat_channels % self.reduction:
            raise NetworkError(f"feat_channels={self.feat_channels} not divisible by "
                               f"reduction={self.reduction}")
        sx, sy, sz = self.scale
        if (sx, sy) != (2, 2) or sz not in (1, 2):
            raise NetworkError(f"unsupported scale {self.scale}; use 2x2x1 or 2x2x2")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scale"] = str(self.scale)
        return d


def conv3(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1)


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=LEAK, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvEncoder(nn.Sequential):
    """Six 3x3x3 conv layers, each followed by a leaky ReLU.

    ``strides`` holds one stride tuple per layer; the downsampling extractor
    puts the in-plane reduction on layer 2 and the through-slice one on layer 4.
    """

    def __init__(self, cin, channels, strides):
        layers = []
        for i, st in enumerate(strides):
            layers += [conv3(cin if i == 0 else channels, channels, st),
                       nn.LeakyReLU(LEAK)]
        super().__init__(*layers)


def extractor_strides(scale: ScaleFactor):
    sx, sy, sz = scale
    strides = [(1, 1, 1)] * 6
    strides[1] = (sx, sy, 1)
    strides[3] = (1, 1, sz)
    return strides


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.squeeze = nn.Conv3d(channels, channels // reduction, 1)
        self.excite = nn.Conv3d(channels // reduction, channels, 1)
        # test hook: gate pinned to 1, as if the sigmoid input were +inf
        self.force_open = False

    def forward(self, x):
        if self.force_open:
            return x
        w = torch.sigmoid(self.excite(torch.relu(self.squeeze(self.pool(x)))))
        return x * w


class RCAB(nn.Module):
    def __init__(self, channels, reduction):
        super().__init__()
        self.body = nn.Sequential(conv3(channels, channels), nn.ReLU(),
                                  conv3(channels, channels))
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        return x + self.attention(self.body(x))


class ResidualGroup(nn.Module):
    def __init__(self, channels, n_blocks, reduction):
        super().__init__()
        self.blocks = nn.Sequential(*[RCAB(channels, reduction) for _ in range(n_blocks)])
        self.tail = conv3(channels, channels)

    def forward(self, x):
        return x + self.tail(self.blocks(x))


class Trunk(nn.Module):
    """Residual-in-residual stack of channel-attention groups with a long skip."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.feat_channels
        self.groups = nn.Sequential(*[ResidualGroup(c, cfg.n_blocks, cfg.reduction)
                                      for _ in range(cfg.n_groups)])
        self.tail = conv3(c, c)

    def forward(self, x):
        return x + self.tail(self.groups(x))


class LRDecoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.channels = cfg.feat_channels
        self.trunk = Trunk(cfg)
        self.project = conv3(cfg.feat_channels, 1)

    def forward(self, f):
        if f.shape[1] != self.channels:
            raise NetworkError(f"decoder expects {self.channels} channels, got {f.shape[1]}")
        return self.project(self.trunk(f))


def pixel_shuffle_inplane(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    """(B, C*r*r, X, Y, Z) -> (B, C, rX, rY, Z)."""
    b, c, nx, ny, nz = x.shape
    if c % (r * r):
        raise NetworkError(f"{c} channels cannot be rearranged by factor {r}x{r}")
    c_out = c // (r * r)
    x = x.view(b, c_out, r, r, nx, ny, nz).permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, c_out, nx * r, ny * r, nz)


class SRDecoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.feat_channels
        self.channels = c
        self.scale = cfg.scale
        self.trunk = Trunk(cfg)
        self.expand = conv3(c, 4 * c)
        if cfg.scale.sz == 2:
            self.through_slice = nn.ConvTranspose3d(c, c, (3, 3, 4), stride=(1, 1, 2),
                                                    padding=(1, 1, 1))
        else:
            self.through_slice = None
        self.project = conv3(c, 1)

    def forward(self, f):
        if f.shape[1] != self.channels:
            raise NetworkError(f"decoder expects {self.channels} channels, got {f.shape[1]}")
        h = pixel_shuffle_inplane(self.expand(self.trunk(f)), 2)
        if self.through_slice is not None:
            h = self.through_slice(h)
        return self.project(h)


class Discriminator(nn.Module):
    """VGG-style: four (conv, lrelu, strided conv, lrelu) stages, then a 1-channel map.

    Strides halve the in-plane axes only; patches are a few slices thick.
    Outputs are raw scores for the least-squares objectives.
    """

    STAGES = 4

    def __init__(self, in_channels, base):
        super().__init__()
        self.in_channels = in_channels
        layers, cin = [], in_channels
        for i in range(self.STAGES):
            ch = base * 2 ** i
            layers += [conv3(cin, ch), nn.LeakyReLU(LEAK),
                       conv3(ch, ch, (2, 2, 1)), nn.LeakyReLU(LEAK)]
            cin = ch
        layers.append(conv3(cin, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise NetworkError(f"discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.body(x)

    @classmethod
    def output_shape(cls, spatial):
        nx, ny, nz = spatial
        for _ in range(cls.STAGES):
            nx, ny = (nx - 1) // 2 + 1, (ny - 1) // 2 + 1
        return (nx, ny, nz)


class ComponentSet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        c = cfg.feat_channels
        self.downsampling_extractor = ConvEncoder(1, c, extractor_strides(cfg.scale))
        self.lr_encoder = ConvEncoder(1, c, [(1, 1, 1)] * 6)
        self.lr_decoder = LRDecoder(cfg)
        self.sr_decoder = SRDecoder(cfg)
        self.lr_discriminator = Discriminator(1, cfg.disc_base_channels)
        self.feature_discriminator = Discriminator(c, cfg.disc_base_channels)
        init_weights(self)

    def component(self, name) -> nn.Module:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)

    def parameters_of(self, names):
        for n in names:
            yield from self.component(n).parameters()

    def generator_parameters(self):
        return list(self.parameters_of(GENERATOR_COMPONENTS))

    def check_hr(self, y):
        s = self.config.scale
        if any(n % k for n, k in zip(y.shape[-3:], s)):
            raise NetworkError(f"HR patch {tuple(y.shape[-3:])} not divisible by scale {s}")

    def extract(self, y):
        self.check_hr(y)
        return self.downsampling_extractor(y)

    def super_resolve(self, x):
        """Inference path: LR encoder then SR decoder, nothing else."""
        return self.sr_decoder(self.lr_encoder(x))


def count_parameters(module: nn.Module, subset: str = "all") -> int:
    if subset == "inference":
        if not isinstance(module, ComponentSet):
            raise NetworkError("the inference subset needs a ComponentSet")
        params = module.parameters_of(INFERENCE_COMPONENTS)
    elif subset == "all":
        params = module.parameters()
    else:
        raise NetworkError(f"unknown subset {subset!r}")
    return sum(p.numel() for p in params if p.requires_grad)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, components: ComponentSet, meta: dict | None = None):
    """Write an .npz archive: one array per ``component/param.path`` plus a JSON header."""
    header = {"format": CHECKPOINT_FORMAT,
              "version": "%d.%d" % CHECKPOINT_VERSION,
              "network": components.config.to_dict(),
              "meta": meta or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in components.state_dict().items()}
    arrays = {k.replace(".", "/", 1): v for k, v in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def read_checkpoint_header(path) -> dict:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise NetworkError(f"{path} is not a checkpoint")
    major = int(str(header["version"]).split(".")[0])
    if major != CHECKPOINT_VERSION[0]:
        raise NetworkError(f"checkpoint major version {major} unsupported")
    return header


def load_checkpoint(path, dtype=torch.float32):
    header = read_checkpoint_header(path)
    cfg = NetworkConfig(**header["network"])
    comps = ComponentSet(cfg).to(dtype)
    with np.load(path) as z:
        state = {k.replace("/", ".", 1): torch.from_numpy(z[k]) for k in z.files if k != "__header__"}
    missing, unexpected = comps.load_state_dict(state, strict=False)
    if missing:
        raise NetworkError(f"checkpoint lacks parameters: {missing[:5]}")
    return comps, header
