"""Desk-scale 3D U-Nets: a plain variant and one with a residual encoder."""

import torch
import torch.nn as nn


def conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(0.01),
    )


class PlainStage(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.body = nn.Sequential(conv_block(c_in, c_out, stride), conv_block(c_out, c_out))

    def forward(self, x):
        return self.body(x)


class ResidualStage(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = conv_block(c_in, c_out, stride)
        self.conv2 = nn.Sequential(
            nn.Conv3d(c_out, c_out, 3, padding=1), nn.InstanceNorm3d(c_out, affine=True)
        )
        self.skip = nn.Sequential(
            nn.Conv3d(c_in, c_out, 1, stride=stride), nn.InstanceNorm3d(c_out, affine=True)
        )
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x):
        return self.act(self.conv2(self.conv1(x)) + self.skip(x))


class UNet3D(nn.Module):
    """Encoder/decoder with skip connections; ``levels`` resolutions, stride-2
    convs for downsampling and transposed convs for upsampling."""

    def __init__(self, n_classes=3, base_width=8, levels=3, residual=False):
        super().__init__()
        stage = ResidualStage if residual else PlainStage
        widths = [base_width * 2**i for i in range(levels)]
        self.encoder = nn.ModuleList()
        c_in = 1
        for i, w in enumerate(widths):
            self.encoder.append(stage(c_in, w, stride=1 if i == 0 else 2))
            c_in = w
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w_hi, w_lo in zip(reversed(widths[1:]), reversed(widths[:-1])):
            self.up.append(nn.ConvTranspose3d(w_hi, w_lo, 2, stride=2))
            self.decoder.append(PlainStage(2 * w_lo, w_lo))
        self.head = nn.Conv3d(widths[0], n_classes, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.up, self.decoder):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def build_network(arch: dict) -> UNet3D:
    kind = arch["kind"]
    if kind not in ("unet", "resunet"):
        raise ValueError(f"unknown segmentation architecture {kind!r}")
    return UNet3D(
        n_classes=arch.get("n_classes", 3),
        base_width=arch.get("base_width", 8),
        levels=arch.get("levels", 3),
        residual=kind == "resunet",
    )
