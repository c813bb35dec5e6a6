"""Noise-prediction networks: 1D temporal U-Net, MLP, and a small image U-Net."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import TimeMLP


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResBlock1d(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv1d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv1d(cout, cout, 3, padding=1)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TemporalUNet(nn.Module):
    """1D U-Net over (B, L, N) sequences; convolution runs along L with N channels.

    Three resolution levels with stride-2 down/upsampling. Inputs whose length
    is not a multiple of 4 are edge-padded and cropped back.
    """

    def __init__(self, N: int = 20, base: int = 64, mults=(1, 2, 2)):
        super().__init__()
        self.N, self.base, self.mults = N, base, tuple(mults)
        temb = 4 * base
        self.time = TimeMLP(base, temb)
        chans = [base * m for m in mults]
        self.inp = nn.Conv1d(N, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = chans[0]
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock1d(c, ch, temb))
            c = ch
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv1d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock1d(c, c, temb)
        self.up_blocks = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            self.up_blocks.append(ResBlock1d(c + ch, ch, temb))
            c = ch
            if i > 0:
                self.upsample.append(nn.Conv1d(c, chans[i - 1], 3, padding=1))
                c = chans[i - 1]
        # no norm before the output conv: with few channels per group it would strip
        # each channel's temporal mean and the absolute scale of the prediction
        self.out = nn.Conv1d(c, N, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def hparams(self):
        return {"N": self.N, "base": self.base, "mults": list(self.mults)}

    def forward(self, x, t):
        B, L, N = x.shape
        factor = 2 ** (len(self.mults) - 1)
        pad = (-L) % factor
        h = x.transpose(1, 2)
        if pad:
            h = F.pad(h, (0, pad), mode="replicate")
        emb = self.time(t)
        h = self.inp(h)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], 1), emb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.out(F.silu(h))
        return h[:, :, :L].transpose(1, 2)


class MLPDenoiser(nn.Module):
    """Four linear layers over a single code, with the step embedding added to each hidden layer."""

    def __init__(self, N: int = 20, hidden: int = 256):
        super().__init__()
        self.N, self.hidden = N, hidden
        self.time = TimeMLP(64, hidden)
        self.layers = nn.ModuleList([nn.Linear(N, hidden), nn.Linear(hidden, hidden),
                                     nn.Linear(hidden, hidden)])
        self.out = nn.Linear(hidden, N)

    def hparams(self):
        return {"N": self.N, "hidden": self.hidden}

    def forward(self, x, t):
        emb = self.time(t)
        h = x
        for layer in self.layers:
            h = F.silu(layer(h) + emb)
        return self.out(h)


class ResBlock2d(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ImageUNet(nn.Module):
    """Small 2D U-Net; an optional condition vector is embedded and added to the step embedding."""

    def __init__(self, C: int = 3, base: int = 32, mults=(1, 2, 2), cond_dim: int = 0):
        super().__init__()
        self.C, self.base, self.mults, self.cond_dim = C, base, tuple(mults), cond_dim
        temb = 4 * base
        self.time = TimeMLP(base, temb)
        self.cond = nn.Linear(cond_dim, temb) if cond_dim else None
        chans = [base * m for m in mults]
        self.inp = nn.Conv2d(C, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = chans[0]
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock2d(c, ch, temb))
            c = ch
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock2d(c, c, temb)
        self.up_blocks = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            self.up_blocks.append(ResBlock2d(c + ch, ch, temb))
            c = ch
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                c = chans[i - 1]
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, C, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def hparams(self):
        return {"C": self.C, "base": self.base, "mults": list(self.mults), "cond_dim": self.cond_dim}

    def forward(self, x, t, cond=None):
        emb = self.time(t)
        if self.cond is not None and cond is not None:
            emb = emb + self.cond(cond)
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], 1), emb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))
