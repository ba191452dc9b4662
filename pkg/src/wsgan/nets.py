"""Trainable networks: encoder, projection head, decoder, generator and the
two-branch self-attention discriminator with spectrally normalized blocks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .config import NetConfig


def _check_images(x: torch.Tensor, size: int) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"expected images of shape (B, 1, {size}, {size}), got {tuple(x.shape)}")


def _check_vectors(x: torch.Tensor, dim: int, what: str) -> None:
    if x.dim() != 2 or x.shape[1] != dim:
        raise ValueError(f"expected {what} of shape (B, {dim}), got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


class SpectralNorm(nn.Module):
    """Weight parametrization W -> W / sigma_max(W), sigma estimated by power iteration.

    The weight is viewed as a matrix of shape (out, in * kh * kw). ``u`` and ``v``
    persist across calls, so a few iterations per training forward keep the
    estimate tight while the weight drifts slowly under the optimizer.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 5, eps: float = 1e-12):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        mat = weight.detach().reshape(weight.shape[0], -1)
        g = torch.Generator().manual_seed(0)
        u = torch.randn(mat.shape[0], generator=g, dtype=weight.dtype)
        v = torch.randn(mat.shape[1], generator=g, dtype=weight.dtype)
        self.register_buffer("u", F.normalize(u, dim=0, eps=eps))
        self.register_buffer("v", F.normalize(v, dim=0, eps=eps))
        with torch.no_grad():
            self._power_iterate(mat, 15)

    @torch.no_grad()
    def _power_iterate(self, mat: torch.Tensor, n: int) -> None:
        u, v = self.u, self.v
        for _ in range(n):
            v = F.normalize(mat.t() @ u, dim=0, eps=self.eps)
            u = F.normalize(mat @ v, dim=0, eps=self.eps)
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        return torch.dot(self.u, mat @ self.v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            self._power_iterate(mat.detach(), self.n_power_iterations)
        sigma = torch.dot(self.u, mat @ self.v)
        return weight / sigma.clamp_min(self.eps)


def spectral_norm(module: nn.Module, n_power_iterations: int = 5) -> nn.Module:
    parametrize.register_parametrization(
        module, "weight", SpectralNorm(module.weight, n_power_iterations)
    )
    return module


def spectral_modules(model: nn.Module):
    """Yield (name, module) for every layer carrying a SpectralNorm parametrization."""
    for name, mod in model.named_modules():
        if parametrize.is_parametrized(mod, "weight"):
            if any(isinstance(p, SpectralNorm) for p in mod.parametrizations.weight):
                yield name, mod


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class ConvBlock(nn.Module):
    """Residual block of spectrally normalized 3x3 convolutions.

    The shortcut is the identity when shape is preserved, otherwise a spectrally
    normalized 1x1 convolution with the same stride. Activations sit inside the
    residual branch only, so a zeroed branch leaves the (projected) shortcut.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 2, n_power_iterations: int = 5):
        super().__init__()
        if c_in <= 0 or c_out <= 0 or stride <= 0:
            raise ValueError(f"malformed ConvBlock config ({c_in}, {c_out}, stride={stride})")
        sn = lambda m: spectral_norm(m, n_power_iterations)  # noqa: E731
        self.conv1 = sn(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1))
        self.conv2 = sn(nn.Conv2d(c_out, c_out, 3, padding=1))
        self.shortcut = None
        if c_in != c_out or stride != 1:
            self.shortcut = sn(nn.Conv2d(c_in, c_out, 1, stride=stride))

    def forward(self, x):
        h = self.conv1(F.leaky_relu(x, 0.2))
        h = self.conv2(F.leaky_relu(h, 0.2))
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + h


class SpatialAttention(nn.Module):
    """Non-local attention over the H*W positions (SAGAN style)."""

    def __init__(self, channels: int, n_power_iterations: int = 5):
        super().__init__()
        inner = max(channels // 8, 1)
        sn = lambda m: spectral_norm(m, n_power_iterations)  # noqa: E731
        self.query = sn(nn.Conv2d(channels, inner, 1))
        self.key = sn(nn.Conv2d(channels, inner, 1))
        self.value = sn(nn.Conv2d(channels, channels, 1))
        self.gamma = nn.Parameter(torch.zeros(1))

    def weights(self, x):
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)  # (B, N, c')
        k = self.key(x).flatten(2)  # (B, c', N)
        return torch.softmax(torch.bmm(q, k), dim=-1)  # rows: query positions

    def attend(self, x):
        attn = self.weights(x)
        v = self.value(x).flatten(2)  # (B, C, N)
        return torch.bmm(v, attn.transpose(1, 2)).view_as(x)

    def forward(self, x):
        return x + self.gamma * self.attend(x)


class PixelAttention(nn.Module):
    """Attention across channels at every position: the transposed non-local block."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1))

    def weights(self, x):
        f = x.flatten(2)  # (B, C, N)
        energy = torch.bmm(f, f.transpose(1, 2)) / f.shape[-1] ** 0.5
        return torch.softmax(energy, dim=-1)  # (B, C, C)

    def attend(self, x):
        return torch.bmm(self.weights(x), x.flatten(2)).view_as(x)

    def forward(self, x):
        return x + self.gamma * self.attend(x)


class AttentionPair(nn.Module):
    """Spatial and pixel attention applied side by side, their features summed."""

    def __init__(self, channels: int, n_power_iterations: int = 5):
        super().__init__()
        self.spatial = SpatialAttention(channels, n_power_iterations)
        self.pixel = PixelAttention(channels)

    def forward(self, x):
        return x + self.spatial.gamma * self.spatial.attend(x) + self.pixel.gamma * self.pixel.attend(x)


# ---------------------------------------------------------------------------
# stage-1 networks
# ---------------------------------------------------------------------------


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.down is None else self.down(x)))


class Encoder(nn.Module):
    """Small residual CNN standing in for the ResNet convolutional trunk.

    One stride-2 residual block per entry of ``widths``; global average pooling
    gives H with dimension ``widths[-1]``.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.image_size = cfg.image_size
        widths = list(cfg.encoder_widths)
        self.stem = nn.Sequential(
            nn.Conv2d(1, widths[0], 3, padding=1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()
        )
        blocks = []
        c = widths[0]
        for w in widths:
            blocks.append(_ResBlock(c, w, 2))
            c = w
        self.blocks = nn.Sequential(*blocks)
        self.d_h = c

    def forward(self, x):
        _check_images(x, self.image_size)
        return self.blocks(self.stem(x)).mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    def __init__(self, d_h: int, d_z: int):
        super().__init__()
        self.d_h = d_h
        self.fc1 = nn.Linear(d_h, d_h)
        self.fc2 = nn.Linear(d_h, d_z)

    def forward(self, h):
        _check_vectors(h, self.d_h, "latent H")
        return self.fc2(F.relu(self.fc1(h)))


def _upsample_plan(image_size: int, n_blocks: int = 4) -> int:
    start = image_size // 2**n_blocks
    if start < 1 or start * 2**n_blocks != image_size:
        raise ValueError(f"image_size {image_size} is not divisible by {2 ** n_blocks}")
    return start


class Decoder(nn.Module):
    """Maps H back to an image through four 4x4 transposed convolutions."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.d_h = cfg.d_h
        self.start = _upsample_plan(cfg.image_size)
        w = cfg.dec_width
        self.width = w
        self.fc = nn.Linear(cfg.d_h, w * self.start**2)
        chans = [w, w // 2, w // 4, w // 8]
        layers = []
        c = w
        for i, co in enumerate(chans[1:] + [1]):
            co = max(co, 1)
            layers.append(nn.ConvTranspose2d(c, co, 4, stride=2, padding=1))
            if i < 3:
                layers += [nn.BatchNorm2d(co), nn.ReLU()]
            c = co
        self.net = nn.Sequential(*layers)

    def forward(self, h):
        _check_vectors(h, self.d_h, "latent H")
        x = F.relu(self.fc(h)).view(-1, self.width, self.start, self.start)
        return torch.tanh(self.net(x))


class Generator(nn.Module):
    """Noise -> image through four deconvolution blocks with 3x3 kernels."""

    n_blocks = 4

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.noise_dim = cfg.noise_dim
        self.start = _upsample_plan(cfg.image_size, self.n_blocks)
        w = cfg.gen_width
        self.width = w
        self.fc = nn.Linear(cfg.noise_dim, w * self.start**2)
        self.bn0 = nn.BatchNorm1d(w * self.start**2)
        blocks = []
        c = w
        for _ in range(self.n_blocks):
            co = max(c // 2, 8)
            blocks.append(
                nn.Sequential(
                    nn.ConvTranspose2d(c, co, 3, stride=2, padding=1, output_padding=1),
                    nn.BatchNorm2d(co),
                    nn.ReLU(),
                )
            )
            c = co
        self.blocks = nn.ModuleList(blocks)
        self.to_image = nn.Conv2d(c, 1, 3, padding=1)

    def features(self, z):
        """Intermediate maps, from the reshaped latent through each block."""
        _check_vectors(z, self.noise_dim, "noise")
        x = F.relu(self.bn0(self.fc(z))).view(-1, self.width, self.start, self.start)
        maps = [x]
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return maps

    def forward(self, z):
        return torch.tanh(self.to_image(self.features(z)[-1]))

    def sample_noise(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(n, self.noise_dim, generator=generator)


# ---------------------------------------------------------------------------
# discriminator / classifier
# ---------------------------------------------------------------------------


class _Branch(nn.Module):
    """Two conv blocks, the attention pair, then the remaining blocks."""

    def __init__(self, widths, stride, n_pi):
        super().__init__()
        c = 1
        head, tail = [], []
        for i, w in enumerate(widths):
            (head if i < 2 else tail).append(ConvBlock(c, w, stride, n_pi))
            c = w
        self.head = nn.Sequential(*head)
        self.attention = AttentionPair(widths[min(1, len(widths) - 1)], n_pi)
        self.tail = nn.Sequential(*tail)
        self.out_channels = c

    def forward(self, x):
        return self.tail(self.attention(self.head(x)))


class Discriminator(nn.Module):
    """Global + local classifier with a class head (D1) and a realness head (D2).

    The local branch stacks five stride-2 blocks; the global branch compresses
    faster with two stride-4 blocks. Each branch is pooled to a vector, the
    two vectors are summed, and both linear heads read the fused feature.
    """

    def __init__(self, cfg: NetConfig, attention: bool = True):
        super().__init__()
        self.image_size = cfg.image_size
        self.n_classes = cfg.n_classes
        w = cfg.disc_width
        n_pi = cfg.sn_power_iterations
        self.local_branch = _Branch([w, 2 * w, 2 * w, 4 * w, 4 * w], 2, n_pi)
        self.global_branch = _Branch([2 * w, 4 * w], 4, n_pi)
        if not attention:
            self.local_branch.attention = nn.Identity()
            self.global_branch.attention = nn.Identity()
        feat = 4 * w
        # the class head stays unnormalized so logits can grow to confident predictions
        self.class_head = nn.Linear(feat, cfg.n_classes)
        self.real_head = spectral_norm(nn.Linear(feat, 1), n_pi)

    def features(self, x):
        _check_images(x, self.image_size)
        local = self.local_branch(x).mean(dim=(2, 3))
        glob = self.global_branch(x).mean(dim=(2, 3))
        return F.leaky_relu(local + glob, 0.2)

    def forward(self, x):
        """Return (class_logits (B, n), realness (B, 1))."""
        f = self.features(x)
        return self.class_head(f), self.real_head(f)


def build_stage1(cfg: NetConfig):
    enc = Encoder(cfg)
    return enc, ProjectionHead(enc.d_h, cfg.d_z), Decoder(cfg)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
