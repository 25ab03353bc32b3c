"""VAE-GAN: encoder / generator / discriminator, losses, KL annealing, training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetManifest, load_images


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VaeGanConfig:
    latent_dim: int = 64
    image_shape: tuple[int, int, int] = (3, 32, 32)
    beta_max: float = 1.0
    lambda_p: float = 1.0
    lr_eg: float = 2e-4
    lr_d: float = 2e-4
    batch_size: int = 16
    total_steps: int = 2000
    base_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta_max < 0 or self.lambda_p < 0:
            raise ValueError("beta_max and lambda_p must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        c, h, w = self.image_shape
        if h != w or h < 8 or (h & (h - 1)) != 0:
            raise ValueError(f"image height/width must be equal powers of two >= 8, got {h}x{w}")


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, down=False):
        super().__init__()
        stride = 2 if down else 1
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.n1 = _norm(c_out)
        self.n2 = _norm(c_out)
        self.skip = (
            nn.Conv2d(c_in, c_out, 1, stride) if (c_in != c_out or down) else nn.Identity()
        )

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return F.relu(h + self.skip(x))


class Encoder(nn.Module):
    """Residual conv stack mapping images to (mu, log_var) of the latent Gaussian."""

    def __init__(self, cfg: VaeGanConfig):
        super().__init__()
        c, h, _ = cfg.image_shape
        ch = cfg.base_channels
        n_down = int(math.log2(h // 4))
        blocks = [nn.Conv2d(c, ch, 3, 1, 1)]
        cur = ch
        for _ in range(n_down):
            nxt = min(cur * 2, 4 * ch)
            blocks.append(ResBlock(cur, nxt, down=True))
            cur = nxt
        self.body = nn.Sequential(*blocks)
        self.head = nn.Linear(cur * 16, 2 * cfg.latent_dim)
        self.latent_dim = cfg.latent_dim

    def forward(self, x):
        h = self.body(x)
        out = self.head(h.flatten(1))
        return out[:, : self.latent_dim], out[:, self.latent_dim :]


class Generator(nn.Module):
    """Decoder: latent -> image in [-1, 1] via upsample-conv blocks and tanh."""

    def __init__(self, cfg: VaeGanConfig):
        super().__init__()
        c, h, _ = cfg.image_shape
        ch = cfg.base_channels
        self.n_up = int(math.log2(h // 4))
        cur = min(ch * 2**self.n_up, 4 * ch)
        self.fc = nn.Linear(cfg.latent_dim, cur * 16)
        self.start_ch = cur
        blocks = []
        for _ in range(self.n_up):
            nxt = max(cur // 2, ch)
            blocks.append(ResBlock(cur, nxt))
            cur = nxt
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(cur, c, 3, 1, 1)

    def forward(self, z):
        h = self.fc(z).view(-1, self.start_ch, 4, 4)
        for block in self.blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h)
        return torch.tanh(self.out(h))


class Discriminator(nn.Module):
    """Conv stack emitting one unbounded score per image (hinge-loss pre-activation)."""

    def __init__(self, cfg: VaeGanConfig):
        super().__init__()
        c, h, _ = cfg.image_shape
        ch = cfg.base_channels
        n_down = int(math.log2(h // 4))
        layers = [nn.Conv2d(c, ch, 3, 1, 1), nn.LeakyReLU(0.2)]
        cur = ch
        for _ in range(n_down):
            nxt = min(cur * 2, 4 * ch)
            layers += [nn.Conv2d(cur, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
            cur = nxt
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cur * 16, 1)

    def forward(self, x):
        return self.head(self.body(x).flatten(1)).squeeze(1)


class FeaturePyramid(nn.Module):
    """Fixed random multi-scale conv features for the perceptual reconstruction term.

    Three stride-2 stages; each stage's output is channel-normalized so the
    perceptual distance measures structure rather than raw magnitude. Weights are
    seed-initialized and frozen; the interface admits a pretrained extractor.
    """

    def __init__(self, in_channels: int = 3, width: int = 16, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cur = in_channels
        for i in range(3):
            nxt = width * 2**i
            conv = nn.Conv2d(cur, nxt, 3, 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            convs.append(conv)
            cur = nxt
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            norm = h.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8
            feats.append(h / norm)
        return feats


# ---------------------------------------------------------------- losses

def kld_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Mean over batch and dims of 0.5 * (mu^2 + var - log var - 1)."""
    return 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0).mean()


def recon_loss(
    x: torch.Tensor,
    x_prime: torch.Tensor,
    feature_extractor: Optional[Callable] = None,
    lambda_p: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pixel L1 plus weighted perceptual L1; returns (total, pixel_l1, perceptual_l1)."""
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    pixel = (x - x_prime).abs().mean()
    if feature_extractor is None:
        perc = torch.zeros((), dtype=x.dtype, device=x.device)
    else:
        perc = _perceptual_l1(x, x_prime, feature_extractor)
    return pixel + lambda_p * perc, pixel, perc


def _perceptual_l1(x, x_prime, feature_extractor) -> torch.Tensor:
    fx = feature_extractor(x)
    fy = feature_extractor(x_prime)
    terms = [(a - b).abs().mean() for a, b in zip(fx, fy)]
    return sum(terms) / len(terms)


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake))."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    if fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return -fake_scores.mean()


def kl_weight(step: int, total_steps: int, beta_max: float) -> float:
    """Linear ramp of the KL weight from 0 at step 0 to beta_max at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} not in [0, {total_steps}]")
    return beta_max * step / total_steps


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """z = mu + sqrt(var) * r, r ~ N(0, I), so z ~ N(mu, exp(log_var)) elementwise."""
    std = (0.5 * log_var).exp()
    r = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + std * r


# ---------------------------------------------------------------- trained model

@dataclass
class TrainedVaeGan:
    encoder: Encoder
    generator: Generator
    discriminator: Discriminator
    perceptual: FeaturePyramid
    config: VaeGanConfig
    step: int = 0

    def _check_images(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.config.image_shape:
            raise ValueError(f"image batch shape {tuple(x.shape[1:])} != {self.config.image_shape}")

    @torch.no_grad()
    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_images(x)
        self.encoder.eval()
        return self.encoder(x)

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.config.latent_dim}")
        self.generator.eval()
        return self.generator(z)

    @torch.no_grad()
    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        self._check_images(x)
        self.discriminator.eval()
        return self.discriminator(x)

    def encode_np(self, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        mus, lvs = [], []
        for i in range(0, len(images), batch_size):
            mu, lv = self.encode(torch.from_numpy(images[i : i + batch_size]))
            mus.append(mu.numpy())
            lvs.append(lv.numpy())
        return np.concatenate(mus), np.concatenate(lvs)

    def decode_np(self, latents: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        for i in range(0, len(latents), batch_size):
            outs.append(self.decode(torch.from_numpy(latents[i : i + batch_size].astype(np.float32))).numpy())
        return np.concatenate(outs)

    def save(self, path: str) -> None:
        torch.save(
            {
                "config": asdict(self.config),
                "step": self.step,
                "encoder": self.encoder.state_dict(),
                "generator": self.generator.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "perceptual": self.perceptual.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str) -> "TrainedVaeGan":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        cfg = VaeGanConfig(**blob["config"])
        model = build_model(cfg)
        model.encoder.load_state_dict(blob["encoder"])
        model.generator.load_state_dict(blob["generator"])
        model.discriminator.load_state_dict(blob["discriminator"])
        model.perceptual.load_state_dict(blob["perceptual"])
        model.step = blob["step"]
        return model


def build_model(cfg: VaeGanConfig) -> TrainedVaeGan:
    torch.manual_seed(cfg.seed)
    return TrainedVaeGan(
        encoder=Encoder(cfg),
        generator=Generator(cfg),
        discriminator=Discriminator(cfg),
        perceptual=FeaturePyramid(in_channels=cfg.image_shape[0]),
        config=cfg,
    )


LOG_COLUMNS = ["step", "d_loss", "g_adv_loss", "recon_l1", "recon_perc", "kld", "kl_weight"]


def write_loss_log(log: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(log)


def train_vaegan(
    manifest: DatasetManifest,
    cfg: VaeGanConfig,
    log_path: Optional[str] = None,
    progress: Optional[Callable[[int, dict], None]] = None,
) -> tuple[TrainedVaeGan, list[dict]]:
    """Alternating hinge-GAN / VAE training; deterministic given cfg.seed."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    model = build_model(cfg)
    images = torch.from_numpy(load_images(manifest))
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    opt_eg = torch.optim.Adam(
        list(model.encoder.parameters()) + list(model.generator.parameters()),
        lr=cfg.lr_eg, betas=(0.5, 0.999),
    )
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))

    model.encoder.train()
    model.generator.train()
    model.discriminator.train()

    log = []
    for step in range(cfg.total_steps):
        idx = torch.randint(len(images), (min(cfg.batch_size, len(images)),), generator=gen)
        x = images[idx]

        # D step on real vs reconstructed fakes
        with torch.no_grad():
            mu, log_var = model.encoder(x)
            z = reparameterize(mu, log_var, gen)
            x_fake = model.generator(z)
        real_scores = model.discriminator(x)
        fake_scores = model.discriminator(x_fake)
        d_loss = hinge_d_loss(real_scores, fake_scores)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # E+G step: reconstruction + annealed KL + adversarial
        mu, log_var = model.encoder(x)
        z = reparameterize(mu, log_var, gen)
        x_prime = model.generator(z)
        total_r, pixel_l1, perc_l1 = recon_loss(x, x_prime, model.perceptual, cfg.lambda_p)
        kld = kld_loss(mu, log_var)
        g_adv = hinge_g_loss(model.discriminator(x_prime))
        beta = kl_weight(step, cfg.total_steps, cfg.beta_max)
        eg_loss = total_r + beta * kld + g_adv
        opt_eg.zero_grad()
        eg_loss.backward()
        opt_eg.step()

        entry = {
            "step": step,
            "d_loss": d_loss.item(),
            "g_adv_loss": g_adv.item(),
            "recon_l1": pixel_l1.item(),
            "recon_perc": perc_l1.item(),
            "kld": kld.item(),
            "kl_weight": beta,
        }
        for key in ("d_loss", "g_adv_loss", "recon_l1", "recon_perc", "kld"):
            if not math.isfinite(entry[key]):
                raise TrainingDiverged(f"non-finite loss at step {step}: {entry}")
        log.append(entry)
        if progress is not None:
            progress(step, entry)

    model.step = cfg.total_steps
    if log_path is not None:
        write_loss_log(log, log_path)
    return model, log
