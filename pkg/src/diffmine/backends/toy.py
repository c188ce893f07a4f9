"""Small pixel-space conditional noise predictor and its backend wrapper.

Conditioning enters through FiLM (per-channel scale and shift) computed from
the prompt embedding and a sinusoidal time embedding; two coordinate
channels let the network tie content to position.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..core import Conditioning, DenoiserBackend, HashTextEmbedder, NoiseSchedule


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ToyDenoiser(nn.Module):
    def __init__(self, channels: int = 1, width: int = 32, cond_dim: int = 16, n_blocks: int = 3,
                 time_dim: int = 32):
        super().__init__()
        self.config = dict(channels=channels, width=width, cond_dim=cond_dim, n_blocks=n_blocks,
                           time_dim=time_dim)
        self.time_dim = time_dim
        self.stem = nn.Conv2d(channels + 2, width, 3, padding=1)
        # coordinate channels start disconnected: an untrained network has no
        # positional preference, training can still learn one
        with torch.no_grad():
            self.stem.weight[:, channels:] = 0.0
        self.film = nn.Sequential(nn.Linear(time_dim + cond_dim, 128), nn.SiLU(),
                                  nn.Linear(128, 2 * width * n_blocks))
        self.norms = nn.ModuleList([nn.GroupNorm(8, width) for _ in range(n_blocks)])
        self.convs = nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in range(n_blocks)])
        self.out_norm = nn.GroupNorm(8, width)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, return_features: bool = False):
        """``z``: (B, C, H, W); ``t``: (B,); ``cond``: (B, cond_dim) or (cond_dim,)."""
        b, _, h, w = z.shape
        if cond.dim() == 1:
            cond = cond.expand(b, -1)
        ys = torch.linspace(-1.0, 1.0, h, dtype=z.dtype)
        xs = torch.linspace(-1.0, 1.0, w, dtype=z.dtype)
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij")).expand(b, -1, -1, -1)
        x = self.stem(torch.cat([z, grid], dim=1))
        film = self.film(torch.cat([timestep_embedding(t, self.time_dim), cond], dim=1))
        film = film.view(b, len(self.convs), 2, -1, 1, 1)
        feats = []
        for i, (norm, conv) in enumerate(zip(self.norms, self.convs)):
            scale, shift = film[:, i, 0], film[:, i, 1]
            x = x + conv(nn.functional.silu(norm(x) * (1 + scale) + shift))
            feats.append(x)
        out = self.out(nn.functional.silu(self.out_norm(x)))
        return (out, feats) if return_features else out


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class ToyBackend(DenoiserBackend):
    """Wraps a :class:`ToyDenoiser`; pixel space, ``scale_factor = 1``."""

    def __init__(self, model: ToyDenoiser, name: str = "toy"):
        self.model = model.eval()
        self.cond_dim = model.config["cond_dim"]
        self.name = name
        self._text = HashTextEmbedder(self.cond_dim)
        self.refresh_identifier()

    @classmethod
    def random(cls, seed: int = 0, **config) -> "ToyBackend":
        torch.manual_seed(seed)
        model = ToyDenoiser(**config)
        # a fresh network predicts exactly zero; give the head random weights
        # too so an untrained backend is a generic random function
        nn.init.normal_(model.out.weight, std=0.05)
        return cls(model, name=f"toy-random{seed}")

    def refresh_identifier(self) -> None:
        self.identifier = f"{self.name}:{state_digest(self.model)}"

    def embed_text(self, text: str) -> np.ndarray:
        return self._text(text)

    @torch.no_grad()
    def predict_batch(self, noised, t, cond: Conditioning):
        z = torch.from_numpy(np.ascontiguousarray(np.asarray(noised, dtype=np.float32).transpose(0, 3, 1, 2)))
        tt = torch.as_tensor(np.asarray(t, dtype=np.float32))
        emb = torch.as_tensor(np.asarray(cond.embedding, dtype=np.float32))
        out = self.model(z, tt, emb)
        return out.numpy().astype(np.float64).transpose(0, 2, 3, 1)

    def predict(self, noised, t, cond):
        return self.predict_batch(np.asarray(noised)[None], np.array([t]), cond)[0]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"config": self.model.config, "state_dict": self.model.state_dict(),
                    "name": self.name}, path)

    @classmethod
    def load(cls, path) -> "ToyBackend":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        model = ToyDenoiser(**blob["config"])
        model.load_state_dict(blob["state_dict"])
        return cls(model, name=blob.get("name", "toy"))


class DenoiserFeatureEmbedder:
    """Diffusion features: noise the full image at ``t``, run the denoiser
    under the null prompt, and average the block activations over the box.
    """

    def __init__(self, backend: ToyBackend, null_text: str = "", seed: int = 0,
                 sched: Optional[NoiseSchedule] = None):
        self.backend = backend
        self.sched = sched or NoiseSchedule()
        self.dim = backend.model.config["width"] * backend.model.config["n_blocks"]
        self.null_emb = torch.as_tensor(backend.embed_text(null_text), dtype=torch.float32)
        self.seed = seed
        self._cache_key = None
        self._cache_val = None

    @torch.no_grad()
    def _features(self, pixels: np.ndarray, t: float) -> torch.Tensor:
        key = (hashlib.sha1(np.ascontiguousarray(pixels).tobytes()).hexdigest(), t)
        if key == self._cache_key:
            return self._cache_val
        signal, noise = self.sched.coefficients(t)
        gen = torch.Generator().manual_seed(self.seed)
        x = torch.from_numpy(np.asarray(pixels, dtype=np.float32).transpose(2, 0, 1))[None]
        eps = torch.randn(x.shape, generator=gen)
        z = float(signal) * x + float(noise) * eps
        _, feats = self.backend.model(z, torch.tensor([t], dtype=torch.float32), self.null_emb,
                                      return_features=True)
        val = torch.cat(feats, dim=1)[0]
        self._cache_key, self._cache_val = key, val
        return val

    def embed(self, pixels, box, t):
        x0, y0, w, h = box
        f = self._features(pixels, t)
        return f[:, y0:y0 + h, x0:x0 + w].mean(dim=(1, 2)).numpy().astype(np.float64)


def write_backend_card(path, backend: ToyBackend, extra: Optional[dict] = None) -> None:
    card = {"identifier": backend.identifier, "config": backend.model.config}
    card.update(extra or {})
    Path(path).write_text(json.dumps(card, indent=2, sort_keys=True))
