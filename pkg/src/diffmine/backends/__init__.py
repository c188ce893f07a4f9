"""Denoiser backends and a string resolver for manifests and the CLI.

Backend specs:

    toy-random:<seed>     untrained toy denoiser with seeded weights
    toy:<checkpoint.pt>   toy denoiser loaded from a checkpoint
    remote:<base-url>     out-of-process server (see ``remote``)
    blind                 conditioning-blind analytic backend
"""
from __future__ import annotations

from ..core import DenoiserBackend
from .analytic import BlindBackend, OffsetBackend, PooledLatentBackend


def load_backend(spec: str, **toy_config) -> DenoiserBackend:
    kind, _, arg = spec.partition(":")
    if kind == "toy-random":
        from .toy import ToyBackend
        return ToyBackend.random(int(arg or 0), **toy_config)
    if kind == "toy":
        from .toy import ToyBackend
        return ToyBackend.load(arg)
    if kind == "remote":
        from .remote import RemoteBackend
        return RemoteBackend(arg)
    if kind == "blind":
        return BlindBackend()
    raise ValueError(f"unknown backend spec {spec!r}")


def feature_embedder(backend: DenoiserBackend, null_text: str, seed: int, patch_size, channels: int):
    """Diffusion features when the backend exposes activations, else raw crops."""
    from ..clustering import FlattenEmbedder
    try:
        from .toy import DenoiserFeatureEmbedder, ToyBackend
    except ImportError:  # pragma: no cover - torch missing
        return FlattenEmbedder(patch_size, channels)
    if isinstance(backend, ToyBackend):
        return DenoiserFeatureEmbedder(backend, null_text=null_text, seed=seed)
    return FlattenEmbedder(patch_size, channels)


__all__ = ["BlindBackend", "OffsetBackend", "PooledLatentBackend", "load_backend", "feature_embedder"]
