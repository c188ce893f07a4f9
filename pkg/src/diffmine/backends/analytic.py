"""Closed-form denoisers used as test oracles.

The offset backends know the clean latent they will be asked about, recover
the true noise from the noised input and return it with a known error, so
every loss and typicality value has a closed form.
"""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from ..core import Conditioning, DenoiserBackend, NoiseSchedule


class BlindBackend(DenoiserBackend):
    """Ignores the conditioning entirely."""

    identifier = "analytic:blind"
    concurrent_safe = True

    def __init__(self, cond_dim: int = 16, gain: float = 0.5):
        self.cond_dim = cond_dim
        self.gain = gain

    def predict(self, noised, t, cond):
        return self.gain * np.tanh(noised) + 0.1 * t

    def predict_batch(self, noised, t, cond):
        return self.gain * np.tanh(noised) + 0.1 * np.asarray(t)[:, None, None, None]


class OffsetBackend(DenoiserBackend):
    """``predict = eps + offset[cond.text] * scale(t) + noise_scale * t * eps``.

    ``clean`` is the latent being scored; ``eps`` is recovered from the noised
    input through the schedule. ``t_scaled`` multiplies the offset by ``t``.
    The ``noise_scale`` term is identical for every conditioning and varies
    with the draw, which is what separates paired from unpaired sampling.
    """

    identifier = "analytic:offset"
    concurrent_safe = True

    def __init__(self, clean: np.ndarray, sched: NoiseSchedule, offsets: Mapping[str, float],
                 *, cond_dim: int = 16, t_scaled: bool = False, noise_scale: float = 0.0,
                 default_offset: Optional[float] = None):
        self.clean = np.asarray(clean, dtype=np.float64)
        self.sched = sched
        self.offsets = {k: np.asarray(v, dtype=np.float64) for k, v in offsets.items()}
        self.cond_dim = cond_dim
        self.t_scaled = t_scaled
        self.noise_scale = noise_scale
        self.default_offset = default_offset

    def _offset(self, cond: Conditioning):
        if cond.text in self.offsets:
            return self.offsets[cond.text]
        if self.default_offset is None:
            raise KeyError(f"no offset configured for prompt {cond.text!r}")
        return np.asarray(self.default_offset, dtype=np.float64)

    def predict(self, noised, t, cond):
        return self.predict_batch(np.asarray(noised)[None], np.array([t]), cond)[0]

    def predict_batch(self, noised, t, cond):
        t = np.asarray(t, dtype=np.float64)
        signal, noise = self.sched.coefficients(t)
        shape = (-1, 1, 1, 1)
        eps = (noised - signal.reshape(shape) * self.clean) / noise.reshape(shape)
        delta = self._offset(cond)
        scale = t.reshape(shape) if self.t_scaled else 1.0
        return eps + delta * scale + self.noise_scale * t.reshape(shape) * eps


class PooledLatentBackend(DenoiserBackend):
    """Runs a pixel-space backend in a ``factor``-times average-pooled latent.

    ``encode`` average-pools, ``decode`` repeats each latent cell; a cheap
    analogue of an autoencoder latent with ``scale_factor > 1``.
    """

    def __init__(self, inner: DenoiserBackend, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.inner = inner
        self.scale_factor = factor
        self.cond_dim = inner.cond_dim
        self.concurrent_safe = inner.concurrent_safe
        self.identifier = f"pooled{factor}:{inner.identifier}"

    def predict(self, noised, t, cond):
        return self.inner.predict(noised, t, cond)

    def predict_batch(self, noised, t, cond):
        return self.inner.predict_batch(noised, t, cond)

    def encode(self, pixels):
        px = np.asarray(pixels, dtype=np.float64)
        f = self.scale_factor
        h, w, c = px.shape
        if h % f or w % f:
            raise ValueError(f"image {px.shape} not divisible by scale factor {f}")
        return px.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def decode(self, latent):
        f = self.scale_factor
        return np.repeat(np.repeat(np.asarray(latent, dtype=np.float64), f, axis=0), f, axis=1)

    def embed_text(self, text):
        return self.inner.embed_text(text)
