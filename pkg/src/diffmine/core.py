"""Diffusion-process math, conditioning and the denoiser backend contract.

Latent images are plain ``numpy`` arrays shaped ``(h, w, d)``; batches add a
leading axis. All estimation math runs in float64.
"""
from __future__ import annotations

import hashlib
import math
import string
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

SPLITS = ("train", "mine", "eval")


class BackendError(RuntimeError):
    """A denoiser backend failed; carries the context it failed in."""

    def __init__(self, message: str, *, image_id: Optional[str] = None,
                 t: Optional[float] = None, sample_index: Optional[int] = None):
        self.image_id = image_id
        self.t = t
        self.sample_index = sample_index
        ctx = []
        if image_id is not None:
            ctx.append(f"image={image_id}")
        if t is not None:
            ctx.append(f"t={t:.6g}")
        if sample_index is not None:
            ctx.append(f"sample={sample_index}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    label: str
    split: str = "train"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"{self.id}: pixels must be HxWxC with C in (1, 3), got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"{self.id}: image smaller than 8x8: {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: unknown split {self.split!r}")
        self.pixels = px

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


def _placeholder_count(template: str) -> int:
    return sum(1 for _, name, _, _ in string.Formatter().parse(template) if name is not None)


@dataclass(frozen=True)
class LabelSet:
    labels: tuple
    domain_template: str
    null_template: str = ""

    def __post_init__(self):
        labels = tuple(str(label) for label in self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ValueError("label set is empty")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels in {labels}")
        if _placeholder_count(self.domain_template) != 1:
            raise ValueError(f"domain template needs exactly one placeholder: {self.domain_template!r}")
        if _placeholder_count(self.null_template) != 0:
            raise ValueError(f"null template must not contain placeholders: {self.null_template!r}")

    def __contains__(self, label) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "domain_template": self.domain_template,
                "null_template": self.null_template}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSet":
        return cls(tuple(d["labels"]), d["domain_template"], d.get("null_template", ""))

    @classmethod
    def from_preset(cls, name: str, labels: Sequence[str]) -> "LabelSet":
        domain, null = TEMPLATE_PRESETS[name]
        return cls(tuple(labels), domain, null)


# (domain template, null template)
TEMPLATE_PRESETS = {
    "cars": ("A car from the {}s.", "A car."),
    "faces": ("A portrait from the {}s.", "A portrait."),
    "geo": ("A Google streetview image of {}.", "A Google streetview image."),
    "places": ("An image of {}.", ""),
    "medical": ("{}", ""),
    "toy": ("An image with a {}.", "An image."),
}


def render_prompt(labels: LabelSet, label: Optional[str] = None) -> str:
    if label is None:
        return labels.null_template
    if label not in labels:
        raise ValueError(f"unknown label {label!r}; expected one of {list(labels.labels)}")
    return labels.domain_template.format(label)


class HashTextEmbedder:
    """Deterministic stand-in for a text encoder: prompt text -> unit vector.

    Each prompt is mapped through a SHA-256 seeded normal draw, so distinct
    prompts get (almost surely) distinct embeddings of fixed dimension.
    """

    def __init__(self, dim: int = 16):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Conditioning:
    text: str
    embedding: np.ndarray = field(repr=False)
    is_null: bool = False


def make_conditioning(labels: LabelSet, label: Optional[str], embed: Callable[[str], np.ndarray],
                      cond_dim: Optional[int] = None) -> Conditioning:
    text = render_prompt(labels, label)
    emb = np.asarray(embed(text), dtype=np.float64)
    if cond_dim is not None and emb.shape != (cond_dim,):
        raise ValueError(f"embedding dim {emb.shape} != backend cond_dim {cond_dim}")
    return Conditioning(text, emb, is_null=text == labels.null_template)


def _scaled_linear_log_alpha_bar(beta_start: float, beta_end: float, steps: int) -> np.ndarray:
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), steps) ** 2
    return np.concatenate([[0.0], np.cumsum(np.log1p(-betas))])


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous-time cumulative signal coefficient ``alpha_bar(t)``.

    ``kind="scaled_linear"`` follows the discrete Stable-Diffusion beta schedule
    (1000 steps), with ``log alpha_bar`` linearly interpolated between steps
    and pinned to 0 at ``t=0``. ``kind="linear"`` is ``1 - t`` and
    ``kind="cosine"`` the usual squared-cosine schedule.
    """

    form: str = "standard_variance_preserving"
    kind: str = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012
    num_steps: int = 1000

    def __post_init__(self):
        if self.form not in ("paper_literal", "standard_variance_preserving"):
            raise ValueError(f"unknown schedule form {self.form!r}")
        if self.kind not in ("scaled_linear", "linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            out = 1.0 - t
        elif self.kind == "cosine":
            s = 0.008
            f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
            out = np.clip(f / math.cos(s / (1 + s) * math.pi / 2) ** 2, 0.0, 1.0)
        else:
            log_ab = _scaled_linear_log_alpha_bar(self.beta_start, self.beta_end, self.num_steps)
            grid = np.linspace(0.0, 1.0, self.num_steps + 1)
            out = np.exp(np.interp(t, grid, log_ab))
        return float(out) if out.ndim == 0 else out

    def coefficients(self, t):
        """(signal, noise) mixing coefficients at ``t``."""
        ab = np.asarray(self.alpha_bar(t), dtype=np.float64)
        signal = np.sqrt(ab)
        noise = 1.0 - signal if self.form == "paper_literal" else np.sqrt(1.0 - ab)
        return signal, noise

    def to_dict(self) -> dict:
        return {"form": self.form, "kind": self.kind, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "num_steps": self.num_steps}


def _check_t(t) -> None:
    t = np.asarray(t)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"t must lie in [0, 1], got {t}")


def forward_noise(x: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Noise ``x`` with ``eps`` at time ``t``.

    ``t`` may be a scalar or, for batched input ``(n, h, w, d)``, a length-n
    vector.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    _check_t(t)
    signal, noise = sched.coefficients(t)
    if signal.ndim == 1:
        signal = signal.reshape((-1,) + (1,) * (x.ndim - 1))
        noise = noise.reshape((-1,) + (1,) * (x.ndim - 1))
    return signal * x + noise * eps


class DenoiserBackend:
    """Noise predictor ``eps_theta(z, t, c)`` plus its pixel<->latent codec.

    Subclasses implement :meth:`predict`; :meth:`predict_batch` loops over it
    unless overridden. The default codec is the identity (pixel space).
    """

    cond_dim: int = 0
    scale_factor: int = 1
    concurrent_safe: bool = False
    identifier: str = "backend"

    def predict(self, noised: np.ndarray, t: float, cond: Conditioning) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, noised: np.ndarray, t: np.ndarray, cond: Conditioning) -> np.ndarray:
        return np.stack([self.predict(z, float(ti), cond) for z, ti in zip(noised, t)])

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return np.asarray(pixels, dtype=np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        return HashTextEmbedder(self.cond_dim)(text)

    def conditioning(self, labels: LabelSet, label: Optional[str]) -> Conditioning:
        return make_conditioning(labels, label, self.embed_text, self.cond_dim)


def loss_map(x: np.ndarray, eps: np.ndarray, t, cond: Conditioning, backend: DenoiserBackend,
             sched: NoiseSchedule, *, image_id: Optional[str] = None) -> np.ndarray:
    """Per-location squared noise-prediction error, summed over channels.

    Accepts a single latent ``(h, w, d)`` or a batch ``(n, h, w, d)`` with a
    vector of times.
    """
    noised = forward_noise(x, eps, t, sched)
    batched = noised.ndim == 4
    try:
        if batched:
            pred = backend.predict_batch(noised, np.asarray(t, dtype=np.float64), cond)
        else:
            pred = backend.predict(noised, float(t), cond)
    except Exception as exc:
        raise BackendError(f"denoiser failed: {exc}", image_id=image_id,
                           t=None if batched else float(t)) from exc
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != noised.shape:
        raise BackendError(f"prediction shape {pred.shape} != input shape {noised.shape}",
                           image_id=image_id)
    return np.sum((pred - np.asarray(eps, dtype=np.float64)) ** 2, axis=-1)


def stable_hash(*parts) -> int:
    """64-bit hash of string-able parts, stable across processes."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")
