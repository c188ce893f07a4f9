"""Out-of-process denoiser contract: a FastAPI server and an httpx client.

Tensors travel as ``{"shape": [...], "data": <base64 little-endian float32>}``.

    GET  /info     -> {"identifier", "cond_dim", "scale_factor", "concurrent_safe"}
    POST /predict  {"noised": Tensor (n,h,w,d), "t": [n floats], "prompt": str} -> {"noise": Tensor}
    POST /encode   {"pixels": Tensor (h,w,c)} -> {"latent": Tensor}
    POST /decode   {"latent": Tensor (h,w,d)} -> {"pixels": Tensor}

A production server (e.g. a finetuned latent diffusion model) only has to
honour these routes; prompt text is embedded server-side.
"""
from __future__ import annotations

import base64
from typing import List, Optional

import httpx
import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from ..core import Conditioning, DenoiserBackend


class Tensor(BaseModel):
    shape: List[int]
    data: str = Field(description="base64 of little-endian float32, C order")

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        a = np.ascontiguousarray(arr, dtype="<f4")
        return cls(shape=list(a.shape), data=base64.b64encode(a.tobytes()).decode("ascii"))

    def to_array(self) -> np.ndarray:
        raw = base64.b64decode(self.data)
        count = int(np.prod(self.shape)) if self.shape else 1
        if len(raw) != 4 * count:
            raise ValueError(f"payload has {len(raw)} bytes, shape {self.shape} needs {4 * count}")
        return np.frombuffer(raw, dtype="<f4").reshape(self.shape).astype(np.float64)


class BackendInfo(BaseModel):
    identifier: str
    cond_dim: int
    scale_factor: int
    concurrent_safe: bool = False


class PredictRequest(BaseModel):
    noised: Tensor
    t: List[float]
    prompt: str


class PredictResponse(BaseModel):
    noise: Tensor


class EncodeRequest(BaseModel):
    pixels: Tensor


class EncodeResponse(BaseModel):
    latent: Tensor


class DecodeRequest(BaseModel):
    latent: Tensor


class DecodeResponse(BaseModel):
    pixels: Tensor


def create_app(backend: DenoiserBackend) -> FastAPI:
    app = FastAPI(title="denoiser backend")

    @app.get("/info", response_model=BackendInfo)
    def info():
        return BackendInfo(identifier=backend.identifier, cond_dim=backend.cond_dim,
                           scale_factor=backend.scale_factor, concurrent_safe=backend.concurrent_safe)

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        try:
            noised = req.noised.to_array()
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if noised.ndim != 4 or len(req.t) != noised.shape[0]:
            raise HTTPException(status_code=422, detail="noised must be (n,h,w,d) with one t per item")
        if any(not 0.0 <= t <= 1.0 for t in req.t):
            raise HTTPException(status_code=422, detail="t must lie in [0, 1]")
        cond = Conditioning(req.prompt, backend.embed_text(req.prompt))
        out = backend.predict_batch(noised, np.asarray(req.t), cond)
        return PredictResponse(noise=Tensor.from_array(out))

    @app.post("/encode", response_model=EncodeResponse)
    def encode(req: EncodeRequest):
        return EncodeResponse(latent=Tensor.from_array(backend.encode(req.pixels.to_array())))

    @app.post("/decode", response_model=DecodeResponse)
    def decode(req: DecodeRequest):
        return DecodeResponse(pixels=Tensor.from_array(backend.decode(req.latent.to_array())))

    return app


class RemoteBackend(DenoiserBackend):
    """Client side of the contract; pass a base URL or a ready ``httpx.Client``."""

    def __init__(self, url: Optional[str] = None, client: Optional[httpx.Client] = None,
                 timeout: float = 120.0):
        if client is None:
            if url is None:
                raise ValueError("need a URL or an httpx client")
            client = httpx.Client(base_url=url, timeout=timeout)
        self.client = client
        resp = self.client.get("/info")
        resp.raise_for_status()
        info = BackendInfo.model_validate(resp.json())
        self.identifier = f"remote:{info.identifier}"
        self.cond_dim = info.cond_dim
        self.scale_factor = info.scale_factor
        self.concurrent_safe = info.concurrent_safe

    def _post(self, route: str, body: BaseModel) -> dict:
        resp = self.client.post(route, json=body.model_dump())
        if resp.status_code != 200:
            raise RuntimeError(f"{route} failed with {resp.status_code}: {resp.text}")
        return resp.json()

    def predict_batch(self, noised, t, cond):
        body = PredictRequest(noised=Tensor.from_array(noised), t=[float(v) for v in np.atleast_1d(t)],
                              prompt=cond.text)
        return PredictResponse.model_validate(self._post("/predict", body)).noise.to_array()

    def predict(self, noised, t, cond):
        return self.predict_batch(np.asarray(noised)[None], np.array([t]), cond)[0]

    def encode(self, pixels):
        out = self._post("/encode", EncodeRequest(pixels=Tensor.from_array(pixels)))
        return EncodeResponse.model_validate(out).latent.to_array()

    def decode(self, latent):
        out = self._post("/decode", DecodeRequest(latent=Tensor.from_array(latent)))
        return DecodeResponse.model_validate(out).pixels.to_array()

    def embed_text(self, text):
        # embedding happens server-side; a placeholder of the declared width
        return np.zeros(self.cond_dim)
