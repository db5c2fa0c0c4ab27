"""Trained model bundle and the compress / decompress pipeline.

A checkpoint is the named-tensor container holding every parameter (encoder,
decoder, density) with the JSON-encoded architecture as metadata. The first
8 bytes of its SHA-256 identify the model inside every bitstream.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import CheckpointError, ParamStore, read_container, write_container
from .entropy import FactorizedDensity, hard_quantize, init_density, pad_latent, truncate
from .network import (DecoderConfig, EncoderConfig, config_to_dict, decode, decoder_config_from_dict,
                      encode, encoder_config_from_dict, init_decoder, init_encoder)
from .pointset import as_points, denormalize, normalize
from .rangecoder import Bitstream, CdfTable, build_cdf, decode_symbols, encode_symbols

FILL_RULES = ("zero", "loc")


class ModelMismatchError(ValueError):
    """Bitstream was produced by a different checkpoint."""


@dataclass
class Model:
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    params: ParamStore
    fill: str = "zero"
    _frozen: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0,
               fill: str = "zero") -> "Model":
        if enc_cfg.latent != dec_cfg.latent:
            raise ValueError(f"encoder latent {enc_cfg.latent} != decoder latent {dec_cfg.latent}")
        if fill not in FILL_RULES:
            raise ValueError(f"unknown fill rule {fill!r}")
        rng = np.random.default_rng(seed)
        params = ParamStore()
        init_encoder(params, enc_cfg, rng)
        init_decoder(params, dec_cfg, rng)
        init_density(params, enc_cfg.latent)
        return cls(enc_cfg, dec_cfg, params, fill)

    @property
    def latent(self) -> int:
        return self.enc_cfg.latent

    # serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = {"encoder": config_to_dict(self.enc_cfg), "decoder": config_to_dict(self.dec_cfg),
                "fill": self.fill}
        return write_container(self.params.arrays(), json.dumps(meta, sort_keys=True).encode())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Model":
        tensors, meta_raw = read_container(raw)
        try:
            meta = json.loads(meta_raw.decode("utf-8"))
            enc_cfg = encoder_config_from_dict(meta["encoder"])
            dec_cfg = decoder_config_from_dict(meta["decoder"])
            fill = meta.get("fill", "zero")
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
        model = cls.create(enc_cfg, dec_cfg, 0, fill)
        try:
            model.params.load_arrays(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(str(exc)) from None
        return model

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "Model":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    # coding state; recomputed whenever the parameters change ---------------

    def _state(self):
        raw = self.to_bytes()
        if self._frozen.get("raw") != raw:
            density = FactorizedDensity.from_params(self.params)
            self._frozen = {"raw": raw, "hash": hashlib.sha256(raw).digest()[:8],
                            "density": density, "table": build_cdf(density)}
        return self._frozen

    @property
    def model_hash(self) -> bytes:
        return self._state()["hash"]

    @property
    def density(self) -> FactorizedDensity:
        return self._state()["density"]

    @property
    def table(self) -> CdfTable:
        return self._state()["table"]


@dataclass(frozen=True)
class Compressed:
    stream: Bitstream
    symbols: np.ndarray        # the kept quantized latent elements

    @property
    def data(self) -> bytes:
        return self.stream.to_bytes()

    @property
    def bpp(self) -> float:
        """Payload bits per input point (fixed header excluded)."""
        return 8 * len(self.stream.payload) / self.stream.n


class LatentCodec:
    """Cached encoder pass for one cloud, so several truncations share it."""

    def __init__(self, model: Model, points):
        self.model = model
        self.points = as_points(points)
        normalized, self.norm = normalize(self.points)
        self.latent = hard_quantize(encode(normalized, model.params, model.enc_cfg)).astype(np.int64)

    def compress(self, keep: int) -> Compressed:
        m = self.model
        if not 0 <= keep <= m.latent:
            raise ValueError(f"keep={keep} must be in [0, {m.latent}]")
        kept = truncate(self.latent, keep) if keep > 0 else self.latent[:0]
        payload = encode_symbols(kept, m.table)
        stream = Bitstream(len(self.points), m.latent, keep, self.norm, m.model_hash, payload)
        return Compressed(stream, kept)

    def keep_for_bpp(self, target: float) -> int:
        """Kept length whose measured payload bpp is closest to ``target``."""
        if target <= 0:
            raise ValueError("bpp target must be positive")
        lo, hi = 1, self.model.latent
        if self.compress(hi).bpp <= target:
            return hi
        while lo < hi:                      # smallest k reaching the target
            mid = (lo + hi) // 2
            if self.compress(mid).bpp >= target:
                hi = mid
            else:
                lo = mid + 1
        if lo > 1 and abs(self.compress(lo - 1).bpp - target) <= abs(self.compress(lo).bpp - target):
            return lo - 1
        return lo


def compress(model: Model, points, keep: int | None = None) -> Compressed:
    return LatentCodec(model, points).compress(model.latent if keep is None else keep)


def decode_latent(model: Model, stream: Bitstream) -> np.ndarray:
    if stream.model_hash != model.model_hash:
        raise ModelMismatchError(
            f"bitstream model hash {stream.model_hash.hex()} != checkpoint {model.model_hash.hex()}")
    if stream.latent != model.latent:
        raise ModelMismatchError(f"bitstream latent {stream.latent} != model latent {model.latent}")
    kept = decode_symbols(stream.payload, stream.keep, model.table)
    return pad_latent(kept, model.latent, model.fill, model.density.loc)


def decompress(model: Model, data: bytes | Bitstream) -> np.ndarray:
    """Reconstructed cloud, in the original coordinates of the compressed input."""
    stream = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    latent = decode_latent(model, stream)
    return denormalize(decode(latent, model.params, model.dec_cfg), stream.norm)


def reconstruct_normalized(model: Model, compressed: Compressed) -> np.ndarray:
    """Decoder output before undoing the normalization."""
    latent = decode_latent(model, compressed.stream)
    return decode(latent, model.params, model.dec_cfg)
