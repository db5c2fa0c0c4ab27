"""Factorized logistic entropy model, quantization, rate terms and truncation.

Rates are accumulated in nats for optimisation and reported in bits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, Tensor, sigmoid, softplus

LIKELIHOOD_BOUND = 2.0**-32
SCALE_FLOOR = 1e-6
NATS_TO_BITS = 1.0 / np.log(2.0)


def _inverse_softplus(x: float) -> float:
    return float(x + np.log(-np.expm1(-x)))


# --------------------------------------------------------------------------- #
# density

def init_density(params: ParamStore, latent: int, init_scale: float = 1.0) -> None:
    params.add("density.loc", np.zeros(latent))
    params.add("density.raw_scale", np.full(latent, _inverse_softplus(init_scale - SCALE_FLOOR)))


@dataclass(frozen=True)
class FactorizedDensity:
    """Per-element logistic densities; ``scale`` is always positive."""
    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_params(cls, params: ParamStore) -> "FactorizedDensity":
        raw = params["density.raw_scale"].data
        return cls(params["density.loc"].data.copy(), softplus(raw) + SCALE_FLOOR)

    @property
    def latent(self) -> int:
        return len(self.loc)

    def cdf(self, x, rows=None) -> np.ndarray:
        loc, scale = self._rows(rows)
        return sigmoid((np.asarray(x, dtype=np.float64) - loc) / scale)

    def interval_mass(self, lo, hi, rows=None) -> np.ndarray:
        """Probability of ``[lo, hi)``, computed on the tail nearer the interval."""
        loc, scale = self._rows(rows)
        a = (np.asarray(lo, dtype=np.float64) - loc) / scale
        b = (np.asarray(hi, dtype=np.float64) - loc) / scale
        upper = a + b > 0
        return np.where(upper, sigmoid(-a) - sigmoid(-b), sigmoid(b) - sigmoid(a))

    def _rows(self, rows):
        if rows is None:
            return self.loc, self.scale
        return self.loc[rows], self.scale[rows]


def likelihood(model: FactorizedDensity, values) -> np.ndarray:
    """P_i(v) = CDF_i(v + 1/2) - CDF_i(v - 1/2), bounded below by 2**-32.

    ``values`` is ``(..., latent)``; works for hard (integer) and noisy latents.
    """
    v = np.asarray(values, dtype=np.float64)
    return np.maximum(model.interval_mass(v - 0.5, v + 0.5), LIKELIHOOD_BOUND)


def likelihood_tensor(tape: Tape, params: ParamStore, values: Tensor) -> Tensor:
    """Differentiable likelihood of ``values`` (B, latent) w.r.t. values and density."""
    scale = tape.add(tape.softplus(params["density.raw_scale"]), SCALE_FLOOR)
    prob = interval_prob(tape, values, params["density.loc"], scale)
    return tape.clamp_min(prob, LIKELIHOOD_BOUND)


def interval_prob(tape: Tape, values, loc, scale) -> Tensor:
    """Logistic mass of the unit interval centred on each value."""
    v, mu, s = values.data, loc.data, scale.data
    u = (v - mu + 0.5) / s
    w = (v - mu - 0.5) / s
    su, sw = sigmoid(u), sigmoid(w)
    p = np.where(u + w > 0, sigmoid(-w) - sigmoid(-u), su - sw)
    du = su * sigmoid(-u)
    dw = sw * sigmoid(-w)

    def backward(g):
        gv = g * (du - dw) / s
        gs = -g * (du * u - dw * w) / s
        return gv, -gv.reshape(-1, len(mu)).sum(axis=0), gs.reshape(-1, len(mu)).sum(axis=0)

    return tape.record(p, (values, loc, scale), backward)


# --------------------------------------------------------------------------- #
# quantization

def noisy_quantize(y, seed_or_rng) -> np.ndarray:
    """Additive U(-1/2, 1/2) noise; use :func:`noisy_quantize_tensor` on a tape."""
    rng = np.random.default_rng(seed_or_rng)
    y = np.asarray(y, dtype=np.float64)
    return y + rng.uniform(-0.5, 0.5, y.shape)


def noisy_quantize_tensor(tape: Tape, y: Tensor, rng: np.random.Generator) -> Tensor:
    return tape.add(y, rng.uniform(-0.5, 0.5, y.shape))


def hard_quantize(y) -> np.ndarray:
    """Round half away from zero."""
    y = np.asarray(y, dtype=np.float64)
    t = np.trunc(y)
    return t + np.where(np.abs(y - t) >= 0.5, np.sign(y), 0.0)


# --------------------------------------------------------------------------- #
# rate

@dataclass(frozen=True)
class WeightSchedule:
    """Exponentially decaying per-element weights a * exp(-b * i)."""
    a: float
    b: float
    latent: int

    def __post_init__(self):
        if self.a <= 0 or self.b < 0 or self.latent < 1:
            raise ValueError(f"invalid weight schedule a={self.a}, b={self.b}, latent={self.latent}")

    @property
    def weights(self) -> np.ndarray:
        return self.a * np.exp(-self.b * np.arange(self.latent))


@dataclass(frozen=True)
class RateReport:
    bits: np.ndarray        # per element, (..., latent)
    n_points: int

    @property
    def total_bits(self) -> float:
        return float(self.bits.sum())

    @property
    def bpp(self) -> float:
        return self.total_bits / self.n_points


def rate_report(probs, n_points: int) -> RateReport:
    return RateReport(-np.log2(np.asarray(probs, dtype=np.float64)), n_points)


def rate(probs) -> float:
    """Mean over the batch of the summed -ln P; ``probs`` is (batch, latent)."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return float(np.mean((-np.log(p)).sum(axis=-1)))


def weighted_rate(probs, schedule: WeightSchedule) -> float:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.shape[-1] != schedule.latent:
        raise ValueError(f"weighted_rate: {p.shape[-1]} elements, schedule has {schedule.latent}")
    return float(np.mean((-schedule.weights * np.log(p)).sum(axis=-1)))


def rate_tensor(tape: Tape, probs: Tensor, weights=None) -> Tensor:
    """Batch mean of sum_i -w_i ln P_i on the tape (unweighted when ``weights`` is None)."""
    nll = tape.scale(tape.log(probs), -1.0)
    if weights is not None:
        nll = tape.mul(nll, np.asarray(weights, dtype=np.float64))
    return tape.reduce_mean(tape.reduce_sum(nll, axis=-1))


# --------------------------------------------------------------------------- #
# truncation

def truncate(yhat, keep: int) -> np.ndarray:
    yhat = np.asarray(yhat)
    if not 1 <= keep <= yhat.shape[-1]:
        raise ValueError(f"truncate: keep={keep} must be in [1, {yhat.shape[-1]}]")
    return yhat[..., :keep]


def pad_latent(kept, latent: int, fill: str = "zero", loc=None) -> np.ndarray:
    """Restore a full-length latent; dropped tail is zero or the density location."""
    kept = np.asarray(kept, dtype=np.float64)
    k = kept.shape[-1]
    if k > latent:
        raise ValueError(f"pad_latent: {k} kept elements exceed latent length {latent}")
    out = np.zeros(kept.shape[:-1] + (latent,))
    if fill == "loc":
        if loc is None:
            raise ValueError("pad_latent: fill='loc' needs the density location")
        out[..., k:] = np.asarray(loc)[k:]
    elif fill != "zero":
        raise ValueError(f"unknown fill rule {fill!r}")
    out[..., :k] = kept
    return out
