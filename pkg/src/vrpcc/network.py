"""Analysis (encoder) and synthesis (decoder) transforms.

Encoder: a global branch (shared per-point MLP, max pool) and a local branch of
three set-abstraction layers (FPS centers, kNN groups, shared MLP, max pool per
group). Their outputs are concatenated and mapped to a length-``latent`` vector
by fully connected layers. Decoder: two independent fully connected branches,
each emitting half of the output points.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ParamStore, Tape, Tensor
from .geometry import KdIndex, farthest_point_sample, group
from .pointset import as_points


@dataclass(frozen=True)
class EncoderConfig:
    n: int = 2048
    sa_points: tuple[int, int] = (512, 128)
    sa_k: tuple[int, int] = (32, 32)
    # the last width of each MLP is the layer's output feature size (f1, f2, f3)
    sa_mlps: tuple[tuple[int, ...], ...] = ((128, 256), (256, 512), (512, 512))
    global_mlp: tuple[int, ...] = (64, 128, 512)
    head_hidden: tuple[int, ...] = (512,)
    latent: int = 1024
    fps_seed: int = 0

    def __post_init__(self):
        n1, n2 = self.sa_points
        if not self.n >= n1 >= n2 >= 1:
            raise ValueError(f"need n >= n1 >= n2 >= 1, got {self.n}, {n1}, {n2}")
        if self.latent < 1:
            raise ValueError("latent length must be positive")
        if len(self.sa_mlps) != 3 or any(len(m) == 0 for m in self.sa_mlps):
            raise ValueError("sa_mlps needs three non-empty width lists")
        if self.sa_k[0] > self.n or self.sa_k[1] > n1:
            raise ValueError(f"neighbourhood sizes {self.sa_k} exceed the sampled point counts")

    @property
    def feature_widths(self) -> tuple[int, int, int, int]:
        """(f1, f2, f3, f')"""
        return (self.sa_mlps[0][-1], self.sa_mlps[1][-1], self.sa_mlps[2][-1], self.global_mlp[-1])


@dataclass(frozen=True)
class DecoderConfig:
    latent: int = 1024
    hidden: tuple[int, ...] = (512, 512, 1024)
    n_points: int = 2048
    branches: int = 2

    def __post_init__(self):
        if self.n_points % self.branches:
            raise ValueError(f"n_points={self.n_points} must split evenly over {self.branches} branches")

    @property
    def points_per_branch(self) -> int:
        return self.n_points // self.branches


def full_configs() -> tuple[EncoderConfig, DecoderConfig]:
    return EncoderConfig(), DecoderConfig()


def toy_configs(n: int = 256, latent: int = 64, n1: int | None = None, n2: int | None = None,
                width: int = 128, k: int = 16) -> tuple[EncoderConfig, DecoderConfig]:
    """Proportionally shrunk architecture for CPU-scale experiments."""
    n1 = n1 or max(1, n // 4)
    n2 = n2 or max(1, n1 // 4)
    w = width
    enc = EncoderConfig(
        n=n, sa_points=(n1, n2), sa_k=(min(k, n), min(k, n1)),
        sa_mlps=((w // 4, w // 2), (w // 2, w), (w, w)),
        global_mlp=(w // 4, w // 2, w), head_hidden=(w,), latent=latent)
    dec = DecoderConfig(latent=latent, hidden=(w, w, 2 * w), n_points=n)
    return enc, dec


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["sa_points"] = tuple(d["sa_points"])
    d["sa_k"] = tuple(d["sa_k"])
    d["sa_mlps"] = tuple(tuple(m) for m in d["sa_mlps"])
    d["global_mlp"] = tuple(d["global_mlp"])
    d["head_hidden"] = tuple(d["head_hidden"])
    return EncoderConfig(**d)


def decoder_config_from_dict(d: dict) -> DecoderConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    return DecoderConfig(**d)


# --------------------------------------------------------------------------- #
# parameters

def _add_mlp(params: ParamStore, prefix: str, fan_in: int, widths, rng) -> None:
    for i, w in enumerate(widths):
        params.add_linear(f"{prefix}.{i}", fan_in, w, rng)
        fan_in = w


def init_encoder(params: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    f1, f2, f3, fg = cfg.feature_widths
    _add_mlp(params, "enc.global", 3, cfg.global_mlp, rng)
    _add_mlp(params, "enc.sa1", 3, cfg.sa_mlps[0], rng)
    _add_mlp(params, "enc.sa2", 3 + f1, cfg.sa_mlps[1], rng)
    _add_mlp(params, "enc.sa3", 3 + f2, cfg.sa_mlps[2], rng)
    _add_mlp(params, "enc.head", f3 + fg, tuple(cfg.head_hidden) + (cfg.latent,), rng)


def init_decoder(params: ParamStore, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    for b in range(cfg.branches):
        _add_mlp(params, f"dec.branch{b}", cfg.latent,
                 tuple(cfg.hidden) + (3 * cfg.points_per_branch,), rng)


def _mlp(tape: Tape, params: ParamStore, prefix: str, x, depth: int, final_relu: bool = True):
    for i in range(depth):
        x = tape.linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if final_relu or i < depth - 1:
            x = tape.relu(x)
    return x


# --------------------------------------------------------------------------- #
# encoder

@dataclass
class EncoderGeometry:
    """Parameter-independent sampling and grouping of a batch of clouds."""
    points: np.ndarray    # (B, n, 3)
    sa1_rel: np.ndarray   # (B, n1, k1, 3)
    sa2_idx: np.ndarray   # (B, n2, k2) indices into the n1 level-1 centers
    sa2_rel: np.ndarray   # (B, n2, k2, 3)
    sa3_xyz: np.ndarray   # (B, n2, 3)

    @classmethod
    def stack(cls, items: list["EncoderGeometry"]) -> "EncoderGeometry":
        return cls(*(np.concatenate([getattr(g, f) for g in items]) for f in
                     ("points", "sa1_rel", "sa2_idx", "sa2_rel", "sa3_xyz")))


def prepare_geometry(points, cfg: EncoderConfig) -> EncoderGeometry:
    pts = as_points(points)
    if len(pts) < cfg.sa_points[0]:
        raise ValueError(f"cloud has {len(pts)} points, encoder samples {cfg.sa_points[0]}")
    n1, n2 = cfg.sa_points
    k1, k2 = cfg.sa_k
    c1_idx = farthest_point_sample(pts, n1, cfg.fps_seed)
    g1 = group(pts, c1_idx, min(k1, len(pts)), KdIndex(pts))
    c1 = g1.centers
    c2_idx = farthest_point_sample(c1, n2, cfg.fps_seed)
    g2 = group(c1, c2_idx, k2, KdIndex(c1))
    return EncoderGeometry(pts[None], g1.relative_coords[None], g2.neighbor_idx[None],
                           g2.relative_coords[None], g2.centers[None])


def encoder_forward(tape: Tape, params: ParamStore, cfg: EncoderConfig, geom: EncoderGeometry,
                    return_branches: bool = False):
    """Latent ``(B, latent)`` for a batch of prepared clouds."""
    gdepth = len(cfg.global_mlp)
    glob = tape.max_pool(_mlp(tape, params, "enc.global", geom.points, gdepth), axis=1)

    h1 = _mlp(tape, params, "enc.sa1", geom.sa1_rel, len(cfg.sa_mlps[0]))
    h1 = tape.max_pool(h1, axis=2)                                   # (B, n1, f1)
    carried = tape.gather_rows(h1, geom.sa2_idx, batched=True)       # (B, n2, k2, f1)
    h2 = tape.concat([geom.sa2_rel, carried], axis=-1)
    h2 = tape.max_pool(_mlp(tape, params, "enc.sa2", h2, len(cfg.sa_mlps[1])), axis=2)
    h3 = tape.concat([geom.sa3_xyz, h2], axis=-1)                   # single group of all n2
    local = tape.max_pool(_mlp(tape, params, "enc.sa3", h3, len(cfg.sa_mlps[2])), axis=1)

    feat = tape.concat([local, glob], axis=-1)
    y = _mlp(tape, params, "enc.head", feat, len(cfg.head_hidden) + 1, final_relu=False)
    if return_branches:
        return y, local, glob
    return y


def decoder_forward(tape: Tape, params: ParamStore, cfg: DecoderConfig, latent) -> Tensor:
    """Point cloud ``(B, n_points, 3)`` from latents ``(B, latent)``."""
    if latent.shape[-1] != cfg.latent:
        raise ValueError(f"decode: latent length {latent.shape[-1]} != {cfg.latent}")
    depth = len(cfg.hidden) + 1
    parts = []
    for b in range(cfg.branches):
        out = _mlp(tape, params, f"dec.branch{b}", latent, depth, final_relu=False)
        parts.append(tape.reshape(out, (latent.shape[0], cfg.points_per_branch, 3)))
    return tape.concat(parts, axis=1)


def encode(points, params: ParamStore, cfg: EncoderConfig) -> np.ndarray:
    """Latent vector of one cloud."""
    return encoder_forward(Tape(), params, cfg, prepare_geometry(points, cfg)).data[0]


def decode(latent, params: ParamStore, cfg: DecoderConfig) -> np.ndarray:
    y = np.asarray(latent, dtype=np.float64).reshape(1, -1)
    return decoder_forward(Tape(), params, cfg, Tensor(y)).data[0]


def global_feature(points, params: ParamStore, cfg: EncoderConfig) -> np.ndarray:
    pts = as_points(points)
    tape = Tape()
    h = _mlp(tape, params, "enc.global", pts[None], len(cfg.global_mlp))
    return tape.max_pool(h, axis=1).data[0]

