"""End-to-end rate-distortion training and rate-distortion evaluation.

Objective per batch: ``L = D + lambda * R_w`` where ``D`` is Chamfer (or EMD)
between input and reconstruction and ``R_w`` the weighted rate of the noisy
latent, in nats. Training config files use a ``key = value`` format; see
:data:`CONFIG_DOC`.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape
from .codec import LatentCodec, Model, decompress
from .entropy import NATS_TO_BITS, WeightSchedule, likelihood_tensor, noisy_quantize_tensor, rate_tensor
from .geometry import estimate_normals
from .metrics import MetricReport, chamfer_tensor, compare, emd_tensor
from .network import (EncoderGeometry, decoder_forward, encoder_forward, full_configs,
                      prepare_geometry, toy_configs)
from .octree import bits_per_point, octree_decode, octree_encode
from .pointset import denormalize, normalize

CONFIG_DOC = """\
lambda            rate weight (>= 0), default 1e-3
distortion        cd | emd
a, b              weight schedule a * exp(-b * i)
lr, beta1, beta2  Adam settings
batch             clouds per step
epochs            passes over the dataset (ignored when steps > 0)
steps             optimizer steps; 0 means derive from epochs
seed              initialisation, batching and noise seed
scale             toy | full (architecture preset)
n, latent, width, k, n1, n2   toy architecture overrides (0 = derived)
clip_norm         global gradient-norm clip, or none
deterministic     true | false; single BLAS thread when true
fill              zero | loc (decoder fill for truncated elements)
checkpoint_every  steps between checkpoint callbacks, 0 = never
"""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-3
    distortion: str = "cd"
    a: float = 15.0
    b: float = 0.048
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 16
    epochs: int = 300
    steps: int = 0
    seed: int = 0
    scale: str = "toy"
    n: int = 256
    latent: int = 64
    width: int = 128
    k: int = 16
    n1: int = 0
    n2: int = 0
    clip_norm: float | None = None
    deterministic: bool = True
    fill: str = "zero"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1 or self.steps < 0 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1, steps >= 0")
        if self.distortion not in ("cd", "emd"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if self.scale not in ("toy", "full"):
            raise ValueError(f"unknown scale {self.scale!r}")

    def architecture(self):
        if self.scale == "full":
            return full_configs()
        return toy_configs(self.n, self.latent, self.n1 or None, self.n2 or None, self.width, self.k)

    def schedule(self) -> WeightSchedule:
        return WeightSchedule(self.a, self.b, self.architecture()[0].latent)

    # key = value text format ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            name = "lam" if key == "lambda" else key
            if name not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[name] = _convert(kinds[name], raw, lineno)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path: str, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def _convert(kind: str, raw: str, lineno: int):
    low = raw.lower()
    try:
        if kind == "bool":
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if low == "none" else float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config line {lineno}: cannot parse {raw!r} as {kind}") from None


@dataclass
class TrainLog:
    """Per-step record. ``weighted_rate`` is in nats, the unit used inside the loss."""
    lam: float
    rows: list = field(default_factory=list)

    COLUMNS = ("step", "distortion", "rate_bits", "weighted_rate", "loss", "wall_time")

    def append(self, step, d, r_bits, r_w, loss, wall):
        self.rows.append((step, d, r_bits, r_w, loss, wall))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.COLUMNS.index(name)] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()


def prepare_dataset(clouds, enc_cfg):
    """Normalize each cloud and precompute its sampling/grouping."""
    normalized = [normalize(c)[0] for c in clouds]
    return normalized, [prepare_geometry(c, enc_cfg) for c in normalized]


def loss_terms(tape, model: Model, geom: EncoderGeometry, targets, rng, weights, lam, distortion="cd"):
    """Forward pass; returns (loss, distortion, unweighted rate, weighted rate) tensors."""
    y = encoder_forward(tape, model.params, model.enc_cfg, geom)
    y_noisy = noisy_quantize_tensor(tape, y, rng)
    probs = likelihood_tensor(tape, model.params, y_noisy)
    recon = decoder_forward(tape, model.params, model.dec_cfg, y_noisy)
    if distortion == "cd":
        d = chamfer_tensor(tape, recon, targets)
    else:
        d = emd_tensor(tape, recon, targets)
    r = rate_tensor(tape, probs)
    r_w = rate_tensor(tape, probs, weights)
    loss = tape.add(d, tape.scale(r_w, lam)) if lam else d
    return loss, d, r, r_w


def train(clouds, cfg: TrainConfig, model: Model | None = None, on_checkpoint=None,
          log_every: int = 0, logger=None) -> tuple[Model, TrainLog]:
    if len(clouds) == 0:
        raise ValueError("training dataset is empty")
    enc_cfg, dec_cfg = cfg.architecture()
    model = model or Model.create(enc_cfg, dec_cfg, cfg.seed, cfg.fill)
    targets, geoms = prepare_dataset(clouds, model.enc_cfg)
    targets = np.stack(targets) if len({len(t) for t in targets}) == 1 else targets
    weights = WeightSchedule(cfg.a, cfg.b, model.latent).weights
    rng = np.random.default_rng(cfg.seed + 1)
    count = len(geoms)
    batch = min(cfg.batch, count)
    per_epoch = math.ceil(count / batch)
    total = cfg.steps or cfg.epochs * per_epoch
    log = TrainLog(cfg.lam)
    start = time.perf_counter()
    limits = threadpool_limits(1) if cfg.deterministic else None
    try:
        order = np.empty(0, dtype=np.int64)
        for step in range(1, total + 1):
            if len(order) < batch:
                order = np.concatenate([order, rng.permutation(count)])
            idx, order = order[:batch], order[batch:]
            geom = EncoderGeometry.stack([geoms[i] for i in idx])
            target = np.stack([targets[i] for i in idx])
            tape = Tape()
            loss, d, r, r_w = loss_terms(tape, model, geom, target, rng, weights, cfg.lam, cfg.distortion)
            values = (float(d.data), float(r.data) * NATS_TO_BITS, float(r_w.data), float(loss.data))
            if not all(np.isfinite(values)):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: D={values[0]} R_bits={values[1]} "
                    f"R_w={values[2]} L={values[3]}")
            tape.backward(loss)
            model.params.adam_step(cfg.lr, cfg.beta1, cfg.beta2, clip_norm=cfg.clip_norm)
            log.append(step, *values, time.perf_counter() - start)
            if logger and log_every and step % log_every == 0:
                logger(f"step {step}/{total} D={values[0]:.5g} R={values[1]:.4g} bits L={values[3]:.5g}")
            if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                on_checkpoint(step, model)
    finally:
        if limits is not None:
            limits.unregister()
    return model, log


# --------------------------------------------------------------------------- #
# evaluation

RD_COLUMNS = ("codec", "k", "depth", "bpp", "cd", "emd", "fscore", "p2p", "p2plane")


@dataclass(frozen=True)
class RDRow:
    codec: str             # "learned" or "octree"
    k: int | None
    depth: int | None
    bpp: float
    metrics: MetricReport

    def values(self) -> tuple:
        m = self.metrics
        return (self.codec, self.k, self.depth, self.bpp, m.cd, m.emd, m.fscore, m.p2p, m.p2plane)


def _mean_row(codec, k, depth, bpps, reports) -> RDRow:
    mean = {f.name: float(np.mean([getattr(r, f.name) for r in reports]))
            for f in dataclasses.fields(MetricReport)}
    return RDRow(codec, k, depth, float(np.mean(bpps)), MetricReport(**mean))


def evaluate(model: Model, clouds, truncations=(), octree_depths=(), emd: str = "auto",
             per_cloud: bool = False):
    """Rate-distortion rows averaged over ``clouds``; learned rows sorted by k, then octree by depth.

    With ``per_cloud`` also returns the unaveraged rows as ``(cloud_index, RDRow)``.
    """
    ks = sorted(set(int(k) for k in truncations))
    for k in ks:
        if not 1 <= k <= model.latent:
            raise ValueError(f"truncation {k} outside [1, {model.latent}]")
    depths = sorted(set(int(d) for d in octree_depths))
    normals = [estimate_normals(c, min(16, len(c))) for c in clouds]
    learned = {k: ([], []) for k in ks}
    octree = {d: ([], []) for d in depths}
    detail = []
    for ci, (cloud, nrm) in enumerate(zip(clouds, normals)):
        codec = LatentCodec(model, cloud)
        for k in ks:
            comp = codec.compress(k)
            recon = decompress(model, comp.data)
            rep = compare(cloud, recon, nrm, emd=emd)
            learned[k][0].append(comp.bpp)
            learned[k][1].append(rep)
            detail.append((ci, RDRow("learned", k, None, comp.bpp, rep)))
        normalized, rec = normalize(cloud)
        for d in depths:
            code = octree_encode(normalized, d)
            recon = denormalize(octree_decode(code), rec)
            rep = compare(cloud, recon, nrm, emd=emd)
            bpp = bits_per_point(code, len(cloud))
            octree[d][0].append(bpp)
            octree[d][1].append(rep)
            detail.append((ci, RDRow("octree", None, d, bpp, rep)))
    rows = [_mean_row("learned", k, None, *learned[k]) for k in ks]
    rows += [_mean_row("octree", None, d, *octree[d]) for d in depths]
    return (rows, detail) if per_cloud else rows


def rd_csv(rows, with_cloud: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((("cloud",) if with_cloud else ()) + RD_COLUMNS)
    for item in rows:
        prefix, row = ((item[0],), item[1]) if with_cloud else ((), item)
        vals = ["" if v is None else repr(float(v)) if isinstance(v, float) else v for v in row.values()]
        w.writerow(list(prefix) + vals)
    return buf.getvalue()
