"""1D-CNN pose estimator with a grid-snapped positional encoding of the previous pose."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import AutodiffError, Tape, checkpoint, ops
from .pose import Pose, wrap_angle
from .world import LidarScan, OccupancyGrid, SensorConfig, free_poses


@dataclass(frozen=True)
class PoseEncodingConfig:
    grid_xy: float = 0.1
    grid_theta: float = 0.1
    n_freqs: int = 4

    def __post_init__(self):
        if self.grid_xy <= 0 or self.grid_theta <= 0 or self.n_freqs < 1:
            raise ValueError("grid sizes must be positive and n_freqs >= 1")


@dataclass(frozen=True)
class LocNetConfig:
    n_beams: int = 108
    max_range: float = 10.0
    pos_scale: float = 5.0          # metres mapped to 1.0 in the encoding and the output
    encoding: PoseEncodingConfig = PoseEncodingConfig()
    channels: tuple = (1, 8, 16, 16, 32, 32, 32)
    kernel: int = 5
    strides: tuple = (2, 2, 1, 1, 1, 1)
    fc: tuple = (128, 64, 4)

    def conv_lengths(self):
        lengths = [self.n_beams]
        for s in self.strides:
            lengths.append(ops.conv1d_output_length(lengths[-1], self.kernel, s))
        return lengths

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * self.conv_lengths()[-1]

    @property
    def encoding_size(self) -> int:
        return 6 * self.encoding.n_freqs

    def param_shapes(self) -> dict:
        shapes = {}
        for i, (ci, co) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            shapes[f"conv{i}.w"] = (co, ci, self.kernel)
            shapes[f"conv{i}.b"] = (co,)
        widths = (self.flat_features + self.encoding_size,) + tuple(self.fc)
        for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"fc{j}.w"] = (a, b)
            shapes[f"fc{j}.b"] = (b,)
        return shapes

    @classmethod
    def for_grid(cls, grid: OccupancyGrid, sensor: SensorConfig, **kw):
        x0, y0 = grid.origin
        w, h = grid.extent
        scale = max(abs(x0), abs(y0), abs(x0 + w), abs(y0 + h))
        return cls(n_beams=sensor.n_beams, max_range=sensor.max_range,
                   pos_scale=float(math.ceil(scale * 10.0) / 10.0), **kw)

    def to_meta(self) -> dict:
        e = self.encoding
        return {
            "meta.n_beams": float(self.n_beams), "meta.max_range": self.max_range,
            "meta.pos_scale": self.pos_scale, "meta.grid_xy": e.grid_xy,
            "meta.grid_theta": e.grid_theta, "meta.n_freqs": float(e.n_freqs),
            "meta.kernel": float(self.kernel),
            "meta.channels": np.array(self.channels, dtype=np.float64),
            "meta.strides": np.array(self.strides, dtype=np.float64),
            "meta.fc": np.array(self.fc, dtype=np.float64),
        }

    @classmethod
    def from_meta(cls, m: dict):
        i = lambda k: int(round(float(m[k])))  # noqa: E731
        return cls(n_beams=i("meta.n_beams"), max_range=float(m["meta.max_range"]),
                   pos_scale=float(m["meta.pos_scale"]),
                   encoding=PoseEncodingConfig(float(m["meta.grid_xy"]),
                                               float(m["meta.grid_theta"]), i("meta.n_freqs")),
                   channels=tuple(int(v) for v in m["meta.channels"]), kernel=i("meta.kernel"),
                   strides=tuple(int(v) for v in m["meta.strides"]),
                   fc=tuple(int(v) for v in m["meta.fc"]))


# -- encoding --------------------------------------------------------------------

def snap(value, cell):
    """Round to the nearest multiple of ``cell`` (halves round up)."""
    return np.floor(np.asarray(value, dtype=np.float64) / cell + 0.5) * cell


def encode_prev_pose(prev, cfg: PoseEncodingConfig = PoseEncodingConfig(), pos_scale=5.0) -> np.ndarray:
    """Sine/cosine features of the grid-snapped previous pose.

    ``prev`` is a :class:`Pose` or an ``(n, 3)`` array; the output has
    ``6 * n_freqs`` features per pose, ordered x, y, theta and within each
    component ``[sin(2^k pi c), cos(2^k pi c)]`` for k = 0..n_freqs-1.
    """
    p = np.asarray(prev.as_array() if isinstance(prev, Pose) else prev, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    c = np.stack([snap(p[:, 0], cfg.grid_xy) / pos_scale,
                  snap(p[:, 1], cfg.grid_xy) / pos_scale,
                  snap(p[:, 2], cfg.grid_theta) / math.pi], axis=1)
    freqs = (2.0 ** np.arange(cfg.n_freqs)) * math.pi
    arg = c[:, :, None] * freqs[None, None, :]             # (n, 3, k)
    feat = np.stack([np.sin(arg), np.cos(arg)], axis=-1)   # (n, 3, k, 2)
    feat = feat.reshape(len(p), -1)
    return feat[0] if single else feat


# -- network ---------------------------------------------------------------------

def init_params(cfg: LocNetConfig, rng: np.random.Generator) -> dict:
    """He-uniform weights (``+-sqrt(6/fan_in)``) and zero biases.

    The narrower ``+-sqrt(1/fan_in)`` range lets activations shrink through the
    six ReLU stages until whole conv layers go dead and the scan stops reaching
    the head.
    """
    params = {}
    shapes = cfg.param_shapes()
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[1] * shape[2] if name.startswith("conv") else shape[0]
        params[name] = rng.uniform(-1.0, 1.0, shape) * math.sqrt(6.0 / fan_in)
    return params


def zero_params(cfg: LocNetConfig) -> dict:
    return {k: np.zeros(s) for k, s in cfg.param_shapes().items()}


def net_forward(params: dict, scans, encodings, cfg: LocNetConfig):
    """Raw network head ``(x_n, y_n, s_theta, c_theta)``; batch-first when ``scans`` is 2-D.

    ``params`` values may be tape nodes.
    """
    scans = np.asarray(scans, dtype=np.float64)
    batched = scans.ndim == 2
    if scans.shape[-1] != cfg.n_beams:
        raise ValueError(f"scan has {scans.shape[-1]} beams, network expects {cfg.n_beams}")
    h = (scans / cfg.max_range)[..., None, :]
    for i, s in enumerate(cfg.strides):
        h = ops.conv1d(h, params[f"conv{i}.w"], s)
        h = ops.relu(ops.add_bias(h, params[f"conv{i}.b"], axis=-2))
    flat = cfg.flat_features
    h = ops.reshape(h, (scans.shape[0], flat) if batched else (flat,))
    h = ops.concat([h, np.asarray(encodings, dtype=np.float64)], axis=-1)
    n_fc = len(cfg.fc)
    for j in range(n_fc):
        h = ops.add_bias(ops.matmul(h, params[f"fc{j}.w"]), params[f"fc{j}.b"])
        if j < n_fc - 1:
            h = ops.relu(h)
    return h


def head_to_pose(out, cfg: LocNetConfig):
    """Map the 4-vector head to ``(x, y, theta)``; works batched and on the tape."""
    if isinstance(out, np.ndarray):
        o = out
        return (o[..., 0] * cfg.pos_scale, o[..., 1] * cfg.pos_scale, np.arctan2(o[..., 2], o[..., 3]))
    idx = (lambda k: (slice(None), k)) if out.value.ndim == 2 else (lambda k: k)
    x = out[idx(0)] * cfg.pos_scale
    y = out[idx(1)] * cfg.pos_scale
    th = ops.atan2(out[idx(2)], out[idx(3)])
    return x, y, th


def loc_forward(params: dict, scan, prev: Pose, cfg: LocNetConfig) -> Pose:
    """Pose estimate from one scan and the previous pose."""
    ranges = scan.ranges if hasattr(scan, "ranges") else scan
    enc = encode_prev_pose(prev, cfg.encoding, cfg.pos_scale)
    x, y, th = head_to_pose(net_forward(params, ranges, enc, cfg), cfg)
    if isinstance(x, np.ndarray):
        return Pose(float(x), float(y), float(th))
    return Pose(x, y, th)


def loc_forward_batch(params, scans, prevs, cfg: LocNetConfig):
    enc = encode_prev_pose(np.asarray(prevs), cfg.encoding, cfg.pos_scale)
    return head_to_pose(net_forward(params, scans, enc, cfg), cfg)


def localization_loss(est, gt):
    """Mean of squared x, y and wrapped heading differences."""
    dx = est[0] - gt[0]
    dy = est[1] - gt[1]
    dth = wrap_angle(est[2] - gt[2])
    if all(isinstance(v, (float, int)) for v in (dx, dy, dth)):
        return (dx * dx + dy * dy + dth * dth) / 3.0
    return (ops.square(dx) + ops.square(dy) + ops.square(dth)) * (1.0 / 3.0)


def localization_loss_batch(est, gt: np.ndarray):
    """Batch mean of the per-sample localization loss; ``gt`` is ``(n, 3)``."""
    x, y, th = est
    dx = ops.sub(x, gt[:, 0])
    dy = ops.sub(y, gt[:, 1])
    dth = ops.wrap_angle(ops.sub(th, gt[:, 2]))
    per = ops.add(ops.add(ops.square(dx), ops.square(dy)), ops.square(dth))
    return ops.mean(per) * (1.0 / 3.0)


@dataclass
class Localizer:
    cfg: LocNetConfig
    params: dict

    def estimate(self, scan, prev: Pose) -> Pose:
        return loc_forward(self.params, scan, prev, self.cfg)

    def copy(self) -> "Localizer":
        return Localizer(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def save(self, path) -> None:
        checkpoint.save(path, {**self.params, **self.cfg.to_meta()})

    @classmethod
    def load(cls, path) -> "Localizer":
        data = checkpoint.load(path)
        cfg = LocNetConfig.from_meta(data)
        params = {k: v for k, v in data.items() if not k.startswith("meta.")}
        expected = cfg.param_shapes()
        for k, shape in expected.items():
            if k not in params or params[k].shape != tuple(shape):
                raise checkpoint.CheckpointError(f"checkpoint tensor {k!r} missing or misshaped")
        return cls(cfg, params)


# -- dataset -----------------------------------------------------------------------

@dataclass(eq=False)
class LocDataset:
    scans: np.ndarray   # (n, n_beams)
    prev: np.ndarray    # (n, 3)
    gt: np.ndarray      # (n, 3)
    sensor: SensorConfig = SensorConfig()
    sigma: float = 0.25
    seed: int = 0

    def __len__(self):
        return len(self.gt)

    def sample(self, i):
        return LocSample(LidarScan(self.scans[i], self.sensor.fov, self.sensor.max_range),
                         Pose(*self.prev[i]), Pose(*self.gt[i]))


@dataclass
class LocSample:
    scan: object
    prev_pose: Pose
    gt_pose: Pose


def generate_dataset(grid: OccupancyGrid, sensor: SensorConfig = SensorConfig(), sigma=0.25,
                     augment=10, rng: np.random.Generator | None = None,
                     prev_sigma_xy=0.30, prev_sigma_theta=0.20, seed=0) -> LocDataset:
    """Noisy scans at every drivable cell, repeated ``augment`` times.

    Positions come from one call to :func:`~mindstack.world.free_poses`; every
    copy redraws the heading, the scan noise and the previous-pose noise.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    base = free_poses(grid, rng)
    n = len(base)
    bx = np.array([p.x for p in base])
    by = np.array([p.y for p in base])
    offsets = sensor.beam_offsets()
    scans, prevs, gts = [], [], []
    for copy in range(augment):
        if copy == 0:
            th = np.array([p.theta for p in base])
        else:
            th = np.mod(rng.uniform(0.0, 2 * math.pi, n) + math.pi, 2 * math.pi) - math.pi
        angles = (th[:, None] + offsets[None, :]).ravel()
        clean = kernels.raycast_many(grid.free, grid.origin[0], grid.origin[1], grid.resolution,
                                     np.repeat(bx, sensor.n_beams), np.repeat(by, sensor.n_beams),
                                     angles, sensor.max_range).reshape(n, sensor.n_beams)
        if sigma > 0:
            clean = np.clip(clean + rng.normal(0.0, sigma, clean.shape), 0.0, sensor.max_range)
        noise = np.zeros((n, 3))
        if prev_sigma_xy > 0:
            noise[:, :2] = rng.normal(0.0, prev_sigma_xy, (n, 2))
        if prev_sigma_theta > 0:
            noise[:, 2] = rng.normal(0.0, prev_sigma_theta, n)
        gt = np.stack([bx, by, th], axis=1)
        prev = gt + noise
        prev[:, 2] = np.mod(prev[:, 2] + math.pi, 2 * math.pi) - math.pi
        scans.append(clean)
        prevs.append(prev)
        gts.append(gt)
    return LocDataset(np.concatenate(scans), np.concatenate(prevs), np.concatenate(gts),
                      sensor, float(sigma), int(seed))


_DS_MAGIC = b"MINDDSET"


def save_dataset(path, ds: LocDataset) -> None:
    """Binary cache: header then one record (scan, prev, gt) per sample, float64 LE."""
    n, nb = ds.scans.shape
    header = _DS_MAGIC + struct.pack("<IQIdddq", 1, n, nb, ds.sensor.fov, ds.sensor.max_range,
                                     ds.sigma, ds.seed)
    rec = np.concatenate([ds.scans, ds.prev, ds.gt], axis=1).astype("<f8")
    Path(path).write_bytes(header + rec.tobytes())


def load_dataset(path) -> LocDataset:
    blob = Path(path).read_bytes()
    if blob[:8] != _DS_MAGIC:
        raise ValueError("not a dataset cache")
    version, n, nb, fov, max_range, sigma, seed = struct.unpack_from("<IQIdddq", blob, 8)
    if version != 1:
        raise ValueError(f"unsupported dataset cache version {version}")
    off = 8 + struct.calcsize("<IQIdddq")
    rec = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    if rec.size != n * (nb + 6):
        raise ValueError("dataset cache size does not match header")
    rec = rec.reshape(n, nb + 6)
    return LocDataset(rec[:, :nb].copy(), rec[:, nb:nb + 3].copy(), rec[:, nb + 3:].copy(),
                      SensorConfig(nb, fov, max_range), sigma, seed)


# -- pretraining ---------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def batch_loss_and_grads(params: dict, scans, prev, gt, cfg: LocNetConfig):
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    est = loc_forward_batch(leaves, scans, prev, cfg)
    loss = localization_loss_batch(est, gt)
    grads = tape.backward(loss)
    return float(loss.value), grads


def evaluate(params, ds: LocDataset, cfg: LocNetConfig, batch_size=512):
    """Mean localization loss and mean position error over a dataset."""
    losses, errs = [], []
    for i in range(0, len(ds), batch_size):
        sl = slice(i, i + batch_size)
        x, y, th = loc_forward_batch(params, ds.scans[sl], ds.prev[sl], cfg)
        g = ds.gt[sl]
        dth = np.mod(th - g[:, 2] + math.pi, 2 * math.pi) - math.pi
        losses.append(((x - g[:, 0]) ** 2 + (y - g[:, 1]) ** 2 + dth ** 2) / 3.0)
        errs.append(np.hypot(x - g[:, 0], y - g[:, 1]))
    return float(np.concatenate(losses).mean()), float(np.concatenate(errs).mean())


def pretrain(params: dict, ds: LocDataset, cfg: LocNetConfig, epochs=20, lr=1e-3,
             batch_size=64, rng: np.random.Generator | None = None, log=None):
    """Supervised minibatch training on the localization loss (Adam).

    Returns the trained parameters and the per-epoch mean training loss.
    ``log(epoch, loss, params)`` is called after every epoch.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    opt = Adam(lr=lr)
    curve = []
    n = len(ds)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            b = order[i:i + batch_size]
            try:
                loss, grads = batch_loss_and_grads(params, ds.scans[b], ds.prev[b], ds.gt[b], cfg)
            except AutodiffError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {i // batch_size}: {exc}") from None
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}, batch {i // batch_size}")
            if lr > 0:
                opt.step(params, grads)
            total += loss * len(b)
        curve.append(total / n)
        if log is not None:
            log(epoch, curve[-1], params)
    return params, curve
