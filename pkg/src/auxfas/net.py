"""CNN-RNN with depth and rPPG heads and the non-rigid registration layer."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .face_model import MAP_SIZE, NONE, VertexIndexMap
from .tensor import Tensor

FULL_CHANNELS = (64, 128, 196, 128)


@dataclass
class NetConfig:
    input_size: int = 64
    block_channels: tuple[int, ...] = (4, 8, 12, 8)  # full width (64, 128, 196, 128) divided by 16
    n_blocks: int = 3
    concat_size: int = 32
    map_size: int = MAP_SIZE
    lstm_hidden: int = 100
    fc_out: int = 128
    spectrum_bins: int = 50
    n_frames: int = 5
    lam: float = 0.015
    depth_threshold: float = 0.1
    loss_norm: str = "l1"          # "l1" or "squared_l1"
    head: str = "depth_rppg"       # "depth_rppg" | "depth" | "binary"

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 4:
            raise ValueError("block_channels needs [stem, conv1, conv2, conv3]")
        if self.concat_size % self.map_size and self.map_size % self.concat_size:
            raise ValueError("map_size and concat_size must divide one another")
        if self.fc_out % 2 or self.fc_out // 2 < self.spectrum_bins:
            raise ValueError("fc_out must be even with fc_out/2 >= spectrum_bins")
        if self.loss_norm not in ("l1", "squared_l1"):
            raise ValueError(f"unknown loss_norm {self.loss_norm!r}")
        if self.head not in ("depth_rppg", "depth", "binary"):
            raise ValueError(f"unknown head {self.head!r}")

    @classmethod
    def scaled(cls, divisor: int, **kw) -> "NetConfig":
        chans = tuple(max(1, round(c / divisor)) for c in FULL_CHANNELS)
        return cls(block_channels=chans, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass
class ModelParams:
    cnn: dict[str, Tensor] = field(default_factory=dict)
    rnn: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {**{f"cnn/{k}": v for k, v in self.cnn.items()},
                **{f"rnn/{k}": v for k, v in self.rnn.items()}}

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors().items()}
        out.update({f"buf/{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        p = cls()
        for name, arr in arrays.items():
            group, key = name.split("/", 1)
            arr = np.array(arr, dtype=np.float64)
            if group == "cnn":
                p.cnn[key] = Tensor(arr, requires_grad=True)
            elif group == "rnn":
                p.rnn[key] = Tensor(arr, requires_grad=True)
            elif group == "buf":
                p.buffers[key] = arr
            else:
                raise ValueError(f"unknown parameter group in {name!r}")
        return p

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.all_arrays().items()})


def param_shapes(cfg: NetConfig) -> tuple[dict[str, tuple], dict[str, tuple], list[str]]:
    """Shapes of the CNN and RNN parameters plus the names of the batch-norm layers."""
    c0, c1, c2, c3 = cfg.block_channels
    cnn: dict[str, tuple] = {}
    bns: list[str] = []

    def conv(name, cin, cout, bn=True):
        cnn[f"{name}.w"] = (cout, cin, 3, 3)
        cnn[f"{name}.b"] = (cout,)
        if bn:
            cnn[f"{name}.bn.g"] = (cout,)
            cnn[f"{name}.bn.b"] = (cout,)
            bns.append(name)

    conv("stem", 3, c0)
    cin = c0
    for k in range(cfg.n_blocks):
        conv(f"block{k}.0", cin, c1)
        conv(f"block{k}.1", c1, c2)
        conv(f"block{k}.2", c2, c3)
        cin = c3
    cat = c3 * cfg.n_blocks
    if cfg.head == "binary":
        cnn["cls.w"] = (2, cat)
        cnn["cls.b"] = (2,)
    else:
        for br in ("depth", "feat"):
            conv(f"{br}.0", cat, c1)
            conv(f"{br}.1", c1, c0)
            conv(f"{br}.2", c0, 1, bn=False)
    rnn: dict[str, tuple] = {}
    if cfg.head == "depth_rppg":
        d, h = cfg.map_size * cfg.map_size, cfg.lstm_hidden
        rnn = {"lstm.wx": (4 * h, d), "lstm.wh": (4 * h, h), "lstm.b": (4 * h,),
               "fc.w": (cfg.fc_out, h), "fc.b": (cfg.fc_out,)}
    return cnn, rnn, bns


class CnnOut(NamedTuple):
    depth: Tensor      # (N, map, map)
    feature: Tensor    # (N, map, map); zeros-shaped placeholder for the binary head
    logits: Tensor | None


def _conv_block(x: Tensor, p: ModelParams, name: str, training: bool) -> Tensor:
    y = tn.elu(tn.conv2d(x, p.cnn[f"{name}.w"], p.cnn[f"{name}.b"]))
    return tn.batch_norm(y, p.cnn[f"{name}.bn.g"], p.cnn[f"{name}.bn.b"],
                         p.buffers[f"{name}.bn.mean"], p.buffers[f"{name}.bn.var"], training)


def _branch(x: Tensor, p: ModelParams, name: str, cfg: NetConfig, training: bool) -> Tensor:
    y = _conv_block(x, p, f"{name}.0", training)
    y = _conv_block(y, p, f"{name}.1", training)
    y = tn.conv2d(y, p.cnn[f"{name}.2.w"], p.cnn[f"{name}.2.b"])
    y = tn.bilinear_resize(y, cfg.map_size, cfg.map_size)
    return tn.reshape(y, (y.shape[0], cfg.map_size, cfg.map_size))


def cnn_forward(images: Tensor, p: ModelParams, cfg: NetConfig, training: bool = False) -> CnnOut:
    """Frames (N, 3, H, W) in [0, 1] -> depth map and feature map per frame."""
    if images.data.ndim != 4 or images.shape[2] != images.shape[3]:
        raise tn.ShapeError(f"cnn_forward expects square (N,3,H,W) frames, got {images.shape}")
    x = _conv_block(images, p, "stem", training)
    pieces = []
    for k in range(cfg.n_blocks):
        for j in range(3):
            x = _conv_block(x, p, f"block{k}.{j}", training)
        x = tn.max_pool2(x)
        pieces.append(tn.bilinear_resize(x, cfg.concat_size, cfg.concat_size))
    cat = tn.concat(pieces, axis=1)
    if cfg.head == "binary":
        pooled = tn.mean(cat, axis=(2, 3))
        logits = tn.linear(pooled, p.cnn["cls.w"], p.cnn["cls.b"])
        zeros = Tensor(np.zeros((images.shape[0], cfg.map_size, cfg.map_size)))
        return CnnOut(zeros, zeros, logits)
    depth = _branch(cat, p, "depth", cfg, training)
    feat = _branch(cat, p, "feat", cfg, training)
    return CnnOut(depth, feat, None)


def registration_index(shape: np.ndarray, vmap: VertexIndexMap, height: int, width: int,
                       size: int = MAP_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel index into the size x size map sampled by each frontal pixel, and validity."""
    m = vmap.m
    has = m != NONE
    v = np.where(has, m, 0)
    col = np.floor(shape[0, v] * size / width).astype(np.int64)
    row = np.floor(shape[1, v] * size / height).astype(np.int64)
    valid = has & (col >= 0) & (col < size) & (row >= 0) & (row < size)
    flat = np.where(valid, row * size + col, 0)
    return flat, valid


def registration_layer(feature: Tensor, depth: Tensor, shape: np.ndarray, vmap: VertexIndexMap,
                       height: int, width: int, threshold: float = 0.1) -> Tensor:
    """Mask the feature map by ``depth >= threshold`` and frontalize it through the 3D shape.

    ``feature`` and ``depth`` are (..., size, size).  The mask is a constant:
    no gradient flows through the threshold comparison.
    """
    mask = (depth.data >= threshold).astype(np.float64)
    masked = tn.mul(feature, mask)
    flat, valid = registration_index(shape, vmap, height, width, feature.shape[-1])
    return tn.gather2d(masked, flat, valid)


def rnn_forward(frontal_seq: Tensor, p: ModelParams, cfg: NetConfig) -> Tensor:
    """(B, N_f, size, size) frontal maps -> (B, spectrum_bins) rPPG magnitudes."""
    if frontal_seq.data.ndim != 4 or frontal_seq.shape[1] == 0:
        raise tn.ShapeError("rnn_forward needs a non-empty (B, N_f, size, size) sequence")
    b, nf = frontal_seq.shape[:2]
    flat = tn.reshape(frontal_seq, (b, nf, -1))
    hid = cfg.lstm_hidden
    h = Tensor(np.zeros((b, hid)))
    c = Tensor(np.zeros((b, hid)))
    for t in range(nf):
        x_t = tn.index(flat, (slice(None), t))
        h, c = tn.lstm_step(x_t, h, c, p.rnn["lstm.wx"], p.rnn["lstm.wh"], p.rnn["lstm.b"])
    y = tn.linear(h, p.rnn["fc.w"], p.rnn["fc.b"])
    mag = tn.dft_magnitude(y)
    return tn.index(mag, (slice(None), slice(0, cfg.spectrum_bins)))


def _norm_loss(pred: Tensor, target: np.ndarray, squared: bool) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    diff = tn.tabs(tn.add(pred, -target))
    per = tn.mean(diff, axis=tuple(range(1, diff.data.ndim)))
    if squared:
        per = tn.mul(per, per)
    return tn.mean(per)


def depth_loss(pred: Tensor, target: np.ndarray, squared: bool = False) -> Tensor:
    """Batch mean of per-map mean absolute error."""
    return _norm_loss(pred, target, squared)


def rppg_loss(pred: Tensor, target: np.ndarray, squared: bool = False) -> Tensor:
    return _norm_loss(pred, target, squared)


def binary_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy with label 1 = live."""
    logp = tn.log_softmax(logits, axis=1)
    onehot = np.eye(2)[np.asarray(labels, dtype=np.int64)]
    return tn.neg(tn.mean(tn.tsum(tn.mul(logp, onehot), axis=1)))


def score(depth: np.ndarray, rppg: np.ndarray, lam: float) -> float:
    """Liveness score ``||f||^2 + lam * ||D||^2``; higher means more live."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    depth = np.asarray(depth, dtype=np.float64)
    rppg = np.asarray(rppg, dtype=np.float64)
    return float(np.sum(rppg ** 2) + lam * np.sum(depth ** 2))


@dataclass
class ClipOutput:
    score: float
    depth: np.ndarray          # last-frame depth estimate
    rppg: np.ndarray           # (spectrum_bins,)
    frontal: np.ndarray | None  # (N_f, size, size)


def frames_to_tensor(frames: np.ndarray) -> Tensor:
    """(T, H, W, 3) frames -> (T, 3, H, W) tensor."""
    return Tensor(np.ascontiguousarray(np.asarray(frames, dtype=np.float64).transpose(0, 3, 1, 2)))


def infer_clip(frames: np.ndarray, shapes, p: ModelParams, cfg: NetConfig,
               vmap: VertexIndexMap | None) -> ClipOutput:
    """Score the last N_f frames of a clip with frozen parameters."""
    nf = cfg.n_frames
    if len(frames) < nf:
        raise ValueError(f"clip has {len(frames)} frames, need at least {nf}")
    frames = frames[-nf:]
    shapes = list(shapes)[-nf:]
    h, w = frames.shape[1:3]
    out = cnn_forward(frames_to_tensor(frames), p, cfg, training=False)
    if cfg.head == "binary":
        logp = tn.log_softmax(out.logits, axis=1).data
        live = float(np.exp(logp[-1, 1]))
        return ClipOutput(live, out.depth.data[-1], np.zeros(cfg.spectrum_bins), None)
    last_depth = out.depth.data[-1]
    if cfg.head == "depth":
        return ClipOutput(score(last_depth, np.zeros(cfg.spectrum_bins), cfg.lam), last_depth,
                          np.zeros(cfg.spectrum_bins), None)
    frontal = [registration_layer(tn.index(out.feature, j), tn.index(out.depth, j), shapes[j],
                                  vmap, h, w, cfg.depth_threshold) for j in range(nf)]
    seq = tn.reshape(tn.stack(frontal, axis=0), (1, nf, cfg.map_size, cfg.map_size))
    f_hat = rnn_forward(seq, p, cfg).data[0]
    return ClipOutput(score(last_depth, f_hat, cfg.lam), last_depth, f_hat, seq.data[0])
