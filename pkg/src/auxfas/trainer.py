"""Two-stream alternating training of the CNN-RNN."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import net
from . import tensor as tn
from .face_model import VertexIndexMap
from .net import ModelParams, NetConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 10
    batch_cnn: int = 10
    batch_rnn: int = 2
    n_frames: int = 5
    init_std: float = 0.02
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    balanced_sequences: bool = True  # alternate live and spoof clips in the sequence stream

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("epochs", "batch_cnn", "batch_rnn", "n_frames", "init_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


def init_params(cfg: NetConfig, seed: int, std: float = 0.02) -> ModelParams:
    """Weights ~ N(0, std^2), biases 0, batch-norm scale 1 / shift 0."""
    rng = np.random.default_rng(seed)
    cnn_shapes, rnn_shapes, bns = net.param_shapes(cfg)
    p = ModelParams()

    def make(name, shp):
        if name.endswith(".bn.g"):
            arr = np.ones(shp)
        elif name.endswith(".b") or name.endswith(".bn.b"):
            arr = np.zeros(shp)
        else:
            arr = rng.normal(0.0, std, size=shp)
        return Tensor(arr, requires_grad=True)

    for name, shp in cnn_shapes.items():
        p.cnn[name] = make(name, shp)
    for name, shp in rnn_shapes.items():
        p.rnn[name] = make(name, shp)
    for name in bns:
        c = cnn_shapes[f"{name}.w"][0]
        p.buffers[f"{name}.bn.mean"] = np.zeros(c)
        p.buffers[f"{name}.bn.var"] = np.ones(c)
    return p


class Optimizer:
    """Adam or plain SGD with one state slot per named parameter, shared by both streams."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, named: dict[str, Tensor]) -> None:
        c = self.cfg
        for name, p in named.items():
            g = p.grad
            if g is None:
                continue
            if c.optimizer == "sgd":
                p.data -= c.lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** t)
            vhat = v / (1 - c.beta2 ** t)
            p.data -= c.lr * mhat / (np.sqrt(vhat) + c.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
            out[f"opt/t/{name}"] = np.array([self.t[name]], dtype=np.int64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            _, kind, name = key.split("/", 2)
            if kind == "m":
                self.m[name] = np.array(arr, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(arr, dtype=np.float64)
            elif kind == "t":
                self.t[name] = int(np.asarray(arr).reshape(-1)[0])


class TrainClip(Protocol):
    """What training needs from a clip (see synthgen.VideoClip)."""

    label: str
    gt_depth: np.ndarray
    gt_rppg: np.ndarray

    @property
    def n_frames(self) -> int: ...

    def frame_array(self, idx) -> np.ndarray: ...

    def posed_shape(self, t: int) -> np.ndarray: ...


def _zero_grads(params: ModelParams) -> None:
    for t in params.tensors().values():
        t.grad = None


def _check_finite(params: ModelParams, losses: dict[str, float], where: str) -> None:
    for k, v in losses.items():
        if not np.isfinite(v):
            raise NumericalError(f"{where}: loss {k} is {v}")
    for name, t in params.tensors().items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"{where}: parameter {name} became non-finite")


def cnn_stream_step(images: np.ndarray, depths: np.ndarray, labels: np.ndarray, params: ModelParams,
                    opt: Optimizer, cfg: NetConfig) -> dict[str, float]:
    """One update of the CNN parameters on a batch of single frames."""
    _zero_grads(params)
    out = net.cnn_forward(net.frames_to_tensor(images), params, cfg, training=True)
    if cfg.head == "binary":
        loss = net.binary_loss(out.logits, labels)
        name = "ce"
    else:
        loss = net.depth_loss(out.depth, depths, squared=cfg.loss_norm == "squared_l1")
        name = "depth"
    loss.backward()
    opt.step({f"cnn/{k}": v for k, v in params.cnn.items()})
    losses = {name: float(loss.data)}
    _check_finite(params, losses, "cnn stream")
    return losses


def rnn_stream_loss(seq_images: np.ndarray, seq_depths: np.ndarray, seq_shapes, rppg: np.ndarray,
                    labels: np.ndarray, params: ModelParams, cfg: NetConfig,
                    vmap: VertexIndexMap | None) -> tuple[Tensor, dict[str, float]]:
    """Joint sequence objective; seq_images is (B, N_f, H, W, 3)."""
    b, nf, h, w = seq_images.shape[:4]
    frames = seq_images.reshape(b * nf, h, w, 3)
    out = net.cnn_forward(net.frames_to_tensor(frames), params, cfg, training=True)
    squared = cfg.loss_norm == "squared_l1"
    if cfg.head == "binary":
        loss = net.binary_loss(out.logits, np.repeat(labels, nf))
        return loss, {"ce": float(loss.data)}
    d_loss = net.depth_loss(out.depth, seq_depths.reshape(b * nf, *seq_depths.shape[2:]), squared)
    if cfg.head == "depth":
        return d_loss, {"depth": float(d_loss.data)}
    frontal = []
    for k in range(b * nf):
        frontal.append(net.registration_layer(
            tn.index(out.feature, k), tn.index(out.depth, k), seq_shapes[k // nf][k % nf],
            vmap, h, w, cfg.depth_threshold))
    seq = tn.reshape(tn.stack(frontal, axis=0), (b, nf, cfg.map_size, cfg.map_size))
    f_hat = net.rnn_forward(seq, params, cfg)
    r_loss = net.rppg_loss(f_hat, rppg, squared)
    loss = tn.add(r_loss, d_loss)
    return loss, {"rppg": float(r_loss.data), "depth": float(d_loss.data)}


def rnn_stream_step(seq_images, seq_depths, seq_shapes, rppg, labels, params: ModelParams,
                    opt: Optimizer, cfg: NetConfig, vmap: VertexIndexMap | None) -> dict[str, float]:
    """One end-to-end update of CNN and RNN parameters on a batch of sequences."""
    _zero_grads(params)
    loss, losses = rnn_stream_loss(seq_images, seq_depths, seq_shapes, rppg, labels, params, cfg, vmap)
    loss.backward()
    opt.step(params.tensors())
    _check_finite(params, losses, "rnn stream")
    return losses


def config_hash(net_cfg: NetConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"net": net_cfg.to_dict(), "train": asdict(train_cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: dict[str, np.ndarray]
    epoch: int
    config_hash: str

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params.all_arrays())
        out.update(self.opt_state)
        out["meta/epoch"] = np.array([self.epoch], dtype=np.int64)
        out["meta/config_hash"] = np.frombuffer(self.config_hash.encode(), dtype=np.uint8).astype(np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Checkpoint":
        model = {k: v for k, v in arrays.items() if k.split("/", 1)[0] in ("cnn", "rnn", "buf")}
        opt = {k: v for k, v in arrays.items() if k.startswith("opt/")}
        epoch = int(np.asarray(arrays["meta/epoch"]).reshape(-1)[0])
        h = bytes(np.asarray(arrays["meta/config_hash"], dtype=np.uint8).tolist()).decode()
        return cls(ModelParams.from_arrays(model), opt, epoch, h)


def _label_id(label: str) -> int:
    return 1 if label == "live" else 0


def _validate(clips: Sequence[TrainClip], nf: int) -> None:
    if not clips:
        raise ValueError("training set is empty")
    for i, c in enumerate(clips):
        if c.gt_depth is None or c.gt_rppg is None:
            raise ValueError(f"clip {i} is missing ground truth")
        if c.n_frames < nf:
            raise ValueError(f"clip {i} has fewer than {nf} frames")


def _split_by_class(clips: Sequence[TrainClip]) -> tuple[np.ndarray, np.ndarray]:
    live = np.array([i for i, c in enumerate(clips) if c.label == "live"], dtype=np.int64)
    spoof = np.array([i for i, c in enumerate(clips) if c.label != "live"], dtype=np.int64)
    return live, spoof


def _sequence_order(clips: Sequence[TrainClip], length: int, balanced: bool,
                    rng: np.random.Generator) -> np.ndarray:
    """Clip indices for the sequence stream.

    Balanced order alternates live and spoof clips, cycling through a fresh
    permutation of each class; otherwise one shuffled pass, wrapped around.
    """
    live, spoof = _split_by_class(clips)
    if not balanced or live.size == 0 or spoof.size == 0:
        perm = rng.permutation(len(clips))
        return perm[np.arange(length) % len(clips)]
    pl, ps = rng.permutation(live), rng.permutation(spoof)
    out = np.empty(length, dtype=np.int64)
    out[0::2] = pl[np.arange(len(out[0::2])) % pl.size]
    out[1::2] = ps[np.arange(len(out[1::2])) % ps.size]
    return out


def run_epoch(clips: Sequence[TrainClip], params: ModelParams, opt: Optimizer, net_cfg: NetConfig,
              train_cfg: TrainConfig, vmap: VertexIndexMap | None, epoch: int,
              on_record: Callable[[dict], None] | None = None) -> dict[str, float]:
    """Alternate stream-1 and stream-2 steps 1:1 for ceil(n_clips / batch_rnn) step pairs."""
    rng = np.random.default_rng([train_cfg.seed, epoch])
    nf = net_cfg.n_frames
    n_steps = -(-len(clips) // train_cfg.batch_rnn)
    order = _sequence_order(clips, n_steps * train_cfg.batch_rnn, train_cfg.balanced_sequences, rng)
    totals: dict[str, list[float]] = {}
    t0 = time.time()
    for step in range(n_steps):
        # stream 1: single frames from random clips
        ci = rng.integers(0, len(clips), size=train_cfg.batch_cnn)
        fi = [int(rng.integers(0, clips[c].n_frames)) for c in ci]
        images = np.stack([clips[c].frame_array(f) for c, f in zip(ci, fi)])
        depths = np.stack([clips[c].gt_depth[f] for c, f in zip(ci, fi)])
        labels = np.array([_label_id(clips[c].label) for c in ci])
        l1 = cnn_stream_step(images, depths, labels, params, opt, net_cfg)
        # stream 2: sequences of N_f consecutive frames
        sel = order[step * train_cfg.batch_rnn + np.arange(train_cfg.batch_rnn)]
        starts = [int(rng.integers(0, clips[c].n_frames - nf + 1)) for c in sel]
        seq_images = np.stack([clips[c].frame_array(slice(s, s + nf)) for c, s in zip(sel, starts)])
        seq_depths = np.stack([clips[c].gt_depth[s:s + nf] for c, s in zip(sel, starts)])
        seq_shapes = [[clips[c].posed_shape(s + j) for j in range(nf)] for c, s in zip(sel, starts)]
        rppg = np.stack([clips[c].gt_rppg for c in sel])
        labels2 = np.array([_label_id(clips[c].label) for c in sel])
        l2 = rnn_stream_step(seq_images, seq_depths, seq_shapes, rppg, labels2, params, opt,
                             net_cfg, vmap)
        for stream, losses in (("cnn", l1), ("rnn", l2)):
            rec = {"epoch": epoch, "step": step, "stream": stream, **losses,
                   "wall": round(time.time() - t0, 3)}
            if on_record:
                on_record(rec)
            for k, v in losses.items():
                totals.setdefault(f"{stream}_{k}", []).append(v)
    return {k: float(np.mean(v)) for k, v in totals.items()}


def train(clips: Sequence[TrainClip], net_cfg: NetConfig, train_cfg: TrainConfig,
          vmap: VertexIndexMap | None, resume: Checkpoint | None = None,
          on_record: Callable[[dict], None] | None = None,
          on_checkpoint: Callable[[Checkpoint], None] | None = None) -> list[Checkpoint]:
    """Train for ``train_cfg.epochs`` epochs; returns one checkpoint per epoch."""
    if train_cfg.n_frames != net_cfg.n_frames:
        raise ValueError("TrainConfig.n_frames and NetConfig.n_frames disagree")
    _validate(clips, net_cfg.n_frames)
    h = config_hash(net_cfg, train_cfg)
    opt = Optimizer(train_cfg)
    if resume is not None:
        if resume.config_hash != h:
            raise ValueError("checkpoint was produced with a different configuration")
        params = resume.params.copy()
        opt.load_state(resume.opt_state)
        start = resume.epoch
    else:
        params = init_params(net_cfg, train_cfg.seed, train_cfg.init_std)
        start = 0
    history = []
    for epoch in range(start, train_cfg.epochs):
        summary = run_epoch(clips, params, opt, net_cfg, train_cfg, vmap, epoch, on_record)
        log.info("epoch %d: %s", epoch + 1, summary)
        ck = Checkpoint(params.copy(), {k: v.copy() for k, v in opt.state_arrays().items()},
                        epoch + 1, h)
        history.append(ck)
        if on_checkpoint:
            on_checkpoint(ck)
    return history
