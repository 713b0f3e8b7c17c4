"""Deterministic synthetic live / print / replay clips with exact ground truth.

Faces are point-splatted from a dense sampling of the procedural face model
and shaded by normalized depth.  Live skin carries a pulse modulation; print
attacks show a static, grainy, low-contrast photo moving in-plane; replay
attacks show a damped-pulse video through a screen with a moire pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import face_model as fm
from . import rppg
from .face_model import FaceBasis, Pose, ShapeParams

LABELS = ("live", "print", "replay")
PULSE_SIGNATURE = np.array([0.33, 0.77, 0.53])
DENSE_GRID = 150
MODEL_GRID = 50


@dataclass
class SubjectSpec:
    subject_id: int
    alpha_id: np.ndarray
    skin: np.ndarray            # base RGB albedo
    pulse_amplitude: float
    heart_rate: float           # Hz

    def __post_init__(self):
        lo, hi = rppg.PASSBAND
        if not lo <= self.heart_rate <= hi:
            raise ValueError(f"heart rate {self.heart_rate} Hz outside the {lo}-{hi} Hz passband")


@dataclass
class MotionProfile:
    yaw_deg: float = 15.0
    pitch_deg: float = 8.0
    roll_deg: float = 6.0
    shift_px: float = 2.0
    expression: float = 0.8

    @classmethod
    def still(cls) -> "MotionProfile":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SpoofCues:
    grain: float = 0.2           # print: multiplicative media-grain amplitude
    contrast: float = 0.7        # print: ink gamut compression
    warp_deg: float = 4.0        # print/replay: in-plane hand motion
    moire: float = 0.12          # replay: screen grating amplitude
    moire_period: float = 3.0    # replay: grating period in pixels
    replay_pulse: float = 0.2    # replay: pulse damping factor


@dataclass
class VideoClip:
    frames: np.ndarray                   # (T, H, W, 3) float32 in [0, 1]
    fps: float
    label: str
    subject_id: int
    alpha_id: np.ndarray
    alpha_exp: np.ndarray                # (T, N_exp)
    pose_s: np.ndarray                   # (T,)
    pose_R: np.ndarray                   # (T, 3, 3)
    pose_t: np.ndarray                   # (T, 3)
    gt_depth: np.ndarray                 # (T, 32, 32)
    gt_rppg: np.ndarray                  # (50,)
    heart_rate: float | None = None
    basis: FaceBasis | None = field(default=None, repr=False, compare=False)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def is_live(self) -> bool:
        return self.label == "live"

    def frame_array(self, idx) -> np.ndarray:
        return np.asarray(self.frames[idx], dtype=np.float64)

    def pose(self, t: int) -> Pose:
        return Pose(float(self.pose_s[t]), self.pose_R[t], self.pose_t[t])

    def shape_params(self, t: int) -> ShapeParams:
        return ShapeParams(self.alpha_id, self.alpha_exp[t])

    def posed_shape(self, t: int) -> np.ndarray:
        basis = self.basis if self.basis is not None else model_basis()
        return fm.pose_transform(fm.synthesize_shape(basis, self.shape_params(t)), self.pose(t))

    def posed_shapes(self) -> list[np.ndarray]:
        return [self.posed_shape(t) for t in range(self.n_frames)]


@lru_cache(maxsize=4)
def model_basis(seed: int = 0) -> FaceBasis:
    return fm.procedural_basis(MODEL_GRID, seed=seed)


@lru_cache(maxsize=4)
def _dense(seed: int = 0):
    basis = fm.procedural_basis(DENSE_GRID, seed=seed)
    u, v = fm.face_grid(DENSE_GRID)
    return basis, u, v


def _albedo(u: np.ndarray, v: np.ndarray, skin: np.ndarray) -> np.ndarray:
    g = fm._gauss
    eyes = g(u, v, -0.35, -0.2, 0.1, 0.05) + g(u, v, 0.35, -0.2, 0.1, 0.05)
    brows = g(u, v, -0.35, -0.36, 0.14, 0.03) + g(u, v, 0.35, -0.36, 0.14, 0.03)
    lips = g(u, v, 0.0, 0.55, 0.2, 0.05)
    alb = skin[None, :] * (1.0 - 0.6 * eyes - 0.35 * brows)[:, None]
    lip_color = np.array([0.65, 0.25, 0.3])
    alb = alb * (1 - 0.7 * lips[:, None]) + 0.7 * lips[:, None] * lip_color
    return np.clip(alb, 0.0, 1.0)


def _skin_mask(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    g = fm._gauss
    feat = (g(u, v, -0.35, -0.2, 0.1, 0.05) + g(u, v, 0.35, -0.2, 0.1, 0.05)
            + g(u, v, 0.0, 0.55, 0.2, 0.05))
    return np.clip(1.0 - 2.0 * feat, 0.0, 1.0)


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random color field with a few oriented stripes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    base = rng.uniform(0.2, 0.7, size=3)
    for c in range(3):
        acc = np.full((h, w), base[c])
        for _ in range(4):
            fx, fy = rng.uniform(-4, 4, size=2)
            acc += rng.uniform(0.03, 0.12) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        img[..., c] = acc
    coarse = rng.uniform(-0.08, 0.08, size=(8, 8, 3))
    img += np.kron(coarse, np.ones((-(-h // 8), -(-w // 8), 1)))[:h, :w]
    return np.clip(img, 0.0, 1.0)


def random_subject(subject_id: int, seed: int, basis: FaceBasis | None = None) -> SubjectSpec:
    basis = basis or model_basis()
    rng = np.random.default_rng([seed, subject_id, 991])
    tone = rng.uniform(0.35, 0.9)
    skin = np.clip(np.array([0.95, 0.72, 0.6]) * tone + rng.normal(0, 0.03, 3), 0.05, 1.0)
    return SubjectSpec(subject_id, rng.normal(0, 0.6, basis.n_id), skin,
                       float(rng.uniform(0.012, 0.02)), float(rng.uniform(0.8, 3.0)))


def _poses(T: int, size: int, motion: MotionProfile, rng: np.random.Generator):
    base = fm.canonical_pose(size, size)
    tt = np.arange(T)
    def wave(amp):
        f1, f2 = rng.uniform(0.002, 0.012, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        return amp * (0.7 * np.sin(2 * np.pi * f1 * tt + p1) + 0.3 * np.sin(2 * np.pi * f2 * tt + p2))
    yaw, pitch, roll = (np.deg2rad(wave(a)) for a in (motion.yaw_deg, motion.pitch_deg, motion.roll_deg))
    dx, dy = wave(motion.shift_px), wave(motion.shift_px)
    scale = base.s * (1.0 + 0.03 * np.sign(motion.shift_px) * np.sin(2 * np.pi * 0.005 * tt))
    R = np.stack([fm.rotation(a, b, c) for a, b, c in zip(yaw, pitch, roll)])
    t = np.stack([base.t + np.array([x, y, 0.0]) for x, y in zip(dx, dy)])
    return scale, R, t


def _expressions(T: int, n_exp: int, amount: float, rng: np.random.Generator) -> np.ndarray:
    tt = np.arange(T)[:, None]
    freq = rng.uniform(0.003, 0.015, size=n_exp)
    phase = rng.uniform(0, 2 * np.pi, size=n_exp)
    return amount * 0.5 * (1 + np.sin(2 * np.pi * freq * tt + phase)) * rng.uniform(0.3, 1.0, size=n_exp)


def render_frame(subject: SubjectSpec, alpha_exp: np.ndarray, pose: Pose, bg: np.ndarray,
                 pulse: float, seed: int = 0) -> np.ndarray:
    """Splat the dense face over ``bg``; ``pulse`` is the relative skin modulation this frame."""
    dense, u, v = _dense(seed)
    size = bg.shape[0]
    shape = fm.pose_transform(fm.synthesize_shape(dense, ShapeParams(subject.alpha_id, alpha_exp)), pose)
    depth, owner = fm.zbuffer(fm.normalize_depth(shape), size, size, size)
    img = bg.copy()
    hit = owner != fm.NONE
    who = owner[hit]
    alb = _albedo(u[who], v[who], subject.skin)
    shade = 0.45 + 0.55 * depth[hit]
    mod = 1.0 + pulse * _skin_mask(u[who], v[who])[:, None] * PULSE_SIGNATURE[None, :]
    img[hit] = alb * shade[:, None] * mod
    return img


def _render_clip(subject, T, fps, size, motion, pulse_scale, rng, seed=0):
    n_exp = model_basis(seed).n_exp
    scale, R, t = _poses(T, size, motion, rng)
    expr = _expressions(T, n_exp, motion.expression, rng)
    bg = background(size, size, rng)
    phase = rng.uniform(0, 2 * np.pi)
    pulse = pulse_scale * subject.pulse_amplitude * np.sin(
        2 * np.pi * subject.heart_rate * np.arange(T) / fps + phase)
    frames = np.stack([render_frame(subject, expr[k], Pose(scale[k], R[k], t[k]), bg, pulse[k], seed)
                       for k in range(T)])
    return frames, expr, scale, R, t


def _camera(frames: np.ndarray, rng: np.random.Generator, sigma: float = 0.0005) -> np.ndarray:
    noisy = frames + rng.normal(0.0, sigma, size=frames.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def _gt_depths(clip_params, basis: FaceBasis, size: int) -> np.ndarray:
    alpha_id, expr, scale, R, t = clip_params
    out = np.empty((len(scale), fm.MAP_SIZE, fm.MAP_SIZE))
    for k in range(len(scale)):
        out[k] = fm.ground_truth_depth(basis, ShapeParams(alpha_id, expr[k]), Pose(scale[k], R[k], t[k]),
                                       size, size)
    return out


def subject_rppg(subject: SubjectSpec, T: int, fps: float, size: int, seed: int) -> rppg.RppgSpectrum:
    """Ground-truth spectrum from a motion-free rendering of the subject."""
    rng = np.random.default_rng([seed, subject.subject_id, 7])
    frames, expr, scale, R, t = _render_clip(subject, T, fps, size, MotionProfile.still(), 1.0, rng)
    frames = _camera(frames, rng)
    basis = model_basis()
    shapes = [fm.pose_transform(fm.synthesize_shape(basis, ShapeParams(subject.alpha_id, expr[k])),
                                Pose(scale[k], R[k], t[k])) for k in range(T)]
    return rppg.extract(frames, shapes, basis.forehead, fps)


def gen_live(subject: SubjectSpec, T: int = 150, fps: float = 30.0, size: int = 64, seed: int = 0,
             motion: MotionProfile | None = None, gt_rppg: np.ndarray | None = None) -> VideoClip:
    motion = motion or MotionProfile()
    rng = np.random.default_rng([seed, subject.subject_id, 1])
    frames, expr, scale, R, t = _render_clip(subject, T, fps, size, motion, 1.0, rng)
    frames = _camera(frames, rng)
    basis = model_basis()
    depth = _gt_depths((subject.alpha_id, expr, scale, R, t), basis, size)
    if gt_rppg is None:
        gt_rppg = subject_rppg(subject, T, fps, size, seed).f
    return VideoClip(frames, fps, "live", subject.subject_id, subject.alpha_id.copy(), expr, scale, R, t,
                     depth, np.asarray(gt_rppg, dtype=np.float64), subject.heart_rate, basis)


def _similarity_warp(img: np.ndarray, theta: float, sigma: float, shift: np.ndarray) -> np.ndarray:
    """Output pixel p samples img at sigma^-1 Rz(-theta) (p - c - shift) + c (bilinear, edge clamp)."""
    h, w = img.shape[:2]
    c = np.array([w / 2.0, h / 2.0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xx + 0.5 - c[0] - shift[0], yy + 0.5 - c[1] - shift[1]
    ct, st = np.cos(theta), np.sin(theta)
    sx = (ct * px + st * py) / sigma + c[0] - 0.5
    sy = (-st * px + ct * py) / sigma + c[1] - 0.5
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
            + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])


def _hand_motion(T: int, cues: SpoofCues, rng: np.random.Generator):
    tt = np.arange(T)
    f = rng.uniform(0.004, 0.015, size=4)
    ph = rng.uniform(0, 2 * np.pi, size=4)
    theta = np.deg2rad(cues.warp_deg) * np.sin(2 * np.pi * f[0] * tt + ph[0])
    sigma = 1.0 + 0.04 * np.sin(2 * np.pi * f[1] * tt + ph[1])
    shift = 2.0 * np.stack([np.sin(2 * np.pi * f[2] * tt + ph[2]), np.sin(2 * np.pi * f[3] * tt + ph[3])], 1)
    return theta, sigma, shift


def _compose_pose(size, s, R, t, theta, sigma, shift):
    c3 = np.array([size / 2.0, size / 2.0, 0.0])
    rz = fm.rotation(roll=theta)
    sh = np.array([shift[0], shift[1], 0.0])
    return sigma * s, rz @ R, sigma * rz @ (t - c3) + c3 + sh


def gen_spoof(subject: SubjectSpec, kind: str, T: int = 150, fps: float = 30.0, size: int = 64,
              seed: int = 0, cues: SpoofCues | None = None) -> VideoClip:
    if kind not in ("print", "replay"):
        raise ValueError(f"spoof kind must be 'print' or 'replay', got {kind!r}")
    cues = cues or SpoofCues()
    rng = np.random.default_rng([seed, subject.subject_id, 2 if kind == "print" else 3])
    if kind == "print":
        still = MotionProfile.still()
        src, expr, scale, R, t = _render_clip(subject, 1, fps, size, still, 0.0, rng)
        grain = 1.0 + cues.grain * rng.normal(0, 1, size=(size, size, 1))
        photo = (1 - cues.contrast) * 0.5 + cues.contrast * src[0] * grain
        src = np.broadcast_to(photo, (T,) + photo.shape)
        expr = np.repeat(expr, T, axis=0)
        scale, R, t = np.repeat(scale, T), np.repeat(R, T, axis=0), np.repeat(t, T, axis=0)
    else:
        low = MotionProfile(yaw_deg=6.0, pitch_deg=4.0, roll_deg=3.0, shift_px=1.0, expression=0.5)
        src, expr, scale, R, t = _render_clip(subject, T, fps, size, low, cues.replay_pulse, rng)
        yy, xx = np.mgrid[0:size, 0:size]
        ang = rng.uniform(0, np.pi)
        grating = np.sin(2 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) / cues.moire_period)
        tint = np.array([0.96, 1.0, 1.06])
        src = np.clip(src * tint + cues.moire * grating[None, :, :, None], 0.0, 1.0)
    theta, sigma, shift = _hand_motion(T, cues, rng)
    frames = np.empty((T, size, size, 3))
    poses_s, poses_R, poses_t = np.empty(T), np.empty((T, 3, 3)), np.empty((T, 3))
    for k in range(T):
        frames[k] = _similarity_warp(src[k], theta[k], sigma[k], shift[k])
        poses_s[k], poses_R[k], poses_t[k] = _compose_pose(size, scale[k], R[k], t[k], theta[k], sigma[k],
                                                           shift[k])
    frames = _camera(frames, rng)
    basis = model_basis()
    return VideoClip(frames, fps, kind, subject.subject_id, subject.alpha_id.copy(), expr, poses_s, poses_R,
                     poses_t, np.zeros((T, fm.MAP_SIZE, fm.MAP_SIZE)), np.zeros(rppg.N_BINS), None, basis)


def gen_subject_clips(subject: SubjectSpec, n_live: int, T: int, fps: float, size: int, seed: int,
                      cues: SpoofCues | None = None) -> list[VideoClip]:
    """``n_live`` live clips followed by ``n_live`` print and ``n_live`` replay clips."""
    f = subject_rppg(subject, T, fps, size, seed).f
    clips = [gen_live(subject, T, fps, size, seed * 1000 + k, gt_rppg=f) for k in range(n_live)]
    for kind in ("print", "replay"):
        clips += [gen_spoof(subject, kind, T, fps, size, seed * 1000 + k, cues) for k in range(n_live)]
    return clips


def gen_dataset(n_subjects: int, n_live: int, T: int = 150, fps: float = 30.0, size: int = 64,
                seed: int = 0, first_subject: int = 0, cues: SpoofCues | None = None) -> list[VideoClip]:
    clips = []
    for sid in range(first_subject, first_subject + n_subjects):
        clips += gen_subject_clips(random_subject(sid, seed), n_live, T, fps, size, seed, cues)
    return clips
