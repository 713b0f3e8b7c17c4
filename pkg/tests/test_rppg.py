import numpy as np
import pytest
from scipy import signal as sps

from auxfas import rppg, synthgen as sg
from auxfas.rppg import RgbTrace


def _subject(hr, amp=0.016, sid=0):
    base = sg.random_subject(sid, seed=5)
    return sg.SubjectSpec(sid, base.alpha_id, base.skin, amp, hr)


def _still_live(hr, T=150, seed=0):
    clip = sg.gen_live(_subject(hr), T=T, seed=seed, motion=sg.MotionProfile.still(),
                       gt_rppg=np.zeros(rppg.N_BINS))
    return clip


def _extract(clip):
    return rppg.extract(clip.frames, clip.posed_shapes(), clip.basis.forehead, clip.fps)


# -- tracking ---------------------------------------------------------------

def _square_shape(x0=10.0, y0=10.0, n=5):
    g = np.arange(n) + 0.5
    xx, yy = np.meshgrid(x0 + g, y0 + g)
    return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])


def test_track_uniform_frames():
    frames = np.broadcast_to(np.array([0.2, 0.5, 0.7]), (40, 32, 32, 3))
    shape = _square_shape()
    trace = rppg.track_region(frames, [shape] * 40, np.arange(shape.shape[1]), 30.0)
    assert np.allclose(trace.channels(), np.array([[0.2], [0.5], [0.7]]))


def test_track_outside_frame_names_frame():
    frames = np.zeros((3, 32, 32, 3))
    shape = _square_shape()
    shapes = [shape, shape, _square_shape(100, 100)]
    with pytest.raises(rppg.RppgError, match="frame 2"):
        rppg.track_region(frames, shapes, np.arange(shape.shape[1]), 30.0)


def test_track_reproduces_modulation():
    t = np.arange(120)
    mod = 0.4 + 0.05 * np.sin(2 * np.pi * 1.1 * t / 30)
    frames = np.tile(mod[:, None, None, None], (1, 32, 32, 3))
    frames[:, :5] = 0.9
    shape = _square_shape()
    tr = rppg.track_region(frames, [shape] * 120, np.arange(shape.shape[1]), 30.0)
    assert np.corrcoef(tr.g, mod)[0, 1] > 0.99


# -- normalization ----------------------------------------------------------

def test_skin_tone_normalize_examples():
    out = rppg.skin_tone_normalize(RgbTrace(np.array([2.0, 2.0]), np.array([1.0, 3.0]), np.array([0.5, 1.5]), 30))
    assert np.allclose(out.r, [1, 1]) and np.allclose(out.g, [0.5, 1.5])
    again = rppg.skin_tone_normalize(out)
    assert np.allclose(again.channels(), out.channels())
    scaled = rppg.skin_tone_normalize(RgbTrace(5 * np.array([2.0, 2.0]), 5 * np.array([1.0, 3.0]),
                                               5 * np.array([0.5, 1.5]), 30))
    assert np.allclose(scaled.channels(), out.channels())


def test_skin_tone_normalize_zero_mean():
    with pytest.raises(rppg.RppgError):
        rppg.skin_tone_normalize(RgbTrace(np.zeros(4), np.ones(4), np.ones(4), 30))


# -- bandpass ---------------------------------------------------------------

def _gain(freq, fps=30.0):
    _, h = sps.freqz(rppg.design_bandpass(fps), worN=[freq], fs=fps)
    return float(np.abs(h[0]))


def test_bandpass_dc_rejection():
    out = rppg.bandpass(np.full(200, 3.7), 30.0)
    assert np.max(np.abs(out)) < 1e-6


@pytest.mark.parametrize("freq, lo, hi", [(1.2, 0.9, 1.1), (6.0, 0.0, 0.1)])
def test_bandpass_amplitude_matches_frequency_response(freq, lo, hi):
    t = np.arange(600) / 30.0
    out = rppg.bandpass(np.sin(2 * np.pi * freq * t), 30.0)
    amp = np.max(np.abs(out[100:-100]))
    assert lo <= amp <= hi
    assert amp == pytest.approx(_gain(freq), abs=0.01)


def test_bandpass_is_zero_phase():
    t = np.arange(600) / 30.0
    x = np.sin(2 * np.pi * 1.5 * t)
    out = rppg.bandpass(x, 30.0)
    mid = slice(100, -100)
    assert np.corrcoef(out[mid], x[mid])[0, 1] > 0.999


def test_bandpass_preconditions():
    with pytest.raises(rppg.RppgError):
        rppg.bandpass(np.zeros(100), 6.0)
    with pytest.raises(rppg.RppgError):
        rppg.bandpass(np.zeros(20), 30.0)


# -- chrominance ------------------------------------------------------------

def test_chrom_algebra_examples():
    chrom, p = rppg.chrom_combine([1, -1], [0, 0], [0, 0])
    assert np.allclose(chrom.x_f, [3, -3]) and np.allclose(chrom.y_f, [1.5, -1.5])
    assert chrom.gamma == pytest.approx(2.0) and np.allclose(p, 0)
    chrom, p = rppg.chrom_combine([1, -1], [1, -1], [1, -1])
    assert chrom.gamma == pytest.approx(1.0) and np.allclose(p, 0)


def test_chrom_gamma_zero_limit():
    # x_f = 0 forces gamma = 0
    r = np.array([2.0, -2.0, 1.0])
    g = 1.5 * r
    b = np.array([0.3, 0.1, -0.4])
    chrom, p = rppg.chrom_combine(r, g, b)
    assert chrom.gamma == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(p, 3 * r - 2 * g)


def test_chrom_degenerate_warns():
    with pytest.warns(RuntimeWarning):
        chrom, p = rppg.chrom_combine(np.zeros(5), np.zeros(5), np.zeros(5))
    assert chrom.degenerate and chrom.gamma == 1.0 and np.all(p == 0)


# -- spectrum ---------------------------------------------------------------

def test_spectrum_zero():
    s = rppg.spectrum(np.zeros(150), 30.0)
    assert np.all(s.f == 0)


def test_spectrum_six_cycles_matches_dft_oracle():
    n = 150
    p = np.sin(2 * np.pi * 6 * np.arange(n) / n)
    s = rppg.spectrum(p, 30.0)
    assert s.peak_bin == 6
    assert np.linalg.norm(s.f) == pytest.approx(1.0, abs=1e-12)
    q = np.interp(np.arange(128) * n / 128, np.arange(n), p)
    k = np.arange(1, 51)[:, None]
    dft = np.abs(np.exp(-2j * np.pi * k * np.arange(128)[None, :] / 128) @ q)
    assert np.allclose(s.f, dft / np.linalg.norm(dft), atol=1e-12)


def test_spectrum_scale_invariant():
    p = np.random.default_rng(0).normal(size=150)
    assert np.allclose(rppg.spectrum(p, 30).f, rppg.spectrum(7.5 * p, 30).f)


# -- end to end -------------------------------------------------------------

def test_extract_72_bpm():
    clip = _still_live(1.2, T=300)
    s = _extract(clip)
    assert abs(s.peak_bin - rppg.bin_of(1.2, 300, 30.0)) <= 1
    assert np.linalg.norm(s.f) == pytest.approx(1.0)


@pytest.mark.parametrize("hr", [0.8, 1.55, 2.3, 3.0])
def test_extract_peak_tracks_heart_rate(hr):
    s = _extract(_still_live(hr))
    assert abs(s.peak_bin - rppg.bin_of(hr, 150, 30.0)) <= 1


def test_print_spoof_has_little_pulse_energy():
    subject = _subject(1.3)
    live = sg.gen_live(subject, seed=1, motion=sg.MotionProfile.still(), gt_rppg=np.zeros(50))
    spoof = sg.gen_spoof(subject, "print", seed=1)
    assert _extract(spoof).raw_norm < 0.05 * _extract(live).raw_norm


def test_extract_brightness_invariant():
    clip = _still_live(1.4)
    a = _extract(clip)
    b = rppg.extract(0.6 * clip.frames.astype(np.float64), clip.posed_shapes(), clip.basis.forehead, 30.0)
    assert np.allclose(a.f, b.f, atol=1e-9)


def test_same_pulse_different_pose_tracks_correlate():
    subject = _subject(1.7, amp=0.02)
    a = sg.gen_live(subject, seed=11, gt_rppg=np.zeros(50))
    b = sg.gen_live(subject, seed=12, gt_rppg=np.zeros(50))
    assert np.corrcoef(_extract(a).f, _extract(b).f)[0, 1] > 0.9
