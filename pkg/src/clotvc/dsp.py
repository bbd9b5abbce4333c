"""Small STFT / mel-filterbank toolkit on numpy.

Centered framing with reflect padding, Hann windows, Slaney-style mel
filters.  Shapes follow the ``(bins, frames)`` convention.
"""

from functools import lru_cache

import numpy as np


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    """Slaney-normalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (mel_pts[2:n_mels + 2] - mel_pts[:n_mels])
    weights *= enorm[:, None]
    weights.setflags(write=False)
    return weights


def _window(win_length, n_fft):
    win = np.hanning(win_length + 1)[:-1]  # periodic Hann
    if win_length < n_fft:
        left = (n_fft - win_length) // 2
        win = np.pad(win, (left, n_fft - win_length - left))
    return win


def stft(x, n_fft, hop, win_length=None):
    win_length = win_length or n_fft
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    if len(x) <= pad:
        raise ValueError(f"signal of {len(x)} samples too short for centered STFT with n_fft={n_fft}")
    x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _window(win_length, n_fft)[None, :]
    return np.fft.rfft(frames, n=n_fft, axis=1).T


def istft(spec, hop, win_length=None, length=None):
    n_fft = 2 * (spec.shape[0] - 1)
    win_length = win_length or n_fft
    win = _window(win_length, n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win[None, :]
    n_frames = frames.shape[0]
    out_len = n_fft + hop * (n_frames - 1)
    y = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for t in range(n_frames):
        s = t * hop
        y[s:s + n_fft] += frames[t]
        wsum[s:s + n_fft] += win ** 2
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    y = y[n_fft // 2:]
    if length is None:
        length = hop * (n_frames - 1)
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return y[:length]


def griffin_lim(magnitude, hop, win_length=None, n_iter=60, length=None, seed=0):
    """Phase reconstruction with the fast Griffin-Lim momentum update."""
    n_fft = 2 * (magnitude.shape[0] - 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    rebuilt = np.zeros_like(angles)
    momentum = 0.99
    for _ in range(n_iter):
        tprev = rebuilt
        y = istft(magnitude * angles, hop, win_length, length=length)
        rebuilt = stft(y, n_fft, hop, win_length)[:, :magnitude.shape[1]]
        if rebuilt.shape[1] < magnitude.shape[1]:
            rebuilt = np.pad(rebuilt, ((0, 0), (0, magnitude.shape[1] - rebuilt.shape[1])))
        angles = rebuilt - (momentum / (1 + momentum)) * tprev
        angles /= np.abs(angles) + 1e-16
    return istft(magnitude * angles, hop, win_length, length=length)
