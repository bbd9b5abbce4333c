"""Utterance conversion: windowed generator passes over a mel plus mel -> waveform."""

import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import dsp, melio

WINDOW = 64
HOP = 32
VOCODER_MODES = ("external_melgan", "griffin_lim")


class VocoderUnavailableError(RuntimeError):
    pass


class GriffinLimVocoder:
    """Approximate inverse mel projection followed by Griffin-Lim phase reconstruction."""

    def __init__(self, cfg=melio.MelConfig(), n_iter=60):
        self.cfg = cfg
        self.n_iter = n_iter

    def __call__(self, mel_values):
        cfg = self.cfg
        basis = dsp.mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax)
        mel_mag = np.exp(np.asarray(mel_values, dtype=np.float64))
        mag = np.maximum(np.linalg.pinv(basis) @ mel_mag, 0.0)
        length = cfg.hop_size * (mel_mag.shape[1] - 1)
        y = dsp.griffin_lim(mag, cfg.hop_size, cfg.win_size, n_iter=self.n_iter, length=length)
        return melio.Waveform(y, cfg.sample_rate)


class ExternalVocoder:
    """Runs a pretrained vocoder as a subprocess.

    ``command`` is a template containing ``{mel}`` (an ``.npy`` file with the
    80 x T natural-log mel) and ``{wav}`` (output path), e.g.
    ``"python melgan_infer.py --mel {mel} --out {wav}"``.
    """

    def __init__(self, command, cfg=melio.MelConfig()):
        if not command:
            raise VocoderUnavailableError(
                "external_melgan vocoder selected but no vocoder command is configured; "
                "set vocoder_command or pass --vocoder griffin_lim to use the built-in fallback")
        exe = shlex.split(command)[0]
        from shutil import which

        if which(exe) is None and not Path(exe).exists():
            raise VocoderUnavailableError(
                f"external vocoder executable {exe!r} not found; pass --vocoder griffin_lim to use the fallback")
        self.command = command
        self.cfg = cfg

    def __call__(self, mel_values):
        with tempfile.TemporaryDirectory() as tmp:
            mel_path = Path(tmp) / "mel.npy"
            wav_path = Path(tmp) / "out.wav"
            np.save(mel_path, np.asarray(mel_values, dtype=np.float32))
            cmd = [part.format(mel=mel_path, wav=wav_path) for part in shlex.split(self.command)]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0 or not wav_path.exists():
                raise VocoderUnavailableError(f"external vocoder failed: {proc.stderr.strip()[-500:]}")
            return melio.load_waveform(wav_path, self.cfg.sample_rate)


def make_vocoder(mode, cfg=melio.MelConfig(), command=None, n_iter=60):
    if mode == "griffin_lim":
        return GriffinLimVocoder(cfg, n_iter)
    if mode == "external_melgan":
        return ExternalVocoder(command, cfg)
    raise ValueError(f"vocoder mode must be one of {VOCODER_MODES}")


def _window_starts(T, window=WINDOW, hop=HOP):
    if T <= window:
        return [0]
    starts = list(range(0, T - window + 1, hop))
    if starts[-1] != T - window:
        starts.append(T - window)
    return starts


def _fade_weights(window=WINDOW, hop=HOP):
    # triangular cross-fade; strictly positive so every frame has weight
    ramp = np.minimum(np.arange(1, window + 1), np.arange(window, 0, -1)).astype(np.float64)
    return np.minimum(ramp / hop, 1.0)


@torch.no_grad()
def convert_mel(generator, mel_values, pad_column, window=WINDOW, hop=HOP):
    """Run the generator over 64-frame windows with 50% overlap and linear cross-fade.

    ``mel_values`` is a normalised 80 x T matrix; returns the converted 80 x T.
    """
    X = np.asarray(mel_values, dtype=np.float64)
    T = X.shape[1]
    if T < window:
        X = np.concatenate([X, np.repeat(np.asarray(pad_column)[:, None], window - T, axis=1)], axis=1)
    starts = _window_starts(X.shape[1], window, hop)
    dtype = next(generator.parameters()).dtype
    batch = np.stack([X[:, s:s + window] for s in starts])[:, None]
    inp = torch.as_tensor(batch, dtype=dtype)
    inp = torch.cat([inp, torch.ones_like(inp)], dim=1)
    was_training = generator.training
    generator.eval()
    try:
        out = generator(inp)[:, 0].double().numpy()
    finally:
        generator.train(was_training)
    w = _fade_weights(window, hop)
    acc = np.zeros_like(X)
    wsum = np.zeros(X.shape[1])
    for s, y in zip(starts, out):
        acc[:, s:s + window] += y * w[None, :]
        wsum[s:s + window] += w
    return (acc / wsum[None, :])[:, :T]


def convert_waveform(generator, w, src_stats, tgt_stats, vocoder, cfg=melio.MelConfig()):
    """Waveform -> mel -> normalise -> generator -> denormalise -> vocoder.

    Returns ``(converted waveform, converted raw log-mel)``.
    """
    mel = melio.mel_transform(w, cfg)
    norm = melio.apply_norm(mel, src_stats)
    out = convert_mel(generator, norm.values, norm.pad_column)
    raw = out * tgt_stats.std[:, None] + tgt_stats.mean[:, None]
    raw = np.maximum(raw, cfg.floor_value)
    return vocoder(raw), raw
