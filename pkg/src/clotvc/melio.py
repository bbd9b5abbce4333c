"""Audio ingestion, log-mel features, normalisation, crops/masks and the mel cache."""

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import dsp

logger = logging.getLogger(__name__)

N_MELS = 80
# train / val / test sizes of a full speaker corpus
SPLIT_SIZES = (81, 35, 25)
STD_EPS = 1e-5


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop_size: int = 256
    win_size: int = 1024
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = 11025.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels != N_MELS:
            raise ValueError(f"n_mels must be {N_MELS}, got {self.n_mels}")
        if not (0 < self.hop_size <= self.win_size <= self.fft_size):
            raise ValueError("require 0 < hop_size <= win_size <= fft_size")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("require 0 <= fmin < fmax <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def floor_value(self):
        return math.log(self.log_floor)

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or len(self.samples) < 1:
            raise EmptyInputError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class MelStats:
    mean: np.ndarray
    std: np.ndarray
    scope: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_MELS,) or self.std.shape != (N_MELS,):
            raise ValueError("stats vectors must have length 80")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "scope": self.scope}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), d.get("scope", ""))


@dataclass
class MelSpectrogram:
    """80 x T log-mel matrix.

    ``norm`` is set when the values are z-normalised; the log-floor bound only
    applies to raw spectrograms.
    """

    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)
    speaker_id: str = ""
    norm: MelStats | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise ValueError(f"mel must be 80 x T, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel contains non-finite entries")
        if self.norm is None and np.any(self.values < self.config.floor_value - 1e-6):
            raise ValueError("mel entries below log(log_floor)")

    @property
    def n_frames(self):
        return self.values.shape[1]

    @property
    def pad_column(self):
        """Per-band value that represents silence in this spectrogram's scale."""
        col = np.full(N_MELS, self.config.floor_value)
        if self.norm is not None:
            col = (col - self.norm.mean) / self.norm.std
        return col


@dataclass
class FifMask:
    mask: np.ndarray
    masked_span: tuple

    @property
    def span_length(self):
        return self.masked_span[1] - self.masked_span[0]


@dataclass
class SpeakerCorpus:
    speaker_id: str
    train: list
    val: list
    test: list

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# --------------------------------------------------------------------------
# waveform / mel
# --------------------------------------------------------------------------

def load_waveform(path, target_rate=22050):
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path} contains no samples")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        frac = Fraction(target_rate, rate)
        x = resample_poly(x, frac.numerator, frac.denominator)
        n_out = int(round(len(data) * target_rate / rate))
        x = x[:n_out]
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return Waveform(x, target_rate)


def save_waveform(w, path):
    x = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(Path(path), w.sample_rate, (x * 32767.0).astype(np.int16))


def mel_transform(w, cfg=MelConfig(), speaker_id=""):
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} != mel config rate {cfg.sample_rate}")
    if len(w.samples) < cfg.win_size:
        raise ValueError(f"waveform of {len(w.samples)} samples shorter than one window ({cfg.win_size})")
    spec = np.abs(dsp.stft(w.samples, cfg.fft_size, cfg.hop_size, cfg.win_size))
    basis = dsp.mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax)
    mel = np.log(np.maximum(basis @ spec, cfg.log_floor))
    return MelSpectrogram(mel, cfg, speaker_id)


def expected_frames(n_samples, hop_size):
    return 1 + n_samples // hop_size


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------

def fit_stats(corpus, eps=STD_EPS):
    mels = corpus.train
    if not mels:
        raise EmptyInputError("cannot fit stats on an empty train split")
    frames = np.concatenate([np.asarray(m.values, dtype=np.float64) for m in mels], axis=1)
    mean = frames.mean(axis=1)
    std = frames.std(axis=1)
    if np.any(std < eps):
        warnings.warn(f"{int(np.sum(std < eps))} zero-variance mel bands; std clamped to {eps}")
        std = np.maximum(std, eps)
    return MelStats(mean, std, corpus.speaker_id)


def apply_norm(m, s):
    vals = (np.asarray(m.values, dtype=np.float64) - s.mean[:, None]) / s.std[:, None]
    return MelSpectrogram(vals, m.config, m.speaker_id, norm=s)


def inverse_norm(m, s=None):
    s = s or m.norm
    if s is None:
        raise ValueError("spectrogram is not normalised and no stats were given")
    vals = np.asarray(m.values, dtype=np.float64) * s.std[:, None] + s.mean[:, None]
    return MelSpectrogram(vals, m.config, m.speaker_id)


# --------------------------------------------------------------------------
# crops and fill-in-frames masks
# --------------------------------------------------------------------------

def sample_crop(m, width=64, rng=None):
    rng = rng if rng is not None else np.random.default_rng()
    vals = np.asarray(m.values, dtype=np.float64)
    T = vals.shape[1]
    if T < width:
        pad = np.repeat(m.pad_column[:, None], width - T, axis=1)
        return np.concatenate([vals, pad], axis=1)
    start = int(rng.integers(0, T - width + 1))
    return vals[:, start:start + width].copy()


def sample_fif_mask(width=64, max_mask_frames=16, rng=None):
    if not 0 <= max_mask_frames <= width:
        raise ValueError("require 0 <= max_mask_frames <= width")
    rng = rng if rng is not None else np.random.default_rng()
    span = int(rng.integers(0, max_mask_frames + 1))
    start = int(rng.integers(0, width - span + 1))
    mask = np.ones((N_MELS, width))
    mask[:, start:start + span] = 0.0
    return FifMask(mask, (start, start + span))


def make_gen_input(crop, mask):
    crop = np.asarray(crop, dtype=np.float64)
    mvals = mask.mask if isinstance(mask, FifMask) else np.asarray(mask, dtype=np.float64)
    if crop.shape != mvals.shape:
        raise ValueError(f"crop {crop.shape} and mask {mvals.shape} shapes differ")
    return np.stack([crop * mvals, mvals])


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def split_sizes(n):
    """Train/val/test sizes: 81/35/25 for 141+ items, else proportional.

    Train and test sizes are rounded from the full-corpus ratios; val takes
    the remainder.
    """
    total = sum(SPLIT_SIZES)
    if n >= total:
        return SPLIT_SIZES
    n_train = int(math.floor(n * SPLIT_SIZES[0] / total + 0.5))
    n_test = int(math.floor(n * SPLIT_SIZES[2] / total + 0.5))
    n_val = max(n - n_train - n_test, 0)
    return n_train, n_val, n - n_train - n_val


def split_corpus(utterances, seed=0, speaker_id=""):
    items = list(utterances)
    if not items:
        raise EmptyInputError("cannot split an empty utterance list")
    n_train, n_val, n_test = split_sizes(len(items))
    order = np.random.default_rng(seed).permutation(len(items))
    picked = [items[i] for i in order]
    train = picked[:n_train]
    val = picked[n_train:n_train + n_val]
    test = picked[n_train + n_val:n_train + n_val + n_test]
    # anything beyond the full 141-item split stays in train
    train += picked[n_train + n_val + n_test:]
    return SpeakerCorpus(speaker_id, train, val, test)


# --------------------------------------------------------------------------
# on-disk cache
# --------------------------------------------------------------------------

def write_cache(mel, cache_root, utt_id):
    d = Path(cache_root) / mel.speaker_id
    d.mkdir(parents=True, exist_ok=True)
    vals = np.ascontiguousarray(mel.values, dtype="<f4")
    (d / f"{utt_id}.melbin").write_bytes(vals.tobytes(order="C"))
    meta = {
        "shape": list(vals.shape),
        "dtype": "f32",
        "config_hash": mel.config.config_hash(),
        "speaker": mel.speaker_id,
        "utt": utt_id,
    }
    (d / f"{utt_id}.meta").write_text(json.dumps(meta, indent=1))


def read_meta(cache_root, speaker_id, utt_id):
    return json.loads((Path(cache_root) / speaker_id / f"{utt_id}.meta").read_text())


def read_cache(cache_root, speaker_id, utt_id, cfg=MelConfig()):
    meta = read_meta(cache_root, speaker_id, utt_id)
    if meta["config_hash"] != cfg.config_hash():
        raise ValueError(f"cache entry {speaker_id}/{utt_id} built with a different mel config")
    raw = (Path(cache_root) / speaker_id / f"{utt_id}.melbin").read_bytes()
    vals = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float64)
    return MelSpectrogram(vals, cfg, speaker_id)


def discover_corpus(corpus_root):
    """Map speaker id -> sorted list of wav paths for ``<root>/<speaker>/*.wav``."""
    root = Path(corpus_root)
    out = {}
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = sorted(spk_dir.glob("*.wav"))
        if wavs:
            out[spk_dir.name] = wavs
    return out


MANIFEST_NAME = "manifest.json"


def prepare_corpus(corpus_root, cache_root, cfg=MelConfig(), seed=0, speakers=None):
    """Build the mel cache, per-speaker stats and split manifest.

    Returns ``(manifest, n_computed)``.  Utterances whose cache entry already
    carries the current config hash are not recomputed.
    """
    corpus = discover_corpus(corpus_root)
    if speakers:
        corpus = {s: corpus[s] for s in speakers if s in corpus}
    if not corpus:
        raise EmptyInputError(f"no <speaker>/*.wav files under {corpus_root}")
    cache_root = Path(cache_root)
    chash = cfg.config_hash()
    manifest = {"config_hash": chash, "seed": seed, "mel_config": asdict(cfg), "speakers": {}}
    n_computed = 0
    for spk, wavs in corpus.items():
        utt_ids = [p.stem for p in wavs]
        for path, utt in zip(wavs, utt_ids):
            meta_path = cache_root / spk / f"{utt}.meta"
            if meta_path.exists():
                try:
                    if json.loads(meta_path.read_text()).get("config_hash") == chash:
                        continue
                except json.JSONDecodeError:
                    pass
            mel = mel_transform(load_waveform(path, cfg.sample_rate), cfg, spk)
            write_cache(mel, cache_root, utt)
            n_computed += 1
        sc = split_corpus(utt_ids, seed=seed, speaker_id=spk)
        train_mels = SpeakerCorpus(spk, [read_cache(cache_root, spk, u, cfg) for u in sc.train], [], [])
        stats = fit_stats(train_mels)
        manifest["speakers"][spk] = {
            "train": sc.train, "val": sc.val, "test": sc.test,
            "stats": stats.to_dict(),
        }
    (cache_root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    logger.info("prepared %d speakers, %d utterances recomputed", len(corpus), n_computed)
    return manifest, n_computed


def load_manifest(cache_root):
    path = Path(cache_root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}; run `clotvc prepare` first")
    return json.loads(path.read_text())


def load_split(cache_root, manifest, speaker_id, split="train", cfg=None, normalize=True):
    """Load cached mels of one split, z-normalised with the speaker's train stats."""
    cfg = cfg or MelConfig(**manifest["mel_config"])
    entry = manifest["speakers"][speaker_id]
    stats = MelStats.from_dict(entry["stats"])
    mels = [read_cache(cache_root, speaker_id, u, cfg) for u in entry[split]]
    if normalize:
        mels = [apply_norm(m, stats) for m in mels]
    return mels, stats
