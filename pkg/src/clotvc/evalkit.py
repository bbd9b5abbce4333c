"""Objective evaluation: mel-cepstral distortion, modulation-spectra distance, Grad-CAM.

Mel-cepstra come from the log-magnitude spectrum resampled on an all-pass
warped frequency axis, so a gain change only moves the 0th (energy)
coefficient, which is dropped.
"""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from . import dsp, kernels

logger = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0)
PAIRINGS = ("M-M", "F-F", "M-F", "F-M")
MCEP_ORDER = 34

# frequency-warping constants commonly used for mel-cepstral analysis
_ALPHAS = {8000: 0.31, 11025: 0.357, 16000: 0.42, 22050: 0.455, 24000: 0.466, 32000: 0.504,
           44100: 0.544, 48000: 0.554}


def warp_alpha(sample_rate):
    if sample_rate in _ALPHAS:
        return _ALPHAS[sample_rate]
    rates = sorted(_ALPHAS)
    return float(np.interp(sample_rate, rates, [_ALPHAS[r] for r in rates]))


@dataclass
class McepSequence:
    frames: np.ndarray  # T x D, energy excluded
    frame_rate: float
    energy: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("mel-cepstra must be a T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel-cepstra contain non-finite values")

    def __len__(self):
        return self.frames.shape[0]


def extract_mcep(w, order=MCEP_ORDER, frame_ms=5.0, fft_size=1024, alpha=None):
    """Mel-cepstra (coefficients 1..order) at ``frame_ms`` hop."""
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < fft_size:
        raise ValueError(f"audio of {len(x)} samples is shorter than the analysis window ({fft_size})")
    hop = int(round(w.sample_rate * frame_ms / 1000.0))
    alpha = warp_alpha(w.sample_rate) if alpha is None else alpha
    spec = np.abs(dsp.stft(x, fft_size, hop))  # (bins, T)
    n_bins = spec.shape[0]
    log_mag = np.log(np.maximum(spec, 1e-150))
    # sample the log spectrum at frequencies whose warped value is uniform
    theta = np.linspace(0.0, np.pi, n_bins)
    omega = theta - 2.0 * np.arctan(alpha * np.sin(theta) / (1.0 + alpha * np.cos(theta)))
    grid = np.linspace(0.0, np.pi, n_bins)
    warped = np.empty_like(log_mag)
    for t in range(log_mag.shape[1]):
        warped[:, t] = np.interp(omega, grid, log_mag[:, t])
    ceps = np.fft.irfft(warped, axis=0)[: order + 1].T  # (T, order + 1)
    return McepSequence(ceps[:, 1:], w.sample_rate / hop, energy=ceps[:, 0].copy())


def frame_distances(a, b):
    """Euclidean distance between every frame pair, ``(len(a), len(b))``."""
    return cdist(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def dtw_align(a, b):
    """Optimal monotone alignment; returns ``(total_cost, path)``."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot align empty sequences")
    return kernels.dtw(frame_distances(a, b))


def mcd(ref, conv):
    ref_f = ref.frames if isinstance(ref, McepSequence) else np.asarray(ref, dtype=np.float64)
    conv_f = conv.frames if isinstance(conv, McepSequence) else np.asarray(conv, dtype=np.float64)
    if len(ref_f) == 0 or len(conv_f) == 0:
        raise ValueError("mcd needs non-empty sequences")
    if ref_f.shape[1] != conv_f.shape[1]:
        raise ValueError("coefficient dimensions differ")
    _, path = dtw_align(ref_f, conv_f)
    diff = ref_f[path[:, 0]] - conv_f[path[:, 1]]
    per_frame = MCD_CONST * np.sqrt(2.0 * np.sum(diff ** 2, axis=1))
    return float(np.mean(per_frame))


def _segment_starts(T, seg):
    """Segment starts with 50% nominal overlap, placed symmetrically in [0, T - seg]."""
    span = T - seg
    if span <= 0:
        return [0]
    n = int(math.ceil(span / (seg // 2))) + 1
    starts = [(k * span) // (n - 1) for k in range(n)]
    for k in range(n // 2):
        starts[n - 1 - k] = span - starts[k]
    return starts


def modulation_spectrum(frames, seg=64):
    """Log of the segment-averaged magnitude spectrum of each coefficient trajectory.

    Returns ``(D, seg // 2 + 1)``.
    """
    X = np.asarray(frames, dtype=np.float64)
    T = X.shape[0]
    if T < seg:
        warnings.warn(f"trajectory of {T} frames shorter than segment {seg}; zero-padding")
        X = np.pad(X, ((0, seg - T), (0, 0)))
        T = seg
    win = np.hanning(seg)
    mags = [np.abs(np.fft.rfft(X[s:s + seg] * win[:, None], axis=0)) for s in _segment_starts(T, seg)]
    return np.log(np.mean(mags, axis=0) + 1e-10).T


def msd(ref, conv, seg=64):
    ref_f = ref.frames if isinstance(ref, McepSequence) else np.asarray(ref, dtype=np.float64)
    conv_f = conv.frames if isinstance(conv, McepSequence) else np.asarray(conv, dtype=np.float64)
    if len(ref_f) == 0 or len(conv_f) == 0:
        raise ValueError("msd needs non-empty sequences")
    a, b = modulation_spectrum(ref_f, seg), modulation_spectrum(conv_f, seg)
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


# --------------------------------------------------------------------------
# Grad-CAM
# --------------------------------------------------------------------------

@dataclass
class GradCamMap:
    heatmap: np.ndarray
    target_arch: str
    layer: str = ""


LAYERS = {
    "dcnn": ("down4", "down3", "down2", "down1"),
    "vit": ("tokens",),
    "conformer": ("last", "frontend"),
}


def _target_module(disc, arch_kind, layer):
    if arch_kind == "dcnn":
        return getattr(disc, layer)
    if arch_kind == "vit":
        return disc.norm
    if arch_kind == "conformer":
        return disc.frontend if layer == "frontend" else disc.blocks[-1].conv.dw
    raise ValueError(f"unknown arch kind {arch_kind!r}")


def cam_from(activations, grads, out_shape=(80, 64)):
    """Grad-CAM from ``(C, h, w)`` activations and matching gradients.

    Channel weights are spatially averaged gradients; the rectified weighted
    sum is bilinearly upsampled and divided by its maximum (all-zero maps
    stay zero).
    """
    A = torch.as_tensor(activations, dtype=torch.float64)
    G = torch.as_tensor(grads, dtype=torch.float64)
    weights = G.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * A).sum(0))
    cam = F.interpolate(cam[None, None], size=out_shape, mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp_min(0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.numpy()


def gradcam(disc, arch_kind, mel, layer_selector=None):
    """Heatmap of the input regions driving the discriminator's mean realness."""
    if arch_kind not in LAYERS:
        raise ValueError(f"unknown arch kind {arch_kind!r}")
    layer = layer_selector or LAYERS[arch_kind][0]
    if layer not in LAYERS[arch_kind]:
        raise ValueError(f"layer {layer!r} not available for {arch_kind}; choose from {LAYERS[arch_kind]}")
    mel = torch.as_tensor(mel, dtype=next(disc.parameters()).dtype)
    if mel.dim() == 2:
        mel = mel[None, None]
    elif mel.dim() == 3:
        mel = mel[None]
    store = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        store["act"] = out

    handle = _target_module(disc, arch_kind, layer).register_forward_hook(hook)
    was_training = disc.training
    disc.eval()
    try:
        disc.zero_grad(set_to_none=True)
        mel = mel.detach().requires_grad_(True)
        out = disc(mel)
        out.realness.mean().backward()
    finally:
        handle.remove()
        disc.train(was_training)
    act = store["act"].detach()[0]
    grad = store["act"].grad
    grad = torch.zeros_like(act) if grad is None else grad.detach()[0]
    if arch_kind == "vit":
        gh, gw = disc.grid
        act = act[1:].T.reshape(-1, gh, gw)
        grad = grad[1:].T.reshape(-1, gh, gw)
    elif arch_kind == "conformer" and layer == "last":
        act, grad = act[:, None, :], grad[:, None, :]  # time-only map
    return GradCamMap(cam_from(act, grad), arch_kind, layer)


def save_gradcam(cam, path_prefix):
    """Write ``<prefix>.npy`` (raw matrix) and ``<prefix>.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.save(prefix.with_suffix(".npy"), cam.heatmap)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(cam.heatmap, origin="lower", aspect="auto", cmap="jet", vmin=0, vmax=1)
    ax.set_title(f"Grad-CAM {cam.target_arch} ({cam.layer})")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    fig.tight_layout()
    fig.savefig(prefix.with_suffix(".png"))
    plt.close(fig)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    pairing: str
    dataset: str = ""
    utt_ids: list = field(default_factory=list)
    mcd_values: list = field(default_factory=list)
    msd_values: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)

    def __post_init__(self):
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}")

    @property
    def mcd_mean(self):
        return float(np.mean(self.mcd_values)) if self.mcd_values else float("nan")

    @property
    def msd_mean(self):
        return float(np.mean(self.msd_values)) if self.msd_values else float("nan")

    def add(self, utt_id, mcd_value, msd_value, pseudo=False):
        self.utt_ids.append(utt_id)
        self.mcd_values.append(float(mcd_value))
        self.msd_values.append(float(msd_value))
        self.pseudo.append(bool(pseudo))

    def to_dict(self):
        d = asdict(self)
        d["mcd_mean"] = self.mcd_mean
        d["msd_mean"] = self.msd_mean
        return d


@dataclass
class EvalPair:
    pairing: str
    utt_id: str
    reference: object  # Waveform
    converted: object  # Waveform
    pseudo: bool = False


def evaluate_pairs(pairs, dataset="", reports=None):
    """Score converted/reference waveform pairs into one report per pairing."""
    reports = reports or {p: MetricReport(p, dataset) for p in PAIRINGS}
    for pair in sorted(pairs, key=lambda p: (p.pairing, p.utt_id)):
        ref = extract_mcep(pair.reference)
        conv = extract_mcep(pair.converted)
        reports[pair.pairing].add(pair.utt_id, mcd(ref, conv), msd(ref, conv), pair.pseudo)
    return [reports[p] for p in PAIRINGS]


REPORT_NOTE = ("Mel-cepstra: order 34 (energy excluded), 5 ms frames, all-pass warped log spectrum; "
               "MCD after DTW alignment; MSD on 64-frame segments. Extraction settings differ from "
               "published toolchains, so absolute values are only approximately comparable.")


def format_table(reports, model_name="model"):
    by = {r.pairing: r for r in reports}

    def cell(r, attr):
        if r is None or not r.mcd_values:
            return "-"
        v = getattr(r, attr)
        star = "*" if any(r.pseudo) else ""
        return f"{v:.2f}{star}"

    lines = [f"# {REPORT_NOTE}", "# '*' marks pairings scored against pseudo (non-parallel) references",
             f"{'Metric':<8}{'Model':<16}" + "".join(f"{p:>8}" for p in PAIRINGS)]
    for label, attr in (("MCD", "mcd_mean"), ("MSD", "msd_mean")):
        lines.append(f"{label:<8}{model_name:<16}" + "".join(f"{cell(by.get(p), attr):>8}" for p in PAIRINGS))
    return "\n".join(lines) + "\n"


def write_reports(reports, out_dir, model_name="model"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_table(reports, model_name))
    payload = {"note": REPORT_NOTE, "model": model_name, "reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(payload, indent=1))
    return out / "report.txt", out / "report.json"
