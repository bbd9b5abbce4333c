"""Command-line entry points: prepare, train, convert, evaluate, inspect."""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import convert, evalkit, melio, otcore, trainer
from .config import ConfigError, digest, from_dict
from .melio import MelConfig
from .nets import NetsConfig
from .otcore import SinkhornConfig
from .trainer import TrainConfig

logger = logging.getLogger("clotvc")

CACHE_ENV = "CLOTVC_CACHE"


@dataclass(frozen=True)
class PathsConfig:
    corpus_root: str = "corpus"
    cache: str = "cache"
    checkpoints: str = "runs/checkpoints"
    reports: str = "runs/reports"


@dataclass(frozen=True)
class EvalConfig:
    dataset: str = ""
    # speaker id -> "M" or "F"
    genders: dict = field(default_factory=dict, hash=False)
    mcep_order: int = evalkit.MCEP_ORDER
    frame_ms: float = 5.0
    msd_segment: int = 64


@dataclass(frozen=True)
class RunConfig:
    melio: MelConfig = MelConfig()
    nets: NetsConfig = NetsConfig()
    otcore: SinkhornConfig = SinkhornConfig()
    trainer: TrainConfig = TrainConfig()
    evalkit: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()
    speakers: tuple = ()
    seed: int = 0
    vocoder: str = "griffin_lim"
    vocoder_command: str = ""
    griffin_lim_iters: int = 60

    def __post_init__(self):
        object.__setattr__(self, "speakers", tuple(self.speakers))
        if self.vocoder not in convert.VOCODER_MODES:
            raise ValueError(f"vocoder must be one of {convert.VOCODER_MODES}")
        if self.speakers and len(self.speakers) != 2:
            raise ValueError("speakers must name exactly two speakers (source x, target y)")
        for spk, g in self.evalkit.genders.items():
            if g not in ("M", "F"):
                raise ValueError(f"gender of {spk} must be 'M' or 'F'")

    def train_config(self):
        return replace(self.trainer, seed=self.seed, sinkhorn=self.otcore)

    def config_hash(self):
        return digest(asdict(self))

    def resume_hash(self):
        # extending the epoch budget or moving directories keeps a run resumable
        d = asdict(self)
        d.pop("paths")
        d["trainer"].pop("epochs")
        return digest(d)


def load_run_config(path=None, overrides=None):
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(data.get("trainer"), dict) and "sinkhorn" in data["trainer"]:
        raise ConfigError("trainer.sinkhorn is not allowed; set Sinkhorn options in the 'otcore' section")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    cfg = from_dict(RunConfig, data)
    if os.environ.get(CACHE_ENV):
        cfg = replace(cfg, paths=replace(cfg.paths, cache=os.environ[CACHE_ENV]))
    return cfg


def _lock(directory):
    from filelock import FileLock

    Path(directory).mkdir(parents=True, exist_ok=True)
    return FileLock(str(Path(directory) / ".lock"), timeout=0)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_prepare(cfg, corpus_root=None):
    root = Path(corpus_root or cfg.paths.corpus_root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    manifest, n = melio.prepare_corpus(root, cfg.paths.cache, cfg.melio, seed=cfg.seed,
                                       speakers=cfg.speakers or None)
    summary = {"cache": str(cfg.paths.cache), "config_hash": manifest["config_hash"], "recomputed": n,
               "speakers": {s: {k: len(v[k]) for k in ("train", "val", "test")}
                            for s, v in manifest["speakers"].items()}}
    return summary


def _resolve_speakers(cfg, manifest, speakers=None):
    spk = tuple(speakers) if speakers else cfg.speakers
    if not spk:
        spk = tuple(sorted(manifest["speakers"]))[:2]
    if len(spk) != 2:
        raise ConfigError("need exactly two speakers (source, target)")
    for s in spk:
        if s not in manifest["speakers"]:
            raise ConfigError(f"speaker {s!r} not in the prepared cache")
    return spk


def cmd_train(cfg, speakers=None, resume=None, out_dir=None):
    manifest = melio.load_manifest(cfg.paths.cache)
    if manifest["config_hash"] != cfg.melio.config_hash():
        raise ConfigError("mel config differs from the prepared cache; rerun `clotvc prepare`")
    spk_x, spk_y = _resolve_speakers(cfg, manifest, speakers)
    tcfg = cfg.train_config()
    out = Path(out_dir or cfg.paths.checkpoints)
    xs, st_x = melio.load_split(cfg.paths.cache, manifest, spk_x, "train", cfg.melio)
    ys, st_y = melio.load_split(cfg.paths.cache, manifest, spk_y, "train", cfg.melio)
    with _lock(out):
        state = None
        if resume:
            state = trainer.load_checkpoint(resume, cfg.nets, tcfg)
            if state.extras.get("speakers") != [spk_x, spk_y]:
                raise ConfigError(f"checkpoint was trained on {state.extras.get('speakers')}")
            if state.extras.get("resume_hash") != cfg.resume_hash():
                raise ConfigError("run config differs from the checkpoint's; refusing to resume")
        else:
            state = trainer.TrainState(cfg.nets, tcfg)
            ledger = out / "ledger.csv"
            if ledger.exists():
                ledger.unlink()
        state.extras.update({
            "speakers": [spk_x, spk_y],
            "stats": {spk_x: st_x.to_dict(), spk_y: st_y.to_dict()},
            "mel_config": asdict(cfg.melio),
            "run_config_hash": cfg.config_hash(),
            "resume_hash": cfg.resume_hash(),
        })
        state, history = trainer.train(tcfg, {"x": xs, "y": ys}, cfg.nets, state=state, out_dir=out)
    return {"checkpoint": str(out / "latest.pt"), "ledger": str(out / "ledger.csv"),
            "epochs": state.epoch, "i": state.i, "j": state.j}


def _load_for_inference(checkpoint):
    state = trainer.load_checkpoint(checkpoint)
    extras = state.extras
    if "stats" not in extras:
        raise ConfigError("checkpoint carries no normalisation stats; was it produced by `clotvc train`?")
    spk_x, spk_y = extras["speakers"]
    stats = {s: melio.MelStats.from_dict(d) for s, d in extras["stats"].items()}
    mel_cfg = melio.MelConfig(**extras["mel_config"])
    state.eval()
    return state, (spk_x, spk_y), stats, mel_cfg


def _vocoder(cfg, mel_cfg, mode=None):
    return convert.make_vocoder(mode or cfg.vocoder, mel_cfg, cfg.vocoder_command, cfg.griffin_lim_iters)


def cmd_convert(cfg, checkpoint, input_wav, direction, output_wav, vocoder=None, save_mel=None):
    if direction not in trainer.DIRECTIONS:
        raise ConfigError(f"direction must be one of {trainer.DIRECTIONS}")
    state, (spk_x, spk_y), stats, mel_cfg = _load_for_inference(checkpoint)
    voc = _vocoder(cfg, mel_cfg, vocoder)
    src, tgt = (spk_x, spk_y) if direction == "xy" else (spk_y, spk_x)
    w = melio.load_waveform(input_wav, mel_cfg.sample_rate)
    out, raw = convert.convert_waveform(state.gen[direction], w, stats[src], stats[tgt], voc, mel_cfg)
    melio.save_waveform(out, output_wav)
    if save_mel:
        np.save(save_mel, raw)
    return {"output": str(output_wav), "input_seconds": w.duration, "output_seconds": out.duration}


def cmd_evaluate(cfg, checkpoint, out_dir=None, vocoder=None, max_utts=None):
    state, (spk_x, spk_y), stats, mel_cfg = _load_for_inference(checkpoint)
    manifest = melio.load_manifest(cfg.paths.cache)
    genders = cfg.evalkit.genders
    for s in (spk_x, spk_y):
        if s not in genders:
            raise ConfigError(f"evalkit.genders has no entry for speaker {s!r}")
        if not manifest["speakers"].get(s, {}).get("test"):
            raise ConfigError(f"speaker {s!r} has no test split")
    voc = _vocoder(cfg, mel_cfg, vocoder)
    root = Path(cfg.paths.corpus_root)
    pairs = []
    for direction, src, tgt in (("xy", spk_x, spk_y), ("yx", spk_y, spk_x)):
        pairing = f"{genders[src]}-{genders[tgt]}"
        tests = manifest["speakers"][src]["test"][:max_utts]
        tgt_tests = manifest["speakers"][tgt]["test"]
        for k, utt in enumerate(tests):
            ref_path = root / tgt / f"{utt}.wav"
            pseudo = not ref_path.exists()
            if pseudo:
                ref_path = root / tgt / f"{tgt_tests[k % len(tgt_tests)]}.wav"
            w = melio.load_waveform(root / src / f"{utt}.wav", mel_cfg.sample_rate)
            conv, _ = convert.convert_waveform(state.gen[direction], w, stats[src], stats[tgt], voc, mel_cfg)
            ref = melio.load_waveform(ref_path, mel_cfg.sample_rate)
            pairs.append(evalkit.EvalPair(pairing, f"{src}->{tgt}/{utt}", ref, conv, pseudo))
    reports = evalkit.evaluate_pairs(pairs, cfg.evalkit.dataset)
    out = Path(out_dir or cfg.paths.reports)
    txt, js = evalkit.write_reports(reports, out, model_name="CLOT-GAN-VC")

    # Grad-CAM of every target-class discriminator on the first converted test crop
    utt = manifest["speakers"][spk_x]["test"][0]
    mel = melio.apply_norm(melio.read_cache(cfg.paths.cache, spk_x, utt, mel_cfg), stats[spk_x])
    crop = melio.sample_crop(mel, 64, np.random.default_rng(cfg.seed))
    import torch

    with torch.no_grad():
        x = torch.as_tensor(crop[None, None], dtype=state.dtype)
        fake = state.gen["xy"](torch.cat([x, torch.ones_like(x)], dim=1))
    for kind, disc in zip(state.nets_cfg.discriminators, state.disc["y"]):
        cam = evalkit.gradcam(disc, kind, fake[0])
        evalkit.save_gradcam(cam, out / "gradcam" / f"D_y_{kind}")
    return {"report": str(txt), "json": str(js),
            "rows": {r.pairing: {"n": len(r.mcd_values), "mcd": r.mcd_mean, "msd": r.msd_mean} for r in reports}}


def inspect_ledger(path):
    """Per-epoch, per-direction mean participation weights and their sums."""
    rows = [r for r in trainer.read_ledger(path) if r["kind"] == "disc"]
    if not rows:
        raise ValueError(f"ledger {path} has no discriminator rows")
    n = sum(1 for k in rows[0] if k.startswith("alpha_") and k != "alpha_sum")
    n = sum(1 for k in range(1, n + 1) if rows[0][f"alpha_{k}"] != "")
    table = {}
    for r in rows:
        key = (int(r["epoch"]), r["direction"])
        table.setdefault(key, []).append(
            [float(r[f"alpha_{k}"]) for k in range(1, n + 1)] + [float(r["alpha_sum"]),
                                                                  float(r["sinkhorn_iters"])])
    out = []
    for (epoch, direction), vals in sorted(table.items()):
        v = np.mean(vals, axis=0)
        out.append({"epoch": epoch, "direction": direction, "alpha": v[:n].tolist(), "alpha_sum": float(v[n]),
                    "sinkhorn_iters": float(v[n + 1])})
    return out


def cmd_inspect(ledger, plot=None):
    if not Path(ledger).exists() or Path(ledger).stat().st_size == 0:
        raise ValueError(f"ledger {ledger} is empty or missing")
    rows = inspect_ledger(ledger)
    lines = ["epoch  dir  " + "  ".join(f"alpha_{k + 1:<4}" for k in range(len(rows[0]["alpha"])))
             + "  alpha_sum  sinkhorn_iters"]
    for r in rows:
        lines.append(f"{r['epoch']:>5}  {r['direction']:>3}  " + "  ".join(f"{a:10.4f}" for a in r["alpha"])
                     + f"  {r['alpha_sum']:9.6f}  {r['sinkhorn_iters']:14.1f}")
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 2, figsize=(10, 3.5), sharey=True)
        for ax, direction in zip(axes, trainer.DIRECTIONS):
            sel = [r for r in rows if r["direction"] == direction]
            ep = [r["epoch"] for r in sel]
            for k in range(len(rows[0]["alpha"])):
                ax.plot(ep, [r["alpha"][k] for r in sel], label=f"alpha_{k + 1}")
            ax.plot(ep, [r["alpha_sum"] for r in sel], "k--", label="sum")
            ax.set_title(f"direction {direction}")
            ax.set_xlabel("epoch")
        axes[0].legend()
        fig.tight_layout()
        fig.savefig(plot)
        plt.close(fig)
    return "\n".join(lines), rows


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="clotvc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="build the mel cache and split manifest")
    sp.add_argument("--config")
    sp.add_argument("--corpus-root")
    sp.add_argument("--cache")

    sp = sub.add_parser("train", help="train the generators and discriminator families")
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--speakers", help="comma-separated source,target speaker ids")
    sp.add_argument("--ablation", choices=trainer.ABLATIONS)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", help="checkpoint directory")

    sp = sub.add_parser("convert", help="convert one utterance")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--direction", choices=trainer.DIRECTIONS, default="xy")
    sp.add_argument("--output", required=True)
    sp.add_argument("--vocoder", choices=convert.VOCODER_MODES)
    sp.add_argument("--save-mel")

    sp = sub.add_parser("evaluate", help="MCD/MSD report and Grad-CAM maps")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.add_argument("--vocoder", choices=convert.VOCODER_MODES)
    sp.add_argument("--max-utts", type=int)

    sp = sub.add_parser("inspect", help="participation-weight trajectories from a ledger")
    sp.add_argument("--ledger", required=True)
    sp.add_argument("--plot")
    return p


def _overrides(args):
    ov = {}
    if getattr(args, "corpus_root", None):
        ov["paths.corpus_root"] = args.corpus_root
    if getattr(args, "cache", None):
        ov["paths.cache"] = args.cache
    if getattr(args, "epochs", None):
        ov["trainer.epochs"] = args.epochs
    if getattr(args, "ablation", None):
        ov["trainer.ablation"] = args.ablation
    return ov


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "inspect":
        text, _ = cmd_inspect(args.ledger, args.plot)
        return text
    cfg = load_run_config(args.config, _overrides(args))
    if args.command == "prepare":
        result = cmd_prepare(cfg)
    elif args.command == "train":
        speakers = args.speakers.split(",") if args.speakers else None
        result = cmd_train(cfg, speakers, args.resume, args.out)
    elif args.command == "convert":
        result = cmd_convert(cfg, args.checkpoint, args.input, args.direction, args.output,
                             args.vocoder, args.save_mel)
    else:
        result = cmd_evaluate(cfg, args.checkpoint, args.out, args.vocoder, args.max_utts)
    return json.dumps(result, indent=1)


def main(argv=None):
    try:
        out = run(argv)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
