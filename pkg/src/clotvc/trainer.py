"""Collective-learning training loop.

Per training sample: the y-discriminator family is updated on (x -> y)
fakes, then the x-family on (y -> x) fakes, each with a participation-weighted
sum of per-discriminator OT losses.  Then both generators are updated with
participation-weighted least-squares adversarial terms plus cycle-consistency
and identity losses.
"""

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import melio, otcore
from .config import from_dict
from .nets import Generator, NetsConfig, build_discriminators

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "single_disc", "simple_average", "l2_loss")
DIRECTIONS = ("xy", "yx")


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    # None -> first 10% of epochs
    identity_cutoff_epochs: int | None = None
    ablation: str = "full"
    loss_form: str = "as_written"
    sinkhorn: otcore.SinkhornConfig = otcore.SinkhornConfig()
    negate_disc_loss: bool = False
    aux_ls_weight: float = 0.0
    beta_source: str = "adversarial"
    fallback_eps: float = 1e-12
    crop_width: int = 64
    max_mask_frames: int = 16
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only mini-batch size 1 is supported")
        if min(self.lambda_cyc, self.lambda_id, self.aux_ls_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.loss_form not in otcore.LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {otcore.LOSS_FORMS}")
        if self.beta_source not in ("adversarial", "alpha"):
            raise ValueError("beta_source must be 'adversarial' or 'alpha'")

    @property
    def identity_cutoff(self):
        if self.identity_cutoff_epochs is not None:
            return self.identity_cutoff_epochs
        return max(1, int(round(0.1 * self.epochs)))

    def effective_nets(self, nets_cfg):
        if self.ablation == "single_disc":
            return replace(nets_cfg, discriminators=("dcnn",))
        return nets_cfg


# --------------------------------------------------------------------------
# participation weights
# --------------------------------------------------------------------------

@dataclass
class ParticipationWeights:
    weights: np.ndarray
    source_losses: np.ndarray
    fallback: bool = False

    def __iter__(self):
        return iter(self.weights)

    def __len__(self):
        return len(self.weights)


def _as_floats(losses):
    return np.array([float(v.detach()) if torch.is_tensor(v) else float(v) for v in losses])


def participation_weights(losses, fallback_eps=1e-12):
    """``w_k = (sum(L) - L_k) / sum(L)``; the smallest loss gets the largest weight.

    A single discriminator gets weight 1.  When ``|sum(L)| <= fallback_eps``
    the weights fall back to uniform ``1/n``.  Values are read detached.
    """
    L = _as_floats(losses)
    if L.size == 0:
        raise ValueError("need at least one loss")
    if not np.all(np.isfinite(L)):
        raise NonFiniteLossError(f"non-finite discriminator losses {L.tolist()}")
    n = L.size
    if n == 1:
        return ParticipationWeights(np.ones(1), L, fallback=True)
    total = L.sum()
    if abs(total) <= fallback_eps:
        return ParticipationWeights(np.full(n, 1.0 / n), L, fallback=True)
    return ParticipationWeights((total - L) / total, L)


def uniform_weights(losses):
    L = _as_floats(losses)
    return ParticipationWeights(np.full(L.size, 1.0 / L.size), L)


def weighted_total(losses, weights):
    """Sum of ``w_k * L_k``; weights are constants, gradients flow through losses."""
    w = weights.weights if isinstance(weights, ParticipationWeights) else weights
    w = [float(v) for v in w]
    if len(w) != len(losses):
        raise ValueError(f"{len(losses)} losses but {len(w)} weights")
    total = 0.0
    for wk, lk in zip(w, losses):
        total = total + wk * lk
    return total


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

class TrainState:
    """Both generators, both discriminator families, optimizers, counters, RNG."""

    def __init__(self, nets_cfg=NetsConfig(), train_cfg=TrainConfig(), dtype=torch.float32):
        self.train_cfg = train_cfg
        self.nets_cfg = train_cfg.effective_nets(nets_cfg)
        torch.manual_seed(train_cfg.seed)
        self.gen = nn.ModuleDict({d: Generator(self.nets_cfg.generator) for d in DIRECTIONS})
        self.disc = nn.ModuleDict({c: build_discriminators(self.nets_cfg) for c in ("x", "y")})
        self.gen.to(dtype)
        self.disc.to(dtype)
        lr, betas = train_cfg.learning_rate, train_cfg.adam_betas
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=lr, betas=betas)
        self.opt_d = {c: torch.optim.Adam(self.disc[c].parameters(), lr=lr, betas=betas) for c in ("x", "y")}
        self.i = 0
        self.j = 0
        self.epoch = 0
        self.step = 0
        self.rng = np.random.default_rng(train_cfg.seed)
        self.history = []
        self.last_alpha = {}
        self.extras = {}

    @property
    def dtype(self):
        return next(self.gen.parameters()).dtype

    @property
    def n_disc(self):
        return len(self.nets_cfg.discriminators)

    def route(self, direction):
        """(generator, target-class discriminators, their optimizer) for a direction."""
        if direction == "xy":
            return self.gen["xy"], self.disc["y"], self.opt_d["y"]
        if direction == "yx":
            return self.gen["yx"], self.disc["x"], self.opt_d["x"]
        raise ValueError(f"direction must be one of {DIRECTIONS}")

    def train(self):
        self.gen.train()
        self.disc.train()

    def eval(self):
        self.gen.eval()
        self.disc.eval()


@dataclass
class LossLedger:
    epoch: int
    step: int
    i: int
    j: int
    direction: str
    kind: str
    losses: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    loss_total: float = 0.0
    weighted_total: float = 0.0
    fallback: bool = False
    sinkhorn_iters: int = 0
    cyc: float = 0.0
    idt: float = 0.0
    gen_total: float = 0.0

    @property
    def alpha_sum(self):
        return float(sum(self.weights))


@contextlib.contextmanager
def frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _check_finite(values, what, state):
    vals = _as_floats(values)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteLossError(
            f"non-finite {what} at epoch {state.epoch}, step {state.step} (i={state.i}, j={state.j}): {vals.tolist()}")


def _ls_disc_loss(real_out, fake_out):
    return torch.mean((real_out - 1.0) ** 2) + torch.mean(fake_out ** 2)


def discriminator_step(real_pair, source_pair, direction, state, cfg=None):
    """One collective update of the target-class discriminator family.

    ``real_pair``: ``(2, 1, 80, 64)`` target-class crops (X, X').
    ``source_pair``: ``(2, 2, 80, 64)`` generator inputs from the source class;
    their conversions give (Y, Y').
    """
    cfg = cfg or state.train_cfg
    G, discs, opt = state.route(direction)
    with torch.no_grad():
        fake = G(source_pair)
    batch = torch.cat([real_pair, fake], dim=0)
    stats = otcore.SinkhornStats()
    losses = []
    for D in discs:
        out = D(batch)
        r_real, r_fake = out.realness[:2], out.realness[2:]
        if cfg.ablation == "l2_loss":
            loss = _ls_disc_loss(r_real, r_fake)
        else:
            e = out.embedding
            X, X2, Y, Y2 = (otcore.chunk_embedding(e[k]) for k in range(4))
            loss = otcore.disc_ot_loss(X, X2, Y, Y2, cfg.sinkhorn, cfg.loss_form, stats)
            if cfg.negate_disc_loss:
                loss = -loss
            if cfg.aux_ls_weight > 0:
                loss = loss + cfg.aux_ls_weight * 0.5 * _ls_disc_loss(r_real, r_fake)
        losses.append(loss)
    _check_finite(losses, f"discriminator losses ({direction})", state)

    if cfg.ablation == "simple_average":
        alpha = uniform_weights(losses)
    else:
        alpha = participation_weights(losses, cfg.fallback_eps)
    total = weighted_total(losses, alpha)
    opt.zero_grad(set_to_none=True)
    total.backward()
    opt.step()
    state.last_alpha[direction] = alpha

    if direction == "xy":
        state.i += 1
    else:
        state.j += 1
    return LossLedger(
        epoch=state.epoch, step=state.step, i=state.i, j=state.j, direction=direction, kind="disc",
        losses=alpha.source_losses.tolist(), weights=alpha.weights.tolist(),
        # logged in double precision from the recorded losses and weights
        loss_total=float(alpha.source_losses.sum()),
        weighted_total=float(np.dot(alpha.weights, alpha.source_losses)),
        fallback=alpha.fallback, sinkhorn_iters=stats.iterations)


def generator_adv_loss(source_input, direction, state, cfg=None, fake=None):
    """Participation-weighted least-squares adversarial loss for one generator.

    Returns ``(total, beta, terms)`` with ``terms[k] = 0.5 * mean((D_k(G(x)) - 1)^2)``.
    """
    cfg = cfg or state.train_cfg
    G, discs, _ = state.route(direction)
    if fake is None:
        fake = G(source_input)
    terms = []
    with frozen(discs):
        for D in discs:
            terms.append(0.5 * torch.mean((D(fake).realness - 1.0) ** 2))
    _check_finite(terms, f"generator adversarial terms ({direction})", state)
    if cfg.ablation == "simple_average":
        beta = uniform_weights(terms)
    elif cfg.beta_source == "alpha" and direction in state.last_alpha:
        beta = state.last_alpha[direction]
    else:
        beta = participation_weights(terms, cfg.fallback_eps)
    return weighted_total(terms, beta), beta, terms


def _with_mask(mel, mask=None):
    if mask is None:
        mask = torch.ones_like(mel)
    return torch.cat([mel * mask, mask], dim=1)


def cycle_identity_losses(x, y, state, cfg=None, epoch=1, x_mask=None, y_mask=None, fakes=None):
    """L1 cycle-consistency and identity losses on ``(B, 1, 80, 64)`` crops.

    Masks hide frames of the first conversion's input only; the identity term
    is exactly zero once ``epoch`` exceeds the identity cutoff.
    """
    cfg = cfg or state.train_cfg
    if x.shape != y.shape or x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"x and y must both be (B, 1, 80, 64); got {tuple(x.shape)} and {tuple(y.shape)}")
    G_xy, G_yx = state.gen["xy"], state.gen["yx"]
    if fakes is None:
        y_hat = G_xy(_with_mask(x, x_mask))
        x_hat = G_yx(_with_mask(y, y_mask))
    else:
        y_hat, x_hat = fakes
    x_cyc = G_yx(_with_mask(y_hat))
    y_cyc = G_xy(_with_mask(x_hat))
    l_cyc = torch.mean(torch.abs(x_cyc - x)) + torch.mean(torch.abs(y_cyc - y))
    if epoch <= cfg.identity_cutoff:
        l_id = torch.mean(torch.abs(G_xy(_with_mask(y)) - y)) + torch.mean(torch.abs(G_yx(_with_mask(x)) - x))
    else:
        l_id = torch.zeros((), dtype=x.dtype)
    return l_cyc, l_id


def generator_step(x, y, x_mask, y_mask, state, cfg=None, epoch=1):
    cfg = cfg or state.train_cfg
    x_in, y_in = _with_mask(x, x_mask), _with_mask(y, y_mask)
    y_hat = state.gen["xy"](x_in)
    x_hat = state.gen["yx"](y_in)
    adv_xy, beta_y, _ = generator_adv_loss(x_in, "xy", state, cfg, fake=y_hat)
    adv_yx, beta_x, _ = generator_adv_loss(y_in, "yx", state, cfg, fake=x_hat)
    l_cyc, l_id = cycle_identity_losses(x, y, state, cfg, epoch, fakes=(y_hat, x_hat))
    total = adv_xy + adv_yx + cfg.lambda_cyc * l_cyc + cfg.lambda_id * l_id
    _check_finite([total], "generator total", state)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    return LossLedger(
        epoch=state.epoch, step=state.step, i=state.i, j=state.j, direction="both", kind="gen",
        losses=[float(adv_xy.detach()), float(adv_yx.detach())],
        weights=beta_y.weights.tolist() + beta_x.weights.tolist(),
        loss_total=float((adv_xy + adv_yx).detach()), weighted_total=float((adv_xy + adv_yx).detach()),
        fallback=beta_y.fallback or beta_x.fallback,
        cyc=float(l_cyc.detach()), idt=float(l_id.detach()), gen_total=float(total.detach()))


# --------------------------------------------------------------------------
# ledger file
# --------------------------------------------------------------------------

def ledger_header(n):
    return (["epoch", "step", "i", "j", "direction", "kind"]
            + [f"loss_{k + 1}" for k in range(n)] + [f"alpha_{k + 1}" for k in range(n)]
            + ["alpha_sum", "loss_total", "weighted_total", "fallback", "sinkhorn_iters",
               "cyc", "idt", "gen_total"])


def ledger_row(rec, n):
    def pad(v):
        v = list(v)[:n]
        return [repr(float(x)) for x in v] + [""] * (n - len(v))

    if rec.kind == "disc":
        losses, weights, asum = pad(rec.losses), pad(rec.weights), repr(rec.alpha_sum)
    else:
        losses, weights, asum = [""] * n, [""] * n, ""
    return ([rec.epoch, rec.step, rec.i, rec.j, rec.direction, rec.kind] + losses + weights
            + [asum, repr(rec.loss_total), repr(rec.weighted_total), int(rec.fallback), rec.sinkhorn_iters,
               repr(rec.cyc), repr(rec.idt), repr(rec.gen_total)])


def append_ledger(path, records, n):
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ledger_header(n))
        for rec in records:
            w.writerow(ledger_row(rec, n))


def read_ledger(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "arch_hash": state.nets_cfg.arch_hash(),
        "nets_config": asdict(state.nets_cfg),
        "train_config": asdict(state.train_cfg),
        "dtype": str(state.dtype).replace("torch.", ""),
        "gen": state.gen.state_dict(),
        "disc": state.disc.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": {c: o.state_dict() for c, o in state.opt_d.items()},
        "counters": {"i": state.i, "j": state.j, "epoch": state.epoch, "step": state.step},
        "rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "history": [asdict(r) for r in state.history],
        "extras": state.extras,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path, nets_cfg=None, train_cfg=None):
    """Restore a :class:`TrainState`.

    ``nets_cfg`` (if given) must hash to the stored architecture; a mismatch
    raises :class:`CheckpointMismatchError`.
    """
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    stored_nets = from_dict(NetsConfig, blob["nets_config"])
    stored_train = from_dict(TrainConfig, blob["train_config"])
    if nets_cfg is not None:
        eff = (train_cfg or stored_train).effective_nets(nets_cfg)
        if eff.arch_hash() != blob["arch_hash"]:
            raise CheckpointMismatchError(
                f"checkpoint architecture {blob['arch_hash']} does not match requested {eff.arch_hash()}")
    train_cfg = train_cfg or stored_train
    dtype = getattr(torch, blob.get("dtype", "float32"))
    state = TrainState(stored_nets, train_cfg, dtype=dtype)
    if state.nets_cfg.arch_hash() != blob["arch_hash"]:
        raise CheckpointMismatchError("ablation setting changes the stored architecture")
    state.gen.load_state_dict(blob["gen"])
    state.disc.load_state_dict(blob["disc"])
    state.opt_g.load_state_dict(blob["opt_g"])
    for c, o in state.opt_d.items():
        o.load_state_dict(blob["opt_d"][c])
    for k, v in blob["counters"].items():
        setattr(state, k, v)
    state.rng.bit_generator.state = blob["rng"]
    torch.set_rng_state(blob["torch_rng"])
    state.history = [LossLedger(**r) for r in blob["history"]]
    state.extras = blob.get("extras", {})
    return state


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

def _values(m):
    return m.values if isinstance(m, melio.MelSpectrogram) else np.asarray(m)


def _draw(mel, cfg, rng, dtype):
    """Two independent crops of one utterance with fill-in-frames masks."""
    if not isinstance(mel, melio.MelSpectrogram):
        mel = melio.MelSpectrogram(np.asarray(mel), norm=melio.MelStats(np.zeros(80), np.ones(80)))
    crops, masks = [], []
    for _ in range(2):
        crops.append(melio.sample_crop(mel, cfg.crop_width, rng))
        masks.append(melio.sample_fif_mask(cfg.crop_width, cfg.max_mask_frames, rng).mask)
    crops = torch.as_tensor(np.stack(crops)[:, None], dtype=dtype)
    masks = torch.as_tensor(np.stack(masks)[:, None], dtype=dtype)
    return crops, masks


def train(cfg, corpora, nets_cfg=NetsConfig(), state=None, out_dir=None, ledger_path=None,
          epoch_callback=None):
    """Run the collective-learning loop up to ``cfg.epochs``.

    ``corpora`` maps ``"x"`` and ``"y"`` to lists of (normalised) training
    mels.  Pass a restored ``state`` to resume after its last finished epoch.
    """
    xs, ys = list(corpora["x"]), list(corpora["y"])
    if not xs or not ys:
        raise ValueError("both speaker corpora need a non-empty train split")
    state = state or TrainState(nets_cfg, cfg)
    state.train_cfg = cfg
    state.train()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ledger_path = ledger_path or out_dir / "ledger.csv"
    n = state.n_disc
    steps = max(len(xs), len(ys))
    dtype = state.dtype

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        state.epoch = epoch
        order_x = state.rng.permutation(len(xs))
        order_y = state.rng.permutation(len(ys))
        records = []
        for s in range(steps):
            state.step += 1
            x_crops, x_masks = _draw(xs[order_x[s % len(xs)]], cfg, state.rng, dtype)
            y_crops, y_masks = _draw(ys[order_y[s % len(ys)]], cfg, state.rng, dtype)
            x_in = torch.cat([x_crops * x_masks, x_masks], dim=1)
            y_in = torch.cat([y_crops * y_masks, y_masks], dim=1)
            try:
                records.append(discriminator_step(y_crops, x_in, "xy", state, cfg))
                records.append(discriminator_step(x_crops, y_in, "yx", state, cfg))
                records.append(generator_step(x_crops[:1], y_crops[:1], x_masks[:1], y_masks[:1],
                                              state, cfg, epoch))
            except NonFiniteLossError:
                state.history.extend(records)
                if out_dir is not None:
                    save_checkpoint(state, out_dir / "halted.pt")
                    append_ledger(ledger_path, records, n)
                raise
        state.history.extend(records)
        if ledger_path is not None:
            append_ledger(ledger_path, records, n)
        summary = epoch_summary(records)
        logger.info("epoch %d: %s", epoch, summary)
        if epoch_callback is not None:
            epoch_callback(epoch, summary, state)
        if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_checkpoint(state, out_dir / f"ckpt_epoch{epoch:04d}.pt")
            save_checkpoint(state, out_dir / "latest.pt")
    return state, state.history


def epoch_summary(records):
    gen = [r for r in records if r.kind == "gen"]
    disc = [r for r in records if r.kind == "disc"]
    out = {}
    if gen:
        out["cyc"] = float(np.mean([r.cyc for r in gen]))
        out["idt"] = float(np.mean([r.idt for r in gen]))
        out["adv"] = float(np.mean([r.loss_total for r in gen]))
    if disc:
        out["disc_weighted"] = float(np.mean([r.weighted_total for r in disc]))
        out["alpha_sum"] = float(np.mean([r.alpha_sum for r in disc]))
    return out


def per_epoch(history, key="cyc"):
    by = {}
    for r in history:
        if r.kind == "gen":
            by.setdefault(r.epoch, []).append(getattr(r, key))
    return {e: float(np.mean(v)) for e, v in sorted(by.items())}


def is_finite_history(history):
    for r in history:
        vals = list(r.losses) + list(r.weights) + [r.loss_total, r.weighted_total, r.cyc, r.idt, r.gen_total]
        if not all(math.isfinite(v) for v in vals):
            return False
    return True
