"""Bidirectional training: reconstruction, codebook/transport losses and adversarial critics."""
from __future__ import annotations

import contextlib
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import checkpoint as eckp
from .cdc import commitment_loss
from .errors import ConfigError, ShapeError, StateError
from .nets import Discriminators, PatchGrid, Translator, extract_patch_tubes, mask_patches, pooled
from .syndata import AugmentConfig, load_dataset, sample_and_augment
from .transport import MemoryBank, cdc_loss, dis_loss, hinge, ot_loss

REPORT_KEYS = ("recon_X", "recon_Y", "q_A", "q_B", "dis_A", "dis_B", "ot",
               "adv_A", "adv_B", "disc_A", "disc_B", "total")

PROVENANCE = {
    "phi_A": "normal->abnormal translator; its encoder is the evaluation feature extractor",
    "phi_B": "abnormal->normal translator",
}


@dataclass
class TrainConfig:
    lr: float = 2.25e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 60
    lr_decay_period: int = 25
    lr_decay_factor: float = 0.1
    batch_size: int = 2
    mask_ratio: float = 0.4
    patch_size: int = 8
    commit_lambda: float = 0.25
    omega: float = 0.01
    omega_bank: float = 0.01
    w_ot: float = 1.0
    margin: float = 10.0
    w_adv: float = 0.1
    seed: int = 0
    codebook_size: int = 128
    dim: int = 32
    max_frames: int = 64
    bank_size: int = 64
    ot_solver: str = "sort"
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 200
    use_cdc: bool = True
    use_positional: bool = True
    checkpoint_every: int = 10
    window: int = 16
    n_sample: int = 16
    eval_stride: int = 1
    resize: int | None = None
    crop: int | None = None
    flips: bool = True

    def validate(self) -> None:
        for name in ("lr", "weight_decay", "lr_decay_factor", "omega", "omega_bank"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_period < 1:
            raise ConfigError("epochs, batch_size and lr_decay_period must be >= 1")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.ot_solver not in ("sort", "sinkhorn"):
            raise ConfigError("ot_solver must be 'sort' or 'sinkhorn'")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(window=self.window, n_sample=self.n_sample, eval_stride=self.eval_stride,
                             resize=self.resize, crop=self.crop, flips=self.flips)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(doc)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_period)


def recon_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if x.shape != x_rec.shape:
        raise ShapeError(f"{tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


@contextlib.contextmanager
def frozen(module: nn.Module):
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def _granular_scores(clips: torch.Tensor, grid: PatchGrid, discs: Discriminators):
    """Per-sample probabilities at the three granularities: clip (B,), frames (B, N), tubes (B, P)."""
    b, n = clips.shape[:2]
    whole = discs.temporal(clips)
    frames = discs.spatial(clips.reshape(b * n, *clips.shape[2:])).reshape(b, n)
    tubes = extract_patch_tubes(clips, grid)
    patches = discs.patch(tubes.reshape(b * grid.n_patches, *tubes.shape[2:])).reshape(b, grid.n_patches)
    return whole, frames, patches


def _sum_log(scores, complement: bool) -> torch.Tensor:
    total = 0.0
    for s in scores:
        s = s if s.ndim > 1 else s[:, None]
        total = total + (torch.log1p(-s) if complement else torch.log(s)).sum(dim=1)
    return total


def adv_losses(fake: torch.Tensor, real: torch.Tensor, grid: PatchGrid, discs: Discriminators,
               part: str = "both"):
    """Non-saturating GAN losses summed over clip, frame and patch-tube critics.

    Returns ``(generator_loss, discriminator_loss)``, each a batch mean; the
    half not requested by ``part`` is None. The discriminator sees ``fake``
    detached, and the generator loss never reaches discriminator parameters.
    """
    if fake.shape != real.shape:
        raise ShapeError(f"{tuple(fake.shape)} vs {tuple(real.shape)}")
    gen = disc = None
    if part in ("both", "generator"):
        with frozen(discs):
            gen = -_sum_log(_granular_scores(fake, grid, discs), complement=False).mean()
    if part in ("both", "discriminator"):
        real_term = _sum_log(_granular_scores(real, grid, discs), complement=False)
        fake_term = _sum_log(_granular_scores(fake.detach(), grid, discs), complement=True)
        disc = -(real_term + fake_term).mean()
    return gen, disc


class CycleModel(nn.Module):
    """Every trainable or EMA-maintained tensor of the system."""

    def __init__(self, cfg: TrainConfig, in_channels: int = 1):
        super().__init__()
        torch.manual_seed(cfg.seed)
        kw = dict(in_channels=in_channels, dim=cfg.dim, n_entries=cfg.codebook_size, max_frames=cfg.max_frames,
                  omega=cfg.omega, use_codebook=cfg.use_cdc, use_positional=cfg.use_positional)
        self.phi_A = Translator(**kw)
        self.phi_B = Translator(**kw)
        self.disc_A = Discriminators(in_channels)
        self.disc_B = Discriminators(in_channels)
        self.bank_A = MemoryBank(cfg.bank_size, cfg.dim, cfg.omega_bank)
        self.bank_B = MemoryBank(cfg.bank_size, cfg.dim, cfg.omega_bank)

    def generator_parameters(self):
        return [p for m in (self.phi_A, self.phi_B) for p in m.parameters() if p.requires_grad]

    def discriminator_parameters(self):
        return [p for m in (self.disc_A, self.disc_B) for p in m.parameters()]


class Trainer:
    def __init__(self, cfg: TrainConfig, in_channels: int = 1):
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.model = CycleModel(cfg, in_channels)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.AdamW(self.model.generator_parameters(), lr=cfg.lr, betas=betas,
                                       weight_decay=cfg.weight_decay)
        self.opt_d = torch.optim.AdamW(self.model.discriminator_parameters(), lr=cfg.lr, betas=betas,
                                       weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step = 0

    # -- one optimisation step ------------------------------------------------

    def _mask(self, clips: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        if self.cfg.mask_ratio == 0:
            return clips
        return torch.stack([mask_patches(c, grid, self.cfg.mask_ratio, self.rng)[0] for c in clips])

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> dict:
        """One paired step on normal clips ``x`` and abnormal clips ``y``, both (B, N, H, W, C)."""
        if x.shape[0] == 0 or y.shape[0] == 0:
            raise StateError("a training batch needs at least one normal and one abnormal clip")
        cfg, m = self.cfg, self.model
        grid = PatchGrid.for_frame(x.shape[2], x.shape[3], cfg.patch_size)

        x_hat, q_xa = m.phi_A(self._mask(x, grid))
        y_hat, q_yb = m.phi_B(self._mask(y, grid))
        x_rec, _ = m.phi_B(x_hat)
        y_rec, _ = m.phi_A(y_hat)

        _, disc_a = adv_losses(x_hat, y, grid, m.disc_A, part="discriminator")
        _, disc_b = adv_losses(y_hat, x, grid, m.disc_B, part="discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        (disc_a + disc_b).backward()
        self.opt_d.step()

        rx = recon_loss(x, x_rec)
        ry = recon_loss(y, y_rec)
        pa = pooled(q_xa.quantized)
        pb = pooled(q_yb.quantized)
        if cfg.use_cdc:
            q_a = commitment_loss(q_xa.shifted, q_xa.codes, cfg.commit_lambda)
            q_b = commitment_loss(q_yb.shifted, q_yb.codes, cfg.commit_lambda)
            d_a = dis_loss(pa, m.bank_A.centroid) if int(m.bank_A.fill) else pa.new_zeros(())
            d_b = dis_loss(pb, m.bank_B.centroid) if int(m.bank_B.fill) else pb.new_zeros(())
        else:
            q_a = q_b = d_a = d_b = pa.new_zeros(())
        try:
            ot = ot_loss(m.bank_A, m.bank_B, pa, pb, cfg.ot_solver, cfg.sinkhorn_eps, cfg.sinkhorn_iters)
        except StateError:
            ot = None
        cdc_total, cdc_report = cdc_loss(q_a, q_b, d_a, d_b, ot, w_ot=cfg.w_ot, margin=cfg.margin)

        adv_a, _ = adv_losses(x_hat, y, grid, m.disc_A, part="generator")
        adv_b, _ = adv_losses(y_hat, x, grid, m.disc_B, part="generator")
        total = rx + ry + cdc_total + cfg.w_adv * (adv_a + adv_b)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        if cfg.use_cdc:
            m.phi_A.codebook.ema_update(q_xa, self.rng)
            m.phi_B.codebook.ema_update(q_yb, self.rng)
        m.bank_A.push(pa.detach())
        m.bank_B.push(pb.detach())
        self.step += 1

        report = {"recon_X": rx.item(), "recon_Y": ry.item(), **cdc_report,
                  "adv_A": adv_a.item(), "adv_B": adv_b.item(),
                  "disc_A": disc_a.item(), "disc_B": disc_b.item()}
        # float64 recomposition of the float32 parts, so the log satisfies the L_all identity exactly
        report["total"] = report_total(report, cfg)
        return report

    # -- epochs -----------------------------------------------------------------

    def _batch(self, clips: list, idx) -> torch.Tensor:
        aug = self.cfg.augment
        return torch.from_numpy(np.stack([sample_and_augment(clips[i], self.rng, True, aug).frames for i in idx]))

    def run_epoch(self, normals: list, abnormals: list) -> dict:
        cfg = self.cfg
        lr = lr_at(self.epoch, cfg)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        self.model.train()
        perm_n = self.rng.permutation(len(normals))
        perm_a = self.rng.permutation(len(abnormals))
        bs = cfg.batch_size
        n_steps = math.ceil(max(len(normals), len(abnormals)) / bs)
        rows = []
        for s in range(n_steps):
            # the shorter stream wraps around within the epoch
            idx_n = [perm_n[(s * bs + i) % len(normals)] for i in range(bs)]
            idx_a = [perm_a[(s * bs + i) % len(abnormals)] for i in range(bs)]
            rows.append(self.train_step(self._batch(normals, idx_n), self._batch(abnormals, idx_a)))
        self.epoch += 1
        means = {}
        for k in REPORT_KEYS:
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            means[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        means["lr"] = lr
        return means

    # -- persistence ------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for idx, st in opt.state_dict()["state"].items():
                for key, val in st.items():
                    tensors[f"{tag}.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        rng_json = json.dumps(self.rng.bit_generator.state, sort_keys=True).encode()
        tensors["rng.numpy"] = np.frombuffer(rng_json, dtype=np.uint8)
        return tensors

    def header(self) -> dict:
        sd = self.model.state_dict()
        return {
            "config": self.cfg.to_json(),
            "epoch": self.epoch,
            "step": self.step,
            "in_channels": self.in_channels,
            "init_seed": self.cfg.seed,
            "provenance": PROVENANCE,
            "param_shapes": {k: list(v.shape) for k, v in sd.items()},
            "param_groups": {
                "opt_g": [{k: v for k, v in g.items() if k != "params"} for g in self.opt_g.state_dict()["param_groups"]],
                "opt_d": [{k: v for k, v in g.items() if k != "params"} for g in self.opt_d.state_dict()["param_groups"]],
            },
        }

    def save(self, path) -> None:
        eckp.write_checkpoint(path, self.header(), self.state_tensors())

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        header, tensors = eckp.read_checkpoint(path)
        cfg = TrainConfig.from_json(header["config"])
        tr = cls(cfg, header.get("in_channels", 1))
        load_model_tensors(tr.model, tensors)
        for tag, opt in (("opt_g", tr.opt_g), ("opt_d", tr.opt_d)):
            sd = opt.state_dict()
            state = {}
            for name, arr in tensors.items():
                if name.startswith(tag + "."):
                    _, idx, key = name.split(".", 2)
                    state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
            groups = header["param_groups"][tag]
            for g, saved in zip(sd["param_groups"], groups):
                g.update({k: v for k, v in saved.items() if k in g and k != "params"})
            opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
        tr.rng.bit_generator.state = json.loads(tensors["rng.numpy"].tobytes().decode())
        tr.epoch = header["epoch"]
        tr.step = header["step"]
        return tr


def load_model_tensors(model: CycleModel, tensors: dict[str, np.ndarray]) -> None:
    sd = model.state_dict()
    new = {}
    for k, v in sd.items():
        name = f"model.{k}"
        if name not in tensors:
            raise eckp.FormatError(f"checkpoint is missing tensor {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(v.shape):
            raise eckp.FormatError(f"{name}: shape {arr.shape} does not match model {tuple(v.shape)}")
        new[k] = torch.from_numpy(arr.copy()).to(v.dtype)
    model.load_state_dict(new)


def load_model(path) -> tuple[CycleModel, TrainConfig, dict]:
    """Load only the model half of a checkpoint (for evaluation)."""
    header, tensors = eckp.read_checkpoint(path)
    cfg = TrainConfig.from_json(header["config"])
    model = CycleModel(cfg, header.get("in_channels", 1))
    load_model_tensors(model, tensors)
    model.eval()
    return model, cfg, header


def set_deterministic(flag: bool = True) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def load_train_clips(data_dir) -> tuple[list, list]:
    manifest = load_dataset(data_dir)
    train = manifest.split("train")
    normals = [manifest.load(r)[0] for r in train if r.cls == "normal"]
    abnormals = [manifest.load(r)[0] for r in train if r.cls != "normal"]
    if not normals or not abnormals:
        raise ConfigError("training split must contain both normal and abnormal clips")
    return normals, abnormals


def train(cfg: TrainConfig, data_dir, out_dir, resume=None, deterministic: bool = False,
          log: Callable[[str], None] = print, clips: tuple[list, list] | None = None) -> Path:
    """Train for ``cfg.epochs`` epochs; returns the path of the final checkpoint."""
    set_deterministic(deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    normals, abnormals = clips if clips is not None else load_train_clips(data_dir)
    channels = normals[0].shape[-1]
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume)
        trainer.cfg.epochs = cfg.epochs
    else:
        trainer = Trainer(cfg, channels)
    cfg = trainer.cfg

    csv_path = out / "losses.csv"
    columns = ["epoch", "lr", *REPORT_KEYS]
    if resume is None or not csv_path.exists():
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)
    else:
        # drop rows past the resume point so the log stays consistent
        with open(csv_path, newline="") as fh:
            rows = [r for r in csv.reader(fh)]
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= trainer.epoch]
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)

    while trainer.epoch < cfg.epochs:
        t0 = time.perf_counter()
        means = trainer.run_epoch(normals, abnormals)
        with open(csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([trainer.epoch, repr(means["lr"])] + [repr(means[k]) for k in REPORT_KEYS])
        log(f"epoch {trainer.epoch}/{cfg.epochs} total={means['total']:.4f} recon={means['recon_X'] + means['recon_Y']:.4f} "
            f"ot={means['ot']:.4f} ({time.perf_counter() - t0:.1f}s)")
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0 and trainer.epoch < cfg.epochs:
            trainer.save(out / f"epoch{trainer.epoch:04d}.eckp")
    final = out / "final.eckp"
    trainer.save(final)
    log(f"wrote {final}")
    return final


def read_losses(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def report_total(report: dict, cfg: TrainConfig) -> float:
    """Recompute the weighted total from a report's parts."""
    ot = report["ot"]
    sep = 0.0 if (ot is None or math.isnan(ot)) else cfg.w_ot * hinge(ot, cfg.margin)
    return (report["recon_X"] + report["recon_Y"] + report["q_A"] + report["q_B"] + report["dis_A"]
            + report["dis_B"] + sep + cfg.w_adv * (report["adv_A"] + report["adv_B"]))
