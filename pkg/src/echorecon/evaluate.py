"""Frozen-encoder evaluation: linear probes, Fréchet feature distance, Dice and exports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage, optimize, stats

from . import checkpoint as eckp
from .errors import DataError, NumericError, ParameterError, ShapeError
from .nets import pooled
from .syndata import (STRUCTURES, WALL_MIDPOINT, GeneratorConfig, eval_indices, eval_transform, load_dataset,
                      sample_and_augment)
from .train import CycleModel, TrainConfig, load_model

FEATURE_SOURCE = "phi_A.encoder"
RIDGE = 1e-4
PROBE_TOL = 1e-8
SHRINKAGE = 0.1


# ---------------------------------------------------------------------------
# features


def _as_model(ckpt) -> tuple[CycleModel, TrainConfig]:
    if isinstance(ckpt, CycleModel):
        raise ParameterError("pass (model, cfg) or a checkpoint path")
    if isinstance(ckpt, tuple):
        return ckpt[0], ckpt[1]
    model, cfg, header = load_model(ckpt)
    if "phi_A" not in header.get("provenance", {}):
        raise eckp.FormatError(f"{ckpt}: checkpoint has no phi_A provenance tag")
    return model, cfg


@torch.no_grad()
def extract_features(ckpt, clips) -> np.ndarray:
    """Pooled quantized features of phi_A's encoder, one row per clip (eval preprocessing)."""
    model, cfg = _as_model(ckpt)
    model.eval()
    rows = []
    for clip in clips:
        frames = sample_and_augment(clip, None, False, cfg.augment).frames
        feats = model.phi_A.encoder(torch.from_numpy(frames)[None])
        q = model.phi_A.quantize(feats)
        rows.append(pooled(q.quantized)[0].double().numpy())
    return np.stack(rows) if rows else np.zeros((0, cfg.dim))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeModel:
    weight: np.ndarray
    bias: float
    task: str
    mean: np.ndarray
    scale: np.ndarray

    def decision(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias

    def predict(self, features) -> np.ndarray:
        """Probabilities for classification, values for regression."""
        out = self.decision(features)
        return _sigmoid(out) if self.task == "classification" else out


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def probe_fit(features, targets, task: str) -> ProbeModel:
    """Fit a single linear layer on standardized frozen features.

    Classification minimizes the mean logistic loss, regression solves least
    squares; both carry an L2 penalty of 1e-4 on the weights only.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError(f"features {x.shape} and targets {y.shape} do not line up")
    if x.shape[0] < 2:
        raise DataError("probe needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite features")
    mean = x.mean(0)
    scale = x.std(0)
    scale[scale < 1e-12] = 1.0
    z = (x - mean) / scale
    n, d = z.shape

    if task == "regression":
        a = np.hstack([z, np.ones((n, 1))])
        reg = np.diag([RIDGE * n] * d + [0.0])
        sol = np.linalg.solve(a.T @ a + reg, a.T @ y)
        return ProbeModel(sol[:d], float(sol[d]), task, mean, scale)
    if task != "classification":
        raise ParameterError(f"unknown probe task {task!r}")
    labels = np.unique(y)
    if labels.size < 2:
        raise DataError("classification probe needs both classes in the training targets")
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise DataError("classification targets must be 0/1")

    def loss(theta):
        w, b = theta[:d], theta[d]
        t = z @ w + b
        # log(1 + e^t) - y t, stable form
        val = np.logaddexp(0.0, t) - y * t
        grad_t = _sigmoid(t) - y
        f = val.mean() + 0.5 * RIDGE * w @ w
        g = np.concatenate([z.T @ grad_t / n + RIDGE * w, [grad_t.mean()]])
        return f, g

    res = optimize.minimize(loss, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                            options={"gtol": PROBE_TOL, "ftol": 1e-15, "maxiter": 10000})
    return ProbeModel(res.x[:d], float(res.x[d]), task, mean, scale)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    auc: float | None = None
    acc: float | None = None
    mae: float | None = None
    frechet: float | None = None
    dice: float | None = None
    n_samples: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC with half credit for ties; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics(predictions, targets, task: str) -> MetricReport:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape} predictions vs {t.shape} targets")
    if p.size == 0:
        raise DataError("no samples to score")
    if task == "classification":
        acc = float(np.mean((p >= 0.5) == (t >= 0.5)))
        return MetricReport(auc=auc_score(p, t >= 0.5), acc=acc, n_samples=p.size)
    if task == "regression":
        return MetricReport(mae=float(np.mean(np.abs(p - t))), n_samples=p.size)
    raise ParameterError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Fréchet feature distance


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -1e-8 * max(1.0, abs(vals).max()):
        raise NumericError(f"covariance has a negative eigenvalue {vals.min():.3g}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, dtype=np.float64)), np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, dtype=np.float64)), np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (mu_a.size, mu_a.size):
        raise ShapeError("moment shapes do not agree")
    # Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), which stays symmetric
    root_a = _psd_sqrt(cov_a)
    vals = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    cross = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    dist = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(dist, 0.0)


def _moments(x: np.ndarray):
    j, d = x.shape
    mu = x.mean(0)
    cov = np.cov(x, rowvar=False, bias=False).reshape(d, d) if j > 1 else np.zeros((d, d))
    if j < d + 1:
        # rank-deficient sample covariance: shrink toward a scaled identity
        cov = (1.0 - SHRINKAGE) * cov + SHRINKAGE * (np.trace(cov) / d) * np.eye(d)
    return mu, cov


def frechet_feature_distance(feats_a, feats_b) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sets {a.shape} and {b.shape} are not comparable")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("feature sets contain NaN or inf")
    if np.array_equal(a, b):
        return 0.0
    return frechet_from_moments(*_moments(a), *_moments(b))


# ---------------------------------------------------------------------------
# Dice and reconstruction


def dice(mask_pred, mask_gt) -> float:
    a = np.asarray(mask_pred)
    b = np.asarray(mask_gt)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.all((m == 0) | (m == 1)):
            raise DataError("dice needs binary masks")
    a, b = a.astype(bool), b.astype(bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / total)


DIRECTIONS = {"a2b": "phi_A", "b2a": "phi_B"}


@torch.no_grad()
def reconstruct(ckpt, clip, direction: str) -> np.ndarray:
    """Run one translator unmasked on eval-preprocessed frames; returns (N, H, W, C) in [0, 1]."""
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {sorted(DIRECTIONS)}")
    model, cfg = _as_model(ckpt)
    model.eval()
    frames = sample_and_augment(clip, None, False, cfg.augment).frames
    out, _ = getattr(model, DIRECTIONS[direction])(torch.from_numpy(frames)[None])
    return out[0].numpy()


def _center_pixel(center, h: int, w: int, cfg: TrainConfig, src_hw) -> tuple[int, int]:
    x, y = center
    rh, rw = (cfg.resize, cfg.resize) if cfg.resize else src_hw
    px, py = x * rw, y * rh
    if cfg.crop is not None:
        px -= (rw - cfg.crop) / 2
        py -= (rh - cfg.crop) / 2
    return int(np.clip(np.floor(py), 0, h - 1)), int(np.clip(np.floor(px), 0, w - 1))


def structure_masks(frames: np.ndarray, centers=None, cfg: TrainConfig | None = None, src_hw=None) -> np.ndarray:
    """Threshold chamber interiors below the wall midpoint; (N, H, W, C) -> (4, N, H, W) uint8.

    Dark regions touching the frame border are background. Each structure is
    the interior component under its nominal centre (empty when that pixel is wall).
    """
    centers = centers if centers is not None else GeneratorConfig().nominal_centers
    cfg = cfg or TrainConfig()
    n, h, w = frames.shape[:3]
    src_hw = src_hw or (h, w)
    pix = [_center_pixel(c, h, w, cfg, src_hw) for c in centers]
    out = np.zeros((len(centers), n, h, w), dtype=np.uint8)
    for t in range(n):
        dark = frames[t].mean(-1) < WALL_MIDPOINT
        lab, _ = ndimage.label(dark)
        border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
        for k, (py, px) in enumerate(pix):
            comp = lab[py, px]
            if comp and comp not in border:
                out[k, t] = lab == comp
    return out


def mean_dice(pred_masks: np.ndarray, gt_masks: np.ndarray) -> float:
    return float(np.mean([dice(pred_masks[k, t], gt_masks[k, t])
                          for k in range(pred_masks.shape[0]) for t in range(pred_masks.shape[1])]))


# ---------------------------------------------------------------------------
# exports


def pca_2d(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    # fix signs so the projection is reproducible
    signs = np.sign(vt[:, np.argmax(np.abs(vt), axis=1)].diagonal())
    signs[signs == 0] = 1.0
    comps = vt[:2] * signs[:2, None]
    proj = xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 2 - proj.shape[1]))])
    return proj


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def dump_banks(ckpt, out_dir) -> list[Path]:
    _, tensors = eckp.read_checkpoint(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag in ("A", "B"):
        rows = tensors[f"model.bank_{tag}.rows"]
        fill = int(tensors[f"model.bank_{tag}.fill"])
        path = out / f"bank_{tag}.csv"
        _write_rows(path, [f"f{i}" for i in range(rows.shape[1])], [[repr(float(v)) for v in r] for r in rows[:fill]])
        paths.append(path)
    return paths


def _labels_for(task: str, records) -> np.ndarray:
    if task == "cls":
        return np.array([0.0 if r.cls == "normal" else 1.0 for r in records])
    return np.array([r.ef_analog for r in records])


def run_eval(ckpt, data_dir, task: str, out_dir, shuffle_seed: int | None = None,
             dump_bank_csv: bool = False, log=print) -> MetricReport:
    """Evaluate a checkpoint on a dataset and write ``metrics.json``, ``features.csv``, ``embedding2d.csv``.

    ``cls`` and ``reg`` fit a probe on the train split and score the test
    split; ``recon`` reports Fréchet distance and Dice of b2a reconstructions.
    ``shuffle_seed`` permutes the training targets (label-shuffling control).
    """
    if task not in ("cls", "reg", "recon"):
        raise ParameterError(f"task must be cls, reg or recon, got {task!r}")
    model, cfg, _ = load_model(ckpt)
    manifest = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_recs, test_recs = manifest.split("train"), manifest.split("test")
    if not train_recs or not test_recs:
        raise DataError("dataset needs non-empty train and test splits")

    def load(recs):
        return [manifest.load(r) for r in recs]

    train_data, test_data = load(train_recs), load(test_recs)
    f_train = extract_features((model, cfg), [f for f, _ in train_data])
    f_test = extract_features((model, cfg), [f for f, _ in test_data])

    if task in ("cls", "reg"):
        probe_task = "classification" if task == "cls" else "regression"
        y_train, y_test = _labels_for(task, train_recs), _labels_for(task, test_recs)
        if shuffle_seed is not None:
            y_train = np.random.default_rng(shuffle_seed).permutation(y_train)
        probe = probe_fit(f_train, y_train, probe_task)
        report = metrics(probe.predict(f_test), y_test, probe_task)
    else:
        normal = [(f, m) for (f, m), r in zip(test_data, test_recs) if r.cls == "normal"]
        abnormal = [(f, m) for (f, m), r in zip(test_data, test_recs) if r.cls != "normal"]
        if not normal or not abnormal:
            raise DataError("recon evaluation needs normal and abnormal test clips")
        recon = [reconstruct((model, cfg), f, "b2a") for f, _ in abnormal]
        real = extract_features((model, cfg), [f for f, _ in normal])
        fake = extract_features((model, cfg), recon)
        src_hw = normal[0][0].shape[1:3]
        dices = []
        for (f, m), r in zip(abnormal, recon):
            gt = eval_transform(m[:, eval_indices(f.shape[0], cfg.augment)].transpose(1, 2, 3, 0), cfg.augment, order=0)
            gt = gt.transpose(3, 0, 1, 2)
            dices.append(mean_dice(structure_masks(r, cfg=cfg, src_hw=src_hw), gt))
        report = MetricReport(frechet=frechet_feature_distance(real, fake), dice=float(np.mean(dices)),
                              n_samples=len(abnormal))

    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    feats = np.vstack([f_train, f_test])
    recs = train_recs + test_recs
    _write_rows(out / "features.csv", ["id", "class", "split", *[f"f{i}" for i in range(feats.shape[1])]],
                [[r.id, r.cls, r.split, *[repr(float(v)) for v in row]] for r, row in zip(recs, feats)])
    emb = pca_2d(feats)
    _write_rows(out / "embedding2d.csv", ["id", "class", "split", "pc1", "pc2"],
                [[r.id, r.cls, r.split, repr(float(a)), repr(float(b))] for r, (a, b) in zip(recs, emb)])
    if dump_bank_csv:
        dump_banks(ckpt, out)
    log(f"eval {task}: " + json.dumps({k: v for k, v in report.to_json().items() if v is not None}, sort_keys=True))
    return report


__all__ = [
    "FEATURE_SOURCE", "ProbeModel", "MetricReport", "STRUCTURES", "extract_features", "probe_fit", "metrics",
    "auc_score", "frechet_feature_distance", "frechet_from_moments", "dice", "reconstruct", "structure_masks",
    "mean_dice", "pca_2d", "dump_banks", "run_eval",
]
