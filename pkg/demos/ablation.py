"""Compare the full model with a codebook-free ablation on the motion-anomaly dataset.

Usage: python3 demos/ablation.py [OUT_DIR] [EPOCHS]

Both runs share the data, the seed and every other setting of
configs/reference.json; the ablation bypasses quantization and drops the
transport term. Prints a markdown table of probe AUC and ACC.
"""
import sys
from pathlib import Path

import numpy as np

from echorecon.evaluate import extract_features, metrics, probe_fit
from echorecon.syndata import DatasetConfig, generate_dataset, load_dataset
from echorecon.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]


def probe(ckpt, manifest):
    feats, labels = {}, {}
    for split in ("train", "test"):
        recs = manifest.split(split)
        feats[split] = extract_features(ckpt, [manifest.load(r)[0] for r in recs])
        labels[split] = np.array([r.cls != "normal" for r in recs], dtype=float)
    model = probe_fit(feats["train"], labels["train"], "classification")
    return metrics(model.predict(feats["test"]), labels["test"], "classification")


def main() -> None:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/ablation")
    base = TrainConfig.load(ROOT / "configs" / "reference.json").to_json()
    if len(sys.argv) > 2:
        base["epochs"] = int(sys.argv[2])
    data = out / "data"
    if not (data / "manifest.json").exists():
        generate_dataset(DatasetConfig(n_normal=125, n_abnormal=125, anomaly="motion", n_frames=16, size=64), 0, data)
    manifest = load_dataset(data)

    rows = []
    for name, overrides in (("full", {}), ("no codebook, w_ot=0", {"use_cdc": False, "w_ot": 0.0})):
        cfg = TrainConfig.from_json({**base, **overrides})
        ckpt = train(cfg, data, out / name.split(",")[0].replace(" ", "_"), deterministic=True)
        rep = probe(ckpt, manifest)
        rows.append(f"| {name} | {rep.auc:.3f} | {rep.acc:.3f} |")
    print("| model | AUC | ACC |\n|---|---|---|\n" + "\n".join(rows))


if __name__ == "__main__":
    main()
