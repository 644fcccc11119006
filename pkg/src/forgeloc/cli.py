"""Command-line driver: corpus generation, training, evaluation, prediction,
ablation, and mask-overlay visualization.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Output files are
written via a temp file + rename, and each run directory gets a manifest of
input/output hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import TrainConfig
from .datagen import (
    METHOD_TAGS,
    CorpusSpec,
    generate_corpus,
)
from .engine import (
    ABLATION_VARIANTS,
    ablate,
    evaluate,
    load_checkpoint,
    render_ablation_table,
    set_deterministic,
    train,
)

OVERLAY_TINT = np.array([220, 40, 40], dtype=np.float64)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(run_dir: Path, command: str, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
    }
    path = run_dir / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_save_image(path: Path, array: np.ndarray) -> None:
    tmp = path.with_suffix(".png.tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("image_size", "epochs", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    return cfg.replace(**overrides) if overrides else cfg


def cmd_generate(args) -> int:
    counts = {tag: args.per_method for tag in METHOD_TAGS}
    if args.counts:
        counts.update({k: int(v) for k, v in json.loads(args.counts).items()})
    spec = CorpusSpec(counts=counts, image_size=args.size, seed=args.seed,
                      output_root=args.out)
    manifest = generate_corpus(spec, workers=args.workers)
    out = Path(args.out)
    _write_run_manifest(out, "generate", [], [out / "manifest.jsonl"])
    print(f"wrote {len(manifest.records)} samples under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    result = train(cfg, args.corpus, out)
    report = result.final_report
    print(f"final train-split metrics: image ACC {report.image_acc:.4f} "
          f"F1 {report.image_f1:.4f} | pixel ACC {report.pixel_acc:.4f} "
          f"F1 {report.pixel_f1:.4f}")
    cfg.save(out / "config.json")
    _write_run_manifest(out, "train", [Path(args.corpus) / "manifest.jsonl"],
                        [result.checkpoint_path, result.log_path, out / "config.json"])
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.ckpt, args.corpus, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    _atomic_write_text(report_path, report.to_json_record() + "\n")
    print(report.render_table())
    _write_run_manifest(out, "eval", [Path(args.ckpt)], [report_path])
    return 0


def _overlay(image: np.ndarray, forged: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Tint forged pixels over the input, matching the qualitative figures."""
    out = image.astype(np.float64).copy()
    hit = forged >= threshold
    out[hit] = 0.55 * out[hit] + 0.45 * OVERLAY_TINT
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    set_deterministic(model.cfg.deterministic)
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        print(f"cannot read image {args.image}: {exc}", file=sys.stderr)
        return 1
    import torch

    batch = torch.from_numpy(image.transpose(2, 0, 1)).unsqueeze(0)
    stage_preds, forged, _, prob_pyr = model.predict(batch)
    forged_np = forged[0].numpy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask_path = out / "mask.png"
    overlay_path = out / "overlay.png"
    _atomic_save_image(mask_path, np.clip(np.rint(forged_np * 255), 0, 255).astype(np.uint8))
    _atomic_save_image(overlay_path, _overlay(np.rint(image * 255), forged_np))

    record = {
        "input": str(args.image),
        "stages": [
            {
                "label": model.hierarchy.stage_names[t][int(stage_preds[0, t])],
                "probabilities": [round(float(x), 6) for x in prob_pyr.probs[t][0]],
            }
            for t in range(4)
        ],
        "mask": str(mask_path),
        "overlay": str(overlay_path),
        "forged_fraction": float((forged_np >= 0.5).mean()),
    }
    record_path = out / "prediction.json"
    _atomic_write_text(record_path, json.dumps(record, indent=2) + "\n")
    print(json.dumps({"stages": [s["label"] for s in record["stages"]],
                      "forged_fraction": record["forged_fraction"]}))
    _write_run_manifest(out, "predict", [Path(args.ckpt), Path(args.image)],
                        [mask_path, overlay_path, record_path])
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate(cfg, variants, args.corpus, out)
    print(render_ablation_table(rows))
    _write_run_manifest(out, "ablate", [Path(args.corpus) / "manifest.jsonl"],
                        [out / "ablation.jsonl"])
    return 0


def cmd_visualize(args) -> int:
    from .datagen import load_dataset, load_sample
    import torch

    model, _ = load_checkpoint(args.ckpt)
    train_recs, test_recs = load_dataset(args.corpus, split_seed=model.cfg.seed)
    records = train_recs if args.split == "train" else test_recs
    records = records[: args.n]
    if not records:
        print("no samples to visualize", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, rec in enumerate(records):
        sample = load_sample(args.corpus, rec)
        batch = torch.from_numpy(sample.image.transpose(2, 0, 1)).unsqueeze(0)
        _, forged, _, _ = model.predict(batch)
        forged_np = forged[0].numpy()
        img_u8 = np.rint(sample.image * 255).astype(np.uint8)
        gt_u8 = np.repeat((sample.mask * 255).astype(np.uint8)[..., None], 3, axis=2)
        pred_u8 = np.repeat(np.clip(np.rint(forged_np * 255), 0, 255).astype(np.uint8)[..., None],
                            3, axis=2)
        panel = np.concatenate([img_u8, gt_u8, pred_u8, _overlay(img_u8, forged_np)], axis=1)
        path = out / f"panel_{i:03d}_{rec.method_tag}.png"
        _atomic_save_image(path, panel)
        outputs.append(path)
    _write_run_manifest(out, "visualize", [Path(args.ckpt)], outputs)
    print(f"wrote {len(outputs)} panels under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgeloc",
                                     description="Forged-image detection and localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a procedural corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-method", type=int, default=8)
    p.add_argument("--counts", help="JSON object of per-tag count overrides")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict labels and mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run ablation variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--variants", default="full,no-dam,no-edge,srm",
                   help=f"comma list from {sorted(ABLATION_VARIANTS)}")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="write side-by-side localization panels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
