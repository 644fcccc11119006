"""Training and evaluation orchestration: schedule, epoch loop, checkpointing,
deterministic seeding, and the ablation harness."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig, config_diff
from .datagen import CorpusRecord, apply_dihedral, load_dataset, load_sample
from .hierarchy import DEFAULT_HIERARCHY, ClassHierarchy
from .metrics import MetricsReport, compute_report
from .model import ForgeryDetector

CHECKPOINT_MAGIC = b"FLCK"
CHECKPOINT_VERSION = 1

ABLATION_VARIANTS = {
    "full": {},
    "no-dam": {"use_dam": False},
    "no-edge": {"use_edge_loss": False},
    "no-rgb": {"use_rgb": False},
    "no-noise": {"use_noise": False},
    "no-frequency": {"use_frequency": False},
    "srm": {"use_noise": False, "use_srm": True},
}


class EngineError(RuntimeError):
    pass


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay with a floor: lr0 * factor^(epoch // every), never below lr_floor."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr = cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
    return max(lr, cfg.lr_floor)


def set_deterministic(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# checkpoint format: a single versioned binary file whose bytes depend only on
# the model state and metadata (no timestamps), so save/load/save round-trips
# are bit-exact.

def save_checkpoint(path, model: ForgeryDetector, epoch: int, metrics: dict | None = None) -> None:
    state = model.state_dict()
    names = sorted(state)
    arrays = []
    blobs = []
    for name in names:
        arr = state[name].detach().cpu().numpy()
        blobs.append(arr.tobytes())
        arrays.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "hierarchy": model.hierarchy.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "arrays": arrays,
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ForgeryDetector, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise EngineError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise EngineError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(hlen).decode())
        cfg = TrainConfig.from_dict(meta["config"])
        hierarchy = ClassHierarchy.from_dict(meta["hierarchy"])
        model = ForgeryDetector(cfg, hierarchy)
        state = {}
        for spec in meta["arrays"]:
            nbytes = int(np.dtype(spec["dtype"]).itemsize * np.prod(spec["shape"], dtype=np.int64))
            arr = np.frombuffer(fh.read(nbytes), dtype=spec["dtype"]).reshape(spec["shape"]).copy()
            state[spec["name"]] = torch.from_numpy(arr)
        model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------


@dataclass
class LoadedSplit:
    images: np.ndarray          # (N,H,W,3) float32
    masks: np.ndarray           # (N,H,W) float32
    label_paths: np.ndarray     # (N,4) int64
    method_tags: list[str] = field(default_factory=list)


def load_split(root, records: list[CorpusRecord]) -> LoadedSplit:
    if not records:
        raise ValueError("empty split")
    samples = [load_sample(root, r) for r in records]
    return LoadedSplit(
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        label_paths=np.array([s.label_path for s in samples], dtype=np.int64),
        method_tags=[s.method_tag for s in samples],
    )


def _to_batch(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    final_report: MetricsReport
    log_records: list[dict]


def _epoch_batches(split: LoadedSplit, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE9, epoch]))
    order = rng.permutation(len(split.images))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        imgs, msks = [], []
        for i in idx:
            img, msk = split.images[i], split.masks[i]
            if cfg.augment:
                img, msk = apply_dihedral(img, msk, int(rng.integers(0, 4)),
                                          bool(rng.integers(0, 2)))
            imgs.append(img)
            msks.append(msk)
        yield (
            _to_batch(np.stack(imgs)),
            torch.from_numpy(np.stack(msks)),
            torch.from_numpy(split.label_paths[idx]),
        )


def class_weights_from_labels(label_paths: np.ndarray, stage_sizes=(2, 3, 5, 8)):
    """Inverse-frequency weight per class and stage, mean-normalized to 1."""
    weights = []
    for t, k in enumerate(stage_sizes):
        counts = np.bincount(label_paths[:, t], minlength=k).astype(np.float64)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
        present = inv > 0
        inv[present] = inv[present] / inv[present].mean()
        inv[~present] = 1.0
        weights.append(torch.tensor(inv))
    return weights


def compute_losses(model: ForgeryDetector, images, gt_masks, label_paths, cfg: TrainConfig,
                   class_weights=None):
    mask_pyr, prob_pyr = model(images)
    det = L.detection_loss(prob_pyr, label_paths, class_weights=class_weights)
    loc = L.localization_loss(mask_pyr, gt_masks)
    if cfg.use_edge_loss:
        loss_cfg = L.LossConfig(edge_weight=cfg.edge_weight, edge_mode=cfg.edge_mode)
        edge = L.edge_loss(mask_pyr.finest[:, 1], gt_masks, loss_cfg)
    else:
        edge = torch.zeros((), dtype=det.dtype)
    return L.total_loss(det, loc, edge), det, loc, edge


@torch.no_grad()
def evaluate_loaded(model: ForgeryDetector, split: LoadedSplit, batch_size: int = 8) -> MetricsReport:
    preds, masks = [], []
    for start in range(0, len(split.images), batch_size):
        images = _to_batch(split.images[start:start + batch_size])
        stage_preds, forged, _, _ = model.predict(images)
        preds.append(stage_preds.numpy())
        masks.append(forged.numpy())
    return compute_report(
        np.concatenate(preds), split.label_paths,
        np.concatenate(masks), split.masks, split.method_tags,
        stage_sizes=model.hierarchy.stage_sizes,
    )


def evaluate(checkpoint_path, corpus_root, split: str = "test",
             expected_config: TrainConfig | None = None) -> MetricsReport:
    """Deterministic full-split evaluation of a stored checkpoint."""
    model, meta = load_checkpoint(checkpoint_path)
    if expected_config is not None and expected_config.to_dict() != meta["config"]:
        raise EngineError(
            "checkpoint config does not match requested config:\n"
            + config_diff(meta["config"], expected_config.to_dict())
        )
    train_recs, test_recs = load_dataset(corpus_root, split_seed=model.cfg.seed)
    records = train_recs if split == "train" else test_recs
    if not records:
        raise ValueError(f"empty {split} split in {corpus_root}")
    return evaluate_loaded(model, load_split(corpus_root, records))


def train(cfg: TrainConfig, corpus_root, out_dir, eval_split: str = "train") -> TrainResult:
    """Full training run; fixed seed plus deterministic mode reproduces the log exactly."""
    set_deterministic(cfg.deterministic)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    log_path = out_dir / "metrics_log.jsonl"

    train_recs, _ = load_dataset(corpus_root, split_seed=cfg.seed)
    split = load_split(corpus_root, train_recs)
    if split.images.shape[1] != cfg.image_size:
        raise ValueError(
            f"corpus images are {split.images.shape[1]}px but config says {cfg.image_size}px"
        )

    torch.manual_seed(cfg.seed)
    model = ForgeryDetector(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    weights = class_weights_from_labels(split.label_paths) if cfg.class_balance else None

    log_records: list[dict] = []
    have_checkpoint = False
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        sums = {"total": 0.0, "det": 0.0, "loc": 0.0, "edge": 0.0}
        n_batches = 0
        model.train()
        for images, gt_masks, labels in _epoch_batches(split, cfg, epoch):
            optimizer.zero_grad()
            try:
                total, det, loc, edge = compute_losses(model, images, gt_masks, labels, cfg,
                                                       class_weights=weights)
            except ValueError as exc:
                raise EngineError(
                    f"aborting at epoch {epoch}: {exc}"
                    + (f" (last good checkpoint: {ckpt_path})" if have_checkpoint else "")
                ) from exc
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            sums["total"] += float(total.detach())
            sums["det"] += float(det.detach())
            sums["loc"] += float(loc.detach())
            sums["edge"] += float(edge.detach())
            n_batches += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "total_loss": sums["total"] / n_batches,
            "det_loss": sums["det"] / n_batches,
            "loc_loss": sums["loc"] / n_batches,
            "edge_loss": sums["edge"] / n_batches,
        }
        if not math.isfinite(record["total_loss"]):
            raise EngineError(
                f"non-finite loss at epoch {epoch}"
                + (f" (last good checkpoint: {ckpt_path})" if have_checkpoint else "")
            )
        log_records.append(record)
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            save_checkpoint(ckpt_path, model, epoch)
            have_checkpoint = True

    model.eval()
    report = evaluate_loaded(model, split if eval_split == "train"
                             else load_split(corpus_root, load_dataset(corpus_root, cfg.seed)[1]))
    final = {
        "epoch": cfg.epochs - 1,
        "final": True,
        "image_acc": report.image_acc,
        "image_f1": report.image_f1,
        "pixel_acc": report.pixel_acc,
        "pixel_f1": report.pixel_f1,
    }
    log_records.append(final)
    save_checkpoint(ckpt_path, model, cfg.epochs - 1, metrics=final)

    tmp = log_path.with_suffix(".jsonl.tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log_records))
    os.replace(tmp, log_path)
    return TrainResult(ckpt_path, log_path, report, log_records)


def ablate(base_cfg: TrainConfig, variants: list[str], corpus_root, out_dir) -> list[dict]:
    """Train/evaluate each named variant with the shared seed; rows mirror the
    detection/localization ACC/F1 comparison layout."""
    out_dir = Path(out_dir)
    rows = []
    for name in variants:
        if name not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {name!r}; "
                             f"choose from {sorted(ABLATION_VARIANTS)}")
        cfg = base_cfg.replace(**ABLATION_VARIANTS[name])
        result = train(cfg, corpus_root, out_dir / name.replace("-", "_"))
        rows.append({
            "variant": name,
            "det_acc": result.final_report.image_acc,
            "det_f1": result.final_report.image_f1,
            "loc_acc": result.final_report.pixel_acc,
            "loc_f1": result.final_report.pixel_f1,
        })
    table_path = out_dir / "ablation.jsonl"
    tmp = table_path.with_suffix(".jsonl.tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    os.replace(tmp, table_path)
    return rows


def render_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':16s}{'det ACC':>10s}{'det F1':>10s}{'loc ACC':>10s}{'loc F1':>10s}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['variant']:16s}{100 * r['det_acc']:10.2f}{100 * r['det_f1']:10.2f}"
            f"{100 * r['loc_acc']:10.2f}{100 * r['loc_f1']:10.2f}"
        )
    return "\n".join(lines)
