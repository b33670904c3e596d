"""Supervised training loop and zip checkpoints.

Cross-entropy over the fused logits, SGD with momentum and cosine decay, the
learnable quantile clamped after every step, and fully seeded shuffling and
raw-branch sampling so identical configurations reproduce identical runs.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    FormatError,
    LabelSpace,
    MmharError,
    ValidationError,
    read_clip_archive,
    read_zip_entries,
    write_zip_entries,
)
from .model import DopplerActionNet, ModelConfig

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"  # cosine | none
    seed: int = 0
    device: str = "cpu"
    class_weighting: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate and weight_decay must be >= 0")
        if self.schedule not in ("cosine", "none"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")


@dataclass
class ClipDataset:
    """In-memory stack of standardized clips ready for the model."""

    clips: torch.Tensor  # [N, T, P, C] float32
    pad: torch.Tensor  # [N, T] bool
    labels: torch.Tensor  # [N] int64
    sources: list
    ids: list

    def __len__(self) -> int:
        return self.clips.shape[0]

    def subset(self, indices) -> "ClipDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ClipDataset(
            clips=self.clips[idx],
            pad=self.pad[idx],
            labels=self.labels[idx],
            sources=[self.sources[i] for i in idx],
            ids=[self.ids[i] for i in idx],
        )


def load_dataset(manifest_path, rows, label_space: LabelSpace) -> ClipDataset:
    """Read every archive a manifest references into one tensor stack."""
    if not rows:
        raise ValidationError("empty dataset: manifest selection has no rows")
    clips, pads, labels, sources, ids = [], [], [], [], []
    for row in rows:
        clip, sid, label, source = read_clip_archive(
            row.resolve(manifest_path), label_space=label_space
        )
        clips.append(clip.data)
        pads.append(clip.pad_mask)
        labels.append(label)
        sources.append(source.source_name)
        ids.append(row.sample_id)
    return ClipDataset(
        clips=torch.from_numpy(np.stack(clips)),
        pad=torch.from_numpy(np.stack(pads)),
        labels=torch.tensor(labels, dtype=torch.int64),
        sources=sources,
        ids=ids,
    )


def clip_seed(base_seed: int, epoch: int, index: int) -> int:
    """Stable per-sample sampling seed, independent of batch composition."""
    ss = np.random.SeedSequence((int(base_seed), int(epoch), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def train(model: DopplerActionNet, dataset: ClipDataset, cfg: TrainConfig):
    """Minimize cross-entropy over the fused logits; returns per-epoch log rows.

    The quantile parameter is updated jointly with all weights through the
    straight-through path and clamped to [q_min, 1 - q_min] after every step.
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("empty dataset: nothing to train on")
    k = model.config.k
    if int(dataset.labels.min()) < 0 or int(dataset.labels.max()) >= k:
        raise ValidationError(
            f"dataset labels span [{int(dataset.labels.min())}, {int(dataset.labels.max())}] "
            f"outside the {k}-class label space"
        )
    device = torch.device(cfg.device)
    model.to(device)
    torch.manual_seed(cfg.seed)

    weight = None
    if cfg.class_weighting:
        counts = torch.bincount(dataset.labels, minlength=k).to(torch.float32)
        weight = torch.where(counts > 0, n / (k * counts), torch.zeros_like(counts)).to(device)

    opt = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    scheduler = None
    if cfg.schedule == "cosine" and cfg.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)

    shuffle_rng = np.random.default_rng(cfg.seed)
    q_lo, q_hi = model.config.q_min, 1.0 - model.config.q_min
    log = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total_loss, total_correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = dataset.subset(idx)
            seeds = [clip_seed(cfg.seed, epoch, int(i)) for i in idx]
            y_hat, _ = model(batch.clips.to(device), batch.pad.to(device), seeds=seeds)
            target = batch.labels.to(device)
            loss = F.cross_entropy(y_hat, target, weight=weight)
            if not torch.isfinite(loss):
                raise MmharError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"loss={float(loss.detach())}, q={float(model.q.detach())}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.q.clamp_(q_lo, q_hi)
            total_loss += float(loss.detach()) * len(idx)
            total_correct += int((y_hat.argmax(dim=1) == target).sum())
        if scheduler is not None:
            scheduler.step()
        log.append(
            {
                "epoch": epoch,
                "loss": total_loss / n,
                "acc": total_correct / n,
                "q": float(model.q.detach()),
            }
        )
    return log


def write_train_log(path, log):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "acc", "q"])
        for row in log:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["acc"]), repr(row["q"])])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_save(model: DopplerActionNet, path, extra=None):
    """Write all learnable state plus the model config to a zip checkpoint."""
    state = model.state_dict()
    params_meta = []
    entries = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        params_meta.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        entries.append((f"tensor/{name}", np.ascontiguousarray(arr).tobytes()))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "class_names": list(model.class_names),
        "bank_prompts": list(model.bank_prompts),
        "bank_encoder": model.bank_encoder,
        "params": params_meta,
        "extra": extra or {},
    }
    all_entries = [("meta", json.dumps(meta, sort_keys=True).encode("utf-8"))] + entries
    write_zip_entries(path, all_entries)


def checkpoint_load(path, model: DopplerActionNet = None):
    """Restore a checkpoint; returns ``(model, meta)``.

    With ``model=None`` the network is rebuilt from the stored config.
    Loading into an existing model validates every tensor shape first.
    """
    names = read_zip_entries(path, ["meta"])
    try:
        meta = json.loads(names["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} has malformed meta: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint {path} has format version {meta.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        class_names = tuple(meta["class_names"])
        params_meta = meta["params"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint {path} meta missing or invalid field: {exc}") from None

    if model is None:
        model = DopplerActionNet(config, LabelSpace(class_names))
    entry_names = [f"tensor/{p['name']}" for p in params_meta]
    blobs = read_zip_entries(path, entry_names)

    current = model.state_dict()
    loaded = {}
    for pm in params_meta:
        name, shape, dtype = pm["name"], tuple(pm["shape"]), pm["dtype"]
        if name not in current:
            raise FormatError(f"checkpoint {path} has unexpected tensor {name!r}")
        want = tuple(current[name].shape)
        if want != shape:
            raise FormatError(
                f"checkpoint {path} tensor {name!r} has shape {shape}, model expects {want}"
            )
        raw = blobs[f"tensor/{name}"]
        arr = np.frombuffer(raw, dtype=np.dtype(dtype))
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"checkpoint {path} tensor {name!r} has truncated data")
        loaded[name] = torch.from_numpy(arr.reshape(shape).copy())
    missing = set(current) - set(loaded)
    if missing:
        raise FormatError(f"checkpoint {path} missing tensors: {sorted(missing)}")
    model.load_state_dict(loaded)
    return model, meta
