"""The full network: densify, embed, recalibrate, pool, classify, align.

The backbone is pluggable through a name registry; the reference backbone is
a small permutation-invariant set function (shared per-point MLP followed by
channel-wise max pooling). The text alignment branch scores the projected
global feature against a bank of class-prompt embeddings and its similarity
vector is fused additively with the classifier logits.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import densify
from .core import FormatError, LabelSpace, ValidationError, read_zip_entries, write_zip_entries
from .recalib import FilmHeads, PointEmbedding, masked_motion_summary, recalibrate

DEFAULT_PROMPT_TEMPLATE = "a mmWave point cloud of a person [CLS]"

BACKBONES = {}


def register_backbone(name):
    """Class decorator registering a backbone builder under ``name``."""

    def wrap(cls):
        BACKBONES[name] = cls
        return cls

    return wrap


def build_backbone(name: str, c_emb: int, d: int) -> nn.Module:
    if name not in BACKBONES:
        raise ValidationError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name](c_emb, d)


@register_backbone("reference")
class ReferenceBackbone(nn.Module):
    """Shared per-point MLP (C_emb -> 128 -> D) with channel-wise max pooling."""

    HIDDEN = 128

    def __init__(self, c_emb: int, d: int):
        super().__init__()
        self.out_dim = d
        self.net = nn.Sequential(
            nn.Linear(c_emb, self.HIDDEN), nn.ReLU(inplace=True), nn.Linear(self.HIDDEN, d)
        )

    def forward(self, feats):
        # [..., N, C_emb] -> [..., D]
        if feats.shape[-2] == 0:
            raise ValidationError("backbone requires at least one point")
        return self.net(feats).max(dim=-2).values


@register_backbone("mini")
class MiniBackbone(ReferenceBackbone):
    """Half-width variant of the reference backbone for CPU-budget runs."""

    HIDDEN = 64


@register_backbone("meanmax")
class MeanMaxBackbone(nn.Module):
    """Per-point MLP with concatenated mean and max pooling.

    Unlike pure max pooling, the mean branch is density-sensitive: duplicating
    motion-salient points shifts the pooled statistics toward them, so the
    geometric reparameterization actually re-weights the global feature.
    """

    HIDDEN = 64

    def __init__(self, c_emb: int, d: int):
        super().__init__()
        self.out_dim = d
        self.net = nn.Sequential(
            nn.Linear(c_emb, self.HIDDEN), nn.ReLU(inplace=True), nn.Linear(self.HIDDEN, d)
        )
        self.mix = nn.Linear(2 * d, d)

    def forward(self, feats):
        if feats.shape[-2] == 0:
            raise ValidationError("backbone requires at least one point")
        h = self.net(feats)
        pooled = torch.cat([h.mean(dim=-2), h.max(dim=-2).values], dim=-1)
        return self.mix(pooled)


def classify(head: nn.Linear, f_global):
    """Affine map from the global feature to per-class logits."""
    return head(f_global)


# ---------------------------------------------------------------------------
# Text embedding bank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBank:
    """Row-normalized class-prompt embeddings in a shared semantic space."""

    matrix: np.ndarray  # [K, C_text] float32, rows L2-normalized
    prompts: tuple
    encoder_name: str

    @property
    def class_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def format_prompt(template: str, class_name: str) -> str:
    return template.replace("[CLS]", class_name)


def hash_text_encoder(prompts, dim: int = 64) -> np.ndarray:
    """Deterministic stand-in for a pretrained text encoder.

    Each prompt is hashed to a seed that draws a fixed Gaussian vector, so
    the suite needs no network access or model downloads. Distinct prompts
    get near-orthogonal directions in expectation.
    """
    out = np.empty((len(prompts), dim), dtype=np.float64)
    for i, prompt in enumerate(prompts):
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        out[i] = np.random.default_rng(seed).standard_normal(dim)
    return out


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("embedding bank contains a zero row; cannot normalize")
    return (matrix / norms).astype(np.float32)


def build_embedding_bank(class_names, template=DEFAULT_PROMPT_TEMPLATE, encoder=None, c_text=64):
    """Build a bank by substituting each class name into the prompt template."""
    prompts = tuple(format_prompt(template, name) for name in class_names)
    if encoder is None:
        matrix = hash_text_encoder(prompts, c_text)
        encoder_name = "hash-stub"
    else:
        matrix = np.asarray(encoder(list(prompts)), dtype=np.float64)
        encoder_name = getattr(encoder, "name", encoder.__class__.__name__)
    if matrix.ndim != 2 or matrix.shape[0] != len(prompts):
        raise ValidationError(
            f"encoder returned shape {matrix.shape}, expected [{len(prompts)}, C_text]"
        )
    return EmbeddingBank(_normalize_rows(matrix), prompts, encoder_name)


def save_embedding_bank(bank: EmbeddingBank, path):
    data = np.ascontiguousarray(bank.matrix, dtype="<f4")
    meta = {
        "shape": list(bank.matrix.shape),
        "prompts": list(bank.prompts),
        "encoder_name": bank.encoder_name,
    }
    write_zip_entries(path, [("data", data.tobytes()), ("meta", json.dumps(meta, sort_keys=True).encode())])


def load_embedding_bank(path, expected_k=None) -> EmbeddingBank:
    entries = read_zip_entries(path, ["data", "meta"])
    try:
        meta = json.loads(entries["meta"].decode("utf-8"))
        shape = tuple(int(s) for s in meta["shape"])
        prompts = tuple(meta["prompts"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"embedding bank {path} has malformed meta: {exc}") from None
    if len(shape) != 2 or len(prompts) != shape[0]:
        raise FormatError(f"embedding bank {path} meta inconsistent: shape {shape}")
    expected_bytes = shape[0] * shape[1] * 4
    if len(entries["data"]) != expected_bytes:
        raise FormatError(
            f"embedding bank {path} data is {len(entries['data'])} bytes, expected {expected_bytes}"
        )
    if expected_k is not None and shape[0] != expected_k:
        raise ValidationError(
            f"embedding bank has {shape[0]} classes, label space expects {expected_k}"
        )
    matrix = np.frombuffer(entries["data"], dtype="<f4").reshape(shape).astype(np.float64)
    return EmbeddingBank(_normalize_rows(matrix), prompts, meta.get("encoder_name", "unknown"))


# ---------------------------------------------------------------------------
# Text alignment
# ---------------------------------------------------------------------------


def alignment_similarity(f_mmw, f_text):
    """Diagonal of the row-softmaxed similarity between projected and text rows.

    Both inputs must be row-normalized; shapes ``[..., K, C]`` and ``[K, C]``.
    """
    f_mmw = torch.as_tensor(f_mmw)
    f_text = torch.as_tensor(f_text, dtype=f_mmw.dtype, device=f_mmw.device)
    if f_mmw.shape[-2:] != f_text.shape:
        raise ValidationError(
            f"similarity shape mismatch: projected {tuple(f_mmw.shape)}, "
            f"text {tuple(f_text.shape)}"
        )
    sims = torch.softmax(f_mmw @ f_text.transpose(-1, -2), dim=-1)
    return torch.diagonal(sims, dim1=-2, dim2=-1)


def fuse(z, s, alpha: float):
    """Additive fusion of classifier logits and alignment similarities."""
    if alpha < 0:
        raise ValidationError(f"fusion weight alpha must be >= 0, got {alpha}")
    z = torch.as_tensor(z)
    if s is None or alpha == 0:
        return z
    return z + alpha * torch.as_tensor(s, dtype=z.dtype, device=z.device)


class TextAlignmentHead(nn.Module):
    """Project the global feature into the textual embedding space.

    ``per_class`` emits one row per class (an MLP to K * C_text, reshaped);
    ``broadcast`` projects a single vector and repeats it K times. Rows are
    L2-normalized before similarity.
    """

    def __init__(self, d: int, k: int, c_text: int, hidden: int = 64, projection: str = "per_class"):
        super().__init__()
        if projection not in ("per_class", "broadcast"):
            raise ValidationError(f"unknown tam projection {projection!r}")
        self.k = k
        self.c_text = c_text
        self.projection = projection
        out = k * c_text if projection == "per_class" else c_text
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out))

    def forward(self, f_global):
        # [..., D] -> [..., K, C_text], rows L2-normalized
        raw = self.net(f_global)
        if self.projection == "per_class":
            rows = raw.reshape(*raw.shape[:-1], self.k, self.c_text)
        else:
            rows = raw.unsqueeze(-2).expand(*raw.shape[:-1], self.k, self.c_text)
        return rows / torch.linalg.vector_norm(rows, dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network from a checkpoint."""

    k: int
    c_in: int = 5
    c_emb: int = 64
    mfr_hidden: int = 64
    d: int = 128
    backbone: str = "reference"
    d2r_enabled: bool = True
    mfr_enabled: bool = True
    fast_source: str = "pre_dup"  # pre_dup | post_dup
    q_init: float = 0.2
    sigma: float = 1.0
    gamma: float = 0.1
    delta: float = 0.5
    q_min: float = 0.01
    r: int = 5
    p_goal: int = 1024
    feature_norm: str = "layer"  # global feature normalization: layer | l2 | none
    tam_enabled: bool = True
    tam_alpha: float = 1.0
    tam_c_text: int = 64
    tam_hidden: int = 64
    tam_projection: str = "per_class"
    tam_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if self.fast_source not in ("pre_dup", "post_dup"):
            raise ValidationError(f"fast_source must be pre_dup or post_dup, got {self.fast_source}")
        if self.feature_norm not in ("layer", "l2", "none"):
            raise ValidationError(f"feature_norm must be layer, l2 or none, got {self.feature_norm}")
        if self.tam_alpha < 0:
            raise ValidationError("tam_alpha must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DopplerActionNet(nn.Module):
    """Doppler-guided action recognition network over standardized clips."""

    def __init__(self, config: ModelConfig, label_space: LabelSpace, bank: EmbeddingBank = None):
        super().__init__()
        if config.k != label_space.class_count:
            raise ValidationError(
                f"config expects {config.k} classes, label space has {label_space.class_count}"
            )
        self.config = config
        self.class_names = label_space.class_names
        self.q = nn.Parameter(torch.tensor(float(config.q_init)))
        self.embed = PointEmbedding(config.c_in, config.c_emb, config.mfr_hidden)
        self.film = FilmHeads(config.c_emb, config.mfr_hidden)
        self.backbone = build_backbone(config.backbone, config.c_emb, config.d)
        self.classifier = nn.Linear(config.d, config.k)
        self.text_align = TextAlignmentHead(
            config.d, config.k, config.tam_c_text, config.tam_hidden, config.tam_projection
        )
        if bank is None:
            bank = build_embedding_bank(
                label_space.class_names, config.tam_template, c_text=config.tam_c_text
            )
        if bank.class_count != config.k or bank.dim != config.tam_c_text:
            raise ValidationError(
                f"embedding bank shape {bank.matrix.shape} does not match "
                f"K={config.k}, C_text={config.tam_c_text}"
            )
        self.bank_prompts = bank.prompts
        self.bank_encoder = bank.encoder_name
        self.register_buffer("text_bank", torch.from_numpy(bank.matrix.copy()))

    @property
    def densify_config(self) -> densify.DensifyConfig:
        return densify.DensifyConfig(r=self.config.r, p_goal=self.config.p_goal)

    def _build_plans(self, mask_np, pad_np, seeds):
        b = mask_np.shape[0]
        return np.stack(
            [
                densify.build_clip_plans(
                    mask_np[bi], pad_np[bi], self.config.r, self.config.p_goal, seeds[bi]
                )
                for bi in range(b)
            ]
        )

    def forward(self, clips, pad=None, seeds=0, soft=False, plans=None):
        """Run the full pipeline on a batch of standardized clips.

        Args:
            clips: ``[B, T, P, C]`` float tensor.
            pad: ``[B, T]`` bool tensor marking zero-padded frames.
            seeds: int or ``[B]`` ints driving the raw-branch sampling.
            soft: use the soft scores instead of the hard mask as summary
                weights (the relaxed path used for gradient checks).
            plans: ``[B, T, p_goal]`` precomputed densification indices to
                reuse; required for a structurally frozen soft pass.

        Returns:
            ``(y_hat, diagnostics)`` with fused logits ``[B, K]``.
        """
        cfg = self.config
        if clips.ndim != 4:
            raise ValidationError(f"clips must be [B, T, P, C], got {tuple(clips.shape)}")
        b, t, p, _ = clips.shape
        if pad is None:
            pad = torch.zeros(b, t, dtype=torch.bool, device=clips.device)
        if isinstance(seeds, (int, np.integer)):
            seeds = [int(seeds)] * b
        seeds = [int(s) for s in seeds]
        pad_np = pad.detach().cpu().numpy()
        nonpad = (~pad).to(clips.dtype)

        tau = None
        weights = None  # [B, T, P] summary weights in original point order
        if cfg.d2r_enabled:
            v_abs = clips[..., densify.DOPPLER_CHANNEL].abs()
            tau = densify.soft_quantile_threshold(v_abs, self.q, cfg.sigma)
            scores = densify.soft_motion_scores(v_abs, tau, cfg.gamma)
            mask = densify.ste_binarize(scores, cfg.delta)
            mask = mask * nonpad.unsqueeze(-1)
            weights = (scores * nonpad.unsqueeze(-1)) if soft else mask
            if plans is None:
                mask_np = mask.detach().cpu().numpy() > 0.5
                plans = self._build_plans(mask_np, pad_np, seeds)
        else:
            if plans is None:
                plan = densify.repeat_fill_plan(p, cfg.p_goal)
                plans = np.broadcast_to(plan, (b, t, cfg.p_goal)).copy()

        plan_t = torch.as_tensor(plans, device=clips.device, dtype=torch.long)
        dense = torch.gather(
            clips, 2, plan_t.unsqueeze(-1).expand(b, t, cfg.p_goal, clips.shape[-1])
        )
        f_dense = self.embed(dense).reshape(b, t * cfg.p_goal, cfg.c_emb)

        c = torch.zeros(b, cfg.c_emb, dtype=clips.dtype, device=clips.device)
        if cfg.d2r_enabled and cfg.mfr_enabled:
            if cfg.fast_source == "pre_dup":
                f_orig = self.embed(clips).reshape(b, t * p, cfg.c_emb)
                c = masked_motion_summary(f_orig, weights.reshape(b, t * p), soft=soft)
            else:
                w_dense = torch.gather(weights, 2, plan_t).reshape(b, t * cfg.p_goal)
                c = masked_motion_summary(f_dense, w_dense, soft=soft)
            gamma, beta = self.film(c)
            feats = recalibrate(f_dense, gamma, beta)
        else:
            feats = f_dense

        f_global = self.backbone(feats)
        # Normalized global features keep the heads' input scale stable and
        # make the distribution-alignment metrics comparable across variants.
        if cfg.feature_norm == "layer":
            f_global = torch.nn.functional.layer_norm(f_global, (cfg.d,))
        elif cfg.feature_norm == "l2":
            f_global = f_global / torch.linalg.vector_norm(
                f_global, dim=-1, keepdim=True
            ).clamp_min(1e-12)
        z = classify(self.classifier, f_global)
        sim = None
        if cfg.tam_enabled:
            f_mmw = self.text_align(f_global)
            sim = alignment_similarity(f_mmw, self.text_bank.to(clips.dtype))
            y_hat = fuse(z, sim, cfg.tam_alpha)
        else:
            y_hat = z

        fast_counts = (
            (weights if not soft else (weights > cfg.delta).to(clips.dtype)).sum(dim=-1)
            if weights is not None
            else torch.zeros(b, t, dtype=clips.dtype)
        )
        tau_out = None
        if tau is not None:
            tau_out = tau.masked_fill(pad, float("nan"))
        diag = {
            "tau": tau_out,
            "fast_counts": fast_counts,
            "c": c,
            "global_feature": f_global,
            "logits": z,
            "similarity": sim,
            "plans": plans,
        }
        return y_hat, diag


def forward_clip(clip, model: DopplerActionNet, seed: int = 0):
    """Single-clip convenience wrapper returning numpy outputs."""
    data = clip.data if hasattr(clip, "data") else np.asarray(clip, dtype=np.float32)
    pad = clip.pad_mask if hasattr(clip, "pad_mask") else np.zeros(data.shape[0], bool)
    clips = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)).unsqueeze(0)
    pad_t = torch.from_numpy(np.ascontiguousarray(pad)).unsqueeze(0)
    with torch.no_grad():
        y_hat, diag = model(clips.to(next(model.parameters()).dtype), pad_t, seeds=[seed])
    return y_hat[0].cpu().numpy(), diag
