"""Doppler-guided geometric reparameterization.

Per frame: a learnable soft quantile over sorted Doppler magnitudes yields a
motion threshold, logistic scores compare each point against it, a
straight-through estimator binarizes the scores, and the fast/slow/raw
tri-branch densification fills the frame to a fixed cardinality by copying
input points (never synthesizing new ones).
"""

from dataclasses import dataclass

import numpy as np
import torch

from .core import ClipTensor, ValidationError

DOPPLER_CHANNEL = 3


@dataclass
class QuantileSplitParams:
    """Soft-quantile hyperparameters; ``q_init`` seeds the learnable quantile."""

    q_init: float = 0.2
    sigma: float = 1.0  # Gaussian rank-smoothing width, in rank units
    gamma: float = 0.1  # logistic sharpness, in Doppler units
    delta: float = 0.5  # partition threshold on the soft scores
    q_min: float = 0.01  # learnable q is clamped to [q_min, 1 - q_min]

    def __post_init__(self):
        if not 0.0 < self.q_init < 1.0:
            raise ValidationError(f"q_init must lie in (0, 1), got {self.q_init}")
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValidationError("sigma and gamma must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class DensifyConfig:
    """Tri-branch densification settings."""

    r: int = 5  # duplication factor for motion-salient points
    p_goal: int = 1024  # target cardinality per frame

    def __post_init__(self):
        if self.r < 1 or self.p_goal < 1:
            raise ValidationError("r and p_goal must be >= 1")


def soft_quantile_threshold(v, q, sigma):
    """Differentiable soft-quantile threshold over Doppler magnitudes.

    Sorts ``v`` ascending, centers Gaussian weights at the 0-based target
    rank ``q * (P - 1)`` and returns the weighted sum of the sorted values.
    Differentiable w.r.t. both ``q`` and ``v``; supports any batch shape
    ``[..., P]``.
    """
    v = torch.as_tensor(v)
    p = v.shape[-1]
    if p == 0:
        raise ValidationError("cannot take a quantile threshold of an empty frame")
    q = torch.as_tensor(q, dtype=v.dtype, device=v.device)
    v_sorted = torch.sort(v, dim=-1).values
    ranks = torch.arange(p, dtype=v.dtype, device=v.device)
    target = q * (p - 1)
    logw = -((ranks - target) ** 2) / (2.0 * sigma**2)
    w = torch.softmax(logw, dim=-1)
    return (w * v_sorted).sum(dim=-1)


def soft_motion_scores(v, tau, gamma):
    """Logistic motion scores in original point order: sigmoid((v - tau) / gamma)."""
    if gamma <= 0:
        raise ValidationError(f"gamma must be > 0, got {gamma}")
    v = torch.as_tensor(v)
    tau = torch.as_tensor(tau, dtype=v.dtype, device=v.device)
    return torch.sigmoid((v - tau.unsqueeze(-1)) / gamma)


class _BinarizeSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, scores, delta):
        return (scores > delta).to(scores.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        # Straight-through: the identity surrogate passes the gradient to the
        # soft scores unchanged.
        return grad_output, None


def ste_binarize(scores, delta):
    """Hard 0/1 mask (scores > delta) with identity backward to the scores."""
    return _BinarizeSTE.apply(torch.as_tensor(scores), float(delta))


def clip_rng(seed: int) -> np.random.Generator:
    """Per-clip generator; frames consume it sequentially (padded frames draw
    nothing), so results do not depend on batch composition."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),)))


def _overflow_plan(fast, slow, r: int, p_goal: int, rng) -> np.ndarray:
    """Budget-exceeded case: subsample the fast duplicates down to fit,
    preserving at least one copy of each fast point while possible."""
    budget = p_goal - slow.size
    if budget >= fast.size:
        extra_pool = np.tile(fast, r - 1)
        extras = rng.choice(extra_pool, size=budget - fast.size, replace=False)
        return np.concatenate([fast, extras, slow]).astype(np.int64)
    if budget > 0:
        kept = rng.choice(fast, size=budget, replace=False)
        return np.concatenate([kept, slow]).astype(np.int64)
    # Degenerate: the slow set alone overflows the budget.
    return rng.choice(slow, size=p_goal, replace=False).astype(np.int64)


def densify_plan(mask, r: int, p_goal: int, rng: np.random.Generator) -> np.ndarray:
    """Index plan realizing the fast/slow/raw aggregation for one frame.

    Returns ``p_goal`` indices into the frame's points, laid out as the
    fast duplicates, then the slow points, then the raw resamples. The raw
    branch samples uniformly with replacement. When the fast duplicates and
    slow points alone exceed the budget, the fast duplicates are uniformly
    subsampled, keeping at least one copy of every fast point while possible.
    """
    mask = np.asarray(mask, dtype=bool)
    p_t = mask.size
    fast = np.flatnonzero(mask)
    slow = np.flatnonzero(~mask)
    n_raw = p_goal - r * fast.size - slow.size
    if n_raw >= 0:
        parts = [np.tile(fast, r), slow]
        if n_raw > 0:
            parts.append(rng.integers(0, p_t, size=n_raw))
        return np.concatenate(parts).astype(np.int64)
    return _overflow_plan(fast, slow, r, p_goal, rng)


def build_clip_plans(mask, pad, r: int, p_goal: int, seed: int) -> np.ndarray:
    """Densification plans for all frames of one clip, vectorized over frames.

    Produces the same fast/slow layout as :func:`densify_plan` per frame; the raw
    branch draws come from one per-clip block so the result depends only on
    (seed, mask), never on batch composition. Padded frames map to index 0
    (their rows are all-zero anyway).
    """
    mask = np.asarray(mask, dtype=bool)
    pad = np.asarray(pad, dtype=bool)
    t, p = mask.shape
    rng = clip_rng(seed)
    raw_block = rng.integers(0, p, size=(t, p_goal))

    order = np.argsort(~mask, axis=1, kind="stable")  # fast indices first, ascending
    nf = mask.sum(axis=1)
    ns = p - nf
    ndup = r * nf
    nraw = p_goal - ndup - ns
    pos = np.arange(p_goal, dtype=np.int64)[None, :]
    nf_safe = np.maximum(nf, 1)[:, None]
    in_fast = pos < ndup[:, None]
    in_slow = (pos >= ndup[:, None]) & (pos < (ndup + ns)[:, None])
    fast_gather = np.take_along_axis(order, pos % nf_safe, axis=1)
    slow_pos = np.clip(nf[:, None] + pos - ndup[:, None], 0, p - 1)
    slow_gather = np.take_along_axis(order, slow_pos, axis=1)
    plans = np.where(in_fast, fast_gather, np.where(in_slow, slow_gather, raw_block))

    for ti in np.flatnonzero((nraw < 0) & ~pad):
        plans[ti] = _overflow_plan(
            np.flatnonzero(mask[ti]), np.flatnonzero(~mask[ti]), r, p_goal, rng
        )
    plans[pad] = 0
    return plans.astype(np.int64)


def densify_frame(points, hard_mask, cfg: DensifyConfig, rng):
    """Densify one frame to ``cfg.p_goal`` points.

    Args:
        points: ``[P_t, C]`` frame points (numpy or torch).
        hard_mask: ``[P_t]`` boolean fast mask.
        cfg: duplication factor and target cardinality.
        rng: ``np.random.Generator`` or integer seed for the raw branch.

    Returns:
        ``(dense, fast_idx)``: the ``[p_goal, C]`` densified frame (same array
        type as the input) and the indices of the fast points.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    mask = np.asarray(hard_mask, dtype=bool)
    if mask.ndim != 1 or mask.size == 0:
        raise ValidationError(f"hard_mask must be a non-empty 1-D array, got shape {mask.shape}")
    plan = densify_plan(mask, cfg.r, cfg.p_goal, rng)
    fast_idx = np.flatnonzero(mask)
    if isinstance(points, torch.Tensor):
        dense = points[torch.as_tensor(plan, device=points.device)]
    else:
        dense = np.asarray(points)[plan]
    return dense, fast_idx


@dataclass
class ReparamResult:
    """Densified clip plus per-frame diagnostics."""

    dense: np.ndarray  # [T, p_goal, C] float32
    fast_sets: list  # per frame, indices of fast points (empty for padded)
    tau: np.ndarray  # [T] float64, nan on padded frames
    scores: np.ndarray  # [T, P] float64, 0 on padded frames
    mask: np.ndarray  # [T, P] bool, all-false on padded frames
    plans: np.ndarray  # [T, p_goal] int64


def reparameterize_clip(clip, params: QuantileSplitParams, cfg: DensifyConfig, seed: int, q=None) -> ReparamResult:
    """Run the full per-frame reparameterization over one standardized clip.

    Padded frames map to ``p_goal`` zero rows with empty fast sets and are
    never seen by the quantile threshold. ``q`` defaults to ``params.q_init``.
    """
    if isinstance(clip, ClipTensor):
        data, pad = clip.data, clip.pad_mask
    else:
        data = np.asarray(clip, dtype=np.float32)
        pad = np.zeros(data.shape[0], dtype=bool)
    t, p, c = data.shape
    q_val = float(params.q_init if q is None else q)

    dense = np.zeros((t, cfg.p_goal, c), dtype=np.float32)
    tau = np.full(t, np.nan)
    scores = np.zeros((t, p))
    mask = np.zeros((t, p), dtype=bool)
    fast_sets = []
    with torch.no_grad():
        for ti in range(t):
            if pad[ti]:
                continue
            v_abs = torch.from_numpy(np.abs(data[ti, :, DOPPLER_CHANNEL]).astype(np.float64))
            tau_t = soft_quantile_threshold(v_abs, q_val, params.sigma)
            s_t = soft_motion_scores(v_abs, tau_t, params.gamma)
            mask[ti] = s_t.numpy() > params.delta
            tau[ti] = float(tau_t)
            scores[ti] = s_t.numpy()
    plans = build_clip_plans(mask, pad, cfg.r, cfg.p_goal, seed)
    for ti in range(t):
        if pad[ti]:
            fast_sets.append(np.empty(0, dtype=np.int64))
        else:
            dense[ti] = data[ti][plans[ti]]
            fast_sets.append(np.flatnonzero(mask[ti]))
    return ReparamResult(dense, fast_sets, tau, scores, mask, plans)


def repeat_fill_plan(p_t: int, p_goal: int) -> np.ndarray:
    """Cyclic repeat fill used when reparameterization is disabled."""
    return np.arange(p_goal, dtype=np.int64) % p_t
