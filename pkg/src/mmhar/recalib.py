"""Motion-aware feature recalibration.

Fast-point embeddings are averaged into a motion summary vector which two
small heads turn into channel-wise scale and shift parameters applied to the
dense features. Both heads are initialized to the exact identity so an
untrained model reproduces the plain backbone.

The summary is global per clip (one vector from all frames' fast points); a
per-frame variant would recalibrate each frame separately but is not
implemented.
"""

import torch
from torch import nn

from .core import ValidationError


class PointEmbedding(nn.Module):
    """Shared per-point MLP mapping input channels to embedding channels.

    The same weights embed the dense points and the fast points, so identical
    inputs always map to identical feature rows.
    """

    def __init__(self, c_in: int = 5, c_emb: int = 64, hidden: int = 64):
        super().__init__()
        self.c_in = c_in
        self.c_emb = c_emb
        self.net = nn.Sequential(
            nn.Linear(c_in, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, c_emb),
        )

    def forward(self, points):
        # [..., C_in] -> [..., C_emb]; an empty point set yields empty features.
        return self.net(points)


def motion_summary(f_fast):
    """Arithmetic mean over fast-point features; zero vector when empty."""
    f_fast = torch.as_tensor(f_fast)
    if f_fast.ndim != 2:
        raise ValidationError(f"fast features must be [N_f, C], got shape {tuple(f_fast.shape)}")
    if f_fast.shape[0] == 0:
        return torch.zeros(f_fast.shape[1], dtype=f_fast.dtype, device=f_fast.device)
    return f_fast.mean(dim=0)


def masked_motion_summary(features, weights, soft: bool = False):
    """Weighted mean of point features, differentiable through the weights.

    With hard 0/1 weights this equals the mean over the selected points (the
    forward value of Eq-style fast averaging) while the straight-through
    gradient reaches the weights. ``soft=True`` uses the raw soft scores as
    weights, the relaxation used for gradient checking.

    Args:
        features: ``[B, N, C]`` point features.
        weights: ``[B, N]`` selection weights.

    Returns:
        ``[B, C]`` summary; zero for rows with no weight.
    """
    if features.shape[:-1] != weights.shape:
        raise ValidationError(
            f"features {tuple(features.shape)} and weights {tuple(weights.shape)} disagree"
        )
    num = (weights.unsqueeze(-1) * features).sum(dim=-2)
    denom = weights.sum(dim=-1, keepdim=True)
    if soft:
        return num / (denom + 1e-12)
    # Hard weights are integer counts; clamping only touches the empty case,
    # where the numerator is already zero.
    return num / torch.clamp(denom, min=1.0)


class FilmHeads(nn.Module):
    """Generate channel-wise scale and shift from the motion summary.

    The summary is layer-normalized (no affine) before the heads so the
    conditioning is invariant to the embedding's drifting scale; without this
    the multiplicative path (features -> summary -> scale -> features) is an
    unstable feedback loop. The final layers start at zero weights with bias 1
    (scale) and 0 (shift), so recalibration is exactly the identity before any
    training step.
    """

    def __init__(self, c_emb: int = 64, hidden: int = 64):
        super().__init__()
        self.c_emb = c_emb
        self.scale = nn.Sequential(nn.Linear(c_emb, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, c_emb))
        self.shift = nn.Sequential(nn.Linear(c_emb, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, c_emb))
        with torch.no_grad():
            self.scale[-1].weight.zero_()
            self.scale[-1].bias.fill_(1.0)
            self.shift[-1].weight.zero_()
            self.shift[-1].bias.zero_()

    def forward(self, c):
        # [..., C_emb] -> (gamma, beta), each [..., C_emb]
        h = torch.nn.functional.layer_norm(c, (self.c_emb,))
        return self.scale(h), self.shift(h)


def recalibrate(f_out, gamma, beta):
    """Channel-wise affine transform gamma * F + beta, broadcast over rows."""
    f_out = torch.as_tensor(f_out)
    gamma = torch.as_tensor(gamma, dtype=f_out.dtype, device=f_out.device)
    beta = torch.as_tensor(beta, dtype=f_out.dtype, device=f_out.device)
    if gamma.shape != beta.shape or gamma.shape[-1] != f_out.shape[-1]:
        raise ValidationError(
            f"shape mismatch: features {tuple(f_out.shape)}, gamma {tuple(gamma.shape)}, "
            f"beta {tuple(beta.shape)}"
        )
    return gamma.unsqueeze(-2) * f_out + beta.unsqueeze(-2)
