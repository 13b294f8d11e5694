"""Training objectives: weighted token cross-entropy, character-wise supervised
contrastive loss over unit-norm projections, their combination, and a finite-
difference gradient checker.

Conventions that matter for reproducing logged magnitudes:

* token_loss sums (not averages) over sequence positions;
* supcon_loss sums over anchors, each normalized by its positive count, and
  anchors with no positive in the batch are skipped;
* the combined loss averages the token term over batch members and adds the
  contrastive term once, computed on the pooled projections of all members.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lam: float = 0.5
    empty_positive_policy: str = "skip_anchor"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.empty_positive_policy != "skip_anchor":
            raise ValueError(f"unknown empty_positive_policy {self.empty_positive_policy!r}")


@dataclass
class ProjectionSet:
    """Unit-norm contrastive embeddings with integer character-class labels."""

    z: Tensor  # n x d, rows L2-normalized
    labels: Tensor  # n, int64

    def __post_init__(self):
        if self.z.ndim != 2 or self.labels.ndim != 1 or self.z.shape[0] != self.labels.shape[0]:
            raise ValueError("z must be n x d with n matching labels")

    def __len__(self) -> int:
        return int(self.z.shape[0])

    @staticmethod
    def cat(parts: Sequence["ProjectionSet"]) -> "ProjectionSet":
        parts = [p for p in parts if len(p) > 0]
        if not parts:
            return ProjectionSet(torch.zeros(0, 1), torch.zeros(0, dtype=torch.int64))
        return ProjectionSet(
            torch.cat([p.z for p in parts], dim=0),
            torch.cat([p.labels for p in parts], dim=0),
        )


def token_loss(logits: Tensor, target_ids: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """Negative log-likelihood summed over positions, optionally 0/1-weighted.

    ``weights=None`` is the fully supervised case; passing an all-ones weight
    vector gives the bit-identical value.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x V, got shape {tuple(logits.shape)}")
    n, v = logits.shape
    if target_ids.shape != (n,):
        raise ValueError("target_ids length must match logits rows")
    if n == 0:
        return logits.sum() * 0.0
    if int(target_ids.min()) < 0 or int(target_ids.max()) >= v:
        raise ValueError("target id outside vocabulary")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    if weights is None:
        return -picked.sum()
    if weights.shape != (n,):
        raise ValueError("weights length must match logits rows")
    return -(weights.to(picked.dtype) * picked).sum()


def supcon_loss(proj: ProjectionSet, tau: float) -> Tensor:
    """Supervised contrastive loss over a pooled multiview batch.

    Each projection is an anchor; its positives are the other projections with
    the same label; the denominator runs over everything but the anchor itself.
    Anchors without positives contribute nothing.
    """
    n = len(proj)
    if n < 2:
        warnings.warn("supcon_loss got fewer than 2 projections; returning 0", stacklevel=2)
        return proj.z.sum() * 0.0
    z, labels = proj.z, proj.labels
    sim = (z @ z.T) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    # logsumexp handles the max-subtraction for the denominator
    log_denom = sim.masked_fill(self_mask, float("-inf")).logsumexp(dim=1)
    positive = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~self_mask
    pos_count = positive.sum(dim=1)
    pos_sim = (sim * positive).sum(dim=1)
    has_pos = pos_count > 0
    per_anchor = -(pos_sim - pos_count.to(sim.dtype) * log_denom) / pos_count.clamp(min=1)
    return per_anchor[has_pos].sum()


@dataclass
class BatchMemberLoss:
    """Per-member loss inputs collected by the trainer."""

    logits: Tensor
    target_ids: Tensor
    weights: Tensor
    projections: Optional[ProjectionSet] = None


@dataclass
class LossBreakdown:
    total: Tensor
    token: Tensor
    supcon: Tensor
    num_members: int
    num_anchors: int

    @property
    def supcon_per_anchor(self) -> float:
        return float(self.supcon) / self.num_anchors if self.num_anchors else 0.0


def total_loss(members: Sequence[BatchMemberLoss], config: LossConfig) -> LossBreakdown:
    """Mean per-member token loss plus scaled contrastive loss on pooled projections."""
    if not members:
        raise ValueError("total_loss needs at least one batch member")
    token_terms = [token_loss(m.logits, m.target_ids, m.weights) for m in members]
    token = torch.stack(token_terms).sum() / len(members)
    pooled = ProjectionSet.cat([m.projections for m in members if m.projections is not None])
    if config.lam > 0 and len(pooled) >= 2:
        supcon = supcon_loss(pooled, config.tau)
        total = token + config.lam * supcon
    else:
        supcon = torch.zeros((), dtype=token.dtype, device=token.device)
        total = token
    return LossBreakdown(total, token, supcon, len(members), len(pooled))


def gradcheck(
    loss_fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    Inputs must be float64 leaf tensors. Per-coordinate error is normalized by
    max(|analytic|, |numeric|, 1e-3 * overall gradient scale) so roundoff noise
    on negligible coordinates is judged against the gradient's magnitude rather
    than itself.
    """
    inputs = [t for t in inputs]
    for t in inputs:
        if t.dtype != torch.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.requires_grad_(True)

    out = loss_fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    grads = [
        torch.zeros_like(t) if g is None else g.detach().clone() for t, g in zip(inputs, grads)
    ]
    scale = max((float(g.abs().max()) for g in grads if g.numel()), default=0.0)

    max_err = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, grads):
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + epsilon
                f_plus = float(loss_fn(*inputs))
                flat[i] = orig - epsilon
                f_minus = float(loss_fn(*inputs))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                analytic = float(gflat[i])
                denom = max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-12)
                err = abs(analytic - numeric) / denom
                if abs(analytic - numeric) < 1e-12:
                    err = 0.0
                max_err = max(max_err, err)
    return max_err
