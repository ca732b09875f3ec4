"""Training losses and their stage composites.

Five parts: masked-patch reconstruction, symmetric image-text contrastive
(InfoNCE), local-global similarity between the aggregated sub-image vectors
and the global image feature, a distribution-consistency term (KL against
the text-similarity distribution anchored on the global feature, plus an
entropy term), and classification cross-entropy.  All functions return
scalar tensors and are differentiable through every tracked input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError, DataError
from .tensor import Parameter, Tensor

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the stage composites.

    Pretraining uses (rec, si, dc, itc); fine-tuning uses (cls, itc).
    Reference defaults: rec=1, si=0.5, dc=0.025, itc=0.5 for pretraining and
    cls=1, itc=0.4 for fine-tuning.
    """

    rec: float = 0.0
    si: float = 0.0
    dc: float = 0.0
    itc: float = 0.0
    cls: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ContractError(f"loss weight {name} must be nonnegative, got {value}")

    @classmethod
    def pretrain_defaults(cls) -> "LossWeights":
        return cls(rec=1.0, si=0.5, dc=0.025, itc=0.5)

    @classmethod
    def finetune_defaults(cls) -> "LossWeights":
        return cls(cls=1.0, itc=0.4)


def reconstruction_loss(target: Tensor, pred: Tensor, subimages: int = 4,
                        squared: bool = True) -> Tensor:
    """Pixel error over masked patches.

    ``target`` and ``pred`` are [subimages * B, masked, patch_dim] with the
    sub-image index major.  Per sample: the per-patch L2 error summed over
    all sub-images and masked patches, normalized by the total masked count;
    the result is the batch mean.  ``squared`` selects the squared-L2 (MSE)
    convention; False uses the plain L2 norm.
    """
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    g, n_masked, _ = pred.shape
    if n_masked == 0:
        raise ContractError("reconstruction loss undefined with no masked patches (mask ratio 0)")
    if g % subimages:
        raise ContractError(f"row count {g} not divisible by {subimages} sub-images")
    batch = g // subimages
    diff = pred - target
    per_patch = T.sum_(diff * diff, axis=-1)
    if not squared:
        per_patch = T.sqrt(per_patch)
    total = T.sum_(per_patch)
    return total * (1.0 / (batch * subimages * n_masked))


def itc_loss(image_feats: Tensor, text_feats: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over in-batch pairs; both inputs must be
    l2-normalized [N, d] with matched rows as positives."""
    n = image_feats.shape[0]
    if n == 0:
        raise ContractError("itc loss needs at least one pair")
    if image_feats.shape != text_feats.shape:
        raise ContractError(f"feature shapes differ: {image_feats.shape} vs {text_feats.shape}")
    logits = T.matmul(image_feats, T.swap_last2(text_feats)) * (1.0 / tau)
    eye = Tensor(np.eye(n))
    i2t = -T.sum_(T.log_softmax(logits, axis=-1) * eye) * (1.0 / n)
    t2i = -T.sum_(T.log_softmax(T.swap_last2(logits), axis=-1) * eye) * (1.0 / n)
    return 0.5 * (i2t + t2i)


class Aggregator(nn.Module):
    """Learned attention over the four sub-image vectors plus an MLP into
    the contrastive space:  e_n = u^T tanh(z_n W + b),  alpha = softmax(e),
    output = MLP(sum_n alpha_n z_n)."""

    def __init__(self, dim: int):
        self.w_z = Parameter((dim, dim), init="fan_in")
        self.u = Parameter((dim,), init="normal", scale=0.02)
        self.b = Parameter((dim,), init="zeros")
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def scores(self, z: Tensor) -> Tensor:
        """Attention weights alpha, [B, n_subs], rows summing to 1."""
        dim = self.u.shape[0]
        t = T.tanh(T.matmul(z, self.w_z.tensor) + self.b.tensor)
        e = T.reshape(T.matmul(t, T.reshape(self.u.tensor, (dim, 1))), z.shape[:2])
        return T.softmax(e, axis=-1)

    def __call__(self, z: Tensor) -> Tensor:
        """Aggregate [B, n_subs, dim] into [B, dim]."""
        alpha = self.scores(z)
        pooled = T.matmul(T.reshape(alpha, (z.shape[0], 1, z.shape[1])), z)
        pooled = T.reshape(pooled, (z.shape[0], z.shape[2]))
        return self.fc2(T.gelu(self.fc1(pooled)))


def si_loss(global_feats: Tensor, aggregated: Tensor) -> Tensor:
    """Batch mean of the squared Euclidean distance between the normalized
    global image feature and the normalized aggregated sub-image feature."""
    if global_feats.shape != aggregated.shape:
        raise ContractError(f"shapes differ: {global_feats.shape} vs {aggregated.shape}")
    d = global_feats - aggregated
    return T.mean(T.sum_(d * d, axis=-1))


def similarity_distribution(anchor: Tensor, text_feats: Tensor, tau: float) -> Tensor:
    """Row-stochastic [N, N]: row i is softmax_j(<anchor_i, text_j> / tau)."""
    logits = T.matmul(anchor, T.swap_last2(text_feats)) * (1.0 / tau)
    return T.softmax(logits, axis=-1)


def dc_loss(aggregated: Tensor, global_feats: Tensor, text_feats: Tensor,
            tau: float, entropy_sign: float = 1.0,
            reference: Tensor | None = None) -> Tensor:
    """KL(S(aggregated, text) || S(global, text)) plus the entropy of
    S(aggregated, text), both averaged over the batch.

    The reference distribution (anchored on the global image feature) is
    detached: only the aggregated branch receives gradients.  Because of
    that stop-gradient, finite-difference verification must hold the
    reference constant; pass ``reference`` (a row-stochastic [N, N] tensor)
    to pin it.  ``entropy_sign`` flips the entropy term for sensitivity
    experiments.
    """
    s_agg = similarity_distribution(aggregated, text_feats, tau)
    if reference is None:
        s_ref = similarity_distribution(global_feats, text_feats, tau).detach()
    else:
        s_ref = reference.detach()
    log_agg = T.log(s_agg + LOG_EPS)
    log_ref = T.log(s_ref + LOG_EPS)
    kl = T.mean(T.sum_(s_agg * (log_agg - log_ref), axis=-1))
    entropy = T.mean(-T.sum_(s_agg * log_agg, axis=-1))
    return kl + entropy_sign * entropy


def cls_loss(logits: Tensor, labels: np.ndarray, sample_ids=None) -> Tensor:
    """Mean softmax cross-entropy; labels are int indices in [0, K)."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} != ({n},)")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        ident = sample_ids[bad[0]] if sample_ids is not None else f"index {bad[0]}"
        raise DataError(f"label {labels[bad[0]]} out of range [0, {k}) for sample {ident}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -T.sum_(T.log_softmax(logits, axis=-1) * Tensor(onehot)) * (1.0 / n)


def pretrain_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """weights.rec * rec + weights.si * si + weights.dc * dc + weights.itc * itc."""
    for key in ("rec", "si", "dc", "itc"):
        if key not in parts:
            raise ContractError(f"pretraining composite missing part {key!r}")
    return (weights.rec * parts["rec"] + weights.si * parts["si"]
            + weights.dc * parts["dc"] + weights.itc * parts["itc"])


def finetune_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """weights.cls * cls + weights.itc * itc."""
    for key in ("cls", "itc"):
        if key not in parts:
            raise ContractError(f"fine-tuning composite missing part {key!r}")
    return weights.cls * parts["cls"] + weights.itc * parts["itc"]
