"""Full model: encoders, decoders, aggregator, task heads, and the two
stage-specific forward wirings.

Component prefixes (used for freezing and per-component learning rates):
``image_encoder``, ``text_encoder``, ``image_decoder``, ``text_decoder``,
``aggregator``, ``heads.<task>``.  The contrastive projections live inside
their owning encoders so they share the owner's freeze status.

Sub-image batching convention: the four sub-images of a batch are stacked
group-major, i.e. row g = n * B + b holds sub-image n of sample b.
"""

from __future__ import annotations

import numpy as np

from . import losses, nn
from . import tensor as T
from .decoders import ClassifierHead, ImageDecoder, TextDecoder
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .errors import ConfigError
from .imaging import ImageConfig
from .tensor import Tensor

TASKS = ("sentiment", "emotion", "desire")
TASK_CLASSES = {"sentiment": 3, "emotion": 6, "desire": 7}
N_SUBS = 4


class SydesModel(nn.Module):
    def __init__(self, image_cfg: ImageConfig, enc_cfg: EncoderConfig, vocab_size: int,
                 decoder_layers: int = 2, decoder_heads: int = 4):
        self.image_cfg = image_cfg
        self.enc_cfg = enc_cfg
        p = image_cfg.patches_per_image
        self.image_encoder = ImageEncoder(enc_cfg, p, image_cfg.patch_dim)
        self.text_encoder = TextEncoder(enc_cfg, vocab_size)
        self.image_decoder = ImageDecoder(
            enc_cfg.image_dim, enc_cfg.text_dim, p, image_cfg.patch_dim,
            layers=decoder_layers, heads=decoder_heads, mlp_ratio=enc_cfg.mlp_ratio)
        self.text_decoder = TextDecoder(
            enc_cfg.image_dim, enc_cfg.text_dim,
            layers=decoder_layers, heads=decoder_heads, mlp_ratio=enc_cfg.mlp_ratio)
        self.aggregator = losses.Aggregator(enc_cfg.text_dim)
        self.heads = {task: ClassifierHead(enc_cfg.text_dim, k)
                      for task, k in TASK_CLASSES.items()}

    def head(self, task: str) -> ClassifierHead:
        if task not in self.heads:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        return self.heads[task]

    # -- shared encoding steps -------------------------------------------

    def encode_low(self, low_patches: np.ndarray) -> Tensor:
        """Encode full low-resolution patch matrices [B, P, patch_dim]."""
        b, p = low_patches.shape[:2]
        positions = np.broadcast_to(np.arange(p, dtype=np.int64), (b, p))
        return self.image_encoder(Tensor(low_patches), positions)

    def encode_subs(self, sub_patches: np.ndarray, kept: np.ndarray) -> Tensor:
        """Encode visible sub-image patches.

        ``sub_patches`` is [B, 4, P, patch_dim]; ``kept`` is int [4B, rP]
        (group-major).  Returns [4B, rP+1, image_dim].
        """
        b = sub_patches.shape[0]
        flat = sub_patches.transpose(1, 0, 2, 3).reshape(
            N_SUBS * b, sub_patches.shape[2], sub_patches.shape[3])
        visible = np.take_along_axis(flat, kept[:, :, None], axis=1)
        return self.image_encoder(Tensor(visible), kept)

    def encode_text(self, ids: np.ndarray, real: np.ndarray) -> Tensor:
        return self.text_encoder(ids, real)

    def itc_features(self, V1: Tensor, W: Tensor) -> tuple[Tensor, Tensor]:
        """Project both CLS features into the shared space and normalize."""
        b = V1.shape[0]
        s = W.shape[1]
        v_cls = T.reshape(T.narrow(V1, 1, 0, 1), (b, V1.shape[2]))
        w_cls = T.reshape(T.narrow(W, 1, s - 1, 1), (b, W.shape[2]))
        v = T.l2_normalize(self.image_encoder.itc_proj(v_cls))
        w = T.l2_normalize(self.text_encoder.itc_proj(w_cls))
        return v, w

    # -- stage forwards ----------------------------------------------------

    def pretrain_forward(self, batch: "BatchArrays", kept: np.ndarray, masked: np.ndarray,
                         tau: float, rec_squared: bool = True,
                         entropy_sign: float = 1.0,
                         aux: dict | None = None,
                         dc_reference: np.ndarray | None = None) -> dict[str, Tensor]:
        """Masked-reconstruction wiring; returns the four pretraining loss
        parts.  ``kept``/``masked`` are group-major int arrays [4B, rP] and
        [4B, mP].  Pass ``aux`` to receive raw predictions and the detached
        consistency reference; ``dc_reference`` pins that reference (used by
        the finite-difference oracle, which must respect the stop-gradient)."""
        b = batch.size
        V1 = self.encode_low(batch.low_patches)
        Vsub = self.encode_subs(batch.sub_patches, kept)
        W = self.encode_text(batch.ids, batch.real)
        v_itc, w_itc = self.itc_features(V1, W)

        W4 = T.concat([W] * N_SUBS, axis=0)
        real4 = np.tile(batch.real, (N_SUBS, 1))
        pixels, z = self.image_decoder(Vsub, kept, masked, W4, real4)

        z_stack = T.transpose(T.reshape(z, (N_SUBS, b, z.shape[1])), (1, 0, 2))
        p_agg = T.l2_normalize(self.aggregator(z_stack))

        flat = batch.sub_patches.transpose(1, 0, 2, 3).reshape(
            N_SUBS * b, batch.sub_patches.shape[2], batch.sub_patches.shape[3])
        targets = Tensor(np.take_along_axis(flat, masked[:, :, None], axis=1))

        reference = None if dc_reference is None else Tensor(dc_reference)
        if aux is not None:
            aux["pixels"] = pixels.data.copy()
            aux["z"] = z.data.copy()
            aux["dc_reference"] = losses.similarity_distribution(
                v_itc, w_itc, tau).data.copy()

        return {
            "rec": losses.reconstruction_loss(targets, pixels, subimages=N_SUBS,
                                              squared=rec_squared),
            "itc": losses.itc_loss(v_itc, w_itc, tau),
            "si": losses.si_loss(v_itc, p_agg),
            "dc": losses.dc_loss(p_agg, v_itc, w_itc, tau, entropy_sign=entropy_sign,
                                 reference=reference),
        }

    def finetune_forward(self, batch: "BatchArrays", task: str, tau: float,
                         capture: dict | None = None) -> tuple[Tensor, dict[str, Tensor]]:
        """Full-image classification wiring (mask ratio 0).  Returns the
        logits and the fine-tuning loss parts (cls left to the caller, which
        holds the labels)."""
        b = batch.size
        p = self.image_cfg.patches_per_image
        V1 = self.encode_low(batch.low_patches)
        kept = np.broadcast_to(np.arange(p, dtype=np.int64), (N_SUBS * b, p))
        Vsub = self.encode_subs(batch.sub_patches, kept)
        W = self.encode_text(batch.ids, batch.real)
        v_itc, w_itc = self.itc_features(V1, W)

        visual = [V1] + T.split(Vsub, [b] * N_SUBS, axis=0)
        fused = self.text_decoder(W, batch.real, visual, record=capture)
        logits = self.head(task)(fused)
        return logits, {"itc": losses.itc_loss(v_itc, w_itc, tau)}


class BatchArrays:
    """Plain-array view of a batch: patchified images plus token ids."""

    def __init__(self, low_patches: np.ndarray, sub_patches: np.ndarray,
                 ids: np.ndarray, real: np.ndarray,
                 labels: dict[str, np.ndarray] | None = None,
                 sample_ids: list[str] | None = None):
        self.low_patches = low_patches
        self.sub_patches = sub_patches
        self.ids = ids
        self.real = real
        self.labels = labels or {}
        self.sample_ids = sample_ids or []

    @property
    def size(self) -> int:
        return self.low_patches.shape[0]

    def subset(self, index: np.ndarray) -> "BatchArrays":
        return BatchArrays(
            self.low_patches[index], self.sub_patches[index],
            self.ids[index], self.real[index],
            {t: v[index] for t, v in self.labels.items()},
            [self.sample_ids[i] for i in index] if self.sample_ids else [])


def group_major_masks(specs: list[list]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample, per-sub MaskSpecs ([B][4]) into group-major [4B, .]
    kept and masked index arrays."""
    kept = np.stack([np.stack([specs[b][n].kept for b in range(len(specs))])
                     for n in range(N_SUBS)]).reshape(-1, specs[0][0].kept.size)
    masked = np.stack([np.stack([specs[b][n].masked for b in range(len(specs))])
                       for n in range(N_SUBS)]).reshape(-1, specs[0][0].masked.size)
    return kept, masked
