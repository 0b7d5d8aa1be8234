"""Spectrogram transformer classifier with a cross-device MixStyle block.

The backbone is a ViT-style stack: linear patch embedding with a learned
class token and positional table, pre-norm transformer encoder blocks, and
a linear head on the class token. The MixStyle block mixes per-item feature
statistics computed along the frequency axis of the token grid, pairing each
item with a same-class, different-device partner, and is inserted in front
of selected encoder layers during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericalError
from .features import FeatureConfig, PatchGrid, patch_grid_shape

LABEL_CODES = {"normal": 0, "abnormal": 1}
DOMAIN_CODES = {"stethoscope": 0, "smartphone": 1}


@dataclass(frozen=True)
class MixStyleConfig:
    """Statistics-mixing hyperparameters.

    insertion_depths places the block in front of encoder layers (the
    default [0, 3] puts one mix early and one mid-stack). epoch_windows, when
    set, restricts each insertion to a [start, end) epoch range instead,
    supporting the alternative reading of early/mid mixing as a schedule
    over training time.
    """

    alpha: float = 0.1
    p: float = 0.5
    insertion_depths: tuple[int, ...] = (0, 3)
    epsilon: float = 1e-6
    epoch_windows: tuple[tuple[int, int] | None, ...] | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must be in [0, 1], got {self.p}")
        if self.epoch_windows is not None and len(self.epoch_windows) != len(self.insertion_depths):
            raise ConfigError("epoch_windows must align with insertion_depths")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters, pinned in one place."""

    patch_dim: int
    grid_rows: int
    grid_cols: int
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 2
    dropout: float = 0.0
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        bad = [d for d in self.mixstyle.insertion_depths if not 0 <= d < self.num_layers]
        if bad:
            raise ConfigError(f"mixstyle insertion depths {bad} outside [0, {self.num_layers})")

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @classmethod
    def for_features(cls, fcfg: FeatureConfig, clip_samples: int, **overrides) -> "ModelConfig":
        """Derive patch geometry from a feature config and a clip length."""
        frames = (clip_samples - fcfg.window_samples) // fcfg.hop_samples + 1
        rows, cols = patch_grid_shape(fcfg.mel_bins, frames, fcfg)
        return cls(patch_dim=fcfg.patch_h * fcfg.patch_w, grid_rows=rows, grid_cols=cols,
                   **overrides)


@dataclass
class BatchFeatures:
    """A batch of token sequences plus the metadata MixStyle pairing needs."""

    tokens: torch.Tensor        # (B, 1 + N, D), class token first
    labels: torch.Tensor        # (B,) int64, LABEL_CODES
    domains: torch.Tensor       # (B,) int64, DOMAIN_CODES
    grid_shape: tuple[int, int]

    def with_tokens(self, tokens: torch.Tensor) -> "BatchFeatures":
        return BatchFeatures(tokens=tokens, labels=self.labels, domains=self.domains,
                             grid_shape=self.grid_shape)


def encode_labels(labels) -> torch.Tensor:
    return torch.tensor([LABEL_CODES[x] for x in labels], dtype=torch.int64)


def encode_domains(domains) -> torch.Tensor:
    return torch.tensor([DOMAIN_CODES[x] for x in domains], dtype=torch.int64)


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    """In-place truncated normal (+-2 std) via inverse-CDF, generator-seeded."""
    lo = math.erf(-2.0 / math.sqrt(2.0))
    hi = math.erf(2.0 / math.sqrt(2.0))
    u = torch.empty_like(tensor).uniform_((lo + 1) / 2, (hi + 1) / 2, generator=generator)
    tensor.copy_(torch.erfinv(2 * u - 1) * math.sqrt(2.0) * std)


def select_partners(labels: np.ndarray, domains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick a same-class, different-device partner per item, -1 when none exists.

    Draws uniformly among valid partners, avoiding reuse of a partner while
    unused valid candidates remain so a batch mixes against as many distinct
    styles as possible.
    """
    n = len(labels)
    partners = np.full(n, -1, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    for i in rng.permutation(n):
        valid = np.nonzero((labels == labels[i]) & (domains != domains[i]))[0]
        if valid.size == 0:
            continue
        fresh = valid[~used[valid]]
        pool = fresh if fresh.size else valid
        choice = int(pool[rng.integers(pool.size)])
        partners[i] = choice
        used[choice] = True
    return partners


class FrequencyMixStyle(nn.Module):
    """Mix per-item frequency-axis statistics between device domains.

    For each batch item, non-class tokens are viewed as a
    (rows_f, cols_t, D) grid; mean and std are reduced over the frequency
    rows, giving one (cols_t, D) statistics slice per item. Each item's
    statistics are blended with a same-class, different-device partner's
    using a Beta(alpha, alpha) weight. Items without a valid partner, the
    class token, and all label/domain metadata pass through untouched.
    Statistics stay in the autograd graph.
    """

    def __init__(self, cfg: MixStyleConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, feats: BatchFeatures, rng: np.random.Generator | None = None,
                training: bool = False, force_lambda=None, force_pairing=None) -> BatchFeatures:
        """Apply statistics mixing; identity when not training or not activated.

        Args:
            feats: batch with labels, domains, and grid shape attached.
            rng: seeded source for the activation coin, pairing, and lambda.
            training: mixing only ever happens in training mode.
            force_lambda: scalar or per-item array; bypasses the activation
                coin and the Beta draw (test hook).
            force_pairing: per-item partner indices, -1 for none; bypasses
                random pairing (test hook).

        Returns:
            BatchFeatures with mixed tokens, or feats unchanged.
        """
        forced = force_lambda is not None or force_pairing is not None
        if not training:
            return feats
        if not forced and self.cfg.p == 0.0:
            return feats
        if rng is None:
            rng = np.random.default_rng()
        if not forced and rng.random() >= self.cfg.p:
            return feats

        tokens = feats.tokens
        batch, _, dim = tokens.shape
        rows, cols = feats.grid_shape

        if force_pairing is not None:
            partners = np.asarray(force_pairing, dtype=np.int64)
        else:
            partners = select_partners(feats.labels.numpy(), feats.domains.numpy(), rng)
        if (partners < 0).all():
            return feats

        if force_lambda is not None:
            lam = np.broadcast_to(np.asarray(force_lambda, dtype=np.float64), (batch,)).copy()
        else:
            lam = rng.beta(self.cfg.alpha, self.cfg.alpha, size=batch)

        x = tokens[:, 1:, :].reshape(batch, rows, cols, dim)
        mu = x.mean(dim=1, keepdim=True)                                  # (B, 1, cols, D)
        sigma = x.var(dim=1, keepdim=True, unbiased=False).sqrt()
        sigma = sigma.clamp(min=self.cfg.epsilon)
        x_hat = (x - mu) / sigma

        safe = np.where(partners >= 0, partners, 0)
        idx = torch.from_numpy(safe)
        lam_t = torch.from_numpy(lam).to(tokens.dtype).view(batch, 1, 1, 1)
        mu_mix = lam_t * mu + (1 - lam_t) * mu[idx]
        sigma_mix = lam_t * sigma + (1 - lam_t) * sigma[idx]
        mixed = x_hat * sigma_mix + mu_mix

        keep = torch.from_numpy(partners < 0).view(batch, 1, 1, 1)
        out = torch.where(keep, x, mixed).reshape(batch, rows * cols, dim)
        return feats.with_tokens(torch.cat([tokens[:, :1, :], out], dim=1))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: self-attention and MLP with residuals."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.attn_out(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attention(self.norm1(x)))
        x = x + self.drop(self.fc2(self.drop(self.act(self.fc1(self.norm2(x))))))
        return x


class SpectrogramTransformer(nn.Module):
    """Patch embedding, MixStyle-augmented encoder stack, and binary head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_patches, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.num_layers))
        self.mixstyle = FrequencyMixStyle(cfg.mixstyle)
        self.head_norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.current_epoch = 0
        self._init_weights()

    def _init_weights(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        depth_scale = 1.0 / math.sqrt(2.0 * self.cfg.num_layers)
        for name, param in self.named_parameters():
            if param.dim() == 1:
                if name.endswith(".weight"):  # layer norms
                    nn.init.ones_(param)
                else:
                    nn.init.zeros_(param)
            elif name in ("cls_token", "pos_embed"):
                _trunc_normal_(param.data, 0.02, gen)
            else:
                _trunc_normal_(param.data, 0.02, gen)
                if "attn_out" in name or "fc2" in name:
                    param.data.mul_(depth_scale)

    def set_epoch(self, epoch: int) -> None:
        """Tell the epoch-window gate where training currently stands."""
        self.current_epoch = epoch

    def _mix_active_at(self, depth_index: int) -> bool:
        windows = self.cfg.mixstyle.epoch_windows
        if windows is None:
            return True
        window = windows[depth_index]
        if window is None:
            return True
        start, end = window
        return start <= self.current_epoch < end

    def embed(self, patches, labels: torch.Tensor, domains: torch.Tensor,
              grid_shape: tuple[int, int] | None = None) -> BatchFeatures:
        """Project patches to tokens, prepend the class token, add positions.

        Args:
            patches: (B, N, P) tensor, or a list of PatchGrid with matching
                geometry (stacked automatically).
            labels: (B,) int64 binary labels.
            domains: (B,) int64 device domains.
            grid_shape: required when patches is already a tensor.

        Returns:
            BatchFeatures of shape (B, 1 + N, D).
        """
        if isinstance(patches, (list, tuple)):
            grids: list[PatchGrid] = list(patches)
            shapes = {g.grid_shape for g in grids}
            if len(shapes) != 1:
                raise ConfigError(f"inconsistent grid shapes in batch: {sorted(shapes)}")
            grid_shape = grids[0].grid_shape
            patches = torch.stack([torch.from_numpy(np.ascontiguousarray(g.patches)) for g in grids])
        if grid_shape is None:
            raise ConfigError("grid_shape required when passing a raw patch tensor")
        patches = patches.to(self.patch_proj.weight.dtype)
        b, n, p = patches.shape
        if p != self.cfg.patch_dim or n != self.cfg.num_patches:
            raise ConfigError(
                f"patch tensor {n}x{p} does not match config "
                f"{self.cfg.num_patches}x{self.cfg.patch_dim}")
        if grid_shape != (self.cfg.grid_rows, self.cfg.grid_cols):
            raise ConfigError(f"grid {grid_shape} does not match config "
                              f"{(self.cfg.grid_rows, self.cfg.grid_cols)}")
        tokens = self.patch_proj(patches)
        cls = self.cls_token.expand(b, -1, -1).to(tokens.dtype)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed.to(tokens.dtype)
        return BatchFeatures(tokens=tokens, labels=labels, domains=domains, grid_shape=grid_shape)

    def encode(self, feats: BatchFeatures, training: bool = False,
               rng: np.random.Generator | None = None,
               force_lambda=None, force_pairing=None) -> BatchFeatures:
        """Run the encoder stack, applying MixStyle at its insertion depths.

        Raises NumericalError if the output contains non-finite values.
        """
        depths = self.cfg.mixstyle.insertion_depths
        out = feats
        for layer_idx, block in enumerate(self.blocks):
            if training and layer_idx in depths:
                pos = depths.index(layer_idx)
                if self._mix_active_at(pos):
                    out = self.mixstyle(out, rng=rng, training=training,
                                        force_lambda=force_lambda, force_pairing=force_pairing)
            out = out.with_tokens(block(out.tokens))
        if not torch.isfinite(out.tokens).all():
            bad = (~torch.isfinite(out.tokens)).sum().item()
            raise NumericalError(
                "non-finite activations in encoder output",
                diagnostics={"non_finite_count": int(bad),
                             "shape": tuple(out.tokens.shape),
                             "epoch": self.current_epoch})
        return out

    def logits(self, feats: BatchFeatures) -> torch.Tensor:
        """Linear head on the normalized final-layer class token."""
        return self.head(self.head_norm(feats.tokens[:, 0, :]))

    def classify(self, feats: BatchFeatures) -> tuple[torch.Tensor, list[str]]:
        """Class probabilities and hard predictions, ties broken to abnormal.

        Returns:
            (probs, preds): probs is (B, 2) with columns (normal, abnormal);
            preds are label strings.
        """
        probs = self.logits(feats).softmax(dim=-1)
        preds = ["abnormal" if p[1] >= p[0] else "normal" for p in probs]
        return probs, preds

    def forward(self, patches, labels: torch.Tensor, domains: torch.Tensor,
                grid_shape: tuple[int, int] | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> torch.Tensor:
        """Full pass from patches to logits (training entry point)."""
        feats = self.embed(patches, labels, domains, grid_shape)
        feats = self.encode(feats, training=training, rng=rng)
        return self.logits(feats)
