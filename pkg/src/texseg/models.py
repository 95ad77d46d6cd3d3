"""Label generator and label cleaner models, their losses and label rules.

The generator (TLG) is a transformer projector followed by an inverse
projector; its per-patch reconstruction error ranks patches for the
initial pseudo-labels. The cleaner (TLC) is a transformer binary
classifier trained on those labels and used to correct them. ALG/MLC are
the fully connected replacements used in the ablation.

All models take token batches of shape (B, n_k, d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Initializer, ParamSet, Tensor
from .errors import EmptyBatch, NonFiniteError, ShapeMismatch
from .layers import init_mlp, init_msa, linear, ln, mlp, msa

TEXTURE = 1
NON_TEXTURE = 0
EXCLUDED = -1

ALG_WIDTHS = (1024, 512, 256, 128, 256, 512, 1024)


@dataclass(frozen=True)
class ModelConfig:
    n_k: int = 16
    d: int = 16
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    init_std: float = 0.02
    dtype: str = "float64"

    @property
    def D(self) -> int:
        return self.n_k * self.d


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_tokens(x, cfg: ModelConfig):
    if tuple(x.shape[-2:]) != (cfg.n_k, cfg.d):
        raise ShapeMismatch(f"expected (..., {cfg.n_k}, {cfg.d}) tokens, got {tuple(x.shape)}")


def _encoder_block(x: Tensor, p, heads: int) -> Tensor:
    """Pre-LN self-attention and MLP, each with a residual connection."""
    h = ln(x, p, "ln1")
    x = ag.add(msa(h, h, h, p.scope("attn"), heads), x)
    return ag.add(mlp(ln(x, p, "ln2"), p.scope("mlp")), x)


def _init_encoder_block(init: Initializer, prefix: str, cfg: ModelConfig):
    init.layer_norm(f"{prefix}.ln1", cfg.d)
    init_msa(init, f"{prefix}.attn", cfg.d)
    init.layer_norm(f"{prefix}.ln2", cfg.d)
    init_mlp(init, f"{prefix}.mlp", cfg.d, cfg.mlp_ratio * cfg.d)


# ---------------------------------------------------------------------------
# generator


class TLG:
    """Transformer projector / inverse projector pair.

    The latent keeps the input's (n_k, d) shape. ``gaussian`` is the fixed
    N(0, 1) target drawn once from the seed; it is never trained.
    """

    kind = "tlg"

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = ParamSet(self.dtype)
        init = Initializer(self.params, cfg.seed, cfg.init_std)
        for x in range(cfg.layers):
            _init_encoder_block(init, f"proj.{x}", cfg)
        for x in range(cfg.layers):
            pre = f"inv.{x}"
            init.layer_norm(f"{pre}.ln_z", cfg.d)
            init_msa(init, f"{pre}.attn1", cfg.d)
            init.layer_norm(f"{pre}.ln_zhat", cfg.d)
            init.layer_norm(f"{pre}.ln_mem", cfg.d)
            init_msa(init, f"{pre}.attn2", cfg.d)
            init.layer_norm(f"{pre}.ln_mlp", cfg.d)
            init_mlp(init, f"{pre}.mlp", cfg.d, cfg.mlp_ratio * cfg.d)
        init.normal("bias_b", (cfg.n_k, cfg.d))
        grng = np.random.default_rng([cfg.seed, 0x9A55])
        self.gaussian = grng.normal(0.0, 1.0, size=(cfg.n_k, cfg.d)).astype(self.dtype)
        self.gaussian.flags.writeable = False

    @property
    def target_shape(self):
        return (self.cfg.n_k, self.cfg.d)

    def target(self, g: np.ndarray) -> np.ndarray:
        """What the reconstruction is compared against (the input itself)."""
        return np.asarray(g, dtype=self.dtype)

    def project(self, g) -> Tensor:
        g = _as_tensor(g, self.dtype)
        _check_tokens(g, self.cfg)
        p = g
        for x in range(self.cfg.layers):
            p = _encoder_block(p, self.params.scope(f"proj.{x}"), self.cfg.heads)
        return p

    def inverse(self, p_latent) -> Tensor:
        z0 = _as_tensor(p_latent, self.dtype)
        _check_tokens(z0, self.cfg)
        b = self.params["bias_b"]
        heads = self.cfg.heads
        z = z0
        for x in range(self.cfg.layers):
            p = self.params.scope(f"inv.{x}")
            h = ln(z, p, "ln_z")
            qk = ag.add(h, b)
            zhat = ag.add(msa(qk, qk, h, p.scope("attn1"), heads), z)
            qhat = ag.add(ln(zhat, p, "ln_zhat"), b)
            mem = ln(z0, p, "ln_mem")
            ztil = ag.add(msa(qhat, mem, mem, p.scope("attn2"), heads), zhat)
            z = ag.add(mlp(ln(ztil, p, "ln_mlp"), p.scope("mlp")), ztil)
        return z

    def reconstruct(self, g) -> Tensor:
        return self.inverse(self.project(g))


class ALG:
    """Fully connected autoencoder (1024-512-256-128-256-512-1024).

    Token batches are flattened and lifted to 1024 dimensions by a fixed
    seeded projection when D != 1024; that lifted vector is the
    reconstruction target.
    """

    kind = "alg"
    widths = ALG_WIDTHS

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = ParamSet(self.dtype)
        init = Initializer(self.params, cfg.seed, cfg.init_std)
        for i, (a, b) in enumerate(zip(ALG_WIDTHS[:-1], ALG_WIDTHS[1:])):
            init.linear(f"alg.{i}", a, b, std=1.0 / math.sqrt(a))
        rng = np.random.default_rng([cfg.seed, 0xA16])
        D = cfg.D
        if D == ALG_WIDTHS[0]:
            self.lift = None
        else:
            self.lift = rng.normal(0.0, 1.0 / math.sqrt(D), size=(D, ALG_WIDTHS[0])).astype(self.dtype)
            self.lift.flags.writeable = False
        grng = np.random.default_rng([cfg.seed, 0x9A55])
        self.gaussian = grng.normal(0.0, 1.0, size=(ALG_WIDTHS[-1],)).astype(self.dtype)
        self.gaussian.flags.writeable = False

    @property
    def target_shape(self):
        return (ALG_WIDTHS[-1],)

    def target(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=self.dtype)
        flat = g.reshape(*g.shape[:-2], -1)
        return flat if self.lift is None else flat @ self.lift

    def reconstruct(self, g) -> Tensor:
        g = g.data if isinstance(g, Tensor) else g
        _check_tokens(np.asarray(g), self.cfg)
        h = Tensor(self.target(g))
        last = len(ALG_WIDTHS) - 2
        for i in range(len(ALG_WIDTHS) - 1):
            h = linear(h, self.params, f"alg.{i}")
            if i < last:
                h = ag.relu(h)
        return h


# ---------------------------------------------------------------------------
# cleaner


class TLC:
    """Transformer encoder, mean-pooled, into a single sigmoid unit."""

    kind = "tlc"

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = ParamSet(self.dtype)
        init = Initializer(self.params, cfg.seed + 1, cfg.init_std)
        for x in range(cfg.layers):
            _init_encoder_block(init, f"cls.{x}", cfg)
        init.layer_norm("cls.ln_f", cfg.d)
        init.linear("cls.head", cfg.d, 1)

    def logits(self, g) -> Tensor:
        h = _as_tensor(g, self.dtype)
        _check_tokens(h, self.cfg)
        for x in range(self.cfg.layers):
            h = _encoder_block(h, self.params.scope(f"cls.{x}"), self.cfg.heads)
        h = ln(h, self.params, "cls.ln_f")
        pooled = ag.tmean(h, axis=-2)
        out = linear(pooled, self.params, "cls.head")
        return ag.reshape(out, out.shape[:-1])

    def predict(self, g) -> Tensor:
        return ag.sigmoid(self.logits(g))


class MLC:
    """Three-layer MLP classifier on the flattened token sequence."""

    kind = "mlc"
    widths = (128, 64, 1)

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = ParamSet(self.dtype)
        init = Initializer(self.params, cfg.seed + 1, cfg.init_std)
        dims = (cfg.D,) + self.widths
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            init.linear(f"mlc.{i}", a, b, std=1.0 / math.sqrt(a))

    def logits(self, g) -> Tensor:
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        _check_tokens(g, self.cfg)
        h = Tensor(np.asarray(g, dtype=self.dtype).reshape(*g.shape[:-2], -1))
        for i in range(len(self.widths)):
            h = linear(h, self.params, f"mlc.{i}")
            if i < len(self.widths) - 1:
                h = ag.relu(h)
        return ag.reshape(h, h.shape[:-1])

    def predict(self, g) -> Tensor:
        return ag.sigmoid(self.logits(g))


def make_models(pair: str, cfg: ModelConfig):
    """``("transformer" | "alg+mlc") -> (generator, cleaner)``."""
    if pair in ("transformer", "tlg+tlc"):
        return TLG(cfg), TLC(cfg)
    if pair in ("alg+mlc", "mlp"):
        return ALG(cfg), MLC(cfg)
    raise ValueError(f"unknown model pair {pair!r}")


# ---------------------------------------------------------------------------
# losses and errors


def generator_targets(model, g: np.ndarray, labels=None, use_gaussian: bool = False,
                      mode: str = "target"):
    """Inputs and reconstruction targets for a batch.

    With ``use_gaussian`` the texture-labelled rows are pulled toward the
    model's fixed Gaussian. ``mode="target"`` keeps their input unchanged;
    ``mode="input"`` also replaces the input by the Gaussian.
    """
    g = np.asarray(g, dtype=model.dtype)
    target = model.target(g)
    if not use_gaussian or labels is None:
        return g, target
    tex = np.asarray(labels) == TEXTURE
    if not tex.any():
        return g, target
    target = target.copy()
    target[tex] = model.gaussian
    if mode == "input":
        if model.kind != "tlg":
            raise ValueError("input replacement needs token-shaped Gaussians")
        g = g.copy()
        g[tex] = model.gaussian
    elif mode != "target":
        raise ValueError(f"unknown gaussian mode {mode!r}")
    return g, target


def tlg_loss(model, g, labels=None, phase: int = 1, use_dl: bool = True,
             mode: str = "target") -> Tensor:
    """Summed L1 reconstruction loss over the batch.

    From phase 2 on (with ``use_dl``) texture-labelled rows are compared
    against the fixed Gaussian instead of their own target.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if g.ndim < 3 or len(g) == 0:
        raise EmptyBatch("generator loss on an empty batch")
    x, target = generator_targets(model, g, labels, use_dl and phase > 1, mode)
    recon = model.reconstruct(x)
    return ag.l1_loss(Tensor(target), recon)


def compute_error(g, g_hat, mode: str = "standard", gaussian=None) -> float:
    """L1 reconstruction error of one instance: against ``g`` (standard) or
    against the fixed Gaussian (gaussian)."""
    g_hat = np.asarray(g_hat)
    ref = np.asarray(g) if mode == "standard" else np.asarray(gaussian)
    if mode not in ("standard", "gaussian"):
        raise ValueError(f"unknown error mode {mode!r}")
    if ref.shape != g_hat.shape:
        raise ShapeMismatch(f"reference {ref.shape} vs reconstruction {g_hat.shape}")
    return float(np.abs(ref - g_hat).sum())


def reconstruction_errors(model, g, labels=None, use_gaussian: bool = False,
                          mode: str = "target"):
    """Per-instance errors for a batch plus audit counts.

    Returns ``(errors, n_standard, n_gaussian)``.
    """
    x, target = generator_targets(model, g, labels, use_gaussian, mode)
    recon = model.reconstruct(x).data
    axes = tuple(range(1, recon.ndim))
    err = np.abs(target - recon).sum(axis=axes)
    n_gauss = int((np.asarray(labels) == TEXTURE).sum()) if (use_gaussian and labels is not None) else 0
    return err, len(err) - n_gauss, n_gauss


def tlc_loss(phi, labels) -> Tensor:
    """Mean binary cross-entropy of classifier outputs against 0/1 labels."""
    phi = phi if isinstance(phi, Tensor) else Tensor(np.asarray(phi, dtype=np.float64))
    if phi.data.size == 0:
        raise EmptyBatch("cleaner loss on an empty batch")
    return ag.binary_cross_entropy(phi, labels)


# ---------------------------------------------------------------------------
# label rules


def _above_mean(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise EmptyBatch("label rule on an empty batch")
    if not np.isfinite(v).all():
        raise NonFiniteError("non-finite value in batch")
    # n * v_i >= sum(v) avoids the rounding of an explicit division
    return (v.size * v >= math.fsum(v.tolist())).astype(np.int8)


def assign_initial_labels(errors) -> np.ndarray:
    """Texture (1) where the error is at or above the batch mean, else 0."""
    return _above_mean(errors)


def clean_labels(scores, phase: str = "later", beta_c: float = 0.5, prior=None) -> np.ndarray:
    """Relabel a batch from cleaner scores.

    ``phase="first_epoch"``: rows with score above ``beta_c`` become
    texture, the rest keep ``prior``. ``phase="later"``: texture iff the
    score is at or above the batch mean.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyBatch("label rule on an empty batch")
    if phase == "later":
        return _above_mean(s)
    if phase != "first_epoch":
        raise ValueError(f"unknown phase {phase!r}")
    if not 0.0 < beta_c < 1.0:
        raise ValueError(f"beta_c must lie in (0, 1), got {beta_c}")
    out = (np.zeros(s.size, dtype=np.int8) if prior is None
           else np.asarray(prior, dtype=np.int8).copy())
    if out.shape != s.shape:
        raise ShapeMismatch(f"{out.size} prior labels for {s.size} scores")
    out[s > beta_c] = TEXTURE
    return out
