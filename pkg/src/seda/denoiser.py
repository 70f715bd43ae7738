"""Feature-level denoiser with cross-attention fusion, plus the classifier head.

The network predicts the clean textual-side feature from a noisy one, the
diffusion step and the visual feature of the same sample::

    F   = CrossAttention(query=x_noisy, key/value=x_visual) + x_noisy
    e   = act(W2 @ act(W1 @ SinPos(step)))
    out = Decoder([F; e])

Each d-dimensional feature vector is split into ``token_count`` tokens so
that the attention softmax runs over more than a single logit.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import InvalidArgumentError

ACTIVATIONS = {
    "silu": F.silu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}

FUSIONS = ("attention", "concat")


@dataclass
class DenoiserConfig:
    feature_dim: int = 64
    token_count: int = 8
    attention_heads: int = 1
    decoder_hidden_dims: tuple = None
    activation: str = "silu"
    fusion: str = "attention"
    residual: bool = True

    def __post_init__(self):
        if self.decoder_hidden_dims is None:
            self.decoder_hidden_dims = (2 * self.feature_dim, 2 * self.feature_dim)
        self.decoder_hidden_dims = tuple(int(h) for h in self.decoder_hidden_dims)
        if self.feature_dim < 1 or self.token_count < 1 or self.attention_heads < 1:
            raise InvalidArgumentError("feature_dim, token_count and attention_heads must be positive")
        if any(h < 1 for h in self.decoder_hidden_dims):
            raise InvalidArgumentError("decoder hidden dims must be positive")
        if self.feature_dim % self.token_count:
            raise InvalidArgumentError(
                f"token_count {self.token_count} must divide feature_dim {self.feature_dim}"
            )
        if (self.feature_dim // self.token_count) % self.attention_heads:
            raise InvalidArgumentError("attention_heads must divide the token width")
        if self.feature_dim % 2:
            raise InvalidArgumentError("feature_dim must be even for the sinusoidal embedding")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.fusion not in FUSIONS:
            raise InvalidArgumentError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")

    @property
    def token_width(self):
        return self.feature_dim // self.token_count


def sinusoidal_embedding(steps, dim):
    """Interleaved transformer embedding: pair k holds sin(i w_k), cos(i w_k)."""
    if dim % 2:
        raise InvalidArgumentError(f"embedding dimension must be even, got {dim}")
    steps = torch.as_tensor(steps).reshape(-1).to(torch.float64)
    if steps.numel() and float(steps.min()) < 0:
        raise InvalidArgumentError("steps must be non-negative")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.pow(10000.0, -2.0 * k / dim)
    angles = steps[:, None] * freqs[None, :]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.reshape(steps.numel(), dim)


def uniform_fan_in_(module, generator):
    """Re-draw every Linear layer in ``module`` from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(
                    torch.empty_like(layer.weight).uniform_(-bound, bound, generator=generator)
                )
                if layer.bias is not None:
                    layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=generator))


def attention(q, k, v):
    """Scaled dot-product attention over the token axis.

    Inputs are ``(..., tokens, width)``; returns ``(output, weights)``.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class CrossAttentionFusion(nn.Module):
    """Noisy features attend over visual tokens; a residual keeps the query stream."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.feature_dim
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)

    def _split(self, x):
        cfg = self.config
        b = x.shape[0]
        heads = cfg.attention_heads
        # (B, d) -> (B, heads, tokens, head_width)
        x = x.reshape(b, cfg.token_count, heads, cfg.token_width // heads)
        return x.transpose(1, 2)

    def forward(self, x_noisy, x_visual, return_weights=False):
        q = self._split(self.query(x_noisy))
        k = self._split(self.key(x_visual))
        v = self._split(self.value(x_visual))
        out, weights = attention(q, k, v)
        out = out.transpose(1, 2).reshape(x_noisy.shape)
        if self.config.residual:
            out = out + x_noisy
        if return_weights:
            return out, weights
        return out


class ConcatFusion(nn.Module):
    """Ablation fusion: a linear map of ``[x_noisy; x_visual]``."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(2 * config.feature_dim, config.feature_dim)

    def forward(self, x_noisy, x_visual, return_weights=False):
        out = self.proj(torch.cat([x_noisy, x_visual], dim=-1))
        return (out, None) if return_weights else out


class TimeEmbedding(nn.Module):
    def __init__(self, config):
        super().__init__()
        d = config.feature_dim
        self.dim = d
        self.act = ACTIVATIONS[config.activation]
        self.w1 = nn.Linear(d, d, bias=False)
        self.w2 = nn.Linear(d, d, bias=False)

    def forward(self, steps):
        raw = sinusoidal_embedding(steps, self.dim).to(self.w1.weight.dtype)
        return self.act(self.w2(self.act(self.w1(raw))))


class Denoiser(nn.Module):
    """Predicts the clean textual-side feature ``X(x_noisy, step, x_visual)``."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.act = ACTIVATIONS[config.activation]
        if config.fusion == "attention":
            self.fusion = CrossAttentionFusion(config)
        else:
            self.fusion = ConcatFusion(config)
        self.time_embed = TimeEmbedding(config)
        dims = (2 * config.feature_dim,) + config.decoder_hidden_dims + (config.feature_dim,)
        self.decoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def decode(self, h):
        for layer in self.decoder[:-1]:
            h = self.act(layer(h))
        return self.decoder[-1](h)

    def forward(self, x_noisy, steps, x_visual):
        fused = self.fusion(x_noisy, x_visual)
        emb = self.time_embed(steps)
        return self.decode(torch.cat([fused, emb], dim=-1))


class ClassifierHead(nn.Module):
    """Affine logits over ``num_classes``; scoring is softmax or sigmoid by label mode."""

    def __init__(self, feature_dim, num_classes, label_mode="single"):
        super().__init__()
        if num_classes < 2:
            raise InvalidArgumentError("a classifier needs at least two classes")
        if label_mode not in ("single", "multi"):
            raise InvalidArgumentError(f"label_mode must be 'single' or 'multi', got {label_mode!r}")
        self.num_classes = num_classes
        self.label_mode = label_mode
        self.linear = nn.Linear(feature_dim, num_classes)

    def forward(self, features):
        return self.linear(features)

    def scores(self, logits):
        if self.label_mode == "single":
            return torch.softmax(logits, dim=-1)
        return torch.sigmoid(logits)


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model skeleton before loading weights."""

    kind: str
    num_classes: int
    label_mode: str = "single"
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


class SedaModel(nn.Module):
    """Denoiser plus classifier head.

    ``text_centroids`` and ``visual_centroids`` are per-class training means,
    kept for the trajectory diagnostic at evaluation time.
    """

    kind = "seda"

    def __init__(self, config, num_classes, label_mode="single", generator=None):
        super().__init__()
        self.config = config
        self.denoiser = Denoiser(config)
        self.head = ClassifierHead(config.feature_dim, num_classes, label_mode)
        d = config.feature_dim
        self.register_buffer("text_centroids", torch.zeros(num_classes, d))
        self.register_buffer("visual_centroids", torch.zeros(num_classes, d))
        if generator is not None:
            uniform_fan_in_(self, generator)

    @property
    def spec(self):
        return ModelSpec(self.kind, self.head.num_classes, self.head.label_mode, self.config)

    def forward(self, x_noisy, steps, x_visual):
        return self.denoiser(x_noisy, steps, x_visual)


class OneStepModel(nn.Module):
    """Direct projector ``f(x_visual) -> textual space`` plus classifier head."""

    kind = "onestep"

    def __init__(self, config, num_classes, label_mode="single", generator=None):
        super().__init__()
        self.config = config
        self.act = ACTIVATIONS[config.activation]
        dims = (config.feature_dim,) + config.decoder_hidden_dims + (config.feature_dim,)
        self.projector = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = ClassifierHead(config.feature_dim, num_classes, label_mode)
        if generator is not None:
            uniform_fan_in_(self, generator)

    @property
    def spec(self):
        return ModelSpec(self.kind, self.head.num_classes, self.head.label_mode, self.config)

    def project(self, x_visual):
        h = x_visual
        for layer in self.projector[:-1]:
            h = self.act(layer(h))
        return self.projector[-1](h)

    def forward(self, x_visual):
        return self.project(x_visual)


class VisualModel(nn.Module):
    """Raw-visual control: the classifier head applied straight to ``x_visual``."""

    kind = "visual"

    def __init__(self, config, num_classes, label_mode="single", generator=None):
        super().__init__()
        self.config = config
        self.head = ClassifierHead(config.feature_dim, num_classes, label_mode)
        if generator is not None:
            uniform_fan_in_(self, generator)

    @property
    def spec(self):
        return ModelSpec(self.kind, self.head.num_classes, self.head.label_mode, self.config)

    def forward(self, x_visual):
        return x_visual


MODEL_KINDS = {cls.kind: cls for cls in (SedaModel, OneStepModel, VisualModel)}


def build_model(spec, generator=None):
    try:
        cls = MODEL_KINDS[spec.kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown model kind {spec.kind!r}") from None
    return cls(spec.denoiser, spec.num_classes, spec.label_mode, generator=generator)


def _check_pair(x_noisy, x_visual, config):
    if x_noisy.ndim != 2 or x_visual.shape != x_noisy.shape:
        raise InvalidArgumentError(
            f"expected matching B x d inputs, got {tuple(x_noisy.shape)} and {tuple(x_visual.shape)}"
        )
    if x_noisy.shape[1] != config.feature_dim:
        raise InvalidArgumentError(f"feature dim {x_noisy.shape[1]} != configured {config.feature_dim}")


def embed_time(model, steps):
    """Time feature ``act(W2 act(W1 SinPos(steps)))`` for each step."""
    return model.denoiser.time_embed(steps)


def cross_attention_fuse(model, x_noisy, x_visual):
    _check_pair(x_noisy, x_visual, model.config)
    return model.denoiser.fusion(x_noisy, x_visual)


def predict_clean(model, x_noisy, steps, x_visual):
    """Clean-feature prediction; deterministic given parameters and inputs."""
    _check_pair(x_noisy, x_visual, model.config)
    steps = torch.as_tensor(steps).reshape(-1)
    if steps.numel() != x_noisy.shape[0]:
        raise InvalidArgumentError(f"expected {x_noisy.shape[0]} steps, got {steps.numel()}")
    return model.denoiser(x_noisy, steps, x_visual)


def classify(head, features):
    if features.ndim != 2 or features.shape[1] != head.linear.in_features:
        raise InvalidArgumentError(
            f"features must be B x {head.linear.in_features}, got {tuple(features.shape)}"
        )
    return head(features)
