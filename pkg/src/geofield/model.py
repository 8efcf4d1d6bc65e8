"""Token construction, early fusion, latent-bottleneck encoder, and query decoder.

Observations become tokens by concatenating [normalized features, positional
encoding, projected modality embedding] and projecting to the channel width
with a per-modality linear map. Selected modalities' tokens are fused along
the sequence axis (an empty selection falls back to a trainable zero-
initialized null token). The encoder cross-attends a fixed set of trainable
latent vectors to the fused sequence and refines them with three residual
self-attention blocks. Queries concatenate [positional encoding, task
embedding], are projected to the channel width, cross-attend to the latents,
pass through three MLPs, and end in one shared linear head whose width is
the sum of all modality output widths; no operation mixes one query with
another, so each prediction row is independent of its batch neighbors.

A model instance is exclusive during training; once frozen (or loaded from
a checkpoint) it is immutable and safe for concurrent inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import ObservationBatch, QueryBatch
from .encoding import PosEncConfig, nyquist_bands, pos_enc_batch, text_embed, TEXT_VECTOR_DIM
from .errors import ConfigError, RegistryError, SchemaError
from .modalities import ModalityRegistry

MODALITY_EMBED_DIM = 8


@dataclass(frozen=True)
class ModelConfig:
    channel_width: int
    n_latents: int
    cross_heads: int
    self_heads: int
    cross_head_dim: int = 64
    self_head_dim: int = 128
    n_self_blocks: int = 3
    n_decoder_mlps: int = 3
    mlp_expansion: int = 1
    pre_norm: bool = True
    pos_enc: PosEncConfig = field(default_factory=lambda: nyquist_bands(0.5))
    seed: int = 0

    def __post_init__(self):
        for name in ("channel_width", "n_latents", "cross_heads", "self_heads",
                     "cross_head_dim", "self_head_dim", "n_self_blocks",
                     "n_decoder_mlps", "mlp_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")

    def to_json(self) -> dict:
        return {
            "channel_width": self.channel_width,
            "n_latents": self.n_latents,
            "cross_heads": self.cross_heads,
            "self_heads": self.self_heads,
            "cross_head_dim": self.cross_head_dim,
            "self_head_dim": self.self_head_dim,
            "n_self_blocks": self.n_self_blocks,
            "n_decoder_mlps": self.n_decoder_mlps,
            "mlp_expansion": self.mlp_expansion,
            "pre_norm": self.pre_norm,
            "pos_enc": self.pos_enc.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        kw = dict(obj)
        kw["pos_enc"] = PosEncConfig.from_json(kw["pos_enc"])
        return cls(**kw)


# Scaling presets: channel width, latent count, cross/self heads. Head sizes
# stay at 64 (cross) and 128 (self) so the attention inner width equals the
# channel width at every scale. The micro preset is a test-sized model.
PRESETS: dict[str, dict] = {
    "micro": dict(channel_width=32, n_latents=8, cross_heads=1, self_heads=1),
    "base": dict(channel_width=256, n_latents=512, cross_heads=4, self_heads=2),
    "base_x2": dict(channel_width=512, n_latents=1024, cross_heads=8, self_heads=4),
    "base_x4": dict(channel_width=1024, n_latents=2048, cross_heads=16, self_heads=8),
    "base_x6": dict(channel_width=1536, n_latents=3072, cross_heads=24, self_heads=12),
    "base_x8": dict(channel_width=2048, n_latents=3072, cross_heads=32, self_heads=16),
    "base_x10": dict(channel_width=2560, n_latents=2048, cross_heads=40, self_heads=20),
}

_PRESET_POS_ENC = {"micro": 4.5}  # micro uses 4 bands; production presets use 0.5 deg


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    if "pos_enc" not in overrides:
        kw["pos_enc"] = nyquist_bands(_PRESET_POS_ENC.get(name, 0.5))
    kw.update(overrides)
    return ModelConfig(**kw)


def parameter_count(config: ModelConfig, registry: ModalityRegistry) -> int:
    """Exact trainable-scalar count for a config without building the model.

    Keeps preset bookkeeping cheap: the largest presets would otherwise
    allocate hundreds of millions of floats just to be counted.
    """
    ch = config.channel_width
    pos = config.pos_enc.dim
    out = registry.out_dim

    def linear(i, o):
        return i * o + o

    def attention(heads, head_dim):
        inner = heads * head_dim
        return 3 * linear(ch, inner) + linear(inner, ch)

    mlp = linear(ch, config.mlp_expansion * ch) + linear(config.mlp_expansion * ch, ch)
    norm = 2 * ch if config.pre_norm else 0

    total = config.n_latents * ch              # latents
    total += ch                                # null token
    total += linear(TEXT_VECTOR_DIM, MODALITY_EMBED_DIM)
    total += linear(TEXT_VECTOR_DIM, pos)
    for spec in registry:
        total += linear(spec.feature_width + pos + MODALITY_EMBED_DIM, ch)
    total += linear(2 * pos, ch)               # query projection
    cross = attention(config.cross_heads, config.cross_head_dim)
    total += cross + mlp + 3 * norm            # encoder cross block (ln_q, ln_kv, ln_mlp)
    total += config.n_self_blocks * (attention(config.self_heads, config.self_head_dim) + mlp + 2 * norm)
    total += cross + 2 * norm                  # decoder cross attention
    total += config.n_decoder_mlps * (mlp + norm)
    total += linear(ch, out)                   # shared head
    return total


class _ParamStore:
    """Ordered name -> Parameter map; names are unique within a model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def make(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def values(self) -> list[Parameter]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)


class _Linear:
    def __init__(self, store: _ParamStore, prefix: str, in_dim: int, out_dim: int, rng):
        scale = 1.0 / math.sqrt(in_dim)
        self.w = store.make(f"{prefix}.w", rng.normal(0.0, scale, (in_dim, out_dim)))
        self.b = store.make(f"{prefix}.b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w.tensor) + self.b.tensor


class _LayerNorm:
    def __init__(self, store: _ParamStore, prefix: str, dim: int):
        self.gain = store.make(f"{prefix}.gain", np.ones(dim))
        self.bias = store.make(f"{prefix}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain.tensor, self.bias.tensor)


def _identity(x: Tensor) -> Tensor:
    return x


class _Attention:
    """Multi-head attention; query rows attend to key/value rows."""

    def __init__(self, store, prefix, channel: int, heads: int, head_dim: int, rng):
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.wq = _Linear(store, f"{prefix}.wq", channel, inner, rng)
        self.wk = _Linear(store, f"{prefix}.wk", channel, inner, rng)
        self.wv = _Linear(store, f"{prefix}.wv", channel, inner, rng)
        self.wo = _Linear(store, f"{prefix}.wo", inner, channel, rng)

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        n_q = q_in.shape[0]
        n_kv = kv_in.shape[0]
        h, d = self.heads, self.head_dim
        q = ad.transpose(self.wq(q_in).reshape((n_q, h, d)), (1, 0, 2))
        k = ad.transpose(self.wk(kv_in).reshape((n_kv, h, d)), (1, 0, 2))
        v = ad.transpose(self.wv(kv_in).reshape((n_kv, h, d)), (1, 0, 2))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        merged = ad.transpose(ctx, (1, 0, 2)).reshape((n_q, h * d))
        return self.wo(merged)


class _MLP:
    def __init__(self, store, prefix, channel: int, expansion: int, rng):
        hidden = expansion * channel
        self.fc1 = _Linear(store, f"{prefix}.fc1", channel, hidden, rng)
        self.fc2 = _Linear(store, f"{prefix}.fc2", hidden, channel, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


@dataclass
class FusedSequence:
    """Fused encoder input plus per-token provenance (modality id, obs index)."""

    tokens: Tensor
    provenance: list[tuple[int, int]]

    def __len__(self) -> int:
        return self.tokens.shape[0]


class FieldModel:
    """The full observation-to-prediction network over a modality registry."""

    def __init__(self, config: ModelConfig, registry: ModalityRegistry,
                 text_vectors: dict[str, np.ndarray] | None = None):
        self.config = config
        self.registry = registry
        rng = np.random.default_rng(config.seed)
        store = _ParamStore()
        self._store = store
        ch = config.channel_width
        pos_dim = config.pos_enc.dim

        raw = []
        for spec in registry:
            if text_vectors and spec.name in text_vectors:
                vec = np.asarray(text_vectors[spec.name], dtype=np.float64)
                if vec.shape != (TEXT_VECTOR_DIM,):
                    raise SchemaError(f"text vector for {spec.name} must have shape ({TEXT_VECTOR_DIM},)")
                raw.append(vec)
            else:
                raw.append(text_embed(spec.description))
        self.raw_text = np.stack(raw)  # (n_modalities, 64) constants

        self.latents = store.make("latents", rng.normal(0.0, 0.02, (config.n_latents, ch)))
        self.null_token = store.make("null_token", np.zeros((1, ch)))
        self.mod_proj = _Linear(store, "mod_embed.proj", TEXT_VECTOR_DIM, MODALITY_EMBED_DIM, rng)
        self.task_proj = _Linear(store, "task_embed.proj", TEXT_VECTOR_DIM, pos_dim, rng)

        self.input_proj = {}
        for spec in registry:
            in_dim = spec.feature_width + pos_dim + MODALITY_EMBED_DIM
            self.input_proj[spec.name] = _Linear(store, f"input_proj.{spec.name}", in_dim, ch, rng)
        self.query_proj = _Linear(store, "query_proj", 2 * pos_dim, ch, rng)

        def norm(prefix):
            return _LayerNorm(store, prefix, ch) if config.pre_norm else _identity

        self.enc_cross_ln_q = norm("encoder.cross.ln_q")
        self.enc_cross_ln_kv = norm("encoder.cross.ln_kv")
        self.enc_cross_attn = _Attention(store, "encoder.cross.attn", ch,
                                         config.cross_heads, config.cross_head_dim, rng)
        self.enc_cross_ln_mlp = norm("encoder.cross.ln_mlp")
        self.enc_cross_mlp = _MLP(store, "encoder.cross.mlp", ch, config.mlp_expansion, rng)

        self.self_blocks = []
        for i in range(config.n_self_blocks):
            block = {
                "ln_attn": norm(f"encoder.self.{i}.ln_attn"),
                "attn": _Attention(store, f"encoder.self.{i}.attn", ch,
                                   config.self_heads, config.self_head_dim, rng),
                "ln_mlp": norm(f"encoder.self.{i}.ln_mlp"),
                "mlp": _MLP(store, f"encoder.self.{i}.mlp", ch, config.mlp_expansion, rng),
            }
            self.self_blocks.append(block)

        self.dec_ln_q = norm("decoder.cross.ln_q")
        self.dec_ln_kv = norm("decoder.cross.ln_kv")
        self.dec_cross_attn = _Attention(store, "decoder.cross.attn", ch,
                                         config.cross_heads, config.cross_head_dim, rng)
        self.dec_mlps = []
        for i in range(config.n_decoder_mlps):
            self.dec_mlps.append(
                (norm(f"decoder.mlp.{i}.ln"), _MLP(store, f"decoder.mlp.{i}", ch, config.mlp_expansion, rng))
            )
        self.head = _Linear(store, "decoder.head", ch, registry.out_dim, rng)

    # -- parameter access -----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return self._store.values()

    def param(self, name: str) -> Parameter:
        return self._store[name]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters() if p.trainable)

    def parameter_breakdown(self) -> dict[str, int]:
        """Trainable scalar counts grouped by top-level component."""
        groups: dict[str, int] = {}
        for p in self.parameters():
            if not p.trainable:
                continue
            top = p.name.split(".", 1)[0]
            groups[top] = groups.get(top, 0) + p.size
        return groups

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def out_dim(self) -> int:
        return self.registry.out_dim

    # -- embeddings ------------------------------------------------------------

    def modality_embedding(self, mod_index: int) -> Tensor:
        """Projected 8-dim tag for one modality, as a (1, 8) tensor."""
        if not 0 <= mod_index < len(self.registry):
            raise RegistryError(f"modality index {mod_index} out of range")
        raw = Tensor(self.raw_text[mod_index:mod_index + 1])
        return self.mod_proj(raw)

    def task_embeddings(self) -> Tensor:
        """All task embeddings as a (n_modalities, pos_dim) tensor."""
        return self.task_proj(Tensor(self.raw_text))

    def task_embedding(self, task_id: int) -> Tensor:
        if not 0 <= task_id < len(self.registry):
            raise RegistryError(f"task id {task_id} out of range")
        return ad.gather_rows(self.task_embeddings(), np.array([task_id]))

    # -- forward pieces ----------------------------------------------------------

    def build_tokens(self, batch: ObservationBatch) -> Tensor:
        """[features || positional encoding || modality tag] -> channel width."""
        spec = self.registry[batch.mod_index]
        if batch.values.ndim != 2 or batch.values.shape[1] != spec.feature_width:
            raise SchemaError(
                f"{spec.name}: feature rows of width {batch.values.shape[-1]} "
                f"do not match spec width {spec.feature_width}"
            )
        k = batch.values.shape[0]
        pos = pos_enc_batch(batch.points, self.config.pos_enc)
        tag = ad.gather_rows(self.modality_embedding(batch.mod_index), np.zeros(k, dtype=np.int64))
        merged = ad.concat([Tensor(batch.values), Tensor(pos), tag], axis=1)
        return self.input_proj[spec.name](merged)

    def fuse(self, batches: list[ObservationBatch]) -> FusedSequence:
        """Concatenate token blocks along the sequence axis, in the given order.

        An empty selection yields the trainable null token as the whole
        sequence, so prior-only prediction stays trainable.
        """
        if not batches:
            return FusedSequence(tokens=self.null_token.tensor, provenance=[(-1, 0)])
        blocks = []
        provenance = []
        for batch in batches:
            blocks.append(self.build_tokens(batch))
            provenance.extend((batch.mod_index, i) for i in range(len(batch.points)))
        return FusedSequence(tokens=ad.concat(blocks, axis=0), provenance=provenance)

    def encode(self, fused: FusedSequence) -> Tensor:
        """Latent bottleneck: one cross-attention block, then self-attention blocks."""
        tokens = fused.tokens
        x = self.latents.tensor
        x = x + self.enc_cross_attn(self.enc_cross_ln_q(x), self.enc_cross_ln_kv(tokens))
        x = x + self.enc_cross_mlp(self.enc_cross_ln_mlp(x))
        for block in self.self_blocks:
            normed = block["ln_attn"](x)
            x = x + block["attn"](normed, normed)
            x = x + block["mlp"](block["ln_mlp"](x))
        return x

    def form_queries(self, queries: QueryBatch) -> Tensor:
        """[positional encoding || task embedding] -> shared projection."""
        ids = np.asarray(queries.task_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.registry)):
            raise RegistryError(f"task id outside [0, {len(self.registry)})")
        pos = Tensor(pos_enc_batch(queries.points, self.config.pos_enc))
        task = ad.gather_rows(self.task_embeddings(), ids)
        return self.query_proj(ad.concat([pos, task], axis=1))

    def decode(self, latents: Tensor, queries: Tensor) -> Tensor:
        """Queries attend to latents, then per-row MLPs and the shared head."""
        h = self.dec_cross_attn(self.dec_ln_q(queries), self.dec_ln_kv(latents))
        for ln, mlp in self.dec_mlps:
            h = mlp(ln(h))
        return self.head(h)

    # -- whole-scene forward ---------------------------------------------------

    def forward(self, observations: list[ObservationBatch], queries: QueryBatch) -> Tensor:
        latents = self.encode(self.fuse(observations))
        return self.decode(latents, self.form_queries(queries))

    def predict(self, observations: list[ObservationBatch], queries: QueryBatch) -> np.ndarray:
        """Inference forward pass without graph construction."""
        with ad.no_grad():
            return self.forward(observations, queries).data

    def encode_frozen(self, observations: list[ObservationBatch]) -> Tensor:
        """Latents for repeated decoding against one observation set."""
        with ad.no_grad():
            return self.encode(self.fuse(observations))

    def decode_frozen(self, latents: Tensor, queries: QueryBatch) -> np.ndarray:
        with ad.no_grad():
            return self.decode(latents, self.form_queries(queries)).data
