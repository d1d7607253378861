"""Prompt-guided feature reconstruction network.

A shared self-attention encoder processes target and prompt token grids;
one of three decoder variants turns them into a reconstruction of the
target features:

* ``lqd`` — per-layer learnable queries are fused with the encoded target,
  then update the decoded state (no prompt involved).
* ``unidirectional`` — the encoded prompt replaces those queries, statically,
  at every layer.
* ``bidirectional`` — prompt and target token sets update each other through
  paired cross-attentions, prompt side first, with a final cross-attention
  producing the reconstruction.

A supervised refiner upsamples the absolute reconstruction error into a
full-resolution anomaly probability map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

DECODER_VARIANTS = ("lqd", "unidirectional", "bidirectional")
FINAL_QUERY_MODES = ("prompt", "target")


@dataclass
class ModelConfig:
    model_dim: int
    num_encoder_layers: int = 4
    num_decoder_layers: int = 4
    num_heads: int = 8
    mlp_hidden: int = 0          # 0 = use 4 * model_dim
    dropout: float = 0.1
    decoder_variant: str = "bidirectional"
    nma_enabled: bool = True
    nma_radius: int = 1
    refiner_enabled: bool = True
    refiner_blocks: int = 2
    refiner_channels: int = 128
    final_query: str = "prompt"

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ConfigError(f"decoder_variant must be one of {DECODER_VARIANTS}, got {self.decoder_variant!r}")
        if self.final_query not in FINAL_QUERY_MODES:
            raise ConfigError(f"final_query must be one of {FINAL_QUERY_MODES}, got {self.final_query!r}")
        if self.refiner_blocks < 1:
            raise ConfigError("refiner_blocks must be >= 1")
        if self.nma_radius < 0:
            raise ConfigError("nma_radius must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def mlp_dim(self) -> int:
        return self.mlp_hidden if self.mlp_hidden else 4 * self.model_dim


def nma_mask(h: int, w: int, radius: int) -> np.ndarray:
    """Boolean (h*w, h*w) mask: True where attention is forbidden.

    Token j is masked for token i when their grid cells are within Chebyshev
    distance ``radius`` (radius 0 masks only the diagonal). A configuration
    that would blind any token entirely is rejected.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    ys, xs = np.divmod(np.arange(h * w), w)
    dy = np.abs(ys[:, None] - ys[None, :])
    dx = np.abs(xs[:, None] - xs[None, :])
    mask = np.maximum(dy, dx) <= radius
    if mask.all(axis=1).any():
        raise ConfigError(f"nma radius {radius} masks an entire row on a {h}x{w} grid")
    return mask


def _init_linear(rng, fan_in, fan_out, name, params, std=0.02):
    w = T.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32), name=f"{name}/w")
    b = T.parameter(np.zeros(fan_out, dtype=np.float32), name=f"{name}/b")
    params[w.name] = w
    params[b.name] = b
    return w, b


def _init_norm(dim, name, params):
    g = T.parameter(np.ones(dim, dtype=np.float32), name=f"{name}/g")
    b = T.parameter(np.zeros(dim, dtype=np.float32), name=f"{name}/b")
    params[g.name] = g
    params[b.name] = b
    return g, b


class MultiHeadAttention:
    """Scaled dot-product attention with per-head splitting of the model dim."""

    def __init__(self, dim: int, heads: int, rng, name: str, params: dict):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq, self.bq = _init_linear(rng, dim, dim, f"{name}/q", params)
        self.wk, self.bk = _init_linear(rng, dim, dim, f"{name}/k", params)
        self.wv, self.bv = _init_linear(rng, dim, dim, f"{name}/v", params)
        self.wo, self.bo = _init_linear(rng, dim, dim, f"{name}/o", params)
        self.last_attn: np.ndarray | None = None

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        b, tq, c = query.shape
        tk = key.shape[1]
        if c != self.dim or key.shape[2] != self.dim:
            raise ShapeError(f"attention dim mismatch: {query.shape} / {key.shape} vs dim {self.dim}")

        def split(x, t):
            x = T.reshape(x, (b, t, self.heads, self.head_dim))
            return T.transpose(x, (0, 2, 1, 3))

        q = split(T.linear(query, self.wq, self.bq), tq)
        k = split(T.linear(key, self.wk, self.bk), tk)
        v = split(T.linear(value, self.wv, self.bv), tk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            attn = T.masked_softmax(scores, mask)
        else:
            attn = T.softmax_last_axis(scores)
        self.last_attn = attn.data
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, tq, c))
        return T.linear(out, self.wo, self.bo)


class AttentionBlock:
    """attention -> add & norm -> MLP -> add & norm (post-norm convention)."""

    def __init__(self, cfg: ModelConfig, rng, name: str, params: dict):
        c = cfg.model_dim
        self.cfg = cfg
        self.attn = MultiHeadAttention(c, cfg.num_heads, rng, f"{name}/attn", params)
        self.ln1 = _init_norm(c, f"{name}/ln1", params)
        self.w1, self.b1 = _init_linear(rng, c, cfg.mlp_dim, f"{name}/mlp1", params)
        self.w2, self.b2 = _init_linear(rng, cfg.mlp_dim, c, f"{name}/mlp2", params)
        self.ln2 = _init_norm(c, f"{name}/ln2", params)

    def __call__(self, query: Tensor, kv: Tensor, mask=None,
                 training: bool = False, rng=None) -> Tensor:
        a = self.attn(query, kv, kv, mask)
        if training and self.cfg.dropout > 0.0:
            a = T.dropout(a, self.cfg.dropout, rng)
        h = T.layer_norm(T.add(query, a), *self.ln1)
        m = T.linear(T.relu(T.linear(h, self.w1, self.b1)), self.w2, self.b2)
        if training and self.cfg.dropout > 0.0:
            m = T.dropout(m, self.cfg.dropout, rng)
        return T.layer_norm(T.add(h, m), *self.ln2)


class Refiner:
    """Upsampling head: (conv3x3 -> batchnorm -> relu -> deconv2x2) blocks,
    then 1x1 conv, sigmoid, and a bilinear resize to the image resolution."""

    def __init__(self, cfg: ModelConfig, in_channels: int, rng, params: dict):
        self.cfg = cfg
        self.blocks = []
        cin = in_channels
        ch = cfg.refiner_channels
        for i in range(cfg.refiner_blocks):
            name = f"refiner/b{i}"
            conv_w = T.parameter(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)),
                                            size=(3, 3, cin, ch)).astype(np.float32), name=f"{name}/conv_w")
            conv_b = T.parameter(np.zeros(ch, dtype=np.float32), name=f"{name}/conv_b")
            gamma = T.parameter(np.ones(ch, dtype=np.float32), name=f"{name}/bn_g")
            beta = T.parameter(np.zeros(ch, dtype=np.float32), name=f"{name}/bn_b")
            deconv_w = T.parameter(rng.normal(0.0, np.sqrt(2.0 / (4 * ch)),
                                              size=(2, 2, ch, ch)).astype(np.float32), name=f"{name}/deconv_w")
            deconv_b = T.parameter(np.zeros(ch, dtype=np.float32), name=f"{name}/deconv_b")
            for p in (conv_w, conv_b, gamma, beta, deconv_w, deconv_b):
                params[p.name] = p
            self.blocks.append({
                "conv_w": conv_w, "conv_b": conv_b, "gamma": gamma, "beta": beta,
                "deconv_w": deconv_w, "deconv_b": deconv_b,
                "running_mean": np.zeros(ch, dtype=np.float32),
                "running_var": np.ones(ch, dtype=np.float32),
            })
            cin = ch
        self.head_w, self.head_b = _init_linear(rng, ch, 1, "refiner/head", params, std=0.01)

    def __call__(self, error: Tensor, image_hw: tuple[int, int],
                 training: bool = False) -> tuple[Tensor, Tensor]:
        x = error
        for blk in self.blocks:
            x = T.conv2d_3x3(x, blk["conv_w"], blk["conv_b"])
            x = T.batch_norm(x, blk["gamma"], blk["beta"],
                             blk["running_mean"], blk["running_var"], training=training)
            x = T.relu(x)
            x = T.deconv2d_2x2_stride2(x, blk["deconv_w"], blk["deconv_b"])
        logits = T.conv2d_1x1(x, self.head_w, self.head_b)
        prob = T.sigmoid(logits)
        resized = T.bilinear_resize(prob, image_hw[0], image_hw[1])
        mhat = T.reshape(resized, resized.shape[:-1])
        return logits, mhat

    def batchnorm_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"refiner/b{i}/bn_mean"] = blk["running_mean"]
            out[f"refiner/b{i}/bn_var"] = blk["running_var"]
        return out


class ReconstructionModel:
    """Encoder, decoder variant, and refiner over a fixed token grid."""

    def __init__(self, cfg: ModelConfig, grid: tuple[int, int],
                 image_hw: tuple[int, int], seed: int = 0):
        self.cfg = cfg
        self.grid = tuple(grid)
        self.image_hw = tuple(image_hw)
        self.tokens = grid[0] * grid[1]
        self._params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = cfg.model_dim

        self.pos_embed = T.parameter(
            rng.normal(0.0, 0.02, size=(self.tokens, c)).astype(np.float32), name="pos_embed")
        self._params["pos_embed"] = self.pos_embed

        self.mask = nma_mask(grid[0], grid[1], cfg.nma_radius) if cfg.nma_enabled else None
        self.encoder = [AttentionBlock(cfg, rng, f"enc{i}", self._params)
                        for i in range(cfg.num_encoder_layers)]

        self.queries: list[Tensor] = []
        self.dec_a: list[AttentionBlock] = []
        self.dec_b: list[AttentionBlock] = []
        self.final_block: AttentionBlock | None = None
        for i in range(cfg.num_decoder_layers):
            if cfg.decoder_variant == "lqd":
                q = T.parameter(rng.normal(0.0, 0.02, size=(self.tokens, c)).astype(np.float32),
                                name=f"dec{i}/query")
                self._params[q.name] = q
                self.queries.append(q)
            self.dec_a.append(AttentionBlock(cfg, rng, f"dec{i}/a", self._params))
            self.dec_b.append(AttentionBlock(cfg, rng, f"dec{i}/b", self._params))
        if cfg.decoder_variant == "bidirectional":
            self.final_block = AttentionBlock(cfg, rng, "final", self._params)

        self.refiner = Refiner(cfg, c, rng, self._params) if cfg.refiner_enabled else None

    # -- parameter access -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def attention_modules(self) -> list[MultiHeadAttention]:
        mods = [b.attn for b in self.encoder + self.dec_a + self.dec_b]
        if self.final_block is not None:
            mods.append(self.final_block.attn)
        return mods

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self._params.items()}
        if self.refiner is not None:
            out.update(self.refiner.batchnorm_buffers())
        return out

    def load_state_arrays(self, blobs: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            arr = blobs[name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        if self.refiner is not None:
            for name, buf in self.refiner.batchnorm_buffers().items():
                buf[...] = blobs[name].astype(buf.dtype)

    # -- forward pieces ----------------------------------------------------

    def _to_grid(self, features) -> Tensor:
        f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float32))
        if f.ndim == 3:
            f = T.reshape(f, (1,) + f.shape)
        if f.ndim != 4:
            raise ShapeError(f"expected (h, w, c) or (b, h, w, c) features, got {f.shape}")
        b, h, w, c = f.shape
        if (h, w) != self.grid:
            raise ShapeError(f"feature grid {(h, w)} does not match model grid {self.grid}")
        if c != self.cfg.model_dim:
            raise ShapeError(f"feature channels {c} do not match model_dim {self.cfg.model_dim}")
        return f

    def _to_tokens(self, features) -> Tensor:
        f = self._to_grid(features)
        b, h, w, c = f.shape
        return T.reshape(f, (b, h * w, c))

    def encode(self, features, training: bool = False, rng=None) -> Tensor:
        """Flatten to tokens, add positional embeddings, run encoder blocks."""
        x = T.add(self._to_tokens(features), self.pos_embed)
        for blk in self.encoder:
            x = blk(x, x, self.mask, training, rng)
        return x

    def decode_lqd(self, x_e: Tensor, training: bool = False, rng=None) -> Tensor:
        b = x_e.shape[0]
        x_d = x_e
        for q, blk_a, blk_b in zip(self.queries, self.dec_a, self.dec_b):
            fused = blk_a(T.expand0(q, b), x_e, None, training, rng)
            x_d = blk_b(fused, x_d, None, training, rng)
        return x_d

    def decode_unidirectional(self, x_e: Tensor, p_e: Tensor,
                              training: bool = False, rng=None) -> Tensor:
        if x_e.shape != p_e.shape:
            raise ShapeError(f"prompt tokens {p_e.shape} do not match target tokens {x_e.shape}")
        x_d = x_e
        for blk_a, blk_b in zip(self.dec_a, self.dec_b):
            fused = blk_a(p_e, x_e, None, training, rng)
            x_d = blk_b(fused, x_d, None, training, rng)
        return x_d

    def decode_bidirectional(self, x_e: Tensor, p_e: Tensor,
                             training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        if x_e.shape != p_e.shape:
            raise ShapeError(f"prompt tokens {p_e.shape} do not match target tokens {x_e.shape}")
        x_d, p_d = x_e, p_e
        for blk_a, blk_b in zip(self.dec_a, self.dec_b):
            p_d = blk_a(p_d, x_d, None, training, rng)
            x_d = blk_b(x_d, p_d, None, training, rng)
        return x_d, p_d

    def final_cross_attention(self, p_last: Tensor, x_last: Tensor,
                              training: bool = False, rng=None) -> Tensor:
        if self.final_block is None:
            raise ConfigError("final cross-attention exists only for the bidirectional variant")
        if self.cfg.final_query == "prompt":
            return self.final_block(p_last, x_last, None, training, rng)
        return self.final_block(x_last, p_last, None, training, rng)

    def refine(self, error: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        if self.refiner is None:
            raise ConfigError("refiner is disabled in this configuration")
        return self.refiner(error, self.image_hw, training)

    def forward(self, target, prompt, training: bool = False, rng=None):
        """Reconstruct target features under prompt guidance.

        Returns ``(fhat, mhat)`` where ``fhat`` is the (b, h, w, c)
        reconstruction and ``mhat`` the (b, H, W) refined anomaly map, or
        None when the refiner is disabled. Inputs may be single maps or
        batches; outputs keep the batch axis.
        """
        if training and self.cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training-mode forward needs an rng for dropout")
        t_feat = self._to_grid(target)
        p_feat = self._to_grid(prompt)
        b = t_feat.shape[0]
        # one encoder pass over both streams; rows are independent
        both = self.encode(T.concat([t_feat, p_feat], axis=0), training, rng)
        x_e = T.narrow(both, 0, b)
        p_e = T.narrow(both, b, 2 * b)
        if self.cfg.decoder_variant == "lqd":
            fhat_tok = self.decode_lqd(x_e, training, rng)
        elif self.cfg.decoder_variant == "unidirectional":
            fhat_tok = self.decode_unidirectional(x_e, p_e, training, rng)
        else:
            x_d, p_d = self.decode_bidirectional(x_e, p_e, training, rng)
            fhat_tok = self.final_cross_attention(p_d, x_d, training, rng)
        h, w = self.grid
        fhat = T.reshape(fhat_tok, (b, h, w, self.cfg.model_dim))
        mhat = None
        if self.refiner is not None:
            err = T.abs_(T.sub(t_feat, fhat))
            _, mhat = self.refine(err, training)
        return fhat, mhat

    # -- configuration round-trip -----------------------------------------

    def config_arrays(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        scalars = {
            "cfg/model_dim": cfg.model_dim,
            "cfg/num_encoder_layers": cfg.num_encoder_layers,
            "cfg/num_decoder_layers": cfg.num_decoder_layers,
            "cfg/num_heads": cfg.num_heads,
            "cfg/mlp_hidden": cfg.mlp_hidden,
            "cfg/dropout": cfg.dropout,
            "cfg/decoder_variant": DECODER_VARIANTS.index(cfg.decoder_variant),
            "cfg/nma_enabled": int(cfg.nma_enabled),
            "cfg/nma_radius": cfg.nma_radius,
            "cfg/refiner_enabled": int(cfg.refiner_enabled),
            "cfg/refiner_blocks": cfg.refiner_blocks,
            "cfg/refiner_channels": cfg.refiner_channels,
            "cfg/final_query": FINAL_QUERY_MODES.index(cfg.final_query),
            "cfg/grid_h": self.grid[0],
            "cfg/grid_w": self.grid[1],
            "cfg/image_h": self.image_hw[0],
            "cfg/image_w": self.image_hw[1],
        }
        return {k: np.array([float(v)], dtype=np.float32) for k, v in scalars.items()}

    @classmethod
    def from_config_arrays(cls, blobs: dict[str, np.ndarray]) -> "ReconstructionModel":
        def geti(key):
            return int(round(float(blobs[key][0])))

        cfg = ModelConfig(
            model_dim=geti("cfg/model_dim"),
            num_encoder_layers=geti("cfg/num_encoder_layers"),
            num_decoder_layers=geti("cfg/num_decoder_layers"),
            num_heads=geti("cfg/num_heads"),
            mlp_hidden=geti("cfg/mlp_hidden"),
            dropout=float(blobs["cfg/dropout"][0]),
            decoder_variant=DECODER_VARIANTS[geti("cfg/decoder_variant")],
            nma_enabled=bool(geti("cfg/nma_enabled")),
            nma_radius=geti("cfg/nma_radius"),
            refiner_enabled=bool(geti("cfg/refiner_enabled")),
            refiner_blocks=geti("cfg/refiner_blocks"),
            refiner_channels=geti("cfg/refiner_channels"),
            final_query=FINAL_QUERY_MODES[geti("cfg/final_query")],
        )
        grid = (geti("cfg/grid_h"), geti("cfg/grid_w"))
        image_hw = (geti("cfg/image_h"), geti("cfg/image_w"))
        return cls(cfg, grid, image_hw)
