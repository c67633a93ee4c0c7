"""Speaker-embedding backend over a stack of layer-wise features.

Pipeline: initial pointwise projection -> frame relevance gating (attentive
VAD) -> dense block of multi-dilated convolutions with squeeze-excitation
and a residual -> layer pooling (multi-head channel attention, or the
weighted-sum baseline) -> attentive statistics pooling -> linear projection
to the embedding size with batch norm.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class ModelConfig:
    input_dim: int = 768          # hidden size of the incoming stack
    input_layers: int = 13        # layer count of the incoming stack
    backbone_dim: int = 512
    d2_bottleneck: int = 128
    d2_layers: int = 4
    d2_growth: int = 128
    kernel_size: tuple = (3, 3)
    num_heads: int = 4
    head_dim: int = 128
    asp_bottleneck: int = 128
    embed_dim: int = 192
    use_attn_vad: bool = True
    use_d2: bool = True
    pool_mode: str = "mca"        # "mca" | "superb"

    def validate(self):
        for name in ("input_dim", "input_layers", "backbone_dim",
                     "d2_bottleneck", "d2_layers", "d2_growth", "num_heads",
                     "head_dim", "asp_bottleneck", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_heads * self.head_dim != self.backbone_dim:
            raise ValueError("num_heads * head_dim must equal backbone_dim")
        if self.d2_layers * self.d2_growth != self.backbone_dim:
            raise ValueError(
                "d2_layers * d2_growth must equal backbone_dim "
                "(dense concat must restore the backbone size)")
        if self.pool_mode not in ("mca", "superb"):
            raise ValueError(f"pool_mode must be 'mca' or 'superb', got "
                             f"{self.pool_mode!r}")
        return self


def large_preset():
    return ModelConfig(input_dim=1024, input_layers=25)


def _parameter_shapes(cfg):
    """Yield (name, shape, init) for every learnable parameter."""
    C = cfg.backbone_dim
    L = cfg.input_layers
    kh, kw = cfg.kernel_size
    yield "front.weight", (C, cfg.input_dim), {"kaiming": cfg.input_dim}
    yield "front.bias", (C,), "zeros"
    if cfg.use_attn_vad:
        yield "vad.layer_logits", (L,), "zeros"
        yield "vad.score", (L, C), "zeros"
    if cfg.use_d2:
        g = cfg.d2_growth
        yield "d2.bottleneck.weight", (cfg.d2_bottleneck, C), {"kaiming": C}
        yield "d2.bottleneck.bias", (cfg.d2_bottleneck,), "zeros"
        for i in range(1, cfg.d2_layers + 1):
            for j in range(i):
                cin = cfg.d2_bottleneck if j == 0 else g
                yield (f"d2.conv{i}_{j}.weight", (g, cin, kh, kw),
                       {"kaiming": cin * kh * kw})
            yield f"d2.norm{i}.gamma", (g,), "ones"
            yield f"d2.norm{i}.beta", (g,), "zeros"
        se = cfg.d2_bottleneck
        yield "d2.se.reduce.weight", (C, se), {"kaiming": C}
        yield "d2.se.reduce.bias", (se,), "zeros"
        yield "d2.se.expand.weight", (se, C), {"kaiming": se}
        yield "d2.se.expand.bias", (C,), "zeros"
    if cfg.pool_mode == "mca":
        yield "mca.proj.weight", (C, C), {"kaiming": C}
        yield "mca.proj.bias", (C,), "zeros"
        lb = max(L // 2, 1)
        for k in range(cfg.num_heads):
            yield f"mca.head{k}.reduce.weight", (lb, L), {"kaiming": L}
            yield f"mca.head{k}.expand.weight", (L, lb), {"kaiming": lb}
    else:
        yield "superb.layer_logits", (L,), "zeros"
    a = cfg.asp_bottleneck
    yield "asp.hidden.weight", (a, C), {"kaiming": C}
    yield "asp.hidden.bias", (a,), "zeros"
    yield "asp.score.weight", (C, a), {"kaiming": a}
    # no bias on the projection: the batch norm right after absorbs it
    yield "embed.weight", (2 * C, cfg.embed_dim), {"kaiming": 2 * C}
    yield "embed.norm.gamma", (cfg.embed_dim,), "ones"
    yield "embed.norm.beta", (cfg.embed_dim,), "zeros"


def param_count(cfg):
    """Learnable scalars in the backend (classifier weights not included)."""
    cfg.validate()
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_shapes(cfg))


def param_count_by_group(cfg):
    cfg.validate()
    groups = {}
    for name, shape, _ in _parameter_shapes(cfg):
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + int(np.prod(shape))
    return groups


def init_params(cfg, seed=0, dtype=np.float32):
    """Build the parameter store.  Attention gates start at zero so the
    initial forward equals unweighted pooling."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    for name, shape, init in _parameter_shapes(cfg):
        if init == "zeros":
            value = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            value = np.ones(shape, dtype=dtype)
        else:
            fan_in = init["kaiming"]
            limit = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-limit, limit, size=shape).astype(dtype)
        store.register(name, value)
    return store


class BackendModel:
    """Owns parameters, batch-norm running statistics, and the forward pass."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.dtype = dtype
        self.params = init_params(cfg, seed=seed, dtype=dtype)
        self.bn_states = {}
        if cfg.use_d2:
            for i in range(1, cfg.d2_layers + 1):
                self.bn_states[f"d2.norm{i}"] = ad.BatchNormState(
                    cfg.d2_growth, dtype)
        self.bn_states["embed.norm"] = ad.BatchNormState(cfg.embed_dim, dtype)

    # -- stages ------------------------------------------------------------

    def _attentive_vad(self, h):
        """Scale each frame of each layer by a sigmoid relevance score."""
        B, C, L, T = h.data.shape
        w = ad.softmax(self.params["vad.layer_logits"], axis=0)
        merged = ad.sum_(ad.mul(h, ad.reshape(w, (1, 1, L, 1))), axis=2)
        scores = ad.matmul(self.params["vad.score"], merged)   # (B, L, T)
        alpha = ad.sigmoid(scores)
        return ad.mul(h, ad.reshape(alpha, (B, 1, L, T)))

    def _md_conv(self, groups, layer_index, training):
        """One dense layer: per-group convolution with its own frame
        dilation, summed, then norm + ReLU."""
        if len(groups) != layer_index:
            raise ValueError(
                f"dense layer {layer_index} expects {layer_index} input "
                f"groups, got {len(groups)}")
        total = None
        for j, g in enumerate(groups):
            kernel = self.params[f"d2.conv{layer_index}_{j}.weight"]
            y = ad.conv2d(g, kernel, dilation=(1, 2 ** j))
            total = y if total is None else ad.add(total, y)
        normed = ad.batch_norm(
            total, self.params[f"d2.norm{layer_index}.gamma"],
            self.params[f"d2.norm{layer_index}.beta"],
            self.bn_states[f"d2.norm{layer_index}"], training)
        return ad.relu(normed)

    def _d2_block(self, h, training):
        cfg = self.cfg
        z0 = ad.pointwise_conv(h, self.params["d2.bottleneck.weight"],
                               self.params["d2.bottleneck.bias"])
        groups = [z0]
        outs = []
        for i in range(1, cfg.d2_layers + 1):
            y = self._md_conv(groups, i, training)
            groups.append(y)
            outs.append(y)
        dense = ad.concat(outs, axis=1)
        squeeze = ad.mean(dense, axis=(2, 3))                   # (B, C)
        hid = ad.relu(ad.add(ad.matmul(squeeze, self.params["d2.se.reduce.weight"]),
                             self.params["d2.se.reduce.bias"]))
        gate = ad.sigmoid(ad.add(ad.matmul(hid, self.params["d2.se.expand.weight"]),
                                 self.params["d2.se.expand.bias"]))
        B, C = gate.data.shape
        scaled = ad.mul(dense, ad.reshape(gate, (B, C, 1, 1)))
        return ad.add(h, scaled)

    def _mca_pool(self, h):
        """Per-head squeeze-excitation over the layer axis, then max-pool
        the layer dimension away."""
        cfg = self.cfg
        B, C, L, T = h.data.shape
        p = ad.pointwise_conv(h, self.params["mca.proj.weight"],
                              self.params["mca.proj.bias"])
        heads = []
        for k in range(cfg.num_heads):
            hx = ad.narrow(p, 1, k * cfg.head_dim, cfg.head_dim)
            s_avg = ad.mean(hx, axis=1)                         # (B, L, T)
            s_max = ad.max_(hx, axis=1)
            reduce_w = self.params[f"mca.head{k}.reduce.weight"]
            expand_w = self.params[f"mca.head{k}.expand.weight"]
            za = ad.matmul(expand_w, ad.relu(ad.matmul(reduce_w, s_avg)))
            zm = ad.matmul(expand_w, ad.relu(ad.matmul(reduce_w, s_max)))
            gate = ad.sigmoid(ad.add(za, zm))                   # (B, L, T)
            heads.append(ad.mul(hx, ad.reshape(gate, (B, 1, L, T))))
        stacked = ad.concat(heads, axis=1)
        return ad.max_(stacked, axis=2)                          # (B, C, T)

    def _superb_pool(self, h):
        B, C, L, T = h.data.shape
        w = ad.softmax(self.params["superb.layer_logits"], axis=0)
        return ad.sum_(ad.mul(h, ad.reshape(w, (1, 1, L, 1))), axis=2)

    def _asp(self, x):
        """Attention-weighted per-channel mean and standard deviation."""
        B, C, T = x.data.shape
        if T < 1:
            raise ValueError("attentive statistics need at least one frame")
        hid = ad.tanh(ad.add(
            ad.matmul(self.params["asp.hidden.weight"], x),
            ad.reshape(self.params["asp.hidden.bias"], (1, -1, 1))))
        scores = ad.matmul(self.params["asp.score.weight"], hid)  # (B, C, T)
        alpha = ad.softmax(scores, axis=2)
        mu = ad.sum_(ad.mul(alpha, x), axis=2)
        ex2 = ad.sum_(ad.mul(alpha, ad.square(x)), axis=2)
        var = ad.clamp_min(ad.sub(ex2, ad.square(mu)), 1e-9)
        sigma = ad.sqrt(var)
        return ad.concat([mu, sigma], axis=1)                    # (B, 2C)

    # -- full pass ----------------------------------------------------------

    def forward(self, x, training=False):
        """x: Tensor or array of shape (B, input_dim, L, T) -> (B, embed_dim)."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.cfg
        if x.data.ndim != 4:
            raise ValueError(f"expected a (B, C, L, T) batch, got shape "
                             f"{x.data.shape}")
        if x.data.shape[1] != cfg.input_dim or x.data.shape[2] != cfg.input_layers:
            raise ValueError(
                f"input shape {x.data.shape[1:]} does not match configured "
                f"(C, L) = ({cfg.input_dim}, {cfg.input_layers})")
        h = ad.pointwise_conv(x, self.params["front.weight"],
                              self.params["front.bias"])
        if cfg.use_attn_vad:
            h = self._attentive_vad(h)
        if cfg.use_d2:
            h = self._d2_block(h, training)
        if cfg.pool_mode == "mca":
            pooled = self._mca_pool(h)
        else:
            pooled = self._superb_pool(h)
        stats = self._asp(pooled)
        emb = ad.matmul(stats, self.params["embed.weight"])
        return ad.batch_norm(emb, self.params["embed.norm.gamma"],
                             self.params["embed.norm.beta"],
                             self.bn_states["embed.norm"], training)

    def embed(self, stack):
        """Eval-mode embedding for one (C, L, T) stack -> (embed_dim,) array."""
        arr = np.asarray(stack, dtype=self.dtype)
        if arr.ndim != 3:
            raise ValueError(f"expected a (C, L, T) stack, got {arr.shape}")
        with ad.no_grad():
            out = self.forward(arr[None], training=False)
        return out.data[0].copy()

    def embed_batch(self, stacks):
        """Eval-mode embeddings for stacks sharing (C, L); T may differ."""
        return np.stack([self.embed(s) for s in stacks])

    def param_count(self):
        return self.params.total_count()

    # -- state -------------------------------------------------------------

    def state_arrays(self):
        """All arrays needed to restore the model: params + BN buffers."""
        out = dict(self.params.state_dict())
        for name, st in sorted(self.bn_states.items()):
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
        return out

    def load_state_arrays(self, arrays):
        self.params.load_state_dict(arrays)
        for name, st in self.bn_states.items():
            st.running_mean = np.asarray(
                arrays[f"{name}.running_mean"], dtype=self.dtype).copy()
            st.running_var = np.asarray(
                arrays[f"{name}.running_var"], dtype=self.dtype).copy()
