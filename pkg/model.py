"""
Model Module - DC-GCT double-chain pose lifter, parameters and cost accounting

Layer ops take a ParamScope (a name-prefixed view into ModelParams) so each
stage can be called and tested on its own.

Every projection carries a bias, including the attention Q/K/V/O maps and the
summed GCN propagation. Biases start at zero, so an initialized model matches
the bias-free formulas. The regression head predicts meters and scales by
OUTPUT_SCALE_MM, so forward() returns millimeters.

count_flops reports two FLOPs per multiply-accumulate; count_macs gives the
raw multiply-accumulate count.
"""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

import tensor as T
from tensor import Tensor, RunningStats
from config import ModelConfig
from dcgct import OUTPUT_SCALE_MM, ShapeError, ConfigError
from skeleton import AdjacencySet, CATEGORIES, SkeletonTopology, build_topology, decompose_adjacency, flip_pose

log = logging.getLogger("dcgct.model")

LCM_STACKS = 2


class ModelParams:
    """Every learnable tensor (by dotted name) plus batch-norm running stats"""

    def __init__(self):
        self.tensors: Dict[str, Tensor] = {}
        self.stats: Dict[str, RunningStats] = {}

    def add(self, name: str, value: np.ndarray):
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(value, requires_grad=True, name=name)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def scalar_count(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        """Copy with every tensor cast (running stats copied)"""
        out = ModelParams()
        for name, t in self.tensors.items():
            out.tensors[name] = Tensor(t.data, requires_grad=True, name=name, dtype=dtype)
        for name, s in self.stats.items():
            copy = RunningStats(s.channels, s.momentum, initialized=s.ready)
            if s.ready:
                copy.mean, copy.var = s.mean.copy(), s.var.copy()
            out.stats[name] = copy
        return out


class ParamScope:
    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params.tensors[self.prefix + name]

    def stats(self, name: str) -> RunningStats:
        return self.params.stats[self.prefix + name]

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self.params, self.prefix + prefix)


# Initialization

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _init_linear(params: ModelParams, rng, prefix: str, fan_in: int, fan_out: int, weight="weight", bias="bias"):
    params.add(prefix + weight, _xavier(rng, fan_in, fan_out))
    params.add(prefix + bias, np.zeros(fan_out))


def _init_norm(params: ModelParams, prefix: str, channels: int):
    params.add(prefix + "gamma", np.ones(channels))
    params.add(prefix + "beta", np.zeros(channels))


def _init_lcm(params: ModelParams, rng, prefix: str, cin: int, cfg: ModelConfig):
    hidden = cfg.lcm_expansion * cin
    _init_norm(params, prefix + "ln.", cin)
    for s in range(LCM_STACKS):
        stack = f"{prefix}stack{s}."
        for k in CATEGORIES:
            params.add(f"{stack}gcn.w_{k}", _xavier(rng, cin, hidden))
        params.add(stack + "gcn.bias", np.zeros(hidden))
        _init_norm(params, stack + "bn.", hidden)
        params.stats[stack + "bn"] = RunningStats(hidden, cfg.bn_momentum)
        _init_linear(params, rng, stack + "conv.", hidden, cin)


def _init_gcm(params: ModelParams, rng, prefix: str, c: int):
    for w in ("q", "k", "v", "o"):
        _init_linear(params, rng, prefix, c, c, weight="w" + w, bias="b" + w)


def _init_block(params: ModelParams, rng, prefix: str, cfg: ModelConfig):
    c, (c1, c2) = cfg.channels, cfg.chain_dims
    v = cfg.variant
    if v in ("double_chain", "double_no_fim"):
        _init_lcm(params, rng, prefix + "l2g_lcm.", c1, cfg)
        _init_gcm(params, rng, prefix + "g2l_gcm.", c2)
        if v == "double_chain":
            _init_linear(params, rng, prefix + "fim.", c, c // cfg.fim_reduction, weight="w_a", bias="b_a")
            _init_linear(params, rng, prefix + "fim.", c // cfg.fim_reduction, c, weight="w_b", bias="b_b")
        _init_gcm(params, rng, prefix + "l2g_gcm.", c1)
        _init_lcm(params, rng, prefix + "g2l_lcm.", c2, cfg)
    elif v == "parallel_double":
        _init_lcm(params, rng, prefix + "lcm.", c1, cfg)
        _init_gcm(params, rng, prefix + "gcm.", c2)
    else:
        if v in ("lcm_only", "l2g_single", "g2l_single"):
            _init_lcm(params, rng, prefix + "lcm.", c, cfg)
        if v in ("gcm_only", "l2g_single", "g2l_single"):
            _init_gcm(params, rng, prefix + "gcm.", c)
    _init_norm(params, prefix + "norm.", c)
    _init_linear(params, rng, prefix + "mlp.", c, cfg.mlp_expansion * c, weight="w1", bias="b1")
    _init_linear(params, rng, prefix + "mlp.", cfg.mlp_expansion * c, c, weight="w2", bias="b2")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """
    Build freshly initialized parameters for a config

    Projections: uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)); E_pos ~ N(0, 0.02²);
    biases 0; norm affines (1, 0). Values are stored at the current default precision.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    c = cfg.channels
    if cfg.is_sequence:
        _init_linear(params, rng, "seq.", 2 * cfg.frames, cfg.seq_dim, weight="w_mu", bias="b_mu")
        _init_linear(params, rng, "seq.", 2, c, weight="w_nu", bias="b_nu")
        _init_linear(params, rng, "seq.", cfg.seq_dim + c, c, weight="w_eta", bias="b_eta")
    else:
        _init_linear(params, rng, "embed.", 2, c)
    params.add("pos", rng.normal(0.0, 0.02, size=(cfg.joints, c)))
    for m in range(cfg.layers):
        _init_block(params, rng, f"layers.{m}.", cfg)
    _init_norm(params, "head.norm.", c)
    _init_linear(params, rng, "head.", c, 3)
    return params


# Layer ops

def joint_embedding(x2d: Tensor, p: ParamScope, cfg: ModelConfig) -> Tensor:
    """X_1 = x2d·W + b + E_pos"""
    x2d = T.as_tensor(x2d)
    if x2d.ndim != 3 or x2d.shape[1:] != (cfg.joints, 2):
        raise ShapeError(f"joint_embedding expects [B, {cfg.joints}, 2], got {x2d.shape}")
    return T.linear(x2d, p["embed.weight"], p["embed.bias"]) + p["pos"]


def sequence_embedding(xseq: Tensor, p: ParamScope, cfg: ModelConfig) -> Tensor:
    """
    Embed a 2D sequence guided by the joint embedding of its middle frame

    S = flat·W_mu, G = x̂·W_nu, X_0 = [S, G]·W_eta, then E_pos is added.

    Args:
        xseq: Tensor [B, T, N, 2], T odd and > 1
        p: Root parameter scope
        cfg: Model config

    Returns:
        Tensor [B, N, C]
    """
    xseq = T.as_tensor(xseq)
    if xseq.ndim != 4 or xseq.shape[2:] != (cfg.joints, 2):
        raise ShapeError(f"sequence_embedding expects [B, T, {cfg.joints}, 2], got {xseq.shape}")
    frames = xseq.shape[1]
    if frames % 2 == 0 or frames < 3:
        raise ShapeError(f"sequence length must be odd and > 1, got {frames}")
    if frames != cfg.frames:
        raise ShapeError(f"sequence length {frames} does not match config frames {cfg.frames}")
    b, n = xseq.shape[0], cfg.joints
    flat = T.reshape(T.transpose(xseq, (0, 2, 1, 3)), (b, n, 2 * frames))
    s = T.linear(flat, p["seq.w_mu"], p["seq.b_mu"])
    mid = T.select(xseq, (frames - 1) // 2, axis=1)
    g = T.linear(mid, p["seq.w_nu"], p["seq.b_nu"])
    x0 = T.linear(T.concat_channels([s, g]), p["seq.w_eta"], p["seq.b_eta"])
    return x0 + p["pos"]


def gcm_forward(x: Tensor, p: ParamScope, heads: int) -> Tensor:
    """Multi-head self-attention over joints, heads concatenated and projected by W^O"""
    b, n, c = x.shape
    if c % heads:
        raise ShapeError(f"heads ({heads}) must divide channel extent {c}")
    d = c // heads

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, heads, d)), (0, 2, 1, 3))

    q = split_heads(T.linear(x, p["wq"], p["bq"]))
    k = split_heads(T.linear(x, p["wk"], p["bk"]))
    v = split_heads(T.linear(x, p["wv"], p["bv"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    attn = T.softmax_rows(scores)
    heads_out = T.matmul(attn, v)
    merged = T.reshape(T.transpose(heads_out, (0, 2, 1, 3)), (b, n, c))
    return T.linear(merged, p["wo"], p["bo"])


def lcm_forward(x: Tensor, adjacency: AdjacencySet, p: ParamScope, mode: str = "train",
                ln_eps: float = 1e-5, bn_eps: float = 1e-5) -> Tensor:
    """
    Local constraint module: LN, then twice [GCN over the four adjacency
    categories (expanding channels) -> BN -> GELU -> 1x1 conv back to Cin]
    """
    if adjacency.joint_count != x.shape[-2]:
        raise ShapeError(f"adjacency is {adjacency.joint_count}x{adjacency.joint_count}, input has {x.shape[-2]} joints")
    y = T.layer_norm(x, p["ln.gamma"], p["ln.beta"], ln_eps)
    for s in range(LCM_STACKS):
        stack = p.scope(f"stack{s}.")
        g = None
        for k in CATEGORIES:
            a_k = Tensor(adjacency.normalized[k], dtype=y.dtype)
            term = T.matmul(T.matmul(a_k, y), stack[f"gcn.w_{k}"])
            g = term if g is None else g + term
        g = g + stack["gcn.bias"]
        g = T.batch_norm(g, stack["bn.gamma"], stack["bn.beta"], stack.stats("bn"), mode, bn_eps)
        g = T.gelu(g)
        y = T.linear(g, stack["conv.weight"], stack["conv.bias"])
    return y


def fim_forward(x_l: Tensor, x_g: Tensor, p: ParamScope) -> Tuple[Tensor, Tensor]:
    """Two-layer linear bottleneck over the concatenated chains, split back to (C1, C2)"""
    c1, c2 = x_l.shape[-1], x_g.shape[-1]
    if p["w_a"].shape[0] != c1 + c2:
        raise ShapeError(f"FIM expects {p['w_a'].shape[0]} channels, got {c1} + {c2}")
    z = T.concat_channels([x_l, x_g])
    u = T.linear(z, p["w_a"], p["b_a"])
    v = T.linear(u, p["w_b"], p["b_b"])
    f1, f2 = T.split_channels(v, [c1, c2])
    return f1, f2


def _mlp_residual(x: Tensor, p: ParamScope, cfg: ModelConfig, mode: str, rng) -> Tensor:
    h = T.layer_norm(x, p["norm.gamma"], p["norm.beta"], cfg.ln_eps)
    h = T.gelu(T.linear(h, p["mlp.w1"], p["mlp.b1"]))
    h = T.dropout(h, cfg.dropout, rng, mode == "train")
    return T.linear(h, p["mlp.w2"], p["mlp.b2"]) + x


def double_chain_block(x: Tensor, p: ParamScope, adjacency: AdjacencySet, cfg: ModelConfig,
                       mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    One stacked block; maps [B, N, C] -> [B, N, C]

    double_chain:
        (X_l2g, X_g2l) = split(x); X_l2g^ℓ = LCM(X_l2g); X_g2l^δ = GCM(X_g2l)
        (f1, f2) = FIM(X_l2g^ℓ, X_g2l^δ); X^o = X^ℓ + f1, X^δ + f2
        X_l2g^δ = GCM(X_l2g^o); X_g2l^ℓ = LCM(X_g2l^o)
        X' = [X_l2g^δ, X_g2l^ℓ] + [X_l2g^ℓ, X_g2l^δ]; return MLP(LN(X')) + X'
    """
    v = cfg.variant
    lcm = lambda t, scope: lcm_forward(t, adjacency, p.scope(scope), mode, cfg.ln_eps, cfg.bn_eps)
    gcm = lambda t, scope: gcm_forward(t, p.scope(scope), cfg.heads)

    if v in ("double_chain", "double_no_fim"):
        x_l2g, x_g2l = T.split_channels(x, list(cfg.chain_dims))
        l2g_local = lcm(x_l2g, "l2g_lcm.")
        g2l_global = gcm(x_g2l, "g2l_gcm.")
        if v == "double_chain":
            f1, f2 = fim_forward(l2g_local, g2l_global, p.scope("fim."))
            l2g_out, g2l_out = l2g_local + f1, g2l_global + f2
        else:
            l2g_out, g2l_out = l2g_local, g2l_global
        l2g_global = gcm(l2g_out, "l2g_gcm.")
        g2l_local = lcm(g2l_out, "g2l_lcm.")
        merged = (T.concat_channels([l2g_global, g2l_local])
                  + T.concat_channels([l2g_local, g2l_global]))
    elif v == "parallel_double":
        x_l, x_g = T.split_channels(x, list(cfg.chain_dims))
        merged = T.concat_channels([lcm(x_l, "lcm."), gcm(x_g, "gcm.")]) + x
    elif v == "l2g_single":
        first = lcm(x, "lcm.")
        merged = gcm(first, "gcm.") + first
    elif v == "g2l_single":
        first = gcm(x, "gcm.")
        merged = lcm(first, "lcm.") + first
    elif v == "lcm_only":
        merged = lcm(x, "lcm.") + x
    else:
        merged = gcm(x, "gcm.") + x
    return _mlp_residual(merged, p, cfg, mode, rng)


def regression_head(x: Tensor, p: ParamScope, cfg: ModelConfig) -> Tensor:
    """LN then a per-joint C -> 3 projection, scaled from meters to millimeters"""
    h = T.layer_norm(x, p["head.norm.gamma"], p["head.norm.beta"], cfg.ln_eps)
    return T.linear(h, p["head.weight"], p["head.bias"]) * OUTPUT_SCALE_MM


def forward(inputs, params: ModelParams, cfg: ModelConfig, adjacency: AdjacencySet,
            mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Lift 2D poses to 3D

    Args:
        inputs: [B, N, 2] (T = 1) or [B, T, N, 2] (T > 1)
        params: Model parameters
        cfg: Model config
        adjacency: Category adjacency for cfg.joints
        mode: "train" (batch statistics) or "eval" (running statistics)
        rng: Dropout generator, only used when cfg.dropout > 0

    Returns:
        Tensor [B, N, 3]
    """
    x = T.as_tensor(inputs)
    root = params.scope("")
    expected = 4 if cfg.is_sequence else 3
    if x.ndim != expected:
        raise ShapeError(f"model expects {expected}-d input for frames={cfg.frames}, got shape {x.shape}")
    h = sequence_embedding(x, root, cfg) if cfg.is_sequence else joint_embedding(x, root, cfg)
    for m in range(cfg.layers):
        h = double_chain_block(h, params.scope(f"layers.{m}."), adjacency, cfg, mode, rng)
    return regression_head(h, root, cfg)


class DCGCT:
    """Config + topology + adjacency + parameters bundled for training and inference"""

    def __init__(self, cfg: ModelConfig, topo: Optional[SkeletonTopology] = None,
                 params: Optional[ModelParams] = None, seed: int = 0):
        self.cfg = cfg.validate()
        self.topo = topo or build_topology("h36m17")
        if self.topo.joint_count != cfg.joints:
            raise ConfigError(f"topology has {self.topo.joint_count} joints, config expects {cfg.joints}")
        self.adjacency = decompose_adjacency(self.topo)
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, inputs, mode: str = "eval", rng=None) -> Tensor:
        return forward(inputs, self.params, self.cfg, self.adjacency, mode, rng)

    def predict(self, inputs: np.ndarray, flip_test: bool = False) -> np.ndarray:
        """Eval-mode prediction; optionally averaged with the flipped-input prediction"""
        pred = self(inputs, mode="eval").data
        if flip_test:
            flipped = self(flip_pose(inputs, self.topo).astype(np.asarray(inputs).dtype), mode="eval").data
            pred = 0.5 * (pred + flip_pose(flipped, self.topo))
        return pred


def warm_start(target: ModelParams, source: ModelParams) -> List[str]:
    """
    Copy every source tensor with matching name and shape into target

    A single-frame joint embedding seeds a sequence model's W_nu. Returns the
    names copied.
    """
    aliases = {"seq.w_nu": "embed.weight", "seq.b_nu": "embed.bias"}
    copied = []
    for name, t in target.items():
        src_name = name if name in source else aliases.get(name)
        if src_name is None or src_name not in source:
            continue
        src = source[src_name]
        if src.shape == t.shape:
            t.data = src.data.astype(t.dtype).copy()
            copied.append(name)
    for name, s in source.stats.items():
        if name in target.stats and target.stats[name].channels == s.channels and s.ready:
            target.stats[name].mean = s.mean.copy()
            target.stats[name].var = s.var.copy()
    log.info(f"Warm start copied {len(copied)}/{len(target.tensors)} tensors")
    return copied


# Accounting

def _lcm_param_count(cin: int, e: int) -> int:
    hidden = e * cin
    per_stack = len(CATEGORIES) * cin * hidden + hidden + 2 * hidden + hidden * cin + cin
    return 2 * cin + LCM_STACKS * per_stack


def _gcm_param_count(c: int) -> int:
    return 4 * (c * c + c)


def count_params(cfg: ModelConfig) -> int:
    """Exact learnable-scalar count derived from the config alone"""
    cfg.validate()
    c, (c1, c2), e, v = cfg.channels, cfg.chain_dims, cfg.lcm_expansion, cfg.variant
    if cfg.is_sequence:
        total = (2 * cfg.frames * cfg.seq_dim + cfg.seq_dim) + (2 * c + c) + ((cfg.seq_dim + c) * c + c)
    else:
        total = 2 * c + c
    total += cfg.joints * c

    if v in ("double_chain", "double_no_fim"):
        block = _lcm_param_count(c1, e) + _lcm_param_count(c2, e) + _gcm_param_count(c1) + _gcm_param_count(c2)
        if v == "double_chain":
            r = c // cfg.fim_reduction
            block += (c * r + r) + (r * c + c)
    elif v == "parallel_double":
        block = _lcm_param_count(c1, e) + _gcm_param_count(c2)
    else:
        block = 0
        if v in ("lcm_only", "l2g_single", "g2l_single"):
            block += _lcm_param_count(c, e)
        if v in ("gcm_only", "l2g_single", "g2l_single"):
            block += _gcm_param_count(c)
    hidden = cfg.mlp_expansion * c
    block += 2 * c + (c * hidden + hidden) + (hidden * c + c)
    total += cfg.layers * block
    total += 2 * c + 3 * c + 3
    return total


def _default_adjacency(cfg: ModelConfig) -> Optional[AdjacencySet]:
    if cfg.joints == 17:
        return decompose_adjacency(build_topology("h36m17"))
    return None


def mac_breakdown(cfg: ModelConfig, adjacency: Optional[AdjacencySet] = None) -> Dict[str, int]:
    """
    Multiply-accumulate count per component for one forward pass (B = 1)

    Graph propagation counts stored nonzeros of each normalized matrix, and the
    category weight product only rows with nonzero degree (a zero row of A_k·X
    contributes nothing). Without an adjacency for cfg.joints every entry and
    row is counted.
    """
    cfg.validate()
    adjacency = adjacency if adjacency is not None else _default_adjacency(cfg)
    n, c, (c1, c2), e, v = cfg.joints, cfg.channels, cfg.chain_dims, cfg.lcm_expansion, cfg.variant
    if adjacency is not None:
        active_rows = int(np.sum([len(adjacency.active_rows(k)) for k in CATEGORIES]))
        nnz = int(np.sum([adjacency.nnz(k) for k in CATEGORIES]))
    else:
        active_rows, nnz = len(CATEGORIES) * n, len(CATEGORIES) * n * n

    def lcm(cin):
        hidden = e * cin
        return LCM_STACKS * (nnz * cin + active_rows * cin * hidden + n * hidden * cin)

    def gcm(ce):
        return 4 * n * ce * ce + 2 * n * n * ce

    parts = {"embedding": 0, "lcm": 0, "gcm": 0, "fim": 0, "mlp": 0, "head": n * c * 3}
    if cfg.is_sequence:
        parts["embedding"] = n * 2 * cfg.frames * cfg.seq_dim + n * 2 * c + n * (cfg.seq_dim + c) * c
    else:
        parts["embedding"] = n * 2 * c

    if v in ("double_chain", "double_no_fim"):
        layer_lcm, layer_gcm = lcm(c1) + lcm(c2), gcm(c1) + gcm(c2)
        layer_fim = 2 * n * c * (c // cfg.fim_reduction) if v == "double_chain" else 0
    elif v == "parallel_double":
        layer_lcm, layer_gcm, layer_fim = lcm(c1), gcm(c2), 0
    else:
        layer_lcm = lcm(c) if v in ("lcm_only", "l2g_single", "g2l_single") else 0
        layer_gcm = gcm(c) if v in ("gcm_only", "l2g_single", "g2l_single") else 0
        layer_fim = 0
    parts["lcm"] = cfg.layers * layer_lcm
    parts["gcm"] = cfg.layers * layer_gcm
    parts["fim"] = cfg.layers * layer_fim
    parts["mlp"] = cfg.layers * 2 * n * c * cfg.mlp_expansion * c
    return parts


def count_macs(cfg: ModelConfig, adjacency: Optional[AdjacencySet] = None) -> int:
    """Multiply-accumulates for one forward pass (B = 1); adjacency products count nonzeros only"""
    return int(np.sum(list(mac_breakdown(cfg, adjacency).values())))


def count_flops(cfg: ModelConfig, adjacency: Optional[AdjacencySet] = None) -> int:
    """Floating-point operations for one forward pass (B = 1): two per multiply-accumulate"""
    return 2 * count_macs(cfg, adjacency)
