"""Minimal pre-norm decoder-only transformer in float64 numpy.

Activations are stored feature-major: a block input is a ``d x T`` matrix
whose column ``t`` is the representation of token ``t``. Weights follow the
``y = W x`` convention, so ``w_up`` is ``N_n x d`` and ``w_down`` is
``d x N_n``.

Tensor names inside a checkpoint archive::

    tok_emb                 vocab x d
    layers.{l}.attn_norm    d
    layers.{l}.wq|wk|wv     (heads*d_head) x d, head i owns rows [i*d_head, (i+1)*d_head)
    layers.{l}.wo           d x (heads*d_head)
    layers.{l}.b_o          d
    layers.{l}.ffn_norm     d
    layers.{l}.w_gate       N_n x d   (gated FFN only)
    layers.{l}.w_up         N_n x d
    layers.{l}.w_down       d x N_n
    layers.{l}.b_down       d
    norm_f                  d
    lm_head                 vocab x d

Pruned layers simply carry fewer heads or neurons; the per-layer counts are
read off the tensor shapes.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .numcore import archive_read, archive_write

CHECKPOINT_FORMAT = "fang-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    n_ffn: int = 192
    ffn_kind: str = "gated"
    vocab: int = 259
    norm_eps: float = 1e-5
    seed: int = 0
    rope: bool = False
    rope_base: float = 10000.0

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "n_heads", "d_head", "n_ffn", "vocab"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.ffn_kind not in ("plain", "gated"):
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.rope and self.d_head % 2:
            raise ConfigError("rotary encoding needs an even d_head")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d).validate()


@dataclass(frozen=True)
class Checkpoint:
    """Immutable bundle of config plus named float64 parameters."""

    config: ModelConfig
    params: dict = field(repr=False)

    def __post_init__(self):
        for arr in self.params.values():
            arr.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def layer(self, l: int, name: str) -> np.ndarray:
        return self.params[f"layers.{l}.{name}"]

    def n_heads(self, l: int) -> int:
        return self.layer(l, "wq").shape[0] // self.config.d_head

    def n_ffn(self, l: int) -> int:
        return self.layer(l, "w_up").shape[0]

    @property
    def gated(self) -> bool:
        return self.config.ffn_kind == "gated"

    def replace(self, updates: dict) -> "Checkpoint":
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            params[name] = np.array(value, dtype=np.float64)
        return Checkpoint(self.config, params)

    def num_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def block_params(self, l: int) -> dict:
        """Prunable weight counts of block ``l`` split into attention and FFN."""
        d = self.config.d_model
        attn = 4 * d * self.n_heads(l) * self.config.d_head
        ffn = (3 if self.gated else 2) * d * self.n_ffn(l)
        return {"attn": attn, "ffn": ffn}

    def save(self, path, dtype=np.float64) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": json.dumps(self.config.to_dict(), sort_keys=True),
        }
        archive_write(path, [(k, v.astype(dtype)) for k, v in self.params.items()], metadata=meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        """Load an archive; 32-bit tensors are widened to float64."""
        tensors, meta = archive_read(path, with_metadata=True)
        if meta.get("format") != CHECKPOINT_FORMAT or "config" not in meta:
            raise FormatError(f"{path} is not a checkpoint archive")
        cfg = ModelConfig.from_dict(json.loads(meta["config"]))
        params = {}
        for name, arr in tensors.items():
            arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"tensor {name!r} contains non-finite values")
            params[name] = arr
        ckpt = cls(cfg, params)
        _check_shapes(ckpt)
        return ckpt


@dataclass
class BlockCapture:
    """Per-block calibration record; every field has the same token columns."""

    layer: int
    ffn_input: np.ndarray
    hidden: np.ndarray
    block_in: np.ndarray
    block_out: np.ndarray
    attn_out: np.ndarray
    grad: Optional[np.ndarray] = None

    @property
    def n_tokens(self) -> int:
        return self.hidden.shape[1]


def _check_shapes(ckpt: Checkpoint) -> None:
    cfg = ckpt.config
    d, dh = cfg.d_model, cfg.d_head

    def expect(name, shape):
        if name not in ckpt.params:
            raise FormatError(f"missing tensor {name!r}")
        if ckpt.params[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {ckpt.params[name].shape}, expected {shape}")

    expect("tok_emb", (cfg.vocab, d))
    expect("norm_f", (d,))
    expect("lm_head", (cfg.vocab, d))
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        nh = ckpt.params[p + "wq"].shape[0] // dh
        nn = ckpt.params[p + "w_up"].shape[0]
        for name in ("wq", "wk", "wv"):
            expect(p + name, (nh * dh, d))
        expect(p + "wo", (d, nh * dh))
        for name in ("attn_norm", "ffn_norm", "b_o", "b_down"):
            expect(p + name, (d,))
        expect(p + "w_down", (d, nn))
        if cfg.ffn_kind == "gated":
            expect(p + "w_gate", (nn, d))


def init_model(config: ModelConfig, seed: Optional[int] = None) -> Checkpoint:
    """Scaled-Gaussian initialization, deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, nn, L = config.d_model, config.n_ffn, config.n_layers
    hd = config.n_heads * config.d_head
    out_scale = 1.0 / math.sqrt(2 * L)

    def gauss(rows, cols, std):
        return rng.standard_normal((rows, cols)) * std

    params = {"tok_emb": gauss(config.vocab, d, 1.0)}
    for l in range(L):
        p = f"layers.{l}."
        params[p + "attn_norm"] = np.ones(d)
        params[p + "wq"] = gauss(hd, d, 1 / math.sqrt(d))
        params[p + "wk"] = gauss(hd, d, 1 / math.sqrt(d))
        params[p + "wv"] = gauss(hd, d, 1 / math.sqrt(d))
        params[p + "wo"] = gauss(d, hd, out_scale / math.sqrt(hd))
        params[p + "b_o"] = np.zeros(d)
        params[p + "ffn_norm"] = np.ones(d)
        if config.ffn_kind == "gated":
            params[p + "w_gate"] = gauss(nn, d, 1 / math.sqrt(d))
        params[p + "w_up"] = gauss(nn, d, 1 / math.sqrt(d))
        params[p + "w_down"] = gauss(d, nn, out_scale / math.sqrt(nn))
        params[p + "b_down"] = np.zeros(d)
    params["norm_f"] = np.ones(d)
    params["lm_head"] = gauss(config.vocab, d, 1 / math.sqrt(d))
    return Checkpoint(config, params)


# ---------------------------------------------------------------------------
# operator kernels


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def rms_norm(x, gain, eps):
    r = np.sqrt(np.mean(x * x, axis=0) + eps)
    return gain[:, None] * x / r, r


def _rms_norm_back(dy, x, gain, r):
    d = x.shape[0]
    gd = gain[:, None] * dy
    dx = gd / r - x * (np.sum(gd * x, axis=0) / (d * r**3))
    dgain = np.sum(dy * x / r, axis=1)
    return dx, dgain


def _rope_tables(d_head, T, base):
    inv = base ** (-np.arange(0, d_head, 2) / d_head)
    ang = np.outer(inv, np.arange(T))
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin, inverse=False):
    # x: heads x d_head x T; rotates interleaved pairs (2i, 2i+1)
    if inverse:
        sin = -sin
    out = np.empty_like(x)
    a, b = x[:, 0::2, :], x[:, 1::2, :]
    out[:, 0::2, :] = a * cos - b * sin
    out[:, 1::2, :] = a * sin + b * cos
    return out


def _ffn_hidden(ckpt, l, f):
    if ckpt.gated:
        zg = ckpt.layer(l, "w_gate") @ f
        zu = ckpt.layer(l, "w_up") @ f
        return silu(zg) * zu, (zg, zu)
    zu = ckpt.layer(l, "w_up") @ f
    return silu(zu), (None, zu)


def ffn_hidden_from_input(ckpt: Checkpoint, l: int, ffn_input: np.ndarray) -> np.ndarray:
    """Recompute the ``W_down`` input from a block's FFN input (pre-norm)."""
    f, _ = rms_norm(ffn_input, ckpt.layer(l, "ffn_norm"), ckpt.config.norm_eps)
    return _ffn_hidden(ckpt, l, f)[0]


def _check_tokens(ckpt, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError("expected a 1-D token sequence")
    if tokens.size == 0:
        raise InputError("empty token sequence")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= ckpt.config.vocab:
        raise InputError(f"token id out of range [0, {ckpt.config.vocab})")
    return tokens.astype(np.int64)


HiddenHook = Callable[[int, np.ndarray], np.ndarray]


def _forward_seq(ckpt: Checkpoint, tokens: np.ndarray, hook: Optional[HiddenHook] = None):
    cfg = ckpt.config
    T = tokens.shape[0]
    eps, dh = cfg.norm_eps, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    rope = _rope_tables(dh, T, cfg.rope_base) if cfg.rope else None
    x = ckpt["tok_emb"][tokens].T.copy()
    caches = []
    for l in range(cfg.n_layers):
        c = {"x_in": x}
        nh = ckpt.n_heads(l)
        a, c["r_a"] = rms_norm(x, ckpt.layer(l, "attn_norm"), eps)
        c["a"] = a
        q = (ckpt.layer(l, "wq") @ a).reshape(nh, dh, T)
        k = (ckpt.layer(l, "wk") @ a).reshape(nh, dh, T)
        v = (ckpt.layer(l, "wv") @ a).reshape(nh, dh, T)
        if rope is not None:
            q, k = _rope(q, *rope), _rope(k, *rope)
        s = np.einsum("hdt,hds->hts", q, k) * scale
        s[:, causal] = -np.inf
        s -= s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        cat = np.einsum("hts,hds->hdt", p, v).reshape(nh * dh, T)
        c.update(q=q, k=k, v=v, p=p, cat=cat)
        u = x + ckpt.layer(l, "wo") @ cat + ckpt.layer(l, "b_o")[:, None]
        f, c["r_f"] = rms_norm(u, ckpt.layer(l, "ffn_norm"), eps)
        h, (zg, zu) = _ffn_hidden(ckpt, l, f)
        if hook is not None:
            h = np.asarray(hook(l, h), dtype=np.float64)
        c.update(u=u, f=f, zg=zg, zu=zu, h=h)
        x = u + ckpt.layer(l, "w_down") @ h + ckpt.layer(l, "b_down")[:, None]
        c["x_out"] = x
        caches.append(c)
    z, r_z = rms_norm(x, ckpt["norm_f"], eps)
    logits = ckpt["lm_head"] @ z
    return logits, caches, (z, r_z, x)


def forward(ckpt: Checkpoint, tokens, capture: bool = False, hook: Optional[HiddenHook] = None):
    """Run one sequence; returns ``(logits vocab x T, captures or None)``.

    Captures hold all ``T`` columns; trimming the final, loss-free position is
    left to the calibration layer.
    """
    tokens = _check_tokens(ckpt, tokens)
    logits, caches, _ = _forward_seq(ckpt, tokens, hook)
    if not capture:
        return logits, None
    caps = [
        BlockCapture(
            layer=l,
            ffn_input=c["u"],
            hidden=c["h"],
            block_in=c["x_in"],
            block_out=c["x_out"],
            attn_out=c["cat"],
        )
        for l, c in enumerate(caches)
    ]
    return logits, caps


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=0, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def _nll_and_dlogits(logits, tokens):
    T = tokens.shape[0]
    logp = log_softmax(logits[:, : T - 1])
    tgt = tokens[1:]
    nll = -float(np.mean(logp[tgt, np.arange(T - 1)]))
    dlogits = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[tgt, np.arange(T - 1)] -= 1.0
    dlogits[:, : T - 1] = probs / (T - 1)
    return nll, dlogits


def _backward_seq(ckpt, tokens, caches, final, dlogits, param_grads=False):
    cfg = ckpt.config
    dh = cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    T = tokens.shape[0]
    z, r_z, x_last = final
    grads = {} if param_grads else None
    if param_grads:
        grads["lm_head"] = dlogits @ z.T
    dz = ckpt["lm_head"].T @ dlogits
    dx, dg = _rms_norm_back(dz, x_last, ckpt["norm_f"], r_z)
    if param_grads:
        grads["norm_f"] = dg
    rope = _rope_tables(dh, T, cfg.rope_base) if cfg.rope else None
    dhs = [None] * cfg.n_layers
    for l in reversed(range(cfg.n_layers)):
        c = caches[l]
        p = f"layers.{l}."
        nh = ckpt.n_heads(l)
        dy = dx
        dh_ = ckpt.layer(l, "w_down").T @ dy
        dhs[l] = dh_
        if ckpt.gated:
            sg = silu(c["zg"])
            dzu = dh_ * sg
            dzg = dh_ * c["zu"] * _silu_grad(c["zg"])
            df = ckpt.layer(l, "w_gate").T @ dzg + ckpt.layer(l, "w_up").T @ dzu
        else:
            dzg = None
            dzu = dh_ * _silu_grad(c["zu"])
            df = ckpt.layer(l, "w_up").T @ dzu
        du_norm, dg_ffn = _rms_norm_back(df, c["u"], ckpt.layer(l, "ffn_norm"), c["r_f"])
        du = dy + du_norm
        dcat = ckpt.layer(l, "wo").T @ du
        dout = dcat.reshape(nh, dh, T)
        pm, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dp = np.einsum("hdt,hds->hts", dout, v)
        dv = np.einsum("hts,hdt->hds", pm, dout)
        ds = pm * (dp - np.sum(dp * pm, axis=2, keepdims=True))
        dq = scale * np.einsum("hts,hds->hdt", ds, k)
        dk = scale * np.einsum("hts,hdt->hds", ds, q)
        if rope is not None:
            dq, dk = _rope(dq, *rope, inverse=True), _rope(dk, *rope, inverse=True)
        dq, dk, dv = (g.reshape(nh * dh, T) for g in (dq, dk, dv))
        da = ckpt.layer(l, "wq").T @ dq + ckpt.layer(l, "wk").T @ dk + ckpt.layer(l, "wv").T @ dv
        dx_norm, dg_attn = _rms_norm_back(da, c["x_in"], ckpt.layer(l, "attn_norm"), c["r_a"])
        if param_grads:
            a = c["a"]
            grads[p + "w_down"] = dy @ c["h"].T
            grads[p + "b_down"] = dy.sum(axis=1)
            grads[p + "w_up"] = dzu @ c["f"].T
            if ckpt.gated:
                grads[p + "w_gate"] = dzg @ c["f"].T
            grads[p + "ffn_norm"] = dg_ffn
            grads[p + "wo"] = du @ c["cat"].T
            grads[p + "b_o"] = du.sum(axis=1)
            grads[p + "wq"] = dq @ a.T
            grads[p + "wk"] = dk @ a.T
            grads[p + "wv"] = dv @ a.T
            grads[p + "attn_norm"] = dg_attn
        dx = du + dx_norm
    if param_grads:
        emb = np.zeros_like(ckpt["tok_emb"])
        np.add.at(emb, tokens, dx.T)
        grads["tok_emb"] = emb
    return dhs, grads


def _as_batch(tokens):
    arr = np.asarray(tokens)
    return [arr] if arr.ndim == 1 else list(arr)


def forward_backward(ckpt: Checkpoint, tokens):
    """Single-sequence loss, full-length captures and ``dL/dh`` per layer.

    The gradient columns cover positions ``0..T-2`` (the last position has
    no loss term).
    """
    tokens = _check_tokens(ckpt, tokens)
    if tokens.shape[0] < 2:
        raise InputError("need at least 2 tokens for a next-token loss")
    logits, caches, final = _forward_seq(ckpt, tokens)
    nll, dlogits = _nll_and_dlogits(logits, tokens)
    dhs, _ = _backward_seq(ckpt, tokens, caches, final, dlogits)
    caps = [
        BlockCapture(l, c["u"], c["h"], c["x_in"], c["x_out"], c["cat"])
        for l, c in enumerate(caches)
    ]
    return nll, caps, [g[:, :-1] for g in dhs]


def loss_and_grads(ckpt: Checkpoint, tokens):
    """Mean next-token NLL and per-layer ``dL/dh`` matrices (``N_n x (T-1)``).

    ``tokens`` may be one sequence or a 2-D batch. Each sequence's gradient
    columns are taken with respect to that sequence's own mean loss, so
    repeating a sequence leaves its columns unchanged; the returned NLL is the
    mean over sequences.
    """
    seqs = _as_batch(tokens)
    nlls, per_layer = [], None
    for seq in seqs:
        nll, _, gs = forward_backward(ckpt, seq)
        nlls.append(nll)
        per_layer = [[g] for g in gs] if per_layer is None else [acc + [g] for acc, g in zip(per_layer, gs)]
    return float(np.mean(nlls)), [np.concatenate(gs, axis=1) for gs in per_layer]


def loss_and_param_grads(ckpt: Checkpoint, tokens):
    """Mean loss and gradients for every parameter; only used to build the
    shipped reference checkpoint."""
    seqs = _as_batch(tokens)
    total = None
    nlls = []
    for seq in seqs:
        seq = _check_tokens(ckpt, seq)
        logits, caches, final = _forward_seq(ckpt, seq)
        nll, dlogits = _nll_and_dlogits(logits, seq)
        _, grads = _backward_seq(ckpt, seq, caches, final, dlogits, param_grads=True)
        nlls.append(nll)
        total = grads if total is None else {k: total[k] + grads[k] for k in total}
    n = len(seqs)
    return float(np.mean(nlls)), {k: v / n for k, v in total.items()}


def nll_sum(ckpt: Checkpoint, tokens) -> tuple[float, int]:
    tokens = _check_tokens(ckpt, tokens)
    if tokens.shape[0] < 2:
        return 0.0, 0
    logits, _ = forward(ckpt, tokens)
    logp = log_softmax(logits[:, :-1])
    n = tokens.shape[0] - 1
    return -float(logp[tokens[1:], np.arange(n)].sum()), n


def perplexity(ckpt: Checkpoint, tokens, window: int = 128) -> float:
    """``exp`` of the mean next-token NLL over non-overlapping windows."""
    tokens = np.asarray(tokens)
    if tokens.size < 2:
        raise InputError("perplexity needs at least 2 tokens")
    if window < 2:
        raise InputError("window must be at least 2")
    total, count = 0.0, 0
    for start in range(0, tokens.size, window):
        s, n = nll_sum(ckpt, tokens[start : start + window])
        total += s
        count += n
    return math.exp(total / count)


def apply_head_mask(ckpt: Checkpoint, layer: int, mask, bias=None) -> Checkpoint:
    """Physically drop attention heads flagged ``1`` in ``mask``.

    ``bias`` (length ``d``) is added into the layer's ``b_o``.
    """
    mask = np.asarray(mask).astype(bool)
    nh, dh = ckpt.n_heads(layer), ckpt.config.d_head
    if mask.shape != (nh,):
        raise InputError(f"head mask must have length {nh}")
    if mask.all():
        raise InputError(f"refusing to prune every head of layer {layer}")
    keep = np.repeat(~mask, dh)
    p = f"layers.{layer}."
    params = dict(ckpt.params)
    for name in ("wq", "wk", "wv"):
        params[p + name] = np.array(ckpt.params[p + name][keep])
    params[p + "wo"] = np.array(ckpt.params[p + "wo"][:, keep])
    if bias is not None:
        params[p + "b_o"] = ckpt.params[p + "b_o"] + np.asarray(bias, dtype=np.float64)
    return Checkpoint(ckpt.config, params)


def apply_neuron_mask(ckpt: Checkpoint, layer: int, mask, bias=None) -> Checkpoint:
    """Physically drop FFN neurons flagged ``1``; ``bias`` goes into ``b_down``."""
    mask = np.asarray(mask).astype(bool)
    nn = ckpt.n_ffn(layer)
    if mask.shape != (nn,):
        raise InputError(f"neuron mask must have length {nn}")
    if mask.all():
        raise InputError(f"refusing to prune every neuron of layer {layer}")
    p = f"layers.{layer}."
    params = dict(ckpt.params)
    for name in ("w_up", "w_gate"):
        if p + name in params:
            params[p + name] = np.array(ckpt.params[p + name][~mask])
    params[p + "w_down"] = np.array(ckpt.params[p + "w_down"][:, ~mask])
    if bias is not None:
        params[p + "b_down"] = ckpt.params[p + "b_down"] + np.asarray(bias, dtype=np.float64)
    return Checkpoint(ckpt.config, params)
