"""Decision network mapping (intermediate latent, context) to step logits.

Fixed architecture: mean-pool the latent tokens, concatenate with the
context embedding, project to the working width, run three residual
blocks (a value/output projection pair, then an MLP, each behind a
parameter-free layernorm), and finish with an MLP head emitting one logit
per undecided step. The backward pass is written out by hand for exactly
this stack; there is no general autodiff here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .model import Conditioning
from .ops import gelu, gelu_grad
from .rng import RngStream
from .tensor_io import read_bundle, write_bundle

_LN_EPS = 1e-5
N_BLOCKS = 3


@dataclass(frozen=True)
class PolicyNetConfig:
    in_channels: int
    cond_dim: int
    n_actions: int
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.cond_dim, self.n_actions, self.width) < 1:
            raise ConfigError(f"all policy net dimensions must be >= 1, got {self}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "cond_dim": self.cond_dim,
            "n_actions": self.n_actions,
            "width": self.width,
            "seed": self.seed,
        }


@dataclass
class DecisionNet:
    cfg: PolicyNetConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def n_actions(self) -> int:
        return self.cfg.n_actions


def policy_param_shapes(cfg: PolicyNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    p = cfg.width
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.w", (cfg.in_channels + cfg.cond_dim, p)),
        ("embed.b", (p,)),
    ]
    for i in range(1, N_BLOCKS + 1):
        shapes.extend(
            [
                (f"block{i}.wv", (p, p)),
                (f"block{i}.bv", (p,)),
                (f"block{i}.wo", (p, p)),
                (f"block{i}.bo", (p,)),
                (f"block{i}.w1", (p, 4 * p)),
                (f"block{i}.b1", (4 * p,)),
                (f"block{i}.w2", (4 * p, p)),
                (f"block{i}.b2", (p,)),
            ]
        )
    shapes.extend(
        [
            ("head.w1", (p, p)),
            ("head.b1", (p,)),
            ("head.w2", (p, cfg.n_actions)),
            ("head.b2", (cfg.n_actions,)),
        ]
    )
    return shapes


def init_policy_net(cfg: PolicyNetConfig, zero_head: bool = True) -> DecisionNet:
    """Seeded init. With ``zero_head`` the final layer starts at zero so
    every step probability begins at exactly 0.5."""
    rng = RngStream(cfg.seed, stream_id=0)
    params: dict[str, np.ndarray] = {}
    for name, shape in policy_param_shapes(cfg):
        if name.startswith("head.w2") and zero_head:
            params[name] = np.zeros(shape)
        elif name.endswith((".b", ".bv", ".bo", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normals(shape) / math.sqrt(shape[0])
    return DecisionNet(cfg=cfg, params=params)


def _ln(x: np.ndarray) -> tuple[np.ndarray, float]:
    mu = x.mean()
    centered = x - mu
    scale = math.sqrt((centered * centered).mean() + _LN_EPS)
    return centered / scale, scale


def _ln_backward(dy: np.ndarray, y: np.ndarray, scale: float) -> np.ndarray:
    return (dy - dy.mean() - y * (dy * y).mean()) / scale


def policy_forward(net: DecisionNet, z_rho: np.ndarray, context: np.ndarray) -> tuple[np.ndarray, dict]:
    """Logits for each undecided step, plus the tape the backward pass needs."""
    cfg = net.cfg
    z_rho = np.asarray(z_rho, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    if z_rho.ndim != 2 or z_rho.shape[1] != cfg.in_channels:
        raise DimensionError(f"latent must be (tokens, {cfg.in_channels}), got {z_rho.shape}")
    if context.shape != (cfg.cond_dim,):
        raise DimensionError(f"context must have shape ({cfg.cond_dim},), got {context.shape}")
    w = net.params

    x0 = np.concatenate([z_rho.mean(axis=0), context])
    h = x0 @ w["embed.w"] + w["embed.b"]
    tape: dict = {"x0": x0, "blocks": []}
    for i in range(1, N_BLOCKS + 1):
        p = f"block{i}."
        a, s1 = _ln(h)
        v_out = a @ w[p + "wv"] + w[p + "bv"]
        h_mid = h + v_out @ w[p + "wo"] + w[p + "bo"]
        a2, s2 = _ln(h_mid)
        m_pre = a2 @ w[p + "w1"] + w[p + "b1"]
        gm = gelu(m_pre)
        h = h_mid + gm @ w[p + "w2"] + w[p + "b2"]
        tape["blocks"].append({"a": a, "s1": s1, "v_out": v_out, "a2": a2, "s2": s2, "m_pre": m_pre, "gm": gm})
    hh, sf = _ln(h)
    u_pre = hh @ w["head.w1"] + w["head.b1"]
    u1 = gelu(u_pre)
    logits = u1 @ w["head.w2"] + w["head.b2"]
    tape.update({"hh": hh, "sf": sf, "u_pre": u_pre, "u1": u1})
    return logits, tape


def policy_backward(net: DecisionNet, tape: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``dlogits @ logits`` with respect to every parameter."""
    w = net.params
    grads: dict[str, np.ndarray] = {}

    grads["head.w2"] = np.outer(tape["u1"], dlogits)
    grads["head.b2"] = dlogits.copy()
    du1 = dlogits @ w["head.w2"].T
    du_pre = du1 * gelu_grad(tape["u_pre"])
    grads["head.w1"] = np.outer(tape["hh"], du_pre)
    grads["head.b1"] = du_pre
    dhh = du_pre @ w["head.w1"].T
    dh = _ln_backward(dhh, tape["hh"], tape["sf"])

    for i in range(N_BLOCKS, 0, -1):
        p = f"block{i}."
        rec = tape["blocks"][i - 1]
        dgm = dh @ w[p + "w2"].T
        grads[p + "w2"] = np.outer(rec["gm"], dh)
        grads[p + "b2"] = dh.copy()
        dm_pre = dgm * gelu_grad(rec["m_pre"])
        grads[p + "w1"] = np.outer(rec["a2"], dm_pre)
        grads[p + "b1"] = dm_pre
        da2 = dm_pre @ w[p + "w1"].T
        dh_mid = dh + _ln_backward(da2, rec["a2"], rec["s2"])

        dvo = dh_mid @ w[p + "wo"].T
        grads[p + "wo"] = np.outer(rec["v_out"], dh_mid)
        grads[p + "bo"] = dh_mid.copy()
        grads[p + "wv"] = np.outer(rec["a"], dvo)
        grads[p + "bv"] = dvo
        da = dvo @ w[p + "wv"].T
        dh = dh_mid + _ln_backward(da, rec["a"], rec["s1"])

    grads["embed.w"] = np.outer(tape["x0"], dh)
    grads["embed.b"] = dh
    return grads


def decide(net: DecisionNet, z_rho: np.ndarray, cond) -> np.ndarray:
    """Per-step cache probabilities in (0, 1) for the undecided steps."""
    context = cond.context_embedding if isinstance(cond, Conditioning) else cond
    logits, _ = policy_forward(net, z_rho, context)
    return 1.0 / (1.0 + np.exp(-logits))


def save_policy(path, net: DecisionNet, extra_meta: dict | None = None) -> None:
    meta = {"kind": "policy", "config": net.cfg.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    write_bundle(path, net.params, meta=meta)


def load_policy(path) -> DecisionNet:
    tensors, meta = read_bundle(path)
    cfg = PolicyNetConfig(**meta["config"])
    expected = [name for name, _ in policy_param_shapes(cfg)]
    if list(tensors) != expected:
        raise ConfigError("policy checkpoint tensors do not match its config")
    return DecisionNet(cfg=cfg, params=tensors)
