"""Tree-gated transformer actor-critic over branching candidates.

Pipeline for one state (batched over the leading axis):

1. candidate rows and the [node; tree] vector are layer-normed and linearly
   embedded into ``d_h`` (no bias);
2. each candidate embedding is fused with the tree embedding;
3. a pre-norm transformer encoder mixes candidates, ignoring padded slots;
4. a bi-matching block blends a tree-attended summary of all candidates with
   a per-candidate copy of the tree embedding through a sigmoid gate;
5. the actor maps each candidate through a stack of linear layers whose
   inputs are gated by the tree embedding, ending in one logit;
6. the critic takes the masked mean of the bi-matching output, concatenates
   the tree embedding, and reduces to a scalar with its own gated stack.

Everything runs in float64. Parameters whose names start with ``critic_``
are only reachable from the value head.
"""

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NetError
from .features import N_CAND, N_NODE, N_TREE, SCHEMA_VERSION, StateFeatures

DTYPE = torch.float64
MASK_FILL = -1e9
LN_EPS = 1e-5
TREE_IN = N_NODE + N_TREE
CHECKPOINT_MAGIC = b"TGPPOCKP"
CHECKPOINT_VERSION = 1
# matching weights start at zero so both attention maps start uniform
ZERO_INIT = ("match_tree.", "match_cand.")


class Mode(str, Enum):
    ROLLOUT = "ROLLOUT"
    TRAIN = "TRAIN"


@dataclass
class NetConfig:
    d_h: int = 256
    n_layers: int = 5
    n_heads: int = 8
    dropout: float = 0.05
    gate_depth: int = 3
    head_widths: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.head_widths and self.d_h > 0 and self.gate_depth > 0:
            self.head_widths = [max(1, self.d_h // 2 ** k) for k in range(self.gate_depth)]
        self.head_widths = [int(w) for w in self.head_widths]

    def validate(self):
        problems = []
        if self.d_h <= 0 or self.n_heads <= 0 or self.n_layers < 0:
            problems.append("d_h, n_heads must be positive and n_layers non-negative")
        elif self.d_h % self.n_heads:
            problems.append(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.gate_depth < 1 or len(self.head_widths) != self.gate_depth:
            problems.append("head_widths must list one input width per gated layer")
        elif self.head_widths[0] != self.d_h or min(self.head_widths) < 1:
            problems.append("head_widths must start at d_h and stay positive")
        if problems:
            raise NetError("; ".join(problems), code="BAD_CONFIG")
        return self


@dataclass
class PolicyOutput:
    logits: torch.Tensor   # (B, L), padded slots hold MASK_FILL
    probs: torch.Tensor    # (B, L), padded slots exactly 0
    value: torch.Tensor    # (B,)
    entropy: torch.Tensor  # (B,)
    mask: torch.Tensor     # (B, L) True on padded slots


def _param(*shape):
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


class _Linear(nn.Module):
    def __init__(self, n_in, n_out, bias=True):
        super().__init__()
        self.weight = _param(n_out, n_in)
        self.bias = _param(n_out) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class _LayerNorm(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = _param(width)

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, LN_EPS)


def masked_softmax(scores, mask, dim=-1):
    """Softmax over ``dim`` with padded entries (mask True) forced to 0."""
    p = torch.softmax(scores.masked_fill(mask, MASK_FILL), dim=dim)
    return p.masked_fill(mask, 0.0)


class _EncoderLayer(nn.Module):
    def __init__(self, d, heads, dropout):
        super().__init__()
        self.heads = heads
        self.ln1 = _LayerNorm(d)
        self.q = _Linear(d, d)
        self.k = _Linear(d, d)
        self.v = _Linear(d, d)
        self.o = _Linear(d, d)
        self.ln2 = _LayerNorm(d)
        self.ff1 = _Linear(d, 4 * d)
        self.ff2 = _Linear(4 * d, d)
        self.dropout = dropout

    def _attend(self, x, mask):
        B, L, d = x.shape
        h = self.heads
        split = lambda t: t.reshape(B, L, h, d // h).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        att = masked_softmax(scores, mask[:, None, None, :])
        return self.o((att @ v).transpose(1, 2).reshape(B, L, d))

    def forward(self, z, mask, train):
        z = z + F.dropout(self._attend(self.ln1(z), mask), self.dropout, train)
        ff = self.ff2(torch.relu(self.ff1(self.ln2(z))))
        return z + F.dropout(ff, self.dropout, train)


class _GatedStack(nn.Module):
    """q <- f_k(q * sigmoid(U_k t)), ReLU after every f_k except the last."""

    def __init__(self, d, widths):
        super().__init__()
        self.gates = nn.ModuleList(_Linear(d, w, bias=False) for w in widths)
        outs = list(widths[1:]) + [1]
        self.layers = nn.ModuleList(_Linear(w, o) for w, o in zip(widths, outs))

    def forward(self, q, t):
        last = len(self.layers) - 1
        for k, (gate, f) in enumerate(zip(self.gates, self.layers)):
            q = f(q * torch.sigmoid(gate(t)))
            if k < last:
                q = torch.relu(q)
        return q.squeeze(-1)


class TreeGateNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_h
        self.ln_cand = _LayerNorm(N_CAND)
        self.ln_tree = _LayerNorm(TREE_IN)
        self.embed_cand = _Linear(N_CAND, d, bias=False)
        self.embed_tree = _Linear(TREE_IN, d, bias=False)
        self.fuse = _Linear(2 * d, d, bias=False)
        self.encoder = nn.ModuleList(_EncoderLayer(d, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.match_tree = _Linear(d, d, bias=False)
        self.match_cand = _Linear(d, d, bias=False)
        self.gate_summary = _Linear(d, d, bias=False)
        self.gate_tree = _Linear(d, d, bias=False)
        self.actor_head = _GatedStack(d, cfg.head_widths)
        self.critic_mlp1 = _Linear(2 * d, d)
        self.critic_mlp2 = _Linear(d, d)
        self.critic_head = _GatedStack(d, cfg.head_widths)
        self.reset_parameters()

    def reset_parameters(self):
        """Xavier-uniform weights, zero biases, unit layer-norm gains; seeded.

        The two matching projections start at zero (see ``ZERO_INIT``).
        """
        gen = torch.Generator().manual_seed(int(self.cfg.seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.startswith(ZERO_INIT):
                    p.zero_()
                elif p.dim() == 2:
                    fan_out, fan_in = p.shape
                    a = math.sqrt(6.0 / (fan_in + fan_out))
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * a - a)
                else:
                    p.zero_()

    def forward(self, cand, tree_in, mask, mode=Mode.ROLLOUT, check_finite=True) -> PolicyOutput:
        """``cand`` (B,L,25), ``tree_in`` (B,61) = [node; tree], ``mask`` (B,L).

        ``check_finite=False`` skips the output check, which lets the forward
        pass run under ``torch.func.vmap``.
        """
        if cand.dim() != 3 or cand.shape[-1] != N_CAND or tree_in.shape != (cand.shape[0], TREE_IN) \
                or mask.shape != cand.shape[:2]:
            raise NetError(f"bad input shapes {tuple(cand.shape)}, {tuple(tree_in.shape)}, {tuple(mask.shape)}",
                           code="SHAPE_MISMATCH")
        train = Mode(mode) == Mode.TRAIN
        B, L, _ = cand.shape
        c = self.embed_cand(self.ln_cand(cand))
        t = self.embed_tree(self.ln_tree(tree_in))
        z = self.fuse(torch.cat([c, t[:, None, :].expand(B, L, -1)], dim=-1))
        for layer in self.encoder:
            z = layer(z, mask, train)

        # candidates differ downstream only through beta, so its scores are
        # scaled as in dot-product attention to keep the softmax trainable
        scale = 1.0 / math.sqrt(self.cfg.d_h)
        alpha = masked_softmax(torch.einsum("bd,bld->bl", self.match_tree(t), z) * scale, mask)
        beta = masked_softmax(torch.einsum("bld,bd->bl", self.match_cand(z), t) * scale, mask)
        summary = torch.einsum("bl,bld->bd", alpha, z)
        per_cand = beta[..., None] * t[:, None, :]
        g = torch.sigmoid(self.gate_summary(summary)[:, None, :] + self.gate_tree(per_cand))
        r = g * summary[:, None, :] + (1 - g) * per_cand

        logits = self.actor_head(r, t[:, None, :]).masked_fill(mask, MASK_FILL)
        probs = masked_softmax(logits, mask)

        keep = (~mask).to(DTYPE)
        mean_r = (r * keep[..., None]).sum(1) / keep.sum(1, keepdim=True)
        h = torch.relu(self.critic_mlp1(torch.cat([mean_r, t], dim=-1)))
        h = torch.relu(self.critic_mlp2(h))
        value = self.critic_head(h, t)

        entropy = -torch.special.xlogy(probs, probs).sum(-1)
        out = PolicyOutput(logits, probs, value, entropy, mask)
        if check_finite and not (torch.isfinite(probs).all() and torch.isfinite(value).all()):
            raise NetError("non-finite network output", code="NON_FINITE")
        return out

    def parameter_groups(self):
        """(shared + actor parameters, critic-only parameters)."""
        actor, critic = [], []
        for name, p in self.named_parameters():
            (critic if name.startswith("critic_") else actor).append(p)
        return actor, critic


def init_params(cfg: NetConfig) -> TreeGateNet:
    return TreeGateNet(cfg)


def state_tensors(states, width=None):
    """Batch ``StateFeatures`` into (cand, tree_in, mask) tensors."""
    from .features import collate
    if isinstance(states, StateFeatures):
        states = [states]
    cand, node, tree, mask = collate(states, width)
    return (torch.as_tensor(cand, dtype=DTYPE),
            torch.as_tensor(np.concatenate([node, tree], axis=1), dtype=DTYPE),
            torch.as_tensor(mask))


def forward(state, net: TreeGateNet, mode=Mode.ROLLOUT) -> PolicyOutput:
    """Forward one ``StateFeatures`` (or a list of them)."""
    return net(*state_tensors(state), mode=mode)


def log_prob_entropy(out: PolicyOutput, action, row=0):
    """(log pi(action), entropy) for batch row ``row``."""
    action = int(action)
    mask = out.mask[row]
    if not 0 <= action < mask.shape[0] or bool(mask[action]):
        raise NetError(f"action {action} addresses a padded slot", code="MASKED_ACTION")
    return torch.log(out.probs[row, action]), out.entropy[row]


def gradients(loss, net: TreeGateNet):
    """Reverse-mode gradient of ``loss`` for every named parameter."""
    params = dict(net.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NetError(f"non-finite gradient for {name}", code="NON_FINITE_GRAD")
        out[name] = g
    return out


# ------------------------------------------------------------- checkpoints
def _payload(net: TreeGateNet, extra=None) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "feature_schema_version": SCHEMA_VERSION,
        "net_config": asdict(net.cfg),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    h = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(h)))
    buf.write(h)
    params = list(net.state_dict().items())
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        nb = name.encode()
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_checkpoint(path, net: TreeGateNet, extra=None):
    payload = _payload(net, extra)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(payload)
        fh.write(checksum(payload))


def load_checkpoint(path):
    """Return (net, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC) or len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise NetError(f"{path}: not a checkpoint", code="BAD_CHECKPOINT")
    payload, digest = data[len(CHECKPOINT_MAGIC):-8], data[-8:]
    if checksum(payload) != digest:
        raise NetError(f"{path}: checksum mismatch", code="BAD_CHECKPOINT")
    buf = io.BytesIO(payload)
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise NetError(f"{path}: unsupported format {header.get('format_version')}", code="BAD_CHECKPOINT")
    if header.get("feature_schema_version") != SCHEMA_VERSION:
        raise NetError(f"{path}: feature schema {header.get('feature_schema_version')} != {SCHEMA_VERSION}",
                       code="BAD_CHECKPOINT")
    net = TreeGateNet(NetConfig(**header["net_config"]))
    (count,) = struct.unpack("<I", buf.read(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf.read(8 * size), dtype="<f8").reshape(shape)
        state[name] = torch.tensor(arr, dtype=DTYPE)
    net.load_state_dict(state)
    return net, header
