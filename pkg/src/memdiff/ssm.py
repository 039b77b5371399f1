"""Selective state-space layer (Mamba-style) plus GRU/LSTM drop-in backbones.

Every backbone exposes the same surface:

* ``forward(xs)``: (B, T, d_model) -> (B, T, d_model), training-time path
* ``init_state(batch)``: fresh recurrent state
* ``step(state, x)``: (B, d_model) -> (new_state, (B, d_model)), constant cost per call

Discretisation is zero-order hold on A (``exp(delta * A)``) with the usual
Euler shortcut on B (``delta * B``).
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SSMConfig:
    model_dim: int = 128
    state_dim: int = 256
    expand: int = 4
    conv_width: int = 4
    dt_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    n_layers: int = 1
    scan: str = "parallel"  # or "sequential"

    def __post_init__(self):
        for name in ("model_dim", "state_dim", "expand", "conv_width", "n_layers"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.scan not in ("parallel", "sequential"):
            raise ValueError(f"unknown scan mode {self.scan!r}")

    @property
    def inner_dim(self) -> int:
        return self.expand * self.model_dim

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.model_dim / 16)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# scans over h_t = a_t * h_{t-1} + b_t


def sequential_scan(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Reference left fold along dim 1."""
    h = torch.zeros_like(b[:, 0]) if h0 is None else h0
    out = []
    for t in range(a.shape[1]):
        h = a[:, t] * h + b[:, t]
        out.append(h)
    return torch.stack(out, dim=1)


def parallel_scan(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Odd/even associative scan along dim 1: O(T) work, O(log T) depth."""
    if h0 is not None:
        b = torch.cat([(a[:, :1] * h0.unsqueeze(1) + b[:, :1]), b[:, 1:]], dim=1)
    return _pscan(a, b)


def _pscan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    T = a.shape[1]
    if T == 1:
        return b
    if T % 2:
        a = torch.cat([a, torch.ones_like(a[:, :1])], dim=1)
        b = torch.cat([b, torch.zeros_like(b[:, :1])], dim=1)
    a0, a1 = a[:, 0::2], a[:, 1::2]
    b0, b1 = b[:, 0::2], b[:, 1::2]
    h_odd = _pscan(a1 * a0, a1 * b0 + b1)
    h_prev = torch.cat([torch.zeros_like(h_odd[:, :1]), h_odd[:, :-1]], dim=1)
    h_even = a0 * h_prev + b0
    h = torch.stack([h_even, h_odd], dim=2).flatten(1, 2)
    return h[:, :T]


def selective_scan(u, delta, A, B, C, D, h0=None, mode: str = "parallel"):
    """Selective SSM over a sequence.

    u, delta: (b, l, d); A: (d, n); B, C: (b, l, n); D: (d,).
    Returns (y, h_last) with y: (b, l, d) and h_last: (b, d, n).
    """
    dA = torch.exp(delta.unsqueeze(-1) * A)                       # b l d n
    dBu = (delta * u).unsqueeze(-1) * B.unsqueeze(2)              # b l d n
    scan = parallel_scan if mode == "parallel" else sequential_scan
    h = scan(dA, dBu, h0)
    y = torch.einsum("bldn,bln->bld", h, C) + u * D
    return y, h[:, -1]


def selective_step(h, u, delta, A, B, C, D):
    """One recurrence step; h: (b, d, n), u/delta: (b, d), B/C: (b, n)."""
    h = torch.exp(delta.unsqueeze(-1) * A) * h + (delta * u).unsqueeze(-1) * B.unsqueeze(1)
    y = torch.einsum("bdn,bn->bd", h, C) + u * D
    return h, y


# ----------------------------------------------------------------------------


@dataclass
class SSMState:
    h: torch.Tensor       # (B, inner, N)
    conv: torch.Tensor    # (B, inner, conv_width - 1)

    def nbytes(self) -> int:
        buf = io.BytesIO()
        torch.save({"h": self.h, "conv": self.conv}, buf)
        return len(buf.getvalue())


class MambaBlock(nn.Module):
    """in_proj -> causal depthwise conv -> SiLU -> selective scan -> SiLU gate -> out_proj."""

    def __init__(self, config: SSMConfig):
        super().__init__()
        self.config = c = config
        d, n = c.inner_dim, c.state_dim
        self.in_proj = nn.Linear(c.model_dim, 2 * d)
        self.conv = nn.Conv1d(d, d, c.conv_width, groups=d, padding=c.conv_width - 1)
        self.x_proj = nn.Linear(d, c.rank + 2 * n, bias=False)
        self.dt_proj = nn.Linear(c.rank, d)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, n + 1, dtype=torch.float32)).repeat(d, 1))
        self.D = nn.Parameter(torch.ones(d))
        self.out_proj = nn.Linear(d, c.model_dim)

        # dt bias so that softplus(bias) lands in [dt_min, dt_max]
        dt = torch.exp(torch.rand(d) * (math.log(c.dt_max) - math.log(c.dt_min)) + math.log(c.dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
            nn.init.uniform_(self.dt_proj.weight, -c.rank ** -0.5, c.rank ** -0.5)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def _selective_params(self, x):
        n = self.config.state_dim
        dbc = self.x_proj(x)
        dt, B, C = dbc.split([self.config.rank, n, n], dim=-1)
        return F.softplus(self.dt_proj(dt)), B, C

    def ssm_scan(self, x, h0=None, mode: str | None = None):
        """Selective scan on already-convolved inner activations x: (B, T, inner)."""
        delta, B, C = self._selective_params(x)
        return selective_scan(x, delta, self.A, B, C, self.D, h0, mode or self.config.scan)

    def forward(self, xs: torch.Tensor) -> torch.Tensor:
        T = xs.shape[1]
        x, z = self.in_proj(xs).chunk(2, dim=-1)
        x = self.conv(x.transpose(1, 2))[..., :T].transpose(1, 2)
        x = F.silu(x)
        y, _ = self.ssm_scan(x)
        return self.out_proj(y * F.silu(z))

    def init_state(self, batch: int, device=None) -> SSMState:
        c = self.config
        dt = self.A_log.dtype
        return SSMState(torch.zeros(batch, c.inner_dim, c.state_dim, device=device, dtype=dt),
                        torch.zeros(batch, c.inner_dim, c.conv_width - 1, device=device, dtype=dt))

    def step(self, state: SSMState, x_t: torch.Tensor) -> tuple[SSMState, torch.Tensor]:
        if not torch.isfinite(x_t).all():
            raise ValueError("non-finite input to ssm step")
        x, z = self.in_proj(x_t).chunk(2, dim=-1)
        window = torch.cat([state.conv, x.unsqueeze(-1)], dim=-1)        # B, d, w
        xc = (window * self.conv.weight.squeeze(1)).sum(-1) + self.conv.bias
        xc = F.silu(xc)
        delta, B, C = self._selective_params(xc)
        h, y = selective_step(state.h, xc, delta, self.A, B, C, self.D)
        out = self.out_proj(y * F.silu(z))
        return SSMState(h, window[..., 1:]), out


# ----------------------------------------------------------------------------
# gated-recurrence baselines, written out so they can be checked equation by equation


class GRUCell(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_ih = nn.Linear(input_dim, 3 * hidden_dim)
        self.w_hh = nn.Linear(hidden_dim, 3 * hidden_dim)

    def forward(self, h, x):
        ir, iz, in_ = self.w_ih(x).chunk(3, dim=-1)
        hr, hz, hn = self.w_hh(h).chunk(3, dim=-1)
        r = torch.sigmoid(ir + hr)
        z = torch.sigmoid(iz + hz)
        n = torch.tanh(in_ + r * hn)
        return (1 - z) * n + z * h


class LSTMCell(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_ih = nn.Linear(input_dim, 4 * hidden_dim)
        self.w_hh = nn.Linear(hidden_dim, 4 * hidden_dim)

    def forward(self, state, x):
        h, c = state
        i, f, g, o = (self.w_ih(x) + self.w_hh(h)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def gru_step(cell: GRUCell, h, x):
    h = cell(h, x)
    return h, h


def lstm_step(cell: LSTMCell, state, x):
    h, c = cell(state, x)
    return (h, c), h


class RecurrentBlock(nn.Module):
    """GRU/LSTM wrapped with 256-wide ReLU input and output layers."""

    def __init__(self, model_dim: int, kind: str = "gru", hidden_dim: int = 256):
        super().__init__()
        if kind not in ("gru", "lstm"):
            raise ValueError(f"unknown recurrent backbone {kind!r}")
        self.kind = kind
        self.inp = nn.Linear(model_dim, hidden_dim)
        self.cell = GRUCell(hidden_dim, hidden_dim) if kind == "gru" else LSTMCell(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, model_dim)
        self.hidden_dim = hidden_dim

    def init_state(self, batch: int, device=None):
        h = torch.zeros(batch, self.hidden_dim, device=device, dtype=self.inp.weight.dtype)
        return h if self.kind == "gru" else (h, torch.zeros_like(h))

    def step(self, state, x_t):
        u = F.relu(self.inp(x_t))
        if self.kind == "gru":
            state, y = gru_step(self.cell, state, u)
        else:
            state, y = lstm_step(self.cell, state, u)
        return state, self.out(F.relu(y))

    def forward(self, xs):
        state = self.init_state(xs.shape[0], xs.device)
        ys = []
        for t in range(xs.shape[1]):
            state, y = self.step(state, xs[:, t])
            ys.append(y)
        return torch.stack(ys, dim=1)


class MambaStack(nn.Module):
    """Pre-norm residual stack of Mamba blocks; state is a tuple of per-layer states."""

    def __init__(self, config: SSMConfig):
        super().__init__()
        self.blocks = nn.ModuleList(MambaBlock(config) for _ in range(config.n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(config.model_dim) for _ in range(config.n_layers - 1))

    def forward(self, xs):
        h = xs
        for i, block in enumerate(self.blocks):
            h = h + block(self.norms[i - 1](h) if i else h)
        return h - xs

    def init_state(self, batch: int, device=None):
        return tuple(b.init_state(batch, device) for b in self.blocks)

    def step(self, state, x_t):
        h, new = x_t, []
        for i, (block, s) in enumerate(zip(self.blocks, state)):
            s, y = block.step(s, self.norms[i - 1](h) if i else h)
            new.append(s)
            h = h + y
        return tuple(new), h - x_t


def make_backbone(kind: str, config: SSMConfig) -> nn.Module:
    if kind == "mamba":
        return MambaBlock(config) if config.n_layers == 1 else MambaStack(config)
    return RecurrentBlock(config.model_dim, kind)
