"""State-propagating denoiser: a 1-D encoder/decoder with recurrent per-level state.

``SPDMNet(cond, t, state) -> (eps_hat, next_state)``. The state is a list of
feature sequences, one per resolution level, shaped ``(B, state_width_i, L_i)``
with ``L_i = L / 2**i``. Each level fuses its incoming state on the encoder
path and produces its outgoing state with a GRU cell fed by the decoder
features of the same level.

With ``prior_anchor`` the output head predicts a correction to the noise
implied by a closed-form guess of the clean locations built from the linear
prior (channels 2:4) and the noisy locations (channels 0:2).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule

CKPT_FORMAT = "spdm-ckpt-v1"
FUSION_MODES = ("add", "concat", "cross-attention")


class ConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    in_channels: int
    levels: int = 3
    base_width: int = 64
    heads: int = 4
    fusion: str = "add"
    time_dim: int = 64
    state_ratio: float = 0.5
    use_state: bool = True
    T: int = 500
    blocks_per_level: int = 2
    prior_anchor: bool = True
    prior_sigma: float = 0.05
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.levels < 1 or self.base_width < 8 or self.blocks_per_level < 1:
            raise ConfigError("levels >= 1, base_width >= 8 and blocks_per_level >= 1 required")
        if self.widths[-1] % self.heads:
            raise ConfigError(f"bottleneck width {self.widths[-1]} not divisible by {self.heads} heads")
        if self.prior_anchor and self.prior_sigma <= 0:
            raise ConfigError("prior_sigma must be positive")
        if self.prior_anchor and self.in_channels < 4:
            raise ConfigError("prior_anchor needs the noisy and prior location blocks in channels 0:4")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.levels)]

    @property
    def state_widths(self) -> list[int]:
        return [max(1, int(round(w * self.state_ratio))) for w in self.widths]

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def padded_length(self, L: int) -> int:
        m = self.multiple
        return -(-L // m) * m


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def sinusoidal_step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv1d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv1d(cout, cout, 3, padding=1)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h, _ = self.attn(h, h, h, need_weights=False)
        return x + h.transpose(1, 2)


class StateFusion(nn.Module):
    """Fuse one state level into block features of the same resolution."""

    def __init__(self, width: int, state_width: int, mode: str, heads: int):
        super().__init__()
        self.mode = mode
        if mode == "add":
            self.proj = nn.Conv1d(state_width, width, 1, bias=False)
        elif mode == "concat":
            self.proj = nn.Conv1d(width + state_width, width, 1)
        else:
            self.norm = nn.GroupNorm(_groups(width), width)
            self.attn = nn.MultiheadAttention(width, _heads_for(width, heads), kdim=state_width,
                                              vdim=state_width, batch_first=True)

    def forward(self, h, s):
        if h.shape[-1] != s.shape[-1]:
            raise ValueError(f"state length {s.shape[-1]} != feature length {h.shape[-1]}")
        if self.mode == "add":
            return h + self.proj(s)
        if self.mode == "concat":
            return self.proj(torch.cat([h, s], dim=1))
        q = self.norm(h).transpose(1, 2)
        kv = s.transpose(1, 2)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return h + out.transpose(1, 2)


def _heads_for(width: int, heads: int) -> int:
    while width % heads:
        heads -= 1
    return heads


class StateUpdate(nn.Module):
    """Position-wise GRU: features are the input, the incoming state is the hidden state."""

    def __init__(self, width: int, state_width: int):
        super().__init__()
        self.cell = nn.GRUCell(width, state_width)

    def forward(self, feats, s):
        B, W, Lh = feats.shape
        x = feats.transpose(1, 2).reshape(B * Lh, W)
        h = s.transpose(1, 2).reshape(B * Lh, s.shape[1])
        out = self.cell(x, h)
        return out.reshape(B, Lh, -1).transpose(1, 2)


class SPDMNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths, swidths = cfg.widths, cfg.state_widths
        temb = 4 * cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv1d(cfg.in_channels, widths[0], 3, padding=1)

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.enc.append(nn.ModuleList(
                [ResBlock(prev if j == 0 else w, w, temb) for j in range(cfg.blocks_per_level)]
            ))
            prev = w
            if i < cfg.levels - 1:
                self.down.append(nn.Conv1d(w, w, 3, stride=2, padding=1))
        self.mid_attn = SelfAttention(widths[-1], cfg.heads)
        self.mid_block = ResBlock(widths[-1], widths[-1], temb)

        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            w = widths[i]
            self.dec.append(nn.ModuleList(
                [ResBlock(2 * w if j == 0 else w, w, temb) for j in range(cfg.blocks_per_level)]
            ))
            if i > 0:
                self.up.append(nn.Conv1d(w, widths[i - 1], 3, padding=1))
        self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.out = nn.Conv1d(widths[0], 2, 1)

        if cfg.prior_anchor:
            sched = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
            ab = torch.tensor(sched.alpha_bar.copy(), dtype=torch.float32)
            self.register_buffer("sqrt_ab", ab.sqrt(), persistent=False)
            self.register_buffer("sqrt_1m_ab", (1 - ab).sqrt(), persistent=False)

        if cfg.use_state:
            self.fuse = nn.ModuleList(
                [StateFusion(w, s, cfg.fusion, cfg.heads) for w, s in zip(widths, swidths)]
            )
            self.update = nn.ModuleList([StateUpdate(w, s) for w, s in zip(widths, swidths)])

    # -- helpers -------------------------------------------------------------

    def time_embed(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.cfg.T):
            raise IndexError(f"step outside [0, {self.cfg.T})")
        return self.time_mlp(sinusoidal_step_embedding(t, self.cfg.time_dim))

    def state_shapes(self, L: int) -> list[tuple[int, int]]:
        Lp = self.cfg.padded_length(L)
        return [(s, Lp // 2**i) for i, s in enumerate(self.cfg.state_widths)]

    def init_state(self, batch: int, L: int) -> list[torch.Tensor]:
        if not self.cfg.use_state:
            return []
        return [torch.zeros(batch, s, n) for s, n in self.state_shapes(L)]

    def recurrent_parameters(self):
        if not self.cfg.use_state:
            return []
        return list(self.update.parameters())

    def state_parameters(self):
        if not self.cfg.use_state:
            return []
        return list(self.update.parameters()) + list(self.fuse.parameters())

    # -- forward ---------------------------------------------------------------

    def forward(self, cond: torch.Tensor, t, state: list[torch.Tensor] | None = None):
        """``cond`` is ``(B, C, L)``; returns ``(eps_hat (B, 2, L), next_state)``."""
        cfg = self.cfg
        B, C, L = cond.shape
        if C != cfg.in_channels:
            raise ValueError(f"condition has {C} channels, network expects {cfg.in_channels}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        emb = self.time_embed(t)

        Lp = cfg.padded_length(L)
        if Lp != L:
            cond = F.pad(cond, (0, Lp - L))
        valid = [None] * cfg.levels
        if Lp != L:
            for i in range(cfg.levels):
                n = Lp // 2**i
                idx = torch.arange(n) * 2**i
                valid[i] = (idx < L).float()[None, None, :]

        if cfg.use_state:
            if state is None:
                state = self.init_state(B, L)
            expected = [(B, s, n) for s, n in self.state_shapes(L)]
            got = [tuple(s.shape) for s in state]
            if got != expected:
                raise ValueError(f"state shapes {got} do not match configuration {expected}")

        h = self.inp(cond)
        skips = []
        for i in range(cfg.levels):
            blocks = self.enc[i]
            h = blocks[0](h, emb)
            if cfg.use_state:
                h = self.fuse[i](h, state[i])
            for blk in blocks[1:]:
                h = blk(h, emb)
            skips.append(h)
            if i < cfg.levels - 1:
                h = self.down[i](h)

        h = self.mid_block(self.mid_attn(h), emb)

        new_state = []
        for k, i in enumerate(reversed(range(cfg.levels))):
            h = torch.cat([h, skips[i]], dim=1)
            for blk in self.dec[k]:
                h = blk(h, emb)
            if cfg.use_state:
                s = self.update[i](h, state[i])
                if valid[i] is not None:
                    s = s * valid[i]
                new_state.append(s)
            if i > 0:
                h = self.up[k](F.interpolate(h, scale_factor=2, mode="nearest"))

        eps = self.out(F.silu(self.out_norm(h)))[:, :, :L]
        if cfg.prior_anchor:
            eps = eps + self.prior_noise(cond[:, :, :L], t)
        return eps, list(reversed(new_state))

    def prior_noise(self, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Noise implied by the Gaussian-posterior guess of the clean locations.

        Treating the clean location as ``N(prior, prior_sigma**2)``, the guess
        blends the prior with ``x_t / sqrt(ab_t)`` by their precisions. The
        network output is a correction on top of this noise.
        """
        a = self.sqrt_ab[t][:, None, None]
        b = self.sqrt_1m_ab[t][:, None, None]
        x_t, prior = cond[:, 0:2], cond[:, 2:4]
        r2 = self.cfg.prior_sigma ** 2
        w = r2 / (r2 + (b / a) ** 2)
        x0 = prior + w * (x_t / a - prior)
        return (x_t - a * x0) / b


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_overhead(cfg: DenoiserConfig) -> float:
    """Relative parameter increase of the stateful network over the stateless one."""
    with_state = count_parameters(SPDMNet(DenoiserConfig(**{**asdict(cfg), "use_state": True})))
    without = count_parameters(SPDMNet(DenoiserConfig(**{**asdict(cfg), "use_state": False})))
    return with_state / without - 1.0


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SPDMNet, schedule: dict, layout: list, norm: dict,
                    extra: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CKPT_FORMAT,
        "config": asdict(model.cfg),
        "schedule": schedule,
        "layout": layout,
        "norm": norm,
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path) -> tuple[SPDMNet, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    model = SPDMNet(DenoiserConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: blob[k] for k in ("config", "schedule", "layout", "norm", "extra")}
    return model, meta
