"""Recurrent in-loop aggregation of decoded features.

A two-layer spatiotemporal LSTM turns the per-frame decoded feature into a
compound representation that mixes the current frame with accumulated
history.  Each cell keeps two memories: a per-layer temporal cell state C
updated horizontally across time, and a shared spatiotemporal memory M that
zig-zags through the stack (layer 0 reads the top layer's M from the previous
step, layer 1 reads layer 0's M from the current step).

The aggregated output is a residual correction: G_t = F_t + H1_t, so an
untrained or silent recurrence leaves the decoded feature unchanged.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import Tensor, nn


class RecurrentState(NamedTuple):
    """Carried between frames; reset to zeros at every intra frame."""

    h: tuple[Tensor, Tensor]
    c: tuple[Tensor, Tensor]
    m: Tensor

    def detach(self) -> "RecurrentState":
        return RecurrentState(
            tuple(t.detach() for t in self.h),
            tuple(t.detach() for t in self.c),
            self.m.detach(),
        )


class SpatioTemporalLSTMCell(nn.Module):
    """LSTM cell with dual memories and seven gates.

    The temporal path (i, f, g from x and h_prev) updates C; the
    spatiotemporal path (i', f', g' from x and m_in) updates M; the output
    gate sees x, h_prev and both fresh memories, and the hidden state is a
    1x1 fusion of [C, M].
    """

    def __init__(self, in_ch: int, hidden: int, kernel_size: int = 3) -> None:
        super().__init__()
        pad = kernel_size // 2
        self.hidden = hidden
        self.conv_x = nn.Conv2d(in_ch, hidden * 7, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hidden, hidden * 4, kernel_size, padding=pad, bias=False)
        self.conv_m = nn.Conv2d(hidden, hidden * 3, kernel_size, padding=pad, bias=False)
        self.conv_o = nn.Conv2d(hidden * 2, hidden, kernel_size, padding=pad, bias=False)
        self.conv_last = nn.Conv2d(hidden * 2, hidden, kernel_size=1)

    def forward(
        self, x: Tensor, h_prev: Tensor, c_prev: Tensor, m_in: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        xg, xi, xf, xgp, xip, xfp, xo = torch.chunk(self.conv_x(x), 7, dim=1)
        hg, hi, hf, ho = torch.chunk(self.conv_h(h_prev), 4, dim=1)
        mg, mi, mf = torch.chunk(self.conv_m(m_in), 3, dim=1)

        g = torch.tanh(xg + hg)
        i = torch.sigmoid(xi + hi)
        f = torch.sigmoid(xf + hf)
        c = f * c_prev + i * g

        g_p = torch.tanh(xgp + mg)
        i_p = torch.sigmoid(xip + mi)
        f_p = torch.sigmoid(xfp + mf)
        m = f_p * m_in + i_p * g_p

        mem = torch.cat([c, m], dim=1)
        o = torch.sigmoid(xo + ho + self.conv_o(mem))
        h = o * torch.tanh(self.conv_last(mem))
        return h, c, m


class ConvLSTMCell(nn.Module):
    """Plain ConvLSTM used by the recurrence ablation; ignores m_in."""

    def __init__(self, in_ch: int, hidden: int, kernel_size: int = 3) -> None:
        super().__init__()
        pad = kernel_size // 2
        self.hidden = hidden
        self.gates = nn.Conv2d(in_ch + hidden, hidden * 4, kernel_size, padding=pad)

    def forward(
        self, x: Tensor, h_prev: Tensor, c_prev: Tensor, m_in: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        gi, gf, gg, go = torch.chunk(self.gates(torch.cat([x, h_prev], dim=1)), 4, dim=1)
        i = torch.sigmoid(gi)
        f = torch.sigmoid(gf)
        g = torch.tanh(gg)
        o = torch.sigmoid(go)
        c = f * c_prev + i * g
        h = o * torch.tanh(c)
        return h, c, m_in


class RecurrentAggregator(nn.Module):
    """Two stacked recurrent cells producing the compound representation."""

    def __init__(self, channels: int, cell: str = "stlstm") -> None:
        super().__init__()
        self.channels = channels
        self.cell_kind = cell
        if cell == "stlstm":
            cell_cls = SpatioTemporalLSTMCell
        elif cell == "convlstm":
            cell_cls = ConvLSTMCell
        else:
            raise ValueError(f"unknown recurrent cell {cell!r}")
        self.layer0 = cell_cls(channels, channels)
        self.layer1 = cell_cls(channels, channels)

    def initial_state(
        self, batch: int, height: int, width: int, device=None, dtype=None
    ) -> RecurrentState:
        z = torch.zeros(batch, self.channels, height, width, device=device, dtype=dtype)
        return RecurrentState((z, z.clone()), (z.clone(), z.clone()), z.clone())

    def forward(self, f_hat: Tensor, state: RecurrentState) -> tuple[Tensor, RecurrentState]:
        # state.m holds the top layer's M from the previous step.
        h0, c0, m0 = self.layer0(f_hat, state.h[0], state.c[0], state.m)
        h1, c1, m1 = self.layer1(h0, state.h[1], state.c[1], m0)
        g = f_hat + h1
        return g, RecurrentState((h0, h1), (c0, c1), m1)
