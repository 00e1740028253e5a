"""GRU recurrence with a hand-written backward pass.

The input projection is left to torch; only the sequential part runs here,
compiled with numba. Gate layout and equations follow ``torch.nn.GRU``
(reset, update, new), so weights are interchangeable with it.
"""
from __future__ import annotations

import numpy as np
import torch
from numba import njit


@njit(cache=True)
def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


@njit(cache=True)
def _forward(gi, w_hh, b_hh, h0):
    # gi: (B, T, 3H) input projections including b_ih
    B, T, H3 = gi.shape
    H = H3 // 3
    out = np.empty((B, T, H), dtype=gi.dtype)
    r_s = np.empty((B, T, H), dtype=gi.dtype)
    z_s = np.empty((B, T, H), dtype=gi.dtype)
    n_s = np.empty((B, T, H), dtype=gi.dtype)
    ghn_s = np.empty((B, T, H), dtype=gi.dtype)
    gh = np.empty(H3, dtype=gi.dtype)
    for b in range(B):
        h = h0[b].copy()
        for t in range(T):
            for j in range(H3):
                acc = b_hh[j]
                for k in range(H):
                    acc += w_hh[j, k] * h[k]
                gh[j] = acc
            for j in range(H):
                r = _sigmoid(gi[b, t, j] + gh[j])
                z = _sigmoid(gi[b, t, H + j] + gh[H + j])
                n = np.tanh(gi[b, t, 2 * H + j] + r * gh[2 * H + j])
                r_s[b, t, j] = r
                z_s[b, t, j] = z
                n_s[b, t, j] = n
                ghn_s[b, t, j] = gh[2 * H + j]
            for j in range(H):
                h[j] = (1.0 - z_s[b, t, j]) * n_s[b, t, j] + z_s[b, t, j] * h[j]
                out[b, t, j] = h[j]
    return out, r_s, z_s, n_s, ghn_s


@njit(cache=True)
def _backward(grad_out, out, h0, w_hh, r_s, z_s, n_s, ghn_s):
    B, T, H = out.shape
    H3 = 3 * H
    d_gi = np.zeros((B, T, H3), dtype=out.dtype)
    d_w = np.zeros((H3, H), dtype=out.dtype)
    d_b = np.zeros(H3, dtype=out.dtype)
    d_h0 = np.zeros((B, H), dtype=out.dtype)
    dgh = np.empty(H3, dtype=out.dtype)
    dh = np.empty(H, dtype=out.dtype)
    dh_prev = np.empty(H, dtype=out.dtype)
    for b in range(B):
        for j in range(H):
            dh[j] = 0.0
        for t in range(T - 1, -1, -1):
            for j in range(H):
                dh[j] += grad_out[b, t, j]
            for j in range(H):
                h_prev = out[b, t - 1, j] if t > 0 else h0[b, j]
                r, z, n = r_s[b, t, j], z_s[b, t, j], n_s[b, t, j]
                dn_pre = dh[j] * (1.0 - z) * (1.0 - n * n)
                dz_pre = dh[j] * (h_prev - n) * z * (1.0 - z)
                dr_pre = dn_pre * ghn_s[b, t, j] * r * (1.0 - r)
                d_gi[b, t, j] = dr_pre
                d_gi[b, t, H + j] = dz_pre
                d_gi[b, t, 2 * H + j] = dn_pre
                dgh[j] = dr_pre
                dgh[H + j] = dz_pre
                dgh[2 * H + j] = dn_pre * r
                dh_prev[j] = dh[j] * z
            for i in range(H3):
                d_b[i] += dgh[i]
                for k in range(H):
                    h_prev = out[b, t - 1, k] if t > 0 else h0[b, k]
                    d_w[i, k] += dgh[i] * h_prev
            for k in range(H):
                acc = dh_prev[k]
                for i in range(H3):
                    acc += w_hh[i, k] * dgh[i]
                dh[k] = acc
        for j in range(H):
            d_h0[b, j] = dh[j]
    return d_gi, d_w, d_b, d_h0


class GRURecurrence(torch.autograd.Function):
    """``(gi, w_hh, b_hh, h0) -> h`` with ``gi`` of shape (B, T, 3H)."""

    @staticmethod
    def forward(ctx, gi, w_hh, b_hh, h0):
        args = [a.detach().cpu().contiguous().numpy() for a in (gi, w_hh, b_hh, h0)]
        out, r, z, n, ghn = _forward(*args)
        ctx.save_for_backward(torch.from_numpy(out), h0.detach(), w_hh.detach(),
                              torch.from_numpy(r), torch.from_numpy(z), torch.from_numpy(n), torch.from_numpy(ghn))
        return torch.from_numpy(out).to(gi.device)

    @staticmethod
    def backward(ctx, grad_out):
        out, h0, w_hh, r, z, n, ghn = ctx.saved_tensors
        g = grad_out.detach().cpu().contiguous().numpy().astype(out.numpy().dtype, copy=False)
        d_gi, d_w, d_b, d_h0 = _backward(g, out.numpy(), h0.contiguous().numpy(), w_hh.contiguous().numpy(),
                                         r.numpy(), z.numpy(), n.numpy(), ghn.numpy())
        return torch.from_numpy(d_gi), torch.from_numpy(d_w), torch.from_numpy(d_b), torch.from_numpy(d_h0)


def gru_sequence(x: torch.Tensor, w_ih, w_hh, b_ih, b_hh, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Run a single-layer GRU over ``x`` of shape (B, T, I); returns (B, T, H)."""
    H = w_hh.shape[1]
    if h0 is None:
        h0 = x.new_zeros(x.shape[0], H)
    gi = torch.nn.functional.linear(x, w_ih, b_ih)
    return GRURecurrence.apply(gi, w_hh, b_hh, h0)
