"""Cross-modal squeeze-excitation transfer and late aggregation."""
from __future__ import annotations

import numpy as np

from .nncore import Dense, Module, ReLU, ResidualBlock, ShapeError, sigmoid


def joint_width(c_r: int, c_h: int) -> int:
    return (c_r + c_h) // 4


class MMTM(Module):
    """Recalibrate two feature maps with gains computed from both.

    Each stream is squeezed by spatial averaging, the descriptors are
    concatenated (RGB first) and mapped to a joint code, and two dense heads
    turn the code into per-channel gains ``2 * sigmoid(e)`` in (0, 2).
    """

    def __init__(self, c_r, c_h, z_activation="relu", zero_excitation=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_r, self.c_h = c_r, c_h
        self.z_dim = joint_width(c_r, c_h)
        if self.z_dim < 1:
            raise ValueError(f"mmtm needs at least 4 channels in total, got {c_r}+{c_h}")
        if z_activation not in ("relu", "none"):
            raise ValueError(f"unknown mmtm_z_activation {z_activation!r}")
        self.z_activation = z_activation
        self.add("joint", Dense(c_r + c_h, self.z_dim, rng=rng))
        self.add("z_act", ReLU())
        self.add("excite_r", Dense(self.z_dim, c_r, rng=rng))
        self.add("excite_h", Dense(self.z_dim, c_h, rng=rng))
        if zero_excitation:
            self.zero_excitation()

    def zero_excitation(self):
        for name in ("excite_r", "excite_h"):
            for p in self.children[name].params.values():
                p[...] = 0.0

    def gains(self, r, h):
        s = np.concatenate([r.mean(axis=(1, 2)), h.mean(axis=(1, 2))], axis=1)
        z = self.children["joint"].forward(s)
        if self.z_activation == "relu":
            z = self.children["z_act"].forward(z)
        e_r = self.children["excite_r"].forward(z)
        e_h = self.children["excite_h"].forward(z)
        return 2.0 * sigmoid(e_r), 2.0 * sigmoid(e_h)

    def forward(self, r, h, train=False):
        if r.ndim != 4 or h.ndim != 4 or r.shape[0] != h.shape[0]:
            raise ShapeError(f"mmtm expects two N x H x W x C maps, got {r.shape} and {h.shape}")
        if r.shape[-1] != self.c_r or h.shape[-1] != self.c_h:
            raise ShapeError(
                f"mmtm built for {self.c_r}+{self.c_h} channels, got {r.shape[-1]}+{h.shape[-1]}"
            )
        g_r, g_h = self.gains(r, h)
        self._cache = (r, h, g_r, g_h)
        return g_r[:, None, None, :] * r, g_h[:, None, None, :] * h

    def backward(self, dout):
        dr_out, dh_out = dout
        r, h, g_r, g_h = self._cache
        c = self.children
        dr = g_r[:, None, None, :] * dr_out
        dh = g_h[:, None, None, :] * dh_out
        dg_r = (dr_out * r).sum(axis=(1, 2))
        dg_h = (dh_out * h).sum(axis=(1, 2))
        # d(2 sigmoid(e))/de = g (1 - g/2)
        de_r = dg_r * g_r * (1.0 - 0.5 * g_r)
        de_h = dg_h * g_h * (1.0 - 0.5 * g_h)
        dz = c["excite_r"].backward(de_r) + c["excite_h"].backward(de_h)
        if self.z_activation == "relu":
            dz = c["z_act"].backward(dz)
        ds = c["joint"].backward(dz)
        hr, wr = r.shape[1:3]
        hh, wh = h.shape[1:3]
        dr += ds[:, None, None, : self.c_r] / (hr * wr)
        dh += ds[:, None, None, self.c_r :] / (hh * wh)
        return dr, dh


def mmtm_forward(r, h, params: MMTM):
    return params.forward(r, h)


class TransferFunction(Module):
    """Two MMTM blocks applied after the second-last and last backbone modules."""

    def __init__(self, widths, z_activation="relu", zero_excitation=False, rng=None):
        super().__init__()
        c3, c4 = widths
        self.add("mmtm3", MMTM(c3, c3, z_activation, zero_excitation, rng))
        self.add("mmtm4", MMTM(c4, c4, z_activation, zero_excitation, rng))


class ConcatResidual(Module):
    """Channel concatenation (RGB first) followed by one residual block."""

    def __init__(self, c_r, c_h, width, rng=None):
        super().__init__()
        self.c_r, self.c_h = c_r, c_h
        self.add("block", ResidualBlock(c_r + c_h, width, rng=rng))

    def forward(self, r, h, train=False):
        if r.shape[:3] != h.shape[:3]:
            raise ShapeError(f"aggregation needs matching N x H x W, got {r.shape} and {h.shape}")
        return self.children["block"].forward(np.concatenate([r, h], axis=-1), train)

    def backward(self, dout):
        d = self.children["block"].backward(dout)
        return d[..., : self.c_r], d[..., self.c_r :]


class Additive(Module):
    def forward(self, r, h, train=False):
        if r.shape != h.shape:
            raise ShapeError(f"additive aggregation needs equal shapes, got {r.shape} and {h.shape}")
        return r + h

    def backward(self, dout):
        return dout, dout


def aggregate_additive(r4, h4):
    return Additive().forward(r4, h4)


def aggregate_concat_residual(r4, h4, params: ConcatResidual, train=False):
    return params.forward(r4, h4, train)
