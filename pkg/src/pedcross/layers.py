"""GRU cell/sequence, temporal attention, fully-connected, dropout, init.

Vectors travel as (1, n) row tensors; weight matrices on the input side are
(in, hidden) so x @ W works directly, and fully-connected weights are
(out, in) applied through a transposed matmul.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import BadRate, DimMismatch
from .tensor import Tape, Tensor


@dataclass
class GruParams:
    """Update gate z, reset gate r, candidate state; names follow the usual
    GRU formulation. Hidden-side matrices are square (hidden x hidden)."""
    W_xz: Tensor
    W_hz: Tensor
    b_z: Tensor
    W_xr: Tensor
    W_hr: Tensor
    b_r: Tensor
    W_x: Tensor
    W_h: Tensor
    b: Tensor

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def hidden(self) -> int:
        return self.W_hz.dims[0]

    def validate(self):
        h = self.hidden
        for name in ("W_hz", "W_hr", "W_h"):
            if getattr(self, name).dims != (h, h):
                raise DimMismatch(f"{name} must be ({h},{h})")
        for name in ("b_z", "b_r", "b"):
            if getattr(self, name).dims != (1, h):
                raise DimMismatch(f"{name} must be (1,{h})")


@dataclass
class AttentionParams:
    """W_p scores each step against the last hidden state; W_c maps the
    concatenated [context : last] pair to the output width."""
    W_p: Tensor   # (hidden, hidden)
    W_c: Tensor   # (out, 2*hidden)

    def tensors(self) -> dict:
        return {"W_p": self.W_p, "W_c": self.W_c}


def init_glorot(shape, rng, dtype=np.float32) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / fan_sum); fan_sum is orientation-free
    ((d0 + d1) * receptive field) so transposed conventions initialize alike."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise DimMismatch(f"non-positive extent in {shape}")
    if len(shape) >= 2:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_sum = (shape[0] + shape[1]) * receptive
    else:
        fan_sum = shape[0] + 1
    a = float(np.sqrt(6.0 / fan_sum))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, dtype=dtype)


def init_zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def init_gru(input_dim: int, hidden: int, rng, dtype=np.float32) -> GruParams:
    def w_in():
        return init_glorot((input_dim, hidden), rng, dtype)

    def w_h():
        return init_glorot((hidden, hidden), rng, dtype)

    def b():
        return init_zeros((1, hidden), dtype)

    return GruParams(W_xz=w_in(), W_hz=w_h(), b_z=b(),
                     W_xr=w_in(), W_hr=w_h(), b_r=b(),
                     W_x=w_in(), W_h=w_h(), b=b())


def init_attention(hidden: int, out: int, rng, dtype=np.float32) -> AttentionParams:
    return AttentionParams(W_p=init_glorot((hidden, hidden), rng, dtype),
                           W_c=init_glorot((out, 2 * hidden), rng, dtype))


def gru_cell(tape: Tape, x_t: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One recurrence step: gates from the input and previous state, candidate
    from the reset-scaled previous state, then the z-blend."""
    z = tape.sigmoid(tape.add(tape.add(tape.matmul(x_t, p.W_xz),
                                       tape.matmul(h_prev, p.W_hz)), p.b_z))
    r = tape.sigmoid(tape.add(tape.add(tape.matmul(x_t, p.W_xr),
                                       tape.matmul(h_prev, p.W_hr)), p.b_r))
    cand = tape.tanh(tape.add(tape.add(tape.matmul(x_t, p.W_x),
                                       tape.matmul(tape.mul(r, h_prev), p.W_h)), p.b))
    keep = tape.affine(z, -1.0, 1.0)          # 1 - z
    return tape.add(tape.mul(keep, h_prev), tape.mul(z, cand))


def gru_sequence(tape: Tape, X: Tensor, h0: Tensor, p: GruParams) -> Tensor:
    """Run the cell left-to-right over X (T, input); returns all hidden states
    stacked as (T, hidden)."""
    T = X.dims[0]
    if T < 1:
        raise DimMismatch("gru_sequence needs T >= 1")
    h = h0
    rows = []
    for t in range(T):
        x_t = tape.slice0(X, t, t + 1)
        h = gru_cell(tape, x_t, h, p)
        rows.append(h)
    return tape.concat(rows, axis=0)


def attention(tape: Tape, H: Tensor, p: AttentionParams, return_weights=False):
    """Temporal attention over H (T, hidden).

    score_t = h_m^T W_p h_t with h_m the last hidden state; softmax over steps;
    context = sum of weighted states; output = tanh(W_c [context : h_m]).
    """
    T = H.dims[0]
    if T < 1:
        raise DimMismatch("attention needs T >= 1")
    h_m = tape.slice0(H, T - 1, T)                       # (1, hidden)
    u = tape.matmul(h_m, p.W_p)                          # row form of W_p^T h_m
    scores = tape.matmul(H, u, transpose_b=True)         # (T, 1)
    alpha = tape.softmax_last(tape.reshape(scores, (1, T)))
    h_c = tape.matmul(alpha, H)                          # (1, hidden)
    cat = tape.concat([h_c, h_m], axis=1)
    out = tape.tanh(tape.matmul(cat, p.W_c, transpose_b=True))
    if return_weights:
        return out, alpha
    return out


def fully_connected(tape: Tape, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map W x + b for a row input x (1, in), W (out, in)."""
    if b.data.ndim == 1:
        b = tape.reshape(b, (1, b.dims[0]))
    return tape.add(tape.matmul(x, W, transpose_b=True), b)


def dropout(tape: Tape, x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Zero each value with probability rate and scale survivors by
    1/(1-rate); identity when rate is 0 or not training."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(size=x.dims) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return tape.mul(x, Tensor(mask, dtype=x.dtype))
