"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
verification). A Tape records operations as they execute; backward() walks the
record in reverse and accumulates gradients into the participating tensors.
Tapes are rebuilt on every forward pass -- there is no graph caching.

Tensors are treated as immutable once they have entered an operation; nothing
here enforces that, but mutating one invalidates any tape that saw it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, DisconnectedGraph, NotScalar

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise DimMismatch(f"expected 3 extents, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


@dataclass
class _Record:
    out_id: int
    inputs: tuple
    backward_fn: object  # grad_out -> list of (tensor, grad or None)


class Tape:
    """Ordered operation record. Inputs of every record precede it.

    With record=False the ops still compute forward results but keep nothing,
    which makes evaluation passes cheap.
    """

    def __init__(self, record=True):
        self.record = record
        self._records: list[_Record] = []
        self._produced: set[int] = set()
        self._needs: set[int] = set()

    def __len__(self):
        return len(self._records)

    def _needed(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._needs

    def _emit(self, out: Tensor, inputs, backward_fn_factory):
        """Register an op output. backward_fn_factory is called only when some
        input actually participates in gradients, so ops can skip saving
        context on pure-data paths."""
        if not self.record:
            return out
        self._produced.add(id(out))
        if any(self._needed(t) for t in inputs):
            self._needs.add(id(out))
            self._records.append(_Record(id(out), tuple(inputs), backward_fn_factory()))
        return out

    # ---- elementwise ----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.dims != b.dims:
            raise DimMismatch(f"add: {a.dims} vs {b.dims}")
        out = Tensor(a.data + b.data, dtype=a.dtype)

        def factory():
            def bw(g):
                return [(a, g), (b, g)]
            return bw

        return self._emit(out, (a, b), factory)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.dims != b.dims:
            raise DimMismatch(f"mul: {a.dims} vs {b.dims}")
        out = Tensor(a.data * b.data, dtype=a.dtype)

        def factory():
            ad, bd = a.data, b.data
            def bw(g):
                return [(a, g * bd), (b, g * ad)]
            return bw

        return self._emit(out, (a, b), factory)

    def affine(self, x: Tensor, scale=1.0, shift=0.0) -> Tensor:
        out = Tensor(x.data * scale + shift, dtype=x.dtype)

        def factory():
            def bw(g):
                return [(x, g * scale)]
            return bw

        return self._emit(out, (x,), factory)

    def channel_bias(self, x: Tensor, b: Tensor) -> Tensor:
        """x: (C, ...spatial), b: (C,) added per channel."""
        if b.data.ndim != 1 or x.data.ndim < 1 or x.dims[0] != b.dims[0]:
            raise DimMismatch(f"channel_bias: {x.dims} vs {b.dims}")
        shape = (b.dims[0],) + (1,) * (x.data.ndim - 1)
        out = Tensor(x.data + b.data.reshape(shape), dtype=x.dtype)

        def factory():
            axes = tuple(range(1, x.data.ndim))
            def bw(g):
                return [(x, g), (b, g.sum(axis=axes) if axes else g)]
            return bw

        return self._emit(out, (x, b), factory)

    def sigmoid(self, x: Tensor) -> Tensor:
        # computed branch-free through tanh, which is stable for large |x|
        out = Tensor(0.5 * (np.tanh(0.5 * x.data) + 1.0), dtype=x.dtype)

        def factory():
            od = out.data
            def bw(g):
                return [(x, g * od * (1.0 - od))]
            return bw

        return self._emit(out, (x,), factory)

    def tanh(self, x: Tensor) -> Tensor:
        out = Tensor(np.tanh(x.data), dtype=x.dtype)

        def factory():
            od = out.data
            def bw(g):
                return [(x, g * (1.0 - od * od))]
            return bw

        return self._emit(out, (x,), factory)

    def relu(self, x: Tensor) -> Tensor:
        out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)

        def factory():
            mask = x.data > 0
            def bw(g):
                return [(x, g * mask)]
            return bw

        return self._emit(out, (x,), factory)

    def softmax_last(self, x: Tensor) -> Tensor:
        """Softmax along the last axis, max-subtracted for stability."""
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = Tensor(e / e.sum(axis=-1, keepdims=True), dtype=x.dtype)

        def factory():
            s = out.data
            def bw(g):
                return [(x, (g - (g * s).sum(axis=-1, keepdims=True)) * s)]
            return bw

        return self._emit(out, (x,), factory)

    # ---- shape ----

    def reshape(self, x: Tensor, shape) -> Tensor:
        out = Tensor(x.data.reshape(shape), dtype=x.dtype)

        def factory():
            orig = x.dims
            def bw(g):
                return [(x, g.reshape(orig))]
            return bw

        return self._emit(out, (x,), factory)

    def transpose(self, x: Tensor, axes) -> Tensor:
        out = Tensor(np.transpose(x.data, axes), dtype=x.dtype)

        def factory():
            inv = np.argsort(axes)
            def bw(g):
                return [(x, np.transpose(g, inv))]
            return bw

        return self._emit(out, (x,), factory)

    def slice0(self, x: Tensor, start: int, stop: int) -> Tensor:
        out = Tensor(x.data[start:stop], dtype=x.dtype)

        def factory():
            def bw(g):
                gx = np.zeros_like(x.data)
                gx[start:stop] = g
                return [(x, gx)]
            return bw

        return self._emit(out, (x,), factory)

    def concat(self, tensors, axis=0) -> Tensor:
        tensors = list(tensors)
        if not tensors:
            raise DimMismatch("concat of zero tensors")
        ref = tensors[0].dims
        for t in tensors[1:]:
            a, b = list(ref), list(t.dims)
            if len(a) != len(b):
                raise DimMismatch(f"concat rank: {ref} vs {t.dims}")
            a[axis] = b[axis] = 0
            if a != b:
                raise DimMismatch(f"concat: {ref} vs {t.dims} on axis {axis}")
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                     dtype=tensors[0].dtype)

        def factory():
            sizes = [t.dims[axis] for t in tensors]
            def bw(g):
                pieces = []
                ofs = 0
                sl = [slice(None)] * g.ndim
                for t, n in zip(tensors, sizes):
                    sl[axis] = slice(ofs, ofs + n)
                    pieces.append((t, g[tuple(sl)]))
                    ofs += n
                return pieces
            return bw

        return self._emit(out, tuple(tensors), factory)

    # ---- linear algebra ----

    def matmul(self, a: Tensor, b: Tensor, transpose_b=False) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DimMismatch(f"matmul needs rank-2: {a.dims} @ {b.dims}")
        bk = b.dims[1] if transpose_b else b.dims[0]
        if a.dims[1] != bk:
            raise DimMismatch(f"matmul: {a.dims} @ {b.dims} (transpose_b={transpose_b})")
        bd = b.data.T if transpose_b else b.data
        out = Tensor(a.data @ bd, dtype=a.dtype)

        def factory():
            def bw(g):
                ga = g @ (b.data if transpose_b else b.data.T)
                gb = g.T @ a.data if transpose_b else a.data.T @ g
                return [(a, ga), (b, gb)]
            return bw

        return self._emit(out, (a, b), factory)

    # ---- convolution / pooling ----

    def conv3d(self, x: Tensor, kernel: Tensor, stride=1, pad=0) -> Tensor:
        """Cross-correlation of x (C_in, D, H, W) with kernel
        (C_out, C_in, kd, kh, kw). Output extent per axis is
        floor((in + 2p - k) / s) + 1."""
        if x.data.ndim != 4 or kernel.data.ndim != 5:
            raise DimMismatch(f"conv3d: x {x.dims}, kernel {kernel.dims}")
        cin, d, h, w = x.dims
        cout, kcin, kd, kh, kw = kernel.dims
        if kcin != cin:
            raise DimMismatch(f"conv3d channels: x {cin}, kernel {kcin}")
        sd, sh, sw = _triple(stride)
        pd, ph, pw = _triple(pad)
        dp, hp, wp = d + 2 * pd, h + 2 * ph, w + 2 * pw
        if dp < kd or hp < kh or wp < kw:
            raise DimMismatch(f"conv3d: padded input {(dp, hp, wp)} smaller than kernel {(kd, kh, kw)}")
        od = (dp - kd) // sd + 1
        oh = (hp - kh) // sh + 1
        ow = (wp - kw) // sw + 1

        xd = x.data
        if pd or ph or pw:
            xd = np.pad(xd, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
        # channel-major im2col: contiguous per-offset copies are much faster
        # than transposing a sliding-window view
        buf = np.empty((cin, kd, kh, kw, od, oh, ow), dtype=xd.dtype)
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    buf[:, i, j, l] = xd[:, i:i + (od - 1) * sd + 1:sd,
                                         j:j + (oh - 1) * sh + 1:sh,
                                         l:l + (ow - 1) * sw + 1:sw]
        ksize = cin * kd * kh * kw
        cols = buf.reshape(ksize, od * oh * ow)
        w2 = kernel.data.reshape(cout, ksize)
        out = Tensor((w2 @ cols).reshape(cout, od, oh, ow), dtype=x.dtype)

        def factory():
            k_needed = self._needed(kernel)
            x_needed = self._needed(x)
            saved_cols = cols if k_needed else None

            def bw(g):
                g2 = g.reshape(cout, -1)
                gk = (g2 @ saved_cols.T).reshape(kernel.dims) if k_needed else None
                gx = None
                if x_needed:
                    gcols = (w2.T @ g2).reshape(cin, kd, kh, kw, od, oh, ow)
                    gxp = np.zeros((cin, dp, hp, wp), dtype=g.dtype)
                    for i in range(kd):
                        for j in range(kh):
                            for l in range(kw):
                                gxp[:, i:i + (od - 1) * sd + 1:sd,
                                    j:j + (oh - 1) * sh + 1:sh,
                                    l:l + (ow - 1) * sw + 1:sw] += gcols[:, i, j, l]
                    gx = gxp[:, pd:pd + d, ph:ph + h, pw:pw + w] if (pd or ph or pw) else gxp
                return [(x, gx), (kernel, gk)]
            return bw

        return self._emit(out, (x, kernel), factory)

    def maxpool3d(self, x: Tensor, window, stride=None) -> Tensor:
        """Max over sliding windows of the trailing three axes. Leading axes
        (e.g. channels) are carried through. Ties route the gradient to the
        first flat index inside the window so backward is deterministic."""
        if x.data.ndim < 3:
            raise DimMismatch(f"maxpool3d needs >=3 axes, got {x.dims}")
        wd, wh, ww = _triple(window)
        sd, sh, sw = _triple(stride if stride is not None else (wd, wh, ww))
        d, h, w = x.dims[-3:]
        if d < wd or h < wh or w < ww:
            raise DimMismatch(f"maxpool3d: window {(wd, wh, ww)} exceeds extents {(d, h, w)}")
        od = (d - wd) // sd + 1
        oh = (h - wh) // sh + 1
        ow = (w - ww) // sw + 1
        lead = x.dims[:-3]

        v = np.lib.stride_tricks.sliding_window_view(x.data, (wd, wh, ww), axis=(-3, -2, -1))
        v = v[..., ::sd, ::sh, ::sw, :, :, :][..., :od, :oh, :ow, :, :, :]
        windows = v.reshape(lead + (od, oh, ow, wd * wh * ww))
        flat_idx = windows.argmax(axis=-1)
        out = Tensor(np.take_along_axis(windows, flat_idx[..., None], axis=-1)[..., 0],
                     dtype=x.dtype)

        def factory():
            def bw(g):
                # plain zeros, not zeros_like: reshape(-1) below must be a view,
                # which a non-C-contiguous layout would silently break
                gx = np.zeros(x.dims, dtype=x.data.dtype)
                ii, jj, ll = np.unravel_index(flat_idx, (wd, wh, ww))
                oi = np.arange(od)[:, None, None] * sd
                oj = np.arange(oh)[None, :, None] * sh
                ol = np.arange(ow)[None, None, :] * sw
                src_d = oi + ii
                src_h = oj + jj
                src_w = ol + ll
                # one source index per output cell; add.at handles collisions
                # between overlapping windows
                flat_src = (src_d * h + src_h) * w + src_w
                nlead = int(np.prod(lead)) if lead else 1
                cell = d * h * w
                offs = np.arange(nlead).reshape((nlead,) + (1,) * 3) * cell
                flat_all = (flat_src.reshape((nlead, od, oh, ow)) + offs).reshape(-1)
                np.add.at(gx.reshape(-1), flat_all, g.reshape(-1))
                return [(x, gx)]
            return bw

        return self._emit(out, (x,), factory)

    def pointwise_conv(self, x: Tensor, weights: Tensor) -> Tensor:
        """Per-pixel linear combination of channels: x (C, ...spatial),
        weights (C_out, C)."""
        if weights.data.ndim != 2 or x.data.ndim < 1 or x.dims[0] != weights.dims[1]:
            raise DimMismatch(f"pointwise_conv: x {x.dims}, weights {weights.dims}")
        c = x.dims[0]
        rest = x.dims[1:]
        x2 = x.data.reshape(c, -1)
        out = Tensor((weights.data @ x2).reshape((weights.dims[0],) + rest), dtype=x.dtype)

        def factory():
            def bw(g):
                g2 = g.reshape(weights.dims[0], -1)
                return [(x, (weights.data.T @ g2).reshape(x.dims)),
                        (weights, g2 @ x2.T)]
            return bw

        return self._emit(out, (x, weights), factory)

    # ---- loss ----

    def bce(self, p: Tensor, y: float) -> Tensor:
        """Binary cross-entropy of probability p against label y, with p
        clamped to [1e-7, 1-1e-7]. Elementwise; training uses it on a
        single-element tensor."""
        lo, hi = 1e-7, 1.0 - 1e-7
        pc = np.clip(p.data, lo, hi)
        out = Tensor(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)), dtype=p.dtype)

        def factory():
            inside = (p.data > lo) & (p.data < hi)
            def bw(g):
                return [(p, g * inside * (pc - y) / (pc * (1.0 - pc)))]
            return bw

        return self._emit(out, (p,), factory)


def backward(output: Tensor, tape: Tape):
    """Reverse-accumulate gradients of a scalar output over the tape.

    Returns {tensor: gradient array} for every requires_grad tensor reached;
    also deposits the gradient in tensor.grad. Parameters that never touched
    the output simply do not appear (their gradient is zero).
    """
    if output.data.size != 1:
        raise NotScalar(f"backward needs a scalar output, got dims {output.dims}")
    if id(output) not in tape._produced:
        raise DisconnectedGraph("output was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    holders: dict[int, Tensor] = {id(output): output}
    result: dict[Tensor, np.ndarray] = {}

    for rec in reversed(tape._records):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        for t, contrib in rec.backward_fn(g):
            if contrib is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + contrib
            else:
                grads[tid] = contrib
                holders[tid] = t

    for tid, g in grads.items():
        t = holders[tid]
        if t.requires_grad:
            t.grad = np.ascontiguousarray(g)
            result[t] = t.grad
    return result


@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)
    max_rel_err: float = 0.0

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.per_param.items())]
        lines.append(f"max: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def finite_diff_check(fn, params: dict, eps=1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    fn(params) must rebuild the computation and return (scalar Tensor, Tape).
    params is {name: Tensor}; every tensor should be float64 and requires_grad
    for the comparison to be meaningful. The relative error per coordinate is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).

    Coordinates that disagree at the base step are re-measured at eps/8 and
    eps/64 and the best agreement is kept. A difference stencil that straddles
    a rectifier kink or a pooling switch misreports the local derivative; a
    genuinely wrong gradient disagrees at every step size, so narrowing the
    stencil separates the two without loosening the comparison.
    """
    loss, tape = fn(params)
    grads = backward(loss, tape)

    def value():
        return float(np.asarray(fn(params)[0].data).reshape(-1)[0])

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = value()
        flat[i] = orig - step
        down = value()
        flat[i] = orig
        return (up - down) / (2.0 * step)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    report = GradCheckReport()
    worst = 0.0
    for name, p in params.items():
        g_ad = grads.get(p)
        if g_ad is None:
            g_ad = np.zeros_like(p.data)
        ad_flat = g_ad.reshape(-1)
        flat = p.data.reshape(-1)
        param_err = 0.0
        for i in range(flat.size):
            fd = central(flat, i, eps)
            err = rel(ad_flat[i], fd)
            for finer in (eps / 8.0, eps / 64.0):
                if err <= 1e-5:
                    break
                fd2 = central(flat, i, finer)
                err2 = rel(ad_flat[i], fd2)
                if err2 < err:
                    err = err2
            param_err = max(param_err, err)
        report.per_param[name] = param_err
        worst = max(worst, param_err)
    report.max_rel_err = worst
    return report
