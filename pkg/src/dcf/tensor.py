"""Dense float64 tensors with reverse-mode gradients recorded on a tape.

Values are plain numpy arrays in row-major order; network activations use the
(batch, channels, height, width) layout throughout. Gradients are computed by
replaying a :class:`Tape` in exact reverse order of the forward pass.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = ["Tensor", "Tape", "TapeError", "active_tape", "finite_diff_check"]

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The tape currently recording on this thread, or None (eval mode)."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of forward operations, replayed backwards for gradients.

    A tape may record across several ``with tape:`` blocks (the training loop
    interleaves generator and discriminator passes), but ``backward`` may run
    only once per tape unless ``reset`` is called.
    """

    def __init__(self):
        self._backs = []
        self._spent = False

    def record(self, back_fn) -> None:
        self._backs.append(back_fn)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self._backs)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss)=1 and propagate through every recorded op."""
        if self._spent:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for back in reversed(self._backs):
            back()

    def reset(self) -> None:
        self._backs.clear()
        self._spent = False


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of the value with no gradient history."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise arithmetic (numpy broadcasting; grads are un-broadcast) --

    def __add__(self, other):
        return _ew_add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _ew_add(self, _ew_scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return _ew_add(_as_tensor(other), _ew_scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _ew_scale(self, float(other))
        return _ew_mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _ew_scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def make_op(out_data: np.ndarray, inputs, back_fn) -> Tensor:
    """Wrap an op result; record back_fn if a tape is active and grads flow.

    back_fn(grad_out) must return one gradient array (or None) per input, in
    order. Shared helper for every operator in the package.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def back():
            g = out.grad
            if g is None:
                return
            grads = back_fn(g)
            for t, gi in zip(inputs, grads):
                if gi is not None and t.requires_grad:
                    t.accumulate_grad(gi)
        tape.record(back)
    return out


def _ew_add(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _ew_mul(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _ew_scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def finite_diff_check(f, inputs, h: float = 1e-5, max_entries: int | None = None, rng=None) -> float:
    """Max relative error between tape gradients of f and central differences.

    f is called as f(*inputs) and must return a scalar Tensor. Each input is
    perturbed elementwise by +-h (all entries, or `max_entries` sampled
    coordinates per input when set). The error metric per element is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    inputs = list(inputs)
    tape = Tape()
    with tape:
        out = f(*inputs)
    tape.backward(out)
    ad_grads = []
    for t in inputs:
        ad_grads.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        t.zero_grad()

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, g_ad in zip(inputs, ad_grads):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(*inputs).data)
            flat[i] = orig - h
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g = g_ad.reshape(-1)[i]
            err = abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd))
            worst = max(worst, err)
    return worst
