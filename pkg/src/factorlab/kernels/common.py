"""Operators whose semantics are identical in both backends: elementwise math,
logic, shifts and cross-sectional scaling. Every function maps (T, M) arrays
with NaN for missing to a new (T, M) array."""

from __future__ import annotations

import numpy as np


def clean(x: np.ndarray) -> np.ndarray:
    """Replace any non-finite value with the missing marker, in place."""
    x[~np.isfinite(x)] = np.nan
    return x


def window_incomplete(x: np.ndarray, n: int) -> np.ndarray:
    """True where the trailing window of length ``n`` is not fully present:
    the first ``n - 1`` rows, and any window holding a missing value."""
    T = x.shape[0]
    bad = np.ones(x.shape, dtype=bool)
    if n > T:
        return bad
    miss = np.zeros((T + 1,) + x.shape[1:], dtype=np.int64)
    np.cumsum(np.isnan(x), axis=0, out=miss[1:])
    bad[n - 1:] = (miss[n:] - miss[:-n]) > 0
    return bad


def delay(x: np.ndarray, d: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    if d < x.shape[0]:
        out[d:] = x[: x.shape[0] - d]
    return out


def delta(x: np.ndarray, d: int) -> np.ndarray:
    return x - delay(x, d)


def _div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b
    out[b == 0] = np.nan
    return out


def _log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    out[~(x > 0)] = np.nan
    return out


def _inv(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / x
    out[x == 0] = np.nan
    return out


def _sqrt(x):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x)
    out[x < 0] = np.nan
    return out


def _signed_power(x, p):
    with np.errstate(all="ignore"):
        return np.sign(x) * np.abs(x) ** p


def _power(x, p):
    with np.errstate(all="ignore"):
        return np.power(x, p)


def _exp(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


def _compare(fn):
    def op(a, b):
        out = fn(a, b).astype(np.float64)
        out[np.isnan(a) | np.isnan(b)] = np.nan
        return out

    return op


def _logic(fn):
    def op(a, b):
        out = fn(a != 0, b != 0).astype(np.float64)
        out[np.isnan(a) | np.isnan(b)] = np.nan
        return out

    return op


def if_else(c, a, b):
    out = np.where(c != 0, a, b)
    out[np.isnan(c)] = np.nan
    return out


def scale(x):
    """Divide each row by its sum of absolute values over present assets."""
    denom = np.nansum(np.abs(x), axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / denom
    out[np.broadcast_to(denom == 0, out.shape)] = np.nan
    return out


UNARY = {
    "Neg": np.negative,
    "Abs": np.abs,
    "Log": _log,
    "Inv": _inv,
    "Sqrt": _sqrt,
    "Square": np.square,
    "Exp": _exp,
    "Tanh": np.tanh,
    "Scale": scale,
}

UNARY_PARAM = {
    "SignedPower": _signed_power,
    "Power": _power,
}

BINARY = {
    "Add": np.add,
    "Sub": np.subtract,
    "Mul": np.multiply,
    "Div": _div,
    "Greater": _compare(np.greater),
    "Less": _compare(np.less),
    "GreaterEqual": _compare(np.greater_equal),
    "LessEqual": _compare(np.less_equal),
    "Eq": _compare(np.equal),
    "Ne": _compare(np.not_equal),
    "And": _logic(np.logical_and),
    "Or": _logic(np.logical_or),
}

SHIFT = {
    "Delay": delay,
    "Delta": delta,
}
