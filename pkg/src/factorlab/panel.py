"""Market panel: the (time, asset, field) tensor, CSV ingestion, synthesis and
the forward-return prediction target.

Missing cells are NaN everywhere. Every valid value is finite, so NaN is never
ambiguous with data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CSVFormatError, DataError

RAW_FIELDS = ("open", "high", "low", "close", "volume", "amount", "vwap")
ALL_FIELDS = RAW_FIELDS + ("returns",)
PRICE_FIELDS = ("open", "high", "low", "close", "vwap")
CSV_HEADER = ("timestamp", "asset") + RAW_FIELDS

BAR_SECONDS = 600
BARS_PER_DAY = 24
# 2024-01-02 01:30:00 UTC
SYNTH_EPOCH = 1704159000


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SignalMatrix:
    """Per (time, asset) values with NaN as the missing marker."""

    values: np.ndarray
    timestamps: np.ndarray
    assets: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("signal values must be 2-dimensional (time, asset)")
        if self.values.shape != (len(self.timestamps), len(self.assets)):
            raise ValueError(
                f"signal shape {self.values.shape} does not match axes "
                f"({len(self.timestamps)}, {len(self.assets)})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "SignalMatrix":
        return SignalMatrix(values, self.timestamps, self.assets)

    def first_assets(self, n: int) -> "SignalMatrix":
        return SignalMatrix(self.values[:, :n], self.timestamps, self.assets[:n])


@dataclass(frozen=True, eq=False)
class Panel:
    """Dense market tensor indexed (time, asset, field).

    Immutable after construction; safe to share between workers.
    """

    timestamps: np.ndarray
    assets: tuple[str, ...]
    fields: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "timestamps", _freeze(ts))
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "fields", tuple(self.fields))
        self.validate()

    @property
    def n_bars(self) -> int:
        return len(self.timestamps)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def has_field(self, name: str) -> bool:
        return name in self.fields

    def field(self, name: str) -> np.ndarray:
        """Read-only (time, asset) view of one field."""
        try:
            j = self.fields.index(name)
        except ValueError:
            raise KeyError(f"field {name!r} not in panel (has {', '.join(self.fields)})") from None
        return self.values[:, :, j]

    def first_assets(self, n: int) -> "Panel":
        """Sub-panel restricted to the first ``n`` assets by index."""
        if not 1 <= n <= self.n_assets:
            raise ValueError(f"asset count {n} outside 1..{self.n_assets}")
        if n == self.n_assets:
            return self
        return Panel(self.timestamps, self.assets[:n], self.fields, self.values[:, :n, :].copy())

    def validate(self) -> None:
        ts, vals = self.timestamps, self.values
        if vals.ndim != 3 or vals.shape != (len(ts), len(self.assets), len(self.fields)):
            raise DataError(
                f"values shape {vals.shape} does not match axes "
                f"({len(ts)}, {len(self.assets)}, {len(self.fields)})"
            )
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise DataError("timestamps must be strictly increasing")
        if len(set(self.assets)) != len(self.assets):
            raise DataError("duplicate asset identifiers")
        unknown = set(self.fields) - set(ALL_FIELDS)
        if unknown:
            raise DataError(f"unknown fields: {sorted(unknown)}")
        if np.isinf(vals).any():
            raise DataError("panel values must be finite or missing")
        for name in self.fields:
            col = vals[:, :, self.fields.index(name)]
            present = col[~np.isnan(col)]
            if name in PRICE_FIELDS and (present <= 0).any():
                raise DataError(f"non-positive {name} price")
            if name in ("volume", "amount") and (present < 0).any():
                raise DataError(f"negative {name}")


def _derive_returns(raw: np.ndarray) -> np.ndarray:
    close = raw[:, :, RAW_FIELDS.index("close")]
    ret = np.full_like(close, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        ret[1:] = close[1:] / close[:-1] - 1.0
    return ret


def _assemble(timestamps, assets, raw: np.ndarray) -> Panel:
    values = np.concatenate([raw, _derive_returns(raw)[:, :, None]], axis=2)
    return Panel(np.asarray(timestamps, dtype=np.int64), tuple(assets), ALL_FIELDS, values)


def load_csv(path: str | Path) -> Panel:
    """Read bar data in the ``timestamp,asset,open,...,vwap`` layout.

    Absent (timestamp, asset) rows become missing cells. An empty value marks
    that single field missing.
    """
    rows: dict[tuple[int, str], list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CSVFormatError("empty file", 1)
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise CSVFormatError(f"expected header {','.join(CSV_HEADER)}", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_HEADER):
                raise CSVFormatError(f"expected {len(CSV_HEADER)} columns, got {len(rec)}", lineno)
            try:
                ts = int(rec[0])
            except ValueError:
                raise CSVFormatError(f"bad timestamp {rec[0]!r}", lineno) from None
            asset = rec[1].strip()
            if not asset:
                raise CSVFormatError("empty asset identifier", lineno)
            vals = []
            for name, text in zip(RAW_FIELDS, rec[2:]):
                text = text.strip()
                if text == "":
                    vals.append(math.nan)
                    continue
                try:
                    v = float(text)
                except ValueError:
                    raise CSVFormatError(f"bad number {text!r} in {name}", lineno) from None
                if not math.isfinite(v):
                    raise CSVFormatError(f"non-finite {name}", lineno)
                if name in PRICE_FIELDS and v <= 0:
                    raise DataError(f"line {lineno}: non-positive {name} price {v}")
                if name in ("volume", "amount") and v < 0:
                    raise DataError(f"line {lineno}: negative {name} {v}")
                vals.append(v)
            key = (ts, asset)
            if key in rows:
                raise DataError(f"line {lineno}: duplicate row for timestamp {ts}, asset {asset}")
            rows[key] = vals

    timestamps = sorted({k[0] for k in rows})
    assets: list[str] = []
    seen = set()
    for _, a in rows:
        if a not in seen:
            seen.add(a)
            assets.append(a)
    t_index = {t: i for i, t in enumerate(timestamps)}
    a_index = {a: i for i, a in enumerate(assets)}
    raw = np.full((len(timestamps), len(assets), len(RAW_FIELDS)), np.nan)
    for (t, a), vals in rows.items():
        raw[t_index[t], a_index[a], :] = vals
    return _assemble(timestamps, assets, raw)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def save_csv(panel: Panel, path: str | Path) -> None:
    """Write the raw fields back out; fully missing cells are omitted."""
    idx = [panel.fields.index(f) for f in RAW_FIELDS]
    raw = panel.values[:, :, idx]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, ts in enumerate(panel.timestamps):
            for j, asset in enumerate(panel.assets):
                cell = raw[i, j]
                if np.isnan(cell).all():
                    continue
                w.writerow([int(ts), asset, *(_fmt(v) for v in cell)])


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic market.

    ``planted`` maps a built-in feature name to a strength; the next bar's
    open-to-close return then loads on the cross-sectional z-score of that
    feature. Empty means a pure random walk.
    """

    n_assets: int = 50
    n_bars: int = 2000
    seed: int = 0
    base_price: float = 20.0
    vol_scale: float = 0.004
    volume_scale: float = 1e5
    planted: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_assets < 2:
            raise ValueError("n_assets must be >= 2")
        if self.n_bars < 2:
            raise ValueError("n_bars must be >= 2")
        if not self.vol_scale > 0:
            raise ValueError("vol_scale must be > 0")
        if not self.base_price > 0 or not self.volume_scale > 0:
            raise ValueError("base_price and volume_scale must be > 0")
        unknown = set(self.planted) - set(PLANTED_FEATURES)
        if unknown:
            raise ValueError(f"unknown planted features {sorted(unknown)}; choose from {sorted(PLANTED_FEATURES)}")


def _feat_vwap_reversal(o, h, l, c, v, vw):
    return -(c - vw) / vw


def _feat_range_position(o, h, l, c, v, vw):
    return -(c - l) / (h - l)


def _feat_volume_shock(o, h, l, c, v, vw):
    return np.log(v)


def _feat_momentum(o, h, l, c, v, vw):
    return c / o - 1.0


PLANTED_FEATURES = {
    "vwap_reversal": _feat_vwap_reversal,
    "range_position": _feat_range_position,
    "volume_shock": _feat_volume_shock,
    "momentum": _feat_momentum,
}


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def synth_timestamps(n_bars: int) -> np.ndarray:
    bar = np.arange(n_bars, dtype=np.int64)
    return SYNTH_EPOCH + (bar // BARS_PER_DAY) * 86400 + (bar % BARS_PER_DAY) * BAR_SECONDS


def synth_panel(config: SynthConfig) -> Panel:
    """Deterministic synthetic panel: geometric random walk closes, open at the
    previous close, high/low bracketing the body, log-normal volume and
    vwap = amount / volume inside the bar range."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    T, M = cfg.n_bars, cfg.n_assets
    sigma = cfg.vol_scale * np.exp(rng.normal(0.0, 0.25, M))
    start = cfg.base_price * np.exp(rng.normal(0.0, 0.5, M))
    loadings = [(PLANTED_FEATURES[k], float(s)) for k, s in sorted(cfg.planted.items())]
    noise_scale = math.sqrt(max(1.0 - sum(s * s for _, s in loadings), 0.05))

    o = np.empty((T, M))
    h = np.empty((T, M))
    l = np.empty((T, M))
    c = np.empty((T, M))
    v = np.empty((T, M))
    vw = np.empty((T, M))
    prev_close = start
    drift = np.zeros(M)
    for t in range(T):
        eps = rng.standard_normal(M)
        spread_hi = np.abs(rng.normal(0.0, 0.6, M)) * sigma
        spread_lo = np.abs(rng.normal(0.0, 0.6, M)) * sigma
        mix = rng.dirichlet(np.ones(4), M)
        vol = cfg.volume_scale * np.exp(rng.normal(0.0, 0.5, M))

        ot = prev_close
        ct = ot * np.exp(sigma * (drift + noise_scale * eps))
        hi = np.maximum(ot, ct) * (1.0 + spread_hi)
        lo = np.minimum(ot, ct) * (1.0 - spread_lo)
        lo = np.maximum(lo, 1e-6)
        vwap = mix[:, 0] * ot + mix[:, 1] * ct + mix[:, 2] * hi + mix[:, 3] * lo
        vwap = np.clip(vwap, lo, hi)
        o[t], h[t], l[t], c[t], v[t], vw[t] = ot, hi, lo, ct, vol, vwap
        prev_close = ct

        drift = np.zeros(M)
        for feat, strength in loadings:
            drift += strength * _zscore(feat(ot, hi, lo, ct, vol, vwap))

    amount = vw * v
    # keep vwap == amount / volume exactly as stored
    vw = amount / v
    np.clip(vw, l, h, out=vw)
    raw = np.stack([o, h, l, c, v, amount, vw], axis=2)
    assets = [f"A{j:04d}" for j in range(M)]
    return _assemble(synth_timestamps(T), assets, raw)


def forward_return(panel: Panel) -> SignalMatrix:
    """Next bar open-to-close return, aligned to the current row."""
    o = panel.field("open")
    c = panel.field("close")
    out = np.full(o.shape, np.nan)
    nxt_o, nxt_c = o[1:], c[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (nxt_c - nxt_o) / nxt_o
    r[~np.isfinite(r)] = np.nan
    out[:-1] = r
    return SignalMatrix(out, panel.timestamps, panel.assets)


def panel_from_arrays(
    timestamps: Iterable[int],
    assets: Iterable[str],
    fields: Mapping[str, np.ndarray],
) -> Panel:
    """Build a panel from per-field (time, asset) arrays; returns is derived
    from close when not supplied. Fields not given are omitted."""
    timestamps = list(timestamps)
    assets = list(assets)
    names = [f for f in ALL_FIELDS if f in fields]
    arrays = [np.asarray(fields[f], dtype=np.float64) for f in names]
    if "returns" not in fields and "close" in fields:
        c = arrays[names.index("close")]
        ret = np.full_like(c, np.nan)
        with np.errstate(invalid="ignore", divide="ignore"):
            ret[1:] = c[1:] / c[:-1] - 1.0
        names.append("returns")
        arrays.append(ret)
    values = np.stack(arrays, axis=2) if arrays else np.empty((len(timestamps), len(assets), 0))
    return Panel(np.asarray(timestamps, dtype=np.int64), tuple(assets), tuple(names), values)
