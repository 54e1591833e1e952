"""Wall-trace time series feeding the layer equations.

The outer (eps = 0) run records ten wall quantities; the layer solver
reads them back with linear interpolation in time.
"""

import numpy as np
import pandas as pd

TRACE_TAGS = (
    "m", "c",
    "dy_m", "dyy_m",
    "dy_c", "dyy_c", "dx_c",
    "dy_u1", "dy_u2", "dyy_u2",
)


class TraceSet:
    """Time series of wall traces: data[tag] has shape (nt, nx)."""

    def __init__(self, times, x, data):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or np.any(np.diff(times) <= 0.0):
            raise ValueError("trace times must be strictly increasing")
        self.times = times
        self.x = np.asarray(x, dtype=float)
        self.data = {}
        for tag, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (len(times), len(self.x)):
                raise ValueError(f"trace {tag!r} has shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"trace {tag!r} contains NaN/Inf")
            self.data[tag] = arr

    def interp(self, tag, t):
        """Linear interpolation in time; clamped at the ends."""
        tt = self.times
        arr = self.data[tag]
        if t <= tt[0]:
            return arr[0].copy()
        if t >= tt[-1]:
            return arr[-1].copy()
        j = int(np.searchsorted(tt, t, side="right")) - 1
        w = (t - tt[j]) / (tt[j + 1] - tt[j])
        return (1.0 - w) * arr[j] + w * arr[j + 1]

    def to_csv(self, path):
        nt, nx = len(self.times), len(self.x)
        frames = []
        for tag in sorted(self.data):
            frames.append(pd.DataFrame({
                "t": np.repeat(self.times, nx),
                "x_index": np.tile(np.arange(nx), nt),
                "tag": tag,
                "value": self.data[tag].ravel(),
            }))
        pd.concat(frames, ignore_index=True).to_csv(
            path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, x=None):
        df = pd.read_csv(path, float_precision="round_trip")
        times = np.unique(df["t"].to_numpy())
        nx = int(df["x_index"].max()) + 1
        if x is None:
            x = np.arange(nx, dtype=float)
        data = {}
        for tag, sub in df.groupby("tag"):
            sub = sub.sort_values(["t", "x_index"])
            data[tag] = sub["value"].to_numpy().reshape(len(times), nx)
        return cls(times, x, data)
