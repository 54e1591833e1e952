"""Flat `key = value` run configuration with a typed schema.

One key per line, `#` starts a comment, strings are bare (no quotes).
parse and serialize are exact inverses: floats are written with repr, so a
round trip reproduces the configuration bit for bit, and the sha256 of the
canonical serialization identifies a run.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, fields

from . import __version__


class UnknownKey(Exception):
    pass


class TypeMismatch(Exception):
    pass


class MissingRequired(Exception):
    pass


_REQUIRED = object()

# config key -> (attribute, type, default); "lambda" is a Python keyword,
# hence the separate attribute name
_SCHEMA = (
    ("scenario", "scenario", str, _REQUIRED),
    ("nx", "nx", int, 256),
    ("ny", "ny", int, 512),
    ("period_x", "period_x", float, 2.0 * math.pi),
    ("height_y", "height_y", float, 4.0),
    ("stretch_ratio", "stretch_ratio", float, 40.0),
    ("eps", "eps", float, 0.0),
    ("lambda", "lam", float, 48.0),
    ("dt", "dt", float, 2e-4),
    ("t_end", "t_end", float, 0.5),
    ("fluid_on", "fluid_on", bool, True),
    ("output_every", "output_every", int, 100),
    ("trace_every", "trace_every", int, 10),
    ("window_start", "window_start", float, 0.1),
    ("eps_powers", "eps_powers", str, "6:14"),
    ("nz", "nz", int, 640),
    ("zmax", "zmax", float, 24.0),
)
_BY_KEY = {k: (attr, typ, dflt) for k, attr, typ, dflt in _SCHEMA}


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    nx: int = 256
    ny: int = 512
    period_x: float = 2.0 * math.pi
    height_y: float = 4.0
    stretch_ratio: float = 40.0
    eps: float = 0.0
    lam: float = 48.0
    dt: float = 2e-4
    t_end: float = 0.5
    fluid_on: bool = True
    output_every: int = 100
    trace_every: int = 10
    window_start: float = 0.1
    eps_powers: str = "6:14"
    nz: int = 640
    zmax: float = 24.0

    def eps_list(self):
        """Sweep schedule 2^-a .. 2^-b from the "a:b" range (inclusive)."""
        a, b = _parse_powers(self.eps_powers)
        return tuple(2.0 ** -k for k in range(a, b + 1))

    def grid(self):
        from .grids import StripGrid
        return StripGrid(self.nx, self.ny, period_x=self.period_x,
                         height_y=self.height_y,
                         stretch_ratio=self.stretch_ratio)

    def solver_config(self):
        from .flow import SolverConfig
        return SolverConfig(dt=self.dt, t_end=self.t_end, eps=self.eps,
                            lam=self.lam, fluid_on=self.fluid_on,
                            output_every=self.output_every,
                            trace_every=self.trace_every)

    def plan(self):
        from .experiments import SweepPlan
        return SweepPlan(scenario=self.scenario, eps_list=self.eps_list(),
                         t0=self.window_start, t_end=self.t_end,
                         nx=self.nx, ny=self.ny,
                         stretch_ratio=self.stretch_ratio, dt=self.dt,
                         lam=self.lam, fluid_on=self.fluid_on,
                         cadence=self.output_every * self.dt,
                         trace_every=self.trace_every, nz=self.nz,
                         zmax=self.zmax)


def _parse_powers(spec):
    try:
        a, b = (int(p) for p in spec.split(":"))
    except (ValueError, AttributeError):
        raise TypeMismatch(f"eps_powers must look like '6:14', got {spec!r}")
    if not (0 < a <= b):
        raise TypeMismatch(f"eps_powers range empty or invalid: {spec!r}")
    return a, b


def _coerce(key, typ, raw):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise TypeMismatch(f"{key}: expected true/false, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise TypeMismatch(f"{key}: expected integer, got {raw!r}")
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise TypeMismatch(f"{key}: expected number, got {raw!r}")
    return raw


def parse_config(text):
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise TypeMismatch(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _BY_KEY:
            raise UnknownKey(key)
        if key in seen:
            raise TypeMismatch(f"duplicate key {key!r} (line {lineno})")
        attr, typ, _ = _BY_KEY[key]
        seen[key] = (attr, _coerce(key, typ, raw))
    kwargs = {}
    for key, attr, typ, dflt in _SCHEMA:
        if key in seen:
            kwargs[attr] = seen[key][1]
        elif dflt is _REQUIRED:
            raise MissingRequired(key)
        else:
            kwargs[attr] = dflt
    cfg = RunConfig(**kwargs)
    _parse_powers(cfg.eps_powers)       # fail early on a malformed range
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg):
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines = []
    for key, attr, typ, _ in _SCHEMA:
        v = getattr(cfg, attr)
        if typ is bool:
            s = "true" if v else "false"
        elif typ is float:
            s = repr(float(v))
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


def write_manifest(outdir, cfg, filenames, elapsed, force=False):
    """Seal an output directory: config hash plus file checksums.

    Exactly one manifest per directory; a second write without force is an
    error.  Wall-clock time lives only here, so the data files themselves
    stay byte-identical across reruns.
    """
    path = os.path.join(outdir, MANIFEST_NAME)
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} already exists")
    doc = {
        "version": __version__,
        "config_sha256": config_hash(cfg),
        "config": serialize_config(cfg),
        "elapsed_seconds": float(elapsed),
        "threads": os.environ.get("CNS_THREADS", "1"),
        "created_unix": time.time(),
        "files": {name: _sha256_file(os.path.join(outdir, name))
                  for name in sorted(filenames)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(outdir):
    """Recompute the checksums a manifest promises.  Returns the manifest
    dict; raises ValueError naming the first mismatching file."""
    path = os.path.join(outdir, MANIFEST_NAME)
    with open(path) as fh:
        doc = json.load(fh)
    for name, digest in sorted(doc["files"].items()):
        actual = _sha256_file(os.path.join(outdir, name))
        if actual != digest:
            raise ValueError(f"checksum mismatch for {name}")
    return doc
