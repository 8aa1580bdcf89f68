"""File formats: datasets, treatment schedules, draws, run configuration and manifests.

All text files are UTF-8 with LF line endings. Floats are written with
``repr``, which round-trips exactly through ``float()``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, DataFormatError
from .model import Dataset, Group
from .ode import ForcingSchedule, SolverConfig
from .samplers import STAT_NAMES, SamplerConfig

ENV_SEED = "ODEBAYES_SEED"
ENV_OUT = "ODEBAYES_OUT"
MANIFEST = "manifest.json"


def fmt(x) -> str:
    """Shortest decimal text that parses back to the same float."""
    return repr(float(x))


def atomic_write(path, data) -> Path:
    """Write text or bytes to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _rows(path):
    """Yield ``(line_number, fields)`` for each nonblank data row after the header."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataFormatError(path, 0, f"cannot open: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if header is None:
                header = row
                yield line, header
                continue
            if len(row) != len(header):
                raise DataFormatError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield line, row
        if header is None:
            raise DataFormatError(path, 1, "missing header")


def _float(path, line, text, what):
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(path, line, f"{what} {text!r} is not a number") from None
    if not np.isfinite(v):
        raise DataFormatError(path, line, f"{what} must be finite")
    return v


# -- datasets -------------------------------------------------------------


DATA_HEADER = ["group", "time", "channel", "value"]


def write_dataset_csv(dataset: Dataset, path) -> Path:
    names = list(dataset.channel_names) or [str(c) for c in range(dataset.n_channels)]
    lines = [",".join(DATA_HEADER)]
    for g in dataset.groups:
        for j, t in enumerate(g.times):
            for c in range(g.n_channels):
                lines.append(f"{g.group_id},{fmt(t)},{names[c]},{fmt(g.observations[c, j])}")
    return atomic_write(path, "\n".join(lines) + "\n")


def read_dataset_csv(path, treatment: Optional[dict] = None, channel_names=None) -> Dataset:
    """Parse a ``group,time,channel,value`` file.

    Every group must have one value per channel at each of its times.
    ``treatment`` maps group id to forcing schedule.
    """
    path = Path(path)
    it = _rows(path)
    _, header = next(it)
    if [h.lower() for h in header] != DATA_HEADER:
        raise DataFormatError(path, 1, f"header must be {','.join(DATA_HEADER)}")
    cells = {}
    order = []
    chans = list(channel_names or [])
    first_line = {}
    for line, (gid, t, ch, val) in it:
        if not gid:
            raise DataFormatError(path, line, "empty group id")
        tv = _float(path, line, t, "time")
        vv = _float(path, line, val, "value")
        if ch not in chans:
            if channel_names is not None:
                raise DataFormatError(path, line, f"unknown channel {ch!r}")
            chans.append(ch)
        if gid not in cells:
            cells[gid] = {}
            order.append(gid)
            first_line[gid] = line
        key = (tv, ch)
        if key in cells[gid]:
            raise DataFormatError(path, line, f"duplicate entry for group {gid}, time {t}, channel {ch}")
        cells[gid][key] = vv
    groups = []
    for gid in order:
        times = sorted({k[0] for k in cells[gid]})
        obs = np.empty((len(chans), len(times)))
        for c, ch in enumerate(chans):
            for j, t in enumerate(times):
                if (t, ch) not in cells[gid]:
                    raise DataFormatError(path, first_line[gid], f"group {gid} lacks channel {ch} at time {fmt(t)}")
                obs[c, j] = cells[gid][(t, ch)]
        forcing = (treatment or {}).get(gid)
        groups.append(Group(gid, np.array(times), obs, forcing))
    return Dataset(tuple(groups), tuple(chans))


def write_treatment_csv(schedules: dict, path) -> Path:
    """Write ``group,t_on,t_off`` rows from on/off schedules."""
    lines = ["group,t_on,t_off"]
    for gid, f in schedules.items():
        for t_on, t_off in intervals_of(f):
            lines.append(f"{gid},{fmt(t_on)},{fmt(t_off)}")
    return atomic_write(path, "\n".join(lines) + "\n")


def intervals_of(forcing: ForcingSchedule):
    """Recover ``(t_on, t_off)`` pairs from a 0/1 schedule."""
    out = []
    start = -np.inf if forcing.values[0] > 0 else None
    for k, t in enumerate(forcing.breakpoints):
        on = forcing.values[k + 1] > 0
        if on and start is None:
            start = t
        elif not on and start is not None:
            out.append((start, t))
            start = None
    if start is not None:
        out.append((start, np.inf))
    return out


def read_treatment_csv(path) -> dict:
    path = Path(path)
    it = _rows(path)
    _, header = next(it)
    if [h.lower() for h in header] != ["group", "t_on", "t_off"]:
        raise DataFormatError(path, 1, "header must be group,t_on,t_off")
    spans = {}
    for line, (gid, a, b) in it:
        t_on = _float(path, line, a, "t_on")
        t_off = _float(path, line, b, "t_off")
        if t_off <= t_on:
            raise DataFormatError(path, line, "t_off must exceed t_on")
        spans.setdefault(gid, []).append((t_on, t_off))
    out = {}
    for gid, iv in spans.items():
        try:
            out[gid] = ForcingSchedule.from_intervals(iv)
        except ValueError as exc:
            raise DataFormatError(path, 0, f"group {gid}: {exc}") from None
    return out


# -- draws ----------------------------------------------------------------


def draws_table(chains, names):
    """Rows ``chain, draw, parameters..., stats...`` for all post-warmup draws."""
    header = ["chain", "draw"] + list(names) + list(STAT_NAMES)
    rows = []
    for c in chains:
        for i in range(c.draws_constrained.shape[0]):
            stats = [c.stats[k][i] for k in STAT_NAMES]
            rows.append([c.chain, i] + list(c.draws_constrained[i]) + stats)
    return header, rows


def write_draws_csv(chains, names, path) -> Path:
    header, rows = draws_table(chains, names)
    lines = [",".join(header)]
    n_int = 2
    for r in rows:
        lines.append(",".join([str(int(v)) for v in r[:n_int]] + [fmt(v) for v in r[n_int:]]))
    return atomic_write(path, "\n".join(lines) + "\n")


def read_draws_csv(path):
    """Return ``(param_names, draws, chain_ids, stats)`` from a draws file."""
    path = Path(path)
    it = _rows(path)
    _, header = next(it)
    if header[:2] != ["chain", "draw"]:
        raise DataFormatError(path, 1, "draws header must start with chain,draw")
    stat_cols = [h for h in header[2:] if h in STAT_NAMES]
    names = header[2:len(header) - len(stat_cols)]
    rows = []
    chain_ids = []
    for line, row in it:
        chain_ids.append(int(_float(path, line, row[0], "chain")))
        rows.append([_float(path, line, v, "value") if h not in ("is_divergent",) else float(v)
                     for h, v in zip(header[2:], row[2:])])
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
    stats = {h: arr[:, len(names) + j] for j, h in enumerate(stat_cols)}
    return names, arr[:, :len(names)], np.array(chain_ids, dtype=int), stats


def write_loglik_csv(loglik, path) -> Path:
    return atomic_write(path, loglik.to_csv())


def read_loglik_csv(path):
    path = Path(path)
    it = _rows(path)
    _, header = next(it)
    if header != ["draw", "obs_index", "loglik"]:
        raise DataFormatError(path, 1, "header must be draw,obs_index,loglik")
    entries = []
    for line, (s, i, v) in it:
        entries.append((int(_float(path, line, s, "draw")), int(_float(path, line, i, "obs_index")),
                        _float(path, line, v, "loglik")))
    if not entries:
        return np.zeros((0, 0))
    n_s = max(e[0] for e in entries) + 1
    n_i = max(e[1] for e in entries) + 1
    out = np.full((n_s, n_i), np.nan)
    for s, i, v in entries:
        out[s, i] = v
    if np.isnan(out).any():
        raise DataFormatError(path, 0, "log-likelihood matrix has missing entries")
    return out


def write_labels_csv(labels, channel_names, path) -> Path:
    lines = ["obs_index,group,time,channel"]
    for i, (g, t, c) in enumerate(labels):
        name = channel_names[c] if c < len(channel_names) else str(c)
        lines.append(f"{i},{g},{fmt(t)},{name}")
    return atomic_write(path, "\n".join(lines) + "\n")


def read_labels_csv(path):
    it = _rows(path)
    next(it)
    return [(g, float(t), c) for _, (_, g, t, c) in it]


# -- run configuration -----------------------------------------------------


@dataclass
class TimeGrid:
    start: float
    stop: float
    count: int

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise ConfigError("time grid count must be a positive integer")
        if self.count > 1 and not self.stop > self.start:
            raise ConfigError("time grid stop must exceed start")
        self.count = int(self.count)

    def values(self):
        return np.linspace(self.start, self.stop, self.count)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run, read from a TOML file.

    Sections: ``[model]`` (kind, pooling, centred, priors, initial),
    ``[data]`` (path, treatment, holdout), ``[simulate]`` (n_groups,
    truth, times), ``[sampler]``, ``[solver]``, ``[predict]`` (times,
    group) and ``[output]`` (dir).
    """

    model: str = "toy"
    pooling: Optional[str] = None
    centred: bool = False
    priors: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    data: Optional[str] = None
    treatment: Optional[str] = None
    holdout: str = "none"
    n_groups: Optional[int] = None
    truth: dict = field(default_factory=dict)
    sim_times: Optional[TimeGrid] = None
    sampler: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    predict_times: Optional[TimeGrid] = None
    predict_group: Optional[str] = None
    out: str = "out"
    base_dir: str = "."

    _SECTIONS = {"model", "data", "simulate", "sampler", "solver", "predict", "output"}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        bad = set(d) - cls._SECTIONS
        if bad:
            raise ConfigError(f"unknown config sections: {sorted(bad)}")
        m = dict(d.get("model", {}))
        dat = dict(d.get("data", {}))
        sim = dict(d.get("simulate", {}))
        pred = dict(d.get("predict", {}))
        out = dict(d.get("output", {}))
        _only(m, {"kind", "pooling", "centred", "priors", "initial"}, "model")
        _only(dat, {"path", "treatment", "holdout"}, "data")
        _only(sim, {"n_groups", "truth", "times"}, "simulate")
        _only(pred, {"times", "group"}, "predict")
        _only(out, {"dir"}, "output")
        cfg = cls(
            model=str(m.get("kind", "toy")).lower(),
            pooling=m.get("pooling"),
            centred=bool(m.get("centred", False)),
            priors=dict(m.get("priors", {})),
            initial=dict(m.get("initial", {})),
            data=dat.get("path"),
            treatment=dat.get("treatment"),
            holdout=str(dat.get("holdout", "none")),
            n_groups=sim.get("n_groups"),
            truth=dict(sim.get("truth", {})),
            sim_times=_grid(sim.get("times")),
            sampler=dict(d.get("sampler", {})),
            solver=dict(d.get("solver", {})),
            predict_times=_grid(pred.get("times")),
            predict_group=pred.get("group"),
            out=str(out.get("dir", "out")),
            base_dir=str(base_dir),
        )
        cfg.sampler_config()
        cfg.solver_config()
        return cfg

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                d = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def with_overrides(self, seed=None, out=None, env=None) -> "RunConfig":
        """Apply environment variables, then command-line values (which win)."""
        env = os.environ if env is None else env
        cfg = RunConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        cfg.sampler = dict(cfg.sampler)
        if env.get(ENV_SEED):
            cfg.sampler["seed"] = _int(env[ENV_SEED], ENV_SEED)
        if env.get(ENV_OUT):
            cfg.out = env[ENV_OUT]
        if seed is not None:
            cfg.sampler["seed"] = int(seed)
        if out is not None:
            cfg.out = str(out)
        cfg.sampler_config()
        return cfg

    def resolve(self, p) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def seed(self) -> int:
        return int(self.sampler.get("seed", 0))

    def sampler_config(self) -> SamplerConfig:
        try:
            return SamplerConfig.from_dict(self.sampler)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(**self.solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver: {exc}") from None

    def model_overrides(self) -> dict:
        o = {}
        if self.priors:
            o["priors"] = self.priors
        if self.initial:
            o["initial"] = self.initial
        return o

    def to_dict(self) -> dict:
        """Canonical nested form, excluding the output location."""
        d = {
            "model": {"kind": self.model, "pooling": self.pooling, "centred": self.centred,
                      "priors": self.priors, "initial": self.initial},
            "data": {"path": self.data, "treatment": self.treatment, "holdout": self.holdout},
            "simulate": {"n_groups": self.n_groups, "truth": self.truth,
                         "times": asdict(self.sim_times) if self.sim_times else None},
            "sampler": self.sampler,
            "solver": self.solver,
            "predict": {"times": asdict(self.predict_times) if self.predict_times else None,
                        "group": self.predict_group},
        }
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _only(d, allowed, section):
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")


def _int(text, what):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{what} must be an integer") from None


def _grid(spec) -> Optional[TimeGrid]:
    if spec is None:
        return None
    if not isinstance(spec, dict) or set(spec) != {"start", "stop", "count"}:
        raise ConfigError("time grid needs start, stop and count")
    return TimeGrid(float(spec["start"]), float(spec["stop"]), spec["count"])


# -- manifest ---------------------------------------------------------------


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {"odebayes": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _manifest_digest(body: dict) -> str:
    text = json.dumps({k: v for k, v in body.items() if k != "hash"}, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out_dir, command, config: RunConfig, files, wall_time, extra=None) -> Path:
    """Record config hash, seed, versions, timing and a digest of each artifact."""
    out_dir = Path(out_dir)
    body = {
        "command": command,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "versions": versions(),
        "wall_time_s": round(float(wall_time), 3),
        "artifacts": {Path(f).name: sha256_file(f) for f in files},
    }
    if extra:
        body.update(extra)
    body["hash"] = _manifest_digest(body)
    return atomic_write(out_dir / MANIFEST, json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def verify_manifest(out_dir) -> bool:
    """True when the manifest digest and every listed artifact digest match."""
    out_dir = Path(out_dir)
    try:
        body = json.loads((out_dir / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return False
    if body.get("hash") != _manifest_digest(body):
        return False
    for name, digest in body.get("artifacts", {}).items():
        p = out_dir / name
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True
