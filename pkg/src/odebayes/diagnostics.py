"""Convergence diagnostics and posterior summaries.

Chains are passed as arrays of shape ``(n_chains, n_draws)`` for a single
parameter or ``(n_chains, n_draws, n_params)`` for several.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import DegenerateChainError

DEFAULT_PROBS = (0.05, 0.5, 0.95)
ESS_CAP = 2.0  # super-efficient chains are clamped to this multiple of the draw count
RHAT_WARN = 1.01
ESS_WARN_PER_CHAIN = 100


def _as_chains(x, param=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        if param is None:
            raise ValueError("parameter index required for 3-D draws")
        x = x[:, :, param]
    if x.ndim != 2:
        raise ValueError("chains must have shape (n_chains, n_draws)")
    return x


def _check(x, min_chains=2):
    if x.shape[0] < min_chains:
        raise ValueError(f"need at least {min_chains} chains, got {x.shape[0]}")
    if x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    if not np.all(np.isfinite(x)):
        raise ValueError("draws must be finite")
    if np.any(np.ptp(x, axis=1) == 0):
        raise DegenerateChainError("a chain is constant")


def split_chains(x):
    """Split each chain into halves, dropping the middle draw for odd lengths."""
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def rank_normalize(x):
    """Normal scores of the pooled ranks (average ties), shaped like ``x``."""
    s = x.size
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (s + 0.25))


def rhat_basic(chains, param=None):
    """Potential scale reduction from within and between chain variances.

    No splitting or rank normalisation; ``sqrt(var_plus / W)`` with
    ``var_plus = (N-1)/N W + B/N``.
    """
    x = _as_chains(chains, param)
    _check(x)
    n = x.shape[1]
    means = x.mean(axis=1)
    b = n * np.var(means, ddof=1)
    w = np.mean(np.var(x, axis=1, ddof=1))
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _rhat_split(x):
    x = split_chains(x)
    if np.any(np.ptp(x, axis=1) == 0):
        return math.inf
    return rhat_basic(x)


def rhat(chains, param=None):
    """Rank-normalised split R-hat: the larger of the bulk and folded versions.

    Raises
    ------
    DegenerateChainError
        If any chain is constant.
    """
    x = _as_chains(chains, param)
    _check(x)
    z = rank_normalize(x)
    bulk = _rhat_split(z)
    # fold the z-scores, not the raw draws, so any monotone map leaves R-hat unchanged
    tail = _rhat_split(rank_normalize(np.abs(z - np.median(z))))
    return float(max(bulk, tail))


def _autocov(x, max_lag):
    """Autocovariance of each row for lags ``0..max_lag`` by direct sums (biased, 1/N)."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    out = np.empty((x.shape[0], max_lag + 1))
    for t in range(max_lag + 1):
        out[:, t] = np.einsum("ij,ij->i", xc[:, : n - t], xc[:, t:]) / n
    return out


def _ess_raw(x):
    """Multi-chain ESS with Geyer's initial monotone sequence truncation.

    Autocovariances are computed lazily in blocks of lags so that rapidly
    mixing chains stay cheap.
    """
    m, n = x.shape
    if np.any(np.ptp(x, axis=1) == 0):
        raise DegenerateChainError("a chain is constant")
    chain_var = np.var(x, axis=1, ddof=1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    xc = x - x.mean(axis=1, keepdims=True)

    cache = {}

    def rho(t):
        if t not in cache:
            acov = np.einsum("ij,ij->i", xc[:, : n - t], xc[:, t:]) / n
            cache[t] = 1.0 - (w - acov.mean()) / var_plus
        return cache[t]

    # Geyer: sum pairs rho(2k) + rho(2k+1) while positive, enforce monotone pairs
    total = 0.0
    prev = math.inf
    k = 0
    while 2 * k + 1 < n:
        pair = (1.0 if k == 0 else rho(2 * k)) + rho(2 * k + 1)
        if pair <= 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        k += 1
    tau = -1.0 + 2.0 * total
    # guard against a zero or negative estimate for antithetic chains
    tau = max(tau, 1.0 / math.log10(max(m * n, 10)))
    return m * n / tau


def ess(chains, param=None, kind="bulk"):
    """Effective sample size.

    ``kind="bulk"`` uses rank-normalised split chains; ``kind="tail"`` is the
    minimum over the indicator draws at the 5% and 95% quantiles. Results are
    clamped to ``2 * n_chains * n_draws``.

    Raises
    ------
    DegenerateChainError
        If any chain is constant.
    """
    return ess_info(chains, param, kind)[0]


def ess_info(chains, param=None, kind="bulk"):
    """Like :func:`ess` but also returns whether the value was clamped."""
    x = _as_chains(chains, param)
    _check(x, min_chains=1)
    kind = kind.lower()
    cap = ESS_CAP * x.size
    if kind == "bulk":
        val = _ess_raw(split_chains(rank_normalize(x)))
    elif kind == "tail":
        q05, q95 = quantile(x.ravel(), 0.05), quantile(x.ravel(), 0.95)
        vals = []
        for q in (q05, q95):
            ind = (x <= q).astype(float)
            ind = split_chains(ind)
            if np.any(np.ptp(ind, axis=1) == 0):
                # a half-chain entirely on one side of the quantile
                vals.append(_ess_indicator_fallback(ind))
            else:
                vals.append(_ess_raw(ind))
        val = min(vals)
    elif kind == "basic":
        val = _ess_raw(x)
    else:
        raise ValueError(f"unknown ESS kind {kind!r}")
    if val > cap:
        return float(cap), True
    return float(val), False


def _ess_indicator_fallback(ind):
    rows = ind[np.ptp(ind, axis=1) > 0]
    if rows.shape[0] == 0:
        return float("nan")
    return _ess_raw(rows) * ind.shape[0] / rows.shape[0]


def quantile(x, q):
    """Linear-interpolation quantile (Hyndman-Fan type 7)."""
    return np.quantile(np.asarray(x, dtype=float), q, method="linear")


# -- summary --------------------------------------------------------------


@dataclass
class ParamSummary:
    name: str
    mean: float
    se_mean: float
    sd: float
    quantiles: tuple
    ess_bulk: float
    ess_tail: float
    rhat: float
    ess_clamped: bool = False


@dataclass
class DiagnosticSummary:
    params: list
    probs: tuple
    n_chains: int
    n_draws: int
    n_divergent: int = 0
    n_max_depth: int = 0
    warnings: list = field(default_factory=list)
    model_name: str = ""

    def __getitem__(self, name):
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def names(self):
        return [p.name for p in self.params]

    def table(self) -> str:
        return format_table(self)

    def to_csv(self) -> str:
        return summary_csv(self)


def _fmt(v, digits=2):
    if not math.isfinite(v):
        return "NaN" if v != v else ("Inf" if v > 0 else "-Inf")
    return f"{v:.{digits}f}"


def _prob_label(p):
    return f"{100 * p:g}%"


def format_table(s: DiagnosticSummary) -> str:
    """Render the summary as a fixed-width text table with warning lines."""
    header = ["", "mean", "se_mean", "sd"] + [_prob_label(p) for p in s.probs] + ["n_eff", "Rhat"]
    rows = []
    for p in s.params:
        n_eff = "NaN" if not math.isfinite(p.ess_bulk) else str(int(round(p.ess_bulk)))
        rows.append([p.name, _fmt(p.mean), _fmt(p.se_mean), _fmt(p.sd)] + [_fmt(q) for q in p.quantiles]
                    + [n_eff, _fmt(p.rhat)])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    out = io.StringIO()
    title = f"Inference for model {s.model_name}." if s.model_name else "Inference summary."
    out.write(title + "\n")
    out.write(f"{s.n_chains} chains, each with {s.n_draws} post-warmup draws; "
              f"total post-warmup draws = {s.n_chains * s.n_draws}.\n\n")
    for r in [header] + rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.write(" ".join(cells).rstrip() + "\n")
    out.write("\nn_eff is the bulk effective sample size; Rhat is the rank-normalised split R-hat "
              "(1 at convergence).\n")
    for w in s.warnings:
        out.write(f"Warning: {w}\n")
    return out.getvalue()


def summary_csv(s: DiagnosticSummary) -> str:
    probs = s.probs
    cols = ["param", "mean", "se_mean", "sd"] + [f"q{int(round(100 * p)):02d}" for p in probs] + \
        ["ess_bulk", "ess_tail", "rhat"]
    lines = [",".join(cols)]
    for p in s.params:
        vals = [p.mean, p.se_mean, p.sd, *p.quantiles, p.ess_bulk, p.ess_tail, p.rhat]
        lines.append(",".join([p.name] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def summarize(chains, stats=None, probs=DEFAULT_PROBS, names=None, max_tree_depth=None, model_name=""):
    """Posterior summary with diagnostics.

    Parameters
    ----------
    chains : list of ChainOutput, or array ``(n_chains, n_draws, n_params)``
        Constrained post-warmup draws.
    stats : list of dict, optional
        Per-chain sampler statistics; taken from the chain outputs if omitted.
    probs : sequence of float
        Quantile levels.
    """
    if isinstance(chains, (list, tuple)) and chains and hasattr(chains[0], "draws_constrained"):
        outs = chains
        draws = np.stack([c.draws_constrained for c in outs])
        names = names or outs[0].param_names
        stats = stats if stats is not None else [c.stats for c in outs]
    else:
        draws = np.asarray(chains, dtype=float)
        if draws.ndim == 2:
            draws = draws[:, :, None]
    if draws.size == 0:
        raise ValueError("no draws to summarise")
    m, n, p = draws.shape
    names = list(names) if names is not None else [f"x[{i + 1}]" for i in range(p)]
    probs = tuple(float(q) for q in probs)
    params = []
    warnings = []
    clamped = []
    for k in range(p):
        x = draws[:, :, k]
        flat = x.ravel()
        mean = float(flat.mean())
        sd = float(flat.std(ddof=1)) if flat.size > 1 else float("nan")
        qs = tuple(float(v) for v in quantile(flat, probs))
        try:
            eb, cb = ess_info(x, kind="bulk")
            et, ct = ess_info(x, kind="tail")
            rh = rhat(x) if m >= 2 else float("nan")
        except DegenerateChainError:
            eb = et = float("nan")
            cb = ct = False
            rh = float("inf")
        except ValueError:
            eb = et = rh = float("nan")
            cb = ct = False
        se = sd / math.sqrt(eb) if eb and math.isfinite(eb) else float("nan")
        if cb or ct:
            clamped.append(names[k])
        params.append(ParamSummary(names[k], mean, se, sd, qs, eb, et, rh, cb or ct))
    n_div = 0
    n_depth = 0
    if stats is not None:
        for st in stats:
            n_div += int(np.sum(st.get("is_divergent", 0)))
            if max_tree_depth is not None and "tree_depth" in st:
                n_depth += int(np.sum(np.asarray(st["tree_depth"]) >= max_tree_depth))
    bad_rhat = [q.name for q in params if not q.rhat <= RHAT_WARN and not math.isnan(q.rhat)]
    if bad_rhat:
        warnings.append(f"R-hat above {RHAT_WARN} for {len(bad_rhat)} parameter(s): {', '.join(bad_rhat)}")
    low = [q.name for q in params if not q.ess_bulk >= ESS_WARN_PER_CHAIN * m or not q.ess_tail >= ESS_WARN_PER_CHAIN * m]
    if low:
        warnings.append(f"effective sample size below {ESS_WARN_PER_CHAIN * m} for {len(low)} parameter(s): "
                        f"{', '.join(low)}")
    if n_div > 0:
        warnings.append(f"{n_div} divergent transition(s) after warmup")
    if n_depth > 0:
        warnings.append(f"{n_depth} transition(s) hit the maximum tree depth")
    if clamped:
        warnings.append(f"effective sample size clamped at {ESS_CAP:g} x draws for: {', '.join(clamped)}")
    return DiagnosticSummary(params, probs, m, n, n_div, n_depth, warnings, model_name)
