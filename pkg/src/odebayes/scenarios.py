"""Synthetic study designs for the built-in models."""

from __future__ import annotations

import numpy as np

from .model import Dataset, simulate_data
from .models import TOY_TRUTH, make_model
from .ode import ForcingSchedule

TOY_TIMES = np.arange(0.0, 49.0, 4.0)
TOY_WELLS = 6

# months; three on-treatment intervals, monthly PSA
PROSTATE_TREATMENT = ((0.0, 6.0), (12.0, 18.0), (24.0, 30.0))
PROSTATE_TIMES = np.arange(0.0, 37.0, 1.0)

# population location and spread on the unconstrained scale (logit p, log others)
PROSTATE_POP_MU = {"p": -0.85, "lam": -0.22, "alpha": 0.0, "rho": 0.0, "phi": 0.0}
PROSTATE_POP_TAU = {"p": 0.3, "lam": 0.3, "alpha": 0.3, "rho": 0.3, "phi": 0.3}
PROSTATE_NOISE = {"sigma": 0.02, "sigma_prop": 0.05}


def toy_truth_vector(model=None):
    model = model or make_model("toy")
    return np.array([TOY_TRUTH[n] for n in model.space.names])


def simulate_toy(seed=0, n_wells=TOY_WELLS, times=TOY_TIMES, truth=None, model=None) -> Dataset:
    """Toy co-culture data: ``n_wells`` replicate wells sharing one parameter vector."""
    model = model or make_model("toy")
    theta = toy_truth_vector(model) if truth is None else np.asarray(truth, dtype=float)
    return simulate_data(model, theta, times, n_groups=n_wells, seed=seed,
                         group_ids=[f"w{i + 1}" for i in range(n_wells)])


def prostate_hierarchy(seed=0, n_patients=10, times=PROSTATE_TIMES, treatment=PROSTATE_TREATMENT, model=None):
    """Patients with parameters drawn from a common hierarchy.

    Returns ``(dataset, thetas)`` where ``thetas`` holds one constrained
    parameter row per patient.
    """
    model = model or make_model("prostate")
    rng = np.random.default_rng(seed)
    space = model.space
    thetas = np.empty((n_patients, space.n))
    for m in range(n_patients):
        u = np.zeros(space.n)
        for name, mu in PROSTATE_POP_MU.items():
            u[space.index(name)] = mu + PROSTATE_POP_TAU[name] * rng.standard_normal()
        for name, v in PROSTATE_NOISE.items():
            u[space.index(name)] = np.log(v)
        thetas[m] = space.constrain(u)
    forcing = ForcingSchedule.from_intervals(treatment)
    ds = simulate_data(model, thetas, times, n_groups=n_patients, seed=int(rng.integers(2**31)),
                       forcings=[forcing] * n_patients, group_ids=[f"pt{m + 1}" for m in range(n_patients)])
    return ds, thetas


def cycle_starts(forcing: ForcingSchedule):
    """Times at which treatment switches on."""
    b, v = forcing.breakpoints, forcing.values
    starts = [t for k, t in enumerate(b) if v[k + 1] > v[k]]
    if v[0] > 0:
        starts.insert(0, -np.inf)
    return starts


def split_holdout(dataset: Dataset, mode: str):
    """Split each group into fitted and held-out observations.

    ``mode`` is ``"none"``, ``"first_cycle"`` (fit on observations before the
    second treatment onset) or ``"exclude_last_cycle"`` (hold out from the last
    treatment onset on). Groups without a forcing schedule are kept whole.
    """
    mode = mode.replace("-", "_").lower()
    if mode == "none":
        return dataset, None
    if mode not in ("first_cycle", "exclude_last_cycle"):
        raise ValueError(f"unknown holdout {mode!r}")
    fit, held = [], []
    for g in dataset.groups:
        starts = cycle_starts(g.forcing) if g.forcing is not None else []
        if len(starts) < 2:
            fit.append(g)
            continue
        cut = starts[1] if mode == "first_cycle" else starts[-1]
        mask = g.times < cut
        fit.append(g.subset(mask))
        if np.any(~mask):
            held.append(g.subset(~mask))
    return Dataset(tuple(fit), dataset.channel_names), Dataset(tuple(held), dataset.channel_names)


__all__ = [
    "TOY_TIMES", "TOY_WELLS", "PROSTATE_TREATMENT", "PROSTATE_TIMES",
    "simulate_toy", "toy_truth_vector", "prostate_hierarchy", "split_holdout", "cycle_starts",
]
