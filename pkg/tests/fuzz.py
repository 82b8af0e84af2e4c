"""Randomized model/session/episode builders shared by property tests."""

import numpy as np

from evsched import core, env


def random_model(rng, mode="box", T=None, m=None):
    m = int(m if m is not None else rng.integers(1, 4))
    T = int(T if T is not None else rng.integers(6, 17))
    dyn = core.DynamicsSpec(
        m=m, T=T,
        delta_hours=float(rng.uniform(0.05, 0.5)),
        mu_eff=rng.uniform(0.0, 1.0, size=T),
        beta_ctrl=rng.uniform(0.05, 1.0, size=T))
    cost = core.CostSpec(T=T, q=np.eye(2 * m), r_cost=0.1 * np.eye(m),
                         p_term=np.eye(2 * m))
    if mode == "box":
        space = core.default_box_space(m, e_bound=50.0, b_bound=6.6,
                                       action_bound=2.0)
    else:
        space = core.SpaceSpec(m=m, mode=core.NONNEG_SIMPLEX,
                               action_lo=-2.0, action_hi=2.0,
                               line_limit=float(rng.uniform(3.0, 10.0)),
                               per_charger_limit=float(rng.uniform(2.0, 7.0)))
    return env.ChargingModel(dyn=dyn, cost=cost, space=space)


def random_sessions(rng, m, T, density=0.6):
    """Non-overlapping random sessions, some departing inside the horizon."""
    sessions = []
    sid = 0
    for charger in range(1, m + 1):
        t = float(rng.uniform(0.2, 2.0))
        while t < T - 2 and rng.random() < density:
            dur = float(rng.uniform(1.5, max(2.0, T / 2)))
            dep = round(min(t + dur, T + float(rng.uniform(0, 3))), 3)
            arrival = round(t, 3)
            kappa = float(rng.uniform(2.0, 30.0))
            user_dep = round(max(dep + float(rng.normal(0, 2)),
                                 arrival + 0.5), 3)
            sessions.append(core.ChargingSession(
                id=f"f{sid}", arrival=arrival, departure=dep,
                energy_kwh=round(kappa, 3), charger=charger,
                user_departure=user_dep,
                user_energy_kwh=round(max(0.5, kappa * (1 + float(rng.normal(0, 0.2)))), 3)))
            t = dep + float(rng.uniform(0.3, 3.0))
            sid += 1
    return core.SessionSet(sessions=tuple(sessions), T=T)


def random_episode(rng, mode="box"):
    """(model, sessions, solar, action sequence) for one fuzzed episode."""
    model = random_model(rng, mode=mode)
    sessions = random_sessions(rng, model.m, model.T)
    solar = env.SolarModel(mean=float(rng.uniform(-3, 12)),
                           sd=float(rng.uniform(0, 0.5)))
    actions = rng.uniform(model.space.action_lo, model.space.action_hi,
                          size=(model.T, model.m))
    return model, sessions, solar, actions
