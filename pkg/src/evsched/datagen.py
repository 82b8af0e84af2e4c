"""Parametric session-fixture generator.

Two profiles mimic the observed behavior regimes: "pre" has a pronounced
morning arrival peak with longer, larger sessions; "post" has flatter
arrival times and lighter demand. User-input errors (announced departure and
demand) are sampled around the ground truth with configurable spread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChargingSession, SessionSet


@dataclass(frozen=True)
class GeneratorLog:
    requested: int
    placed: int
    omitted: int


PROFILES = ("pre", "post")


def _sample_session(profile: str, rng: np.random.Generator, T: int):
    if profile == "pre":
        # Morning commute peak with a smaller midday wave.
        if rng.random() < 0.7:
            arrival = rng.normal(0.33 * T, 0.05 * T)
        else:
            arrival = rng.normal(0.55 * T, 0.07 * T)
        duration = rng.normal(0.22 * T, 0.05 * T)
        energy = rng.normal(20.0, 5.0)
    else:
        # Flatter arrivals, shorter stays, lighter demand.
        arrival = rng.uniform(0.05 * T, 0.85 * T)
        duration = rng.normal(0.15 * T, 0.06 * T)
        energy = rng.normal(10.0, 4.0)
    arrival = float(np.clip(arrival, 1.0, T - 6.0))
    duration = float(np.clip(duration, 3.0, T - arrival - 1.0))
    energy = float(np.clip(energy, 3.0, 40.0))
    return arrival, arrival + duration, energy


def generate_sessions(profile: str, count: int, m: int, T: int,
                      rng: np.random.Generator,
                      departure_err_sd: float = 6.0,
                      energy_err_frac: float = 0.2):
    """Draw sessions and place them on chargers, omitting a session whenever
    every charger is occupied for its span. Returns (SessionSet, GeneratorLog).

    departure_err_sd is in steps (the default is one hour at 10-minute
    steps); the announced demand error is a fraction of the true demand.
    """
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}")
    draws = [_sample_session(profile, rng, T) for _ in range(count)]
    draws.sort(key=lambda d: d[0])
    free_at = np.zeros(m)            # earliest time each charger is free
    placed = []
    omitted = 0
    for k, (arrival, departure, energy) in enumerate(draws):
        slot = int(np.argmin(free_at))
        if free_at[slot] > arrival:
            omitted += 1
            continue
        user_dep = departure + rng.normal(0.0, departure_err_sd)
        user_dep = float(np.clip(user_dep, arrival + 1.0, T + 24.0))
        user_energy = energy * (1.0 + rng.normal(0.0, energy_err_frac))
        user_energy = float(np.clip(user_energy, 0.5, 80.0))
        placed.append(ChargingSession(
            id=f"{profile}{k:03d}",
            arrival=round(arrival, 4),
            departure=round(departure, 4),
            energy_kwh=round(energy, 4),
            charger=slot + 1,
            user_departure=round(user_dep, 4),
            user_energy_kwh=round(user_energy, 4),
        ))
        free_at[slot] = departure
    sessions = SessionSet(sessions=tuple(placed), T=T)
    return sessions, GeneratorLog(requested=count, placed=len(placed),
                                  omitted=omitted)
