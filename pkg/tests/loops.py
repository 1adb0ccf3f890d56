"""Closed-loop fixtures shared by controller and acceptance tests."""

import numpy as np

from ddpc.harness import Reference, offline_excitation, run_closed_loop
from ddpc.plants import make_random_stable_lti

DT = 0.1


def lti_setup(order=3, seed=0, length_s=20.0, amplitude=1.0):
    """Random stable plant plus offline data recorded from rest."""
    plant = make_random_stable_lti(order, seed=seed, dt=DT)
    u, y, x = offline_excitation(plant, length_s, amplitude, seed=seed, dt=DT)
    return plant, u, y, x


def regulate(plant, controller, x_end, target=1.0, duration_s=10.0):
    """Constant-reference run continuing from the end of the offline experiment."""
    ref = Reference("constant", value=target, unit="rad")
    return run_closed_loop(plant, controller, ref, duration_s, DT, u_box=None,
                           to_degrees=False, initial_state=x_end)


def steady_error(result, from_s):
    k = int(round(from_s / result.dt))
    return float(np.max(np.abs(result.error_series[k:])))
