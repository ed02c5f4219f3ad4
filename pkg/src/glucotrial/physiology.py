"""Generic stochastic patient-model interface and the model registry.

A model is a set of functions over a packed parameter vector:

* ``drift(t, x, u, d, p)`` and ``diffusion(t, x, u, d, p)`` define the
  stochastic state equation (diffusion identically zero gives a plain ODE),
* ``output(t, x, p)`` maps the state to the blood glucose concentration the
  performance metrics are computed on,
* ``measure_mean(t, x, p)`` and ``noise_variance(p)`` define the sensor:
  readings are the mean plus zero-mean Gaussian noise,
* ``steady_state(p, target_bg)`` returns the fasting state and the basal
  insulin rate (U/h) that holds the target.

All model functions use minutes as the time unit; the simulation layer owns
the seconds-to-minutes conversion. Models register under a string id so
manifests and the CLI can select them; see ``data/hovorka_distributions.yaml``
for the concrete model's parameter manifest (names, units, distributions).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hovorka


@dataclass(frozen=True)
class ModelDefinition:
    model_id: str
    state_dim: int
    wiener_dim: int
    state_names: tuple
    param_names: tuple
    drift: Callable
    diffusion: Callable
    output: Callable
    measure_mean: Callable
    noise_variance: Callable
    steady_state: Callable
    pack_params: Callable
    unpack_params: Callable


_REGISTRY: dict = {}


def register_model(defn: ModelDefinition) -> None:
    if defn.model_id in _REGISTRY:
        raise ValueError(f"model id already registered: {defn.model_id!r}")
    _REGISTRY[defn.model_id] = defn


def get_model(model_id: str) -> ModelDefinition:
    try:
        return _REGISTRY[model_id]
    except KeyError:
        raise KeyError(
            f"unknown model {model_id!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_models() -> tuple:
    return tuple(sorted(_REGISTRY))


def measure(model: ModelDefinition, t, x, p, rng: np.random.Generator) -> float:
    """One sensor reading: measurement mean plus Gaussian noise.

    With zero noise variance the reading equals the mean exactly (no draw is
    consumed), so deterministic runs stay deterministic without an RNG.
    """
    mean = model.measure_mean(t, x, p)
    var = model.noise_variance(p)
    if var == 0.0:
        return mean
    return mean + rng.normal(0.0, np.sqrt(var))


register_model(
    ModelDefinition(
        model_id="hovorka_ext",
        state_dim=hovorka.N_STATES,
        wiener_dim=hovorka.N_WIENER,
        state_names=hovorka.STATE_NAMES,
        param_names=hovorka.PARAM_NAMES,
        drift=hovorka.drift,
        diffusion=hovorka.diffusion_matrix,
        output=hovorka.output,
        measure_mean=hovorka.measure_mean,
        noise_variance=hovorka.noise_variance,
        steady_state=hovorka.steady_state,
        pack_params=hovorka.pack_params,
        unpack_params=hovorka.unpack_params,
    )
)
