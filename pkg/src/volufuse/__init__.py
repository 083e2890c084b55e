"""Single-view lightsheet fusion: a two-step volumetric pipeline at desk scale.

Modules: ``volcore`` (volumes, resampling, I/O), ``tiling`` (patch grids),
``neural`` (networks, autodiff glue, AdamW), ``losses``, ``metrics``,
``synthgen`` (phantom datasets), ``pipeline`` (training, fusion, ablations)
and ``cli``.
"""

from .volcore import Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["Volume", "load_volume", "save_volume", "__version__"]
