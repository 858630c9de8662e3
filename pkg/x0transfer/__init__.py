"""Root package for x0transfer.

Fine-grained appearance transfer between real images in the predicted-x0 space
of a latent diffusion model.
"""

__author__ = 'x0transfer developers'
__version__ = '0.1.0'

from .schedule import Schedule, FINAL
from .transfer import TransferParams
from .pipeline import RunConfig, run_transfer, reconstruct, sweep_end_steps
