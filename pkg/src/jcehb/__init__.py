"""Joint channel estimation and hybrid beamforming for multi-user MIMO,
with conventional (RLS / SCA / SSCA) algorithms and their deep-unfolded
counterparts.

JAX is used as the gradient engine and runs in double precision; importing
the package switches ``jax_enable_x64`` on.
"""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403
from .channel import (  # noqa: E402,F401
    ChannelParams, SystemDims, equivalent_channel, make_sampler, received_pilot,
    sample_channel,
)
from .estimation import ls_estimate, rls_estimate  # noqa: E402,F401
from .beamforming import (  # noqa: E402,F401
    HybridBeamformers, mmse_combiner, normalize_precoder, quantize_phases, sca_digital,
    ssca_outer, stream_mse, zf_digital,
)
from .metrics import nmse, pilot_overhead, sum_rate  # noqa: E402,F401

__version__ = "0.1.0"
