"""Unfolded networks and the fully connected baseline."""

from .params import (  # noqa: F401
    init_blackbox, init_cedun, init_digital, init_hbdun, load_params, save_params,
    split_analog,
)
from .cedun import cedun_estimate, cedun_forward, cedun_layer, scale_pilots  # noqa: F401
from .hbdun import (  # noqa: F401
    emulated_t_update, emulation_mu, hbdun_analog, hbdun_digital, hbdun_digital_layer,
    hbdun_forward, sca_t_update,
)
from .blackbox import blackbox_digital, blackbox_forward  # noqa: F401
