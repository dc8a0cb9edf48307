"""Parameter stores for the unfolded networks and their checkpoint format.

A store is a flat ``dict`` mapping block names to arrays. Per-layer blocks
carry a leading layer axis followed by a user axis. Initial values make
every network start exactly at its conventional counterpart: multipliers
are identities, offsets are zero, forgetting factors are 0.99 and the
step constants are ``1 / log(alpha)``.

Checkpoint layout: one UTF-8 JSON line (format tag, block names, shapes,
dtypes and a free-form ``meta`` dict), then the blocks' raw little-endian
bytes in header order. Complex blocks are stored as interleaved
``(re, im)`` float64 pairs.
"""

import json

import numpy as np
import jax.numpy as jnp

from ..beamforming import DEFAULT_ALPHA
from ..estimation import DEFAULT_BETA, default_pilots
from ..errors import SchemaError

FORMAT_TAG = "jcehb-params-1"

# blocks that hold real numbers; everything else is complex
REAL_BLOCKS = {"gamma", "T_lam", "q_lam", "T_t", "q_t", "mu", "Psi_F", "Psi_W"}


def _eye(n, lead, dtype=complex):
    return np.broadcast_to(np.eye(n, dtype=dtype), tuple(lead) + (n, n)).copy()


def init_cedun(dims, n_layers, rng, gamma=DEFAULT_BETA):
    """CEDUN store with identity multipliers and the default pilots
    (user-orthogonal when ``K * N_t_rf <= n_layers``).

    The number of layers equals the pilot length: one pilot column is
    consumed per layer.
    """
    K, ntr, nrr = dims.K, dims.Nt_rf, dims.Nr_rf
    lead = (n_layers, K)
    X = default_pilots(rng, K, ntr, n_layers, dims.P)
    return {
        "pilots": X,
        "T_g": _eye(ntr, lead), "q_g": np.zeros(lead + (ntr, 1), complex),
        "T_v": _eye(ntr, lead), "q_v": np.zeros(lead + (ntr, 1), complex),
        "T_p": _eye(ntr, lead), "q_p": np.zeros(lead + (ntr, ntr), complex),
        "T_w": _eye(ntr, lead), "q_w": np.zeros(lead + (ntr, nrr), complex),
        "gamma": np.full(lead, float(gamma)),
    }


def random_phases(dims, rng, shared_tx_phases=True):
    """Uniform analog phases; transmit phases are one matrix shared by all
    users unless ``shared_tx_phases`` is False."""
    f_shape = (dims.Nt, dims.Nt_rf) if shared_tx_phases else (dims.K, dims.Nt, dims.Nt_rf)
    phi_F = rng.uniform(-np.pi, np.pi, f_shape)
    phi_W = rng.uniform(-np.pi, np.pi, (dims.K, dims.Nr, dims.Nr_rf))
    return phi_F, phi_W


def init_digital(dims, n_layers, alpha=DEFAULT_ALPHA):
    K, ntr, nrr, ns = dims.K, dims.Nt_rf, dims.Nr_rf, dims.Ns
    lead = (n_layers, K)
    return {
        "T_w": _eye(nrr, lead), "Q_w": np.zeros(lead + (nrr, ns), complex),
        "T_lam": _eye(ns, lead, float), "q_lam": np.zeros(lead + (ns,)),
        "T_f": _eye(ntr, lead), "q_f": np.zeros(lead + (ntr, ns), complex),
        "B_f": _eye(ntr, lead), "D_f": np.zeros(lead + (ntr, ntr), complex),
        "T_t": _eye(ns, lead, float), "q_t": np.zeros(lead + (ns,)),
        "mu": np.full(lead, 1.0 / np.log(alpha)),
    }


def init_hbdun(dims, n_layers, rng, shared_tx_phases=True, alpha=DEFAULT_ALPHA):
    """HBDUN store: random analog phases plus identity digital layers."""
    phi_F, phi_W = random_phases(dims, rng, shared_tx_phases)
    return {"Psi_F": phi_F, "Psi_W": phi_W, **init_digital(dims, n_layers, alpha)}


ANALOG_KEYS = ("Psi_F", "Psi_W")


def split_analog(params):
    """``(analog, digital)`` sub-stores of an HBDUN or black-box store."""
    analog = {k: params[k] for k in ANALOG_KEYS}
    rest = {k: v for k, v in params.items() if k not in ANALOG_KEYS}
    return analog, rest


def default_blackbox_widths(dims, hidden=(64, 64)):
    n_eq = 2 * dims.Nr_rf * dims.Nt_rf
    n_out = dims.K * 2 * (dims.Nt_rf * dims.Ns + dims.Nr_rf * dims.Ns)
    return (n_eq,) + tuple(hidden) + (n_eq,), (dims.K * n_eq,) + tuple(hidden) + (n_out,)


def init_blackbox(dims, rng, ce_widths=None, bf_widths=None, shared_tx_phases=True):
    """Two fully connected stacks with He-scaled Gaussian weights.

    Weight blocks are named ``ce.W<i>``/``ce.b<i>`` and ``bf.W<i>``/``bf.b<i>``
    and act on row vectors (``x @ W + b``).
    """
    d_ce, d_bf = default_blackbox_widths(dims)
    ce_widths = tuple(ce_widths or d_ce)
    bf_widths = tuple(bf_widths or d_bf)
    if ce_widths[0] != 2 * dims.Nr_rf * dims.Nt_rf or ce_widths[-1] != ce_widths[0]:
        raise ValueError("estimation stack must map 2*Nr_rf*Nt_rf values to as many")
    if bf_widths[0] != dims.K * ce_widths[-1] or bf_widths[-1] != d_bf[-1]:
        raise ValueError(f"beamforming stack must map {dims.K * ce_widths[-1]} to {d_bf[-1]} values")
    phi_F, phi_W = random_phases(dims, rng, shared_tx_phases)
    p = {"Psi_F": phi_F, "Psi_W": phi_W}
    for name, widths in (("ce", ce_widths), ("bf", bf_widths)):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"{name}.W{i}"] = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
            p[f"{name}.b{i}"] = np.zeros(b)
    return p


def blackbox_widths(params, name):
    n = sum(1 for k in params if k.startswith(f"{name}.W"))
    ws = [params[f"{name}.W{i}"] for i in range(n)]
    return tuple([ws[0].shape[0]] + [w.shape[1] for w in ws])


def is_real_block(name):
    return name in REAL_BLOCKS or name.startswith(("ce.", "bf."))


def to_jax(params):
    return {k: jnp.asarray(v) for k, v in params.items()}


def to_numpy(params):
    return {k: np.array(v) for k, v in params.items()}


def n_real_parameters(params):
    return sum(np.size(v) * (1 if np.isrealobj(v) else 2) for v in params.values())


# -- checkpoints ---------------------------------------------------------------

def flatten_stores(stores):
    """``{"cedun": {...}, "hbdun": {...}}`` -> ``{"cedun/T_g": ...}``."""
    return {f"{s}/{k}": v for s, store in stores.items() for k, v in store.items()}


def unflatten_stores(flat):
    out = {}
    for key, v in flat.items():
        s, _, k = key.partition("/")
        out.setdefault(s, {})[k] = v
    return out


def save_params(path, stores, meta=None):
    """Write ``{store_name: {block: array}}`` plus metadata to ``path``."""
    flat = flatten_stores(stores)
    blocks = []
    payload = []
    for name, v in flat.items():
        a = np.asarray(v)
        dt = "complex128" if np.iscomplexobj(a) else "float64"
        blocks.append({"name": name, "shape": list(a.shape), "dtype": dt})
        payload.append(np.ascontiguousarray(a, dtype="<c16" if dt == "complex128" else "<f8").tobytes())
    header = {"format": FORMAT_TAG, "blocks": blocks, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for chunk in payload:
            fh.write(chunk)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(stores, meta)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        data = fh.read()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise SchemaError(f"{path}: header is not JSON") from exc
    if header.get("format") != FORMAT_TAG:
        raise SchemaError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    flat = {}
    pos = 0
    for b in header["blocks"]:
        dt = np.dtype("<c16" if b["dtype"] == "complex128" else "<f8")
        n = int(np.prod(b["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(data):
            raise SchemaError(f"{path}: truncated data for block {b['name']}")
        flat[b["name"]] = np.frombuffer(data[pos:pos + n], dtype=dt).reshape(b["shape"]).astype(dt.newbyteorder("="))
        pos += n
    if pos != len(data):
        raise SchemaError(f"{path}: {len(data) - pos} trailing bytes")
    return unflatten_stores(flat), header["meta"]
