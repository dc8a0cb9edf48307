"""Gradients, plain SGD and the training schedules.

Gradients come from reverse-mode differentiation through the explicit
forward passes (JAX). For a real loss and a complex block ``z = x + iy`` the
returned gradient is ``dL/dx + i dL/dy``, so ``z - eta * g`` is the usual
steepest-descent step on the real and imaginary parts. A central
finite-difference evaluator over the same loss is provided as an oracle.

Randomness: every training step draws its channels and noise from
``substream(seed, stage_id, step)``, so a run resumed from a checkpoint
continues the exact trajectory of an uninterrupted one.
"""

import csv
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
import jax
import jax.numpy as jnp

from .beamforming import DEFAULT_ALPHA, HybridBeamformers, analog_for_users
from .errors import NonFiniteLoss
from .metrics import stream_rates
from .numerics import crandn, hermitian, substream
from .unfolding.blackbox import blackbox_forward
from .unfolding.cedun import cedun_forward
from .unfolding.hbdun import hbdun_digital, hbdun_forward
from .unfolding.params import save_params, split_analog, to_jax, to_numpy

STAGE_IDS = {"stage1": 1, "stage2": 2, "separate": 3, "blackbox": 4,
             "finetune1": 5, "finetune2": 6, "online": 7, "eval": 9}


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-3
    batch_size: int = 32
    steps_stage1: int = 2000
    steps_stage2: int = 2000
    seed: int = 0
    finite_diff_step: float = 1e-5
    rho_exponent: float = 0.8
    J: int = 10
    hb_layers: int = 5
    ce_layers: int = 16
    mode: str = "learned"
    alpha: float = DEFAULT_ALPHA
    delta: float = 1e-2
    eta_stage2: float = None          # defaults to eta
    eta_analog: float = None          # defaults to eta; step size for the phases
    finetune_fraction: float = 0.25
    # step-size factor for the blocks inside the RLS recursion (T_g, q_g,
    # T_v, q_v, T_p, q_p, gamma); the loss curvature along them grows like
    # 1/delta^2
    cedun_inner_scale: float = 1e-4

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValueError("step counts must be non-negative")
        if self.mode not in ("learned", "reference"):
            raise ValueError("mode must be 'learned' or 'reference'")

    @property
    def lr2(self):
        return self.eta if self.eta_stage2 is None else self.eta_stage2

    @property
    def lr_analog(self):
        return self.eta if self.eta_analog is None else self.eta_analog


# -- losses ------------------------------------------------------------------

def loss_sum_rate(beamformers, H_eq, sigma2, P=1.0):
    """Negative sum rate, averaged over any leading batch axes."""
    r = stream_rates(beamformers.F_BB, beamformers.W_BB, H_eq, beamformers.W_RF, sigma2, P)
    return -r.sum(axis=(-2, -1)).mean()


def stage1_loss(hb, H, sigma2, n_layers=None, mode="learned", alpha=DEFAULT_ALPHA, P=1.0):
    bf, H_eq = hbdun_forward(hb, H, sigma2, n_layers, mode, alpha)
    return loss_sum_rate(bf, H_eq, sigma2, P)


def _estimate(ce, analog, H, noise, sigma2, P, delta):
    K = H.shape[-3]
    F_RF, W_RF = analog_for_users(analog["Psi_F"], analog["Psi_W"], K)
    H_eq = hermitian(W_RF) @ H @ F_RF
    H_hat = cedun_forward(ce, H_eq, H, F_RF, W_RF, sigma2, noise=noise, P=P, delta=delta)
    return F_RF, W_RF, H_eq, H_hat


def pipeline_beamformers(ce, hb, H, noise, sigma2, n_layers=None, mode="learned",
                         alpha=DEFAULT_ALPHA, P=1.0, delta=1e-2):
    """Joint pipeline: analog phases, pilot estimation, digital layers.

    Returns ``(beamformers, true H_eq, estimated H_eq)``.
    """
    analog, digital = split_analog(hb)
    F_RF, W_RF, H_eq, H_hat = _estimate(ce, analog, H, noise, sigma2, P, delta)
    F_BB, W_BB = hbdun_digital({**analog, **digital}, H_hat, F_RF, sigma2, n_layers, mode, alpha)
    return HybridBeamformers(F_RF, W_RF, F_BB, W_BB), H_eq, H_hat


def stage2_loss(trainable, analog, H, noise, sigma2, n_layers=None, mode="learned",
                alpha=DEFAULT_ALPHA, P=1.0, delta=1e-2):
    """Sum-rate loss of the full pipeline; ``trainable`` holds the
    ``cedun`` store and the ``digital`` part of the HBDUN store."""
    hb = {**analog, **trainable["digital"]}
    bf, H_eq, _ = pipeline_beamformers(trainable["cedun"], hb, H, noise, sigma2, n_layers,
                                       mode, alpha, P, delta)
    return loss_sum_rate(bf, H_eq, sigma2, P)


def nmse_loss(ce, analog, H, noise, sigma2, P=1.0, delta=1e-2):
    """Mean per-user estimation NMSE of the CEDUN."""
    _, _, H_eq, H_hat = _estimate(ce, analog, H, noise, sigma2, P, delta)
    num = (jnp.abs(H_hat - H_eq) ** 2).sum(axis=(-2, -1))
    den = (jnp.abs(H_eq) ** 2).sum(axis=(-2, -1))
    return (num / den).mean()


def analog_loss(analog, digital, H, sigma2, n_layers=None, mode="learned", alpha=DEFAULT_ALPHA, P=1.0):
    """Stage-1 loss seen as a function of the phases alone."""
    return stage1_loss({**analog, **digital}, H, sigma2, n_layers, mode, alpha, P)


def blackbox_loss(bb, H, sigma2, n_s, P=1.0):
    bf, H_eq = blackbox_forward(bb, H, n_s)
    return loss_sum_rate(bf, H_eq, sigma2, P)


# -- gradient engine -----------------------------------------------------------

def _conj_tree(tree):
    return jax.tree_util.tree_map(jnp.conj, tree)


def grad(loss_fn, params, *args, **kwargs):
    """``(loss, gradient)`` of ``loss_fn(params, *args)`` by reverse mode.

    The gradient mirrors the structure of ``params`` (NumPy arrays).
    Raises ``NonFiniteLoss`` if the loss or any gradient entry is not finite.
    """
    value, g = jax.value_and_grad(loss_fn)(params, *args, **kwargs)
    value = float(value)
    g = jax.tree_util.tree_map(np.asarray, _conj_tree(g))
    leaves = jax.tree_util.tree_leaves(g)
    if not np.isfinite(value) or not all(np.all(np.isfinite(x)) for x in leaves):
        raise NonFiniteLoss("loss or gradient is not finite")
    return value, g


def fd_gradient(loss_fn, params, *args, step=1e-5, blocks=None, **kwargs):
    """Central finite-difference gradient of ``loss_fn`` over the named
    top-level blocks of a flat store (all blocks by default).

    Costs two loss evaluations per real coordinate; meant as an oracle.
    """
    base = {k: np.array(v) for k, v in params.items()}
    names = list(base) if blocks is None else list(blocks)
    out = {}

    def at(name, value):
        p = dict(base)
        p[name] = value
        return float(loss_fn(p, *args, **kwargs))

    for name in names:
        v = base[name]
        g = np.zeros_like(v)
        parts = (1.0,) if np.isrealobj(v) else (1.0, 1j)
        for idx in np.ndindex(v.shape):
            for unit in parts:
                plus = v.copy()
                minus = v.copy()
                plus[idx] += unit * step
                minus[idx] -= unit * step
                d = (at(name, plus) - at(name, minus)) / (2 * step)
                g[idx] += unit * d
        out[name] = g
    return out


def directional_check(loss_fn, params, grads, direction, *args, step=1e-5, **kwargs):
    """``(finite-difference, reverse-mode)`` directional derivatives along
    ``direction`` (a tree shaped like ``params``)."""
    plus = jax.tree_util.tree_map(lambda p, d: p + step * d, params, direction)
    minus = jax.tree_util.tree_map(lambda p, d: p - step * d, params, direction)
    fd = (float(loss_fn(plus, *args, **kwargs)) - float(loss_fn(minus, *args, **kwargs))) / (2 * step)
    ad = sum(float(np.sum(np.real(np.conj(np.asarray(g)) * np.asarray(d))))
             for g, d in zip(jax.tree_util.tree_leaves(grads), jax.tree_util.tree_leaves(direction)))
    return fd, ad


def sgd_step(params, grads, eta, frozen=()):
    """``theta - eta * g`` for every block not listed in ``frozen``.

    ``eta`` is a scalar or a dict of per-block step sizes.
    """
    def rate(k):
        return eta[k] if isinstance(eta, dict) else eta
    return {k: (v if k in frozen or k not in grads else v - rate(k) * grads[k])
            for k, v in params.items()}


# -- jitted training steps -----------------------------------------------------

CEDUN_INNER_BLOCKS = ("T_g", "q_g", "T_v", "q_v", "T_p", "q_p", "gamma")


def _descend(params, g, eta):
    """SGD on a tree; ``eta`` is a scalar or a tree of per-block step sizes."""
    if not isinstance(eta, dict):
        return jax.tree_util.tree_map(lambda p, d: p - eta * jnp.conj(d), params, g)
    return jax.tree_util.tree_map(lambda p, d, e: p - e * jnp.conj(d), params, g, eta)


def cedun_rates(ce, eta, inner_scale):
    return {k: eta * inner_scale if k in CEDUN_INNER_BLOCKS else eta for k in ce}


def stage2_rates(trainable, cfg):
    return {"cedun": cedun_rates(trainable["cedun"], cfg.lr2, cfg.cedun_inner_scale),
            "digital": {k: cfg.lr2 for k in trainable["digital"]}}


@partial(jax.jit, static_argnames=("n_layers", "mode", "alpha", "P"))
def _stage1_step(hb, H, sigma2, eta_digital, eta_analog, n_layers, mode, alpha, P):
    loss, g = jax.value_and_grad(stage1_loss)(hb, H, sigma2, n_layers, mode, alpha, P)
    new = {k: v - (eta_analog if k in ("Psi_F", "Psi_W") else eta_digital) * jnp.conj(g[k])
           for k, v in hb.items()}
    return new, loss


@partial(jax.jit, static_argnames=("n_layers", "mode", "alpha", "P", "delta"))
def _stage2_step(trainable, analog, H, noise, sigma2, eta, n_layers, mode, alpha, P, delta):
    loss, g = jax.value_and_grad(stage2_loss)(trainable, analog, H, noise, sigma2, n_layers,
                                              mode, alpha, P, delta)
    return _descend(trainable, g, eta), loss


@partial(jax.jit, static_argnames=("P", "delta"))
def _nmse_step(ce, analog, H, noise, sigma2, eta, P, delta):
    loss, g = jax.value_and_grad(nmse_loss)(ce, analog, H, noise, sigma2, P, delta)
    return _descend(ce, g, eta), loss


@partial(jax.jit, static_argnames=("n_layers", "mode", "alpha", "P"))
def _analog_step(analog, digital, H, sigma2, eta, n_layers, mode, alpha, P):
    loss, g = jax.value_and_grad(analog_loss)(analog, digital, H, sigma2, n_layers, mode, alpha, P)
    return _descend(analog, g, eta), loss


@partial(jax.jit, static_argnames=("n_s", "P"))
def _blackbox_step(bb, H, sigma2, eta, n_s, P):
    loss, g = jax.value_and_grad(blackbox_loss)(bb, H, sigma2, n_s, P)
    return _descend(bb, g, eta), loss


# -- schedules -----------------------------------------------------------------

TRACE_COLUMNS = ("step", "stage", "loss", "mean_sum_rate")


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)      # rows (step, stage, loss, mean_sum_rate)


def _check(loss, step):
    loss = float(loss)
    if not np.isfinite(loss):
        raise NonFiniteLoss("training loss is not finite", step=step)
    return loss


def step_rng(seed, stage, step):
    return substream(seed, STAGE_IDS[stage], step)


def draw_batch(sampler, rng, batch, dims, n_pilots=None):
    """Channel batch and (optionally) unit pilot noise from one stream."""
    H = sampler(rng, batch)
    if n_pilots is None:
        return H, None
    return H, crandn(rng, H.shape[:-1] + (n_pilots,))


def train_stage1(cfg, sampler, hb_params, dims, steps=None, start_step=0, stage="stage1"):
    """Train phases and digital layers on perfect equivalent CSI."""
    steps = cfg.steps_stage1 if steps is None else steps
    hb = to_jax(hb_params)
    s2 = jnp.asarray(dims.sigma2_array)
    trace = []
    for i in range(start_step, start_step + steps):
        H, _ = draw_batch(sampler, step_rng(cfg.seed, stage, i), cfg.batch_size, dims)
        hb, loss = _stage1_step(hb, jnp.asarray(H), s2, cfg.eta, cfg.lr_analog,
                                cfg.hb_layers, cfg.mode, cfg.alpha, dims.P)
        loss = _check(loss, i)
        trace.append((i, stage, loss, -loss))
    return TrainResult(params=to_numpy(hb) if steps else hb_params, trace=trace)


def _n_pilots(ce_params):
    return np.shape(ce_params["pilots"])[-1]


def train_stage2(cfg, sampler, hb_params, ce_params, dims, steps=None, start_step=0, stage="stage2"):
    """Train the CEDUN and the digital layers end to end on the sum rate with
    the analog phases frozen. Returns ``TrainResult`` whose ``params`` is
    ``{"cedun": ..., "hbdun": ...}``; the phase blocks are the input arrays."""
    steps = cfg.steps_stage2 if steps is None else steps
    analog_np, digital = split_analog(hb_params)
    analog = to_jax(analog_np)
    trainable = {"cedun": to_jax(ce_params), "digital": to_jax(digital)}
    s2 = jnp.asarray(dims.sigma2_array)
    L = _n_pilots(ce_params)
    rates = stage2_rates(trainable, cfg)
    trace = []
    for i in range(start_step, start_step + steps):
        H, noise = draw_batch(sampler, step_rng(cfg.seed, stage, i), cfg.batch_size, dims, L)
        trainable, loss = _stage2_step(trainable, analog, jnp.asarray(H), jnp.asarray(noise), s2,
                                       rates, cfg.hb_layers, cfg.mode, cfg.alpha, dims.P, cfg.delta)
        loss = _check(loss, i)
        trace.append((i, stage, loss, -loss))
    if not steps:
        return TrainResult(params={"cedun": ce_params, "hbdun": hb_params}, trace=trace)
    hb_out = dict(analog_np)
    hb_out.update(to_numpy(trainable["digital"]))
    return TrainResult(params={"cedun": to_numpy(trainable["cedun"]), "hbdun": hb_out}, trace=trace)


def train_cedun_nmse(cfg, sampler, hb_params, ce_params, dims, steps=None, start_step=0):
    """Separate design: the CEDUN alone, trained on estimation NMSE with the
    analog phases fixed. The HBDUN store is returned untouched."""
    steps = cfg.steps_stage2 if steps is None else steps
    analog_np, _ = split_analog(hb_params)
    analog = to_jax(analog_np)
    ce = to_jax(ce_params)
    s2 = jnp.asarray(dims.sigma2_array)
    L = _n_pilots(ce_params)
    rates = cedun_rates(ce, cfg.lr2, cfg.cedun_inner_scale)
    trace = []
    for i in range(start_step, start_step + steps):
        H, noise = draw_batch(sampler, step_rng(cfg.seed, "separate", i), cfg.batch_size, dims, L)
        ce, loss = _nmse_step(ce, analog, jnp.asarray(H), jnp.asarray(noise), s2, rates,
                              dims.P, cfg.delta)
        loss = _check(loss, i)
        trace.append((i, "separate", loss, float("nan")))
    out = to_numpy(ce) if steps else ce_params
    return TrainResult(params={"cedun": out, "hbdun": hb_params}, trace=trace)


def train_blackbox(cfg, sampler, bb_params, dims, steps=None, start_step=0):
    steps = cfg.steps_stage1 if steps is None else steps
    bb = to_jax(bb_params)
    s2 = jnp.asarray(dims.sigma2_array)
    trace = []
    for i in range(start_step, start_step + steps):
        H, _ = draw_batch(sampler, step_rng(cfg.seed, "blackbox", i), cfg.batch_size, dims)
        bb, loss = _blackbox_step(bb, jnp.asarray(H), s2, cfg.eta, dims.Ns, dims.P)
        loss = _check(loss, i)
        trace.append((i, "blackbox", loss, -loss))
    return TrainResult(params=to_numpy(bb) if steps else bb_params, trace=trace)


def transfer_finetune(cfg, new_sampler, params, dims):
    """Resume both stages on samples from changed statistics with a reduced
    budget (``finetune_fraction`` of the configured step counts)."""
    s1 = int(round(cfg.steps_stage1 * cfg.finetune_fraction))
    s2 = int(round(cfg.steps_stage2 * cfg.finetune_fraction))
    r1 = train_stage1(cfg, new_sampler, params["hbdun"], dims, steps=s1, stage="finetune1")
    r2 = train_stage2(cfg, new_sampler, r1.params, params["cedun"], dims, steps=s2, stage="finetune2")
    return TrainResult(params=r2.params, trace=r1.trace + r2.trace)


# -- evaluation ----------------------------------------------------------------

@partial(jax.jit, static_argnames=("n_layers", "mode", "alpha", "P", "delta"))
def _joint_rates(ce, hb, H, noise, sigma2, n_layers, mode, alpha, P, delta):
    bf, H_eq, _ = pipeline_beamformers(ce, hb, H, noise, sigma2, n_layers, mode, alpha, P, delta)
    return stream_rates(bf.F_BB, bf.W_BB, H_eq, bf.W_RF, sigma2, P).sum(axis=(-2, -1))


@partial(jax.jit, static_argnames=("n_layers", "mode", "alpha", "P"))
def _hbdun_rates(hb, H, sigma2, n_layers, mode, alpha, P):
    bf, H_eq = hbdun_forward(hb, H, sigma2, n_layers, mode, alpha)
    return stream_rates(bf.F_BB, bf.W_BB, H_eq, bf.W_RF, sigma2, P).sum(axis=(-2, -1))


@partial(jax.jit, static_argnames=("n_s", "P"))
def _blackbox_rates(bb, H, sigma2, n_s, P):
    bf, H_eq = blackbox_forward(bb, H, n_s)
    return stream_rates(bf.F_BB, bf.W_BB, H_eq, bf.W_RF, sigma2, P).sum(axis=(-2, -1))


def evaluate_joint(params, H, noise, dims, cfg):
    """Per-sample sum rate of the joint pipeline on channels ``H`` with unit
    pilot noise ``noise``."""
    return np.asarray(_joint_rates(to_jax(params["cedun"]), to_jax(params["hbdun"]), jnp.asarray(H),
                                   jnp.asarray(noise), jnp.asarray(dims.sigma2_array), cfg.hb_layers,
                                   cfg.mode, cfg.alpha, dims.P, cfg.delta))


def evaluate_hbdun(hb_params, H, dims, cfg, n_layers=None):
    """Per-sample sum rate of the HBDUN on perfect CSI."""
    n_layers = cfg.hb_layers if n_layers is None else n_layers
    return np.asarray(_hbdun_rates(to_jax(hb_params), jnp.asarray(H), jnp.asarray(dims.sigma2_array),
                                   n_layers, cfg.mode, cfg.alpha, dims.P))


def evaluate_blackbox(bb_params, H, dims):
    return np.asarray(_blackbox_rates(to_jax(bb_params), jnp.asarray(H),
                                      jnp.asarray(dims.sigma2_array), dims.Ns, dims.P))


# -- online mixed-timescale schedule ---------------------------------------------

@dataclass(frozen=True)
class OnlineConfig:
    n_frames: int = 40
    slots_per_frame: int = 8
    slot_batch: int = 8
    full_batch: int = 8
    longterm_steps: int = 4
    eta_long: float = None       # defaults to the training config's analog step size


def channel_stream(sampler, seed, online):
    """Frames of ``(slot channel batches, full-CSI batch)`` from one stream."""
    for f in range(online.n_frames):
        rng = substream(seed, STAGE_IDS["online"], f)
        slots = [sampler(rng, online.slot_batch) for _ in range(online.slots_per_frame)]
        yield slots, sampler(rng, online.full_batch)


def online_schedule(cfg, online, stream, params, dims):
    """Short-term pipeline updates every slot, long-term phase updates at the
    end of every frame on all full-CSI samples gathered so far.

    Returns ``(params, rate_trace, trace)``: ``rate_trace[f]`` is the mean
    sum rate delivered in frame ``f`` (measured before each slot's update).
    """
    analog_np, digital = split_analog(params["hbdun"])
    analog = to_jax(analog_np)
    trainable = {"cedun": to_jax(params["cedun"]), "digital": to_jax(digital)}
    s2 = jnp.asarray(dims.sigma2_array)
    L = _n_pilots(params["cedun"])
    eta_long = cfg.lr_analog if online.eta_long is None else online.eta_long
    rates = stage2_rates(trainable, cfg)
    buffer = []
    frame_means, trace = [], []
    step = 0
    for f, (slots, full) in enumerate(stream):
        frame_rates = []
        for H in slots:
            rng = step_rng(cfg.seed, "online", step)
            noise = crandn(rng, H.shape[:-1] + (L,))
            trainable, loss = _stage2_step(trainable, analog, jnp.asarray(H), jnp.asarray(noise), s2,
                                           rates, cfg.hb_layers, cfg.mode, cfg.alpha, dims.P, cfg.delta)
            loss = _check(loss, step)
            frame_rates.append(-loss)
            trace.append((step, "online-short", loss, -loss))
            step += 1
        buffer.append(np.asarray(full))
        pool = np.concatenate(buffer)
        rng = step_rng(cfg.seed, "online", 10 ** 6 + f)
        for _ in range(online.longterm_steps):
            idx = rng.choice(len(pool), size=min(online.full_batch, len(pool)), replace=False)
            analog, loss = _analog_step(analog, trainable["digital"], jnp.asarray(pool[idx]), s2,
                                        eta_long, cfg.hb_layers, cfg.mode, cfg.alpha, dims.P)
            loss = _check(loss, step)
            trace.append((step, "online-long", loss, -loss))
        frame_means.append(float(np.mean(frame_rates)))
    hb_out = to_numpy(analog) if online.longterm_steps else dict(analog_np)
    hb_out.update(to_numpy(trainable["digital"]))
    return {"cedun": to_numpy(trainable["cedun"]), "hbdun": hb_out}, frame_means, trace


# -- persistence -----------------------------------------------------------------

def write_trace_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for step, stage, loss, rate in rows:
            w.writerow([step, stage, repr(float(loss)), repr(float(rate))])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(int(a), b, float(c), float(d)) for a, b, c, d in r]


def save_checkpoint(path, stores, cfg, step, stage, extra=None):
    meta = {"config": asdict(cfg), "step": int(step), "stage": stage, "seed": cfg.seed,
            "layers": {name: int(np.shape(next(iter(v for k, v in s.items() if k in ("gamma", "mu"))))[0])
                       for name, s in stores.items() if any(k in s for k in ("gamma", "mu"))}}
    meta.update(extra or {})
    save_params(path, stores, meta)
