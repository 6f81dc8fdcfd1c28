"""Learnable dynamics model classes.

Three parameterizations, all mapping (x, u) to a generalized acceleration
and, through an integrator, to a next-state prediction:

* ``bbnn``  — one network applied to [features(q), qd, u].
* ``smm``   — networks for the mass matrix (Cholesky factor), potential,
  and a combined force F(q, qd, u); assembled through the manipulator
  equation.
* ``smm_c`` — like smm, but force split control-affinely into a
  dissipation net F(q, qd) plus an input-matrix net B(q) times u.

Joint angles enter every network as (sin, cos) pairs; translations,
velocities, and inputs enter raw.  Inputs are standardized with stats
recorded in the checkpoint.  The mass network's inner derivative dM/dq
and the potential gradient are taken with forward-mode tangents inside
the forward pass, so they remain differentiable by the training tape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ad import core as g
from .ad.mlp import MlpParams, mlp_flatten, mlp_forward, mlp_init, mlp_lift, mlp_unflatten
from .errors import ConfigError, NumericError, ShapeError
from .integrators import INTEGRATORS, substepped
from .mechanics import MechState, MechTerms, forward_dynamics

MODEL_CLASSES = ("bbnn", "smm", "smm_c")

CHECKPOINT_FORMAT_VERSION = 1

# When enabled, every structured-mass forward pass asserts the eigenvalue
# floor on the primal mass matrix (slow; meant for tests).
DEBUG_CHECK_PD = False


@dataclass(frozen=True)
class ModelConfig:
    model_class: str
    n_q: int
    m: int
    angle_mask: tuple
    hidden: tuple = (64, 64)
    bbnn_hidden: tuple = (128, 128)
    activation: str = "tanh"
    eps: float = 1e-3
    mass_mode: str = "net"        # net | identity (known-prior substitution)
    potential_mode: str = "net"   # net | zero
    bbnn_mode: str = "ct"         # ct: predict qdd | dt: predict state delta
    integrator: str = "rk4"
    substeps: int = 1
    feat_mean: tuple = None
    feat_std: tuple = None

    def __post_init__(self):
        if self.model_class not in MODEL_CLASSES:
            raise ConfigError(f"unknown model class {self.model_class!r}")
        if self.eps <= 0:
            raise ConfigError("mass-matrix floor eps must be positive")
        if len(self.angle_mask) != self.n_q:
            raise ConfigError("angle_mask length must equal n_q")
        if self.feat_std is not None and np.any(np.asarray(self.feat_std) <= 0):
            raise ConfigError("normalization std entries must be positive")

    @property
    def n_x(self):
        return 2 * self.n_q

    @property
    def k_enc(self):
        return self.n_q + sum(self.angle_mask)

    @property
    def n_feat(self):
        return self.k_enc + self.n_q + self.m

    def net_sizes(self):
        """{net name: layer sizes} for this model class."""
        nq, m, k = self.n_q, self.m, self.k_enc
        h, hb = tuple(self.hidden), tuple(self.bbnn_hidden)
        if self.model_class == "bbnn":
            return {"net": (k + nq + m, *hb, nq)}
        sizes = {}
        if self.mass_mode == "net":
            sizes["mass"] = (k, *h, nq * (nq + 1) // 2)
        if self.potential_mode == "net":
            sizes["potential"] = (k, *h, 1)
        if self.model_class == "smm":
            sizes["force"] = (k + nq + m, *h, nq)
        else:
            sizes["dissipation"] = (k + nq, *h, nq)
            sizes["input_jac"] = (k, *h, nq * m)
        return sizes

    def to_dict(self):
        d = asdict(self)
        d["angle_mask"] = list(self.angle_mask)
        d["hidden"] = list(self.hidden)
        d["bbnn_hidden"] = list(self.bbnn_hidden)
        for key in ("feat_mean", "feat_std"):
            if d[key] is not None:
                d[key] = [float(v) for v in d[key]]
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["angle_mask"] = tuple(bool(b) for b in d["angle_mask"])
        d["hidden"] = tuple(int(v) for v in d["hidden"])
        d["bbnn_hidden"] = tuple(int(v) for v in d["bbnn_hidden"])
        for key in ("feat_mean", "feat_std"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return ModelConfig(**d)


@dataclass(frozen=True)
class ModelCheckpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)


def config_for_system(spec, model_class, **overrides):
    return ModelConfig(
        model_class=model_class, n_q=spec.n_q, m=spec.m,
        angle_mask=tuple(spec.angle_mask), **overrides,
    )


def init_checkpoint(config, seed=0):
    """Fresh parameters; per-net seeds derived deterministically from `seed`."""
    params = {}
    for k, (name, sizes) in enumerate(sorted(config.net_sizes().items())):
        child = np.random.SeedSequence([int(seed), k]).generate_state(1)[0]
        params[name] = mlp_init(sizes, activation=config.activation,
                                seed=int(child))
    return ModelCheckpoint(config, params, {"seed": int(seed)})


# ---------------------------------------------------------------------------
# feature encoding and normalization

def encode_q(cfg, q):
    """[sin/cos for angle coords, raw translations], trailing dim k_enc."""
    parts = []
    for i, is_angle in enumerate(cfg.angle_mask):
        qi = q[..., i]
        if is_angle:
            parts.extend([g.sin(qi), g.cos(qi)])
        else:
            parts.append(qi)
    return g.stack(parts, axis=-1)


def encode_q_with_tangents(cfg, q):
    """Dual of encode_q(q) with one tangent direction per coordinate."""
    val_parts = []
    dot_rows = []  # per direction d: list of entries matching val_parts
    zero = q[..., 0] * 0.0
    entries = []   # (coord index, kind) per feature
    for i, is_angle in enumerate(cfg.angle_mask):
        if is_angle:
            entries.extend([(i, "sin"), (i, "cos")])
        else:
            entries.append((i, "raw"))
    sins = {i: g.sin(q[..., i]) for i, a in enumerate(cfg.angle_mask) if a}
    coss = {i: g.cos(q[..., i]) for i, a in enumerate(cfg.angle_mask) if a}
    for i, kind in entries:
        val_parts.append(
            sins[i] if kind == "sin" else coss[i] if kind == "cos" else q[..., i]
        )
    for d in range(cfg.n_q):
        row = []
        for i, kind in entries:
            if i != d:
                row.append(zero)
            elif kind == "sin":
                row.append(coss[i])
            elif kind == "cos":
                row.append(-sins[i])
            else:
                row.append(zero + 1.0)
        dot_rows.append(g.stack(row, axis=-1))
    val = g.stack(val_parts, axis=-1)
    dot = g.stack(dot_rows, axis=-1)  # (..., k_enc, n_q) -> need (n_q, ..., k_enc)
    return val, dot


def _feat_stats(cfg):
    if cfg.feat_mean is None:
        return (np.zeros(cfg.n_feat), np.ones(cfg.n_feat))
    return (np.asarray(cfg.feat_mean, dtype=float),
            np.asarray(cfg.feat_std, dtype=float))


def _norm_slices(cfg):
    k = cfg.k_enc
    return slice(0, k), slice(k, k + cfg.n_q), slice(k + cfg.n_q, cfg.n_feat)


def compute_feature_stats(cfg, states, inputs):
    """Per-dimension mean/std of [encode_q(q), qd, u] over a training set."""
    n = cfg.n_q
    enc = np.asarray(encode_q(cfg, states[..., :n]))
    feats = np.concatenate([enc, states[..., n:], inputs], axis=-1)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# ---------------------------------------------------------------------------
# model-class accelerations

def _norm(x, mean, std):
    return (x - mean) * (1.0 / std)


def _mass_from_net(cfg, net, enc_dual):
    """(M, dMdq) from the Cholesky-factor network at a Dual-encoded q."""
    nq = cfg.n_q
    raw = mlp_forward(net, enc_dual)            # Dual (..., K)
    diag = g.softplus(raw[..., :nq]) + cfg.eps
    off = raw[..., nq:] if nq > 1 else None
    zero = diag[..., 0] * 0.0
    rows = []
    pos = 0
    for i in range(nq):
        row = []
        for j in range(nq):
            if j < i:
                row.append(off[..., pos])
                pos += 1
            elif j == i:
                row.append(diag[..., i])
            else:
                row.append(zero)
        rows.append(g.stack(row, axis=-1))
    L = g.stack(rows, axis=-2)
    M = g.matmul(L, g.swapaxes(L, -1, -2))
    m_val, m_dot = M.val, M.dot
    dmdq = g.moveaxis_first_last(m_dot)
    if DEBUG_CHECK_PD:
        mp = np.asarray(g.primal_of(m_val))
        eig = np.linalg.eigvalsh(mp)
        if np.min(eig) < cfg.eps ** 2 * (1 - 1e-9):
            raise NumericError(
                f"structured mass matrix lost its eigenvalue floor: "
                f"min eig {np.min(eig):.3e} < eps^2 {cfg.eps ** 2:.3e}"
            )
    return m_val, dmdq


def _identity_mass(cfg, q):
    nq = cfg.n_q
    batch = g.shape_of(q)[:-1]
    return (np.broadcast_to(np.eye(nq), batch + (nq, nq)),
            np.zeros(batch + (nq, nq, nq)))


def model_accel(ckpt, q, qd, u):
    """Generalized acceleration under the checkpoint's model class.

    Batched and AD-generic in q, qd, u (parameters may be Vars too).
    """
    cfg = ckpt.config
    mean, std = _feat_stats(cfg)
    s_enc, s_qd, s_u = _norm_slices(cfg)

    if cfg.model_class == "bbnn":
        enc = encode_q(cfg, q)
        z = g.concat([
            _norm(enc, mean[s_enc], std[s_enc]),
            _norm(qd, mean[s_qd], std[s_qd]),
            _norm(u, mean[s_u], std[s_u]),
        ], axis=-1)
        return mlp_forward(ckpt.params["net"], z)

    enc_val, enc_dot_stacked = encode_q_with_tangents(cfg, q)
    # tangent layout: stacked is (..., k_enc, n_q); Dual wants (n_q, ..., k_enc)
    enc_parts = [enc_dot_stacked[..., d] for d in range(cfg.n_q)]
    enc_n = _norm(enc_val, mean[s_enc], std[s_enc])
    dot_n = [p * (1.0 / std[s_enc]) for p in enc_parts]
    enc_dual = g.Dual(enc_n, _stack_leading(dot_n))

    if cfg.mass_mode == "identity":
        m_val, dmdq = _identity_mass(cfg, q)
    else:
        m_val, dmdq = _mass_from_net(cfg, ckpt.params["mass"], enc_dual)

    if cfg.potential_mode == "zero":
        grad_v = qd * 0.0
    else:
        v_out = mlp_forward(ckpt.params["potential"], enc_dual)  # Dual (..., 1)
        grad_v = g.moveaxis_first_last(v_out.dot[..., 0])

    qd_n = _norm(qd, mean[s_qd], std[s_qd])
    if cfg.model_class == "smm":
        z = g.concat([enc_n, qd_n, _norm(u, mean[s_u], std[s_u])], axis=-1)
        force = mlp_forward(ckpt.params["force"], z)
    else:
        z = g.concat([enc_n, qd_n], axis=-1)
        force = mlp_forward(ckpt.params["dissipation"], z)
        b_flat = mlp_forward(ckpt.params["input_jac"], enc_n)  # (..., nq*m)
        b_rows = []
        for i in range(cfg.n_q):
            b_rows.append(g.stack(
                [b_flat[..., i * cfg.m + j] for j in range(cfg.m)], axis=-1))
        b_mat = g.stack(b_rows, axis=-2)
        force = force + g.matmul(b_mat, g.expand_dims(u, -1))[..., 0]

    terms = MechTerms(m_val, dmdq, grad_v, force)
    return forward_dynamics(terms, qd)


def _stack_leading(parts):
    """Stack along a NEW leading axis (tangent direction axis)."""
    if any(isinstance(p, g.Var) for p in parts):
        # express as trailing stack + moveaxis back: directions are few
        stacked = g.stack(parts, axis=-1)       # (..., k, n_q)
        return _leading_from_trailing(stacked, len(parts))
    return np.stack([np.asarray(p) for p in parts], axis=0)


def _leading_from_trailing(x, ndir):
    """(..., k, d) -> (d, ..., k) for Var values (few directions)."""
    if isinstance(x, g.Var):
        v = x.value
        out = np.moveaxis(v, -1, 0)

        def back(gadj):
            return (np.moveaxis(gadj, 0, -1),)

        return x.tape._push(out, (x.idx,), back, "lead_move")
    return np.moveaxis(x, -1, 0)


# ---------------------------------------------------------------------------
# spec'd convenience surfaces

def bbnn_accel(ckpt, state, u):
    q, qd = _split_state(state)
    return model_accel(ckpt, q, qd, np.asarray(u, dtype=float))


def smm_accel(ckpt, state, u):
    q, qd = _split_state(state)
    return model_accel(ckpt, q, qd, np.asarray(u, dtype=float))


def smm_mass_matrix(ckpt, q):
    """(M, dM/dq) at q for a structured model."""
    cfg = ckpt.config
    if cfg.mass_mode == "identity":
        return _identity_mass(cfg, q)
    mean, std = _feat_stats(cfg)
    s_enc = _norm_slices(cfg)[0]
    enc_val, enc_dot = encode_q_with_tangents(cfg, q)
    enc_n = _norm(enc_val, mean[s_enc], std[s_enc])
    dot_n = [enc_dot[..., d] * (1.0 / std[s_enc]) for d in range(cfg.n_q)]
    return _mass_from_net(cfg, ckpt.params["mass"], g.Dual(enc_n, _stack_leading(dot_n)))


def smm_potential_grad(ckpt, q):
    cfg = ckpt.config
    if cfg.potential_mode == "zero":
        return q * 0.0
    mean, std = _feat_stats(cfg)
    s_enc = _norm_slices(cfg)[0]
    enc_val, enc_dot = encode_q_with_tangents(cfg, q)
    enc_n = _norm(enc_val, mean[s_enc], std[s_enc])
    dot_n = [enc_dot[..., d] * (1.0 / std[s_enc]) for d in range(cfg.n_q)]
    v_out = mlp_forward(ckpt.params["potential"], g.Dual(enc_n, _stack_leading(dot_n)))
    return g.moveaxis_first_last(v_out.dot[..., 0])


def _split_state(state):
    if isinstance(state, MechState):
        return state.q, state.qdot
    x = np.asarray(state, dtype=float)
    n = x.shape[-1] // 2
    return x[..., :n], x[..., n:]


# ---------------------------------------------------------------------------
# discrete-time maps and Jacobians

def ct_dynamics(ckpt):
    n = ckpt.config.n_q

    def xdot(x, u):
        q, qd = x[..., :n], x[..., n:]
        return g.concat([qd, model_accel(ckpt, q, qd, u)], axis=-1)

    return xdot


def dt_step_fn(ckpt, dt):
    """Batched, AD-generic one-step map f(x, u) -> x_next."""
    cfg = ckpt.config
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if cfg.model_class == "bbnn" and cfg.bbnn_mode == "dt":
        mean, std = _feat_stats(cfg)
        s_enc, s_qd, s_u = _norm_slices(cfg)

        def f_delta(x, u):
            enc = encode_q(cfg, x[..., :cfg.n_q])
            z = g.concat([
                _norm(enc, mean[s_enc], std[s_enc]),
                _norm(x[..., cfg.n_q:], mean[s_qd], std[s_qd]),
                _norm(u, mean[s_u], std[s_u]),
            ], axis=-1)
            net = ckpt.params["net"]
            delta_qd = mlp_forward(net, z)
            # delta prediction applied to velocities; positions advance by qd
            return x + g.concat([dt * x[..., cfg.n_q:], delta_qd], axis=-1)

        return f_delta
    step = substepped(INTEGRATORS[cfg.integrator], cfg.substeps)
    xdot = ct_dynamics(ckpt)

    def f(x, u):
        return step(xdot, x, u, dt)

    return f


def predict_next_state(ckpt, state, u, dt):
    """One transition under the model (zero-order hold on u)."""
    x = state.as_vector() if isinstance(state, MechState) else np.asarray(state, dtype=float)
    out = dt_step_fn(ckpt, dt)(x, np.asarray(u, dtype=float))
    out_p = np.asarray(g.primal_of(out), dtype=float)
    if not np.all(np.isfinite(out_p)):
        raise NumericError(
            f"{ckpt.config.model_class} model produced a non-finite next state"
        )
    if isinstance(state, MechState):
        return MechState.from_vector(out_p)
    return out


def dt_map_jacobians(step_fn, xs, us):
    """Exact A = df/dx, B = df/du of a batched one-step map.

    One reverse sweep per output coordinate over a shared forward tape.
    xs (..., n_x), us (..., m) -> A (..., n_x, n_x), B (..., n_x, m).
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    squeeze = xs.ndim == 1
    if squeeze:
        xs, us = xs[None, :], us[None, :]
    tape = g.Tape()
    xv = tape.var(xs, name="x")
    uv = tape.var(us, name="u")
    out = step_fn(xv, uv)
    n_x = xs.shape[-1]
    a_rows, b_rows = [], []
    for j in range(n_x):
        seed = np.zeros(xs.shape[:-1] + (n_x,))
        seed[..., j] = 1.0
        adj = tape.backward(out, seed=seed)
        a_rows.append(adj.get(xv.idx, np.zeros_like(xs)))
        b_rows.append(adj.get(uv.idx, np.zeros_like(us)))
    a = np.stack(a_rows, axis=-2)
    b = np.stack(b_rows, axis=-2)
    if squeeze:
        a, b = a[0], b[0]
    return a, b


def model_jacobians(ckpt, state, u, dt):
    """(A, B) of the model's one-step map at one state or a batch."""
    x = state.as_vector() if isinstance(state, MechState) else np.asarray(state, dtype=float)
    return dt_map_jacobians(dt_step_fn(ckpt, dt), x, np.asarray(u, dtype=float))


# ---------------------------------------------------------------------------
# checkpoint (de)serialization: single JSON document, bit-exact round trip

def checkpoint_to_dict(ckpt):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "params": {name: [float(v) for v in mlp_flatten(p)]
                   for name, p in sorted(ckpt.params.items())},
        "metadata": ckpt.metadata,
    }


def checkpoint_from_dict(d):
    if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format version {d.get('format_version')!r}"
        )
    cfg = ModelConfig.from_dict(d["config"])
    sizes = cfg.net_sizes()
    if set(sizes) != set(d["params"]):
        raise ShapeError(
            f"checkpoint nets {sorted(d['params'])} do not match "
            f"architecture {sorted(sizes)}"
        )
    params = {}
    for name, flat in d["params"].items():
        expect = sum((a + 1) * b for a, b in zip(sizes[name][:-1], sizes[name][1:]))
        if len(flat) != expect:
            raise ShapeError(
                f"net {name!r} has {len(flat)} parameters, expected {expect}"
            )
        params[name] = mlp_unflatten(sizes[name], cfg.activation,
                                     np.asarray(flat, dtype=float))
    return ModelCheckpoint(cfg, params, dict(d.get("metadata", {})))


def _jsonable(o):
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)} in checkpoint metadata")


def save_checkpoint(ckpt, path):
    with open(path, "w") as fh:
        json.dump(checkpoint_to_dict(ckpt), fh, indent=None, sort_keys=True,
                  default=_jsonable)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))


def lift_params(ckpt, tape):
    """Checkpoint whose parameter arrays are Vars on `tape`; also returns
    the flat list of leaf Vars for gradient extraction."""
    lifted, leaves = {}, []
    for name in sorted(ckpt.params):
        lp, lv = mlp_lift(ckpt.params[name], tape)
        lifted[name] = lp
        leaves.extend(lv)
    return replace(ckpt, params=lifted), leaves
