"""Recurrent temporal encoding and the sequence-alignment loss.

Teacher and student feature sequences, which may have very different
lengths and sampling rates, are each folded through a gated recurrent
unit; the final hidden state is projected into a shared latent space and
penalized by squared Euclidean distance. All gradients are analytic
(backpropagation through time) and validated against finite differences.

Gate convention used throughout::

    z = sigmoid(Wz x + Uz h_prev + bz)        update gate
    r = sigmoid(Wr x + Ur h_prev + br)        reset gate
    h~ = tanh(Wh x + Uh (r * h_prev) + bh)    candidate
    h  = (1 - z) * h_prev + z * h~

so z -> 1 hands the state over to the candidate. The literature also
contains the mirrored convention; this one is fixed here and relied on
by the tests.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, ShapeError


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruParams:
    """Weights of a single-layer GRU: per-gate input (W), recurrent (U)
    and bias blocks, all float64."""

    wz: np.ndarray
    wr: np.ndarray
    wh: np.ndarray
    uz: np.ndarray
    ur: np.ndarray
    uh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bh: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.wz.shape[1]

    def __post_init__(self):
        hd, ind = self.wz.shape
        for name in ("wz", "wr", "wh"):
            if getattr(self, name).shape != (hd, ind):
                raise ShapeError(f"{name} shape mismatch")
        for name in ("uz", "ur", "uh"):
            if getattr(self, name).shape != (hd, hd):
                raise ShapeError(f"{name} shape mismatch")
        for name in ("bz", "br", "bh"):
            if getattr(self, name).shape != (hd,):
                raise ShapeError(f"{name} shape mismatch")

    def arrays(self):
        return [self.wz, self.wr, self.wh, self.uz, self.ur, self.uh, self.bz, self.br, self.bh]

    def copy(self) -> "GruParams":
        return GruParams(*[a.copy() for a in self.arrays()])

    @staticmethod
    def zeros(input_dim: int, hidden_dim: int) -> "GruParams":
        hd, ind = hidden_dim, input_dim
        return GruParams(
            *(np.zeros((hd, ind)) for _ in range(3)),
            *(np.zeros((hd, hd)) for _ in range(3)),
            *(np.zeros(hd) for _ in range(3)),
        )


def init_gru(input_dim: int, hidden_dim: int, rng: Rng) -> GruParams:
    """Uniform(-1/sqrt(hidden), +1/sqrt(hidden)) initialization."""
    s = 1.0 / np.sqrt(hidden_dim)
    return GruParams(
        *(rng.uniform_array((hidden_dim, input_dim), -s, s) for _ in range(3)),
        *(rng.uniform_array((hidden_dim, hidden_dim), -s, s) for _ in range(3)),
        *(rng.uniform_array((hidden_dim,), -s, s) for _ in range(3)),
    )


@dataclass
class FeatureSequence:
    """T frames of L-dimensional features from one side of the pipeline."""

    frames: np.ndarray  # (T, L)
    origin: str = "student"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError("frames must be a (steps, dim) array")

    @property
    def steps(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class ProjectionParams:
    """Affine map from the hidden state into the shared latent space."""

    weight: np.ndarray  # (out_dim, hidden_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "ProjectionParams":
        return ProjectionParams(self.weight.copy(), self.bias.copy())

    @staticmethod
    def zeros(hidden_dim: int, out_dim: int) -> "ProjectionParams":
        return ProjectionParams(np.zeros((out_dim, hidden_dim)), np.zeros(out_dim))


def init_projection(hidden_dim: int, out_dim: int, rng: Rng) -> ProjectionParams:
    s = 1.0 / np.sqrt(hidden_dim)
    return ProjectionParams(
        rng.uniform_array((out_dim, hidden_dim), -s, s),
        rng.uniform_array((out_dim,), -s, s),
    )


LATENT_DIM = 768  # shared latent width for teacher/student projections
HIDDEN_DIM = 64  # desk-scale default recurrent width


def gru_step(params: GruParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One recurrence update; see the module docstring for the convention."""
    h, _ = _gru_step_cached(params, x, h_prev)
    return h


def _gru_step_cached(params, x, h_prev):
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise ShapeError(f"input shape {x.shape} != ({params.input_dim},)")
    if h_prev.shape != (params.hidden_dim,):
        raise ShapeError(f"hidden shape {h_prev.shape} != ({params.hidden_dim},)")
    z = _sigmoid(params.wz @ x + params.uz @ h_prev + params.bz)
    r = _sigmoid(params.wr @ x + params.ur @ h_prev + params.br)
    rh = r * h_prev
    cand = np.tanh(params.wh @ x + params.uh @ rh + params.bh)
    h = (1.0 - z) * h_prev + z * cand
    return h, (x, h_prev, z, r, rh, cand)


def encode_sequence(params: GruParams, seq: FeatureSequence, h0: np.ndarray = None):
    """Fold the GRU over every frame; return (final hidden, step caches).

    The caches hold the per-step gate activations needed by
    :func:`backprop_sequence`.
    """
    if seq.steps == 0:
        raise ValueError("cannot encode an empty sequence")
    if seq.dim != params.input_dim:
        raise ShapeError(f"sequence dim {seq.dim} != GRU input dim {params.input_dim}")
    h = np.zeros(params.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    caches = []
    for t in range(seq.steps):
        h, cache = _gru_step_cached(params, seq.frames[t], h)
        caches.append(cache)
    return h, caches


def backprop_sequence(params: GruParams, caches, dh: np.ndarray) -> GruParams:
    """Backpropagation through time from a gradient on the final hidden
    state; returns parameter gradients in a GruParams-shaped container."""
    g = GruParams.zeros(params.input_dim, params.hidden_dim)
    dh = np.asarray(dh, dtype=np.float64).copy()
    for x, h_prev, z, r, rh, cand in reversed(caches):
        dz = dh * (cand - h_prev)
        dcand = dh * z
        dh_prev = dh * (1.0 - z)
        da_h = dcand * (1.0 - cand * cand)
        g.wh += np.outer(da_h, x)
        g.uh += np.outer(da_h, rh)
        g.bh += da_h
        drh = params.uh.T @ da_h
        dr = drh * h_prev
        dh_prev += drh * r
        da_z = dz * z * (1.0 - z)
        g.wz += np.outer(da_z, x)
        g.uz += np.outer(da_z, h_prev)
        g.bz += da_z
        dh_prev += params.uz.T @ da_z
        da_r = dr * r * (1.0 - r)
        g.wr += np.outer(da_r, x)
        g.ur += np.outer(da_r, h_prev)
        g.br += da_r
        dh_prev += params.ur.T @ da_r
        dh = dh_prev
    return g


def project(proj: ProjectionParams, h: np.ndarray) -> np.ndarray:
    return proj.weight @ h + proj.bias


def ta_loss(tea_latent: np.ndarray, stu_latent: np.ndarray) -> float:
    """Squared Euclidean distance between the aligned latents.

    No averaging over the latent dimension; batch reduction, when there
    is a batch, is the caller's mean.
    """
    a = np.asarray(tea_latent, dtype=np.float64)
    b = np.asarray(stu_latent, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    d = b - a
    return float(d @ d)


@dataclass
class TaGrad:
    """Alignment-loss gradients for the student encoder (and optionally
    the teacher's, when it is unfrozen)."""

    loss: float
    d_student_gru: GruParams
    d_student_proj: ProjectionParams
    d_teacher_gru: GruParams = None
    d_teacher_proj: ProjectionParams = None


def ta_forward(stu_gru, stu_proj, stu_seq, tea_gru, tea_proj, tea_seq):
    """Encode both sequences and return (loss, student latent, teacher
    latent, student caches, student hidden)."""
    h_s, caches_s = encode_sequence(stu_gru, stu_seq)
    h_t, _ = encode_sequence(tea_gru, tea_seq)
    z_s = project(stu_proj, h_s)
    z_t = project(tea_proj, h_t)
    return ta_loss(z_t, z_s), z_s, z_t, caches_s, h_s


def ta_backward(
    stu_gru: GruParams,
    stu_proj: ProjectionParams,
    stu_seq: FeatureSequence,
    tea_gru: GruParams,
    tea_proj: ProjectionParams,
    tea_seq: FeatureSequence,
    train_teacher: bool = False,
) -> TaGrad:
    """Analytic gradient of the alignment loss.

    The teacher is frozen by default; pass ``train_teacher=True`` to also
    collect its gradients (they are the mirror image of the student's).
    """
    h_s, caches_s = encode_sequence(stu_gru, stu_seq)
    h_t, caches_t = encode_sequence(tea_gru, tea_seq)
    z_s = project(stu_proj, h_s)
    z_t = project(tea_proj, h_t)
    diff = z_s - z_t
    loss = float(diff @ diff)
    dz_s = 2.0 * diff
    d_proj_s = ProjectionParams(np.outer(dz_s, h_s), dz_s.copy())
    dh_s = stu_proj.weight.T @ dz_s
    d_gru_s = backprop_sequence(stu_gru, caches_s, dh_s)
    grad = TaGrad(loss, d_gru_s, d_proj_s)
    if train_teacher:
        dz_t = -2.0 * diff
        grad.d_teacher_proj = ProjectionParams(np.outer(dz_t, h_t), dz_t.copy())
        grad.d_teacher_gru = backprop_sequence(tea_gru, caches_t, tea_proj.weight.T @ dz_t)
    return grad
