"""The five recurrent layers and the shared input projection.

Every network maps the 64 most recent input samples to one output sample.
Windows are stored newest-first: ``window[0]`` is the current sample,
``window[63]`` the oldest.  A linear projection compresses the window to
the recurrent layer's input size (4 for the LSTM family, 6 for the
linear-recurrence family), the recurrent layer updates its state, and a
readout hands a small vector to the rest of the network.

The functions here are the single-stream reference implementations: one
step, 1-d arrays, no batching.  The batched segment paths in
``statefx.model`` must agree with them bit-for-bit up to float rounding;
the test suite enforces that equivalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, StabilityError
from .numerics import sigmoid

WINDOW_LEN = 64

# Layer widths. LSTM/ED: 8 recurrent units, 4-wide projection.
# LRU/S4D/S6: 12 recurrent state numbers, 6-wide projection and readout.
LSTM_UNITS = 8
LSTM_IN = 4
SSM_STATE = 12
SSM_IN = 6

# ED encoder: each of the two convolutional maps turns the 32 oldest
# window samples into an 8-vector with a kernel of 4 and stride 4.
ED_SPLIT = 32
ED_KERNEL = 4
ED_STRIDE = 4


def _check_vec(name: str, v: np.ndarray, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (length,):
        raise DimensionError(f"{name} must have shape ({length},), got {v.shape}")
    return v


# ---------------------------------------------------------------------------
# Input projection
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    """Linear map from an input window to the recurrent layer input."""

    W: np.ndarray  # (units, window_len)
    b: np.ndarray  # (units,)


def project_input(proj: Projection, window: np.ndarray) -> np.ndarray:
    """u = W @ window + b for one newest-first input window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (proj.W.shape[1],):
        raise DimensionError(f"window must have shape ({proj.W.shape[1]},), got {window.shape}")
    return proj.W @ window + proj.b


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmWeights:
    """Gate weights, stacked rows in f, i, o, c order (8 rows each)."""

    W: np.ndarray  # (32, 8)  hidden-to-gates
    U: np.ndarray  # (32, 4)  input-to-gates
    b: np.ndarray  # (32,)


@dataclass
class LstmState:
    h: np.ndarray  # (8,)
    c: np.ndarray  # (8,)

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.c.copy())


def lstm_step(w: LstmWeights, state: LstmState, u: np.ndarray) -> tuple[LstmState, np.ndarray]:
    """One LSTM update.

    f, i, o = sigmoid gates; c' = tanh candidate;
    c_n = f * c_{n-1} + i * c'; h_n = o * tanh(c_n).
    Returns the new state and h_n.
    """
    u = _check_vec("u", u, w.U.shape[1])
    if not (np.all(np.isfinite(state.h)) and np.all(np.isfinite(state.c))):
        raise NumericError("lstm_step received a non-finite state")
    z = w.W @ state.h + w.U @ u + w.b
    n = state.h.shape[0]
    f = sigmoid(z[0:n])
    i = sigmoid(z[n:2 * n])
    o = sigmoid(z[2 * n:3 * n])
    g = np.tanh(z[3 * n:4 * n])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return LstmState(h, c), h


# ---------------------------------------------------------------------------
# Encoder-decoder LSTM (state sharing)
# ---------------------------------------------------------------------------

@dataclass
class EdEncoder:
    """Two strided convolutions mapping the 32 oldest samples to 8-vectors."""

    kernel_h: np.ndarray  # (4,)
    bias_h: np.ndarray    # (1,)
    kernel_c: np.ndarray  # (4,)
    bias_c: np.ndarray    # (1,)


def ed_encode(enc: EdEncoder, x_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Candidate states [h, c] from the encoder half of the window.

    ``x_e`` holds samples x_{n-32} .. x_{n-63} (newest-first).  Each map is
    a single-channel convolution with kernel 4 and stride 4, so the eight
    output values summarize disjoint 4-sample blocks.
    """
    x_e = _check_vec("x_e", x_e, ED_SPLIT)
    blocks = x_e.reshape(-1, ED_STRIDE)
    cand_h = blocks @ enc.kernel_h + enc.bias_h[0]
    cand_c = blocks @ enc.kernel_c + enc.bias_c[0]
    return cand_h, cand_c


def ed_state_merge(prev: LstmState, cand_h: np.ndarray, cand_c: np.ndarray) -> LstmState:
    """Gate the encoder candidates by the previous LSTM states.

    new [h, c] = sigmoid([h_{n-1}, c_{n-1}]) * [cand_h, cand_c]; the result
    becomes the state pair the LSTM uses for the current step.
    """
    cand_h = _check_vec("cand_h", cand_h, prev.h.shape[0])
    cand_c = _check_vec("cand_c", cand_c, prev.c.shape[0])
    return LstmState(sigmoid(prev.h) * cand_h, sigmoid(prev.c) * cand_c)


# ---------------------------------------------------------------------------
# LRU
# ---------------------------------------------------------------------------

@dataclass
class LruWeights:
    """Diagonal complex linear recurrence with an exponential parameterization.

    lambda_k = exp(-exp(nu_k) + i * theta_k) keeps |lambda_k| < 1 for every
    finite nu; gamma_k = sqrt(1 - |lambda_k|^2) normalizes the input path.
    The readout takes the real part only.
    """

    nu: np.ndarray      # (12,)
    theta: np.ndarray   # (12,)
    U_re: np.ndarray    # (12, 6)
    U_im: np.ndarray    # (12, 6)
    b_re: np.ndarray    # (12,)
    b_im: np.ndarray    # (12,)
    W_re: np.ndarray    # (6, 12)
    W_im: np.ndarray    # (6, 12)
    b_o: np.ndarray     # (6,)

    def lam(self) -> np.ndarray:
        return np.exp(-np.exp(self.nu) + 1j * self.theta)

    def gamma(self) -> np.ndarray:
        return np.sqrt(1.0 - np.exp(-2.0 * np.exp(self.nu)))

    def validate(self) -> None:
        if not np.all(np.isfinite(self.nu)):
            raise StabilityError("LRU nu must be finite")
        if np.any(np.abs(self.lam()) >= 1.0):
            raise StabilityError("LRU recurrent multipliers must satisfy |lambda| < 1")


@dataclass
class LruState:
    h: np.ndarray  # (12,) complex

    def copy(self) -> "LruState":
        return LruState(self.h.copy())


def lru_step(w: LruWeights, state: LruState, u: np.ndarray) -> tuple[LruState, np.ndarray]:
    """One linear recurrent unit update.

    h_n = lambda * h_{n-1} + gamma * (U_h @ u) + b_h
    o_n = Re(W_o @ h_n) + b_o
    """
    u = _check_vec("u", u, w.U_re.shape[1])
    pre = w.gamma() * ((w.U_re + 1j * w.U_im) @ u) + (w.b_re + 1j * w.b_im)
    h = w.lam() * state.h + pre
    o = np.real((w.W_re + 1j * w.W_im) @ h) + w.b_o
    return LruState(h), o


# ---------------------------------------------------------------------------
# S4D
# ---------------------------------------------------------------------------

@dataclass
class S4dWeights:
    """Diagonal state-space layer, zero-order-hold discretized.

    The continuous diagonal A_k = -exp(log_neg_a_re_k) + i * a_im_k has a
    strictly negative real part; delta_k = exp(log_delta_k) > 0.  Input and
    output maps B, C are dense complex; D is a real elementwise feedthrough.
    """

    log_neg_a_re: np.ndarray  # (12,)
    a_im: np.ndarray          # (12,)
    log_delta: np.ndarray     # (12,)
    B_re: np.ndarray          # (12, 6)
    B_im: np.ndarray          # (12, 6)
    C_re: np.ndarray          # (6, 12)
    C_im: np.ndarray          # (6, 12)
    D: np.ndarray             # (6,)

    def a_diag(self) -> np.ndarray:
        return -np.exp(self.log_neg_a_re) + 1j * self.a_im

    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    def discretized(self) -> tuple[np.ndarray, np.ndarray]:
        return s4d_discretize(self.a_diag(), self.B_re + 1j * self.B_im, self.delta())


@dataclass
class SsmState:
    """State vector of a diagonal SSM: complex for S4D, real for S6."""

    h: np.ndarray  # (12,)

    def copy(self) -> "SsmState":
        return SsmState(self.h.copy())


def s4d_discretize(a_diag: np.ndarray, B: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal continuous system.

    abar_k = exp(delta_k a_k); bbar_kj = (abar_k - 1) / a_k * B_kj.
    Requires Re(a_k) < 0 and delta_k > 0 so that |abar_k| < 1.
    """
    a_diag = np.asarray(a_diag, dtype=np.complex128)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a_diag.real >= 0.0):
        raise StabilityError("s4d_discretize needs Re(a_k) < 0 for every channel")
    if np.any(delta <= 0.0):
        raise StabilityError("s4d_discretize needs delta > 0")
    abar = np.exp(delta * a_diag)
    bbar = ((abar - 1.0) / a_diag)[:, None] * np.asarray(B, dtype=np.complex128)
    return abar, bbar


def s4d_step(w: S4dWeights, state: SsmState, u: np.ndarray) -> tuple[SsmState, np.ndarray]:
    """One discretized diagonal-SSM update.

    h_n = abar * h_{n-1} + bbar @ u;  o_n = Re(C @ h_n) + D * u.
    """
    u = _check_vec("u", u, w.B_re.shape[1])
    abar, bbar = w.discretized()
    h = abar * state.h + bbar @ u
    o = np.real((w.C_re + 1j * w.C_im) @ h) + w.D * u
    return SsmState(h), o


# ---------------------------------------------------------------------------
# S6 (input-dependent B, C and step size)
# ---------------------------------------------------------------------------

@dataclass
class S6Weights:
    """Selective SSM: B_n, C_n and the step size depend on the current input.

    The 12 real state numbers are grouped as 6 channels x 2 substates; the
    channel layout index is 2*d + k.  A = -exp(log_neg_a) is a fixed real
    negative diagonal; B_n = W_B @ u + b_B and C_n = W_C @ u + b_C are
    per-(channel, substate) coefficients produced by linear layers, and
    delta_n = softplus(W_delta @ u + b_delta) is a shared scalar step.
    """

    log_neg_a: np.ndarray  # (12,)
    W_delta: np.ndarray    # (6,)
    b_delta: np.ndarray    # (1,)
    W_B: np.ndarray        # (12, 6)
    b_B: np.ndarray        # (12,)
    W_C: np.ndarray        # (12, 6)
    b_C: np.ndarray        # (12,)
    D: np.ndarray          # (6,)

    def a_diag(self) -> np.ndarray:
        return -np.exp(self.log_neg_a)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def s6_step(w: S6Weights, state: SsmState, u: np.ndarray) -> tuple[SsmState, np.ndarray]:
    """One selective-SSM update with input-dependent matrices.

    The per-step (abar, bbar) come from the same zero-order-hold formula as
    S4D, applied to the real diagonal A with the input-dependent delta_n and
    B_n.  Readout: o_d = sum_k C_n[2d+k] h[2d+k] + D_d u_d.
    """
    u = _check_vec("u", u, w.W_B.shape[1])
    a = w.a_diag()
    delta = softplus(float(w.W_delta @ u + w.b_delta[0]))
    b_n = w.W_B @ u + w.b_B
    c_n = w.W_C @ u + w.b_C
    abar = np.exp(delta * a)
    bbar = (abar - 1.0) / a * b_n
    u_rep = np.repeat(u, 2)
    h = abar * state.h + bbar * u_rep
    o = (c_n * h).reshape(-1, 2).sum(axis=1) + w.D * u
    return SsmState(h), o


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_projection(rng: np.random.Generator, units: int, window: int) -> Projection:
    bound = 1.0 / np.sqrt(window)
    return Projection(W=rng.uniform(-bound, bound, (units, window)),
                      b=np.zeros(units))


def init_lstm(rng: np.random.Generator) -> LstmWeights:
    bound = 1.0 / np.sqrt(LSTM_UNITS)
    b = np.zeros(4 * LSTM_UNITS)
    b[:LSTM_UNITS] = 1.0  # forget-gate bias starts open
    return LstmWeights(
        W=rng.uniform(-bound, bound, (4 * LSTM_UNITS, LSTM_UNITS)),
        U=rng.uniform(-bound, bound, (4 * LSTM_UNITS, LSTM_IN)),
        b=b,
    )


def init_ed_encoder(rng: np.random.Generator) -> EdEncoder:
    bound = 1.0 / np.sqrt(ED_KERNEL)
    return EdEncoder(
        kernel_h=rng.uniform(-bound, bound, ED_KERNEL),
        bias_h=np.zeros(1),
        kernel_c=rng.uniform(-bound, bound, ED_KERNEL),
        bias_c=np.zeros(1),
    )


def init_lru(rng: np.random.Generator, r_min: float = 0.5, r_max: float = 0.99,
             max_phase: float = np.pi / 10.0) -> LruWeights:
    r = rng.uniform(r_min, r_max, SSM_STATE)
    s_in = 1.0 / np.sqrt(2.0 * SSM_IN)
    s_out = 1.0 / np.sqrt(2.0 * SSM_STATE)
    w = LruWeights(
        nu=np.log(-np.log(r)),
        theta=rng.uniform(0.0, max_phase, SSM_STATE),
        U_re=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        U_im=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        b_re=np.zeros(SSM_STATE),
        b_im=np.zeros(SSM_STATE),
        W_re=rng.normal(0.0, s_out, (SSM_IN, SSM_STATE)),
        W_im=rng.normal(0.0, s_out, (SSM_IN, SSM_STATE)),
        b_o=np.zeros(SSM_IN),
    )
    w.validate()
    return w


def init_s4d(rng: np.random.Generator, delta_min: float = 1e-3, delta_max: float = 1e-1) -> S4dWeights:
    k = np.arange(SSM_STATE, dtype=np.float64)
    s_in = 1.0 / np.sqrt(2.0 * SSM_IN)
    s_out = 1.0 / np.sqrt(2.0 * SSM_STATE)
    return S4dWeights(
        log_neg_a_re=np.full(SSM_STATE, np.log(0.5)),  # A_k = -1/2 + i*pi*k
        a_im=np.pi * k,
        log_delta=rng.uniform(np.log(delta_min), np.log(delta_max), SSM_STATE),
        B_re=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        B_im=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        C_re=rng.normal(0.0, s_out, (SSM_IN, SSM_STATE)),
        C_im=rng.normal(0.0, s_out, (SSM_IN, SSM_STATE)),
        D=np.ones(SSM_IN),
    )


def init_s6(rng: np.random.Generator) -> S6Weights:
    s_in = 1.0 / np.sqrt(SSM_IN)
    delta0 = 0.01
    return S6Weights(
        log_neg_a=np.log(np.tile([1.0, 2.0], SSM_IN)),
        W_delta=rng.normal(0.0, s_in, SSM_IN),
        b_delta=np.array([np.log(np.expm1(delta0))]),  # softplus(b) = delta0
        W_B=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        b_B=np.zeros(SSM_STATE),
        W_C=rng.normal(0.0, s_in, (SSM_STATE, SSM_IN)),
        b_C=np.zeros(SSM_STATE),
        D=np.ones(SSM_IN),
    )
