"""Transducer probability lattice: exact loss, gradients, and an enumeration oracle.

An utterance with T encoder frames and a U-token target induces a T x (U+1)
grid of decoder states. Node (t, u) carries a normalized distribution over K
non-blank labels plus blank (label id 0). Emitting label y_{u+1} moves to
(t, u+1) without consuming a frame; emitting blank consumes frame t and moves
to (t+1, u). Every complete path ends with the blank leaving (T-1, U), so an
alignment has length T+U and exactly T blanks.

All math runs in log space. Impossible events are represented by the
``LOG_ZERO`` sentinel (IEEE -inf, never a large finite stand-in); log-space
additions short-circuit -inf operands so no (-inf) - (-inf) is ever formed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

BLANK_ID = 0

# Sentinel log-probability of an impossible event. This is IEEE -infinity on
# purpose: exp(LOG_ZERO) == 0.0 exactly and np.logaddexp treats it as an
# identity element, so no special-casing leaks into the recursions.
LOG_ZERO = float("-inf")

# Per-node normalization tolerance for LatticeDist.
NORM_TOL = 1e-6

# rnnt_brute_force refuses instances bigger than this (T + U).
ENUM_LIMIT = 12


class EnumerationGuardError(RuntimeError):
    """Raised when the exhaustive oracle is asked for an instance too large."""


@dataclass(frozen=True)
class LabelSequence:
    """A target sequence of non-blank label ids (each >= 1)."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        for tok in self.tokens:
            if not isinstance(tok, (int, np.integer)) or tok < 1:
                raise ValueError(f"label ids must be integers >= 1, got {tok!r}")
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    @property
    def U(self) -> int:
        return len(self.tokens)

    @classmethod
    def of(cls, tokens) -> "LabelSequence":
        return cls(tuple(int(t) for t in tokens))


@dataclass(frozen=True)
class Alignment:
    """A length T+U walk through the lattice: U target labels and T blanks.

    The final step is always blank (it consumes the last frame).
    """

    steps: tuple[int, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("an alignment has at least one step (the final blank)")
        if self.steps[-1] != BLANK_ID:
            raise ValueError("the final alignment step must be blank")
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))


def remove_blanks(alignment: Alignment) -> LabelSequence:
    """Delete blanks from an alignment, preserving label order."""
    return LabelSequence(tuple(s for s in alignment.steps if s != BLANK_ID))


@dataclass(frozen=True)
class LatticeDist:
    """Per-node output log-distributions over vocab+blank for a T x (U+1) grid.

    ``logp`` has shape (T, U+1, K+1); index 0 of the last axis is blank. Each
    node must be a normalized distribution (logsumexp == 0 within NORM_TOL).
    """

    logp: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.logp)
        if lp.ndim != 3:
            raise ValueError(f"logp must have shape (T, U+1, K+1), got {lp.shape}")
        if lp.shape[0] < 1 or lp.shape[1] < 1 or lp.shape[2] < 2:
            raise ValueError(f"degenerate lattice shape {lp.shape}")
        if np.any(np.isnan(lp)) or np.any(lp > 1e-9):
            raise ValueError("log-probabilities must be finite-or-LOG_ZERO and <= 0")
        with np.errstate(under="ignore"):
            norms = _logsumexp(lp, axis=-1)
        if np.any(np.abs(norms) > NORM_TOL):
            worst = float(np.max(np.abs(norms)))
            raise ValueError(f"nodes are not normalized (max |logsumexp| = {worst:g})")
        object.__setattr__(self, "logp", lp)

    @property
    def T(self) -> int:
        return self.logp.shape[0]

    @property
    def U(self) -> int:
        return self.logp.shape[1] - 1

    @property
    def K(self) -> int:
        return self.logp.shape[2] - 1

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "LatticeDist":
        """Normalize raw scores per node into a LatticeDist."""
        z = np.asarray(logits, dtype=np.float64)
        return cls(log_softmax(z, axis=-1))


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax (max-subtracted)."""
    z = np.asarray(z)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    with np.errstate(under="ignore"):
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # guard all-(-inf) slices
    with np.errstate(under="ignore"):
        out = np.log(np.sum(np.exp(z - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _check_pair(dist: LatticeDist, target: LabelSequence) -> None:
    if dist.U != target.U:
        raise ValueError(
            f"lattice has U={dist.U} but target has U={target.U} tokens"
        )
    if any(t > dist.K for t in target.tokens):
        raise ValueError("target contains a label id outside the lattice vocabulary")


def _forward_alpha(lp: np.ndarray, tokens: tuple[int, ...]) -> np.ndarray:
    """Log forward scores alpha[t, u] = ln P(reach node (t, u))."""
    T, U1, _ = lp.shape
    alpha = np.full((T, U1), LOG_ZERO, dtype=np.float64)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            from_blank = LOG_ZERO
            from_label = LOG_ZERO
            if t > 0:
                from_blank = alpha[t - 1, u] + lp[t - 1, u, BLANK_ID]
            if u > 0:
                from_label = alpha[t, u - 1] + lp[t, u - 1, tokens[u - 1]]
            alpha[t, u] = np.logaddexp(from_blank, from_label)
    return alpha


def _backward_beta(lp: np.ndarray, tokens: tuple[int, ...]) -> np.ndarray:
    """Log backward scores beta[t, u] = ln P(complete the target from (t, u))."""
    T, U1, _ = lp.shape
    U = U1 - 1
    beta = np.full((T, U1), LOG_ZERO, dtype=np.float64)
    beta[T - 1, U] = lp[T - 1, U, BLANK_ID]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            via_blank = LOG_ZERO
            via_label = LOG_ZERO
            if t < T - 1:
                via_blank = lp[t, u, BLANK_ID] + beta[t + 1, u]
            if u < U:
                via_label = lp[t, u, tokens[u]] + beta[t, u + 1]
            beta[t, u] = np.logaddexp(via_blank, via_label)
    return beta


def rnnt_forward(dist: LatticeDist, target: LabelSequence) -> float:
    """Log-probability of the target: the sum over all monotone alignments.

    Returns LOG_ZERO when no alignment exists (U > T). The training loss is
    the negation of this value.
    """
    _check_pair(dist, target)
    if target.U > dist.T:
        return LOG_ZERO
    lp = np.asarray(dist.logp, dtype=np.float64)
    alpha = _forward_alpha(lp, target.tokens)
    return float(alpha[dist.T - 1, dist.U] + lp[dist.T - 1, dist.U, BLANK_ID])


def _posteriors(lp: np.ndarray, tokens: tuple[int, ...]) -> tuple[np.ndarray, float]:
    """Transition posteriors and the target log-likelihood, shared tables."""
    T, U1, K1 = lp.shape
    alpha = _forward_alpha(lp, tokens)
    beta = _backward_beta(lp, tokens)
    loglik = float(beta[0, 0])
    if not np.isfinite(loglik):
        raise ValueError("target has probability zero; posteriors are undefined")

    post = np.zeros((T, U1, K1), dtype=np.float64)
    for t in range(T):
        for u in range(U1):
            a = alpha[t, u]
            if a == LOG_ZERO:
                continue
            if t < T - 1:
                post[t, u, BLANK_ID] = np.exp(
                    a + lp[t, u, BLANK_ID] + beta[t + 1, u] - loglik
                )
            elif u == U1 - 1:
                post[t, u, BLANK_ID] = np.exp(a + lp[t, u, BLANK_ID] - loglik)
            if u < U1 - 1:
                post[t, u, tokens[u]] = np.exp(
                    a + lp[t, u, tokens[u]] + beta[t, u + 1] - loglik
                )
    return post, loglik


def transition_posteriors(dist: LatticeDist, target: LabelSequence) -> np.ndarray:
    """Posterior probability that the target's path uses each transition.

    Entry (t, u, k) is P(path emits k at node (t, u) | target), nonzero only
    for k = blank and k = y_{u+1}. Equivalently this is the negated gradient
    of the loss with respect to the unconstrained log-probabilities.
    """
    _check_pair(dist, target)
    post, _ = _posteriors(np.asarray(dist.logp, dtype=np.float64), target.tokens)
    return post


def rnnt_grad(
    dist: LatticeDist, target: LabelSequence, wrt: str = "logits"
) -> np.ndarray:
    """Gradient of the loss -ln P(target) at every node/label.

    ``wrt="logits"`` (default) differentiates through the per-node softmax,
    i.e. with respect to unnormalized scores evaluated at the current
    log-probabilities; this is what central finite differences on perturbed,
    renormalized scores measure, and what a training graph consumes. Labels
    off the target path get the pure softmax-posterior term (they carry zero
    path occupancy). ``wrt="logp"`` returns the raw d(loss)/d(logp), which is
    minus the transition posterior and zero off the path.
    """
    if wrt not in ("logits", "logp"):
        raise ValueError(f"unknown wrt={wrt!r}")
    ll = rnnt_forward(dist, target)
    if not np.isfinite(ll):
        raise ValueError("loss is infinite (no valid alignment); gradient undefined")
    post = transition_posteriors(dist, target)
    if wrt == "logp":
        return -post
    return _grad_from_posteriors(np.asarray(dist.logp, dtype=np.float64), post)


def _grad_from_posteriors(lp: np.ndarray, post: np.ndarray) -> np.ndarray:
    # d(-lnP)/dz_k = p_k * occ(t,u) - post(t,u,k), with occ the node occupancy
    # sum_k post(t,u,k). Rows sum to zero, as any softmax gradient must.
    occ = post.sum(axis=-1)
    with np.errstate(under="ignore"):
        probs = np.exp(lp)
    return probs * occ[:, :, None] - post


def rnnt_loss_with_grad(
    dist: LatticeDist, target: LabelSequence
) -> tuple[float, np.ndarray]:
    """Negative log-probability and its gradient w.r.t. node scores, one pass.

    Equivalent to (-rnnt_forward(...), rnnt_grad(..., wrt="logits")) but shares
    the forward/backward tables; this is the entry point training graphs use.
    """
    _check_pair(dist, target)
    if target.U > dist.T:
        raise ValueError("no valid alignment (U > T); loss is infinite")
    lp = np.asarray(dist.logp, dtype=np.float64)
    post, loglik = _posteriors(lp, target.tokens)
    return -loglik, _grad_from_posteriors(lp, post)


def iter_alignments(T: int, target: LabelSequence):
    """Yield every alignment of the target over T frames (final step blank)."""
    U = target.U
    if U > T:
        return
    total = T + U
    for label_pos in itertools.combinations(range(total - 1), U):
        pos = set(label_pos)
        steps = []
        ui = 0
        for i in range(total):
            if i in pos:
                steps.append(target.tokens[ui])
                ui += 1
            else:
                steps.append(BLANK_ID)
        yield Alignment(tuple(steps))


def rnnt_brute_force(dist: LatticeDist, target: LabelSequence) -> float:
    """Exhaustive-enumeration oracle: sums every alignment's probability exactly.

    Refuses instances with T + U > ENUM_LIMIT; this function exists to check
    rnnt_forward, not to train with.
    """
    _check_pair(dist, target)
    if dist.T + target.U > ENUM_LIMIT:
        raise EnumerationGuardError(
            f"T+U = {dist.T + target.U} exceeds the enumeration guard "
            f"({ENUM_LIMIT}); use rnnt_forward instead"
        )
    if target.U > dist.T:
        return LOG_ZERO
    lp = np.asarray(dist.logp, dtype=np.float64)
    path_logps = []
    for ali in iter_alignments(dist.T, target):
        t = u = 0
        acc = 0.0
        for step in ali.steps:
            acc += lp[t, u, step]
            if step == BLANK_ID:
                t += 1
            else:
                u += 1
        path_logps.append(acc)
    return float(_logsumexp(np.asarray(path_logps), axis=0))


def random_lattice(
    rng: np.random.Generator, T: int, U: int, K: int, spread: float = 1.0
) -> LatticeDist:
    """Random normalized lattice (Gaussian scores, softmax-normalized)."""
    z = spread * rng.standard_normal((T, U + 1, K + 1))
    return LatticeDist.from_logits(z)
