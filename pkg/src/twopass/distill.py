"""Distillation and composite losses for the three-stage compression recipe.

The expensive reference loss is the full per-node KL between teacher and
student lattices, which needs a vocab-sized buffer at every node. The cheap
path collapses each node to three numbers — probability of the next target
token, of blank, and of everything else — and takes the KL between those
3-way distributions instead, cutting the stored teacher summary to
O(T x U x 3) per utterance.

Student probabilities are floored at KL_FLOOR inside every log ratio so a
confident teacher against a zeroed student yields a large finite value
instead of infinity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import BLANK_ID, LabelSequence, LatticeDist

KL_FLOOR = 1e-8


@dataclass(frozen=True)
class CoarseDist:
    """Three-way collapse of one lattice node: next-token / blank / remainder."""

    p_y: float
    p_blank: float
    p_r: float

    def __post_init__(self):
        vals = (self.p_y, self.p_blank, self.p_r)
        if any(v < 0.0 for v in vals):
            raise ValueError(f"negative probability in {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"coarse distribution sums to {sum(vals)!r}, not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_y, self.p_blank, self.p_r], dtype=np.float64)


@dataclass(frozen=True)
class StepDist:
    """Normalized log-distribution for one second-pass output step."""

    logp: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.logp, dtype=np.float64)
        if lp.ndim != 1 or lp.size < 2:
            raise ValueError(f"step distribution must be a vector, got {lp.shape}")
        with np.errstate(under="ignore"):
            norm = np.log(np.sum(np.exp(lp - lp.max()))) + lp.max()
        if abs(norm) > 1e-6:
            raise ValueError(f"step distribution not normalized (logsumexp={norm:g})")
        object.__setattr__(self, "logp", lp)

    @property
    def vocab(self) -> int:
        return self.logp.size


@dataclass(frozen=True)
class LossWeights:
    """Stage trade-off weights: beta (stage 1), gamma (stage 2), lam (stage 3)."""

    beta: float = 1e-2
    gamma: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        for name, v in (("beta", self.beta), ("gamma", self.gamma), ("lam", self.lam)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def coarse_project(dist: LatticeDist, target: LabelSequence, t: int, u: int) -> CoarseDist:
    """Collapse node (t, u) to (next-token, blank, remainder) probabilities.

    On the top row (u = U) there is no next token, so p_y is 0 by convention
    and the remainder absorbs all non-blank mass.
    """
    if not (0 <= t < dist.T) or not (0 <= u <= dist.U):
        raise IndexError(f"node ({t}, {u}) outside a {dist.T} x {dist.U + 1} lattice")
    if dist.U != target.U:
        raise ValueError("lattice and target disagree on U")
    with np.errstate(under="ignore"):
        p_blank = float(np.exp(dist.logp[t, u, BLANK_ID]))
        if u < dist.U:
            p_y = float(np.exp(dist.logp[t, u, target.tokens[u]]))
        else:
            p_y = 0.0
    if dist.K == 1 and u < dist.U:
        p_r = 0.0  # remainder label set is structurally empty
    else:
        p_r = max(0.0, 1.0 - p_y - p_blank)
    return CoarseDist(p_y, p_blank, p_r)


def coarse_targets(dist: LatticeDist, target: LabelSequence) -> np.ndarray:
    """The (T, U+1, 3) array of coarse node distributions.

    This is the whole teacher summary a distillation run stores per utterance;
    note the last axis is 3, independent of the vocabulary size.
    """
    if dist.U != target.U:
        raise ValueError("lattice and target disagree on U")
    T, U1 = dist.T, dist.U + 1
    with np.errstate(under="ignore"):
        probs = np.exp(np.asarray(dist.logp, dtype=np.float64))
    p_b = probs[:, :, BLANK_ID]
    p_y = np.zeros((T, U1))
    for u in range(U1 - 1):
        p_y[:, u] = probs[:, u, target.tokens[u]]
    p_r = np.maximum(1.0 - p_y - p_b, 0.0)
    if dist.K == 1:
        p_r[:, : U1 - 1] = 0.0
    return np.stack([p_y, p_b, p_r], axis=-1)


def _kl_terms(teacher: np.ndarray, student: np.ndarray, floor: float) -> float:
    mask = teacher > 0.0
    out = 0.0
    if np.any(mask):
        t = teacher[mask]
        s = np.maximum(student[mask], floor)
        out = float(np.sum(t * (np.log(t) - np.log(s))))
    return out


def coarse_kl(teacher: CoarseDist, student: CoarseDist, floor: float = KL_FLOOR) -> float:
    """KL divergence between two coarse node distributions (>= 0)."""
    val = _kl_terms(teacher.as_array(), student.as_array(), floor)
    return max(0.0, val)


def full_kl(teacher: LatticeDist, student: LatticeDist, floor: float = KL_FLOOR) -> float:
    """Node-summed KL over the entire vocabulary — the expensive reference.

    This needs both full lattices in memory; the coarse path exists to avoid
    exactly that.
    """
    if teacher.logp.shape != student.logp.shape:
        raise ValueError(
            f"lattice shapes differ: {teacher.logp.shape} vs {student.logp.shape}"
        )
    with np.errstate(under="ignore"):
        tp = np.exp(np.asarray(teacher.logp, dtype=np.float64))
        sp = np.exp(np.asarray(student.logp, dtype=np.float64))
    return max(0.0, _kl_terms(tp, sp, floor))


def coarse_kl_sum(
    teacher: LatticeDist, student: LatticeDist, target: LabelSequence,
    floor: float = KL_FLOOR,
) -> float:
    """Sum of coarse_kl over every lattice node (unnormalized)."""
    t3 = coarse_targets(teacher, target)
    s3 = coarse_targets(student, target)
    total = 0.0
    for t in range(teacher.T):
        for u in range(teacher.U + 1):
            total += max(0.0, _kl_terms(t3[t, u], s3[t, u], floor))
    return total


def las_kl(
    teacher_steps: list[StepDist], student_steps: list[StepDist],
    floor: float = KL_FLOOR,
) -> float:
    """Per-step KL between second-pass output distributions, summed over steps."""
    if len(teacher_steps) != len(student_steps):
        raise ValueError(
            f"step count mismatch: {len(teacher_steps)} vs {len(student_steps)}"
        )
    total = 0.0
    for ts, ss in zip(teacher_steps, student_steps):
        if ts.vocab != ss.vocab:
            raise ValueError(f"vocab mismatch: {ts.vocab} vs {ss.vocab}")
        with np.errstate(under="ignore"):
            total += _kl_terms(np.exp(ts.logp), np.exp(ss.logp), floor)
    return max(0.0, total)


def stage1_loss(rnnt_loss: float, distill_sum: float, w: LossWeights) -> float:
    """First-stage blend: beta * distillation + (1 - beta) * transducer loss."""
    return w.beta * distill_sum + (1.0 - w.beta) * rnnt_loss


def stage2_loss(las_ce: float, las_distill: float, w: LossWeights) -> float:
    """Second-stage blend: gamma * rescorer distillation + (1 - gamma) * CE."""
    return w.gamma * las_distill + (1.0 - w.gamma) * las_ce


def stage3_loss(rnnt_loss: float, las_ce: float, w: LossWeights) -> float:
    """Deep-finetune blend: lam * transducer loss + (1 - lam) * rescorer CE."""
    return w.lam * rnnt_loss + (1.0 - w.lam) * las_ce
