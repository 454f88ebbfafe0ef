"""Loss terms for graph-based domain adaptation.

Three pieces, summed without coefficients into the training objective:

* ``mmd_loss``: squared kernel mean discrepancy between the source and
  target feature clouds, with a convex mixture of Gaussian kernels.
* ``feature_similarity_loss``: contrastive pull/push over labeled pairs
  inside a batch; same label attracts, different labels repel up to a
  margin on the squared distance.
* ``cross_entropy_loss``: node-level classification loss over rows that
  carry a label (source rows plus confidently pseudo-labeled targets).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, exp, log_softmax, pairwise_sqdist, relu, take_per_row, take_rows

__all__ = [
    "KernelSpec",
    "LossBreakdown",
    "MEDIAN_SCALES",
    "mmd_loss",
    "feature_similarity_loss",
    "cross_entropy_loss",
    "total_loss",
]

# bandwidth multipliers around the median pairwise distance
MEDIAN_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


def _rows(x) -> np.ndarray:
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class KernelSpec:
    """Convex combination of Gaussian kernels.

    k(a, b) = sum_m weights[m] * exp(-||a-b||^2 / (2 * bandwidths[m]^2)),
    with weights nonnegative and summing to 1.
    """

    bandwidths: tuple
    weights: tuple

    def __post_init__(self):
        bw = tuple(float(s) for s in self.bandwidths)
        w = tuple(float(b) for b in self.weights)
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)
        if len(bw) != len(w) or not bw:
            raise ValueError(f"{len(bw)} bandwidths vs {len(w)} weights")
        if any(s <= 0 for s in bw):
            raise ValueError(f"bandwidths must be positive, got {bw}")
        if any(b < 0 for b in w):
            raise ValueError(f"mixture weights must be nonnegative, got {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(w)}")

    @property
    def kappa(self) -> int:
        return len(self.bandwidths)

    def kernel(self, sqdists: Tensor) -> Tensor:
        """Apply the mixture to a matrix of squared distances."""
        out = None
        for sigma, beta in zip(self.bandwidths, self.weights):
            term = exp(sqdists * (-0.5 / (sigma * sigma))) * beta
            out = term if out is None else out + term
        return out

    @classmethod
    def from_median_heuristic(cls, *feature_sets, scales=MEDIAN_SCALES) -> "KernelSpec":
        """Bandwidths from the median pairwise distance of the joint batch.

        The median is scale-matched to the data, so the same kernel family
        works across feature magnitudes; ``scales`` spreads bandwidths
        around it. All-identical rows give no usable scale; falls back to
        a median of 1 with a warning.
        """
        x = np.concatenate([_rows(fs) for fs in feature_sets], axis=0)
        n = x.shape[0]
        if n < 2:
            raise ValueError("median heuristic needs at least 2 rows")
        dists = []
        for i in range(n - 1):
            diff = x[i + 1:] - x[i]
            dists.append(np.sqrt((diff * diff).sum(axis=1)))
        med = float(np.median(np.concatenate(dists)))
        if med == 0.0:
            warnings.warn(
                "median pairwise distance is 0 (identical rows); using bandwidth 1",
                stacklevel=2,
            )
            med = 1.0
        kappa = len(scales)
        return cls(
            bandwidths=tuple(med * s for s in scales),
            weights=(1.0 / kappa,) * kappa,
        )


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of the three terms and their sum for one step."""

    l_mmd: float
    l_g: float
    l_ce: float
    l_total: float
    pair_count: int  # pairs contributing to l_g
    labeled_count: int  # rows contributing to l_ce


def mmd_loss(phi_s: Tensor, phi_t: Tensor, kernels: KernelSpec) -> Tensor:
    """Biased squared MMD between two feature sets.

    (1/ns^2) sum k(s,s') + (1/nt^2) sum k(t,t') - (2/(ns*nt)) sum k(s,t).
    The diagonal terms stay in, so the value is a squared RKHS norm and
    never negative. Differentiable in both arguments.
    """
    ns, nt = phi_s.shape[0], phi_t.shape[0]
    if ns < 1 or nt < 1:
        raise ValueError(f"need at least one row per domain, got {ns} and {nt}")
    k_ss = kernels.kernel(pairwise_sqdist(phi_s, phi_s))
    k_tt = kernels.kernel(pairwise_sqdist(phi_t, phi_t))
    k_st = kernels.kernel(pairwise_sqdist(phi_s, phi_t))
    return (
        k_ss.sum() * (1.0 / (ns * ns))
        + k_tt.sum() * (1.0 / (nt * nt))
        - k_st.sum() * (2.0 / (ns * nt))
    )


def feature_similarity_loss(features: Tensor, labels, margin: float = 2.0) -> Tensor:
    """Contrastive loss over labeled pairs within a batch.

    For each pair i<j with both labels known (not -1): squared distance
    if the labels match, max(0, margin - squared distance) otherwise.
    Averaged over contributing pairs so the scale does not grow with the
    batch; 0 when no pair contributes.
    """
    lab = np.asarray(labels, dtype=np.int64)
    b = features.shape[0]
    if lab.shape != (b,):
        raise ValueError(f"labels shape {lab.shape} does not match batch size {b}")
    known = lab != -1
    both = known[:, None] & known[None, :]
    both &= np.triu(np.ones((b, b), dtype=bool), k=1)
    same = (both & (lab[:, None] == lab[None, :])).astype(np.float64)
    diff = (both & (lab[:, None] != lab[None, :])).astype(np.float64)
    count = int(both.sum())
    if count == 0:
        return Tensor(0.0)
    d2 = pairwise_sqdist(features, features)
    pull = (d2 * same).sum()
    push = (relu(margin - d2) * diff).sum()
    return (pull + push) * (1.0 / count)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over labeled rows.

    Takes raw logits and goes through log-softmax directly; taking the
    log of softmax output would lose precision for confident rows.
    Rows labeled -1 are excluded; with no labeled rows the loss is 0
    and a warning is raised.
    """
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {lab.shape} does not match batch size {logits.shape[0]}")
    idx = np.nonzero(lab != -1)[0]
    if idx.size == 0:
        warnings.warn("no labeled rows in batch; cross-entropy is 0", stacklevel=2)
        return Tensor(0.0)
    picked = take_per_row(take_rows(log_softmax(logits), idx), lab[idx])
    return picked.mean() * (-1.0)


def total_loss(
    l_mmd: Tensor,
    l_g: Tensor,
    l_ce: Tensor,
    *,
    pair_count: int = 0,
    labeled_count: int = 0,
    weights=None,
) -> tuple[Tensor, LossBreakdown]:
    """Plain sum of the three terms.

    ``weights`` (default all 1) exist for ablation runs only; the
    objective itself carries no coefficients.
    """
    if weights is None:
        weights = (1.0, 1.0, 1.0)
    wm, wg, wc = (float(w) for w in weights)
    tm, tg, tc = l_mmd * wm, l_g * wg, l_ce * wc
    total = tm + tg + tc
    breakdown = LossBreakdown(
        l_mmd=float(tm.data),
        l_g=float(tg.data),
        l_ce=float(tc.data),
        l_total=float(total.data),
        pair_count=pair_count,
        labeled_count=labeled_count,
    )
    return total, breakdown
