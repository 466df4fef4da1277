"""Online identification of the damping-to-dispatch sensitivity vector.

The data model is a local affine plant: damping-ratio increments against
injection increments over a measurement window. The estimator is a
weighted ridge regression wrapped in a noise-assisted ensemble whose
replicates see independently perturbed copies of the design matrix; the
entrywise median across replicates is the reported sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetworkCase
from .smallsignal import Mode

__all__ = [
    "Feature",
    "SampleWindow",
    "EstimatorConfig",
    "SensitivityEstimate",
    "OrderingError",
    "SingularityError",
    "EstimationError",
    "FeatureReductionError",
    "weighted_ridge",
    "naer_estimate",
    "reduce_features",
]


class OrderingError(ValueError):
    """Sample pushed with a non-increasing timestamp."""


class SingularityError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class EstimationError(RuntimeError):
    pass


class FeatureReductionError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    """One regression/dispatch feature: a generator or an aggregated station."""

    id: str
    generators: tuple[int, ...]   # indices into case.generators


class SampleWindow:
    """Rolling window of (injection increment, damping increment) samples.

    Timestamps must be strictly increasing; samples that fall before the
    window-start boundary (the completion time of the previous dispatch)
    are evicted lazily on the next push.
    """

    def __init__(self, feature_ids: list[str]):
        self.feature_ids = list(feature_ids)
        self._t: list[float] = []
        self._dx: list[np.ndarray] = []
        self._dz: list[float] = []
        self._boundary = -np.inf

    def __len__(self) -> int:
        return len(self._t)

    @property
    def boundary(self) -> float:
        return self._boundary

    def set_boundary(self, t: float) -> None:
        """Advance the window start; older samples are dropped on push."""
        self._boundary = max(self._boundary, t)

    def push(self, dx, dzeta: float, t: float) -> "SampleWindow":
        if self._t and t <= self._t[-1]:
            raise OrderingError(
                f"timestamp {t} not after previous sample at {self._t[-1]}"
            )
        dx = np.asarray(dx, dtype=float)
        if dx.shape != (len(self.feature_ids),):
            raise ValueError(
                f"expected {len(self.feature_ids)} features, got {dx.shape}"
            )
        self._evict()
        self._t.append(float(t))
        self._dx.append(dx)
        self._dz.append(float(dzeta))
        return self

    def _evict(self) -> None:
        while self._t and self._t[0] < self._boundary:
            self._t.pop(0)
            self._dx.pop(0)
            self._dz.pop(0)

    def clear(self) -> None:
        self._t, self._dx, self._dz = [], [], []

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self._t)
        m = len(self.feature_ids)
        dx = np.asarray(self._dx) if n else np.zeros((0, m))
        dz = np.asarray(self._dz)
        ts = np.asarray(self._t)
        return dx, dz, ts

    def aggregated(self, features: list[Feature],
                   column_of: dict[str, int]) -> "SampleWindow":
        """Project onto a feature set whose columns are sums of member
        generator columns (station clustering)."""
        dx, dz, ts = self.matrices()
        out = SampleWindow([f.id for f in features])
        out._boundary = self._boundary
        cols = np.zeros((dx.shape[0], len(features)))
        for j, f in enumerate(features):
            for g in f.generators:
                cols[:, j] += dx[:, column_of[f"gen{g}"]]
        out._t = list(ts)
        out._dx = [cols[i] for i in range(cols.shape[0])]
        out._dz = list(dz)
        return out


@dataclass
class EstimatorConfig:
    ridge_k: float = 0.0
    forgetting: float = 0.99       # exponential weight base, w_i = forgetting^(N-i)
    ensemble: int = 100
    noise_fraction: float = 0.1    # replicate noise std as a fraction of column std
    seed: int = 0
    condition_cap: float = 1e8     # above this the estimate is flagged

    def validate(self) -> None:
        if self.ridge_k < 0:
            raise ValueError("ridge coefficient must be >= 0")
        if not (0.0 < self.forgetting <= 1.0):
            raise ValueError("forgetting factor must be in (0, 1]")
        if self.ensemble < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.noise_fraction < 0:
            raise ValueError("noise fraction must be >= 0")


@dataclass
class SensitivityEstimate:
    psi: np.ndarray
    feature_ids: list[str]
    n_samples: int
    condition: float
    spread: np.ndarray             # per-feature std across ensemble replicates
    seed: int
    flagged: bool = False          # condition number exceeded the configured cap

    def as_dict(self) -> dict:
        return {
            "feature_ids": list(self.feature_ids),
            "psi": [float(v) for v in self.psi],
            "spread": [float(v) for v in self.spread],
            "n_samples": int(self.n_samples),
            "condition": float(self.condition),
            "seed": int(self.seed),
            "flagged": bool(self.flagged),
        }


def weighted_ridge(dx: np.ndarray, dz: np.ndarray, w: np.ndarray,
                   k: float = 0.0) -> np.ndarray:
    """Exact minimizer of ||dz_hat - dz||^2_W + k ||psi||^2.

    ``w`` holds the diagonal of W. With k = 0 and unit weights this is
    ordinary least squares. Raises SingularityError (with the condition
    number attached) when the normal matrix is not usably invertible.
    """
    dx = np.asarray(dx, dtype=float)
    dz = np.asarray(dz, dtype=float)
    w = np.asarray(w, dtype=float)
    m = dx.shape[1]
    g = dx.T @ (w[:, None] * dx) + k * np.eye(m)
    rhs = dx.T @ (w * dz)
    cond = float(np.linalg.cond(g))
    if not np.isfinite(cond) or cond > 1e13:
        raise SingularityError(
            f"normal matrix is singular to working precision (cond={cond:.3e})",
            cond,
        )
    return np.linalg.solve(g, rhs)


def forgetting_weights(n: int, lam: float) -> np.ndarray:
    return lam ** np.arange(n - 1, -1, -1, dtype=float)


def naer_estimate(window: SampleWindow, cfg: EstimatorConfig) -> SensitivityEstimate:
    """Noise-assisted ensemble regression over the sample window.

    Each replicate re-fits the weighted ridge on a copy of the design
    matrix perturbed by zero-mean Gaussian noise with per-column std
    equal to ``noise_fraction`` times that column's std. Replicates whose
    normal matrix degenerates are skipped; if all fail the estimation
    fails. The aggregate is the entrywise median, which makes the result
    independent of replicate order.
    """
    cfg.validate()
    dx, dz, _ = window.matrices()
    n, m = dx.shape
    if n == 0:
        raise EstimationError("window is empty")
    if n < m and cfg.ridge_k == 0.0:
        raise EstimationError(
            f"window underdetermined: {n} samples for {m} features with k=0"
        )
    w = forgetting_weights(n, cfg.forgetting)

    g = dx.T @ (w[:, None] * dx) + cfg.ridge_k * np.eye(m)
    condition = float(np.linalg.cond(g))

    rng = np.random.default_rng(cfg.seed)
    scale = cfg.noise_fraction * dx.std(axis=0)
    replicates = []
    for _ in range(cfg.ensemble):
        noisy = dx + rng.standard_normal(dx.shape) * scale
        try:
            replicates.append(weighted_ridge(noisy, dz, w, cfg.ridge_k))
        except SingularityError:
            continue
    if not replicates:
        raise EstimationError(
            f"all {cfg.ensemble} replicates were singular (cond={condition:.3e})"
        )
    stack = np.asarray(replicates)
    psi = np.median(stack, axis=0)
    spread = stack.std(axis=0)
    return SensitivityEstimate(
        psi=psi,
        feature_ids=list(window.feature_ids),
        n_samples=n,
        condition=condition,
        spread=spread,
        seed=cfg.seed,
        flagged=condition > cfg.condition_cap,
    )


def reduce_features(
    case: NetworkCase,
    mode: Mode,
    op=None,
    budget: int = 8,
) -> list[Feature]:
    """Select the regression/dispatch feature set for the target mode.

    In order: non-dispatchable generators and the slack generator are
    dropped; generators sharing a station id are clustered into one
    aggregate feature; the survivors are ranked by rotor-speed
    participation in the target mode and the top ``budget`` kept.
    """
    if not mode.electromechanical:
        raise FeatureReductionError("target mode is not electromechanical")
    if budget < 2:
        raise FeatureReductionError("feature budget must be >= 2")
    slack = case.slack_gen
    keep = [
        i for i, g in enumerate(case.generators)
        if g.dispatchable and i != slack
    ]
    stations: dict[str, list[int]] = {}
    order: list[str] = []
    for i in keep:
        st = case.generators[i].station
        if st not in stations:
            stations[st] = []
            order.append(st)
        stations[st].append(i)

    feats: list[tuple[Feature, float]] = []
    for st in order:
        members = stations[st]
        fid = st if len(members) > 1 else f"G{members[0] + 1}"
        score = float(sum(mode.participation[i] for i in members))
        feats.append((Feature(id=fid, generators=tuple(members)), score))
    if len(feats) < 2:
        raise FeatureReductionError(
            f"only {len(feats)} dispatchable feature(s) available"
        )
    feats.sort(key=lambda fs: (-fs[1], fs[0].generators[0]))
    kept = feats[: min(budget, len(feats))]
    kept.sort(key=lambda fs: fs[0].generators[0])  # stable case-file order
    return [f for f, _ in kept]
