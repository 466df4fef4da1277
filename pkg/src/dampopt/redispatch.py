"""Re-dispatch LP: bounds assembly, compatibility with planned dispatch,
and an exact solver.

The program is: maximize delta subject to psi . (dx_R + dx_O) >= delta,
per-feature box bounds on dx_R + dx_O, optionally sum(dx_R) = 0, and
dx_R = 0 for features already at a capacity limit. At the optimum the
damping row binds, so the solve reduces to maximizing psi . dx_R over a
box (intersected with the balance hyperplane), which is done in closed
form: without balance each component sits at its favourable bound; with
balance a scan over the breakpoints of the dual variable finds the
marginal feature group, whose members are then placed by a minimum-norm
water-fill. Among alternative optima the minimum-Euclidean-norm dx_R is
returned, which keeps results deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DispatchBounds",
    "LpInstance",
    "RedispatchSolution",
    "BoundsError",
    "LpBuildError",
    "RedistributionError",
    "compute_bounds",
    "build_lp",
    "solve_lp",
    "redistribute_planned",
]

AT_LIMIT_EPS = 1e-9


class BoundsError(ValueError):
    pass


class LpBuildError(ValueError):
    pass


class RedistributionError(RuntimeError):
    pass


@dataclass
class DispatchBounds:
    feature_ids: list[str]
    x: np.ndarray          # current dispatch per feature
    lower: np.ndarray      # step bound: max(-ramp, x_lower - x)
    upper: np.ndarray      # step bound: min(+ramp, x_upper - x)
    x_lower: np.ndarray    # capacity window (after any reserve extension)
    x_upper: np.ndarray
    ramp: np.ndarray
    at_limit: np.ndarray   # bool: feature pinned at a capacity bound


def compute_bounds(
    x,
    x_lower,
    x_upper,
    ramp,
    reserve: bool = False,
    capacity=None,
    feature_ids: list[str] | None = None,
) -> DispatchBounds:
    """Per-feature step bounds from ramp limits and the capacity window.

    With the reserve flag set, the capacity window is widened by 20% of
    capacity on both sides (the lower edge never below zero). Features
    sitting on a capacity bound are flagged at-limit. Raises BoundsError
    if the current dispatch falls outside the (possibly widened) window.
    """
    x = np.asarray(x, dtype=float)
    xl = np.asarray(x_lower, dtype=float)
    xu = np.asarray(x_upper, dtype=float)
    ramp = np.asarray(ramp, dtype=float)
    if reserve:
        if capacity is None:
            raise BoundsError("reserve extension requires capacities")
        cap = np.asarray(capacity, dtype=float)
        xu = xu + 0.2 * cap
        xl = np.maximum(xl - 0.2 * cap, 0.0)
    if np.any(x > xu + AT_LIMIT_EPS) or np.any(x < xl - AT_LIMIT_EPS):
        bad = np.flatnonzero((x > xu + AT_LIMIT_EPS) | (x < xl - AT_LIMIT_EPS))
        raise BoundsError(f"dispatch outside capacity window at features {bad.tolist()}")
    lower = np.maximum(-ramp, xl - x)
    upper = np.minimum(ramp, xu - x)
    at_limit = (x >= xu - AT_LIMIT_EPS) | (x <= xl + AT_LIMIT_EPS)
    if feature_ids is None:
        feature_ids = [f"f{i}" for i in range(len(x))]
    return DispatchBounds(
        feature_ids=list(feature_ids),
        x=x, lower=lower, upper=upper,
        x_lower=xl, x_upper=xu, ramp=ramp, at_limit=at_limit,
    )


@dataclass
class LpInstance:
    feature_ids: list[str]
    psi: np.ndarray
    z_lower: np.ndarray       # bounds on dx_R after folding dx_O and fixings
    z_upper: np.ndarray
    balance: bool
    dx_planned: np.ndarray
    fixed: np.ndarray         # bool mask of features pinned to dx_R = 0

    def dump(self) -> str:
        lines = ["max delta"]
        terms = " + ".join(
            f"{self.psi[i]!r}*dx[{fid}]" for i, fid in enumerate(self.feature_ids)
        )
        rhs = -float(self.psi @ self.dx_planned)
        lines.append(f"{terms} - delta >= {rhs!r}")
        for i, fid in enumerate(self.feature_ids):
            lines.append(f"dx[{fid}] >= {self.z_lower[i]!r}")
            lines.append(f"dx[{fid}] <= {self.z_upper[i]!r}")
        if self.balance:
            s = " + ".join(f"dx[{fid}]" for fid in self.feature_ids)
            lines.append(f"{s} = 0")
        return "\n".join(lines)


@dataclass
class RedispatchSolution:
    status: str                       # "optimal" | "infeasible" | "degenerate"
    delta: float
    dx_r: np.ndarray
    feature_ids: list[str]
    binding: list[str]

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "degenerate")


def build_lp(
    psi,
    bounds: DispatchBounds,
    dx_planned=None,
    balance: bool = True,
) -> LpInstance:
    """Assemble the re-dispatch LP with the planned increments folded in.

    The box rows constrain dx_R + dx_O; at-limit features have dx_R fixed
    to zero (their planned increments should already have been
    redistributed). psi may be a SensitivityEstimate or a plain vector.
    """
    psi_vec = np.asarray(getattr(psi, "psi", psi), dtype=float)
    m = len(bounds.feature_ids)
    if m == 0:
        raise LpBuildError("empty feature set")
    if psi_vec.shape != (m,):
        raise LpBuildError(f"psi has shape {psi_vec.shape}, expected ({m},)")
    if not np.all(np.isfinite(psi_vec)):
        raise LpBuildError("psi contains non-finite entries")
    dx_o = (
        np.zeros(m) if dx_planned is None else np.asarray(dx_planned, dtype=float)
    )
    zl = bounds.lower - dx_o
    zu = bounds.upper - dx_o
    fixed = bounds.at_limit.copy()
    zl = np.where(fixed, np.maximum(zl, 0.0), zl)
    zu = np.where(fixed, np.minimum(zu, 0.0), zu)
    return LpInstance(
        feature_ids=list(bounds.feature_ids),
        psi=psi_vec, z_lower=zl, z_upper=zu,
        balance=balance, dx_planned=dx_o, fixed=fixed,
    )


def _waterfill_min_norm(l: np.ndarray, u: np.ndarray, target: float) -> np.ndarray:
    """Minimize sum(z^2) subject to sum(z) = target, l <= z <= u.

    The solution clips a common level mu into every box. h(mu) =
    sum(clip(mu, l, u)) is piecewise linear and nondecreasing, so mu is
    located exactly by scanning the sorted breakpoints.
    """
    if target <= float(np.sum(l)):
        return l.copy()
    if target >= float(np.sum(u)):
        return u.copy()
    pts = np.unique(np.concatenate([l, u]))
    for a, b in zip(pts[:-1], pts[1:]):
        hb = float(np.sum(np.clip(b, l, u)))
        if hb < target:
            continue
        # on (a, b): interior components have l <= a and u >= b
        mid = 0.5 * (a + b)
        free = (l < mid) & (mid < u)
        nfree = int(np.count_nonzero(free))
        if nfree == 0:
            return np.clip(a, l, u)  # h constant on the segment
        fixed_sum = float(np.sum(np.clip(mid, l, u)[~free]))
        mu = (target - fixed_sum) / nfree
        return np.clip(min(max(mu, a), b), l, u)
    return u.copy()


def solve_lp(lp: LpInstance, feas_tol: float = 1e-9) -> RedispatchSolution:
    """Exact optimum of the re-dispatch LP with the minimum-norm tie rule."""
    psi, zl, zu = lp.psi, lp.z_lower, lp.z_upper
    m = len(psi)
    ids = lp.feature_ids

    def infeasible() -> RedispatchSolution:
        return RedispatchSolution(
            status="infeasible", delta=float("nan"),
            dx_r=np.full(m, np.nan), feature_ids=ids, binding=[],
        )

    if np.any(zl > zu + feas_tol):
        return infeasible()
    zl = np.minimum(zl, zu)  # collapse numerical hairlines

    degenerate = False
    if not lp.balance:
        z = np.where(psi > 0, zu, np.where(psi < 0, zl, np.clip(0.0, zl, zu)))
        degenerate = bool(np.any((psi == 0.0) & (zu - zl > feas_tol)))
    else:
        if np.sum(zl) > feas_tol or np.sum(zu) < -feas_tol:
            return infeasible()
        values = np.unique(psi)[::-1]  # descending dual breakpoints
        z = None
        for v in values:
            above = psi > v
            below = psi < v
            at = psi == v
            base = float(np.sum(zu[above]) + np.sum(zl[below]))
            g_minus = base + float(np.sum(zl[at]))
            g_plus = base + float(np.sum(zu[at]))
            if g_minus <= feas_tol and g_plus >= -feas_tol:
                z = np.where(above, zu, np.where(below, zl, 0.0))
                resid = -base
                zf = _waterfill_min_norm(zl[at], zu[at], resid)
                z[at] = zf
                slack_members = int(np.count_nonzero(zu[at] - zl[at] > feas_tol))
                degenerate = slack_members >= 2
                break
        if z is None:
            return infeasible()

    delta = float(psi @ z + psi @ lp.dx_planned)
    binding = ["damping"]
    if lp.balance:
        binding.append("balance")
    for i in range(m):
        if lp.fixed[i]:
            binding.append(f"{ids[i]}:fixed")
        elif abs(z[i] - zu[i]) <= feas_tol and zu[i] - zl[i] > feas_tol:
            binding.append(f"{ids[i]}:upper")
        elif abs(z[i] - zl[i]) <= feas_tol and zu[i] - zl[i] > feas_tol:
            binding.append(f"{ids[i]}:lower")
    status = "degenerate" if degenerate else "optimal"
    return RedispatchSolution(
        status=status, delta=delta, dx_r=z, feature_ids=ids, binding=binding,
    )


def redistribute_planned(
    dx_planned,
    at_limit,
    bounds: DispatchBounds,
) -> np.ndarray:
    """Move planned increments off at-limit features onto the others,
    proportionally to remaining capacity headroom in the spill direction.

    The total planned increment is preserved exactly. Raises
    RedistributionError when the receivers lack the headroom to absorb
    the spill.
    """
    dx_o = np.asarray(dx_planned, dtype=float).copy()
    at = np.asarray(at_limit, dtype=bool)
    if not np.any(at):
        return dx_o
    spill = float(np.sum(dx_o[at]))
    dx_o[at] = 0.0
    if abs(spill) <= 1e-15:
        return dx_o
    recv = ~at
    if not np.any(recv):
        raise RedistributionError("no receiving features remain")
    if spill > 0:
        head = np.clip(bounds.x_upper - (bounds.x + dx_o), 0.0, None)
    else:
        head = np.clip((bounds.x + dx_o) - bounds.x_lower, 0.0, None)
    head[~recv] = 0.0
    total_head = float(np.sum(head))
    if total_head < abs(spill) - 1e-12:
        raise RedistributionError(
            f"spill {spill:.6g} exceeds receiver headroom {total_head:.6g}"
        )
    alloc = spill * head / total_head
    dx_o = dx_o + alloc
    # fold the floating-point residual into the deepest receiver
    resid = spill - float(np.sum(alloc))
    if resid != 0.0:
        dx_o[int(np.argmax(head))] += resid
    return dx_o
