"""Per-instance optimal temperature for the robust loss.

f(z, .) is convex on (0, inf) -- its second derivative is a Gibbs variance --
so the minimum over [tau0, inf) is either at the boundary, exactly when the
gradient at tau0 is already nonnegative, or at the unique interior root of
the gradient. newton_solve decides the boundary case up front from that
gradient sign, then runs Newton updates tau <- tau - grad/hess safeguarded by
bisection on a maintained sign-change bracket. golden_section_oracle is an
independent derivative-free minimizer used to cross-check the solver, and
batch_solve drives lists of instances.

The gradient equals rho - KL(gibbs(tau), uniform) and tends to rho as tau
grows, so for rho > 0 a finite minimizer always exists; the bracket_hi guard
only fires for pathological configurations such as rho = 0 with non-constant
margins, where the infimum sits at tau = infinity.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .dro_core import DroConfig, LogitSet, grad_tau, hess_tau, robust_loss
from .errors import DomainError

__all__ = [
    "SolveStatus",
    "SolverOptions",
    "TauSolution",
    "UnboundedDescentError",
    "BatchSolveError",
    "newton_solve",
    "golden_section_oracle",
    "batch_solve",
]

_MIN_CURVATURE = 1e-14


class SolveStatus(enum.Enum):
    INTERIOR = "Interior"
    CLAMPED_AT_TAU0 = "ClampedAtTau0"
    MAX_ITER_REACHED = "MaxIterReached"


class UnboundedDescentError(RuntimeError):
    """The gradient stayed negative past bracket_hi; no finite minimizer found."""


class BatchSolveError(RuntimeError):
    """A batch instance failed; carries the failing index and the cause."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"instance {index}: {cause}")


@dataclass(frozen=True)
class SolverOptions:
    init_tau: float = 1.0
    tol: float = 1e-8
    max_iter: int = 50
    bracket_hi: float = 1e3

    def __post_init__(self):
        if not (math.isfinite(self.init_tau) and self.init_tau > 0):
            raise DomainError(f"init_tau must be > 0, got {self.init_tau}")
        if not (math.isfinite(self.tol) and self.tol > 0):
            raise DomainError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise DomainError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.bracket_hi <= self.init_tau:
            raise DomainError(
                f"bracket_hi must exceed init_tau, got {self.bracket_hi} <= {self.init_tau}"
            )


@dataclass(frozen=True)
class TauSolution:
    tau: float
    status: SolveStatus
    iterations: int
    final_grad: float


def newton_solve(
    ls: LogitSet, cfg: DroConfig, opts: SolverOptions = SolverOptions()
) -> TauSolution:
    """Minimize f(z, tau) over tau >= tau0.

    Convexity makes the clamp decision exact: grad_tau(tau0) >= 0 means the
    whole ray is nondecreasing and tau0 is the minimizer. Otherwise a sign
    change is bracketed (doubling up to bracket_hi) and Newton iterates from
    init_tau, replacing any step that leaves the open bracket, or that meets
    curvature <= 1e-14, with a bisection step. Stops when |delta tau| < tol
    and |grad| < tol * max(1, rho).
    """
    g0 = grad_tau(ls, cfg.tau0, cfg)
    if g0 >= 0.0:
        return TauSolution(cfg.tau0, SolveStatus.CLAMPED_AT_TAU0, 0, g0)

    # bracket the root: grad(lo) < 0 <= grad(hi)
    lo, hi = cfg.tau0, max(2.0 * cfg.tau0, opts.init_tau)
    g_hi = grad_tau(ls, hi, cfg)
    while g_hi < 0.0:
        lo = hi
        hi *= 2.0
        if hi > opts.bracket_hi:
            raise UnboundedDescentError(
                f"gradient still {g_hi:.3e} at tau={lo:.3e}; "
                f"no minimizer below bracket_hi={opts.bracket_hi}"
            )
        g_hi = grad_tau(ls, hi, cfg)

    x = min(max(opts.init_tau, lo), hi)
    g = grad_tau(ls, x, cfg)
    grad_scale = max(1.0, cfg.rho)
    for iteration in range(1, opts.max_iter + 1):
        if g < 0.0:
            lo = x
        else:
            hi = x
        curvature = hess_tau(ls, x)
        if curvature <= _MIN_CURVATURE:
            nxt = 0.5 * (lo + hi)
        else:
            nxt = x - g / curvature
            if not (lo < nxt < hi):
                nxt = 0.5 * (lo + hi)
        delta = abs(nxt - x)
        x = nxt
        g = grad_tau(ls, x, cfg)
        if delta < opts.tol and abs(g) < opts.tol * grad_scale:
            return TauSolution(x, SolveStatus.INTERIOR, iteration, g)
    return TauSolution(x, SolveStatus.MAX_ITER_REACHED, opts.max_iter, g)


def golden_section_oracle(
    ls: LogitSet, cfg: DroConfig, lo: float, hi: float, tol: float = 1e-9
) -> float:
    """Minimizer of f(z, .) on [lo, hi] within tol, by golden-section search.

    Derivative-free and independent of the Newton path; correct because f is
    unimodal on the interval (convexity).
    """
    lo, hi = float(lo), float(hi)
    if lo >= hi:
        raise DomainError(f"golden section needs lo < hi, got [{lo}, {hi}]")
    if lo < cfg.tau0:
        raise DomainError(f"lo must be >= tau0={cfg.tau0}, got {lo}")
    if not (math.isfinite(tol) and tol > 0):
        raise DomainError(f"tol must be > 0, got {tol}")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = robust_loss(ls, c, cfg)
    fd = robust_loss(ls, d, cfg)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = robust_loss(ls, c, cfg)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = robust_loss(ls, d, cfg)
    mid = 0.5 * (a + b)
    # the boundary can win when the interior never descends (e.g. f = tau*rho)
    candidates = [(robust_loss(ls, t, cfg), t) for t in (lo, mid, hi)]
    return min(candidates)[1]


def batch_solve(
    instances: list[LogitSet], cfg: DroConfig, opts: SolverOptions = SolverOptions()
) -> list[TauSolution]:
    """newton_solve over a list, order preserved.

    Purely elementwise, so results are independent of any scheduling; errors
    are re-raised with the failing instance index attached.
    """
    if not instances:
        raise DomainError("batch_solve needs a nonempty instance list")
    out = []
    for index, ls in enumerate(instances):
        try:
            out.append(newton_solve(ls, cfg, opts))
        except Exception as exc:
            raise BatchSolveError(index, exc) from exc
    return out
