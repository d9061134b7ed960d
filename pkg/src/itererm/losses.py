"""Losses, link functions, noise models and selection policies.

Loss objects expose the exact derivative surface the asymptotic solver
consumes: value and first/second derivatives in the prediction argument,
plus the mixed prediction/base-prediction partial for second-stage losses.
All callables are vectorized and broadcast over numpy arrays; objects are
immutable after construction and safe to share across workers.

Conventions: sign(0) = +1 everywhere; class ids enter losses by value
(e.g. {0, 1} for budgeted selection, {-1, +1} for mixture labels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

Array = np.ndarray


def _sign(x):
    """Sign with the deterministic convention sign(0) = +1."""
    return np.where(np.asarray(x, dtype=float) >= 0.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# links and noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkFunction:
    """Deterministic label rule y = eval(s, c, eps)."""

    name: str
    eval: Callable[[Array, Array, Array], Array]


def sign_link() -> LinkFunction:
    """y = eps * sign(s); reduces to sign(s) under the identity noise."""
    return LinkFunction("sign", lambda s, c, eps: np.asarray(eps, float) * _sign(s))


def class_flip_link() -> LinkFunction:
    """y = c * eps: the cluster label, possibly flipped by the noise."""
    return LinkFunction("class", lambda s, c, eps: np.asarray(c, float) * np.asarray(eps, float))


def identity_link() -> LinkFunction:
    """y = s + eps (regression targets)."""
    return LinkFunction("identity", lambda s, c, eps: np.asarray(s, float) + np.asarray(eps, float))


@dataclass(frozen=True)
class NoiseModel:
    """Sampler for the per-sample noise variable; all moments finite."""

    name: str
    sample: Callable[[np.random.Generator, int], Array]
    support: str


def no_noise(value: float = 1.0) -> NoiseModel:
    """Point mass (the identity noise for multiplicative links at 1.0)."""
    return NoiseModel(f"point({value:g})",
                      lambda rng, n: np.full(n, float(value)),
                      f"{{{value:g}}}")


def flip_noise(p: float) -> NoiseModel:
    """eps in {+1, -1} with P(eps = -1) = p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    return NoiseModel(f"flip({p:g})",
                      lambda rng, n: np.where(rng.random(n) < p, -1.0, 1.0),
                      "{-1, +1}")


# ---------------------------------------------------------------------------
# stage losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage0Loss:
    """First-stage loss l0(u, s, c, eps), convex in u.

    d1/d2/d3 are derivatives with respect to the prediction u.
    """

    name: str
    eval: Callable
    d1: Callable
    d2: Callable
    d3: Callable


@dataclass(frozen=True)
class Stage1Loss:
    """Second-stage loss l(r, u, s, c, eps), convex in r.

    dr/drr differentiate in r, du in the base prediction u, dru is the
    mixed partial.  u_smooth is False when the u-derivatives follow the
    almost-everywhere-zero convention of an exact indicator policy; the
    asymptotic solver refuses such losses unless explicitly allowed.
    """

    name: str
    eval: Callable
    dr: Callable
    drr: Callable
    du: Callable
    dru: Callable
    u_smooth: bool = True


def _zeros_like_first(*args):
    return np.zeros(np.broadcast(*[np.asarray(a) for a in args]).shape)


def make_zero_pair(link: LinkFunction | None = None) -> tuple[Stage0Loss, Stage1Loss]:
    """Identically-zero losses; both stages collapse to pure ridge shrinkage."""
    del link   # labels never enter
    z2 = lambda u, s, c, eps: _zeros_like_first(u, s)
    z3 = lambda r, u, s, c, eps: _zeros_like_first(r, u, s)
    loss0 = Stage0Loss("zero", z2, z2, z2, z2)
    loss1 = Stage1Loss("zero", z3, z3, z3, z3, z3)
    return loss0, loss1


def make_logistic_pair(link: LinkFunction | None = None) -> tuple[Stage0Loss, Stage1Loss]:
    """log(1 + exp(-y z)) in both stages, with y from the link (default sign)."""
    link = link or sign_link()

    def lval(z, y):
        return np.logaddexp(0.0, -y * z)

    def ld1(z, y):
        return -y * expit(-y * z)

    def ld2(z, y):
        p = expit(-y * z)
        return p * (1.0 - p)

    def ld3(z, y):
        # y^2 = 1 for sign labels; keep the general form
        p = expit(-y * z)
        return y * p * (1.0 - p) * (2.0 * p - 1.0)

    def y_of(s, c, eps):
        return link.eval(np.asarray(s, float), c, eps)

    loss0 = Stage0Loss(
        "logistic",
        lambda u, s, c, eps: lval(u, y_of(s, c, eps)),
        lambda u, s, c, eps: ld1(u, y_of(s, c, eps)),
        lambda u, s, c, eps: ld2(u, y_of(s, c, eps)),
        lambda u, s, c, eps: ld3(u, y_of(s, c, eps)),
    )
    zero5 = lambda r, u, s, c, eps: _zeros_like_first(r, u, s)
    loss1 = Stage1Loss(
        "logistic",
        lambda r, u, s, c, eps: lval(r, y_of(s, c, eps)),
        lambda r, u, s, c, eps: ld1(r, y_of(s, c, eps)),
        lambda r, u, s, c, eps: ld2(r, y_of(s, c, eps)),
        zero5,
        zero5,
    )
    return loss0, loss1


def make_square_pair(link: LinkFunction | None = None) -> tuple[Stage0Loss, Stage1Loss]:
    """0.5 * (z - y)^2 in both stages, with y from the link (default sign)."""
    link = link or sign_link()

    def y_of(s, c, eps):
        return link.eval(np.asarray(s, float), c, eps)

    loss0 = Stage0Loss(
        "square",
        lambda u, s, c, eps: 0.5 * (u - y_of(s, c, eps)) ** 2,
        lambda u, s, c, eps: u - y_of(s, c, eps),
        lambda u, s, c, eps: np.ones(np.broadcast(np.asarray(u), np.asarray(s)).shape),
        lambda u, s, c, eps: _zeros_like_first(u, s),
    )
    zero5 = lambda r, u, s, c, eps: _zeros_like_first(r, u, s)
    loss1 = Stage1Loss(
        "square",
        lambda r, u, s, c, eps: 0.5 * (r - y_of(s, c, eps)) ** 2,
        lambda r, u, s, c, eps: r - y_of(s, c, eps),
        lambda r, u, s, c, eps: np.ones(np.broadcast(np.asarray(r), np.asarray(s)).shape),
        zero5,
        zero5,
    )
    return loss0, loss1


# ---------------------------------------------------------------------------
# selection policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionPolicy:
    """Sample-keeping weight pi(u, c, eps) in [0, 1].

    width > 0 replaces the hard indicator by a logistic ramp of that width
    so the weight is twice differentiable; width = 0 keeps the exact
    indicator with almost-everywhere-zero derivatives (smooth = False).
    d1/d2 differentiate in u.
    """

    kind: str
    eval: Callable
    d1: Callable
    d2: Callable
    width: float
    smooth: bool
    kappa_minus: float = field(default=float("nan"))
    kappa_plus: float = field(default=float("nan"))
    level: float = field(default=float("nan"))

    @property
    def label(self) -> str:
        return self.kind


def _const_policy_fns(value: float):
    ev = lambda u, c, eps: np.full(np.broadcast(np.asarray(u), np.asarray(c)).shape, value)
    zz = lambda u, c, eps: _zeros_like_first(u, c)
    return ev, zz, zz


def constant_policy(p: float) -> SelectionPolicy:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"constant policy level must lie in [0, 1], got {p}")
    ev, z1, z2 = _const_policy_fns(p)
    return SelectionPolicy("constant", ev, z1, z2, width=0.0, smooth=True, level=p)


def _sigmoid_bundle(t_of_u, dt_du):
    """sigma(t(u)) with first/second u-derivatives for affine-in-|u| ramps."""

    def ev(u, c, eps):
        return expit(t_of_u(u, c, eps))

    def d1(u, c, eps):
        p = expit(t_of_u(u, c, eps))
        return p * (1.0 - p) * dt_du(u, c, eps)

    def d2(u, c, eps):
        p = expit(t_of_u(u, c, eps))
        return p * (1.0 - p) * (1.0 - 2.0 * p) * dt_du(u, c, eps) ** 2

    return ev, d1, d2


def small_margin_policy(kappa: float, width: float = 0.0) -> SelectionPolicy:
    """Keep samples with |u| < kappa (near the decision boundary).

    kappa = 0 selects nothing, kappa = +inf selects everything; both
    sentinels stay exact constants regardless of the smoothing width.
    """
    if kappa < 0 or width < 0:
        raise ValueError("kappa and width must be nonnegative")
    if kappa == 0.0:
        ev, z1, z2 = _const_policy_fns(0.0)
        return SelectionPolicy("small-margin", ev, z1, z2, width, True, kappa_minus=kappa)
    if np.isinf(kappa):
        ev, z1, z2 = _const_policy_fns(1.0)
        return SelectionPolicy("small-margin", ev, z1, z2, width, True, kappa_minus=kappa)
    if width == 0.0:
        ev = lambda u, c, eps: (np.abs(u) < kappa).astype(float)
        z = lambda u, c, eps: _zeros_like_first(u)
        return SelectionPolicy("small-margin", ev, z, z, 0.0, False, kappa_minus=kappa)
    ev, d1, d2 = _sigmoid_bundle(
        lambda u, c, eps: (kappa - np.abs(u)) / width,
        lambda u, c, eps: -_sign(u) / width,
    )
    return SelectionPolicy("small-margin", ev, d1, d2, width, True, kappa_minus=kappa)


def large_margin_policy(kappa: float, width: float = 0.0) -> SelectionPolicy:
    """Keep samples with |u| > kappa (far from the decision boundary)."""
    if kappa < 0 or width < 0:
        raise ValueError("kappa and width must be nonnegative")
    if kappa == 0.0:
        ev, z1, z2 = _const_policy_fns(1.0)
        return SelectionPolicy("large-margin", ev, z1, z2, width, True, kappa_plus=kappa)
    if np.isinf(kappa):
        ev, z1, z2 = _const_policy_fns(0.0)
        return SelectionPolicy("large-margin", ev, z1, z2, width, True, kappa_plus=kappa)
    if width == 0.0:
        ev = lambda u, c, eps: (np.abs(u) > kappa).astype(float)
        z = lambda u, c, eps: _zeros_like_first(u)
        return SelectionPolicy("large-margin", ev, z, z, 0.0, False, kappa_plus=kappa)
    ev, d1, d2 = _sigmoid_bundle(
        lambda u, c, eps: (np.abs(u) - kappa) / width,
        lambda u, c, eps: _sign(u) / width,
    )
    return SelectionPolicy("large-margin", ev, d1, d2, width, True, kappa_plus=kappa)


def mixed_margin_policy(kappa_minus: float, kappa_plus: float,
                        width: float = 0.0) -> SelectionPolicy:
    """Keep |u| < kappa_minus together with |u| > kappa_plus."""
    if kappa_minus > kappa_plus:
        raise ValueError(
            f"mixed policy needs kappa_minus <= kappa_plus, got {kappa_minus} > {kappa_plus}")
    inner = small_margin_policy(kappa_minus, width)
    outer = large_margin_policy(kappa_plus, width)
    ev = lambda u, c, eps: inner.eval(u, c, eps) + outer.eval(u, c, eps)
    d1 = lambda u, c, eps: inner.d1(u, c, eps) + outer.d1(u, c, eps)
    d2 = lambda u, c, eps: inner.d2(u, c, eps) + outer.d2(u, c, eps)
    return SelectionPolicy("mixed", ev, d1, d2, width,
                           inner.smooth and outer.smooth,
                           kappa_minus=kappa_minus, kappa_plus=kappa_plus)


def correct_classified_policy(width: float = 0.0) -> SelectionPolicy:
    """Keep samples the base classifier labels like the observed label c*eps."""
    if width < 0:
        raise ValueError("width must be nonnegative")
    if width == 0.0:
        ev = lambda u, c, eps: (_sign(u) == np.asarray(c, float) * np.asarray(eps, float)).astype(float)
        z = lambda u, c, eps: _zeros_like_first(u, c)
        return SelectionPolicy("correct-classified", ev, z, z, 0.0, False)
    ev, d1, d2 = _sigmoid_bundle(
        lambda u, c, eps: np.asarray(c, float) * np.asarray(eps, float) * u / width,
        lambda u, c, eps: np.asarray(c, float) * np.asarray(eps, float) / width,
    )
    return SelectionPolicy("correct-classified", ev, d1, d2, width, True)


# ---------------------------------------------------------------------------
# two-stage loss constructors
# ---------------------------------------------------------------------------

def make_al_losses(base0: Stage0Loss, base1: Stage1Loss, policy: SelectionPolicy,
                   psi: float, gamma: float) -> tuple[Stage0Loss, Stage1Loss]:
    """Budgeted-selection losses on classes {0, 1} with P(c=1) = psi.

    The base stage trains on the c=1 samples with weight c/psi; the final
    stage trains with weight ((1-c) pi(u) + c)/gamma.  Dividing by psi and
    gamma absorbs the per-subset risk normalizations into the generic
    1/n risk, so the regularization strengths keep their nominal meaning.
    """
    if psi <= 0 or psi > gamma or gamma > 1:
        raise ValueError(f"need 0 < psi <= gamma <= 1, got psi={psi}, gamma={gamma}")

    def w0(c):
        return np.asarray(c, float) / psi

    loss0 = Stage0Loss(
        f"al0({base0.name})",
        lambda u, s, c, eps: w0(c) * base0.eval(u, s, c, eps),
        lambda u, s, c, eps: w0(c) * base0.d1(u, s, c, eps),
        lambda u, s, c, eps: w0(c) * base0.d2(u, s, c, eps),
        lambda u, s, c, eps: w0(c) * base0.d3(u, s, c, eps),
    )

    def w1(u, c, eps):
        c = np.asarray(c, float)
        return ((1.0 - c) * policy.eval(u, c, eps) + c) / gamma

    def dw1(u, c, eps):
        c = np.asarray(c, float)
        return (1.0 - c) * policy.d1(u, c, eps) / gamma

    loss1 = Stage1Loss(
        f"al1({base1.name},{policy.label})",
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.eval(r, u, s, c, eps),
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.dr(r, u, s, c, eps),
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.drr(r, u, s, c, eps),
        lambda r, u, s, c, eps: (dw1(u, c, eps) * base1.eval(r, u, s, c, eps)
                                 + w1(u, c, eps) * base1.du(r, u, s, c, eps)),
        lambda r, u, s, c, eps: (dw1(u, c, eps) * base1.dr(r, u, s, c, eps)
                                 + w1(u, c, eps) * base1.dru(r, u, s, c, eps)),
        u_smooth=policy.smooth and base1.u_smooth,
    )
    return loss0, loss1


def make_pruning_losses(base0: Stage0Loss, base1: Stage1Loss,
                        policy: SelectionPolicy) -> tuple[Stage0Loss, Stage1Loss]:
    """Pruning losses: base stage on every sample, final stage reweighted by pi."""

    def w1(u, c, eps):
        return policy.eval(u, c, eps)

    def dw1(u, c, eps):
        return policy.d1(u, c, eps)

    loss1 = Stage1Loss(
        f"prune({base1.name},{policy.label})",
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.eval(r, u, s, c, eps),
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.dr(r, u, s, c, eps),
        lambda r, u, s, c, eps: w1(u, c, eps) * base1.drr(r, u, s, c, eps),
        lambda r, u, s, c, eps: (dw1(u, c, eps) * base1.eval(r, u, s, c, eps)
                                 + w1(u, c, eps) * base1.du(r, u, s, c, eps)),
        lambda r, u, s, c, eps: (dw1(u, c, eps) * base1.dr(r, u, s, c, eps)
                                 + w1(u, c, eps) * base1.dru(r, u, s, c, eps)),
        u_smooth=policy.smooth and base1.u_smooth,
    )
    return base0, loss1
