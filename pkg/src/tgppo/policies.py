"""Classical branching rules used as baselines and for reward normalisation."""

import math

import numpy as np

from .bnb import RELIABILITY, BranchingPolicy

SCORE_EPS = 1e-6
# gain assigned to an infeasible strong-branching child
INFEASIBLE_GAIN = 1e6


def _fractions(ctx):
    x = ctx.current.lp_solution[ctx.candidates]
    return x - np.floor(x)


def _strong_score(ctx, var, update):
    parent = ctx.current.lp_bound
    down, up = ctx.strong_branch(var, update_pseudocosts=update)
    gd = INFEASIBLE_GAIN if math.isinf(down) else max(down - parent, 0.0)
    gu = INFEASIBLE_GAIN if math.isinf(up) else max(up - parent, 0.0)
    return max(gd, SCORE_EPS) * max(gu, SCORE_EPS)


class RandomPolicy(BranchingPolicy):
    name = "random"

    def decide(self, state, ctx):
        return int(ctx.rng.integers(len(ctx.candidates)))


class MostFractionalPolicy(BranchingPolicy):
    name = "most_fractional"

    def decide(self, state, ctx):
        f = _fractions(ctx)
        return int(np.argmax(np.minimum(f, 1 - f)))


class PscostPolicy(BranchingPolicy):
    name = "pscost"

    def decide(self, state, ctx):
        f = _fractions(ctx)
        return int(np.argmax(ctx.pseudocosts.product_scores(ctx.candidates, f)))


class StrongPolicy(BranchingPolicy):
    """Full strong branching: product of the two child-bound improvements."""

    name = "strong"

    def decide(self, state, ctx):
        scores = [_strong_score(ctx, v, update=False) for v in ctx.candidates]
        return int(np.argmax(scores))


class RelpscostLikePolicy(BranchingPolicy):
    """Strong branching on candidates whose up and down pseudocosts are not
    yet both backed by ``reliability`` observations; pseudocosts otherwise.
    Strong-branching results feed the pseudocost table."""

    name = "relpscost"

    def __init__(self, reliability=RELIABILITY):
        self.reliability = reliability

    def decide(self, state, ctx):
        pc = ctx.pseudocosts
        f = _fractions(ctx)
        scores = np.empty(len(ctx.candidates))
        for k, v in enumerate(ctx.candidates):
            if min(pc.up_count[v], pc.down_count[v]) < self.reliability:
                scores[k] = _strong_score(ctx, v, update=True)
            else:
                scores[k] = pc.product_scores([v], f[k:k + 1])[0]
        return int(np.argmax(scores))


BASELINES = {
    "random": RandomPolicy,
    "most_fractional": MostFractionalPolicy,
    "pscost": PscostPolicy,
    "strong": StrongPolicy,
    "relpscost": RelpscostLikePolicy,
}


def baseline_policies():
    """Fresh instances of the five classical rules, keyed by name."""
    return {name: cls() for name, cls in BASELINES.items()}


def make_policy(name):
    try:
        return BASELINES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(BASELINES)}") from None
