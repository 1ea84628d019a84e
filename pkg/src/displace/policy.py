"""Targeting rules, targeting curves, and optimal shallow policy trees.

A rule is a total preorder over workers computable from covariates (plus
the CATE for the model-based rule); ties are broken by a seeded random
key, and the seed is recorded with every curve. Policy trees of depth at
most two are fit by exhaustive search over per-covariate quantile
threshold grids against doubly robust scores net of a per-person cost.

Sign convention: losses are negative, the policy treats workers whose
leaf mean score plus cost is negative, and the reported objective
(minimized) is sum over treated of (score + cost). Lower is better.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import ConfigError, DataError
from .evaluate import group_ate, cluster_ols

__all__ = [
    "TargetingRule",
    "TargetingCurve",
    "PolicyTree",
    "threshold_grid",
    "tree_objective",
    "fit_policy_tree",
    "targeting_curve",
    "evaluate_policy",
]

DEFAULT_FRACTIONS = (0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass
class TargetingRule:
    """Worker prioritization: kind in {random, covariate, pair, cate,
    policy_tree}. keys holds (column, direction) with direction 'asc'
    meaning small values are targeted first."""

    kind: str
    keys: list[tuple[str, str]] = field(default_factory=list)
    tree: "PolicyTree | None" = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("random", "covariate", "pair", "cate", "policy_tree"):
            raise ConfigError(f"unknown targeting rule kind {self.kind!r}")
        if not self.name:
            self.name = self.kind if self.kind in ("random", "cate") else \
                self.kind + ":" + "+".join(c for c, _ in self.keys)

    def _key_columns(self, data: pd.DataFrame) -> list[np.ndarray]:
        cols = []
        for col, direction in self.keys:
            x = data[col].to_numpy(dtype=float)
            cols.append(x if direction == "asc" else -x)
        return cols

    def ranks(self, data: pd.DataFrame, seed: int) -> np.ndarray:
        """0-based priority ranks; rank 0 is targeted first. Exact ties are
        resolved by a seeded uniform draw."""
        n = len(data)
        tiebreak = substream(seed, f"rule/{self.name}").random(n)
        if self.kind == "random":
            keys = [tiebreak]
        elif self.kind == "cate":
            keys = [tiebreak, data["cate"].to_numpy(dtype=float)]
        elif self.kind in ("covariate", "pair"):
            cols = self._key_columns(data)
            keys = [tiebreak] + cols[::-1]
        else:  # policy_tree
            treat = self.tree.apply(data)
            keys = [tiebreak, np.where(treat, 0.0, 1.0)]
        order = np.lexsort(keys)
        ranks = np.empty(n, dtype=np.int64)
        ranks[order] = np.arange(n)
        return ranks


@dataclass
class TargetingCurve:
    rule: str
    seed: int
    fractions: list[float]
    ates: list[float]
    ses: list[float]
    n_selected: list[int]
    low_power: list[bool]

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "rule": self.rule, "fraction": self.fractions, "ate": self.ates,
            "se": self.ses, "n_selected": self.n_selected, "low_power": self.low_power,
        })


def targeting_curve(test_data: pd.DataFrame, rule: TargetingRule,
                    fractions=DEFAULT_FRACTIONS, seed: int = 0) -> TargetingCurve:
    """Effect among the worst-first selected fraction of displaced workers.

    Selection ranks displaced workers by the rule; the selected group's
    ATE is the matched treated-minus-control difference (the matched
    controls of selected workers follow them into the group). Fractions
    are realized within one worker of the target; selections of fewer
    than 10 treated are flagged as low power.
    """
    treated = test_data[test_data["treated"] == 1].sort_values("worker_id")
    if treated.empty:
        raise DataError("targeting needs displaced workers in the test set")
    ranks = rule.ranks(treated, seed)
    order = np.argsort(ranks, kind="stable")
    ids_in_order = treated["worker_id"].to_numpy()[order]
    n_t = len(treated)

    ates, ses, counts, flags = [], [], [], []
    for frac in fractions:
        k = int(round(frac * n_t))
        k = max(1, min(k, n_t))
        chosen = set(ids_in_order[:k].tolist())
        group = test_data[test_data["match_id"].isin(
            treated.loc[treated["worker_id"].isin(chosen), "match_id"]
        )]
        (est,) = group_ate(group, np.zeros(len(group)))
        ates.append(est.ate)
        ses.append(est.se_clustered)
        counts.append(k)
        flags.append(k < 10)
    return TargetingCurve(rule.name, seed, list(fractions), ates, ses, counts, flags)


# ---------------------------------------------------------------------------
# policy trees


@dataclass
class PolicyTree:
    """Depth <= 2 decision tree with treat/pass leaves.

    node layout: {"kind": "leaf", "treat": bool} or
    {"kind": "split", "feature": name, "threshold": x, "left":..., "right":...}
    (left branch takes covariate <= threshold).
    """

    root: dict
    objective: float
    covariate_names: list[str]
    cost: float
    degenerate: str | None = None  # "all_treat" | "all_pass" | None

    def apply(self, data: pd.DataFrame) -> np.ndarray:
        def walk(node, mask, out):
            if node["kind"] == "leaf":
                out[mask] = node["treat"]
                return
            x = data[node["feature"]].to_numpy(dtype=float)
            left = mask & (x <= node["threshold"])
            walk(node["left"], left, out)
            walk(node["right"], mask & ~left, out)

        out = np.zeros(len(data), dtype=bool)
        walk(self.root, np.ones(len(data), dtype=bool), out)
        return out

    def to_dict(self) -> dict:
        return {
            "root": self.root, "objective": self.objective, "cost": self.cost,
            "covariate_names": self.covariate_names, "degenerate": self.degenerate,
        }


def threshold_grid(x: np.ndarray, n_quantiles: int = 50) -> np.ndarray:
    """Candidate thresholds: distinct quantiles of the covariate (all
    distinct values when there are fewer than requested)."""
    vals = np.unique(np.asarray(x, dtype=float))
    if len(vals) <= 1:
        return np.empty(0)
    if len(vals) <= n_quantiles:
        return vals[:-1]  # splitting at the max keeps the right child empty
    qs = np.quantile(x, np.arange(1, n_quantiles + 1) / (n_quantiles + 1))
    grid = np.unique(qs)
    return grid[grid < vals[-1]]


def _leaf(total_g: float) -> dict:
    return {"kind": "leaf", "treat": bool(total_g < 0.0)}


def tree_objective(data_X: np.ndarray, gamma: np.ndarray, cost: float,
                   root: dict, names: list[str]) -> float:
    """Canonical objective: one masked sum of (gamma + cost) over the
    treated-by-policy set, in input row order. Any two trees inducing the
    same treated set report bit-identical objectives."""
    g = np.asarray(gamma, dtype=float) + cost
    col = {nm: i for i, nm in enumerate(names)}
    treat = np.zeros(len(g), dtype=bool)

    def walk(node, mask):
        if node["kind"] == "leaf":
            if node["treat"]:
                treat[mask] = True
            return
        x = data_X[:, col[node["feature"]]]
        left = mask & (x <= node["threshold"])
        walk(node["left"], left)
        walk(node["right"], mask & ~left)

    walk(root, np.ones(len(g), dtype=bool))
    return float(g[treat].sum())


def _best_child(hists: list[np.ndarray], total: float):
    """Best depth-1 subtree on a subset summarized by per-feature bin sums.
    Returns (value, feature or -1 for leaf, bin index)."""
    best_val = min(0.0, total)
    best_f, best_k = -1, -1
    for f, hist in enumerate(hists):
        if len(hist) <= 1:
            continue
        prefix = np.cumsum(hist[:-1])
        vals = np.minimum(0.0, prefix) + np.minimum(0.0, total - prefix)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_f, best_k = float(vals[k]), f, k
    return best_val, best_f, best_k


def _subset_hists(bins: np.ndarray, g: np.ndarray, rows: np.ndarray,
                  n_bins: list[int]) -> list[np.ndarray]:
    return [
        np.bincount(bins[rows, f], weights=g[rows], minlength=n_bins[f])
        for f in range(bins.shape[1])
    ]


def _child_structure(bins, g, rows, n_bins, thresholds, names):
    total = float(g[rows].sum())
    val, f, k = _best_child(_subset_hists(bins, g, rows, n_bins), total)
    if f < 0:
        return _leaf(total)
    left_rows = rows[bins[rows, f] <= k]
    right_rows = rows[bins[rows, f] > k]
    return {
        "kind": "split", "feature": names[f], "threshold": float(thresholds[f][k]),
        "left": _leaf(float(g[left_rows].sum())),
        "right": _leaf(float(g[right_rows].sum())),
    }


def fit_policy_tree(data: pd.DataFrame, gamma: np.ndarray, cost: float,
                    covariates: list[str], depth: int = 2,
                    n_quantiles: int = 50) -> PolicyTree:
    """Exhaustive search for the optimal depth <= 2 policy tree.

    Thresholds come from per-covariate quantile grids; every (root, left
    child, right child) split combination on the grid is scored and the
    global optimum returned. Ties prefer shallower trees, then smaller
    covariate index, then smaller threshold.
    """
    if depth not in (0, 1, 2):
        raise ConfigError("policy tree depth must be 0, 1, or 2")
    X = data[covariates].to_numpy(dtype=np.float64)
    g = np.asarray(gamma, dtype=float) + cost
    n, p = X.shape
    thresholds = [threshold_grid(X[:, f], n_quantiles) for f in range(p)]
    n_bins = [len(t) + 1 for t in thresholds]
    bins = np.empty((n, p), dtype=np.int64)
    for f in range(p):
        bins[:, f] = np.searchsorted(thresholds[f], X[:, f], side="left")

    total = float(g.sum())
    best_obj = min(0.0, total)
    best = ("leaf",)

    if depth >= 1:
        all_rows = np.arange(n)
        full_hists = _subset_hists(bins, g, all_rows, n_bins)
        for f0 in range(p):
            b0 = n_bins[f0] - 1
            if b0 < 1:
                continue
            order = np.argsort(bins[:, f0], kind="stable")
            sorted_bins = bins[order, f0]
            boundaries = np.searchsorted(sorted_bins, np.arange(n_bins[f0] + 1))
            left_hists = [np.zeros(nb) for nb in n_bins]
            left_total = 0.0
            for k0 in range(b0):
                grp = order[boundaries[k0]:boundaries[k0 + 1]]
                if len(grp):
                    for f in range(p):
                        np.add.at(left_hists[f], bins[grp, f], g[grp])
                    left_total += float(g[grp].sum())
                right_total = total - left_total
                if depth == 2:
                    lv, lf, lk = _best_child(left_hists, left_total)
                    rv, rf, rk = _best_child(
                        [fh - lh for fh, lh in zip(full_hists, left_hists)],
                        right_total,
                    )
                    obj = lv + rv
                else:
                    obj = min(0.0, left_total) + min(0.0, right_total)
                if obj < best_obj - 0.0:
                    best_obj = obj
                    best = ("split", f0, k0)

    if best[0] == "leaf":
        root = _leaf(total)
        degenerate = "all_treat" if root["treat"] else "all_pass"
    else:
        _, f0, k0 = best
        rows = np.arange(n)
        left_rows = rows[bins[:, f0] <= k0]
        right_rows = rows[bins[:, f0] > k0]
        if depth == 2:
            left = _child_structure(bins, g, left_rows, n_bins, thresholds, covariates)
            right = _child_structure(bins, g, right_rows, n_bins, thresholds, covariates)
        else:
            left = _leaf(float(g[left_rows].sum()))
            right = _leaf(float(g[right_rows].sum()))
        root = {
            "kind": "split", "feature": covariates[f0],
            "threshold": float(thresholds[f0][k0]), "left": left, "right": right,
        }
        actions = _leaf_actions(root)
        degenerate = None
        if all(actions):
            degenerate = "all_treat"
        elif not any(actions):
            degenerate = "all_pass"

    objective = tree_objective(X, gamma, cost, root, covariates)
    return PolicyTree(root, objective, list(covariates), cost, degenerate)


def _leaf_actions(node: dict) -> list[bool]:
    if node["kind"] == "leaf":
        return [node["treat"]]
    return _leaf_actions(node["left"]) + _leaf_actions(node["right"])


def evaluate_policy(tree: PolicyTree, test_data: pd.DataFrame,
                    gamma: np.ndarray | None = None) -> dict:
    """Out-of-sample policy evaluation.

    Reports the treated-by-policy share, the mean doubly robust score in
    the treated-by-policy group (clustered SE), and the matched
    treated-minus-control ATE of that group when outcomes are available.
    """
    treat = tree.apply(test_data)
    share = float(treat.mean())
    out = {"share_treated": share, "n_selected": int(treat.sum()), "flagged": False}
    if treat.sum() == 0:
        out.update({"gamma_mean": float("nan"), "gamma_se": float("nan"),
                    "ate": float("nan"), "ate_se": float("nan"), "flagged": True})
        return out
    sub = test_data[treat]
    if gamma is not None:
        gsub = np.asarray(gamma, dtype=float)[treat]
        beta, se = cluster_ols(
            np.ones((len(gsub), 1)), gsub, sub["establishment_id"].to_numpy(),
            row_key=sub["worker_id"].to_numpy(),
        )
        out["gamma_mean"], out["gamma_se"] = float(beta[0]), float(se[0])
    # matched evaluation: the selected treated plus their controls
    chosen = sub.loc[sub["treated"] == 1, "match_id"]
    group = test_data[test_data["match_id"].isin(chosen)]
    if group["treated"].nunique() == 2:
        (est,) = group_ate(group, np.zeros(len(group)))
        out["ate"], out["ate_se"] = est.ate, est.se_clustered
    else:
        out["ate"], out["ate_se"] = float("nan"), float("nan")
        out["flagged"] = True
    return out
