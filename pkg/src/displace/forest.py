"""Cluster-aware regression forests and the honest causal forest.

Both forests subsample at the cluster level: each tree draws
``sample_fraction`` of the clusters without replacement. The causal
forest additionally splits the sampled clusters into a split half that
determines tree structure and an estimation half that fills the leaves
(honesty). Splits maximize the squared difference in child effect
estimates on residualized treatment and outcome; leaves that end up
without treated or control estimation rows are collapsed into their
parent. Predictions use the forest-weight estimator: each training row is
weighted by how often it shares a leaf with the query (leaf-size
normalized per tree), and the ratio of weighted moments is returned.

Nuisance functions (conditional displacement propensity and marginal
outcome) are fitted with the regression forests and predicted
out-of-bag: a row's own cluster never contributes to its nuisance value.

Trees are grown from per-tree seeds derived from (forest seed, tree
index); fitting and prediction are threaded but reductions run in fixed
order, so results do not depend on the thread count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _tree
from ._rng import substream_seed
from .errors import ConfigError, DataError, NumericError

__all__ = [
    "ForestParams",
    "ChildSummary",
    "SplitCandidate",
    "split_score",
    "RegressionForest",
    "NuisanceEstimates",
    "fit_nuisances",
    "CausalForest",
    "load_forest",
]

FORMAT_VERSION = 1
PROPENSITY_CLIP = (0.01, 0.99)


def default_threads() -> int:
    env = os.environ.get("DISPLACE_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


@dataclass
class ForestParams:
    """Hyperparameters; the defaults mirror the estimation setup."""

    num_trees: int = 2000
    sample_fraction: float = 0.5
    mtry: int | None = None  # default: floor(sqrt(p)) + 20
    min_leaf_treated: int = 5
    min_leaf_control: int = 5
    min_node: int = 5
    honesty_fraction: float = 0.5
    alpha: float = 0.05
    imbalance_penalty: float = 0.0
    prune_empty_leaves: bool = True
    seed: int = 0
    n_threads: int | None = None

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is not None:
            return max(1, int(self.mtry))
        return int(math.floor(math.sqrt(p))) + 20

    def validate(self) -> None:
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ConfigError("sample_fraction must lie in (0,1]")
        if not (0.0 < self.honesty_fraction < 1.0):
            raise ConfigError("honesty_fraction must lie in (0,1)")
        if not (0.0 <= self.alpha < 0.5):
            raise ConfigError("alpha must lie in [0,0.5)")
        if min(self.min_leaf_treated, self.min_leaf_control, self.min_node) < 1:
            raise ConfigError("minimum leaf sizes must be >= 1")

    def threads(self) -> int:
        return self.n_threads or default_threads()


@dataclass(frozen=True)
class ChildSummary:
    n: int
    n_treated: int
    n_control: int
    sum_w: float
    sum_y: float
    sum_w2: float
    sum_wy: float


@dataclass(frozen=True)
class SplitCandidate:
    feature_index: int
    threshold: float
    left: ChildSummary
    right: ChildSummary


def split_score(candidate: SplitCandidate, *, min_treated: int = 5, min_control: int = 5,
                alpha: float = 0.05, imbalance_penalty: float = 0.0) -> float:
    """Heterogeneity score of a candidate split.

    Child effects are sum(wy)/sum(w2) over split-half rows; the score is
    n_l*n_r/(n_l+n_r)^2 * (tau_l - tau_r)^2, minus the soft imbalance
    penalty. Candidates violating the child constraints, or with a zero
    treatment-residual second moment in either child, are rejected and
    score -inf.
    """
    L, R = candidate.left, candidate.right
    n = L.n + R.n
    if n == 0:
        return float("-inf")
    min_child = alpha * n
    if L.n < min_child or R.n < min_child:
        return float("-inf")
    if L.n_treated < min_treated or R.n_treated < min_treated:
        return float("-inf")
    if L.n_control < min_control or R.n_control < min_control:
        return float("-inf")
    if L.sum_w2 <= 0.0 or R.sum_w2 <= 0.0:
        return float("-inf")
    d = L.sum_wy / L.sum_w2 - R.sum_wy / R.sum_w2
    score = (L.n * R.n) / (n * n) * d * d
    if imbalance_penalty > 0.0:
        score -= imbalance_penalty * (1.0 / L.n + 1.0 / R.n)
    return score


# ---------------------------------------------------------------------------
# shared tree plumbing


def _canonical_order(row_key: np.ndarray | None, n: int) -> np.ndarray:
    if row_key is None:
        return np.arange(n)
    row_key = np.asarray(row_key)
    if len(row_key) != n:
        raise DataError("row_key length does not match data")
    return np.argsort(row_key, kind="stable")


def _cluster_codes(cluster_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    unique, codes = np.unique(np.asarray(cluster_ids), return_inverse=True)
    return unique, codes.astype(np.int64)


def _compact(feature, threshold, left, right):
    """Drop nodes unreachable after pruning; preorder ids, root first."""
    order = []
    stack = [0]
    while stack:
        node = stack.pop()
        order.append(node)
        if feature[node] >= 0:
            stack.append(int(right[node]))
            stack.append(int(left[node]))
    order = np.asarray(order, dtype=np.int64)
    new_id = np.full(len(feature), -1, np.int32)
    new_id[order] = np.arange(len(order), dtype=np.int32)
    f2 = feature[order].copy()
    t2 = threshold[order].copy()
    l2 = np.where(f2 >= 0, new_id[left[order]], -1).astype(np.int32)
    r2 = np.where(f2 >= 0, new_id[right[order]], -1).astype(np.int32)
    return f2, t2, l2, r2


def _sample_tree_clusters(tree_seed: int, n_clusters: int, sample_fraction: float,
                          honesty_fraction: float | None):
    rng = np.random.default_rng(tree_seed)
    k = max(2, int(round(sample_fraction * n_clusters)))
    k = min(k, n_clusters)
    sampled = rng.permutation(n_clusters)[:k]
    if honesty_fraction is None:
        return np.sort(sampled), None
    n_split = min(max(1, int(round(honesty_fraction * k))), k - 1)
    return np.sort(sampled[:n_split]), np.sort(sampled[n_split:])


def _rows_of(codes: np.ndarray, wanted: np.ndarray, n_clusters: int) -> np.ndarray:
    mask = np.zeros(n_clusters, dtype=bool)
    mask[wanted] = True
    return np.flatnonzero(mask[codes])


def _map_chunks(fn, n: int, threads: int) -> None:
    """Run fn(lo, hi) over disjoint row chunks, possibly in parallel."""
    if n == 0:
        return
    if threads <= 1:
        fn(0, n)
        return
    chunk = max(256, -(-n // (threads * 4)))
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda b: fn(b[0], b[1]), bounds))


class _Flat:
    """Concatenated node arrays for fast routing across all trees."""

    def __init__(self, trees: list[dict], value_keys: tuple[str, ...]):
        sizes = np.array([len(t["feature"]) for t in trees], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.feature = np.concatenate([t["feature"] for t in trees])
        self.threshold = np.concatenate([t["threshold"] for t in trees])
        left = np.concatenate([t["left"] for t in trees])
        right = np.concatenate([t["right"] for t in trees])
        shift = np.repeat(self.offsets[:-1], sizes).astype(np.int32)
        self.left = np.where(left >= 0, left + shift, -1).astype(np.int32)
        self.right = np.where(right >= 0, right + shift, -1).astype(np.int32)
        self.values = {k: np.concatenate([t[k] for t in trees]) for k in value_keys}


# ---------------------------------------------------------------------------
# regression forest


class RegressionForest:
    """Breiman-style forest with cluster-level subsampling and cluster-aware
    out-of-bag prediction."""

    def __init__(self, trees: list[dict], params: ForestParams,
                 cluster_ids: np.ndarray, covariate_names: list[str] | None = None):
        self.trees = trees
        self.params = params
        self.cluster_ids = np.asarray(cluster_ids)
        self.covariate_names = covariate_names
        self._flat: _Flat | None = None

    # -- fitting ----------------------------------------------------------
    @classmethod
    def fit(cls, X, target, cluster_ids, params: ForestParams,
            covariate_names=None, row_key=None) -> "RegressionForest":
        params.validate()
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        y = np.asarray(target, dtype=np.float64)
        n, p = X.shape
        order = _canonical_order(row_key, n)
        X, y = X[order], y[order]
        unique, codes = _cluster_codes(np.asarray(cluster_ids)[order])
        n_clusters = len(unique)
        if n_clusters < 2 * params.min_node:
            raise DataError(
                f"need at least {2 * params.min_node} clusters, got {n_clusters}"
            )
        mtry = params.resolve_mtry(p)
        zeros8 = np.zeros(n, dtype=np.int8)
        zeros64 = np.zeros(n, dtype=np.float64)

        def one_tree(t: int) -> dict:
            tree_seed = substream_seed(params.seed, f"tree/{t}")
            sampled, _ = _sample_tree_clusters(
                tree_seed, n_clusters, params.sample_fraction, None
            )
            rows = _rows_of(codes, sampled, n_clusters)
            Xs = np.ascontiguousarray(X[rows])
            ys = y[rows]
            f, thr, l, r = _tree.grow_tree(
                Xs, zeros64[: len(rows)], ys, zeros8[: len(rows)],
                False, 0, 0, params.min_node, params.alpha, mtry,
                params.imbalance_penalty, np.uint64(tree_seed),
            )
            leaf = np.empty(len(rows), dtype=np.int32)
            _tree.route(f, thr, l, r, Xs, leaf)
            cnt = np.bincount(leaf, minlength=len(f)).astype(np.float64)
            tot = np.bincount(leaf, weights=ys, minlength=len(f))
            value = np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)
            return {
                "feature": f, "threshold": thr, "left": l, "right": r,
                "leaf_value": value, "sampled_clusters": unique[sampled],
            }

        trees = _run_indexed(one_tree, params.num_trees, params.threads())
        return cls(trees, params, unique, list(covariate_names) if covariate_names else None)

    # -- prediction -------------------------------------------------------
    def _flatten(self) -> _Flat:
        if self._flat is None:
            self._flat = _Flat(self.trees, ("leaf_value",))
        return self._flat

    def _tree_cluster_matrix(self) -> np.ndarray:
        n_clusters = len(self.cluster_ids)
        lookup = {cid: i for i, cid in enumerate(self.cluster_ids.tolist())}
        out = np.zeros((len(self.trees), n_clusters), dtype=np.bool_)
        for t, tree in enumerate(self.trees):
            idx = [lookup[c] for c in np.asarray(tree["sampled_clusters"]).tolist()]
            out[t, idx] = True
        return out

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        flat = self._flatten()
        n = X.shape[0]
        s = np.empty(n)
        c = np.empty(n, dtype=np.int64)
        dummy = np.zeros(n, dtype=np.int64)
        has = np.zeros((len(self.trees), 1), dtype=np.bool_)

        def run(lo, hi):
            _tree.regression_accumulate(
                flat.offsets, flat.feature, flat.threshold, flat.left, flat.right,
                flat.values["leaf_value"], X, dummy, has, False, s, c, lo, hi,
            )

        _map_chunks(run, n, self.params.threads())
        return s / np.maximum(c, 1)

    def predict_oob(self, X, cluster_ids) -> tuple[np.ndarray, np.ndarray]:
        """Out-of-bag prediction: average over trees whose subsample
        excludes the row's cluster. Rows covered by no such tree fall back
        to the full-forest prediction and are flagged."""
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        n = X.shape[0]
        lookup = {cid: i for i, cid in enumerate(self.cluster_ids.tolist())}
        codes = np.array([lookup.get(c, -1) for c in np.asarray(cluster_ids).tolist()],
                         dtype=np.int64)
        if (codes < 0).any():
            raise DataError("predict_oob called with clusters outside the training set")
        flat = self._flatten()
        has = self._tree_cluster_matrix()
        s = np.empty(n)
        c = np.empty(n, dtype=np.int64)

        def run(lo, hi):
            _tree.regression_accumulate(
                flat.offsets, flat.feature, flat.threshold, flat.left, flat.right,
                flat.values["leaf_value"], X, codes, has, True, s, c, lo, hi,
            )

        _map_chunks(run, n, self.params.threads())
        fallback = c == 0
        out = np.divide(s, c, out=np.zeros_like(s), where=~fallback)
        if fallback.any():
            out[fallback] = self.predict(X[fallback])
        return out, fallback

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "regression_forest",
            "params": _params_dict(self.params),
            "covariate_names": self.covariate_names,
            "cluster_ids": self.cluster_ids.tolist(),
            "trees": [
                {k: np.asarray(v).tolist() for k, v in t.items()} for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RegressionForest":
        _check_format(raw, "regression_forest")
        params = ForestParams(**{k: v for k, v in raw["params"].items()})
        trees = [_tree_arrays(t, ("leaf_value",), ("sampled_clusters",)) for t in raw["trees"]]
        return cls(trees, params, np.asarray(raw["cluster_ids"]), _names_list(raw.get("covariate_names")))


def _params_dict(params: ForestParams) -> dict:
    # thread count is an execution detail, not part of the model
    out = asdict(params)
    out.pop("n_threads", None)
    return out


def _names_list(raw) -> list[str] | None:
    if raw is None:
        return None
    return [str(x) for x in raw]


def _run_indexed(fn, count: int, threads: int) -> list:
    """fn(i) for i in range(count), results in index order."""
    if threads <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def _tree_arrays(raw: dict, float_keys, id_keys) -> dict:
    out = {
        "feature": np.asarray(raw["feature"], dtype=np.int32),
        "threshold": np.asarray(raw["threshold"], dtype=np.float64),
        "left": np.asarray(raw["left"], dtype=np.int32),
        "right": np.asarray(raw["right"], dtype=np.int32),
    }
    for k in float_keys:
        out[k] = np.asarray(raw[k], dtype=np.float64)
    for k in id_keys:
        out[k] = np.asarray(raw[k])
    if "leaf_n" in raw:
        out["leaf_n"] = np.asarray(raw["leaf_n"], dtype=np.int64)
    return out


def _check_format(raw: dict, kind: str) -> None:
    if raw.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported forest format version {raw.get('format_version')!r}")
    if raw.get("kind") != kind:
        raise DataError(f"expected {kind}, got {raw.get('kind')!r}")


# ---------------------------------------------------------------------------
# nuisances


@dataclass
class NuisanceEstimates:
    """Out-of-bag propensity and marginal-outcome estimates plus the
    residualized treatment and outcome. Propensities are clipped to
    [0.01, 0.99] before residualization."""

    e_hat: np.ndarray
    m_hat: np.ndarray
    w_res: np.ndarray
    y_res: np.ndarray
    w_raw: np.ndarray
    e_fallback: np.ndarray
    m_fallback: np.ndarray
    propensity_model: RegressionForest | None = None
    outcome_model: RegressionForest | None = None


def fit_nuisances(X, y, w, cluster_ids, params: ForestParams,
                  covariate_names=None, row_key=None) -> NuisanceEstimates:
    """Fit the two nuisance regression forests and residualize."""
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    e_params = _child_params(params, "nuisance/propensity")
    m_params = _child_params(params, "nuisance/outcome")
    ef = RegressionForest.fit(X, w, cluster_ids, e_params, covariate_names, row_key)
    mf = RegressionForest.fit(X, y, cluster_ids, m_params, covariate_names, row_key)
    e_hat, e_fb = ef.predict_oob(X, cluster_ids)
    m_hat, m_fb = mf.predict_oob(X, cluster_ids)
    e_hat = np.clip(e_hat, *PROPENSITY_CLIP)
    return NuisanceEstimates(
        e_hat=e_hat,
        m_hat=m_hat,
        w_res=w - e_hat,
        y_res=y - m_hat,
        w_raw=w.astype(np.int8),
        e_fallback=e_fb,
        m_fallback=m_fb,
        propensity_model=ef,
        outcome_model=mf,
    )


def _child_params(params: ForestParams, name: str) -> ForestParams:
    child = ForestParams(**asdict(params))
    child.seed = substream_seed(params.seed, name)
    return child


# ---------------------------------------------------------------------------
# causal forest


class CausalForest:
    """Honest causal forest over residualized treatment and outcome."""

    def __init__(self, trees: list[dict], params: ForestParams, cluster_ids: np.ndarray,
                 covariate_names: list[str] | None,
                 propensity_model: RegressionForest | None = None,
                 outcome_model: RegressionForest | None = None):
        self.trees = trees
        self.params = params
        self.cluster_ids = np.asarray(cluster_ids)
        self.covariate_names = covariate_names
        self.propensity_model = propensity_model
        self.outcome_model = outcome_model
        self._flat: _Flat | None = None

    @classmethod
    def fit(cls, X, nuisances: NuisanceEstimates, cluster_ids, params: ForestParams,
            covariate_names=None, row_key=None) -> "CausalForest":
        """Grow the ensemble. Requires residualized data (see
        :func:`fit_nuisances`); all subsampling is at cluster level."""
        params.validate()
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        n, p = X.shape
        order = _canonical_order(row_key, n)
        X = X[order]
        w_res = nuisances.w_res[order]
        y_res = nuisances.y_res[order]
        w_raw = nuisances.w_raw[order]
        unique, codes = _cluster_codes(np.asarray(cluster_ids)[order])
        n_clusters = len(unique)
        if n_clusters < 10:
            raise DataError(f"causal forest needs at least 10 clusters, got {n_clusters}")
        mtry = params.resolve_mtry(p)

        def one_tree(t: int) -> dict:
            tree_seed = substream_seed(params.seed, f"tree/{t}")
            split_cl, est_cl = _sample_tree_clusters(
                tree_seed, n_clusters, params.sample_fraction, params.honesty_fraction
            )
            rows_split = _rows_of(codes, split_cl, n_clusters)
            rows_est = _rows_of(codes, est_cl, n_clusters)
            Xs = np.ascontiguousarray(X[rows_split])
            nt_split = int(w_raw[rows_split].sum())
            nt_est = int(w_raw[rows_est].sum())
            nc_split = len(rows_split) - nt_split
            nc_est = len(rows_est) - nt_est
            min_t = _scaled_min(params.min_leaf_treated, nt_split, nt_est)
            min_c = _scaled_min(params.min_leaf_control, nc_split, nc_est)
            f, thr, l, r = _tree.grow_tree(
                Xs, w_res[rows_split], y_res[rows_split],
                w_raw[rows_split].astype(np.int8),
                True, min_t, min_c, 1, params.alpha, mtry,
                params.imbalance_penalty, np.uint64(tree_seed),
            )
            Xe = np.ascontiguousarray(X[rows_est])
            leaf = np.empty(len(rows_est), dtype=np.int32)
            _tree.route(f, thr, l, r, Xe, leaf)
            if params.prune_empty_leaves:
                f = _prune(f, l, r, leaf, w_raw[rows_est])
                f, thr, l, r = _compact(f, thr, l, r)
                _tree.route(f, thr, l, r, Xe, leaf)
            n_nodes = len(f)
            we, ye = w_res[rows_est], y_res[rows_est]
            cnt = np.bincount(leaf, minlength=n_nodes).astype(np.float64)
            s1 = np.bincount(leaf, weights=we * ye, minlength=n_nodes)
            s2 = np.bincount(leaf, weights=we * we, minlength=n_nodes)
            safe = np.maximum(cnt, 1.0)
            return {
                "feature": f, "threshold": thr, "left": l, "right": r,
                "leaf_num": s1 / safe, "leaf_den": s2 / safe,
                "leaf_n": cnt.astype(np.int64),
                "split_clusters": unique[split_cl], "est_clusters": unique[est_cl],
            }

        trees = _run_indexed(one_tree, params.num_trees, params.threads())
        return cls(trees, params, unique,
                   list(covariate_names) if covariate_names else None)

    def _flatten(self) -> _Flat:
        if self._flat is None:
            self._flat = _Flat(self.trees, ("leaf_num", "leaf_den"))
        return self._flat

    def predict(self, X) -> np.ndarray:
        """Forest-weight effect estimate for each query row."""
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        flat = self._flatten()
        n = X.shape[0]
        num = np.empty(n)
        den = np.empty(n)

        def run(lo, hi):
            _tree.causal_accumulate(
                flat.offsets, flat.feature, flat.threshold, flat.left, flat.right,
                flat.values["leaf_num"], flat.values["leaf_den"], X, num, den, lo, hi,
            )

        _map_chunks(run, n, self.params.threads())
        if np.any(den <= 0):
            raise NumericError("causal forest prediction has all-zero weights")
        return num / den

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "format_version": FORMAT_VERSION,
            "kind": "causal_forest",
            "params": _params_dict(self.params),
            "covariate_names": self.covariate_names,
            "cluster_ids": self.cluster_ids.tolist(),
            "trees": [
                {k: np.asarray(v).tolist() for k, v in t.items()} for t in self.trees
            ],
        }
        if self.propensity_model is not None:
            out["propensity_model"] = self.propensity_model.to_dict()
        if self.outcome_model is not None:
            out["outcome_model"] = self.outcome_model.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "CausalForest":
        _check_format(raw, "causal_forest")
        params = ForestParams(**{k: v for k, v in raw["params"].items()})
        trees = [
            _tree_arrays(t, ("leaf_num", "leaf_den"), ("split_clusters", "est_clusters"))
            for t in raw["trees"]
        ]
        prop = raw.get("propensity_model")
        outc = raw.get("outcome_model")
        return cls(
            trees, params, np.asarray(raw["cluster_ids"]), _names_list(raw.get("covariate_names")),
            RegressionForest.from_dict(prop) if prop else None,
            RegressionForest.from_dict(outc) if outc else None,
        )

    def save(self, path: str | Path) -> None:
        save_forest(self, path)


def _scaled_min(base: int, n_split: int, n_est: int) -> int:
    """Split-half leaf minimum implied by an estimation-half target.

    floor keeps the base-1 requirement invariant to within-cluster row
    duplication; under-filled leaves are repaired by pruning.
    """
    if n_est <= 0:
        return n_split + 1  # unsatisfiable: the tree stays a stump
    return max(1, math.floor(base * n_split / n_est))


def _prune(feature, left, right, leaf_assign, w_raw_est):
    """Collapse nodes whose subtree contains a leaf with no treated or no
    control estimation rows. Children have larger ids than parents, so one
    descending pass settles everything bottom-up."""
    n_nodes = len(feature)
    t_cnt = np.zeros(n_nodes, dtype=np.int64)
    c_cnt = np.zeros(n_nodes, dtype=np.int64)
    w = np.asarray(w_raw_est, dtype=np.int64)
    np.add.at(t_cnt, leaf_assign, w)
    np.add.at(c_cnt, leaf_assign, 1 - w)
    feature = feature.copy()
    bad = np.zeros(n_nodes, dtype=bool)
    for node in range(n_nodes - 1, -1, -1):
        if feature[node] >= 0:
            l, r = left[node], right[node]
            t_cnt[node] = t_cnt[l] + t_cnt[r]
            c_cnt[node] = c_cnt[l] + c_cnt[r]
            if bad[l] or bad[r]:
                feature[node] = _tree.LEAF
                bad[node] = t_cnt[node] == 0 or c_cnt[node] == 0
        else:
            bad[node] = t_cnt[node] == 0 or c_cnt[node] == 0
    return feature


# ---------------------------------------------------------------------------
# on-disk formats: JSON (diffable) and NPZ (compact binary)


def save_forest(forest, path: str | Path) -> None:
    path = Path(path)
    raw = forest.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(raw), encoding="utf-8")
    else:
        _save_npz(raw, path)


def load_forest(path: str | Path):
    path = Path(path)
    if path.suffix == ".json":
        raw = json.loads(path.read_text(encoding="utf-8"))
    else:
        raw = _load_npz(path)
    kind = raw.get("kind")
    if kind == "causal_forest":
        return CausalForest.from_dict(raw)
    if kind == "regression_forest":
        return RegressionForest.from_dict(raw)
    raise DataError(f"unknown forest kind {kind!r}")


def _walk_arrays(raw, prefix, header, arrays):
    for key, val in raw.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            header[key] = {}
            _walk_arrays(val, name + "/", header[key], arrays)
        elif isinstance(val, list) and val and isinstance(val[0], dict):
            header[key] = [{} for _ in val]
            for i, item in enumerate(val):
                _walk_arrays(item, f"{name}/{i}/", header[key][i], arrays)
        elif isinstance(val, (list, np.ndarray)):
            arrays[name] = np.asarray(val)
            header[key] = {"__array__": name}
        else:
            header[key] = val


def _save_npz(raw: dict, path: Path) -> None:
    header: dict = {}
    arrays: dict = {}
    _walk_arrays(raw, "", header, arrays)
    arrays["__header__"] = np.frombuffer(
        json.dumps(header).encode("utf-8"), dtype=np.uint8
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _restore_arrays(header, arrays):
    if isinstance(header, dict):
        if set(header) == {"__array__"}:
            return arrays[header["__array__"]]
        return {k: _restore_arrays(v, arrays) for k, v in header.items()}
    if isinstance(header, list):
        return [_restore_arrays(v, arrays) for v in header]
    return header


def _load_npz(path: Path) -> dict:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(bytes(arrays.pop("__header__")).decode("utf-8"))
    return _restore_arrays(header, arrays)
