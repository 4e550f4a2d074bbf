"""Second-order gradient-boosted regression trees for the IMU-only baseline.

Each boosting round fits one tree per class to the softmax cross-entropy
gradient ``g = p - y`` and hessian ``h = p (1 - p)``.  Splits are found by
exact greedy search; a split's gain is

    0.5 * (GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam)) - gamma

and a leaf outputs ``-G / (H + lam)``.  Samples go left iff
``x[feature] < threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 3
# relative slack under which two gains count as tied; the lowest
# (feature, threshold) among tied candidates wins
TIE_TOL = 1e-12


@dataclass
class Node:
    weight: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: Node | None = None
    right: Node | None = None
    gain: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


@dataclass
class GBTConfig:
    rounds: int = 100
    max_depth: int = 4
    eta: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0


@dataclass
class BoostedEnsemble:
    trees: list[list[Node]] = field(default_factory=list)  # [round][class]
    eta: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0
    base_score: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def rounds(self) -> int:
        return len(self.trees)

    def raw_scores(self, X, rounds: int | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        F = np.tile(np.asarray(self.base_score, dtype=np.float64), (len(X), 1))
        for per_class in self.trees[:rounds]:
            for k, tree in enumerate(per_class):
                F[:, k] += self.eta * tree_output(tree, X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities; a single 6-vector gives a length-3 array."""
        single = np.ndim(X) == 1
        p = softmax_rows(self.raw_scores(X))
        return p[0] if single else p

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(np.atleast_2d(X)).argmax(axis=1)


def softmax_rows(F: np.ndarray) -> np.ndarray:
    e = np.exp(F - F.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def tree_output(tree: Node, X: np.ndarray) -> np.ndarray:
    out = np.empty(len(X))
    stack = [(tree, np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        if node.is_leaf:
            out[idx] = node.weight
            continue
        go_left = X[idx, node.feature] < node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def split_gain(gl, hl, gr, hr, lam, gamma):
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - (gl + gr) ** 2 / (hl + hr + lam)) - gamma


def leaf_weight(g_sum: float, h_sum: float, lam: float) -> float:
    denom = h_sum + lam
    return 0.0 if denom <= 0 else -g_sum / denom


def _pick(candidates: list[Split]) -> Split | None:
    """Best gain; near-ties resolve to the lowest feature, then lowest threshold."""
    if not candidates:
        return None
    top = max(c.gain for c in candidates)
    slack = TIE_TOL * max(1.0, abs(top))
    return min((c for c in candidates if c.gain >= top - slack), key=lambda c: (c.feature, c.threshold))


def best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float, gamma: float) -> Split | None:
    """Exact greedy search using sorted prefix sums."""
    G, H = g.sum(), h.sum()
    candidates = []
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        distinct = xs[:-1] < xs[1:]
        if not distinct.any():
            continue
        gl = np.cumsum(g[order])[:-1][distinct]
        hl = np.cumsum(h[order])[:-1][distinct]
        gains = split_gain(gl, hl, G - gl, H - hl, lam, gamma)
        thresholds = 0.5 * (xs[:-1][distinct] + xs[1:][distinct])
        best = int(np.argmax(gains))
        candidates.append(Split(f, float(thresholds[best]), float(gains[best])))
        # keep any equally good thresholds of this feature for the tie rule
        slack = TIE_TOL * max(1.0, abs(gains[best]))
        for j in np.flatnonzero(gains >= gains[best] - slack):
            if j != best:
                candidates.append(Split(f, float(thresholds[j]), float(gains[j])))
    return _pick(candidates)


def brute_force_split(X, g, h, lam: float, gamma: float) -> Split | None:
    """Enumerate every feature and midpoint threshold, summing each side directly."""
    X = np.asarray(X, dtype=np.float64)
    candidates = []
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            t = 0.5 * (a + b)
            left = X[:, f] < t
            gl, hl = float(g[left].sum()), float(h[left].sum())
            gr, hr = float(g[~left].sum()), float(h[~left].sum())
            candidates.append(Split(f, t, split_gain(gl, hl, gr, hr, lam, gamma)))
    return _pick(candidates)


def grow_tree(X, g, h, max_depth: int, lam: float, gamma: float, depth: int = 0) -> Node:
    if depth < max_depth and len(X) > 1:
        s = best_split(X, g, h, lam, gamma)
        if s is not None and s.gain > 0:
            left = X[:, s.feature] < s.threshold
            return Node(
                feature=s.feature,
                threshold=s.threshold,
                gain=s.gain,
                left=grow_tree(X[left], g[left], h[left], max_depth, lam, gamma, depth + 1),
                right=grow_tree(X[~left], g[~left], h[~left], max_depth, lam, gamma, depth + 1),
            )
    return Node(weight=leaf_weight(float(g.sum()), float(h.sum()), lam))


def gradients(F: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class softmax cross-entropy gradients and hessians, each N x 3."""
    p = softmax_rows(F)
    Y = np.eye(NUM_CLASSES)[y]
    return p - Y, p * (1 - p)


def fit(X, y, config: GBTConfig | None = None) -> BoostedEnsemble:
    """Boost ``config.rounds`` rounds of one tree per class on IMU vectors ``X``."""
    config = config or GBTConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit needs a non-empty N x d sample matrix")
    if len(y) != len(X):
        raise ValueError(f"{len(X)} samples but {len(y)} labels")
    if not np.isin(y, np.arange(NUM_CLASSES)).all():
        raise ValueError("class indices must be 0, 1 or 2")
    y = y.astype(np.int64)
    ens = BoostedEnsemble(eta=config.eta, lam=config.lam, gamma=config.gamma)
    F = ens.raw_scores(X)
    for _ in range(config.rounds):
        g, h = gradients(F, y)
        per_class = [grow_tree(X, g[:, k], h[:, k], config.max_depth, config.lam, config.gamma) for k in range(NUM_CLASSES)]
        ens.trees.append(per_class)
        for k, tree in enumerate(per_class):
            F[:, k] += config.eta * tree_output(tree, X)
    return ens


def training_loss(ens: BoostedEnsemble, X, y, rounds: int | None = None) -> float:
    p = softmax_rows(ens.raw_scores(X, rounds))
    return float(-np.log(np.clip(p[np.arange(len(y)), y], 1e-300, 1.0)).mean())


# ---------------------------------------------------------------------------
# text persistence


def _num(x: float) -> str:
    return f"{x:.17g}"


def dumps(ens: BoostedEnsemble) -> str:
    lines = [
        f"gbt v1 rounds={ens.rounds} eta={_num(ens.eta)} lambda={_num(ens.lam)} gamma={_num(ens.gamma)}"
        f" base={','.join(_num(b) for b in ens.base_score)}"
    ]
    for per_class in ens.trees:
        for tree in per_class:
            lines.extend(_tree_lines(tree))
    return "\n".join(lines) + "\n"


def _tree_lines(tree: Node) -> list[str]:
    # pre-order numbering: a node's index is its position in the walk
    out: list[str] = []

    def walk(node: Node) -> int:
        idx = len(out)
        out.append("")
        if node.is_leaf:
            out[idx] = f"{idx} leaf {_num(node.weight)}"
        else:
            left = walk(node.left)
            right = walk(node.right)
            out[idx] = f"{idx} split {node.feature} {_num(node.threshold)} {left} {right}"
        return idx

    walk(tree)
    return out


class ModelFormatError(ValueError):
    pass


def loads(text: str) -> BoostedEnsemble:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("gbt v1"):
        raise ModelFormatError("not a gbt v1 model")
    header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    try:
        rounds = int(header["rounds"])
        ens = BoostedEnsemble(eta=float(header["eta"]), lam=float(header["lambda"]), gamma=float(header["gamma"]))
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad header: {lines[0]!r}") from exc
    if "base" in header:
        ens.base_score = tuple(float(b) for b in header["base"].split(","))

    trees: list[list[list[str]]] = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "0":
            trees.append([])
        if not trees:
            raise ModelFormatError(f"node line before any root: {ln!r}")
        trees[-1].append(parts)
    if len(trees) != rounds * NUM_CLASSES:
        raise ModelFormatError(f"expected {rounds * NUM_CLASSES} trees, found {len(trees)}")
    built = [_build_tree(t) for t in trees]
    ens.trees = [built[r * NUM_CLASSES : (r + 1) * NUM_CLASSES] for r in range(rounds)]
    return ens


def _build_tree(rows: list[list[str]]) -> Node:
    table = {int(r[0]): r for r in rows}

    def make(i: int) -> Node:
        r = table.get(i)
        if r is None:
            raise ModelFormatError(f"missing node {i}")
        if r[1] == "leaf":
            return Node(weight=float(r[2]))
        if r[1] == "split":
            return Node(feature=int(r[2]), threshold=float(r[3]), left=make(int(r[4])), right=make(int(r[5])))
        raise ModelFormatError(f"bad node kind {r[1]!r}")

    return make(0)


def save(ens: BoostedEnsemble, path) -> None:
    Path(path).write_text(dumps(ens))


def load(path) -> BoostedEnsemble:
    return loads(Path(path).read_text())
