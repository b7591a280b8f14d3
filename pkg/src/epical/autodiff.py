"""Reverse-mode automatic differentiation on a dynamically grown scalar tape.

Every node holds one scalar value plus the indices and local partial
derivatives of its parents; nodes are appended in topological order, so a
single reverse sweep computes all adjoints. Parameter counts here are small
(a dozen model parameters, a few thousand network weights) and series are
short, which keeps graphs manageable.

Besides the usual elementary operations, the tape supports fused reduction
nodes (dense layers, weighted sums of squares). These are still scalar
nodes: one value, many parents. Without them, a single dense layer would
dominate the tape with tens of thousands of two-parent nodes.

A tape is single-threaded and lives for one forward/backward cycle;
parallelism happens at the chain level, one tape per chain.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, InvalidValue, StaleTape

_isfinite = math.isfinite


class Var:
    """A scalar variable bound to a node on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var({self.value!r}, node={self.index})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape._node2("add", self.value + other.value,
                                    self.index, 1.0, other.index, 1.0)
        return self.tape._node1("add", self.value + other, self.index, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape._node2("sub", self.value - other.value,
                                    self.index, 1.0, other.index, -1.0)
        return self.tape._node1("sub", self.value - other, self.index, 1.0)

    def __rsub__(self, other):
        return self.tape._node1("sub", other - self.value, self.index, -1.0)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape._node2("mul", self.value * other.value,
                                    self.index, other.value, other.index, self.value)
        return self.tape._node1("mul", self.value * other, self.index, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            if other.value == 0.0:
                raise DomainError("div", "zero denominator")
            v = self.value / other.value
            return self.tape._node2("div", v, self.index, 1.0 / other.value,
                                    other.index, -v / other.value)
        if other == 0.0:
            raise DomainError("div", "zero denominator")
        return self.tape._node1("div", self.value / other, self.index, 1.0 / other)

    def __rtruediv__(self, other):
        if self.value == 0.0:
            raise DomainError("div", "zero denominator")
        v = other / self.value
        return self.tape._node1("div", v, self.index, -v / self.value)

    def __neg__(self):
        return self.tape._node1("neg", -self.value, self.index, -1.0)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("variable exponents are not supported; use exp/log")
        x = self.value
        if p == int(p):
            p = int(p)
            if p < 0 and x == 0.0:
                raise DomainError("pow", "zero base with negative exponent")
            d = 0.0 if p == 0 else p * x ** (p - 1)
            return self.tape._node1("pow", x ** p, self.index, d)
        if x <= 0.0:
            raise DomainError("pow", f"base {x} with fractional exponent {p}")
        v = x ** p
        return self.tape._node1("pow", v, self.index, p * v / x)

    def __abs__(self):
        x = self.value
        # subgradient 0 at exactly 0
        d = 1.0 if x > 0.0 else (-1.0 if x < 0.0 else 0.0)
        return self.tape._node1("abs", abs(x), self.index, d)


class GradientMap:
    """Adjoints of every node on a tape after a backward sweep."""

    __slots__ = ("adjoints",)

    def __init__(self, adjoints):
        self.adjoints = adjoints

    def __len__(self):
        return len(self.adjoints)

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.index
        return float(self.adjoints[key])

    def block(self, start, count):
        """Adjoints of `count` consecutive nodes starting at `start`."""
        return np.array(self.adjoints[start:start + count])


class Tape:
    """A growable record of scalar operations supporting one reverse sweep.

    Nodes are stored structure-of-arrays style: per-node value, operation
    kind, parent indices, and local partials. Parent entries are tuples for
    one- and two-parent operations and lists describing index blocks for
    fused operations.
    """

    __slots__ = ("_val", "_kind", "_par", "_lp", "_ops")

    def __init__(self):
        self._val = []
        self._kind = []
        self._par = []
        self._lp = []
        # indices of non-leaf nodes, ascending; backward only visits these
        self._ops = []

    def __len__(self):
        if self._val is None:
            return 0
        return len(self._val)

    # -- node constructors -------------------------------------------------

    def lift(self, x):
        """Create a leaf holding the value x."""
        x = float(x)
        if not _isfinite(x):
            raise InvalidValue("lift", x)
        return self._leaf(x)

    def _leaf(self, x):
        vals = self._val
        if vals is None:
            raise StaleTape("tape has been cleared")
        k = len(vals)
        vals.append(x)
        self._kind.append("leaf")
        self._par.append(None)
        self._lp.append(None)
        return Var(self, k, x)

    def leaf_block(self, values):
        """Append a contiguous block of leaves; returns the first index."""
        vals = self._val
        if vals is None:
            raise StaleTape("tape has been cleared")
        arr = np.asarray(values, dtype=float)
        if not np.isfinite(arr).all():
            raise InvalidValue("lift", "non-finite entry in leaf block")
        start = len(vals)
        xs = arr.ravel().tolist()
        vals.extend(xs)
        n = len(xs)
        self._kind.extend(["leaf"] * n)
        self._par.extend([None] * n)
        self._lp.extend([None] * n)
        return start

    def _node1(self, kind, v, i0, d0):
        if not _isfinite(v):
            raise InvalidValue(kind, v)
        vals = self._val
        if vals is None:
            raise StaleTape("tape has been cleared")
        k = len(vals)
        vals.append(v)
        self._kind.append(kind)
        self._par.append((i0,))
        self._lp.append((d0,))
        self._ops.append(k)
        return Var(self, k, v)

    def _node2(self, kind, v, i0, d0, i1, d1):
        if not _isfinite(v):
            raise InvalidValue(kind, v)
        vals = self._val
        if vals is None:
            raise StaleTape("tape has been cleared")
        k = len(vals)
        vals.append(v)
        self._kind.append(kind)
        self._par.append((i0, i1))
        self._lp.append((d0, d1))
        self._ops.append(k)
        return Var(self, k, v)

    def _fused(self, kind, v, descriptor, partials):
        v = float(v)
        if not _isfinite(v):
            raise InvalidValue(kind, v)
        vals = self._val
        if vals is None:
            raise StaleTape("tape has been cleared")
        k = len(vals)
        vals.append(v)
        self._kind.append(kind)
        self._par.append(descriptor)
        self._lp.append(partials)
        self._ops.append(k)
        return Var(self, k, v)

    # -- fused operations ---------------------------------------------------

    def linear_block(self, w_start, weights, x, b_start=-1, biases=None):
        """Dense layer on constant input: rows of `weights` are variables.

        `weights` is an (m, n) array whose row j is stored as leaves
        w_start + j*n .. w_start + (j+1)*n - 1; `x` is a constant input
        vector. Returns m fused nodes with value weights @ x (+ biases).
        The arrays passed must not be mutated before the backward sweep.
        """
        weights = np.asarray(weights, dtype=float)
        x = np.asarray(x, dtype=float)
        m, n = weights.shape
        z = weights @ x
        if biases is not None:
            z = z + np.asarray(biases, dtype=float)
        out = []
        for j in range(m):
            bi = b_start + j if b_start >= 0 else -1
            out.append(self._fused("lin", z[j], ["blk", w_start + j * n, n, bi], x))
        return out

    def bilinear_block(self, w_start, weights, h_vars, b_start=-1, biases=None):
        """Dense layer on variable input: weights and inputs both variables.

        `h_vars` must be tape-contiguous (as produced by a previous layer).
        Node j has parents (weight row j, h block, bias j) with partials
        (h values, weight row j, 1).
        """
        weights = np.asarray(weights, dtype=float)
        m, n = weights.shape
        if len(h_vars) != n:
            raise ValueError("input width does not match weight shape")
        h_start = h_vars[0].index
        if h_vars[-1].index - h_start != n - 1:
            raise ValueError("bilinear_block requires tape-contiguous inputs")
        hv = np.array([h.value for h in h_vars])
        z = weights @ hv
        if biases is not None:
            z = z + np.asarray(biases, dtype=float)
        out = []
        for j in range(m):
            bi = b_start + j if b_start >= 0 else -1
            out.append(self._fused(
                "bilin", z[j], ["blk2", w_start + j * n, h_start, n, bi],
                (hv, weights[j])))
        return out

    def weighted_sse(self, items, targets, coeffs):
        """Fused weighted sum of squares: sum_i c_i * (items_i - targets_i)^2.

        Items may mix variables and plain floats; float terms contribute to
        the value only.
        """
        idx = []
        var_resid = []
        var_coef = []
        const_part = 0.0
        for it, t, c in zip(items, targets, coeffs):
            if isinstance(it, Var):
                idx.append(it.index)
                var_resid.append(it.value - t)
                var_coef.append(c)
            else:
                const_part += c * (it - t) ** 2
        r = np.array(var_resid)
        c = np.array(var_coef)
        value = const_part + float(c @ (r * r))
        if not idx:
            # no variable terms: constant node, no parents
            return self._fused("wsse", value, ["idx", np.empty(0, dtype=np.intp)],
                               np.empty(0))
        return self._fused("wsse", value, ["idx", np.array(idx, dtype=np.intp)],
                           2.0 * c * r)

    # -- reverse sweep ------------------------------------------------------

    def backward(self, root):
        """Propagate adjoints from `root`; returns a GradientMap.

        Adjoints are recomputed from scratch on every call. Nodes recorded
        after `root` keep adjoint 0.
        """
        if self._val is None:
            raise StaleTape("backward on a cleared tape")
        if not isinstance(root, Var) or root.tape is not self:
            raise ValueError("root does not belong to this tape")
        n = len(self._val)
        adj = np.zeros(n)
        root_index = root.index
        adj[root_index] = 1.0
        par = self._par
        lps = self._lp
        for i in reversed(self._ops):
            if i > root_index:
                continue
            a = adj[i]
            if a == 0.0:
                continue
            p = par[i]
            if type(p) is tuple:
                l = lps[i]
                adj[p[0]] += a * l[0]
                if len(p) == 2:
                    adj[p[1]] += a * l[1]
            else:
                tag = p[0]
                if tag == "blk":
                    _, s, m, bi = p
                    adj[s:s + m] += a * lps[i]
                    if bi >= 0:
                        adj[bi] += a
                elif tag == "blk2":
                    _, s0, s1, m, bi = p
                    la, lb = lps[i]
                    adj[s0:s0 + m] += a * la
                    adj[s1:s1 + m] += a * lb
                    if bi >= 0:
                        adj[bi] += a
                else:  # "idx": unique scattered indices
                    adj[p[1]] += a * lps[i]
        return GradientMap(adj)

    def clear(self):
        """Release node storage; subsequent use raises StaleTape."""
        self._val = None
        self._kind = None
        self._par = None
        self._lp = None
        self._ops = None


def lift(tape, x):
    """Create a leaf variable with value x on the given tape."""
    return tape.lift(x)


# -- unary elementary functions ---------------------------------------------

def exp(x):
    try:
        v = math.exp(x.value)
    except OverflowError:
        raise InvalidValue("exp", math.inf) from None
    return x.tape._node1("exp", v, x.index, v)


def log(x):
    if x.value <= 0.0:
        raise DomainError("log", f"nonpositive argument {x.value}")
    return x.tape._node1("log", math.log(x.value), x.index, 1.0 / x.value)


def tanh(x):
    v = math.tanh(x.value)
    return x.tape._node1("tanh", v, x.index, 1.0 - v * v)


def sigmoid(x):
    z = x.value
    if z >= 0.0:
        v = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        v = e / (1.0 + e)
    return x.tape._node1("sigmoid", v, x.index, v * (1.0 - v))


def clip0(x):
    """max(x, 0) with subgradient 0 at exactly 0, matching abs."""
    z = x.value
    return x.tape._node1("clip0", z if z > 0.0 else 0.0, x.index,
                         1.0 if z > 0.0 else 0.0)
