"""Finite sets of sequence laws built from per-step sets of one-step conditionals.

Everything here lives on a finite outcome alphabet ``{0..K-1}`` and a finite
horizon ``T``.  A :class:`PathMeasure` is stored as its full conditional
table: for every step ``n < T`` and every history of length ``n`` (null
histories included) a pmf over the next outcome.  Histories of length ``n``
are indexed lexicographically, ``index = sum(h[i] * K**(n-1-i))``.

:func:`build_plm` enumerates every measure whose conditionals, at every
history, are picked from the allowed sets; :func:`check_rectangular` checks
a set for membership and for closure under pasting marginals with
history-wise continuations taken from its members.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, ConfigError, ContractViolation, IdRangeError

PMF_TOL = 1e-12
PATH_TOL = 1e-10
MEMBER_TOL = 1e-10
DEFAULT_BUDGET = 10**6


def history_index(history, K: int) -> int:
    idx = 0
    for h in history:
        h = int(h)
        if not 0 <= h < K:
            raise IdRangeError(f"history outcome {h} outside [0, {K})")
        idx = idx * K + h
    return idx


def history_of(index: int, n: int, K: int) -> tuple:
    out = []
    for _ in range(n):
        index, r = divmod(index, K)
        out.append(r)
    return tuple(reversed(out))


def check_pmf(p, K: int | None = None, tol: float = PMF_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (K is not None and p.size != K):
        raise ContractViolation(f"pmf must be a vector of length {K}, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > tol:
        raise ContractViolation(f"not a probability vector: {p.tolist()}")
    return p


class PathMeasure:
    """A law on ``K**T`` paths given by its one-step conditional table."""

    def __init__(self, rows, K: int):
        rows = tuple(np.asarray(r, dtype=np.float64) for r in rows)
        if not rows:
            raise ContractViolation("a path measure needs horizon T >= 1")
        for n, r in enumerate(rows):
            if r.shape != (K**n, K):
                raise ContractViolation(f"step {n} table has shape {r.shape}, want {(K**n, K)}")
            if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > PMF_TOL):
                raise ContractViolation(f"step {n} table rows are not probability vectors")
        self.K = K
        self.rows = rows
        self._key = None

    @property
    def T(self) -> int:
        return len(self.rows)

    @classmethod
    def product(cls, pmfs, K: int | None = None) -> PathMeasure:
        """Independent steps with the given per-step pmfs."""
        pmfs = [np.asarray(p, dtype=np.float64) for p in pmfs]
        K = K or pmfs[0].size
        return cls([np.tile(p, (K**n, 1)) for n, p in enumerate(pmfs)], K)

    @classmethod
    def from_function(cls, fn, K: int, T: int) -> PathMeasure:
        """Table from ``fn(history) -> pmf`` evaluated at every history."""
        return cls([np.stack([fn(history_of(i, n, K)) for i in range(K**n)])
                    for n in range(T)], K)

    def conditional(self, history) -> np.ndarray:
        n = len(history)
        if n >= self.T:
            raise IdRangeError(f"history length {n} must be < T = {self.T}")
        return self.rows[n][history_index(history, self.K)]

    def prefix_probs(self, n: int) -> np.ndarray:
        """Probabilities of all length-``n`` prefixes, lexicographic order."""
        probs = np.ones(1)
        for k in range(n):
            probs = (probs[:, None] * self.rows[k]).reshape(-1)
        return probs

    def path_probs(self) -> np.ndarray:
        return self.prefix_probs(self.T)

    def prob(self, path) -> float:
        return float(self.prefix_probs(len(path))[history_index(path, self.K)])

    def key(self) -> bytes:
        if self._key is None:
            self._key = b"".join(r.tobytes() for r in self.rows)
        return self._key

    def flat(self) -> np.ndarray:
        return np.concatenate([r.reshape(-1) for r in self.rows])

    def allclose(self, other: PathMeasure, tol: float = MEMBER_TOL) -> bool:
        return (self.K, self.T) == (other.K, other.T) and bool(
            np.max(np.abs(self.flat() - other.flat())) <= tol)

    def __eq__(self, other):
        return isinstance(other, PathMeasure) and self.K == other.K and self.key() == other.key()

    def __hash__(self):
        return hash((self.K, self.key()))

    def __repr__(self):
        return f"PathMeasure(K={self.K}, T={self.T})"


def one_step_conditionals(P: PathMeasure, n: int, history) -> np.ndarray:
    if len(history) != n:
        raise IdRangeError(f"history {tuple(history)} does not have length {n}")
    return P.conditional(history)


def bayes_conditional(P: PathMeasure, history) -> np.ndarray:
    """Ratio-of-marginals conditional; only defined on positive-probability histories."""
    n = len(history)
    denom = P.prob(history)
    if denom <= 0:
        raise ContractViolation(f"history {tuple(history)} has probability zero")
    nxt = P.prefix_probs(n + 1)
    base = history_index(history, P.K) * P.K
    return nxt[base:base + P.K] / denom


class KernelFamily:
    """Allowed one-step conditionals for every step and history.

    ``options[n][i]`` is a ``(J, K)`` array of the pmfs allowed after
    history ``i`` of length ``n``.  Most families use the same set at every
    history of a step; :meth:`from_sets` builds those.
    """

    def __init__(self, options, K: int):
        self.K = K
        self.options = []
        for n, per_history in enumerate(options):
            if len(per_history) != K**n:
                raise ContractViolation(f"step {n} needs options for {K**n} histories")
            step = []
            for opts in per_history:
                opts = np.atleast_2d(np.asarray(opts, dtype=np.float64))
                if opts.shape[0] == 0 or opts.shape[1] != K:
                    raise ContractViolation(f"step {n}: options must be a non-empty (J, {K}) array")
                for p in opts:
                    check_pmf(p, K)
                step.append(opts)
            self.options.append(step)
        if not self.options:
            raise ContractViolation("a kernel family needs horizon T >= 1")

    @classmethod
    def from_sets(cls, sets, K: int | None = None) -> KernelFamily:
        """Step ``n`` (0-based) allows the pmfs in ``sets[n]`` after any history."""
        sets = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in sets]
        K = K or sets[0].shape[1]
        return cls([[s] * K**n for n, s in enumerate(sets)], K)

    @classmethod
    def iid(cls, L, T: int, K: int | None = None) -> KernelFamily:
        """The same set ``L`` at every step."""
        return cls.from_sets([L] * T, K)

    @property
    def T(self) -> int:
        return len(self.options)

    def sizes(self) -> list[list[int]]:
        return [[o.shape[0] for o in step] for step in self.options]

    def selection_count(self) -> int:
        """Number of history-wise selections (before removing duplicate tables)."""
        return math.prod(j for step in self.sizes() for j in step)

    def allowed(self, n: int, i: int, pmf, tol: float = MEMBER_TOL) -> bool:
        return bool(np.any(np.max(np.abs(self.options[n][i] - pmf), axis=1) <= tol))


def closed_form_count(set_sizes, K: int) -> int:
    """``|L_1| * prod_{n>=2} |L_n| ** (K ** (n-1))``."""
    return math.prod(j ** (K**n) for n, j in enumerate(set_sizes))


@dataclass
class MeasureSet:
    """Distinct measures in enumeration order.

    ``selections[i]`` is the per-history choice vector that first produced
    ``measures[i]``; ``enumerated`` counts choices before deduplication.
    """

    measures: list[PathMeasure]
    selections: list[tuple] = field(default_factory=list)
    enumerated: int = 0

    def __post_init__(self):
        self._index = {m.key(): i for i, m in enumerate(self.measures)}
        self._flat = None

    def __len__(self):
        return len(self.measures)

    def __iter__(self):
        return iter(self.measures)

    def __getitem__(self, i):
        return self.measures[i]

    def find(self, P: PathMeasure, tol: float = MEMBER_TOL) -> int | None:
        i = self._index.get(P.key())
        if i is not None:
            return i
        if not self.measures:
            return None
        if self._flat is None:
            self._flat = np.stack([m.flat() for m in self.measures])
        flat = P.flat()
        if flat.shape[0] != self._flat.shape[1]:
            return None
        hits = np.flatnonzero(np.max(np.abs(self._flat - flat), axis=1) <= tol)
        return int(hits[0]) if hits.size else None

    def __contains__(self, P):
        return self.find(P) is not None


def _slots(family: KernelFamily):
    return [(n, i) for n in range(family.T) for i in range(family.K**n)]


def measure_from_selection(family: KernelFamily, selection) -> PathMeasure:
    rows, pos = [], 0
    for n, step in enumerate(family.options):
        k = len(step)
        rows.append(np.stack([step[i][selection[pos + i]] for i in range(k)]))
        pos += k
    return PathMeasure(rows, family.K)


def build_plm(family: KernelFamily, budget: int = DEFAULT_BUDGET) -> MeasureSet:
    """Every measure whose conditional at each history is picked from the family.

    Selections are enumerated lexicographically (steps in order, histories
    in index order) and identical tables are kept once.
    """
    count = family.selection_count()
    if count > budget:
        raise BudgetExceeded(count, budget)
    ranges = [range(family.options[n][i].shape[0]) for n, i in _slots(family)]
    measures, selections, seen = [], [], set()
    enumerated = 0
    for sel in itertools.product(*ranges):
        enumerated += 1
        P = measure_from_selection(family, sel)
        if P.key() in seen:
            continue
        seen.add(P.key())
        measures.append(P)
        selections.append(sel)
    return MeasureSet(measures, selections, enumerated)


def build_piid(L, T: int, budget: int = DEFAULT_BUDGET) -> MeasureSet:
    return build_plm(KernelFamily.iid(L, T), budget)


def _kernel_list(kernel, n: int, K: int) -> list[PathMeasure]:
    if isinstance(kernel, dict):
        return [kernel[history_of(i, n, K)] for i in range(K**n)]
    kernel = list(kernel)
    if len(kernel) != K**n:
        raise ContractViolation(f"kernel needs one member per history: {K**n}, got {len(kernel)}")
    return kernel


def paste(marginal: PathMeasure, n: int, kernel) -> PathMeasure:
    """Glue the first ``n`` steps of ``marginal`` to history-wise continuations.

    ``kernel`` maps each length-``n`` history (a tuple, or its index in a
    list) to the member whose conditionals are used from that history on.
    """
    K, T = marginal.K, marginal.T
    if not 0 <= n < T:
        raise ContractViolation(f"paste step {n} outside [0, {T})")
    members = _kernel_list(kernel, n, K)
    for Q in members:
        if (Q.K, Q.T) != (K, T):
            raise ContractViolation(f"kernel member has (K, T) = {(Q.K, Q.T)}, want {(K, T)}")
    rows = list(marginal.rows[:n])
    for k in range(n, T):
        idx = np.arange(K**k)
        owner = idx // K ** (k - n)
        stacked = np.stack([Q.rows[k] for Q in members])
        rows.append(stacked[owner, idx])
    return PathMeasure(rows, K)


def paste_integral(marginal: PathMeasure, n: int, kernel) -> np.ndarray:
    """Path probabilities of the pasted law by direct summation.

    For each prefix the marginal's mass is spread over its extensions in
    proportion to the kernel member's own path probabilities, i.e. the
    member's Bayesian conditional given that prefix.
    """
    K, T = marginal.K, marginal.T
    members = _kernel_list(kernel, n, K)
    prefix = marginal.prefix_probs(n)
    out = np.zeros(K**T)
    width = K ** (T - n)
    for i, Q in enumerate(members):
        q_paths = Q.path_probs()[i * width:(i + 1) * width]
        q_prefix = q_paths.sum()
        if prefix[i] == 0.0:
            continue
        if q_prefix <= 0:
            raise ContractViolation(f"kernel member for history {history_of(i, n, K)} gives it probability zero")
        out[i * width:(i + 1) * width] = prefix[i] * q_paths / q_prefix
    return out


@dataclass(frozen=True)
class Violation:
    kind: str
    measure: int
    n: int
    history: tuple | None = None
    kernel: tuple | None = None

    def __str__(self):
        if self.kind == "membership":
            return f"membership: measure {self.measure} step {self.n} history {self.history}"
        return f"closure: marginal of measure {self.measure} at n={self.n} with kernel members {self.kernel}"


@dataclass
class RectangularityReport:
    n_measures: int
    membership: list[Violation] = field(default_factory=list)
    closure: list[Violation] = field(default_factory=list)
    pastings_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.membership and not self.closure

    @property
    def violations(self) -> list[Violation]:
        return self.membership + self.closure

    def summary(self) -> str:
        return (f"{self.n_measures} measures, {self.pastings_checked} pastings checked, "
                f"{len(self.membership)} membership and {len(self.closure)} closure violations")


def _continuation_key(P: PathMeasure, n: int, i: int) -> bytes:
    K = P.K
    parts = []
    for k in range(n, P.T):
        span = K ** (k - n)
        parts.append(P.rows[k][i * span:(i + 1) * span].tobytes())
    return b"".join(parts)


def check_rectangular(measures, family: KernelFamily, tol: float = MEMBER_TOL,
                      budget: int = DEFAULT_BUDGET) -> RectangularityReport:
    """Membership of every conditional in the family, and closure under pasting.

    Closure is checked exhaustively: for every split ``n`` every distinct
    ``n``-step marginal among the members is pasted with every history-wise
    combination of distinct member continuations, and the result must be a
    member (within ``tol``).
    """
    mset = measures if isinstance(measures, MeasureSet) else MeasureSet(list(measures))
    if not len(mset):
        raise ContractViolation("check_rectangular needs a non-empty set")
    K, T = family.K, family.T
    for P in mset:
        if (P.K, P.T) != (K, T):
            raise ContractViolation(f"measure has (K, T) = {(P.K, P.T)}, family has {(K, T)}")
    report = RectangularityReport(len(mset))

    for j, P in enumerate(mset):
        for n in range(T):
            for i in range(K**n):
                if not family.allowed(n, i, P.rows[n][i], tol):
                    report.membership.append(Violation("membership", j, n, history_of(i, n, K)))

    for n in range(1, T):
        marginals = {}
        for j, P in enumerate(mset):
            marginals.setdefault(b"".join(r.tobytes() for r in P.rows[:n]), j)
        continuations = []
        for i in range(K**n):
            reps = {}
            for j, P in enumerate(mset):
                reps.setdefault(_continuation_key(P, n, i), j)
            continuations.append(list(reps.values()))
        combos = len(marginals) * math.prod(len(c) for c in continuations)
        if combos > budget:
            raise BudgetExceeded(combos, budget)
        for j in marginals.values():
            for kernel in itertools.product(*continuations):
                pasted = paste(mset[j], n, [mset[c] for c in kernel])
                report.pastings_checked += 1
                if mset.find(pasted, tol) is None:
                    report.closure.append(Violation("closure", j, n, kernel=kernel))
    return report


# model bridge ---------------------------------------------------------------

def gammt_family(params, prompt, T: int) -> KernelFamily:
    """Per-history sets of the heads' next-token laws after ``prompt + history``."""
    from .ensemble import forward_numpy

    K = params.n_vocab
    prompt = [int(t) for t in prompt]
    if len(prompt) + T - 1 > params.l_max:
        raise ContractViolation(
            f"prompt of length {len(prompt)} plus horizon {T} exceeds l_max={params.l_max}")
    options = []
    for n in range(T):
        step = []
        for i in range(K**n):
            probs = forward_numpy(prompt + list(history_of(i, n, K)), params)
            step.append(np.stack([p[:, -1] for p in probs]))
        options.append(step)
    return KernelFamily(options, K)


def gammt_induced_set(params, prompt, T: int, budget: int = DEFAULT_BUDGET) -> MeasureSet:
    """Every law obtained by choosing, at each continuation history, one head."""
    return build_plm(gammt_family(params, prompt, T), budget)


# scenario files ---------------------------------------------------------------

def parse_scenario(text: str) -> tuple[KernelFamily, dict]:
    """Read ``K``, ``T`` and ``L<n>.<j> = p_0,...,p_{K-1}`` lines (``n`` from 1).

    Returns the family and any other recognised settings (``budget``).
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"scenario line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"scenario line {lineno}: duplicate key {key}")
        values[key] = (lineno, value)
    try:
        K = int(values.pop("K")[1])
        T = int(values.pop("T")[1])
    except KeyError as exc:
        raise ConfigError(f"scenario is missing {exc.args[0]}") from None
    except ValueError as exc:
        raise ConfigError(f"scenario K/T must be integers: {exc}") from None
    if K < 1 or T < 1:
        raise ConfigError("scenario K and T must be positive")
    extra = {}
    if "budget" in values:
        extra["budget"] = int(values.pop("budget")[1])
    sets: dict[int, dict[int, np.ndarray]] = {}
    for key, (lineno, value) in values.items():
        name, _, j = key.partition(".")
        if not (name.startswith("L") and name[1:].isdigit() and j.isdigit()):
            raise ConfigError(f"scenario line {lineno}: unknown key {key}")
        n = int(name[1:])
        if not 1 <= n <= T:
            raise ConfigError(f"scenario line {lineno}: step {n} outside [1, {T}]")
        try:
            p = np.array([float(v) for v in value.split(",")])
            check_pmf(p, K, tol=1e-9)
        except (ValueError, ContractViolation) as exc:
            raise ConfigError(f"scenario line {lineno}: {exc}") from None
        sets.setdefault(n, {})[int(j)] = p / p.sum()
    missing = [n for n in range(1, T + 1) if n not in sets]
    if missing:
        raise ConfigError(f"scenario has no pmfs for steps {missing}")
    family = KernelFamily.from_sets(
        [np.stack([sets[n][j] for j in sorted(sets[n])]) for n in range(1, T + 1)], K)
    return family, extra


@dataclass
class VerificationResult:
    family: KernelFamily
    measures: MeasureSet
    report: RectangularityReport
    expected_count: int
    max_mass_error: float

    @property
    def count_ok(self) -> bool:
        return self.measures.enumerated == self.expected_count

    @property
    def mass_ok(self) -> bool:
        return self.max_mass_error <= PATH_TOL

    @property
    def passed(self) -> bool:
        return self.count_ok and self.mass_ok and self.report.passed

    def lines(self) -> list[str]:
        def flag(ok):
            return "PASS" if ok else "FAIL"

        out = [
            f"{flag(self.count_ok)} enumeration count {self.measures.enumerated} "
            f"(closed form {self.expected_count}, {len(self.measures)} distinct)",
            f"{flag(self.mass_ok)} total mass (max error {self.max_mass_error:.3e})",
            f"{flag(not self.report.membership)} membership "
            f"({len(self.report.membership)} violations)",
            f"{flag(not self.report.closure)} pasting closure "
            f"({self.report.pastings_checked} pastings, {len(self.report.closure)} violations)",
        ]
        out += [f"  {v}" for v in self.report.violations[:20]]
        out.append(flag(self.passed))
        return out


def verify_family(family: KernelFamily, budget: int = DEFAULT_BUDGET) -> VerificationResult:
    mset = build_plm(family, budget)
    expected = closed_form_count([len(step[0]) for step in family.options], family.K)
    mass = max(abs(P.path_probs().sum() - 1.0) for P in mset)
    report = check_rectangular(mset, family, budget=budget)
    return VerificationResult(family, mset, report, expected, float(mass))
