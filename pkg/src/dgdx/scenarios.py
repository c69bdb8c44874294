"""Synthetic Gaussian-cluster fixtures realizing each diagnostic failure mode.

Each kind places unit-spaced Gaussian clusters per (domain, class) so that
exactly one decomposition component is large and the ones before it are
near zero, together with a designed head that a train-optimal learner
would plausibly pick.  The machine-checkable expectation (a list of
predicates over diagnosis fields) is the contract; the coordinates are
just one geometry that realizes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DomainMeta,
    LinearProbe,
    ROLE_TEST,
    ROLE_TRAIN,
    RepresentationDataset,
    SPLIT_FIT,
    SPLIT_HOLDOUT,
)

KIND_UNDERFIT = "underfit"
KIND_TEST_INSEPARABLE = "test-inseparable"
KIND_MISALIGNED = "misaligned"
KIND_HEAD_NONINVARIANT = "head-noninvariant"
KIND_SUCCESS = "success"
KIND_LABEL_FLIPPED = "label-flipped"
_INV_TRAIN = tuple(f"inv-train-only-{s}" for s in "abcde")
_INV_ALL = tuple(f"inv-all-{s}" for s in "abcd")

KINDS = (
    KIND_UNDERFIT,
    KIND_TEST_INSEPARABLE,
    KIND_MISALIGNED,
    KIND_HEAD_NONINVARIANT,
    KIND_SUCCESS,
) + _INV_TRAIN + _INV_ALL + (KIND_LABEL_FLIPPED,)

FIG1_KINDS = KINDS[:5]

# kinds whose joint fit must be dominated by the training side
_NEEDS_TRAIN_MAJORITY = (KIND_MISALIGNED, "inv-all-c", KIND_LABEL_FLIPPED)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n_train_domains: int = None
    n_test_domains: int = None
    samples_per_cell: int = 500
    cluster_std: float = 0.08
    dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.samples_per_cell < 10:
            raise ValueError("samples_per_cell must be at least 10")
        if self.cluster_std <= 0:
            raise ValueError("cluster_std must be positive")
        if self.dim < 2:
            raise ValueError(f"kind {self.kind} requires dim >= 2")
        n1, n3 = self.domain_counts()
        if n1 < 2:
            raise ValueError("scenarios need at least 2 training domains")
        if n3 < 1:
            raise ValueError("scenarios need at least 1 test domain")
        if self.kind in _NEEDS_TRAIN_MAJORITY and n1 <= n3:
            raise ValueError(
                f"kind {self.kind} needs more training than test domains "
                "so the joint fit is dominated by the training side"
            )

    def domain_counts(self):
        if self.kind == KIND_LABEL_FLIPPED:
            defaults = (2, 1)
        else:
            defaults = (3, 2)
        n1 = self.n_train_domains if self.n_train_domains is not None else defaults[0]
        n3 = self.n_test_domains if self.n_test_domains is not None else defaults[1]
        return n1, n3


@dataclass(frozen=True)
class ScenarioExpectation:
    kind: str
    predicates: tuple  # of (field, op, value) with op in {"<=", ">="}
    head: LinearProbe

    def to_dict(self):
        return {
            "kind": self.kind,
            "predicates": [
                {"field": f, "op": op, "value": v} for (f, op, v) in self.predicates
            ],
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj):
        preds = tuple((p["field"], p["op"], float(p["value"])) for p in obj["predicates"])
        return cls(obj["kind"], preds, LinearProbe.from_dict(obj["head"]))


@dataclass(frozen=True)
class ExpectationResult:
    passed: bool
    violations: tuple

    def to_dict(self):
        return {"passed": self.passed, "violations": [dict(v) for v in self.violations]}


def check_expectation(diag, exp):
    """Evaluate every predicate of an expectation against a diagnosis."""
    violations = []
    for field, op, value in exp.predicates:
        actual = diag.component(field)
        if op == "<=":
            ok = actual <= value
        elif op == ">=":
            ok = actual >= value
        else:
            raise ValueError(f"unknown predicate op {op!r}")
        if not ok:
            violations.append(
                {"field": field, "op": op, "value": value, "actual": float(actual)}
            )
    return ExpectationResult(not violations, tuple(violations))


# -- geometry builders -----------------------------------------------------------
#
# A builder returns (cells, head_w, head_theta, predicates) where ``cells`` is a
# list of (domain_index, class, center, weight_fraction) entries placed on the
# 2-d plane, the head predicts class 1 iff head_w . z > head_theta, and domain
# indices 0..n1-1 are training domains followed by n3 test domains.

_LOW = 0.05
_HIGH = 0.3


def _columns(n1, n3, train_pos, test_pos, train_centers, test_centers):
    cells = []
    for j in range(n1):
        for c, center in train_centers(train_pos(j)):
            cells.append((j, c) + center)
    for k in range(n3):
        for c, center in test_centers(test_pos(k)):
            cells.append((n1 + k, c) + center)
    return cells


def _split_classes(x):
    return [(0, ((x, -0.5), 1.0)), (1, ((x, 0.5), 1.0))]


def _merged_classes(x):
    return [(0, ((x, 0.0), 1.0)), (1, ((x, 0.0), 1.0))]


def _build_underfit(n1, n3):
    cells = _columns(n1, n3, lambda j: j, lambda k: n1 + k, _merged_classes, _merged_classes)
    preds = (("e0", ">=", _HIGH), ("d0_prime", ">=", _HIGH))
    return cells, (0.0, 1.0), 0.0, preds


def _build_test_inseparable(n1, n3):
    cells = _columns(n1, n3, lambda j: j, lambda k: n1 + k, _split_classes, _merged_classes)
    preds = (("e0", "<=", _LOW), ("e1", ">=", _HIGH), ("d0_prime", ">=", _HIGH))
    return cells, (0.0, 1.0), 0.0, preds


def _build_misaligned(n1, n3):
    def test_centers(x):
        # class layout mirrored in y: a shared head still separates the test
        # domains, but no single line is consistent with training too
        return [(0, ((x, 0.5), 1.0)), (1, ((x, -0.5), 1.0))]

    cells = _columns(n1, n3, lambda j: j, lambda k: n1 + k, _split_classes, test_centers)
    preds = (
        ("e0", "<=", _LOW),
        ("e1", "<=", _LOW),
        ("e2", ">=", _HIGH),
        ("d0_prime", ">=", _HIGH),
    )
    return cells, (0.0, 1.0), 0.0, preds


def _build_head_noninvariant(n1, n3):
    # classes split along x everywhere (the consistent rule); training domains
    # stacked along y; the designed head tilts into y, which stays
    # train-optimal but breaks on test domains placed further up
    slope = 0.6 / (n1 - 1)
    theta = slope * (n1 - 1) / 2.0
    gap = 1
    while slope * (n1 + 2 * gap + 1) / 2.0 - 0.5 < 0.2:
        gap += 1

    def train_centers(y):
        return [(0, ((-0.5, y), 1.0)), (1, ((0.5, y), 1.0))]

    cells = _columns(
        n1, n3, lambda j: j, lambda k: n1 + gap + k, train_centers, train_centers
    )
    preds = (
        ("e0", "<=", _LOW),
        ("e1", "<=", _LOW),
        ("e2", "<=", _LOW),
        ("e3", ">=", _HIGH),
        ("d0_prime", ">=", _HIGH),
    )
    return cells, (1.0, slope), theta, preds


def _build_success(n1, n3):
    cells = _columns(n1, n3, lambda j: j, lambda k: n1 + k, _split_classes, _split_classes)
    preds = (
        ("e0", "<=", _LOW),
        ("e1", "<=", _LOW),
        ("e2", "<=", _LOW),
        ("e3", "<=", _LOW),
        ("d0_prime", ">=", _HIGH),
        ("d2", "<=", _LOW),
    )
    return cells, (0.0, 1.0), 0.0, preds


def _x_split(x_offset, y):
    return [(0, ((x_offset - 0.5, y), 1.0)), (1, ((x_offset + 0.5, y), 1.0))]


def _build_inv_train_only(variant, n1, n3):
    # all training domains coincide (invariant among themselves); test domains
    # sit at distinct y offsets, so the union stays distinguishable
    cells = []
    head_w, theta = (1.0, 0.0), 0.0
    base = (("d0_prime", "<=", _LOW), ("d1_prime", ">=", _HIGH))
    if variant == "a":
        for j in range(n1):
            cells += [(j, 0, (0.0, 0.0), 1.0), (j, 1, (0.0, 0.0), 1.0)]
        for k in range(n3):
            cells += [(n1 + k, 0, (0.0, 2.0 + k), 1.0), (n1 + k, 1, (0.0, 2.0 + k), 1.0)]
        preds = base + (("e0", ">=", _HIGH),)
    elif variant == "b":
        for j in range(n1):
            cells += [(j, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 0.0)]
        for k in range(n3):
            cells += [(n1 + k, 0, (0.0, 2.0 + k), 1.0), (n1 + k, 1, (0.0, 2.0 + k), 1.0)]
        preds = base + (("e0", "<=", _LOW), ("e1", ">=", _HIGH))
    elif variant == "c":
        for j in range(n1):
            cells += [(j, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 0.0)]
        for k in range(n3):
            y = 2.0 + k
            cells += [(n1 + k, 0, (0.5, y), 1.0), (n1 + k, 1, (-0.5, y), 1.0)]
        preds = base + (("e0", "<=", _LOW), ("e1", "<=", _LOW), ("e2", ">=", _HIGH))
    elif variant == "d":
        for j in range(n1):
            cells += [(j, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 0.0)]
        for k in range(n3):
            cells += [(n1 + k, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 2.0 + k)]
        head_w, theta = (1.0, 0.5), 0.0
        preds = base + (
            ("e0", "<=", _LOW),
            ("e1", "<=", _LOW),
            ("e2", "<=", _LOW),
            ("e3", ">=", _HIGH),
        )
    elif variant == "e":
        for j in range(n1):
            cells += [(j, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 0.0)]
        for k in range(n3):
            cells += [(n1 + k, c, ctr, w) for c, (ctr, w) in _x_split(0.0, 2.0 + k)]
        preds = base + tuple((f, "<=", _LOW) for f in ("e0", "e1", "e2", "e3"))
    else:
        raise AssertionError(variant)
    return cells, head_w, theta, preds


def _build_inv_all(variant, n1, n3):
    # every domain has the same marginal over the plane; only the
    # class-conditional structure varies
    left, right = (-0.5, 0.0), (0.5, 0.0)
    cells = []
    if variant == "a":
        for i in range(n1 + n3):
            cells += [(i, 0, (0.0, 0.0), 1.0), (i, 1, (0.0, 0.0), 1.0)]
        preds = (("d1_prime", "<=", _LOW), ("e0", ">=", _HIGH))
    elif variant == "b":
        for j in range(n1):
            cells += [(j, 0, left, 1.0), (j, 1, right, 1.0)]
        for k in range(n3):
            cells += [
                (n1 + k, 0, left, 0.5),
                (n1 + k, 0, right, 0.5),
                (n1 + k, 1, left, 0.5),
                (n1 + k, 1, right, 0.5),
            ]
        preds = (("d1_prime", "<=", _LOW), ("e0", "<=", _LOW), ("e1", ">=", _HIGH))
    elif variant == "c":
        for j in range(n1):
            cells += [(j, 0, left, 1.0), (j, 1, right, 1.0)]
        for k in range(n3):
            cells += [(n1 + k, 0, right, 1.0), (n1 + k, 1, left, 1.0)]
        preds = (
            ("d1_prime", "<=", _LOW),
            ("e0", "<=", _LOW),
            ("e1", "<=", _LOW),
            ("e2", ">=", _HIGH),
        )
    elif variant == "d":
        for i in range(n1 + n3):
            cells += [(i, 0, left, 1.0), (i, 1, right, 1.0)]
        preds = (("e3_prime", "<=", _LOW), ("d2_prime", "<=", _LOW))
    else:
        raise AssertionError(variant)
    return cells, (1.0, 0.0), 0.0, preds


def _build_label_flipped(n1, n3):
    left, right = (-0.5, 0.0), (0.5, 0.0)
    cells = []
    for j in range(n1):
        cells += [(j, 0, left, 1.0), (j, 1, right, 1.0)]
    for k in range(n3):
        cells += [(n1 + k, 0, right, 1.0), (n1 + k, 1, left, 1.0)]
    preds = (("d1_prime", "<=", _LOW), ("d2_prime", ">=", _HIGH))
    return cells, (1.0, 0.0), 0.0, preds


def _build(kind, n1, n3):
    if kind == KIND_UNDERFIT:
        return _build_underfit(n1, n3)
    if kind == KIND_TEST_INSEPARABLE:
        return _build_test_inseparable(n1, n3)
    if kind == KIND_MISALIGNED:
        return _build_misaligned(n1, n3)
    if kind == KIND_HEAD_NONINVARIANT:
        return _build_head_noninvariant(n1, n3)
    if kind == KIND_SUCCESS:
        return _build_success(n1, n3)
    if kind in _INV_TRAIN:
        return _build_inv_train_only(kind[-1], n1, n3)
    if kind in _INV_ALL:
        return _build_inv_all(kind[-1], n1, n3)
    if kind == KIND_LABEL_FLIPPED:
        return _build_label_flipped(n1, n3)
    raise AssertionError(kind)


def _head_probe(head_w, theta, dim, scale=4.0):
    w = np.zeros((2, dim))
    w[1, 0] = scale * head_w[0]
    w[1, 1] = scale * head_w[1]
    b = np.array([0.0, -scale * theta])
    return LinearProbe(w, b)


def generate(spec):
    """Generate the dataset and its machine-checkable expectation for a kind.

    Deterministic given the spec.  Every (domain, class) cell receives
    ``samples_per_cell`` Gaussian samples split evenly into fit and holdout;
    extra dimensions beyond the first two carry pure noise.
    """
    n1, n3 = spec.domain_counts()
    cells, head_w, theta, preds = _build(spec.kind, n1, n3)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, KINDS.index(spec.kind))))

    domains = tuple(
        [DomainMeta(j, f"train{j}", ROLE_TRAIN) for j in range(n1)]
        + [DomainMeta(n1 + k, f"test{k}", ROLE_TEST) for k in range(n3)]
    )

    ids, splits, labels, zs = [], [], [], []
    # group cell entries per (domain, class) so fractional sites share the budget
    grouped = {}
    for (dom, cls, center, frac) in cells:
        grouped.setdefault((dom, cls), []).append((center, frac))
    for (dom, cls), sites in sorted(grouped.items()):
        counts = [int(round(frac * spec.samples_per_cell)) for _, frac in sites]
        counts[-1] = spec.samples_per_cell - sum(counts[:-1])
        for (center, _), count in zip(sites, counts):
            mean = np.zeros(spec.dim)
            mean[0], mean[1] = center
            pts = mean + rng.normal(0.0, spec.cluster_std, size=(count, spec.dim))
            n_fit = (count + 1) // 2
            for i in range(count):
                ids.append(dom)
                splits.append(SPLIT_FIT if i < n_fit else SPLIT_HOLDOUT)
                labels.append(cls)
            zs.append(pts)
    ds = RepresentationDataset(
        spec.dim,
        2,
        domains,
        np.asarray(ids),
        np.asarray(splits),
        np.asarray(labels),
        np.vstack(zs).astype(np.float32),
    )
    head = _head_probe(head_w, theta, spec.dim)
    return ds, ScenarioExpectation(spec.kind, preds, head)
