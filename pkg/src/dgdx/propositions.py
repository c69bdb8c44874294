"""Executable checks of the metric relationships on exactly solvable instances.

Instances have finite support, exact per-domain probability tables and
explicit finite probe families, so every infimum becomes an exact minimum
and every implication can be verified numerically:

* invariance transfer: a zero-error common classifier plus domain-invariant
  marginals forces class-conditional invariance;
* generalization transfer: zero training error plus class-conditional
  invariance forces zero target error;
* orderings between the primed metrics, including the class-conditional
  one under uniform class priors;
* the partition-averaged ordering between training error and target
  separability over all train/test splits of a domain family.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import LinearProbe
from .probe import FiniteProbeFamily, constant_probe

_EXACT_TOL = 1e-12


@dataclass(frozen=True)
class PartitionInstance:
    """A finite domain family with exact distributions over a shared support.

    ``joint[i, s, y]`` is domain i's probability of (point s, class y).  The
    training subset is ``train_idx``; the trained head is the label-family
    probe minimizing the training-domain error (lowest index on ties) unless
    ``head_index`` overrides it.  Domain classifiers need their own family
    because they have one output per domain rather than per class.
    """

    points: np.ndarray  # (m, dim)
    joint: np.ndarray  # (K, m, C)
    train_idx: tuple
    label_family: FiniteProbeFamily
    domain_family: FiniteProbeFamily = None
    head_index: int = None

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "joint", np.asarray(self.joint, dtype=np.float64))
        if self.joint.ndim != 3 or self.joint.shape[1] != self.points.shape[0]:
            raise ValueError("joint must have shape (num_domains, num_points, num_classes)")
        if (self.joint < 0).any():
            raise ValueError("probabilities must be nonnegative")
        sums = self.joint.sum(axis=(1, 2))
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("each domain's probabilities must sum to 1")
        k = self.joint.shape[0]
        if not self.train_idx or len(self.train_idx) >= k:
            raise ValueError("train_idx must be a nonempty proper subset of domains")
        if self.label_family.num_outputs != self.joint.shape[2]:
            raise ValueError("label family outputs must equal the number of classes")
        if self.domain_family is not None and self.domain_family.num_outputs != k:
            raise ValueError("domain family outputs must equal the number of domains")

    @property
    def num_domains(self):
        return self.joint.shape[0]

    @property
    def num_classes(self):
        return self.joint.shape[2]

    @property
    def test_idx(self):
        return tuple(i for i in range(self.num_domains) if i not in set(self.train_idx))

    def priors(self):
        """Per-domain class priors, shape (K, C)."""
        return self.joint.sum(axis=1)

    def marginals(self):
        """Per-domain point marginals, shape (K, m)."""
        return self.joint.sum(axis=2)

    def to_dict(self):
        return {
            "points": self.points.tolist(),
            "joint": self.joint.tolist(),
            "train_idx": list(self.train_idx),
            "label_family": self.label_family.to_dict(),
            "domain_family": None if self.domain_family is None else self.domain_family.to_dict(),
            "head_index": self.head_index,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            points=np.asarray(obj["points"], dtype=np.float64),
            joint=np.asarray(obj["joint"], dtype=np.float64),
            train_idx=tuple(obj["train_idx"]),
            label_family=FiniteProbeFamily.from_dict(obj["label_family"]),
            domain_family=(
                FiniteProbeFamily.from_dict(obj["domain_family"])
                if obj.get("domain_family")
                else None
            ),
            head_index=obj.get("head_index"),
        )


# -- exact evaluation --------------------------------------------------------------


def eval_F(inst, domain_subset, probe):
    """Equal-weight average over the subset of the exact expected 0-1 loss."""
    subset = list(domain_subset)
    if not subset:
        raise ValueError("domain subset must be nonempty")
    preds = probe.predict(inst.points)
    mismatch = preds[:, None] != np.arange(inst.num_classes)[None, :]  # (m, C)
    errs = (inst.joint[subset] * mismatch[None, :, :]).sum(axis=(1, 2))
    return float(errs.mean())


def _label_errors(inst, subset):
    """Per-probe exact errors over a domain subset, shape (P,)."""
    preds = np.stack([p.predict(inst.points) for p in inst.label_family.probes])
    mismatch = preds[:, :, None] != np.arange(inst.num_classes)[None, None, :]
    joint_mean = inst.joint[list(subset)].mean(axis=0)  # (m, C)
    return (mismatch * joint_mean[None, :, :]).sum(axis=(1, 2))


def _best_label(inst, subset):
    errs = _label_errors(inst, subset)
    idx = int(np.argmin(errs))
    return float(errs[idx]), idx


def _head(inst):
    if inst.head_index is not None:
        return float(eval_F(inst, inst.train_idx, inst.label_family.probes[inst.head_index])), inst.head_index
    return _best_label(inst, inst.train_idx)


def eval_G(inst, domain_subset, probe, conditional_class=None):
    """Exact expected domain-classification 0-1 loss over an ordered subset.

    Domain at position k in the subset carries target label k.  With
    ``conditional_class`` the expectation conditions each domain on that class.
    """
    subset = list(domain_subset)
    if not subset:
        raise ValueError("domain subset must be nonempty")
    preds = probe.predict(inst.points)  # (m,)
    if conditional_class is None:
        weights = inst.marginals()[subset]  # (|A|, m)
    else:
        pri = inst.priors()[subset, conditional_class]
        if (pri <= 0).any():
            raise ValueError(
                f"class {conditional_class} has zero prior in some domain; "
                "the conditional metric is undefined"
            )
        weights = inst.joint[subset, :, conditional_class] / pri[:, None]
    errs = [
        float(weights[k] @ (preds != k).astype(np.float64)) for k in range(len(subset))
    ]
    return float(np.mean(errs))


def _best_domain(inst, subset, conditional_class=None):
    if inst.domain_family is None:
        raise ValueError("instance has no domain classifier family")
    errs = [
        eval_G(inst, subset, p, conditional_class) for p in inst.domain_family.probes
    ]
    idx = int(np.argmin(errs))
    return float(errs[idx]), idx


# -- proposition checks --------------------------------------------------------------


@dataclass(frozen=True)
class PropositionReport:
    proposition: str
    gate_passed: bool
    gate_reason: str
    conclusion_passed: bool
    violations: tuple

    def to_dict(self):
        return {
            "proposition": self.proposition,
            "gate_passed": self.gate_passed,
            "gate_reason": self.gate_reason,
            "conclusion_passed": self.conclusion_passed,
            "violations": [dict(v) for v in self.violations],
        }


def _conditionals(inst, y):
    """Per-domain conditional point distributions for class y, or None if the
    class prior vanishes in some domain while positive in another."""
    pri = inst.priors()[:, y]
    total = pri.sum()
    if total <= _EXACT_TOL:
        return "absent"
    if (pri <= _EXACT_TOL).any():
        return None
    return inst.joint[:, :, y] / pri[:, None]


def check_prop1(inst, tol=_EXACT_TOL):
    """Gate: domain-invariant marginals and a common zero-error classifier in
    the family.  Conclusion: class-conditional distributions agree across all
    domains for every class."""
    marg = inst.marginals()
    dev = np.abs(marg - marg[0]).max()
    if dev > tol:
        return PropositionReport(
            "prop1", False, f"precondition not met: marginals differ by {dev:.3e}", False, ()
        )
    all_domains = range(inst.num_domains)
    best, _ = _best_label(inst, all_domains)
    if best > tol:
        return PropositionReport(
            "prop1",
            False,
            f"precondition not met: no common zero-error classifier (best {best:.3e})",
            False,
            (),
        )
    violations = []
    for y in range(inst.num_classes):
        cond = _conditionals(inst, y)
        if isinstance(cond, str):  # class carries no mass anywhere
            continue
        if cond is None:
            return PropositionReport(
                "prop1",
                False,
                f"precondition not met: class {y} prior vanishes in some domain only",
                False,
                (),
            )
        dev = np.abs(cond - cond[0])
        if dev.max() > tol:
            d, s = np.unravel_index(int(np.argmax(dev)), dev.shape)
            violations.append(
                {"class": y, "domain": int(d), "point": int(s), "deviation": float(dev.max())}
            )
    return PropositionReport("prop1", True, "ok", not violations, tuple(violations))


def check_prop2(inst, tol=_EXACT_TOL):
    """Gate: the trained head has zero training error and class-conditional
    distributions are invariant.  Conclusion: zero error on the held-out
    domains."""
    e0, head_idx = _head(inst)
    if e0 > tol:
        return PropositionReport(
            "prop2", False, f"precondition not met: training error {e0:.3e} > 0", False, ()
        )
    for y in range(inst.num_classes):
        cond = _conditionals(inst, y)
        if isinstance(cond, str):
            continue
        if cond is None:
            return PropositionReport(
                "prop2",
                False,
                f"precondition not met: class {y} prior vanishes in some domain only",
                False,
                (),
            )
        dev = np.abs(cond - cond[0]).max()
        if dev > tol:
            return PropositionReport(
                "prop2",
                False,
                f"precondition not met: class {y} conditionals differ by {dev:.3e}",
                False,
                (),
            )
    e3 = eval_F(inst, inst.test_idx, inst.label_family.probes[head_idx])
    ok = e3 <= tol
    violations = () if ok else ({"target_error": e3, "head_index": head_idx},)
    return PropositionReport("prop2", True, "ok", ok, violations)


@dataclass(frozen=True)
class OrderingReport:
    entries: tuple  # of dicts: name, status, lhs, rhs

    @property
    def all_hold(self):
        return all(e["status"] != "violated" for e in self.entries)

    def to_dict(self):
        return {"entries": [dict(e) for e in self.entries]}


def check_orderings(inst, tol=_EXACT_TOL):
    """Exact-minimum versions of the metric orderings.

    The separability/misalignment ordering must hold unconditionally.  The
    misalignment/test-error ordering needs the head to minimize training
    error within the family; the conditional-invariance ordering needs
    uniform class priors.  Checks whose assumption fails are reported as
    assumption-unmet with values attached.
    """
    entries = []
    test = inst.test_idx
    all_domains = tuple(range(inst.num_domains))
    e1, _ = _best_label(inst, test)
    _, joint_idx = _best_label(inst, all_domains)
    e2 = eval_F(inst, test, inst.label_family.probes[joint_idx])
    entries.append(
        {
            "name": "e1_le_e2",
            "status": "holds" if e1 <= e2 + tol else "violated",
            "lhs": e1,
            "rhs": e2,
        }
    )
    e0, head_idx = _head(inst)
    best_train, _ = _best_label(inst, inst.train_idx)
    e3 = eval_F(inst, test, inst.label_family.probes[head_idx])
    if e0 <= best_train + tol:
        entries.append(
            {
                "name": "e2_le_e3",
                "status": "holds" if e2 <= e3 + tol else "violated",
                "lhs": e2,
                "rhs": e3,
            }
        )
    else:
        entries.append(
            {"name": "e2_le_e3", "status": "assumption-unmet", "lhs": e2, "rhs": e3}
        )
    if inst.domain_family is not None:
        k = inst.num_domains
        pri = inst.priors()
        uniform = np.abs(pri - 1.0 / inst.num_classes).max() <= 1e-9
        g1, _ = _best_domain(inst, all_domains)
        d1 = 1.0 - g1 - 1.0 / k
        if (pri > 0).all():
            gys = [
                _best_domain(inst, all_domains, conditional_class=y)[0]
                for y in range(inst.num_classes)
            ]
            d2 = 1.0 - float(np.mean(gys)) - 1.0 / k
        else:
            d2 = None
        if uniform and d2 is not None:
            entries.append(
                {
                    "name": "d1_le_d2",
                    "status": "holds" if d1 <= d2 + tol else "violated",
                    "lhs": d1,
                    "rhs": d2,
                }
            )
        else:
            entries.append(
                {"name": "d1_le_d2", "status": "assumption-unmet", "lhs": d1, "rhs": d2}
            )
    return OrderingReport(tuple(entries))


@dataclass(frozen=True)
class PartitionExpectationReport:
    n_subsets: int
    mean_train_error: float
    mean_separability_error: float
    holds: bool

    def to_dict(self):
        return {
            "n_subsets": self.n_subsets,
            "mean_train_error": self.mean_train_error,
            "mean_separability_error": self.mean_separability_error,
            "holds": self.holds,
        }


def check_partition_expectation(points, joint, label_family, n1, max_subsets=10000):
    """Average both metrics over every balanced train/test split of the family.

    The head for each split is the family minimizer of the training error, so
    the averaged training error can never exceed the averaged best target
    separability error when splits are balanced.
    """
    joint = np.asarray(joint, dtype=np.float64)
    k = joint.shape[0]
    if k != 2 * n1:
        raise ValueError("the domain count must equal 2 * n1 (balanced splits)")
    from math import comb

    if comb(k, n1) > max_subsets:
        raise ValueError(f"subset count {comb(k, n1)} exceeds the enumeration guard {max_subsets}")
    base = PartitionInstance(
        points=points,
        joint=joint,
        train_idx=tuple(range(n1)),
        label_family=label_family,
    )
    e0s, e1s = [], []
    for s in itertools.combinations(range(k), n1):
        sbar = tuple(i for i in range(k) if i not in s)
        e0s.append(_best_label(base, s)[0])
        e1s.append(_best_label(base, sbar)[0])
    mean_e0 = float(np.mean(e0s))
    mean_e1 = float(np.mean(e1s))
    return PartitionExpectationReport(len(e0s), mean_e0, mean_e1, mean_e0 <= mean_e1 + 1e-9)


# -- random instance constructors ------------------------------------------------------


def _random_family(rng, num_outputs, dim, size, scale=1.5):
    probes = [constant_probe(k, num_outputs, dim) for k in range(num_outputs)]
    for _ in range(size):
        w = rng.normal(0.0, scale, size=(num_outputs, dim))
        b = rng.normal(0.0, 0.5, size=num_outputs)
        probes.append(LinearProbe(w, b))
    return FiniteProbeFamily(tuple(probes))


def random_instance(
    seed,
    n_domains=4,
    n_train=2,
    n_points=8,
    dim=2,
    num_classes=2,
    family_size=20,
    uniform_priors=True,
):
    """A generic random instance: random support, random probability tables,
    random probe families.  Uniform priors give each class exactly 1/C mass
    in every domain."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    points = rng.normal(0.0, 1.0, size=(n_points, dim))
    label_family = _random_family(rng, num_classes, dim, family_size)
    domain_family = _random_family(rng, n_domains, dim, family_size)
    joint = np.zeros((n_domains, n_points, num_classes))
    for i in range(n_domains):
        if uniform_priors:
            pri = np.full(num_classes, 1.0 / num_classes)
        else:
            pri = rng.dirichlet(np.ones(num_classes)) * 0.6 + 0.4 / num_classes
            pri = pri / pri.sum()
        for y in range(num_classes):
            joint[i, :, y] = pri[y] * rng.dirichlet(np.ones(n_points))
    train_idx = tuple(sorted(rng.choice(n_domains, size=n_train, replace=False).tolist()))
    return PartitionInstance(points, joint, train_idx, label_family, domain_family)


def make_prop1_instance(seed, n_domains=3, n_points=8, dim=2, num_classes=2, family_size=12):
    """Precondition-satisfying instance: one shared point marginal for every
    domain and labels assigned by a family probe (so a common zero-error
    classifier exists by construction)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 102)))
    for _ in range(64):
        points = rng.normal(0.0, 1.0, size=(n_points, dim))
        family = _random_family(rng, num_classes, dim, family_size)
        probe = family.probes[int(rng.integers(len(family)))]
        labels = probe.predict(points)
        if np.unique(labels).size >= 2:
            break
    q = rng.dirichlet(np.ones(n_points))
    joint_one = np.zeros((n_points, num_classes))
    joint_one[np.arange(n_points), labels] = q
    joint = np.repeat(joint_one[None, :, :], n_domains, axis=0)
    return PartitionInstance(points, joint, (0,), family, None)


def make_prop2_instance(seed, n_domains=3, n_train=2, n_points=8, dim=2, num_classes=2,
                        family_size=12):
    """Precondition-satisfying instance: class-conditional point distributions
    shared across domains (class priors may differ), labels realizable with
    zero error by a family probe."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 103)))
    for _ in range(64):
        points = rng.normal(0.0, 1.0, size=(n_points, dim))
        family = _random_family(rng, num_classes, dim, family_size)
        probe = family.probes[int(rng.integers(len(family)))]
        labels = probe.predict(points)
        present = np.unique(labels)
        if present.size >= 2:
            break
    cond = np.zeros((num_classes, n_points))
    for y in present:
        mask = labels == y
        cond[y, mask] = rng.dirichlet(np.ones(int(mask.sum())))
    joint = np.zeros((n_domains, n_points, num_classes))
    for i in range(n_domains):
        pri = rng.dirichlet(np.ones(present.size)) * 0.6 + 0.4 / present.size
        pri = pri / pri.sum()
        for j, y in enumerate(present):
            joint[i, :, y] = pri[j] * cond[y]
    return PartitionInstance(points, joint, tuple(range(n_train)), family, None)


# -- randomized suites -----------------------------------------------------------------


@dataclass(frozen=True)
class SuiteReport:
    proposition: str
    trials: int
    gated_out: int
    passed: int
    failed: int
    counterexample: dict = None

    def to_dict(self):
        return {
            "proposition": self.proposition,
            "trials": self.trials,
            "gated_out": self.gated_out,
            "passed": self.passed,
            "failed": self.failed,
            "counterexample": self.counterexample,
        }


def run_suite(name, trials, seed=0):
    """Run one proposition suite over randomized instances.

    Every gated-in trial must pass its conclusion; a single failure is a
    defect because the statements are theorems.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    gated_out = passed = failed = 0
    counterexample = None
    for t in range(trials):
        t_seed = (seed << 20) + t
        if name == "prop1":
            inst = make_prop1_instance(t_seed, n_points=6 + t % 5, num_classes=2 + t % 2)
            rep = check_prop1(inst)
            ok, gate = rep.conclusion_passed, rep.gate_passed
            detail = rep.to_dict()
        elif name == "prop2":
            inst = make_prop2_instance(t_seed, n_points=6 + t % 5, num_classes=2 + t % 2)
            rep = check_prop2(inst)
            ok, gate = rep.conclusion_passed, rep.gate_passed
            detail = rep.to_dict()
        elif name == "orderings":
            inst = random_instance(
                t_seed,
                n_domains=3 + t % 3,
                n_train=2,
                n_points=6 + t % 4,
                num_classes=2 + t % 2,
                uniform_priors=True,
            )
            rep = check_orderings(inst)
            ok = rep.all_hold
            gate = all(e["status"] != "assumption-unmet" for e in rep.entries)
            detail = rep.to_dict()
        elif name == "partition":
            n1 = 2 + t % 2
            inst = random_instance(
                t_seed, n_domains=2 * n1, n_train=n1, n_points=6 + t % 4, uniform_priors=True
            )
            rep = check_partition_expectation(inst.points, inst.joint, inst.label_family, n1)
            ok, gate = rep.holds, True
            detail = rep.to_dict()
        else:
            raise ValueError(f"unknown suite {name!r}")
        if not gate:
            gated_out += 1
            continue
        if ok:
            passed += 1
        else:
            failed += 1
            if counterexample is None:
                counterexample = {"trial": t, "seed": t_seed, "detail": detail}
    return SuiteReport(name, trials, gated_out, passed, failed, counterexample)


SUITES = ("prop1", "prop2", "orderings", "partition")
