import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgdx.core import (
    DatasetError,
    DomainMeta,
    LinearProbe,
    RepresentationDataset,
    ROLE_TEST,
    ROLE_TRAIN,
    ROLE_VALID,
)
from dgdx.metrics import (
    ConstantSeriesError,
    MetricConfig,
    all_probes_converged,
    csv_header,
    csv_row,
    d0_prime,
    d1_prime,
    d2_prime,
    decompose,
    diagnose,
    e0_prime,
    e1_prime,
    e2_prime,
    e3_prime,
    pearson,
)
from dgdx.probe import FiniteProbeFamily, binary_threshold_probe, constant_probe, zero_one_error

from conftest import random_dataset


def build_dataset(cells, dim=2, num_classes=2, per_cell=80, std=0.05, seed=0, roles=None):
    """cells: {(domain_id, label): center or [centers]}; roles: {domain_id: role}."""
    rng = np.random.default_rng(seed)
    domain_ids = sorted({d for d, _ in cells})
    roles = roles or {}
    domains = tuple(
        DomainMeta(d, f"d{d}", roles.get(d, ROLE_TRAIN)) for d in domain_ids
    )
    ids, splits, labels, zs = [], [], [], []
    for (d, y), centers in sorted(cells.items()):
        if not isinstance(centers, list):
            centers = [centers]
        per_center = per_cell // len(centers)
        for c in centers:
            mean = np.zeros(dim)
            mean[: len(c)] = c
            pts = mean + rng.normal(0, std, size=(per_center, dim))
            for i in range(per_center):
                ids.append(d)
                splits.append(0 if i < per_center // 2 else 1)
                labels.append(y)
            zs.append(pts)
    return RepresentationDataset(dim, num_classes, domains, ids, splits, labels,
                                 np.vstack(zs).astype(np.float32))


def y_rule_head(scale=4.0):
    return LinearProbe(np.array([[0.0, 0.0], [0.0, scale]]), np.zeros(2))


class TestGeneralizationMetrics:
    def test_e0_perfect_head(self):
        ds = build_dataset({(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
                            (2, 0): (2, -1), (2, 1): (2, 1)}, roles={2: ROLE_TEST})
        assert e0_prime(ds, y_rule_head()) == 0.0

    def test_e0_constant_head_balanced(self):
        ds = build_dataset({(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
                            (2, 0): (2, -1), (2, 1): (2, 1)}, roles={2: ROLE_TEST})
        head = constant_probe(0, 2, 2)
        assert e0_prime(ds, head) == pytest.approx(0.5)

    def test_e0_equals_per_domain_recount(self):
        ds = random_dataset(11, n_train=3, n_test=1, dim=3)
        rng = np.random.default_rng(0)
        head = LinearProbe(rng.normal(size=(2, 3)), rng.normal(size=2))
        errs = []
        for dm in ds.domains:
            if dm.role != ROLE_TRAIN:
                continue
            m = ds.mask(domain_id=dm.id, split=1)
            errs.append(zero_one_error(head, ds.z[m].astype(float), ds.labels[m]))
        assert e0_prime(ds, head) == pytest.approx(np.mean(errs))

    def test_e1_separable_targets(self):
        ds = build_dataset({(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
                            (2, 0): (5, -1), (2, 1): (5, 1)}, roles={2: ROLE_TEST})
        assert e1_prime(ds) <= 0.01

    def test_e1_interleaved_targets_near_half(self):
        ds = build_dataset(
            {(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
             (2, 0): (5, 0), (2, 1): (5, 0), (3, 0): (6, 0), (3, 1): (6, 0)},
            roles={2: ROLE_TEST, 3: ROLE_TEST}, per_cell=200,
        )
        assert e1_prime(ds) == pytest.approx(0.5, abs=0.06)

    def test_e2_identical_domains_separable(self):
        cells = {(d, y): (0, 2 * y - 1) for d in range(3) for y in range(2)}
        ds = build_dataset(cells, roles={2: ROLE_TEST})
        assert e2_prime(ds) <= 0.01

    def test_e2_equals_e1_when_test_matches_train(self):
        # two training domains drawn from the same distribution as the single
        # test domain: the joint fit and the target-only fit see the same task
        cells = {(d, y): (0, 2 * y - 1) for d in range(3) for y in range(2)}
        ds = build_dataset(cells, std=0.8, per_cell=160, roles={2: ROLE_TEST})
        assert e2_prime(ds) == pytest.approx(e1_prime(ds), abs=0.02)

    def test_e3_constant_head(self):
        ds = build_dataset({(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
                            (2, 0): (2, -1), (2, 1): (2, 1)}, roles={2: ROLE_TEST})
        assert e3_prime(ds, constant_probe(1, 2, 2)) == pytest.approx(0.5)

    def test_target_role_valid_selects_validation_domains(self):
        ds = build_dataset(
            {(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (1, -1), (1, 1): (1, 1),
             (2, 0): (2, 1), (2, 1): (2, -1)},  # flipped validation domain
            roles={2: ROLE_VALID},
        )
        head = y_rule_head()
        cfg = MetricConfig(target_role=ROLE_VALID)
        assert e3_prime(ds, head, cfg) == pytest.approx(1.0)
        with pytest.raises(DatasetError, match="role 'test'"):
            e3_prime(ds, head, MetricConfig(target_role=ROLE_TEST))


class TestInvarianceMetrics:
    def test_d0_identical_training_domains(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(40, 2)).astype(np.float32)
        cells_pts = np.vstack([pts, pts])
        ids = np.array([0] * 40 + [1] * 40)
        splits = np.tile(np.array([0] * 20 + [1] * 20, dtype=np.uint8), 2)
        labels = np.tile(np.array([0, 1] * 20), 2)
        domains = (DomainMeta(0, "a", ROLE_TRAIN), DomainMeta(1, "b", ROLE_TRAIN),
                   DomainMeta(2, "t", ROLE_TEST))
        extra = rng.normal(size=(4, 2)).astype(np.float32)
        all_z = np.vstack([cells_pts, extra])
        ids = np.concatenate([ids, [2, 2, 2, 2]])
        splits = np.concatenate([splits, [0, 0, 1, 1]]).astype(np.uint8)
        labels = np.concatenate([labels, [0, 1, 0, 1]])
        ds = RepresentationDataset(2, 2, domains, ids, splits, labels, all_z)
        assert abs(d0_prime(ds)) <= 0.05

    def test_d0_fully_separated(self):
        ds = build_dataset({(0, 0): (0, -1), (0, 1): (0, 1), (1, 0): (5, -1), (1, 1): (5, 1),
                            (2, 0): (9, -1), (2, 1): (9, 1)}, roles={2: ROLE_TEST})
        assert d0_prime(ds) == pytest.approx(0.5, abs=0.01)

    def test_d0_two_coincident_one_separated_is_third(self):
        cells = {(0, 0): (0, -1), (0, 1): (0, 1),
                 (1, 0): (0, -1), (1, 1): (0, 1),
                 (2, 0): (5, -1), (2, 1): (5, 1),
                 (3, 0): (9, -1), (3, 1): (9, 1)}
        ds = build_dataset(cells, per_cell=200, roles={3: ROLE_TEST})
        assert d0_prime(ds) == pytest.approx(1 / 3, abs=0.05)

    def test_d1_identical_domains_near_zero(self):
        cells = {(d, y): (0, 2 * y - 1) for d in range(4) for y in range(2)}
        ds = build_dataset(cells, per_cell=200, roles={3: ROLE_TEST})
        assert abs(d1_prime(ds)) <= 0.05

    def test_d1_all_separated(self):
        cells = {(d, y): (4 * d, 2 * y - 1) for d in range(4) for y in range(2)}
        ds = build_dataset(cells, roles={3: ROLE_TEST})
        assert d1_prime(ds) == pytest.approx(0.75, abs=0.01)

    def test_d1_proxy_mode_matches_d0_baseline(self):
        # 3 training domains (one of which gets dropped) plus 1 validation
        # domain: the probe sees 3 domains either way
        cells = {(d, y): (4 * d, 2 * y - 1) for d in range(4) for y in range(2)}
        ds = build_dataset(cells, roles={3: ROLE_VALID})
        cfg = MetricConfig(target_role=ROLE_VALID)
        assert d1_prime(ds, cfg) == pytest.approx(2 / 3, abs=0.01)

    def test_d2_label_flipped_alignment(self):
        # unconditional marginals match everywhere, so d1' is near zero, but
        # conditioned on a class the training and test domains separate
        cells = {(0, 0): (0, 0), (0, 1): (4, 0),
                 (1, 0): (0, 0), (1, 1): (4, 0),
                 (2, 0): (4, 0), (2, 1): (0, 0)}
        ds = build_dataset(cells, per_cell=240, roles={2: ROLE_TEST})
        assert abs(d1_prime(ds)) <= 0.05
        assert d2_prime(ds) >= 0.3

    def test_d2_missing_cell_is_error(self):
        ds = random_dataset(3)
        labels = ds.labels.copy()
        # erase class 1 from domain 0 by relabeling to class 0
        labels[(ds.domain_ids == 0) & (labels == 1)] = 0
        broken = RepresentationDataset(ds.dim, ds.num_classes, ds.domains, ds.domain_ids,
                                       ds.splits, labels, ds.z)
        with pytest.raises(DatasetError, match="class-conditional"):
            d2_prime(broken)

    def test_d2_single_class_equals_d1(self):
        ds = random_dataset(4, num_classes=1)
        cfg = MetricConfig()
        assert d2_prime(ds, cfg) == pytest.approx(d1_prime(ds, cfg), abs=1e-12)


class TestDecompose:
    def test_arithmetic_example(self):
        d = decompose(0.1, 0.2, 0.35, 0.5, 0.0, 0.0, 0.0)
        assert (d.e0, d.e1, d.e2, d.e3) == pytest.approx((0.1, 0.1, 0.15, 0.15))

    def test_zero_case(self):
        d = decompose(0, 0, 0, 0, 0, 0, 0)
        assert d.e0 == d.e1 == d.e2 == d.e3 == 0.0
        assert d.negative_component_flags == ()

    def test_negative_component_flagged(self):
        d = decompose(0.05, 0.03, 0.2, 0.6, 0, 0, 0)
        assert d.e1 == pytest.approx(-0.02)
        assert "e1" in d.negative_component_flags

    def test_identities_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            e = np.sort(rng.uniform(0, 1, size=4))
            dvals = rng.uniform(-0.3, 0.8, size=3)
            diag = decompose(e[0], e[1], e[2], e[3], dvals[0], dvals[1], dvals[2])
            assert diag.e0 + diag.e1 + diag.e2 + diag.e3 == diag.e3_prime
            assert diag.d0 + diag.d1 + diag.d2 == diag.d2_prime

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            decompose(float("nan"), 0, 0, 0, 0, 0, 0)

    def test_rejects_out_of_range_error(self):
        with pytest.raises(ValueError, match="outside"):
            decompose(1.5, 0, 0, 0, 0, 0, 0)


class TestPearson:
    def test_affine_is_one(self):
        a = np.arange(10.0)
        assert pearson(a, 2 * a + 1) == 1.0

    def test_negation_is_minus_one(self):
        a = np.arange(10.0)
        assert pearson(a, -a) == -1.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=10)
        b = rng.normal(size=10)
        da, db = a - a.mean(), b - b.mean()
        direct = float(np.sum(da * db) / math.sqrt(np.sum(da * da) * np.sum(db * db)))
        assert pearson(a, b) == pytest.approx(direct, abs=1e-12)

    def test_constant_series_raises(self):
        with pytest.raises(ConstantSeriesError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_checks(self):
        with pytest.raises(ValueError):
            pearson([1.0], [2.0])


def _fig_success_dataset(seed=0):
    cells = {(d, y): (d, y - 0.5) for d in range(5) for y in range(2)}
    return build_dataset(cells, per_cell=120, std=0.08, seed=seed,
                         roles={3: ROLE_TEST, 4: ROLE_TEST})


class TestDiagnose:
    def test_success_geometry_small_components(self):
        ds = _fig_success_dataset()
        diag = diagnose(ds, y_rule_head())
        for v in (diag.e0, diag.e1, diag.e2, diag.e3):
            assert v <= 0.05

    def test_underfit_geometry_dominant_e0(self):
        cells = {(d, y): (d, 0) for d in range(5) for y in range(2)}
        ds = build_dataset(cells, per_cell=120, roles={3: ROLE_TEST, 4: ROLE_TEST})
        diag = diagnose(ds, y_rule_head())
        assert diag.e0 >= 0.4

    def test_deterministic(self):
        ds = _fig_success_dataset()
        d1 = diagnose(ds, y_rule_head())
        d2 = diagnose(ds, y_rule_head())
        assert d1 == d2

    def test_identities_and_flags_present(self):
        ds = random_dataset(8, n_train=3, n_test=2, dim=4, num_classes=3, per_cell=10)
        head = LinearProbe(np.random.default_rng(1).normal(size=(3, 4)), np.zeros(3))
        diag = diagnose(ds, head)
        assert diag.e0 + diag.e1 + diag.e2 + diag.e3 == diag.e3_prime
        assert diag.d0 + diag.d1 + diag.d2 == diag.d2_prime
        assert set(diag.probe_meta) == {"e1", "e2", "d0", "d1", "d2"}
        assert isinstance(all_probes_converged(diag), bool)

    def test_shuffle_within_cells_invariant(self):
        ds = _fig_success_dataset()
        rng = np.random.default_rng(3)
        order = np.arange(ds.num_samples)
        for dm in ds.domains:
            for split in (0, 1):
                idx = np.flatnonzero(ds.mask(domain_id=dm.id, split=split))
                order[idx] = rng.permutation(idx)
        shuffled = RepresentationDataset(ds.dim, ds.num_classes, ds.domains,
                                         ds.domain_ids[order], ds.splits[order],
                                         ds.labels[order], ds.z[order])
        a = diagnose(ds, y_rule_head())
        b = diagnose(shuffled, y_rule_head())
        for f in ("e0_prime", "e1_prime", "e2_prime", "e3_prime",
                  "d0_prime", "d1_prime", "d2_prime"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-8)

    def test_orthogonal_map_invariance(self):
        ds = _fig_success_dataset()
        theta = 0.7
        q = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        shift = np.array([0.3, -1.2])
        z2 = (ds.z.astype(np.float64) @ q.T + shift).astype(np.float32)
        ds2 = RepresentationDataset(ds.dim, ds.num_classes, ds.domains, ds.domain_ids,
                                    ds.splits, ds.labels, z2)
        head = y_rule_head()
        head2 = LinearProbe(head.weights @ q.T, head.bias - head.weights @ q.T @ shift)
        a = diagnose(ds, head)
        b = diagnose(ds2, head2)
        for f in ("e0_prime", "e1_prime", "e2_prime", "e3_prime",
                  "d0_prime", "d1_prime", "d2_prime"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-3)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_identities_property(self, seed):
        ds = random_dataset(seed, n_train=2, n_test=1, per_cell=6)
        head = LinearProbe(np.random.default_rng(seed).normal(size=(2, 3)), np.zeros(2))
        diag = diagnose(ds, head)
        assert diag.e0 + diag.e1 + diag.e2 + diag.e3 == diag.e3_prime
        assert diag.d0 + diag.d1 + diag.d2 == diag.d2_prime


def _random_family_provider(seed, extra_probes=24):
    def provider(num_outputs, z):
        rng = np.random.default_rng((seed, num_outputs))
        probes = [constant_probe(k, num_outputs, z.shape[1]) for k in range(num_outputs)]
        for _ in range(extra_probes):
            probes.append(LinearProbe(rng.normal(size=(num_outputs, z.shape[1])),
                                      rng.normal(size=num_outputs)))
        return FiniteProbeFamily(tuple(probes))

    return provider


class TestExactFamilyMode:
    def _balanced_dataset(self, seed):
        # equal class counts in every (domain, split) cell
        return random_dataset(seed, n_train=2, n_test=2, dim=2, num_classes=2, per_cell=8)

    @pytest.mark.parametrize("seed", range(8))
    def test_orderings_hold_exactly(self, seed):
        ds = self._balanced_dataset(seed)
        cfg = MetricConfig(oracle_family_provider=_random_family_provider(seed))
        e1 = e1_prime(ds, cfg)
        e2 = e2_prime(ds, cfg)
        assert e1 <= e2 + 1e-12
        d1 = d1_prime(ds, cfg)
        d2 = d2_prime(ds, cfg)
        assert d1 <= d2 + 1e-12

    @pytest.mark.parametrize("seed", range(6))
    def test_e2_le_e3_for_train_optimal_head(self, seed):
        from dgdx.metrics import _gather, _train_ids
        from dgdx.probe import exact_best_error
        from dgdx.core import SPLIT_HOLDOUT

        ds = self._balanced_dataset(seed)
        provider = _random_family_provider(seed)
        cfg = MetricConfig(oracle_family_provider=provider)
        z, ys, _, w = _gather(ds, sorted(_train_ids(ds)), SPLIT_HOLDOUT)
        family = provider(ds.num_classes, z)
        _, idx = exact_best_error(family, z, ys, weights=w)
        head = family.probes[idx]
        assert e2_prime(ds, cfg) <= e3_prime(ds, head, cfg) + 1e-12

    @pytest.mark.parametrize("seed", range(6))
    def test_d_metrics_nonnegative_with_constant_probes(self, seed):
        ds = self._balanced_dataset(seed)
        cfg = MetricConfig(oracle_family_provider=_random_family_provider(seed))
        assert d0_prime(ds, cfg) >= -1e-12
        assert d1_prime(ds, cfg) >= -1e-12
        assert d2_prime(ds, cfg) >= -1e-12


class TestCsvEmission:
    def test_header_and_row_align(self):
        diag = decompose(0.1, 0.2, 0.3, 0.4, 0.0, 0.1, 0.2)
        header = csv_header(("beta_or_epoch",))
        row = csv_row(diag, ("7",))
        assert len(header) == len(row)
        assert header[:5] == ["beta_or_epoch", "e0", "e1", "e2", "e3"]
        assert row[0] == "7"
