import numpy as np
import pytest

from dgdx import expt
from dgdx.core import (
    FORMAT_BINARY,
    ROLE_TRAIN,
    ROLE_VALID,
    SPLIT_FIT,
    SPLIT_HOLDOUT,
    load_dump,
    save_dump,
    validate_no_label_shift,
)
from dgdx.metrics import MetricConfig, diagnose


SMALL_SPEC = expt.SyntheticColoredSpec(
    num_domains=4, num_classes=3, signal_dim=4, color_dim=6, samples_per_domain=90,
    noise_std=1.0, seed=3,
)


def small_cfg(**kw):
    base = dict(algorithm="erm", epochs=3, steps_per_epoch=5, learning_rate=0.1,
                hidden_width=8, seed=0)
    base.update(kw)
    return expt.TrainConfig(**base)


class TestMakeDataset:
    def test_zero_noise_shares_colors_within_cell(self):
        spec = expt.SyntheticColoredSpec(num_domains=3, num_classes=2, signal_dim=2,
                                         color_dim=5, samples_per_domain=20,
                                         noise_std=0.0, seed=1)
        raw = expt.make_dataset(spec)
        for d in range(3):
            for y in range(2):
                m = (raw.domain_ids == d) & (raw.labels == y)
                block = raw.x[m][:, 2:]
                assert np.allclose(block, block[0])

    def test_balanced_classes_pass_label_shift_at_zero_tol(self):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.init_params(SMALL_SPEC.input_dim, 6, 3, 0)
        ds = expt.export_representations(model, raw)
        assert validate_no_label_shift(ds, tol=0.0).passed

    def test_different_seeds_different_colors(self):
        a = expt.make_dataset(expt.SyntheticColoredSpec(seed=0, samples_per_domain=30))
        b = expt.make_dataset(expt.SyntheticColoredSpec(seed=1, samples_per_domain=30))
        assert not np.allclose(a.x[:5], b.x[:5])

    def test_split_is_80_20_per_cell(self):
        raw = expt.make_dataset(SMALL_SPEC)
        for d in range(4):
            for y in range(3):
                m = (raw.domain_ids == d) & (raw.labels == y)
                fit = (raw.splits[m] == SPLIT_FIT).sum()
                hold = (raw.splits[m] == SPLIT_HOLDOUT).sum()
                assert fit == 24 and hold == 6


class TestObjectives:
    @pytest.mark.parametrize(
        "alg,beta",
        [("erm", 0.0), ("coral", 1.7), ("cond-invariance", 0.9), ("group-dro", 2.5)],
    )
    def test_gradients_match_finite_differences(self, alg, beta):
        raw = expt.make_dataset(SMALL_SPEC)
        x, labels, pos, n_groups = expt._fit_batch(raw)
        cfg = small_cfg(algorithm=alg, beta=beta)
        rng = np.random.default_rng(17)
        params = expt.init_params(SMALL_SPEC.input_dim, cfg.hidden_width, 3, seed=1)
        for _ in range(60):
            p = {k: v + rng.normal(0, 0.25, v.shape) for k, v in params.items()}
            pre1, _, pre2, _, _ = expt.forward(p, x)
            if min(np.abs(pre1).min(), np.abs(pre2).min()) > 1e-4:
                break
        vec = expt.pack_params(p)

        def f(v):
            return expt.objective_and_grad(
                expt.unpack_params(v, p), x, labels, pos, n_groups, 3, cfg
            )

        _, grads = f(vec)
        g = expt.pack_params(grads)
        h = 1e-6
        idx = rng.choice(vec.size, size=60, replace=False)
        fd = np.zeros_like(idx, dtype=float)
        for k, i in enumerate(idx):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += h
            vm[i] -= h
            fd[k] = (f(vp)[0] - f(vm)[0]) / (2 * h)
        rel = np.linalg.norm(fd - g[idx]) / max(np.linalg.norm(fd), np.linalg.norm(g[idx]))
        assert rel <= 1e-4

    def test_erm_requires_zero_beta(self):
        with pytest.raises(ValueError, match="beta"):
            expt.TrainConfig(algorithm="erm", beta=1.0)

    def test_group_dro_requires_positive_beta(self):
        with pytest.raises(ValueError, match="beta"):
            expt.TrainConfig(algorithm="group-dro", beta=0.0)


class TestTrain:
    def test_zero_learning_rate_keeps_parameters(self):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.train(raw, small_cfg(learning_rate=0.0))
        first, last = model.checkpoints[0], model.checkpoints[-1]
        for k in expt.PARAM_KEYS:
            assert np.array_equal(first[k], last[k])

    def test_checkpoint_count_equals_epochs(self):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.train(raw, small_cfg(epochs=4))
        assert len(model.checkpoints) == 4
        assert len(model.objective_trace) == 4

    def test_objective_non_increasing(self):
        raw = expt.make_dataset(SMALL_SPEC)
        for alg, beta in [("erm", 0.0), ("coral", 1.0), ("cond-invariance", 1.0),
                          ("group-dro", 2.0)]:
            model = expt.train(raw, small_cfg(algorithm=alg, beta=beta, epochs=5))
            trace = np.array(model.objective_trace)
            assert (np.diff(trace) <= 1e-12).all(), alg

    def test_divergence_raises_with_epoch(self):
        raw = expt.make_dataset(SMALL_SPEC)
        cfg = small_cfg(algorithm="cond-invariance", beta=1e300)
        with pytest.raises(expt.DivergenceError, match="epoch"):
            expt.train(raw, cfg)

    def test_deterministic(self):
        raw = expt.make_dataset(SMALL_SPEC)
        m1 = expt.train(raw, small_cfg())
        m2 = expt.train(raw, small_cfg())
        for k in expt.PARAM_KEYS:
            assert np.array_equal(m1.final[k], m2.final[k])

    def test_freeze_features_keeps_representations(self):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.train(raw, small_cfg(freeze_features=True, epochs=4))
        r0 = expt.representations(model.checkpoints[0], raw.x)
        for cp in model.checkpoints[1:]:
            assert np.array_equal(expt.representations(cp, raw.x), r0)

    def test_frozen_metrics_constant_across_checkpoints(self):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.train(raw, small_cfg(freeze_features=True, epochs=3))
        mc = MetricConfig(target_role=ROLE_VALID)
        diags = []
        for i in range(3):
            ds = expt.export_representations(model.checkpoints[i], raw)
            diags.append(diagnose(ds, model.head_probe(i), mc))
        for f in ("e1_prime", "e2_prime", "d0_prime", "d1_prime", "d2_prime"):
            vals = [getattr(d, f) for d in diags]
            assert max(vals) - min(vals) <= 1e-9, f


class TestExportRepresentations:
    def test_identity_network_reproduces_nonnegative_inputs(self):
        raw = expt.make_dataset(SMALL_SPEC)
        x = np.abs(raw.x)
        raw = expt.RawDataset(x, raw.labels, raw.domain_ids, raw.splits, raw.domains, raw.spec)
        p = SMALL_SPEC.input_dim
        params = {
            "W1": np.eye(p), "b1": np.zeros(p),
            "W2": np.eye(p), "b2": np.zeros(p),
            "W3": np.zeros((p, 3)), "b3": np.zeros(3),
        }
        ds = expt.export_representations(params, raw)
        assert np.allclose(ds.z, x.astype(np.float32))

    def test_round_trip_dump_preserves_diagnosis(self, tmp_path):
        raw = expt.make_dataset(SMALL_SPEC)
        model = expt.train(raw, small_cfg())
        ds = expt.export_representations(model, raw)
        path = tmp_path / "reps.bin"
        save_dump(ds, path, FORMAT_BINARY)
        ds2 = load_dump(path, FORMAT_BINARY)
        mc = MetricConfig(target_role=ROLE_VALID)
        a = diagnose(ds, model.head_probe(), mc)
        b = diagnose(ds2, model.head_probe(), mc)
        for f in ("e0_prime", "e1_prime", "e2_prime", "e3_prime",
                  "d0_prime", "d1_prime", "d2_prime"):
            assert abs(getattr(a, f) - getattr(b, f)) <= 1e-9


class TestSweepAndTrajectory:
    def test_single_beta_erm_sweep(self):
        raw = expt.make_dataset(SMALL_SPEC)
        rows = expt.sweep_beta(raw, "erm", [0.0], small_cfg(),
                               MetricConfig(target_role=ROLE_VALID))
        assert len(rows) == 1
        assert rows[0].beta == 0.0

    def test_empty_grid_rejected(self):
        raw = expt.make_dataset(SMALL_SPEC)
        with pytest.raises(ValueError, match="nonempty"):
            expt.sweep_beta(raw, "erm", [], small_cfg())

    def test_sweep_deterministic(self):
        raw = expt.make_dataset(SMALL_SPEC)
        mc = MetricConfig(target_role=ROLE_VALID)
        r1 = expt.sweep_beta(raw, "cond-invariance", [0.5, 2.0], small_cfg(), mc)
        r2 = expt.sweep_beta(raw, "cond-invariance", [0.5, 2.0], small_cfg(), mc)
        for a, b in zip(r1, r2):
            assert a.diagnosis == b.diagnosis

    def test_trajectory_zero_lr_identical_and_correlation_undefined(self):
        raw = expt.make_dataset(SMALL_SPEC)
        cfg = small_cfg(epochs=2, learning_rate=0.0)
        res = expt.trajectory(raw, cfg, MetricConfig(target_role=ROLE_VALID))
        assert len(res.diagnoses) == 2
        assert res.diagnoses[0] == res.diagnoses[1]
        assert res.e3_d1_correlation is None

    def test_trajectory_matches_recomputed_diagnoses(self, tmp_path):
        raw = expt.make_dataset(SMALL_SPEC)
        cfg = small_cfg(epochs=3)
        res = expt.trajectory(raw, cfg, MetricConfig(target_role=ROLE_VALID))
        model = expt.train(raw, cfg)
        for i, diag in enumerate(res.diagnoses):
            ds = expt.export_representations(model.checkpoints[i], raw)
            path = tmp_path / f"cp{i}.bin"
            save_dump(ds, path, FORMAT_BINARY)
            again = diagnose(load_dump(path, FORMAT_BINARY), model.head_probe(i),
                             MetricConfig(target_role=ROLE_VALID))
            assert abs(again.e3_prime - diag.e3_prime) <= 1e-9


class TestPca2d:
    def test_full_rank_2d_explains_everything(self):
        from conftest import random_dataset

        ds = random_dataset(2, dim=2)
        res = expt.pca2d(ds)
        assert res.explained[0] + res.explained[1] == pytest.approx(1.0, abs=1e-9)
        assert res.coords.shape == (ds.num_samples, 2)

    def test_constant_third_coordinate(self):
        from dgdx.core import RepresentationDataset
        from conftest import random_dataset

        ds2 = random_dataset(4, dim=2)
        z3 = np.concatenate([ds2.z, np.full((ds2.num_samples, 1), 7.0, dtype=np.float32)],
                            axis=1)
        ds3 = RepresentationDataset(3, ds2.num_classes, ds2.domains, ds2.domain_ids,
                                    ds2.splits, ds2.labels, z3)
        res = expt.pca2d(ds3)
        assert res.explained[0] + res.explained[1] == pytest.approx(1.0, abs=1e-9)
        # the projection is a rotation of the first two coordinates
        dist_orig = np.linalg.norm(ds2.z.astype(float) - ds2.z.astype(float).mean(0), axis=1)
        dist_proj = np.linalg.norm(res.coords, axis=1)
        assert np.allclose(dist_orig, dist_proj, atol=1e-5)

    def test_matches_eigendecomposition(self):
        from conftest import random_dataset

        ds = random_dataset(9, dim=10, per_cell=20)
        res = expt.pca2d(ds)
        cov = np.cov(ds.z.astype(np.float64).T)
        evals = np.sort(np.linalg.eigvalsh(cov))[::-1]
        total = evals.sum()
        assert res.explained[0] == pytest.approx(evals[0] / total, abs=1e-9)
        assert res.explained[1] == pytest.approx(evals[1] / total, abs=1e-9)

    def test_sign_convention_deterministic(self):
        from conftest import random_dataset

        ds = random_dataset(11, dim=4)
        a = expt.pca2d(ds)
        b = expt.pca2d(ds)
        assert np.array_equal(a.components, b.components)
        for i in range(2):
            v = a.components[i]
            assert v[np.argmax(np.abs(v))] > 0

    def test_zero_variance_rejected(self):
        from dgdx.core import DomainMeta, RepresentationDataset

        domains = (DomainMeta(0, "a", ROLE_TRAIN), DomainMeta(1, "b", ROLE_TRAIN))
        n = 8
        ds = RepresentationDataset(
            2, 2, domains,
            [0, 0, 0, 0, 1, 1, 1, 1],
            [0, 1, 0, 1, 0, 1, 0, 1],
            [0, 0, 1, 1, 0, 0, 1, 1],
            np.ones((n, 2), dtype=np.float32),
        )
        with pytest.raises(ValueError, match="variance"):
            expt.pca2d(ds)
