"""Desk-scale end-to-end experiments on a synthetic spurious-feature dataset.

Inputs concatenate a small class-signal block shared across domains with a
large per-(domain, class) color block, so the color shortcut dominates
plain risk minimization and fails on unseen domains while the signal block
supports domain-invariant solutions.  A two-layer dense ReLU extractor with
a linear head is trained by full-batch line-searched gradient descent under
one of four objectives; representations (the last hidden layer) are
exported per epoch in the standard dump format for diagnosis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DomainMeta,
    LinearProbe,
    ROLE_TEST,
    ROLE_TRAIN,
    ROLE_VALID,
    RepresentationDataset,
    SPLIT_FIT,
    SPLIT_HOLDOUT,
)
from .metrics import ConstantSeriesError, MetricConfig, diagnose, pearson

ALG_ERM = "erm"
ALG_CORAL = "coral"
ALG_COND_INVARIANCE = "cond-invariance"
ALG_GROUP_DRO = "group-dro"
ALGORITHMS = (ALG_ERM, ALG_CORAL, ALG_COND_INVARIANCE, ALG_GROUP_DRO)

BETA_GRID = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 15.0)

# scale of the shared class-signal block relative to the unit-Gaussian colors;
# kept below 1 so the color shortcut dominates plain risk minimization
SIGNAL_SCALE = 0.8

# internal scale of the conditional-invariance penalty, calibrated so the
# shipped beta grid spans its regimes (no effect, training-domain
# invariance, representation collapse) on the default dataset
PENALTY_SCALE = 30.0

PARAM_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")
FEATURE_KEYS = ("W1", "b1", "W2", "b2")


class DivergenceError(RuntimeError):
    """Training objective became non-finite."""


@dataclass(frozen=True)
class SyntheticColoredSpec:
    num_domains: int = 5
    num_classes: int = 3
    signal_dim: int = 10
    color_dim: int = 50
    samples_per_domain: int = 1200
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 3:
            raise ValueError("need at least 3 domains (train, valid, test)")
        if min(self.num_classes, self.signal_dim, self.color_dim) < 1:
            raise ValueError("dims and class count must be positive")
        if self.samples_per_domain < self.num_classes:
            raise ValueError("samples_per_domain must cover every class")

    @property
    def input_dim(self):
        return self.signal_dim + self.color_dim


@dataclass(frozen=True)
class RawDataset:
    """Raw inputs before feature extraction, with the per-domain 80/20 split."""

    x: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    splits: np.ndarray
    domains: tuple
    spec: SyntheticColoredSpec

    def mask(self, roles=None, split=None, domain_id=None):
        m = np.ones(self.x.shape[0], dtype=bool)
        if roles is not None:
            ids = [dm.id for dm in self.domains if dm.role in roles]
            m &= np.isin(self.domain_ids, ids)
        if split is not None:
            m &= self.splits == split
        if domain_id is not None:
            m &= self.domain_ids == domain_id
        return m

    def train_domain_ids(self):
        return [dm.id for dm in self.domains if dm.role == ROLE_TRAIN]


def make_dataset(spec):
    """Generate the synthetic multi-domain dataset.

    Each sample is ``concat(signal[class] + noise, color[domain, class] +
    noise)`` with the color vectors drawn once per (domain, class) from a
    unit Gaussian.  Classes are exactly balanced per domain and the 80/20
    fit/holdout split is stratified per (domain, class).
    """
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 11)))
    n_train = spec.num_domains - 2
    domains = tuple(
        [DomainMeta(j, f"train{j}", ROLE_TRAIN) for j in range(n_train)]
        + [DomainMeta(n_train, "valid0", ROLE_VALID), DomainMeta(n_train + 1, "test0", ROLE_TEST)]
    )
    signals = rng.normal(0.0, SIGNAL_SCALE, size=(spec.num_classes, spec.signal_dim))
    colors = rng.normal(0.0, 1.0, size=(spec.num_domains, spec.num_classes, spec.color_dim))
    per_class = spec.samples_per_domain // spec.num_classes
    n_fit = (per_class * 4) // 5

    xs, ys, ids, splits = [], [], [], []
    for dm in domains:
        for y in range(spec.num_classes):
            block = np.concatenate(
                [
                    signals[y] + rng.normal(0.0, spec.noise_std, size=(per_class, spec.signal_dim)),
                    colors[dm.id, y]
                    + rng.normal(0.0, spec.noise_std, size=(per_class, spec.color_dim)),
                ],
                axis=1,
            )
            xs.append(block)
            ys.append(np.full(per_class, y))
            ids.append(np.full(per_class, dm.id))
            splits.append(
                np.where(np.arange(per_class) < n_fit, SPLIT_FIT, SPLIT_HOLDOUT).astype(np.uint8)
            )
    return RawDataset(
        x=np.vstack(xs),
        labels=np.concatenate(ys),
        domain_ids=np.concatenate(ids),
        splits=np.concatenate(splits),
        domains=domains,
        spec=spec,
    )


# -- model ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = ALG_ERM
    beta: float = 0.0
    epochs: int = 10
    steps_per_epoch: int = 50
    learning_rate: float = 0.05
    weight_decay: float = 0.01
    hidden_width: int = 32
    seed: int = 0
    freeze_features: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; valid: {ALGORITHMS}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.algorithm == ALG_ERM and self.beta != 0:
            raise ValueError("erm takes beta = 0")
        if self.algorithm == ALG_GROUP_DRO and self.beta <= 0:
            raise ValueError("group-dro needs beta > 0 (softmax temperature)")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be positive")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")


# the shipped fixture for the qualitative training pattern: plain risk
# minimization saturates via the color shortcut, stays invariant across
# training domains, and fails on the held-out domain
CRITERION_FIXTURE_SPEC = SyntheticColoredSpec(seed=0)
CRITERION_FIXTURE_CONFIG = TrainConfig(
    algorithm=ALG_ERM,
    epochs=10,
    steps_per_epoch=500,
    learning_rate=0.2,
    weight_decay=0.01,
    hidden_width=12,
    seed=0,
)


@dataclass(frozen=True)
class TrainedModel:
    checkpoints: tuple  # one param dict per epoch
    config: TrainConfig
    objective_trace: tuple

    @property
    def final(self):
        return self.checkpoints[-1]

    def head_probe(self, checkpoint=None):
        params = self.checkpoints[checkpoint] if checkpoint is not None else self.final
        return head_probe(params)


def head_probe(params):
    """The model's linear head as a probe over the representation space."""
    return LinearProbe(params["W3"].T, params["b3"])


def pretrained_invariant_model(spec, hidden_width=12, seed=0):
    """A stand-in for an externally pretrained extractor to freeze.

    The first layer projects onto the class-signal block only (random
    nonnegative-friendly combinations with zero color weights), so its
    representations are class-conditionally domain-invariant by
    construction.  Used by the frozen-feature protocol, where training may
    then move only the head and the separability metrics become constant
    lower-bound references.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))
    h = hidden_width
    w1 = np.zeros((spec.input_dim, h))
    w1[: spec.signal_dim, :] = rng.normal(0.0, np.sqrt(2.0 / spec.signal_dim),
                                          size=(spec.signal_dim, h))
    params = {
        "W1": w1,
        "b1": np.full(h, 0.1),
        "W2": rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h)),
        "b2": np.full(h, 0.1),
        "W3": np.zeros((h, spec.num_classes)),
        "b3": np.zeros(spec.num_classes),
    }
    cfg = TrainConfig(hidden_width=h, seed=seed, freeze_features=True)
    return TrainedModel((params,), cfg, (float("nan"),))


def init_params(input_dim, hidden_width, num_classes, seed):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 12)))
    h = hidden_width

    def layer(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    return {
        "W1": layer(input_dim, h),
        "b1": np.zeros(h),
        "W2": layer(h, h),
        "b2": np.zeros(h),
        "W3": layer(h, num_classes),
        "b3": np.zeros(num_classes),
    }


def forward(params, x):
    pre1 = x @ params["W1"] + params["b1"]
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(pre2, 0.0)
    logits = h2 @ params["W3"] + params["b3"]
    return pre1, h1, pre2, h2, logits


def representations(params, x):
    return forward(params, x)[3]


def _softmax(logits):
    u = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def _coral_penalty_and_grad(h2, groups):
    """Mean over training-domain pairs of the squared mean difference plus the
    squared Frobenius covariance difference of representations (entry-wise
    means, so the scale is width independent)."""
    d = h2.shape[1]
    stats = []
    for idx in groups:
        hg = h2[idx]
        mu = hg.mean(axis=0)
        hc = hg - mu
        cov = hc.T @ hc / idx.size
        stats.append((idx, hg, mu, hc, cov))
    penalty = 0.0
    grad = np.zeros_like(h2)
    pairs = [(a, b) for a in range(len(groups)) for b in range(a + 1, len(groups))]
    for a, b in pairs:
        idx_a, _, mu_a, hc_a, cov_a = stats[a]
        idx_b, _, mu_b, hc_b, cov_b = stats[b]
        dmu = mu_a - mu_b
        dcov = cov_a - cov_b
        penalty += (dmu @ dmu) / d + (dcov * dcov).sum() / (d * d)
        grad[idx_a] += (2.0 / (d * idx_a.size)) * dmu
        grad[idx_b] -= (2.0 / (d * idx_b.size)) * dmu
        grad[idx_a] += (4.0 / (d * d * idx_a.size)) * hc_a @ dcov
        grad[idx_b] -= (4.0 / (d * d * idx_b.size)) * hc_b @ dcov
    n_pairs = max(len(pairs), 1)
    return penalty / n_pairs, grad / n_pairs


def _condinv_penalty_and_grad(h2, labels, domain_pos, n_groups, num_classes):
    """Per-class linear-kernel dependence between representations and one-hot
    domain codes: the total squared entries of the class-conditional cross
    covariance, averaged over classes."""
    penalty = 0.0
    grad = np.zeros_like(h2)
    onehot = np.eye(n_groups)[domain_pos]
    used = 0
    for y in range(num_classes):
        idx = np.flatnonzero(labels == y)
        if idx.size < 2:
            continue
        r = h2[idx]
        dy = onehot[idx]
        rc = r - r.mean(axis=0)
        dc = dy - dy.mean(axis=0)
        m = rc.T @ dc / idx.size  # (d, n_groups)
        penalty += (m * m).sum()
        grad[idx] += dc @ (2.0 * m.T) / idx.size
        used += 1
    used = max(used, 1)
    scale = PENALTY_SCALE / used
    return penalty * scale, grad * scale


def objective_and_grad(params, x, labels, domain_pos, n_groups, num_classes, cfg):
    """Full-batch objective and analytic gradients for the configured algorithm.

    The objective is the cross-entropy term (softmax-weighted across domains
    for the worst-case variant), plus ``beta`` times the algorithm's
    representation penalty, plus L2 weight decay on the weight matrices.
    """
    n = x.shape[0]
    pre1, h1, pre2, h2, logits = forward(params, x)
    probs = _softmax(logits)
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(n), labels]

    groups = [np.flatnonzero(domain_pos == g) for g in range(n_groups)]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    if cfg.algorithm == ALG_GROUP_DRO:
        group_losses = np.array([nll[idx].mean() for idx in groups])
        t = cfg.beta * group_losses
        tmax = t.max()
        lse = tmax + np.log(np.exp(t - tmax).sum())
        data_term = lse / cfg.beta
        q = np.exp(t - lse)
        scale = np.zeros(n)
        for g, idx in enumerate(groups):
            scale[idx] = q[g] / idx.size
        dlogits *= scale[:, None]
    else:
        data_term = nll.mean()
        dlogits /= n

    dh2_pen = np.zeros_like(h2)
    penalty = 0.0
    if cfg.algorithm == ALG_CORAL and cfg.beta > 0:
        penalty, dh2_pen = _coral_penalty_and_grad(h2, groups)
    elif cfg.algorithm == ALG_COND_INVARIANCE and cfg.beta > 0:
        penalty, dh2_pen = _condinv_penalty_and_grad(
            h2, labels, domain_pos, n_groups, num_classes
        )

    obj = data_term + cfg.beta * penalty
    wd = cfg.weight_decay
    for key in ("W1", "W2", "W3"):
        obj += 0.5 * wd * float((params[key] ** 2).sum())

    dh2 = dlogits @ params["W3"].T + cfg.beta * dh2_pen
    dpre2 = dh2 * (pre2 > 0)
    dh1 = dpre2 @ params["W2"].T
    dpre1 = dh1 * (pre1 > 0)
    grads = {
        "W3": h2.T @ dlogits + wd * params["W3"],
        "b3": dlogits.sum(axis=0),
        "W2": h1.T @ dpre2 + wd * params["W2"],
        "b2": dpre2.sum(axis=0),
        "W1": x.T @ dpre1 + wd * params["W1"],
        "b1": dpre1.sum(axis=0),
    }
    return obj, grads


def pack_params(params):
    return np.concatenate([params[k].ravel() for k in PARAM_KEYS])


def unpack_params(vec, like):
    out, pos = {}, 0
    for k in PARAM_KEYS:
        size = like[k].size
        out[k] = vec[pos : pos + size].reshape(like[k].shape).copy()
        pos += size
    return out


def _fit_batch(raw):
    """Training-domain fit samples with domain positions 0..n_train-1."""
    train_ids = raw.train_domain_ids()
    m = raw.mask(roles=(ROLE_TRAIN,), split=SPLIT_FIT)
    idx = np.flatnonzero(m)
    pos = np.searchsorted(np.asarray(train_ids), raw.domain_ids[idx])
    return raw.x[idx], raw.labels[idx], pos, len(train_ids)


def train(raw, cfg, init_model=None):
    """Full-batch line-searched gradient descent; one checkpoint per epoch.

    With ``freeze_features`` only the head moves (features stay at their
    initialization, or at ``init_model``'s final checkpoint when given, which
    is how a pretrained frozen extractor is expressed).  Deterministic per
    seed.  Raises DivergenceError, naming the epoch, if the objective stops
    being finite.
    """
    x, labels, pos, n_groups = _fit_batch(raw)
    if init_model is not None:
        params = {k: v.copy() for k, v in init_model.final.items()}
    else:
        params = init_params(raw.spec.input_dim, cfg.hidden_width, raw.spec.num_classes, cfg.seed)
    if params["W1"].shape[0] != raw.spec.input_dim:
        raise ValueError("model input width does not match the dataset")

    moving = [k for k in PARAM_KEYS if not (cfg.freeze_features and k in FEATURE_KEYS)]

    def value(p):
        return objective_and_grad(p, x, labels, pos, n_groups, raw.spec.num_classes, cfg)

    obj, grads = value(params)
    if not np.isfinite(obj):
        raise DivergenceError("objective non-finite at epoch 1 (before any update)")
    checkpoints, trace = [], []
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            gnorm2 = sum(float((grads[k] ** 2).sum()) for k in moving)
            if gnorm2 == 0.0:
                break
            step = cfg.learning_rate
            accepted = False
            for _ in range(40):
                cand = dict(params)
                for k in moving:
                    cand[k] = params[k] - step * grads[k]
                new_obj, new_grads = value(cand)
                if not np.isfinite(new_obj):
                    raise DivergenceError(f"objective non-finite at epoch {epoch + 1}")
                if new_obj <= obj - 1e-4 * step * gnorm2:
                    params, obj, grads = cand, new_obj, new_grads
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break  # no descent step at float resolution; plateau reached
        checkpoints.append({k: v.copy() for k, v in params.items()})
        trace.append(float(obj))
    return TrainedModel(tuple(checkpoints), cfg, tuple(trace))


def export_representations(params_or_model, raw):
    """Dump-format dataset of last-hidden-layer outputs for every sample."""
    params = params_or_model.final if isinstance(params_or_model, TrainedModel) else params_or_model
    reps = representations(params, raw.x)
    return RepresentationDataset(
        dim=reps.shape[1],
        num_classes=raw.spec.num_classes,
        domains=raw.domains,
        domain_ids=raw.domain_ids,
        splits=raw.splits,
        labels=raw.labels,
        z=reps.astype(np.float32),
    )


def model_error(params, raw, roles=(ROLE_TRAIN,), split=SPLIT_HOLDOUT):
    """Domain-equal 0-1 error of the full model on the selected samples."""
    errs = []
    for dm in raw.domains:
        if dm.role not in roles:
            continue
        m = raw.mask(split=split, domain_id=dm.id)
        logits = forward(params, raw.x[m])[4]
        errs.append(float((logits.argmax(axis=1) != raw.labels[m]).mean()))
    return float(np.mean(errs))


# -- sweeps and trajectories -----------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    beta: float
    diagnosis: object
    train_holdout_error: float


def sweep_beta(raw, algorithm, betas, base_cfg=None, metric_cfg=None):
    """One full training plus diagnosis per regularization strength."""
    if len(betas) == 0:
        raise ValueError("beta grid must be nonempty")
    base_cfg = base_cfg or TrainConfig()
    metric_cfg = metric_cfg or MetricConfig(target_role=ROLE_VALID)
    rows = []
    for beta in betas:
        cfg = replace(base_cfg, algorithm=algorithm, beta=float(beta))
        model = train(raw, cfg)
        ds = export_representations(model, raw)
        diag = diagnose(ds, model.head_probe(), metric_cfg)
        rows.append(SweepRow(float(beta), diag, model_error(model.final, raw)))
    return rows


@dataclass(frozen=True)
class TrajectoryResult:
    diagnoses: tuple
    e3_series: tuple
    d1_series: tuple
    e3_d1_correlation: float = None  # None when undefined (constant series)


def trajectory(raw, cfg, metric_cfg=None):
    """Diagnose every per-epoch checkpoint and correlate test error with
    union distinguishability along the way."""
    if cfg.epochs < 2:
        raise ValueError("trajectory needs at least 2 epochs")
    metric_cfg = metric_cfg or MetricConfig(target_role=ROLE_VALID)
    model = train(raw, cfg)
    diags = []
    for i in range(len(model.checkpoints)):
        ds = export_representations(model.checkpoints[i], raw)
        diags.append(diagnose(ds, model.head_probe(i), metric_cfg))
    e3s = tuple(d.e3_prime for d in diags)
    d1s = tuple(d.d1_prime for d in diags)
    try:
        corr = pearson(e3s, d1s)
    except ConstantSeriesError:
        corr = None
    return TrajectoryResult(tuple(diags), e3s, d1s, corr)


# -- PCA ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class Pca2dResult:
    coords: np.ndarray  # (n, 2)
    explained: tuple  # fraction of variance along each of the two axes
    components: np.ndarray  # (2, dim)
    center: np.ndarray


def pca2d(ds):
    """Project all samples onto the top-2 principal axes of the pooled data.

    Deterministic sign convention: the largest-magnitude loading of each
    component is positive.
    """
    if ds.num_samples < 3:
        raise ValueError("pca2d needs at least 3 samples")
    if ds.dim < 2:
        raise ValueError("pca2d needs dim >= 2")
    z = ds.z.astype(np.float64)
    center = z.mean(axis=0)
    zc = z - center
    cov = zc.T @ zc / (z.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    total = float(evals.sum())
    if total <= 0:
        raise ValueError("data has zero variance")
    comps = []
    for i in range(2):
        v = evecs[:, i]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
    components = np.stack(comps)
    coords = zc @ components.T
    explained = (float(evals[0] / total), float(evals[1] / total))
    return Pca2dResult(coords, explained, components, center)
