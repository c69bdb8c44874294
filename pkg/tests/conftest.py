import numpy as np
import pytest

from dgdx.core import DomainMeta, RepresentationDataset, ROLE_TEST, ROLE_TRAIN


def random_dataset(seed, n_train=2, n_test=1, dim=3, num_classes=2, per_cell=8):
    """Small random dataset with every (domain, class, split) cell populated."""
    rng = np.random.default_rng(seed)
    domains = tuple(
        [DomainMeta(i, f"train{i}", ROLE_TRAIN) for i in range(n_train)]
        + [DomainMeta(n_train + i, f"test{i}", ROLE_TEST) for i in range(n_test)]
    )
    ids, splits, labels, zs = [], [], [], []
    for dm in domains:
        for y in range(num_classes):
            for i in range(per_cell):
                ids.append(dm.id)
                splits.append(0 if i < per_cell // 2 else 1)
                labels.append(y)
                zs.append(rng.normal(size=dim) + 2.0 * y + 0.5 * dm.id)
    return RepresentationDataset(
        dim, num_classes, domains, ids, splits, labels, np.asarray(zs, dtype=np.float32)
    )


@pytest.fixture
def small_dataset():
    return random_dataset(0)
