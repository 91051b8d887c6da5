import numpy as np
import pytest

from sibrar.data import InteractionMatrix, ModalityTable, SyntheticSpec, make_split, synth_generate

SMALL_DIMS = dict(proj_dim=8, d_emb=8, branch_hidden=[16], counterpart_hidden=[16])


def random_matrix(gen, n_users, n_items, density=0.3, min_per_user=1):
    dense = (gen.random((n_users, n_items)) < density).astype(float)
    for u in range(n_users):
        if dense[u].sum() < min_per_user:
            dense[u, gen.choice(n_items, size=min_per_user, replace=False)] = 1.0
    return InteractionMatrix.from_dense(dense)


def vector_table(gen, name, side, n, dim, p_avail=1.0):
    avail = gen.random(n) < p_avail
    avail[0] = True
    feats = gen.normal(size=(n, dim)) * avail[:, None]
    return ModalityTable(name, side, "vector", feats, avail)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_small():
    spec = SyntheticSpec(60, 40, 4, 8, (("content", 6, 0.1), ("noisy", 6, 3.0)), seed=3)
    R, tables = synth_generate(spec)
    return R, tables


@pytest.fixture(scope="session")
def warm_bundle(synthetic_small):
    R, tables = synthetic_small
    return make_split(R, "warm", seed=0), tables


@pytest.fixture(scope="session")
def item_cold_bundle(synthetic_small):
    R, tables = synthetic_small
    return make_split(R, "item_cold", seed=0), tables


@pytest.fixture
def tiny_csv(tmp_path):
    path = tmp_path / "interactions.csv"
    rows = ["user_id,item_id"]
    for u in range(12):
        for i in range(u % 4, u % 4 + 5):
            rows.append(f"u{u},i{i}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path
