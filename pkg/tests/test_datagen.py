import numpy as np
import pytest

from gifair.core import ConfigError
from gifair.datagen import (LabelSkew, LogisticClusters, PopulationSpec, QuadraticCenters, dump_population,
                            generate_population, imbalance_population, load_split, population_federation)


def test_imbalance_25_10():
    spec = imbalance_population(PopulationSpec(group_sizes=(18, 17), examples=40), 25 / 35)
    assert spec.group_sizes == (25, 10)
    assert spec.examples == (100, 40)
    fed = population_federation(spec, 0)
    assert fed.p[fed.group_of == 0].sum() > 0.5


def test_imbalance_near_half_is_near_balanced():
    spec = imbalance_population(PopulationSpec(group_sizes=(10, 10), examples=40), 0.5 + 1e-9)
    assert spec.group_sizes == (10, 10)
    assert spec.examples == (41, 40)


@pytest.mark.parametrize("f", [0.5, 1.0, 0.3])
def test_imbalance_rejects_fraction(f):
    with pytest.raises(ConfigError):
        imbalance_population(PopulationSpec(group_sizes=(5, 5)), f)


def test_label_skew_five_of_ten():
    spec = PopulationSpec(group_sizes=(100,), examples=500,
                          generator=LabelSkew(classes_total=10, classes_per_client=5))
    for client in generate_population(spec, 0):
        labels = np.concatenate([client.data.split(s).y for s in ("train", "validation", "test")])
        assert len(labels) == 500
        assert len(np.unique(labels)) == 5


def test_three_group_sizes():
    fed = population_federation(PopulationSpec(group_sizes=(60, 100, 40), examples=10), 1)
    assert fed.K == 200 and fed.group_sizes.tolist() == [60, 100, 40]


def test_zero_heterogeneity_shares_one_center():
    spec = PopulationSpec(group_sizes=(3, 4), examples=20,
                          generator=QuadraticCenters(dim=3, center_mean=0.7, noise=(1.0, 2.0)),
                          heterogeneity=0.0)
    for client in generate_population(spec, 2):
        np.testing.assert_allclose(client.data.train.X.mean(axis=0), 0.7, atol=1e-13)


def test_generation_is_seeded():
    spec = PopulationSpec(group_sizes=(2, 2), examples=15, generator=LogisticClusters(num_classes=3))
    a = generate_population(spec, 5)
    b = generate_population(spec, 5)
    c = generate_population(spec, 6)
    assert all(np.array_equal(x.data.train.X, y.data.train.X) for x, y in zip(a, b))
    assert not np.array_equal(a[0].data.train.X, c[0].data.train.X)
    assert set(np.concatenate([x.data.train.y for x in a]).tolist()) <= {0, 1, 2}


def test_pk_from_training_counts():
    spec = PopulationSpec(group_sizes=(1, 1), examples=(10, 30))
    fed = population_federation(spec, 0)
    np.testing.assert_allclose(fed.p, [7 / 28, 21 / 28])


def test_dump_round_trip(tmp_path):
    spec = PopulationSpec(group_sizes=(1, 1), examples=12, generator=LogisticClusters())
    clients = generate_population(spec, 3)
    dump_population(tmp_path, clients)
    back = load_split(tmp_path / "client001_train.txt")
    assert np.array_equal(back.X, clients[1].data.train.X)
    assert np.array_equal(back.y, clients[1].data.train.y)


@pytest.mark.parametrize("spec", [
    PopulationSpec(group_sizes=(2, 0)),
    PopulationSpec(group_sizes=(2,), examples=2),
    PopulationSpec(group_sizes=(2, 2), examples=(10,)),
    PopulationSpec(group_sizes=(2, 2), generator=QuadraticCenters(noise=(1.0, 2.0, 3.0))),
    PopulationSpec(group_sizes=(2,), generator=LabelSkew(classes_total=3, classes_per_client=4)),
    PopulationSpec(group_sizes=(2,), heterogeneity=-1.0),
])
def test_invalid_specs(spec):
    with pytest.raises(ConfigError):
        spec.validate()
