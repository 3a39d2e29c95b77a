import os
import pathlib

import numpy as np
import pytest

import spx

MNIST = pathlib.Path(os.environ.get("SPX_MNIST_DIR", pathlib.Path(__file__).parents[2] / "data" / "mnist"))


def banded(count, seed):
    rng = np.random.default_rng(seed)
    images = np.empty((count, 12, 12))
    labels = np.arange(count) % 2
    for i, label in enumerate(labels):
        img = rng.uniform(0.0, 0.1, size=(12, 12))
        if label == 0:
            img[:6] += 0.8
        else:
            img[6:] += 0.8
        images[i] = img
    return images, labels.tolist()


def test_slic_partitions_the_image():
    img = np.zeros((28, 28))
    img[:, 14:] = 1.0
    labels = spx.slic(img, n_superpixels=8, compactness=1.0)
    assert labels.shape == (28, 28)
    assert set(np.unique(labels)) == set(range(labels.max() + 1))
    for seg in np.unique(labels):
        assert len(np.unique(img[labels == seg])) == 1


def test_radius_graph_features_and_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(28, 28))
    g = spx.radius_graph(img, label=3, n_superpixels=20, max_neighbors=4)
    assert g.label == 3
    assert g.features.shape == (g.num_nodes, 3)
    assert np.all((g.features[:, 1:] >= 0) & (g.features[:, 1:] <= 1))
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    spx.save_graphs([g, g], tmp_path / "g.spxg")
    back = spx.load_graphs(tmp_path / "g.spxg")
    assert back[0] == g and len(back) == 2


@pytest.mark.skipif(not MNIST.exists(), reason="MNIST sample not present")
def test_load_idx():
    images, labels = spx.load_idx(MNIST / "images-idx3-ubyte", MNIST / "labels-idx1-ubyte")
    assert images.shape[1:] == (28, 28)
    assert images.shape[0] == labels.shape[0]
    assert 0.0 <= images.min() and images.max() <= 1.0


def test_train_evaluate_predict(tmp_path):
    images, labels = banded(60, 1)
    graphs = [spx.radius_graph(img, label=lab, n_superpixels=9, max_neighbors=3) for img, lab in zip(images, labels)]
    model, report = spx.train(images, labels, graphs, model="coupled", epochs=3, batch_size=16,
                              learning_rate=1e-2, patience=0, seed=2)
    assert report[0]["type"] == "config" and report[-1]["type"] == "summary"
    assert model.kind == "coupled" and model.alpha == 0.75

    result = model.evaluate(images, labels, graphs)
    assert set(result) >= {"accuracy", "cnn_accuracy", "gnn_accuracy", "hybrid_accuracy"}
    preds = model.predict(images, graphs)
    assert len(preds) == 60
    assert result["accuracy"] == pytest.approx(100.0 * np.mean(np.array(preds) == np.array(labels)))

    model.save(tmp_path / "m.spxc")
    again = spx.Model.load(tmp_path / "m.spxc")
    assert again.evaluate(images, labels, graphs) == result

    # Same seed, same model.
    other, _ = spx.train(images, labels, graphs, model="coupled", epochs=3, batch_size=16,
                         learning_rate=1e-2, patience=0, seed=2)
    assert other.predict(images, graphs) == preds


def test_errors_surface_as_spx_error(tmp_path):
    with pytest.raises(spx.Error):
        spx.Model.load(tmp_path / "missing.spxc")
    with pytest.raises(spx.Error):
        spx.slic(np.zeros((4, 4)), n_superpixels=17)
