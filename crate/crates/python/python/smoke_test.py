"""Smoke test for the dgm_py extension module."""

import math
import os
import sys
import tempfile

import dgm_py


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    points = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]
    p = dgm_py.edge_probabilities(points, 1.0)
    check(abs(p[0][1] - math.exp(-1.0)) < 1e-15, "edge probability of unit distance")
    edges = dgm_py.gumbel_top_k(points, 1.0, 2, seed=3)
    check(len(edges) == 8 and all(i != j for i, j, _ in edges), "two sampled neighbours, no self-edges")
    knn = dgm_py.knn_graph(points, 1)
    check(sorted((i, j) for i, j, _ in knn) == [(0, 1), (1, 0), (2, 0), (3, 2)], "nearest neighbour graph")
    check(dgm_py.homophily(4, knn, [0, 0, 1, 1]) == 0.75, "homophily of the neighbour graph")

    ds = dgm_py.synth_clusters(nodes=90, seed=1).with_split("transductive", seed=1)
    check(len(ds) == 90 and ds.class_count == 3, "synthetic clusters")

    config = dgm_py.Config()
    config.node_conv = "sgcn"
    config.set_neighbours(1)
    config.epochs = 20
    config.standardize = False
    run = dgm_py.train_model(config, ds)
    check(0.0 <= run.accuracy <= 1.0, f"training run accuracy {run.accuracy:.3f}")
    check(len(run.task_losses()) == 20, "history has one entry per epoch")
    check('"accuracy"' in run.report_json(), "report serialises")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        run.model.save(path, epoch=20)
        loaded = dgm_py.Model.load(path)
        same = loaded.predict(ds, repeats=4, seed=7) == run.model.predict(ds, repeats=4, seed=7)
        check(same, "checkpoint round trip predicts identically")
        csv = os.path.join(tmp, "data.csv")
        ds.save_csv(csv)
        check(dgm_py.Dataset.load_csv(csv).labels == ds.labels, "csv round trip")

    try:
        dgm_py.Config("epochs = -1")
    except ValueError:
        check(True, "bad configuration raises ValueError")
    else:
        check(False, "bad configuration raises ValueError")

    check(dgm_py.mean_iou([[0, 1]], [[0, 1]], [[0, 1]]) == 1.0, "perfect segmentation scores 1")
    check(all(ok for _, _, ok in dgm_py.gradcheck()), "gradient checks pass")
    check(all(ok for _, _, ok in dgm_py.sample_test(20000, 0)), "sampler checks pass")
    print("smoke test passed")


if __name__ == "__main__":
    main()
