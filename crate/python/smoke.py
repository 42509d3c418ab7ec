"""Smoke test for the edgeai_py extension.

Build and install first:  pip install maturin && maturin build -m crates/py/Cargo.toml -o dist && pip install dist/edgeai_py-*.whl
"""
import json
import os
import tempfile

import numpy as np

import edgeai_py as ea

TINY = {
    "dataset": {"classes": 3, "train_per_class": 16, "test_per_class": 6, "size": 16},
    "teacher": {"arch": {"type": "plain", "convs": [[8, 2], [8, 1]], "batch_norm": True},
                "train": {"epochs": 2, "batch": 16, "lr": 0.05}},
    "student": {"arch": {"type": "plain", "convs": [[4, 2], [4, 1]], "batch_norm": True},
                "train": {"epochs": 1, "batch": 16, "lr": 0.05}},
    "dream": {"fraction": 0.5, "k": 2, "p": 2, "n_per_cluster": 2, "synth": {"steps": 3, "batch": 8}},
    "nonn": {"template": {"type": "plain", "convs": [[4, 2]], "batch_norm": True},
             "train": {"epochs": 1, "batch": 16, "lr": 0.05}},
    "seed": 4,
}


def main():
    cfg = ea.Config(json.dumps(TINY))
    assert len(cfg.hash()) == 16
    try:
        ea.Config('{"bogus": 1}')
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    train, test = ea.datasets(cfg)
    imgs = np.asarray(train.pixels(), dtype=np.float32).reshape(train.shape)
    assert imgs.shape == (48, 3, 16, 16) and 0.0 <= imgs.min() and imgs.max() <= 1.0
    assert sorted(set(train.labels)) == [0, 1, 2]

    teacher, history = ea.train_teacher(cfg, train, test)
    assert history.startswith("epoch,split,loss,accuracy")
    loss, acc = teacher.evaluate(test)
    preds = teacher.predict(test.pixels(), len(test))
    assert len(preds) == len(test) and all(0 <= p < 3 for p in preds)
    print(f"teacher params={teacher.num_params()} flops={teacher.flops()} acc={acc:.3f}")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "teacher.edpm")
        teacher.save(path)
        assert ea.Model.load(path).fingerprint() == teacher.fingerprint()
        dpath = os.path.join(d, "train.edai")
        train.save(dpath)
        assert ea.Dataset.load(dpath).labels == train.labels

    student = ea.distill(cfg, teacher, train)
    print(f"student acc={student.evaluate(test)[1]:.3f}")

    meta = ea.extract_metadata(cfg, teacher, train)
    assert len(json.loads(meta)["clusters"]) == 2 * 3
    syn = ea.dream(cfg, teacher, meta)
    assert len(syn) == 2 * 2 * 3

    graph, raw, balanced = ea.partition(cfg, teacher, train)
    nonn = ea.nonn(cfg, teacher, balanced, train, test)
    assert nonn.isolated() and len(nonn.widths()) == 2
    print(f"nonn widths={nonn.widths()} acc={nonn.evaluate(test)[1]:.3f}")

    rn = json.loads(ea.simulate(cfg, nonn=nonn))
    rs = json.loads(ea.simulate(cfg, plan="split", devices=2))
    assert rn["internal_traffic_bytes"] == 0 and rs["internal_traffic_bytes"] > 0
    counts = ea.table1_counts()
    assert all(line.endswith(",true") for line in counts.strip().splitlines()[1:])
    print("smoke ok")


if __name__ == "__main__":
    main()
