"""Smoke test for the pdarec extension module."""

import math
import os
import tempfile

import pdarec


def main():
    assert pdarec.elu_prime(0.0) == 1.0
    assert abs(pdarec.jensen_shannon([1.0, 0.0], [0.0, 1.0]) - math.log(2)) < 1e-12

    data = pdarec.simulate(seed=3, users=120, items=60, stages=5,
                           events_per_stage=1500, drift=2.0)
    assert len(data) == 5 * 1500
    split = pdarec.Split.prepare(data, stages=5, valid_frac=0.5, seed=3)
    summary = split.summary()
    assert len(summary["stages"]) == 4

    model, recall, epoch = pdarec.train(split, "pda", seed=3, gamma=0.1,
                                        learning_rate=0.01, embedding_dim=16,
                                        max_epochs=10, patience=3)
    assert 0.0 <= recall <= 1.0 and epoch >= 1
    report = pdarec.evaluate(split, "pda", model=model)
    assert set(report["metrics"]["metrics"]) == {"20", "50"}
    baseline = pdarec.evaluate(split, "mostpop")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = pdarec.Model.load(path)
        assert again.score(0, 0) == model.score(0, 0)

    print("pda recall@20", report["metrics"]["metrics"]["20"]["recall"],
          "mostpop recall@20", baseline["metrics"]["metrics"]["20"]["recall"])
    print("smoke test ok")


if __name__ == "__main__":
    main()
