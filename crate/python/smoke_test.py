"""Smoke test for the povmap_py extension module.

Build and install first, e.g. `maturin build --release -m crates/py/Cargo.toml`
followed by `pip install target/wheels/povmap_py-*.whl`.
"""

import math
import tempfile

import povmap_py as pm


def main():
    b = pm.Bundle.synth(seed=3, n_clusters=200, n_places=60)
    assert b.country_code == "SYN"
    assert (b.n_clusters, b.n_places) == (200, 60)
    assert b.validate()["country_code"] == "SYN"
    bayes_mu, bayes_sigma = b.bayes_nrmse()
    assert 0.0 < bayes_mu < 1.0

    with tempfile.TemporaryDirectory() as d:
        b.write(d)
        loaded = pm.Bundle.load(d)
        assert loaded.fingerprint() == b.fingerprint()
        assert loaded.synth_record() is None

    stats = b.iwi_stats()
    assert len(stats) == 200
    assert all(0.0 <= s["mu"] <= 100.0 and s["sigma"] >= 0.0 for s in stats)

    plan = b.relocate("ruc")
    assert len(plan) == 200
    assert all(t is None or t[1] >= 0.0 for _, t in plan)

    x = b.cluster_features()
    assert x.shape == (200, 173), x.shape
    assert len(x.columns) == 173

    y = [(s["mu"], s["sigma"]) for s in stats]
    model = pm.WealthModel.fit(x, y, n_trees=40, max_depth=4, seed=1)
    pred = model.predict(x)
    assert len(pred) == 200
    m = pm.evaluate(y, pred)
    assert m["eps_mu"] < 1.0, m
    assert math.isclose(m["eps_mu"], pm.nrmse([t[0] for t in y], [p[0] for p in pred]))

    again = pm.WealthModel.from_json(model.to_json())
    assert again.predict(x) == pred
    assert again.fingerprint() == model.fingerprint()

    table = pm.intersection_table([s["settlement"] for s in stats], [t[0] for t in y], [p[0] for p in pred])
    assert len(table["cells"]) == 2

    card, final = pm.train(b, recency="ON", seed=2, n_candidates=3, n_folds=2, n_runs=1)
    assert len(card["runs"]) == 1
    assert final.columns == x.columns

    geo = final.infer_places(b)
    assert geo["type"] == "FeatureCollection"
    assert len(geo["features"]) == 60
    for f in geo["features"]:
        assert 0.0 <= f["properties"]["mu"] <= 100.0

    assert 0.0 <= pm.gini([1.0, 2.0, 3.0]) < 1.0
    print("povmap_py smoke test: ok (eps_mu %.3f, bayes %.3f)" % (card["mean_metrics"]["eps_mu"], bayes_mu))


if __name__ == "__main__":
    main()
