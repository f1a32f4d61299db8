"""Quick end-to-end check of the semfed_py extension.

    cd crates/py && pip install -e . --no-build-isolation
    python python/smoke_test.py
"""

import json
import math
import pathlib
import tempfile

import semfed_py as sf


def check_data():
    x, y = sf.generate(400, 4, positive_rate=0.3, seed=3)
    assert len(x) == 400 and len(x[0]) == 4
    assert set(y) <= {0.0, 1.0}
    parts = sf.dirichlet_partition(y, num_clients=4, alpha=0.5, seed=1)
    assert sorted(i for p in parts for i in p) == list(range(400))


def check_privacy():
    sigma = sf.noise_scale(1.0, 1e-5)
    assert abs(sigma - math.sqrt(2 * math.log(1.25e5))) < 1e-12
    clipped = sf.clip([3.0, 4.0], 1.0)
    assert abs(math.hypot(*clipped) - 1.0) < 1e-12
    noisy = sf.privatize([3.0, 4.0], 1.0, sigma, seed=5)
    assert noisy == sf.privatize([3.0, 4.0], 1.0, sigma, seed=5)
    try:
        sf.noise_scale(-1.0, 1e-5)
    except ValueError:
        pass
    else:
        raise AssertionError("negative epsilon accepted")


def check_constraints():
    reference = [0.5, -0.2, 0.1, 0.0]
    cs = sf.ConstraintSet.generate("logistic-regression", 3, reference, seed=2)
    score, bits = cs.validity("logistic-regression", 3, reference)
    assert score == 1.0 and all(bits) and len(bits) == len(cs)
    again = sf.ConstraintSet.from_jsonl(cs.to_jsonl())
    assert again.to_jsonl() == cs.to_jsonl()


def check_run():
    config = {
        "model": {"kind": "logistic-regression", "input_dim": 4},
        "data": {"num_samples": 400, "positive_rate": 0.3},
        "partition": {"num_clients": 3, "alpha": 1.0},
        "training": {
            "rounds": 5,
            "local_epochs": 2,
            "client_sample_rate": 1.0,
            "learning_rate": 0.1,
            "batch_size": 16,
        },
        "variants": [{"kind": "scfa"}, {"kind": "fedavg"}],
        "seeds": [1],
    }
    out = sf.run_experiment(config, seed=1, variant="scfa")
    assert [r["round"] for r in out["records"]] == [1, 2, 3, 4, 5]
    assert len(out["final_params"]) == 5
    with tempfile.TemporaryDirectory() as tmp:
        results = sf.run_config(json.dumps(config), tmp)
        assert {r["variant"] for r in results} == {"scfa", "fedavg"}
        assert (pathlib.Path(tmp) / "rounds.csv").exists()


def check_analysis():
    series = [1.5 / math.sqrt(t) for t in range(1, 31)]
    fit = sf.fit_convergence_rate(series, [0.0] * 30)
    assert fit["r_squared"] > 0.999
    vf = sf.violation_fit([0.0, 0.1, 0.2, 0.3], [0.9, 0.85, 0.8, 0.75])
    assert abs(vf["delta_max"] - 0.5) < 1e-9
    assert sf.classify_zone(0.12) == ("danger", "tighten constraints")
    assert abs(sf.utility_loss(0.8, 1.0) - 20.0) < 1e-9


if __name__ == "__main__":
    for check in (check_data, check_privacy, check_constraints, check_run, check_analysis):
        check()
        print(f"ok  {check.__name__}")
    print("semfed_py smoke test passed")
