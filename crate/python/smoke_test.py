"""Smoke test for the msrl extension module.

Build and install first:

    pip install --no-build-isolation ./crates/py
"""

import math

import msrl


def check_helpers():
    assert "msrl" in msrl.variants() and "randsel-ag" in msrl.variants()
    assert math.isclose(msrl.triplet_margin(0.4, 0.38, 0.1), 0.08, abs_tol=1e-12)
    assert msrl.selection_cv([10.0, 30.0]) == (20.0, 50.0)
    assert math.isclose(msrl.balance_term([2, 2]), 2 * math.sqrt(2))
    assert msrl.oracle_relevance([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5

    s = msrl.ScheduleState()
    assert math.isclose(s.threshold("visual"), 0.55)
    for _ in range(8):
        s = s.update_gamma()
    assert s.gamma == 1.0
    try:
        msrl.ScheduleState(lambda1=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range lambda accepted")


def check_training():
    exp = msrl.Experiment.desk("msrl", seed=3, iterations=200)
    first = exp.metrics()[0]
    assert first["iteration"] == 0 and first["lambda1"] == 0.5

    exp.step(100)
    ckpt = exp.checkpoint()
    config = exp.config_json()
    metrics = exp.run()
    assert metrics[-1]["iteration"] == 200
    assert len(metrics[-1]["selected_per_group"]) == exp.n_groups

    resumed = msrl.Experiment.from_checkpoint(config, ckpt)
    assert resumed.iteration == 100
    resumed.run()
    assert resumed.metrics_csv() == exp.metrics_csv()
    print(exp.metrics_csv().splitlines()[-1])


if __name__ == "__main__":
    check_helpers()
    check_training()
    print("smoke test passed")
