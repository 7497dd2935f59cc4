import json
import tempfile

import fbsnn_py


def main():
    ids = fbsnn_py.experiment_ids()
    assert "tg2d" in ids and "chns-bubbles" in ids

    l1, l2, r, r_inv = fbsnn_py.diagonalize(5e-4, 0.1, 0.01, 0.1)
    assert abs(l1 + l2 - 0.1) < 1e-12
    assert abs(l1 * l2 - 5e-4 * 0.1**2 / 0.01) < 1e-12

    cfg = json.loads(fbsnn_py.experiment_config("tg2d", json.dumps({"iterations": 4})))
    assert cfg["id"] == "tg2d"

    with tempfile.TemporaryDirectory() as out:
        overrides = {"iterations": 4, "batch": 8, "test_points": 64, "eval_every": 0}
        report = json.loads(fbsnn_py.run("tg2d", json.dumps(overrides), seed=0, out=out))
        assert report["experiment"] == "tg2d"
        assert len(report["per_seed"]) == 1
        header, rows = fbsnn_py.fields(f"{out}/seed_0/checkpoint.json", 5, [0.0, 0.5])
        assert header[:3] == ["t", "x1", "x2"]
        assert len(rows) == 2 * 25

    try:
        fbsnn_py.experiment_config("no-such-experiment")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown experiment accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
