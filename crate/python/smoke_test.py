"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python python/smoke_test.py
"""

import math
import tempfile

import intentlab as il


def main():
    assert abs(il.kl_ou_step([0.0], [1.0], [2.0], alpha=0.5, sigma_p=1.0) - 0.5) < 1e-15
    assert abs(il.kl_ou_step([1.0], [0.5], [0.0]) - 2.0) < 1e-15
    est, se = il.kl_monte_carlo([0.3], [0.4], [0.1], 0.5, n_samples=200_000, seed=1)
    exact = il.kl_ou_step([0.3], [0.4], [0.2], alpha=0.5, sigma_p=0.5)
    assert abs(est - exact) < 5 * se + 1e-3, (est, exact, se)

    assert il.beta_schedule(5, 100) == 0.0
    assert abs(il.beta_schedule(100, 100) - 0.5) < 1e-12
    assert abs(il.loss_win([0.0, 0.0], 0.0) - 2 * math.log(3)) < 1e-10
    assert abs(il.loss_lose([1.0], 1.0) - math.log(2)) < 1e-10
    assert il.wer([1, 2, 3], [1, 2, 4]) == 1 / 3
    assert il.partition([3.0, 1.0, 0.0, 3.0], 1.0) == ([0, 3], [2])
    assert il.partition([3.0, 2.0], 1.0) is None

    try:
        il.loss_win([], 0.0)
    except ValueError as e:
        assert "contract" in str(e)
    else:
        raise AssertionError("empty winner set accepted")

    with tempfile.TemporaryDirectory() as out:
        cfg = il.Config.from_toml(
            """
corpus_size = 60
[stage1]
steps = 20
[stage2]
steps = 10
[anchor]
steps = 20
[collect]
k = 4
[uapo]
steps = 5
batch_size = 2
[eval]
reward_rollouts = 2
probes = false
"""
        )
        cfg.seeds = [0]
        cfg.out_dir = out
        assert len(cfg.hash()) == 16
        assert il.Config.from_toml(cfg.to_toml()).hash() == cfg.hash()

        corpus = il.generate_corpus(cfg, 0)
        assert len(corpus) == 60 and {"style", "content", "context"} <= corpus[0].keys()

        rows = il.run_pipeline(cfg)
        assert [r["stage"] for r in rows] == ["stage2", "stage3"]
        ck = il.Checkpoint.load(f"{out}/seed-0/stage2.ckpt.json")
        assert ck.stage == "stage2" and ck.config_hash == cfg.hash()
        row = ck.evaluate(cfg)
        assert row == rows[0], (row, rows[0])
        accs = ck.probe(cfg)
        assert set(accs) == {"acc_e", "acc_h", "acc_z"}
    print("python smoke test passed")


if __name__ == "__main__":
    main()
