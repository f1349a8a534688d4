"""Smoke tests for the _metafew python module."""

import math

import numpy as np

import _metafew as mf


def test_schedules():
    assert mf.switch_lambda(0, 51, 550) == 0.0
    assert mf.switch_lambda(550, 51, 550) == 1.0
    assert abs(mf.switch_lambda((51 + 550) / 2, 51, 550) - 0.5) < 1e-12
    assert abs(mf.lr_schedule(50, [51, 550], 0.01) - 0.01) < 1e-15
    assert abs(mf.lr_schedule(51, [51, 550], 0.01) - 0.003) < 1e-15
    assert abs(mf.lr_schedule(600, [51, 550], 0.01) - 0.0009) < 1e-15


def test_cross_entropy():
    z = np.zeros((4, 5), dtype=np.float32)
    loss = mf.softmax_xent(z, [0, 1, 2, 3])
    assert abs(loss - math.log(5.0)) < 1e-6
    g = mf.softmax_xent_grad(np.zeros((1, 5), dtype=np.float32), [2])
    want = np.full(5, 0.2, dtype=np.float32)
    want[2] = -0.8
    assert np.allclose(g[0], want, atol=1e-6)


def test_adam():
    p = np.array([5.0], dtype=np.float32)
    m = np.zeros(1, dtype=np.float32)
    v = np.zeros(1, dtype=np.float32)
    t = 0
    for _ in range(500):
        g = 2.0 * p
        p, m, v, t = mf.adam_step(p, g, m, v, t, lr=0.05)
    assert abs(float(p[0])) < 1e-2
    # zero gradient on a fresh state is a no-op
    p2, _, _, _ = mf.adam_step(
        np.array([1.5], dtype=np.float32),
        np.zeros(1, dtype=np.float32),
        np.zeros(1, dtype=np.float32),
        np.zeros(1, dtype=np.float32),
        0,
    )
    assert float(p2[0]) == 1.5


def test_episodes():
    ep = mf.gaussian2d_episode(0, n_per_cluster=6, q_per_class=5, seed=3)
    assert ep["support_x"].shape == (12, 2)
    assert ep["query_x"].shape == (10, 2)
    assert sorted(set(ep["support_y"].tolist())) == [0, 1]
    # tasks 0 and 1 swap labels over the same clusters
    a = mf.gaussian2d_episode(0, seed=1)
    b = mf.gaussian2d_episode(1, seed=1)
    assert a["support_x"].shape == b["support_x"].shape

    img = mf.glyph_image(3, sample_seed=7)
    assert img.shape == (1, 28, 28)
    assert img.min() >= 0.0 and img.max() <= 1.0
    again = mf.glyph_image(3, sample_seed=7)
    assert np.array_equal(img, again)


def test_session_toy_training():
    s = mf.Session(preset="toy2d-hypermaml", epochs=40, episodes_per_epoch=16,
                   milestone1=5, milestone2=20, seed=0, out_dir="pysmoke_run")
    log = s.train(40)
    assert len(log) == 40
    assert log[0]["lambda"] == 0.0
    assert log[-1]["lambda"] == 1.0
    first, last = log[0]["train_loss"], log[-1]["train_loss"]
    assert last < first  # training reduces the loss on the toy
    res = s.evaluate(episodes=20, split="test")
    assert 0.0 <= res["accuracy_mean"] <= 1.0
    assert res["accuracy_mean"] > 0.6  # far above the 0.5 chance level

    probs = s.adapt_predict(0, "test")
    assert probs.shape[1] == 2
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    s.save("pysmoke_run/session.ckpt")
    s.load("pysmoke_run/session.ckpt")


def test_presets_listed():
    names = mf.presets()
    assert "toy2d-hypermaml" in names
    assert "glyphs-5w1s" in names


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok {t.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
