import numpy as np
import pytest

from gridcaps import capsnet, ingest
from gridcaps import tensorcore as tc
from gridcaps.errors import ConfigError, TrainingDiverged
from gridcaps.geogrid import BoundingBox, build_grid_spec
from _oracles import check_grads

RNG = np.random.default_rng(77)


def toy_config(**kw):
    base = dict(
        grid_count=4,
        window=2,
        conv_filters=8,
        capsule_dim=4,
        conv_kernel=(1, 2),
        conv_strides=(1, 1),
        caps_kernel=(1, 1),
        caps_strides=(1, 1),
        fc_width=8,
        epochs=5,
        batch_size=4,
        seed=1,
    )
    base.update(kw)
    return capsnet.ModelConfig(**base)


# -------------------------------------------------------- dependent params

def test_derive_dependent_params_published_rows():
    assert capsnet.derive_dependent_params(80, 4, 16) == (20, 8, 16)
    assert capsnet.derive_dependent_params(32, 4, 100) == (8, 8, 100)
    assert capsnet.derive_dependent_params(4, 4, 1) == (1, 8, 1)


def test_derive_dependent_params_indivisible():
    with pytest.raises(ConfigError):
        capsnet.derive_dependent_params(6, 4, 16)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        toy_config(conv_filters=6).validate()
    with pytest.raises(ConfigError):
        toy_config(orientation="sideways").validate()
    with pytest.raises(ConfigError):
        toy_config(epochs=0).validate()
    with pytest.raises(ConfigError):
        toy_config(conv_kernel=(1, 9)).validate()  # wider than the window


def test_config_dict_round_trip():
    cfg = toy_config(advanced_capsules=7, orientation="time_by_grid")
    assert capsnet.ModelConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------------- routing

def routing_by_hand(votes, iterations):
    """Literal per-step evaluation of the agreement loop, loops only."""
    n, j, a = votes.shape
    logits = np.zeros((n, j))
    v = np.zeros((j, a))
    for _ in range(iterations):
        c = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        s = np.zeros((j, a))
        for jj in range(j):
            for ii in range(n):
                s[jj] += c[ii, jj] * votes[ii, jj]
        for jj in range(j):
            norm = np.sqrt((s[jj] ** 2).sum())
            v[jj] = (norm**2 / (1 + norm**2)) * s[jj] / norm if norm > 0 else 0.0
        for ii in range(n):
            for jj in range(j):
                logits[ii, jj] += votes[ii, jj] @ v[jj]
    return v


def test_route_single_capsule_is_squash():
    for iterations in (1, 2, 3, 7):
        vote = RNG.standard_normal((1, 1, 6))
        out, state = capsnet.route(vote, iterations)
        expected = tc.squash(tc.Tensor(vote[0, 0])).data
        np.testing.assert_array_equal(out.data[0], expected)
        for c in state.couplings:
            np.testing.assert_array_equal(c, np.ones((1, 1)))


def test_route_identical_votes_share_couplings():
    vote = RNG.standard_normal((1, 3, 5))
    votes = np.concatenate([vote, vote], axis=0)  # two identical basic capsules
    _, state = capsnet.route(votes, 3)
    for c in state.couplings:
        np.testing.assert_allclose(c[0], c[1], atol=1e-15)


def test_route_three_capsule_toy_matches_hand_execution():
    votes = RNG.standard_normal((3, 2, 4))
    out, _ = capsnet.route(votes, 3)
    np.testing.assert_allclose(out.data, routing_by_hand(votes, 3), atol=1e-12)


def test_route_coupling_rows_sum_to_one_every_iteration():
    votes = RNG.standard_normal((4, 10, 5, 8))
    _, state = capsnet.route(votes, 3)
    assert len(state.couplings) == 3
    for c in state.couplings:
        np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-12)
    for v in state.outputs:
        assert np.all(np.linalg.norm(v, axis=-1) < 1.0)


def test_route_one_iteration_couplings_uniform():
    votes = RNG.standard_normal((6, 5, 3))
    out, state = capsnet.route(votes, 1)
    np.testing.assert_array_equal(state.couplings[0], np.full((6, 5), 1.0 / 5))
    expected = tc.squash(tc.Tensor(votes.sum(axis=0) / 5.0), axis=-1).data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_route_rejects_zero_iterations():
    with pytest.raises(ValueError):
        capsnet.route(RNG.standard_normal((2, 2, 2)), 0)


# ------------------------------------------------------------------ shapes

def test_forward_shape_walk_large_history():
    # independent walk of the floor formula for the 16x19 layout:
    # conv (1,2)/(1,2): H1 = (16-1)//1+1 = 16, W1 = (19-2)//2+1 = 9
    # caps (1,8)/(1,1): H2 = 16, W2 = (9-8)//1+1 = 2 -> 32 positions x 20 ch
    cfg = capsnet.ModelConfig(
        grid_count=16, window=19, conv_filters=80, capsule_dim=4,
        conv_kernel=(1, 2), conv_strides=(1, 2),
        caps_kernel=(1, 8), caps_strides=(1, 1), fc_width=100,
    )
    shapes = capsnet.model_shapes(cfg)
    assert shapes["conv_out"] == (80, 16, 9)
    assert shapes["caps_out"] == (80, 16, 2)
    assert shapes["basic_capsules"] == 640
    assert shapes["capsule_dim"] == 4
    assert shapes["advanced"] == (16, 8)

    params = capsnet.init_params(cfg, tc.Rng(0))
    hist = capsnet.batch_histories(RNG.integers(0, 16, (2, 19)), 16)
    scores, advanced = capsnet.forward(params, cfg, hist)
    assert scores.data.shape == (2, 16)
    assert advanced.data.shape == (2, 16, 8)


def test_forward_shape_walk_wide_grid_layout():
    # time-major layout: kernel spans the whole grid axis, caps kernel spans
    # the whole window; advanced capsule count overrides the per-cell default
    cfg = capsnet.ModelConfig(
        grid_count=100, window=3, conv_filters=32, capsule_dim=4,
        conv_kernel=(1, 100), conv_strides=(1, 1),
        caps_kernel=(3, 1), caps_strides=(1, 1),
        advanced_capsules=32, fc_width=200, orientation="time_by_grid",
    )
    shapes = capsnet.model_shapes(cfg)
    assert shapes["input"] == (3, 100)
    assert shapes["conv_out"] == (32, 3, 1)
    assert shapes["caps_out"] == (32, 1, 1)
    assert shapes["basic_capsules"] == 8
    assert shapes["advanced"] == (32, 8)
    assert shapes["scores"] == 100

    params = capsnet.init_params(cfg, tc.Rng(0))
    hist = capsnet.batch_histories(RNG.integers(0, 100, (2, 3)), 100)
    scores, advanced = capsnet.forward(params, cfg, hist)
    assert scores.data.shape == (2, 100)
    assert advanced.data.shape == (2, 32, 8)


def test_forward_minimal_config_score_length():
    cfg = capsnet.ModelConfig(
        grid_count=2, window=1, conv_filters=4, capsule_dim=4,
        conv_kernel=(1, 1), caps_kernel=(1, 1), fc_width=3,
    )
    params = capsnet.init_params(cfg, tc.Rng(5))
    scores, _ = capsnet.forward(params, cfg, capsnet.batch_histories([[1]], 2))
    assert scores.data.shape == (1, 2)


def test_forward_zero_params_uniform_scores():
    cfg = toy_config()
    params = capsnet.init_params(cfg, tc.Rng(0))
    for _, t in params.named():
        t.data = np.zeros_like(t.data)
    hist = capsnet.batch_histories([[0, 3], [2, 1]], 4)
    scores, _ = capsnet.forward(params, cfg, hist)
    np.testing.assert_array_equal(scores.data, np.zeros((2, 4)))
    soft = tc.softmax(scores, axis=-1).data
    np.testing.assert_allclose(soft, 0.25, atol=1e-15)


def test_forward_frame_size_mismatch():
    cfg = toy_config()
    params = capsnet.init_params(cfg, tc.Rng(0))
    with pytest.raises(ConfigError):
        capsnet.forward(params, cfg, capsnet.batch_histories([[1, 1, 1]], 4))


# -------------------------------------------------------------------- loss

def test_loss_uniform_scores():
    val = capsnet.loss(tc.Tensor(np.zeros((1, 16))), [3]).data
    assert val == pytest.approx(np.log(16.0), abs=1e-12)


def test_loss_two_class_analytic():
    val = capsnet.loss(tc.Tensor(np.array([[1.0, 0.0]])), [0]).data
    assert val == pytest.approx(-np.log(np.e / (np.e + 1.0)), abs=1e-12)


def test_loss_large_margin_goes_to_zero():
    scores = np.zeros((1, 5))
    scores[0, 2] = 50.0
    assert capsnet.loss(tc.Tensor(scores), [2]).data < 1e-12


# ------------------------------------------------------- end-to-end grads

def test_full_model_gradient_check():
    cfg = toy_config()
    init = capsnet.init_params(cfg, tc.Rng(3))
    names = [n for n, _ in init.named()]
    hist = capsnet.batch_histories([[0, 1], [2, 3], [1, 1]], 4)
    labels = np.array([2, 0, 3])

    def fn(ts):
        p = capsnet.ModelParams(**dict(zip(names, ts)))
        scores, _ = capsnet.forward(p, cfg, hist, mode="infer")
        return capsnet.loss(scores, labels)

    # evaluate at a generic point: exactly-zero biases leave the unvisited
    # rows' capsules on the squash kink at 0, where central differences pick
    # up O(h) one-sided error against the (correct) limit gradient
    noise = np.random.default_rng(17)
    arrays = [
        t.data + noise.uniform(-0.05, 0.05, t.data.shape) for _, t in init.named()
    ]
    worst = check_grads(fn, arrays)
    assert worst < 1e-4


def test_permutation_consistency():
    # relabeling the cells while permuting everything that indexes them
    # (frame rows, the per-row vote transforms, output-layer rows, labels)
    # must not change the loss; kernels of grid extent 1 keep rows separate
    cfg = capsnet.ModelConfig(
        grid_count=6, window=3, conv_filters=4, capsule_dim=2,
        conv_kernel=(1, 2), caps_kernel=(1, 2), fc_width=5, seed=2,
    )
    params = capsnet.init_params(cfg, tc.Rng(8))
    cells = RNG.integers(0, 6, (5, 3))
    labels = RNG.integers(0, 6, 5)
    hist = capsnet.batch_histories(cells, 6)
    base = capsnet.loss(capsnet.forward(params, cfg, hist)[0], labels).data

    perm = RNG.permutation(6)
    hist_p = np.empty_like(hist)
    hist_p[:, perm, :] = hist
    # basic capsule i = (row * caps_out_width + w) * channels + c; here the
    # caps feature map is 6x1, so i = row * channels + c
    shapes = capsnet.model_shapes(cfg)
    assert shapes["caps_out"][1:] == (6, 1)
    ch = cfg.caps_channels
    votes_w = np.empty_like(params.votes_w.data)
    for row in range(6):
        votes_w[perm[row] * ch : perm[row] * ch + ch] = params.votes_w.data[
            row * ch : row * ch + ch
        ]
    out_w = np.empty_like(params.out_w.data)
    out_w[perm] = params.out_w.data
    out_b = np.empty_like(params.out_b.data)
    out_b[perm] = params.out_b.data
    params.votes_w.data = votes_w
    params.out_w.data, params.out_b.data = out_w, out_b
    relabeled = capsnet.loss(capsnet.forward(params, cfg, hist_p)[0], perm[labels]).data
    assert abs(base - relabeled) < 1e-9


# ----------------------------------------------------------------- predict

def test_predict_zero_params_tie_breaks_low():
    cfg = toy_config()
    params = capsnet.init_params(cfg, tc.Rng(0))
    for _, t in params.named():
        t.data = np.zeros_like(t.data)
    frame = ingest.TrajectoryFrame("v", "t", (1, 2), 3, 0)
    assert capsnet.predict(params, cfg, frame) == 0


def test_predict_invariant_to_output_bias_shift():
    cfg = toy_config()
    params = capsnet.init_params(cfg, tc.Rng(4))
    hist = capsnet.batch_histories(RNG.integers(0, 4, (6, 2)), 4)
    before = capsnet.predict_batch(params, cfg, hist)
    params.out_b.data = params.out_b.data + 3.7
    after = capsnet.predict_batch(params, cfg, hist)
    np.testing.assert_array_equal(before, after)


def fixed_split(frames, spec, window):
    fs = lambda fr: ingest.FrameSet(frames=fr, grid_spec=spec, window=window)
    n = len(frames)
    return ingest.DatasetSplit(
        train=fs(frames[: n - 2]), validation=fs(frames[n - 2 :]), test=fs(frames[-1:]),
        policy="fixed",
    )


def test_train_overfits_single_repeated_frame():
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    frames = [
        ingest.TrajectoryFrame("v", "t", (1, 2, 3), 2, 100 + k) for k in range(8)
    ]
    cfg = capsnet.ModelConfig(
        grid_count=4, window=3, conv_filters=8, capsule_dim=4,
        conv_kernel=(1, 2), caps_kernel=(1, 2), fc_width=8,
        epochs=40, patience=40, batch_size=8, learning_rate=0.01, seed=0,
    )
    params, report = capsnet.train(fixed_split(frames, spec, 3), cfg)
    assert capsnet.predict(params, cfg, frames[0]) == 2
    assert report.train_acc[-1] == 100.0


def test_train_single_epoch_single_batch_one_adam_step():
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    frames = [ingest.TrajectoryFrame("v", "t", (0, 1), (k + 2) % 4, k) for k in range(6)]
    cfg = toy_config(epochs=1, batch_size=16)
    with_steps = {}

    orig = capsnet.tc.adam_step

    def counting(params, grads, state):
        with_steps["n"] = with_steps.get("n", 0) + 1
        return orig(params, grads, state)

    capsnet.tc.adam_step, saved = counting, orig
    try:
        _, report = capsnet.train(fixed_split(frames, spec, 2), cfg)
    finally:
        capsnet.tc.adam_step = saved
    assert with_steps["n"] == 1
    assert report.epochs_ran() == 1


def test_train_patience_zero_stops_after_first_non_improving_epoch():
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    # constant trajectory: perfect from epoch 1, so epoch 2 cannot improve
    frames = [ingest.TrajectoryFrame("v", "t", (1, 1), 1, k) for k in range(12)]
    cfg = toy_config(epochs=30, patience=0, learning_rate=0.01)
    _, report = capsnet.train(fixed_split(frames, spec, 2), cfg)
    first_perfect = report.val_acc.index(100.0)
    assert report.epochs_ran() == first_perfect + 2  # one non-improving epoch, then stop


def test_train_deterministic_reports_and_checkpoints(tmp_path):
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 4, 4)
    trajs = ingest.synth_generate(spec, 4, 30, 0.8, seed=6)
    grids = [ingest.to_grid_trajectory(t, spec) for t in trajs]
    frameset = ingest.build_frameset(grids, spec, window=2)
    sp = ingest.split(frameset, {"kind": "by_fraction", "fraction": 0.7}, 0.3)
    cfg = toy_config(grid_count=16, epochs=3, dropout=0.2, seed=11)

    outputs = []
    for name in ("a.ckpt", "b.ckpt"):
        params, report = capsnet.train(sp, cfg)
        path = tmp_path / name
        capsnet.save_model(path, params, cfg, spec)
        outputs.append((report, path.read_bytes()))
    (r1, b1), (r2, b2) = outputs
    assert r1.train_loss == r2.train_loss
    assert r1.val_acc == r2.val_acc
    assert b1 == b2


def test_train_divergence_aborts(monkeypatch):
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    frames = [ingest.TrajectoryFrame("v", "t", (0, 1), 2, k) for k in range(6)]
    cfg = toy_config(epochs=3)

    real_init = capsnet.init_params

    def poisoned(config, rng):
        params = real_init(config, rng)
        params.fc_w.data[0, 0] = np.nan
        return params

    monkeypatch.setattr(capsnet, "init_params", poisoned)
    with pytest.raises(TrainingDiverged):
        capsnet.train(fixed_split(frames, spec, 2), cfg)


# ------------------------------------------------------------- checkpoint

def test_model_checkpoint_round_trip(tmp_path):
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    cfg = toy_config(advanced_capsules=3)
    params = capsnet.init_params(cfg, tc.Rng(9))
    path = tmp_path / "model.ckpt"
    capsnet.save_model(path, params, cfg, spec)
    loaded, cfg2, spec2 = capsnet.load_model(path)
    assert cfg2 == cfg and spec2 == spec
    for (n1, t1), (n2, t2) in zip(params.named(), loaded.named()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    # a trained-free prediction round-trips through the checkpoint
    hist = capsnet.batch_histories([[0, 1]], 4)
    np.testing.assert_array_equal(
        capsnet.predict_batch(params, cfg, hist), capsnet.predict_batch(loaded, cfg2, hist)
    )


def test_load_model_rejects_frameset_file(tmp_path):
    spec = build_grid_spec(BoundingBox(0, 4, 0, 4), 2, 2)
    frames = [ingest.TrajectoryFrame("v", "t", (0,), 1, 0)]
    fset = ingest.FrameSet(frames=frames, grid_spec=spec, window=1)
    path = tmp_path / "frames.gcf"
    ingest.save_frameset(fset, path)
    with pytest.raises(ConfigError):
        capsnet.load_model(path)
