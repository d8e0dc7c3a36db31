import math

import numpy as np
import pytest
import torch

from lidarloc.encoder import desk_config, encode, init_weights
from lidarloc.errors import EmptyScanError, InvalidInputError, TrainingDivergenceError
from lidarloc.geometry import Pose, apply_pose, yaw_rotation
from lidarloc.synthetic import (
    SensorConfig,
    SyntheticScene,
    TrainSample,
    flight_poses,
    simulate_scan,
    synth_scene,
)
from lidarloc.training import (
    AdamState,
    adam_step,
    backward,
    fit_normalization,
    gt_scene_coords,
    l1_loss,
    read_loss_csv,
    sample_loss,
    train,
    write_loss_csv,
)

# one init block plus one stage block, no pooling so max() adds no kinks
TOY = desk_config(
    init_dim=4,
    init_heads=2,
    init_window=2,
    stage_dims=(4,),
    stage_heads=(2,),
    stage_windows=(2,),
    stage_blocks=(1,),
    pool_kernel=1,
    head_layers=1,
    head_width=6,
    geo_hidden=4,
    coord_scale=5.0,
)


def toy_sample(seed=0, n=30):
    rng = np.random.default_rng(seed)
    cloud = rng.uniform(-4, 4, size=(n, 3))
    return TrainSample(cloud, yaw_rotation(0.4 + seed, 1.5))


def test_gt_coords_and_l1_examples():
    pts = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(gt_scene_coords(pts, Pose.from_translation([0, 0, 2])), [[1, 0, 2]])
    assert l1_loss(np.array([[1.0, 1.0, 1.0]]), np.zeros((1, 3))) == 3.0
    assert l1_loss(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), np.zeros((2, 3))) == 1.5
    assert l1_loss(np.ones((4, 3)), np.ones((4, 3))) == 0.0
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    pose = yaw_rotation(math.pi / 2, 3.0)
    assert np.max(np.abs(gt_scene_coords(pts, pose) - apply_pose(pose, pts))) <= 1e-12
    assert np.array_equal(gt_scene_coords(pts, Pose.identity()), pts)
    t = l1_loss(torch.ones(2, 3, dtype=torch.float64), np.zeros((2, 3)))
    assert t.item() == 3.0
    with pytest.raises(InvalidInputError):
        l1_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_l1_gradient_of_linear_map_by_hand():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, 5))
    target = rng.normal(size=(12, 3))
    w = torch.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    l1_loss(torch.as_tensor(x) @ w, target).backward()
    # d/dW mean_i sum_c |x_i W - t_i|_c = X^T sign(XW - T) / n
    expected = x.T @ np.sign(x @ w.detach().numpy() - target) / len(x)
    assert np.allclose(w.grad.numpy(), expected, atol=1e-14)


def test_l1_subgradient_is_zero_at_the_kink():
    pred = torch.ones(3, 3, dtype=torch.float64, requires_grad=True)
    l1_loss(pred, np.ones((3, 3))).backward()
    assert torch.equal(pred.grad, torch.zeros(3, 3, dtype=torch.float64))


def test_backward_matches_central_differences():
    weights = init_weights(TOY, seed=3, dtype=torch.float64)
    sample = toy_sample()
    _, grads = backward(weights, sample)
    rng = np.random.default_rng(0)
    h = 1e-3
    checked = {}

    def residual_signs(wts):
        out = encode(sample.cloud, wts)
        res = out.predictions.detach().numpy() - gt_scene_coords(out.local_points, sample.gt_pose)
        return np.sign(res)

    for name in weights.names():
        t = weights[name]
        for flat in rng.choice(t.numel(), size=min(4, t.numel()), replace=False):
            plus, minus = weights.clone(), weights.clone()
            plus.tensors[name].view(-1)[flat] += h
            minus.tensors[name].view(-1)[flat] -= h
            # skip coordinates whose stencil crosses an |x| kink of the loss
            if not np.array_equal(residual_signs(plus), residual_signs(minus)):
                continue
            fd = (sample_loss(plus, sample).item() - sample_loss(minus, sample).item()) / (2 * h)
            ad = grads[name].view(-1)[flat].item()
            assert abs(fd - ad) <= 1e-4 * max(abs(fd), abs(ad)) + 1e-9, (name, flat, fd, ad)
            checked[name] = checked.get(name, 0) + 1
    # every weight tensor gets at least one kink-free coordinate
    assert set(checked) == set(weights.names())


def test_adam_zero_gradient_keeps_weights():
    weights = init_weights(TOY, seed=0, dtype=torch.float64)
    zeros = {k: torch.zeros_like(v) for k, v in weights.tensors.items()}
    new, state = adam_step(weights, zeros, AdamState())
    for k in weights.names():
        assert torch.equal(new[k], weights[k])
    assert state.step == 1
    # moments decay geometrically under zero gradient
    ones = {k: torch.ones_like(v) for k, v in weights.tensors.items()}
    state = AdamState()
    _, state = adam_step(weights, ones, state)
    m1, v1 = state.m["head.0.b"].clone(), state.v["head.0.b"].clone()
    _, state = adam_step(weights, zeros, state)
    assert torch.allclose(state.m["head.0.b"], 0.9 * m1, rtol=0, atol=1e-15)
    assert torch.allclose(state.v["head.0.b"], 0.999 * v1, rtol=0, atol=1e-15)


def test_adam_constant_gradient_moves_by_lr():
    weights = init_weights(TOY, seed=0, dtype=torch.float64)
    ones = {k: torch.full_like(v, 0.5) for k, v in weights.tensors.items()}
    state = AdamState(lr=0.01)
    cur = weights
    for _ in range(5):
        prev = cur
        cur, state = adam_step(cur, ones, state)
        delta = (prev["head.0.w"] - cur["head.0.w"]).numpy()
        # bias correction makes m_hat / sqrt(v_hat) exactly g / |g|
        assert np.allclose(delta, 0.01 * 0.5 / (0.5 + 1e-8), rtol=0, atol=1e-15)


def test_adam_matches_torch_optimizer():
    weights = init_weights(TOY, seed=1, dtype=torch.float64)
    ref = {k: v.clone().requires_grad_(True) for k, v in weights.tensors.items()}
    opt = torch.optim.Adam(ref.values(), lr=0.002, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(2)
    state = AdamState()
    cur = weights
    for _ in range(100):
        grads = {k: torch.as_tensor(rng.normal(size=tuple(v.shape))) for k, v in weights.tensors.items()}
        cur, state = adam_step(cur, grads, state)
        for k, p in ref.items():
            p.grad = grads[k].clone()
        opt.step()
    for k in weights.names():
        assert torch.allclose(cur[k], ref[k].detach(), rtol=0, atol=1e-12)


def test_adam_shape_mismatch():
    weights = init_weights(TOY, seed=0, dtype=torch.float64)
    grads = {k: torch.zeros_like(v) for k, v in weights.tensors.items()}
    grads["head.0.w"] = torch.zeros(1)
    with pytest.raises(InvalidInputError):
        adam_step(weights, grads, AdamState())


def test_fit_normalization_example():
    samples = [
        TrainSample(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), Pose.identity()),
        TrainSample(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), Pose.from_translation([0, 0, 1])),
    ]
    offset, scale = fit_normalization(samples)
    assert offset == (1.0, 0.0, 0.5)
    assert scale == 1.0


def test_train_overfits_one_sample():
    scene = synth_scene(3)
    sample = simulate_scan(scene, flight_poses(scene, 1, seed=1)[0], SensorConfig(azimuth_steps=128))
    offset, scale = fit_normalization([sample])
    cfg = desk_config(coord_offset=offset, coord_scale=scale)
    res = train(cfg, [sample], epochs=400, batch_size=1, seed=0)
    assert len(res.losses) == 400
    assert res.losses[-1] < 0.1 * res.losses[0]


def test_train_zero_lr_is_flat():
    start = init_weights(TOY, seed=0, dtype=torch.float64)
    res = train(start, [toy_sample(0), toy_sample(1)], epochs=4, batch_size=1, lr=0.0)
    assert max(res.losses) - min(res.losses) == 0.0
    for k in start.names():
        assert torch.equal(res.weights[k], start[k])


def test_train_single_batch_ignores_shuffling():
    data = [toy_sample(s) for s in range(3)]
    a = train(TOY, data, epochs=3, batch_size=3, seed=5, shuffle=True, dtype=torch.float64)
    b = train(TOY, data, epochs=3, batch_size=3, seed=5, shuffle=False, dtype=torch.float64)
    assert a.losses == b.losses
    for k in a.weights.names():
        assert torch.equal(a.weights[k], b.weights[k])


def test_train_is_deterministic():
    data = [toy_sample(s) for s in range(3)]
    a = train(TOY, data, epochs=2, batch_size=2, seed=1)
    b = train(TOY, data, epochs=2, batch_size=2, seed=1)
    assert a.losses == b.losses


def test_train_divergence_reports_location():
    data = [toy_sample(s) for s in range(2)]
    with pytest.raises(TrainingDivergenceError) as info:
        train(TOY, data, epochs=3, batch_size=1, lr=1e30)
    assert info.value.epoch == 0 and info.value.batch_index == 1


def test_train_rejects_empty_dataset():
    with pytest.raises(InvalidInputError):
        train(TOY, [], epochs=1)


def test_loss_csv_round_trip(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, [3.5, 1.25, 0.1])
    assert read_loss_csv(path) == [3.5, 1.25, 0.1]
    assert path.read_text().splitlines()[0] == "epoch,mean_loss"


def _empty_scene():
    return SyntheticScene(100.0, 0, np.zeros((0, 6)))


def test_nadir_ray_hits_ground_at_altitude():
    sensor = SensorConfig(channels=1, azimuth_steps=1, fov_deg=(-90.0, -90.0))
    scan = simulate_scan(_empty_scene(), Pose.from_translation([5.0, 5.0, 10.0]), sensor)
    assert len(scan.cloud) == 1
    assert abs(np.linalg.norm(scan.cloud[0]) - 10.0) <= 1e-12
    assert abs(scan.cloud[0, 2] + 10.0) <= 1e-12


def test_scan_hits_box_face():
    box = SyntheticScene(100.0, 0, np.array([[20.0, -5.0, 0.0, 30.0, 5.0, 30.0]]))
    sensor = SensorConfig(channels=1, azimuth_steps=1, fov_deg=(0.0, 0.0))
    scan = simulate_scan(box, Pose.from_translation([0.0, 0.0, 10.0]), sensor)
    assert np.allclose(scan.cloud, [[20.0, 0.0, 0.0]], atol=1e-12)


def test_scan_frame_and_surfaces():
    scene = synth_scene(4)
    poses = flight_poses(scene, 3, seed=2, yaw_mode="random")
    sensor = SensorConfig(channels=8, azimuth_steps=90)
    for pose in poses:
        scan = simulate_scan(scene, pose, sensor)
        assert np.all(np.linalg.norm(scan.cloud, axis=1) <= sensor.max_range + 1e-9)
        world = apply_pose(pose, scan.cloud)
        assert np.all(scene.on_surface(world, tol=1e-6))
        again = simulate_scan(scene, pose, sensor)
        assert np.array_equal(again.cloud, scan.cloud)


def test_scan_noise_is_seeded():
    scene = synth_scene(4)
    pose = flight_poses(scene, 1, seed=0)[0]
    sensor = SensorConfig(channels=4, azimuth_steps=32, range_noise=0.05)
    a = simulate_scan(scene, pose, sensor, seed=1)
    b = simulate_scan(scene, pose, sensor, seed=1)
    c = simulate_scan(scene, pose, sensor, seed=2)
    assert np.array_equal(a.cloud, b.cloud) and not np.array_equal(a.cloud, c.cloud)


def test_scan_errors():
    sensor = SensorConfig(channels=2, azimuth_steps=8, fov_deg=(10.0, 20.0))
    with pytest.raises(EmptyScanError):
        simulate_scan(_empty_scene(), Pose.from_translation([0, 0, 5]), sensor)
    with pytest.raises(InvalidInputError):
        simulate_scan(_empty_scene(), Pose.from_translation([0, 0, -1]))
    box = SyntheticScene(100.0, 0, np.array([[0.0, 0.0, 0.0, 10.0, 10.0, 10.0]]))
    with pytest.raises(InvalidInputError):
        simulate_scan(box, Pose.from_translation([5, 5, 5]))


def test_scene_without_buildings_is_plane_only():
    scene = synth_scene(0, building_count=0)
    assert scene.building_count == 0
    scan = simulate_scan(scene, Pose.from_translation([50.0, 50.0, 12.0]), SensorConfig(channels=4, azimuth_steps=16))
    assert np.allclose(apply_pose(scan.gt_pose, scan.cloud)[:, 2], 0.0, atol=1e-9)


def test_synth_scene_and_flight():
    for seed in range(20):
        s = synth_scene(seed, extent=100.0, building_count=20)
        assert np.all(s.boxes[:, :2] >= 0) and np.all(s.boxes[:, 3:5] <= 100.0)
    scene = synth_scene(7, extent=80.0, building_count=12)
    assert scene.building_count == 12
    assert np.array_equal(synth_scene(7, extent=80.0, building_count=12).boxes, scene.boxes)
    poses = flight_poses(scene, 10, seed=3)
    assert len(poses) == 10
    steps = [np.linalg.norm(b.translation - a.translation) for a, b in zip(poses, poses[1:])]
    assert all(s <= 3.0 + 1e-9 for s in steps)
    for p in poses:
        assert p.translation[2] == 12.0 and not scene.inside_building(p.translation)
        assert math.isclose(np.linalg.det(p.rotation), 1.0, abs_tol=1e-12)
