"""Acceptance gate: one test per headline property, at its stated tolerance.

Each test ends by printing a single line with the measured value against the
threshold it must clear, so a verbose run reads as a checklist. The
end-to-end test trains the reference scene three times (full model plus two
ablations) and is the only slow entry here.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from prosg import numerics as N
from prosg import rendering as R
from prosg import sampling as S
from prosg import scenegraph as SG
from prosg import training as TR
from prosg.dataio import SyntheticConfig, generate_synthetic, load_scene, psnr, split
from prosg.fields import EncodingConfig, frequency_mask
from prosg.numerics import tensor as T

TINY_FIELDS = {
    "background": {"hidden": 4, "z_dim": 2, "color_hidden": 4},
    "object": {"d_s": 3, "d_a": 3, "hidden": 4, "hidden_dim": 2, "blocks": 1,
               "enc_channels": (3, 4)},
    "farfield": {"height": 2, "width": 4},
}

REF_FIELDS = {
    "background": {"hidden": 48, "z_dim": 12, "color_hidden": 24},
    "object": {"d_s": 16, "d_a": 16, "hidden": 32, "hidden_dim": 16,
               "blocks": 2, "enc_channels": (3, 8, 16)},
}


def ref_render_config():
    return R.RenderConfig(
        sampling=S.SamplingConfig(n_planes=16, n_box=5, d_far=60.0),
        encoding=EncodingConfig(l_position=8, l_direction=2),
    )


def micro_config(**kw):
    defaults = dict(n_planes=8, n_box=3, d_near=1.0, d_far=20.0)
    defaults.update(kw)
    return R.RenderConfig(
        sampling=S.SamplingConfig(**defaults),
        encoding=EncodingConfig(l_position=2, l_direction=1),
    )


def box_scene(box_centers, seed=0, size=(2.0, 2.0, 2.0)):
    """One-frame graph with latent codes assigned to every box node."""
    frames = [SimpleNamespace(index=0, pose=SG.Pose.identity(),
                              intrinsics=np.array([[40.0, 0, 16], [0, 40.0, 12], [0, 0, 1]]))]
    tracks = [
        SG.ObjectTrack(f"box_{i}", "box", np.asarray(size, float),
                       {0: SG.Pose(np.eye(3), np.asarray(c, float))})
        for i, c in enumerate(box_centers)
    ]
    rng = np.random.default_rng(seed)
    enc = EncodingConfig(l_position=2, l_direction=1)
    graph = SG.build_scene_graph(frames, tracks, config=enc, rng=rng, field_sizes=TINY_FIELDS)
    for node_id, node in graph.nodes.items():
        obj = graph.decoders[node.decoder_key]
        node.codes = SG.LatentCodes(
            T.parameter(0.1 * rng.standard_normal(obj.d_s), name=f"codes/{node_id}/l_s"),
            T.parameter(0.1 * rng.standard_normal(obj.d_a), name=f"codes/{node_id}/l_a"),
        )
    return graph


def state_for(graph, center=(0, 0, 0)):
    local = SG.LocalGraph(graph=graph, center=np.asarray(center, float), radius=30.0,
                          reference_pose=SG.Pose.identity(), frames=[0])
    return SG.ProgressiveState(graph_factory=None, graphs=[local])


def ray_batch(dirs, colors, sky, lidar):
    dirs = np.asarray(dirs, float)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    lidar_t = np.asarray(lidar, float)
    return TR.RayBatch(
        origins=np.zeros((len(dirs), 3)),
        dirs=dirs,
        frames=np.zeros(len(dirs), dtype=int),
        colors=np.asarray(colors, float),
        sky=np.asarray(sky, bool),
        lidar_t=lidar_t,
        lidar_valid=np.isfinite(lidar_t),
    )


def gate(name, detail):
    print(f"[PASS] {name}: {detail}")


# -- gradients ----------------------------------------------------------------------


def test_four_term_loss_gradients_match_finite_differences():
    """Full-objective gradients on a 4-ray scene vs central differences, < 1e-4."""
    t0 = time.perf_counter()
    with T.using_dtype(np.float64):
        graph = box_scene([(6.0, 0, 0)])
        state = state_for(graph)
        # a short far bound keeps residual transmittance, and with it the
        # far-field gradient, well above finite-difference rounding noise
        config = micro_config(d_far=9.0)
        config.encoding.t = 2
        config.encoding.t_final = 10
        batch = ray_batch(
            dirs=[[1.0, 0, 0], [1.0, 0.05, 0], [0, 0, 1.0], [1.0, -0.05, 0.02]],
            colors=[[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.4, 0.6, 0.9], [0.5, 0.5, 0.5]],
            sky=[False, False, True, False],
            lidar=[6.0, np.nan, np.nan, 7.5],
        )
        w = TR.LossWeights()

        def total_loss(_):
            out = R.render_rays_batch(batch.origins, batch.dirs, batch.frames,
                                      state.active, config)
            return (
                TR.color_loss(out.color, batch.colors) * w.color
                + TR.depth_loss(out.depth, batch.lidar_t, batch.lidar_valid) * w.depth
                + TR._distribution_batch(out.weights, out.t, out.delta, batch.lidar_t,
                                         batch.lidar_valid, 0.05) * w.distribution
                + TR.sky_loss(out.weights, out.delta, batch.sky) * w.sky
            )

        params = TR.trainable_parameters(state)
        err = N.finite_difference_check(total_loss, params, eps=1e-4)
    elapsed = time.perf_counter() - t0
    assert err < 1e-4, f"max relative gradient error {err:.3e} >= 1e-4"
    assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s, budget 120s"
    gate("gradient suite",
         f"{len(params)} tensors, max rel err {err:.2e} < 1e-4 in {elapsed:.0f}s")


# -- ray-box sampling ---------------------------------------------------------------


def test_ray_box_sampling_agrees_with_marching_oracle():
    """Slab intersections vs dense marching on 10,000 rays; endpoints within 2e-4."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    step = 1e-4
    ts = np.arange(0.0, 4.0, step)
    n_rays, agree, hits = 10_000, 0, 0
    chunk = 250
    for _ in range(n_rays // chunk):
        o = rng.uniform(-1.25, 1.25, (chunk, 3))
        d = rng.standard_normal((chunk, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = o[:, None, :] + ts[None, :, None] * d[:, None, :]
        inside = np.all(np.abs(pts) <= 0.5, axis=2)
        for i in range(chunk):
            hit = S.ray_box_intersect(o[i], d[i])
            idx = np.flatnonzero(inside[i])
            if hit is None:
                # at most a grazing sliver may disagree with the march
                agree += step * len(idx) <= 2e-4
                continue
            hits += 1
            agree += len(idx) > 0 and (
                abs(ts[idx[0]] - hit[0]) <= 2e-4 and abs(ts[idx[-1]] - hit[1]) <= 2e-4
            )
            samples = S.box_stratified(hit[0], hit[1], 5)
            assert samples[0] == hit[0] and samples[-1] == hit[1]
            assert np.all(np.diff(samples) > 0)
    elapsed = time.perf_counter() - t0
    rate = agree / n_rays
    assert rate >= 0.9999, f"oracle agreement {rate:.5f} < 0.9999"
    assert elapsed < 60.0, f"sampling oracle took {elapsed:.0f}s, budget 60s"
    gate("sampling oracle",
         f"{rate:.5f} agreement over 10,000 rays ({hits} hits), endpoints exact, {elapsed:.0f}s")


# -- compositing --------------------------------------------------------------------


def test_compositing_partition_and_beer_lambert():
    """Weights plus residual sum to 1 within 1e-6; uniform-medium decay within 1%."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 48))
        t = np.sort(rng.uniform(0.3, 30.0, size=n))
        t += np.arange(n) * 1e-9  # ties would break the ascending contract
        delta = np.append(np.diff(t), max(t[-1] - t[-2], 1e-6))
        sigma = rng.uniform(0.0, 3.0, size=n)
        out = R.composite(t, delta, sigma, rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, 3))
        worst = max(worst, abs(float(out.weights.data.sum() + out.t_end.data) - 1.0))
    assert worst <= 1e-6, f"partition deviates by {worst:.3e} > 1e-6"

    sigma, span, n = 0.7, 4.0, 64
    t = np.linspace(0.0, span, n + 1)[1:]  # endpoint-aligned, deltas span the medium
    delta = np.append(np.diff(t), t[1] - t[0])
    out = R.composite(t, delta, np.full(n, sigma), np.zeros((n, 3)), np.zeros(3))
    rel = abs(float(out.t_end.data) - np.exp(-sigma * span)) / np.exp(-sigma * span)
    assert rel <= 0.01, f"uniform-medium transmittance off by {rel:.3%} > 1%"
    gate("compositing invariants",
         f"worst partition error {worst:.2e} over 10,000 rays; "
         f"transmittance error {rel:.3%} at 64 samples")


# -- frequency schedule -------------------------------------------------------------


def test_frequency_mask_boundaries_and_monotonicity():
    """3 bands at t=0, all at t>=T, elementwise non-decreasing; exact."""
    l_bands, t_final = 10, 77
    start = frequency_mask(0, t_final, l_bands)
    assert np.count_nonzero(start) == 3 and np.all(start[:3] == 1.0)
    assert np.all(frequency_mask(t_final, t_final, l_bands) == 1.0)
    assert np.all(frequency_mask(5 * t_final, t_final, l_bands) == 1.0)

    sweep = np.linspace(0.0, t_final, 100)
    masks = np.stack([frequency_mask(t, t_final, l_bands) for t in sweep])
    diffs = np.diff(masks, axis=0)
    assert np.all(diffs >= 0.0), "mask decreased somewhere along the schedule"
    full_counts = (masks == 1.0).sum(axis=1)
    assert np.all(np.diff(full_counts) >= 0)
    gate("frequency mask",
         f"3 bands open at t=0, all {l_bands} at t=T, "
         f"monotone over {len(sweep)} schedule points (min step {diffs.min():.1f})")


# -- progressive windows ------------------------------------------------------------


@pytest.fixture(scope="module")
def ref_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    return generate_synthetic(SyntheticConfig(n_frames=20, n_objects=2, seed=0),
                              root / "scene")


def test_two_window_progression_freezes_and_fuses(ref_scene, tmp_path):
    """The 20-frame walk splits into exactly 2 windows; frozen weights hold still."""
    ds = load_scene(ref_scene)
    config = TR.TrainConfig(iterations=400, batch_rays=16, seed=0, eval_every=0,
                            checkpoint_every=0, bound_radius=5.0, overlap=3)
    rc = R.RenderConfig(
        sampling=S.SamplingConfig(n_planes=8, n_box=3, d_far=40.0),
        encoding=EncodingConfig(l_position=3, l_direction=1),
    )
    state, _ = TR.train(ds, config, tmp_path / "run", render_config=rc,
                        field_sizes=TINY_FIELDS)

    assert len(state.graphs) == 2, f"expected 2 local graphs, found {len(state.graphs)}"
    first, second = state.graphs
    assert first.frozen and not second.frozen
    frozen_sum = first.checksum
    assert frozen_sum

    # 100 more optimization steps must leave the frozen graph untouched
    rng = np.random.default_rng(1)
    by_index = {f.index: f for f in ds.frames}
    active_frames = [by_index[i] for i in second.frames]
    depth_maps = {f.index: TR.lidar_depth_image(f, ds.width, ds.height)
                  for f in active_frames}
    train_rc = R.RenderConfig(
        sampling=S.SamplingConfig(n_planes=8, n_box=3, d_far=40.0, train=True),
        encoding=rc.encoding,
    )
    optimizer = N.Adam(TR.trainable_parameters(state), lr=5e-4)
    weights = TR.LossWeights()
    for k in range(100):
        batch = TR.sample_ray_batch(active_frames, depth_maps, 16, rng)
        TR.train_step(state, batch, weights, config, train_rc, optimizer,
                      config.iterations + k, rng)
    assert SG.checksum_parameters(first.graph.owned_parameters()) == frozen_sum
    state.verify_frozen()

    overlap = set(first.frames) & set(second.frames)
    assert len(overlap) == config.overlap
    assert overlap == set(first.frames[-config.overlap:])

    rng = np.random.default_rng(2)
    centers = [lg.center for lg in state.graphs]
    worst = max(
        abs(SG.idw_weights(centers, q, state.idw_power).sum() - 1.0)
        for q in rng.uniform(-2, 12, size=(200, 3))
    )
    assert worst <= 1e-12, f"fusion weights deviate from 1 by {worst:.3e}"
    gate("progressive contract",
         f"2 windows, checksum {frozen_sum[:8]} stable over 100 post-freeze steps, "
         f"{len(overlap)} overlap frames shared, fusion sum error {worst:.1e}")


# -- end to end ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference_runs(ref_scene, tmp_path_factory):
    """Train the reference scene three ways, full model and two ablations."""
    out_root = tmp_path_factory.mktemp("runs")
    ds = load_scene(ref_scene)
    train_idx, test_idx = split(ds, "50")
    by_index = {f.index: f for f in ds.frames}

    def mean_psnr(state, config, indices):
        vals = []
        for i in indices:
            f = by_index[i]
            img = R.render_image(f.pose, f.intrinsics, f.index, state, config,
                                 ds.width, ds.height, with_layers=False)
            vals.append(float(psnr(img.color, f.image)))
        return float(np.mean(vals))

    results = {}
    for tag, cfg_kw, weights in [
        ("full", {}, None),
        ("no_mask", {"mask_horizon": 1}, None),
        ("no_depth", {}, TR.LossWeights(depth=0.0)),
    ]:
        # batch 256 wanders late in training (plateaus 1.5 dB short); 512 holds
        config = TR.TrainConfig(iterations=20_000, batch_rays=512, seed=0, split="50",
                                eval_every=0, checkpoint_every=0, **cfg_kw)
        t0 = time.perf_counter()
        state, _ = TR.train(ds, config, out_root / tag,
                            weights=weights, render_config=ref_render_config())
        wall = time.perf_counter() - t0
        eval_rc = ref_render_config()
        eval_rc.encoding.t = config.iterations
        eval_rc.encoding.t_final = config.horizon
        results[tag] = {
            "wall": wall,
            "train": mean_psnr(state, eval_rc, train_idx),
            "held_out": mean_psnr(state, eval_rc, test_idx),
        }
    return results


@pytest.mark.slow
def test_synthetic_end_to_end_with_ablations(reference_runs):
    """20k-iteration reference run clears 28/22 dB; each ablation lands below it."""
    full = reference_runs["full"]
    assert full["wall"] <= 4 * 3600, f"training took {full['wall']/3600:.2f}h > 4h"
    assert full["train"] >= 28.0, f"train-frame psnr {full['train']:.2f} < 28"
    assert full["held_out"] >= 22.0, f"held-out psnr {full['held_out']:.2f} < 22"
    for tag in ("no_mask", "no_depth"):
        assert reference_runs[tag]["held_out"] < full["held_out"], (
            f"{tag} held-out psnr {reference_runs[tag]['held_out']:.2f} does not fall "
            f"below the full model's {full['held_out']:.2f}"
        )
    gate("synthetic end-to-end",
         f"train {full['train']:.2f} dB, held-out {full['held_out']:.2f} dB "
         f"in {full['wall']/60:.0f} min; ablations "
         f"{reference_runs['no_mask']['held_out']:.2f} (no mask) / "
         f"{reference_runs['no_depth']['held_out']:.2f} (no depth) dB below it")


# -- edit identities ----------------------------------------------------------------


def test_edit_identities_removal_and_rotation():
    """Removing a node matches excluding it bit-for-bit; rotation is equivariant."""
    graph = box_scene([(6.0, 0, 0), (3.0, 3.0, 0)], seed=3)
    state = state_for(graph)
    config = micro_config()
    intr = np.array([[40.0, 0, 16], [0, 40.0, 12], [0, 0, 1]])
    pose = SG.Pose(np.array([[0, 0, 1.0], [-1.0, 0, 0], [0, -1.0, 0]]), np.zeros(3))
    graph.camera_poses[0] = pose

    excluded = R.render_image(pose, intr, 0, state, config, 32, 24,
                              exclude_nodes=("box_0",), with_layers=False)
    SG.remove_node(graph, "box_0")
    removed = R.render_image(pose, intr, 0, state, config, 32, 24, with_layers=False)
    assert np.array_equal(excluded.color, removed.color)
    assert np.array_equal(excluded.depth, removed.depth)

    # equivariance: spinning object and camera together must not change pixels
    graph2 = box_scene([(6.0, 0, 0)], seed=4)
    head = graph2.background.stage1.layers[-1]
    head.weight.data[:, 0] = 0.0
    head.bias.data[0] = -40.0  # density underflows to ~4e-18 everywhere
    graph2.farfield.grid.data[...] = 0.0  # constant gray sky
    state2 = state_for(graph2)
    graph2.camera_poses[0] = pose
    node = graph2.nodes["box_0"]

    base = R.render_image(pose, intr, 0, state2, config, 32, 24, with_layers=False)
    pixels = R.image_pixels(32, 24)
    dirs = S.pixel_directions(intr, pose, pixels)
    half = 0.5 * config.sampling.shadow_scale
    hit = np.array([
        S.ray_box_intersect(
            SG.world_to_object(pose.translation, node, 0),
            SG.world_to_object_direction(d, node, 0, normalize=False),
            half_extent=half,
        ) is not None
        for d in dirs
    ])
    assert hit.any()

    theta = np.deg2rad(37.0)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    center = node.pose_track[0].translation

    def spin(p):
        return SG.Pose(rot @ p.rotation, rot @ (p.translation - center) + center)

    node.pose_track[0] = SG.Pose(rot @ node.pose_track[0].rotation, center)
    spun = spin(pose)
    graph2.camera_poses[0] = spun
    # background planes are laid out along the reference forward axis, so the
    # reference frame must ride the same rotation for the scene to stay rigid
    state2.graphs[0].reference_pose = spin(state2.graphs[0].reference_pose)
    turned = R.render_image(spun, intr, 0, state2, config, 32, 24, with_layers=False)

    gap = np.abs(base.color.reshape(-1, 3) - turned.color.reshape(-1, 3))[hit].max()
    assert gap <= 1e-6, f"object rays moved by {gap:.3e} > 1e-6 under joint rotation"
    gate("edit identities",
         f"removal render equals node-excluded render exactly; "
         f"joint-rotation gap {gap:.1e} on {int(hit.sum())} object rays")


# -- sky suppression ----------------------------------------------------------------


def test_sky_loss_alone_suppresses_sky_density(ref_scene):
    """50 steps of pure sky loss drive sky-ray opacity down every step."""
    ds = load_scene(ref_scene)
    rng = np.random.default_rng(0)
    enc = EncodingConfig(l_position=3, l_direction=1, t=1, t_final=1)
    factory = SG.default_graph_factory(ds.frames, ds.tracks, config=enc, rng=rng,
                                       field_sizes=TINY_FIELDS)
    state = SG.ProgressiveState(graph_factory=factory, bound_radius=30.0, overlap=3)
    SG.advance_window(state, ds.frames[0].pose, 0)
    TR.assign_codes(state.active.graph, ds, [f.index for f in ds.frames])

    frame = ds.frames[0]
    vs, us = np.nonzero(frame.sky_mask)
    pick = rng.choice(len(us), size=48, replace=False)
    pix = np.stack([us[pick], vs[pick]], axis=1)
    dirs = S.pixel_directions(frame.intrinsics, frame.pose, pix)
    batch = TR.RayBatch(
        origins=np.tile(frame.pose.translation, (len(pix), 1)),
        dirs=dirs,
        frames=np.zeros(len(pix), dtype=int),
        colors=frame.image[pix[:, 1], pix[:, 0]],
        sky=np.ones(len(pix), dtype=bool),
        lidar_t=np.full(len(pix), np.nan),
        lidar_valid=np.zeros(len(pix), dtype=bool),
    )
    config = R.RenderConfig(
        sampling=S.SamplingConfig(n_planes=8, n_box=3, d_far=40.0),
        encoding=enc,
    )

    def sky_opacity():
        with T.no_grad():
            out = R.render_rays_batch(batch.origins, batch.dirs, batch.frames,
                                      state.active, config)
        return float((out.weights.data**2 * out.delta).sum(axis=1).mean())

    weights = TR.LossWeights(color=0.0, depth=0.0, distribution=0.0, sky=1.0)
    train_cfg = TR.TrainConfig(iterations=50, batch_rays=len(pix), seed=0)
    optimizer = N.Adam(TR.trainable_parameters(state), lr=5e-4)
    trace = [sky_opacity()]
    for _ in range(50):
        TR.train_step(state, batch, weights, train_cfg, config, optimizer, 1, rng)
        trace.append(sky_opacity())
    drops = np.diff(trace)
    assert np.all(drops < 0), (
        f"sky opacity rose at steps {np.nonzero(drops >= 0)[0].tolist()}: "
        f"{trace[0]:.3e} -> {trace[-1]:.3e}"
    )
    gate("sky suppression",
         f"mean sky opacity fell {trace[0]:.3e} -> {trace[-1]:.3e} "
         f"monotonically over 50 steps")
