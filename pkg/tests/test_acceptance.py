"""End-to-end acceptance checks, one test per criterion.

Each test records a verdict line (PASS/FAIL plus the measured numbers) that the
session prints under "acceptance criteria". The heavy fixtures (default-size
toy training and the 500-lesion assembly) are shared across criteria.
"""

import json
import math
import time

import numpy as np
import pytest

from lnforge.adapter import AdapterNet, adapter_loss
from lnforge.cli import main as cli_main
from lnforge.codec import fit_codec
from lnforge.config import PipelineConfig
from lnforge.diffusion import (
    DenoiserNet,
    diffusion_loss,
    forward_sample,
    forward_step,
    make_schedule,
    reverse_sample,
    train,
)
from lnforge.metrics import improved_precision, improved_recall, ipr_report, ks_uniform, shape_features
from lnforge.optim import TrainConfig
from lnforge.phantoms import blob_family, pelvic_background
from lnforge.pipeline import assemble_dataset
from lnforge.sdf import edt_squared, is_connected, mask_to_tsdf, tsdf_to_mask, voxel_diagonal
from lnforge.volume import Mask
from lnforge.workflow import (
    adapter_pairs,
    shape_tsdfs,
    train_adapter_model,
    train_shape_model,
    train_toy_models,
)

from oracles import (
    ball_fraction,
    brute_edt_squared,
    brute_long_axis,
    dense_singular_values,
    loop_precision,
    read_lnv_raw,
)
from test_diffusion import finite_difference_check

pytestmark = pytest.mark.slow

N_BACKGROUNDS, PER_BACKGROUND = 100, 5
ASSEMBLY_DIMS = (96, 96, 64)


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="module")
def toy():
    """Default-configuration models trained on the 200-shape toy family, with timing."""
    cfg = PipelineConfig()
    start = time.perf_counter()
    models, summary = train_toy_models(cfg, n_shapes=200, seed=0)
    summary["seconds"] = time.perf_counter() - start
    return cfg, models, summary


@pytest.fixture(scope="module")
def assembly(toy, tmp_path_factory):
    cfg, models, _ = toy
    rng = np.random.default_rng(2024)
    pairs = [pelvic_background(rng, dims=ASSEMBLY_DIMS) for _ in range(N_BACKGROUNDS)]
    out = tmp_path_factory.mktemp("assembly")
    manifest = assemble_dataset([p[0] for p in pairs], [p[1] for p in pairs],
                                [PER_BACKGROUND] * N_BACKGROUNDS, models, cfg, 7, out)
    return cfg, out, manifest


# ---------------------------------------------------------------- 1-5: oracle checks

def test_criterion_01_edt_exact(acceptance):
    rng = np.random.default_rng(1)
    masks = [rng.random((16, 16, 16)) < rng.uniform(0.01, 0.6) for _ in range(200)]
    start = time.perf_counter()
    results = [edt_squared(m) for m in masks]
    seconds = time.perf_counter() - start
    mismatched = sum(not np.array_equal(r, brute_edt_squared(m)) for r, m in zip(results, masks))
    acceptance.record(1, mismatched == 0 and seconds < 10.0,
                      f"{mismatched}/200 masks differ from brute force; edt time {seconds:.2f} s (< 10 s)")


def _thick_mask(rng, dims=(16, 16, 16)):
    # unions of 2x2x2 blocks on the even lattice are at least two voxels thick everywhere
    coarse = rng.random(tuple(d // 2 for d in dims)) < rng.uniform(0.2, 0.7)
    coarse.flat[rng.integers(coarse.size)] = True
    coarse.flat[rng.integers(coarse.size)] = False
    return Mask(np.kron(coarse, np.ones((2, 2, 2), dtype=bool)).astype(bool), (1.0, 1.0, 1.0))


def test_criterion_02_tsdf_round_trip(acceptance):
    rng = np.random.default_rng(2)
    failures, worst = 0, 0.0
    for _ in range(100):
        m = _thick_mask(rng)
        t = mask_to_tsdf(m)
        worst = max(worst, float(np.abs(t.values).max()))
        failures += not np.array_equal(tsdf_to_mask(t).values, m.values)
    bound = float(np.float32(0.2))
    acceptance.record(2, failures == 0 and worst <= bound,
                      f"{failures}/100 masks changed by the round trip; max |tsdf| {worst:.7f} (bound 0.2)")


def test_criterion_03_codec_fidelity(acceptance):
    rng = np.random.default_rng(3)
    dims, n = (10, 10, 10), 60
    v = int(np.prod(dims))
    gens, _ = np.linalg.qr(rng.standard_normal((v, 3)))
    data = (rng.uniform(-0.05, 0.05, v) + (rng.standard_normal((n, 3)) * [3.0, 2.0, 1.0]) @ gens.T)
    codec = fit_codec(data.reshape(n, *dims), 3)
    recon = codec.decode_array(codec.encode_array(data), clamp=False).reshape(n, -1)
    err = float(np.abs(recon - data).max())
    sv_err = float(np.abs(codec.singular_values - dense_singular_values(data, 3)).max())
    acceptance.record(3, err <= 1e-6 and sv_err <= 1e-6,
                      f"max per-voxel error {err:.2e} (<= 1e-6); singular value error {sv_err:.2e} (<= 1e-6)")


def test_criterion_04_diffusion_marginal(acceptance):
    s = make_schedule()
    rng = np.random.default_rng(4)
    n, z0 = 100_000, np.array([1.0, -0.5])
    worst = 0.0
    for t in (1, s.T // 2, s.T):
        closed = forward_sample(np.broadcast_to(z0, (n, 2)), np.full(n, t), rng.standard_normal((n, 2)), s)
        z = np.broadcast_to(z0, (n, 2)).copy()
        for step in range(1, t + 1):
            z = forward_step(z, step, rng.standard_normal((n, 2)), s)
        mean, var = math.sqrt(s.alpha_bar[t - 1]) * z0, 1.0 - s.alpha_bar[t - 1]
        mean_se, var_se = math.sqrt(var / n), var * math.sqrt(2.0 / (n - 1))
        for sample in (closed, z):
            worst = max(worst, float(np.abs(sample.mean(0) - mean).max() / mean_se),
                        float(np.abs(sample.var(0) - var).max() / var_se))
    acceptance.record(4, worst <= 4.0, f"worst deviation {worst:.2f} standard errors (<= 4) at t in 1, 100, 200")


def test_criterion_05_gradient_checks(acceptance):
    rng = np.random.default_rng(5)
    net = DenoiserNet(4, cond_dim=3, hidden=(6, 5), embed_dim=4, seed=5)
    for b in net.biases:
        b[...] = rng.normal(0, 0.1, b.shape)
    s = make_schedule(T=20)
    z0, cond = rng.standard_normal((4, 4)), rng.standard_normal((4, 3))
    t, eps = np.array([1, 7, 13, 20]), rng.standard_normal((4, 4))
    _, grads = diffusion_loss(net, z0, s, cond=cond, t=t, eps=eps)
    denoiser_err = finite_difference_check(
        lambda: diffusion_loss(net, z0, s, cond=cond, t=t, eps=eps)[0], net.params, grads)

    A = AdapterNet(seed=5)
    A.w2[...] = rng.normal(0, 0.02, A.w2.shape)
    source = rng.uniform(-0.1, 0.1, (2, 4, 4, 4))
    # keep every residual far from the L1 kink so central differences stay on one side
    target = source + np.where(rng.random(source.shape) < 0.5, -0.05, 0.05)
    adapter_errs = []
    for norm in ("l1", "l2"):
        _, g = adapter_loss(target, source, A, norm)
        adapter_errs.append(finite_difference_check(lambda: adapter_loss(target, source, A, norm)[0], A.params, g))
    worst = max(denoiser_err, *adapter_errs)
    acceptance.record(5, worst <= 1e-3,
                      f"denoiser {denoiser_err:.1e}, adapter L1 {adapter_errs[0]:.1e}, adapter L2 "
                      f"{adapter_errs[1]:.1e} (each <= 1e-3)")


# ---------------------------------------------------------------- 6-7: training

def test_criterion_06_training_sanity(toy, acceptance):
    cfg, models, summary = toy
    trace = summary["shape_trace"]
    first, last = float(np.mean(trace[:20])), float(np.mean(trace[-100:]))
    drop = 1.0 - last / first
    codec, rng = models.shape_codec, np.random.default_rng(66)
    z = reverse_sample(models.shape_net, models.shape_schedule, rng, n=100) / models.shape_net.latent_scale
    refined = models.adapter.forward(codec.decode_array(z))
    good = sum(bool(fg.any()) and is_connected(fg) for fg in (refined < 0))
    ok = drop >= 0.5 and good >= 90 and summary["seconds"] <= 300
    acceptance.record(6, ok, f"loss {first:.2f} -> {last:.2f} ({drop:.0%} drop, >= 50%); {good}/100 samples "
                             f"non-empty and connected (>= 90); training took {summary['seconds']:.0f} s (<= 300)")


def test_criterion_07_adapter_benefit(toy, acceptance):
    cfg, models, summary = toy
    held_out = shape_tsdfs(blob_family(60, 2000, dims=cfg.geometry.patch_dims), cfg)
    pairs = adapter_pairs(models.shape_codec, held_out, cfg.training.sigma_adapter, seed=77)
    target = np.stack([p[0].values for p in pairs])
    source = np.stack([p[1].values for p in pairs])
    trained = adapter_loss(target, source, models.adapter)[0]
    identity = adapter_loss(target, source, AdapterNet.identity(tau=cfg.geometry.tau))[0]
    acceptance.record(7, trained < identity,
                      f"held-out L1 {trained:.5f} with the trained adapter vs {identity:.5f} for the identity")


# ---------------------------------------------------------------- 8: metrics

def test_criterion_08_ipr_exact(acceptance):
    rng = np.random.default_rng(8)
    mismatches = asymmetric = 0
    for _ in range(50):
        d = int(rng.integers(1, 6))
        real = rng.standard_normal((int(rng.integers(5, 30)), d))
        fake = rng.standard_normal((int(rng.integers(5, 30)), d)) * rng.uniform(0.5, 2.0) + rng.uniform(-1, 1)
        k = int(rng.integers(1, 4))
        mismatches += improved_precision(real, fake, k) != loop_precision(real, fake, k)
        mismatches += improved_recall(real, fake, k) != loop_precision(fake, real, k)
        asymmetric += improved_recall(real, fake, k) != improved_precision(fake, real, k)
    same = rng.standard_normal((40, 4))
    rep = ipr_report(same, same.copy())
    ok = mismatches == 0 and asymmetric == 0 and rep["ip"] == 1.0 and rep["ir"] == 1.0
    acceptance.record(8, ok, f"{mismatches} oracle mismatches over 50 instances; {asymmetric} symmetry "
                             f"violations; identical sets give IP {rep['ip']}, IR {rep['ir']}")


# ---------------------------------------------------------------- 9: ablation

ABLATION_SEEDS = (0, 1, 2)
ABLATION_SAMPLES = 500
# The voxel-space arm is far costlier per step (a 13824-wide input layer); see the
# decisions ledger for a full-length run that gave the same outcome.
VOXEL_STEPS = 300


def _masks_from_grids(values, codec):
    out = []
    for v in values:
        fg = np.clip(v, -codec.clip, codec.clip) < 0
        if fg.any() and not fg.all():
            out.append(Mask(fg, codec.spacing))
    return out


def _latent_arms(net, schedule, adapter, codec, seed):
    z = reverse_sample(net, schedule, np.random.default_rng([seed, 9]), n=ABLATION_SAMPLES) / net.latent_scale
    decoded = codec.decode_array(z)
    return _masks_from_grids(adapter.forward(decoded), codec), _masks_from_grids(decoded, codec)


def _voxel_arm(grids, cfg, schedule, codec, seed):
    x = np.stack([g.values.ravel() for g in grids]).astype(np.float64)
    mean, scale = x.mean(axis=0), 1.0 / x.std()
    t = cfg.training
    net = DenoiserNet(x.shape[1], hidden=(t.hidden, t.hidden), seed=seed)
    train(net, (x - mean) * scale, schedule,
          TrainConfig(lr=t.lr, steps=VOXEL_STEPS, batch_size=t.batch_size, seed=seed))
    z = reverse_sample(net, schedule, np.random.default_rng([seed, 9]), n=ABLATION_SAMPLES) / scale + mean
    return _masks_from_grids(z.reshape(-1, *codec.grid_dims), codec)


def test_criterion_09_directional_ablation(toy, acceptance):
    cfg, models, summary = toy
    codec, grids = models.shape_codec, summary["grids"]
    real = shape_features(codec, blob_family(200, 1000, dims=cfg.geometry.patch_dims))
    scores = {"implicit+adapter": [], "implicit": [], "explicit": []}
    for seed in ABLATION_SEEDS:
        if seed == 0:
            net, schedule, adapter = models.shape_net, models.shape_schedule, models.adapter
        else:
            net, schedule, _ = train_shape_model(codec, grids, cfg, seed)
            adapter, _, _ = train_adapter_model(codec, grids, cfg, seed)
        with_adapter, plain = _latent_arms(net, schedule, adapter, codec, seed)
        arms = {"implicit+adapter": with_adapter, "implicit": plain,
                "explicit": _voxel_arm(grids, cfg, schedule, codec, seed)}
        for name, masks in arms.items():
            rep = ipr_report(real, shape_features(codec, masks))
            scores[name].append((rep["ip"], rep["ir"]))
    mean = {name: np.mean(vals, axis=0) for name, vals in scores.items()}
    order = ["implicit+adapter", "implicit", "explicit"]
    ok = all(mean[a][i] >= mean[b][i] for a, b in zip(order, order[1:]) for i in (0, 1))
    detail = "; ".join(f"{name} IP {mean[name][0]:.3f} IR {mean[name][1]:.3f}" for name in order)
    per_seed = ", ".join(f"seed {s}: " + "/".join(f"{scores[n][k][1]:.3f}" for n in order)
                         for k, s in enumerate(ABLATION_SEEDS))
    acceptance.record(9, ok, f"means over seeds {list(ABLATION_SEEDS)}: {detail} (IR per seed {per_seed})")


# ---------------------------------------------------------------- 10-11: assembly run

def test_criterion_10_long_axis_rebalancing(assembly, acceptance):
    cfg, out, manifest = assembly
    entries = manifest.entries
    spacing = (1.0, 1.0, 1.0)
    lengths = []
    for e in entries:
        _, mask = read_lnv_raw(out / e["files"]["mask"])
        lengths.append(brute_long_axis(mask > 0.5, spacing))
    lengths = np.array(lengths)
    delta = 2.0 * voxel_diagonal(spacing)
    lo, hi = cfg.long_axis.lo, cfg.long_axis.hi
    in_range = bool(((lengths >= lo - delta) & (lengths <= hi + delta)).all())
    ks = ks_uniform(lengths, lo, hi)
    bound = 1.63 / math.sqrt(len(lengths)) + 2.0 * delta / (hi - lo)
    ok = len(entries) == N_BACKGROUNDS * PER_BACKGROUND and in_range and ks <= bound
    acceptance.record(10, ok, f"{len(lengths)} lesions, long axes {lengths.min():.2f}..{lengths.max():.2f} mm "
                              f"(allowed {lo - delta:.2f}..{hi + delta:.2f}); KS {ks:.4f} (<= {bound:.4f}, "
                              f"sampling term alone {1.63 / math.sqrt(len(lengths)):.4f})")


def test_criterion_11_placement_contract(assembly, acceptance):
    cfg, out, manifest = assembly
    doc = json.loads((out / "manifest.json").read_text())
    pc = cfg.placement
    problems = []
    by_background = {}
    for e in doc["entries"]:
        by_background.setdefault(e["background"], []).append(e)
    for bg in doc["backgrounds"]:
        _, ct = read_lnv_raw(out / bg["volume"])
        _, region = read_lnv_raw(out / bg["region"])
        _, label = read_lnv_raw(out / bg["label"])
        cover = np.zeros(ct.shape, dtype=np.int32)
        for e in by_background.get(bg["id"], []):
            c = tuple(e["center"])
            if region[c] != 1.0:
                problems.append(f"{bg['id']} {c}: outside region")
            if not pc.hu_lo <= ct[c] <= pc.hu_hi:
                problems.append(f"{bg['id']} {c}: HU {ct[c]:.1f} outside window")
            frac = ball_fraction(ct, c, e["probe_radius_mm"], (1.0, 1.0, 1.0), pc.hu_lo, pc.hu_hi)
            if frac < pc.min_soft_fraction:
                problems.append(f"{bg['id']} {c}: soft fraction {frac:.3f}")
            _, m = read_lnv_raw(out / e["files"]["mask"])
            sl = tuple(slice(k, k + s) for k, s in zip(e["corner"], m.shape))
            cover[sl] += (m > 0.5).astype(np.int32)
            if not cover[c]:
                problems.append(f"{bg['id']} {c}: centre not inside its lesion")
        if cover.max(initial=0) > 1:
            problems.append(f"{bg['id']}: overlapping lesions")
        if not np.array_equal(cover > 0, label > 0.5):
            problems.append(f"{bg['id']}: label volume disagrees with lesion masks")
    acceptance.record(11, not problems and len(doc["entries"]) > 0,
                      f"{len(doc['entries'])} lesions in {len(doc['backgrounds'])} volumes checked; "
                      f"{len(problems)} violations" + (f", first: {problems[0]}" if problems else ""))


# ---------------------------------------------------------------- 12: CLI determinism

SMALL_RUN = [
    "--set", "codec.shape_latent_dim=16", "--set", "codec.texture_latent_dim=16",
    "--set", "training.steps=300", "--set", "training.hidden=64",
    "--set", "training.adapter_steps=20", "--set", "training.adapter_batch=4",
]


def _pipeline(root):
    o = str(root)
    steps = [
        ["phantoms", "--n-shapes", "60", "--n-backgrounds", "2"],
        ["tsdf", "--masks", f"{o}/masks"],
        ["fit-codec", "--tsdf", f"{o}/tsdf"],
        ["train-shape", "--tsdf", f"{o}/tsdf", "--codec", f"{o}/shape.codec"],
        ["train-adapter", "--tsdf", f"{o}/tsdf", "--codec", f"{o}/shape.codec", "--shape-loss", f"{o}/shape_loss.csv"],
        ["train-texture", "--patches", f"{o}/textures", "--masks", f"{o}/masks", "--codec", f"{o}/shape.codec"],
        ["synth", "--codec", f"{o}/shape.codec", "--shape-net", f"{o}/shape.ddpm", "--adapter", f"{o}/adapter.adpt",
         "--texture-codec", f"{o}/texture.codec", "--texture-net", f"{o}/texture.ddpm",
         "--backgrounds", f"{o}/backgrounds", "--regions", f"{o}/regions", "--count", "3"],
        ["eval-ipr", "--real", f"{o}/masks", "--fake", f"{o}/dataset/shapes", "--codec", f"{o}/shape.codec"],
        ["measure", "--masks", f"{o}/masks"],
    ]
    for argv in steps:
        code = cli_main(argv + ["--out", o, "--seed", "3"] + SMALL_RUN)
        if code != 0:
            return f"{argv[0]} exited {code}"
    return None


def test_criterion_12_determinism(tmp_path, acceptance, capsys):
    errors = [_pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")]
    capsys.readouterr()
    if any(errors):
        acceptance.record(12, False, f"pipeline failed: {errors}")
    compared = ["dataset/manifest.json", "ipr.json", "long_axis_summary.json", "long_axis_hist.csv",
                "adapter_report.json"]
    compared += sorted(p.name for p in (tmp_path / "a").glob("*.run.json"))
    differing = [name for name in compared
                 if (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()]
    acceptance.record(12, not differing,
                      f"{len(compared)} manifests and reports compared byte for byte; differing: {differing or 'none'}")
