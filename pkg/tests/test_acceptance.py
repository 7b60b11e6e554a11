"""End-to-end acceptance checks; the run summary prints one PASS/FAIL line per criterion."""

import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from changediff import cli
from changediff.cdr import build_mask_pyramid, extract_class_views, ratio_loss, spatial_loss, total_loss
from changediff.codec import (
    ClassDistribution,
    ClassPalette,
    PaletteEntry,
    colormap_to_layout,
    compute_class_ratios,
    layout_to_colormap,
)
from changediff.diffusion import forward_diffuse, gaussian_noise, ldm_loss, make_schedule
from changediff.metrics import SCDConfusion, accumulate, score
from changediff.model import AttentionRecord, AttentionStack, DenoiserConfig, build_denoiser
from changediff.pipeline import TrainConfig, realized_ratios, stitch_noise, train_t2l
from changediff.prompts import EventSpec, apply_event, build_prompt, parse_prompt
from changediff.toy import make_corpus, toy_palette

from cdr_oracle import PAL as CDR_PAL, oracle_ratio, oracle_spatial, random_instance
from scd_oracle import rescore


class Clock:
    def __init__(self, limit):
        self.limit, self.start = limit, time.perf_counter()

    def check(self, record):
        took = time.perf_counter() - self.start
        record("seconds", f"{took:.1f}")
        assert took < self.limit, f"took {took:.1f}s, limit {self.limit}s"


@pytest.mark.criterion(1, "codec suite")
def test_codec_suite(record_property):
    clock = Clock(10)
    rng = np.random.default_rng(2024)
    palette = ClassPalette(tuple(PaletteEntry(i, f"class{i}", tuple(int(c) for c in rng.integers(0, 250, 3)))
                                 for i in range(6)))
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(8, 65, 2))
        ids = np.array(palette.class_ids + [palette.unlabeled_id], np.uint8)
        layout = rng.choice(ids, size=(h, w))
        assert np.array_equal(colormap_to_layout(layout_to_colormap(layout, palette), palette), layout)
        full = rng.choice(ids[:-1], size=(h, w))
        assert abs(compute_class_ratios(full, palette).total - 1.0) <= 1e-12
    for _ in range(200):
        centre = rng.integers(20, 236, size=3)
        offset = rng.integers(1, 20, size=3)
        lo, hi = sorted(rng.choice(254, size=2, replace=False).tolist())
        pal = ClassPalette((PaletteEntry(hi, "hi", tuple(int(v) for v in centre + offset)),
                            PaletteEntry(lo, "lo", tuple(int(v) for v in centre - offset))))
        assert colormap_to_layout(centre.astype(np.uint8).reshape(1, 1, 3), pal)[0, 0] == lo
    grey = ClassPalette((PaletteEntry(9, "grey", (155, 155, 155)),), 255, (255, 255, 255))
    assert colormap_to_layout(np.full((1, 1, 3), 205, np.uint8), grey)[0, 0] == 9
    clock.check(record_property)


@pytest.mark.criterion(2, "grammar suite")
def test_grammar_suite(record_property):
    clock = Clock(10)
    names = ["building", "water", "tree", "low vegetation", "non-vegetated ground surface", "playground"]
    palette = ClassPalette.from_pairs([(n, (i * 40, 255 - i * 40, i)) for i, n in enumerate(names)])
    rng = np.random.default_rng(7)
    for i in range(1000):
        k = int(rng.integers(1, len(names) + 1))
        chosen = list(rng.permutation(names)[:k])
        dist = ClassDistribution(tuple(zip(chosen, rng.dirichlet(np.ones(k + 1))[:k].tolist())))
        back = parse_prompt(build_prompt(dist, i).text, palette)
        assert sorted(back.names) == sorted(dist.names)
        for n, r in back.phrases:
            assert abs(r - round(dist.as_dict()[n], 2)) <= 0.01 + 1e-12

        full = ClassDistribution(tuple(zip(chosen, rng.dirichlet(np.ones(k)).tolist())))
        for mode in ("ratio_reshape", "class_expand", "class_reduce"):
            if (mode == "class_expand" and k == len(names)) or (mode == "class_reduce" and k == 1):
                continue
            spec = EventSpec(mode, float(rng.uniform(0, 0.5)), seed=i)
            out = apply_event(full, spec, palette)
            assert abs(out.total - 1.0) <= 1e-9
            assert apply_event(full, spec, palette) == out
        assert apply_event(full, EventSpec("ratio_reshape", 0.0, seed=i), palette) == full
    clock.check(record_property)


@pytest.mark.criterion(3, "loss oracle suite")
def test_loss_oracle_suite(record_property):
    clock = Clock(30)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        layout, dist, prompt, attn = random_instance(rng)
        view = extract_class_views(attn, prompt)
        gt = build_mask_pyramid(layout, CDR_PAL, view.names, view.sizes)
        rat = ratio_loss(view, dist, gt, "hard")
        spa = spatial_loss(view, gt)
        worst = max(worst, abs(float(rat[0]) - oracle_ratio(layout, dist, prompt, attn[0])),
                    abs(float(spa[0]) - oracle_spatial(layout, prompt, attn[0])))
        per_layer = (rat + spa).tolist()
        lam, l_ldm = float(rng.random() * 2), float(rng.random())
        assert float(total_loss(l_ldm, torch.tensor(per_layer, dtype=torch.float64), lam)) == pytest.approx(
            l_ldm + lam * sum(per_layer), abs=1e-12)
    record_property("max_abs_error", f"{worst:.1e}")
    assert worst <= 1e-12
    clock.check(record_property)


def _fd_relative_error(f, params, h=1e-6):
    for p in params:
        p.grad = None
    f().backward()
    analytic = torch.cat([p.grad.flatten() for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    return float((analytic - numeric).norm() / numeric.norm())


@pytest.mark.criterion(4, "gradient checks")
def test_gradient_checks(record_property):
    clock = Clock(120)
    rng = np.random.default_rng(4)
    layout, dist, prompt, attn = random_instance(rng, sizes=((8, 8),), classes=3, full=(8, 8))
    logits = torch.tensor(rng.normal(0, 2.0, size=(1, 64, prompt.n_tokens)), requires_grad=True)

    def cdr():
        stack = AttentionStack([AttentionRecord(0, (8, 8), logits.softmax(-1))])
        view = extract_class_views(stack, prompt)
        gt = build_mask_pyramid(layout, CDR_PAL, view.names, view.sizes)
        return (ratio_loss(view, dist, gt, "soft") + spatial_loss(view, gt)).sum()

    cdr_err = _fd_relative_error(cdr, [logits])

    palette = toy_palette()
    cfg = DenoiserConfig(base_channels=8, depth=2, attention_resolutions=(8, 4), heads=2, text_dim=16,
                         latent_geometry=(3, 8, 8))
    model = build_denoiser(cfg, palette, seed=1).double()
    schedule = make_schedule(50)
    z0 = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    prompts = [build_prompt(ClassDistribution((("building", 0.3), ("water", 0.7))), None),
               build_prompt(ClassDistribution((("low vegetation", 0.6), ("water", 0.4))), None)]
    probes = [model.out.weight, model.encoder.attn[0].k.weight, model.up_res[1].conv1.bias,
              model.text_encoder.mix[2].weight]

    def ldm():
        return ldm_loss(model, z0, model.encode_text(prompts), 17, schedule)[0]

    ldm_err = _fd_relative_error(ldm, probes)
    record_property("cdr_rel_error", f"{cdr_err:.1e}")
    record_property("ldm_rel_error", f"{ldm_err:.1e}")
    assert cdr_err < 1e-4 and ldm_err < 1e-4
    clock.check(record_property)


@pytest.mark.criterion(5, "diffusion sanity")
def test_diffusion_sanity(record_property):
    clock = Clock(60)
    gen = torch.Generator().manual_seed(5)
    z0 = torch.randn(4, 3, 8, 8, dtype=torch.float64, generator=gen)
    eps = torch.randn(4, 3, 8, 8, dtype=torch.float64, generator=gen)
    assert torch.equal(forward_diffuse(z0, 0, eps, make_schedule(1000)), z0)
    near_one = make_schedule(1, 1e-15, 1e-15)
    # largest deviation the closed form allows: sqrt(1 - ab)|eps| + (1 - sqrt(ab))|z0|
    bound = math.sqrt(1e-15) * float(eps.abs().max()) + 1e-15 * float(z0.abs().max())
    assert bound < 2e-7
    assert torch.allclose(forward_diffuse(z0, 1, eps, near_one), z0, rtol=0, atol=bound * (1 + 1e-6))
    near_zero = make_schedule(10, 0.99, 0.99)  # alpha-bar = 1e-20
    assert torch.allclose(forward_diffuse(z0, 10, eps, near_zero), eps, rtol=0, atol=1e-9)

    long = make_schedule(1000)
    clean = torch.full((100_000,), 0.9, dtype=torch.float64)
    final = forward_diffuse(clean, 1000, gaussian_noise(clean.shape, 5, torch.float64), long)
    record_property("final_mean", f"{float(final.mean()):.4f}")
    record_property("final_var", f"{float(final.var()):.4f}")
    assert abs(float(final.mean())) < 0.05 and abs(float(final.var()) - 1.0) < 0.1

    cfg = DenoiserConfig(base_channels=8, depth=2, attention_resolutions=(8, 4), heads=2, text_dim=16,
                         latent_geometry=(3, 8, 8), side_network=True)
    model = build_denoiser(cfg, toy_palette(), seed=2)
    text = model.encode_text([build_prompt(ClassDistribution((("water", 1.0),)), None)] * 2)
    z = torch.randn(2, 3, 8, 8)
    with torch.no_grad():
        plain = model(z, torch.tensor([10, 40]), *text)[0]
        cond = model(z, torch.tensor([10, 40]), *text, torch.rand(2, 3, 8, 8) * 2 - 1)[0]
    assert torch.equal(plain, cond)
    clock.check(record_property)


@pytest.mark.criterion(6, "noise stitching")
def test_noise_stitching(record_property):
    clock = Clock(30)
    z = gaussian_noise((100_000,), 8, torch.float64)
    assert torch.equal(stitch_noise(z, 1.0, 9), z)
    assert torch.equal(stitch_noise(z, 0.0, 9), gaussian_noise(z.shape, 9, torch.float64))
    plain = float(stitch_noise(z, 0.5, 9).var())
    renorm = float(stitch_noise(z, 0.5, 9, renormalize=True).var())
    record_property("var_plain", f"{plain:.4f}")
    record_property("var_renormalized", f"{renorm:.4f}")
    assert abs(plain - 0.5) < 0.02 and abs(renorm - 1.0) < 0.02
    clock.check(record_property)


CONTROL_TRAIN = TrainConfig(steps=1000, batch_size=16, lr=5e-4, T=50, lambda_cdr=1.0, seed=0,
                            model=DenoiserConfig(base_channels=16))


@pytest.mark.criterion(7, "toy controllability")
def test_toy_controllability(record_property):
    clock = Clock(30 * 60)
    palette = toy_palette()
    corpus = make_corpus(200, 1, palette)
    ckpt, history = train_t2l(corpus, palette, CONTROL_TRAIN)
    losses = [h["l_ldm"] for h in history]
    window = max(len(losses) // 10, 1)
    first, last = float(np.mean(losses[:window])), float(np.mean(losses[-window:]))

    held_out = make_corpus(50, 999, palette)
    requested = [compute_class_ratios(y, palette) for y in held_out]
    realized = realized_ratios(ckpt, requested, seed=5)
    a = [r.as_dict().get(n, 0.0) for r in requested for n in palette.names]
    b = [r.as_dict().get(n, 0.0) for r in realized for n in palette.names]
    rho = float(spearmanr(a, b)[0])
    record_property("spearman", f"{rho:.3f}")
    record_property("l_ldm_first_window", f"{first:.4f}")
    record_property("l_ldm_final_window", f"{last:.4f}")
    clock.check(record_property)
    assert last < first
    assert rho >= 0.8


TINY = ["--steps", "2", "--batch-size", "2", "--T", "4", "--base-channels", "8", "--depth", "2",
        "--attention-resolutions", "16,8", "--text-dim", "16"]


@pytest.mark.criterion(8, "pipeline determinism")
def test_pipeline_determinism(tmp_path, record_property):
    root = tmp_path
    assert cli.main(["make-corpus", "--out", str(root / "corpus"), "--n", "3", "--size", "16"]) == 0
    for kind in ("t2l", "l2i"):
        assert cli.main([f"train-{kind}", "--corpus", str(root / "corpus"), "--out", str(root / kind), *TINY]) == 0
    config = root / "generate.txt"
    config.write_text("\n".join([
        f"t2l = {root / 't2l' / 't2l.ckpt'}", f"l2i = {root / 'l2i' / 'l2i.ckpt'}",
        f"sparse = {root / 'corpus' / 'sparse'}", "horizon = 2", "candidates = 2", "sampler = deterministic",
        "session_seed = 11", "event_seed = 12"]) + "\n")
    for run in ("a", "b"):
        assert cli.main(["generate", "--config", str(config), "--out", str(root / run)]) == 0
    files = sorted(p.relative_to(root / "a") for p in (root / "a").rglob("*")
                   if p.is_file() and p.suffix in (".txt", ".png") and p.name != "config.txt")
    record_property("files_compared", len(files))
    assert any(f.name == "manifest.txt" for f in files)
    for rel in files:
        assert (root / "a" / rel).read_bytes() == (root / "b" / rel).read_bytes(), str(rel)


@pytest.mark.criterion(9, "metrics oracle")
def test_metrics_oracle(record_property):
    clock = Clock(10)
    g1 = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 1, 1, 0], [1, 1, 0, 0]])
    g2 = np.array([[0, 1, 1, 1], [1, 1, 0, 1], [0, 1, 0, 0], [1, 0, 0, 1]])
    p1 = np.array([[0, 0, 1, 1], [0, 0, 1, 0], [0, 1, 1, 0], [1, 1, 0, 1]])
    p2 = np.array([[0, 1, 1, 0], [1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 1]])
    c3 = (np.array([[0, 1, 2, 2]] * 4), np.array([[2, 1, 0, 2]] * 4))
    c3p = (np.array([[0, 1, 2, 1]] * 4), np.array([[2, 2, 0, 2]] * 4))
    zeros = np.zeros((4, 4), int)
    cases = {
        "hand_c2": ([((g1, g2), (p1, p2))], 2),
        "hand_c3": ([(c3, c3p)], 3),
        "perfect": ([((g1, g2), (g1, g2))], 2),
        "no_change": ([((zeros, zeros), (zeros, zeros))], 2),
        "two_pairs": ([((g1, g2), (p1, p2)), ((g2, g1), (p2, p2))], 2),
    }
    results = {}
    for name, (samples, C) in cases.items():
        conf = SCDConfusion(C)
        for gt, pred in samples:
            conf = accumulate(conf, gt, pred)
        got, want = score(conf), rescore(samples, C)
        for metric, (value, flag) in want.items():
            assert got[metric][1] == flag, (name, metric)
            assert math.isclose(got[metric][0], value, rel_tol=0, abs_tol=1e-12), (name, metric)
        results[name] = got
    perfect = results["perfect"]
    assert perfect["OA"] == (1.0, "ok") and perfect["SeK"][0] == perfect["Kappa_scd"][0]
    flat = results["no_change"]
    assert flat["OA"] == (1.0, "ok")
    for metric in ("Precision_bin", "Recall_bin", "F1_bin", "IoU_bin", "F_scd", "SeK"):
        assert flat[metric][1] == "degenerate", metric
    clock.check(record_property)
