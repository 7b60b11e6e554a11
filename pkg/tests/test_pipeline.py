import numpy as np
import pytest
import torch

from changediff.codec import compute_class_ratios, colormap_to_layout, load_colormap, load_layout
from changediff.diffusion import gaussian_noise
from changediff.errors import DataError, EventInapplicableError, ManifestConflictError, ModeError
from changediff.model import DenoiserConfig
from changediff.pipeline import (
    MANIFEST_HEADER,
    Checkpoint,
    GenerationSession,
    SyntheticSample,
    TrainConfig,
    complete_layout,
    emit_dataset,
    l1_distance,
    parse_log,
    read_manifest,
    sample_colormaps,
    select_candidate,
    simulate_events,
    stitch_noise,
    synthesize_images,
    train_l2i,
    train_t2l,
)
from changediff.prompts import EventSpec, build_prompt, parse_prompt
from changediff.seeds import rng as make_rng
from changediff.toy import make_corpus, render_image, sparsify, toy_palette

PAL = toy_palette()
TINY = dict(base_channels=8, depth=2, attention_resolutions=(16, 8), heads=2, text_dim=16, latent_geometry=(3, 16, 16))


def tiny_cfg(**kw):
    base = dict(steps=3, batch_size=4, T=5, log_every=1, model=DenoiserConfig(**TINY))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(6, 11, PAL, size=16)


@pytest.fixture(scope="module")
def t2l(corpus):
    return train_t2l(corpus, PAL, tiny_cfg())[0]


@pytest.fixture(scope="module")
def l2i(corpus):
    pairs = [(y, render_image(y, PAL, make_rng(1, i))) for i, y in enumerate(corpus)]
    return train_l2i(pairs, PAL, tiny_cfg(lambda_cdr=0.0))[0]


# --- noise stitching -------------------------------------------------------------

def test_stitch_limits_are_exact():
    z = gaussian_noise((1, 3, 8, 8), 1)
    assert torch.equal(stitch_noise(z, 1.0, 99), z)
    assert torch.equal(stitch_noise(z, 0.0, 99), gaussian_noise(z.shape, 99))
    assert torch.equal(stitch_noise(z, 0.0, 99, renormalize=True), gaussian_noise(z.shape, 99))


def test_stitch_variance():
    z = gaussian_noise((100_000,), 3, torch.float64)
    assert abs(float(stitch_noise(z, 0.5, 4).var()) - 0.5) < 0.02
    assert abs(float(stitch_noise(z, 0.5, 4, renormalize=True).var()) - 1.0) < 0.02


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_stitch_rejects_alpha(alpha):
    with pytest.raises(ValueError):
        stitch_noise(torch.zeros(3), alpha, 0)


# --- completion --------------------------------------------------------------------

def test_select_candidate_prefers_first_on_ties():
    assert select_candidate([0.3, 0.1, 0.1, 0.2]) == 1


def test_complete_layout_picks_closest_candidate(t2l, corpus):
    sparse = sparsify(corpus[0], PAL, make_rng(0, "s"))
    cmap, prompt, seed = complete_layout(sparse, PAL, t2l, candidates=3, seed=7)
    layout = colormap_to_layout(cmap, PAL, allow_unlabeled=False)
    assert (layout != PAL.unlabeled_id).all()
    requested = parse_prompt(prompt.text, PAL)
    assert abs(requested.total - 1.0) < 0.02
    from changediff.seeds import derive_seed
    seeds = [derive_seed(7, "candidate", k) for k in range(3)]
    maps = sample_colormaps(t2l, [prompt] * 3, [gaussian_noise((1, 3, 16, 16), s) for s in seeds])
    dists = [l1_distance(requested, compute_class_ratios(colormap_to_layout(m, PAL, False), PAL), PAL) for m in maps]
    assert seed == seeds[int(np.argmin(dists))]
    assert np.array_equal(cmap, maps[int(np.argmin(dists))])
    again = complete_layout(sparse, PAL, t2l, candidates=3, seed=7)
    assert np.array_equal(again[0], cmap) and again[2] == seed


def test_complete_layout_rejects_zero_candidates(t2l, corpus):
    with pytest.raises(ValueError):
        complete_layout(corpus[0], PAL, t2l, candidates=0)


# --- events ----------------------------------------------------------------------------

def _session(t2l, corpus, **kw):
    prompt = build_prompt(compute_class_ratios(corpus[1], PAL), 3)
    return GenerationSession("s01", prompt, 1234, np.zeros((16, 16, 3), np.uint8), **kw)


def test_simulate_events_sequence(t2l, corpus):
    session = _session(t2l, corpus, horizon=2)
    specs = [EventSpec("ratio_reshape", 0.2, seed=1), EventSpec("ratio_reshape", 0.1, seed=2)]
    steps = simulate_events(session, specs, t2l, PAL)
    assert len(steps) == 2
    for step in steps:
        assert (step.layout != PAL.unlabeled_id).all()
        assert abs(step.distribution.total - 1.0) < 1e-9
    again = simulate_events(session, specs, t2l, PAL)
    assert all(np.array_equal(a.colormap, b.colormap) for a, b in zip(steps, again))


def test_frozen_noise_and_identity_event_repeat_the_frame(t2l, corpus):
    session = _session(t2l, corpus, horizon=2, alpha=1.0)
    steps = simulate_events(session, [EventSpec("ratio_reshape", 0.0)] * 2, t2l, PAL)
    assert steps[0].prompt.text == steps[1].prompt.text
    assert np.array_equal(steps[0].colormap, steps[1].colormap)


def test_event_errors_carry_the_step(t2l, corpus):
    dist = compute_class_ratios(corpus[1], PAL)
    session = GenerationSession("s", build_prompt(dist, None), 1, np.zeros((16, 16, 3), np.uint8), horizon=len(PAL.names))
    specs = [EventSpec("class_expand", seed=k) for k in range(len(PAL.names))]
    with pytest.raises(EventInapplicableError) as info:
        simulate_events(session, specs, t2l, PAL)
    assert info.value.step is not None
    with pytest.raises(ValueError):
        simulate_events(session, specs[:1], t2l, PAL)


# --- image synthesis ----------------------------------------------------------------------

def test_synthesize_images(t2l, l2i, corpus):
    session = _session(t2l, corpus, horizon=1)
    seq = [(np.asarray(c), build_prompt(compute_class_ratios(y, PAL), None))
           for c, y in ((colormap_from(corpus[2]), corpus[2]), (colormap_from(corpus[3]), corpus[3]))]
    samples = synthesize_images(seq, l2i, session)
    assert [s.sample_id for s in samples] == ["s01_t00", "s01_t01"]
    assert [s.time_index for s in samples] == [0, 1]
    assert samples[0].image.shape == (16, 16, 3) and samples[0].image.dtype == np.uint8
    assert np.array_equal(samples[1].layout, corpus[3])
    assert samples[0].frame_seed != samples[1].frame_seed
    again = synthesize_images(seq, l2i, session)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(samples, again))
    with pytest.raises(ModeError):
        synthesize_images(seq, t2l, session)


def colormap_from(layout):
    from changediff.codec import layout_to_colormap
    return layout_to_colormap(layout, PAL)


# --- dataset files ----------------------------------------------------------------------------

def _fake_samples(n, rng):
    out = []
    for i in range(n):
        layout = rng.choice(np.array(PAL.class_ids, np.uint8), size=(8, 8))
        prompt = build_prompt(compute_class_ratios(layout, PAL), i)
        event = None if i % 3 == 0 else EventSpec(("ratio_reshape", "class_expand", "class_reduce")[i % 3], 0.1 * (i % 4), seed=i)
        out.append(SyntheticSample(f"s{i // 3:03d}_t{i % 3:02d}", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8),
                                   layout, prompt, event, i % 3, f"s{i // 3:03d}", 2 ** 63 + i, i * 7, bool(i % 2)))
    return out


def test_manifest_round_trip(tmp_path):
    samples = _fake_samples(100, np.random.default_rng(0))
    path = emit_dataset(samples, tmp_path)
    records = read_manifest(path)
    assert len(records) == 100
    for s, r in zip(samples, records):
        assert r.sample_id == s.sample_id and r.time_index == s.time_index
        assert r.prompt == s.prompt.text
        assert r.event == (s.event.to_line() if s.event else "-")
        assert (r.base_seed, r.frame_seed, r.renormalize) == (s.base_seed, s.frame_seed, s.renormalize)
        assert r.session_id == s.session_id
        assert np.array_equal(load_layout(tmp_path / r.layout), s.layout)
        assert np.array_equal(load_colormap(tmp_path / r.image), s.image)
        assert (tmp_path / "prompts" / f"{s.sample_id}.txt").read_text().strip() == s.prompt.text
        if s.event:
            assert EventSpec.from_line(r.event) == s.event


def test_empty_dataset(tmp_path):
    path = emit_dataset([], tmp_path)
    assert open(path).read() == MANIFEST_HEADER + "\n"
    assert read_manifest(path) == []


def test_duplicate_ids_rejected(tmp_path):
    samples = _fake_samples(2, np.random.default_rng(1))
    samples[1].sample_id = samples[0].sample_id
    with pytest.raises(ManifestConflictError):
        emit_dataset(samples, tmp_path)
    good = emit_dataset(_fake_samples(2, np.random.default_rng(1)), tmp_path / "ok")
    lines = open(good).read().splitlines()
    (tmp_path / "dup.txt").write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(ManifestConflictError):
        read_manifest(tmp_path / "dup.txt")


def test_malformed_manifest(tmp_path):
    (tmp_path / "m.txt").write_text(MANIFEST_HEADER + "\nid=x time=0\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.txt")
    (tmp_path / "n.txt").write_text("something else\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "n.txt")


# --- training ---------------------------------------------------------------------------------

def test_training_log_and_checkpoint(corpus, tmp_path):
    ckpt_path, log_path = tmp_path / "t2l.ckpt", tmp_path / "train.log"
    ckpt, history = train_t2l(corpus, PAL, tiny_cfg(steps=4, log_every=2), ckpt_path, log_path)
    logged = parse_log(log_path)
    assert [r["step"] for r in logged] == [1, 2, 4]
    assert logged[-1] == history[-1]
    loaded = Checkpoint.load(ckpt_path)
    assert loaded.extra == {"kind": "t2l", "steps": 4}
    for k, v in ckpt.model.state_dict().items():
        assert torch.equal(v, loaded.model.state_dict()[k])


def test_training_is_reproducible(corpus):
    a = train_t2l(corpus, PAL, tiny_cfg())[1]
    b = train_t2l(corpus, PAL, tiny_cfg())[1]
    assert a == b


def test_training_reduces_denoising_loss(corpus):
    history = train_t2l(corpus, PAL, tiny_cfg(steps=120, lr=2e-3))[1]
    l = [h["l_ldm"] for h in history]
    assert np.mean(l[-20:]) < np.mean(l[:20])


def test_zero_lambda_trains_on_denoising_loss_only(corpus):
    off = train_t2l(corpus, PAL, tiny_cfg(lambda_cdr=0.0))[1]
    muted = train_t2l(corpus, PAL, tiny_cfg(ratio_weight=0.0, spatial_weight=0.0))[1]
    assert [h["l_ldm"] for h in off] == pytest.approx([h["l_ldm"] for h in muted], rel=1e-6)
    on = train_t2l(corpus, PAL, tiny_cfg())[1]
    assert [h["l_ldm"] for h in on][1:] != [h["l_ldm"] for h in off][1:]


def test_bad_corpora(corpus):
    with pytest.raises(DataError):
        train_t2l([], PAL, tiny_cfg())
    with pytest.raises(DataError):
        train_t2l([np.full((16, 16), PAL.unlabeled_id, np.uint8)], PAL, tiny_cfg())
    with pytest.raises(DataError):
        train_l2i([], PAL, tiny_cfg())
    with pytest.raises(DataError):
        train_l2i([(corpus[0], np.zeros((8, 8, 3), np.uint8))], PAL, tiny_cfg())
