"""Command-line entry point.

Every subcommand reads settings from defaults, then an optional ``key = value``
file (``--config``), then ``--key`` flags, validates all of them before doing
any work, and writes the resolved settings to ``config.txt`` in its output
directory.  Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import multiprocessing
import os
import sys
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .codec import (
    compute_class_ratios,
    layout_to_colormap,
    load_colormap,
    load_layout,
    load_palette,
    save_palette,
)
from .errors import AlignmentError, ChangeDiffError, ConfigError, EventInapplicableError
from .metrics import SCDConfusion, accumulate, format_report, score
from .model import DenoiserConfig
from .pipeline import (
    Checkpoint,
    GenerationSession,
    TrainConfig,
    complete_layout,
    emit_dataset,
    read_manifest,
    simulate_events,
    synthesize_images,
    train_l2i,
    train_t2l,
)
from .prompts import EVENT_MODES, EventSpec, amplify_ratios, apply_event, build_prompt, parse_prompt
from .seeds import derive_seed, rng as make_rng

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- settings ------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(" ", "").split(",") if v)


def _optional_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    rule: str
    check: Callable[[Any], bool] = lambda v: True

    def render(self, value) -> str:
        if value is None:
            return "auto"
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return str(value)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_open(v):
    return v is None or 0 < v < 1


def _path(v):
    return isinstance(v, str)


_MODEL_KEYS = [
    Key("base_channels", int, 16, "integer >= 1, divisible by heads", _positive),
    Key("depth", int, 3, "integer >= 1; image side divisible by 2^(depth-1)", _positive),
    Key("attention_resolutions", _int_list, (16, 8), "comma list of feature-map sides produced by depth",
        lambda v: len(v) > 0),
    Key("heads", int, 2, "integer >= 1", _positive),
    Key("text_dim", int, 64, "integer >= 1", _positive),
    Key("phrase_mixing", _bool, True, "true|false"),
    Key("pooled_text", _bool, True, "true|false; add the mean prompt embedding to the timestep embedding"),
]

_TRAIN_KEYS = [
    Key("corpus", str, "", "directory with layouts/ (and images/ for train-l2i); required", bool),
    Key("palette", str, "", "palette file; empty means <corpus>/palette.txt", _path),
    Key("out", str, "", "output directory; required", bool),
    Key("steps", int, 1000, "integer >= 1", _positive),
    Key("batch_size", int, 16, "integer >= 1", _positive),
    Key("lr", float, 5e-4, "real > 0", _positive),
    Key("T", int, 50, "integer >= 1", _positive),
    Key("beta_start", _optional_float, None, "real in (0, 1) or auto (1e-4 scaled by 1000/T)", _unit_open),
    Key("beta_end", _optional_float, None, "real in (0, 1) or auto (0.02 scaled by 1000/T)", _unit_open),
    Key("lambda_cdr", float, 1.0, "real >= 0", _nonneg),
    Key("tau", float, 0.5, "real in [0, 1]", lambda v: 0 <= v <= 1),
    Key("temperature", float, 0.05, "real > 0", _positive),
    Key("ratio_weight", float, 1.0, "real >= 0", _nonneg),
    Key("spatial_weight", float, 1.0, "real >= 0", _nonneg),
    Key("cdr_masked", _bool, True, "true|false"),
    Key("supervise_max_size", int, 32, "integer >= 1; largest attention map side given CDR supervision", _positive),
    Key("corpus_seed", int, 0, "integer >= 0; drives batch shuffling, prompt order and noise", _nonneg),
    Key("log_every", int, 10, "integer >= 1", _positive),
    Key("checkpoint_every", int, 0, "integer >= 0 (0 saves only at the end)", _nonneg),
    Key("augment", _bool, True, "true|false; random rotations and flips"),
    Key("cosine_lr", _bool, True, "true|false; anneal the learning rate to zero"),
] + _MODEL_KEYS

_L2I_KEYS = [k if k.name != "lambda_cdr" else Key("lambda_cdr", float, 0.0, "real >= 0", _nonneg)
             for k in _TRAIN_KEYS]

_GENERATE_KEYS = [
    Key("t2l", str, "", "text-to-layout checkpoint; required", bool),
    Key("l2i", str, "", "layout-to-image checkpoint; required", bool),
    Key("sparse", str, "", "directory of sparse layout PNGs, one session each; required", bool),
    Key("out", str, "", "output directory; required", bool),
    Key("sessions", int, 0, "integer >= 0 (0 uses every sparse layout)", _nonneg),
    Key("horizon", int, 2, "integer >= 1; change steps per session", _positive),
    Key("alpha", float, 0.8, "real in [0, 1]; weight of the previous noise", lambda v: 0 <= v <= 1),
    Key("renormalize", _bool, False, "true|false; rescale stitched noise to unit variance"),
    Key("sampler", str, "deterministic", "deterministic|ancestral", lambda v: v in ("deterministic", "ancestral")),
    Key("candidates", int, 4, "integer >= 1; completion draws per session", _positive),
    Key("event_modes", _str_list, EVENT_MODES, "comma list from " + ",".join(EVENT_MODES),
        lambda v: len(v) > 0 and set(v) <= set(EVENT_MODES)),
    Key("perturbation", float, 0.1, "real in [0, 1]", lambda v: 0 <= v <= 1),
    Key("new_ratio_min", float, 0.05, "real in (0, 1)", lambda v: 0 < v < 1),
    Key("new_ratio_max", float, 0.3, "real in (0, 1), >= new_ratio_min", lambda v: 0 < v < 1),
    Key("session_seed", int, 0, "integer >= 0; drives completion and noise chains", _nonneg),
    Key("event_seed", int, 0, "integer >= 0; drives event choice and parameters", _nonneg),
    Key("workers", int, 1, "integer >= 1; parallel sessions", _positive),
]

_EVALUATE_KEYS = [
    Key("gt", str, "", "ground-truth dataset directory with manifest.txt; required", bool),
    Key("pred", str, "", "prediction directory with manifest.txt or layouts/<id>.png; required", bool),
    Key("palette", str, "", "palette file; empty means <gt>/palette.txt", _path),
    Key("out", str, "", "output directory; required", bool),
    Key("workers", int, 1, "integer >= 1; parallel pair scoring", _positive),
]

_INSPECT_KEYS = [
    Key("layout", str, "", "layout PNG; required", bool),
    Key("palette", str, "", "palette file; required", bool),
    Key("order_seed", int, -1, "integer >= -1 (-1 keeps palette order)", lambda v: v >= -1),
]

_CORPUS_KEYS = [
    Key("out", str, "", "output directory; required", bool),
    Key("n", int, 200, "integer >= 1", _positive),
    Key("size", int, 32, "integer >= 4", lambda v: v >= 4),
    Key("corpus_seed", int, 0, "integer >= 0", _nonneg),
]

COMMANDS: dict[str, tuple[str, list[Key]]] = {
    "train-t2l": ("train the text-to-layout model", _TRAIN_KEYS),
    "train-l2i": ("train the layout-to-image model with its side network", _L2I_KEYS),
    "generate": ("complete, evolve and render bi-temporal samples", _GENERATE_KEYS),
    "evaluate": ("score predicted layouts against a generated dataset", _EVALUATE_KEYS),
    "inspect-prompt": ("print the prompt for a layout and its parse", _INSPECT_KEYS),
    "make-corpus": ("write a procedural toy corpus", _CORPUS_KEYS),
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> dict[str, Any]:
    """Merge defaults < file < flags, parse and range-check every key."""
    keys = {k.name: k for k in COMMANDS[command][1]}
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, key in keys.items():
        raw = flag_values.get(name, file_values.get(name))
        if raw is None:
            value = key.default
        else:
            try:
                value = key.parse(raw)
            except ValueError as exc:
                raise UsageError(f"{name}: cannot parse {raw!r} ({key.rule})") from exc
        if not key.check(value):
            raise UsageError(f"{name}={key.render(value)} is out of range: {key.rule}")
        cfg[name] = value
    _cross_checks(command, cfg)
    return cfg


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise UsageError(f"{what} not found: {path}")


def _cross_checks(command, cfg):
    if command in ("train-t2l", "train-l2i"):
        _require_dir(cfg["corpus"], "corpus directory")
        if not cfg["palette"]:
            cfg["palette"] = os.path.join(cfg["corpus"], "palette.txt")
        _require_file(cfg["palette"], "palette file")
        if cfg["beta_start"] is not None and cfg["beta_end"] is not None and cfg["beta_start"] > cfg["beta_end"]:
            raise UsageError("beta_start must not exceed beta_end")
        files = _corpus_files(cfg["corpus"], "layouts")
        if not files:
            raise UsageError(f"no layout PNGs in {Path(cfg['corpus'], 'layouts')}")
        try:
            _model_config(cfg, command == "train-l2i", _geometry(files[0]))
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    elif command == "generate":
        if cfg["new_ratio_min"] > cfg["new_ratio_max"]:
            raise UsageError("new_ratio_min must not exceed new_ratio_max")
        _require_file(cfg["t2l"], "text-to-layout checkpoint")
        _require_file(cfg["l2i"], "layout-to-image checkpoint")
        _require_dir(cfg["sparse"], "sparse layout directory")
    elif command == "evaluate":
        _require_dir(cfg["gt"], "ground-truth directory")
        _require_dir(cfg["pred"], "prediction directory")
        if not cfg["palette"]:
            cfg["palette"] = os.path.join(cfg["gt"], "palette.txt")
        _require_file(cfg["palette"], "palette file")
    elif command == "inspect-prompt":
        _require_file(cfg["layout"], "layout file")
        _require_file(cfg["palette"], "palette file")


def write_resolved(command: str, cfg: dict, out_dir) -> None:
    keys = {k.name: k for k in COMMANDS[command][1]}
    lines = [f"# changediff {command}"] + [f"{n} = {keys[n].render(v)}" for n, v in cfg.items()]
    Path(out_dir, "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- commands --------------------------------------------------------------------

def _model_config(cfg, side_network: bool, geometry=(3, 32, 32)) -> DenoiserConfig:
    return DenoiserConfig(base_channels=cfg["base_channels"], depth=cfg["depth"],
                          attention_resolutions=cfg["attention_resolutions"], heads=cfg["heads"],
                          text_dim=cfg["text_dim"], latent_geometry=geometry,
                          side_network=side_network, phrase_mixing=cfg["phrase_mixing"],
                          pooled_text=cfg["pooled_text"])


def _train_config(cfg, side_network, geometry) -> TrainConfig:
    return TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], T=cfg["T"],
        beta_start=cfg["beta_start"], beta_end=cfg["beta_end"], lambda_cdr=cfg["lambda_cdr"], tau=cfg["tau"],
        temperature=cfg["temperature"], ratio_weight=cfg["ratio_weight"], spatial_weight=cfg["spatial_weight"],
        cdr_masked=cfg["cdr_masked"], supervise_max_size=cfg["supervise_max_size"], seed=cfg["corpus_seed"],
        log_every=cfg["log_every"], checkpoint_every=cfg["checkpoint_every"], augment=cfg["augment"],
        cosine_lr=cfg["cosine_lr"], model=_model_config(cfg, side_network, geometry))


def _corpus_files(corpus, sub):
    folder = Path(corpus, sub)
    return sorted(folder.glob("*.png")) if folder.is_dir() else []


def _geometry(layout_path):
    return (3, *load_layout(layout_path).shape)


def _run_training(cfg, kind: str):
    from .plotting import plot_loss_curves

    palette = load_palette(cfg["palette"])
    files = _corpus_files(cfg["corpus"], "layouts")
    layouts = [load_layout(f) for f in files]
    geometry = (3, *layouts[0].shape)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(f"train-{kind}", cfg, out)
    log_path = out / "train.log"
    log_path.write_text("", encoding="utf-8")
    ckpt_path = out / f"{kind}.ckpt"
    tcfg = _train_config(cfg, kind == "l2i", geometry)
    if kind == "t2l":
        _, history = train_t2l(layouts, palette, tcfg, ckpt_path, log_path)
    else:
        images = []
        for f in files:
            img = Path(cfg["corpus"], "images", f.name)
            if not img.is_file():
                raise ChangeDiffError(f"image missing for layout {f.name}: {img}")
            images.append(load_colormap(img))
        _, history = train_l2i(list(zip(layouts, images)), palette, tcfg, ckpt_path, log_path)
    plot_loss_curves(history, out / "loss.png")
    last = history[-1]
    print(f"final step={last['step']} l_ldm={last['l_ldm']!r} l_rat={last['l_rat']!r} l_spa={last['l_spa']!r}")
    print(f"checkpoint {ckpt_path}")
    return ckpt_path


def _applicable(mode, dist, palette) -> bool:
    if mode == "class_expand":
        return len(dist) < len(palette.names)
    if mode == "class_reduce":
        return len(dist) >= 2
    return True


def plan_events(dist, palette, cfg, session_id: str) -> list[EventSpec]:
    """Choose one applicable event per step, seeded by the event stream."""
    specs = []
    for k in range(1, cfg["horizon"] + 1):
        modes = [m for m in cfg["event_modes"] if _applicable(m, dist, palette)]
        if not modes:
            raise EventInapplicableError(",".join(cfg["event_modes"]), "no configured event applies", step=k)
        mode = modes[int(make_rng(cfg["event_seed"], session_id, k, "mode").integers(len(modes)))]
        spec = EventSpec(mode, cfg["perturbation"], (cfg["new_ratio_min"], cfg["new_ratio_max"]),
                         derive_seed(cfg["event_seed"], session_id, k))
        dist = apply_event(dist, spec, palette)
        specs.append(spec)
    return specs


_LOADED: dict[str, Checkpoint] = {}


def _checkpoint(path) -> Checkpoint:
    if path not in _LOADED:
        _LOADED[path] = Checkpoint.load(path)
    return _LOADED[path]


def _stage(name, session_id, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ChangeDiffError, ValueError) as exc:
        raise ChangeDiffError(f"{name} [{session_id}]: {exc}") from exc


def generate_session(cfg: dict, sparse_path: str):
    session_id = Path(sparse_path).stem
    t2l, l2i = _checkpoint(cfg["t2l"]), _checkpoint(cfg["l2i"])
    palette = t2l.palette
    sparse = load_layout(sparse_path)
    ref_map, prompt, noise_seed = _stage(
        "complete_layout", session_id, complete_layout, sparse, palette, t2l, cfg["candidates"],
        derive_seed(cfg["session_seed"], session_id), cfg["sampler"])
    session = GenerationSession(session_id, prompt, noise_seed, ref_map, cfg["alpha"], cfg["horizon"],
                                cfg["renormalize"], cfg["sampler"])
    dist0 = amplify_ratios(parse_prompt(prompt.text, palette))
    specs = _stage("plan_events", session_id, plan_events, dist0, palette, cfg, session_id)
    steps = _stage("simulate_events", session_id, simulate_events, session, specs, t2l, palette)
    seq = [(ref_map, prompt)] + [(s.colormap, s.prompt) for s in steps]
    return _stage("synthesize_images", session_id, synthesize_images, seq, l2i, session, [None] + specs)


def _cmd_generate(cfg):
    from .plotting import plot_sequences

    out = Path(cfg["out"])
    t2l = _checkpoint(cfg["t2l"])
    if _checkpoint(cfg["l2i"]).palette != t2l.palette:
        raise ChangeDiffError("the two checkpoints were trained with different palettes")
    files = [str(p) for p in _corpus_files(cfg["sparse"], "")]
    if cfg["sessions"]:
        files = files[:cfg["sessions"]]
    if not files:
        raise ChangeDiffError(f"no sparse layouts found in {cfg['sparse']}")
    if cfg["workers"] > 1 and len(files) > 1:
        ctx = multiprocessing.get_context("spawn")
        with cf.ProcessPoolExecutor(cfg["workers"], mp_context=ctx) as pool:
            per_session = list(pool.map(generate_session, [cfg] * len(files), files))
    else:
        per_session = [generate_session(cfg, f) for f in files]
    samples = [s for seq in per_session for s in seq]
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("generate", cfg, out)
    save_palette(t2l.palette, out / "palette.txt")
    manifest = emit_dataset(samples, out)
    plot_sequences([[(layout_to_colormap(s.layout, t2l.palette), s.image) for s in seq] for seq in per_session],
                   out / "preview.png")
    print(f"manifest {manifest} samples={len(samples)}")
    return manifest


def _pred_index(pred_dir) -> dict[str, str]:
    manifest = Path(pred_dir, "manifest.txt")
    if manifest.is_file():
        return {r.sample_id: r.layout for r in read_manifest(manifest)}
    return {p.stem: f"layouts/{p.name}" for p in _corpus_files(pred_dir, "layouts")}


def align_pairs(gt_dir, pred_dir):
    """Return ``[(gt t0, gt tk, pred t0, pred tk)]`` relative paths, one per change step."""
    gt_records = read_manifest(Path(gt_dir, "manifest.txt"))
    pred = _pred_index(pred_dir)
    gt_ids = {r.sample_id for r in gt_records}
    common = gt_ids & set(pred)
    if not common:
        raise AlignmentError("no sample ids shared between ground truth and prediction")
    missing, extra = sorted(gt_ids - set(pred)), sorted(set(pred) - gt_ids)
    if missing or extra:
        def show(ids):
            return ", ".join(ids[:10]) + (f" (+{len(ids) - 10} more)" if len(ids) > 10 else "")
        parts = ([f"missing from prediction: {show(missing)}"] if missing else []) + \
                ([f"not in ground truth: {show(extra)}"] if extra else [])
        raise AlignmentError("; ".join(parts))
    sessions = defaultdict(list)
    for r in gt_records:
        sessions[r.session_id].append(r)
    pairs = []
    for sid in sorted(sessions):
        recs = sorted(sessions[sid], key=lambda r: r.time_index)
        first = recs[0]
        for r in recs[1:]:
            pairs.append((Path(gt_dir, first.layout), Path(gt_dir, r.layout),
                          Path(pred_dir, pred[first.sample_id]), Path(pred_dir, pred[r.sample_id])))
    if not pairs:
        raise AlignmentError("ground truth holds no change steps to pair")
    return pairs


def _class_indices(layout, palette):
    lut = np.full(256, -1, dtype=np.int64)
    for i, cid in enumerate(palette.class_ids):
        lut[cid] = i
    idx = lut[np.asarray(layout, dtype=np.int64)]
    return np.where(idx < 0, 0, idx), idx >= 0


def score_pair(paths, palette) -> SCDConfusion:
    (g0, g0_ok), (g1, g1_ok), (p0, p0_ok), (p1, p1_ok) = (_class_indices(load_layout(p), palette) for p in paths)
    valid = g0_ok & g1_ok & p0_ok & p1_ok
    return accumulate(SCDConfusion(len(palette.class_ids)), (g0, g1), (p0, p1), valid)


def _cmd_evaluate(cfg):
    from .plotting import plot_confusion, plot_metrics

    palette = load_palette(cfg["palette"])
    pairs = align_pairs(cfg["gt"], cfg["pred"])
    with cf.ThreadPoolExecutor(cfg["workers"]) as pool:
        parts = list(pool.map(lambda p: score_pair(p, palette), pairs))
    conf = SCDConfusion(len(palette.class_ids))
    for c in parts:
        conf = conf + c
    metrics = score(conf)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved("evaluate", cfg, out)
    report = out / "report.txt"
    report.write_text(format_report(metrics), encoding="utf-8")
    plot_confusion(conf, palette.names, out / "confusion.png")
    plot_metrics(metrics, out / "metrics.png")
    sys.stdout.write(format_report(metrics))
    print(f"report {report} pairs={len(pairs)}")
    return report


def _cmd_inspect(cfg):
    palette = load_palette(cfg["palette"])
    dist = compute_class_ratios(load_layout(cfg["layout"]), palette)
    prompt = build_prompt(dist, None if cfg["order_seed"] < 0 else cfg["order_seed"])
    parsed = parse_prompt(prompt.text, palette)
    print(f"prompt {prompt.text}")
    for span in prompt.spans:
        print(f"phrase name={span.class_name!r} name_tokens={span.name_tokens[0]}:{span.name_tokens[1]} "
              f"ratio_tokens={span.ratio_tokens[0]}:{span.ratio_tokens[1]}")
    requested = dist.as_dict()
    worst = max(abs(r - requested[n]) for n, r in parsed.as_dict().items()) if len(parsed) else 0.0
    same = sorted(parsed.names) == sorted(requested)
    print(f"round_trip={'ok' if same and worst <= 0.01 + 1e-9 else 'mismatch'} max_rounding={worst:.4f}")
    return prompt


def _cmd_corpus(cfg):
    from .toy import write_corpus

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out, cfg["n"], cfg["corpus_seed"], cfg["size"])
    write_resolved("make-corpus", cfg, out)
    print(f"corpus {out} layouts={cfg['n']}")
    return out


RUNNERS = {
    "train-t2l": lambda cfg: _run_training(cfg, "t2l"),
    "train-l2i": lambda cfg: _run_training(cfg, "l2i"),
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "inspect-prompt": _cmd_inspect,
    "make-corpus": _cmd_corpus,
}


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="changediff", description="Bi-temporal change data synthesis with ratio-controlled layouts.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (summary, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary,
                           epilog="Every key is also accepted in the --config file as 'key = value'.")
        p.add_argument("--config", metavar="PATH", help="line-oriented 'key = value' settings file")
        for key in keys:
            p.add_argument(f"--{key.name.replace('_', '-')}", dest=key.name, metavar="V",
                           help=f"{key.rule} (default: {key.render(key.default) or 'empty'})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
    except UsageError as exc:
        print(f"changediff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        RUNNERS[args.command](cfg)
    except (ChangeDiffError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"changediff {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
