"""Command-line pipeline: synth -> dataset -> train -> locate -> eval -> attack.

Every stage reads the run configuration (TOML layered over a preset), works
inside one output directory and writes a JSON summary stamped with the
config digest and the tool version.  Exit codes: 0 success, 1 a metric
missed its configured threshold, 2 usage / configuration / artifact error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import cpa
from .dataset import DatasetSpec, InsufficientData, build_dataset, load_dataset, save_dataset
from .locator import (align, classify_series, hits, match_plaintexts, median_filter, resolve_threshold,
                      rising_edges, threshold, to_start_list)
from .model import ModelConfig, ModelFormatError, confusion_matrix, load_model, save_model, train
from .synth import (SynthConfig, default_preamble, gen_cipher_traces, gen_noise_trace, gen_session,
                    make_profile)
from .trace import (GroundTruth, Trace, TraceFormatError, TraceMeta, ensure_dir, read_block, read_trace,
                    write_block, write_trace)

log = logging.getLogger("colocate")

EXIT_OK, EXIT_METRIC, EXIT_USAGE = 0, 1, 2
ARTIFACT_VERSION = 1
PURE_NOISE = "pure-noise"


class UsageError(Exception):
    """Bad invocation, configuration or upstream artifact (exit code 2)."""


# -- layout and helpers ---------------------------------------------------------------


class Layout:
    """File names inside the output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.synth = self.root / "synth"
        self.synth_manifest = self.synth / "manifest.json"
        self.noise = self.synth / "noise.sctr"
        self.cipher = self.synth / "cipher"
        self.sessions = self.synth / "sessions"
        self.dataset = self.root / "dataset"
        self.model = self.root / "model.scnn"
        self.locate = self.root / "locate"
        self.attack = self.root / "attack"

    def session(self, name: str) -> Path:
        return self.sessions / f"{name}.sctr"

    def summary(self, stage: str) -> Path:
        return self.root / f"{stage}_summary.json"

    def rel(self, path) -> str:
        return Path(path).relative_to(self.root).as_posix()


def derive_seed(seed: int, tag: str, *counters: int) -> int:
    """Independent 63-bit seed for one artifact of a run."""
    ss = np.random.SeedSequence([seed, zlib.crc32(tag.encode()), *counters])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def profile_of(cfg: cfgmod.RunConfig):
    s = cfg.synth
    return make_profile(s.profile, s.scale, s.samples_per_instr, s.leak_span, s.data_fraction, s.prologue_frac)


def synth_config(cfg: cfgmod.RunConfig, seed: int, **kw) -> SynthConfig:
    s = cfg.synth
    return SynthConfig(profile_of(cfg), rd_max=kw.pop("rd_max", s.rd_max), samples_per_instr=s.samples_per_instr,
                       alpha=s.alpha, beta=s.beta, sigma=s.sigma, seed=seed,
                       noise_len_range=tuple(s.noise_len_range), **kw)


def cipher_generator(cfg: cfgmod.RunConfig) -> SynthConfig:
    nop = default_preamble(cfg.dataset.n_train, cfg.synth.samples_per_instr)
    return synth_config(cfg, derive_seed(cfg.synth.seed, "cipher"), nop_preamble_instr=nop)


def synth_digest(cfg: cfgmod.RunConfig) -> str:
    """Digest of everything the synthetic traces depend on."""
    doc = {"synth": asdict(cfg.synth), "n_train": cfg.dataset.n_train}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def session_specs(cfg: cfgmod.RunConfig) -> list[dict]:
    out = []
    for i, sess in enumerate(cfg.synth.sessions):
        out.append({"name": str(sess["name"]), "num_cos": int(sess["num_cos"]),
                    "noise_mix": float(sess.get("noise_mix", 0.0)),
                    "rd_max": int(sess.get("rd_max", cfg.synth.rd_max)),
                    "seed": derive_seed(cfg.synth.seed, "session", i)})
    names = [s["name"] for s in out]
    if len(set(names)) != len(names) or PURE_NOISE in names:
        raise UsageError(f"session names must be unique and differ from {PURE_NOISE!r}")
    return out


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, bytes):
        return obj.hex()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"missing artifact {path}; run the upstream stage first") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def stamp(cfg: cfgmod.RunConfig, command: str, **fields) -> dict:
    return {"command": command, "version": __version__, "config_digest": cfg.digest(),
            "preset": cfg.preset, **fields}


def _load_trace(path) -> Trace:
    try:
        return read_trace(path)
    except FileNotFoundError:
        raise UsageError(f"missing artifact {path}; run the upstream stage first") from None
    except TraceFormatError as exc:
        raise UsageError(str(exc)) from None


def _load_model(layout: Layout):
    try:
        return load_model(layout.model)
    except FileNotFoundError:
        raise UsageError(f"missing artifact {layout.model}; run train first") from None
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from None


def _check_synth(cfg, layout: Layout) -> dict:
    manifest = read_json(layout.synth_manifest)
    if manifest.get("artifact_version") != ARTIFACT_VERSION:
        raise UsageError(f"{layout.synth_manifest}: artifact version mismatch")
    if manifest.get("synth_digest") != synth_digest(cfg):
        raise UsageError("synthetic traces were produced by a different configuration; rerun synth")
    return manifest


# -- stages ------------------------------------------------------------------------------


def cmd_synth(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    ensure_dir(layout.synth)
    ensure_dir(layout.cipher)
    ensure_dir(layout.sessions)
    s = cfg.synth
    prof = profile_of(cfg)
    noise_cfg = synth_config(cfg, derive_seed(s.seed, "noise"))
    write_trace(gen_noise_trace(noise_cfg, s.noise_len_instr), layout.noise)
    gen = cipher_generator(cfg)
    cipher_files = []
    for i, tr in enumerate(gen_cipher_traces(gen, s.cipher_traces)):
        path = layout.cipher / f"cipher_{i:05d}.sctr"
        write_trace(tr, path)
        cipher_files.append(layout.rel(path))
    sessions = []
    # two training windows of idle data ahead of the first CO
    lead_in = 2 * default_preamble(cfg.dataset.n_train, s.samples_per_instr)
    for spec in session_specs(cfg):
        sc = synth_config(cfg, spec["seed"], rd_max=spec["rd_max"], num_cos=spec["num_cos"],
                          noise_mix=spec["noise_mix"], lead_in_instr=lead_in)
        tr = gen_session(sc)
        write_trace(tr, layout.session(spec["name"]))
        sessions.append({**spec, "file": layout.rel(layout.session(spec["name"])), "samples": len(tr)})
        log.info("synth: session %s, %d COs, %d samples", spec["name"], spec["num_cos"], len(tr))
    ns = gen_noise_trace(synth_config(cfg, derive_seed(s.seed, "pure-noise")), s.noise_session_instr)
    ns = Trace(ns.samples, TraceMeta(len(ns), prof.name, ns.meta.rd_max, ns.meta.seed, GroundTruth((), ())))
    write_trace(ns, layout.session(PURE_NOISE))
    manifest = {
        "artifact_version": ARTIFACT_VERSION, "synth_digest": synth_digest(cfg), "seed": s.seed,
        "profile": {"name": prof.name, "scale": s.scale, "mean_len_samples": prof.mean_len_samples,
                    "body_len_instr": prof.body_len_instr, "prologue_instr": prof.prologue_instr,
                    "leak_positions": list(prof.leak_positions), "leak_span": prof.leak_span},
        "noise": layout.rel(layout.noise),
        "cipher": {"files": cipher_files, "generator_seed": gen.seed,
                   "nop_preamble_instr": gen.nop_preamble_instr},
        "sessions": sessions,
        "lead_in_instr": lead_in,
        "pure_noise": {"file": layout.rel(layout.session(PURE_NOISE)), "samples": len(ns)},
    }
    write_json(layout.synth_manifest, manifest)
    write_json(layout.summary("synth"), stamp(cfg, "synth", manifest=layout.rel(layout.synth_manifest),
                                              sessions=[x["name"] for x in sessions]))
    return EXIT_OK


def _cipher_traces(cfg, layout: Layout, manifest: dict, limit: int):
    """Stored cipher traces first, then the same generator continued."""
    stored = manifest["cipher"]["files"]
    for name in stored[:limit]:
        yield _load_trace(layout.root / name)
    gen = cipher_generator(cfg)
    for tr in gen_cipher_traces(gen, max(limit - len(stored), 0), start_index=len(stored)):
        # match the on-disk precision of the stored traces
        yield Trace(tr.samples.astype(np.float32).astype(np.float64), tr.meta)


def cmd_dataset(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    manifest = _check_synth(cfg, layout)
    d = cfg.dataset
    noise = _load_trace(layout.root / manifest["noise"])
    spec = DatasetSpec(d.cipher_start, d.cipher_rest, d.noise)
    limit = 2 * max(d.cipher_start, 1) + 64
    try:
        ds = build_dataset(_cipher_traces(cfg, layout, manifest, limit), noise, spec, d.n_train,
                           seed=derive_seed(cfg.synth.seed, "dataset"),
                           samples_per_instr=cfg.synth.samples_per_instr)
    except InsufficientData as exc:
        raise UsageError(f"dataset: {exc}") from None
    save_dataset(ds, layout.dataset)
    write_json(layout.summary("dataset"), stamp(cfg, "dataset", directory=layout.rel(layout.dataset),
                                                **ds.manifest()))
    return EXIT_OK


def cmd_train(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    try:
        ds = load_dataset(layout.dataset)
    except FileNotFoundError:
        raise UsageError(f"missing dataset in {layout.dataset}; run dataset first") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t = cfg.train
    mc = ModelConfig(kernel_size=t.kernel_size, fc_hidden=t.fc_hidden, n_train=ds.n_train, seed=t.seed)
    t0 = time.perf_counter()
    model = train(ds, mc, epochs=t.epochs, batch=t.batch, lr=t.lr)
    log.info("train: %.1f s", time.perf_counter() - t0)
    save_model(model, layout.model)
    x, y = ds.split("test")
    cm = confusion_matrix(model, x, y)
    ok = model.val_error <= t.max_val_error
    write_json(layout.summary("train"), stamp(
        cfg, "train", model=layout.rel(layout.model),
        val_error=[h["val_error"] for h in model.history], train_loss=[h["train_loss"] for h in model.history],
        epoch_of_best=model.epoch_of_best, best_val_error=model.val_error,
        test_confusion={"counts_pred_by_true": cm["counts"], "column_pct": cm["column_pct"],
                        "accuracy": cm["accuracy"]},
        calibration=model.calibration, passed=ok))
    return EXIT_OK if ok else EXIT_METRIC


def _session_entries(layout: Layout, manifest: dict) -> list[tuple[str, Path]]:
    out = [(s["name"], layout.root / s["file"]) for s in manifest["sessions"]]
    return out + [(PURE_NOISE, layout.root / manifest["pure_noise"]["file"])]


def _seg_len(cfg, manifest) -> int:
    return cfg.locate.seg_len or int(manifest["profile"]["mean_len_samples"])


def cmd_locate(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    manifest = _check_synth(cfg, layout)
    model = _load_model(layout)
    loc = cfg.locate
    try:
        th = resolve_threshold(model, loc.th, loc.auto_quantile)
    except ValueError as exc:
        raise UsageError(f"locate.th: {exc}") from None
    seg_len = _seg_len(cfg, manifest)
    pair_tol = seg_len // 2
    out = {}
    for name, path in _session_entries(layout, manifest):
        trace = _load_trace(path)
        if loc.n_inf > len(trace):
            raise UsageError(f"locate.n_inf={loc.n_inf} exceeds the {len(trace)} samples of {path.name}")
        swc = classify_series(model, trace, loc.n_inf, loc.s, loc.score)
        raw = threshold(swc, th)
        filt = median_filter(raw, loc.k)
        edges = rising_edges(filt)
        starts = to_start_list(edges, loc.s).check_bounds(len(trace))
        d = ensure_dir(layout.locate / name)
        write_csv(d / "starts.csv", ["index", "sample"], enumerate(starts))
        write_csv(d / "swc.csv", ["origin", "score"],
                  ((int(o), repr(float(v))) for o, v in zip(swc.origins(), swc.scores)))
        write_csv(d / "square.csv", ["index", "origin", "thresholded", "filtered"],
                  ((i, i * loc.s, int(a), int(b)) for i, (a, b) in enumerate(zip(raw.values, filt.values))))
        truth = trace.meta.truth
        entry = {"predicted": len(starts), "trace": layout.rel(path)}
        if truth is not None and truth.starts:
            # pair located COs with the inputs the attacker fed the device
            pts = match_plaintexts(starts, truth.starts, truth.plaintexts, pair_tol)
            keep = [i for i, p in enumerate(pts) if p is not None]
            block = align(trace, [starts.starts[i] for i in keep], seg_len, [pts[i] for i in keep])
            meta = TraceMeta(block.segments.size, trace.meta.profile_name, trace.meta.rd_max, trace.meta.seed,
                             GroundTruth(block.starts, block.plaintexts, truth.key))
            if len(block):
                write_block(block.segments, d / "aligned.sctm", meta)
            entry.update(aligned=len(block), unpaired=len(starts) - len(keep), dropped=block.dropped)
        out[name] = entry
        log.info("locate: %s -> %d starts", name, len(starts))
    write_json(layout.summary("locate"), stamp(cfg, "locate", threshold=th, k=loc.k, n_inf=loc.n_inf,
                                               s=loc.s, seg_len=seg_len, sessions=out))
    return EXIT_OK


def _read_starts(path) -> list[int]:
    try:
        with open(path, newline="") as fh:
            return [int(row["sample"]) for row in csv.DictReader(fh)]
    except FileNotFoundError:
        raise UsageError(f"missing artifact {path}; run locate first") from None
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: malformed starts file ({exc})") from None


def cmd_eval(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    manifest = _check_synth(cfg, layout)
    tol = cfg.tol
    out, ok = {}, True
    for name, path in _session_entries(layout, manifest):
        trace = _load_trace(path)
        pred = _read_starts(layout.locate / name / "starts.csv")
        truth = trace.meta.truth.starts if trace.meta.truth is not None else ()
        res = hits(pred, truth, tol)
        out[name] = {"hits": res.percent, "matched": res.matched, "truth": res.n_truth,
                     "predicted": res.n_predicted, "false_starts": res.false_starts,
                     "mean_error": float(np.mean([p - t for t, p in res.pairs])) if res.pairs else None}
        if name == PURE_NOISE:
            ok &= res.false_starts == 0
        else:
            ok &= res.percent >= cfg.eval.min_hits
    write_json(layout.summary("eval"), stamp(cfg, "eval", tol=tol, min_hits=cfg.eval.min_hits,
                                             sessions=out, passed=bool(ok)))
    return EXIT_OK if ok else EXIT_METRIC


def _schedule_dict(res: cpa.ScheduleResult) -> dict:
    return {"counts": list(res.counts), "per_byte": list(res.per_byte), "min_cos": res.overall,
            "reached": res.reached, "ranks": [list(r) for r in res.ranks]}


def cmd_attack(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    manifest = _check_synth(cfg, layout)
    a = cfg.agg_width
    seg_len = _seg_len(cfg, manifest)
    out, ok = {}, True
    for spec in manifest["sessions"]:
        name = spec["name"]
        d = ensure_dir(layout.attack / name)
        # baseline: the session cut at a fixed stride, no localisation
        trace = _load_trace(layout.root / spec["file"])
        truth = trace.meta.truth
        raw = cpa.fixed_stride_cut(trace, seg_len, len(truth.starts))
        raw_res = cpa.min_cos_to_rank1(raw, truth.plaintexts[:len(raw)], a, truth.key, cfg.attack.schedule)
        write_csv(d / "rank_vs_count_raw.csv", ["count", "byte", "rank"],
                  ((c, b, rk) for c, ranks in zip(raw_res.counts, raw_res.ranks) for b, rk in enumerate(ranks)))
        entry = out[name] = {"raw_cut": _schedule_dict(raw_res), "true_key": bytes(truth.key).hex()}
        path = layout.locate / name / "aligned.sctm"
        if not path.exists():
            entry.update(aligned_cos=0, aligned=None, note="no located COs")
            ok = False
            continue
        try:
            segments, meta = read_block(path)
        except TraceFormatError as exc:
            raise UsageError(str(exc)) from None
        key, pts = meta.truth.key, meta.truth.plaintexts
        aligned = cpa.min_cos_to_rank1(segments, pts, a, key, cfg.attack.schedule)
        write_csv(d / "rank_vs_count.csv", ["count", "byte", "rank"],
                  ((c, b, rk) for c, ranks in zip(aligned.counts, aligned.ranks) for b, rk in enumerate(ranks)))
        if len(segments) >= 2:
            full = cpa.attack(segments, pts, a, key, keep_correlations=False)
            write_csv(d / "ranks.csv", ["byte", "guess", "score", "rank"],
                      ((r.byte, g, repr(float(r.scores[g])), int(rk))
                       for r in full.bytes for g, rk in enumerate(cpa.guess_ranks(r.scores))))
            entry["recovered_key"] = full.recovered_key.hex()
        entry.update(aligned_cos=len(segments), aligned=_schedule_dict(aligned))
        if cfg.attack.require_rank1:
            ok &= aligned.reached
        log.info("attack: %s aligned min COs %s, raw %s", name, aligned.overall, raw_res.overall)
    write_json(layout.summary("attack"), stamp(cfg, "attack", agg_width=a, seg_len=seg_len,
                                               schedule=list(cfg.attack.schedule), sessions=out, passed=bool(ok)))
    return EXIT_OK if ok else EXIT_METRIC


STAGES = {"synth": cmd_synth, "dataset": cmd_dataset, "train": cmd_train, "locate": cmd_locate,
          "eval": cmd_eval, "attack": cmd_attack}


def cmd_run_all(cfg: cfgmod.RunConfig, layout: Layout) -> int:
    """Every stage in order; a metric failure is reported but does not stop the run."""
    codes = {}
    for name, fn in STAGES.items():
        log.info("run-all: %s", name)
        codes[name] = fn(cfg, layout)
    summaries = {name: read_json(layout.summary(name)) for name in STAGES}
    worst = max(codes.values())
    write_json(layout.summary("run"), stamp(cfg, "run-all", exit_codes=codes, stages=summaries,
                                            config=cfg.to_dict()))
    return worst


# -- argument parsing ---------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=d, help="unsigned 64-bit seed for synth and training")
    p.add_argument("--out", default=d, help="output directory (default: colocate-run)")
    p.add_argument("--preset", default=d, help="named preset, e.g. aes128-scaled")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colocate", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "generate noise, cipher and session traces", "dataset": "build labelled windows",
             "train": "train the classifier", "locate": "find CO starts and align sessions",
             "eval": "hits of located starts against ground truth", "attack": "CPA on aligned COs",
             "run-all": "every stage in order", "presets": "list the preset names"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _global_flags(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "presets":
        print("\n".join(sorted(cfgmod.PRESETS)))
        return EXIT_OK
    try:
        cfg = cfgmod.load(args.config, args.preset, args.seed)
        layout = Layout(ensure_dir(args.out or "colocate-run"))
        fn = cmd_run_all if args.command == "run-all" else STAGES[args.command]
        return fn(cfg, layout)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"colocate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"colocate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
