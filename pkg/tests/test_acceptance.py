"""Acceptance criteria, one PASS/FAIL line per criterion.

The classifier, segmentation and attack criteria use two scaled AES runs,
one per random-delay setting (several minutes of training each).  Deselect with ``-m "not slow"``.
"""

import json
import time

import numpy as np
import pytest

from colocate import cli, config, cpa
from colocate.dataset import load_dataset
from colocate.locator import median_filter, rising_edges, threshold
from colocate.model import confusion_matrix, load_model
from oracles import (aggregate_naive, all_pm1, check_op, conv1d_direct, gradient_cases, median_naive,
                     pearson_naive, rising_edges_naive, threshold_naive)
from colocate import autograd as ag

# Each countermeasure setting gets a model trained on its own cipher traces.
SESSIONS = {
    4: [{"name": "rd4-clean", "num_cos": 64, "noise_mix": 0.0},
        {"name": "rd4-noisy", "num_cos": 64, "noise_mix": 0.5},
        {"name": "cpa", "num_cos": 512, "noise_mix": 0.5}],
    2: [{"name": "rd2-clean", "num_cos": 64, "noise_mix": 0.0},
        {"name": "rd2-noisy", "num_cos": 64, "noise_mix": 0.5}],
}
SCHEDULE = [32, 64, 128, 256, 384, 512]

_LINES = []


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n== acceptance summary ==")
        for line in _LINES:
            print(line)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


# -- 1, 2: numerical core ---------------------------------------------------------------


def test_criterion_1_gradient_suite(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    cases = [c for _ in range(2) for c in gradient_cases(rng, per_op=1)]
    errors = {name: check_op(build, inputs, rng) for name, build, inputs in cases}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = len(errors) >= 20 and errors[worst] <= 1e-4 and elapsed < 60
    report(1, "gradient checks", ok,
           f"{len(errors)} shapes, worst {worst} rel err {errors[worst]:.1e}, {elapsed:.1f} s")
    assert ok


def _oracle_mismatches():
    bad = []
    rng = np.random.default_rng(7)
    for _ in range(200):
        b, c, co = (int(v) for v in rng.integers(1, 4, 3))
        n = int(rng.integers(1, 40))
        k = int(rng.integers(1, 12))
        x, w, bias = rng.standard_normal((b, c, n)), rng.standard_normal((co, c, k)), rng.standard_normal(co)
        got = ag.conv1d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(bias)).data
        if np.abs(got - conv1d_direct(x, w, bias)).max() > 1e-10:
            bad.append(f"conv1d {x.shape} k={k}")
    for seq in all_pm1(12):
        v = np.array(seq)
        for th in (-1.0, 0.0, 1.0):
            if threshold(v, th).values.tolist() != threshold_naive(seq, th):
                bad.append(f"threshold {seq} {th}")
        if rising_edges(v) != rising_edges_naive(seq):
            bad.append(f"rising_edges {seq}")
        for k in (1, 3, 5, 7, 9, 11):
            if median_filter(v, k).values.tolist() != median_naive(seq, k):
                bad.append(f"median_filter {seq} k={k}")
    for _ in range(1000):
        n = int(rng.integers(2, 64))
        x, y = rng.standard_normal(n) * rng.uniform(0.1, 10), rng.standard_normal(n) + rng.uniform(-5, 5)
        if abs(cpa.pearson(x, y) - pearson_naive(x.tolist(), y.tolist())) > 1e-10:
            bad.append(f"pearson n={n}")
        rows = rng.standard_normal((int(rng.integers(1, 4)), n))
        a = int(rng.integers(1, n + 1))
        if np.abs(cpa.aggregate(rows, a) - aggregate_naive(rows.tolist(), a)).max() > 1e-10:
            bad.append(f"aggregate n={n} a={a}")
    return bad


def test_criterion_2_oracle_equivalence(report):
    bad = _oracle_mismatches()
    ok = not bad
    report(2, "oracle equivalence", ok,
           "conv1d 200 shapes, +-1 sequences up to length 12, 1000 pearson/aggregate vectors"
           + ("" if ok else f"; first mismatch: {bad[0]}"))
    assert ok


# -- 3..6: the scaled AES run -------------------------------------------------------------


def _scaled_run(root, rd_max):
    cfg = config.from_dict({"synth": {"rd_max": rd_max, "sessions": SESSIONS[rd_max]},
                            "attack": {"schedule": SCHEDULE}}, preset="aes128-scaled")
    config.set_seed(cfg, 1)
    layout = cli.Layout(root)
    assert cli.cmd_synth(cfg, layout) == 0
    assert cli.cmd_dataset(cfg, layout) == 0
    t0 = time.perf_counter()
    cli.cmd_train(cfg, layout)
    train_seconds = time.perf_counter() - t0
    assert cli.cmd_locate(cfg, layout) == 0
    cli.cmd_eval(cfg, layout)
    return cfg, layout, train_seconds


@pytest.fixture(scope="module")
def scaled(tmp_path_factory):
    cfg, layout, seconds = _scaled_run(tmp_path_factory.mktemp("rd4"), 4)
    cli.cmd_attack(cfg, layout)
    return cfg, layout, seconds


@pytest.fixture(scope="module")
def scaled_rd2(tmp_path_factory):
    return _scaled_run(tmp_path_factory.mktemp("rd2"), 2)


def _summary(layout, stage):
    return json.loads(layout.summary(stage).read_text())


@pytest.mark.slow
def test_criterion_3_classifier_quality(scaled, report):
    cfg, layout, seconds = scaled
    doc = _summary(layout, "train")["test_confusion"]
    diag = np.diag(np.array(doc["column_pct"]))
    ok = doc["accuracy"] >= 0.95 and diag.min() >= 95.0 and seconds <= 600
    report(3, "classifier quality", ok,
           f"N_train={cfg.dataset.n_train}, accuracy {100 * doc['accuracy']:.2f}%, "
           f"diagonal c0 {diag[0]:.2f}% c1 {diag[1]:.2f}%, training {seconds:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_4_segmentation_hits(scaled, scaled_rd2, report):
    hits, false_starts, tols = {}, 0, set()
    for rd_max, (_, layout, _) in ((4, scaled), (2, scaled_rd2)):
        doc = _summary(layout, "eval")
        tols.add(doc["tol"])
        for sess in SESSIONS[rd_max]:
            if sess["num_cos"] == 64:
                hits[sess["name"]] = doc["sessions"][sess["name"]]["hits"]
        false_starts += doc["sessions"][cli.PURE_NOISE]["false_starts"]
    ok = len(hits) == 4 and all(h == 100.0 for h in hits.values()) and false_starts == 0
    detail = ", ".join(f"{k} {v:.1f}%" for k, v in hits.items())
    report(4, "segmentation hits", ok, f"tol={sorted(tols)}: {detail}; pure-noise false starts {false_starts}")
    assert ok


@pytest.mark.slow
def test_criterion_5_cpa_aligned_vs_raw(scaled, report):
    cfg, layout, _ = scaled
    res = _summary(layout, "attack")["sessions"]["cpa"]
    aligned, raw = res["aligned"], res["raw_cut"]
    reached = aligned is not None and aligned["reached"] and aligned["min_cos"] <= 2000
    count = aligned["min_cos"] if reached else raw["counts"][-1]
    raw_ranks = raw["ranks"][raw["counts"].index(count)]
    raw_failed = sum(r != 1 for r in raw_ranks)
    ok = reached and raw_failed >= 8
    report(5, "CPA after alignment", ok,
           f"aligned rank 1 on all bytes at {aligned['min_cos'] if aligned else None} COs "
           f"(A={cfg.agg_width}); raw cut misses {raw_failed}/16 bytes at {count} COs")
    assert ok


@pytest.mark.slow
def test_criterion_6_shorter_inference_window(scaled, report):
    cfg, layout, _ = scaled
    model = load_model(layout.model)
    x, y = load_dataset(layout.dataset).split("test")
    n = int(round(0.9 * cfg.dataset.n_train))
    full = confusion_matrix(model, x, y)["accuracy"]
    short = confusion_matrix(model, x[:, :n], y)["accuracy"]
    drop = 100 * (full - short)
    ok = drop <= 5.0
    report(6, "0.9 N_train windows", ok,
           f"accuracy {100 * full:.2f}% at {x.shape[1]} samples, {100 * short:.2f}% at {n}; drop {drop:.2f} points")
    assert ok


# -- 7: determinism -------------------------------------------------------------------------

TINY = """
preset = "aes128-desk"
[synth]
noise_len_instr = 20000
sessions = [{name = "clean", num_cos = 6, noise_mix = 0.0}, {name = "noisy", num_cos = 6, noise_mix = 0.5, rd_max = 2}]
noise_session_instr = 3000
[dataset]
cipher_start = 96
cipher_rest = 96
noise = 48
[train]
epochs = 2
kernel_size = 9
fc_hidden = 8
[attack]
schedule = [2, 4, 6]
"""


def test_criterion_7_run_all_determinism(tmp_path, report):
    conf = tmp_path / "run.toml"
    conf.write_text(TINY)
    trees = []
    for name in ("first", "second"):
        out = tmp_path / name
        cli.main(["run-all", "--config", str(conf), "--out", str(out), "--seed", "11"])
        trees.append({p.relative_to(out).as_posix(): p.read_bytes()
                      for p in sorted(out.rglob("*")) if p.name.endswith(("_summary.json", ".scnn"))})
    a, b = trees
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = len(a) == 8 and not differ
    report(7, "run-all determinism", ok, f"{len(a)} summary/model files compared, {len(differ)} differ")
    assert ok
