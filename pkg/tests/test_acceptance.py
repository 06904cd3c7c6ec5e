"""Exit criteria of the build, one test each.

The terminal summary prints one ``AC n PASS/FAIL`` line per criterion.
"""
import json
import math
import random
import time

import numpy as np
import pytest

from medkit import cli, volume
from medkit.curation import ImageMeta, TextRecord, filter_image, filter_text
from medkit.doceval.scoring import score_full_parse
from medkit.doceval.tables import canonicalize, classify_abnormality, parse_reference_interval
from medkit.doceval.textmetrics import cider, rouge_l
from medkit.drr import (
    LabelVolume3D,
    ProjectionConfig,
    boxes_from_labels,
    project_at_angle,
    project_labels,
    project_parallel,
)
from medkit.maskops import (
    LossWeights,
    bce_loss,
    bce_loss_grad,
    dice_loss,
    dice_loss_grad,
    rle_decode,
    rle_encode,
    seg_loss,
    token_cross_entropy,
)
from medkit.packing import TokenSample, pack_samples, split_into_chunks, utilization
from medkit.volume import AttenuationVolume

from cli_fixtures import build_inputs, command_lines
from conftest import write_volume
from doc_fixtures import ABNORMALITY_TABLE, FIVE_DOCS, MACRO_DOC_F1, MICRO
from oracles import central_diff, cider_brute, hull_scan, min_bins_exhaustive, ray_any_scan

ac = pytest.mark.acceptance


@ac(1, "packing fixture {7,4,3} at L=5: split, 3 bins, fill 14/15, < 1 s")
def test_ac1_packing_fixture():
    t0 = time.perf_counter()
    samples = [TokenSample("a", 7), TokenSample("b", 4), TokenSample("c", 3)]
    assert [c.length for c in split_into_chunks(samples[0], 5)] == [5, 2]
    plan = pack_samples(samples, 5)
    elapsed = time.perf_counter() - t0
    assert len(plan.bins) == 3
    assert len(plan.bins) == min_bins_exhaustive([5, 2, 4, 3], 5)
    assert utilization(plan).fill_ratio == pytest.approx(14 / 15, abs=1e-12)
    assert elapsed < 1.0


@ac(2, "packing within optimum + 1 on 1000 random instances, bins <= L, lossless tiling")
def test_ac2_packing_optimality():
    rnd = random.Random(2024)
    for trial in range(1000):
        L = rnd.randint(2, 16)
        samples, n_chunks = [], 0
        while True:
            length = rnd.randint(1, 2 * L)
            k = math.ceil(length / L)
            if n_chunks + k > 8 or (samples and rnd.random() < 0.25):
                break
            seg = sorted(rnd.sample(range(length), rnd.randint(0, min(2, length))))
            samples.append(TokenSample(f"s{len(samples)}", length, tuple(seg), tuple(f"m{p}" for p in seg)))
            n_chunks += k
        plan = pack_samples(samples, L)
        chunk_lengths = [c.length for b in plan.bins for c in b]
        assert len(chunk_lengths) <= 8
        assert len(plan.bins) <= min_bins_exhaustive(chunk_lengths, L) + 1, trial
        assert all(n <= L for n in plan.bin_lengths())
        for s in samples:
            parts = sorted((c for b in plan.bins for c in b if c.sample_id == s.id), key=lambda c: c.chunk_index)
            assert [t for c in parts for t in range(c.start, c.end)] == list(range(s.length))
        assert len(plan.index_table) == sum(len(s.seg_positions) for s in samples)


@ac(3, "loss hand values within 1e-9; seg_loss (1,2,1) on (0.1,0.2,0.3) gives 0.8 exactly")
def test_ac3_loss_values():
    assert abs(bce_loss([0.5, 0.5, 0.5], [1, 0, 1]) - 0.693147) < 1e-6
    assert abs(bce_loss([0.5, 0.5, 0.5], [1, 0, 1]) - math.log(2)) <= 1e-9
    assert abs(token_cross_entropy([1], [[0.25] * 4]) - math.log(4)) <= 1e-9
    assert abs(token_cross_entropy([1], [[0.25] * 4]) - 1.386294) < 1e-6
    assert abs(bce_loss([0.9, 0.1], [1, 0]) - (-math.log(0.9))) <= 1e-9
    assert abs(bce_loss([0.9, 0.1], [1, 0]) - 0.105361) < 1e-6
    assert abs(dice_loss([0.5, 0.5], [1, 0], eps=0.0) - 0.5) <= 1e-9
    assert abs(token_cross_entropy([0, 0], [[0.5, 0.5], [0.25, 0.75]]) - (math.log(2) + math.log(4))) <= 1e-9
    assert abs(dice_loss([1, 0], [0, 1]) - 1.0) <= 1e-9
    assert LossWeights() == LossWeights(1.0, 2.0, 1.0)
    assert seg_loss(0.1, 0.2, 0.3) == 0.8


@ac(4, "dice/bce analytic gradients vs central differences (h=1e-5) within 1e-5 relative, 100 points")
def test_ac4_gradients():
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 10))
        p = rng.uniform(0.05, 0.95, n)
        g = (rng.random(n) < 0.5).astype(float)
        for loss, grad in ((dice_loss, dice_loss_grad), (bce_loss, bce_loss_grad)):
            a = grad(p, g)
            num = np.array(central_diff(lambda x: loss(x, g), list(p), h=1e-5))
            rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-12)
            worst = max(worst, float(rel.max()))
    assert worst <= 1e-5, worst


@ac(5, "RLE roundtrip exact on 10,000 random masks up to 64x64 plus edge cases")
def test_ac5_rle_roundtrip():
    rng = np.random.default_rng(55)
    edge = [np.zeros((5, 7), bool), np.ones((5, 7), bool), np.ones((1, 1), bool), np.zeros((1, 1), bool),
            np.eye(4, dtype=bool), np.ones((64, 64), bool)]
    lead = np.zeros((6, 6), bool)
    lead[0, 0] = True
    edge.append(lead)
    for m in edge:
        assert np.array_equal(rle_decode(rle_encode(m)).astype(bool), m)
    assert rle_encode(lead).counts[0] == 0
    for _ in range(10_000):
        h, w = rng.integers(1, 65, 2)
        m = rng.random((h, w)) < rng.uniform(0, 1)
        assert np.array_equal(rle_decode(rle_encode(m)).astype(bool), m)


@ac(6, "DRR slab e^-2 within 1e-6; angle 0 within 1e-9; 90 deg within 1e-3 rel; linearity 1e-9")
def test_ac6_drr(tmp_path):
    # 100 mm of water-equivalent tissue, loaded through the volume reader
    hdr = write_volume(tmp_path, "slab", np.zeros((6, 5, 50), dtype=np.int16), spacing=(1.0, 1.0, 2.0))
    att = volume.hu_to_attenuation(volume.load_volume(hdr))
    assert np.allclose(att.mu, 0.02)
    for cfg in (ProjectionConfig("Z"), ProjectionConfig("Z", 0.0)):
        r = project_at_angle(att, cfg)
        assert np.max(np.abs(r.transmitted - math.exp(-2.0))) <= 1e-6
        assert np.max(np.abs(r.transmitted - 0.135335)) <= 1e-6

    rng = np.random.default_rng(66)
    v = AttenuationVolume.from_array(rng.random((9, 10, 11)) * 0.05, (0.8, 1.0, 1.7))
    for ax in "XYZ":
        diff = project_at_angle(v, ProjectionConfig(ax, 0.0)).integrals - project_parallel(v, ax).integrals
        assert np.max(np.abs(diff)) <= 1e-9

    cube = AttenuationVolume.from_array(rng.random((12, 12, 12)) * 0.05 + 0.01)
    rot = project_at_angle(cube, ProjectionConfig("X", 90.0, rotate_about="Z")).integrals
    ortho = project_parallel(cube, "Y").integrals[:, ::-1]
    assert np.max(np.abs(rot - ortho) / np.abs(ortho)) <= 1e-3

    a = rng.random((5, 6, 7))
    b = rng.random((5, 6, 7))
    for cfg in (ProjectionConfig("Z"), ProjectionConfig("Y", 37.0)):
        def P(m):
            return project_at_angle(AttenuationVolume.from_array(m), cfg).integrals

        assert np.max(np.abs(P(3.5 * a) - 3.5 * P(a))) <= 1e-9
        assert np.max(np.abs(P(a + b) - (P(a) + P(b)))) <= 1e-9


@ac(7, "label masks equal the per-ray oracle on 500 random 8x8x8 volumes; boxes are tight hulls")
def test_ac7_label_boxes():
    rng = np.random.default_rng(77)
    for trial in range(500):
        lab = rng.integers(0, 4, (8, 8, 8)) * (rng.random((8, 8, 8)) < rng.uniform(0.005, 0.2))
        ax = "XYZ"[trial % 3]
        masks = project_labels(LabelVolume3D.from_array(lab), ProjectionConfig(ax))
        boxes = {b.class_id: b for b in boxes_from_labels(masks)}
        for c in (1, 2, 3):
            oracle = ray_any_scan(lab, "XYZ".index(ax), c)
            got = masks.get(c)
            assert (got.tolist() if got is not None else [[False] * len(oracle[0])] * len(oracle)) == oracle
            hull = hull_scan(oracle)
            assert (boxes[c].coords if c in boxes else None) == hull
            if hull is None:
                continue
            m = np.array(oracle)
            x0, y0, x1, y1 = hull
            # every edge of the box touches foreground, so shrinking it would exclude some
            assert m[y0:y1 + 1, x0].any() and m[y0:y1 + 1, x1].any()
            assert m[y0, x0:x1 + 1].any() and m[y1, x0:x1 + 1].any()
            assert m.sum() == m[y0:y1 + 1, x0:x1 + 1].sum()


@ac(8, "token counts {9,10,1024,1025} -> drop/keep/keep/drop; areas {4095,4096} -> drop/keep")
def test_ac8_filtering():
    got = [filter_text(TextRecord("r", "", n)).keep for n in (9, 10, 1024, 1025)]
    assert got == [False, True, True, False]
    assert [filter_image(ImageMeta("i", w, 1)).keep for w in (4095, 4096)] == [False, True]
    assert [filter_image(ImageMeta("i", 64, h)).keep for h in (63, 64)] == [False, True]


@ac(9, "5-document fixture micro P/R/F1 and macro-doc F1 within 1e-9; 12-case abnormality table")
def test_ac9_doc_eval():
    for pred, gold, counts in FIVE_DOCS:
        s = score_full_parse([(pred, gold)])
        assert (s.counts.tp, s.counts.fp, s.counts.fn) == counts
    s = score_full_parse([(p, g) for p, g, _ in FIVE_DOCS])
    assert all(abs(a - b) <= 1e-9 for a, b in zip(s.micro, MICRO))
    assert abs(s.macro_doc[2] - MACRO_DOC_F1) <= 1e-9
    assert len(ABNORMALITY_TABLE) == 12
    for result, ref, label in ABNORMALITY_TABLE:
        interval = parse_reference_interval(canonicalize(ref, "reference"))
        assert classify_abnormality(canonicalize(result, "result"), interval) == label, (result, ref)


@ac(10, "rouge_l identity/disjoint/0.75 fixture; cider 10.0 on identical pair; cider vs brute force")
def test_ac10_text_metrics():
    assert rouge_l(list("abcd"), list("abcd")) == 1.0
    assert rouge_l(list("abcd"), list("wxyz")) == 0.0
    assert rouge_l(list("abcd"), list("acde")) == 0.75
    assert abs(cider([["no", "acute", "process", "seen"]], [["no", "acute", "process", "seen"]]) - 10.0) <= 1e-9
    cand = [["the", "heart", "size", "is", "normal"], ["no", "acute", "cardiopulmonary", "process", "seen"]]
    ref = [["the", "heart", "size", "is", "enlarged"], ["no", "acute", "cardiopulmonary", "process", "seen"]]
    assert abs(cider(cand, ref) - cider_brute(cand, ref)) <= 1e-9


@ac(11, "every CLI command re-run on identical inputs gives byte-identical primary outputs")
def test_ac11_determinism(tmp_path):
    inputs = build_inputs(tmp_path / "in")
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for name, argv, outputs in command_lines(inputs, out):
            assert cli.main(argv + ["--report", str(out / f"{name}.report.json")]) == 0, name
        runs.append(out)
    cfg = tmp_path / "in" / "pipe.json"
    cfg.write_text('{"stages": [{"name": "f", "type": "filter", "input": "records.jsonl"},'
                   ' {"name": "p", "type": "pack", "input": "samples.jsonl", "max_len": 5}]}')
    for k in range(2):
        assert cli.run_pipeline(cfg, output_dir=tmp_path / f"pipe{k}")[0] == 0
    for name, _, outputs in command_lines(inputs, runs[0]):
        for o in outputs:
            assert (runs[0] / o).read_bytes() == (runs[1] / o).read_bytes(), (name, o)
    for o in ("f.jsonl", "f.drops.jsonl", "p.plan.json"):
        assert (tmp_path / "pipe0" / o).read_bytes() == (tmp_path / "pipe1" / o).read_bytes()
    # reports differ at most in the timestamp key
    r0 = json.loads((tmp_path / "pipe0" / "report.json").read_text())
    r1 = json.loads((tmp_path / "pipe1" / "report.json").read_text())
    for r in (r0, r1):
        r.pop("generated_at")
        for st in r["stages"]:
            st["stats"].pop("outputs", None)
    assert r0 == r1
