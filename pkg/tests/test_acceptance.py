"""End-to-end acceptance checks, one test per criterion, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary
under "acceptance criteria", then asserts.
"""

import math
import os
import time

import numpy as np
import pytest

from oracles import canny_reference, miou_bruteforce
from structseg.cli import run
from structseg.edge import canny, label_to_boundary
from structseg.eval import miou
from structseg.gradcheck import run_suite
from structseg.ioformats import (
    decode_netpbm,
    decode_tensors,
    encode_netpbm,
    encode_tensors,
    read_labels,
    read_tensors,
    write_labels,
    write_tensors,
)
from structseg.loss import LossConfig, smoothness_loss
from structseg.refine import (
    AffinityGraph,
    RefineConfig,
    build_color_affinity,
    cam_to_pseudo_label,
    random_walk_refine,
    refine_cam_by_smoothness,
)
from structseg.sbdm import TrainConfig, evaluate_sbdm, init_sbdm, poly_lr, train_sbdm
from structseg.synth import DegradeSpec, SceneSpec, boundary_training_pairs, degrade_to_cam, generate_scene

N_SCENES = 50


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    results = run_suite(seed=0, instances=100, h=1e-3)
    elapsed = time.perf_counter() - start
    ok = all(r.passed for r in results) and elapsed < 10
    detail = "; ".join(f"{r.name} rel<1e-3 on {r.rel_fraction:.1%}, abs {r.max_abs_outside_rel:.1e}"
                       for r in results)
    acceptance(1, ok, f"{detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_closed_form_losses(acceptance):
    errors = []
    for h, w, tags, active in ((4, 5, [1, 1], 3), (3, 3, [0, 1], 2), (6, 2, [0, 0], 1)):
        cam = np.full((3, h, w), 0.4)
        value, _ = smoothness_loss(cam, np.zeros_like(cam), tags, 1)
        errors.append(abs(value - 2 * h * w * active * 0.001) < 1e-9)
    step = np.array([[[0.0, 1.0]]])
    unguided, _ = smoothness_loss(step, np.zeros_like(step), None, 1)
    guided, _ = smoothness_loss(step, step.copy(), None, 1, LossConfig(alpha=10))
    ok = all(errors) and abs(unguided - 1.0030005) < 1e-6 and abs(guided - 0.004001) < 1e-6
    acceptance(2, ok, f"constant cases {sum(errors)}/3; step unguided {unguided:.7f}, guided {guided:.7f}")
    assert ok


def test_criterion_3_oracle_equivalence(acceptance):
    r = np.random.default_rng(3)
    canny_ok = 0
    for _ in range(20):
        img = r.integers(0, 256, (16, 16)).astype(np.uint8)
        canny_ok += np.array_equal(canny(img)[0], canny_reference(img))
    miou_ok = 0
    for _ in range(50):
        k = int(r.integers(2, 6))
        pred, truth = r.integers(0, k, (8, 8)), r.integers(0, k, (8, 8))
        miou_ok += miou(pred, truth, k).miou == miou_bruteforce([pred], [truth], k)
    walk_err = 0.0
    for p in (0.5, 0.3, 0.1):
        graph = AffinityGraph(1, 2, np.array([[1 - p, p], [p, 1 - p]]))
        for t in (1, 3, 16):
            out = random_walk_refine(np.array([[[0.0, 1.0]]]), graph, RefineConfig(rw_beta=1, rw_iters=t))
            lam = (1 - 2 * p) ** t
            walk_err = max(walk_err, np.abs(out[0, 0] - [0.5 - 0.5 * lam, 0.5 + 0.5 * lam]).max())
    ok = canny_ok == 20 and miou_ok == 50 and walk_err < 1e-10
    acceptance(3, ok, f"canny {canny_ok}/20 exact; miou {miou_ok}/50 exact; random walk err {walk_err:.1e}")
    assert ok


@pytest.fixture(scope="module")
def suite():
    """Degraded and refined CAMs for the 50 seeded synthetic scenes."""
    scenes, degraded, refined, guides = [], [], [], []
    start = time.perf_counter()
    for s in range(N_SCENES):
        scene = generate_scene(SceneSpec(seed=s))
        k = scene.total_classes
        cam = degrade_to_cam(scene.labels, DegradeSpec(seed=s), k)
        guide = label_to_boundary(scene.labels, k)
        refined.append(refine_cam_by_smoothness(cam, guide, scene.tags))
        scenes.append(scene)
        degraded.append(cam)
        guides.append(guide)
    return {"scenes": scenes, "degraded": degraded, "refined": refined, "guides": guides,
            "seconds": time.perf_counter() - start}


def mean_miou(cams, scenes):
    return float(np.mean([miou(cam_to_pseudo_label(c, s.tags), s.labels, s.total_classes).miou
                          for c, s in zip(cams, scenes)]))


def test_criterion_4_refinement_improves_pseudo_labels(acceptance, suite):
    base = mean_miou(suite["degraded"], suite["scenes"])
    ours = mean_miou(suite["refined"], suite["scenes"])
    gain = 100 * (ours - base)
    ok = gain >= 5 and suite["seconds"] < 60
    acceptance(4, ok, f"mIoU {100 * base:.2f} -> {100 * ours:.2f} (+{gain:.2f} points); {suite['seconds']:.1f}s")
    assert ok


def test_criterion_5_random_walk_improves(acceptance, suite):
    walked = [random_walk_refine(c, build_color_affinity(s.image)) for c, s in zip(suite["refined"], suite["scenes"])]
    before = mean_miou(suite["refined"], suite["scenes"])
    after = mean_miou(walked, suite["scenes"])
    gain = 100 * (after - before)
    # the suite's degradation uses spurious_rate 0.05, so the 1-point bar applies
    assert DegradeSpec().spurious_rate >= 0.05
    ok = gain >= 1
    acceptance(5, ok, f"mIoU {100 * before:.2f} -> {100 * after:.2f} ({gain:+.2f} points) at spurious_rate 0.05")
    assert ok


def foreground_variance(cams, scenes):
    return float(np.mean([np.mean([c[k].var() for k in range(1, s.total_classes) if s.tags[k - 1]])
                          for c, s in zip(cams, scenes)]))


def test_criterion_6_heavy_smoothing_collapses_variance(acceptance, suite):
    heavy = [refine_cam_by_smoothness(c, g, s.tags, loss_config=LossConfig(lambda2=4.0))
             for c, g, s in zip(suite["degraded"], suite["guides"], suite["scenes"])]
    base = foreground_variance(suite["refined"], suite["scenes"])
    ratio = foreground_variance(heavy, suite["scenes"]) / base
    ok = ratio < 0.5
    acceptance(6, ok, f"foreground variance ratio at 4x smoothness weight {ratio:.3f} (needs < 0.5)")
    assert ok, f"variance ratio {ratio:.3f}: the gated penalty keeps region means, see decisions ledger"


def train_run(batches, levels=None, use_canny=True):
    k = batches[0][2].shape[0]
    params = init_sbdm([f.shape[0] for f in batches[0][0]], k, levels=levels, use_canny=use_canny, seed=0)
    loss0, f1_0 = evaluate_sbdm(params, batches)
    start = time.perf_counter()
    trained, losses = train_sbdm(params, batches, TrainConfig(max_itr=200, seed=0))
    elapsed = time.perf_counter() - start
    loss1, f1_1 = evaluate_sbdm(trained, batches)
    return loss0, loss1, f1_0, f1_1, losses, elapsed


def test_criterion_7_boundary_module_training(acceptance):
    batches = boundary_training_pairs(20, seed=0)
    loss0, loss1, f1_0, f1_1, losses, elapsed = train_run(batches, use_canny=False)
    again = train_run(batches, use_canny=False)[4]
    deterministic = losses == again
    reduction = 1 - loss1 / loss0
    ablation = {"high": train_run(batches, levels=(3,), use_canny=False)[3],
                "low": train_run(batches, levels=(0,), use_canny=False)[3],
                "all": f1_1,
                "all+canny": train_run(batches, use_canny=True)[3]}
    ok = reduction >= 0.5 and f1_1 > f1_0 and deterministic and elapsed < 120 \
        and ablation["all+canny"] >= ablation["all"]
    table = ", ".join(f"{k} {v:.3f}" for k, v in ablation.items())
    acceptance(7, ok, f"L_B -{100 * reduction:.1f}%, F1 {f1_0:.3f} -> {f1_1:.3f}, deterministic {deterministic}, "
                      f"{elapsed:.1f}s; ablation F1: {table}")
    assert ok


def pipeline_csv(out_dir, capsys):
    argv_runs = [["synth", "--seed", "11", "--out", out_dir, "--count", "2"]]
    preds, truths = [], []
    for i in range(2):
        p = os.path.join(out_dir, f"scene_{i:03d}")
        argv_runs += [
            ["boundary", "--labels", p + ".labels.pgm", "--classes", "4", "--out", p + ".s.smt"],
            ["refine", "--cam", p + ".smt", "--guide", p + ".s.smt", "--out", p + ".r.smt"],
            ["pseudo-label", "--cam", p + ".r.smt", "--out", p + ".pl.pgm"],
        ]
        preds.append(p + ".pl.pgm")
        truths.append(p + ".labels.pgm")
    argv_runs.append(["evaluate", "--pred", *preds, "--truth", *truths, "--classes", "4"])
    codes = [run(a) for a in argv_runs]
    return codes, capsys.readouterr().out.split("scene_001\n")[-1]


def test_criterion_8_schedule_and_io(acceptance, tmp_path, capsys):
    cfg = TrainConfig(l_init=0.01, gamma=0.9, max_itr=200)
    lr = [poly_lr(i, cfg) for i in (0, 100, 200)]
    lr_ok = all(abs(a - b) < 1e-6 for a, b in zip(lr, (0.01, 0.005359, 0.0)))

    r = np.random.default_rng(8)
    gray = r.integers(0, 256, (7, 9)).astype(np.uint8)
    color = r.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    cam = r.uniform(size=(4, 8, 8)).astype(np.float32)
    labels = r.integers(0, 4, (6, 6))
    write_tensors(tmp_path / "t.smt", {"cam": cam, "empty": np.zeros((0,), np.float32)})
    write_labels(tmp_path / "l.pgm", labels)
    io_ok = (decode_netpbm(encode_netpbm(gray)).tobytes() == gray.tobytes()
             and decode_netpbm(encode_netpbm(color)).tobytes() == color.tobytes()
             and read_tensors(tmp_path / "t.smt")["cam"].tobytes() == cam.tobytes()
             and decode_tensors(encode_tensors({})) == {}
             and np.array_equal(read_labels(tmp_path / "l.pgm", 4), labels))

    codes_a, csv_a = pipeline_csv(str(tmp_path / "a"), capsys)
    codes_b, csv_b = pipeline_csv(str(tmp_path / "b"), capsys)
    cli_ok = codes_a == codes_b == [0] * len(codes_a) and csv_a == csv_b and csv_a.startswith("class,")

    ok = lr_ok and io_ok and cli_ok
    acceptance(8, ok, f"poly_lr {[round(v, 6) for v in lr]}; io round-trips {io_ok}; CLI CSV identical {cli_ok}")
    assert ok
    assert math.isclose(lr[1], 0.01 * 0.5 ** 0.9)
