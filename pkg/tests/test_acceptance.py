"""One pass/fail check per acceptance criterion, tolerances as specified."""

import filecmp
import itertools
import json
import time

import numpy as np
import pytest
from ctxvote.cli import main
from ctxvote.config import PipelineConfig
from ctxvote.context import gcm, hcm, init_attention, pcm
from ctxvote.evaluation import average_precision, counting_metrics, evaluate
from ctxvote.experiment import toy_experiment
from ctxvote.geometry import Box3, Detection, iou3d
from ctxvote.gradcheck import default_cases, run_suite
from ctxvote.model import assign_targets, baseline_head, forward, init_params, prepare_scene
from ctxvote.sampling import ClusterSet
from ctxvote.scenes import Scene, SynthConfig, synth_scene
from ctxvote.tensor import LinearParams, Tape, Tensor, init_mlp
from ctxvote.train import jitter_boxes

from oracles import brute_force_ap, direct_counting, monte_carlo_iou

TINY_CFG = """
n_seeds = 48
encoder_radii = 0.4
encoder_max_pts = 8
encoder_width = 8
seed_max_pts = 8
vote_hidden = 16
n_clusters = 8
cluster_max_pts = 8
roi_max_pts = 8
roi_width = 8
head_hidden = 16
epochs = 2
batch_size = 2
synth.n_points = 200
synth.max_objects = 3
"""


def test_gradient_suite():
    t0 = time.process_time()
    results = run_suite(default_cases(), trials=100, tol=1e-4)
    cpu = time.process_time() - t0
    names = {r.name for r in results}
    assert {"matmul", "softmax", "layer_norm", "max_pool_set", "mlp", "gcm", "pcm", "hcm"} <= names
    assert {"smooth_l1", "bce_with_logits", "cross_entropy"} <= names
    assert all(r.trials == 100 for r in results)
    bad = {r.name: r.max_rel_error for r in results if not (r.passed and r.max_rel_error < 1e-4)}
    assert not bad
    assert cpu < 60.0


def test_iou_geometry_oracle():
    assert abs(iou3d(Box3((0, 0, 0), (2, 2, 2)), Box3((1, 0, 0), (2, 2, 2))) - 1 / 3) <= 1e-12
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        a = np.r_[rng.uniform(-1, 1, 3), rng.uniform(0.2, 2.0, 3)]
        b = np.r_[rng.uniform(-1, 1, 3), rng.uniform(0.2, 2.0, 3)]
        exact = iou3d(Box3.from_array(a), Box3.from_array(b))
        worst = max(worst, abs(exact - monte_carlo_iou(a, b, 10**6, rng)))
    assert worst < 0.01


def test_metric_oracles():
    # every ranked detection set of size <= 8 over 2 classes, each detection TP or FP
    for n in range(9):
        for classes in itertools.product((0, 1), repeat=n):
            for flags in itertools.product((False, True), repeat=n):
                for c in (0, 1):
                    sub = [f for f, k in zip(flags, classes) if k == c]
                    for g in {max(sum(sub), 1), sum(sub) + 1}:
                        assert average_precision(sub, g) == brute_force_ap(sub, g)
    # the same fixtures up to size 4 through matching: TPs sit on a GT box, FPs far away
    gts = [Box3((4.0 * i, 0, 0), (1, 1, 1)) for i in range(4)]
    for n in range(5):
        for classes in itertools.product((0, 1), repeat=n):
            for flags in itertools.product((False, True), repeat=n):
                gt_cls = [0, 0, 1, 1]
                used = {0: [0, 1], 1: [2, 3]}
                dets = []
                for r, (c, f) in enumerate(zip(classes, flags)):
                    score = 1.0 - r / 10
                    if f and used[c]:
                        dets.append(Detection(gts[used[c].pop(0)], c, score))
                    else:
                        dets.append(Detection(Box3((0, 50.0 + r, 0), (1, 1, 1)), c, score))
                        if f:
                            flags = flags[:r] + (False,) + flags[r + 1:]
                scene = Scene("s", np.zeros((1, 3)), gts, gt_cls, 2)
                rep = evaluate({"s": dets}, [scene], 2, thresholds=(0.5,))
                for c in (0, 1):
                    sub = [f for f, k in zip(flags, classes) if k == c]
                    assert rep.per_class_ap["0.5"][c] == brute_force_ap(sub, 2)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        shape = (int(rng.integers(1, 12)), int(rng.integers(1, 6)))
        g = rng.integers(0, 5, shape)
        p = np.clip(g + rng.integers(-2, 3, shape), 0, None)
        per, means = direct_counting(p, g)
        rep = counting_metrics(p, g)
        for c, row in enumerate(per):
            assert np.max(np.abs(np.subtract(rep.per_class[c], row))) <= 1e-12
        assert np.max(np.abs(np.subtract([rep.m_rmse, rep.m_nz_rmse, rep.m_rrmse, rep.m_nz_rrmse], means))) <= 1e-12


def _cluster_pcm(F, pos, members, mlp, attn, width=12):
    cl = ClusterSet(pos[members[:1]], [np.asarray(members)], np.asarray(members[:1]))
    idx, mask = cl.padded(width)
    rel = (pos[idx] - cl.centers[:, None, :]) / 0.5
    x = np.concatenate([F[idx], rel], axis=-1)
    return pcm(Tape(), Tensor(x), mask, mlp, attn)[0].data


def test_context_contracts():
    rng = np.random.default_rng(11)
    d = 6
    for _ in range(100):
        # gcm: permuting rows permutes outputs
        p = init_attention(rng, d, d)
        n = int(rng.integers(2, 12))
        F = rng.standard_normal((n, d))
        perm = rng.permutation(n)
        a, b = gcm(Tape(), Tensor(F), p).data, gcm(Tape(), Tensor(F[perm]), p).data
        assert np.max(np.abs(a[perm] - b)) <= 1e-12
        # pcm: member order and repeated members do not matter
        mlp, attn = init_mlp(rng, [d + 3, d, d]), init_attention(rng, d, d)
        nv = 10
        Fv, pos = rng.standard_normal((nv, d)), rng.uniform(0, 1, (nv, 3))
        members = list(rng.choice(nv, int(rng.integers(1, 7)), replace=False))
        base = _cluster_pcm(Fv, pos, members, mlp, attn)
        shuffled = [members[0]] + list(rng.permutation(members[1:]))
        assert np.max(np.abs(base - _cluster_pcm(Fv, pos, shuffled, mlp, attn))) <= 1e-12
        j = int(rng.integers(len(members)))
        dup = list(members)
        dup.insert(int(rng.integers(j + 1, len(dup) + 1)), members[j])
        assert np.array_equal(base, _cluster_pcm(Fv, pos, dup, mlp, attn))
        # a repeat placed ahead of the original only reorders the set
        dup = list(members)
        dup.insert(1, members[j])
        assert np.max(np.abs(base - _cluster_pcm(Fv, pos, dup, mlp, attn))) <= 1e-12
        # hcm with a zero MLP is the identity
        zero = [LinearParams(Tensor(np.zeros((2 * d, d))), Tensor(np.zeros(d))),
                LinearParams(Tensor(np.zeros((d, d))), Tensor(np.zeros(d)))]
        K_P = rng.standard_normal((int(rng.integers(1, 9)), d))
        out = hcm(Tape(), Tensor(rng.standard_normal((n, d))), Tensor(K_P), Tensor(rng.standard_normal((4, d))), zero)
        assert np.array_equal(out.data, K_P)


def test_cascade_monotonicity_and_single_stage():
    cfg = PipelineConfig()
    params = init_params(cfg)
    synth = SynthConfig(seed=3)
    rng = np.random.default_rng(0)
    u = (0.25, 0.5, 0.55, 0.6, 0.7)
    for i in range(10):
        prep = prepare_scene(synth_scene(synth, i), cfg)
        res = forward(Tape(record=False), params, cfg, prep, jitter_boxes(rng, prep.gt_boxes, cfg))
        for st in res.stages:
            pos = [assign_targets(st.input_boxes, prep.gt_boxes, t).positive for t in u]
            for lo, hi in zip(pos, pos[1:]):
                assert not np.any(hi & ~lo)
    one = cfg.replace(stages=(0.5,))
    params = init_params(one)
    for i in range(3):
        prep = prepare_scene(synth_scene(synth, i), one)
        res = forward(Tape(record=False), params, one, prep)
        dets, out = baseline_head(Tape(record=False), res.proposals, params.stages[0], prep.points, one)
        assert np.array_equal(out.boxes, res.stages[0].boxes)
        assert np.array_equal(out.objectness.data, res.stages[0].objectness.data)
        assert np.array_equal(out.class_logits.data, res.stages[0].class_logits.data)
        assert dets == res.detections


@pytest.mark.slow
def test_end_to_end_toy_experiment():
    r = toy_experiment(PipelineConfig(), SynthConfig(), n_train=200, n_eval=50, conf=0.95)
    summary = {
        "map_25": r.eval_report.map_25,
        "map_50": r.eval_report.map_50,
        "stage_iou": r.stage_iou,
        "m_rmse": r.count_report.m_rmse,
        "seconds": r.total_seconds,
    }
    print(json.dumps(summary))
    assert r.eval_report.map_25 >= 0.80, summary
    assert r.eval_report.map_50 >= 0.50, summary
    assert r.stage_iou[-1] >= r.stage_iou[0], summary
    assert r.count_report.m_rmse <= 0.5, summary
    assert r.total_seconds < 600, summary


def test_ablation_harness(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    for name, start in (("train", 0), ("held", 100)):
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / name), "--count", "4",
                     "--start", str(start)]) == 0
    capsys.readouterr()
    out = tmp_path / "ablate.json"
    assert main(["ablate", "--config", str(cfg), "--scenes", str(tmp_path / "train"),
                 "--eval-scenes", str(tmp_path / "held"), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    doc = json.loads(out.read_text())
    rows = doc["rows"]
    assert len(rows) == 8
    assert all(sorted(r) == ["gcm", "hcm", "map_25", "map_50", "pcm"] for r in rows)
    assert len({(r["gcm"], r["pcm"], r["hcm"]) for r in rows}) == 8
    assert all(0.0 <= r["map_25"] <= 1.0 and 0.0 <= r["map_50"] <= 1.0 for r in rows)
    assert "context_delta_map_25" in doc and "context on vs off" in table
    assert len([l for l in table.splitlines() if l.strip()]) == 2 + 8 + 1


def _chain(root, cfg):
    s = root / "scenes"
    assert main(["generate", "--config", str(cfg), "--seed", "5", "--out", str(s), "--count", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "5", "--scenes", str(s), "--out", str(root / "m.ckpt")]) == 0
    assert main(["detect", "--scenes", str(s), "--checkpoint", str(root / "m.ckpt"), "--out", str(root / "p.txt")]) == 0
    assert main(["eval", "--scenes", str(s), "--predictions", str(root / "p.txt"), "--out", str(root / "eval.json")]) == 0
    assert main(["count", "--scenes", str(s), "--predictions", str(root / "p.txt"), "--out", str(root / "count.json")]) == 0


def test_cli_chain_deterministic(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    a, b = tmp_path / "a", tmp_path / "b"
    _chain(a, cfg)
    _chain(b, cfg)
    for name in ("m.ckpt", "m.ckpt.loss.tsv", "p.txt", "eval.json", "count.json"):
        assert filecmp.cmp(a / name, b / name, shallow=False), name
    assert (a / "p.txt").read_text()
