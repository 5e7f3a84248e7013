"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The heavyweight synthetic benchmark (criteria 5-7) is computed once in a
module-scoped fixture: 200 sequences, Gaussian analytic denoiser, observation
noise sigma = 0.005, grid cells for the reference-weight sweep, the bone-loss
toggle, and the view-count comparison.

Criterion 6's bone-variance clause is asserted exactly as stated and fails by
construction of the objective: a penalty shifts a smooth optimizer equilibrium
by about ||lambda * grad(penalty)|| / curvature(main term), and with the bone
term's 2/(B*L) normalization against unit-scale reprojection curvature that is
a relative ~1e-5 at lambda = 0.001, not the required >= 50%. The reduction the
term does produce is consistently signed across sequences (reported in the
criterion's detail line) and leaves MPJPE within the 5% clause.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from cmas.camera import backproject, make_rig, project
from cmas.diffusion import cosine_schedule, posterior_coefficients, posterior_sample
from cmas.evaluate import (OracleDenoiser, make_dataset, mpjpe, run_benchmark_cell,
                           noisy_reference_inputs, sequence_seeds, synth_motion)
from cmas.prior import AnalyticGaussianDenoiser, fit_gaussian_prior
from cmas.preprocess import (RawPoseTrack, filter_low_confidence, gaussian_smooth,
                             pose2d_to_jsonl, segment_discontinuities)
from cmas.sampler import CmasConfig, lift_batch, with_overrides
from cmas.skeleton import (Pose2DSequence, SkeletonTopology, bone_variance_gradient,
                           bone_variance_loss, default_topology)
from cmas.triangulate import (OptimizerSettings, _triangulate_arrays,
                              geometry_gradient, geometry_loss, total_gradient,
                              total_loss, view_weights)
from conftest import finite_difference_gradient, relative_gradient_error


def check(number: int, name: str, passed: bool, detail: str = ""):
    state = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number:2d} {name}: {state}  {detail}")
    assert passed, f"criterion {number} ({name}): {detail}"


# ---------------------------------------------------------------------------
# shared synthetic benchmark (criteria 5, 6, 7)
# ---------------------------------------------------------------------------

BENCH_FRAMES = 16
BENCH_STEPS = 48
BENCH_N = 200
NOISE_SIGMA = 0.005


@pytest.fixture(scope="module")
def benchmark():
    topo = default_topology()
    rig = make_rig(7)
    train_rng = np.random.default_rng(1000)
    _, train_views = make_dataset(60, topo, rig, BENCH_FRAMES, train_rng)
    prior = fit_gaussian_prior([s for view in train_views for s in view])
    denoiser = AnalyticGaussianDenoiser(prior, cosine_schedule(BENCH_STEPS))
    gt, _ = make_dataset(BENCH_N, topo, rig, BENCH_FRAMES, np.random.default_rng(2000))
    base = CmasConfig(views=7, steps=BENCH_STEPS, w_ref=0.8, lambda_bone=0.001,
                      optimizer=OptimizerSettings(iterations=100), seed=99, topology=topo)
    inputs = noisy_reference_inputs(gt, rig.reference_view, NOISE_SIGMA, base.seed)
    seeds = sequence_seeds(base.seed, BENCH_N)

    def cell(name, **overrides):
        cfg = with_overrides(base, **overrides)
        return run_benchmark_cell(name, inputs, gt, denoiser, cfg, seeds)

    t0 = time.perf_counter()
    reports = {"w_4_5": cell("w_4_5", w_ref=4 / 5),
               "w_1_7": cell("w_1_7", w_ref=1 / 7),
               "w_1": cell("w_1", w_ref=1.0)}
    sweep_runtime = time.perf_counter() - t0
    reports["no_bone"] = cell("no_bone", w_ref=4 / 5, lambda_bone=0.0)
    reports["views_3"] = cell("views_3", views=3)
    return reports, sweep_runtime


class TestCriterion1:
    def test_triangulation_exact_recovery(self, topo):
        rng = np.random.default_rng(42)
        rig = make_rig(7)
        frames = 16
        t0 = time.perf_counter()
        motions = [synth_motion(topo, frames, rng) for _ in range(50)]
        stack = np.stack([m.data for m in motions])
        targets = np.stack([np.stack([project(m.data, v) for m in motions])
                            for v in rig.views])
        init = stack + 0.01 * rng.standard_normal(stack.shape)
        out = _triangulate_arrays(targets, None, rig, view_weights(7, 0.8, 0), 0.001,
                                  topo, init, OptimizerSettings())
        runtime = time.perf_counter() - t0
        worst = float(np.linalg.norm(out - stack, axis=-1).max())
        check(1, "triangulation exact recovery", worst < 1e-3 and runtime < 120.0,
              f"max per-joint error {worst:.2e} m over 50 motions, {runtime:.1f}s")


class TestCriterion2:
    def test_gradients_match_finite_differences(self, topo):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            views = int(rng.integers(1, 4))
            frames = int(rng.integers(1, 5))
            joints = int(rng.integers(2, 6))
            bones = tuple((0, j) for j in range(1, joints))
            small = SkeletonTopology(joint_count=joints, bones=bones)
            rig = make_rig(views, distance=6.0)
            x = rng.uniform(-0.4, 0.4, size=(frames, joints, 3))
            targets = [Pose2DSequence(data=project(x, v) +
                                      0.05 * rng.standard_normal((frames, joints, 2)))
                       for v in rig.views]
            w = view_weights(views, 1.0 if views == 1 else 0.7, 0)

            pairs = [
                (geometry_gradient(x, targets, rig, w),
                 lambda q: geometry_loss(q, targets, rig, w)),
                (bone_variance_gradient(x, small),
                 lambda q: bone_variance_loss(q, small)),
                (total_gradient(x, targets, rig, w, 0.01, small),
                 lambda q: total_loss(q, targets, rig, w, 0.01, small)),
            ]
            for analytic, f in pairs:
                worst = max(worst, relative_gradient_error(
                    analytic, finite_difference_gradient(f, x, step=1e-5)))
        check(2, "analytic gradients vs finite differences", worst < 1e-4,
              f"worst relative error {worst:.2e} over 100 instances x 3 losses")


class TestCriterion3:
    def test_posterior_moments(self):
        schedule = cosine_schedule(100)
        rng = np.random.default_rng(31)
        n = 100_000
        ok = True
        details = []
        for _ in range(5):
            t = int(rng.integers(2, 101))
            x_t = float(rng.standard_normal())
            x0 = float(rng.standard_normal())
            c0, ct, var = posterior_coefficients(t, schedule)
            mean = c0 * x0 + ct * x_t
            draws = posterior_sample(np.full(n, x_t), np.full(n, x0), t, rng, schedule)
            mean_se = math.sqrt(var / n)
            var_se = var * math.sqrt(2.0 / n)
            ok &= abs(draws.mean() - mean) < 3 * mean_se
            ok &= abs(draws.var() - var) < 3 * var_se
            details.append(f"t={t}")
        det1 = posterior_sample(np.ones(4), np.zeros(4), 1, np.random.default_rng(0), schedule)
        det2 = posterior_sample(np.ones(4), np.zeros(4), 1, np.random.default_rng(1), schedule)
        ok &= bool(np.array_equal(det1, det2))
        check(3, "posterior sampling moments", ok,
              f"5 triples ({', '.join(details)}) within 3 SE; t=1 deterministic")


class TestCriterion4:
    def test_oracle_end_to_end(self, topo):
        rng = np.random.default_rng(55)
        rig = make_rig(7)
        frames = 16
        motions = [synth_motion(topo, frames, rng) for _ in range(20)]
        oracle = OracleDenoiser(motions, rig)
        cfg = CmasConfig(views=7, steps=100, w_ref=4 / 5, lambda_bone=0.001,
                         optimizer=OptimizerSettings(iterations=150), seed=7,
                         topology=topo)
        inputs = np.stack([project(m.data, rig.reference_view) for m in motions])
        out, _ = lift_batch(inputs, None, oracle, cfg, seeds=sequence_seeds(7, 20))
        errs = [mpjpe(out[i], motions[i].data, "none") for i in range(20)]
        worst = max(errs)
        check(4, "oracle end-to-end lift", worst < 1.0,
              f"worst MPJPE {worst:.4f} mm over 20 sequences (T=100, V=7, w_ref=4/5)")


class TestCriterion5:
    def test_weight_sweep_directionality(self, benchmark):
        reports, sweep_runtime = benchmark
        m = {k: r.mpjpe_mm["root"] for k, r in reports.items()}
        ordered = m["w_4_5"] < m["w_1_7"] and m["w_4_5"] < m["w_1"]
        in_budget = sweep_runtime < 1800.0
        check(5, "weight-sweep directionality", ordered and in_budget,
              f"mean MPJPE mm: w_ref=4/5 {m['w_4_5']:.2f} < 1/7 {m['w_1_7']:.2f} "
              f"and < 1 {m['w_1']:.2f}; runtime {sweep_runtime:.0f}s")


class TestCriterion6:
    def test_bone_loss_effect(self, benchmark):
        reports, _ = benchmark
        on = reports["w_4_5"]
        off = reports["no_bone"]
        reduction = 1.0 - on.bone_variance / off.bone_variance
        mpjpe_ratio = on.mpjpe_mm["root"] / off.mpjpe_mm["root"]
        sign_rate = float(np.mean(on.per_sequence_bone_variance
                                  <= off.per_sequence_bone_variance))
        check(6, "bone-loss variance reduction",
              reduction >= 0.5 and mpjpe_ratio <= 1.05,
              f"variance reduction {reduction:.3e} (required >= 0.5), "
              f"MPJPE ratio {mpjpe_ratio:.4f} (required <= 1.05), "
              f"reduction consistently signed on {sign_rate:.0%} of sequences")


class TestCriterion7:
    def test_view_count_directionality(self, benchmark):
        reports, _ = benchmark
        v7 = reports["w_4_5"].mpjpe_mm["root"]
        v3 = reports["views_3"].mpjpe_mm["root"]
        check(7, "view-count directionality", v7 <= v3,
              f"mean MPJPE mm: V=7 {v7:.2f} <= V=3 {v3:.2f}")


class TestBenchmarkExtras:
    def test_baseline_is_worse_than_cmas(self, benchmark, topo):
        # constant-depth backprojection of the same noisy inputs, scored identically
        reports, _ = benchmark
        rig = make_rig(7)
        gt, _ = make_dataset(BENCH_N, topo, rig, BENCH_FRAMES,
                             np.random.default_rng(2000))
        inputs = noisy_reference_inputs(gt, rig.reference_view, NOISE_SIGMA, 99)
        base = backproject(inputs, rig.reference_view, depth=7.0)
        base_mpjpe = float(np.mean([mpjpe(base[i], gt[i].data, "root")
                                    for i in range(BENCH_N)]))
        assert reports["w_4_5"].mpjpe_mm["root"] < base_mpjpe


class TestCriterion8:
    def test_weight_formula(self):
        w = view_weights(7, 4 / 5, 0)
        exact_sum = math.fsum(w.values) == 1.0
        values = (w.values[0] == 0.8
                  and np.allclose(w.values[1:], 1.0 / 30.0, rtol=1e-12)
                  and np.all(w.values[1:] == w.values[1]))
        check(8, "view-weight formula", exact_sum and values,
              f"sum={math.fsum(w.values)!r}, ref={w.values[0]}, others={w.values[1]:.6f}")


class TestCriterion9:
    def test_preprocessing_conformance(self):
        conf = np.array([[0.29, 0.30, 0.9]])
        filtered = filter_low_confidence(
            RawPoseTrack(coords=np.zeros((1, 3, 2)), confidence=conf), 0.3)
        strict_below = (not filtered.mask[0, 0]) and filtered.mask[0, 1] and filtered.mask[0, 2]

        coords = np.zeros((10, 2, 2))
        coords[6:] += 0.6
        segs = segment_discontinuities(RawPoseTrack(coords=coords), 0.5)
        split_exact = [(s.meta["start"], s.frames) for s in segs] == [(0, 6), (6, 4)]

        const = RawPoseTrack(coords=np.full((9, 2, 2), 1.3))
        smooth_identity = bool(np.allclose(gaussian_smooth(const, 1.0).coords, 1.3,
                                           atol=1e-12))
        check(9, "preprocessing conformance",
              strict_below and split_exact and smooth_identity,
              f"strict-below={strict_below}, split-at-violation={split_exact}, "
              f"constant-smooth-identity={smooth_identity}")


class TestCriterion10:
    def test_lift_determinism_across_runs_and_threads(self, topo, tmp_path):
        rig = make_rig(4)
        rng = np.random.default_rng(3)
        motions, per_view = make_dataset(4, topo, rig, 8, rng)
        data_dir = tmp_path / "ds"
        data_dir.mkdir()
        for v in range(4):
            pose2d_to_jsonl(per_view[v][0], data_dir / f"m0_view{v}.jsonl")
            pose2d_to_jsonl(per_view[v][1], data_dir / f"m1_view{v}.jsonl")
        model = tmp_path / "prior.npz"
        run = lambda *a: subprocess.run([sys.executable, "-m", "cmas.cli", *map(str, a)],
                                        capture_output=True, text=True)
        fit = run("fit-prior", "--dataset-dir", data_dir, "--steps", "10",
                  "--out-model", model)
        assert fit.returncode == 0, fit.stderr
        outputs = {}
        for tag, threads in (("run1_t1", 1), ("run2_t1", 1), ("t4", 4), ("t8", 8)):
            out = tmp_path / f"{tag}.json"
            res = run("lift", "--raw", "--input", data_dir / "m0_view0.jsonl",
                      "--model", model, "--out", out, "--views", "4", "--steps", "10",
                      "--iters", "60", "--seed", "123", "--threads", str(threads))
            assert res.returncode == 0, res.stderr
            outputs[tag] = out.read_bytes()
        identical = (outputs["run1_t1"] == outputs["run2_t1"] == outputs["t4"]
                     == outputs["t8"])
        check(10, "cmd_lift determinism", identical,
              "byte-identical across 2 runs and --threads {1, 4, 8}")
