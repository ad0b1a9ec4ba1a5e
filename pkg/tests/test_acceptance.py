"""Acceptance gate: oracle suites plus trend reproduction on the default run.

Each test prints one ``ACCEPT n: PASS/FAIL`` line.  Tests 6-12 share a
single full run of configs/default.cfg (session-scoped fixture), so the
first of them to execute pays the full training cost.
"""

import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from blurlab.harness import load_config, run_experiment
from blurlab.imaging import Image, convolve
from blurlab.metrics import boundary_band, miou, topk_accuracy
from blurlab.net import (
    Architecture,
    build_model,
    forward,
    loss_and_gradients,
)
from blurlab.psf import (
    box_kernel,
    camera_shake_kernel,
    delta_kernel,
    disk_kernel,
    gaussian_kernel,
)
from blurlab.seeding import generator

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT = os.path.join(REPO, "configs", "default.cfg")
SMOKE = os.path.join(REPO, "configs", "smoke.cfg")


def _accept(n: int, ok: bool, detail: str) -> None:
    print(f"ACCEPT {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"ACCEPT {n}: {detail}"


# ---------------------------------------------------------------------------
# Shared default run (criteria 6-12)


def _read_table(path: str, key_fields: int) -> dict:
    table = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            table[tuple(row[:key_fields])] = row[key_fields:]
    return table


@pytest.fixture(scope="session")
def default_report(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("acceptance") / "default")
    config = load_config(DEFAULT)
    t0 = time.perf_counter()
    run_experiment(config, out)
    elapsed = time.perf_counter() - t0
    with open(os.path.join(out, "manifest.txt")) as fh:
        manifest = fh.read()
    if "FAILED" in manifest:
        raise AssertionError(f"default run had failed stages:\n{manifest}")
    acc_rows = _read_table(os.path.join(out, "accuracy.csv"), 4)
    return {
        "dir": out,
        "seconds": elapsed,
        # (model, condition, scale) -> top-1
        "acc": {
            k[:3]: float(v[0]) for k, v in acc_rows.items() if k[3] == "top1"
        },
        # (model, condition, metric) -> value
        "entropy": {
            k: float(v[0])
            for k, v in _read_table(os.path.join(out, "entropy.csv"), 3).items()
        },
        # (model, condition, metric) -> value ("undefined" excluded)
        "miou": {
            k: float(v[0])
            for k, v in _read_table(os.path.join(out, "miou.csv"), 3).items()
            if v[0] != "undefined"
        },
        # (model, tap) -> mean hamming distance
        "invariance": {
            k: float(v[0])
            for k, v in _read_table(os.path.join(out, "invariance.csv"), 2).items()
        },
    }


DEFOCUS_LADDER = ["sharp", "d1", "d2", "d3", "d4"]


# ---------------------------------------------------------------------------
# 1. kernel invariants


class TestCriterion1:
    def test_kernel_invariants_thousand_per_family(self):
        rng = generator(101)
        t0 = time.perf_counter()
        problems = []

        def check(kernel, symmetric: bool) -> None:
            w = kernel.weights
            if abs(w.sum() - 1.0) > 1e-9:
                problems.append(f"{kernel.kind} sum {w.sum()}")
            if w.min() < 0.0:
                problems.append(f"{kernel.kind} negative weight")
            if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
                problems.append(f"{kernel.kind} even extent {w.shape}")
            if symmetric:
                if not np.allclose(w, w[::-1, ::-1], atol=1e-12):
                    problems.append(f"{kernel.kind} not point-symmetric")
                if w.shape[0] == w.shape[1] and not np.allclose(w, w.T, atol=1e-12):
                    problems.append(f"{kernel.kind} not transpose-symmetric")

        for _ in range(1000):
            check(delta_kernel(), symmetric=True)
            check(disk_kernel(float(rng.uniform(0.5, 6.0))), symmetric=True)
            length = int(rng.integers(1, 13))
            check(box_kernel(length, "h"), symmetric=length % 2 == 1)
            check(box_kernel(length, "v"), symmetric=length % 2 == 1)
            check(gaussian_kernel(float(rng.uniform(0.3, 3.0))), symmetric=True)
        for seed in range(3000, 4000):
            kernel = camera_shake_kernel(seed)
            check(kernel, symmetric=False)
            w = kernel.weights
            ys, xs = np.nonzero(w)
            total = w[ys, xs].sum()
            cy = (ys * w[ys, xs]).sum() / total - (w.shape[0] - 1) / 2
            cx = (xs * w[ys, xs]).sum() / total - (w.shape[1] - 1) / 2
            if abs(cy) > 0.51 or abs(cx) > 0.51:
                problems.append(f"shake seed {seed} center of mass ({cy:.3f},{cx:.3f})")
        elapsed = time.perf_counter() - t0
        if elapsed >= 10.0:
            problems.append(f"runtime {elapsed:.1f}s >= 10s")
        _accept(
            1,
            not problems,
            problems[0] if problems else
            f"6000 kernels, unit sum within 1e-9, runtime {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# 2. FFT vs direct convolution


class TestCriterion2:
    def test_fft_matches_direct_on_hundred_pairs(self):
        rng = generator(202)
        t0 = time.perf_counter()
        worst = 0.0
        families = ["delta", "disk", "box_h", "box_v", "gaussian", "shake"]
        for i in range(100):
            h = int(rng.integers(32, 97))
            w = int(rng.integers(32, 97))
            c = 1 if rng.uniform() < 0.7 else 3
            img = Image(rng.uniform(0.0, 1.0, size=(h, w, c)))
            family = families[i % len(families)]
            if family == "delta":
                kernel = delta_kernel()
            elif family == "disk":
                kernel = disk_kernel(float(rng.uniform(0.5, 5.0)))
            elif family == "box_h":
                kernel = box_kernel(int(rng.integers(1, 10)), "h")
            elif family == "box_v":
                kernel = box_kernel(int(rng.integers(1, 10)), "v")
            elif family == "gaussian":
                kernel = gaussian_kernel(float(rng.uniform(0.4, 2.5)))
            else:
                kernel = camera_shake_kernel(int(rng.integers(0, 10000)))
            a = convolve(img, kernel, method="direct").values
            b = convolve(img, kernel, method="fft").values
            worst = max(worst, float(np.abs(a - b).max()))
        elapsed = time.perf_counter() - t0
        ok = worst <= 1e-6 and elapsed < 30.0
        _accept(2, ok, f"max |direct - fft| = {worst:.2e}, runtime {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. gradient check


class TestCriterion3:
    def test_analytic_gradients_match_finite_differences(self):
        t0 = time.perf_counter()
        arch = Architecture("micro", 1, 8, (2, 3), 5, 2)
        model = build_model(arch, seed=33)
        rng = generator(44)
        x = rng.uniform(-1.0, 1.0, size=(4, 1, 8, 8))
        labels = np.array([0, 1, 1, 0])
        _, grads = loss_and_gradients(model, x, labels)

        def loss_now() -> float:
            logits = forward(model, x)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            return float(-logp[np.arange(4), labels].mean())

        worst = 0.0
        h = 1e-5
        for tensor, grad in zip(model.parameters(), grads):
            numeric = np.zeros_like(tensor)
            flat = tensor.reshape(-1)
            num_flat = numeric.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up = loss_now()
                flat[j] = keep - h
                down = loss_now()
                flat[j] = keep
                num_flat[j] = (up - down) / (2.0 * h)
            denom = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-4 and elapsed < 60.0
        _accept(3, ok, f"worst relative error {worst:.2e}, runtime {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. metric oracles


class TestCriterion4:
    def test_metric_oracles_exact(self):
        problems = []
        # top-k: two examples, k=2, hand-counted hit pattern
        preds = [np.array([0.5, 0.3, 0.2]), np.array([0.1, 0.2, 0.7])]
        if topk_accuracy(preds, np.array([1, 0]), 2) != 0.5:
            problems.append("topk spec example")
        # mIoU: 4x4 grid, gt = left half class 1, pred = top half class 1
        gt = np.zeros((4, 4), dtype=int)
        gt[:, :2] = 1
        pred = np.zeros((4, 4), dtype=int)
        pred[:2, :] = 1
        # class 0: inter 4, union 12 -> 1/3; class 1: inter 4, union 12 -> 1/3
        if miou([pred], [gt], 2) != pytest.approx(1.0 / 3.0, abs=0):
            problems.append("miou hand count")
        # boundary band: 16x16 vertical edge at column 8, distance 4
        mask = np.zeros((16, 16), dtype=int)
        mask[:, 8:] = 1
        band = boundary_band(mask, 4.0)
        ys, xs = np.nonzero(np.ones_like(mask))
        edge = [
            (y, x)
            for y in range(16)
            for x in range(16)
            if any(
                0 <= y + dy < 16 and 0 <= x + dx < 16 and mask[y + dy, x + dx] != mask[y, x]
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1))
            )
        ]
        brute = np.zeros((16, 16), dtype=bool)
        for y, x in zip(ys, xs):
            if any((y - ey) ** 2 + (x - ex) ** 2 <= 16.0 for ey, ex in edge):
                brute[y, x] = True
        if not np.array_equal(band, brute):
            problems.append("boundary band vs brute force")
        _accept(4, not problems, problems[0] if problems else "topk, miou, boundary band exact")


# ---------------------------------------------------------------------------
# 5. determinism


class TestCriterion5:
    def test_two_runs_byte_identical(self, tmp_path):
        outs = []
        for name in ("first", "second"):
            out = str(tmp_path / name)
            proc = subprocess.run(
                [sys.executable, "-m", "blurlab.cli", "run",
                 "--config", SMOKE, "--out", out],
                capture_output=True,
                text=True,
                cwd=REPO,
            )
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        mismatched = []
        names = [n for n in sorted(os.listdir(outs[0])) if n.endswith(".csv")]
        names.append(os.path.join("invariance", "baseline_P3.pgm"))
        for name in names:
            with open(os.path.join(outs[0], name), "rb") as fh:
                first = fh.read()
            with open(os.path.join(outs[1], name), "rb") as fh:
                second = fh.read()
            if first != second:
                mismatched.append(name)
        _accept(
            5,
            not mismatched,
            f"differs: {mismatched}" if mismatched else
            f"{len(names)} report files byte-identical across two runs",
        )


# ---------------------------------------------------------------------------
# 6-12. trend criteria on the default run


class TestCriterion6:
    def test_baseline_accuracy_strictly_decreasing_with_defocus(self, default_report):
        acc = default_report["acc"]
        ladder = [acc[("baseline", c, "64")] for c in DEFOCUS_LADDER]
        decreasing = all(a > b for a, b in zip(ladder, ladder[1:]))
        drop = ladder[0] - ladder[-1]
        ok = decreasing and drop >= 0.20
        steps = " > ".join(f"{v:.3f}" for v in ladder)
        _accept(6, ok, f"baseline@64 {steps}, total drop {drop * 100:.1f}pts")


class TestCriterion7:
    def test_entropy_ratio_falls_after_mixed_finetuning(self, default_report):
        # The baseline must be confidently wrong-footed by the heaviest
        # blur (entropy ratio >= 1.5x its sharp entropy); after mixed
        # fine-tuning, predictions at the moderate blur -- half the
        # heaviest radius -- must be nearly as confident as on sharp
        # input (ratio < 1.25x).
        ent = default_report["entropy"]
        base = ent[("baseline", "d4", "entropy")] / ent[("baseline", "sharp", "entropy")]
        mixed = (
            ent[("mixed_defocus", "d2", "entropy")]
            / ent[("mixed_defocus", "sharp", "entropy")]
        )
        ok = base >= 1.5 and mixed < 1.25
        _accept(
            7,
            ok,
            f"entropy ratios: baseline d4/sharp {base:.2f}x, mixed d2/sharp {mixed:.2f}x",
        )


class TestCriterion8:
    def test_finetuning_recovery_and_generalization(self, default_report):
        acc = default_report["acc"]
        base_sharp = acc[("baseline", "sharp", "64")]
        base_d4 = acc[("baseline", "d4", "64")]
        mixed_sharp = acc[("mixed_defocus", "sharp", "64")]
        mixed_d4 = acc[("mixed_defocus", "d4", "64")]
        shake_d4 = acc[("sharp_shake", "d4", "64")]
        d4only_sharp = acc[("d4_only", "sharp", "64")]
        recovery = (mixed_d4 - base_d4) / (base_sharp - base_d4)
        sharp_delta = mixed_sharp - base_sharp
        shake_gain = shake_d4 - base_d4
        d4only_loss = base_sharp - d4only_sharp
        ok = (
            recovery >= 0.60
            and sharp_delta >= -0.02
            and shake_gain >= 0.05
            and d4only_loss >= 0.20
        )
        _accept(
            8,
            ok,
            f"recovery {recovery * 100:.1f}%, sharp delta {sharp_delta * 100:+.1f}pts, "
            f"shake-ft d4 gain {shake_gain * 100:+.1f}pts, "
            f"d4-only sharp loss {d4only_loss * 100:.1f}pts",
        )


class TestCriterion9:
    def test_larger_scale_degrades_more_under_heavy_blur(self, default_report):
        acc = default_report["acc"]
        drop64 = acc[("baseline", "sharp", "64")] - acc[("baseline", "d4", "64")]
        drop128 = acc[("baseline", "sharp", "128")] - acc[("baseline", "d4", "128")]
        ok = drop128 > drop64
        _accept(
            9,
            ok,
            f"baseline sharp-to-d4 drop: {drop128 * 100:.1f}pts @128 vs {drop64 * 100:.1f}pts @64",
        )


class TestCriterion10:
    def test_deep_tap_invariance_emerges_after_finetuning(self, default_report):
        inv = default_report["invariance"]
        base_deep = inv[("baseline", "P3")]
        mixed_deep = inv[("mixed_defocus", "P3")]
        base_early = inv[("baseline", "P1")]
        mixed_early = inv[("mixed_defocus", "P1")]
        deep_gap = base_deep - mixed_deep
        early_gap = base_early - mixed_early
        ok = mixed_deep <= 0.70 * base_deep and early_gap < deep_gap
        _accept(
            10,
            ok,
            f"P3 hamming {base_deep:.3f} -> {mixed_deep:.3f} "
            f"({(1 - mixed_deep / base_deep) * 100:.0f}% lower), "
            f"P1 gap {early_gap:.3f} < P3 gap {deep_gap:.3f}",
        )


class TestCriterion11:
    def test_boundary_miou_degrades_then_improves(self, default_report):
        table = default_report["miou"]
        base = [table[("baseline", c, "boundary_miou")] for c in DEFOCUS_LADDER]
        decreasing = all(a > b for a, b in zip(base, base[1:]))
        improvements = [
            table[("mixed_defocus", c, "boundary_miou")] - table[("baseline", c, "boundary_miou")]
            for c in DEFOCUS_LADDER[1:]
        ]
        improved_everywhere = all(d > 0 for d in improvements)
        ok = decreasing and improved_everywhere
        steps = " > ".join(f"{v:.3f}" for v in base)
        worst = min(improvements)
        _accept(
            11,
            ok,
            f"baseline head boundary mIoU {steps}; "
            f"mixed head improvement at every blur (min {worst * 100:+.1f}pts)",
        )


class TestCriterion12:
    def test_default_run_completes_in_budget(self, default_report):
        seconds = default_report["seconds"]
        ok = seconds < 1800.0
        _accept(12, ok, f"default run {seconds / 60.0:.1f} min on one core (budget 30 min)")
