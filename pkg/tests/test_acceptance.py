"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Budgets are wall-clock limits on a single laptop-class core.
"""

import math
import os
import shutil
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from acdl import data as D
from acdl import gan as G
from acdl import metrics as MT
from acdl import models as M
from acdl import tensor as T
from acdl import training as TR
from gradcases import ALL

pytestmark = pytest.mark.acceptance

ENH = D.EnhanceParams()
VIT_SMALL = dict(image_size=32, patch_size=8, projection_dim=32, heads=4, transformer_layers=2, mlp_hidden=64)

# (tag, input size, lr, epoch budget); every budget is well under 200 epochs
ARCHS = [("cnn", 64, 1e-3, 25), ("ftcnn", 64, 1e-3, 40), ("vit", 32, 3e-4, 60)]


def build(tag, size, seed=0):
    if tag == "cnn":
        return M.build_cnn((size, size, 3), seed=seed)
    if tag == "ftcnn":
        return M.build_ftcnn((size, size, 3), seed=seed)
    return M.build_vit(M.VitConfig(**VIT_SMALL), seed=seed)


def overfit(index, tag, size, lr, epochs, rec):
    train, val = D.load_split(index["train"], size, ENH), D.load_split(index["val"], size, ENH)
    t0 = time.perf_counter()
    model, run = TR.train_classifier(build(tag, size), train, val, TR.TrainRun(tag, epochs=epochs, lr=lr),
                                     log=lambda line: None)
    elapsed = time.perf_counter() - t0
    hit = next((s.epoch for s in run.curves if s.train_acc >= 0.95), None)
    rec.note(f"{tag}: train>=95% at epoch {hit}, val {run.best_val_acc:.3f}, {elapsed:.0f}s")
    assert hit is not None and hit <= 200, f"{tag} never reached 95% train accuracy in {epochs} epochs"
    assert run.best_val_acc >= 0.90, f"{tag} val accuracy {run.best_val_acc}"
    assert elapsed < 300, f"{tag} took {elapsed:.0f}s"
    return model, run


# ---------------------------------------------------------------------------

def test_criterion_1_gradients(criterion):
    with criterion(1, "finite-difference gradients, all ops and layers") as rec:
        t0 = time.perf_counter()
        worst = (0.0, None)
        for name, make in sorted(ALL.items()):
            for seed in range(20):
                fn, inputs = make(np.random.default_rng(1000 + seed))
                rep = T.grad_check(fn, inputs, h=1e-4, tol=1e-4)
                assert rep.max_rel_error <= 1e-4, f"{name} instance {seed}: {rep.max_rel_error:.3e}"
                worst = max(worst, (rep.max_rel_error, name), key=lambda w: w[0])
        elapsed = time.perf_counter() - t0
        rec.note(f"{len(ALL)} cases x 20, worst {worst[0]:.1e} ({worst[1]})")
        assert elapsed < 60


def naive_conv(x, k, b, stride, pad):
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + w] = x
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for i in range(n):
        for r in range(oh):
            for c in range(ow):
                for o in range(cout):
                    acc = b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for ci in range(cin):
                                acc += xp[i, r * stride + u, c * stride + v, ci] * k[u, v, ci, o]
                    out[i, r, c, o] = acc
    return out


def test_criterion_2_conv_oracle(criterion):
    with criterion(2, "conv2d against nested-loop reference") as rec:
        rng = np.random.default_rng(2)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            n, h, w, cin, cout = (int(v) for v in rng.integers(1, [3, 10, 10, 5, 5]))
            h, w = max(h, 2), max(w, 2)
            pad = int(rng.integers(0, 2))
            kh, kw = int(rng.integers(1, h + 2 * pad + 1)), int(rng.integers(1, w + 2 * pad + 1))
            stride = int(rng.integers(1, 4))
            x, k, b = rng.normal(size=(n, h, w, cin)), rng.normal(size=(kh, kw, cin, cout)), rng.normal(size=cout)
            got = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride=stride, pad=pad).numpy()
            want = naive_conv(x, k, b, stride, pad)
            assert got.shape == want.shape
            worst = max(worst, float(np.max(np.abs(got - want))))
        elapsed = time.perf_counter() - t0
        rec.note(f"100 cases, max abs error {worst:.1e}")
        assert worst <= 1e-6 and elapsed < 10


def brute_metrics(y, p):
    cnt = {(a, b): 0 for a in (0, 1) for b in (0, 1)}
    for a, b in zip(y, p):
        cnt[a, b] += 1
    tp, tn, fp, fn = cnt[1, 1], cnt[0, 0], cnt[0, 1], cnt[1, 0]

    def prf(tp, fp, fn):
        pr = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rc = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        return pr, rc, (2 * pr * rc / (pr + rc) if pr + rc else Fraction(0))

    return Fraction(tp + tn, len(y)), prf(tp, fp, fn), prf(tn, fn, fp)


def pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg)) for p in pos)
    return wins / (len(pos) * len(neg))


def test_criterion_3_metrics_oracle(criterion):
    with criterion(3, "metrics and AUC against brute-force oracles") as rec:
        rng = np.random.default_rng(3)
        t0 = time.perf_counter()
        tied = 0
        for trial in range(1000):
            n = int(rng.integers(1, 120))
            y = rng.integers(0, 2, size=n)
            p = rng.integers(0, 2, size=n)
            acc, pos, neg = brute_metrics(y.tolist(), p.tolist())
            m = MT.basic_metrics(MT.confusion(y, p))
            assert m.accuracy == float(acc)
            for got, want in ((m.per_class["Accident"], pos), (m.per_class["No Accident"], neg)):
                assert (got.precision, got.recall, got.f1) == tuple(float(v) for v in want)
            if 0 < y.sum() < n:
                # half the sets draw scores from a coarse grid so ties are common
                s = rng.integers(0, 6, size=n) / 5 if trial % 2 else rng.uniform(size=n)
                tied += len(np.unique(s)) < n
                _, auc = MT.roc_auc(y, s)
                assert abs(auc - pairwise_auc(y, s)) <= 1e-9
        elapsed = time.perf_counter() - t0
        rec.note(f"1000 sets, {tied} AUC cases with ties")
        assert elapsed < 30


def test_criterion_4_overfit(criterion, synth64):
    with criterion(4, "CNN/FTCNN/ViT overfit the synthetic set") as rec:
        index = D.index_dataset(synth64)
        for tag, size, lr, epochs in ARCHS:
            overfit(index, tag, size, lr, epochs, rec)


def test_criterion_5_gan_sanity(criterion):
    with criterion(5, "GAN on a constant-image distribution") as rec:
        cfg = G.GanTrainConfig(batch_size=16, latent_dim=32, check_freeze=True, seed=0)
        gen, disc = M.build_dcgan(cfg.latent_dim, (16, 16, 3), seed=0)
        opts = G.make_optimizers(gen, disc, cfg)
        rng = np.random.default_rng(5)
        real = np.full((16, 16, 16, 3), 0.5, dtype=np.float32)
        t0 = time.perf_counter()
        for step in range(1, 501):
            # check_freeze asserts both freeze directions bitwise on every step
            stats = G.gan_epoch(gen, disc, real, cfg, opts, rng)
            assert all(math.isfinite(v) for v in stats), f"non-finite stats at step {step}"
            if step == 200:
                samples = np.stack([img.pixels for img in G.generate_images(gen, 64, seed=7)])
                mean = float(samples.mean())
                acc = G.discriminator_accuracy(gen, disc, real, np.random.default_rng(8))
        for p in list(gen.parameters().values()) + list(disc.parameters().values()):
            assert np.isfinite(p.data).all()
        elapsed = time.perf_counter() - t0
        rec.note(f"step 200: sample mean {mean:.3f}, D acc {acc:.3f}; 500 finite steps in {elapsed:.0f}s")
        assert abs(mean - 0.5) <= 0.15
        assert 0.40 <= acc <= 0.75
        assert elapsed < 300


def test_criterion_6_augmentation(criterion, synth64, tmp_path):
    with criterion(6, "GAN augmentation keeps the bars and the held-out splits") as rec:
        root = tmp_path / "data"
        shutil.copytree(synth64, root)
        index = D.index_dataset(root)
        before = index["train"].counts()
        digests = {s: index[s].digest() for s in ("val", "test")}
        images, labels = [], []
        for label, name in enumerate(index["train"].class_names):
            real = np.stack([D.normalize(D.read_image(p)).pixels for p in index["train"].files[name]])
            res = G.train_gan(real, G.GanTrainConfig(epochs=15, seed=label), log=lambda line: None)
            images += G.generate_images(res.gen, 32, seed=100 + label)
            labels += [label] * 32
        merged = D.merge_augmented(index["train"], images, labels, batch_id="accept")
        after = D.index_dataset(root)
        assert merged.counts() == {k: v + 32 for k, v in before.items()}
        assert after["train"].counts() == merged.counts()
        assert {s: after[s].digest() for s in ("val", "test")} == digests
        rec.note(f"train {sum(before.values())} -> {len(merged)}, val/test digests unchanged")
        for tag, size, lr, epochs in ARCHS:
            overfit(after, tag, size, lr, epochs, rec)


def test_criterion_7_determinism(criterion, synth64, tmp_path):
    with criterion(7, "seeded reruns and checkpoint round trip") as rec:
        index = D.index_dataset(synth64)
        train, val = D.load_split(index["train"], 64, ENH), D.load_split(index["val"], 64, ENH)
        curves, models = [], []
        for k in range(2):
            model, run = TR.train_classifier(M.build_cnn((64, 64, 3), seed=11), train, val,
                                             TR.TrainRun(epochs=3, seed=11), log=lambda line: None)
            curves.append(TR.log_curves(run, tmp_path / f"curves{k}.csv").read_bytes())
            models.append(model)
        assert curves[0] == curves[1]
        path = TR.save_checkpoint(models[0], tmp_path / "model.ckpt")
        loaded = TR.load_checkpoint(path)
        for name, p in models[0].parameters().items():
            assert np.array_equal(loaded.parameters()[name].data, p.data)
        test = D.load_split(index["test"], 64, ENH)
        a, b = M.predict(models[0], test.images), M.predict(loaded, test.images)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        rec.note(f"curve CSVs identical ({len(curves[0])} bytes); {len(test)} predictions identical")


REFERENCE_ROWS = [
    ("CNN", (0.82, 0.96, 0.88), (0.96, 0.81, 0.88), (0.89, 0.88, 0.88)),
    ("FTCNN", (0.92, 0.96, 0.94), (0.96, 0.92, 0.94), (0.94, 0.94, 0.94)),
    ("ViT Model", (0.92, 0.98, 0.95), (0.98, 0.92, 0.95), (0.95, 0.95, 0.95)),
]


def reference_report(model, no_acc, acc, weighted):
    per_class = {"No Accident": MT.ClassMetrics(*no_acc), "Accident": MT.ClassMetrics(*acc)}
    avg = dict(zip(MT.METRIC_KEYS, weighted))
    return MT.MetricsReport(per_class, avg, avg, weighted[2], model=model)


def test_criterion_8_report(criterion, tmp_path):
    with criterion(8, "report layout and structured round trip") as rec:
        for model, no_acc, acc, weighted in REFERENCE_ROWS:
            lines = MT.render_report(reference_report(model, no_acc, acc, weighted)).splitlines()
            assert lines[0].split() == ["Model", "Class", "Precision", "Recall", "F1-Score"]
            want = [[*model.split(), "No", "Accident", *map(MT.fmt2, no_acc)],
                    ["Accident", *map(MT.fmt2, acc)],
                    ["Weighted", "Avg", *map(MT.fmt2, weighted)]]
            assert [line.split() for line in lines[2:5]] == want
        first = MT.render_report(reference_report(*REFERENCE_ROWS[0])).splitlines()[2]
        assert first.split() == "CNN No Accident 0.82 0.96 0.88".split()

        rng = np.random.default_rng(8)
        y = rng.integers(0, 2, size=200)
        scores = np.clip(0.35 * y + 0.65 * rng.uniform(size=200), 0, 1)
        rep = MT.build_report(y, scores, model="FTCNN")
        MT.write_report(rep, tmp_path)
        back = MT.read_report(tmp_path / "report.json")
        diffs = [abs(back.accuracy - rep.accuracy), abs(back.auc - rep.auc)]
        for name, m in rep.per_class.items():
            diffs += [abs(getattr(back.per_class[name], k) - getattr(m, k)) for k in MT.METRIC_KEYS]
        for key in MT.METRIC_KEYS:
            diffs += [abs(back.macro[key] - rep.macro[key]), abs(back.weighted[key] - rep.weighted[key])]
        diffs += [abs(a.fpr - b.fpr) + abs(a.tpr - b.tpr) for a, b in zip(back.roc, rep.roc)]
        rec.note(f"3 reference report blocks match; max round-trip error {max(diffs):.1e}")
        assert max(diffs) <= 1e-12 and len(back.roc) == len(rep.roc)


def test_criterion_9_cli_end_to_end(criterion, tmp_path):
    with criterion(9, "CLI end to end") as rec:
        root, run_dir = tmp_path / "data", tmp_path / "run"
        common = ["--root", str(root), "--run-dir", str(run_dir), "--seed", "0"]
        steps = [
            ["synth-data", "--root", str(root), "--n", "32", "--size", "64", "--seed", "0"],
            ["train-gan", *common, "--gan-epochs", "10", "--save-interval", "5"],
            ["augment", *common, "--per-class", "16"],
            ["train", *common, "--input", "64", "--epochs", "15"],
            ["evaluate", *common, "--input", "64"],
            ["report", *common],
        ]
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        t0 = time.perf_counter()
        for argv in steps:
            proc = subprocess.run([sys.executable, "-m", "acdl.cli", *argv], capture_output=True, text=True,
                                  env=env, timeout=600)
            assert proc.returncode == 0, f"{argv[0]} exited {proc.returncode}: {proc.stderr[-2000:]}"
        elapsed = time.perf_counter() - t0
        report = (run_dir / "report.txt").read_text()
        acc = next(line for line in report.splitlines() if line.startswith("Accuracy:"))
        rec.note(f"6 commands, exit 0, {elapsed:.0f}s, test {acc}")
        for name in ("model.ckpt", "curves.csv", "predictions.csv", "report.json", "roc.csv", "augment.json"):
            assert (run_dir / name).is_file(), name
        assert (run_dir / "gan" / "accident" / "samples" / "epoch_10.ppm").is_file()
        assert elapsed < 600
