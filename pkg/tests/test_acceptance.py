"""Acceptance gate: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
Criteria 7 and 8 train real models; by default they run the desk-scale
configuration (a few minutes on one CPU core). Set SEMAUG_ACCEPT_FULL=1 for
the full-size variant (2000-step VAE-GAN on the 477-head synthetic set).
"""

import math
import os
from fractions import Fraction

import numpy as np
import pytest
import torch
from scipy import stats as sps

from semaug import augment, data, evalcls, vaegan

torch.set_num_threads(max(1, os.cpu_count() or 1))

FULL = os.environ.get("SEMAUG_ACCEPT_FULL") == "1"


def ok(n, msg):
    print(f"\nPASS criterion {n}: {msg}")


# ---------------------------------------------------------------- criterion 1

def test_c1_loss_formulas():
    rng = np.random.default_rng(0)
    # kld vs closed-form scalar evaluation on 1000 random codes
    for _ in range(1000):
        mu = rng.normal(size=(1, 4))
        log_var = rng.normal(scale=0.6, size=(1, 4))
        got = vaegan.kld_loss(torch.tensor(mu), torch.tensor(log_var)).item()
        expect = np.mean(0.5 * (mu**2 + np.exp(log_var) - log_var - 1.0))
        assert abs(got - expect) <= 1e-10 * max(1.0, abs(expect))

    # recon vs scalar-loop oracle
    P = vaegan.FeaturePyramid().double()
    x = (torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1)
    xp = (torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1)
    total, _, _ = vaegan.recon_loss(x, xp, P, lambda_p=1.0)
    with torch.no_grad():
        fx, fxp = P(x), P(xp)
    pixel = sum(abs(a - b) for a, b in zip(x.numpy().ravel(), xp.numpy().ravel())) / x.numel()
    stage = [
        sum(abs(u - v) for u, v in zip(a.numpy().ravel(), b.numpy().ravel())) / a.numel()
        for a, b in zip(fx, fxp)
    ]
    expect = pixel + sum(stage) / len(stage)
    assert abs(total.item() - expect) / abs(expect) <= 1e-6

    # hinge hand-evaluated cases, exact
    assert vaegan.hinge_d_loss(torch.tensor([1.0, 2.0]), torch.tensor([-1.0, -3.0])).item() == 0.0
    assert vaegan.hinge_d_loss(torch.tensor([0.0]), torch.tensor([0.0])).item() == 2.0
    assert vaegan.hinge_g_loss(torch.tensor([0.25])).item() == -0.25
    ok(1, "kld/recon/hinge match independent oracles at stated tolerances")


# ---------------------------------------------------------------- criterion 2

def test_c2_gradients():
    from test_gradients import TINY, fd_check

    model = vaegan.build_model(TINY)
    for mod in (model.encoder, model.generator, model.discriminator, model.perceptual):
        mod.double()
    torch.manual_seed(1)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    r = torch.randn(2, TINY.latent_dim, dtype=torch.float64)

    fd_check(lambda: vaegan.kld_loss(*model.encoder(x)), list(model.encoder.parameters()), seed=1)

    def recon_fn():
        mu, log_var = model.encoder(x)
        x_prime = model.generator(mu + (0.5 * log_var).exp() * r)
        return vaegan.recon_loss(x, x_prime, model.perceptual, lambda_p=1.0)[0]

    fd_check(recon_fn, (list(model.encoder.parameters()) + list(model.generator.parameters()))[::4], seed=2)

    with torch.no_grad():
        mu, log_var = model.encoder(x)
        x_fake = model.generator(mu + (0.5 * log_var).exp() * r)
        real, fake = model.discriminator(x), model.discriminator(x_fake)
    assert torch.all((1 - real).abs() > 1e-3) and torch.all((1 + fake).abs() > 1e-3)
    fd_check(
        lambda: vaegan.hinge_d_loss(model.discriminator(x), model.discriminator(x_fake)),
        list(model.discriminator.parameters()), seed=3,
    )
    fd_check(
        lambda: vaegan.hinge_g_loss(model.discriminator(model.generator(r))),
        list(model.generator.parameters())[::4], seed=4,
    )
    ok(2, "analytic gradients match central differences (rel err <= 1e-4, double precision)")


# ---------------------------------------------------------------- criterion 3

def test_c3_sampling_statistics():
    M = 100_000
    # reparameterize: N(1.5, 4) per dim
    gen = torch.Generator().manual_seed(3)
    mu = torch.full((M, 2), 1.5)
    log_var = torch.full((M, 2), math.log(4.0))
    z = vaegan.reparameterize(mu, log_var, gen).numpy()
    assert np.all(np.abs(z.mean(axis=0) - 1.5) < 3 * 2 / math.sqrt(M))
    assert np.all(np.abs(z.var(axis=0) - 4.0) < 0.05 * 4.0)

    # augment_latent: N(mu, s * sigma2) with s = 2, sigma2 = (1, 4)
    rng = np.random.default_rng(3)
    sample = np.stack(
        [augment.augment_latent(np.array([0.5, -0.5]), np.array([1.0, 4.0]), 2.0, rng) for _ in range(M)]
    )
    assert np.all(np.abs(sample.mean(axis=0) - [0.5, -0.5]) < 3 * np.sqrt([2.0, 8.0]) / math.sqrt(M))
    assert np.all(np.abs(sample.var(axis=0) - [2.0, 8.0]) < 0.05 * np.array([2.0, 8.0]))

    # exact identities
    mu_v = np.array([0.3, -0.7])
    assert np.array_equal(augment.augment_latent(mu_v, np.array([1.0, 2.0]), 0.0, rng), mu_v)
    assert np.array_equal(augment.augment_latent(mu_v, np.zeros(2), 3.0, rng), mu_v)
    z0 = vaegan.reparameterize(torch.tensor([[1.0]]), torch.full((1, 1), -float("inf")), gen)
    assert z0.item() == 1.0
    ok(3, "reparameterize/augment_latent match asserted Gaussians; zero cases exact")


# ---------------------------------------------------------------- criterion 4

def test_c4_class_stats_oracle():
    from test_augment import stats_oracle

    rng = np.random.default_rng(4)
    for _ in range(6):
        d = int(rng.integers(1, 17))
        n = int(rng.integers(5, 1001))
        C = int(rng.integers(2, 8))
        mus = rng.normal(size=(n, d)) * rng.uniform(0.5, 2.0)
        labels = rng.integers(C, size=n).tolist()
        st = augment.compute_class_stats(mus, labels, C)
        oracle = stats_oracle(mus, labels, C)
        for c in range(C):
            n_c, mean, var, fb = oracle[c]
            assert st.counts[c] == n_c
            np.testing.assert_allclose(st.sigma2[c], var, rtol=1e-10, atol=1e-12)
            if n_c:
                np.testing.assert_allclose(st.mean[c], mean, rtol=1e-10, atol=1e-12)
            assert st.fallback_used[c] == fb

    # singleton fallback exercised explicitly
    mus = np.vstack([rng.normal(size=(10, 3)), [[5.0, 5.0, 5.0]]])
    st = augment.compute_class_stats(mus, [0] * 10 + [1], 2)
    assert st.fallback_used[1]
    np.testing.assert_allclose(st.sigma2[1], mus.var(axis=0, ddof=1), rtol=1e-10)
    ok(4, "compute_class_stats equals two-pass oracle (rel err <= 1e-10), fallback exercised")


# ---------------------------------------------------------------- criterion 5

def test_c5_sampler_and_schedule():
    # realistic long-tailed histogram, chi-square below the 0.999 quantile at N = 30,000
    counts = data.longtail_counts(7, 4772, 281, 0.62)
    assert counts[0] == 4772 and counts[-1] == 281
    shared = np.zeros((3, 2, 2), dtype=np.float32)
    samples = []
    i = 0
    for c, n in enumerate(counts):
        for _ in range(n):
            samples.append(data.LabeledSample(id=f"s{i}", label=c, image=shared))
            i += 1
    m = data.DatasetManifest(samples=samples, class_count=7, image_shape=(3, 2, 2))
    ids = data.balanced_batch(m, 30_000, np.random.default_rng(55))
    drawn = np.bincount([m.get(x).label for x in ids], minlength=7)
    chi2 = ((drawn - 30_000 / 7) ** 2 / (30_000 / 7)).sum()
    assert chi2 < sps.chi2.ppf(0.999, df=6)

    # epoch_mode exhaustively correct for all totals <= 64
    for total in range(1, 65):
        for tail in range(total + 1):
            for epoch in range(total):
                assert data.epoch_mode(epoch, total, tail, 0.5).original_only == (epoch >= total - tail)

    # augmented_view generated share at ratio 0.5 within +-0.02
    small = data.make_longtail_synthetic(3, 12, 2, 0.4, (3, 16, 16), seed=0)
    cfg = vaegan.VaeGanConfig(latent_dim=6, image_shape=(3, 16, 16), base_channels=8, total_steps=1, seed=0)
    model = vaegan.build_model(cfg)
    mus, _ = model.encode_np(data.load_images(small))
    st = augment.compute_class_stats(mus, [s.label for s in small.samples], 3)
    ds = augment.synthesize_balanced(small, model, st, augment.AugmentPlan(seed=0))
    stream = augment.augmented_view(small, ds, data.class_balanced(0.5), np.random.default_rng(5))
    draws = [next(stream) for _ in range(20_000)]
    with_gen = {c for c, pool in ds.by_class.items() if pool}
    counted = [d for d in draws if d.label in with_gen]
    share = sum(isinstance(d, augment.GeneratedSample) for d in counted) / len(counted)
    assert abs(share - 0.5) <= 0.02
    ok(5, "balanced sampler chi-square, exhaustive schedule, augmented share = 0.5 +- 0.02")


# ---------------------------------------------------------------- criterion 6

def test_c6_average_precision_oracle():
    from test_evalcls import ap_oracle

    rng = np.random.default_rng(6)
    for _ in range(400):
        n = int(rng.integers(1, 13))
        scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)
        positives = rng.integers(2, size=n)
        if positives.sum() == 0:
            positives[int(rng.integers(n))] = 1
        got = evalcls.average_precision(scores, positives)
        assert got == pytest.approx(float(ap_oracle(scores.tolist(), positives.tolist())), abs=1e-12)

    assert evalcls.average_precision([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0

    labels = np.random.default_rng(1).integers(3, size=150)
    scores = np.random.default_rng(2).random((150, 3))
    rep = evalcls.report_from_scores(scores, labels, 3)
    assert rep.total_precision == np.trace(rep.confusion) / rep.confusion.sum()
    assert rep.mean_ap == float(np.mean([a for a in rep.per_class_ap if a is not None]))
    ok(6, "AP equals exact rational brute force for n <= 12; report identities exact")


# ---------------------------------------------------------------- criteria 7 & 8

if FULL:
    TRAIN_SPEC = dict(head=477, tail=28, steps=2000, epochs=20, cls_seeds=[0, 1, 2])
else:
    TRAIN_SPEC = dict(head=170, tail=10, steps=2000, epochs=10, cls_seeds=[0, 1, 2])


@pytest.fixture(scope="module")
def pipeline():
    """Shared desk-scale pipeline: dataset, trained VAE-GAN, augmented dataset."""
    train = data.make_longtail_synthetic(7, TRAIN_SPEC["head"], TRAIN_SPEC["tail"], 0.62, (3, 32, 32), seed=0)
    # balanced test set: per-class metrics (tail recall, per-class AP) need equal support
    test = data.make_longtail_synthetic(7, 40, 40, 1.0, (3, 32, 32), seed=1)
    cfg = vaegan.VaeGanConfig(total_steps=TRAIN_SPEC["steps"], beta_max=0.2, seed=0)
    probe = torch.from_numpy(data.load_images(train, list(range(0, len(train), 7))))
    untrained = vaegan.build_model(cfg)

    def probe_l1(m):
        mu, _ = m.encode(probe)
        return (probe - m.decode(mu)).abs().mean().item()

    base_l1 = probe_l1(untrained)
    model, _ = vaegan.train_vaegan(train, cfg)
    trained_l1 = probe_l1(model)

    mus, _ = model.encode_np(data.load_images(train))
    stats = augment.compute_class_stats(mus, [s.label for s in train.samples], 7)
    ds = augment.synthesize_balanced(train, model, stats, augment.AugmentPlan(strength=1.0, seed=0))
    return dict(train=train, test=test, model=model, augmented=ds, base_l1=base_l1, trained_l1=trained_l1)


def test_c7_vaegan_trainability(pipeline):
    improvement = 1.0 - pipeline["trained_l1"] / pipeline["base_l1"]
    threshold = 0.40
    assert improvement >= threshold, (
        f"probe L1 improved only {improvement:.1%} ({pipeline['base_l1']:.4f} -> {pipeline['trained_l1']:.4f})"
    )
    ok(7, f"probe reconstruction L1 improved {improvement:.1%} (>= {threshold:.0%}) after {TRAIN_SPEC['steps']} steps")


def test_c8_directional_comparison(pipeline):
    cfg = evalcls.ClassifierConfig(
        epochs=TRAIN_SPEC["epochs"], batch_size=32, lr=1e-3, width=16, original_only_tail=2
    )
    result = evalcls.run_strategy_comparison(
        pipeline["train"], pipeline["test"], cfg, TRAIN_SPEC["cls_seeds"], augmented=pipeline["augmented"]
    )
    rows = {r.strategy: r for r in result.rows}
    assert rows["ours"].map_mean > rows["none"].map_mean
    assert rows["ours"].map_mean >= rows["balanced"].map_mean
    # tail-class recall improves for Ours vs None on every seed
    by = {}
    for rep in result.runs:
        by[(rep.metadata["strategy"], rep.metadata["seed"])] = rep.per_class_recall()[-1]
    for seed in TRAIN_SPEC["cls_seeds"]:
        assert by[("ours", seed)] > by[("none", seed)], (
            f"seed {seed}: tail recall ours {by[('ours', seed)]:.3f} vs none {by[('none', seed)]:.3f}"
        )
    ok(
        8,
        "mAP ordering ours {:.4f} > none {:.4f}, ours >= balanced {:.4f}; tail recall up on every seed".format(
            rows["ours"].map_mean, rows["none"].map_mean, rows["balanced"].map_mean
        ),
    )


# ---------------------------------------------------------------- criterion 9

def test_c9_determinism_and_roundtrip(tmp_path):
    manifest = data.make_longtail_synthetic(3, 8, 2, 0.5, (3, 16, 16), seed=0)
    cfg = vaegan.VaeGanConfig(latent_dim=6, image_shape=(3, 16, 16), base_channels=8, total_steps=3, seed=7)
    model_a, log_a = vaegan.train_vaegan(manifest, cfg)
    model_b, log_b = vaegan.train_vaegan(manifest, cfg)
    assert log_a == log_b

    probe = torch.from_numpy(data.load_images(manifest, [0, 1, 2, 3]))
    path = str(tmp_path / "ckpt.pt")
    model_a.save(path)
    back = vaegan.TrainedVaeGan.load(path)
    mu_a, lv_a = model_a.encode(probe)
    mu_b, lv_b = back.encode(probe)
    assert torch.equal(mu_a, mu_b) and torch.equal(lv_a, lv_b)
    assert torch.equal(model_a.discriminate(probe), back.discriminate(probe))

    ccfg = evalcls.ClassifierConfig(epochs=2, batch_size=8, strategy="balanced", seed=5, width=8)
    reports = []
    for _ in range(2):
        src = evalcls.make_train_source(manifest, ccfg)
        clf, _ = evalcls.train_classifier(src, ccfg, 3, manifest.image_shape, len(manifest))
        reports.append(evalcls.evaluate(clf, manifest))
    assert reports[0].total_precision == reports[1].total_precision
    assert reports[0].per_class_ap == reports[1].per_class_ap
    np.testing.assert_array_equal(reports[0].confusion, reports[1].confusion)
    ok(9, "identical seeds reproduce identical reports; checkpoint round-trips bit-identically")
