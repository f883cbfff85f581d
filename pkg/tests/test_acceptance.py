"""Acceptance gate.

Eight checks, one per numbered criterion, each printing a single
``criterion N: PASS`` line with its measured figures (run pytest with -s to
watch them). Budgets: the full file stays well inside the per-criterion
runtime limits on a desktop core; the denoising comparison dominates.
"""

import csv
import json
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from selfonn import backprop as bp
from selfonn import gradcheck as gc
from selfonn import tasks_data as td
from selfonn import tensor_core as tc
from selfonn.cli import main
from selfonn.network import (
    LayerSpec,
    Network,
    OperatorSet,
    Sampling,
    count_macs,
    count_params,
)
from selfonn.tasks_data import Sample
from selfonn.trainer import TrainConfig, sgd_step, train

from cnn_reference import RefCNN, RefLayer


def spec(neurons, kernel, q=1, pool="sum", act="tanh", nodal="maclaurin",
         sampling=Sampling()):
    return LayerSpec(neurons, kernel, q,
                     OperatorSet(pool=pool, activation=act, nodal=nodal),
                     sampling)


OPERATOR_SETS = (
    ("sum", "tanh", "maclaurin"),
    ("sum", "tanh", "sin"),
    ("sum", "tanh", "exp"),
    ("sum", "lincut", "chirp"),
    ("median", "tanh", "mul"),
)


def random_two_layer(rng, pool, act, nodal, with_sampling):
    """One network drawn from the criterion-1 envelope."""
    q = int(rng.choice([1, 3, 7])) if nodal == "maclaurin" else 1
    k1 = int(rng.integers(1, 4))
    k2 = int(rng.integers(1, 4))
    n_hidden = int(rng.integers(1, 3))
    ops = OperatorSet(pool, act, nodal)
    if with_sampling:
        # shrink by 2 then grow back: sizes must stay divisible/inside 12
        s1, s2 = Sampling("down", (2, 2)), Sampling("up", (2, 2))
        h = int(rng.choice([6, 8, 10])) + k1 - 1  # even pre-sampling size
    else:
        s1 = s2 = Sampling()
        h = int(rng.integers(k1 + k2, 13))
    h = min(h, 12)
    specs = [LayerSpec(n_hidden, (k1, k1), q, ops, s1),
             LayerSpec(1, (k2, k2), q, ops, s2)]
    seed = int(rng.integers(1 << 30))
    return specs, (h, h), seed


def drawn_samples(rng, net, input_size, count=2):
    out_shape = net(rng.uniform(-0.9, 0.9, input_size)).shape
    return [
        Sample(rng.uniform(-0.9, 0.9, input_size),
               rng.uniform(-0.9, 0.9, out_shape), f"a{i}")
        for i in range(count)
    ]


def smooth_instance(rng, specs, input_size, seed):
    """Network + samples resampled until safely away from non-smooth points."""
    for attempt in range(64):
        net = Network.from_specs(specs, seed=[seed, attempt])
        samples = drawn_samples(rng, net, input_size)
        if gc.nonsmooth_margin(net, samples) > gc.NONSMOOTH_MARGIN:
            return net, samples
    raise AssertionError("could not find a smooth configuration")


def test_criterion_1_gradient_oracle_suite():
    rng = np.random.default_rng(20260814)
    t0 = time.time()
    checked = 0
    worst = 0.0
    while checked < 50:
        pool, act, nodal = OPERATOR_SETS[checked % len(OPERATOR_SETS)]
        with_sampling = bool(checked % 2)
        specs, input_size, seed = random_two_layer(rng, pool, act, nodal,
                                                   with_sampling)
        net, samples = smooth_instance(rng, specs, input_size, seed)
        res = gc.check_network(net, samples)
        assert res.passed, (
            f"net {checked} ({pool}/{act}/{nodal} q={specs[0].q_order} "
            f"size={input_size}): {res.n_failed} entries over tolerance, "
            f"max rel {res.max_rel:.3e}"
        )
        worst = max(worst, res.max_rel)
        checked += 1
    elapsed = time.time() - t0
    assert elapsed < 300
    print(f"criterion 1: PASS (50 nets, worst rel err {worst:.3e}, "
          f"{elapsed:.1f}s)")


def test_criterion_2_cnn_superset():
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(20):
        n1 = int(rng.integers(1, 4))
        n2 = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        layout = trial % 3
        if layout == 0:
            samplings = [Sampling(), Sampling()]
            h = int(rng.integers(2 * k + 1, 13))
        elif layout == 1:
            samplings = [Sampling("down", (2, 2)), Sampling()]
            h = 8 + k - 1
        else:
            samplings = [Sampling("up", (2, 2)), Sampling()]
            h = int(rng.integers(k + 2, 7))
        specs = [
            LayerSpec(n1, (k, k), 1, OperatorSet("sum", "tanh", "mul"),
                      samplings[0]),
            LayerSpec(1, (k, k), 1, OperatorSet("sum", "tanh", "mul"),
                      samplings[1]),
        ]
        net = Network.from_specs(specs, seed=int(rng.integers(1 << 30)))
        ref = RefCNN([
            RefLayer(p.weights[..., 0], p.biases,
                     activation=sp.operators.activation,
                     sampling=(sp.sampling.mode, *sp.sampling.factors))
            for sp, p in zip(specs, net.params)
        ])
        img = rng.uniform(-1, 1, (h, h))
        fp = net.forward(img)
        ref_out = ref.forward(img)
        worst = max(worst, float(np.max(np.abs(fp.outputs - ref_out))))
        assert_allclose(fp.outputs, ref_out, rtol=0, atol=1e-12)

        target = rng.uniform(-1, 1, fp.outputs.shape)
        loss, grads, dys = bp.backward_pass_deltas(net, fp, target)
        ref_loss, ref_grads, _ = ref.backward(target)
        assert abs(loss - ref_loss) <= 1e-12
        for g, (dw, db) in zip(grads, ref_grads):
            assert_allclose(g.weights[..., 0], dw, rtol=0, atol=1e-12)
            assert_allclose(g.biases, db, rtol=0, atol=1e-12)
        for d, ref_d in zip(dys, ref.d_outs):
            assert_allclose(d, ref_d, rtol=0, atol=1e-12)

        sgd_step(net.params, grads, 0.05)
        ref.sgd(ref_grads, 0.05)
        for p, rl in zip(net.params, ref.layers):
            assert_allclose(p.weights[..., 0], rl.w, rtol=0, atol=1e-12)
            assert_allclose(p.biases, rl.b, rtol=0, atol=1e-12)
    print(f"criterion 2: PASS (20 nets, worst forward gap {worst:.3e})")


def test_criterion_3_fast_generic_equivalence():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        specs, input_size, seed = random_two_layer(
            rng, "sum", "tanh", "maclaurin", with_sampling=bool(trial % 2)
        )
        net = Network.from_specs(specs, seed=seed)
        img = rng.uniform(-1, 1, input_size)
        fast = net.forward(img, path="fast")
        gen = net.forward(img, path="generic")
        gap = float(np.max(np.abs(fast.outputs - gen.outputs)))
        assert gap <= 1e-12

        target = rng.uniform(-1, 1, fast.outputs.shape)
        _, g_fast, d_fast = bp.backward_pass_deltas(net, fast, target,
                                                    path="auto")
        _, g_gen, d_gen = bp.backward_pass_deltas(net, gen, target,
                                                  path="generic")
        for a, b in zip(g_fast, g_gen):
            gap = max(gap, float(np.max(np.abs(a.weights - b.weights))))
            gap = max(gap, float(np.max(np.abs(a.biases - b.biases))))
        for a, b in zip(d_fast, d_gen):
            gap = max(gap, float(np.max(np.abs(a - b))))
        assert gap <= 1e-12
        worst = max(worst, gap)
    print(f"criterion 3: PASS (20 nets, worst path gap {worst:.3e})")


def toy_training_specs(q, nodal):
    ops = OperatorSet("sum", "tanh", nodal)
    return [
        LayerSpec(1, (2, 2), q, ops, Sampling("up", (2, 2))),
        LayerSpec(1, (2, 2), q, ops),
    ]


@pytest.mark.slow
def test_criterion_4_toy_rotate180():
    t0 = time.time()
    samples = td.make_toy_rotate180(64, seed=5)
    cfg = TrainConfig(learning_rate=0.01, max_iter=240, runs=3, seed=0)
    selfonn = train(toy_training_specs(13, "maclaurin"), samples, cfg)
    cnn = train(toy_training_specs(1, "mul"), samples, cfg)
    ratio = selfonn.best_log.final_mse / cnn.best_log.final_mse
    elapsed = time.time() - t0
    assert ratio <= 0.1, (
        f"Self-ONN/CNN final MSE ratio {ratio:.4f} exceeds 1/10 "
        f"({selfonn.best_log.final_mse:.6f} vs {cnn.best_log.final_mse:.6f})"
    )
    assert elapsed < 120
    print(f"criterion 4: PASS (mse ratio 1/{1 / ratio:.1f}, "
          f"self-onn {selfonn.best_log.final_mse:.2e} vs "
          f"cnn {cnn.best_log.final_mse:.2e}, {elapsed:.0f}s)")


def denoise_training_specs(neurons, q, nodal):
    ops = OperatorSet("sum", "tanh", nodal)
    n1, n2 = neurons
    return [
        LayerSpec(n1, (3, 3), q, ops, Sampling("down", (2, 2))),
        LayerSpec(n2, (3, 3), q, ops, Sampling("up", (2, 2))),
        LayerSpec(1, (3, 3), q, ops),
    ]


@pytest.mark.slow
def test_criterion_5_denoising_direction():
    t0 = time.time()
    corpus = td.build_denoise_corpus(100, 0.0, (60, 60), seed=11)
    folds = td.make_folds(corpus, n_folds=10, train_fraction=0.10, seed=11)[:3]
    cfg = TrainConfig(learning_rate=0.0075, max_iter=240, runs=3, seed=41,
                      init_rule="glorot_uniform_qdamp")
    means = {}
    for name, specs in (
        ("selfonn", denoise_training_specs((6, 10), 7, "maclaurin")),
        ("cnn", denoise_training_specs((16, 32), 1, "mul")),
    ):
        snrs = [train(specs, fold.train, cfg).best_log.final_snr_db
                for fold in folds]
        means[name] = float(np.mean(snrs))
    gap = means["selfonn"] - means["cnn"]
    elapsed = time.time() - t0
    assert gap >= 0.3, (
        f"Self-ONN {means['selfonn']:.3f} dB vs CNN {means['cnn']:.3f} dB: "
        f"gap {gap:+.3f} dB under the 0.3 dB bar"
    )
    assert elapsed < 1800
    print(f"criterion 5: PASS (self-onn {means['selfonn']:.3f} dB, "
          f"cnn {means['cnn']:.3f} dB, gap {gap:+.3f} dB, {elapsed:.0f}s)")


def instrumented_counts(specs, input_size, in_neurons=1):
    """Count MACs by actually performing them, one multiply at a time."""
    net = Network.from_specs(specs, in_neurons=in_neurons, seed=0)
    rng = np.random.default_rng(0)
    maps = rng.uniform(-1, 1, (in_neurons,) + tuple(input_size))
    macs = 0
    params = 0
    for spec_l, p in zip(specs, net.params):
        params += p.weights.size + p.biases.size
        kx, ky = spec_l.kernel
        oh, ow = maps.shape[1] - kx + 1, maps.shape[2] - ky + 1
        outs = []
        for i in range(spec_l.neurons):
            x = np.full((oh, ow), p.biases[i])
            macs += oh * ow
            for kk in range(maps.shape[0]):
                pows = tc.power_maps(maps[kk], spec_l.q_order)
                for m in range(oh):
                    for n in range(ow):
                        for r in range(kx):
                            for t in range(ky):
                                for q in range(spec_l.q_order):
                                    x[m, n] += (p.weights[i, kk, r, t, q]
                                                * pows[q, m + r, n + t])
                                    macs += 1
            outs.append(np.tanh(x))
        maps = np.stack(outs)
        if spec_l.sampling.mode == "down":
            fx, fy = spec_l.sampling.factors
            maps = np.stack([tc.downsample_avg(m, fx, fy) for m in maps])
        elif spec_l.sampling.mode == "up":
            fx, fy = spec_l.sampling.factors
            maps = np.stack([tc.upsample_zero_order(m, fx, fy) for m in maps])
    return params, macs


def test_criterion_6_cost_counters():
    rng = np.random.default_rng(99)
    for trial in range(10):
        in_neurons = int(rng.integers(1, 3))
        n1 = int(rng.integers(1, 4))
        q = int(rng.integers(1, 6))
        k = int(rng.integers(1, 4))
        mode = ("none", "down", "up")[trial % 3]
        if mode == "down":
            s1 = Sampling("down", (2, 2))
            h = 8 + k - 1
        elif mode == "up":
            s1 = Sampling("up", (2, 2))
            h = int(rng.integers(k + 1, 6))
        else:
            s1 = Sampling()
            h = int(rng.integers(2 * k + 1, 9))
        specs = [spec(n1, (k, k), q, sampling=s1), spec(1, (k, k), q)]
        want_params = count_params(specs, in_neurons)
        per_layer, want_macs = count_macs(specs, (h, h), in_neurons)
        got_params, got_macs = instrumented_counts(specs, (h, h), in_neurons)
        assert want_params == got_params
        assert want_macs == got_macs == sum(per_layer)

    # Q = 1 reduces to the standard CNN bookkeeping
    cnn = [spec(16, (3, 3)), spec(1, (3, 3))]
    assert count_params(cnn) == 16 * (9 + 1) + 1 * (16 * 9 + 1)
    _, macs = count_macs(cnn, (8, 8))
    assert macs == 16 * 36 * (9 + 1) + 1 * 16 * (16 * 9 + 1)
    print("criterion 6: PASS (10 instrumented configs, integer equality)")


def test_criterion_7_metric_unit_suite():
    # snr_db definitional cases
    ref = np.array([0.0, 2.0, 0.0, 2.0])
    assert td.snr_db(ref, ref + np.array([1.0, -1.0, 1.0, -1.0])) == 0.0
    rng = np.random.default_rng(0)
    r = rng.uniform(-1, 1, (8, 8))
    o = r + 0.05 * rng.standard_normal((8, 8))
    assert abs(td.snr_db(r, o) - td.snr_db(7.5 * r, 7.5 * o)) <= 1e-12

    # gwn calibration
    img = rng.uniform(-1, 1, (20, 20))
    for snr in (0.0, 20.0):
        measured = [td.snr_db(img, td.add_gwn_at_snr(img, snr, seed=s))
                    for s in range(100)]
        assert np.max(np.abs(np.asarray(measured) - snr)) <= 0.2

    # confusion-matrix cases
    mask = np.array([1, 1, 1, 0, 0, 0, 0, 0], dtype=bool)
    out = np.array([0.5, 0.5, -0.5, 0.5, -1, -1, -1, -1])
    f1, ce = td.f1_and_ce(out, mask)
    assert f1 == pytest.approx(2 / 3) and ce == pytest.approx(0.25)
    f1, ce = td.f1_and_ce(np.where(mask, 1.0, -1.0), mask)
    assert (f1, ce) == (1.0, 0.0)
    f1, ce = td.f1_and_ce(np.where(mask, -1.0, 1.0), mask)
    assert (f1, ce) == (0.0, 1.0)
    print("criterion 7: PASS (snr/gwn/f1 definitional cases)")


def test_criterion_8_determinism(tmp_path):
    doc = {
        "network": {
            "input_size": [3, 3],
            "layers": [
                {"neurons": 1, "kernel": [2, 2], "q_order": 5,
                 "sampling": {"mode": "up", "factors": [2, 2]}},
                {"neurons": 1, "kernel": [2, 2], "q_order": 5},
            ],
        },
        "training": {"learning_rate": 0.01, "max_iter": 12, "runs": 3,
                     "seed": 17},
        "task": "toy_rotate180",
        "dataset": {"generator": {"count": 12, "seed": 3}},
        "output_dir": str(tmp_path / "a"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["train", str(cfg_path)]) == 0
    files = ["summary.csv", "fold00/best.json", "fold00/trainlog_run0.csv",
             "fold00/trainlog_run2.csv"]
    first = {f: (tmp_path / "a" / f).read_bytes() for f in files}

    doc["output_dir"] = str(tmp_path / "b")
    cfg_path.write_text(json.dumps(doc))
    assert main(["train", str(cfg_path)]) == 0
    for f in files:
        assert (tmp_path / "b" / f).read_bytes() == first[f], f

    # threaded restarts: metrically identical to sequential
    samples = td.make_toy_rotate180(12, seed=3)
    specs = toy_training_specs(5, "maclaurin")
    seq = train(specs, samples,
                TrainConfig(learning_rate=0.01, max_iter=12, runs=3, seed=17))
    par = train(specs, samples,
                TrainConfig(learning_rate=0.01, max_iter=12, runs=3, seed=17,
                            threads=3))
    assert seq.best_index == par.best_index
    for la, lb in zip(seq.logs, par.logs):
        assert abs(la.final_mse - lb.final_mse) <= 1e-12
    for pa, pb in zip(seq.network.params, par.network.params):
        assert float(np.max(np.abs(pa.weights - pb.weights))) <= 1e-12
    print("criterion 8: PASS (byte-identical reruns, threads<=3 gap 0)")
