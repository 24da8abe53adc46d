"""Acceptance gates. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 5 and 6
train the full default system (plus ablations) and take a few hours on one
CPU core; everything else finishes in a few minutes.
"""
import time

import numpy as np
import pytest
from scipy import stats

from hyperverify import tensor as T
from hyperverify.config import RunConfig
from hyperverify.evaluation import evaluate_pairs, make_pairs
from hyperverify.hypernet import HyperNetwork, generate_weights, generate_weights_batch
from hyperverify.kcs import KCS, UNIFORM, BatchSampler, batch_centroid_similarity
from hyperverify.modelio import (CorruptionError, NotAModelFileError, RoleError, VersionError,
                                 decode_model, encode_model, load_verifier, save_verifier)
from hyperverify.optim import LRSchedule
from hyperverify.tensor import Tensor
from hyperverify.training import (HyperVerifierSystem, Schedule, lambda_factor, norm_loss,
                                  prepare, target_matrix, train, train_direct_baseline,
                                  weighted_bce)
from hyperverify.verifier import (DESK, PAPER_SCALE, WeightSet, batched_predict, count_flops,
                                  count_params, verify)

from conftest import tiny_config
from test_tensor import grad_check
from test_training import composite_grad_check
from test_verifier import TestCountFlops, looped

GATE = RunConfig()
ABLATION_SEEDS = (0, 1, 2)
EVAL_PAIRS = 3000
TIME_BUDGET_S = 30 * 60


class Verdict:
    """Collects failed checks and prints the criterion's single summary line."""

    def __init__(self, capsys, number, title):
        self.capsys, self.number, self.title = capsys, number, title
        self.failures, self.notes = [], []

    def check(self, ok, message):
        if not ok:
            self.failures.append(message)
        return ok

    def note(self, text):
        self.notes.append(text)

    def finish(self):
        ok = not self.failures
        detail = "; ".join(self.failures + self.notes)
        with self.capsys.disabled():
            print(f"\nACCEPTANCE {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}"
                  + (f"  [{detail}]" if detail else ""), flush=True)
        assert ok, detail


# ---------------------------------------------------------------- 1


def op_cases():
    labels = np.array([0, 3, 1, 1, 2])
    return {
        "matmul": (T.matmul, [(4, 5), (5, 3)], False),
        "conv2d_grouped": (lambda x, w, b: T.conv2d_grouped(x, w, b, 2, 1, 2),
                           [(2, 4, 5, 5), (4, 2, 3, 3), (4,)], False),
        "conv2d_multi": (lambda x, w, b: T.conv2d_multi(x, w, b, 2, 1, 2),
                         [(2, 4, 5, 5, 3), (2, 4, 2, 3, 3), (2, 4)], False),
        "conv2d_multi_shared": (lambda x, w, b: T.conv2d_multi(x, w, b, 1, 1, 1),
                                [(1, 2, 4, 4, 2), (3, 2, 2, 3, 3), (3, 2)], False),
        "gelu": (T.gelu, [(3, 4)], False),
        "layer_norm": (T.layer_norm, [(3, 5), (5,), (5,)], False),
        "rms_norm": (lambda x: T.rms_norm_nonparam(x, axes=(2, 3)), [(2, 2, 3, 3, 2)], False),
        "sigmoid": (T.sigmoid, [(4, 3)], False),
        "arithmetic": (lambda a, b: a * b + a - b, [(3, 4), (4,)], False),
        "divide": (lambda a, b: a / b, [(3, 2), (3, 2)], True),
        "power": (lambda a: a ** 3.0, [(5,)], False),
        "exp": (T.exp, [(3, 3)], False),
        "log": (T.log, [(3, 3)], True),
        "sum": (lambda a: T.tsum(a, axis=1), [(3, 4)], False),
        "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [(2, 3, 4)], False),
        "reshape_transpose": (lambda a: T.transpose(T.reshape(a, (4, 3)), (1, 0)), [(3, 4)], False),
        "index": (lambda a: a[np.array([0, 2, 0])], [(3, 2)], False),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 2), (2, 3)], False),
        "cross_entropy": (lambda z: T.cross_entropy(z, labels), [(5, 4)], False),
        "l2_normalize": (T.l2_normalize, [(3, 4)], False),
        "clamp": (lambda a: T.clamp(a, -5.0, 5.0), [(4,)], False),
        "weighted_bce": (lambda z: weighted_bce(T.sigmoid(z), target_matrix([0, 0, 1, 1]), 0.75),
                         [(4, 4)], False),
        "norm_loss": (norm_loss, [(3, 6)], False),
    }


def test_1_gradient_suite(capsys):
    v = Verdict(capsys, 1, "gradient suite vs central differences, 20 seeds, rel err <= 1e-4")
    t0 = time.perf_counter()
    for name, (fn, shapes, positive) in op_cases().items():
        for seed in range(20):
            try:
                grad_check(fn, shapes, seed, positive=positive, tol=1e-4)
            except AssertionError:
                v.check(False, f"{name} seed {seed}")
    worst = max(composite_grad_check(seed) for seed in range(20))
    v.check(worst <= 1e-4, f"composite rel err {worst:.2e}")
    elapsed = time.perf_counter() - t0
    v.check(elapsed < 120, f"took {elapsed:.0f}s")
    v.note(f"{len(op_cases())} ops + composite, worst composite {worst:.1e}, {elapsed:.0f}s")
    v.finish()


# ---------------------------------------------------------------- 2


def test_2_oracle_equivalence(capsys):
    v = Verdict(capsys, 2, "batched_predict == double loop (1e-6), batch generation == loop (1e-12)")
    t0 = time.perf_counter()
    worst_pred = 0.0
    for nB in (1, 2, 4, 8, 16):
        rng = np.random.default_rng(nB)
        X = rng.uniform(-1, 1, (nB, 3, 32, 32))
        th = rng.normal(size=(nB, count_params(DESK))) * 0.2
        d = np.abs(batched_predict(DESK, X, th).data - looped(DESK, X, th)).max()
        worst_pred = max(worst_pred, d)
        v.check(d <= 1e-6, f"nB={nB} max diff {d:.1e}")
    hn = HyperNetwork(128, DESK, seed=0)
    E = np.random.default_rng(0).normal(size=(16, 128))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    d_gen = np.abs(generate_weights_batch(hn, E).data
                   - np.stack([generate_weights(hn, e).flat for e in E])).max()
    v.check(d_gen <= 1e-12, f"generation diff {d_gen:.1e}")
    elapsed = time.perf_counter() - t0
    v.check(elapsed < 60, f"took {elapsed:.0f}s")
    v.note(f"predict {worst_pred:.1e}, generate {d_gen:.1e}, {elapsed:.0f}s")
    v.finish()


# ---------------------------------------------------------------- 3


def test_3_loss_algebra(capsys):
    v = Verdict(capsys, 3, "loss unit examples, lambda table, beta=1 balance identity")
    bce1 = float(weighted_bce(Tensor([[0.5]]), np.ones((1, 1)), 0.875).data)
    v.check(abs(bce1 - 0.606504) <= 1e-5, f"single-entry bce {bce1}")
    bce2 = float(weighted_bce(Tensor(np.full((2, 2), 0.5)), target_matrix([0, 1]), 0.5).data)
    v.check(abs(bce2 - 0.693147) <= 1e-5, f"half bce {bce2}")
    Y = target_matrix([0, 0, 1, 1])
    v.check(float(weighted_bce(Tensor(Y), Y, 0.75).data) <= 1e-5, "perfect prediction")
    v.check(float(norm_loss(Tensor([[3.0, 4.0]])).data) == 25.0, "norm 25")
    v.check(float(norm_loss(Tensor([[1.0, 0.0], [0.0, 2.0]])).data) == 2.5, "norm 2.5")
    for B, beta, lam in ((16, 2, 0.875), (2, 1, 0.5), (8, 2, 0.75)):
        v.check(lambda_factor(B, beta) == lam, f"lambda({B},{beta})")
    for B in (2, 4, 8, 16):
        for n in (1, 2, 4):
            lam = lambda_factor(B, 1)
            Yb = target_matrix(np.repeat(np.arange(B), n))
            v.check(np.array_equal(lam * Yb.sum(1), (1 - lam) * (1 - Yb).sum(1)),
                    f"balance B={B} n={n}")
    v.finish()


# ---------------------------------------------------------------- 4


def test_4_structural_invariants(capsys, tiny_prepared):
    v = Verdict(capsys, 4, "target matrix, permutation invariance <= 1e-10, frozen backbone")
    rng = np.random.default_rng(0)
    for trial in range(50):
        n, B = int(rng.integers(1, 4)), int(rng.integers(1, 8))
        M = rng.permutation(np.repeat(np.arange(B), n))
        Y = target_matrix(M)
        v.check(np.array_equal(Y, Y.T) and np.all(np.diag(Y) == 1) and np.all(Y.sum(1) == n),
                f"target matrix trial {trial}")
    M = np.repeat(np.arange(4), 2)
    Yhat, th = rng.uniform(0.01, 0.99, (8, 8)), rng.normal(size=(8, 10))

    def loss(p):
        return (float(weighted_bce(Tensor(Yhat[np.ix_(p, p)]), target_matrix(M[p]), 0.5).data)
                + float(norm_loss(Tensor(th[p])).data))

    base = loss(np.arange(8))
    worst = max(abs(loss(np.random.default_rng(s).permutation(8)) - base) for s in range(20))
    v.check(worst <= 1e-10, f"permutation diff {worst:.1e}")
    bb = tiny_prepared.backbone
    before = {k: a.copy() for k, a in bb.named_parameters().items()}
    res = train(tiny_config(steps=100), tiny_prepared)
    v.check(len(res.log) == 100, "100 steps")
    changed = [k for k, a in bb.named_parameters().items() if a.tobytes() != before[k].tobytes()]
    v.check(not changed, f"backbone changed: {changed}")
    v.check(all(p.grad is None for p in bb.parameters()), "backbone received gradients")
    v.note(f"permutation diff {worst:.1e}, backbone bit-identical after 100 steps")
    v.finish()


# ---------------------------------------------------------------- 7


def test_7_kcs_hardness(capsys, gate_prepared):
    v = Verdict(capsys, 7, "KCS batches have higher centroid similarity than uniform (100 batches)")
    from hyperverify.training import build_cluster_index
    from hyperverify.kcs import compute_identity_centroids

    prep = gate_prepared
    cents = np.stack([c.embedding for c in
                      compute_identity_centroids(prep.train, embeddings=prep.embeddings())])
    sampler = BatchSampler(prep.train, build_cluster_index(prep, GATE))
    rng = np.random.default_rng(0)
    B = 8
    kcs = [batch_centroid_similarity(sampler.sample(B, 2, KCS, rng), cents) for _ in range(100)]
    uni = [batch_centroid_similarity(sampler.sample(B, 2, UNIFORM, rng), cents) for _ in range(100)]
    t = stats.ttest_ind(kcs, uni, equal_var=False, alternative="greater")
    v.check(np.mean(kcs) > np.mean(uni), "kcs mean not higher")
    v.check(t.pvalue < 0.01, f"one-sided Welch p={t.pvalue:.2g}")
    v.note(f"kcs {np.mean(kcs):.3f} vs uniform {np.mean(uni):.3f}, p={t.pvalue:.1e}")
    v.finish()


# ---------------------------------------------------------------- 8


def test_8_efficiency_accounting(capsys):
    v = Verdict(capsys, 8, "params/FLOPs closed forms; paper-scale config in budget")
    for i, (arch, params, flops) in enumerate(TestCountFlops.CASES):
        v.check(count_params(arch) == params and count_flops(arch) == flops, f"case {i}")
    p, f = count_params(PAPER_SCALE), count_flops(PAPER_SCALE)
    v.check(15_000 <= p <= 35_000, f"paper-scale params {p}")
    v.check(3e6 <= f <= 8e6, f"paper-scale flops {f}")
    v.note(f"paper-scale {p} params, {f / 1e6:.2f} MFLOPs")
    v.finish()


# ---------------------------------------------------------------- 9


def test_9_serialization(capsys, tmp_path, tiny_backbone, tiny_ds):
    v = Verdict(capsys, 9, "round trip, corruption/version/role errors, enrollment determinism")
    rng = np.random.default_rng(0)
    ws = WeightSet(rng.normal(size=4065).astype(np.float32).astype(np.float64), DESK.layout())
    save_verifier(tmp_path / "v", ws, DESK)
    back = load_verifier(tmp_path / "v")
    v.check(back.weights.flat.astype(np.float64).tobytes() == ws.flat.tobytes(), "round trip")
    data = (tmp_path / "v").read_bytes()

    def raises(exc, blob, **kw):
        try:
            decode_model(blob, **kw)
        except exc:
            return True
        except Exception:
            return False
        return False

    flipped = bytearray(data)
    flipped[-100] ^= 1
    v.check(raises(CorruptionError, bytes(flipped)), "payload flip")
    v.check(raises(VersionError, data[:4] + b"\x63\x00" + data[6:]), "version 99")
    v.check(raises(RoleError, data, expect_role="hypernet"), "role")
    v.check(raises(NotAModelFileError, b""), "empty file")
    v.check(raises(NotAModelFileError, encode_model({}, "verifier").replace(b"HNFV", b"XXXX", 1)),
            "magic")
    hn = HyperNetwork(tiny_backbone.embed_dim, DESK, hidden=(16, 16, 16), seed=0)
    system = HyperVerifierSystem(tiny_backbone, hn, DESK)
    for name in ("a", "b"):
        save_verifier(tmp_path / name, system.enroll(tiny_ds.images[5]), DESK)
    v.check((tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes(), "enroll determinism")
    v.finish()


# --------------------------------------------------------- full training


@pytest.fixture(scope="module")
def gate_prepared():
    t0 = time.perf_counter()
    prep = prepare(GATE)
    prep.backbone_info["seconds"] = time.perf_counter() - t0
    return prep


@pytest.fixture(scope="module")
def eval_pairs(gate_prepared):
    return make_pairs(gate_prepared.test, EVAL_PAIRS, seed=12345)


@pytest.fixture(scope="module")
def gate_run(gate_prepared):
    t0 = time.perf_counter()
    res = train(GATE, gate_prepared)
    return res, time.perf_counter() - t0


def test_10_schedule_conformance(capsys, gate_run):
    v = Verdict(capsys, 10, "batch doublings to 8x, sampling switch at T, warmup reaches base")
    res, _ = gate_run
    sched = Schedule.from_config(GATE)
    Bs = [r["batch_size"] for r in res.log]
    changes = [t for t in range(1, len(Bs)) if Bs[t] != Bs[t - 1]]
    v.check(changes == sched.milestones, f"doublings at {changes}, expected {sched.milestones}")
    v.check(Bs[0] == GATE.initial_B and Bs[-1] == 8 * GATE.initial_B, f"B {Bs[0]} -> {Bs[-1]}")
    v.check(all(b == 2 * a for a, b in zip([Bs[c - 1] for c in changes], [Bs[c] for c in changes])),
            "each change doubles")
    modes = [r["sampling_mode"] for r in res.log]
    v.check(modes.index(KCS) == GATE.kcs_start and set(modes[:GATE.kcs_start]) == {UNIFORM}
            and set(modes[GATE.kcs_start:]) == {KCS}, "sampling switch")
    lrs = [r["lr"] for r in res.log]
    v.check(lrs[GATE.warmup] == GATE.lr, f"lr at warmup {lrs[GATE.warmup]}")
    v.check(lrs[0] == LRSchedule(GATE.lr, GATE.warmup)(0) == GATE.lr / GATE.warmup, "lr at step 0")
    v.check(all(b >= a for a, b in zip(lrs[:GATE.warmup + 1], lrs[1:GATE.warmup + 1])),
            "warmup monotone")
    v.note(f"B {Bs[0]}->{Bs[-1]} at {changes}, KCS from step {GATE.kcs_start}")
    v.finish()


def test_5_end_to_end_learning(capsys, gate_prepared, gate_run, eval_pairs):
    v = Verdict(capsys, 5, "trained >= 90% held-out pair accuracy, untrained <= 60%, < 30 min")
    res, train_s = gate_run
    total_s = train_s + gate_prepared.backbone_info["seconds"]
    trained = evaluate_pairs(res.system, eval_pairs).accuracy_mean
    blank = HyperNetwork(gate_prepared.backbone.embed_dim, res.system.arch, GATE.hidden,
                         GATE.final_init_scale, seed=GATE.seed)
    untrained = evaluate_pairs(HyperVerifierSystem(gate_prepared.backbone, blank, res.system.arch),
                               eval_pairs).accuracy_mean
    v.check(trained >= 0.90, f"trained accuracy {trained:.4f}")
    v.check(untrained <= 0.60, f"untrained accuracy {untrained:.4f}")
    v.check(total_s <= TIME_BUDGET_S, f"took {total_s / 60:.1f} min")
    v.note(f"trained {trained:.4f}, untrained {untrained:.4f}, "
           f"{total_s / 60:.1f} min incl. backbone {gate_prepared.backbone_info['seconds']:.0f}s")
    v.finish()


def test_self_accept_after_enrollment(gate_run, tmp_path):
    """Enrolling and verifying the same image accepts for at least 95% of held-out users."""
    res, _ = gate_run
    test = res.prepared.test
    accepted = []
    for members in test.indices_by_identity():
        image = test.images[members[0]]
        save_verifier(tmp_path / "m.hnfv", res.system.enroll(image), res.system.arch,
                      res.system.threshold)
        model = load_verifier(tmp_path / "m.hnfv")
        accepted.append(verify(model.arch, image.astype(np.float32), model.weights) >= model.threshold)
    rate = np.mean(accepted)
    assert rate >= 0.95, f"self-accept rate {rate:.2f} over {len(accepted)} users"


@pytest.fixture(scope="module")
def ablations(gate_prepared, gate_run, eval_pairs):
    out = {"full": [], "no_kcs": [], "no_norm": [], "direct": []}
    for seed in ABLATION_SEEDS:
        cfg = GATE.replace(seed=seed)
        full = gate_run[0] if seed == GATE.seed else train(cfg, gate_prepared)
        out["full"].append(evaluate_pairs(full.system, eval_pairs).accuracy_mean)
        for key, variant in (("no_kcs", cfg.replace(use_kcs=False)),
                             ("no_norm", cfg.replace(use_norm_loss=False))):
            out[key].append(evaluate_pairs(train(variant, gate_prepared).system,
                                           eval_pairs).accuracy_mean)
        out["direct"].append(evaluate_pairs(train_direct_baseline(cfg, gate_prepared).model,
                                            eval_pairs).accuracy_mean)
    return {k: np.array(a) for k, a in out.items()}


def test_6_ablation_directions(capsys, ablations):
    v = Verdict(capsys, 6, "ablations over 3 seeds: no KCS, no L_norm, direct f all below full")
    full = ablations["full"].mean()
    for key in ("no_kcs", "no_norm", "direct"):
        v.check(ablations[key].mean() < full, f"{key} {ablations[key].mean():.4f} >= full {full:.4f}")
    v.note(", ".join(f"{k} {a.mean():.4f} ({' '.join(f'{x:.3f}' for x in a)})"
                     for k, a in ablations.items()))
    v.finish()
