"""The twelve acceptance criteria, each at its stated tolerance.

Criteria 6, 7, 8, 9 and 11 share one desk-profile rewind experiment: its
source run is the desk baseline recipe, and its rewind unit restarts the
step-2000 decoder on the converged encoder.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from collatz_lab import analysis as an
from collatz_lab import autograd as ag
from collatz_lab import interventions as iv
from collatz_lab import runner
from collatz_lab.config import desk_profile
from collatz_lab.model import ModelConfig, Transformer
from collatz_lab.numeral import (EVEN_SWEEP_BASES, SWEEP_BASES, carry_depth, from_digits, halve_digits_local,
                                 mul3_add1_digits, to_digits)
from collatz_lab.tasks import ExampleCache
from collatz_lab.train import Evaluator, load_checkpoint, make_split, subtree_hash, train_loop


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = desk_profile("rewind", seeds=(0,))
    t0 = time.time()
    root = runner.run(cfg, out=tmp_path_factory.mktemp("desk") / "rewind")
    src_dir = root / "runs" / "source"
    return {"cfg": cfg, "root": root, "source_dir": src_dir, "source": runner.final_checkpoint(src_dir),
            "records": runner.load_records(src_dir), "wall": time.time() - t0}


def _carries_by_resimulation(n: int, b: int) -> int:
    """Carry count from the prefix identity: carry out of digit i is floor((3*(n mod b^(i+1)) + 1) / b^(i+1))."""
    depth, p = 0, b
    while p <= 3 * n + 1:
        depth += (3 * (n % p) + 1) // p > 0
        p *= b
    return depth


def test_criterion_01_local_halving(criterion):
    assert len(EVEN_SWEEP_BASES) == 12
    t0 = time.time()
    mismatches = 0
    for b in EVEN_SWEEP_BASES:
        for n in range(2, 1_000_001, 2):
            if halve_digits_local(to_digits(n, b), b) != to_digits(n >> 1, b):
                mismatches += 1
    dt = time.time() - t0
    ok = mismatches == 0 and dt < 60
    criterion(1, ok, f"{mismatches} mismatches over 12 bases x 500000 evens in {dt:.1f}s")
    assert ok


def test_criterion_02_transducer(criterion):
    t0 = time.time()
    bad_value = bad_depth = 0
    for b in SWEEP_BASES:
        for n in range(1, 100_001):
            tr = mul3_add1_digits(to_digits(n, b), b)
            if from_digits(tr.out_digits[::-1], b) != 3 * n + 1:
                bad_value += 1
            if n % 2 and carry_depth(n, b) != _carries_by_resimulation(n, b):
                bad_depth += 1
    dt = time.time() - t0
    ok = bad_value == 0 and bad_depth == 0 and dt < 60
    criterion(2, ok, f"{bad_value} value / {bad_depth} depth mismatches over 15 bases x 1e5 in {dt:.1f}s")
    assert ok


def test_criterion_03_entropy_identities(criterion):
    odd = {b: an.local_predictability(b, "odd", 1, 10_000) for b in SWEEP_BASES}
    even = {b: an.local_predictability(b, "even", 1, 10_000) for b in SWEEP_BASES}
    ok = (all(h <= 1e-12 for h in odd.values())
          and all(even[b] <= 1e-12 for b in (3, 9, 27))
          and all(even[b] > 0 for b in EVEN_SWEEP_BASES))
    min_even = min(even[b] for b in EVEN_SWEEP_BASES)
    criterion(3, ok, f"max odd H {max(odd.values()):.1e}, odd-base even H {max(even[b] for b in (3, 9, 27)):.1e}, "
                     f"min even-base even H {min_even:.3f} bits")
    assert ok


def test_criterion_04_clopper_pearson(criterion):
    got = {k: an.clopper_pearson(k, 5000) for k in (4680, 4720)}
    want = {4680: (0.929, 0.942), 4720: (0.937, 0.950)}
    err = max(abs(a - b) for k in got for a, b in zip(got[k], want[k]))
    ok = err <= 1e-3
    criterion(4, ok, f"(4680,5000)->[{got[4680][0]:.4f}, {got[4680][1]:.4f}], "
                     f"(4720,5000)->[{got[4720][0]:.4f}, {got[4720][1]:.4f}], max dev {err:.4f}")
    assert ok


def test_criterion_05_gradients(criterion):
    cfg = ModelConfig(base=10, d_model=16, n_heads=2, d_ff=32, n_enc_layers=2, n_dec_layers=2)
    model = Transformer(cfg, seed=0).to(torch.float64).requires_grad_(True)
    b = ExampleCache("collatz", 10).batch([3, 80, 511, 6, 1999, 42])
    t0 = time.time()
    rep = ag.finite_diff_check(lambda: model.loss(b.enc, b.dec_in, b.labels), model.params, n_coords=600,
                               step=1e-5, seed=0)
    dt = time.time() - t0
    ok = rep.n_checked >= 500 and rep.max_rel_err < 1e-4 and dt < 300
    criterion(5, ok, f"{rep.n_checked} coords, max rel err {rep.max_rel_err:.2e}, {dt:.1f}s")
    assert ok


def test_criterion_06_smoke_training(desk, criterion):
    recs = desk["records"]
    final = recs[-1]
    first90 = an.steps_to_threshold([r.step for r in recs], [r.acc for r in recs], 0.9)
    m, t = desk["cfg"].model, desk["cfg"].train
    assert (m.d_model, m.n_enc_layers, m.n_dec_layers, m.base, t.range_hi) == (64, 2, 2, 10, 2000)
    ok = (first90 is not None and first90 <= 20_000 and final.acc >= 0.9
          and final.acc_even >= final.acc_odd and desk["wall"] < 30 * 60)
    criterion(6, ok, f"90% at step {first90}; final step {final.step} acc {final.acc:.3f} "
                     f"(even {final.acc_even:.3f}, odd {final.acc_odd:.3f}); experiment wall {desk['wall']:.0f}s")
    assert ok


def test_criterion_07_intervention_contracts(desk, tmp_path, criterion):
    cfg, root, src = desk["cfg"], desk["root"], desk["source"]
    t = replace(cfg.train, steps=200, eval_every=50, ckpt_every=50, stop_on_convergence=False)
    problems = []

    tr = iv.run_condition(iv.InterventionPlan("encoder_transplant", src), cfg.model, t, [0])
    want = subtree_hash(src.params, "enc.")
    steps = [s for s, _ in tr.hash_log[0]]
    if steps != [0, 50, 100, 150, 200] or any(h["enc."] != want for _, h in tr.hash_log[0]):
        problems.append("encoder transplant hash log")

    rw = root / "runs" / "decoder_rewind_s0"
    early = load_checkpoint(desk["source_dir"] / "checkpoints" / "step_0002000.ckpt")
    rw_cks = [load_checkpoint(p) for p in runner.checkpoint_paths(rw)]
    if rw_cks[0].step != 0 or subtree_hash(rw_cks[0].params, "dec.") != subtree_hash(early.params, "dec."):
        problems.append("rewind step-0 decoder")
    if any(subtree_hash(ck.params, "enc.") != want for ck in rw_cks):
        problems.append("rewind frozen encoder")
    if subtree_hash(early.params, "dec.") == subtree_hash(src.params, "dec."):
        problems.append("early and converged decoders coincide")

    scratch = iv.run_condition(iv.InterventionPlan("scratch"), cfg.model, t, [1]).runs[1]
    base = train_loop(cfg.model, replace(t, seed=1, data_seed=1))
    dump = lambda rs: json.dumps([r.to_dict() for r in rs], sort_keys=True).encode()  # noqa: E731
    if dump(scratch.records) != dump(base.records):
        problems.append("scratch vs baseline metrics")

    ok = not problems
    criterion(7, ok, f"transplant checkpoints {steps}, rewind checkpoints {[c.step for c in rw_cks]}, "
                     f"scratch==baseline bytes; problems: {problems or 'none'}")
    assert ok


def test_criterion_08_transplant_speedup(desk, criterion):
    cfg, src = desk["cfg"], desk["source"]
    budget = 2000
    t = replace(cfg.train, steps=budget, eval_every=25, ckpt_every=budget, stop_at_acc=0.7,
                stop_on_convergence=False, eval_at_start=False)
    seeds = [0, 1, 2]
    out = {}
    for kind in ("scratch", "encoder_transplant"):
        res = iv.run_condition(iv.InterventionPlan(kind, src), cfg.model, t, seeds, keep_checkpoints=False)
        out[kind] = {s: (v if v is not None else budget + 1) for s, v in res.steps_to(0.7).items()}
    mean = {k: float(np.mean(list(v.values()))) for k, v in out.items()}
    ok = mean["encoder_transplant"] < mean["scratch"]
    criterion(8, ok, f"steps to 70%: scratch {out['scratch']} mean {mean['scratch']:.0f}; "
                     f"transplant {out['encoder_transplant']} mean {mean['encoder_transplant']:.0f}")
    assert ok


def test_criterion_09_erasure(desk, criterion):
    cfg, ck = desk["cfg"], desk["source"]
    t = cfg.train
    u, probe = iv.parity_direction(ck, t)
    ut = torch.from_numpy(u)
    ev = Evaluator(t, make_split(t), cfg.model.base)
    model = Transformer(ck.model_cfg, ck.params)
    with torch.no_grad():
        erased = model.encode_with_erasure(ev.batch.enc, ut)
    residual = float((erased.final.double() @ ut).abs().max())

    feature = an.pool_hidden(erased).double().numpy() @ u
    refit = an.fit_probe(feature[:, None], an.residue_labels(ev.operands, 1))
    gap = abs(refit.accuracy - refit.majority_rate)

    items = ev.items[:15]
    sub = Evaluator(t, replace(make_split(t), eval_set=items), cfg.model.base)
    with torch.no_grad():
        enc = model.encode(sub.batch.enc)
    states = enc.final[~enc.pad_mask].double().numpy()
    assert states.shape[0] < cfg.model.d_model
    null_dir = np.linalg.svd(states)[2][-1]
    orth = iv.erasure_eval(ck, null_dir, t, items)
    parity = iv.erasure_eval(ck, u, t)

    ok = residual < 1e-6 and gap <= 0.02 and orth.delta == 0.0
    criterion(9, ok, f"max |<h_perp,u>| {residual:.1e}; refit probe {refit.accuracy:.3f} vs majority "
                     f"{refit.majority_rate:.3f}; null-direction delta {orth.delta}; "
                     f"(parity probe {probe.accuracy:.3f}, parity delta {parity.delta:+.3f})")
    assert ok


def test_criterion_10_probe_pipeline(criterion):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 4000)
    x = rng.normal(size=(4000, 16))
    x[:, 3] += np.where(y == 1, 5.0, -5.0)
    sep = an.fit_probe(x, y).accuracy

    xn = rng.normal(size=(10_000, 16))
    yn = rng.permutation(np.arange(10_000) % 2)
    null = an.fit_probe(xn, yn).accuracy

    ns = np.arange(1, 8193)
    cond = {}
    for k in (2, 3, 4):
        full = np.eye(2**k)[ns % 2**k]
        coarse = np.eye(2 ** (k - 1))[ns % 2 ** (k - 1)]
        cond[k] = (an.conditional_probe(full, ns, k), an.conditional_probe(coarse, ns, k))
    ok = (sep == 1.0 and abs(null - 0.5) <= 0.02 and all(a == 1.0 for a, _ in cond.values())
          and all(abs(b - 0.5) <= 0.05 for _, b in cond.values()))
    detail = ", ".join(f"k={k}: {a:.3f}/{b:.3f}" for k, (a, b) in cond.items())
    criterion(10, ok, f"separable {sep:.3f}, null {null:.4f}, conditional encoded/removed {detail}")
    assert ok


def test_criterion_11_metric_self_consistency(desk, criterion):
    root = desk["root"]
    rep = runner.verify(root)
    # independent recount using plain comparisons on the stored predictions
    src = desk["source_dir"]
    t = desk["cfg"].train
    items = make_split(t).eval_set
    targets = [to_digits(n // 2 if n % 2 == 0 else 3 * n + 1, 10) for n in items]
    stored = [json.loads(x) for x in (src / "predictions.jsonl").read_text().splitlines()]
    recount_bad = 0
    for rec, pr in zip(desk["records"], stored):
        hits = [p == q for p, q in zip(pr["predictions"], targets)]
        even = [h for h, n in zip(hits, items) if n % 2 == 0]
        odd = [h for h, n in zip(hits, items) if n % 2 == 1]
        dig_hit = sum(sum(a == b for a, b in zip(p, q)) for p, q in zip(pr["predictions"], targets))
        dig_tot = sum(max(len(p), len(q)) for p, q in zip(pr["predictions"], targets))
        if (pr["step"] != rec.step or sum(hits) != rec.n_correct or sum(hits) / len(hits) != rec.acc
                or rec.n_even != len(even) or rec.n_odd != len(odd) or rec.n_even + rec.n_odd != len(items)
                or sum(even) / len(even) != rec.acc_even or sum(odd) / len(odd) != rec.acc_odd
                or dig_hit / dig_tot != rec.digit_acc):
            recount_bad += 1
    reeval = [c for c in rep.checks if c.name.endswith("reload re-evaluation")]
    ok = rep.ok and recount_bad == 0 and len(reeval) == 2 and all(c.ok for c in reeval)
    criterion(11, ok, f"verify {len(rep.checks) - len(rep.failures())}/{len(rep.checks)} checks; "
                      f"independent recount mismatches {recount_bad} over {len(stored)} evals")
    assert ok, rep.failures()


def test_criterion_12_participation_ratio(criterion):
    rng = np.random.default_rng(0)
    line = np.linspace(-2, 2, 101)[:, None] * rng.normal(size=(1, 12))
    rank1 = an.participation_ratio(line).value
    e = np.zeros((4, 12))
    e[0, 0], e[1, 0], e[2, 1], e[3, 1] = 1, -1, 1, -1
    two = an.participation_ratio(e).value
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = r.normal(size=(200, 12)) * r.uniform(0.1, 3, 12)
        q, _ = np.linalg.qr(r.normal(size=(12, 12)))
        worst = max(worst, abs(an.participation_ratio(x @ q).value - an.participation_ratio(x).value))
    ok = rank1 == 1.0 and two == 2.0 and worst < 1e-9
    criterion(12, ok, f"rank-1 {rank1!r}, two directions {two!r}, max rotation change {worst:.1e}")
    assert ok


def test_rewind_has_no_long_dip_below_start(desk):
    """The rewound decoder never spends more than 3 consecutive evals clearly below its starting accuracy.

    "Clearly below" means under the 95% Clopper-Pearson lower bound of the
    starting eval, so single-example wobble on a 500-item eval set does not count.
    """
    recs = runner.load_records(desk["root"] / "runs" / "decoder_rewind_s0")
    start, floor = recs[0].acc, recs[0].acc_lo

    def longest_run(below):
        run = longest = 0
        for r in recs[1:]:
            run = run + 1 if below(r) else 0
            longest = max(longest, run)
        return longest

    strict = longest_run(lambda r: r.acc < start)
    clear = longest_run(lambda r: r.acc < floor)
    print(f"rewind start acc {start:.3f} (CI low {floor:.3f}), final {recs[-1].acc:.3f}; "
          f"longest run below start {strict}, below CI {clear}")
    assert clear <= 3
    assert an.plateau_detect([r.step for r in recs], [r.acc for r in recs], 5, 0.005).spans
