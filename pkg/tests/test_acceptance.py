"""Acceptance suite: one test per shipping criterion, one verdict line each.

Run as `pytest tests/test_acceptance.py -v -s` to see the verdict lines
inline. The expensive trained models come from session fixtures in
conftest.py and are shared with the rest of the tree.
"""

import dataclasses
import math
import time

import numpy as np

from spikeclm import autodiff as ad
from spikeclm import data, energy, numerics
from spikeclm.attention import causal_mask, fresh_sfsa_state, sfsa_forward
from spikeclm.distill import (SpadConfig, loss_attention, loss_embedding,
                              loss_feature, loss_hard, loss_soft, loss_total,
                              spad_losses, spike_encode)
from spikeclm.model import (ModelConfig, _attn_weights, ann_forward, generate,
                            init_params, save_model, snn_forward)
from spikeclm.neurons import (LifParams, NeuronState, TernaryParams,
                              eligibility_trace, empirical_rate, fresh_state,
                              lif_constant_drive, lif_step, surrogate_forward,
                              surrogate_grad, ternary_step)
from spikeclm.numerics import Rng, count_macs
from spikeclm.training import TrainConfig, train_loop

# drive grid shared by the rate-monotonicity and concentration checks
DRIVE_GRID = np.array([-1.0, -0.5] + [0.25 * i for i in range(13)])


def verdict(num: int, name: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(line)
    return ok


def test_criterion_01_neuron_fidelity():
    p = LifParams(beta=0.5, u_thr=1.0)
    ok = True

    # zero input from rest stays silent with a zero membrane
    st = fresh_state()
    for _ in range(5):
        s, st = lif_step(st, np.array(0.0), p)
        ok &= float(s) == 0.0 and float(st.u) == 0.0

    # single step at I=2: membrane 2.0, immediate spike
    s, st = lif_step(fresh_state(), np.array(2.0), p)
    ok &= float(st.u) == 2.0 and float(s) == 1.0

    # beta=1, I=0.5: membranes 0.5, 1.0, 0.5, 1.0 -> spikes 0,1,0,1
    p2 = LifParams(beta=1.0, u_thr=1.0)
    st = fresh_state()
    got_s, got_u = [], []
    for _ in range(4):
        s, st = lif_step(st, np.array(0.5), p2)
        got_s.append(float(s))
        got_u.append(float(st.u))
    ok &= got_s == [0.0, 1.0, 0.0, 1.0] and got_u == [0.5, 1.0, 0.5, 1.0]

    # ternary branch table on 21 membrane values; |U| <= amp stays silent
    tp = TernaryParams(amp=1.0)
    grid = np.linspace(-2.5, 2.5, 21)
    spikes, st = ternary_step(NeuronState(u=np.zeros(21), s_prev=np.zeros(21)),
                              grid, tp)
    expect = np.where(grid > 1.0, 1.0, np.where(grid < -1.0, -1.0, 0.0))
    ok &= np.array_equal(spikes, expect)
    ok &= np.array_equal(st.u, grid * (tp.amp - expect) + tp.u_reset * expect)

    assert verdict(1, "neuron fidelity", ok)


def test_criterion_02_rate_monotonicity():
    t0 = time.time()
    p = LifParams()
    rates = np.array([empirical_rate(a, 256, p) for a in DRIVE_GRID])
    elapsed = time.time() - t0
    ok = bool(np.all(np.diff(rates) >= 0.0)
              and rates.min() >= 0.0 and rates.max() <= 1.0
              and elapsed < 1.0)
    assert verdict(2, "rate monotonicity", ok,
                   f"T=256, {len(DRIVE_GRID)} drives, {elapsed:.3f}s")


def test_criterion_03_surrogate_gradient():
    alpha = 2.0
    rng = np.random.default_rng(3)
    us = rng.uniform(-4.0, 4.0, size=100)
    h = 1e-6
    fd = (surrogate_forward(us + h, alpha) - surrogate_forward(us - h, alpha)) / (2 * h)
    an = surrogate_grad(us, alpha)
    rel = np.abs(an - fd) / np.abs(an)
    ok = bool(rel.max() < 1e-6)
    # sup of the derivative is alpha/2, attained at u=0
    dense = surrogate_grad(np.linspace(-50, 50, 20001), alpha)
    ok &= bool(dense.max() <= alpha / 2 + 1e-15)
    ok &= surrogate_grad(np.array(0.0), alpha) == alpha / 2
    assert verdict(3, "surrogate gradient", ok, f"max rel err {rel.max():.2e}")


def test_criterion_04_bptt_matches_finite_differences():
    t0 = time.time()
    cfg_s = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2,
                        d_ff=12, max_seq_len=4, t_steps=2)
    cfg_t = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2,
                        d_ff=12, max_seq_len=4, t_steps=1)
    # scaled init pushes membranes into the responsive band in relaxed mode
    p_s = {k: v * 25.0 for k, v in init_params(cfg_s, 1).items()}
    p_t = init_params(cfg_t, 2, kind="teacher")
    ids = np.array([[3, 1, 4, 1]])
    targets = np.array([[1, 4, 1, 5]])
    _, t_trace = ann_forward(ids, cfg_t, p_t)
    spad = SpadConfig()
    lif = cfg_s.neuron_spec().lif

    def full_loss(pdict):
        logits, s_trace = snn_forward(ids, cfg_s, pdict, relaxed=True)
        total, _ = spad_losses(logits, s_trace, t_trace, targets, spad, lif)
        return total

    rels = []
    for key in sorted(p_s):
        vparams = dict(p_s)
        v = ad.Var(p_s[key].copy(), requires_grad=True)
        vparams[key] = v
        full_loss(vparams).backward()

        def f(z, key=key):
            q = dict(p_s)
            q[key] = z
            return float(ad.value(full_loss(q)))

        fd = numerics.finite_diff_grad(f, p_s[key].copy(), eps=1e-5)
        rels.append((np.abs(v.grad - fd) / np.maximum(np.abs(fd), 1e-8)).ravel())
    rel = np.concatenate(rels)
    p99 = float(np.percentile(rel, 99))
    elapsed = time.time() - t0
    ok = p99 < 1e-3 and elapsed < 60.0
    assert verdict(4, "bptt vs finite differences", ok,
                   f"{rel.size} coords, p99 {p99:.2e}, {elapsed:.1f}s")


def test_criterion_05_eligibility_bound_and_equivalence():
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(1000):
        beta = float(rng.uniform(0.0, 0.99))
        m = float(rng.uniform(0.1, 5.0))
        xs = rng.uniform(-m, m, size=40)
        e = eligibility_trace([np.array(x) for x in xs], beta)
        bound = m / (1.0 - beta)
        ok &= all(abs(float(et)) <= bound + 1e-12 for et in e)

    # no-reset leaky integrator: sum_t delta_t e_t equals the tape exactly
    p = LifParams(beta=0.6, u_thr=1.0, surrogate_alpha=2.0)
    xs = rng.normal(size=12)
    cs = rng.normal(size=12)
    w = ad.Var(np.array(0.8), requires_grad=True)
    u = ad.as_var(np.array(0.0))
    loss = ad.as_var(np.array(0.0))
    us = []
    for x, c in zip(xs, cs):
        u = u * p.beta + w * float(x)
        us.append(float(ad.value(u)))
        centered = u - p.u_thr
        cval = ad.value(centered)
        sig = ad.custom_unary(centered, surrogate_forward(cval, p.surrogate_alpha),
                              surrogate_grad(cval, p.surrogate_alpha))
        loss = loss + sig * float(c)
    loss.backward()
    e = eligibility_trace([np.array(x) for x in xs], p.beta)
    hand = sum(c * surrogate_grad(np.array(ut - p.u_thr), p.surrogate_alpha) * et
               for c, ut, et in zip(cs, us, e))
    gap = float(abs(w.grad - hand))
    ok &= bool(np.allclose(w.grad, hand, rtol=1e-10, atol=1e-14))
    assert verdict(5, "eligibility bound + equivalence", ok,
                   f"1000 streams, tape gap {gap:.1e}")


def test_criterion_06_sfsa_structure():
    cfg = ModelConfig(vocab_size=17, d_model=16, n_layers=1, n_heads=2,
                      d_ff=24, max_seq_len=12, t_steps=2)
    params = init_params(cfg, 6)
    sn, attn_sn = cfg.neuron_spec(), cfg.attn_spec()
    rng = np.random.default_rng(6)
    d_head = cfg.d_model // cfg.n_heads
    ok = True

    for trial in range(100):
        x = (rng.random((8, cfg.d_model)) < 0.5).astype(float)
        mask = causal_mask(8)
        w = _attn_weights(params, 0)
        out, s_attn, _ = sfsa_forward(x, w, mask, fresh_sfsa_state(), sn,
                                      attn_sn, cfg.n_heads)
        out, s_attn = ad.value(out), ad.value(s_attn)
        ok &= set(np.unique(out)) <= {0.0, 1.0}
        ok &= set(np.unique(s_attn)) <= {0.0, 1.0}

        # integer scores: replay the q/k branch and take the binary dot products
        sq, _ = sn.step(fresh_state(), x @ w.w_q + w.b_q)
        sk, _ = sn.step(fresh_state(), x @ w.w_k + w.b_k)
        sq = sq.reshape(8, cfg.n_heads, d_head).swapaxes(0, 1)
        sk = sk.reshape(8, cfg.n_heads, d_head).swapaxes(0, 1)
        scores = sq @ sk.swapaxes(-1, -2)
        ok &= bool(np.array_equal(scores, np.round(scores))
                   and scores.min() >= 0 and scores.max() <= d_head)

        # suffix perturbation: flip the last row, prefix must be bit-exact
        x2 = x.copy()
        x2[-1] = 1.0 - x2[-1]
        out2, s_attn2, _ = sfsa_forward(x2, w, mask, fresh_sfsa_state(), sn,
                                        attn_sn, cfg.n_heads)
        ok &= bool(np.array_equal(ad.value(out2)[:-1], out[:-1]))
        ok &= bool(np.array_equal(ad.value(s_attn2)[..., :-1, :], s_attn[..., :-1, :]))
        if not ok:
            break
    assert verdict(6, "sfsa structure", ok, "100 causality trials")


def test_criterion_07_spad_fixed_points():
    lif = LifParams()
    rng = np.random.default_rng(7)
    ok = True

    # each loss must vanish when the student already matches the teacher;
    # attention/feature use the all-silent fixed point shared by both branches
    e = rng.normal(size=(3, 4))
    ok &= float(ad.value(loss_embedding(e, [e, e]))) == 0.0
    a = np.zeros((2, 5, 5))
    ok &= float(ad.value(loss_attention(a, [a, a], lif, 0.5))) == 0.0
    h = np.zeros((3, 6))
    ok &= float(ad.value(loss_feature(h, [h, h], lif, 0.5))) == 0.0
    # each branch alone also vanishes on its own nonzero fixed point
    am = (rng.random((2, 5, 5)) < 0.4).astype(float)
    enc = spike_encode(am, 4, lif)
    ok &= float(ad.value(loss_attention(am, list(enc), lif, 1.0))) == 0.0
    ok &= float(ad.value(loss_attention(enc.mean(axis=0), list(enc), lif, 0.0))) == 0.0
    z = rng.normal(size=(4, 9))
    ok &= float(ad.value(loss_soft(z, z, 2.0))) == 0.0
    big = np.full((3, 5), -60.0)
    big[np.arange(3), [1, 2, 4]] = 60.0
    ok &= float(ad.value(loss_hard(big, np.array([1, 2, 4])))) == 0.0

    # loss_total respects the published weights exactly on unit probes
    lambdas = (0.2, 0.1, 0.1, 0.3, 0.3)
    comps = [1.0, 1.0, 1.0, 1.0, 1.0]
    total, bd = loss_total(comps, SpadConfig(lambdas=lambdas))
    ok &= abs(float(ad.value(total)) - 1.0) < 1e-15
    for i, lam in enumerate(lambdas):
        comps = [0.0] * 5
        comps[i] = 1.0
        total, _ = loss_total(comps, SpadConfig(lambdas=lambdas))
        ok &= abs(float(ad.value(total)) - lam) < 1e-15
    assert verdict(7, "spad fixed points", ok)


def test_criterion_08_concentration():
    t0 = time.time()
    p = LifParams()

    def time_avg(t_steps):
        return lif_constant_drive(DRIVE_GRID, t_steps, p).mean(axis=0)

    r_ref = time_avg(8192)
    v16 = float((time_avg(16) - r_ref).var())
    v64 = float((time_avg(64) - r_ref).var())
    elapsed = time.time() - t0
    ok = v64 < 0.5 * v16 and elapsed < 30.0
    assert verdict(8, "temporal concentration", ok,
                   f"var16 {v16:.2e} var64 {v64:.2e}, {elapsed:.2f}s")


def test_criterion_09_desk_scale_learning(smoke_run, periodic_run):
    ce = smoke_run["result"].val_ce
    ok = ce < math.log(256.0)
    ok &= smoke_run["train_cfg"].total_steps <= 2000
    ok &= smoke_run["seconds"] < 1200.0

    prompt = [data.BOS_ID] + list(data.encode("abababab"))
    res = generate(prompt, 50, periodic_run["cfg"], periodic_run["result"].params)
    new = res.tokens[len(prompt):]
    expect = [ord("ab"[(8 + i) % 2]) for i in range(50)]
    acc = float(np.mean([a == b for a, b in zip(new, expect)]))
    ok &= acc >= 0.95
    ok &= periodic_run["seconds"] < 1200.0
    assert verdict(9, "desk-scale learning", ok,
                   f"val CE {ce:.3f} < ln256 {math.log(256):.3f} in "
                   f"{smoke_run['train_cfg'].total_steps} steps "
                   f"({smoke_run['seconds']:.0f}s), greedy acc {acc:.2f}")


def test_criterion_10_spad_directional_benefit(student_hard, student_spad,
                                               student_sta_hta):
    ce_hard = student_hard.val_ce
    ce_spad = student_spad.val_ce
    ce_sta = student_sta_hta.val_ce
    # hard mode and the hta-only lambda vector optimize the identical CE
    # objective, so ce_hard doubles as the hta-only baseline
    ok = ce_spad <= ce_hard and ce_sta <= ce_hard
    assert verdict(10, "spad directional benefit", ok,
                   f"hard/hta {ce_hard:.4f}, spad {ce_spad:.4f}, "
                   f"sta+hta {ce_sta:.4f}")


def test_criterion_11_energy_model(smoke_run, smoke_corpus):
    ok = True
    c = energy.EnergyConstants()
    ok &= abs(1e9 * c.e_ac * 1e3 - 0.9) < 1e-12   # 1e9 ACs -> 0.9 mJ
    ok &= abs(1e9 * c.e_mac * 1e3 - 4.6) < 1e-12  # 1e9 MACs -> 4.6 mJ

    # toy config: hand-counted flops and the assembled total, bit-exact
    toy = ModelConfig(vocab_size=4, d_model=2, n_layers=1, n_heads=1, d_ff=4,
                      max_seq_len=4, t_steps=2)
    fc = energy.count_flops(toy, 4)
    hand_sfsa = 4 * 4 * 2 * 2 + 4 * 4 * 2 + 4 * 4 * 2  # projections + scores + values
    hand_sffn = 2 * 4 * 2 * 4
    hand_head = 4 * 2 * 4
    ok &= fc.sfsa == [hand_sfsa] and fc.sffn == [hand_sffn]
    ok &= fc.head == hand_head and fc.embed == 0
    tparams = init_params(toy, 3)
    _, trace = snn_forward(np.array([1, 2, 3, 0]), toy, tparams)
    rep = energy.energy_report(toy, trace)
    rates = energy.measure_firing_rates(trace)
    ac_ops = sum(int(round(r["sfsa"] * 2 * hand_sfsa))
                 + int(round(r["sffn"] * 2 * hand_sffn)) for r in rates)
    hand_total = c.e_mac * (0 + hand_head) + c.e_ac * ac_ops
    ok &= hand_total == rep.snn_energy_j

    # teacher MAC instrumentation agrees with the analytic count exactly
    tcfg = ModelConfig(vocab_size=17, d_model=16, n_layers=2, n_heads=2,
                       d_ff=24, max_seq_len=12, t_steps=1)
    with count_macs() as cm:
        ann_forward(np.arange(9), tcfg, init_params(tcfg, 4, kind="teacher"))
    ok &= cm.macs == energy.count_flops(tcfg, 9).total()

    # trained smoke model: whenever f_r*T*E_AC < E_MAC holds per sublayer,
    # the spiking attention+FFN energy undercuts the dense equivalent
    cfg = smoke_run["cfg"]
    params = smoke_run["result"].params
    _, val_ids = data.split_corpus(smoke_corpus, 0.1)
    seq_len = smoke_run["train_cfg"].seq_len
    xb, _ = data.batch_at(data.make_windows(val_ids, seq_len), 0, 4)
    details = []
    for t in (2, 4):
        cfg_t = dataclasses.replace(cfg, t_steps=t)
        _, trace = snn_forward(xb, cfg_t, params)
        rep = energy.energy_report(cfg_t, trace)
        for lay in rep.layers:
            for r in (lay.sfsa_rate, lay.sffn_rate):
                ok &= r * t * c.e_ac < c.e_mac
        snn_core = c.e_ac * sum(l.sfsa_sops + l.sffn_sops for l in rep.layers)
        ann_core = c.e_mac * sum(l.sfsa_flops + l.sffn_flops for l in rep.layers)
        ok &= snn_core < ann_core
        details.append(f"T={t}: {snn_core / ann_core:.3f}x dense")
    assert verdict(11, "energy model", ok, "; ".join(details))


def test_criterion_12_determinism(tmp_path):
    cfg = ModelConfig(vocab_size=257, d_model=16, n_layers=1, n_heads=2,
                      d_ff=32, max_seq_len=16, t_steps=2)
    corpus = data.encode("determinism check text " * 60)
    tc = TrainConfig(total_steps=6, batch_size=2, seq_len=16, lr_peak=1e-3, seed=9)

    outs = []
    for run in range(2):
        mpath = tmp_path / f"metrics{run}.tsv"
        res = train_loop(tc, cfg, corpus, metrics_path=str(mpath))
        ckpt = tmp_path / f"run{run}.ckpt"
        save_model(str(ckpt), cfg, res.params)
        gen = generate([data.BOS_ID, 100, 101], 8, cfg, res.params,
                       temperature=0.8, rng=Rng(4))
        _, trace = snn_forward(np.arange(10), cfg, res.params)
        report = energy.render_report(energy.energy_report(cfg, trace))
        outs.append((ckpt.read_bytes(), mpath.read_bytes(), gen.tokens, report))

    ok = outs[0][0] == outs[1][0]   # checkpoint bytes
    ok &= outs[0][1] == outs[1][1]  # metrics bytes
    ok &= outs[0][2] == outs[1][2]  # sampled generation
    ok &= outs[0][3] == outs[1][3]  # energy report text
    assert verdict(12, "determinism", ok)
