"""Acceptance suite: one PASS/FAIL line per criterion (1-10).

Each test prints ``criterion k: PASS|FAIL ...`` straight to the terminal
(also under output capture), followed by indented ``info:`` lines with the
measured quantities. A failing criterion fails its test; nothing is
loosened to make a line green.

Where a criterion fixes the paper's spring-mass-damper setup (T=8, initial
positions in [1.8, 2] m) the D_Adaptive problem is infeasible at t=0, so
those criteria are evaluated as stated and fail; the same statistics on
initial states scaled by 0.3 are printed as info lines for comparison.
"""
import time

import numpy as np
import pytest

from admpc import admm, benchmarks as bm, lmi, mpc
from admpc.conic import psd_residual, solve
from admpc.errors import StepInfeasible
from admpc.model import decompose, euler_discretize, zoh_discretize
from admpc.terminal_sets import EllipsoidalSet, closed_loop_constraints, gilbert_tan, max_ellipsoid
from admpc.terminal_sets import verify_invariance_sampled

from . import oracles

pytestmark = pytest.mark.slow

PAPER_P_C = np.array([[3.46, 0.13], [0.13, 1.25]])
PAPER_P_D = np.diag([8.07, 4.25])
SCALE = 0.3  # initial-state scale of the supplementary chain runs
C6_HORIZON = 30  # shortest tried horizon at which the paper's initial states are feasible


@pytest.fixture()
def emit(capsys):
    def _emit(k, ok, detail, info=()):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
            for line in info:
                print(f"    info: {line}")
        return ok

    return _emit


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


# -- shared computations ---------------------------------------------------------


@pytest.fixture(scope="module")
def illus_setup():
    sys_, part = bm.illustrative_system()
    cs = decompose(sys_, part)
    return sys_, cs, lmi.synthesize_centralized(sys_), lmi.build_design_phase(cs)


@pytest.fixture(scope="module")
def grid_run(illus_setup):
    """Criterion 3 data: t=0 feasibility of C_Ellip and D_Adaptive on the 21 x 21 grid."""
    sys_, cs, central, design = illus_setup
    with Timer() as tm:
        ce = mpc.build(mpc.formulate(cs, "C_Ellip", 2, central=central, design=design))
        da = mpc.build(mpc.formulate(cs, "D_Adaptive", 2, design=design))
        pts = bm.grid_x0(sys_, 21)
        flags, sols = [], {}
        for k, x0 in enumerate(pts):
            a, b = ce.solve(x0), da.solve(x0)
            flags.append((a.ok, b.ok))
            if b.ok:
                sols[k] = b
    return pts, np.array(flags), sols, tm.s


def _illustrative_starts(illus_setup, grid_run, n_random=33, seed=2024):
    """Feasible grid points plus seeded random points near the feasible strip."""
    sys_, cs, _, design = illus_setup
    pts, flags, _, _ = grid_run
    starts = [pts[k] for k in np.flatnonzero(flags[:, 1])]
    da = mpc.build(mpc.formulate(cs, "D_Adaptive", 2, design=design))
    rng = np.random.default_rng(seed)
    extra = []
    while len(extra) < n_random:
        x0 = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-4.5, 4.5)])
        if da.solve(x0).ok:
            extra.append(x0)
    return starts + extra


@pytest.fixture(scope="module")
def rh_runs(illus_setup, grid_run):
    """Criterion 4 data: 100 D_Adaptive runs that are feasible at t=0.

    50 on the illustrative system (T=2) and 50 on 2-mass chains (T=4, initial
    states scaled by 0.2) simulated with the prediction model, the setting
    in which the recursive-feasibility argument applies.
    """
    sys_, cs, _, design = illus_setup
    runs, t0_sols = [], []
    with Timer() as tm:
        form = mpc.formulate(cs, "D_Adaptive", 2, design=design)
        for x0 in _illustrative_starts(illus_setup, grid_run):
            runs.append(("illustrative", _rh(sys_, form, x0)))
        spec = bm.SmdChainSpec(M=2)
        seeds = iter(bm.trial_seeds(31, 200))
        while len(runs) < 100:
            chain = bm.smd_instance(spec, next(seeds))
            pred = chain.prediction_model()
            ccs = decompose(pred, chain.partition)
            f = mpc.formulate(ccs, "D_Adaptive", 4, design=lmi.build_design_phase(ccs))
            x0 = 0.2 * chain.x0
            first = mpc.build(f).solve(x0)
            if not first.ok:
                continue
            if len(t0_sols) < 10:
                t0_sols.append((ccs, f.design, first))
            runs.append(("smd2", _rh(pred, f, x0)))
    return runs, t0_sols, tm.s


def _rh(sim, form, x0):
    try:
        return mpc.receding_horizon(sim, form, x0, check_tail=True)
    except StepInfeasible as exc:
        return exc


@pytest.fixture(scope="module")
def admm_runs(illus_setup):
    """Criterion 9 data: distributed vs centralized D_Adaptive solves."""
    sys_, cs, _, design = illus_setup
    trial = bm.smd_trials(bm.SmdChainSpec(M=3), 1, seed=0, matched=True)[0]
    cases = [
        ("illustrative T=2", cs, mpc.formulate(cs, "D_Adaptive", 2, design=design), np.array([0.0, 2.0])),
        ("smd3 T=4", trial.cs, mpc.formulate(trial.cs, "D_Adaptive", 4, design=lmi.build_design_phase(trial.cs)),
         0.1 * trial.x0),
    ]
    out = []
    with Timer() as tm:
        for name, ccs, form, x0 in cases:
            prog = mpc.build(form)
            hat = prog.solve(x0).tv.beta
            ref = prog.solve(x0, beta_hat=hat)
            net = admm.split(form, x0=x0, beta_hat=hat)
            sol, state = admm.admm_solve(net)
            out.append((name, ccs, form.design, ref, net, sol, state))
    return out, tm.s


@pytest.fixture(scope="module")
def paper_chain():
    """3-mass chains with the paper's initial states, T=8, ZOH plant (criteria 5 and 7)."""
    trials = bm.smd_trials(bm.SmdChainSpec(M=3), 100, seed=0)
    with Timer() as tm:
        rep = bm.run_comparison(trials, ["C_Max", "D_Adaptive"], 8, keep_traces=True, workers=1)
    return rep, tm.s


@pytest.fixture(scope="module")
def paper_chain_45():
    reps = {}
    with Timer() as tm:
        for M in (4, 5):
            trials = bm.smd_trials(bm.SmdChainSpec(M=M), 10, seed=M)
            reps[M] = bm.run_comparison(trials, ["C_Max", "D_Adaptive"], 8, workers=1)
    return reps, tm.s


@pytest.fixture(scope="module")
def scaled_chains():
    """Supplementary: same setup with initial states scaled by SCALE, 3 trials per chain length."""
    reps = {}
    with Timer() as tm:
        for M in (3, 4, 5):
            trials = bm.smd_trials(bm.SmdChainSpec(M=M), 3, seed=100 + M)
            trials = [bm.Trial(t.index, t.seed, t.cs, t.sim, SCALE * t.x0) for t in trials]
            reps[M] = bm.run_comparison(trials, ["C_Max", "D_Adaptive", "D_Ad0"], 8, keep_traces=True, workers=1)
    return reps, tm.s


def _error_decay(rep):
    err = bm.trajectory_error(rep)
    if err.size == 0:
        return None
    mean = np.nanmean(err, axis=0)
    return err, float(np.max(mean)), float(mean[-1])


def _breakdown(rep, variant):
    runs = rep.runs(variant)
    at0 = sum(1 for r in runs if r.infeasible_at == 0)
    later = sum(1 for r in runs if r.infeasible_at not in (None, 0))
    errors = sum(1 for r in runs if r.error)
    return f"{variant}: infeasible at t=0 {at0}, later {later}, errors {errors}"


def _suboptimality(reps, tol):
    viol, subs = [], []
    for M, rep in reps.items():
        cm = {r.trial: r for r in rep.runs("C_Max")}
        for r in rep.runs("D_Adaptive"):
            c = cm[r.trial]
            if not (r.feasible and c.feasible):
                viol.append((M, r.trial, "infeasible"))
                continue
            if c.cost > r.cost + tol * (1 + abs(r.cost)):
                viol.append((M, r.trial, c.cost - r.cost))
            subs.append((r.cost - c.cost) / c.cost)
    return viol, subs


# -- criteria ----------------------------------------------------------------------


def test_criterion_1_centralized_synthesis(emit):
    with Timer() as tm:
        sys_, part = bm.illustrative_system()
        sol = solve(lmi.build_theorem1_synthesis(sys_))
        P_c = np.linalg.inv(sol["E"])
        P_dare = oracles.riccati_fixed_point(sys_.A, sys_.B, sys_.Q, sys_.R)
        dominance = psd_residual(P_c - P_dare + 1e-6 * np.eye(2))
        lmi_res = psd_residual(lmi._synthesis_lmi(sys_.A, sys_.B, sys_.Q, sys_.R, sol["E"], sol["Y"]))
        cs = decompose(sys_, part)
        P_d = cs.block_diag_from_local(lmi.build_design_phase(cs).P)
    dev_c = float(np.max(np.abs(P_c - PAPER_P_C)))
    dev_d = float(np.max(np.abs(P_d - PAPER_P_D)))
    ok = sol.ok and dominance >= 0 and lmi_res >= -1e-8 and tm.s < 5
    info = [
        f"lambda_min(P_c - P_DARE + 1e-6 I) = {dominance:.3e}, LMI residual = {lmi_res:.3e}, {tm.s:.2f} s",
        f"P_c = {np.round(P_c, 3).tolist()}, max deviation from paper {dev_c:.3f}"
        + (" (FLAGGED > 0.05)" if dev_c > 0.05 else ""),
        f"P_d = {np.round(P_d, 3).tolist()}, max deviation from paper {dev_d:.3f}"
        + (" (FLAGGED > 0.2)" if dev_d > 0.2 else ""),
    ]
    emit(1, ok, "P_c dominates the Riccati oracle and satisfies the synthesis LMI", info)
    assert ok


def test_criterion_2_adaptive_set_soundness(emit, illus_setup, grid_run, rh_runs, admm_runs):
    _, cs, _, design = illus_setup
    instances = [(f"grid {k}", cs, design, s.tv) for k, s in grid_run[2].items()]
    instances += [(f"smd2 t=0 #{j}", c, d, s.tv) for j, (c, d, s) in enumerate(rh_runs[1])]
    for name, ccs, d, ref, _, sol, _ in admm_runs[0]:
        instances += [(f"{name} centralized", ccs, d, ref.tv), (f"{name} admm", ccs, d, sol.tv)]
    worst_v = worst_d = -np.inf
    worst_t, bad = 0.0, []
    for j, (name, ccs, d, tv) in enumerate(instances):
        with Timer() as tm:
            rep = verify_invariance_sampled(ccs, d, tv, n_samples=10_000, seed=j)
        worst_v, worst_d, worst_t = max(worst_v, rep.max_violation), max(worst_d, rep.decrease), max(worst_t, tm.s)
        if not rep.ok() or tm.s >= 30:
            bad.append(name)
    ok = not bad
    info = [f"{len(instances)} instances, 1e4 samples each; worst violation {worst_v:.2e}, "
            f"worst summed decrease {worst_d:.2e}, slowest {worst_t:.2f} s"]
    if bad:
        info.append(f"failing: {bad[:5]}")
    emit(2, ok, "sampled containment, constraints and decrease on every solved D_Adaptive instance", info)
    assert ok


def test_criterion_3_feasibility_phenomenon(emit, grid_run):
    pts, flags, _, secs = grid_run
    only_da = int(np.sum(~flags[:, 0] & flags[:, 1]))
    only_ce = int(np.sum(flags[:, 0] & ~flags[:, 1]))
    ok = only_da >= 1 and only_ce == 0 and secs < 600
    info = [
        f"feasible at t=0: C_Ellip {int(flags[:, 0].sum())}, D_Adaptive {int(flags[:, 1].sum())} of {len(pts)}",
        f"D_Adaptive only: {only_da}, C_Ellip only: {only_ce} (over all grid points), {secs:.1f} s",
    ]
    emit(3, ok, "grid points where only the adaptive set is feasible, none the other way", info)
    assert ok


def test_criterion_4_recursive_feasibility(emit, rh_runs):
    runs, _, secs = rh_runs
    infeasible, dec_bad, tail_bad, worst_tail, worst_dec = [], [], [], 0.0, -np.inf
    for k, (kind, tr) in enumerate(runs):
        if isinstance(tr, StepInfeasible):
            infeasible.append((k, kind, tr.t))
            continue
        recs = [r for r in tr.records if r.status != "converged"]
        for a, b in zip(recs, recs[1:]):
            slack = (b.J_star - a.J_star) + a.stage_cost - 1e-6 * (1 + abs(a.J_star))
            worst_dec = max(worst_dec, slack)
            if slack > 0:
                dec_bad.append((k, a.t))
        tails = [r.tail_violation for r in recs[:-1] if r.tail_violation is not None]
        if len(tails) < len(recs) - 1:
            tail_bad.append((k, "missing"))
        if tails:
            worst_tail = max(worst_tail, max(tails))
            if max(tails) > 1e-7:
                tail_bad.append((k, max(tails)))
    ok = not infeasible and not dec_bad and not tail_bad and len(runs) == 100 and secs < 900
    kinds = {k: sum(1 for kk, _ in runs if kk == k) for k in ("illustrative", "smd2")}
    info = [
        f"runs: {kinds}, StepInfeasible after t=0: {len(infeasible)}, {secs:.0f} s",
        f"worst decrease slack {worst_dec:.2e} (<= 0 required), worst tail violation {worst_tail:.2e}",
    ]
    emit(4, ok, "no infeasibility after t=0, cost decrease and tail feasibility at every step", info)
    assert ok


def test_criterion_5_trajectory_proximity(emit, paper_chain, scaled_chains):
    rep, secs = paper_chain
    n_da = sum(r.feasible for r in rep.runs("D_Adaptive"))
    n_cm = sum(r.feasible for r in rep.runs("C_Max"))
    dec = _error_decay(rep)
    ok = n_da == 100 and n_cm == 100 and dec is not None
    if ok:
        err, peak, final = dec
        ok = bool(np.all(np.isfinite(err))) and final < 0.1 * peak and secs < 1200
    info = [f"paper initial states, T=8: D_Adaptive feasible in {n_da}/100 trials "
            f"(C_Max {n_cm}/100), {secs:.0f} s",
            _breakdown(rep, "D_Adaptive") + "; " + _breakdown(rep, "C_Max")]
    sdec = _error_decay(scaled_chains[0][3])
    if sdec is not None:
        info.append(f"x0 scaled by {SCALE}: trial-mean error peak {sdec[1]:.3e}, final {sdec[2]:.3e} "
                    f"(ratio {sdec[2] / sdec[1]:.3f}) over {sdec[0].shape[0]} trials")
    srep = scaled_chains[0][3]
    info.append(f"x0 scaled by {SCALE}: " + _breakdown(srep, "D_Adaptive") + "; " + _breakdown(srep, "C_Max"))
    emit(5, ok, "D_Adaptive vs C_Max max-abs trajectory error decays below 10% of its peak", info)
    assert ok


@pytest.fixture(scope="module")
def ad0_runs():
    reps = {}
    with Timer() as tm:
        for M in (3, 4, 5):
            trials = bm.smd_trials(bm.SmdChainSpec(M=M), 2, seed=200 + M)
            reps[M] = bm.run_comparison(trials, ["D_Adaptive", "D_Ad0"], C6_HORIZON, workers=1)
    return reps, tm.s


def test_criterion_6_ad0_timing_and_cost(emit, ad0_runs, scaled_chains):
    reps, secs = ad0_runs
    bad, gaps, infeasible = [], [], 0
    t_ad = t_a0 = 0.0
    for M, rep in reps.items():
        a0 = {r.trial: r for r in rep.runs("D_Ad0")}
        for r in rep.runs("D_Adaptive"):
            b = a0[r.trial]
            if not (r.feasible and b.feasible):
                infeasible += 1
                continue
            gaps.append(b.cost - r.cost)
            if b.cost < r.cost - 1e-6:
                bad.append((M, r.trial, b.cost - r.cost))
        t_ad = max(t_ad, rep.mean_solve_ms("D_Adaptive") / max(rep.mean_solve_ms("D_Ad0"), 1e-12))
    faster = all(rep.mean_solve_ms("D_Ad0") < rep.mean_solve_ms("D_Adaptive") for rep in reps.values())
    ok = faster and not bad and infeasible == 0 and secs < 900
    info = [
        f"paper initial states, T={C6_HORIZON}, M=3..5 x 2 trials: {secs:.0f} s, infeasible trials {infeasible}",
        *[f"M={M}: " + _breakdown(rep, "D_Adaptive") for M, rep in reps.items()],
        "mean solve ms (D_Adaptive / D_Ad0): "
        + ", ".join(f"M={M} {rep.mean_solve_ms('D_Adaptive'):.1f}/{rep.mean_solve_ms('D_Ad0'):.1f}"
                    for M, rep in reps.items()),
        f"cost(D_Ad0) - cost(D_Adaptive): mean {np.mean(gaps) if gaps else float('nan'):.3e}, "
        f"min {min(gaps) if gaps else float('nan'):.3e}",
    ]
    if bad:
        info.append(f"per-trial cost ordering violated beyond 1e-6: {bad}")
    sg = [b.cost - r.cost for rep in scaled_chains[0].values()
          for r, b in zip(rep.runs("D_Adaptive"), rep.runs("D_Ad0")) if r.feasible and b.feasible]
    if sg:
        info.append(f"x0 scaled by {SCALE}, T=8: gap mean {np.mean(sg):.3e}, min {min(sg):.3e} over {len(sg)} trials")
    emit(6, ok, "D_Ad0 solves faster and never beats D_Adaptive on cost", info)
    assert ok


def test_criterion_7_suboptimality(emit, paper_chain, paper_chain_45, scaled_chains):
    reps = {3: paper_chain[0], **paper_chain_45[0]}
    viol, subs = _suboptimality(reps, 1e-8)
    n_inf = sum(1 for v in viol if v[2] == "infeasible")
    ok = not viol and bool(subs) and float(np.mean(subs)) <= 0.15
    info = [f"paper initial states, T=8: {n_inf} of {sum(len(r.runs('D_Adaptive')) for r in reps.values())} "
            f"trials without a D_Adaptive run; ordering violations {len(viol) - n_inf}"]
    info += [f"M={M}: " + _breakdown(rep, "D_Adaptive") + "; " + _breakdown(rep, "C_Max") for M, rep in reps.items()]
    if subs:
        info.append(f"mean suboptimality {np.mean(subs):.4f}")
    sv, ss = _suboptimality(scaled_chains[0], 1e-8)
    if ss:
        info.append(f"x0 scaled by {SCALE}: mean suboptimality {np.mean(ss):.4f} (max {max(ss):.4f}), "
                    f"ordering violations {len(sv)}, {len(ss)} trials")
    emit(7, ok, "C_Max <= D_Adaptive per trial and mean suboptimality <= 15%", info)
    assert ok


def test_criterion_8_gilbert_tan(emit, illus_setup):
    sys_, _, central, _ = illus_setup
    with Timer() as tm:
        A_K = sys_.A + sys_.B @ central.K
        o_inf = gilbert_tan(A_K, *closed_loop_constraints(sys_, central.K))
        alpha = max_ellipsoid(central.P, central.K, sys_)
        v_ell = o_inf.violation(EllipsoidalSet(central.P, alpha).boundary_samples(1000, seed=8))
        X = o_inf.boundary_samples(1000, seed=9)
        v_img = o_inf.violation(X @ A_K.T)
    ok = v_ell <= 1e-9 and v_img <= 1e-9 and tm.s < 60
    info = [f"k* = {o_inf.k_star}, {o_inf.A.shape[0]} rows; ellipsoid samples violation {v_ell:.2e}, "
            f"one-step image violation {v_img:.2e}, {tm.s:.2f} s"]
    emit(8, ok, "Gilbert-Tan terminates and the maximal admissible set is invariant", info)
    assert ok


def test_criterion_9_admm_equivalence(emit, admm_runs):
    out, secs = admm_runs
    ok = secs < 600
    info = []
    for name, ccs, d, ref, net, sol, state in out:
        rel = abs(sol.objective - ref.objective) / max(1.0, abs(ref.objective))
        rep = verify_invariance_sampled(ccs, d, sol.tv, n_samples=10_000, seed=99)
        topo = net.bus.topology_violations(ccs)
        viol = admm.assembled_violation(net, sol)
        ok = ok and rel <= 1e-3 and rep.ok() and not topo
        info.append(f"{name}: {state.round} rounds, rel objective error {rel:.2e}, sampled violation "
                    f"{rep.max_violation:.2e}, decrease {rep.decrease:.2e}, assembled violation {viol:.1e}, "
                    f"topology violations {len(topo)}")
    info.append(f"{secs:.1f} s")
    emit(9, ok, "consensus ADMM matches the centralized solve and respects the coupling graph", info)
    assert ok


def test_criterion_10_discretization(emit):
    chains = []
    with Timer() as tm:
        for M, n, seed in ((2, 200, 31), (3, 100, 0), (3, 1, 0), (3, 3, 103), (4, 10, 4), (5, 10, 5),
                           (4, 3, 104), (5, 3, 105), (3, 2, 203), (4, 2, 204), (5, 2, 205)):
            chains += [bm.smd_instance(bm.SmdChainSpec(M=M), s) for s in bm.trial_seeds(seed, n)]
        euler_bad = zoh_err = 0.0
        for c in chains:
            e = euler_discretize(c.cts, 0.1)
            euler_bad = max(euler_bad, float(np.max(np.abs(e.A - (np.eye(c.cts.n) + 0.1 * c.cts.A_c)))))
            z = zoh_discretize(c.cts, 0.1)
            Az, Bz = oracles.zoh_series(c.cts.A_c, c.cts.B_c, 0.1)
            zoh_err = max(zoh_err, float(np.max(np.abs(z.A - Az))), float(np.max(np.abs(z.B - Bz))))
    ok = euler_bad == 0.0 and zoh_err <= 1e-10 and tm.s < 5
    info = [f"{len(chains)} chains; Euler max deviation {euler_bad:.1e}, ZOH vs series {zoh_err:.2e}, {tm.s:.2f} s"]
    emit(10, ok, "Euler is I + h A_c exactly and ZOH matches the series oracle", info)
    assert ok
