"""Acceptance criteria, one test per criterion.

Each test records a single ``CRITERION k: PASS|FAIL ...`` line that the
terminal summary prints at the end of the run. Criteria 2 to 4 train 25
desk-scale runs and dominate the runtime (about 30 minutes on one core).
"""

import math
import time

import numpy as np
import pytest

from shapeopt import agent
from shapeopt.agent import PpoConfig, RolloutBatch, clip_target, gae, init_params, normalize
from shapeopt.config import GeometryConfig, RunConfig, RunSection, load_recipe
from shapeopt.envloop import MA_WINDOW, evaluate, train
from shapeopt.flow import FlowConfig, make_solver, run_flow
from shapeopt.geometry import (ActionTriplet, DegenerateShape, ShapeSpec, bezier_controls,
                               build_shape, circle_polygon, decode_point, polygon_area,
                               reference_points, sort_points, tangent_angles)

from conftest import report

SEEDS = (0, 1, 2, 3, 4)

# mean Cd of the reference cylinder on a 900 x 600 grid (4x the cells of the
# 450 x 300 default), t = 90, averaged over [45, 90]; computed once and frozen
CYLINDER_ORACLE_CD = 1.3324180264070122


def cylinder():
    return build_shape(ShapeSpec(tuple(reference_points(4))))


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Desk-scale training runs, trained on first use and shared between criteria."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(recipe, seed):
        key = (recipe, seed)
        if key not in cache:
            cfg = load_recipe(recipe).with_run(seed=seed)
            cache[key] = (cfg, train(cfg, root / f"{recipe}_s{seed}"), root / f"{recipe}_s{seed}")
        return cache[key]

    return get


def full_window_ma(history):
    ma = history.moving_average()
    return ma[MA_WINDOW - 1:]


def episodes_to_plateau(history, frac=0.9):
    """First episode whose full-window moving average reaches frac of the final one."""
    ma = history.moving_average()
    final = ma[-1]
    threshold = final - (1.0 - frac) * abs(final)
    idx = np.arange(ma.size)
    hit = np.nonzero((idx >= MA_WINDOW - 1) & (ma >= threshold))[0]
    return int(hit[0])


# ------------------------------------------------------------ 1

def test_criterion_1_cylinder_baseline():
    cfg = load_recipe("reference").flow
    assert (cfg.nx, cfg.ny, cfg.re_ref) == (450, 300, 200.0)
    res = run_flow(cylinder(), cfg)
    w = res.window()
    cl = np.array([s.cl for s in w])
    half = len(cl) // 2
    amp_early = 0.5 * np.ptp(cl[:half])
    amp_late = 0.5 * np.ptp(cl[half:])
    sustained = amp_late >= 0.1 and amp_late >= 0.8 * amp_early
    ratio = abs(res.mean_cl / res.mean_cd)
    rel = abs(res.mean_cd - CYLINDER_ORACLE_CD) / CYLINDER_ORACLE_CD
    ok = (not res.failed) and sustained and ratio <= 0.05 and rel <= 0.25
    report(1, ok, f"t_max={cfg.t_end:g} mean_cd={res.mean_cd:.4f} mean_cl={res.mean_cl:.4f} "
                  f"|cl/cd|={ratio:.4f} (<= 0.05) cl half-amplitude {amp_early:.3f} -> {amp_late:.3f} "
                  f"oracle_cd={CYLINDER_ORACLE_CD:.4f} rel_err={rel:.3f} (<= 0.25)")
    assert ok


# ------------------------------------------------------------ 2

def test_criterion_2_learning_signal(runs):
    rows = []
    wins = 0
    for seed in SEEDS:
        _, hist, _ = runs("baseline_1free_desk", seed)
        ma = full_window_ma(hist)
        up = ma[-1] > ma[0]
        wins += up
        rows.append(f"s{seed}:{ma[0]:+.3f}->{ma[-1]:+.3f}")
    ok = wins >= 4
    report(2, ok, f"final window above first in {wins}/5 seeds (>= 4): " + " ".join(rows))
    assert ok


def test_evaluated_policy_beats_training_median(runs):
    cfg, hist, outdir = runs("baseline_1free_desk", 0)
    params, _ = agent.load_checkpoint(outdir / "checkpoint.bin")
    rec = evaluate(params, cfg, 1)[0]
    last = hist.rewards[-MA_WINDOW:]
    assert rec.reward >= np.median(last)


# ------------------------------------------------------------ 3

def test_criterion_3_shaping_speedup(runs):
    faster = 0
    rows = []
    for seed in SEEDS:
        _, base, _ = runs("baseline_4free_desk", seed)
        _, shaped, _ = runs("shaped_4free_desk", seed)
        nb, ns = episodes_to_plateau(base), episodes_to_plateau(shaped)
        faster += ns < nb
        rows.append(f"s{seed}:{ns}vs{nb}")
    ok = faster >= 3
    report(3, ok, f"shaped reaches 90% of its final MA sooner in {faster}/5 seeds (>= 3), "
                  f"episodes shaped vs baseline: " + " ".join(rows))
    assert ok


# ------------------------------------------------------------ 4

def test_criterion_4_area_constraint(runs):
    closer = 0
    rows = []
    for seed in SEEDS:
        cfg, con, _ = runs("area_constrained_3free_desk", seed)
        _, free, _ = runs("baseline_3free_desk", seed)
        target = cfg.reward.target_area
        a_con = np.mean([r.area for r in con.top(10)])
        a_free = np.mean([r.area for r in free.top(10)])
        closer += abs(a_con - target) < abs(a_free - target)
        rows.append(f"s{seed}:{a_con:.3f}vs{a_free:.3f}")
    ok = closer >= 4
    report(4, ok, f"constrained top-10 mean area closer to pi in {closer}/5 seeds (>= 4), "
                  f"constrained vs unconstrained: " + " ".join(rows))
    assert ok


# ------------------------------------------------------------ 5

def _divergence_free():
    cfg = FlowConfig(length=16.0, width=10.0, nx=48, ny=30, t_max=4.0, kick=0.5)
    solver = make_solver(cylinder(), cfg)
    state = solver.initial_state()
    worst = 0.0
    for _ in range(40):
        state = solver.step(state)
        div = solver.divergence(state.u, state.v)[~solver.mask]
        worst = max(worst, float(np.abs(div).max()) * cfg.h_min / cfg.v_in)
    return worst <= 1e-8, f"div {worst:.1e}"


def _g1_joints():
    rng = np.random.default_rng(0)
    worst = 0.0
    checked = 0
    while checked < 200:
        n = int(rng.integers(3, 9))
        pts = [decode_point(ActionTriplet(*rng.uniform(-1, 1, 3)), i, n, 0.3, 3.0) for i in range(n)]
        try:
            pts = sort_points(pts)
        except DegenerateShape:
            continue
        th = tangent_angles(pts, float(rng.uniform(0, 1)))
        for i in range(n):
            c_out = bezier_controls(pts[i], pts[(i + 1) % n], th[i], th[(i + 1) % n])
            c_in = bezier_controls(pts[i - 1], pts[i], th[i - 1], th[i])
            # shared endpoint, and both handles along the same tangent direction
            worst = max(worst, float(np.abs(c_in[3] - c_out[0]).max()))
            for d in (c_out[1] - c_out[0], c_in[3] - c_in[2]):
                if np.hypot(*d) > 1e-9:
                    worst = max(worst, abs(math.remainder(math.atan2(d[1], d[0]) - th[i], 2 * math.pi)))
        checked += 1
    return worst <= 1e-9, f"G1 {worst:.1e}"


def _radius_bounds():
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(10_000):
        p = decode_point(ActionTriplet(*rng.uniform(-1, 1, 3)), int(rng.integers(0, 4)), 4, 0.3, 3.0)
        r = math.hypot(p.x, p.y)
        ok &= 0.3 * 3.0 - 1e-12 <= r <= 3.0 + 1e-12
    return ok, "radius bounds 1e4"


def _circle_area():
    err = abs(polygon_area(circle_polygon(1.0, 4096)) - math.pi)
    ref = abs(polygon_area(cylinder()) - math.pi)
    return err <= 1e-3 and ref <= 1e-3, f"area err {max(err, ref):.1e}"


def _gradient_check():
    rng = np.random.default_rng(2)
    p = init_params(2, 3, (8, 8), rng, output_scale=1.0)
    obs = rng.standard_normal((10, 2))
    mean, _ = agent.forward_policy(p, obs)
    raw = mean + 0.5 * rng.standard_normal(mean.shape)
    logp = agent.gaussian_log_prob(raw, mean, p.log_std) + rng.normal(0, 0.3, 10)
    batch = RolloutBatch(obs, raw, logp, rng.standard_normal(10), np.zeros(10))
    adv, ret = normalize(rng.standard_normal(10)), rng.standard_normal(10)
    cfg = PpoConfig(hidden=(8, 8))
    _, grads = agent.surrogate_loss(p, batch, adv, ret, cfg)
    worst, h = 0.0, 1e-6
    for k in p.names():
        arr = p.arrays[k]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = agent.surrogate_loss(p, batch, adv, ret, cfg)[0].loss
            arr[idx] = old - h
            dn = agent.surrogate_loss(p, batch, adv, ret, cfg)[0].loss
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-4))
    return worst <= 1e-4, f"grad {worst:.1e}"


def _surrogate_identity():
    rng = np.random.default_rng(3)
    p = init_params(1, 6, (8, 8), rng, output_scale=1.0)
    samples = [agent.sample_action(p, np.ones(1), rng) for _ in range(32)]
    batch = RolloutBatch(np.ones((32, 1)), np.array([s.raw for s in samples]),
                         np.array([s.log_prob for s in samples]), rng.standard_normal(32), np.zeros(32))
    adv = agent.advantage(batch, p)
    info, _ = agent.surrogate_loss(p, batch, adv, batch.rewards, PpoConfig(hidden=(8, 8)))
    return abs(info.policy_objective) <= 1e-12, f"L(k,k) {abs(info.policy_objective):.1e}"


def _clip_cases():
    cases = [(0.2, 2.0, 2.4), (0.2, -1.0, -0.8), (0.2, 0.0, 0.0), (0.5, 3.0, 4.5), (0.5, -3.0, -1.5)]
    ok = all(clip_target(e, a) == pytest.approx(g, abs=1e-15) for e, a, g in cases)
    return ok, "g exact"


def _gae_invariance():
    rng = np.random.default_rng(4)
    r, v = rng.standard_normal(50), rng.standard_normal(50)
    d = np.ones(50, bool)
    outs = [gae(r, v, d, g, lam) for g, lam in ((0.0, 0.0), (0.99, 0.95), (1.0, 1.0), (0.3, 0.7))]
    return all(np.array_equal(outs[0], o) for o in outs), "GAE(gamma, lambda)"


def _worker_determinism(tmp):
    cfg = RunConfig(geometry=GeometryConfig(free_points=(0, 1)),
                    flow=FlowConfig(length=16.0, width=10.0, nx=48, ny=30, t_max=2.0),
                    agent=PpoConfig(hidden=(16, 16), batch_size=16),
                    run=RunSection(episodes=32, seed=9))
    a = train(cfg.with_run(workers=1), tmp / "w1")
    b = train(cfg.with_run(workers=8), tmp / "w8")
    return a.fingerprint() == b.fingerprint(), "workers 1 == 8"


def test_criterion_5_property_suite(tmp_path):
    t0 = time.perf_counter()
    checks = [_divergence_free(), _g1_joints(), _radius_bounds(), _circle_area(), _gradient_check(),
              _surrogate_identity(), _clip_cases(), _gae_invariance(), _worker_determinism(tmp_path)]
    elapsed = time.perf_counter() - t0
    ok = all(c[0] for c in checks) and elapsed < 120.0
    detail = ", ".join(f"{d} {'ok' if c else 'FAILED'}" for c, d in checks)
    report(5, ok, f"{detail}; {elapsed:.0f} s (< 120 s)")
    assert ok


# ------------------------------------------------------------ 6

def test_criterion_6_bandit():
    rng = np.random.default_rng(0)
    cfg = PpoConfig(hidden=(16, 16))
    params = init_params(1, 1, cfg.hidden, rng, log_std_init=cfg.log_std_init)
    opt = agent.OptimizerState()
    obs = np.ones(1)
    n = cfg.batch_size
    for _ in range(200):
        samples = [agent.sample_action(params, obs, rng) for _ in range(n)]
        a = np.array([s.action[0] for s in samples])
        batch = RolloutBatch(np.ones((n, 1)), np.array([s.raw for s in samples]),
                             np.array([s.log_prob for s in samples]), -(a - 0.5) ** 2,
                             agent.value(params, np.ones((n, 1))))
        params, _ = agent.update(params, batch, cfg, rng, opt)
    mean = float(agent.forward_policy(params, obs)[0][0])
    ok = abs(mean - 0.5) <= 0.05
    report(6, ok, f"policy mean after 200 updates {mean:.4f} (0.5 +- 0.05)")
    assert ok
