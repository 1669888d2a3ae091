"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

import cases
from helpers import central_difference, random_displacement, rel_err
from oracles import MESH, grid_argmin_1d, grid_argmin_2d, quadratic_model, random_instance
from thermodamage import assembly as asm
from thermodamage.damage import DamageProblem, minimize_damage
from thermodamage.material import MaterialLaws
from thermodamage.mesh import generate_unit_square
from thermodamage.output import write_ledger_csv
from thermodamage.rescaling import sweep
from thermodamage.thermomech import StepContext, heat_jacobian, heat_residual, positivity_floor
from thermodamage.timeloop import run
from test_thermomech import make_problem


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def reference_run():
    t0 = time.perf_counter()
    res = run(cases.reference())
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def equilibrium_run():
    return run(cases.equilibrium())


@pytest.fixture(scope="module")
def heat_floor_run():
    return run(cases.heat_floor())


@pytest.fixture(scope="module")
def eps_sweep():
    t0 = time.perf_counter()
    rep = sweep(cases.sweep_config())
    return rep, time.perf_counter() - t0


def test_c01_unidirectionality(capsys, reference_run):
    res, wall = reference_run
    inc = float(np.max(np.diff(res.trajectory.z, axis=0)))
    ok = inc <= 1e-14 and wall < 60.0
    report(capsys, 1, "unidirectionality", ok, f"max z_k - z_(k-1) = {inc:.3e}, run time {wall:.1f} s")


def _energy_criterion(capsys, number, title, column, reference_run, equilibrium_run):
    led = reference_run[0].ledger
    tol = 1e-8 * led.energy_scale()
    worst = float(np.min(led.column(column)))
    eq = float(np.max(np.abs(equilibrium_run.ledger.column(column))))
    ok = worst >= -tol and eq <= 1e-12
    report(capsys, number, title, ok,
           f"reference min residual {worst:.3e} (tol {tol:.1e}), equilibrium max |residual| {eq:.1e}")


def test_c02_mechanical_energy(capsys, reference_run, equilibrium_run):
    _energy_criterion(capsys, 2, "mechanical energy inequality", "mech_residual", reference_run, equilibrium_run)


def test_c03_total_energy(capsys, reference_run, equilibrium_run):
    _energy_criterion(capsys, 3, "total energy inequality", "total_residual", reference_run, equilibrium_run)


def test_c04_positivity(capsys, reference_run, heat_floor_run):
    res = reference_run[0]
    led = res.ledger
    tau = res.config.tau
    margin = float(np.min(led.column("theta_min") - led.column("v_k")))
    theta_tilde = positivity_floor(res.monitor, 0, tau)[2]
    lowest = float(np.min(res.trajectory.theta))
    enhanced = float(np.min(heat_floor_run.trajectory.theta))
    ok = (margin >= -1e-10 and abs(res.monitor.c_bar - 1.0) <= 1e-14
          and abs(theta_tilde - 0.5) <= 1e-14 and lowest >= 0.5 - 1e-10
          and enhanced >= 1.0 - 1e-10)
    report(capsys, 4, "temperature positivity", ok,
           f"min(theta_k - v_k) = {margin:.3e}, floor {theta_tilde:.15g}, min theta {lowest:.4f}, "
           f"with H_* = 1: min theta {enhanced:.12f}")


def test_c05_semistability(capsys, reference_run):
    res = reference_run[0]
    led = res.ledger
    ss = res.config.semistability
    s = led.column("semistability")
    k = led.column("k").astype(int)
    sampled = k[np.isfinite(s)]
    every5 = all(j in sampled for j in range(0, res.config.n_steps + 1, 5))
    tol = 1e-8 * led.energy_scale()
    worst = float(np.nanmin(s))
    ok = ss.samples == 100 and ss.every == 5 and every5 and worst >= -tol
    report(capsys, 5, "semistability", ok,
           f"{len(sampled)} sampled steps x {ss.samples} competitors, min residual {worst:.3e} (tol {tol:.1e})")


def test_c06_damage_oracle(capsys):
    rng = np.random.default_rng(606)
    errs = []
    for _ in range(10):
        j = int(rng.integers(MESH.n_nodes))
        prob = random_instance(rng, [j])
        errs.append(abs(minimize_damage(prob).z[j] - grid_argmin_1d(prob, j)))
    for _ in range(10):
        free = sorted(rng.choice(MESH.n_nodes, size=2, replace=False).tolist())
        prob = random_instance(rng, free)
        _, A, b, _ = quadratic_model(prob, free)
        ref = grid_argmin_2d(A, b, prob.z_prev[free])
        errs.append(float(np.max(np.abs(minimize_damage(prob).z[free] - ref))))
    worst = max(errs)
    report(capsys, 6, "damage solver vs grid search", worst <= 1e-4, f"20 problems, max deviation {worst:.2e}")


def test_c07_derivatives(capsys):
    rng = np.random.default_rng(707)
    mesh = generate_unit_square(4, ["left"])
    mats = [MaterialLaws(), MaterialLaws(lam=2.0, mu=0.4, delta_at=0.05, q=3.0, grad_coeff=0.4, w1=-1.0, w2=1.0)]
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(20):
        mat = mats[i % 2]
        z = rng.uniform(0.05, 0.95)
        e = rng.normal(size=(2, 2))
        e = 0.5 * (e + e.T)
        an = mat.elastic_energy_density(z, e)[1]
        track("elastic dz", abs(central_difference(lambda s: mat.elastic_energy_density(s, e)[0], z, 1.0) - an)
              / abs(an))
        xi = rng.normal(size=2)
        _, gz, gxi = mat.gradient_energy_density(z, xi)
        fdz = central_difference(lambda s: mat.gradient_energy_density(s, xi)[0], z, 1.0)
        track("gradient dz", abs(fdz - gz) / abs(gz))
        fdx = [central_difference(lambda x: mat.gradient_energy_density(z, x)[0], xi, d) for d in np.eye(2)]
        track("gradient dxi", rel_err(gxi, fdx))

        u = random_displacement(mesh, rng, scale=1.0)
        d = rng.normal(size=u.size)
        _, J = asm.assemble_gamma_term(mesh, None, u, 0.3, 5.0)
        fd = central_difference(lambda x: asm.assemble_gamma_term(mesh, None, x, 0.3, 5.0)[0], u, d)
        track("gamma Jacobian", rel_err(J @ d, fd))

        prob = make_problem(mat=MaterialLaws(expansion=0.5, kappa=1.5), z=rng.uniform(0.2, 1.0, size=25),
                            u1=random_displacement(mesh, rng, scale=0.05))
        theta = rng.uniform(0.2, 2.0, size=mesh.n_nodes)
        uk = random_displacement(mesh, rng, scale=0.05)
        dt = rng.normal(size=theta.size)
        Jh = heat_jacobian(prob, uk, theta)
        fdh = central_difference(lambda t: heat_residual(prob, uk, t), theta, dt)
        track("heat Jacobian", rel_err(Jh @ dt, fdh))
    ok = max(worst.values()) <= 1e-5
    report(capsys, 7, "derivatives vs central differences", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (20 states each)")


def test_c08_rescaling_consistency(capsys, eps_sweep):
    rep, wall = eps_sweep
    beta = rep.beta
    slope = rep.slopes["grad_theta"]
    rate = rep.column("eps_strain_rate")
    osc = rep.column("theta_oscillation")
    ok = (rep.eps == [1.0, 0.5, 0.25, 0.125] and beta == 2.0 and slope >= beta / 2 - 0.3
          and np.all(np.diff(rate) < 0) and np.all(np.diff(osc) < 0) and wall < 300.0
          and all(r["passed"] for r in rep.rows))
    report(capsys, 8, "rescaling consistency", ok,
           f"grad theta slope {slope:.3f} (>= {beta / 2 - 0.3}), eps|e(u')| {np.round(rate, 5).tolist()}, "
           f"oscillation {np.round(osc, 6).tolist()}, {wall:.1f} s")


def test_c09_theta_ode(capsys, eps_sweep):
    rep = eps_sweep[0]
    first, last = abs(rep.rows[0]["ode_residual_T"]), abs(rep.rows[-1]["ode_residual_T"])
    mu_min = min(r["mu_min"] for r in rep.rows)
    ok = last <= 3.0 * first / 4.0 and mu_min >= 0.0
    report(capsys, 9, "limit temperature balance", ok,
           f"|res(T)| {first:.3e} at eps=1, {last:.3e} at eps=1/8 (ratio {last / first:.4f}), min mu {mu_min:.2e}")


def test_c10_time_convergence(capsys):
    runs = {n: run(cases.no_damage(n)) for n in (25, 50, 100)}
    frozen = all(np.all(r.trajectory.z == r.trajectory.z[0]) for r in runs.values())
    ratios = {}
    for name, cols in (("mechanical", ("kinetic", "energy")), ("heat", ("heat_content",))):
        e = [sum(runs[n].ledger.rows[-1][c] for c in cols) for n in (25, 50, 100)]
        ratios[name] = (e[2] - e[1]) / (e[1] - e[0])
    ok = frozen and all(0.3 <= r <= 0.7 for r in ratios.values()) and all(r.passed for r in runs.values())
    report(capsys, 10, "first-order time convergence", ok,
           "ratios " + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items()) + f", damage frozen: {frozen}")


def test_c11_determinism(capsys, tmp_path, monkeypatch, reference_run):
    first = tmp_path / "a.csv"
    write_ledger_csv(first, reference_run[0].ledger)
    monkeypatch.setattr(asm, "_CHUNK", 64)  # several assembly chunks per pass
    asm.set_num_threads(4)
    try:
        again = run(cases.reference())
    finally:
        asm.set_num_threads(1)
    second = tmp_path / "b.csv"
    write_ledger_csv(second, again.ledger)
    same = first.read_bytes() == second.read_bytes()
    report(capsys, 11, "determinism", same, "ledger.csv bytes identical for 1 and 4 threads" if same
           else "ledger.csv differs between runs")
