import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from roaforge.dynamics import (Label, classify_stable, cartpole_energy, eval_field, linear_controller,
                               make_system, rk4_rollout, rk4_step, sweep, zero_controller)
from roaforge.lqr import lqr_for
from roaforge.roa import build_mesh

from helpers import exact_model_system


def test_pendulum_defaults():
    s = make_system("pendulum")
    assert (s.true_params["m"], s.true_params["l"]) == (1.0, 0.5)
    assert (s.nominal_params["m"], s.nominal_params["l"]) == (0.8, 0.4)
    assert np.allclose(s.state_lo, [-math.pi, -math.pi])
    assert np.allclose(s.state_hi, [math.pi, math.pi])


def test_cartpole_box():
    s = make_system("cartpole")
    assert np.allclose(s.state_hi, [math.pi / 6, 1.0, 1.0, 1.5])
    assert np.allclose(s.state_lo, -s.state_hi)


def test_strict_feedback_defaults():
    s = make_system("strict_feedback")
    assert [s.true_params[k] for k in ("e1", "e2", "e3", "e4")] == [1, 1, 1, 1]
    assert [s.nominal_params[k] for k in ("e1", "e2", "e3", "e4")] == [0.9, 0.8, 0.9, 0.8]


def test_make_system_errors():
    with pytest.raises(ValueError):
        make_system("acrobot")
    with pytest.raises(ValueError):
        make_system("pendulum", {"m": float("inf")})
    with pytest.raises(ValueError):
        make_system("pendulum", {"mass": 1.0})


def test_identical_parameters_give_identical_fields():
    s = make_system("pendulum", {"m": 1, "l": 0.5, "m_nom": 1, "l_nom": 0.5})
    x = np.random.default_rng(0).uniform(-3, 3, size=(50, 2))
    u = np.random.default_rng(1).uniform(-2, 2, size=(50, 1))
    assert np.array_equal(eval_field(s, "true", x, u), eval_field(s, "nominal", x, u))


def test_pendulum_field_values():
    s = make_system("pendulum")
    assert np.array_equal(eval_field(s, "true", np.zeros(2), np.zeros(1)), np.zeros(2))
    out = eval_field(s, "true", np.array([math.pi / 2, 0.0]), np.zeros(1))
    assert out[0] == 0.0
    assert out[1] == pytest.approx(19.62, abs=1e-12)
    # control enters through 1 / (m l^2) = 4
    out = eval_field(s, "true", np.array([0.0, 0.5]), np.array([1.0]))
    assert out.tolist() == [0.5, 4.0]


def test_strict_feedback_field_value():
    s = make_system("strict_feedback")
    out = eval_field(s, "true", np.array([0.5, 0.0, 0.0]), np.zeros(1))
    assert out.tolist() == [0.0, 0.0, 0.25]


def test_equilibrium_preserved(plant):
    u0 = plant.equilibrium_input
    for which in ("true", "nominal"):
        assert np.all(np.abs(eval_field(plant, which, np.zeros(plant.n), u0)) <= 1e-15)


def _cartpole_oracle(p, x, u):
    # Lagrangian with the pole tip at (pos - l sin(theta), l cos(theta))
    th, om, _, v = x
    M, m, l, b, g = p["M"], p["m"], p["l"], p["b_c"], p["g"]
    mass = np.array([[M + m, -m * l * math.cos(th)], [-m * l * math.cos(th), m * l * l]])
    rhs = np.array([u - b * v - m * l * om * om * math.sin(th), m * g * l * math.sin(th)])
    acc_x, acc_th = np.linalg.solve(mass, rhs)
    return np.array([om, acc_th, v, acc_x])


@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5), st.booleans())
def test_cartpole_matches_mass_matrix_solve(vals, nominal):
    s = make_system("cartpole", {"b_c": 0.7})
    which = "nominal" if nominal else "true"
    hi = s.state_hi
    x = np.array(vals[:4]) * hi
    u = 3.0 * vals[4]
    got = eval_field(s, which, x, np.array([u]))
    assert np.allclose(got, _cartpole_oracle(s._which(which), x, u), rtol=1e-12, atol=1e-12)


def test_torch_and_numpy_fields_agree(plant):
    x = np.random.default_rng(2).uniform(plant.state_lo, plant.state_hi, size=(20, plant.n))
    fn, gn = plant.fields(x, "nominal")
    ft, gt = plant.fields(torch.from_numpy(x), "nominal")
    assert np.allclose(fn, ft.numpy(), rtol=0, atol=1e-14)
    assert np.allclose(gn, gt.numpy(), rtol=0, atol=1e-14)


def test_dimension_mismatch():
    s = make_system("pendulum")
    with pytest.raises(ValueError):
        eval_field(s, "true", np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        eval_field(s, "true", np.zeros(2), np.zeros(2))


# ---------------------------------------------------------------------------
# integration

def test_rollout_at_origin_converges():
    s = make_system("pendulum")
    tr = rk4_rollout(s, "true", zero_controller(), np.zeros(2))
    assert tr.converged and not tr.left_box
    assert np.all(tr.states == 0)
    assert len(tr.states) == len(tr.inputs) + 1


def test_unforced_upright_pendulum_falls():
    s = make_system("pendulum")
    tr = rk4_rollout(s, "true", zero_controller(), np.array([0.3, 0.0]))
    assert not tr.converged
    assert tr.left_box
    ref = solve_ivp(lambda t, x: eval_field(s, "true", x, np.zeros(1)), (0, 0.5), [0.3, 0.0],
                    rtol=1e-12, atol=1e-12)
    assert abs(ref.y[0, -1]) > 1.0


def test_lqr_stabilises_small_offset():
    s = make_system("pendulum")
    tr = rk4_rollout(s, "true", linear_controller(lqr_for(s).K), np.array([0.1, 0.0]))
    assert tr.converged and not tr.left_box
    assert np.linalg.norm(tr.states[-1]) <= 0.1


def test_rk4_step_matches_reference_solution():
    s = make_system("pendulum")
    ctrl = linear_controller(lqr_for(s).K)

    def rhs(x):
        u = ctrl(x)
        return eval_field(s, "true", x, u), u
    x0 = np.array([0.4, -0.2])
    x1, u = rk4_step(rhs, x0, 0.01)
    ref = solve_ivp(lambda t, x: rhs(x)[0], (0, 0.01), x0, rtol=1e-13, atol=1e-13)
    assert np.allclose(x1, ref.y[:, -1], atol=1e-9)
    assert np.allclose(u, ctrl(x0))


def global_error(dt, x0=(0.5, 0.0), T=1.0):
    s = make_system("pendulum")
    ctrl = linear_controller(lqr_for(s).K)

    def rhs(x):
        u = ctrl(x)
        return eval_field(s, "true", x, u), u
    x = np.array(x0)
    for _ in range(int(round(T / dt))):
        x, _ = rk4_step(rhs, x, dt)
    ref = solve_ivp(lambda t, y: rhs(y)[0], (0, T), x0, rtol=1e-13, atol=1e-13, method="DOP853")
    return float(np.linalg.norm(x - ref.y[:, -1]))


def test_rk4_fourth_order():
    e1, e2 = global_error(0.04), global_error(0.02)
    assert e1 / e2 >= 8.0


def test_cartpole_energy_drift():
    s = make_system("cartpole")
    x0 = np.array([0.3, 0.2, 0.0, 0.1])
    tr = rk4_rollout(s, "true", zero_controller(), x0, dt=1e-3, horizon=1.0, stop_on_exit=False)
    e = cartpole_energy(s, tr.states)
    assert len(tr.states) == 1001
    assert np.max(np.abs(e - e[0])) / abs(e[0]) < 1e-3


def test_trajectory_csv(tmp_path):
    s = make_system("strict_feedback")
    tr = rk4_rollout(s, "true", linear_controller(lqr_for(s).K), np.array([0.2, 0.0, 0.0]), horizon=0.05)
    tr.to_csv(tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "t,x1,x2,x3,u1"
    assert len(rows) == len(tr.states) + 1


def test_rollout_validates_arguments():
    s = make_system("pendulum")
    with pytest.raises(ValueError):
        rk4_rollout(s, "true", zero_controller(), np.zeros(2), dt=0)
    with pytest.raises(ValueError):
        rk4_rollout(s, "true", zero_controller(), np.zeros(2), dt=0.1, horizon=0.01)


def test_non_finite_state_is_divergence():
    s = make_system("pendulum")
    tr = rk4_rollout(s, "true", lambda x: np.full(x.shape[:-1] + (1,), np.inf), np.array([0.1, 0.0]),
                     stop_on_exit=False)
    assert tr.diverged and tr.left_box and not tr.converged


# ---------------------------------------------------------------------------
# classification

def test_origin_is_forward_invariant_stable():
    s = make_system("pendulum")
    res = sweep(s, "true", zero_controller(), np.zeros((1, 2)))
    assert res.labels.tolist() == [Label.FI_STABLE]


def test_zero_controller_has_no_stable_points_off_origin():
    s = make_system("pendulum")
    mesh = classify_stable(s, zero_controller(), build_mesh(s, (21, 21)), horizon=5.0)
    stable = mesh.points[mesh.stable_mask]
    assert np.all(np.linalg.norm(stable, axis=1) <= 0.1)


def test_classification_is_deterministic():
    s = make_system("strict_feedback")
    ctrl = linear_controller(lqr_for(s).K)
    mesh = build_mesh(s, (6, 6, 6))
    a = classify_stable(s, ctrl, mesh, horizon=5.0).labels
    b = classify_stable(s, ctrl, mesh, horizon=5.0).labels
    assert np.array_equal(a, b)


def test_sweep_agrees_with_single_rollouts():
    s = make_system("pendulum")
    ctrl = linear_controller(lqr_for(s).K)
    x0 = np.random.default_rng(3).uniform(s.state_lo, s.state_hi, size=(25, 2))
    res = sweep(s, "true", ctrl, x0, horizon=8.0)
    for i, x in enumerate(x0):
        tr = rk4_rollout(s, "true", ctrl, x, horizon=8.0, stop_on_exit=False, escape_scale=1.5)
        assert tr.converged == res.converged[i]
        assert tr.left_box == res.left_box[i]


def test_sweep_records_in_box_pairs():
    s = exact_model_system("pendulum")
    ctrl = linear_controller(lqr_for(s).K)
    x0 = np.array([[0.3, 0.0], [0.0, 0.5]])
    res = sweep(s, "true", ctrl, x0, record_stride=5, record_steps=50)
    assert len(res.pair_x) == 20
    assert np.all(s.in_box(res.pair_x)) and np.all(s.in_box(res.pair_next))
    for i, x, xn in zip(res.pair_index, res.pair_x, res.pair_next):
        def rhs(y):
            u = ctrl(y)
            return eval_field(s, "true", y, u), u
        # batched and single-point evaluation differ only in round-off
        assert np.allclose(rk4_step(rhs, x, 0.01)[0], xn, rtol=0, atol=1e-14)


def test_lqr_true_ratio_before_training():
    s = make_system("pendulum")
    from roaforge.lyapnet import ControllerNet
    ctrl = ControllerNet.create(lqr_for(s).K, -2.0, 2.0)
    mesh = classify_stable(s, ctrl, build_mesh(s, (100, 100)))
    ratio = 100 * np.count_nonzero(mesh.stable_mask) / len(mesh)
    assert abs(ratio - 11.9) <= 5.0


@pytest.mark.parametrize("name,params", [("pendulum", {"m": 0.0}), ("pendulum", {"l_nom": -0.4}),
                                         ("cartpole", {"b_c": -1.0}), ("cartpole", {"g": 0.0})])
def test_unphysical_parameters_rejected(name, params):
    with pytest.raises(ValueError):
        make_system(name, params)
