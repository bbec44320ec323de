import json
import math

import numpy as np
import pytest

from ncentre import config as cfg
from ncentre.errors import DomainError, InvalidConfigurationError, SingularityError


def equilateral_triangle(side=1.0, charge=1.0):
    # circumradius side/sqrt(3), centred at the origin
    r = side / math.sqrt(3.0)
    ang = [math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3]
    centres = np.array([[r * math.cos(a), r * math.sin(a), 0.0] for a in ang])
    return cfg.CentreConfig(centres=centres, charges=np.full(3, charge))


def test_equilateral_triangle_geometry():
    g = cfg.validate(equilateral_triangle())
    assert g.d_min == pytest.approx(1.0, abs=1e-12)
    assert g.d_max == pytest.approx(1.0, abs=1e-12)
    assert g.alpha_min == pytest.approx(math.pi / 3, abs=1e-12)
    assert g.is_noncollinear
    assert g.c_q <= 0.25 * math.sin(g.alpha_min) * g.d_min + 1e-12
    assert g.c_y == pytest.approx(0.5 * math.sin(g.alpha_min / 2) * g.c_q)
    assert g.c_p == pytest.approx(0.5 * min(g.alpha_min / 2, g.c_y / g.d_max))


def test_collinear_configuration_detected():
    c = cfg.CentreConfig(
        centres=np.array([[-1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]]),
        charges=np.ones(3),
    )
    assert not cfg.validate(c).is_noncollinear


def test_tetrahedron_alpha_min():
    centres = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    ) / math.sqrt(8.0)  # side 1
    c = cfg.CentreConfig(centres=centres, charges=np.ones(4))
    g = cfg.validate(c)
    assert g.d_min == pytest.approx(1.0, abs=1e-12)
    assert g.alpha_min == pytest.approx(math.pi / 3, abs=1e-12)


def test_invalid_configurations_rejected():
    with pytest.raises(InvalidConfigurationError):
        cfg.CentreConfig(centres=np.array([[0.0, 0, 0], [0.0, 0, 0]]), charges=np.ones(2))
    with pytest.raises(InvalidConfigurationError):
        cfg.CentreConfig(centres=np.array([[0.0, 0, 0]]), charges=np.zeros(1))


def test_potential_simple_values():
    single = cfg.CentreConfig(centres=np.zeros((1, 3)), charges=np.array([1.0]))
    assert cfg.potential(single, [1.0, 0, 0]) == pytest.approx(-1.0)
    pair = cfg.CentreConfig(
        centres=np.array([[1.0, 0, 0], [-1.0, 0, 0]]), charges=np.ones(2)
    )
    assert cfg.potential(pair, [0.0, 0, 0]) == pytest.approx(-2.0)
    with pytest.raises(SingularityError):
        cfg.potential(pair, [1.0, 0, 0])


def test_gradient_simple_values():
    single = cfg.CentreConfig(centres=np.zeros((1, 3)), charges=np.array([1.0]))
    np.testing.assert_allclose(cfg.grad_potential(single, [1.0, 0, 0]), [1.0, 0, 0], atol=1e-14)
    pair = cfg.CentreConfig(
        centres=np.array([[1.0, 0, 0], [-1.0, 0, 0]]), charges=np.ones(2)
    )
    np.testing.assert_allclose(cfg.grad_potential(pair, [0.0, 0, 0]), np.zeros(3), atol=1e-14)


def _fd_gradient(config, q, h=1e-6):
    out = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        out[i] = (cfg.potential(config, q + e) - cfg.potential(config, q - e)) / (2 * h)
    return out


def test_gradient_matches_finite_differences_at_random_points():
    tri = equilateral_triangle()
    g = cfg.validate(tri)
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 100:
        q = rng.uniform(-2.0, 2.0, 3)
        if min(np.linalg.norm(q - s) for s in tri.centres) < g.c_q:
            continue
        grad = cfg.grad_potential(tri, q)
        fd = _fd_gradient(tri, q)
        assert np.linalg.norm(grad - fd) <= 1e-7 * max(1.0, np.linalg.norm(grad))
        checked += 1


def test_gradient_with_smooth_extra_matches_finite_differences():
    extra = cfg.SmoothExtra(
        coulomb_positions=np.array([[0.0, 0.0, 3.0]]),
        coulomb_charges=np.array([-0.5]),
        gaussian_terms=(
            cfg.GaussianTerm(amplitude=0.3, center=np.array([0.2, -0.1, 0.4]), width=0.7,
                             powers=(1, 0, 2)),
        ),
    )
    c = cfg.CentreConfig(
        centres=np.array([[1.0, 0, 0], [-1.0, 0, 0]]),
        charges=np.array([1.0, 2.0]),
        smooth_extra=extra,
    )
    rng = np.random.default_rng(5)
    for _ in range(40):
        q = rng.uniform(-1.5, 1.5, 3)
        if min(np.linalg.norm(q - s) for s in c.centres) < 0.2:
            continue
        if np.linalg.norm(q - np.array([0, 0, 3.0])) < 0.2:
            continue
        grad = cfg.grad_potential(c, q)
        fd = _fd_gradient(c, q)
        assert np.linalg.norm(grad - fd) <= 1e-6 * max(1.0, np.linalg.norm(grad))


def test_asymptotic_charge_defaults():
    tri = equilateral_triangle(charge=2.0)
    assert tri.asymptotic_charge == pytest.approx(6.0)
    # asymptotics of the potential: V(q)|q| -> -Z_inf
    q = np.array([2137.0, -511.0, 977.0])
    assert abs(cfg.potential(tri, q) * np.linalg.norm(q) + 6.0) < 1.0


def test_noncollinearity_invariant_under_isometries():
    tri = equilateral_triangle()
    rng = np.random.default_rng(7)
    for _ in range(50):
        # random rotation via QR, random translation
        m = rng.normal(size=(3, 3))
        qmat, _ = np.linalg.qr(m)
        t = rng.uniform(-5, 5, 3)
        moved = cfg.CentreConfig(
            centres=tri.centres @ qmat.T + t, charges=tri.charges
        )
        assert cfg.validate(moved).is_noncollinear


def test_alpha_min_range_random_nc_configs():
    rng = np.random.default_rng(13)
    produced = 0
    while produced < 20:
        centres = rng.uniform(-1, 1, size=(4, 3))
        try:
            c = cfg.CentreConfig(centres=centres, charges=np.ones(4))
        except InvalidConfigurationError:
            continue
        if not cfg.validate(c).is_noncollinear:
            continue
        a = cfg.validate(c).alpha_min
        assert 0.0 < a <= math.pi / 3 + 1e-12
        produced += 1


def test_virial_radius_single_centre_bound():
    single = cfg.CentreConfig(centres=np.zeros((1, 3)), charges=np.array([1.0]))
    e = 10.0
    r = cfg.virial_radius(single, e)
    assert r >= 2.0 * 1.0 / e  # |V| = Z/r < E/2 forces r > 2Z/E
    assert cfg._virial_conditions_hold(single, r, e)
    with pytest.raises(DomainError):
        cfg.virial_radius(single, -1.0)


def test_virial_radius_monotone_in_energy():
    tri = equilateral_triangle()
    assert cfg.virial_radius(tri, 100.0) <= cfg.virial_radius(tri, 10.0)


def test_jacobi_curvature_signs():
    # planar section: negative
    assert cfg.jacobi_sectional_curvature(1.0, 1.0, [1.0, 0, 0]) == pytest.approx(-1 / 16)
    assert cfg.jacobi_sectional_curvature(2.0, 5.0, [0.3, 0.4, 0.0]) < 0
    # on the axis near the centre: positive
    assert cfg.jacobi_sectional_curvature(1.0, 1.0, [0, 0, 0.01]) > 0
    with pytest.raises(SingularityError):
        cfg.jacobi_sectional_curvature(1.0, 1.0, [0.0, 0, 0])


def test_json_round_trip_and_unknown_keys(tmp_path):
    doc = {
        "centres": [[1, 0, 0], [-1, 0, 0]],
        "charges": [1.0, 1.0],
        "smooth_extra": None,
        "constants": {"E_threshold": 500.0, "e0": 16.0},
    }
    path = tmp_path / "pair.json"
    path.write_text(json.dumps(doc))
    c = cfg.load_config(str(path))
    assert c.n == 2
    assert c.tunables.E_threshold == 500.0
    assert c.tunables.e0 == 16.0

    bad = dict(doc)
    bad["wrong"] = 1
    path.write_text(json.dumps(bad))
    with pytest.raises(InvalidConfigurationError):
        cfg.load_config(str(path))

    path.write_text("{not json")
    with pytest.raises(InvalidConfigurationError, match="line"):
        cfg.load_config(str(path))


def test_energy_context_fields():
    tri = equilateral_triangle().with_tunables(E_threshold=100.0)
    ctx = cfg.energy_context(tri, 1000.0)
    assert ctx.E == 1000.0
    assert ctx.E_threshold == 100.0
    assert ctx.IZ_radius == pytest.approx(cfg.virial_radius(tri, 100.0))
    assert ctx.R_vir <= ctx.IZ_radius
