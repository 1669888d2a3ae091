"""Shared configurations for the integration and acceptance tests."""

from thermodamage.config import config_from_dict

ALL_SIDES = ["left", "right", "bottom", "top"]


def reference_dict(steps=50, n=16, **material):
    """Unit square clamped on the left, ramp traction on the right, c_bar = 1."""
    mat = {"expansion": 1.0}
    mat.update(material)
    return {
        "seed": 7,
        "time": {"T": 1.0, "steps": steps},
        "mesh": {"n": n, "dirichlet": ["left"]},
        "material": mat,
        "positivity": {"theta_star": 1.0},
        "loads": {"traction": {"kind": "ramp", "rate": 0.6, "direction": [1.0, 0.0], "sides": ["right"]}},
        "output": {"vtk": False},
    }


def reference(steps=50, n=16, **material):
    return config_from_dict(reference_dict(steps, n, **material))


def equilibrium_dict(steps=10, n=6):
    return {
        "seed": 1,
        "time": {"T": 1.0, "steps": steps},
        "mesh": {"n": n, "dirichlet": ["left"]},
        "initial": {"z": 1.0, "theta": 1.0},
        "output": {"vtk": False},
    }


def equilibrium(steps=10, n=6):
    return config_from_dict(equilibrium_dict(steps, n))


def heat_floor(steps=50, n=16):
    d = reference_dict(steps, n)
    d["positivity"] = {"theta_star": 1.0, "H_star": 1.0}
    d["loads"]["heat_source"] = {"value": 1.0}
    return config_from_dict(d)


def no_damage(steps, n=8):
    """Smooth loading below the damage threshold of W = (1 - z)^2 / 2."""
    return config_from_dict({
        "time": {"T": 1.0, "steps": steps},
        "mesh": {"n": n, "dirichlet": ["left"]},
        "material": {"expansion": 0.2, "w0": 0.5, "w1": -1.0, "w2": 1.0},
        "loads": {"traction": {"kind": "ramp", "rate": 0.3, "direction": [1.0, 0.0], "sides": ["right"]}},
        "semistability": {"samples": 10, "every": 25},
        "output": {"vtk": False},
    })


def sweep_dict(n=8, steps=25, eps=(1.0, 0.5, 0.25, 0.125), beta=2.0):
    return {
        "seed": 11,
        "time": {"T": 1.0, "steps": steps},
        "mesh": {"n": n, "dirichlet": ALL_SIDES},
        "material": {"expansion": 0.5},
        "loads": {"volume_force": {"kind": "ramp", "rate": 2.0, "direction": [1.0, 0.5]}},
        "rescaling": {"eps": list(eps), "beta": beta},
        "semistability": {"samples": 20, "every": 5},
        "output": {"vtk": False},
    }


def sweep_config(**kw):
    return config_from_dict(sweep_dict(**kw))
