from .circle import PointCircle
from .grid import StepAfterTerminal, TabularHazardGrid
from .tabular_mdp import TabularCMDP

ENVIRONMENTS = {"grid": TabularHazardGrid, "circle": PointCircle}


def make_env(name: str, **overrides):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**overrides)


__all__ = ["PointCircle", "TabularHazardGrid", "TabularCMDP", "StepAfterTerminal", "make_env", "ENVIRONMENTS"]
