import numpy as np
import pytest

from spatialnav.config import AgentConfig
from spatialnav.gridworld import Instance, Scene, generate_scene
from spatialnav.perception import build_mock_interfaces

SCENE_SEED = 3


@pytest.fixture
def config():
    return AgentConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SCENE_SEED)


@pytest.fixture
def interfaces(scene, config):
    return build_mock_interfaces(scene, config, seed=0)


def make_room(rows=12, cols=20, instances=(), interior=()):
    """
    Walled rectangle at 0.25 m cells; instances are (cell, category, colour).

    interior lists extra wall cells.
    """
    walls = np.zeros((rows, cols), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    for cell in interior:
        walls[cell] = True
    origin = (-cols * 0.25 / 2.0, -rows * 0.25 / 2.0)
    placed = []
    for i, (cell, category, colour) in enumerate(instances):
        position = (origin[0] + (cell[1] + 0.5) * 0.25, origin[1] + (cell[0] + 0.5) * 0.25)
        placed.append(Instance(
            instance_id=i,
            category=category,
            description=f"{colour} wooden {category} in the study",
            cell=cell,
            position=position,
            feature_seed=1000 + i,
            attributes={"colour": colour, "material": "wooden", "room": "study"},
        ))
    return Scene(0, walls, [], placed, feature_dim=64, background_seed=7)


@pytest.fixture
def room():
    """12 x 20 cell room with a red sofa at cell (6, 15), i.e. (1.375, 0.125)."""
    return make_room(instances=[((6, 15), "sofa", "red")])
