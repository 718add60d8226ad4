from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from erpmatch import pipeline, synth
from erpmatch.config import RunConfig
from erpmatch.frame import relative_pose
from erpmatch.sphere import ErpGridSpec

MATCH_GRID = ErpGridSpec(640, 320)
PYRAMID_STRIDES = (32, 16, 8, 4, 2, 1)
N_MATCH_PAIRS = 20


@dataclass
class Case:
    pair: synth.SyntheticPair
    gts: dict
    baseline: float
    rotation: float

    @property
    def relative(self):
        return relative_pose(self.pair.frame_A.pose, self.pair.frame_B.pose)


@lru_cache(maxsize=None)
def match_case(k: int) -> Case:
    """Pair k of the matcher benchmark: textured room, 0.1-0.4 m, +-30 deg yaw."""
    rng = np.random.default_rng(5000 + k)
    scene = synth.default_room_scene(300 + k)
    baseline = rng.uniform(0.1, 0.4)
    rotation = np.radians(rng.uniform(-30, 30))
    pair = synth.make_pair(scene, baseline, rotation, MATCH_GRID, seed=5000 + k)
    f = pair.frame_A, pair.frame_B
    gts = synth.ground_truth_pyramid(scene, f[0].pose, f[1].depth, f[1].pose, MATCH_GRID, PYRAMID_STRIDES)
    return Case(pair, gts, baseline, rotation)


@lru_cache(maxsize=None)
def match_result(k: int) -> pipeline.MatchResult:
    """Default-configuration matches for benchmark pair k."""
    c = match_case(k)
    return pipeline.match_frames(c.pair.frame_A, c.pair.frame_B, RunConfig())


@pytest.fixture(scope="session")
def match_results(match_cases):
    return [match_result(k) for k in range(N_MATCH_PAIRS)]


@pytest.fixture(scope="session")
def match_cases():
    return [match_case(k) for k in range(N_MATCH_PAIRS)]
