import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import tiny_experiment
from palletmask import PalletPlanner
from palletmask.env import reset

ENV = tiny_experiment().env


def test_params_and_clone():
    p = PalletPlanner(planner="heuristic", env_cfg=ENV, total_timesteps=64, random_state=3)
    assert p.get_params()["planner"] == "heuristic"
    assert clone(p).get_params() == p.get_params()
    p.set_params(eval_episodes=5)
    assert p.eval_episodes == 5


def test_unfitted():
    with pytest.raises(NotFittedError):
        PalletPlanner(env_cfg=ENV).predict([reset(ENV)])


@pytest.fixture(scope="module")
def fitted():
    return PalletPlanner(env_cfg=ENV, total_timesteps=64, rollout_length=16, parallel_envs=2, eval_episodes=4).fit()


def test_fit_predict_score(fitted):
    assert fitted.n_timesteps_ == 64 and len(fitted.metrics_) == 2
    idx = fitted.predict([reset(ENV.with_seed(s)) for s in range(3)])
    assert idx.shape == (3,) and np.all((0 <= idx) & (idx < ENV.n_actions))
    assert fitted.decode(idx[0]).slot == 0
    assert 0.0 <= fitted.score() <= 1.0
    assert fitted.predict([]).shape == (0,)


def test_predict_validates(fitted):
    pallet, _ = reset(ENV)
    with pytest.raises(TypeError):
        fitted.predict([(pallet, "buffer")])
    with pytest.raises(TypeError):
        fitted.predict([("pallet", None)])
