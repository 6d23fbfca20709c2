"""Shared builders for tests that need a TrainState."""

from veloform.synthdata import SCENES, make_pair
from veloform.training import PairDataset, TrainConfig, init_state

TINY = dict(
    hidden_layers=2, hidden_units=16, latent_dim=4, steps_per_pair=20, volume_batch=64,
    surface_batch=128, match_batch=64, laplacian_points=8, integrator_substeps=4,
    time_steps=4, checkpoint_interval=10,
)


def tiny_config(**over):
    return TrainConfig.from_dict({**TINY, **over})


def tiny_dataset(scene="translation", points=400, matches=60, seed=0, **scene_kw):
    sc = SCENES[scene](**scene_kw)
    return sc, PairDataset.from_pairs([make_pair(sc, points, matches, 0.0, 0.0, seed)])


def analytic_state(scene="translation", **scene_kw):
    """A TrainState whose fields are swapped for the scene's closed forms."""
    sc, ds = tiny_dataset(scene, **scene_kw)
    cfg = tiny_config()
    state = init_state(ds, cfg)
    code_dim = 2 * cfg.latent_dim
    state.phi = sc.phi_field(code_dim)
    state.velocity = sc.velocity_field(code_dim)
    return sc, ds, state
