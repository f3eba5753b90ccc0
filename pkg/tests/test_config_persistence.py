import json
from dataclasses import replace

import numpy as np
import pytest

from zdpolicy import config, persistence
from zdpolicy.config import ExperimentConfig
from zdpolicy.errors import ValidationError
from zdpolicy.linalg import linearize_about_origin, place_poles
from zdpolicy.linear_zdp import build_linear_zdp, select_invariant_subspace
from zdpolicy.mlp import init_mlp, mlp_forward


def test_default_config_round_trip():
    cfg = ExperimentConfig().validate()
    text = config.dumps(cfg)
    again = config.loads(text)
    assert again == cfg
    assert config.dumps(again) == text


def test_partial_config_and_types():
    cfg = config.loads("[system]\npole_length_m = 0.5\n[training]\nhidden_widths = 8, 8\n[roa]\nn_theta = 5\n")
    assert cfg.system.pole_length_m == 0.5
    assert cfg.training.hidden_widths == (8, 8)
    assert cfg.roa.n_theta == 5
    assert cfg.normal_form().meta["params"].pole_length == 0.5


@pytest.mark.parametrize("text", [
    "[system]\npole_colour = red\n",
    "[plotting]\ndpi = 100\n",
    "[roa]\nn_theta = many\n",
    "[construct]\npoles = -1, -1, -2, -3\nselection = fastest\n",
    "[cost]\nq_diag = 1, 1\n",
    "[cost]\nr = 0\n",
    "not an ini file",
])
def test_invalid_config_rejected(text):
    with pytest.raises(ValidationError):
        config.loads(text)


def test_linear_system_config():
    cfg = config.loads("[system]\nkind = linear\na_matrix = 0, 1, 0, 0\nb_vector = 0, 1\nrelative_degree = 2\n"
                       "[cost]\nq_diag = 1, 1\n[construct]\npoles = -1, -2\n[simulate]\ninit = 0.1, 0\n")
    nf = cfg.normal_form()
    assert nf.n == 2 and nf.nz == 0


def test_model_document_round_trip(cartpole, tmp_path):
    lm = linearize_about_origin(cartpole)
    k = place_poles(lm, [-1.0, -2.0, -3.0, -4.0])
    zdp = build_linear_zdp(select_invariant_subspace(lm.a - np.outer(lm.b, k.k), 2, 2), lm, k)
    doc = persistence.model_document(zdp, None, {"p": zdp.p}, {})
    path = tmp_path / "model.json"
    persistence.write_json(path, doc)
    loaded = persistence.load_any(path)
    back = persistence.linear_zdp_from_dict(loaded["linear_zdp"])
    np.testing.assert_array_equal(back.sub.s, zdp.sub.s)
    assert back.p == zdp.p
    psi = persistence.psi_from_document(loaded)
    z = np.array([0.1, -0.2])
    np.testing.assert_allclose(psi.value(z), zdp.sub.s_eta.T @ z, atol=1e-15)


def test_checkpoint_round_trip(tmp_path):
    params = init_mlp(2, 2, (8, 8), "tanh", seed=2)
    doc = persistence.checkpoint_document(params, {"mse": 1e-5}, {"steps": 0}, {})
    path = tmp_path / "ckpt.json"
    persistence.write_json(path, doc)
    psi = persistence.psi_from_document(persistence.load_any(path))
    z = np.array([0.3, 0.1])
    assert psi.params.to_vector().tobytes() == params.to_vector().tobytes()
    np.testing.assert_allclose(psi.value(z), mlp_forward(params, z), rtol=1e-14)
    assert persistence.dumps(doc) == path.read_text()


def test_load_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(ValidationError):
        persistence.load_any(bad)
    bad.write_text("{not json")
    with pytest.raises(ValidationError):
        persistence.load_any(bad)
    bad.write_text(json.dumps({"format": persistence.MODEL_FORMAT, "version": 99}))
    with pytest.raises(ValidationError):
        persistence.load_any(bad)


def test_config_objects_derive(cartpole):
    cfg = replace(ExperimentConfig(), roa=replace(ExperimentConfig().roa, n_theta=3, n_theta_dot=4))
    grid = cfg.roa_grid()
    assert grid.n_theta == 3 and grid.n_theta_dot == 4
    assert cfg.train_config().sample_box == ((-1.2, 1.2), (-0.6, 0.6))
    assert cfg.quadratic_cost().r == 0.01
