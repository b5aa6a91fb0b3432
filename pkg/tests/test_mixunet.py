import numpy as np
import pytest

from osteoscreen.dataio import synth_ambiguous
from osteoscreen.diffcore import grad_check
from osteoscreen.diffcore.nn import MLP
from osteoscreen.errors import ContractError, DimensionError
from osteoscreen.mixunet import (
    MixtureNet,
    ModuleLatent,
    NetConfig,
    atom_weights,
    mask_from_probs,
    mixture_probs,
    modulate,
    predict_mask,
    route,
    sample_predictive,
)
from osteoscreen.segtrain import SegTrainConfig, train_segmentation


def small_net(K=2, C=2, seed=0, **kw):
    return MixtureNet(NetConfig(num_classes=C, K=K, S=3, L=4, F1=8, F2=4, routing_hidden=6, **kw),
                      np.random.default_rng(seed))


def set_latent(latent, W_s, W_b):
    latent.W_s.data = np.asarray(W_s, dtype=float)
    latent.W_b.data = np.asarray(W_b, dtype=float)


def test_modulate_identity():
    lat = ModuleLatent(2, 3, np.random.default_rng(0))
    set_latent(lat, np.ones((3, 2)) * 0.5, np.zeros((3, 2)))
    u = np.random.default_rng(1).random((3, 4, 4))
    np.testing.assert_allclose(modulate(u, lat, np.ones(2)).data, u)


def test_modulate_annihilation():
    lat = ModuleLatent(2, 3, np.random.default_rng(0))
    set_latent(lat, lat.W_s.data, np.zeros((3, 2)))
    out = modulate(np.ones((3, 2, 2)), lat, np.zeros(2)).data
    assert np.all(out == 0.0)


def test_modulate_direct_formula():
    lat = ModuleLatent(1, 2, np.random.default_rng(0))
    set_latent(lat, [[2.0], [0.5]], [[1.0], [-1.0]])
    u = np.array([1.0, 2.0]).reshape(2, 1, 1)
    np.testing.assert_allclose(modulate(u, lat, np.array([1.0])).data.ravel(), [4.0, 0.5])


def test_modulate_linear_without_bias():
    rng = np.random.default_rng(2)
    lat = ModuleLatent(3, 4, rng)
    set_latent(lat, lat.W_s.data, np.zeros((4, 3)))
    u = rng.random((4, 3, 3))
    z = rng.normal(size=3)
    np.testing.assert_allclose(modulate(2.5 * u, lat, z).data, 2.5 * modulate(u, lat, z).data)


def test_modulate_dimension_errors():
    lat = ModuleLatent(3, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        modulate(np.ones((4, 2, 2)), lat, np.ones(2))
    with pytest.raises(DimensionError):
        modulate(np.ones((5, 2, 2)), lat, np.ones(3))


def test_route_zero_mlp_uniform():
    mlp = MLP([5, 7, 3], np.random.default_rng(0))
    for layer in mlp.layers:
        layer.weight.data[:] = 0.0
    pi = route(np.random.default_rng(1).random((5, 4, 4)), mlp).data
    np.testing.assert_allclose(pi, np.full(3, 1 / 3))


def test_route_hand_set_logits():
    mlp = MLP([2, 2], np.random.default_rng(0))
    mlp.layers[0].weight.data[:] = 0.0
    mlp.layers[0].bias.data[:] = [0.0, np.log(3.0)]
    np.testing.assert_allclose(route(np.ones((2, 3, 3)), mlp).data, [0.25, 0.75], atol=1e-15)


def test_route_spatial_permutation_and_shift():
    rng = np.random.default_rng(3)
    mlp = MLP([4, 5, 3], rng)
    u = rng.random((4, 3, 3))
    perm = rng.permutation(9)
    shuffled = u.reshape(4, 9)[:, perm].reshape(4, 3, 3)
    np.testing.assert_allclose(route(u, mlp).data, route(shuffled, mlp).data, atol=1e-14)
    base = route(u, mlp).data
    mlp.layers[-1].bias.data += 7.0
    np.testing.assert_allclose(route(u, mlp).data, base, atol=1e-14)


def test_atom_weights_examples():
    np.testing.assert_allclose(atom_weights([0.4, 0.6], 3), [0.4 / 3] * 3 + [0.6 / 3] * 3)
    np.testing.assert_allclose(atom_weights([1.0], 5), np.full(5, 0.2))
    with pytest.raises(ContractError):
        atom_weights([1.0], 0)


def test_sample_predictive_structure():
    net = small_net(K=2)
    x = np.random.default_rng(0).random((16, 16))
    pred = sample_predictive(net, x, 5, np.random.default_rng(1))
    assert pred.atoms.shape == (10, 2, 16, 16)
    assert abs(pred.weights.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(pred.weights, np.repeat(pred.pi / 5, 5))
    with pytest.raises(ContractError):
        sample_predictive(net, x, 0, np.random.default_rng(1))


@pytest.mark.parametrize("K,S", [(1, 1), (1, 4), (3, 2), (4, 8)])
def test_mass_normalisation(K, S):
    net = small_net(K=K)
    pred = sample_predictive(net, np.zeros((8, 8)), S, np.random.default_rng(0))
    assert len(pred.weights) == K * S
    assert abs(pred.weights.sum() - 1.0) < 1e-9


def test_degenerate_sigma_gives_identical_atoms():
    net = small_net(K=1)
    net.latents[0].log_sigma.data[:] = -60.0
    pred = sample_predictive(net, np.random.default_rng(0).random((8, 8)), 4, np.random.default_rng(1))
    for a in pred.atoms[1:]:
        np.testing.assert_allclose(a, pred.atoms[0], atol=1e-12)


def test_mixture_probs_examples():
    # unanimity
    scores = np.zeros((2, 3, 1, 1))
    scores[:, 1] = 50.0
    mask, conf = mask_from_probs(mixture_probs(scores, [0.5, 0.5]))
    assert mask[0, 0] == 1 and conf[0, 0] == pytest.approx(1.0)
    # tie goes to the lower class
    scores = np.full((2, 3, 1, 1), -1e3)
    scores[0, 2, 0, 0] = 0.0
    scores[1, 0, 0, 0] = 0.0
    mask, _ = mask_from_probs(mixture_probs(scores, [0.5, 0.5]))
    assert mask[0, 0] == 0
    # weighted average arithmetic
    scores = np.log(np.array([[0.9, 0.1], [0.2, 0.8]])).reshape(2, 2, 1, 1)
    probs = mixture_probs(scores, [0.7, 0.3])
    np.testing.assert_allclose(probs.ravel(), [0.69, 0.31], atol=1e-12)
    assert mask_from_probs(probs)[0][0, 0] == 0


def test_predict_mask_shapes():
    net = small_net(K=2, C=3)
    mask, conf = predict_mask(net, np.zeros((8, 8)), 2, np.random.default_rng(0))
    assert mask.shape == (8, 8) and np.all((conf > 0) & (conf <= 1))


def test_features_dimension_check():
    with pytest.raises(DimensionError):
        small_net().features(np.zeros((1, 1, 12, 12)))


def test_config_contracts():
    with pytest.raises(ContractError):
        MixtureNet(NetConfig(num_classes=1), np.random.default_rng(0))
    with pytest.raises(ContractError):
        MixtureNet(NetConfig(K=0), np.random.default_rng(0))


def test_atoms_gradient_wrt_latent_mean():
    net = small_net(K=1)
    u_e, u_d = net.features(np.random.default_rng(0).random((1, 1, 8, 8)))
    noise = np.random.default_rng(1).standard_normal((1, 3, 4))
    lat = net.latents[0]

    def fn(mu):
        lat.mu = mu
        return net.atoms(u_d[0], noise).sum() * 0.01

    # small step keeps the probe away from ReLU kinks in the head
    assert grad_check(fn, lat.mu.data.copy(), step=1e-6) < 1e-4


def test_training_reduces_transport_cost():
    items = synth_ambiguous(8, 16, 1, rng=np.random.default_rng(0))
    net = small_net(K=1)
    hist = train_segmentation(net, items, SegTrainConfig(steps=30, batch=2, lr=1e-2), np.random.default_rng(1))
    early = np.mean([h["transport_term"] for h in hist[:5]])
    late = np.mean([h["transport_term"] for h in hist[-5:]])
    assert late < early
    assert hist[0]["gamma"] == 0.75 and hist[-1]["gamma"] == 1.0


def test_training_deterministic():
    items = synth_ambiguous(4, 16, 2, rng=np.random.default_rng(0))
    runs = []
    for _ in range(2):
        net = small_net(K=2, seed=4)
        train_segmentation(net, items, SegTrainConfig(steps=3, batch=2), np.random.default_rng(9))
        runs.append(net.state_dict())
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_inference_leaves_gradients_untouched():
    net = small_net()
    sample_predictive(net, np.zeros((8, 8)), 1, np.random.default_rng(0))
    assert all(p.grad is None for p in net.parameters())
