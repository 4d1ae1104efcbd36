import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.func import functional_call, vmap

from tgppo.errors import NetError
from tgppo.net import (DTYPE, Mode, NetConfig, PolicyOutput, gradients, init_params, load_checkpoint,
                       log_prob_entropy, save_checkpoint)


def random_inputs(seed, L, B=1):
    g = torch.Generator().manual_seed(seed)
    cand = torch.randn(B, L, 25, dtype=DTYPE, generator=g)
    tree = torch.randn(B, 61, dtype=DTYPE, generator=g)
    return cand, tree, torch.zeros(B, L, dtype=torch.bool)


def scrambled(net, seed):
    """Give the zero-initialised matching weights random values so that
    candidates are told apart, as they are after any training."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in (net.match_tree, net.match_cand):
            lin.weight.copy_(torch.randn(lin.weight.shape, dtype=DTYPE, generator=g))
    return net


def tiny(seed=0, **kw):
    return scrambled(init_params(NetConfig(**{"d_h": 8, "n_layers": 1, "n_heads": 2, "gate_depth": 2,
                                              "dropout": 0.0, "seed": seed, **kw})), seed)


def test_fresh_network_is_uniform_over_candidates():
    net = init_params(NetConfig(d_h=16, n_layers=2, n_heads=2, seed=1))
    assert torch.all(net.match_tree.weight == 0) and torch.all(net.match_cand.weight == 0)
    out = net(*random_inputs(0, 5))
    assert torch.allclose(out.probs, torch.full((1, 5), 0.2, dtype=DTYPE), atol=1e-12)


def test_same_seed_same_parameters():
    a, b = tiny(3), tiny(3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = tiny(4)
    assert not torch.equal(a.embed_cand.weight, c.embed_cand.weight)


def test_head_count_must_divide_width():
    with pytest.raises(NetError) as e:
        init_params(NetConfig(d_h=8, n_heads=3))
    assert e.value.code == "BAD_CONFIG"


def test_embedding_shapes():
    net = init_params(NetConfig(d_h=64, n_layers=1, n_heads=4))
    assert tuple(net.embed_cand.weight.shape) == (64, 25)
    assert tuple(net.embed_tree.weight.shape) == (64, 61)


def test_singleton_probability_is_exactly_one():
    net = tiny()
    out = net(*random_inputs(0, 1))
    assert out.probs.tolist() == [[1.0]]
    lp, ent = log_prob_entropy(out, 0)
    assert lp.item() == 0.0 and ent.item() == 0.0


def test_uniform_log_prob_and_entropy():
    probs = torch.full((1, 4), 0.25, dtype=DTYPE)
    out = PolicyOutput(torch.zeros(1, 4, dtype=DTYPE), probs, torch.zeros(1, dtype=DTYPE),
                       -(probs * probs.log()).sum(-1), torch.zeros(1, 4, dtype=torch.bool))
    for a in range(4):
        lp, ent = log_prob_entropy(out, a)
        assert math.isclose(lp.item(), math.log(0.25), abs_tol=1e-12)
        assert math.isclose(ent.item(), math.log(4), abs_tol=1e-12)


def test_padded_action_rejected():
    net = tiny()
    cand, tree, mask = random_inputs(1, 4)
    mask[0, 3] = True
    out = net(cand, tree, mask)
    with pytest.raises(NetError) as e:
        log_prob_entropy(out, 3)
    assert e.value.code == "MASKED_ACTION"


def test_shape_and_finiteness_errors():
    net = tiny()
    cand, tree, mask = random_inputs(0, 3)
    with pytest.raises(NetError) as e:
        net(cand[..., :24], tree, mask)
    assert e.value.code == "SHAPE_MISMATCH"
    cand[0, 0, 0] = float("nan")
    with pytest.raises(NetError) as e:
        net(cand, tree, mask)
    assert e.value.code == "NON_FINITE"


def test_scrambled_network_separates_candidates():
    for seed in range(5):
        net = scrambled(init_params(NetConfig(d_h=16, n_layers=2, n_heads=2, seed=seed)), seed)
        assert net(*random_inputs(seed, 6)).logits.std().item() > 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(1, 9), d_h=st.sampled_from([8, 16, 32]),
       n_layers=st.integers(0, 3), heads=st.sampled_from([1, 2, 4]))
def test_permutation_and_padding(seed, L, d_h, n_layers, heads):
    net = scrambled(init_params(NetConfig(d_h=d_h, n_layers=n_layers, n_heads=heads, gate_depth=3, seed=seed)),
                    seed)
    cand, tree, mask = random_inputs(seed + 1, L)
    base = net(cand, tree, mask)
    assert abs(base.probs.sum().item() - 1.0) <= 1e-9

    perm = torch.as_tensor(np.random.default_rng(seed).permutation(L))
    out = net(cand[:, perm], tree, mask[:, perm])
    assert torch.allclose(out.logits, base.logits[:, perm], atol=1e-9, rtol=0)
    assert abs(out.value.item() - base.value.item()) <= 1e-9

    padded = torch.cat([cand, torch.zeros(1, 5, 25, dtype=DTYPE)], dim=1)
    pmask = torch.cat([mask, torch.ones(1, 5, dtype=torch.bool)], dim=1)
    out = net(padded, tree, pmask)
    assert torch.allclose(out.logits[:, :L], base.logits, atol=1e-9, rtol=0)
    assert torch.all(out.probs[:, L:] == 0.0)
    assert abs(out.value.item() - base.value.item()) <= 1e-9
    assert abs(out.probs.sum().item() - 1.0) <= 1e-9


def test_batch_rows_are_independent():
    net = tiny(2)
    cand, tree, mask = random_inputs(5, 4, B=3)
    mask[1, 2:] = True
    both = net(cand, tree, mask)
    for i in range(3):
        one = net(cand[i:i + 1], tree[i:i + 1], mask[i:i + 1])
        assert torch.allclose(one.logits, both.logits[i:i + 1], atol=1e-12)
        assert torch.allclose(one.value, both.value[i:i + 1], atol=1e-12)


def test_train_mode_dropout_only_in_train():
    net = scrambled(init_params(NetConfig(d_h=16, n_layers=2, n_heads=2, dropout=0.5, seed=1)), 1)
    x = random_inputs(0, 5)
    assert torch.equal(net(*x).logits, net(*x).logits)
    torch.manual_seed(0)
    assert not torch.equal(net(*x, mode=Mode.TRAIN).logits, net(*x).logits)


def test_zero_actor_output_layer_blocks_policy_gradient():
    net = tiny(1)
    with torch.no_grad():
        net.actor_head.layers[-1].weight.zero_()
    out = net(*random_inputs(3, 4))
    lp, _ = log_prob_entropy(out, 2)
    g = gradients(-lp, net)
    assert torch.all(g["embed_cand.weight"] == 0)


def test_value_gradient_reachability():
    net = tiny(1)
    out = net(*random_inputs(3, 4))
    g = gradients(out.value.sum(), net)
    for name, grad in g.items():
        if name.startswith("actor_head."):
            assert torch.all(grad == 0), name
    assert any(torch.any(grad != 0) for n, grad in g.items() if n.startswith("critic_"))
    assert torch.any(g["embed_cand.weight"] != 0) and torch.any(g["embed_tree.weight"] != 0)


class relu_signs:
    """Patch torch.relu so a forward pass also reports its activation pattern."""

    def __enter__(self):
        self.orig, self.seen = torch.relu, []

        def relu(x):
            self.seen.append((x > 0).reshape(-1))
            return self.orig(x)

        torch.relu = relu
        return self

    def __exit__(self, *exc):
        torch.relu = self.orig

    def take(self):
        out = torch.cat(self.seen)
        self.seen = []
        return out


def finite_difference_check(seed, h=1e-4):
    """Worst relative error of analytic vs central differences, and the number
    of entries whose +-h interval crossed a ReLU kink.

    Central differences are only a derivative oracle where the loss is smooth
    on [p - h, p + h]; entries whose activation pattern changes inside that
    interval are re-checked with the largest step h / 10**k that avoids it.
    """
    net = tiny(seed)
    cand, tree, mask = random_inputs(seed + 100, 3)
    names = [n for n, _ in net.named_parameters()]
    params = {n: p.detach() for n, p in net.named_parameters()}
    flat = torch.cat([params[n].reshape(-1) for n in names])
    P = flat.numel()

    def unflatten(v):
        out, i = {}, 0
        for n in names:
            k = params[n].numel()
            out[n] = v[i:i + k].reshape(params[n].shape)
            i += k
        return out

    def loss(p, check=True):
        out = functional_call(net, p, (cand, tree, mask), {"check_finite": check})
        return torch.log(out.probs[0, 1]) + 0.3 * out.entropy[0] + 0.7 * out.value[0] ** 2

    analytic = gradients(loss(dict(net.named_parameters())), net)
    analytic = torch.cat([analytic[n].reshape(-1) for n in names])

    with relu_signs() as rec:
        def probe(v):
            val = loss(unflatten(v), False)
            return val, rec.take()

        _, base = probe(flat)
        idx = torch.arange(P)
        numeric = torch.empty(P, dtype=DTYPE)
        kinks, step = 0, h
        while len(idx):
            e = torch.zeros(len(idx), P, dtype=DTYPE)
            e[torch.arange(len(idx)), idx] = step
            vals, pats = vmap(probe, chunk_size=1024)(torch.cat([flat + e, flat - e]))
            smooth = (pats == base).all(dim=1)
            ok = smooth[:len(idx)] & smooth[len(idx):]
            numeric[idx[ok]] = ((vals[:len(idx)] - vals[len(idx):]) / (2 * step))[ok]
            if step == h:
                kinks = int((~ok).sum())
            idx, step = idx[~ok], step / 10
            assert step > 1e-12, "activation pattern changes at every step size"
    err = float(((analytic - numeric).abs() / analytic.abs().clamp(min=1.0)).max())
    return err, kinks


def test_gradients_match_finite_differences():
    for seed in range(3):
        err, kinks = finite_difference_check(seed)
        assert err < 1e-4
        assert kinks <= 10


def test_checkpoint_round_trip(tmp_path):
    net = init_params(NetConfig(d_h=16, n_layers=2, n_heads=4, seed=9))
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net, {"episode": 3})
    back, header = load_checkpoint(path)
    assert header["extra"] == {"episode": 3}
    assert header["net_config"]["d_h"] == 16
    for (n1, p1), (n2, p2) in zip(net.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    x = random_inputs(0, 3)
    assert torch.equal(net(*x).logits, back(*x).logits)

    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    bad = tmp_path / "b.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(NetError) as e:
        load_checkpoint(bad)
    assert e.value.code == "BAD_CHECKPOINT"
    bad.write_bytes(b"garbage")
    with pytest.raises(NetError):
        load_checkpoint(bad)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", tiny(5))
    save_checkpoint(tmp_path / "b", tiny(5))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
