"""Finite-difference verification of every differentiable op and of a
complete generative-aware training graph."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import losses as L
from .models import ContextModel, ModelConfig
from .tensor import Tensor, finite_diff_grad_check


def _sq(x):
    return T.sum_all(T.mul(x, x))


def op_checks(rng):
    """(name, f, input shapes) triples covering every differentiable op."""
    d = int(rng.integers(3, 6))
    t = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    return [
        ("add", lambda a, b: _sq(T.add(a, b)), [(t, d), (t, d)]),
        ("add_scalar", lambda a: _sq(T.add(a, 1.7)), [(t, d)]),
        ("mul", lambda a, b: _sq(T.mul(a, b)), [(t, d), (t, d)]),
        ("scale", lambda a: _sq(T.scale(a, -2.5)), [(t, d)]),
        ("neg", lambda a: _sq(T.neg(a)), [(t, d)]),
        ("exp", lambda a: _sq(T.exp(a)), [(t, d)]),
        ("log", lambda a: _sq(T.log(T.add(T.mul(a, a), 0.5))), [(t, d)]),
        ("tanh", lambda a: _sq(T.tanh(a)), [(t, d)]),
        ("gelu", lambda a: _sq(T.gelu(a)), [(t, d)]),
        ("matmul", lambda a, b: _sq(T.matmul(a, b)), [(t, k), (k, d)]),
        ("transpose", lambda a: _sq(T.matmul(T.transpose(a), a)), [(t, d)]),
        ("add_rowvec", lambda a, b: _sq(T.add_rowvec(a, b)), [(t, d), (d,)]),
        ("slice_cols", lambda a: _sq(T.slice_cols(a, 1, d)), [(t, d)]),
        ("concat_cols", lambda a, b: _sq(T.concat_cols([a, b])), [(t, d), (t, k)]),
        ("concat_rows", lambda a, b: _sq(T.concat_rows([a, b])), [(t, d), (k, d)]),
        ("reshape", lambda a: _sq(T.reshape(a, (d, t))), [(t, d)]),
        ("sum_all", lambda a: T.sum_all(a), [(t, d)]),
        ("mean_rows", lambda a: _sq(T.mean_rows(a)), [(t, d)]),
        ("softmax", lambda a: _sq(T.softmax(a, axis=-1)), [(t, d)]),
        ("log_softmax", lambda a: _sq(T.log_softmax(a, axis=-1)), [(t, d)]),
        ("layer_norm", lambda a, g, b: _sq(T.layer_norm(a, g, b)),
         [(t, d), (d,), (d,)]),
        ("l2_norm", lambda a: T.l2_norm(a), [(t, d)]),
        ("embed_rows", lambda tab: _sq(T.embed_rows([0, 2, 2, 1], tab)), [(4, d)]),
        ("cross_entropy", lambda a: L.cross_entropy(a, 1), [(1, d)]),
        ("context_l2", lambda a: L.context_l2(np.linspace(0, 1, d)[None, :], a),
         [(1, d)]),
        ("context_l2_sq",
         lambda a: L.context_l2(np.linspace(0, 1, d)[None, :], a, squared=True),
         [(1, d)]),
    ]


def check_ops(rounds=20, seed=0, h=1e-5, tol=1e-4, verbose=False):
    """Every parameterized op against central differences over random shapes."""
    rng = np.random.default_rng(seed)
    worst = {"max_rel_err": 0.0, "pass": True}
    for r in range(rounds):
        for name, f, shapes in op_checks(rng):
            xs = [rng.normal(0, 1, size=s) for s in shapes]
            rep = finite_diff_grad_check(f, xs, h=h, tol=tol)
            if rep["max_rel_err"] > worst["max_rel_err"]:
                worst = dict(rep, op=name)
            if verbose and not rep["pass"]:
                print(f"  round {r}: {name} rel err {rep['max_rel_err']:.3e}")
    worst["pass"] = worst["max_rel_err"] < tol
    return worst


def check_ctc_grad(cases=20, seed=1, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    worst = {"max_rel_err": 0.0, "pass": True}
    for _ in range(cases):
        t, v = int(rng.integers(3, 7)), int(rng.integers(3, 5))
        target = list(rng.integers(1, v, size=rng.integers(1, 3)))
        if t < L.ctc_required_length(target):
            continue
        logits = rng.normal(0, 1, size=(t, v))

        def f(x):
            return L.ctc_loss(T.log_softmax(x, axis=-1), target, blank=0)

        rep = finite_diff_grad_check(f, [logits], h=h, tol=tol)
        worst["max_rel_err"] = max(worst["max_rel_err"], rep["max_rel_err"])
    worst["pass"] = worst["max_rel_err"] < tol
    return worst


def tiny_generative_aware_model(seed=0):
    """A complete generative-aware model small enough to check every
    coordinate by finite differences."""
    cfg = ModelConfig(d_feat=3, d_model=8, d_text=6, acoustic_layers=1,
                      text_layers=1, encoder_heads=2, ffn_mult=2,
                      fusion_heads=1, fusion_head_dim=4,
                      label_vocab_size=5, text_vocab_size=7)
    return ContextModel(cfg, "generative_aware", seed=seed, with_text_encoder=True)


def check_full_graph(seed=0, h=1e-5, tol=1e-4):
    """FD check of CTC + alpha * L2 through a full generative-aware graph,
    over every parameter coordinate."""
    model = tiny_generative_aware_model(seed)
    rng = np.random.default_rng(seed + 100)
    features = rng.normal(0, 1, size=(5, 3))
    target = [1, 3, 2]
    text_ids = [0, 2, 5, 1]
    names = sorted(model.store.params)
    base = {n: model.store.params[n].data.copy() for n in names}

    def loss_value_and_grads():
        model.zero_grad()
        out = model.forward(features, context_text_ids=text_ids, training=True)
        task = L.ctc_loss(T.log_softmax(out.logits, axis=-1), target, blank=0)
        loss = T.add(task, T.scale(L.context_l2(out.e_teacher, out.e_hat), 1.0))
        return loss

    loss = loss_value_and_grads()
    loss.backward()
    analytic = {n: (model.store.params[n].grad.copy()
                    if model.store.params[n].grad is not None
                    else np.zeros_like(base[n])) for n in names}

    max_rel = 0.0
    n_params = 0
    for n in names:
        if n.startswith("text."):
            # the teacher is a constant target (stop-gradient); perturbing its
            # parameters moves the loss but must not move any training gradient
            continue
        flat = model.store.params[n].data.reshape(-1)
        for j in range(flat.size):
            n_params += 1
            orig = flat[j]
            flat[j] = orig + h
            fp = float(loss_value_and_grads().data)
            flat[j] = orig - h
            fm = float(loss_value_and_grads().data)
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[n].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    teacher_grads = [n for n in names if n.startswith("text.")
                     and model.store.params[n].grad is not None
                     and np.any(model.store.params[n].grad)]
    if teacher_grads:
        return {"max_rel_err": np.inf, "pass": False, "n_params": n_params,
                "leaked_into_teacher": teacher_grads}
    return {"max_rel_err": max_rel, "pass": max_rel < tol, "n_params": n_params}


def run_grad_suite(verbose=False, rounds=20):
    ops = check_ops(rounds=rounds, verbose=verbose)
    ctc = check_ctc_grad()
    full = check_full_graph()
    if verbose:
        print(f"ops: max rel err {ops['max_rel_err']:.3e} "
              f"(worst: {ops.get('op', '-')})")
        print(f"ctc: max rel err {ctc['max_rel_err']:.3e}")
        print(f"full generative-aware graph ({full['n_params']} params): "
              f"max rel err {full['max_rel_err']:.3e}")
    max_rel = max(ops["max_rel_err"], ctc["max_rel_err"], full["max_rel_err"])
    return {"max_rel_err": max_rel,
            "pass": ops["pass"] and ctc["pass"] and full["pass"]}
